//! `rum`: batch front-end over model JSON files.
//!
//! Exit codes: 0 success, 2 validation or schema failure, 3 solver
//! non-convergence, 4 verification failure, 5 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rum_core::model::{Model, ModelError};
use rum_core::pipeline::{render_text, Pipeline, PipelineError, RunOptions, RunReport, Stage};
use rum_core::report::to_json;

#[derive(Parser)]
#[command(name = "rum", version, about = "Robust utility maximization on finite event-tree markets")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true, env = "RUM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the model assumptions and print the assumption report.
    Validate(Common),
    /// Solve the dual problem.
    Solve(Common),
    /// Solve, then build the optimal claim and its replicating strategy.
    Strategy(Common),
    /// Run the structural checks on the solution.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of checks to run.
        #[arg(long, value_delimiter = ',')]
        checks: Vec<String>,
    },
    /// Compare the dual value with a brute-force search over strategies.
    Oracle(Common),
    /// Run every stage and emit the full report.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Model JSON file.
    model: PathBuf,
    /// Initial capital; overrides the model file.
    #[arg(long, allow_negative_numbers = true)]
    x: Option<f64>,
    /// Terminal endowment as a `{terminal_id: payoff}` JSON object, or `@path` to a file holding one.
    #[arg(long)]
    endowment: Option<String>,
    #[arg(long)]
    cert_tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Proceed even when an assumption fails.
    #[arg(long)]
    force: bool,
    /// Add wall-clock timings to the report (output is then not reproducible byte for byte).
    #[arg(long)]
    timings: bool,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Write the report here instead of stdout.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
}

fn exit_code(e: &PipelineError) -> u8 {
    match e.code() {
        "io" => 5,
        "solver" => 3,
        _ => 2,
    }
}

fn fail(e: &PipelineError) -> ExitCode {
    eprintln!("error[{}]: {e}", e.code());
    ExitCode::from(exit_code(e))
}

fn load(c: &Common) -> Result<Pipeline, PipelineError> {
    let model = Model::load(&c.model)?;
    let endowment = match &c.endowment {
        Some(arg) => {
            let text = match arg.strip_prefix('@') {
                Some(path) => std::fs::read_to_string(path)
                    .map_err(|source| ModelError::Io { path: path.to_string(), source })?,
                None => arg.clone(),
            };
            Some(model.parse_endowment(&text)?)
        }
        None => None,
    };
    let opts = RunOptions {
        x: c.x,
        endowment,
        cert_tol: c.cert_tol,
        max_iter: c.max_iter,
        seed: c.seed,
        force: c.force,
        timings: c.timings,
    };
    Pipeline::new(model, &opts)
}

fn render(report: &RunReport, format: Format) -> String {
    match format {
        Format::Json => to_json(report),
        Format::Text => {
            let mut out = format!("model {:?}  x = {}  seed = {}\n", report.model, report.x, report.seed);
            let a = &report.assumptions;
            for (name, s) in [("A1", &a.a1), ("A2", &a.a2), ("A3", &a.a3), ("A4", &a.a4), ("A5", &a.a5), ("A6", &a.a6)] {
                out.push_str(&format!("{name}: {}\n", serde_json::to_string(s).unwrap_or_default()));
            }
            if let Some(d) = &report.dual {
                out.push_str(&format!(
                    "dual value {:.12}  lambda {:.12}  certificate worst slack {:.3e}\n",
                    d.value, d.lambda_hat, d.certificate.worst
                ));
            }
            if let Some(o) = &report.oracle {
                out.push_str(&format!("oracle: {}\n", serde_json::to_string(o).unwrap_or_default()));
            }
            if let Some(v) = &report.verification {
                out.push_str(&render_text(v));
            }
            out
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rum_core::pipeline::configure_threads(n);
    }
    let (common, stage, checks) = match &cli.command {
        Command::Validate(c) => (c, Stage::Validate, Vec::new()),
        Command::Solve(c) => (c, Stage::Solve, Vec::new()),
        Command::Strategy(c) => (c, Stage::Strategy, Vec::new()),
        Command::Verify { common, checks } => (common, Stage::Verify, checks.clone()),
        Command::Oracle(c) => (c, Stage::Oracle, Vec::new()),
        Command::Report(c) => (c, Stage::Full, Vec::new()),
    };
    let mut pipeline = match load(common) {
        Ok(p) => p,
        Err(e) => return fail(&e),
    };
    let report = match pipeline.run(stage, &checks) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    let text = render(&report, common.format);
    match &common.output {
        Some(path) => {
            if let Err(e) = std::fs::write(path, &text) {
                eprintln!("error[io]: cannot write {}: {e}", path.display());
                return ExitCode::from(5);
            }
        }
        None => print!("{text}"),
    }
    if stage == Stage::Validate && !report.assumptions.passed {
        return ExitCode::from(2);
    }
    if !report.passed() {
        return ExitCode::from(4);
    }
    ExitCode::SUCCESS
}
