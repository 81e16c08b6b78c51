//! Numerical checks of the optimality structure of a solved model: uniform
//! supermartingale property of the optimal wealth, the dynamic variational
//! inequalities at stopping times, the entropy convexity inequality, and the
//! duality chain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dual::DualOptimizer;
use crate::market::{AdaptedProcess, EventTree, StoppingTime};
use crate::measures::{is_m_stable, paste, MStability, TreeMeasure, UncertaintySet};
use crate::polytope::MartingalePolytope;
use crate::utility::{entropy, EntropyError, Utility};

/// Tolerance of conditional-expectation inequalities.
pub const COND_TOL: f64 = 1e-8;
/// Tolerance of polytope membership after pasting.
pub const PASTING_TOL: f64 = 1e-9;
/// Tolerance of the entropy convexity inequality.
pub const CONVEXITY_TOL: f64 = 1e-9;
/// Allowed excess of the brute-force primal over the dual value.
pub const PRIMAL_GAP_TOL: f64 = 1e-4;
/// Allowed gap between the indirect value of the claim and the dual value.
pub const INDIRECT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Skipped { reason: String },
    /// Failed on a fixture where failure is the documented outcome.
    ExpectedFailConfirmed,
    /// Passed on a fixture where failure is the documented outcome.
    ExpectedFailNotReproduced,
}

impl Status {
    pub fn is_ok(&self) -> bool {
        matches!(self, Status::Pass | Status::Skipped { .. } | Status::ExpectedFailConfirmed)
    }
}

/// Where a check is tightest or violated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub node: String,
    /// Which measure or sample produced the slack.
    pub measure: String,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// Plain statement of what a pass certifies.
    pub certifies: String,
    pub status: Status,
    /// Smallest slack over all evaluated inequalities; negative beyond the
    /// tolerance means failure.
    pub worst_slack: f64,
    pub tolerance: f64,
    pub evaluated: usize,
    pub witness: Option<Witness>,
}

impl CheckResult {
    fn new(name: &str, certifies: &str, tolerance: f64) -> CheckResult {
        CheckResult {
            name: name.into(),
            certifies: certifies.into(),
            status: Status::Pass,
            worst_slack: f64::INFINITY,
            tolerance,
            evaluated: 0,
            witness: None,
        }
    }

    fn skipped(name: &str, certifies: &str, reason: impl Into<String>) -> CheckResult {
        CheckResult { status: Status::Skipped { reason: reason.into() }, ..CheckResult::new(name, certifies, 0.0) }
    }

    fn record(&mut self, slack: f64, node: impl FnOnce() -> String, measure: impl FnOnce() -> String) {
        self.evaluated += 1;
        let slack = if slack.is_nan() { f64::NEG_INFINITY } else { slack };
        if slack < self.worst_slack {
            self.worst_slack = slack;
            self.witness = Some(Witness { node: node(), measure: measure(), slack });
        }
    }

    fn finish(mut self) -> CheckResult {
        if self.worst_slack < -self.tolerance {
            self.status = Status::Fail;
        } else {
            self.witness = None;
        }
        self
    }

    /// Reinterprets the result on a fixture whose documented outcome is failure.
    pub fn expect_failure(mut self) -> CheckResult {
        self.status = match self.status {
            Status::Fail => Status::ExpectedFailConfirmed,
            Status::Pass => Status::ExpectedFailNotReproduced,
            s => s,
        };
        self
    }

    fn merge(&mut self, other: CheckResult) {
        self.evaluated += other.evaluated;
        if other.worst_slack < self.worst_slack {
            self.worst_slack = other.worst_slack;
            self.witness = other.witness;
        }
        if other.status == Status::Fail {
            self.status = Status::Fail;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl VerificationReport {
    pub fn new(seed: u64, checks: Vec<CheckResult>) -> VerificationReport {
        let passed = checks.iter().all(|c| c.status.is_ok());
        VerificationReport { seed, checks, passed }
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

const SUPERMARTINGALE: &str =
    "the wealth process is a supermartingale under the measure: conditional expected next-step wealth \
     never exceeds current wealth";

/// `E_Q[W(child) | n] <= W(n) + tol` at every node charged by `q`.
pub fn check_supermartingale(tree: &EventTree, wealth: &AdaptedProcess, q: &TreeMeasure, label: &str) -> CheckResult {
    let mut r = CheckResult::new("supermartingale", SUPERMARTINGALE, COND_TOL);
    let masses = q.node_masses(tree);
    for n in tree.non_terminals() {
        if masses[n] <= 0.0 {
            continue;
        }
        let next: f64 = tree.children(n).iter().map(|&c| masses[c] * wealth.at(c)).sum::<f64>() / masses[n];
        r.record(wealth.at(n) - next, || tree.label(n).to_string(), || label.to_string());
    }
    r.finish()
}

/// Largest `|E_Q[W(child) | n] - W(n)|`: zero for a martingale.
pub fn martingale_deviation(tree: &EventTree, wealth: &AdaptedProcess, q: &TreeMeasure) -> f64 {
    let masses = q.node_masses(tree);
    tree.non_terminals()
        .filter(|&n| masses[n] > 0.0)
        .map(|n| {
            let next: f64 = tree.children(n).iter().map(|&c| masses[c] * wealth.at(c)).sum::<f64>() / masses[n];
            (next - wealth.at(n)).abs()
        })
        .fold(0.0, f64::max)
}

/// Supermartingale property under every measure of the sample, which
/// consists of the finite-entropy vertices and random mixtures of them.
pub fn check_theta_v_membership(
    tree: &EventTree,
    wealth: &AdaptedProcess,
    sample: &[(String, TreeMeasure)],
) -> CheckResult {
    let mut r = CheckResult::new(
        "supermartingale",
        "the strategy is admissible: its wealth is a supermartingale under every sampled finite-entropy \
         martingale measure (vertices plus random mixtures)",
        COND_TOL,
    );
    for (label, q) in sample {
        r.merge(check_supermartingale(tree, wealth, q, label));
    }
    r.finish()
}

/// `-V'(l dQ/dP)` per terminal, i.e. the optimal total terminal wealth.
fn optimal_wealth(dual: &DualOptimizer, utility: &Utility) -> Option<Vec<f64>> {
    dual.density
        .iter()
        .map(|z| z.finite().filter(|&v| v > 0.0).and_then(|v| utility.inverse_marginal(v).ok()))
        .collect()
}

fn cond(tree: &EventTree, m: &TreeMeasure, node: usize, f: &[f64]) -> Option<f64> {
    m.conditional_expect(tree, node, f)
}

/// `E_Q[V'(z) | F_tau] >= E_Qhat[V'(z) | F_tau]` at every `tau` node charged
/// by `q`, with `z = l dQhat/dPhat`.
pub fn check_dvi(
    tree: &EventTree,
    dual: &DualOptimizer,
    utility: &Utility,
    measures: &[(String, TreeMeasure)],
    taus: &[StoppingTime],
) -> CheckResult {
    const NAME: &str = "dvi";
    const CERT: &str = "dynamic variational inequality: at every stopping-time node, the conditional mean of \
                        the conjugate derivative at the dual density is smallest under the dual martingale \
                        measure";
    let Some(w) = optimal_wealth(dual, utility) else {
        return CheckResult::skipped(NAME, CERT, "dual density vanishes or is infinite somewhere");
    };
    if !dual.q_equivalent {
        return CheckResult::skipped(NAME, CERT, "dual martingale measure is not equivalent to the reference");
    }
    let vprime: Vec<f64> = w.iter().map(|v| -v).collect();
    let mut r = CheckResult::new(NAME, CERT, COND_TOL);
    for (label, q) in measures {
        for tau in taus {
            for &a in tau.nodes() {
                let Some(lhs) = cond(tree, q, a, &vprime) else { continue };
                let rhs = cond(tree, &dual.q_hat, a, &vprime).expect("equivalent measure");
                r.record(lhs - rhs, || tree.label(a).to_string(), || label.clone());
            }
        }
    }
    r.finish()
}

/// `E_P[U(x + W_T + B) | F_tau] >= E_Phat[U(x + W_T + B) | F_tau]` at every
/// `tau` node charged by both measures, where `W` is the optimal wealth.
#[allow(clippy::too_many_arguments)]
pub fn check_vicondp(
    tree: &EventTree,
    dual: &DualOptimizer,
    terminal_gains: &[f64],
    utility: &Utility,
    x: f64,
    endowment: Option<&[f64]>,
    measures: &[(String, TreeMeasure)],
    taus: &[StoppingTime],
) -> CheckResult {
    let mut r = CheckResult::new(
        "vicondp",
        "conditional least-favorable property: at every stopping-time node, the dual prior minimizes the \
         conditional expected utility of the optimal wealth over the uncertainty set",
        COND_TOL,
    );
    let uw: Vec<f64> = (0..terminal_gains.len())
        .map(|k| utility.u(x + terminal_gains[k] + endowment.map_or(0.0, |b| b[k])))
        .collect();
    for (label, p) in measures {
        for tau in taus {
            for &a in tau.nodes() {
                let (Some(lhs), Some(rhs)) = (cond(tree, p, a, &uw), cond(tree, &dual.p_hat, a, &uw)) else {
                    continue;
                };
                r.record(lhs - rhs, || tree.label(a).to_string(), || label.clone());
            }
        }
    }
    r.finish()
}

fn random_measure(rng: &mut ChaCha8Rng, n: usize, zero_prob: f64) -> Vec<f64> {
    loop {
        let w: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < zero_prob { 0.0 } else { -(1.0 - rng.random::<f64>()).ln() })
            .collect();
        let s: f64 = w.iter().sum();
        if s > 0.0 {
            return w.into_iter().map(|v| v / s).collect();
        }
    }
}

fn scaled(v: &[f64], c: f64) -> Vec<f64> {
    v.iter().map(|a| a * c).collect()
}

fn mix2(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| t * x + (1.0 - t) * y).collect()
}

/// `V(aQ + (1-a)Q' | gP + (1-g)P') <= g V((a/g) Q | P) + (1-g) V(((1-a)/(1-g)) Q' | P')`
/// on seeded random quadruples of measures on `n` points, until `samples`
/// draws with a finite right side have been evaluated. Draws whose right
/// side is infinite carry no information and are redrawn.
pub fn check_conseq_rae(utility: &Utility, n: usize, samples: usize, seed: u64) -> Result<CheckResult, EntropyError> {
    let mut r = CheckResult::new(
        "conseq_rae",
        "convexity of the generalized entropy under separate mixing of the two arguments with \
         different weights",
        CONVEXITY_TOL,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = 0;
    while r.evaluated < samples && draw < 100 * samples.max(1) {
        draw += 1;
        let q = random_measure(&mut rng, n, 0.15);
        let qp = random_measure(&mut rng, n, 0.15);
        let p = random_measure(&mut rng, n, 0.15);
        let pp = random_measure(&mut rng, n, 0.15);
        let a: f64 = rng.random_range(0.01..0.99);
        let g: f64 = rng.random_range(0.01..0.99);
        let rhs = entropy(&scaled(&q, a / g), &p, utility)?.scale(g)
            + entropy(&scaled(&qp, (1.0 - a) / (1.0 - g)), &pp, utility)?.scale(1.0 - g);
        let Some(rhs) = rhs.finite() else { continue };
        let lhs = entropy(&mix2(&q, &qp, a), &mix2(&p, &pp, g), utility)?;
        r.record(rhs - lhs.to_f64(), || "-".into(), || format!("draw {draw}"));
    }
    Ok(r.finish())
}

/// `brute <= indirect + 1e-4`, `|indirect - dual| <= 1e-6`, and Young's
/// inequality `E_P[U(X)] <= V(l Q | P) + l E_Q[X]` on random draws.
pub fn check_duality_chain(
    brute_force: Option<f64>,
    indirect: f64,
    dual_value: f64,
    utility: &Utility,
    n: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<CheckResult>, EntropyError> {
    let mut gap = CheckResult::new(
        "duality_gap",
        "no duality gap: the claim built from the dual solution attains the dual value",
        INDIRECT_TOL,
    );
    gap.record(-(indirect - dual_value).abs(), || "root".into(), || "indirect vs dual".into());
    let mut out = vec![gap.finish()];
    match brute_force {
        Some(b) => {
            let mut bf = CheckResult::new(
                "primal_oracle",
                "a direct multi-start search over strategies does not exceed the robust value of the \
                 constructed claim",
                PRIMAL_GAP_TOL,
            );
            bf.record(indirect - b, || "root".into(), || "brute force vs indirect".into());
            out.push(bf.finish());
        }
        None => out.push(CheckResult::skipped(
            "primal_oracle",
            "a direct multi-start search over strategies does not exceed the robust value of the \
             constructed claim",
            "strategy dimension above the brute-force cap or search not requested",
        )),
    }

    let mut young = CheckResult::new(
        "young_inequality",
        "weak duality pointwise: expected utility of any payoff is bounded by the entropy of any scaled \
         measure plus the scaled price of the payoff",
        CONVEXITY_TOL,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..samples {
        let q = random_measure(&mut rng, n, 0.0);
        let p = random_measure(&mut rng, n, 0.0);
        let l: f64 = (rng.random_range(-3.0..3.0f64)).exp();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lhs: f64 = p.iter().zip(&x).map(|(pi, xi)| pi * utility.u(*xi)).sum();
        let rhs = entropy(&scaled(&q, l), &p, utility)?.to_f64() + l * q.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
        young.record(rhs - lhs, || "-".into(), || format!("draw {i}"));
    }
    out.push(young.finish());
    Ok(out)
}

/// Every defined pasting of two polytope vertices at every stopping time
/// satisfies the martingale constraints, and the vertex set together with a
/// strictly positive interior point passes the hull-based m-stability test.
pub fn check_polytope_pasting(poly: &MartingalePolytope, taus: &[StoppingTime]) -> CheckResult {
    let mut r = CheckResult::new(
        "pasting",
        "the set of martingale measures is closed under pasting at stopping times",
        PASTING_TOL,
    );
    let tree = &poly.market().tree;
    let vs = &poly.vertices().vertices;
    for (i, q) in vs.iter().enumerate() {
        for (j, qp) in vs.iter().enumerate() {
            for tau in taus {
                let Ok(pasted) = paste(tree, q, qp, tau) else { continue };
                r.record(-poly.max_violation(&pasted), || tau.labels(tree).join(","), || format!("vertex[{i}] | vertex[{j}]"));
            }
        }
    }
    if let Some(interior) = poly.interior_point() {
        let mut gens = vs.clone();
        gens.push(interior);
        let set = UncertaintySet::new(gens).expect("nonempty vertex set");
        if let MStability::Unstable { witness } = is_m_stable(tree, &set, taus) {
            r.record(
                -witness.distance,
                || witness.stopping_time.join(","),
                || format!("vertex[{}] | vertex[{}]", witness.first, witness.second),
            );
        }
    }
    r.finish()
}
