//! Shared helpers for the integration and acceptance targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rum_core::market::RawNode;
use rum_core::model::{Model, ModelFile, SolverConfig, UtilityConfig};

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn fixture(name: &str) -> Model {
    Model::load(&fixture_dir().join(format!("{name}.json"))).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Fixtures that satisfy every assumption, by file stem.
pub const SOLVABLE: &[&str] = &[
    "binomial",
    "robust_binomial",
    "example_mloc",
    "mixture",
    "complete_binomial_2p",
    "rectangular_binomial_2p",
    "non_m_stable",
    "trinomial_m_stable",
    "two_asset",
    "sampled",
];

fn dirichlet(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln() + 0.05).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// A random arbitrage-free model: at most 2 periods, 2 or 3 branches per
/// node, `d` in {1, 2} (d = 2 only with 3 branches), at most 3 strictly
/// positive generators, exponential or mixture-exponential utility.
///
/// Increments are drawn so that a random strictly positive kernel is a
/// martingale kernel, which rules out arbitrage.
pub fn random_model_file(seed: u64) -> ModelFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = rng.random_range(1..=2usize);
    let d = if rng.random_bool(0.3) { 2 } else { 1 };
    let mut nodes = vec![RawNode { id: "r".into(), parent: None, time: 0 }];
    let mut prices = BTreeMap::from([("r".to_string(), vec![1.0; d])]);
    let mut frontier = vec!["r".to_string()];
    for t in 1..=horizon {
        let mut next = Vec::new();
        for p in &frontier {
            let b = if d == 2 { 3 } else { rng.random_range(2..=3usize) };
            let q = dirichlet(&mut rng, b);
            let mut incs: Vec<Vec<f64>> =
                (0..b - 1).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            // Last increment closes the martingale condition under q.
            let last: Vec<f64> =
                (0..d).map(|j| -(0..b - 1).map(|i| q[i] * incs[i][j]).sum::<f64>() / q[b - 1]).collect();
            incs.push(last);
            let base = prices[p].clone();
            for (i, inc) in incs.iter().enumerate() {
                let id = format!("{p}{i}");
                nodes.push(RawNode { id: id.clone(), parent: Some(p.clone()), time: t });
                prices.insert(id.clone(), base.iter().zip(inc).map(|(s, x)| s + x).collect());
                next.push(id);
            }
        }
        frontier = next;
    }
    let n_gen = rng.random_range(1..=3usize);
    let generators = (0..n_gen)
        .map(|_| frontier.iter().cloned().zip(dirichlet(&mut rng, frontier.len())).collect())
        .collect();
    let utility = if rng.random_bool(0.25) {
        UtilityConfig::MixtureExponential {
            weights: vec![1.0, rng.random_range(0.2..1.0)],
            rates: vec![rng.random_range(0.5..1.5), rng.random_range(1.5..3.0)],
        }
    } else {
        UtilityConfig::Exponential { alpha: rng.random_range(0.5..2.0) }
    };
    ModelFile {
        schema: 1,
        name: format!("random-{seed}"),
        horizon,
        d,
        nodes,
        prices,
        generators,
        utility,
        x: rng.random_range(-1.0..1.0),
        endowment: None,
        solver: SolverConfig::default(),
        expected_failures: Vec::new(),
    }
}

pub fn random_model(seed: u64) -> Model {
    random_model_file(seed).into_model().expect("random model is valid")
}
