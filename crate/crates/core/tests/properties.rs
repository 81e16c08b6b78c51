//! Randomized invariants over generated markets, measures and utilities.

mod common;

use common::random_model;
use proptest::prelude::*;
use rum_core::dual::{solve_dual, DualOptions, DualProblem};
use rum_core::market::{enumerate_stopping_times, stochastic_integral, EventTree, StoppingTime, Strategy as Position};
use rum_core::measures::{paste, TreeMeasure, UncertaintySet};
use rum_core::model::Model;
use rum_core::pipeline::{Pipeline, RunOptions};
use rum_core::polytope::{filter_m_v, MartingalePolytope};
use rum_core::utility::{entropy, robust_entropy, RobustEntropyOptions, Utility};
use rum_core::verify::Status;

fn measure(raw: &[f64]) -> TreeMeasure {
    TreeMeasure::normalized(raw.iter().map(|v| v + 1e-3).collect()).unwrap()
}

fn utility_strategy() -> impl Strategy<Value = Utility> {
    prop_oneof![
        (0.3..3.0f64).prop_map(|a| Utility::exponential(a).unwrap()),
        (0.1..1.0f64, 0.5..1.5f64, 1.5..3.0f64)
            .prop_map(|(w, a, b)| Utility::mixture_exponential(vec![1.0, w], vec![a, b]).unwrap()),
    ]
}

fn entropy_f(nu: &[f64], p: &[f64], u: &Utility) -> f64 {
    entropy(nu, p, u).unwrap().to_f64()
}

/// Random mixture of the polytope vertices.
fn vertex_mixture(poly: &MartingalePolytope, raw: &[f64]) -> TreeMeasure {
    let vs = &poly.vertices().vertices;
    let refs: Vec<&TreeMeasure> = vs.iter().collect();
    let coeffs: Vec<f64> = (0..vs.len()).map(|i| raw[i % raw.len()] + 1e-3).collect();
    let s: f64 = coeffs.iter().sum();
    TreeMeasure::mixture(&refs, &coeffs.iter().map(|c| c / s).collect::<Vec<_>>())
}

fn dual(model: &Model) -> rum_core::dual::DualOptimizer {
    let poly = MartingalePolytope::assemble(&model.market);
    let prob =
        DualProblem { market: &model.market, set: &model.set, utility: &model.utility, x: model.x, endowment: None };
    solve_dual(&prob, &poly, &DualOptions::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tree_round_trips_through_raw_nodes(b in prop::collection::vec(1usize..4, 1..4)) {
        let tree = EventTree::uniform(&b);
        let back = EventTree::validate(&tree.to_raw(), b.len()).unwrap();
        prop_assert_eq!(back, tree);
    }

    #[test]
    fn stopping_times_partition_the_terminals(b in prop::collection::vec(1usize..4, 1..4)) {
        let tree = EventTree::uniform(&b);
        for tau in enumerate_stopping_times(&tree, 10_000).unwrap() {
            for (k, &w) in tree.terminals().iter().enumerate() {
                let hits = tau.nodes().iter().filter(|&&a| tree.is_ancestor_or_self(a, w)).count();
                prop_assert_eq!(hits, 1);
                prop_assert!(tree.is_ancestor_or_self(tau.node_for_terminal(k), w));
            }
        }
    }

    #[test]
    fn stochastic_integral_is_linear(seed in 0u64..500, a in -3.0..3.0f64, c in -3.0..3.0f64,
                                     r1 in prop::collection::vec(-2.0..2.0f64, 64),
                                     r2 in prop::collection::vec(-2.0..2.0f64, 64)) {
        let m = random_model(seed).market;
        let (tree, dim, len) = (&m.tree, m.dim(), m.strategy_len());
        let t1 = Position::from_flat(tree, dim, &r1[..len]);
        let t2 = Position::from_flat(tree, dim, &r2[..len]);
        let mixed: Vec<f64> = (0..len).map(|i| a * r1[i] + c * r2[i]).collect();
        let t = Position::from_flat(tree, dim, &mixed);
        let i1 = stochastic_integral(tree, &t1, &m.prices).unwrap();
        let i2 = stochastic_integral(tree, &t2, &m.prices).unwrap();
        let i = stochastic_integral(tree, &t, &m.prices).unwrap();
        for n in 0..tree.len() {
            prop_assert!((i.at(n) - a * i1.at(n) - c * i2.at(n)).abs() < 1e-10);
        }
        prop_assert_eq!(i.at(tree.root()), 0.0);
    }

    #[test]
    fn pasting_gives_a_probability_agreeing_before_tau(b in prop::collection::vec(2usize..4, 2..4),
                                                       r1 in prop::collection::vec(0.0..1.0f64, 27),
                                                       r2 in prop::collection::vec(0.0..1.0f64, 27)) {
        let tree = EventTree::uniform(&b);
        let n = tree.n_terminals();
        let q = measure(&r1[..n]);
        let qp = measure(&r2[..n]);
        for tau in enumerate_stopping_times(&tree, 10_000).unwrap() {
            let bar = paste(&tree, &q, &qp, &tau).unwrap();
            prop_assert!((bar.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(bar.weights().iter().all(|&w| w >= 0.0));
            for &a in tau.nodes() {
                prop_assert!((bar.node_mass(&tree, a) - q.node_mass(&tree, a)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pasting_at_root_and_horizon_is_trivial(b in prop::collection::vec(2usize..4, 1..4),
                                              r1 in prop::collection::vec(0.0..1.0f64, 27),
                                              r2 in prop::collection::vec(0.0..1.0f64, 27)) {
        let tree = EventTree::uniform(&b);
        let n = tree.n_terminals();
        let q = measure(&r1[..n]);
        let qp = measure(&r2[..n]);
        let root = StoppingTime::at_time(&tree, 0);
        let end = StoppingTime::at_time(&tree, tree.horizon());
        prop_assert!(paste(&tree, &q, &qp, &root).unwrap().max_abs_diff(&qp) < 1e-12);
        prop_assert!(paste(&tree, &q, &qp, &end).unwrap().max_abs_diff(&q) < 1e-12);
    }

    #[test]
    fn pasted_martingale_measures_are_martingale(seed in 0u64..500, r1 in prop::collection::vec(0.0..1.0f64, 8),
                                                 r2 in prop::collection::vec(0.0..1.0f64, 8)) {
        let m = random_model(seed).market;
        let poly = MartingalePolytope::assemble(&m);
        let q = vertex_mixture(&poly, &r1);
        let qp = vertex_mixture(&poly, &r2);
        prop_assert!(poly.max_violation(&q) < 1e-10);
        for tau in enumerate_stopping_times(&m.tree, 10_000).unwrap() {
            let bar = paste(&m.tree, &q, &qp, &tau).unwrap();
            prop_assert!(poly.max_violation(&bar) < 1e-10);
        }
    }

    #[test]
    fn young_inequality_and_conjugate_inversion(u in utility_strategy(), x in -5.0..5.0f64, y in 1e-3..10.0f64) {
        prop_assert!(u.u(x) <= u.conjugate(y).unwrap() + x * y + 1e-10);
        let z = u.du(x);
        let back = -u.conjugate_derivative(z).unwrap();
        prop_assert!((back - x).abs() < 1e-7 * x.abs().max(1.0), "x = {x}, recovered {back}");
        prop_assert!((u.inverse_marginal(z).unwrap() - x).abs() < 1e-7 * x.abs().max(1.0));
    }

    #[test]
    fn entropy_is_jointly_convex(u in utility_strategy(), t in 0.0..1.0f64, l1 in 0.05..5.0f64, l2 in 0.05..5.0f64,
                                 raw in prop::collection::vec(0.0..1.0f64, 24)) {
        let (q1, q2, p1, p2) = (measure(&raw[0..6]), measure(&raw[6..12]), measure(&raw[12..18]), measure(&raw[18..24]));
        let nu1: Vec<f64> = q1.weights().iter().map(|q| l1 * q).collect();
        let nu2: Vec<f64> = q2.weights().iter().map(|q| l2 * q).collect();
        let nu: Vec<f64> = nu1.iter().zip(&nu2).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        let p: Vec<f64> = p1.weights().iter().zip(p2.weights()).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        let lhs = entropy_f(&nu, &p, &u);
        let rhs = t * entropy_f(&nu1, p1.weights(), &u) + (1.0 - t) * entropy_f(&nu2, p2.weights(), &u);
        prop_assert!(lhs <= rhs + 1e-9 * rhs.abs().max(1.0), "{lhs} > {rhs}");
    }

    #[test]
    fn entropy_dominates_conjugate_of_the_mass(u in utility_strategy(), l in 0.01..10.0f64,
                                               raw in prop::collection::vec(0.0..1.0f64, 12)) {
        let (q, p) = (measure(&raw[..6]), measure(&raw[6..]));
        let nu: Vec<f64> = q.weights().iter().map(|v| l * v).collect();
        let v = u.conjugate(l).unwrap();
        prop_assert!(entropy_f(&nu, p.weights(), &u) >= v - 1e-10 * v.abs().max(1.0));
    }

    #[test]
    fn vertex_mixtures_are_martingale_measures(seed in 0u64..500, raw in prop::collection::vec(0.0..1.0f64, 8)) {
        let m = random_model(seed).market;
        let poly = MartingalePolytope::assemble(&m);
        prop_assert!(poly.vertices().complete);
        for v in &poly.vertices().vertices {
            prop_assert!(poly.is_martingale_measure(v));
        }
        prop_assert!(poly.is_martingale_measure(&vertex_mixture(&poly, &raw)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dual_objective_is_convex_on_feasible_pairs(seed in 0u64..500, l1 in 0.05..5.0f64, l2 in 0.05..5.0f64,
                                                  rq in prop::collection::vec(0.0..1.0f64, 16),
                                                  rp in prop::collection::vec(0.0..1.0f64, 6)) {
        let model = random_model(seed);
        let poly = MartingalePolytope::assemble(&model.market);
        let (q1, q2) = (vertex_mixture(&poly, &rq[..8]), vertex_mixture(&poly, &rq[8..]));
        let k = model.set.len();
        let weights = |r: &[f64]| {
            let w: Vec<f64> = (0..k).map(|i| r[i % r.len()] + 1e-3).collect();
            let s: f64 = w.iter().sum();
            w.iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let (p1, p2) = (model.set.mix(&weights(&rp[..3])), model.set.mix(&weights(&rp[3..])));
        let objective = |nu: &[f64], p: &[f64]| entropy_f(nu, p, &model.utility) + nu.iter().sum::<f64>() * model.x;
        let nu1: Vec<f64> = q1.weights().iter().map(|v| l1 * v).collect();
        let nu2: Vec<f64> = q2.weights().iter().map(|v| l2 * v).collect();
        let mid_nu: Vec<f64> = nu1.iter().zip(&nu2).map(|(a, b)| 0.5 * (a + b)).collect();
        let mid_p: Vec<f64> = p1.weights().iter().zip(p2.weights()).map(|(a, b)| 0.5 * (a + b)).collect();
        let avg = 0.5 * (objective(&nu1, p1.weights()) + objective(&nu2, p2.weights()));
        prop_assert!(objective(&mid_nu, &mid_p) <= avg + 1e-9);
    }

    #[test]
    fn adding_generators_never_shrinks_the_finite_entropy_vertices(seed in 0u64..500) {
        let model = random_model(seed);
        let poly = MartingalePolytope::assemble(&model.market);
        let first = UncertaintySet::new(model.set.generators()[..1].to_vec()).unwrap();
        let small = filter_m_v(&poly, &first, &model.utility).unwrap();
        let large = filter_m_v(&poly, &model.set, &model.utility).unwrap();
        for (a, b) in small.vertices.iter().zip(&large.vertices) {
            prop_assert!(!a.robust_entropy.is_finite() || b.robust_entropy.is_finite());
            prop_assert!(b.robust_entropy.to_f64() <= a.robust_entropy.to_f64() + 1e-7);
        }
    }

    #[test]
    fn weak_duality_against_arbitrary_strategies(seed in 0u64..500, raw in prop::collection::vec(-3.0..3.0f64, 64)) {
        let model = random_model(seed);
        let d = dual(&model);
        let m = &model.market;
        let len = m.strategy_len();
        let theta = Position::from_flat(&m.tree, m.dim(), &raw[..len]);
        let gains = m.terminal_gains(&theta).unwrap();
        let worst = model
            .set
            .generators()
            .iter()
            .map(|p| p.expect(&gains.iter().map(|g| model.utility.u(model.x + g)).collect::<Vec<_>>()))
            .fold(f64::INFINITY, f64::min);
        prop_assert!(worst <= d.value + 1e-9, "{worst} > {}", d.value);
    }

    #[test]
    fn dual_value_is_below_every_feasible_triple(seed in 0u64..500, l in 0.01..5.0f64,
                                                 rq in prop::collection::vec(0.0..1.0f64, 8),
                                                 rp in prop::collection::vec(0.0..1.0f64, 3)) {
        let model = random_model(seed);
        let d = dual(&model);
        let poly = MartingalePolytope::assemble(&model.market);
        let q = vertex_mixture(&poly, &rq);
        let k = model.set.len();
        let w: Vec<f64> = (0..k).map(|i| rp[i % rp.len()] + 1e-3).collect();
        let s: f64 = w.iter().sum();
        let p = model.set.mix(&w.iter().map(|v| v / s).collect::<Vec<_>>());
        let nu: Vec<f64> = q.weights().iter().map(|v| l * v).collect();
        let bound = entropy_f(&nu, p.weights(), &model.utility) + l * model.x;
        prop_assert!(d.value <= bound + 1e-9 * bound.abs().max(1.0), "{} > {bound}", d.value);
    }

    #[test]
    fn lambda_section_is_minimized_at_lambda_hat(seed in 0u64..500, f in 0.2..5.0f64) {
        let model = random_model(seed);
        let d = dual(&model);
        let section = |l: f64| {
            let nu: Vec<f64> = d.q_hat.weights().iter().map(|v| l * v).collect();
            entropy_f(&nu, d.p_hat.weights(), &model.utility) + l * model.x
        };
        let at_hat = section(d.lambda_hat);
        prop_assert!((at_hat - d.value).abs() < 1e-9 * d.value.abs().max(1.0));
        prop_assert!(at_hat <= section(f * d.lambda_hat) + 1e-10);
    }

    #[test]
    fn dual_prior_attains_the_robust_entropy(seed in 0u64..500) {
        let model = random_model(seed);
        let d = dual(&model);
        let nu: Vec<f64> = d.q_hat.weights().iter().map(|v| d.lambda_hat * v).collect();
        let at_p = entropy_f(&nu, d.p_hat.weights(), &model.utility);
        let robust = robust_entropy(&nu, &model.set, &model.utility, RobustEntropyOptions::default()).unwrap();
        let inf = robust.value.to_f64();
        prop_assert!((at_p - inf).abs() <= 1e-7 * at_p.abs().max(1.0) + robust.gap, "{at_p} vs {inf}");
    }

    #[test]
    fn dual_measure_is_equivalent_to_the_dual_prior(seed in 0u64..500) {
        let model = random_model(seed);
        let d = dual(&model);
        prop_assert!(d.q_equivalent);
        for (q, p) in d.q_hat.weights().iter().zip(d.p_hat.weights()) {
            prop_assert_eq!(*q > 0.0, *p > 0.0);
        }
    }

    #[test]
    fn dvi_comes_with_the_supermartingale_property(seed in 0u64..500) {
        let model = random_model(seed);
        let mut p = Pipeline::new(model, &RunOptions::default()).unwrap();
        let report = p.run(rum_core::pipeline::Stage::Verify, &["dvi".into(), "supermartingale".into()]).unwrap();
        let checks = &report.verification.unwrap().checks;
        let status = |name: &str| checks.iter().find(|c| c.name == name).unwrap().status.clone();
        if status("dvi") == Status::Pass {
            prop_assert_eq!(status("supermartingale"), Status::Pass);
        }
    }
}
