//! The optimal claim from a dual solution, its replicating strategy, and an
//! independent brute-force solver of the primal max-min problem.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dual::DualOptimizer;
use crate::market::{stochastic_integral, AdaptedProcess, Market, Strategy, TreeError};
use crate::measures::{TreeMeasure, UncertaintySet};
use crate::utility::{Utility, UtilityError};

/// Gate on the per-node least-squares residual of the replication.
pub const REPLICATION_TOL: f64 = 1e-7;

/// Default cap on the strategy dimension of the brute-force search.
pub const DEFAULT_STRATEGY_CAP: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrimalError {
    #[error(
        "the dual martingale measure vanishes at terminal {node:?}; the optimal claim is only defined \
         almost surely under it and no replicating strategy is constructed in that case"
    )]
    NotEquivalent { node: String },
    #[error(
        "replication residual {residual:e} at node {node:?} exceeds {REPLICATION_TOL:e}; the claim is \
         attainable in exact arithmetic, so the dual solution is not accurate enough"
    )]
    Residual { node: String, residual: f64 },
    #[error("strategy dimension {dim} exceeds the brute-force cap {cap}")]
    Cap { dim: usize, cap: usize },
    #[error("endowment has {got} entries, expected {expected}")]
    EndowmentLength { expected: usize, got: usize },
    #[error(transparent)]
    Utility(#[from] UtilityError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// The optimal claim `X = -V'(l dQ/dP) - x - B` on terminal nodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Claim {
    pub values: Vec<f64>,
    /// `E_Q[X]` under the dual martingale measure.
    pub q_hat_expectation: f64,
}

impl Claim {
    /// `max_Q E_Q[X]` over the given measures; nonpositive for admissible claims.
    pub fn max_expectation<'a>(&self, measures: impl IntoIterator<Item = &'a TreeMeasure>) -> f64 {
        measures.into_iter().map(|q| q.expect(&self.values)).fold(f64::NEG_INFINITY, f64::max)
    }
}

fn endowment_or_zero(b: Option<&[f64]>, n: usize) -> Result<Vec<f64>, PrimalError> {
    match b {
        Some(b) if b.len() != n => Err(PrimalError::EndowmentLength { expected: n, got: b.len() }),
        Some(b) => Ok(b.to_vec()),
        None => Ok(vec![0.0; n]),
    }
}

/// Builds the optimal claim from the dual density. Requires the dual
/// martingale measure to charge every terminal.
pub fn optimal_claim(
    market: &Market,
    dual: &DualOptimizer,
    utility: &Utility,
    x: f64,
    endowment: Option<&[f64]>,
) -> Result<Claim, PrimalError> {
    let tree = &market.tree;
    let n = tree.n_terminals();
    let b = endowment_or_zero(endowment, n)?;
    if let Some(k) = dual.q_hat.weights().iter().position(|&q| q <= 0.0) {
        return Err(PrimalError::NotEquivalent { node: tree.label(tree.terminals()[k]).to_string() });
    }
    let values = (0..n)
        .map(|k| Ok(utility.inverse_marginal(dual.density[k].to_f64())? - x - b[k]))
        .collect::<Result<Vec<f64>, PrimalError>>()?;
    let q_hat_expectation = dual.q_hat.expect(&values);
    Ok(Claim { values, q_hat_expectation })
}

/// Replicating strategy with its wealth process.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrimalSolution {
    pub theta: Strategy,
    /// `theta . S`, starting at 0.
    pub wealth: AdaptedProcess,
    /// Largest least-squares residual over nodes.
    pub residual: f64,
    /// `min_P E_P[U(x + theta . S_T + B)]` over the generators.
    pub value: f64,
}

/// Backward induction: `M = E_Q[X | F_t]` and, at each node, the position
/// `theta` with `theta . dS(child) = M(child) - M(node)` in least squares.
pub fn recover_strategy(
    market: &Market,
    claim: &Claim,
    dual: &DualOptimizer,
    set: &UncertaintySet,
    utility: &Utility,
    x: f64,
    endowment: Option<&[f64]>,
) -> Result<PrimalSolution, PrimalError> {
    let tree = &market.tree;
    let n_term = tree.n_terminals();
    let b = endowment_or_zero(endowment, n_term)?;
    if let Some(k) = dual.q_hat.weights().iter().position(|&q| q <= 0.0) {
        return Err(PrimalError::NotEquivalent { node: tree.label(tree.terminals()[k]).to_string() });
    }
    let q = &dual.q_hat;
    let m: Vec<f64> = (0..tree.len())
        .map(|node| q.conditional_expect(tree, node, &claim.values).expect("strictly positive measure"))
        .collect();

    let d = market.dim();
    let mut theta = Strategy::zeros(tree, d);
    let mut residual: f64 = 0.0;
    let mut worst = tree.root();
    for node in tree.non_terminals() {
        let ch = tree.children(node);
        let a = DMatrix::from_fn(ch.len(), d, |r, c| market.prices.increment(tree, ch[r])[c]);
        let rhs = DVector::from_iterator(ch.len(), ch.iter().map(|&c| m[c] - m[node]));
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let th = svd.solve(&rhs, 1e-13 * smax.max(1e-300)).expect("both factors computed");
        let r = (&a * &th - &rhs).amax();
        if r > residual {
            residual = r;
            worst = node;
        }
        theta.set(node, th.as_slice());
    }
    if residual >= REPLICATION_TOL {
        return Err(PrimalError::Residual { node: tree.label(worst).to_string(), residual });
    }
    let wealth = stochastic_integral(tree, &theta, &market.prices)?;
    let term = wealth.terminal_values(tree);
    let value = set
        .generators()
        .iter()
        .map(|p| expected_utility(p.weights(), &term, x, &b, utility))
        .fold(f64::INFINITY, f64::min);
    Ok(PrimalSolution { theta, wealth, residual, value })
}

fn expected_utility(p: &[f64], gains: &[f64], x: f64, b: &[f64], utility: &Utility) -> f64 {
    p.iter()
        .enumerate()
        .filter(|(_, &pi)| pi > 0.0)
        .map(|(i, &pi)| pi * utility.u(x + gains[i] + b[i]))
        .sum()
}

/// `min_P E_P[U(x + X + B)]` over the generators and the generators
/// attaining it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndirectValue {
    pub value: f64,
    pub per_generator: Vec<f64>,
    /// Generators within `1e-9` of the minimum.
    pub minimizers: Vec<usize>,
}

pub fn indirect_value(
    claim: &Claim,
    set: &UncertaintySet,
    utility: &Utility,
    x: f64,
    endowment: Option<&[f64]>,
) -> Result<IndirectValue, PrimalError> {
    let b = endowment_or_zero(endowment, claim.values.len())?;
    let per_generator: Vec<f64> =
        set.generators().iter().map(|p| expected_utility(p.weights(), &claim.values, x, &b, utility)).collect();
    let value = per_generator.iter().copied().fold(f64::INFINITY, f64::min);
    let minimizers =
        (0..per_generator.len()).filter(|&k| per_generator[k] <= value + 1e-9 * value.abs().max(1.0)).collect();
    Ok(IndirectValue { value, per_generator, minimizers })
}

/// Largest violation of `U(x + X + B) = V(z) + z (x + X + B)` with
/// `z = l dQ/dP`, over terminals charged by the dual prior.
pub fn young_gap(
    dual: &DualOptimizer,
    claim: &Claim,
    utility: &Utility,
    x: f64,
    endowment: Option<&[f64]>,
) -> Result<f64, PrimalError> {
    let b = endowment_or_zero(endowment, claim.values.len())?;
    let mut worst: f64 = 0.0;
    for k in 0..claim.values.len() {
        if dual.p_hat.weights()[k] <= 0.0 {
            continue;
        }
        let z = dual.density[k].to_f64();
        let w = x + claim.values[k] + b[k];
        let gap = utility.u(w) - (utility.conjugate(z)? + z * w);
        worst = worst.max(gap.abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BruteForceOptions {
    pub starts: usize,
    pub seed: u64,
    pub cap: usize,
    pub max_iter: usize,
}

impl Default for BruteForceOptions {
    fn default() -> Self {
        BruteForceOptions { starts: 16, seed: 0, cap: DEFAULT_STRATEGY_CAP, max_iter: 2_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BruteForce {
    pub value: f64,
    /// Best strategy in flat layout.
    pub theta: Vec<f64>,
    pub start_values: Vec<f64>,
}

/// `sup_theta min_k E_{P_k}[U(x + theta . S_T + B)]` by multi-start
/// steepest ascent with epsilon-active gradient bundles: the ascent
/// direction is the minimum-norm point of the convex hull of the gradients
/// of all nearly active generators, so no smoothing of the minimum is used.
pub fn brute_force_primal(
    market: &Market,
    set: &UncertaintySet,
    utility: &Utility,
    x: f64,
    endowment: Option<&[f64]>,
    opts: &BruteForceOptions,
) -> Result<BruteForce, PrimalError> {
    let dim = market.strategy_len();
    if dim > opts.cap {
        return Err(PrimalError::Cap { dim, cap: opts.cap });
    }
    let n = market.tree.n_terminals();
    let b = endowment_or_zero(endowment, n)?;
    let d = market.gains_matrix();
    let problem = MaxMin { d: &d, c: b.iter().map(|v| x + v).collect(), set, utility };
    let runs: Vec<(f64, DVector<f64>)> = (0..opts.starts)
        .into_par_iter()
        .map(|s| {
            let start = if s == 0 {
                DVector::zeros(dim)
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(1000).wrapping_add(s as u64));
                DVector::from_iterator(dim, (0..dim).map(|_| rng.random_range(-1.0..1.0)))
            };
            let (_, theta) = problem.ascend(start, opts.max_iter);
            problem.polish(theta)
        })
        .collect();
    let start_values: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let best = runs.into_iter().fold(None::<(f64, DVector<f64>)>, |acc, r| match acc {
        Some(a) if a.0 >= r.0 => Some(a),
        _ => Some(r),
    });
    let (value, theta) = best.unwrap_or((problem.eval(&DVector::zeros(dim)).0, DVector::zeros(dim)));
    Ok(BruteForce { value, theta: theta.iter().copied().collect(), start_values })
}

struct MaxMin<'a> {
    d: &'a DMatrix<f64>,
    c: Vec<f64>,
    set: &'a UncertaintySet,
    utility: &'a Utility,
}

impl MaxMin<'_> {
    /// Per-generator expected utilities.
    fn eval(&self, theta: &DVector<f64>) -> (f64, Vec<f64>) {
        let g = self.d * theta;
        let uy: Vec<f64> = (0..self.c.len()).map(|i| self.utility.u(self.c[i] + g[i])).collect();
        let f: Vec<f64> = self
            .set
            .generators()
            .iter()
            .map(|p| p.weights().iter().zip(&uy).filter(|(&a, _)| a > 0.0).map(|(a, b)| a * b).sum())
            .collect();
        let m = f.iter().copied().fold(f64::INFINITY, f64::min);
        (if m.is_nan() { f64::NEG_INFINITY } else { m }, f)
    }

    fn gradient(&self, theta: &DVector<f64>, k: usize) -> DVector<f64> {
        let g = self.d * theta;
        let p = self.set.generators()[k].weights();
        let v = DVector::from_iterator(
            self.c.len(),
            (0..self.c.len()).map(|i| if p[i] > 0.0 { p[i] * self.utility.du(self.c[i] + g[i]) } else { 0.0 }),
        );
        self.d.transpose() * v
    }

    fn ascend(&self, mut theta: DVector<f64>, max_iter: usize) -> (f64, DVector<f64>) {
        let (mut phi, mut f) = self.eval(&theta);
        if !phi.is_finite() {
            theta.fill(0.0);
            (phi, f) = self.eval(&theta);
        }
        let mut eps = 1e-2 * phi.abs().max(1.0);
        let mut t: f64 = 1.0;
        for _ in 0..max_iter {
            let active: Vec<usize> = (0..f.len()).filter(|&k| f[k] <= phi + eps).collect();
            let grads: Vec<DVector<f64>> = active.iter().map(|&k| self.gradient(&theta, k)).collect();
            let dir = min_norm_point(&grads);
            let norm2 = dir.norm_squared();
            if norm2 < 1e-26 {
                if eps < 1e-14 {
                    break;
                }
                eps *= 0.1;
                continue;
            }
            let mut step = (2.0 * t).min(1e6);
            let mut accepted = false;
            for _ in 0..60 {
                let cand = &theta + step * &dir;
                let (pc, fc) = self.eval(&cand);
                if pc >= phi + 1e-4 * step * norm2 {
                    theta = cand;
                    phi = pc;
                    f = fc;
                    t = step;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                if eps < 1e-14 {
                    break;
                }
                eps *= 0.1;
            }
        }
        (phi, theta)
    }

    /// Hessian of `f_k`: `D^T diag(p_k U''(y)) D`.
    fn hessian(&self, theta: &DVector<f64>, k: usize) -> DMatrix<f64> {
        let g = self.d * theta;
        let p = self.set.generators()[k].weights();
        let mut dh = self.d.clone();
        for (i, mut row) in dh.row_iter_mut().enumerate() {
            row *= if p[i] > 0.0 { p[i] * self.utility.d2u(self.c[i] + g[i]) } else { 0.0 };
        }
        self.d.transpose() * dh
    }

    /// Newton's method on the epigraph form `max s` subject to
    /// `f_k(theta) >= s`, with a logarithmic barrier whose weight shrinks
    /// geometrically. Starts from the end point of the ascent and never
    /// returns a worse point than it was given.
    fn polish(&self, theta0: DVector<f64>) -> (f64, DVector<f64>) {
        let (phi0, f0) = self.eval(&theta0);
        if !phi0.is_finite() {
            return (phi0, theta0);
        }
        let dim = theta0.len();
        let k = f0.len();
        let scale = phi0.abs().max(1.0);
        let mut theta = theta0.clone();
        let mut s = phi0 - 1e-2 * scale;
        let mut mu = 1e-3 * scale;
        let barrier = |f: &[f64], s: f64, mu: f64| -> f64 {
            if f.iter().any(|&fk| !(fk > s)) {
                return f64::NEG_INFINITY;
            }
            s + mu * f.iter().map(|&fk| (fk - s).ln()).sum::<f64>()
        };
        while mu > 1e-13 * scale {
            for _ in 0..100 {
                let (_, f) = self.eval(&theta);
                let mut grad = DVector::zeros(dim + 1);
                let mut neg_h = DMatrix::zeros(dim + 1, dim + 1);
                grad[dim] = 1.0;
                for j in 0..k {
                    let slack = f[j] - s;
                    let mut a = DVector::zeros(dim + 1);
                    a.rows_mut(0, dim).copy_from(&self.gradient(&theta, j));
                    a[dim] = -1.0;
                    grad += &a * (mu / slack);
                    neg_h += &a * a.transpose() * (mu / (slack * slack));
                    let hj = self.hessian(&theta, j);
                    let mut block = neg_h.view_mut((0, 0), (dim, dim));
                    block -= hj * (mu / slack);
                }
                let step = pinv_sym(&neg_h) * &grad;
                let dec = grad.dot(&step);
                if !(dec > 1e-24 * scale) {
                    break;
                }
                let cur = barrier(&f, s, mu);
                let mut t = 1.0;
                let mut accepted = false;
                for _ in 0..60 {
                    let th = &theta + t * step.rows(0, dim);
                    let sc = s + t * step[dim];
                    let (_, fc) = self.eval(&th);
                    if barrier(&fc, sc, mu) >= cur + 1e-4 * t * dec {
                        theta = th;
                        s = sc;
                        accepted = true;
                        break;
                    }
                    t *= 0.5;
                }
                if !accepted {
                    break;
                }
            }
            mu *= 0.1;
        }
        let (phi, _) = self.eval(&theta);
        if phi >= phi0 {
            (phi, theta)
        } else {
            (phi0, theta0)
        }
    }
}

/// Pseudo-inverse of a symmetric positive semidefinite matrix.
fn pinv_sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let smax = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tol = 1e-14 * smax.max(1e-300);
    let mut inv = DMatrix::zeros(a.nrows(), a.ncols());
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev > tol {
            let v = eig.eigenvectors.column(i);
            inv += (v * v.transpose()) / ev;
        }
    }
    inv
}

/// Minimum-norm point of the convex hull of `vs` by projected gradient on
/// the simplex of mixing weights.
fn min_norm_point(vs: &[DVector<f64>]) -> DVector<f64> {
    let k = vs.len();
    if k == 1 {
        return vs[0].clone();
    }
    let g = DMatrix::from_fn(k, k, |i, j| vs[i].dot(&vs[j]));
    let l = g.iter().fold(0.0_f64, |m, v| m.max(v.abs())) * k as f64;
    if l == 0.0 {
        return vs[0].clone();
    }
    let mut a = DVector::from_element(k, 1.0 / k as f64);
    for _ in 0..2000 {
        let grad = &g * &a;
        let next = crate::utility::project_simplex((&a - grad / l).as_slice());
        let next = DVector::from_vec(next);
        let moved = (&next - &a).amax();
        a = next;
        if moved < 1e-15 {
            break;
        }
    }
    let mut out = DVector::zeros(vs[0].len());
    for (ai, v) in a.iter().zip(vs) {
        out += *ai * v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::{solve_dual, DualOptions, DualProblem};
    use crate::polytope::MartingalePolytope;

    const THETA: f64 = 0.4620981203732969;

    fn binomial_setup() -> (Market, MartingalePolytope, UncertaintySet, Utility) {
        let m = Market::binomial(1.0, 2.0, 0.5);
        let poly = MartingalePolytope::assemble(&m);
        let set = UncertaintySet::singleton(TreeMeasure::new(vec![0.5, 0.5]).unwrap());
        (m, poly, set, Utility::exponential(1.0).unwrap())
    }

    #[test]
    fn binomial_claim_and_strategy() {
        let (m, poly, set, u) = binomial_setup();
        let prob = DualProblem { market: &m, set: &set, utility: &u, x: 0.0, endowment: None };
        let dual = solve_dual(&prob, &poly, &DualOptions::default()).unwrap();
        let claim = optimal_claim(&m, &dual, &u, 0.0, None).unwrap();
        assert!((claim.values[0] - THETA).abs() < 1e-12);
        assert!((claim.values[1] + THETA / 2.0).abs() < 1e-12);
        assert!(claim.q_hat_expectation.abs() < 1e-14);
        let sol = recover_strategy(&m, &claim, &dual, &set, &u, 0.0, None).unwrap();
        assert!((sol.theta.at(0)[0] - THETA).abs() < 1e-12);
        assert!((sol.value - dual.value).abs() < 1e-12);
        let iv = indirect_value(&claim, &set, &u, 0.0, None).unwrap();
        assert!((iv.value - dual.value).abs() < 1e-12);
        assert!(young_gap(&dual, &claim, &u, 0.0, None).unwrap() < 1e-14);
    }

    #[test]
    fn endowment_shifts_claim() {
        let (m, poly, set, u) = binomial_setup();
        let prob = DualProblem { market: &m, set: &set, utility: &u, x: 0.0, endowment: None };
        let dual = solve_dual(&prob, &poly, &DualOptions::default()).unwrap();
        let base = optimal_claim(&m, &dual, &u, 0.0, None).unwrap();
        let b = base.values.clone();
        let prob_b = DualProblem { endowment: Some(&b), ..prob };
        let dual_b = solve_dual(&prob_b, &poly, &DualOptions::default()).unwrap();
        let claim_b = optimal_claim(&m, &dual_b, &u, 0.0, Some(&b)).unwrap();
        // B is itself replicable here, so the optimal total wealth is unchanged.
        for k in 0..2 {
            assert!((claim_b.values[k] + b[k] - base.values[k]).abs() < 1e-10);
        }
        assert!((dual_b.value - dual.value).abs() < 1e-12);
    }

    #[test]
    fn brute_force_matches_dual() {
        let (m, _, set, u) = binomial_setup();
        let bf = brute_force_primal(&m, &set, &u, 0.0, None, &BruteForceOptions::default()).unwrap();
        assert!((bf.value - 0.05505921257884505).abs() < 1e-9);
        assert!((bf.theta[0] - THETA).abs() < 1e-4);

        let robust = UncertaintySet::new(vec![
            TreeMeasure::new(vec![0.5, 0.5]).unwrap(),
            TreeMeasure::new(vec![0.7, 0.3]).unwrap(),
        ])
        .unwrap();
        let bf = brute_force_primal(&m, &robust, &u, 0.0, None, &BruteForceOptions::default()).unwrap();
        assert!((bf.value - 0.05505921257884505).abs() < 1e-6);
    }

    #[test]
    fn zero_strategy_value() {
        let (_, _, set, u) = binomial_setup();
        let claim = Claim { values: vec![0.0, 0.0], q_hat_expectation: 0.0 };
        let iv = indirect_value(&claim, &set, &u, 0.7, None).unwrap();
        assert!((iv.value - u.u(0.7)).abs() < 1e-15);
    }

    #[test]
    fn cap_is_enforced() {
        let (m, _, set, u) = binomial_setup();
        let opts = BruteForceOptions { cap: 0, ..Default::default() };
        assert!(matches!(brute_force_primal(&m, &set, &u, 0.0, None, &opts), Err(PrimalError::Cap { .. })));
    }
}
