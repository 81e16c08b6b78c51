//! The dual problem `inf_{l > 0, Q martingale, P in set} V(l Q | P) + l x + l E_Q[B]`.
//!
//! The dual is solved through its saddle-point form. For mixing weights `w`
//! of the generators,
//!
//! ```text
//! g(w) = max_theta sum_w P_w(w) U(x + B + (D theta)(w))
//! ```
//!
//! is convex in `w`, and minimizing it over the simplex yields the least
//! favorable prior. The inner maximization is a smooth concave program
//! solved by Newton's method; its first-order condition `D^T (P U'(Y)) = 0`
//! makes `nu = P U'(Y)` a multiple of a martingale measure, and Young's
//! equality `U(Y) = V(U'(Y)) + Y U'(Y)` identifies `g(w)` with the dual
//! objective at `(nu, P_w)`. The outer problem is solved with a log-barrier
//! Newton method whose Hessian is `J^T (-H)^+ J` by the envelope theorem.
//!
//! After convergence the solution is read off as `l = sum nu`, `Q = nu / l`
//! and certified through directional derivatives of the jointly convex
//! objective `(nu, P) -> V(nu | P) + <nu, x + B>` along every extreme ray of
//! the martingale cone and toward every generator.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::ext::ExtReal;
use crate::market::Market;
use crate::measures::{TreeMeasure, UncertaintySet};
use crate::polytope::MartingalePolytope;
use crate::utility::{entropy, CheckStatus, EntropyError, Utility, UtilityError};

/// Weights below this are set to zero before the final inner solve.
pub const WEIGHT_SNAP: f64 = 1e-9;

/// Tolerance for density agreement between dual solutions.
pub const DENSITY_TOL: f64 = 1e-6;

/// Tolerance for value agreement between dual solutions.
pub const VALUE_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DualError {
    #[error("the martingale polytope is empty (the market admits arbitrage)")]
    EmptyPolytope,
    #[error("no prior in the uncertainty set is equivalent to the reference measure")]
    NoEquivalentPrior,
    #[error("endowment has {got} entries, expected {expected}")]
    EndowmentLength { expected: usize, got: usize },
    #[error("inner maximization diverged: the strategy grows without bound (arbitrage on the prior's support)")]
    InnerUnbounded,
    #[error("dual solver hit the iteration limit {0}")]
    IterationLimit(usize),
    #[error("dual optimizer is degenerate: multiplier {0:e}")]
    Degenerate(f64),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Utility(#[from] UtilityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualOptions {
    /// Directional derivatives must be at least `-cert_tol`.
    pub cert_tol: f64,
    /// Cap on outer Newton iterations over all barrier stages.
    pub max_iter: usize,
    /// Seed of the starting point; seed 0 is the barycenter with zero strategy.
    pub seed: u64,
    pub mu_start: f64,
    pub mu_end: f64,
}

impl Default for DualOptions {
    fn default() -> Self {
        DualOptions { cert_tol: 1e-7, max_iter: 2_000, seed: 0, mu_start: 1e-2, mu_end: 1e-14 }
    }
}

/// A model ready for the dual solver.
#[derive(Debug, Clone)]
pub struct DualProblem<'a> {
    pub market: &'a Market,
    pub set: &'a UncertaintySet,
    pub utility: &'a Utility,
    pub x: f64,
    /// Terminal payoff `B`, in terminal-index order.
    pub endowment: Option<&'a [f64]>,
}

/// Directional-derivative slacks at the dual solution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    /// Along each extreme ray of the martingale cone (one per polytope vertex).
    pub rays: Vec<ExtReal>,
    /// Along `-nu`, i.e. shrinking the multiplier.
    pub shrink: f64,
    /// Toward each generator of the uncertainty set.
    pub generators: Vec<ExtReal>,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// A dual optimizer `(l, Q, P)` with derived quantities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualOptimizer {
    pub x: f64,
    pub lambda_hat: f64,
    pub q_hat: TreeMeasure,
    pub p_hat: TreeMeasure,
    /// Mixing weights of `p_hat` over the generators.
    pub generator_weights: Vec<f64>,
    /// `V(l Q | P) + l x + l E_Q[B]`.
    pub value: f64,
    /// `max_theta E_P[U(x + B + theta . S_T)]` at `p_hat`; equals `value` at the optimum.
    pub primal_value: f64,
    /// `l dQ/dP` per terminal; `+inf` where `P = 0 < Q`, and `0` where both vanish.
    pub density: Vec<ExtReal>,
    /// Optimal strategy of the inner problem in flat layout.
    pub theta: Vec<f64>,
    pub certificate: Certificate,
    pub q_equivalent: bool,
    pub iterations: usize,
}

struct InnerSolution {
    theta: DVector<f64>,
    y: Vec<f64>,
    value: f64,
    /// Pseudo-inverse of the negated Hessian.
    neg_hess_pinv: DMatrix<f64>,
}

struct Solver<'a> {
    prob: &'a DualProblem<'a>,
    d: DMatrix<f64>,
    c: Vec<f64>,
    gens: Vec<&'a [f64]>,
}

impl<'a> Solver<'a> {
    fn new(prob: &'a DualProblem<'a>) -> Result<Solver<'a>, DualError> {
        let n = prob.market.tree.n_terminals();
        let c = match prob.endowment {
            Some(b) if b.len() != n => return Err(DualError::EndowmentLength { expected: n, got: b.len() }),
            Some(b) => b.iter().map(|v| prob.x + v).collect(),
            None => vec![prob.x; n],
        };
        let gens = prob.set.generators().iter().map(TreeMeasure::weights).collect();
        Ok(Solver { prob, d: prob.market.gains_matrix(), c, gens })
    }

    fn mix(&self, w: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; self.c.len()];
        for (wk, g) in w.iter().zip(&self.gens) {
            for (a, b) in p.iter_mut().zip(g.iter()) {
                *a += wk * b;
            }
        }
        p
    }

    fn wealth(&self, theta: &DVector<f64>) -> Vec<f64> {
        let dt = &self.d * theta;
        self.c.iter().zip(dt.iter()).map(|(a, b)| a + b).collect()
    }

    fn objective(&self, p: &[f64], y: &[f64]) -> f64 {
        let u = self.prob.utility;
        p.iter().zip(y).filter(|(&pi, _)| pi > 0.0).map(|(pi, &yi)| pi * u.u(yi)).sum()
    }

    /// Newton's method for `max_theta sum p U(c + D theta)`.
    fn inner(&self, p: &[f64], theta0: &DVector<f64>) -> Result<InnerSolution, DualError> {
        let m = self.d.ncols();
        let mut theta = theta0.clone();
        let mut y = self.wealth(&theta);
        let mut f = self.objective(p, &y);
        if !f.is_finite() {
            theta = DVector::zeros(m);
            y = self.wealth(&theta);
            f = self.objective(p, &y);
        }
        let mut polish = 0;
        for _ in 0..500 {
            let (grad, neg_h) = self.derivatives(p, &y);
            let pinv = pinv_psd(&neg_h);
            if m == 0 {
                return Ok(InnerSolution { theta, y, value: f, neg_hess_pinv: pinv });
            }
            let step = &pinv * &grad;
            let dec = grad.dot(&step);
            if !(dec > 1e-30) {
                return Ok(InnerSolution { theta, y, value: f, neg_hess_pinv: pinv });
            }
            if dec < 1e-14 * f.abs().max(1.0) {
                // Below the resolution of f: take full steps and stop.
                theta += &step;
                y = self.wealth(&theta);
                f = self.objective(p, &y);
                polish += 1;
                if polish >= 2 {
                    let (_, neg_h) = self.derivatives(p, &y);
                    return Ok(InnerSolution { theta, y, value: f, neg_hess_pinv: pinv_psd(&neg_h) });
                }
                continue;
            }
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let cand = &theta + t * &step;
                let yc = self.wealth(&cand);
                let fc = self.objective(p, &yc);
                if fc.is_finite() && fc > f && fc >= f + 1e-4 * t * dec {
                    theta = cand;
                    y = yc;
                    f = fc;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                let (_, neg_h) = self.derivatives(p, &y);
                return Ok(InnerSolution { theta, y, value: f, neg_hess_pinv: pinv_psd(&neg_h) });
            }
            if theta.amax() > 1e12 {
                return Err(DualError::InnerUnbounded);
            }
        }
        Err(DualError::InnerUnbounded)
    }

    /// Gradient `D^T (p U'(y))` and negated Hessian `D^T diag(-p U''(y)) D`.
    fn derivatives(&self, p: &[f64], y: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let u = self.prob.utility;
        let n = p.len();
        let g = DVector::from_iterator(n, p.iter().zip(y).map(|(&pi, &yi)| if pi > 0.0 { pi * u.du(yi) } else { 0.0 }));
        let h = DVector::from_iterator(n, p.iter().zip(y).map(|(&pi, &yi)| if pi > 0.0 { -pi * u.d2u(yi) } else { 0.0 }));
        let grad = self.d.transpose() * g;
        let mut dh = self.d.clone();
        for (i, mut row) in dh.row_iter_mut().enumerate() {
            row *= h[i];
        }
        let neg_h = self.d.transpose() * dh;
        (grad, neg_h)
    }

    /// `g(w)`, its gradient `f_k = E_{P_k}[U(Y)]` and Hessian.
    fn outer_eval(&self, w: &[f64], theta0: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>, InnerSolution), DualError> {
        let u = self.prob.utility;
        let p = self.mix(w);
        let inner = self.inner(&p, theta0)?;
        let k = self.gens.len();
        let uy: Vec<f64> = inner.y.iter().map(|&v| u.u(v)).collect();
        let duy: Vec<f64> = inner.y.iter().map(|&v| u.du(v)).collect();
        let f = DVector::from_iterator(
            k,
            self.gens.iter().map(|g| g.iter().zip(&uy).filter(|(&a, _)| a > 0.0).map(|(a, b)| a * b).sum()),
        );
        let mut j = DMatrix::zeros(self.d.ncols(), k);
        for (col, g) in self.gens.iter().enumerate() {
            let v = DVector::from_iterator(g.len(), g.iter().zip(&duy).map(|(&a, &b)| if a > 0.0 { a * b } else { 0.0 }));
            j.set_column(col, &(self.d.transpose() * v));
        }
        let hess = j.transpose() * &inner.neg_hess_pinv * &j;
        Ok((inner.value, f, hess, inner))
    }
}

/// Pseudo-inverse of a symmetric positive semidefinite matrix.
fn pinv_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == 0 {
        return a.clone();
    }
    let eig = a.clone().symmetric_eigen();
    let smax = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tol = 1e-13 * smax.max(1e-300);
    let mut inv = DMatrix::zeros(a.nrows(), a.ncols());
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev > tol {
            let v = eig.eigenvectors.column(i);
            inv += (v * v.transpose()) / ev;
        }
    }
    inv
}

/// Minimizes `phi(w) = g(w) - mu sum ln w` over the simplex, decreasing `mu`
/// geometrically; returns the final weights and warm-start strategy.
fn barrier_newton(
    solver: &Solver<'_>,
    mut w: Vec<f64>,
    mut theta: DVector<f64>,
    opts: &DualOptions,
) -> Result<(Vec<f64>, DVector<f64>, usize), DualError> {
    let k = w.len();
    let mut iterations = 0;
    let (g0, _, _, inner) = solver.outer_eval(&w, &theta)?;
    theta = inner.theta;
    let scale = g0.abs().max(1.0);
    let mut mu = opts.mu_start * scale;
    let phi = |g: f64, w: &[f64], mu: f64| g - mu * w.iter().map(|v| v.ln()).sum::<f64>();
    // Null-space basis of the simplex constraint: columns e_i - e_k.
    let z = DMatrix::from_fn(k, k - 1, |r, c| if r == c { 1.0 } else if r == k - 1 { -1.0 } else { 0.0 });
    loop {
        for _ in 0..100 {
            iterations += 1;
            if iterations > opts.max_iter {
                return Err(DualError::IterationLimit(opts.max_iter));
            }
            let (g, f, hg, inner) = solver.outer_eval(&w, &theta)?;
            theta = inner.theta;
            let grad = DVector::from_iterator(k, (0..k).map(|i| f[i] - mu / w[i]));
            let mut h = hg;
            for i in 0..k {
                h[(i, i)] += mu / (w[i] * w[i]);
            }
            let zhz = z.transpose() * &h * &z;
            let zg = -(z.transpose() * &grad);
            // Redundant generators make g flat along some weight directions,
            // leaving only the barrier curvature there; fall back to the
            // pseudo-inverse when that is lost to rounding.
            let v = match zhz.clone().cholesky() {
                Some(ch) => ch.solve(&zg),
                None => pinv_psd(&zhz) * &zg,
            };
            let dw = &z * v;
            let dec = -grad.dot(&dw);
            if !(dec > 1e-22 * scale) {
                break;
            }
            let mut t: f64 = 1.0;
            for i in 0..k {
                if dw[i] < 0.0 {
                    t = t.min(0.99 * w[i] / -dw[i]);
                }
            }
            let phi0 = phi(g, &w, mu);
            let mut accepted = false;
            for _ in 0..60 {
                let cand: Vec<f64> = (0..k).map(|i| w[i] + t * dw[i]).collect();
                let p = solver.mix(&cand);
                if let Ok(inner_c) = solver.inner(&p, &theta) {
                    let pc = phi(inner_c.value, &cand, mu);
                    if pc.is_finite() && pc <= phi0 - 1e-4 * t * dec {
                        w = cand;
                        theta = inner_c.theta;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if mu <= opts.mu_end * scale {
            break;
        }
        mu /= 10.0;
    }
    Ok((w, theta, iterations))
}

fn starting_point(k: usize, m: usize, seed: u64) -> (Vec<f64>, DVector<f64>) {
    if seed == 0 {
        return (vec![1.0 / k as f64; k], DVector::zeros(m));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-3).collect();
    let s: f64 = raw.iter().sum();
    let w = raw.iter().map(|v| v / s).collect();
    let theta = DVector::from_iterator(m, (0..m).map(|_| rng.random_range(-0.5..0.5)));
    (w, theta)
}

/// Solves the dual problem and certifies the solution.
pub fn solve_dual(prob: &DualProblem<'_>, poly: &MartingalePolytope, opts: &DualOptions) -> Result<DualOptimizer, DualError> {
    if poly.is_empty() {
        return Err(DualError::EmptyPolytope);
    }
    if !prob.set.has_equivalent_element() {
        return Err(DualError::NoEquivalentPrior);
    }
    let solver = Solver::new(prob)?;
    let k = solver.gens.len();
    let (w0, theta0) = starting_point(k, solver.d.ncols(), opts.seed);
    let (mut w, mut theta, iterations) =
        if k == 1 { (w0, theta0, 0) } else { barrier_newton(&solver, w0, theta0, opts)? };

    let mut inner = solver.inner(&solver.mix(&w), &theta)?;
    if k > 1 && w.iter().any(|&v| v < WEIGHT_SNAP) {
        let mut snapped: Vec<f64> = w.iter().map(|&v| if v < WEIGHT_SNAP { 0.0 } else { v }).collect();
        let s: f64 = snapped.iter().sum();
        snapped.iter_mut().for_each(|v| *v /= s);
        if let Ok(alt) = solver.inner(&solver.mix(&snapped), &inner.theta) {
            let grad_alt = solver.derivatives(&solver.mix(&snapped), &alt.y).0;
            if (alt.value - inner.value).abs() <= 1e-9 * inner.value.abs().max(1.0) && grad_alt.amax() < 1e-8 {
                w = snapped;
                inner = alt;
            }
        }
    }
    theta = inner.theta.clone();
    finish(prob, poly, &solver, w, theta, inner, iterations, opts)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    prob: &DualProblem<'_>,
    poly: &MartingalePolytope,
    solver: &Solver<'_>,
    w: Vec<f64>,
    theta: DVector<f64>,
    inner: InnerSolution,
    iterations: usize,
    opts: &DualOptions,
) -> Result<DualOptimizer, DualError> {
    let u = prob.utility;
    let p = solver.mix(&w);
    let n = p.len();
    let nu: Vec<f64> = (0..n).map(|i| if p[i] > 0.0 { p[i] * u.du(inner.y[i]) } else { 0.0 }).collect();
    let lambda_hat: f64 = nu.iter().sum();
    if !(lambda_hat.is_finite() && lambda_hat > 1e-300) {
        return Err(DualError::Degenerate(lambda_hat));
    }
    let q_hat = TreeMeasure::normalized(nu.clone()).map_err(|_| DualError::Degenerate(lambda_hat))?;
    let p_hat = TreeMeasure::normalized(p.clone()).map_err(|_| DualError::Degenerate(lambda_hat))?;
    let ent = entropy(&nu, &p, u)?;
    let linear: f64 = nu.iter().zip(&solver.c).map(|(a, b)| a * b).sum();
    let value = (ent + linear).to_f64();

    let density: Vec<ExtReal> = (0..n)
        .map(|i| match (p[i] > 0.0, nu[i] > 0.0) {
            (true, _) => ExtReal::Finite(nu[i] / p[i]),
            (false, true) => ExtReal::PosInf,
            (false, false) => ExtReal::ZERO,
        })
        .collect();

    // Directional derivatives of (nu, P) -> V(nu | P) + <nu, c>.
    let mut dv = vec![f64::NAN; n];
    let mut psi = vec![f64::NAN; n];
    for i in 0..n {
        if p[i] > 0.0 {
            let z = nu[i] / p[i];
            let vp = u.conjugate_derivative(z)?;
            dv[i] = vp + solver.c[i];
            psi[i] = u.conjugate(z)? - z * vp;
        }
    }
    let v0 = u.sup();
    let ray = |v: &[f64]| -> ExtReal {
        let mut s = 0.0;
        for i in 0..n {
            if v[i] > 0.0 {
                if p[i] == 0.0 {
                    return ExtReal::PosInf;
                }
                s += v[i] * dv[i];
            }
        }
        ExtReal::Finite(s)
    };
    let rays: Vec<ExtReal> = poly.vertices().vertices.iter().map(|v| ray(v.weights())).collect();
    let shrink = -(0..n).filter(|&i| nu[i] > 0.0).map(|i| nu[i] * dv[i]).sum::<f64>();
    let generators: Vec<ExtReal> = solver
        .gens
        .iter()
        .map(|g| {
            let mut s = 0.0;
            for i in 0..n {
                let delta = g[i] - p[i];
                if delta == 0.0 {
                    continue;
                }
                if p[i] > 0.0 {
                    s += delta * psi[i];
                } else {
                    match v0 {
                        ExtReal::Finite(v) => s += delta * v,
                        ExtReal::PosInf => return ExtReal::PosInf,
                    }
                }
            }
            ExtReal::Finite(s)
        })
        .collect();
    let worst = rays
        .iter()
        .chain(&generators)
        .map(|e| e.to_f64())
        .chain(std::iter::once(shrink))
        .fold(f64::INFINITY, f64::min);
    let certificate = Certificate {
        rays,
        shrink,
        generators,
        worst,
        tolerance: opts.cert_tol,
        passed: worst >= -opts.cert_tol,
    };

    Ok(DualOptimizer {
        x: prob.x,
        lambda_hat,
        q_equivalent: q_hat.is_strictly_positive(),
        q_hat,
        p_hat,
        generator_weights: w,
        value,
        primal_value: inner.value,
        density,
        theta: theta.iter().copied().collect(),
        certificate,
        iterations,
    })
}

/// Comparison of two dual solutions of the same model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaximalityReport {
    /// Largest density difference on the common support of the two priors.
    pub max_density_diff: f64,
    pub value_diff: f64,
    pub agree: bool,
}

/// Checks that two dual solutions share the density `l dQ/dP` on the
/// common support of their priors and have equal values.
pub fn maximal_density(d1: &DualOptimizer, d2: &DualOptimizer) -> MaximalityReport {
    let mut max_density_diff: f64 = 0.0;
    for i in 0..d1.density.len() {
        if d1.p_hat.weights()[i] > 0.0 && d2.p_hat.weights()[i] > 0.0 {
            let diff = (d1.density[i].to_f64() - d2.density[i].to_f64()).abs();
            max_density_diff = max_density_diff.max(if diff.is_nan() { f64::INFINITY } else { diff });
        }
    }
    let value_diff = (d1.value - d2.value).abs();
    MaximalityReport {
        max_density_diff,
        value_diff,
        agree: max_density_diff <= DENSITY_TOL && value_diff <= VALUE_TOL,
    }
}

/// Solves from `starts` seeded starting points in parallel and compares
/// every solution with the first.
pub fn multi_start(
    prob: &DualProblem<'_>,
    poly: &MartingalePolytope,
    opts: &DualOptions,
    starts: usize,
) -> Result<(Vec<DualOptimizer>, Vec<MaximalityReport>), DualError> {
    // Populate the vertex cache before the parallel section.
    let _ = poly.vertices();
    let sols = (0..starts as u64)
        .into_par_iter()
        .map(|s| solve_dual(prob, poly, &DualOptions { seed: opts.seed + s, ..*opts }))
        .collect::<Result<Vec<_>, _>>()?;
    let reports = sols.iter().skip(1).map(|s| maximal_density(&sols[0], s)).collect();
    Ok((sols, reports))
}

/// Numerical admissibility of a terminal endowment with `eps = 1`:
/// `U(-B^+)` and `U(-2 B^-)` must be finite wherever some prior charges.
pub fn check_endowment_admissible(b: &[f64], set: &UncertaintySet, utility: &Utility) -> CheckStatus {
    let n = b.len();
    if let Some(g) = set.generators().first() {
        if g.len() != n {
            return CheckStatus::Fail { detail: format!("endowment has {n} entries, expected {}", g.len()), witness: None };
        }
    }
    let mut worst = f64::INFINITY;
    for i in 0..n {
        if !set.generators().iter().any(|g| g.weights()[i] > 0.0) {
            continue;
        }
        if !b[i].is_finite() {
            return CheckStatus::Fail { detail: format!("endowment is not finite at terminal {i}"), witness: Some(b[i]) };
        }
        for arg in [-b[i].max(0.0), -2.0 * (-b[i]).max(0.0)] {
            let v = utility.u(arg);
            if !v.is_finite() {
                return CheckStatus::Fail {
                    detail: format!("utility is not finite at {arg:e} (terminal {i})"),
                    witness: Some(arg),
                };
            }
            worst = worst.min(v);
        }
    }
    CheckStatus::Pass {
        detail: format!(
            "U(-B+) and U(-2B-) finite at every charged terminal (eps = 1, smallest value {worst:e}); \
             uniform integrability is automatic on a finite tree"
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const H: f64 = 0.056633012265132426;

    fn binomial() -> (Market, MartingalePolytope) {
        let m = Market::binomial(1.0, 2.0, 0.5);
        let p = MartingalePolytope::assemble(&m);
        (m, p)
    }

    #[test]
    fn closed_form_binomial() {
        let (m, poly) = binomial();
        let set = UncertaintySet::singleton(TreeMeasure::new(vec![0.5, 0.5]).unwrap());
        let u = Utility::exponential(1.0).unwrap();
        for x in [-1.0, 0.0, 1.0] {
            let prob = DualProblem { market: &m, set: &set, utility: &u, x, endowment: None };
            let d = solve_dual(&prob, &poly, &DualOptions::default()).unwrap();
            assert!((d.lambda_hat - (-(x + H)).exp()).abs() < 1e-12, "{x}: {}", d.lambda_hat);
            assert!((d.value - (1.0 - (-(x + H)).exp())).abs() < 1e-12);
            assert!((d.primal_value - d.value).abs() < 1e-12);
            assert!(d.q_hat.max_abs_diff(&TreeMeasure::new(vec![1.0 / 3.0, 2.0 / 3.0]).unwrap()) < 1e-12);
            assert!(d.certificate.passed, "{:?}", d.certificate);
            assert!(d.q_equivalent);
        }
    }

    #[test]
    fn robust_binomial_picks_boundary_prior() {
        let (m, poly) = binomial();
        let set = UncertaintySet::new(vec![
            TreeMeasure::new(vec![0.5, 0.5]).unwrap(),
            TreeMeasure::new(vec![0.7, 0.3]).unwrap(),
        ])
        .unwrap();
        let u = Utility::exponential(1.0).unwrap();
        let prob = DualProblem { market: &m, set: &set, utility: &u, x: 0.0, endowment: None };
        let d = solve_dual(&prob, &poly, &DualOptions::default()).unwrap();
        assert_eq!(d.generator_weights, vec![1.0, 0.0]);
        assert!((d.value - 0.05505921257884505).abs() < 1e-10);
        assert!((d.lambda_hat - 0.944940787421155).abs() < 1e-10);
        assert!(d.certificate.passed);
        assert!(d.certificate.generators[1].to_f64() > 0.0);
    }

    #[test]
    fn martingale_priors_give_trivial_solution() {
        let m = Market::multinomial(1.0, &[vec![1.0, 0.0, -0.5]]);
        let poly = MartingalePolytope::assemble(&m);
        let set = UncertaintySet::new(vec![
            TreeMeasure::new(vec![0.0, 1.0, 0.0]).unwrap(),
            TreeMeasure::new(vec![1.0 / 6.0, 0.5, 1.0 / 3.0]).unwrap(),
        ])
        .unwrap();
        let u = Utility::exponential(1.0).unwrap();
        let prob = DualProblem { market: &m, set: &set, utility: &u, x: 0.3, endowment: None };
        let d = solve_dual(&prob, &poly, &DualOptions::default()).unwrap();
        assert!(d.q_hat.max_abs_diff(&d.p_hat) < 1e-12);
        assert!((d.lambda_hat - (-0.3f64).exp()).abs() < 1e-12);
        assert!(d.theta.iter().all(|t| t.abs() < 1e-12));
        assert!(d.certificate.passed);
    }

    #[test]
    fn multi_start_densities_agree() {
        let m = Market::multinomial(1.0, &[vec![1.0, 0.0, -0.5], vec![0.5, 0.1, -1.0]]);
        let poly = MartingalePolytope::assemble(&m);
        let n = m.tree.n_terminals();
        let g1 = TreeMeasure::normalized((1..=n).map(|i| i as f64).collect()).unwrap();
        let g2 = TreeMeasure::normalized((1..=n).map(|i| (n + 1 - i) as f64).collect()).unwrap();
        let g3 = TreeMeasure::reference(&m.tree);
        let set = UncertaintySet::new(vec![g1, g2, g3]).unwrap();
        let u = Utility::mixture_exponential(vec![1.0, 1.0], vec![1.0, 2.0]).unwrap();
        let prob = DualProblem { market: &m, set: &set, utility: &u, x: 0.1, endowment: None };
        let (sols, reports) = multi_start(&prob, &poly, &DualOptions::default(), 4).unwrap();
        assert!(reports.iter().all(|r| r.agree), "{reports:?}");
        assert!(sols.iter().all(|s| s.certificate.passed));
        assert!((sols[0].value - sols[0].primal_value).abs() < 1e-10);
    }

    #[test]
    fn endowment_checks() {
        let set = UncertaintySet::singleton(TreeMeasure::new(vec![0.5, 0.5]).unwrap());
        let u = Utility::exponential(1.0).unwrap();
        assert!(check_endowment_admissible(&[0.0, 0.0], &set, &u).passed());
        assert!(check_endowment_admissible(&[2.0, 0.5], &set, &u).passed());
        assert!(!check_endowment_admissible(&[1e6, 0.0], &set, &u).passed());
    }

    #[test]
    fn arbitrage_is_rejected() {
        let m = Market::multinomial(1.0, &[vec![1.0, 0.5]]);
        let poly = MartingalePolytope::assemble(&m);
        let set = UncertaintySet::singleton(TreeMeasure::new(vec![0.5, 0.5]).unwrap());
        let u = Utility::exponential(1.0).unwrap();
        let prob = DualProblem { market: &m, set: &set, utility: &u, x: 0.0, endowment: None };
        assert_eq!(solve_dual(&prob, &poly, &DualOptions::default()).unwrap_err(), DualError::EmptyPolytope);
    }
}
