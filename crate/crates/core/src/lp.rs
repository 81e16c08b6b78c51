//! Convex-hull membership by linear programming.

use minilp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem};

/// Tolerance for hull membership decisions. Points at distance exactly at
/// the tolerance count as members.
pub const HULL_TOL: f64 = 1e-9;

/// Result of a hull-distance computation.
#[derive(Debug, Clone, PartialEq)]
pub struct HullFit {
    /// L1 distance from the target to the best convex combination found,
    /// recomputed in plain floating point from the mixing weights.
    pub distance: f64,
    /// Mixing weights over the points (nonnegative, summing to one).
    pub weights: Vec<f64>,
}

impl HullFit {
    pub fn is_member(&self) -> bool {
        self.distance <= HULL_TOL
    }
}

/// Minimizes `|sum_k w_k points[k] - target|_1` over the probability simplex.
///
/// The LP has the mixing weights plus one positive and one negative slack per
/// coordinate. The reported distance is evaluated from the cleaned weights so
/// it is an honest upper bound on the true distance.
pub fn hull_distance(points: &[&[f64]], target: &[f64]) -> HullFit {
    assert!(!points.is_empty(), "hull of an empty set");
    let n = target.len();
    if points.len() == 1 {
        let distance = points[0].iter().zip(target).map(|(a, b)| (a - b).abs()).sum();
        return HullFit { distance, weights: vec![1.0] };
    }
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let w: Vec<_> = points.iter().map(|_| lp.add_var(0.0, (0.0, f64::INFINITY))).collect();
    let sp: Vec<_> = (0..n).map(|_| lp.add_var(1.0, (0.0, f64::INFINITY))).collect();
    let sm: Vec<_> = (0..n).map(|_| lp.add_var(1.0, (0.0, f64::INFINITY))).collect();
    for i in 0..n {
        let mut e = LinearExpr::empty();
        for (k, p) in points.iter().enumerate() {
            if p[i] != 0.0 {
                e.add(w[k], p[i]);
            }
        }
        e.add(sp[i], 1.0);
        e.add(sm[i], -1.0);
        lp.add_constraint(e, ComparisonOp::Eq, target[i]);
    }
    let mut total = LinearExpr::empty();
    for &v in &w {
        total.add(v, 1.0);
    }
    lp.add_constraint(total, ComparisonOp::Eq, 1.0);

    let mut weights = match lp.solve() {
        Ok(sol) => w.iter().map(|&v| sol[v].max(0.0)).collect::<Vec<_>>(),
        // The LP is always feasible; fall back to the nearest single point.
        Err(_) => {
            let mut best = vec![0.0; points.len()];
            let k = (0..points.len())
                .min_by(|&a, &b| {
                    let da: f64 = points[a].iter().zip(target).map(|(x, y)| (x - y).abs()).sum();
                    let db: f64 = points[b].iter().zip(target).map(|(x, y)| (x - y).abs()).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            best[k] = 1.0;
            best
        }
    };
    let s: f64 = weights.iter().sum();
    for v in &mut weights {
        *v /= s;
    }
    let distance = (0..n)
        .map(|i| {
            let mix: f64 = points.iter().zip(&weights).map(|(p, w)| w * p[i]).sum();
            (mix - target[i]).abs()
        })
        .sum();
    HullFit { distance, weights }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_membership() {
        let a = [0.5, 0.5];
        let b = [0.7, 0.3];
        let pts: Vec<&[f64]> = vec![&a, &b];
        assert!(hull_distance(&pts, &[0.6, 0.4]).is_member());
        assert!(hull_distance(&pts, &[0.5, 0.5]).is_member());
        let out = hull_distance(&pts, &[0.2, 0.8]);
        assert!(!out.is_member());
        // Nearest hull point is (0.5, 0.5).
        assert!((out.distance - 0.6).abs() < 1e-12);
    }
}
