//! The polytope of martingale measures of a tree market, its vertices, and
//! the finite-entropy subsets that quantify over it.
//!
//! A measure is a martingale measure iff at every node it charges, its
//! one-step kernel is a martingale kernel on children whose subtrees admit a
//! martingale measure. Vertices are therefore exactly the measures whose
//! kernel at every charged node is a vertex of the local kernel polytope,
//! and these are enumerated as tree products.

use std::collections::HashSet;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::ext::ExtReal;
use crate::market::Market;
use crate::measures::{TreeMeasure, UncertaintySet};
use crate::utility::{robust_entropy, CheckStatus, EntropyError, RobustEntropyOptions, Utility};

/// Tolerance on each martingale node equation.
pub const MARTINGALE_TOL: f64 = 1e-10;

/// Default cap on the number of enumerated vertices.
pub const DEFAULT_VERTEX_CAP: usize = 50_000;

/// Default number of random interior mixtures used next to the vertices
/// when a statement is checked for all finite-entropy martingale measures.
pub const DEFAULT_MIXTURES: usize = 100;

/// Sparse kernel: `(child position, probability)` pairs.
type Kernel = Vec<(usize, f64)>;

/// Linear description of all martingale measures of a market.
#[derive(Debug)]
pub struct MartingalePolytope {
    market: Market,
    /// One row per (non-terminal node, asset); columns are terminal weights.
    constraints: DMatrix<f64>,
    /// Vertex kernels of the one-step polytope at each node.
    kernels: Vec<Vec<Kernel>>,
    viable: Vec<bool>,
    /// Number of vertices of the subtree polytope, as a float to saturate.
    counts: Vec<f64>,
    vertex_cap: usize,
    vertices: OnceLock<VertexSet>,
}

/// Enumerated vertices; `complete` is false when the cap forced sampling.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VertexSet {
    pub vertices: Vec<TreeMeasure>,
    pub complete: bool,
    pub warning: Option<String>,
}

impl MartingalePolytope {
    pub fn assemble(market: &Market) -> MartingalePolytope {
        let tree = &market.tree;
        let d = market.dim();
        let non_terminals: Vec<usize> = tree.non_terminals().collect();
        let mut constraints = DMatrix::zeros(non_terminals.len() * d, tree.n_terminals());
        for (r, &n) in non_terminals.iter().enumerate() {
            for &c in tree.children(n) {
                let inc = market.prices.increment(tree, c);
                for k in tree.leaf_range(c) {
                    for j in 0..d {
                        constraints[(r * d + j, k)] = inc[j];
                    }
                }
            }
        }

        let mut kernels = vec![Vec::new(); tree.len()];
        let mut viable = vec![false; tree.len()];
        let mut counts = vec![0.0; tree.len()];
        // BFS order: children have larger indices than parents.
        for n in (0..tree.len()).rev() {
            if tree.is_terminal(n) {
                viable[n] = true;
                counts[n] = 1.0;
                continue;
            }
            let children = tree.children(n);
            let ok: Vec<usize> = (0..children.len()).filter(|&i| viable[children[i]]).collect();
            let incs: Vec<Vec<f64>> = ok.iter().map(|&i| market.prices.increment(tree, children[i])).collect();
            let local: Vec<Kernel> = local_vertices(&incs, d)
                .into_iter()
                .map(|k| k.into_iter().map(|(pos, p)| (ok[pos], p)).collect())
                .collect();
            viable[n] = !local.is_empty();
            counts[n] = local.iter().map(|k| k.iter().map(|&(i, _)| counts[children[i]]).product::<f64>()).sum();
            kernels[n] = local;
        }
        MartingalePolytope {
            market: market.clone(),
            constraints,
            kernels,
            viable,
            counts,
            vertex_cap: DEFAULT_VERTEX_CAP,
            vertices: OnceLock::new(),
        }
    }

    /// Sets the cap used by [`vertices`](Self::vertices); clears the cache.
    pub fn with_vertex_cap(mut self, cap: usize) -> MartingalePolytope {
        self.vertex_cap = cap;
        self.vertices = OnceLock::new();
        self
    }

    pub fn market(&self) -> &Market {
        &self.market
    }

    /// The node equations as a matrix acting on terminal weights.
    pub fn constraints(&self) -> &DMatrix<f64> {
        &self.constraints
    }

    /// Empty iff the tree market admits arbitrage.
    pub fn is_empty(&self) -> bool {
        !self.viable[self.market.tree.root()]
    }

    /// Number of vertices, saturating in floating point.
    pub fn vertex_count(&self) -> f64 {
        self.counts[self.market.tree.root()]
    }

    /// Largest violation of a node equation.
    pub fn max_violation(&self, q: &TreeMeasure) -> f64 {
        let v = &self.constraints * DVector::from_column_slice(q.weights());
        v.amax()
    }

    pub fn is_martingale_measure(&self, q: &TreeMeasure) -> bool {
        q.len() == self.market.tree.n_terminals() && self.max_violation(q) <= MARTINGALE_TOL
    }

    /// All vertices with the default cap, cached.
    pub fn vertices(&self) -> &VertexSet {
        self.vertices.get_or_init(|| self.vertices_with_cap(self.vertex_cap))
    }

    /// Vertices in deterministic order. Beyond `cap` a seeded random sample
    /// of at most `cap` distinct vertices is returned with a warning.
    pub fn vertices_with_cap(&self, cap: usize) -> VertexSet {
        if self.is_empty() {
            return VertexSet { vertices: Vec::new(), complete: true, warning: None };
        }
        let tree = &self.market.tree;
        let n_term = tree.n_terminals();
        let count = self.vertex_count();
        if count <= cap as f64 {
            let sparse = self.enumerate(tree.root());
            let vertices = sparse.into_iter().map(|s| dense(&s, n_term)).collect();
            return VertexSet { vertices, complete: true, warning: None };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = HashSet::new();
        let mut vertices = Vec::new();
        for _ in 0..cap.saturating_mul(4) {
            if vertices.len() >= cap {
                break;
            }
            let mut s = Vec::new();
            self.sample_into(tree.root(), 1.0, &mut rng, &mut s);
            s.sort_by_key(|&(k, _)| k);
            let key: Vec<(usize, u64)> = s.iter().map(|&(k, w)| (k, w.to_bits())).collect();
            if seen.insert(key) {
                vertices.push(dense(&s, n_term));
            }
        }
        VertexSet {
            warning: Some(format!(
                "vertex count {count:.3e} exceeds the cap {cap}; using {} randomly sampled vertices",
                vertices.len()
            )),
            vertices,
            complete: false,
        }
    }

    fn enumerate(&self, n: usize) -> Vec<Vec<(usize, f64)>> {
        let tree = &self.market.tree;
        if tree.is_terminal(n) {
            return vec![vec![(tree.terminal_index(n).unwrap(), 1.0)]];
        }
        let children = tree.children(n);
        let mut out = Vec::new();
        for kernel in &self.kernels[n] {
            let mut acc: Vec<Vec<(usize, f64)>> = vec![Vec::new()];
            for &(i, p) in kernel {
                let sub = self.enumerate(children[i]);
                let mut next = Vec::with_capacity(acc.len() * sub.len());
                for a in &acc {
                    for s in &sub {
                        let mut v = a.clone();
                        v.extend(s.iter().map(|&(k, w)| (k, p * w)));
                        next.push(v);
                    }
                }
                acc = next;
            }
            out.extend(acc);
        }
        out
    }

    fn sample_into(&self, n: usize, mass: f64, rng: &mut ChaCha8Rng, out: &mut Vec<(usize, f64)>) {
        let tree = &self.market.tree;
        if tree.is_terminal(n) {
            out.push((tree.terminal_index(n).unwrap(), mass));
            return;
        }
        let ks = &self.kernels[n];
        let kernel = &ks[rng.random_range(0..ks.len())];
        for &(i, p) in kernel {
            self.sample_into(tree.children(n)[i], mass * p, rng, out);
        }
    }

    /// Product of the averaged local vertex kernels: a martingale measure of
    /// maximal support. `None` when the polytope is empty.
    pub fn interior_point(&self) -> Option<TreeMeasure> {
        if self.is_empty() {
            return None;
        }
        let tree = &self.market.tree;
        let mut mass = vec![0.0; tree.len()];
        mass[tree.root()] = 1.0;
        for n in 0..tree.len() {
            if tree.is_terminal(n) || mass[n] == 0.0 {
                continue;
            }
            let ks = &self.kernels[n];
            for kernel in ks {
                for &(i, p) in kernel {
                    mass[tree.children(n)[i]] += mass[n] * p / ks.len() as f64;
                }
            }
        }
        let w = tree.terminals().iter().map(|&t| mass[t]).collect();
        TreeMeasure::normalized(w).ok()
    }

    /// Whether some martingale measure is equivalent to the reference.
    pub fn has_equivalent_measure(&self) -> bool {
        self.interior_point().is_some_and(|q| q.is_strictly_positive())
    }
}

fn dense(sparse: &[(usize, f64)], n: usize) -> TreeMeasure {
    let mut w = vec![0.0; n];
    for &(k, v) in sparse {
        w[k] += v;
    }
    TreeMeasure::normalized(w).expect("vertex weights form a probability")
}

/// Vertices of `{p in simplex : sum_i p_i incs[i] = 0}`.
///
/// A vertex is supported on an affinely independent set of increments, so
/// at most `d + 1` children; each candidate support is solved by least
/// squares and kept when the system is consistent and the solution positive.
fn local_vertices(incs: &[Vec<f64>], d: usize) -> Vec<Kernel> {
    let m = incs.len();
    let scale = incs.iter().flatten().fold(1.0_f64, |a, v| a.max(v.abs()));
    let mut out = Vec::new();
    for size in 1..=m.min(d + 1) {
        for subset in Combinations::new(m, size) {
            let a = DMatrix::from_fn(d + 1, size, |r, c| if r == 0 { 1.0 } else { incs[subset[c]][r - 1] });
            let mut b = DVector::zeros(d + 1);
            b[0] = 1.0;
            let svd = a.clone().svd(true, true);
            let smax = svd.singular_values.max();
            if svd.singular_values.iter().filter(|&&s| s > 1e-12 * smax.max(1.0)).count() < size {
                continue;
            }
            let Ok(p) = svd.solve(&b, 1e-14 * smax.max(1.0)) else { continue };
            if (&a * &p - &b).amax() > 1e-10 * scale {
                continue;
            }
            if p.iter().any(|&v| v <= 1e-14) {
                continue;
            }
            let s = p.sum();
            out.push(subset.iter().zip(p.iter()).map(|(&i, &v)| (i, v / s)).collect());
        }
    }
    out
}

/// Lexicographic `k`-subsets of `0..n`.
struct Combinations {
    n: usize,
    idx: Vec<usize>,
    done: bool,
}

impl Combinations {
    fn new(n: usize, k: usize) -> Combinations {
        Combinations { n, idx: (0..k).collect(), done: k > n }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.idx.clone();
        let k = self.idx.len();
        let mut i = k;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            if self.idx[i] < self.n - k + i {
                self.idx[i] += 1;
                for j in i + 1..k {
                    self.idx[j] = self.idx[j - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    }
}

/// Robust entropy of one vertex.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VertexEntropy {
    pub vertex: TreeMeasure,
    pub robust_entropy: ExtReal,
    pub equivalent: bool,
}

/// Finite-entropy classification of the vertices and the equivalent
/// martingale measure witness.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MvReport {
    pub vertices: Vec<VertexEntropy>,
    pub complete: bool,
    /// Some strictly positive martingale measure has finite robust entropy.
    pub has_equivalent: bool,
    /// `(Q, P)` with `Q ~ P ~ reference` and finite entropy.
    pub witness: Option<(TreeMeasure, TreeMeasure)>,
}

impl MvReport {
    /// Vertices with finite robust entropy.
    pub fn finite_vertices(&self) -> Vec<&TreeMeasure> {
        self.vertices.iter().filter(|v| v.robust_entropy.is_finite()).map(|v| &v.vertex).collect()
    }
}

/// Marks every vertex by the finiteness of its robust entropy and looks for
/// a strictly positive finite-entropy martingale measure.
///
/// A strictly positive `Q` has finite entropy against `P` iff `P` is
/// strictly positive, so the witness is the maximal-support martingale
/// measure paired with the generator barycenter.
pub fn filter_m_v(poly: &MartingalePolytope, set: &UncertaintySet, utility: &Utility) -> Result<MvReport, EntropyError> {
    let vs = poly.vertices();
    let vertices = vs
        .vertices
        .iter()
        .map(|v| {
            let r = robust_entropy(v.weights(), set, utility, RobustEntropyOptions::default())?;
            Ok(VertexEntropy { vertex: v.clone(), robust_entropy: r.value, equivalent: v.is_strictly_positive() })
        })
        .collect::<Result<Vec<_>, EntropyError>>()?;
    let witness = match poly.interior_point() {
        Some(q) if q.is_strictly_positive() && set.has_equivalent_element() => Some((q, set.barycenter())),
        _ => None,
    };
    Ok(MvReport { vertices, complete: vs.complete, has_equivalent: witness.is_some(), witness })
}

/// Finite-entropy vertices plus `n_mix` seeded random mixtures of them:
/// the sample on which statements about all of the finite-entropy
/// martingale measures are checked.
pub fn m_v_sample(report: &MvReport, n_mix: usize, seed: u64) -> Vec<TreeMeasure> {
    let finite = report.finite_vertices();
    let mut out: Vec<TreeMeasure> = finite.iter().map(|v| (*v).clone()).collect();
    if finite.len() < 2 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_mix {
        let raw: Vec<f64> = (0..finite.len()).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let s: f64 = raw.iter().sum();
        let c: Vec<f64> = raw.iter().map(|v| v / s).collect();
        out.push(TreeMeasure::mixture(&finite, &c));
    }
    out
}

/// Finiteness of the robust utility problem for every equivalent prior.
///
/// Automatic for utilities bounded above. Otherwise, for a strictly positive
/// prior `P`, `V(Q|P) < inf` forces `Q` strictly positive, so the condition
/// holds iff some strictly positive martingale measure exists (or no hull
/// member is strictly positive).
pub fn check_a6(set: &UncertaintySet, poly: &MartingalePolytope, utility: &Utility) -> CheckStatus {
    if utility.is_bounded_above() {
        return CheckStatus::AutoSatisfied { reason: "utility is bounded above".into() };
    }
    if !set.has_equivalent_element() {
        return CheckStatus::AutoSatisfied { reason: "no equivalent prior in the uncertainty set".into() };
    }
    if poly.has_equivalent_measure() {
        CheckStatus::Pass {
            detail: "a strictly positive martingale measure has finite entropy against every equivalent prior"
                .into(),
        }
    } else {
        CheckStatus::Fail {
            detail: "utility is unbounded and no strictly positive martingale measure exists, so every \
                     equivalent prior gives infinite entropy"
                .into(),
            witness: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{enumerate_stopping_times, EventTree, PriceProcess};
    use crate::measures::{is_m_stable, paste};

    fn assert_close(a: &TreeMeasure, b: &[f64]) {
        assert!(a.weights().iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12), "{:?} vs {b:?}", a.weights());
    }

    #[test]
    fn binomial_unique_measure() {
        let m = Market::binomial(1.0, 2.0, 0.5);
        let poly = MartingalePolytope::assemble(&m);
        let vs = poly.vertices();
        assert_eq!(vs.vertices.len(), 1);
        assert_close(&vs.vertices[0], &[1.0 / 3.0, 2.0 / 3.0]);
        assert!(poly.is_martingale_measure(&TreeMeasure::new(vec![1.0 / 3.0, 2.0 / 3.0]).unwrap()));
        assert!(!poly.is_martingale_measure(&TreeMeasure::new(vec![0.5, 0.5]).unwrap()));
    }

    #[test]
    fn trinomial_segment() {
        let m = Market::multinomial(1.0, &[vec![1.0, 0.0, -0.5]]);
        let poly = MartingalePolytope::assemble(&m);
        let vs = &poly.vertices().vertices;
        assert_eq!(vs.len(), 2);
        assert_close(&vs[0], &[0.0, 1.0, 0.0]);
        assert_close(&vs[1], &[1.0 / 3.0, 0.0, 2.0 / 3.0]);
        let q = poly.interior_point().unwrap();
        assert!(q.is_strictly_positive());
        assert!(poly.is_martingale_measure(&q));
    }

    #[test]
    fn arbitrage_gives_empty_polytope() {
        let m = Market::multinomial(1.0, &[vec![1.0, 0.5]]);
        let poly = MartingalePolytope::assemble(&m);
        assert!(poly.is_empty());
        assert!(poly.vertices().vertices.is_empty());
        assert!(poly.interior_point().is_none());
    }

    #[test]
    fn two_period_binomial_product() {
        let m = Market::multinomial(1.0, &[vec![1.0, -0.5], vec![1.0, -0.5]]);
        let poly = MartingalePolytope::assemble(&m);
        let vs = &poly.vertices().vertices;
        assert_eq!(vs.len(), 1);
        let (u, d) = (1.0 / 3.0, 2.0 / 3.0);
        assert_close(&vs[0], &[u * u, u * d, d * u, d * d]);
    }

    #[test]
    fn dead_subtree_is_excluded() {
        // The second child leads into an arbitrage subtree and must get mass 0.
        let tree = EventTree::uniform(&[3, 2]);
        let mut prices = vec![vec![1.0]; tree.len()];
        let set = |prices: &mut Vec<Vec<f64>>, label: &str, v: f64| {
            prices[tree.find(label).unwrap()] = vec![v];
        };
        set(&mut prices, "r.0", 2.0);
        set(&mut prices, "r.1", 1.0);
        set(&mut prices, "r.2", 0.5);
        set(&mut prices, "r.0.0", 3.0);
        set(&mut prices, "r.0.1", 1.0);
        set(&mut prices, "r.1.0", 2.0);
        set(&mut prices, "r.1.1", 1.5);
        set(&mut prices, "r.2.0", 1.0);
        set(&mut prices, "r.2.1", 0.0);
        let m = Market::new(tree.clone(), PriceProcess::new(&tree, 1, prices).unwrap());
        let poly = MartingalePolytope::assemble(&m);
        let vs = &poly.vertices().vertices;
        assert_eq!(vs.len(), 1);
        assert!(vs[0].weights()[2] == 0.0 && vs[0].weights()[3] == 0.0);
        assert!(poly.is_martingale_measure(&vs[0]));
        assert!(!poly.has_equivalent_measure());
    }

    #[test]
    fn two_asset_vertices() {
        // Children at the corners and centre of a square around the origin.
        let incs = vec![vec![1.0, 1.0], vec![-1.0, 1.0], vec![-1.0, -1.0], vec![1.0, -1.0], vec![0.0, 0.0]];
        let ks = local_vertices(&incs, 2);
        // Two diagonals plus the flat child.
        assert_eq!(ks.len(), 3);
        for k in &ks {
            let mut m = [0.0; 2];
            for &(i, p) in k {
                m[0] += p * incs[i][0];
                m[1] += p * incs[i][1];
            }
            assert!(m[0].abs() < 1e-14 && m[1].abs() < 1e-14);
        }
    }

    #[test]
    fn pasted_vertices_stay_martingale() {
        let m = Market::multinomial(1.0, &[vec![1.0, 0.0, -0.5], vec![0.5, 0.0, -1.0]]);
        let poly = MartingalePolytope::assemble(&m);
        let vs = &poly.vertices().vertices;
        assert_eq!(vs.len(), 2 + 2 * 2);
        let taus = enumerate_stopping_times(&m.tree, 100).unwrap();
        let q = poly.interior_point().unwrap();
        for v in vs {
            for tau in &taus {
                let p = paste(&m.tree, v, &q, tau).unwrap();
                assert!(poly.is_martingale_measure(&p));
            }
        }
        let set = UncertaintySet::new(vs.clone()).unwrap();
        // No vertex is strictly positive, so add the interior point.
        let mut gens = vs.clone();
        gens.push(q);
        let with_interior = UncertaintySet::new(gens).unwrap();
        assert!(is_m_stable(&m.tree, &with_interior, &taus).is_stable());
        assert!(is_m_stable(&m.tree, &set, &taus).is_stable());
    }

    #[test]
    fn cap_falls_back_to_sampling() {
        let m = Market::multinomial(1.0, &[vec![1.0, 0.0, -0.5], vec![0.5, 0.0, -1.0]]);
        let poly = MartingalePolytope::assemble(&m);
        let vs = poly.vertices_with_cap(5);
        assert!(!vs.complete);
        assert!(vs.warning.is_some());
        assert!(vs.vertices.len() <= 5 && !vs.vertices.is_empty());
        assert!(vs.vertices.iter().all(|v| poly.is_martingale_measure(v)));
        assert_eq!(vs, poly.vertices_with_cap(5));
    }

    #[test]
    fn filter_examples() {
        let u = Utility::exponential(1.0).unwrap();
        let m = Market::binomial(1.0, 2.0, 0.5);
        let poly = MartingalePolytope::assemble(&m);
        let uniform = UncertaintySet::singleton(TreeMeasure::new(vec![0.5, 0.5]).unwrap());
        let r = filter_m_v(&poly, &uniform, &u).unwrap();
        assert!(r.has_equivalent);
        assert_close(&r.witness.as_ref().unwrap().0, &[1.0 / 3.0, 2.0 / 3.0]);

        let degenerate = UncertaintySet::singleton(TreeMeasure::new(vec![1.0, 0.0]).unwrap());
        let r = filter_m_v(&poly, &degenerate, &u).unwrap();
        assert!(!r.has_equivalent);
        assert_eq!(r.vertices[0].robust_entropy, ExtReal::PosInf);

        let tri = Market::multinomial(1.0, &[vec![1.0, 0.0, -0.5]]);
        let poly = MartingalePolytope::assemble(&tri);
        let set = UncertaintySet::singleton(TreeMeasure::new(vec![0.2, 0.5, 0.3]).unwrap());
        let r = filter_m_v(&poly, &set, &u).unwrap();
        let v = &r.vertices[0];
        assert!(v.robust_entropy.is_finite() && !v.equivalent);
        assert_eq!(m_v_sample(&r, 10, 1).len(), 12);
    }

    #[test]
    fn a6_reports() {
        let exp = Utility::exponential(1.0).unwrap();
        let unbounded = crate::utility::tests_support::log_tail();
        let m = Market::binomial(1.0, 2.0, 0.5);
        let poly = MartingalePolytope::assemble(&m);
        let set = UncertaintySet::singleton(TreeMeasure::new(vec![0.5, 0.5]).unwrap());
        assert!(matches!(check_a6(&set, &poly, &exp), CheckStatus::AutoSatisfied { .. }));
        assert!(matches!(check_a6(&set, &poly, &unbounded), CheckStatus::Pass { .. }));

        // Only the down-state measure is a martingale measure.
        let m = Market::multinomial(1.0, &[vec![1.0, 0.5, 0.0]]);
        let poly = MartingalePolytope::assemble(&m);
        let set = UncertaintySet::singleton(TreeMeasure::new(vec![0.2, 0.3, 0.5]).unwrap());
        assert!(matches!(check_a6(&set, &poly, &unbounded), CheckStatus::Fail { .. }));
    }
}
