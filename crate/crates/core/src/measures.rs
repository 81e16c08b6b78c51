//! Probability measures on an event tree, their density processes, pasting
//! at stopping times and m-stability of finitely generated uncertainty sets.
//!
//! The reference measure is uniform on terminal nodes. Every measure is
//! absolutely continuous with respect to it, and equivalence to the
//! reference is strict positivity of the terminal weights.

use serde::Serialize;
use thiserror::Error;

use crate::lp::{hull_distance, HullFit};
use crate::market::{EventTree, StoppingTime};

/// Tolerance on the total mass of a probability measure.
pub const MASS_TOL: f64 = 1e-12;

/// Default cap on the generator count of [`m_stable_hull`].
pub const DEFAULT_GENERATOR_CAP: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("expected {expected} terminal weights, got {got}")]
    Length { expected: usize, got: usize },
    #[error("weight at terminal index {index} is {value}, must be finite and nonnegative")]
    NegativeWeight { index: usize, value: f64 },
    #[error("weights sum to {0}, expected 1")]
    Mass(f64),
    #[error("uncertainty set needs at least one generator")]
    NoGenerators,
    #[error("pasting undefined: the second measure vanishes at node {node:?} which the first one charges")]
    PastingUndefined { node: String },
    #[error("no strictly positive generator; pasting requires an equivalent measure")]
    NoEquivalentGenerator,
    #[error("m-stable closure exceeded the generator cap {cap}")]
    GeneratorCap { cap: usize },
}

/// A probability measure given by its terminal weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct TreeMeasure {
    weights: Vec<f64>,
}

impl TreeMeasure {
    pub fn new(weights: Vec<f64>) -> Result<TreeMeasure, MeasureError> {
        for (index, &value) in weights.iter().enumerate() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(MeasureError::NegativeWeight { index, value });
            }
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > MASS_TOL {
            return Err(MeasureError::Mass(s));
        }
        Ok(TreeMeasure { weights })
    }

    /// Checks the length against the tree as well.
    pub fn on_tree(tree: &EventTree, weights: Vec<f64>) -> Result<TreeMeasure, MeasureError> {
        if weights.len() != tree.n_terminals() {
            return Err(MeasureError::Length { expected: tree.n_terminals(), got: weights.len() });
        }
        TreeMeasure::new(weights)
    }

    /// Normalizes nonnegative weights to unit mass.
    pub fn normalized(mut weights: Vec<f64>) -> Result<TreeMeasure, MeasureError> {
        let s: f64 = weights.iter().sum();
        if !(s > 0.0) {
            return Err(MeasureError::Mass(s));
        }
        for w in &mut weights {
            *w /= s;
        }
        TreeMeasure::new(weights)
    }

    /// The uniform reference measure.
    pub fn reference(tree: &EventTree) -> TreeMeasure {
        let n = tree.n_terminals();
        TreeMeasure { weights: vec![1.0 / n as f64; n] }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Mass of the atom `node`, i.e. the sum over its terminal descendants.
    pub fn node_mass(&self, tree: &EventTree, node: usize) -> f64 {
        self.weights[tree.leaf_range(node)].iter().sum()
    }

    /// Masses of all nodes.
    pub fn node_masses(&self, tree: &EventTree) -> Vec<f64> {
        (0..tree.len()).map(|n| self.node_mass(tree, n)).collect()
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.weights.iter().all(|&w| w > 0.0)
    }

    pub fn support(&self) -> Vec<bool> {
        self.weights.iter().map(|&w| w > 0.0).collect()
    }

    /// `E[f]` for a terminal payoff `f`.
    pub fn expect(&self, f: &[f64]) -> f64 {
        self.weights.iter().zip(f).map(|(w, x)| w * x).sum()
    }

    /// `E[f | node]`; `None` when the node has zero mass.
    pub fn conditional_expect(&self, tree: &EventTree, node: usize, f: &[f64]) -> Option<f64> {
        let r = tree.leaf_range(node);
        let m: f64 = self.weights[r.clone()].iter().sum();
        (m > 0.0).then(|| self.weights[r.clone()].iter().zip(&f[r]).map(|(w, x)| w * x).sum::<f64>() / m)
    }

    /// Convex combination `sum_k c_k m_k` of measures.
    pub fn mixture(measures: &[&TreeMeasure], coeffs: &[f64]) -> TreeMeasure {
        assert_eq!(measures.len(), coeffs.len());
        let n = measures[0].len();
        let mut w = vec![0.0; n];
        for (m, &c) in measures.iter().zip(coeffs) {
            for (a, b) in w.iter_mut().zip(&m.weights) {
                *a += c * b;
            }
        }
        let s: f64 = w.iter().sum();
        for a in &mut w {
            *a /= s;
        }
        TreeMeasure { weights: w }
    }

    pub fn max_abs_diff(&self, other: &TreeMeasure) -> f64 {
        self.weights.iter().zip(&other.weights).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Density process `Z_t = (dQ/dRef)|F_t` at every node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityProcess {
    pub values: Vec<f64>,
}

/// `Z(n) = Q(n) / Ref(n)`.
pub fn density_process(tree: &EventTree, q: &TreeMeasure) -> DensityProcess {
    let n_term = tree.n_terminals() as f64;
    let values = (0..tree.len())
        .map(|n| {
            let r = tree.leaf_range(n);
            let ref_mass = r.len() as f64 / n_term;
            q.node_mass(tree, n) / ref_mass
        })
        .collect();
    DensityProcess { values }
}

/// The measure that follows `q` up to `tau` and `qp` afterwards, with
/// reference density `Z_tau * Z'_T / Z'_tau`.
///
/// In weights: `bar Q(w) = Q(a) * Q'(w) / Q'(a)` where `a` is the `tau` node
/// on the path to `w`. Defined whenever `qp` charges every `tau` node that
/// `q` charges, in particular whenever `qp` is strictly positive.
pub fn paste(
    tree: &EventTree,
    q: &TreeMeasure,
    qp: &TreeMeasure,
    tau: &StoppingTime,
) -> Result<TreeMeasure, MeasureError> {
    let mut weights = vec![0.0; tree.n_terminals()];
    for &a in tau.nodes() {
        let qa = q.node_mass(tree, a);
        if qa == 0.0 {
            continue;
        }
        let qpa = qp.node_mass(tree, a);
        if qpa == 0.0 {
            return Err(MeasureError::PastingUndefined { node: tree.label(a).to_string() });
        }
        for k in tree.leaf_range(a) {
            weights[k] = qa * qp.weights[k] / qpa;
        }
    }
    let s: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= s;
    }
    Ok(TreeMeasure { weights })
}

/// The convex hull of finitely many measures on a tree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UncertaintySet {
    generators: Vec<TreeMeasure>,
    has_equivalent: bool,
}

impl UncertaintySet {
    pub fn new(generators: Vec<TreeMeasure>) -> Result<UncertaintySet, MeasureError> {
        if generators.is_empty() {
            return Err(MeasureError::NoGenerators);
        }
        let n = generators[0].len();
        if let Some(g) = generators.iter().find(|g| g.len() != n) {
            return Err(MeasureError::Length { expected: n, got: g.len() });
        }
        // Some hull member is strictly positive iff the union of supports is everything.
        let has_equivalent = (0..n).all(|i| generators.iter().any(|g| g.weights[i] > 0.0));
        Ok(UncertaintySet { generators, has_equivalent })
    }

    pub fn singleton(p: TreeMeasure) -> UncertaintySet {
        UncertaintySet::new(vec![p]).unwrap()
    }

    pub fn generators(&self) -> &[TreeMeasure] {
        &self.generators
    }

    pub fn len(&self) -> usize {
        self.generators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generators.is_empty()
    }

    /// Whether some member of the hull is equivalent to the reference.
    pub fn has_equivalent_element(&self) -> bool {
        self.has_equivalent
    }

    /// Uniform mixture of the generators, a hull member of maximal support.
    pub fn barycenter(&self) -> TreeMeasure {
        let refs: Vec<&TreeMeasure> = self.generators.iter().collect();
        let c = vec![1.0 / refs.len() as f64; refs.len()];
        TreeMeasure::mixture(&refs, &c)
    }

    /// `sum_k w_k P_k`.
    pub fn mix(&self, w: &[f64]) -> TreeMeasure {
        let refs: Vec<&TreeMeasure> = self.generators.iter().collect();
        TreeMeasure::mixture(&refs, w)
    }

    pub fn fit(&self, x: &TreeMeasure) -> HullFit {
        let pts: Vec<&[f64]> = self.generators.iter().map(|g| g.weights()).collect();
        hull_distance(&pts, x.weights())
    }
}

/// Whether `x` lies in the hull of `set`, within [`crate::lp::HULL_TOL`] in L1.
pub fn hull_membership(x: &TreeMeasure, set: &UncertaintySet) -> bool {
    set.fit(x).is_member()
}

/// A pasting that leaves the hull.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PastingWitness {
    pub first: usize,
    pub second: usize,
    pub stopping_time: Vec<String>,
    pub pasted: TreeMeasure,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum MStability {
    Stable,
    Unstable { witness: PastingWitness },
    /// No strictly positive generator, so no pasting is required.
    VacuouslyStable,
}

impl MStability {
    pub fn is_stable(&self) -> bool {
        !matches!(self, MStability::Unstable { .. })
    }
}

/// Checks that every pasting of a generator with a strictly positive
/// generator at every given stopping time stays in the hull.
pub fn is_m_stable(tree: &EventTree, set: &UncertaintySet, taus: &[StoppingTime]) -> MStability {
    let positive: Vec<usize> = (0..set.len()).filter(|&j| set.generators[j].is_strictly_positive()).collect();
    if positive.is_empty() {
        return MStability::VacuouslyStable;
    }
    for i in 0..set.len() {
        for &j in &positive {
            for tau in taus {
                let pasted = paste(tree, &set.generators[i], &set.generators[j], tau)
                    .expect("strictly positive second measure");
                let fit = set.fit(&pasted);
                if !fit.is_member() {
                    return MStability::Unstable {
                        witness: PastingWitness {
                            first: i,
                            second: j,
                            stopping_time: tau.labels(tree).into_iter().map(String::from).collect(),
                            pasted,
                            distance: fit.distance,
                        },
                    };
                }
            }
        }
    }
    MStability::Stable
}

/// Closes `set` under pasting: escapees of generator pairs are added as new
/// generators until a fixpoint is reached.
pub fn m_stable_hull(
    tree: &EventTree,
    set: &UncertaintySet,
    taus: &[StoppingTime],
    cap: usize,
) -> Result<UncertaintySet, MeasureError> {
    if !set.generators.iter().any(TreeMeasure::is_strictly_positive) {
        return Err(MeasureError::NoEquivalentGenerator);
    }
    let mut current = set.clone();
    loop {
        let mut added = Vec::new();
        let positive: Vec<usize> =
            (0..current.len()).filter(|&j| current.generators[j].is_strictly_positive()).collect();
        for i in 0..current.len() {
            for &j in &positive {
                for tau in taus {
                    let pasted = paste(tree, &current.generators[i], &current.generators[j], tau)?;
                    if current.fit(&pasted).is_member() {
                        continue;
                    }
                    if added.iter().any(|a: &TreeMeasure| a.max_abs_diff(&pasted) <= 1e-14) {
                        continue;
                    }
                    added.push(pasted);
                    if current.len() + added.len() > cap {
                        return Err(MeasureError::GeneratorCap { cap });
                    }
                }
            }
        }
        if added.is_empty() {
            return Ok(current);
        }
        let mut gens = current.generators;
        gens.extend(added);
        current = UncertaintySet::new(gens)?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::enumerate_stopping_times;

    fn iid(tree: &EventTree, p_up: f64) -> TreeMeasure {
        let w = tree
            .terminals()
            .iter()
            .map(|&leaf| {
                let mut prob = 1.0;
                let mut c = leaf;
                while let Some(p) = tree.parent(c) {
                    prob *= if tree.children(p)[0] == c { p_up } else { 1.0 - p_up };
                    c = p;
                }
                prob
            })
            .collect();
        TreeMeasure::new(w).unwrap()
    }

    #[test]
    fn measure_validation() {
        assert!(matches!(TreeMeasure::new(vec![0.5, 0.6]), Err(MeasureError::Mass(_))));
        assert!(matches!(TreeMeasure::new(vec![1.5, -0.5]), Err(MeasureError::NegativeWeight { index: 1, .. })));
        let t = EventTree::uniform(&[2]);
        assert!(matches!(TreeMeasure::on_tree(&t, vec![1.0]), Err(MeasureError::Length { .. })));
    }

    #[test]
    fn density_examples() {
        let t = EventTree::uniform(&[2]);
        let z = density_process(&t, &TreeMeasure::reference(&t));
        assert!(z.values.iter().all(|&v| (v - 1.0).abs() < 1e-15));

        let q = TreeMeasure::new(vec![1.0 / 3.0, 2.0 / 3.0]).unwrap();
        let z = density_process(&t, &q);
        assert!((z.values[0] - 1.0).abs() < 1e-15);
        assert!((z.values[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((z.values[2] - 4.0 / 3.0).abs() < 1e-15);

        let q = TreeMeasure::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(density_process(&t, &q).values[1], 0.0);
    }

    #[test]
    fn density_is_a_reference_martingale() {
        let t = EventTree::uniform(&[3, 2]);
        let q = TreeMeasure::normalized((1..=6).map(f64::from).collect()).unwrap();
        let z = density_process(&t, &q);
        for n in t.non_terminals() {
            let ch = t.children(n);
            // Uniform tree: conditional reference weights are equal.
            let avg: f64 = ch.iter().map(|&c| z.values[c]).sum::<f64>() / ch.len() as f64;
            assert!((avg - z.values[n]).abs() < 1e-14);
        }
    }

    #[test]
    fn paste_examples() {
        let t = EventTree::uniform(&[2, 2]);
        let taus = enumerate_stopping_times(&t, 100).unwrap();
        let q = TreeMeasure::reference(&t);
        let qp = iid(&t, 0.9);
        // tau = root gives qp; tau = terminals gives q.
        assert!(paste(&t, &q, &qp, &taus[0]).unwrap().max_abs_diff(&qp) < 1e-15);
        let last = taus.iter().find(|s| s.nodes().len() == 4).unwrap();
        assert!(paste(&t, &q, &qp, last).unwrap().max_abs_diff(&q) < 1e-15);

        let mid = StoppingTime::at_time(&t, 1);
        let p = paste(&t, &q, &qp, &mid).unwrap();
        for (a, b) in p.weights().iter().zip([0.45, 0.05, 0.45, 0.05]) {
            assert!((a - b).abs() < 1e-15);
        }

        let degenerate = TreeMeasure::new(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!(matches!(paste(&t, &q, &degenerate, &mid), Err(MeasureError::PastingUndefined { .. })));
    }

    #[test]
    fn hull_examples() {
        let a = TreeMeasure::new(vec![0.5, 0.5]).unwrap();
        let b = TreeMeasure::new(vec![0.7, 0.3]).unwrap();
        let set = UncertaintySet::new(vec![a.clone(), b.clone()]).unwrap();
        assert!(hull_membership(&a, &set));
        assert!(hull_membership(&TreeMeasure::mixture(&[&a, &b], &[0.5, 0.5]), &set));
        assert!(!hull_membership(&TreeMeasure::new(vec![0.2, 0.8]).unwrap(), &set));
    }

    #[test]
    fn m_stability_examples() {
        let t = EventTree::uniform(&[2, 2]);
        let taus = enumerate_stopping_times(&t, 100).unwrap();
        let single = UncertaintySet::singleton(iid(&t, 0.3));
        assert_eq!(is_m_stable(&t, &single, &taus), MStability::Stable);

        let set = UncertaintySet::new(vec![TreeMeasure::reference(&t), iid(&t, 0.9)]).unwrap();
        match is_m_stable(&t, &set, &taus) {
            MStability::Unstable { witness } => assert!(witness.distance > 1e-3),
            other => panic!("expected instability, got {other:?}"),
        }
        let closed = m_stable_hull(&t, &set, &taus, 100).unwrap();
        assert!(is_m_stable(&t, &closed, &taus).is_stable());
        assert!(closed.len() > set.len());
        // Closure only adds node-wise products of {0.5, 0.9} kernels.
        for g in closed.generators() {
            let masses = g.node_masses(&t);
            for n in t.non_terminals() {
                let up = masses[t.children(n)[0]] / masses[n];
                assert!((up - 0.5).abs() < 1e-12 || (up - 0.9).abs() < 1e-12);
            }
        }

        let again = m_stable_hull(&t, &single, &taus, 100).unwrap();
        assert_eq!(again, single);

        let degenerate = UncertaintySet::new(vec![TreeMeasure::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap()]).unwrap();
        assert_eq!(is_m_stable(&t, &degenerate, &taus), MStability::VacuouslyStable);
        assert!(matches!(m_stable_hull(&t, &degenerate, &taus, 10), Err(MeasureError::NoEquivalentGenerator)));
    }
}
