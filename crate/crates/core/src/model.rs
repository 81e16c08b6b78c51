//! JSON model files: schema, loading with JSON-pointer error locations, and
//! conversion into validated library objects.
//!
//! ```json
//! {
//!   "schema": 1,
//!   "name": "binomial",
//!   "T": 1,
//!   "d": 1,
//!   "nodes": [{"id": "r", "parent": null, "time": 0},
//!             {"id": "u", "parent": "r", "time": 1},
//!             {"id": "d", "parent": "r", "time": 1}],
//!   "prices": {"r": [1.0], "u": [2.0], "d": [0.5]},
//!   "generators": [{"u": 0.5, "d": 0.5}],
//!   "utility": {"kind": "exponential", "alpha": 1.0}
//! }
//! ```
//!
//! Optional fields: `x` (initial capital, default 0), `endowment`
//! (`{terminal_id: payoff}`), `solver` (see [`SolverConfig`]) and
//! `expected_failures`. Unknown fields are rejected everywhere.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::{EventTree, Market, PriceProcess, RawNode, TreeError};
use crate::measures::{MeasureError, TreeMeasure, UncertaintySet};
use crate::utility::{SampledUtility, Utility, UtilityError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("schema violation at {pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error("unsupported schema version {0}, expected {SCHEMA_VERSION}")]
    Version(u32),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("{pointer}: {message}")]
    Invalid { pointer: String, message: String },
    #[error("{pointer}: {source}")]
    Measure { pointer: String, source: MeasureError },
    #[error("/utility: {0}")]
    Utility(#[from] UtilityError),
}

impl ModelError {
    fn invalid(pointer: impl Into<String>, message: impl Into<String>) -> ModelError {
        ModelError::Invalid { pointer: pointer.into(), message: message.into() }
    }
}

/// Utility description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UtilityConfig {
    Exponential {
        alpha: f64,
    },
    MixtureExponential {
        weights: Vec<f64>,
        rates: Vec<f64>,
    },
    /// Tabulated `U` and `U'` on an increasing grid; `U'` is interpolated
    /// log-linearly and extended exponentially beyond the grid.
    Sampled {
        x: Vec<f64>,
        u: Vec<f64>,
        du: Vec<f64>,
    },
    Shifted {
        shift: f64,
        inner: Box<UtilityConfig>,
    },
}

impl UtilityConfig {
    pub fn build(&self) -> Result<Utility, UtilityError> {
        match self {
            UtilityConfig::Exponential { alpha } => Utility::exponential(*alpha),
            UtilityConfig::MixtureExponential { weights, rates } => {
                Utility::mixture_exponential(weights.clone(), rates.clone())
            }
            UtilityConfig::Sampled { x, u, du } => {
                Ok(Utility::Sampled(SampledUtility::new(x.clone(), u.clone(), du.clone())?))
            }
            UtilityConfig::Shifted { shift, inner } => Ok(inner.build()?.shifted(*shift)),
        }
    }
}

/// Solver and verification settings; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub cert_tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Dual solves compared by the maximality check.
    pub starts: usize,
    /// Random mixtures added to the finite-entropy vertices.
    pub mixtures: usize,
    /// Random hull mixtures checked in addition to the generators.
    pub hull_mixtures: usize,
    pub stopping_time_cap: usize,
    pub vertex_cap: usize,
    pub brute_force_starts: usize,
    /// Largest strategy dimension searched by the brute-force oracle.
    pub brute_force_cap: usize,
    pub convexity_samples: usize,
    pub young_samples: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            cert_tol: 1e-7,
            max_iter: 2_000,
            seed: 0,
            starts: 8,
            mixtures: crate::polytope::DEFAULT_MIXTURES,
            hull_mixtures: 20,
            stopping_time_cap: crate::market::DEFAULT_STOPPING_TIME_CAP,
            vertex_cap: crate::polytope::DEFAULT_VERTEX_CAP,
            brute_force_starts: 16,
            brute_force_cap: crate::primal::DEFAULT_STRATEGY_CAP,
            convexity_samples: 200,
            young_samples: 50,
        }
    }
}

/// A check documented to fail on this model, with the witness it must
/// reproduce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedFailure {
    pub check: String,
    pub node: String,
    pub measure: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema: u32,
    #[serde(default)]
    pub name: String,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub d: usize,
    pub nodes: Vec<RawNode>,
    pub prices: BTreeMap<String, Vec<f64>>,
    pub generators: Vec<BTreeMap<String, f64>>,
    pub utility: UtilityConfig,
    #[serde(default)]
    pub x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endowment: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub expected_failures: Vec<ExpectedFailure>,
}

/// A validated model.
#[derive(Debug, Clone)]
pub struct Model {
    pub name: String,
    pub market: Market,
    pub set: UncertaintySet,
    pub utility: Utility,
    pub utility_config: UtilityConfig,
    pub x: f64,
    /// Terminal payoff in terminal-index order.
    pub endowment: Option<Vec<f64>>,
    pub config: SolverConfig,
    pub expected_failures: Vec<ExpectedFailure>,
}

impl ModelFile {
    pub fn from_json(text: &str) -> Result<ModelFile, ModelError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| ModelError::Schema {
            pointer: pointer(e.path()),
            message: e.inner().to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<ModelFile, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
        ModelFile::from_json(&text)
    }

    pub fn into_model(self) -> Result<Model, ModelError> {
        if self.schema != SCHEMA_VERSION {
            return Err(ModelError::Version(self.schema));
        }
        let tree = EventTree::validate(&self.nodes, self.horizon)?;
        if self.d == 0 {
            return Err(ModelError::invalid("/d", "at least one asset is required"));
        }
        let mut values = Vec::with_capacity(tree.len());
        for n in 0..tree.len() {
            let id = tree.label(n);
            let v = self
                .prices
                .get(id)
                .ok_or_else(|| ModelError::invalid("/prices", format!("missing price for node {id:?}")))?;
            values.push(v.clone());
        }
        if let Some(extra) = self.prices.keys().find(|k| tree.find(k).is_none()) {
            return Err(ModelError::invalid(format!("/prices/{}", escape(extra)), "unknown node"));
        }
        let prices = PriceProcess::new(&tree, self.d, values)?;

        let mut generators = Vec::with_capacity(self.generators.len());
        for (i, g) in self.generators.iter().enumerate() {
            let at = format!("/generators/{i}");
            let w = terminal_vector(&tree, g, &at, 0.0)?;
            generators.push(TreeMeasure::new(w).map_err(|source| ModelError::Measure { pointer: at, source })?);
        }
        let set = UncertaintySet::new(generators)
            .map_err(|source| ModelError::Measure { pointer: "/generators".into(), source })?;
        let endowment = match &self.endowment {
            Some(b) => {
                let v = terminal_vector(&tree, b, "/endowment", f64::NAN)?;
                if let Some(k) = v.iter().position(|x| !x.is_finite()) {
                    return Err(ModelError::invalid(
                        "/endowment",
                        format!("missing or non-finite payoff at terminal {:?}", tree.label(tree.terminals()[k])),
                    ));
                }
                Some(v)
            }
            None => None,
        };
        if !self.x.is_finite() {
            return Err(ModelError::invalid("/x", "initial capital must be finite"));
        }
        let utility = self.utility.build()?;
        Ok(Model {
            name: self.name,
            market: Market::new(tree, prices),
            set,
            utility,
            utility_config: self.utility,
            x: self.x,
            endowment,
            config: self.solver,
            expected_failures: self.expected_failures,
        })
    }
}

impl Model {
    pub fn load(path: &Path) -> Result<Model, ModelError> {
        ModelFile::read(path)?.into_model()
    }

    pub fn from_json(text: &str) -> Result<Model, ModelError> {
        ModelFile::from_json(text)?.into_model()
    }

    /// Parses a `{terminal_id: payoff}` object; every terminal must be listed.
    pub fn parse_endowment(&self, text: &str) -> Result<Vec<f64>, ModelError> {
        let map: BTreeMap<String, f64> = {
            let de = &mut serde_json::Deserializer::from_str(text);
            serde_path_to_error::deserialize(de).map_err(|e| {
                let p = pointer(e.path());
                ModelError::Schema {
                    pointer: if p == "/" { "/endowment".into() } else { format!("/endowment{p}") },
                    message: e.inner().to_string(),
                }
            })?
        };
        let tree = &self.market.tree;
        let v = terminal_vector(tree, &map, "/endowment", f64::NAN)?;
        if let Some(k) = v.iter().position(|x| !x.is_finite()) {
            return Err(ModelError::invalid(
                "/endowment",
                format!("missing payoff at terminal {:?}", tree.label(tree.terminals()[k])),
            ));
        }
        Ok(v)
    }

    /// Terminal-index vector rendered as an ordered `{terminal_id: value}` map.
    pub fn terminal_map<T: Clone>(&self, v: &[T]) -> Labeled<T> {
        let tree = &self.market.tree;
        Labeled(tree.terminals().iter().map(|&t| tree.label(t).to_string()).zip(v.iter().cloned()).collect())
    }
}

/// `(label, value)` pairs serialized as a JSON object in the given order.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled<T>(pub Vec<(String, T)>);

impl<T: Serialize> Serialize for Labeled<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }
}

fn terminal_vector(
    tree: &EventTree,
    map: &BTreeMap<String, f64>,
    at: &str,
    missing: f64,
) -> Result<Vec<f64>, ModelError> {
    let mut w = vec![missing; tree.n_terminals()];
    for (id, &v) in map {
        let k = tree
            .find(id)
            .and_then(|n| tree.terminal_index(n))
            .ok_or_else(|| ModelError::invalid(format!("{at}/{}", escape(id)), "not a terminal node"))?;
        w[k] = v;
    }
    Ok(w)
}

fn escape(token: &str) -> String {
    token.replace('~', "~0").replace('/', "~1")
}

fn pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{}", escape(key))),
            Segment::Enum { variant } => out.push_str(&format!("/{}", escape(variant))),
            Segment::Unknown => out.push_str("/?"),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const BINOMIAL: &str = r#"{
        "schema": 1, "name": "binomial", "T": 1, "d": 1,
        "nodes": [{"id": "r", "parent": null, "time": 0},
                  {"id": "u", "parent": "r", "time": 1},
                  {"id": "d", "parent": "r", "time": 1}],
        "prices": {"r": [1.0], "u": [2.0], "d": [0.5]},
        "generators": [{"u": 0.5, "d": 0.5}],
        "utility": {"kind": "exponential", "alpha": 1.0}
    }"#;

    #[test]
    fn loads_binomial() {
        let m = Model::from_json(BINOMIAL).unwrap();
        assert_eq!(m.market.tree.n_terminals(), 2);
        assert_eq!(m.set.generators()[0].weights(), &[0.5, 0.5]);
        assert_eq!(m.config, SolverConfig::default());
        assert!(m.endowment.is_none());
    }

    #[test]
    fn unknown_field_has_pointer() {
        let text = BINOMIAL.replace(r#""alpha": 1.0"#, r#""alpha": 1.0, "beta": 2"#);
        match ModelFile::from_json(&text) {
            Err(ModelError::Schema { pointer, message }) => {
                assert_eq!(pointer, "/utility");
                assert!(message.contains("beta"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let text = BINOMIAL.replace(r#""time": 1}]"#, r#""time": "one"}]"#);
        match ModelFile::from_json(&text) {
            Err(ModelError::Schema { pointer, .. }) => assert_eq!(pointer, "/nodes/2/time"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_errors() {
        let text = BINOMIAL.replace(r#"{"u": 0.5, "d": 0.5}"#, r#"{"u": 0.5, "r": 0.5}"#);
        assert!(matches!(Model::from_json(&text), Err(ModelError::Invalid { pointer, .. }) if pointer == "/generators/0/r"));
        let text = BINOMIAL.replace(r#""schema": 1"#, r#""schema": 2"#);
        assert!(matches!(Model::from_json(&text), Err(ModelError::Version(2))));
        let text = BINOMIAL.replace(r#"{"u": 0.5, "d": 0.5}"#, r#"{"u": 0.7, "d": 0.5}"#);
        assert!(matches!(Model::from_json(&text), Err(ModelError::Measure { .. })));
    }

    #[test]
    fn endowment_parsing() {
        let m = Model::from_json(BINOMIAL).unwrap();
        assert_eq!(m.parse_endowment(r#"{"d": -1.0, "u": 2.0}"#).unwrap(), vec![2.0, -1.0]);
        assert!(m.parse_endowment(r#"{"u": 2.0}"#).is_err());
        let s = serde_json::to_string(&m.terminal_map(&[1.0, 2.0])).unwrap();
        assert_eq!(s, r#"{"u":1.0,"d":2.0}"#);
    }
}
