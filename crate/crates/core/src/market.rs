//! Finite event-tree markets.
//!
//! A market is a rooted tree whose levels are the trading dates `0..=T`,
//! together with a `d`-dimensional price vector at every node. Trees are
//! non-recombining: the filtration is the tree itself, so every node is an
//! atom of the sigma-field at its date. Nodes are indexed in breadth-first
//! order with children kept in input order, which makes the terminal
//! descendants of any node a contiguous range of terminal indices.

use std::collections::HashMap;
use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default cap on the number of enumerated stopping times.
pub const DEFAULT_STOPPING_TIME_CAP: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("tree has no nodes")]
    Empty,
    #[error("no root node (a node with no parent)")]
    NoRoot,
    #[error("more than one root: {0:?} and {1:?}")]
    MultipleRoots(String, String),
    #[error("root {id:?} must be at time 0, found {time}")]
    RootTime { id: String, time: usize },
    #[error("duplicate node id {0:?}")]
    DuplicateNode(String),
    #[error("orphan node {id:?}: parent {parent:?} does not exist")]
    OrphanNode { id: String, parent: String },
    #[error("time gap at node {id:?}: time {time} but parent is at time {parent_time}")]
    TimeGap { id: String, time: usize, parent_time: usize },
    #[error("terminal node {id:?} at time {time} before horizon {horizon}")]
    EarlyTerminal { id: String, time: usize, horizon: usize },
    #[error("node {id:?} at time {time} is beyond horizon {horizon}")]
    BeyondHorizon { id: String, time: usize, horizon: usize },
    #[error("node {0:?} is not connected to the root")]
    Disconnected(String),
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("number of stopping times exceeds cap {cap}")]
    TooManyStoppingTimes { cap: usize },
    #[error("invalid stopping time: {0}")]
    InvalidStoppingTime(String),
    #[error("price process: {0}")]
    Prices(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// One node of a model description before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawNode {
    pub id: String,
    pub parent: Option<String>,
    pub time: usize,
}

/// A validated finite event tree.
#[derive(Debug, Clone, PartialEq)]
pub struct EventTree {
    labels: Vec<String>,
    parent: Vec<Option<usize>>,
    time: Vec<usize>,
    children: Vec<Vec<usize>>,
    horizon: usize,
    terminals: Vec<usize>,
    terminal_index: Vec<Option<usize>>,
    leaf_range: Vec<Range<usize>>,
}

impl EventTree {
    /// Validates a raw node list against the horizon and indexes it.
    pub fn validate(raw: &[RawNode], horizon: usize) -> Result<EventTree, TreeError> {
        if raw.is_empty() {
            return Err(TreeError::Empty);
        }
        if horizon == 0 {
            return Err(TreeError::ZeroHorizon);
        }
        let mut by_id: HashMap<&str, usize> = HashMap::with_capacity(raw.len());
        for (i, n) in raw.iter().enumerate() {
            if by_id.insert(n.id.as_str(), i).is_some() {
                return Err(TreeError::DuplicateNode(n.id.clone()));
            }
        }
        let mut root = None;
        let mut kids: Vec<Vec<usize>> = vec![Vec::new(); raw.len()];
        for (i, n) in raw.iter().enumerate() {
            if n.time > horizon {
                return Err(TreeError::BeyondHorizon { id: n.id.clone(), time: n.time, horizon });
            }
            match &n.parent {
                None => {
                    if let Some(r) = root {
                        let r: &RawNode = &raw[r];
                        return Err(TreeError::MultipleRoots(r.id.clone(), n.id.clone()));
                    }
                    if n.time != 0 {
                        return Err(TreeError::RootTime { id: n.id.clone(), time: n.time });
                    }
                    root = Some(i);
                }
                Some(p) => {
                    let &pi = by_id.get(p.as_str()).ok_or_else(|| TreeError::OrphanNode {
                        id: n.id.clone(),
                        parent: p.clone(),
                    })?;
                    if n.time != raw[pi].time + 1 {
                        return Err(TreeError::TimeGap {
                            id: n.id.clone(),
                            time: n.time,
                            parent_time: raw[pi].time,
                        });
                    }
                    kids[pi].push(i);
                }
            }
        }
        let root = root.ok_or(TreeError::NoRoot)?;

        // Breadth-first relabelling; children keep file order.
        let mut order = Vec::with_capacity(raw.len());
        let mut new_index = vec![usize::MAX; raw.len()];
        order.push(root);
        new_index[root] = 0;
        let mut head = 0;
        while head < order.len() {
            let cur = order[head];
            head += 1;
            for &k in &kids[cur] {
                new_index[k] = order.len();
                order.push(k);
            }
        }
        if order.len() != raw.len() {
            let lost = (0..raw.len()).find(|&i| new_index[i] == usize::MAX).unwrap();
            return Err(TreeError::Disconnected(raw[lost].id.clone()));
        }

        let n = raw.len();
        let mut labels = Vec::with_capacity(n);
        let mut parent = Vec::with_capacity(n);
        let mut time = Vec::with_capacity(n);
        let mut children = Vec::with_capacity(n);
        for &old in &order {
            labels.push(raw[old].id.clone());
            parent.push(raw[old].parent.as_ref().map(|p| new_index[by_id[p.as_str()]]));
            time.push(raw[old].time);
            children.push(kids[old].iter().map(|&k| new_index[k]).collect::<Vec<_>>());
        }
        for i in 0..n {
            if children[i].is_empty() && time[i] != horizon {
                return Err(TreeError::EarlyTerminal { id: labels[i].clone(), time: time[i], horizon });
            }
        }
        Ok(EventTree::from_parts(labels, parent, time, children, horizon))
    }

    fn from_parts(
        labels: Vec<String>,
        parent: Vec<Option<usize>>,
        time: Vec<usize>,
        children: Vec<Vec<usize>>,
        horizon: usize,
    ) -> EventTree {
        let n = labels.len();
        let terminals: Vec<usize> = (0..n).filter(|&i| children[i].is_empty()).collect();
        let mut terminal_index = vec![None; n];
        for (k, &t) in terminals.iter().enumerate() {
            terminal_index[t] = Some(k);
        }
        // BFS order keeps terminals of each subtree contiguous.
        let mut leaf_range = vec![0..0; n];
        for i in (0..n).rev() {
            leaf_range[i] = match terminal_index[i] {
                Some(k) => k..k + 1,
                None => {
                    let first = leaf_range[children[i][0]].start;
                    let last = leaf_range[*children[i].last().unwrap()].end;
                    first..last
                }
            };
        }
        EventTree { labels, parent, time, children, horizon, terminals, terminal_index, leaf_range }
    }

    /// Full tree with `branching[t]` children at every node of date `t`.
    /// Labels are the root `"r"` and dot-separated child positions, e.g. `"r.0.2"`.
    pub fn uniform(branching: &[usize]) -> EventTree {
        assert!(!branching.is_empty() && branching.iter().all(|&b| b >= 1));
        let mut raw = vec![RawNode { id: "r".into(), parent: None, time: 0 }];
        let mut frontier = vec!["r".to_string()];
        for (t, &b) in branching.iter().enumerate() {
            let mut next = Vec::new();
            for p in &frontier {
                for c in 0..b {
                    let id = format!("{p}.{c}");
                    raw.push(RawNode { id: id.clone(), parent: Some(p.clone()), time: t + 1 });
                    next.push(id);
                }
            }
            frontier = next;
        }
        EventTree::validate(&raw, branching.len()).expect("uniform tree is valid")
    }

    /// Node list in index order, suitable for re-validation.
    pub fn to_raw(&self) -> Vec<RawNode> {
        (0..self.len())
            .map(|i| RawNode {
                id: self.labels[i].clone(),
                parent: self.parent[i].map(|p| self.labels[p].clone()),
                time: self.time[i],
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn label(&self, node: usize) -> &str {
        &self.labels[node]
    }

    pub fn find(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    pub fn time(&self, node: usize) -> usize {
        self.time[node]
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    pub fn is_terminal(&self, node: usize) -> bool {
        self.children[node].is_empty()
    }

    /// Terminal nodes in terminal-index order.
    pub fn terminals(&self) -> &[usize] {
        &self.terminals
    }

    pub fn n_terminals(&self) -> usize {
        self.terminals.len()
    }

    pub fn terminal_index(&self, node: usize) -> Option<usize> {
        self.terminal_index[node]
    }

    /// Terminal indices below (or equal to) `node`.
    pub fn leaf_range(&self, node: usize) -> Range<usize> {
        self.leaf_range[node].clone()
    }

    pub fn non_terminals(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| !self.is_terminal(i))
    }

    pub fn nodes_at(&self, t: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| self.time[i] == t)
    }

    /// Ancestor of `node` at date `t <= time(node)`.
    pub fn ancestor_at(&self, mut node: usize, t: usize) -> usize {
        debug_assert!(t <= self.time[node]);
        while self.time[node] > t {
            node = self.parent[node].unwrap();
        }
        node
    }

    /// Whether `a` is `b` or an ancestor of `b`.
    pub fn is_ancestor_or_self(&self, a: usize, b: usize) -> bool {
        self.time[a] <= self.time[b] && self.ancestor_at(b, self.time[a]) == a
    }
}

/// `d`-dimensional prices at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceProcess {
    dim: usize,
    values: Vec<f64>,
}

impl PriceProcess {
    pub fn new(tree: &EventTree, dim: usize, values: Vec<Vec<f64>>) -> Result<PriceProcess, TreeError> {
        if dim == 0 {
            return Err(TreeError::Prices("asset count must be at least 1".into()));
        }
        if values.len() != tree.len() {
            return Err(TreeError::Prices(format!(
                "expected prices at {} nodes, got {}",
                tree.len(),
                values.len()
            )));
        }
        let mut flat = Vec::with_capacity(dim * tree.len());
        for (i, v) in values.iter().enumerate() {
            if v.len() != dim {
                return Err(TreeError::Prices(format!(
                    "node {:?} has {} prices, expected {dim}",
                    tree.label(i),
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(TreeError::Prices(format!("node {:?} has a non-finite price", tree.label(i))));
            }
            flat.extend_from_slice(v);
        }
        Ok(PriceProcess { dim, values: flat })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn at(&self, node: usize) -> &[f64] {
        &self.values[node * self.dim..(node + 1) * self.dim]
    }

    /// Price increment from the parent of `child` to `child`.
    pub fn increment(&self, tree: &EventTree, child: usize) -> Vec<f64> {
        let p = tree.parent(child).expect("increment of the root");
        self.at(child).iter().zip(self.at(p)).map(|(a, b)| a - b).collect()
    }
}

/// Positions held over the step that starts at each non-terminal node.
/// Rows of terminal nodes exist but are ignored.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Strategy {
    dim: usize,
    values: Vec<f64>,
}

impl Strategy {
    pub fn zeros(tree: &EventTree, dim: usize) -> Strategy {
        Strategy { dim, values: vec![0.0; dim * tree.len()] }
    }

    /// Builds a strategy from the flat layout of [`Market::strategy_len`]:
    /// non-terminal nodes in index order, `dim` entries each.
    pub fn from_flat(tree: &EventTree, dim: usize, flat: &[f64]) -> Strategy {
        let mut s = Strategy::zeros(tree, dim);
        for (k, n) in tree.non_terminals().enumerate() {
            s.set(n, &flat[k * dim..(k + 1) * dim]);
        }
        s
    }

    pub fn to_flat(&self, tree: &EventTree) -> Vec<f64> {
        tree.non_terminals().flat_map(|n| self.at(n).to_vec()).collect()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn at(&self, node: usize) -> &[f64] {
        &self.values[node * self.dim..(node + 1) * self.dim]
    }

    pub fn set(&mut self, node: usize, theta: &[f64]) {
        assert_eq!(theta.len(), self.dim);
        self.values[node * self.dim..(node + 1) * self.dim].copy_from_slice(theta);
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// A real value at every node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptedProcess {
    pub values: Vec<f64>,
}

impl AdaptedProcess {
    pub fn at(&self, node: usize) -> f64 {
        self.values[node]
    }

    /// Values at terminal nodes in terminal-index order.
    pub fn terminal_values(&self, tree: &EventTree) -> Vec<f64> {
        tree.terminals().iter().map(|&t| self.values[t]).collect()
    }
}

/// Wealth `theta . S` with zero initial value.
pub fn stochastic_integral(
    tree: &EventTree,
    theta: &Strategy,
    prices: &PriceProcess,
) -> Result<AdaptedProcess, TreeError> {
    if theta.dim() != prices.dim() {
        return Err(TreeError::DimensionMismatch { expected: prices.dim(), got: theta.dim() });
    }
    let mut values = vec![0.0; tree.len()];
    // BFS indexing: parents precede children.
    for n in 1..tree.len() {
        let p = tree.parent(n).unwrap();
        let gain: f64 = theta
            .at(p)
            .iter()
            .zip(prices.at(n).iter().zip(prices.at(p)))
            .map(|(th, (s1, s0))| th * (s1 - s0))
            .sum();
        values[n] = values[p] + gain;
    }
    Ok(AdaptedProcess { values })
}

/// A stopping time in tree form: an antichain of nodes meeting every
/// root-to-terminal path exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StoppingTime {
    nodes: Vec<usize>,
    #[serde(skip)]
    stop_of_terminal: Vec<usize>,
}

impl StoppingTime {
    /// Checks the antichain and covering conditions.
    pub fn new(tree: &EventTree, mut nodes: Vec<usize>) -> Result<StoppingTime, TreeError> {
        nodes.sort_unstable();
        nodes.dedup();
        let mut stop_of_terminal = vec![usize::MAX; tree.n_terminals()];
        for &a in &nodes {
            for k in tree.leaf_range(a) {
                if stop_of_terminal[k] != usize::MAX {
                    return Err(TreeError::InvalidStoppingTime(format!(
                        "nodes {:?} and {:?} lie on one path",
                        tree.label(stop_of_terminal[k]),
                        tree.label(a)
                    )));
                }
                stop_of_terminal[k] = a;
            }
        }
        if let Some(k) = stop_of_terminal.iter().position(|&a| a == usize::MAX) {
            return Err(TreeError::InvalidStoppingTime(format!(
                "misses the path to {:?}",
                tree.label(tree.terminals()[k])
            )));
        }
        Ok(StoppingTime { nodes, stop_of_terminal })
    }

    /// The deterministic time `t`.
    pub fn at_time(tree: &EventTree, t: usize) -> StoppingTime {
        let nodes: Vec<usize> = tree.nodes_at(t.min(tree.horizon())).collect();
        StoppingTime::new(tree, nodes).expect("a full level is a stopping time")
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    /// The antichain node on the path to terminal index `k`.
    pub fn node_for_terminal(&self, k: usize) -> usize {
        self.stop_of_terminal[k]
    }

    pub fn labels<'a>(&self, tree: &'a EventTree) -> Vec<&'a str> {
        self.nodes.iter().map(|&n| tree.label(n)).collect()
    }
}

/// Number of stopping times of the subtree at every node, saturating.
fn stopping_time_counts(tree: &EventTree) -> Vec<usize> {
    let mut count = vec![1usize; tree.len()];
    for n in (0..tree.len()).rev() {
        if !tree.is_terminal(n) {
            let prod = tree
                .children(n)
                .iter()
                .fold(1usize, |acc, &c| acc.saturating_mul(count[c]));
            count[n] = prod.saturating_add(1);
        }
    }
    count
}

/// All stopping times, i.e. all maximal antichains, in a deterministic order:
/// `{node}` first, then the product of the children's lists.
pub fn enumerate_stopping_times(tree: &EventTree, cap: usize) -> Result<Vec<StoppingTime>, TreeError> {
    let counts = stopping_time_counts(tree);
    if counts[tree.root()] > cap {
        return Err(TreeError::TooManyStoppingTimes { cap });
    }
    fn cuts(tree: &EventTree, n: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![n]];
        if tree.is_terminal(n) {
            return out;
        }
        let mut acc: Vec<Vec<usize>> = vec![Vec::new()];
        for &c in tree.children(n) {
            let sub = cuts(tree, c);
            let mut next = Vec::with_capacity(acc.len() * sub.len());
            for a in &acc {
                for s in &sub {
                    let mut v = a.clone();
                    v.extend_from_slice(s);
                    next.push(v);
                }
            }
            acc = next;
        }
        out.extend(acc);
        out
    }
    cuts(tree, tree.root())
        .into_iter()
        .map(|nodes| StoppingTime::new(tree, nodes))
        .collect()
}

/// A validated tree together with its price process.
#[derive(Debug, Clone, PartialEq)]
pub struct Market {
    pub tree: EventTree,
    pub prices: PriceProcess,
}

impl Market {
    pub fn new(tree: EventTree, prices: PriceProcess) -> Market {
        Market { tree, prices }
    }

    pub fn dim(&self) -> usize {
        self.prices.dim()
    }

    /// Length of the flat strategy vector (`d` per non-terminal node).
    pub fn strategy_len(&self) -> usize {
        self.dim() * self.tree.non_terminals().count()
    }

    /// Matrix mapping a flat strategy to terminal gains `theta . S_T`,
    /// one row per terminal.
    pub fn gains_matrix(&self) -> DMatrix<f64> {
        let tree = &self.tree;
        let d = self.dim();
        let mut col_of = vec![usize::MAX; tree.len()];
        for (k, n) in tree.non_terminals().enumerate() {
            col_of[n] = k * d;
        }
        let mut m = DMatrix::zeros(tree.n_terminals(), self.strategy_len());
        for (row, &leaf) in tree.terminals().iter().enumerate() {
            let mut child = leaf;
            while let Some(p) = tree.parent(child) {
                let inc = self.prices.increment(tree, child);
                for (j, v) in inc.into_iter().enumerate() {
                    m[(row, col_of[p] + j)] += v;
                }
                child = p;
            }
        }
        m
    }

    /// Terminal gains of a strategy.
    pub fn terminal_gains(&self, theta: &Strategy) -> Result<Vec<f64>, TreeError> {
        Ok(stochastic_integral(&self.tree, theta, &self.prices)?.terminal_values(&self.tree))
    }

    /// Terminal values of asset `j`.
    pub fn terminal_price(&self, j: usize) -> Vec<f64> {
        self.tree.terminals().iter().map(|&t| self.prices.at(t)[j]).collect()
    }

    /// One-period binomial `s0 -> {up, down}` with a single asset.
    pub fn binomial(s0: f64, up: f64, down: f64) -> Market {
        Market::multinomial(s0, &[vec![up - s0, down - s0]])
    }

    /// Single-asset market on a uniform tree where the children of every node
    /// at date `t` move the price by `increments[t][..]`.
    pub fn multinomial(s0: f64, increments: &[Vec<f64>]) -> Market {
        let branching: Vec<usize> = increments.iter().map(Vec::len).collect();
        let tree = EventTree::uniform(&branching);
        let mut values = vec![vec![s0]; tree.len()];
        for n in 1..tree.len() {
            let p = tree.parent(n).unwrap();
            let pos = tree.children(p).iter().position(|&c| c == n).unwrap();
            values[n] = vec![values[p][0] + increments[tree.time(p)][pos]];
        }
        let prices = PriceProcess::new(&tree, 1, values).unwrap();
        Market { tree, prices }
    }
}
