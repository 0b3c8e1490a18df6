//! Graph data model, node permutations, padding and batching.

mod batch;
mod io;
mod split;
pub mod synthetic;

pub use batch::{pad_to_matrix, GraphBatch, PaddedBatch};
pub use io::{read_graphs, read_meta, write_graphs, write_meta};
pub use split::{split_dataset, SplitSpec, DEFAULT_FRACTIONS};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An undirected graph with dense node features and task targets.
///
/// Edges are stored once per unordered pair as `(u, v)` with `u < v`, sorted.
/// Self-loops are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    id: String,
    num_nodes: usize,
    feature_dim: usize,
    features: Vec<f64>,
    edges: Vec<(usize, usize)>,
    targets: Vec<f64>,
}

impl Graph {
    pub fn new(
        id: impl Into<String>,
        node_features: Vec<Vec<f64>>,
        edges: Vec<(usize, usize)>,
        targets: Vec<f64>,
    ) -> Result<Self> {
        let n = node_features.len();
        if n == 0 {
            return Err(Error::Graph("a graph needs at least one node".into()));
        }
        let d = node_features[0].len();
        if d == 0 || node_features.iter().any(|r| r.len() != d) {
            return Err(Error::Graph(
                "node feature rows must share a positive width".into(),
            ));
        }
        Self::from_parts(id.into(), n, d, node_features.concat(), edges, targets)
    }

    fn from_parts(
        id: String,
        num_nodes: usize,
        feature_dim: usize,
        features: Vec<f64>,
        edges: Vec<(usize, usize)>,
        targets: Vec<f64>,
    ) -> Result<Self> {
        let mut canon = Vec::with_capacity(edges.len());
        for (u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::Graph(format!(
                    "edge ({u}, {v}) has an endpoint outside 0..{num_nodes}"
                )));
            }
            if u == v {
                return Err(Error::Graph(format!("self-loop on node {u}")));
            }
            canon.push((u.min(v), u.max(v)));
        }
        canon.sort_unstable();
        if let Some(w) = canon.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Graph(format!(
                "edge ({}, {}) listed more than once; list each undirected pair once",
                w[0].0, w[0].1
            )));
        }
        if features.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(Error::Graph("non-finite feature or target".into()));
        }
        Ok(Graph {
            id,
            num_nodes,
            feature_dim,
            features,
            edges: canon,
            targets,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn node_feature(&self, v: usize) -> &[f64] {
        &self.features[v * self.feature_dim..(v + 1) * self.feature_dim]
    }

    pub fn node_features(&self) -> Vec<Vec<f64>> {
        (0..self.num_nodes)
            .map(|v| self.node_feature(v).to_vec())
            .collect()
    }

    /// The `n x d` feature matrix.
    pub fn feature_matrix(&self) -> Tensor {
        Tensor::matrix(self.num_nodes, self.feature_dim, self.features.clone())
            .expect("graph invariants guarantee a valid matrix")
    }

    pub fn with_targets(mut self, targets: Vec<f64>) -> Self {
        self.targets = targets;
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    /// Symmetric 0/1 adjacency without self-loops.
    pub fn adjacency(&self) -> Vec<Vec<u8>> {
        let mut a = vec![vec![0u8; self.num_nodes]; self.num_nodes];
        for &(u, v) in &self.edges {
            a[u][v] = 1;
            a[v][u] = 1;
        }
        a
    }

    pub fn apply_permutation(&self, p: &Permutation) -> Result<Graph> {
        p.apply(self)
    }
}

/// A bijection on `0..n`; node `i` moves to position `mapping[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || std::mem::replace(&mut seen[m], true) {
                return Err(Error::InvalidArgument(format!(
                    "{mapping:?} is not a permutation"
                )));
            }
        }
        Ok(Permutation { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Permutation {
            mapping: (0..n).collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut mapping: Vec<usize> = (0..n).collect();
        mapping.shuffle(rng);
        Permutation { mapping }
    }

    /// A composition of at most `max_swaps` random transpositions.
    pub fn random_transpositions<R: Rng + ?Sized>(n: usize, max_swaps: usize, rng: &mut R) -> Self {
        let mut mapping: Vec<usize> = (0..n).collect();
        if n >= 2 {
            let swaps = rng.random_range(1..=max_swaps.max(1));
            for _ in 0..swaps {
                let a = rng.random_range(0..n);
                let b = rng.random_range(0..n);
                mapping.swap(a, b);
            }
        }
        Permutation { mapping }
    }

    /// Every permutation of `0..n` in lexicographic order.
    pub fn all(n: usize) -> Vec<Permutation> {
        let mut out = Vec::new();
        let mut cur: Vec<usize> = (0..n).collect();
        loop {
            out.push(Permutation {
                mapping: cur.clone(),
            });
            // next lexicographic permutation
            let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
                break;
            };
            let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).unwrap();
            cur.swap(i - 1, j);
            cur[i..].reverse();
        }
        out
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn map(&self, i: usize) -> usize {
        self.mapping[i]
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Permutation { mapping: inv }
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &Permutation) -> Permutation {
        Permutation {
            mapping: first.mapping.iter().map(|&i| self.mapping[i]).collect(),
        }
    }

    /// Explicit permutation matrix with `P[p(i)][i] = 1`.
    pub fn matrix(&self) -> Tensor {
        let n = self.mapping.len();
        let mut t = Tensor::zeros(&[n, n]);
        for (i, &m) in self.mapping.iter().enumerate() {
            t.data_mut()[m * n + i] = 1.0;
        }
        t
    }

    /// Moves row `i` of `t` to row `p(i)`.
    pub fn permute_rows(&self, t: &Tensor) -> Result<Tensor> {
        if t.rows() != self.len() {
            return Err(Error::shape("permute_rows", t.shape(), &[self.len()]));
        }
        let c = t.cols();
        let mut out = vec![0.0; t.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            out[m * c..(m + 1) * c].copy_from_slice(t.row_slice(i));
        }
        Tensor::new(t.shape().to_vec(), out)
    }

    pub fn apply(&self, g: &Graph) -> Result<Graph> {
        if self.len() != g.num_nodes {
            return Err(Error::InvalidArgument(format!(
                "permutation of size {} applied to a graph with {} nodes",
                self.len(),
                g.num_nodes
            )));
        }
        let d = g.feature_dim;
        let mut features = vec![0.0; g.features.len()];
        for v in 0..g.num_nodes {
            let m = self.mapping[v];
            features[m * d..(m + 1) * d].copy_from_slice(g.node_feature(v));
        }
        let edges = g
            .edges
            .iter()
            .map(|&(u, v)| (self.mapping[u], self.mapping[v]))
            .collect();
        Graph::from_parts(
            g.id.clone(),
            g.num_nodes,
            d,
            features,
            edges,
            g.targets.clone(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Classification,
}

/// Dataset-level metadata, stored in a JSON sidecar next to the graphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub max_nodes: usize,
    pub feature_dim: usize,
    pub task: TaskKind,
    pub num_tasks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

impl DatasetMeta {
    /// Number of model outputs per graph.
    pub fn output_dim(&self) -> usize {
        match (self.task, self.num_classes) {
            (TaskKind::Classification, Some(c)) if c > 2 => c,
            _ => self.num_tasks,
        }
    }

    pub fn is_multiclass(&self) -> bool {
        self.task == TaskKind::Classification && self.num_classes.is_some_and(|c| c > 2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graphs: Vec<Graph>,
    pub meta: DatasetMeta,
}

impl Dataset {
    /// Builds a dataset, computing `max_nodes` and checking consistency.
    pub fn new(graphs: Vec<Graph>, task: TaskKind, num_classes: Option<usize>) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?;
        let meta = DatasetMeta {
            max_nodes: graphs.iter().map(Graph::num_nodes).max().unwrap_or(0),
            feature_dim: first.feature_dim(),
            task,
            num_tasks: first.targets().len(),
            num_classes,
        };
        let ds = Dataset { graphs, meta };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for g in &self.graphs {
            if g.feature_dim() != self.meta.feature_dim {
                return Err(Error::Graph(format!(
                    "graph {} has feature width {}, dataset expects {}",
                    g.id(),
                    g.feature_dim(),
                    self.meta.feature_dim
                )));
            }
            if g.targets().len() != self.meta.num_tasks {
                return Err(Error::Graph(format!(
                    "graph {} has {} targets, dataset expects {}",
                    g.id(),
                    g.targets().len(),
                    self.meta.num_tasks
                )));
            }
            if g.num_nodes() > self.meta.max_nodes {
                return Err(Error::TooManyNodes {
                    nodes: g.num_nodes(),
                    max_nodes: self.meta.max_nodes,
                });
            }
            if let (TaskKind::Classification, Some(c)) = (self.meta.task, self.meta.num_classes) {
                let bad = g
                    .targets()
                    .iter()
                    .any(|&t| t < 0.0 || t.fract() != 0.0 || t as usize >= c.max(2));
                if bad {
                    return Err(Error::Graph(format!(
                        "graph {} has an invalid class label",
                        g.id()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn meta_path(path: &Path) -> PathBuf {
        path.with_extension("meta.json")
    }

    /// Loads graphs and their metadata sidecar. Without a sidecar the
    /// dataset is treated as regression.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let graphs = read_graphs(path)?;
        let meta_path = Self::meta_path(path);
        let meta = if meta_path.exists() {
            read_meta(&meta_path)?
        } else {
            let first = graphs
                .first()
                .ok_or_else(|| Error::Missing(format!("{} holds no graphs", path.display())))?;
            DatasetMeta {
                max_nodes: graphs.iter().map(Graph::num_nodes).max().unwrap_or(0),
                feature_dim: first.feature_dim(),
                task: TaskKind::Regression,
                num_tasks: first.targets().len(),
                num_classes: None,
            }
        };
        let ds = Dataset { graphs, meta };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_graphs(path, &self.graphs)?;
        write_meta(Self::meta_path(path), &self.meta)
    }

    pub fn find(&self, id: &str) -> Option<&Graph> {
        self.graphs.iter().find(|g| g.id() == id)
    }
}
