//! Synthetic graph regression tasks.
//!
//! * the localized task hides the signal in a single flagged node among
//!   noisy neighbours;
//! * the additive task sums a fixed per-node function over all nodes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Graph, TaskKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub count: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub feature_dim: usize,
    pub seed: u64,
    /// Erdős–Rényi edge probability is `edge_factor / n`.
    #[serde(default = "default_edge_factor")]
    pub edge_factor: f64,
    /// Std of the features of non-motif nodes in the localized task.
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
}

fn default_edge_factor() -> f64 {
    2.0
}

fn default_noise_scale() -> f64 {
    0.3
}

impl SyntheticConfig {
    pub fn new(
        count: usize,
        min_nodes: usize,
        max_nodes: usize,
        feature_dim: usize,
        seed: u64,
    ) -> Self {
        SyntheticConfig {
            count,
            min_nodes,
            max_nodes,
            feature_dim,
            seed,
            edge_factor: default_edge_factor(),
            noise_scale: default_noise_scale(),
        }
    }

    fn validate(&self, min_dim: usize) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("count must be at least 1".into()));
        }
        if self.min_nodes == 0 || self.min_nodes > self.max_nodes {
            return Err(Error::InvalidArgument(format!(
                "bad node range {}..={}",
                self.min_nodes, self.max_nodes
            )));
        }
        if self.feature_dim < min_dim {
            return Err(Error::InvalidArgument(format!(
                "feature_dim must be at least {min_dim}"
            )));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bad noise_scale {}",
                self.noise_scale
            )));
        }
        Ok(())
    }
}

/// Undirected G(n, p) edges.
pub fn erdos_renyi<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    edges
}

/// Index of the feature that marks the motif node.
pub const MOTIF_FLAG: usize = 0;

/// Target of the localized task as a function of the motif node's features.
pub fn localized_target(motif: &[f64]) -> f64 {
    let (a, b, c) = (motif[1], motif[2], motif[3]);
    a * b + (2.0 * c).sin()
}

/// Finds the flagged node of a localized-task graph.
pub fn motif_node(g: &Graph) -> Option<usize> {
    (0..g.num_nodes()).find(|&v| g.node_feature(v)[MOTIF_FLAG] == 1.0)
}

/// Graphs with a single flagged "motif" node; the target depends only on
/// that node's features, every other node carries Gaussian noise with std
/// `noise_scale`.
pub fn generate_localized_task(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate(4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut graphs = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let n = rng.random_range(cfg.min_nodes..=cfg.max_nodes);
        let motif = rng.random_range(0..n);
        let feats: Vec<Vec<f64>> = (0..n)
            .map(|v| {
                let scale = if v == motif { 1.0 } else { cfg.noise_scale };
                let mut row: Vec<f64> = (0..cfg.feature_dim)
                    .map(|_| {
                        let x: f64 = StandardNormal.sample(&mut rng);
                        scale * x
                    })
                    .collect();
                row[MOTIF_FLAG] = if v == motif { 1.0 } else { 0.0 };
                row
            })
            .collect();
        let y = localized_target(&feats[motif]);
        let edges = erdos_renyi(n, (cfg.edge_factor / n as f64).min(1.0), &mut rng);
        graphs.push(Graph::new(format!("loc-{i}"), feats, edges, vec![y])?);
    }
    Dataset::new(graphs, TaskKind::Regression, None)
}

/// Turns a single-task regression dataset into binary classification by
/// thresholding at the median target.
pub fn binarize_at_median(ds: Dataset) -> Result<Dataset> {
    let mut ys: Vec<f64> = ds.graphs.iter().map(|g| g.targets()[0]).collect();
    ys.sort_by(f64::total_cmp);
    let median = ys[ys.len() / 2];
    let graphs = ds
        .graphs
        .into_iter()
        .map(|g| {
            let label = if g.targets()[0] >= median { 1.0 } else { 0.0 };
            g.with_targets(vec![label])
        })
        .collect();
    Dataset::new(graphs, TaskKind::Classification, Some(2))
}

/// Per-node contribution of the additive task.
pub fn additive_node_value(x: &[f64]) -> f64 {
    x.iter().enumerate().map(|(j, v)| v / (j + 1) as f64).sum()
}

/// Graphs whose target is the sum of [`additive_node_value`] over nodes.
/// Features are uniform on `[0, 1)`.
pub fn generate_additive_task(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate(1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut graphs = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let n = rng.random_range(cfg.min_nodes..=cfg.max_nodes);
        let feats: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..cfg.feature_dim).map(|_| rng.random::<f64>()).collect())
            .collect();
        let y = feats.iter().map(|x| additive_node_value(x)).sum();
        let edges = erdos_renyi(n, (cfg.edge_factor / n as f64).min(1.0), &mut rng);
        graphs.push(Graph::new(format!("add-{i}"), feats, edges, vec![y])?);
    }
    Dataset::new(graphs, TaskKind::Regression, None)
}
