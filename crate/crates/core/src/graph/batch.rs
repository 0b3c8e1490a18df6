use std::sync::Arc;

use super::Graph;
use crate::error::{Error, Result};
use crate::tensor::{Csr, Tensor};

/// Zero-pads an `n x width` node matrix to `max_nodes` rows.
pub fn pad_to_matrix(rows: &Tensor, max_nodes: usize, width: usize) -> Result<Tensor> {
    if rows.rank() != 2 || rows.cols() != width {
        return Err(Error::shape(
            "pad_to_matrix",
            rows.shape(),
            &[max_nodes, width],
        ));
    }
    if rows.rows() > max_nodes {
        return Err(Error::TooManyNodes {
            nodes: rows.rows(),
            max_nodes,
        });
    }
    let mut data = rows.data().to_vec();
    data.resize(max_nodes * width, 0.0);
    Tensor::matrix(max_nodes, width, data)
}

/// Node matrices of a batch, each padded with zero rows to `max_nodes`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    /// `b x M x D`
    pub h: Tensor,
    pub node_counts: Vec<usize>,
    pub max_nodes: usize,
    pub targets: Tensor,
}

impl PaddedBatch {
    pub fn graph(&self, i: usize) -> Tensor {
        let (m, d) = (self.h.shape()[1], self.h.shape()[2]);
        let block = self.h.data()[i * m * d..(i + 1) * m * d].to_vec();
        Tensor::matrix(m, d, block).expect("block of a valid stack")
    }
}

/// A mini-batch of graphs merged into one disjoint graph.
///
/// Node rows of graph `i` occupy `offsets[i]..offsets[i + 1]` of the stacked
/// feature matrix.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub features: Tensor,
    /// Row-normalised `A + I`, the neighbourhood mean over `N(v) ∪ {v}`.
    pub mean_adj: Arc<Csr>,
    /// Plain adjacency without self-loops.
    pub sum_adj: Arc<Csr>,
    pub offsets: Arc<Vec<usize>>,
    pub max_nodes: usize,
    pub targets: Tensor,
    pub local_edges: Vec<Vec<(usize, usize)>>,
}

impl GraphBatch {
    pub fn new(graphs: &[&Graph], max_nodes: usize) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let d = first.feature_dim();
        let t = first.targets().len();
        let mut offsets = vec![0];
        let mut features = Vec::new();
        let mut targets = Vec::with_capacity(graphs.len() * t);
        let mut mean_rows = Vec::new();
        let mut sum_rows = Vec::new();
        let mut local_edges = Vec::with_capacity(graphs.len());
        for g in graphs {
            if g.num_nodes() > max_nodes {
                return Err(Error::TooManyNodes {
                    nodes: g.num_nodes(),
                    max_nodes,
                });
            }
            if g.feature_dim() != d || g.targets().len() != t {
                return Err(Error::Graph(format!(
                    "graph {} does not match the batch layout",
                    g.id()
                )));
            }
            let base = *offsets.last().unwrap();
            for (v, nbrs) in g.neighbors().into_iter().enumerate() {
                let w = 1.0 / (nbrs.len() + 1) as f64;
                let mut mean_row: Vec<(usize, f64)> = Vec::with_capacity(nbrs.len() + 1);
                mean_row.push((base + v, w));
                mean_row.extend(nbrs.iter().map(|&u| (base + u, w)));
                mean_rows.push(mean_row);
                sum_rows.push(nbrs.iter().map(|&u| (base + u, 1.0)).collect());
            }
            features.extend_from_slice(g.feature_matrix().data());
            targets.extend_from_slice(g.targets());
            local_edges.push(g.edges().to_vec());
            offsets.push(base + g.num_nodes());
        }
        let n = *offsets.last().unwrap();
        let targets = if t == 0 {
            Tensor::zeros(&[graphs.len(), 1])
        } else {
            Tensor::matrix(graphs.len(), t, targets)?
        };
        Ok(GraphBatch {
            features: Tensor::matrix(n, d, features)?,
            mean_adj: Arc::new(Csr::from_rows(n, mean_rows)),
            sum_adj: Arc::new(Csr::from_rows(n, sum_rows)),
            offsets: Arc::new(offsets),
            max_nodes,
            targets,
            local_edges,
        })
    }

    pub fn num_graphs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_nodes(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn node_count(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn node_counts(&self) -> Vec<usize> {
        (0..self.num_graphs()).map(|i| self.node_count(i)).collect()
    }

    /// Source row for position `t` of graph `i`, following `order` when given.
    fn source_row(&self, i: usize, t: usize, order: Option<&[Vec<usize>]>) -> Option<usize> {
        (t < self.node_count(i)).then(|| self.offsets[i] + order.map_or(t, |o| o[i][t]))
    }

    /// Row index list that lays the batch out as `b` blocks of `max_nodes`
    /// rows, zero rows (`None`) last in each block.
    pub fn padded_index(&self, order: Option<&[Vec<usize>]>) -> Vec<Option<usize>> {
        let mut idx = Vec::with_capacity(self.num_graphs() * self.max_nodes);
        for i in 0..self.num_graphs() {
            for t in 0..self.max_nodes {
                idx.push(self.source_row(i, t, order));
            }
        }
        idx
    }

    /// Row index list selecting position `t` of every graph.
    pub fn step_index(&self, t: usize, order: Option<&[Vec<usize>]>) -> Vec<Option<usize>> {
        (0..self.num_graphs())
            .map(|i| self.source_row(i, t, order))
            .collect()
    }

    /// Stacks node rows (`num_nodes x D`) into a zero-padded `b x M x D` tensor.
    pub fn pad(&self, rows: &Tensor) -> Result<PaddedBatch> {
        if rows.rows() != self.num_nodes() {
            return Err(Error::shape("pad", rows.shape(), &[self.num_nodes()]));
        }
        let d = rows.cols();
        let mut data = Vec::with_capacity(self.num_graphs() * self.max_nodes * d);
        for src in self.padded_index(None) {
            match src {
                Some(r) => data.extend_from_slice(rows.row_slice(r)),
                None => data.extend(std::iter::repeat_n(0.0, d)),
            }
        }
        Ok(PaddedBatch {
            h: Tensor::new(vec![self.num_graphs(), self.max_nodes, d], data)?,
            node_counts: self.node_counts(),
            max_nodes: self.max_nodes,
            targets: self.targets.clone(),
        })
    }
}
