//! Neighbourhood aggregation layers.
//!
//! * GCN: `h_v' = σ( mean_{u ∈ N(v) ∪ {v}} W h_u + b )`
//! * GIN: `h_v' = MLP((1 + ε) h_v + Σ_{u ∈ N(v)} h_u)` with a learnable ε

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBatch};
use crate::nn::{init_bound, Activation, Ctx, Dense, Mode, ParamId, Params};
use crate::tensor::{Csr, Precision, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    Gcn,
    Gin,
}

impl std::fmt::Display for ConvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConvKind::Gcn => "gcn",
            ConvKind::Gin => "gin",
        })
    }
}

impl std::str::FromStr for ConvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(ConvKind::Gcn),
            "gin" => Ok(ConvKind::Gin),
            other => Err(Error::InvalidArgument(format!(
                "unknown convolution {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl GcnLayer {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        activation: Activation,
    ) -> Self {
        let bound = init_bound(in_dim);
        GcnLayer {
            weight: params.uniform(format!("{name}.weight"), &[in_dim, out_dim], bound, rng),
            bias: bias.then(|| params.uniform(format!("{name}.bias"), &[1, out_dim], bound, rng)),
            activation,
            in_dim,
            out_dim,
        }
    }

    /// `mean_adj` must be the row-normalised `A + I` of the node rows in `x`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, mean_adj: &Arc<Csr>) -> Result<Var> {
        check_width(ctx, x, self.in_dim)?;
        let w = ctx.param(self.weight);
        let xw = ctx.tape.matmul(x, w)?;
        let mut h = ctx.tape.spmm(Arc::clone(mean_adj), xw)?;
        if let Some(b) = self.bias {
            let b = ctx.param(b);
            h = ctx.tape.add_row(h, b)?;
        }
        self.activation.apply(&mut ctx.tape, h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GinLayer {
    pub eps: ParamId,
    pub mlp_hidden: Dense,
    pub mlp_out: Dense,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl GinLayer {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Self {
        GinLayer {
            eps: params.add(format!("{name}.eps"), Tensor::scalar(0.0), true),
            mlp_hidden: Dense::new(params, rng, &format!("{name}.mlp0"), in_dim, out_dim, true),
            mlp_out: Dense::new(params, rng, &format!("{name}.mlp1"), out_dim, out_dim, true),
            activation,
            in_dim,
            out_dim,
        }
    }

    /// `sum_adj` is the plain adjacency (no self-loops) of the rows in `x`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, sum_adj: &Arc<Csr>) -> Result<Var> {
        check_width(ctx, x, self.in_dim)?;
        let neigh = ctx.tape.spmm(Arc::clone(sum_adj), x)?;
        let eps = ctx.param(self.eps);
        let one_plus = ctx.tape.affine(eps, 1.0, 1.0)?;
        let own = ctx.tape.scale_by(x, one_plus)?;
        let h = ctx.tape.add(own, neigh)?;
        let h = self.mlp_hidden.forward(ctx, h)?;
        let h = ctx.tape.relu(h)?;
        let h = self.mlp_out.forward(ctx, h)?;
        self.activation.apply(&mut ctx.tape, h)
    }
}

fn check_width(ctx: &Ctx, x: Var, expected: usize) -> Result<()> {
    let shape = ctx.tape.shape(x);
    if shape.len() != 2 || shape[1] != expected {
        return Err(Error::shape(
            "message passing",
            shape,
            &[shape[0], expected],
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ConvLayer {
    Gcn(GcnLayer),
    Gin(GinLayer),
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        kind: ConvKind,
        params: &mut Params,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        activation: Activation,
    ) -> Self {
        match kind {
            ConvKind::Gcn => ConvLayer::Gcn(GcnLayer::new(
                params, rng, name, in_dim, out_dim, bias, activation,
            )),
            ConvKind::Gin => ConvLayer::Gin(GinLayer::new(
                params, rng, name, in_dim, out_dim, activation,
            )),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, batch: &GraphBatch) -> Result<Var> {
        match self {
            ConvLayer::Gcn(l) => l.forward(ctx, x, &batch.mean_adj),
            ConvLayer::Gin(l) => l.forward(ctx, x, &batch.sum_adj),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            ConvLayer::Gcn(l) => l.out_dim,
            ConvLayer::Gin(l) => l.out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            ConvLayer::Gcn(l) => l.in_dim,
            ConvLayer::Gin(l) => l.in_dim,
        }
    }
}

/// An ordered chain of message-passing layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnStack {
    pub layers: Vec<ConvLayer>,
}

/// Node output width used throughout the experiments.
pub const NODE_DIM: usize = 50;

impl GnnStack {
    /// `dims` lists the output width of each layer.
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        rng: &mut R,
        kind: ConvKind,
        in_dim: usize,
        dims: &[usize],
        bias: bool,
        activation: Activation,
    ) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidArgument(
                "a GNN stack needs at least one layer".into(),
            ));
        }
        let mut layers = Vec::with_capacity(dims.len());
        let mut width = in_dim;
        for (i, &d) in dims.iter().enumerate() {
            layers.push(ConvLayer::new(
                kind,
                params,
                rng,
                &format!("conv{i}"),
                width,
                d,
                bias,
                activation,
            ));
            width = d;
        }
        Ok(GnnStack { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, ConvLayer::out_dim)
    }

    pub fn forward(&self, ctx: &mut Ctx, batch: &GraphBatch) -> Result<Var> {
        let mut h = ctx.constant(batch.features.clone());
        for layer in &self.layers {
            h = layer.forward(ctx, h, batch)?;
        }
        Ok(h)
    }
}

/// Node representations of a single graph after the full stack (eval mode).
pub fn stack_forward(stack: &GnnStack, params: &Params, g: &Graph) -> Result<Tensor> {
    let batch = GraphBatch::new(&[g], g.num_nodes())?;
    let mut ctx = Ctx::new(params, Mode::Eval, 0, Precision::F64);
    let h = stack.forward(&mut ctx, &batch)?;
    Ok(ctx.tape.value(h).clone())
}
