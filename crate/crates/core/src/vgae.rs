//! Variational latent layer for a guided graph autoencoder.
//!
//! Two extra message-passing layers map the trunk output to `μ` and
//! `log σ²`. Node latents are `z = μ + exp(½ log σ²) ⊙ ε` in train mode and
//! `z = μ` in eval mode. The auxiliary loss adds an inner-product adjacency
//! reconstruction term and the KL divergence to a unit Gaussian.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::GraphBatch;
use crate::message_passing::{ConvKind, ConvLayer};
use crate::nn::{Activation, Ctx, Params};
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VgaeConfig {
    pub recon_weight: f64,
    pub kl_weight: f64,
}

impl Default for VgaeConfig {
    fn default() -> Self {
        VgaeConfig {
            recon_weight: 1.0,
            kl_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalLayer {
    pub mu: ConvLayer,
    pub logvar: ConvLayer,
    pub config: VgaeConfig,
}

/// Output of [`VariationalLayer::forward`].
#[derive(Debug, Clone, Copy)]
pub struct Latents {
    pub z: Var,
    pub mu: Var,
    pub logvar: Var,
}

impl VariationalLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        rng: &mut R,
        kind: ConvKind,
        in_dim: usize,
        latent_dim: usize,
        bias: bool,
        config: VgaeConfig,
    ) -> Self {
        VariationalLayer {
            mu: ConvLayer::new(
                kind,
                params,
                rng,
                "vgae.mu",
                in_dim,
                latent_dim,
                bias,
                Activation::Identity,
            ),
            logvar: ConvLayer::new(
                kind,
                params,
                rng,
                "vgae.logvar",
                in_dim,
                latent_dim,
                bias,
                Activation::Identity,
            ),
            config,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, h: Var, batch: &GraphBatch) -> Result<Latents> {
        let mu = self.mu.forward(ctx, h, batch)?;
        let logvar = self.logvar.forward(ctx, h, batch)?;
        let z = if ctx.is_train() {
            let shape = ctx.tape.shape(mu).to_vec();
            let n: usize = shape.iter().product();
            let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(ctx.rng())).collect();
            let eps = ctx.constant(Tensor::new(shape, eps)?);
            let std = ctx.tape.scale(logvar, 0.5)?;
            let std = ctx.tape.exp(std)?;
            let noise = ctx.tape.mul(std, eps)?;
            ctx.tape.add(mu, noise)?
        } else {
            mu
        };
        Ok(Latents { z, mu, logvar })
    }

    /// `λ_r · recon + λ_kl · KL`.
    pub fn loss(&self, ctx: &mut Ctx, lat: &Latents, batch: &GraphBatch) -> Result<Var> {
        let recon = reconstruction_loss(ctx, lat.z, batch)?;
        let kl = ctx.tape.kl_normal(lat.mu, lat.logvar)?;
        let recon = ctx.tape.scale(recon, self.config.recon_weight)?;
        let kl = ctx.tape.scale(kl, self.config.kl_weight)?;
        ctx.tape.add(recon, kl)
    }
}

/// Binary cross-entropy between `σ(Z Zᵀ)` and `A + I`, averaged over the
/// entries of each graph and then over graphs.
pub fn reconstruction_loss(ctx: &mut Ctx, z: Var, batch: &GraphBatch) -> Result<Var> {
    let b = batch.num_graphs();
    let mut total: Option<Var> = None;
    for i in 0..b {
        let (lo, n) = (batch.offsets[i], batch.node_count(i));
        let rows = ctx
            .tape
            .gather_rows(z, Arc::new((lo..lo + n).map(Some).collect()))?;
        let logits = ctx.tape.matmul_nt(rows, rows)?;
        let mut target = Tensor::identity(n);
        for &(u, v) in &batch.local_edges[i] {
            target.data_mut()[u * n + v] = 1.0;
            target.data_mut()[v * n + u] = 1.0;
        }
        let l = ctx.tape.bce_logits(logits, &target)?;
        total = Some(match total {
            Some(t) => ctx.tape.add(t, l)?,
            None => l,
        });
    }
    let total = total.expect("batches are never empty");
    ctx.tape.scale(total, 1.0 / b as f64)
}
