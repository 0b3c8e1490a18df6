//! Multi-head attention and the Set Transformer blocks built from it.
//!
//! Every block works on stacked rows of several sets at once; `offsets`
//! delimit the sets, and attention never crosses a set boundary.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_bound, Ctx, Dense, Mode, ParamId, Params};
use crate::tensor::{Precision, ReduceKind, Tensor, Var};

/// `softmax(Q Kᵀ / √d_k) V` for plain matrices.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.rank() != 2
        || k.rank() != 2
        || v.rank() != 2
        || q.cols() != k.cols()
        || k.rows() != v.rows()
    {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    if k.rows() == 0 {
        return Err(Error::InvalidArgument(
            "attention over an empty key set".into(),
        ));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut out = Vec::with_capacity(q.rows() * v.cols());
    for i in 0..q.rows() {
        let scores: Vec<f64> = (0..k.rows())
            .map(|j| {
                scale
                    * q.row_slice(i)
                        .iter()
                        .zip(k.row_slice(j))
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = w.iter().sum();
        for c in 0..v.cols() {
            out.push((0..k.rows()).map(|j| w[j] / z * v.get(j, c)).sum());
        }
    }
    Tensor::matrix(q.rows(), v.cols(), out)
}

/// `Concatenate(head_1..head_h) W^O` with `head_i = attention(Q W_i^Q, K W_i^K, V W_i^V)`.
///
/// The per-head projections are stored side by side as column blocks of one
/// `d x d` matrix per role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "model width {dim} is not divisible by {heads} heads"
            )));
        }
        let b = init_bound(dim);
        Ok(MultiHeadAttention {
            wq: params.uniform(format!("{name}.wq"), &[dim, dim], b, rng),
            wk: params.uniform(format!("{name}.wk"), &[dim, dim], b, rng),
            wv: params.uniform(format!("{name}.wv"), &[dim, dim], b, rng),
            wo: params.uniform(format!("{name}.wo"), &[dim, dim], b, rng),
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `multi_head(X, Y, Y)`; rows of set `s` in `x` attend to rows of set
    /// `s` in `y`.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        x: Var,
        y: Var,
        x_off: &Arc<Vec<usize>>,
        y_off: &Arc<Vec<usize>>,
    ) -> Result<Var> {
        let (wq, wk, wv, wo) = (
            ctx.param(self.wq),
            ctx.param(self.wk),
            ctx.param(self.wv),
            ctx.param(self.wo),
        );
        let q = ctx.tape.matmul(x, wq)?;
        let k = ctx.tape.matmul(y, wk)?;
        let v = ctx.tape.matmul(y, wv)?;
        let heads = ctx.tape.segment_attention(
            q,
            k,
            v,
            Arc::clone(x_off),
            Arc::clone(y_off),
            self.heads,
        )?;
        ctx.tape.matmul(heads, wo)
    }
}

/// Row-wise dense layer followed by relu; width preserving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    pub dense: Dense,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        FeedForward {
            dense: Dense::new(params, rng, name, in_dim, out_dim, true),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.dense.forward(ctx, x)?;
        ctx.tape.relu(h)
    }
}

/// `mab(X, Y) = A + ff(A)` with `A = X + multi_head(X, Y, Y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mab {
    pub attn: MultiHeadAttention,
    pub ff: FeedForward,
}

impl Mab {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Mab {
            attn: MultiHeadAttention::new(params, rng, &format!("{name}.attn"), dim, heads)?,
            ff: FeedForward::new(params, rng, &format!("{name}.ff"), dim, dim),
        })
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx,
        x: Var,
        y: Var,
        x_off: &Arc<Vec<usize>>,
        y_off: &Arc<Vec<usize>>,
    ) -> Result<Var> {
        for v in [x, y] {
            let s = ctx.tape.shape(v);
            if s.len() != 2 || s[1] != self.attn.dim {
                return Err(Error::shape("mab", s, &[s[0], self.attn.dim]));
            }
        }
        let h = self.attn.forward(ctx, x, y, x_off, y_off)?;
        let a = ctx.tape.add(x, h)?;
        let f = self.ff.forward(ctx, a)?;
        ctx.tape.add(a, f)
    }

    /// `sab(X) = mab(X, X)`.
    pub fn self_attend(&self, ctx: &mut Ctx, x: Var, off: &Arc<Vec<usize>>) -> Result<Var> {
        self.forward(ctx, x, x, off, off)
    }
}

/// `pma(Z) = mab(s, ff(Z))` with `k` learnable seed rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pma {
    pub seeds: ParamId,
    pub num_seeds: usize,
    pub ff: FeedForward,
    pub mab: Mab,
}

impl Pma {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        num_seeds: usize,
    ) -> Result<Self> {
        if num_seeds == 0 {
            return Err(Error::InvalidArgument("PMA needs at least one seed".into()));
        }
        Ok(Pma {
            seeds: params.uniform(
                format!("{name}.seeds"),
                &[num_seeds, dim],
                init_bound(dim),
                rng,
            ),
            num_seeds,
            ff: FeedForward::new(params, rng, &format!("{name}.ff"), dim, dim),
            mab: Mab::new(params, rng, &format!("{name}.mab"), dim, heads)?,
        })
    }

    /// Returns `k` rows per set and the offsets delimiting them.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        z: Var,
        z_off: &Arc<Vec<usize>>,
    ) -> Result<(Var, Arc<Vec<usize>>)> {
        let sets = z_off.len().saturating_sub(1);
        if sets == 0 || z_off.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("PMA over an empty set".into()));
        }
        let k = self.num_seeds;
        let seeds = ctx.param(self.seeds);
        let tile: Vec<Option<usize>> = (0..sets).flat_map(|_| (0..k).map(Some)).collect();
        let s = ctx.tape.gather_rows(seeds, Arc::new(tile))?;
        let s_off = Arc::new((0..=sets).map(|i| i * k).collect::<Vec<_>>());
        let fz = self.ff.forward(ctx, z)?;
        let out = self.mab.forward(ctx, s, fz, &s_off, z_off)?;
        Ok((out, s_off))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StVariant {
    /// `n` encoder and `m` decoder blocks, both configurable.
    Default,
    /// One SAB in the encoder, none in the decoder.
    Minimal,
    /// Two SABs in both encoder and decoder.
    Complex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StConfig {
    pub variant: StVariant,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub num_seeds: usize,
    pub hidden: usize,
    pub heads: usize,
    pub out_dim: usize,
}

impl Default for StConfig {
    fn default() -> Self {
        StConfig {
            variant: StVariant::Default,
            encoder_blocks: 2,
            decoder_blocks: 2,
            num_seeds: 8,
            hidden: 32,
            heads: 4,
            out_dim: 64,
        }
    }
}

impl StConfig {
    pub fn with_variant(variant: StVariant) -> Self {
        StConfig {
            variant,
            ..StConfig::default()
        }
    }

    /// Block counts after applying the variant.
    pub fn blocks(&self) -> (usize, usize) {
        match self.variant {
            StVariant::Default => (self.encoder_blocks, self.decoder_blocks),
            StVariant::Minimal => (1, 0),
            StVariant::Complex => (2, 2),
        }
    }
}

/// `st(H) = mean_k [ff(sab^m(pma_k(sab^n(W_in H))))]_k`, computed per set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetTransformer {
    pub config: StConfig,
    pub input: Dense,
    pub encoder: Vec<Mab>,
    pub pma: Pma,
    pub decoder: Vec<Mab>,
    pub output: FeedForward,
    pub in_dim: usize,
}

impl SetTransformer {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        config: StConfig,
    ) -> Result<Self> {
        let (n, m) = config.blocks();
        let h = config.hidden;
        let input = Dense::new(params, rng, &format!("{name}.input"), in_dim, h, true);
        let encoder = (0..n)
            .map(|i| Mab::new(params, rng, &format!("{name}.enc{i}"), h, config.heads))
            .collect::<Result<Vec<_>>>()?;
        let pma = Pma::new(
            params,
            rng,
            &format!("{name}.pma"),
            h,
            config.heads,
            config.num_seeds,
        )?;
        let decoder = (0..m)
            .map(|i| Mab::new(params, rng, &format!("{name}.dec{i}"), h, config.heads))
            .collect::<Result<Vec<_>>>()?;
        let output = FeedForward::new(params, rng, &format!("{name}.out"), h, config.out_dim);
        Ok(SetTransformer {
            config,
            input,
            encoder,
            pma,
            decoder,
            output,
            in_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    /// `h` holds the valid node rows of every set; returns one row per set.
    pub fn forward(&self, ctx: &mut Ctx, h: Var, offsets: &Arc<Vec<usize>>) -> Result<Var> {
        let s = ctx.tape.shape(h);
        if s.len() != 2 || s[1] != self.in_dim {
            return Err(Error::shape("set transformer", s, &[s[0], self.in_dim]));
        }
        let mut z = self.input.forward(ctx, h)?;
        for block in &self.encoder {
            z = block.self_attend(ctx, z, offsets)?;
        }
        let (mut c, c_off) = self.pma.forward(ctx, z, offsets)?;
        for block in &self.decoder {
            c = block.self_attend(ctx, c, &c_off)?;
        }
        let y = self.output.forward(ctx, c)?;
        ctx.tape.segment_reduce(y, c_off, ReduceKind::Mean)
    }

    /// Embedding of a single set given as an `n x D` matrix (eval mode).
    pub fn embed(&self, params: &Params, h: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::new(params, Mode::Eval, 0, Precision::F64);
        let x = ctx.constant(h.clone());
        let off = Arc::new(vec![0, h.rows()]);
        let y = self.forward(&mut ctx, x, &off)?;
        Ok(ctx.tape.value(y).clone())
    }
}
