use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sequence;
use crate::error::{Error, Result};
use crate::nn::{init_bound, Ctx, ParamId, Params};
use crate::tensor::{Tensor, Var};

/// Single-layer unidirectional GRU run over the padded node sequence.
///
/// ```text
/// r = σ(x W_ir + b_ir + h W_hr + b_hr)
/// z = σ(x W_iz + b_iz + h W_hz + b_hz)
/// n = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
///
/// Gate weights are stored side by side in `[r | z | n]` column blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruReadout {
    pub w_input: ParamId,
    pub b_input: ParamId,
    pub w_hidden: ParamId,
    pub b_hidden: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
    pub max_nodes: usize,
    pub last_valid: bool,
}

impl GruReadout {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        hidden: usize,
        max_nodes: usize,
        last_valid: bool,
    ) -> Self {
        let b = init_bound(hidden);
        GruReadout {
            w_input: params.uniform(format!("{name}.w_input"), &[input_dim, 3 * hidden], b, rng),
            b_input: params.uniform(format!("{name}.b_input"), &[1, 3 * hidden], b, rng),
            w_hidden: params.uniform(format!("{name}.w_hidden"), &[hidden, 3 * hidden], b, rng),
            b_hidden: params.uniform(format!("{name}.b_hidden"), &[1, 3 * hidden], b, rng),
            input_dim,
            hidden,
            max_nodes,
            last_valid,
        }
    }

    /// Final hidden state of every sequence. With `last_valid`, the state
    /// stops updating once position `lengths[s]` is reached.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        x: Var,
        seqs: &[Sequence],
        lengths: &[usize],
    ) -> Result<Var> {
        let s = ctx.tape.shape(x);
        if s.len() != 2 || s[1] != self.input_dim {
            return Err(Error::shape("gru readout", s, &[s[0], self.input_dim]));
        }
        if seqs.is_empty()
            || seqs.iter().any(|q| q.len() != self.max_nodes)
            || lengths.len() != seqs.len()
        {
            return Err(Error::InvalidArgument(format!(
                "gru readout expects one length per sequence of {} positions",
                self.max_nodes
            )));
        }
        let hd = self.hidden;
        let (wi, bi) = (ctx.param(self.w_input), ctx.param(self.b_input));
        let (wh, bh) = (ctx.param(self.w_hidden), ctx.param(self.b_hidden));
        // input projections of every node row, computed once
        let xw = ctx.tape.matmul(x, wi)?;
        let mut h = ctx.constant(Tensor::zeros(&[seqs.len(), hd]));
        for t in 0..self.max_nodes {
            let step: Vec<Option<usize>> = seqs.iter().map(|q| q[t]).collect();
            let gx = ctx.tape.gather_rows(xw, Arc::new(step))?;
            let gx = ctx.tape.add_row(gx, bi)?;
            let gh = ctx.tape.matmul(h, wh)?;
            let gh = ctx.tape.add_row(gh, bh)?;
            let gate = |ctx: &mut Ctx, k: usize| -> Result<(Var, Var)> {
                Ok((
                    ctx.tape.slice_cols(gx, k * hd, (k + 1) * hd)?,
                    ctx.tape.slice_cols(gh, k * hd, (k + 1) * hd)?,
                ))
            };
            let (xr, hr) = gate(ctx, 0)?;
            let (xz, hz) = gate(ctx, 1)?;
            let (xn, hn) = gate(ctx, 2)?;
            let r = ctx.tape.add(xr, hr)?;
            let r = ctx.tape.sigmoid(r)?;
            let z = ctx.tape.add(xz, hz)?;
            let z = ctx.tape.sigmoid(z)?;
            let rn = ctx.tape.mul(r, hn)?;
            let n = ctx.tape.add(xn, rn)?;
            let n = ctx.tape.tanh(n)?;
            // h' = n + z ⊙ (h - n)
            let diff = ctx.tape.sub(h, n)?;
            let zd = ctx.tape.mul(z, diff)?;
            let next = ctx.tape.add(n, zd)?;
            h = if self.last_valid {
                let mask: Vec<f64> = lengths
                    .iter()
                    .flat_map(|&len| std::iter::repeat_n(if t < len { 1.0 } else { 0.0 }, hd))
                    .collect();
                let step = ctx.tape.sub(next, h)?;
                let step = ctx.tape.mul_const(step, mask)?;
                ctx.tape.add(h, step)?
            } else {
                next
            };
        }
        Ok(h)
    }
}
