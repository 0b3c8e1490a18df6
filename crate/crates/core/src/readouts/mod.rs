//! Graph-level readouts: node rows in, one embedding row per graph out.
//!
//! Standard and Set Transformer readouts see only the valid rows of each
//! graph. MLP and GRU readouts see the graph as a zero-padded sequence of
//! `max_nodes` positions, so they depend on node order.

mod gru;
mod janossy;
mod mlp;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use gru::GruReadout;
pub use janossy::{JanossyReadout, JanossySampling};
pub use mlp::MlpReadout;

use crate::attention::{SetTransformer, StConfig, StVariant};
use crate::error::{Error, Result};
use crate::graph::GraphBatch;
use crate::nn::{Ctx, Dense, Params};
use crate::tensor::{ReduceKind, Var};

/// One row index per sequence position; `None` is a zero (padding) row.
pub type Sequence = Vec<Option<usize>>;

/// Sequences of every graph in `batch`, in stored node order.
pub fn batch_sequences(batch: &GraphBatch) -> Vec<Sequence> {
    batch
        .padded_index(None)
        .chunks(batch.max_nodes)
        .map(<[_]>::to_vec)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutKind {
    Sum,
    Mean,
    Max,
    Mlp,
    Gru,
    StDefault,
    StMinimal,
    StComplex,
    JanossyMlp,
    JanossyGru,
}

impl ReadoutKind {
    pub const ALL: [ReadoutKind; 10] = [
        ReadoutKind::Sum,
        ReadoutKind::Mean,
        ReadoutKind::Max,
        ReadoutKind::Mlp,
        ReadoutKind::Gru,
        ReadoutKind::StDefault,
        ReadoutKind::StMinimal,
        ReadoutKind::StComplex,
        ReadoutKind::JanossyMlp,
        ReadoutKind::JanossyGru,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReadoutKind::Sum => "sum",
            ReadoutKind::Mean => "mean",
            ReadoutKind::Max => "max",
            ReadoutKind::Mlp => "mlp",
            ReadoutKind::Gru => "gru",
            ReadoutKind::StDefault => "st_default",
            ReadoutKind::StMinimal => "st_minimal",
            ReadoutKind::StComplex => "st_complex",
            ReadoutKind::JanossyMlp => "janossy_mlp",
            ReadoutKind::JanossyGru => "janossy_gru",
        }
    }

    /// Sum, mean and max.
    pub fn is_standard(self) -> bool {
        matches!(
            self,
            ReadoutKind::Sum | ReadoutKind::Mean | ReadoutKind::Max
        )
    }

    /// Whether the output is exactly invariant to node order.
    pub fn is_invariant(self) -> bool {
        self.is_standard() || self.is_set_transformer()
    }

    pub fn is_set_transformer(self) -> bool {
        matches!(
            self,
            ReadoutKind::StDefault | ReadoutKind::StMinimal | ReadoutKind::StComplex
        )
    }
}

impl std::fmt::Display for ReadoutKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ReadoutKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ReadoutKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown readout {s:?}")))
    }
}

/// Readout hyperparameters; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReadoutParams {
    pub mlp_hidden: usize,
    pub mlp_out: usize,
    pub dropout: f64,
    pub gru_hidden: usize,
    /// Take the GRU state after the last real node instead of the last
    /// padded position.
    pub gru_last_valid: bool,
    pub st_hidden: usize,
    pub st_heads: usize,
    pub st_seeds: usize,
    pub st_out: usize,
    pub st_encoder_blocks: usize,
    pub st_decoder_blocks: usize,
    pub janossy_perms: usize,
    pub janossy_sampling: JanossySampling,
    pub janossy_eval_seed: u64,
}

impl Default for ReadoutParams {
    fn default() -> Self {
        let st = StConfig::default();
        ReadoutParams {
            mlp_hidden: 64,
            mlp_out: 32,
            dropout: 0.4,
            gru_hidden: 64,
            gru_last_valid: false,
            st_hidden: st.hidden,
            st_heads: st.heads,
            st_seeds: st.num_seeds,
            st_out: st.out_dim,
            st_encoder_blocks: st.encoder_blocks,
            st_decoder_blocks: st.decoder_blocks,
            janossy_perms: 25,
            janossy_sampling: JanossySampling::Random,
            janossy_eval_seed: 0,
        }
    }
}

impl ReadoutParams {
    pub fn st_config(&self, variant: StVariant) -> StConfig {
        StConfig {
            variant,
            encoder_blocks: self.st_encoder_blocks,
            decoder_blocks: self.st_decoder_blocks,
            num_seeds: self.st_seeds,
            hidden: self.st_hidden,
            heads: self.st_heads,
            out_dim: self.st_out,
        }
    }
}

/// A readout over padded node sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "sequence", rename_all = "lowercase")]
pub enum SequenceReadout {
    Mlp(MlpReadout),
    Gru(GruReadout),
}

impl SequenceReadout {
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        h: Var,
        seqs: &[Sequence],
        lengths: &[usize],
    ) -> Result<Var> {
        match self {
            SequenceReadout::Mlp(m) => m.forward(ctx, h, seqs),
            SequenceReadout::Gru(g) => g.forward(ctx, h, seqs, lengths),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            SequenceReadout::Mlp(m) => m.out_dim(),
            SequenceReadout::Gru(g) => g.hidden,
        }
    }

    pub fn max_nodes(&self) -> usize {
        match self {
            SequenceReadout::Mlp(m) => m.max_nodes,
            SequenceReadout::Gru(g) => g.max_nodes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "readout", rename_all = "snake_case")]
pub enum Readout {
    Standard { reduce: ReduceKind, dim: usize },
    Sequence(SequenceReadout),
    SetTransformer(SetTransformer),
    Janossy(JanossyReadout),
}

impl Readout {
    /// Builds a readout for node rows of width `in_dim` from graphs with at
    /// most `max_nodes` nodes.
    pub fn new<R: Rng + ?Sized>(
        kind: ReadoutKind,
        params: &mut Params,
        rng: &mut R,
        in_dim: usize,
        max_nodes: usize,
        rp: &ReadoutParams,
    ) -> Result<Self> {
        let mlp = |params: &mut Params, rng: &mut R| {
            MlpReadout::new(
                params,
                rng,
                "readout.mlp",
                in_dim,
                max_nodes,
                rp.mlp_hidden,
                rp.mlp_out,
                rp.dropout,
            )
        };
        let gru = |params: &mut Params, rng: &mut R| {
            GruReadout::new(
                params,
                rng,
                "readout.gru",
                in_dim,
                rp.gru_hidden,
                max_nodes,
                rp.gru_last_valid,
            )
        };
        let st = |params: &mut Params, rng: &mut R, v| {
            SetTransformer::new(params, rng, "readout.st", in_dim, rp.st_config(v))
                .map(Readout::SetTransformer)
        };
        let janossy = |base| {
            JanossyReadout::new(
                base,
                rp.janossy_perms,
                rp.janossy_sampling,
                rp.janossy_eval_seed,
            )
        };
        match kind {
            ReadoutKind::Sum => Ok(Readout::Standard {
                reduce: ReduceKind::Sum,
                dim: in_dim,
            }),
            ReadoutKind::Mean => Ok(Readout::Standard {
                reduce: ReduceKind::Mean,
                dim: in_dim,
            }),
            ReadoutKind::Max => Ok(Readout::Standard {
                reduce: ReduceKind::Max,
                dim: in_dim,
            }),
            ReadoutKind::Mlp => Ok(Readout::Sequence(SequenceReadout::Mlp(mlp(params, rng)?))),
            ReadoutKind::Gru => Ok(Readout::Sequence(SequenceReadout::Gru(gru(params, rng)))),
            ReadoutKind::StDefault => st(params, rng, StVariant::Default),
            ReadoutKind::StMinimal => st(params, rng, StVariant::Minimal),
            ReadoutKind::StComplex => st(params, rng, StVariant::Complex),
            ReadoutKind::JanossyMlp => Ok(Readout::Janossy(janossy(SequenceReadout::Mlp(mlp(
                params, rng,
            )?))?)),
            ReadoutKind::JanossyGru => Ok(Readout::Janossy(janossy(SequenceReadout::Gru(gru(
                params, rng,
            )))?)),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Readout::Standard { dim, .. } => *dim,
            Readout::Sequence(s) => s.out_dim(),
            Readout::SetTransformer(st) => st.out_dim(),
            Readout::Janossy(j) => j.base.out_dim(),
        }
    }

    /// `h` holds the node rows of `batch`; returns `num_graphs x out_dim`.
    pub fn forward(&self, ctx: &mut Ctx, h: Var, batch: &GraphBatch) -> Result<Var> {
        match self {
            Readout::Standard { reduce, .. } => {
                ctx.tape
                    .segment_reduce(h, Arc::clone(&batch.offsets), *reduce)
            }
            Readout::Sequence(s) => {
                check_max_nodes(s.max_nodes(), batch)?;
                s.forward(ctx, h, &batch_sequences(batch), &batch.node_counts())
            }
            Readout::SetTransformer(st) => st.forward(ctx, h, &batch.offsets),
            Readout::Janossy(j) => {
                check_max_nodes(j.base.max_nodes(), batch)?;
                j.forward(ctx, h, batch)
            }
        }
    }
}

fn check_max_nodes(expected: usize, batch: &GraphBatch) -> Result<()> {
    if batch.max_nodes != expected {
        return Err(Error::InvalidArgument(format!(
            "readout was built for {expected} node positions but the batch is padded to {}",
            batch.max_nodes
        )));
    }
    Ok(())
}

/// Single dense layer from the graph embedding to the task outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionHead {
    pub dense: Dense,
}

impl PredictionHead {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        rng: &mut R,
        in_dim: usize,
        outputs: usize,
    ) -> Self {
        PredictionHead {
            dense: Dense::new(params, rng, "head", in_dim, outputs, true),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, embedding: Var) -> Result<Var> {
        let s = ctx.tape.shape(embedding);
        if s.len() != 2 || s[1] != self.dense.in_dim {
            return Err(Error::shape(
                "prediction head",
                s,
                &[s[0], self.dense.in_dim],
            ));
        }
        self.dense.forward(ctx, embedding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, Permutation};
    use crate::nn::{check_param_gradients, Mode, ParamId};
    use crate::tensor::{GradCheckOptions, Precision, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval(readout: &Readout, p: &Params, graphs: &[&Graph], max_nodes: usize) -> Tensor {
        let batch = GraphBatch::new(graphs, max_nodes).unwrap();
        let mut ctx = Ctx::new(p, Mode::Eval, 0, Precision::F64);
        let h = ctx.constant(batch.features.clone());
        let y = readout.forward(&mut ctx, h, &batch).unwrap();
        ctx.tape.value(y).clone()
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Graph {
        let feats = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        Graph::new("r", feats, vec![], vec![0.0]).unwrap()
    }

    #[test]
    fn names_round_trip() {
        for k in ReadoutKind::ALL {
            assert_eq!(k.name().parse::<ReadoutKind>().unwrap(), k);
            assert_eq!(
                serde_json::to_string(&k).unwrap(),
                format!("\"{}\"", k.name())
            );
        }
        assert!("median".parse::<ReadoutKind>().is_err());
    }

    #[test]
    fn standard_readouts_small_cases() {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Graph::new(
            "g",
            vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            vec![(0, 1)],
            vec![0.0],
        )
        .unwrap();
        let rp = ReadoutParams::default();
        let sum = Readout::new(ReadoutKind::Sum, &mut p, &mut rng, 2, 4, &rp).unwrap();
        assert_eq!(eval(&sum, &p, &[&g], 4).data(), &[4.0, 6.0]);
        let one = Graph::new("o", vec![vec![-0.5, 7.0]], vec![], vec![0.0]).unwrap();
        for k in [ReadoutKind::Sum, ReadoutKind::Mean, ReadoutKind::Max] {
            let r = Readout::new(k, &mut p, &mut rng, 2, 4, &rp).unwrap();
            assert_eq!(eval(&r, &p, &[&one], 4).data(), &[-0.5, 7.0]);
        }
    }

    #[test]
    fn standard_readouts_exhaustively_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Params::new();
        let rp = ReadoutParams::default();
        for n in 1..=5 {
            let g = random_graph(&mut rng, n, 3);
            for k in [ReadoutKind::Sum, ReadoutKind::Mean, ReadoutKind::Max] {
                let r = Readout::new(k, &mut p, &mut rng, 3, 5, &rp).unwrap();
                let base = eval(&r, &p, &[&g], 5);
                for perm in Permutation::all(n) {
                    let moved = eval(&r, &p, &[&perm.apply(&g).unwrap()], 5);
                    assert!(base.max_abs_diff(&moved).unwrap() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn sequence_readouts_reject_other_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = Params::new();
        let r = Readout::new(
            ReadoutKind::Gru,
            &mut p,
            &mut rng,
            3,
            4,
            &ReadoutParams::default(),
        )
        .unwrap();
        let g = random_graph(&mut rng, 3, 3);
        let batch = GraphBatch::new(&[&g], 6).unwrap();
        let mut ctx = Ctx::new(&p, Mode::Eval, 0, Precision::F64);
        let h = ctx.constant(batch.features.clone());
        assert!(r.forward(&mut ctx, h, &batch).is_err());
    }

    #[test]
    fn prediction_head_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = Params::new();
        let head = PredictionHead::new(&mut p, &mut rng, 4, 1);
        p.set(head.dense.weight, Tensor::zeros(&[4, 1])).unwrap();
        p.set(head.dense.bias.unwrap(), Tensor::zeros(&[1, 1]))
            .unwrap();
        let mut ctx = Ctx::new(&p, Mode::Eval, 0, Precision::F64);
        let e = ctx.constant(Tensor::full(&[2, 4], 3.0));
        let y = head.forward(&mut ctx, e).unwrap();
        assert_eq!(ctx.tape.value(y).data(), &[0.0, 0.0]);
        let bad = ctx.constant(Tensor::zeros(&[2, 3]));
        assert!(head.forward(&mut ctx, bad).is_err());
    }

    #[test]
    fn every_readout_with_head_and_loss_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let graphs: Vec<Graph> = [3, 1, 4]
            .iter()
            .map(|&n| random_graph(&mut rng, n, 3))
            .collect();
        let refs: Vec<&Graph> = graphs.iter().collect();
        let batch = GraphBatch::new(&refs, 4).unwrap();
        let target = Tensor::matrix(3, 1, vec![0.5, -1.0, 2.0]).unwrap();
        let rp = ReadoutParams {
            mlp_hidden: 6,
            mlp_out: 5,
            gru_hidden: 4,
            st_hidden: 4,
            st_heads: 2,
            st_seeds: 2,
            st_out: 3,
            janossy_perms: 3,
            ..ReadoutParams::default()
        };
        for kind in ReadoutKind::ALL {
            let mut p = Params::new();
            let r = Readout::new(kind, &mut p, &mut rng, 3, 4, &rp).unwrap();
            let head = PredictionHead::new(&mut p, &mut rng, r.out_dim(), 1);
            let ids: Vec<ParamId> = p.trainable_ids().collect();
            let opts = GradCheckOptions {
                max_coords_per_input: Some(3),
                ..GradCheckOptions::default()
            };
            let report = check_param_gradients(&p, &ids, Mode::Train, 7, &opts, |ctx| {
                let h = ctx.constant(batch.features.clone());
                let e = r.forward(ctx, h, &batch)?;
                let y = head.forward(ctx, e)?;
                ctx.tape.mse(y, &target)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{kind}: {report:?}");
        }
    }
}
