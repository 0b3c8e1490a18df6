use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Sequence, SequenceReadout};
use crate::error::{Error, Result};
use crate::graph::{GraphBatch, Permutation};
use crate::nn::Ctx;
use crate::tensor::{ReduceKind, Var};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JanossySampling {
    /// `p` random orderings per graph.
    #[default]
    Random,
    /// The stored node order only.
    Identity,
    /// All `n!` orderings; exact invariance.
    Exhaustive,
}

/// Largest graph for which exhaustive enumeration is allowed (8! orderings).
pub const MAX_EXHAUSTIVE_NODES: usize = 8;

/// Averages a sequence readout over orderings of each graph's valid rows.
/// Padding positions stay at the end of every ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JanossyReadout {
    pub base: SequenceReadout,
    pub perms: usize,
    pub sampling: JanossySampling,
    /// Orderings in eval mode come from a stream seeded with this value and
    /// the graph size, so a graph's prediction does not depend on its batch.
    pub eval_seed: u64,
}

impl JanossyReadout {
    pub fn new(
        base: SequenceReadout,
        perms: usize,
        sampling: JanossySampling,
        eval_seed: u64,
    ) -> Result<Self> {
        if perms == 0 {
            return Err(Error::InvalidArgument(
                "janossy readout needs at least one permutation".into(),
            ));
        }
        Ok(JanossyReadout {
            base,
            perms,
            sampling,
            eval_seed,
        })
    }

    fn orderings(&self, ctx: &mut Ctx, n: usize) -> Result<Vec<Permutation>> {
        match self.sampling {
            JanossySampling::Identity => Ok(vec![Permutation::identity(n)]),
            JanossySampling::Exhaustive => {
                if n > MAX_EXHAUSTIVE_NODES {
                    return Err(Error::InvalidArgument(format!(
                        "exhaustive janossy readout limited to {MAX_EXHAUSTIVE_NODES} nodes, got {n}"
                    )));
                }
                Ok(Permutation::all(n))
            }
            JanossySampling::Random if ctx.is_train() => Ok((0..self.perms)
                .map(|_| Permutation::random(n, ctx.rng()))
                .collect()),
            JanossySampling::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    self.eval_seed ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                );
                Ok((0..self.perms)
                    .map(|_| Permutation::random(n, &mut rng))
                    .collect())
            }
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, h: Var, batch: &GraphBatch) -> Result<Var> {
        let m = batch.max_nodes;
        let mut seqs: Vec<Sequence> = Vec::new();
        let mut lengths = Vec::new();
        let mut offsets = vec![0];
        for i in 0..batch.num_graphs() {
            let (base, n) = (batch.offsets[i], batch.node_count(i));
            for perm in self.orderings(ctx, n)? {
                let mut seq: Sequence = perm.mapping().iter().map(|&v| Some(base + v)).collect();
                seq.resize(m, None);
                seqs.push(seq);
                lengths.push(n);
            }
            offsets.push(seqs.len());
        }
        let y = self.base.forward(ctx, h, &seqs, &lengths)?;
        ctx.tape
            .segment_reduce(y, Arc::new(offsets), ReduceKind::Mean)
    }
}
