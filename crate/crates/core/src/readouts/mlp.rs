use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sequence;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Ctx, Dense, Params};
use crate::tensor::Var;

/// Two-layer network over the flattened padded node matrix:
/// `dropout(relu(bn2(W2 relu(bn1(W1 h + b1)) + b2)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpReadout {
    pub fc1: Dense,
    pub bn1: BatchNorm,
    pub fc2: Dense,
    pub bn2: BatchNorm,
    pub dropout: f64,
    pub node_dim: usize,
    pub max_nodes: usize,
}

impl MlpReadout {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        rng: &mut R,
        name: &str,
        node_dim: usize,
        max_nodes: usize,
        hidden: usize,
        out: usize,
        dropout: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {dropout} outside [0, 1)"
            )));
        }
        Ok(MlpReadout {
            fc1: Dense::new(
                params,
                rng,
                &format!("{name}.fc1"),
                max_nodes * node_dim,
                hidden,
                true,
            ),
            bn1: BatchNorm::new(params, &format!("{name}.bn1"), hidden),
            fc2: Dense::new(params, rng, &format!("{name}.fc2"), hidden, out, true),
            bn2: BatchNorm::new(params, &format!("{name}.bn2"), out),
            dropout,
            node_dim,
            max_nodes,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_dim
    }

    /// One output row per sequence.
    pub fn forward(&self, ctx: &mut Ctx, h: Var, seqs: &[Sequence]) -> Result<Var> {
        let s = ctx.tape.shape(h);
        if s.len() != 2 || s[1] != self.node_dim {
            return Err(Error::shape("mlp readout", s, &[s[0], self.node_dim]));
        }
        if seqs.iter().any(|q| q.len() != self.max_nodes) {
            return Err(Error::InvalidArgument(format!(
                "mlp readout expects sequences of length {}",
                self.max_nodes
            )));
        }
        let index: Vec<Option<usize>> = seqs.iter().flatten().copied().collect();
        let rows = ctx.tape.gather_rows(h, Arc::new(index))?;
        let flat = ctx
            .tape
            .reshape(rows, vec![seqs.len(), self.max_nodes * self.node_dim])?;
        let z = self.fc1.forward(ctx, flat)?;
        let z = self.bn1.forward(ctx, z)?;
        let z = ctx.tape.relu(z)?;
        let z = self.fc2.forward(ctx, z)?;
        let z = self.bn2.forward(ctx, z)?;
        let z = ctx.tape.relu(z)?;
        ctx.dropout(z, self.dropout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::{Precision, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(m: &MlpReadout, p: &Params, x: &Tensor, seqs: &[Sequence]) -> Tensor {
        let mut ctx = Ctx::new(p, Mode::Eval, 0, Precision::F64);
        let h = ctx.constant(x.clone());
        let y = m.forward(&mut ctx, h, seqs).unwrap();
        ctx.tape.value(y).clone()
    }

    #[test]
    fn zero_input_zero_biases_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = Params::new();
        let m = MlpReadout::new(&mut p, &mut rng, "m", 2, 3, 8, 4, 0.4).unwrap();
        p.set(m.fc1.bias.unwrap(), Tensor::zeros(&[1, 8])).unwrap();
        p.set(m.fc2.bias.unwrap(), Tensor::zeros(&[1, 4])).unwrap();
        let x = Tensor::zeros(&[2, 2]);
        let y = run(&m, &p, &x, &[vec![Some(0), Some(1), None]]);
        assert_eq!(y.shape(), &[1, 4]);
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn swapping_rows_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Params::new();
        let m = MlpReadout::new(&mut p, &mut rng, "m", 2, 2, 8, 4, 0.4).unwrap();
        let x = Tensor::matrix(2, 2, vec![1.0, -0.5, 0.25, 2.0]).unwrap();
        let a = run(&m, &p, &x, &[vec![Some(0), Some(1)]]);
        let b = run(&m, &p, &x, &[vec![Some(1), Some(0)]]);
        assert!(a.max_abs_diff(&b).unwrap() > 1e-6);
    }

    #[test]
    fn train_mode_applies_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = Params::new();
        let m = MlpReadout::new(&mut p, &mut rng, "m", 1, 1, 4, 200, 0.4).unwrap();
        let x = Tensor::matrix(4, 1, vec![1.0, -1.0, 2.0, 0.5]).unwrap();
        let seqs: Vec<Sequence> = (0..4).map(|i| vec![Some(i)]).collect();
        let mut ctx = Ctx::new(&p, Mode::Train, 3, Precision::F64);
        let h = ctx.constant(x);
        let y = m.forward(&mut ctx, h, &seqs).unwrap();
        let zeros = ctx
            .tape
            .value(y)
            .data()
            .iter()
            .filter(|v| **v == 0.0)
            .count();
        // relu already zeroes about half; dropout zeroes 40% of the rest
        assert!(zeros > 400 && zeros < 700, "{zeros}");
        assert!(MlpReadout::new(&mut p, &mut rng, "bad", 1, 1, 2, 2, 1.0).is_err());
    }
}
