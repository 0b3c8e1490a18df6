//! Parameter storage, the per-forward context and basic layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    check_gradients, GradCheckOptions, GradCheckReport, Gradients, Precision, Tape, Tensor, Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Buffers (batch-norm running statistics) are not trainable.
    pub trainable: bool,
}

/// Every tensor a model owns, addressed by [`ParamId`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    entries: Vec<ParamEntry>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Trainable tensor drawn from `uniform(-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.random_range(-bound..=bound);
        }
        self.add(name, t, true)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::shape("set_param", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].trainable)
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn round_to(&mut self, precision: Precision) {
        for e in &mut self.entries {
            precision.round(e.value.data_mut());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// State for one forward pass: the tape, bound parameters, mode, the
/// randomness stream and pending buffer updates.
pub struct Ctx<'p> {
    pub tape: Tape,
    params: &'p Params,
    bound: Vec<Option<Var>>,
    mode: Mode,
    rng: ChaCha8Rng,
    pending: Vec<Option<Tensor>>,
}

impl<'p> Ctx<'p> {
    pub fn new(params: &'p Params, mode: Mode, seed: u64, precision: Precision) -> Self {
        Ctx {
            tape: Tape::with_precision(precision),
            params,
            bound: vec![None; params.len()],
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pending: vec![None; params.len()],
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    /// Places a parameter on the tape once and returns its variable.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = &self.params.entries[id.0];
        let v = self.tape.leaf(e.value.clone(), e.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Current value of a buffer, including updates made in this pass.
    pub fn buffer(&self, id: ParamId) -> &Tensor {
        self.pending[id.0]
            .as_ref()
            .unwrap_or(&self.params.entries[id.0].value)
    }

    pub fn set_buffer(&mut self, id: ParamId, value: Tensor) {
        self.pending[id.0] = Some(value);
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        self.pending
            .iter_mut()
            .enumerate()
            .filter_map(|(i, t)| t.take().map(|t| (ParamId(i), t)))
            .collect()
    }

    /// Gradients for every trainable parameter, zeros where unused.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.params
            .trainable_ids()
            .map(|id| {
                let g = match self.bound[id.0] {
                    Some(v) => grads.get_or_zeros(v),
                    None => Tensor::zeros(self.params.get(id).shape()),
                };
                (id, g)
            })
            .collect()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Inverted dropout in train mode, identity in eval mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let train = self.is_train();
        self.tape.dropout(x, rate, train, &mut self.rng)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// Fan-in uniform initialisation bound.
pub fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Row-wise affine map `x W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let bound = init_bound(in_dim);
        let weight = params.uniform(format!("{name}.weight"), &[in_dim, out_dim], bound, rng);
        let bias = bias.then(|| params.uniform(format!("{name}.bias"), &[1, out_dim], bound, rng));
        Dense {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let y = ctx.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = ctx.param(b);
                ctx.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Batch normalisation over rows with running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(params: &mut Params, name: &str, features: usize) -> Self {
        BatchNorm {
            gamma: params.add(
                format!("{name}.gamma"),
                Tensor::full(&[1, features], 1.0),
                true,
            ),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[1, features]), true),
            running_mean: params.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[1, features]),
                false,
            ),
            running_var: params.add(
                format!("{name}.running_var"),
                Tensor::full(&[1, features], 1.0),
                false,
            ),
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
        }
    }

    /// Train mode normalises with batch statistics and updates the running
    /// estimates (unbiased variance when the batch has more than one row).
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        if ctx.is_train() {
            let b = ctx.tape.shape(x)[0] as f64;
            let (y, mean, var) = ctx.tape.batchnorm_train(x, gamma, beta, self.eps)?;
            let m = self.momentum;
            let unbias = if b > 1.0 { b / (b - 1.0) } else { 1.0 };
            let rm: Vec<f64> = ctx
                .buffer(self.running_mean)
                .data()
                .iter()
                .zip(&mean)
                .map(|(r, s)| (1.0 - m) * r + m * s)
                .collect();
            let rv: Vec<f64> = ctx
                .buffer(self.running_var)
                .data()
                .iter()
                .zip(&var)
                .map(|(r, s)| (1.0 - m) * r + m * s * unbias)
                .collect();
            ctx.set_buffer(self.running_mean, Tensor::row(rm));
            ctx.set_buffer(self.running_var, Tensor::row(rv));
            Ok(y)
        } else {
            let mean = ctx.buffer(self.running_mean).data().to_vec();
            let var = ctx.buffer(self.running_var).data().to_vec();
            ctx.tape
                .batchnorm_eval(x, gamma, beta, &mean, &var, self.eps)
        }
    }
}

/// Finite-difference check of a scalar built from `params`, with respect to
/// the parameters in `ids`. `build` runs once per probe on a fresh context
/// seeded with `seed`, so stochastic layers see the same noise every time.
pub fn check_param_gradients<F>(
    params: &Params,
    ids: &[ParamId],
    mode: Mode,
    seed: u64,
    opts: &GradCheckOptions,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let inputs: Vec<Tensor> = ids.iter().map(|&id| params.get(id).clone()).collect();
    let program = |values: &[Tensor]| -> Result<(Tape, Var, Vec<Var>)> {
        let mut local = params.clone();
        for (&id, v) in ids.iter().zip(values) {
            local.set(id, v.clone())?;
        }
        let mut ctx = Ctx::new(&local, mode, seed, Precision::F64);
        let vars: Vec<Var> = ids.iter().map(|&id| ctx.param(id)).collect();
        let out = build(&mut ctx)?;
        Ok((ctx.tape, out, vars))
    };
    check_gradients(program, &inputs, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_forward_and_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = Params::new();
        let d = Dense::new(&mut p, &mut rng, "fc", 3, 2, true);
        let mut ctx = Ctx::new(&p, Mode::Train, 0, Precision::F64);
        let x = ctx.constant(Tensor::full(&[4, 3], 1.0));
        let y = d.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.shape(y), &[4, 2]);
        let s = ctx.tape.sum_all(y).unwrap();
        let g = ctx.tape.backward(s);
        let grads = ctx.param_grads(&g);
        assert_eq!(grads.len(), 2);
        assert_eq!(grads[1].1.data(), &[4.0, 4.0]);
    }

    #[test]
    fn batchnorm_running_stats_update() {
        let mut p = Params::new();
        let bn = BatchNorm::new(&mut p, "bn", 1);
        let mut ctx = Ctx::new(&p, Mode::Train, 0, Precision::F64);
        let x = ctx.constant(Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap());
        bn.forward(&mut ctx, x).unwrap();
        let updates = ctx.take_buffer_updates();
        assert_eq!(updates.len(), 2);
        assert!((updates[0].1.data()[0] - 0.2).abs() < 1e-15);
        // unbiased batch variance of {1, 3} is 2
        assert!((updates[1].1.data()[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn dense_and_batchnorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = Params::new();
        let d = Dense::new(&mut p, &mut rng, "fc", 3, 4, true);
        let bn = BatchNorm::new(&mut p, "bn", 4);
        let x = Tensor::matrix(
            5,
            3,
            (0..15).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect(),
        )
        .unwrap();
        let target = Tensor::matrix(5, 4, (0..20).map(|i| (i as f64).sin()).collect()).unwrap();
        let ids: Vec<ParamId> = p.trainable_ids().collect();
        let r = check_param_gradients(
            &p,
            &ids,
            Mode::Train,
            0,
            &GradCheckOptions::default(),
            |ctx| {
                let x = ctx.constant(x.clone());
                let h = d.forward(ctx, x)?;
                let h = bn.forward(ctx, h)?;
                let h = ctx.tape.tanh(h)?;
                ctx.tape.mse(h, &target)
            },
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.coords_checked, 12 + 4 + 4 + 4);
    }

    #[test]
    fn batchnorm_eval_identity_with_default_stats() {
        let mut p = Params::new();
        let mut bn = BatchNorm::new(&mut p, "bn", 2);
        bn.eps = 0.0;
        let mut ctx = Ctx::new(&p, Mode::Eval, 0, Precision::F64);
        let x = ctx.constant(Tensor::matrix(1, 2, vec![0.3, -2.0]).unwrap());
        let y = bn.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.value(y).data(), &[0.3, -2.0]);
    }
}
