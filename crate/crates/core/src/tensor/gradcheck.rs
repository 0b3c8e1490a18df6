use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error, so near-zero gradients are
    /// compared in absolute terms scaled by this value.
    pub floor: f64,
    /// Upper bound on coordinates probed per input; `None` probes all.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-6,
            floor: 1e-3,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Distance to the nearest kink seen in the base forward pass.
    pub kink_margin: f64,
}

/// Compares reverse-mode gradients of a scalar program against central
/// differences.
///
/// `program` builds a tape from the given input values and returns the tape,
/// the scalar output and the variables standing for each input.
pub fn check_gradients<F>(
    program: F,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<(Tape, Var, Vec<Var>)>,
{
    let (tape, out, vars) = program(inputs)?;
    if tape.value(out).len() != 1 {
        return Err(Error::InvalidArgument(
            "gradient check needs a scalar output".into(),
        ));
    }
    if vars.len() != inputs.len() {
        return Err(Error::InvalidArgument(
            "program returned the wrong number of input vars".into(),
        ));
    }
    let grads = tape.backward(out);
    let kink_margin = tape.kink_margin();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    drop(tape);

    let eval = |point: &[Tensor]| -> Result<f64> {
        let (t, o, _) = program(point)?;
        let v = t.scalar(o);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "gradient probe",
            });
        }
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut point = inputs.to_vec();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (idx, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = input.data()[c];
            point[idx].data_mut()[c] = orig + opts.step;
            let plus = eval(&point)?;
            point[idx].data_mut()[c] = orig - opts.step;
            let minus = eval(&point)?;
            point[idx].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[idx].data()[c];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            worst = worst.max((a - numeric).abs() / denom);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        coords_checked: checked,
        kink_margin,
    })
}
