//! Central finite-difference gradient checking.
//!
//! The analytic gradient from [`Tape::backward`] is compared with
//! `(f(x+h) − f(x−h)) / 2h` evaluated through forward passes only. Errors
//! are reported per input as `‖analytic − numeric‖₂ / max(‖analytic‖₂,
//! ‖numeric‖₂, floor)` over the checked coordinates, where `floor` is the
//! roundoff level of the difference quotient, `ROUNDOFF · max(|f|, 1) / h`
//! per coordinate.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Default finite-difference step.
pub const STEP: f64 = 1e-4;
/// Default acceptance threshold on the relative error.
pub const TOLERANCE: f64 = 1e-3;
/// Step for whole-model checks; small enough that ReLU kinks are rarely
/// straddled.
pub const MODEL_STEP: f64 = 1e-5;
/// Roundoff of one forward evaluation relative to the loss, divided by
/// [`TOLERANCE`]: gradients smaller than this cannot be resolved.
pub const ROUNDOFF: f64 = 1e5 * f64::EPSILON;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Per input, at most this many coordinates are perturbed (chosen at
    /// random); `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: STEP, max_coords: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error per input tensor.
    pub per_input: Vec<f64>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.per_input.iter().all(|e| e.is_finite() && *e < tolerance)
    }
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract(format!("gradient check needs a scalar output, got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compares analytic and numeric gradients of the scalar `f(inputs)`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract(format!("gradient check needs a scalar output, got {:?}", tape.value(out).shape())));
    }
    let f0 = tape.value(out).item();
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad(v)).collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut coords_checked = 0;
    for (i, grad) in analytic.iter().enumerate() {
        let n = inputs[i].numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &c in &coords {
            let orig = inputs[i].data()[c];
            work[i].data_mut()[c] = orig + opts.step;
            let plus = evaluate(&work, &f)?;
            work[i].data_mut()[c] = orig - opts.step;
            let minus = evaluate(&work, &f)?;
            work[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.data()[c];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        coords_checked += coords.len();
        let floor = ROUNDOFF * f0.abs().max(1.0) / opts.step * (coords.len() as f64).sqrt();
        let denom = na.sqrt().max(nn.sqrt()).max(floor);
        per_input.push(diff.sqrt() / denom);
    }
    Ok(GradCheckReport { per_input, coords_checked })
}
