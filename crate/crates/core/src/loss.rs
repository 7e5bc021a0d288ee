//! Reconstruction + normal-consistency loss and its masked weighting.
//!
//! Normals come from forward-difference depth gradients: with tangents
//! `T_h = (0, 1, gh)` and `T_w = (1, 0, gw)` the per-pixel normal is
//! `T_h × T_w = (gw, gh, −1)`, normalized. The same convention is used for
//! prediction and ground truth.

use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Denominator guard when normalizing normals.
pub const NORMAL_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the normal-consistency term.
    pub beta_normal: f64,
    /// Weight of the loss restricted to transparent pixels.
    pub alpha_masked: f64,
    /// Weight of the loss over all pixels.
    pub beta_unmasked: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { beta_normal: 0.01, alpha_masked: 1.0, beta_unmasked: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta_normal", self.beta_normal),
            ("alpha_masked", self.alpha_masked),
            ("beta_unmasked", self.beta_unmasked),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

fn hw<T: Element>(tape: &Tape<T>, d: Var) -> Result<(usize, usize)> {
    match *tape.shape(d) {
        [h, w] if h >= 2 && w >= 2 => Ok((h, w)),
        ref s => dim_err(format!("depth map must be H×W with H, W ≥ 2, got {s:?}")),
    }
}

/// Forward differences `(gh, gw)`; the last row (resp. column) repeats its
/// neighbor, so the gradient there is 0.
pub fn depth_gradients<T: Element>(tape: &mut Tape<T>, d: Var) -> Result<(Var, Var)> {
    let (h, w) = hw(tape, d)?;
    let down: Vec<usize> = (0..h * w).map(|i| ((i / w + 1).min(h - 1)) * w + i % w).collect();
    let right: Vec<usize> = (0..h * w).map(|i| (i / w) * w + (i % w + 1).min(w - 1)).collect();
    let below = tape.gather(d, Arc::new(down), &[h, w])?;
    let beside = tape.gather(d, Arc::new(right), &[h, w])?;
    let gh = tape.sub(below, d)?;
    let gw = tape.sub(beside, d)?;
    Ok((gh, gw))
}

/// Unit normals `H×W×3`, components `(gw, gh, −1) / (‖·‖ + eps)`.
pub fn normal_from_depth<T: Element>(tape: &mut Tape<T>, d: Var) -> Result<Var> {
    let (h, w) = hw(tape, d)?;
    let (gh, gw) = depth_gradients(tape, d)?;
    let gw3 = tape.reshape(gw, &[h, w, 1])?;
    let gh3 = tape.reshape(gh, &[h, w, 1])?;
    let down = tape.constant(Tensor::full(&[h, w, 1], -T::one()));
    let raw = tape.concat(&[gw3, gh3, down], 2)?;
    let sq = tape.mul(raw, raw)?;
    let norm2 = tape.sum_last(sq);
    let norm = tape.sqrt(norm2);
    let norm = tape.add_scalar(norm, T::from_f64_lossy(NORMAL_EPS));
    let spread: Vec<usize> = (0..h * w * 3).map(|i| i / 3).collect();
    let norm3 = tape.gather(norm, Arc::new(spread), &[h, w, 3])?;
    tape.div(raw, norm3)
}

/// Mean squared error plus `beta_normal` times the mean of
/// `1 − cos(n_pred, n_gt)`, both averaged over the pixels selected by
/// `weights` (all pixels when `None`).
fn weighted_depth_loss<T: Element>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: Var,
    weights: Option<Var>,
    count: usize,
    beta_normal: f64,
) -> Result<Var> {
    let inv = T::from_f64_lossy(1.0 / count as f64);
    let diff = tape.sub(pred, gt)?;
    let mut sq = tape.mul(diff, diff)?;
    if let Some(m) = weights {
        sq = tape.mul(sq, m)?;
    }
    let sse = tape.sum(sq);
    let mse = tape.scale(sse, inv);
    if beta_normal == 0.0 {
        return Ok(mse);
    }
    let np = normal_from_depth(tape, pred)?;
    let ng = normal_from_depth(tape, gt)?;
    let prod = tape.mul(np, ng)?;
    let cos = tape.sum_last(prod);
    let neg = tape.scale(cos, -T::one());
    let mut penalty = tape.add_scalar(neg, T::one());
    if let Some(m) = weights {
        penalty = tape.mul(penalty, m)?;
    }
    let total = tape.sum(penalty);
    let normal_term = tape.scale(total, T::from_f64_lossy(beta_normal / count as f64));
    tape.add(mse, normal_term)
}

/// Reconstruction + normal-consistency loss over all pixels.
pub fn depth_loss<T: Element>(tape: &mut Tape<T>, pred: Var, gt: Var, cfg: &LossConfig) -> Result<Var> {
    let (h, w) = hw(tape, pred)?;
    if tape.shape(gt) != [h, w] {
        return dim_err(format!("prediction {:?} and ground truth {:?} differ", tape.shape(pred), tape.shape(gt)));
    }
    weighted_depth_loss(tape, pred, gt, None, h * w, cfg.beta_normal)
}

/// `alpha_masked · loss over mask pixels + beta_unmasked · loss over all
/// pixels`. The mask is binary (`H×W`, 1 = transparent).
pub fn final_loss<T: Element>(tape: &mut Tape<T>, pred: Var, gt: Var, mask: &Tensor<T>, cfg: &LossConfig) -> Result<Var> {
    let (h, w) = hw(tape, pred)?;
    if tape.shape(gt) != [h, w] || mask.shape() != [h, w] {
        return dim_err(format!(
            "prediction {:?}, ground truth {:?} and mask {:?} must share one shape",
            tape.shape(pred),
            tape.shape(gt),
            mask.shape()
        ));
    }
    if mask.data().iter().any(|&m| m != T::zero() && m != T::one()) {
        return Err(Error::Contract("mask must be binary".into()));
    }
    let masked = mask.data().iter().filter(|&&m| m == T::one()).count();
    let mut terms = Vec::new();
    if cfg.alpha_masked > 0.0 {
        if masked == 0 {
            return Err(Error::Contract("masked loss requested but the mask is empty".into()));
        }
        let m = tape.constant(mask.clone());
        let l = weighted_depth_loss(tape, pred, gt, Some(m), masked, cfg.beta_normal)?;
        terms.push(tape.scale(l, T::from_f64_lossy(cfg.alpha_masked)));
    }
    if cfg.beta_unmasked > 0.0 {
        let l = weighted_depth_loss(tape, pred, gt, None, h * w, cfg.beta_normal)?;
        terms.push(tape.scale(l, T::from_f64_lossy(cfg.beta_unmasked)));
    }
    match terms[..] {
        [] => {
            let zero = tape.constant(Tensor::scalar(T::zero()));
            let p = tape.sum(pred);
            let p = tape.scale(p, T::zero());
            tape.add(zero, p)
        }
        [only] => Ok(only),
        [a, b] => tape.add(a, b),
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(&[h, w], |i| f(i / w, i % w))
    }

    #[test]
    fn gradients_of_constant_and_ramp() {
        let mut tape = Tape::new();
        let c = tape.constant(map(4, 5, |_, _| 2.0));
        let (gh, gw) = depth_gradients(&mut tape, c).unwrap();
        assert!(tape.value(gh).data().iter().chain(tape.value(gw).data()).all(|&v| v == 0.0));

        let ramp = tape.constant(map(4, 5, |_, w| w as f64));
        let (gh, gw) = depth_gradients(&mut tape, ramp).unwrap();
        assert!(tape.value(gh).data().iter().all(|&v| v == 0.0));
        for r in 0..4 {
            for c in 0..5 {
                let want = if c == 4 { 0.0 } else { 1.0 };
                assert_eq!(tape.value(gw).at(&[r, c]), want);
            }
        }
    }

    #[test]
    fn normals_flat_and_sloped() {
        let mut tape = Tape::new();
        let c = tape.constant(map(3, 3, |_, _| 1.0));
        let n = normal_from_depth(&mut tape, c).unwrap();
        for px in tape.value(n).data().chunks(3) {
            assert!((px[2].abs() - 1.0).abs() < 1e-7 && px[0] == 0.0 && px[1] == 0.0);
        }
        let ramp = tape.constant(map(3, 4, |_, w| w as f64));
        let n = normal_from_depth(&mut tape, ramp).unwrap();
        let v = tape.value(n);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((v.at(&[1, 1, 0]).abs() - s).abs() < 1e-7);
        assert!((v.at(&[1, 1, 2]).abs() - s).abs() < 1e-7);
        assert_eq!(v.at(&[1, 1, 1]), 0.0);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let mut tape = Tape::new();
        let d = map(6, 7, |h, w| 0.5 + 0.1 * ((h * 3 + w) as f64).sin());
        let p = tape.constant(d.clone());
        let g = tape.constant(d);
        let l = depth_loss(&mut tape, p, g, &LossConfig::default()).unwrap();
        assert!(tape.value(l).item().abs() < 1e-7);
    }

    #[test]
    fn empty_mask_with_masked_weight_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::ones(&[3, 3]));
        let g = tape.constant(Tensor::ones(&[3, 3]));
        let mask = Tensor::zeros(&[3, 3]);
        assert!(matches!(
            final_loss(&mut tape, p, g, &mask, &LossConfig::default()),
            Err(Error::Contract(_))
        ));
        let cfg = LossConfig { alpha_masked: 0.0, ..Default::default() };
        assert!(final_loss(&mut tape, p, g, &mask, &cfg).is_ok());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::ones(&[3, 3]));
        let g = tape.constant(Tensor::ones(&[3, 4]));
        assert!(depth_loss(&mut tape, p, g, &LossConfig::default()).is_err());
    }
}
