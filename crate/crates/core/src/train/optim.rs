use crate::error::{dim_err, Result};
use crate::tensor::{Element, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW moments, shaped like the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One AdamW update: decoupled decay `p ← p − lr·wd·p`, then the
/// bias-corrected Adam step.
pub fn adamw_step<T: Element>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return dim_err(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return dim_err(format!(
                "parameter {i} has shape {:?}, gradient {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                state.m[i].shape()
            ));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let cast = T::from_f64_lossy;
    let (b1, b2, eps) = (cast(BETA1), cast(BETA2), cast(ADAM_EPS));
    let (one_b1, one_b2) = (cast(1.0 - BETA1), cast(1.0 - BETA2));
    let decay = cast(1.0 - lr * weight_decay);
    let (inv_c1, inv_c2, lr_t) = (cast(1.0 / c1), cast(1.0 / c2), cast(lr));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *p = *p * decay;
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m * inv_c1;
            let v_hat = *v * inv_c2;
            *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
