//! SGD with classical momentum: `v <- momentum * v + g`, `p <- p - lr * v`.

use crate::error::{Error, Result};
use crate::layer::{GradientSet, LayerSpec};
use crate::tensor::Tensor;

/// Hyperparameters for one optimiser instance.
#[derive(Debug, Clone, Copy)]
pub struct SgdParams {
    pub lr: f32,
    pub momentum: f32,
}

impl SgdParams {
    pub fn new(lr: f32, momentum: f32) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::config(format!(
                "learning rate must be > 0, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(Self { lr, momentum })
    }
}

/// One SGD step on a flat parameter tensor. `velocity` must be zero-initialised
/// on the first call and carried across steps. Rejects non-finite gradients.
pub fn sgd_step(
    params: &mut Tensor,
    velocity: &mut Tensor,
    grads: &Tensor,
    opt: SgdParams,
) -> Result<()> {
    if params.shape() != grads.shape() || params.shape() != velocity.shape() {
        return Err(Error::internal(format!(
            "sgd shape mismatch: params {:?}, grads {:?}, velocity {:?}",
            params.shape(),
            grads.shape(),
            velocity.shape()
        )));
    }
    if !grads.is_finite() {
        return Err(Error::Training(
            "non-finite gradient encountered".to_string(),
        ));
    }
    let (p, v, g) = (params.data_mut(), velocity, grads.data());
    for ((p_i, v_i), g_i) in p.iter_mut().zip(v.data_mut()).zip(g) {
        *v_i = opt.momentum * *v_i + g_i;
        *p_i -= opt.lr * *v_i;
    }
    Ok(())
}

/// Applies [`sgd_step`] to a layer's weight and bias with a matching
/// velocity [`GradientSet`].
pub fn sgd_step_layer(
    layer: &mut LayerSpec,
    velocity: &mut GradientSet,
    grads: &GradientSet,
    opt: SgdParams,
) -> Result<()> {
    if let (Some(p), Some(v), Some(g)) = (
        layer.weight.as_mut(),
        velocity.weight.as_mut(),
        grads.weight.as_ref(),
    ) {
        sgd_step(p, v, g, opt)?;
    }
    if let (Some(p), Some(v), Some(g)) = (
        layer.bias.as_mut(),
        velocity.bias.as_mut(),
        grads.bias.as_ref(),
    ) {
        sgd_step(p, v, g, opt)?;
    }
    Ok(())
}
