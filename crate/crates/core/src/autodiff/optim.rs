use super::tensor::Tensor;
use crate::error::{CastError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    pub buffers: Vec<Vec<f32>>,
}

impl SgdState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        SgdState {
            buffers: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One SGD step with heavy-ball momentum and decoupled weight decay:
///
/// ```text
/// buf ← momentum · buf + g
/// p   ← p − lr · buf − lr · weight_decay · p
/// ```
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut SgdState,
    cfg: &SgdConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(CastError::InvalidArgument(format!(
            "sgd_step got {} params but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if !(cfg.lr > 0.0) {
        return Err(CastError::InvalidArgument(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if state.buffers.is_empty() {
        *state = SgdState::zeros_like(params);
    }
    if state.buffers.len() != params.len() {
        return Err(CastError::InvalidArgument(format!(
            "optimizer state holds {} buffers for {} params",
            state.buffers.len(),
            params.len()
        )));
    }
    for ((p, g), buf) in params.iter_mut().zip(grads).zip(state.buffers.iter_mut()) {
        if p.shape() != g.shape() || buf.len() != p.numel() {
            return Err(CastError::shape(
                "sgd_step",
                format!("param {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        let mut next = p.to_vec();
        for ((w, &gi), b) in next.iter_mut().zip(g.data()).zip(buf.iter_mut()) {
            *b = cfg.momentum * *b + gi;
            *w = *w - cfg.lr * *b - cfg.lr * cfg.weight_decay * *w;
        }
        *p = Tensor::new(p.shape(), next)?;
    }
    Ok(())
}
