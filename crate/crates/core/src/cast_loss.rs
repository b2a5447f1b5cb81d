//! Attention-supervised contrastive objective.
//!
//! For each query crop the network importance of every last-stage channel is
//! the spatially summed gradient of `q · k_m` (query embedding against the
//! embedding of the saliency-masked key), and the Grad-CAM map is the ReLU of
//! the importance-weighted activation sum. The attention loss is the cosine
//! distance between that map and the query's saliency map downsampled to the
//! activation grid; it is added to InfoNCE with weight `lambda`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{grad, sgd_step, SgdConfig, SgdState, Tensor};
use crate::contrast::{info_nce, momentum_update, NegativeQueue};
use crate::crop::{make_view_pair, SaliencyMask, ViewConfig, ViewPair};
use crate::encoder::{forward, EncoderConfig, EncoderOutput, ParamSet};
use crate::error::{CastError, Result};
use crate::image::Image;

/// Which query saliency map the attention loss is aligned with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SupervisionMode {
    /// Every salient region inside the query crop.
    FullQuery,
    /// Only salient regions the key crop also covers.
    Intersection,
}

/// How the channel importances enter the attention-loss gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaMode {
    /// Differentiate through the importances (gradient of a gradient).
    SecondOrder,
    /// Treat the importances as constants.
    FirstOrder,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f32,
    pub tau: f32,
    pub supervision: SupervisionMode,
    pub eps: f32,
    pub alpha_mode: AlphaMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 3.0,
            tau: 0.07,
            supervision: SupervisionMode::FullQuery,
            eps: 1e-8,
            alpha_mode: AlphaMode::SecondOrder,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(CastError::config("lambda", format!("{} must be a finite value >= 0", self.lambda)));
        }
        if !(self.tau > 0.0) {
            return Err(CastError::config("tau", format!("{} must be > 0", self.tau)));
        }
        if !(self.eps > 0.0) {
            return Err(CastError::config("eps", format!("{} must be > 0", self.eps)));
        }
        Ok(())
    }
}

/// Zeroes every non-salient pixel of the key crop, per channel.
pub fn mask_key(image: &Image, mask: &SaliencyMask) -> Result<Image> {
    if image.height != mask.height || image.width != mask.width {
        return Err(CastError::shape(
            "mask_key",
            format!("image {}x{} vs mask {}x{}", image.height, image.width, mask.height, mask.width),
        ));
    }
    let mut out = image.clone();
    let plane = image.height * image.width;
    for c in 0..Image::CHANNELS {
        for (v, &m) in out.data[c * plane..(c + 1) * plane].iter_mut().zip(mask.bits()) {
            *v *= m as f32;
        }
    }
    Ok(out)
}

/// Saliency fraction of each activation-grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTarget {
    pub grid: usize,
    /// Row-major `grid × grid` values in `[0, 1]`.
    pub values: Vec<f32>,
}

impl AttentionTarget {
    /// Area-average downsampling of a mask to `grid × grid`.
    pub fn from_mask(mask: &SaliencyMask, grid: usize) -> Result<Self> {
        if grid == 0 || !mask.height.is_multiple_of(grid) || !mask.width.is_multiple_of(grid) {
            return Err(CastError::shape(
                "attention target",
                format!("{}x{} mask does not tile a {grid}x{grid} grid", mask.height, mask.width),
            ));
        }
        let (bh, bw) = (mask.height / grid, mask.width / grid);
        let mut values = vec![0.0f32; grid * grid];
        for gy in 0..grid {
            for gx in 0..grid {
                let mut count = 0u32;
                for y in gy * bh..(gy + 1) * bh {
                    for x in gx * bw..(gx + 1) * bw {
                        count += mask.get(y, x) as u32;
                    }
                }
                values[gy * grid + gx] = count as f32 / (bh * bw) as f32;
            }
        }
        Ok(AttentionTarget { grid, values })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.grid * self.grid], self.values.clone()).expect("grid layout")
    }
}

/// Non-negative Grad-CAM map over the activation grid.
#[derive(Clone, Debug)]
pub struct GradCamMap {
    pub grid: usize,
    /// Shape `[grid * grid]`; grad-tracking when built from a live graph.
    pub map: Tensor,
    /// Per-channel importances, shape `[1, C]`.
    pub alpha: Tensor,
}

/// Grad-CAM of the query encoder for matching the masked key.
///
/// `alpha_c = Σ_ij ∂(q · k_m) / ∂A[c,i,j]`, `G = ReLU(Σ_c alpha_c A[c])`.
/// With [`AlphaMode::SecondOrder`] the importances stay differentiable
/// w.r.t. every parameter that produced `q` and `conv5_acts`.
pub fn grad_cam(q: &Tensor, k_m: &Tensor, conv5_acts: &Tensor, mode: AlphaMode) -> Result<GradCamMap> {
    let s = conv5_acts.shape();
    if s.len() != 4 || s[0] != 1 || s[2] != s[3] {
        return Err(CastError::shape("grad_cam", format!("expected [1,C,g,g] activations, got {:?}", s)));
    }
    let (c, g) = (s[1], s[2]);
    let score = q.dot(&k_m.detach())?;
    let build = mode == AlphaMode::SecondOrder;
    let d_acts = grad(&score, &[conv5_acts], build)?.remove(0);
    let mut alpha = d_acts.spatial_sum()?;
    if !build {
        alpha = alpha.detach();
    }
    let weighted = alpha.matmul(&conv5_acts.reshape(&[c, g * g])?)?;
    let map = weighted.reshape(&[g * g])?.relu();
    Ok(GradCamMap { grid: g, map, alpha })
}

/// `1 − cos(G, target)` with norms floored at `eps`; a zero map scores 1.
pub fn attention_loss(cam: &GradCamMap, target: &AttentionTarget, eps: f32) -> Result<Tensor> {
    if cam.grid != target.grid {
        return Err(CastError::shape(
            "attention_loss",
            format!("Grad-CAM grid {} vs target grid {}", cam.grid, target.grid),
        ));
    }
    let t = target.to_tensor();
    let t_norm = (target.values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() as f32).max(eps);
    let g_norm = cam.map.mul(&cam.map)?.sum().clamp_min(eps * eps).sqrt();
    let cos = cam.map.dot(&t)?.div(&g_norm.scale(t_norm))?;
    Ok(cos.neg().add_scalar(1.0))
}

/// Everything a training step mutates.
#[derive(Clone, Debug)]
pub struct CastState {
    pub query: ParamSet,
    pub key: ParamSet,
    pub queue: NegativeQueue,
    pub sgd: SgdState,
}

impl CastState {
    /// Key network initialised as an exact copy of the query network.
    pub fn new(query: ParamSet, queue_capacity: usize, embedding_dim: usize) -> Result<Self> {
        Ok(CastState {
            key: query.clone(),
            sgd: SgdState::zeros_like(query.tensors()),
            query,
            queue: NegativeQueue::new(queue_capacity, embedding_dim)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct StepConfig {
    pub encoder: EncoderConfig,
    pub views: ViewConfig,
    pub loss: LossConfig,
    pub sgd: SgdConfig,
    /// Momentum coefficient of the key network.
    pub momentum: f32,
}

/// Key-side inputs of one sample: crops plus the momentum-encoder
/// embeddings, all constants for the query-side loss.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub views: ViewPair,
    pub key: Tensor,
    pub masked_key: Option<Tensor>,
}

/// Crops one scene and runs the key network on the key and masked key.
pub fn prepare_sample(
    image: &Image,
    mask: &SaliencyMask,
    seed: u64,
    key_params: &ParamSet,
    cfg: &StepConfig,
) -> Result<PreparedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = make_view_pair(image, mask, &cfg.views, &mut rng)?;
    let key_params = key_params.detached();
    let key = forward(&cfg.encoder, &key_params, &views.key.to_tensor())?.embedding.detach();
    let masked_key = if cfg.loss.lambda > 0.0 {
        let x_km = mask_key(&views.key, &views.key_mask)?;
        Some(forward(&cfg.encoder, &key_params, &x_km.to_tensor())?.embedding.detach())
    } else {
        None
    };
    Ok(PreparedSample {
        views,
        key,
        masked_key,
    })
}

/// Query-side losses of one prepared sample.
#[derive(Clone, Debug)]
pub struct SampleLoss {
    pub contrastive: Tensor,
    pub attention: Option<Tensor>,
    pub total: Tensor,
    pub query: EncoderOutput,
    pub cam: Option<GradCamMap>,
}

pub fn supervision_target(views: &ViewPair, mode: SupervisionMode, grid: usize) -> Result<AttentionTarget> {
    let mask = match mode {
        SupervisionMode::FullQuery => &views.query_mask,
        SupervisionMode::Intersection => &views.query_mask_shared,
    };
    AttentionTarget::from_mask(mask, grid)
}

/// `L_cont + lambda · L_att` for one sample; the attention branch is skipped
/// entirely when `lambda` is zero.
pub fn sample_loss(
    query_params: &ParamSet,
    sample: &PreparedSample,
    queue: &NegativeQueue,
    cfg: &StepConfig,
) -> Result<SampleLoss> {
    let out = forward(&cfg.encoder, query_params, &sample.views.query.to_tensor())?;
    // an empty queue leaves only the positive logit: the loss is identically 0
    let contrastive = if queue.is_empty() {
        Tensor::scalar(0.0)
    } else {
        info_nce(&out.embedding, &sample.key, queue, cfg.loss.tau)?
    };
    let (attention, cam, total) = match (&sample.masked_key, cfg.loss.lambda > 0.0) {
        (Some(km), true) => {
            let cam = grad_cam(&out.embedding, km, &out.conv5_acts, cfg.loss.alpha_mode)?;
            let target = supervision_target(&sample.views, cfg.loss.supervision, cfg.encoder.grid_size())?;
            let att = attention_loss(&cam, &target, cfg.loss.eps)?;
            let total = contrastive.add(&att.scale(cfg.loss.lambda))?;
            (Some(att), Some(cam), total)
        }
        _ => (None, None, contrastive.clone()),
    };
    Ok(SampleLoss {
        contrastive,
        attention,
        total,
        query: out,
        cam,
    })
}

/// Batch-mean losses and query-parameter gradients of one step.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub l_cont: f32,
    pub l_att: f32,
    pub total: f32,
    pub grads: Vec<Tensor>,
    /// Unmasked key embeddings of the used samples, in batch order.
    pub keys: Vec<Tensor>,
    pub used: usize,
    pub skipped: usize,
}

/// Per-sample values, reduced in batch order so results do not depend on
/// thread scheduling.
pub fn compute_gradients(
    batch: &[(&Image, &SaliencyMask)],
    seeds: &[u64],
    state: &CastState,
    cfg: &StepConfig,
) -> Result<StepGradients> {
    if batch.len() != seeds.len() {
        return Err(CastError::InvalidArgument(format!(
            "{} samples but {} seeds",
            batch.len(),
            seeds.len()
        )));
    }
    type Out = Option<(f32, f32, f32, Vec<Tensor>, Tensor)>;
    let per_sample: Vec<Result<Out>> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(&(image, mask), &seed)| {
            let sample = match prepare_sample(image, mask, seed, &state.key, cfg) {
                Ok(s) => s,
                Err(CastError::DegenerateMask { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let leaves = state.query.as_leaves();
            let loss = sample_loss(&leaves, &sample, &state.queue, cfg)?;
            let refs: Vec<&Tensor> = leaves.tensors().iter().collect();
            let grads = if loss.total.requires_grad() {
                grad(&loss.total, &refs, false)?
            } else {
                refs.iter().map(|p| Tensor::zeros(p.shape())).collect()
            };
            let att = loss.attention.as_ref().map(|t| t.item()).transpose()?.unwrap_or(0.0);
            Ok(Some((loss.contrastive.item()?, att, loss.total.item()?, grads, sample.key)))
        })
        .collect();

    let mut sums = (0.0f64, 0.0f64, 0.0f64);
    let mut acc: Option<Vec<Vec<f32>>> = None;
    let mut keys = Vec::new();
    let mut skipped = 0;
    for r in per_sample {
        let Some((lc, la, lt, grads, key)) = r? else {
            skipped += 1;
            continue;
        };
        sums.0 += lc as f64;
        sums.1 += la as f64;
        sums.2 += lt as f64;
        match acc.as_mut() {
            None => acc = Some(grads.iter().map(Tensor::to_vec).collect()),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
        keys.push(key);
    }
    let used = keys.len();
    let scale = if used > 0 { 1.0 / used as f32 } else { 0.0 };
    let grads = match acc {
        Some(acc) => acc
            .into_iter()
            .zip(state.query.tensors())
            .map(|(a, p)| Tensor::new(p.shape(), a.into_iter().map(|v| v * scale).collect()))
            .collect::<Result<Vec<_>>>()?,
        None => state.query.tensors().iter().map(|p| Tensor::zeros(p.shape())).collect(),
    };
    let n = used.max(1) as f64;
    Ok(StepGradients {
        l_cont: (sums.0 / n) as f32,
        l_att: (sums.1 / n) as f32,
        total: (sums.2 / n) as f32,
        grads,
        keys,
        used,
        skipped,
    })
}

/// One full training step: losses and gradients, SGD on the query network,
/// momentum update of the key network, then the unmasked keys enter the
/// queue. Samples whose mask cannot satisfy the crop constraint are skipped.
pub fn cast_step(
    batch: &[(&Image, &SaliencyMask)],
    seeds: &[u64],
    state: &mut CastState,
    cfg: &StepConfig,
) -> Result<StepGradients> {
    let step = compute_gradients(batch, seeds, state, cfg)?;
    if step.used == 0 {
        log::warn!("every sample in the batch was skipped; no update applied");
        return Ok(step);
    }
    sgd_step(state.query.tensors_mut(), &step.grads, &mut state.sgd, &cfg.sgd)?;
    momentum_update(&mut state.key, &state.query, cfg.momentum)?;
    state.queue.enqueue(&step.keys)?;
    Ok(step)
}
