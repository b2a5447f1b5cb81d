//! Small strided convolutional encoder exposing both the unit-norm embedding
//! and the activation map of its last convolution stage.

mod probe;

pub use probe::{extract_features, linear_probe_train, train_probe, LinearProbe};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{conv2d, Tensor};
use crate::error::{CastError, Result};

/// Guard for normalizing a zero embedding.
pub const EMBED_EPS: f32 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Side of the square input in pixels.
    pub input_size: usize,
    /// Output channels of each stride-2 stage.
    pub channels: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: 64,
            channels: vec![16, 32, 64],
            embedding_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(CastError::config("channels", "need at least one stage of positive width"));
        }
        if self.embedding_dim == 0 {
            return Err(CastError::config("embedding_dim", "must be positive"));
        }
        let factor = 1usize << self.channels.len();
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return Err(CastError::config(
                "input_size",
                format!("{} is not divisible by 2^{}", self.input_size, self.channels.len()),
            ));
        }
        Ok(())
    }

    /// Side of the last convolution grid.
    pub fn grid_size(&self) -> usize {
        self.input_size >> self.channels.len()
    }

    pub fn conv5_channels(&self) -> usize {
        *self.channels.last().expect("validated config has stages")
    }
}

/// Ordered named parameter tensors.
#[derive(Clone, Debug)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        let (names, tensors) = entries.into_iter().unzip();
        ParamSet { names, tensors }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Fresh grad-tracking leaves for one differentiable forward pass.
    pub fn as_leaves(&self) -> ParamSet {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::requires_grad_leaf).collect(),
        }
    }

    pub fn detached(&self) -> ParamSet {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::detach).collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Exact equality of names, shapes and value bits.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.same_layout(other)
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

fn conv_weight(i: usize) -> String {
    format!("conv{i}.weight")
}

fn conv_bias(i: usize) -> String {
    format!("conv{i}.bias")
}

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// Kaiming-uniform weights (variance `2 / fan_in`) and zero biases.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut in_ch = 3;
    for (i, &out_ch) in config.channels.iter().enumerate() {
        let fan_in = in_ch * 9;
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let w: Vec<f32> = (0..out_ch * fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
        entries.push((conv_weight(i), Tensor::new(&[out_ch, in_ch, 3, 3], w)?));
        entries.push((conv_bias(i), Tensor::zeros(&[out_ch])));
        in_ch = out_ch;
    }
    let bound = (6.0 / in_ch as f64).sqrt() as f32;
    let d = config.embedding_dim;
    let w: Vec<f32> = (0..in_ch * d).map(|_| rng.gen_range(-bound..bound)).collect();
    entries.push((HEAD_WEIGHT.to_string(), Tensor::new(&[in_ch, d], w)?));
    entries.push((HEAD_BIAS.to_string(), Tensor::zeros(&[d])));
    Ok(ParamSet::new(entries))
}

/// Embedding and last-stage activations of one image.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Unit-norm embedding, shape `[embedding_dim]`.
    pub embedding: Tensor,
    /// Post-ReLU activations of the last stage, shape `[1, C, grid, grid]`.
    pub conv5_acts: Tensor,
    /// Global-average-pooled `conv5_acts`, shape `[1, C]`.
    pub pooled: Tensor,
}

/// Maps `[0,1]` pixels to `[-1,1]` (mean 0.5, std 0.5 per channel).
pub fn normalize_input(image: &Tensor) -> Tensor {
    image.scale(2.0).add_scalar(-1.0)
}

fn param<'a>(params: &'a ParamSet, name: &str) -> Result<&'a Tensor> {
    params
        .get(name)
        .ok_or_else(|| CastError::InvalidArgument(format!("parameter set lacks `{name}`")))
}

/// Runs the encoder on a `[3, H, W]` image with values in `[0,1]`.
///
/// Graph nodes are recorded for every grad-tracking tensor in `params`.
pub fn forward(config: &EncoderConfig, params: &ParamSet, image: &Tensor) -> Result<EncoderOutput> {
    let s = config.input_size;
    if image.shape() != [3, s, s] {
        return Err(CastError::shape(
            "encoder",
            format!("expected image [3, {s}, {s}], got {:?}", image.shape()),
        ));
    }
    let mut x = normalize_input(&image.reshape(&[1, 3, s, s])?);
    for i in 0..config.channels.len() {
        let w = param(params, &conv_weight(i))?;
        let b = param(params, &conv_bias(i))?;
        let y = conv2d(&x, w, 2, 1)?;
        let sh = y.shape().to_vec();
        x = y.add(&b.channel_broadcast(sh[0], sh[2], sh[3])?)?.relu();
    }
    let conv5_acts = x;
    let pooled = conv5_acts.global_avg_pool()?;
    let w = param(params, HEAD_WEIGHT)?;
    let b = param(params, HEAD_BIAS)?;
    let d = config.embedding_dim;
    let projected = pooled.matmul(w)?.add(&b.reshape(&[1, d])?)?;
    let embedding = projected.reshape(&[d])?.l2_normalize(EMBED_EPS)?;
    Ok(EncoderOutput {
        embedding,
        conv5_acts,
        pooled,
    })
}
