//! Grad-CAM grounding IoU and the backgrounds robustness table.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cast_loss::{grad_cam, mask_key, AlphaMode, AttentionTarget};
use crate::autodiff::Tensor;
use crate::crop::{apply_crop_image, make_view_pair, CropSpec, ViewConfig, ViewPair};
use crate::image::Image;
use crate::data::{compose_variant, LabeledScene, ScenePool, Variant};
use crate::encoder::{extract_features, forward, EncoderConfig, LinearProbe, ParamSet};
use crate::error::{CastError, Result};

pub const HISTOGRAM_BINS: usize = 20;

/// Cells whose max-normalised value is at least 0.5; a map without a
/// positive maximum yields all zeros.
pub fn binarize(map: &[f32]) -> Vec<u8> {
    let max = map.iter().copied().fold(0.0f32, f32::max);
    if !(max > 0.0) {
        return vec![0; map.len()];
    }
    map.iter().map(|&v| (v / max >= 0.5) as u8).collect()
}

/// Intersection over union, flagged when both grids are empty (IoU 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Iou {
    pub value: f64,
    pub both_empty: bool,
}

pub fn iou(a: &[u8], b: &[u8]) -> Result<Iou> {
    if a.len() != b.len() {
        return Err(CastError::shape("iou", format!("{} vs {} cells", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x != 0 && y != 0) as usize;
        union += (x != 0 || y != 0) as usize;
    }
    Ok(if union == 0 {
        Iou { value: 0.0, both_empty: true }
    } else {
        Iou { value: inter as f64 / union as f64, both_empty: false }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingReport {
    /// Per-sample IoU, `None` where the sample was skipped.
    pub per_sample: Vec<Option<Iou>>,
    pub ious: Vec<f64>,
    pub mean_iou: f64,
    pub histogram: [usize; HISTOGRAM_BINS],
    pub both_empty: usize,
    pub skipped: usize,
}

impl GroundingReport {
    pub fn from_samples(per_sample: Vec<Option<Iou>>) -> Self {
        let ious: Vec<f64> = per_sample.iter().flatten().map(|i| i.value).collect();
        let mut histogram = [0; HISTOGRAM_BINS];
        for &v in &ious {
            histogram[((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)] += 1;
        }
        let mean_iou = if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 };
        GroundingReport {
            both_empty: per_sample.iter().flatten().filter(|i| i.both_empty).count(),
            skipped: per_sample.iter().filter(|i| i.is_none()).count(),
            per_sample,
            ious,
            mean_iou,
            histogram,
        }
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "sample,iou,both_empty")?;
        for (i, s) in self.per_sample.iter().enumerate() {
            match s {
                Some(v) => writeln!(w, "{i},{:.6},{}", v.value, v.both_empty as u8)?,
                None => writeln!(w, "{i},,skipped")?,
            }
        }
        Ok(())
    }

    pub fn write_histogram_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "bin_start,bin_end,count")?;
        for (b, count) in self.histogram.iter().enumerate() {
            let lo = b as f64 / HISTOGRAM_BINS as f64;
            writeln!(w, "{lo:.2},{:.2},{count}", lo + 1.0 / HISTOGRAM_BINS as f64)?;
        }
        Ok(())
    }

    pub fn summary(&self, label: &str) -> String {
        format!(
            "{label}: mean IoU {:.4} over {} samples ({} both-empty, {} skipped)",
            self.mean_iou,
            self.ious.len(),
            self.both_empty,
            self.skipped
        )
    }
}

/// Per-sample RNG seed of evaluation sample `index`.
pub fn eval_sample_seed(eval_seed: u64, index: usize) -> u64 {
    crate::data::scene_seed(eval_seed ^ 0x6576_616c, index as u64)
}

/// Grounding IoU for any source of Grad-CAM maps. For every scene a view
/// pair is drawn from its own seed, `cam` maps it to grid values, and the
/// binarized map is compared with the query target thresholded at 0.5.
pub fn grounding_eval_with<F>(
    scenes: &[LabeledScene],
    views: &ViewConfig,
    grid: usize,
    eval_seed: u64,
    cam: F,
) -> Result<GroundingReport>
where
    F: Fn(&ViewPair) -> Result<Vec<f32>> + Sync,
{
    if scenes.is_empty() {
        return Err(CastError::EmptyDataset);
    }
    let per_sample = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(eval_sample_seed(eval_seed, i));
            let pair = match make_view_pair(&s.image, &s.mask, views, &mut rng) {
                Ok(p) => p,
                Err(CastError::DegenerateMask { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let target = AttentionTarget::from_mask(&pair.query_mask, grid)?;
            let target_bits: Vec<u8> = target.values.iter().map(|&v| (v >= 0.5) as u8).collect();
            let map = cam(&pair)?;
            iou(&binarize(&map), &target_bits).map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroundingReport::from_samples(per_sample))
}

/// Grad-CAM of the query encoder against the key encoder's masked-key
/// embedding, exactly as computed during training.
pub fn model_grad_cam(config: &EncoderConfig, query: &ParamSet, key: &ParamSet, pair: &ViewPair) -> Result<Vec<f32>> {
    let key = key.detached();
    let masked = mask_key(&pair.key, &pair.key_mask)?;
    let k_m = forward(config, &key, &masked.to_tensor())?.embedding;
    let out = forward(config, &query.as_leaves(), &pair.query.to_tensor())?;
    Ok(grad_cam(&out.embedding, &k_m, &out.conv5_acts, AlphaMode::FirstOrder)?.map.to_vec())
}

pub fn grounding_eval(
    config: &EncoderConfig,
    query: &ParamSet,
    key: &ParamSet,
    scenes: &[LabeledScene],
    views: &ViewConfig,
    eval_seed: u64,
) -> Result<GroundingReport> {
    grounding_eval_with(scenes, views, config.grid_size(), eval_seed, |pair| {
        model_grad_cam(config, query, key, pair)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundsTable {
    pub rows: Vec<(Variant, f64, usize)>,
}

impl BackgroundsTable {
    pub fn accuracy(&self, variant: Variant) -> f64 {
        self.rows.iter().find(|r| r.0 == variant).map_or(f64::NAN, |r| r.1)
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "variant,accuracy,count")?;
        for (v, acc, n) in &self.rows {
            writeln!(w, "{},{acc:.6},{n}", v.name())?;
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (v, acc, n) in &self.rows {
            let _ = writeln!(s, "{:<11} {:>6.2}%  (n={n})", v.name(), acc * 100.0);
        }
        s
    }
}

/// Renders every variant of every pool scene (variant randomness seeded per
/// scene and variant) and classifies it with a frozen-feature probe.
pub fn backgrounds_variants(pool: &ScenePool, seed: u64) -> Result<Vec<(Variant, Vec<LabeledScene>)>> {
    Variant::ALL
        .iter()
        .enumerate()
        .map(|(vi, &variant)| {
            let scenes = pool
                .scenes()
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(crate::data::scene_seed(seed.wrapping_add(vi as u64), i as u64));
                    compose_variant(s, pool, variant, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((variant, scenes))
        })
        .collect()
}

/// Whole image resized to the encoder's input resolution.
pub fn encoder_input(image: &Image, size: usize) -> Result<Tensor> {
    if image.height == size && image.width == size {
        return Ok(image.to_tensor());
    }
    Ok(apply_crop_image(image, &CropSpec::full(image.height, image.width), size)?.to_tensor())
}

pub fn backgrounds_eval(
    config: &EncoderConfig,
    params: &ParamSet,
    probe: &LinearProbe,
    pool: &ScenePool,
    seed: u64,
) -> Result<BackgroundsTable> {
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for (variant, scenes) in backgrounds_variants(pool, seed)? {
        let images = scenes
            .iter()
            .map(|s| encoder_input(&s.image, config.input_size))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = scenes.iter().map(|s| s.fg_class).collect();
        let features = extract_features(config, params, &images)?;
        rows.push((variant, probe.accuracy(&features, &labels) as f64, scenes.len()));
    }
    Ok(BackgroundsTable { rows })
}

pub fn write_file(path: &Path, f: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> Result<()>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}
