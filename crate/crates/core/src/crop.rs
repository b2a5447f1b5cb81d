//! Saliency-constrained random resized cropping.
//!
//! A crop is accepted only if it covers at least `ceil(phi · A_M)` salient
//! pixels, where `A_M` is the total salient area of the source mask. The same
//! crop (and flip) is applied to the image and to its mask so that the query
//! and key views come with aligned saliency maps.

use rand::Rng;

use crate::error::{CastError, Result};
use crate::image::Image;

/// Binary `height × width` saliency map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SaliencyMask {
    pub height: usize,
    pub width: usize,
    bits: Vec<u8>,
}

impl SaliencyMask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(CastError::shape(
                "mask",
                format!("{height}x{width} mask needs {} values, got {}", height * width, bits.len()),
            ));
        }
        if let Some(&v) = bits.iter().find(|&&b| b > 1) {
            return Err(CastError::InvalidArgument(format!("mask value {v} is not binary")));
        }
        Ok(SaliencyMask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        SaliencyMask {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x) as u8);
            }
        }
        SaliencyMask { height, width, bits }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.width + x] = on as u8;
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Salient area `A_M`.
    pub fn area(&self) -> u32 {
        self.bits.iter().map(|&b| b as u32).sum()
    }

    /// Tight crop around all salient pixels, if any.
    pub fn bounding_box(&self) -> Option<CropSpec> {
        let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    y0 = y0.min(y);
                    x0 = x0.min(x);
                    y1 = y1.max(y);
                    x1 = x1.max(x);
                }
            }
        }
        (y0 != usize::MAX).then(|| CropSpec::new(y0, x0, y1 - y0 + 1, x1 - x0 + 1, false))
    }

    /// Keeps only salient pixels inside `crop`'s rectangle.
    pub fn restricted_to(&self, crop: &CropSpec) -> SaliencyMask {
        SaliencyMask::from_fn(self.height, self.width, |y, x| {
            self.get(y, x)
                && (crop.top..crop.top + crop.crop_h).contains(&y)
                && (crop.left..crop.left + crop.crop_w).contains(&x)
        })
    }

    /// Mask values as `0.0 / 1.0` floats.
    pub fn to_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }
}

/// Axis-aligned crop rectangle plus horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CropSpec {
    pub top: usize,
    pub left: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub hflip: bool,
}

impl CropSpec {
    pub fn new(top: usize, left: usize, crop_h: usize, crop_w: usize, hflip: bool) -> Self {
        CropSpec {
            top,
            left,
            crop_h,
            crop_w,
            hflip,
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        CropSpec::new(0, 0, height, width, false)
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        if self.crop_h == 0
            || self.crop_w == 0
            || self.top + self.crop_h > height
            || self.left + self.crop_w > width
        {
            return Err(CastError::CropOutOfBounds {
                top: self.top,
                left: self.left,
                h: self.crop_h,
                w: self.crop_w,
                height,
                width,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropConstraint {
    /// Area-overlap threshold in `[0, 1)`.
    pub phi: f64,
    /// Crop area as a fraction of the image area.
    pub scale_range: (f64, f64),
    /// Width / height ratio range, sampled log-uniformly.
    pub aspect_range: (f64, f64),
}

impl Default for CropConstraint {
    fn default() -> Self {
        CropConstraint {
            phi: 0.2,
            scale_range: (0.2, 1.0),
            aspect_range: (3.0 / 4.0, 4.0 / 3.0),
        }
    }
}

impl CropConstraint {
    pub fn with_phi(phi: f64) -> Self {
        CropConstraint {
            phi,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.phi) {
            return Err(CastError::config("phi", format!("{} is outside [0, 1)", self.phi)));
        }
        let (s0, s1) = self.scale_range;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) {
            return Err(CastError::config("scale_range", format!("({s0}, {s1}) is not a range in (0, 1]")));
        }
        let (a0, a1) = self.aspect_range;
        if !(a0 > 0.0 && a0 <= a1) {
            return Err(CastError::config("aspect_range", format!("({a0}, {a1}) is not a positive range")));
        }
        Ok(())
    }

    /// Minimum salient pixel count a crop must cover: `ceil(phi · A_M)`.
    pub fn required_overlap(&self, salient_area: u32) -> u32 {
        if self.phi <= 0.0 {
            return 0;
        }
        // tolerance absorbs binary representation error of decimal phi
        (self.phi * salient_area as f64 - 1e-9).ceil().max(0.0) as u32
    }

    /// Whether `crop` covers enough of the salient area to be accepted.
    pub fn accepts(&self, table: &IntegralImage, crop: &CropSpec) -> bool {
        table.rect_sum(crop.top, crop.left, crop.crop_h, crop.crop_w) >= self.required_overlap(table.total())
    }
}

/// Summed-area table: `S[i][j]` is the mask sum over `[0, i) × [0, j)`.
#[derive(Clone, Debug)]
pub struct IntegralImage {
    height: usize,
    width: usize,
    table: Vec<u32>,
}

impl IntegralImage {
    pub fn new(mask: &SaliencyMask) -> Self {
        let (h, w) = (mask.height, mask.width);
        let stride = w + 1;
        let mut table = vec![0u32; (h + 1) * stride];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += mask.get(y, x) as u32;
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
            }
        }
        IntegralImage {
            height: h,
            width: w,
            table,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> u32 {
        self.table[i * (self.width + 1) + j]
    }

    /// Sum over rows `[top, top+h)` and columns `[left, left+w)`.
    #[inline]
    pub fn rect_sum(&self, top: usize, left: usize, h: usize, w: usize) -> u32 {
        let (b, r) = (top + h, left + w);
        self.at(b, r) + self.at(top, left) - self.at(top, r) - self.at(b, left)
    }

    pub fn total(&self) -> u32 {
        self.at(self.height, self.width)
    }
}

pub fn integral_image(mask: &SaliencyMask) -> IntegralImage {
    IntegralImage::new(mask)
}

/// Number of salient pixels inside `crop`.
pub fn overlap_area(crop: &CropSpec, table: &IntegralImage) -> Result<u32> {
    crop.check_bounds(table.height(), table.width())?;
    Ok(table.rect_sum(crop.top, crop.left, crop.crop_h, crop.crop_w))
}

/// Outcome of constrained sampling with its bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampledCrop {
    pub crop: CropSpec,
    pub attempts: usize,
    /// True when no candidate passed within the attempt budget.
    pub fallback: bool,
}

pub const DEFAULT_MAX_ATTEMPTS: usize = 50;

/// Draws one random-resized-crop candidate, or `None` if the drawn size does
/// not fit the image.
fn draw_candidate<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    c: &CropConstraint,
) -> Option<CropSpec> {
    let area = (height * width) as f64;
    let scale = if c.scale_range.0 < c.scale_range.1 {
        rng.gen_range(c.scale_range.0..c.scale_range.1)
    } else {
        c.scale_range.0
    };
    let (la, lb) = (c.aspect_range.0.ln(), c.aspect_range.1.ln());
    let ratio = if la < lb { rng.gen_range(la..lb).exp() } else { c.aspect_range.0 };
    let w = (area * scale * ratio).sqrt().round() as usize;
    let h = (area * scale / ratio).sqrt().round() as usize;
    let hflip = rng.gen_bool(0.5);
    if w == 0 || h == 0 || w > width || h > height {
        return None;
    }
    let top = rng.gen_range(0..=height - h);
    let left = rng.gen_range(0..=width - w);
    Some(CropSpec::new(top, left, h, w, hflip))
}

/// Rejection-samples a crop covering at least `ceil(phi · A_M)` salient
/// pixels; after `max_attempts` failures returns the salient bounding box.
pub fn sample_crop_detailed<R: Rng + ?Sized>(
    table: &IntegralImage,
    constraint: &CropConstraint,
    rng: &mut R,
    max_attempts: usize,
) -> Result<SampledCrop> {
    let (h, w) = (table.height(), table.width());
    let salient = table.total();
    if constraint.phi > 0.0 && salient == 0 {
        return Err(CastError::DegenerateMask {
            phi: constraint.phi as f32,
        });
    }
    for attempt in 1..=max_attempts {
        if let Some(crop) = draw_candidate(rng, h, w, constraint) {
            if constraint.accepts(table, &crop) {
                return Ok(SampledCrop {
                    crop,
                    attempts: attempt,
                    fallback: false,
                });
            }
        }
    }
    let hflip = rng.gen_bool(0.5);
    let crop = bounding_box_of(table).unwrap_or_else(|| CropSpec::full(h, w));
    Ok(SampledCrop {
        crop: CropSpec { hflip, ..crop },
        attempts: max_attempts,
        fallback: true,
    })
}

fn bounding_box_of(table: &IntegralImage) -> Option<CropSpec> {
    if table.total() == 0 {
        return None;
    }
    let (h, w) = (table.height(), table.width());
    let row_has = |y: usize| table.rect_sum(y, 0, 1, w) > 0;
    let col_has = |x: usize| table.rect_sum(0, x, h, 1) > 0;
    let y0 = (0..h).find(|&y| row_has(y))?;
    let y1 = (0..h).rev().find(|&y| row_has(y))?;
    let x0 = (0..w).find(|&x| col_has(x))?;
    let x1 = (0..w).rev().find(|&x| col_has(x))?;
    Some(CropSpec::new(y0, x0, y1 - y0 + 1, x1 - x0 + 1, false))
}

pub fn sample_constrained_crop<R: Rng + ?Sized>(
    mask: &SaliencyMask,
    constraint: &CropConstraint,
    rng: &mut R,
    max_attempts: usize,
) -> Result<CropSpec> {
    let table = IntegralImage::new(mask);
    sample_crop_detailed(&table, constraint, rng, max_attempts).map(|s| s.crop)
}

/// Continuous source coordinate (relative to the crop origin) sampled by
/// output cell `o` when resizing `len` source pixels to `out` cells.
#[inline]
fn source_coord(o: usize, len: usize, out: usize) -> f64 {
    (o as f64 + 0.5) * len as f64 / out as f64 - 0.5
}

/// Source index read by nearest-neighbour resizing: the integer closest to
/// [`source_coord`], which is also the heaviest bilinear tap.
#[inline]
pub fn nearest_source(o: usize, len: usize, out: usize) -> usize {
    let u = source_coord(o, len, out) + 0.5;
    (u.floor().max(0.0) as usize).min(len - 1)
}

#[inline]
fn flip_index(o: usize, out: usize, hflip: bool) -> usize {
    if hflip {
        out - 1 - o
    } else {
        o
    }
}

fn bilinear_taps(o: usize, len: usize, out: usize) -> (usize, usize, f32) {
    let u = source_coord(o, len, out).clamp(0.0, (len - 1) as f64);
    let i0 = u.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, (u - i0 as f64) as f32)
}

/// Bilinear crop-and-resize of an image to `out_size × out_size`.
pub fn apply_crop_image(image: &Image, crop: &CropSpec, out_size: usize) -> Result<Image> {
    crop.check_bounds(image.height, image.width)?;
    let mut out = Image::filled(out_size, out_size, 0.0);
    let rows: Vec<_> = (0..out_size).map(|o| bilinear_taps(o, crop.crop_h, out_size)).collect();
    let cols: Vec<_> = (0..out_size)
        .map(|o| bilinear_taps(flip_index(o, out_size, crop.hflip), crop.crop_w, out_size))
        .collect();
    for c in 0..Image::CHANNELS {
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let p = |y: usize, x: usize| image.get(c, crop.top + y, crop.left + x);
                let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                let bottom = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                out.set(c, oy, ox, top + (bottom - top) * fy);
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour crop-and-resize of a mask; the result stays binary.
pub fn apply_crop_mask(mask: &SaliencyMask, crop: &CropSpec, out_size: usize) -> Result<SaliencyMask> {
    crop.check_bounds(mask.height, mask.width)?;
    let rows: Vec<usize> = (0..out_size).map(|o| nearest_source(o, crop.crop_h, out_size)).collect();
    let cols: Vec<usize> = (0..out_size)
        .map(|o| nearest_source(flip_index(o, out_size, crop.hflip), crop.crop_w, out_size))
        .collect();
    Ok(SaliencyMask::from_fn(out_size, out_size, |y, x| {
        mask.get(crop.top + rows[y], crop.left + cols[x])
    }))
}

/// Brightness and contrast jitter strengths; factors are drawn from
/// `[1 - s, 1 + s]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
}

impl Default for ColorJitter {
    fn default() -> Self {
        ColorJitter {
            brightness: 0.4,
            contrast: 0.4,
        }
    }
}

impl ColorJitter {
    pub fn apply<R: Rng + ?Sized>(&self, image: &mut Image, rng: &mut R) {
        let b = 1.0 + self.brightness * rng.gen_range(-1.0f32..=1.0);
        let c = 1.0 + self.contrast * rng.gen_range(-1.0f32..=1.0);
        let mean = image.data.iter().map(|&v| v as f64).sum::<f64>() as f32 / image.data.len() as f32 * b;
        for v in &mut image.data {
            *v = ((*v * b - mean) * c + mean).clamp(0.0, 1.0);
        }
    }
}

/// Query and key views of one scene with their cropped saliency maps.
#[derive(Clone, Debug)]
pub struct ViewPair {
    pub query: Image,
    /// All salient regions inside the query crop.
    pub query_mask: SaliencyMask,
    /// Salient regions inside the query crop that the key crop also covers.
    pub query_mask_shared: SaliencyMask,
    pub key: Image,
    pub key_mask: SaliencyMask,
    pub query_crop: CropSpec,
    pub key_crop: CropSpec,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewConfig {
    pub constraint: CropConstraint,
    pub jitter: ColorJitter,
    pub out_size: usize,
    pub max_attempts: usize,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig {
            constraint: CropConstraint::default(),
            jitter: ColorJitter::default(),
            out_size: 64,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }
}

/// Two independent constrained crops, flips and colour jitters of one
/// scene. Masks go through the same geometry but never through jitter.
pub fn make_view_pair<R: Rng + ?Sized>(
    image: &Image,
    mask: &SaliencyMask,
    cfg: &ViewConfig,
    rng: &mut R,
) -> Result<ViewPair> {
    if image.height != mask.height || image.width != mask.width {
        return Err(CastError::shape(
            "view pair",
            format!(
                "image {}x{} vs mask {}x{}",
                image.height, image.width, mask.height, mask.width
            ),
        ));
    }
    let table = IntegralImage::new(mask);
    let q = sample_crop_detailed(&table, &cfg.constraint, rng, cfg.max_attempts)?.crop;
    let k = sample_crop_detailed(&table, &cfg.constraint, rng, cfg.max_attempts)?.crop;

    let mut query = apply_crop_image(image, &q, cfg.out_size)?;
    let mut key = apply_crop_image(image, &k, cfg.out_size)?;
    cfg.jitter.apply(&mut query, rng);
    cfg.jitter.apply(&mut key, rng);

    Ok(ViewPair {
        query,
        query_mask: apply_crop_mask(mask, &q, cfg.out_size)?,
        query_mask_shared: apply_crop_mask(&mask.restricted_to(&k), &q, cfg.out_size)?,
        key,
        key_mask: apply_crop_mask(mask, &k, cfg.out_size)?,
        query_crop: q,
        key_crop: k,
    })
}
