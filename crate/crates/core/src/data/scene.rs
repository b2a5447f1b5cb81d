use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crop::SaliencyMask;
use crate::error::{CastError, Result};
use crate::image::Image;

pub const NUM_FG_CLASSES: usize = 9;
pub const NUM_BG_CLASSES: usize = 9;
pub const DEFAULT_CANVAS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Triangle,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureFamily {
    Noise,
    Stripes,
    Gradient,
}

const FG_COLORS: [[f32; 3]; 3] = [[0.95, 0.1, 0.1], [0.1, 0.9, 0.2], [0.15, 0.35, 1.0]];

const BG_PALETTES: [[[f32; 3]; 2]; 3] = [
    [[0.42, 0.33, 0.25], [0.62, 0.52, 0.38]],
    [[0.35, 0.4, 0.48], [0.55, 0.58, 0.62]],
    [[0.38, 0.42, 0.28], [0.56, 0.6, 0.44]],
];

pub fn fg_shape(class: usize) -> ShapeKind {
    [ShapeKind::Circle, ShapeKind::Triangle, ShapeKind::Square][class / 3]
}

pub fn fg_color(class: usize) -> [f32; 3] {
    FG_COLORS[class % 3]
}

pub fn bg_family(class: usize) -> TextureFamily {
    [TextureFamily::Noise, TextureFamily::Stripes, TextureFamily::Gradient][class / 3]
}

pub fn bg_palette(class: usize) -> [[f32; 3]; 2] {
    BG_PALETTES[class % 3]
}

/// Background class that a biased scene pairs with `fg_class`.
pub fn correlated_bg(fg_class: usize) -> usize {
    fg_class
}

/// One shape placed on the integer pixel lattice; membership is tested at
/// pixel indices, so areas are exact lattice counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeInstance {
    pub kind: ShapeKind,
    /// Circle centre / triangle apex / square top-left corner, as (y, x).
    pub anchor: (i64, i64),
    /// Radius (circle), height (triangle) or side (square).
    pub size: i64,
}

impl ShapeInstance {
    pub fn contains(&self, y: i64, x: i64) -> bool {
        let (ay, ax) = self.anchor;
        match self.kind {
            ShapeKind::Circle => (y - ay).pow(2) + (x - ax).pow(2) <= self.size.pow(2),
            ShapeKind::Triangle => {
                let dy = y - ay;
                (0..self.size).contains(&dy) && 2 * (x - ax).abs() <= dy
            }
            ShapeKind::Square => (ay..ay + self.size).contains(&y) && (ax..ax + self.size).contains(&x),
        }
    }

    /// Inclusive-exclusive row and column extents.
    fn extent(&self) -> ((i64, i64), (i64, i64)) {
        let (ay, ax) = self.anchor;
        let s = self.size;
        match self.kind {
            ShapeKind::Circle => ((ay - s, ay + s + 1), (ax - s, ax + s + 1)),
            ShapeKind::Triangle => ((ay, ay + s), (ax - s / 2, ax + s / 2 + 1)),
            ShapeKind::Square => ((ay, ay + s), (ax, ax + s)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub canvas: usize,
    pub fg_class: usize,
    pub bg_class: usize,
    pub objects: Vec<ShapeInstance>,
    /// Seeds the background texture.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScene {
    pub image: Image,
    pub mask: SaliencyMask,
    pub fg_class: usize,
    pub bg_class: usize,
}

fn size_range(kind: ShapeKind) -> (i64, i64) {
    match kind {
        ShapeKind::Circle => (6, 11),
        ShapeKind::Triangle => (14, 24),
        ShapeKind::Square => (12, 20),
    }
}

impl SceneSpec {
    /// Draws a scene layout. With probability `bias` the background class is
    /// [`correlated_bg`] of the foreground class, otherwise uniform.
    pub fn sample(seed: u64, canvas: usize, bias: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&bias) {
            return Err(CastError::config("bias", format!("{bias} outside [0, 1]")));
        }
        if canvas < 48 {
            return Err(CastError::config("canvas", format!("{canvas} is below the 48 pixel minimum")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fg_class = rng.gen_range(0..NUM_FG_CLASSES);
        let bg_class = if rng.gen_bool(bias) {
            correlated_bg(fg_class)
        } else {
            rng.gen_range(0..NUM_BG_CLASSES)
        };
        let count = rng.gen_range(1..=3);
        let kind = fg_shape(fg_class);
        let (lo, hi) = size_range(kind);
        let c = canvas as i64;
        let objects = (0..count)
            .map(|_| {
                let size = rng.gen_range(lo..=hi);
                let anchor = match kind {
                    ShapeKind::Circle => (rng.gen_range(size..c - size), rng.gen_range(size..c - size)),
                    ShapeKind::Triangle => (rng.gen_range(0..=c - size), rng.gen_range(size / 2..c - size / 2)),
                    ShapeKind::Square => (rng.gen_range(0..=c - size), rng.gen_range(0..=c - size)),
                };
                ShapeInstance { kind, anchor, size }
            })
            .collect();
        Ok(SceneSpec {
            canvas,
            fg_class,
            bg_class,
            objects,
            seed: rng.gen(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(CastError::InvalidArgument("a scene needs at least one object".into()));
        }
        if self.fg_class >= NUM_FG_CLASSES || self.bg_class >= NUM_BG_CLASSES {
            return Err(CastError::InvalidArgument(format!(
                "class ids ({}, {}) out of range",
                self.fg_class, self.bg_class
            )));
        }
        Ok(())
    }
}

/// Exact union of the shapes' pixel sets.
pub fn shape_mask(canvas: usize, objects: &[ShapeInstance]) -> SaliencyMask {
    let mut mask = SaliencyMask::empty(canvas, canvas);
    let c = canvas as i64;
    for obj in objects {
        let ((y0, y1), (x0, x1)) = obj.extent();
        for y in y0.max(0)..y1.min(c) {
            for x in x0.max(0)..x1.min(c) {
                if obj.contains(y, x) {
                    mask.set(y as usize, x as usize, true);
                }
            }
        }
    }
    mask
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

/// Class-determined background texture.
pub fn render_background(canvas: usize, bg_class: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lo, hi] = bg_palette(bg_class);
    let mut img = Image::filled(canvas, canvas, 0.0);
    match bg_family(bg_class) {
        TextureFamily::Noise => {
            let cell = 4;
            let cells = canvas.div_ceil(cell);
            let values: Vec<f32> = (0..cells * cells).map(|_| rng.gen()).collect();
            for y in 0..canvas {
                for x in 0..canvas {
                    img.set_pixel(y, x, mix(lo, hi, values[(y / cell) * cells + x / cell]));
                }
            }
        }
        TextureFamily::Stripes => {
            let period = rng.gen_range(6..=10) as f32;
            let theta = rng.gen_range(0.0..std::f32::consts::PI);
            let phase = rng.gen_range(0.0..period);
            let (s, c) = theta.sin_cos();
            for y in 0..canvas {
                for x in 0..canvas {
                    let u = (x as f32 * c + y as f32 * s + phase).rem_euclid(period);
                    img.set_pixel(y, x, if u < period / 2.0 { lo } else { hi });
                }
            }
        }
        TextureFamily::Gradient => {
            let theta = rng.gen_range(0.0..std::f32::consts::TAU);
            let (s, c) = theta.sin_cos();
            let half = canvas as f32 / 2.0;
            let reach = half * std::f32::consts::SQRT_2;
            for y in 0..canvas {
                for x in 0..canvas {
                    let u = ((x as f32 - half) * c + (y as f32 - half) * s) / reach;
                    img.set_pixel(y, x, mix(lo, hi, (u * 0.5 + 0.5).clamp(0.0, 1.0)));
                }
            }
        }
    }
    img
}

/// Deterministic render of `spec`, quantised to 8-bit levels.
pub fn gen_scene(spec: &SceneSpec) -> Result<LabeledScene> {
    spec.validate()?;
    let mut image = render_background(spec.canvas, spec.bg_class, spec.seed);
    let mask = shape_mask(spec.canvas, &spec.objects);
    let color = fg_color(spec.fg_class);
    for y in 0..spec.canvas {
        for x in 0..spec.canvas {
            if mask.get(y, x) {
                image.set_pixel(y, x, color);
            }
        }
    }
    image.quantize();
    Ok(LabeledScene {
        image,
        mask,
        fg_class: spec.fg_class,
        bg_class: spec.bg_class,
    })
}

/// Seed of the `index`-th scene of a dataset drawn with `seed`.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.gen()
}

/// `count` scenes, each rendered from its own derived seed.
pub fn gen_dataset(count: usize, seed: u64, canvas: usize, bias: f64) -> Result<Vec<LabeledScene>> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| gen_scene(&SceneSpec::sample(scene_seed(seed, i as u64), canvas, bias)?))
        .collect()
}
