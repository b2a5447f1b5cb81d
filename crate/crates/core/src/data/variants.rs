use rand::seq::SliceRandom;
use rand::Rng;

use super::scene::{LabeledScene, NUM_FG_CLASSES};
use crate::crop::{CropSpec, SaliencyMask};
use crate::error::{CastError, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Original,
    MixedSame,
    MixedRand,
    MixedNext,
    OnlyFg,
    NoFg,
    OnlyBgB,
    OnlyBgT,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Original,
        Variant::MixedSame,
        Variant::MixedRand,
        Variant::MixedNext,
        Variant::OnlyFg,
        Variant::NoFg,
        Variant::OnlyBgB,
        Variant::OnlyBgT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Original => "Original",
            Variant::MixedSame => "Mixed-Same",
            Variant::MixedRand => "Mixed-Rand",
            Variant::MixedNext => "Mixed-Next",
            Variant::OnlyFg => "Only-FG",
            Variant::NoFg => "No-FG",
            Variant::OnlyBgB => "Only-BG-B",
            Variant::OnlyBgT => "Only-BG-T",
        }
    }

    /// Whether the scene's own foreground survives the variant.
    pub fn keeps_foreground(self) -> bool {
        !matches!(self, Variant::NoFg | Variant::OnlyBgB | Variant::OnlyBgT)
    }
}

/// Scenes indexed by foreground class, used as background donors.
#[derive(Clone, Debug)]
pub struct ScenePool {
    scenes: Vec<LabeledScene>,
    by_class: Vec<Vec<usize>>,
}

impl ScenePool {
    pub fn new(scenes: Vec<LabeledScene>) -> Result<Self> {
        if scenes.is_empty() {
            return Err(CastError::EmptyDataset);
        }
        let mut by_class = vec![Vec::new(); NUM_FG_CLASSES];
        for (i, s) in scenes.iter().enumerate() {
            by_class
                .get_mut(s.fg_class)
                .ok_or_else(|| CastError::InvalidArgument(format!("fg class {} out of range", s.fg_class)))?
                .push(i);
        }
        Ok(ScenePool { scenes, by_class })
    }

    pub fn scenes(&self) -> &[LabeledScene] {
        &self.scenes
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn of_class(&self, class: usize) -> &[usize] {
        self.by_class.get(class).map_or(&[], Vec::as_slice)
    }

    fn donor<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Result<&LabeledScene> {
        let idx = self.of_class(class).choose(rng).ok_or(CastError::MissingClass(class))?;
        Ok(&self.scenes[*idx])
    }
}

fn bbox_or_full(mask: &SaliencyMask) -> CropSpec {
    mask.bounding_box().unwrap_or_else(|| CropSpec::full(mask.height, mask.width))
}

/// Background with the foreground bounding box filled by copies of the
/// surrounding background, shifted by whole box extents.
pub fn tiled_background(scene: &LabeledScene) -> Image {
    let b = bbox_or_full(&scene.mask);
    let (h, w) = (scene.image.height, scene.image.width);
    let mut out = scene.image.clone();
    let inside = |y: usize, x: usize| (b.top..b.top + b.crop_h).contains(&y) && (b.left..b.left + b.crop_w).contains(&x);
    for y in b.top..b.top + b.crop_h {
        for x in b.left..b.left + b.crop_w {
            let source = if b.crop_w < w {
                (1..=w / b.crop_w + 1)
                    .map(|k| (y, (x + w * k - k * b.crop_w) % w))
                    .find(|&(yy, xx)| !inside(yy, xx))
            } else if b.crop_h < h {
                (1..=h / b.crop_h + 1)
                    .map(|k| ((y + h * k - k * b.crop_h) % h, x))
                    .find(|&(yy, xx)| !inside(yy, xx))
            } else {
                None
            };
            let rgb = source.map_or([0.0; 3], |(yy, xx)| scene.image.pixel(yy, xx));
            out.set_pixel(y, x, rgb);
        }
    }
    out
}

fn paste_foreground(scene: &LabeledScene, background: &Image) -> Image {
    let mut out = background.clone();
    for y in 0..scene.mask.height {
        for x in 0..scene.mask.width {
            if scene.mask.get(y, x) {
                out.set_pixel(y, x, scene.image.pixel(y, x));
            }
        }
    }
    out
}

fn blank_where(scene: &LabeledScene, mut blank: impl FnMut(usize, usize) -> bool) -> Image {
    let mut out = scene.image.clone();
    for y in 0..scene.image.height {
        for x in 0..scene.image.width {
            if blank(y, x) {
                out.set_pixel(y, x, [0.0; 3]);
            }
        }
    }
    out
}

/// Recombines a scene's foreground and background along its exact mask.
///
/// The returned scene keeps the original foreground label and mask; its
/// `bg_class` names the background actually shown (the donor's for mixed
/// variants).
pub fn compose_variant<R: Rng + ?Sized>(
    scene: &LabeledScene,
    pool: &ScenePool,
    variant: Variant,
    rng: &mut R,
) -> Result<LabeledScene> {
    let mut out = scene.clone();
    match variant {
        Variant::Original => {}
        Variant::OnlyFg => out.image = blank_where(scene, |y, x| !scene.mask.get(y, x)),
        Variant::NoFg => out.image = blank_where(scene, |y, x| scene.mask.get(y, x)),
        Variant::OnlyBgB => {
            let b = bbox_or_full(&scene.mask);
            out.image = blank_where(scene, |y, x| {
                (b.top..b.top + b.crop_h).contains(&y) && (b.left..b.left + b.crop_w).contains(&x)
            });
        }
        Variant::OnlyBgT => out.image = tiled_background(scene),
        Variant::MixedSame | Variant::MixedRand | Variant::MixedNext => {
            let class = match variant {
                Variant::MixedSame => scene.fg_class,
                Variant::MixedRand => rng.gen_range(0..NUM_FG_CLASSES),
                _ => (scene.fg_class + 1) % NUM_FG_CLASSES,
            };
            let donor = pool.donor(class, rng)?;
            if donor.image.height != scene.image.height || donor.image.width != scene.image.width {
                return Err(CastError::shape("compose_variant", "donor canvas differs from scene canvas"));
            }
            out.image = paste_foreground(scene, &tiled_background(donor));
            out.bg_class = donor.bg_class;
        }
    }
    Ok(out)
}
