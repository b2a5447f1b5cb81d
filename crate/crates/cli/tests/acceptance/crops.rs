use cast_core::crop::{sample_crop_detailed, CropConstraint, CropSpec, IntegralImage, SaliencyMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::verdict::Verdict;

const GRID: usize = 12;
const SAMPLES: usize = 10_000;
/// φ as exact fractions, so the oracle never touches floating point.
const PHIS: [(u32, u32); 4] = [(0, 1), (1, 5), (1, 2), (9, 10)];

fn test_masks() -> Vec<SaliencyMask> {
    let mut masks = vec![SaliencyMask::empty(GRID, GRID), SaliencyMask::from_fn(GRID, GRID, |_, _| true)];
    for y in 0..GRID {
        for x in 0..GRID {
            masks.push(SaliencyMask::from_fn(GRID, GRID, |a, b| a == y && b == x));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..40 {
        let (y0, x0) = (rng.gen_range(0..GRID), rng.gen_range(0..GRID));
        let (y1, x1) = (rng.gen_range(y0..GRID), rng.gen_range(x0..GRID));
        masks.push(SaliencyMask::from_fn(GRID, GRID, |y, x| (y0..=y1).contains(&y) && (x0..=x1).contains(&x)));
    }
    for density in [0.05, 0.2, 0.5, 0.8] {
        for _ in 0..10 {
            let mut m = SaliencyMask::empty(GRID, GRID);
            for y in 0..GRID {
                for x in 0..GRID {
                    m.set(y, x, rng.gen_bool(density));
                }
            }
            masks.push(m);
        }
    }
    // two separated blobs, the case where crops can cover one but not both
    masks.push(SaliencyMask::from_fn(GRID, GRID, |y, x| (y < 3 && x < 3) || (y > 8 && x > 8)));
    masks.push(SaliencyMask::from_fn(GRID, GRID, |y, x| (y as i64 - 6).pow(2) + (x as i64 - 6).pow(2) <= 16));
    masks
}

fn all_rects() -> Vec<CropSpec> {
    let mut out = Vec::new();
    for top in 0..GRID {
        for left in 0..GRID {
            for h in 1..=GRID - top {
                for w in 1..=GRID - left {
                    out.push(CropSpec::new(top, left, h, w, false));
                }
            }
        }
    }
    out
}

/// Pixel-by-pixel count with the rule `covered / area ≥ num / den` in integers.
fn brute_force(mask: &SaliencyMask, crop: &CropSpec, (num, den): (u32, u32)) -> bool {
    let mut covered = 0u32;
    for y in crop.top..crop.top + crop.crop_h {
        for x in crop.left..crop.left + crop.crop_w {
            covered += mask.get(y, x) as u32;
        }
    }
    covered * den >= num * mask.area()
}

pub fn criterion_crop_oracle() -> Verdict {
    let masks = test_masks();
    let rects = all_rects();
    let mut mismatches = Vec::new();
    let mut checked = 0usize;
    for (mi, mask) in masks.iter().enumerate() {
        let table = IntegralImage::new(mask);
        for &(num, den) in &PHIS {
            let c = CropConstraint::with_phi(num as f64 / den as f64);
            for r in &rects {
                checked += 1;
                if c.accepts(&table, r) != brute_force(mask, r, (num, den)) {
                    mismatches.push(format!("mask {mi} phi {num}/{den} crop {r:?}"));
                }
            }
        }
    }

    // every crop the sampler returns, fallback included, must satisfy the oracle
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut satisfied, mut drawn, mut fallbacks, mut outside_enumeration) = (0usize, 0usize, 0usize, 0usize);
    let nonempty: Vec<&SaliencyMask> = masks.iter().filter(|m| m.area() > 0).collect();
    for i in 0..SAMPLES {
        let mask = nonempty[i % nonempty.len()];
        let (num, den) = PHIS[(i / nonempty.len()) % PHIS.len()];
        let c = CropConstraint::with_phi(num as f64 / den as f64);
        let s = sample_crop_detailed(&IntegralImage::new(mask), &c, &mut rng, 50).unwrap();
        drawn += 1;
        fallbacks += s.fallback as usize;
        let plain = CropSpec { hflip: false, ..s.crop };
        if !rects.contains(&plain) {
            outside_enumeration += 1;
        }
        if brute_force(mask, &s.crop, (num, den)) {
            satisfied += 1;
        }
    }
    let rate = satisfied as f64 / drawn as f64;
    let detail = format!(
        "{} masks x {} phis x {} crops = {checked} oracle comparisons, {} mismatches; \
         {drawn} samples satisfied at rate {:.4} ({fallbacks} bbox fallbacks)",
        masks.len(),
        PHIS.len(),
        rects.len(),
        mismatches.len(),
        rate
    );
    let pass = mismatches.is_empty() && satisfied == drawn && outside_enumeration == 0;
    if pass {
        Verdict::new(true, detail)
    } else {
        mismatches.truncate(5);
        Verdict::fail(format!(
            "{detail}; {outside_enumeration} crops outside the image; first mismatches: {}",
            mismatches.join("; ")
        ))
    }
}
