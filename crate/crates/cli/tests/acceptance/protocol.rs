//! Shared training runs for the grounding and robustness criteria: for each
//! seed, a default-MoCo baseline (λ = 0, φ = 0) and a CAST run (λ = 3,
//! φ = 0.2), trained once and evaluated by both criteria.

use std::sync::OnceLock;
use std::time::Instant;

use cast_core::data::{gen_dataset, ScenePool, Variant};
use cast_core::encoder::{extract_features, train_probe};
use cast_core::eval::{backgrounds_eval, grounding_eval, BackgroundsTable};
use cast_core::train::Trainer;
use cast_core::{Result, RunConfig};

use crate::verdict::Verdict;

const SEEDS: [u64; 3] = [0, 1, 2];
const STEPS: usize = 2000;
const TRAIN_SCENES: usize = 1024;
const HELD_OUT: usize = 500;
const POOL: usize = 900;
const BIAS: f64 = 0.8;
const EVAL_PHI: f64 = 0.2;
const EVAL_SEED: u64 = 77;
const PROBE_EPOCHS: usize = 300;
const TABLE_SEED: u64 = 5;
const MIN_IOU_GAIN: f64 = 0.05;

const BG_VARIANTS: [Variant; 3] = [Variant::NoFg, Variant::OnlyBgB, Variant::OnlyBgT];

struct RunResult {
    iou: f64,
    table: BackgroundsTable,
}

struct SeedResult {
    seed: u64,
    baseline: RunResult,
    cast: RunResult,
}

struct Experiment {
    seeds: Vec<SeedResult>,
    train_secs: f64,
}

fn train_and_eval(seed: u64, lambda: f32, phi: f64) -> Result<RunResult> {
    let train = gen_dataset(TRAIN_SCENES, 1000 + seed, 64, BIAS)?;
    let held = gen_dataset(HELD_OUT, 5000 + seed, 64, BIAS)?;
    let pool = ScenePool::new(gen_dataset(POOL, 9000 + seed, 64, BIAS)?)?;
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.lambda = lambda;
    cfg.phi = phi;
    cfg.steps = STEPS;
    let mut trainer = Trainer::new(cfg.clone(), train.clone())?;
    trainer.run(STEPS, None, None)?;
    let enc = cfg.encoder();
    let state = trainer.state();

    // both runs are scored on the same views, independent of their training φ
    let mut views = cfg.views();
    views.constraint.phi = EVAL_PHI;
    let report = grounding_eval(&enc, &state.query, &state.key, &held, &views, EVAL_SEED)?;

    let images: Vec<_> = train.iter().map(|s| s.image.to_tensor()).collect();
    let labels: Vec<usize> = train.iter().map(|s| s.fg_class).collect();
    let features = extract_features(&enc, &state.query, &images)?;
    let probe = train_probe(&features, &labels, cast_core::data::NUM_FG_CLASSES, PROBE_EPOCHS)?;
    let table = backgrounds_eval(&enc, &state.query, &probe, &pool, TABLE_SEED)?;
    Ok(RunResult {
        iou: report.mean_iou,
        table,
    })
}

fn experiment() -> &'static std::result::Result<Experiment, String> {
    static CELL: OnceLock<std::result::Result<Experiment, String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let started = Instant::now();
        let mut seeds = Vec::new();
        for seed in SEEDS {
            let baseline = train_and_eval(seed, 0.0, 0.0).map_err(|e| format!("seed {seed} baseline: {e}"))?;
            let cast = train_and_eval(seed, 3.0, 0.2).map_err(|e| format!("seed {seed} CAST: {e}"))?;
            seeds.push(SeedResult { seed, baseline, cast });
        }
        Ok(Experiment {
            seeds,
            train_secs: started.elapsed().as_secs_f64(),
        })
    })
}

pub fn criterion_grounding() -> Verdict {
    let exp = match experiment() {
        Ok(e) => e,
        Err(e) => return Verdict::fail(e.clone()),
    };
    let mut parts = Vec::new();
    let mut all = true;
    for r in &exp.seeds {
        let gain = r.cast.iou - r.baseline.iou;
        all &= gain >= MIN_IOU_GAIN;
        parts.push(format!("seed {}: {:.3} vs {:.3} ({gain:+.3})", r.seed, r.cast.iou, r.baseline.iou));
    }
    Verdict::new(
        all,
        format!(
            "mean IoU CAST vs baseline, need >= +{MIN_IOU_GAIN} every seed: {} [6 runs x {STEPS} steps, {:.0}s]",
            parts.join("; "),
            exp.train_secs
        ),
    )
}

fn gain(r: &SeedResult, v: Variant) -> f64 {
    r.cast.table.accuracy(v) - r.baseline.table.accuracy(v)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn criterion_robustness() -> Verdict {
    let exp = match experiment() {
        Ok(e) => e,
        Err(e) => return Verdict::fail(e.clone()),
    };
    let fg_variants: Vec<Variant> = Variant::ALL.into_iter().filter(|v| v.keeps_foreground()).collect();
    let (mut only_fg_wins, mut mixed_rand_wins, mut aggregate_ok) = (0, 0, 0);
    let mut violations = Vec::new();
    let mut parts = Vec::new();
    for r in &exp.seeds {
        let of = gain(r, Variant::OnlyFg);
        let mr = gain(r, Variant::MixedRand);
        only_fg_wins += usize::from(of > 0.0);
        mixed_rand_wins += usize::from(mr > 0.0);
        let fg_gain = mean(fg_variants.iter().map(|&v| gain(r, v)));
        let bg_gain = mean(BG_VARIANTS.iter().map(|&v| gain(r, v)));
        aggregate_ok += usize::from(bg_gain <= fg_gain);
        // every background-only variant on its own, in every seed
        for v in BG_VARIANTS {
            if gain(r, v) > fg_gain {
                violations.push(format!("seed {} {} {:+.3} > {fg_gain:+.3}", r.seed, v.name(), gain(r, v)));
            }
        }
        parts.push(format!(
            "seed {}: Only-FG {of:+.3}, Mixed-Rand {mr:+.3}, mean FG-variant {fg_gain:+.3}, mean BG-variant {bg_gain:+.3}",
            r.seed
        ));
    }
    let n = exp.seeds.len();
    let pass = only_fg_wins >= 2 && mixed_rand_wins >= 2 && violations.is_empty();
    let listed = if violations.is_empty() {
        "none".to_string()
    } else {
        violations.join(", ")
    };
    Verdict::new(
        pass,
        format!(
            "Only-FG wins {only_fg_wins}/{n}, Mixed-Rand wins {mixed_rand_wins}/{n} (need 2); \
             BG variants gaining more than the mean FG gain (need none): {listed}; \
             mean BG gain <= mean FG gain in {aggregate_ok}/{n} seeds; {}",
            parts.join("; ")
        ),
    )
}
