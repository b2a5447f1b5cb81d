//! Subcommands of the `cast` binary.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cast_core::cast_loss::mask_key;
use cast_core::checkpoint;
use cast_core::crop::make_view_pair;
use cast_core::data::{self, io as scene_io, ScenePool};
use cast_core::encoder::{extract_features, init_params, train_probe, LinearProbe};
use cast_core::eval::{backgrounds_eval, encoder_input, eval_sample_seed, grounding_eval, model_grad_cam, write_file, GroundingReport};
use cast_core::train::{load_encoders, Trainer, LOG_HEADER};
use cast_core::{viz, CastError, RunConfig};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const EFFECTIVE_CONFIG: &str = "config.txt";
pub const TRAIN_LOG: &str = "log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Parser)]
#[command(name = "cast", version, about = "Attention-supervised contrastive training on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene dataset.
    GenData(GenDataArgs),
    /// Train query/key encoders from a config file.
    Train(TrainArgs),
    /// Grad-CAM vs. saliency IoU of one or more checkpoints.
    EvalGrounding(EvalGroundingArgs),
    /// Linear-probe accuracy on the eight foreground/background variants.
    EvalBackgrounds(EvalBackgroundsArgs),
    /// Export query, key, masked key, Grad-CAM overlay and saliency images.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of scenes whose background class follows the foreground class.
    #[arg(long, default_value_t = 0.0)]
    pub bias: f64,
    #[arg(long, default_value_t = data::DEFAULT_CANVAS)]
    pub canvas: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from a checkpoint written by an earlier run of the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Checkpoint and exit after this many completed steps.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalGroundingArgs {
    /// Run config describing the encoder and crop settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub eval_seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalBackgroundsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Original-variant scenes the linear probe is fitted on.
    #[arg(long)]
    pub train_data: PathBuf,
    /// Scenes the variants are composed from.
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Reuse probe weights instead of fitting a new probe.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    pub probe_epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub eval_seed: u64,
}

/// Process exit status for a failed command: 2 for configuration errors,
/// 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let is_config = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<CastError>(), Some(CastError::Config { .. })));
    if is_config {
        2
    } else {
        1
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::EvalGrounding(a) => eval_grounding(&a),
        Command::EvalBackgrounds(a) => eval_backgrounds(&a),
        Command::Visualize(a) => visualize(&a),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let scenes = data::gen_dataset(a.count, a.seed, a.canvas, a.bias)?;
    if scenes.is_empty() {
        log::warn!("--count 0: writing an empty index");
    }
    data::write_dataset(&a.out, &scenes).with_context(|| format!("writing dataset to {}", a.out.display()))?;
    log::info!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config).with_context(|| format!("loading config {}", a.config.display()))?;
    let scenes = data::load_dataset(&cfg.data_dir)
        .with_context(|| format!("loading dataset {}", cfg.data_dir.display()))?;
    fs::create_dir_all(cfg.out_dir.join(CHECKPOINT_DIR))?;
    fs::write(cfg.out_dir.join(EFFECTIVE_CONFIG), cfg.render())?;

    let mut trainer = match &a.resume {
        Some(ckpt) => Trainer::resume(cfg.clone(), scenes, ckpt)
            .with_context(|| format!("resuming from {}", ckpt.display()))?,
        None => Trainer::new(cfg.clone(), scenes)?,
    };
    let log_path = cfg.out_dir.join(TRAIN_LOG);
    let mut log_file = if a.resume.is_some() && log_path.exists() {
        BufWriter::new(fs::OpenOptions::new().append(true).open(&log_path)?)
    } else {
        let mut f = BufWriter::new(fs::File::create(&log_path)?);
        writeln!(f, "{LOG_HEADER}")?;
        f
    };
    log::info!(
        "training from step {} to {} on {} scenes",
        trainer.step(),
        trainer.total_steps(),
        cfg.data_dir.display()
    );
    let until = a.stop_after.unwrap_or(usize::MAX);
    let ckpt_dir = cfg.out_dir.join(CHECKPOINT_DIR);
    trainer.run(until, Some(&mut log_file), Some(&ckpt_dir))?;
    log_file.flush()?;
    if trainer.is_done() {
        trainer.save_checkpoint(&cfg.out_dir.join(FINAL_CHECKPOINT))?;
        log::info!("finished; final checkpoint in {}", cfg.out_dir.display());
    } else {
        let path = ckpt_dir.join(format!("step_{:06}.ckpt", trainer.step()));
        trainer.save_checkpoint(&path)?;
        log::info!("stopped at step {}; resume with --resume {}", trainer.step(), path.display());
    }
    Ok(())
}

fn checkpoint_label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(Path::file_name) {
        Some(dir) => format!("{}_{stem}", dir.to_string_lossy()),
        None => stem,
    }
}

pub fn eval_grounding(a: &EvalGroundingArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let enc = cfg.encoder();
    let scenes = data::load_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    if scenes.is_empty() {
        return Err(CastError::EmptyDataset).context(format!("dataset {}", a.data.display()));
    }
    fs::create_dir_all(&a.out)?;
    let like = init_params(&enc, 0)?;
    let mut summary = String::new();
    for ckpt in &a.checkpoints {
        let (query, key) = load_encoders(ckpt, &like).with_context(|| format!("loading {}", ckpt.display()))?;
        let report: GroundingReport = grounding_eval(&enc, &query, &key, &scenes, &cfg.views(), a.eval_seed)?;
        let label = checkpoint_label(ckpt);
        write_file(&a.out.join(format!("grounding_{label}.csv")), |w| report.write_csv(w))?;
        write_file(&a.out.join(format!("histogram_{label}.csv")), |w| report.write_histogram_csv(w))?;
        let line = report.summary(&label);
        println!("{line}");
        summary.push_str(&line);
        summary.push('\n');
    }
    fs::write(a.out.join("grounding_summary.txt"), summary)?;
    Ok(())
}

pub fn eval_backgrounds(a: &EvalBackgroundsArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let enc = cfg.encoder();
    let like = init_params(&enc, 0)?;
    let (query, _) = load_encoders(&a.checkpoint, &like).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let pool = ScenePool::new(data::load_dataset(&a.pool).with_context(|| format!("loading pool {}", a.pool.display()))?)?;
    fs::create_dir_all(&a.out)?;
    let probe = match &a.probe {
        Some(p) => LinearProbe::from_tensors(&checkpoint::load(p)?)?,
        None => {
            let train = data::load_dataset(&a.train_data)
                .with_context(|| format!("loading probe data {}", a.train_data.display()))?;
            let images = train
                .iter()
                .map(|s| encoder_input(&s.image, enc.input_size))
                .collect::<Result<Vec<_>, _>>()?;
            let labels: Vec<usize> = train.iter().map(|s| s.fg_class).collect();
            let features = extract_features(&enc, &query, &images)?;
            let probe = train_probe(&features, &labels, data::NUM_FG_CLASSES, a.probe_epochs)?;
            log::info!("probe train accuracy {:.4}", probe.train_accuracy);
            checkpoint::save(&a.out.join("probe.ckpt"), &probe.to_tensors()?)?;
            probe
        }
    };
    let table = backgrounds_eval(&enc, &query, &probe, &pool, a.seed)?;
    write_file(&a.out.join("backgrounds.csv"), |w| table.write_csv(w))?;
    print!("{}", table.render());
    Ok(())
}

pub fn visualize(a: &VisualizeArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let enc = cfg.encoder();
    let views = cfg.views();
    let like = init_params(&enc, 0)?;
    let (query, key) = load_encoders(&a.checkpoint, &like).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let scenes = data::load_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    if scenes.len() < a.samples {
        bail!("dataset has {} scenes but {} were requested", scenes.len(), a.samples);
    }
    fs::create_dir_all(&a.out)?;
    for (i, scene) in scenes.iter().take(a.samples).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(eval_sample_seed(a.eval_seed, i));
        let pair = make_view_pair(&scene.image, &scene.mask, &views, &mut rng)?;
        let cam = model_grad_cam(&enc, &query, &key, &pair)?;
        let masked = mask_key(&pair.key, &pair.key_mask)?;
        let name = |what: &str, ext: &str| a.out.join(format!("sample_{i:03}_{what}.{ext}"));
        fs::write(name("query", "ppm"), scene_io::encode_ppm(&pair.query))?;
        fs::write(name("key", "ppm"), scene_io::encode_ppm(&pair.key))?;
        fs::write(name("masked_key", "ppm"), scene_io::encode_ppm(&masked))?;
        let rgb = viz::overlay(&pair.query, &cam, enc.grid_size())?;
        fs::write(name("gradcam", "ppm"), scene_io::encode_rgb(pair.query.width, pair.query.height, &rgb))?;
        fs::write(name("saliency", "pgm"), scene_io::encode_pgm(&pair.query_mask))?;
    }
    log::info!("wrote {} samples to {}", a.samples, a.out.display());
    Ok(())
}
