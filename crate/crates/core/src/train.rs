//! Training loop: deterministic batching, CSV logging and resumable
//! checkpoints.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{SgdState, Tensor};
use crate::cast_loss::{cast_step, CastState, StepConfig};
use crate::checkpoint::{self, NamedTensors};
use crate::config::RunConfig;
use crate::contrast::NegativeQueue;
use crate::data::LabeledScene;
use crate::encoder::{init_params, ParamSet};
use crate::error::{CastError, Result};

pub const LOG_HEADER: &str = "step,L_cont,L_att,total,queue_fill,wall_ms";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Augmentation seed of batch position `i` at optimizer step `step`.
pub fn sample_seed(seed: u64, step: usize, i: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ step as u64) ^ i as u64)
}

/// Scene order of one epoch.
pub fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x7065_726d) ^ epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: usize,
    pub l_cont: f32,
    pub l_att: f32,
    pub total: f32,
    pub queue_fill: usize,
    pub wall_ms: u128,
    pub skipped: usize,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.l_cont, self.l_att, self.total, self.queue_fill, self.wall_ms
        )
    }
}

fn count_tensor(v: u64) -> Tensor {
    let data = vec![f32::from_bits(v as u32), f32::from_bits((v >> 32) as u32)];
    Tensor::new(&[2], data).expect("two words")
}

fn tensor_count(t: &Tensor) -> Result<u64> {
    match t.data() {
        [lo, hi] => Ok(lo.to_bits() as u64 | ((hi.to_bits() as u64) << 32)),
        _ => Err(CastError::InvalidArgument("counter tensor must hold two words".into())),
    }
}

pub struct Trainer {
    config: RunConfig,
    step_config: StepConfig,
    scenes: Vec<LabeledScene>,
    state: CastState,
    step: usize,
    total_steps: usize,
}

impl Trainer {
    pub fn new(config: RunConfig, scenes: Vec<LabeledScene>) -> Result<Self> {
        config.validate()?;
        if scenes.len() < config.batch {
            return Err(CastError::config(
                "batch",
                format!("{} exceeds the {} available scenes", config.batch, scenes.len()),
            ));
        }
        let step_config = config.step_config();
        let query = init_params(&step_config.encoder, config.seed)?;
        let state = CastState::new(query, config.queue_size, config.embedding_dim)?;
        Ok(Trainer {
            total_steps: config.total_steps(scenes.len()),
            config,
            step_config,
            scenes,
            state,
            step: 0,
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(config: RunConfig, scenes: Vec<LabeledScene>, checkpoint: &Path) -> Result<Self> {
        let mut t = Trainer::new(config, scenes)?;
        t.restore(&checkpoint::load(checkpoint)?, checkpoint)?;
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn step_config(&self) -> &StepConfig {
        &self.step_config
    }

    pub fn state(&self) -> &CastState {
        &self.state
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let b = self.config.batch;
        let per_epoch = self.scenes.len() / b;
        let perm = epoch_permutation(self.config.seed, step / per_epoch, self.scenes.len());
        let pos = step % per_epoch;
        perm[pos * b..(pos + 1) * b].to_vec()
    }

    pub fn run_step(&mut self) -> Result<StepRecord> {
        let started = Instant::now();
        let idx = self.batch_indices(self.step);
        let batch: Vec<_> = idx.iter().map(|&i| (&self.scenes[i].image, &self.scenes[i].mask)).collect();
        let seeds: Vec<u64> = (0..batch.len()).map(|i| sample_seed(self.config.seed, self.step, i)).collect();
        let out = cast_step(&batch, &seeds, &mut self.state, &self.step_config)?;
        if !out.total.is_finite() {
            log::warn!("non-finite loss {} at step {}", out.total, self.step + 1);
        }
        if out.skipped > 0 {
            log::debug!("step {}: skipped {} degenerate samples", self.step + 1, out.skipped);
        }
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            l_cont: out.l_cont,
            l_att: out.l_att,
            total: out.total,
            queue_fill: self.state.queue.len(),
            wall_ms: started.elapsed().as_millis(),
            skipped: out.skipped,
        })
    }

    /// Runs until `until` steps are complete (capped at the configured total),
    /// appending one CSV row per step and writing periodic checkpoints into
    /// `checkpoint_dir` when given.
    pub fn run(
        &mut self,
        until: usize,
        mut log_out: Option<&mut dyn Write>,
        checkpoint_dir: Option<&Path>,
    ) -> Result<Vec<StepRecord>> {
        let until = until.min(self.total_steps);
        let mut records = Vec::new();
        while self.step < until {
            let rec = self.run_step()?;
            if let Some(w) = log_out.as_deref_mut() {
                writeln!(w, "{}", rec.csv_row())?;
            }
            if rec.step % 50 == 0 || rec.step == until {
                log::info!(
                    "step {}/{}: L_cont {:.4} L_att {:.4} total {:.4}",
                    rec.step,
                    self.total_steps,
                    rec.l_cont,
                    rec.l_att,
                    rec.total
                );
            }
            let every = self.config.checkpoint_every;
            if let Some(dir) = checkpoint_dir {
                if every > 0 && rec.step % every == 0 {
                    self.save_checkpoint(&dir.join(format!("step_{:06}.ckpt", rec.step)))?;
                }
            }
            records.push(rec);
        }
        Ok(records)
    }

    pub fn checkpoint_entries(&self) -> Result<NamedTensors> {
        let mut out = Vec::new();
        for (name, t) in self.state.query.iter() {
            out.push((format!("query/{name}"), t.detach()));
        }
        for (name, t) in self.state.key.iter() {
            out.push((format!("key/{name}"), t.detach()));
        }
        for ((name, p), buf) in self.state.query.iter().zip(&self.state.sgd.buffers) {
            out.push((format!("sgd/{name}"), Tensor::new(p.shape(), buf.clone())?));
        }
        let q = &self.state.queue;
        out.push(("queue/storage".into(), Tensor::new(&[q.capacity(), q.dim()], q.storage().to_vec())?));
        out.push(("queue/cursor".into(), count_tensor(q.cursor() as u64)));
        out.push(("queue/fill".into(), count_tensor(q.len() as u64)));
        out.push(("train/step".into(), count_tensor(self.step as u64)));
        Ok(out)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.checkpoint_entries()?)
    }

    fn restore(&mut self, entries: &NamedTensors, origin: &Path) -> Result<()> {
        let find = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| CastError::format(origin, format!("missing tensor `{name}`")))
        };
        let take_set = |prefix: &str, like: &ParamSet| -> Result<ParamSet> {
            let set = ParamSet::new(
                like.iter()
                    .map(|(n, _)| Ok((n.to_string(), find(&format!("{prefix}/{n}"))?.clone())))
                    .collect::<Result<Vec<_>>>()?,
            );
            if !set.same_layout(like) {
                return Err(CastError::format(origin, format!("{prefix} parameters do not match the configured encoder")));
            }
            Ok(set)
        };
        let query = take_set("query", &self.state.query)?;
        let key = take_set("key", &self.state.key)?;
        let sgd = SgdState {
            buffers: take_set("sgd", &self.state.query)?.tensors().iter().map(Tensor::to_vec).collect(),
        };
        let storage = find("queue/storage")?;
        let queue = NegativeQueue::from_parts(
            self.config.queue_size,
            self.config.embedding_dim,
            storage.to_vec(),
            tensor_count(find("queue/cursor")?)? as usize,
            tensor_count(find("queue/fill")?)? as usize,
        )
        .map_err(|e| CastError::format(origin, e.to_string()))?;
        self.step = tensor_count(find("train/step")?)? as usize;
        self.state = CastState { query, key, queue, sgd };
        Ok(())
    }
}

/// Query and key encoders stored in a training checkpoint.
pub fn load_encoders(path: &Path, like: &ParamSet) -> Result<(ParamSet, ParamSet)> {
    let entries = checkpoint::load(path)?;
    let pick = |prefix: &str| -> Result<ParamSet> {
        let set = ParamSet::new(
            like.iter()
                .map(|(n, _)| {
                    entries
                        .iter()
                        .find(|(e, _)| *e == format!("{prefix}/{n}"))
                        .map(|(_, t)| (n.to_string(), t.clone()))
                        .ok_or_else(|| CastError::format(path, format!("missing tensor `{prefix}/{n}`")))
                })
                .collect::<Result<Vec<_>>>()?,
        );
        if !set.same_layout(like) {
            return Err(CastError::format(path, format!("{prefix} parameters do not match the configured encoder")));
        }
        Ok(set)
    };
    Ok((pick("query")?, pick("key")?))
}
