//! Multi-task training: one single-task batch per step, tasks in round-robin
//! order, AdamW under the warmup and step-decay schedule.
//!
//! All randomness of step `t` (batch choice, augmentation, voxel sampling)
//! comes from a generator keyed by `(seed, t)`, so a run resumed from a
//! checkpoint replays exactly what an uninterrupted run would have done.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::TrainState;
use super::config::{Augment, Config};
use super::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{augment, AugmentConfig};
use crate::model::{Batch, Model, SceneSample, ShapeSample};
use crate::router::Task;
use crate::tensor::{AdamW, AdamWConfig, ParamGrads, Tape};
use crate::text::Vocabulary;

pub const LOG_HEADER: &str = "step,task,lr,cls,mask,grd,cap,ret,total";

/// Dataset plus its unaugmented samples.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub dataset: Dataset,
    pub scenes: Vec<SceneSample>,
    pub shapes: Vec<ShapeSample>,
    referable: Vec<usize>,
}

impl TrainData {
    pub fn new(dataset: Dataset, config: &Config) -> Result<Self> {
        let scenes = dataset.scene_samples(config.scene_voxel)?;
        let shapes = dataset.shape_samples(config.shape_voxel)?;
        let referable = (0..scenes.len()).filter(|&i| !scenes[i].referrals.is_empty()).collect();
        Ok(TrainData {
            dataset,
            scenes,
            shapes,
            referable,
        })
    }

    fn pool(&self, task: Task) -> Vec<usize> {
        match task {
            Task::GroundedSeg => self.referable.clone(),
            t if t.is_scene_task() => (0..self.scenes.len()).collect(),
            _ => (0..self.shapes.len()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub task: Task,
    pub lr: f64,
    pub terms: [f64; 5],
    pub total: f64,
}

impl StepLog {
    /// CSV row; floats in shortest round-trip form.
    pub fn csv(&self) -> String {
        let mut s = format!("{},{},{:?}", self.step, self.task, self.lr);
        for v in self.terms {
            let _ = write!(s, ",{v:?}");
        }
        let _ = write!(s, ",{:?}", self.total);
        s
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Input(format!("bad loss log row {line:?}"));
        if f.len() != 9 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let mut terms = [0.0; 5];
        for (t, s) in terms.iter_mut().zip(&f[3..8]) {
            *t = num(s)?;
        }
        Ok(StepLog {
            step: f[0].parse().map_err(|_| bad())?,
            task: f[1].parse()?,
            lr: num(f[2])?,
            terms,
            total: num(f[8])?,
        })
    }
}

/// Reads a loss log written by [`train`].
pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().skip(1).filter(|l| !l.is_empty()).map(StepLog::parse_csv).collect()
}

/// Generator for everything random in step `step`.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

impl TrainState {
    /// Fresh model and optimizer; the vocabulary comes from the dataset.
    pub fn init(config: Config, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::build(&dataset.corpus(), Some(config.vocab_cap))?;
        let (model, store) = Model::new(config.model.clone(), vocab, dataset.manifest.classes.clone(), config.seed)?;
        let optimizer = AdamW::new(
            AdamWConfig {
                weight_decay: config.train.weight_decay,
                ..AdamWConfig::default()
            },
            &store,
        );
        Ok(TrainState {
            config,
            model,
            store,
            optimizer,
            step: 0,
        })
    }

    pub fn task_at(&self, step: usize) -> Task {
        let tasks = &self.config.train.tasks;
        tasks[step % tasks.len()]
    }

    /// Runs step `self.step` and advances it.
    pub fn train_step(&mut self, data: &TrainData) -> Result<StepLog> {
        let step = self.step;
        let task = self.task_at(step);
        let wrap = |source: Error| Error::Step {
            step,
            task: task.to_string(),
            source: Box::new(source),
        };
        let (log, grads) = self.loss_and_grads(data, step, task).map_err(wrap)?;
        let mut grads = grads;
        let clip = self.config.train.grad_clip;
        if clip > 0.0 {
            let norm = grads.global_norm();
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        self.optimizer.step(&mut self.store, &grads, log.lr);
        self.step += 1;
        Ok(log)
    }

    fn loss_and_grads(&self, data: &TrainData, step: usize, task: Task) -> Result<(StepLog, ParamGrads)> {
        let cfg = &self.config;
        let mut rng = step_rng(cfg.seed, step);
        let pool = data.pool(task);
        if pool.is_empty() {
            return Err(Error::Input(format!("no training samples for {task}")));
        }
        let size = if task.is_scene_task() { cfg.train.scene_batch } else { cfg.train.pair_batch };
        let picks = sample(&mut rng, pool.len(), size.min(pool.len())).into_vec();
        let augmented = cfg.train.augment == Augment::Default;

        let tape = Tape::new();
        let terms = if task.is_scene_task() {
            let owned: Vec<SceneSample> = if augmented {
                picks
                    .iter()
                    .map(|&p| {
                        let i = pool[p];
                        let cloud = augment(&data.dataset.scene_clouds[i], &AugmentConfig::scene(), &mut rng);
                        data.dataset.scene_sample(i, &cloud, cfg.scene_voxel)
                    })
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let batch: Vec<&SceneSample> = if augmented {
                owned.iter().collect()
            } else {
                picks.iter().map(|&p| &data.scenes[pool[p]]).collect()
            };
            self.model.batch_loss(&tape, &self.store, task, Batch::Scenes(&batch), &mut rng)?
        } else {
            let owned: Vec<ShapeSample> = if augmented {
                picks
                    .iter()
                    .map(|&p| {
                        let i = pool[p];
                        let cloud = augment(&data.dataset.shape_clouds[i], &AugmentConfig::shape(), &mut rng);
                        data.dataset.shape_sample(i, &cloud, cfg.shape_voxel)
                    })
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let batch: Vec<&ShapeSample> = if augmented {
                owned.iter().collect()
            } else {
                picks.iter().map(|&p| &data.shapes[pool[p]]).collect()
            };
            self.model.batch_loss(&tape, &self.store, task, Batch::Shapes(&batch), &mut rng)?
        };
        let total = terms.total(&tape)?;
        let value = total.value().item();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "total loss" });
        }
        let grads = tape.backward(total)?;
        let mut acc = ParamGrads::new(&self.store);
        grads.accumulate_params(&mut acc);
        Ok((
            StepLog {
                step,
                task,
                lr: cfg.train.lr_at(step),
                terms: terms.values(),
                total: value,
            },
            acc,
        ))
    }
}

/// Where a training run writes its outputs.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn log(&self) -> PathBuf {
        self.dir.join("loss_log.csv")
    }

    pub fn epoch(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch{epoch:03}.u3dl"))
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last.u3dl")
    }
}

/// Trains until the configured step count, or `stop_at` if earlier.
///
/// A fresh run writes `epoch000.u3dl` before the first step. Every completed
/// epoch writes `epoch<e>.u3dl`, and the run always ends by writing
/// `last.u3dl`. Resuming into a directory with an existing log drops rows at or
/// past the resume step before appending.
pub fn train(state: &mut TrainState, data: &TrainData, out: &Path, stop_at: Option<usize>) -> Result<Vec<StepLog>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let paths = RunPaths { dir: out.to_path_buf() };
    let log_path = paths.log();
    let mut kept = String::from(LOG_HEADER);
    kept.push('\n');
    if state.step > 0 && log_path.exists() {
        for row in read_log(&log_path)? {
            if row.step < state.step {
                kept.push_str(&row.csv());
                kept.push('\n');
            }
        }
    }
    std::fs::write(&log_path, kept).map_err(|e| Error::io(&log_path, e))?;
    let mut log = OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    if state.step == 0 {
        state.save(&paths.epoch(0))?;
    }
    let per_epoch = state.config.train.steps_per_epoch;
    let end = state.config.train.total_steps().min(stop_at.unwrap_or(usize::MAX));
    let mut rows = Vec::new();
    while state.step < end {
        let row = state.train_step(data)?;
        writeln!(log, "{}", row.csv()).map_err(|e| Error::io(&log_path, e))?;
        rows.push(row);
        if state.step.is_multiple_of(per_epoch) {
            state.save(&paths.epoch(state.step / per_epoch))?;
        }
    }
    state.save(&paths.last())?;
    Ok(rows)
}
