//! Flat `key = value` configuration with dotted keys, layered over a named
//! preset.

use std::fmt::Write as _;
use std::path::Path;

use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::router::{LossWeights, Task};
use crate::sparse::EncoderConfig;
use crate::text::{Pool, TextEncoderConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Input(format!("unknown preset {s:?} (expected paper or desk)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augment {
    None,
    Default,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup: usize,
    /// Fractions of the total step count at which the rate decays.
    pub decay_at: Vec<f64>,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub scene_batch: usize,
    pub pair_batch: usize,
    /// Interleaved round-robin, one task per step.
    pub tasks: Vec<Task>,
    pub augment: Augment,
    /// Global gradient-norm clip; zero disables it.
    pub grad_clip: f64,
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    /// Linear warmup over `warmup` steps, then step decays.
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.total_steps() as f64;
        let mut lr = self.lr;
        if step < self.warmup {
            lr *= (step + 1) as f64 / self.warmup as f64;
        }
        for &f in &self.decay_at {
            if step as f64 >= f * total {
                lr *= self.decay_factor;
            }
        }
        lr
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub scene_voxel: f64,
    pub shape_voxel: f64,
    pub vocab_cap: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

/// Named finetuning schedules.
pub const FINETUNE: [&str; 5] = ["seg_s3dis", "seg_scannet", "grounded_seg", "captioning", "retrieval"];

impl Config {
    pub fn preset(preset: Preset) -> Config {
        match preset {
            Preset::Desk => Config::desk(),
            Preset::Paper => Config::paper(),
        }
    }

    fn desk() -> Config {
        let dim = 64;
        Config {
            model: ModelConfig {
                encoder: EncoderConfig {
                    in_channels: 3,
                    channels: vec![16, 32, 48],
                    res_blocks: 1,
                    hidden_dim: dim,
                },
                text: TextEncoderConfig {
                    vocab_size: 0,
                    max_len: 12,
                    dim,
                    layers: 2,
                    heads: 4,
                    ffn_dim: 128,
                    pool: Pool::Mean,
                },
                decoder: DecoderConfig {
                    dim,
                    layers: 2,
                    heads: 4,
                    ffn_dim: 128,
                    queries: 8,
                    samples_per_level: 64,
                    fourier_bands: 4,
                    fourier_period: 64.0,
                },
                weights: LossWeights::default(),
                deep_supervision: true,
                top_k: 8,
            },
            scene_voxel: 0.02,
            shape_voxel: 0.08,
            vocab_cap: 1000,
            train: TrainConfig {
                lr: 1e-3,
                warmup: 10,
                decay_at: vec![0.5, 0.7],
                decay_factor: 0.1,
                weight_decay: 0.0,
                epochs: 10,
                steps_per_epoch: 50,
                scene_batch: 2,
                pair_batch: 4,
                tasks: Task::ALL.to_vec(),
                augment: Augment::None,
                grad_clip: 0.0,
            },
            seed: 0,
        }
    }

    fn paper() -> Config {
        let dim = 256;
        let mut c = Config::desk();
        c.model.encoder.channels = vec![32, 64, 96, 128, 160];
        c.model.encoder.res_blocks = 2;
        c.model.encoder.hidden_dim = dim;
        c.model.text = TextEncoderConfig {
            vocab_size: 0,
            max_len: 77,
            dim,
            layers: 12,
            heads: 8,
            ffn_dim: 4 * dim,
            pool: Pool::Mean,
        };
        c.model.decoder = DecoderConfig {
            dim,
            layers: 15,
            heads: 8,
            ffn_dim: 4 * dim,
            queries: 150,
            samples_per_level: 1024,
            fourier_bands: 8,
            fourier_period: 512.0,
        };
        c.model.top_k = 500;
        c.scene_voxel = 0.02;
        c.shape_voxel = 0.01;
        c.vocab_cap = 49408;
        c.train.lr = 1e-4;
        c.train.epochs = 50;
        c.train.steps_per_epoch = 1000;
        c.train.scene_batch = 8;
        c.train.pair_batch = 12;
        c.train.augment = Augment::Default;
        c
    }

    /// Overrides the schedule with a named finetuning recipe.
    pub fn apply_finetune(&mut self, name: &str) -> Result<()> {
        let t = &mut self.train;
        let (epochs, lr, factor, tasks): (usize, f64, f64, &[Task]) = match name {
            "seg_s3dis" => (25, 2e-5, 0.1, &[Task::SemanticSeg, Task::InstanceSeg]),
            "seg_scannet" => (30, 2e-5, 0.1, &[Task::SemanticSeg, Task::InstanceSeg]),
            "grounded_seg" => (20, 1e-5, 0.1, &[Task::GroundedSeg]),
            "captioning" => (30, 1e-4, 0.2, &[Task::Captioning]),
            "retrieval" => (30, 1e-4, 0.2, &[Task::Retrieval]),
            _ => return Err(Error::Input(format!("unknown finetune schedule {name:?}; expected one of {FINETUNE:?}"))),
        };
        t.epochs = epochs;
        t.lr = lr;
        t.decay_factor = factor;
        t.decay_at = vec![0.5, 0.7];
        t.tasks = tasks.to_vec();
        if name == "seg_s3dis" {
            self.model.top_k = 200;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Input(format!("bad value {value:?} for {key}"));
        let usize_ = || value.parse::<usize>().map_err(|_| bad());
        let f64_ = || value.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(bad);
        let bool_ = || value.parse::<bool>().map_err(|_| bad());
        let list = || -> Result<Vec<f64>> {
            value.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| bad())).collect()
        };
        let m = &mut self.model;
        match key {
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "model.dim" => {
                let d = usize_()?;
                m.encoder.hidden_dim = d;
                m.text.dim = d;
                m.decoder.dim = d;
            }
            "encoder.channels" => {
                m.encoder.channels = value
                    .split(',')
                    .map(|v| v.trim().parse::<usize>().map_err(|_| bad()))
                    .collect::<Result<_>>()?
            }
            "encoder.res_blocks" => m.encoder.res_blocks = usize_()?,
            "text.layers" => m.text.layers = usize_()?,
            "text.heads" => m.text.heads = usize_()?,
            "text.ffn_dim" => m.text.ffn_dim = usize_()?,
            "text.max_len" => m.text.max_len = usize_()?,
            "text.vocab_cap" => self.vocab_cap = usize_()?,
            "text.pool" => {
                m.text.pool = match value {
                    "mean" => Pool::Mean,
                    "eos" => Pool::Eos,
                    _ => return Err(bad()),
                }
            }
            "decoder.layers" => m.decoder.layers = usize_()?,
            "decoder.heads" => m.decoder.heads = usize_()?,
            "decoder.ffn_dim" => m.decoder.ffn_dim = usize_()?,
            "decoder.queries" => m.decoder.queries = usize_()?,
            "decoder.samples" => m.decoder.samples_per_level = usize_()?,
            "decoder.fourier_bands" => m.decoder.fourier_bands = usize_()?,
            "decoder.fourier_period" => m.decoder.fourier_period = f64_()?,
            "decoder.deep_supervision" => m.deep_supervision = bool_()?,
            "loss.cls" => m.weights.cls = f64_()?,
            "loss.bce" => m.weights.bce = f64_()?,
            "loss.dice" => m.weights.dice = f64_()?,
            "loss.gc" => m.weights.gc = f64_()?,
            "loss.cap" => m.weights.cap = f64_()?,
            "loss.ret" => m.weights.ret = f64_()?,
            "loss.background" => m.weights.background = f64_()?,
            "infer.top_k" => m.top_k = usize_()?,
            "data.scene_voxel" => self.scene_voxel = f64_()?,
            "data.shape_voxel" => self.shape_voxel = f64_()?,
            "train.lr" => self.train.lr = f64_()?,
            "train.warmup" => self.train.warmup = usize_()?,
            "train.decay_at" => self.train.decay_at = list()?,
            "train.decay_factor" => self.train.decay_factor = f64_()?,
            "train.weight_decay" => self.train.weight_decay = f64_()?,
            "train.epochs" => self.train.epochs = usize_()?,
            "train.steps_per_epoch" => self.train.steps_per_epoch = usize_()?,
            "train.scene_batch" => self.train.scene_batch = usize_()?,
            "train.pair_batch" => self.train.pair_batch = usize_()?,
            "train.grad_clip" => self.train.grad_clip = f64_()?,
            "train.tasks" => {
                self.train.tasks = value
                    .split(',')
                    .map(|t| t.trim().parse::<Task>())
                    .collect::<Result<_>>()?
            }
            "train.augment" => {
                self.train.augment = match value {
                    "none" => Augment::None,
                    "default" => Augment::Default,
                    _ => return Err(bad()),
                }
            }
            "train.finetune" => self.apply_finetune(value)?,
            _ => return Err(Error::Input(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: format!("expected `key = value`, found {line:?}"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        self.validate()
    }

    pub fn load(preset: Preset, path: Option<&Path>) -> Result<Config> {
        let mut c = Config::preset(preset);
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            c.apply_text(&text, &p.display().to_string())?;
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let positive = [
            t.steps_per_epoch,
            t.scene_batch,
            t.pair_batch,
            self.model.decoder.layers,
            self.model.decoder.queries,
            self.model.decoder.samples_per_level,
            self.model.text.max_len,
            self.model.top_k,
        ];
        if positive.contains(&0) || t.tasks.is_empty() {
            return Err(Error::Input("counts, batch sizes and the task list must be positive".into()));
        }
        if !(self.scene_voxel > 0.0 && self.shape_voxel > 0.0 && t.lr > 0.0) {
            return Err(Error::Input("voxel sizes and learning rate must be positive".into()));
        }
        let w = &self.model.weights;
        if [w.cls, w.bce, w.dice, w.gc, w.cap, w.ret, w.background].iter().any(|v| *v < 0.0) {
            return Err(Error::Input("loss weights must be nonnegative".into()));
        }
        let mut m = self.model.clone();
        m.text.vocab_size = 1;
        m.validate()
    }

    /// Every key with its current value; parsing the result over any preset
    /// reproduces this config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("model.dim", m.decoder.dim.to_string());
        kv(
            "encoder.channels",
            m.encoder.channels.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
        kv("encoder.res_blocks", m.encoder.res_blocks.to_string());
        kv("text.layers", m.text.layers.to_string());
        kv("text.heads", m.text.heads.to_string());
        kv("text.ffn_dim", m.text.ffn_dim.to_string());
        kv("text.max_len", m.text.max_len.to_string());
        kv("text.vocab_cap", self.vocab_cap.to_string());
        kv("text.pool", if m.text.pool == Pool::Mean { "mean" } else { "eos" }.into());
        kv("decoder.layers", m.decoder.layers.to_string());
        kv("decoder.heads", m.decoder.heads.to_string());
        kv("decoder.ffn_dim", m.decoder.ffn_dim.to_string());
        kv("decoder.queries", m.decoder.queries.to_string());
        kv("decoder.samples", m.decoder.samples_per_level.to_string());
        kv("decoder.fourier_bands", m.decoder.fourier_bands.to_string());
        kv("decoder.fourier_period", format!("{:?}", m.decoder.fourier_period));
        kv("decoder.deep_supervision", m.deep_supervision.to_string());
        let w = &m.weights;
        for (k, v) in [
            ("loss.cls", w.cls),
            ("loss.bce", w.bce),
            ("loss.dice", w.dice),
            ("loss.gc", w.gc),
            ("loss.cap", w.cap),
            ("loss.ret", w.ret),
            ("loss.background", w.background),
        ] {
            kv(k, format!("{v:?}"));
        }
        kv("infer.top_k", m.top_k.to_string());
        kv("data.scene_voxel", format!("{:?}", self.scene_voxel));
        kv("data.shape_voxel", format!("{:?}", self.shape_voxel));
        let t = &self.train;
        kv("train.lr", format!("{:?}", t.lr));
        kv("train.warmup", t.warmup.to_string());
        kv("train.decay_at", join(&t.decay_at));
        kv("train.decay_factor", format!("{:?}", t.decay_factor));
        kv("train.weight_decay", format!("{:?}", t.weight_decay));
        kv("train.epochs", t.epochs.to_string());
        kv("train.steps_per_epoch", t.steps_per_epoch.to_string());
        kv("train.scene_batch", t.scene_batch.to_string());
        kv("train.pair_batch", t.pair_batch.to_string());
        kv("train.grad_clip", format!("{:?}", t.grad_clip));
        kv("train.tasks", t.tasks.iter().map(|t| t.name()).collect::<Vec<_>>().join(","));
        kv("train.augment", if t.augment == Augment::None { "none" } else { "default" }.into());
        s
    }
}
