//! Run configuration: `key = value` lines with `#` comments.
//!
//! Every setting has a default; unknown keys are rejected. The digest is a
//! SHA-256 over all effective settings in key order, so it does not depend
//! on how the file is ordered or which defaults it spells out.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::concept::BiasMode;
use crate::error::{Error, Result};
use crate::networks::{ModelConfig, PromptEncoder};
use crate::prompts::Distance;
use crate::synth::{TaskConfig, TaskId};
use crate::training::{StepSchedule, Strategy, TrainConfig};

/// Environment variable that replaces the configured `seed`.
pub const SEED_ENV: &str = "SPIDER_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_seed: u64,
    pub tasks: Vec<TaskId>,
    pub n: usize,
    pub b: usize,
    pub epochs: usize,
    /// 0 selects `n_train / N`.
    pub iterations_per_epoch: usize,
    pub lr: f64,
    pub decay_size: usize,
    pub decay_rate: f64,
    pub strategy: Strategy,
    pub schedule: StepSchedule,
    pub hflip: bool,
    pub ppa_window: usize,
    pub strict: bool,
    pub n_train: usize,
    pub n_test: usize,
    pub distractor_rate: f64,
    pub bias_mode: BiasMode,
    pub prompt_encoder: PromptEncoder,
    /// Prompt size for random selection.
    pub g: usize,
    /// Cluster count for clustered selection.
    pub k: usize,
    pub distance: Distance,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub prompts_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub g_list: Vec<usize>,
    pub kernels: Vec<usize>,
    /// Epochs of the models trained inside ablations.
    pub ablation_epochs: usize,
    pub new_tasks: Vec<TaskId>,
    pub ft_epochs: usize,
    pub ft_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: 0,
            data_seed: 1,
            tasks: TaskId::ALL.to_vec(),
            n: t.n,
            b: t.b,
            epochs: t.epochs,
            iterations_per_epoch: 0,
            lr: t.lr,
            decay_size: t.decay_size,
            decay_rate: t.decay_rate,
            strategy: t.strategy,
            schedule: t.schedule,
            hflip: t.hflip,
            ppa_window: t.ppa_window,
            strict: false,
            n_train: 64,
            n_test: 32,
            distractor_rate: TaskConfig::new(TaskId::Bright).distractor_rate,
            bias_mode: BiasMode::Projection,
            prompt_encoder: PromptEncoder::Shared,
            g: 8,
            k: 8,
            distance: Distance::Euclidean,
            out_dir: PathBuf::from("runs"),
            checkpoint: None,
            prompts_dir: None,
            seeds: vec![0, 1, 2],
            g_list: vec![1, 2, 4, 8],
            kernels: vec![3, 5, 7],
            ablation_epochs: 12,
            new_tasks: vec![TaskId::Texture, TaskId::Edge],
            ft_epochs: 10,
            ft_lr: 1e-4,
        }
    }
}

fn list<T>(v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',').map(|s| s.trim()).filter(|s| !s.is_empty()).map(f).collect()
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses configuration text. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), i + 1).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key}", i + 1)));
            }
            c.set(key, value, base)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Reads a file and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut c = Self::parse(&text, base)?;
        c.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(c)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = num(SEED_ENV, v)?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<()> {
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let tasks = |v: &str| list(v, TaskId::parse);
        match key {
            "seed" => self.seed = num(key, v)?,
            "data_seed" => self.data_seed = num(key, v)?,
            "tasks" => self.tasks = tasks(v)?,
            "n" => self.n = num(key, v)?,
            "b" => self.b = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "iterations_per_epoch" => self.iterations_per_epoch = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "decay_size" => self.decay_size = num(key, v)?,
            "decay_rate" => self.decay_rate = num(key, v)?,
            "strategy" => self.strategy = Strategy::parse(v)?,
            "schedule" => {
                self.schedule = match v {
                    "per_inner" => StepSchedule::PerInner,
                    "per_outer" => StepSchedule::PerOuter,
                    _ => return Err(Error::Config(format!("schedule: unknown value {v:?}"))),
                }
            }
            "hflip" => self.hflip = boolean(key, v)?,
            "ppa_window" => self.ppa_window = num(key, v)?,
            "strict" => self.strict = boolean(key, v)?,
            "n_train" => self.n_train = num(key, v)?,
            "n_test" => self.n_test = num(key, v)?,
            "distractor_rate" => self.distractor_rate = num(key, v)?,
            "bias_mode" => self.bias_mode = BiasMode::parse(v)?,
            "prompt_encoder" => {
                self.prompt_encoder = match v {
                    "shared" => PromptEncoder::Shared,
                    "independent" => PromptEncoder::Independent,
                    _ => return Err(Error::Config(format!("prompt_encoder: unknown value {v:?}"))),
                }
            }
            "g" => self.g = num(key, v)?,
            "k" => self.k = num(key, v)?,
            "distance" => self.distance = Distance::parse(v)?,
            "out_dir" => self.out_dir = path(v),
            "checkpoint" => self.checkpoint = Some(path(v)),
            "prompts_dir" => self.prompts_dir = Some(path(v)),
            "seeds" => self.seeds = list(v, |s| num(key, s))?,
            "g_list" => self.g_list = list(v, |s| num(key, s))?,
            "kernels" => self.kernels = list(v, |s| num(key, s))?,
            "ablation_epochs" => self.ablation_epochs = num(key, v)?,
            "new_tasks" => self.new_tasks = tasks(v)?,
            "ft_epochs" => self.ft_epochs = num(key, v)?,
            "ft_lr" => self.ft_lr = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.model_config().validate()?;
        if self.n_train < self.n || self.n_test == 0 {
            return Err(Error::Config(format!(
                "n_train ({}) must be at least N ({}) and n_test positive",
                self.n_train, self.n
            )));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(Error::Config("distractor_rate must lie in [0, 1]".into()));
        }
        if self.g == 0 || self.k == 0 || self.g > self.n_train || self.k > self.n_train {
            return Err(Error::Config("g and k must lie in 1..=n_train".into()));
        }
        if self.seeds.is_empty() || self.g_list.is_empty() || self.kernels.is_empty() {
            return Err(Error::Config("seeds, g_list and kernels must be non-empty".into()));
        }
        if self.kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!("kernels must be odd: {:?}", self.kernels)));
        }
        Ok(())
    }

    /// All effective settings as sorted `key = value` pairs.
    pub fn canonical(&self) -> BTreeMap<&'static str, String> {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let names: Vec<&str> = self.tasks.iter().map(|t| t.name()).collect();
        let new: Vec<&str> = self.new_tasks.iter().map(|t| t.name()).collect();
        BTreeMap::from([
            ("seed", self.seed.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("tasks", names.join(",")),
            ("n", self.n.to_string()),
            ("b", self.b.to_string()),
            ("epochs", self.epochs.to_string()),
            ("iterations_per_epoch", self.iterations_per_epoch.to_string()),
            ("lr", format!("{:e}", self.lr)),
            ("decay_size", self.decay_size.to_string()),
            ("decay_rate", format!("{:e}", self.decay_rate)),
            ("strategy", self.strategy.name().to_string()),
            (
                "schedule",
                match self.schedule {
                    StepSchedule::PerInner => "per_inner",
                    StepSchedule::PerOuter => "per_outer",
                }
                .to_string(),
            ),
            ("hflip", self.hflip.to_string()),
            ("ppa_window", self.ppa_window.to_string()),
            ("strict", self.strict.to_string()),
            ("n_train", self.n_train.to_string()),
            ("n_test", self.n_test.to_string()),
            ("distractor_rate", format!("{:e}", self.distractor_rate)),
            ("bias_mode", self.bias_mode.name().to_string()),
            (
                "prompt_encoder",
                match self.prompt_encoder {
                    PromptEncoder::Shared => "shared",
                    PromptEncoder::Independent => "independent",
                }
                .to_string(),
            ),
            ("g", self.g.to_string()),
            ("k", self.k.to_string()),
            (
                "distance",
                match self.distance {
                    Distance::Euclidean => "euclidean",
                    Distance::Cosine => "cosine",
                }
                .to_string(),
            ),
            ("out_dir", self.out_dir.display().to_string()),
            ("checkpoint", opt(&self.checkpoint)),
            ("prompts_dir", opt(&self.prompts_dir)),
            ("seeds", join(&self.seeds)),
            ("g_list", join(&self.g_list)),
            ("kernels", join(&self.kernels)),
            ("ablation_epochs", self.ablation_epochs.to_string()),
            ("new_tasks", new.join(",")),
            ("ft_epochs", self.ft_epochs.to_string()),
            ("ft_lr", format!("{:e}", self.ft_lr)),
        ])
    }

    /// First 16 hex digits of the SHA-256 of the canonical settings.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.canonical() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            tasks: self.tasks.clone(),
            n: self.n,
            b: self.b,
            epochs: self.epochs,
            iterations_per_epoch: (self.iterations_per_epoch > 0).then_some(self.iterations_per_epoch),
            lr: self.lr,
            decay_size: self.decay_size,
            decay_rate: self.decay_rate,
            strategy: self.strategy,
            schedule: self.schedule,
            seed: self.seed,
            hflip: self.hflip,
            ppa_window: self.ppa_window,
            freeze_bn: false,
            strict: self.strict,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            bias_mode: self.bias_mode,
            prompt_encoder: self.prompt_encoder,
            ..ModelConfig::desk()
        }
    }

    /// Dataset settings of `task`. Distractors come from the configured
    /// training tasks, so held-out tasks get none and never show up as
    /// background in training scenes.
    pub fn task_config(&self, task: TaskId) -> TaskConfig {
        let distractors = if self.tasks.contains(&task) { self.tasks.clone() } else { Vec::new() };
        TaskConfig {
            n_train: self.n_train,
            n_test: self.n_test,
            distractor_rate: self.distractor_rate,
            distractors,
            ..TaskConfig::new(task)
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("model.spdr"))
    }

    pub fn prompts_path(&self) -> PathBuf {
        self.prompts_dir.clone().unwrap_or_else(|| self.out_dir.join("prompts"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::parse("# desk run\nepochs = 3\n  tasks = BRIGHT, EDGE # two\n", Path::new("/tmp")).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.tasks, vec![TaskId::Bright, TaskId::Edge]);
        assert_eq!(c.n, 8);
    }

    #[test]
    fn unknown_and_malformed_keys() {
        assert!(matches!(RunConfig::parse("colour = red", Path::new(".")), Err(Error::Config(_))));
        assert!(RunConfig::parse("epochs", Path::new(".")).is_err());
        assert!(RunConfig::parse("n = 8\nn = 8", Path::new(".")).is_err());
        assert!(RunConfig::parse("b = 8", Path::new(".")).is_err());
    }

    #[test]
    fn digest_ignores_order_and_explicit_defaults() {
        let a = RunConfig::parse("epochs = 3\nseed = 4", Path::new("/x")).unwrap();
        let b = RunConfig::parse("seed = 4\n\nepochs = 3\nn = 8", Path::new("/x")).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = RunConfig::parse("seed = 5\nepochs = 3", Path::new("/x")).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn seed_override() {
        let mut c = RunConfig::default();
        c.apply_seed_override(Some("42")).unwrap();
        assert_eq!(c.seed, 42);
        assert!(c.apply_seed_override(Some("x")).is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let c = RunConfig::parse("out_dir = out\ncheckpoint = /abs/m.spdr", Path::new("/base")).unwrap();
        assert_eq!(c.out_dir, PathBuf::from("/base/out"));
        assert_eq!(c.checkpoint_path(), PathBuf::from("/abs/m.spdr"));
    }
}
