use std::fmt::Write as _;

use crate::backbone::{Task, DEFAULT_HIDDEN};
use crate::dependency::MuInit;
use crate::ingest::SplitRatios;
use crate::model::{GraphSpec, Mode};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Adagrad,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Adagrad => "adagrad",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adam" => Some(OptimizerKind::Adam),
            "adagrad" => Some(OptimizerKind::Adagrad),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub k: usize,
    /// Refinement steps.
    pub t: usize,
    /// Inner step size.
    pub eta: f64,
    /// Outer learning rate.
    pub gamma: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub task: Task,
    pub mode: Mode,
    pub zeta: f64,
    pub first_order: bool,
    /// Fixed number of gradient shards per batch. Results depend on this, not on thread count.
    pub shards: usize,
    pub mu_init: MuInit,
    pub init_scale: f64,
    /// Global gradient-norm cap; `0` disables clipping.
    pub clip_norm: f64,
    pub hidden: Vec<usize>,
    pub split: SplitRatios,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 40,
            t: 4,
            eta: 0.1,
            gamma: 1e-3,
            lambda: 1.0,
            batch_size: 2048,
            optimizer: OptimizerKind::Adam,
            epochs: 20,
            patience: 2,
            seed: 0,
            task: Task::Binary,
            mode: Mode::Mdl,
            zeta: 0.0,
            first_order: false,
            shards: 1,
            mu_init: MuInit::Uniform,
            init_scale: 0.01,
            clip_norm: 100.0,
            hidden: DEFAULT_HIDDEN.to_vec(),
            split: SplitRatios::default(),
        }
    }
}

/// Every key accepted by [`TrainConfig::set`], in canonical order.
pub const CONFIG_KEYS: &[&str] = &[
    "k",
    "t",
    "eta",
    "gamma",
    "lambda",
    "batch_size",
    "optimizer",
    "epochs",
    "patience",
    "seed",
    "task",
    "mode",
    "zeta",
    "first_order",
    "shards",
    "mu_init",
    "init_scale",
    "clip_norm",
    "hidden",
    "train_ratio",
    "val_ratio",
    "test_ratio",
];

fn bad(key: &str, value: &str) -> TrainError {
    TrainError::Config(format!("invalid value {value:?} for {key}"))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
    value.trim().parse().map_err(|_| bad(key, value))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, TrainError> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let v = value.trim();
        match key {
            "k" => self.k = parse(key, v)?,
            "t" => self.t = parse(key, v)?,
            "eta" => self.eta = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "optimizer" => self.optimizer = OptimizerKind::parse(v).ok_or_else(|| bad(key, v))?,
            "epochs" => self.epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "task" => self.task = Task::parse(v).map_err(|_| bad(key, v))?,
            "mode" => self.mode = Mode::parse(v).ok_or_else(|| bad(key, v))?,
            "zeta" => self.zeta = parse(key, v)?,
            "first_order" => self.first_order = parse_bool(key, v)?,
            "shards" => self.shards = parse(key, v)?,
            "mu_init" => self.mu_init = MuInit::parse(v).ok_or_else(|| bad(key, v))?,
            "init_scale" => self.init_scale = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "hidden" => {
                self.hidden = v
                    .split(',')
                    .map(|w| parse::<usize>(key, w))
                    .collect::<Result<_, _>>()?
            }
            "train_ratio" => self.split.train = parse(key, v)?,
            "val_ratio" => self.split.validation = parse(key, v)?,
            "test_ratio" => self.split.test = parse(key, v)?,
            other => return Err(TrainError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "k" => self.k.to_string(),
            "t" => self.t.to_string(),
            "eta" => self.eta.to_string(),
            "gamma" => self.gamma.to_string(),
            "lambda" => self.lambda.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "optimizer" => self.optimizer.as_str().to_string(),
            "epochs" => self.epochs.to_string(),
            "patience" => self.patience.to_string(),
            "seed" => self.seed.to_string(),
            "task" => self.task.as_str().to_string(),
            "mode" => self.mode.as_str().to_string(),
            "zeta" => self.zeta.to_string(),
            "first_order" => self.first_order.to_string(),
            "shards" => self.shards.to_string(),
            "mu_init" => self.mu_init.as_str().to_string(),
            "init_scale" => self.init_scale.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "hidden" => self.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            "train_ratio" => self.split.train.to_string(),
            "val_ratio" => self.split.validation.to_string(),
            "test_ratio" => self.split.test.to_string(),
            _ => return None,
        })
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), TrainError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            writeln!(out, "{key}={}", self.get(key).expect("known key")).unwrap();
        }
        out
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(TrainError::Config(format!("{name} must be positive and finite, got {v}")))
            }
        };
        if self.k == 0 {
            return Err(TrainError::Config("k must be at least 1".into()));
        }
        positive("lambda", self.lambda)?;
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(TrainError::Config(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if self.mode == Mode::Mdl && self.t > 0 {
            positive("eta", self.eta)?;
        }
        if self.mode == Mode::GlobalDep && (self.zeta < 0.0 || !self.zeta.is_finite()) {
            return Err(TrainError::Config(format!("zeta must be non-negative, got {}", self.zeta)));
        }
        if self.batch_size == 0 || self.shards == 0 {
            return Err(TrainError::Config("batch_size and shards must be at least 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(TrainError::Config("hidden widths must be positive".into()));
        }
        if self.init_scale < 0.0 || !self.init_scale.is_finite() {
            return Err(TrainError::Config("init_scale must be non-negative".into()));
        }
        if self.clip_norm < 0.0 || self.clip_norm.is_nan() {
            return Err(TrainError::Config("clip_norm must be non-negative".into()));
        }
        self.split.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn graph_spec(&self) -> GraphSpec {
        GraphSpec {
            steps: self.t,
            eta: self.eta,
            lambda: self.lambda,
            mu_init: self.mu_init,
            mode: self.mode,
            zeta: self.zeta,
            first_order: self.first_order,
        }
    }
}
