//! Run configuration in a flat `key = value` text format.
//!
//! ```text
//! # paths are resolved relative to the config file
//! train_path = data/train.jsonl
//! dev_path = data/dev.jsonl
//! schema_path = data/schema.json
//! checkpoint_dir = runs/a
//! d_model = 32
//! learning_rate = 0.05
//! no_turn_mask = false
//! ```
//!
//! Every field is optional and falls back to [`RunConfig::default`]. Unknown
//! keys are rejected.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::DEFAULT_LENGTH_BUCKETS;
use crate::model::{Ablation, ModelDims};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Micro,
    Macro,
    Weighted,
    MicroExclNeutral,
    F1c,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Micro => "micro",
            MetricKind::Macro => "macro",
            MetricKind::Weighted => "weighted",
            MetricKind::MicroExclNeutral => "micro_excl_neutral",
            MetricKind::F1c => "f1c",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        [
            MetricKind::Micro,
            MetricKind::Macro,
            MetricKind::Weighted,
            MetricKind::MicroExclNeutral,
            MetricKind::F1c,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub schema_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,

    pub d_model: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub heads: usize,
    pub graph_layers: usize,
    pub gtn_steps: usize,
    pub k_max: usize,
    pub max_len: usize,
    pub max_speakers: usize,

    pub optimizer: String,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dropout: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Stop once train micro-F1 reaches this value.
    pub target_train_f1: Option<f64>,
    /// Evaluate the dev split every this many epochs (0 = never).
    pub eval_every: usize,

    pub no_turn_mask: bool,
    pub no_special_tokens: bool,
    pub intra_turn_only: bool,

    pub metrics: Vec<MetricKind>,
    /// Overrides the schema's neutral class for micro-F1 excluding neutral.
    pub neutral_class: Option<String>,
    pub length_buckets: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train_path: None,
            dev_path: None,
            test_path: None,
            schema_path: None,
            checkpoint_dir: None,
            d_model: 32,
            d_ff: 64,
            layers: 2,
            heads: 4,
            graph_layers: 2,
            gtn_steps: 2,
            k_max: 2,
            max_len: 128,
            max_speakers: 8,
            optimizer: "sgd".into(),
            learning_rate: 0.1,
            epochs: 500,
            batch_size: 8,
            seed: 0,
            dropout: 0.0,
            grad_clip: 1.0,
            target_train_f1: None,
            eval_every: 1,
            no_turn_mask: false,
            no_special_tokens: false,
            intra_turn_only: false,
            metrics: vec![
                MetricKind::Micro,
                MetricKind::Macro,
                MetricKind::Weighted,
                MetricKind::MicroExclNeutral,
            ],
            neutral_class: None,
            length_buckets: DEFAULT_LENGTH_BUCKETS.to_vec(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true/false, got {value:?}"
        ))),
    }
}

fn parse_list<T>(value: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect()
}

impl RunConfig {
    /// Parses config text; relative paths are joined onto `base_dir`.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value.trim(), base_dir)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent())
    }

    pub fn set(&mut self, key: &str, value: &str, base_dir: Option<&Path>) -> Result<()> {
        let path = |v: &str| -> Option<PathBuf> {
            if v.is_empty() || v == "none" {
                return None;
            }
            let p = PathBuf::from(v);
            Some(match base_dir {
                Some(base) if p.is_relative() => base.join(p),
                _ => p,
            })
        };
        match key {
            "train_path" => self.train_path = path(value),
            "dev_path" => self.dev_path = path(value),
            "test_path" => self.test_path = path(value),
            "schema_path" => self.schema_path = path(value),
            "checkpoint_dir" => self.checkpoint_dir = path(value),
            "d_model" => self.d_model = parse_num(key, value)?,
            "d_ff" => self.d_ff = parse_num(key, value)?,
            "layers" => self.layers = parse_num(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "graph_layers" => self.graph_layers = parse_num(key, value)?,
            "gtn_steps" => self.gtn_steps = parse_num(key, value)?,
            "k_max" => self.k_max = parse_num(key, value)?,
            "max_len" => self.max_len = parse_num(key, value)?,
            "max_speakers" => self.max_speakers = parse_num(key, value)?,
            "optimizer" => self.optimizer = value.to_string(),
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "dropout" => self.dropout = parse_num(key, value)?,
            "grad_clip" => self.grad_clip = parse_num(key, value)?,
            "target_train_f1" => {
                self.target_train_f1 = if value == "none" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "no_turn_mask" => self.no_turn_mask = parse_bool(key, value)?,
            "no_special_tokens" => self.no_special_tokens = parse_bool(key, value)?,
            "intra_turn_only" => self.intra_turn_only = parse_bool(key, value)?,
            "metrics" => self.metrics = parse_list(value, MetricKind::parse)?,
            "neutral_class" => {
                self.neutral_class =
                    (value != "none" && !value.is_empty()).then(|| value.to_string())
            }
            "length_buckets" => self.length_buckets = parse_list(value, |v| parse_num(key, v))?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.dims(1, 1).validate()?;
        self.ablation().validate()?;
        if self.optimizer != "sgd" {
            return Err(Error::Config(format!(
                "optimizer {:?} is not implemented; use sgd",
                self.optimizer
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        if self.length_buckets.first() != Some(&0)
            || self.length_buckets.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(
                "length_buckets must start at 0 and increase".into(),
            ));
        }
        Ok(())
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            no_turn_mask: self.no_turn_mask,
            no_special_tokens: self.no_special_tokens,
            intra_turn_only: self.intra_turn_only,
        }
    }

    pub fn set_ablation(&mut self, a: Ablation) {
        self.no_turn_mask = a.no_turn_mask;
        self.no_special_tokens = a.no_special_tokens;
        self.intra_turn_only = a.intra_turn_only;
    }

    pub fn dims(&self, vocab_size: usize, num_classes: usize) -> ModelDims {
        ModelDims {
            vocab_size,
            num_classes,
            d_model: self.d_model,
            d_ff: self.d_ff,
            layers: self.layers,
            heads: self.heads,
            graph_layers: self.graph_layers,
            gtn_steps: self.gtn_steps,
            k_max: self.k_max,
            max_len: self.max_len,
            max_speakers: self.max_speakers,
        }
    }

    pub fn wants(&self, m: MetricKind) -> bool {
        self.metrics.contains(&m)
    }

    /// Serializes every field; [`RunConfig::parse`] reads it back unchanged.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or_else(|| "none".to_string(), |p| p.display().to_string())
        };
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("train_path", path(&self.train_path));
        kv("dev_path", path(&self.dev_path));
        kv("test_path", path(&self.test_path));
        kv("schema_path", path(&self.schema_path));
        kv("checkpoint_dir", path(&self.checkpoint_dir));
        kv("d_model", self.d_model.to_string());
        kv("d_ff", self.d_ff.to_string());
        kv("layers", self.layers.to_string());
        kv("heads", self.heads.to_string());
        kv("graph_layers", self.graph_layers.to_string());
        kv("gtn_steps", self.gtn_steps.to_string());
        kv("k_max", self.k_max.to_string());
        kv("max_len", self.max_len.to_string());
        kv("max_speakers", self.max_speakers.to_string());
        kv("optimizer", self.optimizer.clone());
        kv("learning_rate", self.learning_rate.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("dropout", self.dropout.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv(
            "target_train_f1",
            self.target_train_f1
                .map_or_else(|| "none".into(), |v| v.to_string()),
        );
        kv("eval_every", self.eval_every.to_string());
        kv("no_turn_mask", self.no_turn_mask.to_string());
        kv("no_special_tokens", self.no_special_tokens.to_string());
        kv("intra_turn_only", self.intra_turn_only.to_string());
        kv(
            "metrics",
            self.metrics
                .iter()
                .map(|m| m.name())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv(
            "neutral_class",
            self.neutral_class.clone().unwrap_or_else(|| "none".into()),
        );
        kv(
            "length_buckets",
            self.length_buckets
                .iter()
                .map(|b| b.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        out
    }
}
