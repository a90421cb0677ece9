//! Run configuration: `key = value` lines, `#` comments, unknown keys
//! rejected. Command-line flags are applied afterwards as overrides.

use std::path::{Path, PathBuf};

use miqrec_core::train::TrainConfig;
use miqrec_core::ModelConfig;

use crate::error::{CliError, Result};
use crate::formats::InputFormat;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("data", "dataset cache written by `ingest` (empty: <out>/dataset.miqd)"),
    ("out", "output directory"),
    ("format", "input format for `ingest`: umt, umrt or movielens"),
    ("kcore", "k-core threshold applied by `ingest`"),
    ("checkpoint", "checkpoint for `eval` (empty: <out>/best.miqr)"),
    ("d", "embedding size"),
    ("max_len", "sequence length T"),
    ("blocks", "transformer blocks L"),
    ("attention", "single or miq"),
    ("m", "query window size"),
    ("dropout", "dropout rate"),
    ("aggregator", "query-level aggregation: context, last or full"),
    ("dummy_kv", "real positions may attend to dummy keys/values: on or off"),
    ("heads", "attention heads"),
    ("seed", "seed for initialization, shuffling, sampling and dropout"),
    ("lr", "Adam learning rate"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("eps", "Adam denominator constant"),
    ("batch_size", "users per batch"),
    ("max_epochs", "epoch budget"),
    ("eval_every", "epochs between validation runs"),
    ("patience", "validation runs without improvement before stopping"),
    ("exclude_history", "drop the user's history from ranking candidates: on or off"),
    ("gradcheck_items", "item vocabulary of the `gradcheck` model"),
    ("bench_t", "comma-separated sequence lengths for `bench`"),
    ("bench_d", "comma-separated embedding sizes for `bench`"),
    ("bench_m", "comma-separated query windows for `bench`"),
    ("sweep_m", "comma-separated query windows for `sweep`"),
    ("sweep_d", "comma-separated embedding sizes for `sweep`"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub format: InputFormat,
    pub kcore: usize,
    pub checkpoint: Option<PathBuf>,
    /// Architecture; `n_items` is filled in from the dataset.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gradcheck_items: usize,
    pub bench_t: Vec<usize>,
    pub bench_d: Vec<usize>,
    pub bench_m: Vec<usize>,
    pub sweep_m: Vec<usize>,
    pub sweep_d: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            out: PathBuf::from("out"),
            format: InputFormat::Umt,
            kcore: 5,
            checkpoint: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            gradcheck_items: 12,
            bench_t: vec![32, 64, 128],
            bench_d: vec![16, 32],
            bench_m: vec![1, 2, 4, 8],
            sweep_m: vec![1, 5, 10],
            sweep_d: vec![16, 32, 50],
        }
    }
}

fn on_off(v: &str) -> std::result::Result<bool, String> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(format!("expected on or off, got `{v}`")),
    }
}

fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
    let out: Vec<usize> = v
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| format!("bad list entry `{s}`")))
        .collect::<std::result::Result<_, _>>()?;
    if out.is_empty() || out.contains(&0) {
        return Err(format!("list `{v}` must hold positive integers"));
    }
    Ok(out)
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn on_off_str(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_value(key, value).map_err(|m| CliError::Config(format!("{key}: {m}")))
    }

    fn set_value(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let num = |v: &str| v.parse::<usize>().map_err(|_| format!("expected a non-negative integer, got `{v}`"));
        let real = |v: &str| v.parse::<f64>().map_err(|_| format!("expected a number, got `{v}`"));
        let core = |e: miqrec_core::Error| e.to_string();
        match key {
            "data" => self.data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out" => self.out = PathBuf::from(v),
            "format" => self.format = v.parse().map_err(|e: CliError| e.to_string())?,
            "kcore" => self.kcore = num(v)?,
            "checkpoint" => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "d" => self.model.d = num(v)?,
            "max_len" => self.model.max_len = num(v)?,
            "blocks" => self.model.blocks = num(v)?,
            "attention" => self.model.attention = v.parse().map_err(core)?,
            "m" => self.model.m = num(v)?,
            "dropout" => self.model.dropout = real(v)?,
            "aggregator" => self.model.aggregator = v.parse().map_err(core)?,
            "dummy_kv" => self.model.dummy_kv = on_off(v)?,
            "heads" => self.model.heads = num(v)?,
            "seed" => {
                let s = v.parse::<u64>().map_err(|_| format!("expected a seed, got `{v}`"))?;
                self.model.seed = s;
                self.train.seed = s;
            }
            "lr" => self.train.adam.lr = real(v)?,
            "beta1" => self.train.adam.beta1 = real(v)?,
            "beta2" => self.train.adam.beta2 = real(v)?,
            "eps" => self.train.adam.eps = real(v)?,
            "batch_size" => self.train.batch_size = num(v)?,
            "max_epochs" => self.train.max_epochs = num(v)?,
            "eval_every" => self.train.eval_every = num(v)?,
            "patience" => self.train.patience = num(v)?,
            "exclude_history" => self.train.exclude_history = on_off(v)?,
            "gradcheck_items" => self.gradcheck_items = num(v)?,
            "bench_t" => self.bench_t = list(v)?,
            "bench_d" => self.bench_d = list(v)?,
            "bench_m" => self.bench_m = list(v)?,
            "sweep_m" => self.sweep_m = list(v)?,
            "sweep_d" => self.sweep_d = list(v)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Applies a config file's lines in order.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{}:{}: expected `key = value`", origin.display(), i + 1)))?;
            let k = k.trim();
            self.set_value(k, v).map_err(|m| CliError::Config(format!("{}:{}: {k}: {m}", origin.display(), i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text, path)?;
        Ok(c)
    }

    pub fn value_of(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let t = &self.train;
        Some(match key {
            "data" => self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "out" => self.out.display().to_string(),
            "format" => self.format.to_string(),
            "kcore" => self.kcore.to_string(),
            "checkpoint" => self.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "d" => m.d.to_string(),
            "max_len" => m.max_len.to_string(),
            "blocks" => m.blocks.to_string(),
            "attention" => m.attention.to_string(),
            "m" => m.m.to_string(),
            "dropout" => m.dropout.to_string(),
            "aggregator" => m.aggregator.to_string(),
            "dummy_kv" => on_off_str(m.dummy_kv).into(),
            "heads" => m.heads.to_string(),
            "seed" => m.seed.to_string(),
            "lr" => t.adam.lr.to_string(),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "eps" => t.adam.eps.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "eval_every" => t.eval_every.to_string(),
            "patience" => t.patience.to_string(),
            "exclude_history" => on_off_str(t.exclude_history).into(),
            "gradcheck_items" => self.gradcheck_items.to_string(),
            "bench_t" => join(&self.bench_t),
            "bench_d" => join(&self.bench_d),
            "bench_m" => join(&self.bench_m),
            "sweep_m" => join(&self.sweep_m),
            "sweep_d" => join(&self.sweep_d),
            _ => return None,
        })
    }

    /// Every key with its effective value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|(k, _)| format!("{k} = {}\n", self.value_of(k).expect("listed key"))).collect()
    }

    /// Model configuration for a vocabulary of `n_items`.
    pub fn model_for(&self, n_items: usize) -> Result<ModelConfig> {
        let c = ModelConfig { n_items, ..self.model.clone() };
        c.validate()?;
        Ok(c)
    }

    pub fn data_path(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.out.join(crate::commands::DATASET_FILE))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join(crate::commands::CHECKPOINT_FILE))
    }
}
