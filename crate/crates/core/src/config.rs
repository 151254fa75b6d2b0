//! Run configuration: named presets, a flat TOML key/value file, and the
//! defaults both start from.
//!
//! Preset names follow `mnist-<scale>-<method>`:
//!
//! | scale   | training data                 |
//! |---------|-------------------------------|
//! | `full`  | all 60 000 samples            |
//! | `10pct` | 600 per class                 |
//! | `1pct`  | 60 per class                  |
//! | `10pc`  | 10 per class                  |
//!
//! and `<method>` is either `<opt>-b<N>` (fixed batch `N`) or
//! `dba-<opt>-<var|grad>`, with `<opt>` one of `sgd`, `adam`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SubsetMode;
use crate::dba::{DbaConfig, GradEmaSource, GradMetricKind, MarginLossKind};
use crate::optim::{AdamConfig, PlateauConfig, SgdConfig};
use crate::{Error, Result};

/// Upper bound on the automatic maximum batch size.
pub const MAX_BATCH_CAP: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub name: String,
    pub optimizer: OptimizerKind,
    pub sgd: SgdConfig,
    pub adam: AdamConfig,
    pub scheduler: bool,
    pub plateau: PlateauConfig,
    /// Fixed batch size, or the starting size when DBA is on.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub subset: SubsetMode,
    pub dba_enabled: bool,
    /// `max_batch` here is ignored; see [`RunConfig::dba_max_batch`].
    pub dba: DbaConfig,
    /// `None` means `min(|train|, 2048)`.
    pub dba_max_batch: Option<usize>,
    pub seeds: Vec<u64>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            optimizer: OptimizerKind::Sgd,
            sgd: SgdConfig::default(),
            adam: AdamConfig::default(),
            scheduler: true,
            plateau: PlateauConfig::default(),
            batch_size: 64,
            max_epochs: 150,
            subset: SubsetMode::Fraction(1.0),
            dba_enabled: false,
            dba: DbaConfig {
                max_batch: MAX_BATCH_CAP,
                ..DbaConfig::default()
            },
            dba_max_batch: None,
            seeds: vec![0, 1, 2, 3, 4],
            data_dir: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// DBA settings with the maximum batch resolved against the training set
    /// size, or `None` for a fixed-batch run.
    pub fn resolved_dba(&self, train_len: usize) -> Result<Option<DbaConfig>> {
        if !self.dba_enabled {
            return Ok(None);
        }
        let max_batch = self.dba_max_batch.unwrap_or_else(|| train_len.min(MAX_BATCH_CAP));
        let cfg = DbaConfig { max_batch, ..self.dba };
        cfg.validate()?;
        if !(cfg.min_batch..=cfg.max_batch).contains(&self.batch_size) {
            return Err(Error::Config(format!(
                "initial batch size {} outside [{}, {}]",
                self.batch_size, cfg.min_batch, cfg.max_batch
            )));
        }
        Ok(Some(cfg))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        crate::data::SubsetSpec { mode: self.subset, seed: 0 }.validate()?;
        if self.dba_enabled {
            let bound = self.dba_max_batch.unwrap_or(MAX_BATCH_CAP);
            DbaConfig { max_batch: bound, ..self.dba }.validate()?;
            if self.batch_size < self.dba.min_batch || self.batch_size > bound {
                return Err(Error::Config(format!(
                    "initial batch size {} outside [{}, {}]",
                    self.batch_size, self.dba.min_batch, bound
                )));
            }
        }
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        match self.optimizer {
            OptimizerKind::Sgd => self.sgd.lr,
            OptimizerKind::Adam => self.adam.lr,
        }
    }
}

pub fn preset_names() -> Vec<String> {
    let mut names = Vec::new();
    for scale in ["full", "10pct", "1pct", "10pc"] {
        let batches: &[usize] = if scale == "10pc" { &[25, 50, 100] } else { &[64, 128, 256] };
        for opt in ["sgd", "adam"] {
            for metric in ["var", "grad"] {
                names.push(format!("mnist-{scale}-dba-{opt}-{metric}"));
            }
            for b in batches {
                names.push(format!("mnist-{scale}-{opt}-b{b}"));
            }
        }
    }
    names
}

pub fn preset(name: &str) -> Result<RunConfig> {
    let unknown = || Error::Config(format!("unknown preset `{name}`; run `dba presets` for the list"));
    let rest = name.strip_prefix("mnist-").ok_or_else(unknown)?;
    let (scale, method) = rest.split_once('-').ok_or_else(unknown)?;
    let mut cfg = RunConfig {
        name: name.to_string(),
        ..RunConfig::default()
    };
    let scarce = match scale {
        "full" => false,
        "10pct" => {
            cfg.subset = SubsetMode::PerClass(600);
            false
        }
        "1pct" => {
            cfg.subset = SubsetMode::PerClass(60);
            false
        }
        "10pc" => {
            cfg.subset = SubsetMode::PerClass(10);
            cfg.max_epochs = 600;
            true
        }
        _ => return Err(unknown()),
    };
    let parts: Vec<&str> = method.split('-').collect();
    match parts.as_slice() {
        ["dba", opt, metric] => {
            cfg.optimizer = parse_optimizer(opt).ok_or_else(unknown)?;
            cfg.dba_enabled = true;
            cfg.dba.metric = parse_metric(metric).ok_or_else(unknown)?;
            if scarce {
                cfg.batch_size = 100;
                cfg.dba.stride_size = 10;
                cfg.dba.min_batch = 20;
                cfg.dba_max_batch = Some(100);
            } else {
                cfg.batch_size = 128;
            }
        }
        [opt, batch] => {
            cfg.optimizer = parse_optimizer(opt).ok_or_else(unknown)?;
            cfg.batch_size = batch
                .strip_prefix('b')
                .and_then(|b| b.parse().ok())
                .filter(|&b| b > 0)
                .ok_or_else(unknown)?;
        }
        _ => return Err(unknown()),
    }
    Ok(cfg)
}

pub fn parse_optimizer(s: &str) -> Option<OptimizerKind> {
    match s {
        "sgd" => Some(OptimizerKind::Sgd),
        "adam" => Some(OptimizerKind::Adam),
        _ => None,
    }
}

pub fn parse_metric(s: &str) -> Option<GradMetricKind> {
    match s {
        "var" | "variance" | "variance_norm" => Some(GradMetricKind::VarianceNorm),
        "grad" | "gradient" | "gradient_norm" => Some(GradMetricKind::GradientNorm),
        _ => None,
    }
}

/// Flat key/value run file. Every key is optional and overrides the preset
/// named by `preset` (or the built-in defaults).
///
/// ```toml
/// preset = "mnist-1pct-dba-sgd-var"
/// max_epochs = 300
/// seeds = [0, 1, 2]
/// stride_size = 8
/// ```
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<String>,
    pub name: Option<String>,
    pub optimizer: Option<String>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub nesterov: Option<bool>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub scheduler: Option<bool>,
    pub plateau_factor: Option<f64>,
    pub plateau_patience: Option<usize>,
    pub plateau_threshold: Option<f64>,
    pub min_lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub fraction: Option<f64>,
    pub per_class: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub dba: Option<bool>,
    pub stride_size: Option<usize>,
    pub metric: Option<String>,
    pub mu: Option<f64>,
    pub smoothing: Option<f64>,
    pub delta: Option<usize>,
    pub min_batch: Option<usize>,
    pub max_batch: Option<usize>,
    /// `slope` or `abs_difference`.
    pub loss: Option<String>,
    pub alpha: Option<f64>,
    /// `chosen` or `full_batch`.
    pub grad_ema: Option<String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::serde(path, e))
    }

    /// Starts from `preset` (or the defaults) and applies every key present.
    pub fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.preset {
            Some(p) => preset(p)?,
            None => RunConfig::default(),
        };
        self.apply(base)
    }

    pub fn apply(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        macro_rules! set {
            ($src:ident => $($dst:tt)+) => {
                if let Some(v) = self.$src.clone() {
                    cfg.$($dst)+ = v;
                }
            };
        }
        set!(name => name);
        if let Some(o) = &self.optimizer {
            cfg.optimizer =
                parse_optimizer(o).ok_or_else(|| Error::Config(format!("unknown optimizer `{o}`")))?;
        }
        if let Some(lr) = self.lr {
            cfg.sgd.lr = lr;
            cfg.adam.lr = lr;
        }
        set!(momentum => sgd.momentum);
        set!(nesterov => sgd.nesterov);
        if let Some(wd) = self.weight_decay {
            cfg.sgd.weight_decay = wd;
            cfg.adam.weight_decay = wd;
        }
        set!(beta1 => adam.beta1);
        set!(beta2 => adam.beta2);
        set!(eps => adam.eps);
        set!(scheduler => scheduler);
        set!(plateau_factor => plateau.factor);
        set!(plateau_patience => plateau.patience);
        set!(plateau_threshold => plateau.threshold);
        set!(min_lr => plateau.min_lr);
        set!(batch_size => batch_size);
        set!(max_epochs => max_epochs);
        match (self.fraction, self.per_class) {
            (Some(_), Some(_)) => return Err(Error::Config("set either `fraction` or `per_class`, not both".into())),
            (Some(f), None) => cfg.subset = SubsetMode::Fraction(f),
            (None, Some(k)) => cfg.subset = SubsetMode::PerClass(k),
            (None, None) => {}
        }
        set!(seeds => seeds);
        if let Some(d) = &self.data_dir {
            cfg.data_dir = Some(d.clone());
        }
        set!(out_dir => out_dir);
        set!(dba => dba_enabled);
        set!(stride_size => dba.stride_size);
        if let Some(m) = &self.metric {
            cfg.dba.metric = parse_metric(m).ok_or_else(|| Error::Config(format!("unknown metric `{m}`")))?;
        }
        set!(mu => dba.mu);
        set!(smoothing => dba.smoothing);
        set!(delta => dba.delta);
        set!(min_batch => dba.min_batch);
        if let Some(m) = self.max_batch {
            cfg.dba_max_batch = Some(m);
        }
        match self.loss.as_deref() {
            None => {}
            Some("slope") => cfg.dba.loss = MarginLossKind::SlopeMargin,
            Some("abs_difference") => {
                let alpha = self.alpha.ok_or_else(|| {
                    Error::Config("`loss = \"abs_difference\"` needs an explicit `alpha`".into())
                })?;
                cfg.dba.loss = MarginLossKind::AbsDifference { alpha };
            }
            Some(other) => return Err(Error::Config(format!("unknown loss `{other}`"))),
        }
        if self.alpha.is_some() && !matches!(cfg.dba.loss, MarginLossKind::AbsDifference { .. }) {
            return Err(Error::Config("`alpha` only applies to `loss = \"abs_difference\"`".into()));
        }
        match self.grad_ema.as_deref() {
            None => {}
            Some("chosen") => cfg.dba.grad_ema_source = GradEmaSource::Chosen,
            Some("full_batch") => cfg.dba.grad_ema_source = GradEmaSource::FullBatch,
            Some(other) => return Err(Error::Config(format!("unknown grad_ema source `{other}`"))),
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
