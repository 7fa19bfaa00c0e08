//! Run configuration: flat key=value text with dotted section keys.
//!
//! Every field has a recorded default (see [`RunConfig::default`]); unknown
//! keys are rejected with the offending line number so typos can't silently
//! fall back to defaults.

use std::path::{Path, PathBuf};

use vismoe::pipeline::{StageConfig, StageKind};
use vismoe::profile::ProfileId;
use vismoe::{Error, Result};

/// Per-stage hyperparameter overrides; `None` keeps the stage default.
#[derive(Debug, Clone, Default)]
pub struct StageOverrides {
    pub lr: Option<f64>,
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    pub eval_cadence: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub profile: ProfileId,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub metrics_path: PathBuf,
    /// Give the router a trainable bias (off matches the plain linear form).
    pub router_bias: bool,
    /// Default expert override for `route` when the flag is absent.
    pub route_override: Option<usize>,
    /// Stage 2: also train the decoder input embeddings.
    pub train_embedding: bool,
    /// Stage 2: keep training the router via an auxiliary loss.
    pub router_trainable: bool,
    pub router_stage: StageOverrides,
    pub pretrain_stage: StageOverrides,
    pub finetune_stage: StageOverrides,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            profile: ProfileId::Desk,
            seed: 42,
            data_dir: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            metrics_path: PathBuf::from("metrics.log"),
            router_bias: false,
            route_override: None,
            train_embedding: true,
            router_trainable: false,
            router_stage: StageOverrides::default(),
            pretrain_stage: StageOverrides::default(),
            finetune_stage: StageOverrides::default(),
        }
    }
}

fn parse_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<RunConfig> {
        let mut rc = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(path, lineno, format!("expected key=value, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            rc.apply(key, value)
                .map_err(|detail| parse_err(path, lineno, detail))?;
        }
        Ok(rc)
    }

    /// Apply one key; returns a human-readable message on failure so the
    /// caller can attach the line number.
    fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("invalid value `{value}` for key `{key}`"))
        }
        fn flag(key: &str, value: &str) -> std::result::Result<bool, String> {
            match value {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                _ => Err(format!("invalid boolean `{value}` for key `{key}`")),
            }
        }

        match key {
            "profile" => {
                self.profile = ProfileId::parse(value).map_err(|e| e.to_string())?;
            }
            "seed" => self.seed = num(key, value)?,
            "data.dir" => self.data_dir = PathBuf::from(value),
            "checkpoint.dir" => self.checkpoint_dir = PathBuf::from(value),
            "metrics.path" => self.metrics_path = PathBuf::from(value),
            "router.bias" => self.router_bias = flag(key, value)?,
            "route.override" => {
                self.route_override = match value {
                    "none" => None,
                    _ => Some(num(key, value)?),
                };
            }
            "stage.pretrain.train_embedding" => self.train_embedding = flag(key, value)?,
            "stage.pretrain.router_trainable" => self.router_trainable = flag(key, value)?,
            _ => {
                let (stage, field) = key
                    .strip_prefix("stage.")
                    .and_then(|rest| rest.split_once('.'))
                    .ok_or_else(|| format!("unknown key `{key}`"))?;
                let over = match stage {
                    "router" => &mut self.router_stage,
                    "pretrain" => &mut self.pretrain_stage,
                    "finetune" => &mut self.finetune_stage,
                    _ => return Err(format!("unknown key `{key}`")),
                };
                match field {
                    "lr" => over.lr = Some(num(key, value)?),
                    "steps" => over.steps = Some(num(key, value)?),
                    "batch" => over.batch = Some(num(key, value)?),
                    "eval_cadence" => over.eval_cadence = Some(num(key, value)?),
                    _ => return Err(format!("unknown key `{key}`")),
                }
            }
        }
        Ok(())
    }

    /// The effective configuration for one stage: stage defaults, then the
    /// file's overrides. CLI flags are layered on top by the caller.
    pub fn stage_config(&self, stage: StageKind) -> StageConfig {
        let mut cfg = StageConfig::desk_default(stage, self.seed);
        let over = match stage {
            StageKind::Router => &self.router_stage,
            StageKind::Pretrain => &self.pretrain_stage,
            StageKind::Finetune => &self.finetune_stage,
        };
        if let Some(lr) = over.lr {
            cfg.learning_rate = lr;
        }
        if let Some(steps) = over.steps {
            cfg.steps = steps;
        }
        if let Some(batch) = over.batch {
            cfg.batch_size = batch;
        }
        if let Some(cadence) = over.eval_cadence {
            cfg.eval_cadence = cadence;
        }
        if stage == StageKind::Pretrain {
            cfg.train_embedding = self.train_embedding;
            cfg.router_trainable = self.router_trainable;
        }
        cfg
    }
}
