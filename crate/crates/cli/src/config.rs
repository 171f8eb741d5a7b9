//! Flat run configuration: JSON file, then flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use pers_core::codefeat::CodeSourceKind;
use pers_core::encoder::HyperParams;
use pers_core::perscell::{CellConfig, Variant};
use pers_core::probe::ProbeConfig;
use pers_core::simlearner::SimParams;
use pers_core::training::{LossMode, TrainConfig};

use crate::CliError;

/// Every key is optional in the file; commands ask for what they need.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // paths
    pub data: Option<PathBuf>,
    pub vectors: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,

    // model
    pub variant: Option<Variant>,
    pub squash_us: Option<bool>,
    pub d_p: Option<usize>,
    pub d_c: Option<usize>,
    pub d_ct: Option<usize>,
    pub d_cm: Option<usize>,
    pub d_cs: Option<usize>,
    pub d_k: Option<usize>,
    pub max_len: Option<usize>,
    pub layers: Option<usize>,
    pub hash_buckets: Option<usize>,

    // data
    pub test_ratio: Option<f64>,
    pub sliding: Option<bool>,
    pub validate: Option<bool>,

    // training
    pub lr: Option<f64>,
    pub dropout: Option<f64>,
    pub batch_size: Option<usize>,
    pub eval_batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub loss_mode: Option<LossMode>,
    pub negatives: Option<usize>,
    pub clip_norm: Option<f64>,

    // simulator
    pub sim_learners: Option<usize>,
    pub sim_exercises: Option<usize>,
    pub sim_steps: Option<usize>,
    pub sim_mix: Option<[f64; 4]>,
    pub sim_d_c: Option<usize>,

    // probe
    pub probe_trials: Option<usize>,
}

pub const DEFAULT_BUCKETS: usize = 1024;
pub const DEFAULT_TEST_RATIO: f64 = 0.2;

impl RunConfig {
    /// Merge the optional JSON file with `overrides`; overrides win.
    pub fn load(path: Option<&Path>, overrides: Map<String, Value>) -> Result<Self, CliError> {
        let mut map = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
                match serde_json::from_str::<Value>(&text)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
                {
                    Value::Object(m) => m,
                    _ => return Err(CliError::Usage("config must be a JSON object".into())),
                }
            }
            None => Map::new(),
        };
        for (k, v) in overrides {
            if !v.is_null() {
                map.insert(k, v);
            }
        }
        serde_json::from_value(Value::Object(map)).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn require<T: Clone>(value: &Option<T>, key: &str) -> Result<T, CliError> {
        value
            .clone()
            .ok_or_else(|| CliError::Usage(format!("missing required config key `{key}`")))
    }

    pub fn out_dir(&self) -> Result<PathBuf, CliError> {
        Self::require(&self.out, "out")
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            lr: self.lr.unwrap_or(d.lr),
            dropout: self.dropout.unwrap_or(d.dropout),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            eval_batch_size: self.eval_batch_size.unwrap_or(d.eval_batch_size),
            epochs: self.epochs.unwrap_or(d.epochs),
            seed: self.seed(),
            loss_mode: self.loss_mode.unwrap_or(d.loss_mode),
            negatives: self.negatives.unwrap_or(d.negatives),
            clip_norm: self.clip_norm.unwrap_or(d.clip_norm),
            ..d
        }
    }

    pub fn cell(&self) -> CellConfig {
        CellConfig {
            variant: self.variant.unwrap_or(Variant::Pers),
            squash_us: self.squash_us.unwrap_or(false),
        }
    }

    /// Hyper-parameters for `n_exercises`; `d_c` comes from the code source.
    pub fn hyper_params(&self, n_exercises: usize, d_c: usize) -> HyperParams {
        let d = HyperParams::default();
        let d_p = self.d_p.unwrap_or(d.d_p);
        HyperParams {
            d_p,
            d_pos: d_p,
            d_c,
            d_ct: self.d_ct.unwrap_or(d.d_ct),
            d_cm: self.d_cm.unwrap_or(d.d_cm),
            d_cs: self.d_cs.unwrap_or(d.d_cs),
            d_k: self.d_k.unwrap_or(d.d_k),
            max_len: self.max_len.unwrap_or(d.max_len),
            n_exercises,
            layers: self.layers.unwrap_or(d.layers),
        }
    }

    pub fn hashed_kind(&self) -> CodeSourceKind {
        CodeSourceKind::HashedTokens {
            buckets: self.hash_buckets.unwrap_or(DEFAULT_BUCKETS),
            dim: self.d_c.unwrap_or(HyperParams::default().d_c),
        }
    }

    pub fn test_ratio(&self) -> f64 {
        self.test_ratio.unwrap_or(DEFAULT_TEST_RATIO)
    }

    pub fn sim_params(&self) -> SimParams {
        let d = SimParams::default();
        SimParams {
            d_c: self.sim_d_c.unwrap_or(d.d_c),
            ..d
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            seed: self.seed(),
            ..ProbeConfig::default()
        }
    }
}
