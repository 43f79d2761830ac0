//! Run configuration shared by training, inference and the CLI.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub width: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub token_dim: usize,
    pub key_dim: usize,
    pub pos_dim: usize,
    /// Largest position value fed to the `p+`/`p-` embeddings; larger values are clamped.
    pub max_pos: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            width: 64,
            hidden: 128,
            heads: 2,
            layers: 2,
            token_dim: 48,
            key_dim: 12,
            pos_dim: 4,
            max_pos: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSchedule {
    pub peak_lr: f64,
    pub warmup: u64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub pointer_checkpoint: Option<PathBuf>,
    pub editor_checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelDims,
    pub vocab_cap: usize,
    /// Weight of the deletion loss in the editor objective.
    pub lambda: f64,
    /// Largest placeholder count per slot.
    pub k_max: usize,
    pub max_iter: usize,
    pub beam_width: usize,
    pub max_skeleton_len: usize,
    pub length_normalize: bool,
    pub tie_token_head: bool,
    pub hard_constraints: bool,
    pub max_state_len: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Weight of reference recall against table recall in PARENT.
    pub parent_lambda_mix: f64,
    pub pointer: StageSchedule,
    pub editor: StageSchedule,
    pub seed: u64,
    pub paths: Paths,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            peak_lr: 2e-3,
            warmup: 100,
            epochs: 40,
            batch_size: 8,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelDims::default(),
            vocab_cap: 50_000,
            lambda: 1.0,
            k_max: 8,
            max_iter: 10,
            beam_width: 5,
            max_skeleton_len: 64,
            length_normalize: false,
            tie_token_head: false,
            hard_constraints: true,
            max_state_len: 512,
            clip_norm: 1.0,
            parent_lambda_mix: 0.5,
            pointer: StageSchedule {
                peak_lr: 2e-3,
                warmup: 100,
                epochs: 40,
                batch_size: 8,
            },
            editor: StageSchedule {
                peak_lr: 2e-3,
                warmup: 200,
                epochs: 60,
                batch_size: 8,
            },
            seed: 17,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Full-size settings: base transformer, 420/80/5 embeddings, the
    /// reference warmup schedules and beam 5.
    pub fn full_size() -> Self {
        Self {
            model: ModelDims {
                width: 512,
                hidden: 2048,
                heads: 8,
                layers: 6,
                token_dim: 420,
                key_dim: 80,
                pos_dim: 5,
                max_pos: 30,
            },
            pointer: StageSchedule {
                peak_lr: 3e-4,
                warmup: 4000,
                epochs: 30,
                batch_size: 32,
            },
            editor: StageSchedule {
                peak_lr: 5e-4,
                warmup: 10_000,
                epochs: 30,
                batch_size: 32,
            },
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let positive = [
            ("model.width", m.width),
            ("model.hidden", m.hidden),
            ("model.heads", m.heads),
            ("model.layers", m.layers),
            ("model.token_dim", m.token_dim),
            ("model.key_dim", m.key_dim),
            ("model.pos_dim", m.pos_dim),
            ("model.max_pos", m.max_pos),
            ("k_max", self.k_max),
            ("beam_width", self.beam_width),
            ("max_skeleton_len", self.max_skeleton_len),
            ("max_state_len", self.max_state_len),
            ("pointer.batch_size", self.pointer.batch_size),
            ("editor.batch_size", self.editor.batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if m.width % m.heads != 0 {
            return Err(Error::Config(format!("model.width {} is not divisible by {} heads", m.width, m.heads)));
        }
        if self.vocab_cap < crate::table::RESERVED.len() {
            return Err(Error::Config("vocab_cap must leave room for the reserved tokens".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be a non-negative number".into()));
        }
        for (name, s) in [("pointer", &self.pointer), ("editor", &self.editor)] {
            if !(s.peak_lr > 0.0 && s.peak_lr.is_finite()) {
                return Err(Error::Config(format!("{name}.peak_lr must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.parent_lambda_mix) {
            return Err(Error::Config("parent_lambda_mix must lie in [0, 1]".into()));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config("clip_norm must be a non-negative number".into()));
        }
        if self.max_state_len < 2 {
            return Err(Error::Config("max_state_len must hold the two sentinels".into()));
        }
        Ok(())
    }
}
