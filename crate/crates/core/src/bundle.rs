//! Files stored next to the parameters of a trained model: the run
//! configuration, the vocabularies and the optimizer progress.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::checkpoint;
use crate::numerics::optim::OptimizerState;
use crate::numerics::ParamStore;
use crate::table::Vocabulary;

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const TRAINING_FILE: &str = "training.json";

#[derive(Debug, Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    keys: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub stage: String,
    pub steps: u64,
    pub epochs: usize,
    pub final_loss: f64,
}

/// Everything a model needs besides its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMeta {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub keys: Vocabulary,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

impl ModelMeta {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), self.config.to_json())?;
        write_json(
            &dir.join(VOCAB_FILE),
            &VocabFile {
                tokens: self.vocab.tokens().to_vec(),
                keys: self.keys.tokens().to_vec(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            fs::read_to_string(dir.join(name)).map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(name).display())))
        };
        let config = RunConfig::from_json(&read(CONFIG_FILE)?)?;
        let v: VocabFile = serde_json::from_str(&read(VOCAB_FILE)?)?;
        Ok(Self {
            config,
            vocab: Vocabulary::from_tokens(v.tokens)?,
            keys: Vocabulary::from_tokens(v.keys)?,
        })
    }
}

/// Writes a complete checkpoint directory.
pub fn save_checkpoint(
    dir: &Path,
    meta: &ModelMeta,
    store: &ParamStore,
    optimizer: Option<&OptimizerState>,
    record: Option<&TrainingRecord>,
) -> Result<()> {
    meta.save(dir)?;
    checkpoint::save_params(dir, store)?;
    if let Some(opt) = optimizer {
        checkpoint::save_optimizer(dir, opt)?;
    }
    if let Some(r) = record {
        write_json(&dir.join(TRAINING_FILE), r)?;
    }
    Ok(())
}
