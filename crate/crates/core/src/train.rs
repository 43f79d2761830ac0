//! Training loops for the pointer network and the realizer.
//!
//! Batches are processed example-parallel; per-example gradients are summed
//! in batch order so results do not depend on the thread count.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bundle::{save_checkpoint, ModelMeta, TrainingRecord};
use crate::config::{RunConfig, StageSchedule};
use crate::error::{Error, Result};
use crate::numerics::optim::{adam_step, AdamConfig, LrSchedule, OptimizerState};
use crate::numerics::{Gradients, Graph, ParamStore};
use crate::oracle::{edit_loss, EditSample};
use crate::pointer::{PointerModel, PointerSample};
use crate::realizer::RealizerModel;
use crate::table::{build_vocabulary, Corpus, Example, Vocabulary};

/// One line of training progress, emitted once per epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLog {
    pub stage: &'static str,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_ins: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_del: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_edit: Option<f64>,
    /// Placeholder counts clamped to `k_max` during the epoch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clamped: Option<usize>,
}

impl TrainLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log line serializes")
    }
}

/// Vocabularies built from the training corpus.
pub fn build_meta(corpus: &Corpus, config: &RunConfig) -> Result<ModelMeta> {
    config.validate()?;
    Ok(ModelMeta {
        config: config.clone(),
        vocab: build_vocabulary(corpus, config.vocab_cap)?,
        keys: Vocabulary::from_keys(corpus),
    })
}

fn skeleton_of(ex: &Example) -> Result<&[String]> {
    ex.skeleton
        .as_deref()
        .ok_or_else(|| Error::DataIntegrity(format!("line {}: example has no skeleton; annotate the corpus first", ex.line)))
}

fn example_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut example_rng(seed ^ 0x5eed, epoch, usize::MAX >> 32));
    order
}

fn optimizer(store: &ParamStore, s: &StageSchedule) -> OptimizerState {
    OptimizerState::new(store, LrSchedule::new(s.peak_lr, s.warmup), AdamConfig::default())
}

/// Applies one batch: mean of the per-example gradients, clipping, Adam.
fn apply_batch(store: &mut ParamStore, opt: &mut OptimizerState, grads: &[Gradients], clip: f64) -> f64 {
    let scale = 1.0 / grads.len() as f64;
    for g in grads {
        store.accumulate(g, scale);
    }
    if clip > 0.0 {
        store.clip_grad_norm(clip);
    }
    adam_step(store, opt)
}

#[derive(Debug, Clone)]
pub struct TrainedPointer {
    pub model: PointerModel,
    pub optimizer: OptimizerState,
    pub record: TrainingRecord,
}

impl TrainedPointer {
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.model.meta, &self.model.params, Some(&self.optimizer), Some(&self.record))
    }
}

pub fn pointer_samples(model: &PointerModel, corpus: &Corpus) -> Result<Vec<PointerSample>> {
    corpus.iter().map(|ex| model.sample(&ex.table, skeleton_of(ex)?)).collect()
}

/// Teacher-forced training of the pointer network on annotated skeletons.
pub fn train_pointer(corpus: &Corpus, config: &RunConfig, log: &mut dyn FnMut(&TrainLog)) -> Result<TrainedPointer> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput { op: "train_pointer" });
    }
    let meta = build_meta(corpus, config)?;
    let mut model = PointerModel::new(meta, config.seed)?;
    let samples = pointer_samples(&model, corpus)?;
    let schedule = &config.pointer;
    let mut opt = optimizer(&model.params, schedule);
    let mut last = f64::NAN;
    for epoch in 0..schedule.epochs {
        let order = epoch_order(samples.len(), config.seed, epoch);
        let mut total = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            let results: Vec<Result<(Gradients, f64)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = Graph::new(&model.params);
                    let loss = model.net.loss(&mut g, &samples[i])?;
                    let value = g.value(loss).item();
                    Ok((g.backward(loss)?, value))
                })
                .collect();
            let mut grads = Vec::with_capacity(batch.len());
            for r in results {
                let (g, l) = r?;
                total += l;
                grads.push(g);
            }
            lr = apply_batch(&mut model.params, &mut opt, &grads, config.clip_norm);
        }
        last = total / samples.len() as f64;
        if !last.is_finite() {
            return Err(Error::NonFinite { op: "train_pointer" });
        }
        log(&TrainLog {
            stage: "pointer",
            epoch: epoch + 1,
            step: opt.step,
            lr,
            l1: Some(last),
            l_ins: None,
            l_del: None,
            l_edit: None,
            clamped: None,
        });
    }
    let record = TrainingRecord {
        stage: "pointer".into(),
        steps: opt.step,
        epochs: schedule.epochs,
        final_loss: last,
    };
    Ok(TrainedPointer { model, optimizer: opt, record })
}

#[derive(Debug, Clone)]
pub struct TrainedEditor {
    pub model: RealizerModel,
    pub optimizer: OptimizerState,
    pub record: TrainingRecord,
}

impl TrainedEditor {
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.model.meta, &self.model.params, Some(&self.optimizer), Some(&self.record))
    }
}

pub fn edit_samples(model: &RealizerModel, corpus: &Corpus) -> Result<Vec<EditSample>> {
    let vocab = &model.meta.vocab;
    corpus
        .iter()
        .map(|ex| {
            Ok(EditSample {
                cells: model.cells(&ex.table),
                reference: vocab.ids(&ex.reference),
                skeleton: vocab.ids(skeleton_of(ex)?),
            })
        })
        .collect()
}

/// Imitation training of the realizer: one fresh corruption per example
/// per epoch.
pub fn train_editor(corpus: &Corpus, config: &RunConfig, log: &mut dyn FnMut(&TrainLog)) -> Result<TrainedEditor> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput { op: "train_editor" });
    }
    let meta = build_meta(corpus, config)?;
    let mut model = RealizerModel::new(meta, config.seed.wrapping_add(1))?;
    let samples = edit_samples(&model, corpus)?;
    let schedule = &config.editor;
    let mut opt = optimizer(&model.params, schedule);
    let mut last = f64::NAN;
    for epoch in 0..schedule.epochs {
        let order = epoch_order(samples.len(), config.seed.wrapping_add(1), epoch);
        let (mut ins, mut del, mut clamped) = (0.0, 0.0, 0);
        let mut lr = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            let results: Vec<Result<(Gradients, f64, f64, usize)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = example_rng(config.seed, epoch, i);
                    let mut g = Graph::new(&model.params);
                    let out = edit_loss(&mut g, &model.net, &samples[i], config.lambda, &mut rng)?;
                    Ok((g.backward(out.total)?, out.l_ins, out.l_del, out.clamped))
                })
                .collect();
            let mut grads = Vec::with_capacity(batch.len());
            for r in results {
                let (g, li, ld, c) = r?;
                ins += li;
                del += ld;
                clamped += c;
                grads.push(g);
            }
            lr = apply_batch(&mut model.params, &mut opt, &grads, config.clip_norm);
        }
        let n = samples.len() as f64;
        let (l_ins, l_del) = (ins / n, del / n);
        last = l_ins + config.lambda * l_del;
        if !last.is_finite() {
            return Err(Error::NonFinite { op: "train_editor" });
        }
        if clamped > 0 {
            log::warn!("epoch {}: {clamped} placeholder counts clamped to k_max = {}", epoch + 1, config.k_max);
        }
        log(&TrainLog {
            stage: "editor",
            epoch: epoch + 1,
            step: opt.step,
            lr,
            l1: None,
            l_ins: Some(l_ins),
            l_del: Some(l_del),
            l_edit: Some(last),
            clamped: Some(clamped),
        });
    }
    let record = TrainingRecord {
        stage: "editor".into(),
        steps: opt.step,
        epochs: schedule.epochs,
        final_loss: last,
    };
    Ok(TrainedEditor { model, optimizer: opt, record })
}
