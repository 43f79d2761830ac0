//! Registered finite-difference checks: every differentiable op and layer
//! plus both full models, each on small random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ModelDims, RunConfig};
use crate::encoder::{CellInputs, TableEncoder};
use crate::error::Result;
use crate::numerics::gradcheck::{check_gradients, GradCheckOptions};
use crate::numerics::layers::{DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::params::glorot_uniform;
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::oracle::{edit_loss, EditSample};
use crate::pointer::PointerModel;
use crate::realizer::RealizerModel;
use crate::skeleton::annotate_corpus;
use crate::synth::{generate, TemplateSpec};
use crate::table::{StopWordList, PLH};
use crate::train::{build_meta, edit_samples, pointer_samples};

/// Required bound on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCase {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
}

fn run<F>(name: &str, store: &mut ParamStore, f: F) -> Result<GradCase>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let opts = GradCheckOptions::default();
    let r = check_gradients(store, &opts, f)?;
    Ok(GradCase {
        name: name.to_owned(),
        max_rel_error: r.max_rel_error,
        checked: r.checked,
        passed: r.max_rel_error < TOLERANCE,
    })
}

/// Random linear readout `sum(y * r)` so every output entry matters.
fn readout(g: &mut Graph, y: Var, r: &Tensor) -> Result<Var> {
    let c = g.constant(r.clone())?;
    let p = g.mul(y, c)?;
    g.sum(p)
}

fn tiny_dims() -> ModelDims {
    ModelDims {
        width: 8,
        hidden: 12,
        heads: 2,
        layers: 2,
        token_dim: 6,
        key_dim: 3,
        pos_dim: 2,
        max_pos: 30,
    }
}

fn layer_cases(rng: &mut ChaCha8Rng) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    let w = 8;

    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "linear", 5, 4, true, rng)?;
    let x = glorot_uniform(3, 5, rng);
    let r = glorot_uniform(3, 4, rng);
    out.push(run("linear", &mut s, |g| {
        let xv = g.constant(x.clone())?;
        let y = lin.forward(g, xv)?;
        readout(g, y, &r)
    })?);

    let mut s = ParamStore::new();
    let table = s.add_glorot("embedding", 7, 4, rng)?;
    let r = glorot_uniform(4, 4, rng);
    out.push(run("embedding", &mut s, |g| {
        let y = g.embedding(table, &[1, 3, 3, 6])?;
        readout(g, y, &r)
    })?);

    let mut s = ParamStore::new();
    let xid = s.add_glorot("x", 3, 6, rng)?;
    let ln = LayerNorm::new(&mut s, "layer_norm", 6)?;
    let r = glorot_uniform(3, 6, rng);
    out.push(run("layer_norm", &mut s, |g| {
        let x = g.param(xid);
        let y = ln.forward(g, x)?;
        readout(g, y, &r)
    })?);

    let mut s = ParamStore::new();
    let xid = s.add_glorot("logits", 3, 5, rng)?;
    out.push(run("cross_entropy", &mut s, |g| {
        let x = g.param(xid);
        g.cross_entropy(x, &[0, 4, 2])
    })?);

    let mut s = ParamStore::new();
    let xid = s.add_glorot("scores", 3, 5, rng)?;
    let mask: Vec<bool> = (0..15).map(|i| i % 4 != 1).collect();
    let r = glorot_uniform(3, 5, rng);
    out.push(run("masked_softmax", &mut s, |g| {
        let x = g.param(xid);
        let y = g.softmax(x, Some(&mask))?;
        readout(g, y, &r)
    })?);

    let mut s = ParamStore::new();
    let xid = s.add_glorot("scores", 3, 5, rng)?;
    out.push(run("copy_nll", &mut s, |g| {
        let x = g.param(xid);
        g.copy_nll(x, &[vec![0, 3], vec![4], vec![1, 2, 4]])
    })?);

    let mut s = ParamStore::new();
    let a = s.add_glorot("a", 3, 4, rng)?;
    let b = s.add_glorot("b", 4, 2, rng)?;
    let c = s.add_glorot("c", 3, 2, rng)?;
    let r = glorot_uniform(3, 3, rng);
    out.push(run("matmul_concat_select", &mut s, |g| {
        let (a, b, c) = (g.param(a), g.param(b), g.param(c));
        let ab = g.matmul(a, b)?;
        let abc = g.concat_cols(&[ab, c])?;
        let t = g.matmul_nt(abc, abc)?;
        let t = g.relu(t)?;
        let picked = g.select_rows(t, &[2, 0, 2])?;
        let sl = g.slice_cols(picked, 0, 3)?;
        let both = g.concat_rows(&[sl])?;
        let sc = g.scale(both, 0.7)?;
        readout(g, sc, &r)
    })?);

    for (name, causal, cross) in [("attention_self", false, false), ("attention_causal", true, false), ("attention_cross", false, true)] {
        let mut s = ParamStore::new();
        let att = MultiHeadAttention::new(&mut s, name, w, 2, rng)?;
        let q = glorot_uniform(4, w, rng);
        let m = glorot_uniform(5, w, rng);
        let r = glorot_uniform(4, w, rng);
        out.push(run(name, &mut s, |g| {
            let qv = g.constant(q.clone())?;
            let mv = if cross { g.constant(m.clone())? } else { qv };
            let y = att.forward(g, qv, mv, causal)?;
            readout(g, y, &r)
        })?);
    }

    let mut s = ParamStore::new();
    let ff = FeedForward::new(&mut s, "feed_forward", w, 12, rng)?;
    let x = glorot_uniform(3, w, rng);
    let r = glorot_uniform(3, w, rng);
    out.push(run("feed_forward", &mut s, |g| {
        let xv = g.constant(x.clone())?;
        let y = ff.forward(g, xv)?;
        readout(g, y, &r)
    })?);

    let mut s = ParamStore::new();
    let enc = EncoderLayer::new(&mut s, "encoder_layer", w, 12, 2, rng)?;
    let x = glorot_uniform(4, w, rng);
    let r = glorot_uniform(4, w, rng);
    out.push(run("encoder_layer", &mut s, |g| {
        let xv = g.constant(x.clone())?;
        let y = enc.forward(g, xv)?;
        readout(g, y, &r)
    })?);

    let mut s = ParamStore::new();
    let dec = DecoderLayer::new(&mut s, "decoder_layer", w, 12, 2, rng)?;
    let x = glorot_uniform(3, w, rng);
    let m = glorot_uniform(5, w, rng);
    let r = glorot_uniform(3, w, rng);
    out.push(run("decoder_layer", &mut s, |g| {
        let xv = g.constant(x.clone())?;
        let mv = g.constant(m.clone())?;
        let y = dec.forward(g, xv, mv, true)?;
        readout(g, y, &r)
    })?);

    Ok(out)
}

fn model_cases(rng: &mut ChaCha8Rng) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    let mut corpus = generate(&TemplateSpec::default(), 2)?;
    annotate_corpus(&mut corpus, &StopWordList::english());
    let mut config = RunConfig::default();
    config.model = tiny_dims();
    config.k_max = 4;
    config.max_state_len = 64;
    let meta = build_meta(&corpus, &config)?;

    let mut s = ParamStore::new();
    let enc = TableEncoder::new(&mut s, "table_encoder", &config.model, meta.vocab.len(), meta.keys.len(), rng)?;
    let cells = CellInputs::new(&corpus.examples[0].table.linearize(), &meta.vocab, &meta.keys, config.model.max_pos);
    let r = glorot_uniform(cells.len(), config.model.width, rng);
    out.push(run("table_encoder", &mut s, |g| {
        let h = enc.encode(g, &cells)?.hidden;
        readout(g, h, &r)
    })?);

    let mut pointer = PointerModel::new(meta.clone(), rng.gen())?;
    let sample = pointer_samples(&pointer, &corpus)?.swap_remove(0);
    let net = pointer.net.clone();
    out.push(run("pointer_model", &mut pointer.params, |g| net.loss(g, &sample))?);

    for tie in [false, true] {
        let mut meta = meta.clone();
        meta.config.tie_token_head = tie;
        let mut realizer = RealizerModel::new(meta, rng.gen())?;
        let sample: EditSample = edit_samples(&realizer, &corpus)?.swap_remove(0);
        let net = realizer.net.clone();
        // a corruption that leaves placeholders to fill and tokens to delete
        let seed = (0..200u64)
            .find(|&seed| {
                let mut g = Graph::new(&realizer.params);
                edit_loss(&mut g, &net, &sample, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
                    .map(|o| o.triple.y_dprime.contains(&PLH) && o.l_del > 0.0)
                    .unwrap_or(false)
            })
            .unwrap_or(0);
        let name = if tie { "realizer_model_tied" } else { "realizer_model" };
        out.push(run(name, &mut realizer.params, |g| {
            Ok(edit_loss(g, &net, &sample, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))?.total)
        })?);
    }
    Ok(out)
}

/// Runs every registered check.
pub fn run_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = layer_cases(&mut rng)?;
    cases.extend(model_cases(&mut rng)?);
    Ok(cases)
}
