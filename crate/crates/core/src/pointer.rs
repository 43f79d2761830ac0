//! Stage one: a transformer decoder that points at table cells, pooling the
//! attention of identical tokens into a copy distribution, decoded by beam search.

use std::cmp::Ordering;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bundle::ModelMeta;
use crate::config::ModelDims;
use crate::encoder::{CellInputs, TableEncoder};
use crate::error::{Error, Result};
use crate::numerics::checkpoint;
use crate::numerics::layers::{DecoderLayer, Linear};
use crate::numerics::tensor::softmax;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::table::{linearize_table, Table, Vocabulary, BOS, EOS_TOKEN};

#[derive(Debug, Clone)]
pub struct PointerNet {
    pub encoder: TableEncoder,
    /// Projects shared token embeddings of the prefix to the decoder width.
    pub input_proj: Linear,
    pub positions: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub w_q: Linear,
    pub w_k: Linear,
    pub width: usize,
    pub max_len: usize,
}

impl PointerNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        dims: &ModelDims,
        vocab_size: usize,
        key_size: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = TableEncoder::new(store, "pointer.encoder", dims, vocab_size, key_size, rng)?;
        let input_proj = Linear::new(store, "pointer.input_proj", dims.token_dim, dims.width, false, rng)?;
        let positions = store.add_glorot("pointer.positions", max_len + 1, dims.width, rng)?;
        let layers = (0..dims.layers)
            .map(|i| DecoderLayer::new(store, &format!("pointer.decoder{i}"), dims.width, dims.hidden, dims.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let w_q = Linear::new(store, "pointer.w_q", dims.width, dims.width, false, rng)?;
        let w_k = Linear::new(store, "pointer.w_k", dims.width, dims.width, false, rng)?;
        Ok(Self {
            encoder,
            input_proj,
            positions,
            layers,
            w_q,
            w_k,
            width: dims.width,
            max_len,
        })
    }

    /// Causal decoder states `r_0..r_t` for a prefix starting with BOS.
    pub fn decoder_states(&self, g: &mut Graph, prefix: &[usize], memory: Var) -> Result<Var> {
        if prefix.len() > self.max_len + 1 {
            return Err(Error::IndexOutOfRange {
                op: "pointer prefix",
                index: prefix.len(),
                size: self.max_len + 1,
            });
        }
        let e = g.embedding(self.encoder.token_emb, prefix)?;
        let x = self.input_proj.forward(g, e)?;
        let pos: Vec<usize> = (0..prefix.len()).collect();
        let p = g.embedding(self.positions, &pos)?;
        let mut r = g.add(x, p)?;
        for layer in &self.layers {
            r = layer.forward(g, r, memory, true)?;
        }
        Ok(r)
    }

    /// `(W_q r_t) . (W_k h_i) / sqrt(d_r)` for every prefix row and cell.
    pub fn attention_logits(&self, g: &mut Graph, r: Var, keys: Var) -> Result<Var> {
        let q = self.w_q.forward(g, r)?;
        let s = g.matmul_nt(q, keys)?;
        g.scale(s, 1.0 / (self.width as f64).sqrt())
    }

    /// Teacher-forced copy loss `-Σ log P_copy(s_t)` over the skeleton and EOS.
    pub fn loss(&self, g: &mut Graph, sample: &PointerSample) -> Result<Var> {
        let h = self.encoder.encode(g, &sample.cells)?.hidden;
        let keys = self.w_k.forward(g, h)?;
        let r = self.decoder_states(g, &sample.prefix, h)?;
        let logits = self.attention_logits(g, r, keys)?;
        g.copy_nll(logits, &sample.targets)
    }
}

/// Teacher-forcing inputs for one example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointerSample {
    pub cells: CellInputs,
    /// BOS followed by the skeleton ids.
    pub prefix: Vec<usize>,
    /// For each step, the cells whose token is the gold token.
    pub targets: Vec<Vec<usize>>,
}

pub fn pointer_sample<S: AsRef<str>>(
    table: &Table,
    skeleton: &[S],
    vocab: &Vocabulary,
    keys: &Vocabulary,
    max_pos: usize,
) -> Result<PointerSample> {
    let lin = linearize_table(table);
    let cells = CellInputs::new(&lin, vocab, keys, max_pos);
    let eos_cell = lin.len() - 1;
    let mut prefix = Vec::with_capacity(skeleton.len() + 1);
    prefix.push(BOS);
    let mut targets = Vec::with_capacity(skeleton.len() + 1);
    for s in skeleton {
        let s = s.as_ref();
        let set: Vec<usize> = (0..eos_cell).filter(|&i| cells.cell_tokens[i] == s).collect();
        if set.is_empty() {
            return Err(Error::DataIntegrity(format!("skeleton token `{s}` does not occur in the table")));
        }
        targets.push(set);
        prefix.push(vocab.id(s));
    }
    targets.push(vec![eos_cell]);
    Ok(PointerSample { cells, prefix, targets })
}

/// Attention over cells and the pooled per-token copy probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CopyDistribution {
    pub alpha: Vec<f64>,
    /// Distinct cell tokens in first-occurrence order; EOS is the last cell's token.
    pub support: Vec<String>,
    pub probs: Vec<f64>,
}

impl CopyDistribution {
    pub fn prob(&self, token: &str) -> f64 {
        self.support.iter().position(|t| t == token).map_or(0.0, |i| self.probs[i])
    }
}

/// `P_copy(w) = Σ_{i: token(i) = w} α_i`.
pub fn copy_distribution<S: AsRef<str>>(alpha: &[f64], cell_tokens: &[S]) -> Result<CopyDistribution> {
    if alpha.len() != cell_tokens.len() {
        return Err(Error::ShapeMismatch {
            op: "copy_distribution",
            lhs: vec![alpha.len()],
            rhs: vec![cell_tokens.len()],
        });
    }
    let mut support: Vec<String> = Vec::new();
    let mut probs: Vec<f64> = Vec::new();
    for (a, tok) in alpha.iter().zip(cell_tokens) {
        let tok = tok.as_ref();
        match support.iter().position(|t| t == tok) {
            Some(i) => probs[i] += a,
            None => {
                support.push(tok.to_owned());
                probs.push(*a);
            }
        }
    }
    Ok(CopyDistribution {
        alpha: alpha.to_vec(),
        support,
        probs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    pub skeleton: Vec<String>,
    /// Sum of log probabilities, including the final EOS when finished.
    pub score: f64,
    pub finished: bool,
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<String>,
    score: f64,
}

fn rank(score: f64, steps: usize, normalize: bool) -> f64 {
    if normalize {
        score / steps.max(1) as f64
    } else {
        score
    }
}

/// Beam search over a copy-distribution oracle `step(prefix)`, where the
/// prefix excludes BOS. At most `max_len` tokens are emitted before EOS.
pub fn beam_search_with<F>(mut step: F, beam_width: usize, max_len: usize, normalize: bool) -> Result<BeamResult>
where
    F: FnMut(&[String]) -> Result<CopyDistribution>,
{
    let beam_width = beam_width.max(1);
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for t in 0..=max_len {
        let mut candidates: Vec<(Hypothesis, bool)> = Vec::new();
        for hyp in &alive {
            let dist = step(&hyp.tokens)?;
            let mut options: Vec<(usize, f64)> = dist
                .probs
                .iter()
                .enumerate()
                .filter(|(i, &p)| p > 0.0 && (t < max_len || dist.support[*i] == EOS_TOKEN))
                .map(|(i, &p)| (i, p))
                .collect();
            options.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal));
            options.truncate(beam_width);
            for (i, p) in options {
                let tok = &dist.support[i];
                let is_eos = tok == EOS_TOKEN;
                let mut tokens = hyp.tokens.clone();
                if !is_eos {
                    tokens.push(tok.clone());
                }
                candidates.push((
                    Hypothesis {
                        tokens,
                        score: hyp.score + p.ln(),
                    },
                    is_eos,
                ));
            }
        }
        if candidates.is_empty() {
            break;
        }
        let steps = t + 1;
        candidates.sort_by(|a, b| {
            rank(b.0.score, steps, normalize)
                .partial_cmp(&rank(a.0.score, steps, normalize))
                .unwrap_or(Ordering::Equal)
        });
        candidates.truncate(beam_width);
        alive.clear();
        for (hyp, done) in candidates {
            if done {
                finished.push(hyp);
            } else {
                alive.push(hyp);
            }
        }
        let best_finished = finished
            .iter()
            .map(|h| rank(h.score, h.tokens.len() + 1, normalize))
            .fold(f64::NEG_INFINITY, f64::max);
        let best_alive = alive
            .iter()
            .map(|h| rank(h.score, h.tokens.len(), normalize))
            .fold(f64::NEG_INFINITY, f64::max);
        // log probabilities only decrease, so unnormalized search can stop here
        if alive.is_empty() || (!normalize && best_finished >= best_alive) || finished.len() >= beam_width {
            break;
        }
    }
    // first of equals wins
    let pick = |hs: &[Hypothesis], extra: usize| {
        let mut best: Option<(&Hypothesis, f64)> = None;
        for h in hs {
            let r = rank(h.score, h.tokens.len() + extra, normalize);
            if best.map_or(true, |(_, b)| r > b) {
                best = Some((h, r));
            }
        }
        best.map(|(h, _)| h.clone())
    };
    if let Some(best) = pick(&finished, 1) {
        return Ok(BeamResult {
            skeleton: best.tokens,
            score: best.score,
            finished: true,
        });
    }
    let best = pick(&alive, 0).expect("alive hypotheses are kept when no expansion exists");
    log::warn!("skeleton decoding reached max_len {max_len} without EOS; returning a truncated prefix");
    Ok(BeamResult {
        skeleton: best.tokens,
        score: best.score,
        finished: false,
    })
}

/// Encoded table kept fixed across decoding steps.
#[derive(Debug, Clone)]
pub struct PointerContext {
    pub memory: Tensor,
    pub keys: Tensor,
    pub cell_tokens: Vec<String>,
}

/// A pointer network with its parameters and vocabularies.
#[derive(Debug, Clone)]
pub struct PointerModel {
    pub meta: ModelMeta,
    pub params: ParamStore,
    pub net: PointerNet,
}

impl PointerModel {
    pub fn new(meta: ModelMeta, seed: u64) -> Result<Self> {
        meta.config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = PointerNet::new(
            &mut params,
            &meta.config.model,
            meta.vocab.len(),
            meta.keys.len(),
            meta.config.max_skeleton_len,
            &mut rng,
        )?;
        Ok(Self { meta, params, net })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = ModelMeta::load(dir)?;
        let mut model = Self::new(meta, 0)?;
        checkpoint::load_params(dir, &mut model.params)?;
        Ok(model)
    }

    pub fn sample(&self, table: &Table, skeleton: &[String]) -> Result<PointerSample> {
        pointer_sample(table, skeleton, &self.meta.vocab, &self.meta.keys, self.meta.config.model.max_pos)
    }

    pub fn prepare(&self, table: &Table) -> Result<PointerContext> {
        let lin = linearize_table(table);
        let cells = CellInputs::new(&lin, &self.meta.vocab, &self.meta.keys, self.meta.config.model.max_pos);
        let mut g = Graph::new(&self.params);
        let h = self.net.encoder.encode(&mut g, &cells)?.hidden;
        let k = self.net.w_k.forward(&mut g, h)?;
        Ok(PointerContext {
            memory: g.value(h).clone(),
            keys: g.value(k).clone(),
            cell_tokens: cells.cell_tokens,
        })
    }

    /// Copy distribution for the next token after `prefix` (BOS excluded).
    pub fn step(&self, ctx: &PointerContext, prefix: &[String]) -> Result<CopyDistribution> {
        let mut ids = Vec::with_capacity(prefix.len() + 1);
        ids.push(BOS);
        ids.extend(self.meta.vocab.ids(prefix));
        let mut g = Graph::new(&self.params);
        let memory = g.constant(ctx.memory.clone())?;
        let keys = g.constant(ctx.keys.clone())?;
        let r = self.net.decoder_states(&mut g, &ids, memory)?;
        let last = g.select_rows(r, &[ids.len() - 1])?;
        let logits = self.net.attention_logits(&mut g, last, keys)?;
        let alpha = softmax(g.value(logits).data());
        copy_distribution(&alpha, &ctx.cell_tokens)
    }

    /// Beam search; the greedy hypothesis is kept as a fallback candidate so
    /// the result never scores below greedy decoding.
    pub fn beam_search(&self, table: &Table, beam_width: usize, max_len: usize) -> Result<BeamResult> {
        let ctx = self.prepare(table)?;
        let max_len = max_len.min(self.net.max_len);
        let normalize = self.meta.config.length_normalize;
        let beam = beam_search_with(|p| self.step(&ctx, p), beam_width, max_len, normalize)?;
        if beam_width <= 1 {
            return Ok(beam);
        }
        let greedy = beam_search_with(|p| self.step(&ctx, p), 1, max_len, normalize)?;
        let score = |r: &BeamResult| (r.finished, rank(r.score, r.skeleton.len() + usize::from(r.finished), normalize));
        let (bf, bs) = score(&beam);
        let (gf, gs) = score(&greedy);
        Ok(if gf && (!bf || gs > bs) { greedy } else { beam })
    }

    pub fn greedy(&self, table: &Table, max_len: usize) -> Result<BeamResult> {
        self.beam_search(table, 1, max_len)
    }

    /// Log probability of a complete skeleton (EOS included).
    pub fn score(&self, table: &Table, skeleton: &[String]) -> Result<f64> {
        let ctx = self.prepare(table)?;
        let mut total = 0.0;
        for t in 0..=skeleton.len() {
            let dist = self.step(&ctx, &skeleton[..t])?;
            let target = skeleton.get(t).map_or(EOS_TOKEN, String::as_str);
            total += dist.prob(target).ln();
        }
        Ok(total)
    }
}
