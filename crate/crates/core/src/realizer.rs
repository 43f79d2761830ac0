//! Stage two model: a non-causal transformer decoder over the current edit
//! state, cross-attending to the encoded table, with deletion, placeholder
//! and token heads.

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
use crate::table::{linearize_table, Table, BOS, EOS, PAD, PLH};

#[derive(Debug, Clone)]
pub struct RealizerNet {
    pub encoder: TableEncoder,
    pub input_proj: Linear,
    pub positions: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub del_head: Linear,
    pub plh_head: Linear,
    /// `None` when the token head is tied to the input embeddings.
    pub tok_head: Option<Linear>,
    pub k_max: usize,
    pub max_state_len: usize,
}

impl RealizerNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        dims: &ModelDims,
        vocab_size: usize,
        key_size: usize,
        k_max: usize,
        max_state_len: usize,
        tie_token_head: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = TableEncoder::new(store, "realizer.encoder", dims, vocab_size, key_size, rng)?;
        let input_proj = Linear::new(store, "realizer.input_proj", dims.token_dim, dims.width, false, rng)?;
        let positions = store.add_glorot("realizer.positions", max_state_len, dims.width, rng)?;
        let layers = (0..dims.layers)
            .map(|i| DecoderLayer::new(store, &format!("realizer.decoder{i}"), dims.width, dims.hidden, dims.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let del_head = Linear::new(store, "realizer.w_del", dims.width, 2, true, rng)?;
        let plh_head = Linear::new(store, "realizer.w_plh", 2 * dims.width, k_max + 1, true, rng)?;
        let tok_head = if tie_token_head {
            None
        } else {
            Some(Linear::new(store, "realizer.w_tok", dims.width, vocab_size, true, rng)?)
        };
        Ok(Self {
            encoder,
            input_proj,
            positions,
            layers,
            del_head,
            plh_head,
            tok_head,
            k_max,
            max_state_len,
        })
    }

    /// Decoder outputs `z_0..z_n` for a state of token ids. `causal` is only
    /// used to demonstrate non-causality; the model itself never masks.
    pub fn decode_hidden(&self, g: &mut Graph, state: &[usize], memory: Var, causal: bool) -> Result<Var> {
        if state.len() > self.max_state_len {
            return Err(Error::StateOverflow {
                len: state.len(),
                cap: self.max_state_len,
            });
        }
        let e = g.embedding(self.encoder.token_emb, state)?;
        let x = self.input_proj.forward(g, e)?;
        let pos: Vec<usize> = (0..state.len()).collect();
        let p = g.embedding(self.positions, &pos)?;
        let mut z = g.add(x, p)?;
        for layer in &self.layers {
            z = layer.forward(g, z, memory, causal)?;
        }
        Ok(z)
    }

    /// `W_del z_i` for every position: column 0 keep, column 1 delete.
    pub fn deletion_logits(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.del_head.forward(g, z)
    }

    /// `W_plh [z_i; z_{i+1}]` for every consecutive pair.
    pub fn placeholder_logits(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let n = g.value(z).rows();
        if n < 2 {
            return Err(Error::EmptyInput { op: "placeholder_logits" });
        }
        let left: Vec<usize> = (0..n - 1).collect();
        let right: Vec<usize> = (1..n).collect();
        let l = g.select_rows(z, &left)?;
        let r = g.select_rows(z, &right)?;
        let pairs = g.concat_cols(&[l, r])?;
        self.plh_head.forward(g, pairs)
    }

    /// Vocabulary logits at the given positions; `None` when there are none.
    pub fn token_logits(&self, g: &mut Graph, z: Var, rows: &[usize]) -> Result<Option<Var>> {
        if rows.is_empty() {
            return Ok(None);
        }
        let zs = g.select_rows(z, rows)?;
        let logits = match &self.tok_head {
            Some(head) => head.forward(g, zs)?,
            None => {
                let emb = g.param(self.encoder.token_emb);
                let w = g.param(self.input_proj.weight);
                let out_emb = g.matmul(emb, w)?;
                g.matmul_nt(zs, out_emb)?
            }
        };
        Ok(Some(logits))
    }
}

/// Row-wise softmax of a logits tensor.
pub fn row_softmax(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| softmax(t.row(r))).collect()
}

/// Best token id for a fill, never a sentinel, padding or placeholder.
pub fn fill_argmax(logits: &[f64]) -> usize {
    let mut best = None;
    for (id, &v) in logits.iter().enumerate() {
        if matches!(id, PAD | BOS | EOS | PLH) {
            continue;
        }
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((id, v));
        }
    }
    best.map_or(crate::table::UNK, |(id, _)| id)
}

/// A realizer with its parameters and vocabularies.
#[derive(Debug, Clone)]
pub struct RealizerModel {
    pub meta: ModelMeta,
    pub params: ParamStore,
    pub net: RealizerNet,
}

/// Encoded table kept fixed across refinement iterations.
#[derive(Debug, Clone)]
pub struct RealizerContext {
    pub memory: Tensor,
}

impl RealizerModel {
    pub fn new(meta: ModelMeta, seed: u64) -> Result<Self> {
        meta.config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = &meta.config;
        let net = RealizerNet::new(
            &mut params,
            &c.model,
            meta.vocab.len(),
            meta.keys.len(),
            c.k_max,
            c.max_state_len,
            c.tie_token_head,
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

    pub fn cells(&self, table: &Table) -> CellInputs {
        CellInputs::new(&linearize_table(table), &self.meta.vocab, &self.meta.keys, self.meta.config.model.max_pos)
    }

    pub fn encode(&self, table: &Table) -> Result<RealizerContext> {
        let cells = self.cells(table);
        let mut g = Graph::new(&self.params);
        let h = self.net.encoder.encode(&mut g, &cells)?.hidden;
        Ok(RealizerContext { memory: g.value(h).clone() })
    }

    /// Runs `f` on the decoder outputs of a state given as strings.
    pub fn with_hidden<T>(
        &self,
        ctx: &RealizerContext,
        tokens: &[String],
        f: impl FnOnce(&mut Graph, Var) -> Result<T>,
    ) -> Result<T> {
        let ids = self.meta.vocab.ids(tokens);
        let mut g = Graph::new(&self.params);
        let memory = g.constant(ctx.memory.clone())?;
        let z = self.net.decode_hidden(&mut g, &ids, memory, false)?;
        f(&mut g, z)
    }
}
