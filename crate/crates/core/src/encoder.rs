//! Table encoder: each linearized cell `(token, key, p+, p-)` is fused into one
//! vector and contextualized by transformer encoder layers. No sequence
//! position is added, so the encoder is equivariant to attribute order.

use rand::Rng;

use crate::config::ModelDims;
use crate::error::Result;
use crate::numerics::layers::{EncoderLayer, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, Var};
use crate::table::{LinearizedTable, Vocabulary};

/// Integer inputs for the encoder, one entry per linearized cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellInputs {
    pub tokens: Vec<usize>,
    pub keys: Vec<usize>,
    pub fwd: Vec<usize>,
    pub bwd: Vec<usize>,
    /// Source strings, used for copy addressing.
    pub cell_tokens: Vec<String>,
}

impl CellInputs {
    pub fn new(table: &LinearizedTable, vocab: &Vocabulary, keys: &Vocabulary, max_pos: usize) -> Self {
        let cells = &table.cells;
        Self {
            tokens: cells.iter().map(|c| vocab.id(&c.token)).collect(),
            keys: cells.iter().map(|c| keys.id(&c.key)).collect(),
            fwd: cells.iter().map(|c| c.fwd_pos.min(max_pos)).collect(),
            bwd: cells.iter().map(|c| c.bwd_pos.min(max_pos)).collect(),
            cell_tokens: cells.iter().map(|c| c.token.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// `cells x width` hidden states.
    pub hidden: Var,
}

#[derive(Debug, Clone)]
pub struct TableEncoder {
    pub token_emb: ParamId,
    pub key_emb: ParamId,
    pub fwd_emb: ParamId,
    pub bwd_emb: ParamId,
    /// `W_f`, `b_f`.
    pub fuse: Linear,
    pub layers: Vec<EncoderLayer>,
    pub width: usize,
}

impl TableEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dims: &ModelDims,
        vocab_size: usize,
        key_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let token_emb = store.add_glorot(format!("{name}.token_emb"), vocab_size, dims.token_dim, rng)?;
        let key_emb = store.add_glorot(format!("{name}.key_emb"), key_size, dims.key_dim, rng)?;
        let fwd_emb = store.add_glorot(format!("{name}.fwd_pos_emb"), dims.max_pos + 1, dims.pos_dim, rng)?;
        let bwd_emb = store.add_glorot(format!("{name}.bwd_pos_emb"), dims.max_pos + 1, dims.pos_dim, rng)?;
        let concat = dims.token_dim + dims.key_dim + 2 * dims.pos_dim;
        let fuse = Linear::new(store, &format!("{name}.fuse"), concat, dims.width, true, rng)?;
        let layers = (0..dims.layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), dims.width, dims.hidden, dims.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            token_emb,
            key_emb,
            fwd_emb,
            bwd_emb,
            fuse,
            layers,
            width: dims.width,
        })
    }

    /// `f = ReLU(W_f [w; k; p+; p-] + b_f)` for every cell.
    pub fn embed_cells(&self, g: &mut Graph, cells: &CellInputs) -> Result<Var> {
        let w = g.embedding(self.token_emb, &cells.tokens)?;
        let k = g.embedding(self.key_emb, &cells.keys)?;
        let pf = g.embedding(self.fwd_emb, &cells.fwd)?;
        let pb = g.embedding(self.bwd_emb, &cells.bwd)?;
        let x = g.concat_cols(&[w, k, pf, pb])?;
        let x = self.fuse.forward(g, x)?;
        g.relu(x)
    }

    pub fn encode(&self, g: &mut Graph, cells: &CellInputs) -> Result<EncoderOutput> {
        let mut h = self.embed_cells(g, cells)?;
        for layer in &self.layers {
            h = layer.forward(g, h)?;
        }
        Ok(EncoderOutput { hidden: h })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::table::{linearize_table, Corpus, Example, Table};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(tables: &[Table]) -> (ParamStore, TableEncoder, Vocabulary, Vocabulary) {
        let corpus = Corpus {
            examples: tables
                .iter()
                .map(|t| Example {
                    table: t.clone(),
                    reference: vec!["x".into()],
                    skeleton: None,
                    line: 0,
                })
                .collect(),
        };
        let vocab = crate::table::build_vocabulary(&corpus, 100).unwrap();
        let keys = Vocabulary::from_keys(&corpus);
        let dims = ModelDims {
            width: 8,
            hidden: 12,
            heads: 2,
            layers: 2,
            token_dim: 6,
            key_dim: 3,
            pos_dim: 2,
            max_pos: 5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let enc = TableEncoder::new(&mut store, "enc", &dims, vocab.len(), keys.len(), &mut rng).unwrap();
        (store, enc, vocab, keys)
    }

    fn encode(store: &ParamStore, enc: &TableEncoder, cells: &CellInputs) -> Tensor {
        let mut g = Graph::new(store);
        let out = enc.encode(&mut g, cells).unwrap();
        g.value(out.hidden).clone()
    }

    #[test]
    fn zero_fusion_gives_zero_embedding() {
        let t = Table::from_pairs(&[("name", "Thaila Ayala")]).unwrap();
        let (mut store, enc, vocab, keys) = setup(&[t.clone()]);
        let cells = CellInputs::new(&linearize_table(&t), &vocab, &keys, 5);
        store.value_mut(enc.fuse.weight).data_mut().fill(0.0);
        let mut g = Graph::new(&store);
        let f = enc.embed_cells(&mut g, &cells).unwrap();
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));

        store.value_mut(enc.fuse.bias.unwrap()).data_mut().fill(-0.5);
        let mut g = Graph::new(&store);
        let f = enc.embed_cells(&mut g, &cells).unwrap();
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn position_rows_distinguish_cells() {
        let t = Table::from_pairs(&[("a", "x y")]).unwrap();
        let (store, enc, vocab, keys) = setup(&[t.clone()]);
        let mut cells = CellInputs::new(&linearize_table(&t), &vocab, &keys, 5);
        cells.tokens[1] = cells.tokens[0];
        cells.bwd[1] = cells.bwd[0];
        assert_ne!(cells.fwd[0], cells.fwd[1]);
        let mut g = Graph::new(&store);
        let f = enc.embed_cells(&mut g, &cells).unwrap();
        assert_ne!(g.value(f).row(0), g.value(f).row(1));
    }

    #[test]
    fn lengths_and_clamp() {
        let t = Table::from_pairs(&[("K", "x")]).unwrap();
        let (store, enc, vocab, keys) = setup(&[t.clone()]);
        let cells = CellInputs::new(&linearize_table(&t), &vocab, &keys, 5);
        let h = encode(&store, &enc, &cells);
        assert_eq!(h.shape(), &[2, 8]);

        let long = Table::from_pairs(&[("K", "a b c d e f g h")]).unwrap();
        let cells = CellInputs::new(&linearize_table(&long), &vocab, &keys, 5);
        assert_eq!(cells.fwd[7], 5);
        assert_eq!(encode(&store, &enc, &cells).shape(), &[9, 8]);
    }

    #[test]
    fn attribute_permutation_equivariance() {
        let t1 = Table::from_pairs(&[("name", "Thaila Ayala"), ("born", "8 November 1908"), ("city", "London")]).unwrap();
        let t2 = Table::from_pairs(&[("city", "London"), ("name", "Thaila Ayala"), ("born", "8 November 1908")]).unwrap();
        let (store, enc, vocab, keys) = setup(&[t1.clone()]);
        let h1 = encode(&store, &enc, &CellInputs::new(&linearize_table(&t1), &vocab, &keys, 5));
        let h2 = encode(&store, &enc, &CellInputs::new(&linearize_table(&t2), &vocab, &keys, 5));
        // t1 cells: name(0,1) born(2,3,4) city(5) eos(6); t2: city(0) name(1,2) born(3,4,5) eos(6)
        let map = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (6, 6)];
        for (a, b) in map {
            for (x, y) in h1.row(a).iter().zip(h2.row(b)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_reach_fusion_and_used_rows() {
        let t = Table::from_pairs(&[("name", "Thaila Ayala")]).unwrap();
        let (store, enc, vocab, keys) = setup(&[t.clone()]);
        let cells = CellInputs::new(&linearize_table(&t), &vocab, &keys, 5);
        let mut g = Graph::new(&store);
        let out = enc.encode(&mut g, &cells).unwrap();
        let w = g.constant(Tensor::from_rows(&vec![(0..8).map(|i| i as f64 - 3.5).collect(); 3]).unwrap()).unwrap();
        let y = g.mul(out.hidden, w).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        let nonzero = |id: ParamId, row: Option<usize>| {
            let t = grads.get(id).unwrap();
            match row {
                Some(r) => t.row(r).iter().any(|&v| v != 0.0),
                None => t.data().iter().any(|&v| v != 0.0),
            }
        };
        assert!(nonzero(enc.fuse.weight, None));
        assert!(nonzero(enc.fuse.bias.unwrap(), None));
        for &tok in &cells.tokens {
            assert!(nonzero(enc.token_emb, Some(tok)));
        }
        for &k in &cells.keys {
            assert!(nonzero(enc.key_emb, Some(k)));
        }
    }
}
