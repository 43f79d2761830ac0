//! Transformer building blocks expressed over [`Graph`] operations.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Result<Self> {
        let weight = store.add_glorot(format!("{name}.weight"), in_dim, out_dim, rng)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(1, out_dim))?)
        } else {
            None
        };
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(1, width, 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, width))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta)
    }
}

/// Allowed-mask for causal attention over `n` positions: row `t` sees `0..=t`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|i| i % n <= i / n).collect()
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("model width {width} is not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), width, width, true, rng)?,
            key: Linear::new(store, &format!("{name}.k"), width, width, true, rng)?,
            value: Linear::new(store, &format!("{name}.v"), width, width, true, rng)?,
            output: Linear::new(store, &format!("{name}.o"), width, width, true, rng)?,
            heads,
            width,
        })
    }

    /// Scaled dot-product attention of `queries` over `memory`. With `causal`
    /// set, query `t` attends to memory positions `0..=t` only.
    pub fn forward(&self, g: &mut Graph, queries: Var, memory: Var, causal: bool) -> Result<Var> {
        let nq = g.value(queries).rows();
        let nk = g.value(memory).rows();
        if nk == 0 {
            return Err(Error::EmptyInput { op: "multi_head_attention" });
        }
        let mask = if causal {
            if nq != nk {
                return Err(Error::ShapeMismatch { op: "causal attention", lhs: vec![nq], rhs: vec![nk] });
            }
            Some(causal_mask(nq))
        } else {
            None
        };
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, memory)?;
        let v = self.value.forward(g, memory)?;
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh)?, g.slice_cols(k, h * dh, dh)?, g.slice_cols(v, h * dh, dh)?)
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax(scores, mask.as_deref())?;
            outs.push(g.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.output.forward(g, merged)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, &format!("{name}.ff1"), width, hidden, true, rng)?,
            outer: Linear::new(store, &format!("{name}.ff2"), hidden, width, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h)?;
        self.outer.forward(g, h)
    }
}

/// Post-norm encoder layer: self-attention and feed-forward sublayers.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, hidden: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.self_attn"), width, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width)?,
            ffn: FeedForward::new(store, name, width, hidden, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let a = self.attention.forward(g, x, x, false)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, x)?;
        let f = self.ffn.forward(g, x)?;
        let x = g.add(x, f)?;
        self.norm2.forward(g, x)
    }
}

/// Post-norm decoder layer with self-attention, cross-attention over the
/// encoder memory, and feed-forward sublayers.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, hidden: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            self_attention: MultiHeadAttention::new(store, &format!("{name}.self_attn"), width, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width)?,
            cross_attention: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), width, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width)?,
            ffn: FeedForward::new(store, name, width, hidden, rng)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), width)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var, causal: bool) -> Result<Var> {
        let a = self.self_attention.forward(g, x, x, causal)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, x)?;
        let c = self.cross_attention.forward(g, x, memory, false)?;
        let x = g.add(x, c)?;
        let x = self.norm2.forward(g, x)?;
        let f = self.ffn.forward(g, x)?;
        let x = g.add(x, f)?;
        self.norm3.forward(g, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_gradients, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_input(g: &mut Graph, rows: usize, cols: usize, seed: u64) -> Var {
        let mut r = rng(seed);
        let data = (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect();
        g.constant(Tensor::matrix(rows, cols, data).unwrap()).unwrap()
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        assert!(matches!(
            MultiHeadAttention::new(&mut store, "a", 6, 4, &mut rng(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attention_with_peaked_key_copies_value() {
        // One head, identity projections: a query aligned with one of two
        // orthogonal keys at large magnitude returns that key's value row.
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 2, 1, &mut rng(0)).unwrap();
        for lin in [&mha.query, &mha.key, &mha.value, &mha.output] {
            *store.value_mut(lin.weight) = Tensor::identity(2);
        }
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::row_vector(vec![60.0, 0.0])).unwrap();
        let mem = g.constant(Tensor::from_rows(&[vec![60.0, 0.0], vec![0.0, 60.0]]).unwrap()).unwrap();
        let out = mha.forward(&mut g, q, mem, false).unwrap();
        let row = g.value(out).row(0);
        assert!((row[0] - 60.0).abs() < 1e-9 && row[1].abs() < 1e-9, "{row:?}");

        let empty = g.constant(Tensor::zeros(0, 2)).unwrap();
        assert!(mha.forward(&mut g, q, empty, false).is_err());
    }

    #[test]
    fn causal_on_single_position_matches_full() {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut rng(1)).unwrap();
        let mut g = Graph::new(&store);
        let x = random_input(&mut g, 1, 4, 2);
        let a = mha.forward(&mut g, x, x, true).unwrap();
        let b = mha.forward(&mut g, x, x, false).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn causal_mask_hides_future() {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut rng(3)).unwrap();
        let rows_a = {
            let mut g = Graph::new(&store);
            let x = random_input(&mut g, 3, 4, 4);
            let y = mha.forward(&mut g, x, x, true).unwrap();
            g.value(y).to_rows()
        };
        let rows_b = {
            let mut g = Graph::new(&store);
            let mut t = {
                let mut g2 = Graph::new(&store);
                let x = random_input(&mut g2, 3, 4, 4);
                g2.value(x).clone()
            };
            t.data_mut()[8] += 1.0;
            let x = g.constant(t).unwrap();
            let y = mha.forward(&mut g, x, x, true).unwrap();
            g.value(y).to_rows()
        };
        assert_eq!(rows_a[0], rows_b[0]);
        assert_eq!(rows_a[1], rows_b[1]);
        assert_ne!(rows_a[2], rows_b[2]);
    }

    #[test]
    fn linear_gradcheck() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 5, 3, true, &mut rng(5)).unwrap();
        let opts = GradCheckOptions { samples_per_param: 100, ..Default::default() };
        let report = check_gradients(&mut store, &opts, |g| {
            let x = random_input(g, 4, 5, 6);
            let y = lin.forward(g, x)?;
            let w = random_input(g, 4, 3, 7);
            let p = g.mul(y, w)?;
            g.sum(p)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn encoder_and_decoder_layer_gradcheck() {
        let mut store = ParamStore::new();
        let enc = EncoderLayer::new(&mut store, "enc", 8, 12, 2, &mut rng(8)).unwrap();
        let dec = DecoderLayer::new(&mut store, "dec", 8, 12, 2, &mut rng(9)).unwrap();
        let report = check_gradients(&mut store, &GradCheckOptions::default(), |g| {
            let src = random_input(g, 5, 8, 10);
            let tgt = random_input(g, 3, 8, 11);
            let m = enc.forward(g, src)?;
            let m = enc.forward(g, m)?;
            let y = dec.forward(g, tgt, m, true)?;
            let w = random_input(g, 3, 8, 12);
            let p = g.mul(y, w)?;
            g.sum(p)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
