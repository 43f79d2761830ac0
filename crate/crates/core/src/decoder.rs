//! Iterative refinement from a skeleton: each round deletes unprotected
//! tokens, inserts placeholders and fills them, until nothing changes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::argmax;
use crate::realizer::{fill_argmax, row_softmax, RealizerContext, RealizerModel};
use crate::table::{Table, BOS_TOKEN, EOS_TOKEN, PLH_TOKEN};

/// Token sequence with sentinels and a per-position protection mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EditState {
    pub tokens: Vec<String>,
    pub protected: Vec<bool>,
    pub iteration: usize,
}

impl EditState {
    /// Tokens without the sentinels.
    pub fn body(&self) -> &[String] {
        &self.tokens[1..self.tokens.len() - 1]
    }

    pub fn check(&self) -> Result<()> {
        let n = self.tokens.len();
        let ok = n >= 2
            && self.protected.len() == n
            && self.tokens[0] == BOS_TOKEN
            && self.tokens[n - 1] == EOS_TOKEN
            && self.protected[0]
            && self.protected[n - 1]
            && self.tokens.iter().zip(&self.protected).all(|(t, &p)| !(p && t == PLH_TOKEN));
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("malformed edit state {:?}", self.tokens)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    FixedPoint,
    MaxIterations,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::FixedPoint => "fixed_point",
            Termination::MaxIterations => "max_iterations",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DecodeTrace {
    /// Initial state followed by the state after every iteration.
    pub snapshots: Vec<EditState>,
    pub termination: Termination,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    pub max_iter: usize,
    pub hard_constraints: bool,
    pub k_max: usize,
    pub max_state_len: usize,
}

impl DecodeOptions {
    pub fn from_config(c: &crate::config::RunConfig) -> Self {
        Self {
            max_iter: c.max_iter,
            hard_constraints: c.hard_constraints,
            k_max: c.k_max,
            max_state_len: c.max_state_len,
        }
    }
}

/// The three classifiers as seen by the decoding loop.
pub trait EditPolicy {
    type Context;

    fn prepare(&self, table: &Table) -> Result<Self::Context>;

    /// `P(delete)` for every position of `tokens` (sentinels included).
    fn deletion_probs(&self, ctx: &Self::Context, tokens: &[String]) -> Result<Vec<f64>>;

    /// Distribution over placeholder counts for every slot `(i, i + 1)`.
    fn placeholder_probs(&self, ctx: &Self::Context, tokens: &[String]) -> Result<Vec<Vec<f64>>>;

    /// Argmax fill for every placeholder of `tokens`, in order.
    fn fill(&self, ctx: &Self::Context, tokens: &[String]) -> Result<Vec<String>>;
}

pub fn init_state<S: AsRef<str>>(skeleton: &[S]) -> EditState {
    let mut tokens = Vec::with_capacity(skeleton.len() + 2);
    tokens.push(BOS_TOKEN.to_owned());
    tokens.extend(skeleton.iter().map(|s| s.as_ref().to_owned()));
    tokens.push(EOS_TOKEN.to_owned());
    let protected = vec![true; tokens.len()];
    EditState {
        tokens,
        protected,
        iteration: 0,
    }
}

/// Removes every position with `P(delete) > 0.5`, except protected ones.
/// Without hard constraints only the sentinels are exempt.
pub fn masked_delete(state: &EditState, p_delete: &[f64], hard_constraints: bool) -> Result<EditState> {
    let n = state.tokens.len();
    if p_delete.len() != n {
        return Err(Error::ShapeMismatch {
            op: "masked_delete",
            lhs: vec![n],
            rhs: vec![p_delete.len()],
        });
    }
    let mut out = EditState {
        tokens: Vec::with_capacity(n),
        protected: Vec::with_capacity(n),
        iteration: state.iteration,
    };
    for i in 0..n {
        let sentinel = i == 0 || i == n - 1;
        let exempt = sentinel || (hard_constraints && state.protected[i]);
        if exempt || p_delete[i] <= 0.5 {
            out.tokens.push(state.tokens[i].clone());
            out.protected.push(state.protected[i]);
        }
    }
    Ok(out)
}

/// Inserts `counts[k]` unprotected placeholders between positions `k` and `k + 1`.
pub fn insert_placeholders(state: &EditState, counts: &[usize], max_state_len: usize) -> Result<EditState> {
    let n = state.tokens.len();
    if counts.len() + 1 != n {
        return Err(Error::ShapeMismatch {
            op: "insert_placeholders",
            lhs: vec![n - 1],
            rhs: vec![counts.len()],
        });
    }
    let len = n + counts.iter().sum::<usize>();
    if len > max_state_len {
        return Err(Error::StateOverflow { len, cap: max_state_len });
    }
    let mut out = EditState {
        tokens: Vec::with_capacity(len),
        protected: Vec::with_capacity(len),
        iteration: state.iteration,
    };
    for i in 0..n {
        out.tokens.push(state.tokens[i].clone());
        out.protected.push(state.protected[i]);
        if let Some(&c) = counts.get(i) {
            for _ in 0..c {
                out.tokens.push(PLH_TOKEN.to_owned());
                out.protected.push(false);
            }
        }
    }
    Ok(out)
}

/// Replaces placeholders with `fills` in order; filled tokens stay unprotected.
pub fn fill_placeholders(state: &EditState, fills: &[String]) -> Result<EditState> {
    let slots = state.tokens.iter().filter(|t| *t == PLH_TOKEN).count();
    if slots != fills.len() {
        return Err(Error::ShapeMismatch {
            op: "fill_placeholders",
            lhs: vec![slots],
            rhs: vec![fills.len()],
        });
    }
    let mut out = state.clone();
    let mut next = fills.iter();
    for t in out.tokens.iter_mut().filter(|t| *t == PLH_TOKEN) {
        *t = next.next().expect("counted above").clone();
    }
    Ok(out)
}

pub fn insert_and_fill<P: EditPolicy>(policy: &P, ctx: &P::Context, state: &EditState, opts: &DecodeOptions) -> Result<EditState> {
    let probs = policy.placeholder_probs(ctx, &state.tokens)?;
    let counts: Vec<usize> = probs.iter().map(|p| argmax(p).min(opts.k_max)).collect();
    if counts.iter().all(|&c| c == 0) {
        return Ok(state.clone());
    }
    let with_plh = insert_placeholders(state, &counts, opts.max_state_len)?;
    let fills = policy.fill(ctx, &with_plh.tokens)?;
    fill_placeholders(&with_plh, &fills)
}

/// Runs delete-then-insert rounds from `init_state(skeleton)` until a fixed
/// point or `max_iter` rounds; returns the tokens without sentinels.
pub fn iterate<P: EditPolicy, S: AsRef<str>>(
    policy: &P,
    table: &Table,
    skeleton: &[S],
    opts: &DecodeOptions,
) -> Result<(Vec<String>, DecodeTrace)> {
    let ctx = policy.prepare(table)?;
    let mut state = init_state(skeleton);
    if state.tokens.len() > opts.max_state_len {
        return Err(Error::StateOverflow {
            len: state.tokens.len(),
            cap: opts.max_state_len,
        });
    }
    let mut snapshots = vec![state.clone()];
    let mut termination = Termination::MaxIterations;
    for it in 1..=opts.max_iter {
        let p_delete = policy.deletion_probs(&ctx, &state.tokens)?;
        let deleted = masked_delete(&state, &p_delete, opts.hard_constraints)?;
        let mut next = insert_and_fill(policy, &ctx, &deleted, opts)?;
        next.iteration = it;
        let unchanged = next.tokens == state.tokens;
        snapshots.push(next.clone());
        state = next;
        if unchanged {
            termination = Termination::FixedPoint;
            break;
        }
    }
    let iterations = snapshots.len() - 1;
    Ok((
        state.body().to_vec(),
        DecodeTrace {
            snapshots,
            termination,
            iterations,
        },
    ))
}

impl EditPolicy for RealizerModel {
    type Context = RealizerContext;

    fn prepare(&self, table: &Table) -> Result<RealizerContext> {
        self.encode(table)
    }

    fn deletion_probs(&self, ctx: &RealizerContext, tokens: &[String]) -> Result<Vec<f64>> {
        self.with_hidden(ctx, tokens, |g, z| {
            let logits = self.net.deletion_logits(g, z)?;
            Ok(row_softmax(g.value(logits)).into_iter().map(|p| p[1]).collect())
        })
    }

    fn placeholder_probs(&self, ctx: &RealizerContext, tokens: &[String]) -> Result<Vec<Vec<f64>>> {
        self.with_hidden(ctx, tokens, |g, z| {
            let logits = self.net.placeholder_logits(g, z)?;
            Ok(row_softmax(g.value(logits)))
        })
    }

    fn fill(&self, ctx: &RealizerContext, tokens: &[String]) -> Result<Vec<String>> {
        let rows: Vec<usize> = tokens.iter().enumerate().filter(|(_, t)| *t == PLH_TOKEN).map(|(i, _)| i).collect();
        self.with_hidden(ctx, tokens, |g, z| {
            let Some(logits) = self.net.token_logits(g, z, &rows)? else {
                return Ok(Vec::new());
            };
            let v = g.value(logits);
            Ok((0..v.rows())
                .map(|r| {
                    let id = fill_argmax(v.row(r));
                    self.meta.vocab.token(id).expect("argmax is a vocabulary id").to_owned()
                })
                .collect())
        })
    }
}

/// A scripted policy for exercising the decoding loop without a model.
#[derive(Debug, Clone, PartialEq)]
pub struct StubPolicy {
    /// `P(delete)` reported for every position.
    pub p_delete: f64,
    /// `(slot, count)` insertions predicted on every call.
    pub insertions: Vec<(usize, usize)>,
    pub fill_token: String,
    pub k_max: usize,
}

impl StubPolicy {
    /// Keeps everything and inserts nothing.
    pub fn identity() -> Self {
        Self {
            p_delete: 0.0,
            insertions: Vec::new(),
            fill_token: "x".into(),
            k_max: 8,
        }
    }

    /// Wants to delete every token.
    pub fn adversarial() -> Self {
        Self {
            p_delete: 1.0,
            ..Self::identity()
        }
    }
}

impl EditPolicy for StubPolicy {
    type Context = ();

    fn prepare(&self, _table: &Table) -> Result<()> {
        Ok(())
    }

    fn deletion_probs(&self, _ctx: &(), tokens: &[String]) -> Result<Vec<f64>> {
        Ok(vec![self.p_delete; tokens.len()])
    }

    fn placeholder_probs(&self, _ctx: &(), tokens: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut rows = vec![vec![0.0; self.k_max + 1]; tokens.len() - 1];
        for row in rows.iter_mut() {
            row[0] = 1.0;
        }
        for &(slot, count) in &self.insertions {
            if let Some(row) = rows.get_mut(slot) {
                row.fill(0.0);
                row[count.min(self.k_max)] = 1.0;
            }
        }
        Ok(rows)
    }

    fn fill(&self, _ctx: &(), tokens: &[String]) -> Result<Vec<String>> {
        Ok(tokens.iter().filter(|t| *t == PLH_TOKEN).map(|_| self.fill_token.clone()).collect())
    }
}
