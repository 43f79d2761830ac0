//! Levenshtein expert policy: edit distances, leftmost-greedy LCS alignment,
//! intermediate-sequence corruption and the insertion/deletion oracles.

use crate::encoder::CellInputs;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};
use crate::realizer::{fill_argmax, RealizerNet};
use crate::table::{BOS, EOS, PLH};

/// Classic edit distance with unit-cost insertion, deletion and substitution.
pub fn levenshtein_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Distance when only insertions and deletions are allowed.
pub fn indel_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    a.len() + b.len() - 2 * lcs_alignment(a, b).len()
}

const INFEASIBLE: i64 = i64::MIN / 4;

/// Maximal alignment of `a` into `b` in which every `must_match` position of
/// `a` is aligned. Returns `(i, j)` pairs in increasing order, or `None` when
/// no such alignment exists. Among optimal alignments the one with the
/// smallest `a` index, then the smallest `b` index, is taken at every step.
fn aligned_pairs<T: PartialEq>(a: &[T], b: &[T], must_match: Option<&[bool]>) -> Option<Vec<(usize, usize)>> {
    let (n, m) = (a.len(), b.len());
    let pinned = |i: usize| must_match.is_some_and(|mask| mask[i]);
    // best[i][j]: largest alignment of a[i..] into b[j..]
    let w = m + 1;
    let mut best = vec![0i64; (n + 1) * w];
    for i in (0..n).rev() {
        for j in (0..=m).rev() {
            let mut v = if pinned(i) { INFEASIBLE } else { best[(i + 1) * w + j] };
            if j < m {
                v = v.max(best[i * w + j + 1]);
                if a[i] == b[j] {
                    let rest = best[(i + 1) * w + j + 1];
                    if rest > INFEASIBLE {
                        v = v.max(rest + 1);
                    }
                }
            }
            best[i * w + j] = v;
        }
    }
    if best[0] <= INFEASIBLE {
        return None;
    }
    let mut pairs = Vec::with_capacity(best[0] as usize);
    let (mut i, mut j) = (0, 0);
    let mut remaining = best[0];
    while remaining > 0 {
        let mut found = None;
        'outer: for ii in i..n {
            for jj in j..m {
                if a[ii] == b[jj] && best[(ii + 1) * w + jj + 1] == remaining - 1 {
                    found = Some((ii, jj));
                    break 'outer;
                }
            }
            if pinned(ii) {
                break;
            }
        }
        let (ii, jj) = found.expect("an optimal continuation always exists");
        pairs.push((ii, jj));
        i = ii + 1;
        j = jj + 1;
        remaining -= 1;
    }
    Some(pairs)
}

/// Leftmost-greedy longest-common-subsequence alignment as `(index in a, index in b)` pairs.
pub fn lcs_alignment<T: PartialEq>(a: &[T], b: &[T]) -> Vec<(usize, usize)> {
    aligned_pairs(a, b, None).expect("unconstrained alignment is always feasible")
}

pub fn lcs<T: PartialEq + Clone>(a: &[T], b: &[T]) -> Vec<T> {
    lcs_alignment(a, b).into_iter().map(|(i, _)| a[i].clone()).collect()
}

/// A corrupted copy of the reference with the skeleton alignment protected.
#[derive(Debug, Clone, PartialEq)]
pub struct Intermediate<T> {
    pub tokens: Vec<T>,
    /// True where the token belongs to `LCS(skeleton, reference)`.
    pub protected: Vec<bool>,
}

/// Deletes each reference token outside `LCS(skeleton, y_star)` with
/// probability `1 - keep_rate`.
pub fn make_intermediate_with_rate<T: PartialEq + Clone, R: rand::Rng>(
    y_star: &[T],
    skeleton: &[T],
    keep_rate: f64,
    rng: &mut R,
) -> Intermediate<T> {
    let mut protected_ref = vec![false; y_star.len()];
    for (_, j) in lcs_alignment(skeleton, y_star) {
        protected_ref[j] = true;
    }
    let keep_rate = keep_rate.clamp(0.0, 1.0);
    let mut out = Intermediate {
        tokens: Vec::with_capacity(y_star.len()),
        protected: Vec::with_capacity(y_star.len()),
    };
    for (tok, &p) in y_star.iter().zip(&protected_ref) {
        if p || rng.gen_bool(keep_rate) {
            out.tokens.push(tok.clone());
            out.protected.push(p);
        }
    }
    out
}

/// As [`make_intermediate_with_rate`] with the keep rate drawn from `U[0, 1]`.
pub fn make_intermediate<T: PartialEq + Clone, R: rand::Rng>(y_star: &[T], skeleton: &[T], rng: &mut R) -> Intermediate<T> {
    let rate: f64 = rng.gen_range(0.0..=1.0);
    make_intermediate_with_rate(y_star, skeleton, rate, rng)
}

/// Per-slot insertions taking a subsequence of `y_star` back to `y_star`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InsertionOps<T> {
    /// `|y_current| + 1` counts.
    pub counts: Vec<usize>,
    pub tokens: Vec<Vec<T>>,
}

pub fn oracle_insertion<T: PartialEq + Clone>(y_current: &[T], y_star: &[T]) -> Result<InsertionOps<T>> {
    let mut ops = InsertionOps {
        counts: Vec::with_capacity(y_current.len() + 1),
        tokens: Vec::with_capacity(y_current.len() + 1),
    };
    let mut j = 0;
    for tok in y_current {
        let start = j;
        while j < y_star.len() && y_star[j] != *tok {
            j += 1;
        }
        if j == y_star.len() {
            return Err(Error::Contract("insertion oracle needs a subsequence of the target".into()));
        }
        ops.counts.push(j - start);
        ops.tokens.push(y_star[start..j].to_vec());
        j += 1;
    }
    ops.counts.push(y_star.len() - j);
    ops.tokens.push(y_star[j..].to_vec());
    Ok(ops)
}

/// Keep (`false`) / delete (`true`) labels from the leftmost-greedy LCS with `y_star`.
pub fn oracle_deletion<T: PartialEq>(y: &[T], y_star: &[T]) -> Vec<bool> {
    let mut delete = vec![true; y.len()];
    for (i, _) in lcs_alignment(y, y_star) {
        delete[i] = false;
    }
    delete
}

/// Deletion labels from the largest alignment that keeps every `protected`
/// position. Fails if the protected tokens are not a subsequence of `y_star`.
pub fn oracle_deletion_constrained<T: PartialEq>(y: &[T], protected: &[bool], y_star: &[T]) -> Result<Vec<bool>> {
    if protected.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "oracle_deletion_constrained",
            lhs: vec![y.len()],
            rhs: vec![protected.len()],
        });
    }
    let pairs = aligned_pairs(y, y_star, Some(protected))
        .ok_or_else(|| Error::Contract("protected tokens cannot be aligned to the target".into()))?;
    let mut delete = vec![true; y.len()];
    for (i, _) in pairs {
        delete[i] = false;
    }
    Ok(delete)
}

/// Inserts `counts[k]` copies of `placeholder` before position `k` of `y`
/// (the last slot is after the final token).
pub fn apply_insertions<T: Clone>(y: &[T], counts: &[usize], placeholder: &T) -> Result<Vec<T>> {
    if counts.len() != y.len() + 1 {
        return Err(Error::ShapeMismatch {
            op: "apply_insertions",
            lhs: vec![y.len() + 1],
            rhs: vec![counts.len()],
        });
    }
    let mut out = Vec::with_capacity(y.len() + counts.iter().sum::<usize>());
    for (k, &c) in counts.iter().enumerate() {
        out.extend(std::iter::repeat(placeholder.clone()).take(c));
        if let Some(t) = y.get(k) {
            out.push(t.clone());
        }
    }
    Ok(out)
}

/// Fills insertion slots with concrete tokens.
pub fn apply_filled_insertions<T: Clone>(y: &[T], tokens: &[Vec<T>]) -> Result<Vec<T>> {
    if tokens.len() != y.len() + 1 {
        return Err(Error::ShapeMismatch {
            op: "apply_filled_insertions",
            lhs: vec![y.len() + 1],
            rhs: vec![tokens.len()],
        });
    }
    let mut out = Vec::new();
    for (k, slot) in tokens.iter().enumerate() {
        out.extend(slot.iter().cloned());
        if let Some(t) = y.get(k) {
            out.push(t.clone());
        }
    }
    Ok(out)
}

/// Applies keep/delete labels.
pub fn apply_deletions<T: Clone>(y: &[T], delete: &[bool]) -> Vec<T> {
    y.iter().zip(delete).filter(|(_, &d)| !d).map(|(t, _)| t.clone()).collect()
}

/// Sequences seen by the editor heads for one training example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingTriple {
    /// Corrupted reference.
    pub y_prime: Vec<usize>,
    /// `y_prime` with oracle placeholders.
    pub y_dprime: Vec<usize>,
    /// `y_dprime` with the model's argmax fills.
    pub y_tprime: Vec<usize>,
}

/// Editor inputs for one example, as token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditSample {
    pub cells: CellInputs,
    pub reference: Vec<usize>,
    pub skeleton: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct EditLoss {
    /// `L_ins + lambda * L_del`.
    pub total: Var,
    pub l_ins: f64,
    pub l_del: f64,
    pub l_plh: f64,
    pub l_tok: f64,
    /// Slots whose oracle count exceeded `k_max`.
    pub clamped: usize,
    pub triple: TrainingTriple,
}

fn with_sentinels(body: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(body.len() + 2);
    v.push(BOS);
    v.extend_from_slice(body);
    v.push(EOS);
    v
}

/// Imitation loss for one example: placeholder and token heads on the
/// corrupted reference, deletion head on the model's own fills.
pub fn edit_loss<R: rand::Rng>(
    g: &mut Graph,
    net: &RealizerNet,
    sample: &EditSample,
    lambda: f64,
    rng: &mut R,
) -> Result<EditLoss> {
    let memory = net.encoder.encode(g, &sample.cells)?.hidden;
    let inter = make_intermediate(&sample.reference, &sample.skeleton, rng);
    let ops = oracle_insertion(&inter.tokens, &sample.reference)?;
    let k_max = net.k_max;
    let clamped = ops.counts.iter().filter(|&&c| c > k_max).count();
    let counts: Vec<usize> = ops.counts.iter().map(|&c| c.min(k_max)).collect();
    let gold: Vec<usize> = ops.tokens.iter().flat_map(|t| t.iter().take(k_max).copied()).collect();

    let z1 = net.decode_hidden(g, &with_sentinels(&inter.tokens), memory, false)?;
    let plh_logits = net.placeholder_logits(g, z1)?;
    let l_plh = g.cross_entropy(plh_logits, &counts)?;

    let y_dprime = apply_insertions(&inter.tokens, &counts, &PLH)?;
    let protected_dprime = apply_insertions(&inter.protected, &counts, &false)?;
    let plh_rows: Vec<usize> = y_dprime.iter().enumerate().filter(|(_, &t)| t == PLH).map(|(i, _)| i + 1).collect();
    let mut y_tprime = y_dprime.clone();
    let l_ins = if plh_rows.is_empty() {
        l_plh
    } else {
        let z2 = net.decode_hidden(g, &with_sentinels(&y_dprime), memory, false)?;
        let tok_logits = net.token_logits(g, z2, &plh_rows)?.expect("placeholders present");
        let values = g.value(tok_logits);
        for (k, &row) in plh_rows.iter().enumerate() {
            y_tprime[row - 1] = fill_argmax(values.row(k));
        }
        let l_tok = g.cross_entropy(tok_logits, &gold)?;
        g.add(l_plh, l_tok)?
    };
    let l_plh_value = g.value(l_plh).item();
    let l_ins_value = g.value(l_ins).item();

    let mut l_del_value = 0.0;
    let total = if lambda > 0.0 && !y_tprime.is_empty() {
        let delete = oracle_deletion_constrained(&y_tprime, &protected_dprime, &sample.reference)?;
        let labels: Vec<usize> = delete.iter().map(|&d| usize::from(d)).collect();
        let z3 = net.decode_hidden(g, &with_sentinels(&y_tprime), memory, false)?;
        let rows: Vec<usize> = (1..=y_tprime.len()).collect();
        let zs = g.select_rows(z3, &rows)?;
        let del_logits = net.deletion_logits(g, zs)?;
        let l_del = g.cross_entropy(del_logits, &labels)?;
        l_del_value = g.value(l_del).item();
        let weighted = g.scale(l_del, lambda)?;
        g.add(l_ins, weighted)?
    } else {
        l_ins
    };
    Ok(EditLoss {
        total,
        l_ins: l_ins_value,
        l_del: l_del_value,
        l_plh: l_plh_value,
        l_tok: l_ins_value - l_plh_value,
        clamped,
        triple: TrainingTriple {
            y_prime: inter.tokens,
            y_dprime,
            y_tprime,
        },
    })
}
