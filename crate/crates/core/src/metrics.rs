//! Corpus BLEU-4, PARENT and the table-only PARENT-T variant with the
//! word-overlap entailment model.

use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::oracle::lcs_alignment;
use crate::table::Table;

pub const MAX_ORDER: usize = 4;

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> BTreeMap<Vec<&str>, usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 in `[0, 100]`. Orders above one with no match at all
/// are add-one smoothed.
pub fn bleu<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::EmptyInput { op: "bleu" });
    }
    if hypotheses.len() != references.len() {
        return Err(Error::ShapeMismatch {
            op: "bleu",
            lhs: vec![hypotheses.len()],
            rhs: vec![references.len()],
        });
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(&g).copied().unwrap_or(0));
            }
            totals[n - 1] += (h.len() + 1).saturating_sub(n);
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_ORDER {
        let p = if matches[n] == 0 && n > 0 {
            1.0 / (totals[n] as f64 + 1.0)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok((100.0 * bp * (log_sum / MAX_ORDER as f64).exp()).clamp(0.0, 100.0))
}

/// Fraction of the n-gram's tokens that occur in some value of the table.
pub fn table_entailment_weight<S: AsRef<str>>(ngram: &[S], table: &Table) -> f64 {
    table_weight(ngram, &table.value_token_set())
}

fn table_weight<S: AsRef<str>>(ngram: &[S], values: &HashSet<&str>) -> f64 {
    if ngram.is_empty() {
        return 0.0;
    }
    ngram.iter().filter(|t| values.contains(t.as_ref())).count() as f64 / ngram.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        Self {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn geometric_mean(xs: &[f64]) -> f64 {
    if xs.iter().any(|&x| x <= 0.0) {
        return 0.0;
    }
    (xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp()
}

/// Mean over attributes of `|LCS(value, hypothesis)| / |value|`.
pub fn table_recall<S: AsRef<str>>(hypothesis: &[S], table: &Table) -> f64 {
    let hyp: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).collect();
    let attrs = table.attributes();
    attrs
        .iter()
        .map(|a| {
            let value: Vec<&str> = a.value_tokens().iter().map(String::as_str).collect();
            lcs_alignment(&value, &hyp).len() as f64 / value.len() as f64
        })
        .sum::<f64>()
        / attrs.len() as f64
}

/// Entailed precision; with a reference, matched n-grams count in full.
fn entailed_precision<S: AsRef<str>>(hypothesis: &[S], reference: Option<&[S]>, values: &HashSet<&str>) -> f64 {
    if hypothesis.is_empty() {
        return 0.0;
    }
    let mut slots = [1.0; MAX_ORDER];
    for n in 1..=MAX_ORDER {
        let hc = ngram_counts(hypothesis, n);
        let total: usize = hc.values().sum();
        if total == 0 {
            continue;
        }
        let rc = reference.map(|r| ngram_counts(r, n));
        let mut num = 0.0;
        for (g, &c) in &hc {
            let w = table_weight(g, values);
            let matched = rc.as_ref().map_or(0, |rc| c.min(rc.get(g).copied().unwrap_or(0)));
            num += matched as f64 + (c - matched) as f64 * w;
        }
        slots[n - 1] = num / total as f64;
    }
    geometric_mean(&slots)
}

fn reference_recall<S: AsRef<str>>(hypothesis: &[S], reference: &[S], values: &HashSet<&str>) -> f64 {
    let mut slots = [1.0; MAX_ORDER];
    for n in 1..=MAX_ORDER {
        let rc = ngram_counts(reference, n);
        let hc = ngram_counts(hypothesis, n);
        let (mut num, mut den) = (0.0, 0.0);
        for (g, &c) in &rc {
            let w = table_weight(g, values);
            den += c as f64 * w;
            num += c.min(hc.get(g).copied().unwrap_or(0)) as f64 * w;
        }
        if den > 0.0 {
            slots[n - 1] = num / den;
        }
    }
    geometric_mean(&slots)
}

/// PARENT for one example with recall mixing weight `lambda_mix` on the
/// reference recall.
pub fn parent<S: AsRef<str>>(hypothesis: &[S], reference: &[S], table: &Table, lambda_mix: f64) -> Prf {
    let values = table.value_token_set();
    let precision = entailed_precision(hypothesis, Some(reference), &values);
    let ref_recall = reference_recall(hypothesis, reference, &values);
    let tab_recall = table_recall(hypothesis, table);
    let recall = ref_recall.powf(lambda_mix) * tab_recall.powf(1.0 - lambda_mix);
    Prf::new(precision, recall)
}

/// PARENT-T: table-only precision and table recall.
pub fn parent_t<S: AsRef<str>>(hypothesis: &[S], table: &Table) -> Prf {
    let values = table.value_token_set();
    Prf::new(entailed_precision::<S>(hypothesis, None, &values), table_recall(hypothesis, table))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleScores {
    pub index: usize,
    pub parent: Prf,
    pub parent_t: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub examples: usize,
    pub bleu: f64,
    pub parent_precision: f64,
    pub parent_recall: f64,
    pub parent_f1: f64,
    pub parent_t_precision: f64,
    pub parent_t_recall: f64,
    pub parent_t_f1: f64,
    pub per_example: Vec<ExampleScores>,
}

impl MetricReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<12} {:>10} {:>10} {:>10}\n", "metric", "precision", "recall", "f1"));
        s.push_str(&format!(
            "{:<12} {:>10.4} {:>10.4} {:>10.4}\n",
            "PARENT", self.parent_precision, self.parent_recall, self.parent_f1
        ));
        s.push_str(&format!(
            "{:<12} {:>10.4} {:>10.4} {:>10.4}\n",
            "PARENT-T", self.parent_t_precision, self.parent_t_recall, self.parent_t_f1
        ));
        s.push_str(&format!("{:<12} {:>10.2}\n", "BLEU", self.bleu));
        s.push_str(&format!("{:<12} {:>10}\n", "examples", self.examples));
        s
    }
}

/// Scores system outputs against references and tables; corpus PARENT values
/// are example means, with F1 the harmonic mean of the mean precision and recall.
pub fn evaluate<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<S>], tables: &[&Table], lambda_mix: f64) -> Result<MetricReport> {
    if tables.len() != hypotheses.len() {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            lhs: vec![hypotheses.len()],
            rhs: vec![tables.len()],
        });
    }
    let bleu = bleu(hypotheses, references)?;
    let per_example: Vec<ExampleScores> = hypotheses
        .iter()
        .zip(references)
        .zip(tables)
        .enumerate()
        .map(|(index, ((h, r), t))| ExampleScores {
            index,
            parent: parent(h, r, t, lambda_mix),
            parent_t: parent_t(h, t),
        })
        .collect();
    let n = per_example.len() as f64;
    let mean = |f: &dyn Fn(&ExampleScores) -> f64| per_example.iter().map(f).sum::<f64>() / n;
    let (pp, pr) = (mean(&|e| e.parent.precision), mean(&|e| e.parent.recall));
    let (tp, tr) = (mean(&|e| e.parent_t.precision), mean(&|e| e.parent_t.recall));
    Ok(MetricReport {
        examples: per_example.len(),
        bleu,
        parent_precision: pp,
        parent_recall: pr,
        parent_f1: harmonic(pp, pr),
        parent_t_precision: tp,
        parent_t_recall: tr,
        parent_t_f1: harmonic(tp, tr),
        per_example,
    })
}
