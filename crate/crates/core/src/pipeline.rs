//! Batch inference: skeleton prediction and skeleton-to-text realization
//! over a corpus, parallel across examples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{iterate, DecodeOptions, EditPolicy, Termination};
use crate::error::{Error, Result};
use crate::pointer::PointerModel;
use crate::table::{tokenize, Corpus};

/// One generated output line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub iterations: usize,
    pub termination: Termination,
}

impl Generation {
    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.text)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("generation serializes")
    }
}

/// Beam-search skeletons for every table of the corpus.
pub fn predict_skeletons(pointer: &PointerModel, corpus: &Corpus, beam_width: usize, max_len: usize) -> Result<Vec<Vec<String>>> {
    corpus
        .examples
        .par_iter()
        .map(|ex| Ok(pointer.beam_search(&ex.table, beam_width, max_len)?.skeleton))
        .collect()
}

/// The annotated skeletons of the corpus.
pub fn oracle_skeletons(corpus: &Corpus) -> Result<Vec<Vec<String>>> {
    corpus
        .iter()
        .map(|ex| {
            ex.skeleton
                .clone()
                .ok_or_else(|| Error::DataIntegrity(format!("line {}: oracle skeleton requested but missing", ex.line)))
        })
        .collect()
}

/// Expands each skeleton into text with the given policy.
pub fn realize<P>(policy: &P, corpus: &Corpus, skeletons: &[Vec<String>], opts: &DecodeOptions) -> Result<Vec<Generation>>
where
    P: EditPolicy + Sync,
{
    if skeletons.len() != corpus.len() {
        return Err(Error::ShapeMismatch {
            op: "realize",
            lhs: vec![corpus.len()],
            rhs: vec![skeletons.len()],
        });
    }
    corpus
        .examples
        .par_iter()
        .zip(skeletons.par_iter())
        .map(|(ex, sk)| {
            let (body, trace) = iterate(policy, &ex.table, sk, opts)?;
            Ok(Generation {
                text: body.join(" "),
                iterations: trace.iterations,
                termination: trace.termination,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::StubPolicy;
    use crate::table::{parse_corpus_str, Corpus};

    fn corpus() -> Corpus {
        let mut c = parse_corpus_str(
            r#"{"table": [{"key": "name", "value": "Ana Silva"}], "text": "Ana Silva is here ."}
{"table": [{"key": "name", "value": "Bo"}], "text": "Bo ."}"#,
        )
        .unwrap();
        c.examples[0].skeleton = Some(vec!["Ana".into(), "Silva".into()]);
        c.examples[1].skeleton = Some(vec!["Bo".into()]);
        c
    }

    #[test]
    fn identity_policy_returns_skeletons() {
        let c = corpus();
        let sk = oracle_skeletons(&c).unwrap();
        let opts = DecodeOptions {
            max_iter: 5,
            hard_constraints: true,
            k_max: 8,
            max_state_len: 64,
        };
        let out = realize(&StubPolicy::identity(), &c, &sk, &opts).unwrap();
        assert_eq!(out[0].text, "Ana Silva");
        assert_eq!(out[1].termination, Termination::FixedPoint);
        assert_eq!(out[0].to_json_line(), r#"{"text":"Ana Silva","iterations":1,"termination":"fixed_point"}"#);
        assert!(realize(&StubPolicy::identity(), &c, &sk[..1], &opts).is_err());
    }

    #[test]
    fn missing_oracle_skeleton() {
        let mut c = corpus();
        c.examples[1].skeleton = None;
        assert!(matches!(oracle_skeletons(&c), Err(Error::DataIntegrity(_))));
    }
}
