//! Automatic skeleton annotation: the non-stop-word reference tokens that
//! also occur in the table, kept in reference order.

use crate::table::{Corpus, StopWordList, Table};

pub type Skeleton = Vec<String>;

/// Digits with optional `.`, `,` or `-` separators. Such tokens are never
/// treated as stop words.
pub fn is_numeric_token(token: &str) -> bool {
    token.chars().any(|c| c.is_ascii_digit())
        && token.chars().all(|c| c.is_ascii_digit() || matches!(c, '.' | ',' | '-'))
}

fn is_stop_word(token: &str, stopwords: &StopWordList) -> bool {
    !is_numeric_token(token) && stopwords.contains(token)
}

/// Selects, per reference position, every token that occurs among the
/// table's value tokens (exact, case-sensitive match) and is not a stop word.
/// Repeated reference tokens yield repeated skeleton entries.
pub fn annotate_skeleton<S: AsRef<str>>(table: &Table, reference: &[S], stopwords: &StopWordList) -> Skeleton {
    let values = table.value_token_set();
    reference
        .iter()
        .map(AsRef::as_ref)
        .filter(|tok| values.contains(tok) && !is_stop_word(tok, stopwords))
        .map(str::to_owned)
        .collect()
}

/// Fills the `skeleton` field of every example.
pub fn annotate_corpus(corpus: &mut Corpus, stopwords: &StopWordList) {
    for ex in &mut corpus.examples {
        ex.skeleton = Some(annotate_skeleton(&ex.table, &ex.reference, stopwords));
    }
}

/// True when `needle` appears in `haystack` in order (not necessarily contiguously).
pub fn is_subsequence<A: PartialEq<B>, B>(needle: &[A], haystack: &[B]) -> bool {
    let mut it = haystack.iter();
    needle.iter().all(|n| it.any(|h| n == h))
}
