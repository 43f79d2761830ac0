//! Tables, examples, corpora, vocabularies and table linearization.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const PLH: usize = 4;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const PLH_TOKEN: &str = "<plh>";

/// Reserved tokens in id order.
pub const RESERVED: [&str; 5] = [PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN, PLH_TOKEN];

/// Splits text into maximal runs of non-whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

fn normalize_key(key: &str) -> String {
    key.split_whitespace().collect::<Vec<_>>().join("_")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attribute {
    key: String,
    value_tokens: Vec<String>,
}

impl Attribute {
    /// Builds an attribute; whitespace inside the key is folded to `_`.
    pub fn new(key: &str, value_tokens: Vec<String>) -> Result<Self> {
        let key = normalize_key(key);
        if key.is_empty() {
            return Err(Error::InvalidTable("attribute key is empty".into()));
        }
        if value_tokens.is_empty() {
            return Err(Error::InvalidTable(format!("attribute `{key}` has an empty value")));
        }
        if value_tokens.iter().any(|t| t.is_empty() || t.contains(char::is_whitespace)) {
            return Err(Error::InvalidTable(format!("attribute `{key}` has a malformed token")));
        }
        Ok(Self { key, value_tokens })
    }

    pub fn from_text(key: &str, value: &str) -> Result<Self> {
        Self::new(key, tokenize(value))
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn value_tokens(&self) -> &[String] {
        &self.value_tokens
    }
}

/// An ordered list of attributes. Order is significant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    attributes: Vec<Attribute>,
}

impl Table {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::InvalidTable("table has no attributes".into()));
        }
        Ok(Self { attributes })
    }

    /// Convenience constructor from `(key, value text)` pairs.
    pub fn from_pairs(pairs: &[(&str, &str)]) -> Result<Self> {
        pairs
            .iter()
            .map(|(k, v)| Attribute::from_text(k, v))
            .collect::<Result<Vec<_>>>()
            .and_then(Self::new)
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    /// Every value token of every attribute, in table order.
    pub fn value_tokens(&self) -> impl Iterator<Item = &str> {
        self.attributes
            .iter()
            .flat_map(|a| a.value_tokens.iter().map(String::as_str))
    }

    pub fn value_token_set(&self) -> HashSet<&str> {
        self.value_tokens().collect()
    }

    pub fn linearize(&self) -> LinearizedTable {
        linearize_table(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub table: Table,
    pub reference: Vec<String>,
    pub skeleton: Option<Vec<String>>,
    /// 1-based line in the source file, when parsed from one.
    pub line: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawAttribute {
    key: String,
    value: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawExample {
    table: Vec<RawAttribute>,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    skeleton: Option<Vec<String>>,
}

impl Example {
    fn from_raw(raw: RawExample, line: usize) -> Result<Self> {
        let attributes = raw
            .table
            .iter()
            .map(|a| Attribute::from_text(&a.key, &a.value))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let table = Table::new(attributes).map_err(|e| Error::Parse { line, message: e.to_string() })?;
        Ok(Self {
            table,
            reference: tokenize(&raw.text),
            skeleton: raw.skeleton,
            line,
        })
    }

    fn to_raw(&self) -> RawExample {
        RawExample {
            table: self
                .table
                .attributes
                .iter()
                .map(|a| RawAttribute {
                    key: a.key.clone(),
                    value: a.value_tokens.join(" "),
                })
                .collect(),
            text: self.reference.join(" "),
            skeleton: self.skeleton.clone(),
        }
    }

    /// Serializes the example as one JSON Lines record (no trailing newline).
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.to_raw()).expect("corpus records always serialize")
    }
}

/// Parses a JSON Lines corpus. Blank lines are skipped.
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut examples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        examples.push(Example::from_raw(raw, line_no)?);
    }
    Ok(Corpus { examples })
}

pub fn parse_corpus_str(text: &str) -> Result<Corpus> {
    parse_corpus(text.as_bytes())
}

pub fn write_corpus<W: Write>(corpus: &Corpus, mut out: W) -> Result<()> {
    for ex in &corpus.examples {
        writeln!(out, "{}", ex.to_json_line())?;
    }
    Ok(())
}

pub fn read_corpus_file(path: &std::path::Path) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    parse_corpus(std::io::BufReader::new(file))
}

/// Token ↔ id map with the reserved ids fixed at 0..5.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || tokens.iter().zip(RESERVED.iter()).any(|(t, r)| t != r)
        {
            return Err(Error::Checkpoint("vocabulary does not start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Checkpoint(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    fn from_ranked<'a>(ranked: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(str::to_owned));
        Self::from_tokens(tokens).expect("ranked tokens are distinct and exclude reserved ones")
    }

    /// Key vocabulary: reserved entries plus every key in first-occurrence order.
    pub fn from_keys(corpus: &Corpus) -> Self {
        let mut seen = HashSet::new();
        let mut keys = Vec::new();
        for ex in &corpus.examples {
            for a in ex.table.attributes() {
                if !RESERVED.contains(&a.key()) && seen.insert(a.key()) {
                    keys.push(a.key());
                }
            }
        }
        Self::from_ranked(keys)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}

/// Keeps the `cap - 5` most frequent tokens over table values and reference
/// texts. Ties go to the token seen first, visiting each example's table
/// values (in table order) before its reference.
pub fn build_vocabulary(corpus: &Corpus, cap: usize) -> Result<Vocabulary> {
    if cap < RESERVED.len() {
        return Err(Error::Config(format!(
            "vocabulary cap {cap} leaves no room for the {} reserved tokens",
            RESERVED.len()
        )));
    }
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    let mut order = 0usize;
    for ex in &corpus.examples {
        let tokens = ex.table.value_tokens().chain(ex.reference.iter().map(String::as_str));
        for tok in tokens {
            if RESERVED.contains(&tok) {
                continue;
            }
            let entry = counts.entry(tok).or_insert((0, order));
            if entry.0 == 0 {
                order += 1;
            }
            entry.0 += 1;
        }
    }
    let mut ranked: Vec<(&str, usize, usize)> = counts.into_iter().map(|(t, (c, f))| (t, c, f)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    ranked.truncate(cap - RESERVED.len());
    Ok(Vocabulary::from_ranked(ranked.into_iter().map(|(t, _, _)| t)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearizedCell {
    pub token: String,
    pub key: String,
    pub fwd_pos: usize,
    pub bwd_pos: usize,
}

impl LinearizedCell {
    pub fn eos() -> Self {
        Self {
            token: EOS_TOKEN.to_owned(),
            key: EOS_TOKEN.to_owned(),
            fwd_pos: 1,
            bwd_pos: 1,
        }
    }

    pub fn is_eos(&self) -> bool {
        self.token == EOS_TOKEN && self.key == EOS_TOKEN
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearizedTable {
    pub cells: Vec<LinearizedCell>,
}

impl LinearizedTable {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn tokens(&self) -> Vec<&str> {
        self.cells.iter().map(|c| c.token.as_str()).collect()
    }
}

/// Flattens a table into `(token, key, p+, p-)` cells followed by the EOS cell.
pub fn linearize_table(table: &Table) -> LinearizedTable {
    let mut cells = Vec::with_capacity(table.value_tokens().count() + 1);
    for attr in table.attributes() {
        let len = attr.value_tokens.len();
        for (j, tok) in attr.value_tokens.iter().enumerate() {
            cells.push(LinearizedCell {
                token: tok.clone(),
                key: attr.key.clone(),
                fwd_pos: j + 1,
                bwd_pos: len - j,
            });
        }
    }
    cells.push(LinearizedCell::eos());
    LinearizedTable { cells }
}

/// Case-insensitive stop-word set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopWordList {
    words: HashSet<String>,
}

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

impl StopWordList {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            words: words
                .into_iter()
                .map(|w| w.as_ref().trim().to_lowercase())
                .filter(|w| !w.is_empty())
                .collect(),
        }
    }

    pub fn empty() -> Self {
        Self { words: HashSet::new() }
    }

    /// The embedded English function-word list.
    pub fn english() -> Self {
        Self::parse(DEFAULT_STOPWORDS)
    }

    /// One token per line.
    pub fn parse(text: &str) -> Self {
        Self::new(text.lines())
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.words.contains(&token.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

impl Default for StopWordList {
    fn default() -> Self {
        Self::english()
    }
}
