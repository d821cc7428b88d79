//! Product corpus handling: tokenization, vocabularies, splits, and catalogs.
//!
//! A product is a raw title plus a gold taxonomy path. Titles become source
//! token sequences; paths become target token sequences where every taxonomy
//! node label is a single target token, bracketed by BOS/EOS.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod split;
mod synthetic;
mod tsv;

pub use split::{stratified_holdout, stratified_split, DatasetSplit, SplitRatios};
pub use synthetic::{generate_synthetic_catalog, SyntheticConfig};
pub use tsv::{load_catalog_tsv, write_catalog_tsv, CatalogLoad, LoadReport};

/// Reserved id for the padding token.
pub const PAD: usize = 0;
/// Reserved id for the unknown-token placeholder.
pub const UNK: usize = 1;
/// Reserved id for beginning-of-sequence.
pub const BOS: usize = 2;
/// Reserved id for end-of-sequence.
pub const EOS: usize = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";

const SPECIAL_TOKENS: [&str; 4] = [PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN];

/// Delimiter between node labels in a serialized path.
pub const PATH_DELIMITER: &str = " > ";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty title after tokenization: {0:?}")]
    EmptyTitle(String),
    #[error("empty category path")]
    EmptyPath,
    #[error("empty node label in path {0:?}")]
    EmptyLabel(String),
    #[error("node label {0:?} contains the path delimiter {PATH_DELIMITER:?}")]
    LabelContainsDelimiter(String),
    #[error("repeated node label {label:?} in gold path {path:?}")]
    RepeatedLabel { label: String, path: String },
    #[error("vocabulary max_size must be at least 4 (got {0})")]
    VocabTooSmall(usize),
    #[error("split ratios must each be positive and sum to 1 (got {0:?})")]
    BadRatios([f64; 3]),
    #[error("cannot split an empty product list")]
    EmptySplitInput,
    #[error("synthetic config invalid: {0}")]
    BadSyntheticConfig(String),
    #[error("cannot read catalog file {path}: {source}")]
    UnreadableCatalog {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write file {path}: {source}")]
    UnwritableFile {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed vocabulary file: {0}")]
    BadVocabFile(String),
}

/// A root-to-leaf sequence of taxonomy node labels.
///
/// Gold paths are validated at ingestion ([`Product::new`] and the TSV
/// loader); decoded predictions may carry anything a model can emit, including
/// repeated or `<unk>` labels, so construction via [`CategoryPath::new`] is
/// deliberately permissive. [`CategoryPath::is_well_formed`] is the gate used
/// wherever gold-path invariants matter.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryPath {
    nodes: Vec<String>,
}

impl CategoryPath {
    /// Wrap a node sequence without validation.
    pub fn new(nodes: Vec<String>) -> Self {
        CategoryPath { nodes }
    }

    /// Parse a serialized path. The delimiter is exactly `" > "`; empty input
    /// and empty segments are rejected.
    pub fn parse(s: &str) -> Result<Self, CorpusError> {
        if s.is_empty() {
            return Err(CorpusError::EmptyPath);
        }
        let nodes: Vec<String> = s.split(PATH_DELIMITER).map(str::to_owned).collect();
        if nodes.iter().any(|n| n.is_empty()) {
            return Err(CorpusError::EmptyLabel(s.to_owned()));
        }
        Ok(CategoryPath { nodes })
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn depth(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> Option<&str> {
        self.nodes.first().map(String::as_str)
    }

    pub fn leaf(&self) -> Option<&str> {
        self.nodes.last().map(String::as_str)
    }

    pub fn serialize(&self) -> String {
        self.nodes.join(PATH_DELIMITER)
    }

    /// True when the path satisfies gold-path invariants: depth at least one,
    /// no empty label, no label containing the delimiter, no repeated label.
    pub fn is_well_formed(&self) -> bool {
        if self.nodes.is_empty() {
            return false;
        }
        let mut seen = std::collections::HashSet::new();
        for n in &self.nodes {
            if n.is_empty() || n.contains(PATH_DELIMITER) || !seen.insert(n.as_str()) {
                return false;
            }
        }
        true
    }

    fn validate_gold(&self) -> Result<(), CorpusError> {
        if self.nodes.is_empty() {
            return Err(CorpusError::EmptyPath);
        }
        let mut seen = std::collections::HashSet::new();
        for n in &self.nodes {
            if n.is_empty() {
                return Err(CorpusError::EmptyLabel(self.serialize()));
            }
            if n.contains(PATH_DELIMITER) {
                return Err(CorpusError::LabelContainsDelimiter(n.clone()));
            }
            if !seen.insert(n.as_str()) {
                return Err(CorpusError::RepeatedLabel {
                    label: n.clone(),
                    path: self.serialize(),
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for CategoryPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.serialize())
    }
}

/// One catalog item: raw title, its tokenization, and the gold path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub id: usize,
    pub raw_title: String,
    pub title_tokens: Vec<String>,
    pub gold_path: CategoryPath,
}

impl Product {
    /// Build a product, tokenizing the title and validating the gold path.
    pub fn new(id: usize, raw_title: &str, gold_path: CategoryPath) -> Result<Self, CorpusError> {
        let title_tokens = tokenize_title(raw_title);
        if title_tokens.is_empty() {
            return Err(CorpusError::EmptyTitle(raw_title.to_owned()));
        }
        gold_path.validate_gold()?;
        Ok(Product {
            id,
            raw_title: raw_title.to_owned(),
            title_tokens,
            gold_path,
        })
    }

    /// Class label used for stratification and metrics: the serialized path.
    pub fn class(&self) -> String {
        self.gold_path.serialize()
    }
}

/// Lowercase a title and split it into tokens.
///
/// Every maximal run of alphanumeric characters is one token; every other
/// non-whitespace character becomes a standalone single-character token.
/// Applying the tokenizer to the space-joined output of a previous run
/// returns the same sequence.
pub fn tokenize_title(raw: &str) -> Vec<String> {
    let lowered = raw.to_lowercase();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in lowered.chars() {
        if ch.is_alphanumeric() {
            current.push(ch);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Frequency-ranked token table with four reserved specials at ids 0..=3.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from token sequences, keeping at most `max_size` entries
    /// (including the four specials). Surviving tokens are the most frequent;
    /// frequency ties break lexicographically.
    pub fn build<S, I>(sequences: I, max_size: usize) -> Result<Self, CorpusError>
    where
        S: AsRef<str>,
        I: IntoIterator,
        I::Item: IntoIterator<Item = S>,
    {
        if max_size < SPECIAL_TOKENS.len() {
            return Err(CorpusError::VocabTooSmall(max_size));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for seq in sequences {
            for tok in seq {
                let tok = tok.as_ref();
                // A literal special string in the corpus already has an id.
                if SPECIAL_TOKENS.contains(&tok) {
                    continue;
                }
                *counts.entry(tok.to_owned()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - SPECIAL_TOKENS.len());

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // always holds the four specials
    }

    /// Iterate `(id, token)` in id order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &str)> {
        self.tokens.iter().enumerate().map(|(i, t)| (i, t.as_str()))
    }

    /// Write the vocabulary: one header line, then one token per line whose
    /// id is its zero-based position after the header.
    pub fn save(&self, path: &std::path::Path, meta: &str) -> Result<(), CorpusError> {
        let mut out = String::with_capacity(self.tokens.len() * 8);
        out.push_str(&format!("taxpath-vocab v1 {meta}\n"));
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|source| CorpusError::UnwritableFile {
            path: path.display().to_string(),
            source,
        })
    }

    /// Load a vocabulary written by [`Vocabulary::save`]. Returns the
    /// vocabulary and the header metadata string.
    pub fn load(path: &std::path::Path) -> Result<(Self, String), CorpusError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| CorpusError::UnreadableCatalog {
                path: path.display().to_string(),
                source,
            })?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| CorpusError::BadVocabFile("empty file".into()))?;
        let meta = header
            .strip_prefix("taxpath-vocab v1 ")
            .ok_or_else(|| CorpusError::BadVocabFile(format!("bad header {header:?}")))?;
        let tokens: Vec<String> = lines.map(str::to_owned).collect();
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(special) {
                return Err(CorpusError::BadVocabFile(format!(
                    "token {i} must be {special:?}"
                )));
            }
        }
        Ok((Self::from_tokens(tokens), meta.to_owned()))
    }
}

/// A product encoded against source and target vocabularies.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedProduct {
    pub product_id: usize,
    /// Title token ids with UNK substitution; never empty.
    pub source: Vec<usize>,
    /// `BOS, node ids..., EOS`; node labels missing from the target
    /// vocabulary encode as UNK.
    pub target: Vec<usize>,
    /// True when any gold node label encoded as UNK; such products are
    /// excluded from training and reported.
    pub target_has_unk: bool,
}

/// Encode a product's title and gold path.
///
/// Each taxonomy node label is one target token regardless of internal
/// spaces. The target sequence is `BOS` + one id per node + `EOS`.
pub fn encode_product(
    product: &Product,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<EncodedProduct, CorpusError> {
    if product.gold_path.is_empty() {
        return Err(CorpusError::EmptyPath);
    }
    let source: Vec<usize> = product
        .title_tokens
        .iter()
        .map(|t| src_vocab.id_or_unk(t))
        .collect();
    let mut target = Vec::with_capacity(product.gold_path.depth() + 2);
    let mut target_has_unk = false;
    target.push(BOS);
    for node in product.gold_path.nodes() {
        let id = tgt_vocab.id_or_unk(node);
        if id == UNK {
            target_has_unk = true;
        }
        target.push(id);
    }
    target.push(EOS);
    Ok(EncodedProduct {
        product_id: product.id,
        source,
        target,
        target_has_unk,
    })
}
