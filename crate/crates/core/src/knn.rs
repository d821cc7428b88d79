//! tf-idf 1-nearest-neighbor baseline.
//!
//! Titles become bag-of-words vectors weighted by raw term frequency times
//! ln(N/df), L2-normalized; a query copies the gold path of its most
//! cosine-similar training title verbatim. By construction the baseline can
//! only ever answer with a path somebody trained on — it cannot invent new
//! ones, which is exactly the contrast the translation models are measured
//! against.

use std::collections::HashMap;

use thiserror::Error;

use crate::corpus::{CategoryPath, Product};

#[derive(Debug, Error)]
pub enum KnnError {
    #[error("cannot build an index from an empty training set")]
    EmptyTrainingSet,
}

/// One stored vector: (token id, weight) pairs sorted by token id, unit
/// Euclidean norm.
type SparseVec = Vec<(usize, f64)>;

/// Immutable tf-idf index over training titles. Queries are thread-safe.
#[derive(Clone, Debug)]
pub struct KnnIndex {
    token_ids: HashMap<String, usize>,
    idf: Vec<f64>,
    /// (original training position, unit vector, gold path, product id)
    entries: Vec<(usize, SparseVec, CategoryPath, usize)>,
    /// Products whose title weighed out to a zero vector and were excluded.
    excluded: Vec<usize>,
    fallback: CategoryPath,
    train_size: usize,
}

/// A baseline answer. `score` is the winning cosine similarity (0 on
/// fallback), `neighbor` the winning product's id.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnPrediction {
    pub path: CategoryPath,
    pub score: f64,
    pub neighbor: Option<usize>,
    /// True when the query vector was zero and the most frequent training
    /// path was returned instead of a neighbor's.
    pub fallback: bool,
}

fn l2_normalize(v: &mut SparseVec) -> bool {
    let norm = v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    if norm == 0.0 {
        return false;
    }
    for (_, w) in v.iter_mut() {
        *w /= norm;
    }
    true
}

/// Dot product of two id-sorted sparse vectors.
fn sparse_dot(a: &SparseVec, b: &SparseVec) -> f64 {
    let (mut i, mut j, mut dot) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                dot += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    dot
}

impl KnnIndex {
    pub fn build(train: &[Product]) -> Result<KnnIndex, KnnError> {
        if train.is_empty() {
            return Err(KnnError::EmptyTrainingSet);
        }
        // Document frequencies over unique tokens per title.
        let mut token_ids: HashMap<String, usize> = HashMap::new();
        let mut df: Vec<usize> = Vec::new();
        for product in train {
            let mut seen: Vec<usize> = product
                .title_tokens
                .iter()
                .map(|t| {
                    let next = token_ids.len();
                    let id = *token_ids.entry(t.clone()).or_insert(next);
                    if id == df.len() {
                        df.push(0);
                    }
                    id
                })
                .collect();
            seen.sort_unstable();
            seen.dedup();
            for id in seen {
                df[id] += 1;
            }
        }
        let n = train.len() as f64;
        let idf: Vec<f64> = df.iter().map(|&d| (n / d as f64).ln()).collect();

        let mut entries = Vec::with_capacity(train.len());
        let mut excluded = Vec::new();
        for (pos, product) in train.iter().enumerate() {
            let mut vector = weigh(&product.title_tokens, &token_ids, &idf);
            if l2_normalize(&mut vector) {
                entries.push((pos, vector, product.gold_path.clone(), product.id));
            } else {
                excluded.push(product.id);
            }
        }

        // Most frequent training path; ties go to the lexicographically
        // smallest serialization.
        let mut counts: HashMap<String, (usize, &CategoryPath)> = HashMap::new();
        for product in train {
            let e = counts
                .entry(product.class())
                .or_insert((0, &product.gold_path));
            e.0 += 1;
        }
        let fallback = counts
            .iter()
            .max_by(|(ka, (ca, _)), (kb, (cb, _))| ca.cmp(cb).then(kb.cmp(ka)))
            .map(|(_, (_, path))| (*path).clone())
            .expect("non-empty by the guard above");

        Ok(KnnIndex {
            token_ids,
            idf,
            entries,
            excluded,
            fallback,
            train_size: train.len(),
        })
    }

    /// Number of training products the index was built from.
    pub fn train_size(&self) -> usize {
        self.train_size
    }

    /// Number of stored (non-degenerate) vectors.
    pub fn stored_count(&self) -> usize {
        self.entries.len()
    }

    /// Product ids whose titles weighed out to zero vectors.
    pub fn excluded_ids(&self) -> &[usize] {
        &self.excluded
    }

    /// The zero-query answer: the most frequent training path.
    pub fn fallback_path(&self) -> &CategoryPath {
        &self.fallback
    }

    /// tf-idf weights of a stored vector by original training position,
    /// as (token, weight) pairs sorted by token. `None` if excluded.
    pub fn vector_terms(&self, position: usize) -> Option<Vec<(String, f64)>> {
        let entry = self.entries.iter().find(|(pos, ..)| *pos == position)?;
        let mut by_id: HashMap<usize, &str> = HashMap::new();
        for (token, &id) in &self.token_ids {
            by_id.insert(id, token);
        }
        let mut terms: Vec<(String, f64)> = entry
            .1
            .iter()
            .map(|&(id, w)| (by_id[&id].to_string(), w))
            .collect();
        terms.sort_by(|a, b| a.0.cmp(&b.0));
        Some(terms)
    }

    /// Cosine similarity of a query against every stored vector, as
    /// (original training position, similarity), in training order.
    /// `None` when the query weighs out to zero.
    pub fn similarities(&self, title_tokens: &[String]) -> Option<Vec<(usize, f64)>> {
        let mut query = weigh(title_tokens, &self.token_ids, &self.idf);
        if !l2_normalize(&mut query) {
            return None;
        }
        Some(
            self.entries
                .iter()
                .map(|(pos, vector, ..)| (*pos, sparse_dot(&query, vector)))
                .collect(),
        )
    }

    /// Copy the nearest training neighbor's gold path. Equal similarities
    /// resolve to the lowest training position.
    pub fn predict(&self, title_tokens: &[String]) -> KnnPrediction {
        let Some(sims) = self.similarities(title_tokens) else {
            return KnnPrediction {
                path: self.fallback.clone(),
                score: 0.0,
                neighbor: None,
                fallback: true,
            };
        };
        // Entries are in ascending training position, so strict `>` keeps
        // the earliest maximum.
        let mut best = 0;
        for i in 1..sims.len() {
            if sims[i].1 > sims[best].1 {
                best = i;
            }
        }
        let (_, _, path, product_id) = &self.entries[best];
        KnnPrediction {
            path: path.clone(),
            score: sims[best].1,
            neighbor: Some(*product_id),
            fallback: false,
        }
    }
}

/// Raw-count tf times idf for the known tokens of a title.
fn weigh(tokens: &[String], token_ids: &HashMap<String, usize>, idf: &[f64]) -> SparseVec {
    let mut counts: HashMap<usize, f64> = HashMap::new();
    for token in tokens {
        if let Some(&id) = token_ids.get(token) {
            *counts.entry(id).or_insert(0.0) += 1.0;
        }
    }
    let mut v: SparseVec = counts
        .into_iter()
        .map(|(id, tf)| (id, tf * idf[id]))
        .filter(|&(_, w)| w != 0.0)
        .collect();
    v.sort_unstable_by_key(|&(id, _)| id);
    v
}
