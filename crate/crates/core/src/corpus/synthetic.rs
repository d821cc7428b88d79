//! Synthetic long-tail product catalogs.
//!
//! The generator builds a random taxonomy tree, assigns leaf classes a
//! power-law share of the catalog, and writes titles out of per-class keyword
//! pools so that titles are predictive of their class. A configurable share
//! of decoy keywords borrowed from other classes plus generic noise words
//! keeps the task from being trivially separable. Everything is drawn from a
//! single seeded ChaCha stream, so the same config and seed reproduce the
//! catalog byte for byte.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::split::largest_remainder;
use super::{CategoryPath, CorpusError, Product};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Number of leaf classes (distinct gold paths).
    pub num_classes: usize,
    /// Inclusive range of path depths, measured in nodes.
    pub depth_min: usize,
    pub depth_max: usize,
    /// Power-law exponent for class sizes: class k gets weight (k+1)^-skew.
    /// Zero yields a near-uniform catalog.
    pub skew_exponent: f64,
    /// Total products; every class receives at least one.
    pub num_products: usize,
    /// Probability that a title carries decoy keywords from another class.
    pub title_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 60,
            depth_min: 2,
            depth_max: 4,
            skew_exponent: 0.8,
            num_products: 2000,
            title_noise: 0.25,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<(), CorpusError> {
        let bad = |msg: &str| Err(CorpusError::BadSyntheticConfig(msg.to_owned()));
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if self.depth_min == 0 || self.depth_max < self.depth_min {
            return bad("need 1 <= depth_min <= depth_max");
        }
        if self.num_products < self.num_classes {
            return bad("num_products must be at least num_classes");
        }
        if !(0.0..1.0).contains(&self.title_noise) {
            return bad("title_noise must lie in [0, 1)");
        }
        if !self.skew_exponent.is_finite() || self.skew_exponent < 0.0 {
            return bad("skew_exponent must be finite and non-negative");
        }
        Ok(())
    }
}

const SYLLABLES: &[&str] = &[
    "ba", "ce", "di", "fo", "gu", "ha", "ki", "lo", "mu", "na", "po", "qu", "ra", "so", "tu",
    "ve", "wa", "xe", "yo", "zu", "bra", "cor", "del", "fin", "gor", "lan", "mer", "nol", "pra",
    "sil", "tor", "vun",
];

const UNIT_WORDS: &[&str] = &["oz", "ml", "pack", "ct", "lb", "mm"];

/// Mints pseudo-words that are unique across the whole catalog, so keyword
/// overlap between classes happens only where the generator intends it.
struct WordFactory {
    used: HashSet<String>,
}

impl WordFactory {
    fn new() -> Self {
        WordFactory {
            used: HashSet::new(),
        }
    }

    fn word(&mut self, rng: &mut ChaCha8Rng) -> String {
        for _ in 0..64 {
            let n = rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..n {
                w.push_str(SYLLABLES[rng.gen_range(0..SYLLABLES.len())]);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
        // Syllable space exhausted; a numeric suffix cannot collide because
        // syllable words never contain digits.
        let w = format!("w{}", self.used.len());
        self.used.insert(w.clone());
        w
    }

    fn label(&mut self, rng: &mut ChaCha8Rng) -> String {
        let words = if rng.gen_bool(0.3) { 2 } else { 1 };
        (0..words)
            .map(|_| capitalize(&self.word(rng)))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn capitalize(w: &str) -> String {
    let mut chars = w.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

/// Draw `n` distinct elements of `pool` in seeded order.
fn sample_distinct(pool: &[String], n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let n = n.min(pool.len());
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    for i in 0..n {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    idx[..n].iter().map(|&i| pool[i].clone()).collect()
}

/// One class's title vocabulary: a few words of its own plus the pool it
/// shares with its lexical sibling.
struct ClassLexicon {
    private: Vec<String>,
    shared: Vec<String>,
    lean_first_half: bool,
}

impl ClassLexicon {
    /// Distinct draws from the shared pool, each weighted 3:1 toward this
    /// class's half.
    fn draw_shared(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
        let half = self.shared.len() / 2;
        let mut remaining: Vec<usize> = (0..self.shared.len()).collect();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n.min(self.shared.len()) {
            let weight =
                |i: usize| if (i < half) == self.lean_first_half { 3.0 } else { 1.0 };
            let total: f64 = remaining.iter().map(|&i| weight(i)).sum();
            let mut t = rng.gen_range(0.0..total);
            let mut pick = remaining.len() - 1;
            for (j, &i) in remaining.iter().enumerate() {
                if t < weight(i) {
                    pick = j;
                    break;
                }
                t -= weight(i);
            }
            out.push(self.shared[remaining.remove(pick)].clone());
        }
        out
    }

    /// The words that mark this class: its private words plus its leaned
    /// shared half. Decoy blocks borrow from here.
    fn identity_pool(&self) -> Vec<String> {
        let half = self.shared.len() / 2;
        let own = if self.lean_first_half {
            &self.shared[..half]
        } else {
            &self.shared[half..]
        };
        self.private.iter().chain(own).cloned().collect()
    }
}

/// Generate a synthetic catalog. Product ids are assigned sequentially in
/// class-major order; the per-class product counts follow one baseline item
/// plus a largest-remainder share of the remainder under the power-law
/// weights.
pub fn generate_synthetic_catalog(cfg: &SyntheticConfig) -> Result<Vec<Product>, CorpusError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut factory = WordFactory::new();

    // Taxonomy tree. Internal chains may be shared between classes under the
    // same root; leaves are always fresh, so gold paths stay distinct and
    // every node keeps a single parent.
    let num_roots = cfg.num_classes.min((cfg.num_classes.div_ceil(12)).clamp(2, 8));
    let roots: Vec<String> = (0..num_roots).map(|_| factory.label(&mut rng)).collect();
    let mut internal_children: HashMap<String, Vec<String>> = HashMap::new();
    let mut class_paths: Vec<CategoryPath> = Vec::with_capacity(cfg.num_classes);
    for _ in 0..cfg.num_classes {
        let depth = rng.gen_range(cfg.depth_min..=cfg.depth_max);
        if depth == 1 {
            class_paths.push(CategoryPath::new(vec![factory.label(&mut rng)]));
            continue;
        }
        let mut nodes = vec![roots[rng.gen_range(0..num_roots)].clone()];
        for _ in 0..depth - 2 {
            let cur = nodes.last().unwrap().clone();
            let kids = internal_children.entry(cur).or_default();
            if !kids.is_empty() && rng.gen_bool(0.55) {
                nodes.push(kids[rng.gen_range(0..kids.len())].clone());
            } else {
                let lab = factory.label(&mut rng);
                kids.push(lab.clone());
                nodes.push(lab);
            }
        }
        nodes.push(factory.label(&mut rng));
        class_paths.push(CategoryPath::new(nodes));
    }

    // Keyword pools. Consecutive classes form lexical sibling pairs that
    // share a twelve-word vocabulary; each member draws that pool with a 3:1
    // lean toward its own half and owns four private words that most, but
    // not all, of its titles include. Titles without a private word are
    // therefore decided by which sibling their word mix leans toward rather
    // than by any single keyword, the way near-neighbor categories overlap
    // in a real catalog. Root pools give classes under one root a family
    // resemblance and the noise pool is global.
    let noise_pool: Vec<String> = (0..40).map(|_| factory.word(&mut rng)).collect();
    let mut root_pools: HashMap<String, Vec<String>> = HashMap::new();
    for path in &class_paths {
        root_pools
            .entry(path.root().unwrap().to_owned())
            .or_insert_with(|| (0..6).map(|_| factory.word(&mut rng)).collect());
    }
    let mut lexicons: Vec<ClassLexicon> = Vec::with_capacity(cfg.num_classes);
    for pair in 0..cfg.num_classes.div_ceil(2) {
        let shared: Vec<String> = (0..12).map(|_| factory.word(&mut rng)).collect();
        for member in 0..2 {
            if 2 * pair + member >= cfg.num_classes {
                break;
            }
            lexicons.push(ClassLexicon {
                private: (0..4).map(|_| factory.word(&mut rng)).collect(),
                shared: shared.clone(),
                lean_first_half: member == 0,
            });
        }
    }

    // Power-law class sizes: one baseline product per class, remainder by
    // largest-remainder rounding of the normalized weights.
    let weights: Vec<f64> = (0..cfg.num_classes)
        .map(|k| ((k + 1) as f64).powf(-cfg.skew_exponent))
        .collect();
    let total_w: f64 = weights.iter().sum();
    let ratios: Vec<f64> = weights.iter().map(|w| w / total_w).collect();
    let extras = largest_remainder(cfg.num_products - cfg.num_classes, &ratios);

    let mut products = Vec::with_capacity(cfg.num_products);
    for (k, path) in class_paths.iter().enumerate() {
        let count = 1 + extras[k];
        let lexicon = &lexicons[k];
        let root_pool = &root_pools[path.root().unwrap()];
        for _ in 0..count {
            let mut words: Vec<String> = Vec::new();
            words.extend(lexicon.draw_shared(rng.gen_range(3..=4), &mut rng));
            if rng.gen_bool(0.6) {
                let n_priv = rng.gen_range(1..=2);
                words.extend(sample_distinct(&lexicon.private, n_priv, &mut rng));
            }
            for _ in 0..rng.gen_range(0..=2) {
                words.push(root_pool[rng.gen_range(0..root_pool.len())].clone());
            }
            for _ in 0..rng.gen_range(1..=2) {
                words.push(noise_pool[rng.gen_range(0..noise_pool.len())].clone());
            }
            if cfg.num_classes > 1 && rng.gen_bool(cfg.title_noise) {
                let other = (k + rng.gen_range(1..cfg.num_classes)) % cfg.num_classes;
                // Mostly light decoys; occasionally a genuinely ambiguous
                // title that borrows a large block from the other class.
                let n_decoy = if rng.gen_bool(0.35) {
                    rng.gen_range(3..=4)
                } else {
                    rng.gen_range(1..=2)
                };
                words.extend(sample_distinct(&lexicons[other].identity_pool(), n_decoy, &mut rng));
            }
            if rng.gen_bool(0.25) {
                words.push(rng.gen_range(1..=99u32).to_string());
                if rng.gen_bool(0.5) {
                    words.push(UNIT_WORDS[rng.gen_range(0..UNIT_WORDS.len())].to_owned());
                }
            }
            words.shuffle(&mut rng);
            let title = words
                .iter()
                .map(|w| {
                    if rng.gen_bool(0.2) {
                        capitalize(w)
                    } else {
                        w.clone()
                    }
                })
                .collect::<Vec<_>>()
                .join(" ");
            let id = products.len();
            products.push(Product::new(id, &title, path.clone())?);
        }
    }
    Ok(products)
}
