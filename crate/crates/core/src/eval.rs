//! Exact-match scoring, support-weighted precision/recall/F1, bootstrap
//! confidence intervals, stratified k-fold cross-validation, and the
//! training-set size sweep.
//!
//! A "class" is the full serialized root-to-leaf path: a prediction counts
//! only when every node matches in order. Per-class metrics are aggregated
//! with gold-support weights, sum over classes of (n_c / N) * metric_c.
//! Because precision weights follow gold counts while each class's
//! precision is normalized by its predicted count, the weighted F1 can land
//! outside the interval spanned by weighted precision and recall; the tests
//! pin a concrete confusion table where it does.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CategoryPath, Product};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions and golds differ in length: {predictions} vs {golds}")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("cannot evaluate an empty prediction list")]
    Empty,
    #[error("bootstrap needs at least one iteration")]
    NoIterations,
    #[error("stratified k-fold needs k >= 2, got {0}")]
    BadFoldCount(usize),
    #[error("cannot split {products} products into {k} folds")]
    TooFewProducts { products: usize, k: usize },
    #[error("fold {fold} has an empty test partition")]
    EmptyFold { fold: usize },
    #[error("fold {fold} failed: {message}")]
    FoldFailed { fold: usize, message: String },
    #[error("sweep system {system:?} on split {split} failed: {message}")]
    SweepFailed {
        system: String,
        split: String,
        message: String,
    },
    #[error("split percentages {0}-{1}-{2} do not sum to 100")]
    BadSplitTriple(usize, usize, usize),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
}

/// True iff the node sequences match exactly in content and order. A
/// correct leaf under a wrong intermediate node is still wrong.
pub fn exact_match(predicted: &CategoryPath, gold: &CategoryPath) -> bool {
    predicted.nodes() == gold.nodes()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// Gold occurrences of this class (n_c).
    pub support: usize,
    pub true_positives: usize,
    /// Times this class was predicted (|ŷ_c|).
    pub predicted_count: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub total: usize,
    pub exact_matches: usize,
}

impl MetricsReport {
    pub fn exact_match_accuracy(&self) -> f64 {
        self.exact_matches as f64 / self.total as f64
    }
}

/// Aligned (prediction, gold) class labels mapped onto dense ids, so
/// resampling can recount with integer arrays instead of string maps.
struct ClassTable {
    labels: Vec<String>,
    pred_ids: Vec<usize>,
    gold_ids: Vec<usize>,
}

impl ClassTable {
    fn build(predictions: &[String], golds: &[String]) -> Result<ClassTable, EvalError> {
        if predictions.len() != golds.len() {
            return Err(EvalError::LengthMismatch {
                predictions: predictions.len(),
                golds: golds.len(),
            });
        }
        if golds.is_empty() {
            return Err(EvalError::Empty);
        }
        let mut ids: HashMap<String, usize> = HashMap::new();
        let mut labels = Vec::new();
        let mut get_id = |s: &String| -> usize {
            if let Some(&id) = ids.get(s) {
                return id;
            }
            let id = labels.len();
            labels.push(s.clone());
            ids.insert(s.clone(), id);
            id
        };
        let gold_ids: Vec<usize> = golds.iter().map(&mut get_id).collect();
        let pred_ids: Vec<usize> = predictions.iter().map(&mut get_id).collect();
        Ok(ClassTable {
            labels,
            pred_ids,
            gold_ids,
        })
    }

    fn class_count(&self) -> usize {
        self.labels.len()
    }

    fn len(&self) -> usize {
        self.gold_ids.len()
    }
}

/// Weighted (precision, recall, f1) from dense per-class counts.
fn weighted_from_counts(
    tp: &[usize],
    predicted: &[usize],
    support: &[usize],
    total: usize,
) -> (f64, f64, f64) {
    let n = total as f64;
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    for c in 0..tp.len() {
        if support[c] == 0 {
            continue;
        }
        let weight = support[c] as f64 / n;
        let p = if predicted[c] == 0 {
            0.0
        } else {
            tp[c] as f64 / predicted[c] as f64
        };
        let r = tp[c] as f64 / support[c] as f64;
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        wp += weight * p;
        wr += weight * r;
        wf += weight * f;
    }
    (wp, wr, wf)
}

fn count_classes(
    table: &ClassTable,
    index_of: impl Fn(usize) -> usize,
    n: usize,
) -> (Vec<usize>, Vec<usize>, Vec<usize>, usize) {
    let classes = table.class_count();
    let mut tp = vec![0usize; classes];
    let mut predicted = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    let mut exact = 0usize;
    for i in 0..n {
        let at = index_of(i);
        let (p, g) = (table.pred_ids[at], table.gold_ids[at]);
        predicted[p] += 1;
        support[g] += 1;
        if p == g {
            tp[g] += 1;
            exact += 1;
        }
    }
    (tp, predicted, support, exact)
}

/// Support-weighted precision/recall/F1 over aligned class labels (the
/// serialized full paths).
pub fn weighted_prf(predictions: &[String], golds: &[String]) -> Result<MetricsReport, EvalError> {
    let table = ClassTable::build(predictions, golds)?;
    let n = table.len();
    let (tp, predicted, support, exact) = count_classes(&table, |i| i, n);
    let (wp, wr, wf) = weighted_from_counts(&tp, &predicted, &support, n);
    let mut per_class = BTreeMap::new();
    for (c, label) in table.labels.iter().enumerate() {
        let p = if predicted[c] == 0 {
            0.0
        } else {
            tp[c] as f64 / predicted[c] as f64
        };
        let r = if support[c] == 0 {
            0.0
        } else {
            tp[c] as f64 / support[c] as f64
        };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        per_class.insert(
            label.clone(),
            ClassMetrics {
                support: support[c],
                true_positives: tp[c],
                predicted_count: predicted[c],
                precision: p,
                recall: r,
                f1: f,
            },
        );
    }
    Ok(MetricsReport {
        per_class,
        weighted_precision: wp,
        weighted_recall: wr,
        weighted_f1: wf,
        total: n,
        exact_matches: exact,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricInterval {
    pub point: f64,
    pub p5: f64,
    pub p95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub iterations: usize,
    pub seed: u64,
    pub total: usize,
    pub precision: MetricInterval,
    pub recall: MetricInterval,
    pub f1: MetricInterval,
}

/// Nearest-rank percentile of an ascending-sorted slice: the value at
/// 1-based rank ceil(p/100 * n).
pub fn nearest_rank(sorted: &[f64], percentile: f64) -> f64 {
    let n = sorted.len();
    let rank = ((percentile / 100.0) * n as f64).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Resample the aligned pairs with replacement `iterations` times and
/// report nearest-rank p5/p95 for each weighted metric. Iteration `i`
/// draws from ChaCha8 stream `i` of `seed`, so any prefix of iterations is
/// reproducible independently of the others.
pub fn bootstrap_ci(
    predictions: &[String],
    golds: &[String],
    iterations: usize,
    seed: u64,
) -> Result<BootstrapReport, EvalError> {
    if iterations == 0 {
        return Err(EvalError::NoIterations);
    }
    let table = ClassTable::build(predictions, golds)?;
    let n = table.len();
    let (tp, predicted, support, _) = count_classes(&table, |i| i, n);
    let (point_p, point_r, point_f) = weighted_from_counts(&tp, &predicted, &support, n);

    let mut ps = Vec::with_capacity(iterations);
    let mut rs = Vec::with_capacity(iterations);
    let mut fs = Vec::with_capacity(iterations);
    for i in 0..iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let sample: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        let (tp, predicted, support, _) = count_classes(&table, |j| sample[j], n);
        let (p, r, f) = weighted_from_counts(&tp, &predicted, &support, n);
        ps.push(p);
        rs.push(r);
        fs.push(f);
    }
    ps.sort_by(f64::total_cmp);
    rs.sort_by(f64::total_cmp);
    fs.sort_by(f64::total_cmp);
    let interval = |sorted: &[f64], point: f64| MetricInterval {
        point,
        p5: nearest_rank(sorted, 5.0),
        p95: nearest_rank(sorted, 95.0),
    };
    Ok(BootstrapReport {
        iterations,
        seed,
        total: n,
        precision: interval(&ps, point_p),
        recall: interval(&rs, point_r),
        f1: interval(&fs, point_f),
    })
}

/// One fold of a stratified k-fold partition, as indices into the product
/// slice it was built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPartition {
    pub fold: usize,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Stratified k-fold: within every class (sorted for determinism), members
/// are shuffled by a per-class ChaCha8 stream of `seed` and dealt
/// round-robin, member j to fold j mod k. A class with fewer than k members
/// therefore reaches only its first few folds' test sets.
pub fn stratified_kfold(
    products: &[Product],
    k: usize,
    seed: u64,
) -> Result<Vec<FoldPartition>, EvalError> {
    if k < 2 {
        return Err(EvalError::BadFoldCount(k));
    }
    if products.len() < k {
        return Err(EvalError::TooFewProducts {
            products: products.len(),
            k,
        });
    }
    let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, p) in products.iter().enumerate() {
        by_class.entry(p.class()).or_default().push(i);
    }
    let mut test_sets: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (class_idx, members) in by_class.values_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class_idx as u64);
        members.shuffle(&mut rng);
        for (j, &idx) in members.iter().enumerate() {
            test_sets[j % k].push(idx);
        }
    }
    Ok((0..k)
        .map(|fold| {
            let mut test_indices = test_sets[fold].clone();
            test_indices.sort_unstable();
            let mut train_indices: Vec<usize> = (0..products.len())
                .filter(|i| !test_indices.contains(i))
                .collect();
            train_indices.sort_unstable();
            FoldPartition {
                fold,
                train_indices,
                test_indices,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub k: usize,
    pub folds: Vec<MetricsReport>,
    pub mean_precision: f64,
    pub var_precision: f64,
    pub mean_recall: f64,
    pub var_recall: f64,
    pub mean_f1: f64,
    pub var_f1: f64,
}

/// Mean and sample variance (k-1 divisor; 0 for a single value).
pub fn mean_and_sample_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Run a system over every stratified fold. `run_fold(fold, train, test)`
/// returns predicted class labels aligned with `test`; its error aborts the
/// whole run, tagged with the fold id.
pub fn crossval_run<F>(
    products: &[Product],
    k: usize,
    seed: u64,
    mut run_fold: F,
) -> Result<CrossValReport, EvalError>
where
    F: FnMut(usize, &[Product], &[Product]) -> Result<Vec<String>, String>,
{
    let partitions = stratified_kfold(products, k, seed)?;
    let mut folds = Vec::with_capacity(k);
    for part in &partitions {
        if part.test_indices.is_empty() {
            return Err(EvalError::EmptyFold { fold: part.fold });
        }
        let train: Vec<Product> = part.train_indices.iter().map(|&i| products[i].clone()).collect();
        let test: Vec<Product> = part.test_indices.iter().map(|&i| products[i].clone()).collect();
        let predictions = run_fold(part.fold, &train, &test).map_err(|message| {
            EvalError::FoldFailed {
                fold: part.fold,
                message,
            }
        })?;
        let golds: Vec<String> = test.iter().map(Product::class).collect();
        folds.push(weighted_prf(&predictions, &golds)?);
    }
    let collect = |f: fn(&MetricsReport) -> f64| -> Vec<f64> { folds.iter().map(f).collect() };
    let (mean_precision, var_precision) =
        mean_and_sample_variance(&collect(|m| m.weighted_precision));
    let (mean_recall, var_recall) = mean_and_sample_variance(&collect(|m| m.weighted_recall));
    let (mean_f1, var_f1) = mean_and_sample_variance(&collect(|m| m.weighted_f1));
    Ok(CrossValReport {
        k,
        folds,
        mean_precision,
        var_precision,
        mean_recall,
        var_recall,
        mean_f1,
        var_f1,
    })
}

/// Weighted-F table of systems (rows) by shrinking train splits (columns).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// Column headers like "80-10-10".
    pub split_labels: Vec<String>,
    pub systems: Vec<String>,
    /// `cells[s][c]` = weighted F1 of system s on split column c.
    pub cells: Vec<Vec<f64>>,
}

pub const SWEEP_SPLITS: [(usize, usize, usize); 4] =
    [(80, 10, 10), (60, 10, 30), (40, 10, 50), (20, 10, 70)];

pub fn split_label(triple: (usize, usize, usize)) -> String {
    format!("{}-{}-{}", triple.0, triple.1, triple.2)
}

/// One stratified split per percentage triple (shared by every system);
/// `run(system, split)` returns predicted class labels aligned with the
/// products indexed by `split.test`.
pub fn datasize_sweep<F>(
    products: &[Product],
    splits: &[(usize, usize, usize)],
    systems: &[String],
    seed: u64,
    mut run: F,
) -> Result<SweepReport, EvalError>
where
    F: FnMut(&str, &crate::corpus::DatasetSplit) -> Result<Vec<String>, String>,
{
    use crate::corpus::{stratified_split, SplitRatios};
    let mut prepared = Vec::with_capacity(splits.len());
    for &(tr, va, te) in splits {
        if tr + va + te != 100 {
            return Err(EvalError::BadSplitTriple(tr, va, te));
        }
        let ratios = SplitRatios::new(tr as f64 / 100.0, va as f64 / 100.0, te as f64 / 100.0)?;
        let split = stratified_split(products, ratios, seed, true)?;
        prepared.push((split_label((tr, va, te)), split));
    }
    let mut cells = Vec::with_capacity(systems.len());
    for system in systems {
        let mut row = Vec::with_capacity(prepared.len());
        for (label, split) in &prepared {
            let predictions = run(system, split).map_err(|message| EvalError::SweepFailed {
                system: system.clone(),
                split: label.clone(),
                message,
            })?;
            let golds: Vec<String> = split.test.iter().map(|&i| products[i].class()).collect();
            row.push(weighted_prf(&predictions, &golds)?.weighted_f1);
        }
        cells.push(row);
    }
    Ok(SweepReport {
        split_labels: prepared.into_iter().map(|(label, _)| label).collect(),
        systems: systems.to_vec(),
        cells,
    })
}
