//! Experiment orchestration: a single TOML-serializable configuration that
//! names the data source, split, models, decoding, and evaluation plan, plus
//! the machinery to run it end to end and persist every artifact.
//!
//! Every artifact (catalog, split, vocabulary, checkpoint, predictions,
//! metric reports) embeds the sha256 hash of the effective configuration and
//! the global seed, so downstream commands can refuse to mix artifacts from
//! different runs. Nothing written here contains timestamps or other
//! nondeterminism: rerunning a command with the same configuration produces
//! byte-identical files.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{
    encode_product, generate_synthetic_catalog, load_catalog_tsv, stratified_split, CategoryPath,
    CorpusError, DatasetSplit, EncodedProduct, Product, SplitRatios, SyntheticConfig, Vocabulary,
};
use crate::decode::{beam_decode, ensemble_decode, greedy_decode, DecodeError, NextTokenScorer};
use crate::eval::{
    crossval_run, datasize_sweep, stratified_kfold, weighted_prf, BootstrapReport, CrossValReport,
    EvalError, MetricsReport, SweepReport,
};
use crate::knn::{KnnError, KnnIndex};
use crate::models::{train, Architecture, Model, ModelConfig, ModelError, TrainConfig, TrainHistory};
use crate::taxonomy::{path_shape_report, ClassifiedPath, PathShapeReport, TaxonomyGraph};
use crate::tensor::{load_checkpoint, save_checkpoint, CheckpointMeta, TensorError};
use crate::UNK;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("bad experiment config: {0}")]
    BadConfig(String),
    #[error("unknown system {0:?}")]
    UnknownSystem(String),
    #[error("config parse failed: {0}")]
    Toml(String),
    #[error("json encode/decode failed: {0}")]
    Json(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(
        "{path} was produced by config {found} but the current config hashes to {expected}; \
         rerun the producing command or pass the stale-artifact override"
    )]
    HashMismatch {
        path: String,
        expected: String,
        found: String,
    },
    #[error("bad artifact {path}: {reason}")]
    BadArtifact { path: String, reason: String },
    #[error("no prediction for product {0}")]
    MissingPrediction(usize),
    #[error("two predictions for product {0}")]
    DuplicatePrediction(usize),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Knn(#[from] KnnError),
}

/// Where the catalog comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    /// Tab-separated `title<TAB>path` file.
    Tsv { path: PathBuf },
    Synthetic {
        #[serde(flatten)]
        config: SyntheticConfig,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitSpec {
    pub fn ratios(&self) -> Result<SplitRatios, CorpusError> {
        SplitRatios::new(self.train, self.validation, self.test)
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

/// One model to train: `ModelConfig` minus the data-dependent vocabulary
/// sizes and seed, plus the architecture-specific learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub embed_dim: usize,
    pub rnn_hidden: usize,
    pub ffn_hidden: usize,
    pub layers: usize,
    pub attention_heads: usize,
    pub dropout: f64,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub learning_rate: f64,
}

impl ModelSpec {
    pub fn desk_scale(architecture: Architecture) -> ModelSpec {
        let m = ModelConfig::desk_scale(architecture, 4, 4, 0);
        let t = TrainConfig::desk_scale(architecture, 0);
        ModelSpec {
            architecture,
            embed_dim: m.embed_dim,
            rnn_hidden: m.rnn_hidden,
            ffn_hidden: m.ffn_hidden,
            layers: m.layers,
            attention_heads: m.attention_heads,
            dropout: m.dropout,
            max_source_len: m.max_source_len,
            max_target_len: m.max_target_len,
            learning_rate: t.learning_rate,
        }
    }

    pub fn to_model_config(
        &self,
        src_vocab_size: usize,
        tgt_vocab_size: usize,
        seed: u64,
    ) -> ModelConfig {
        ModelConfig {
            architecture: self.architecture,
            embed_dim: self.embed_dim,
            rnn_hidden: self.rnn_hidden,
            ffn_hidden: self.ffn_hidden,
            layers: self.layers,
            attention_heads: self.attention_heads,
            dropout: self.dropout,
            max_source_len: self.max_source_len,
            max_target_len: self.max_target_len,
            src_vocab_size,
            tgt_vocab_size,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    Beam,
}

impl fmt::Display for DecodeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeStrategy::Greedy => "greedy",
            DecodeStrategy::Beam => "beam",
        })
    }
}

impl FromStr for DecodeStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(DecodeStrategy::Greedy),
            "beam" => Ok(DecodeStrategy::Beam),
            other => Err(format!("unknown decode strategy {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeSpec {
    pub strategy: DecodeStrategy,
    pub beam_size: usize,
    /// Model system names whose next-token probabilities are averaged by the
    /// ensemble system; empty disables the ensemble.
    pub ensemble: Vec<String>,
}

impl Default for DecodeSpec {
    fn default() -> Self {
        DecodeSpec {
            strategy: DecodeStrategy::Beam,
            beam_size: 4,
            ensemble: vec!["rnn_attention".to_string(), "transformer".to_string()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPlan {
    pub bootstrap_iterations: usize,
    pub crossval_folds: usize,
    /// Train-validation-test percentage triples for the data-size sweep.
    pub sweep_splits: Vec<[usize; 3]>,
}

impl Default for EvalPlan {
    fn default() -> Self {
        EvalPlan {
            bootstrap_iterations: 1000,
            crossval_folds: 4,
            sweep_splits: crate::eval::SWEEP_SPLITS
                .iter()
                .map(|&(a, b, c)| [a, b, c])
                .collect(),
        }
    }
}

/// Training hyperparameters shared by every model (per-model learning rates
/// live on `ModelSpec`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub warmup_steps: usize,
    pub clip_norm: Option<f64>,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            batch_size: 32,
            max_epochs: 30,
            patience: 3,
            warmup_steps: 400,
            clip_norm: Some(5.0),
        }
    }
}

impl TrainSpec {
    pub fn to_train_config(&self, learning_rate: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate,
            max_epochs: self.max_epochs,
            patience: self.patience,
            warmup_steps: self.warmup_steps,
            teacher_forcing: true,
            clip_norm: self.clip_norm,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub max_source_vocab: usize,
    pub max_target_vocab: usize,
    pub data: DataConfig,
    pub split: SplitSpec,
    pub models: Vec<ModelSpec>,
    pub train: TrainSpec,
    pub decode: DecodeSpec,
    pub evaluation: EvalPlan,
    /// Artifact directory; deliberately excluded from the config hash so the
    /// same experiment can be staged anywhere.
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Desk-scale default: synthetic catalog, both architectures, beam-4
    /// decoding, full evaluation plan.
    pub fn desk_default(out_dir: impl Into<PathBuf>) -> ExperimentConfig {
        ExperimentConfig {
            seed: 0,
            max_source_vocab: 10_000,
            max_target_vocab: 4_000,
            data: DataConfig::Synthetic {
                config: SyntheticConfig::default(),
            },
            split: SplitSpec::default(),
            models: vec![
                ModelSpec::desk_scale(Architecture::RnnAttention),
                ModelSpec::desk_scale(Architecture::Transformer),
            ],
            train: TrainSpec::default(),
            decode: DecodeSpec::default(),
            evaluation: EvalPlan::default(),
            out_dir: out_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: String| Err(ExperimentError::BadConfig(msg));
        if self.models.is_empty() {
            return bad("at least one model is required".into());
        }
        if self.max_source_vocab < 4 || self.max_target_vocab < 4 {
            return bad("vocabulary caps must fit the four special tokens".into());
        }
        self.split.ratios().map_err(|e| ExperimentError::BadConfig(e.to_string()))?;
        if self.decode.beam_size == 0 {
            return bad("beam_size must be at least 1".into());
        }
        if self.evaluation.bootstrap_iterations == 0 {
            return bad("bootstrap_iterations must be at least 1".into());
        }
        if self.evaluation.crossval_folds < 2 {
            return bad("crossval_folds must be at least 2".into());
        }
        for s in &self.evaluation.sweep_splits {
            if s[0] + s[1] + s[2] != 100 || s.contains(&0) {
                return bad(format!("sweep split {s:?} is not a positive 100% triple"));
            }
        }
        let names = system_names(self);
        for member in &self.decode.ensemble {
            let is_model = names
                .iter()
                .take(self.models.len())
                .any(|n| n == member);
            if !is_model {
                return bad(format!("ensemble member {member:?} names no model system"));
            }
        }
        Ok(())
    }

    /// sha256 over the canonical JSON encoding with `out_dir` blanked, so
    /// relocating artifacts never changes identity.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config is always encodable");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }

    pub fn to_toml(&self) -> Result<String, ExperimentError> {
        toml::to_string_pretty(self).map_err(|e| ExperimentError::Toml(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<ExperimentConfig, ExperimentError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ExperimentError::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_toml(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        ExperimentConfig::from_toml(&text)
    }
}

/// Stable sub-seed for one purpose of a run, so the global seed alone pins
/// every random stream without the purposes colliding.
pub fn subseed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Seed tags; one per independently seeded stage.
pub mod seeds {
    /// Model `i` initializes with tag `MODEL_BASE + i`.
    pub const MODEL_BASE: u64 = 1;
    /// Model `i` shuffles batches with tag `TRAIN_BASE + i`.
    pub const TRAIN_BASE: u64 = 101;
    pub const BOOTSTRAP: u64 = 201;
    pub const CROSSVAL: u64 = 301;
    pub const SWEEP: u64 = 401;
    /// Inner validation carve for folds that lack an explicit one.
    pub const INNER_VAL: u64 = 501;
}

/// Resolved identity of a named system.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SystemKind {
    Model(usize),
    Ensemble,
    Knn,
}

/// Model systems are named by architecture, with `_2`, `_3`, ... suffixes
/// when an architecture repeats; then `ensemble` (if configured) and `knn`.
pub fn system_names(cfg: &ExperimentConfig) -> Vec<String> {
    let mut names = Vec::with_capacity(cfg.models.len() + 2);
    let mut seen: HashMap<String, usize> = HashMap::new();
    for spec in &cfg.models {
        let base = spec.architecture.to_string();
        let n = seen.entry(base.clone()).or_insert(0);
        *n += 1;
        names.push(if *n == 1 {
            base
        } else {
            format!("{base}_{n}")
        });
    }
    if cfg.decode.ensemble.len() >= 2 {
        names.push("ensemble".to_string());
    }
    names.push("knn".to_string());
    names
}

pub fn resolve_system(cfg: &ExperimentConfig, name: &str) -> Result<SystemKind, ExperimentError> {
    let names = system_names(cfg);
    if let Some(idx) = names.iter().take(cfg.models.len()).position(|n| n == name) {
        return Ok(SystemKind::Model(idx));
    }
    match name {
        "ensemble" if cfg.decode.ensemble.len() >= 2 => Ok(SystemKind::Ensemble),
        "knn" => Ok(SystemKind::Knn),
        _ => Err(ExperimentError::UnknownSystem(name.to_string())),
    }
}

/// Catalog, split, vocabularies, and encoded training data for one run.
pub struct PreparedData {
    pub products: Vec<Product>,
    pub split: DatasetSplit,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub train_encoded: Vec<EncodedProduct>,
    pub val_encoded: Vec<EncodedProduct>,
    /// Products dropped from train/validation because a gold node label fell
    /// outside the target vocabulary.
    pub skipped_unk_targets: usize,
    /// Products dropped because their gold path exceeds every model's
    /// decoder length budget.
    pub skipped_deep_targets: usize,
}

impl PreparedData {
    pub fn train_products(&self) -> Vec<Product> {
        self.split.train.iter().map(|&i| self.products[i].clone()).collect()
    }

    pub fn validation_products(&self) -> Vec<Product> {
        self.split
            .validation
            .iter()
            .map(|&i| self.products[i].clone())
            .collect()
    }

    pub fn test_products(&self) -> Vec<Product> {
        self.split.test.iter().map(|&i| self.products[i].clone()).collect()
    }
}

pub fn load_products(data: &DataConfig) -> Result<Vec<Product>, ExperimentError> {
    match data {
        DataConfig::Tsv { path } => Ok(load_catalog_tsv(path, true)?.products),
        DataConfig::Synthetic { config } => Ok(generate_synthetic_catalog(config)?),
    }
}

/// Load or generate the catalog, split it, build vocabularies from the
/// training bucket only, and encode the train/validation buckets.
pub fn prepare(cfg: &ExperimentConfig) -> Result<PreparedData, ExperimentError> {
    cfg.validate()?;
    let products = load_products(&cfg.data)?;
    let split = stratified_split(&products, cfg.split.ratios()?, cfg.seed, true)?;
    prepare_from_split(cfg, products, split)
}

/// The vocabulary/encoding stage of `prepare`, reusable for fold-local data.
pub fn prepare_from_split(
    cfg: &ExperimentConfig,
    products: Vec<Product>,
    split: DatasetSplit,
) -> Result<PreparedData, ExperimentError> {
    let src_vocab = Vocabulary::build(
        split.train.iter().map(|&i| products[i].title_tokens.iter()),
        cfg.max_source_vocab,
    )?;
    let tgt_vocab = Vocabulary::build(
        split.train.iter().map(|&i| products[i].gold_path.nodes().iter()),
        cfg.max_target_vocab,
    )?;
    let max_depth = cfg.models.iter().map(|m| m.max_target_len).min().unwrap_or(8);
    let max_source = cfg.models.iter().map(|m| m.max_source_len).min().unwrap_or(24);
    let mut skipped_unk = 0usize;
    let mut skipped_deep = 0usize;
    let mut encode_bucket = |indices: &[usize]| -> Result<Vec<EncodedProduct>, ExperimentError> {
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = &products[i];
            if p.gold_path.depth() > max_depth {
                skipped_deep += 1;
                continue;
            }
            let mut enc = encode_product(p, &src_vocab, &tgt_vocab)?;
            if enc.target_has_unk {
                skipped_unk += 1;
                continue;
            }
            enc.source.truncate(max_source);
            out.push(enc);
        }
        Ok(out)
    };
    let train_encoded = encode_bucket(&split.train)?;
    let val_encoded = encode_bucket(&split.validation)?;
    Ok(PreparedData {
        products,
        split,
        src_vocab,
        tgt_vocab,
        train_encoded,
        val_encoded,
        skipped_unk_targets: skipped_unk,
        skipped_deep_targets: skipped_deep,
    })
}

pub struct TrainedSystem {
    pub name: String,
    pub model: Model,
    pub history: TrainHistory,
}

/// Train every configured model. Models are independent, so they train on
/// separate threads; results are returned in configuration order and are
/// identical to a sequential run.
pub fn train_all(
    cfg: &ExperimentConfig,
    data: &PreparedData,
) -> Result<Vec<TrainedSystem>, ExperimentError> {
    let names = system_names(cfg);
    let jobs: Vec<(usize, String)> = cfg
        .models
        .iter()
        .enumerate()
        .map(|(i, _)| (i, names[i].clone()))
        .collect();
    let results: Vec<Result<TrainedSystem, ModelError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .into_iter()
            .map(|(i, name)| {
                scope.spawn(move || {
                    let spec = &cfg.models[i];
                    let mcfg = spec.to_model_config(
                        data.src_vocab.len(),
                        data.tgt_vocab.len(),
                        subseed(cfg.seed, seeds::MODEL_BASE + i as u64),
                    );
                    let tcfg = cfg.train.to_train_config(
                        spec.learning_rate,
                        subseed(cfg.seed, seeds::TRAIN_BASE + i as u64),
                    );
                    let mut model = Model::build(mcfg)?;
                    let history = train(&mut model, &tcfg, &data.train_encoded, &data.val_encoded)?;
                    Ok(TrainedSystem {
                        name,
                        model,
                        history,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    });
    results
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(ExperimentError::from)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub product_id: usize,
    pub predicted: String,
    /// Length-normalized log-probability for the translation systems,
    /// cosine similarity for the nearest-neighbor baseline.
    pub score: f64,
}

fn encode_source(product: &Product, src_vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = product
        .title_tokens
        .iter()
        .map(|t| src_vocab.id_or_unk(t))
        .collect();
    ids.truncate(max_len);
    ids
}

fn tokens_to_path(tokens: &[usize], tgt_vocab: &Vocabulary) -> String {
    let labels: Vec<&str> = tokens
        .iter()
        .map(|&id| if id == UNK { "<unk>" } else { tgt_vocab.token(id).unwrap_or("<unk>") })
        .collect();
    labels.join(" > ")
}

pub fn predict_with_model(
    model: &Model,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    products: &[Product],
    decode: &DecodeSpec,
) -> Result<Vec<PredictionRow>, ExperimentError> {
    let mut rows = Vec::with_capacity(products.len());
    for p in products {
        let source = encode_source(p, src_vocab, model.config.max_source_len);
        let mut scorer = model.scorer(&source)?;
        let best = match decode.strategy {
            DecodeStrategy::Greedy => greedy_decode(&mut scorer, model.config.max_target_len)?,
            DecodeStrategy::Beam => {
                let mut beams =
                    beam_decode(&mut scorer, decode.beam_size, model.config.max_target_len)?;
                beams.remove(0)
            }
        };
        rows.push(PredictionRow {
            product_id: p.id,
            predicted: tokens_to_path(&best.tokens, tgt_vocab),
            score: best.score,
        });
    }
    Ok(rows)
}

/// Probability-averaging ensemble over any number of trained models (all
/// sharing the target vocabulary).
pub fn predict_with_ensemble(
    members: &[&Model],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    products: &[Product],
    decode: &DecodeSpec,
) -> Result<Vec<PredictionRow>, ExperimentError> {
    if members.is_empty() {
        return Err(ExperimentError::BadConfig("empty ensemble".into()));
    }
    let beam_size = match decode.strategy {
        DecodeStrategy::Greedy => 1,
        DecodeStrategy::Beam => decode.beam_size,
    };
    let max_len = members.iter().map(|m| m.config.max_target_len).min().unwrap();
    let mut rows = Vec::with_capacity(products.len());
    for p in products {
        let mut parts: Vec<Box<dyn NextTokenScorer + '_>> = Vec::with_capacity(members.len());
        for m in members {
            let source = encode_source(p, src_vocab, m.config.max_source_len);
            parts.push(Box::new(m.scorer(&source)?));
        }
        let mut beams = ensemble_decode(parts, beam_size, max_len)?;
        let best = beams.remove(0);
        rows.push(PredictionRow {
            product_id: p.id,
            predicted: tokens_to_path(&best.tokens, tgt_vocab),
            score: best.score,
        });
    }
    Ok(rows)
}

pub fn predict_with_knn(
    train: &[Product],
    test: &[Product],
) -> Result<Vec<PredictionRow>, ExperimentError> {
    let index = KnnIndex::build(train)?;
    Ok(test
        .iter()
        .map(|p| {
            let pred = index.predict(&p.title_tokens);
            PredictionRow {
                product_id: p.id,
                predicted: pred.path.serialize(),
                score: pred.score,
            }
        })
        .collect())
}

/// Pair each gold product with its prediction by product id.
pub fn aligned_label_pairs(
    rows: &[PredictionRow],
    golds: &[Product],
) -> Result<(Vec<String>, Vec<String>), ExperimentError> {
    let mut by_id: HashMap<usize, &PredictionRow> = HashMap::with_capacity(rows.len());
    for row in rows {
        if by_id.insert(row.product_id, row).is_some() {
            return Err(ExperimentError::DuplicatePrediction(row.product_id));
        }
    }
    let mut preds = Vec::with_capacity(golds.len());
    let mut gold_labels = Vec::with_capacity(golds.len());
    for p in golds {
        let row = by_id
            .get(&p.id)
            .ok_or(ExperimentError::MissingPrediction(p.id))?;
        preds.push(row.predicted.clone());
        gold_labels.push(p.class());
    }
    Ok((preds, gold_labels))
}

pub fn evaluate_predictions(
    rows: &[PredictionRow],
    golds: &[Product],
) -> Result<MetricsReport, ExperimentError> {
    let (preds, gold_labels) = aligned_label_pairs(rows, golds)?;
    Ok(weighted_prf(&preds, &gold_labels)?)
}

pub fn bootstrap_predictions(
    rows: &[PredictionRow],
    golds: &[Product],
    iterations: usize,
    seed: u64,
) -> Result<BootstrapReport, ExperimentError> {
    let (preds, gold_labels) = aligned_label_pairs(rows, golds)?;
    Ok(crate::eval::bootstrap_ci(&preds, &gold_labels, iterations, seed)?)
}

/// Train (if needed) and run one named system on an explicit
/// train/validation/test partition.
pub fn system_predictions_with_val(
    cfg: &ExperimentConfig,
    system: &str,
    train_products: &[Product],
    val_products: &[Product],
    test_products: &[Product],
    seed: u64,
) -> Result<Vec<PredictionRow>, ExperimentError> {
    let kind = resolve_system(cfg, system)?;
    if kind == SystemKind::Knn {
        return predict_with_knn(train_products, test_products);
    }
    let n = train_products.len() + val_products.len() + test_products.len();
    let mut products = Vec::with_capacity(n);
    products.extend_from_slice(train_products);
    products.extend_from_slice(val_products);
    products.extend_from_slice(test_products);
    let split = DatasetSplit {
        train: (0..train_products.len()).collect(),
        validation: (train_products.len()..train_products.len() + val_products.len()).collect(),
        test: (train_products.len() + val_products.len()..n).collect(),
    };
    let data = prepare_from_split(cfg, products, split)?;
    let names = system_names(cfg);
    let train_one = |idx: usize| -> Result<Model, ExperimentError> {
        let spec = &cfg.models[idx];
        let mcfg = spec.to_model_config(
            data.src_vocab.len(),
            data.tgt_vocab.len(),
            subseed(seed, seeds::MODEL_BASE + idx as u64),
        );
        let tcfg = cfg
            .train
            .to_train_config(spec.learning_rate, subseed(seed, seeds::TRAIN_BASE + idx as u64));
        let mut model = Model::build(mcfg)?;
        train(&mut model, &tcfg, &data.train_encoded, &data.val_encoded)?;
        Ok(model)
    };
    match kind {
        SystemKind::Knn => unreachable!("handled above"),
        SystemKind::Model(idx) => {
            let model = train_one(idx)?;
            predict_with_model(&model, &data.src_vocab, &data.tgt_vocab, test_products, &cfg.decode)
        }
        SystemKind::Ensemble => {
            let mut models = Vec::new();
            for member in &cfg.decode.ensemble {
                let midx = names
                    .iter()
                    .take(cfg.models.len())
                    .position(|n| n == member)
                    .ok_or_else(|| ExperimentError::UnknownSystem(member.clone()))?;
                models.push(train_one(midx)?);
            }
            let refs: Vec<&Model> = models.iter().collect();
            predict_with_ensemble(&refs, &data.src_vocab, &data.tgt_vocab, test_products, &cfg.decode)
        }
    }
}

/// As `system_predictions_with_val`, but carving a stratified ~10%
/// validation slice out of `train_products` (translation systems need one
/// for early stopping).
pub fn system_predictions(
    cfg: &ExperimentConfig,
    system: &str,
    train_products: &[Product],
    test_products: &[Product],
    seed: u64,
) -> Result<Vec<PredictionRow>, ExperimentError> {
    if resolve_system(cfg, system)? == SystemKind::Knn {
        return predict_with_knn(train_products, test_products);
    }
    let carve = stratified_kfold(train_products, 10, subseed(seed, seeds::INNER_VAL))?;
    let inner_train: Vec<Product> = carve[0]
        .train_indices
        .iter()
        .map(|&i| train_products[i].clone())
        .collect();
    let inner_val: Vec<Product> = carve[0]
        .test_indices
        .iter()
        .map(|&i| train_products[i].clone())
        .collect();
    system_predictions_with_val(cfg, system, &inner_train, &inner_val, test_products, seed)
}

/// Stratified k-fold cross-validation of one system.
pub fn crossval_system(
    cfg: &ExperimentConfig,
    products: &[Product],
    system: &str,
) -> Result<CrossValReport, ExperimentError> {
    resolve_system(cfg, system)?;
    let seed = subseed(cfg.seed, seeds::CROSSVAL);
    Ok(crossval_run(
        products,
        cfg.evaluation.crossval_folds,
        seed,
        |fold, train, test| {
            system_predictions(cfg, system, train, test, subseed(seed, fold as u64 + 1))
                .map(|rows| rows.into_iter().map(|r| r.predicted).collect())
                .map_err(|e| e.to_string())
        },
    )?)
}

/// Weighted-F of each system across the shrinking-train splits.
pub fn sweep_systems(
    cfg: &ExperimentConfig,
    products: &[Product],
    systems: &[String],
) -> Result<SweepReport, ExperimentError> {
    for s in systems {
        resolve_system(cfg, s)?;
    }
    let triples: Vec<(usize, usize, usize)> = cfg
        .evaluation
        .sweep_splits
        .iter()
        .map(|s| (s[0], s[1], s[2]))
        .collect();
    let seed = subseed(cfg.seed, seeds::SWEEP);
    Ok(datasize_sweep(products, &triples, systems, seed, |system, split| {
        let train: Vec<Product> = split.train.iter().map(|&i| products[i].clone()).collect();
        let val: Vec<Product> =
            split.validation.iter().map(|&i| products[i].clone()).collect();
        let test: Vec<Product> = split.test.iter().map(|&i| products[i].clone()).collect();
        system_predictions_with_val(cfg, system, &train, &val, &test, seed)
            .map(|rows| rows.into_iter().map(|r| r.predicted).collect())
            .map_err(|e| e.to_string())
    })?)
}

/// Verdicts, graph mutation, and shape fractions for a prediction set,
/// against the taxonomy implied by the full catalog's gold paths.
pub struct PathAnalysis {
    pub classified: Vec<ClassifiedPath>,
    pub shape: PathShapeReport,
    pub merged: TaxonomyGraph,
    /// Rows whose predicted string does not parse as a path (for example an
    /// empty translation); they carry no verdict.
    pub unparseable: usize,
}

pub fn analyze_predicted_paths(products: &[Product], rows: &[PredictionRow]) -> PathAnalysis {
    let gold = TaxonomyGraph::from_paths(products.iter().map(|p| &p.gold_path));
    let mut paths = Vec::with_capacity(rows.len());
    let mut unparseable = 0usize;
    for row in rows {
        match CategoryPath::parse(&row.predicted) {
            Ok(path) => paths.push(path),
            Err(_) => unparseable += 1,
        }
    }
    let (classified, merged) = gold.classify_and_apply(paths.iter());
    let shape = path_shape_report(&classified, &gold);
    PathAnalysis {
        classified,
        shape,
        merged,
        unparseable,
    }
}

// ---------------------------------------------------------------------------
// Artifact IO.

/// Wrapper stamped onto every JSON artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    pub payload: T,
}

pub fn write_stamped_json<T: Serialize>(
    path: &Path,
    stamped: &Stamped<T>,
) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(stamped)
        .map_err(|e| ExperimentError::Json(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_stamped_json<T: DeserializeOwned>(path: &Path) -> Result<Stamped<T>, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Json(e.to_string()))
}

/// Enforce the stale-artifact rule: an artifact may only feed a command run
/// under the same config hash, unless the caller explicitly overrides.
pub fn check_hash(
    found: &str,
    expected: &str,
    path: &Path,
    allow_stale: bool,
) -> Result<(), ExperimentError> {
    if found == expected || allow_stale {
        Ok(())
    } else {
        Err(ExperimentError::HashMismatch {
            path: path.display().to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        })
    }
}

/// `key: value` metadata lines for text artifacts.
pub fn meta_lines(config_hash: &str, seed: u64, system: Option<&str>) -> Vec<String> {
    let mut meta = vec![
        format!("config_hash: {config_hash}"),
        format!("seed: {seed}"),
    ];
    if let Some(system) = system {
        meta.push(format!("system: {system}"));
    }
    meta
}

pub fn meta_value<'a>(meta: &'a [String], key: &str) -> Option<&'a str> {
    meta.iter().find_map(|line| {
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(": "))
    })
}

/// `product_id<TAB>predicted_path<TAB>score`, preceded by `# ` metadata.
pub fn write_predictions_tsv(
    path: &Path,
    rows: &[PredictionRow],
    meta: &[String],
) -> Result<(), ExperimentError> {
    let mut out = String::new();
    for m in meta {
        out.push_str("# ");
        out.push_str(m);
        out.push('\n');
    }
    out.push_str("# columns: product_id\tpredicted_path\tscore\n");
    for row in rows {
        out.push_str(&format!("{}\t{}\t{}\n", row.product_id, row.predicted, row.score));
    }
    std::fs::write(path, out).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_predictions_tsv(
    path: &Path,
) -> Result<(Vec<PredictionRow>, Vec<String>), ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let bad = |reason: String| ExperimentError::BadArtifact {
        path: path.display().to_string(),
        reason,
    };
    let mut rows = Vec::new();
    let mut meta = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if let Some(m) = line.strip_prefix("# ") {
            meta.push(m.to_string());
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(bad(format!("line {}: expected 3 fields", lineno + 1)));
        }
        let product_id = fields[0]
            .parse::<usize>()
            .map_err(|e| bad(format!("line {}: bad product id: {e}", lineno + 1)))?;
        let score = fields[2]
            .parse::<f64>()
            .map_err(|e| bad(format!("line {}: bad score: {e}", lineno + 1)))?;
        rows.push(PredictionRow {
            product_id,
            predicted: fields[1].to_string(),
            score,
        });
    }
    Ok((rows, meta))
}

/// Save a trained model; the checkpoint records the experiment hash, the
/// seed, and the full model configuration needed to rebuild it.
pub fn save_model(
    path: &Path,
    system: &str,
    model: &Model,
    config_hash: &str,
    seed: u64,
) -> Result<(), ExperimentError> {
    let mut extra = std::collections::BTreeMap::new();
    extra.insert("system".to_string(), system.to_string());
    extra.insert(
        "model_config".to_string(),
        serde_json::to_string(&model.config).map_err(|e| ExperimentError::Json(e.to_string()))?,
    );
    let meta = CheckpointMeta {
        config_hash: config_hash.to_string(),
        seed,
        extra,
    };
    save_checkpoint(path, &model.params, &meta)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(Model, CheckpointMeta), ExperimentError> {
    let (params, meta) = load_checkpoint(path)?;
    let config_json = meta.extra.get("model_config").ok_or_else(|| {
        ExperimentError::BadArtifact {
            path: path.display().to_string(),
            reason: "checkpoint lacks a model_config entry".to_string(),
        }
    })?;
    let config: ModelConfig =
        serde_json::from_str(config_json).map_err(|e| ExperimentError::Json(e.to_string()))?;
    let model = Model::from_params(config, params)?;
    Ok((model, meta))
}

// ---------------------------------------------------------------------------
// Plain-text rendering.

/// Fixed-width metrics table, one row per system, with bootstrap intervals
/// when available.
pub fn render_metrics_table(
    entries: &[(String, MetricsReport, Option<BootstrapReport>)],
) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>5} {:>8} {:>8} {:>8} {:>8}  {:<17} {:<17} {:<17}\n",
        "system", "N", "wP", "wR", "wF", "acc", "wP [p5,p95]", "wR [p5,p95]", "wF [p5,p95]"
    ));
    for (name, m, boot) in entries {
        let ci = |i: Option<&crate::eval::MetricInterval>| match i {
            Some(iv) => format!("[{:.4}, {:.4}]", iv.p5, iv.p95),
            None => "-".to_string(),
        };
        out.push_str(&format!(
            "{:<16} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4}  {:<17} {:<17} {:<17}\n",
            name,
            m.total,
            m.weighted_precision,
            m.weighted_recall,
            m.weighted_f1,
            m.exact_match_accuracy(),
            ci(boot.as_ref().map(|b| &b.precision)),
            ci(boot.as_ref().map(|b| &b.recall)),
            ci(boot.as_ref().map(|b| &b.f1)),
        ));
    }
    out
}

/// Sweep table as TSV: header row of split labels, one row per system.
pub fn render_sweep_tsv(report: &SweepReport, meta: &[String]) -> String {
    let mut out = String::new();
    for m in meta {
        out.push_str("# ");
        out.push_str(m);
        out.push('\n');
    }
    out.push_str("system");
    for label in &report.split_labels {
        out.push('\t');
        out.push_str(label);
    }
    out.push('\n');
    for (s, system) in report.systems.iter().enumerate() {
        out.push_str(system);
        for c in 0..report.split_labels.len() {
            out.push_str(&format!("\t{:.4}", report.cells[s][c]));
        }
        out.push('\n');
    }
    out
}
