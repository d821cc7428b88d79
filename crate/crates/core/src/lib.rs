//! Translate product titles into taxonomy paths.
//!
//! Instead of treating product categorization as flat classification over
//! thousands of leaf labels, this crate frames it as sequence-to-sequence
//! translation: the source sentence is a tokenized product title, the target
//! sentence is the root-to-leaf node sequence of a taxonomy path. Two
//! attentional encoder-decoder architectures (an LSTM with global dot-product
//! attention and a Transformer) are trained from scratch on an f64
//! reverse-mode autodiff core, decoded greedily, with beam search, or as a
//! probability-averaging ensemble, and compared against a tf-idf nearest
//! neighbor baseline under support-weighted precision/recall/F1 with
//! bootstrap confidence intervals, stratified cross-validation, and a
//! training-set size sweep. Because the decoder emits node sequences freely,
//! it can also propose paths that were never seen in training; the taxonomy
//! module classifies those proposals and grafts the acceptable ones onto the
//! category tree, turning it into a DAG.

pub mod corpus;
pub mod decode;
pub mod eval;
pub mod experiment;
pub mod knn;
pub mod models;
pub mod taxonomy;
pub mod tensor;

pub use corpus::{
    encode_product, stratified_split, tokenize_title, CategoryPath, CorpusError, DatasetSplit,
    EncodedProduct, Product, SyntheticConfig, Vocabulary, BOS, EOS, PAD, UNK,
};
pub use decode::{
    beam_decode, ensemble_decode, greedy_decode, DecodeError, DecodedPath, EnsembleScorer,
    NextTokenScorer,
};
pub use eval::{
    bootstrap_ci, crossval_run, datasize_sweep, exact_match, stratified_kfold, weighted_prf,
    BootstrapReport, ClassMetrics, CrossValReport, EvalError, FoldPartition, MetricInterval,
    MetricsReport, SweepReport,
};
pub use experiment::{
    prepare, system_names, ExperimentConfig, ExperimentError, PredictionRow, PreparedData,
    TrainedSystem,
};
pub use knn::{KnnError, KnnIndex, KnnPrediction};
pub use models::{
    train, Architecture, EpochStats, Model, ModelConfig, ModelError, ModelScorer,
    StepDistributions, TrainConfig, TrainHistory,
};
pub use taxonomy::{
    path_shape_report, ClassifiedPath, PathShapeReport, PathVerdict, TaxonomyError,
    TaxonomyGraph, VerdictKind,
};
pub use tensor::{Tape, Tensor, TensorError};
