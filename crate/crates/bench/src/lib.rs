//! Shared fixtures for the criterion benchmarks: a small synthetic catalog
//! and desk-scale models with deterministic weights.

use taxpath_core::corpus::{encode_product, Product, SyntheticConfig, Vocabulary};
use taxpath_core::models::{Architecture, Model, ModelConfig};

pub struct Fixture {
    pub products: Vec<Product>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub sources: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

/// A 200-product catalog encoded against its own vocabulary.
pub fn fixture() -> Fixture {
    let cfg = SyntheticConfig {
        num_classes: 20,
        depth_min: 2,
        depth_max: 4,
        skew_exponent: 0.8,
        num_products: 200,
        title_noise: 0.2,
        seed: 17,
    };
    let products = taxpath_core::corpus::generate_synthetic_catalog(&cfg).unwrap();
    let src_vocab =
        Vocabulary::build(products.iter().map(|p| p.title_tokens.iter()), 10_000).unwrap();
    let tgt_vocab =
        Vocabulary::build(products.iter().map(|p| p.gold_path.nodes().iter()), 4_000).unwrap();
    let mut sources = Vec::new();
    let mut targets = Vec::new();
    for p in &products {
        let enc = encode_product(p, &src_vocab, &tgt_vocab).unwrap();
        sources.push(enc.source);
        targets.push(enc.target);
    }
    Fixture {
        products,
        src_vocab,
        tgt_vocab,
        sources,
        targets,
    }
}

/// Desk-scale model with freshly initialized (untrained) weights; kernel
/// cost does not depend on whether the weights converged.
pub fn desk_model(architecture: Architecture, fx: &Fixture) -> Model {
    let cfg = ModelConfig::desk_scale(architecture, fx.src_vocab.len(), fx.tgt_vocab.len(), 33);
    Model::build(cfg).unwrap()
}
