//! The two translation architectures and their training loop.
//!
//! Both models map a tokenized title to a distribution over the next
//! category-path token: an LSTM encoder-decoder with global dot-product
//! attention, and a Transformer with sinusoidal positions, post-layer-norm
//! residual blocks, and multi-head attention. They share parameter
//! initialization (uniform(-0.08, 0.08), except layer-norm gains at 1 and
//! biases at 0), the [`crate::tensor`] autodiff core, teacher-forced
//! cross-entropy training with PAD excluded, and validation-based early
//! stopping.

mod rnn;
mod scorer;
mod train;
mod transformer;

pub use scorer::ModelScorer;
pub use train::{train, EpochStats, TrainConfig, TrainHistory};

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ParamStore, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("{what} length {len} exceeds configured maximum {max}")]
    SequenceTooLong {
        what: &'static str,
        len: usize,
        max: usize,
    },
    #[error("{what} token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange {
        what: &'static str,
        id: usize,
        vocab: usize,
    },
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    RnnAttention,
    Transformer,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::RnnAttention => write!(f, "rnn_attention"),
            Architecture::Transformer => write!(f, "transformer"),
        }
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rnn_attention" | "rnn" => Ok(Architecture::RnnAttention),
            "transformer" => Ok(Architecture::Transformer),
            other => Err(format!(
                "unknown architecture {other:?} (expected rnn_attention or transformer)"
            )),
        }
    }
}

/// Every architectural hyperparameter. `rnn_hidden` applies to the RNN only;
/// `ffn_hidden` and `attention_heads` to the Transformer only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub embed_dim: usize,
    pub rnn_hidden: usize,
    pub ffn_hidden: usize,
    pub layers: usize,
    pub attention_heads: usize,
    pub dropout: f64,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Small configuration that trains in seconds on a laptop-scale corpus.
    pub fn desk_scale(
        architecture: Architecture,
        src_vocab_size: usize,
        tgt_vocab_size: usize,
        seed: u64,
    ) -> Self {
        ModelConfig {
            architecture,
            embed_dim: 64,
            rnn_hidden: 128,
            ffn_hidden: 256,
            layers: match architecture {
                Architecture::RnnAttention => 1,
                Architecture::Transformer => 2,
            },
            attention_heads: 4,
            dropout: 0.2,
            max_source_len: 24,
            max_target_len: 8,
            src_vocab_size,
            tgt_vocab_size,
            seed,
        }
    }

    /// Production-scale configuration; used for formula checks, not for
    /// instantiation in tests.
    pub fn paper_scale(
        architecture: Architecture,
        src_vocab_size: usize,
        tgt_vocab_size: usize,
        seed: u64,
    ) -> Self {
        ModelConfig {
            architecture,
            embed_dim: 512,
            rnn_hidden: 1024,
            ffn_hidden: 2048,
            layers: match architecture {
                Architecture::RnnAttention => 1,
                Architecture::Transformer => 6,
            },
            attention_heads: 8,
            dropout: 0.2,
            max_source_len: 64,
            max_target_len: 8,
            src_vocab_size,
            tgt_vocab_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::BadConfig(msg));
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        if self.src_vocab_size < 5 || self.tgt_vocab_size < 5 {
            return bad("vocabularies need the 4 special tokens plus content".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_source_len == 0 || self.max_target_len == 0 {
            return bad("sequence length limits must be positive".into());
        }
        match self.architecture {
            Architecture::RnnAttention => {
                if self.rnn_hidden == 0 {
                    return bad("rnn_hidden must be positive".into());
                }
                if self.layers != 1 {
                    return bad(format!(
                        "rnn_attention supports exactly 1 layer, got {}",
                        self.layers
                    ));
                }
            }
            Architecture::Transformer => {
                if self.ffn_hidden == 0 {
                    return bad("ffn_hidden must be positive".into());
                }
                if self.layers == 0 {
                    return bad("transformer needs at least 1 layer".into());
                }
                if self.attention_heads == 0 {
                    return bad("attention_heads must be positive".into());
                }
                if self.embed_dim % self.attention_heads != 0 {
                    return bad(format!(
                        "embed_dim {} not divisible by attention_heads {}",
                        self.embed_dim, self.attention_heads
                    ));
                }
            }
        }
        Ok(())
    }

    /// Closed-form scalar parameter count for this configuration.
    pub fn expected_param_count(&self) -> usize {
        let e = self.embed_dim;
        let embeddings = (self.src_vocab_size + self.tgt_vocab_size) * e;
        let output = e * self.tgt_vocab_size + self.tgt_vocab_size;
        match self.architecture {
            Architecture::RnnAttention => {
                let h = self.rnn_hidden;
                let enc_lstm = (e + h) * 4 * h + 4 * h;
                // Input feeding widens the decoder input by the attentional
                // state, so its LSTM reads e + 2h columns.
                let dec_lstm = (e + 2 * h) * 4 * h + 4 * h;
                // Bidirectional-encoder bridges: per-step state projection
                // plus the decoder's initial h and c, each 2h -> h.
                let bridges = 3 * (2 * h * h);
                let attn_proj = 2 * h * h + h;
                // The output projection reads the h-dim attentional state.
                let output = h * self.tgt_vocab_size + self.tgt_vocab_size;
                embeddings + 2 * enc_lstm + dec_lstm + bridges + attn_proj + output
            }
            Architecture::Transformer => {
                let f = self.ffn_hidden;
                let attn_block = 4 * (e * e + e);
                let ln = 2 * e;
                let ffn = e * f + f + f * e + e;
                let enc_layer = attn_block + ffn + 2 * ln;
                let dec_layer = 2 * attn_block + ffn + 3 * ln;
                embeddings + self.layers * (enc_layer + dec_layer) + output
            }
        }
    }
}

/// A configuration plus its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Initialize all parameters from uniform(-0.08, 0.08) with
    /// `config.seed`; layer-norm gains start at 1 and biases at 0.
    pub fn build(config: ModelConfig) -> Result<Model, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut uniform = |params: &mut ParamStore, name: &str, rows: usize, cols: usize| {
            params
                .add_init(name, rows, cols, || rng.gen_range(-0.08..0.08))
                .expect("parameter names are unique by construction");
        };
        let e = config.embed_dim;
        uniform(&mut params, "src_emb", config.src_vocab_size, e);
        uniform(&mut params, "tgt_emb", config.tgt_vocab_size, e);
        match config.architecture {
            Architecture::RnnAttention => {
                let h = config.rnn_hidden;
                uniform(&mut params, "enc.w", e + h, 4 * h);
                uniform(&mut params, "enc.b", 1, 4 * h);
                uniform(&mut params, "enc_rev.w", e + h, 4 * h);
                uniform(&mut params, "enc_rev.b", 1, 4 * h);
                uniform(&mut params, "enc_proj.w", 2 * h, h);
                uniform(&mut params, "init_h.w", 2 * h, h);
                uniform(&mut params, "init_c.w", 2 * h, h);
                // Input feeding widens the decoder input to [embedding; attn_h].
                uniform(&mut params, "dec.w", e + 2 * h, 4 * h);
                uniform(&mut params, "dec.b", 1, 4 * h);
                uniform(&mut params, "attn.w", 2 * h, h);
                uniform(&mut params, "attn.b", 1, h);
                uniform(&mut params, "out.w", h, config.tgt_vocab_size);
                uniform(&mut params, "out.b", 1, config.tgt_vocab_size);
            }
            Architecture::Transformer => {
                let f = config.ffn_hidden;
                let layer_norm = |params: &mut ParamStore, name: String| {
                    params.add(&format!("{name}.g"), 1, e, vec![1.0; e]).unwrap();
                    params.add(&format!("{name}.b"), 1, e, vec![0.0; e]).unwrap();
                };
                for l in 0..config.layers {
                    for part in ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"] {
                        let rows = if part.starts_with('w') { e } else { 1 };
                        uniform(&mut params, &format!("enc{l}.sa.{part}"), rows, e);
                    }
                    layer_norm(&mut params, format!("enc{l}.ln1"));
                    uniform(&mut params, &format!("enc{l}.ffn.w1"), e, f);
                    uniform(&mut params, &format!("enc{l}.ffn.b1"), 1, f);
                    uniform(&mut params, &format!("enc{l}.ffn.w2"), f, e);
                    uniform(&mut params, &format!("enc{l}.ffn.b2"), 1, e);
                    layer_norm(&mut params, format!("enc{l}.ln2"));
                }
                for l in 0..config.layers {
                    for block in ["sa", "ca"] {
                        for part in ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"] {
                            let rows = if part.starts_with('w') { e } else { 1 };
                            uniform(&mut params, &format!("dec{l}.{block}.{part}"), rows, e);
                        }
                    }
                    layer_norm(&mut params, format!("dec{l}.ln1"));
                    layer_norm(&mut params, format!("dec{l}.ln2"));
                    uniform(&mut params, &format!("dec{l}.ffn.w1"), e, f);
                    uniform(&mut params, &format!("dec{l}.ffn.b1"), 1, f);
                    uniform(&mut params, &format!("dec{l}.ffn.w2"), f, e);
                    uniform(&mut params, &format!("dec{l}.ffn.b2"), 1, e);
                    layer_norm(&mut params, format!("dec{l}.ln3"));
                }
                uniform(&mut params, "out.w", e, config.tgt_vocab_size);
                uniform(&mut params, "out.b", 1, config.tgt_vocab_size);
            }
        }
        Ok(Model { config, params })
    }

    /// Model with externally supplied parameters (e.g., from a checkpoint).
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Model, ModelError> {
        config.validate()?;
        let expected = config.expected_param_count();
        if params.param_count() != expected {
            return Err(ModelError::BadConfig(format!(
                "checkpoint holds {} parameters but the config implies {}",
                params.param_count(),
                expected
            )));
        }
        Ok(Model { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Teacher-forced single-example forward in inference mode, exposing the
    /// per-step log-distributions and (for the RNN) attention weights over
    /// the source.
    pub fn forward_example(
        &self,
        source_ids: &[usize],
        target_in: &[usize],
    ) -> Result<StepDistributions, ModelError> {
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &self.params);
        let (logits, attention) = match self.config.architecture {
            Architecture::RnnAttention => {
                rnn::forward_example(&ctx, &self.config, source_ids, target_in)?
            }
            Architecture::Transformer => {
                transformer::forward_example(&ctx, &self.config, source_ids, target_in)?
            }
        };
        let lp = logits.log_softmax()?;
        let flat = lp.values();
        let v = self.config.tgt_vocab_size;
        let log_probs = (0..target_in.len())
            .map(|t| flat[t * v..(t + 1) * v].to_vec())
            .collect();
        Ok(StepDistributions {
            log_probs,
            attention,
        })
    }

    /// Mean token cross-entropy over a dataset in inference mode.
    pub fn dataset_loss(
        &self,
        data: &[crate::corpus::EncodedProduct],
        batch_size: usize,
    ) -> Result<f64, ModelError> {
        train::dataset_loss(self, data, batch_size)
    }

    /// Mean token cross-entropy over `data` as a single batch, together with
    /// the gradient of that loss for every parameter the forward pass
    /// touched. Runs in training mode: dropout uses the configured rate with
    /// `dropout_seed`, so calls are repeatable per seed and the seed is inert
    /// when the rate is zero. Intended for gradient inspection and numeric
    /// checking; the training loop has its own batching.
    pub fn loss_and_gradients(
        &self,
        data: &[crate::corpus::EncodedProduct],
        dropout_seed: u64,
    ) -> Result<(f64, HashMap<String, Vec<f64>>), ModelError> {
        if data.is_empty() {
            return Err(ModelError::EmptyDataset("gradient evaluation"));
        }
        let batches = train::make_batches(data, data.len(), None);
        let tape = Tape::new();
        let ctx = Ctx::training(&tape, &self.params, self.config.dropout, dropout_seed);
        let (logits, targets) = train::forward_batch(&ctx, &self.config, &batches[0])?;
        let loss = logits.cross_entropy(&targets, crate::corpus::PAD)?;
        let value = loss.item()?;
        loss.backward()?;
        Ok((value, ctx.grads()))
    }

    /// Per-source scorer for the decoders; encodes once, then scores
    /// arbitrary prefixes.
    pub fn scorer(&self, source_ids: &[usize]) -> Result<ModelScorer<'_>, ModelError> {
        ModelScorer::new(self, source_ids)
    }
}

/// Per-step introspection output of [`Model::forward_example`].
#[derive(Clone, Debug)]
pub struct StepDistributions {
    /// One log-distribution over the target vocabulary per decoder step.
    pub log_probs: Vec<Vec<f64>>,
    /// RNN only: one attention row over source positions per decoder step;
    /// empty for the Transformer.
    pub attention: Vec<Vec<f64>>,
}

/// Shared state for one forward pass: the tape, lazily leased parameters,
/// dropout switches, and a deterministic per-site seed counter.
pub(crate) struct Ctx<'a> {
    pub tape: &'a Tape,
    params: &'a ParamStore,
    leases: RefCell<BTreeMap<String, Tensor>>,
    trainable: bool,
    train_mode: bool,
    dropout_rate: f64,
    seed_counter: Cell<u64>,
}

impl<'a> Ctx<'a> {
    pub fn training(
        tape: &'a Tape,
        params: &'a ParamStore,
        dropout_rate: f64,
        seed_base: u64,
    ) -> Self {
        Ctx {
            tape,
            params,
            leases: RefCell::new(BTreeMap::new()),
            trainable: true,
            train_mode: true,
            dropout_rate,
            seed_counter: Cell::new(seed_base),
        }
    }

    pub fn inference(tape: &'a Tape, params: &'a ParamStore) -> Self {
        Ctx {
            tape,
            params,
            leases: RefCell::new(BTreeMap::new()),
            trainable: false,
            train_mode: false,
            dropout_rate: 0.0,
            seed_counter: Cell::new(0),
        }
    }

    /// Lease a parameter onto the tape (cached per name).
    pub fn p(&self, name: &str) -> Result<Tensor, ModelError> {
        if let Some(t) = self.leases.borrow().get(name) {
            return Ok(t.clone());
        }
        let t = if self.trainable {
            self.params.lease(self.tape, name)?
        } else {
            let data = self
                .params
                .get(name)
                .ok_or_else(|| TensorError::UnknownParam(name.to_owned()))?
                .to_vec();
            let (rows, cols) = self.params.shape(name).unwrap();
            self.tape.constant(data, rows, cols)?
        };
        self.leases.borrow_mut().insert(name.to_owned(), t.clone());
        Ok(t)
    }

    /// Apply dropout in training mode; identity otherwise. Each call site
    /// draws a fresh deterministic seed.
    pub fn dropout(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        if !self.train_mode || self.dropout_rate == 0.0 {
            return Ok(x.clone());
        }
        let seed = self.seed_counter.get();
        self.seed_counter.set(seed.wrapping_add(1));
        Ok(x.dropout(self.dropout_rate, seed)?)
    }

    /// Gradients of every leased parameter, keyed by name. Valid after
    /// backward on this context's tape.
    pub fn grads(&self) -> HashMap<String, Vec<f64>> {
        self.leases
            .borrow()
            .iter()
            .filter_map(|(name, t)| t.grad().map(|g| (name.clone(), g)))
            .collect()
    }
}

pub(crate) fn check_tokens(
    ids: &[usize],
    vocab: usize,
    what: &'static str,
) -> Result<(), ModelError> {
    if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
        return Err(ModelError::TokenOutOfRange { what, id, vocab });
    }
    Ok(())
}

pub(crate) fn check_len(
    len: usize,
    max: usize,
    what: &'static str,
) -> Result<(), ModelError> {
    if len > max {
        return Err(ModelError::SequenceTooLong { what, len, max });
    }
    if len == 0 {
        return Err(ModelError::BadConfig(format!("{what} is empty")));
    }
    Ok(())
}
