//! Adapter that lets the decoders drive a trained model.
//!
//! The source sequence is encoded exactly once; each prefix query then
//! replays only the decoder in inference mode against the cached encoder
//! output. Paths stay cheap because category sequences are a handful of
//! tokens deep.

use super::{rnn, transformer, Architecture, Model, ModelError};
use crate::corpus::BOS;
use crate::decode::{DecodeError, NextTokenScorer};

enum EncCache {
    Rnn(rnn::EncodedSource),
    Transformer(transformer::EncodedSource),
}

/// Per-source scorer over a borrowed model. Build with [`Model::scorer`].
pub struct ModelScorer<'m> {
    model: &'m Model,
    enc: EncCache,
}

impl<'m> ModelScorer<'m> {
    pub(crate) fn new(model: &'m Model, source: &[usize]) -> Result<Self, ModelError> {
        let enc = match model.config.architecture {
            Architecture::RnnAttention => {
                EncCache::Rnn(rnn::encode_source(&model.params, &model.config, source)?)
            }
            Architecture::Transformer => EncCache::Transformer(transformer::encode_source(
                &model.params,
                &model.config,
                source,
            )?),
        };
        Ok(ModelScorer { model, enc })
    }
}

impl NextTokenScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.tgt_vocab_size
    }

    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>, DecodeError> {
        let mut seq = Vec::with_capacity(prefix.len() + 1);
        seq.push(BOS);
        seq.extend_from_slice(prefix);
        let result = match &self.enc {
            EncCache::Rnn(enc) => {
                rnn::next_log_probs(&self.model.params, &self.model.config, enc, &seq)
            }
            EncCache::Transformer(enc) => {
                transformer::next_log_probs(&self.model.params, &self.model.config, enc, &seq)
            }
        };
        result.map_err(|e| DecodeError::Scorer(e.to_string()))
    }
}
