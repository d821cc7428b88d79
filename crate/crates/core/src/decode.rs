//! Greedy, beam, and ensemble decoding of category-path token sequences.
//!
//! Decoding is generic over [`NextTokenScorer`]: anything that can produce a
//! log-distribution over the target vocabulary for the next position given
//! the tokens emitted so far. The decoders never constrain the search to
//! known taxonomy paths — the whole point is that the model may emit node
//! sequences it never saw, which are classified downstream.
//!
//! Structural tokens are handled here once, for every scorer: BOS is implied
//! (the empty prefix), EOS terminates a hypothesis, and PAD/BOS are never
//! emitted regardless of the mass a scorer puts on them. UNK may be emitted
//! and is flagged on the result. Hypotheses are ranked by length-normalized
//! log-probability (sum divided by the number of scored steps, EOS included),
//! with ties broken toward the lexicographically smaller token sequence so
//! decoding is deterministic.

use thiserror::Error;

use crate::corpus::{BOS, EOS, PAD, UNK};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("beam size must be at least 1")]
    BadBeamSize,
    #[error("max_len must be at least 1")]
    BadMaxLen,
    #[error("ensemble needs at least one model")]
    EmptyEnsemble,
    #[error("ensemble target vocabularies differ: {0} vs {1}")]
    VocabMismatch(usize, usize),
    #[error("scorer returned {got} scores for vocabulary of {expected}")]
    ScorerShape { expected: usize, got: usize },
    #[error("scorer produced a non-finite log-probability for token {token}")]
    NonFinite { token: usize },
    #[error("scorer: {0}")]
    Scorer(String),
}

/// Scores the next target token given the emitted prefix (BOS excluded).
/// Implementations typically cache per-source encoder state at construction.
pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;

    /// Log-probabilities over the full target vocabulary for the position
    /// after `prefix`.
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>, DecodeError>;
}

/// One partial or finished decoding candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeHypothesis {
    /// Emitted tokens; ends with EOS when finished before the length cap.
    pub token_ids: Vec<usize>,
    /// Accumulated (unnormalized) log-probability.
    pub score: f64,
    pub finished: bool,
}

impl DecodeHypothesis {
    /// Scored steps taken so far (EOS counts; BOS does not).
    fn steps(&self) -> usize {
        self.token_ids.len()
    }

    fn normalized(&self) -> f64 {
        if self.token_ids.is_empty() {
            0.0
        } else {
            self.score / self.steps() as f64
        }
    }
}

/// A finished decode, ready for vocabulary lookup.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedPath {
    /// Path tokens with BOS/EOS stripped.
    pub tokens: Vec<usize>,
    /// Accumulated log-probability over all scored steps.
    pub log_prob: f64,
    /// Length-normalized log-probability; the ranking key.
    pub score: f64,
    /// True when the length cap was hit before EOS.
    pub truncated: bool,
    /// True when the path contains UNK.
    pub has_unk: bool,
}

impl DecodedPath {
    fn from_hypothesis(hyp: &DecodeHypothesis) -> Self {
        let mut tokens = hyp.token_ids.clone();
        let truncated = tokens.last() != Some(&EOS);
        if !truncated {
            tokens.pop();
        }
        DecodedPath {
            has_unk: tokens.contains(&UNK),
            tokens,
            log_prob: hyp.score,
            score: hyp.normalized(),
            truncated,
        }
    }
}

fn checked_log_probs(
    scorer: &mut dyn NextTokenScorer,
    prefix: &[usize],
) -> Result<Vec<f64>, DecodeError> {
    let lp = scorer.next_log_probs(prefix)?;
    if lp.len() != scorer.vocab_size() {
        return Err(DecodeError::ScorerShape {
            expected: scorer.vocab_size(),
            got: lp.len(),
        });
    }
    if let Some(token) = lp.iter().position(|x| !x.is_finite() && *x != f64::NEG_INFINITY) {
        return Err(DecodeError::NonFinite { token });
    }
    Ok(lp)
}

/// Highest-probability token at every step, lowest id on ties.
pub fn greedy_decode(
    scorer: &mut dyn NextTokenScorer,
    max_len: usize,
) -> Result<DecodedPath, DecodeError> {
    if max_len == 0 {
        return Err(DecodeError::BadMaxLen);
    }
    let mut hyp = DecodeHypothesis {
        token_ids: Vec::new(),
        score: 0.0,
        finished: false,
    };
    for _ in 0..max_len {
        let lp = checked_log_probs(scorer, &hyp.token_ids)?;
        let (best, best_lp) = lp
            .iter()
            .enumerate()
            .filter(|&(id, _)| id != PAD && id != BOS)
            // max_by favors later elements on ties; reversed iteration makes
            // the lowest id win.
            .rev()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("vocabulary has non-structural tokens");
        hyp.token_ids.push(best);
        hyp.score += best_lp;
        if best == EOS {
            hyp.finished = true;
            break;
        }
    }
    Ok(DecodedPath::from_hypothesis(&hyp))
}

/// Beam search under length-normalized log-probability. Finished hypotheses
/// stay in the pool and compete with active ones; the result is the ranked
/// list of the best `beam_size` finished (or length-capped) candidates,
/// scores descending.
pub fn beam_decode(
    scorer: &mut dyn NextTokenScorer,
    beam_size: usize,
    max_len: usize,
) -> Result<Vec<DecodedPath>, DecodeError> {
    if beam_size == 0 {
        return Err(DecodeError::BadBeamSize);
    }
    if max_len == 0 {
        return Err(DecodeError::BadMaxLen);
    }
    let mut active = vec![DecodeHypothesis {
        token_ids: Vec::new(),
        score: 0.0,
        finished: false,
    }];
    let mut finished: Vec<DecodeHypothesis> = Vec::new();

    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        let mut candidates: Vec<DecodeHypothesis> = Vec::new();
        for hyp in &active {
            let lp = checked_log_probs(scorer, &hyp.token_ids)?;
            for (id, &token_lp) in lp.iter().enumerate() {
                if id == PAD || id == BOS || token_lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = hyp.token_ids.clone();
                tokens.push(id);
                candidates.push(DecodeHypothesis {
                    token_ids: tokens,
                    score: hyp.score + token_lp,
                    finished: id == EOS,
                });
            }
        }
        rank(&mut candidates);
        candidates.truncate(beam_size);
        active = Vec::new();
        for cand in candidates {
            if cand.finished {
                finished.push(cand);
            } else {
                active.push(cand);
            }
        }
        // Finished hypotheses compete with active ones: the pool only needs
        // the best beam_size of them.
        rank(&mut finished);
        finished.truncate(beam_size);
    }
    // Hypotheses still active at the cap are truncated results.
    finished.extend(active);
    rank(&mut finished);
    finished.truncate(beam_size);
    Ok(finished.iter().map(DecodedPath::from_hypothesis).collect())
}

/// Ranking used everywhere: normalized score descending, then the
/// lexicographically smaller token sequence.
fn rank(hyps: &mut [DecodeHypothesis]) {
    hyps.sort_by(|a, b| {
        b.normalized()
            .total_cmp(&a.normalized())
            .then_with(|| a.token_ids.cmp(&b.token_ids))
    });
}

/// Arithmetic mean of member probability distributions (post-softmax), taken
/// fresh at every step.
pub struct EnsembleScorer<'a> {
    parts: Vec<Box<dyn NextTokenScorer + 'a>>,
    vocab: usize,
}

impl<'a> EnsembleScorer<'a> {
    pub fn new(parts: Vec<Box<dyn NextTokenScorer + 'a>>) -> Result<Self, DecodeError> {
        let vocab = match parts.first() {
            Some(p) => p.vocab_size(),
            None => return Err(DecodeError::EmptyEnsemble),
        };
        for p in &parts {
            if p.vocab_size() != vocab {
                return Err(DecodeError::VocabMismatch(vocab, p.vocab_size()));
            }
        }
        Ok(EnsembleScorer { parts, vocab })
    }
}

impl NextTokenScorer for EnsembleScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>, DecodeError> {
        let mut mean = vec![0.0; self.vocab];
        let k = self.parts.len() as f64;
        for part in &mut self.parts {
            let lp = checked_log_probs(part.as_mut(), prefix)?;
            for (m, &l) in mean.iter_mut().zip(&lp) {
                *m += l.exp() / k;
            }
        }
        Ok(mean.iter().map(|&p| p.ln()).collect())
    }
}

/// Beam decoding over the probability-averaged ensemble of `parts`.
pub fn ensemble_decode<'a>(
    parts: Vec<Box<dyn NextTokenScorer + 'a>>,
    beam_size: usize,
    max_len: usize,
) -> Result<Vec<DecodedPath>, DecodeError> {
    let mut ensemble = EnsembleScorer::new(parts)?;
    beam_decode(&mut ensemble, beam_size, max_len)
}
