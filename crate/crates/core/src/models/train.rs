//! Teacher-forced training with Adam, gradient clipping, and early stopping.
//!
//! Each epoch shuffles the training set with a per-epoch ChaCha8 stream,
//! sorts by source length (stable), and cuts fixed-size batches padded with
//! PAD; PAD positions are excluded from the cross-entropy. Validation loss
//! decides early stopping, and the parameters that scored the best
//! validation loss are the ones left in the model when training returns.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{rnn, transformer, Architecture, Ctx, Model, ModelConfig, ModelError};
use crate::corpus::{EncodedProduct, PAD};
use crate::tensor::{adam_step, clip_grad_norm, AdamState, ParamStore, Tape, Tensor};

/// Optimization hyperparameters. `teacher_forcing` is configuration made
/// explicit: the loop only implements teacher forcing, and `validate`
/// rejects `false` rather than silently training differently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    /// Steps of linear warmup for the Transformer's inverse-sqrt schedule;
    /// ignored by the RNN, which uses a constant rate.
    pub warmup_steps: usize,
    pub teacher_forcing: bool,
    /// Global L2 gradient clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk_scale(architecture: Architecture, seed: u64) -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: match architecture {
                Architecture::RnnAttention => 1e-3,
                Architecture::Transformer => 5e-4,
            },
            max_epochs: 30,
            patience: 3,
            warmup_steps: 400,
            teacher_forcing: true,
            clip_norm: Some(5.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::BadConfig(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} not usable", self.learning_rate));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !self.teacher_forcing {
            return bad("only teacher-forced training is implemented".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("clip_norm {c} not usable"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Serialize, Deserialize)]
struct HistorySummary {
    best_epoch: usize,
    stopped_early: bool,
}

impl TrainHistory {
    /// One JSON object per epoch, then one summary object.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("plain struct"));
            out.push('\n');
        }
        let summary = HistorySummary {
            best_epoch: self.best_epoch,
            stopped_early: self.stopped_early,
        };
        out.push_str(&serde_json::to_string(&summary).expect("plain struct"));
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<TrainHistory, serde_json::Error> {
        let mut epochs = Vec::new();
        let mut best_epoch = 0;
        let mut stopped_early = false;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if let Ok(e) = serde_json::from_str::<EpochStats>(line) {
                epochs.push(e);
            } else {
                let s: HistorySummary = serde_json::from_str(line)?;
                best_epoch = s.best_epoch;
                stopped_early = s.stopped_early;
            }
        }
        Ok(TrainHistory {
            epochs,
            best_epoch,
            stopped_early,
        })
    }
}

/// A padded batch. Sources and targets are rectangular; real lengths ride
/// alongside so each architecture can mask or slice as it prefers.
pub(crate) struct Batch {
    pub sources: Vec<Vec<usize>>,
    pub source_lens: Vec<usize>,
    pub targets_in: Vec<Vec<usize>>,
    pub targets_out: Vec<Vec<usize>>,
    pub target_lens: Vec<usize>,
    /// Total non-PAD target positions; the weight of this batch in the
    /// epoch's mean loss.
    pub n_active: usize,
}

impl Batch {
    pub fn from_examples(examples: &[&EncodedProduct]) -> Batch {
        let s_max = examples.iter().map(|e| e.source.len()).max().unwrap();
        let t_max = examples.iter().map(|e| e.target.len() - 1).max().unwrap();
        let mut batch = Batch {
            sources: Vec::with_capacity(examples.len()),
            source_lens: Vec::with_capacity(examples.len()),
            targets_in: Vec::with_capacity(examples.len()),
            targets_out: Vec::with_capacity(examples.len()),
            target_lens: Vec::with_capacity(examples.len()),
            n_active: 0,
        };
        for ex in examples {
            let mut src = ex.source.clone();
            src.resize(s_max, PAD);
            batch.sources.push(src);
            batch.source_lens.push(ex.source.len());
            let steps = ex.target.len() - 1;
            let mut t_in = ex.target[..steps].to_vec();
            let mut t_out = ex.target[1..].to_vec();
            t_in.resize(t_max, PAD);
            t_out.resize(t_max, PAD);
            batch.targets_in.push(t_in);
            batch.targets_out.push(t_out);
            batch.target_lens.push(steps);
            batch.n_active += steps;
        }
        batch
    }

    /// Row `t * batch + b` holds step `t` of example `b` (RNN layout).
    pub fn flat_targets_step_major(&self) -> Vec<usize> {
        let steps = self.targets_out[0].len();
        let mut flat = Vec::with_capacity(steps * self.targets_out.len());
        for t in 0..steps {
            for row in &self.targets_out {
                flat.push(row[t]);
            }
        }
        flat
    }

    /// All real steps of example 0, then example 1, ... (Transformer layout).
    pub fn flat_targets_example_major(&self) -> Vec<usize> {
        let mut flat = Vec::with_capacity(self.n_active);
        for (row, &len) in self.targets_out.iter().zip(&self.target_lens) {
            flat.extend_from_slice(&row[..len]);
        }
        flat
    }
}

/// Cut `data` into batches: optional seeded shuffle, stable sort by source
/// length, then fixed-size chunks.
pub(crate) fn make_batches(
    data: &[EncodedProduct],
    batch_size: usize,
    shuffle: Option<(u64, u64)>,
) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    if let Some((seed, stream)) = shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        order.shuffle(&mut rng);
    }
    order.sort_by_key(|&i| data[i].source.len());
    order
        .chunks(batch_size)
        .map(|chunk| {
            let examples: Vec<&EncodedProduct> = chunk.iter().map(|&i| &data[i]).collect();
            Batch::from_examples(&examples)
        })
        .collect()
}

/// Architecture dispatch: logits plus the matching flattened targets.
pub(crate) fn forward_batch(
    ctx: &Ctx,
    cfg: &ModelConfig,
    batch: &Batch,
) -> Result<(Tensor, Vec<usize>), ModelError> {
    match cfg.architecture {
        Architecture::RnnAttention => {
            let logits =
                rnn::forward_batch(ctx, cfg, &batch.sources, &batch.source_lens, &batch.targets_in)?;
            Ok((logits, batch.flat_targets_step_major()))
        }
        Architecture::Transformer => {
            let logits = transformer::forward_batch(
                ctx,
                cfg,
                &batch.sources,
                &batch.source_lens,
                &batch.targets_in,
                &batch.target_lens,
            )?;
            Ok((logits, batch.flat_targets_example_major()))
        }
    }
}

/// Learning rate at a 1-based global step.
pub(crate) fn lr_at(cfg: &ModelConfig, tcfg: &TrainConfig, step: u64) -> f64 {
    match cfg.architecture {
        Architecture::RnnAttention => tcfg.learning_rate,
        Architecture::Transformer => {
            let s = step.max(1) as f64;
            let w = tcfg.warmup_steps.max(1) as f64;
            tcfg.learning_rate * (s / w).min((w / s).sqrt())
        }
    }
}

/// Validation-loss tracker. `observe` returns (improved, stop).
pub(crate) struct EarlyStopper {
    patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> (bool, bool) {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }
}

fn eval_loss(
    params: &ParamStore,
    cfg: &ModelConfig,
    batches: &[Batch],
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut active = 0usize;
    for batch in batches {
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, params);
        let (logits, targets) = forward_batch(&ctx, cfg, batch)?;
        let loss = logits.cross_entropy(&targets, PAD)?.item()?;
        total += loss * batch.n_active as f64;
        active += batch.n_active;
    }
    Ok(total / active as f64)
}

pub(crate) fn dataset_loss(
    model: &Model,
    data: &[EncodedProduct],
    batch_size: usize,
) -> Result<f64, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset("evaluation"));
    }
    let batches = make_batches(data, batch_size.max(1), None);
    eval_loss(&model.params, &model.config, &batches)
}

/// Train in place. On success the model holds the parameters of the best
/// validation epoch, not necessarily the last one.
pub fn train(
    model: &mut Model,
    tcfg: &TrainConfig,
    train_data: &[EncodedProduct],
    val_data: &[EncodedProduct],
) -> Result<TrainHistory, ModelError> {
    model.config.validate()?;
    tcfg.validate()?;
    if train_data.is_empty() {
        return Err(ModelError::EmptyDataset("training"));
    }
    if val_data.is_empty() {
        return Err(ModelError::EmptyDataset("validation"));
    }
    let val_batches = make_batches(val_data, tcfg.batch_size, None);
    let mut adam = AdamState::new(&model.params);
    let mut stopper = EarlyStopper::new(tcfg.patience);
    let mut best_params = model.params.clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let mut global_step: u64 = 0;

    for epoch in 1..=tcfg.max_epochs {
        let batches = make_batches(train_data, tcfg.batch_size, Some((tcfg.seed, epoch as u64)));
        let mut loss_sum = 0.0;
        let mut active = 0usize;
        for batch in &batches {
            global_step += 1;
            let tape = Tape::new();
            let dropout_seed = tcfg
                .seed
                .wrapping_add(global_step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let ctx = Ctx::training(&tape, &model.params, model.config.dropout, dropout_seed);
            let (logits, targets) = forward_batch(&ctx, &model.config, batch)?;
            let loss = logits.cross_entropy(&targets, PAD)?;
            let loss_val = loss.item()?;
            if !loss_val.is_finite() {
                return Err(ModelError::Diverged {
                    epoch,
                    loss: loss_val,
                });
            }
            loss.backward()?;
            let mut grads: HashMap<String, Vec<f64>> = ctx.grads();
            if let Some(max_norm) = tcfg.clip_norm {
                clip_grad_norm(&mut grads, max_norm);
            }
            adam_step(
                &mut model.params,
                &grads,
                &mut adam,
                lr_at(&model.config, tcfg, global_step),
            )?;
            loss_sum += loss_val * batch.n_active as f64;
            active += batch.n_active;
        }
        let train_loss = loss_sum / active as f64;
        let val_loss = eval_loss(&model.params, &model.config, &val_batches)?;
        if !val_loss.is_finite() {
            return Err(ModelError::Diverged {
                epoch,
                loss: val_loss,
            });
        }
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best_params = model.params.clone();
        }
        if stop {
            stopped_early = true;
            break;
        }
    }

    model.params = best_params;
    Ok(TrainHistory {
        epochs,
        best_epoch: stopper.best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BOS, EOS};

    fn ex(id: usize, source: Vec<usize>, inner: Vec<usize>) -> EncodedProduct {
        let mut target = vec![BOS];
        target.extend(inner);
        target.push(EOS);
        EncodedProduct {
            product_id: id,
            source,
            target,
            target_has_unk: false,
        }
    }

    fn rnn_cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            architecture: Architecture::RnnAttention,
            embed_dim: 3,
            rnn_hidden: 4,
            ffn_hidden: 0,
            layers: 1,
            attention_heads: 0,
            dropout: 0.0,
            max_source_len: 8,
            max_target_len: 6,
            src_vocab_size: 6,
            tgt_vocab_size: 6,
            seed,
        }
    }

    fn transformer_cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            architecture: Architecture::Transformer,
            embed_dim: 4,
            rnn_hidden: 0,
            ffn_hidden: 6,
            layers: 1,
            attention_heads: 2,
            dropout: 0.0,
            max_source_len: 8,
            max_target_len: 6,
            src_vocab_size: 6,
            tgt_vocab_size: 7,
            seed,
        }
    }

    fn train_cfg(arch: Architecture) -> TrainConfig {
        let mut t = TrainConfig::desk_scale(arch, 7);
        t.batch_size = 4;
        t.max_epochs = 3;
        t
    }

    #[test]
    fn batches_sort_by_source_length_and_pad() {
        let data = vec![
            ex(0, vec![4, 5, 4], vec![4]),
            ex(1, vec![5], vec![4, 5]),
            ex(2, vec![4, 4], vec![5]),
            ex(3, vec![5], vec![5, 5]),
        ];
        let batches = make_batches(&data, 2, None);
        assert_eq!(batches.len(), 2);
        // Stable sort keeps b before d among the length-1 sources.
        assert_eq!(batches[0].sources, vec![vec![5], vec![5]]);
        assert_eq!(batches[0].source_lens, vec![1, 1]);
        assert_eq!(batches[1].sources, vec![vec![4, 4, 0], vec![4, 5, 4]]);
        assert_eq!(batches[1].source_lens, vec![2, 3]);
        // Batch 0 targets: depth-2 paths -> 3 decode steps each.
        assert_eq!(batches[0].targets_in, vec![vec![BOS, 4, 5], vec![BOS, 5, 5]]);
        assert_eq!(batches[0].targets_out, vec![vec![4, 5, EOS], vec![5, 5, EOS]]);
        assert_eq!(batches[0].n_active, 6);
        // Batch 1 pads the depth-1 target pair to the longer one (2 steps).
        assert_eq!(batches[1].targets_in, vec![vec![BOS, 5], vec![BOS, 4]]);
        assert_eq!(batches[1].targets_out, vec![vec![5, EOS], vec![4, EOS]]);
        assert_eq!(batches[1].n_active, 4);
    }

    #[test]
    fn shuffled_batches_are_seed_deterministic_and_epoch_varying() {
        let data: Vec<EncodedProduct> = (0..10)
            .map(|i| {
                // Distinct trailing token so batches reveal their members.
                let mut src = vec![4; i % 3];
                src.push(i);
                ex(100 + i, src, vec![4])
            })
            .collect();
        let ids = |batches: &[Batch]| -> Vec<Vec<usize>> {
            batches.iter().map(|b| b.sources.iter().map(Vec::len).collect()).collect()
        };
        let a = make_batches(&data, 3, Some((9, 1)));
        let b = make_batches(&data, 3, Some((9, 1)));
        assert_eq!(ids(&a), ids(&b));
        // Same seed, different epoch stream: same lengths after sorting, but
        // membership differs for at least one batch.
        let c = make_batches(&data, 3, Some((9, 2)));
        let member = |batches: &[Batch]| -> Vec<Vec<String>> {
            batches
                .iter()
                .map(|b| b.sources.iter().map(|s| format!("{s:?}")).collect())
                .collect()
        };
        assert_ne!(member(&a), member(&c));
    }

    #[test]
    fn flat_target_layouts() {
        let data = vec![ex(0, vec![4], vec![4, 5]), ex(1, vec![5], vec![5])];
        let batch = Batch::from_examples(&[&data[0], &data[1]]);
        // Padded steps: a -> [4, 5, EOS], b -> [5, EOS, PAD].
        assert_eq!(
            batch.flat_targets_step_major(),
            vec![4, 5, 5, EOS, EOS, PAD]
        );
        assert_eq!(
            batch.flat_targets_example_major(),
            vec![4, 5, EOS, 5, EOS]
        );
    }

    #[test]
    fn early_stopper_rules() {
        // Strictly worsening validation with patience 1: stop after epoch 2.
        let mut s = EarlyStopper::new(1);
        assert_eq!(s.observe(1, 1.0), (true, false));
        assert_eq!(s.observe(2, 1.1), (false, true));
        assert_eq!(s.best_epoch, 1);

        // Improvement resets the counter.
        let mut s = EarlyStopper::new(2);
        assert_eq!(s.observe(1, 1.0), (true, false));
        assert_eq!(s.observe(2, 1.05), (false, false));
        assert_eq!(s.observe(3, 0.9), (true, false));
        assert_eq!(s.observe(4, 0.95), (false, false));
        assert_eq!(s.observe(5, 0.91), (false, true));
        assert_eq!(s.best_epoch, 3);

        // Ties do not count as improvement.
        let mut s = EarlyStopper::new(1);
        s.observe(1, 1.0);
        assert_eq!(s.observe(2, 1.0), (false, true));
    }

    #[test]
    fn learning_rate_schedules() {
        let tcfg = TrainConfig::desk_scale(Architecture::RnnAttention, 0);
        let cfg = rnn_cfg(0);
        assert_eq!(lr_at(&cfg, &tcfg, 1), 1e-3);
        assert_eq!(lr_at(&cfg, &tcfg, 10_000), 1e-3);

        let tcfg = TrainConfig::desk_scale(Architecture::Transformer, 0);
        let cfg = transformer_cfg(0);
        let peak = tcfg.learning_rate;
        let w = tcfg.warmup_steps as u64;
        assert!((lr_at(&cfg, &tcfg, w) - peak).abs() < 1e-15);
        assert!((lr_at(&cfg, &tcfg, w / 4) - 0.25 * peak).abs() < 1e-15);
        assert!((lr_at(&cfg, &tcfg, 4 * w) - 0.5 * peak).abs() < 1e-15);
        // Monotone rise before the peak, monotone decay after.
        assert!(lr_at(&cfg, &tcfg, 10) < lr_at(&cfg, &tcfg, 200));
        assert!(lr_at(&cfg, &tcfg, 4000) < lr_at(&cfg, &tcfg, 800));
    }

    fn fd_dataset() -> Vec<EncodedProduct> {
        vec![
            ex(0, vec![4, 5, 3], vec![4, 5]),
            ex(1, vec![4], vec![5]),
        ]
    }

    fn batch_loss_value(params: &ParamStore, cfg: &ModelConfig, batch: &Batch) -> f64 {
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, params);
        let (logits, targets) = forward_batch(&ctx, cfg, batch).unwrap();
        logits.cross_entropy(&targets, PAD).unwrap().item().unwrap()
    }

    // Finite-difference check of the whole forward + loss against every
    // parameter, including the padded/masked paths (the two sources have
    // different lengths).
    fn fd_whole_model(cfg: ModelConfig) {
        let model = Model::build(cfg.clone()).unwrap();
        let data = fd_dataset();
        let batch = Batch::from_examples(&[&data[0], &data[1]]);

        let tape = Tape::new();
        let ctx = Ctx::training(&tape, &model.params, 0.0, 0);
        let (logits, targets) = forward_batch(&ctx, &cfg, &batch).unwrap();
        let loss = logits.cross_entropy(&targets, PAD).unwrap();
        loss.backward().unwrap();
        let grads = ctx.grads();

        let h = 1e-3;
        let names: Vec<String> = model.params.names().map(str::to_owned).collect();
        for name in names {
            let grad = &grads[&name];
            let base = model.params.get(&name).unwrap().to_vec();
            for i in 0..base.len() {
                let mut params = model.params.clone();
                let mut up = base.clone();
                up[i] += h;
                params.set(&name, up).unwrap();
                let plus = batch_loss_value(&params, &cfg, &batch);
                let mut down = base.clone();
                down[i] -= h;
                params.set(&name, down).unwrap();
                let minus = batch_loss_value(&params, &cfg, &batch);
                let numeric = (plus - minus) / (2.0 * h);
                let analytic = grad[i];
                let rel = (analytic - numeric).abs()
                    / analytic.abs().max(numeric.abs()).max(1.0);
                assert!(
                    rel < 1e-4,
                    "{name}[{i}]: analytic {analytic}, numeric {numeric}, rel {rel}"
                );
            }
        }
    }

    #[test]
    fn rnn_gradients_match_finite_differences() {
        fd_whole_model(rnn_cfg(21));
    }

    #[test]
    fn transformer_gradients_match_finite_differences() {
        fd_whole_model(transformer_cfg(22));
    }

    // The batch loss is a mean over real target positions, so example order
    // inside a batch cannot change it.
    #[test]
    fn batch_loss_is_permutation_invariant() {
        for cfg in [rnn_cfg(5), transformer_cfg(5)] {
            let model = Model::build(cfg.clone()).unwrap();
            let data = vec![
                ex(0, vec![4, 5, 3], vec![4, 5]),
                ex(1, vec![4], vec![5]),
                ex(2, vec![5, 5], vec![4]),
            ];
            let fwd = Batch::from_examples(&[&data[0], &data[1], &data[2]]);
            let rev = Batch::from_examples(&[&data[2], &data[1], &data[0]]);
            let a = batch_loss_value(&model.params, &cfg, &fwd);
            let b = batch_loss_value(&model.params, &cfg, &rev);
            assert!((a - b).abs() < 1e-12, "{a} vs {b} ({:?})", cfg.architecture);
        }
    }

    fn toy_training_set() -> (Vec<EncodedProduct>, Vec<EncodedProduct>) {
        let train = vec![
            ex(0, vec![4, 5], vec![4]),
            ex(1, vec![5, 4], vec![5]),
            ex(2, vec![4, 4], vec![4]),
            ex(3, vec![5, 5], vec![5]),
            ex(4, vec![4], vec![4]),
            ex(5, vec![5], vec![5]),
        ];
        let val = vec![
            ex(6, vec![4, 5], vec![4]),
            ex(7, vec![5, 4], vec![5]),
        ];
        (train, val)
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        for cfg in [rnn_cfg(11), transformer_cfg(11)] {
            let arch = cfg.architecture;
            let (train_data, val_data) = toy_training_set();
            let mut tcfg = train_cfg(arch);
            tcfg.max_epochs = 8;
            tcfg.learning_rate = 5e-3;
            tcfg.patience = 8;

            let mut m1 = Model::build(cfg.clone()).unwrap();
            let h1 = train(&mut m1, &tcfg, &train_data, &val_data).unwrap();
            assert!(!h1.epochs.is_empty());
            let first = h1.epochs.first().unwrap().train_loss;
            let last = h1.epochs.last().unwrap().train_loss;
            assert!(last < first, "{arch}: {first} -> {last}");
            assert!(h1.best_epoch >= 1);

            let mut m2 = Model::build(cfg.clone()).unwrap();
            let h2 = train(&mut m2, &tcfg, &train_data, &val_data).unwrap();
            assert_eq!(h1, h2, "{arch} history not reproducible");
            assert_eq!(m1.params, m2.params, "{arch} params not reproducible");
        }
    }

    #[test]
    fn best_epoch_parameters_are_restored() {
        let cfg = rnn_cfg(13);
        let (train_data, val_data) = toy_training_set();
        let mut tcfg = train_cfg(Architecture::RnnAttention);
        tcfg.max_epochs = 6;
        tcfg.patience = 6;
        tcfg.learning_rate = 5e-3;
        let mut model = Model::build(cfg).unwrap();
        let history = train(&mut model, &tcfg, &train_data, &val_data).unwrap();
        let best = history
            .epochs
            .iter()
            .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
            .unwrap();
        assert_eq!(history.best_epoch, best.epoch);
        // The restored parameters reproduce the recorded best validation loss.
        let replayed = model.dataset_loss(&val_data, tcfg.batch_size).unwrap();
        assert!(
            (replayed - best.val_loss).abs() < 1e-12,
            "replayed {replayed} vs recorded {}",
            best.val_loss
        );
    }

    #[test]
    fn dropout_training_stays_deterministic() {
        let mut cfg = rnn_cfg(17);
        cfg.dropout = 0.3;
        let (train_data, val_data) = toy_training_set();
        let tcfg = train_cfg(Architecture::RnnAttention);
        let mut m1 = Model::build(cfg.clone()).unwrap();
        let h1 = train(&mut m1, &tcfg, &train_data, &val_data).unwrap();
        let mut m2 = Model::build(cfg).unwrap();
        let h2 = train(&mut m2, &tcfg, &train_data, &val_data).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1.params, m2.params);
    }

    #[test]
    fn poisoned_parameters_surface_as_divergence() {
        let cfg = rnn_cfg(19);
        let (train_data, val_data) = toy_training_set();
        let mut model = Model::build(cfg).unwrap();
        let n = model.params.get("out.b").unwrap().len();
        model.params.set("out.b", vec![f64::NAN; n]).unwrap();
        let err = train(&mut model, &train_cfg(Architecture::RnnAttention), &train_data, &val_data)
            .unwrap_err();
        match err {
            ModelError::Diverged { epoch, loss } => {
                assert_eq!(epoch, 1);
                assert!(loss.is_nan());
            }
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn train_config_validation() {
        let mut t = TrainConfig::desk_scale(Architecture::RnnAttention, 0);
        t.teacher_forcing = false;
        assert!(t.validate().is_err());
        let mut t = TrainConfig::desk_scale(Architecture::RnnAttention, 0);
        t.patience = 0;
        assert!(t.validate().is_err());
        let mut t = TrainConfig::desk_scale(Architecture::RnnAttention, 0);
        t.clip_norm = Some(0.0);
        assert!(t.validate().is_err());
        let mut t = TrainConfig::desk_scale(Architecture::RnnAttention, 0);
        t.clip_norm = None;
        assert!(t.validate().is_ok());
    }

    #[test]
    fn history_jsonl_round_trip() {
        let history = TrainHistory {
            epochs: vec![
                EpochStats { epoch: 1, train_loss: 2.5, val_loss: 2.25 },
                EpochStats { epoch: 2, train_loss: 1.75, val_loss: 2.5 },
            ],
            best_epoch: 1,
            stopped_early: true,
        };
        let text = history.to_jsonl();
        assert_eq!(text.lines().count(), 3);
        let back = TrainHistory::from_jsonl(&text).unwrap();
        assert_eq!(back, history);
    }
}
