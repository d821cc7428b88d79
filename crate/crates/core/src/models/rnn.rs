//! LSTM encoder-decoder with global dot-product attention.
//!
//! The encoder is a bidirectional single-layer LSTM: the forward and reverse
//! passes share the (dropped-out) source embeddings, their per-step states
//! are concatenated and projected back to the hidden width for attention,
//! and their final states are bridged into the decoder's initial (h, c).
//! Padded source steps freeze the recurrent state through a 0/1 column mask
//! instead of branching, so one tape serves the whole batch; padded source
//! positions are excluded from attention with a -1e30 additive mask. The
//! attentional hidden state tanh(W_c [context; h]) feeds both the output
//! projection and, via input feeding, the next decoder step's input.

use super::{check_len, check_tokens, Ctx, ModelConfig, ModelError};
use crate::tensor::{ParamStore, Tape, Tensor};

const NEG_INF_MASK: f64 = -1e30;

/// One LSTM step for a (batch, hidden) state given (batch, embed) input.
/// Gate order inside the packed weight matrix: input, forget, cell, output.
fn lstm_step(
    ctx: &Ctx,
    w: &Tensor,
    b: &Tensor,
    h: &Tensor,
    c: &Tensor,
    x: &Tensor,
    hidden: usize,
    batch: usize,
) -> Result<(Tensor, Tensor), ModelError> {
    let inp = ctx.tape.concat_cols(&[h, x])?;
    let gates = inp.matmul(w)?.add(&b.expand_rows(batch)?)?;
    let i = gates.slice_cols(0, hidden)?.sigmoid()?;
    let f = gates.slice_cols(hidden, 2 * hidden)?.sigmoid()?;
    let g = gates.slice_cols(2 * hidden, 3 * hidden)?.tanh()?;
    let o = gates.slice_cols(3 * hidden, 4 * hidden)?.sigmoid()?;
    let c_new = f.mul(c)?.add(&i.mul(&g)?)?;
    let h_new = o.mul(&c_new.tanh()?)?;
    Ok((h_new, c_new))
}

/// Encoder states for every source step plus the final (h, c).
struct Encoded {
    states: Vec<Tensor>,
    h: Tensor,
    c: Tensor,
}

/// One directional LSTM sweep over precomputed step inputs. States come back
/// indexed by source position regardless of sweep direction; the returned
/// (h, c) is the state after the last step visited (position 0 when
/// `reverse`). Rows whose source already ended keep their previous state, so
/// the reverse sweep stays zero through a row's padding and only starts
/// accumulating at its true last token.
fn lstm_pass(
    ctx: &Ctx,
    w: &Tensor,
    b: &Tensor,
    xs: &[Tensor],
    lens: &[usize],
    hidden: usize,
    batch: usize,
    reverse: bool,
) -> Result<(Vec<Tensor>, Tensor, Tensor), ModelError> {
    let steps = xs.len();
    let zeros = ctx.tape.constant(vec![0.0; batch * hidden], batch, hidden)?;
    let (mut h, mut c) = (zeros.clone(), zeros);
    let mut states: Vec<Option<Tensor>> = vec![None; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let (h_new, c_new) = lstm_step(ctx, w, b, &h, &c, &xs[t], hidden, batch)?;
        let valid: Vec<f64> = lens
            .iter()
            .map(|&l| if t < l { 1.0 } else { 0.0 })
            .collect();
        if valid.iter().all(|&v| v == 1.0) {
            h = h_new;
            c = c_new;
        } else {
            let keep: Vec<f64> = valid.iter().map(|v| 1.0 - v).collect();
            let valid_col = ctx.tape.constant(valid, batch, 1)?;
            let keep_col = ctx.tape.constant(keep, batch, 1)?;
            h = h_new.mul_colvec(&valid_col)?.add(&h.mul_colvec(&keep_col)?)?;
            c = c_new.mul_colvec(&valid_col)?.add(&c.mul_colvec(&keep_col)?)?;
        }
        states[t] = Some(h.clone());
    }
    let states = states.into_iter().map(|s| s.expect("every step visited")).collect();
    Ok((states, h, c))
}

fn run_encoder(
    ctx: &Ctx,
    cfg: &ModelConfig,
    sources: &[Vec<usize>],
    lens: &[usize],
) -> Result<Encoded, ModelError> {
    let batch = sources.len();
    let hidden = cfg.rnn_hidden;
    let steps = sources[0].len();
    let src_emb = ctx.p("src_emb")?;
    let xs: Vec<Tensor> = (0..steps)
        .map(|t| {
            let ids: Vec<usize> = sources.iter().map(|s| s[t]).collect();
            ctx.dropout(&src_emb.embedding_lookup(&ids)?)
        })
        .collect::<Result<_, _>>()?;
    let (fwd_states, fwd_h, fwd_c) = lstm_pass(
        ctx,
        &ctx.p("enc.w")?,
        &ctx.p("enc.b")?,
        &xs,
        lens,
        hidden,
        batch,
        false,
    )?;
    let (rev_states, rev_h, rev_c) = lstm_pass(
        ctx,
        &ctx.p("enc_rev.w")?,
        &ctx.p("enc_rev.b")?,
        &xs,
        lens,
        hidden,
        batch,
        true,
    )?;
    // Project the concatenated directions back to the hidden width so the
    // decoder-side dot attention and state bridge keep their shapes.
    let proj = ctx.p("enc_proj.w")?;
    let states: Vec<Tensor> = fwd_states
        .iter()
        .zip(&rev_states)
        .map(|(f, r)| ctx.tape.concat_cols(&[f, r])?.matmul(&proj))
        .collect::<Result<_, _>>()?;
    let h = ctx
        .tape
        .concat_cols(&[&fwd_h, &rev_h])?
        .matmul(&ctx.p("init_h.w")?)?
        .tanh()?;
    let c = ctx.tape.concat_cols(&[&fwd_c, &rev_c])?.matmul(&ctx.p("init_c.w")?)?;
    Ok(Encoded { states, h, c })
}

/// Attention + output projection for one decoder step. Returns the logits
/// row block, the attentional hidden state (fed into the next decoder step),
/// and the attention weights over source positions.
fn attend_and_project(
    ctx: &Ctx,
    h_dec: &Tensor,
    enc_states: &[Tensor],
    att_mask: Option<&Tensor>,
    batch: usize,
) -> Result<(Tensor, Tensor, Tensor), ModelError> {
    let score_cols: Vec<Tensor> = enc_states
        .iter()
        .map(|s| h_dec.mul(s)?.sum_cols())
        .collect::<Result<_, _>>()?;
    let refs: Vec<&Tensor> = score_cols.iter().collect();
    let mut scores = ctx.tape.concat_cols(&refs)?;
    if let Some(mask) = att_mask {
        scores = scores.add(mask)?;
    }
    let weights = scores.softmax()?;
    let mut context: Option<Tensor> = None;
    for (s, state) in enc_states.iter().enumerate() {
        let w_col = weights.slice_cols(s, s + 1)?;
        let part = state.mul_colvec(&w_col)?;
        context = Some(match context {
            Some(acc) => acc.add(&part)?,
            None => part,
        });
    }
    let cat = ctx.tape.concat_cols(&[&context.unwrap(), h_dec])?;
    let attn_h = cat
        .matmul(&ctx.p("attn.w")?)?
        .add(&ctx.p("attn.b")?.expand_rows(batch)?)?
        .tanh()?;
    let attn_h = ctx.dropout(&attn_h)?;
    let logits = attn_h
        .matmul(&ctx.p("out.w")?)?
        .add(&ctx.p("out.b")?.expand_rows(batch)?)?;
    Ok((logits, attn_h, weights))
}

fn validate_batch(
    cfg: &ModelConfig,
    sources: &[Vec<usize>],
    lens: &[usize],
    targets_in: &[Vec<usize>],
) -> Result<(), ModelError> {
    for (src, &len) in sources.iter().zip(lens) {
        check_len(len, cfg.max_source_len, "source")?;
        check_tokens(src, cfg.src_vocab_size, "source")?;
    }
    for tgt in targets_in {
        check_len(tgt.len(), cfg.max_target_len + 1, "target")?;
        check_tokens(tgt, cfg.tgt_vocab_size, "target")?;
    }
    Ok(())
}

/// Teacher-forced forward over a padded batch. Logits come back step-major:
/// row `t * batch + b` scores step `t` of example `b`, matching the
/// flattened-target layout built in the training loop.
pub(crate) fn forward_batch(
    ctx: &Ctx,
    cfg: &ModelConfig,
    sources: &[Vec<usize>],
    lens: &[usize],
    targets_in: &[Vec<usize>],
) -> Result<Tensor, ModelError> {
    validate_batch(cfg, sources, lens, targets_in)?;
    let batch = sources.len();
    let hidden = cfg.rnn_hidden;
    let src_steps = sources[0].len();
    let tgt_steps = targets_in[0].len();
    let enc = run_encoder(ctx, cfg, sources, lens)?;

    let att_mask = if lens.iter().all(|&l| l == src_steps) {
        None
    } else {
        let mut mask = vec![0.0; batch * src_steps];
        for (b, &l) in lens.iter().enumerate() {
            for s in l..src_steps {
                mask[b * src_steps + s] = NEG_INF_MASK;
            }
        }
        Some(ctx.tape.constant(mask, batch, src_steps)?)
    };

    let tgt_emb = ctx.p("tgt_emb")?;
    let (w, b) = (ctx.p("dec.w")?, ctx.p("dec.b")?);
    let (mut h, mut c) = (enc.h.clone(), enc.c.clone());
    let mut attn_h = ctx.tape.constant(vec![0.0; batch * hidden], batch, hidden)?;
    let mut step_logits = Vec::with_capacity(tgt_steps);
    for t in 0..tgt_steps {
        let ids: Vec<usize> = targets_in.iter().map(|tgt| tgt[t]).collect();
        let emb = ctx.dropout(&tgt_emb.embedding_lookup(&ids)?)?;
        let x = ctx.tape.concat_cols(&[&emb, &attn_h])?;
        let (h_new, c_new) = lstm_step(ctx, &w, &b, &h, &c, &x, hidden, batch)?;
        h = h_new;
        c = c_new;
        let (logits, attn_new, _) =
            attend_and_project(ctx, &h, &enc.states, att_mask.as_ref(), batch)?;
        attn_h = attn_new;
        step_logits.push(logits);
    }
    let refs: Vec<&Tensor> = step_logits.iter().collect();
    Ok(ctx.tape.concat_rows(&refs)?)
}

/// Single-example forward that also surfaces the attention rows.
pub(crate) fn forward_example(
    ctx: &Ctx,
    cfg: &ModelConfig,
    source: &[usize],
    target_in: &[usize],
) -> Result<(Tensor, Vec<Vec<f64>>), ModelError> {
    let sources = vec![source.to_vec()];
    let lens = vec![source.len()];
    let targets = vec![target_in.to_vec()];
    validate_batch(cfg, &sources, &lens, &targets)?;
    let enc = run_encoder(ctx, cfg, &sources, &lens)?;
    let tgt_emb = ctx.p("tgt_emb")?;
    let (w, b) = (ctx.p("dec.w")?, ctx.p("dec.b")?);
    let (mut h, mut c) = (enc.h.clone(), enc.c.clone());
    let mut attn_h = ctx.tape.constant(vec![0.0; cfg.rnn_hidden], 1, cfg.rnn_hidden)?;
    let mut step_logits = Vec::new();
    let mut attention = Vec::new();
    for &id in target_in {
        let emb = tgt_emb.embedding_lookup(&[id])?;
        let x = ctx.tape.concat_cols(&[&emb, &attn_h])?;
        let (h_new, c_new) = lstm_step(ctx, &w, &b, &h, &c, &x, cfg.rnn_hidden, 1)?;
        h = h_new;
        c = c_new;
        let (logits, attn_new, weights) = attend_and_project(ctx, &h, &enc.states, None, 1)?;
        attn_h = attn_new;
        attention.push(weights.values());
        step_logits.push(logits);
    }
    let refs: Vec<&Tensor> = step_logits.iter().collect();
    Ok((ctx.tape.concat_rows(&refs)?, attention))
}

/// Detached encoder output, reusable across many decode prefixes.
pub(crate) struct EncodedSource {
    states: Vec<Vec<f64>>,
    h: Vec<f64>,
    c: Vec<f64>,
}

pub(crate) fn encode_source(
    params: &ParamStore,
    cfg: &ModelConfig,
    source: &[usize],
) -> Result<EncodedSource, ModelError> {
    check_len(source.len(), cfg.max_source_len, "source")?;
    check_tokens(source, cfg.src_vocab_size, "source")?;
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, params);
    let enc = run_encoder(&ctx, cfg, &[source.to_vec()], &[source.len()])?;
    Ok(EncodedSource {
        states: enc.states.iter().map(Tensor::values).collect(),
        h: enc.h.values(),
        c: enc.c.values(),
    })
}

/// Log-distribution over the next target token after `prefix_with_bos`.
/// Input feeding makes every prefix step attend, not just the last one: the
/// attentional state is part of the decoder input being replayed.
pub(crate) fn next_log_probs(
    params: &ParamStore,
    cfg: &ModelConfig,
    enc: &EncodedSource,
    prefix_with_bos: &[usize],
) -> Result<Vec<f64>, ModelError> {
    check_tokens(prefix_with_bos, cfg.tgt_vocab_size, "target")?;
    let hidden = cfg.rnn_hidden;
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, params);
    let tgt_emb = ctx.p("tgt_emb")?;
    let (w, b) = (ctx.p("dec.w")?, ctx.p("dec.b")?);
    let states: Vec<Tensor> = enc
        .states
        .iter()
        .map(|s| tape.constant(s.clone(), 1, hidden))
        .collect::<Result<_, _>>()?;
    let mut h = tape.constant(enc.h.clone(), 1, hidden)?;
    let mut c = tape.constant(enc.c.clone(), 1, hidden)?;
    let mut attn_h = tape.constant(vec![0.0; hidden], 1, hidden)?;
    let mut logits = None;
    for &id in prefix_with_bos {
        let emb = tgt_emb.embedding_lookup(&[id])?;
        let x = tape.concat_cols(&[&emb, &attn_h])?;
        let (h_new, c_new) = lstm_step(&ctx, &w, &b, &h, &c, &x, hidden, 1)?;
        h = h_new;
        c = c_new;
        let (step_logits, attn_new, _) = attend_and_project(&ctx, &h, &states, None, 1)?;
        attn_h = attn_new;
        logits = Some(step_logits);
    }
    let logits = logits.expect("prefix always contains at least BOS");
    Ok(logits.log_softmax()?.values())
}
