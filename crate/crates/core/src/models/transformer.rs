//! Transformer encoder-decoder with post-layer-norm residual blocks.
//!
//! Token embeddings are scaled by sqrt(embed_dim) and offset by fixed
//! sinusoidal position encodings. Attention is multi-head scaled dot
//! product; the decoder self-attention adds a -1e30 causal mask, which
//! underflows to exactly zero weight after softmax, so future positions
//! cannot leak. Examples are processed unpadded, one at a time.

use super::{check_len, check_tokens, Ctx, ModelConfig, ModelError};
use crate::tensor::{ParamStore, Tape, Tensor};

const NEG_INF_MASK: f64 = -1e30;

/// Fixed sinusoidal position table for `len` positions.
fn positional_encoding(tape: &Tape, len: usize, embed: usize) -> Result<Tensor, ModelError> {
    let mut data = vec![0.0; len * embed];
    for pos in 0..len {
        for j in 0..embed {
            let pair = (j - j % 2) as f64;
            let omega = (-(pair / embed as f64) * 10_000f64.ln()).exp();
            let angle = pos as f64 * omega;
            data[pos * embed + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Ok(tape.constant(data, len, embed)?)
}

/// Additive mask that hides positions j > i from query position i.
fn causal_mask(tape: &Tape, len: usize) -> Result<Tensor, ModelError> {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = NEG_INF_MASK;
        }
    }
    Ok(tape.constant(data, len, len)?)
}

/// One attention block's leased projections.
pub(crate) struct AttnParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl AttnParams {
    fn lease(ctx: &Ctx, prefix: &str) -> Result<Self, ModelError> {
        Ok(AttnParams {
            wq: ctx.p(&format!("{prefix}.wq"))?,
            bq: ctx.p(&format!("{prefix}.bq"))?,
            wk: ctx.p(&format!("{prefix}.wk"))?,
            bk: ctx.p(&format!("{prefix}.bk"))?,
            wv: ctx.p(&format!("{prefix}.wv"))?,
            bv: ctx.p(&format!("{prefix}.bv"))?,
            wo: ctx.p(&format!("{prefix}.wo"))?,
            bo: ctx.p(&format!("{prefix}.bo"))?,
        })
    }
}

/// Scaled dot-product attention over `heads` column slices of the
/// projected inputs. `mask` is added to every head's score matrix.
pub(crate) fn multi_head_attention(
    tape: &Tape,
    q_in: &Tensor,
    kv_in: &Tensor,
    p: &AttnParams,
    heads: usize,
    mask: Option<&Tensor>,
) -> Result<Tensor, ModelError> {
    let (tq, embed) = q_in.shape();
    let (tk, _) = kv_in.shape();
    let head_dim = embed / heads;
    let q = q_in.matmul(&p.wq)?.add(&p.bq.expand_rows(tq)?)?;
    let k = kv_in.matmul(&p.wk)?.add(&p.bk.expand_rows(tk)?)?;
    let v = kv_in.matmul(&p.wv)?.add(&p.bv.expand_rows(tk)?)?;
    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let (from, to) = (h * head_dim, (h + 1) * head_dim);
        let qh = q.slice_cols(from, to)?;
        let kh = k.slice_cols(from, to)?;
        let vh = v.slice_cols(from, to)?;
        let mut scores = qh.matmul_nt(&kh)?.scale(1.0 / (head_dim as f64).sqrt())?;
        if let Some(m) = mask {
            scores = scores.add(m)?;
        }
        contexts.push(scores.softmax()?.matmul(&vh)?);
    }
    let refs: Vec<&Tensor> = contexts.iter().collect();
    let cat = tape.concat_cols(&refs)?;
    Ok(cat.matmul(&p.wo)?.add(&p.bo.expand_rows(tq)?)?)
}

/// Residual add + post-layer-norm around a sublayer output.
fn add_norm(ctx: &Ctx, x: &Tensor, sub: &Tensor, ln: &str) -> Result<Tensor, ModelError> {
    let gamma = ctx.p(&format!("{ln}.g"))?;
    let beta = ctx.p(&format!("{ln}.b"))?;
    Ok(x.add(&ctx.dropout(sub)?)?.layer_norm(&gamma, &beta)?)
}

fn feed_forward(ctx: &Ctx, x: &Tensor, prefix: &str) -> Result<Tensor, ModelError> {
    let rows = x.shape().0;
    let hidden = x
        .matmul(&ctx.p(&format!("{prefix}.w1"))?)?
        .add(&ctx.p(&format!("{prefix}.b1"))?.expand_rows(rows)?)?
        .relu()?;
    Ok(hidden
        .matmul(&ctx.p(&format!("{prefix}.w2"))?)?
        .add(&ctx.p(&format!("{prefix}.b2"))?.expand_rows(rows)?)?)
}

fn embed(
    ctx: &Ctx,
    table: &str,
    ids: &[usize],
    embed_dim: usize,
) -> Result<Tensor, ModelError> {
    let x = ctx
        .p(table)?
        .embedding_lookup(ids)?
        .scale((embed_dim as f64).sqrt())?;
    let pe = positional_encoding(ctx.tape, ids.len(), embed_dim)?;
    ctx.dropout(&x.add(&pe)?)
}

pub(crate) fn encode(
    ctx: &Ctx,
    cfg: &ModelConfig,
    source: &[usize],
) -> Result<Tensor, ModelError> {
    check_len(source.len(), cfg.max_source_len, "source")?;
    check_tokens(source, cfg.src_vocab_size, "source")?;
    let mut x = embed(ctx, "src_emb", source, cfg.embed_dim)?;
    for l in 0..cfg.layers {
        let sa = AttnParams::lease(ctx, &format!("enc{l}.sa"))?;
        let attended = multi_head_attention(ctx.tape, &x, &x, &sa, cfg.attention_heads, None)?;
        x = add_norm(ctx, &x, &attended, &format!("enc{l}.ln1"))?;
        let ffn = feed_forward(ctx, &x, &format!("enc{l}.ffn"))?;
        x = add_norm(ctx, &x, &ffn, &format!("enc{l}.ln2"))?;
    }
    Ok(x)
}

/// Decoder stack over `target_in`, attending to `enc_out`; returns logits
/// with one row per target position.
pub(crate) fn decode(
    ctx: &Ctx,
    cfg: &ModelConfig,
    enc_out: &Tensor,
    target_in: &[usize],
) -> Result<Tensor, ModelError> {
    check_len(target_in.len(), cfg.max_target_len + 1, "target")?;
    check_tokens(target_in, cfg.tgt_vocab_size, "target")?;
    let steps = target_in.len();
    let mask = causal_mask(ctx.tape, steps)?;
    let mut y = embed(ctx, "tgt_emb", target_in, cfg.embed_dim)?;
    for l in 0..cfg.layers {
        let sa = AttnParams::lease(ctx, &format!("dec{l}.sa"))?;
        let attended =
            multi_head_attention(ctx.tape, &y, &y, &sa, cfg.attention_heads, Some(&mask))?;
        y = add_norm(ctx, &y, &attended, &format!("dec{l}.ln1"))?;
        let ca = AttnParams::lease(ctx, &format!("dec{l}.ca"))?;
        let cross = multi_head_attention(ctx.tape, &y, enc_out, &ca, cfg.attention_heads, None)?;
        y = add_norm(ctx, &y, &cross, &format!("dec{l}.ln2"))?;
        let ffn = feed_forward(ctx, &y, &format!("dec{l}.ffn"))?;
        y = add_norm(ctx, &y, &ffn, &format!("dec{l}.ln3"))?;
    }
    Ok(y
        .matmul(&ctx.p("out.w")?)?
        .add(&ctx.p("out.b")?.expand_rows(steps)?)?)
}

pub(crate) fn forward_example(
    ctx: &Ctx,
    cfg: &ModelConfig,
    source: &[usize],
    target_in: &[usize],
) -> Result<(Tensor, Vec<Vec<f64>>), ModelError> {
    let enc_out = encode(ctx, cfg, source)?;
    let logits = decode(ctx, cfg, &enc_out, target_in)?;
    Ok((logits, Vec::new()))
}

/// Teacher-forced forward over a batch, example by example with unpadded
/// sequences. Logits come back example-major: all steps of example 0, then
/// all steps of example 1, and so on.
pub(crate) fn forward_batch(
    ctx: &Ctx,
    cfg: &ModelConfig,
    sources: &[Vec<usize>],
    source_lens: &[usize],
    targets_in: &[Vec<usize>],
    target_lens: &[usize],
) -> Result<Tensor, ModelError> {
    let mut parts = Vec::with_capacity(sources.len());
    for b in 0..sources.len() {
        let source = &sources[b][..source_lens[b]];
        let target_in = &targets_in[b][..target_lens[b]];
        let (logits, _) = forward_example(ctx, cfg, source, target_in)?;
        parts.push(logits);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(ctx.tape.concat_rows(&refs)?)
}

/// Detached encoder output for prefix scoring.
pub(crate) struct EncodedSource {
    out: Vec<f64>,
    rows: usize,
}

pub(crate) fn encode_source(
    params: &ParamStore,
    cfg: &ModelConfig,
    source: &[usize],
) -> Result<EncodedSource, ModelError> {
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, params);
    let enc = encode(&ctx, cfg, source)?;
    Ok(EncodedSource {
        out: enc.values(),
        rows: source.len(),
    })
}

pub(crate) fn next_log_probs(
    params: &ParamStore,
    cfg: &ModelConfig,
    enc: &EncodedSource,
    prefix_with_bos: &[usize],
) -> Result<Vec<f64>, ModelError> {
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, params);
    let enc_out = tape.constant(enc.out.clone(), enc.rows, cfg.embed_dim)?;
    let logits = decode(&ctx, cfg, &enc_out, prefix_with_bos)?;
    let last = logits.slice_rows(prefix_with_bos.len() - 1, prefix_with_bos.len())?;
    Ok(last.log_softmax()?.values())
}
