use rand::{Rng, RngCore};

use super::trace::{FeatureTrace, LayerTrace};
use super::{
    BoundModel, LayerVars, ModelConfig, CLASSIFIER_BIAS, CLASSIFIER_WEIGHT, EMBEDDING_NORM_BIAS, EMBEDDING_NORM_WEIGHT,
    POOLER_BIAS, POOLER_WEIGHT, POSITION_EMBEDDINGS, TOKEN_TYPE_EMBEDDINGS, WORD_EMBEDDINGS,
};
use crate::data::PAD_ID;
use crate::error::{Error, Result};
use crate::tensor::{Activation, Tensor, Var};

/// Additive score for masked (padding) keys.
const MASKED_SCORE: f64 = -1e9;

/// Multi-head self-attention output plus the per-head features it exposes.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput<'t> {
    /// `[B, n, d]` after the output projection.
    pub output: Var<'t>,
    /// `[B, N_h, n, n]` post-softmax attention distributions.
    pub attention: Var<'t>,
    /// `[B, N_h, n, d_k]`
    pub query: Var<'t>,
    pub key: Var<'t>,
    pub value: Var<'t>,
}

/// Self-attention over `x: [B, n, d]`. Heads are contiguous column blocks of
/// the projection matrices; their contexts are concatenated before `W^O`.
pub fn multi_head_attention<'t>(
    x: Var<'t>,
    layer: &LayerVars<'t>,
    num_heads: usize,
    mask: Option<Var<'t>>,
) -> Result<AttentionOutput<'t>> {
    let shape = x.shape();
    let [b, n, d] = shape[..] else {
        return Err(Error::Input(format!(
            "attention input must be [B, n, d], got {shape:?}"
        )));
    };
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::Config(format!(
            "hidden size {d} not divisible into {num_heads} heads"
        )));
    }
    let dk = d / num_heads;
    let heads = |w: Var<'t>, bias: Var<'t>| -> Result<Var<'t>> {
        x.matmul(w)?
            .add(bias)?
            .reshape(&[b, n, num_heads, dk])?
            .permute(&[0, 2, 1, 3])
    };
    let query = heads(layer.query_weight, layer.query_bias)?;
    let key = heads(layer.key_weight, layer.key_bias)?;
    let value = heads(layer.value_weight, layer.value_bias)?;
    let mut scores = query.matmul(key.transpose()?)?.scale(1.0 / (dk as f64).sqrt())?;
    if let Some(mask) = mask {
        scores = scores.add(mask)?;
    }
    let attention = scores.softmax(1.0)?;
    let context = attention.matmul(value)?.permute(&[0, 2, 1, 3])?.reshape(&[b, n, d])?;
    let output = context.matmul(layer.output_weight)?.add(layer.output_bias)?;
    Ok(AttentionOutput {
        output,
        attention,
        query,
        key,
        value,
    })
}

/// Position-wise `act(x·W1 + b1)·W2 + b2`.
pub fn feed_forward<'t>(x: Var<'t>, layer: &LayerVars<'t>, activation: Activation) -> Result<Var<'t>> {
    x.matmul(layer.ffn_in_weight)?
        .add(layer.ffn_in_bias)?
        .activation(activation)?
        .matmul(layer.ffn_out_weight)?
        .add(layer.ffn_out_bias)
}

pub(crate) struct Dropout<'r> {
    pub p: f64,
    pub rng: &'r mut dyn RngCore,
}

impl Dropout<'_> {
    fn apply<'t>(&mut self, x: Var<'t>) -> Result<Var<'t>> {
        if self.p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.p;
        let shape = x.shape();
        let rng = &mut *self.rng;
        let mask = Tensor::from_fn(shape, |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
        x.mul(x.tape().constant(mask))
    }
}

fn maybe_dropout<'t>(x: Var<'t>, dropout: &mut Option<Dropout<'_>>) -> Result<Var<'t>> {
    match dropout {
        Some(d) => d.apply(x),
        None => Ok(x),
    }
}

/// One post-layer-norm transformer layer:
/// `h = LN(x + MHA(x))`, `out = LN(h + FFN(h))`.
pub fn encoder_layer<'t>(
    x: Var<'t>,
    layer: &LayerVars<'t>,
    config: &ModelConfig,
    mask: Option<Var<'t>>,
) -> Result<(Var<'t>, AttentionOutput<'t>)> {
    encoder_layer_impl(x, layer, config, mask, &mut None)
}

fn encoder_layer_impl<'t>(
    x: Var<'t>,
    layer: &LayerVars<'t>,
    config: &ModelConfig,
    mask: Option<Var<'t>>,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<(Var<'t>, AttentionOutput<'t>)> {
    let eps = config.layer_norm_eps;
    let attn = multi_head_attention(x, layer, config.num_heads, mask)?;
    let h = x.add(maybe_dropout(attn.output, dropout)?)?.layer_norm(
        layer.attention_norm_weight,
        layer.attention_norm_bias,
        eps,
    )?;
    let ffn = maybe_dropout(feed_forward(h, layer, config.activation)?, dropout)?;
    let out = h
        .add(ffn)?
        .layer_norm(layer.output_norm_weight, layer.output_norm_bias, eps)?;
    Ok((out, attn))
}

/// Runs the encoder on a batch of token sequences and records every feature.
///
/// Shorter sequences are right-padded with the pad id; padded keys are masked
/// out of attention.
pub fn forward<'t>(model: &BoundModel<'t>, batch: &[Vec<u32>]) -> Result<FeatureTrace<'t>> {
    forward_impl(model, batch, None)
}

/// As [`forward`], with dropout (at the configured rate) drawn from `rng`.
pub fn forward_with_dropout<'t>(
    model: &BoundModel<'t>,
    batch: &[Vec<u32>],
    rng: &mut dyn RngCore,
) -> Result<FeatureTrace<'t>> {
    let p = model.config().dropout;
    forward_impl(model, batch, Some(Dropout { p, rng }))
}

fn forward_impl<'t>(
    model: &BoundModel<'t>,
    batch: &[Vec<u32>],
    mut dropout: Option<Dropout<'_>>,
) -> Result<FeatureTrace<'t>> {
    let config = model.config().clone();
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let n = batch.iter().map(Vec::len).max().unwrap_or(0);
    if n == 0 {
        return Err(Error::Input("empty token sequence".into()));
    }
    if n > config.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {n} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    let b = batch.len();
    let d = config.hidden_dim;
    let mut ids = Vec::with_capacity(b * n);
    for seq in batch {
        if let Some(&bad) = seq.iter().find(|&&id| id as usize >= config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of vocabulary of size {}",
                config.vocab_size
            )));
        }
        ids.extend(seq.iter().map(|&id| id as usize));
        ids.extend(std::iter::repeat_n(PAD_ID as usize, n - seq.len()));
    }
    let tape = model.var(WORD_EMBEDDINGS).tape();
    let mask = if ids.contains(&(PAD_ID as usize)) {
        let m = Tensor::from_fn(
            [b, 1, 1, n],
            |i| if ids[i] == PAD_ID as usize { MASKED_SCORE } else { 0.0 },
        );
        Some(tape.constant(m))
    } else {
        None
    };

    let words = model.var(WORD_EMBEDDINGS).gather_rows(&ids)?.reshape(&[b, n, d])?;
    let positions = model.var(POSITION_EMBEDDINGS).slice(0, 0, n)?;
    let segment = model.var(TOKEN_TYPE_EMBEDDINGS).slice(0, 0, 1)?;
    let embeddings = words.add(positions)?.add(segment)?.layer_norm(
        model.var(EMBEDDING_NORM_WEIGHT),
        model.var(EMBEDDING_NORM_BIAS),
        config.layer_norm_eps,
    )?;
    let embeddings = maybe_dropout(embeddings, &mut dropout)?;

    let mut hidden = embeddings;
    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let (out, attn) = encoder_layer_impl(hidden, &model.layer(l), &config, mask, &mut dropout)?;
        layers.push(LayerTrace {
            attention: attn.attention,
            hidden: out,
            query: attn.query,
            key: attn.key,
            value: attn.value,
        });
        hidden = out;
    }

    let first = hidden.slice(1, 0, 1)?.reshape(&[b, d])?;
    let pooled = first
        .matmul(model.var(POOLER_WEIGHT))?
        .add(model.var(POOLER_BIAS))?
        .tanh()?;
    let logits = maybe_dropout(pooled, &mut dropout)?
        .matmul(model.var(CLASSIFIER_WEIGHT))?
        .add(model.var(CLASSIFIER_BIAS))?;
    Ok(FeatureTrace {
        embeddings,
        layers,
        pooled,
        logits,
        regression: config.num_labels.is_regression(),
    })
}
