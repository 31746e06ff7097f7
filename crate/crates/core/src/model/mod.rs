//! BERT-style encoder: embeddings, post-layer-norm transformer layers and a
//! pooled classification/regression head.

mod complexity;
mod config;
mod forward;
mod trace;

pub use complexity::{count_parameters, estimate_flops, ParameterCount};
pub use config::{HeadKind, ModelConfig, BERT_VOCAB_SIZE};
pub use forward::{encoder_layer, feed_forward, forward, forward_with_dropout, multi_head_attention, AttentionOutput};
pub use trace::{FeatureTrace, LayerTrace, TraceSnapshot};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const WORD_EMBEDDINGS: &str = "embeddings.word_embeddings.weight";
pub const POSITION_EMBEDDINGS: &str = "embeddings.position_embeddings.weight";
pub const TOKEN_TYPE_EMBEDDINGS: &str = "embeddings.token_type_embeddings.weight";
pub const EMBEDDING_NORM_WEIGHT: &str = "embeddings.LayerNorm.weight";
pub const EMBEDDING_NORM_BIAS: &str = "embeddings.LayerNorm.bias";
pub const POOLER_WEIGHT: &str = "pooler.dense.weight";
pub const POOLER_BIAS: &str = "pooler.dense.bias";
pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";

/// Number of segment (token type) embeddings.
pub const TOKEN_TYPES: usize = 2;

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Embedding,
    Encoder,
    Head,
}

pub fn layer_prefix(layer: usize) -> String {
    format!("encoder.layer.{layer}.")
}

/// Per-layer parameter suffixes, in allocation order.
pub(crate) fn layer_param_shapes(config: &ModelConfig) -> Vec<(&'static str, Vec<usize>)> {
    let (d, f) = (config.hidden_dim, config.ffn_dim);
    vec![
        ("attention.self.query.weight", vec![d, d]),
        ("attention.self.query.bias", vec![d]),
        ("attention.self.key.weight", vec![d, d]),
        ("attention.self.key.bias", vec![d]),
        ("attention.self.value.weight", vec![d, d]),
        ("attention.self.value.bias", vec![d]),
        ("attention.output.dense.weight", vec![d, d]),
        ("attention.output.dense.bias", vec![d]),
        ("attention.output.LayerNorm.weight", vec![d]),
        ("attention.output.LayerNorm.bias", vec![d]),
        ("intermediate.dense.weight", vec![d, f]),
        ("intermediate.dense.bias", vec![f]),
        ("output.dense.weight", vec![f, d]),
        ("output.dense.bias", vec![d]),
        ("output.LayerNorm.weight", vec![d]),
        ("output.LayerNorm.bias", vec![d]),
    ]
}

/// The full parameter name/shape list; a pure function of the config.
pub fn parameter_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>, ParamGroup)> {
    let d = config.hidden_dim;
    let mut out = vec![
        (
            WORD_EMBEDDINGS.to_string(),
            vec![config.vocab_size, d],
            ParamGroup::Embedding,
        ),
        (
            POSITION_EMBEDDINGS.to_string(),
            vec![config.max_seq_len, d],
            ParamGroup::Embedding,
        ),
        (
            TOKEN_TYPE_EMBEDDINGS.to_string(),
            vec![TOKEN_TYPES, d],
            ParamGroup::Embedding,
        ),
        (EMBEDDING_NORM_WEIGHT.to_string(), vec![d], ParamGroup::Embedding),
        (EMBEDDING_NORM_BIAS.to_string(), vec![d], ParamGroup::Embedding),
    ];
    for layer in 0..config.num_layers {
        let prefix = layer_prefix(layer);
        for (suffix, shape) in layer_param_shapes(config) {
            out.push((format!("{prefix}{suffix}"), shape, ParamGroup::Encoder));
        }
    }
    let outputs = config.num_labels.outputs();
    out.push((POOLER_WEIGHT.to_string(), vec![d, d], ParamGroup::Head));
    out.push((POOLER_BIAS.to_string(), vec![d], ParamGroup::Head));
    out.push((CLASSIFIER_WEIGHT.to_string(), vec![d, outputs], ParamGroup::Head));
    out.push((CLASSIFIER_BIAS.to_string(), vec![outputs], ParamGroup::Head));
    out
}

pub fn is_layer_norm_gain(name: &str) -> bool {
    name.ends_with("LayerNorm.weight")
}

pub fn is_bias(name: &str) -> bool {
    name.ends_with(".bias")
}

/// Encoder weights keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    params: IndexMap<String, Tensor>,
}

impl TransformerModel {
    /// Allocates every parameter: zero weights and biases, unit layer-norm gains.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = parameter_shapes(&config)
            .into_iter()
            .map(|(name, shape, _)| {
                let t = if is_layer_norm_gain(&name) {
                    Tensor::ones(shape)
                } else {
                    Tensor::zeros(shape)
                };
                (name, t)
            })
            .collect();
        Ok(TransformerModel { config, params })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, mut tensors: IndexMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut params = IndexMap::new();
        for (name, shape, _) in parameter_shapes(&config) {
            let t = tensors
                .shift_remove(&name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            params.insert(name, t);
        }
        Ok(TransformerModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Registers every parameter on `tape`, trainable or constant.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundModel<'t> {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), trainable)))
            .collect();
        BoundModel {
            config: self.config.clone(),
            vars,
        }
    }
}

/// Model parameters recorded on a tape for one forward pass.
pub struct BoundModel<'t> {
    config: ModelConfig,
    vars: IndexMap<String, Var<'t>>,
}

impl<'t> BoundModel<'t> {
    /// Wraps caller-built variables; every name of `config` must be present.
    pub fn from_vars(config: ModelConfig, vars: IndexMap<String, Var<'t>>) -> Self {
        BoundModel { config, vars }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn var(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn vars(&self) -> &IndexMap<String, Var<'t>> {
        &self.vars
    }

    /// Parameters of transformer layer `layer` (0-based).
    pub fn layer(&self, layer: usize) -> LayerVars<'t> {
        let p = layer_prefix(layer);
        let v = |s: &str| self.var(&format!("{p}{s}"));
        LayerVars {
            query_weight: v("attention.self.query.weight"),
            query_bias: v("attention.self.query.bias"),
            key_weight: v("attention.self.key.weight"),
            key_bias: v("attention.self.key.bias"),
            value_weight: v("attention.self.value.weight"),
            value_bias: v("attention.self.value.bias"),
            output_weight: v("attention.output.dense.weight"),
            output_bias: v("attention.output.dense.bias"),
            attention_norm_weight: v("attention.output.LayerNorm.weight"),
            attention_norm_bias: v("attention.output.LayerNorm.bias"),
            ffn_in_weight: v("intermediate.dense.weight"),
            ffn_in_bias: v("intermediate.dense.bias"),
            ffn_out_weight: v("output.dense.weight"),
            ffn_out_bias: v("output.dense.bias"),
            output_norm_weight: v("output.LayerNorm.weight"),
            output_norm_bias: v("output.LayerNorm.bias"),
        }
    }

    /// Gradients after backward, zero-filled for unreachable parameters.
    pub fn grads(&self) -> IndexMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, v)| {
                let g = v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Handles to the sixteen tensors of one transformer layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars<'t> {
    pub query_weight: Var<'t>,
    pub query_bias: Var<'t>,
    pub key_weight: Var<'t>,
    pub key_bias: Var<'t>,
    pub value_weight: Var<'t>,
    pub value_bias: Var<'t>,
    pub output_weight: Var<'t>,
    pub output_bias: Var<'t>,
    pub attention_norm_weight: Var<'t>,
    pub attention_norm_bias: Var<'t>,
    pub ffn_in_weight: Var<'t>,
    pub ffn_in_bias: Var<'t>,
    pub ffn_out_weight: Var<'t>,
    pub ffn_out_bias: Var<'t>,
    pub output_norm_weight: Var<'t>,
    pub output_norm_bias: Var<'t>,
}
