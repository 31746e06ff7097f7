use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Features recorded by one transformer layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace<'t> {
    /// `[B, N_h, n, n]`
    pub attention: Var<'t>,
    /// `[B, n, d]` layer output.
    pub hidden: Var<'t>,
    /// `[B, N_h, n, d_k]`
    pub query: Var<'t>,
    pub key: Var<'t>,
    pub value: Var<'t>,
}

/// Everything a distillation loss can read from one forward pass.
///
/// Layers are addressed 1-based; hidden state 0 is the embedding output.
#[derive(Clone, Debug)]
pub struct FeatureTrace<'t> {
    pub embeddings: Var<'t>,
    pub layers: Vec<LayerTrace<'t>>,
    pub pooled: Var<'t>,
    /// `[B, outputs]`
    pub logits: Var<'t>,
    pub regression: bool,
}

impl<'t> FeatureTrace<'t> {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn layer_trace(&self, layer: usize) -> Result<&LayerTrace<'t>> {
        if layer == 0 || layer > self.layers.len() {
            return Err(Error::Config(format!(
                "layer {layer} out of range 1..={}",
                self.layers.len()
            )));
        }
        Ok(&self.layers[layer - 1])
    }

    /// Hidden state after layer `layer`; 0 gives the embeddings.
    pub fn hidden(&self, layer: usize) -> Result<Var<'t>> {
        if layer == 0 {
            Ok(self.embeddings)
        } else {
            Ok(self.layer_trace(layer)?.hidden)
        }
    }

    pub fn attention(&self, layer: usize) -> Result<Var<'t>> {
        Ok(self.layer_trace(layer)?.attention)
    }

    pub fn query(&self, layer: usize) -> Result<Var<'t>> {
        Ok(self.layer_trace(layer)?.query)
    }

    pub fn key(&self, layer: usize) -> Result<Var<'t>> {
        Ok(self.layer_trace(layer)?.key)
    }

    pub fn value(&self, layer: usize) -> Result<Var<'t>> {
        Ok(self.layer_trace(layer)?.value)
    }

    pub fn seq_len(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn batch_size(&self) -> usize {
        self.embeddings.shape()[0]
    }

    /// Copies every recorded value off the tape.
    pub fn snapshot(&self) -> TraceSnapshot {
        TraceSnapshot {
            embeddings: self.embeddings.value(),
            attention: self.layers.iter().map(|l| l.attention.value()).collect(),
            hidden: self.layers.iter().map(|l| l.hidden.value()).collect(),
            query: self.layers.iter().map(|l| l.query.value()).collect(),
            key: self.layers.iter().map(|l| l.key.value()).collect(),
            value: self.layers.iter().map(|l| l.value.value()).collect(),
            logits: self.logits.value(),
        }
    }
}

/// Detached copy of a [`FeatureTrace`].
#[derive(Clone, Debug, PartialEq)]
pub struct TraceSnapshot {
    pub embeddings: Tensor,
    pub attention: Vec<Tensor>,
    pub hidden: Vec<Tensor>,
    pub query: Vec<Tensor>,
    pub key: Vec<Tensor>,
    pub value: Vec<Tensor>,
    pub logits: Tensor,
}

impl TraceSnapshot {
    /// Layer features only, ignoring the head output.
    pub fn features_equal(&self, other: &TraceSnapshot) -> bool {
        self.embeddings == other.embeddings
            && self.attention == other.attention
            && self.hidden == other.hidden
            && self.query == other.query
            && self.key == other.key
            && self.value == other.value
    }
}
