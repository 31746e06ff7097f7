use super::{parameter_shapes, ModelConfig, ParamGroup};
use crate::tensor::numel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParameterCount {
    pub embedding: usize,
    pub encoder: usize,
    pub head: usize,
    pub total: usize,
}

impl ParameterCount {
    pub fn embedding_fraction(&self) -> f64 {
        self.embedding as f64 / self.total as f64
    }
}

/// Scalar counts per parameter group, summed over the model's name set.
pub fn count_parameters(config: &ModelConfig) -> ParameterCount {
    let mut count = ParameterCount {
        embedding: 0,
        encoder: 0,
        head: 0,
        total: 0,
    };
    for (_, shape, group) in parameter_shapes(config) {
        let n = numel(&shape);
        match group {
            ParamGroup::Embedding => count.embedding += n,
            ParamGroup::Encoder => count.encoder += n,
            ParamGroup::Head => count.head += n,
        }
        count.total += n;
    }
    count
}

/// Encoder forward-pass floating point operations for sequence length `n`,
/// counting a multiply-add as two operations.
///
/// Per layer: `8nd²` for the four projections, `4n²d` for attention scores
/// and context, `4n·d·d_ff` for the feed-forward block.
pub fn estimate_flops(config: &ModelConfig, n: usize) -> f64 {
    let (n, d, ff) = (n as f64, config.hidden_dim as f64, config.ffn_dim as f64);
    let per_layer = 8.0 * n * d * d + 4.0 * n * n * d + 4.0 * n * d * ff;
    config.num_layers as f64 * per_layer
}
