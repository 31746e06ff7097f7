//! Width/depth trade-offs at a fixed parameter or compute budget.

use serde::{Deserialize, Serialize};

use crate::model::{count_parameters, estimate_flops, ModelConfig};

/// Relative slack allowed above a budget.
pub const BUDGET_TOLERANCE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// Total parameter count.
    Params(usize),
    /// Encoder flops for one sequence of length `seq_len`.
    Flops { flops: f64, seq_len: usize },
}

impl Budget {
    /// The budgeted quantity for `config`.
    pub fn measure(&self, config: &ModelConfig) -> f64 {
        match *self {
            Budget::Params(_) => count_parameters(config).total as f64,
            Budget::Flops { seq_len, .. } => estimate_flops(config, seq_len),
        }
    }

    pub fn limit(&self) -> f64 {
        match *self {
            Budget::Params(p) => p as f64,
            Budget::Flops { flops, .. } => flops,
        }
    }

    pub fn admits(&self, config: &ModelConfig) -> bool {
        self.measure(config) <= self.limit() * (1.0 + BUDGET_TOLERANCE)
    }
}

/// Head count for width `d`: the divisor of `d` nearest `max(2, d/64)`,
/// preferring the smaller on ties.
pub fn heads_for_width(d: usize) -> usize {
    let target = (d as f64 / 64.0).max(2.0);
    (1..=d)
        .filter(|h| d.is_multiple_of(*h))
        .min_by(|&a, &b| {
            let (da, db) = ((a as f64 - target).abs(), (b as f64 - target).abs());
            da.partial_cmp(&db).expect("finite").then(a.cmp(&b))
        })
        .unwrap_or(1)
}

/// For each depth, the widest width in `widths` whose configuration fits the
/// budget. Depths with no feasible width are left out, so an infeasible
/// budget yields an empty list.
///
/// `template` supplies vocabulary, sequence length, head type and
/// activation; the ffn size is always four times the width.
pub fn configs_at_budget(
    budget: Budget,
    depths: &[usize],
    widths: &[usize],
    template: &ModelConfig,
) -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for &layers in depths {
        let best = widths
            .iter()
            .copied()
            .filter(|&d| layers > 0 && d > 0)
            .map(|d| {
                let mut c = template.clone();
                c.num_layers = layers;
                c.hidden_dim = d;
                c.num_heads = heads_for_width(d);
                c.ffn_dim = 4 * d;
                c
            })
            .filter(|c| budget.admits(c))
            .max_by_key(|c| c.hidden_dim);
        out.extend(best);
    }
    out
}

/// Widths `lo, lo+step, …, ≤ hi`.
pub fn width_range(lo: usize, hi: usize, step: usize) -> Vec<usize> {
    (lo..=hi).step_by(step.max(1)).collect()
}
