use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Activation;

/// Output head: `n`-way classification or a single regression scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LabelsRepr", into = "LabelsRepr")]
pub enum HeadKind {
    Classification(usize),
    Regression,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Classification(n) => n,
            HeadKind::Regression => 1,
        }
    }

    pub fn is_regression(self) -> bool {
        matches!(self, HeadKind::Regression)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadKind::Classification(n) => write!(f, "{n}"),
            HeadKind::Regression => f.write_str("regression"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LabelsRepr {
    Count(usize),
    Name(String),
}

impl TryFrom<LabelsRepr> for HeadKind {
    type Error = String;

    fn try_from(repr: LabelsRepr) -> std::result::Result<Self, String> {
        match repr {
            LabelsRepr::Count(0) => Err("num_labels must be positive".into()),
            LabelsRepr::Count(n) => Ok(HeadKind::Classification(n)),
            LabelsRepr::Name(s) if s == "regression" => Ok(HeadKind::Regression),
            LabelsRepr::Name(s) => Err(format!("num_labels must be a count or \"regression\", got {s:?}")),
        }
    }
}

impl From<HeadKind> for LabelsRepr {
    fn from(h: HeadKind) -> Self {
        match h {
            HeadKind::Classification(n) => LabelsRepr::Count(n),
            HeadKind::Regression => LabelsRepr::Name("regression".into()),
        }
    }
}

/// Architecture hyperparameters of a BERT-style encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_labels: HeadKind,
    pub activation: Activation,
    pub layer_norm_eps: f64,
    /// Drop probability used only when a forward pass is given an RNG.
    pub dropout: f64,
}

pub const BERT_VOCAB_SIZE: usize = 30522;

impl ModelConfig {
    /// Defaults: `ffn_dim = 4d`, BERT vocabulary, 512 positions, binary
    /// classification head, GELU.
    pub fn new(num_layers: usize, hidden_dim: usize, num_heads: usize) -> Self {
        ModelConfig {
            num_layers,
            hidden_dim,
            num_heads,
            ffn_dim: 4 * hidden_dim,
            vocab_size: BERT_VOCAB_SIZE,
            max_seq_len: 512,
            num_labels: HeadKind::Classification(2),
            activation: Activation::Gelu,
            layer_norm_eps: 1e-12,
            dropout: 0.0,
        }
    }

    pub fn with_vocab(mut self, vocab_size: usize, max_seq_len: usize) -> Self {
        self.vocab_size = vocab_size;
        self.max_seq_len = max_seq_len;
        self
    }

    pub fn with_labels(mut self, labels: HeadKind) -> Self {
        self.num_labels = labels;
        self
    }

    pub fn with_ffn(mut self, ffn_dim: usize) -> Self {
        self.ffn_dim = ffn_dim;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_layers == 0 {
            problems.push("num_layers must be at least 1".to_string());
        }
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.num_heads > 0 && !self.hidden_dim.is_multiple_of(self.num_heads) {
            problems.push(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.num_labels.outputs() == 0 {
            problems.push("num_labels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            problems.push("layer_norm_eps must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}
