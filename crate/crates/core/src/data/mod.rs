//! Deterministic desk-scale tasks, a toy tokenizer, masking and metrics.

mod masking;
mod metrics;
mod tasks;

pub use masking::{mask_tokens, mask_tokens_with, MaskedSequence, MASK_PROBABILITY};
pub use metrics::{accuracy, pearson};
pub use tasks::{generate_task, read_records, write_records, Task, TaskKind, TaskName, TaskSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
/// First id available to ordinary tokens.
pub const FIRST_CONTENT_ID: u32 = 4;

pub const DEFAULT_VOCAB_SIZE: usize = 64;
pub const DEFAULT_MAX_SEQ_LEN: usize = 32;

pub fn is_special(id: u32) -> bool {
    id < FIRST_CONTENT_ID
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Value(f64),
    /// Unlabeled text (language-model corpora).
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizedExample {
    pub ids: Vec<u32>,
    pub label: Label,
}

/// Whitespace tokenizer over a synthetic vocabulary: `[PAD] [CLS] [SEP]
/// [MASK]` followed by `w4 … w{size-1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size <= FIRST_CONTENT_ID as usize {
            return Err(Error::Config(format!(
                "vocabulary of size {size} leaves no room for ordinary tokens"
            )));
        }
        Ok(Vocab { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn token(&self, id: u32) -> Option<String> {
        match id {
            PAD_ID => Some("[PAD]".into()),
            CLS_ID => Some("[CLS]".into()),
            SEP_ID => Some("[SEP]".into()),
            MASK_ID => Some("[MASK]".into()),
            id if (id as usize) < self.size => Some(format!("w{id}")),
            _ => None,
        }
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        match token {
            "[PAD]" => Some(PAD_ID),
            "[CLS]" => Some(CLS_ID),
            "[SEP]" => Some(SEP_ID),
            "[MASK]" => Some(MASK_ID),
            t => {
                let id: u32 = t.strip_prefix('w')?.parse().ok()?;
                (id >= FIRST_CONTENT_ID && (id as usize) < self.size).then_some(id)
            }
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|t| self.id(t).ok_or_else(|| Error::Input(format!("unknown token {t:?}"))))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let tokens: Result<Vec<String>> = ids
            .iter()
            .map(|&id| {
                self.token(id)
                    .ok_or_else(|| Error::Input(format!("id {id} out of vocabulary")))
            })
            .collect();
        Ok(tokens?.join(" "))
    }
}
