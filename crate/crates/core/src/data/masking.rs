use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{is_special, FIRST_CONTENT_ID, MASK_ID};

pub const MASK_PROBABILITY: f64 = 0.15;

/// Masked-LM input: corrupted ids and the original id at each selected position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    pub ids: Vec<u32>,
    /// `Some(original)` where a prediction is required, `None` elsewhere.
    pub targets: Vec<Option<u32>>,
}

impl MaskedSequence {
    pub fn num_targets(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

pub fn mask_tokens(ids: &[u32], vocab_size: usize, seed: u64) -> MaskedSequence {
    mask_tokens_with(ids, vocab_size, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Selects each ordinary token with probability 0.15; a selected token becomes
/// `[MASK]` 80% of the time, a random ordinary token 10%, and stays 10%.
/// Special tokens are never selected.
pub fn mask_tokens_with(ids: &[u32], vocab_size: usize, rng: &mut impl Rng) -> MaskedSequence {
    let mut out = ids.to_vec();
    let mut targets = vec![None; ids.len()];
    for (i, &id) in ids.iter().enumerate() {
        if is_special(id) || !rng.gen_bool(MASK_PROBABILITY) {
            continue;
        }
        targets[i] = Some(id);
        let roll: f64 = rng.gen();
        out[i] = if roll < 0.8 {
            MASK_ID
        } else if roll < 0.9 {
            rng.gen_range(FIRST_CONTENT_ID..vocab_size as u32)
        } else {
            id
        };
    }
    MaskedSequence { ids: out, targets }
}
