//! Fixtures shared by the benchmarks.

use kdlab::data::{generate_task, TaskSpec, TokenizedExample};
use kdlab::init::init_random;
use kdlab::{HeadKind, ModelConfig, Tensor, TransformerModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("valid shape")
}

/// Desk-scale encoder for the patterns task.
pub fn desk_model(layers: usize, hidden: usize, seed: u64) -> TransformerModel {
    let config = ModelConfig::new(layers, hidden, 2)
        .with_vocab(64, 32)
        .with_labels(HeadKind::Classification(4));
    let mut model = TransformerModel::new(config).expect("valid config");
    init_random(&mut model, seed, 0.02).expect("init");
    model
}

pub fn patterns_batch(batch: usize, seq_len: usize) -> Vec<TokenizedExample> {
    let spec = TaskSpec {
        train_size: batch,
        dev_size: 1,
        seq_len,
        ..TaskSpec::default()
    };
    generate_task(&spec).expect("valid task").train
}

pub fn ids(examples: &[TokenizedExample]) -> Vec<Vec<u32>> {
    examples.iter().map(|e| e.ids.clone()).collect()
}
