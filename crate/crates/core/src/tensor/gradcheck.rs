use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_difference_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over all entries.
///
/// `floor` keeps near-zero entries from dominating the ratio.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Worst relative error, over every input, between tape gradients and
/// central differences of `sum(op(inputs) ⊙ W)` for a fixed random `W`
/// drawn from `seed`.
pub fn check_gradients<F>(inputs: &[Tensor], op: F, step: f64, floor: f64, seed: u64) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let out_shape = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        op(&vars)?.shape()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Tensor::from_fn(out_shape, |_| rng.gen_range(-1.0..1.0));
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.param(t.clone())).collect();
        let w = tape.constant(weights.clone());
        Ok(op(&vars)?.mul(w)?.sum()?.item())
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = op(&vars)?.mul(tape.constant(weights.clone()))?.sum()?;
    tape.backward(loss)?;
    let mut worst = 0.0f64;
    let mut failure = None;
    for (i, v) in vars.iter().enumerate() {
        let analytic = v.grad().unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        let numeric = finite_difference_gradient(
            |x| {
                let mut xs = inputs.to_vec();
                xs[i] = x.clone();
                eval(&xs).unwrap_or_else(|e| {
                    failure.get_or_insert(e);
                    f64::NAN
                })
            },
            &inputs[i],
            step,
        );
        if let Some(e) = failure.take() {
            return Err(e);
        }
        worst = worst.max(max_relative_error(&analytic, &numeric, floor));
    }
    Ok(worst)
}
