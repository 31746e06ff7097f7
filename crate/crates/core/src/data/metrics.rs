use crate::error::{Error, Result};

/// Fraction of positions where prediction equals label.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Input(format!(
            "accuracy needs equal non-empty inputs, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Sample Pearson correlation. Returns 0 (with a warning) when either input
/// has zero variance.
pub fn pearson(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() || preds.len() < 2 {
        return Err(Error::Input(format!(
            "pearson needs two equal inputs of length >= 2, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let n = preds.len() as f64;
    let mx = preds.iter().sum::<f64>() / n;
    let my = labels.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in preds.iter().zip(labels) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        log::warn!("pearson: zero-variance input, reporting 0");
        return Ok(0.0);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        assert_eq!(accuracy(&[1, 0, 2], &[1, 0, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 1, 2, 0], &[1, 0, 2, 2]).unwrap(), 0.5);
        assert!((pearson(&[1.0, 2.0, 5.0], &[1.0, 2.0, 5.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn anti_correlated() {
        let labels = [-1.5, 0.5, 1.0];
        let preds: Vec<f64> = labels.iter().map(|x| -x).collect();
        assert!((pearson(&preds, &labels).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn hand_example() {
        // means 2 and 7/3; sxy = 3, sxx = 2, syy = 14/3
        let expected = 3.0 / (2.0f64 * 14.0 / 3.0).sqrt();
        let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - expected).abs() < 1e-15);
        assert!((r - 0.98198).abs() < 1e-5);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn pearson_affine_invariant(
            xs in prop::collection::vec(-10.0f64..10.0, 3..20),
            slope in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x.sin() + i as f64 * 0.3).collect();
            let base = pearson(&xs, &ys).unwrap();
            let moved: Vec<f64> = xs.iter().map(|x| slope * x + shift).collect();
            prop_assume!(base != 0.0);
            prop_assert!((pearson(&moved, &ys).unwrap() - base).abs() < 1e-12);
            let moved_y: Vec<f64> = ys.iter().map(|y| slope * y - shift).collect();
            prop_assert!((pearson(&xs, &moved_y).unwrap() - base).abs() < 1e-12);
        }
    }
}
