//! Layer matching strategies between a deep teacher and a shallower student.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// The first `k` layers of each model, in order.
    #[serde(rename = "first")]
    FirstK,
    /// The last `k` layers of each model, in order.
    #[serde(rename = "last")]
    LastK,
    /// Every student layer, spread evenly over the teacher.
    #[serde(rename = "dilatation")]
    Dilatation,
    #[serde(rename = "first_1")]
    First1,
    #[serde(rename = "last_1")]
    Last1,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::FirstK,
        Strategy::LastK,
        Strategy::Dilatation,
        Strategy::First1,
        Strategy::Last1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FirstK => "first",
            Strategy::LastK => "last",
            Strategy::Dilatation => "dilatation",
            Strategy::First1 => "first_1",
            Strategy::Last1 => "last_1",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown matching strategy {s:?}")))
    }
}

/// `(student_layer, teacher_layer)` pairs, 1-based. Layer 0 (embeddings)
/// appears only when requested explicitly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPairPlan {
    pairs: Vec<(usize, usize)>,
}

impl LayerPairPlan {
    /// Checks monotonicity and range before accepting explicit pairs.
    pub fn new(pairs: Vec<(usize, usize)>, student_layers: usize, teacher_layers: usize) -> Result<Self> {
        for w in pairs.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 <= w[0].1 {
                return Err(Error::Config(format!(
                    "layer pairs {pairs:?} are not strictly increasing"
                )));
            }
        }
        if let Some(p) = pairs
            .iter()
            .find(|&&(s, r)| s > student_layers || r > teacher_layers || (s == 0) != (r == 0))
        {
            return Err(Error::Config(format!(
                "layer pair {p:?} out of range for student depth {student_layers}, teacher depth {teacher_layers}"
            )));
        }
        Ok(LayerPairPlan { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Prepends the embedding pair `(0, 0)`.
    pub fn with_embeddings(mut self) -> Self {
        if self.pairs.first() != Some(&(0, 0)) {
            self.pairs.insert(0, (0, 0));
        }
        self
    }
}

/// Pairs student layers with teacher layers. `k` is used only by
/// `FirstK`/`LastK`; dilatation maps student layer `i` to teacher layer
/// `ceil(i * L_T / L_S)`.
pub fn build_plan(teacher_layers: usize, student_layers: usize, strategy: Strategy, k: usize) -> Result<LayerPairPlan> {
    if student_layers == 0 || student_layers > teacher_layers {
        return Err(Error::Config(format!(
            "need 1 <= student layers ({student_layers}) <= teacher layers ({teacher_layers})"
        )));
    }
    if matches!(strategy, Strategy::FirstK | Strategy::LastK) && (k == 0 || k > student_layers) {
        return Err(Error::Config(format!(
            "k = {k} must lie in 1..={student_layers} for strategy {strategy}"
        )));
    }
    let (lt, ls) = (teacher_layers, student_layers);
    let pairs = match strategy {
        Strategy::FirstK => (1..=k).map(|i| (i, i)).collect(),
        Strategy::LastK => (1..=k).map(|i| (ls - k + i, lt - k + i)).collect(),
        Strategy::Dilatation => (1..=ls).map(|i| (i, (i * lt).div_ceil(ls))).collect(),
        Strategy::First1 => vec![(1, 1)],
        Strategy::Last1 => vec![(ls, lt)],
    };
    LayerPairPlan::new(pairs, ls, lt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(lt: usize, ls: usize, s: Strategy, k: usize) -> Vec<(usize, usize)> {
        build_plan(lt, ls, s, k).unwrap().pairs().to_vec()
    }

    #[test]
    fn four_to_two_scenario() {
        assert_eq!(pairs(4, 2, Strategy::FirstK, 2), vec![(1, 1), (2, 2)]);
        assert_eq!(pairs(4, 2, Strategy::LastK, 2), vec![(1, 3), (2, 4)]);
        assert_eq!(pairs(4, 2, Strategy::Dilatation, 2), vec![(1, 2), (2, 4)]);
    }

    #[test]
    fn twelve_to_four_dilatation() {
        assert_eq!(
            pairs(12, 4, Strategy::Dilatation, 4),
            vec![(1, 3), (2, 6), (3, 9), (4, 12)]
        );
    }

    #[test]
    fn equal_depth_is_identity() {
        for l in 1..=6 {
            let id: Vec<_> = (1..=l).map(|i| (i, i)).collect();
            for s in [Strategy::FirstK, Strategy::LastK, Strategy::Dilatation] {
                assert_eq!(pairs(l, l, s, l), id);
            }
        }
    }

    #[test]
    fn configuration_errors() {
        assert!(build_plan(4, 2, Strategy::FirstK, 3).is_err());
        assert!(build_plan(2, 4, Strategy::Dilatation, 1).is_err());
        assert!(build_plan(4, 0, Strategy::First1, 1).is_err());
    }

    #[test]
    fn names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("middle".parse::<Strategy>().is_err());
    }

    #[test]
    fn embeddings_only_on_request() {
        let p = build_plan(4, 2, Strategy::FirstK, 2).unwrap();
        assert!(p.pairs().iter().all(|&(s, _)| s > 0));
        assert_eq!(p.with_embeddings().pairs(), &[(0, 0), (1, 1), (2, 2)]);
    }
}
