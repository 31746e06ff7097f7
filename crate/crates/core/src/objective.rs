//! The combined distillation loss
//! `L = w·L_res + α·L_hard + Σ β·L_term`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{knowledge_loss, response_loss, BoundProjections, KnowledgeKind, LayerPair, RelationSource};
use crate::model::{FeatureTrace, ModelConfig};
use crate::tensor::{Tensor, Var};

/// Supervision for the hard-label term.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean cross-entropy for class targets, MSE for real-valued ones.
pub fn hard_label_loss<'t>(logits: Var<'t>, targets: &Targets) -> Result<Var<'t>> {
    let shape = logits.shape();
    let [b, c] = shape[..] else {
        return Err(Error::Input(format!("logits must be [B, C], got {shape:?}")));
    };
    if targets.len() != b {
        return Err(Error::Input(format!("{} targets for a batch of {b}", targets.len())));
    }
    let tape = logits.tape();
    match targets {
        Targets::Classes(classes) => {
            if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
                return Err(Error::Input(format!("class {bad} out of range for {c} outputs")));
            }
            let mut onehot = Tensor::zeros([b, c]);
            for (i, &k) in classes.iter().enumerate() {
                onehot.data_mut()[i * c + k] = 1.0;
            }
            logits
                .log_softmax(1.0)?
                .mul(tape.constant(onehot))?
                .sum()?
                .scale(-1.0 / b as f64)
        }
        Targets::Values(values) => {
            if c != 1 {
                return Err(Error::Input(format!("regression needs one output, got {c}")));
            }
            let y = tape.constant(Tensor::new([b, 1], values.clone())?);
            logits.sub(y)?.square()?.mean()
        }
    }
}

/// One weighted knowledge term on one layer pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub kind: KnowledgeKind,
    pub pair: LayerPair,
    pub weight: f64,
    #[serde(default)]
    pub source: RelationSource,
}

impl Term {
    pub fn new(kind: KnowledgeKind, pair: impl Into<LayerPair>, weight: f64) -> Self {
        Term {
            kind,
            pair: pair.into(),
            weight,
            source: RelationSource::SameLayer,
        }
    }

    pub fn with_source(mut self, source: RelationSource) -> Self {
        self.source = source;
        self
    }

    /// Column label, e.g. `hidden_mse_2_4`.
    pub fn label(&self) -> String {
        let prev = if self.source == RelationSource::PreviousLayer {
            "_prev"
        } else {
            ""
        };
        format!("{}{}_{}_{}", self.kind, prev, self.pair.student, self.pair.teacher)
    }

    fn check(&self, teacher: &ModelConfig, student: &ModelConfig) -> Vec<String> {
        let mut problems = Vec::new();
        let label = self.label();
        let LayerPair { student: s, teacher: t } = self.pair;
        if self.kind == KnowledgeKind::SoftTarget {
            problems.push(format!(
                "{label}: soft_target is the standing response loss, not a term"
            ));
            return problems;
        }
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            problems.push(format!(
                "{label}: weight must be finite and non-negative, got {}",
                self.weight
            ));
        }
        if s > student.num_layers || t > teacher.num_layers {
            problems.push(format!(
                "{label}: pair ({s}, {t}) outside student 0..={} / teacher 0..={}",
                student.num_layers, teacher.num_layers
            ));
        }
        if (s == 0) != (t == 0) {
            problems.push(format!("{label}: embeddings (layer 0) only match embeddings"));
        }
        let per_layer = matches!(
            self.kind,
            KnowledgeKind::AttentionMse
                | KnowledgeKind::AttentionCe
                | KnowledgeKind::QueryRelation
                | KnowledgeKind::KeyRelation
                | KnowledgeKind::ValueRelation
        );
        if per_layer && (s == 0 || t == 0) {
            problems.push(format!("{label}: {} has no embedding-level feature", self.kind));
        }
        if self.source == RelationSource::PreviousLayer {
            if !matches!(self.kind, KnowledgeKind::Mmd | KnowledgeKind::Gram) {
                problems.push(format!("{label}: previous-layer source applies to mmd and gram only"));
            } else if s == 0 || t == 0 {
                problems.push(format!("{label}: previous-layer source needs layers >= 1"));
            }
        }
        if self.kind.needs_equal_heads() && teacher.num_heads != student.num_heads {
            problems.push(format!(
                "{label}: needs equal head counts, teacher has {}, student {}",
                teacher.num_heads, student.num_heads
            ));
        }
        problems
    }
}

/// Validated loss configuration for one teacher/student pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillObjective {
    temperature: f64,
    hard_weight: f64,
    response_weight: f64,
    terms: Vec<Term>,
}

impl DistillObjective {
    /// Soft targets plus `hard_weight` times the hard-label loss.
    pub fn new(temperature: f64, hard_weight: f64) -> Result<Self> {
        let mut problems = Vec::new();
        if !(temperature > 0.0 && temperature.is_finite()) {
            problems.push(format!("temperature must be positive, got {temperature}"));
        }
        if !(hard_weight >= 0.0 && hard_weight.is_finite()) {
            problems.push(format!("hard-label weight must be non-negative, got {hard_weight}"));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        Ok(DistillObjective {
            temperature,
            hard_weight,
            response_weight: 1.0,
            terms: Vec::new(),
        })
    }

    /// Hard labels only: no teacher signal at all.
    pub fn supervised() -> Self {
        DistillObjective {
            temperature: 1.0,
            hard_weight: 1.0,
            response_weight: 0.0,
            terms: Vec::new(),
        }
    }

    /// Coefficient on the soft-target loss (1 unless overridden).
    pub fn with_response_weight(mut self, weight: f64) -> Result<Self> {
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::Config(format!(
                "response weight must be non-negative, got {weight}"
            )));
        }
        self.response_weight = weight;
        Ok(self)
    }

    /// Adds knowledge terms, checking every one against both architectures.
    /// All problems are reported together.
    pub fn with_terms(
        mut self,
        terms: impl IntoIterator<Item = Term>,
        teacher: &ModelConfig,
        student: &ModelConfig,
    ) -> Result<Self> {
        let terms: Vec<Term> = terms.into_iter().collect();
        let problems: Vec<String> = terms.iter().flat_map(|t| t.check(teacher, student)).collect();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        self.terms.extend(terms);
        Ok(self)
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn hard_weight(&self) -> f64 {
        self.hard_weight
    }

    pub fn response_weight(&self) -> f64 {
        self.response_weight
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Whether any part of the loss reads the teacher.
    pub fn uses_teacher(&self) -> bool {
        self.response_weight > 0.0 || self.terms.iter().any(|t| t.weight > 0.0)
    }

    /// Whether only teacher logits are needed.
    pub fn logits_only(&self) -> bool {
        self.terms.iter().all(|t| t.weight == 0.0)
    }

    /// Column names of [`LossBreakdown::values`], in order.
    pub fn component_names(&self) -> Vec<String> {
        let mut names = vec!["l_res".to_string(), "l_hard".to_string()];
        names.extend(self.terms.iter().map(Term::label));
        names
    }

    /// Same objective with every term weight multiplied by `factor`.
    pub fn scale_term_weights(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for t in &mut out.terms {
            t.weight *= factor;
        }
        out
    }
}

/// Weighted contribution of each loss component; they sum to `total`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub response: f64,
    pub hard: f64,
    pub terms: Vec<(String, f64)>,
}

impl LossBreakdown {
    /// `[response, hard, terms...]`, matching [`DistillObjective::component_names`].
    pub fn values(&self) -> Vec<f64> {
        let mut v = vec![self.response, self.hard];
        v.extend(self.terms.iter().map(|(_, x)| *x));
        v
    }

    pub fn component_sum(&self) -> f64 {
        self.values().iter().sum()
    }
}

/// Tags a non-finite failure with the loss component that produced it.
fn named<T>(result: Result<T>, component: &str) -> Result<T> {
    result.map_err(|e| match e {
        Error::NonFinite { .. } => Error::Divergence {
            step: 0,
            term: component.to_string(),
        },
        other => other,
    })
}

fn weighted<'t>(
    weight: f64,
    component: &str,
    loss: impl FnOnce() -> Result<Var<'t>>,
) -> Result<Option<(Var<'t>, f64)>> {
    if weight == 0.0 {
        return Ok(None);
    }
    let v = named(loss().and_then(|l| l.scale(weight)), component)?;
    let value = v.item();
    if !value.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            term: component.to_string(),
        });
    }
    Ok(Some((v, value)))
}

/// Evaluates the objective on matching teacher and student traces.
///
/// `teacher` may be `None` only when the objective never reads it.
/// Divergence errors carry step 0; the trainer fills in the real step.
pub fn total_loss<'t>(
    teacher: Option<&FeatureTrace<'t>>,
    student: &FeatureTrace<'t>,
    targets: &Targets,
    objective: &DistillObjective,
    bank: &mut BoundProjections<'_, 't>,
) -> Result<(Var<'t>, LossBreakdown)> {
    let need_teacher =
        || teacher.ok_or_else(|| Error::Contract("objective reads the teacher but no teacher trace was given".into()));
    let mut parts: Vec<Var<'t>> = Vec::new();
    let mut breakdown = LossBreakdown {
        total: 0.0,
        response: 0.0,
        hard: 0.0,
        terms: Vec::with_capacity(objective.terms.len()),
    };

    if objective.response_weight > 0.0 {
        let t = need_teacher()?;
        if let Some((v, x)) = weighted(objective.response_weight, "l_res", || {
            response_loss(t, student, objective.temperature)
        })? {
            parts.push(v);
            breakdown.response = x;
        }
    }
    if let Some((v, x)) = weighted(objective.hard_weight, "l_hard", || {
        hard_label_loss(student.logits, targets)
    })? {
        parts.push(v);
        breakdown.hard = x;
    }
    for term in &objective.terms {
        let label = term.label();
        let mut value = 0.0;
        if term.weight > 0.0 {
            let t = need_teacher()?;
            if let Some((v, x)) = weighted(term.weight, &label, || {
                knowledge_loss(term.kind, t, student, term.pair, bank, term.source)
            })? {
                parts.push(v);
                value = x;
            }
        }
        breakdown.terms.push((label, value));
    }

    let tape = student.logits.tape();
    let mut total = match parts.first() {
        Some(first) => *first,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    for p in parts.iter().skip(1) {
        total = total.add(*p)?;
    }
    breakdown.total = total.item();
    Ok((total, breakdown))
}
