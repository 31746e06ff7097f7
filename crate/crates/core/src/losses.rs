//! Response-, feature- and relation-based knowledge losses between a teacher
//! trace and a student trace.
//!
//! Every loss is mean-reduced over batch, tokens and rows. Teacher features
//! are detached before use, so no gradient ever reaches teacher parameters.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureTrace;
use crate::tensor::{Tape, Tensor, Var};

/// Clamp inside logarithms of probabilities.
pub const LOG_EPS: f64 = 1e-12;
/// Added (squared) under vector norms.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeKind {
    SoftTarget,
    AttentionMse,
    AttentionCe,
    HiddenMse,
    Cos,
    Pkd,
    Mmd,
    Gram,
    QueryRelation,
    KeyRelation,
    ValueRelation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KnowledgeCategory {
    Response,
    Feature,
    Relation,
}

/// Which parts of a trace a loss reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceField {
    Logits,
    Attention,
    Hidden,
    Query,
    Key,
    Value,
}

impl KnowledgeKind {
    pub const ALL: [KnowledgeKind; 11] = [
        KnowledgeKind::SoftTarget,
        KnowledgeKind::AttentionMse,
        KnowledgeKind::AttentionCe,
        KnowledgeKind::HiddenMse,
        KnowledgeKind::Cos,
        KnowledgeKind::Pkd,
        KnowledgeKind::Mmd,
        KnowledgeKind::Gram,
        KnowledgeKind::QueryRelation,
        KnowledgeKind::KeyRelation,
        KnowledgeKind::ValueRelation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KnowledgeKind::SoftTarget => "soft_target",
            KnowledgeKind::AttentionMse => "attention_mse",
            KnowledgeKind::AttentionCe => "attention_ce",
            KnowledgeKind::HiddenMse => "hidden_mse",
            KnowledgeKind::Cos => "cos",
            KnowledgeKind::Pkd => "pkd",
            KnowledgeKind::Mmd => "mmd",
            KnowledgeKind::Gram => "gram",
            KnowledgeKind::QueryRelation => "query_relation",
            KnowledgeKind::KeyRelation => "key_relation",
            KnowledgeKind::ValueRelation => "value_relation",
        }
    }

    pub fn category(self) -> KnowledgeCategory {
        use KnowledgeKind::*;
        match self {
            SoftTarget => KnowledgeCategory::Response,
            AttentionMse | AttentionCe | HiddenMse | Cos | Pkd => KnowledgeCategory::Feature,
            Mmd | Gram | QueryRelation | KeyRelation | ValueRelation => KnowledgeCategory::Relation,
        }
    }

    pub fn reads(self) -> TraceField {
        use KnowledgeKind::*;
        match self {
            SoftTarget => TraceField::Logits,
            AttentionMse | AttentionCe => TraceField::Attention,
            HiddenMse | Cos | Pkd | Mmd | Gram => TraceField::Hidden,
            QueryRelation => TraceField::Query,
            KeyRelation => TraceField::Key,
            ValueRelation => TraceField::Value,
        }
    }

    /// Whether the loss maps teacher hidden states through a projection.
    pub fn needs_projection(self) -> bool {
        use KnowledgeKind::*;
        matches!(self, HiddenMse | Cos | Pkd | Gram)
    }

    /// Whether the loss requires equal head counts in both models.
    pub fn needs_equal_heads(self) -> bool {
        self.reads() == TraceField::Query || self.reads() == TraceField::Key || self.reads() == TraceField::Value
    }

    /// Whether self-matching gives zero (otherwise it gives teacher entropy).
    pub fn zero_at_self(self) -> bool {
        !matches!(self, KnowledgeKind::SoftTarget | KnowledgeKind::AttentionCe)
    }
}

impl fmt::Display for KnowledgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KnowledgeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KnowledgeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown knowledge kind {s:?}")))
    }
}

/// A matched `(student, teacher)` layer pair; 0 addresses the embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerPair {
    pub student: usize,
    pub teacher: usize,
}

impl LayerPair {
    pub fn new(student: usize, teacher: usize) -> Self {
        LayerPair { student, teacher }
    }
}

impl From<(usize, usize)> for LayerPair {
    fn from((student, teacher): (usize, usize)) -> Self {
        LayerPair { student, teacher }
    }
}

/// Which two hidden states feed the mmd/gram similarity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationSource {
    /// Both sides use the matched layer (`H₁ = H₂ = H_l`).
    #[default]
    SameLayer,
    /// `H₁ = H_{l-1}`, `H₂ = H_l`.
    PreviousLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProjectionInit {
    /// Rectangular identity.
    Identity,
    /// Gaussian entries; each pair derives its own stream from `seed`.
    Random { seed: u64, std: f64 },
}

/// Trainable `d_T × d_S` projections, one per matched layer pair, created on
/// first use.
#[derive(Clone, Debug)]
pub struct ProjectionBank {
    teacher_dim: usize,
    student_dim: usize,
    init: ProjectionInit,
    weights: IndexMap<LayerPair, Tensor>,
}

impl ProjectionBank {
    pub fn new(teacher_dim: usize, student_dim: usize, init: ProjectionInit) -> Self {
        ProjectionBank {
            teacher_dim,
            student_dim,
            init,
            weights: IndexMap::new(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.teacher_dim, self.student_dim)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn get(&self, pair: LayerPair) -> Option<&Tensor> {
        self.weights.get(&pair)
    }

    pub fn weights(&self) -> &IndexMap<LayerPair, Tensor> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> impl Iterator<Item = (&LayerPair, &mut Tensor)> {
        self.weights.iter_mut()
    }

    pub fn param_name(pair: LayerPair) -> String {
        format!("projection.{}.{}", pair.student, pair.teacher)
    }

    pub fn weight_or_init(&mut self, pair: LayerPair) -> &mut Tensor {
        let (dt, ds, init) = (self.teacher_dim, self.student_dim, self.init);
        self.weights.entry(pair).or_insert_with(|| match init {
            ProjectionInit::Identity => Tensor::eye(dt, ds),
            ProjectionInit::Random { seed, std } => {
                let stream =
                    seed ^ ((pair.student as u64) << 32 | pair.teacher as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                let mut rng = ChaCha8Rng::seed_from_u64(stream);
                let normal = Normal::new(0.0, std.max(0.0)).expect("finite std");
                Tensor::from_fn([dt, ds], |_| normal.sample(&mut rng))
            }
        })
    }

    /// Exposes the projections on `tape` for one step.
    pub fn bind<'b, 't>(&'b mut self, tape: &'t Tape, trainable: bool) -> BoundProjections<'b, 't> {
        BoundProjections {
            bank: self,
            tape,
            trainable,
            vars: HashMap::new(),
        }
    }
}

pub struct BoundProjections<'b, 't> {
    bank: &'b mut ProjectionBank,
    tape: &'t Tape,
    trainable: bool,
    vars: HashMap<LayerPair, Var<'t>>,
}

impl<'t> BoundProjections<'_, 't> {
    pub fn weight(&mut self, pair: LayerPair) -> Var<'t> {
        if let Some(v) = self.vars.get(&pair) {
            return *v;
        }
        let value = self.bank.weight_or_init(pair).clone();
        let v = self.tape.leaf(value, self.trainable);
        self.vars.insert(pair, v);
        v
    }

    /// Uses `weight` for `pair` on this tape instead of the stored tensor.
    pub fn set(&mut self, pair: LayerPair, weight: Var<'t>) -> Result<()> {
        let (dt, ds) = self.bank.dims();
        if weight.shape() != [dt, ds] {
            return Err(Error::dim("projection", &weight.shape(), &[dt, ds]));
        }
        self.vars.insert(pair, weight);
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        self.bank.dims()
    }

    /// Gradients for the projections used on this tape.
    pub fn grads(&self) -> Vec<(LayerPair, Tensor)> {
        let mut out: Vec<_> = self
            .vars
            .iter()
            .map(|(p, v)| (*p, v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()))))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

fn check_same_tokens(teacher: &Var<'_>, student: &Var<'_>) -> Result<()> {
    let (t, s) = (teacher.shape(), student.shape());
    if t.len() < 2 || s.len() < 2 || t[0] != s[0] || t[t.len() - 2] != s[s.len() - 2] {
        return Err(Error::Input(format!(
            "teacher features {t:?} and student features {s:?} cover different batches or sequence lengths"
        )));
    }
    Ok(())
}

fn mse<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    if a.shape() != b.shape() {
        return Err(Error::dim("mse", &a.shape(), &b.shape()));
    }
    a.sub(b)?.square()?.mean()
}

/// Number of rows in the last-axis distributions of `x`.
fn rows(x: &Var<'_>) -> f64 {
    let s = x.shape();
    (s.iter().product::<usize>() / s.last().copied().unwrap_or(1)) as f64
}

/// `T² · CE(softmax(z_t/T), softmax(z_s/T))`, averaged over the batch.
pub fn soft_target_loss<'t>(teacher_logits: Var<'t>, student_logits: Var<'t>, temperature: f64) -> Result<Var<'t>> {
    if teacher_logits.shape() != student_logits.shape() {
        return Err(Error::dim(
            "soft_target",
            &teacher_logits.shape(),
            &student_logits.shape(),
        ));
    }
    let targets = teacher_logits.detach().softmax(temperature)?;
    let log_probs = student_logits.log_softmax(temperature)?;
    let batch = rows(&student_logits);
    targets.mul(log_probs)?.sum()?.scale(-temperature * temperature / batch)
}

/// Response loss: soft targets for classification, logit MSE for regression.
pub fn response_loss<'t>(teacher: &FeatureTrace<'t>, student: &FeatureTrace<'t>, temperature: f64) -> Result<Var<'t>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if student.regression {
        mse(student.logits, teacher.logits.detach())
    } else {
        soft_target_loss(teacher.logits, student.logits, temperature)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionVariant {
    /// MSE between head-summed attention maps.
    Mse,
    /// Row-wise cross-entropy between head-averaged maps, teacher as target.
    Ce,
}

pub fn attention_feature_loss<'t>(
    teacher: &FeatureTrace<'t>,
    student: &FeatureTrace<'t>,
    pair: LayerPair,
    variant: AttentionVariant,
) -> Result<Var<'t>> {
    let at = teacher.attention(pair.teacher)?.detach();
    let as_ = student.attention(pair.student)?;
    check_same_tokens(&at, &as_)?;
    match variant {
        AttentionVariant::Mse => mse(as_.sum_axis(1)?, at.sum_axis(1)?),
        AttentionVariant::Ce => {
            let s = as_.mean_axis(1)?;
            let t = at.mean_axis(1)?;
            let n = rows(&s);
            t.mul(s.ln(LOG_EPS)?)?.sum()?.scale(-1.0 / n)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HiddenVariant {
    Mse,
    Cos,
    Pkd,
}

/// Per-token Euclidean norms `[.., n, 1]` of the last axis, eps-guarded.
fn token_norms<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let mut shape = x.shape();
    *shape.last_mut().expect("rank >= 1") = 1;
    x.square()?
        .sum_axis(x.shape().len() - 1)?
        .add_scalar(NORM_EPS * NORM_EPS)?
        .sqrt()?
        .reshape(&shape)
}

fn project<'t>(hidden: Var<'t>, bank: &mut BoundProjections<'_, 't>, pair: LayerPair) -> Result<Var<'t>> {
    let (dt, _) = bank.dims();
    let width = *hidden.shape().last().unwrap_or(&0);
    if width != dt {
        return Err(Error::Config(format!(
            "projection bank expects teacher width {dt}, trace has {width}"
        )));
    }
    hidden.matmul(bank.weight(pair))
}

/// Compares `H^S_l` with the projected teacher state `H^T_r · W_lr`.
pub fn hidden_feature_loss<'t>(
    teacher: &FeatureTrace<'t>,
    student: &FeatureTrace<'t>,
    pair: LayerPair,
    bank: &mut BoundProjections<'_, 't>,
    variant: HiddenVariant,
) -> Result<Var<'t>> {
    let hs = student.hidden(pair.student)?;
    let ht = teacher.hidden(pair.teacher)?.detach();
    check_same_tokens(&ht, &hs)?;
    let projected = project(ht, bank, pair)?;
    match variant {
        HiddenVariant::Mse => mse(hs, projected),
        HiddenVariant::Cos => {
            let dot = hs.mul(projected)?.sum_axis(2)?;
            let norms = token_norms(hs)?.mul(token_norms(projected)?)?;
            let cos = dot.div(norms.reshape(&dot.shape())?)?;
            cos.mean()?.neg()?.add_scalar(1.0)
        }
        HiddenVariant::Pkd => {
            let ns = hs.div(token_norms(hs)?)?;
            let nt = projected.div(token_norms(projected)?)?;
            mse(ns, nt)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelationVariant {
    /// Token-similarity matrices `H₁·H₂ᵀ`.
    Mmd,
    /// Feature Gram matrices `H₁ᵀ·H₂`, teacher side projected.
    Gram,
    Query,
    Key,
    Value,
}

fn hidden_pair<'t>(trace: &FeatureTrace<'t>, layer: usize, source: RelationSource) -> Result<(Var<'t>, Var<'t>)> {
    let h2 = trace.hidden(layer)?;
    let h1 = match source {
        RelationSource::SameLayer => h2,
        RelationSource::PreviousLayer => {
            if layer == 0 {
                return Err(Error::Config("previous-layer relation needs layer >= 1".into()));
            }
            trace.hidden(layer - 1)?
        }
    };
    Ok((h1, h2))
}

/// Per-head `softmax(X·Xᵀ/√d_k)` log-probabilities and probabilities.
fn self_relation<'t>(x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let dk = *x.shape().last().unwrap_or(&1) as f64;
    let scores = x.matmul(x.transpose()?)?.scale(1.0 / dk.sqrt())?;
    Ok((scores.log_softmax(1.0)?, scores.softmax(1.0)?))
}

pub fn relation_loss<'t>(
    teacher: &FeatureTrace<'t>,
    student: &FeatureTrace<'t>,
    pair: LayerPair,
    bank: &mut BoundProjections<'_, 't>,
    variant: RelationVariant,
    source: RelationSource,
) -> Result<Var<'t>> {
    match variant {
        RelationVariant::Mmd | RelationVariant::Gram => {
            let (t1, t2) = hidden_pair(teacher, pair.teacher, source)?;
            let (s1, s2) = hidden_pair(student, pair.student, source)?;
            let (t1, t2) = (t1.detach(), t2.detach());
            check_same_tokens(&t2, &s2)?;
            if variant == RelationVariant::Mmd {
                let gt = t1.matmul(t2.transpose()?)?;
                let gs = s1.matmul(s2.transpose()?)?;
                mse(gs, gt)
            } else {
                let p1 = project(t1, bank, pair)?;
                let p2 = if source == RelationSource::SameLayer {
                    p1
                } else {
                    project(t2, bank, pair)?
                };
                let gt = p1.transpose()?.matmul(p2)?;
                let gs = s1.transpose()?.matmul(s2)?;
                mse(gs, gt)
            }
        }
        RelationVariant::Query | RelationVariant::Key | RelationVariant::Value => {
            let pick = |trace: &FeatureTrace<'t>, layer| match variant {
                RelationVariant::Query => trace.query(layer),
                RelationVariant::Key => trace.key(layer),
                _ => trace.value(layer),
            };
            let xt = pick(teacher, pair.teacher)?.detach();
            let xs = pick(student, pair.student)?;
            let (ht, hs) = (xt.shape()[1], xs.shape()[1]);
            if ht != hs {
                return Err(Error::Config(format!(
                    "relation loss needs equal head counts, teacher has {ht}, student {hs}"
                )));
            }
            check_same_tokens(&xt, &xs)?;
            let (log_t, prob_t) = self_relation(xt)?;
            let (log_s, _) = self_relation(xs)?;
            let n = rows(&log_s);
            prob_t.mul(log_t.sub(log_s)?)?.sum()?.scale(1.0 / n)
        }
    }
}

/// Evaluates any non-response knowledge kind for one layer pair.
pub fn knowledge_loss<'t>(
    kind: KnowledgeKind,
    teacher: &FeatureTrace<'t>,
    student: &FeatureTrace<'t>,
    pair: LayerPair,
    bank: &mut BoundProjections<'_, 't>,
    source: RelationSource,
) -> Result<Var<'t>> {
    use KnowledgeKind::*;
    match kind {
        SoftTarget => Err(Error::Config(
            "soft_target is the response loss, not a layer term".into(),
        )),
        AttentionMse => attention_feature_loss(teacher, student, pair, AttentionVariant::Mse),
        AttentionCe => attention_feature_loss(teacher, student, pair, AttentionVariant::Ce),
        HiddenMse => hidden_feature_loss(teacher, student, pair, bank, HiddenVariant::Mse),
        Cos => hidden_feature_loss(teacher, student, pair, bank, HiddenVariant::Cos),
        Pkd => hidden_feature_loss(teacher, student, pair, bank, HiddenVariant::Pkd),
        Mmd => relation_loss(teacher, student, pair, bank, RelationVariant::Mmd, source),
        Gram => relation_loss(teacher, student, pair, bank, RelationVariant::Gram, source),
        QueryRelation => relation_loss(teacher, student, pair, bank, RelationVariant::Query, source),
        KeyRelation => relation_loss(teacher, student, pair, bank, RelationVariant::Key, source),
        ValueRelation => relation_loss(teacher, student, pair, bank, RelationVariant::Value, source),
    }
}
