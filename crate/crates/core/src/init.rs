//! Student initialization: random, masked-LM pre-training, general
//! distillation and weight pre-loading.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{mask_tokens_with, TokenizedExample};
use crate::error::{Error, Result};
use crate::losses::ProjectionBank;
use crate::matching::LayerPairPlan;
use crate::model::{
    forward, forward_with_dropout, is_bias, is_layer_norm_gain, layer_prefix, FeatureTrace, ModelConfig,
    TransformerModel, CLASSIFIER_BIAS, CLASSIFIER_WEIGHT, POOLER_BIAS, POOLER_WEIGHT, WORD_EMBEDDINGS,
};
use crate::objective::{total_loss, DistillObjective, Targets};
use crate::optim::{AdamW, AdamWConfig, LinearSchedule};
use crate::tensor::{Tape, Tensor, Var};
use crate::trainer::BatchOrder;

pub const DEFAULT_INIT_STD: f64 = 0.02;

/// Checkpoint entry holding the masked-LM decoder bias.
pub const MLM_BIAS: &str = "cls.predictions.bias";

/// Scheme names as written in configuration files.
pub const SCHEME_NAMES: [&str; 4] = ["random", "pretrain", "general_distillation", "preload"];

/// Truncation point in standard deviations. At 3σ the truncated variance is
/// 97.3% of `std²`.
pub const TRUNCATION: f64 = 3.0;

/// Draws from `N(0, std²)` truncated to `±TRUNCATION·std` by rejection.
pub fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    if std <= 0.0 {
        return 0.0;
    }
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= TRUNCATION {
            return z * std;
        }
    }
}

fn fill_truncated(t: &mut Tensor, rng: &mut impl Rng, std: f64) {
    for x in t.data_mut() {
        *x = truncated_normal(rng, std);
    }
}

fn reset(name: &str, t: &mut Tensor, rng: &mut impl Rng, std: f64) {
    if is_layer_norm_gain(name) {
        t.data_mut().fill(1.0);
    } else if is_bias(name) {
        t.data_mut().fill(0.0);
    } else {
        fill_truncated(t, rng, std);
    }
}

/// Truncated-normal weights, zero biases, unit layer-norm gains.
pub fn init_random(model: &mut TransformerModel, seed: u64, std: f64) -> Result<()> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::Parameter(format!("init std must be non-negative, got {std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in model.params_mut() {
        reset(name, t, &mut rng, std);
    }
    Ok(())
}

/// Decoder bias of the masked-LM head; the decoder matrix is tied to the
/// word embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmHead {
    pub bias: Tensor,
}

impl MlmHead {
    pub fn new(vocab_size: usize) -> Self {
        MlmHead {
            bias: Tensor::zeros([vocab_size]),
        }
    }

    /// Looks the bias up in checkpoint extras, defaulting to zeros.
    pub fn from_extras(extras: &IndexMap<String, Tensor>, vocab_size: usize) -> Result<Self> {
        match extras.get(MLM_BIAS) {
            None => Ok(MlmHead::new(vocab_size)),
            Some(t) if t.shape() == [vocab_size] => Ok(MlmHead { bias: t.clone() }),
            Some(t) => Err(Error::Format(format!(
                "{MLM_BIAS} has shape {:?}, expected [{vocab_size}]",
                t.shape()
            ))),
        }
    }

    pub fn to_extras(&self) -> IndexMap<String, Tensor> {
        IndexMap::from([(MLM_BIAS.to_string(), self.bias.clone())])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlmConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        MlmConfig {
            steps: 500,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            warmup_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlmReport {
    /// Total loss per step.
    pub losses: Vec<f64>,
    /// Loss on a fixed masked probe batch before and after training.
    pub start_loss: f64,
    pub end_loss: f64,
}

/// Vocabulary logits `[M, V]` at the flattened positions `rows` of the last
/// hidden state, through the tied decoder.
fn mlm_logits<'t>(
    trace: &FeatureTrace<'t>,
    word_embeddings: Var<'t>,
    bias: Var<'t>,
    rows: &[usize],
) -> Result<Var<'t>> {
    let hidden = trace.hidden(trace.num_layers())?;
    let s = hidden.shape();
    hidden
        .reshape(&[s[0] * s[1], s[2]])?
        .gather_rows(rows)?
        .matmul(word_embeddings.transpose()?)?
        .add(bias)
}

struct MaskedBatch {
    ids: Vec<Vec<u32>>,
    rows: Vec<usize>,
    targets: Vec<usize>,
}

fn mask_batch(examples: &[&TokenizedExample], vocab: usize, rng: &mut ChaCha8Rng) -> MaskedBatch {
    let n = examples.iter().map(|e| e.ids.len()).max().unwrap_or(0);
    loop {
        let mut out = MaskedBatch {
            ids: Vec::with_capacity(examples.len()),
            rows: Vec::new(),
            targets: Vec::new(),
        };
        for (b, e) in examples.iter().enumerate() {
            let m = mask_tokens_with(&e.ids, vocab, rng);
            for (pos, t) in m.targets.iter().enumerate() {
                if let Some(t) = t {
                    out.rows.push(b * n + pos);
                    out.targets.push(*t as usize);
                }
            }
            out.ids.push(m.ids);
        }
        if !out.targets.is_empty() {
            return out;
        }
    }
}

/// Masked-LM training on unlabeled `corpus`.
pub fn pretrain_mlm(
    student: &mut TransformerModel,
    head: &mut MlmHead,
    corpus: &[TokenizedExample],
    config: &MlmConfig,
) -> Result<MlmReport> {
    mlm_run(student, head, None, corpus, &DistillObjective::supervised(), config)
}

/// Masked-LM training plus distillation terms against `teacher`.
///
/// The soft-target loss is taken over vocabulary logits at masked positions;
/// the hard-label loss is the masked-LM cross-entropy.
pub fn general_distill(
    student: &mut TransformerModel,
    head: &mut MlmHead,
    teacher: &TransformerModel,
    teacher_head: &MlmHead,
    corpus: &[TokenizedExample],
    objective: &DistillObjective,
    config: &MlmConfig,
) -> Result<MlmReport> {
    if teacher.config().vocab_size != student.config().vocab_size {
        return Err(Error::Config("teacher and student vocabularies differ".into()));
    }
    mlm_run(student, head, Some((teacher, teacher_head)), corpus, objective, config)
}

fn mlm_run(
    student: &mut TransformerModel,
    head: &mut MlmHead,
    teacher: Option<(&TransformerModel, &MlmHead)>,
    corpus: &[TokenizedExample],
    objective: &DistillObjective,
    config: &MlmConfig,
) -> Result<MlmReport> {
    config.optimizer.validate()?;
    if config.batch_size == 0 || corpus.len() < config.batch_size {
        return Err(Error::Input(format!(
            "corpus of {} sequences is shorter than one batch of {}",
            corpus.len(),
            config.batch_size
        )));
    }
    let vocab = student.config().vocab_size;
    if head.bias.shape() != [vocab] {
        return Err(Error::Config("masked-LM head does not match the vocabulary".into()));
    }
    let teacher = if objective.uses_teacher() {
        Some(teacher.ok_or_else(|| Error::Contract("objective needs a teacher".into()))?)
    } else {
        None
    };
    let teacher_dim = teacher.map_or(student.config().hidden_dim, |(t, _)| t.config().hidden_dim);
    let mut bank = ProjectionBank::new(
        teacher_dim,
        student.config().hidden_dim,
        crate::losses::ProjectionInit::Identity,
    );

    let step_loss = |student: &TransformerModel,
                     head: &MlmHead,
                     bank: &mut ProjectionBank,
                     batch: &MaskedBatch,
                     rng: Option<&mut ChaCha8Rng>,
                     trainable: bool|
     -> Result<(f64, Vec<(String, Tensor)>)> {
        let tape = Tape::new();
        let s = student.bind(&tape, trainable);
        let s_bias = tape.leaf(head.bias.clone(), trainable);
        let mut s_trace = match rng {
            Some(rng) => forward_with_dropout(&s, &batch.ids, rng)?,
            None => forward(&s, &batch.ids)?,
        };
        s_trace.logits = mlm_logits(&s_trace, s.var(WORD_EMBEDDINGS), s_bias, &batch.rows)?;
        s_trace.regression = false;
        let t_trace = match teacher {
            Some((t, t_head)) => {
                let tb = t.bind(&tape, false);
                let mut trace = forward(&tb, &batch.ids)?;
                let bias = tape.constant(t_head.bias.clone());
                trace.logits = mlm_logits(&trace, tb.var(WORD_EMBEDDINGS), bias, &batch.rows)?;
                trace.regression = false;
                Some(trace)
            }
            None => None,
        };
        let targets = Targets::Classes(batch.targets.clone());
        let mut proj = bank.bind(&tape, trainable);
        let (loss, breakdown) = total_loss(t_trace.as_ref(), &s_trace, &targets, objective, &mut proj)?;
        if !trainable {
            return Ok((breakdown.total, Vec::new()));
        }
        tape.backward(loss)?;
        let mut grads: Vec<(String, Tensor)> = s.grads().into_iter().collect();
        grads.push((
            MLM_BIAS.to_string(),
            s_bias.grad().unwrap_or_else(|| Tensor::zeros([vocab])),
        ));
        grads.extend(
            proj.grads()
                .into_iter()
                .map(|(pair, g)| (ProjectionBank::param_name(pair), g)),
        );
        Ok((breakdown.total, grads))
    };

    let mut order = BatchOrder::new(corpus.len(), config.batch_size, config.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x6d6c6d));
    let probe = {
        let mut probe_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_sub(1));
        let examples: Vec<&TokenizedExample> = corpus[..config.batch_size].iter().collect();
        mask_batch(&examples, vocab, &mut probe_rng)
    };
    let start_loss = step_loss(student, head, &mut bank, &probe, None, false)?.0;
    let schedule = LinearSchedule::new(config.optimizer.lr, config.steps, config.warmup_fraction);
    let mut optimizer = AdamW::new(config.optimizer);
    let use_dropout = student.config().dropout > 0.0;
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let examples: Vec<&TokenizedExample> = order.next_batch().into_iter().map(|i| &corpus[i]).collect();
        let batch = mask_batch(&examples, vocab, &mut mask_rng);
        let mut dropout_rng = use_dropout.then(|| ChaCha8Rng::seed_from_u64(config.seed ^ ((step as u64 + 1) << 20)));
        let (loss, grads) =
            step_loss(student, head, &mut bank, &batch, dropout_rng.as_mut(), true).map_err(|e| match e {
                Error::Divergence { term, .. } => Error::Divergence { step: step + 1, term },
                other => other,
            })?;
        let lr = schedule.lr_at(step);
        optimizer.begin_step();
        for (name, grad) in grads {
            if name == MLM_BIAS {
                optimizer.update_with_lr(&name, &mut head.bias, &grad, lr)?;
            } else if let Some(p) = student.param_mut(&name) {
                optimizer.update_with_lr(&name, p, &grad, lr)?;
            } else if let Some((_, w)) = bank
                .weights_mut()
                .find(|(pair, _)| ProjectionBank::param_name(**pair) == name)
            {
                optimizer.update_with_lr(&name, w, &grad, lr)?;
            }
        }
        losses.push(loss);
    }
    let end_loss = step_loss(student, head, &mut bank, &probe, None, false)?.0;
    Ok(MlmReport {
        losses,
        start_loss,
        end_loss,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreloadOptions {
    /// Copy pooler and classifier too instead of re-initializing them.
    pub copy_heads: bool,
    pub head_seed: u64,
    pub head_std: f64,
}

impl Default for PreloadOptions {
    fn default() -> Self {
        PreloadOptions {
            copy_heads: false,
            head_seed: 0,
            head_std: DEFAULT_INIT_STD,
        }
    }
}

fn check_preload(student: &ModelConfig, teacher: &ModelConfig) -> Result<()> {
    let mut problems = Vec::new();
    let mut same = |what: &str, s: usize, t: usize| {
        if s != t {
            problems.push(format!("preload needs equal {what}: student {s}, teacher {t}"));
        }
    };
    same("hidden size", student.hidden_dim, teacher.hidden_dim);
    same("head count", student.num_heads, teacher.num_heads);
    same("ffn size", student.ffn_dim, teacher.ffn_dim);
    same("vocabulary", student.vocab_size, teacher.vocab_size);
    same("max sequence length", student.max_seq_len, teacher.max_seq_len);
    if student.activation != teacher.activation || student.layer_norm_eps != teacher.layer_norm_eps {
        log::warn!("preload: student and teacher differ in activation or layer-norm eps");
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems.join("; ")))
    }
}

/// Copies embeddings and, for every plan pair `(s, r)`, all of teacher
/// layer `r` into student layer `s`. The teacher is never modified.
pub fn preload(
    student: &mut TransformerModel,
    teacher: &TransformerModel,
    plan: &LayerPairPlan,
    options: &PreloadOptions,
) -> Result<()> {
    let (sc, tc) = (student.config().clone(), teacher.config().clone());
    check_preload(&sc, &tc)?;
    for &(s, r) in plan.pairs() {
        if s > sc.num_layers || r > tc.num_layers {
            return Err(Error::Config(format!("plan pair ({s}, {r}) outside the two models")));
        }
    }
    let copy_heads = options.copy_heads && sc.num_labels == tc.num_labels;
    if options.copy_heads && !copy_heads {
        return Err(Error::Config("copy_heads needs identical output heads".into()));
    }
    let mut sources: Vec<(String, String)> = Vec::new();
    for name in student.params().keys() {
        if name.starts_with("embeddings.") {
            sources.push((name.clone(), name.clone()));
        }
    }
    for &(s, r) in plan.pairs() {
        if s == 0 {
            continue;
        }
        let (sp, tp) = (layer_prefix(s - 1), layer_prefix(r - 1));
        for name in student.params().keys() {
            if let Some(rest) = name.strip_prefix(&sp) {
                sources.push((name.clone(), format!("{tp}{rest}")));
            }
        }
    }
    for (dst, src) in sources {
        let value = teacher
            .param(&src)
            .ok_or_else(|| Error::Config(format!("teacher has no parameter {src}")))?
            .clone();
        *student.param_mut(&dst).expect("name taken from the student") = value;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.head_seed);
    for name in [POOLER_WEIGHT, POOLER_BIAS, CLASSIFIER_WEIGHT, CLASSIFIER_BIAS] {
        let dst = student.param_mut(name).expect("head parameter");
        if copy_heads {
            *dst = teacher.param(name).expect("head parameter").clone();
        } else {
            reset(name, dst, &mut rng, options.head_std);
        }
    }
    Ok(())
}
