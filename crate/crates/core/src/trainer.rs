//! Mini-batch training of a student against a frozen teacher.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{accuracy, pearson, Label, TokenizedExample};
use crate::error::{Error, Result};
use crate::losses::{ProjectionBank, ProjectionInit};
use crate::model::{forward, forward_with_dropout, FeatureTrace, ModelConfig, TransformerModel};
use crate::objective::{total_loss, DistillObjective, LossBreakdown, Targets};
use crate::optim::{AdamW, AdamWConfig, LinearSchedule};
use crate::tensor::{Tape, Tensor};

/// Temperatures of the default response-loss grid.
pub const GRID_TEMPERATURES: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
/// Hard-label weights of the default response-loss grid.
pub const GRID_HARD_WEIGHTS: [f64; 6] = [0.1, 0.2, 0.5, 1.0, 2.0, 5.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Evaluate on dev every this many steps (0: only after the last step).
    pub eval_every: usize,
    pub projection_init: ProjectionInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            warmup_fraction: 0.1,
            seed: 0,
            eval_every: 0,
            projection_init: ProjectionInit::Identity,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            problems.push(format!(
                "warmup_fraction must lie in [0, 1], got {}",
                self.warmup_fraction
            ));
        }
        if let Err(Error::Config(msg)) = self.optimizer.validate() {
            problems.push(msg);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn schedule(&self) -> LinearSchedule {
        LinearSchedule::new(self.optimizer.lr, self.steps, self.warmup_fraction)
    }
}

/// Epoch-wise shuffled mini-batches of example indices.
#[derive(Clone, Debug)]
pub struct BatchOrder {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchOrder {
    pub fn new(len: usize, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        BatchOrder {
            order,
            pos: 0,
            batch: batch.min(len).max(1),
            rng,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch)
    }

    /// Next batch; a short final batch ends each epoch.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Hard-label targets for a batch, typed by the model head.
pub fn targets_for(config: &ModelConfig, examples: &[&TokenizedExample]) -> Result<Targets> {
    if config.num_labels.is_regression() {
        examples
            .iter()
            .map(|e| match e.label {
                Label::Value(v) => Ok(v),
                Label::Class(k) => Ok(k as f64),
                Label::None => Err(Error::Input("unlabeled example in a supervised batch".into())),
            })
            .collect::<Result<_>>()
            .map(Targets::Values)
    } else {
        examples
            .iter()
            .map(|e| match e.label {
                Label::Class(k) => Ok(k),
                _ => Err(Error::Input("classification needs class labels".into())),
            })
            .collect::<Result<_>>()
            .map(Targets::Classes)
    }
}

fn ids_of(examples: &[&TokenizedExample]) -> Vec<Vec<u32>> {
    examples.iter().map(|e| e.ids.clone()).collect()
}

/// Head outputs `[N, outputs]` for `examples`, computed in batches.
pub fn predict(model: &TransformerModel, examples: &[TokenizedExample], batch_size: usize) -> Result<Tensor> {
    if examples.is_empty() {
        return Err(Error::Input("nothing to predict".into()));
    }
    let outputs = model.config().num_labels.outputs();
    let mut data = Vec::with_capacity(examples.len() * outputs);
    for chunk in examples.chunks(batch_size.max(1)) {
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let batch: Vec<Vec<u32>> = chunk.iter().map(|e| e.ids.clone()).collect();
        let trace = forward(&bound, &batch)?;
        data.extend_from_slice(trace.logits.value().data());
    }
    Tensor::new([examples.len(), outputs], data)
}

/// Accuracy for classification heads, Pearson correlation for regression.
pub fn evaluate(model: &TransformerModel, examples: &[TokenizedExample], batch_size: usize) -> Result<f64> {
    let logits = predict(model, examples, batch_size)?;
    let all: Vec<&TokenizedExample> = examples.iter().collect();
    match targets_for(model.config(), &all)? {
        Targets::Values(values) => pearson(logits.data(), &values),
        Targets::Classes(labels) => {
            let c = logits.shape()[1];
            let preds: Vec<usize> = logits
                .data()
                .chunks(c)
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .fold(
                            (0, f64::NEG_INFINITY),
                            |best, (i, &x)| if x > best.1 { (i, x) } else { best },
                        )
                        .0
                })
                .collect();
            accuracy(&preds, &labels)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based step number.
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub eval_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_components: Vec<f64>,
    pub eval_metric: Option<f64>,
}

/// Everything a training run reports.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub component_names: Vec<String>,
    pub records: Vec<StepRecord>,
    pub steps_per_epoch: usize,
    /// Total loss on the fixed probe batch before the first update.
    pub start_loss: f64,
    /// Total loss on the same probe batch after the last update.
    pub end_loss: f64,
    pub final_metric: f64,
}

impl TrainReport {
    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["step".to_string(), "total".to_string()];
        h.extend(self.component_names.iter().cloned());
        h.push("eval_metric".to_string());
        h
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.records
            .iter()
            .map(|r| {
                let mut row = vec![r.step.to_string(), r.loss.total.to_string()];
                row.extend(r.loss.values().iter().map(f64::to_string));
                row.push(r.eval_metric.map(|m| m.to_string()).unwrap_or_default());
                row
            })
            .collect()
    }

    pub fn epochs(&self) -> Vec<EpochSummary> {
        self.records
            .chunks(self.steps_per_epoch.max(1))
            .enumerate()
            .map(|(i, chunk)| {
                let n = chunk.len() as f64;
                let width = self.component_names.len();
                let mut comps = vec![0.0; width];
                for r in chunk {
                    for (c, v) in comps.iter_mut().zip(r.loss.values()) {
                        *c += v / n;
                    }
                }
                EpochSummary {
                    epoch: i + 1,
                    mean_total: chunk.iter().map(|r| r.loss.total).sum::<f64>() / n,
                    mean_components: comps,
                    eval_metric: chunk.iter().rev().find_map(|r| r.eval_metric),
                }
            })
            .collect()
    }
}

/// A trained student plus the projections learned alongside it.
#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub report: TrainReport,
    /// Discarded from student checkpoints; kept for inspection.
    pub projections: ProjectionBank,
}

/// Teacher logits per example, for objectives that read nothing else.
struct LogitCache {
    rows: Vec<Vec<f64>>,
}

impl LogitCache {
    fn build(teacher: &TransformerModel, examples: &[TokenizedExample], batch: usize) -> Result<Self> {
        let logits = predict(teacher, examples, batch)?;
        let c = logits.shape()[1];
        Ok(LogitCache {
            rows: logits.data().chunks(c).map(<[f64]>::to_vec).collect(),
        })
    }

    fn trace<'t>(&self, tape: &'t Tape, indices: &[usize], regression: bool) -> Result<FeatureTrace<'t>> {
        let c = self.rows[0].len();
        let data = indices.iter().flat_map(|&i| self.rows[i].iter().copied()).collect();
        let logits = tape.constant(Tensor::new([indices.len(), c], data)?);
        Ok(FeatureTrace {
            embeddings: logits,
            layers: Vec::new(),
            pooled: logits,
            logits,
            regression,
        })
    }
}

fn check_pair(teacher: &ModelConfig, student: &ModelConfig) -> Result<()> {
    let mut problems = Vec::new();
    if teacher.vocab_size != student.vocab_size {
        problems.push(format!(
            "teacher vocabulary {} differs from student vocabulary {}",
            teacher.vocab_size, student.vocab_size
        ));
    }
    if teacher.num_labels != student.num_labels {
        problems.push(format!(
            "teacher head {} differs from student head {}",
            teacher.num_labels, student.num_labels
        ));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems.join("; ")))
    }
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Divergence { term, .. } => Error::Divergence { step, term },
        Error::NonFinite { op } => Error::Divergence {
            step,
            term: format!("forward ({op})"),
        },
        other => other,
    }
}

type NamedGrads = Vec<(String, Tensor)>;

/// Trains `student` on `train` under `objective`, with `teacher` frozen.
///
/// Deterministic in `config.seed`. Projections (one per matched pair that
/// needs one) are trained with the same optimizer and returned separately.
pub fn distill(
    teacher: &TransformerModel,
    student: &mut TransformerModel,
    train: &[TokenizedExample],
    dev: &[TokenizedExample],
    objective: &DistillObjective,
    config: &TrainConfig,
) -> Result<DistillOutcome> {
    check_pair(teacher.config(), student.config())?;
    run(Some(teacher), student, train, dev, objective, config)
}

/// Hard-label training with no teacher; used for teachers and baselines.
pub fn train_supervised(
    model: &mut TransformerModel,
    train: &[TokenizedExample],
    dev: &[TokenizedExample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    run(None, model, train, dev, &DistillObjective::supervised(), config).map(|o| o.report)
}

fn run(
    teacher: Option<&TransformerModel>,
    student: &mut TransformerModel,
    train: &[TokenizedExample],
    dev: &[TokenizedExample],
    objective: &DistillObjective,
    config: &TrainConfig,
) -> Result<DistillOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if dev.is_empty() {
        return Err(Error::Input("empty dev set".into()));
    }
    let teacher = if objective.uses_teacher() {
        Some(teacher.ok_or_else(|| Error::Contract("objective needs a teacher".into()))?)
    } else {
        None
    };
    let teacher_dim = teacher.map_or(student.config().hidden_dim, |t| t.config().hidden_dim);
    let mut bank = ProjectionBank::new(teacher_dim, student.config().hidden_dim, config.projection_init);
    let cache = match teacher {
        Some(t) if objective.logits_only() => Some(LogitCache::build(t, train, config.batch_size)?),
        _ => None,
    };
    let regression = student.config().num_labels.is_regression();
    let eval_batch = config.batch_size.max(64);

    let mut order = BatchOrder::new(train.len(), config.batch_size, config.seed);
    let probe: Vec<usize> = (0..order.batch_size()).collect();
    let schedule = config.schedule();
    let mut optimizer = AdamW::new(config.optimizer);
    let use_dropout = student.config().dropout > 0.0;

    let step_loss = |student: &TransformerModel,
                     bank: &mut ProjectionBank,
                     indices: &[usize],
                     rng: Option<&mut ChaCha8Rng>,
                     trainable: bool|
     -> Result<(LossBreakdown, Option<NamedGrads>)> {
        let examples: Vec<&TokenizedExample> = indices.iter().map(|&i| &train[i]).collect();
        let batch = ids_of(&examples);
        let targets = targets_for(student.config(), &examples)?;
        let tape = Tape::new();
        let s = student.bind(&tape, trainable);
        let s_trace = match rng {
            Some(rng) => forward_with_dropout(&s, &batch, rng)?,
            None => forward(&s, &batch)?,
        };
        let t_trace = match (&cache, teacher) {
            (Some(cache), _) => Some(cache.trace(&tape, indices, regression)?),
            (None, Some(t)) => Some(forward(&t.bind(&tape, false), &batch)?),
            (None, None) => None,
        };
        let mut projections = bank.bind(&tape, trainable);
        let (loss, breakdown) = total_loss(t_trace.as_ref(), &s_trace, &targets, objective, &mut projections)?;
        if !trainable {
            return Ok((breakdown, None));
        }
        tape.backward(loss)?;
        let mut grads: Vec<(String, Tensor)> = s.grads().into_iter().collect();
        grads.extend(
            projections
                .grads()
                .into_iter()
                .map(|(pair, g)| (ProjectionBank::param_name(pair), g)),
        );
        Ok((breakdown, Some(grads)))
    };

    let start_loss = step_loss(student, &mut bank, &probe, None, false)
        .map_err(|e| at_step(e, 0))?
        .0
        .total;
    let mut records = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let indices = order.next_batch();
        let mut dropout_rng = use_dropout.then(|| ChaCha8Rng::seed_from_u64(config.seed ^ ((step as u64 + 1) << 20)));
        let (breakdown, grads) =
            step_loss(student, &mut bank, &indices, dropout_rng.as_mut(), true).map_err(|e| at_step(e, step + 1))?;
        let lr = schedule.lr_at(step);
        optimizer.begin_step();
        for (name, grad) in grads.expect("trainable step returns gradients") {
            if let Some(p) = student.param_mut(&name) {
                optimizer.update_with_lr(&name, p, &grad, lr)?;
            } else if let Some((_, w)) = bank
                .weights_mut()
                .find(|(pair, _)| ProjectionBank::param_name(**pair) == name)
            {
                optimizer.update_with_lr(&name, w, &grad, lr)?;
            }
        }
        let eval_metric = if config.eval_every > 0 && (step + 1) % config.eval_every == 0 && step + 1 < config.steps {
            Some(evaluate(student, dev, eval_batch)?)
        } else {
            None
        };
        records.push(StepRecord {
            step: step + 1,
            lr,
            loss: breakdown,
            eval_metric,
        });
    }
    let end_loss = step_loss(student, &mut bank, &probe, None, false)
        .map_err(|e| at_step(e, config.steps))?
        .0
        .total;
    let final_metric = evaluate(student, dev, eval_batch)?;
    if let Some(last) = records.last_mut() {
        last.eval_metric = Some(final_metric);
    }
    Ok(DistillOutcome {
        report: TrainReport {
            component_names: objective.component_names(),
            records,
            steps_per_epoch: order.steps_per_epoch(),
            start_loss,
            end_loss,
            final_metric,
        },
        projections: bank,
    })
}
