//! Experiment documents: parsing, resolution and up-front validation.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context;
use indexmap::IndexMap;
use kdlab::checkpoint::load_model;
use kdlab::data::{TaskKind, TaskName, TaskSpec, DEFAULT_MAX_SEQ_LEN};
use kdlab::init::{MlmConfig, MlmHead, DEFAULT_INIT_STD};
use kdlab::model::BERT_VOCAB_SIZE;
use kdlab::tensor::Activation;
use kdlab::{
    build_plan, Budget, DistillObjective, Error, HeadKind, KnowledgeKind, ModelConfig, RelationSource, Strategy,
    Tensor, Term, TrainConfig, TransformerModel,
};
use serde::{Deserialize, Serialize};

/// Every problem found in a config document.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "invalid configuration ({} problem{}):",
            self.0.len(),
            if self.0.len() == 1 { "" } else { "s" }
        )?;
        for msg in &self.0 {
            writeln!(f, "  - {msg}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ExperimentConfig {
    /// Seeds the teacher and, unless swept, the student.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub task: TaskSpec,
    pub teacher: TeacherSection,
    pub student: StudentSection,
    pub objective: ObjectiveSection,
    /// Distillation run settings. Its `seed` is replaced by the run seed.
    pub training: TrainConfig,
    pub sweep: SweepSection,
    pub size: SizeSection,
}

/// Encoder shape; vocabulary, sequence length and output head come from the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Defaults to four times `hidden`.
    pub ffn: Option<usize>,
    pub activation: Activation,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl Default for ArchSection {
    fn default() -> Self {
        ArchSection {
            layers: 2,
            hidden: 32,
            heads: 2,
            ffn: None,
            activation: Activation::Gelu,
            dropout: 0.0,
            layer_norm_eps: 1e-12,
        }
    }
}

impl ArchSection {
    pub fn model_config(&self, task: &TaskSpec) -> ModelConfig {
        let mut c = ModelConfig::new(self.layers, self.hidden, self.heads)
            .with_vocab(task.vocab_size, task.seq_len.max(DEFAULT_MAX_SEQ_LEN))
            .with_labels(head_for(task))
            .with_activation(self.activation);
        c.ffn_dim = self.ffn.unwrap_or(4 * self.hidden);
        c.dropout = self.dropout;
        c.layer_norm_eps = self.layer_norm_eps;
        c
    }
}

fn head_for(task: &TaskSpec) -> HeadKind {
    match task.kind() {
        TaskKind::Classification(n) => HeadKind::Classification(n),
        TaskKind::Regression => HeadKind::Regression,
        TaskKind::LanguageModel => HeadKind::Classification(2),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    /// Load this checkpoint instead of training a teacher.
    pub checkpoint: Option<PathBuf>,
    pub model: ArchSection,
    pub init_std: f64,
    /// Masked-LM steps before fine-tuning (0 skips pre-training).
    pub pretrain_steps: usize,
    pub train: TrainConfig,
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection {
            checkpoint: None,
            model: ArchSection {
                layers: 4,
                hidden: 64,
                ..ArchSection::default()
            },
            init_std: DEFAULT_INIT_STD,
            pretrain_steps: 0,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct StudentSection {
    pub model: ArchSection,
    pub init: InitSection,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Random,
    Pretrain,
    GeneralDistillation,
    Preload,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Random => "random",
            Scheme::Pretrain => "pretrain",
            Scheme::GeneralDistillation => "general_distillation",
            Scheme::Preload => "preload",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSection {
    pub scheme: Scheme,
    pub std: f64,
    /// Sequences in the unlabeled corpus used by the two masked-LM schemes.
    pub corpus_size: usize,
    pub mlm: MlmConfig,
    /// Layer plan for `preload`.
    pub strategy: Strategy,
    pub k: usize,
    pub copy_heads: bool,
}

impl Default for InitSection {
    fn default() -> Self {
        InitSection {
            scheme: Scheme::Random,
            std: DEFAULT_INIT_STD,
            corpus_size: 512,
            mlm: MlmConfig::default(),
            strategy: Strategy::Dilatation,
            k: 0,
            copy_heads: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSection {
    pub temperature: f64,
    /// Hard-label weight.
    pub alpha: f64,
    pub response_weight: f64,
    pub terms: Vec<TermSpec>,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        ObjectiveSection {
            temperature: 1.0,
            alpha: 0.5,
            response_weight: 1.0,
            terms: Vec::new(),
        }
    }
}

/// One knowledge kind applied over every pair of a matching plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TermSpec {
    pub kind: KnowledgeKind,
    pub strategy: Strategy,
    /// For `first`/`last`; 0 means every student layer.
    pub k: usize,
    pub beta: f64,
    /// Relate layer `l` with layer `l - 1` (mmd and gram only).
    pub adjacent: bool,
}

impl Default for TermSpec {
    fn default() -> Self {
        TermSpec {
            kind: KnowledgeKind::HiddenMse,
            strategy: Strategy::LastK,
            k: 0,
            beta: 1.0,
            adjacent: false,
        }
    }
}

impl TermSpec {
    /// Expands to concrete terms. `soft_target` contributes none: the
    /// response loss is always part of the objective.
    pub fn expand(&self, teacher_layers: usize, student_layers: usize) -> kdlab::Result<Vec<Term>> {
        if self.kind == KnowledgeKind::SoftTarget {
            return Ok(Vec::new());
        }
        let k = if self.k == 0 { student_layers } else { self.k };
        let plan = build_plan(teacher_layers, student_layers, self.strategy, k)?;
        let source = if self.adjacent {
            RelationSource::PreviousLayer
        } else {
            RelationSource::SameLayer
        };
        Ok(plan
            .pairs()
            .iter()
            .map(|&pair| Term::new(self.kind, pair, self.beta).with_source(source))
            .collect())
    }
}

/// Axes of a Cartesian sweep; empty axes are not swept.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Each value adds one term on top of `objective.terms`.
    pub kind: Vec<KnowledgeKind>,
    /// Matching strategy of the swept term.
    pub strategy: Vec<Strategy>,
    /// Weight of the swept term.
    pub beta: Vec<f64>,
    pub temperature: Vec<f64>,
    pub alpha: Vec<f64>,
    pub seed: Vec<u64>,
    /// Defaults for the swept term (`kind` is ignored).
    pub term: TermSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SizeSection {
    pub params: Option<usize>,
    pub flops: Option<f64>,
    /// Sequence length for the flops budget.
    pub seq_len: usize,
    pub depths: Vec<usize>,
    pub width_min: usize,
    pub width_max: usize,
    pub width_step: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for SizeSection {
    fn default() -> Self {
        SizeSection {
            params: None,
            flops: None,
            seq_len: 128,
            depths: vec![2, 3, 4, 8, 12],
            width_min: 64,
            width_max: 768,
            width_step: 8,
            vocab_size: BERT_VOCAB_SIZE,
            max_seq_len: 512,
        }
    }
}

impl SizeSection {
    pub fn budget(&self) -> Result<Budget, ConfigErrors> {
        match (self.params, self.flops) {
            (Some(p), None) => Ok(Budget::Params(p)),
            (None, Some(f)) if f > 0.0 => Ok(Budget::Flops {
                flops: f,
                seq_len: self.seq_len,
            }),
            (None, Some(f)) => Err(ConfigErrors(vec![format!("size.flops must be positive, got {f}")])),
            _ => Err(ConfigErrors(vec![
                "size needs exactly one of `params` or `flops`".into()
            ])),
        }
    }
}

/// One point of a sweep; unswept axes hold `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub kind: Option<KnowledgeKind>,
    pub strategy: Option<Strategy>,
    pub beta: Option<f64>,
    pub temperature: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl SweepSection {
    pub fn declared_axes(&self) -> Vec<&'static str> {
        let mut axes = Vec::new();
        for (name, len) in [
            ("kind", self.kind.len()),
            ("strategy", self.strategy.len()),
            ("beta", self.beta.len()),
            ("temperature", self.temperature.len()),
            ("alpha", self.alpha.len()),
            ("seed", self.seed.len()),
        ] {
            if len > 0 {
                axes.push(name);
            }
        }
        axes
    }
}

fn axis<T: Copy>(values: &[T]) -> Vec<Option<T>> {
    if values.is_empty() {
        vec![None]
    } else {
        values.iter().copied().map(Some).collect()
    }
}

/// Config plus everything resolved from it before any training starts.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub teacher_config: ModelConfig,
    pub student_config: ModelConfig,
    /// Loaded when `teacher.checkpoint` is set.
    pub teacher: Option<(TransformerModel, IndexMap<String, Tensor>)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    TrainTeacher,
    InitStudent,
    Distill,
    Sweep,
}

pub fn read_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| ConfigErrors(vec![format!("{}: {}", path.display(), e.message())]).into())
}

fn push(problems: &mut Vec<String>, r: kdlab::Result<()>) {
    if let Err(e) = r {
        problems.push(match e {
            Error::Config(msg) => msg,
            other => other.to_string(),
        });
    }
}

impl Experiment {
    /// Checks every section the command will use and reports all problems together.
    pub fn prepare(config: ExperimentConfig, command: Command) -> Result<Experiment, ConfigErrors> {
        let mut problems = Vec::new();
        push(&mut problems, config.task.validate());
        if config.task.name == TaskName::LmStream {
            problems.push("task must be labeled (patterns or score), not lm-stream".into());
        }

        let mut teacher = None;
        let teacher_config = match &config.teacher.checkpoint {
            Some(path) if command != Command::TrainTeacher => match load_model(path) {
                Ok((model, extras)) => {
                    let c = model.config().clone();
                    let want = config.teacher.model.model_config(&config.task);
                    if c.vocab_size != want.vocab_size || c.num_labels != want.num_labels {
                        problems.push(format!(
                            "teacher checkpoint {} has vocabulary {} and head {}, task needs {} and {}",
                            path.display(),
                            c.vocab_size,
                            c.num_labels,
                            want.vocab_size,
                            want.num_labels
                        ));
                    }
                    if c.max_seq_len < config.task.seq_len {
                        problems.push(format!(
                            "teacher checkpoint accepts {} tokens, task sequences have {}",
                            c.max_seq_len, config.task.seq_len
                        ));
                    }
                    teacher = Some((model, extras));
                    c
                }
                Err(e) => {
                    problems.push(format!("teacher checkpoint {}: {e}", path.display()));
                    config.teacher.model.model_config(&config.task)
                }
            },
            _ => {
                let c = config.teacher.model.model_config(&config.task);
                push(&mut problems, c.validate().map_err(|e| prefix("teacher", e)));
                push(
                    &mut problems,
                    config.teacher.train.validate().map_err(|e| prefix("teacher.train", e)),
                );
                if config.teacher.init_std < 0.0 {
                    problems.push("teacher.init_std must be non-negative".into());
                }
                c
            }
        };
        let student_config = config.student.model.model_config(&config.task);

        if command != Command::TrainTeacher {
            push(
                &mut problems,
                student_config.validate().map_err(|e| prefix("student", e)),
            );
            push(
                &mut problems,
                config.training.validate().map_err(|e| prefix("training", e)),
            );
            check_init(&config.student.init, &teacher_config, &student_config, &mut problems);
            for message in objective_problems(&config, command, &teacher_config, &student_config) {
                if !problems.contains(&message) {
                    problems.push(message);
                }
            }
        }
        if problems.is_empty() {
            Ok(Experiment {
                config,
                teacher_config,
                student_config,
                teacher,
            })
        } else {
            Err(ConfigErrors(problems))
        }
    }

    /// Sweep cells in config-index order. A plain run is the single cell of
    /// an empty sweep.
    pub fn cells(&self, command: Command) -> Vec<Cell> {
        let c = &self.config;
        let empty = SweepSection::default();
        let sweep = if command == Command::Sweep { &c.sweep } else { &empty };
        let mut cells = Vec::new();
        for kind in axis(&sweep.kind) {
            for strategy in axis(&sweep.strategy) {
                for beta in axis(&sweep.beta) {
                    for temperature in axis(&sweep.temperature) {
                        for alpha in axis(&sweep.alpha) {
                            for seed in axis(&sweep.seed) {
                                cells.push(Cell {
                                    index: cells.len(),
                                    kind,
                                    strategy: kind.map(|_| strategy.unwrap_or(sweep.term.strategy)),
                                    beta: kind.map(|_| beta.unwrap_or(sweep.term.beta)),
                                    temperature: temperature.unwrap_or(c.objective.temperature),
                                    alpha: alpha.unwrap_or(c.objective.alpha),
                                    seed: seed.unwrap_or(c.seed),
                                });
                            }
                        }
                    }
                }
            }
        }
        cells
    }

    pub fn objective_for(&self, cell: &Cell) -> kdlab::Result<DistillObjective> {
        build_objective(&self.config, cell, &self.teacher_config, &self.student_config)
    }

    pub fn mlm_config(&self, seed: u64) -> MlmConfig {
        MlmConfig {
            seed,
            ..self.config.student.init.mlm.clone()
        }
    }

    pub fn teacher_mlm_head(&self) -> Option<MlmHead> {
        let (model, extras) = self.teacher.as_ref()?;
        MlmHead::from_extras(extras, model.config().vocab_size).ok()
    }
}

fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Config(format!("{section}: {msg}")),
        other => other,
    }
}

fn check_init(init: &InitSection, teacher: &ModelConfig, student: &ModelConfig, problems: &mut Vec<String>) {
    if init.std < 0.0 {
        problems.push("student.init.std must be non-negative".into());
    }
    match init.scheme {
        Scheme::Random => {}
        Scheme::Pretrain | Scheme::GeneralDistillation => {
            push(
                problems,
                init.mlm.optimizer.validate().map_err(|e| prefix("student.init.mlm", e)),
            );
            if init.mlm.batch_size == 0 || init.corpus_size < init.mlm.batch_size {
                problems.push(format!(
                    "student.init.corpus_size {} is shorter than one masked-LM batch of {}",
                    init.corpus_size, init.mlm.batch_size
                ));
            }
        }
        Scheme::Preload => {
            for (what, s, t) in [
                ("hidden size", student.hidden_dim, teacher.hidden_dim),
                ("head count", student.num_heads, teacher.num_heads),
                ("ffn size", student.ffn_dim, teacher.ffn_dim),
            ] {
                if s != t {
                    problems.push(format!("preload needs equal {what}: student {s}, teacher {t}"));
                }
            }
            let k = if init.k == 0 { student.num_layers } else { init.k };
            push(
                problems,
                build_plan(teacher.num_layers, student.num_layers, init.strategy, k).map(drop),
            );
        }
    }
}

fn objective_problems(config: &ExperimentConfig, command: Command, tc: &ModelConfig, sc: &ModelConfig) -> Vec<String> {
    let mut problems = Vec::new();
    let sweep = &config.sweep;
    if command == Command::Sweep {
        if sweep.declared_axes().is_empty() {
            problems.push("sweep declares no axes".into());
        }
        if sweep.kind.is_empty() && !(sweep.strategy.is_empty() && sweep.beta.is_empty()) {
            problems.push("sweep.strategy and sweep.beta need a sweep.kind axis".into());
        }
        if sweep.beta.iter().any(|b| !(*b >= 0.0)) {
            problems.push("sweep.beta values must be non-negative".into());
        }
    }
    for term in &config.objective.terms {
        if term.kind == KnowledgeKind::SoftTarget {
            problems.push("soft_target is set through objective.response_weight, not as a term".into());
        }
    }
    let probe = Experiment {
        config: config.clone(),
        teacher_config: tc.clone(),
        student_config: sc.clone(),
        teacher: None,
    };
    for cell in probe.cells(command) {
        if let Err(e) = build_objective(config, &cell, tc, sc) {
            let mut msg = match e {
                Error::Config(msg) => msg,
                other => other.to_string(),
            };
            if let Some(kind) = cell.kind {
                msg = format!("sweep cell {} ({kind}): {msg}", cell.index);
            }
            problems.push(msg);
        }
    }
    problems
}

fn build_objective(
    config: &ExperimentConfig,
    cell: &Cell,
    tc: &ModelConfig,
    sc: &ModelConfig,
) -> kdlab::Result<DistillObjective> {
    let o = &config.objective;
    let mut specs: Vec<TermSpec> = o
        .terms
        .iter()
        .filter(|t| t.kind != KnowledgeKind::SoftTarget)
        .cloned()
        .collect();
    if let Some(kind) = cell.kind {
        specs.push(TermSpec {
            kind,
            strategy: cell.strategy.unwrap_or(config.sweep.term.strategy),
            beta: cell.beta.unwrap_or(config.sweep.term.beta),
            ..config.sweep.term.clone()
        });
    }
    let mut terms = Vec::new();
    let mut problems = Vec::new();
    for spec in &specs {
        match spec.expand(tc.num_layers, sc.num_layers) {
            Ok(t) => terms.extend(t),
            Err(Error::Config(msg)) => problems.push(format!("{}: {msg}", spec.kind)),
            Err(e) => return Err(e),
        }
    }
    let base =
        DistillObjective::new(cell.temperature, cell.alpha).and_then(|b| b.with_response_weight(o.response_weight));
    match base {
        Ok(base) if problems.is_empty() => base.with_terms(terms, tc, sc),
        Ok(_) => Err(Error::Config(problems.join("; "))),
        Err(Error::Config(msg)) => {
            problems.insert(0, msg);
            Err(Error::Config(problems.join("; ")))
        }
        Err(e) => Err(e),
    }
}
