//! The subcommands, as library functions over a prepared [`Experiment`].

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use indexmap::IndexMap;
use kdlab::checkpoint::save_model;
use kdlab::data::{generate_task, Task, TaskName, TaskSpec, TokenizedExample};
use kdlab::init::{general_distill, init_random, preload, pretrain_mlm, MlmHead, PreloadOptions};
use kdlab::model::{count_parameters, estimate_flops};
use kdlab::sizing::width_range;
use kdlab::{
    build_plan, configs_at_budget, distill, train_supervised, Error, ModelConfig, TrainConfig, TrainReport,
    TransformerModel,
};
use rayon::prelude::*;

use crate::config::{Cell, Command, ConfigErrors, Experiment, ExperimentConfig, Scheme};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_ECHO: &str = "config.toml";
pub const TEACHER_FILE: &str = "teacher.ckpt";

pub const SUMMARY_HEADER: [&str; 13] = [
    "cell",
    "kind",
    "strategy",
    "beta",
    "temperature",
    "alpha",
    "seed",
    "terms",
    "steps",
    "start_loss",
    "end_loss",
    "dev_metric",
    "status",
];

/// Writes the resolved config next to the results.
pub fn echo_config(config: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let text = toml::to_string(config).context("serializing config echo")?;
    fs::write(out.join(CONFIG_ECHO), text)?;
    Ok(())
}

fn load_task(spec: &TaskSpec) -> kdlab::Result<Task> {
    generate_task(spec)
}

/// Unlabeled stream over the task vocabulary.
fn corpus(spec: &TaskSpec, size: usize) -> kdlab::Result<Vec<TokenizedExample>> {
    let lm = TaskSpec {
        name: TaskName::LmStream,
        seed: spec.seed.wrapping_add(1),
        train_size: size,
        dev_size: 1,
        ..spec.clone()
    };
    Ok(generate_task(&lm)?.train)
}

fn write_report(report: &TrainReport, path: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(report.csv_header())?;
    for row in report.csv_rows() {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

fn mlm_extras(head: Option<&MlmHead>) -> IndexMap<String, kdlab::Tensor> {
    head.map(MlmHead::to_extras).unwrap_or_default()
}

pub struct TeacherOutcome {
    pub model: TransformerModel,
    pub head: Option<MlmHead>,
    pub dev_metric: f64,
}

/// Random init, optional masked-LM pre-training, then supervised training.
pub fn train_teacher(exp: &Experiment, out: &Path) -> anyhow::Result<TeacherOutcome> {
    let c = &exp.config;
    let task = load_task(&c.task)?;
    let mut model = TransformerModel::new(exp.teacher_config.clone())?;
    init_random(&mut model, c.seed, c.teacher.init_std)?;
    let head = if c.teacher.pretrain_steps > 0 {
        let mut head = MlmHead::new(exp.teacher_config.vocab_size);
        let mlm = kdlab::init::MlmConfig {
            steps: c.teacher.pretrain_steps,
            ..exp.mlm_config(c.seed)
        };
        pretrain_mlm(
            &mut model,
            &mut head,
            &corpus(&c.task, c.student.init.corpus_size)?,
            &mlm,
        )?;
        Some(head)
    } else {
        None
    };
    let train = TrainConfig {
        seed: c.seed,
        ..c.teacher.train.clone()
    };
    let report = train_supervised(&mut model, &task.train, &task.dev, &train)?;
    fs::create_dir_all(out)?;
    save_model(out.join(TEACHER_FILE), &model, &mlm_extras(head.as_ref()))?;
    write_report(&report, &out.join("teacher_metrics.csv"))?;
    log::info!(
        "teacher: loss {:.4} -> {:.4}, dev metric {:.4}",
        report.start_loss,
        report.end_loss,
        report.final_metric
    );
    Ok(TeacherOutcome {
        model,
        head,
        dev_metric: report.final_metric,
    })
}

/// The configured teacher checkpoint, or a freshly trained teacher.
pub fn obtain_teacher(exp: &Experiment, out: &Path) -> anyhow::Result<(TransformerModel, Option<MlmHead>)> {
    match &exp.teacher {
        Some((model, _)) => Ok((model.clone(), exp.teacher_mlm_head())),
        None => {
            let t = train_teacher(exp, out)?;
            Ok((t.model, t.head))
        }
    }
}

/// Builds a student with the configured scheme, seeded by `seed`.
pub fn init_student(
    exp: &Experiment,
    teacher: &TransformerModel,
    teacher_head: Option<&MlmHead>,
    cell: &Cell,
) -> anyhow::Result<(TransformerModel, MlmHead)> {
    let c = &exp.config;
    let init = &c.student.init;
    let mut student = TransformerModel::new(exp.student_config.clone())?;
    init_random(&mut student, cell.seed, init.std)?;
    let mut head = MlmHead::new(exp.student_config.vocab_size);
    match init.scheme {
        Scheme::Random => {}
        Scheme::Pretrain => {
            pretrain_mlm(
                &mut student,
                &mut head,
                &corpus(&c.task, init.corpus_size)?,
                &exp.mlm_config(cell.seed),
            )?;
        }
        Scheme::GeneralDistillation => {
            let fallback;
            let t_head = match teacher_head {
                Some(h) => h,
                None => {
                    log::warn!("teacher has no masked-LM head; using a zero decoder bias");
                    fallback = MlmHead::new(teacher.config().vocab_size);
                    &fallback
                }
            };
            let objective = exp.objective_for(cell)?;
            general_distill(
                &mut student,
                &mut head,
                teacher,
                t_head,
                &corpus(&c.task, init.corpus_size)?,
                &objective,
                &exp.mlm_config(cell.seed),
            )?;
        }
        Scheme::Preload => {
            let k = if init.k == 0 {
                exp.student_config.num_layers
            } else {
                init.k
            };
            let plan = build_plan(
                teacher.config().num_layers,
                exp.student_config.num_layers,
                init.strategy,
                k,
            )?;
            let options = PreloadOptions {
                copy_heads: init.copy_heads,
                head_seed: cell.seed,
                head_std: init.std,
            };
            preload(&mut student, teacher, &plan, &options)?;
        }
    }
    Ok((student, head))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub terms: String,
    pub steps: usize,
    pub start_loss: f64,
    pub end_loss: f64,
    pub dev_metric: f64,
    /// `ok`, or the divergence message.
    pub status: String,
}

impl CellResult {
    pub fn record(&self) -> Vec<String> {
        let opt = |v: Option<String>| v.unwrap_or_default();
        vec![
            self.cell.index.to_string(),
            opt(self.cell.kind.map(|k| k.to_string())),
            opt(self.cell.strategy.map(|s| s.to_string())),
            opt(self.cell.beta.map(|b| b.to_string())),
            self.cell.temperature.to_string(),
            self.cell.alpha.to_string(),
            self.cell.seed.to_string(),
            self.terms.clone(),
            self.steps.to_string(),
            self.start_loss.to_string(),
            self.end_loss.to_string(),
            self.dev_metric.to_string(),
            self.status.clone(),
        ]
    }

    pub fn diverged(&self) -> bool {
        self.status != "ok"
    }
}

/// Initializes and distills one student. `dir` receives its metrics and
/// checkpoint under `stem`.
pub fn run_cell(
    exp: &Experiment,
    task: &Task,
    teacher: &TransformerModel,
    teacher_head: Option<&MlmHead>,
    cell: &Cell,
    dir: &Path,
    stem: &str,
) -> anyhow::Result<CellResult> {
    let objective = exp.objective_for(cell)?;
    let terms = if objective.terms().is_empty() {
        "none".to_string()
    } else {
        objective
            .terms()
            .iter()
            .map(|t| t.label())
            .collect::<Vec<_>>()
            .join("+")
    };
    let train = TrainConfig {
        seed: cell.seed,
        ..exp.config.training.clone()
    };
    let (mut student, head) = init_student(exp, teacher, teacher_head, cell)?;
    let result = match distill(teacher, &mut student, &task.train, &task.dev, &objective, &train) {
        Ok(outcome) => {
            let r = outcome.report;
            write_report(&r, &dir.join(format!("{stem}_metrics.csv")))?;
            save_model(dir.join(format!("{stem}.ckpt")), &student, &head.to_extras())?;
            CellResult {
                cell: cell.clone(),
                terms,
                steps: r.records.len(),
                start_loss: r.start_loss,
                end_loss: r.end_loss,
                dev_metric: r.final_metric,
                status: "ok".into(),
            }
        }
        Err(e @ Error::Divergence { .. }) => {
            log::error!("cell {}: {e}", cell.index);
            CellResult {
                cell: cell.clone(),
                terms,
                steps: 0,
                start_loss: f64::NAN,
                end_loss: f64::NAN,
                dev_metric: f64::NAN,
                status: e.to_string(),
            }
        }
        Err(e) => return Err(e.into()),
    };
    log::info!(
        "cell {} [{}] T={} alpha={} seed={}: loss {:.4} -> {:.4}, dev {:.4}",
        cell.index,
        result.terms,
        cell.temperature,
        cell.alpha,
        cell.seed,
        result.start_loss,
        result.end_loss,
        result.dev_metric
    );
    Ok(result)
}

pub fn write_summary(results: &[CellResult], path: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(SUMMARY_HEADER)?;
    for r in results {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

fn divergence_error(results: &[CellResult]) -> anyhow::Result<()> {
    match results.iter().find(|r| r.diverged()) {
        Some(r) => Err(anyhow::Error::new(Error::Divergence {
            step: 0,
            term: format!("cell {}", r.cell.index),
        })
        .context(r.status.clone())),
        None => Ok(()),
    }
}

/// Runs every cell of `command` (one for `distill`) and writes the summary.
pub fn run_cells(exp: &Experiment, command: Command, out: &Path, jobs: usize) -> anyhow::Result<Vec<CellResult>> {
    echo_config(&exp.config, out)?;
    let task = load_task(&exp.config.task)?;
    let (teacher, teacher_head) = obtain_teacher(exp, out)?;
    let cells = exp.cells(command);
    let dir = if command == Command::Sweep {
        out.join("cells")
    } else {
        out.to_path_buf()
    };
    fs::create_dir_all(&dir)?;
    let run = |cell: &Cell| {
        let stem = if command == Command::Sweep {
            format!("cell_{:04}", cell.index)
        } else {
            "student".to_string()
        };
        run_cell(exp, &task, &teacher, teacher_head.as_ref(), cell, &dir, &stem)
    };
    let results: Vec<CellResult> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
        pool.install(|| cells.par_iter().map(run).collect::<anyhow::Result<_>>())?
    } else {
        cells.iter().map(run).collect::<anyhow::Result<_>>()?
    };
    write_summary(&results, &out.join(SUMMARY_FILE))?;
    divergence_error(&results)?;
    Ok(results)
}

pub fn init_student_command(exp: &Experiment, out: &Path) -> anyhow::Result<PathBuf> {
    echo_config(&exp.config, out)?;
    let (teacher, teacher_head) = obtain_teacher(exp, out)?;
    let cell = exp.cells(Command::InitStudent).remove(0);
    let (student, head) = init_student(exp, &teacher, teacher_head.as_ref(), &cell)?;
    let path = out.join("student_init.ckpt");
    save_model(&path, &student, &head.to_extras())?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SizeRow {
    pub config: ModelConfig,
    pub params: usize,
    pub embedding_fraction: f64,
    pub flops: f64,
}

pub fn size_command(config: &ExperimentConfig, out: &Path) -> anyhow::Result<Vec<SizeRow>> {
    let s = &config.size;
    let budget = s.budget()?;
    if s.width_step == 0 || s.width_min > s.width_max {
        return Err(ConfigErrors(vec![
            "size needs width_min <= width_max and a positive width_step".into()
        ])
        .into());
    }
    let template = ModelConfig::new(1, 64, 1).with_vocab(s.vocab_size, s.max_seq_len);
    let rows: Vec<SizeRow> = configs_at_budget(
        budget,
        &s.depths,
        &width_range(s.width_min, s.width_max, s.width_step),
        &template,
    )
    .into_iter()
    .map(|c| {
        let count = count_parameters(&c);
        SizeRow {
            params: count.total,
            embedding_fraction: count.embedding_fraction(),
            flops: estimate_flops(&c, s.seq_len),
            config: c,
        }
    })
    .collect();
    echo_config(config, out)?;
    let mut w = csv::Writer::from_path(out.join("sizes.csv"))?;
    w.write_record([
        "layers",
        "hidden",
        "heads",
        "ffn",
        "params",
        "embedding_fraction",
        "flops",
    ])?;
    for r in &rows {
        w.write_record([
            r.config.num_layers.to_string(),
            r.config.hidden_dim.to_string(),
            r.config.num_heads.to_string(),
            r.config.ffn_dim.to_string(),
            r.params.to_string(),
            format!("{:.4}", r.embedding_fraction),
            r.flops.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}

/// Dev-metric statistics per group of rows that differ only in seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub key: Vec<(String, String)>,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

const PER_RUN: [&str; 8] = [
    "cell",
    "seed",
    "steps",
    "start_loss",
    "end_loss",
    "dev_metric",
    "status",
    "terms",
];

pub fn report_command(inputs: &[PathBuf], out: Option<&Path>) -> anyhow::Result<Vec<ReportRow>> {
    let mut groups: IndexMap<Vec<(String, String)>, Vec<f64>> = IndexMap::new();
    for path in inputs {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let headers = r.headers()?.clone();
        let metric = headers
            .iter()
            .position(|h| h == "dev_metric")
            .with_context(|| format!("{} has no dev_metric column", path.display()))?;
        for record in r.records() {
            let record = record?;
            let key: Vec<(String, String)> = headers
                .iter()
                .zip(record.iter())
                .filter(|(h, _)| !PER_RUN.contains(h))
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect();
            let value: f64 = record[metric]
                .parse()
                .with_context(|| format!("bad dev_metric in {}", path.display()))?;
            groups.entry(key).or_default().push(value);
        }
    }
    let rows: Vec<ReportRow> = groups
        .into_iter()
        .map(|(key, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.len() > 1 {
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            ReportRow {
                key,
                runs: v.len(),
                mean,
                std: var.sqrt(),
                min: v.iter().copied().fold(f64::INFINITY, f64::min),
                max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        let mut w = csv::Writer::from_path(out.join("report.csv"))?;
        if let Some(first) = rows.first() {
            let mut header: Vec<String> = first.key.iter().map(|(h, _)| h.clone()).collect();
            header.extend(["runs", "mean", "std", "min", "max"].map(String::from));
            w.write_record(header)?;
        }
        for r in &rows {
            let mut rec: Vec<String> = r.key.iter().map(|(_, v)| v.clone()).collect();
            rec.extend([
                r.runs.to_string(),
                r.mean.to_string(),
                r.std.to_string(),
                r.min.to_string(),
                r.max.to_string(),
            ]);
            w.write_record(rec)?;
        }
        w.flush()?;
    }
    Ok(rows)
}
