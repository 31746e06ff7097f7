//! Combined objective, AdamW and the distillation loop.

mod support;

use kdlab::data::{generate_task, TaskSpec, TokenizedExample};
use kdlab::losses::soft_target_loss;
use kdlab::model::{forward, BoundModel};
use kdlab::objective::{hard_label_loss, total_loss};
use kdlab::tensor::check_gradients;
use kdlab::trainer::{predict, BatchOrder};
use kdlab::{
    distill, evaluate, train_supervised, AdamW, AdamWConfig, DistillObjective, Error, HeadKind, KnowledgeKind,
    LinearSchedule, ModelConfig, ProjectionBank, ProjectionInit, Tape, Targets, Tensor, Term, TrainConfig,
    TransformerModel, Var,
};
use support::*;

// ---- optimizer ----

#[test]
fn adamw_zero_gradient_without_decay_is_a_no_op() {
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    });
    let mut p = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
    let before = p.clone();
    for _ in 0..5 {
        opt.begin_step();
        opt.update("p", &mut p, &Tensor::zeros([3])).unwrap();
    }
    assert_eq!(p, before);
}

#[test]
fn adamw_first_step_moves_by_lr() {
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    });
    let mut p = Tensor::scalar(1.0);
    opt.begin_step();
    opt.update("p", &mut p, &Tensor::scalar(1.0)).unwrap();
    // m̂ = v̂ = 1, so the step is lr / (1 + eps).
    assert!((p.item() - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    let (m, v) = opt.moments("p").unwrap();
    assert!((m[0] - 0.1).abs() < 1e-15 && (v[0] - 0.001).abs() < 1e-15);
}

#[test]
fn adamw_decay_alone_shrinks_multiplicatively() {
    let (lr, wd) = (0.05, 0.2);
    let mut opt = AdamW::new(AdamWConfig {
        lr,
        weight_decay: wd,
        ..Default::default()
    });
    let mut p = Tensor::new([2], vec![3.0, -1.0]).unwrap();
    opt.begin_step();
    opt.update("p", &mut p, &Tensor::zeros([2])).unwrap();
    assert_eq!(p.data(), &[3.0 - lr * wd * 3.0, -1.0 + lr * wd]);
}

#[test]
fn adamw_rejects_shape_mismatch_and_missing_step() {
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut p = Tensor::zeros([2]);
    assert!(opt.update("p", &mut p, &Tensor::zeros([2])).is_err());
    opt.begin_step();
    assert!(matches!(
        opt.update("p", &mut p, &Tensor::zeros([3])),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn schedule_warms_up_then_decays() {
    let s = LinearSchedule::new(1.0, 100, 0.1);
    assert_eq!(s.warmup_steps(), 10);
    assert!((s.lr_at(0) - 0.1).abs() < 1e-12);
    assert!((s.lr_at(9) - 1.0).abs() < 1e-12);
    assert!((s.lr_at(10) - 1.0).abs() < 1e-12);
    assert!((s.lr_at(55) - 0.5).abs() < 1e-12);
    assert!(s.lr_at(99) > 0.0 && s.lr_at(99) < 0.02);
    let flat = LinearSchedule::new(0.3, 10, 0.0);
    assert_eq!(flat.lr_at(0), 0.3);
}

// ---- objective ----

fn pair_configs() -> (ModelConfig, ModelConfig) {
    (tiny_config(3, 8, 2), tiny_config(2, 4, 2))
}

#[test]
fn objective_validates_at_construction_and_reports_all_problems() {
    let (tc, sc) = pair_configs();
    let bad = vec![
        Term::new(KnowledgeKind::HiddenMse, (3, 3), 1.0),
        Term::new(KnowledgeKind::SoftTarget, (1, 1), 1.0),
        Term::new(KnowledgeKind::AttentionMse, (0, 0), 1.0),
        Term::new(KnowledgeKind::Cos, (1, 1), -1.0),
    ];
    let err = DistillObjective::new(2.0, 0.5)
        .unwrap()
        .with_terms(bad, &tc, &sc)
        .unwrap_err();
    let Error::Config(msg) = err else { panic!("{err}") };
    assert_eq!(msg.matches("; ").count(), 3, "{msg}");

    let heads = tiny_config(2, 8, 4);
    let err = DistillObjective::new(1.0, 0.0).unwrap().with_terms(
        [Term::new(KnowledgeKind::ValueRelation, (1, 1), 1.0)],
        &heads,
        &sc,
    );
    assert!(matches!(err, Err(Error::Config(_))));
    assert!(DistillObjective::new(0.0, 1.0).is_err());
    assert!(DistillObjective::new(1.0, -0.1).is_err());
}

struct Fixture {
    teacher: TransformerModel,
    student: TransformerModel,
    batch: Vec<Vec<u32>>,
    targets: Targets,
}

fn fixture(seed: u64, same: bool) -> Fixture {
    let (tc, sc) = pair_configs();
    let teacher = random_model(tc, seed, 0.5);
    let student = if same {
        teacher.clone()
    } else {
        random_model(sc, seed + 1, 0.5)
    };
    let mut r = rng(seed);
    let batch = random_batch(&mut r, 3, 5, 24);
    Fixture {
        teacher,
        student,
        batch,
        targets: Targets::Classes(vec![0, 2, 1]),
    }
}

fn all_terms(teacher: &ModelConfig, student: &ModelConfig, pair: (usize, usize), weight: f64) -> Vec<Term> {
    KnowledgeKind::ALL
        .into_iter()
        .filter(|k| *k != KnowledgeKind::SoftTarget)
        .filter(|k| !k.needs_equal_heads() || teacher.num_heads == student.num_heads)
        .map(|k| Term::new(k, pair, weight))
        .collect()
}

#[test]
fn no_terms_and_no_hard_weight_reduces_to_soft_targets() {
    let f = fixture(1, false);
    let objective = DistillObjective::new(4.0, 0.0).unwrap();
    let tape = Tape::new();
    let tt = forward(&f.teacher.bind(&tape, false), &f.batch).unwrap();
    let ts = forward(&f.student.bind(&tape, true), &f.batch).unwrap();
    let mut bank = ProjectionBank::new(8, 4, ProjectionInit::Identity);
    let (total, breakdown) = total_loss(Some(&tt), &ts, &f.targets, &objective, &mut bank.bind(&tape, true)).unwrap();
    let soft = soft_target_loss(tt.logits, ts.logits, 4.0).unwrap();
    assert_eq!(total.item(), soft.item());
    assert_eq!(breakdown.hard, 0.0);
}

#[test]
fn self_match_leaves_only_entropy_terms() {
    let f = fixture(2, true);
    let c = f.teacher.config().clone();
    let objective = DistillObjective::new(2.0, 0.0)
        .unwrap()
        .with_terms(all_terms(&c, &c, (2, 2), 1.0), &c, &c)
        .unwrap();
    let tape = Tape::new();
    let tt = forward(&f.teacher.bind(&tape, false), &f.batch).unwrap();
    let ts = forward(&f.student.bind(&tape, true), &f.batch).unwrap();
    let mut bank = ProjectionBank::new(8, 8, ProjectionInit::Identity);
    let (_, breakdown) = total_loss(Some(&tt), &ts, &f.targets, &objective, &mut bank.bind(&tape, true)).unwrap();
    let teacher_probs = tt.logits.softmax(2.0).unwrap().value();
    let entropy: f64 = -teacher_probs.data().iter().map(|p| p * p.ln()).sum::<f64>() / 3.0;
    assert!((breakdown.response - 4.0 * entropy).abs() < 1e-12);
    for (name, v) in &breakdown.terms {
        if name.starts_with("attention_ce") {
            assert!(*v > 0.0);
        } else {
            assert!(v.abs() < 1e-12, "{name}: {v}");
        }
    }
}

#[test]
fn term_weights_act_linearly_and_breakdown_sums_to_total() {
    let f = fixture(3, false);
    let (tc, sc) = (f.teacher.config().clone(), f.student.config().clone());
    let base = DistillObjective::new(2.0, 0.7)
        .unwrap()
        .with_terms(all_terms(&tc, &sc, (1, 2), 0.3), &tc, &sc)
        .unwrap();
    let doubled = base.scale_term_weights(2.0);
    let eval = |objective: &DistillObjective| {
        let tape = Tape::new();
        let tt = forward(&f.teacher.bind(&tape, false), &f.batch).unwrap();
        let ts = forward(&f.student.bind(&tape, true), &f.batch).unwrap();
        let mut bank = ProjectionBank::new(8, 4, ProjectionInit::Random { seed: 4, std: 0.3 });
        total_loss(Some(&tt), &ts, &f.targets, objective, &mut bank.bind(&tape, true))
            .unwrap()
            .1
    };
    let (a, b) = (eval(&base), eval(&doubled));
    let terms = |x: &kdlab::LossBreakdown| x.terms.iter().map(|(_, v)| v).sum::<f64>();
    assert_eq!(terms(&b), 2.0 * terms(&a));
    assert!(((b.total - b.response - b.hard) - 2.0 * (a.total - a.response - a.hard)).abs() < 1e-12);
    for x in [&a, &b] {
        assert!((x.component_sum() - x.total).abs() < 1e-9);
    }
}

#[test]
fn zero_weight_terms_are_reported_as_zero() {
    let f = fixture(4, false);
    let (tc, sc) = (f.teacher.config().clone(), f.student.config().clone());
    let objective = DistillObjective::new(1.0, 1.0)
        .unwrap()
        .with_terms([Term::new(KnowledgeKind::HiddenMse, (1, 1), 0.0)], &tc, &sc)
        .unwrap();
    let tape = Tape::new();
    let tt = forward(&f.teacher.bind(&tape, false), &f.batch).unwrap();
    let ts = forward(&f.student.bind(&tape, true), &f.batch).unwrap();
    let mut bank = ProjectionBank::new(8, 4, ProjectionInit::Identity);
    let (_, b) = total_loss(Some(&tt), &ts, &f.targets, &objective, &mut bank.bind(&tape, true)).unwrap();
    assert_eq!(b.terms, vec![("hidden_mse_1_1".to_string(), 0.0)]);
    assert!(bank.is_empty());
}

#[test]
fn hard_label_losses() {
    let tape = Tape::new();
    let z = tape.constant(Tensor::new([2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap());
    let ce = hard_label_loss(z, &Targets::Classes(vec![0, 1])).unwrap().item();
    assert!((ce - std::f64::consts::LN_2).abs() < 1e-15);
    let y = tape.constant(Tensor::new([2, 1], vec![1.0, 3.0]).unwrap());
    let mse = hard_label_loss(y, &Targets::Values(vec![0.0, 1.0])).unwrap().item();
    assert_eq!(mse, 2.5);
    assert!(hard_label_loss(z, &Targets::Classes(vec![0, 2])).is_err());
    assert!(hard_label_loss(z, &Targets::Classes(vec![0])).is_err());
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let tc = tiny_config(1, 8, 2).with_ffn(8).with_vocab(12, 4);
    let sc = tc.clone();
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let teacher = random_model(tc.clone(), 100 + seed, 0.6);
        let student = random_model(sc.clone(), seed, 0.6);
        let mut r = rng(seed);
        let batch = random_batch(&mut r, 2, 4, 12);
        let objective = DistillObjective::new(2.0, 0.5)
            .unwrap()
            .with_terms(all_terms(&tc, &sc, (1, 1), 0.4), &tc, &sc)
            .unwrap();
        let names: Vec<String> = student.params().keys().cloned().collect();
        let inputs: Vec<Tensor> = names.iter().map(|n| student.param(n).unwrap().clone()).collect();
        let targets = Targets::Classes(vec![1, 2]);
        let err = check_gradients(
            &inputs,
            |vars: &[Var<'_>]| {
                let tape = vars[0].tape();
                let bound =
                    BoundModel::from_vars(sc.clone(), names.iter().cloned().zip(vars.iter().copied()).collect());
                let ts = forward(&bound, &batch)?;
                let tt = forward(&teacher.bind(tape, false), &batch)?;
                let mut bank = ProjectionBank::new(8, 8, ProjectionInit::Random { seed, std: 0.4 });
                let mut proj = bank.bind(tape, false);
                total_loss(Some(&tt), &ts, &targets, &objective, &mut proj).map(|(l, _)| l)
            },
            1e-5,
            1e-3,
            seed,
        )
        .unwrap();
        worst = worst.max(err);
    }
    assert!(worst < 1e-4, "{worst:e}");
}

// ---- training loop ----

fn patterns(seed: u64) -> (Vec<TokenizedExample>, Vec<TokenizedExample>) {
    let task = generate_task(&TaskSpec {
        seed,
        train_size: 256,
        dev_size: 64,
        seq_len: 10,
        num_labels: 4,
        ..TaskSpec::default()
    })
    .unwrap();
    (task.train, task.dev)
}

fn desk_config(layers: usize, d: usize) -> ModelConfig {
    ModelConfig::new(layers, d, 2)
        .with_vocab(64, 16)
        .with_labels(HeadKind::Classification(4))
}

fn quick(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 16,
        optimizer: AdamWConfig {
            lr: 2e-3,
            ..Default::default()
        },
        seed,
        ..Default::default()
    }
}

#[test]
fn batch_order_visits_every_example_each_epoch() {
    let mut order = BatchOrder::new(10, 4, 3);
    assert_eq!(order.steps_per_epoch(), 3);
    for _ in 0..2 {
        let mut seen: Vec<usize> = (0..3).flat_map(|_| order.next_batch()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}

#[test]
fn zero_steps_leave_the_student_unchanged() {
    let (train, dev) = patterns(0);
    let teacher = random_model(desk_config(2, 16), 1, 0.05);
    let mut student = random_model(desk_config(1, 8), 2, 0.05);
    let before = student.clone();
    let out = distill(
        &teacher,
        &mut student,
        &train,
        &dev,
        &DistillObjective::new(2.0, 0.5).unwrap(),
        &quick(0, 0),
    )
    .unwrap();
    assert_eq!(student, before);
    assert!(out.report.records.is_empty());
    assert_eq!(out.report.start_loss, out.report.end_loss);
}

#[test]
fn distillation_lowers_probe_loss_for_every_seed() {
    let (train, dev) = patterns(1);
    let teacher = random_model(desk_config(2, 16), 7, 0.3);
    let (tc, sc) = (teacher.config().clone(), desk_config(1, 8));
    let objective = DistillObjective::new(2.0, 0.5)
        .unwrap()
        .with_terms([Term::new(KnowledgeKind::HiddenMse, (1, 2), 1.0)], &tc, &sc)
        .unwrap();
    for seed in 0..20 {
        let mut student = random_model(sc.clone(), seed, 0.05);
        let out = distill(&teacher, &mut student, &train, &dev, &objective, &quick(200, seed)).unwrap();
        let r = &out.report;
        assert!(
            r.end_loss < r.start_loss,
            "seed {seed}: {} -> {}",
            r.start_loss,
            r.end_loss
        );
        assert_eq!(out.projections.len(), 1);
    }
}

#[test]
fn teacher_clone_with_zero_lr_matches_teacher_metric() {
    let (train, dev) = patterns(2);
    let teacher = random_model(desk_config(1, 8), 3, 0.5);
    let mut student = teacher.clone();
    let mut cfg = quick(5, 0);
    cfg.optimizer.lr = 0.0;
    cfg.optimizer.weight_decay = 0.0;
    let out = distill(
        &teacher,
        &mut student,
        &train,
        &dev,
        &DistillObjective::new(1.0, 1.0).unwrap(),
        &cfg,
    )
    .unwrap();
    assert_eq!(student, teacher);
    assert_eq!(out.report.final_metric, evaluate(&teacher, &dev, 32).unwrap());
}

#[test]
fn runs_are_seed_deterministic_and_teacher_is_untouched() {
    let (train, dev) = patterns(3);
    let teacher = random_model(desk_config(2, 16), 4, 0.3);
    let frozen = teacher.clone();
    let (tc, sc) = (teacher.config().clone(), desk_config(2, 8));
    let objective = DistillObjective::new(4.0, 0.2)
        .unwrap()
        .with_terms(
            [
                Term::new(KnowledgeKind::AttentionMse, (1, 1), 1.0),
                Term::new(KnowledgeKind::ValueRelation, (2, 2), 1.0),
                Term::new(KnowledgeKind::Pkd, (2, 2), 1.0),
            ],
            &tc,
            &sc,
        )
        .unwrap();
    let run = |seed| {
        let mut s = random_model(sc.clone(), 9, 0.05);
        let out = distill(&teacher, &mut s, &train, &dev, &objective, &quick(30, seed)).unwrap();
        (s, out.report)
    };
    let (a, ra) = run(5);
    let (b, rb) = run(5);
    let (c, _) = run(6);
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_ne!(a, c);
    assert_eq!(teacher, frozen);
    assert_eq!(ra.csv_header().len(), 2 + 2 + 3 + 1);
    assert!(ra.csv_rows().iter().all(|row| row.len() == ra.csv_header().len()));
    assert_eq!(ra.epochs().len(), 30usize.div_ceil(16));
}

#[test]
fn divergence_names_the_offending_term() {
    let (train, dev) = patterns(4);
    let mut teacher = random_model(desk_config(1, 8), 5, 0.3);
    // Blow up the teacher's last hidden state: the hidden term overflows.
    for x in teacher
        .param_mut("encoder.layer.0.output.LayerNorm.weight")
        .unwrap()
        .data_mut()
    {
        *x = 1e200;
    }
    let (tc, sc) = (teacher.config().clone(), desk_config(1, 8));
    let objective = DistillObjective::new(1.0, 1.0)
        .unwrap()
        .with_terms([Term::new(KnowledgeKind::HiddenMse, (1, 1), 1.0)], &tc, &sc)
        .unwrap();
    let mut student = random_model(sc, 1, 0.05);
    let err = distill(&teacher, &mut student, &train, &dev, &objective, &quick(3, 0)).unwrap_err();
    match err {
        Error::Divergence { term, .. } => assert_eq!(term, "hidden_mse_1_1"),
        other => panic!("{other}"),
    }
}

#[test]
fn supervised_training_and_regression_metric() {
    let task = generate_task(&TaskSpec {
        name: kdlab::data::TaskName::Score,
        train_size: 256,
        dev_size: 64,
        seq_len: 10,
        ..TaskSpec::default()
    })
    .unwrap();
    let config = ModelConfig::new(1, 16, 2)
        .with_vocab(64, 16)
        .with_labels(HeadKind::Regression);
    let mut model = random_model(config, 0, 0.05);
    let report = train_supervised(&mut model, &task.train, &task.dev, &quick(150, 0)).unwrap();
    assert!(report.end_loss < report.start_loss);
    assert!(report.final_metric > 0.3, "pearson {}", report.final_metric);
    assert_eq!(predict(&model, &task.dev, 32).unwrap().shape(), &[64, 1]);
}
