use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kdlab::model::forward;
use kdlab::objective::{total_loss, Targets};
use kdlab::{DistillObjective, ProjectionBank, ProjectionInit, Tape};
use kdlab_bench::{desk_model, ids, patterns_batch};

fn forward_pass(c: &mut Criterion) {
    let batch = ids(&patterns_batch(32, 16));
    let mut group = c.benchmark_group("forward");
    for (layers, hidden) in [(2usize, 32usize), (2, 64), (4, 64)] {
        let model = desk_model(layers, hidden, 0);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("L{layers}_d{hidden}")),
            &model,
            |bench, m| {
                bench.iter(|| {
                    let tape = Tape::new();
                    forward(&m.bind(&tape, false), &batch).unwrap().logits.value()
                })
            },
        );
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let examples = patterns_batch(32, 16);
    let batch = ids(&examples);
    let targets = Targets::Classes(
        examples
            .iter()
            .map(|e| match e.label {
                kdlab::data::Label::Class(k) => k,
                _ => 0,
            })
            .collect(),
    );
    let student = desk_model(2, 32, 1);
    let objective = DistillObjective::new(2.0, 0.5).unwrap();
    c.bench_function("supervised_step_L2_d32", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let s = student.bind(&tape, true);
            let trace = forward(&s, &batch).unwrap();
            let mut bank = ProjectionBank::new(32, 32, ProjectionInit::Identity);
            let supervised = DistillObjective::supervised();
            let (loss, _) = total_loss(None, &trace, &targets, &supervised, &mut bank.bind(&tape, true)).unwrap();
            tape.backward(loss).unwrap();
            s.grads().len()
        })
    });
    let teacher = desk_model(2, 64, 2);
    c.bench_function("distill_step_L2_d64_to_L2_d32", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let s = student.bind(&tape, true);
            let ts = forward(&s, &batch).unwrap();
            let tt = forward(&teacher.bind(&tape, false), &batch).unwrap();
            let mut bank = ProjectionBank::new(64, 32, ProjectionInit::Identity);
            let (loss, _) = total_loss(Some(&tt), &ts, &targets, &objective, &mut bank.bind(&tape, true)).unwrap();
            tape.backward(loss).unwrap();
            s.grads().len()
        })
    });
}

criterion_group!(benches, forward_pass, training_step);
criterion_main!(benches);
