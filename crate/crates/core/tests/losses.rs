//! Knowledge losses: hand values, self-match minima, loop oracles,
//! invariances and gradients.

mod support;

use kdlab::losses::{
    attention_feature_loss, hidden_feature_loss, knowledge_loss, relation_loss, soft_target_loss, AttentionVariant,
    HiddenVariant, RelationVariant,
};
use kdlab::tensor::check_gradients;
use kdlab::{Error, KnowledgeKind, LayerPair, ProjectionBank, ProjectionInit, RelationSource, Tape, Tensor, Var};
use rand::Rng;
use support::*;

const FD_STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-4;
const ORACLE_TOL: f64 = 1e-10;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn entropy_rows(p: &Tensor) -> f64 {
    let n = *p.shape().last().unwrap();
    let rows = p.len() / n;
    -p.data()
        .iter()
        .map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 })
        .sum::<f64>()
        / rows as f64
}

fn softmax(z: &[f64], temp: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| ((x - m) / temp).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[test]
fn soft_target_closed_form() {
    let tape = Tape::new();
    let zt = tape.constant(t(&[1, 2], &[2.0, 0.0]));
    let zs = tape.constant(t(&[1, 2], &[0.0, 0.0]));
    let loss = soft_target_loss(zt, zs, 1.0).unwrap().item();
    // -Σ p_t · ln 0.5 with Σ p_t = 1
    let p = softmax(&[2.0, 0.0], 1.0);
    let expected = -(p[0] * 0.5f64.ln() + p[1] * 0.5f64.ln());
    assert!((loss - expected).abs() < 1e-12);
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn soft_target_self_match_is_teacher_entropy_with_zero_gradient() {
    let mut r = rng(3);
    for temp in [1.0, 2.0, 4.0, 8.0] {
        let z = uniform(&mut r, &[3, 4], 3.0);
        let tape = Tape::new();
        let zs = tape.param(z.clone());
        let loss = soft_target_loss(tape.constant(z.clone()), zs, temp).unwrap();
        let mut entropy = 0.0;
        for row in z.data().chunks(4) {
            let p = softmax(row, temp);
            entropy -= p.iter().map(|x| x * x.ln()).sum::<f64>();
        }
        let expected = temp * temp * entropy / 3.0;
        assert!((loss.item() - expected).abs() < 1e-10, "T={temp}");
        tape.backward(loss).unwrap();
        assert!(zs.grad().unwrap().data().iter().all(|g| g.abs() < 1e-12));
    }
}

#[test]
fn soft_target_gradient_scale_is_temperature_invariant_for_small_logits() {
    let mut r = rng(5);
    let eps = 1e-4;
    let zt = uniform(&mut r, &[2, 5], 1.0).map(|x| x * eps);
    let zs = uniform(&mut r, &[2, 5], 1.0).map(|x| x * eps);
    let grad_norm = |temp: f64| {
        let g = kdlab::tensor::finite_difference_gradient(
            |z| {
                let tape = Tape::new();
                soft_target_loss(tape.constant(zt.clone()), tape.constant(z.clone()), temp)
                    .unwrap()
                    .item()
            },
            &zs,
            1e-6,
        );
        g.data().iter().map(|x| x * x).sum::<f64>().sqrt()
    };
    let base = grad_norm(1.0);
    for temp in [2.0, 4.0, 8.0] {
        assert!((grad_norm(temp) - base).abs() < 1e-6, "T={temp}");
    }
}

#[test]
fn soft_target_rejects_bad_temperature() {
    let tape = Tape::new();
    let z = tape.constant(t(&[1, 2], &[1.0, 0.0]));
    assert!(matches!(soft_target_loss(z, z, 0.0), Err(Error::Parameter(_))));
    assert!(matches!(soft_target_loss(z, z, -1.0), Err(Error::Parameter(_))));
}

/// Traces with one layer holding the given attention maps.
fn attention_traces<'t>(tape: &'t Tape, at: Tensor, as_: Tensor) -> (kdlab::FeatureTrace<'t>, kdlab::FeatureTrace<'t>) {
    let mut r = rng(0);
    let (b, n) = (at.shape()[0], at.shape()[2]);
    let mut raw_t = RawTrace::random(&mut r, 1, b, n, 4, 1, 2);
    raw_t.attention[0] = at;
    let mut raw_s = RawTrace::random(&mut r, 1, b, n, 4, 1, 2);
    raw_s.attention[0] = as_;
    (raw_t.bind(tape, false), raw_s.bind(tape, true))
}

#[test]
fn attention_mse_hand_value() {
    let tape = Tape::new();
    let (tt, ts) = attention_traces(
        &tape,
        t(&[1, 1, 2, 2], &[0.5; 4]),
        t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]),
    );
    let loss = attention_feature_loss(&tt, &ts, LayerPair::new(1, 1), AttentionVariant::Mse).unwrap();
    assert!((loss.item() - 0.25).abs() < 1e-15);
}

#[test]
fn attention_self_match() {
    let mut r = rng(8);
    let a = stochastic(&mut r, &[2, 3, 4, 4]);
    let tape = Tape::new();
    let (tt, ts) = attention_traces(&tape, a.clone(), a.clone());
    let pair = LayerPair::new(1, 1);
    let mse = attention_feature_loss(&tt, &ts, pair, AttentionVariant::Mse)
        .unwrap()
        .item();
    assert_eq!(mse, 0.0);
    let ce = attention_feature_loss(&tt, &ts, pair, AttentionVariant::Ce)
        .unwrap()
        .item();
    let mean_heads = kdlab::Tape::new().constant(a.clone()).mean_axis(1).unwrap().value();
    assert!((ce - entropy_rows(&mean_heads)).abs() < 1e-12);
}

#[test]
fn attention_accepts_unequal_heads_and_rejects_unequal_lengths() {
    let mut r = rng(9);
    let tape = Tape::new();
    let (tt, ts) = attention_traces(
        &tape,
        stochastic(&mut r, &[1, 4, 3, 3]),
        stochastic(&mut r, &[1, 2, 3, 3]),
    );
    for v in [AttentionVariant::Mse, AttentionVariant::Ce] {
        assert!(attention_feature_loss(&tt, &ts, LayerPair::new(1, 1), v).is_ok());
    }
    let (tt, ts) = attention_traces(
        &tape,
        stochastic(&mut r, &[1, 2, 3, 3]),
        stochastic(&mut r, &[1, 2, 4, 4]),
    );
    assert!(matches!(
        attention_feature_loss(&tt, &ts, LayerPair::new(1, 1), AttentionVariant::Mse),
        Err(Error::Input(_))
    ));
}

#[test]
fn hidden_self_match_with_identity_projection() {
    let mut r = rng(12);
    let raw = RawTrace::random(&mut r, 2, 2, 5, 6, 2, 3);
    let tape = Tape::new();
    let (tt, ts) = (raw.bind(&tape, false), raw.bind(&tape, true));
    let mut bank = ProjectionBank::new(6, 6, ProjectionInit::Identity);
    let mut bound = bank.bind(&tape, true);
    for l in 0..=2 {
        for v in [HiddenVariant::Mse, HiddenVariant::Cos, HiddenVariant::Pkd] {
            let loss = hidden_feature_loss(&tt, &ts, LayerPair::new(l, l), &mut bound, v)
                .unwrap()
                .item();
            assert!(loss.abs() < 1e-12, "{v:?} at {l}: {loss}");
        }
    }
}

#[test]
fn cos_is_scale_invariant() {
    let mut r = rng(13);
    let raw_t = RawTrace::random(&mut r, 1, 2, 4, 6, 2, 2);
    let mut raw_s = RawTrace::random(&mut r, 1, 2, 4, 4, 2, 2);
    let mut bank = ProjectionBank::new(6, 4, ProjectionInit::Random { seed: 1, std: 0.5 });
    let w = bank.weight_or_init(LayerPair::new(1, 1)).clone();
    raw_s.hidden[1] = project_oracle(&raw_t.hidden[1], &w).map(|x| 2.0 * x);
    let tape = Tape::new();
    let (tt, ts) = (raw_t.bind(&tape, false), raw_s.bind(&tape, true));
    let mut bound = bank.bind(&tape, true);
    let loss = hidden_feature_loss(&tt, &ts, LayerPair::new(1, 1), &mut bound, HiddenVariant::Cos).unwrap();
    assert!(loss.item().abs() < 1e-12, "{}", loss.item());
}

fn normalize_rows(h: &Tensor) -> Tensor {
    let d = *h.shape().last().unwrap();
    let mut out = h.clone();
    for row in out.data_mut().chunks_mut(d) {
        let norm = (row.iter().map(|x| x * x).sum::<f64>() + 1e-16).sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    out
}

#[test]
fn pkd_equals_mse_of_normalized_inputs() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let raw_t = RawTrace::random(&mut r, 1, 2, 4, 6, 2, 2);
        let raw_s = RawTrace::random(&mut r, 1, 2, 4, 4, 2, 2);
        let mut bank = ProjectionBank::new(6, 4, ProjectionInit::Random { seed, std: 0.5 });
        let pair = LayerPair::new(1, 1);
        let w = bank.weight_or_init(pair).clone();
        let tape = Tape::new();
        let (tt, ts) = (raw_t.bind(&tape, false), raw_s.bind(&tape, true));
        let mut bound = bank.bind(&tape, false);
        let pkd = hidden_feature_loss(&tt, &ts, pair, &mut bound, HiddenVariant::Pkd)
            .unwrap()
            .item();

        let mut nt = raw_t.clone();
        nt.hidden[1] = normalize_rows(&project_oracle(&raw_t.hidden[1], &w));
        let mut ns = raw_s.clone();
        ns.hidden[1] = normalize_rows(&raw_s.hidden[1]);
        // Second path: plain hidden_mse on the pre-normalized, pre-projected states.
        let mut identity = ProjectionBank::new(4, 4, ProjectionInit::Identity);
        let tape2 = Tape::new();
        let (tt2, ts2) = (nt.bind(&tape2, false), ns.bind(&tape2, false));
        let mut b2 = identity.bind(&tape2, false);
        let mse = hidden_feature_loss(&tt2, &ts2, pair, &mut b2, HiddenVariant::Mse)
            .unwrap()
            .item();
        assert!((pkd - mse).abs() < ORACLE_TOL, "{pkd} vs {mse}");
    }
}

#[test]
fn mmd_hand_value() {
    let tape = Tape::new();
    let mut r = rng(0);
    let mut raw_t = RawTrace::random(&mut r, 1, 1, 2, 2, 1, 2);
    let mut raw_s = RawTrace::random(&mut r, 1, 1, 2, 2, 1, 2);
    raw_t.hidden[1] = t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
    raw_s.hidden[1] = t(&[1, 2, 2], &[1.0, 1.0, 0.0, 1.0]);
    let (tt, ts) = (raw_t.bind(&tape, false), raw_s.bind(&tape, true));
    let mut bank = ProjectionBank::new(2, 2, ProjectionInit::Identity);
    let mut bound = bank.bind(&tape, false);
    // G_t = I, G_s = [[2,1],[1,1]]: squared differences 1,1,1,0.
    let loss = relation_loss(
        &tt,
        &ts,
        LayerPair::new(1, 1),
        &mut bound,
        RelationVariant::Mmd,
        RelationSource::SameLayer,
    )
    .unwrap();
    assert!((loss.item() - 0.75).abs() < 1e-15);
}

const LAYER_KINDS: [KnowledgeKind; 10] = [
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

#[test]
fn every_kind_is_zero_or_entropy_at_self() {
    let mut r = rng(21);
    let raw = RawTrace::random(&mut r, 3, 2, 4, 6, 2, 3);
    let tape = Tape::new();
    let (tt, ts) = (raw.bind(&tape, false), raw.bind(&tape, true));
    let mut bank = ProjectionBank::new(6, 6, ProjectionInit::Identity);
    let mut bound = bank.bind(&tape, true);
    for kind in LAYER_KINDS {
        for l in 1..=3 {
            for source in [RelationSource::SameLayer, RelationSource::PreviousLayer] {
                if source == RelationSource::PreviousLayer && !matches!(kind, KnowledgeKind::Mmd | KnowledgeKind::Gram)
                {
                    continue;
                }
                let v = knowledge_loss(kind, &tt, &ts, LayerPair::new(l, l), &mut bound, source)
                    .unwrap()
                    .item();
                if kind.zero_at_self() {
                    assert!(v.abs() < 1e-12, "{kind} at {l}: {v}");
                } else {
                    let mean = Tape::new()
                        .constant(raw.attention[l - 1].clone())
                        .mean_axis(1)
                        .unwrap()
                        .value();
                    assert!((v - entropy_rows(&mean)).abs() < 1e-12, "{kind}");
                }
            }
        }
    }
}

#[test]
fn value_relation_single_token_is_zero() {
    let mut r = rng(4);
    let raw_t = RawTrace::random(&mut r, 1, 3, 1, 6, 2, 2);
    let raw_s = RawTrace::random(&mut r, 1, 3, 1, 4, 2, 2);
    let tape = Tape::new();
    let (tt, ts) = (raw_t.bind(&tape, false), raw_s.bind(&tape, true));
    let mut bank = ProjectionBank::new(6, 4, ProjectionInit::Identity);
    let mut bound = bank.bind(&tape, false);
    for v in [RelationVariant::Query, RelationVariant::Key, RelationVariant::Value] {
        let loss = relation_loss(&tt, &ts, LayerPair::new(1, 1), &mut bound, v, RelationSource::SameLayer).unwrap();
        assert_eq!(loss.item(), 0.0);
    }
}

#[test]
fn relation_losses_reject_unequal_heads() {
    let mut r = rng(4);
    let raw_t = RawTrace::random(&mut r, 1, 1, 3, 8, 4, 2);
    let raw_s = RawTrace::random(&mut r, 1, 1, 3, 4, 2, 2);
    let tape = Tape::new();
    let (tt, ts) = (raw_t.bind(&tape, false), raw_s.bind(&tape, true));
    let mut bank = ProjectionBank::new(8, 4, ProjectionInit::Identity);
    let mut bound = bank.bind(&tape, false);
    let err = relation_loss(
        &tt,
        &ts,
        LayerPair::new(1, 1),
        &mut bound,
        RelationVariant::Value,
        RelationSource::SameLayer,
    );
    assert!(matches!(err, Err(Error::Config(_))));
}

fn random_rotation(r: &mut rand_chacha::ChaCha8Rng, k: usize) -> Vec<Vec<f64>> {
    // Gram-Schmidt on a random matrix.
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < k {
        let mut v: Vec<f64> = (0..k).map(|_| r.gen_range(-1.0..1.0)).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.iter().map(|x| x / norm).collect());
        }
    }
    q
}

fn rotate_heads(x: &Tensor, r: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    let s = x.shape().to_vec();
    let (b, h, n, k) = (s[0], s[1], s[2], s[3]);
    let mut out = x.clone();
    for bi in 0..b {
        for hi in 0..h {
            let q = random_rotation(r, k);
            for i in 0..n {
                for c in 0..k {
                    let v: f64 = (0..k).map(|j| x.at(&[bi, hi, i, j]) * q[j][c]).sum();
                    out.data_mut()[((bi * h + hi) * n + i) * k + c] = v;
                }
            }
        }
    }
    out
}

#[test]
fn relation_losses_are_rotation_invariant() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let raw_t = RawTrace::random(&mut r, 1, 2, 4, 6, 2, 2);
        let raw_s = RawTrace::random(&mut r, 1, 2, 4, 4, 2, 2);
        let mut rot = raw_s.clone();
        rot.query[0] = rotate_heads(&raw_s.query[0], &mut r);
        rot.key[0] = rotate_heads(&raw_s.key[0], &mut r);
        rot.value[0] = rotate_heads(&raw_s.value[0], &mut r);
        let tape = Tape::new();
        let tt = raw_t.bind(&tape, false);
        let (ts, tr) = (raw_s.bind(&tape, false), rot.bind(&tape, false));
        let mut bank = ProjectionBank::new(6, 4, ProjectionInit::Identity);
        let mut bound = bank.bind(&tape, false);
        for v in [RelationVariant::Query, RelationVariant::Key, RelationVariant::Value] {
            let pair = LayerPair::new(1, 1);
            let a = relation_loss(&tt, &ts, pair, &mut bound, v, RelationSource::SameLayer)
                .unwrap()
                .item();
            let b = relation_loss(&tt, &tr, pair, &mut bound, v, RelationSource::SameLayer)
                .unwrap()
                .item();
            assert!((a - b).abs() < 1e-8, "{v:?}: {a} vs {b}");
        }
    }
}

/// Teacher 3 layers (d=6), student 2 layers (d=4), both two heads.
fn mismatched_pair(seed: u64, n: usize) -> (RawTrace, RawTrace, ProjectionBank) {
    let mut r = rng(seed);
    let b = r.gen_range(1..=2);
    let raw_t = RawTrace::random(&mut r, 3, b, n, 6, 2, 3);
    let raw_s = RawTrace::random(&mut r, 2, b, n, 4, 2, 3);
    let bank = ProjectionBank::new(6, 4, ProjectionInit::Random { seed, std: 0.4 });
    (raw_t, raw_s, bank)
}

#[test]
fn losses_match_loop_oracles() {
    for seed in 0..30 {
        let n = 1 + (seed as usize % 4);
        let (raw_t, raw_s, mut bank) = mismatched_pair(seed, n);
        let pair = LayerPair::new(2, 3);
        let w = bank.weight_or_init(pair).clone();
        let tape = Tape::new();
        let (tt, ts) = (raw_t.bind(&tape, false), raw_s.bind(&tape, true));
        let mut bound = bank.bind(&tape, false);
        let mut eval = |kind, source| knowledge_loss(kind, &tt, &ts, pair, &mut bound, source).unwrap().item();
        let same = RelationSource::SameLayer;
        let prev = RelationSource::PreviousLayer;
        let checks = [
            (
                eval(KnowledgeKind::AttentionMse, same),
                attention_mse_oracle(&raw_t.attention[2], &raw_s.attention[1]),
            ),
            (
                eval(KnowledgeKind::AttentionCe, same),
                attention_ce_oracle(&raw_t.attention[2], &raw_s.attention[1]),
            ),
            (
                eval(KnowledgeKind::Mmd, same),
                mmd_oracle(&raw_t.hidden[3], &raw_t.hidden[3], &raw_s.hidden[2], &raw_s.hidden[2]),
            ),
            (
                eval(KnowledgeKind::Mmd, prev),
                mmd_oracle(&raw_t.hidden[2], &raw_t.hidden[3], &raw_s.hidden[1], &raw_s.hidden[2]),
            ),
            (eval(KnowledgeKind::Gram, same), {
                let p = project_oracle(&raw_t.hidden[3], &w);
                gram_oracle(&p, &p, &raw_s.hidden[2], &raw_s.hidden[2])
            }),
            (
                eval(KnowledgeKind::Gram, prev),
                gram_oracle(
                    &project_oracle(&raw_t.hidden[2], &w),
                    &project_oracle(&raw_t.hidden[3], &w),
                    &raw_s.hidden[1],
                    &raw_s.hidden[2],
                ),
            ),
            (
                eval(KnowledgeKind::QueryRelation, same),
                relation_oracle(&raw_t.query[2], &raw_s.query[1]),
            ),
            (
                eval(KnowledgeKind::KeyRelation, same),
                relation_oracle(&raw_t.key[2], &raw_s.key[1]),
            ),
            (
                eval(KnowledgeKind::ValueRelation, same),
                relation_oracle(&raw_t.value[2], &raw_s.value[1]),
            ),
        ];
        for (i, (got, want)) in checks.iter().enumerate() {
            assert!(
                (got - want).abs() < ORACLE_TOL,
                "check {i}, seed {seed}: {got} vs {want}"
            );
        }
    }
}

#[test]
fn losses_are_non_negative_and_cos_bounded() {
    for seed in 0..20 {
        let (raw_t, raw_s, mut bank) = mismatched_pair(seed, 3);
        let tape = Tape::new();
        let (tt, ts) = (raw_t.bind(&tape, false), raw_s.bind(&tape, true));
        let mut bound = bank.bind(&tape, false);
        for kind in LAYER_KINDS {
            let v = knowledge_loss(
                kind,
                &tt,
                &ts,
                LayerPair::new(1, 2),
                &mut bound,
                RelationSource::SameLayer,
            )
            .unwrap()
            .item();
            assert!(v >= 0.0, "{kind}: {v}");
            if kind == KnowledgeKind::Cos {
                assert!(v <= 2.0);
            }
        }
    }
}

/// Worst FD error of `kind` w.r.t. student features and the projection.
fn loss_gradient_error(kind: KnowledgeKind, source: RelationSource, seed: u64) -> f64 {
    let (raw_t, raw_s, mut bank) = mismatched_pair(seed, 3);
    let pair = LayerPair::new(2, 3);
    let w = bank.weight_or_init(pair).clone();
    let mut inputs = raw_s.flatten();
    inputs.push(w);
    let layers = raw_s.layers();
    check_gradients(
        &inputs,
        |vars: &[Var<'_>]| {
            let tape = vars[0].tape();
            let ts = RawTrace::trace_from(layers, &vars[..vars.len() - 1]);
            let tt = raw_t.bind(tape, false);
            let mut bank = bank.clone();
            let mut bound = bank.bind(tape, true);
            bound.set(pair, vars[vars.len() - 1])?;
            knowledge_loss(kind, &tt, &ts, pair, &mut bound, source)
        },
        FD_STEP,
        FLOOR,
        seed,
    )
    .unwrap()
}

#[test]
fn every_loss_matches_finite_differences() {
    for kind in LAYER_KINDS {
        let mut worst = 0.0f64;
        for seed in 0..20 {
            worst = worst.max(loss_gradient_error(kind, RelationSource::SameLayer, seed));
            if matches!(kind, KnowledgeKind::Mmd | KnowledgeKind::Gram) {
                worst = worst.max(loss_gradient_error(kind, RelationSource::PreviousLayer, seed));
            }
        }
        assert!(worst < GRAD_TOL, "{kind}: {worst:e}");
    }
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut r = rng(seed);
        let zt = uniform(&mut r, &[3, 4], 2.0);
        let zs = uniform(&mut r, &[3, 4], 2.0);
        let temp = [1.0, 2.0, 4.0, 8.0][seed as usize % 4];
        let err = check_gradients(
            &[zs],
            |v: &[Var<'_>]| soft_target_loss(v[0].tape().constant(zt.clone()), v[0], temp),
            FD_STEP,
            FLOOR,
            seed,
        )
        .unwrap();
        worst = worst.max(err);
    }
    assert!(worst < GRAD_TOL, "soft_target: {worst:e}");
}

#[test]
fn teacher_receives_no_gradient() {
    let (raw_t, raw_s, mut bank) = mismatched_pair(2, 3);
    let tape = Tape::new();
    let (tt, ts) = (raw_t.bind(&tape, true), raw_s.bind(&tape, true));
    let mut bound = bank.bind(&tape, true);
    let pair = LayerPair::new(2, 3);
    let mut total = soft_target_loss(tt.logits, ts.logits, 2.0).unwrap();
    for kind in LAYER_KINDS {
        total = total
            .add(knowledge_loss(kind, &tt, &ts, pair, &mut bound, RelationSource::SameLayer).unwrap())
            .unwrap();
    }
    tape.backward(total).unwrap();
    let teacher_vars = [tt.embeddings, tt.logits].into_iter().chain(
        tt.layers
            .iter()
            .flat_map(|l| [l.attention, l.hidden, l.query, l.key, l.value]),
    );
    for v in teacher_vars {
        assert!(v.grad().is_none_or(|g| g.data().iter().all(|&x| x == 0.0)));
    }
    assert!(ts.logits.grad().is_some());
}

#[test]
fn projection_alone_can_reduce_hidden_mse() {
    let (raw_t, raw_s, mut bank) = mismatched_pair(6, 4);
    let pair = LayerPair::new(2, 3);
    let mut previous = f64::INFINITY;
    for _ in 0..50 {
        let tape = Tape::new();
        let (tt, ts) = (raw_t.bind(&tape, false), raw_s.bind(&tape, false));
        let (loss, grad) = {
            let mut bound = bank.bind(&tape, true);
            let loss = hidden_feature_loss(&tt, &ts, pair, &mut bound, HiddenVariant::Mse).unwrap();
            tape.backward(loss).unwrap();
            (loss.item(), bound.grads().remove(0).1)
        };
        assert!(loss < previous, "{loss} !< {previous}");
        previous = loss;
        let w = bank.weight_or_init(pair);
        for (x, g) in w.data_mut().iter_mut().zip(grad.data()) {
            *x -= 0.1 * g;
        }
    }
}
