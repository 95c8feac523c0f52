mod common;

use common::Rows;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rewardbench::encoders::SimilarityFn;
use rewardbench::numcore::{grad_check, Tape, Tensor, Var, FD_STEP};
use rewardbench::objectives::*;
use rewardbench::Result;

const B: usize = 6;
const D: usize = 5;

fn random_rows(rng: &mut ChaCha8Rng, n: usize) -> Rows {
    (0..n)
        .map(|_| (0..D).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect()
}

fn to_tensor(r: &Rows) -> Tensor {
    Tensor::matrix(r.len(), D, r.concat()).unwrap()
}

/// Five role matrices stacked as one `[5B×D]` tensor: z_i, z_j, z_j1, z_k, v.
fn stacked(rng: &mut ChaCha8Rng) -> (Vec<Rows>, Tensor) {
    let roles: Vec<Rows> = (0..5).map(|_| random_rows(rng, B)).collect();
    let all: Rows = roles.iter().flatten().cloned().collect();
    let t = to_tensor(&all);
    (roles, t)
}

fn split<'t>(x: Var<'t>, negs: &[Vec<usize>]) -> Result<EmbeddingBatch<'t>> {
    let take = |r: usize| x.gather_rows(&(r * B..(r + 1) * B).collect::<Vec<_>>());
    Ok(EmbeddingBatch {
        z_i: Some(take(0)?),
        z_j: Some(take(1)?),
        z_j1: Some(take(2)?),
        z_k: Some(take(3)?),
        v: Some(take(4)?),
        negatives: Some(negs.to_vec()),
    })
}

type LossFn = for<'a, 'b, 't> fn(&'a EmbeddingBatch<'t>, &'b ObjectiveConfig) -> Result<Var<'t>>;

fn eval(
    tag: Option<ObjectiveTag>,
    f: LossFn,
    t: &Tensor,
    negs: &[Vec<usize>],
    cfg: &ObjectiveConfig,
) -> f64 {
    let tape = Tape::new();
    let batch = split(tape.constant(t.clone()), negs).unwrap();
    match tag {
        Some(tag) => loss(tag, &batch, cfg).unwrap().item().unwrap(),
        None => f(&batch, cfg).unwrap().item().unwrap(),
    }
}

fn sim_fn(s: SimilarityFn) -> fn(&[f64], &[f64]) -> f64 {
    match s {
        SimilarityFn::Cosine => common::cos,
        SimilarityFn::NegL2 => common::neg_l2,
    }
}

fn setup(seed: u64) -> (Vec<Rows>, Tensor, Vec<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (roles, t) = stacked(&mut rng);
    let negs = sample_negatives(B, 3, &mut rng).unwrap();
    (roles, t, negs)
}

#[test]
fn losses_match_naive_formulas() {
    for sim in [SimilarityFn::Cosine, SimilarityFn::NegL2] {
        let cfg = ObjectiveConfig {
            similarity: sim,
            ..Default::default()
        };
        let s = sim_fn(sim);
        for seed in 0..4 {
            let (r, t, negs) = setup(seed);
            let (zi, zj, zj1, zk, v) = (&r[0], &r[1], &r[2], &r[3], &r[4]);
            let checks = [
                (
                    eval(None, loss_tcn, &t, &negs, &cfg),
                    common::tcn(s, zi, zj, zk, &negs),
                ),
                (
                    eval(None, loss_tcn_text, &t, &negs, &cfg),
                    common::tcn_text(s, zi, zj, v, &negs),
                ),
                (
                    eval(None, loss_vip, &t, &negs, &cfg),
                    common::vip(s, 0.98, zi, zj, zj1, zk),
                ),
                (
                    eval(None, loss_vip_text, &t, &negs, &cfg),
                    common::vip(s, 0.98, zi, zj, zj1, v),
                ),
                (
                    eval(None, loss_infonce, &t, &negs, &cfg),
                    common::infonce(s, zk, v),
                ),
                (
                    eval(None, loss_triplet, &t, &negs, &cfg),
                    common::triplet(s, 0.3, zi, zj, v),
                ),
            ];
            for (i, (got, want)) in checks.iter().enumerate() {
                assert!(
                    (got - want).abs() < 1e-10,
                    "loss {i} sim {sim:?}: {got} vs {want}"
                );
            }
        }
    }
}

#[test]
fn composite_objectives_are_sums() {
    let cfg = ObjectiveConfig::default();
    let (_, t, negs) = setup(9);
    let e = |f: LossFn| eval(None, f, &t, &negs, &cfg);
    let tag = |g| eval(Some(g), loss_tcn, &t, &negs, &cfg);
    let pairs = [
        (tag(ObjectiveTag::R3m), e(loss_tcn) + e(loss_tcn_text)),
        (
            tag(ObjectiveTag::Liv),
            e(loss_vip) + e(loss_vip_text) + e(loss_infonce),
        ),
        (
            tag(ObjectiveTag::VipTextPlusVip),
            e(loss_vip_text) + e(loss_vip),
        ),
        (tag(ObjectiveTag::Triplet), e(loss_triplet)),
        (tag(ObjectiveTag::TcnText), e(loss_tcn_text)),
        (tag(ObjectiveTag::VipText), e(loss_vip_text)),
    ];
    for (got, want) in pairs {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn gradients_match_finite_differences() {
    let (_, t, negs) = setup(3);
    for sim in [SimilarityFn::Cosine, SimilarityFn::NegL2] {
        let cfg = ObjectiveConfig {
            similarity: sim,
            ..Default::default()
        };
        for tag in ObjectiveTag::ALL {
            let negs = negs.clone();
            let cfg = cfg.clone();
            let err = grad_check(
                move |_tape: &Tape, x| loss(tag, &split(x, &negs)?, &cfg),
                &t,
                FD_STEP,
            )
            .unwrap();
            assert!(err < 1e-6, "{tag} {sim:?}: {err}");
        }
    }
}

#[test]
fn triplet_mean_is_sum_over_b() {
    let (_, t, negs) = setup(5);
    let sum = eval(None, loss_triplet, &t, &negs, &ObjectiveConfig::default());
    let cfg = ObjectiveConfig {
        triplet_reduction: Reduction::Mean,
        ..Default::default()
    };
    let mean = eval(None, loss_triplet, &t, &negs, &cfg);
    assert!((sum / B as f64 - mean).abs() < 1e-12);
}

#[test]
fn invalid_configs_are_rejected() {
    let (_, t, negs) = setup(1);
    for cfg in [
        ObjectiveConfig {
            gamma: 1.0,
            ..Default::default()
        },
        ObjectiveConfig {
            gamma: 0.0,
            ..Default::default()
        },
    ] {
        let tape = Tape::new();
        let b = split(tape.constant(t.clone()), &negs).unwrap();
        assert!(loss_vip(&b, &cfg).is_err());
    }
    let tape = Tape::new();
    let b = split(tape.constant(t.clone()), &negs).unwrap();
    let bad = ObjectiveConfig {
        margin: 0.0,
        ..Default::default()
    };
    assert!(loss_triplet(&b, &bad).is_err());
    let many = ObjectiveConfig {
        negatives: B,
        ..Default::default()
    };
    assert!(loss_tcn(&b, &many).is_err());
    assert!(many.validate(B).is_err());
    assert!(ObjectiveConfig::default().validate(B).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tcn_family_is_nonnegative_and_finite(seed in any::<u64>()) {
        let (_, t, negs) = setup(seed);
        let cfg = ObjectiveConfig::default();
        for f in [loss_tcn, loss_tcn_text] {
            let l = eval(None, f, &t, &negs, &cfg);
            prop_assert!(l.is_finite() && l >= 0.0);
        }
        let tr = eval(None, loss_triplet, &t, &negs, &cfg);
        prop_assert!(tr >= 0.0);
    }

    #[test]
    fn cosine_losses_ignore_row_scale(seed in any::<u64>(), c in 0.1f64..10.0) {
        let (_, t, negs) = setup(seed);
        let mut scaled = t.clone();
        scaled.data_mut().iter_mut().for_each(|x| *x *= c);
        let cfg = ObjectiveConfig::default();
        for tag in ObjectiveTag::ALL {
            let a = eval(Some(tag), loss_tcn, &t, &negs, &cfg);
            let b = eval(Some(tag), loss_tcn, &scaled, &negs, &cfg);
            prop_assert!((a - b).abs() < 1e-9, "{} {} {}", tag, a, b);
        }
    }

    #[test]
    fn vip_is_bounded_by_its_parts(seed in any::<u64>()) {
        // with cosine, log-mean-exp lies between min and max of its argument
        let (r, t, negs) = setup(seed);
        let cfg = ObjectiveConfig::default();
        let l = eval(None, loss_vip_text, &t, &negs, &cfg);
        let g = 0.98;
        let args: Vec<f64> = (0..B)
            .map(|a| common::cos(&r[1][a], &r[4][a]) + 1.0 - g * common::cos(&r[2][a], &r[4][a]))
            .collect();
        let first: f64 = (0..B).map(|a| -common::cos(&r[0][a], &r[4][a])).sum::<f64>() * (1.0 - g) / B as f64;
        let lo = args.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = args.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(l >= first + lo - 1e-12 && l <= first + hi + 1e-12);
    }
}
