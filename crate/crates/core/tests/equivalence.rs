mod common;

use common::{bits, cases, grads_and_order, mlp, Case};
use lomo_core::optim::{self, sgd_step_with, StepOutcome};
use lomo_core::stabilize::{grouped_norm_clip_step, two_pass_norm_clip_step};
use lomo_core::{lomo_step, sgd_step, CheckpointPolicy, ClipMode, LossScalerState, Precision, Session};
use proptest::prelude::*;

fn full(case: &Case) -> Session {
    case.session(Precision::Full, CheckpointPolicy::StoreAll)
}

#[test]
fn lomo_matches_sgd_bit_for_bit() {
    for case in cases() {
        let (mut a, mut b) = (full(&case), full(&case));
        for step in 0..10 {
            let batch = case.batch(step);
            let la = sgd_step(&mut a, &batch, 0.05).unwrap();
            let lb = lomo_step(&mut b, &batch, 0.05, ClipMode::None, None).unwrap().loss;
            assert_eq!(la.to_bits(), lb.to_bits(), "{} step {step}", case.name);
        }
        assert_eq!(bits(&a.model), bits(&b.model), "{}", case.name);
        assert_eq!(a.model.digest(), b.model.digest());
    }
}

/// Independent oracle: materialize all gradients, accumulate the norm in
/// hook delivery order, then scale and apply.
fn global_clip_oracle(s: &mut Session, case: &Case, step: u64, lr: f64, max_norm: f64) {
    let (grads, order) = grads_and_order(s, &case.batch(step));
    let mut sum = 0.0;
    for &id in &order {
        for &g in grads[id].data() {
            sum += g * g;
        }
    }
    let norm = f64::sqrt(sum);
    let factor = if norm > max_norm { max_norm / norm } else { 1.0 };
    for (p, g) in s.model.params_mut().iter_mut().zip(&grads) {
        let v: Vec<f64> = p.value.data().iter().zip(g.data()).map(|(p, g)| p - lr * (g * factor)).collect();
        p.value.assign(&v).unwrap();
    }
}

#[test]
fn two_pass_norm_clipping_matches_oracle() {
    for case in cases() {
        let (mut fused, mut oracle) = (full(&case), full(&case));
        for step in 0..20 {
            let r = two_pass_norm_clip_step(&mut fused, &case.batch(step), 0.1, 0.05).unwrap();
            assert_eq!(r.outcome, StepOutcome::Applied);
            global_clip_oracle(&mut oracle, &case, step, 0.1, 0.05);
            assert_eq!(bits(&fused.model), bits(&oracle.model), "{} step {step}", case.name);
        }
        let c = fused.counts();
        assert_eq!(c.backward_passes, 40);
        assert_eq!(c.forward_passes, 40);
    }
}

#[test]
fn two_pass_clipping_actually_clips() {
    let case = mlp("m", 2, 8, 3, 1);
    let mut s = full(&case);
    let r = two_pass_norm_clip_step(&mut s, &case.batch(0), 0.1, 1e-6).unwrap();
    assert!(r.grad_norm.unwrap() > 1e-6);
}

#[test]
fn retained_sgd_clipping_matches_fused() {
    for case in cases() {
        let clip = ClipMode::ByGlobalNorm { max_norm: 0.05 };
        let (mut a, mut b) = (full(&case), full(&case));
        for step in 0..5 {
            let batch = case.batch(step);
            let ra = sgd_step_with(&mut a, &batch, 0.1, clip, None).unwrap();
            let rb = lomo_step(&mut b, &batch, 0.1, clip, None).unwrap();
            assert_eq!(ra.grad_norm.map(f64::to_bits), rb.grad_norm.map(f64::to_bits));
        }
        assert_eq!(bits(&a.model), bits(&b.model), "{}", case.name);
    }
}

#[test]
fn value_clipping_matches_oracle() {
    for case in cases() {
        let (mut fused, mut oracle) = (full(&case), full(&case));
        for step in 0..5 {
            lomo_step(&mut fused, &case.batch(step), 0.2, ClipMode::ByValue { threshold: 0.01 }, None).unwrap();
            let (grads, _) = grads_and_order(&mut oracle, &case.batch(step));
            for (p, g) in oracle.model.params_mut().iter_mut().zip(&grads) {
                let v: Vec<f64> = p
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(p, g)| p - 0.2 * g.clamp(-0.01, 0.01))
                    .collect();
                p.value.assign(&v).unwrap();
            }
        }
        assert_eq!(bits(&fused.model), bits(&oracle.model), "{}", case.name);
        assert_eq!(fused.counts().backward_passes, 5);
    }
}

#[test]
fn grouped_clipping_matches_oracle() {
    for case in cases() {
        for window in [1, 2] {
            let (mut fused, mut oracle) = (full(&case), full(&case));
            for step in 0..5 {
                let r = grouped_norm_clip_step(&mut fused, &case.batch(step), 0.1, 0.02, window).unwrap();

                let (grads, order) = grads_and_order(&mut oracle, &case.batch(step));
                let layer = |id: usize| oracle.model.params()[id].layer / window;
                let mut groups: Vec<Vec<usize>> = Vec::new();
                for &id in &order {
                    match groups.last_mut() {
                        Some(g) if layer(g[0]) == layer(id) => g.push(id),
                        _ => groups.push(vec![id]),
                    }
                }
                let mut factors = Vec::new();
                for group in &groups {
                    let sum: f64 = group.iter().fold(0.0, |acc, &id| {
                        grads[id].data().iter().fold(acc, |a, g| a + g * g)
                    });
                    let norm = sum.sqrt();
                    let f = if norm > 0.02 { 0.02 / norm } else { 1.0 };
                    factors.push(f);
                    for &id in group {
                        let p = &mut oracle.model.params_mut()[id];
                        let v: Vec<f64> = p.value.data().iter().zip(grads[id].data()).map(|(p, g)| p - 0.1 * (g * f)).collect();
                        p.value.assign(&v).unwrap();
                    }
                }
                assert_eq!(r.group_factors, factors, "{} window {window}", case.name);
            }
            assert_eq!(bits(&fused.model), bits(&oracle.model), "{} window {window}", case.name);
            assert_eq!(fused.counts().backward_passes, 5);
        }
    }
}

#[test]
fn loss_scaling_is_exact_in_full_precision() {
    for case in cases() {
        let (mut scaled, mut plain) = (full(&case), full(&case));
        let mut scaler = LossScalerState::new(1024.0, 3, 1.0, 65536.0).unwrap();
        for step in 0..8 {
            let batch = case.batch(step);
            let r = lomo_step(&mut scaled, &batch, 0.05, ClipMode::None, Some(&mut scaler)).unwrap();
            assert_eq!(r.outcome, StepOutcome::Applied);
            sgd_step(&mut plain, &batch, 0.05).unwrap();
        }
        assert_eq!(scaler.scale, 4096.0);
        assert_eq!(bits(&scaled.model), bits(&plain.model), "{}", case.name);
    }
}

#[test]
fn dispatcher_routes_by_kind() {
    let case = mlp("m", 2, 8, 3, 2);
    let (mut a, mut b) = (full(&case), full(&case));
    let batch = case.batch(0);
    optim::step(&mut a, &lomo_core::OptimizerKind::Lomo { lr: 0.1 }, &batch, 0.1, ClipMode::None, None).unwrap();
    sgd_step(&mut b, &batch, 0.1).unwrap();
    assert_eq!(bits(&a.model), bits(&b.model));
    let mut c = full(&case);
    optim::step(&mut c, &lomo_core::OptimizerKind::adamw(0.1), &batch, 0.1, ClipMode::None, None).unwrap();
    assert_ne!(bits(&a.model), bits(&c.model));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fused_update_equals_sgd_for_any_seed(
        seed in 0u64..10_000,
        layers in 1usize..4,
        hidden in 1usize..10,
        dim in 1usize..5,
        lr in 1e-4f64..0.5,
        steps in 1u64..6,
    ) {
        let case = mlp("p", layers, hidden, dim, seed);
        let (mut a, mut b) = (full(&case), full(&case));
        for step in 0..steps {
            let batch = case.batch(step);
            sgd_step(&mut a, &batch, lr).unwrap();
            lomo_step(&mut b, &batch, lr, ClipMode::None, None).unwrap();
        }
        prop_assert_eq!(bits(&a.model), bits(&b.model));
    }
}
