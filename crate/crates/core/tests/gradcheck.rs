mod common;

use common::{cases, grads_and_order, Case};
use lomo_core::{CheckpointPolicy, Precision};

const STEP: f64 = 1e-3;
const REL_TOL: f64 = 1e-4;

fn check(case: &Case) {
    let mut s = case.session(Precision::Full, CheckpointPolicy::StoreAll);
    let batch = case.batch(0);
    let (grads, _) = grads_and_order(&mut s, &batch);
    let mut worst = 0.0f64;
    for (id, g) in grads.iter().enumerate() {
        for i in 0..g.numel() {
            let orig = s.model.params()[id].value.data()[i];
            let mut probe = |x: f64| {
                let mut v = s.model.params()[id].value.data().to_vec();
                v[i] = x;
                s.model.params_mut()[id].value.assign(&v).unwrap();
                s.eval_loss(&batch).unwrap()
            };
            let fd = (probe(orig + STEP) - probe(orig - STEP)) / (2.0 * STEP);
            probe(orig);
            let an = g.data()[i];
            // Elements below 1e-3 in magnitude are compared against 1e-3.
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            worst = worst.max(err);
            assert!(
                err < REL_TOL,
                "{} {}[{i}]: analytic {an:e} vs finite difference {fd:e}",
                case.name,
                s.model.params()[id].name
            );
        }
    }
    eprintln!("{}: worst relative error {worst:.2e}", case.name);
}

#[test]
fn mlp_gradients_match_finite_differences() {
    for c in cases().iter().filter(|c| c.name.starts_with("mlp")) {
        check(c);
    }
}

#[test]
fn transformer_gradients_match_finite_differences() {
    for c in cases().iter().filter(|c| c.name.starts_with("tf")) {
        check(c);
    }
}

#[test]
fn checkpointed_gradients_match_finite_differences() {
    let c = common::transformer("tf-ckpt", 2, 8, 2, 6, 3);
    let mut s = c.session(Precision::Full, CheckpointPolicy::CheckpointPerLayer);
    let batch = c.batch(1);
    let (grads, _) = grads_and_order(&mut s, &batch);
    let mut plain = c.session(Precision::Full, CheckpointPolicy::StoreAll);
    let (want, _) = grads_and_order(&mut plain, &batch);
    assert_eq!(grads, want);
    check(&c);
}
