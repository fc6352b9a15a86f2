mod common;

use common::{cases, transformer};
use lomo_core::optim::{adamw_step, sgd_step_with, AdamWParams};
use lomo_core::stabilize::grouped_norm_clip_step;
use lomo_core::{lomo_step, sgd_step, Category, CheckpointPolicy, ClipMode, LossScalerState, Precision};

#[test]
fn lomo_holds_one_gradient_sgd_holds_all() {
    for precision in [Precision::Full, Precision::HalfEmulated] {
        for case in cases() {
            let mut lomo = case.session(precision, CheckpointPolicy::StoreAll);
            let mut sgd = case.session(precision, CheckpointPolicy::StoreAll);
            let largest = lomo.model.max_param_bytes();
            let total = lomo.model.param_bytes();
            for step in 0..3 {
                let batch = case.batch(step);
                lomo_step(&mut lomo, &batch, 0.01, ClipMode::None, None).unwrap();
                sgd_step(&mut sgd, &batch, 0.01).unwrap();
            }
            assert_eq!(lomo.ledger.peak(Category::Gradients), largest, "{}", case.name);
            assert_eq!(sgd.ledger.peak(Category::Gradients), total, "{}", case.name);
            for s in [&lomo, &sgd] {
                assert_eq!(s.ledger.current(Category::Gradients), 0);
                assert_eq!(s.ledger.live_tensors(Category::Gradients), 0);
                assert_eq!(s.ledger.current(Category::Activations), 0);
                assert_eq!(s.ledger.current(Category::Params), total);
            }
        }
    }
}

#[test]
fn two_pass_paths_keep_one_gradient() {
    let case = transformer("t", 2, 16, 4, 10, 5);
    let mut s = case.session(Precision::HalfEmulated, CheckpointPolicy::StoreAll);
    let mut scaler = LossScalerState::default();
    for step in 0..4 {
        lomo_step(&mut s, &case.batch(step), 0.01, ClipMode::ByGlobalNorm { max_norm: 1.0 }, Some(&mut scaler)).unwrap();
    }
    assert_eq!(s.ledger.peak(Category::Gradients), s.model.max_param_bytes());
    assert_eq!(s.ledger.peak(Category::OptimStates), 0);
}

#[test]
fn grouped_clipping_holds_one_group() {
    let case = transformer("t", 3, 8, 2, 6, 9);
    for window in 1..=3 {
        let mut s = case.session(Precision::Full, CheckpointPolicy::StoreAll);
        grouped_norm_clip_step(&mut s, &case.batch(0), 0.01, 1.0, window).unwrap();
        let mut per_group = std::collections::BTreeMap::new();
        for p in s.model.params() {
            *per_group.entry(p.layer / window).or_insert(0u64) += p.value.nbytes();
        }
        let largest_group = per_group.values().copied().max().unwrap();
        assert_eq!(s.ledger.peak(Category::Gradients), largest_group, "window {window}");
    }
}

#[test]
fn optimizer_state_bytes() {
    let case = transformer("t", 1, 8, 2, 6, 1);
    let hp = AdamWParams { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
    for (precision, adam_factor, sgd_factor) in [(Precision::Full, 2, 0), (Precision::HalfEmulated, 6, 2)] {
        let mut adam = case.session(precision, CheckpointPolicy::StoreAll);
        let mut sgd = case.session(precision, CheckpointPolicy::StoreAll);
        let params = adam.model.param_bytes();
        for step in 0..2 {
            adamw_step(&mut adam, &case.batch(step), 1e-3, hp, ClipMode::None, None).unwrap();
            sgd_step_with(&mut sgd, &case.batch(step), 1e-3, ClipMode::None, None).unwrap();
        }
        assert_eq!(adam.ledger.current(Category::OptimStates), adam_factor * params);
        assert_eq!(sgd.ledger.current(Category::OptimStates), sgd_factor * params);
    }
}

#[test]
fn snapshot_has_four_categories() {
    let case = transformer("t", 1, 8, 2, 6, 1);
    let mut s = case.session(Precision::Full, CheckpointPolicy::StoreAll);
    lomo_step(&mut s, &case.batch(0), 0.01, ClipMode::None, None).unwrap();
    let snap = s.ledger.snapshot();
    assert_eq!(snap.categories.len(), 4);
    let share: f64 = snap.categories.values().map(|u| u.peak_share_percent).sum();
    assert!((share - 100.0).abs() < 1e-9);
}
