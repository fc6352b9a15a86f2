mod common;

use common::{bits, mlp};
use lomo_core::optim::{self, StepOutcome};
use lomo_core::stabilize::ScaleChange;
use lomo_core::{Category, CheckpointPolicy, ClipMode, Error, LossScalerState, OptimizerKind, Precision};
use proptest::prelude::*;

/// Reference state machine over integer exponents.
#[derive(Debug, Clone, Copy)]
struct Model {
    exp: i32,
    clean: u32,
}

fn check_power_of_two(scale: f64, min: f64, max: f64) {
    assert!(scale >= min && scale <= max, "{scale} outside [{min}, {max}]");
    assert_eq!(scale, 2f64.powi(scale.log2() as i32), "{scale} is not a power of two");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn scaler_follows_doubling_and_halving_rules(
        min_exp in 0i32..6,
        span in 0i32..12,
        start_offset in 0i32..12,
        interval in 1u32..6,
        outcomes in prop::collection::vec(any::<bool>(), 1..80),
    ) {
        let max_exp = min_exp + span;
        let start = min_exp + start_offset.min(span);
        let (min, max) = (2f64.powi(min_exp), 2f64.powi(max_exp));
        let mut s = LossScalerState::new(2f64.powi(start), interval, min, max).unwrap();
        let mut m = Model { exp: start, clean: 0 };
        for overflow in outcomes {
            if overflow {
                let r = s.on_overflow();
                if m.exp - 1 < min_exp {
                    let underflow = matches!(r, Err(Error::ScaleUnderflow { .. }));
                    prop_assert!(underflow, "expected underflow");
                } else {
                    prop_assert_eq!(r.unwrap(), ScaleChange::Halved);
                    m.exp -= 1;
                    m.clean = 0;
                }
            } else {
                let r = s.on_clean();
                m.clean += 1;
                let mut want = ScaleChange::Unchanged;
                if m.clean == interval {
                    m.clean = 0;
                    if m.exp < max_exp {
                        m.exp += 1;
                        want = ScaleChange::Doubled;
                    }
                }
                prop_assert_eq!(r, want);
            }
            check_power_of_two(s.scale, min, max);
            prop_assert_eq!(s.scale, 2f64.powi(m.exp));
            prop_assert_eq!(s.clean_steps, m.clean);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn skipped_steps_leave_parameters_untouched(
        seed in 0u64..1_000,
        start_exp in 10i32..25,
        opt in 0usize..3,
        global_norm in any::<bool>(),
        steps in prop::collection::vec(0u64..1_000, 1..5),
    ) {
        let case = mlp("s", 1, 4, 3, seed);
        let mut s = case.session(Precision::HalfEmulated, CheckpointPolicy::StoreAll);
        let kind = [OptimizerKind::Lomo { lr: 0.05 }, OptimizerKind::Sgd { lr: 0.05 }, OptimizerKind::adamw(1e-3)][opt];
        let clip = if global_norm { ClipMode::ByGlobalNorm { max_norm: 1.0 } } else { ClipMode::None };
        let mut scaler = LossScalerState::new(2f64.powi(start_exp), 4, 1.0, 2f64.powi(24)).unwrap();
        for step in steps {
            let before = bits(&s.model);
            let scale = scaler.scale;
            let r = optim::step(&mut s, &kind, &case.batch(step), 0.05, clip, Some(&mut scaler)).unwrap();
            match r.outcome {
                StepOutcome::SkippedOverflow => {
                    prop_assert_eq!(bits(&s.model), before);
                    prop_assert_eq!(scaler.scale, scale / 2.0);
                    prop_assert_eq!(r.scale_change, Some(ScaleChange::Halved));
                }
                StepOutcome::Applied => prop_assert_ne!(r.scale_change, Some(ScaleChange::Halved)),
            }
            prop_assert_eq!(s.ledger.current(Category::Gradients), 0);
            prop_assert_eq!(s.ledger.current(Category::Activations), 0);
            check_power_of_two(scaler.scale, 1.0, 2f64.powi(24));
        }
    }
}

#[test]
fn overflow_is_actually_exercised() {
    let case = mlp("s", 1, 4, 3, 1);
    let mut s = case.session(Precision::HalfEmulated, CheckpointPolicy::StoreAll);
    let mut scaler = LossScalerState::new(2f64.powi(24), 4, 1.0, 2f64.powi(24)).unwrap();
    let mut skipped = 0;
    for step in 0..30 {
        let before = bits(&s.model);
        let r = lomo_core::lomo_step(&mut s, &case.batch(step), 0.05, ClipMode::None, Some(&mut scaler)).unwrap();
        if r.outcome == StepOutcome::SkippedOverflow {
            skipped += 1;
            assert_eq!(bits(&s.model), before);
        }
    }
    assert!(skipped >= 3, "only {skipped} overflow steps");
    assert!(scaler.scale < 2f64.powi(24));
}
