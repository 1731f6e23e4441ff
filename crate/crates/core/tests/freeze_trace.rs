use thaw_core::plasticity::{ControllerParams, Decision, PlasticityController};

fn controller() -> PlasticityController {
    let params = ControllerParams {
        window: 3,
        ..ControllerParams::default()
    };
    PlasticityController::new(params, 3).unwrap()
}

fn label(d: Decision) -> String {
    match d {
        Decision::None => "-".into(),
        Decision::Freeze { module, .. } => format!("freeze {module}"),
        Decision::UnfreezeAll { from_module } => format!("unfreeze_all {from_module}"),
    }
}

/// Worked by hand with W = 3, tolerance 0.2 · max|first three slopes|.
///
/// Module 0 smoothed series: 1, .7, .5, .2, .1, .1, .1, .4, .4, .4, .1, .1, .1, .1, .1
/// giving slopes -, -.3, -.25, -.25 (T = .06), -.2, -.05, 0, .15 (spike), .15, 0,
/// -.15, -.15, 0, 0, 0. Module 1 sees a constant series, so T falls to the floor
/// and the zero slopes still count as stale.
#[test]
fn scripted_decisions() {
    let script: &[(f64, f64, &str, usize)] = &[
        (1.0, 0.1, "-", 0),
        (0.4, 0.1, "-", 0),
        (0.1, 0.1, "-", 0),
        (0.1, 0.1, "-", 0),
        (0.1, 0.1, "-", 0),
        (0.1, 0.1, "-", 1),
        (0.1, 0.1, "-", 2),
        (1.0, 0.1, "-", 0),
        (0.1, 0.1, "-", 0),
        (0.1, 0.1, "-", 1),
        (0.1, 0.1, "-", 0),
        (0.1, 0.1, "-", 0),
        (0.1, 0.1, "-", 1),
        (0.1, 0.1, "-", 2),
        (0.1, 0.1, "freeze 0", 0),
        (0.5, 0.1, "-", 0),
        (0.5, 0.1, "-", 0),
        (0.5, 0.1, "-", 0),
        (0.5, 0.02, "-", 1),
        (0.5, 0.01, "unfreeze_all 1", 0),
        (0.5, 0.01, "-", 0),
    ];
    let mut c = controller();
    for (step, &(p, lr, want, counter)) in script.iter().enumerate() {
        let e = c.observe(p, lr);
        assert_eq!(label(e.decision), want, "step {}", step + 1);
        assert_eq!(e.stale_counter, counter, "step {} counter", step + 1);
    }
    let h = c.history().module(0);
    let slopes: Vec<f64> = h
        .slopes
        .iter()
        .map(|s| (s * 100.0).round() / 100.0)
        .collect();
    assert_eq!(
        slopes,
        [-0.3, -0.25, -0.25, -0.2, -0.05, 0.0, 0.15, 0.15, 0.0, -0.15, -0.15, 0.0, 0.0, 0.0]
    );
    assert!((h.tolerance.unwrap() - 0.06).abs() < 1e-12);
    assert_eq!(c.state().window, 1);
    assert_eq!(c.frontmost_active(), 0);
    assert_eq!(c.state().lr_at_frontmost_freeze, None);
}

#[test]
fn freeze_records_slope_and_tolerance() {
    let mut c = controller();
    let mut last = Decision::None;
    for p in [1.0, 0.4, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1] {
        last = c.observe(p, 0.1).decision;
    }
    match last {
        Decision::Freeze {
            module,
            slope,
            tolerance,
        } => {
            assert_eq!(module, 0);
            assert_eq!(slope, 0.0);
            assert!((tolerance - 0.06).abs() < 1e-12);
        }
        other => panic!("expected a freeze, got {other:?}"),
    }
    assert_eq!(c.state().lr_at_frontmost_freeze, Some(0.1));
}

#[test]
fn last_module_is_never_frozen() {
    let params = ControllerParams {
        window: 2,
        ..ControllerParams::default()
    };
    let mut c = PlasticityController::new(params, 2).unwrap();
    let mut freezes = 0;
    for _ in 0..50 {
        if let Decision::Freeze { .. } = c.observe(0.2, 0.1).decision {
            freezes += 1;
        }
    }
    assert_eq!(freezes, 1);
    assert!(!c.can_freeze_more());
    assert_eq!(c.observe(0.2, 0.1).plasticity, None);
}

#[test]
fn small_lr_drop_does_not_unfreeze() {
    let mut c = controller();
    for p in [1.0, 0.4, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1] {
        c.observe(p, 0.1);
    }
    assert_eq!(c.frontmost_active(), 1);
    assert!(c.lr_only(0.0101).decision.is_none());
    assert_eq!(
        c.lr_only(0.01).decision,
        Decision::UnfreezeAll { from_module: 1 }
    );
}
