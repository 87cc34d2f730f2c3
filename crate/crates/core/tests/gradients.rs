mod support;

use support::oracle::{gradient_check, LossKind, GRAD_TOL};

const POINTS: u64 = 100;

fn check_all(kind: LossKind) {
    let mut worst: f64 = 0.0;
    for seed in 0..POINTS {
        let r = gradient_check(kind, seed);
        worst = worst.max(r.params).max(r.input.unwrap_or(0.0));
        assert!(r.params < GRAD_TOL, "{kind:?} seed {seed}: parameter gradient error {}", r.params);
        if let Some(e) = r.input {
            assert!(e < GRAD_TOL, "{kind:?} seed {seed}: input gradient error {e}");
        }
    }
    eprintln!("{kind:?}: worst relative error {worst:.2e}");
}

#[test]
fn bce_matches_finite_differences() {
    check_all(LossKind::Bce);
}

#[test]
fn robust_matches_finite_differences() {
    check_all(LossKind::Robust);
}

#[test]
fn overall_matches_finite_differences() {
    check_all(LossKind::Overall { lambda: 0.5 });
    check_all(LossKind::Overall { lambda: 10.0 });
}

#[test]
fn trades_matches_finite_differences() {
    check_all(LossKind::Trades { beta: 6.0 });
}
