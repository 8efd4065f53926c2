mod common;

use common::*;

#[test]
fn every_architecture_matches_finite_differences() {
    for (name, spec, dsm) in architectures() {
        for draw in 0..20 {
            let e = net_grad_error(&spec, dsm, draw);
            assert!(e <= 1e-4, "{name} draw {draw}: relative error {e:e}");
        }
    }
}

#[test]
fn actor_loss_matches_finite_differences() {
    for draw in 0..20 {
        for (beta, bound) in [(0.0, None), (0.5, None), (0.5, Some(1.0)), (0.001, Some(2.0))] {
            let e = actor_grad_error(draw, beta, bound);
            assert!(e <= 1e-4, "draw {draw} beta {beta} bound {bound:?}: relative error {e:e}");
        }
    }
}
