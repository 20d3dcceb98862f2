mod common;

use common::{gradient_check, REL_TOL};
use despeckle::train::PathOptions;

#[test]
fn full_objective_gradients_match_finite_differences() {
    let opts = PathOptions { encoder_mixture: true, recon_mixture: true };
    for block_norm in [true, false] {
        let g = gradient_check(block_norm, opts);
        assert!(g.checked >= 50);
        assert!(g.worst < REL_TOL, "block_norm={block_norm}: {} (rel {:e})", g.which, g.worst);
    }
}

#[test]
fn ablated_objectives_gradients_match_finite_differences() {
    for opts in [
        PathOptions { encoder_mixture: false, recon_mixture: true },
        PathOptions { encoder_mixture: true, recon_mixture: false },
    ] {
        let g = gradient_check(true, opts);
        assert!(g.worst < REL_TOL, "{opts:?}: {} (rel {:e})", g.which, g.worst);
    }
}
