mod common;

use common::{reciprocity_max_rel, sphere_gradient_errors};

#[test]
fn reciprocity_integral_matches_direct_solve() {
    let worst = reciprocity_max_rel(1, 3, 3, 1e-12);
    assert!(worst < 1e-6, "largest relative gap {worst:e}");
}

#[test]
fn sphere_gradient_error_decreases_under_refinement() {
    let e = sphere_gradient_errors(&[16.0, 8.0, 4.0]);
    assert!(e[1] < e[0] && e[2] < e[1], "{e:?}");
}
