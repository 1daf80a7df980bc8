//! Central finite differences against every tape primitive: ε = 1e-3,
//! relative error < 1e-3, probe tensors of at most 64 elements. Each family
//! gets its own test so a regression names the offending kernel directly.

mod common;

#[test]
fn elementwise_ops_match_finite_differences() {
    common::sweep_elementwise();
}

#[test]
fn sign_ste_matches_clipped_surrogate_gradient() {
    common::sweep_sign_ste();
}

#[test]
fn matmul_and_linear_match_finite_differences() {
    common::sweep_matmul_linear();
}

#[test]
fn conv2d_matches_finite_differences_across_specs() {
    common::sweep_conv2d();
}

#[test]
fn pooling_matches_finite_differences() {
    common::sweep_pooling();
}

#[test]
fn batchnorm_matches_finite_differences() {
    common::sweep_batchnorm();
}

#[test]
fn concat_crop_reshape_match_finite_differences() {
    common::sweep_shape_ops();
}

#[test]
fn reductions_match_finite_differences() {
    common::sweep_reductions();
}

#[test]
fn broadcast_ops_match_finite_differences() {
    common::sweep_broadcast();
}

#[test]
fn softmax_and_losses_match_finite_differences() {
    common::sweep_softmax_loss();
}
