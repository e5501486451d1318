//! Finite-difference verification of every differentiable op and of both
//! distillation loss heads end-to-end.

mod common;

const TOL: f64 = 1e-4;
const SEEDS: u64 = 100;

#[test]
fn elementwise_and_reduction_ops() {
    let (failures, checks) = common::suite_elementwise(SEEDS, TOL);
    assert_eq!(failures, 0, "{failures} of {checks} element-op checks failed");
}

#[test]
fn row_and_matrix_ops() {
    let (failures, checks) = common::suite_matrix(SEEDS, TOL);
    assert_eq!(failures, 0, "{failures} of {checks} matrix-op checks failed");
}

#[test]
fn softmax_losses_and_norm_ops() {
    let (failures, checks) = common::suite_softmax(SEEDS, TOL);
    assert_eq!(failures, 0, "{failures} of {checks} softmax/loss checks failed");
}

#[test]
fn convolution_and_pooling_ops() {
    // conv checks are the slow ones; a reduced seed count keeps the whole
    // suite under the time budget while still sweeping inputs and weights
    let (failures, checks) = common::suite_conv(SEEDS / 4, TOL);
    assert_eq!(failures, 0, "{failures} of {checks} conv/pool checks failed");
}

#[test]
fn loss_heads_end_to_end() {
    let (failures, checks) = common::suite_loss_heads(SEEDS, TOL);
    assert_eq!(failures, 0, "{failures} of {checks} loss-head checks failed");
}
