mod common;

use common::oracles;

#[test]
fn conv2d_matches_nested_loops() {
    oracles::conv2d_matches_nested_loops();
}

#[test]
fn max_pool_matches_nested_loops() {
    oracles::max_pool_matches_nested_loops();
}

#[test]
fn linear_matches_nested_loops() {
    oracles::linear_matches_nested_loops();
}

#[test]
fn nms_matches_brute_force() {
    oracles::nms_matches_brute_force();
}

#[test]
fn matching_matches_exhaustive_greedy() {
    oracles::matching_matches_exhaustive_greedy();
}

#[test]
fn froc_matches_threshold_sweep() {
    oracles::froc_matches_threshold_sweep();
}

#[test]
fn attention_matches_scalar_oracle() {
    oracles::attention_matches_scalar_oracle();
}

#[test]
fn zero_theta_gives_half_weights() {
    oracles::zero_theta_gives_half_weights();
}

#[test]
fn attention_weights_ignore_pixel_order() {
    oracles::attention_weights_ignore_pixel_order();
}

#[test]
fn position_loss_matches_scalar_oracle() {
    oracles::position_loss_matches_scalar_oracle();
}

#[test]
fn position_loss_limits() {
    oracles::position_loss_limits();
}

#[test]
fn detection_loss_matches_per_anchor_oracle() {
    oracles::detection_loss_matches_per_anchor_oracle();
}
