mod common;

use common::oracles;

#[test]
fn iou_matches_set_counting_on_all_binary_masks() {
    assert_eq!(oracles::iou_exhaustive(), 16 * 16 + 512 * 512);
}

#[test]
fn dice_matches_set_counting_on_all_binary_masks() {
    oracles::dice_exhaustive();
}

#[test]
fn fedavg_equals_weighted_mean_oracle() {
    oracles::fedavg_oracle(200);
}
