mod support;

use support::oracles;

#[test]
fn sentence_match_scores_equal_loop_cosines() {
    oracles::sentence_match_scores_equal_loop_cosines();
}

#[test]
fn word_match_map_equals_triple_loop() {
    oracles::word_match_map_equals_triple_loop();
}

#[test]
fn word_scores_equal_masked_max_then_fusion() {
    oracles::word_scores_equal_masked_max_then_fusion();
}

#[test]
fn attentive_equals_loop_softmax() {
    oracles::attentive_equals_loop_softmax();
}

#[test]
fn similarity_pair_equals_loops() {
    oracles::similarity_pair_equals_loops();
}

#[test]
fn convolution_and_pooling_match_hand_computed_values() {
    oracles::convolution_and_pooling_match_hand_computed_values();
}

#[test]
fn laplacian_filter_on_four_by_four_map() {
    oracles::laplacian_filter_on_four_by_four_map();
}

#[test]
fn cubes_equal_step_by_step_composition() {
    oracles::cubes_equal_step_by_step_composition();
}

#[test]
fn score_equals_reference_recurrence_and_mlp() {
    oracles::score_equals_reference_recurrence_and_mlp();
}
