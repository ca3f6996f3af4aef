mod common;

use common::{gradcheck, FD_TOLERANCE};

fn assert_small(name: &str, err: f64) {
    assert!(err < FD_TOLERANCE, "{name}: max relative error {err:e}");
}

#[test]
fn dense_layers_match_finite_differences() {
    assert_small("dense", gradcheck::dense());
}

#[test]
fn conv_layer_matches_finite_differences() {
    assert_small("conv", gradcheck::conv());
}

#[test]
fn pooling_and_relu_match_finite_differences() {
    assert_small("pooling", gradcheck::pooling());
}

#[test]
fn small_cnn_matches_finite_differences() {
    assert_small("small cnn", gradcheck::small_cnn());
}

#[test]
fn cross_entropy_matches_finite_differences() {
    assert_small("cross-entropy", gradcheck::cross_entropy_loss());
}

#[test]
fn negative_cosine_matches_finite_differences() {
    assert_small("negative cosine", gradcheck::negative_cosine_loss());
}

#[test]
fn info_nce_matches_finite_differences() {
    assert_small("InfoNCE", gradcheck::info_nce_loss());
}

#[test]
fn simsiam_parameter_gradients_treat_projections_as_constants() {
    assert_small("SimSiam", gradcheck::simsiam_detached());
}

#[test]
fn proximal_term_matches_finite_differences() {
    assert_small("proximal", gradcheck::proximal());
}
