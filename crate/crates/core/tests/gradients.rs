mod common;

use common::{gradient_errors, tiny_textcnn, tiny_transformer_literal, tiny_transformer_residual, worst, GRAD_TOL};

fn check(config: smoothlab::ModelConfig) {
    for seed in [1, 2, 3] {
        let errors = gradient_errors(config.clone(), seed);
        let (name, err) = worst(&errors);
        assert!(
            err <= GRAD_TOL,
            "seed {seed}: {name} relative error {err:e}\n{errors:?}"
        );
    }
}

#[test]
fn textcnn_gradients_match_finite_differences() {
    check(tiny_textcnn());
}

#[test]
fn literal_transformer_gradients_match_finite_differences() {
    check(tiny_transformer_literal());
}

#[test]
fn residual_norm_transformer_gradients_match_finite_differences() {
    check(tiny_transformer_residual());
}

#[test]
fn every_tensor_is_checked() {
    let names: Vec<String> = gradient_errors(tiny_transformer_residual(), 1)
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    for expected in [
        "embedding",
        "positions",
        "layer1.head0.w_q",
        "layer0.w_o",
        "layer1.norm2.beta",
        "classifier.w_y",
    ] {
        assert!(names.iter().any(|n| n == expected), "{expected} missing from {names:?}");
    }
}
