mod common;

use vulnmil::encoder::Mode;

#[test]
fn every_op_matches_finite_differences() {
    for seed in [1, 2, 3] {
        for (name, err) in common::op_gradient_errors(seed) {
            assert!(err < 1e-4, "{name} (seed {seed}): relative error {err:e}");
        }
    }
}

#[test]
fn tiny_model_matches_finite_differences() {
    let model = common::tiny_model(11);
    for k in [1, 2] {
        let err = common::model_gradient_error(&model, &common::tiny_batch(), k, Mode::Eval);
        assert!(err < 1e-4, "k={k}: relative error {err:e}");
    }
}

#[test]
fn tiny_model_with_dropout_matches_finite_differences() {
    let err = common::model_gradient_error(&common::tiny_model(12), &common::tiny_batch(), 2, Mode::Train);
    assert!(err < 1e-4, "relative error {err:e}");
}
