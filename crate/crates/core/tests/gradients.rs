mod common;

use common::gradcheck;

#[test]
fn loss_gradients_match_finite_differences() {
    gradcheck::check_loss_grads(100, 11, 1e-5).unwrap();
}

#[test]
fn prompt_module_gradient_matches_finite_differences() {
    gradcheck::check_prompt_module(5, 1e-4).unwrap();
}

#[test]
fn decode_gradient_matches_finite_differences() {
    gradcheck::check_decoder(8, 1e-4).unwrap();
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let stats = gradcheck::check_end_to_end(100, 21, 1e-5).unwrap();
    assert!(stats.kinks < 15, "too many kinks: {stats:?}");
    assert!(
        stats.nonzero > 150,
        "gradient vanished for too many parameters: {stats:?}"
    );
}
