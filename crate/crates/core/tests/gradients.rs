use rfpose::check::{model_gradcheck_config, op_checks, tiny_model_gradchecks};

#[test]
fn every_cataloged_op_passes() {
    for line in op_checks(11) {
        assert!(line.passed, "{line:?}");
        assert!(line.max_error < 1e-5);
    }
}

#[test]
fn set_loss_gradients_match_finite_differences() {
    let (set, _) = tiny_model_gradchecks(3, &model_gradcheck_config(3)).unwrap();
    assert!(set.passed(), "{set:?}");
    assert!(set.checked > 1000);
}

#[test]
fn reconstruction_loss_gradients_match_finite_differences() {
    let (_, recon) = tiny_model_gradchecks(5, &model_gradcheck_config(5)).unwrap();
    assert!(recon.passed(), "{recon:?}");
}

#[test]
fn model_checks_hold_across_seeds() {
    for seed in 0..8 {
        let (set, recon) = tiny_model_gradchecks(seed, &model_gradcheck_config(seed)).unwrap();
        assert!(set.passed(), "seed {seed}: {set:?}");
        assert!(recon.passed(), "seed {seed}: {recon:?}");
    }
}
