mod common;

#[test]
fn every_trainable_path_matches_central_differences() {
    for (path, err) in common::gradient_errors(20, 1e-6) {
        assert!(err < 1e-4, "{path}: relative error {err:.2e}");
    }
}

#[test]
fn relative_error_is_scale_free() {
    let a = [1.0, -2.0, 3.0];
    let b = [1.0 + 1e-6, -2.0, 3.0];
    let scaled: Vec<f64> = a.iter().map(|v| v * 1e6).collect();
    let scaled_b: Vec<f64> = b.iter().map(|v| v * 1e6).collect();
    assert!((common::rel_err(&a, &b) - common::rel_err(&scaled, &scaled_b)).abs() < 1e-12);
}
