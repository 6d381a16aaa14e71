mod common;

use common::*;

fn assert_cases(what: &str, cases: Vec<GradCase>, tol: f64) {
    assert!(cases.len() >= 100);
    let (w, c) = worst(&cases);
    assert!(w < tol, "{what}: worst relative error {w:.3e} at {c:?}");
}

#[test]
fn clip_towers_match_finite_differences() {
    assert_cases("clip", clip_cases(100, 1), 1e-4);
}

#[test]
fn recon_extractors_and_decoder_match_finite_differences() {
    assert_cases("recon", recon_cases(100, 2), 1e-4);
}

#[test]
fn fusion_map_matches_finite_differences() {
    assert_cases("fusion", fusion_cases(100, 3), 1e-4);
}

#[test]
fn language_model_matches_finite_differences() {
    assert_cases("lm", lm_cases(100, 4), 1e-4);
}

#[test]
fn tta_surrogate_matches_finite_differences() {
    assert_cases("tta", tta_cases(100, 5), 1e-3);
}
