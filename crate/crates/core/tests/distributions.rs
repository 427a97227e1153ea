//! Monte-Carlo checks of the sampling distributions against closed forms, at
//! 10^5 draws and 3 standard errors.

mod oracles;

use oracles::distributions as d;

#[test]
fn weight_sign_frequencies() {
    d::weight_signs().unwrap();
}

#[test]
fn sampled_export_weight_frequency() {
    d::sampled_export().unwrap();
}

#[test]
fn binarization_matches_gaussian_sign_frequencies() {
    d::binarization().unwrap();
}

#[test]
fn concrete_hard_sign_frequency_at_low_temperature() {
    d::concrete_low_temperature().unwrap();
}

#[test]
fn maxpool_selection_frequencies() {
    d::maxpool().unwrap();
}

#[test]
fn batchnorm_expected_statistics() {
    d::batchnorm_statistics().unwrap();
}

#[test]
fn batchnorm_sampling_consistency() {
    d::batchnorm_sampling().unwrap();
}
