use mcdp_core::estimators::{estimate, EstimatorConfig};
use mcdp_core::mechanism::MechanismSpec;
use mcdp_core::oracle::{convolution_delta, gaussian_exact_delta, ConvolutionParams};

// The replicate mean must land in [lower, upper] up to 4 standard errors,
// and the reported standard errors must match the observed spread.
fn check_replicates(spec: &MechanismSpec, eps: f64, lower: f64, upper: f64, config: impl Fn(u64) -> EstimatorConfig) {
    let n = 40;
    let runs: Vec<_> = (0..n).map(|seed| estimate(spec, eps, &config(seed)).unwrap()).collect();
    let mean = runs.iter().map(|e| e.value).sum::<f64>() / n as f64;
    let var = runs.iter().map(|e| (e.value - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let reported = runs.iter().map(|e| e.std_error.powi(2)).sum::<f64>() / n as f64;
    let se_mean = (var / n as f64).sqrt();
    assert!(mean > lower - 4.0 * se_mean && mean < upper + 4.0 * se_mean, "{mean} vs [{lower}, {upper}] se {se_mean}");
    assert!((0.4..2.5).contains(&(var / reported)), "observed {var} reported {reported}");
}

#[test]
fn smc_is_unbiased_for_gaussian() {
    let spec = MechanismSpec::gaussian(1.5, 3).unwrap();
    let truth = gaussian_exact_delta(1.5, 3, 0.5).unwrap();
    check_replicates(&spec, 0.5, truth, truth, |seed| EstimatorConfig::smc(20_000, seed));
}

#[test]
fn tilted_estimator_is_unbiased_for_subsampled_gaussian() {
    let spec = MechanismSpec::subsampled_gaussian(1.5, 0.05, 20).unwrap();
    let bracket = convolution_delta(&spec, 0.5, &ConvolutionParams::with_step(1e-4)).unwrap();
    check_replicates(&spec, 0.5, bracket.lower, bracket.upper, |seed| EstimatorConfig::is(20_000, 1000 + seed));
}

#[test]
fn tilted_estimator_beats_simple_monte_carlo_in_the_tail() {
    let spec = MechanismSpec::subsampled_gaussian(0.6, 1e-3, 100).unwrap();
    let smc = estimate(&spec, 1.5, &EstimatorConfig::smc(100_000, 1)).unwrap();
    let is = estimate(&spec, 1.5, &EstimatorConfig::is(100_000, 1)).unwrap();
    assert!(is.value > 0.0);
    assert!(is.second_moment < smc.second_moment.max(is.value * is.value * 1e3));
    assert!(is.std_error < is.value * 0.05, "{is:?}");
}
