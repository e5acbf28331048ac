use ndarray::Array2;
use tcsep::model::{sample_eps, LatentPosterior};
use tcsep::objective::{gaussian_total_correlation_2d, kl_terms, AggregateEstimator};
use tcsep::rng;

/// Batch of B unit-variance Gaussian posteriors whose mixture is a 2-D
/// Gaussian with correlation `rho`.
fn correlated_batch(rho: f64, b: usize, seed: u64) -> (Array2<f64>, LatentPosterior) {
    let s2 = 0.5 * (1.0 - rho.abs());
    let a = 1.0 - s2;
    let (l11, l21) = (a.sqrt(), rho / a.sqrt());
    let l22 = (a - l21 * l21).sqrt();
    let mut g = rng::stream(seed, 610, b as u64);
    let n = sample_eps(&mut g, b, 2);
    let mut mu = Array2::zeros((b, 2));
    for i in 0..b {
        mu[[i, 0]] = l11 * n[[i, 0]];
        mu[[i, 1]] = l21 * n[[i, 0]] + l22 * n[[i, 1]];
    }
    let z = &mu + &(sample_eps(&mut g, b, 2) * s2.sqrt());
    (z, LatentPosterior::new(mu, Array2::from_elem((b, 2), s2.sqrt())).unwrap())
}

fn mean_abs_error(rho: f64, b: usize, seeds: u64) -> f64 {
    let truth = gaussian_total_correlation_2d(rho);
    (0..seeds)
        .map(|s| {
            let (z, post) = correlated_batch(rho, b, s);
            let (t, _) = kl_terms(z.view(), &post, 1.0, AggregateEstimator::BatchMixture, false).unwrap();
            (t.tc - truth).abs()
        })
        .sum::<f64>()
        / seeds as f64
}

#[test]
fn tc_estimate_approaches_gaussian_value_as_batch_grows() {
    let errs: Vec<f64> = [32, 128, 512].iter().map(|&b| mean_abs_error(0.9, b, 6)).collect();
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    assert!(errs[2] < 0.05, "{errs:?}");
}

#[test]
fn independent_mixture_has_small_tc() {
    assert!(mean_abs_error(0.0, 512, 6) < 0.02);
}
