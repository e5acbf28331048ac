//! Linear ICA baseline: PCA whitening followed by full-batch
//! natural-gradient InfoMax with a logistic nonlinearity.

use ndarray::{Array2, Axis};

use crate::analysis::{ComponentSet, Method};
use crate::dataset::{pca_back_project, pca_fit, pca_transform, Dataset, PcaBasis};
use crate::error::{Error, Result};
use crate::linalg::{column_means, frobenius, from_na, to_na};

/// When to shrink the learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Anneal {
    /// Whenever the relative update norm grows.
    OnNormGrowth,
    /// Whenever consecutive updates turn by more than this many degrees.
    OnAngle(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcaConfig {
    pub eta: f64,
    pub anneal: Anneal,
    pub anneal_factor: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Frobenius norm of `w` treated as divergence.
    pub max_norm: f64,
}

impl Default for IcaConfig {
    fn default() -> Self {
        Self { eta: 0.1, anneal: Anneal::OnAngle(60.0), anneal_factor: 0.9, max_iter: 5000, tol: 1e-7, max_norm: 1e6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnmixingModel {
    pub whitener: PcaBasis,
    /// k × k unmixing matrix in whitened space.
    pub w: Array2<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_eta: f64,
}

fn frob(m: &Array2<f64>) -> f64 {
    frobenius(m.view())
}

pub fn infomax_fit(d: &Dataset, k: usize, cfg: &IcaConfig) -> Result<UnmixingModel> {
    if k == 0 || k > d.n_rows().min(d.feature_dim()) {
        return Err(Error::arg(format!("k = {k} must lie in 1..=min(rows, features)")));
    }
    if !(cfg.eta > 0.0) || !(cfg.anneal_factor > 0.0 && cfg.anneal_factor <= 1.0) {
        return Err(Error::arg("eta must be positive and the anneal factor in (0, 1]"));
    }
    let whitener = pca_fit(d, k, true)?;
    let y = pca_transform(&whitener, d.x.view())?;
    let n = y.nrows() as f64;
    let eye = Array2::<f64>::eye(k);
    let mut w = Array2::<f64>::eye(k);
    let mut eta = cfg.eta;
    let mut prev_change = f64::INFINITY;
    let mut prev_step: Option<Array2<f64>> = None;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let u = y.dot(&w.t());
        let phi = u.mapv(|v| 1.0 - 2.0 / (1.0 + (-v).exp()));
        let grad = (&eye + &(phi.t().dot(&u) / n)).dot(&w);
        let step = grad * eta;
        w += &step;
        iterations += 1;
        let norm = frob(&w);
        if !norm.is_finite() || norm > cfg.max_norm {
            return Err(Error::numerical(format!(
                "InfoMax diverged after {iterations} iterations (|w| = {norm:e}); use a smaller eta"
            )));
        }
        let change = frob(&step) / norm;
        if change < cfg.tol {
            converged = true;
            break;
        }
        let shrink = match cfg.anneal {
            Anneal::OnNormGrowth => change > prev_change,
            Anneal::OnAngle(deg) => prev_step.as_ref().is_some_and(|p| {
                let cos = (p * &step).sum() / (frob(p) * frob(&step));
                cos.clamp(-1.0, 1.0).acos().to_degrees() > deg
            }),
        };
        if shrink {
            eta *= cfg.anneal_factor;
        }
        prev_change = change;
        prev_step = Some(step);
    }
    Ok(UnmixingModel { whitener, w, converged, iterations, final_eta: eta })
}

/// Per-subject centered sources and back-projected mixing maps.
pub fn unmix(m: &UnmixingModel, d: &Dataset) -> Result<ComponentSet> {
    if d.feature_dim() != m.whitener.input_dim() {
        return Err(Error::arg(format!(
            "model was fitted on {} features, data has {}",
            m.whitener.input_dim(),
            d.feature_dim()
        )));
    }
    let y = pca_transform(&m.whitener, d.x.view())?;
    let u = y.dot(&m.w.t());
    let tcs = (0..d.n_subjects())
        .map(|s| {
            let mut t = u.slice(ndarray::s![d.subject_rows(s), ..]).to_owned();
            let mean = column_means(t.view());
            t -= &mean.insert_axis(Axis(0));
            t
        })
        .collect();
    let pinv = to_na(m.w.view())
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::numerical(format!("cannot invert unmixing matrix: {e}")))?;
    // y ≈ u · pinv(w)ᵀ, so the rows of pinv(w)ᵀ are whitened-space maps.
    let maps = pca_back_project(&m.whitener, from_na(&pinv).t())?;
    ComponentSet::new(maps, tcs, Method::Infomax)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{mcc, mcc_score, reconstruct, MccMode};
    use crate::dataset::{standardize, synth_generate, SynthConfig};
    use crate::linalg::{cross_correlation, pearson};
    use crate::rng;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn laplace_pair(t: usize) -> (Dataset, Array2<f64>) {
        let mut g = rng::stream(17, 900, 0);
        let s = Array2::from_shape_fn((t, 2), |_| {
            let u: f64 = g.random::<f64>() - 0.5;
            -u.signum() * (1.0 - 2.0 * u.abs()).ln()
        });
        let a = array![[1.0, 0.6], [0.4, 1.0]];
        (Dataset::from_blocks(&[s.dot(&a)]).unwrap(), s)
    }

    #[test]
    fn separates_two_laplace_sources() {
        let (d, s) = laplace_pair(5000);
        let m = infomax_fit(&d, 2, &IcaConfig::default()).unwrap();
        assert!(m.converged);
        let cs = unmix(&m, &d).unwrap();
        let c = cross_correlation(cs.stacked_timecourses().view(), s.view()).mapv(f64::abs);
        let best = c[[0, 0]] + c[[1, 1]] > c[[0, 1]] + c[[1, 0]];
        let (r1, r2) = if best { (c[[0, 0]], c[[1, 1]]) } else { (c[[0, 1]], c[[1, 0]]) };
        assert!(r1 > 0.99 && r2 > 0.99, "{c}");
    }

    #[test]
    fn gaussian_sources_do_not_fail() {
        let mut g = rng::stream(18, 900, 0);
        let x = Array2::from_shape_fn((1000, 3), |_| g.sample::<f64, _>(StandardNormal));
        let d = Dataset::from_blocks(&[x]).unwrap();
        let m = infomax_fit(&d, 3, &IcaConfig { max_iter: 300, ..IcaConfig::default() }).unwrap();
        assert!(m.w.iter().all(|v| v.is_finite()));
        unmix(&m, &d).unwrap();
    }

    #[test]
    fn fits_are_deterministic() {
        let (d, _) = laplace_pair(800);
        let a = infomax_fit(&d, 2, &IcaConfig::default()).unwrap();
        let b = infomax_fit(&d, 2, &IcaConfig::default()).unwrap();
        assert_eq!(a.w, b.w);
    }

    #[test]
    fn identity_unmixing_gives_whitened_pca_components() {
        let (d, _) = laplace_pair(300);
        let m = infomax_fit(&d, 2, &IcaConfig { max_iter: 0, ..IcaConfig::default() }).unwrap();
        assert_eq!(m.w, Array2::eye(2));
        let cs = unmix(&m, &d).unwrap();
        let y = pca_transform(&m.whitener, d.x.view()).unwrap();
        for c in 0..2 {
            let r = pearson(cs.timecourses[0].column(c), y.column(c)).unwrap();
            assert!((r.abs() - 1.0).abs() < 1e-12);
            let r = pearson(cs.spatial.row(c), m.whitener.components.column(c)).unwrap();
            assert!((r.abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let (d, _) = laplace_pair(50);
        assert!(matches!(infomax_fit(&d, 3, &IcaConfig::default()), Err(Error::Argument(_))));
        let bad = IcaConfig { eta: 50.0, anneal: Anneal::OnAngle(180.0), ..IcaConfig::default() };
        assert!(matches!(infomax_fit(&d, 2, &bad), Err(Error::Numerical(_))));
    }

    #[test]
    fn linear_synthetic_recovery() {
        let cfg = SynthConfig { timepoints: 2000, ..SynthConfig::default() };
        let (d, truth) = synth_generate(&cfg).unwrap();
        let d = standardize(&d).unwrap();
        let m = infomax_fit(&d, 5, &IcaConfig::default()).unwrap();
        let cs = unmix(&m, &d).unwrap();
        let score = mcc_score(&cs, &truth, MccMode::Time).unwrap();
        assert!(score >= 0.95, "MCC {score}");
        let u = cs.stacked_timecourses();
        let c = cross_correlation(u.view(), u.view());
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert!(c[[i, j]].abs() < 0.05, "corr({i},{j}) = {}", c[[i, j]]);
                }
            }
        }
        let _ = mcc;
    }

    #[test]
    fn reconstructs_noiseless_data() {
        let cfg = SynthConfig { timepoints: 2000, noise_std: 0.0, ..SynthConfig::default() };
        let (d, _) = synth_generate(&cfg).unwrap();
        let d = standardize(&d).unwrap();
        let m = infomax_fit(&d, 5, &IcaConfig::default()).unwrap();
        let cs = unmix(&m, &d).unwrap();
        let mut centered = d.x.clone();
        for s in 0..d.n_subjects() {
            let mut b = centered.slice_mut(ndarray::s![d.subject_rows(s), ..]);
            let mean = column_means(b.view());
            b -= &mean.insert_axis(Axis(0));
        }
        let resid = frob(&(&centered - &reconstruct(&cs))) / frob(&d.x);
        assert!(resid < 0.2, "relative residual {resid}");
    }
}
