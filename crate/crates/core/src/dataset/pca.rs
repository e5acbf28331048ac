use nalgebra::SVD;
use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{argmax_abs, column_means, from_na, to_na};

/// Top right-singular subspace of centered data.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    pub mean: Array1<f64>,
    /// D × P, orthonormal columns.
    pub components: Array2<f64>,
    /// Non-increasing, length P.
    pub singular_values: Array1<f64>,
    pub whiten: bool,
    /// Rows the basis was fitted on; sets the whitening scale √N / s.
    pub n_samples: usize,
}

impl PcaBasis {
    pub fn input_dim(&self) -> usize {
        self.components.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.components.ncols()
    }

    fn whitening_scale(&self) -> Array1<f64> {
        let root_n = (self.n_samples as f64).sqrt();
        self.singular_values.mapv(|s| root_n / s)
    }
}

/// Fits a `p`-component basis by SVD of the centered data matrix.
///
/// Each component is signed so that its largest-magnitude entry is positive
/// (ties resolved toward the lower feature index).
pub fn pca_fit(d: &Dataset, p: usize, whiten: bool) -> Result<PcaBasis> {
    fit_matrix(d.x.view(), p, whiten)
}

pub(crate) fn fit_matrix(x: ArrayView2<f64>, p: usize, whiten: bool) -> Result<PcaBasis> {
    let (n, dim) = x.dim();
    let max_p = n.min(dim);
    if p == 0 || p > max_p {
        return Err(Error::arg(format!("PCA dimension {p} outside 1..={max_p}")));
    }
    let mean = column_means(x);
    let centered = &x - &mean.view().insert_axis(Axis(0));
    let svd = SVD::new(to_na(centered.view()), false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let sv = svd.singular_values;

    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));

    let v_t = from_na(&v_t);
    let mut components = Array2::zeros((dim, p));
    let mut singular_values = Array1::zeros(p);
    for (k, &src) in order.iter().take(p).enumerate() {
        let mut col = v_t.row(src).to_owned();
        if col[argmax_abs(col.view())] < 0.0 {
            col.mapv_inplace(|v| -v);
        }
        components.column_mut(k).assign(&col);
        singular_values[k] = sv[src];
    }
    if whiten {
        let floor = 1e-12 * singular_values[0].max(f64::MIN_POSITIVE);
        if let Some(k) = singular_values.iter().position(|&s| s <= floor) {
            return Err(Error::numerical(format!(
                "cannot whiten: component {k} has (near) zero variance"
            )));
        }
    }
    Ok(PcaBasis { mean, components, singular_values, whiten, n_samples: n })
}

/// (x − mean)·components, scaled by √N / s per component when whitening.
pub fn pca_transform(b: &PcaBasis, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != b.input_dim() {
        return Err(Error::arg(format!(
            "expected {} features, got {}",
            b.input_dim(),
            x.ncols()
        )));
    }
    let centered = &x - &b.mean.view().insert_axis(Axis(0));
    let mut y = centered.dot(&b.components);
    if b.whiten {
        y *= &b.whitening_scale().insert_axis(Axis(0));
    }
    Ok(y)
}

/// Adjoint reconstruction back into feature space (mean restored).
pub fn pca_inverse(b: &PcaBasis, y: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut x = pca_back_project(b, y)?;
    x += &b.mean.view().insert_axis(Axis(0));
    Ok(x)
}

/// Linear part of [`pca_inverse`]; maps directions (not points) back to
/// feature space.
pub fn pca_back_project(b: &PcaBasis, y: ArrayView2<f64>) -> Result<Array2<f64>> {
    if y.ncols() != b.n_components() {
        return Err(Error::arg(format!(
            "expected {} components, got {}",
            b.n_components(),
            y.ncols()
        )));
    }
    let y = if b.whiten {
        let unscale = b.whitening_scale().mapv(|s| 1.0 / s);
        &y * &unscale.insert_axis(Axis(0))
    } else {
        y.to_owned()
    };
    Ok(y.dot(&b.components.t()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;
    use crate::linalg::frobenius;
    use ndarray::Array1;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::rng::stream(seed, 77, 0);
        Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))
    }

    fn ds(x: Array2<f64>) -> Dataset {
        let n = x.nrows();
        Dataset::new(x, vec![0; n]).unwrap()
    }

    #[test]
    fn rank_one_exact() {
        let v = Array1::from(vec![0.6, -0.8, 0.0]);
        let a = Array1::from_iter((0..20).map(|t| (t as f64 * 0.37).sin() + 0.1 * t as f64));
        let x = a.insert_axis(Axis(1)).dot(&v.view().insert_axis(Axis(0)));
        let b = pca_fit(&ds(x.clone()), 1, false).unwrap();
        let c = b.components.column(0);
        // sign convention: largest |entry| (-0.8) becomes positive
        assert!((c[1] - 0.8).abs() < 1e-12 && (c[0] + 0.6).abs() < 1e-12);
        let rec = pca_inverse(&b, pca_transform(&b, x.view()).unwrap().view()).unwrap();
        assert!(frobenius((&rec - &x).view()) < 1e-10);
    }

    #[test]
    fn full_rank_round_trip() {
        let x = gaussian(40, 6, 1);
        for whiten in [false, true] {
            let b = pca_fit(&ds(x.clone()), 6, whiten).unwrap();
            let y = pca_transform(&b, x.view()).unwrap();
            let back = pca_inverse(&b, y.view()).unwrap();
            assert!((&back - &x).iter().all(|e| e.abs() < 1e-8));
        }
    }

    #[test]
    fn leading_variance_matches_covariance() {
        let mut x = gaussian(10000, 2, 2);
        x.column_mut(0).mapv_inplace(|v| 2.0 * v);
        let b = pca_fit(&ds(x), 2, false).unwrap();
        let lead = b.singular_values[0].powi(2) / 10000.0;
        assert!((lead - 4.0).abs() < 0.4, "lead variance {lead}");
    }

    #[test]
    fn mean_maps_to_zero_and_whitening_decorrelates() {
        let mut x = gaussian(5000, 4, 3);
        let c0 = x.column(0).to_owned();
        x.column_mut(1).zip_mut_with(&c0, |a, b| *a += 2.0 * b);
        let b = pca_fit(&ds(x.clone()), 3, true).unwrap();
        let y = pca_transform(&b, b.mean.view().insert_axis(Axis(0))).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-12));
        let y = pca_transform(&b, x.view()).unwrap();
        let cov = y.t().dot(&y) / 5000.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((cov[[i, j]] - target).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn argument_errors() {
        let x = gaussian(5, 3, 4);
        assert!(matches!(pca_fit(&ds(x.clone()), 0, false), Err(Error::Argument(_))));
        assert!(matches!(pca_fit(&ds(x.clone()), 4, false), Err(Error::Argument(_))));
        let b = pca_fit(&ds(x), 2, false).unwrap();
        assert!(pca_transform(&b, Array2::zeros((1, 2)).view()).is_err());
        assert!(pca_inverse(&b, Array2::zeros((1, 3)).view()).is_err());
    }

    fn residual_norm(x: &Array2<f64>, p: usize) -> f64 {
        let b = pca_fit(&ds(x.clone()), p, false).unwrap();
        let rec = pca_inverse(&b, pca_transform(&b, x.view()).unwrap().view()).unwrap();
        frobenius((x - &rec).view())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn components_orthonormal_and_residual_orthogonal(seed in 0u64..1000, n in 3usize..20, d in 2usize..8) {
            let x = gaussian(n, d, seed);
            let maxp = n.min(d);
            let mut prev = f64::INFINITY;
            for p in 1..=maxp {
                let b = pca_fit(&ds(x.clone()), p, false).unwrap();
                let gram = b.components.t().dot(&b.components);
                for i in 0..p {
                    for j in 0..p {
                        let t = if i == j { 1.0 } else { 0.0 };
                        prop_assert!((gram[[i, j]] - t).abs() < 1e-8);
                    }
                }
                for k in 1..p {
                    prop_assert!(b.singular_values[k] <= b.singular_values[k - 1]);
                }
                let rec = pca_inverse(&b, pca_transform(&b, x.view()).unwrap().view()).unwrap();
                let resid = &x - &rec;
                let proj = resid.dot(&b.components);
                prop_assert!(frobenius(proj.view()) < 1e-8);
                let r = residual_norm(&x, p);
                prop_assert!(r <= prev + 1e-9);
                prev = r;
            }
        }
    }
}
