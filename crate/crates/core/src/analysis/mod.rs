//! Post-hoc component extraction and comparison.

mod fnc;
mod matching;

use std::path::Path;

use nalgebra::Cholesky;
use ndarray::{concatenate, Array1, Array2, ArrayD, ArrayView2, Axis};

pub use fnc::{fnc, hcluster, hcluster_order, write_fnc_csv, Dendrogram, FncMatrix, Merge};
pub use matching::{
    assign_brute_force, assign_hungarian, assign_max, match_components, mcc, mcc_score, write_matching_csv,
    Matching, MccMode,
};

use crate::dataset::{pca_back_project, Dataset, PcaBasis};
use crate::error::{Error, Result};
use crate::linalg::{argmax_abs, column_means, from_na, to_na};
use crate::model::{decode, encode, ModelParams};
use crate::tcsf::{load_bundle, save_bundle, take, take_matrix, Bundle};

pub const RIDGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    TcvaeRegression,
    TcvaeJacobian,
    Infomax,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::TcvaeRegression => "tcvae_regression",
            Method::TcvaeJacobian => "tcvae_jacobian",
            Method::Infomax => "infomax",
        }
    }

    fn code(self) -> f64 {
        match self {
            Method::TcvaeRegression => 0.0,
            Method::TcvaeJacobian => 1.0,
            Method::Infomax => 2.0,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(Method::TcvaeRegression),
            1 => Ok(Method::TcvaeJacobian),
            2 => Ok(Method::Infomax),
            _ => Err(Error::format(format!("unknown method code {c}"))),
        }
    }
}

/// Spatial maps with their per-subject time courses.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentSet {
    /// K × D_original, unit rows, largest-magnitude entry positive.
    pub spatial: Array2<f64>,
    /// One T_s × K block per subject, columns zero-mean.
    pub timecourses: Vec<Array2<f64>>,
    pub method: Method,
    /// Source index (latent or ICA row) of each component.
    pub latent_order: Vec<usize>,
}

impl ComponentSet {
    /// Normalizes maps and rescales time courses so `tc · maps` is preserved.
    /// All-zero maps are left as they are.
    pub fn new(mut spatial: Array2<f64>, mut timecourses: Vec<Array2<f64>>, method: Method) -> Result<Self> {
        let k = spatial.nrows();
        if timecourses.iter().any(|t| t.ncols() != k) {
            return Err(Error::arg("time courses and maps disagree on K"));
        }
        for (c, mut row) in spatial.axis_iter_mut(Axis(0)).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let sign = row[argmax_abs(row.view())].signum();
            row.mapv_inplace(|v| v * sign / norm);
            for t in &mut timecourses {
                t.column_mut(c).mapv_inplace(|v| v * norm * sign);
            }
        }
        Ok(Self { spatial, timecourses, method, latent_order: (0..k).collect() })
    }

    pub fn n_components(&self) -> usize {
        self.spatial.nrows()
    }

    /// All subjects' time courses stacked in row order.
    pub fn stacked_timecourses(&self) -> Array2<f64> {
        let views: Vec<_> = self.timecourses.iter().map(|t| t.view()).collect();
        concatenate(Axis(0), &views).expect("equal column counts")
    }

    /// Keeps the `n` components with the largest time-course variance,
    /// ordered by decreasing variance (ties to the lower index).
    pub fn select_by_variance(&self, n: usize) -> Result<Self> {
        let k = self.n_components();
        if n == 0 || n > k {
            return Err(Error::arg(format!("cannot select {n} of {k} components")));
        }
        let all = self.stacked_timecourses();
        let var: Vec<f64> = all.axis_iter(Axis(1)).map(|c| c.iter().map(|v| v * v).sum::<f64>()).collect();
        let mut idx: Vec<usize> = (0..k).collect();
        idx.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
        idx.truncate(n);
        Ok(Self {
            spatial: self.spatial.select(Axis(0), &idx),
            timecourses: self.timecourses.iter().map(|t| t.select(Axis(1), &idx)).collect(),
            method: self.method,
            latent_order: idx.iter().map(|&i| self.latent_order[i]).collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut b: Bundle = vec![
            ("method".into(), Array1::from_elem(1, self.method.code()).into_dyn()),
            ("latent_order".into(), self.latent_order.iter().map(|&i| i as f64).collect::<Array1<f64>>().into_dyn()),
            ("spatial".into(), self.spatial.clone().into_dyn()),
        ];
        for (s, t) in self.timecourses.iter().enumerate() {
            b.push((format!("timecourses.{s}"), t.clone().into_dyn()));
        }
        save_bundle(path, &b)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut b = load_bundle(path)?;
        let method: ArrayD<f64> = take(&mut b, "method")?;
        let method = Method::from_code(*method.iter().next().ok_or_else(|| Error::format("empty method record"))?)?;
        let latent_order = take(&mut b, "latent_order")?.iter().map(|&v| v as usize).collect();
        let spatial = take_matrix(&mut b, "spatial")?;
        let mut timecourses = Vec::new();
        while b.iter().any(|(n, _)| *n == format!("timecourses.{}", timecourses.len())) {
            let name = format!("timecourses.{}", timecourses.len());
            timecourses.push(take_matrix(&mut b, &name)?);
        }
        Ok(Self { spatial, timecourses, method, latent_order })
    }
}

fn center_columns(mut t: Array2<f64>) -> Array2<f64> {
    if t.nrows() > 0 {
        let m = column_means(t.view());
        t -= &m.insert_axis(Axis(0));
    }
    t
}

fn check_model_input(p: &ModelParams, d: &Dataset) -> Result<()> {
    if d.feature_dim() != p.arch.input_dim || d.n_subjects() != p.arch.n_subjects {
        return Err(Error::arg(format!(
            "checkpoint expects {} features and {} subjects, data has {} and {}",
            p.arch.input_dim,
            p.arch.n_subjects,
            d.feature_dim(),
            d.n_subjects()
        )));
    }
    Ok(())
}

/// Posterior means per subject, each column centered within the subject.
pub fn latent_timecourses(p: &ModelParams, d: &Dataset) -> Result<Vec<Array2<f64>>> {
    check_model_input(p, d)?;
    (0..d.n_subjects())
        .map(|s| {
            let rows = d.subject_rows(s);
            let ids = vec![s; rows.len()];
            Ok(center_columns(encode(p, d.subject_block(s), &ids)?.mu))
        })
        .collect()
}

fn back_project(maps: Array2<f64>, pca: Option<&PcaBasis>) -> Result<Array2<f64>> {
    match pca {
        Some(b) => pca_back_project(b, maps.view()),
        None => Ok(maps),
    }
}

/// Ridge least squares `argmin ‖X − TC·M‖²` per subject, averaged over
/// subjects and mapped back through `pca`.
pub fn spatial_maps_regression(
    tcs: &[Array2<f64>],
    d: &Dataset,
    pca: Option<&PcaBasis>,
    method: Method,
) -> Result<ComponentSet> {
    if tcs.len() != d.n_subjects() {
        return Err(Error::arg("one time-course block per subject required"));
    }
    let k = tcs.first().map_or(0, |t| t.ncols());
    let mut sum = Array2::<f64>::zeros((k, d.feature_dim()));
    for (s, tc) in tcs.iter().enumerate() {
        let x = d.subject_block(s);
        if tc.nrows() != x.nrows() || tc.ncols() != k {
            return Err(Error::arg(format!("time courses of subject {s} are misaligned with the data")));
        }
        sum += &ridge_solve(tc.view(), x)?;
    }
    let maps = back_project(sum / tcs.len() as f64, pca)?;
    ComponentSet::new(maps, tcs.to_vec(), method)
}

fn ridge_solve(tc: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut gram = tc.t().dot(&tc);
    gram.diag_mut().mapv_inplace(|v| v + RIDGE);
    let chol = Cholesky::new(to_na(gram.view()))
        .ok_or_else(|| Error::numerical("time-course Gram matrix is not positive definite"))?;
    let m = from_na(&chol.solve(&to_na(tc.t().dot(&x).view())));
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("regression maps are not finite"));
    }
    Ok(m)
}

/// Decoder Jacobian rows `∂x̂/∂z_k` at a latent point (K × D).
pub fn decoder_jacobian(p: &ModelParams, z: ArrayView2<f64>) -> Array2<f64> {
    debug_assert_eq!(z.nrows(), 1);
    let a1 = p.dec1.forward(z);
    let a2 = p.dec2.forward(a1.mapv(|v| v.max(0.0)).view());
    let mask = |a: &Array2<f64>| a.row(0).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let j1 = &p.dec1.w * &mask(&a1).insert_axis(Axis(0));
    let j2 = j1.dot(&p.dec2.w) * &mask(&a2).insert_axis(Axis(0));
    j2.dot(&p.dec_out.w)
}

/// Maps from decoder Jacobians averaged over `n_probe` posterior means taken
/// at evenly spaced rows.
pub fn spatial_maps_jacobian(
    p: &ModelParams,
    d: &Dataset,
    n_probe: usize,
    pca: Option<&PcaBasis>,
) -> Result<ComponentSet> {
    check_model_input(p, d)?;
    let n = d.n_rows();
    if n_probe == 0 || n_probe > n {
        return Err(Error::arg(format!("n_probe must lie in 1..={n}")));
    }
    let rows: Vec<usize> = (0..n_probe).map(|i| i * n / n_probe).collect();
    let x = d.x.select(Axis(0), &rows);
    let s: Vec<usize> = rows.iter().map(|&r| d.subject_of_row[r]).collect();
    let mu = encode(p, x.view(), &s)?.mu;
    let mut sum = Array2::<f64>::zeros((p.arch.latent_dim, p.arch.input_dim));
    for z in mu.axis_iter(Axis(0)) {
        sum += &decoder_jacobian(p, z.insert_axis(Axis(0)));
    }
    let maps = back_project(sum / n_probe as f64, pca)?;
    ComponentSet::new(maps, latent_timecourses(p, d)?, Method::TcvaeJacobian)
}

/// Reconstructs data from a component set (`TC · maps`, stacked).
pub fn reconstruct(cs: &ComponentSet) -> Array2<f64> {
    cs.stacked_timecourses().dot(&cs.spatial)
}

/// Decodes posterior means; useful for inspecting fit quality.
pub fn reconstruct_through_model(p: &ModelParams, d: &Dataset) -> Result<Array2<f64>> {
    check_model_input(p, d)?;
    let mu = encode(p, d.x.view(), &d.subject_of_row)?.mu;
    decode(p, mu.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{pca_fit, pca_transform, synth_generate, SynthConfig};
    use crate::linalg::pearson;
    use crate::model::{init_params, ArchSpec};
    use crate::rng;
    use ndarray::{array, s};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn randn(seed: u64, r: usize, c: usize) -> Array2<f64> {
        let mut g = rng::stream(seed, 800, 0);
        Array2::from_shape_fn((r, c), |_| g.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn normalization_conventions() {
        let maps = array![[0.0, -3.0, 4.0], [0.0, -4.0, 3.0]];
        let tc = vec![array![[1.0, 1.0], [-1.0, -1.0]]];
        let cs = ComponentSet::new(maps.clone(), tc.clone(), Method::Infomax).unwrap();
        assert_eq!(cs.spatial.row(0).to_vec(), vec![0.0, -0.6, 0.8]);
        assert_eq!(cs.spatial.row(1).to_vec(), vec![0.0, 0.8, -0.6]);
        let before = tc[0].dot(&maps);
        let after = reconstruct(&cs);
        assert!((&before - &after).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn constant_encoder_gives_zero_timecourses() {
        let arch = ArchSpec { input_dim: 4, embed_dim: 2, latent_dim: 3, hidden: [5, 5], n_subjects: 2 };
        let mut p = init_params(arch, 1);
        for l in [&mut p.enc1, &mut p.enc2, &mut p.enc_mu, &mut p.enc_logvar] {
            l.w.fill(0.0);
        }
        p.enc_mu.b.fill(0.7);
        let d = Dataset::from_blocks(&[randn(1, 7, 4), randn(2, 9, 4)]).unwrap();
        let tcs = latent_timecourses(&p, &d).unwrap();
        assert_eq!(tcs.iter().map(|t| t.nrows()).collect::<Vec<_>>(), vec![7, 9]);
        assert!(tcs.iter().all(|t| t.iter().all(|&v| v.abs() < 1e-12)));
    }

    #[test]
    fn timecourses_are_deterministic_and_centered() {
        let arch = ArchSpec { input_dim: 4, embed_dim: 2, latent_dim: 3, hidden: [5, 5], n_subjects: 2 };
        let p = init_params(arch, 2);
        let d = Dataset::from_blocks(&[randn(3, 7, 4), randn(4, 9, 4)]).unwrap();
        let a = latent_timecourses(&p, &d).unwrap();
        assert_eq!(a, latent_timecourses(&p, &d).unwrap());
        for t in &a {
            assert!(column_means(t.view()).iter().all(|m| m.abs() < 1e-12));
        }
        let wrong = Dataset::from_blocks(&[randn(3, 7, 5)]).unwrap();
        assert!(matches!(latent_timecourses(&p, &wrong), Err(Error::Argument(_))));
    }

    #[test]
    fn regression_recovers_noiseless_maps() {
        let cfg = SynthConfig { noise_std: 0.0, ..SynthConfig::default() };
        let (d, truth) = synth_generate(&cfg).unwrap();
        let tcs: Vec<Array2<f64>> = (0..d.n_subjects())
            .map(|s| truth.true_timecourses.slice(s![d.subject_rows(s), ..]).to_owned())
            .collect();
        let cs = spatial_maps_regression(&tcs, &d, None, Method::TcvaeRegression).unwrap();
        for k in 0..cfg.k_true {
            let r = pearson(cs.spatial.row(k), truth.true_spatial.row(k)).unwrap();
            assert!(r.abs() > 0.999, "component {k}: r = {r}");
        }
    }

    #[test]
    fn regression_through_pca_recovers_maps() {
        let cfg = SynthConfig { noise_std: 0.0, ..SynthConfig::default() };
        let (d, truth) = synth_generate(&cfg).unwrap();
        let basis = pca_fit(&d, cfg.k_true, true).unwrap();
        let dp = d.with_features(pca_transform(&basis, d.x.view()).unwrap()).unwrap();
        let tcs: Vec<Array2<f64>> = (0..d.n_subjects())
            .map(|s| truth.true_timecourses.slice(s![d.subject_rows(s), ..]).to_owned())
            .collect();
        let cs = spatial_maps_regression(&tcs, &dp, Some(&basis), Method::TcvaeRegression).unwrap();
        assert_eq!(cs.spatial.ncols(), 50);
        for k in 0..cfg.k_true {
            assert!(pearson(cs.spatial.row(k), truth.true_spatial.row(k)).unwrap().abs() > 0.999);
        }
    }

    #[test]
    fn self_regression_peaks_at_source_voxel() {
        let x = randn(5, 40, 6);
        let d = Dataset::from_blocks(std::slice::from_ref(&x)).unwrap();
        let tc = vec![center_columns(x.slice(s![.., 2..3]).to_owned())];
        let cs = spatial_maps_regression(&tc, &d, None, Method::TcvaeRegression).unwrap();
        let corr: Vec<f64> = (0..6).map(|j| pearson(x.column(j), x.column(2)).unwrap().abs()).collect();
        assert_eq!(argmax_abs(cs.spatial.row(0)), 2);
        assert_eq!(argmax_abs(Array1::from(corr).view()), 2);
    }

    #[test]
    fn orthogonal_timecourses_give_scaled_covariances() {
        // Columns of a Hadamard-like design are exactly orthogonal.
        let tc = array![[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];
        let x = randn(6, 4, 5);
        let d = Dataset::from_blocks(std::slice::from_ref(&x)).unwrap();
        let cs = spatial_maps_regression(std::slice::from_ref(&tc), &d, None, Method::TcvaeRegression).unwrap();
        for k in 0..2 {
            let cov = tc.column(k).dot(&x);
            let r = pearson(cs.spatial.row(k), cov.view()).unwrap();
            assert!((r.abs() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn jacobian_of_linear_decoder_is_output_weights() {
        let arch = ArchSpec { input_dim: 5, embed_dim: 1, latent_dim: 2, hidden: [2, 2], n_subjects: 1 };
        let mut p = init_params(arch, 3);
        p.dec2.w = Array2::eye(2);
        p.dec1.w = Array2::eye(2);
        p.dec1.b.fill(100.0);
        p.dec2.b.fill(0.0);
        let d = Dataset::from_blocks(&[randn(7, 30, 5)]).unwrap();
        let a = spatial_maps_jacobian(&p, &d, 1, None).unwrap();
        let b = spatial_maps_jacobian(&p, &d, 30, None).unwrap();
        let expect = ComponentSet::new(p.dec_out.w.clone(), vec![Array2::zeros((1, 2))], Method::TcvaeJacobian).unwrap();
        assert!((&a.spatial - &expect.spatial).iter().all(|v| v.abs() < 1e-12));
        assert!((&a.spatial - &b.spatial).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let arch = ArchSpec { input_dim: 4, embed_dim: 1, latent_dim: 3, hidden: [6, 5], n_subjects: 1 };
        let p = init_params(arch, 4);
        let z = array![[0.3, -0.2, 0.5]];
        let j = decoder_jacobian(&p, z.view());
        let h = 1e-6;
        for k in 0..3 {
            let (mut up, mut dn) = (z.clone(), z.clone());
            up[[0, k]] += h;
            dn[[0, k]] -= h;
            let fd = (decode(&p, up.view()).unwrap() - decode(&p, dn.view()).unwrap()) / (2.0 * h);
            assert!((&fd.row(0) - &j.row(k)).iter().all(|v| v.abs() < 1e-7));
        }
    }

    #[test]
    fn variance_selection_and_round_trip() {
        let tc = vec![array![[1.0, 3.0, -2.0], [-1.0, -3.0, 2.0]]];
        let maps = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let cs = ComponentSet::new(maps, tc, Method::TcvaeRegression).unwrap();
        let sel = cs.select_by_variance(2).unwrap();
        assert_eq!(sel.latent_order, vec![1, 2]);
        assert!(cs.select_by_variance(4).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cs.tcsf");
        sel.save(&path).unwrap();
        assert_eq!(ComponentSet::load(&path).unwrap(), sel);
    }
}
