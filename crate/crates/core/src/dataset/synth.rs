//! Synthetic multi-subject mixtures with known sources.
//!
//! Sources are sinusoids (one frequency per component, a random phase per
//! subject) plus AR(1) noise driven by Laplace innovations, so they are
//! super-Gaussian and linearly separable. Spatial maps are unit-norm
//! Gaussian bumps on a 1-D feature lattice.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::tcsf::{load_bundle, save_bundle, take, take_matrix, Bundle};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixingKind {
    Linear,
    /// Elementwise `u + 0.5·tanh(2u)` on the scaled linear mixture.
    PostNonlinear,
    /// Fixed random two-layer network with a tanh hidden layer.
    Mlp,
}

impl FromStr for MixingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "pnl" | "post_nonlinear" => Ok(Self::PostNonlinear),
            "mlp" => Ok(Self::Mlp),
            other => Err(Error::arg(format!("unknown mixing kind `{other}`"))),
        }
    }
}

impl fmt::Display for MixingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::PostNonlinear => "pnl",
            Self::Mlp => "mlp",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub k_true: usize,
    pub feature_dim: usize,
    pub n_subjects: usize,
    pub timepoints: usize,
    pub mixing: MixingKind,
    pub noise_std: f64,
    pub seed: u64,
    pub ar_coef: f64,
    pub sin_amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            k_true: 5,
            feature_dim: 50,
            n_subjects: 4,
            timepoints: 500,
            mixing: MixingKind::Linear,
            noise_std: 0.1,
            seed: 7,
            ar_coef: 0.3,
            sin_amplitude: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTruth {
    /// K_true × D, unit-norm rows.
    pub true_spatial: Array2<f64>,
    /// N_rows × K_true, zero-mean unit-variance columns.
    pub true_timecourses: Array2<f64>,
    pub mixing_kind: MixingKind,
    pub noise_std: f64,
    pub seed: u64,
}

fn laplace<R: Rng>(rng: &mut R) -> f64 {
    // unit variance: scale 1/√2
    let u: f64 = rng.random::<f64>() - 0.5;
    -(u.signum()) * std::f64::consts::FRAC_1_SQRT_2 * (1.0 - 2.0 * u.abs()).ln()
}

fn global_std(x: &Array2<f64>) -> f64 {
    let n = x.len() as f64;
    let m = x.sum() / n;
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<(Dataset, SyntheticTruth)> {
    let (k, dim) = (cfg.k_true, cfg.feature_dim);
    if k == 0 || k > dim {
        return Err(Error::arg(format!("k_true = {k} must be in 1..={dim}")));
    }
    if cfg.n_subjects == 0 || cfg.timepoints < 2 {
        return Err(Error::arg("need at least one subject and two timepoints"));
    }
    if !(cfg.noise_std >= 0.0) || !(cfg.ar_coef.abs() < 1.0) {
        return Err(Error::arg("noise_std must be >= 0 and |ar_coef| < 1"));
    }
    let mut rng = rng::stream(cfg.seed, domain::SYNTH, 0);

    let spacing = dim as f64 / k as f64;
    let width = spacing / 3.0;
    let centers: Vec<f64> = (0..k)
        .map(|i| (i as f64 + 0.5) * spacing + (rng.random::<f64>() - 0.5) * 0.5 * spacing)
        .collect();
    let mut spatial = Array2::from_shape_fn((k, dim), |(i, j)| {
        (-0.5 * ((j as f64 - centers[i]) / width).powi(2)).exp()
    });
    for mut row in spatial.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }

    let freqs: Vec<f64> = (0..k)
        .map(|i| 0.01 + 0.09 * (i as f64 + rng.random::<f64>()) / k as f64)
        .collect();

    let t_len = cfg.timepoints;
    let n_rows = cfg.n_subjects * t_len;
    let mut tc = Array2::zeros((n_rows, k));
    for sub in 0..cfg.n_subjects {
        let phases: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * 2.0 * PI).collect();
        let mut block = tc.slice_mut(s![sub * t_len..(sub + 1) * t_len, ..]);
        let mut ar = vec![0.0; k];
        for t in 0..t_len {
            for c in 0..k {
                ar[c] = cfg.ar_coef * ar[c] + laplace(&mut rng);
                block[[t, c]] = cfg.sin_amplitude
                    * (2.0 * PI * freqs[c] * t as f64 + phases[c]).sin()
                    + ar[c];
            }
        }
        for mut col in block.axis_iter_mut(Axis(1)) {
            let m = col.sum() / t_len as f64;
            col -= m;
        }
    }
    for mut col in tc.axis_iter_mut(Axis(1)) {
        let sd = (col.dot(&col) / n_rows as f64).sqrt();
        col /= sd;
    }

    let u = tc.dot(&spatial);
    let su = global_std(&u);
    let mixed = match cfg.mixing {
        MixingKind::Linear => u,
        MixingKind::PostNonlinear => {
            let y = u.mapv(|v| {
                let v = v / su;
                v + 0.5 * (2.0 * v).tanh()
            });
            let sy = global_std(&y);
            y * (su / sy)
        }
        MixingKind::Mlp => {
            let scale = 1.0 / (dim as f64).sqrt();
            let w1 = Array2::from_shape_fn((dim, dim), |_| rng.sample::<f64, _>(StandardNormal) * scale);
            let b1 = Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal) * 0.1);
            let w2 = Array2::from_shape_fn((dim, dim), |_| rng.sample::<f64, _>(StandardNormal) * scale);
            let mut h = (&u / su).dot(&w1) * 2.0;
            h += &b1.insert_axis(Axis(0));
            h.mapv_inplace(f64::tanh);
            let y = h.dot(&w2);
            let sy = global_std(&y);
            y * (su / sy)
        }
    };
    let mut x = mixed;
    if cfg.noise_std > 0.0 {
        x.mapv_inplace(|v| v + cfg.noise_std * rng.sample::<f64, _>(StandardNormal));
    }

    let subject_of_row = (0..n_rows).map(|i| i / t_len).collect();
    let d = Dataset::new(x, subject_of_row)?;
    let truth = SyntheticTruth {
        true_spatial: spatial,
        true_timecourses: tc,
        mixing_kind: cfg.mixing,
        noise_std: cfg.noise_std,
        seed: cfg.seed,
    };
    Ok((d, truth))
}

fn scalar(b: &mut Bundle, name: &str) -> Result<f64> {
    take(b, name)?.iter().next().copied().ok_or_else(|| Error::format(format!("record `{name}` is empty")))
}

impl SyntheticTruth {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let one = |v: f64| Array1::from_elem(1, v).into_dyn();
        let kind = match self.mixing_kind {
            MixingKind::Linear => 0.0,
            MixingKind::PostNonlinear => 1.0,
            MixingKind::Mlp => 2.0,
        };
        save_bundle(
            path,
            &[
                ("true_spatial".into(), self.true_spatial.clone().into_dyn()),
                ("true_timecourses".into(), self.true_timecourses.clone().into_dyn()),
                ("mixing_kind".into(), one(kind)),
                ("noise_std".into(), one(self.noise_std)),
                ("seed_lo".into(), one((self.seed & 0xFFFF_FFFF) as f64)),
                ("seed_hi".into(), one((self.seed >> 32) as f64)),
            ],
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut b = load_bundle(path)?;
        let true_spatial = take_matrix(&mut b, "true_spatial")?;
        let true_timecourses = take_matrix(&mut b, "true_timecourses")?;
        if true_spatial.nrows() != true_timecourses.ncols() {
            return Err(Error::Consistency("truth maps and time courses disagree on K".into()));
        }
        let mixing_kind = match scalar(&mut b, "mixing_kind")? as i64 {
            0 => MixingKind::Linear,
            1 => MixingKind::PostNonlinear,
            2 => MixingKind::Mlp,
            c => return Err(Error::format(format!("unknown mixing code {c}"))),
        };
        let noise_std = scalar(&mut b, "noise_std")?;
        let seed = scalar(&mut b, "seed_lo")? as u64 | ((scalar(&mut b, "seed_hi")? as u64) << 32);
        Ok(Self { true_spatial, true_timecourses, mixing_kind, noise_std, seed })
    }
}
