//! Decomposed objective: reconstruction, index-code mutual information,
//! total correlation and dimension-wise KL.
//!
//! `log q(z)` and the marginals `log q(z_j)` are estimated from the
//! minibatch itself: for each sample row `i`, the posterior densities of
//! every batch row `b` are combined with a log-sum-exp. All accumulation is
//! 64-bit and sequential in row order.

use ndarray::{Array1, Array2, Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::model::{decode, encode, reparameterize, LatentPosterior, ModelParams};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Normalizing constant subtracted after the log-sum-exp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AggregateEstimator {
    /// Minibatch-weighted sampling: subtract `ln(N·B)` for a dataset of `N`
    /// rows.
    MinibatchWeighted { dataset_size: usize },
    /// Treat the batch as the whole population: subtract `ln B`. Estimates
    /// are then offset-free; the MWS variant differs from it by the
    /// constant `ln N` per density (gradients are identical).
    BatchMixture,
}

impl AggregateEstimator {
    pub fn offset(&self, batch: usize) -> f64 {
        match *self {
            Self::MinibatchWeighted { dataset_size } => ((dataset_size * batch) as f64).ln(),
            Self::BatchMixture => (batch as f64).ln(),
        }
    }

    fn validate(&self, batch: usize) -> Result<()> {
        if batch < 2 {
            return Err(Error::arg(format!("aggregate estimator needs B >= 2, got {batch}")));
        }
        if let Self::MinibatchWeighted { dataset_size } = *self {
            if dataset_size < batch {
                return Err(Error::arg(format!(
                    "dataset size {dataset_size} smaller than batch {batch}"
                )));
            }
        }
        Ok(())
    }
}

#[inline]
fn log_normal(z: f64, mu: f64, sigma: f64) -> f64 {
    let u = (z - mu) / sigma;
    -HALF_LN_2PI - sigma.ln() - 0.5 * u * u
}

/// `out[i, b, j] = log N(z[i, j]; mu[b, j], sigma[b, j]²)`.
pub fn log_normal_diag(
    z: ArrayView2<f64>,
    mu: ArrayView2<f64>,
    sigma: ArrayView2<f64>,
) -> Result<Array3<f64>> {
    if mu.dim() != sigma.dim() || z.ncols() != mu.ncols() {
        return Err(Error::arg("log_normal_diag: shape mismatch"));
    }
    let (bz, k) = z.dim();
    let bp = mu.nrows();
    Ok(Array3::from_shape_fn((bz, bp, k), |(i, b, j)| log_normal(z[[i, j]], mu[[b, j]], sigma[[b, j]])))
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Estimates `log q(z_i)` and `log q(z_ij)` for each sampled row.
pub fn estimate_aggregate_logq(
    z: ArrayView2<f64>,
    post: &LatentPosterior,
    estimator: AggregateEstimator,
) -> Result<(Array1<f64>, Array2<f64>)> {
    let b = post.batch_size();
    estimator.validate(b)?;
    if z.dim() != post.mu.dim() {
        return Err(Error::arg("z and posterior shapes differ"));
    }
    let k = post.latent_dim();
    let off = estimator.offset(b);
    let lnd = log_normal_diag(z, post.mu.view(), post.sigma.view())?;
    let mut logqz = Array1::zeros(b);
    let mut marg = Array2::zeros((b, k));
    for i in 0..b {
        let joint = (0..b).map(|bb| (0..k).map(|j| lnd[[i, bb, j]]).sum::<f64>());
        logqz[i] = log_sum_exp(joint) - off;
        for j in 0..k {
            marg[[i, j]] = log_sum_exp((0..b).map(|bb| lnd[[i, bb, j]])) - off;
        }
    }
    Ok((logqz, marg))
}

/// Per-batch loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub rec: f64,
    pub mi: f64,
    pub tc: f64,
    pub dim_kl: f64,
    pub beta: f64,
    pub total: f64,
    /// Single-sample Monte Carlo `KL(q(z|x) ‖ p(z))`; equals `mi + tc + dim_kl`.
    pub kl_mc: f64,
}

impl LossBreakdown {
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("rec", self.rec),
            ("mi", self.mi),
            ("tc", self.tc),
            ("dim_kl", self.dim_kl),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// KL-side terms (no reconstruction).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KlTerms {
    pub mi: f64,
    pub tc: f64,
    pub dim_kl: f64,
    pub kl_mc: f64,
}

/// Partial derivatives of `mi + beta·tc + dim_kl` with `z`, `mu` and `sigma`
/// treated as independent inputs.
#[derive(Clone, Debug)]
pub struct LatentGrads {
    pub dz: Array2<f64>,
    pub dmu: Array2<f64>,
    pub dsigma: Array2<f64>,
}

/// Evaluates the KL-side terms and, optionally, their partial gradients.
///
/// The self-density `log q(z_i | x_i)` is taken from the diagonal of the
/// pairwise matrix so every path runs through the same expression.
pub fn kl_terms(
    z: ArrayView2<f64>,
    post: &LatentPosterior,
    beta: f64,
    estimator: AggregateEstimator,
    with_grad: bool,
) -> Result<(KlTerms, Option<LatentGrads>)> {
    let (b, k) = post.mu.dim();
    estimator.validate(b)?;
    if z.dim() != (b, k) {
        return Err(Error::arg("z and posterior shapes differ"));
    }
    let off = estimator.offset(b);
    let (mu, sg) = (&post.mu, &post.sigma);
    let inv_b = 1.0 / b as f64;

    let mut grads = with_grad.then(|| LatentGrads {
        dz: Array2::zeros((b, k)),
        dmu: Array2::zeros((b, k)),
        dsigma: Array2::zeros((b, k)),
    });

    let (mut sum_qzx, mut sum_qz, mut sum_qzm, mut sum_pz) = (0.0, 0.0, 0.0, 0.0);
    let mut lrow = Array2::<f64>::zeros((b, k));
    let mut joint = Array1::<f64>::zeros(b);
    let mut lse_m = Array1::<f64>::zeros(k);
    for i in 0..b {
        for bb in 0..b {
            let mut acc = 0.0;
            for j in 0..k {
                let v = log_normal(z[[i, j]], mu[[bb, j]], sg[[bb, j]]);
                lrow[[bb, j]] = v;
                acc += v;
            }
            joint[bb] = acc;
        }
        let lse_joint = log_sum_exp(joint.iter().copied());
        let mut qzm = 0.0;
        for j in 0..k {
            lse_m[j] = log_sum_exp((0..b).map(|bb| lrow[[bb, j]]));
            qzm += lse_m[j] - off;
        }
        let qzx = joint[i];
        let pz: f64 = (0..k).map(|j| -HALF_LN_2PI - 0.5 * z[[i, j]] * z[[i, j]]).sum();
        sum_qzx += qzx;
        sum_qz += lse_joint - off;
        sum_qzm += qzm;
        sum_pz += pz;

        if let Some(g) = grads.as_mut() {
            // dF/dL[i,b,j] = ((β−1)·w_ib + (1−β)·v_ibj + δ_ib) / B
            for bb in 0..b {
                let w = (joint[bb] - lse_joint).exp();
                for j in 0..k {
                    let v = (lrow[[bb, j]] - lse_m[j]).exp();
                    let mut coef = (beta - 1.0) * w + (1.0 - beta) * v;
                    if bb == i {
                        coef += 1.0;
                    }
                    let coef = coef * inv_b;
                    if coef == 0.0 {
                        continue;
                    }
                    let s = sg[[bb, j]];
                    let diff = z[[i, j]] - mu[[bb, j]];
                    let u = diff / (s * s);
                    g.dz[[i, j]] -= coef * u;
                    g.dmu[[bb, j]] += coef * u;
                    g.dsigma[[bb, j]] += coef * (diff * u - 1.0) / s;
                }
            }
            for j in 0..k {
                g.dz[[i, j]] += z[[i, j]] * inv_b;
            }
        }
    }
    let terms = KlTerms {
        mi: (sum_qzx - sum_qz) * inv_b,
        tc: (sum_qz - sum_qzm) * inv_b,
        dim_kl: (sum_qzm - sum_pz) * inv_b,
        kl_mc: (sum_qzx - sum_pz) * inv_b,
    };
    Ok((terms, grads))
}

/// Mean over rows of the squared error summed over features.
pub fn reconstruction(x: ArrayView2<f64>, x_hat: ArrayView2<f64>) -> f64 {
    let b = x.nrows() as f64;
    x.iter().zip(x_hat.iter()).map(|(a, h)| (a - h) * (a - h)).sum::<f64>() / b
}

pub(crate) fn assemble(rec: f64, kl: KlTerms, beta: f64) -> LossBreakdown {
    LossBreakdown {
        rec,
        mi: kl.mi,
        tc: kl.tc,
        dim_kl: kl.dim_kl,
        beta,
        total: rec + kl.mi + beta * kl.tc + kl.dim_kl,
        kl_mc: kl.kl_mc,
    }
}

/// Full forward evaluation of the objective on one batch.
pub fn loss_breakdown(
    p: &ModelParams,
    x: ArrayView2<f64>,
    s: &[usize],
    eps: ArrayView2<f64>,
    beta: f64,
    estimator: AggregateEstimator,
) -> Result<LossBreakdown> {
    if !(beta >= 0.0) {
        return Err(Error::arg("beta must be non-negative"));
    }
    let post = encode(p, x, s)?;
    let z = reparameterize(&post, eps)?;
    let x_hat = decode(p, z.view())?;
    let rec = reconstruction(x, x_hat.view());
    let (kl, _) = kl_terms(z.view(), &post, beta, estimator, false)?;
    Ok(assemble(rec, kl, beta))
}

/// Linear warm-up of the TC weight: `beta_final · min(1, (epoch+1)/warmup)`.
pub fn beta_schedule(epoch: i64, beta_final: f64, warmup_epochs: i64) -> Result<f64> {
    if epoch < 0 {
        return Err(Error::arg(format!("negative epoch {epoch}")));
    }
    if warmup_epochs < 0 {
        return Err(Error::arg("warmup_epochs must be >= 0"));
    }
    if warmup_epochs == 0 || epoch + 1 >= warmup_epochs {
        return Ok(beta_final);
    }
    Ok(beta_final * (epoch + 1) as f64 / warmup_epochs as f64)
}

/// Analytic total correlation of a Gaussian with correlation matrix `R`:
/// `−½ ln det R`. For two dimensions this is `−½ ln(1 − ρ²)`.
pub fn gaussian_total_correlation_2d(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}
