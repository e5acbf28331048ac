use ndarray::{concatenate, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::model::{init_params, sample_eps, ArchSpec, ModelParams, LOGVAR_CLAMP, TENSOR_NAMES};
use crate::objective::{loss_breakdown, AggregateEstimator};
use crate::rng::{self, domain};

use super::backward::{backward, Workers};

/// Floor on the denominator of the relative error, so that entries whose
/// gradient is numerically zero are judged by absolute error.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Tensor and flat index of the worst entry.
    pub worst: (String, usize),
    pub checked: usize,
}

/// A randomized tiny problem.
#[derive(Clone, Debug)]
pub struct GradcheckCase {
    pub params: ModelParams,
    pub x: Array2<f64>,
    pub subjects: Vec<usize>,
    pub eps: Array2<f64>,
    pub beta: f64,
    pub estimator: AggregateEstimator,
}

/// Smallest distance of any ReLU pre-activation from 0 or any raw
/// log-variance from the clamp bounds. Central differences are only valid
/// when no perturbation crosses one of these kinks.
pub fn kink_margin(c: &GradcheckCase) -> f64 {
    let p = &c.params;
    let e = p.embed.select(Axis(0), &c.subjects);
    let input = concatenate(Axis(1), &[c.x.view(), e.view()]).expect("row counts agree");
    let relu = |a: &Array2<f64>| a.mapv(|v| v.max(0.0));
    let pre1 = p.enc1.forward(input.view());
    let pre2 = p.enc2.forward(relu(&pre1).view());
    let h2 = relu(&pre2);
    let mu = p.enc_mu.forward(h2.view());
    let lv = p.enc_logvar.forward(h2.view());
    let sigma = lv.mapv(|v| (0.5 * v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)).exp());
    let z = &mu + &(&sigma * &c.eps);
    let dpre1 = p.dec1.forward(z.view());
    let dpre2 = p.dec2.forward(relu(&dpre1).view());
    let relu_margin = [&pre1, &pre2, &dpre1, &dpre2].into_iter().flat_map(|a| a.iter()).map(|v| v.abs());
    let clamp_margin = lv.iter().map(|v| (v.abs() - LOGVAR_CLAMP).abs());
    relu_margin.chain(clamp_margin).fold(f64::INFINITY, f64::min)
}

/// D=6, m=2, K=3, hidden 8/8, B=4, three subjects, random β in [1, 6].
/// Draws are repeated until every kink is at least `KINK_MARGIN` away.
pub fn random_gradcheck_case(seed: u64) -> GradcheckCase {
    (0..)
        .map(|attempt| draw_case(seed, attempt))
        .find(|c| kink_margin(c) >= KINK_MARGIN)
        .expect("unbounded search")
}

pub const KINK_MARGIN: f64 = 1e-3;

fn draw_case(seed: u64, attempt: u64) -> GradcheckCase {
    let arch = ArchSpec { input_dim: 6, embed_dim: 2, latent_dim: 3, hidden: [8, 8], n_subjects: 3 };
    let mut r = rng::stream(seed, domain::GRADCHECK, attempt);
    let mut params = init_params(arch, seed.wrapping_add(attempt << 32));
    // Embeddings start tiny; widen them so their gradients are exercised.
    params.embed.mapv_inplace(|_| r.sample::<f64, _>(StandardNormal));
    let x = Array2::from_shape_fn((4, 6), |_| r.sample::<f64, _>(StandardNormal));
    let subjects = (0..4).map(|_| r.random_range(0..3)).collect();
    let eps = sample_eps(&mut r, 4, 3);
    let beta = r.random_range(1.0..6.0);
    GradcheckCase { params, x, subjects, eps, beta, estimator: AggregateEstimator::MinibatchWeighted { dataset_size: 100 } }
}

/// Compares analytic gradients against central differences of `total` for
/// every parameter.
pub fn gradcheck(c: &GradcheckCase, h: f64) -> Result<GradcheckReport> {
    let (_, g) = backward(&c.params, c.x.view(), &c.subjects, c.eps.view(), c.beta, c.estimator, &Workers::sequential())?;
    let analytic: Vec<Vec<f64>> = g.tensors().iter().map(|t| t.iter().copied().collect()).collect();
    let mut p = c.params.clone();
    let total = |p: &ModelParams| -> Result<f64> {
        Ok(loss_breakdown(p, c.x.view(), &c.subjects, c.eps.view(), c.beta, c.estimator)?.total)
    };
    let mut report = GradcheckReport { max_rel_error: 0.0, worst: (String::new(), 0), checked: 0 };
    for (ti, name) in TENSOR_NAMES.iter().enumerate() {
        for j in 0..analytic[ti].len() {
            let orig = nth(&mut p, ti, j, None);
            nth(&mut p, ti, j, Some(orig + h));
            let up = total(&p)?;
            nth(&mut p, ti, j, Some(orig - h));
            let down = total(&p)?;
            nth(&mut p, ti, j, Some(orig));
            let num = (up - down) / (2.0 * h);
            let a = analytic[ti][j];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(REL_FLOOR);
            if rel > report.max_rel_error || report.checked == 0 {
                report.max_rel_error = rel;
                report.worst = (name.to_string(), j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Reads entry `j` of tensor `ti`, optionally overwriting it.
fn nth(p: &mut ModelParams, ti: usize, j: usize, set: Option<f64>) -> f64 {
    let mut ts = p.tensors_mut();
    let slot = ts[ti].iter_mut().nth(j).expect("index in range");
    let old = *slot;
    if let Some(v) = set {
        *slot = v;
    }
    old
}
