//! Exact reverse-mode gradients of the full objective.
//!
//! The batch is cut into fixed chunks of [`CHUNK_ROWS`] rows. Network
//! passes run per chunk (possibly on worker threads); per-chunk parameter
//! gradients are summed in chunk order. The partition never depends on the
//! thread count, so results are bit-identical for any number of workers.

use std::ops::{Deref, DerefMut};

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    decode_cached, encode_cached, DecoderCache, Dense, EncoderCache, LatentPosterior, ModelParams,
    LOGVAR_CLAMP,
};
use crate::objective::{assemble, kl_terms, AggregateEstimator, LossBreakdown};

pub const CHUNK_ROWS: usize = 16;

/// One gradient tensor per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub ModelParams);

impl Gradients {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Gradients(ModelParams::zeros(p.arch))
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .tensors()
            .iter()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

impl Deref for Gradients {
    type Target = ModelParams;

    fn deref(&self) -> &ModelParams {
        &self.0
    }
}

impl DerefMut for Gradients {
    fn deref_mut(&mut self) -> &mut ModelParams {
        &mut self.0
    }
}

/// Optional worker pool for chunked passes.
pub struct Workers {
    pool: Option<rayon::ThreadPool>,
}

impl Workers {
    pub fn new(threads: usize) -> Result<Self> {
        if threads <= 1 {
            return Ok(Self { pool: None });
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::arg(format!("cannot start {threads} workers: {e}")))?;
        Ok(Self { pool: Some(pool) })
    }

    pub fn sequential() -> Self {
        Self { pool: None }
    }

    /// Maps `f` over `0..n` and returns results in index order.
    pub fn map<T: Send, F: Fn(usize) -> T + Sync + Send>(&self, n: usize, f: F) -> Vec<T> {
        match &self.pool {
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
            None => (0..n).map(f).collect(),
        }
    }
}

fn chunk_bounds(rows: usize) -> Vec<(usize, usize)> {
    (0..rows).step_by(CHUNK_ROWS).map(|a| (a, (a + CHUNK_ROWS).min(rows))).collect()
}

fn dense_backward(layer: &Dense, input: ArrayView2<f64>, dy: &Array2<f64>, grad: &mut Dense) -> Array2<f64> {
    grad.w += &input.t().dot(dy);
    grad.b += &dy.sum_axis(Axis(0));
    dy.dot(&layer.w.t())
}

fn relu_backward(mut d: Array2<f64>, act: &Array2<f64>) -> Array2<f64> {
    d.zip_mut_with(act, |g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
    d
}

/// Decoder backward for one chunk; returns `dL/dz`.
fn decoder_backward(
    p: &ModelParams,
    z: ArrayView2<f64>,
    cache: &DecoderCache,
    d_out: &Array2<f64>,
    g: &mut ModelParams,
) -> Array2<f64> {
    let da2 = dense_backward(&p.dec_out, cache.a2.view(), d_out, &mut g.dec_out);
    let dpre2 = relu_backward(da2, &cache.a2);
    let da1 = dense_backward(&p.dec2, cache.a1.view(), &dpre2, &mut g.dec2);
    let dpre1 = relu_backward(da1, &cache.a1);
    dense_backward(&p.dec1, z, &dpre1, &mut g.dec1)
}

fn encoder_backward(
    p: &ModelParams,
    cache: &EncoderCache,
    subjects: &[usize],
    dmu: &Array2<f64>,
    dlogvar: &Array2<f64>,
    g: &mut ModelParams,
) {
    let mut dh2 = dense_backward(&p.enc_mu, cache.h2.view(), dmu, &mut g.enc_mu);
    dh2 += &dense_backward(&p.enc_logvar, cache.h2.view(), dlogvar, &mut g.enc_logvar);
    let dpre2 = relu_backward(dh2, &cache.h2);
    let dh1 = dense_backward(&p.enc2, cache.h1.view(), &dpre2, &mut g.enc2);
    let dpre1 = relu_backward(dh1, &cache.h1);
    let dinput = dense_backward(&p.enc1, cache.input.view(), &dpre1, &mut g.enc1);
    let d = p.arch.input_dim;
    for (row, &sid) in subjects.iter().enumerate() {
        let mut e = g.embed.row_mut(sid);
        e += &dinput.slice(s![row, d..]);
    }
}

/// Loss and exact gradients of `total` for one batch.
pub fn backward(
    p: &ModelParams,
    x: ArrayView2<f64>,
    subjects: &[usize],
    eps: ArrayView2<f64>,
    beta: f64,
    estimator: AggregateEstimator,
    workers: &Workers,
) -> Result<(LossBreakdown, Gradients)> {
    let (b, k) = (x.nrows(), p.arch.latent_dim);
    if eps.dim() != (b, k) {
        return Err(Error::arg(format!("eps shape {:?}, expected ({b}, {k})", eps.dim())));
    }
    if subjects.len() != b {
        return Err(Error::arg("one subject id per row required"));
    }
    let chunks = chunk_bounds(b);

    let enc: Vec<(LatentPosterior, EncoderCache)> = workers
        .map(chunks.len(), |c| {
            let (lo, hi) = chunks[c];
            encode_cached(p, x.slice(s![lo..hi, ..]), &subjects[lo..hi])
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let mus: Vec<_> = enc.iter().map(|(q, _)| q.mu.view()).collect();
    let sgs: Vec<_> = enc.iter().map(|(q, _)| q.sigma.view()).collect();
    let post = LatentPosterior {
        mu: concatenate(Axis(0), &mus).expect("chunk shapes agree"),
        sigma: concatenate(Axis(0), &sgs).expect("chunk shapes agree"),
    };
    let z = &post.mu + &(&post.sigma * &eps);

    let inv_b = 1.0 / b as f64;
    let dec: Vec<(f64, Gradients, Array2<f64>)> = workers.map(chunks.len(), |c| {
        let (lo, hi) = chunks[c];
        let zc = z.slice(s![lo..hi, ..]);
        let (x_hat, cache) = decode_cached(p, zc);
        let resid = &x.slice(s![lo..hi, ..]) - &x_hat;
        let sq = resid.iter().map(|r| r * r).sum::<f64>();
        let d_out = resid * (-2.0 * inv_b);
        let mut g = Gradients::zeros_like(p);
        let dz = decoder_backward(p, zc, &cache, &d_out, &mut g);
        (sq, g, dz)
    });
    let rec = dec.iter().map(|(sq, _, _)| sq).sum::<f64>() * inv_b;

    let (kl, lg) = kl_terms(z.view(), &post, beta, estimator, true)?;
    let lg = lg.expect("requested gradients");
    let loss = assemble(rec, kl, beta);
    if let Some(term) = loss.first_non_finite() {
        return Err(Error::Training { epoch: 0, term: term.to_string() });
    }

    let mut dz = lg.dz;
    for (c, (_, _, dzc)) in dec.iter().enumerate() {
        let (lo, hi) = chunks[c];
        let mut part = dz.slice_mut(s![lo..hi, ..]);
        part += dzc;
    }
    let dmu = lg.dmu + &dz;
    let dsigma = lg.dsigma + &(&dz * &eps);

    let enc_grads: Vec<Gradients> = workers.map(chunks.len(), |c| {
        let (lo, hi) = chunks[c];
        let (q, cache) = &enc[c];
        let mut dlogvar = &dsigma.slice(s![lo..hi, ..]) * &q.sigma * 0.5;
        dlogvar.zip_mut_with(&cache.logvar_raw, |g, &raw| {
            if raw.abs() >= LOGVAR_CLAMP {
                *g = 0.0;
            }
        });
        let dmu_c = dmu.slice(s![lo..hi, ..]).to_owned();
        let mut g = Gradients::zeros_like(p);
        encoder_backward(p, cache, &subjects[lo..hi], &dmu_c, &dlogvar, &mut g);
        g
    });

    let mut total = Gradients::zeros_like(p);
    for ((_, g, _), ge) in dec.iter().zip(enc_grads.iter()) {
        total.add_assign(g);
        total.add_assign(ge);
    }
    Ok((loss, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, sample_eps, ArchSpec};
    use crate::objective::loss_breakdown;
    use crate::rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn tiny() -> ArchSpec {
        ArchSpec { input_dim: 6, embed_dim: 2, latent_dim: 3, hidden: [8, 8], n_subjects: 3 }
    }

    fn batch(seed: u64, rows: usize) -> (Array2<f64>, Vec<usize>, Array2<f64>) {
        let mut r = rng::stream(seed, 600, 0);
        let x = Array2::from_shape_fn((rows, 6), |_| r.sample::<f64, _>(StandardNormal));
        let s = (0..rows).map(|i| i % 2).collect();
        let eps = sample_eps(&mut r, rows, 3);
        (x, s, eps)
    }

    #[test]
    fn loss_matches_forward_evaluation() {
        let p = init_params(tiny(), 3);
        let (x, s, eps) = batch(3, 40);
        let est = AggregateEstimator::MinibatchWeighted { dataset_size: 400 };
        let (l, _) = backward(&p, x.view(), &s, eps.view(), 2.0, est, &Workers::sequential()).unwrap();
        let f = loss_breakdown(&p, x.view(), &s, eps.view(), 2.0, est).unwrap();
        assert!((l.total - f.total).abs() < 1e-10);
        assert!((l.rec - f.rec).abs() < 1e-10);
    }

    #[test]
    fn unused_subject_embedding_has_zero_gradient() {
        let p = init_params(tiny(), 4);
        let (x, s, eps) = batch(4, 5);
        let (_, g) = backward(&p, x.view(), &s, eps.view(), 4.0, AggregateEstimator::BatchMixture, &Workers::sequential()).unwrap();
        assert!(g.embed.row(2).iter().all(|&v| v == 0.0));
        assert!(g.embed.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn constant_parameter_has_zero_gradient() {
        // With the decoder's last hidden layer dead, dec_out.w never reaches
        // the loss.
        let mut p = init_params(tiny(), 5);
        p.dec2.w.fill(0.0);
        p.dec2.b.fill(-1.0);
        let (x, s, eps) = batch(5, 6);
        let (_, g) = backward(&p, x.view(), &s, eps.view(), 4.0, AggregateEstimator::BatchMixture, &Workers::sequential()).unwrap();
        assert!(g.dec_out.w.iter().all(|&v| v == 0.0));
        assert!(g.dec2.w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn thread_count_does_not_change_bits() {
        let arch = ArchSpec { input_dim: 6, embed_dim: 2, latent_dim: 3, hidden: [8, 8], n_subjects: 3 };
        let p = init_params(arch, 6);
        let (x, s, eps) = batch(6, 64);
        let est = AggregateEstimator::BatchMixture;
        let (l1, g1) = backward(&p, x.view(), &s, eps.view(), 4.0, est, &Workers::sequential()).unwrap();
        let (l4, g4) = backward(&p, x.view(), &s, eps.view(), 4.0, est, &Workers::new(4).unwrap()).unwrap();
        assert_eq!(l1, l4);
        assert_eq!(g1, g4);
    }

    #[test]
    fn rejects_bad_shapes() {
        let p = init_params(tiny(), 7);
        let (x, s, _) = batch(7, 4);
        let eps = Array2::zeros((4, 2));
        assert!(backward(&p, x.view(), &s, eps.view(), 1.0, AggregateEstimator::BatchMixture, &Workers::sequential()).is_err());
    }
}
