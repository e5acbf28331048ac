//! Subject-conditioned encoder/decoder.
//!
//! The encoder sees `[x; e_s]` where `e_s` is a learned per-subject
//! embedding and outputs a diagonal Gaussian posterior. The decoder maps a
//! latent sample back to feature space and is not subject-conditioned.

use ndarray::{concatenate, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_distr::{Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{self, domain};

/// Log-variance head outputs are clamped to `[-LOGVAR_CLAMP, LOGVAR_CLAMP]`.
pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub latent_dim: usize,
    /// Encoder hidden widths; the decoder mirrors them in reverse.
    pub hidden: [usize; 2],
    pub n_subjects: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self { input_dim: 100, embed_dim: 8, latent_dim: 80, hidden: [512, 256], n_subjects: 1 }
    }
}

/// Fully connected layer `y = x·w + b` with `w` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { w: Array2::zeros((fan_in, fan_out)), b: Array1::zeros(fan_out) }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b.view().insert_axis(Axis(0));
        y
    }

    fn glorot<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-a..a));
        Self { w, b: Array1::zeros(fan_out) }
    }
}

/// Embedding table, encoder and decoder weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: ArchSpec,
    /// S × m.
    pub embed: Array2<f64>,
    pub enc1: Dense,
    pub enc2: Dense,
    pub enc_mu: Dense,
    pub enc_logvar: Dense,
    pub dec1: Dense,
    pub dec2: Dense,
    pub dec_out: Dense,
}

pub const TENSOR_NAMES: [&str; 15] = [
    "embed",
    "enc1.w",
    "enc1.b",
    "enc2.w",
    "enc2.b",
    "enc_mu.w",
    "enc_mu.b",
    "enc_logvar.w",
    "enc_logvar.b",
    "dec1.w",
    "dec1.b",
    "dec2.w",
    "dec2.b",
    "dec_out.w",
    "dec_out.b",
];

impl ModelParams {
    pub fn zeros(arch: ArchSpec) -> Self {
        let [h1, h2] = arch.hidden;
        let (d, m, k) = (arch.input_dim, arch.embed_dim, arch.latent_dim);
        Self {
            arch,
            embed: Array2::zeros((arch.n_subjects, m)),
            enc1: Dense::zeros(d + m, h1),
            enc2: Dense::zeros(h1, h2),
            enc_mu: Dense::zeros(h2, k),
            enc_logvar: Dense::zeros(h2, k),
            dec1: Dense::zeros(k, h2),
            dec2: Dense::zeros(h2, h1),
            dec_out: Dense::zeros(h1, d),
        }
    }

    fn layers(&self) -> [&Dense; 7] {
        [&self.enc1, &self.enc2, &self.enc_mu, &self.enc_logvar, &self.dec1, &self.dec2, &self.dec_out]
    }

    fn layers_mut(&mut self) -> [&mut Dense; 7] {
        [
            &mut self.enc1,
            &mut self.enc2,
            &mut self.enc_mu,
            &mut self.enc_logvar,
            &mut self.dec1,
            &mut self.dec2,
            &mut self.dec_out,
        ]
    }

    /// All tensors in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> Vec<ArrayViewD<'_, f64>> {
        let mut out = vec![self.embed.view().into_dyn()];
        for l in self.layers() {
            out.push(l.w.view().into_dyn());
            out.push(l.b.view().into_dyn());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = vec![self.embed.view_mut().into_dyn()];
        let Self { enc1, enc2, enc_mu, enc_logvar, dec1, dec2, dec_out, .. } = self;
        for l in [enc1, enc2, enc_mu, enc_logvar, dec1, dec2, dec_out] {
            out.push(l.w.view_mut().into_dyn());
            out.push(l.b.view_mut().into_dyn());
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for (mut a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a += &b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for mut t in self.tensors_mut() {
            t *= c;
        }
    }
}

/// Glorot-uniform weights, zero biases, N(0, 0.01²) embeddings.
pub fn init_params(arch: ArchSpec, seed: u64) -> ModelParams {
    let mut rng = rng::stream(seed, domain::INIT, 0);
    let mut p = ModelParams::zeros(arch);
    let normal = Normal::new(0.0, 0.01).expect("valid std");
    p.embed.mapv_inplace(|_| rng.sample(normal));
    for l in p.layers_mut() {
        let (fi, fo) = l.w.dim();
        *l = Dense::glorot(fi, fo, &mut rng);
    }
    p
}

/// Diagonal Gaussian posterior per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    pub mu: Array2<f64>,
    /// Strictly positive.
    pub sigma: Array2<f64>,
}

impl LatentPosterior {
    pub fn new(mu: Array2<f64>, sigma: Array2<f64>) -> Result<Self> {
        if mu.dim() != sigma.dim() {
            return Err(Error::arg("mu and sigma shapes differ"));
        }
        if sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::arg("sigma must be strictly positive"));
        }
        Ok(Self { mu, sigma })
    }

    pub fn batch_size(&self) -> usize {
        self.mu.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.ncols()
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct EncoderCache {
    pub input: Array2<f64>,
    pub h1: Array2<f64>,
    pub h2: Array2<f64>,
    pub logvar_raw: Array2<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderCache {
    pub a1: Array2<f64>,
    pub a2: Array2<f64>,
}

fn relu(mut x: Array2<f64>) -> Array2<f64> {
    x.mapv_inplace(|v| v.max(0.0));
    x
}

fn check_subjects(p: &ModelParams, s: &[usize], rows: usize) -> Result<()> {
    if s.len() != rows {
        return Err(Error::arg(format!("{} subject ids for {rows} rows", s.len())));
    }
    if let Some(&bad) = s.iter().find(|&&id| id >= p.arch.n_subjects) {
        return Err(Error::arg(format!(
            "subject id {bad} out of range for {} embeddings",
            p.arch.n_subjects
        )));
    }
    Ok(())
}

pub(crate) fn encode_cached(
    p: &ModelParams,
    x: ArrayView2<f64>,
    s: &[usize],
) -> Result<(LatentPosterior, EncoderCache)> {
    if x.ncols() != p.arch.input_dim {
        return Err(Error::arg(format!(
            "encoder expects {} features, got {}",
            p.arch.input_dim,
            x.ncols()
        )));
    }
    check_subjects(p, s, x.nrows())?;
    let e = p.embed.select(Axis(0), s);
    let input = concatenate(Axis(1), &[x, e.view()]).expect("row counts agree");
    let h1 = relu(p.enc1.forward(input.view()));
    let h2 = relu(p.enc2.forward(h1.view()));
    let mu = p.enc_mu.forward(h2.view());
    let logvar_raw = p.enc_logvar.forward(h2.view());
    let sigma = logvar_raw.mapv(|v| (0.5 * v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)).exp());
    Ok((LatentPosterior { mu, sigma }, EncoderCache { input, h1, h2, logvar_raw }))
}

/// Posterior `q(z | x, s)` for a batch.
pub fn encode(p: &ModelParams, x: ArrayView2<f64>, s: &[usize]) -> Result<LatentPosterior> {
    encode_cached(p, x, s).map(|(post, _)| post)
}

/// `z = mu + sigma ⊙ eps`.
pub fn reparameterize(post: &LatentPosterior, eps: ArrayView2<f64>) -> Result<Array2<f64>> {
    if eps.dim() != post.mu.dim() {
        return Err(Error::arg(format!(
            "eps shape {:?} does not match posterior {:?}",
            eps.dim(),
            post.mu.dim()
        )));
    }
    Ok(&post.mu + &(&post.sigma * &eps))
}

pub(crate) fn decode_cached(p: &ModelParams, z: ArrayView2<f64>) -> (Array2<f64>, DecoderCache) {
    let a1 = relu(p.dec1.forward(z));
    let a2 = relu(p.dec2.forward(a1.view()));
    let out = p.dec_out.forward(a2.view());
    (out, DecoderCache { a1, a2 })
}

/// Mean of `p(x | z)`.
pub fn decode(p: &ModelParams, z: ArrayView2<f64>) -> Result<Array2<f64>> {
    if z.ncols() != p.arch.latent_dim {
        return Err(Error::arg(format!(
            "decoder expects {} latents, got {}",
            p.arch.latent_dim,
            z.ncols()
        )));
    }
    Ok(decode_cached(p, z).0)
}

/// Per-row `KL(q(z|x) ‖ N(0, I))`.
pub fn gaussian_kl_analytic(post: &LatentPosterior) -> Array1<f64> {
    let mut out = Array1::zeros(post.batch_size());
    for (i, (mu, sg)) in post.mu.outer_iter().zip(post.sigma.outer_iter()).enumerate() {
        out[i] = 0.5
            * mu.iter()
                .zip(sg.iter())
                .map(|(m, s)| m * m + s * s - 1.0 - 2.0 * s.ln())
                .sum::<f64>();
    }
    out
}

/// Standard-normal noise for reparameterized sampling.
pub fn sample_eps<R: Rng>(rng: &mut R, rows: usize, k: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, k), |_| rng.sample(StandardNormal))
}
