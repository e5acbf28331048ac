//! Optimization of the model: gradients, Adam, the epoch loop, logs and
//! checkpoints.

mod adam;
mod backward;
mod checkpoint;
mod gradcheck;
mod log;

use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Axis;
use rand::seq::SliceRandom;

pub use adam::{adam_step, clip_global_norm, AdamState};
pub use backward::{backward, Gradients, Workers, CHUNK_ROWS};
pub use checkpoint::{load_checkpoint, meta_path, save_checkpoint, Checkpoint};
pub use gradcheck::{gradcheck, kink_margin, random_gradcheck_case, GradcheckCase, GradcheckReport};
pub use log::{EpochRecord, TrainLog};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{init_params, sample_eps, ArchSpec, ModelParams};
use crate::objective::{beta_schedule, AggregateEstimator};
use crate::rng::{self, domain};
use crate::tcsf::Bundle;

/// Normalization of the aggregate-posterior estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorKind {
    /// Plug-in mixture over the batch, `log(1/B)`.
    BatchMixture,
    /// Minibatch-weighted sampling, `log(1/(N·B))`.
    MinibatchWeighted,
}

impl EstimatorKind {
    pub fn resolve(self, dataset_size: usize) -> AggregateEstimator {
        match self {
            EstimatorKind::BatchMixture => AggregateEstimator::BatchMixture,
            EstimatorKind::MinibatchWeighted => AggregateEstimator::MinibatchWeighted { dataset_size },
        }
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(EstimatorKind::BatchMixture),
            "mws" => Ok(EstimatorKind::MinibatchWeighted),
            _ => Err(Error::arg(format!("unknown estimator `{s}` (expected batch or mws)"))),
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimatorKind::BatchMixture => "batch",
            EstimatorKind::MinibatchWeighted => "mws",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub beta_final: f64,
    pub warmup_epochs: usize,
    pub clip: f64,
    pub lr: f64,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub hidden: [usize; 2],
    pub seed: u64,
    pub estimator: EstimatorKind,
    /// Checkpoint period in epochs; 0 writes only the final checkpoint.
    pub ckpt_every: usize,
    pub threads: usize,
    /// Fill `wall_ms`; off by default so logs are reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 16000,
            batch_size: 64,
            beta_final: 4.0,
            warmup_epochs: 10,
            clip: 5.0,
            lr: 1e-4,
            latent_dim: 80,
            embed_dim: 8,
            hidden: [512, 256],
            seed: 0,
            estimator: EstimatorKind::BatchMixture,
            ckpt_every: 0,
            threads: 1,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn arch_for(&self, d: &Dataset) -> ArchSpec {
        ArchSpec {
            input_dim: d.feature_dim(),
            embed_dim: self.embed_dim,
            latent_dim: self.latent_dim,
            hidden: self.hidden,
            n_subjects: d.n_subjects(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::arg("batch_size must be at least 2"));
        }
        if !(self.clip > 0.0) {
            return Err(Error::arg("clip must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::arg("lr must be positive"));
        }
        if self.latent_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::arg("layer widths must be positive"));
        }
        Ok(())
    }
}

/// Parameters, optimizer state and completed epoch count.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub epoch: usize,
}

impl TrainState {
    pub fn fresh(arch: ArchSpec, cfg: &TrainConfig) -> Self {
        let params = init_params(arch, cfg.seed);
        let adam = AdamState::new(&params, cfg.lr);
        Self { params, adam, epoch: 0 }
    }
}

impl From<Checkpoint> for TrainState {
    fn from(ck: Checkpoint) -> Self {
        Self { params: ck.params, adam: ck.adam, epoch: ck.epoch }
    }
}

/// Where and what to checkpoint during training.
pub struct CheckpointPlan<'a> {
    pub path: &'a Path,
    pub extras: &'a Bundle,
}

/// Row index batches for one epoch. A trailing single row joins the
/// previous batch so every batch has at least two rows.
fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, domain::SHUFFLE, epoch as u64));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

/// Trains from a fresh initialization without writing checkpoints.
pub fn train(d: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    let (state, log) = train_from(d, cfg, None, None)?;
    Ok((state.params, log))
}

/// Runs epochs `state.epoch .. cfg.epochs`, optionally resuming and
/// checkpointing. On a non-finite loss the run aborts; checkpoints already
/// on disk are left untouched.
pub fn train_from(
    d: &Dataset,
    cfg: &TrainConfig,
    state: Option<TrainState>,
    plan: Option<CheckpointPlan<'_>>,
) -> Result<(TrainState, TrainLog)> {
    cfg.validate()?;
    let mut st = match state {
        Some(s) => s,
        None => TrainState::fresh(cfg.arch_for(d), cfg),
    };
    let arch = st.params.arch;
    if arch.input_dim != d.feature_dim() || arch.n_subjects != d.n_subjects() {
        return Err(Error::arg(format!(
            "model expects {} features and {} subjects, data has {} and {}",
            arch.input_dim,
            arch.n_subjects,
            d.feature_dim(),
            d.n_subjects()
        )));
    }
    let n = d.n_rows();
    if n < 2 {
        return Err(Error::arg("training needs at least two rows"));
    }
    let estimator = cfg.estimator.resolve(n);
    let workers = Workers::new(cfg.threads)?;
    let mut log = TrainLog::default();

    while st.epoch < cfg.epochs {
        let e = st.epoch;
        let started = Instant::now();
        let beta = beta_schedule(e as i64, cfg.beta_final, cfg.warmup_epochs as i64)?;
        let mut eps_rng = rng::stream(cfg.seed, domain::EPS, e as u64);
        let batches = epoch_batches(n, cfg.batch_size, cfg.seed, e);
        let mut acc = EpochRecord { epoch: e + 1, beta, ..EpochRecord::default() };
        for idx in &batches {
            let xb = d.x.select(Axis(0), idx);
            let sb: Vec<usize> = idx.iter().map(|&r| d.subject_of_row[r]).collect();
            let eps = sample_eps(&mut eps_rng, idx.len(), arch.latent_dim);
            let (loss, g) = backward(&st.params, xb.view(), &sb, eps.view(), beta, estimator, &workers)
                .map_err(|err| match err {
                    Error::Training { term, .. } => Error::Training { epoch: e + 1, term },
                    other => other,
                })?;
            let (g, norm) = clip_global_norm(g, cfg.clip);
            if !norm.is_finite() {
                return Err(Error::Training { epoch: e + 1, term: "grad_norm".into() });
            }
            adam_step(&mut st.params, &g, &mut st.adam);
            acc.rec += loss.rec;
            acc.mi += loss.mi;
            acc.tc += loss.tc;
            acc.dim_kl += loss.dim_kl;
            acc.total += loss.total;
            acc.grad_norm += norm;
        }
        let nb = batches.len() as f64;
        for v in [&mut acc.rec, &mut acc.mi, &mut acc.tc, &mut acc.dim_kl, &mut acc.total, &mut acc.grad_norm] {
            *v /= nb;
        }
        if !st.params.is_finite() {
            return Err(Error::Training { epoch: e + 1, term: "parameters".into() });
        }
        if cfg.record_wall_time {
            acc.wall_ms = started.elapsed().as_millis() as u64;
        }
        log.records.push(acc);
        st.epoch += 1;

        if let Some(plan) = &plan {
            let periodic = cfg.ckpt_every > 0 && st.epoch % cfg.ckpt_every == 0;
            if periodic || st.epoch == cfg.epochs {
                save_checkpoint(
                    plan.path,
                    &Checkpoint {
                        params: st.params.clone(),
                        adam: st.adam.clone(),
                        epoch: st.epoch,
                        seed: cfg.seed,
                        extras: plan.extras.clone(),
                    },
                )?;
            }
        }
    }
    Ok((st, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn toy_data(seed: u64) -> Dataset {
        let mut r = rng::stream(seed, 700, 0);
        let blocks: Vec<Array2<f64>> =
            (0..2).map(|_| Array2::from_shape_fn((45, 6), |_| r.sample::<f64, _>(StandardNormal))).collect();
        Dataset::from_blocks(&blocks).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 12,
            batch_size: 16,
            latent_dim: 3,
            embed_dim: 2,
            hidden: [8, 8],
            lr: 1e-3,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn batches_cover_rows_once() {
        let b = epoch_batches(33, 16, 1, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![16, 17]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..33).collect::<Vec<_>>());
        assert_ne!(epoch_batches(33, 16, 1, 0), epoch_batches(33, 16, 1, 1));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let d = toy_data(1);
        let cfg = TrainConfig { epochs: 0, ..small_cfg() };
        let (p, log) = train(&d, &cfg).unwrap();
        assert_eq!(p, init_params(cfg.arch_for(&d), cfg.seed));
        assert!(log.records.is_empty());
    }

    #[test]
    fn runs_are_deterministic_and_thread_independent() {
        let d = toy_data(2);
        let cfg = small_cfg();
        let (p1, l1) = train(&d, &cfg).unwrap();
        let (p2, l2) = train(&d, &cfg).unwrap();
        let (p4, l4) = train(&d, &TrainConfig { threads: 3, ..cfg.clone() }).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(l1, l2);
        assert_eq!(p1, p4);
        assert_eq!(l1, l4);
        assert_eq!(l1.records.len(), 12);
        assert!(l1.records.iter().enumerate().all(|(i, r)| r.epoch == i + 1));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let d = toy_data(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let extras = Bundle::new();
        let cfg = TrainConfig { ckpt_every: 5, ..small_cfg() };
        let (full, full_log) = train_from(&d, &cfg, None, None).unwrap();

        let first = TrainConfig { epochs: 5, ..cfg.clone() };
        train_from(&d, &first, None, Some(CheckpointPlan { path: &path, extras: &extras })).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.epoch, 5);
        let (resumed, tail) = train_from(&d, &cfg, Some(ck.into()), None).unwrap();
        assert_eq!(resumed, full);
        assert_eq!(tail.records[..], full_log.records[5..]);
    }

    #[test]
    fn non_finite_data_aborts_and_keeps_checkpoint() {
        let mut d = toy_data(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let extras = Bundle::new();
        let cfg = TrainConfig { epochs: 2, ckpt_every: 1, ..small_cfg() };
        train_from(&d, &cfg, None, Some(CheckpointPlan { path: &path, extras: &extras })).unwrap();
        let before = std::fs::read(&path).unwrap();

        d.x[[3, 2]] = f64::INFINITY;
        let ck = load_checkpoint(&path).unwrap();
        let cfg = TrainConfig { epochs: 4, ..cfg };
        let err = train_from(&d, &cfg, Some(ck.into()), Some(CheckpointPlan { path: &path, extras: &extras }));
        assert!(matches!(err, Err(Error::Training { epoch: 3, .. })), "{err:?}");
        assert_eq!(std::fs::read(&path).unwrap(), before);
    }

    #[test]
    fn loss_decreases_on_toy_data() {
        let d = toy_data(5);
        let cfg = TrainConfig { epochs: 60, ..small_cfg() };
        let (_, log) = train(&d, &cfg).unwrap();
        assert!(log.records.last().unwrap().rec < log.records[0].rec);
    }

    #[test]
    fn estimator_names_parse() {
        assert_eq!("mws".parse::<EstimatorKind>().unwrap(), EstimatorKind::MinibatchWeighted);
        assert_eq!(EstimatorKind::BatchMixture.to_string(), "batch");
        assert!("x".parse::<EstimatorKind>().is_err());
    }
}
