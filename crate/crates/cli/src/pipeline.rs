//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, ArrayD};
use tcsep::analysis::{
    fnc, hcluster_order, latent_timecourses, match_components, mcc_score, spatial_maps_jacobian,
    spatial_maps_regression, write_fnc_csv, write_matching_csv, ComponentSet, MccMode, Method,
};
use tcsep::dataset::{
    load_dataset, pca_fit, pca_transform, save_dataset, standardize_with, synth_generate, Dataset, PcaBasis,
    Standardization, SyntheticTruth,
};
use tcsep::infomax::{infomax_fit, unmix};
use tcsep::tcsf::{save_matrix, take, take_matrix, Bundle, Dtype};
use tcsep::train::{
    gradcheck, load_checkpoint, random_gradcheck_case, train_from, Checkpoint, CheckpointPlan, TrainLog,
    TrainState,
};
use tcsep::{Error, Result};

use crate::config::{MapMethod, RunConfig};

pub const GRADCHECK_TOL: f64 = 1e-6;

/// `data.tcsf` → `data.subjects.csv`.
pub fn subjects_path_for(data: &Path) -> PathBuf {
    data.with_extension("subjects.csv")
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn run_synth(cfg: &RunConfig, out: &Path, subjects: &Path, truth_path: &Path) -> Result<()> {
    let (d, truth) = synth_generate(&cfg.synth)?;
    save_dataset(out, subjects, &d)?;
    truth.save(truth_path)?;
    println!(
        "wrote {} ({} rows x {} features, {} subjects, {} mixing)",
        out.display(),
        d.n_rows(),
        d.feature_dim(),
        d.n_subjects(),
        cfg.synth.mixing
    );
    Ok(())
}

/// Preprocessing applied before the model sees the data.
struct Prep {
    standardize: Standardization,
    pca: Option<PcaBasis>,
}

fn standardization_code(s: Standardization) -> f64 {
    match s {
        Standardization::Pooled => 0.0,
        Standardization::PerSubject => 1.0,
        Standardization::None => 2.0,
    }
}

fn one(v: f64) -> ArrayD<f64> {
    Array1::from_elem(1, v).into_dyn()
}

fn scalar(b: &mut Bundle, name: &str) -> Result<f64> {
    take(b, name)?.iter().next().copied().ok_or_else(|| Error::Format(format!("record `{name}` is empty")))
}

impl Prep {
    fn fit(raw: &Dataset, cfg: &RunConfig) -> Result<(Self, Dataset)> {
        let std = standardize_with(raw, cfg.data.standardize)?;
        let p = cfg.data.pca_dim;
        let pca = if p > 0 && p < std.feature_dim() { Some(pca_fit(&std, p, cfg.data.whiten)?) } else { None };
        let prep = Prep { standardize: cfg.data.standardize, pca };
        let d = prep.project(&std)?;
        Ok((prep, d))
    }

    fn standardized(&self, raw: &Dataset) -> Result<Dataset> {
        standardize_with(raw, self.standardize)
    }

    fn project(&self, std: &Dataset) -> Result<Dataset> {
        match &self.pca {
            Some(b) => std.with_features(pca_transform(b, std.x.view())?),
            None => Ok(std.clone()),
        }
    }

    fn to_bundle(&self) -> Bundle {
        let mut b = vec![("prep.standardize".to_string(), one(standardization_code(self.standardize)))];
        if let Some(p) = &self.pca {
            b.push(("pca.mean".into(), p.mean.clone().into_dyn()));
            b.push(("pca.components".into(), p.components.clone().into_dyn()));
            b.push(("pca.singular_values".into(), p.singular_values.clone().into_dyn()));
            b.push(("pca.whiten".into(), one(if p.whiten { 1.0 } else { 0.0 })));
            b.push(("pca.n_samples".into(), one(p.n_samples as f64)));
        }
        b
    }

    fn from_bundle(extras: &Bundle) -> Result<Self> {
        let mut b = extras.clone();
        let standardize = match scalar(&mut b, "prep.standardize")? as i64 {
            0 => Standardization::Pooled,
            1 => Standardization::PerSubject,
            2 => Standardization::None,
            c => return Err(Error::Format(format!("unknown standardization code {c}"))),
        };
        let pca = if b.iter().any(|(n, _)| n == "pca.mean") {
            let mean = take(&mut b, "pca.mean")?
                .into_dimensionality()
                .map_err(|_| Error::Format("pca.mean is not 1-D".into()))?;
            let components = take_matrix(&mut b, "pca.components")?;
            let singular_values = take(&mut b, "pca.singular_values")?
                .into_dimensionality()
                .map_err(|_| Error::Format("pca.singular_values is not 1-D".into()))?;
            let whiten = scalar(&mut b, "pca.whiten")? != 0.0;
            let n_samples = scalar(&mut b, "pca.n_samples")? as usize;
            Some(PcaBasis { mean, components, singular_values, whiten, n_samples })
        } else {
            None
        };
        Ok(Prep { standardize, pca })
    }
}

pub fn run_train(cfg: &RunConfig, data: &Path, subjects: &Path, out_dir: &Path, resume: Option<&Path>) -> Result<()> {
    ensure_dir(out_dir)?;
    let raw = load_dataset(data, subjects)?;
    let ckpt_path = out_dir.join("checkpoint.tcsf");
    let log_path = out_dir.join("loss.csv");

    let (prep, d, state, mut log) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let prep = Prep::from_bundle(&ck.extras)?;
            let d = prep.project(&prep.standardized(&raw)?)?;
            let mut log = if log_path.exists() { TrainLog::read_csv(&log_path)? } else { TrainLog::default() };
            log.records.retain(|r| r.epoch <= ck.epoch);
            let state: TrainState = ck.into();
            (prep, d, Some(state), log)
        }
        None => {
            let (prep, d) = Prep::fit(&raw, cfg)?;
            (prep, d, None, TrainLog::default())
        }
    };
    let extras = prep.to_bundle();
    let plan = CheckpointPlan { path: &ckpt_path, extras: &extras };
    let (state, new_log) = train_from(&d, &cfg.train, state, Some(plan))?;
    let ran = !new_log.records.is_empty();
    log.records.extend(new_log.records);
    log.write_csv(&log_path)?;
    if !ran {
        // No epoch ran, so the loop wrote nothing; keep the current state.
        tcsep::train::save_checkpoint(
            &ckpt_path,
            &Checkpoint {
                params: state.params.clone(),
                adam: state.adam.clone(),
                epoch: state.epoch,
                seed: cfg.train.seed,
                extras,
            },
        )?;
    }
    match log.records.last() {
        Some(r) => println!(
            "epoch {}: total {:.6} rec {:.6} mi {:.6} tc {:.6} dim_kl {:.6}",
            r.epoch, r.total, r.rec, r.mi, r.tc, r.dim_kl
        ),
        None => println!("no epochs run"),
    }
    println!("wrote {} and {}", ckpt_path.display(), log_path.display());
    Ok(())
}

/// Model components in standardized feature space.
fn extract_components(cfg: &RunConfig, ckpt: &Path, raw: &Dataset) -> Result<(ComponentSet, Checkpoint)> {
    let ck = load_checkpoint(ckpt)?;
    let prep = Prep::from_bundle(&ck.extras)?;
    let d = prep.project(&prep.standardized(raw)?)?;
    let cs = match cfg.analysis.maps {
        MapMethod::Regression => {
            let tcs = latent_timecourses(&ck.params, &d)?;
            spatial_maps_regression(&tcs, &d, prep.pca.as_ref(), Method::TcvaeRegression)?
        }
        MapMethod::Jacobian => {
            spatial_maps_jacobian(&ck.params, &d, cfg.analysis.n_probe.min(d.n_rows()), prep.pca.as_ref())?
        }
    };
    Ok((cs, ck))
}

fn write_components(cs: &ComponentSet, out_dir: &Path, prefix: &str) -> Result<()> {
    cs.save(out_dir.join(format!("{prefix}components.tcsf")))?;
    save_matrix(out_dir.join(format!("{prefix}spatial_maps.tcsf")), &cs.spatial, Dtype::F64)?;
    save_matrix(out_dir.join(format!("{prefix}timecourses.tcsf")), &cs.stacked_timecourses(), Dtype::F64)?;
    Ok(())
}

pub fn run_extract(cfg: &RunConfig, ckpt: &Path, data: &Path, subjects: &Path, out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    let raw = load_dataset(data, subjects)?;
    let (cs, _) = extract_components(cfg, ckpt, &raw)?;
    write_components(&cs, out_dir, "")?;
    println!("extracted {} components ({})", cs.n_components(), cs.method.as_str());
    Ok(())
}

pub fn run_fnc(cfg: &RunConfig, components: &Path, out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    let mut cs = ComponentSet::load(components)?;
    if cfg.analysis.fnc_components > 0 {
        cs = cs.select_by_variance(cfg.analysis.fnc_components)?;
    }
    let mut f = fnc(&cs.timecourses, cfg.analysis.fnc_threshold)?;
    if f.raw.nrows() >= 2 {
        f.order = hcluster_order(&f)?;
    }
    write_fnc_csv(out_dir.join("fnc.csv"), &f.r, &f.order, &cs.latent_order)?;
    write_fnc_csv(out_dir.join("fnc_raw.csv"), &f.raw, &f.order, &cs.latent_order)?;
    if !f.degenerate.is_empty() {
        let ids: Vec<usize> = f.degenerate.iter().map(|&i| cs.latent_order[i]).collect();
        eprintln!("warning: zero-variance time courses for components {ids:?}; their correlations are 0");
    }
    let kept = f.r.iter().filter(|v| **v != 0.0).count() - f.r.nrows();
    println!("FNC over {} components, {} subjects; {} off-diagonal entries above threshold", f.r.nrows(), f.n_subjects_averaged, kept);
    Ok(())
}

fn ica_components(cfg: &RunConfig, truth: Option<&SyntheticTruth>, d: &Dataset) -> usize {
    let k = match (cfg.ica_components, truth) {
        (0, Some(t)) => t.true_spatial.nrows(),
        (0, None) => cfg.train.latent_dim,
        (k, _) => k,
    };
    k.min(d.feature_dim()).min(d.n_rows())
}

fn fit_infomax(cfg: &RunConfig, std: &Dataset, truth: Option<&SyntheticTruth>) -> Result<ComponentSet> {
    let k = ica_components(cfg, truth, std);
    let m = infomax_fit(std, k, &cfg.ica_config())?;
    if !m.converged {
        eprintln!("warning: InfoMax stopped after {} iterations without converging", m.iterations);
    }
    unmix(&m, std)
}

pub fn run_infomax(cfg: &RunConfig, data: &Path, subjects: &Path, truth: Option<&Path>, out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    let raw = load_dataset(data, subjects)?;
    let std = standardize_with(&raw, cfg.data.standardize)?;
    let truth = truth.map(SyntheticTruth::load).transpose()?;
    let cs = fit_infomax(cfg, &std, truth.as_ref())?;
    write_components(&cs, out_dir, "infomax_")?;
    println!("InfoMax: {} components", cs.n_components());
    if let Some(t) = &truth {
        println!(
            "mcc_time = {:.6}\nmcc_space = {:.6}",
            mcc_score(&cs, t, MccMode::Time)?,
            mcc_score(&cs, t, MccMode::Space)?
        );
    }
    Ok(())
}

pub fn run_compare(
    cfg: &RunConfig,
    ckpt: &Path,
    data: &Path,
    subjects: &Path,
    truth: Option<&Path>,
    reference: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    ensure_dir(out_dir)?;
    let raw = load_dataset(data, subjects)?;
    let truth = truth.map(SyntheticTruth::load).transpose()?;
    let (a, ck) = extract_components(cfg, ckpt, &raw)?;
    let (b, label) = match reference {
        Some(r) => (extract_components(cfg, r, &raw)?.0, "reference"),
        None => {
            let std = Prep::from_bundle(&ck.extras)?.standardized(&raw)?;
            (fit_infomax(cfg, &std, truth.as_ref())?, "infomax")
        }
    };
    let m = match_components(&a, &b)?;
    let mccs = match &truth {
        Some(t) => Some((mcc_score(&a, t, MccMode::Time)?, mcc_score(&b, t, MccMode::Time)?)),
        None => None,
    };
    write_matching_csv(out_dir.join("compare.csv"), &m, mccs)?;
    println!("matched {} pairs, mean |r| = {:.6}", m.pairs.len(), m.mean_abs_r);
    if let Some((ma, mb)) = mccs {
        println!("mcc_tcvae = {ma:.6}\nmcc_{label} = {mb:.6}");
    }
    Ok(())
}

pub fn run_gradcheck(seed: u64, cases: u64) -> Result<()> {
    let mut worst = 0.0f64;
    for i in 0..cases.max(1) {
        let r = gradcheck(&random_gradcheck_case(seed.wrapping_add(i)), 1e-5)?;
        worst = worst.max(r.max_rel_error);
    }
    println!("max relative error: {worst:e}");
    if worst >= GRADCHECK_TOL {
        return Err(Error::Numerical(format!("gradient check failed: {worst:e} >= {GRADCHECK_TOL:e}")));
    }
    Ok(())
}
