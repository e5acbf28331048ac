//! Plain-text run configuration: one `section.key = value` per line.
//!
//! `dump` writes every key in a fixed order, so parsing a dump and dumping
//! again reproduces it byte for byte.

use std::collections::BTreeSet;
use std::str::FromStr;

use tcsep::dataset::{MixingKind, Standardization, SynthConfig};
use tcsep::infomax::{Anneal, IcaConfig};
use tcsep::train::{EstimatorKind, TrainConfig};
use tcsep::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapMethod {
    Regression,
    Jacobian,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataOptions {
    pub standardize: Standardization,
    /// Target PCA dimension; skipped unless `0 < pca_dim < D`.
    pub pca_dim: usize,
    pub whiten: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisOptions {
    pub maps: MapMethod,
    pub n_probe: usize,
    pub fnc_threshold: f64,
    /// Components kept for FNC by time-course variance; 0 keeps all.
    pub fnc_components: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataOptions,
    pub train: TrainConfig,
    pub analysis: AnalysisOptions,
    /// InfoMax settings; `anneal` is rebuilt from the two fields below.
    pub ica: IcaConfig,
    pub ica_anneal_by_angle: bool,
    pub ica_anneal_angle: f64,
    /// InfoMax component count; 0 means the true count when ground truth is
    /// available, otherwise the model's latent count.
    pub ica_components: usize,
    pub synth: SynthConfig,
    /// Keys set explicitly by a config file or override.
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataOptions { standardize: Standardization::Pooled, pca_dim: 100, whiten: false },
            train: TrainConfig::default(),
            analysis: AnalysisOptions {
                maps: MapMethod::Regression,
                n_probe: 64,
                fnc_threshold: 0.05,
                fnc_components: 0,
            },
            ica: IcaConfig::default(),
            ica_anneal_by_angle: true,
            ica_anneal_angle: 60.0,
            ica_components: 0,
            synth: SynthConfig::default(),
            explicit: BTreeSet::new(),
        }
    }
}

pub const KEYS: [&str; 38] = [
    "data.standardize",
    "data.pca_dim",
    "data.whiten",
    "model.latent_dim",
    "model.embed_dim",
    "model.hidden1",
    "model.hidden2",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.beta_final",
    "train.warmup_epochs",
    "train.clip",
    "train.estimator",
    "train.ckpt_every",
    "train.seed",
    "train.threads",
    "train.record_wall_time",
    "analysis.maps",
    "analysis.n_probe",
    "analysis.fnc_threshold",
    "analysis.fnc_components",
    "ica.components",
    "ica.eta",
    "ica.anneal",
    "ica.anneal_angle",
    "ica.anneal_factor",
    "ica.max_iter",
    "ica.tol",
    "synth.k_true",
    "synth.features",
    "synth.subjects",
    "synth.timepoints",
    "synth.kind",
    "synth.noise_std",
    "synth.seed",
    "synth.ar_coef",
    "synth.sin_amplitude",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Argument(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Argument(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn standardization_name(s: Standardization) -> &'static str {
    match s {
        Standardization::Pooled => "pooled",
        Standardization::PerSubject => "per_subject",
        Standardization::None => "none",
    }
}

impl RunConfig {
    pub fn ica_config(&self) -> IcaConfig {
        let anneal =
            if self.ica_anneal_by_angle { Anneal::OnAngle(self.ica_anneal_angle) } else { Anneal::OnNormGrowth };
        IcaConfig { anneal, ..self.ica.clone() }
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let t = &self.train;
        let a = &self.analysis;
        let s = &self.synth;
        Ok(match key {
            "data.standardize" => standardization_name(self.data.standardize).to_string(),
            "data.pca_dim" => self.data.pca_dim.to_string(),
            "data.whiten" => self.data.whiten.to_string(),
            "model.latent_dim" => t.latent_dim.to_string(),
            "model.embed_dim" => t.embed_dim.to_string(),
            "model.hidden1" => t.hidden[0].to_string(),
            "model.hidden2" => t.hidden[1].to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.beta_final" => t.beta_final.to_string(),
            "train.warmup_epochs" => t.warmup_epochs.to_string(),
            "train.clip" => t.clip.to_string(),
            "train.estimator" => t.estimator.to_string(),
            "train.ckpt_every" => t.ckpt_every.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.threads" => t.threads.to_string(),
            "train.record_wall_time" => t.record_wall_time.to_string(),
            "analysis.maps" => match a.maps {
                MapMethod::Regression => "regression".into(),
                MapMethod::Jacobian => "jacobian".into(),
            },
            "analysis.n_probe" => a.n_probe.to_string(),
            "analysis.fnc_threshold" => a.fnc_threshold.to_string(),
            "analysis.fnc_components" => a.fnc_components.to_string(),
            "ica.components" => self.ica_components.to_string(),
            "ica.eta" => self.ica.eta.to_string(),
            "ica.anneal" => if self.ica_anneal_by_angle { "angle" } else { "norm" }.into(),
            "ica.anneal_angle" => self.ica_anneal_angle.to_string(),
            "ica.anneal_factor" => self.ica.anneal_factor.to_string(),
            "ica.max_iter" => self.ica.max_iter.to_string(),
            "ica.tol" => self.ica.tol.to_string(),
            "synth.k_true" => s.k_true.to_string(),
            "synth.features" => s.feature_dim.to_string(),
            "synth.subjects" => s.n_subjects.to_string(),
            "synth.timepoints" => s.timepoints.to_string(),
            "synth.kind" => s.mixing.to_string(),
            "synth.noise_std" => s.noise_std.to_string(),
            "synth.seed" => s.seed.to_string(),
            "synth.ar_coef" => s.ar_coef.to_string(),
            "synth.sin_amplitude" => s.sin_amplitude.to_string(),
            _ => return Err(Error::Argument(format!("unknown config key `{key}`"))),
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "data.standardize" => {
                self.data.standardize = match v {
                    "pooled" => Standardization::Pooled,
                    "per_subject" => Standardization::PerSubject,
                    "none" => Standardization::None,
                    _ => return Err(Error::Argument(format!("`{key}`: expected pooled, per_subject or none"))),
                }
            }
            "data.pca_dim" => self.data.pca_dim = parse(key, v)?,
            "data.whiten" => self.data.whiten = parse_bool(key, v)?,
            "model.latent_dim" => t.latent_dim = parse(key, v)?,
            "model.embed_dim" => t.embed_dim = parse(key, v)?,
            "model.hidden1" => t.hidden[0] = parse(key, v)?,
            "model.hidden2" => t.hidden[1] = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.beta_final" => t.beta_final = parse(key, v)?,
            "train.warmup_epochs" => t.warmup_epochs = parse(key, v)?,
            "train.clip" => t.clip = parse(key, v)?,
            "train.estimator" => t.estimator = v.parse::<EstimatorKind>()?,
            "train.ckpt_every" => t.ckpt_every = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.threads" => t.threads = parse(key, v)?,
            "train.record_wall_time" => t.record_wall_time = parse_bool(key, v)?,
            "analysis.maps" => {
                self.analysis.maps = match v {
                    "regression" => MapMethod::Regression,
                    "jacobian" => MapMethod::Jacobian,
                    _ => return Err(Error::Argument(format!("`{key}`: expected regression or jacobian"))),
                }
            }
            "analysis.n_probe" => self.analysis.n_probe = parse(key, v)?,
            "analysis.fnc_threshold" => self.analysis.fnc_threshold = parse(key, v)?,
            "analysis.fnc_components" => self.analysis.fnc_components = parse(key, v)?,
            "ica.components" => self.ica_components = parse(key, v)?,
            "ica.eta" => self.ica.eta = parse(key, v)?,
            "ica.anneal" => {
                self.ica_anneal_by_angle = match v {
                    "angle" => true,
                    "norm" => false,
                    _ => return Err(Error::Argument(format!("`{key}`: expected angle or norm"))),
                }
            }
            "ica.anneal_angle" => self.ica_anneal_angle = parse(key, v)?,
            "ica.anneal_factor" => self.ica.anneal_factor = parse(key, v)?,
            "ica.max_iter" => self.ica.max_iter = parse(key, v)?,
            "ica.tol" => self.ica.tol = parse(key, v)?,
            "synth.k_true" => s.k_true = parse(key, v)?,
            "synth.features" => s.feature_dim = parse(key, v)?,
            "synth.subjects" => s.n_subjects = parse(key, v)?,
            "synth.timepoints" => s.timepoints = parse(key, v)?,
            "synth.kind" => s.mixing = v.parse::<MixingKind>()?,
            "synth.noise_std" => s.noise_std = parse(key, v)?,
            "synth.seed" => s.seed = parse(key, v)?,
            "synth.ar_coef" => s.ar_coef = parse(key, v)?,
            "synth.sin_amplitude" => s.sin_amplitude = parse(key, v)?,
            _ => return Err(Error::Argument(format!("unknown config key `{key}`"))),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Argument(format!("config line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Argument(format!("config line {}: duplicate key `{k}`", n + 1)));
            }
            self.set(k, v.trim())?;
        }
        Ok(())
    }

    pub fn dump(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&self.get(k).expect("known key"));
            out.push('\n');
        }
        out
    }
}
