//! Checkpoints: a TCSF bundle of named tensors plus a `key = value`
//! sidecar at `<path>.meta` holding the architecture and optimizer counters.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::model::{ArchSpec, ModelParams, TENSOR_NAMES};
use crate::tcsf::{load_bundle, save_bundle, take, Bundle};

use super::adam::AdamState;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    /// Additional records stored alongside the model (e.g. a PCA basis).
    pub extras: Bundle,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn push_params(out: &mut Bundle, prefix: &str, p: &ModelParams) {
    for (name, t) in TENSOR_NAMES.iter().zip(p.tensors()) {
        out.push((format!("{prefix}{name}"), t.to_owned()));
    }
}

fn fill_params(bundle: &mut Bundle, prefix: &str, p: &mut ModelParams) -> Result<()> {
    for (name, mut slot) in TENSOR_NAMES.iter().zip(p.tensors_mut()) {
        let key = format!("{prefix}{name}");
        let t: ArrayD<f64> = take(bundle, &key)?;
        if t.shape() != slot.shape() {
            return Err(Error::format(format!(
                "record `{key}` has shape {:?}, architecture expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        slot.assign(&t);
    }
    Ok(())
}

fn write_atomic(path: &Path, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    f(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut records = Bundle::new();
    push_params(&mut records, "param.", &ck.params);
    push_params(&mut records, "adam.m.", &ck.adam.m);
    push_params(&mut records, "adam.v.", &ck.adam.v);
    records.extend(ck.extras.iter().cloned());

    let a = ck.params.arch;
    let meta = format!(
        "input_dim = {}\nembed_dim = {}\nlatent_dim = {}\nhidden1 = {}\nhidden2 = {}\nn_subjects = {}\n\
         epoch = {}\nstep = {}\nseed = {}\nlr = {:?}\nbeta1 = {:?}\nbeta2 = {:?}\neps_hat = {:?}\n",
        a.input_dim,
        a.embed_dim,
        a.latent_dim,
        a.hidden[0],
        a.hidden[1],
        a.n_subjects,
        ck.epoch,
        ck.adam.step,
        ck.seed,
        ck.adam.lr,
        ck.adam.beta1,
        ck.adam.beta2,
        ck.adam.eps_hat,
    );
    write_atomic(path, |p| save_bundle(p, &records))?;
    write_atomic(&meta_path(path), |p| Ok(fs::write(p, meta)?))
}

fn parse_meta(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("checkpoint meta line {}: expected `key = value`", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = meta.get(key).ok_or_else(|| Error::format(format!("checkpoint meta lacks `{key}`")))?;
    raw.parse().map_err(|_| Error::format(format!("checkpoint meta `{key}` = `{raw}` is invalid")))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let meta = parse_meta(&fs::read_to_string(meta_path(path))?)?;
    let arch = ArchSpec {
        input_dim: field(&meta, "input_dim")?,
        embed_dim: field(&meta, "embed_dim")?,
        latent_dim: field(&meta, "latent_dim")?,
        hidden: [field(&meta, "hidden1")?, field(&meta, "hidden2")?],
        n_subjects: field(&meta, "n_subjects")?,
    };
    let mut bundle = load_bundle(path)?;
    let mut params = ModelParams::zeros(arch);
    fill_params(&mut bundle, "param.", &mut params)?;
    let mut adam = AdamState::new(&params, field(&meta, "lr")?);
    adam.step = field(&meta, "step")?;
    adam.beta1 = field(&meta, "beta1")?;
    adam.beta2 = field(&meta, "beta2")?;
    adam.eps_hat = field(&meta, "eps_hat")?;
    fill_params(&mut bundle, "adam.m.", &mut adam.m)?;
    fill_params(&mut bundle, "adam.v.", &mut adam.v)?;
    Ok(Checkpoint { params, adam, epoch: field(&meta, "epoch")?, seed: field(&meta, "seed")?, extras: bundle })
}
