//! Multi-subject time-by-feature data: loading, standardization, PCA and
//! the synthetic ground-truth generator.

mod pca;
mod synth;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::tcsf::{self, Dtype};

pub use pca::{pca_back_project, pca_fit, pca_inverse, pca_transform, PcaBasis};
pub use synth::{synth_generate, MixingKind, SynthConfig, SyntheticTruth};

/// Standardized (or raw) rows × features with per-row subject ids.
///
/// Rows of one subject are contiguous and in time order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub subject_of_row: Vec<usize>,
    ranges: Vec<Range<usize>>,
}

impl Dataset {
    /// Builds a dataset from a matrix and one subject id per row.
    pub fn new(x: Array2<f64>, subject_of_row: Vec<usize>) -> Result<Self> {
        if subject_of_row.len() != x.nrows() {
            return Err(Error::Consistency(format!(
                "{} subject ids for {} rows",
                subject_of_row.len(),
                x.nrows()
            )));
        }
        let n_subjects = subject_of_row.iter().max().map_or(0, |m| m + 1);
        let mut ranges: Vec<Option<Range<usize>>> = vec![None; n_subjects];
        let mut start = 0;
        for i in 1..=subject_of_row.len() {
            if i == subject_of_row.len() || subject_of_row[i] != subject_of_row[start] {
                let sid = subject_of_row[start];
                if ranges[sid].is_some() {
                    return Err(Error::Consistency(format!(
                        "rows of subject {sid} are not contiguous"
                    )));
                }
                ranges[sid] = Some(start..i);
                start = i;
            }
        }
        let ranges = ranges
            .into_iter()
            .enumerate()
            .map(|(s, r)| r.ok_or_else(|| Error::Consistency(format!("subject {s} has no rows"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { x, subject_of_row, ranges })
    }

    /// Stacks per-subject blocks; block `s` becomes subject `s`.
    pub fn from_blocks(blocks: &[Array2<f64>]) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::arg("no subject blocks"));
        }
        let views: Vec<ArrayView2<f64>> = blocks.iter().map(|b| b.view()).collect();
        let x = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Consistency(format!("blocks disagree on feature count: {e}")))?;
        let subject_of_row = blocks
            .iter()
            .enumerate()
            .flat_map(|(s, b)| std::iter::repeat_n(s, b.nrows()))
            .collect();
        Self::new(x, subject_of_row)
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_subjects(&self) -> usize {
        self.ranges.len()
    }

    pub fn timepoints_per_subject(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }

    pub fn subject_rows(&self, s: usize) -> Range<usize> {
        self.ranges[s].clone()
    }

    pub fn subject_block(&self, s: usize) -> ArrayView2<'_, f64> {
        self.x.slice(s![self.ranges[s].clone(), ..])
    }

    /// Same subject layout, different features (e.g. after PCA).
    pub fn with_features(&self, x: Array2<f64>) -> Result<Self> {
        if x.nrows() != self.n_rows() {
            return Err(Error::arg("row count changed"));
        }
        Ok(Self { x, subject_of_row: self.subject_of_row.clone(), ranges: self.ranges.clone() })
    }
}

/// Reads a TCSF matrix plus its subjects CSV. No standardization is applied.
pub fn load_dataset(path: impl AsRef<Path>, subjects_path: impl AsRef<Path>) -> Result<Dataset> {
    let x = tcsf::load_matrix(path)?;
    if let Some(((i, j), v)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite value {v} at ({i}, {j})")));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(subjects_path)?;
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["subject_id", "start_row", "end_row"] {
        return Err(Error::format("subjects CSV header must be `subject_id,start_row,end_row`"));
    }
    let mut subject_of_row = vec![usize::MAX; x.nrows()];
    for rec in rdr.records() {
        let rec = rec?;
        let field = |k: usize| -> Result<usize> {
            rec[k]
                .trim()
                .parse()
                .map_err(|_| Error::format(format!("bad integer `{}` in subjects CSV", &rec[k])))
        };
        let (sid, start, end) = (field(0)?, field(1)?, field(2)?);
        if start >= end || end > x.nrows() {
            return Err(Error::Consistency(format!(
                "row range {start}..{end} invalid for {} rows",
                x.nrows()
            )));
        }
        for slot in &mut subject_of_row[start..end] {
            if *slot != usize::MAX {
                return Err(Error::Consistency(format!("row ranges overlap at {start}..{end}")));
            }
            *slot = sid;
        }
    }
    if let Some(i) = subject_of_row.iter().position(|&s| s == usize::MAX) {
        return Err(Error::Consistency(format!(
            "row {i} is not assigned to a subject ({} rows in matrix)",
            x.nrows()
        )));
    }
    Dataset::new(x, subject_of_row)
}

pub fn save_subjects(path: impl AsRef<Path>, d: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(b"subject_id,start_row,end_row\n")?;
    let mut order: Vec<usize> = (0..d.n_subjects()).collect();
    order.sort_by_key(|&s| d.ranges[s].start);
    for s in order {
        let r = &d.ranges[s];
        writeln!(w, "{s},{},{}", r.start, r.end)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(
    path: impl AsRef<Path>,
    subjects_path: impl AsRef<Path>,
    d: &Dataset,
) -> Result<()> {
    tcsf::save_matrix(path, &d.x, Dtype::F64)?;
    save_subjects(subjects_path, d)
}

/// How column statistics are pooled during standardization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Standardization {
    #[default]
    Pooled,
    PerSubject,
    None,
}

const CONSTANT_STD: f64 = 1e-12;

fn standardize_block(mut x: ndarray::ArrayViewMut2<f64>) {
    let n = x.nrows() as f64;
    for mut col in x.axis_iter_mut(Axis(1)) {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std < CONSTANT_STD {
            col.fill(0.0);
        } else {
            col.mapv_inplace(|v| (v - mean) / std);
        }
    }
}

/// Zero mean, unit population standard deviation per feature; constant
/// features become exact zeros.
pub fn standardize(d: &Dataset) -> Result<Dataset> {
    standardize_with(d, Standardization::Pooled)
}

pub fn standardize_with(d: &Dataset, mode: Standardization) -> Result<Dataset> {
    if d.n_rows() < 2 {
        return Err(Error::arg("standardization needs at least two rows"));
    }
    let mut out = d.clone();
    match mode {
        Standardization::Pooled => standardize_block(out.x.view_mut()),
        Standardization::PerSubject => {
            for r in &d.ranges {
                standardize_block(out.x.slice_mut(s![r.clone(), ..]));
            }
        }
        Standardization::None => {}
    }
    Ok(out)
}
