//! Small dense helpers shared across modules.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

pub(crate) fn to_na(m: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

pub(crate) fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Pearson correlation; `None` when either side has (near) zero variance.
pub fn pearson(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 1e-300 || sbb <= 1e-300 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Column-by-column Pearson correlations between `a` (n × p) and `b` (n × q).
/// Degenerate columns correlate as 0.
pub fn cross_correlation(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.ncols(), b.ncols()));
    for (i, ca) in a.axis_iter(Axis(1)).enumerate() {
        for (j, cb) in b.axis_iter(Axis(1)).enumerate() {
            out[[i, j]] = pearson(ca, cb).unwrap_or(0.0);
        }
    }
    out
}

/// Row-wise Pearson correlations between the rows of `a` and the rows of `b`.
pub fn row_correlation(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    cross_correlation(a.t(), b.t())
}

pub(crate) fn column_means(x: ArrayView2<f64>) -> Array1<f64> {
    let n = x.nrows() as f64;
    x.sum_axis(Axis(0)) / n
}

/// Index of the entry with the largest magnitude; ties go to the lower index.
pub(crate) fn argmax_abs(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > best_val {
            best_val = x.abs();
            best = i;
        }
    }
    best
}

pub(crate) fn frobenius(x: ArrayView2<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}
