use std::path::Path;

use ndarray::{Array2, ArrayView2};

use super::ComponentSet;
use crate::dataset::SyntheticTruth;
use crate::error::{Error, Result};
use crate::linalg::{cross_correlation, row_correlation};

/// Largest side for which [`assign_max`] enumerates all assignments.
pub const BRUTE_FORCE_MAX: usize = 10;

/// Maximum-score assignment of every row to a distinct column by
/// exhaustive search (`rows ≤ cols`). Ties keep the lexicographically first.
pub fn assign_brute_force(score: ArrayView2<f64>) -> Vec<usize> {
    let (n, m) = score.dim();
    assert!(n <= m, "more rows than columns");
    fn go(
        i: usize,
        score: &ArrayView2<f64>,
        used: &mut [bool],
        cur: &mut Vec<usize>,
        acc: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        if i == score.nrows() {
            if acc > best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        for j in 0..score.ncols() {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                go(i + 1, score, used, cur, acc + score[[i, j]], best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, (0..n).collect());
    go(0, &score, &mut vec![false; m], &mut Vec::with_capacity(n), 0.0, &mut best);
    best.1
}

/// Same contract as [`assign_brute_force`] via the Hungarian method with
/// potentials, O(n²·m).
pub fn assign_hungarian(score: ArrayView2<f64>) -> Vec<usize> {
    let (n, m) = score.dim();
    assert!(n <= m, "more rows than columns");
    let cost = |i: usize, j: usize| -score[[i - 1, j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut ans = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            ans[p[j] - 1] = j - 1;
        }
    }
    ans
}

/// Optimal one-to-one `(row, col)` pairs for any shape, sorted by row.
pub fn assign_max(score: ArrayView2<f64>) -> Vec<(usize, usize)> {
    let (n, m) = score.dim();
    let solve = |s: ArrayView2<f64>| {
        if s.ncols() <= BRUTE_FORCE_MAX {
            assign_brute_force(s)
        } else {
            assign_hungarian(s)
        }
    };
    if n <= m {
        solve(score).into_iter().enumerate().collect()
    } else {
        let mut pairs: Vec<(usize, usize)> = solve(score.t()).into_iter().enumerate().map(|(j, i)| (i, j)).collect();
        pairs.sort_unstable();
        pairs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// `(index in a, index in b, signed spatial r)`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub mean_abs_r: f64,
}

pub fn match_components(a: &ComponentSet, b: &ComponentSet) -> Result<Matching> {
    if a.spatial.ncols() != b.spatial.ncols() {
        return Err(Error::arg(format!(
            "maps have {} and {} features",
            a.spatial.ncols(),
            b.spatial.ncols()
        )));
    }
    let r = row_correlation(a.spatial.view(), b.spatial.view());
    let pairs: Vec<(usize, usize, f64)> =
        assign_max(r.mapv(f64::abs).view()).into_iter().map(|(i, j)| (i, j, r[[i, j]])).collect();
    let mean_abs_r = if pairs.is_empty() {
        0.0
    } else {
        pairs.iter().map(|p| p.2.abs()).sum::<f64>() / pairs.len() as f64
    };
    Ok(Matching { pairs, mean_abs_r })
}

/// Mean matched |r| between recovered and true sources (columns).
pub fn mcc(recovered: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<f64> {
    if recovered.ncols() < truth.ncols() {
        return Err(Error::arg(format!(
            "{} recovered components cannot cover {} true ones",
            recovered.ncols(),
            truth.ncols()
        )));
    }
    if recovered.nrows() != truth.nrows() {
        return Err(Error::arg("recovered and true sources have different lengths"));
    }
    let c: Array2<f64> = cross_correlation(truth, recovered).mapv(f64::abs);
    let pairs = assign_max(c.view());
    Ok(pairs.iter().map(|&(i, j)| c[[i, j]]).sum::<f64>() / truth.ncols() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MccMode {
    Time,
    Space,
}

pub fn mcc_score(cs: &ComponentSet, truth: &SyntheticTruth, mode: MccMode) -> Result<f64> {
    match mode {
        MccMode::Time => mcc(cs.stacked_timecourses().view(), truth.true_timecourses.view()),
        MccMode::Space => mcc(cs.spatial.t(), truth.true_spatial.t()),
    }
}

/// `pair,index_a,index_b,r` plus per-method MCC columns when given.
pub fn write_matching_csv(path: impl AsRef<Path>, m: &Matching, mcc_cols: Option<(f64, f64)>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["pair", "index_a", "index_b", "r"];
    if mcc_cols.is_some() {
        header.extend(["mcc_a", "mcc_b"]);
    }
    w.write_record(&header)?;
    for (n, &(i, j, r)) in m.pairs.iter().enumerate() {
        let mut row = vec![n.to_string(), i.to_string(), j.to_string(), r.to_string()];
        if let Some((a, b)) = mcc_cols {
            row.extend([a.to_string(), b.to_string()]);
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
