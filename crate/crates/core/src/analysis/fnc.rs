use std::path::Path;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::linalg::pearson;

/// Fisher-z values are clamped here so ±1 correlations stay finite and map
/// back to exactly ±1.
const Z_CLAMP: f64 = 20.0;

/// Subject-averaged correlation between component time courses.
#[derive(Clone, Debug, PartialEq)]
pub struct FncMatrix {
    /// Averaged correlations before thresholding.
    pub raw: Array2<f64>,
    /// `raw` with off-diagonal entries `|r| ≤ threshold` set to 0.
    pub r: Array2<f64>,
    pub threshold: f64,
    pub order: Vec<usize>,
    pub n_subjects_averaged: usize,
    /// Components whose time course had zero variance in some subject.
    pub degenerate: Vec<usize>,
}

impl FncMatrix {
    /// `m[order][:, order]`.
    pub fn reordered(&self, m: &Array2<f64>) -> Array2<f64> {
        m.select(Axis(0), &self.order).select(Axis(1), &self.order)
    }
}

pub fn fnc(tcs: &[Array2<f64>], threshold: f64) -> Result<FncMatrix> {
    let first = tcs.first().ok_or_else(|| Error::arg("FNC needs at least one subject"))?;
    let k = first.ncols();
    if !(threshold >= 0.0) {
        return Err(Error::arg("threshold must be non-negative"));
    }
    let mut zsum = Array2::<f64>::zeros((k, k));
    let mut degenerate = vec![false; k];
    for (s, t) in tcs.iter().enumerate() {
        if t.ncols() != k {
            return Err(Error::arg(format!("subject {s} has {} components, expected {k}", t.ncols())));
        }
        if t.nrows() < 3 {
            return Err(Error::arg(format!("subject {s} has fewer than 3 time points")));
        }
        for i in 0..k {
            for j in (i + 1)..k {
                let r = match pearson(t.column(i), t.column(j)) {
                    Some(r) => r,
                    None => {
                        for c in [i, j] {
                            if pearson(t.column(c), t.column(c)).is_none() {
                                degenerate[c] = true;
                            }
                        }
                        0.0
                    }
                };
                zsum[[i, j]] += r.atanh().clamp(-Z_CLAMP, Z_CLAMP);
            }
        }
    }
    let n = tcs.len() as f64;
    let mut raw = Array2::<f64>::eye(k);
    for i in 0..k {
        for j in (i + 1)..k {
            let r = (zsum[[i, j]] / n).tanh();
            raw[[i, j]] = r;
            raw[[j, i]] = r;
        }
    }
    let mut r = raw.clone();
    for ((i, j), v) in r.indexed_iter_mut() {
        if i != j && v.abs() <= threshold {
            *v = 0.0;
        }
    }
    Ok(FncMatrix {
        raw,
        r,
        threshold,
        order: (0..k).collect(),
        n_subjects_averaged: tcs.len(),
        degenerate: (0..k).filter(|&c| degenerate[c]).collect(),
    })
}

/// One agglomeration step; `left` holds the lower minimum index.
#[derive(Clone, Debug, PartialEq)]
pub struct Merge {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub height: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dendrogram {
    pub merges: Vec<Merge>,
    pub order: Vec<usize>,
}

/// Average-linkage clustering on `1 − |raw|`.
///
/// Clusters are kept sorted by their smallest member; among equally close
/// pairs the first in that order merges. Leaves are emitted depth-first with
/// the lower-index child first.
pub fn hcluster(f: &FncMatrix) -> Result<Dendrogram> {
    let k = f.raw.nrows();
    if k < 2 {
        return Err(Error::arg("clustering needs at least 2 components"));
    }
    // Each active cluster: (members in leaf order, min member).
    let mut clusters: Vec<Vec<usize>> = (0..k).map(|i| vec![i]).collect();
    let mut dist: Vec<Vec<f64>> =
        (0..k).map(|i| (0..k).map(|j| 1.0 - f.raw[[i, j]].abs()).collect()).collect();
    let mut merges = Vec::with_capacity(k - 1);
    while clusters.len() > 1 {
        let (mut bi, mut bj, mut best) = (0, 1, f64::INFINITY);
        for i in 0..clusters.len() {
            for j in (i + 1)..clusters.len() {
                if dist[i][j] < best {
                    (bi, bj, best) = (i, j, dist[i][j]);
                }
            }
        }
        let (ni, nj) = (clusters[bi].len() as f64, clusters[bj].len() as f64);
        let right = clusters.remove(bj);
        let left = clusters[bi].clone();
        let drow = dist.remove(bj);
        for row in dist.iter_mut() {
            row.remove(bj);
        }
        for c in 0..clusters.len() {
            if c != bi {
                let d = (ni * dist[bi][c] + nj * drow[if c < bj { c } else { c + 1 }]) / (ni + nj);
                dist[bi][c] = d;
                dist[c][bi] = d;
            }
        }
        clusters[bi].extend(&right);
        merges.push(Merge { left, right, height: best });
    }
    Ok(Dendrogram { merges, order: clusters.pop().expect("one cluster left") })
}

pub fn hcluster_order(f: &FncMatrix) -> Result<Vec<usize>> {
    Ok(hcluster(f)?.order)
}

/// Writes `m` in `order`; header and first column carry `labels[i]`.
pub fn write_fnc_csv(path: impl AsRef<Path>, m: &Array2<f64>, order: &[usize], labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["component".to_string()];
    header.extend(order.iter().map(|&i| labels[i].to_string()));
    w.write_record(&header)?;
    for &i in order {
        let mut row = vec![labels[i].to_string()];
        row.extend(order.iter().map(|&j| m[[i, j]].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn randn(seed: u64, r: usize, c: usize) -> Array2<f64> {
        let mut g = rng::stream(seed, 801, 0);
        Array2::from_shape_fn((r, c), |_| g.sample::<f64, _>(StandardNormal))
    }

    fn from_raw(raw: Array2<f64>) -> FncMatrix {
        let k = raw.nrows();
        FncMatrix { r: raw.clone(), raw, threshold: 0.0, order: (0..k).collect(), n_subjects_averaged: 1, degenerate: vec![] }
    }

    #[test]
    fn identical_and_negated_columns() {
        let a = randn(1, 50, 1);
        let t = ndarray::concatenate![Axis(1), a, a, -&a];
        let f = fnc(&[t.clone(), t], 0.05).unwrap();
        assert_eq!(f.raw[[0, 1]], 1.0);
        assert_eq!(f.raw[[0, 2]], -1.0);
        assert_eq!(f.raw[[2, 1]], -1.0);
    }

    #[test]
    fn white_noise_is_mostly_thresholded() {
        let t = randn(2, 2000, 20);
        let f = fnc(&[t], 0.05).unwrap();
        let off: Vec<f64> = f.raw.indexed_iter().filter(|((i, j), _)| i != j).map(|(_, &v)| v).collect();
        let small = off.iter().filter(|v| v.abs() < 0.05).count();
        assert!(small as f64 >= 0.95 * off.len() as f64);
        let zeroed = f.r.indexed_iter().filter(|((i, j), v)| i != j && **v == 0.0).count();
        assert_eq!(zeroed, small);
    }

    #[test]
    fn zero_variance_column_is_flagged() {
        let mut t = randn(3, 30, 3);
        t.column_mut(1).fill(2.0);
        let f = fnc(&[t], 0.05).unwrap();
        assert_eq!(f.degenerate, vec![1]);
        assert_eq!(f.raw[[0, 1]], 0.0);
        assert_eq!(f.raw[[1, 1]], 1.0);
    }

    #[test]
    fn rejects_short_or_empty_input() {
        assert!(fnc(&[], 0.05).is_err());
        assert!(fnc(&[randn(4, 2, 3)], 0.05).is_err());
    }

    #[test]
    fn fisher_averaging_across_subjects() {
        let t1 = array![[1.0, 1.0], [2.0, 2.5], [3.0, 2.9], [4.0, 4.2]];
        let t2 = array![[1.0, 2.0], [2.0, 1.0], [3.0, 4.0], [4.0, 2.0]];
        let r1 = pearson(t1.column(0), t1.column(1)).unwrap();
        let r2 = pearson(t2.column(0), t2.column(1)).unwrap();
        let f = fnc(&[t1, t2], 0.0).unwrap();
        assert!((f.raw[[0, 1]] - ((r1.atanh() + r2.atanh()) / 2.0).tanh()).abs() < 1e-15);
    }

    #[test]
    fn two_block_matrix_orders_blocks_contiguously() {
        let mut raw = Array2::<f64>::eye(4);
        for (i, j) in [(0, 2), (1, 3)] {
            raw[[i, j]] = 1.0;
            raw[[j, i]] = 1.0;
        }
        let order = hcluster_order(&from_raw(raw)).unwrap();
        let pos = |c: usize| order.iter().position(|&x| x == c).unwrap();
        assert_eq!(pos(0).abs_diff(pos(2)), 1);
        assert_eq!(pos(1).abs_diff(pos(3)), 1);
    }

    #[test]
    fn two_components_keep_index_order() {
        let order = hcluster_order(&from_raw(array![[1.0, 0.3], [0.3, 1.0]])).unwrap();
        assert_eq!(order, vec![0, 1]);
        assert!(hcluster_order(&from_raw(array![[1.0]])).is_err());
    }

    fn random_corr(seed: u64, k: usize) -> Array2<f64> {
        fnc(&[randn(seed, 12, k)], 0.0).unwrap().raw
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn sorted(v: &[usize]) -> Vec<usize> {
        let mut v = v.to_vec();
        v.sort_unstable();
        v
    }

    #[test]
    fn clustering_is_permutation_equivariant() {
        let raw = random_corr(5, 4);
        let base = hcluster(&from_raw(raw.clone())).unwrap();
        let perms = permutations(4);
        assert_eq!(perms.len(), 24);
        for perm in perms {
            // Component c of the permuted matrix is component perm[c] of the original.
            let pr = Array2::from_shape_fn((4, 4), |(i, j)| raw[[perm[i], perm[j]]]);
            let d = hcluster(&from_raw(pr)).unwrap();
            for (a, b) in base.merges.iter().zip(&d.merges) {
                let map = |v: &[usize]| sorted(&v.iter().map(|&c| perm[c]).collect::<Vec<_>>());
                let mut got = [map(&b.left), map(&b.right)];
                got.sort();
                let mut want = [sorted(&a.left), sorted(&a.right)];
                want.sort();
                assert_eq!(got, want);
                assert!((a.height - b.height).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linkage_heights_match_brute_force_average() {
        let raw = random_corr(6, 6);
        let d = hcluster(&from_raw(raw.clone())).unwrap();
        for m in &d.merges {
            let mut s = 0.0;
            for &i in &m.left {
                for &j in &m.right {
                    s += 1.0 - raw[[i, j]].abs();
                }
            }
            let avg = s / (m.left.len() * m.right.len()) as f64;
            assert!((avg - m.height).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn fnc_contract(seed in 0u64..1000, k in 2usize..7, subjects in 1usize..4, thr in 0.0f64..0.5) {
            let tcs: Vec<_> = (0..subjects).map(|s| randn(seed * 10 + s as u64, 8, k)).collect();
            let f = fnc(&tcs, thr).unwrap();
            for i in 0..k {
                prop_assert_eq!(f.raw[[i, i]], 1.0);
                prop_assert_eq!(f.r[[i, i]], 1.0);
                for j in 0..k {
                    prop_assert!((f.raw[[i, j]] - f.raw[[j, i]]).abs() <= 1e-12);
                    prop_assert!(f.raw[[i, j]].abs() <= 1.0);
                    if i != j {
                        let expect = if f.raw[[i, j]].abs() <= thr { 0.0 } else { f.raw[[i, j]] };
                        prop_assert_eq!(f.r[[i, j]], expect);
                    }
                }
            }
            let order = hcluster_order(&f).unwrap();
            prop_assert_eq!(sorted(&order), (0..k).collect::<Vec<_>>());
            let d = hcluster(&f).unwrap();
            for m in &d.merges {
                // every merged cluster is contiguous in the leaf order
                let pos: Vec<usize> = m.left.iter().chain(&m.right)
                    .map(|c| order.iter().position(|x| x == c).unwrap()).collect();
                let (lo, hi) = (*pos.iter().min().unwrap(), *pos.iter().max().unwrap());
                prop_assert_eq!(hi - lo + 1, pos.len());
            }
        }
    }
}
