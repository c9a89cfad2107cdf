//! Stage-2 sampling: k-means over per-patch features and an equal draw of
//! `m_min` patches from every cluster.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::Cell;
use crate::tensor::RngSeed;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("k-means needs at least k = {k} rows, got {rows}")]
    TooFewRows { rows: usize, k: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("feature matrix: {0}")]
    Matrix(String),
    #[error("cluster {cluster} has {size} members, fewer than the {wanted} requested")]
    ClusterTooSmall { cluster: usize, size: usize, wanted: usize },
}

pub type Result<T, E = ClusterError> = std::result::Result<T, E>;

/// Row-major `[rows, cols]` features, one row per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub cols: usize,
    pub data: Vec<f64>,
    pub ids: Vec<Cell>,
}

impl FeatureMatrix {
    pub fn new(cols: usize, data: Vec<f64>, ids: Vec<Cell>) -> Result<Self> {
        if cols == 0 || data.len() != cols * ids.len() {
            return Err(ClusterError::Matrix(format!("{} values for {} rows of {} columns", data.len(), ids.len(), cols)));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(ClusterError::Matrix(format!("non-finite entry in row {}", i / cols)));
        }
        Ok(FeatureMatrix { cols, data, ids })
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Zero-mean, unit-variance columns; constant columns become zero.
    pub fn standardized(&self) -> FeatureMatrix {
        let (n, d) = (self.rows(), self.cols);
        let mut out = self.clone();
        for j in 0..d {
            let mean = (0..n).map(|i| self.data[i * d + j]).sum::<f64>() / n.max(1) as f64;
            let var = (0..n).map(|i| (self.data[i * d + j] - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
            let s = if var > 1e-24 { var.sqrt() } else { 1.0 };
            for i in 0..n {
                out.data[i * d + j] = (self.data[i * d + j] - mean) / s;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    /// Row-major `[k, cols]`.
    pub centers: Vec<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub history: Vec<f64>,
    pub converged: bool,
}

impl ClusterModel {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == cluster).collect()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centers: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.chunks(d).enumerate() {
        let v = dist2(x, center);
        if v < best.1 {
            best = (c, v);
        }
    }
    best
}

fn plus_plus_init(x: &FeatureMatrix, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let (n, d) = (x.rows(), x.cols);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dmin: Vec<f64> = (0..n).map(|i| dist2(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = dmin.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &v) in dmin.iter().enumerate() {
                if v > 0.0 && t < v {
                    pick = i;
                    break;
                }
                t -= v;
            }
            pick
        } else {
            // all remaining points coincide with a center
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for i in 0..n {
            dmin[i] = dmin[i].min(dist2(x.row(i), x.row(next)));
        }
    }
    let mut centers = Vec::with_capacity(k * d);
    for &c in &chosen {
        centers.extend_from_slice(x.row(c));
    }
    centers
}

/// Lloyd iterations from a k-means++ start. Empty clusters are reseeded at
/// the point farthest from its center, once per iteration.
pub fn kmeans(x: &FeatureMatrix, k: usize, seed: RngSeed, max_iter: usize) -> Result<ClusterModel> {
    let (n, d) = (x.rows(), x.cols);
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if n < k {
        return Err(ClusterError::TooFewRows { rows: n, k });
    }
    let mut rng = seed.derive_str("kmeans").rng();
    let mut centers = plus_plus_init(x, k, &mut rng);
    let mut assign = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for i in 0..n {
            let (c, v) = nearest(x.row(i), &centers, d);
            changed |= assign[i] != c;
            assign[i] = c;
            dists[i] = v;
        }
        let mut sizes = vec![0usize; k];
        for &a in &assign {
            sizes[a] += 1;
        }
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            let far = (0..n).filter(|&i| sizes[assign[i]] > 1).max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                sizes[assign[i]] -= 1;
                sizes[c] = 1;
                assign[i] = c;
                dists[i] = 0.0;
                centers[c * d..(c + 1) * d].copy_from_slice(x.row(i));
                changed = true;
            }
        }
        history.push(dists.iter().sum());
        if !changed {
            converged = true;
            break;
        }
        let mut sums = vec![0.0; k * d];
        for i in 0..n {
            for (s, v) in sums[assign[i] * d..(assign[i] + 1) * d].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            for j in 0..d {
                centers[c * d + j] = sums[c * d + j] / sizes[c] as f64;
            }
        }
    }
    let inertia = *history.last().expect("at least one iteration");
    Ok(ClusterModel { k, centers, assignments: assign, inertia, history, converged })
}

/// Size of the smallest cluster.
pub fn min_cluster_size(model: &ClusterModel) -> usize {
    model.sizes().into_iter().min().unwrap_or(0)
}

/// `per_cluster` rows drawn uniformly without replacement from each cluster,
/// cluster by cluster, ascending row order within a cluster.
pub fn balanced_sample(model: &ClusterModel, per_cluster: usize, seed: RngSeed) -> Result<Vec<usize>> {
    let mut rng = seed.derive_str("balanced").rng();
    let mut out = Vec::with_capacity(model.k * per_cluster);
    for c in 0..model.k {
        let members = model.members(c);
        if members.len() < per_cluster {
            return Err(ClusterError::ClusterTooSmall { cluster: c, size: members.len(), wanted: per_cluster });
        }
        let mut picked: Vec<usize> = sample(&mut rng, members.len(), per_cluster).into_iter().map(|i| members[i]).collect();
        picked.sort_unstable();
        out.extend(picked);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Upper bound on patches kept per slide; `None` keeps `k·m_min`.
    pub cap: Option<usize>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { k: 8, max_iter: 100, cap: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Selection {
    pub model: ClusterModel,
    pub m_min: usize,
    pub per_cluster: usize,
    /// Selected rows of the input matrix.
    pub rows: Vec<usize>,
    /// Kept share of the survivors, `|rows| / n`.
    pub retained: f64,
}

/// Standardize, cluster and draw. `k` shrinks to the row count on slides with
/// fewer survivors than clusters.
pub fn select(x: &FeatureMatrix, cfg: &ClusterConfig, seed: RngSeed) -> Result<Selection> {
    let k = cfg.k.min(x.rows());
    let model = kmeans(&x.standardized(), k, seed, cfg.max_iter)?;
    let m_min = min_cluster_size(&model);
    let per_cluster = match cfg.cap {
        Some(cap) if k * m_min > cap => (cap / k).clamp(1, m_min),
        _ => m_min,
    };
    let rows = balanced_sample(&model, per_cluster, seed)?;
    let retained = rows.len() as f64 / x.rows() as f64;
    Ok(Selection { model, m_min, per_cluster, rows, retained })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, prop_assume, proptest, ProptestConfig};
    use rand_distr::{Distribution, Normal};

    fn matrix(cols: usize, data: Vec<f64>) -> FeatureMatrix {
        let n = data.len() / cols;
        FeatureMatrix::new(cols, data, (0..n).map(|i| (i, 0)).collect()).unwrap()
    }

    fn blobs(seed: u64, per: usize, centers: &[[f64; 2]], spread: f64) -> (FeatureMatrix, Vec<usize>) {
        let mut rng = RngSeed(seed).rng();
        let noise = Normal::new(0.0, spread).unwrap();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (l, c) in centers.iter().enumerate() {
            for _ in 0..per {
                data.push(c[0] + noise.sample(&mut rng));
                data.push(c[1] + noise.sample(&mut rng));
                labels.push(l);
            }
        }
        (matrix(2, data), labels)
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let (x, _) = blobs(0, 30, &[[1.0, -2.0], [4.0, 0.5]], 1.0);
        let m = kmeans(&x, 1, RngSeed(0), 10).unwrap();
        let n = x.rows() as f64;
        for j in 0..2 {
            let mean = (0..x.rows()).map(|i| x.row(i)[j]).sum::<f64>() / n;
            assert!((m.centers[j] - mean).abs() < 1e-12);
        }
        let total: f64 = (0..2)
            .map(|j| {
                let mean = m.centers[j];
                (0..x.rows()).map(|i| (x.row(i)[j] - mean).powi(2)).sum::<f64>()
            })
            .sum();
        assert!((m.inertia - total).abs() < 1e-9 * total);
    }

    #[test]
    fn separated_blobs_are_recovered() {
        for seed in 0..5 {
            let (x, labels) = blobs(seed, 40, &[[0.0, 0.0], [10.0, 10.0]], 0.5);
            let m = kmeans(&x, 2, RngSeed(seed), 50).unwrap();
            assert!(m.converged);
            let map = m.assignments[0];
            for (a, l) in m.assignments.iter().zip(&labels) {
                assert_eq!(*a == map, *l == 0);
            }
        }
    }

    #[test]
    fn too_few_rows_is_rejected() {
        let x = matrix(2, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(kmeans(&x, 3, RngSeed(0), 5), Err(ClusterError::TooFewRows { rows: 2, k: 3 }));
        assert!(FeatureMatrix::new(1, vec![f64::NAN], vec![(0, 0)]).is_err());
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let x = matrix(2, vec![1.0; 20]);
        let m = kmeans(&x, 4, RngSeed(3), 10).unwrap();
        assert!(m.sizes().iter().all(|&s| s > 0));
        assert_eq!(m.inertia, 0.0);
    }

    #[test]
    fn min_size_examples() {
        let model = |a: Vec<usize>, k| ClusterModel { k, centers: vec![], assignments: a, inertia: 0.0, history: vec![], converged: true };
        let mut a = vec![0; 5];
        a.extend(vec![1; 9]);
        a.extend(vec![2; 2]);
        assert_eq!(min_cluster_size(&model(a, 3)), 2);
        assert_eq!(min_cluster_size(&model((0..12).map(|i| i % 4).collect(), 4)), 3);
    }

    #[test]
    fn forced_selection_returns_everything() {
        let a: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let m = ClusterModel { k: 3, centers: vec![], assignments: a, inertia: 0.0, history: vec![], converged: true };
        let mut s = balanced_sample(&m, 4, RngSeed(1)).unwrap();
        s.sort_unstable();
        assert_eq!(s, (0..12).collect::<Vec<_>>());
        assert!(matches!(balanced_sample(&m, 5, RngSeed(1)), Err(ClusterError::ClusterTooSmall { .. })));
    }

    #[test]
    fn one_per_cluster_gives_k_patches() {
        let (x, _) = blobs(4, 20, &[[0.0, 0.0], [9.0, 0.0], [0.0, 9.0], [9.0, 9.0], [20.0, 0.0], [0.0, 20.0], [20.0, 20.0], [30.0, 30.0]], 0.7);
        let m = kmeans(&x, 8, RngSeed(2), 100).unwrap();
        let s = balanced_sample(&m, 1, RngSeed(2)).unwrap();
        assert_eq!(s.len(), 8);
        let mut seen: Vec<usize> = s.iter().map(|&r| m.assignments[r]).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn draws_are_uniform_within_a_cluster() {
        let (n, m_min, trials) = (10usize, 3usize, 10_000u64);
        let a: Vec<usize> = (0..n + 4).map(|i| if i < n { 0 } else { 1 }).collect();
        let model = ClusterModel { k: 2, centers: vec![], assignments: a, inertia: 0.0, history: vec![], converged: true };
        let mut counts = vec![0u64; n];
        for t in 0..trials {
            for r in balanced_sample(&model, m_min, RngSeed(1000 + t)).unwrap() {
                if r < n {
                    counts[r] += 1;
                }
            }
        }
        let p = m_min as f64 / n as f64;
        let expect = trials as f64 * p;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - expect).abs() < 3.0 * sd, "{} vs {} ± {}", c, expect, sd);
        }
    }

    #[test]
    fn cap_limits_per_cluster_draws() {
        let (x, _) = blobs(6, 25, &[[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]], 0.5);
        let free = select(&x, &ClusterConfig { k: 3, ..ClusterConfig::default() }, RngSeed(0)).unwrap();
        assert_eq!(free.m_min, 25);
        assert_eq!(free.rows.len(), 75);
        let capped = select(&x, &ClusterConfig { k: 3, cap: Some(9), ..ClusterConfig::default() }, RngSeed(0)).unwrap();
        assert_eq!(capped.rows.len(), 9);
        assert!((capped.retained - 9.0 / 75.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn lloyd_invariants(seed in 0u64..1000, n in 3usize..40, k in 1usize..6, d in 1usize..4) {
            prop_assume!(k <= n);
            let mut rng = RngSeed(seed).rng();
            let x = matrix(d, (0..n * d).map(|_| (rng.random_range(0..6) as f64) * 0.5).collect());
            let m = kmeans(&x, k, RngSeed(seed), 200).unwrap();
            for w in m.history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
            }
            prop_assert!(m.sizes().iter().all(|&s| s > 0));
            if m.converged {
                for i in 0..n {
                    let own = dist2(x.row(i), &m.centers[m.assignments[i] * d..(m.assignments[i] + 1) * d]);
                    let best = nearest(x.row(i), &m.centers, d).1;
                    prop_assert!(own <= best + 1e-12);
                }
            }
            let counted = (0..k).map(|c| m.assignments.iter().filter(|&&a| a == c).count()).min().unwrap();
            prop_assert_eq!(min_cluster_size(&m), counted);
            let s = balanced_sample(&m, counted, RngSeed(seed)).unwrap();
            prop_assert_eq!(s.len(), k * counted);
            let mut u = s.clone();
            u.sort_unstable();
            u.dedup();
            prop_assert_eq!(u.len(), s.len());
            prop_assert_eq!(s, balanced_sample(&m, counted, RngSeed(seed)).unwrap());
        }
    }
}
