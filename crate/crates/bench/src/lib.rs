//! Shared inputs for the criterion benches.

use cdsr_core::cluster::FeatureMatrix;
use cdsr_core::codec::{residual_table, PmfTable, SIGMA_FLOOR};
use cdsr_core::tensor::RngSeed;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// `n` quantized Gaussian residuals with per-symbol scales spread over
/// [SIGMA_FLOOR, 8], plus one table per distinct scale.
pub fn residual_stream(n: usize, seed: u64) -> (Vec<i32>, Vec<PmfTable>, Vec<usize>) {
    let mut rng = RngSeed(seed).rng();
    let scales: Vec<f64> = (0..16).map(|i| SIGMA_FLOOR * (8.0 / SIGMA_FLOOR).powf(i as f64 / 15.0)).collect();
    let tables: Vec<PmfTable> = scales.iter().map(|&s| residual_table(s)).collect();
    let mut symbols = Vec::with_capacity(n);
    let mut which = Vec::with_capacity(n);
    for _ in 0..n {
        let j = rng.random_range(0..scales.len());
        let v: f64 = Normal::new(0.0, scales[j]).unwrap().sample(&mut rng);
        symbols.push((v.round() as i32).clamp(-127, 128));
        which.push(j);
    }
    (symbols, tables, which)
}

/// `rows` points drawn around `k` separated centres in `dim` dimensions.
pub fn blobs(rows: usize, dim: usize, k: usize, seed: u64) -> FeatureMatrix {
    let mut rng = RngSeed(seed).rng();
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut data = Vec::with_capacity(rows * dim);
    let mut ids = Vec::with_capacity(rows);
    for i in 0..rows {
        let c = i % k;
        for d in 0..dim {
            data.push(if d % k == c { 4.0 } else { 0.0 } + noise.sample(&mut rng));
        }
        ids.push((i / 64, i % 64));
    }
    FeatureMatrix::new(dim, data, ids).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_the_requested_shape() {
        let (s, t, w) = residual_stream(500, 1);
        assert_eq!((s.len(), w.len(), t.len()), (500, 500, 16));
        assert!(s.iter().zip(&w).all(|(&v, &j)| t[j].contains(v)));
        let x = blobs(100, 6, 3, 2);
        assert_eq!((x.rows(), x.cols), (100, 6));
    }
}
