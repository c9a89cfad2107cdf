//! Integer probability tables for a Gaussian integrated over unit bins.

use super::CodecError;

pub const SIGMA_FLOOR: f64 = 0.11;
pub const DEFAULT_PRECISION: u32 = 16;
pub const SUPPORT_MIN: i32 = -127;
pub const SUPPORT_MAX: i32 = 128;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// `P(X <= x)` for `x <= 0` and `P(X > x)` for `x > 0`; both tails are
/// evaluated through `erfc` of a non-negative argument, so mirrored inputs
/// give bit-identical results.
fn tail(x: f64) -> f64 {
    0.5 * libm::erfc(x.abs() / SQRT_2)
}

/// Standard normal mass on `[a, b]` (either end may be infinite).
pub fn normal_mass(a: f64, b: f64) -> f64 {
    if b <= 0.0 {
        tail(b) - tail(a)
    } else if a >= 0.0 {
        tail(a) - tail(b)
    } else {
        1.0 - tail(a) - tail(b)
    }
}

/// Quantized pmf over `[support_min, support_max]` with counts summing to
/// `2^precision`.
#[derive(Clone, Debug, PartialEq)]
pub struct PmfTable {
    pub mu_hat: f64,
    pub sigma_hat: f64,
    pub support_min: i32,
    pub support_max: i32,
    pub precision: u32,
    /// Set when the requested scale was below [`SIGMA_FLOOR`] and clamped.
    pub floored: bool,
    counts: Vec<u32>,
    cum: Vec<u32>,
}

pub type GaussianPmfTable = PmfTable;

fn check_layout(support_min: i32, support_max: i32, precision: u32) -> Result<usize, CodecError> {
    if support_min >= support_max {
        return Err(CodecError::InvalidTable(format!("empty support [{}, {}]", support_min, support_max)));
    }
    if !(12..=18).contains(&precision) {
        return Err(CodecError::InvalidTable(format!("precision {} outside [12, 18]", precision)));
    }
    let n = (support_max - support_min + 1) as usize;
    if n > 1 << precision {
        return Err(CodecError::InvalidTable(format!("{} symbols exceed 2^{} counts", n, precision)));
    }
    Ok(n)
}

/// Rounds masses to counts, forces every count to at least one, then moves
/// the surplus or deficit onto the mode (or the largest counts when the
/// mode alone cannot absorb it).
fn quantize(masses: &[f64], precision: u32) -> Vec<u32> {
    let total = 1i64 << precision;
    let mut counts: Vec<i64> = masses.iter().map(|&m| ((m * total as f64).round() as i64).max(1)).collect();
    let mut diff = total - counts.iter().sum::<i64>();
    while diff != 0 {
        // first index of the largest count
        let mode = counts.iter().enumerate().fold(0, |best, (i, &c)| if c > counts[best] { i } else { best });
        if diff > 0 {
            counts[mode] += diff;
            diff = 0;
        } else {
            let take = (-diff).min(counts[mode] - 1);
            counts[mode] -= take;
            diff += take;
        }
    }
    counts.into_iter().map(|c| c as u32).collect()
}

impl PmfTable {
    pub fn from_counts(support_min: i32, counts: Vec<u32>, precision: u32) -> Result<Self, CodecError> {
        let support_max = support_min + counts.len() as i32 - 1;
        check_layout(support_min, support_max, precision)?;
        if counts.iter().any(|&c| c == 0) {
            return Err(CodecError::InvalidTable("zero count in table".into()));
        }
        let sum: u64 = counts.iter().map(|&c| c as u64).sum();
        if sum != 1u64 << precision {
            return Err(CodecError::InvalidTable(format!("counts sum to {}, expected 2^{}", sum, precision)));
        }
        let mut cum = Vec::with_capacity(counts.len() + 1);
        cum.push(0);
        for &c in &counts {
            cum.push(cum.last().unwrap() + c);
        }
        Ok(PmfTable {
            mu_hat: f64::NAN,
            sigma_hat: f64::NAN,
            support_min,
            support_max,
            precision,
            floored: false,
            counts,
            cum,
        })
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn count(&self, symbol: i32) -> u32 {
        self.counts[(symbol - self.support_min) as usize]
    }

    pub fn contains(&self, symbol: i32) -> bool {
        (self.support_min..=self.support_max).contains(&symbol)
    }

    /// `(cumulative start, frequency)` of an in-support symbol.
    #[inline]
    pub(crate) fn interval(&self, symbol: i32) -> (u32, u32) {
        let i = (symbol - self.support_min) as usize;
        (self.cum[i], self.counts[i])
    }

    /// Symbol whose interval contains `slot`, plus that interval.
    #[inline]
    pub(crate) fn lookup(&self, slot: u32) -> (i32, u32, u32) {
        let i = self.cum.partition_point(|&c| c <= slot) - 1;
        (self.support_min + i as i32, self.cum[i], self.counts[i])
    }

    /// Self-information of `symbol` in bits under the quantized counts.
    pub fn bits(&self, symbol: i32) -> f64 {
        self.precision as f64 - (self.count(symbol) as f64).log2()
    }
}

/// Bins `[s-½, s+½]` of `N(mu_hat, sigma_hat²)` for every integer `s` in the
/// support, with the outer tails folded into the two boundary symbols.
pub fn discretize_gaussian(
    mu_hat: f64,
    sigma_hat: f64,
    support_min: i32,
    support_max: i32,
    precision: u32,
) -> Result<PmfTable, CodecError> {
    let n = check_layout(support_min, support_max, precision)?;
    if !mu_hat.is_finite() || !sigma_hat.is_finite() {
        return Err(CodecError::InvalidTable(format!("non-finite parameters ({}, {})", mu_hat, sigma_hat)));
    }
    let floored = sigma_hat < SIGMA_FLOOR;
    let sigma = if floored { SIGMA_FLOOR } else { sigma_hat };
    // standardized bin edges; edge i is the lower edge of symbol i
    let edges: Vec<f64> = (0..=n)
        .map(|i| {
            if i == 0 {
                f64::NEG_INFINITY
            } else if i == n {
                f64::INFINITY
            } else {
                (support_min as f64 + i as f64 - 0.5 - mu_hat) / sigma
            }
        })
        .collect();
    let masses: Vec<f64> = edges.windows(2).map(|e| normal_mass(e[0], e[1])).collect();
    let mut t = PmfTable::from_counts(support_min, quantize(&masses, precision), precision)?;
    t.mu_hat = mu_hat;
    t.sigma_hat = sigma;
    t.floored = floored;
    Ok(t)
}

/// Zero-mean table on the default residual support and precision.
pub fn residual_table(sigma_hat: f64) -> PmfTable {
    discretize_gaussian(0.0, sigma_hat, SUPPORT_MIN, SUPPORT_MAX, DEFAULT_PRECISION)
        .expect("default layout is valid")
}

/// `Σ -log2(count(s) / 2^precision)`.
pub fn estimate_rate(symbols: &[i32], tables: &[&PmfTable]) -> Result<f64, CodecError> {
    if symbols.len() != tables.len() {
        return Err(CodecError::LengthMismatch { symbols: symbols.len(), tables: tables.len() });
    }
    let mut bits = 0.0;
    for (i, (&s, t)) in symbols.iter().zip(tables).enumerate() {
        if !t.contains(s) {
            return Err(CodecError::OutOfSupport { index: i, value: s, min: t.support_min, max: t.support_max });
        }
        bits += t.bits(s);
    }
    Ok(bits)
}
