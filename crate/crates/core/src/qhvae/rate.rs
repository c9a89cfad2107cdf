//! Bits of a latent under a Gaussian integrated over its unit bin.
//!
//! Everything is evaluated in f64 on log-probabilities so far tails stay
//! finite and differentiable.

use crate::tensor::{shape_err, Element, Result, Tensor, Var};

const LN_2: f64 = std::f64::consts::LN_2;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `ln Φ(x)` for `x <= 0`.
pub fn log_ndtr_neg(x: f64) -> f64 {
    debug_assert!(x <= 0.0);
    let t = -x;
    if t < 25.0 {
        (0.5 * libm::erfc(t / std::f64::consts::SQRT_2)).ln()
    } else {
        // Φ(-t) = φ(t)/t · (1 - 1/t² + 3/t⁴ - 15/t⁶ + …)
        let t2 = t * t;
        let series = 1.0 - 1.0 / t2 + 3.0 / (t2 * t2) - 15.0 / (t2 * t2 * t2);
        -0.5 * t2 - t.ln() - HALF_LN_2PI + series.ln()
    }
}

fn log_pdf(x: f64) -> f64 {
    -0.5 * x * x - HALF_LN_2PI
}

/// `ln(Φ(b) - Φ(a))` for `a < b` with `a <= 0` after reflection.
fn log_mass_reflected(a: f64, b: f64) -> f64 {
    if b <= 0.0 {
        let (la, lb) = (log_ndtr_neg(a), log_ndtr_neg(b));
        lb + (-(la - lb).exp_m1()).ln()
    } else {
        let m = 1.0 - 0.5 * libm::erfc(-a / std::f64::consts::SQRT_2) - 0.5 * libm::erfc(b / std::f64::consts::SQRT_2);
        m.ln()
    }
}

/// Rate in bits and its partial derivatives `(bits, d/dz, d/dσ)` for a bin
/// centred at offset `d = z - μ̂` with scale `sigma`.
pub fn bin_rate(d: f64, sigma: f64) -> (f64, f64, f64) {
    // mass is symmetric in d; work with d <= 0 and flip the z-derivative
    let sign = if d > 0.0 { -1.0 } else { 1.0 };
    let dr = -d.abs();
    let a = (dr - 0.5) / sigma;
    let b = (dr + 0.5) / sigma;
    let lm = log_mass_reflected(a, b);
    let bits = -lm / LN_2;
    // d mass/d a = -φ(a), d mass/d b = φ(b)
    let pa = (log_pdf(a) - lm).exp();
    let pb = (log_pdf(b) - lm).exp();
    let d_dz = -(pb - pa) / (sigma * LN_2) * sign;
    let d_ds = (b * pb - a * pa) / (sigma * LN_2);
    (bits, d_dz, d_ds)
}

impl<'t, E: Element> Var<'t, E> {
    /// Elementwise `-log2 ∫_{z-½}^{z+½} N(t; μ̂, σ̂²) dt` with `self` as `z`.
    pub fn gaussian_bin_rate(self, mu_hat: Var<'t, E>, sigma_hat: Var<'t, E>) -> Result<Var<'t, E>> {
        let shape = self.shape();
        if mu_hat.shape() != shape || sigma_hat.shape() != shape {
            return shape_err(
                "gaussian_bin_rate",
                format!("z {:?}, mu_hat {:?}, sigma_hat {:?}", shape, mu_hat.shape(), sigma_hat.shape()),
            );
        }
        let (z, m, s) = (self.value(), mu_hat.value(), sigma_hat.value());
        let n = z.len();
        let mut bits = Vec::with_capacity(n);
        let mut dz = Vec::with_capacity(n);
        let mut ds = Vec::with_capacity(n);
        for i in 0..n {
            let (b, gz, gs) = bin_rate(z.data()[i].f64() - m.data()[i].f64(), s.data()[i].f64());
            bits.push(E::of(b));
            dz.push(gz);
            ds.push(gs);
        }
        Ok(self.tape().record(Tensor::new(shape, bits)?, &[self, mu_hat, sigma_hat], move |g, needs| {
            let gz: Vec<E> = g.iter().zip(&dz).map(|(&g, &d)| E::of(g.f64() * d)).collect();
            let gm = needs[1].then(|| gz.iter().map(|&v| -v).collect());
            let gs = needs[2].then(|| g.iter().zip(&ds).map(|(&g, &d)| E::of(g.f64() * d)).collect());
            vec![needs[0].then_some(gz), gm, gs]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_input_gradient;
    use crate::tensor::Tape;

    /// Composite Simpson in standardized units, scaled by the largest log
    /// density on the interval.
    fn numeric_bits(d: f64, sigma: f64) -> f64 {
        let (a, b) = ((d - 0.5) / sigma, (d + 0.5) / sigma);
        let peak = if a <= 0.0 && b >= 0.0 { 0.0 } else { -(a.abs().min(b.abs())).powi(2) / 2.0 };
        let n = 20_000;
        let h = (b - a) / n as f64;
        let f = |x: f64| (-x * x / 2.0 - peak).exp();
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let integral = s * h / 3.0;
        -(integral.ln() + peak - HALF_LN_2PI) / LN_2
    }

    #[test]
    fn center_bin_of_unit_gaussian() {
        let (bits, dz, _) = bin_rate(0.0, 1.0);
        let phi = |x: f64| 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
        assert!((bits - (-(phi(0.5) - phi(-0.5)).log2())).abs() < 1e-12);
        assert!((bits - 1.385).abs() < 1e-3);
        assert_eq!(dz, 0.0);
    }

    #[test]
    fn matches_numeric_integration_on_grid() {
        let mut worst: f64 = 0.0;
        for i in 0..=32 {
            let d = -4.0 + 0.25 * i as f64;
            for j in 0..=24 {
                let sigma = 0.11 * (64.0f64 / 0.11).powf(j as f64 / 24.0);
                let (bits, _, _) = bin_rate(d, sigma);
                let want = numeric_bits(d, sigma);
                worst = worst.max((bits - want).abs() / want.abs().max(1e-12));
            }
        }
        assert!(worst < 0.01, "{}", worst);
    }

    #[test]
    fn wide_prior_follows_differential_entropy() {
        let (bits, _, _) = bin_rate(0.0, 64.0);
        let asym = 64f64.log2() + 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).log2();
        assert!((bits - numeric_bits(0.0, 64.0)).abs() / bits < 0.01);
        // at the centre the bin costs log2(σ√(2π)), ½log2(e) below the average
        assert!((bits - (asym - 0.5 * std::f64::consts::E.log2())).abs() < 1e-3);
    }

    #[test]
    fn six_sigma_tail_exceeds_25_bits() {
        for &sigma in &[1.0, 7.0, 64.0] {
            assert!(bin_rate(6.0 * sigma, sigma).0 > 25.0);
            assert!(bin_rate(-6.0 * sigma, sigma).0 > 25.0);
        }
        // below σ = 1 the unit bin is several σ wide and reaches toward the mode
        let want = numeric_bits(0.66, 0.11);
        assert!((bin_rate(0.66, 0.11).0 - want).abs() < 1e-3 * want);
        assert!(want < 25.0);
        // far tail stays finite
        let (bits, dz, ds) = bin_rate(40.0, 0.11);
        assert!(bits.is_finite() && dz.is_finite() && ds.is_finite());
        assert!(bits > 1e4);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let d = Tensor::from_fn(vec![2, 13], |i| -3.0 + 0.47 * i as f64);
        let sig = Tensor::from_fn(vec![2, 13], |i| 0.15 + 0.37 * (i % 7) as f64);
        let mu = Tensor::from_fn(vec![2, 13], |i| 0.1 * (i % 3) as f64);
        let err = check_input_gradient(&d, 1e-5, |tape, v| {
            v.gaussian_bin_rate(tape.constant(mu.clone()), tape.constant(sig.clone()))
        })
        .unwrap();
        assert!(err < 1e-5, "dz {}", err);
        let err = check_input_gradient(&sig, 1e-5, |tape, v| {
            tape.constant(d.clone()).gaussian_bin_rate(tape.constant(mu.clone()), v)
        })
        .unwrap();
        assert!(err < 1e-4, "dsigma {}", err);
        let err = check_input_gradient(&mu, 1e-5, |tape, v| {
            tape.constant(d.clone()).gaussian_bin_rate(v, tape.constant(sig.clone()))
        })
        .unwrap();
        assert!(err < 1e-5, "dmu {}", err);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![3]));
        let b = tape.constant(Tensor::zeros(vec![4]));
        assert!(a.gaussian_bin_rate(a, b).is_err());
    }
}
