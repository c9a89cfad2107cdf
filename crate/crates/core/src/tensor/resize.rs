//! Bicubic resampling.
//!
//! Separable Keys cubic (a = -0.5) with edge clamping. When shrinking, the
//! kernel is stretched by the scale factor so every input pixel contributes
//! (area-aware antialiasing); weights of each output are normalized to sum to
//! one, which keeps constant images constant.

use super::{gemm, invalid, Element, Layout, Result, Tensor, Var};

const KEYS_A: f64 = -0.5;

pub fn cubic_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((KEYS_A + 2.0) * x - (KEYS_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((KEYS_A * x - 5.0 * KEYS_A) * x + 8.0 * KEYS_A) * x - 4.0 * KEYS_A
    } else {
        0.0
    }
}

/// Dense `[out, inp]` interpolation matrix for one axis.
pub fn resize_matrix(inp: usize, out: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    if inp == out {
        for i in 0..out {
            m[i * inp + i] = 1.0;
        }
        return m;
    }
    let scale = inp as f64 / out as f64;
    let support = scale.max(1.0);
    for i in 0..out {
        let center = (i as f64 + 0.5) * scale - 0.5;
        let lo = (center - 2.0 * support).floor() as isize;
        let hi = (center + 2.0 * support).ceil() as isize;
        let row = &mut m[i * inp..(i + 1) * inp];
        let mut total = 0.0;
        for j in lo..=hi {
            let wgt = cubic_kernel((j as f64 - center) / support);
            if wgt == 0.0 {
                continue;
            }
            let jj = j.clamp(0, inp as isize - 1) as usize;
            row[jj] += wgt;
            total += wgt;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    m
}

fn resize_planes<E: Element>(x: &[E], planes: usize, (h, w): (usize, usize), (oh, ow): (usize, usize), mh: &[E], mw: &[E]) -> Vec<E> {
    let mut out = vec![E::zero(); planes * oh * ow];
    let mut tmp = vec![E::zero(); h * ow];
    for p in 0..planes {
        // tmp[h, ow] = X[h, w] · Mwᵀ
        gemm(&x[p * h * w..(p + 1) * h * w], Layout::row_major(h, w), mw, Layout::row_major(ow, w).t(), &mut tmp, Layout::row_major(h, ow), E::zero());
        // Y[oh, ow] = Mh[oh, h] · tmp
        gemm(mh, Layout::row_major(oh, h), &tmp, Layout::row_major(h, ow), &mut out[p * oh * ow..(p + 1) * oh * ow], Layout::row_major(oh, ow), E::zero());
    }
    out
}

impl<'t, E: Element> Var<'t, E> {
    /// Bicubic resize of `[B, C, H, W]` to `[B, C, out_h, out_w]`.
    pub fn bicubic_resize(self, out_h: usize, out_w: usize) -> Result<Var<'t, E>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4("bicubic_resize")?;
        if out_h == 0 || out_w == 0 {
            return invalid("bicubic_resize", format!("target size {}x{} must be at least 1x1", out_h, out_w));
        }
        if (out_h, out_w) == (h, w) {
            return Ok(self.tape.record(x, &[self], |g, _| vec![Some(g.to_vec())]));
        }
        let mh: Vec<E> = resize_matrix(h, out_h).into_iter().map(E::of).collect();
        let mw: Vec<E> = resize_matrix(w, out_w).into_iter().map(E::of).collect();
        let y = resize_planes(x.data(), b * c, (h, w), (out_h, out_w), &mh, &mw);
        Ok(self.tape.record(Tensor::from_parts(vec![b, c, out_h, out_w], y), &[self], move |g, _| {
            // dX = Mhᵀ · dY · Mw, i.e. the same resize with transposed matrices.
            let mht = transpose(&mh, out_h, h);
            let mwt = transpose(&mw, out_w, w);
            vec![Some(resize_planes(g, b * c, (out_h, out_w), (h, w), &mht, &mwt))]
        }))
    }
}

fn transpose<E: Element>(m: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut t = vec![E::zero(); m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

/// Resize a plain tensor without recording gradients.
pub fn bicubic<E: Element>(x: &Tensor<E>, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
    let tape = super::Tape::new();
    Ok(tape.constant(x.clone()).bicubic_resize(out_h, out_w)?.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_input_gradient;

    #[test]
    fn constant_is_preserved() {
        let x = Tensor::<f32>::full(vec![1, 3, 64, 64], 0.37);
        let y = bicubic(&x, 16, 16).unwrap();
        assert_eq!(y.shape(), &[1, 3, 16, 16]);
        assert!(y.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
        let y = bicubic(&x, 100, 80).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn identity_size_is_exact() {
        let x = Tensor::<f32>::from_fn(vec![2, 2, 5, 7], |i| (i as f32).sin());
        assert_eq!(bicubic(&x, 5, 7).unwrap(), x);
    }

    #[test]
    fn ramp_matches_direct_kernel_evaluation() {
        // Independent evaluation: explicit 2-D sum of separable kernel taps
        // with clamped indices and per-axis normalization.
        let (h, w, oh, ow) = (8usize, 8usize, 4usize, 4usize);
        let x = Tensor::<f64>::from_fn(vec![1, 1, h, w], |i| {
            let (r, c) = (i / w, i % w);
            0.1 * r as f64 + 0.05 * c as f64
        });
        let y = bicubic(&x, oh, ow).unwrap();
        let taps = |n_in: usize, n_out: usize, i: usize| -> Vec<(usize, f64)> {
            let scale = n_in as f64 / n_out as f64;
            let center = (i as f64 + 0.5) * scale - 0.5;
            let mut t = Vec::new();
            for j in -10isize..(n_in as isize + 10) {
                let wt = cubic_kernel((j as f64 - center) / scale);
                if wt != 0.0 {
                    t.push((j.clamp(0, n_in as isize - 1) as usize, wt));
                }
            }
            let s: f64 = t.iter().map(|p| p.1).sum();
            t.into_iter().map(|(j, wt)| (j, wt / s)).collect()
        };
        for oy in 0..oh {
            for ox in 0..ow {
                let mut v = 0.0;
                for &(iy, wy) in &taps(h, oh, oy) {
                    for &(ix, wx) in &taps(w, ow, ox) {
                        v += wy * wx * x.at(&[0, 0, iy, ix]);
                    }
                }
                assert!((y.at(&[0, 0, oy, ox]) - v).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rejects_zero_size() {
        let x = Tensor::<f32>::zeros(vec![1, 1, 4, 4]);
        assert!(bicubic(&x, 0, 4).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = Tensor::from_fn(vec![1, 2, 6, 5], |i| (i as f64 * 0.77).sin());
        for &(oh, ow) in &[(3, 2), (9, 11), (6, 3)] {
            let err = check_input_gradient(&x, 1e-5, |_, v| Ok(v.bicubic_resize(oh, ow)?.square().sum())).unwrap();
            assert!(err < 1e-6, "{}x{}: {}", oh, ow, err);
        }
    }
}
