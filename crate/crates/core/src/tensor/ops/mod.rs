//! Differentiable operators on [`Var`].

mod conv;
mod linalg;
mod shape;

use super::{shape_err, Element, Result, Tensor, Var};

fn same_shape<E: Element>(op: &'static str, a: &Var<'_, E>, b: &Var<'_, E>) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return shape_err(op, format!("{:?} vs {:?}", sa, sb));
    }
    Ok(sa)
}

/// Splits `shape` around `axis` into (outer, dim, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return shape_err(op, format!("axis {} out of range for {:?}", axis, shape));
    }
    Ok(())
}

#[inline]
fn sigmoid<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

const GELU_SLOPE: f64 = 1.702;

impl<'t, E: Element> Var<'t, E> {
    fn unary(self, f: impl Fn(E) -> E, df: impl Fn(E, E) -> E + 'static) -> Var<'t, E> {
        let x = self.value();
        let y = x.map(f);
        let (xs, ys) = (x, y.clone());
        self.tape.record(y, &[self], move |g, _| {
            let d = g.iter().zip(xs.data()).zip(ys.data()).map(|((&g, &x), &y)| g * df(x, y));
            vec![Some(d.collect())]
        })
    }

    pub fn tanh(self) -> Var<'t, E> {
        self.unary(|x| x.tanh(), |_, y| E::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'t, E> {
        self.unary(sigmoid, |_, y| y * (E::one() - y))
    }

    /// Sigmoid-weighted GELU approximation `x·σ(1.702x)`.
    pub fn gelu(self) -> Var<'t, E> {
        let k = E::of(GELU_SLOPE);
        self.unary(
            move |x| x * sigmoid(k * x),
            move |x, _| {
                let s = sigmoid(k * x);
                s + x * k * s * (E::one() - s)
            },
        )
    }

    pub fn softplus(self) -> Var<'t, E> {
        self.unary(
            |x| if x > E::of(30.0) { x } else { x.exp().ln_1p() },
            |x, _| sigmoid(x),
        )
    }

    pub fn exp(self) -> Var<'t, E> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'t, E> {
        self.unary(|x| x.ln(), |x, _| E::one() / x)
    }

    pub fn abs(self) -> Var<'t, E> {
        self.unary(|x| x.abs(), |x, _| if x > E::zero() { E::one() } else if x < E::zero() { -E::one() } else { E::zero() })
    }

    pub fn square(self) -> Var<'t, E> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn relu(self) -> Var<'t, E> {
        self.unary(|x| x.max(E::zero()), |x, _| if x > E::zero() { E::one() } else { E::zero() })
    }

    /// `max(x, floor)`; no gradient below the floor.
    pub fn clamp_min(self, floor: f64) -> Var<'t, E> {
        let c = E::of(floor);
        self.unary(move |x| x.max(c), move |x, _| if x > c { E::one() } else { E::zero() })
    }

    pub fn scale(self, c: f64) -> Var<'t, E> {
        let c = E::of(c);
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, E> {
        let c = E::of(c);
        self.unary(move |x| x + c, |_, _| E::one())
    }

    pub fn neg(self) -> Var<'t, E> {
        self.scale(-1.0)
    }

    fn binary(
        self,
        op: &'static str,
        other: Var<'t, E>,
        f: impl Fn(E, E) -> E,
        da: impl Fn(E, E) -> E + 'static,
        db: impl Fn(E, E) -> E + 'static,
    ) -> Result<Var<'t, E>> {
        let shape = same_shape(op, &self, &other)?;
        let (a, b) = (self.value(), other.value());
        let y: Vec<E> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.tape.record(Tensor::from_parts(shape, y), &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                g.iter().zip(a.data()).zip(b.data()).map(|((&g, &x), &y)| g * da(x, y)).collect()
            });
            let gb = needs[1].then(|| {
                g.iter().zip(a.data()).zip(b.data()).map(|((&g, &x), &y)| g * db(x, y)).collect()
            });
            vec![ga, gb]
        }))
    }

    pub fn add(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        let shape = same_shape("add", &self, &other)?;
        let (a, b) = (self.value(), other.value());
        let y = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        Ok(self.tape.record(Tensor::from_parts(shape, y), &[self, other], |g, needs| {
            vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
        }))
    }

    pub fn sub(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.binary("sub", other, |a, b| a - b, |_, _| E::one(), |_, _| -E::one())
    }

    pub fn mul(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.binary("mul", other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.binary("div", other, |a, b| a / b, |_, b| E::one() / b, |a, b| -a / (b * b))
    }

    /// Adds a vector along `axis` (broadcast over every other axis).
    pub fn add_bias(self, bias: Var<'t, E>, axis: usize) -> Result<Var<'t, E>> {
        let shape = self.shape();
        check_axis("add_bias", &shape, axis)?;
        let (outer, dim, inner) = split_axis(&shape, axis);
        if bias.numel() != dim {
            return shape_err("add_bias", format!("bias of {} for axis {} of {:?}", bias.numel(), axis, shape));
        }
        let (x, b) = (self.value(), bias.value());
        let mut y = x.to_vec();
        for o in 0..outer {
            for (d, &bv) in b.data().iter().enumerate() {
                let base = (o * dim + d) * inner;
                y[base..base + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        Ok(self.tape.record(Tensor::from_parts(shape, y), &[self, bias], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut gb = vec![E::zero(); dim];
                for o in 0..outer {
                    for (d, acc) in gb.iter_mut().enumerate() {
                        let base = (o * dim + d) * inner;
                        *acc += g[base..base + inner].iter().copied().sum::<E>();
                    }
                }
                gb
            });
            vec![needs[0].then(|| g.to_vec()), gb]
        }))
    }

    /// Multiplies by a vector along `axis`.
    pub fn mul_channel(self, scale: Var<'t, E>, axis: usize) -> Result<Var<'t, E>> {
        let shape = self.shape();
        check_axis("mul_channel", &shape, axis)?;
        let (outer, dim, inner) = split_axis(&shape, axis);
        if scale.numel() != dim {
            return shape_err("mul_channel", format!("scale of {} for axis {} of {:?}", scale.numel(), axis, shape));
        }
        let (x, s) = (self.value(), scale.value());
        let mut y = x.to_vec();
        for o in 0..outer {
            for (d, &sv) in s.data().iter().enumerate() {
                let base = (o * dim + d) * inner;
                y[base..base + inner].iter_mut().for_each(|v| *v *= sv);
            }
        }
        Ok(self.tape.record(Tensor::from_parts(shape, y), &[self, scale], move |g, needs| {
            let mut gx = needs[0].then(|| vec![E::zero(); g.len()]);
            let mut gs = needs[1].then(|| vec![E::zero(); dim]);
            for o in 0..outer {
                for d in 0..dim {
                    let base = (o * dim + d) * inner;
                    if let Some(gx) = gx.as_mut() {
                        let sv = s.data()[d];
                        for i in base..base + inner {
                            gx[i] = g[i] * sv;
                        }
                    }
                    if let Some(gs) = gs.as_mut() {
                        gs[d] += (base..base + inner).map(|i| g[i] * x.data()[i]).sum::<E>();
                    }
                }
            }
            vec![gx, gs]
        }))
    }

    pub fn sum(self) -> Var<'t, E> {
        let x = self.value();
        let n = x.len();
        let s = x.data().iter().map(|v| v.f64()).sum::<f64>();
        self.tape.record(Tensor::scalar(E::of(s)), &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(self) -> Var<'t, E> {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, E>> {
        let shape = self.shape();
        check_axis("sum_axis", &shape, axis)?;
        let (outer, dim, inner) = split_axis(&shape, axis);
        let x = self.value();
        let mut y = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &x.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                y[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.tape.record(Tensor::from_parts(out_shape, y), &[self], move |g, _| {
            let mut gx = vec![E::zero(); outer * dim * inner];
            for o in 0..outer {
                for d in 0..dim {
                    gx[(o * dim + d) * inner..(o * dim + d + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, E>> {
        let dim = *self.shape().get(axis).unwrap_or(&1);
        Ok(self.sum_axis(axis)?.scale(1.0 / dim.max(1) as f64))
    }

    /// Mean over the spatial axes of `[B, C, H, W]`, giving `[B, C]`.
    pub fn mean_spatial(self) -> Result<Var<'t, E>> {
        let v = self.value();
        let (b, c, h, w) = v.dims4("mean_spatial")?;
        self.reshape(vec![b, c, h * w])?.mean_axis(2)
    }

    /// Softmax along `axis`, stabilized by max-subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, E>> {
        let shape = self.shape();
        check_axis("softmax", &shape, axis)?;
        let (outer, dim, inner) = split_axis(&shape, axis);
        let x = self.value();
        let xd = x.data();
        let mut y = vec![E::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |d: usize| (o * dim + d) * inner + i;
                let m = (0..dim).map(|d| xd[idx(d)]).fold(E::neg_infinity(), E::max);
                let mut s = E::zero();
                for d in 0..dim {
                    let e = (xd[idx(d)] - m).exp();
                    y[idx(d)] = e;
                    s += e;
                }
                for d in 0..dim {
                    y[idx(d)] /= s;
                }
            }
        }
        let out = Tensor::from_parts(shape, y);
        let ys = out.clone();
        Ok(self.tape.record(out, &[self], move |g, _| {
            let yd = ys.data();
            let mut gx = vec![E::zero(); yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |d: usize| (o * dim + d) * inner + i;
                    let dot: E = (0..dim).map(|d| g[idx(d)] * yd[idx(d)]).sum();
                    for d in 0..dim {
                        gx[idx(d)] = yd[idx(d)] * (g[idx(d)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Layer normalization over `axis` with affine `gamma`, `beta` of that extent.
    pub fn layer_norm(self, axis: usize, gamma: Var<'t, E>, beta: Var<'t, E>, eps: f64) -> Result<Var<'t, E>> {
        let shape = self.shape();
        check_axis("layer_norm", &shape, axis)?;
        let (outer, dim, inner) = split_axis(&shape, axis);
        if gamma.numel() != dim || beta.numel() != dim {
            return shape_err("layer_norm", format!("affine params must have {} entries", dim));
        }
        let x = self.value();
        let (gm, bt) = (gamma.value(), beta.value());
        let xd = x.data();
        let mut xhat = vec![E::zero(); x.len()];
        let mut inv_std = vec![E::zero(); outer * inner];
        let mut y = vec![E::zero(); x.len()];
        let eps = E::of(eps);
        let n = E::of(dim as f64);
        for o in 0..outer {
            // Iterate channels outermost so the inner axis stays contiguous.
            let mut mean = vec![E::zero(); inner];
            for d in 0..dim {
                let row = &xd[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![E::zero(); inner];
            for d in 0..dim {
                let row = &xd[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
            let istd = &mut inv_std[o * inner..(o + 1) * inner];
            for (s, v) in istd.iter_mut().zip(&var) {
                *s = E::one() / (*v / n + eps).sqrt();
            }
            for d in 0..dim {
                let base = (o * dim + d) * inner;
                let (gv, bv) = (gm.data()[d], bt.data()[d]);
                for i in 0..inner {
                    let h = (xd[base + i] - mean[i]) * istd[i];
                    xhat[base + i] = h;
                    y[base + i] = h * gv + bv;
                }
            }
        }
        Ok(self.tape.record(Tensor::from_parts(shape, y), &[self, gamma, beta], move |g, needs| {
            let gd = gm.data();
            let mut ggamma = vec![E::zero(); dim];
            let mut gbeta = vec![E::zero(); dim];
            let mut gx = needs[0].then(|| vec![E::zero(); g.len()]);
            for o in 0..outer {
                let mut sum_dh = vec![E::zero(); inner];
                let mut sum_dh_h = vec![E::zero(); inner];
                for d in 0..dim {
                    let base = (o * dim + d) * inner;
                    for i in 0..inner {
                        let gi = g[base + i];
                        let h = xhat[base + i];
                        ggamma[d] += gi * h;
                        gbeta[d] += gi;
                        let dh = gi * gd[d];
                        sum_dh[i] += dh;
                        sum_dh_h[i] += dh * h;
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    for d in 0..dim {
                        let base = (o * dim + d) * inner;
                        for i in 0..inner {
                            let dh = g[base + i] * gd[d];
                            let h = xhat[base + i];
                            gx[base + i] =
                                inv_std[o * inner + i] * (dh - sum_dh[i] / n - h * sum_dh_h[i] / n);
                        }
                    }
                }
            }
            vec![gx, needs[1].then_some(ggamma), needs[2].then_some(gbeta)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_input_gradient;
    use crate::tensor::Tape;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let tape = Tape::<f64>::new();
        let y = tape.constant(t(&[4], &[2.0; 4])).softmax(0).unwrap().value();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        let y = tape.constant(t(&[2], &[0.0, 3f64.ln()])).softmax(0).unwrap().value();
        assert!((y.data()[0] - 0.25).abs() < 1e-12 && (y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_f32() {
        let tape = Tape::<f32>::new();
        let x = Tensor::new(vec![2, 3], vec![0.1f32, -1.0, 2.0, 0.5, 0.5, -0.3]).unwrap();
        let y1 = tape.constant(x.clone()).softmax(1).unwrap().value();
        let y2 = tape.constant(x.map(|v| v + 7.0)).softmax(1).unwrap().value();
        assert!(y1.max_abs_diff(&y2) < 1e-7);
        for row in y1.data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let tape = Tape::<f64>::new();
        assert!(tape.constant(t(&[3], &[1.0, 2.0, 3.0])).softmax(1).is_err());
    }

    #[test]
    fn binary_shape_mismatch_is_reported() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![3, 2]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{}", err);
    }

    #[test]
    fn elementwise_gradients() {
        let x = Tensor::from_fn(vec![2, 3, 4], |i| ((i as f64) * 0.37).sin() * 1.5 + 0.05);
        let ops: Vec<(&str, fn(Var<'_, f64>) -> Var<'_, f64>)> = vec![
            ("tanh", |v| v.tanh()),
            ("sigmoid", |v| v.sigmoid()),
            ("gelu", |v| v.gelu()),
            ("softplus", |v| v.softplus()),
            ("exp", |v| v.exp()),
            ("square", |v| v.square()),
            ("abs", |v| v.abs()),
        ];
        for (name, f) in ops {
            let err = check_input_gradient(&x, 1e-5, |_, v| Ok(f(v).square().sum())).unwrap();
            assert!(err < 1e-6, "{}: {}", name, err);
        }
    }

    #[test]
    fn reduction_and_norm_gradients() {
        let x = Tensor::from_fn(vec![2, 3, 4], |i| ((i as f64) * 0.91).cos() + 0.1 * i as f64);
        let err = check_input_gradient(&x, 1e-5, |_, v| Ok(v.softmax(1)?.square().sum())).unwrap();
        assert!(err < 1e-6, "softmax {}", err);
        let err = check_input_gradient(&x, 1e-5, |_, v| Ok(v.sum_axis(2)?.square().sum())).unwrap();
        assert!(err < 1e-6, "sum_axis {}", err);
        let err = check_input_gradient(&x, 1e-5, |tape, v| {
            let g = tape.leaf(Tensor::from_fn(vec![3], |i| 1.0 + 0.3 * i as f64));
            let b = tape.leaf(Tensor::from_fn(vec![3], |i| -0.2 * i as f64));
            Ok(v.layer_norm(1, g, b, 1e-5)?.mul(v)?.sum())
        })
        .unwrap();
        assert!(err < 1e-5, "layer_norm {}", err);
    }

    #[test]
    fn bias_and_channel_scale_gradients() {
        let x = Tensor::from_fn(vec![2, 3, 2], |i| (i as f64 * 0.7).sin());
        let err = check_input_gradient(&x, 1e-5, |tape, v| {
            let b = tape.leaf(Tensor::from_fn(vec![3], |i| i as f64));
            let s = tape.leaf(Tensor::from_fn(vec![3], |i| 0.5 - i as f64));
            Ok(v.add_bias(b, 1)?.mul_channel(s, 1)?.square().sum())
        })
        .unwrap();
        assert!(err < 1e-6, "{}", err);
    }
}
