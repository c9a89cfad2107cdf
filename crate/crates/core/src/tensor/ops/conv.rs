use crate::tensor::{gemm, shape_err, Element, Layout, Result, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn cig(&self) -> usize {
        self.cin / self.groups
    }
    fn cog(&self) -> usize {
        self.cout / self.groups
    }
    fn k(&self) -> usize {
        self.cig() * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.oh * self.ow
    }
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
    fn depthwise(&self) -> bool {
        self.cig() == 1 && self.cog() == 1
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad` is in range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        valid_range(self.ow, self.w, self.stride, kx, self.pad)
    }
    fn valid_rows(&self, ky: usize) -> (usize, usize) {
        valid_range(self.oh, self.h, self.stride, ky, self.pad)
    }
}

fn valid_range(out: usize, inp: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let off = k as isize - pad as isize;
    let s = stride as isize;
    // smallest o with o*s + off >= 0
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    // largest o with o*s + off <= inp - 1
    let top = inp as isize - 1 - off;
    let hi = if top < 0 { 0 } else { (top / s + 1).min(out as isize) };
    let lo = lo.min(out as isize);
    (lo as usize, hi.max(lo) as usize)
}

fn im2col<E: Element>(x: &[E], g: &ConvGeom) -> Vec<E> {
    let (p, ow) = (g.p(), g.ow);
    let mut cols = vec![E::zero(); g.k() * p];
    for c in 0..g.cig() {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = g.valid_rows(ky);
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                let (xlo, xhi) = g.valid_cols(kx);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        let ix0 = xlo + kx - g.pad;
                        dst[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            dst[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<E: Element>(cols: &[E], g: &ConvGeom, dx: &mut [E]) {
    let (p, ow) = (g.p(), g.ow);
    for c in 0..g.cig() {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = g.valid_rows(ky);
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                let (xlo, xhi) = g.valid_cols(kx);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in xlo..xhi {
                        dst[ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

fn depthwise_forward<E: Element>(x: &[E], w: &[E], g: &ConvGeom, out: &mut [E]) {
    for ky in 0..g.kh {
        let (ylo, yhi) = g.valid_rows(ky);
        for kx in 0..g.kw {
            let wv = w[ky * g.kw + kx];
            let (xlo, xhi) = g.valid_cols(kx);
            for oy in ylo..yhi {
                let iy = oy * g.stride + ky - g.pad;
                let src = &x[iy * g.w..(iy + 1) * g.w];
                let dst = &mut out[oy * g.ow..(oy + 1) * g.ow];
                if g.stride == 1 {
                    let ix0 = xlo + kx - g.pad;
                    for (d, &s) in dst[xlo..xhi].iter_mut().zip(&src[ix0..ix0 + (xhi - xlo)]) {
                        *d += wv * s;
                    }
                } else {
                    for ox in xlo..xhi {
                        dst[ox] += wv * src[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

fn depthwise_backward<E: Element>(x: &[E], w: &[E], gout: &[E], g: &ConvGeom, dx: Option<&mut [E]>, dw: &mut [E]) {
    let mut dx = dx;
    for ky in 0..g.kh {
        let (ylo, yhi) = g.valid_rows(ky);
        for kx in 0..g.kw {
            let wv = w[ky * g.kw + kx];
            let (xlo, xhi) = g.valid_cols(kx);
            let mut acc = E::zero();
            for oy in ylo..yhi {
                let iy = oy * g.stride + ky - g.pad;
                let go = &gout[oy * g.ow..(oy + 1) * g.ow];
                let xr = &x[iy * g.w..(iy + 1) * g.w];
                for ox in xlo..xhi {
                    acc += go[ox] * xr[ox * g.stride + kx - g.pad];
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let dr = &mut dx[iy * g.w..(iy + 1) * g.w];
                    for ox in xlo..xhi {
                        dr[ox * g.stride + kx - g.pad] += wv * go[ox];
                    }
                }
            }
            dw[ky * g.kw + kx] += acc;
        }
    }
}

fn conv_forward<E: Element>(x: &[E], w: &[E], g: &ConvGeom) -> Vec<E> {
    let (cig, cog, k, p) = (g.cig(), g.cog(), g.k(), g.p());
    let mut out = vec![E::zero(); g.batch * g.cout * p];
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let xs = &x[(b * g.cin + grp * cig) * g.h * g.w..(b * g.cin + (grp + 1) * cig) * g.h * g.w];
            let ws = &w[grp * cog * k..(grp + 1) * cog * k];
            let os = &mut out[(b * g.cout + grp * cog) * p..(b * g.cout + (grp + 1) * cog) * p];
            if g.depthwise() {
                depthwise_forward(xs, ws, g, os);
            } else if g.pointwise() {
                gemm(ws, Layout::row_major(cog, k), xs, Layout::row_major(k, p), os, Layout::row_major(cog, p), E::zero());
            } else {
                let cols = im2col(xs, g);
                gemm(ws, Layout::row_major(cog, k), &cols, Layout::row_major(k, p), os, Layout::row_major(cog, p), E::zero());
            }
        }
    }
    out
}

fn conv_backward<E: Element>(x: &[E], w: &[E], gout: &[E], g: &ConvGeom, need_x: bool) -> (Option<Vec<E>>, Vec<E>) {
    let (cig, cog, k, p) = (g.cig(), g.cog(), g.k(), g.p());
    let mut dx = need_x.then(|| vec![E::zero(); x.len()]);
    let mut dw = vec![E::zero(); w.len()];
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let xr = (b * g.cin + grp * cig) * g.h * g.w..(b * g.cin + (grp + 1) * cig) * g.h * g.w;
            let xs = &x[xr.clone()];
            let ws = &w[grp * cog * k..(grp + 1) * cog * k];
            let dws = &mut dw[grp * cog * k..(grp + 1) * cog * k];
            let gs = &gout[(b * g.cout + grp * cog) * p..(b * g.cout + (grp + 1) * cog) * p];
            if g.depthwise() {
                depthwise_backward(xs, ws, gs, g, dx.as_mut().map(|d| &mut d[xr.clone()]), dws);
                continue;
            }
            let lg = Layout::row_major(cog, p);
            let lw = Layout::row_major(cog, k);
            if g.pointwise() {
                gemm(gs, lg, xs, Layout::row_major(k, p).t(), dws, lw, E::one());
                if let Some(dx) = dx.as_mut() {
                    gemm(ws, lw.t(), gs, lg, &mut dx[xr.clone()], Layout::row_major(k, p), E::one());
                }
            } else {
                let cols = im2col(xs, g);
                gemm(gs, lg, &cols, Layout::row_major(k, p).t(), dws, lw, E::one());
                if let Some(dx) = dx.as_mut() {
                    let mut dcols = vec![E::zero(); k * p];
                    gemm(ws, lw.t(), gs, lg, &mut dcols, Layout::row_major(k, p), E::zero());
                    col2im_add(&dcols, g, &mut dx[xr.clone()]);
                }
            }
        }
    }
    (dx, dw)
}

impl<'t, E: Element> Var<'t, E> {
    /// 2-D convolution of `[B, Cin, H, W]` with weights `[Cout, Cin/groups, kh, kw]`.
    pub fn conv2d(
        self,
        weight: Var<'t, E>,
        bias: Option<Var<'t, E>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var<'t, E>> {
        let x = self.value();
        let wv = weight.value();
        let (batch, cin, h, w) = x.dims4("conv2d")?;
        let [cout, wcin, kh, kw] = wv.shape()[..] else {
            return shape_err("conv2d", format!("weight must be [Cout, Cin/groups, kh, kw], got {:?}", wv.shape()));
        };
        if groups == 0 || stride == 0 {
            return shape_err("conv2d", "groups and stride must be positive");
        }
        if cin % groups != 0 {
            return shape_err("conv2d", format!("input channels {} not divisible by groups {}", cin, groups));
        }
        if cout % groups != 0 {
            return shape_err("conv2d", format!("output channels {} not divisible by groups {}", cout, groups));
        }
        if wcin != cin / groups {
            return shape_err("conv2d", format!("weight expects {} channels per group, input has {}", wcin, cin / groups));
        }
        if h + 2 * padding < kh {
            return shape_err("conv2d", format!("height {} (+2·{} padding) smaller than kernel {}", h, padding, kh));
        }
        if w + 2 * padding < kw {
            return shape_err("conv2d", format!("width {} (+2·{} padding) smaller than kernel {}", w, padding, kw));
        }
        if let Some(b) = &bias {
            if b.numel() != cout {
                return shape_err("conv2d", format!("bias has {} entries for {} output channels", b.numel(), cout));
            }
        }
        let geom = ConvGeom {
            batch,
            cin,
            cout,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            groups,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let out = conv_forward(x.data(), wv.data(), &geom);
        let y = self.tape.record(
            Tensor::from_parts(vec![batch, cout, geom.oh, geom.ow], out),
            &[self, weight],
            move |g, needs| {
                let (dx, dw) = conv_backward(x.data(), wv.data(), g, &geom, needs[0]);
                vec![dx, needs[1].then_some(dw)]
            },
        );
        match bias {
            Some(b) => y.add_bias(b, 1),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_input_gradient;
    use crate::tensor::Tape;

    /// Direct nested-loop convolution used as an independent reference.
    pub(crate) fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: Option<&Tensor<f64>>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Tensor<f64> {
        let (n, cin, h, wd) = x.dims4("t").unwrap();
        let (cout, cig, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let cog = cout / groups;
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let _ = cin;
        Tensor::from_fn(vec![n, cout, oh, ow], |i| {
            let ox = i % ow;
            let oy = (i / ow) % oh;
            let co = (i / (ow * oh)) % cout;
            let bi = i / (ow * oh * cout);
            let grp = co / cog;
            let mut s = b.map_or(0.0, |b| b.data()[co]);
            for c in 0..cig {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        s += w.at(&[co, c, ky, kx]) * x.at(&[bi, grp * cig + c, iy as usize, ix as usize]);
                    }
                }
            }
            s
        })
    }

    fn pseudo(shape: Vec<usize>, seed: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64 + seed) * 12.9898).sin() * 0.5)
    }

    #[test]
    fn ones_kernel_sums() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let y = x.conv2d(w, None, 1, 0, 1).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn identity_kernel() {
        let tape = Tape::<f32>::new();
        let xv = Tensor::from_fn(vec![2, 1, 4, 5], |i| i as f32 * 0.1);
        let w = tape.constant(Tensor::full(vec![1, 1, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let y = tape.constant(xv.clone()).conv2d(w, Some(b), 1, 0, 1).unwrap().value();
        assert_eq!(y, xv);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let configs = [
            // (batch, cin, cout, h, w, k, stride, pad, groups)
            (2, 3, 4, 8, 8, 3, 1, 0, 1),
            (2, 3, 4, 8, 8, 3, 1, 1, 1),
            (1, 4, 6, 7, 9, 3, 2, 1, 2),
            (1, 5, 5, 9, 9, 7, 1, 3, 5),
            (1, 4, 4, 8, 8, 3, 2, 1, 4),
            (2, 6, 3, 5, 5, 1, 1, 0, 1),
            (1, 3, 8, 8, 8, 2, 2, 0, 1),
        ];
        for (i, &(n, cin, cout, h, w, k, s, p, g)) in configs.iter().enumerate() {
            let x = pseudo(vec![n, cin, h, w], i as f64);
            let wt = pseudo(vec![cout, cin / g, k, k], 10.0 + i as f64);
            let b = pseudo(vec![cout], 20.0);
            let tape = Tape::new();
            let y = tape
                .constant(x.clone())
                .conv2d(tape.constant(wt.clone()), Some(tape.constant(b.clone())), s, p, g)
                .unwrap()
                .value();
            let want = naive_conv(&x, &wt, Some(&b), s, p, g);
            assert_eq!(y.shape(), want.shape(), "config {}", i);
            assert!(y.max_abs_diff(&want) < 1e-12, "config {}: {}", i, y.max_abs_diff(&want));
        }
    }

    #[test]
    fn gradients_all_paths() {
        for &(cin, cout, k, s, p, g) in
            &[(2, 3, 3, 1, 1, 1), (2, 2, 3, 2, 1, 2), (3, 3, 7, 1, 3, 3), (2, 4, 1, 1, 0, 1), (2, 3, 2, 2, 0, 1)]
        {
            let x = pseudo(vec![1, cin, 5, 5], 1.0);
            let wt = pseudo(vec![cout, cin / g, k, k], 2.0);
            let err = check_input_gradient(&x, 1e-5, |tape, v| {
                Ok(v.conv2d(tape.constant(wt.clone()), None, s, p, g)?.square().sum())
            })
            .unwrap();
            assert!(err < 1e-6, "input grad {:?}: {}", (cin, cout, k, s, p, g), err);
            let err = check_input_gradient(&wt, 1e-5, |tape, wv| {
                Ok(tape.constant(x.clone()).conv2d(wv, None, s, p, g)?.square().sum())
            })
            .unwrap();
            assert!(err < 1e-6, "weight grad {:?}: {}", (cin, cout, k, s, p, g), err);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 4, 4]));
        let err = x.conv2d(tape.constant(Tensor::zeros(vec![4, 3, 3, 3])), None, 1, 0, 2).unwrap_err();
        assert!(err.to_string().contains("groups"), "{}", err);
        let err = x.conv2d(tape.constant(Tensor::zeros(vec![4, 2, 3, 3])), None, 1, 0, 1).unwrap_err();
        assert!(err.to_string().contains("channels"), "{}", err);
        let err = x.conv2d(tape.constant(Tensor::zeros(vec![4, 3, 7, 7])), None, 1, 0, 1).unwrap_err();
        assert!(err.to_string().contains("height"), "{}", err);
    }

    #[test]
    fn valid_range_edges() {
        assert_eq!(valid_range(5, 5, 1, 0, 1), (1, 5));
        assert_eq!(valid_range(5, 5, 1, 2, 1), (0, 4));
        assert_eq!(valid_range(3, 5, 2, 0, 1), (1, 3));
        assert_eq!(valid_range(3, 5, 2, 2, 1), (0, 2));
    }
}
