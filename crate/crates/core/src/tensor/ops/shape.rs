use super::{check_axis, split_axis};
use crate::tensor::{numel, shape_err, Element, Result, Tensor, Var};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` into the layout given by `out_shape` where output axis `i`
/// walks input memory with stride `in_strides[i]`.
fn strided_copy<E: Copy>(src: &[E], out_shape: &[usize], in_strides: &[usize]) -> Vec<E> {
    let n = numel(out_shape);
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let rank = out_shape.len();
    if rank == 0 {
        out.push(src[0]);
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let last = rank - 1;
    let (ld, ls) = (out_shape[last], in_strides[last]);
    loop {
        let mut o = off;
        for _ in 0..ld {
            out.push(src[o]);
            o += ls;
        }
        // Advance the multi-index over all but the last axis.
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            off += in_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= in_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

fn permute_data<E: Element>(src: &[E], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<E>) {
    let st = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
    let data = strided_copy(src, &out_shape, &in_strides);
    (out_shape, data)
}

impl<'t, E: Element> Var<'t, E> {
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, E>> {
        let shape = shape.into();
        let v = self.value().reshape(shape)?;
        Ok(self.tape.record(v, &[self], |g, _| vec![Some(g.to_vec())]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, E>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", format!("{:?} is not a permutation of the axes of {:?}", perm, shape));
        }
        let x = self.value();
        let (out_shape, data) = permute_data(x.data(), &shape, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let gshape = out_shape.clone();
        Ok(self.tape.record(Tensor::from_parts(out_shape, data), &[self], move |g, _| {
            vec![Some(permute_data(g, &gshape, &inverse).1)]
        }))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, E>> {
        let shape = self.shape();
        check_axis("narrow", &shape, axis)?;
        if start + len > shape[axis] {
            return shape_err("narrow", format!("[{}, {}) exceeds axis {} of {:?}", start, start + len, axis, shape));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let x = self.value();
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            y.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.tape.record(Tensor::from_parts(out_shape, y), &[self], move |g, _| {
            let mut gx = vec![E::zero(); outer * dim * inner];
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, E>], axis: usize) -> Result<Var<'t, E>> {
        let Some(first) = parts.first() else {
            return shape_err("concat", "no inputs");
        };
        let tape = first.tape;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        check_axis("concat", &shapes[0], axis)?;
        for s in &shapes[1..] {
            let mut a = s.clone();
            let mut b = shapes[0].clone();
            if a.len() != b.len() {
                return shape_err("concat", format!("{:?} vs {:?}", s, shapes[0]));
            }
            a[axis] = 0;
            b[axis] = 0;
            if a != b {
                return shape_err("concat", format!("{:?} vs {:?} off axis {}", s, shapes[0], axis));
            }
        }
        let (outer, _, inner) = split_axis(&shapes[0], axis);
        let dims: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
        let total: usize = dims.iter().sum();
        let values: Vec<Tensor<E>> = parts.iter().map(|p| p.value()).collect();
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &d) in values.iter().zip(&dims) {
                y.extend_from_slice(&v.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut out_shape = shapes[0].clone();
        out_shape[axis] = total;
        Ok(tape.record(Tensor::from_parts(out_shape, y), parts, move |g, needs| {
            let mut grads: Vec<Option<Vec<E>>> =
                dims.iter().zip(needs).map(|(&d, &n)| n.then(|| Vec::with_capacity(outer * d * inner))).collect();
            for o in 0..outer {
                let mut off = o * total * inner;
                for (gv, &d) in grads.iter_mut().zip(&dims) {
                    if let Some(gv) = gv {
                        gv.extend_from_slice(&g[off..off + d * inner]);
                    }
                    off += d * inner;
                }
            }
            grads
        }))
    }

    /// Cyclic shift by `shift` positions along `axis` (element `i` moves to `i + shift`).
    pub fn roll(self, axis: usize, shift: isize) -> Result<Var<'t, E>> {
        let shape = self.shape();
        check_axis("roll", &shape, axis)?;
        let (outer, dim, inner) = split_axis(&shape, axis);
        let roll = move |src: &[E], s: isize| {
            let mut out = vec![E::zero(); src.len()];
            if dim == 0 {
                return out;
            }
            let s = s.rem_euclid(dim as isize) as usize;
            for o in 0..outer {
                for d in 0..dim {
                    let to = (d + s) % dim;
                    out[(o * dim + to) * inner..(o * dim + to + 1) * inner]
                        .copy_from_slice(&src[(o * dim + d) * inner..(o * dim + d + 1) * inner]);
                }
            }
            out
        };
        let y = roll(self.value().data(), shift);
        Ok(self.tape.record(Tensor::from_parts(shape, y), &[self], move |g, _| vec![Some(roll(g, -shift))]))
    }

    /// `out[i] = flat(self)[indices[i]]`, shaped as `shape`.
    pub fn gather(self, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var<'t, E>> {
        let n = self.numel();
        if numel(&shape) != indices.len() {
            return shape_err("gather", format!("{} indices for shape {:?}", indices.len(), shape));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return shape_err("gather", format!("index {} out of range {}", bad, n));
        }
        let x = self.value();
        let y = indices.iter().map(|&i| x.data()[i]).collect();
        Ok(self.tape.record(Tensor::from_parts(shape, y), &[self], move |g, _| {
            let mut gx = vec![E::zero(); n];
            for (&i, &gv) in indices.iter().zip(g) {
                gx[i] += gv;
            }
            vec![Some(gx)]
        }))
    }

    /// Broadcasts axes of extent 1 up to `shape`.
    pub fn expand(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, E>> {
        let shape = shape.into();
        let src_shape = self.shape();
        if src_shape.len() != shape.len()
            || src_shape.iter().zip(&shape).any(|(&s, &d)| s != d && s != 1)
        {
            return shape_err("expand", format!("{:?} -> {:?}", src_shape, shape));
        }
        let st = strides(&src_shape);
        let in_strides: Vec<usize> =
            src_shape.iter().zip(&st).map(|(&s, &stride)| if s == 1 { 0 } else { stride }).collect();
        let x = self.value();
        let y = strided_copy(x.data(), &shape, &in_strides);
        let n = x.len();
        let out_shape = shape.clone();
        Ok(self.tape.record(Tensor::from_parts(shape, y), &[self], move |g, _| {
            // Scatter-add back through the same index walk.
            let idx = strided_copy(&(0..n).collect::<Vec<usize>>(), &out_shape, &in_strides);
            let mut gx = vec![E::zero(); n];
            for (&i, &gv) in idx.iter().zip(g) {
                gx[i] += gv;
            }
            vec![Some(gx)]
        }))
    }

    /// Nearest-neighbour upsampling of `[B, C, H, W]` by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t, E>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4("upsample_nearest")?;
        if factor == 0 {
            return shape_err("upsample_nearest", "factor must be positive");
        }
        let (oh, ow) = (h * factor, w * factor);
        let mut y = Vec::with_capacity(b * c * oh * ow);
        for plane in x.data().chunks(h * w) {
            for oy in 0..oh {
                let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..ow {
                    y.push(row[ox / factor]);
                }
            }
        }
        Ok(self.tape.record(Tensor::from_parts(vec![b, c, oh, ow], y), &[self], move |g, _| {
            let mut gx = vec![E::zero(); b * c * h * w];
            for (p, gp) in g.chunks(oh * ow).enumerate() {
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[(oy / factor) * w + ox / factor] += gp[oy * ow + ox];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Depth-to-space: `[B, C·r², H, W]` to `[B, C, H·r, W·r]`.
    pub fn pixel_shuffle(self, r: usize) -> Result<Var<'t, E>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4("pixel_shuffle")?;
        if r == 0 || c % (r * r) != 0 {
            return shape_err("pixel_shuffle", format!("{} channels not divisible by {}", c, r * r));
        }
        let co = c / (r * r);
        self.reshape(vec![b, co, r, r, h, w])?
            .permute(&[0, 1, 4, 2, 5, 3])?
            .reshape(vec![b, co, h * r, w * r])
    }

    /// Space-to-depth, the inverse of [`Var::pixel_shuffle`].
    pub fn pixel_unshuffle(self, r: usize) -> Result<Var<'t, E>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4("pixel_unshuffle")?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return shape_err("pixel_unshuffle", format!("{}x{} not divisible by {}", h, w, r));
        }
        self.reshape(vec![b, c, h / r, r, w / r, r])?
            .permute(&[0, 1, 3, 5, 2, 4])?
            .reshape(vec![b, c * r * r, h / r, w / r])
    }
}
