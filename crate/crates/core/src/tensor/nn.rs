//! Layers as named views into a [`ParamStore`].
//!
//! A layer only remembers parameter names and hyperparameters, so the same
//! definition runs in f32 for training and in f64 for gradient checks.

use rand::Rng;

use super::{invalid, shape_err, Ctx, Element, ParamStore, Result, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct ConvCfg {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvCfg {
    /// Stride 1, "same" padding for odd `k`, dense, with bias.
    pub fn new(cin: usize, cout: usize, k: usize) -> Self {
        ConvCfg { cin, cout, k, stride: 1, pad: k / 2, groups: 1, bias: true }
    }
    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }
    pub fn pad(mut self, p: usize) -> Self {
        self.pad = p;
        self
    }
    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: String,
    pub b: Option<String>,
    pub cfg: ConvCfg,
}

impl Conv2d {
    pub fn new<E: Element>(store: &mut ParamStore<E>, rng: &mut impl Rng, name: &str, cfg: ConvCfg) -> Result<Self> {
        if cfg.groups == 0 || cfg.cin % cfg.groups != 0 || cfg.cout % cfg.groups != 0 {
            return invalid("conv2d", format!("groups {} must divide {} and {}", cfg.groups, cfg.cin, cfg.cout));
        }
        let w = format!("{}.w", name);
        store.init_normal(&w, vec![cfg.cout, cfg.cin / cfg.groups, cfg.k, cfg.k], INIT_STD, rng)?;
        let b = if cfg.bias {
            let b = format!("{}.b", name);
            store.init_const(&b, vec![cfg.cout], 0.0)?;
            Some(b)
        } else {
            None
        };
        Ok(Conv2d { w, b, cfg })
    }

    pub fn forward<'t, E: Element>(&self, ctx: &Ctx<'t, '_, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let b = self.b.as_deref().map(|n| ctx.p(n)).transpose()?;
        x.conv2d(ctx.p(&self.w)?, b, self.cfg.stride, self.cfg.pad, self.cfg.groups)
    }
}

/// Affine map on the last axis of a `[N, in]` input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: String,
    pub b: String,
}

impl Linear {
    pub fn new<E: Element>(store: &mut ParamStore<E>, rng: &mut impl Rng, name: &str, din: usize, dout: usize) -> Result<Self> {
        let (w, b) = (format!("{}.w", name), format!("{}.b", name));
        store.init_normal(&w, vec![dout, din], INIT_STD, rng)?;
        store.init_const(&b, vec![dout], 0.0)?;
        Ok(Linear { w, b })
    }

    pub fn forward<'t, E: Element>(&self, ctx: &Ctx<'t, '_, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        x.matmul_nt(ctx.p(&self.w)?)?.add_bias(ctx.p(&self.b)?, 1)
    }
}

/// Layer norm across channels at every spatial position.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub g: String,
    pub b: String,
}

impl ChannelNorm {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, c: usize) -> Result<Self> {
        let (g, b) = (format!("{}.g", name), format!("{}.b", name));
        store.init_const(&g, vec![c], 1.0)?;
        store.init_const(&b, vec![c], 0.0)?;
        Ok(ChannelNorm { g, b })
    }

    pub fn forward<'t, E: Element>(&self, ctx: &Ctx<'t, '_, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        x.layer_norm(1, ctx.p(&self.g)?, ctx.p(&self.b)?, 1e-6)
    }
}

/// Depthwise 7×7, channel norm, 1×1 expansion, GELU, 1×1 projection, residual.
#[derive(Clone, Debug)]
pub struct ConvNeXtBlock {
    dw: Conv2d,
    norm: ChannelNorm,
    expand: Conv2d,
    project: Conv2d,
}

impl ConvNeXtBlock {
    pub fn new<E: Element>(store: &mut ParamStore<E>, rng: &mut impl Rng, name: &str, c: usize, kernel: usize) -> Result<Self> {
        Ok(ConvNeXtBlock {
            dw: Conv2d::new(store, rng, &format!("{}.dw", name), ConvCfg::new(c, c, kernel).groups(c))?,
            norm: ChannelNorm::new(store, &format!("{}.norm", name), c)?,
            expand: Conv2d::new(store, rng, &format!("{}.pw1", name), ConvCfg::new(c, 4 * c, 1))?,
            project: Conv2d::new(store, rng, &format!("{}.pw2", name), ConvCfg::new(4 * c, c, 1))?,
        })
    }

    pub fn forward<'t, E: Element>(&self, ctx: &Ctx<'t, '_, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let h = self.dw.forward(ctx, x)?;
        let h = self.norm.forward(ctx, h)?;
        let h = self.expand.forward(ctx, h)?.gelu();
        x.add(self.project.forward(ctx, h)?)
    }
}

/// Region labels after a cyclic shift: positions that were not neighbours
/// before the roll get different labels.
fn shift_regions(n: usize, window: usize, shift: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            if i < n - window {
                0
            } else if i < n - shift {
                1
            } else {
                2
            }
        })
        .collect()
}

/// Additive mask `[nW, w², w²]`: 0 inside a region, a large negative value
/// across regions.
pub fn shifted_window_mask(h: usize, w: usize, window: usize, shift: usize) -> Vec<f64> {
    let (ry, rx) = (shift_regions(h, window, shift), shift_regions(w, window, shift));
    let (nh, nw, t) = (h / window, w / window, window * window);
    let mut mask = vec![0.0; nh * nw * t * t];
    for wy in 0..nh {
        for wx in 0..nw {
            let base = (wy * nw + wx) * t * t;
            let label = |p: usize| {
                let (y, x) = (wy * window + p / window, wx * window + p % window);
                ry[y] * 3 + rx[x]
            };
            for i in 0..t {
                for j in 0..t {
                    if label(i) != label(j) {
                        mask[base + i * t + j] = -1e9;
                    }
                }
            }
        }
    }
    mask
}

/// Index into a `[(2w-1)², heads]` table for every `[head, i, j]` pair.
fn relative_index(window: usize, heads: usize) -> Vec<usize> {
    let t = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        for i in 0..t {
            for j in 0..t {
                let dy = i / window + window - 1 - j / window;
                let dx = i % window + window - 1 - j % window;
                idx.push((dy * span + dx) * heads + h);
            }
        }
    }
    idx
}

/// Multi-head self-attention inside non-overlapping (optionally cyclically
/// shifted) windows of a `[B, C, H, W]` map.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Conv2d,
    pub proj: Conv2d,
    pub rel_bias: Option<String>,
    pub window: usize,
    pub shift: usize,
    pub heads: usize,
}

impl WindowAttention {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut impl Rng,
        name: &str,
        c: usize,
        window: usize,
        shift: usize,
        heads: usize,
        rel_bias: bool,
    ) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return invalid("windowed_attention", format!("{} heads do not divide {} channels", heads, c));
        }
        if window == 0 || shift >= window {
            return invalid("windowed_attention", format!("shift {} must be below window {}", shift, window));
        }
        let rel_bias = if rel_bias {
            let n = format!("{}.rel", name);
            store.init_normal(&n, vec![(2 * window - 1) * (2 * window - 1), heads], INIT_STD, rng)?;
            Some(n)
        } else {
            None
        };
        Ok(WindowAttention {
            qkv: Conv2d::new(store, rng, &format!("{}.qkv", name), ConvCfg::new(c, 3 * c, 1))?,
            proj: Conv2d::new(store, rng, &format!("{}.proj", name), ConvCfg::new(c, c, 1))?,
            rel_bias,
            window,
            shift,
            heads,
        })
    }

    pub fn forward<'t, E: Element>(&self, ctx: &Ctx<'t, '_, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let attn = self.attend(ctx, x)?;
        self.proj.forward(ctx, attn)
    }

    /// Queries, keys and values stacked on the channel axis. The key bias is
    /// masked out since softmax cancels it.
    pub fn project_qkv<'t, E: Element>(&self, ctx: &Ctx<'t, '_, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let qkv = x.conv2d(ctx.p(&self.qkv.w)?, None, 1, 0, 1)?;
        match &self.qkv.b {
            Some(b) => {
                let c = self.qkv.cfg.cout / 3;
                let mask = Tensor::from_fn(vec![3 * c], |i| if i / c == 1 { E::zero() } else { E::one() });
                qkv.add_bias(ctx.p(b)?.mul(ctx.constant(mask))?, 1)
            }
            None => Ok(qkv),
        }
    }

    /// Attention output before the output projection.
    pub fn attend<'t, E: Element>(&self, ctx: &Ctx<'t, '_, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let (b, c, h, w) = x.value().dims4("windowed_attention")?;
        let (win, heads) = (self.window, self.heads);
        if h % win != 0 || w % win != 0 {
            return shape_err("windowed_attention", format!("extent {}x{} not divisible by window {}", h, w, win));
        }
        if c % heads != 0 {
            return shape_err("windowed_attention", format!("{} heads do not divide {} channels", heads, c));
        }
        let shift = if win == h && win == w { 0 } else { self.shift };
        let (d, nh, nw, t) = (c / heads, h / win, w / win, win * win);
        let n = b * nh * nw * heads;
        let mut qkv = self.project_qkv(ctx, x)?;
        if shift > 0 {
            qkv = qkv.roll(2, -(shift as isize))?.roll(3, -(shift as isize))?;
        }
        let parts = qkv
            .reshape(vec![b, 3, heads, d, nh, win, nw, win])?
            .permute(&[1, 0, 4, 6, 2, 5, 7, 3])?
            .reshape(vec![3, n, t, d])?;
        let q = parts.narrow(0, 0, 1)?.reshape(vec![n, t, d])?;
        let k = parts.narrow(0, 1, 1)?.reshape(vec![n, t, d])?;
        let v = parts.narrow(0, 2, 1)?.reshape(vec![n, t, d])?;
        let mut s = q.matmul_nt(k)?.scale(1.0 / (d as f64).sqrt());
        if shift > 0 || self.rel_bias.is_some() {
            let full = vec![b, nh * nw, heads, t, t];
            let mut s5 = s.reshape(full.clone())?;
            if shift > 0 {
                let m = shifted_window_mask(h, w, win, shift).into_iter().map(E::of).collect();
                let m = ctx.constant(Tensor::new(vec![1, nh * nw, 1, t, t], m)?);
                s5 = s5.add(m.expand(full.clone())?)?;
            }
            if let Some(name) = &self.rel_bias {
                let bias = ctx.p(name)?.gather(relative_index(win, heads), vec![1, 1, heads, t, t])?;
                s5 = s5.add(bias.expand(full)?)?;
            }
            s = s5.reshape(vec![n, t, t])?;
        }
        let a = s.softmax(2)?;
        let o = a
            .matmul(v)?
            .reshape(vec![b, nh, nw, heads, win, win, d])?
            .permute(&[0, 3, 6, 1, 4, 2, 5])?
            .reshape(vec![b, c, h, w])?;
        if shift > 0 {
            o.roll(2, shift as isize)?.roll(3, shift as isize)
        } else {
            Ok(o)
        }
    }
}

/// Pre-norm attention and MLP sublayers, each with a residual connection.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    norm1: ChannelNorm,
    pub attn: WindowAttention,
    norm2: ChannelNorm,
    fc1: Conv2d,
    fc2: Conv2d,
}

impl SwinBlock {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut impl Rng,
        name: &str,
        c: usize,
        window: usize,
        shift: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(SwinBlock {
            norm1: ChannelNorm::new(store, &format!("{}.n1", name), c)?,
            attn: WindowAttention::new(store, rng, &format!("{}.attn", name), c, window, shift, heads, true)?,
            norm2: ChannelNorm::new(store, &format!("{}.n2", name), c)?,
            fc1: Conv2d::new(store, rng, &format!("{}.fc1", name), ConvCfg::new(c, 2 * c, 1))?,
            fc2: Conv2d::new(store, rng, &format!("{}.fc2", name), ConvCfg::new(2 * c, c, 1))?,
        })
    }

    pub fn forward<'t, E: Element>(&self, ctx: &Ctx<'t, '_, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let x = x.add(self.attn.forward(ctx, self.norm1.forward(ctx, x)?)?)?;
        let h = self.fc1.forward(ctx, self.norm2.forward(ctx, x)?)?.gelu();
        x.add(self.fc2.forward(ctx, h)?)
    }
}
