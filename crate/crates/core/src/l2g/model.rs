use super::{L2gConfig, L2gError, Result, M};
use crate::qhvae::{Qhvae, QhvaeConfig};
use crate::tensor::nn::{ChannelNorm, Conv2d, ConvCfg, SwinBlock};
use crate::tensor::{Ctx, Element, ParamStore, RngSeed, Tensor, Var};

/// Frozen codec features of the four tiles, each `[B, C, I₃/16, I₃/16]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFeatures(pub [Tensor<f32>; M]);

impl LocalFeatures {
    /// Decoder states of the frozen codec at its feature level, computed
    /// outside any tape so no gradient can reach its weights.
    pub fn encode(qhvae: &Qhvae, store: &ParamStore<f32>, tiles: &[Tensor<f32>; M]) -> Result<Self> {
        let mut out = Vec::with_capacity(M);
        for t in tiles {
            let x = if t.shape().len() == 3 { t.reshape([&[1][..], t.shape()].concat())? } else { t.clone() };
            out.push(qhvae.feature_map(store, &x)?);
        }
        Ok(LocalFeatures(out.try_into().expect("four tiles")))
    }

    pub fn zeros_like(&self) -> Self {
        LocalFeatures(self.0.clone().map(|t| Tensor::zeros(t.shape().to_vec())))
    }

    pub fn cast<E: Element>(&self) -> [Tensor<E>; M] {
        self.0.clone().map(|t| t.cast())
    }
}

pub struct Forward<'t, E: Element> {
    pub z_g: Var<'t, E>,
    /// `Σ T_m(z_L,m)` scattered onto the global grid.
    pub z_l: Var<'t, E>,
    pub z_f: Var<'t, E>,
    /// Reconstructions at `I₃/8, I₃/4, I₃/2, I₃`.
    pub recons: Vec<Var<'t, E>>,
}

#[derive(Clone, Debug)]
pub struct L2g {
    pub cfg: L2gConfig,
    embed: Conv2d,
    stage1: Vec<SwinBlock>,
    merge_norm: ChannelNorm,
    merge: Conv2d,
    stage2: Vec<SwinBlock>,
    align: Vec<Conv2d>,
    dec: Vec<Conv2d>,
    heads: Vec<Conv2d>,
}

fn swin_stage<E: Element>(
    store: &mut ParamStore<E>,
    rng: &mut rand_chacha::ChaCha8Rng,
    name: &str,
    c: usize,
    cfg: &L2gConfig,
    heads: usize,
) -> crate::tensor::Result<Vec<SwinBlock>> {
    (0..cfg.depth)
        .map(|i| {
            let shift = if i % 2 == 1 { cfg.window / 2 } else { 0 };
            SwinBlock::new(store, rng, &format!("{}.{}", name, i), c, cfg.window, shift, heads)
        })
        .collect()
}

impl L2g {
    pub fn new<E: Element>(cfg: &L2gConfig, qhvae: &QhvaeConfig, store: &mut ParamStore<E>, seed: RngSeed) -> Result<Self> {
        cfg.validate(qhvae)?;
        let mut rng = seed.derive_str("l2g").rng();
        let [c1, c2] = cfg.global_widths;
        let cq = qhvae.feature_dim();
        let embed = Conv2d::new(store, &mut rng, "g.embed", ConvCfg::new(3, c1, 2).stride(2).pad(0))?;
        let stage1 = swin_stage(store, &mut rng, "g.s1", c1, cfg, cfg.heads[0])?;
        let merge_norm = ChannelNorm::new(store, "g.merge.norm", 4 * c1)?;
        let merge = Conv2d::new(store, &mut rng, "g.merge", ConvCfg::new(4 * c1, c2, 1))?;
        let stage2 = swin_stage(store, &mut rng, "g.s2", c2, cfg, cfg.heads[1])?;
        let align = (0..M).map(|m| Conv2d::new(store, &mut rng, &format!("align.{}", m), ConvCfg { bias: false, ..ConvCfg::new(cq, c2, 1) })).collect::<Result<_, _>>()?;
        let mut dec = Vec::new();
        let mut heads = Vec::new();
        let mut cin = c2;
        for (i, &w) in cfg.decoder_widths.iter().enumerate() {
            dec.push(Conv2d::new(store, &mut rng, &format!("dec.{}", i), ConvCfg::new(cin, w, 3))?);
            heads.push(Conv2d::new(store, &mut rng, &format!("dec.{}.head", i), ConvCfg::new(w, 3, 1))?);
            cin = w;
        }
        Ok(L2g { cfg: cfg.clone(), embed, stage1, merge_norm, merge, stage2, align, dec, heads })
    }

    /// Windowed-attention encoding of the distant view `[B, 3, I₂, I₂]`.
    pub fn encode_global<'t, E: Element>(&self, ctx: &Ctx<'t, '_, E>, distant: Var<'t, E>) -> Result<Var<'t, E>> {
        let mut h = self.embed.forward(ctx, distant.add_scalar(-0.5))?;
        for b in &self.stage1 {
            h = b.forward(ctx, h)?;
        }
        h = self.merge.forward(ctx, self.merge_norm.forward(ctx, h.pixel_unshuffle(2)?)?)?;
        for b in &self.stage2 {
            h = b.forward(ctx, h)?;
        }
        Ok(h)
    }

    /// Projects each tile's features and places them in its quadrant.
    pub fn align_local<'t, E: Element>(&self, ctx: &Ctx<'t, '_, E>, locals: &[Var<'t, E>]) -> Result<Var<'t, E>> {
        if locals.len() != M {
            return Err(L2gError::Quadrant(format!("{} local maps, expected {}", locals.len(), M)));
        }
        let half = self.cfg.grid() / 2;
        let mut placed = Vec::with_capacity(M);
        for (m, z) in locals.iter().enumerate() {
            let s = z.shape();
            if s.len() != 4 || s[2] != half || s[3] != half {
                return Err(L2gError::Quadrant(format!("tile {} features are {:?}, quadrant is {}x{}", m, s, half, half)));
            }
            placed.push(self.align[m].forward(ctx, *z)?);
        }
        let top = Var::concat(&placed[0..2], 3)?;
        let bottom = Var::concat(&placed[2..4], 3)?;
        Ok(Var::concat(&[top, bottom], 2)?)
    }

    pub fn decode<'t, E: Element>(&self, ctx: &Ctx<'t, '_, E>, z_f: Var<'t, E>) -> Result<Vec<Var<'t, E>>> {
        let mut h = z_f;
        let mut out = Vec::with_capacity(4);
        for (i, (conv, head)) in self.dec.iter().zip(&self.heads).enumerate() {
            if i > 0 {
                h = h.upsample_nearest(2)?;
            }
            h = conv.forward(ctx, h)?.gelu();
            out.push(head.forward(ctx, h)?.add_scalar(0.5));
        }
        Ok(out)
    }

    /// `distant` is `[B, 3, I₂, I₂]`; `locals` are the four frozen feature maps.
    pub fn forward<'t, E: Element>(&self, ctx: &Ctx<'t, '_, E>, distant: Var<'t, E>, locals: &[Tensor<E>; M]) -> Result<Forward<'t, E>> {
        let z_g = self.encode_global(ctx, distant)?;
        let lv: Vec<Var<'t, E>> = locals.iter().map(|t| ctx.constant(t.clone())).collect();
        let z_l = self.align_local(ctx, &lv)?;
        if z_l.shape() != z_g.shape() {
            return Err(L2gError::Quadrant(format!("local grid {:?} vs global grid {:?}", z_l.shape(), z_g.shape())));
        }
        let z_f = z_g.add(z_l)?;
        let recons = self.decode(ctx, z_f)?;
        Ok(Forward { z_g, z_l, z_f, recons })
    }
}

/// `Σ_k mean |Î_k − I_k|` over the supervised scales, with the per-scale terms.
pub fn hierarchical_l1_loss<'t, E: Element>(recons: &[Var<'t, E>], targets: &[Var<'t, E>]) -> Result<(Var<'t, E>, Vec<Var<'t, E>>)> {
    if recons.len() != targets.len() || recons.is_empty() {
        return Err(L2gError::Config(format!("{} reconstructions for {} targets", recons.len(), targets.len())));
    }
    let terms: Vec<Var<'t, E>> = recons.iter().zip(targets).map(|(r, t)| Ok(r.sub(*t)?.abs().mean())).collect::<Result<_>>()?;
    let mut total = terms[0];
    for t in &terms[1..] {
        total = total.add(*t)?;
    }
    Ok((total, terms))
}

/// Spatial mean of a fused map `[B, C, H, W]`, giving `[B, C]`.
pub fn slide_feature(z_f: &Tensor<f32>) -> Result<Tensor<f32>> {
    Ok(crate::qhvae::pool(z_f)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::l2g::{make_views, targets};
    use crate::tensor::gradcheck::check_param_gradients;
    use crate::tensor::Tape;
    use rand::Rng;

    fn tiny_qhvae() -> QhvaeConfig {
        QhvaeConfig { levels: 3, widths: vec![4, 6, 8], latent_channels: vec![2, 2, 3], feature_level: 3, ..QhvaeConfig::tiny() }
    }

    fn setup(seed: u64) -> (L2g, ParamStore<f64>, Tensor<f64>, [Tensor<f64>; M], Vec<Tensor<f64>>) {
        let qcfg = tiny_qhvae();
        let mut qstore = ParamStore::<f32>::new();
        let q = Qhvae::new(&qcfg, &mut qstore, RngSeed(seed)).unwrap();
        let mut store = ParamStore::<f64>::new();
        let m = L2g::new(&L2gConfig::tiny(), &qcfg, &mut store, RngSeed(seed)).unwrap();
        let mut rng = RngSeed(seed + 50).rng();
        let patch = Tensor::from_fn(vec![3, 32, 32], |_| rng.random::<f32>());
        let v = make_views(&patch).unwrap();
        let locals = LocalFeatures::encode(&q, &qstore, &v.tiles).unwrap();
        let t = targets(&patch, &L2gConfig::tiny()).unwrap().iter().map(|t| t.cast()).collect();
        (m, store, v.distant.reshape(vec![1, 3, 16, 16]).unwrap().cast(), locals.cast(), t)
    }

    #[test]
    fn output_scales() {
        let (m, store, distant, locals, _) = setup(0);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let f = m.forward(&ctx, ctx.constant(distant), &locals).unwrap();
        let sizes: Vec<Vec<usize>> = f.recons.iter().map(|r| r.shape()).collect();
        assert_eq!(sizes, vec![vec![1, 3, 4, 4], vec![1, 3, 8, 8], vec![1, 3, 16, 16], vec![1, 3, 32, 32]]);
        assert_eq!(f.z_f.shape(), vec![1, 6, 4, 4]);
    }

    #[test]
    fn additive_fusion_identities() {
        let (m, store, distant, locals, _) = setup(1);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let zero_local = locals.clone().map(|t| Tensor::zeros(t.shape().to_vec()));
        let f = m.forward(&ctx, ctx.constant(distant.clone()), &zero_local).unwrap();
        assert_eq!(f.z_f.value(), f.z_g.value());
        let z_l = m.align_local(&ctx, &locals.iter().map(|t| ctx.constant(t.clone())).collect::<Vec<_>>()).unwrap();
        let fused = ctx.constant(Tensor::zeros(z_l.shape())).add(z_l).unwrap();
        assert_eq!(fused.value(), z_l.value());
    }

    #[test]
    fn perturbing_a_tile_moves_only_its_quadrant() {
        let (m, store, _, locals, _) = setup(2);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let base = m.align_local(&ctx, &locals.iter().map(|t| ctx.constant(t.clone())).collect::<Vec<_>>()).unwrap().value();
        for q in 0..M {
            let mut moved = locals.clone();
            moved[q] = moved[q].map(|v| v + 0.7);
            let out = m.align_local(&ctx, &moved.iter().map(|t| ctx.constant(t.clone())).collect::<Vec<_>>()).unwrap().value();
            let g = 4;
            for c in 0..6 {
                for y in 0..g {
                    for x in 0..g {
                        let quad = (y / 2) * 2 + x / 2;
                        let same = out.at(&[0, c, y, x]) == base.at(&[0, c, y, x]);
                        assert_eq!(same, quad != q, "tile {} at ({}, {}, {})", q, c, y, x);
                    }
                }
            }
        }
    }

    #[test]
    fn l1_loss_examples() {
        let tape = Tape::<f64>::new();
        let mut rng = RngSeed(3).rng();
        let ts: Vec<Tensor<f64>> = [2usize, 4, 8, 16].iter().map(|&s| Tensor::from_fn(vec![1, 3, s, s], |_| rng.random::<f64>())).collect();
        let tv: Vec<_> = ts.iter().map(|t| tape.constant(t.clone())).collect();
        assert_eq!(hierarchical_l1_loss(&tv, &tv).unwrap().0.value().item(), 0.0);
        let mut shifted = tv.clone();
        shifted[1] = tape.constant(ts[1].map(|v| v - 0.25));
        assert!((hierarchical_l1_loss(&shifted, &tv).unwrap().0.value().item() - 0.25).abs() < 1e-12);
        let noisy: Vec<Tensor<f64>> = ts.iter().map(|t| t.map(|v| v + 0.1 * (v * 37.0).sin())).collect();
        let oracle: f64 = noisy.iter().zip(&ts).map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64).sum();
        let nv: Vec<_> = noisy.iter().map(|t| tape.constant(t.clone())).collect();
        let (l, per) = hierarchical_l1_loss(&nv, &tv).unwrap();
        assert!((l.value().item() - oracle).abs() < 1e-6);
        assert_eq!(per.len(), 4);
        assert!(per.iter().all(|p| p.value().item() > 0.0));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for seed in 0..3 {
            let (m, mut store, distant, locals, ts) = setup(seed);
            let mut rng = RngSeed(seed + 90).rng();
            let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
            for n in names {
                let old = store.get(&n).unwrap().clone();
                let v = if n.ends_with(".b") {
                    Tensor::from_fn(old.shape().to_vec(), |_| rng.random_range(-0.2..0.2))
                } else if n.ends_with(".w") {
                    old.map(|v| v * 10.0)
                } else {
                    old
                };
                store.set(&n, v).unwrap();
            }
            let check = check_param_gradients(&store, 1e-5, 4, |ctx| {
                let f = m.forward(ctx, ctx.constant(distant.clone()), &locals).map_err(unwrap_tensor)?;
                let tv: Vec<_> = ts.iter().map(|t| ctx.constant(t.clone())).collect();
                Ok(hierarchical_l1_loss(&f.recons, &tv).map_err(unwrap_tensor)?.0)
            })
            .unwrap();
            assert!(check.coords_checked > 150);
            assert!(check.max_rel_err < 1e-3, "seed {}: {:?}", seed, check);
        }
    }

    fn unwrap_tensor(e: L2gError) -> crate::tensor::TensorError {
        match e {
            L2gError::Tensor(t) => t,
            other => panic!("{}", other),
        }
    }

    #[test]
    fn pooled_feature_is_the_spatial_mean() {
        let c = Tensor::full(vec![1, 6, 4, 4], 0.25f32);
        assert_eq!(slide_feature(&c).unwrap().data(), &[0.25; 6]);
        let x = Tensor::from_fn(vec![1, 2, 2, 2], |i| i as f32);
        let swapped = Tensor::new(vec![1, 2, 2, 2], vec![3.0, 1.0, 2.0, 0.0, 5.0, 7.0, 4.0, 6.0]).unwrap();
        assert_eq!(slide_feature(&x).unwrap(), slide_feature(&swapped).unwrap());
    }
}
