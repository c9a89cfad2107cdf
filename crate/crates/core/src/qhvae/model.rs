use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{QhvaeConfig, QhvaeError, Result};
use crate::codec::{SIGMA_FLOOR, SUPPORT_MAX, SUPPORT_MIN};
use crate::tensor::nn::{Conv2d, ConvCfg, ConvNeXtBlock};
use crate::tensor::{Ctx, Element, ParamStore, RngSeed, Tape, Tensor, Var};

/// Prior means are snapped to multiples of `1 / PRIOR_MEAN_GRID` when
/// coding, so `μ̂ + r` and `z - μ̂` are exact in single precision.
pub const PRIOR_MEAN_GRID: f64 = 256.0;
const MAX_PRIOR_MEAN: f64 = 16384.0;

/// Nearest integer, ties away from zero.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// `μ̂ + round(μ - μ̂)` elementwise.
pub fn quantize_latent<E: Element>(mu: &Tensor<E>, mu_hat: &Tensor<E>) -> Result<Tensor<E>> {
    if mu.shape() != mu_hat.shape() {
        return Err(QhvaeError::Config(format!("mu {:?} vs mu_hat {:?}", mu.shape(), mu_hat.shape())));
    }
    let z = mu.data().iter().zip(mu_hat.data()).map(|(&m, &p)| E::of(p.f64() + round_half_away(m.f64() - p.f64())));
    Ok(Tensor::new(mu.shape().to_vec(), z.collect())?)
}

/// Where a latent block takes its latent from.
pub enum Mode<'a> {
    /// `z = μ + u`, `u ~ U[-½, ½)`.
    Train(&'a mut ChaCha8Rng),
    /// `z = μ̂ + round(μ - μ̂)` with the residual clamped to the coder support.
    Compress,
    /// Residuals come from the callback, given the level and `σ̂`.
    Decompress(&'a mut dyn FnMut(usize, &[f64]) -> Result<Vec<i32>>),
}

pub struct LatentLevel<'t, E: Element> {
    pub level: usize,
    pub z: Var<'t, E>,
    pub mu: Option<Var<'t, E>>,
    pub mu_hat: Var<'t, E>,
    pub sigma_hat: Var<'t, E>,
    /// Integer residuals in `[B, C, H, W]` order (coding modes only).
    pub residual: Option<Vec<i32>>,
    /// Residuals moved onto the support boundary.
    pub clamped: usize,
}

pub struct Pass<'t, E: Element> {
    pub recon: Var<'t, E>,
    /// Decoding order, coarsest level first.
    pub latents: Vec<LatentLevel<'t, E>>,
    /// Decoder state after the latent block of level `l`, at index `l - 1`.
    pub states: Vec<Var<'t, E>>,
}

#[derive(Clone, Debug)]
struct EncLevel {
    down: Conv2d,
    block: ConvNeXtBlock,
}

#[derive(Clone, Debug)]
struct DecLevel {
    prior: Conv2d,
    post: Conv2d,
    zproj: Conv2d,
    block: ConvNeXtBlock,
    up: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Qhvae {
    pub cfg: QhvaeConfig,
    enc: Vec<EncLevel>,
    dec: Vec<DecLevel>,
    r: String,
}

impl Qhvae {
    pub fn new<E: Element>(cfg: &QhvaeConfig, store: &mut ParamStore<E>, seed: RngSeed) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed.derive_str("qhvae").rng();
        let (n, k) = (cfg.levels, cfg.kernel);
        let mut enc = Vec::with_capacity(n);
        for l in 1..=n {
            let cin = if l == 1 { 3 } else { cfg.widths[l - 2] };
            let w = cfg.widths[l - 1];
            enc.push(EncLevel {
                down: Conv2d::new(store, &mut rng, &format!("enc.{}.down", l), ConvCfg::new(cin, w, 2).stride(2).pad(0))?,
                block: ConvNeXtBlock::new(store, &mut rng, &format!("enc.{}.block", l), w, k)?,
            });
        }
        let r = "dec.r".to_string();
        store.init_normal(&r, vec![cfg.widths[n - 1], 1, 1], crate::tensor::nn::INIT_STD, &mut rng)?;
        let mut dec = Vec::with_capacity(n);
        for l in 1..=n {
            let (w, zc) = (cfg.widths[l - 1], cfg.latent_channels[l - 1]);
            let up_out = if l == 1 { 12 } else { 4 * cfg.widths[l - 2] };
            let p = |s: &str| format!("dec.{}.{}", l, s);
            dec.push(DecLevel {
                prior: Conv2d::new(store, &mut rng, &p("prior"), ConvCfg::new(w, 2 * zc, 1))?,
                post: Conv2d::new(store, &mut rng, &p("post"), ConvCfg::new(2 * w, zc, 1))?,
                zproj: Conv2d::new(store, &mut rng, &p("zproj"), ConvCfg::new(zc, w, 1))?,
                block: ConvNeXtBlock::new(store, &mut rng, &p("block"), w, k)?,
                up: Conv2d::new(store, &mut rng, &p("up"), ConvCfg::new(w, up_out, 1))?,
            });
        }
        Ok(Qhvae { cfg: cfg.clone(), enc, dec, r })
    }

    fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let m = 1 << self.cfg.levels;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(QhvaeError::Config(format!("extent {}x{} not divisible by 2^{}", h, w, self.cfg.levels)));
        }
        Ok(())
    }

    /// Bottom-up features `h_enc[1..=N]` of a `[B, 3, H, W]` batch in `[0, 1]`.
    pub fn encode<'t, E: Element>(&self, ctx: &Ctx<'t, '_, E>, x: Var<'t, E>) -> Result<Vec<Var<'t, E>>> {
        let (_, c, h, w) = x.value().dims4("qhvae encode")?;
        if c != 3 {
            return Err(QhvaeError::Config(format!("expected 3 input channels, got {}", c)));
        }
        self.check_extent(h, w)?;
        let mut feats = Vec::with_capacity(self.cfg.levels);
        let mut cur = x.add_scalar(-0.5);
        for lvl in &self.enc {
            cur = lvl.block.forward(ctx, lvl.down.forward(ctx, cur)?)?;
            feats.push(cur);
        }
        Ok(feats)
    }

    pub fn forward<'t, E: Element>(&self, ctx: &Ctx<'t, '_, E>, x: Var<'t, E>, mode: Mode<'_>) -> Result<Pass<'t, E>> {
        let (b, _, h, w) = x.value().dims4("qhvae forward")?;
        let enc = self.encode(ctx, x)?;
        self.decode(ctx, Some(&enc), b, h, w, mode)
    }

    /// Top-down pass. `enc` is required unless residuals come from a stream.
    pub fn decode<'t, E: Element>(
        &self,
        ctx: &Ctx<'t, '_, E>,
        enc: Option<&[Var<'t, E>]>,
        batch: usize,
        height: usize,
        width: usize,
        mut mode: Mode<'_>,
    ) -> Result<Pass<'t, E>> {
        let (states, latents, recon) = self.top_down(ctx, enc, batch, height, width, &mut mode, 1)?;
        Ok(Pass { recon: recon.expect("runs to level 1"), latents, states })
    }

    /// Decoder levels `N..=stop`; the reconstruction exists only for `stop == 1`.
    #[allow(clippy::type_complexity)]
    fn top_down<'t, E: Element>(
        &self,
        ctx: &Ctx<'t, '_, E>,
        enc: Option<&[Var<'t, E>]>,
        batch: usize,
        height: usize,
        width: usize,
        mode: &mut Mode<'_>,
        stop: usize,
    ) -> Result<(Vec<Var<'t, E>>, Vec<LatentLevel<'t, E>>, Option<Var<'t, E>>)> {
        self.check_extent(height, width)?;
        let n = self.cfg.levels;
        let top = vec![batch, self.cfg.widths[n - 1], height >> n, width >> n];
        let mut h = ctx.p(&self.r)?.reshape(vec![1, top[1], 1, 1])?.expand(top)?;
        let mut latents = Vec::with_capacity(n);
        let mut states = vec![h; n];
        let mut recon = None;
        for l in (stop..=n).rev() {
            let d = &self.dec[l - 1];
            let e = enc.map(|e| e[l - 1]);
            let lat = self.latent(ctx, l, h, e, mode)?;
            h = h.add(d.block.forward(ctx, d.zproj.forward(ctx, lat.z)?)?)?;
            states[l - 1] = h;
            latents.push(lat);
            if l == stop && l > 1 {
                break;
            }
            let up = d.up.forward(ctx, h)?.pixel_shuffle(2)?;
            if l == 1 {
                recon = Some(up.add_scalar(0.5));
            } else {
                h = up;
            }
        }
        Ok((states, latents, recon))
    }

    fn latent<'t, E: Element>(
        &self,
        ctx: &Ctx<'t, '_, E>,
        level: usize,
        h_prev: Var<'t, E>,
        h_enc: Option<Var<'t, E>>,
        mode: &mut Mode<'_>,
    ) -> Result<LatentLevel<'t, E>> {
        let d = &self.dec[level - 1];
        let zc = self.cfg.latent_channels[level - 1];
        let prior = d.prior.forward(ctx, h_prev)?;
        let mu_hat = prior.narrow(1, 0, zc)?;
        let sigma_hat = prior.narrow(1, zc, zc)?.softplus().clamp_min(SIGMA_FLOOR);
        let posterior = |h_enc: Option<Var<'t, E>>| -> Result<Var<'t, E>> {
            let e = h_enc.ok_or(QhvaeError::MissingEncoderFeatures(level))?;
            Ok(d.post.forward(ctx, Var::concat(&[h_prev, e], 1)?)?)
        };
        match mode {
            Mode::Train(rng) => {
                let mu = posterior(h_enc)?;
                // multiples of 2^-24 in [-½, ½), exact in f32
                let u = Tensor::from_fn(mu.shape(), |_| E::of((rng.random::<u32>() >> 8) as f64 / (1u32 << 24) as f64 - 0.5));
                let z = mu.add(ctx.constant(u))?;
                Ok(LatentLevel { level, z, mu: Some(mu), mu_hat, sigma_hat, residual: None, clamped: 0 })
            }
            Mode::Compress => {
                let mu = posterior(h_enc)?;
                let mh = snap_prior_mean(level, &mu_hat.value())?;
                let mut clamped = 0;
                let residual: Vec<i32> = mu
                    .value()
                    .data()
                    .iter()
                    .zip(mh.data())
                    .map(|(&m, &p)| {
                        let r = round_half_away(m.f64() - p.f64());
                        let c = r.clamp(SUPPORT_MIN as f64, SUPPORT_MAX as f64);
                        if c != r {
                            clamped += 1;
                        }
                        c as i32
                    })
                    .collect();
                let z = add_residual(&mh, &residual)?;
                Ok(LatentLevel {
                    level,
                    z: ctx.constant(z),
                    mu: Some(mu),
                    mu_hat: ctx.constant(mh),
                    sigma_hat,
                    residual: Some(residual),
                    clamped,
                })
            }
            Mode::Decompress(source) => {
                let mh = snap_prior_mean(level, &mu_hat.value())?;
                let sig: Vec<f64> = sigma_hat.value().data().iter().map(|v| v.f64()).collect();
                let residual = source(level, &sig)?;
                if residual.len() != mh.len() {
                    return Err(QhvaeError::MissingLatent(level));
                }
                let z = add_residual(&mh, &residual)?;
                Ok(LatentLevel {
                    level,
                    z: ctx.constant(z),
                    mu: None,
                    mu_hat: ctx.constant(mh),
                    sigma_hat,
                    residual: Some(residual),
                    clamped: 0,
                })
            }
        }
    }

    /// Decoder states of a batch under quantized latents, identical to what
    /// decompression of the same patches yields.
    pub fn feature_maps(&self, store: &ParamStore<f32>, x: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let pass = self.forward(&ctx, tape.constant(x.clone()), Mode::Compress)?;
        Ok(pass.states.iter().map(|s| s.value()).collect())
    }

    /// Decoder state at the configured feature level under quantized
    /// latents; the finer decoder levels are skipped.
    pub fn feature_map(&self, store: &ParamStore<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (b, _, h, w) = x.dims4("qhvae features")?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let enc = self.encode(&ctx, tape.constant(x.clone()))?;
        let fl = self.cfg.feature_level;
        let (states, _, _) = self.top_down(&ctx, Some(&enc), b, h, w, &mut Mode::Compress, fl)?;
        Ok(states[fl - 1].value())
    }

    /// Mean-pooled decoder state at the configured feature level, `[B, C]`.
    pub fn pooled_features(&self, store: &ParamStore<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(pool(&self.feature_map(store, x)?)?)
    }
}

pub fn pool(map: &Tensor<f32>) -> crate::tensor::Result<Tensor<f32>> {
    let (b, c, h, w) = map.dims4("pool")?;
    let hw = (h * w) as f64;
    let data = map.data().chunks(h * w).map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw) as f32).collect();
    Tensor::new(vec![b, c], data)
}

fn snap_prior_mean<E: Element>(level: usize, mu_hat: &Tensor<E>) -> Result<Tensor<E>> {
    let mut out = Vec::with_capacity(mu_hat.len());
    for &v in mu_hat.data() {
        let v = v.f64();
        if !v.is_finite() || v.abs() > MAX_PRIOR_MEAN {
            return Err(QhvaeError::NonFinite { level: Some(level), detail: format!("prior mean {}", v) });
        }
        out.push(E::of((v * PRIOR_MEAN_GRID).round() / PRIOR_MEAN_GRID));
    }
    Ok(Tensor::new(mu_hat.shape().to_vec(), out)?)
}

fn add_residual<E: Element>(mu_hat: &Tensor<E>, r: &[i32]) -> Result<Tensor<E>> {
    let z = mu_hat.data().iter().zip(r).map(|(&p, &r)| E::of(p.f64() + r as f64)).collect();
    Ok(Tensor::new(mu_hat.shape().to_vec(), z)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn patch(seed: u64, b: usize, size: usize) -> Tensor<f32> {
        let mut rng = RngSeed(seed).rng();
        Tensor::from_fn(vec![b, 3, size, size], |_| rng.random::<f32>())
    }

    #[test]
    fn encoder_extents_halve() {
        let cfg = QhvaeConfig::default();
        let mut store = ParamStore::<f32>::new();
        let m = Qhvae::new(&cfg, &mut store, RngSeed(0)).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let feats = m.encode(&ctx, tape.constant(patch(1, 1, 64))).unwrap();
        let ext: Vec<_> = feats.iter().map(|f| f.shape()[2]).collect();
        assert_eq!(ext, vec![32, 16, 8]);
        assert!(m.encode(&ctx, tape.constant(patch(1, 1, 60))).is_err());
    }

    #[test]
    fn identical_patches_give_identical_features() {
        let cfg = QhvaeConfig::tiny();
        let mut store = ParamStore::<f32>::new();
        let m = Qhvae::new(&cfg, &mut store, RngSeed(3)).unwrap();
        let p = patch(5, 1, 16);
        let both = Tensor::stack_batch(&[p.clone(), p]).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        for f in m.encode(&ctx, tape.constant(both)).unwrap() {
            let v = f.value();
            assert_eq!(v.batch_item(0).unwrap(), v.batch_item(1).unwrap());
        }
    }

    #[test]
    fn early_exit_features_match_the_full_pass() {
        let cfg = QhvaeConfig { input_size: 32, ..QhvaeConfig::default() };
        let mut store = ParamStore::<f32>::new();
        let m = Qhvae::new(&cfg, &mut store, RngSeed(4)).unwrap();
        let x = patch(8, 2, 32);
        let full = m.feature_maps(&store, &x).unwrap();
        assert_eq!(m.feature_map(&store, &x).unwrap(), full[2]);
        let m2 = Qhvae { cfg: QhvaeConfig { feature_level: 2, ..cfg.clone() }, ..m.clone() };
        assert_eq!(m2.feature_map(&store, &x).unwrap(), full[1]);
        assert_eq!(m.pooled_features(&store, &x).unwrap().shape(), &[2, 96]);
    }

    #[test]
    fn train_noise_stays_in_half_open_unit_interval() {
        let cfg = QhvaeConfig::tiny();
        let mut store = ParamStore::<f64>::new();
        let m = Qhvae::new(&cfg, &mut store, RngSeed(3)).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let mut rng = RngSeed(9).rng();
        let x = tape.constant(patch(2, 2, 16).cast());
        let pass = m.forward(&ctx, x, Mode::Train(&mut rng)).unwrap();
        for lat in &pass.latents {
            let (z, mu) = (lat.z.value(), lat.mu.unwrap().value());
            for (a, b) in z.data().iter().zip(mu.data()) {
                let u = a - b;
                assert!((-0.5..0.5).contains(&u), "{}", u);
            }
            assert!(lat.sigma_hat.value().data().iter().all(|&s| s >= SIGMA_FLOOR));
        }
    }

    #[test]
    fn compress_mode_residuals_are_integers() {
        let cfg = QhvaeConfig::tiny();
        let mut store = ParamStore::<f32>::new();
        let m = Qhvae::new(&cfg, &mut store, RngSeed(4)).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let pass = m.forward(&ctx, tape.constant(patch(8, 1, 16)), Mode::Compress).unwrap();
        assert_eq!(pass.latents.len(), 2);
        assert_eq!(pass.latents[0].level, 2);
        for lat in &pass.latents {
            let (z, mh, mu) = (lat.z.value(), lat.mu_hat.value(), lat.mu.unwrap().value());
            for ((&z, &p), &m) in z.data().iter().zip(mh.data()).zip(mu.data()) {
                let d = z - p;
                assert_eq!(d, d.round());
                assert!((z - m).abs() <= 0.5 + 1e-6);
            }
        }
        assert_eq!(pass.recon.shape(), vec![1, 3, 16, 16]);
    }

    #[test]
    fn missing_inputs_are_reported() {
        let cfg = QhvaeConfig::tiny();
        let mut store = ParamStore::<f32>::new();
        let m = Qhvae::new(&cfg, &mut store, RngSeed(4)).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        assert!(matches!(m.decode(&ctx, None, 1, 16, 16, Mode::Compress), Err(QhvaeError::MissingEncoderFeatures(2))));
        let mut short = |_: usize, _: &[f64]| Ok(vec![0; 3]);
        assert!(matches!(m.decode(&ctx, None, 1, 16, 16, Mode::Decompress(&mut short)), Err(QhvaeError::MissingLatent(2))));
    }

    #[test]
    fn quantize_latent_examples() {
        let t = |v: Vec<f64>| Tensor::new(vec![v.len()], v).unwrap();
        let z = quantize_latent(&t(vec![1.9, 0.25, 0.7499, 0.75, -0.25]), &t(vec![0.25; 5])).unwrap();
        assert_eq!(z.data(), &[2.25, 0.25, 0.25, 1.25, -0.75]);
        // ties resolve away from zero on both sides
        assert_eq!(round_half_away(0.5), 1.0);
        assert_eq!(round_half_away(-0.5), -1.0);
        assert_eq!(round_half_away(2.5), 3.0);
        assert!(quantize_latent(&t(vec![1.0]), &t(vec![1.0, 2.0])).is_err());
    }
}
