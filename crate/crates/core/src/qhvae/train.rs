use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::model::{Mode, Qhvae};
use super::{QhvaeConfig, QhvaeError, Result};
use crate::tensor::optim::Adam;
use crate::tensor::{Ctx, Element, ParamStore, RngSeed, Tape, Tensor, Var};

/// `rate + λ·Σ(recon - target)²`.
pub fn rd_loss<'t, E: Element>(
    recon: Var<'t, E>,
    target: Var<'t, E>,
    total_rate_bits: Var<'t, E>,
    lambda: f64,
) -> Result<Var<'t, E>> {
    let sse = recon.sub(target)?.square().sum();
    Ok(total_rate_bits.add(sse.scale(lambda))?)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub struct LossParts<'t, E: Element> {
    pub loss: Var<'t, E>,
    pub level_rates: Vec<(usize, Var<'t, E>)>,
    pub sse: Var<'t, E>,
}

pub fn train_loss<'t, E: Element>(
    model: &Qhvae,
    ctx: &Ctx<'t, '_, E>,
    x: Var<'t, E>,
    rng: &mut ChaCha8Rng,
) -> Result<LossParts<'t, E>> {
    let pass = model.forward(ctx, x, Mode::Train(rng))?;
    let mut level_rates = Vec::with_capacity(pass.latents.len());
    let mut total: Option<Var<'t, E>> = None;
    for lat in &pass.latents {
        let r = lat.z.gaussian_bin_rate(lat.mu_hat, lat.sigma_hat)?.sum();
        level_rates.push((lat.level, r));
        total = Some(match total {
            Some(t) => t.add(r)?,
            None => r,
        });
    }
    let total = total.expect("at least one level");
    let sse = pass.recon.sub(x)?.square().sum();
    let loss = rd_loss(pass.recon, x, total, model.cfg.lambda)?;
    Ok(LossParts { loss, level_rates, sse })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainMetrics {
    pub step: u64,
    pub loss: f64,
    pub rate_bits: f64,
    pub rate_bpp: f64,
    pub mse: f64,
    pub psnr: f64,
}

/// Model, weights, optimizer and noise stream for rate-distortion training.
pub struct QhvaeTrainer {
    pub model: Qhvae,
    pub store: ParamStore<f32>,
    pub opt: Adam,
    rng: ChaCha8Rng,
}

impl QhvaeTrainer {
    pub fn new(cfg: &QhvaeConfig, seed: RngSeed, lr: f64) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = Qhvae::new(cfg, &mut store, seed)?;
        Ok(QhvaeTrainer { model, store, opt: Adam::new(lr).with_clip(1e4), rng: seed.derive_str("qhvae-noise").rng() })
    }

    pub fn from_parts(model: Qhvae, store: ParamStore<f32>, seed: RngSeed, lr: f64) -> Self {
        QhvaeTrainer { model, store, opt: Adam::new(lr).with_clip(1e4), rng: seed.derive_str("qhvae-noise").rng() }
    }

    /// One Adam update on a `[B, 3, H, W]` batch.
    pub fn step(&mut self, batch: &Tensor<f32>) -> Result<TrainMetrics> {
        let (b, _, h, w) = batch.dims4("qhvae train")?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store);
        let parts = train_loss(&self.model, &ctx, tape.constant(batch.clone()), &mut self.rng)?;
        let loss = parts.loss.value().item().f64();
        let sse = parts.sse.value().item().f64();
        let mut rate = 0.0;
        for (level, r) in &parts.level_rates {
            let v = r.value().item().f64();
            if !v.is_finite() {
                return Err(QhvaeError::NonFinite { level: Some(*level), detail: format!("rate {}", v) });
            }
            rate += v;
        }
        if !loss.is_finite() {
            return Err(QhvaeError::NonFinite { level: None, detail: format!("loss {}, distortion {}", loss, sse) });
        }
        let grads = tape.backward(parts.loss)?;
        self.opt.step(&mut self.store, &grads)?;
        let pixels = (b * h * w) as f64;
        let mse = sse / (pixels * 3.0);
        Ok(TrainMetrics { step: self.opt.steps(), loss, rate_bits: rate, rate_bpp: rate / pixels, mse, psnr: psnr_from_mse(mse) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_param_gradients;
    use rand::Rng;

    #[test]
    fn loss_decomposes() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let y = tape.leaf(Tensor::new(vec![4], vec![0.1, 0.0, 0.3, 0.7]).unwrap());
        let rate = tape.constant(Tensor::scalar(12.5));
        assert_eq!(rd_loss(x, x, rate, 2048.0).unwrap().value().item(), 12.5);
        let sse = 0.04 + 0.09;
        let l1 = rd_loss(y, x, rate, 10.0).unwrap().value().item();
        let l2 = rd_loss(y, x, rate, 20.0).unwrap().value().item();
        assert!((l1 - (12.5 + 10.0 * sse)).abs() < 1e-12);
        assert!(((l2 - 12.5) - 2.0 * (l1 - 12.5)).abs() < 1e-12);
        let l0 = rd_loss(y, x, rate, 0.0).unwrap();
        assert_eq!(l0.value().item(), 12.5);
        let g = tape.backward(l0).unwrap().of(y);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn psnr_of_known_mse() {
        assert!((psnr_from_mse(1e-3) - 30.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(0.0), f64::INFINITY);
    }

    fn tiny_gradcheck(seed: u64) -> f64 {
        let cfg = QhvaeConfig::tiny();
        let mut store32 = ParamStore::<f32>::new();
        let model = Qhvae::new(&cfg, &mut store32, RngSeed(seed)).unwrap();
        // larger weights than the init so every path carries signal
        let mut store = store32.cast::<f64>();
        let mut rng = RngSeed(seed + 100).rng();
        let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
        for n in names {
            let old = store.get(&n).unwrap().clone();
            let bias = n.ends_with(".b");
            let v = Tensor::from_fn(old.shape().to_vec(), |i| old.data()[i] * 8.0 + if bias { rng.random_range(-0.1..0.1) } else { 0.0 });
            store.set(&n, v).unwrap();
        }
        let mut prng = RngSeed(seed + 7).rng();
        let x = Tensor::from_fn(vec![1, 3, 16, 16], |_| prng.random::<f64>());
        let check = check_param_gradients(&store, 1e-5, 6, |ctx| {
            let mut noise = RngSeed(seed + 9).rng();
            Ok(train_loss(&model, ctx, ctx.constant(x.clone()), &mut noise).map_err(|e| match e {
                QhvaeError::Tensor(t) => t,
                other => panic!("{}", other),
            })?.loss)
        })
        .unwrap();
        assert!(check.coords_checked > 100);
        check.max_rel_err
    }

    #[test]
    fn rd_loss_gradients_match_finite_differences() {
        for seed in 0..3 {
            let err = tiny_gradcheck(seed);
            assert!(err < 1e-3, "seed {}: {}", seed, err);
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let cfg = QhvaeConfig { input_size: 16, lambda: 1024.0, ..QhvaeConfig::tiny() };
        let mut rng = RngSeed(0).rng();
        let x = Tensor::from_fn(vec![1, 3, 16, 16], |i| (0.5 + 0.3 * ((i % 16) as f32 * 0.4).sin()) + 0.05 * rng.random::<f32>());
        let run = || {
            let mut t = QhvaeTrainer::new(&cfg, RngSeed(1), 3e-3).unwrap();
            (0..60).map(|_| t.step(&x).unwrap().loss).collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a[59] < 0.5 * a[0], "{} -> {}", a[0], a[59]);
    }
}
