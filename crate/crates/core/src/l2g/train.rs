use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::model::{hierarchical_l1_loss, slide_feature, L2g, LocalFeatures};
use super::{make_views, targets, L2gConfig, L2gError, Result};
use crate::qhvae::{psnr_from_mse, Qhvae};
use crate::tensor::optim::Adam;
use crate::tensor::{Ctx, ParamStore, RngSeed, Tape, Tensor};

/// Everything a training step needs for one patch; the codec features are
/// computed once because the codec is frozen.
#[derive(Clone, Debug)]
pub struct PreparedPatch {
    pub distant: Tensor<f32>,
    pub locals: LocalFeatures,
    pub targets: Vec<Tensor<f32>>,
}

impl PreparedPatch {
    pub fn new(patch: &Tensor<f32>, cfg: &L2gConfig, qhvae: &Qhvae, qstore: &ParamStore<f32>) -> Result<Self> {
        let t = targets(patch, cfg)?;
        let v = make_views(patch)?;
        let locals = LocalFeatures::encode(qhvae, qstore, &v.tiles)?;
        let s = cfg.tile();
        Ok(PreparedPatch { distant: v.distant.reshape(vec![1, 3, s, s])?, locals, targets: t })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct L2gMetrics {
    pub step: u64,
    pub loss: f64,
    pub per_scale: Vec<f64>,
}

pub struct L2gTrainer {
    pub model: L2g,
    pub store: ParamStore<f32>,
    pub opt: Adam,
    rng: ChaCha8Rng,
}

impl L2gTrainer {
    pub fn new(model: L2g, store: ParamStore<f32>, seed: RngSeed, lr: f64) -> Self {
        L2gTrainer { model, store, opt: Adam::new(lr).with_clip(10.0), rng: seed.derive_str("l2g-order").rng() }
    }

    pub fn step(&mut self, p: &PreparedPatch) -> Result<L2gMetrics> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store);
        let f = self.model.forward(&ctx, tape.constant(p.distant.clone()), &p.locals.0)?;
        let tv: Vec<_> = p.targets.iter().map(|t| tape.constant(t.clone())).collect();
        let (loss, per) = hierarchical_l1_loss(&f.recons, &tv)?;
        let per_scale: Vec<f64> = per.iter().map(|v| v.value().item() as f64).collect();
        let l = loss.value().item() as f64;
        if !l.is_finite() {
            return Err(L2gError::NonFinite { step: self.opt.steps() + 1, per_scale });
        }
        let grads = tape.backward(loss)?;
        self.opt.step(&mut self.store, &grads)?;
        Ok(L2gMetrics { step: self.opt.steps(), loss: l, per_scale })
    }

    /// `steps` updates cycling through `data` in a seeded order per epoch.
    pub fn fit(&mut self, data: &[PreparedPatch], steps: usize, mut on_step: impl FnMut(&L2gMetrics)) -> Result<Vec<L2gMetrics>> {
        if data.is_empty() {
            return Err(L2gError::Config("no training patches".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut out = Vec::with_capacity(steps);
        for s in 0..steps {
            if s % data.len() == 0 {
                order.shuffle(&mut self.rng);
            }
            let m = self.step(&data[order[s % data.len()]])?;
            on_step(&m);
            out.push(m);
        }
        Ok(out)
    }
}

/// Reconstructions and fused features of one prepared patch.
pub struct Inference {
    pub recons: Vec<Tensor<f32>>,
    pub z_f: Tensor<f32>,
}

impl L2g {
    /// Inference pass; `use_local = false` zeroes the close-up branch.
    pub fn infer(&self, store: &ParamStore<f32>, p: &PreparedPatch, use_local: bool) -> Result<Inference> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let locals = if use_local { p.locals.clone() } else { p.locals.zeros_like() };
        let f = self.forward(&ctx, tape.constant(p.distant.clone()), &locals.0)?;
        Ok(Inference { recons: f.recons.iter().map(|r| r.value()).collect(), z_f: f.z_f.value() })
    }

    /// Full-resolution PSNR with the output clipped to `[0, 1]`.
    pub fn psnr(&self, store: &ParamStore<f32>, p: &PreparedPatch, use_local: bool) -> Result<f64> {
        let inf = self.infer(store, p, use_local)?;
        let (r, t) = (inf.recons.last().expect("four scales"), p.targets.last().expect("four scales"));
        let mse = r.data().iter().zip(t.data()).map(|(&a, &b)| (a.clamp(0.0, 1.0) as f64 - b as f64).powi(2)).sum::<f64>() / r.len() as f64;
        Ok(psnr_from_mse(mse))
    }

    /// Pooled fused feature of one patch.
    pub fn patch_feature(&self, store: &ParamStore<f32>, p: &PreparedPatch) -> Result<Vec<f32>> {
        Ok(slide_feature(&self.infer(store, p, true)?.z_f)?.into_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synth::texture_patch;
    use crate::qhvae::QhvaeConfig;

    fn tiny_setup(seed: u64) -> (Qhvae, ParamStore<f32>, L2gTrainer, L2gConfig) {
        let qcfg = QhvaeConfig { levels: 3, widths: vec![4, 6, 8], latent_channels: vec![2, 2, 3], feature_level: 3, ..QhvaeConfig::tiny() };
        let mut qstore = ParamStore::new();
        let q = Qhvae::new(&qcfg, &mut qstore, RngSeed(seed)).unwrap();
        let cfg = L2gConfig { i3: 64, window: 8, ..L2gConfig::tiny() };
        let mut store = ParamStore::new();
        let m = L2g::new(&cfg, &qcfg, &mut store, RngSeed(seed)).unwrap();
        (q, qstore, L2gTrainer::new(m, store, RngSeed(seed), 3e-3), cfg)
    }

    #[test]
    fn training_leaves_the_codec_untouched_and_is_deterministic() {
        let run = || {
            let (q, qstore, mut t, cfg) = tiny_setup(4);
            let before = qstore.weight_hash();
            let p = PreparedPatch::new(&texture_patch(RngSeed(1), 64, true), &cfg, &q, &qstore).unwrap();
            let losses: Vec<f64> = t.fit(&[p], 100, |_| {}).unwrap().iter().map(|m| m.loss).collect();
            assert_eq!(before, qstore.weight_hash());
            (losses, t.store.weight_hash())
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        // ten-step means fall monotonically over the first hundred steps
        let means: Vec<f64> = a.chunks(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
        for w in means.windows(2) {
            assert!(w[1] < w[0], "{:?}", means);
        }
    }

    #[test]
    fn local_branch_can_be_switched_off() {
        let (q, qstore, t, cfg) = tiny_setup(5);
        let p = PreparedPatch::new(&texture_patch(RngSeed(2), 64, false), &cfg, &q, &qstore).unwrap();
        let on = t.model.infer(&t.store, &p, true).unwrap();
        let off = t.model.infer(&t.store, &p, false).unwrap();
        assert_eq!(on.z_f.shape(), off.z_f.shape());
        assert_ne!(on.z_f, off.z_f);
        assert_eq!(t.model.patch_feature(&t.store, &p).unwrap().len(), cfg.global_widths[1]);
    }
}
