use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Result, SamplerError};
use crate::tensor::nn::Linear;
use crate::tensor::optim::Adam;
use crate::tensor::{Ctx, Element, ParamStore, RngSeed, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Attention,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MilConfig {
    pub hidden: usize,
    pub attn_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub pooling: Pooling,
}

impl Default for MilConfig {
    fn default() -> Self {
        MilConfig { hidden: 32, attn_dim: 16, epochs: 40, lr: 2e-3, pooling: Pooling::Attention }
    }
}

/// Instances `[K, D]` of one slide with its label.
#[derive(Clone, Debug)]
pub struct Bag {
    pub features: Tensor<f32>,
    pub label: bool,
}

/// `wᵀ[tanh(V₁h) ⊙ σ(V₂h)]` per instance, softmax over instances.
#[derive(Clone, Debug)]
pub struct GatedAttention {
    pub v1: String,
    pub v2: String,
    pub w: String,
}

impl GatedAttention {
    pub fn new<E: Element>(store: &mut ParamStore<E>, rng: &mut impl Rng, name: &str, dim: usize, attn_dim: usize) -> crate::tensor::Result<Self> {
        let (v1, v2, w) = (format!("{}.v1", name), format!("{}.v2", name), format!("{}.w", name));
        let std = (1.0 / dim as f64).sqrt();
        store.init_normal(&v1, vec![attn_dim, dim], std, rng)?;
        store.init_normal(&v2, vec![attn_dim, dim], std, rng)?;
        store.init_normal(&w, vec![1, attn_dim], (1.0 / attn_dim as f64).sqrt(), rng)?;
        Ok(GatedAttention { v1, v2, w })
    }

    /// Unnormalized scores `[K]` of instances `[K, dim]`.
    pub fn logits<'t, E: Element>(&self, ctx: &Ctx<'t, '_, E>, h: Var<'t, E>) -> crate::tensor::Result<Var<'t, E>> {
        let k = h.shape()[0];
        let a = h.matmul_nt(ctx.p(&self.v1)?)?.tanh();
        let g = h.matmul_nt(ctx.p(&self.v2)?)?.sigmoid();
        a.mul(g)?.matmul_nt(ctx.p(&self.w)?)?.reshape(vec![k])
    }

    pub fn forward<'t, E: Element>(&self, ctx: &Ctx<'t, '_, E>, h: Var<'t, E>) -> crate::tensor::Result<Var<'t, E>> {
        self.logits(ctx, h)?.softmax(0)
    }
}

/// Softmax attention of a gated-attention layer over `features` `[K, D]`.
pub fn gated_attention_scores<E: Element>(layer: &GatedAttention, store: &ParamStore<E>, features: &Tensor<E>) -> Result<Vec<f64>> {
    if !features.all_finite() {
        return Err(SamplerError::Invalid("non-finite features".into()));
    }
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store);
    let a = layer.forward(&ctx, tape.constant(features.clone()))?;
    Ok(a.value().data().iter().map(|v| v.f64()).collect())
}

/// Instance embedding, gated-attention (or mean) pooling and a logistic head.
#[derive(Clone, Debug)]
pub struct MilModel {
    pub cfg: MilConfig,
    pub store: ParamStore<f32>,
    embed: Linear,
    pub attn: GatedAttention,
    head: Linear,
}

const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

impl MilModel {
    pub fn new(cfg: &MilConfig, dim: usize, seed: RngSeed) -> Result<Self> {
        if cfg.hidden == 0 || cfg.attn_dim == 0 || dim == 0 {
            return Err(SamplerError::Invalid("MIL dimensions must be positive".into()));
        }
        let mut rng = seed.derive_str("mil").rng();
        let mut store = ParamStore::new();
        store.init_const(NORM_MEAN, vec![dim], 0.0)?;
        store.init_const(NORM_STD, vec![dim], 1.0)?;
        store.set_trainable("norm.", false);
        let embed = Linear::new(&mut store, &mut rng, "embed", dim, cfg.hidden)?;
        // wider init than the conv default so the small heads start with signal
        let std = (1.0 / dim as f64).sqrt();
        store.set("embed.w", Tensor::from_fn(vec![cfg.hidden, dim], |_| crate::tensor::rng::trunc_normal(&mut rng, std) as f32))?;
        let attn = GatedAttention::new(&mut store, &mut rng, "attn", cfg.hidden, cfg.attn_dim)?;
        let head = Linear::new(&mut store, &mut rng, "head", cfg.hidden, 1)?;
        Ok(MilModel { cfg: cfg.clone(), store, embed, attn, head })
    }

    pub fn dim(&self) -> usize {
        self.store.get(NORM_MEAN).map(|t| t.len()).unwrap_or(0)
    }

    fn standardize(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let d = self.dim();
        if x.shape().len() != 2 || x.shape()[1] != d || x.shape()[0] == 0 {
            return Err(SamplerError::Invalid(format!("bag must be [K>0, {}], got {:?}", d, x.shape())));
        }
        let (m, s) = (self.store.get(NORM_MEAN)?, self.store.get(NORM_STD)?);
        Ok(Tensor::from_fn(x.shape().to_vec(), |i| (x.data()[i] - m.data()[i % d]) / s.data()[i % d]))
    }

    /// Bag logit and instance attention.
    fn forward<'t>(&self, ctx: &Ctx<'t, '_, f32>, x: Var<'t, f32>) -> Result<(Var<'t, f32>, Var<'t, f32>)> {
        let k = x.shape()[0];
        let e = self.embed.forward(ctx, x)?.relu();
        let a = match self.cfg.pooling {
            Pooling::Attention => self.attn.forward(ctx, e)?,
            Pooling::Mean => ctx.constant(Tensor::full(vec![k], 1.0 / k as f32)),
        };
        let pooled = a.reshape(vec![1, k])?.matmul(e)?;
        let logit = self.head.forward(ctx, pooled)?.reshape(Vec::<usize>::new())?;
        Ok((logit, a))
    }

    /// `(P(positive), attention over instances)`.
    pub fn predict(&self, features: &Tensor<f32>) -> Result<(f64, Vec<f64>)> {
        let x = self.standardize(features)?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store);
        let (logit, a) = self.forward(&ctx, tape.constant(x))?;
        let l = logit.value().item() as f64;
        Ok((1.0 / (1.0 + (-l).exp()), a.value().data().iter().map(|&v| v as f64).collect()))
    }

    /// Gated-attention scores regardless of the pooling used for training.
    pub fn attention(&self, features: &Tensor<f32>) -> Result<Vec<f64>> {
        let x = self.standardize(features)?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store);
        let e = self.embed.forward(&ctx, tape.constant(x))?.relu();
        Ok(self.attn.forward(&ctx, e)?.value().data().iter().map(|&v| v as f64).collect())
    }

    /// Seeded training with per-bag Adam steps on the logistic loss.
    pub fn train(bags: &[Bag], cfg: &MilConfig, seed: RngSeed) -> Result<Self> {
        let positives = bags.iter().filter(|b| b.label).count();
        let negatives = bags.len() - positives;
        if positives == 0 || negatives == 0 {
            return Err(SamplerError::SingleClass { positives, negatives });
        }
        let d = bags[0].features.shape().get(1).copied().unwrap_or(0);
        let mut model = MilModel::new(cfg, d, seed)?;
        // column statistics over every instance
        let (mut sum, mut sq, mut n) = (vec![0f64; d], vec![0f64; d], 0usize);
        for b in bags {
            if b.features.shape().len() != 2 || b.features.shape()[1] != d || b.features.shape()[0] == 0 {
                return Err(SamplerError::Invalid(format!("bag shape {:?}, expected [K>0, {}]", b.features.shape(), d)));
            }
            for row in b.features.data().chunks(d) {
                for j in 0..d {
                    sum[j] += row[j] as f64;
                    sq[j] += (row[j] as f64).powi(2);
                }
                n += 1;
            }
        }
        let mean: Vec<f32> = sum.iter().map(|s| (s / n as f64) as f32).collect();
        let std: Vec<f32> = (0..d).map(|j| ((sq[j] / n as f64 - (sum[j] / n as f64).powi(2)).max(0.0).sqrt().max(1e-6)) as f32).collect();
        model.store.set(NORM_MEAN, Tensor::new(vec![d], mean)?)?;
        model.store.set(NORM_STD, Tensor::new(vec![d], std)?)?;
        let xs: Vec<Tensor<f32>> = bags.iter().map(|b| model.standardize(&b.features)).collect::<Result<_>>()?;
        let mut opt = Adam::new(cfg.lr);
        let mut rng = seed.derive_str("mil-order").rng();
        let mut order: Vec<usize> = (0..bags.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &model.store);
                let (logit, _) = model.forward(&ctx, tape.constant(xs[i].clone()))?;
                let y = if bags[i].label { 1.0 } else { 0.0 };
                let loss = logit.softplus().add(logit.scale(-y))?;
                let grads = tape.backward(loss)?;
                opt.step(&mut model.store, &grads)?;
            }
        }
        Ok(model)
    }

    /// Rebuilds the layer layout for a stored parameter set.
    pub fn from_store(cfg: &MilConfig, store: ParamStore<f32>) -> Result<Self> {
        let d = store.get(NORM_MEAN)?.len();
        let mut fresh = MilModel::new(cfg, d, RngSeed(0))?;
        let names: Vec<String> = fresh.store.iter().map(|p| p.name.clone()).collect();
        for n in names {
            fresh.store.set(&n, store.get(&n)?.clone())?;
        }
        Ok(fresh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_param_gradients;
    use rand_distr::{Distribution, Normal};

    fn set(store: &mut ParamStore<f64>, name: &str, shape: Vec<usize>, v: Vec<f64>) {
        store.set(name, Tensor::new(shape, v).unwrap()).unwrap();
    }

    #[test]
    fn hand_evaluated_two_patch_case() {
        let mut store = ParamStore::<f64>::new();
        let layer = GatedAttention::new(&mut store, &mut RngSeed(0).rng(), "a", 1, 1).unwrap();
        set(&mut store, "a.v1", vec![1, 1], vec![1.0]);
        set(&mut store, "a.v2", vec![1, 1], vec![50.0]);
        set(&mut store, "a.w", vec![1, 1], vec![1.0]);
        let h = Tensor::new(vec![2, 1], vec![0.3, -0.8]).unwrap();
        let got = gated_attention_scores(&layer, &store, &h).unwrap();
        let l: Vec<f64> = [0.3f64, -0.8].iter().map(|&x| x.tanh() / (1.0 + (-50.0 * x).exp())).collect();
        let z = l[0].exp() + l[1].exp();
        assert!((got[0] - l[0].exp() / z).abs() < 1e-6);
        assert!((got[1] - l[1].exp() / z).abs() < 1e-6);
    }

    #[test]
    fn identical_instances_get_uniform_attention() {
        let mut store = ParamStore::<f64>::new();
        let layer = GatedAttention::new(&mut store, &mut RngSeed(1).rng(), "a", 4, 3).unwrap();
        let h = Tensor::from_fn(vec![5, 4], |i| (i % 4) as f64 * 0.3);
        let a = gated_attention_scores(&layer, &store, &h).unwrap();
        assert!(a.iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn scaling_w_keeps_ranking() {
        let mut store = ParamStore::<f64>::new();
        let layer = GatedAttention::new(&mut store, &mut RngSeed(2).rng(), "a", 3, 4).unwrap();
        let h = Tensor::from_fn(vec![6, 3], |i| ((i * 7) % 5) as f64 - 2.0);
        let a = gated_attention_scores(&layer, &store, &h).unwrap();
        let w = store.get("a.w").unwrap().map(|v| v * 3.0);
        store.set("a.w", w).unwrap();
        let b = gated_attention_scores(&layer, &store, &h).unwrap();
        let rank = |v: &[f64]| {
            let mut i: Vec<usize> = (0..v.len()).collect();
            i.sort_by(|&x, &y| v[y].total_cmp(&v[x]));
            i
        };
        assert_eq!(rank(&a), rank(&b));
        assert!(b.iter().cloned().fold(0.0, f64::max) >= a.iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut store = ParamStore::<f64>::new();
            let layer = GatedAttention::new(&mut store, &mut RngSeed(seed).rng(), "a", 5, 4).unwrap();
            let h = Tensor::from_fn(vec![7, 5], |i| ((i * 13 + seed as usize) % 11) as f64 / 5.0 - 1.0);
            let probe = Tensor::from_fn(vec![7], |i| i as f64 - 3.0);
            let check = check_param_gradients(&store, 1e-5, 32, |ctx| {
                layer.forward(ctx, ctx.constant(h.clone()))?.mul(ctx.constant(probe.clone()))
            })
            .unwrap();
            assert!(check.max_rel_err < 1e-3, "{:?}", check);
        }
    }

    fn blob_bags(seed: u64, n: usize) -> Vec<Bag> {
        let mut rng = RngSeed(seed).rng();
        let noise = Normal::new(0.0, 0.3).unwrap();
        (0..n)
            .map(|i| {
                let label = i % 2 == 0;
                let k = 6 + i % 5;
                let hot = if label { rng.random_range(0..k) } else { usize::MAX };
                let data = (0..k * 4)
                    .map(|j| {
                        let base = if j / 4 == hot && j % 4 == 0 { 3.0 } else { 0.0 };
                        base + noise.sample(&mut rng) as f32
                    })
                    .collect();
                Bag { features: Tensor::new(vec![k, 4], data).unwrap(), label }
            })
            .collect()
    }

    #[test]
    fn separable_bags_are_learned_and_attention_finds_the_witness() {
        let train = blob_bags(1, 40);
        let m = MilModel::train(&train, &MilConfig::default(), RngSeed(3)).unwrap();
        let test = blob_bags(2, 20);
        let mut correct = 0;
        for b in &test {
            let (p, a) = m.predict(&b.features).unwrap();
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            correct += ((p > 0.5) == b.label) as usize;
            if b.label {
                let hot = (0..b.features.shape()[0]).find(|&r| b.features.data()[r * 4] > 1.5).unwrap();
                let best = (0..a.len()).max_by(|&x, &y| a[x].total_cmp(&a[y])).unwrap();
                assert_eq!(best, hot);
            }
        }
        assert_eq!(correct, test.len());
    }

    #[test]
    fn permutation_and_singleton() {
        let train = blob_bags(5, 20);
        let m = MilModel::train(&train, &MilConfig { epochs: 5, ..MilConfig::default() }, RngSeed(0)).unwrap();
        let b = &train[0].features;
        let k = b.shape()[0];
        let perm: Vec<usize> = (0..k).rev().collect();
        let pb = Tensor::from_fn(b.shape().to_vec(), |i| b.data()[perm[i / 4] * 4 + i % 4]);
        let (p1, a1) = m.predict(b).unwrap();
        let (p2, a2) = m.predict(&pb).unwrap();
        assert!((p1 - p2).abs() < 1e-6);
        for i in 0..k {
            assert!((a1[perm[i]] - a2[i]).abs() < 1e-6);
        }
        let one = Tensor::new(vec![1, 4], b.data()[..4].to_vec()).unwrap();
        assert_eq!(m.predict(&one).unwrap().1, vec![1.0]);
    }

    #[test]
    fn single_class_is_rejected_and_training_is_deterministic() {
        let mut bags = blob_bags(3, 6);
        let cfg = MilConfig { epochs: 3, ..MilConfig::default() };
        let a = MilModel::train(&bags, &cfg, RngSeed(9)).unwrap();
        let b = MilModel::train(&bags, &cfg, RngSeed(9)).unwrap();
        assert_eq!(a.store.weight_hash(), b.store.weight_hash());
        for bag in &mut bags {
            bag.label = true;
        }
        assert!(matches!(MilModel::train(&bags, &cfg, RngSeed(9)), Err(SamplerError::SingleClass { .. })));
    }

    #[test]
    fn mean_pooling_weights_instances_equally() {
        let bags = blob_bags(4, 10);
        let m = MilModel::train(&bags, &MilConfig { epochs: 2, pooling: Pooling::Mean, ..MilConfig::default() }, RngSeed(1)).unwrap();
        let (_, a) = m.predict(&bags[1].features).unwrap();
        let k = a.len() as f64;
        assert!(a.iter().all(|&v| (v - 1.0 / k).abs() < 1e-7));
    }
}
