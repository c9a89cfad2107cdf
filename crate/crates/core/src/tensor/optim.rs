use super::{Element, Gradients, ParamStore, Result, TensorError};

/// Adam with bias correction and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None, t: 0 }
    }

    pub fn with_clip(mut self, max_norm: f64) -> Self {
        self.clip_norm = Some(max_norm);
        self
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Nothing changes if any gradient is non-finite.
    pub fn step<E: Element>(&mut self, store: &mut ParamStore<E>, grads: &Gradients<E>) -> Result<()> {
        let mut sq = 0.0f64;
        for (name, g) in grads.params() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFiniteGradient(name.to_string()));
                }
                sq += g.iter().map(|v| v.f64() * v.f64()).sum::<f64>();
            }
        }
        let scale = match self.clip_norm {
            Some(c) if sq.sqrt() > c => c / sq.sqrt(),
            _ => 1.0,
        };
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads.params() {
            let p = store.param_mut(name)?;
            let n = p.value.len();
            if p.m.len() != n {
                p.m = vec![E::zero(); n];
                p.v = vec![E::zero(); n];
            }
            let Some(g) = g else { continue };
            let w = p.value.data_mut();
            for i in 0..n {
                let gi = g[i].f64() * scale;
                let m = b1 * p.m[i].f64() + (1.0 - b1) * gi;
                let v = b2 * p.v[i].f64() + (1.0 - b2) * gi * gi;
                p.m[i] = E::of(m);
                p.v[i] = E::of(v);
                let upd = self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
                w[i] = E::of(w[i].f64() - upd);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Ctx, RngSeed, Tape, Tensor};

    fn run(store: &mut ParamStore<f64>, adam: &mut Adam, f: impl for<'t, 's> Fn(&Ctx<'t, 's, f64>) -> crate::tensor::Var<'t, f64>) {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let loss = f(&ctx);
        let g = tape.backward(loss).unwrap();
        drop(ctx);
        adam.step(store, &g).unwrap();
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = ParamStore::<f64>::new();
        s.init_const("w", vec![3], 0.7).unwrap();
        let mut adam = Adam::new(0.1);
        for _ in 0..3 {
            run(&mut s, &mut adam, |c| c.p("w").unwrap().scale(0.0).sum());
        }
        assert_eq!(s.get("w").unwrap().data(), &[0.7, 0.7, 0.7]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g = 1, v̂ = 1, update = lr·1/(1+eps)
        let mut s = ParamStore::<f64>::new();
        s.init_const("w", vec![1], 2.0).unwrap();
        let mut adam = Adam::new(0.1);
        run(&mut s, &mut adam, |c| c.p("w").unwrap().sum());
        let expected = 2.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.get("w").unwrap().item() - expected).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_leaves_weights() {
        let mut s = ParamStore::<f64>::new();
        s.init_const("ok", vec![1], 1.0).unwrap();
        s.init_const("bad", vec![1], 0.0).unwrap();
        let before = s.weight_hash();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &s);
        let loss = ctx.p("ok").unwrap().add(ctx.p("bad").unwrap().ln()).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        drop(ctx);
        let err = Adam::new(0.1).step(&mut s, &g).unwrap_err();
        assert!(matches!(err, TensorError::NonFiniteGradient(ref n) if n == "bad"), "{}", err);
        assert_eq!(before, s.weight_hash());
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let traj = || {
            let mut rng = RngSeed(9).rng();
            let mut s = ParamStore::<f64>::new();
            s.init_normal("w", vec![5], 1.0, &mut rng).unwrap();
            let target = Tensor::from_fn(vec![5], |i| i as f64);
            let mut adam = Adam::new(0.05);
            let mut out = Vec::new();
            for _ in 0..20 {
                run(&mut s, &mut adam, |c| c.p("w").unwrap().sub(c.constant(target.clone())).unwrap().square().sum());
                out.extend(s.get("w").unwrap().data().iter().map(|v| v.to_bits()));
            }
            out
        };
        assert_eq!(traj(), traj());
    }
}
