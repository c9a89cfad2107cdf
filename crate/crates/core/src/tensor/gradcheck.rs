//! Central-difference gradient verification in double precision.

use super::{invalid, Ctx, ParamStore, Result, Tape, Tensor, TensorError, Var};

fn rel_err(a: f64, c: f64) -> f64 {
    (a - c).abs() / a.abs().max(c.abs()).max(1e-8)
}

fn eval<F>(x: &Tensor<f64>, f: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let out = f(&tape, tape.constant(x.clone()))?.value();
    let v: f64 = out.data().iter().sum();
    if !v.is_finite() {
        return Err(TensorError::NonFinite("finite-difference probe".into()));
    }
    Ok(v)
}

/// Max relative error between the analytic gradient of `sum(f(x))` and
/// central differences, over every coordinate of `x`.
pub fn check_input_gradient<F>(x: &Tensor<f64>, eps: f64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return invalid("finite_diff_check", format!("epsilon {} outside [1e-5, 1e-2]", eps));
    }
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&tape, v)?;
    if !out.value().all_finite() {
        return Err(TensorError::NonFinite("forward pass".into()));
    }
    let loss = if out.numel() == 1 { out } else { out.sum() };
    let analytic = tape.backward(loss)?.of(v);
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe, &f)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe, &f)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic.data()[i], (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}

/// Outcome of a parameter gradient check.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub coords_checked: usize,
}

fn eval_params<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: for<'t, 's> Fn(&Ctx<'t, 's, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store);
    let v = f(&ctx)?.value().data().iter().sum::<f64>();
    if !v.is_finite() {
        return Err(TensorError::NonFinite("finite-difference probe".into()));
    }
    Ok(v)
}

/// Checks the gradient of `sum(f)` with respect to every trainable
/// parameter. At most `per_param` evenly spaced coordinates are probed in
/// each tensor.
pub fn check_param_gradients<F>(store: &ParamStore<f64>, eps: f64, per_param: usize, f: F) -> Result<ParamCheck>
where
    F: for<'t, 's> Fn(&Ctx<'t, 's, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store);
    let out = f(&ctx)?;
    let loss = if out.numel() == 1 { out } else { out.sum() };
    let grads = tape.backward(loss)?;
    let analytic: Vec<(String, Option<Vec<f64>>)> =
        grads.params().map(|(n, g)| (n.to_string(), g.map(|g| g.to_vec()))).collect();
    drop(ctx);
    let mut probe = store.clone();
    let mut res = ParamCheck { max_rel_err: 0.0, worst_param: String::new(), coords_checked: 0 };
    for (name, g) in analytic {
        let orig = store.get(&name)?.clone();
        let n = orig.len();
        let stride = n.div_ceil(per_param.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let a = g.as_ref().map_or(0.0, |g| g[i]);
            let mut t = orig.clone();
            t.data_mut()[i] = orig.data()[i] + eps;
            probe.set(&name, t.clone())?;
            let up = eval_params(&probe, &f)?;
            t.data_mut()[i] = orig.data()[i] - eps;
            probe.set(&name, t)?;
            let down = eval_params(&probe, &f)?;
            let e = rel_err(a, (up - down) / (2.0 * eps));
            if e > res.max_rel_err {
                res.max_rel_err = e;
                res.worst_param = format!("{}[{}]", name, i);
            }
            res.coords_checked += 1;
        }
        probe.set(&name, orig)?;
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_fn(vec![3, 4], |i| i as f64 * 0.37 - 1.5);
        let err = check_input_gradient(&x, 1e-4, |_, v| Ok(v.square().sum())).unwrap();
        assert!(err < 1e-6, "{}", err);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        let err = check_input_gradient(&x, 1e-4, |_, v| Ok(v.scale(2.0).detach().mul(v)?.sum())).unwrap();
        assert!(err > 0.4, "detach should halve the analytic gradient, err {}", err);
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let x = Tensor::new(vec![2], vec![-1.0, 1.0]).unwrap();
        assert!(matches!(check_input_gradient(&x, 1e-4, |_, v| Ok(v.ln())), Err(TensorError::NonFinite(_))));
    }

    #[test]
    fn parameter_check_covers_trainable_only() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Tensor::from_fn(vec![4], |i| 0.3 + i as f64)).unwrap();
        s.insert("b", Tensor::from_fn(vec![4], |i| 1.0 - 0.2 * i as f64)).unwrap();
        s.set_trainable("b", false);
        let r = check_param_gradients(&s, 1e-5, 10, |c| Ok(c.p("a")?.mul(c.p("b")?)?.tanh().sum())).unwrap();
        assert_eq!(r.coords_checked, 4);
        assert!(r.max_rel_err < 1e-6, "{:?}", r);
    }
}
