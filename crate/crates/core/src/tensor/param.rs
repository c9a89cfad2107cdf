use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use super::rng::trunc_normal;
use super::{shape_err, Element, Result, Tape, Tensor, TensorError, Var};

/// A named weight plus its Adam moment buffers.
#[derive(Clone, Debug)]
pub struct Parameter<E: Element = f32> {
    pub name: String,
    pub value: Tensor<E>,
    pub trainable: bool,
    pub m: Vec<E>,
    pub v: Vec<E>,
}

/// Ordered set of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E: Element = f32> {
    params: Vec<Parameter<E>>,
    index: HashMap<String, usize>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParameter(name.to_string()));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter { name: name.to_string(), value, trainable: true, m: Vec::new(), v: Vec::new() });
        Ok(())
    }

    /// Inserts a truncated-normal initialized weight.
    pub fn init_normal(&mut self, name: &str, shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Result<()> {
        let t = Tensor::from_fn(shape, |_| E::of(trunc_normal(rng, std)));
        self.insert(name, t)
    }

    pub fn init_const(&mut self, name: &str, shape: Vec<usize>, value: f64) -> Result<()> {
        self.insert(name, Tensor::full(shape, E::of(value)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i].value)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Result<&Parameter<E>> {
        self.index.get(name).map(|&i| &self.params[i]).ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub(crate) fn param_mut(&mut self, name: &str) -> Result<&mut Parameter<E>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(TensorError::UnknownParameter(name.to_string())),
        }
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        let p = self.param_mut(name)?;
        if p.value.shape() != value.shape() {
            return shape_err("set_parameter", format!("`{}` is {:?}, got {:?}", name, p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<E>> {
        self.params.iter()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copies every parameter of `other` into this store under `prefix`.
    pub fn absorb(&mut self, prefix: &str, other: &ParamStore<E>) -> Result<()> {
        for p in other.iter() {
            self.insert(&format!("{}{}", prefix, p.name), p.value.clone())?;
            self.param_mut(&format!("{}{}", prefix, p.name))?.trainable = p.trainable;
        }
        Ok(())
    }

    /// Values converted to another precision; moment buffers are dropped.
    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.insert(&p.name, p.value.cast()).expect("names are unique");
            out.params.last_mut().unwrap().trainable = p.trainable;
        }
        out
    }

    /// 64-bit FNV-1a over names, shapes and value bits.
    pub fn weight_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for &d in p.value.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                eat(&v.f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Binds parameters of a store onto a tape, once per name.
pub struct Ctx<'t, 's, E: Element = f32> {
    tape: &'t Tape<E>,
    store: &'s ParamStore<E>,
    bound: RefCell<HashMap<String, Var<'t, E>>>,
}

impl<'t, 's, E: Element> Ctx<'t, 's, E> {
    pub fn new(tape: &'t Tape<E>, store: &'s ParamStore<E>) -> Self {
        Ctx { tape, store, bound: RefCell::new(HashMap::new()) }
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore<E> {
        self.store
    }

    pub fn p(&self, name: &str) -> Result<Var<'t, E>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let p = self.store.param(name)?;
        let v = self.tape.param_leaf(name, p.value.clone(), p.trainable);
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&self, value: Tensor<E>) -> Var<'t, E> {
        self.tape.constant(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngSeed;

    #[test]
    fn duplicate_and_unknown_names_are_errors() {
        let mut s = ParamStore::<f32>::new();
        s.init_const("a", vec![2], 0.0).unwrap();
        assert!(matches!(s.init_const("a", vec![2], 0.0), Err(TensorError::DuplicateParameter(_))));
        assert!(matches!(s.get("b"), Err(TensorError::UnknownParameter(_))));
        assert!(s.set("a", Tensor::zeros(vec![3])).is_err());
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let mut s = ParamStore::<f64>::new();
        s.init_const("enc.w", vec![3], 1.0).unwrap();
        s.init_const("dec.w", vec![3], 2.0).unwrap();
        s.set_trainable("enc.", false);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &s);
        let y = ctx.p("enc.w").unwrap().mul(ctx.p("dec.w").unwrap()).unwrap().sum();
        let g = tape.backward(y).unwrap();
        let names: Vec<&str> = g.params().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["dec.w"]);
        assert_eq!(g.params().next().unwrap().1.unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn binding_is_shared_within_a_context() {
        let mut s = ParamStore::<f64>::new();
        s.init_const("w", vec![1], 3.0).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &s);
        let (a, b) = (ctx.p("w").unwrap(), ctx.p("w").unwrap());
        let g = tape.backward(a.mul(b).unwrap().sum()).unwrap();
        let grads: Vec<_> = g.params().collect();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1.unwrap(), &[6.0]);
    }

    #[test]
    fn hash_tracks_values() {
        let mut rng = RngSeed(5).rng();
        let mut s = ParamStore::<f32>::new();
        s.init_normal("w", vec![4, 4], 0.02, &mut rng).unwrap();
        let h = s.weight_hash();
        assert_eq!(h, s.clone().weight_hash());
        let mut t = s.get("w").unwrap().clone();
        t.data_mut()[3] += 1e-6;
        s.set("w", t).unwrap();
        assert_ne!(h, s.weight_hash());
    }
}
