//! Named parameter storage, initialisation and the Adam optimiser.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::Deref;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Arr, Gradients, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

struct ParamEntry {
    name: String,
    value: Rc<Arr>,
    grad: Option<Arr>,
    m: Arr,
    v: Arr,
    trainable: bool,
}

/// All learnable arrays of a model, addressed by stable names.
#[derive(Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Arr) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "parameter {name} registered twice"
        );
        let m = ArrayD::zeros(value.raw_dim());
        let v = ArrayD::zeros(value.raw_dim());
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value: Rc::new(value),
            grad: None,
            m,
            v,
            trainable: true,
        });
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Arr {
        &self.entries[id.0].value
    }

    pub fn get_by_name(&self, name: &str) -> Option<&Arr> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Replaces a parameter value; the shape must match.
    pub fn set_value(&mut self, id: ParamId, value: Arr) {
        let e = &mut self.entries[id.0];
        assert_eq!(e.value.shape(), value.shape(), "set_value: shape mismatch for {}", e.name);
        e.value = Rc::new(value);
    }

    pub fn set_value_by_name(&mut self, name: &str, value: Arr) {
        let id = self.id(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.set_value(id, value);
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for e in &mut self.entries {
            e.trainable = trainable;
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: Arr) {
        let e = &mut self.entries[id.0];
        assert_eq!(e.value.shape(), g.shape(), "grad shape mismatch for {}", e.name);
        match &mut e.grad {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    pub fn grad_by_name(&self, name: &str) -> Option<&Arr> {
        self.id(name).and_then(|id| self.entries[id.0].grad.as_ref())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// L2 norm of all gradients under a name prefix; `None` if no parameter
    /// under the prefix has a gradient.
    pub fn grad_norm_prefix(&self, prefix: &str) -> Option<f64> {
        let mut any = false;
        let mut acc = 0.0f64;
        for e in &self.entries {
            if !e.name.starts_with(prefix) {
                continue;
            }
            if let Some(g) = &e.grad {
                any = true;
                acc += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            }
        }
        any.then(|| acc.sqrt())
    }

    /// Optimiser moments for checkpointing.
    pub fn adam_state(&self, name: &str) -> Option<(&Arr, &Arr)> {
        self.id(name).map(|id| {
            let e = &self.entries[id.0];
            (&e.m, &e.v)
        })
    }

    pub fn set_adam_state(&mut self, name: &str, m: Arr, v: Arr) {
        let id = self.id(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        let e = &mut self.entries[id.0];
        assert_eq!(e.value.shape(), m.shape());
        assert_eq!(e.value.shape(), v.shape());
        e.m = m;
        e.v = v;
    }
}

/// One forward pass: a tape plus cached parameter leaves.
pub struct Frame<'a> {
    tape: Tape,
    params: &'a ParamSet,
    cache: RefCell<HashMap<ParamId, Var>>,
}

impl<'a> Frame<'a> {
    pub fn new(params: &'a ParamSet) -> Self {
        Self { tape: Tape::new(), params, cache: RefCell::new(HashMap::new()) }
    }

    /// The tape leaf for a parameter, created once per frame.
    pub fn p(&self, id: ParamId) -> Var {
        if let Some(&v) = self.cache.borrow().get(&id) {
            return v;
        }
        let var = self.tape.leaf(
            Rc::clone(&self.params.entries[id.0].value),
            self.params.trainable(id),
        );
        self.cache.borrow_mut().insert(id, var);
        var
    }

    pub fn p_name(&self, name: &str) -> Var {
        let id = self.params.id(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.p(id)
    }

    /// Harvests parameter gradients out of a backward pass.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<(ParamId, Arr)> {
        let mut out: Vec<(ParamId, Arr)> = Vec::new();
        for (&id, &var) in self.cache.borrow().iter() {
            if let Some(g) = grads.take(var) {
                out.push((id, g));
            }
        }
        // deterministic order regardless of hash iteration
        out.sort_by_key(|(id, _)| id.0);
        out
    }
}

impl Deref for Frame<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

/// Adam with decoupled weight decay and bias correction.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    t: u64,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn set_step_count(&mut self, t: u64) {
        self.t = t;
    }

    /// Applies accumulated gradients and clears them.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for e in &mut params.entries {
            let Some(g) = e.grad.take() else { continue };
            if !e.trainable {
                continue;
            }
            let value = Rc::make_mut(&mut e.value);
            if self.weight_decay > 0.0 {
                value.mapv_inplace(|v| v * (1.0 - self.lr * self.weight_decay));
            }
            ndarray::Zip::from(&mut e.m).and(&g).for_each(|m, &gi| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
            });
            ndarray::Zip::from(&mut e.v).and(&g).for_each(|v, &gi| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
            });
            ndarray::Zip::from(value)
                .and(&e.m)
                .and(&e.v)
                .for_each(|val, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *val -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// Deterministic per-parameter seed derived from a base seed and a name.
pub fn name_seed(base: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ base.wrapping_mul(0x9e3779b97f4a7c15)
}

/// Initialisers; every caller threads a seeded RNG through.
pub mod init {
    use super::*;

    pub fn zeros(shape: &[usize]) -> Arr {
        ArrayD::zeros(IxDyn(shape))
    }

    pub fn ones(shape: &[usize]) -> Arr {
        ArrayD::ones(IxDyn(shape))
    }

    pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f32) -> Arr {
        // Box-Muller keeps us off extra distribution dependencies
        ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
            let u2: f32 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos() * std
        })
    }

    /// He-style init for a conv weight `[Cout, Cin, kh, kw]`.
    pub fn conv_kaiming(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        assert_eq!(shape.len(), 4);
        let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
        normal(rng, shape, (2.0 / fan_in).sqrt())
    }

    /// Xavier-style init for a linear weight `[D_in, D_out]`.
    pub fn linear_xavier(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        assert_eq!(shape.len(), 2);
        let bound = (6.0 / (shape[0] + shape[1]) as f32).sqrt();
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-bound..bound))
    }
}

/// Convenience for seeding an initialiser RNG for one parameter.
pub fn init_rng(base: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(name_seed(base, name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimise (x - 3)^2 elementwise
        let mut params = ParamSet::new();
        let id = params.add("x", ArrayD::zeros(IxDyn(&[4])));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = {
                let x = params.get(id);
                x.mapv(|v| 2.0 * (v - 3.0))
            };
            params.accumulate_grad(id, g);
            opt.step(&mut params);
        }
        for &v in params.get(id).iter() {
            assert!((v - 3.0).abs() < 1e-3, "adam failed to converge: {v}");
        }
    }

    #[test]
    fn frame_reuses_parameter_leaves() {
        let mut params = ParamSet::new();
        let id = params.add("w", init::ones(&[2]));
        let frame = Frame::new(&params);
        let a = frame.p(id);
        let b = frame.p(id);
        assert_eq!(a, b);
        // y = w + w => dw = 2
        let y = frame.add(a, b);
        let s = frame.sum_all(y);
        let mut grads = frame.backward(s);
        let collected = frame.param_grads(&mut grads);
        assert_eq!(collected.len(), 1);
        assert_eq!(collected[0].1.as_slice().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let mut params = ParamSet::new();
        let wid = params.add("enc.w", init::ones(&[2]));
        let vid = params.add("head.w", init::ones(&[2]));
        params.set_trainable_prefix("enc.", false);
        let frame = Frame::new(&params);
        let (w, v) = (frame.p(wid), frame.p(vid));
        let y = frame.mul(w, v);
        let s = frame.sum_all(y);
        let mut grads = frame.backward(s);
        let collected = frame.param_grads(&mut grads);
        assert_eq!(collected.len(), 1);
        assert_eq!(collected[0].0, vid);
    }

    #[test]
    fn name_seed_is_stable_and_name_sensitive() {
        assert_eq!(name_seed(7, "enc.w"), name_seed(7, "enc.w"));
        assert_ne!(name_seed(7, "enc.w"), name_seed(7, "enc.b"));
        assert_ne!(name_seed(7, "enc.w"), name_seed(8, "enc.w"));
    }
}
