//! Reverse-mode autodiff over `ndarray` arrays.
//!
//! A [`Tape`] records every operation as a node holding its output value and
//! a backward closure. Nodes are appended in execution order, so parents
//! always have smaller ids than children and a single reverse sweep over the
//! node list propagates gradients. All values are `f32`; reductions
//! accumulate in `f64` where it is cheap to do so.
//!
//! The engine is deliberately small: only the operations the models in this
//! crate need exist, and everything runs on one thread so results are
//! bit-reproducible for a fixed seed.

mod conv;
mod nn;
mod params;

pub use params::{init, init_rng, name_seed, Adam, Frame, ParamId, ParamSet};

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn};

pub type Arr = ArrayD<f32>;
pub type ArrView<'a> = ArrayViewD<'a, f32>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Arr, &[bool]) -> Vec<Option<Arr>>>;

struct Node {
    data: Rc<Arr>,
    parents: Vec<usize>,
    requires_grad: bool,
    back: Option<BackFn>,
}

/// Records a single forward pass; dropped after the gradients are harvested.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients indexed by [`Var`], produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Takes the gradient out, leaving `None`.
    pub fn take(&mut self, v: Var) -> Option<Arr> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value of a node. The `Rc` is cheap to clone; the array is not copied.
    pub fn data(&self, v: Var) -> Rc<Arr> {
        Rc::clone(&self.nodes.borrow()[v.0].data)
    }

    /// Owned copy of a node's value.
    pub fn value(&self, v: Var) -> Arr {
        (*self.nodes.borrow()[v.0].data).clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].data.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Leaf that never receives a gradient (inputs, masks, targets).
    pub fn constant(&self, data: Arr) -> Var {
        self.push_node(Rc::new(data), vec![], false, None)
    }

    /// Shared-storage leaf, gradient collection controlled by `trainable`.
    pub fn leaf(&self, data: Rc<Arr>, trainable: bool) -> Var {
        self.push_node(data, vec![], trainable, None)
    }

    pub(crate) fn push(&self, data: Arr, parents: Vec<Var>, back: BackFn) -> Var {
        let ids: Vec<usize> = parents.iter().map(|v| v.0).collect();
        let requires = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_node(Rc::new(data), ids, requires, Some(back))
    }

    fn push_node(
        &self,
        data: Rc<Arr>,
        parents: Vec<usize>,
        requires_grad: bool,
        back: Option<BackFn>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { data, parents, requires_grad, back });
        Var(nodes.len() - 1)
    }

    /// Reverse sweep from `root`, which must be scalar (0-d or single element).
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        assert!(
            nodes[root.0].data.len() == 1,
            "backward root must be scalar, got shape {:?}",
            nodes[root.0].data.shape()
        );
        let mut grads: Vec<Option<Arr>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(nodes[root.0].data.raw_dim()));
        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(back) = node.back.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> =
                node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let contribs = back(&g, &needs);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (&pid, contrib) in node.parents.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                debug_assert_eq!(
                    c.shape(),
                    nodes[pid].data.shape(),
                    "gradient shape mismatch for parent {pid}"
                );
                match &mut grads[pid] {
                    Some(acc) => *acc += &c,
                    slot => *slot = Some(c),
                }
            }
        }
        Gradients { grads }
    }

    // ---- elementwise arithmetic ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (da, db) = (self.data(a), self.data(b));
        assert_eq!(da.shape(), db.shape(), "add: shape mismatch");
        let out = &*da + &*db;
        self.push(out, vec![a, b], Box::new(move |g, needs| {
            vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| g.clone()),
            ]
        }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (da, db) = (self.data(a), self.data(b));
        assert_eq!(da.shape(), db.shape(), "sub: shape mismatch");
        let out = &*da - &*db;
        self.push(out, vec![a, b], Box::new(move |g, needs| {
            vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| g.mapv(|x| -x)),
            ]
        }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (da, db) = (self.data(a), self.data(b));
        assert_eq!(da.shape(), db.shape(), "mul: shape mismatch");
        let out = &*da * &*db;
        self.push(out, vec![a, b], Box::new(move |g, needs| {
            vec![
                needs[0].then(|| g * &*db),
                needs[1].then(|| g * &*da),
            ]
        }))
    }

    pub fn scale(&self, a: Var, s: f32) -> Var {
        let da = self.data(a);
        let out = da.mapv(|x| x * s);
        self.push(out, vec![a], Box::new(move |g, needs| {
            vec![needs[0].then(|| g.mapv(|x| x * s))]
        }))
    }

    /// Elementwise product with a constant broadcast over the last axis.
    /// `x` is `[.., C]`, `m` is the same shape with the last axis replaced
    /// by 1. Used for row masks; `m` receives no gradient.
    pub fn mask_rows(&self, x: Var, m: &Arr) -> Var {
        let dx = self.data(x);
        let xs = dx.shape().to_vec();
        assert_eq!(m.shape()[..m.ndim() - 1], xs[..xs.len() - 1], "mask_rows: shape");
        assert_eq!(m.shape()[m.ndim() - 1], 1, "mask_rows: mask last axis must be 1");
        let mb = m
            .broadcast(IxDyn(&xs))
            .expect("mask_rows: broadcast failed")
            .to_owned();
        let out = &*dx * &mb;
        self.push(out, vec![x], Box::new(move |g, needs| {
            vec![needs[0].then(|| g * &mb)]
        }))
    }

    // ---- reductions ----

    pub fn sum_all(&self, a: Var) -> Var {
        let da = self.data(a);
        let total: f64 = da.iter().map(|&x| x as f64).sum();
        let out = ArrayD::from_elem(IxDyn(&[]), total as f32);
        let shape = da.raw_dim();
        self.push(out, vec![a], Box::new(move |g, needs| {
            let gs = g[[]];
            vec![needs[0].then(|| ArrayD::from_elem(shape.clone(), gs))]
        }))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.data(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f32)
    }

    /// Mean squared error between two same-shape vars, as a 0-d var.
    pub fn mse(&self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    // ---- activations ----

    pub fn relu(&self, a: Var) -> Var {
        let da = self.data(a);
        let out = da.mapv(|x| x.max(0.0));
        self.push(out, vec![a], Box::new(move |g, needs| {
            vec![needs[0].then(|| {
                let mut gx = g.clone();
                gx.zip_mut_with(&da, |gi, &x| {
                    if x <= 0.0 {
                        *gi = 0.0;
                    }
                });
                gx
            })]
        }))
    }

    pub fn silu(&self, a: Var) -> Var {
        let da = self.data(a);
        let out = da.mapv(|x| x * sigmoid_f(x));
        self.push(out, vec![a], Box::new(move |g, needs| {
            vec![needs[0].then(|| {
                let mut gx = g.clone();
                gx.zip_mut_with(&da, |gi, &x| {
                    let s = sigmoid_f(x);
                    *gi *= s * (1.0 + x * (1.0 - s));
                });
                gx
            })]
        }))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let da = self.data(a);
        let out = da.mapv(f32::tanh);
        let saved = out.clone();
        self.push(out, vec![a], Box::new(move |g, needs| {
            vec![needs[0].then(|| {
                let mut gx = g.clone();
                gx.zip_mut_with(&saved, |gi, &y| *gi *= 1.0 - y * y);
                gx
            })]
        }))
    }

    // ---- shape plumbing ----

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let da = self.data(a);
        let old = da.shape().to_vec();
        let out = da
            .to_shape(IxDyn(shape))
            .expect("reshape: incompatible size")
            .to_owned();
        self.push(out, vec![a], Box::new(move |g, needs| {
            vec![needs[0].then(|| {
                g.to_shape(IxDyn(&old)).expect("reshape back").to_owned()
            })]
        }))
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let da = self.data(a);
        // `to_owned` on a permuted view keeps the permuted strides, so force
        // standard layout: downstream ops and optimizer state assume it.
        let out = da.view().permuted_axes(IxDyn(axes)).as_standard_layout().to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(out, vec![a], Box::new(move |g, needs| {
            vec![needs[0].then(|| {
                g.view().permuted_axes(IxDyn(&inverse)).as_standard_layout().to_owned()
            })]
        }))
    }

    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let da = self.data(a);
        let full = da.raw_dim();
        let out = da
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.push(out, vec![a], Box::new(move |g, needs| {
            vec![needs[0].then(|| {
                let mut gx = ArrayD::zeros(full.clone());
                gx.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g);
                gx
            })]
        }))
    }

    pub fn concat(&self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no inputs");
        let datas: Vec<Rc<Arr>> = parts.iter().map(|&v| self.data(v)).collect();
        let views: Vec<ArrView> = datas.iter().map(|d| d.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat: shape mismatch");
        let sizes: Vec<usize> = datas.iter().map(|d| d.shape()[axis]).collect();
        self.push(out, parts.to_vec(), Box::new(move |g, needs| {
            let mut offset = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&sz, &need)| {
                    let piece = need.then(|| {
                        g.slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + sz))
                            .to_owned()
                    });
                    offset += sz;
                    piece
                })
                .collect()
        }))
    }

    /// Forward value of `q_data`, gradient routed unchanged to `source`.
    /// Both must have the same shape.
    pub fn straight_through(&self, source: Var, q_data: &Arr) -> Var {
        assert_eq!(self.data(source).shape(), q_data.shape(), "straight_through: shape");
        self.push(q_data.clone(), vec![source], Box::new(move |g, needs| {
            vec![needs[0].then(|| g.clone())]
        }))
    }

    /// Detached copy: same value, no gradient flow.
    pub fn detach(&self, a: Var) -> Var {
        self.constant(self.value(a))
    }
}

#[inline]
fn sigmoid_f(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    /// Tolerances for comparing analytic gradients against central
    /// finite differences, in the usual atol + rtol * |numeric| form.
    pub struct FdTol {
        pub eps: f32,
        pub atol: f32,
        pub rtol: f32,
    }

    impl Default for FdTol {
        fn default() -> Self {
            Self { eps: 1e-2, atol: 2e-3, rtol: 2e-2 }
        }
    }

    pub fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0f32..1.0))
    }

    /// Checks d(scalar f)/d(input) against central differences at every
    /// element of the input. `f` must be a pure function of its argument.
    pub fn check_grad<F>(f: F, x0: &Arr, tol: &FdTol)
    where
        F: Fn(&Tape, Var) -> Var,
    {
        let tape = Tape::new();
        let x = tape.leaf(Rc::new(x0.clone()), true);
        let y = f(&tape, x);
        let mut grads = tape.backward(y);
        let analytic = grads.take(x).expect("no gradient reached input");

        let eval = |xp: &Arr| -> f64 {
            let t = Tape::new();
            let v = t.constant(xp.clone());
            let out = f(&t, v);
            t.value(out).iter().map(|&v| v as f64).sum()
        };
        let mut xp = x0.clone();
        for idx in 0..x0.len() {
            let orig = xp.as_slice_mut().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + tol.eps;
            let fp = eval(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig - tol.eps;
            let fm = eval(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            let numeric = ((fp - fm) / (2.0 * tol.eps as f64)) as f32;
            let a = analytic.as_slice().unwrap()[idx];
            let err = (a - numeric).abs();
            assert!(
                err <= tol.atol + tol.rtol * numeric.abs(),
                "gradient mismatch at element {idx}: analytic {a}, numeric {numeric}"
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn add_mul_chain_values() {
        let t = Tape::new();
        let a = t.constant(ndarray::arr1(&[1.0f32, 2.0]).into_dyn());
        let b = t.constant(ndarray::arr1(&[3.0f32, 4.0]).into_dyn());
        let c = t.add(a, b);
        let d = t.mul(c, c);
        assert_eq!(t.value(d).as_slice().unwrap(), &[16.0, 36.0]);
    }

    #[test]
    fn backward_accumulates_over_reuse() {
        // y = x * x + x  =>  dy/dx = 2x + 1
        let t = Tape::new();
        let x = t.leaf(Rc::new(ndarray::arr1(&[3.0f32]).into_dyn()), true);
        let y = t.add(t.mul(x, x), x);
        let s = t.sum_all(y);
        let g = t.backward(s);
        assert_eq!(g.get(x).unwrap()[[0]], 7.0);
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_arr(&mut rng, &[3, 4]);
        let tol = FdTol::default();
        check_grad(|t, v| { let y = t.silu(v); t.sum_all(y) }, &x, &tol);
        check_grad(|t, v| { let y = t.tanh(v); t.sum_all(y) }, &x, &tol);
        check_grad(|t, v| { let y = t.mul(v, v); t.mean_all(y) }, &x, &tol);
        // relu checked away from the kink
        let xs = x.mapv(|v| if v.abs() < 0.05 { v + 0.3 } else { v });
        check_grad(|t, v| { let y = t.relu(v); t.sum_all(y) }, &xs, &tol);
    }

    #[test]
    fn shape_ops_round_trip_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_arr(&mut rng, &[2, 3, 4]);
        let tol = FdTol::default();
        check_grad(
            |t, v| {
                let r = t.reshape(v, &[6, 4]);
                let p = t.permute(r, &[1, 0]);
                let n = t.narrow(p, 0, 1, 2);
                let c = t.concat(0, &[n, n]);
                let sq = t.mul(c, c);
                t.sum_all(sq)
            },
            &x,
            &tol,
        );
    }

    #[test]
    fn mask_rows_zeroes_gradient_outside_mask() {
        let t = Tape::new();
        let x = t.leaf(
            Rc::new(Arr::from_shape_vec(IxDyn(&[1, 2, 3]), vec![1.0; 6]).unwrap()),
            true,
        );
        let m = Arr::from_shape_vec(IxDyn(&[1, 2, 1]), vec![1.0, 0.0]).unwrap();
        let y = t.mask_rows(x, &m);
        let s = t.sum_all(y);
        let g = t.backward(s);
        let gx = g.get(x).unwrap();
        assert_eq!(gx.as_slice().unwrap(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn straight_through_passes_gradient_and_value() {
        let t = Tape::new();
        let x = t.leaf(Rc::new(ndarray::arr1(&[0.3f32, -0.7]).into_dyn()), true);
        let q = ndarray::arr1(&[1.0f32, -1.0]).into_dyn();
        let y = t.straight_through(x, &q);
        assert_eq!(t.value(y), q);
        let sq = t.mul(y, y);
        let s = t.sum_all(sq);
        let g = t.backward(s);
        // d/dx of sum(q^2) routed through identity: 2*q
        assert_eq!(g.get(x).unwrap().as_slice().unwrap(), &[2.0, -2.0]);
    }
}
