//! Reverse-mode automatic differentiation on dense tensors.
//!
//! A [`Tape`] records one forward pass; `backward` replays it in reverse.
//! The tape is generic over the scalar so the same graph runs in f32 for
//! training and in f64 for finite-difference gradient checks. Ops that
//! parallelize internally only ever gather into disjoint output slots, which
//! keeps every value and gradient bitwise independent of the thread count.

mod nn;
mod spatial;

pub use spatial::CloudVars;

use crate::parallel;
use crate::Real;

/// A dense row-major tensor. Shapes are small (1-4 dims).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Real> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![S::zero(); n] }
    }

    pub fn scalar(v: S) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|&v| v.to_f64().is_finite())
    }

    /// (channels, height, width) view of a 3-d tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected CHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }
}

pub type VarId = usize;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub id: VarId,
}

/// Gradient accumulator indexed by `VarId`. Ids that do not require
/// gradients (constants) are silently skipped.
pub struct GradStore<S> {
    grads: Vec<Option<Tensor<S>>>,
    active: Vec<bool>,
}

impl<S: Real> GradStore<S> {
    fn new(active: Vec<bool>) -> Self {
        Self { grads: (0..active.len()).map(|_| None).collect(), active }
    }

    pub fn accumulate(&mut self, id: VarId, delta: Tensor<S>) {
        if !self.active[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => {
                assert_eq!(g.shape, delta.shape);
                for (a, b) in g.data.iter_mut().zip(delta.data) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.id].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.id].take()
    }
}

/// Read-only view of recorded values, passed to backward closures.
pub struct Values<'a, S> {
    values: &'a [Tensor<S>],
}

impl<'a, S> Values<'a, S> {
    pub fn get(&self, id: VarId) -> &'a Tensor<S> {
        &self.values[id]
    }
}

type BackwardFn<S> = Box<dyn Fn(&Values<'_, S>, &Tensor<S>, &mut GradStore<S>) + Send>;

struct Node<S> {
    requires_grad: bool,
    backward: Option<BackwardFn<S>>,
}

/// A recorded forward computation.
pub struct Tape<S> {
    values: Vec<Tensor<S>>,
    nodes: Vec<Node<S>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self { values: Vec::new(), nodes: Vec::new() }
    }

    /// A value gradients never flow into.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, false, None)
    }

    /// A differentiable leaf (parameter or probed input).
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t, true, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.values[v.id]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, requires_grad: bool, backward: Option<BackwardFn<S>>) -> Var {
        self.values.push(value);
        self.nodes.push(Node { requires_grad, backward });
        Var { id: self.nodes.len() - 1 }
    }

    /// Record an op: `value` plus a backward closure, active only if any
    /// parent requires gradients.
    pub(crate) fn op(&mut self, parents: &[Var], value: Tensor<S>, backward: BackwardFn<S>) -> Var {
        let requires = parents.iter().any(|p| self.nodes[p.id].requires_grad);
        self.push(value, requires, requires.then_some(backward))
    }

    /// Reverse sweep from `loss` (must be scalar). Returns gradients for
    /// every reachable variable that requires them.
    pub fn backward(&self, loss: Var) -> GradStore<S> {
        assert_eq!(self.values[loss.id].len(), 1, "backward needs a scalar loss");
        let mut store = GradStore::new(self.nodes.iter().map(|n| n.requires_grad).collect());
        store.accumulate(loss.id, Tensor::scalar(S::one()));
        let view = Values { values: &self.values };
        for id in (0..=loss.id).rev() {
            let Some(back) = &self.nodes[id].backward else {
                continue;
            };
            let Some(grad) = store.grads[id].take() else {
                continue;
            };
            back(&view, &grad, &mut store);
            // Keep the grad around for inspection of intermediate vars.
            store.grads[id] = Some(grad);
        }
        store
    }

    // ---- elementwise arithmetic ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.values[a.id], &self.values[b.id]);
        assert_eq!(va.shape, vb.shape);
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape.clone(), data);
        self.op(
            &[a, b],
            value,
            Box::new(move |_, g, store| {
                store.accumulate(a.id, g.clone());
                store.accumulate(b.id, g.clone());
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.values[a.id], &self.values[b.id]);
        assert_eq!(va.shape, vb.shape);
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(va.shape.clone(), data);
        self.op(
            &[a, b],
            value,
            Box::new(move |_, g, store| {
                store.accumulate(a.id, g.clone());
                let neg = Tensor::new(g.shape.clone(), g.data.iter().map(|&x| -x).collect());
                store.accumulate(b.id, neg);
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.values[a.id], &self.values[b.id]);
        assert_eq!(va.shape, vb.shape);
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape.clone(), data);
        self.op(
            &[a, b],
            value,
            Box::new(move |vals, g, store| {
                let (va, vb) = (vals.get(a.id), vals.get(b.id));
                let da = Tensor::new(
                    g.shape.clone(),
                    g.data.iter().zip(&vb.data).map(|(&gx, &y)| gx * y).collect(),
                );
                let db = Tensor::new(
                    g.shape.clone(),
                    g.data.iter().zip(&va.data).map(|(&gx, &x)| gx * x).collect(),
                );
                store.accumulate(a.id, da);
                store.accumulate(b.id, db);
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.values[a.id], &self.values[b.id]);
        assert_eq!(va.shape, vb.shape);
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x / y).collect();
        let value = Tensor::new(va.shape.clone(), data);
        self.op(
            &[a, b],
            value,
            Box::new(move |vals, g, store| {
                let (va, vb) = (vals.get(a.id), vals.get(b.id));
                let da = Tensor::new(
                    g.shape.clone(),
                    g.data.iter().zip(&vb.data).map(|(&gx, &y)| gx / y).collect(),
                );
                let db = Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(va.data.iter().zip(&vb.data))
                        .map(|(&gx, (&x, &y))| -gx * x / (y * y))
                        .collect(),
                );
                store.accumulate(a.id, da);
                store.accumulate(b.id, db);
            }),
        )
    }

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(S) -> S,
        dfdx: impl Fn(S, S) -> S + Send + 'static,
    ) -> Var {
        let va = &self.values[a.id];
        let data: Vec<S> = va.data.iter().map(|&x| f(x)).collect();
        let value = Tensor::new(va.shape.clone(), data);
        self.op(
            &[a],
            value,
            Box::new(move |vals, g, store| {
                let va = vals.get(a.id);
                // dfdx receives (x, g) and returns the input gradient.
                let id_self = a.id;
                let da = Tensor::new(
                    g.shape.clone(),
                    va.data.iter().zip(&g.data).map(|(&x, &gx)| dfdx(x, gx)).collect(),
                );
                store.accumulate(id_self, da);
            }),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, |_, g| -g)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(
            a,
            num_traits::Float::abs,
            |x, g| if x.to_f64() >= 0.0 { g } else { -g },
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, nalgebra::ComplexField::exp, |x, g| g * nalgebra::ComplexField::exp(x))
    }

    /// Reinterpret the data with a new shape of the same length.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let va = &self.values[a.id];
        assert_eq!(va.len(), shape.iter().product::<usize>(), "reshape length mismatch");
        let old_shape = va.shape.clone();
        let value = Tensor::new(shape, va.data.clone());
        self.op(
            &[a],
            value,
            Box::new(move |_, g, store| {
                store.accumulate(a.id, Tensor::new(old_shape.clone(), g.data.clone()));
            }),
        )
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| S::one() / x, |x, g| -g / (x * x))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, g| g * x * S::lit(2.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, stable_sigmoid, |x, g| {
            let s = stable_sigmoid(x);
            g * s * (S::one() - s)
        })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, stable_softplus, |x, g| g * stable_sigmoid(x))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                if x.to_f64() > 0.0 {
                    x
                } else {
                    nalgebra::ComplexField::exp(x) - S::one()
                }
            },
            |x, g| {
                if x.to_f64() > 0.0 {
                    g
                } else {
                    g * nalgebra::ComplexField::exp(x)
                }
            },
        )
    }

    /// Hard clamp; gradient passes only where the input was not clamped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(
            a,
            move |x| S::lit(x.to_f64().clamp(lo, hi)),
            move |x, g| {
                let xf = x.to_f64();
                if xf > lo && xf < hi {
                    g
                } else {
                    S::zero()
                }
            },
        )
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + S::lit(c), |_, g| g)
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * S::lit(c), move |_, g| g * S::lit(c))
    }

    // ---- broadcasting scalar <-> tensor ----

    /// Multiply tensor `x` by scalar var `s` (shape [1]).
    pub fn bscale(&mut self, x: Var, s: Var) -> Var {
        let sv = self.values[s.id].item();
        let vx = &self.values[x.id];
        let value = Tensor::new(vx.shape.clone(), vx.data.iter().map(|&v| v * sv).collect());
        self.op(
            &[x, s],
            value,
            Box::new(move |vals, g, store| {
                let sv = vals.get(s.id).item();
                let vx = vals.get(x.id);
                let dx = Tensor::new(g.shape.clone(), g.data.iter().map(|&gx| gx * sv).collect());
                let ds: S = g.data.iter().zip(&vx.data).map(|(&gx, &xv)| gx * xv).fold(S::zero(), |a, b| a + b);
                store.accumulate(x.id, dx);
                store.accumulate(s.id, Tensor::scalar(ds));
            }),
        )
    }

    // ---- reductions ----

    pub fn mean_all(&mut self, a: Var) -> Var {
        let va = &self.values[a.id];
        let n = va.len();
        let mean = va.data.iter().fold(S::zero(), |acc, &x| acc + x) / S::lit(n as f64);
        self.op(
            &[a],
            Tensor::scalar(mean),
            Box::new(move |vals, g, store| {
                let shape = vals.get(a.id).shape.clone();
                let gv = g.item() / S::lit(n as f64);
                store.accumulate(a.id, Tensor::new(shape, vec![gv; n]));
            }),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let va = &self.values[a.id];
        let n = va.len();
        let sum = va.data.iter().fold(S::zero(), |acc, &x| acc + x);
        self.op(
            &[a],
            Tensor::scalar(sum),
            Box::new(move |vals, g, store| {
                let shape = vals.get(a.id).shape.clone();
                let gv = g.item();
                store.accumulate(a.id, Tensor::new(shape, vec![gv; n]));
            }),
        )
    }

    /// Mean over entries where `mask` is true. Empty mask yields 0 with a
    /// zero gradient, matching the degenerate-warp contract.
    pub fn masked_mean(&mut self, a: Var, mask: std::sync::Arc<Vec<bool>>) -> Var {
        let va = &self.values[a.id];
        assert_eq!(va.len(), mask.len());
        let count = mask.iter().filter(|&&m| m).count();
        let value = if count == 0 {
            S::zero()
        } else {
            let sum = va
                .data
                .iter()
                .zip(mask.iter())
                .filter(|(_, &m)| m)
                .fold(S::zero(), |acc, (&x, _)| acc + x);
            sum / S::lit(count as f64)
        };
        self.op(
            &[a],
            Tensor::scalar(value),
            Box::new(move |vals, g, store| {
                let shape = vals.get(a.id).shape.clone();
                let n = shape.iter().product();
                let mut data = vec![S::zero(); n];
                if count > 0 {
                    let gv = g.item() / S::lit(count as f64);
                    for (slot, &m) in data.iter_mut().zip(mask.iter()) {
                        if m {
                            *slot = gv;
                        }
                    }
                }
                store.accumulate(a.id, Tensor::new(shape, data));
            }),
        )
    }

    /// Fixed-order weighted sum of scalar vars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let mut total = S::zero();
        for &(v, w) in terms {
            total += self.values[v.id].item() * S::lit(w);
        }
        let parents: Vec<Var> = terms.iter().map(|&(v, _)| v).collect();
        let terms: Vec<(VarId, f64)> = terms.iter().map(|&(v, w)| (v.id, w)).collect();
        self.op(
            &parents,
            Tensor::scalar(total),
            Box::new(move |_, g, store| {
                let gv = g.item();
                for &(id, w) in &terms {
                    store.accumulate(id, Tensor::scalar(gv * S::lit(w)));
                }
            }),
        )
    }

    /// Mean of scalar vars in the given (fixed) order.
    pub fn mean_of(&mut self, vars: &[Var]) -> Var {
        let w = 1.0 / vars.len() as f64;
        let terms: Vec<(Var, f64)> = vars.iter().map(|&v| (v, w)).collect();
        self.weighted_sum(&terms)
    }
}

/// Convert an H, W, C image into a [C,H,W] tensor.
pub fn image_to_chw<S: Real>(img: &crate::img::Image<S>) -> Tensor<S> {
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut data = vec![S::zero(); c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(ch * h + y) * w + x] = img.at(y, x, ch);
            }
        }
    }
    Tensor::new(vec![c, h, w], data)
}

/// Convert a [C,H,W] tensor back into an H, W, C image.
pub fn chw_to_image<S: Real>(t: &Tensor<S>) -> crate::img::Image<S> {
    let (c, h, w) = t.chw();
    let mut img = crate::img::Image::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                *img.at_mut(y, x, ch) = t.data[(ch * h + y) * w + x];
            }
        }
    }
    img
}

pub(crate) fn stable_sigmoid<S: Real>(x: S) -> S {
    if x.to_f64() >= 0.0 {
        S::one() / (S::one() + nalgebra::ComplexField::exp(-x))
    } else {
        let e = nalgebra::ComplexField::exp(x);
        e / (S::one() + e)
    }
}

pub(crate) fn stable_softplus<S: Real>(x: S) -> S {
    // max(x, 0) + ln(1 + exp(-|x|))
    let zero = S::zero();
    let m = if x.to_f64() > 0.0 { x } else { zero };
    m + nalgebra::ComplexField::ln(S::one() + nalgebra::ComplexField::exp(-num_traits::Float::abs(x)))
}

/// Shared helper: parallel map over rows of a CHW tensor producing disjoint
/// output rows.
pub(crate) fn par_rows<S: Real>(out: &mut Tensor<S>, row_len: usize, f: impl Fn(usize, &mut [S]) + Sync + Send) {
    parallel::for_each_chunk(&mut out.data, row_len, f);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn finite_diff_check<F>(build: F, input: Tensor<f64>, tol: f64)
    where
        F: Fn(&mut Tape<f64>, Var) -> Var,
    {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let loss = build(&mut tape, x);
        assert_eq!(tape.value(loss).len(), 1);
        let grads = tape.backward(loss);
        let analytic = grads.get(x).expect("input gradient").clone();

        let step = 1e-6;
        for i in 0..input.len() {
            let mut plus = input.clone();
            let mut minus = input.clone();
            plus.data[i] += step;
            minus.data[i] -= step;
            let mut tp = Tape::new();
            let xp = tp.leaf(plus);
            let lp = build(&mut tp, xp);
            let mut tm = Tape::new();
            let xm = tm.leaf(minus);
            let lm = build(&mut tm, xm);
            let fd = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * step);
            let denom = fd.abs().max(analytic.data[i].abs()).max(1e-6);
            assert!(
                (fd - analytic.data[i]).abs() / denom < tol,
                "index {i}: analytic {} vs fd {fd}",
                analytic.data[i]
            );
        }
    }

    fn random_tensor(rng: &mut StdRng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(1);
        let x = random_tensor(&mut rng, vec![3, 4], 0.2, 2.0);
        let other = random_tensor(&mut rng, vec![3, 4], 0.5, 1.5);
        finite_diff_check(
            |t, v| {
                let c = t.constant(other.clone());
                let a = t.mul(v, c);
                let b = t.div(a, c);
                let d = t.sub(b, c);
                let e = t.add(d, v);
                let f = t.square(e);
                t.mean_all(f)
            },
            x,
            1e-4,
        );
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(2);
        let x = random_tensor(&mut rng, vec![20], -2.0, 2.0);
        for act in 0..4 {
            finite_diff_check(
                move |t, v| {
                    let y = match act {
                        0 => t.sigmoid(v),
                        1 => t.softplus(v),
                        2 => t.elu(v),
                        _ => t.exp(v),
                    };
                    let y2 = t.abs(y);
                    t.mean_all(y2)
                },
                x.clone(),
                1e-4,
            );
        }
    }

    #[test]
    fn masked_mean_handles_empty_and_partial_masks() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]));
        let empty = tape.masked_mean(x, std::sync::Arc::new(vec![false; 4]));
        assert_eq!(tape.value(empty).item(), 0.0);
        let partial = tape.masked_mean(x, std::sync::Arc::new(vec![true, false, true, false]));
        assert_eq!(tape.value(partial).item(), 2.0);
        let grads = tape.backward(partial);
        assert_eq!(grads.get(x).unwrap().data, vec![0.5, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn bscale_and_weighted_sum_gradients() {
        let mut rng = StdRng::seed_from_u64(3);
        let x = random_tensor(&mut rng, vec![6], -1.0, 1.0);
        finite_diff_check(
            |t, v| {
                let m = t.mean_all(v);
                let scaled = t.bscale(v, m);
                let s1 = t.mean_all(scaled);
                let s2 = t.sum_all(v);
                t.weighted_sum(&[(s1, 0.7), (s2, 0.3)])
            },
            x,
            1e-4,
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(c, x);
        let grads = tape.backward(y);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.5, 2.0]));
        let y = tape.clamp(x, 0.0, 1.0);
        let s = tape.sum_all(y);
        let grads = tape.backward(s);
        assert_eq!(grads.get(x).unwrap().data, vec![0.0, 1.0, 0.0]);
        assert_eq!(tape.value(y).data, vec![0.0, 0.5, 1.0]);
    }
}
