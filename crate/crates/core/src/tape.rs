//! Reverse-mode gradient tape.
//!
//! Every operator records its output value together with a hand-written
//! backward closure. [`GradTape::backward`] replays the closures in reverse
//! recording order. Gradients of intermediate values live only for the
//! duration of one backward pass; gradients of leaves accumulate across
//! passes until [`GradTape::zero_grads`] is called.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<T>, &[T], &mut Grads<T>)>;

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    leaf: bool,
    backward: Option<BackwardFn<T>>,
}

/// Read access to recorded values while a backward closure runs.
pub struct BackwardCtx<'a, T: Real> {
    nodes: &'a [Node<T>],
    index: usize,
}

impl<T: Real> BackwardCtx<'_, T> {
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// The value produced by the node whose closure is running.
    pub fn output(&self) -> &Tensor<T> {
        &self.nodes[self.index].value
    }
}

/// Gradient slots for the inputs of the node being differentiated.
pub struct Grads<'a, T: Real> {
    nodes: &'a [Node<T>],
    slots: &'a mut [Option<Vec<T>>],
}

impl<T: Real> Grads<'_, T> {
    /// Whether any gradient needs to flow into `v`.
    pub fn wants(&self, v: Var) -> bool {
        v.0 < self.slots.len() && self.nodes[v.0].requires_grad
    }

    /// Mutable gradient buffer of `v`, zero-initialized on first access.
    /// Returns `None` when `v` does not require a gradient.
    pub fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.wants(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(
            self.slots[v.0]
                .get_or_insert_with(|| vec![T::zero(); len])
                .as_mut_slice(),
        )
    }

    pub fn add(&mut self, v: Var, g: &[T]) {
        if let Some(buf) = self.slot(v) {
            debug_assert_eq!(buf.len(), g.len());
            for (b, &x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        }
    }
}

/// Single-owner recording of a forward computation.
pub struct GradTape<T: Real> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> GradTape<T> {
    pub fn new() -> Self {
        GradTape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (parameter or probed value).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            requires_grad: true,
            leaf: true,
            backward: None,
        })
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            requires_grad: false,
            leaf: false,
            backward: None,
        })
    }

    /// Record an operator output. `backward` receives the output gradient and
    /// must add the input gradients into `grads`. It is dropped when no input
    /// requires a gradient.
    pub fn record<F>(&mut self, value: Tensor<T>, inputs: &[Var], backward: F) -> Var
    where
        F: Fn(&BackwardCtx<T>, &[T], &mut Grads<T>) + 'static,
    {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Node {
            value,
            requires_grad,
            leaf: false,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Seed `loss` (a one-element value) with 1 and propagate to all leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.nodes[loss.0].value.len();
        if n != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must hold one value, has {n}"),
            ));
        }
        let mut slots: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        slots[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = slots[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(f) = &node.backward {
                let ctx = BackwardCtx {
                    nodes: &self.nodes,
                    index: i,
                };
                let mut grads = Grads {
                    nodes: &self.nodes[..i],
                    slots: &mut slots[..i],
                };
                f(&ctx, &g, &mut grads);
            }
            if node.leaf {
                let acc = self.leaf_grads[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
                for (a, &x) in acc.iter_mut().zip(&g) {
                    *a += x;
                }
            }
        }
        Ok(())
    }

    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb || self.value(b).len() == 1 {
            Ok(sa.to_vec())
        } else if self.value(a).len() == 1 {
            Ok(sb.to_vec())
        } else {
            Err(shape_err(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    /// Elementwise sum; either side may be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_pair("add", a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| va[i % va.len()] + vb[i % vb.len()])
            .collect();
        let out = Tensor::from_data(&shape, data)?;
        Ok(self.record(out, &[a, b], move |_, g, grads| {
            for v in [a, b] {
                if let Some(buf) = grads.slot(v) {
                    if buf.len() == g.len() {
                        buf.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                    } else {
                        buf[0] += g.iter().copied().sum();
                    }
                }
            }
        }))
    }

    /// Elementwise product; either side may be a one-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_pair("mul", a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| va[i % va.len()] * vb[i % vb.len()])
            .collect();
        let out = Tensor::from_data(&shape, data)?;
        Ok(self.record(out, &[a, b], move |ctx, g, grads| {
            for (v, other) in [(a, b), (b, a)] {
                let ov = ctx.value(other).data();
                if let Some(buf) = grads.slot(v) {
                    if buf.len() == g.len() {
                        for (i, d) in buf.iter_mut().enumerate() {
                            *d += g[i] * ov[i % ov.len()];
                        }
                    } else {
                        buf[0] += g
                            .iter()
                            .enumerate()
                            .map(|(i, &x)| x * ov[i % ov.len()])
                            .sum();
                    }
                }
            }
        }))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.record(out, &[a], move |_, g, grads| {
            if let Some(buf) = grads.slot(a) {
                buf.iter_mut().zip(g).for_each(|(d, &x)| *d += x * s);
            }
        })
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, dfdy: fn(T, T) -> T) -> Var {
        let out = self.value(a).map(f);
        self.record(out, &[a], move |ctx, g, grads| {
            let x = ctx.value(a).data();
            let y = ctx.output().data();
            if let Some(buf) = grads.slot(a) {
                for i in 0..buf.len() {
                    buf[i] += g[i] * dfdy(x[i], y[i]);
                }
            }
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), |_, y| T::one() - y * y)
    }

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            T::zero(),
            &mut out,
            (n, 1),
        );
        let out = Tensor::from_data(&[m, n], out)?;
        Ok(self.record(out, &[a, b], move |ctx, g, grads| {
            if grads.wants(a) {
                let bv = ctx.value(b).data();
                let da = grads.slot(a).unwrap();
                // dA = G Bᵀ
                T::gemm(m, n, k, T::one(), g, (n, 1), bv, (1, n), T::one(), da, (k, 1));
            }
            if grads.wants(b) {
                let av = ctx.value(a).data();
                let db = grads.slot(b).unwrap();
                // dB = Aᵀ G
                T::gemm(k, m, n, T::one(), av, (1, k), g, (n, 1), T::one(), db, (n, 1));
            }
        }))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.record(Tensor::scalar(s), &[a], move |_, g, grads| {
            if let Some(buf) = grads.slot(a) {
                buf.iter_mut().for_each(|d| *d += g[0]);
            }
        })
    }

    /// `Σ w_i a_i` for a fixed weight vector; used to reduce tensors to a scalar probe.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(a).len() {
            return Err(shape_err(
                "weighted_sum",
                format!("{} weights for {} values", weights.len(), self.value(a).len()),
            ));
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(&weights)
            .map(|(&x, &w)| x * w)
            .sum();
        Ok(self.record(Tensor::scalar(s), &[a], move |_, g, grads| {
            if let Some(buf) = grads.slot(a) {
                buf.iter_mut()
                    .zip(&weights)
                    .for_each(|(d, &w)| *d += g[0] * w);
            }
        }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.record(out, &[a], move |_, g, grads| grads.add(a, g)))
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn activations_at_reference_points() {
        let mut tape = GradTape::new();
        let x = tape.leaf(t(&[2], &[-1.5, 0.0]));
        let r = tape.relu(x);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0]);
        assert_eq!(tape.value(s).data()[1], 0.5);
    }

    #[test]
    fn tanh_derivative_matches_central_difference() {
        let x0: f64 = 0.3;
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::scalar(x0));
        let y = tape.tanh(x);
        tape.backward(y).unwrap();
        let analytic: f64 = tape.grad(x).unwrap()[0];
        let h: f64 = 1e-5;
        let fd = ((x0 + h).tanh() - (x0 - h).tanh()) / (2.0 * h);
        assert!((analytic - fd).abs() < 1e-8, "{analytic} vs {fd}");
    }

    #[test]
    fn matmul_small_cases() {
        let mut tape = GradTape::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);

        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let bad = tape.constant(t(&[3, 1], &[1.0, 1.0, 1.0]));
        assert!(tape.matmul(a, bad).is_err());
    }

    #[test]
    fn matmul_gradients() {
        let mut tape = GradTape::new();
        let a = tape.leaf(t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 1.0, -1.0]));
        let b = tape.leaf(t(&[3, 2], &[0.5, 1.0, -1.0, 2.0, 0.25, 0.0]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        // d/dA sum(AB) = 1 Bᵀ: row sums of B.
        assert_eq!(tape.grad(a).unwrap(), &[1.5, 1.0, 0.25, 1.5, 1.0, 0.25]);
        // d/dB sum(AB) = Aᵀ 1: column sums of A.
        assert_eq!(tape.grad(b).unwrap(), &[4.0, 4.0, -1.0, -1.0, -0.5, -0.5]);
    }

    #[test]
    fn scalar_broadcast_and_shape_errors() {
        let mut tape = GradTape::new();
        let a = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.leaf(Tensor::scalar(2.0));
        let p = tape.mul(a, s).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 4.0, 6.0]);
        let total = tape.sum(p);
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(s).unwrap(), &[6.0]);
        assert_eq!(tape.grad(a).unwrap(), &[2.0, 2.0, 2.0]);

        let b = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn backward_twice_doubles_leaf_gradients() {
        let mut tape = GradTape::new();
        let x = tape.leaf(t(&[2], &[0.3, -0.7]));
        let w = tape.leaf(t(&[2], &[1.5, 2.0]));
        let y = tape.mul(x, w).unwrap();
        let z = tape.tanh(y);
        let l = tape.sum(z);
        tape.backward(l).unwrap();
        let once: Vec<f64> = tape.grad(w).unwrap().to_vec();
        tape.backward(l).unwrap();
        let twice = tape.grad(w).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
        tape.zero_grads();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = GradTape::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let x = tape.leaf(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(c, x).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
        assert!(tape.backward(y).is_err());
    }
}
