//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op records its inputs and saves its output; [`Tape::backward`]
//! walks the tape in reverse and accumulates gradients additively. A tape
//! is single-use: a second backward pass is a state error.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::store::ParameterStore;
use crate::tensor::{matvec, Shape, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(String),
    MatVec { w: NodeId, x: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulScalar { s: NodeId, v: NodeId },
    ScaleConst { c: f64, v: NodeId },
    Relu(NodeId),
    Tanh(NodeId),
    Dot(NodeId, NodeId),
    Sqrt(NodeId),
    Exp(NodeId),
    Div(NodeId, NodeId),
    Mean(Vec<NodeId>),
    Stack(Vec<NodeId>),
    Softmax { v: NodeId, temp: f64 },
    LogSumExp(NodeId),
    Index { v: NodeId, i: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    by_param: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node[id.0].as_ref()
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.by_param
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Const)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Registers a named parameter slot as a leaf; its gradient flows back
    /// into [`Gradients::params`] under the same name.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<NodeId> {
        let value = store.value(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_string())))
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let (rows, cols) = match *self.value(w).shape() {
            Shape::Matrix(r, c) => (r, c),
            _ => panic!("matvec: lhs must be a matrix"),
        };
        let xv = self.value(x);
        assert_eq!(xv.shape(), &Shape::Vector(cols), "matvec: shape mismatch");
        let mut out = vec![0.0; rows];
        matvec(rows, cols, self.value(w).data(), self.value(x).data(), &mut out);
        self.push(Tensor::vector(out), Op::MatVec { w, x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add: shape mismatch");
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let mut t = Tensor::zeros_like(self.value(a));
        t.data_mut().copy_from_slice(&data);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub: shape mismatch");
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let mut t = Tensor::zeros_like(self.value(a));
        t.data_mut().copy_from_slice(&data);
        self.push(t, Op::Sub(a, b))
    }

    /// Scalar node times tensor node (elementwise).
    pub fn mul_scalar(&mut self, s: NodeId, v: NodeId) -> NodeId {
        assert_eq!(self.value(s).shape(), &Shape::Scalar, "mul_scalar: lhs not scalar");
        let sv = self.value(s).as_scalar();
        let data: Vec<f64> = self.value(v).data().iter().map(|x| sv * x).collect();
        let mut t = Tensor::zeros_like(self.value(v));
        t.data_mut().copy_from_slice(&data);
        self.push(t, Op::MulScalar { s, v })
    }

    pub fn scale_const(&mut self, c: f64, v: NodeId) -> NodeId {
        let data: Vec<f64> = self.value(v).data().iter().map(|x| c * x).collect();
        let mut t = Tensor::zeros_like(self.value(v));
        t.data_mut().copy_from_slice(&data);
        self.push(t, Op::ScaleConst { c, v })
    }

    pub fn relu(&mut self, v: NodeId) -> NodeId {
        let data: Vec<f64> = self.value(v).data().iter().map(|x| x.max(0.0)).collect();
        let mut t = Tensor::zeros_like(self.value(v));
        t.data_mut().copy_from_slice(&data);
        self.push(t, Op::Relu(v))
    }

    pub fn tanh(&mut self, v: NodeId) -> NodeId {
        let data: Vec<f64> = self.value(v).data().iter().map(|x| x.tanh()).collect();
        let mut t = Tensor::zeros_like(self.value(v));
        t.data_mut().copy_from_slice(&data);
        self.push(t, Op::Tanh(v))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "dot: shape mismatch");
        let v = crate::tensor::dot(self.value(a).data(), self.value(b).data());
        self.push(Tensor::scalar(v), Op::Dot(a, b))
    }

    pub fn sqrt(&mut self, s: NodeId) -> NodeId {
        let v = self.value(s).as_scalar();
        assert!(v >= 0.0, "sqrt of negative value");
        self.push(Tensor::scalar(v.sqrt()), Op::Sqrt(s))
    }

    pub fn exp(&mut self, s: NodeId) -> NodeId {
        let v = self.value(s).as_scalar();
        self.push(Tensor::scalar(v.exp()), Op::Exp(s))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).as_scalar();
        let bv = self.value(b).as_scalar();
        self.push(Tensor::scalar(av / bv), Op::Div(a, b))
    }

    /// Arithmetic mean of same-shaped tensors.
    pub fn mean(&mut self, items: &[NodeId]) -> NodeId {
        assert!(!items.is_empty(), "mean of empty list");
        let mut acc = self.value(items[0]).clone();
        for &id in &items[1..] {
            assert_eq!(acc.shape(), self.value(id).shape(), "mean: shape mismatch");
            for (a, b) in acc.data_mut().iter_mut().zip(self.value(id).data()) {
                *a += b;
            }
        }
        let n = items.len() as f64;
        acc.data_mut().iter_mut().for_each(|x| *x /= n);
        self.push(acc, Op::Mean(items.to_vec()))
    }

    /// Packs scalar nodes into one vector node.
    pub fn stack(&mut self, items: &[NodeId]) -> NodeId {
        let data: Vec<f64> = items.iter().map(|&id| self.value(id).as_scalar()).collect();
        self.push(Tensor::vector(data), Op::Stack(items.to_vec()))
    }

    /// Temperature softmax over a vector node; output sums to one.
    pub fn softmax(&mut self, v: NodeId, temp: f64) -> NodeId {
        let xs = self.value(v).data();
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|x| (temp * (x - m)).exp()).collect();
        let z: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / z).collect();
        self.push(Tensor::vector(out), Op::Softmax { v, temp })
    }

    pub fn logsumexp(&mut self, v: NodeId) -> NodeId {
        let xs = self.value(v).data();
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
        self.push(Tensor::scalar(m + s.ln()), Op::LogSumExp(v))
    }

    pub fn index(&mut self, v: NodeId, i: usize) -> NodeId {
        let x = self.value(v).data()[i];
        self.push(Tensor::scalar(x), Op::Index { v, i })
    }

    // ---- compositions ----

    /// `W x + b`.
    pub fn linear(&mut self, w: NodeId, b: NodeId, x: NodeId) -> NodeId {
        let wx = self.matvec(w, x);
        self.add(wx, b)
    }

    pub fn vector_norm(&mut self, v: NodeId) -> NodeId {
        let d = self.dot(v, v);
        self.sqrt(d)
    }

    /// Cosine similarity of two vector nodes; zero norm is a domain error.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let na = self.vector_norm(a);
        let nb = self.vector_norm(b);
        if self.value(na).as_scalar() == 0.0 || self.value(nb).as_scalar() == 0.0 {
            return Err(Error::Numeric("cosine similarity of zero-norm vector".into()));
        }
        let d = self.dot(a, b);
        let nn = self.mul_scalar(na, nb);
        Ok(self.div(d, nn))
    }

    /// Squared Euclidean distance between two vector nodes.
    pub fn sqdist(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        self.dot(d, d)
    }

    /// Reverse pass from a scalar `loss` node. Consumes the tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State("backward on a consumed tape".into()));
        }
        self.consumed = true;
        if self.value(loss).shape() != &Shape::Scalar {
            return Err(Error::Argument("backward requires a scalar loss node".into()));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut by_param: BTreeMap<String, Tensor> = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if let Some(g) = &grads[idx] {
                    by_param
                        .entry(name.clone())
                        .and_modify(|acc| {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        })
                        .or_insert_with(|| g.clone());
                }
            }
        }
        Ok(Gradients { by_node: grads, by_param })
    }

    fn accumulate_parents(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], id: NodeId, delta: &[f64], template: &Tensor| {
            let slot = grads[id.0].get_or_insert_with(|| Tensor::zeros_like(template));
            for (a, b) in slot.data_mut().iter_mut().zip(delta) {
                *a += b;
            }
        };
        match &self.nodes[idx].op {
            Op::Const | Op::Param(_) => {}
            Op::MatVec { w, x } => {
                let (rows, cols) = match *self.value(*w).shape() {
                    Shape::Matrix(r, c) => (r, c),
                    _ => unreachable!(),
                };
                let xv = self.value(*x).data().to_vec();
                let wv = self.value(*w).data().to_vec();
                let gy = g.data();
                // dW = gy ⊗ x
                let mut dw = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dw[r * cols + c] = gy[r] * xv[c];
                    }
                }
                add_to(grads, *w, &dw, self.value(*w));
                // dx = Wᵀ gy
                let mut dx = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dx[c] += wv[r * cols + c] * gy[r];
                    }
                }
                add_to(grads, *x, &dx, self.value(*x));
            }
            Op::Add(a, b) => {
                add_to(grads, *a, g.data(), self.value(*a));
                add_to(grads, *b, g.data(), self.value(*b));
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.data(), self.value(*a));
                let neg: Vec<f64> = g.data().iter().map(|x| -x).collect();
                add_to(grads, *b, &neg, self.value(*b));
            }
            Op::MulScalar { s, v } => {
                let sv = self.value(*s).as_scalar();
                let vv = self.value(*v).data();
                let ds: f64 = g.data().iter().zip(vv).map(|(gy, x)| gy * x).sum();
                add_to(grads, *s, &[ds], self.value(*s));
                let dv: Vec<f64> = g.data().iter().map(|gy| sv * gy).collect();
                add_to(grads, *v, &dv, self.value(*v));
            }
            Op::ScaleConst { c, v } => {
                let dv: Vec<f64> = g.data().iter().map(|gy| c * gy).collect();
                add_to(grads, *v, &dv, self.value(*v));
            }
            Op::Relu(v) => {
                let dv: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.value(*v).data())
                    .map(|(gy, x)| if *x > 0.0 { *gy } else { 0.0 })
                    .collect();
                add_to(grads, *v, &dv, self.value(*v));
            }
            Op::Tanh(v) => {
                let yv = self.value(NodeId(idx)).data();
                let dv: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(yv)
                    .map(|(gy, y)| gy * (1.0 - y * y))
                    .collect();
                add_to(grads, *v, &dv, self.value(*v));
            }
            Op::Dot(a, b) => {
                let gy = g.as_scalar();
                let da: Vec<f64> = self.value(*b).data().iter().map(|x| gy * x).collect();
                let db: Vec<f64> = self.value(*a).data().iter().map(|x| gy * x).collect();
                add_to(grads, *a, &da, self.value(*a));
                add_to(grads, *b, &db, self.value(*b));
            }
            Op::Sqrt(s) => {
                let y = self.value(NodeId(idx)).as_scalar();
                let ds = g.as_scalar() / (2.0 * y);
                add_to(grads, *s, &[ds], self.value(*s));
            }
            Op::Exp(s) => {
                let y = self.value(NodeId(idx)).as_scalar();
                add_to(grads, *s, &[g.as_scalar() * y], self.value(*s));
            }
            Op::Div(a, b) => {
                let av = self.value(*a).as_scalar();
                let bv = self.value(*b).as_scalar();
                let gy = g.as_scalar();
                add_to(grads, *a, &[gy / bv], self.value(*a));
                add_to(grads, *b, &[-gy * av / (bv * bv)], self.value(*b));
            }
            Op::Mean(items) => {
                let n = items.len() as f64;
                let dv: Vec<f64> = g.data().iter().map(|gy| gy / n).collect();
                for &id in items {
                    add_to(grads, id, &dv, self.value(id));
                }
            }
            Op::Stack(items) => {
                for (i, &id) in items.iter().enumerate() {
                    add_to(grads, id, &[g.data()[i]], self.value(id));
                }
            }
            Op::Softmax { v, temp } => {
                let y = self.value(NodeId(idx)).data();
                let gy = g.data();
                let inner: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                let dv: Vec<f64> = y
                    .iter()
                    .zip(gy)
                    .map(|(yi, gi)| temp * yi * (gi - inner))
                    .collect();
                add_to(grads, *v, &dv, self.value(*v));
            }
            Op::LogSumExp(v) => {
                let xs = self.value(*v).data();
                let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                let gy = g.as_scalar();
                let dv: Vec<f64> = exps.iter().map(|e| gy * e / z).collect();
                add_to(grads, *v, &dv, self.value(*v));
            }
            Op::Index { v, i } => {
                let mut dv = vec![0.0; self.value(*v).numel()];
                dv[*i] = g.as_scalar();
                add_to(grads, *v, &dv, self.value(*v));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_constant_input_is_uniform() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![3.7, 3.7]));
        let s = tape.softmax(v, 2.5);
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0, -0.5]));
        let b = tape.constant(Tensor::vector(vec![1.0 + 7.0, 2.0 + 7.0, -0.5 + 7.0]));
        let sa = tape.softmax(a, 1.3);
        let sb = tape.softmax(b, 1.3);
        for (x, y) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_identity_map() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let x = tape.constant(Tensor::vector(vec![4.0, -1.5]));
        let y = tape.linear(w, b, x);
        assert_eq!(tape.value(y).data(), &[4.0, -1.5]);
    }

    #[test]
    fn backward_of_sum_wx_gives_outer_product() {
        use crate::store::ParameterStore;
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0]), true);
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, -1.0]));
        let y = tape.matvec(w, x);
        let ones = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let loss = tape.dot(y, ones);
        let grads = tape.backward(loss).unwrap();
        let gw = grads.params().get("w").unwrap();
        assert_eq!(gw.data(), &[1.0, 2.0, -1.0, 1.0, 2.0, -1.0]);
    }

    #[test]
    fn backward_twice_is_state_error() {
        let mut tape = Tape::new();
        let a = tape.scalar(2.0);
        let b = tape.scalar(3.0);
        let loss = tape.mul_scalar(a, b);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::State(_))));
    }

    #[test]
    fn untouched_param_has_no_gradient() {
        use crate::store::ParameterStore;
        let mut store = ParameterStore::new();
        store.insert("used", Tensor::scalar(2.0), true);
        store.insert("unused", Tensor::scalar(5.0), true);
        let mut tape = Tape::new();
        let p = tape.param(&store, "used").unwrap();
        let c = tape.scalar(3.0);
        let loss = tape.mul_scalar(p, c);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.params().get("unused").is_none());
        assert_eq!(grads.params().get("used").unwrap().as_scalar(), 3.0);
    }
}
