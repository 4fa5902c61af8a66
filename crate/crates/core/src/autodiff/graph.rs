//! Reverse-mode automatic differentiation on a dynamically built tape.
//!
//! A [`Graph`] records every operation as a node. Nodes only ever reference
//! earlier nodes, so insertion order is a topological order and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Elementwise binary ops accept operands of identical shape, or one operand
//! with a single element which is broadcast against the other.
//!
//! ```
//! use lppls_core::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap().item(), Some(6.0));
//! ```

use nalgebra::DMatrix;

use super::tensor::{axpy, dot, Tensor};
use crate::error::{LpplsError, Result};
use crate::model::MAX_CONDITION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    MatVec(NodeId, NodeId),
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Cos(NodeId),
    Sin(NodeId),
    Power(NodeId, NodeId),
    Sum(NodeId),
    Mse(NodeId, NodeId),
    Select(NodeId, usize),
    Stack(Vec<NodeId>),
    Reshape(NodeId),
    Solve(NodeId, NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Tensor>,
}

/// A tape of tensor operations.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn broadcast_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(LpplsError::ShapeMismatch(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

#[inline]
fn at(x: &[f64], i: usize) -> f64 {
    if x.len() == 1 {
        x[0]
    } else {
        x[i]
    }
}

/// Gradient w.r.t. an operand that may have been broadcast: sum it back down.
fn reduce_to(operand_numel: usize, upstream: Vec<f64>) -> Vec<f64> {
    if operand_numel == upstream.len() {
        upstream
    } else {
        vec![upstream.iter().sum()]
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn elementwise(&mut self, a: NodeId, b: NodeId, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(va, vb, name)?;
        let numel: usize = shape.iter().product();
        let (da, db) = (va.data(), vb.data());
        let data = (0..numel).map(|i| f(at(da, i), at(db, i))).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = &self.nodes[a.0].value;
        let data = v.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    /// `c * a`.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    /// `a + c`.
    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x + c, Op::AddConst(a))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    /// Rectifier; the derivative at exactly zero is taken to be zero.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    /// Natural logarithm; every element must be positive.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(x) = self.nodes[a.0].value.data().iter().find(|x| !(**x > 0.0)) {
            return Err(LpplsError::Domain(format!("log of non-positive value {x}")));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    /// Elementwise `base^exponent`; every base element must be positive.
    pub fn power(&mut self, base: NodeId, exponent: NodeId) -> Result<NodeId> {
        if let Some(x) = self.nodes[base.0].value.data().iter().find(|x| !(**x > 0.0)) {
            return Err(LpplsError::Domain(format!("power of non-positive base {x}")));
        }
        self.elementwise(base, exponent, "power", f64::powf, Op::Power(base, exponent))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean squared difference between two same-shaped tensors.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(LpplsError::ShapeMismatch(format!(
                "mse: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let n = va.numel() as f64;
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg))
    }

    /// `W x` for `W: [out, in]`, `x: [in]`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (vw, vx) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
        let (rows, cols) = match (vw.shape(), vx.shape()) {
            ([r, c], [k]) if c == k => (*r, *c),
            (sw, sx) => return Err(LpplsError::ShapeMismatch(format!("matvec: {sw:?} x {sx:?}"))),
        };
        let data = (0..rows)
            .map(|r| dot(&vw.data()[r * cols..(r + 1) * cols], vx.data()))
            .collect();
        let rg = self.rg(&[w, x]);
        Ok(self.push(Tensor::vector(data), Op::MatVec(w, x), rg))
    }

    /// Dense affine layer `x W^T + b` for `x: [in]` or `[batch, in]`,
    /// `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vw, vb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let (out, inp) = match vw.shape() {
            [o, i] => (*o, *i),
            s => return Err(LpplsError::ShapeMismatch(format!("linear weight {s:?}"))),
        };
        if vb.shape() != [out] {
            return Err(LpplsError::ShapeMismatch(format!(
                "linear bias {:?} for {out} outputs",
                vb.shape()
            )));
        }
        let (batch, out_shape) = match vx.shape() {
            [i] if *i == inp => (1, vec![out]),
            [bsz, i] if *i == inp => (*bsz, vec![*bsz, out]),
            s => {
                return Err(LpplsError::ShapeMismatch(format!(
                    "linear input {s:?} for weight [{out}, {inp}]"
                )))
            }
        };
        let mut data = vec![0.0; batch * out];
        for r in 0..batch {
            let xr = &vx.data()[r * inp..(r + 1) * inp];
            for o in 0..out {
                data[r * out + o] = dot(&vw.data()[o * inp..(o + 1) * inp], xr) + vb.data()[o];
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Linear { x, w, b }, rg))
    }

    /// Element `index` of `a` (flattened), as a scalar.
    pub fn select(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        let x = *v
            .data()
            .get(index)
            .ok_or_else(|| LpplsError::ShapeMismatch(format!("select {index} from {:?}", v.shape())))?;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(x), Op::Select(a, index), rg))
    }

    /// Stack one-element nodes into a vector.
    pub fn stack(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::with_capacity(items.len());
        for id in items {
            let v = &self.nodes[id.0].value;
            data.push(
                v.item()
                    .ok_or_else(|| LpplsError::ShapeMismatch(format!("stack expects scalars, got {:?}", v.shape())))?,
            );
        }
        let rg = self.rg(items);
        Ok(self.push(Tensor::vector(data), Op::Stack(items.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.nodes[a.0].value.clone();
        let t = Tensor::new(shape.to_vec(), v.into_data())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Solve `G x = r` for square `G: [k, k]`, `r: [k]`. The backward pass
    /// differentiates the solution implicitly through one adjoint solve.
    pub fn solve(&mut self, gram: NodeId, rhs: NodeId) -> Result<NodeId> {
        let (vg, vr) = (&self.nodes[gram.0].value, &self.nodes[rhs.0].value);
        let k = match (vg.shape(), vr.shape()) {
            ([a, b], [c]) if a == b && b == c => *a,
            (sg, sr) => return Err(LpplsError::ShapeMismatch(format!("solve: {sg:?} \\ {sr:?}"))),
        };
        let x = dense_solve(k, vg.data(), vr.data(), false)?;
        let rg = self.rg(&[gram, rhs]);
        Ok(self.push(Tensor::vector(x), Op::Solve(gram, rhs), rg))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(LpplsError::ShapeMismatch(format!(
                "backward needs a scalar loss, got {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(up) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.local_backward(i, &up)?;
            for (parent, g) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&up),
                    None => {
                        node.grad = Some(Tensor::new(node.value.shape().to_vec(), up)?);
                    }
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` w.r.t. each parent.
    fn local_backward(&self, i: usize, up: &[f64]) -> Result<Vec<(NodeId, Vec<f64>)>> {
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let numel = |id: NodeId| self.nodes[id.0].value.numel();
        let out = self.nodes[i].value.data();
        Ok(match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, reduce_to(numel(*a), up.to_vec())),
                (*b, reduce_to(numel(*b), up.to_vec())),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to(numel(*a), up.to_vec())),
                (*b, reduce_to(numel(*b), up.iter().map(|u| -u).collect())),
            ],
            Op::Mul(a, b) => {
                let (da, db) = (val(*a), val(*b));
                let ga = up.iter().enumerate().map(|(k, u)| u * at(db, k)).collect();
                let gb = up.iter().enumerate().map(|(k, u)| u * at(da, k)).collect();
                vec![(*a, reduce_to(da.len(), ga)), (*b, reduce_to(db.len(), gb))]
            }
            Op::Scale(a, c) => vec![(*a, up.iter().map(|u| c * u).collect())],
            Op::AddConst(a) => vec![(*a, up.to_vec())],
            Op::Relu(a) => vec![(
                *a,
                up.iter()
                    .zip(val(*a))
                    .map(|(u, x)| if *x > 0.0 { *u } else { 0.0 })
                    .collect(),
            )],
            Op::Sigmoid(a) => vec![(*a, up.iter().zip(out).map(|(u, y)| u * y * (1.0 - y)).collect())],
            Op::Log(a) => vec![(*a, up.iter().zip(val(*a)).map(|(u, x)| u / x).collect())],
            Op::Cos(a) => vec![(*a, up.iter().zip(val(*a)).map(|(u, x)| -u * x.sin()).collect())],
            Op::Sin(a) => vec![(*a, up.iter().zip(val(*a)).map(|(u, x)| u * x.cos()).collect())],
            Op::Power(base, exp) => {
                let (db, de) = (val(*base), val(*exp));
                // d/db b^e = e b^(e-1) = e y / b ;  d/de b^e = y ln b
                let gb = up
                    .iter()
                    .enumerate()
                    .map(|(k, u)| u * at(de, k) * out[k] / at(db, k))
                    .collect();
                let ge = up
                    .iter()
                    .enumerate()
                    .map(|(k, u)| u * out[k] * at(db, k).ln())
                    .collect();
                vec![(*base, reduce_to(db.len(), gb)), (*exp, reduce_to(de.len(), ge))]
            }
            Op::Sum(a) => vec![(*a, vec![up[0]; numel(*a)])],
            Op::Mse(a, b) => {
                let (da, db) = (val(*a), val(*b));
                let c = 2.0 * up[0] / da.len() as f64;
                let ga: Vec<f64> = da.iter().zip(db).map(|(x, y)| c * (x - y)).collect();
                let gb = ga.iter().map(|g| -g).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::MatVec(w, x) => {
                let (dw, dx) = (val(*w), val(*x));
                let cols = dx.len();
                let mut gw = vec![0.0; dw.len()];
                let mut gx = vec![0.0; cols];
                for (r, u) in up.iter().enumerate() {
                    axpy(*u, dx, &mut gw[r * cols..(r + 1) * cols]);
                    axpy(*u, &dw[r * cols..(r + 1) * cols], &mut gx);
                }
                vec![(*w, gw), (*x, gx)]
            }
            Op::Linear { x, w, b } => {
                let (dx, dw) = (val(*x), val(*w));
                let out_n = numel(*b);
                let inp = dw.len() / out_n;
                let batch = dx.len() / inp;
                let mut gb = vec![0.0; out_n];
                let mut gw = vec![0.0; dw.len()];
                let need_x = self.nodes[x.0].requires_grad;
                let mut gx = if need_x { vec![0.0; dx.len()] } else { vec![] };
                for r in 0..batch {
                    let xr = &dx[r * inp..(r + 1) * inp];
                    for o in 0..out_n {
                        let u = up[r * out_n + o];
                        if u == 0.0 {
                            continue;
                        }
                        gb[o] += u;
                        axpy(u, xr, &mut gw[o * inp..(o + 1) * inp]);
                        if need_x {
                            axpy(u, &dw[o * inp..(o + 1) * inp], &mut gx[r * inp..(r + 1) * inp]);
                        }
                    }
                }
                let mut v = vec![(*w, gw), (*b, gb)];
                if need_x {
                    v.push((*x, gx));
                }
                v
            }
            Op::Select(a, idx) => {
                let mut g = vec![0.0; numel(*a)];
                g[*idx] = up[0];
                vec![(*a, g)]
            }
            Op::Stack(items) => items.iter().zip(up).map(|(id, u)| (*id, vec![*u])).collect(),
            Op::Reshape(a) => vec![(*a, up.to_vec())],
            Op::Solve(gram, rhs) => {
                let k = out.len();
                // adjoint: G^T lambda = x_bar ; r_bar = lambda ; G_bar = -lambda x^T
                let lambda = dense_solve(k, val(*gram), up, true)?;
                let mut gg = vec![0.0; k * k];
                for r in 0..k {
                    for c in 0..k {
                        gg[r * k + c] = -lambda[r] * out[c];
                    }
                }
                vec![(*gram, gg), (*rhs, lambda)]
            }
        })
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dense_solve(k: usize, a: &[f64], b: &[f64], transpose: bool) -> Result<Vec<f64>> {
    let mut m = DMatrix::from_row_slice(k, k, a);
    if transpose {
        m = m.transpose();
    }
    let sv = m.singular_values();
    let (max, min) = (sv.max(), sv.min());
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(cond <= MAX_CONDITION) {
        return Err(LpplsError::SingularSystem { cond });
    }
    let rhs = nalgebra::DVector::from_column_slice(b);
    let x = m.lu().solve(&rhs).ok_or(LpplsError::SingularSystem { cond })?;
    Ok(x.iter().copied().collect())
}
