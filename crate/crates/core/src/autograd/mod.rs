//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the nodes in reverse creation order, which is a
//! valid topological order because a node can only reference earlier nodes.
//!
//! ```
//! use sct_codec::autograd::Graph;
//! use sct_codec::tensor::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::new(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
//! let loss = g.sum(x);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
//! ```

pub(crate) mod conv;

use crate::error::TensorError;
use crate::tensor::{nhwc, with_nhwc, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy {
        x: Var,
        s: Var,
        index: usize,
    },
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: conv::ConvGeom,
    },
    LstmCell {
        gates: Var,
        cell: Var,
    },
    SliceChannels {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatChannels(Var, Var),
    DepthToSpace {
        x: Var,
        block: usize,
    },
    SpaceToDepth {
        x: Var,
        block: usize,
    },
    StraightThrough(Var),
    MaskSpatial {
        x: Var,
        keep: Vec<T>,
    },
    WeightedMean {
        x: Var,
        weights: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy { .. } => "scale_by",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Abs(_) => "abs",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Conv2d { .. } => "conv2d",
            Op::LstmCell { .. } => "lstm_cell",
            Op::SliceChannels { .. } => "slice_channels",
            Op::ConcatChannels(..) => "concat_channels",
            Op::DepthToSpace { .. } => "depth_to_space",
            Op::SpaceToDepth { .. } => "space_to_depth",
            Op::StraightThrough(_) => "straight_through",
            Op::MaskSpatial { .. } => "mask_spatial",
            Op::WeightedMean { .. } => "weighted_mean",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    scope: usize,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    scopes: Vec<String>,
    scope: usize,
    retain: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            scopes: vec![String::new()],
            scope: 0,
            retain: false,
            consumed: false,
        }
    }

    /// Allows [`Graph::backward`] to be called more than once.
    pub fn retain_graph(mut self) -> Self {
        self.retain = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Labels subsequently created nodes, for non-finite diagnostics.
    pub fn set_scope(&mut self, name: impl Into<String>) {
        self.scopes.push(name.into());
        self.scope = self.scopes.len() - 1;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            scope: self.scope,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// First node (creation order) holding a NaN or infinity, as
    /// `(node index, scope label, op name)`.
    pub fn first_non_finite(&self) -> Option<(usize, String, &'static str)> {
        self.first_non_finite_from(0)
    }

    /// [`Graph::first_non_finite`] restricted to nodes created at or after
    /// index `start`.
    pub fn first_non_finite_from(&self, start: usize) -> Option<(usize, String, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .skip(start)
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, self.scopes[n.scope].clone(), n.op.name()))
    }

    /// Label currently applied to new nodes.
    pub fn scope(&self) -> &str {
        &self.scopes[self.scope]
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::new(x.shape(), data).expect("zip shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x).map(|p| p * factor);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, factor), rg)
    }

    /// `x * s[index]` where `s` is a rank-1 tensor (per-iteration gains).
    pub fn scale_by(&mut self, x: Var, s: Var, index: usize) -> Result<Var, TensorError> {
        let s_shape = self.shape(s);
        if s_shape.len() != 1 || index >= s_shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_by",
                left: s_shape.to_vec(),
                right: vec![index],
            });
        }
        let factor = self.value(s).data()[index];
        let v = self.value(x).map(|p| p * factor);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(v, Op::ScaleBy { x, s, index }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|p| p.tanh());
        let rg = self.rg(x);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|p| p.abs());
        let rg = self.rg(x);
        self.push(v, Op::Abs(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::from_f64(t.len().max(1) as f64));
        let rg = self.rg(x);
        self.push(v, Op::Mean(x), rg)
    }

    /// Mean absolute difference.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    /// Same-padded 2-D convolution. `weight` is `(kh, kw, cin, cout)`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var, TensorError> {
        let geom = conv::ConvGeom::new(
            self.shape(input),
            self.shape(weight),
            bias.map(|b| self.shape(b)),
            stride,
        )?;
        let v = conv::forward(
            &geom,
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        );
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Fused LSTM cell update. `gates` holds pre-activations in channel
    /// order `[input, forget, candidate, output]`; the result packs
    /// `[hidden | cell]` along channels.
    pub fn lstm_cell(&mut self, gates: Var, cell: Var) -> Result<Var, TensorError> {
        let [n, h, w, c4] = nhwc(self.shape(gates))?;
        let [cn, ch, cw, hid] = nhwc(self.shape(cell))?;
        if c4 != 4 * hid || (n, h, w) != (cn, ch, cw) {
            return Err(TensorError::ShapeMismatch {
                op: "lstm_cell",
                left: self.shape(gates).to_vec(),
                right: self.shape(cell).to_vec(),
            });
        }
        let gv = self.value(gates).data();
        let cv = self.value(cell).data();
        let mut out = vec![T::zero(); n * h * w * 2 * hid];
        for p in 0..n * h * w {
            let gr = &gv[p * c4..(p + 1) * c4];
            let cr = &cv[p * hid..(p + 1) * hid];
            let (oh, oc) = out[p * 2 * hid..(p + 1) * 2 * hid].split_at_mut(hid);
            for j in 0..hid {
                let i = sigmoid(gr[j]);
                let f = sigmoid(gr[hid + j]);
                let g = gr[2 * hid + j].tanh();
                let o = sigmoid(gr[3 * hid + j]);
                let c = f * cr[j] + i * g;
                oc[j] = c;
                oh[j] = o * c.tanh();
            }
        }
        let shape = with_nhwc(self.shape(cell), n, h, w, 2 * hid);
        let v = Tensor::new(&shape, out)?;
        let rg = self.rg(gates) || self.rg(cell);
        Ok(self.push(v, Op::LstmCell { gates, cell }, rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let [n, h, w, c] = nhwc(self.shape(x))?;
        if start + len > c || len == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "slice_channels",
                left: self.shape(x).to_vec(),
                right: vec![start, len],
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * h * w * len);
        for p in 0..n * h * w {
            out.extend_from_slice(&src[p * c + start..p * c + start + len]);
        }
        let shape = with_nhwc(self.shape(x), n, h, w, len);
        let v = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::SliceChannels { x, start, len }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let [n, h, w, ca] = nhwc(self.shape(a))?;
        let [bn, bh, bw, cb] = nhwc(self.shape(b))?;
        if (n, h, w) != (bn, bh, bw) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * h * w * (ca + cb));
        for p in 0..n * h * w {
            out.extend_from_slice(&av[p * ca..(p + 1) * ca]);
            out.extend_from_slice(&bv[p * cb..(p + 1) * cb]);
        }
        let shape = with_nhwc(self.shape(a), n, h, w, ca + cb);
        let v = Tensor::new(&shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::ConcatChannels(a, b), rg))
    }

    pub fn depth_to_space(&mut self, x: Var, block: usize) -> Result<Var, TensorError> {
        let v = depth_to_space(self.value(x), block)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::DepthToSpace { x, block }, rg))
    }

    pub fn space_to_depth(&mut self, x: Var, block: usize) -> Result<Var, TensorError> {
        let v = space_to_depth(self.value(x), block)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::SpaceToDepth { x, block }, rg))
    }

    /// Forward value `hard`, gradient passed unchanged to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor<T>) -> Result<Var, TensorError> {
        if hard.shape() != self.shape(soft) {
            return Err(TensorError::ShapeMismatch {
                op: "straight_through",
                left: self.shape(soft).to_vec(),
                right: hard.shape().to_vec(),
            });
        }
        let rg = self.rg(soft);
        Ok(self.push(hard, Op::StraightThrough(soft), rg))
    }

    /// Multiplies every channel at spatial position `p` by `keep[p]`.
    pub fn mask_spatial(&mut self, x: Var, keep: Vec<T>) -> Result<Var, TensorError> {
        let [n, h, w, c] = nhwc(self.shape(x))?;
        if keep.len() != n * h * w {
            return Err(TensorError::ShapeMismatch {
                op: "mask_spatial",
                left: self.shape(x).to_vec(),
                right: vec![keep.len()],
            });
        }
        let mut v = self.value(x).clone();
        for (row, &k) in v.data_mut().chunks_exact_mut(c).zip(&keep) {
            for e in row {
                *e *= k;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(v, Op::MaskSpatial { x, keep }, rg))
    }

    /// `Σ x[p, c] * weights[p] / (Σ weights * channels)`, zero when all
    /// weights vanish.
    pub fn weighted_mean(&mut self, x: Var, weights: Vec<T>) -> Result<Var, TensorError> {
        let [n, h, w, c] = nhwc(self.shape(x))?;
        if weights.len() != n * h * w {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_mean",
                left: self.shape(x).to_vec(),
                right: vec![weights.len()],
            });
        }
        let denom: T = weights.iter().copied().sum::<T>() * T::from_f64(c as f64);
        let total = if denom > T::zero() {
            let s: T = self
                .value(x)
                .data()
                .chunks_exact(c)
                .zip(&weights)
                .map(|(row, &wt)| row.iter().copied().sum::<T>() * wt)
                .sum();
            s / denom
        } else {
            T::zero()
        };
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(total), Op::WeightedMean { x, weights }, rg))
    }

    /// Reverse pass from a scalar loss. Every node that requires a gradient
    /// keeps its accumulated gradient in the result.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(loss_shape));
        }
        if !self.retain {
            self.consumed = true;
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(&loss_shape));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &dout, &mut grads);
            grads[idx] = Some(dout);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, dout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, g: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += *x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };
        let dy = dout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, dout.clone());
                acc(*b, dout.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, dout.clone());
                acc(*b, dout.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, elementwise(dout, bv, |d, q| d * q));
                }
                if self.rg(*b) {
                    acc(*b, elementwise(dout, av, |d, p| d * p));
                }
            }
            Op::Scale(x, factor) => acc(*x, dout.map(|d| d * *factor)),
            Op::ScaleBy { x, s, index } => {
                let sv = self.value(*s);
                let factor = sv.data()[*index];
                if self.rg(*x) {
                    acc(*x, dout.map(|d| d * factor));
                }
                if self.rg(*s) {
                    let xv = self.value(*x).data();
                    let g: T = dy.iter().zip(xv).map(|(&d, &p)| d * p).sum();
                    let mut ds = Tensor::zeros(sv.shape());
                    ds.data_mut()[*index] = g;
                    acc(*s, ds);
                }
            }
            Op::Sigmoid(x) => {
                acc(
                    *x,
                    elementwise(dout, &node.value, |d, y| d * y * (T::one() - y)),
                );
            }
            Op::Tanh(x) => {
                acc(
                    *x,
                    elementwise(dout, &node.value, |d, y| d * (T::one() - y * y)),
                );
            }
            Op::Abs(x) => {
                // subgradient 0 at the kink
                acc(
                    *x,
                    elementwise(dout, self.value(*x), |d, p| {
                        if p > T::zero() {
                            d
                        } else if p < T::zero() {
                            -d
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), dy[0])),
            Op::Mean(x) => {
                let n = T::from_f64(self.value(*x).len().max(1) as f64);
                acc(*x, Tensor::full(self.shape(*x), dy[0] / n));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = [
                    self.rg(*input),
                    self.rg(*weight),
                    bias.is_some_and(|b| self.rg(b)),
                ];
                let g = conv::backward(geom, self.value(*input), self.value(*weight), dout, need);
                if let Some(d) = g.input {
                    acc(*input, d);
                }
                if let Some(d) = g.weight {
                    acc(*weight, d);
                }
                if let (Some(b), Some(d)) = (bias, g.bias) {
                    acc(*b, d);
                }
            }
            Op::LstmCell { gates, cell } => {
                let (dg, dc) = lstm_cell_backward(self.value(*gates), self.value(*cell), dout);
                acc(*gates, dg);
                acc(*cell, dc);
            }
            Op::SliceChannels { x, start, len } => {
                let shape = self.shape(*x);
                let c = *shape.last().unwrap();
                let mut dx = Tensor::zeros(shape);
                for (row, src) in dx.data_mut().chunks_exact_mut(c).zip(dy.chunks_exact(*len)) {
                    row[*start..*start + *len].copy_from_slice(src);
                }
                acc(*x, dx);
            }
            Op::ConcatChannels(a, b) => {
                let ca = *self.shape(*a).last().unwrap();
                let cb = *self.shape(*b).last().unwrap();
                let mut da = Vec::with_capacity(self.value(*a).len());
                let mut db = Vec::with_capacity(self.value(*b).len());
                for row in dy.chunks_exact(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                acc(*a, Tensor::new(self.shape(*a), da).expect("concat grad"));
                acc(*b, Tensor::new(self.shape(*b), db).expect("concat grad"));
            }
            Op::DepthToSpace { x, block } => {
                acc(
                    *x,
                    space_to_depth(dout, *block).expect("inverse of valid shuffle"),
                );
            }
            Op::SpaceToDepth { x, block } => {
                acc(
                    *x,
                    depth_to_space(dout, *block).expect("inverse of valid shuffle"),
                );
            }
            Op::StraightThrough(soft) => acc(*soft, dout.clone()),
            Op::MaskSpatial { x, keep } => {
                let c = *self.shape(*x).last().unwrap();
                let mut dx = dout.clone();
                for (row, &k) in dx.data_mut().chunks_exact_mut(c).zip(keep) {
                    for e in row {
                        *e *= k;
                    }
                }
                acc(*x, dx);
            }
            Op::WeightedMean { x, weights } => {
                let c = *self.shape(*x).last().unwrap();
                let denom: T = weights.iter().copied().sum::<T>() * T::from_f64(c as f64);
                let mut dx = Tensor::zeros(self.shape(*x));
                if denom > T::zero() {
                    for (row, &wt) in dx.data_mut().chunks_exact_mut(c).zip(weights) {
                        row.fill(dy[0] * wt / denom);
                    }
                }
                acc(*x, dx);
            }
        }
    }
}

fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| f(p, q))
        .collect();
    Tensor::new(a.shape(), data).expect("elementwise shape")
}

fn lstm_cell_backward<T: Scalar>(
    gates: &Tensor<T>,
    cell: &Tensor<T>,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let hid = *cell.shape().last().unwrap();
    let c4 = 4 * hid;
    let gv = gates.data();
    let cv = cell.data();
    let dy = dout.data();
    let mut dg = vec![T::zero(); gv.len()];
    let mut dc = vec![T::zero(); cv.len()];
    let one = T::one();
    for p in 0..cv.len() / hid {
        let gr = &gv[p * c4..(p + 1) * c4];
        let cr = &cv[p * hid..(p + 1) * hid];
        let dh = &dy[p * 2 * hid..p * 2 * hid + hid];
        let dce = &dy[p * 2 * hid + hid..(p + 1) * 2 * hid];
        let dgr = &mut dg[p * c4..(p + 1) * c4];
        for j in 0..hid {
            let i = sigmoid(gr[j]);
            let f = sigmoid(gr[hid + j]);
            let g = gr[2 * hid + j].tanh();
            let o = sigmoid(gr[3 * hid + j]);
            let c = f * cr[j] + i * g;
            let t = c.tanh();
            let dct = dce[j] + dh[j] * o * (one - t * t);
            dgr[j] = dct * g * i * (one - i);
            dgr[hid + j] = dct * cr[j] * f * (one - f);
            dgr[2 * hid + j] = dct * i * (one - g * g);
            dgr[3 * hid + j] = dh[j] * t * o * (one - o);
            dc[p * hid + j] = dct * f;
        }
    }
    (
        Tensor::new(gates.shape(), dg).expect("gate grad"),
        Tensor::new(cell.shape(), dc).expect("cell grad"),
    )
}

/// `(n, h, w, c) -> (n, h*b, w*b, c/b²)`; within each block, channel groups
/// are laid out row-major: group `i*b + j` lands at offset `(i, j)`.
pub fn depth_to_space<T: Scalar>(x: &Tensor<T>, block: usize) -> Result<Tensor<T>, TensorError> {
    let [n, h, w, c] = x.nhwc()?;
    if block == 0 || c % (block * block) != 0 {
        return Err(TensorError::IndivisibleChannels { channels: c, block });
    }
    let oc = c / (block * block);
    let (oh, ow) = (h * block, w * block);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let s = ((b * h + y) * w + xx) * c;
                for i in 0..block {
                    for j in 0..block {
                        let d = ((b * oh + y * block + i) * ow + xx * block + j) * oc;
                        let g = s + (i * block + j) * oc;
                        out[d..d + oc].copy_from_slice(&src[g..g + oc]);
                    }
                }
            }
        }
    }
    Tensor::new(&with_nhwc(x.shape(), n, oh, ow, oc), out)
}

/// Inverse of [`depth_to_space`].
pub fn space_to_depth<T: Scalar>(x: &Tensor<T>, block: usize) -> Result<Tensor<T>, TensorError> {
    let [n, h, w, c] = x.nhwc()?;
    if block == 0 {
        return Err(TensorError::IndivisibleSpatial { extent: h, block });
    }
    for extent in [h, w] {
        if extent % block != 0 {
            return Err(TensorError::IndivisibleSpatial { extent, block });
        }
    }
    let (oh, ow, oc) = (h / block, w / block, c * block * block);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for y in 0..oh {
            for xx in 0..ow {
                let d = ((b * oh + y) * ow + xx) * oc;
                for i in 0..block {
                    for j in 0..block {
                        let s = ((b * h + y * block + i) * w + xx * block + j) * c;
                        let g = d + (i * block + j) * c;
                        out[g..g + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    Tensor::new(&with_nhwc(x.shape(), n, oh, ow, oc), out)
}

#[cfg(test)]
mod tests;
