//! Operation recording and reverse-mode gradient propagation.
//!
//! Every op appends one node whose inputs are already on the tape, so the
//! recording order is a topological order. [`Tape::backward`] walks it in
//! exact reverse.

use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Hardswish,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Hardswish => {
                let three = T::from_f64_lossy(3.0);
                let six = T::from_f64_lossy(6.0);
                x * (x + three).max(T::zero()).min(six) / six
            }
        }
    }

    /// Derivative, with subgradient 0 at the relu kink and the outer
    /// branch value at the hardswish breakpoints.
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Hardswish => {
                let three = T::from_f64_lossy(3.0);
                if x <= -three {
                    T::zero()
                } else if x >= three {
                    T::one()
                } else {
                    (x + x + three) / T::from_f64_lossy(6.0)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self { stride: 1, padding: 0 }
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: usize, k: usize, b: usize, geom: ConvGeom, cols: Vec<T> },
    Dense { x: usize, w: usize, b: usize, m: usize, inner: usize, n: usize },
    MatMul { a: usize, b: usize, m: usize, inner: usize, n: usize },
    Act { x: usize, kind: Activation },
    AvgPool { x: usize, n: usize, hw: usize, c: usize },
    SoftmaxCe { logits: usize, probs: Vec<T>, labels: Vec<usize>, k: usize },
    SoftmaxRows { x: usize, k: usize },
    Blend { image: usize, alphas: usize, c: usize },
    WeightedBlend { image: usize, weights: usize, hw: usize, c: usize },
    ChannelsToBatch { x: usize, n: usize, hw: usize, c: usize },
    Reshape { x: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, factor: T },
    Sum { x: usize },
    Map { x: usize, df: fn(T) -> T },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    needs_grad: bool,
    op: Op<T>,
}

/// A single-use recording of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor as an input. Its `requires_grad` flag decides
    /// whether [`Tape::backward`] reports a gradient for it.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Result<Var> {
        let requires_grad = tensor.requires_grad();
        self.push_node(
            "leaf",
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            requires_grad,
            requires_grad,
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, tensor: &Tensor<T>) -> Result<Var> {
        self.push_node(
            "constant",
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            false,
            false,
            Op::Leaf,
        )
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shapes are consistent")
    }

    /// Gradient of the last backward pass with respect to a `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push_node(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        requires_grad: bool,
        needs_grad: bool,
        op: Op<T>,
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            needs_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn rank_check(&self, op: &'static str, v: Var, name: &str, rank: usize) -> Result<&[usize]> {
        let shape = &self.nodes[v.0].shape;
        if shape.len() != rank {
            return Err(Error::dim(op, format!("{name} must have rank {rank}, got shape {shape:?}")));
        }
        Ok(shape)
    }

    /// NHWC convolution with a `[kh, kw, cin, cout]` kernel and `[cout]` bias.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, spec: ConvSpec) -> Result<Var> {
        const OP: &str = "conv2d";
        let xs = self.rank_check(OP, x, "input", 4)?.to_vec();
        let ks = self.rank_check(OP, kernel, "kernel", 4)?.to_vec();
        let bs = self.rank_check(OP, bias, "bias", 1)?.to_vec();
        if spec.stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be at least 1".into()));
        }
        let (n, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, kcin, cout) = (ks[0], ks[1], ks[2], ks[3]);
        if kcin != cin {
            return Err(Error::dim(
                OP,
                format!("kernel axis 2 (cin) is {kcin} but input axis 3 (channels) is {cin}"),
            ));
        }
        if bs[0] != cout {
            return Err(Error::dim(
                OP,
                format!("bias axis 0 is {} but kernel axis 3 (cout) is {cout}", bs[0]),
            ));
        }
        let (ph, pw) = (h + 2 * spec.padding, w + 2 * spec.padding);
        if kh > ph || kw > pw || kh == 0 || kw == 0 {
            return Err(Error::dim(
                OP,
                format!("kernel {kh}x{kw} (axes 0,1) does not fit padded input {ph}x{pw} (axes 1,2)"),
            ));
        }
        let geom = ConvGeom {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride: spec.stride,
            pad: spec.padding,
            oh: (ph - kh) / spec.stride + 1,
            ow: (pw - kw) / spec.stride + 1,
        };
        let cols = kernels::im2col(&self.nodes[x.0].value, &geom);
        let rows = geom.rows();
        let bias_v = &self.nodes[bias.0].value;
        let mut out = Vec::with_capacity(rows * cout);
        for _ in 0..rows {
            out.extend_from_slice(bias_v);
        }
        kernels::matmul_acc(&cols, &self.nodes[kernel.0].value, &mut out, rows, geom.patch(), cout);
        let needs = self.needs(&[x, kernel, bias]);
        let op = Op::Conv2d {
            x: x.0,
            k: kernel.0,
            b: bias.0,
            geom,
            cols: if self.nodes[kernel.0].needs_grad { cols } else { Vec::new() },
        };
        self.push_node(OP, vec![n, geom.oh, geom.ow, cout], out, false, needs, op)
    }

    /// `x[n,m] · w[m,k] + b[k]`
    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "dense";
        let xs = self.rank_check(OP, x, "input", 2)?.to_vec();
        let ws = self.rank_check(OP, weight, "weight", 2)?.to_vec();
        let bs = self.rank_check(OP, bias, "bias", 1)?.to_vec();
        if xs[1] != ws[0] {
            return Err(Error::dim(
                OP,
                format!("input axis 1 is {} but weight axis 0 is {}", xs[1], ws[0]),
            ));
        }
        if bs[0] != ws[1] {
            return Err(Error::dim(
                OP,
                format!("bias axis 0 is {} but weight axis 1 is {}", bs[0], ws[1]),
            ));
        }
        let (m, inner, n) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&self.nodes[bias.0].value);
        }
        kernels::matmul_acc(&self.nodes[x.0].value, &self.nodes[weight.0].value, &mut out, m, inner, n);
        let needs = self.needs(&[x, weight, bias]);
        let op = Op::Dense { x: x.0, w: weight.0, b: bias.0, m, inner, n };
        self.push_node(OP, vec![m, n], out, false, needs, op)
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "matmul";
        let as_ = self.rank_check(OP, a, "lhs", 2)?.to_vec();
        let bs = self.rank_check(OP, b, "rhs", 2)?.to_vec();
        if as_[1] != bs[0] {
            return Err(Error::dim(OP, format!("lhs axis 1 is {} but rhs axis 0 is {}", as_[1], bs[0])));
        }
        let (m, inner, n) = (as_[0], as_[1], bs[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, inner, n);
        let needs = self.needs(&[a, b]);
        self.push_node(OP, vec![m, n], out, false, needs, Op::MatMul { a: a.0, b: b.0, m, inner, n })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let node = &self.nodes[x.0];
        let out = node.value.iter().map(|&v| kind.apply(v)).collect();
        let shape = node.shape.clone();
        let needs = node.needs_grad;
        self.push_node("activation", shape, out, false, needs, Op::Act { x: x.0, kind })
    }

    /// Mean over the two spatial axes: `[n,h,w,c] → [n,c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "global_avg_pool";
        let xs = self.rank_check(OP, x, "input", 4)?.to_vec();
        let (n, hw, c) = (xs[0], xs[1] * xs[2], xs[3]);
        if hw == 0 {
            return Err(Error::dim(OP, "spatial axes 1,2 must be nonempty"));
        }
        let inv = T::one() / T::from_usize(hw).unwrap();
        let mut out = vec![T::zero(); n * c];
        for (img, o) in self.nodes[x.0].value.chunks_exact(hw * c).zip(out.chunks_exact_mut(c)) {
            for px in img.chunks_exact(c) {
                for (acc, &v) in o.iter_mut().zip(px) {
                    *acc += v;
                }
            }
            o.iter_mut().for_each(|v| *v = *v * inv);
        }
        let needs = self.needs(&[x]);
        self.push_node(OP, vec![n, c], out, false, needs, Op::AvgPool { x: x.0, n, hw, c })
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy";
        let ls = self.rank_check(OP, logits, "logits", 2)?.to_vec();
        let (n, k) = (ls[0], ls[1]);
        if labels.len() != n {
            return Err(Error::dim(OP, format!("{} labels for logits axis 0 = {n}", labels.len())));
        }
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for ((row, p), &label) in self.nodes[logits.0].value.chunks_exact(k).zip(probs.chunks_exact_mut(k)).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (pi, &z) in p.iter_mut().zip(row) {
                *pi = (z - max).exp();
                total += *pi;
            }
            p.iter_mut().for_each(|v| *v = *v / total);
            loss += total.ln() - (row[label] - max);
        }
        loss = loss / T::from_usize(n).unwrap();
        let needs = self.needs(&[logits]);
        let op = Op::SoftmaxCe { logits: logits.0, probs, labels: labels.to_vec(), k };
        self.push_node(OP, Vec::new(), vec![loss], false, needs, op)
    }

    /// Row-wise softmax of a `[n, k]` matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "softmax";
        let xs = self.rank_check(OP, x, "input", 2)?.to_vec();
        let k = xs[1];
        let mut out = self.nodes[x.0].value.clone();
        for row in out.chunks_exact_mut(k) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        let needs = self.needs(&[x]);
        self.push_node(OP, xs, out, false, needs, Op::SoftmaxRows { x: x.0, k })
    }

    /// Per-pixel weighted channel sum: `[n,h,w,c] · [c] → [n,h,w,1]`.
    pub fn blend(&mut self, image: Var, alphas: Var) -> Result<Var> {
        const OP: &str = "blend";
        let is = self.rank_check(OP, image, "image", 4)?.to_vec();
        let a_s = self.rank_check(OP, alphas, "alphas", 1)?.to_vec();
        let c = is[3];
        if a_s[0] != c {
            return Err(Error::dim(
                OP,
                format!("{} mixing weights for image axis 3 (channels) = {c}", a_s[0]),
            ));
        }
        let a = &self.nodes[alphas.0].value;
        let out: Vec<T> = self.nodes[image.0]
            .value
            .chunks_exact(c)
            .map(|px| px.iter().zip(a).map(|(&p, &w)| p * w).sum())
            .collect();
        let needs = self.needs(&[image, alphas]);
        let op = Op::Blend { image: image.0, alphas: alphas.0, c };
        self.push_node(OP, vec![is[0], is[1], is[2], 1], out, false, needs, op)
    }

    /// Per-sample weighted channel sum: `[n,h,w,c] · [n,c] → [n,h,w,1]`.
    pub fn weighted_blend(&mut self, image: Var, weights: Var) -> Result<Var> {
        const OP: &str = "weighted_blend";
        let is = self.rank_check(OP, image, "image", 4)?.to_vec();
        let ws = self.rank_check(OP, weights, "weights", 2)?.to_vec();
        let (n, hw, c) = (is[0], is[1] * is[2], is[3]);
        if ws[0] != n || ws[1] != c {
            return Err(Error::dim(
                OP,
                format!("weights shape {ws:?} does not match image axes 0,3 = [{n}, {c}]"),
            ));
        }
        let wv = &self.nodes[weights.0].value;
        let mut out = Vec::with_capacity(n * hw);
        for (img, wrow) in self.nodes[image.0].value.chunks_exact(hw * c).zip(wv.chunks_exact(c)) {
            out.extend(img.chunks_exact(c).map(|px| px.iter().zip(wrow).map(|(&p, &w)| p * w).sum::<T>()));
        }
        let needs = self.needs(&[image, weights]);
        let op = Op::WeightedBlend { image: image.0, weights: weights.0, hw, c };
        self.push_node(OP, vec![n, is[1], is[2], 1], out, false, needs, op)
    }

    /// Moves channels into the batch axis: `[n,h,w,c] → [n·c,h,w,1]`,
    /// with sample `i·c + j` holding channel `j` of image `i`.
    pub fn channels_to_batch(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "channels_to_batch";
        let xs = self.rank_check(OP, x, "input", 4)?.to_vec();
        let (n, hw, c) = (xs[0], xs[1] * xs[2], xs[3]);
        let src = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); src.len()];
        for i in 0..n {
            for p in 0..hw {
                for j in 0..c {
                    out[(i * c + j) * hw + p] = src[(i * hw + p) * c + j];
                }
            }
        }
        let needs = self.needs(&[x]);
        let op = Op::ChannelsToBatch { x: x.0, n, hw, c };
        self.push_node(OP, vec![n * c, xs[1], xs[2], 1], out, false, needs, op)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let node = &self.nodes[x.0];
        if shape.iter().product::<usize>() != node.value.len() {
            return Err(Error::dim("reshape", format!("cannot view {:?} as {shape:?}", node.shape)));
        }
        let value = node.value.clone();
        let needs = node.needs_grad;
        self.push_node("reshape", shape.to_vec(), value, false, needs, Op::Reshape { x: x.0 })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::dim(op, format!("operand shapes {sa:?} and {sb:?} differ")));
        }
        Ok(sa.clone())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let out = self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(&x, &y)| x + y).collect();
        let needs = self.needs(&[a, b]);
        self.push_node("add", shape, out, false, needs, Op::Add { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let out = self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(&x, &y)| x * y).collect();
        let needs = self.needs(&[a, b]);
        self.push_node("mul", shape, out, false, needs, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let node = &self.nodes[x.0];
        let out = node.value.iter().map(|&v| v * factor).collect();
        let (shape, needs) = (node.shape.clone(), node.needs_grad);
        self.push_node("scale", shape, out, false, needs, Op::Scale { x: x.0, factor })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let node = &self.nodes[x.0];
        let total = node.value.iter().copied().sum();
        let needs = node.needs_grad;
        self.push_node("sum", Vec::new(), vec![total], false, needs, Op::Sum { x: x.0 })
    }

    /// Element-wise map with a caller-supplied derivative.
    pub fn map(&mut self, x: Var, f: fn(T) -> T, df: fn(T) -> T) -> Result<Var> {
        let node = &self.nodes[x.0];
        let out = node.value.iter().map(|&v| f(v)).collect();
        let (shape, needs) = (node.shape.clone(), node.needs_grad);
        self.push_node("map", shape, out, false, needs, Op::Map { x: x.0, df })
    }

    /// Populates gradients of `loss` for every `requires_grad` leaf.
    /// Contributions from fan-out are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    if !g.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFinite { op: "backward" });
                    }
                    grads[i] = Some(g);
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && g.is_none() {
                *g = Some(vec![T::zero(); node.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].needs_grad;
        fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], j: usize, len: usize) -> &mut Vec<T> {
            grads[j].get_or_insert_with(|| vec![T::zero(); len])
        }
        let len_of = |j: usize| nodes[j].value.len();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, k, b, geom, cols } => {
                let (rows, patch, cout) = (geom.rows(), geom.patch(), geom.cout);
                if wants(*b) {
                    let gb = slot(grads, *b, cout);
                    for row in g.chunks_exact(cout) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                if wants(*k) {
                    let gk = slot(grads, *k, patch * cout);
                    kernels::matmul_at_b_acc(cols, g, gk, rows, patch, cout);
                }
                if wants(*x) {
                    let mut dcols = vec![T::zero(); rows * patch];
                    kernels::matmul_a_bt_acc(g, &nodes[*k].value, &mut dcols, rows, patch, cout);
                    let gx = slot(grads, *x, len_of(*x));
                    kernels::col2im_acc(&dcols, geom, gx);
                }
            }
            Op::Dense { x, w, b, m, inner, n } => {
                if wants(*b) {
                    let gb = slot(grads, *b, *n);
                    for row in g.chunks_exact(*n) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                if wants(*w) {
                    let gw = slot(grads, *w, inner * n);
                    kernels::matmul_at_b_acc(&nodes[*x].value, g, gw, *m, *inner, *n);
                }
                if wants(*x) {
                    let gx = slot(grads, *x, m * inner);
                    kernels::matmul_a_bt_acc(g, &nodes[*w].value, gx, *m, *inner, *n);
                }
            }
            Op::MatMul { a, b, m, inner, n } => {
                if wants(*b) {
                    let gb = slot(grads, *b, inner * n);
                    kernels::matmul_at_b_acc(&nodes[*a].value, g, gb, *m, *inner, *n);
                }
                if wants(*a) {
                    let ga = slot(grads, *a, m * inner);
                    kernels::matmul_a_bt_acc(g, &nodes[*b].value, ga, *m, *inner, *n);
                }
            }
            Op::Act { x, kind } => {
                let xv = &nodes[*x].value;
                let gx = slot(grads, *x, xv.len());
                for ((acc, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                    *acc += gv * kind.derivative(v);
                }
            }
            Op::AvgPool { x, n, hw, c } => {
                let inv = T::one() / T::from_usize(*hw).unwrap();
                let gx = slot(grads, *x, n * hw * c);
                for (img, grow) in gx.chunks_exact_mut(hw * c).zip(g.chunks_exact(*c)) {
                    for px in img.chunks_exact_mut(*c) {
                        for (acc, &gv) in px.iter_mut().zip(grow) {
                            *acc += gv * inv;
                        }
                    }
                }
            }
            Op::SoftmaxCe { logits, probs, labels, k } => {
                let scale = g[0] / T::from_usize(labels.len()).unwrap();
                let gl = slot(grads, *logits, probs.len());
                for ((grow, prow), &label) in gl.chunks_exact_mut(*k).zip(probs.chunks_exact(*k)).zip(labels) {
                    for (j, (acc, &p)) in grow.iter_mut().zip(prow).enumerate() {
                        let target = if j == label { T::one() } else { T::zero() };
                        *acc += (p - target) * scale;
                    }
                }
            }
            Op::SoftmaxRows { x, k } => {
                let y = &nodes[i].value;
                let gx = slot(grads, *x, y.len());
                for ((grow, yrow), gin) in gx.chunks_exact_mut(*k).zip(y.chunks_exact(*k)).zip(g.chunks_exact(*k)) {
                    let dot: T = yrow.iter().zip(gin).map(|(&a, &b)| a * b).sum();
                    for ((acc, &yv), &gv) in grow.iter_mut().zip(yrow).zip(gin) {
                        *acc += yv * (gv - dot);
                    }
                }
            }
            Op::Blend { image, alphas, c } => {
                if wants(*alphas) {
                    let img = &nodes[*image].value;
                    let ga = slot(grads, *alphas, *c);
                    for (px, &gv) in img.chunks_exact(*c).zip(g) {
                        for (acc, &p) in ga.iter_mut().zip(px) {
                            *acc += gv * p;
                        }
                    }
                }
                if wants(*image) {
                    let a = &nodes[*alphas].value;
                    let gi = slot(grads, *image, len_of(*image));
                    for (px, &gv) in gi.chunks_exact_mut(*c).zip(g) {
                        for (acc, &w) in px.iter_mut().zip(a) {
                            *acc += gv * w;
                        }
                    }
                }
            }
            Op::WeightedBlend { image, weights, hw, c } => {
                let img = &nodes[*image].value;
                if wants(*weights) {
                    let gw = slot(grads, *weights, len_of(*weights));
                    for ((im, grow), gout) in img.chunks_exact(hw * c).zip(gw.chunks_exact_mut(*c)).zip(g.chunks_exact(*hw)) {
                        for (px, &gv) in im.chunks_exact(*c).zip(gout) {
                            for (acc, &p) in grow.iter_mut().zip(px) {
                                *acc += gv * p;
                            }
                        }
                    }
                }
                if wants(*image) {
                    let wv = &nodes[*weights].value;
                    let gi = slot(grads, *image, img.len());
                    for ((im, wrow), gout) in gi.chunks_exact_mut(hw * c).zip(wv.chunks_exact(*c)).zip(g.chunks_exact(*hw)) {
                        for (px, &gv) in im.chunks_exact_mut(*c).zip(gout) {
                            for (acc, &w) in px.iter_mut().zip(wrow) {
                                *acc += gv * w;
                            }
                        }
                    }
                }
            }
            Op::ChannelsToBatch { x, n, hw, c } => {
                let gx = slot(grads, *x, n * hw * c);
                for s in 0..*n {
                    for p in 0..*hw {
                        for j in 0..*c {
                            gx[(s * hw + p) * c + j] += g[(s * c + j) * hw + p];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                let gx = slot(grads, *x, g.len());
                for (acc, &v) in gx.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            Op::Add { a, b } => {
                for j in [*a, *b] {
                    if wants(j) {
                        let gj = slot(grads, j, g.len());
                        for (acc, &v) in gj.iter_mut().zip(g) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                for (j, other) in [(*a, *b), (*b, *a)] {
                    if wants(j) {
                        let ov = &nodes[other].value;
                        let gj = slot(grads, j, g.len());
                        for ((acc, &v), &o) in gj.iter_mut().zip(g).zip(ov) {
                            *acc += v * o;
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                let gx = slot(grads, *x, g.len());
                for (acc, &v) in gx.iter_mut().zip(g) {
                    *acc += v * *factor;
                }
            }
            Op::Sum { x } => {
                let gx = slot(grads, *x, len_of(*x));
                gx.iter_mut().for_each(|acc| *acc += g[0]);
            }
            Op::Map { x, df } => {
                let xv = &nodes[*x].value;
                let gx = slot(grads, *x, xv.len());
                for ((acc, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                    *acc += gv * df(v);
                }
            }
        }
    }
}
