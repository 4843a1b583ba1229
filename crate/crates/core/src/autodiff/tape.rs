//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] is an append-only arena: every op pushes one node whose inputs
//! already exist, so node order is a topological order and [`Tape::backward`]
//! is a single reverse sweep. Ops that do not fit the built-in set (the
//! contrastive loss, the covariance penalty) plug in through [`Function`].

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable op defined outside the tape.
///
/// `backward` receives the upstream gradient (shaped like `output`) and must
/// return one gradient per input, shaped like that input.
pub trait Function {
    fn name(&self) -> &'static str;
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Grl(Var, f64),
    Sum(Var),
    Dot(Var, Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    SegmentMeanStd {
        x: Var,
        lengths: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Tensor,
        labels: Vec<usize>,
        sample_weights: Vec<f64>,
        total_weight: f64,
    },
    Custom {
        inputs: Vec<Var>,
        func: Box<dyn Function>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when nothing flowed.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, deps: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = self.requires(deps);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `x + b` with `b` broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        if bv.len() != xv.cols() || xv.rank() != 2 {
            return Err(Error::Shape {
                op: "add_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        let cols = xv.cols();
        for r in 0..xv.rows() {
            for (o, &bias) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += bias;
            }
        }
        debug_assert_eq!(cols, bv.len());
        self.push("add_bias", out, Op::AddBias(x, b), &[x, b])
    }

    /// `x · w + b`, with `w` stored as `in × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op: "add",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = av.clone();
        out.add_assign(bv);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).scaled(s);
        self.push("scale", out, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push("relu", out, Op::Relu(x), &[x])
    }

    /// Gradient reversal: identity forward, `-lambda` times the upstream
    /// gradient backward.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) {
            return Err(Error::Config(format!(
                "grl lambda must be >= 0, got {lambda}"
            )));
        }
        let out = self.value(x).clone();
        self.push("grl", out, Op::Grl(x, lambda), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    /// Sum of elementwise products, a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op: "dot",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
        self.push("dot", Tensor::scalar(s), Op::Dot(a, b), &[a, b])
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let norm = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 1e-12) {
                return Err(Error::DegenerateEmbedding { row: r, norm });
            }
            for o in out.row_mut(r) {
                *o /= norm;
            }
            norms.push(norm);
        }
        self.push("l2_normalize", out, Op::L2Normalize { x, norms }, &[x])
    }

    /// Temporal statistics pooling over consecutive row segments.
    ///
    /// `x` stacks the frames of several utterances; `lengths` gives the frame
    /// count of each. The output has one row per segment holding the mean
    /// followed by the population standard deviation of each column.
    pub fn segment_mean_std(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let total: usize = lengths.iter().sum();
        if total != xv.rows() || lengths.iter().any(|&l| l == 0) {
            return Err(Error::Shape {
                op: "segment_mean_std",
                left: xv.shape().to_vec(),
                right: lengths.to_vec(),
            });
        }
        let h = xv.cols();
        let mut out = Tensor::zeros(&[lengths.len(), 2 * h]);
        let mut start = 0;
        for (s, &len) in lengths.iter().enumerate() {
            let n = len as f64;
            let row = out.row_mut(s);
            for t in start..start + len {
                for (m, &v) in row[..h].iter_mut().zip(xv.row(t)) {
                    *m += v;
                }
            }
            for m in &mut row[..h] {
                *m /= n;
            }
            let (means, stds) = row.split_at_mut(h);
            for t in start..start + len {
                for ((sd, &v), &m) in stds.iter_mut().zip(xv.row(t)).zip(means.iter()) {
                    *sd += (v - m) * (v - m);
                }
            }
            for sd in stds.iter_mut() {
                *sd = (*sd / n).sqrt();
            }
            start += len;
        }
        let lengths = lengths.to_vec();
        self.push(
            "segment_mean_std",
            out,
            Op::SegmentMeanStd { x, lengths },
            &[x],
        )
    }

    /// Class-weighted softmax cross-entropy averaged by total sample weight:
    /// `Σᵢ w[yᵢ]·(−log softmax(logitsᵢ)[yᵢ]) / Σᵢ w[yᵢ]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        class_weights: &[f64],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if labels.len() != n || class_weights.len() != c || lv.rank() != 2 {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![labels.len(), class_weights.len()],
            });
        }
        if let Some(w) = class_weights.iter().find(|w| !(**w > 0.0)) {
            return Err(Error::Config(format!("class weights must be > 0, got {w}")));
        }
        let mut probs = Tensor::zeros(&[n, c]);
        let mut sample_weights = Vec::with_capacity(n);
        let mut loss = 0.0;
        let mut total_weight = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: c,
                });
            }
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            for (p, &v) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (v - max).exp() / denom;
            }
            let w = class_weights[y];
            loss += w * (log_denom - (row[y] - max));
            total_weight += w;
            sample_weights.push(w);
        }
        let out = Tensor::scalar(loss / total_weight);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            probs,
            labels: labels.to_vec(),
            sample_weights,
            total_weight,
        };
        self.push("softmax_cross_entropy", out, op, &[logits])
    }

    /// Records an externally defined op whose forward value is `output`.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        func: Box<dyn Function>,
    ) -> Result<Var> {
        let name = func.name();
        let op = Op::Custom {
            inputs: inputs.to_vec(),
            func,
        };
        self.push(name, output, op, inputs)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape {
                op: "backward (loss must be scalar)",
                left: lv.shape().to_vec(),
                right: vec![],
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, contrib: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    acc(*a, g.matmul(&bv.transpose()).expect("matmul backward"));
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, av.transpose().matmul(g).expect("matmul backward"));
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, g.clone());
                let bv = self.value(*b);
                let mut gb = Tensor::zeros(bv.shape());
                for r in 0..g.rows() {
                    for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*b, gb);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Scale(x, s) => acc(*x, g.scaled(*s)),
            Op::Relu(x) => {
                let mut gx = g.clone();
                for (o, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= 0.0 {
                        *o = 0.0;
                    }
                }
                acc(*x, gx);
            }
            Op::Grl(x, lambda) => acc(*x, g.scaled(-lambda)),
            Op::Sum(x) => acc(*x, Tensor::full(self.value(*x).shape(), g.item())),
            Op::Dot(a, b) => {
                let s = g.item();
                acc(*a, self.value(*b).scaled(s));
                acc(*b, self.value(*a).scaled(s));
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let mut gx = g.clone();
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = y.row(r);
                    let proj: f64 = yr.iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for (o, &yv) in gx.row_mut(r).iter_mut().zip(yr) {
                        *o = (*o - yv * proj) / norm;
                    }
                }
                acc(*x, gx);
            }
            Op::SegmentMeanStd { x, lengths } => {
                let xv = self.value(*x);
                let h = xv.cols();
                let mut gx = Tensor::zeros(xv.shape());
                let mut start = 0;
                for (s, &len) in lengths.iter().enumerate() {
                    let n = len as f64;
                    let stats = node.value.row(s);
                    let (means, stds) = stats.split_at(h);
                    let (g_mean, g_std) = g.row(s).split_at(h);
                    for t in start..start + len {
                        let xr = xv.row(t);
                        let gr = gx.row_mut(t);
                        for j in 0..h {
                            let mut v = g_mean[j] / n;
                            if stds[j] > 0.0 {
                                v += g_std[j] * (xr[j] - means[j]) / (n * stds[j]);
                            }
                            gr[j] = v;
                        }
                    }
                    start += len;
                }
                acc(*x, gx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
                sample_weights,
                total_weight,
            } => {
                let scale = g.item() / total_weight;
                let mut gl = probs.clone();
                for (i, (&y, &w)) in labels.iter().zip(sample_weights).enumerate() {
                    let row = gl.row_mut(i);
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= w * scale;
                    }
                }
                acc(*logits, gl);
            }
            Op::Custom { inputs, func } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = func.backward(g, &values, &node.value);
                debug_assert_eq!(gs.len(), inputs.len());
                for (v, gi) in inputs.iter().zip(gs) {
                    acc(*v, gi);
                }
            }
        }
    }
}
