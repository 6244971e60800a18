//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that requires one,
//! plus a per-name view for parameter leaves. Constants and detached copies
//! never receive gradients, which is how gradient routing between parameter
//! groups is expressed.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{contract, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op<T> {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        spec: Conv2dSpec,
    },
    AvgPool2d {
        input: Var,
        kh: usize,
        kw: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    L2NormalizeRows {
        input: Var,
        norms: Vec<T>,
    },
    SumRows(Var),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    PairwiseDistance(Var),
    Select {
        input: Var,
        indices: Vec<usize>,
    },
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance.
    pub var: Vec<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
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

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf, addressed by its [`Var`] in the gradient result.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Named parameter leaf. Frozen parameters behave as constants.
    pub fn param(&mut self, name: &str, value: &Tensor<T>, trainable: bool) -> Var {
        self.push(value.clone(), Op::Param(name.to_string()), trainable)
    }

    /// Copy of `v` that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        contract!(
            va.shape() == vb.shape(),
            "{what}: shape mismatch {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    fn row_broadcast(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        contract!(
            va.shape().len() == 2 && vb.numel() == va.shape()[1],
            "{what}: cannot broadcast {:?} over rows of {:?}",
            vb.shape(),
            va.shape()
        );
        let d = va.shape()[1];
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb.data()[i % d]))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    /// `[n,d] + [d]`
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast(a, row, "add_row", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// `[n,d] * [d]`
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast(a, row, "mul_row", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// `[n,cin,h,w] * [cout,cin,kh,kw] + [cout]`, zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: Conv2dSpec) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        contract!(
            x.shape().len() == 4 && w.shape().len() == 4 && x.shape()[1] == w.shape()[1],
            "conv2d shape mismatch {:?} * {:?}",
            x.shape(),
            w.shape()
        );
        contract!(b.numel() == w.shape()[0], "conv2d bias length");
        contract!(spec.stride > 0, "conv2d stride must be positive");
        let geo = ConvGeometry::new(x.shape(), w.shape(), spec)?;
        let out = conv_forward(x.data(), w.data(), b.data(), &geo);
        let value = Tensor::new([geo.n, geo.cout, geo.ho, geo.wo], out)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
            rg,
        ))
    }

    /// Non-overlapping `kh x kw` average pooling over `[n,c,h,w]`.
    pub fn avg_pool2d(&mut self, input: Var, kh: usize, kw: usize) -> Result<Var> {
        let x = self.value(input);
        contract!(x.shape().len() == 4, "avg_pool2d needs [n,c,h,w]");
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        contract!(
            kh > 0 && kw > 0 && h % kh == 0 && w % kw == 0,
            "pool window {kh}x{kw} does not tile {h}x{w}"
        );
        let (ho, wo) = (h / kh, w / kw);
        let norm = T::one() / T::from_usize_lossy(kh * kw);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for y in 0..h {
                for xx in 0..w {
                    dst[(y / kh) * wo + xx / kw] += src[y * w + xx];
                }
            }
            dst.iter_mut().for_each(|v| *v *= norm);
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::AvgPool2d { input, kh, kw }, rg))
    }

    /// Training-mode batch norm over the rows of `[n,d]` using batch
    /// statistics. Returns the output and the statistics used.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let x = self.value(input);
        contract!(x.shape().len() == 2, "batch_norm needs [n,d]");
        let (n, d) = (x.shape()[0], x.shape()[1]);
        contract!(n > 1, "batch_norm needs more than one row");
        contract!(
            self.value(gamma).numel() == d && self.value(beta).numel() == d,
            "batch_norm affine parameter length"
        );
        let nf = T::from_usize_lossy(n);
        let mut mean = vec![T::zero(); d];
        let mut var = vec![T::zero(); d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += x.data()[i * d + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        for i in 0..n {
            for j in 0..d {
                let c = x.data()[i * d + j] - mean[j];
                var[j] += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= nf);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); n * d];
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            for j in 0..d {
                let k = i * d + j;
                xhat[k] = (x.data()[k] - mean[j]) * inv_std[j];
                out[k] = g[j] * xhat[k] + b[j];
            }
        }
        let value = Tensor::new([n, d], out)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, BatchStats { mean, var }))
    }

    /// Divide every row of `[n,d]` by its L2 norm. Zero rows are a contract
    /// error since the direction is undefined.
    pub fn l2_normalize_rows(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        contract!(x.shape().len() == 2, "l2_normalize_rows needs [n,d]");
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut norms = Vec::with_capacity(n);
        let mut out = x.data().to_vec();
        for i in 0..n {
            let row = &mut out[i * d..(i + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            contract!(norm > T::zero(), "row {i} has zero norm");
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let value = Tensor::new([n, d], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::L2NormalizeRows { input, norms }, rg))
    }

    /// `[n,d] -> [n]`
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        contract!(x.shape().len() == 2, "sum_rows needs [n,d]");
        let n = x.shape()[0];
        let data = (0..n).map(|i| x.row(i).iter().copied().sum()).collect();
        let value = Tensor::new([n], data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SumRows(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize_lossy(n))
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        contract!(x.shape().len() == 2, "cross entropy needs [n,k] logits");
        let (n, k) = (x.shape()[0], x.shape()[1]);
        contract!(targets.len() == n, "{} targets for {} rows", targets.len(), n);
        contract!(n > 0, "cross entropy on an empty batch");
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            contract!(t < k, "target {t} out of range for {k} classes");
            let row = x.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = z.ln() + max;
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            total += lse - row[t];
        }
        let value = Tensor::scalar(total / T::from_usize_lossy(n));
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Euclidean distance matrix between the rows of `[n,d]`. The gradient of
    /// a zero distance is taken to be zero.
    pub fn pairwise_distance(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        contract!(x.shape().len() == 2, "pairwise_distance needs [n,d]");
        let n = x.shape()[0];
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = x
                    .row(i)
                    .iter()
                    .zip(x.row(j))
                    .map(|(&p, &q)| (p - q) * (p - q))
                    .sum::<T>()
                    .sqrt();
                out[i * n + j] = d;
                out[j * n + i] = d;
            }
        }
        let value = Tensor::new([n, n], out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::PairwiseDistance(a), rg))
    }

    /// Gather flat element indices into a vector.
    pub fn select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        contract!(
            indices.iter().all(|&i| i < x.numel()),
            "select index out of range"
        );
        let data = indices.iter().map(|&i| x.data()[i]).collect();
        let value = Tensor::new([indices.len()], data)?;
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::Select {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Gather rows of a `[n, ...]` tensor.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let n = x.rows();
        contract!(rows.iter().all(|&r| r < n), "gather_rows index out of range ({n} rows)");
        let c = x.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(x.row(r));
        }
        let mut shape = x.shape().to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = rows.len();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::GatherRows {
                input: a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        contract!(
            self.value(loss).numel() == 1,
            "backward needs a scalar, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let mut params = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(name), true) = (&node.op, node.requires_grad) {
                if let Some(g) = &grads[idx] {
                    match params.get_mut(name) {
                        None => {
                            params.insert(name.clone(), g.clone());
                        }
                        Some(acc) => {
                            let acc: &mut Tensor<T> = acc;
                            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b);
                        }
                    }
                }
            }
        }
        Ok(Gradients { by_node: grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(delta.data())
                .for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul(&vb.transpose()?)?);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, va.transpose()?.matmul(g)?);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = zip_map(g, vb, |x, y| x * y);
                let gb = zip_map(g, va, |x, y| x * y);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    let gr = column_sums(g, self.value(*row).shape());
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::MulRow(a, row) => {
                let (va, vr) = (self.value(*a), self.value(*row));
                let d = vr.numel();
                if self.rg(*a) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x * vr.data()[i % d])
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data)?);
                }
                if self.rg(*row) {
                    let prod = zip_map(g, va, |x, y| x * y);
                    self.accumulate(grads, *row, column_sums(&prod, vr.shape()));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let ga = zip_map(g, self.value(*a), |gv, x| if x > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let ga = g.clone().reshape(self.shape(*a).to_vec())?;
                self.accumulate(grads, *a, ga);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let geo = ConvGeometry::new(x.shape(), w.shape(), *spec)?;
                let (dx, dw, db) = conv_backward(x.data(), w.data(), g.data(), &geo, self.rg(*input));
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
                }
                self.accumulate(grads, *weight, Tensor::new(w.shape().to_vec(), dw)?);
                self.accumulate(grads, *bias, Tensor::new(self.shape(*bias).to_vec(), db)?);
            }
            Op::AvgPool2d { input, kh, kw } => {
                let shape = self.shape(*input).to_vec();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let (ho, wo) = (h / kh, w / kw);
                let norm = T::one() / T::from_usize_lossy(kh * kw);
                let mut dx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let gp = &g.data()[plane * ho * wo..(plane + 1) * ho * wo];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] = gp[(y / kh) * wo + xx / kw] * norm;
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::new(shape, dx)?);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let shape = self.shape(*input).to_vec();
                let (n, d) = (shape[0], shape[1]);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut sum_dxhat = vec![T::zero(); d];
                let mut sum_dxhat_xhat = vec![T::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        let k = i * d + j;
                        let gv = g.data()[k];
                        dgamma[j] += gv * xhat[k];
                        dbeta[j] += gv;
                        let dxh = gv * gam[j];
                        sum_dxhat[j] += dxh;
                        sum_dxhat_xhat[j] += dxh * xhat[k];
                    }
                }
                if self.rg(*input) {
                    let nf = T::from_usize_lossy(n);
                    let mut dx = vec![T::zero(); n * d];
                    for i in 0..n {
                        for j in 0..d {
                            let k = i * d + j;
                            let dxh = g.data()[k] * gam[j];
                            dx[k] = inv_std[j] / nf * (nf * dxh - sum_dxhat[j] - xhat[k] * sum_dxhat_xhat[j]);
                        }
                    }
                    self.accumulate(grads, *input, Tensor::new(shape, dx)?);
                }
                let gshape = self.shape(*gamma).to_vec();
                let bshape = self.shape(*beta).to_vec();
                self.accumulate(grads, *gamma, Tensor::new(gshape, dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(bshape, dbeta)?);
            }
            Op::L2NormalizeRows { input, norms } => {
                let y = &node.value;
                let (n, d) = (y.shape()[0], y.shape()[1]);
                let mut dx = vec![T::zero(); n * d];
                for i in 0..n {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[i * d + j] = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                self.accumulate(grads, *input, Tensor::new([n, d], dx)?);
            }
            Op::SumRows(a) => {
                let shape = self.shape(*a).to_vec();
                let d = shape[1];
                let dx = (0..shape[0] * d).map(|k| g.data()[k / d]).collect();
                self.accumulate(grads, *a, Tensor::new(shape, dx)?);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a).to_vec(), gv));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let shape = self.shape(*logits).to_vec();
                let (n, k) = (shape[0], shape[1]);
                let scale = g.item() / T::from_usize_lossy(n);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dx[i * k + t] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(shape, dx)?);
            }
            Op::PairwiseDistance(a) => {
                let x = self.value(*a);
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let dist = &node.value;
                let mut dx = vec![T::zero(); n * d];
                for i in 0..n {
                    for j in 0..n {
                        let dij = dist.at2(i, j);
                        if i == j || dij <= T::zero() {
                            continue;
                        }
                        let coef = (g.at2(i, j) + g.at2(j, i)) / dij;
                        for c in 0..d {
                            dx[i * d + c] += coef * (x.at2(i, c) - x.at2(j, c));
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new([n, d], dx)?);
            }
            Op::Select { input, indices } => {
                let mut dx = Tensor::zeros(self.shape(*input).to_vec());
                for (k, &i) in indices.iter().enumerate() {
                    dx.data_mut()[i] += g.data()[k];
                }
                self.accumulate(grads, *input, dx);
            }
            Op::GatherRows { input, rows } => {
                let shape = self.shape(*input).to_vec();
                let mut dx = Tensor::zeros(shape);
                let c = dx.cols();
                for (k, &r) in rows.iter().enumerate() {
                    let src = &g.data()[k * c..(k + 1) * c];
                    dx.data_mut()[r * c..(r + 1) * c]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, &b)| *a += b);
                }
                self.accumulate(grads, *input, dx);
            }
        }
        Ok(())
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn column_sums<T: Scalar>(g: &Tensor<T>, out_shape: &[usize]) -> Tensor<T> {
    let d = g.cols();
    let mut out = vec![T::zero(); d];
    for (i, &v) in g.data().iter().enumerate() {
        out[i % d] += v;
    }
    Tensor::new(out_shape.to_vec(), out).expect("row length")
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Result<Self> {
        let (n, cin, h, wd) = (x[0], x[1], x[2], x[3]);
        let (cout, kh, kw) = (w[0], w[2], w[3]);
        contract!(
            h + 2 * spec.pad >= kh && wd + 2 * spec.pad >= kw,
            "conv kernel larger than padded input"
        );
        Ok(Self {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            ho: (h + 2 * spec.pad - kh) / spec.stride + 1,
            wo: (wd + 2 * spec.pad - kw) / spec.stride + 1,
            stride: spec.stride,
            pad: spec.pad,
        })
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.cout * self.ho * self.wo
    }

    /// Source coordinate for an output position and kernel tap, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfold one sample into `[cin*kh*kw, ho*wo]` patch columns.
fn im2col<T: Scalar>(src: &[T], g: &ConvGeometry) -> Vec<T> {
    let hw = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.cin * g.kh * g.kw * hw];
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut cols[((ci * g.kh + ky) * g.kw + kx) * hw..][..hw];
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    let xrow = &src[(ci * g.h + iy) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            row[oy * g.wo + ox] = xrow[ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add patch columns back onto one sample.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let hw = g.ho * g.wo;
    let mut dst = vec![T::zero(); g.in_len()];
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &cols[((ci * g.kh + ky) * g.kw + kx) * hw..][..hw];
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    let base = (ci * g.h + iy) * g.w;
                    for ox in 0..g.wo {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            dst[base + ix] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    dst
}

fn conv_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], geo: &ConvGeometry) -> Vec<T> {
    let mut out = vec![T::zero(); geo.n * geo.out_len()];
    let g = *geo;
    let (hw, kk) = (g.ho * g.wo, g.cin * g.kh * g.kw);
    out.par_chunks_mut(g.out_len())
        .zip(x.par_chunks(g.in_len()))
        .for_each(|(dst, src)| {
            let cols = im2col(src, &g);
            for co in 0..g.cout {
                dst[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v = b[co]);
            }
            crate::tensor::matmul_into(w, &cols, dst, g.cout, kk, hw);
        });
    out
}

type ConvGrads<T> = (Option<Vec<T>>, Vec<T>, Vec<T>);

/// Per-sample weight gradients are computed in parallel and reduced in sample
/// order so the result does not depend on thread scheduling.
fn conv_backward<T: Scalar>(x: &[T], w: &[T], gout: &[T], geo: &ConvGeometry, need_dx: bool) -> ConvGrads<T> {
    let g = *geo;
    let wlen = w.len();
    let (hw, kk) = (g.ho * g.wo, g.cin * g.kh * g.kw);
    // w^T, [kk, cout]
    let mut wt = vec![T::zero(); wlen];
    for co in 0..g.cout {
        for k in 0..kk {
            wt[k * g.cout + co] = w[co * kk + k];
        }
    }
    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..g.n)
        .into_par_iter()
        .map(|s| {
            let src = &x[s * g.in_len()..(s + 1) * g.in_len()];
            let gs = &gout[s * g.out_len()..(s + 1) * g.out_len()];
            let cols = im2col(src, &g);
            let db: Vec<T> = (0..g.cout)
                .map(|co| gs[co * hw..(co + 1) * hw].iter().fold(T::zero(), |a, &v| a + v))
                .collect();
            let mut dw = vec![T::zero(); wlen];
            for co in 0..g.cout {
                let grow = &gs[co * hw..(co + 1) * hw];
                for k in 0..kk {
                    let crow = &cols[k * hw..(k + 1) * hw];
                    dw[co * kk + k] = grow.iter().zip(crow).fold(T::zero(), |a, (&p, &q)| a + p * q);
                }
            }
            let dx = if need_dx {
                let mut dcols = vec![T::zero(); kk * hw];
                crate::tensor::matmul_into(&wt, gs, &mut dcols, kk, g.cout, hw);
                col2im(&dcols, &g)
            } else {
                Vec::new()
            };
            (dx, dw, db)
        })
        .collect();
    let mut dw = vec![T::zero(); wlen];
    let mut db = vec![T::zero(); g.cout];
    let mut dx = need_dx.then(|| Vec::with_capacity(g.n * g.in_len()));
    for (sdx, sdw, sdb) in per_sample {
        dw.iter_mut().zip(&sdw).for_each(|(a, &b)| *a += b);
        db.iter_mut().zip(&sdb).for_each(|(a, &b)| *a += b);
        if let Some(dx) = dx.as_mut() {
            dx.extend_from_slice(&sdx);
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar function of one tensor.
    fn numeric_grad(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64, eps: f64) -> Vec<f64> {
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += eps;
                let mut m = x.clone();
                m.data_mut()[i] -= eps;
                (f(&p) - f(&m)) / (2.0 * eps)
            })
            .collect()
    }

    fn check(x: Tensor<f64>, build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let eval = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.input(t.clone());
            let out = build(&mut g, v);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let out = build(&mut g, v);
        let grads = g.backward(out).unwrap();
        let analytic = grads.wrt(v).unwrap().data().to_vec();
        let numeric = numeric_grad(&x, &eval, 1e-5);
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
        assert!(diff / scale < 1e-6, "relative error {} (analytic {analytic:?}, numeric {numeric:?})", diff / scale);
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape.to_vec(), 1.0, &mut rng)
    }

    fn weights(g: &mut Graph<f64>, shape: &[usize], seed: u64) -> Var {
        g.constant(rand_tensor(shape, seed))
    }

    #[test]
    fn matmul_and_transpose_grads() {
        check(rand_tensor(&[3, 4], 1), |g, x| {
            let w = weights(g, &[4, 2], 2);
            let y = g.matmul(x, w).unwrap();
            let t = g.transpose(y).unwrap();
            let sq = g.mul(t, t).unwrap();
            g.sum(sq)
        });
        check(rand_tensor(&[4, 2], 3), |g, w| {
            let x = weights(g, &[3, 4], 4);
            let y = g.matmul(x, w).unwrap();
            let r = g.relu(y);
            g.sum(r)
        });
    }

    #[test]
    fn broadcast_grads() {
        check(rand_tensor(&[3], 5), |g, b| {
            let x = weights(g, &[4, 3], 6);
            let y = g.add_row(x, b).unwrap();
            let z = g.mul_row(y, b).unwrap();
            let sq = g.mul(z, z).unwrap();
            g.mean(sq)
        });
    }

    #[test]
    fn conv_and_pool_grads() {
        check(rand_tensor(&[2, 2, 6, 4], 7), |g, x| {
            let w = weights(g, &[3, 2, 3, 3], 8);
            let b = weights(g, &[3], 9);
            let y = g.conv2d(x, w, b, Conv2dSpec { stride: 2, pad: 1 }).unwrap();
            let p = g.avg_pool2d(y, 1, 2).unwrap();
            let sq = g.mul(p, p).unwrap();
            g.sum(sq)
        });
        check(rand_tensor(&[3, 2, 3, 3], 10), |g, w| {
            let x = weights(g, &[2, 2, 5, 5], 11);
            let b = weights(g, &[3], 12);
            let y = g.conv2d(x, w, b, Conv2dSpec { stride: 1, pad: 1 }).unwrap();
            let sq = g.mul(y, y).unwrap();
            g.sum(sq)
        });
    }

    #[test]
    fn batch_norm_grads() {
        check(rand_tensor(&[5, 3], 13), |g, x| {
            let gamma = weights(g, &[3], 14);
            let beta = weights(g, &[3], 15);
            let (y, _) = g.batch_norm(x, gamma, beta, 1e-5).unwrap();
            let w = weights(g, &[5, 3], 16);
            let z = g.mul(y, w).unwrap();
            g.sum(z)
        });
    }

    #[test]
    fn normalize_and_cross_entropy_grads() {
        check(rand_tensor(&[4, 3], 17), |g, x| {
            let y = g.l2_normalize_rows(x).unwrap();
            let s = g.scale(y, 5.0);
            g.softmax_cross_entropy(s, &[0, 2, 1, 1]).unwrap()
        });
    }

    #[test]
    fn distance_select_gather_grads() {
        check(rand_tensor(&[4, 3], 18), |g, x| {
            let d = g.pairwise_distance(x).unwrap();
            let s = g.select(d, &[1, 6, 11, 4]).unwrap();
            let r = g.gather_rows(x, &[3, 3, 0]).unwrap();
            let rs = g.sum(r);
            let ss = g.sum(s);
            let rs2 = g.mul(rs, rs).unwrap();
            g.add(rs2, ss).unwrap()
        });
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let w = Tensor::full([2], 1.0);
        let a = g.param("a", &w, true);
        let b = g.param("b", &w, false);
        let c = g.mul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert!(grads.param("a").is_some());
        assert!(grads.param("b").is_none());
    }

    #[test]
    fn detach_blocks_flow() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full([3], 2.0));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn zero_row_normalisation_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros([1, 3]));
        assert!(g.l2_normalize_rows(x).is_err());
    }
}
