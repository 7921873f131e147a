//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every operation appends a node whose parents are already recorded, so the
//! node order is a topological order and the backward pass is a single
//! reverse sweep. Leaf gradients accumulate across `backward` calls until
//! [`Graph::zero_grad`] is called; intermediate gradients are rebuilt fresh on
//! every sweep.

use rand::Rng;

use super::tensor::{matmul_raw, transpose_raw, Scalar, Tensor};
use crate::error::{Error, Result};

/// Smallest probability fed to `ln` by [`Graph::cross_entropy`].
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Granularity of a dropout mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutKind {
    /// Independent Bernoulli draw per element.
    Element,
    /// One draw per trailing-dimension channel, shared by every row.
    Channel,
    /// One draw for the whole tensor (drops a residual branch).
    Path,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Softmax {
        input: Var,
        temperature: T,
        causal: bool,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        eps: T,
    },
    L2Normalize(Var),
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    Mask {
        input: Var,
        mask: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        input: Var,
        start: usize,
    },
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Operation record for one forward/backward computation.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.dims().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let d = self.dims(v);
        if d.len() != 2 {
            return Err(Error::dim(op, format!("expected a matrix, got dims {d:?}")));
        }
        Ok((d[0], d[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}x{k}] * [{k2}x{n}]")));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new([m, n], data)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix(a, "transpose")?;
        let out = Tensor::new([c, r], transpose_raw(self.value(a).data(), r, c))?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    fn same_dims(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let out = Tensor::new(self.dims(a).to_vec(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let out = Tensor::new(self.dims(a).to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Adds the vector `row[d]` to every row of `x[..., d]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.dims(row) != [cols] {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + {:?}", self.dims(x), self.dims(row)),
            ));
        }
        let r = self.value(row).data().to_vec();
        let data = self
            .value(x)
            .data()
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(&r).map(|(&a, &b)| a + b))
            .collect();
        let out = Tensor::new(self.dims(x).to_vec(), data)?;
        self.push("add_row", out, Op::AddRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let s = T::lit(factor);
        let data = self.value(x).data().iter().map(|&v| v * s).collect();
        let out = Tensor::new(self.dims(x).to_vec(), data)?;
        self.push("scale", out, Op::Scale(x, s), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu_fwd(v)).collect();
        let out = Tensor::new(self.dims(x).to_vec(), data)?;
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    /// Row-wise `softmax(x / temperature)` with max subtraction.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        self.softmax_impl(x, temperature, false)
    }

    /// Softmax over a square score matrix where row `i` only sees columns `<= i`.
    pub fn causal_softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let (r, c) = self.matrix(x, "causal_softmax")?;
        if r != c {
            return Err(Error::dim(
                "causal_softmax",
                format!("scores must be square, got {r}x{c}"),
            ));
        }
        self.softmax_impl(x, temperature, true)
    }

    fn softmax_impl(&mut self, x: Var, temperature: f64, causal: bool) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let tau = T::lit(temperature);
        let input = self.value(x);
        let cols = input.cols();
        let mut data = vec![T::zero(); input.len()];
        for (r, (src, dst)) in input
            .data()
            .chunks(cols)
            .zip(data.chunks_mut(cols))
            .enumerate()
        {
            let visible = if causal { (r % cols) + 1 } else { cols };
            softmax_row(&src[..visible], tau, &mut dst[..visible]);
        }
        let out = Tensor::new(input.dims().to_vec(), data)?;
        self.push(
            "softmax",
            out,
            Op::Softmax {
                input: x,
                temperature: tau,
                causal,
            },
            &[x],
        )
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let d = self.value(x).cols();
        if self.dims(gain) != [d] || self.dims(bias) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    self.dims(x),
                    self.dims(gain),
                    self.dims(bias)
                ),
            ));
        }
        let eps_t = T::lit(eps);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut data = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks(d) {
            let (mean, rstd) = row_moments(row, eps_t);
            data.extend(
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| (v - mean) * rstd * g[j] + b[j]),
            );
        }
        let out = Tensor::new(self.dims(x).to_vec(), data)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                input: x,
                gain,
                bias,
                eps: eps_t,
            },
            &[x, gain, bias],
        )
    }

    /// Scales each row to unit Euclidean norm; a zero row is an error.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).cols();
        let mut data = Vec::with_capacity(self.value(x).len());
        for (i, row) in self.value(x).data().chunks(d).enumerate() {
            let norm = row_norm(row);
            if norm == T::zero() {
                return Err(Error::Degenerate(format!("row {i} has zero norm")));
            }
            data.extend(row.iter().map(|&v| v / norm));
        }
        let out = Tensor::new(self.dims(x).to_vec(), data)?;
        self.push("l2_normalize", out, Op::L2Normalize(x), &[x])
    }

    /// Mean negative log-likelihood of `labels` under row-stochastic `probs[N x C]`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix(probs, "cross_entropy")?;
        if n != labels.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!("{n} rows but {} labels", labels.len()),
            ));
        }
        if n == 0 {
            return Err(Error::Validation("cross_entropy over zero rows".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} with {c} classes")));
        }
        let clamp = T::lit(LOG_CLAMP);
        let p = self.value(probs).data();
        let total: T = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -p[i * c + l].max(clamp).ln())
            .sum();
        let out = Tensor::scalar(total / T::lit(n as f64));
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            &[probs],
        )
    }

    /// Elementwise product with a fixed mask.
    pub fn apply_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::dim(
                "apply_mask",
                format!("mask of {} for {:?}", mask.len(), self.dims(x)),
            ));
        }
        let data = zip_map(self.value(x).data(), &mask, |a, m| a * m);
        let out = Tensor::new(self.dims(x).to_vec(), data)?;
        self.push("mask", out, Op::Mask { input: x, mask }, &[x])
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
    ///
    /// Without an rng (evaluation mode) or with `p == 0` this is the identity
    /// and records nothing.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        kind: DropoutKind,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!(
                "dropout probability {p} not in [0, 1)"
            )));
        }
        let Some(rng) = rng else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mut draw = || {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        };
        let len = self.value(x).len();
        let cols = self.value(x).cols();
        let mask = match kind {
            DropoutKind::Element => (0..len).map(|_| draw()).collect(),
            DropoutKind::Channel => {
                let channel: Vec<T> = (0..cols).map(|_| draw()).collect();
                channel.iter().copied().cycle().take(len).collect()
            }
            DropoutKind::Path => vec![draw(); len],
        };
        self.apply_mask(x, mask)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "nothing to concatenate"))?;
        let (_, c) = self.matrix(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c2) = self.matrix(p, "concat_rows")?;
            if c2 != c {
                return Err(Error::dim("concat_rows", format!("width {c2} vs {c}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new([rows, c], data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        self.push("slice_rows", out, Op::SliceRows { input: x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "nothing to concatenate"))?;
        let (r, _) = self.matrix(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r2, c) = self.matrix(p, "concat_cols")?;
            if r2 != r {
                return Err(Error::dim("concat_cols", format!("height {r2} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new([r, total], data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::dim(
                "slice_cols",
                format!("cols {start}..{} of {c}", start + len),
            ));
        }
        let src = self.value(x).data();
        let data = (0..r)
            .flat_map(|i| src[i * c + start..i * c + start + len].iter().copied())
            .collect();
        let out = Tensor::new([r, len], data)?;
        self.push("slice_cols", out, Op::SliceCols { input: x, start }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Accumulates d(output)/d(leaf) into every trainable leaf reachable from `output`.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("output must be a scalar, got dims {:?}", self.dims(output)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![T::one()]);

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (parent, contribution) in self.local_grads(idx, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc
                        .iter_mut()
                        .zip(&contribution)
                        .for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn local_grads(&self, idx: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        let grads = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = (self.dims(*a)[0], self.dims(*a)[1]);
                let n = self.dims(*b)[1];
                let mut res = Vec::new();
                if wants(a) {
                    let bt = transpose_raw(self.value(*b).data(), k, n);
                    res.push((*a, matmul_raw(g, &bt, m, n, k)));
                }
                if wants(b) {
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    res.push((*b, matmul_raw(&at, g, k, m, n)));
                }
                res
            }
            Op::Transpose(a) => {
                let (r, c) = (self.dims(*a)[0], self.dims(*a)[1]);
                vec![(*a, transpose_raw(g, c, r))]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => vec![
                (*a, zip_map(g, self.value(*b).data(), |x, y| x * y)),
                (*b, zip_map(g, self.value(*a).data(), |x, y| x * y)),
            ],
            Op::AddRow(x, row) => {
                let cols = self.value(*row).len();
                let mut rg = vec![T::zero(); cols];
                for chunk in g.chunks(cols) {
                    rg.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
                }
                vec![(*x, g.to_vec()), (*row, rg)]
            }
            Op::Scale(x, s) => vec![(*x, g.iter().map(|&v| v * *s).collect())],
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                vec![(*x, zip_map(g, xs, |gv, xv| gv * gelu_grad(xv)))]
            }
            Op::Softmax {
                input,
                temperature,
                causal,
            } => {
                let cols = node.value.cols();
                let mut dx = vec![T::zero(); g.len()];
                for (r, ((y, gr), dr)) in out
                    .chunks(cols)
                    .zip(g.chunks(cols))
                    .zip(dx.chunks_mut(cols))
                    .enumerate()
                {
                    let visible = if *causal { (r % cols) + 1 } else { cols };
                    let dot: T = y[..visible]
                        .iter()
                        .zip(&gr[..visible])
                        .map(|(&a, &b)| a * b)
                        .sum();
                    for j in 0..visible {
                        dr[j] = y[j] * (gr[j] - dot) / *temperature;
                    }
                }
                vec![(*input, dx)]
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                eps,
            } => {
                let x = self.value(*input);
                let d = x.cols();
                let gamma = self.value(*gain).data();
                let inv_d = T::lit(1.0 / d as f64);
                let mut dx = vec![T::zero(); x.len()];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for ((row, gr), dr) in x.data().chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let (mean, rstd) = row_moments(row, *eps);
                    let xhat: Vec<T> = row.iter().map(|&v| (v - mean) * rstd).collect();
                    let dxhat: Vec<T> = gr.iter().zip(gamma).map(|(&a, &b)| a * b).collect();
                    let mean_dxhat = dxhat.iter().copied().sum::<T>() * inv_d;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    for j in 0..d {
                        dr[j] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                }
                vec![(*input, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::L2Normalize(x) => {
                let xs = self.value(*x);
                let d = xs.cols();
                let mut dx = vec![T::zero(); xs.len()];
                for (((row, y), gr), dr) in xs
                    .data()
                    .chunks(d)
                    .zip(out.chunks(d))
                    .zip(g.chunks(d))
                    .zip(dx.chunks_mut(d))
                {
                    let norm = row_norm(row);
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = (gr[j] - y[j] * dot) / norm;
                    }
                }
                vec![(*x, dx)]
            }
            Op::CrossEntropy { probs, labels } => {
                let p = self.value(*probs);
                let c = p.cols();
                let n = T::lit(labels.len() as f64);
                let clamp = T::lit(LOG_CLAMP);
                let mut dp = vec![T::zero(); p.len()];
                for (i, &l) in labels.iter().enumerate() {
                    let v = p.data()[i * c + l];
                    if v > clamp {
                        dp[i * c + l] = -g[0] / (n * v);
                    }
                }
                vec![(*probs, dp)]
            }
            Op::Mask { input, mask } => vec![(*input, zip_map(g, mask, |a, m| a * m))],
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = self.value(p).len();
                        let slice = g[offset..offset + n].to_vec();
                        offset += n;
                        (p, slice)
                    })
                    .collect()
            }
            Op::SliceRows { input, start } => {
                let x = self.value(*input);
                let c = x.cols();
                let mut dx = vec![T::zero(); x.len()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                vec![(*input, dx)]
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let w = self.value(p).cols();
                        let slice = (0..rows)
                            .flat_map(|i| {
                                g[i * total + offset..i * total + offset + w]
                                    .iter()
                                    .copied()
                            })
                            .collect();
                        offset += w;
                        (p, slice)
                    })
                    .collect()
            }
            Op::SliceCols { input, start } => {
                let x = self.value(*input);
                let c = x.cols();
                let w = node.value.cols();
                let mut dx = vec![T::zero(); x.len()];
                for (i, gr) in g.chunks(w).enumerate() {
                    dx[i * c + start..i * c + start + w].copy_from_slice(gr);
                }
                vec![(*input, dx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
        };
        for (v, grad) in &grads {
            if grad.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient flowing into node {}",
                    v.0
                )));
            }
        }
        Ok(grads)
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn softmax_row<T: Scalar>(src: &[T], tau: T, dst: &mut [T]) {
    let max = src.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = ((s - max) / tau).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

fn row_moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, (var + eps).sqrt().recip())
}

fn row_norm<T: Scalar>(row: &[T]) -> T {
    row.iter().map(|&v| v * v).sum::<T>().sqrt()
}

const GELU_C: f64 = 0.044_715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + T::lit(GELU_C) * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(dims.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity_and_row_selection() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let i = g.constant(Tensor::eye(2)).unwrap();
        let p = g.matmul(a, i).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = g.constant(t(&[1, 2], &[1.0, 0.0])).unwrap();
        let c = g.constant(t(&[2, 1], &[2.0, 5.0])).unwrap();
        let q = g.matmul(r, c).unwrap();
        assert_eq!(g.value(q).data(), &[2.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3])).unwrap();
        let b = g.constant(Tensor::zeros([2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_worked_values() {
        let mut g = Graph::new();
        let x = g
            .constant(t(&[3, 2], &[0.0, 0.0, 1.0, 0.0, 2.0, 2.0]))
            .unwrap();
        let y = g.softmax(x, 1.0).unwrap();
        let v = g.value(y).data();
        assert_abs_diff_eq!(v[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(v[2], 0.731_058_578_6, epsilon = 1e-9);
        assert_abs_diff_eq!(v[3], 0.268_941_421_4, epsilon = 1e-9);
        assert_abs_diff_eq!(v[4], 0.5, epsilon = 1e-12);

        let z = g.constant(t(&[1, 3], &[5.0, 8.0, 5.0])).unwrap();
        let s = g.softmax(z, 1.0).unwrap();
        let v = g.value(s).data();
        assert_abs_diff_eq!(v[0], 0.0453, epsilon = 1e-4);
        assert_abs_diff_eq!(v[1], 0.9094, epsilon = 1e-4);
        assert_abs_diff_eq!(v[2], 0.0453, epsilon = 1e-4);
    }

    #[test]
    fn softmax_rejects_non_positive_temperature() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 2])).unwrap();
        assert!(matches!(g.softmax(x, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(g.softmax(x, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut g = Graph::<f32>::new();
        let x = g
            .constant(Tensor::from_f64([1, 2], &[1000.0, 0.0]).unwrap())
            .unwrap();
        let y = g.softmax(x, 0.01).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g
            .constant(t(&[3, 3], &[1.0, 9.0, 9.0, 1.0, 1.0, 9.0, 1.0, 2.0, 3.0]))
            .unwrap();
        let y = g.causal_softmax(x, 1.0).unwrap();
        let v = g.value(y).data();
        assert_eq!(&v[0..3], &[1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(v[3], 0.5, epsilon = 1e-12);
        assert_eq!(v[5], 0.0);
    }

    #[test]
    fn layer_norm_limits() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::full([2], 1.0)).unwrap();
        let bias = g.constant(Tensor::zeros([2])).unwrap();
        let x = g.constant(t(&[2, 2], &[3.0, 3.0, 1.0, -1.0])).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let v = g.value(y).data();
        assert_abs_diff_eq!(v[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[2], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(v[3], -1.0, epsilon = 1e-9);

        let wrong = g.constant(Tensor::zeros([3])).unwrap();
        assert!(matches!(
            g.layer_norm(x, wrong, bias, 1e-5),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn l2_normalize_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[3.0, 4.0, 1.0, 0.0])).unwrap();
        let y = g.l2_normalize(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8, 1.0, 0.0]);
        let z = g.constant(t(&[1, 2], &[0.0, 0.0])).unwrap();
        assert!(matches!(g.l2_normalize(z), Err(Error::Degenerate(_))));
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::new();
        let onehot = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let l = g.cross_entropy(onehot, &[0, 1]).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), 0.0, epsilon = 1e-12);

        let uniform = g.constant(Tensor::full([3, 4], 0.25)).unwrap();
        let l = g.cross_entropy(uniform, &[0, 3, 2]).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), 4f64.ln(), epsilon = 1e-12);

        let e = std::f64::consts::E;
        let p = g
            .constant(t(&[1, 2], &[e / (1.0 + e), 1.0 / (1.0 + e)]))
            .unwrap();
        let l = g.cross_entropy(p, &[0]).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), 0.31326, epsilon = 1e-5);
        let rounded = g.constant(t(&[1, 2], &[0.7311, 0.2689])).unwrap();
        let l = g.cross_entropy(rounded, &[0]).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), 0.31326, epsilon = 1e-4);

        assert!(matches!(g.cross_entropy(p, &[2]), Err(Error::Index(_))));
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let mut g = Graph::new();
        let p = g.param(t(&[1, 2], &[0.0, 1.0])).unwrap();
        let l = g.cross_entropy(p, &[0]).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), -(LOG_CLAMP.ln()), epsilon = 1e-9);
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let mut g = Graph::<f64>::new();
        assert!(matches!(
            g.constant(t(&[1], &[f64::NAN])),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn dropout_eval_is_identity_and_train_masks() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full([4, 8], 1.0)).unwrap();
        let same = g
            .dropout::<ChaCha8Rng>(x, 0.5, DropoutKind::Element, None)
            .unwrap();
        assert_eq!(same, x);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ch = g
            .dropout(x, 0.5, DropoutKind::Channel, Some(&mut rng))
            .unwrap();
        let v = g.value(ch).data().to_vec();
        for r in 1..4 {
            assert_eq!(&v[r * 8..(r + 1) * 8], &v[0..8]);
        }
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));

        let path = g
            .dropout(x, 0.5, DropoutKind::Path, Some(&mut rng))
            .unwrap();
        let v = g.value(path).data();
        assert!(v.iter().all(|&e| e == v[0]));

        assert!(matches!(
            g.dropout(x, 1.0, DropoutKind::Element, Some(&mut rng)),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 3], &[1.0, -2.0, 0.5])).unwrap();
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        let once = g.grad(x).unwrap();
        assert_eq!(once.data(), &[2.0, -4.0, 1.0]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, -8.0, 2.0]);
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), once);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let w = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let x = g.param(t(&[1, 2], &[1.0, 1.0])).unwrap();
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip_columns() {
        let mut g = Graph::new();
        let x = g
            .param(t(&[2, 4], &[1., 2., 3., 4., 5., 6., 7., 8.]))
            .unwrap();
        let a = g.slice_cols(x, 0, 1).unwrap();
        let b = g.slice_cols(x, 1, 3).unwrap();
        let y = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let r = g.slice_rows(y, 1, 1).unwrap();
        assert_eq!(g.value(r).data(), &[5., 6., 7., 8.]);
    }
}
