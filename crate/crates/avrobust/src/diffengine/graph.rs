//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation executed on it, in order, together
//! with whatever the gradient rule needs (im2col buffers, argmax indices,
//! attention weights, dropout masks). [`Graph::backward`] walks the tape in
//! reverse once and accumulates gradients into each input in tape order, so
//! results are bit-reproducible for identical inputs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::linalg::{gemm, Strides};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
    SoftmaxLastDim,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Relu(Var),
    Clamp(Var, f64, f64),
    Sigmoid(Var),
    SoftmaxLast(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        pad: (usize, usize),
        cols: Vec<f64>,
    },
    Pool {
        input: Var,
        mode: PoolMode,
        window: (usize, usize),
        argmax: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    BceLogits(Var, Vec<f64>),
    BceProbs(Var, Vec<f64>),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Takes ownership of a gradient, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Probability clamp used by [`Graph::bce_probs`].
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::State("graph already consumed by backward".into()));
        }
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [m, n] => Ok((m, n)),
            ref s => Err(Error::dim(format!("{what}: expected 2-D tensor, got {s:?}"))),
        }
    }

    fn dims3(&self, v: Var, what: &str) -> Result<(usize, usize, usize)> {
        match *self.shape(v) {
            [a, b, c] => Ok((a, b, c)),
            ref s => Err(Error::dim(format!("{what}: expected 3-D tensor, got {s:?}"))),
        }
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Strides::row_major(k),
            self.value(b).data(),
            Strides::row_major(n),
            0.0,
            &mut out,
            Strides::row_major(n),
        );
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let va = self.value(a);
        let t = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect());
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// `x[m×n] + b[n]`, broadcasting `b` over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_row_bias")?;
        if self.value(b).len() != n {
            return Err(Error::dim(format!(
                "row bias of length {} for width {n}",
                self.value(b).len()
            )));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        self.push(Tensor::from_parts(vec![m, n], out), Op::AddRowBias(x, b), &[x, b])
    }

    /// `x[C×…] + b[C]`, broadcasting `b` over every trailing position.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.first().ok_or_else(|| Error::dim("channel bias on scalar"))?;
        if self.value(b).len() != c {
            return Err(Error::dim(format!(
                "channel bias of length {} for {c} channels",
                self.value(b).len()
            )));
        }
        let inner = self.value(x).len() / c.max(1);
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for (ch, block) in out.chunks_mut(inner.max(1)).enumerate().take(c) {
            for o in block {
                *o += bias[ch];
            }
        }
        self.push(Tensor::from_parts(shape, out), Op::AddChannelBias(x, b), &[x, b])
    }

    // ----- shape manipulation ---------------------------------------------

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        let t = Tensor::from_parts(t.shape().to_vec(), t.into_data());
        self.push(t, Op::Reshape(a), &[a])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.value(a).data(), &shape, perm);
        self.push(Tensor::from_parts(out_shape, out), Op::Permute(a, perm.to_vec()), &[a])
    }

    /// Rows `[start, start+len)` along axis 0.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rows = *shape.first().ok_or_else(|| Error::dim("slice of scalar"))?;
        if start + len > rows || len == 0 {
            return Err(Error::dim(format!(
                "row slice [{start}, {}) out of {rows}",
                start + len
            )));
        }
        let inner = self.value(a).len() / rows;
        let data = self.value(a).data()[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        self.push(Tensor::from_parts(out_shape, data), Op::SliceRows(a, start), &[a])
    }

    /// Concatenation along axis 0; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::dim(format!("concat_rows: {s:?} does not match tail {tail:?}")));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push(Tensor::from_parts(shape, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Concatenation of 2-D tensors along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let (m, _) = self.dims2(*first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_cols")?;
            if pm != m {
                return Err(Error::dim(format!("concat_cols: {pm} rows vs {m}")));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Tensor::from_parts(vec![m, n], out), Op::ConcatCols(parts.to_vec()), parts)
    }

    /// `out[i] = a[index[i]]` along axis 0 of a 2-D tensor.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(a, "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::dim(format!("gather index {bad} out of {m} rows")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        self.push(
            Tensor::from_parts(vec![index.len(), n], out),
            Op::GatherRows(a, index.to_vec()),
            &[a],
        )
    }

    // ----- pointwise ------------------------------------------------------

    pub fn pointwise(&mut self, a: Var, kind: Pointwise) -> Result<Var> {
        match kind {
            Pointwise::Relu => self.relu(a),
            Pointwise::Sigmoid => self.sigmoid(a),
            Pointwise::SoftmaxLastDim => self.softmax_last(a),
        }
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = unary(self.value(a), |x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient passes only where
    /// the input lies inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::config(format!("clamp bounds [{lo}, {hi}] are empty")));
        }
        let t = self.value(a).map(|x| x.clamp(lo, hi))?;
        self.push(t, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = unary(self.value(a), sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let n = *va.shape().last().ok_or_else(|| Error::dim("softmax of scalar"))?;
        if n == 0 {
            return Err(Error::dim("softmax over empty axis"));
        }
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(va.shape().to_vec(), out);
        self.push(t, Op::SoftmaxLast(a), &[a])
    }

    // ----- convolution and pooling ----------------------------------------

    /// Zero-padded cross-correlation of `input[C×T×F]` with
    /// `kernel[C'×C×kh×kw]`, giving `[C'×T'×F']` with
    /// `T' = T + 2·pad_t − kh + 1` (same for `F'`).
    pub fn conv2d(&mut self, input: Var, kernel: Var, pad: (usize, usize)) -> Result<Var> {
        let (c, t, f) = self.dims3(input, "conv2d input")?;
        let (co, ci, kh, kw) = match *self.shape(kernel) {
            [a, b, c2, d] => (a, b, c2, d),
            ref s => return Err(Error::dim(format!("conv2d kernel must be 4-D, got {s:?}"))),
        };
        if ci != c {
            return Err(Error::dim(format!("conv2d: kernel expects {ci} channels, input has {c}")));
        }
        let (tp, fp) = (t + 2 * pad.0, f + 2 * pad.1);
        if kh == 0 || kw == 0 || kh > tp || kw > fp {
            return Err(Error::dim(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {tp}x{fp}"
            )));
        }
        let (to, fo) = (tp - kh + 1, fp - kw + 1);
        let cols = im2col(self.value(input).data(), (c, t, f), (kh, kw), pad, (to, fo));
        let kk = c * kh * kw;
        let p = to * fo;
        let mut out = vec![0.0; co * p];
        gemm(
            co,
            kk,
            p,
            self.value(kernel).data(),
            Strides::row_major(kk),
            &cols,
            Strides::transposed(kk),
            0.0,
            &mut out,
            Strides::row_major(p),
        );
        let keep_cols = if self.nodes[kernel.0].requires_grad { cols } else { Vec::new() };
        self.push(
            Tensor::from_parts(vec![co, to, fo], out),
            Op::Conv2d {
                input,
                kernel,
                pad,
                cols: keep_cols,
            },
            &[input, kernel],
        )
    }

    /// Non-overlapping pooling over the last two axes of `[C×T×F]`.
    /// Trailing frames/bins that do not fill a window are dropped.
    pub fn pool(&mut self, input: Var, window: (usize, usize), mode: PoolMode) -> Result<Var> {
        let (c, t, f) = self.dims3(input, "pool")?;
        let (wt, wf) = window;
        if wt == 0 || wf == 0 {
            return Err(Error::dim("pool window extents must be >= 1"));
        }
        if wt > t || wf > f {
            return Err(Error::dim(format!("pool window {wt}x{wf} exceeds input {t}x{f}")));
        }
        let (to, fo) = (t / wt, f / wf);
        let src = self.value(input).data();
        let mut out = vec![0.0; c * to * fo];
        let mut argmax = Vec::new();
        if mode == PoolMode::Max {
            argmax.resize(out.len(), 0);
        }
        let inv = 1.0 / (wt * wf) as f64;
        for ch in 0..c {
            for i in 0..to {
                for j in 0..fo {
                    let o = (ch * to + i) * fo + j;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    let mut acc = 0.0;
                    for di in 0..wt {
                        let row = (ch * t + i * wt + di) * f + j * wf;
                        for dj in 0..wf {
                            let v = src[row + dj];
                            acc += v;
                            if v > best {
                                best = v;
                                best_idx = row + dj;
                            }
                        }
                    }
                    match mode {
                        PoolMode::Max => {
                            out[o] = best;
                            argmax[o] = best_idx;
                        }
                        PoolMode::Mean => out[o] = acc * inv,
                    }
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![c, to, fo], out),
            Op::Pool {
                input,
                mode,
                window,
                argmax,
            },
            &[input],
        )
    }

    // ----- attention ------------------------------------------------------

    /// Multi-head scaled dot-product attention over `[T×d]` inputs. The
    /// residual connection is left to the caller; no position input exists.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (t, d) = self.dims2(q, "attention q")?;
        if self.shape(k) != [t, d] || self.shape(v) != [t, d] {
            return Err(Error::dim(format!(
                "attention: q {:?}, k {:?}, v {:?} must share a shape",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("width {d} is not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        for h in 0..heads {
            let a = &mut probs[h * t * t..(h + 1) * t * t];
            gemm(
                t,
                dh,
                t,
                &qd[h * dh..],
                Strides::row_major(d),
                &kd[h * dh..],
                Strides::transposed(d),
                0.0,
                a,
                Strides::row_major(t),
            );
            for row in a.chunks_mut(t) {
                for x in row.iter_mut() {
                    *x *= scale;
                }
                softmax_in_place(row);
            }
            gemm(
                t,
                t,
                dh,
                a,
                Strides::row_major(t),
                &vd[h * dh..],
                Strides::row_major(d),
                0.0,
                &mut out[h * dh..],
                Strides::row_major(d),
            );
        }
        self.push(
            Tensor::from_parts(vec![t, d], out),
            Op::Attention { q, k, v, heads, probs },
            &[q, k, v],
        )
    }

    // ----- regularization and losses ----------------------------------------

    /// Inverted dropout: at train time keeps each value with probability
    /// `1 − rate` and rescales by `1/(1 − rate)`; identity otherwise.
    pub fn dropout(&mut self, a: Var, rate: f64, seed: u64, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let va = self.value(a);
        let mask: Vec<f64> = (0..va.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = va.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), out);
        self.push(t, Op::Dropout(a, mask), &[a])
    }

    /// Mean multi-label binary cross-entropy on logits, in the
    /// `max(z,0) − z·y + ln(1 + e^{−|z|})` form.
    pub fn bce_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        check_targets(z, targets)?;
        let n = z.len() as f64;
        let loss: f64 = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let y = targets.data().to_vec();
        self.push(Tensor::from_parts(vec![1], vec![loss]), Op::BceLogits(logits, y), &[logits])
    }

    /// Mean binary cross-entropy on probabilities in (0,1). Probabilities
    /// are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before the logarithm.
    pub fn bce_probs(&mut self, probs: Var, targets: &Tensor) -> Result<Var> {
        let p = self.value(probs);
        check_targets(p, targets)?;
        let n = p.len() as f64;
        let loss: f64 = p
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&p, &y)| {
                let p = clamp_prob(p);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let y = targets.data().to_vec();
        self.push(Tensor::from_parts(vec![1], vec![loss]), Op::BceProbs(probs, y), &[probs])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::from_parts(vec![1], vec![s]), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::dim("mean of empty tensor"));
        }
        let s = va.sum() / va.len() as f64;
        self.push(Tensor::from_parts(vec![1], vec![s]), Op::MeanAll(a), &[a])
    }

    /// Sum of a 2-D tensor over `axis`, dropping that axis.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "sum_axis")?;
        let src = self.value(a).data();
        let out = match axis {
            0 => {
                let mut out = vec![0.0; n];
                for row in src.chunks(n) {
                    for (o, x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                out
            }
            1 => src.chunks(n).map(|row| row.iter().sum()).collect(),
            _ => return Err(Error::dim(format!("sum_axis: axis {axis} of a 2-D tensor"))),
        };
        let len = if axis == 0 { n } else { m };
        self.push(Tensor::from_parts(vec![len], out), Op::SumAxis(a, axis), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "mean_axis")?;
        let s = self.sum_axis(a, axis)?;
        let count = if axis == 0 { m } else { n };
        self.scale(s, 1.0 / count as f64)
    }

    // ----- backward -------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Consumes the tape: a second call
    /// fails with a state error. Every leaf that requires a gradient gets
    /// one, zero-filled when disconnected from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State("backward called twice on the same tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(Tensor::from_parts(
                    node.value.shape().to_vec(),
                    g.unwrap_or_else(|| vec![0.0; node.value.len()]),
                )),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let ga = acc_buf(grads, *a, m * k);
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        Strides::row_major(n),
                        self.value(*b).data(),
                        Strides::transposed(n),
                        1.0,
                        ga,
                        Strides::row_major(k),
                    );
                }
                if self.needs(*b) {
                    let gb = acc_buf(grads, *b, k * n);
                    gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        Strides::transposed(k),
                        g,
                        Strides::row_major(n),
                        1.0,
                        gb,
                        Strides::row_major(n),
                    );
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, g.iter().zip(vb).map(|(g, y)| g * y));
                self.acc(grads, *b, g.iter().zip(va).map(|(g, x)| g * x));
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.iter().map(|x| x * c)),
            Op::AddRowBias(x, b) => {
                self.acc(grads, *x, g.iter().copied());
                if self.needs(*b) {
                    let n = self.value(*b).len();
                    let gb = acc_buf(grads, *b, n);
                    for row in g.chunks(n) {
                        for (o, x) in gb.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                }
            }
            Op::AddChannelBias(x, b) => {
                self.acc(grads, *x, g.iter().copied());
                if self.needs(*b) {
                    let c = self.value(*b).len();
                    let inner = (g.len() / c.max(1)).max(1);
                    let gb = acc_buf(grads, *b, c);
                    for (ch, block) in g.chunks(inner).enumerate().take(c) {
                        gb[ch] += block.iter().sum::<f64>();
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                if self.needs(*a) {
                    let ga = acc_buf(grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => self.acc(grads, *a, g.iter().copied()),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, node.value.shape(), &inv);
                self.acc(grads, *a, back.into_iter());
            }
            Op::SliceRows(a, start) => {
                if self.needs(*a) {
                    let total = self.value(*a).len();
                    let ga = acc_buf(grads, *a, total);
                    let offset = start * (total / self.shape(*a)[0]);
                    for (o, x) in ga[offset..offset + g.len()].iter_mut().zip(g) {
                        *o += x;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.acc(grads, *p, g[offset..offset + len].iter().copied());
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let n = node.value.shape()[1];
                let mut col = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    if self.needs(*p) {
                        let gp = acc_buf(grads, *p, m * w);
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += g[i * n + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::GatherRows(a, index) => {
                if self.needs(*a) {
                    let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let ga = acc_buf(grads, *a, m * n);
                    for (r, &src) in index.iter().enumerate() {
                        for j in 0..n {
                            ga[src * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let pass = |x: f64| x >= *lo && x <= *hi;
                self.acc(grads, *a, g.iter().zip(x).map(|(g, &x)| if pass(x) { *g } else { 0.0 }));
            }
            Op::Sigmoid(a) => {
                self.acc(grads, *a, g.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)));
            }
            Op::SoftmaxLast(a) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                if self.needs(*a) {
                    let mut back = vec![0.0; g.len()];
                    for ((gr, yr), br) in g.chunks(n).zip(out.chunks(n)).zip(back.chunks_mut(n)) {
                        softmax_backward(gr, yr, br);
                    }
                    self.acc(grads, *a, back.into_iter());
                }
            }
            Op::Conv2d { input, kernel, pad, cols } => {
                let (c, t, f) = {
                    let s = self.shape(*input);
                    (s[0], s[1], s[2])
                };
                let ks = self.shape(*kernel);
                let (co, kh, kw) = (ks[0], ks[2], ks[3]);
                let (to, fo) = (node.value.shape()[1], node.value.shape()[2]);
                let kk = c * kh * kw;
                let p = to * fo;
                if self.needs(*kernel) {
                    let gk = acc_buf(grads, *kernel, co * kk);
                    gemm(
                        co,
                        p,
                        kk,
                        g,
                        Strides::row_major(p),
                        cols,
                        Strides::row_major(kk),
                        1.0,
                        gk,
                        Strides::row_major(kk),
                    );
                }
                if self.needs(*input) {
                    let mut dcols = vec![0.0; p * kk];
                    gemm(
                        p,
                        co,
                        kk,
                        g,
                        Strides::transposed(p),
                        self.value(*kernel).data(),
                        Strides::row_major(kk),
                        0.0,
                        &mut dcols,
                        Strides::row_major(kk),
                    );
                    let gi = acc_buf(grads, *input, c * t * f);
                    col2im_add(&dcols, gi, (c, t, f), (kh, kw), *pad, (to, fo));
                }
            }
            Op::Pool { input, mode, window, argmax } => {
                if self.needs(*input) {
                    let s = self.shape(*input);
                    let (c, t, f) = (s[0], s[1], s[2]);
                    let gi = acc_buf(grads, *input, c * t * f);
                    match mode {
                        PoolMode::Max => {
                            for (o, &src) in argmax.iter().enumerate() {
                                gi[src] += g[o];
                            }
                        }
                        PoolMode::Mean => {
                            let (wt, wf) = *window;
                            let (to, fo) = (t / wt, f / wf);
                            let inv = 1.0 / (wt * wf) as f64;
                            for ch in 0..c {
                                for i in 0..to {
                                    for j in 0..fo {
                                        let gv = g[(ch * to + i) * fo + j] * inv;
                                        for di in 0..wt {
                                            let row = (ch * t + i * wt + di) * f + j * wf;
                                            for dj in 0..wf {
                                                gi[row + dj] += gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward((*q, *k, *v), *heads, probs, g, grads);
            }
            Op::Dropout(a, mask) => {
                self.acc(grads, *a, g.iter().zip(mask).map(|(g, m)| g * m));
            }
            Op::BceLogits(a, y) => {
                let z = self.value(*a).data();
                let scale = g[0] / z.len() as f64;
                self.acc(grads, *a, z.iter().zip(y).map(|(&z, &y)| (sigmoid(z) - y) * scale));
            }
            Op::BceProbs(a, y) => {
                let p = self.value(*a).data();
                let scale = g[0] / p.len() as f64;
                self.acc(
                    grads,
                    *a,
                    p.iter().zip(y).map(|(&p, &y)| {
                        let p = clamp_prob(p);
                        (p - y) / (p * (1.0 - p)) * scale
                    }),
                );
            }
            Op::SumAll(a) => {
                let len = self.value(*a).len();
                self.acc(grads, *a, std::iter::repeat(g[0]).take(len));
            }
            Op::MeanAll(a) => {
                let len = self.value(*a).len();
                let gv = g[0] / len as f64;
                self.acc(grads, *a, std::iter::repeat(gv).take(len));
            }
            Op::SumAxis(a, axis) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                if self.needs(*a) {
                    let ga = acc_buf(grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += if *axis == 0 { g[j] } else { g[i] };
                        }
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        (q, k, v): (Var, Var, Var),
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (t, d) = (self.shape(q)[0], self.shape(q)[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut da = vec![0.0; t * t];
        let mut ds = vec![0.0; t * t];
        for h in 0..heads {
            let a = &probs[h * t * t..(h + 1) * t * t];
            gemm(
                t,
                t,
                dh,
                a,
                Strides::transposed(t),
                &g[h * dh..],
                Strides::row_major(d),
                0.0,
                &mut dv[h * dh..],
                Strides::row_major(d),
            );
            gemm(
                t,
                dh,
                t,
                &g[h * dh..],
                Strides::row_major(d),
                &vd[h * dh..],
                Strides::transposed(d),
                0.0,
                &mut da,
                Strides::row_major(t),
            );
            for ((gr, yr), br) in da.chunks(t).zip(a.chunks(t)).zip(ds.chunks_mut(t)) {
                softmax_backward(gr, yr, br);
                for x in br.iter_mut() {
                    *x *= scale;
                }
            }
            gemm(
                t,
                t,
                dh,
                &ds,
                Strides::row_major(t),
                &kd[h * dh..],
                Strides::row_major(d),
                0.0,
                &mut dq[h * dh..],
                Strides::row_major(d),
            );
            gemm(
                t,
                t,
                dh,
                &ds,
                Strides::transposed(t),
                &qd[h * dh..],
                Strides::row_major(d),
                0.0,
                &mut dk[h * dh..],
                Strides::row_major(d),
            );
        }
        self.acc(grads, q, dq.into_iter());
        self.acc(grads, k, dk.into_iter());
        self.acc(grads, v, dv.into_iter());
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl Iterator<Item = f64>) {
        if !self.needs(v) {
            return;
        }
        let len = self.value(v).len();
        let buf = acc_buf(grads, v, len);
        for (b, c) in buf.iter_mut().zip(contrib) {
            *b += c;
        }
    }
}

fn acc_buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddRowBias(..) => "add_row_bias",
        Op::AddChannelBias(..) => "add_channel_bias",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::Permute(..) => "permute",
        Op::SliceRows(..) => "slice_rows",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::GatherRows(..) => "gather_rows",
        Op::Relu(..) => "relu",
        Op::Clamp(..) => "clamp",
        Op::Sigmoid(..) => "sigmoid",
        Op::SoftmaxLast(..) => "softmax",
        Op::Conv2d { .. } => "conv2d",
        Op::Pool { .. } => "pool",
        Op::Attention { .. } => "attention",
        Op::Dropout(..) => "dropout",
        Op::BceLogits(..) => "bce_logits",
        Op::BceProbs(..) => "bce_probs",
        Op::SumAll(..) => "sum",
        Op::MeanAll(..) => "mean",
        Op::SumAxis(..) => "sum_axis",
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn unary(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// `back = y ⊙ (g − ⟨g, y⟩)` for one softmax row.
fn softmax_backward(g: &[f64], y: &[f64], back: &mut [f64]) {
    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
    for ((b, &gi), &yi) in back.iter_mut().zip(g).zip(y) {
        *b = yi * (gi - dot);
    }
}

fn check_targets(pred: &Tensor, targets: &Tensor) -> Result<()> {
    if pred.shape() != targets.shape() {
        return Err(Error::dim(format!(
            "predictions {:?} vs targets {:?}",
            pred.shape(),
            targets.shape()
        )));
    }
    if let Some(bad) = targets.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::validation(format!("target {bad} is not binary")));
    }
    Ok(())
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    for _ in 0..total {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Rows are output positions `(t', f')`, columns are `(c, i, j)` taps.
fn im2col(
    x: &[f64],
    (c, t, f): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (pt, pf): (usize, usize),
    (to, fo): (usize, usize),
) -> Vec<f64> {
    let kk = c * kh * kw;
    let mut cols = vec![0.0; to * fo * kk];
    for ot in 0..to {
        for of in 0..fo {
            let row = &mut cols[(ot * fo + of) * kk..(ot * fo + of + 1) * kk];
            let mut col = 0;
            for ch in 0..c {
                for i in 0..kh {
                    let ti = (ot + i) as isize - pt as isize;
                    for j in 0..kw {
                        let fj = (of + j) as isize - pf as isize;
                        if ti >= 0 && (ti as usize) < t && fj >= 0 && (fj as usize) < f {
                            row[col] = x[(ch * t + ti as usize) * f + fj as usize];
                        }
                        col += 1;
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(
    cols: &[f64],
    gx: &mut [f64],
    (c, t, f): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (pt, pf): (usize, usize),
    (to, fo): (usize, usize),
) {
    let kk = c * kh * kw;
    for ot in 0..to {
        for of in 0..fo {
            let row = &cols[(ot * fo + of) * kk..(ot * fo + of + 1) * kk];
            let mut col = 0;
            for ch in 0..c {
                for i in 0..kh {
                    let ti = (ot + i) as isize - pt as isize;
                    for j in 0..kw {
                        let fj = (of + j) as isize - pf as isize;
                        if ti >= 0 && (ti as usize) < t && fj >= 0 && (fj as usize) < f {
                            gx[(ch * t + ti as usize) * f + fj as usize] += row[col];
                        }
                        col += 1;
                    }
                }
            }
        }
    }
}
