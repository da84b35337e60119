//! Forward constructors and reverse rules for every recorded operation.

use super::{aligned_strides, broadcast_shape, for_each_pair, Graph, Node, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, strides_of, MatRef, Real, Tensor};

/// Running-statistics momentum: `running = 0.9 * running + 0.1 * batch`.
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean/variance of one batch-norm layer, shaped like its affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<F: Real> {
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
}

impl<F: Real> BatchNormState<F> {
    pub fn new(shape: &[usize]) -> Self {
        BatchNormState {
            running_mean: Tensor::zeros(shape),
            running_var: Tensor::full(shape, F::one()),
        }
    }
}

/// Kernel length, stride and zero padding of a convolution along time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry {
            kernel,
            stride,
            padding,
        }
    }

    /// `floor((t + 2 * padding - kernel) / stride) + 1`, or `None` when no
    /// window fits.
    pub fn output_len(&self, t: usize) -> Option<usize> {
        let span = t + 2 * self.padding;
        if self.stride == 0 || span < self.kernel {
            return None;
        }
        Some((span - self.kernel) / self.stride + 1)
    }
}

/// Maps each element of a tensor onto the batch-norm channel formed by its
/// non-reduced axes.
#[derive(Clone, Debug)]
pub(super) enum ChannelLayout {
    /// Non-reduced axes are adjacent: `[outer, channels, inner]`.
    Blocked {
        outer: usize,
        channels: usize,
        inner: usize,
    },
    Mapped {
        channels: usize,
        map: Vec<u32>,
    },
}

impl ChannelLayout {
    fn new(shape: &[usize], axes: &[usize]) -> Result<Self> {
        if axes.is_empty() || axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::shape(
                "batch_norm",
                format!("reduction axes {axes:?} invalid for {shape:?}"),
            ));
        }
        let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
        let channels: usize = kept.iter().map(|&a| shape[a]).product();
        let contiguous = kept.windows(2).all(|w| w[1] == w[0] + 1);
        if contiguous {
            let (lo, hi) = match (kept.first(), kept.last()) {
                (Some(&lo), Some(&hi)) => (lo, hi + 1),
                _ => (0, 0),
            };
            return Ok(ChannelLayout::Blocked {
                outer: shape[..lo].iter().product(),
                channels,
                inner: shape[hi..].iter().product(),
            });
        }
        let strides = strides_of(shape);
        let kept_dims: Vec<usize> = kept.iter().map(|&a| shape[a]).collect();
        let kept_strides = strides_of(&kept_dims);
        let numel: usize = shape.iter().product();
        let map = (0..numel)
            .map(|i| {
                kept.iter()
                    .zip(&kept_strides)
                    .map(|(&a, &ks)| (i / strides[a]) % shape[a] * ks)
                    .sum::<usize>() as u32
            })
            .collect();
        Ok(ChannelLayout::Mapped { channels, map })
    }

    fn channels(&self) -> usize {
        match self {
            ChannelLayout::Blocked { channels, .. } | ChannelLayout::Mapped { channels, .. } => {
                *channels
            }
        }
    }

    /// Visits maximal runs `start..start + len` that share channel `c`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        match self {
            ChannelLayout::Blocked {
                outer,
                channels,
                inner,
            } => {
                for o in 0..*outer {
                    for c in 0..*channels {
                        f((o * channels + c) * inner, *inner, c);
                    }
                }
            }
            ChannelLayout::Mapped { map, .. } => {
                for (i, &c) in map.iter().enumerate() {
                    f(i, 1, c as usize);
                }
            }
        }
    }
}

pub(super) enum Op<F: Real> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        /// Matrix index into `a` and `b` for every output matrix.
        pairs: Vec<(usize, usize)>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: F,
    },
    Relu {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    TransposeLast {
        a: Var,
    },
    Sum {
        a: Var,
    },
    GlobalAvgPool {
        a: Var,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    TemporalConv {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: ChannelLayout,
        mean: Vec<F>,
        inv_std: Vec<F>,
        train: bool,
    },
    VertexDiff {
        x: Var,
        parents: Vec<usize>,
    },
}

impl<F: Real> Op<F> {
    pub(super) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } => vec![*a, *b],
            Op::Scale { a, .. }
            | Op::Relu { a }
            | Op::Reshape { a }
            | Op::TransposeLast { a }
            | Op::Sum { a }
            | Op::GlobalAvgPool { a }
            | Op::Softmax { a, .. } => vec![*a],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::TemporalConv { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::VertexDiff { x, .. } => vec![*x],
        }
    }
}

fn softmax_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// Copies the receptive fields of sample `x` (`[C, T, V]`) into a
/// `[C * kernel, t_out * V]` matrix.
fn im2col<F: Real>(x: &[F], c: usize, t: usize, v: usize, geom: ConvGeometry, t_out: usize, col: &mut [F]) {
    let row_len = t_out * v;
    for ci in 0..c {
        for k in 0..geom.kernel {
            let row = &mut col[(ci * geom.kernel + k) * row_len..][..row_len];
            for to in 0..t_out {
                let dst = &mut row[to * v..][..v];
                let ti = (to * geom.stride + k) as isize - geom.padding as isize;
                if ti < 0 || ti as usize >= t {
                    dst.iter_mut().for_each(|d| *d = F::zero());
                } else {
                    dst.copy_from_slice(&x[(ci * t + ti as usize) * v..][..v]);
                }
            }
        }
    }
}

fn col2im<F: Real>(col: &[F], c: usize, t: usize, v: usize, geom: ConvGeometry, t_out: usize, gx: &mut [F]) {
    let row_len = t_out * v;
    for ci in 0..c {
        for k in 0..geom.kernel {
            let row = &col[(ci * geom.kernel + k) * row_len..][..row_len];
            for to in 0..t_out {
                let ti = (to * geom.stride + k) as isize - geom.padding as isize;
                if ti < 0 || ti as usize >= t {
                    continue;
                }
                let dst = &mut gx[(ci * t + ti as usize) * v..][..v];
                for (d, s) in dst.iter_mut().zip(&row[to * v..][..v]) {
                    *d += *s;
                }
            }
        }
    }
}

impl<F: Real> Graph<F> {
    /// Batched matrix product over the last two axes; leading (batch) axes
    /// broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: rank < 2")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb)
            .ok_or_else(|| Error::shape("matmul", format!("batch axes {ba:?} vs {bb:?}")))?;
        let mut pairs = Vec::new();
        for_each_pair(
            &batch,
            &aligned_strides(ba, &batch),
            &aligned_strides(bb, &batch),
            |_, ia, ib| pairs.push((ia, ib)),
        );
        let mut out = vec![F::zero(); pairs.len() * m * n];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            for (o, &(ia, ib)) in out.chunks_mut(m * n).zip(&pairs) {
                gemm(
                    MatRef::new(&va[ia * m * k..], m, k),
                    MatRef::new(&vb[ib * k * n..], k, n),
                    o,
                    false,
                );
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let value = Tensor::new(&shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b, m, k, n, pairs })
    }

    /// Elementwise sum with trailing-dimension broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::shape("add", format!("{sa:?} + {sb:?}")))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            va.iter().zip(vb).map(|(x, y)| *x + *y).collect()
        } else {
            let mut data = vec![F::zero(); shape.iter().product()];
            for_each_pair(
                &shape,
                &aligned_strides(&sa, &shape),
                &aligned_strides(&sb, &shape),
                |i, ia, ib| data[i] = va[ia] + vb[ib],
            );
            data
        };
        let value = Tensor::new(&shape, data)?;
        self.push("add", value, Op::Add { a, b })
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        let value = self.value(a).map(|v| v * s);
        self.push("scale", value, Op::Scale { a, s })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| if v > F::zero() { v } else { F::zero() });
        self.push("relu", value, Op::Relu { a })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push_unchecked(value, Op::Reshape { a }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let value = transpose_last(self.value(a))?;
        Ok(self.push_unchecked(value, Op::TransposeLast { a }))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum { a })
    }

    /// `[N, C, ...] -> [N, C]`, averaging every trailing axis.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("global_avg_pool", format!("{shape:?}: rank < 2")));
        }
        let rest: usize = shape[2..].iter().product();
        let inv = F::one() / F::from_usize(rest).unwrap_or_else(F::one);
        let data = self
            .value(a)
            .data()
            .chunks(rest)
            .map(|c| c.iter().copied().sum::<F>() * inv)
            .collect();
        let value = Tensor::new(&shape[..2], data)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool { a })
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for {shape:?}")));
        }
        let value = softmax(self.value(a), axis);
        self.push("softmax", value, Op::Softmax { a, axis })
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {shape:?} with {} labels", labels.len()),
            ));
        }
        let k = shape[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let probs = softmax(self.value(logits), 1).into_data();
        let n = F::from_usize(labels.len()).unwrap_or_else(F::one);
        let logits_data = self.value(logits).data();
        let mut loss = F::zero();
        for (row, &label) in logits_data.chunks(k).zip(labels) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            loss += lse - row[label];
        }
        let value = Tensor::scalar(loss / n);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// `out[n,c,t,v] = sum_w x[n,c,t,w] * adj[w,v]`; `adj` is `[V, V]` or a
    /// per-sample `[N, V, V]`.
    pub fn graph_conv_term(&mut self, x: Var, adj: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let adj_shape = self.shape(adj).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("graph_conv_term", format!("x {xs:?} is not [N,C,T,V]")));
        }
        let (n, c, t, v) = (xs[0], xs[1], xs[2], xs[3]);
        let ok = match adj_shape.as_slice() {
            [a, b] => *a == v && *b == v,
            [bn, a, b] => *bn == n && *a == v && *b == v,
            _ => false,
        };
        if !ok {
            return Err(Error::shape(
                "graph_conv_term",
                format!("x {xs:?} with adjacency {adj_shape:?}"),
            ));
        }
        let flat = self.reshape(x, &[n, c * t, v])?;
        let mixed = self.matmul(flat, adj)?;
        self.reshape(mixed, &xs)
    }

    /// Convolution along the time axis of `x: [N, C, T, V]` with
    /// `w: [C_out, C, kernel, 1]`, independently per vertex, zero padded.
    pub fn temporal_conv(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let kernel = self.shape(w).get(2).copied().unwrap_or(0);
        self.temporal_conv_bias(x, w, None, ConvGeometry::new(kernel, stride, padding))
    }

    /// [`Graph::temporal_conv`] plus an optional per-output-channel bias `[C_out]`.
    pub fn temporal_conv_bias(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[3] != 1 || ws[1] != xs[1] || ws[2] != geom.kernel {
            return Err(Error::shape("temporal_conv", format!("x {xs:?}, w {ws:?}")));
        }
        if geom.kernel.is_multiple_of(2) {
            return Err(Error::shape("temporal_conv", format!("even kernel {}", geom.kernel)));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("temporal_conv", format!("bias {:?}", self.shape(b))));
            }
        }
        let (n, c, t, v) = (xs[0], xs[1], xs[2], xs[3]);
        let o = ws[0];
        let t_out = geom.output_len(t).ok_or_else(|| {
            Error::shape("temporal_conv", format!("no output frames for T={t}, {geom:?}"))
        })?;
        let ck = c * geom.kernel;
        let cols = t_out * v;
        let mut col = vec![F::zero(); ck * cols];
        let mut out = vec![F::zero(); n * o * cols];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for (ni, dst) in out.chunks_mut(o * cols).enumerate() {
            im2col(&xv[ni * c * t * v..], c, t, v, geom, t_out, &mut col);
            gemm(MatRef::new(wv, o, ck), MatRef::new(&col, ck, cols), dst, false);
            if let Some(b) = bias {
                for (row, &bo) in dst.chunks_mut(cols).zip(self.value(b).data()) {
                    row.iter_mut().for_each(|r| *r += bo);
                }
            }
        }
        let value = Tensor::new(&[n, o, t_out, v], out)?;
        self.push("temporal_conv", value, Op::TemporalConv { x, w, bias, geom })
    }

    /// Batch normalization over `axes`; `gamma`/`beta` carry one entry per
    /// channel formed by the remaining axes. Train mode normalizes with batch
    /// statistics and updates `state`; eval mode reads `state`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        axes: &[usize],
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<F>,
        mode: Mode,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let layout = ChannelLayout::new(&xs, axes)?;
        let channels = layout.channels();
        for (name, t) in [
            ("gamma", self.value(gamma)),
            ("beta", self.value(beta)),
            ("running mean", &state.running_mean),
            ("running var", &state.running_var),
        ] {
            if t.numel() != channels {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} has {} entries for {channels} channels of {xs:?}", t.numel()),
                ));
            }
        }
        let numel = self.value(x).numel();
        let count = numel / channels;
        let eps = F::lit(BN_EPSILON);
        let xv = self.value(x).data();
        let (mean, var) = match mode {
            Mode::Train => {
                let cnt = F::from_usize(count).unwrap_or_else(F::one);
                let mut mean = vec![F::zero(); channels];
                layout.for_each_run(|s, len, c| {
                    mean[c] += xv[s..s + len].iter().copied().sum::<F>();
                });
                mean.iter_mut().for_each(|m| *m /= cnt);
                let mut var = vec![F::zero(); channels];
                layout.for_each_run(|s, len, c| {
                    let m = mean[c];
                    var[c] += xv[s..s + len].iter().map(|&v| (v - m) * (v - m)).sum::<F>();
                });
                var.iter_mut().for_each(|s| *s /= cnt);
                let momentum = F::lit(BN_MOMENTUM);
                let unbias = if count > 1 {
                    cnt / (cnt - F::one())
                } else {
                    F::one()
                };
                for c in 0..channels {
                    let rm = &mut state.running_mean.data_mut()[c];
                    *rm = momentum * *rm + (F::one() - momentum) * mean[c];
                    let rv = &mut state.running_var.data_mut()[c];
                    *rv = momentum * *rv + (F::one() - momentum) * var[c] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (
                state.running_mean.data().to_vec(),
                state.running_var.data().to_vec(),
            ),
        };
        let inv_std: Vec<F> = var.iter().map(|&s| F::one() / (s + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![F::zero(); numel];
        layout.for_each_run(|s, len, c| {
            let (scale, m, shift) = (g[c] * inv_std[c], mean[c], b[c]);
            for (o, &v) in out[s..s + len].iter_mut().zip(&xv[s..s + len]) {
                *o = scale * (v - m) + shift;
            }
        });
        let value = Tensor::new(&xs, out)?;
        self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                mean,
                inv_std,
                train: mode == Mode::Train,
            },
        )
    }

    /// `out[..., v] = x[..., v] - x[..., parents[v]]` along the last axis.
    pub fn vertex_diff(&mut self, x: Var, parents: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let v = xs.last().copied().unwrap_or(0);
        if parents.len() != v || parents.iter().any(|&p| p >= v) {
            return Err(Error::shape(
                "vertex_diff",
                format!("{} parents for last axis of {xs:?}", parents.len()),
            ));
        }
        let mut out = self.value(x).data().to_vec();
        for (dst, src) in out.chunks_mut(v).zip(self.value(x).data().chunks(v)) {
            for (d, &p) in dst.iter_mut().zip(parents) {
                *d -= src[p];
            }
        }
        let value = Tensor::new(&xs, out)?;
        self.push(
            "vertex_diff",
            value,
            Op::VertexDiff {
                x,
                parents: parents.to_vec(),
            },
        )
    }
}

fn transpose_last<F: Real>(t: &Tensor<F>) -> Result<Tensor<F>> {
    let shape = t.shape();
    if shape.len() < 2 {
        return Err(Error::shape("transpose", format!("{shape:?}: rank < 2")));
    }
    let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut out = vec![F::zero(); t.numel()];
    for (dst, src) in out.chunks_mut(r * c).zip(t.data().chunks(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut new_shape = shape.to_vec();
    let len = new_shape.len();
    new_shape.swap(len - 2, len - 1);
    Tensor::new(&new_shape, out)
}

pub(crate) fn softmax<F: Real>(t: &Tensor<F>, axis: usize) -> Tensor<F> {
    let (outer, len, inner) = softmax_dims(t.shape(), axis);
    let x = t.data();
    let mut out = vec![F::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    Tensor::new(t.shape(), out).expect("softmax preserves shape")
}

/// Reverse rule for node `i` given its output gradient `g`.
pub(super) fn backward<F: Real>(
    nodes: &[Node<F>],
    i: usize,
    g: &Tensor<F>,
) -> Result<Vec<(Var, Tensor<F>)>> {
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].requires_grad;
    let out = &nodes[i].value;
    let mut res = Vec::new();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul {
            a,
            b,
            m,
            k,
            n,
            pairs,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let (va, vb) = (val(*a), val(*b));
            let gd = g.data();
            if needs(*a) {
                let mut ga = vec![F::zero(); va.numel()];
                for (gi, &(ia, ib)) in gd.chunks(m * n).zip(pairs) {
                    gemm(
                        MatRef::new(gi, m, n),
                        MatRef::t(&vb.data()[ib * k * n..], n, k),
                        &mut ga[ia * m * k..][..m * k],
                        true,
                    );
                }
                res.push((*a, Tensor::new(va.shape(), ga)?));
            }
            if needs(*b) {
                let mut gb = vec![F::zero(); vb.numel()];
                for (gi, &(ia, ib)) in gd.chunks(m * n).zip(pairs) {
                    gemm(
                        MatRef::t(&va.data()[ia * m * k..], k, m),
                        MatRef::new(gi, m, n),
                        &mut gb[ib * k * n..][..k * n],
                        true,
                    );
                }
                res.push((*b, Tensor::new(vb.shape(), gb)?));
            }
        }
        Op::Add { a, b } => {
            for v in [*a, *b] {
                if !needs(v) {
                    continue;
                }
                let shape = val(v).shape();
                if shape == g.shape() {
                    res.push((v, g.clone()));
                } else {
                    let mut gv = vec![F::zero(); val(v).numel()];
                    let sv = aligned_strides(shape, g.shape());
                    let zeros = vec![0; g.rank()];
                    let gd = g.data();
                    for_each_pair(g.shape(), &sv, &zeros, |i, iv, _| gv[iv] += gd[i]);
                    res.push((v, Tensor::new(shape, gv)?));
                }
            }
        }
        Op::Scale { a, s } => {
            if needs(*a) {
                res.push((*a, g.map(|v| v * *s)));
            }
        }
        Op::Relu { a } => {
            if needs(*a) {
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &o)| if o > F::zero() { gv } else { F::zero() })
                    .collect();
                res.push((*a, Tensor::new(out.shape(), data)?));
            }
        }
        Op::Reshape { a } => {
            if needs(*a) {
                res.push((*a, g.clone().reshape(val(*a).shape())?));
            }
        }
        Op::TransposeLast { a } => {
            if needs(*a) {
                res.push((*a, transpose_last(g)?));
            }
        }
        Op::Sum { a } => {
            if needs(*a) {
                res.push((*a, Tensor::full(val(*a).shape(), g.data()[0])));
            }
        }
        Op::GlobalAvgPool { a } => {
            if needs(*a) {
                let shape = val(*a).shape();
                let rest: usize = shape[2..].iter().product();
                let inv = F::one() / F::from_usize(rest).unwrap_or_else(F::one);
                let mut data = Vec::with_capacity(val(*a).numel());
                for &gv in g.data() {
                    data.extend(std::iter::repeat_n(gv * inv, rest));
                }
                res.push((*a, Tensor::new(shape, data)?));
            }
        }
        Op::Softmax { a, axis } => {
            if needs(*a) {
                let (outer, len, inner) = softmax_dims(out.shape(), *axis);
                let (y, gd) = (out.data(), g.data());
                let mut gx = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: F = (0..len).map(|j| y[at(j)] * gd[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                res.push((*a, Tensor::new(out.shape(), gx)?));
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            if needs(*logits) {
                let k = val(*logits).shape()[1];
                let scale = g.data()[0] / F::from_usize(labels.len()).unwrap_or_else(F::one);
                let mut gx: Vec<F> = probs.iter().map(|&p| p * scale).collect();
                for (row, &label) in gx.chunks_mut(k).zip(labels) {
                    row[label] -= scale;
                }
                res.push((*logits, Tensor::new(val(*logits).shape(), gx)?));
            }
        }
        Op::TemporalConv { x, w, bias, geom } => {
            let (xv, wv) = (val(*x), val(*w));
            let (n, c, t, v) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
            let o = wv.shape()[0];
            let t_out = out.shape()[2];
            let ck = c * geom.kernel;
            let cols = t_out * v;
            let gd = g.data();
            if let Some(b) = bias {
                if needs(*b) {
                    let mut gb = vec![F::zero(); o];
                    for sample in gd.chunks(o * cols) {
                        for (acc, row) in gb.iter_mut().zip(sample.chunks(cols)) {
                            *acc += row.iter().copied().sum::<F>();
                        }
                    }
                    res.push((*b, Tensor::new(&[o], gb)?));
                }
            }
            let (need_x, need_w) = (needs(*x), needs(*w));
            if need_x || need_w {
                let mut col = vec![F::zero(); ck * cols];
                let mut gcol = vec![F::zero(); ck * cols];
                let mut gw = vec![F::zero(); if need_w { wv.numel() } else { 0 }];
                let mut gx = vec![F::zero(); if need_x { xv.numel() } else { 0 }];
                for ni in 0..n {
                    let gs = &gd[ni * o * cols..][..o * cols];
                    if need_w {
                        im2col(&xv.data()[ni * c * t * v..], c, t, v, *geom, t_out, &mut col);
                        gemm(MatRef::new(gs, o, cols), MatRef::t(&col, cols, ck), &mut gw, true);
                    }
                    if need_x {
                        gemm(MatRef::t(wv.data(), ck, o), MatRef::new(gs, o, cols), &mut gcol, false);
                        col2im(&gcol, c, t, v, *geom, t_out, &mut gx[ni * c * t * v..]);
                    }
                }
                if need_w {
                    res.push((*w, Tensor::new(wv.shape(), gw)?));
                }
                if need_x {
                    res.push((*x, Tensor::new(xv.shape(), gx)?));
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            layout,
            mean,
            inv_std,
            train,
        } => {
            let channels = layout.channels();
            let xv = val(*x).data();
            let gm = val(*gamma).data();
            let gd = g.data();
            let mut sum_g = vec![F::zero(); channels];
            let mut sum_gx = vec![F::zero(); channels];
            layout.for_each_run(|s, len, c| {
                let (m, is) = (mean[c], inv_std[c]);
                let (xs, gs) = (&xv[s..s + len], &gd[s..s + len]);
                sum_g[c] += gs.iter().copied().sum::<F>();
                sum_gx[c] += xs.iter().zip(gs).map(|(&v, &gv)| gv * (v - m) * is).sum::<F>();
            });
            if needs(*x) {
                let mut gx = vec![F::zero(); xv.len()];
                if *train {
                    let count = F::from_usize(xv.len() / channels).unwrap_or_else(F::one);
                    layout.for_each_run(|s, len, c| {
                        let (m, is) = (mean[c], inv_std[c]);
                        let k = gm[c] * is / count;
                        let (sg, sgx) = (sum_g[c], sum_gx[c]);
                        let (xs, gs) = (&xv[s..s + len], &gd[s..s + len]);
                        for ((o, &v), &gv) in gx[s..s + len].iter_mut().zip(xs).zip(gs) {
                            *o = k * (count * gv - sg - (v - m) * is * sgx);
                        }
                    });
                } else {
                    layout.for_each_run(|s, len, c| {
                        let k = gm[c] * inv_std[c];
                        for (o, &gv) in gx[s..s + len].iter_mut().zip(&gd[s..s + len]) {
                            *o = gv * k;
                        }
                    });
                }
                res.push((*x, Tensor::new(val(*x).shape(), gx)?));
            }
            if needs(*gamma) {
                res.push((*gamma, Tensor::new(val(*gamma).shape(), sum_gx)?));
            }
            if needs(*beta) {
                res.push((*beta, Tensor::new(val(*beta).shape(), sum_g)?));
            }
        }
        Op::VertexDiff { x, parents } => {
            if needs(*x) {
                let v = parents.len();
                let mut gx = g.data().to_vec();
                for (dst, src) in gx.chunks_mut(v).zip(g.data().chunks(v)) {
                    for (vi, &p) in parents.iter().enumerate() {
                        dst[p] -= src[vi];
                    }
                }
                res.push((*x, Tensor::new(g.shape(), gx)?));
            }
        }
    }
    Ok(res)
}
