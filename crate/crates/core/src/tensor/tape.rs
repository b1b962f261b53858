use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom, LerpAxis, NormStats};
use super::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-6;
const CHANNEL_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Padding rule for [`Tape::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Symmetric `k/2` padding; output is `ceil(h/stride)`.
    Same,
    Valid,
}

/// Recorded operation and whatever the backward pass needs from the forward.
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Var,
    },
    Gelu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        stats: NormStats,
    },
    ChannelNorm {
        x: Var,
        g: Var,
        b: Var,
        stats: NormStats,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    IndexSelect {
        x: Var,
        indices: Vec<usize>,
    },
    Upsample {
        x: Var,
        ys: LerpAxis,
        xs: LerpAxis,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
}

impl std::fmt::Debug for Op {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise_conv3x3",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ChannelNorm { .. } => "channel_norm",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Sum(_) => "sum",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::IndexSelect { .. } => "index_select",
            Op::Upsample { .. } => "bilinear_upsample",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every leaf that required them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Append-only record of a forward computation.
///
/// One call to [`Tape::backward`] produces gradients for every leaf created
/// with [`Tape::leaf`]. Multiply-accumulate counts are tallied as ops are
/// recorded, optionally under a tag (see [`Tape::with_tag`]).
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
    tagged: BTreeMap<String, u64>,
    tag: Option<String>,
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

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Total multiply-accumulates recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn tagged_macs(&self, tag: &str) -> u64 {
        self.tagged.get(tag).copied().unwrap_or(0)
    }

    /// Run `f` with every MAC it records also attributed to `tag`.
    pub fn with_tag<T>(&mut self, tag: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let prev = self.tag.replace(tag.to_string());
        let out = f(self);
        self.tag = prev;
        out
    }

    fn count(&mut self, macs: usize) {
        let macs = macs as u64;
        self.macs += macs;
        if let Some(tag) = &self.tag {
            *self.tagged.entry(tag.clone()).or_insert(0) += macs;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor::from_parts(ta.shape().to_vec(), data));
        }
        let (out, sa, sb) = kernels::broadcast_plan(ta.shape(), tb.shape())
            .ok_or_else(|| Error::shape(name, ta.shape(), tb.shape()))?;
        let oa = kernels::gather_offsets(&out, &sa);
        let ob = kernels::gather_offsets(&out, &sb);
        let data = oa
            .iter()
            .zip(&ob)
            .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
            .collect();
        Ok(Tensor::from_parts(out, data))
    }

    /// Element-wise sum with broadcasting over size-1 axes (equal ranks).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.record(t, Op::Add(a, b), &[a, b]))
    }

    /// Element-wise product with broadcasting over size-1 axes (equal ranks).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.record(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        self.record(t, Op::Scale(a, s), &[a])
    }

    fn matmul_dims(&self, a: Var, b: Var, trans_b: bool) -> Result<(usize, usize, usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let err = || Error::shape("matmul", sa, sb);
        let (batch, m, k) = match sa[..] {
            [m, k] => (1, m, k),
            [bt, m, k] => (bt, m, k),
            _ => return Err(err()),
        };
        let (bb, r, c) = match sb[..] {
            [r, c] if sa.len() == 2 => (1, r, c),
            [bt, r, c] if sa.len() == 3 => (bt, r, c),
            _ => return Err(err()),
        };
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if bb != batch || kb != k {
            return Err(err());
        }
        Ok((batch, m, k, n))
    }

    /// Batched matrix product `a·b` (rank 2, or rank 3 with a shared batch axis).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a·bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (batch, m, k, n) = self.matmul_dims(a, b, trans_b)?;
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let bs = &tb[i * k * n..(i + 1) * k * n];
            let bt;
            let bm = if trans_b {
                bt = kernels::transpose(bs, n, k);
                &bt[..]
            } else {
                bs
            };
            kernels::matmul_acc(
                &ta[i * m * k..(i + 1) * m * k],
                bm,
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let shape = if self.shape(a).len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        self.count(batch * m * k * n);
        Ok(self.record(Tensor::from_parts(shape, out), Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// Affine map over the trailing axis: `x·w + b`, with `w` shaped `c_in×c_out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(Error::shape("linear", sx, sw));
        }
        let (cin, cout) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("linear bias", self.shape(b), &[cout]));
            }
        }
        let rows = self.value(x).len() / cin;
        let mut out = vec![0.0; rows * cout];
        kernels::matmul_acc(self.value(x).data(), self.value(w).data(), rows, cin, cout, &mut out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(cout) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = cout;
        self.count(rows * cin * cout);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.record(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, &inputs))
    }

    /// 2-D convolution of an `h×w×c_in` map with a `k×k×c_in×c_out` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (h, wd, cin) = self.value(x).hwc("conv2d")?;
        let sw = self.shape(w).to_vec();
        let [k, k2, wcin, cout] = sw[..] else {
            return Err(Error::shape("conv2d weight", &sw, &[0, 0, cin, 0]));
        };
        if wcin != cin {
            return Err(Error::shape("conv2d", self.shape(x), &sw));
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel must be odd and square, got {sw:?}"
            )));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::InvalidArgument(format!(
                "conv2d stride must be 1 or 2, got {stride}"
            )));
        }
        if self.shape(b) != [cout] {
            return Err(Error::shape("conv2d bias", self.shape(b), &[cout]));
        }
        let (pad, oh, ow) = match padding {
            Padding::Same => (k / 2, h.div_ceil(stride), wd.div_ceil(stride)),
            Padding::Valid => {
                if h < k || wd < k {
                    return Err(Error::InvalidArgument(format!(
                        "valid conv2d needs input ≥ {k}, got {h}×{wd}"
                    )));
                }
                (0, (h - k) / stride + 1, (wd - k) / stride + 1)
            }
        };
        let geom = ConvGeom {
            h,
            w: wd,
            cin,
            cout,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &geom);
        self.count(oh * ow * k * k * cin * cout);
        Ok(self.record(
            Tensor::from_parts(vec![oh, ow, cout], out),
            Op::Conv2d { x, w, b, geom },
            &[x, w, b],
        ))
    }

    /// 3×3 depthwise convolution, same padding, stride 1, weight `3×3×c`.
    pub fn depthwise3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (h, wd, c) = self.value(x).hwc("depthwise_conv3x3")?;
        if self.shape(w) != [3, 3, c] {
            return Err(Error::shape("depthwise_conv3x3", self.shape(x), self.shape(w)));
        }
        if self.shape(b) != [c] {
            return Err(Error::shape("depthwise_conv3x3 bias", self.shape(b), &[c]));
        }
        let out = kernels::depthwise_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            h,
            wd,
            c,
        );
        self.count(9 * h * wd * c);
        Ok(self.record(
            Tensor::from_parts(vec![h, wd, c], out),
            Op::Depthwise { x, w, b },
            &[x, w, b],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::gelu);
        self.record(t, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::sigmoid);
        self.record(t, Op::Sigmoid(x), &[x])
    }

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::InvalidArgument(format!(
                "{op}: axis {axis} out of range for {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let (o, l, i) = Self::axis_split(self.shape(x), axis);
        let out = kernels::softmax_forward(self.value(x).data(), o, l, i);
        let shape = self.shape(x).to_vec();
        Ok(self.record(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, &[x]))
    }

    /// Layer normalization over the trailing axis with affine `g`, `b`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(g) != [c] || self.shape(b) != [c] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(g)));
        }
        let (out, stats) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(g).data(),
            self.value(b).data(),
            c,
            LAYER_NORM_EPS,
        );
        let shape = self.shape(x).to_vec();
        Ok(self.record(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, g, b, stats },
            &[x, g, b],
        ))
    }

    /// Per-channel normalization over all spatial positions, with affine `g`, `b`.
    pub fn channel_norm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(g) != [c] || self.shape(b) != [c] {
            return Err(Error::shape("channel_norm", self.shape(x), self.shape(g)));
        }
        let (out, stats) = kernels::channel_norm_forward(
            self.value(x).data(),
            self.value(g).data(),
            self.value(b).data(),
            c,
            CHANNEL_NORM_EPS,
        );
        let shape = self.shape(x).to_vec();
        Ok(self.record(
            Tensor::from_parts(shape, out),
            Op::ChannelNorm { x, g, b, stats },
            &[x, g, b],
        ))
    }

    /// Mean along `axis`, keeping it as a size-1 axis.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "mean_axis")?;
        let (o, l, i) = Self::axis_split(self.shape(x), axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; o * i];
        for a in 0..o {
            for r in 0..l {
                let base = (a * l + r) * i;
                for j in 0..i {
                    out[a * i + j] += src[base + j];
                }
            }
        }
        for v in &mut out {
            *v /= l as f64;
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = 1;
        Ok(self.record(Tensor::from_parts(shape, out), Op::MeanAxis { x, axis }, &[x]))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.record(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        self.check_axis(*first, axis, "concat")?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let l = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.record(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis, "narrow")?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "narrow [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (o, l, i) = Self::axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(o * len * i);
        for a in 0..o {
            out.extend_from_slice(&src[(a * l + start) * i..(a * l + start + len) * i]);
        }
        let mut s = shape;
        s[axis] = len;
        Ok(self.record(Tensor::from_parts(s, out), Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.record(t, Op::Reshape(x), &[x]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::InvalidArgument(format!(
                "invalid permutation {perm:?} for {shape:?}"
            )));
        }
        let (out_shape, offs) = permute_offsets(&shape, perm);
        let src = self.value(x).data();
        let out = offs.iter().map(|&o| src[o]).collect();
        Ok(self.record(
            Tensor::from_parts(out_shape, out),
            Op::Permute { x, perm: perm.to_vec() },
            &[x],
        ))
    }

    /// Select (and possibly repeat) entries of the leading axis.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        if indices.is_empty() {
            return Err(Error::InvalidArgument("index_select with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "index {bad} out of range for leading axis of {shape:?}"
            )));
        }
        let row = self.value(x).len() / rows;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut s = shape;
        s[0] = indices.len();
        Ok(self.record(
            Tensor::from_parts(s, out),
            Op::IndexSelect {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    /// Bilinear resize of an `h×w×c` map to `out_h×out_w` (align-corners false).
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc("bilinear_upsample")?;
        if out_h < h || out_w < w {
            return Err(Error::InvalidArgument(format!(
                "bilinear_upsample target {out_h}×{out_w} smaller than input {h}×{w}"
            )));
        }
        let ys = LerpAxis::new(h, out_h);
        let xs = LerpAxis::new(w, out_w);
        let out = kernels::bilinear_forward(self.value(x).data(), w, c, &ys, &xs);
        Ok(self.record(
            Tensor::from_parts(vec![out_h, out_w, c], out),
            Op::Upsample { x, ys, xs },
            &[x],
        ))
    }

    /// Mean negative log-likelihood over rows whose label is not `ignore`.
    ///
    /// `logits` is `…×K`; `labels` has one entry per leading position.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i64], ignore: i64) -> Result<Var> {
        let k = *self.shape(logits).last().unwrap();
        let rows = self.value(logits).len() / k;
        if labels.len() != rows {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        let mut mapped = Vec::with_capacity(rows);
        for &l in labels {
            if l == ignore {
                mapped.push(None);
            } else if l >= 0 && (l as usize) < k {
                mapped.push(Some(l as usize));
            } else {
                return Err(Error::InvalidArgument(format!(
                    "label {l} outside [0, {k}) and not the ignore value {ignore}"
                )));
            }
        }
        let count = mapped.iter().filter(|l| l.is_some()).count();
        if count == 0 {
            return Err(Error::InvalidArgument(
                "cross_entropy: every pixel carries the ignore label".into(),
            ));
        }
        let probs = kernels::softmax_forward(self.value(logits).data(), rows, k, 1);
        let x = self.value(logits).data();
        let mut total = 0.0;
        for (r, l) in mapped.iter().enumerate() {
            if let Some(l) = *l {
                let row = &x[r * k..(r + 1) * k];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - row[l];
            }
        }
        let loss = total / count as f64;
        Ok(self.record(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: mapped,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (v, dv) in self.input_grads(i, &g) {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&dv),
                    slot @ None => *slot = Some(dv),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn broadcast_grad(&self, target: Var, other: Option<Var>, out_shape: &[usize], g: &[f64]) -> Tensor {
        let ts = self.shape(target);
        if ts == out_shape && other.is_none_or(|o| self.shape(o) == out_shape) {
            let data = match other {
                None => g.to_vec(),
                Some(o) => g.iter().zip(self.value(o).data()).map(|(a, b)| a * b).collect(),
            };
            return Tensor::from_parts(ts.to_vec(), data);
        }
        let target_strides = broadcast_strides(ts, out_shape);
        let offs = kernels::gather_offsets(out_shape, &target_strides);
        let mut d = vec![0.0; self.value(target).len()];
        match other {
            None => {
                for (e, &o) in offs.iter().enumerate() {
                    d[o] += g[e];
                }
            }
            Some(ov) => {
                let os = broadcast_strides(self.shape(ov), out_shape);
                let ooffs = kernels::gather_offsets(out_shape, &os);
                let od = self.value(ov).data();
                for (e, &o) in offs.iter().enumerate() {
                    d[o] += g[e] * od[ooffs[e]];
                }
            }
        }
        Tensor::from_parts(ts.to_vec(), d)
    }

    fn input_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let gd = g.data();
        let like = |v: Var, data: Vec<f64>| Tensor::from_parts(self.shape(v).to_vec(), data);
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, self.broadcast_grad(*a, None, out_shape, gd)),
                (*b, self.broadcast_grad(*b, None, out_shape, gd)),
            ],
            Op::Mul(a, b) => vec![
                (*a, self.broadcast_grad(*a, Some(*b), out_shape, gd)),
                (*b, self.broadcast_grad(*b, Some(*a), out_shape, gd)),
            ],
            Op::Scale(a, s) => vec![(*a, g.map(|v| v * s))],
            Op::MatMul { a, b, trans_b } => {
                let (batch, m, k, n) = self.matmul_dims(*a, *b, *trans_b).expect("validated in forward");
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; batch * m * k];
                let mut db = vec![0.0; batch * k * n];
                for bi in 0..batch {
                    let gs = &gd[bi * m * n..(bi + 1) * m * n];
                    let asl = &ad[bi * m * k..(bi + 1) * m * k];
                    let bsl = &bd[bi * k * n..(bi + 1) * k * n];
                    let das = &mut da[bi * m * k..(bi + 1) * m * k];
                    let dbs = &mut db[bi * k * n..(bi + 1) * k * n];
                    if *trans_b {
                        // b is n×k
                        kernels::matmul_acc(gs, bsl, m, n, k, das);
                        kernels::matmul_acc(&kernels::transpose(gs, m, n), asl, n, m, k, dbs);
                    } else {
                        kernels::matmul_acc(gs, &kernels::transpose(bsl, k, n), m, n, k, das);
                        kernels::matmul_acc(&kernels::transpose(asl, m, k), gs, k, m, n, dbs);
                    }
                }
                vec![(*a, like(*a, da)), (*b, like(*b, db))]
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (cin, cout) = (sw[0], sw[1]);
                let xd = self.value(*x).data();
                let rows = xd.len() / cin;
                let mut out = Vec::with_capacity(3);
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0; rows * cin];
                    kernels::matmul_acc(
                        gd,
                        &kernels::transpose(self.value(*w).data(), cin, cout),
                        rows,
                        cout,
                        cin,
                        &mut dx,
                    );
                    out.push((*x, like(*x, dx)));
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![0.0; cin * cout];
                    kernels::matmul_acc(&kernels::transpose(xd, rows, cin), gd, cin, rows, cout, &mut dw);
                    out.push((*w, like(*w, dw)));
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; cout];
                    for row in gd.chunks(cout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    out.push((*b, like(*b, db)));
                }
                out
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(self.value(*x).data(), self.value(*w).data(), gd, geom);
                vec![(*x, like(*x, dx)), (*w, like(*w, dw)), (*b, like(*b, db))]
            }
            Op::Depthwise { x, w, b } => {
                let s = self.shape(*x);
                let (dx, dw, db) =
                    kernels::depthwise_backward(self.value(*x).data(), self.value(*w).data(), gd, s[0], s[1], s[2]);
                vec![(*x, like(*x, dx)), (*w, like(*w, dw)), (*b, like(*b, db))]
            }
            Op::Gelu(x) => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| gv * kernels::gelu_grad(v))
                    .collect();
                vec![(*x, like(*x, d))]
            }
            Op::Sigmoid(x) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&y, &gv)| gv * y * (1.0 - y))
                    .collect();
                vec![(*x, like(*x, d))]
            }
            Op::Softmax { x, axis } => {
                let (o, l, inner) = Self::axis_split(out_shape, *axis);
                vec![(
                    *x,
                    like(*x, kernels::softmax_backward(node.value.data(), gd, o, l, inner)),
                )]
            }
            Op::LayerNorm { x, g: gm, b, stats } => {
                let c = *out_shape.last().unwrap();
                let (dx, dg, db) =
                    kernels::layer_norm_backward(self.value(*x).data(), self.value(*gm).data(), stats, gd, c);
                vec![(*x, like(*x, dx)), (*gm, like(*gm, dg)), (*b, like(*b, db))]
            }
            Op::ChannelNorm { x, g: gm, b, stats } => {
                let c = *out_shape.last().unwrap();
                let (dx, dg, db) =
                    kernels::channel_norm_backward(self.value(*x).data(), self.value(*gm).data(), stats, gd, c);
                vec![(*x, like(*x, dx)), (*gm, like(*gm, dg)), (*b, like(*b, db))]
            }
            Op::MeanAxis { x, axis } => {
                let (o, l, inner) = Self::axis_split(self.shape(*x), *axis);
                let mut d = vec![0.0; o * l * inner];
                for a in 0..o {
                    for r in 0..l {
                        for j in 0..inner {
                            d[(a * l + r) * inner + j] = gd[a * inner + j] / l as f64;
                        }
                    }
                }
                vec![(*x, like(*x, d))]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(self.shape(*x), gd[0]))],
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = Self::axis_split(out_shape, *axis);
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let l = self.shape(p)[*axis];
                    let mut d = Vec::with_capacity(outer * l * inner);
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[s..s + l * inner]);
                    }
                    offset += l;
                    res.push((p, like(p, d)));
                }
                res
            }
            Op::Narrow { x, axis, start } => {
                let (o, l, inner) = Self::axis_split(self.shape(*x), *axis);
                let len = out_shape[*axis];
                let mut d = vec![0.0; o * l * inner];
                for a in 0..o {
                    let dst = (a * l + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gd[a * len * inner..(a + 1) * len * inner]);
                }
                vec![(*x, like(*x, d))]
            }
            Op::Reshape(x) => vec![(*x, like(*x, gd.to_vec()))],
            Op::Permute { x, perm } => {
                let (_, offs) = permute_offsets(self.shape(*x), perm);
                let mut d = vec![0.0; gd.len()];
                for (e, &o) in offs.iter().enumerate() {
                    d[o] = gd[e];
                }
                vec![(*x, like(*x, d))]
            }
            Op::IndexSelect { x, indices } => {
                let row = self.value(*x).len() / self.shape(*x)[0];
                let mut d = vec![0.0; self.value(*x).len()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..row {
                        d[i * row + j] += gd[r * row + j];
                    }
                }
                vec![(*x, like(*x, d))]
            }
            Op::Upsample { x, ys, xs } => {
                let s = self.shape(*x);
                vec![(*x, like(*x, kernels::bilinear_backward(gd, s[0], s[1], s[2], ys, xs)))]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => {
                let k = *self.shape(*logits).last().unwrap();
                let scale = gd[0] / *count as f64;
                let mut d = vec![0.0; probs.len()];
                for (r, l) in labels.iter().enumerate() {
                    if let Some(l) = *l {
                        for j in 0..k {
                            d[r * k + j] = probs[r * k + j] * scale;
                        }
                        d[r * k + l] -= scale;
                    }
                }
                vec![(*logits, like(*logits, d))]
            }
        }
    }
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = kernels::strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(s)
        .map(|((&d, &o), st)| if d == 1 && o != 1 { 0 } else { st })
        .collect()
}

fn permute_offsets(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let st = kernels::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
    let offs = kernels::gather_offsets(&out_shape, &src);
    (out_shape, offs)
}
