//! Raw forward/backward kernels over row-major slices.
//!
//! Every reduction accumulates in ascending index order, so results are
//! reproducible bit-for-bit and match straightforward loop oracles.

/// `out[m×n] += a[m×k] · b[k×n]`.
///
/// Four rows of `b` are folded per pass over an output row; each output
/// element still accumulates its products in ascending `p`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    for (row, arow) in out.chunks_exact_mut(n).zip(a.chunks_exact(k.max(1))).take(m) {
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for ((((o, &x0), &x1), &x2), &x3) in row.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
                *o = (((*o + a0 * x0) + a1 * x1) + a2 * x2) + a3 * x3;
            }
            p += 4;
        }
        for (pp, &av) in arow.iter().enumerate().skip(p) {
            for (o, &bv) in row.iter_mut().zip(&b[pp * n..(pp + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// Transpose of an `r×c` matrix.
pub(crate) fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    const B: usize = 16;
    for i0 in (0..r).step_by(B) {
        for j0 in (0..c).step_by(B) {
            for i in i0..(i0 + B).min(r) {
                for j in j0..(j0 + B).min(c) {
                    out[j * r + i] = a[i * c + j];
                }
            }
        }
    }
    out
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Geometry of a 2-D convolution over an `h×w×cin` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }
}

/// Lower the input into a `(oh·ow)×(k·k·cin)` patch matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let pk = g.patch();
    let mut cols = vec![0.0; g.oh * g.ow * pk];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let base = (oy * g.ow + ox) * pk;
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = base + (ky * g.k + kx) * g.cin;
                    cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let pk = g.patch();
    let mut x = vec![0.0; g.h * g.w * g.cin];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let base = (oy * g.ow + ox) * pk;
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = base + (ky * g.k + kx) * g.cin;
                    for c in 0..g.cin {
                        x[dst + c] += cols[src + c];
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut out = vec![0.0; p * g.cout];
    if g.k == 1 && g.stride == 1 && g.pad == 0 {
        matmul_acc(x, w, p, g.cin, g.cout, &mut out);
    } else {
        let cols = im2col(x, g);
        matmul_acc(&cols, w, p, g.patch(), g.cout, &mut out);
    }
    for row in out.chunks_mut(g.cout) {
        for (o, &bv) in row.iter_mut().zip(b) {
            *o += bv;
        }
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`.
pub(crate) fn conv2d_backward(x: &[f64], w: &[f64], dy: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = g.oh * g.ow;
    let pk = g.patch();
    let pointwise = g.k == 1 && g.stride == 1 && g.pad == 0;
    let cols_owned;
    let cols: &[f64] = if pointwise {
        x
    } else {
        cols_owned = im2col(x, g);
        &cols_owned
    };

    let mut dw = vec![0.0; pk * g.cout];
    matmul_acc(&transpose(cols, p, pk), dy, pk, p, g.cout, &mut dw);

    let mut db = vec![0.0; g.cout];
    for row in dy.chunks(g.cout) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }

    let mut dcols = vec![0.0; p * pk];
    matmul_acc(dy, &transpose(w, pk, g.cout), p, g.cout, pk, &mut dcols);
    let dx = if pointwise { dcols } else { col2im(&dcols, g) };
    (dx, dw, db)
}

/// 3×3 depthwise convolution, same padding, stride 1. Weight layout `3×3×c`.
pub(crate) fn depthwise_forward(x: &[f64], w: &[f64], b: &[f64], h: usize, wd: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * wd * c];
    for y in 0..h {
        for xx in 0..wd {
            let o = (y * wd + xx) * c;
            let acc = &mut out[o..o + c];
            for ky in 0..3 {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = xx as isize + kx as isize - 1;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let src = (iy as usize * wd + ix as usize) * c;
                    let wk = (ky * 3 + kx) * c;
                    for ch in 0..c {
                        acc[ch] += x[src + ch] * w[wk + ch];
                    }
                }
            }
            for ch in 0..c {
                acc[ch] += b[ch];
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    h: usize,
    wd: usize,
    c: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; c];
    for y in 0..h {
        for xx in 0..wd {
            let o = (y * wd + xx) * c;
            let g = &dy[o..o + c];
            for ch in 0..c {
                db[ch] += g[ch];
            }
            for ky in 0..3 {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = xx as isize + kx as isize - 1;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let src = (iy as usize * wd + ix as usize) * c;
                    let wk = (ky * 3 + kx) * c;
                    for ch in 0..c {
                        dx[src + ch] += g[ch] * w[wk + ch];
                        dw[wk + ch] += g[ch] * x[src + ch];
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Softmax over the middle axis of an `outer×len×inner` view.
pub(crate) fn softmax_forward(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if inner == 1 && len > 0 {
        for (orow, xrow) in out.chunks_exact_mut(len).zip(x.chunks_exact(len)) {
            let m = xrow.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut s = 0.0;
            for (o, &v) in orow.iter_mut().zip(xrow) {
                *o = (v - m).exp();
                s += *o;
            }
            for o in orow.iter_mut() {
                *o /= s;
            }
        }
        return out;
    }
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let mut m = f64::NEG_INFINITY;
            for a in 0..len {
                m = m.max(x[idx(a)]);
            }
            let mut s = 0.0;
            for a in 0..len {
                let e = (x[idx(a)] - m).exp();
                out[idx(a)] = e;
                s += e;
            }
            for a in 0..len {
                out[idx(a)] /= s;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward(y: &[f64], dy: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    if inner == 1 && len > 0 {
        for ((d, yr), gr) in dx
            .chunks_exact_mut(len)
            .zip(y.chunks_exact(len))
            .zip(dy.chunks_exact(len))
        {
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for ((d, &a), &g) in d.iter_mut().zip(yr).zip(gr) {
                *d = a * (g - dot);
            }
        }
        return dx;
    }
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let mut dot = 0.0;
            for a in 0..len {
                dot += y[idx(a)] * dy[idx(a)];
            }
            for a in 0..len {
                dx[idx(a)] = y[idx(a)] * (dy[idx(a)] - dot);
            }
        }
    }
    dx
}

/// Normalization statistics for groups of `len` values spaced `stride` apart.
pub(crate) struct NormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Layer norm over the trailing axis of `rows×c`.
pub(crate) fn layer_norm_forward(x: &[f64], gamma: &[f64], beta: &[f64], c: usize, eps: f64) -> (Vec<f64>, NormStats) {
    let rows = x.len() / c;
    let mut out = vec![0.0; x.len()];
    let mut mean = vec![0.0; rows];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * c..(r + 1) * c];
        let m = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + eps).sqrt();
        mean[r] = m;
        rstd[r] = rs;
        for j in 0..c {
            out[r * c + j] = (xr[j] - m) * rs * gamma[j] + beta[j];
        }
    }
    (out, NormStats { mean, rstd })
}

pub(crate) fn layer_norm_backward(
    x: &[f64],
    gamma: &[f64],
    stats: &NormStats,
    dy: &[f64],
    c: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / c;
    let mut dx = vec![0.0; x.len()];
    let mut dg = vec![0.0; c];
    let mut db = vec![0.0; c];
    let n = c as f64;
    for r in 0..rows {
        let (m, rs) = (stats.mean[r], stats.rstd[r]);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for j in 0..c {
            let xhat = (x[r * c + j] - m) * rs;
            let g = dy[r * c + j];
            dg[j] += g * xhat;
            db[j] += g;
            let gh = g * gamma[j];
            sum_g += gh;
            sum_gx += gh * xhat;
        }
        for j in 0..c {
            let xhat = (x[r * c + j] - m) * rs;
            let gh = dy[r * c + j] * gamma[j];
            dx[r * c + j] = rs * (gh - sum_g / n - xhat * sum_gx / n);
        }
    }
    (dx, dg, db)
}

/// Per-channel normalization over all spatial positions of a `positions×c` map.
pub(crate) fn channel_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    c: usize,
    eps: f64,
) -> (Vec<f64>, NormStats) {
    let p = x.len() / c;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for row in x.chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= p as f64;
    }
    for row in x.chunks(c) {
        for j in 0..c {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v / p as f64 + eps).sqrt()).collect();
    let mut out = vec![0.0; x.len()];
    for (orow, row) in out.chunks_mut(c).zip(x.chunks(c)) {
        for j in 0..c {
            orow[j] = (row[j] - mean[j]) * rstd[j] * gamma[j] + beta[j];
        }
    }
    (out, NormStats { mean, rstd })
}

pub(crate) fn channel_norm_backward(
    x: &[f64],
    gamma: &[f64],
    stats: &NormStats,
    dy: &[f64],
    c: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = x.len() / c;
    let n = p as f64;
    let mut dg = vec![0.0; c];
    let mut db = vec![0.0; c];
    for (row, grow) in x.chunks(c).zip(dy.chunks(c)) {
        for j in 0..c {
            let xhat = (row[j] - stats.mean[j]) * stats.rstd[j];
            dg[j] += grow[j] * xhat;
            db[j] += grow[j];
        }
    }
    let mut dx = vec![0.0; x.len()];
    for ((drow, row), grow) in dx.chunks_mut(c).zip(x.chunks(c)).zip(dy.chunks(c)) {
        for j in 0..c {
            let xhat = (row[j] - stats.mean[j]) * stats.rstd[j];
            // sum(gh) = gamma·db, sum(gh·xhat) = gamma·dg
            drow[j] = gamma[j] * stats.rstd[j] * (grow[j] - db[j] / n - xhat * dg[j] / n);
        }
    }
    (dx, dg, db)
}

/// One axis of a bilinear resize (align-corners-false, edge-clamped).
#[derive(Clone, Debug)]
pub(crate) struct LerpAxis {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl LerpAxis {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for d in 0..dst {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let l = (s.floor() as usize).min(src - 1);
            lo.push(l);
            hi.push((l + 1).min(src - 1));
            frac.push(s - l as f64);
        }
        LerpAxis { lo, hi, frac }
    }
}

pub(crate) fn bilinear_forward(x: &[f64], w: usize, c: usize, ys: &LerpAxis, xs: &LerpAxis) -> Vec<f64> {
    let (oh, ow) = (ys.lo.len(), xs.lo.len());
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        let (y0, y1, fy) = (ys.lo[oy], ys.hi[oy], ys.frac[oy]);
        for ox in 0..ow {
            let (x0, x1, fx) = (xs.lo[ox], xs.hi[ox], xs.frac[ox]);
            let o = (oy * ow + ox) * c;
            let p00 = (y0 * w + x0) * c;
            let p01 = (y0 * w + x1) * c;
            let p10 = (y1 * w + x0) * c;
            let p11 = (y1 * w + x1) * c;
            for ch in 0..c {
                let top = x[p00 + ch] * (1.0 - fx) + x[p01 + ch] * fx;
                let bot = x[p10 + ch] * (1.0 - fx) + x[p11 + ch] * fx;
                out[o + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(dy: &[f64], h: usize, w: usize, c: usize, ys: &LerpAxis, xs: &LerpAxis) -> Vec<f64> {
    let (oh, ow) = (ys.lo.len(), xs.lo.len());
    let mut dx = vec![0.0; h * w * c];
    for oy in 0..oh {
        let (y0, y1, fy) = (ys.lo[oy], ys.hi[oy], ys.frac[oy]);
        for ox in 0..ow {
            let (x0, x1, fx) = (xs.lo[ox], xs.hi[ox], xs.frac[ox]);
            let o = (oy * ow + ox) * c;
            let taps = [
                ((y0 * w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                ((y0 * w + x1) * c, (1.0 - fy) * fx),
                ((y1 * w + x0) * c, fy * (1.0 - fx)),
                ((y1 * w + x1) * c, fy * fx),
            ];
            for (p, wt) in taps {
                for ch in 0..c {
                    dx[p + ch] += dy[o + ch] * wt;
                }
            }
        }
    }
    dx
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output element, the flat source offset under a strided view.
///
/// `src_strides` are the source strides as seen from output axes (zero for
/// broadcast axes).
pub(crate) fn gather_offsets(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let mut offs = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offs.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offs
}

/// Broadcast result shape and per-operand strides (zero on broadcast axes).
pub(crate) fn broadcast_plan(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if a.len() != b.len() {
        return None;
    }
    let (sa, sb) = (strides(a), strides(b));
    let mut out = Vec::with_capacity(a.len());
    let mut ta = Vec::with_capacity(a.len());
    let mut tb = Vec::with_capacity(a.len());
    for i in 0..a.len() {
        let d = match (a[i], b[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
        out.push(d);
        ta.push(if a[i] == 1 && d != 1 { 0 } else { sa[i] });
        tb.push(if b[i] == 1 && d != 1 { 0 } else { sb[i] });
    }
    Some((out, ta, tb))
}
