//! Cross-modal feature interaction and fusion.
//!
//! Each modality's tokens are split into an `s×s` grid of regions. Region
//! mean queries and keys give a coarse `s²×s²` adjacency from which every
//! region keeps its `k` best partners. Token-level attention then runs per
//! region over the gathered keys of its own modality, but reads values from
//! the other modality (gathered with the same index). The two outputs are
//! concatenated and fused by a depthwise feed-forward network.

use crate::blocks::{attention_with_weights, DwFfn};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Linear, ParamStore};
use crate::tensor::{top_k_rows, IndexMatrix, Tape, Tensor, Var};

/// Per-region top-k partner indices, `s²×k`.
pub type RegionIndex = IndexMatrix;

/// Default region grid side.
pub const DEFAULT_REGIONS: usize = 2;

/// Default routing width for a grid side `s`.
pub fn default_topk(s: usize) -> usize {
    (s * s).min(4)
}

fn check_grid(op: &str, h: usize, w: usize, s: usize) -> Result<()> {
    if s == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
        return Err(Error::Divisibility(format!(
            "{op}: feature map {h}×{w} is not divisible into a {s}×{s} region grid"
        )));
    }
    Ok(())
}

/// `h×w×c → s²×(hw/s²)×c`, regions and tokens both row-major.
pub fn partition_var(tape: &mut Tape, f: Var, s: usize) -> Result<Var> {
    let (h, w, c) = tape.value(f).hwc("partition_regions")?;
    check_grid("partition_regions", h, w, s)?;
    let (ph, pw) = (h / s, w / s);
    let x = tape.reshape(f, &[s, ph, s, pw, c])?;
    let x = tape.permute(x, &[0, 2, 1, 3, 4])?;
    tape.reshape(x, &[s * s, ph * pw, c])
}

/// Inverse of [`partition_var`].
pub fn departition_var(tape: &mut Tape, r: Var, h: usize, w: usize, s: usize) -> Result<Var> {
    check_grid("departition_regions", h, w, s)?;
    let (ph, pw) = (h / s, w / s);
    let shape = tape.shape(r).to_vec();
    if shape.len() != 3 || shape[0] != s * s || shape[1] != ph * pw {
        return Err(Error::shape("departition_regions", &shape, &[s * s, ph * pw, 0]));
    }
    let c = shape[2];
    let x = tape.reshape(r, &[s, s, ph, pw, c])?;
    let x = tape.permute(x, &[0, 2, 1, 3, 4])?;
    tape.reshape(x, &[h, w, c])
}

pub fn partition_regions(f: &Tensor, s: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(f.clone());
    let r = partition_var(&mut tape, v, s)?;
    Ok(tape.value(r).clone())
}

pub fn departition_regions(r: &Tensor, h: usize, w: usize, s: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(r.clone());
    let f = departition_var(&mut tape, v, h, w, s)?;
    Ok(tape.value(f).clone())
}

fn region_means(t: &Tensor) -> Result<Tensor> {
    let [n, m, c] = t.shape()[..] else {
        return Err(Error::InvalidArgument(format!(
            "expected s²×m×c regions, got {:?}",
            t.shape()
        )));
    };
    let mut out = vec![0.0; n * c];
    for r in 0..n {
        for i in 0..m {
            for j in 0..c {
                out[r * c + j] += t.data()[(r * m + i) * c + j];
            }
        }
    }
    let inv = 1.0 / m as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(&[n, c], out)
}

/// Region-to-region adjacency `Qʳ·Kʳᵀ` of the per-region mean query and key.
pub fn region_adjacency(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    if q.shape() != k.shape() {
        return Err(Error::shape("region_adjacency", q.shape(), k.shape()));
    }
    let (qr, kr) = (region_means(q)?, region_means(k)?);
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(qr), tape.constant(kr));
    let adj = tape.matmul_nt(a, b)?;
    Ok(tape.value(adj).clone())
}

pub fn route_regions(q: &Tensor, k: &Tensor, topk: usize) -> Result<RegionIndex> {
    top_k_rows(&region_adjacency(q, k)?, topk)
}

fn gather_indices(idx: &RegionIndex, regions: usize) -> Result<Vec<usize>> {
    if idx.rows() != regions {
        return Err(Error::InvalidArgument(format!(
            "region index has {} rows for {regions} regions",
            idx.rows()
        )));
    }
    if let Some(&bad) = idx.data().iter().find(|&&i| i >= regions) {
        return Err(Error::InvalidArgument(format!(
            "region index {bad} out of range 0..{regions}"
        )));
    }
    Ok(idx.data().to_vec())
}

/// Concatenate the tokens of each region's routed partners: `s²×m×c → s²×km×c`.
pub fn gather_var(tape: &mut Tape, x: Var, idx: &RegionIndex) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let [n, m, c] = shape[..] else {
        return Err(Error::InvalidArgument(format!("gather expects s²×m×c, got {shape:?}")));
    };
    let flat = gather_indices(idx, n)?;
    let g = tape.index_select(x, &flat)?;
    tape.reshape(g, &[n, idx.cols() * m, c])
}

pub fn gather_kv(k: &Tensor, v: &Tensor, idx: &RegionIndex) -> Result<(Tensor, Tensor)> {
    if k.shape() != v.shape() {
        return Err(Error::shape("gather_kv", k.shape(), v.shape()));
    }
    let mut tape = Tape::new();
    let (kv, vv) = (tape.constant(k.clone()), tape.constant(v.clone()));
    let kg = gather_var(&mut tape, kv, idx)?;
    let vg = gather_var(&mut tape, vv, idx)?;
    Ok((tape.value(kg).clone(), tape.value(vg).clone()))
}

/// Bias-free `c → c` query, key and value maps of one modality.
#[derive(Clone, Debug)]
pub struct QkvProjection {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl QkvProjection {
    fn new(init: &mut Init, name: &str, c: usize) -> Result<Self> {
        Ok(QkvProjection {
            query: Linear::new(init, &format!("{name}.query"), c, c, false)?,
            key: Linear::new(init, &format!("{name}.key"), c, c, false)?,
            value: Linear::new(init, &format!("{name}.value"), c, c, false)?,
        })
    }

    fn numel(&self) -> usize {
        self.query.numel() + self.key.numel() + self.value.numel()
    }
}

#[derive(Clone, Debug)]
pub struct Fifm {
    pub hsi: QkvProjection,
    pub x: QkvProjection,
    pub ffn: DwFfn,
    pub channels: usize,
    pub c_out: usize,
    pub regions: usize,
    pub topk: usize,
}

/// Routing indices and attention weights of one pass.
#[derive(Clone, Debug)]
pub struct FifmTrace {
    pub output: Var,
    pub index_hsi: RegionIndex,
    pub index_x: RegionIndex,
    /// `s² × m × k·m` per-region attention of the HSI queries.
    pub weights_hsi: Var,
    pub weights_x: Var,
    pub attended_hsi: Var,
    pub attended_x: Var,
}

impl Fifm {
    pub fn new(
        init: &mut Init,
        name: &str,
        channels: usize,
        c_out: usize,
        regions: usize,
        topk: usize,
    ) -> Result<Self> {
        if regions == 0 {
            return Err(Error::Config(format!("{name}: region grid side must be ≥ 1")));
        }
        if topk == 0 || topk > regions * regions {
            return Err(Error::Config(format!(
                "{name}: routing top-k {topk} must lie in 1..={}",
                regions * regions
            )));
        }
        Ok(Fifm {
            hsi: QkvProjection::new(init, &format!("{name}.hsi"), channels)?,
            x: QkvProjection::new(init, &format!("{name}.x"), channels)?,
            ffn: DwFfn::new(init, &format!("{name}.ffn"), 2 * channels, c_out)?,
            channels,
            c_out,
            regions,
            topk,
        })
    }

    fn project(&self, tape: &mut Tape, p: &Bound, proj: &QkvProjection, f: Var) -> Result<[Var; 3]> {
        let s = self.regions;
        let q = proj.query.forward(tape, p, f)?;
        let k = proj.key.forward(tape, p, f)?;
        let v = proj.value.forward(tape, p, f)?;
        Ok([
            partition_var(tape, q, s)?,
            partition_var(tape, k, s)?,
            partition_var(tape, v, s)?,
        ])
    }

    pub fn trace(&self, tape: &mut Tape, p: &Bound, f_hsi: Var, f_x: Var) -> Result<FifmTrace> {
        let (h, w, c) = tape.value(f_hsi).hwc("fifm")?;
        if tape.shape(f_hsi) != tape.shape(f_x) {
            return Err(Error::shape("fifm", tape.shape(f_hsi), tape.shape(f_x)));
        }
        if c != self.channels {
            return Err(Error::shape("fifm", tape.shape(f_hsi), &[h, w, self.channels]));
        }
        check_grid("fifm", h, w, self.regions)?;

        let [q_h, k_h, v_h] = self.project(tape, p, &self.hsi, f_hsi)?;
        let [q_x, k_x, v_x] = self.project(tape, p, &self.x, f_x)?;

        // Routing is piecewise constant in the inputs; indices are data only.
        let index_hsi = route_regions(tape.value(q_h), tape.value(k_h), self.topk)?;
        let index_x = route_regions(tape.value(q_x), tape.value(k_x), self.topk)?;

        let kg_h = gather_var(tape, k_h, &index_hsi)?;
        let vg_x = gather_var(tape, v_x, &index_hsi)?;
        let kg_x = gather_var(tape, k_x, &index_x)?;
        let vg_h = gather_var(tape, v_h, &index_x)?;

        let (o_h, weights_hsi) = attention_with_weights(tape, q_h, kg_h, vg_x)?;
        let (o_x, weights_x) = attention_with_weights(tape, q_x, kg_x, vg_h)?;
        let attended_hsi = departition_var(tape, o_h, h, w, self.regions)?;
        let attended_x = departition_var(tape, o_x, h, w, self.regions)?;
        let fused = tape.concat(&[attended_hsi, attended_x], 2)?;
        let output = self.ffn.forward(tape, p, fused)?;
        Ok(FifmTrace {
            output,
            index_hsi,
            index_x,
            weights_hsi,
            weights_x,
            attended_hsi,
            attended_x,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, f_hsi: Var, f_x: Var) -> Result<Var> {
        Ok(self.trace(tape, p, f_hsi, f_x)?.output)
    }

    pub fn apply(&self, store: &ParamStore, f_hsi: &Tensor, f_x: &Tensor) -> Result<Tensor> {
        crate::nn::evaluate(store, &[f_hsi, f_x], |t, p, v| self.forward(t, p, v[0], v[1]))
    }

    pub fn numel(&self) -> usize {
        self.hsi.numel() + self.x.numel() + self.ffn.numel()
    }
}
