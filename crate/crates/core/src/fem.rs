//! Cross-modality feature enhancement.
//!
//! Both branches are concatenated along channels and summarized by strip
//! pooling along each spatial axis. A shared bottleneck followed by two
//! direction-specific sigmoid gates yields a `h×w×2c` attention map (outer
//! product of the row and column gates), whose channel halves rescale the
//! HSI and X features respectively.

use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Linear, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Default bottleneck reduction ratio.
pub const DEFAULT_RATIO: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StripDirection {
    /// Mean over columns: `h×w×c → h×1×c`.
    Horizontal,
    /// Mean over rows: `h×w×c → 1×w×c`.
    Vertical,
}

/// Strip pooling on the tape.
pub fn strip_pool_var(tape: &mut Tape, x: Var, direction: StripDirection) -> Result<Var> {
    tape.value(x).hwc("strip_pool")?;
    match direction {
        StripDirection::Horizontal => tape.mean_axis(x, 1),
        StripDirection::Vertical => tape.mean_axis(x, 0),
    }
}

pub fn strip_pool(x: &Tensor, direction: StripDirection) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = strip_pool_var(&mut tape, v, direction)?;
    Ok(tape.value(y).clone())
}

#[derive(Clone, Debug)]
pub struct Fem {
    /// Shared 1×1 bottleneck, `2c → 2c/r`.
    pub joint: Linear,
    /// Row gate, `2c/r → 2c`.
    pub gate_h: Linear,
    /// Column gate, `2c/r → 2c`.
    pub gate_w: Linear,
    pub channels: usize,
    pub ratio: usize,
}

/// Intermediate tape values of one enhancement pass.
#[derive(Clone, Copy, Debug)]
pub struct FemVars {
    pub pooled_h: Var,
    pub pooled_v: Var,
    pub bottleneck: Var,
    pub gate_h: Var,
    pub gate_v: Var,
    pub gates: Var,
    pub hsi: Var,
    pub x: Var,
}

impl Fem {
    pub fn new(init: &mut Init, name: &str, channels: usize, ratio: usize) -> Result<Self> {
        let wide = 2 * channels;
        if ratio == 0 || !wide.is_multiple_of(ratio) {
            return Err(Error::Divisibility(format!(
                "{name}: 2c = {wide} is not divisible by reduction ratio {ratio}"
            )));
        }
        let narrow = wide / ratio;
        Ok(Fem {
            joint: Linear::new(init, &format!("{name}.joint"), wide, narrow, true)?,
            gate_h: Linear::new(init, &format!("{name}.gate_h"), narrow, wide, true)?,
            gate_w: Linear::new(init, &format!("{name}.gate_w"), narrow, wide, true)?,
            channels,
            ratio,
        })
    }

    pub fn trace(&self, tape: &mut Tape, p: &Bound, f_hsi: Var, f_x: Var) -> Result<FemVars> {
        let (h, w, c) = tape.value(f_hsi).hwc("fem")?;
        if tape.shape(f_hsi) != tape.shape(f_x) {
            return Err(Error::shape("fem", tape.shape(f_hsi), tape.shape(f_x)));
        }
        if c != self.channels {
            return Err(Error::shape("fem", tape.shape(f_hsi), &[h, w, self.channels]));
        }
        let narrow = self.joint.c_out;

        let joined = tape.concat(&[f_hsi, f_x], 2)?;
        let pooled_h = strip_pool_var(tape, joined, StripDirection::Horizontal)?;
        let pooled_v = strip_pool_var(tape, joined, StripDirection::Vertical)?;
        let col = tape.reshape(pooled_v, &[w, 1, 2 * c])?;
        let stacked = tape.concat(&[pooled_h, col], 0)?;
        let z = self.joint.forward(tape, p, stacked)?;
        let bottleneck = tape.gelu(z);

        let part_h = tape.narrow(bottleneck, 0, 0, h)?;
        let part_v = tape.narrow(bottleneck, 0, h, w)?;
        let part_v = tape.reshape(part_v, &[1, w, narrow])?;
        let gh = self.gate_h.forward(tape, p, part_h)?;
        let gate_h = tape.sigmoid(gh);
        let gv = self.gate_w.forward(tape, p, part_v)?;
        let gate_v = tape.sigmoid(gv);

        let gates = tape.mul(gate_h, gate_v)?;
        let g_hsi = tape.narrow(gates, 2, 0, c)?;
        let g_x = tape.narrow(gates, 2, c, c)?;
        let hsi = tape.mul(f_hsi, g_hsi)?;
        let x = tape.mul(f_x, g_x)?;
        Ok(FemVars {
            pooled_h,
            pooled_v,
            bottleneck,
            gate_h,
            gate_v,
            gates,
            hsi,
            x,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, f_hsi: Var, f_x: Var) -> Result<(Var, Var)> {
        let t = self.trace(tape, p, f_hsi, f_x)?;
        Ok((t.hsi, t.x))
    }

    pub fn apply(&self, store: &ParamStore, f_hsi: &Tensor, f_x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let a = tape.constant(f_hsi.clone());
        let b = tape.constant(f_x.clone());
        let (ya, yb) = self.forward(&mut tape, &p, a, b)?;
        Ok((tape.value(ya).clone(), tape.value(yb).clone()))
    }

    pub fn numel(&self) -> usize {
        self.joint.numel() + self.gate_h.numel() + self.gate_w.numel()
    }
}
