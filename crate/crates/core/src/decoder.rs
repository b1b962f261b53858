//! Lightweight all-linear segmentation head.

use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Linear, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const STAGES: usize = 4;
pub const DEFAULT_WIDTH: usize = 64;

/// Per-stage unify maps, then upsample, concatenate (stage 1 first),
/// fuse with GELU and predict raw logits.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub unify: Vec<Linear>,
    pub fuse: Linear,
    pub predict: Linear,
    pub width: usize,
    pub classes: usize,
}

impl Decoder {
    pub fn new(init: &mut Init, name: &str, stage_channels: &[usize], width: usize, classes: usize) -> Result<Self> {
        if stage_channels.len() != STAGES {
            return Err(Error::Config(format!(
                "{name}: decoder needs {STAGES} stage widths, got {}",
                stage_channels.len()
            )));
        }
        let unify = stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Linear::new(init, &format!("{name}.unify{}", i + 1), c, width, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Decoder {
            unify,
            fuse: Linear::new(init, &format!("{name}.fuse"), STAGES * width, width, true)?,
            predict: Linear::new(init, &format!("{name}.predict"), width, classes, true)?,
            width,
            classes,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, stages: &[Var], target: (usize, usize)) -> Result<Var> {
        if stages.len() != self.unify.len() {
            return Err(Error::InvalidArgument(format!(
                "decoder expects {} stage features, got {}",
                self.unify.len(),
                stages.len()
            )));
        }
        let (th, tw) = target;
        let mut parts = Vec::with_capacity(stages.len());
        for (lin, &f) in self.unify.iter().zip(stages) {
            let (h, w, c) = tape.value(f).hwc("decoder")?;
            if c != lin.c_in {
                return Err(Error::shape("decoder", tape.shape(f), &[h, w, lin.c_in]));
            }
            if h > th || w > tw {
                return Err(Error::InvalidArgument(format!(
                    "decoder target {th}×{tw} is smaller than stage features {h}×{w}"
                )));
            }
            let u = lin.forward(tape, p, f)?;
            parts.push(if (h, w) == target {
                u
            } else {
                tape.upsample_bilinear(u, th, tw)?
            });
        }
        let cat = tape.concat(&parts, 2)?;
        let z = self.fuse.forward(tape, p, cat)?;
        let z = tape.gelu(z);
        self.predict.forward(tape, p, z)
    }

    pub fn apply(&self, store: &ParamStore, stages: &[&Tensor], target: (usize, usize)) -> Result<Tensor> {
        crate::nn::evaluate(store, stages, |t, p, v| self.forward(t, p, v, target))
    }

    pub fn numel(&self) -> usize {
        self.unify.iter().map(Linear::numel).sum::<usize>() + self.fuse.numel() + self.predict.numel()
    }
}
