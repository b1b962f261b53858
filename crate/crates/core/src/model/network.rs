use crate::blocks::{FusedMbConv, TransformerBlock};
use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::fem::Fem;
use crate::fifm::Fifm;
use crate::nn::{Bound, Conv2d, Init, Linear, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

use super::config::{ModelConfig, StageKind};

#[derive(Clone, Debug)]
pub enum Block {
    Conv(FusedMbConv),
    Transformer(TransformerBlock),
}

impl Block {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        match self {
            Block::Conv(b) => b.forward(tape, p, x),
            Block::Transformer(b) => b.forward(tape, p, x),
        }
    }

    pub fn numel(&self) -> usize {
        match self {
            Block::Conv(b) => b.numel(),
            Block::Transformer(b) => b.numel(),
        }
    }
}

/// One modality's stem and stage blocks.
///
/// `transitions[i]` runs after stage `i`'s FEM and feeds stage `i + 1`: a
/// stride-2 3×3 conv when the stage downsamples, a 1×1 conv when only the
/// width changes, nothing otherwise.
#[derive(Clone, Debug)]
pub struct Branch {
    pub stem: Conv2d,
    pub entry: Option<Conv2d>,
    pub stages: Vec<Vec<Block>>,
    pub transitions: Vec<Option<Conv2d>>,
}

impl Branch {
    fn new(init: &mut Init, name: &str, bands: usize, cfg: &ModelConfig) -> Result<Self> {
        let stem = Conv2d::new(init, &format!("{name}.stem"), bands, cfg.stem_channels, 3, 1)?;
        let c0 = cfg.stages[0].channels;
        let entry = if cfg.stem_channels != c0 {
            Some(Conv2d::new(
                init,
                &format!("{name}.entry"),
                cfg.stem_channels,
                c0,
                1,
                1,
            )?)
        } else {
            None
        };
        let mut stages = Vec::new();
        let mut transitions = Vec::new();
        for (i, s) in cfg.stages.iter().enumerate() {
            let blocks = (0..s.depth)
                .map(|b| {
                    let bn = format!("{name}.stage{}.block{b}", i + 1);
                    Ok(match s.kind {
                        StageKind::Conv => Block::Conv(FusedMbConv::new(init, &bn, s.channels, cfg.conv_variant)?),
                        StageKind::Transformer => {
                            Block::Transformer(TransformerBlock::new(init, &bn, s.channels, s.heads, s.reduction)?)
                        }
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
            let next = cfg.stages.get(i + 1).map(|n| n.channels);
            let tn = format!("{name}.stage{}.transition", i + 1);
            transitions.push(match next {
                None => None,
                Some(c) if s.downsample_after => Some(Conv2d::new(init, &tn, s.channels, c, 3, 2)?),
                Some(c) if c != s.channels => Some(Conv2d::new(init, &tn, s.channels, c, 1, 1)?),
                Some(_) => None,
            });
        }
        Ok(Branch {
            stem,
            entry,
            stages,
            transitions,
        })
    }

    fn enter(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.stem.forward(tape, p, x)?;
        match &self.entry {
            Some(e) => e.forward(tape, p, y),
            None => Ok(y),
        }
    }

    fn stage(&self, tape: &mut Tape, p: &Bound, i: usize, mut x: Var) -> Result<Var> {
        for b in &self.stages[i] {
            x = b.forward(tape, p, x)?;
        }
        Ok(x)
    }

    fn transition(&self, tape: &mut Tape, p: &Bound, i: usize, x: Var) -> Result<Var> {
        match &self.transitions[i] {
            Some(t) => t.forward(tape, p, x),
            None => Ok(x),
        }
    }

    pub fn numel(&self) -> usize {
        self.stem.numel()
            + self.entry.as_ref().map_or(0, Conv2d::numel)
            + self.stages.iter().flatten().map(Block::numel).sum::<usize>()
            + self.transitions.iter().flatten().map(Conv2d::numel).sum::<usize>()
    }
}

/// Per-stage cross-modal fusion feeding the decoder.
#[derive(Clone, Debug)]
pub enum Fusion {
    Fifm(Fifm),
    /// Ablation stand-in: channel concat followed by a `2c → c` linear map.
    Concat(Linear),
}

impl Fusion {
    fn forward(&self, tape: &mut Tape, p: &Bound, a: Var, b: Var) -> Result<Var> {
        match self {
            Fusion::Fifm(f) => f.forward(tape, p, a, b),
            Fusion::Concat(l) => {
                let cat = tape.concat(&[a, b], 2)?;
                l.forward(tape, p, cat)
            }
        }
    }

    pub fn numel(&self) -> usize {
        match self {
            Fusion::Fifm(f) => f.numel(),
            Fusion::Concat(l) => l.numel(),
        }
    }
}

/// Tape values of one network pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    /// Enhanced (or, with FEM disabled, raw) branch features per stage.
    pub stage_pairs: Vec<(Var, Var)>,
    /// Fused per-stage features consumed by the decoder.
    pub fused: Vec<Var>,
}

/// Two-branch segmentation network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub hsi: Branch,
    pub x: Branch,
    pub fems: Vec<Option<Fem>>,
    pub fusions: Vec<Fusion>,
    pub decoder: Decoder,
}

impl Model {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, config.seed);
        let hsi = Branch::new(&mut init, "hsi", config.hsi_bands, config)?;
        let x = Branch::new(&mut init, "x", config.x_bands, config)?;
        let mut fems = Vec::new();
        let mut fusions = Vec::new();
        for (i, s) in config.stages.iter().enumerate() {
            let c = s.channels;
            let n = i + 1;
            fems.push(if config.use_fem {
                Some(Fem::new(&mut init, &format!("stage{n}.fem"), c, config.fem_ratio)?)
            } else {
                None
            });
            fusions.push(if config.use_fifm {
                Fusion::Fifm(Fifm::new(
                    &mut init,
                    &format!("stage{n}.fifm"),
                    c,
                    c,
                    config.fifm_regions,
                    config.fifm_topk,
                )?)
            } else {
                Fusion::Concat(Linear::new(&mut init, &format!("stage{n}.fuse"), 2 * c, c, true)?)
            });
        }
        let decoder = Decoder::new(
            &mut init,
            "decoder",
            &config.stage_channels(),
            config.decoder_width,
            config.num_classes,
        )?;
        Ok(Model {
            config: config.clone(),
            params,
            hsi,
            x,
            fems,
            fusions,
            decoder,
        })
    }

    pub fn numel(&self) -> usize {
        self.hsi.numel()
            + self.x.numel()
            + self.fems.iter().flatten().map(Fem::numel).sum::<usize>()
            + self.fusions.iter().map(Fusion::numel).sum::<usize>()
            + self.decoder.numel()
    }

    fn check_inputs(&self, hsi: &[usize], x: &[usize]) -> Result<(usize, usize)> {
        let [h, w, bh] = hsi[..] else {
            return Err(Error::InvalidArgument(format!(
                "HSI input must be h×w×bands, got {hsi:?}"
            )));
        };
        let [xh, xw, bx] = x[..] else {
            return Err(Error::InvalidArgument(format!("X input must be h×w×bands, got {x:?}")));
        };
        if bh != self.config.hsi_bands {
            return Err(Error::shape("model hsi bands", hsi, &[h, w, self.config.hsi_bands]));
        }
        if bx != self.config.x_bands {
            return Err(Error::shape("model x bands", x, &[xh, xw, self.config.x_bands]));
        }
        if (h, w) != (xh, xw) {
            return Err(Error::shape("model inputs", hsi, x));
        }
        self.config.check_input(h, w)?;
        Ok((h, w))
    }

    pub fn trace(&self, tape: &mut Tape, p: &Bound, hsi: Var, x: Var) -> Result<ForwardVars> {
        let (h, w) = self.check_inputs(tape.shape(hsi), tape.shape(x))?;
        let mut a = self.hsi.enter(tape, p, hsi)?;
        let mut b = self.x.enter(tape, p, x)?;
        let mut stage_pairs = Vec::new();
        let mut fused = Vec::new();
        for i in 0..self.config.stages.len() {
            a = self.hsi.stage(tape, p, i, a)?;
            b = self.x.stage(tape, p, i, b)?;
            if let Some(fem) = &self.fems[i] {
                (a, b) = fem.forward(tape, p, a, b)?;
            }
            stage_pairs.push((a, b));
            fused.push(self.fusions[i].forward(tape, p, a, b)?);
            a = self.hsi.transition(tape, p, i, a)?;
            b = self.x.transition(tape, p, i, b)?;
        }
        let logits = self.decoder.forward(tape, p, &fused, (h, w))?;
        Ok(ForwardVars {
            logits,
            stage_pairs,
            fused,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, hsi: Var, x: Var) -> Result<Var> {
        Ok(self.trace(tape, p, hsi, x)?.logits)
    }

    /// Inference on plain tensors: `H×W×num_classes` logits.
    pub fn predict(&self, hsi: &Tensor, x: &Tensor) -> Result<Tensor> {
        crate::nn::evaluate(&self.params, &[hsi, x], |t, p, v| self.forward(t, p, v[0], v[1]))
    }

    /// Multiply-accumulate count of one forward pass on an `h×w` input.
    pub fn forward_macs(&self, h: usize, w: usize) -> Result<u64> {
        let hsi = Tensor::zeros(&[h, w, self.config.hsi_bands]);
        let x = Tensor::zeros(&[h, w, self.config.x_bands]);
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let (a, b) = (tape.constant(hsi), tape.constant(x));
        self.forward(&mut tape, &p, a, b)?;
        Ok(tape.macs())
    }
}
