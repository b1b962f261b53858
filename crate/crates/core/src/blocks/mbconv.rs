use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, DepthwiseConv, Init, Linear, Norm, NormKind, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Expansion ratio of the hidden width.
pub const EXPANSION: usize = 2;
/// Squeeze-and-excitation bottleneck divisor.
pub const SE_REDUCTION: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvVariant {
    /// 3×3 expand → norm → GELU → 1×1 project.
    #[default]
    Plain,
    /// As `Plain` with squeeze-and-excitation on the expanded features.
    WithSe,
    /// 1×1 expand → 3×3 depthwise → SE → 1×1 project.
    MbConv,
}

impl fmt::Display for ConvVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConvVariant::Plain => "plain",
            ConvVariant::WithSe => "with_se",
            ConvVariant::MbConv => "mbconv",
        })
    }
}

impl FromStr for ConvVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(ConvVariant::Plain),
            "with_se" => Ok(ConvVariant::WithSe),
            "mbconv" => Ok(ConvVariant::MbConv),
            other => Err(Error::Config(format!(
                "conv variant must be plain, with_se or mbconv, got {other:?}"
            ))),
        }
    }
}

/// Global-average squeeze, two linear layers, sigmoid gate.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub reduce: Linear,
    pub expand: Linear,
}

impl SqueezeExcite {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        let hidden = (channels / SE_REDUCTION).max(1);
        Ok(SqueezeExcite {
            reduce: Linear::new(init, &format!("{name}.reduce"), channels, hidden, true)?,
            expand: Linear::new(init, &format!("{name}.expand"), hidden, channels, true)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let rows = tape.mean_axis(x, 0)?;
        let pooled = tape.mean_axis(rows, 1)?;
        let h = self.reduce.forward(tape, p, pooled)?;
        let h = tape.gelu(h);
        let g = self.expand.forward(tape, p, h)?;
        let g = tape.sigmoid(g);
        tape.mul(x, g)
    }

    pub fn numel(&self) -> usize {
        self.reduce.numel() + self.expand.numel()
    }
}

/// Residual convolution block with a 2× hidden expansion.
#[derive(Clone, Debug)]
pub struct FusedMbConv {
    pub variant: ConvVariant,
    pub channels: usize,
    pub expand: Conv2d,
    pub expand_norm: Norm,
    pub depthwise: Option<(DepthwiseConv, Norm)>,
    pub se: Option<SqueezeExcite>,
    pub project: Conv2d,
}

impl FusedMbConv {
    pub fn new(init: &mut Init, name: &str, channels: usize, variant: ConvVariant) -> Result<Self> {
        let hidden = EXPANSION * channels;
        let expand_kernel = if variant == ConvVariant::MbConv { 1 } else { 3 };
        let expand = Conv2d::without_bias(init, &format!("{name}.expand"), channels, hidden, expand_kernel, 1)?;
        let expand_norm = Norm::new(init, &format!("{name}.expand_norm"), hidden, NormKind::Channel)?;
        let depthwise = if variant == ConvVariant::MbConv {
            Some((
                DepthwiseConv::without_bias(init, &format!("{name}.dw"), hidden)?,
                Norm::new(init, &format!("{name}.dw_norm"), hidden, NormKind::Channel)?,
            ))
        } else {
            None
        };
        let se = if variant == ConvVariant::Plain {
            None
        } else {
            Some(SqueezeExcite::new(init, &format!("{name}.se"), hidden)?)
        };
        let project = Conv2d::new(init, &format!("{name}.project"), hidden, channels, 1, 1)?;
        Ok(FusedMbConv {
            variant,
            channels,
            expand,
            expand_norm,
            depthwise,
            se,
            project,
        })
    }

    pub fn hidden_channels(&self) -> usize {
        self.expand.c_out
    }

    /// Expanded, normalized and activated features (before any SE/projection).
    pub fn hidden(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let c = tape.value(x).hwc("fused_mbconv")?.2;
        if c != self.channels {
            return Err(Error::shape("fused_mbconv", tape.shape(x), &[0, 0, self.channels]));
        }
        let e = self.expand.forward(tape, p, x)?;
        let e = self.expand_norm.forward(tape, p, e)?;
        let mut h = tape.gelu(e);
        if let Some((dw, norm)) = &self.depthwise {
            let d = dw.forward(tape, p, h)?;
            let d = norm.forward(tape, p, d)?;
            h = tape.gelu(d);
        }
        Ok(h)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = self.hidden(tape, p, x)?;
        if let Some(se) = &self.se {
            h = se.forward(tape, p, h)?;
        }
        let y = self.project.forward(tape, p, h)?;
        tape.add(x, y)
    }

    /// Frozen-parameter evaluation on a plain tensor.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        crate::nn::evaluate(store, &[x], |t, p, v| self.forward(t, p, v[0]))
    }

    pub fn numel(&self) -> usize {
        self.expand.numel()
            + self.expand_norm.numel()
            + self.depthwise.as_ref().map_or(0, |(d, n)| d.numel() + n.numel())
            + self.se.as_ref().map_or(0, SqueezeExcite::numel)
            + self.project.numel()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::evaluate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(c: usize, variant: ConvVariant) -> (ParamStore, FusedMbConv) {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 5);
        let b = FusedMbConv::new(&mut init, "b", c, variant).unwrap();
        (store, b)
    }

    #[test]
    fn zero_parameters_pass_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for variant in [ConvVariant::Plain, ConvVariant::WithSe, ConvVariant::MbConv] {
            let (mut store, b) = block(4, variant);
            store.zero_values("");
            let x = Tensor::randn(&[5, 3, 4], &mut rng);
            assert_eq!(b.apply(&store, &x).unwrap(), x, "{variant}");
        }
    }

    #[test]
    fn hidden_width_doubles() {
        let (store, b) = block(8, ConvVariant::Plain);
        let x = Tensor::ones(&[2, 2, 8]);
        let h = evaluate(&store, &[&x], |t, p, v| b.hidden(t, p, v[0])).unwrap();
        assert_eq!(h.shape(), &[2, 2, 16]);
        assert_eq!(b.apply(&store, &x).unwrap().shape(), &[2, 2, 8]);
    }

    #[test]
    fn parameter_count_closed_form() {
        let (store, b) = block(8, ConvVariant::Plain);
        let expected = 3 * 3 * 8 * 16 + 2 * 16 + (16 * 8 + 8);
        assert_eq!(b.numel(), expected);
        assert_eq!(store.numel(), expected);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let (store, b) = block(4, ConvVariant::Plain);
        let x = Tensor::ones(&[2, 2, 3]);
        assert!(matches!(b.apply(&store, &x), Err(Error::ShapeMismatch { .. })));
    }

    fn set(store: &mut ParamStore, name: &str, data: &[f64]) {
        let id = store.find(name).unwrap();
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::new(&shape, data.to_vec()).unwrap();
    }

    #[test]
    fn single_pixel_hand_chain() {
        // At 1×1 the spatial normalization collapses to its shift, so the
        // block reduces to x + project(gelu(beta)).
        let (mut store, b) = block(2, ConvVariant::Plain);
        set(&mut store, "b.expand_norm.beta", &[1.0, -1.0, 0.5, 0.0]);
        let mut proj = vec![0.0; 8];
        proj[0] = 2.0; // hidden 0 → out 0
        proj[2 * 2 + 1] = -1.0; // hidden 2 → out 1
        set(&mut store, "b.project.weight", &proj);
        set(&mut store, "b.project.bias", &[0.25, 0.0]);
        let x = Tensor::new(&[1, 1, 2], vec![3.0, -4.0]).unwrap();
        let y = b.apply(&store, &x).unwrap();

        let phi = |v: f64| 0.5 * (1.0 + libm::erf(v / 2f64.sqrt()));
        let g1 = 1.0 * phi(1.0);
        let g05 = 0.5 * phi(0.5);
        let want = [3.0 + (2.0 * g1 + 0.25), -4.0 + (-g05)];
        assert!((y.data()[0] - want[0]).abs() < 1e-14);
        assert!((y.data()[1] - want[1]).abs() < 1e-14);
    }

    #[test]
    fn two_pixel_hand_chain_with_normalization() {
        // 2×1×1 input, identity-like 3×3 expand (center tap only) into two
        // hidden channels with weights (1, −1); normalization over the two
        // positions maps each channel to ±1/√(1+eps/var).
        let (mut store, b) = block(1, ConvVariant::Plain);
        let mut w = vec![0.0; 9 * 2];
        w[4 * 2] = 1.0;
        w[4 * 2 + 1] = -1.0;
        set(&mut store, "b.expand.weight", &w);
        set(&mut store, "b.project.weight", &[1.0, 0.5]);
        set(&mut store, "b.project.bias", &[0.0]);
        let x = Tensor::new(&[2, 1, 1], vec![1.0, 3.0]).unwrap();
        let y = b.apply(&store, &x).unwrap();

        // channel 0: values (1, 3) → mean 2, var 1 → (−1, +1)·r
        // channel 1: values (−1, −3) → (+1, −1)·r
        let r = 1.0 / (1.0 + 1e-5f64).sqrt();
        let gelu = |v: f64| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt()));
        let y0 = 1.0 + gelu(-r) + 0.5 * gelu(r);
        let y1 = 3.0 + gelu(r) + 0.5 * gelu(-r);
        assert!((y.data()[0] - y0).abs() < 1e-13, "{} vs {y0}", y.data()[0]);
        assert!((y.data()[1] - y1).abs() < 1e-13);
    }
}
