use crate::error::{Error, Result};
use crate::nn::{Bound, DepthwiseConv, Init, Linear, Norm, NormKind, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

use super::attention::attention;

/// Efficient multi-head self-attention.
///
/// Keys and values are shortened by folding `R` consecutive tokens into one
/// `c·R`-wide row and projecting it back to `c`, so the score matrix is
/// `N × N/R` instead of `N × N`. The key path has no biases: a shift shared
/// by every key moves each score row by a constant, which softmax removes.
#[derive(Clone, Debug)]
pub struct Emsa {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub key_reduce: Linear,
    pub value_reduce: Linear,
    pub output: Linear,
    pub heads: usize,
    pub reduction: usize,
    pub channels: usize,
}

impl Emsa {
    pub fn new(init: &mut Init, name: &str, channels: usize, heads: usize, reduction: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: channels {channels} not divisible by heads {heads}"
            )));
        }
        if reduction == 0 {
            return Err(Error::Config(format!("{name}: reduction ratio must be ≥ 1")));
        }
        let c = channels;
        Ok(Emsa {
            query: Linear::new(init, &format!("{name}.query"), c, c, true)?,
            key: Linear::new(init, &format!("{name}.key"), c, c, false)?,
            value: Linear::new(init, &format!("{name}.value"), c, c, true)?,
            key_reduce: Linear::new(init, &format!("{name}.key_reduce"), c * reduction, c, false)?,
            value_reduce: Linear::new(init, &format!("{name}.value_reduce"), c * reduction, c, true)?,
            output: Linear::new(init, &format!("{name}.output"), c, c, true)?,
            heads,
            reduction,
            channels,
        })
    }

    fn split_heads(&self, tape: &mut Tape, x: Var, n: usize) -> Result<Var> {
        let d = self.channels / self.heads;
        let x = tape.reshape(x, &[n, self.heads, d])?;
        tape.permute(x, &[1, 0, 2])
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (h, w, c) = tape.value(x).hwc("emsa")?;
        if c != self.channels {
            return Err(Error::shape("emsa", tape.shape(x), &[h, w, self.channels]));
        }
        let n = h * w;
        if n % self.reduction != 0 {
            return Err(Error::Divisibility(format!(
                "token count {n} ({h}×{w}) is not divisible by reduction ratio {}",
                self.reduction
            )));
        }
        let m = n / self.reduction;
        let tokens = tape.reshape(x, &[n, c])?;
        let q = self.query.forward(tape, p, tokens)?;
        let k = self.key.forward(tape, p, tokens)?;
        let v = self.value.forward(tape, p, tokens)?;

        let k = tape.reshape(k, &[m, c * self.reduction])?;
        let k = self.key_reduce.forward(tape, p, k)?;
        let v = tape.reshape(v, &[m, c * self.reduction])?;
        let v = self.value_reduce.forward(tape, p, v)?;

        let q = self.split_heads(tape, q, n)?;
        let k = self.split_heads(tape, k, m)?;
        let v = self.split_heads(tape, v, m)?;
        let o = attention(tape, q, k, v)?;
        let o = tape.permute(o, &[1, 0, 2])?;
        let o = tape.reshape(o, &[n, c])?;
        let o = self.output.forward(tape, p, o)?;
        tape.reshape(o, &[h, w, c])
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        crate::nn::evaluate(store, &[x], |t, p, v| self.forward(t, p, v[0]))
    }

    pub fn numel(&self) -> usize {
        [
            &self.query,
            &self.key,
            &self.value,
            &self.key_reduce,
            &self.value_reduce,
            &self.output,
        ]
        .iter()
        .map(|l| l.numel())
        .sum()
    }
}

/// Feed-forward network with a 3×3 depthwise convolution between its two
/// linear layers: `fc2(GELU(dw(fc1(x))))`, hidden width `2·c_in`.
#[derive(Clone, Debug)]
pub struct DwFfn {
    pub fc1: Linear,
    pub dw: DepthwiseConv,
    pub fc2: Linear,
}

impl DwFfn {
    pub fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let hidden = 2 * c_in;
        Ok(DwFfn {
            fc1: Linear::new(init, &format!("{name}.fc1"), c_in, hidden, true)?,
            dw: DepthwiseConv::new(init, &format!("{name}.dw"), hidden)?,
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, c_out, true)?,
        })
    }

    /// Depthwise-filtered hidden features, before the activation.
    pub fn mixed(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        self.dw.forward(tape, p, h)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.mixed(tape, p, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }

    pub fn numel(&self) -> usize {
        self.fc1.numel() + self.dw.numel() + self.fc2.numel()
    }
}

/// `x′ = EMSA(LN(x)) + x`, `y = DWFFN(LN(x′)) + x′`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: Norm,
    pub attn: Emsa,
    pub norm2: Norm,
    pub ffn: DwFfn,
}

impl TransformerBlock {
    pub fn new(init: &mut Init, name: &str, channels: usize, heads: usize, reduction: usize) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: Norm::new(init, &format!("{name}.norm1"), channels, NormKind::Layer)?,
            attn: Emsa::new(init, &format!("{name}.attn"), channels, heads, reduction)?,
            norm2: Norm::new(init, &format!("{name}.norm2"), channels, NormKind::Layer)?,
            ffn: DwFfn::new(init, &format!("{name}.ffn"), channels, channels)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let a = self.norm1.forward(tape, p, x)?;
        let a = self.attn.forward(tape, p, a)?;
        let x = tape.add(x, a)?;
        let f = self.norm2.forward(tape, p, x)?;
        let f = self.ffn.forward(tape, p, f)?;
        tape.add(x, f)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        crate::nn::evaluate(store, &[x], |t, p, v| self.forward(t, p, v[0]))
    }

    pub fn numel(&self) -> usize {
        self.norm1.numel() + self.attn.numel() + self.norm2.numel() + self.ffn.numel()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{naive_attention, ATTENTION_SCORES_TAG};
    use crate::nn::evaluate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn emsa(c: usize, heads: usize, r: usize) -> (ParamStore, Emsa) {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 9);
        let e = Emsa::new(&mut init, "a", c, heads, r).unwrap();
        (store, e)
    }

    fn set_identity(store: &mut ParamStore, lin: &Linear) {
        *store.value_mut(lin.weight) = Tensor::eye(lin.c_in);
        if let Some(b) = lin.bias {
            store.value_mut(b).data_mut().fill(0.0);
        }
    }

    fn project(store: &ParamStore, lin: &Linear, x: &Tensor) -> Tensor {
        evaluate(store, &[x], |t, p, v| lin.forward(t, p, v[0])).unwrap()
    }

    #[test]
    fn r1_identity_projections_match_naive_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut store, e) = emsa(6, 1, 1);
        set_identity(&mut store, &e.key_reduce);
        set_identity(&mut store, &e.value_reduce);
        set_identity(&mut store, &e.output);
        let x = Tensor::randn(&[3, 4, 6], &mut rng);
        let tokens = x.reshape(&[12, 6]).unwrap();
        let q = project(&store, &e.query, &tokens);
        let k = project(&store, &e.key, &tokens);
        let v = project(&store, &e.value, &tokens);
        let oracle = naive_attention(&q, &k, &v).unwrap();
        let got = e.apply(&store, &x).unwrap().reshape(&[12, 6]).unwrap();
        assert!(got.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn reduced_key_length_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (store, e) = emsa(16, 2, 4);
        let x = Tensor::randn(&[8, 8, 16], &mut rng);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let y = e.forward(&mut tape, &p, xv).unwrap();
        assert_eq!(tape.shape(y), &[8, 8, 16]);
        // per head: 64 queries × 16 reduced keys × 8 dims
        assert_eq!(tape.tagged_macs(ATTENTION_SCORES_TAG), 2 * 64 * 16 * 8);
    }

    #[test]
    fn indivisible_token_count_is_rejected() {
        let (store, e) = emsa(4, 1, 4);
        let x = Tensor::ones(&[3, 3, 4]);
        assert!(matches!(e.apply(&store, &x), Err(Error::Divisibility(_))));
    }

    #[test]
    fn zero_query_gives_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut store, e) = emsa(4, 2, 2);
        store.value_mut(e.query.weight).data_mut().fill(0.0);
        store.value_mut(e.query.bias.unwrap()).data_mut().fill(0.0);
        set_identity(&mut store, &e.output);
        let x = Tensor::randn(&[2, 4, 4], &mut rng);
        let tokens = x.reshape(&[8, 4]).unwrap();
        let v = project(&store, &e.value, &tokens).reshape(&[4, 8]).unwrap();
        let v = project(&store, &e.value_reduce, &v);
        let got = e.apply(&store, &x).unwrap().reshape(&[8, 4]).unwrap();
        for ch in 0..4 {
            let mean = (0..4).map(|j| v.at(&[j, ch])).sum::<f64>() / 4.0;
            for i in 0..8 {
                assert!((got.at(&[i, ch]) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn heads_must_divide_channels() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 0);
        assert!(Emsa::new(&mut init, "a", 6, 4, 1).is_err());
    }

    #[test]
    fn zero_block_is_identity_and_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 1);
        let b = TransformerBlock::new(&mut init, "t", 8, 2, 4).unwrap();
        let x = Tensor::randn(&[6, 6, 8], &mut rng);
        assert_eq!(b.apply(&store, &x).unwrap().shape(), &[6, 6, 8]);
        store.zero_values("");
        assert_eq!(b.apply(&store, &x).unwrap(), x);
    }

    #[test]
    fn depthwise_stage_keeps_channels_separate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 2);
        let f = DwFfn::new(&mut init, "f", 3, 3).unwrap();
        let h = Tensor::randn(&[4, 4, 6], &mut rng);
        let mut h2 = h.clone();
        for y in 0..4 {
            for x in 0..4 {
                let v = h2.at(&[y, x, 2]);
                h2.set(&[y, x, 2], v + 1.5);
            }
        }
        let dw = |t: &Tensor| evaluate(&store, &[t], |tp, p, v| f.dw.forward(tp, p, v[0])).unwrap();
        let (a, b) = (dw(&h), dw(&h2));
        for y in 0..4 {
            for x in 0..4 {
                for ch in 0..6 {
                    let same = a.at(&[y, x, ch]) == b.at(&[y, x, ch]);
                    assert_eq!(same, ch != 2, "channel {ch}");
                }
            }
        }
    }
}
