//! Finite-difference gradient suites at three scopes.
//!
//! Every check reduces its op to a scalar with a fixed random projection
//! `sum(out ⊙ r)`, so no gradient is trivially zero.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{ConvVariant, FusedMbConv, TransformerBlock};
use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::fem::Fem;
use crate::fifm::Fifm;
use crate::model::{Model, ModelConfig};
use crate::nn::{Bound, Init, ParamStore};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Padding, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Primitive,
    Blocks,
    Model,
}

impl Scope {
    pub fn tolerance(self) -> f64 {
        match self {
            Scope::Primitive => 1e-6,
            Scope::Blocks => 1e-4,
            Scope::Model => 1e-3,
        }
    }

    pub const ALL: [Scope; 3] = [Scope::Primitive, Scope::Blocks, Scope::Model];
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Primitive => "primitive",
            Scope::Blocks => "blocks",
            Scope::Model => "model",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primitive" => Ok(Scope::Primitive),
            "blocks" => Ok(Scope::Blocks),
            "model" => Ok(Scope::Model),
            other => Err(Error::Config(format!(
                "scope must be primitive, blocks or model, got {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub scope: Scope,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "ok  " } else { "FAIL" };
        write!(
            f,
            "{verdict} [{}] {} (tol {:.0e})",
            self.scope, self.report, self.tolerance
        )
    }
}

/// The result with the largest error relative to its tolerance.
pub fn worst(results: &[CheckResult]) -> Option<&CheckResult> {
    results.iter().max_by(|a, b| {
        let ra = a.report.max_rel_error / a.tolerance;
        let rb = b.report.max_rel_error / b.tolerance;
        ra.total_cmp(&rb)
    })
}

pub fn run(scope: Scope, seed: u64) -> Result<Vec<CheckResult>> {
    match scope {
        Scope::Primitive => primitives(seed),
        Scope::Blocks => blocks(seed),
        Scope::Model => model(seed).map(|r| vec![r]),
    }
}

type Op<'a> = dyn Fn(&mut Tape, &Bound, &[Var]) -> Result<Var> + 'a;

struct Case<'a> {
    scope: Scope,
    name: &'a str,
    store: &'a ParamStore,
    inputs: Vec<Tensor>,
    opts: GradCheckOptions,
}

impl Case<'_> {
    /// Check gradients w.r.t. the inputs and every parameter in the store.
    fn run(self, op: &Op<'_>) -> Result<CheckResult> {
        let n_in = self.inputs.len();
        let mut all = self.inputs;
        all.extend(self.store.iter().map(|p| p.value.clone()));

        // Output shape from one frozen pass, then a fixed projection.
        let mut probe = Tape::new();
        let vars: Vec<Var> = all.iter().map(|t| probe.constant(t.clone())).collect();
        let out = op(&mut probe, &Bound::from_vars(vars[n_in..].to_vec()), &vars[..n_in])?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed ^ 0x5eed);
        let r = Tensor::randn(probe.shape(out), &mut rng);

        let report = grad_check(self.name, &all, &self.opts, |tape, v| {
            let out = op(tape, &Bound::from_vars(v[n_in..].to_vec()), &v[..n_in])?;
            if tape.value(out).len() == 1 {
                return Ok(out);
            }
            let rv = tape.constant(r.clone());
            let m = tape.mul(out, rv)?;
            Ok(tape.sum(m))
        })?;
        Ok(CheckResult {
            scope: self.scope,
            tolerance: self.scope.tolerance(),
            report,
        })
    }
}

fn primitives(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut randn = |shape: &[usize]| Tensor::randn(shape, &mut rng);
    let empty = ParamStore::new();
    let opts = GradCheckOptions {
        eps: 1e-6,
        max_elements_per_input: None,
        seed,
    };
    let case = |name, inputs| Case {
        scope: Scope::Primitive,
        name,
        store: &empty,
        inputs,
        opts: opts.clone(),
    };

    let mut out = Vec::new();
    let mut push = |c: Case, op: &Op<'_>| -> Result<()> {
        out.push(c.run(op)?);
        Ok(())
    };

    push(
        case("add_broadcast", vec![randn(&[3, 4]), randn(&[1, 4])]),
        &|t, _, v| t.add(v[0], v[1]),
    )?;
    push(
        case("mul_broadcast", vec![randn(&[2, 3, 4]), randn(&[2, 1, 4])]),
        &|t, _, v| t.mul(v[0], v[1]),
    )?;
    push(case("scale", vec![randn(&[5])]), &|t, _, v| Ok(t.scale(v[0], -1.5)))?;
    push(case("matmul", vec![randn(&[3, 5]), randn(&[5, 4])]), &|t, _, v| {
        t.matmul(v[0], v[1])
    })?;
    push(case("matmul_nt", vec![randn(&[3, 5]), randn(&[4, 5])]), &|t, _, v| {
        t.matmul_nt(v[0], v[1])
    })?;
    push(
        case("linear", vec![randn(&[2, 3, 4]), randn(&[4, 5]), randn(&[5])]),
        &|t, _, v| t.linear(v[0], v[1], Some(v[2])),
    )?;
    let sum_linear_w = randn(&[4, 3]);
    push(case("sum_linear", vec![randn(&[2, 4])]), &move |t, _, v| {
        let w = t.constant(sum_linear_w.clone());
        let y = t.linear(v[0], w, None)?;
        Ok(t.sum(y))
    })?;
    for (name, stride, pad) in [
        ("conv2d_same", 1, Padding::Same),
        ("conv2d_stride2", 2, Padding::Same),
        ("conv2d_valid", 1, Padding::Valid),
    ] {
        push(
            case(name, vec![randn(&[5, 5, 2]), randn(&[3, 3, 2, 3]), randn(&[3])]),
            &move |t, _, v| t.conv2d(v[0], v[1], v[2], stride, pad),
        )?;
    }
    push(
        case("depthwise3x3", vec![randn(&[4, 5, 3]), randn(&[3, 3, 3]), randn(&[3])]),
        &|t, _, v| t.depthwise3x3(v[0], v[1], v[2]),
    )?;
    push(case("gelu", vec![randn(&[3, 4])]), &|t, _, v| Ok(t.gelu(v[0])))?;
    push(case("sigmoid", vec![randn(&[3, 4])]), &|t, _, v| Ok(t.sigmoid(v[0])))?;
    push(case("softmax_last", vec![randn(&[3, 5])]), &|t, _, v| {
        t.softmax(v[0], 1)
    })?;
    push(case("softmax_first", vec![randn(&[3, 5])]), &|t, _, v| {
        t.softmax(v[0], 0)
    })?;
    push(
        case("layer_norm", vec![randn(&[3, 2, 4]), randn(&[4]), randn(&[4])]),
        &|t, _, v| t.layer_norm(v[0], v[1], v[2]),
    )?;
    push(
        case("channel_norm", vec![randn(&[3, 2, 4]), randn(&[4]), randn(&[4])]),
        &|t, _, v| t.channel_norm(v[0], v[1], v[2]),
    )?;
    push(case("mean_axis", vec![randn(&[3, 4, 2])]), &|t, _, v| {
        t.mean_axis(v[0], 1)
    })?;
    push(case("mean", vec![randn(&[3, 4])]), &|t, _, v| Ok(t.mean(v[0])))?;
    push(case("concat", vec![randn(&[2, 3]), randn(&[2, 2])]), &|t, _, v| {
        t.concat(&[v[0], v[1]], 1)
    })?;
    push(case("narrow", vec![randn(&[4, 3])]), &|t, _, v| t.narrow(v[0], 0, 1, 2))?;
    push(case("reshape_permute", vec![randn(&[2, 3, 4])]), &|t, _, v| {
        let r = t.reshape(v[0], &[6, 4])?;
        let r = t.reshape(r, &[2, 3, 4])?;
        t.permute(r, &[2, 0, 1])
    })?;
    push(case("index_select", vec![randn(&[4, 3])]), &|t, _, v| {
        t.index_select(v[0], &[2, 0, 2, 3])
    })?;
    push(case("upsample_bilinear", vec![randn(&[2, 3, 2])]), &|t, _, v| {
        t.upsample_bilinear(v[0], 5, 7)
    })?;
    push(case("cross_entropy", vec![randn(&[2, 2, 3])]), &|t, _, v| {
        t.cross_entropy(v[0], &[0, 2, -1, 1], -1)
    })?;
    Ok(out)
}

fn blocks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut randn = |shape: &[usize]| Tensor::randn(shape, &mut rng);
    let opts = GradCheckOptions {
        eps: 1e-6,
        max_elements_per_input: None,
        seed,
    };
    let mut out = Vec::new();

    for variant in [ConvVariant::Plain, ConvVariant::WithSe, ConvVariant::MbConv] {
        let mut store = ParamStore::new();
        let block = FusedMbConv::new(&mut Init::new(&mut store, seed), "b", 4, variant)?;
        perturb(&mut store, seed);
        let name = format!("fused_mbconv_{variant}");
        let c = Case {
            scope: Scope::Blocks,
            name: &name,
            store: &store,
            inputs: vec![randn(&[4, 4, 4])],
            opts: opts.clone(),
        };
        out.push(c.run(&|t, p, v| block.forward(t, p, v[0]))?);
    }

    let mut store = ParamStore::new();
    let block = TransformerBlock::new(&mut Init::new(&mut store, seed), "t", 8, 2, 2)?;
    perturb(&mut store, seed);
    let c = Case {
        scope: Scope::Blocks,
        name: "transformer_block",
        store: &store,
        inputs: vec![randn(&[4, 4, 8])],
        opts: opts.clone(),
    };
    out.push(c.run(&|t, p, v| block.forward(t, p, v[0]))?);

    let mut store = ParamStore::new();
    let fem = Fem::new(&mut Init::new(&mut store, seed), "fem", 4, 2)?;
    perturb(&mut store, seed);
    let inputs = vec![randn(&[3, 3, 4]), randn(&[3, 3, 4])];
    let c = Case {
        scope: Scope::Blocks,
        name: "fem",
        store: &store,
        inputs,
        opts: opts.clone(),
    };
    out.push(c.run(&|t, p, v| {
        let (h, x) = fem.forward(t, p, v[0], v[1])?;
        t.concat(&[h, x], 2)
    })?);

    let mut store = ParamStore::new();
    let fifm = Fifm::new(&mut Init::new(&mut store, seed), "fifm", 4, 4, 2, 2)?;
    perturb(&mut store, seed);
    let inputs = vec![randn(&[4, 4, 4]), randn(&[4, 4, 4])];
    let c = Case {
        scope: Scope::Blocks,
        name: "fifm",
        store: &store,
        inputs,
        opts: opts.clone(),
    };
    out.push(c.run(&|t, p, v| fifm.forward(t, p, v[0], v[1]))?);

    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut Init::new(&mut store, seed), "dec", &[3, 4, 4, 5], 4, 3)?;
    perturb(&mut store, seed);
    let inputs = vec![
        randn(&[4, 4, 3]),
        randn(&[2, 2, 4]),
        randn(&[2, 2, 4]),
        randn(&[1, 1, 5]),
    ];
    let c = Case {
        scope: Scope::Blocks,
        name: "decoder",
        store: &store,
        inputs,
        opts,
    };
    out.push(c.run(&|t, p, v| dec.forward(t, p, v, (4, 4)))?);
    Ok(out)
}

/// End-to-end on the toy configuration with 16×16 inputs, probing a sample
/// of elements per tensor.
fn model(seed: u64) -> Result<CheckResult> {
    let mut cfg = ModelConfig::toy(8, 2, 4);
    cfg.seed = seed;
    let mut m = Model::build(&cfg)?;
    perturb(&mut m.params, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hsi = Tensor::randn(&[16, 16, 8], &mut rng);
    let x = Tensor::randn(&[16, 16, 2], &mut rng);
    // Some attention weights deep in the network have gradients near 1e-8;
    // a smaller step lets summation roundoff dominate those.
    let opts = GradCheckOptions {
        eps: 1e-3,
        max_elements_per_input: Some(3),
        seed,
    };
    let c = Case {
        scope: Scope::Model,
        name: "model_16x16",
        store: &m.params,
        inputs: vec![hsi, x],
        opts,
    };
    c.run(&|t, p, v| m.forward(t, p, v[0], v[1]))
}

/// Zero biases and unit gains hide whole gradient paths; jitter every parameter.
fn perturb(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    for p in store.iter_mut() {
        let noise = Tensor::randn(p.value.shape(), &mut rng);
        for (v, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *v += 0.1 * n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_suite_passes() {
        let r = run(Scope::Primitive, 0).unwrap();
        for c in &r {
            assert!(c.passed(), "{c}");
        }
        assert!(r
            .iter()
            .any(|c| c.report.op == "sum_linear" && c.report.max_rel_error < 1e-7));
    }

    #[test]
    fn scope_names() {
        for s in Scope::ALL {
            assert_eq!(s.to_string().parse::<Scope>().unwrap(), s);
        }
        assert!("everything".parse::<Scope>().is_err());
    }
}
