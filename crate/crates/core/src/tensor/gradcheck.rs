use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Floor on the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Probe at most this many elements per input, sampled without replacement.
    pub max_elements_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-6,
            max_elements_per_input: None,
            seed: 0,
        }
    }
}

/// Location of the largest discrepancy.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckWorst {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub elements: usize,
    pub worst: Option<GradCheckWorst>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel error {:.3e} over {} elements",
            self.op, self.max_rel_error, self.elements
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                " (input {} element {}: analytic {:.6e}, numeric {:.6e})",
                w.input, w.element, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

fn eval(f: &impl Fn(&mut Tape, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Compare reverse-mode gradients of a scalar function against central
/// finite differences, element by element.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(op: &str, inputs: &[Tensor], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if opts.eps <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "grad_check eps must be positive, got {}",
            opts.eps
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            tape.shape(out)
        )));
    }
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        op: op.to_string(),
        max_rel_error: 0.0,
        elements: 0,
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let zeros;
        let analytic = match grads.get(*v) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(inputs[i].shape());
                &zeros
            }
        };
        let mut elems: Vec<usize> = match opts.max_elements_per_input {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        elems.sort_unstable();
        for e in elems {
            let orig = inputs[i].data()[e];
            probe[i].data_mut()[e] = orig + opts.eps;
            let plus = eval(&f, &probe)?;
            probe[i].data_mut()[e] = orig - opts.eps;
            let minus = eval(&f, &probe)?;
            probe[i].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.data()[e];
            let denom = a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            let rel = (a - numeric).abs() / denom;
            report.elements += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(GradCheckWorst {
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
