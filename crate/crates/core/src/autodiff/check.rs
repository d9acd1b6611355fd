//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Outcome of comparing analytic and numeric gradients for one input.
#[derive(Clone, Debug)]
pub struct InputCheck {
    pub index: usize,
    /// `‖a − n‖ / (‖a‖ + ‖n‖)`, zero when both are zero.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub inputs: Vec<InputCheck>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + n.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Options for [`check_gradients`].
#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    /// Seed for the random projection that turns the output into a scalar.
    pub seed: u64,
    /// Scales the backward of the named op; used as a negative control.
    pub corrupt: Option<(String, f64)>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            eps: FD_EPS,
            seed: 0,
            corrupt: None,
        }
    }
}

/// Compares the tape gradient of `⟨build(inputs), R⟩` against central
/// differences, with `R` a fixed random projection of the output.
pub fn check_gradients<F>(inputs: &[Tensor], build: F, opts: &CheckOptions) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some((op, factor)) = &opts.corrupt {
        tape.corrupt_backward(op, *factor);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let shape = tape.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let proj = Tensor::from_vec(shape.rows, shape.cols, (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let p = tape.constant(proj.clone());
    let prod = tape.mul(out, p)?;
    let loss = tape.sum(prod);
    tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&mut t, &vs)?;
        let vals = t.value(o).data();
        if vals.len() != proj.len() {
            return Err(Error::invalid("gradient check: output shape changed under perturbation"));
        }
        Ok(vals.iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    };

    let mut report = GradCheck::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, num) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + opts.eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - opts.eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *num = (plus - minus) / (2.0 * opts.eps);
        }
        report.inputs.push(InputCheck {
            index: i,
            rel_error: relative_error(&analytic, &numeric),
            analytic_norm: analytic.iter().map(|x| x * x).sum::<f64>().sqrt(),
        });
    }
    Ok(report)
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect())
}
