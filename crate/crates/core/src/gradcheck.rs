//! Central-difference verification of taped gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// When set, at most this many coordinates of each input are probed,
    /// chosen with `seed`.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

/// Worst coordinate found by a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Checks the gradient of a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        GradCheckOptions {
            step,
            ..Default::default()
        },
    )
}

/// Checks the gradient of a scalar function of several tensors. Every input
/// is registered as a trainable leaf; a function that ignores its inputs has
/// an analytic gradient of zero.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if opts.step.is_nan() || opts.step <= 0.0 {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = match tape.backward(loss) {
        Ok(g) => Some(g),
        Err(Error::DetachedGraph) => None,
        Err(e) => return Err(e),
    };

    let eval = |point: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = point
            .iter()
            .map(|t| tape.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut point = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .as_ref()
            .map(|g| g.get_or_zeros(vars[k], input))
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(limit) if limit < input.numel() => {
                let mut c = sample(&mut rng, input.numel(), limit).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.numel()).collect(),
        };
        for c in coords {
            let orig = input.data()[c];
            point[k].data_mut()[c] = orig + opts.step;
            let plus = eval(&point)?;
            point[k].data_mut()[c] = orig - opts.step;
            let minus = eval(&point)?;
            point[k].data_mut()[c] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite("grad_check"));
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[c];
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.coords_checked == 1 {
                report.max_rel_error = err;
                report.worst_input = k;
                report.worst_coord = c;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
