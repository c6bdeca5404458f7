//! Central finite-difference checks for analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so that gradients that are zero
/// up to rounding do not blow up the ratio.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares the gradient of `f` at `inputs` with central differences.
///
/// `f` receives a fresh graph and one leaf per input and must return a scalar.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = f(&mut g, &leaves)?;
        Ok(g.value(out).item().unwrap_or(f64::NAN))
    };

    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&mut g, &leaves)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut xs = inputs.to_vec();
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf).expect("leaf gradient").data().to_vec();
        for i in 0..xs[k].numel() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + h;
            let plus = eval(&xs)?;
            xs[k].data_mut()[i] = orig - h;
            let minus = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = (k, i);
                report.analytic = analytic[i];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Scalar probe `sum(w * y)` used to turn any output into a loss.
pub fn weighted_probe(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(y, w)?;
    Ok(g.sum_all(prod))
}
