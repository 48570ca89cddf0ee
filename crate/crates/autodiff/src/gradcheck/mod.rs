//! Central finite-difference oracle for the reverse sweep, run in `f64`.

use thiserror::Error;

pub mod suite;

use crate::error::AutodiffError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central difference half-step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so near-zero gradients
    /// are compared absolutely.
    pub floor: f64,
    /// Check at most this many coordinates per input (evenly strided).
    pub max_coords: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tol: 1e-3,
            floor: 1e-3,
            max_coords: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("non-finite {what} at input {input}, coordinate {index}")]
    NonFinite { what: &'static str, input: usize, index: usize },
    #[error("function must return a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Single-input convenience wrapper around [`grad_check_many`].
pub fn grad_check<Fun>(f: Fun, point: &Tensor<f64>, tol: f64) -> Result<GradCheckReport, GradCheckError>
where
    Fun: for<'t> Fn(&'t Tape<f64>, &Var<'t, f64>) -> crate::Result<Var<'t, f64>>,
{
    let cfg = GradCheckConfig {
        tol,
        ..GradCheckConfig::default()
    };
    grad_check_many(|tape, vars| f(tape, &vars[0]), std::slice::from_ref(point), &cfg)
}

/// Compares the reverse-mode gradient of scalar `f` with respect to every
/// input against central differences.
pub fn grad_check_many<Fun>(f: Fun, points: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport, GradCheckError>
where
    Fun: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> crate::Result<Var<'t, f64>>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64, GradCheckError> {
        let tape = Tape::<f64>::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        v.item().ok_or_else(|| GradCheckError::NotScalar(v.shape().to_vec()))
    };

    let tape = Tape::<f64>::new();
    let vars: Vec<_> = points.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.wrt(v)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: 0,
        tol: cfg.tol,
    };
    let mut shifted = points.to_vec();
    for (input, point) in points.iter().enumerate() {
        let len = point.len();
        let stride = match cfg.max_coords {
            Some(k) if k > 0 && len > k => len.div_ceil(k),
            _ => 1,
        };
        for index in (0..len).step_by(stride) {
            let a = analytic[input].data()[index];
            if !a.is_finite() {
                return Err(GradCheckError::NonFinite {
                    what: "analytic gradient",
                    input,
                    index,
                });
            }
            let x0 = point.data()[index];
            shifted[input].data_mut()[index] = x0 + cfg.step;
            let up = eval(&shifted)?;
            shifted[input].data_mut()[index] = x0 - cfg.step;
            let down = eval(&shifted)?;
            shifted[input].data_mut()[index] = x0;
            let n = (up - down) / (2.0 * cfg.step);
            if !n.is_finite() {
                return Err(GradCheckError::NonFinite {
                    what: "finite difference",
                    input,
                    index,
                });
            }
            let err = relative_error(a, n, cfg.floor);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((input, index));
                report.analytic_at_worst = a;
                report.numeric_at_worst = n;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradients() {
        let point = Tensor::from_fn(&[4], |i| i as f64);
        let report = grad_check(|tape, _x| Ok(tape.constant(Tensor::scalar(3.0))), &point, 1e-3).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert_eq!(report.analytic_at_worst, 0.0);
        assert_eq!(report.numeric_at_worst, 0.0);
        assert!(report.passed());
    }

    #[test]
    fn reports_non_finite_location() {
        let point = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let err = grad_check(
            |_tape, x| {
                // log of a clamped value: the second coordinate sits on the clamp floor,
                // where the finite difference sees ln(0)
                let y = x.clamp(0.0, 10.0)?;
                let v = y.value().map(|v| v.ln());
                let c = y.tape().constant(v);
                y.mul(&c)?.sum()
            },
            &point,
            1e-3,
        );
        assert!(matches!(err, Err(GradCheckError::NonFinite { input: 0, .. })));
    }
}
