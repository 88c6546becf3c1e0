//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records one forward episode. Leaves are either constants,
//! free variables, or bound model [`Param`]s; every op appends a node and
//! `backward` sweeps the nodes once in reverse creation order.
//!
//! ```
//! use retarget_core::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.variable(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod graph;
pub(crate) mod kinematics;
mod tensor;

pub use graph::{Graph, Param, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Worst relative error per input tensor.
    pub max_rel_error: Vec<f64>,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.iter().all(|e| *e < self.tol)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Errors below this magnitude are compared absolutely rather than relatively.
const GRADCHECK_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, 1e-3)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Compares analytic gradients of a scalar function against central
/// differences with step `h`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(Error::arg("gradcheck needs a scalar function"));
        }
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut perturbed = inputs.to_vec();
    let mut report = GradcheckReport {
        max_rel_error: Vec::with_capacity(inputs.len()),
        tol,
    };
    for (i, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut worst: f64 = 0.0;
        for k in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[k];
            perturbed[i].data_mut()[k] = x0 + h;
            let fp = eval(&perturbed)?;
            perturbed[i].data_mut()[k] = x0 - h;
            let fm = eval(&perturbed)?;
            perturbed[i].data_mut()[k] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(analytic[k], numeric));
        }
        report.max_rel_error.push(worst);
    }
    Ok(report)
}
