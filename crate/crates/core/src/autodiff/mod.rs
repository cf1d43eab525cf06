//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles together with
//! the forward value. [`Tape::backward`] walks the record once in reverse and
//! returns gradients for the trainable leaves. Only the primitives needed by
//! the traffic model and the policy networks are provided.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Denominators below this value make [`Tape::div_guarded`] return zero.
pub const DIV_GUARD: f64 = 1e-9;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: domain violation ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("tape is not in topological order at node {0}")]
    Cycle(usize),
}

/// Value of the SoftExponential activation for a fixed `alpha`.
///
/// `alpha < 0` is only defined while `1 - alpha * (x + alpha) > 0`.
pub fn soft_exponential(alpha: f64, x: f64) -> Result<f64, AdError> {
    if !alpha.is_finite() {
        return Err(AdError::Domain {
            op: "soft_exponential",
            detail: format!("alpha = {alpha}"),
        });
    }
    if alpha == 0.0 {
        Ok(x)
    } else if alpha > 0.0 {
        Ok((alpha * x).exp_m1() / alpha + alpha)
    } else {
        let arg = -alpha * (x + alpha);
        if 1.0 + arg <= 0.0 {
            return Err(AdError::Domain {
                op: "soft_exponential",
                detail: format!("log argument {} <= 0 (alpha = {alpha}, x = {x})", 1.0 + arg),
            });
        }
        Ok(-arg.ln_1p() / alpha)
    }
}

/// Partial derivatives `(d/dx, d/dalpha)` of [`soft_exponential`].
pub(crate) fn soft_exponential_grad(alpha: f64, x: f64) -> (f64, f64) {
    // near alpha = 0 both branches share the Taylor expansion
    // f = x + alpha * (1 + x^2 / 2) + O(alpha^2)
    if alpha.abs() * (1.0 + x.abs()) < 1e-4 {
        let dx = 1.0 + alpha * x;
        let da = 1.0 + 0.5 * x * x + alpha * x * x * x / 3.0;
        return (dx, da);
    }
    if alpha > 0.0 {
        let z = alpha * x;
        let ez = z.exp();
        let dx = ez;
        let da = (z * ez - z.exp_m1()) / (alpha * alpha) + 1.0;
        (dx, da)
    } else {
        let denom = 1.0 - alpha * (x + alpha);
        let log = (-alpha * (x + alpha)).ln_1p();
        let dx = 1.0 / denom;
        let da = (alpha * (x + 2.0 * alpha) / denom + log) / (alpha * alpha);
        (dx, da)
    }
}
