//! Dense kernels and a reverse-mode tape over batched matrices.
//!
//! [`Mat`] is the plain 2-D container; [`Tensor`] is a stack of equally shaped
//! matrices used by the [`Tape`] so one recorded op covers a whole batch of
//! per-instance matrices.

mod mat;
mod tape;

pub use mat::{bilinear, sigmoid, Mat};
pub(crate) use mat::bilinear_raw;
pub(crate) use tape::bce_with_logit;
pub use tape::{Gradients, Tape, TapeError, Tensor, Var};

use thiserror::Error;

/// Operand shapes that a kernel cannot combine.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{op}: incompatible shapes {}x{} and {}x{}", .lhs.0, .lhs.1, .rhs.0, .rhs.1)]
pub struct ShapeError {
    pub op: &'static str,
    pub lhs: (usize, usize),
    pub rhs: (usize, usize),
}

impl ShapeError {
    pub fn new(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        ShapeError { op, lhs, rhs }
    }
}

/// Generalized Jacobian of the Euclidean simplex projection at a point whose
/// active set is `support`, applied to an upstream gradient.
///
/// On the support the map is `I - (1/K)·11ᵀ`; off the support it is zero.
pub fn backward_simplex_projection(upstream: &[f64], support: &[usize]) -> Result<Vec<f64>, TapeError> {
    if support.is_empty() {
        return Err(TapeError::EmptySupport);
    }
    let mut out = vec![0.0; upstream.len()];
    let mean = support.iter().map(|&j| upstream[j]).sum::<f64>() / support.len() as f64;
    for &j in support {
        out[j] = upstream[j] - mean;
    }
    Ok(out)
}

/// Backward of the projection that pins a square matrix's diagonal to a
/// constant: off-diagonal entries pass through, the diagonal receives zero.
pub fn backward_diag_projection(upstream: &Mat) -> Result<Mat, ShapeError> {
    if !upstream.is_square() {
        return Err(ShapeError::new("diag_projection", upstream.shape(), upstream.shape()));
    }
    let mut out = upstream.clone();
    out.set_diag(0.0);
    Ok(out)
}
