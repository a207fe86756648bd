//! Field-dependency modelling: the label-free dependency loss and the
//! per-instance projected-gradient refinement of `(W, μ)`.
//!
//! Column `k` of the dependency matrix `W` reconstructs field `k`'s embedding
//! from the other fields, with `W[k][k] = −1` so that column `k` of `E·W` is
//! the reconstruction residual. The weights `μ` live on the simplex of mass
//! `λ` and decide how much each residual counts:
//!
//! ```text
//! L(W, μ) = (1/2λ) ⟨μ∘(EW), EW⟩ = (1/λ) Σ_k μ_k · ½‖e_k − Σ_{i≠k} w_ik e_i‖²
//! ```
//!
//! Refinement alternates one projected step on `W` and one on `μ`, the `μ`
//! step always seeing the freshly updated `W`.

mod projection;

pub use projection::{simplex_project, KktCertificate, ProjectionResult};
pub(crate) use projection::compensated_sum;
use projection::project_into;

use thiserror::Error;

use crate::linalg::{Mat, ShapeError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DependencyError {
    #[error("simplex budget lambda must be positive and finite, got {0}")]
    InvalidLambda(f64),
    #[error("non-finite input at index {0}")]
    NonFinite(usize),
    #[error("cannot project an empty vector")]
    Empty,
    #[error("inner step size must be non-negative, got {0}")]
    InvalidStep(f64),
    #[error("dependency matrix diagonal must be -1 (entry {0} is {1})")]
    Diagonal(usize, f64),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Starting point for `μ` in every refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MuInit {
    /// `(λ/m)·1`, feasible for the simplex constraint.
    #[default]
    Uniform,
    /// `1`, projected onto the simplex before the first step.
    Ones,
}

impl MuInit {
    pub fn vector(self, m: usize, lambda: f64) -> Vec<f64> {
        match self {
            MuInit::Uniform => vec![lambda / m as f64; m],
            MuInit::Ones => vec![1.0; m],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MuInit::Uniform => "uniform",
            MuInit::Ones => "ones",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uniform" => Some(MuInit::Uniform),
            "ones" => Some(MuInit::Ones),
            _ => None,
        }
    }
}

/// Hyperparameters of the inner loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub steps: usize,
    pub eta: f64,
    pub lambda: f64,
    pub mu_init: MuInit,
}

impl RefineConfig {
    pub fn new(steps: usize, eta: f64, lambda: f64) -> Self {
        RefineConfig {
            steps,
            eta,
            lambda,
            mu_init: MuInit::Uniform,
        }
    }

    fn validate(&self) -> Result<(), DependencyError> {
        if self.lambda.is_nan() || self.lambda <= 0.0 || !self.lambda.is_finite() {
            return Err(DependencyError::InvalidLambda(self.lambda));
        }
        if self.eta.is_nan() || self.eta < 0.0 || !self.eta.is_finite() {
            return Err(DependencyError::InvalidStep(self.eta));
        }
        Ok(())
    }
}

/// Per-instance `(W, μ)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyState {
    pub w: Mat,
    pub mu: Vec<f64>,
}

impl DependencyState {
    pub fn check(&self, lambda: f64) -> Result<(), DependencyError> {
        check_diagonal(&self.w)?;
        let total = compensated_sum(&self.mu);
        if self.mu.iter().any(|&v| v < 0.0) || (total - lambda).abs() > 1e-12 * lambda.max(1.0) {
            return Err(DependencyError::InvalidLambda(total));
        }
        Ok(())
    }
}

pub(crate) fn check_diagonal(w: &Mat) -> Result<(), DependencyError> {
    if !w.is_square() {
        return Err(ShapeError::new("dependency matrix", w.shape(), w.shape()).into());
    }
    for (i, d) in w.diag().into_iter().enumerate() {
        if d != -1.0 {
            return Err(DependencyError::Diagonal(i, d));
        }
    }
    Ok(())
}

/// `Π_w`: resets the diagonal to `−1`.
pub fn project_diagonal(w: &Mat) -> Mat {
    let mut out = w.clone();
    out.set_diag(-1.0);
    out
}

fn check_shapes(e: &Mat, w: &Mat, mu: &[f64]) -> Result<(), DependencyError> {
    let m = e.cols();
    if w.shape() != (m, m) {
        return Err(ShapeError::new("dependency W", e.shape(), w.shape()).into());
    }
    if mu.len() != m {
        return Err(ShapeError::new("dependency mu", e.shape(), (1, mu.len())).into());
    }
    Ok(())
}

/// Dependency loss in matrix form `(1/2λ)⟨μ∘(EW), EW⟩`.
pub fn dependency_loss(e: &Mat, w: &Mat, mu: &[f64], lambda: f64) -> Result<f64, DependencyError> {
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(DependencyError::InvalidLambda(lambda));
    }
    check_shapes(e, w, mu)?;
    check_diagonal(w)?;
    let ew = e.matmul(w)?;
    let weighted = ew.hadamard_colscale(mu)?;
    Ok(weighted.frobenius_dot(&ew)? / (2.0 * lambda))
}

/// Residual energies `L_k = ½‖e_k − Σ_{i≠k} w_ik e_i‖²`, one per field,
/// computed by explicit summation over fields.
pub fn field_losses(e: &Mat, w: &Mat) -> Result<Vec<f64>, DependencyError> {
    let m = e.cols();
    if w.shape() != (m, m) {
        return Err(ShapeError::new("field_losses", e.shape(), w.shape()).into());
    }
    let k = e.rows();
    let mut out = Vec::with_capacity(m);
    for col in 0..m {
        let mut sq = 0.0;
        for r in 0..k {
            let mut resid = e[(r, col)];
            for i in 0..m {
                if i != col {
                    resid -= w[(i, col)] * e[(r, i)];
                }
            }
            sq += resid * resid;
        }
        out.push(0.5 * sq);
    }
    Ok(out)
}

/// Dependency loss as the weighted sum `(1/λ) Σ_k μ_k L_k`.
pub fn dependency_loss_by_fields(e: &Mat, w: &Mat, mu: &[f64], lambda: f64) -> Result<f64, DependencyError> {
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(DependencyError::InvalidLambda(lambda));
    }
    check_shapes(e, w, mu)?;
    let losses = field_losses(e, w)?;
    Ok(losses.iter().zip(mu).map(|(l, m)| l * m).sum::<f64>() / lambda)
}

/// `(1/λ)·μ∘(EᵀEW)`, the gradient of the loss with respect to `W`,
/// evaluated as `Eᵀ(EW)` so the cost is `O(k m²)`.
pub fn w_gradient(e: &Mat, w: &Mat, mu: &[f64], lambda: f64) -> Result<Mat, DependencyError> {
    check_shapes(e, w, mu)?;
    let ew = e.matmul(w)?;
    let g = e.transpose().matmul(&ew)?;
    Ok(g.hadamard_colscale(mu)?.scale(1.0 / lambda))
}

/// One projected step on `W`: `Π_w(W − (η/λ)·μ∘(EᵀEW))`.
pub fn inner_step_w(e: &Mat, state: &DependencyState, eta: f64, lambda: f64) -> Result<Mat, DependencyError> {
    let g = w_gradient(e, &state.w, &state.mu, lambda)?;
    let stepped = state.w.sub(&g.scale(eta))?;
    Ok(project_diagonal(&stepped))
}

/// One projected step on `μ` using the already-updated `W`:
/// `Π_Δ(μ − (η/2)·((EW)∘(EW))ᵀ1)`.
pub fn inner_step_mu(e: &Mat, w_new: &Mat, mu: &[f64], eta: f64, lambda: f64) -> Result<ProjectionResult, DependencyError> {
    check_shapes(e, w_new, mu)?;
    let ew = e.matmul(w_new)?;
    let m = ew.cols();
    let mut mu_hat = mu.to_vec();
    for r in 0..ew.rows() {
        let row = ew.row(r);
        for c in 0..m {
            mu_hat[c] -= 0.5 * eta * row[c] * row[c];
        }
    }
    simplex_project(&mu_hat, lambda)
}

/// Result of [`refine`].
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub w: Mat,
    pub mu: Vec<f64>,
    /// Dependency loss at steps `0..=T`.
    pub losses: Vec<f64>,
}

/// Runs `T` alternating projected-gradient steps from `(W0, μ^(0))`.
///
/// `W0` is projected first. Computes the same values as chaining
/// [`inner_step_w`] and [`inner_step_mu`] from there. Field embeddings are kept as contiguous length-`k`
/// columns so every inner loop runs over `k`, buffers are reused across
/// steps, and the loss comes from the `EW` product the `μ` step needs anyway.
pub fn refine(e: &Mat, w0: &Mat, cfg: &RefineConfig) -> Result<Refinement, DependencyError> {
    cfg.validate()?;
    let (k, m) = e.shape();
    let mut mu = cfg.mu_init.vector(m, cfg.lambda);
    check_shapes(e, w0, &mu)?;
    if cfg.mu_init == MuInit::Ones && cfg.steps > 0 {
        mu = simplex_project(&mu, cfg.lambda)?.mu;
    }
    let mut w = project_diagonal(w0);
    // Row `i` of `cols` is field `i`'s embedding; row `c` of `recon` is column `c` of `EW`.
    let cols = e.transpose();
    let cols = cols.as_slice();
    let mut recon = vec![0.0; m * k];
    let mut mu_hat = vec![0.0; m];
    let mut order = Vec::with_capacity(m);
    let inv_lambda = 1.0 / cfg.lambda;
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    reconstruct(cols, w.as_slice(), m, k, &mut recon);
    losses.push(weighted_energy(&recon, &mu, k) / (2.0 * cfg.lambda));
    // `recon` always holds `EW` for the current `W`.
    for _ in 0..cfg.steps {
        let wd = w.as_mut_slice();
        for i in 0..m {
            let ei = &cols[i * k..(i + 1) * k];
            for c in 0..m {
                if i == c {
                    wd[i * m + c] = -1.0;
                    continue;
                }
                let g: f64 = ei.iter().zip(&recon[c * k..(c + 1) * k]).fold(0.0, |acc, (a, b)| acc + a * b);
                wd[i * m + c] -= g * mu[c] * inv_lambda * cfg.eta;
            }
        }
        reconstruct(cols, w.as_slice(), m, k, &mut recon);
        mu_hat.copy_from_slice(&mu);
        for (h, col) in mu_hat.iter_mut().zip(recon.chunks_exact(k)) {
            for &v in col {
                *h -= 0.5 * cfg.eta * v * v;
            }
        }
        project_into(&mu_hat, cfg.lambda, &mut order, &mut mu)?;
        losses.push(weighted_energy(&recon, &mu, k) / (2.0 * cfg.lambda));
    }
    Ok(Refinement { w, mu, losses })
}

/// `⟨μ∘(EW), EW⟩` from the column layout of [`reconstruct`].
fn weighted_energy(recon: &[f64], mu: &[f64], k: usize) -> f64 {
    recon
        .chunks_exact(k)
        .zip(mu)
        .map(|(col, &mc)| mc * col.iter().fold(0.0, |acc, v| acc + v * v))
        .sum()
}

/// Column `c` of `EW` as `Σ_i w_ic e_i`, written to `out[c*k..]`.
fn reconstruct(cols: &[f64], w: &[f64], m: usize, k: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..m {
        let dst = &mut out[c * k..(c + 1) * k];
        for i in 0..m {
            let wic = w[i * m + c];
            if wic == 0.0 {
                continue;
            }
            for (d, &x) in dst.iter_mut().zip(&cols[i * k..(i + 1) * k]) {
                *d += x * wic;
            }
        }
    }
}
