//! Closed-form Euclidean projection onto the scaled simplex
//! `{μ : μ_k ≥ 0, Σ μ_k = λ}`.

use super::DependencyError;

/// Output of [`simplex_project`] together with the multiplier that certifies it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub mu: Vec<f64>,
    /// Number of strictly positive coordinates chosen by the sort rule.
    pub k: usize,
    /// The equality-constraint multiplier: `μ_k = μ̂_k − β` on the support.
    pub beta: f64,
    /// Indices with `μ̂_k > β`, ascending.
    pub support: Vec<usize>,
}

/// Largest violation of each optimality condition of the projection problem.
///
/// With `α_k = μ_k − μ̂_k + β`: stationarity holds by construction of `α`,
/// so the certificate checks the remaining conditions
/// `α ≥ 0`, `α_k μ_k = 0`, `Σμ = λ`, `μ ≥ 0`, plus `μ_k = μ̂_k − β` on the support.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktCertificate {
    pub support_shift: f64,
    pub dual_feasibility: f64,
    pub complementarity: f64,
    pub budget: f64,
    pub nonnegativity: f64,
}

impl KktCertificate {
    pub fn max_violation(&self) -> f64 {
        self.support_shift
            .max(self.dual_feasibility)
            .max(self.complementarity)
            .max(self.budget)
            .max(self.nonnegativity)
    }
}

impl ProjectionResult {
    pub fn certificate(&self, mu_hat: &[f64], lambda: f64) -> KktCertificate {
        let mut cert = KktCertificate {
            support_shift: 0.0,
            dual_feasibility: 0.0,
            complementarity: 0.0,
            budget: 0.0,
            nonnegativity: 0.0,
        };
        let mut in_support = vec![false; mu_hat.len()];
        for &j in &self.support {
            in_support[j] = true;
        }
        for (j, (&hat, &mu)) in mu_hat.iter().zip(&self.mu).enumerate() {
            let alpha = mu - hat + self.beta;
            if in_support[j] {
                cert.support_shift = cert.support_shift.max((mu - (hat - self.beta)).abs());
            }
            cert.dual_feasibility = cert.dual_feasibility.max(-alpha);
            cert.complementarity = cert.complementarity.max((alpha * mu).abs());
            cert.nonnegativity = cert.nonnegativity.max(-mu);
        }
        cert.budget = (compensated_sum(&self.mu) - lambda).abs();
        cert
    }
}

/// Neumaier-compensated summation.
pub(crate) fn compensated_sum(values: &[f64]) -> f64 {
    let mut acc = CompensatedSum::default();
    for &v in values {
        acc.add(v);
    }
    acc.value()
}

#[derive(Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Projects `mu_hat` onto the simplex of total mass `lambda`.
///
/// Sorts descending, takes `K` as the largest `i` with
/// `μ̂_(i) − (Σ_{k≤i} μ̂_(k) − λ)/i > 0`, sets `β = (Σ_{k≤K} μ̂_(k) − λ)/K`
/// and clips `μ̂ − β` at zero. Cost is one `O(m log m)` sort.
pub fn simplex_project(mu_hat: &[f64], lambda: f64) -> Result<ProjectionResult, DependencyError> {
    let mut order = Vec::new();
    let mut mu = vec![0.0; mu_hat.len()];
    let (k, beta) = project_into(mu_hat, lambda, &mut order, &mut mu)?;
    let support = (0..mu_hat.len()).filter(|&j| mu_hat[j] > beta).collect();
    Ok(ProjectionResult { mu, k, beta, support })
}

/// [`simplex_project`] writing into `out` and reusing `order` as sort
/// scratch. Returns `(K, β)`.
pub(crate) fn project_into(
    mu_hat: &[f64],
    lambda: f64,
    order: &mut Vec<usize>,
    out: &mut [f64],
) -> Result<(usize, f64), DependencyError> {
    if lambda.is_nan() || lambda <= 0.0 || !lambda.is_finite() {
        return Err(DependencyError::InvalidLambda(lambda));
    }
    if mu_hat.is_empty() {
        return Err(DependencyError::Empty);
    }
    if let Some(bad) = mu_hat.iter().position(|v| !v.is_finite()) {
        return Err(DependencyError::NonFinite(bad));
    }
    debug_assert_eq!(out.len(), mu_hat.len());

    order.clear();
    order.extend(0..mu_hat.len());
    // Stable: ties keep input order, and tied values get identical outputs anyway.
    order.sort_by(|&a, &b| mu_hat[b].total_cmp(&mu_hat[a]));

    let mut prefix = CompensatedSum::default();
    let mut k = 0;
    let mut prefix_at_k = 0.0;
    for (i, &j) in order.iter().enumerate() {
        prefix.add(mu_hat[j]);
        let rank = (i + 1) as f64;
        let p = prefix.value();
        if mu_hat[j] - (p - lambda) / rank > 0.0 {
            k = i + 1;
            prefix_at_k = p;
        }
    }
    // k ≥ 1 always: for i = 1 the test reduces to λ > 0.
    let beta = (prefix_at_k - lambda) / k as f64;
    for (o, &hat) in out.iter_mut().zip(mu_hat) {
        *o = if hat > beta { hat - beta } else { 0.0 };
    }
    Ok((k, beta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn feasible_point_is_fixed() {
        let r = simplex_project(&[0.6, 0.4], 1.0).unwrap();
        assert!(close(&r.mu, &[0.6, 0.4], 1e-15));
        assert_eq!(r.k, 2);
        assert!(r.beta.abs() < 1e-15);
    }

    #[test]
    fn clips_to_vertex() {
        let r = simplex_project(&[2.0, 0.0], 1.0).unwrap();
        assert_eq!(r.mu, vec![1.0, 0.0]);
        assert_eq!(r.k, 1);
        assert_eq!(r.beta, 1.0);
        assert_eq!(r.support, vec![0]);
    }

    #[test]
    fn three_way_interior() {
        // sum = 0.6, β = (0.6 − 1)/3 = −0.1333…
        let r = simplex_project(&[0.5, 0.2, -0.1], 1.0).unwrap();
        assert_eq!(r.k, 3);
        assert!((r.beta + 0.4 / 3.0).abs() < 1e-15);
        assert!(close(&r.mu, &[0.5 + 0.4 / 3.0, 0.2 + 0.4 / 3.0, -0.1 + 0.4 / 3.0], 1e-15));
        assert!((r.mu.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn certificate_holds() {
        let hat = [0.3, -1.2, 2.5, 0.9, 0.9];
        for lambda in [0.01, 1.0, 100.0] {
            let r = simplex_project(&hat, lambda).unwrap();
            let c = r.certificate(&hat, lambda);
            assert!(c.max_violation() < 1e-12, "{lambda} {c:?}");
            assert_eq!(r.k, r.support.len());
        }
    }

    #[test]
    fn ties_are_order_independent() {
        let a = simplex_project(&[0.7, 0.7, 0.1, 0.7], 1.0).unwrap();
        let b = simplex_project(&[0.7, 0.1, 0.7, 0.7], 1.0).unwrap();
        assert_eq!(a.mu[0], b.mu[0]);
        assert_eq!(a.mu[1], b.mu[2]);
        assert_eq!(a.mu[2], b.mu[1]);
        assert_eq!(a.beta, b.beta);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(simplex_project(&[1.0], 0.0), Err(DependencyError::InvalidLambda(_))));
        assert!(matches!(simplex_project(&[1.0], -1.0), Err(DependencyError::InvalidLambda(_))));
        assert!(matches!(simplex_project(&[1.0, f64::NAN], 1.0), Err(DependencyError::NonFinite(1))));
        assert!(matches!(simplex_project(&[], 1.0), Err(DependencyError::Empty)));
    }
}
