//! Gauss rules from three-term recurrences (Golub-Welsch).

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Nodes and weights of a Gauss rule.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Builds the `n`-point Gauss rule of the measure whose monic recurrence
/// coefficients are `alpha[k]`, `beta[k]` (`beta[0]` is the total mass).
pub fn gauss_from_recurrence(alpha: &[f64], beta: &[f64], n: usize) -> Result<GaussRule> {
    if n == 0 || alpha.len() < n || beta.len() < n {
        return Err(Error::Mismatch(format!(
            "need {n} recurrence coefficients, have {} / {}",
            alpha.len(),
            beta.len()
        )));
    }
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        jacobi[(k, k)] = alpha[k];
        if k + 1 < n {
            let off = beta[k + 1].sqrt();
            jacobi[(k, k + 1)] = off;
            jacobi[(k + 1, k)] = off;
        }
    }
    let eig = SymmetricEigen::try_new(jacobi, f64::EPSILON, 10_000).ok_or_else(|| Error::Eigensolver("Golub-Welsch did not converge".into()))?;
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], beta[0] * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(GaussRule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    })
}

/// Monic Legendre recurrence on [-1, 1] with weight 1 (total mass 2).
pub fn legendre_recurrence(n: usize) -> (Vec<f64>, Vec<f64>) {
    let alpha = vec![0.0; n];
    let beta = (0..n)
        .map(|k| {
            if k == 0 {
                2.0
            } else {
                let k = k as f64;
                k * k / (4.0 * k * k - 1.0)
            }
        })
        .collect();
    (alpha, beta)
}

/// `n`-point Gauss-Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> Result<GaussRule> {
    let (a, b) = legendre_recurrence(n);
    gauss_from_recurrence(&a, &b, n)
}

/// Gauss-Legendre rule mapped to `[lo, hi]`.
pub fn gauss_legendre_on(n: usize, lo: f64, hi: f64) -> Result<GaussRule> {
    let base = gauss_legendre(n)?;
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    Ok(GaussRule {
        nodes: base.nodes.iter().map(|x| mid + half * x).collect(),
        weights: base.weights.iter().map(|w| half * w).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_polynomials_exactly() {
        let rule = gauss_legendre(5).unwrap();
        assert!((rule.weights.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        // degree 9 is the limit for 5 points
        let exact = 2.0 / 9.0;
        assert!((rule.integrate(|x| x.powi(8)) - exact).abs() < 1e-14);
        assert!(rule.integrate(|x| x.powi(9)).abs() < 1e-14);
    }

    #[test]
    fn mapped_rule_has_interval_length() {
        let rule = gauss_legendre_on(4, -3.0, 1.0).unwrap();
        assert!((rule.weights.iter().sum::<f64>() - 4.0).abs() < 1e-13);
        assert!(rule.nodes.iter().all(|&x| (-3.0..=1.0).contains(&x)));
    }
}
