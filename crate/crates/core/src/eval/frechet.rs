//! Fréchet distance between Gaussian fits of two vector sets.
//!
//! `d^2 = |mu_a - mu_b|^2 + tr(S_a) + tr(S_b) - 2 tr((S_a S_b)^(1/2))`
//!
//! Two routes compute the trace of the matrix square root:
//!
//! - eigen: `tr sqrt(S_a^(1/2) S_b S_a^(1/2))` from symmetric eigendecompositions,
//!   used for low dimensions;
//! - Gram: with `S_a = A^T A`, `S_b = B^T B` (centered rows scaled by
//!   `1/sqrt(n-1)`), the non-zero eigenvalues of `S_a S_b` are the squared
//!   singular values of `A B^T`, so the trace is its nuclear norm. Exact and
//!   cheap when samples are far fewer than dimensions.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions above which the Gram route is used.
pub const EIGEN_ROUTE_MAX_DIM: usize = 512;
pub const COVARIANCE_REGULARIZER: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrechetRoute {
    Eigen,
    Gram,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrechetResult {
    /// Squared Fréchet distance.
    pub distance_sq: f64,
    /// Covariances got `1e-6 I` added because a set had fewer than dim + 1 rows.
    pub regularized: bool,
    pub route: FrechetRoute,
}

fn check(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::shape(format!("vector sizes differ: {} vs {}", a.ncols(), b.ncols())));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::invalid("Fréchet distance needs non-empty sets"));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Fréchet input".into()));
    }
    Ok(())
}

fn mean(x: ArrayView2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).expect("non-empty")
}

/// Centered rows scaled so that `A^T A` is the sample covariance (zero for a
/// single row).
fn scaled_centered(x: ArrayView2<f64>) -> Array2<f64> {
    let mu = mean(x);
    let n = x.nrows();
    let scale = if n > 1 { 1.0 / ((n - 1) as f64).sqrt() } else { 0.0 };
    (&x - &mu.insert_axis(Axis(0))) * scale
}

fn to_dmatrix(x: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_row_iterator(x.nrows(), x.ncols(), x.iter().copied())
}

fn mean_term(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    (&mean(a) - &mean(b)).iter().map(|d| d * d).sum()
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Eigen route; regularizes when either set has fewer than dim + 1 rows.
pub fn frechet_eigen(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<FrechetResult> {
    check(a, b)?;
    let dim = a.ncols();
    let regularized = a.nrows() < dim + 1 || b.nrows() < dim + 1;
    let ca = scaled_centered(a);
    let cb = scaled_centered(b);
    let mut sa = to_dmatrix(&ca.t().dot(&ca));
    let mut sb = to_dmatrix(&cb.t().dot(&cb));
    if regularized {
        for i in 0..dim {
            sa[(i, i)] += COVARIANCE_REGULARIZER;
            sb[(i, i)] += COVARIANCE_REGULARIZER;
        }
    }
    let root_a = sym_sqrt(&sa);
    let mut inner = &root_a * &sb * &root_a;
    inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = inner.symmetric_eigen().eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d2 = mean_term(a, b) + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    Ok(FrechetResult { distance_sq: d2.max(0.0), regularized, route: FrechetRoute::Eigen })
}

/// Gram route, exact without regularization.
pub fn frechet_gram(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<FrechetResult> {
    check(a, b)?;
    let ca = scaled_centered(a);
    let cb = scaled_centered(b);
    let tr_a: f64 = ca.iter().map(|v| v * v).sum();
    let tr_b: f64 = cb.iter().map(|v| v * v).sum();
    let cross = to_dmatrix(&ca.dot(&cb.t()));
    let nuclear: f64 = cross.singular_values().iter().sum();
    let d2 = mean_term(a, b) + tr_a + tr_b - 2.0 * nuclear;
    Ok(FrechetResult { distance_sq: d2.max(0.0), regularized: false, route: FrechetRoute::Gram })
}

/// Squared Fréchet distance between Gaussian fits of the rows of `a` and `b`.
pub fn frechet_gaussian(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<FrechetResult> {
    if a.ncols() > EIGEN_ROUTE_MAX_DIM {
        frechet_gram(a, b)
    } else {
        frechet_eigen(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(n: usize, d: usize, seed: u64, shift: f64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |(_, j)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * (1.0 + 0.3 * j as f64) + shift
        })
    }

    #[test]
    fn identical_sets_are_zero() {
        let a = random(50, 4, 1, 0.0);
        assert!(frechet_gaussian(a.view(), a.view()).unwrap().distance_sq < 1e-8);
        assert!(frechet_gram(a.view(), a.view()).unwrap().distance_sq < 1e-8);
    }

    #[test]
    fn one_dimensional_closed_form() {
        // samples {-1, 1} have mean 0 and sample variance 2; shift by 1
        let a = Array2::from_shape_vec((2, 1), vec![-1.0, 1.0]).unwrap();
        let b = Array2::from_shape_vec((2, 1), vec![0.0, 2.0]).unwrap();
        let r = frechet_gaussian(a.view(), b.view()).unwrap();
        assert!(!r.regularized);
        assert!((r.distance_sq - 1.0).abs() < 1e-12);
    }

    #[test]
    fn routes_agree() {
        for (n, d) in [(40, 5), (12, 30), (200, 8)] {
            let a = random(n, d, 2, 0.0);
            let b = random(n + 3, d, 3, 0.4);
            let e = frechet_eigen(a.view(), b.view()).unwrap();
            let g = frechet_gram(a.view(), b.view()).unwrap();
            let tol = if e.regularized { 1e-4 } else { 1e-8 } * (1.0 + g.distance_sq);
            assert!((e.distance_sq - g.distance_sq).abs() < tol, "{n}x{d}: {} vs {}", e.distance_sq, g.distance_sq);
        }
    }

    #[test]
    fn shape_mismatch() {
        let a = random(5, 3, 1, 0.0);
        let b = random(5, 4, 1, 0.0);
        assert!(frechet_gaussian(a.view(), b.view()).is_err());
    }
}
