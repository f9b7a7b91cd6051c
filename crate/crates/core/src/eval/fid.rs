use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FID_RIDGE: f64 = 1e-6;
const SINGULAR_EIGEN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidResult {
    pub value: f64,
    /// Set when a covariance was singular and `FID_RIDGE * I` was added to both.
    pub ridge: Option<f64>,
}

/// Sample mean and unbiased covariance of row vectors.
pub fn mean_and_covariance(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::invalid("features", "need at least two samples per set"));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::invalid("features", "ragged or empty feature vectors"));
    }
    let m = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| m.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn min_eigen(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Frechet distance between Gaussian fits of two feature sets:
/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`.
pub fn fid(generated: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<FidResult> {
    let (m1, mut s1) = mean_and_covariance(generated)?;
    let (m2, mut s2) = mean_and_covariance(reference)?;
    if m1.len() != m2.len() {
        return Err(Error::shape("feature dimension", m1.len(), m2.len()));
    }
    let ridge = if min_eigen(&s1) < SINGULAR_EIGEN || min_eigen(&s2) < SINGULAR_EIGEN {
        let eye = DMatrix::<f64>::identity(m1.len(), m1.len()) * FID_RIDGE;
        s1 += &eye;
        s2 += &eye;
        log::info!("singular covariance; added ridge {FID_RIDGE}");
        Some(FID_RIDGE)
    } else {
        None
    };
    let r1 = sym_sqrt(&s1);
    let inner = &r1 * &s2 * &r1;
    let cross = SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum::<f64>();
    let diff = &m1 - &m2;
    let value = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * cross;
    Ok(FidResult {
        value: value.max(0.0),
        ridge,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_set(seed: u64, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|j| Distribution::<f64>::sample(&StandardNormal, &mut rng) * (1.0 + j as f64 * 0.3) + shift).collect())
            .collect()
    }

    /// Trace of sqrt(S1 S2) by the Denman-Beavers iteration.
    fn trace_sqrt_product(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> f64 {
        let mut y = s1 * s2;
        let mut z = DMatrix::<f64>::identity(y.nrows(), y.ncols());
        for _ in 0..100 {
            let yi = y.clone().try_inverse().unwrap();
            let zi = z.clone().try_inverse().unwrap();
            let ny = (&y + zi) * 0.5;
            z = (&z + yi) * 0.5;
            y = ny;
        }
        y.trace()
    }

    #[test]
    fn identical_sets_are_zero() {
        let a = gaussian_set(1, 40, 4, 0.0);
        let r = fid(&a, &a).unwrap();
        assert!(r.value.abs() < 1e-6);
        assert_eq!(r.ridge, None);
    }

    #[test]
    fn one_dimensional_shift_is_mean_squared() {
        let a = gaussian_set(2, 200, 1, 0.0);
        for mu in [0.5, 1.0, 3.0] {
            let b: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] + mu]).collect();
            assert!((fid(&a, &b).unwrap().value - mu * mu).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_closed_form_oracle_and_is_symmetric() {
        let a = gaussian_set(3, 30, 3, 0.0);
        let b = gaussian_set(4, 25, 3, 0.7);
        let (m1, s1) = mean_and_covariance(&a).unwrap();
        let (m2, s2) = mean_and_covariance(&b).unwrap();
        let oracle = (&m1 - &m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * trace_sqrt_product(&s1, &s2);
        let got = fid(&a, &b).unwrap().value;
        assert!((got - oracle).abs() < 1e-8, "{got} vs {oracle}");
        assert!((got - fid(&b, &a).unwrap().value).abs() < 1e-8);
    }

    #[test]
    fn singular_covariance_gets_ridge() {
        // second coordinate is constant
        let a: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 1.0]).collect();
        let b: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 2.0, 1.0]).collect();
        let r = fid(&a, &b).unwrap();
        assert_eq!(r.ridge, Some(FID_RIDGE));
        assert!(r.value.is_finite());
        assert!(fid(&a[..1], &b).is_err());
    }
}
