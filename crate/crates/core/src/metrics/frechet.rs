//! Fréchet distance between Gaussians fitted to feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::MetricError;

/// Ridge added to both covariances when either is close to singular.
pub const RIDGE: f64 = 1e-6;
const SYMMETRY_TOL: f64 = 1e-9;
const PSD_TOL: f64 = 1e-8;
const SINGULAR_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionMoments {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl DistributionMoments {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self, MetricError> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(MetricError::DimensionMismatch { left: d, right: covariance.nrows() });
        }
        let scale = covariance.amax().max(1.0);
        if (&covariance - covariance.transpose()).amax() > SYMMETRY_TOL * scale {
            return Err(MetricError::NotSymmetric);
        }
        Ok(DistributionMoments { mean, covariance })
    }

    /// 1-D convenience constructor from mean and variance.
    pub fn scalar(mean: f64, variance: f64) -> Self {
        DistributionMoments { mean: DVector::from_element(1, mean), covariance: DMatrix::from_element(1, 1, variance) }
    }

    /// Sample mean and unbiased covariance; a single sample has zero covariance.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self, MetricError> {
        let first = features.first().ok_or(MetricError::EmptySample)?;
        let d = first.len();
        if d == 0 {
            return Err(MetricError::EmptySequence("feature vector"));
        }
        if let Some(bad) = features.iter().find(|f| f.len() != d) {
            return Err(MetricError::DimensionMismatch { left: d, right: bad.len() });
        }
        let n = features.len();
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        let cov = centered.transpose() * &centered / denom;
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(DistributionMoments { mean, covariance: cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new((m + m.transpose()) * 0.5)
}

fn check_psd(m: &DMatrix<f64>) -> Result<(f64, f64), MetricError> {
    let e = eigen(m);
    let min = e.eigenvalues.min();
    let max = e.eigenvalues.amax();
    if min < -PSD_TOL * max.max(1.0) {
        return Err(MetricError::NotPsd { min_eigenvalue: min });
    }
    Ok((min, max))
}

/// Principal square root of a PSD matrix; negative eigenvalues clamp to 0.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = eigen(m);
    let roots = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2·(Σa^½ Σb Σa^½)^½)`
pub fn frechet_distance(a: &DistributionMoments, b: &DistributionMoments) -> Result<f64, MetricError> {
    if a.dim() != b.dim() {
        return Err(MetricError::DimensionMismatch { left: a.dim(), right: b.dim() });
    }
    let d = a.dim();
    let (min_a, max_a) = check_psd(&a.covariance)?;
    let (min_b, max_b) = check_psd(&b.covariance)?;
    let near_singular = |min: f64, max: f64| min <= SINGULAR_TOL * max.max(1.0);
    let (sa, sb) = if near_singular(min_a, max_a) || near_singular(min_b, max_b) {
        let ridge = DMatrix::<f64>::identity(d, d) * RIDGE;
        (&a.covariance + &ridge, &b.covariance + &ridge)
    } else {
        (a.covariance.clone(), b.covariance.clone())
    };

    let root_a = psd_sqrt(&sa);
    let inner = &root_a * &sb * &root_a;
    let tr_cross: f64 = eigen(&inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = &a.mean - &b.mean;
    let value = diff.dot(&diff) + sa.trace() + sb.trace() - 2.0 * tr_cross;
    // rounding can push identical distributions a hair below zero
    Ok(value.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_1d() {
        let d = frechet_distance(&DistributionMoments::scalar(0.0, 1.0), &DistributionMoments::scalar(1.0, 1.0)).unwrap();
        assert!((d - 1.0).abs() < 1e-9);
        let d = frechet_distance(&DistributionMoments::scalar(0.0, 1.0), &DistributionMoments::scalar(0.0, 4.0)).unwrap();
        assert!((d - 1.0).abs() < 1e-9);
    }

    #[test]
    fn self_distance_is_zero() {
        let feats: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i) as f64 * 0.1, (i as f64).sin()]).collect();
        let m = DistributionMoments::from_features(&feats).unwrap();
        assert!(frechet_distance(&m, &m).unwrap() <= 1e-6);
    }

    #[test]
    fn singular_covariance_gets_ridge() {
        // two samples in 3-D: rank-one covariance
        let m = DistributionMoments::from_features(&[vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 3.0]]).unwrap();
        let n = DistributionMoments::from_features(&[vec![1.0, 0.0, 0.0], vec![1.0, 2.0, 5.0]]).unwrap();
        let d = frechet_distance(&m, &n).unwrap();
        assert!(d.is_finite() && d > 0.0);
        assert!(frechet_distance(&m, &m).unwrap() <= 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = DistributionMoments::scalar(0.0, 1.0);
        let b = DistributionMoments::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(frechet_distance(&a, &b), Err(MetricError::DimensionMismatch { .. })));
        let neg = DistributionMoments::scalar(0.0, -1.0);
        assert!(matches!(frechet_distance(&a, &neg), Err(MetricError::NotPsd { .. })));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(DistributionMoments::new(DVector::zeros(2), asym).is_err());
        assert!(DistributionMoments::from_features(&[]).is_err());
    }
}
