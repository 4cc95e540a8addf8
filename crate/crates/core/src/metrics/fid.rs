use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Shrinkage towards a scaled identity used when a feature set has no more
/// samples than dimensions.
pub const FID_SHRINKAGE: f64 = 0.1;

fn moments(features: &[Vec<f64>], what: &str) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    let d = features.first().map(Vec::len).unwrap_or(0);
    if n < 2 || d == 0 {
        return Err(Error::Data(format!(
            "{what}: need at least 2 non-empty feature vectors, got {n}"
        )));
    }
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Data(format!("{what}: feature vectors differ in length")));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{what}: non-finite feature value")));
    }
    let mut mean = DVector::zeros(d);
    for f in features {
        mean += DVector::from_column_slice(f);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let c = DVector::from_column_slice(f) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    if n <= d {
        let scale = cov.trace() / d as f64;
        cov = cov * (1.0 - FID_SHRINKAGE) + DMatrix::identity(d, d) * (FID_SHRINKAGE * scale);
    }
    Ok((mean, cov))
}

/// Square root of a symmetric positive semi-definite matrix; eigenvalues
/// below zero (round-off) are clipped.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians with the given moments.
pub fn frechet_distance(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let diff = mu_a - mu_b;
    let sa = sqrtm_psd(cov_a);
    let inner = &sa * cov_b * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    (diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt).max(0.0)
}

/// FID between two feature sets (rows are samples).
pub fn fid(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = moments(features_a, "first feature set")?;
    let (mb, cb) = moments(features_b, "second feature set")?;
    if ma.len() != mb.len() {
        return Err(Error::Data(format!(
            "feature dimensions differ: {} vs {}",
            ma.len(),
            mb.len()
        )));
    }
    Ok(frechet_distance(&ma, &ca, &mb, &cb))
}
