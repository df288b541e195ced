//! Fréchet distance between Gaussian fits of two feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub vectors: Vec<Vec<f64>>,
    pub extractor_id: String,
}

impl FeatureSet {
    pub fn new(vectors: Vec<Vec<f64>>, extractor_id: impl Into<String>) -> Result<Self> {
        let fs = FeatureSet {
            vectors,
            extractor_id: extractor_id.into(),
        };
        fs.validate()?;
        Ok(fs)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.vectors.first() else {
            return Err(Error::invalid("feature set is empty"));
        };
        let d = first.len();
        if d == 0 {
            return Err(Error::invalid("feature vectors have dimension 0"));
        }
        for (i, v) in self.vectors.iter().enumerate() {
            if v.len() != d {
                return Err(Error::invalid(format!("feature {i} has dimension {}, expected {d}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("feature {i} has a non-finite entry")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Sample mean and covariance with 1/(n−1) normalization.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (n, d) = (self.len(), self.dim());
        let x = DMatrix::from_fn(n, d, |i, j| self.vectors[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        (mean, cov)
    }
}

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues from round-off are clamped to 0.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^½)`, with the trace of the cross term
/// taken as `Tr (Σa^½ Σb Σa^½)^½`, which is symmetric and shares the
/// eigenvalues of `(ΣaΣb)^½`.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("each feature set needs at least 2 vectors"));
    }
    let (mu_a, cov_a) = a.moments();
    let (mu_b, cov_b) = b.moments();
    let root_a = sqrt_psd(&cov_a);
    let cross = sqrt_psd(&(&root_a * &cov_b * &root_a)).trace();
    let value = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::NumericalFailure(format!("FID evaluated to {value}")));
    }
    // round-off can leave a tiny negative value for identical sets
    Ok(value.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[&[f64]]) -> FeatureSet {
        FeatureSet::new(v.iter().map(|r| r.to_vec()).collect(), "t").unwrap()
    }

    #[test]
    fn identical_sets_are_zero() {
        let a = set(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.5]]);
        assert!(fid(&a, &a).unwrap().abs() < 1e-9);
    }

    #[test]
    fn one_dimensional_closed_form() {
        // {-1, 1}: mean 0, var 2; {0, 2}: mean 1, var 2
        let a = set(&[&[-1.0], &[1.0]]);
        let b = set(&[&[0.0], &[2.0]]);
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn preconditions() {
        let a = set(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = set(&[&[1.0], &[2.0]]);
        assert!(matches!(fid(&a, &b), Err(Error::InvalidArgument(_))));
        let single = set(&[&[1.0, 2.0]]);
        assert!(fid(&a, &single).is_err());
        assert!(FeatureSet::new(vec![vec![1.0], vec![f64::NAN]], "t").is_err());
        assert!(FeatureSet::new(vec![vec![1.0], vec![1.0, 2.0]], "t").is_err());
        assert!(FeatureSet::new(vec![], "t").is_err());
    }

    #[test]
    fn sqrt_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0, -1e-18]));
        let r = sqrt_psd(&m);
        assert!((r[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((r[(1, 1)] - 3.0).abs() < 1e-12);
        assert_eq!(r[(2, 2)], 0.0);
    }
}
