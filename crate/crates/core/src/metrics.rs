//! Distribution distances between feature clouds and binary classification
//! metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{to_batch, Image, Label};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;

/// Eigenvalues below `-NEG_EIG_TOL` make the matrix square root undefined.
pub const NEG_EIG_TOL: f64 = 1e-8;

/// `n x d` feature vectors tagged with the extractor that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCloud {
    pub extractor_id: String,
    rows: Vec<Vec<f64>>,
}

impl FeatureCloud {
    pub fn new(extractor_id: &str, rows: Vec<Vec<f64>>) -> Result<FeatureCloud> {
        let d = rows.first().map_or(0, Vec::len);
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidArgument("feature rows must be non-empty and of equal length".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite feature value".into()));
        }
        Ok(FeatureCloud {
            extractor_id: extractor_id.to_string(),
            rows,
        })
    }

    /// Embeds images in batches of `batch`, in parallel; row order follows
    /// the input order.
    pub fn from_images(fx: &dyn FeatureExtractor, images: &[Image], batch: usize) -> Result<FeatureCloud> {
        let chunks: Vec<&[Image]> = images.chunks(batch.max(1)).collect();
        let parts = chunks
            .par_iter()
            .map(|chunk| {
                let refs: Vec<&Image> = chunk.iter().collect();
                fx.embed(&to_batch(&refs)?)
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureCloud::new(fx.id(), parts.into_iter().flatten().collect())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.dim(), |i, j| self.rows[i][j])
    }

    pub fn mean(&self) -> DVector<f64> {
        let n = self.len() as f64;
        DVector::from_fn(self.dim(), |j, _| self.rows.iter().map(|r| r[j]).sum::<f64>() / n)
    }

    /// Covariance with the unbiased `n - 1` normalizer.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        let mut x = self.matrix();
        for mut row in x.row_iter_mut() {
            row -= mu.transpose();
        }
        (x.transpose() * &x) / (self.len() as f64 - 1.0)
    }
}

fn check_pair(a: &FeatureCloud, b: &FeatureCloud) -> Result<()> {
    if a.extractor_id != b.extractor_id {
        return Err(Error::InvalidArgument(format!(
            "feature clouds from different extractors: `{}` and `{}`",
            a.extractor_id, b.extractor_id
        )));
    }
    if a.dim() != b.dim() {
        return Err(Error::InvalidArgument(format!("feature dimensions {} and {} differ", a.dim(), b.dim())));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument("at least two samples per cloud are required".into()));
    }
    Ok(())
}

/// Symmetric PSD square root; small negative eigenvalues are clamped.
fn sqrt_psd(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m);
    if let Some(v) = eig.eigenvalues.iter().find(|v| **v < -NEG_EIG_TOL) {
        return Err(Error::Numerical(format!("matrix square root of a matrix with eigenvalue {v}")));
    }
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose())
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Frechet distance between Gaussian fits of two clouds:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, with the trace of
/// the cross term computed as `tr((S_b^(1/2) S_a S_b^(1/2))^(1/2))`.
pub fn fid(a: &FeatureCloud, b: &FeatureCloud) -> Result<f64> {
    check_pair(a, b)?;
    let dmu = a.mean() - b.mean();
    let (sa, sb) = (a.covariance(), b.covariance());
    let root_b = sqrt_psd(sb.clone())?;
    let inner = symmetrize(&root_b * &sa * &root_b);
    let eig = SymmetricEigen::new(inner);
    let mut cross = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -NEG_EIG_TOL {
            return Err(Error::Numerical(format!("covariance product has eigenvalue {v}")));
        }
        cross += v.max(0.0).sqrt();
    }
    Ok(dmu.norm_squared() + sa.trace() + sb.trace() - 2.0 * cross)
}

/// Polynomial kernel `(x.y / d + 1)^3`.
pub fn kid_kernel(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased squared MMD with [`kid_kernel`], over the full sets.
///
/// Like the within-set sums, the cross sum leaves out the index-matched
/// pairs `(a_i, b_i)`. Every remaining pair is still independent, so the
/// estimate stays unbiased, and two identical sequences score exactly 0.
pub fn kid(a: &FeatureCloud, b: &FeatureCloud) -> Result<f64> {
    check_pair(a, b)?;
    let within = |c: &FeatureCloud| {
        let n = c.len();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += kid_kernel(&c.rows[i], &c.rows[j]);
                }
            }
        }
        s / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for (i, x) in a.rows.iter().enumerate() {
        for (j, y) in b.rows.iter().enumerate() {
            if i != j {
                cross += kid_kernel(x, y);
            }
        }
    }
    let (m, n) = (a.len(), b.len());
    cross /= (m * n - m.min(n)) as f64;
    Ok(within(a) + within(b) - 2.0 * cross)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub positive: Label,
}

impl ConfusionCounts {
    pub fn new(tp: usize, fn_: usize, tn: usize, fp: usize, positive: Label) -> ConfusionCounts {
        ConfusionCounts { tp, fp, tn, fn_, positive }
    }

    pub fn from_predictions(truth: &[Label], predicted: &[Label], positive: Label) -> Result<ConfusionCounts> {
        if truth.len() != predicted.len() {
            return Err(Error::InvalidArgument(format!("{} labels but {} predictions", truth.len(), predicted.len())));
        }
        let mut c = ConfusionCounts::new(0, 0, 0, 0, positive);
        for (t, p) in truth.iter().zip(predicted) {
            match (*t == positive, *p == positive) {
                (true, true) => c.tp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fp += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

impl ClassificationMetrics {
    /// Percentages rounded to one decimal place.
    pub fn percent_1dp(&self) -> (f64, f64, f64) {
        let r = |v: f64| (v * 1000.0).round() / 10.0;
        (r(self.accuracy), r(self.sensitivity), r(self.specificity))
    }
}

pub fn classification_metrics(c: &ConfusionCounts) -> Result<ClassificationMetrics> {
    let ratio = |num: usize, den: usize, name: &'static str| {
        if den == 0 {
            Err(Error::UndefinedMetric(name))
        } else {
            Ok(num as f64 / den as f64)
        }
    };
    Ok(ClassificationMetrics {
        accuracy: ratio(c.tp + c.tn, c.total(), "accuracy")?,
        sensitivity: ratio(c.tp, c.tp + c.fn_, "sensitivity")?,
        specificity: ratio(c.tn, c.tn + c.fp, "specificity")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(rows: Vec<Vec<f64>>) -> FeatureCloud {
        FeatureCloud::new("t", rows).unwrap()
    }

    #[test]
    fn fid_of_identical_clouds_is_zero() {
        let a = cloud(vec![vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.0], vec![-2.0, 1.5]]);
        assert!(fid(&a, &a).unwrap().abs() < 1e-6);
    }

    #[test]
    fn kid_of_constant_clouds_is_zero() {
        let a = cloud(vec![vec![0.3, -0.7]; 5]);
        assert_eq!(kid(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_clouds_are_rejected() {
        let a = cloud(vec![vec![1.0], vec![2.0]]);
        let b = FeatureCloud::new("other", vec![vec![1.0], vec![2.0]]).unwrap();
        assert!(fid(&a, &b).is_err());
        assert!(kid(&a, &cloud(vec![vec![1.0]])).is_err());
    }

    #[test]
    fn undefined_metrics_are_errors() {
        let c = ConfusionCounts::new(0, 0, 5, 1, Label::Normal);
        assert!(matches!(classification_metrics(&c), Err(Error::UndefinedMetric("sensitivity"))));
        let perfect = ConfusionCounts::new(3, 0, 4, 0, Label::Normal);
        assert_eq!(classification_metrics(&perfect).unwrap().percent_1dp(), (100.0, 100.0, 100.0));
    }
}
