//! Feature-space diagnostics: distance matrices, cosine similarity, norm
//! statistics and the scaling / renormalisation transforms applied to targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FeatureVector;
use crate::scalar::Scalar;

/// Squared Euclidean distance between comparable features.
pub fn squared_distance<S: Scalar>(a: &FeatureVector<S>, b: &FeatureVector<S>) -> Result<S> {
    a.check_comparable(b)?;
    Ok(a.values().iter().zip(b.values()).map(|(&x, &y)| (x - y) * (x - y)).sum())
}

/// Pairwise squared distances within a labelled feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub cohort_id: String,
    /// Row-major `n x n`, symmetric, zero diagonal.
    pub pairwise_matrix: Vec<Vec<f64>>,
    /// Mean over the strict upper triangle.
    pub average_pairwise: f64,
}

pub fn pairwise_squared_distances<S: Scalar>(cohort_id: &str, features: &[FeatureVector<S>]) -> Result<DistanceReport> {
    if features.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 features, got {}", features.len())));
    }
    let n = features.len();
    let mut m = vec![vec![0.0; n]; n];
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_distance(&features[i], &features[j])?.as_f64();
            m[i][j] = d;
            m[j][i] = d;
            total += d;
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(DistanceReport { cohort_id: cohort_id.to_string(), pairwise_matrix: m, average_pairwise: total / pairs })
}

pub fn cosine_similarity<S: Scalar>(a: &FeatureVector<S>, b: &FeatureVector<S>) -> Result<S> {
    a.check_comparable(b)?;
    if a.norm() == S::zero() || b.norm() == S::zero() {
        return Err(Error::InvalidArgument("cosine similarity of a zero-norm vector".into()));
    }
    let dot: S = a.values().iter().zip(b.values()).map(|(&x, &y)| x * y).sum();
    // rounding can push |cos| a hair past 1
    Ok((dot / (a.norm() * b.norm())).max(-S::one()).min(S::one()))
}

/// Componentwise `s * f`.
pub fn scale_feature<S: Scalar>(f: &FeatureVector<S>, s: S) -> Result<FeatureVector<S>> {
    if !s.is_finite() {
        return Err(Error::InvalidArgument("scale factor must be finite".into()));
    }
    Ok(FeatureVector::new(f.values().iter().map(|&v| v * s).collect(), f.extractor_id()))
}

/// Rescale `f` to have L2 norm `target_norm`, keeping its direction.
pub fn normalize_to_norm<S: Scalar>(f: &FeatureVector<S>, target_norm: S) -> Result<FeatureVector<S>> {
    if f.norm() == S::zero() {
        return Err(Error::InvalidArgument("cannot renormalise a zero-norm vector".into()));
    }
    if !(target_norm > S::zero()) || !target_norm.is_finite() {
        return Err(Error::InvalidArgument("target norm must be positive".into()));
    }
    let k = target_norm / f.norm();
    Ok(FeatureVector::new(f.values().iter().map(|&v| v * k).collect(), f.extractor_id()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStatistics {
    pub mean: f64,
    pub norms: Vec<f64>,
}

pub fn norm_statistics<S: Scalar>(features: &[FeatureVector<S>]) -> Result<NormStatistics> {
    if features.is_empty() {
        return Err(Error::InvalidArgument("no features".into()));
    }
    let norms: Vec<f64> = features.iter().map(|f| f.norm().as_f64()).collect();
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    Ok(NormStatistics { mean, norms })
}

/// Five-number summary plus mean/std of a sample, as drawn in a box plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    /// Sample standard deviation (n - 1); 0 for a single value.
    pub std: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    // linear interpolation between closest ranks
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl BoxStats {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("box statistics need finite values".into()));
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let mean = s.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Ok(Self {
            count: n,
            min: s[0],
            q1: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q3: quantile(&s, 0.75),
            max: s[n - 1],
            mean,
            std,
        })
    }
}
