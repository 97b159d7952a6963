//! Anomaly scores from latent tensors.
//!
//! Per spatial location the score is minus the exponential of the average
//! channel log-likelihood term, so values live in (-inf, 0) and larger means
//! more anomalous. The fixed variant assumes a standard normal base; the
//! learned variant uses the base distribution's mean and variance plus its
//! log-determinant contribution. With zero base parameters the two paths
//! produce bit-identical maps (same reduction order, and the extra terms
//! reduce to exact no-ops in IEEE arithmetic).
//!
//! The image-level score is the spatial maximum of the map.

use crate::base::BaseDistribution;
use crate::error::{Error, Result};
use crate::numerics::{Shape4, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyResult {
    /// Per-pixel scores, shape (B, 1, H, W).
    pub anomaly_map: Tensor4,
    /// Spatial maximum per sample.
    pub image_scores: Vec<f64>,
}

impl AnomalyResult {
    pub fn from_map(anomaly_map: Tensor4) -> Result<Self> {
        let s = anomaly_map.shape();
        if s.c != 1 {
            return Err(Error::ShapeMismatch {
                op: "AnomalyResult::from_map",
                expected: "(B,1,H,W)".to_string(),
                got: s.to_string(),
            });
        }
        let image_scores = image_score(&anomaly_map);
        Ok(AnomalyResult {
            anomaly_map,
            image_scores,
        })
    }
}

/// Spatial maximum of a per-pixel map, one value per sample.
pub fn image_score(map: &Tensor4) -> Vec<f64> {
    let s = map.shape();
    let plane = s.c * s.h * s.w;
    (0..s.b)
        .map(|b| {
            map.data()[b * plane..(b + 1) * plane]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Score against the frozen standard normal base:
/// -exp( -(1 / 2C) * sum_c z^2 ).
pub fn score_map_fixed(z: &Tensor4) -> Result<AnomalyResult> {
    score_map(z, None)
}

/// Score against the learned base:
/// -exp( -(1 / 2C) * sum_c [ (z - mu)^2 / sigma^2 + 2 log_sigma ] ).
pub fn score_map_learned(z: &Tensor4, base: &BaseDistribution) -> Result<AnomalyResult> {
    score_map(z, Some(base))
}

fn score_map(z: &Tensor4, base: Option<&BaseDistribution>) -> Result<AnomalyResult> {
    let s = z.shape();
    if s.c == 0 {
        return Err(Error::EmptyInput { op: "score_map" });
    }
    if let Some(b) = base {
        let bs = b.shape();
        if (bs.c, bs.h, bs.w) != (s.c, s.h, s.w) {
            return Err(Error::ShapeMismatch {
                op: "score_map",
                expected: bs.to_string(),
                got: s.to_string(),
            });
        }
    }
    let plane = s.h * s.w;
    let n = s.c * plane;
    let inv_two_c = 1.0 / (2.0 * s.c as f64);
    let mut out = vec![0.0f64; s.b * plane];
    let zd = z.data();
    for b in 0..s.b {
        for p in 0..plane {
            let mut acc = 0.0;
            match base {
                None => {
                    for c in 0..s.c {
                        let v = zd[b * n + c * plane + p];
                        acc += v * v;
                    }
                }
                Some(bd) => {
                    let mu = bd.mu().data();
                    let ls = bd.log_sigma().data();
                    for c in 0..s.c {
                        let d = c * plane + p;
                        let diff = zd[b * n + d] - mu[d];
                        let var = (2.0 * ls[d]).exp();
                        acc += diff * diff / var + 2.0 * ls[d];
                    }
                }
            }
            out[b * plane + p] = -(-acc * inv_two_c).exp();
        }
    }
    let map = Tensor4::from_vec(Shape4::new(s.b, 1, s.h, s.w), out)
        .map_err(|_| Error::non_finite("score_map"))?;
    AnomalyResult::from_map(map)
}
