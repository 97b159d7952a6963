//! Detection metrics and cross-epoch stability summaries.
//!
//! AUROC is computed from midranks, which handles ties exactly: the result
//! equals P(score_pos > score_neg) + P(tie)/2 over all positive/negative
//! pairs. Pixel-level AUROC pools every pixel of every image into one ranking
//! against the ground-truth masks.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Tensor4;

/// Area under the ROC curve via midranks. `labels[i]` marks sample i as
/// anomalous. Ties contribute half weight.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "auroc",
            expected: format!("{} labels", scores.len()),
            got: format!("{}", labels.len()),
        });
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput { op: "auroc" });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::non_finite("auroc"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels {
            detail: format!("{pos} positive and {neg} negative samples"),
        });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // midranks: tied values share the average of their 1-based rank range
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }

    let p = pos as f64;
    let n = neg as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// AUROC over all pixels of the score maps against binary masks. Both
/// tensors must be (B, 1, H, W); masks may only contain 0.0 and 1.0.
pub fn pixel_auroc(maps: &Tensor4, masks: &Tensor4) -> Result<f64> {
    if maps.shape() != masks.shape() {
        return Err(Error::ShapeMismatch {
            op: "pixel_auroc",
            expected: maps.shape().to_string(),
            got: masks.shape().to_string(),
        });
    }
    if maps.shape().c != 1 {
        return Err(Error::ShapeMismatch {
            op: "pixel_auroc",
            expected: "(B,1,H,W)".to_string(),
            got: maps.shape().to_string(),
        });
    }
    let mut labels = Vec::with_capacity(masks.shape().len());
    for &m in masks.data() {
        if m == 0.0 {
            labels.push(false);
        } else if m == 1.0 {
            labels.push(true);
        } else {
            return Err(Error::format(
                "pixel_auroc",
                format!("mask entry {m} is not binary"),
            ));
        }
    }
    auroc(maps.data(), &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityReport {
    /// Best value over every recorded epoch, not just the window.
    pub best_auroc: f64,
    /// Inclusive epoch window the mean/std are computed over.
    pub window: (usize, usize),
    pub mean_auroc: f64,
    /// Unbiased (n-1) standard deviation; 0 for a single-epoch window.
    pub std_auroc: f64,
    pub per_epoch: Vec<(usize, f64)>,
}

/// Summarize a per-epoch metric curve over an inclusive epoch window.
pub fn stability(per_epoch: &[(usize, f64)], window: (usize, usize)) -> Result<StabilityReport> {
    if per_epoch.is_empty() {
        return Err(Error::EmptyInput { op: "stability" });
    }
    if per_epoch.iter().any(|(_, v)| !v.is_finite()) {
        return Err(Error::non_finite("stability"));
    }
    let best_auroc = per_epoch
        .iter()
        .map(|&(_, v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let in_window: Vec<f64> = per_epoch
        .iter()
        .filter(|&&(e, _)| e >= window.0 && e <= window.1)
        .map(|&(_, v)| v)
        .collect();
    if in_window.is_empty() {
        return Err(Error::EmptyWindow {
            start: window.0,
            end: window.1,
        });
    }
    let n = in_window.len() as f64;
    let mean_auroc = in_window.iter().sum::<f64>() / n;
    let std_auroc = if in_window.len() < 2 {
        0.0
    } else {
        (in_window
            .iter()
            .map(|v| (v - mean_auroc) * (v - mean_auroc))
            .sum::<f64>()
            / (n - 1.0))
            .sqrt()
    };
    Ok(StabilityReport {
        best_auroc,
        window,
        mean_auroc,
        std_auroc,
        per_epoch: per_epoch.to_vec(),
    })
}

/// Default evaluation window: the final half of `epochs` (inclusive bounds).
pub fn final_half_window(epochs: usize) -> (usize, usize) {
    if epochs == 0 {
        (0, 0)
    } else {
        (epochs / 2, epochs - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Rng, Shape4};

    /// O(P*N) pairwise comparison; the production path must agree exactly.
    fn auroc_brute(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0f64;
        let mut pairs = 0.0f64;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        num / pairs
    }

    #[test]
    fn perfectly_separated_scores_give_one() {
        let scores = [0.1, 0.2, 0.8, 0.9];
        let labels = [false, false, true, true];
        assert_eq!(auroc(&scores, &labels).unwrap(), 1.0);
        let flipped = [true, true, false, false];
        assert_eq!(auroc(&scores, &flipped).unwrap(), 0.0);
    }

    #[test]
    fn all_tied_scores_give_half() {
        let scores = [0.5; 6];
        let labels = [true, false, true, false, false, true];
        assert_eq!(auroc(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn small_example_matches_pairwise_count() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [false, false, true, true];
        let a = auroc(&scores, &labels).unwrap();
        assert_eq!(a, auroc_brute(&scores, &labels));
        assert_eq!(a, 0.75);
    }

    #[test]
    fn rank_method_equals_brute_force_on_random_instances_with_ties() {
        let mut rng = Rng::new(12345);
        for _ in 0..300 {
            let n = 2 + rng.next_below(60) as usize;
            // quantized scores force ties
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.next_below(12) as f64) / 4.0)
                .collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.5).collect();
            labels[0] = true;
            if n > 1 {
                labels[1] = false;
            } else {
                continue;
            }
            let a = auroc(&scores, &labels).unwrap();
            let b = auroc_brute(&scores, &labels);
            assert_eq!(a, b, "scores {scores:?} labels {labels:?}");
        }
    }

    #[test]
    fn strictly_increasing_transform_leaves_auroc_unchanged() {
        let mut rng = Rng::new(9);
        let scores: Vec<f64> = (0..40).map(|_| rng.next_gaussian()).collect();
        let labels: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
        let a = auroc(&scores, &labels).unwrap();
        let cubed: Vec<f64> = scores.iter().map(|&s| s * s * s + 2.0 * s).collect();
        assert_eq!(a, auroc(&cubed, &labels).unwrap());
    }

    #[test]
    fn negating_scores_complements_auroc() {
        let mut rng = Rng::new(10);
        let scores: Vec<f64> = (0..50).map(|_| rng.next_gaussian()).collect();
        let labels: Vec<bool> = (0..50).map(|i| i % 4 == 0).collect();
        let a = auroc(&scores, &labels).unwrap();
        let neg: Vec<f64> = scores.iter().map(|&s| -s).collect();
        let b = auroc(&neg, &labels).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_labels_are_an_error() {
        let scores = [0.1, 0.2];
        assert!(matches!(
            auroc(&scores, &[true, true]),
            Err(Error::DegenerateLabels { .. })
        ));
        assert!(matches!(
            auroc(&scores, &[false, false]),
            Err(Error::DegenerateLabels { .. })
        ));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(auroc(&[], &[]), Err(Error::EmptyInput { .. })));
    }

    #[test]
    fn pixel_auroc_pools_all_pixels() {
        let shape = Shape4::new(2, 1, 2, 2);
        let maps = Tensor4::from_vec(
            shape,
            vec![-0.9, -0.1, -0.8, -0.7, -0.95, -0.2, -0.85, -0.75],
        )
        .unwrap();
        let masks =
            Tensor4::from_vec(shape, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let pooled = pixel_auroc(&maps, &masks).unwrap();
        let labels: Vec<bool> = masks.data().iter().map(|&m| m == 1.0).collect();
        assert_eq!(pooled, auroc(maps.data(), &labels).unwrap());
        assert_eq!(pooled, 1.0);
    }

    #[test]
    fn random_scores_sit_near_half() {
        let shape = Shape4::new(8, 1, 16, 16);
        let maps = Rng::new(77).gaussian_tensor(shape);
        let mask_bits: Vec<f64> = {
            let mut rng = Rng::new(78);
            (0..shape.len())
                .map(|_| if rng.next_f64() < 0.2 { 1.0 } else { 0.0 })
                .collect()
        };
        let masks = Tensor4::from_vec(shape, mask_bits).unwrap();
        let a = pixel_auroc(&maps, &masks).unwrap();
        assert!((a - 0.5).abs() < 0.03, "auroc {a}");
    }

    #[test]
    fn non_binary_mask_is_a_format_error() {
        let shape = Shape4::new(1, 1, 1, 2);
        let maps = Tensor4::zeros(shape);
        let masks = Tensor4::from_vec(shape, vec![0.0, 0.5]).unwrap();
        assert!(matches!(
            pixel_auroc(&maps, &masks),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn stability_of_constant_curve_has_zero_std() {
        let curve: Vec<(usize, f64)> = (0..10).map(|e| (e, 0.9)).collect();
        let rep = stability(&curve, (5, 9)).unwrap();
        assert_eq!(rep.mean_auroc, 0.9);
        assert_eq!(rep.std_auroc, 0.0);
        assert_eq!(rep.best_auroc, 0.9);
    }

    #[test]
    fn stability_two_point_window() {
        let curve = [(0, 0.8), (1, 1.0)];
        let rep = stability(&curve, (0, 1)).unwrap();
        assert!((rep.mean_auroc - 0.9).abs() < 1e-15);
        let expected_std = (2.0f64 * 0.1 * 0.1).sqrt(); // sqrt(sum sq dev / (n-1))
        assert!((rep.std_auroc - expected_std).abs() < 1e-15);
    }

    #[test]
    fn best_can_sit_outside_the_window() {
        let curve = [(0, 0.99), (1, 0.7), (2, 0.8), (3, 0.75)];
        let rep = stability(&curve, (1, 3)).unwrap();
        assert_eq!(rep.best_auroc, 0.99);
        assert!(rep.mean_auroc < 0.9);
    }

    #[test]
    fn empty_window_is_an_error() {
        let curve = [(0, 0.9), (1, 0.8)];
        assert!(matches!(
            stability(&curve, (5, 9)),
            Err(Error::EmptyWindow { .. })
        ));
    }

    #[test]
    fn final_half_window_covers_the_back_half() {
        assert_eq!(final_half_window(200), (100, 199));
        assert_eq!(final_half_window(1), (0, 0));
        assert_eq!(final_half_window(3), (1, 2));
    }
}
