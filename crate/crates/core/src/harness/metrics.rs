//! ROC, AUC and half total error rate. A score at or above the threshold is
//! accepted as live.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    /// Share of spoofs accepted.
    pub far: f64,
    /// Share of lives rejected.
    pub frr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum ThresholdPolicy {
    Fixed(f64),
    /// Minimize HTER on the scored data itself.
    MinHter,
    /// The ROC point where FAR and FRR are closest.
    EqualError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub hter: f64,
    pub far: f64,
    pub frr: f64,
    pub threshold: f64,
    /// Equal error rate on the scored data; diagnostic only.
    pub eer: f64,
    pub roc: Vec<RocPoint>,
}

fn counts(labels: &[u8], n: usize) -> Result<(usize, usize)> {
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!("{n} scores for {} labels", labels.len())));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    let live = labels.iter().filter(|&&y| y == 1).count();
    let spoof = n - live;
    if live == 0 || spoof == 0 {
        return Err(Error::InvalidArgument("metrics need both live and spoof samples".into()));
    }
    Ok((live, spoof))
}

/// FAR and FRR at `threshold`.
pub fn rates_at(scores: &[f64], labels: &[u8], threshold: f64) -> Result<(f64, f64)> {
    let (live, spoof) = counts(labels, scores.len())?;
    let mut fa = 0usize;
    let mut fr = 0usize;
    for (&s, &y) in scores.iter().zip(labels) {
        if y == 0 && s >= threshold {
            fa += 1;
        }
        if y == 1 && s < threshold {
            fr += 1;
        }
    }
    Ok((fa as f64 / spoof as f64, fr as f64 / live as f64))
}

/// ROC over every distinct score, from the strictest threshold (accept
/// nothing) down to the loosest (accept everything).
pub fn roc(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    let (live, spoof) = counts(labels, scores.len())?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "roc" });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { threshold: f64::INFINITY, far: 0.0, frr: 1.0 }];
    let (mut fa, mut ta) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let t = scores[order[k]];
        while k < order.len() && scores[order[k]] == t {
            if labels[order[k]] == 1 {
                ta += 1;
            } else {
                fa += 1;
            }
            k += 1;
        }
        points.push(RocPoint {
            threshold: t,
            far: fa as f64 / spoof as f64,
            frr: 1.0 - ta as f64 / live as f64,
        });
    }
    Ok(points)
}

/// Trapezoidal area under the ROC (true-accept rate against FAR).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(auc_from_roc(&roc(scores, labels)?))
}

fn auc_from_roc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].far - w[0].far) * ((1.0 - w[0].frr) + (1.0 - w[1].frr)) / 2.0)
        .sum()
}

/// Threshold with the lowest HTER; the strictest such threshold on ties.
pub fn min_hter_threshold(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let points = roc(scores, labels)?;
    let mut best = points[0];
    for p in &points[1..] {
        if p.far + p.frr < best.far + best.frr {
            best = *p;
        }
    }
    Ok(best.threshold)
}

/// `(eer, threshold)` at the ROC point minimizing `|FAR - FRR|`.
pub fn equal_error(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    let points = roc(scores, labels)?;
    let mut best = points[0];
    for p in &points[1..] {
        if (p.far - p.frr).abs() < (best.far - best.frr).abs() {
            best = *p;
        }
    }
    Ok(((best.far + best.frr) / 2.0, best.threshold))
}

pub fn compute_metrics(scores: &[f64], labels: &[u8], policy: ThresholdPolicy) -> Result<MetricsReport> {
    let points = roc(scores, labels)?;
    let (eer, eer_threshold) = equal_error(scores, labels)?;
    let threshold = match policy {
        ThresholdPolicy::Fixed(t) => t,
        ThresholdPolicy::MinHter => min_hter_threshold(scores, labels)?,
        ThresholdPolicy::EqualError => eer_threshold,
    };
    let (far, frr) = rates_at(scores, labels, threshold)?;
    Ok(MetricsReport {
        auc: auc_from_roc(&points),
        hter: (far + frr) / 2.0,
        far,
        frr,
        threshold,
        eer,
        roc: points,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::rng::{seeded, RngExt};

    /// Mann-Whitney statistic with ties counted as one half.
    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn separated_scores() {
        let scores = [0.9, 0.8, 0.7, 0.2, 0.1];
        let labels = [1, 1, 1, 0, 0];
        let m = compute_metrics(&scores, &labels, ThresholdPolicy::MinHter).unwrap();
        assert_eq!(m.auc, 1.0);
        assert_eq!(m.hter, 0.0);
        assert_eq!(m.threshold, 0.7);
        assert_eq!(m.eer, 0.0);
    }

    #[test]
    fn hter_is_mean_of_rates() {
        // 10 spoofs with 2 accepted, 10 lives with 1 rejected
        let mut scores = vec![0.0; 8];
        scores.extend([1.0, 1.0]);
        scores.push(0.0);
        scores.extend([1.0; 9]);
        let mut labels = vec![0u8; 10];
        labels.extend([1u8; 10]);
        let m = compute_metrics(&scores, &labels, ThresholdPolicy::Fixed(0.5)).unwrap();
        assert!((m.far - 0.2).abs() < 1e-15);
        assert!((m.frr - 0.1).abs() < 1e-15);
        assert!((m.hter - 0.15).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(auc(&[0.1, 0.2], &[0, 0]).is_err());
        assert!(auc(&[0.1], &[0, 1]).is_err());
    }

    #[test]
    fn random_scores_give_chance_auc() {
        let mut rng = seeded(9);
        let n = 10_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let a = auc(&scores, &labels).unwrap();
        assert!((0.47..=0.53).contains(&a), "{a}");
    }

    #[test]
    fn reversed_scores_give_zero() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &[1, 1, 0, 0]).unwrap(), 0.5);
    }

    #[test]
    fn hter_at_equal_error_threshold_matches_eer() {
        let mut rng = seeded(4);
        let n = 400;
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let scores: Vec<f64> = labels
            .iter()
            .map(|&y| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z + y as f64
            })
            .collect();
        let m = compute_metrics(&scores, &labels, ThresholdPolicy::EqualError).unwrap();
        // one grid step is one sample of either class
        assert!((m.hter - m.eer).abs() <= 1.0 / (n / 2) as f64);
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_count(seed in 0u64..5000, n in 2usize..60, levels in 1u32..8) {
            let mut rng = seeded(seed);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
            let a = auc(&scores, &labels).unwrap();
            prop_assert!((a - pairwise_auc(&scores, &labels)).abs() < 1e-12);
        }

        #[test]
        fn auc_is_invariant_to_increasing_maps(seed in 0u64..5000, n in 2usize..60) {
            let mut rng = seeded(seed);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mapped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 5.0).collect();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&mapped, &labels).unwrap());
        }

        #[test]
        fn metrics_stay_in_range(seed in 0u64..5000, n in 2usize..60) {
            let mut rng = seeded(seed);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let m = compute_metrics(&scores, &labels, ThresholdPolicy::MinHter).unwrap();
            prop_assert!((0.0..=1.0).contains(&m.auc));
            prop_assert!((0.0..=0.5).contains(&m.hter));
        }
    }
}
