//! Classification and explanation metrics.

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("input error: {0}")]
    Input(String),
    #[error("metric undefined: {0}")]
    Undefined(String),
}

/// Fraction of positions where `predictions` and `labels` agree.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, MetricError> {
    if predictions.len() != labels.len() {
        return Err(MetricError::Input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(MetricError::Input("accuracy of an empty batch".into()));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Area under the ROC curve as the Mann–Whitney statistic: the probability
/// that a random positive scores above a random negative, ties counting ½.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Input(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricError::Input("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::Undefined(
            "ROC AUC needs both positive and negative labels".into(),
        ));
    }

    // Average ranks over tie groups; the positive rank sum gives U.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Node-level AUC of a soft mask against a ground-truth 0/1 mask.
pub fn explanation_auc(mask: &[f64], truth_mask: &[u8]) -> Result<f64, MetricError> {
    roc_auc(mask, truth_mask)
}

/// Mean explanation AUC over graphs. Graphs whose truth mask is single-class
/// are skipped with a warning.
pub fn mean_explanation_auc<'a>(
    items: impl IntoIterator<Item = (&'a [f64], &'a [u8])>,
) -> Result<f64, MetricError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (idx, (mask, truth)) in items.into_iter().enumerate() {
        match explanation_auc(mask, truth) {
            Ok(v) => {
                total += v;
                count += 1;
            }
            Err(MetricError::Undefined(_)) => {
                warn!("graph #{idx}: degenerate truth mask, skipped");
            }
            Err(e) => return Err(e),
        }
    }
    if count == 0 {
        return Err(MetricError::Undefined(
            "every truth mask was degenerate".into(),
        ));
    }
    Ok(total / count as f64)
}

/// A metric over episodes, with its mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_episodes: usize,
    pub per_episode: Vec<f64>,
    pub config_fingerprint: String,
}

impl MetricReport {
    /// True when mean and std agree with `per_episode` (recomputed).
    pub fn is_consistent(&self) -> bool {
        match aggregate(&self.metric, &self.per_episode, &self.config_fingerprint) {
            Ok(r) => r.mean == self.mean && r.std == self.std && r.n_episodes == self.n_episodes,
            Err(_) => false,
        }
    }
}

pub fn aggregate(
    metric: &str,
    values: &[f64],
    config_fingerprint: &str,
) -> Result<MetricReport, MetricError> {
    if values.is_empty() {
        return Err(MetricError::Input(format!(
            "no values to aggregate for {metric}"
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(MetricReport {
        metric: metric.to_string(),
        mean,
        std,
        n_episodes: values.len(),
        per_episode: values.to_vec(),
        config_fingerprint: config_fingerprint.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[0, 1, 1], &[0, 1, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1], &[1, 0]).unwrap(), 0.0);
        assert!(accuracy(&[0], &[0, 1]).is_err());
        assert!(accuracy(&[], &[]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p: Vec<usize> = (0..100).map(|_| rng.random_range(0..3)).collect();
        let l: Vec<usize> = (0..100).map(|_| rng.random_range(0..3)).collect();
        let mut hits = 0;
        for i in 0..100 {
            if p[i] == l[i] {
                hits += 1;
            }
        }
        assert_eq!(accuracy(&p, &l).unwrap(), hits as f64 / 100.0);
    }

    #[test]
    fn roc_auc_cases() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.4; 5], &[0, 1, 0, 1, 1]).unwrap(), 0.5);
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 1]),
            Err(MetricError::Undefined(_))
        ));
        let scores = [0.3, 0.7, 0.7, 0.1, 0.9, 0.5, 0.3, 0.6];
        let labels = [0, 1, 0, 0, 1, 1, 1, 0];
        assert_eq!(
            roc_auc(&scores, &labels).unwrap(),
            pair_count_auc(&scores, &labels)
        );
    }

    #[test]
    fn explanation_auc_cases() {
        let truth = [1u8, 0, 0, 1, 0];
        let exact: Vec<f64> = truth.iter().map(|&t| t as f64).collect();
        assert_eq!(explanation_auc(&exact, &truth).unwrap(), 1.0);
        let flipped: Vec<f64> = truth.iter().map(|&t| 1.0 - t as f64).collect();
        assert_eq!(explanation_auc(&flipped, &truth).unwrap(), 0.0);

        let all_one = [1u8, 1, 1];
        let r = mean_explanation_auc([(&exact[..3], &all_one[..]), (&exact[..], &truth[..])]);
        assert_eq!(r.unwrap(), 1.0);
        assert!(mean_explanation_auc([(&exact[..3], &all_one[..])]).is_err());
    }

    #[test]
    fn random_masks_average_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut total = 0.0;
        for _ in 0..500 {
            let n = rng.random_range(10..40);
            let mut truth: Vec<u8> = (0..n).map(|_| rng.random_bool(0.2) as u8).collect();
            truth[0] = 1;
            truth[1] = 0;
            let mask: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            total += explanation_auc(&mask, &truth).unwrap();
        }
        assert!((total / 500.0 - 0.5).abs() < 0.05);
    }

    #[test]
    fn aggregate_cases() {
        let r = aggregate("acc", &[0.7], "fp").unwrap();
        assert_eq!((r.mean, r.std, r.n_episodes), (0.7, 0.0, 1));
        assert_eq!(aggregate("acc", &[0.0, 1.0], "fp").unwrap().mean, 0.5);
        assert!(aggregate("acc", &[], "fp").is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f64> = (0..50).map(|_| rng.random()).collect();
        let mean = v.iter().sum::<f64>() / 50.0;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 49.0;
        let r = aggregate("x", &v, "fp").unwrap();
        assert!((r.mean - mean).abs() < 1e-12);
        assert!((r.std - var.sqrt()).abs() < 1e-12);
        assert!(r.is_consistent());
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(
            data in proptest::collection::vec((0u8..6, any::<bool>()), 2..12)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 5.0).collect();
            let labels: Vec<u8> = data.iter().map(|(_, l)| *l as u8).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), pair_count_auc(&scores, &labels));
        }

        #[test]
        fn auc_complement_and_monotone_invariance(
            data in proptest::collection::vec((-1e3f64..1e3, any::<bool>()), 2..30)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s).collect();
            let labels: Vec<u8> = data.iter().map(|(_, l)| *l as u8).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
            let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
            let a = roc_auc(&scores, &labels).unwrap();
            prop_assert!((a + roc_auc(&scores, &flipped).unwrap() - 1.0).abs() < 1e-12);
            let transformed: Vec<f64> = scores.iter().map(|s| (s / 1000.0).tanh()).collect();
            prop_assert_eq!(a, roc_auc(&transformed, &labels).unwrap());
        }

        #[test]
        fn accuracy_permutation_invariant(
            data in proptest::collection::vec((0usize..4, 0usize..4), 1..40),
            seed in any::<u64>()
        ) {
            use rand::seq::SliceRandom;
            let (p, l): (Vec<usize>, Vec<usize>) = data.iter().cloned().unzip();
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let pp: Vec<usize> = idx.iter().map(|&i| p[i]).collect();
            let lp: Vec<usize> = idx.iter().map(|&i| l[i]).collect();
            prop_assert_eq!(accuracy(&p, &l).unwrap(), accuracy(&pp, &lp).unwrap());
        }
    }
}
