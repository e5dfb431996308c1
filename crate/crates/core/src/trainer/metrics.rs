//! Evaluation metrics: ranking AUC, funnel violation rate, log loss, and a
//! paired t-test for run comparisons.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metric over empty input")]
    Empty,
    #[error("scores and labels differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("labels contain only one class")]
    SingleClass,
    #[error("scores contain a non-finite value")]
    NonFinite,
    #[error("need at least two tasks, got {0}")]
    TooFewTasks(usize),
}

/// Area under the ROC curve by the rank-sum formulation with average ranks
/// over tie groups; exactly equal to counting concordant pairs with ties at
/// half weight. Labels must be 0.0 or 1.0 and both classes must appear.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = labels.len() - n_pos;
    debug_assert!(labels.iter().all(|y| *y == 0.0 || *y == 1.0));
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // sum of (1-based, tie-averaged) ranks of the positives
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // positions i..=j share the average rank; construct it as a sum of
        // halves so it recombines exactly with the pairwise count
        let avg_rank = 0.5 * ((i + 1) as f64 + (j + 1) as f64);
        for &idx in &order[i..=j] {
            if labels[idx] == 1.0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos = n_pos as f64;
    let n_neg = n_neg as f64;
    Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Fraction of (sample, adjacent task pair) events where a later task is
/// scored strictly above the earlier one.
pub fn violation_rate(preds: &[Vec<f64>]) -> Result<f64, MetricsError> {
    if preds.len() < 2 {
        return Err(MetricsError::TooFewTasks(preds.len()));
    }
    let n = preds[0].len();
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    for p in preds {
        if p.len() != n {
            return Err(MetricsError::LengthMismatch(n, p.len()));
        }
    }
    let mut violations = 0usize;
    for pair in preds.windows(2) {
        for (prev, cur) in pair[0].iter().zip(&pair[1]) {
            if cur > prev {
                violations += 1;
            }
        }
    }
    Ok(violations as f64 / (n * (preds.len() - 1)) as f64)
}

/// Mean BCE of scores against 0/1 labels, clamped like the training loss.
pub fn log_loss(scores: &[f64], labels: &[f64]) -> Result<f64, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    let eps = crate::numerics::BCE_EPS;
    let sum: f64 = scores
        .iter()
        .zip(labels)
        .map(|(s, y)| {
            let p = s.clamp(eps, 1.0 - eps);
            -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(sum / scores.len() as f64)
}

/// Two-sided paired t-test. Returns `(t, p)`; degenerate inputs (fewer than
/// two pairs, or zero variance of the differences) report `t = 0, p = 1`
/// when the means agree and `t = inf, p = 0` when they do not.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MetricsError::Empty);
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok(if mean == 0.0 { (0.0, 1.0) } else { (f64::INFINITY, 0.0) });
    }
    let t = mean / (var / n).sqrt();
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("valid dof");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok((t, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// O(n^2) pairwise reference: concordant pairs count 1, ties 0.5.
    fn auc_pairwise(scores: &[f64], labels: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, (si, yi)) in scores.iter().zip(labels).enumerate() {
            for (sj, yj) in scores.iter().zip(labels).skip(i + 1) {
                if yi == yj {
                    continue;
                }
                den += 1.0;
                let (pos, neg) = if *yi == 1.0 { (si, sj) } else { (sj, si) };
                if pos > neg {
                    num += 1.0;
                } else if pos == neg {
                    num += 0.5;
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_hand_values() {
        // perfect, inverted, random-ish
        assert_eq!(auc(&[0.1, 0.4, 0.8], &[0.0, 0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.4, 0.1], &[0.0, 0.0, 1.0]).unwrap(), 0.0);
        // one concordant, one tied: (1 + 0.5) / 2
        assert_eq!(auc(&[0.5, 0.5, 0.2], &[1.0, 0.0, 0.0]).unwrap(), 0.75);
    }

    #[test]
    fn auc_matches_pairwise_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..50 {
            let n = 3 + (trial % 40);
            // coarse grid forces plenty of ties
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..7) as f64) / 7.0).collect();
            let mut labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
            labels[0] = 1.0;
            labels[1] = 0.0;
            let fast = auc(&scores, &labels).unwrap();
            let slow = auc_pairwise(&scores, &labels);
            assert!(
                (fast - slow).abs() <= 1e-12,
                "trial {trial}: {fast} vs {slow}"
            );
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scores: Vec<f64> = (0..200).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let labels: Vec<f64> = (0..200).map(|i| f64::from(i % 3 == 0)).collect();
        let base = auc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect();
        let scaled: Vec<f64> = scores.iter().map(|s| 100.0 + 5.0 * s).collect();
        assert_eq!(base, auc(&squashed, &labels).unwrap());
        assert_eq!(base, auc(&scaled, &labels).unwrap());
    }

    #[test]
    fn auc_error_cases() {
        assert!(matches!(auc(&[], &[]), Err(MetricsError::Empty)));
        assert!(matches!(auc(&[0.5], &[1.0, 0.0]), Err(MetricsError::LengthMismatch(1, 2))));
        assert!(matches!(auc(&[0.5, 0.6], &[1.0, 1.0]), Err(MetricsError::SingleClass)));
        assert!(matches!(auc(&[f64::NAN, 0.6], &[1.0, 0.0]), Err(MetricsError::NonFinite)));
    }

    #[test]
    fn violation_rate_counts_strict_inversions() {
        let preds = vec![
            vec![0.9, 0.5, 0.5, 0.2],
            vec![0.8, 0.6, 0.5, 0.3],
        ];
        // sample 1 (0.6 > 0.5) and sample 3 (0.3 > 0.2) violate; ties do not
        assert_eq!(violation_rate(&preds).unwrap(), 0.5);
        assert!(violation_rate(&preds[..1]).is_err());
    }

    #[test]
    fn paired_t_known_direction() {
        let a = [0.80, 0.82, 0.79, 0.81, 0.83];
        let b = [0.70, 0.71, 0.69, 0.72, 0.70];
        let (t, p) = paired_t_test(&a, &b).unwrap();
        assert!(t > 5.0);
        assert!(p < 0.01);
        let (t0, p0) = paired_t_test(&a, &a).unwrap();
        assert_eq!((t0, p0), (0.0, 1.0));
    }

    #[test]
    fn log_loss_matches_hand_computation() {
        let ll = log_loss(&[0.8, 0.4], &[1.0, 0.0]).unwrap();
        let expect = (-(0.8f64.ln()) - (0.6f64.ln())) / 2.0;
        assert!((ll - expect).abs() < 1e-15);
    }
}
