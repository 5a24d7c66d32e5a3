//! Evaluation protocol: top-k accuracy, retrieval-style mAP, confidence
//! histograms, and cross-dataset averaging.
//!
//! mAP here is the mean reciprocal rank of the true class in the sorted
//! predicted-probability list, so it ranges over `[1/C, 1]` and aggregates
//! every possible top-k score. Ties rank the lower class index first, which
//! keeps every metric deterministic.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Metrics of one model on one evaluation set.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalResult {
    pub top1: f64,
    pub top5: f64,
    pub map: f64,
    pub n_samples: usize,
    pub class_count: usize,
    /// Histogram of per-sample max predicted probability over `[1/C, 1]`.
    pub confidence_hist: Vec<usize>,
}

fn check_probs(probs: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    if probs.shape().len() != 2 {
        return Err(CoreError::shape(format!("expected [N, C] probabilities, got {:?}", probs.shape())));
    }
    let (n, c) = (probs.rows(), probs.shape()[1]);
    if labels.len() != n {
        return Err(CoreError::shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(CoreError::invalid(format!("label {l} out of range for C={c}")));
    }
    Ok((n, c))
}

/// Rank of the true class in the row, 1-based; ties broken toward lower
/// class indices.
fn true_class_rank(row: &[f64], label: usize) -> usize {
    let py = row[label];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(j, &p)| p > py || (p == py && j < label))
        .count();
    ahead + 1
}

/// 1-based rank of the true class for every sample (the `K_i` behind mAP).
pub fn true_class_ranks(probs: &Tensor, labels: &[usize]) -> Result<Vec<usize>> {
    let (n, _) = check_probs(probs, labels)?;
    Ok((0..n).map(|i| true_class_rank(probs.row(i), labels[i])).collect())
}

/// Fraction of samples whose true class ranks within the top `k`.
pub fn topk_accuracy(probs: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let (n, c) = check_probs(probs, labels)?;
    if k < 1 || k > c {
        return Err(CoreError::invalid(format!("k={k} outside 1..={c}")));
    }
    let hits = (0..n)
        .filter(|&i| true_class_rank(probs.row(i), labels[i]) <= k)
        .count();
    Ok(hits as f64 / n as f64)
}

/// Mean reciprocal rank of the true class: `(1/N) * sum 1/K_i`.
pub fn mean_ap(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = check_probs(probs, labels)?;
    let total: f64 = (0..n)
        .map(|i| 1.0 / true_class_rank(probs.row(i), labels[i]) as f64)
        .sum();
    Ok(total / n as f64)
}

/// Histogram of per-sample max probability over `[1/C, 1]` with `bins`
/// equal-width bins. Counts sum to `N`; out-of-range values clamp into the
/// boundary bins.
pub fn confidence_histogram(probs: &Tensor, labels: &[usize], bins: usize) -> Result<Vec<usize>> {
    let (n, c) = check_probs(probs, labels)?;
    if bins < 2 {
        return Err(CoreError::invalid(format!("bins={bins} must be >= 2")));
    }
    let lo = 1.0 / c as f64;
    let width = (1.0 - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for i in 0..n {
        let maxp = probs.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let idx = (((maxp - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
        counts[idx] += 1;
    }
    Ok(counts)
}

/// Full evaluation of a probability matrix against labels. `top5` uses
/// `k = min(5, C)`.
pub fn evaluate_probs(probs: &Tensor, labels: &[usize], hist_bins: usize) -> Result<EvalResult> {
    let (n, c) = check_probs(probs, labels)?;
    Ok(EvalResult {
        top1: topk_accuracy(probs, labels, 1)?,
        top5: topk_accuracy(probs, labels, 5.min(c))?,
        map: mean_ap(probs, labels)?,
        n_samples: n,
        class_count: c,
        confidence_hist: confidence_histogram(probs, labels, hist_bins)?,
    })
}

/// Unweighted cross-dataset averages (every dataset contributes equally).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AggregateMetrics {
    pub avg_top1: f64,
    pub avg_top5: f64,
    pub avg_map: f64,
    pub n_reports: usize,
}

/// Arithmetic mean of each metric across reports.
pub fn aggregate(reports: &[EvalResult]) -> Result<AggregateMetrics> {
    if reports.is_empty() {
        return Err(CoreError::invalid("aggregate needs at least one report".to_string()));
    }
    let n = reports.len() as f64;
    Ok(AggregateMetrics {
        avg_top1: reports.iter().map(|r| r.top1).sum::<f64>() / n,
        avg_top5: reports.iter().map(|r| r.top5).sum::<f64>() / n,
        avg_map: reports.iter().map(|r| r.map).sum::<f64>() / n,
        n_reports: reports.len(),
    })
}

/// Brute-force reciprocal rank: sort the gallery by probability (stable in
/// class index), locate the true class, return 1/position. The production
/// path never sorts; this oracle exists for tests and stays independent.
pub fn brute_force_reciprocal_rank(row: &[f64], label: usize) -> f64 {
    let mut gallery: Vec<(usize, f64)> = row.iter().copied().enumerate().collect();
    gallery.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let pos = gallery.iter().position(|&(j, _)| j == label).unwrap();
    1.0 / (pos + 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random_probs(rng: &mut SeededRng, n: usize, c: usize) -> Tensor {
        let mut values = Vec::with_capacity(n * c);
        for _ in 0..n {
            let mut row: Vec<f64> = (0..c).map(|_| rng.uniform() + 1e-9).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            values.extend(row);
        }
        Tensor::new(vec![n, c], values).unwrap()
    }

    /// Probability rows with prescribed true-class ranks [1,2,1,4] over C=4.
    fn ranked_fixture() -> (Tensor, Vec<usize>) {
        let rows = vec![
            vec![0.7, 0.1, 0.1, 0.1], // label 0 -> rank 1
            vec![0.5, 0.3, 0.1, 0.1], // label 1 -> rank 2
            vec![0.1, 0.1, 0.6, 0.2], // label 2 -> rank 1
            vec![0.4, 0.3, 0.2, 0.1], // label 3 -> rank 4
        ];
        (Tensor::from_rows(&rows).unwrap(), vec![0, 1, 2, 3])
    }

    #[test]
    fn topk_perfect_predictions() {
        let (probs, _) = ranked_fixture();
        let labels = vec![0, 0, 2, 0];
        assert_eq!(topk_accuracy(&probs, &labels, 1).unwrap(), 1.0);
    }

    #[test]
    fn topk_full_gallery_is_one() {
        let mut rng = SeededRng::new(1);
        let probs = random_probs(&mut rng, 20, 6);
        let labels: Vec<usize> = (0..20).map(|_| rng.index(6)).collect();
        assert_eq!(topk_accuracy(&probs, &labels, 6).unwrap(), 1.0);
    }

    #[test]
    fn topk_rank_fixture() {
        let (probs, labels) = ranked_fixture();
        assert_eq!(topk_accuracy(&probs, &labels, 2).unwrap(), 0.75);
        assert_eq!(topk_accuracy(&probs, &labels, 1).unwrap(), 0.5);
    }

    #[test]
    fn topk_rejects_bad_k() {
        let (probs, labels) = ranked_fixture();
        assert!(topk_accuracy(&probs, &labels, 0).is_err());
        assert!(topk_accuracy(&probs, &labels, 5).is_err());
    }

    #[test]
    fn map_rank_fixture() {
        let (probs, labels) = ranked_fixture();
        assert_eq!(mean_ap(&probs, &labels).unwrap(), (1.0 + 0.5 + 1.0 + 0.25) / 4.0);
    }

    #[test]
    fn map_bounds_exact() {
        // Always first -> 1.0; always last -> 1/C.
        let first = Tensor::from_rows(&[vec![0.9, 0.05, 0.05], vec![0.8, 0.1, 0.1]]).unwrap();
        assert_eq!(mean_ap(&first, &[0, 0]).unwrap(), 1.0);
        let last = Tensor::from_rows(&[vec![0.5, 0.3, 0.2], vec![0.6, 0.3, 0.1]]).unwrap();
        assert_eq!(mean_ap(&last, &[2, 2]).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn map_matches_brute_force_oracle_exactly() {
        let mut rng = SeededRng::new(2);
        for _ in 0..1000 {
            let c = 2 + rng.index(9);
            let probs = random_probs(&mut rng, 1, c);
            let label = rng.index(c);
            let got = mean_ap(&probs, &[label]).unwrap();
            let want = brute_force_reciprocal_rank(probs.row(0), label);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn map_ties_prefer_lower_class_index() {
        let probs = Tensor::from_rows(&[vec![0.4, 0.4, 0.2]]).unwrap();
        // Class 1 ties class 0; the lower index ranks first.
        assert_eq!(mean_ap(&probs, &[0]).unwrap(), 1.0);
        assert_eq!(mean_ap(&probs, &[1]).unwrap(), 0.5);
    }

    #[test]
    fn random_rank_expectation_harmonic() {
        // With the true-class rank uniform on {1..C}, E[1/K] = H_C / C.
        let c = 6usize;
        let h_c: f64 = (1..=c).map(|k| 1.0 / k as f64).sum();
        let expected = h_c / c as f64;
        let var: f64 =
            (1..=c).map(|k| (1.0 / k as f64 - expected).powi(2)).sum::<f64>() / c as f64;
        let n = 10_000usize;
        let mut rng = SeededRng::new(3);
        let mut total = 0.0;
        for _ in 0..n {
            // Uniform rank oracle: put the true class at a uniform position.
            let rank = 1 + rng.index(c);
            total += 1.0 / rank as f64;
        }
        let mean = total / n as f64;
        let sigma = (var / n as f64).sqrt();
        assert!((mean - expected).abs() < 3.0 * sigma, "mean {mean} vs {expected}");
    }

    #[test]
    fn metrics_invariant_under_joint_class_permutation() {
        let mut rng = SeededRng::new(4);
        let c = 5;
        let probs = random_probs(&mut rng, 30, c);
        let labels: Vec<usize> = (0..30).map(|_| rng.index(c)).collect();
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..c).collect();
            rng.shuffle(&mut p);
            p
        };
        let mut permuted = Tensor::zeros(vec![30, c]);
        for i in 0..30 {
            for (j, &pj) in perm.iter().enumerate() {
                permuted.row_mut(i)[pj] = probs.row(i)[j];
            }
        }
        let plabels: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        for k in 1..=c {
            assert_eq!(
                topk_accuracy(&probs, &labels, k).unwrap(),
                topk_accuracy(&permuted, &plabels, k).unwrap()
            );
        }
        assert_eq!(mean_ap(&probs, &labels).unwrap(), mean_ap(&permuted, &plabels).unwrap());
    }

    #[test]
    fn histogram_uniform_lands_in_lowest_bin() {
        let c = 4;
        let probs = Tensor::from_rows(&[vec![0.25; 4], vec![0.25; 4]]).unwrap();
        let hist = confidence_histogram(&probs, &[0, 1], 20).unwrap();
        assert_eq!(hist[0], 2);
        assert_eq!(hist.iter().sum::<usize>(), 2);
        let _ = c;
    }

    #[test]
    fn histogram_one_hot_lands_in_top_bin() {
        let probs = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let hist = confidence_histogram(&probs, &[0], 20).unwrap();
        assert_eq!(hist[19], 1);
    }

    #[test]
    fn histogram_counts_sum_to_n() {
        let mut rng = SeededRng::new(5);
        let probs = random_probs(&mut rng, 137, 7);
        let labels: Vec<usize> = (0..137).map(|_| rng.index(7)).collect();
        let hist = confidence_histogram(&probs, &labels, 13).unwrap();
        assert_eq!(hist.iter().sum::<usize>(), 137);
    }

    #[test]
    fn aggregate_is_identity_on_single_report() {
        let r = EvalResult {
            top1: 0.8,
            top5: 0.95,
            map: 0.85,
            n_samples: 10,
            class_count: 3,
            confidence_hist: vec![0; 20],
        };
        let agg = aggregate(std::slice::from_ref(&r)).unwrap();
        assert_eq!((agg.avg_top1, agg.avg_top5, agg.avg_map), (0.8, 0.95, 0.85));
    }

    #[test]
    fn aggregate_unweighted_mean() {
        let mk = |top1: f64| EvalResult {
            top1,
            top5: 1.0,
            map: top1,
            n_samples: 5,
            class_count: 2,
            confidence_hist: vec![],
        };
        let agg = aggregate(&[mk(0.8), mk(0.9)]).unwrap();
        assert!((agg.avg_top1 - 0.85).abs() < 1e-15);
        assert!(aggregate(&[]).is_err());
    }
}
