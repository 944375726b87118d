use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::objective::SimilarityMatrix;

/// Text-to-video retrieval metrics over a query set with diagonal ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub r50: f64,
    pub mdr: f64,
    pub mnr: f64,
    pub n_queries: usize,
    pub n_candidates: usize,
}

impl RetrievalMetrics {
    pub fn geometric_mean(&self) -> f64 {
        geometric_mean_selection(self.r1, self.r5, self.r10)
    }

    pub fn recall(&self, n: usize) -> Option<f64> {
        match n {
            1 => Some(self.r1),
            5 => Some(self.r5),
            10 => Some(self.r10),
            50 => Some(self.r50),
            _ => None,
        }
    }
}

/// `1 + #{j ≠ truth : row[j] ≥ row[truth]}`: candidates tied with the truth
/// rank ahead of it.
pub fn rank_of_truth(row: &[f64], truth: usize) -> usize {
    let t = row[truth];
    1 + row.iter().enumerate().filter(|&(j, &v)| j != truth && v >= t).count()
}

/// Median with the midpoint average for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Metrics from per-query ranks.
pub fn metrics_from_ranks(ranks: &[usize], n_candidates: usize) -> Result<RetrievalMetrics> {
    if ranks.is_empty() || n_candidates == 0 {
        return Err(EvalError::Empty);
    }
    let n = ranks.len() as f64;
    let recall = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let as_f: Vec<f64> = ranks.iter().map(|&r| r as f64).collect();
    Ok(RetrievalMetrics {
        r1: recall(1),
        r5: recall(5),
        r10: recall(10),
        r50: recall(50),
        mdr: median(&as_f).expect("nonempty"),
        mnr: as_f.iter().sum::<f64>() / n,
        n_queries: ranks.len(),
        n_candidates,
    })
}

/// Query `i`'s ground truth is candidate `i`.
pub fn compute_metrics(s: &SimilarityMatrix) -> Result<RetrievalMetrics> {
    if s.rows() == 0 || s.cols() == 0 {
        return Err(EvalError::Empty);
    }
    if s.rows() > s.cols() {
        return Err(EvalError::Config(format!(
            "{} queries but only {} candidates: diagonal ground truth needs rows <= cols",
            s.rows(),
            s.cols()
        )));
    }
    let ranks: Vec<usize> = (0..s.rows()).map(|i| rank_of_truth(s.row(i), i)).collect();
    metrics_from_ranks(&ranks, s.cols())
}

/// `(R@1 · R@5 · R@10)^(1/3)`, zero when any recall is zero.
pub fn geometric_mean_selection(r1: f64, r5: f64, r10: f64) -> f64 {
    if r1 <= 0.0 || r5 <= 0.0 || r10 <= 0.0 {
        0.0
    } else {
        (r1 * r5 * r10).cbrt()
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Sorts candidates by descending score, truth placed after its ties.
    fn sort_rank(row: &[f64], truth: usize) -> usize {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then_with(|| (a == truth).cmp(&(b == truth))));
        order.iter().position(|&j| j == truth).unwrap() + 1
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of_truth(&[0.9, 0.1, 0.2], 0), 1);
        assert_eq!(rank_of_truth(&[0.9, 0.9, 0.2], 0), 2);
    }

    #[test]
    fn rank_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = 100;
            // coarse values force ties
            let row: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 20.0).floor()).collect();
            let t = rng.random_range(0..n);
            assert_eq!(rank_of_truth(&row, t), sort_rank(&row, t));
        }
    }

    #[test]
    fn identity_dominant_is_perfect() {
        let s = SimilarityMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let m = compute_metrics(&s).unwrap();
        assert_eq!((m.r1, m.mdr, m.mnr), (1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_computed_ranks() {
        let m = metrics_from_ranks(&[1, 2, 9, 10], 10).unwrap();
        assert_eq!(m.r5, 0.5);
        assert_eq!(m.mdr, 5.5);
        assert_eq!(m.mnr, 5.5);
        assert_eq!(m.r1, 0.25);
        assert_eq!(m.r10, 1.0);
    }

    #[test]
    fn empty_is_an_error() {
        let s = SimilarityMatrix::new(0, 0, vec![]).unwrap();
        assert!(matches!(compute_metrics(&s), Err(EvalError::Empty)));
    }

    #[test]
    fn geometric_mean_examples() {
        assert_eq!(geometric_mean_selection(1.0, 1.0, 1.0), 1.0);
        assert_eq!(geometric_mean_selection(0.0, 0.5, 0.9), 0.0);
        assert!((geometric_mean_selection(0.1, 0.3, 0.5) - 0.015f64.cbrt()).abs() < 1e-15);
        assert!((geometric_mean_selection(0.1, 0.3, 0.5) - 0.2466).abs() < 1e-4);
    }

    #[test]
    fn monotone_transform_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 40;
        let s = SimilarityMatrix::new(n, n, (0..n * n).map(|_| rng.random::<f64>()).collect()).unwrap();
        let a = compute_metrics(&s).unwrap();
        let b = compute_metrics(&s.map(|v| (3.0 * v).exp() - 7.0)).unwrap();
        assert_eq!(a, b);
    }

    proptest::proptest! {
        #[test]
        fn recall_is_monotone_and_ranks_bounded(seed in 0u64..10_000, n in 1usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = SimilarityMatrix::new(n, n, (0..n * n).map(|_| rng.random::<f64>()).collect()).unwrap();
            let m = compute_metrics(&s).unwrap();
            proptest::prop_assert!(m.r1 <= m.r5 && m.r5 <= m.r10 && m.r10 <= m.r50);
            proptest::prop_assert!(m.mdr >= 1.0 && m.mdr <= n as f64);
            proptest::prop_assert!(m.mnr >= 1.0 && m.mnr <= n as f64);
        }
    }
}
