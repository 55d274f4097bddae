//! Refresh scheduling and V-verify token selection. Everything here is a
//! pure function of its arguments.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::{cosine_similarity, l2_distance, Matrix};

/// Slack added before flooring `ratio · len`, so ratios such as `0.7` that
/// are not exactly representable still select `⌊0.7 · len⌋` rows.
const RATIO_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMetric {
    /// Lower cosine similarity means more changed.
    #[default]
    Cosine,
    /// Larger Euclidean distance means more changed.
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CachePolicy {
    /// Prompt features are recomputed at steps `k` with `k % prompt_interval == 0`.
    pub prompt_interval: usize,
    /// Response features are recomputed at steps `k` with `k % response_interval == 0`.
    pub response_interval: usize,
    /// Fraction of response tokens re-verified at steps with no refresh.
    pub update_ratio: f64,
    pub metric: SimilarityMetric,
    /// When false every step runs the uncached forward pass.
    pub enabled: bool,
}

impl Default for CachePolicy {
    fn default() -> Self {
        Self {
            prompt_interval: 16,
            response_interval: 8,
            update_ratio: 0.25,
            metric: SimilarityMetric::Cosine,
            enabled: true,
        }
    }
}

impl CachePolicy {
    pub fn new(prompt_interval: usize, response_interval: usize, update_ratio: f64) -> Self {
        Self {
            prompt_interval,
            response_interval,
            update_ratio,
            ..Self::default()
        }
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt_interval == 0 || self.response_interval == 0 {
            return Err(Error::Config(format!(
                "refresh intervals must be at least 1 (prompt {}, response {})",
                self.prompt_interval, self.response_interval
            )));
        }
        if !(0.0..=1.0).contains(&self.update_ratio) {
            return Err(Error::Config(format!(
                "update ratio {} outside [0, 1]",
                self.update_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefreshFlags {
    pub prompt: bool,
    pub response: bool,
}

/// What one layer did at one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerCase {
    /// First pass at step `K`: full compute, every cache entry populated.
    Init,
    /// Both refresh flags fired.
    Full,
    PromptOnly,
    ResponseOnly,
    /// Neither flag fired and `ρ > 0`: V-verify and partial recompute.
    Adaptive,
    /// Neither flag fired and `ρ = 0`: everything read from cache.
    Reuse,
    /// Reference path, no cache involved.
    Uncached,
}

impl LayerCase {
    pub fn code(self) -> char {
        match self {
            LayerCase::Init => 'I',
            LayerCase::Full => 'F',
            LayerCase::PromptOnly => 'P',
            LayerCase::ResponseOnly => 'R',
            LayerCase::Adaptive => 'A',
            LayerCase::Reuse => 'Z',
            LayerCase::Uncached => 'U',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        Some(match c {
            'I' => LayerCase::Init,
            'F' => LayerCase::Full,
            'P' => LayerCase::PromptOnly,
            'R' => LayerCase::ResponseOnly,
            'A' => LayerCase::Adaptive,
            'Z' => LayerCase::Reuse,
            'U' => LayerCase::Uncached,
            _ => return None,
        })
    }
}

impl RefreshFlags {
    pub fn case(self, update_ratio: f64) -> LayerCase {
        match (self.prompt, self.response) {
            (true, true) => LayerCase::Full,
            (true, false) => LayerCase::PromptOnly,
            (false, true) => LayerCase::ResponseOnly,
            (false, false) if update_ratio > 0.0 => LayerCase::Adaptive,
            (false, false) => LayerCase::Reuse,
        }
    }
}

/// Refresh decision for step `k` (`1 ≤ k < K`). Step `K` is always the
/// initialization pass and never consults this.
pub fn refresh_flags(k: usize, policy: &CachePolicy) -> RefreshFlags {
    RefreshFlags {
        prompt: k.is_multiple_of(policy.prompt_interval),
        response: k.is_multiple_of(policy.response_interval),
    }
}

/// `⌊ratio · len⌋`, clamped to `len`.
pub fn update_count(len: usize, ratio: f64) -> usize {
    if ratio <= 0.0 {
        return 0;
    }
    ((ratio * len as f64 + RATIO_SLACK).floor() as usize).min(len)
}

/// Indices of the `⌊ratio · len⌋` most-changed tokens, ascending. Ties on
/// score go to the lower index.
pub fn select_update_indices(scores: &[f64], ratio: f64, metric: SimilarityMetric) -> Vec<usize> {
    let n = update_count(scores.len(), ratio);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    match metric {
        SimilarityMetric::Cosine => order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b))),
        SimilarityMetric::L2 => order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))),
    }
    order.truncate(n);
    order.sort_unstable();
    order
}

/// Row-wise similarity (cosine) or distance (l2) between new and cached values.
pub fn score_tokens(v_new: &Matrix, v_cached: &Matrix, metric: SimilarityMetric) -> Result<Vec<f64>> {
    contract!(
        v_new.rows() == v_cached.rows() && v_new.cols() == v_cached.cols(),
        "scoring {}x{} against {}x{}",
        v_new.rows(),
        v_new.cols(),
        v_cached.rows(),
        v_cached.cols()
    );
    v_new
        .iter_rows()
        .zip(v_cached.iter_rows())
        .map(|(a, b)| match metric {
            SimilarityMetric::Cosine => cosine_similarity(a, b),
            SimilarityMetric::L2 => l2_distance(a, b),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn flags_follow_mod_rule() {
        let p = CachePolicy::new(100, 6, 0.25);
        assert_eq!(
            refresh_flags(100, &p),
            RefreshFlags {
                prompt: true,
                response: false
            }
        );
        assert_eq!(
            refresh_flags(96, &p),
            RefreshFlags {
                prompt: false,
                response: true
            }
        );

        let every = CachePolicy::new(1, 1, 0.25);
        for k in 1..50 {
            assert_eq!(refresh_flags(k, &every).case(0.25), LayerCase::Full);
        }

        let p = CachePolicy::new(50, 6, 0.25);
        assert_eq!(
            refresh_flags(30, &p),
            RefreshFlags {
                prompt: false,
                response: true
            }
        );
    }

    #[test]
    fn case_dispatch() {
        let f = |p, r| RefreshFlags { prompt: p, response: r };
        assert_eq!(f(true, true).case(0.0), LayerCase::Full);
        assert_eq!(f(true, false).case(0.5), LayerCase::PromptOnly);
        assert_eq!(f(false, true).case(0.5), LayerCase::ResponseOnly);
        assert_eq!(f(false, false).case(0.5), LayerCase::Adaptive);
        assert_eq!(f(false, false).case(0.0), LayerCase::Reuse);
        for c in "IFPRAZU".chars() {
            assert_eq!(LayerCase::from_code(c).unwrap().code(), c);
        }
    }

    #[test]
    fn policy_validation() {
        assert!(CachePolicy::new(0, 1, 0.1).validate().is_err());
        assert!(CachePolicy::new(1, 0, 0.1).validate().is_err());
        assert!(CachePolicy::new(1, 1, 1.5).validate().is_err());
        assert!(CachePolicy::new(1, 1, -0.1).validate().is_err());
        assert!(CachePolicy::new(1, 1, 1.0).validate().is_ok());
    }

    #[test]
    fn selection_example() {
        let scores = [0.9, 0.2, 0.8, 0.95, 0.1, 0.99, 0.7, 0.85];
        assert_eq!(
            select_update_indices(&scores, 0.25, SimilarityMetric::Cosine),
            vec![1, 4]
        );
        assert!(select_update_indices(&scores, 0.0, SimilarityMetric::Cosine).is_empty());
        assert_eq!(
            select_update_indices(&scores, 1.0, SimilarityMetric::Cosine),
            (0..8).collect::<Vec<_>>()
        );
        // Distances: larger is more changed.
        assert_eq!(select_update_indices(&scores, 0.25, SimilarityMetric::L2), vec![3, 5]);
    }

    #[test]
    fn selection_ties_prefer_lower_index() {
        let scores = [0.5, 0.1, 0.5, 0.1, 0.5];
        assert_eq!(select_update_indices(&scores, 0.2, SimilarityMetric::Cosine), vec![1]);
        assert_eq!(
            select_update_indices(&scores, 0.6, SimilarityMetric::Cosine),
            vec![0, 1, 3]
        );
        assert_eq!(select_update_indices(&scores, 0.2, SimilarityMetric::L2), vec![0]);
    }

    #[test]
    fn scoring() {
        let v = Matrix::from_rows(3, &[[1.0, 2.0, 3.0], [0.5, -1.0, 2.0]]).unwrap();
        let s = score_tokens(&v, &v, SimilarityMetric::Cosine).unwrap();
        assert!(s.iter().all(|&x| (x - 1.0).abs() < 1e-12));

        let neg = Matrix::from_rows(3, &[[1.0, 2.0, 3.0], [-0.5, 1.0, -2.0]]).unwrap();
        let s = score_tokens(&neg, &v, SimilarityMetric::Cosine).unwrap();
        assert!((s[1] + 1.0).abs() < 1e-12);

        let d = score_tokens(&v, &v, SimilarityMetric::L2).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
        assert!(score_tokens(&v, &Matrix::zeros(1, 3), SimilarityMetric::Cosine).is_err());
    }

    #[test]
    fn scoring_matches_scalar_loop() {
        let rows = 9;
        let a = Matrix::from_vec(rows, 5, (0..45).map(|i| ((i * 7) as f32).sin()).collect()).unwrap();
        let b = Matrix::from_vec(rows, 5, (0..45).map(|i| ((i * 3) as f32).cos()).collect()).unwrap();
        let got = score_tokens(&a, &b, SimilarityMetric::Cosine).unwrap();
        for i in 0..rows {
            let (x, y) = (a.row(i), b.row(i));
            let dot: f64 = x.iter().zip(y).map(|(p, q)| f64::from(*p) * f64::from(*q)).sum();
            let nx: f64 = x.iter().map(|p| f64::from(*p).powi(2)).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|p| f64::from(*p).powi(2)).sum::<f64>().sqrt();
            assert!((got[i] - dot / (nx * ny)).abs() < 1e-12);
        }
    }

    #[test]
    fn update_count_matches_exact_floor() {
        for len in 1..=64usize {
            for step in 0..=20usize {
                let expected = step * len / 20;
                assert_eq!(update_count(len, step as f64 / 20.0), expected);
                assert_eq!(update_count(len, step as f64 * 0.05), expected, "len {len} step {step}");
            }
        }
    }

    proptest! {
        #[test]
        fn selection_is_permutation_equivariant(
            (scores, perm) in (1usize..40).prop_flat_map(|n| (
                proptest::collection::vec(-1.0f64..1.0, n),
                Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
            )),
            ratio in 0.0f64..=1.0,
        ) {
            // Distinct scores so ties cannot mask the check.
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[0] < w[1]));

            let permuted: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
            let base = select_update_indices(&scores, ratio, SimilarityMetric::Cosine);
            let got = select_update_indices(&permuted, ratio, SimilarityMetric::Cosine);
            let mut mapped: Vec<usize> = got.iter().map(|&i| perm[i]).collect();
            mapped.sort_unstable();
            prop_assert_eq!(mapped, base);
        }

        #[test]
        fn full_ratio_selects_everything_for_both_metrics(
            scores in proptest::collection::vec(-10.0f64..10.0, 1..64),
        ) {
            let all: Vec<usize> = (0..scores.len()).collect();
            prop_assert_eq!(select_update_indices(&scores, 1.0, SimilarityMetric::Cosine), all.clone());
            prop_assert_eq!(select_update_indices(&scores, 1.0, SimilarityMetric::L2), all);
        }
    }
}
