//! Per-query domain classification and user routing-bias application.
//!
//! The classifier is the deterministic keyword path: score each domain by
//! whole-word keyword hits in the normalized query, then softmax at the
//! router temperature. The bias step is a scaled additive adjustment with
//! clamp-and-normalize; an all-clamped result falls back to uniform.

use crate::numerics::{softmax, NumericsError, Vector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RouterError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("routing vector length {got} does not match bias length {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("router config invalid: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Keyword router configuration: one keyword list per domain plus the
/// softmax temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub k: usize,
    pub domain_keywords: Vec<Vec<String>>,
    pub temperature: f64,
}

impl RouterConfig {
    pub fn validate(&self) -> Result<(), RouterError> {
        if self.k == 0 || self.domain_keywords.len() != self.k {
            return Err(RouterError::BadConfig(format!(
                "k = {} but {} keyword lists",
                self.k,
                self.domain_keywords.len()
            )));
        }
        if self.domain_keywords.iter().any(|l| l.is_empty()) {
            return Err(RouterError::BadConfig("empty keyword list".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(RouterError::BadConfig(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Per-user routing bias: domain affinity scores plus the bias scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingBias {
    pub bias: Vector,
    pub lambda: f64,
}

impl RoutingBias {
    pub fn zero(k: usize, lambda: f64) -> Self {
        RoutingBias {
            bias: Vector::zeros(k),
            lambda,
        }
    }
}

/// Classifies a query into a distribution over domains: keyword-hit counts
/// softmaxed at the router temperature. Matching is case-insensitive
/// whole-word matching over whitespace/punctuation-split tokens.
pub fn classify(query: &str, config: &RouterConfig) -> Result<Vector, RouterError> {
    config.validate()?;
    let words: Vec<String> = query
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect();
    if words.is_empty() {
        return Err(RouterError::EmptyQuery);
    }
    let mut scores = Vector::zeros(config.k);
    for (i, keywords) in config.domain_keywords.iter().enumerate() {
        let count = words
            .iter()
            .filter(|w| keywords.iter().any(|k| k == *w))
            .count();
        scores.set(i, count as f64);
    }
    Ok(softmax(&scores, config.temperature)?)
}

/// Scaled additive bias with clamp-and-normalize:
/// `w~_i = w0_i + lambda * b_i`, `w_i = max(w~_i, 0) / sum_j max(w~_j, 0)`,
/// falling back to uniform when everything clamps to zero.
pub fn apply_bias(w0: &Vector, bias: &RoutingBias) -> Result<Vector, RouterError> {
    if w0.len() != bias.bias.len() {
        return Err(RouterError::LengthMismatch {
            got: w0.len(),
            want: bias.bias.len(),
        });
    }
    let k = w0.len();
    let mut clamped = Vec::with_capacity(k);
    let mut unchanged = true;
    for i in 0..k {
        let adjusted = w0.get(i) + bias.lambda * bias.bias.get(i);
        unchanged &= adjusted == w0.get(i);
        clamped.push(adjusted.max(0.0));
    }
    // A no-op adjustment must be the exact identity, not a renormalization.
    if unchanged && w0.data().iter().all(|v| *v >= 0.0) {
        return Ok(w0.clone());
    }
    let total: f64 = clamped.iter().sum();
    if total == 0.0 {
        return Ok(Vector::from_vec(vec![1.0 / k as f64; k]));
    }
    Ok(Vector::from_vec(
        clamped.into_iter().map(|v| v / total).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn test_config() -> RouterConfig {
        RouterConfig {
            k: 4,
            domain_keywords: vec![
                vec!["firewall".into(), "breach".into(), "sql".into()],
                vec!["compiler".into(), "loop".into()],
                vec!["median".into(), "table".into()],
                vec!["weather".into(), "recipe".into()],
            ],
            temperature: 2.0,
        }
    }

    #[test]
    fn zero_hits_gives_uniform() {
        let w = classify("hello world nothing known", &test_config()).unwrap();
        for v in w.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn two_hits_matches_hand_softmax() {
        // "firewall breach" scores [2,0,0,0] at T = 2.
        let w = classify("firewall breach report", &test_config()).unwrap();
        let want = [0.4754, 0.1749, 0.1749, 0.1749];
        for (g, e) in w.data().iter().zip(want) {
            assert!((g - e).abs() < 1e-4, "got {g}, want {e}");
        }
    }

    #[test]
    fn classification_is_case_insensitive() {
        let a = classify("SQL injection", &test_config()).unwrap();
        let b = classify("sql injection", &test_config()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_query_is_rejected() {
        assert!(matches!(
            classify("", &test_config()),
            Err(RouterError::EmptyQuery)
        ));
        assert!(matches!(
            classify("  ... ", &test_config()),
            Err(RouterError::EmptyQuery)
        ));
    }

    #[test]
    fn zero_bias_is_identity() {
        let w0 = Vector::from_vec(vec![0.4, 0.3, 0.2, 0.1]);
        let out = apply_bias(&w0, &RoutingBias::zero(4, 0.5)).unwrap();
        assert_eq!(out, w0);
    }

    #[test]
    fn worked_bias_example() {
        let w0 = Vector::from_vec(vec![0.25; 4]);
        let bias = RoutingBias {
            bias: Vector::from_vec(vec![1.0, 0.0, 0.0, -1.0]),
            lambda: 0.5,
        };
        let w = apply_bias(&w0, &bias).unwrap();
        let want = [0.6, 0.2, 0.2, 0.0];
        for (g, e) in w.data().iter().zip(want) {
            assert!((g - e).abs() < 1e-12, "got {g}, want {e}");
        }
    }

    #[test]
    fn all_clamped_falls_back_to_uniform() {
        let w0 = Vector::from_vec(vec![0.25; 4]);
        let bias = RoutingBias {
            bias: Vector::from_vec(vec![-1.0; 4]),
            lambda: 0.5,
        };
        let w = apply_bias(&w0, &bias).unwrap();
        for v in w.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn bias_length_mismatch() {
        let w0 = Vector::from_vec(vec![0.5, 0.5]);
        assert!(matches!(
            apply_bias(&w0, &RoutingBias::zero(3, 0.5)),
            Err(RouterError::LengthMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn biased_weights_stay_on_simplex(
            w0 in proptest::collection::vec(0.0f64..1.0, 2..8),
            b in proptest::collection::vec(-2.0f64..2.0, 2..8),
            lambda in 0.0f64..2.0,
        ) {
            let k = w0.len().min(b.len());
            let total: f64 = w0[..k].iter().sum();
            prop_assume!(total > 1e-9);
            let w0 = Vector::from_vec(w0[..k].iter().map(|v| v / total).collect());
            let bias = RoutingBias { bias: Vector::from_vec(b[..k].to_vec()), lambda };
            let w = apply_bias(&w0, &bias).unwrap();
            let sum: f64 = w.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(w.data().iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn raising_one_bias_entry_never_lowers_its_weight(
            seed_w in proptest::collection::vec(0.01f64..1.0, 4),
            b in proptest::collection::vec(-1.0f64..1.0, 4),
            idx in 0usize..4,
            boost in 0.0f64..2.0,
        ) {
            let total: f64 = seed_w.iter().sum();
            let w0 = Vector::from_vec(seed_w.iter().map(|v| v / total).collect());
            let lambda = 0.5;
            let base = RoutingBias { bias: Vector::from_vec(b.clone()), lambda };
            let mut boosted_b = b.clone();
            boosted_b[idx] += boost;
            let boosted = RoutingBias { bias: Vector::from_vec(boosted_b), lambda };
            let w_before = apply_bias(&w0, &base).unwrap();
            let w_after = apply_bias(&w0, &boosted).unwrap();
            prop_assert!(w_after.get(idx) >= w_before.get(idx) - 1e-12);
        }

        #[test]
        fn zero_lambda_is_identity_on_simplex(
            seed_w in proptest::collection::vec(0.01f64..1.0, 4),
            b in proptest::collection::vec(-1.0f64..1.0, 4),
        ) {
            let total: f64 = seed_w.iter().sum();
            let w0 = Vector::from_vec(seed_w.iter().map(|v| v / total).collect());
            let bias = RoutingBias { bias: Vector::from_vec(b), lambda: 0.0 };
            let w = apply_bias(&w0, &bias).unwrap();
            prop_assert!(w.max_abs_diff(&w0) < 1e-12);
        }
    }
}
