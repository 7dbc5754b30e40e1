//! Probability estimates and decisions read off a logit vector.
//!
//! Under the softmax surrogate the expert-correctness estimate is the odds
//! of the deferral mass, `p_⊥ / (1 - p_⊥)`, which is unbounded above. Under
//! the one-vs-all surrogate every head is passed through the inverse link
//! of `φ` on its own, so the estimate stays in `(0, 1)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::LogitVector;
use crate::error::Error;
use crate::losses::{softmax, BinaryLoss};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SurrogateKind {
    #[serde(rename = "softmax")]
    Softmax,
    #[serde(rename = "ova")]
    OneVsAll,
}

impl SurrogateKind {
    pub fn name(self) -> &'static str {
        match self {
            SurrogateKind::Softmax => "softmax",
            SurrogateKind::OneVsAll => "ova",
        }
    }
}

impl fmt::Display for SurrogateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SurrogateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "softmax" => Ok(SurrogateKind::Softmax),
            "ova" | "one_vs_all" => Ok(SurrogateKind::OneVsAll),
            other => Err(Error::Config(format!("unknown surrogate {other:?}"))),
        }
    }
}

/// Deferral mass: softmax component of `g_⊥` over all `K+1` logits.
pub fn p_defer_softmax(g: &LogitVector) -> f64 {
    softmax(g)[g.num_classes()]
}

/// Odds transform of the deferral mass. Exceeds one exactly when
/// `p_⊥ > 1/2`.
pub fn p_expert_softmax(g: &LogitVector) -> f64 {
    odds(p_defer_softmax(g))
}

fn odds(p: f64) -> f64 {
    p / (1.0 - p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clamped {
    pub value: f64,
    /// True only when the raw value strictly exceeded one.
    pub clamped: bool,
}

pub fn clamp_unit(raw: f64) -> Clamped {
    if raw > 1.0 {
        Clamped {
            value: 1.0,
            clamped: true,
        }
    } else {
        Clamped {
            value: raw,
            clamped: false,
        }
    }
}

pub fn p_expert_softmax_clamped(g: &LogitVector) -> Clamped {
    clamp_unit(p_expert_softmax(g))
}

/// `softmax_k(g) / (1 - p_⊥(g))`, evaluated as a softmax over the class
/// scores alone (the same quantity without the cancellation).
pub fn p_class_softmax(g: &LogitVector, k: usize) -> f64 {
    class_softmax(g)[k]
}

fn class_softmax(g: &LogitVector) -> Vec<f64> {
    let max = g
        .class_scores
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = g.class_scores.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn p_expert_ova(g: &LogitVector, phi: BinaryLoss) -> f64 {
    phi.inverse_link(g.defer_score)
}

/// Per-class estimate; the `K` values are not normalized.
pub fn p_class_ova(g: &LogitVector, k: usize, phi: BinaryLoss) -> f64 {
    phi.inverse_link(g.class_scores[k])
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemDecision {
    pub deferred: bool,
    /// Defined whether or not the system defers.
    pub predicted_class: usize,
    pub classifier_confidence: f64,
    /// Raw estimate: the odds `p_⊥/(1-p_⊥)` for softmax (may exceed one),
    /// the sigmoid of `g_⊥` for one-vs-all.
    pub expert_confidence: f64,
    /// `expert_confidence` clamped into `(0, 1]`.
    pub expert_confidence_clamped: f64,
    pub clamped: bool,
    /// One-vs-all only: every head is negative ("none of the above"). The
    /// decision still follows the argmax rule.
    pub none_of_the_above: bool,
}

/// Classifier is the argmax over class scores; the system defers when
/// `g_⊥ >= max_k g_k`.
pub fn decide(g: &LogitVector, surrogate: SurrogateKind, phi: BinaryLoss) -> SystemDecision {
    let predicted_class = argmax(&g.class_scores);
    let best = g.class_scores[predicted_class];
    let deferred = g.defer_score >= best;
    match surrogate {
        SurrogateKind::Softmax => {
            let raw = p_expert_softmax(g);
            let c = clamp_unit(raw);
            SystemDecision {
                deferred,
                predicted_class,
                classifier_confidence: p_class_softmax(g, predicted_class),
                expert_confidence: raw,
                expert_confidence_clamped: c.value,
                clamped: c.clamped,
                none_of_the_above: false,
            }
        }
        SurrogateKind::OneVsAll => {
            let pm = p_expert_ova(g, phi);
            SystemDecision {
                deferred,
                predicted_class,
                classifier_confidence: p_class_ova(g, predicted_class, phi),
                expert_confidence: pm,
                expert_confidence_clamped: pm,
                clamped: false,
                none_of_the_above: best < 0.0 && g.defer_score < 0.0,
            }
        }
    }
}

/// `(classifier score, deferral score)` compared by budgeted deferral.
///
/// Softmax uses the raw masses `max_k softmax_k` and `softmax_⊥`, so that
/// `defer >= classifier` coincides with the native `g_⊥ >= max_k g_k` rule.
/// One-vs-all uses `max_k γ⁻¹(g_k)` and `γ⁻¹(g_⊥)`.
pub fn budget_scores(g: &LogitVector, surrogate: SurrogateKind, phi: BinaryLoss) -> (f64, f64) {
    let (clf, defer) = match surrogate {
        SurrogateKind::Softmax => {
            let s = softmax(g);
            let k = g.num_classes();
            let clf = s[..k].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (clf, s[k])
        }
        SurrogateKind::OneVsAll => {
            let best = g.class_scores[argmax(&g.class_scores)];
            (phi.inverse_link(best), phi.inverse_link(g.defer_score))
        }
    };
    // Distinct logits can round to equal probabilities; keep the score
    // comparison in step with the logit comparison.
    let native = g.defer_score >= g.class_scores[argmax(&g.class_scores)];
    match (native, defer >= clf) {
        (false, true) => (clf, clf.next_down()),
        (true, false) => (clf, clf),
        _ => (clf, defer),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::from_outputs(v).unwrap()
    }

    /// Logits whose softmax is exactly the given distribution.
    fn from_probs(p: &[f64]) -> LogitVector {
        let logs: Vec<f64> = p.iter().map(|v| v.ln()).collect();
        lv(&logs)
    }

    #[test]
    fn defer_mass_examples() {
        assert!((p_defer_softmax(&lv(&[0.0, 0.0, 0.0])) - 1.0 / 3.0).abs() < 1e-15);
        let g = from_probs(&[0.25, 0.25, 0.5]);
        assert!((p_defer_softmax(&g) - 0.5).abs() < 1e-15);
        assert!(p_defer_softmax(&lv(&[0.0, 0.0, -50.0])) < 1e-20);
    }

    #[test]
    fn odds_examples() {
        assert!((p_expert_softmax(&from_probs(&[0.25, 0.25, 0.5])) - 1.0).abs() < 1e-12);
        assert!((odds(0.6) - 1.5).abs() < 1e-12);
        assert!((odds(0.25) - 1.0 / 3.0).abs() < 1e-15);
        let c = p_expert_softmax_clamped(&from_probs(&[0.2, 0.2, 0.6]));
        assert_eq!(c.value, 1.0);
        assert!(c.clamped);
        let c = p_expert_softmax_clamped(&from_probs(&[0.5, 0.25, 0.25]));
        assert!((c.value - 1.0 / 3.0).abs() < 1e-12);
        assert!(!c.clamped);
        // Exactly one is a boundary value, not clamped.
        let c = clamp_unit(1.0);
        assert_eq!((c.value, c.clamped), (1.0, false));
    }

    #[test]
    fn class_probabilities_softmax() {
        let g = from_probs(&[0.25, 0.25, 0.5]);
        assert!((p_class_softmax(&g, 0) - 0.5).abs() < 1e-12);
        let g = lv(&[1.0, -0.5, 2.0, -50.0]);
        let plain = class_softmax(&g);
        let mut full = softmax(&g);
        full.pop();
        let z: f64 = full.iter().sum();
        for k in 0..3 {
            assert!((p_class_softmax(&g, k) - full[k] / z).abs() < 1e-9);
            assert!((p_class_softmax(&g, k) - plain[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn ova_estimates() {
        let phi = BinaryLoss::Logistic;
        assert_eq!(p_expert_ova(&lv(&[0.0, 0.0, 0.0]), phi), 0.5);
        assert!((p_expert_ova(&lv(&[0.0, 0.0, 2.0]), phi) - 0.880797).abs() < 1e-6);
        let mut prev = 0.0;
        for i in -100..=100 {
            let p = p_expert_ova(&lv(&[0.0, 0.0, i as f64 * 0.2]), phi);
            assert!(p > prev && p < 1.0);
            prev = p;
        }
        assert_eq!(p_class_ova(&lv(&[0.0, 3.0, 1.0]), 0, phi), 0.5);
        let g = lv(&[1.0, 1.0, 1.0, 0.0]);
        let total: f64 = (0..3).map(|k| p_class_ova(&g, k, phi)).sum();
        assert!((total - 3.0 * 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!(total > 2.19 && total < 2.2);
    }

    #[test]
    fn decide_examples() {
        let phi = BinaryLoss::Logistic;
        for s in [SurrogateKind::Softmax, SurrogateKind::OneVsAll] {
            let d = decide(&lv(&[1.0, 2.0, 3.0]), s, phi);
            assert_eq!((d.predicted_class, d.deferred), (1, true));
            let d = decide(&lv(&[3.0, 2.0, 3.0]), s, phi);
            assert!(d.deferred);
            let d = decide(&lv(&[3.0, 2.0, 1.0]), s, phi);
            assert_eq!((d.predicted_class, d.deferred), (0, false));
            let d = decide(&lv(&[2.0, 2.0, 1.0]), s, phi);
            assert_eq!(d.predicted_class, 0);
        }
    }

    #[test]
    fn none_of_the_above_is_diagnostic_only() {
        let d = decide(&lv(&[-2.0, -1.0, -3.0]), SurrogateKind::OneVsAll, BinaryLoss::Logistic);
        assert!(d.none_of_the_above);
        assert_eq!((d.predicted_class, d.deferred), (1, false));
    }

    #[test]
    fn budget_scores_follow_native_rule() {
        let phi = BinaryLoss::Logistic;
        for v in [[1.0, 2.0, 3.0], [3.0, 2.0, 3.0], [3.0, 2.0, 1.0], [-1.0, -4.0, -1.5]] {
            for s in [SurrogateKind::Softmax, SurrogateKind::OneVsAll] {
                let g = lv(&v);
                let (clf, def) = budget_scores(&g, s, phi);
                assert_eq!(def >= clf, decide(&g, s, phi).deferred);
            }
        }
    }

    fn logits() -> impl Strategy<Value = Vec<f64>> {
        (2usize..=8).prop_flat_map(|k| proptest::collection::vec(-10.0f64..10.0, k + 1))
    }

    proptest! {
        #[test]
        fn odds_exceed_one_iff_defer_mass_exceeds_half(v in logits(), tweak in -1e-6f64..1e-6) {
            // Place g_⊥ near log Σ e^{g_k}, where p_⊥ = 1/2.
            let k = v.len() - 1;
            let m = v[..k].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + v[..k].iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for g_def in [v[k], lse + tweak, lse] {
                let mut w = v.clone();
                w[k] = g_def;
                let g = lv(&w);
                prop_assert_eq!(p_expert_softmax(&g) > 1.0, p_defer_softmax(&g) > 0.5);
            }
        }

        #[test]
        fn softmax_decisions_shift_invariant(v in logits(), c in -100.0f64..100.0) {
            let g = lv(&v);
            let a = decide(&g, SurrogateKind::Softmax, BinaryLoss::Logistic);
            let b = decide(&g.shifted(c), SurrogateKind::Softmax, BinaryLoss::Logistic);
            // Shifting by c rounds each logit; compare only away from ties.
            let k = v.len() - 1;
            let best = v[..k].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let second = v[..k].iter().copied().filter(|&x| x < best).fold(f64::NEG_INFINITY, f64::max);
            prop_assume!((v[k] - best).abs() > 1e-9 && (best - second).abs() > 1e-9);
            prop_assert_eq!(a.deferred, b.deferred);
            prop_assert_eq!(a.predicted_class, b.predicted_class);
        }

        #[test]
        fn ova_estimates_are_local(v in logits(), bump in -5.0f64..5.0) {
            let phi = BinaryLoss::Logistic;
            let k = v.len() - 1;
            let g = lv(&v);
            let mut w = v.clone();
            w[0] += bump;
            let h = lv(&w);
            prop_assert_eq!(p_expert_ova(&g, phi), p_expert_ova(&h, phi));
            for j in 1..k {
                prop_assert_eq!(p_class_ova(&g, j, phi), p_class_ova(&h, j, phi));
            }
        }

        #[test]
        fn softmax_masses_normalize(v in logits()) {
            let g = lv(&v);
            let k = v.len() - 1;
            let total: f64 = (0..k).map(|j| p_class_softmax(&g, j)).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let raw: f64 = softmax(&g)[..k].iter().sum();
            prop_assert!((raw + p_defer_softmax(&g) - 1.0).abs() < 1e-12);
        }
    }
}
