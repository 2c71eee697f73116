//! Label distributions and the smoothing transform `(1 - k·λ)·d + λ`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SUM_TOLERANCE: f64 = 1e-9;

/// Probability vector over `k ≥ 2` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a label distribution needs at least 2 classes, got {}",
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::InvalidInput(format!("invalid probability {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    /// Builds from softmax output or other vectors already known to be valid.
    pub(crate) fn from_vec_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!(probs.len() >= 2);
        Self { probs }
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }
}

pub fn one_hot(index: usize, k: usize) -> Result<LabelDistribution> {
    if index >= k {
        return Err(Error::Range { index, k });
    }
    let mut probs = vec![0.0; k];
    probs[index] = 1.0;
    LabelDistribution::new(probs)
}

/// `(1 - k·λ)·d_j + λ` for every class `j`. Requires `0 ≤ λ < 1/k` so the
/// dominant class stays dominant.
pub fn smooth(d: &LabelDistribution, lambda: f64) -> Result<LabelDistribution> {
    let k = d.k();
    check_lambda(lambda, k)?;
    // p + λ(1 - k·p) equals (1 - kλ)p + λ; this grouping maps a one-hot 1
    // to exactly 1 - (k-1)λ, so table values such as 0.95 come out exact.
    let k = k as f64;
    Ok(LabelDistribution::from_vec_unchecked(
        d.probs.iter().map(|&p| p + lambda * (1.0 - k * p)).collect(),
    ))
}

fn check_lambda(lambda: f64, k: usize) -> Result<()> {
    if !(lambda >= 0.0 && lambda * (k as f64) < 1.0) {
        return Err(Error::Config(format!("smoothing λ = {lambda} must lie in [0, 1/{k})")));
    }
    Ok(())
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax_label(d: &LabelDistribution) -> usize {
    argmax(&d.probs)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate().skip(1) {
        if p > v[best] {
            best = i;
        }
    }
    best
}

/// Named smoothing intensities. `Baseline` trains on hard labels with
/// cross-entropy; `LS1`..`LS5` train with KL divergence, `LS1` on hard labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SmoothingLevel {
    Baseline,
    Ls1,
    Ls2,
    Ls3,
    Ls4,
    Ls5,
}

impl SmoothingLevel {
    pub const ALL: [SmoothingLevel; 6] = [
        SmoothingLevel::Baseline,
        SmoothingLevel::Ls1,
        SmoothingLevel::Ls2,
        SmoothingLevel::Ls3,
        SmoothingLevel::Ls4,
        SmoothingLevel::Ls5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SmoothingLevel::Baseline => "Baseline",
            SmoothingLevel::Ls1 => "LS1",
            SmoothingLevel::Ls2 => "LS2",
            SmoothingLevel::Ls3 => "LS3",
            SmoothingLevel::Ls4 => "LS4",
            SmoothingLevel::Ls5 => "LS5",
        }
    }
}

impl fmt::Display for SmoothingLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SmoothingLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SmoothingLevel::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown smoothing level {s:?}")))
    }
}

/// λ for a named level. Three-class: 0.01 / 0.025 / 0.05 / 0.1 for LS2..LS5;
/// two-class: 0.01 / 0.05 / 0.1 / 0.15. Baseline and LS1 are unsmoothed.
pub fn level_to_lambda(level: SmoothingLevel, k: usize) -> Result<f64> {
    use SmoothingLevel::*;
    let lambda = match (level, k) {
        (Baseline | Ls1, _) => 0.0,
        (Ls2, 3) => 0.01,
        (Ls3, 3) => 0.025,
        (Ls4, 3) => 0.05,
        (Ls5, 3) => 0.1,
        (Ls2, 2) => 0.01,
        (Ls3, 2) => 0.05,
        (Ls4, 2) => 0.1,
        (Ls5, 2) => 0.15,
        _ => {
            return Err(Error::Config(format!(
                "{level} has no predefined λ for {k} classes; supply an explicit λ"
            )))
        }
    };
    Ok(lambda)
}

/// A smoothing level resolved to a concrete λ for `k` classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSpec {
    pub level: SmoothingLevel,
    pub k: usize,
    pub lambda: f64,
}

impl SmoothingSpec {
    pub fn resolve(level: SmoothingLevel, k: usize) -> Result<Self> {
        Ok(Self {
            level,
            k,
            lambda: level_to_lambda(level, k)?,
        })
    }

    /// Level with a caller-chosen λ, for class counts without a predefined value.
    /// Baseline and LS1 stay unsmoothed.
    pub fn with_lambda(level: SmoothingLevel, k: usize, lambda: f64) -> Result<Self> {
        if matches!(level, SmoothingLevel::Baseline | SmoothingLevel::Ls1) && lambda != 0.0 {
            return Err(Error::Config(format!("{level} uses unsmoothed labels (λ = 0)")));
        }
        if k < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {k}")));
        }
        check_lambda(lambda, k)?;
        Ok(Self { level, k, lambda })
    }

    /// Smoothed training target for a hard label.
    pub fn target(&self, label: usize) -> Result<LabelDistribution> {
        smooth(&one_hot(label, self.k)?, self.lambda)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use SmoothingLevel::*;

    #[test]
    fn named_levels_give_exact_table_values() {
        let table = [
            (3, Ls2, 0.98, 0.01),
            (3, Ls3, 0.95, 0.025),
            (3, Ls4, 0.9, 0.05),
            (3, Ls5, 0.8, 0.1),
            (2, Ls2, 0.99, 0.01),
            (2, Ls3, 0.95, 0.05),
            (2, Ls4, 0.9, 0.1),
            (2, Ls5, 0.85, 0.15),
        ];
        for (k, level, hit, rest) in table {
            let d = SmoothingSpec::resolve(level, k).unwrap().target(0).unwrap();
            assert_eq!(d.probs()[0], hit, "{level} k={k}");
            assert!(d.probs()[1..].iter().all(|&p| p == rest));
        }
    }

    #[test]
    fn one_hot_cases() {
        assert_eq!(one_hot(1, 3).unwrap().probs(), &[0.0, 1.0, 0.0]);
        assert_eq!(one_hot(0, 2).unwrap().probs(), &[1.0, 0.0]);
        assert_eq!(one_hot(4, 5).unwrap().probs(), &[0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(one_hot(3, 3), Err(Error::Range { index: 3, k: 3 })));
    }

    #[test]
    fn smooth_cases() {
        let d = one_hot(1, 3).unwrap();
        let s = smooth(&d, 0.01).unwrap();
        assert_eq!(s.probs(), &[0.01, 0.97 + 0.01, 0.01]);
        assert!((s.probs()[1] - 0.98).abs() < 1e-15);
        let s = smooth(&d, 0.1).unwrap();
        assert!((s.probs()[1] - 0.8).abs() < 1e-15);
        assert_eq!(s.probs()[0], 0.1);

        let two = smooth(&one_hot(0, 2).unwrap(), 0.15).unwrap();
        assert!((two.probs()[0] - 0.85).abs() < 1e-15);
        assert_eq!(two.probs()[1], 0.15);

        let d = LabelDistribution::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(smooth(&d, 0.0).unwrap(), d);
    }

    #[test]
    fn smooth_rejects_uniform_and_beyond() {
        let d = one_hot(0, 2).unwrap();
        assert!(matches!(smooth(&d, 0.5), Err(Error::Config(_))));
        assert!(matches!(smooth(&d, 0.7), Err(Error::Config(_))));
        assert!(matches!(smooth(&d, -0.01), Err(Error::Config(_))));
        let d3 = one_hot(0, 3).unwrap();
        assert!(matches!(smooth(&d3, 1.0 / 3.0), Err(Error::Config(_))));
    }

    #[test]
    fn level_lambdas() {
        assert_eq!(level_to_lambda(Ls3, 3).unwrap(), 0.025);
        assert_eq!(level_to_lambda(Ls4, 2).unwrap(), 0.1);
        assert_eq!(level_to_lambda(Ls1, 3).unwrap(), 0.0);
        assert_eq!(level_to_lambda(Baseline, 7).unwrap(), 0.0);
        assert_eq!(level_to_lambda(Ls1, 10).unwrap(), 0.0);
        let err = level_to_lambda(Ls2, 5).unwrap_err();
        assert!(err.to_string().contains("explicit"), "{err}");
    }

    #[test]
    fn level_names_round_trip() {
        for level in SmoothingLevel::ALL {
            assert_eq!(level.name().parse::<SmoothingLevel>().unwrap(), level);
        }
        assert_eq!("ls3".parse::<SmoothingLevel>().unwrap(), Ls3);
        assert!("LS6".parse::<SmoothingLevel>().is_err());
    }

    #[test]
    fn explicit_lambda_for_other_class_counts() {
        let spec = SmoothingSpec::with_lambda(Ls2, 5, 0.02).unwrap();
        let t = spec.target(4).unwrap();
        assert!((t.probs()[4] - 0.92).abs() < 1e-15);
        assert!(SmoothingSpec::with_lambda(Ls1, 5, 0.02).is_err());
        assert!(SmoothingSpec::with_lambda(Ls2, 5, 0.2).is_err());
    }

    #[test]
    fn argmax_cases() {
        let d = LabelDistribution::new(vec![0.01, 0.98, 0.01]).unwrap();
        assert_eq!(argmax_label(&d), 1);
        let d = LabelDistribution::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(argmax_label(&d), 0);
    }

    #[test]
    fn distribution_validation() {
        assert!(LabelDistribution::new(vec![1.0]).is_err());
        assert!(LabelDistribution::new(vec![0.6, 0.6]).is_err());
        assert!(LabelDistribution::new(vec![1.5, -0.5]).is_err());
        assert!(LabelDistribution::new(vec![f64::NAN, 1.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn dist(k: usize) -> impl Strategy<Value = LabelDistribution> {
            prop::collection::vec(0.0f64..1.0, k).prop_filter_map("zero mass", |w| {
                let s: f64 = w.iter().sum();
                (s > 1e-6).then(|| LabelDistribution::new(w.iter().map(|x| x / s).collect()).ok())?
            })
        }

        fn scan_argmax(v: &[f64]) -> usize {
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            v.iter().position(|&x| x == max).unwrap()
        }

        proptest! {
            #[test]
            fn smoothing_preserves_normalisation(k in 2usize..8, frac in 0.0f64..0.999, seed in 0usize..1000) {
                let d = one_hot(seed % k, k).unwrap();
                let lambda = frac / k as f64;
                let s = smooth(&d, lambda).unwrap();
                prop_assert!((s.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert_eq!(argmax_label(&s), argmax_label(&d));
            }

            #[test]
            fn smoothing_normalises_general_inputs(d in (2usize..6).prop_flat_map(dist), frac in 0.0f64..0.999) {
                let lambda = frac / d.k() as f64;
                let s = smooth(&d, lambda).unwrap();
                prop_assert!((s.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }

            #[test]
            fn smoothing_is_affine(
                (d1, d2) in (2usize..6).prop_flat_map(|k| (dist(k), dist(k))),
                alpha in 0.0f64..1.0,
                frac in 0.0f64..0.999,
            ) {
                let lambda = frac / d1.k() as f64;
                let mix: Vec<f64> = d1.probs().iter().zip(d2.probs())
                    .map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
                let lhs = smooth(&LabelDistribution::from_vec_unchecked(mix), lambda).unwrap();
                let s1 = smooth(&d1, lambda).unwrap();
                let s2 = smooth(&d2, lambda).unwrap();
                for ((l, a), b) in lhs.probs().iter().zip(s1.probs()).zip(s2.probs()) {
                    prop_assert!((l - (alpha * a + (1.0 - alpha) * b)).abs() <= 1e-12);
                }
            }

            #[test]
            fn argmax_matches_scan(d in (2usize..10).prop_flat_map(dist)) {
                prop_assert_eq!(argmax_label(&d), scan_argmax(d.probs()));
            }
        }
    }
}
