//! Inductive conformal anomaly detection primitives.
//!
//! A [`CalibrationSet`] holds the non-conformity scores of held-out
//! in-distribution inputs for one layer. A test score is ranked against it to
//! form a smoothed p-value
//!
//! ```text
//! p = (#{ i : alpha <= alpha_i } + 1) / (n + 1)
//! ```
//!
//! which is (super-)uniform when the test input is exchangeable with the
//! calibration inputs. Several p-values for the same input can be combined with
//! a valid merging function `a_{r,K} * M_{r,K}(p_1, .., p_K)`; see
//! [`merge_p_values`].

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Layer index inside the subject model.
pub type LayerId = u32;

/// Errors raised by the conformal primitives.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConformalError {
    #[error("non-conformity score must be finite and in [0, 1], got {0}")]
    InvalidScore(f64),

    #[error("calibration set for layer {layer_id} is empty")]
    EmptyCalibration { layer_id: LayerId },

    #[error("calibration scores for layer {layer_id} are not sorted ascending at index {index}")]
    UnsortedCalibration { layer_id: LayerId, index: usize },

    #[error("cannot merge an empty list of p-values")]
    NothingToMerge,

    #[error("detection threshold must lie in (0, 1), got {0}")]
    InvalidEpsilon(f64),

    #[error("unknown merging method `{0}` (expected hm, am, gm or bonferroni)")]
    UnknownMethod(String),

    #[error("malformed calibration document: {0}")]
    Malformed(String),
}

/// Non-conformity score: one minus the dropout tolerance of a layer.
///
/// Always finite and inside `[0, 1]`. An undefined tolerance is modelled as
/// `Option::None` by callers, never by a sentinel score.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
#[serde(transparent)]
pub struct NonconformityScore(f64);

impl NonconformityScore {
    pub fn new(value: f64) -> Result<Self, ConformalError> {
        if value.is_finite() && (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(ConformalError::InvalidScore(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    fn total_cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl<'de> Deserialize<'de> for NonconformityScore {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let raw = f64::deserialize(de)?;
        NonconformityScore::new(raw).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for NonconformityScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Per-layer reference distribution of in-distribution scores.
///
/// Scores are kept sorted ascending so a p-value is a single rank query.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationSet {
    layer_id: LayerId,
    scores: Vec<NonconformityScore>,
    source_manifest: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCalibrationSet {
    layer_id: LayerId,
    scores: Vec<NonconformityScore>,
    source_manifest: String,
}

impl CalibrationSet {
    /// Builds a calibration set, sorting the scores into canonical order.
    pub fn new(
        layer_id: LayerId,
        mut scores: Vec<NonconformityScore>,
        source_manifest: impl Into<String>,
    ) -> Result<Self, ConformalError> {
        if scores.is_empty() {
            return Err(ConformalError::EmptyCalibration { layer_id });
        }
        scores.sort_by(NonconformityScore::total_cmp);
        Ok(Self {
            layer_id,
            scores,
            source_manifest: source_manifest.into(),
        })
    }

    /// Builds a calibration set from raw reals, validating each one.
    pub fn from_values(
        layer_id: LayerId,
        values: &[f64],
        source_manifest: impl Into<String>,
    ) -> Result<Self, ConformalError> {
        let scores = values
            .iter()
            .map(|&v| NonconformityScore::new(v))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(layer_id, scores, source_manifest)
    }

    pub fn layer_id(&self) -> LayerId {
        self.layer_id
    }

    pub fn scores(&self) -> &[NonconformityScore] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    /// Always false for a constructed set; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn source_manifest(&self) -> &str {
        &self.source_manifest
    }

    /// Number of calibration scores `>= alpha` (ties included).
    pub fn count_at_least(&self, alpha: NonconformityScore) -> usize {
        let below = self.scores.partition_point(|s| s.0 < alpha.0);
        self.scores.len() - below
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("calibration set serializes")
    }

    /// Parses the JSON document, rejecting empty or unsorted score lists.
    pub fn from_json_str(text: &str) -> Result<Self, ConformalError> {
        let raw: RawCalibrationSet =
            serde_json::from_str(text).map_err(|e| ConformalError::Malformed(e.to_string()))?;
        if raw.scores.is_empty() {
            return Err(ConformalError::EmptyCalibration {
                layer_id: raw.layer_id,
            });
        }
        if let Some(index) = raw.scores.windows(2).position(|w| w[0].0 > w[1].0) {
            return Err(ConformalError::UnsortedCalibration {
                layer_id: raw.layer_id,
                index: index + 1,
            });
        }
        Ok(Self {
            layer_id: raw.layer_id,
            scores: raw.scores,
            source_manifest: raw.source_manifest,
        })
    }
}

/// Smoothed conformal p-value, stored as the exact rational
/// `numerator / (calibration_size + 1)`.
///
/// Equality and ordering compare the rational values, so `1/2 == 2/4`.
#[derive(Debug, Clone, Copy)]
pub struct PValue {
    numerator: u64,
    calibration_size: u64,
}

impl PValue {
    /// `count_at_least` is the number of calibration scores `>= alpha`.
    pub fn from_rank(count_at_least: usize, calibration_size: usize) -> Self {
        assert!(count_at_least <= calibration_size);
        Self {
            numerator: count_at_least as u64 + 1,
            calibration_size: calibration_size as u64,
        }
    }

    pub fn numerator(self) -> u64 {
        self.numerator
    }

    pub fn denominator(self) -> u64 {
        self.calibration_size + 1
    }

    pub fn calibration_size(self) -> u64 {
        self.calibration_size
    }

    pub fn value(self) -> f64 {
        self.numerator as f64 / self.denominator() as f64
    }
}

impl PartialEq for PValue {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for PValue {}

impl PartialOrd for PValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for PValue {
    fn cmp(&self, other: &Self) -> Ordering {
        // cross-multiplication keeps the comparison exact
        let lhs = self.numerator as u128 * other.denominator() as u128;
        let rhs = other.numerator as u128 * self.denominator() as u128;
        lhs.cmp(&rhs)
    }
}

/// Ranks `alpha` against the calibration scores.
pub fn compute_p_value(alpha: NonconformityScore, cal: &CalibrationSet) -> PValue {
    PValue::from_rank(cal.count_at_least(alpha), cal.len())
}

/// The four valid merging functions, indexed by the power-mean exponent `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergingMethod {
    /// `r = -1`, `a = ln K`.
    Harmonic,
    /// `r = 1`, `a = 2`.
    Arithmetic,
    /// `r = 0`, `a = e`.
    Geometric,
    /// `r = -inf`, `a = K`.
    Bonferroni,
}

impl MergingMethod {
    pub const ALL: [MergingMethod; 4] = [
        MergingMethod::Harmonic,
        MergingMethod::Arithmetic,
        MergingMethod::Geometric,
        MergingMethod::Bonferroni,
    ];

    /// Validity constant `a_{r,K}` for `k` inputs.
    pub fn constant(self, k: usize) -> f64 {
        match self {
            MergingMethod::Harmonic => (k as f64).ln(),
            MergingMethod::Arithmetic => 2.0,
            MergingMethod::Geometric => std::f64::consts::E,
            MergingMethod::Bonferroni => k as f64,
        }
    }

    /// Unscaled power mean `M_{r,K}`.
    pub fn mean(self, ps: &[f64]) -> f64 {
        let k = ps.len() as f64;
        match self {
            MergingMethod::Harmonic => k / ps.iter().map(|p| p.recip()).sum::<f64>(),
            MergingMethod::Arithmetic => ps.iter().sum::<f64>() / k,
            MergingMethod::Geometric => ps.iter().product::<f64>().powf(k.recip()),
            MergingMethod::Bonferroni => ps.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    /// Short name used on the command line and in report labels.
    pub fn short_name(self) -> &'static str {
        match self {
            MergingMethod::Harmonic => "hm",
            MergingMethod::Arithmetic => "am",
            MergingMethod::Geometric => "gm",
            MergingMethod::Bonferroni => "bonferroni",
        }
    }
}

impl fmt::Display for MergingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for MergingMethod {
    type Err = ConformalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "hm" | "harmonic" => Ok(MergingMethod::Harmonic),
            "am" | "arithmetic" => Ok(MergingMethod::Arithmetic),
            "gm" | "geometric" => Ok(MergingMethod::Geometric),
            "bm" | "bonferroni" => Ok(MergingMethod::Bonferroni),
            other => Err(ConformalError::UnknownMethod(other.to_string())),
        }
    }
}

/// Result of merging one or more per-layer p-values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MergedPValue {
    pub value: f64,
    pub method: MergingMethod,
    pub inputs_used: usize,
}

/// Merges `ps` with `a_{r,K'} * M_{r,K'}` where `K' = ps.len()`, capped at 1.
///
/// A single input is passed through unscaled.
pub fn merge_p_values(
    ps: &[PValue],
    method: MergingMethod,
) -> Result<MergedPValue, ConformalError> {
    let values: Vec<f64> = ps.iter().map(|p| p.value()).collect();
    merge_values(&values, method)
}

/// Same as [`merge_p_values`] over raw reals in `(0, 1]`.
pub fn merge_values(ps: &[f64], method: MergingMethod) -> Result<MergedPValue, ConformalError> {
    let value = match ps.len() {
        0 => return Err(ConformalError::NothingToMerge),
        1 => ps[0],
        k => (method.constant(k) * method.mean(ps)).min(1.0),
    };
    Ok(MergedPValue {
        value,
        method,
        inputs_used: ps.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DetectionOutcome {
    #[serde(rename = "OOD")]
    Ood,
    #[serde(rename = "iD")]
    InDistribution,
}

impl DetectionOutcome {
    pub fn is_ood(self) -> bool {
        self == DetectionOutcome::Ood
    }

    /// Output bit of the detector: 1 for OOD, 0 otherwise.
    pub fn bit(self) -> u8 {
        u8::from(self.is_ood())
    }
}

impl fmt::Display for DetectionOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DetectionOutcome::Ood => f.write_str("OOD"),
            DetectionOutcome::InDistribution => f.write_str("iD"),
        }
    }
}

/// Anything that carries a p-value in `(0, 1]`.
pub trait PValueLike {
    fn p(&self) -> f64;
}

impl PValueLike for PValue {
    fn p(&self) -> f64 {
        self.value()
    }
}

impl PValueLike for MergedPValue {
    fn p(&self) -> f64 {
        self.value
    }
}

/// Flags OOD iff `p < epsilon`, strictly.
pub fn detect(p: &impl PValueLike, epsilon: f64) -> Result<DetectionOutcome, ConformalError> {
    check_epsilon(epsilon)?;
    Ok(detect_unchecked(p.p(), epsilon))
}

/// Threshold test without range validation; `epsilon = 0` never fires.
pub fn detect_unchecked(p: f64, epsilon: f64) -> DetectionOutcome {
    if p < epsilon {
        DetectionOutcome::Ood
    } else {
        DetectionOutcome::InDistribution
    }
}

pub fn check_epsilon(epsilon: f64) -> Result<(), ConformalError> {
    if epsilon > 0.0 && epsilon < 1.0 {
        Ok(())
    } else {
        Err(ConformalError::InvalidEpsilon(epsilon))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cal(values: &[f64]) -> CalibrationSet {
        CalibrationSet::from_values(0, values, "test").unwrap()
    }

    fn score(v: f64) -> NonconformityScore {
        NonconformityScore::new(v).unwrap()
    }

    #[test]
    fn p_value_worked_examples() {
        let p = compute_p_value(score(0.95), &cal(&[0.1, 0.2, 0.3]));
        assert_eq!((p.numerator(), p.denominator()), (1, 4));
        assert_eq!(p.value(), 0.25);

        let p = compute_p_value(score(0.0), &cal(&[0.1, 0.2, 0.3]));
        assert_eq!(p.value(), 1.0);

        let p = compute_p_value(score(0.4), &cal(&[0.2, 0.5, 0.9]));
        assert_eq!(p.value(), 0.75);
    }

    #[test]
    fn ties_count_in_numerator() {
        let p = compute_p_value(score(0.5), &cal(&[0.5, 0.5, 0.1]));
        assert_eq!(p.numerator(), 3);
    }

    #[test]
    fn scores_are_validated() {
        assert!(NonconformityScore::new(f64::NAN).is_err());
        assert!(NonconformityScore::new(1.0001).is_err());
        assert!(NonconformityScore::new(-0.0).is_ok());
        assert!(NonconformityScore::new(f64::INFINITY).is_err());
    }

    #[test]
    fn empty_calibration_rejected() {
        assert_eq!(
            CalibrationSet::new(7, vec![], ""),
            Err(ConformalError::EmptyCalibration { layer_id: 7 })
        );
    }

    #[test]
    fn calibration_json_round_trip_and_validation() {
        let set = CalibrationSet::from_values(15, &[0.9, 0.1, 0.5], "unit").unwrap();
        let back = CalibrationSet::from_json_str(&set.to_json()).unwrap();
        assert_eq!(set, back);
        assert_eq!(back.scores()[0].value(), 0.1);

        let unsorted = r#"{"layer_id": 3, "scores": [0.2, 0.1], "source_manifest": "x"}"#;
        assert_eq!(
            CalibrationSet::from_json_str(unsorted),
            Err(ConformalError::UnsortedCalibration {
                layer_id: 3,
                index: 1
            })
        );
        let empty = r#"{"layer_id": 3, "scores": [], "source_manifest": "x"}"#;
        assert!(matches!(
            CalibrationSet::from_json_str(empty),
            Err(ConformalError::EmptyCalibration { .. })
        ));
        let out_of_range = r#"{"layer_id": 3, "scores": [1.5], "source_manifest": "x"}"#;
        assert!(CalibrationSet::from_json_str(out_of_range).is_err());
        let extra = r#"{"layer_id": 3, "scores": [0.5], "source_manifest": "x", "k": 1}"#;
        assert!(CalibrationSet::from_json_str(extra).is_err());
    }

    #[test]
    fn merging_worked_examples() {
        let ps = [0.1, 0.3, 0.5];
        let am = merge_values(&ps, MergingMethod::Arithmetic).unwrap();
        assert!((am.value - 0.6).abs() < 1e-12);
        let bm = merge_values(&ps, MergingMethod::Bonferroni).unwrap();
        assert!((bm.value - 0.3).abs() < 1e-12);
        // e * 0.015^(1/3), evaluated with mpmath at 30 digits
        let gm = merge_values(&ps, MergingMethod::Geometric).unwrap();
        assert!((gm.value - 0.670_385_946_677_880_5).abs() < 1e-12);
        assert_eq!(gm.inputs_used, 3);
        // ln 3 * 3 / (10 + 10/3 + 2), same calculator
        let hm = merge_values(&ps, MergingMethod::Harmonic).unwrap();
        assert!((hm.value - 0.214_945_882_565_499_7).abs() < 1e-12);
    }

    #[test]
    fn single_input_passes_through() {
        for method in MergingMethod::ALL {
            let m = merge_values(&[0.5], method).unwrap();
            assert_eq!(m.value, 0.5);
            assert_eq!(m.inputs_used, 1);
        }
    }

    #[test]
    fn merged_value_is_capped() {
        let m = merge_values(&[0.9, 0.8], MergingMethod::Arithmetic).unwrap();
        assert_eq!(m.value, 1.0);
    }

    #[test]
    fn empty_merge_is_an_error() {
        assert_eq!(
            merge_p_values(&[], MergingMethod::Arithmetic),
            Err(ConformalError::NothingToMerge)
        );
    }

    #[test]
    fn detection_is_strict() {
        assert_eq!(
            detect_unchecked(0.05, 0.05),
            DetectionOutcome::InDistribution
        );
        assert_eq!(detect_unchecked(0.049, 0.05), DetectionOutcome::Ood);
        assert_eq!(
            detect_unchecked(1.0, 0.99),
            DetectionOutcome::InDistribution
        );
        // p = 1/20 sits exactly on the threshold
        let p = PValue::from_rank(0, 19);
        assert_eq!(detect(&p, 0.05).unwrap(), DetectionOutcome::InDistribution);
        assert!(detect(&p, 0.0).is_err());
        assert!(detect(&p, 1.0).is_err());
    }

    #[test]
    fn method_names_parse() {
        for method in MergingMethod::ALL {
            assert_eq!(
                method.short_name().parse::<MergingMethod>().unwrap(),
                method
            );
        }
        assert!("median".parse::<MergingMethod>().is_err());
    }

    proptest! {
        #[test]
        fn p_values_live_on_the_lattice(
            values in proptest::collection::vec(0.0f64..=1.0, 1..200),
            alpha in 0.0f64..=1.0,
        ) {
            let set = cal(&values);
            let p = compute_p_value(score(alpha), &set);
            let n = values.len() as u64;
            prop_assert_eq!(p.denominator(), n + 1);
            prop_assert!(p.numerator() >= 1 && p.numerator() <= n + 1);
            let brute = values.iter().filter(|&&v| alpha <= v).count() as u64 + 1;
            prop_assert_eq!(p.numerator(), brute);
        }

        #[test]
        fn p_values_are_antitone(
            values in proptest::collection::vec(0.0f64..=1.0, 1..100),
            a in 0.0f64..=1.0,
            b in 0.0f64..=1.0,
        ) {
            let set = cal(&values);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(compute_p_value(score(lo), &set) >= compute_p_value(score(hi), &set));
        }

        #[test]
        fn merging_is_permutation_invariant(
            ps in proptest::collection::vec(0.001f64..=1.0, 2..6),
            rot in 0usize..6,
        ) {
            let mut shuffled = ps.clone();
            shuffled.reverse();
            let len = shuffled.len();
            shuffled.rotate_left(rot % len);
            for method in MergingMethod::ALL {
                let a = merge_values(&ps, method).unwrap().value;
                let b = merge_values(&shuffled, method).unwrap().value;
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn identical_inputs_are_never_shrunk_below_input(p in 0.001f64..=1.0, k in 3usize..8) {
            // ln K >= 1 only from K = 3 on
            let ps = vec![p; k];
            for method in MergingMethod::ALL {
                prop_assert!(merge_values(&ps, method).unwrap().value >= p - 1e-12);
            }
        }
    }
}
