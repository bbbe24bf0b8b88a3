//! Conformal out-of-distribution detection from dropout tolerance.
//!
//! The crate is split along the detection pipeline:
//!
//! - [`conformal`]: calibration sets, smoothed p-values and the valid
//!   p-value merging functions.
//! - [`dropout`]: the dropout-tolerance score, measured against any
//!   [`dropout::SubjectModel`], and the multi-layer detector.
//! - [`synthetic`]: redundant-voter subject models with an exact tolerance
//!   oracle.
//! - [`eval`]: calibration/test splits, ROC/AUROC, false alarm curves and the
//!   comparison baselines.
//! - [`probe`]: the stdio JSONL protocol for out-of-process models.

pub mod conformal;
pub mod dropout;
pub mod eval;
pub mod fsio;
pub mod probe;
pub mod synthetic;

pub use conformal::{
    compute_p_value, detect, merge_p_values, CalibrationSet, ConformalError, DetectionOutcome,
    LayerId, MergedPValue, MergingMethod, NonconformityScore, PValue,
};
pub use dropout::{
    calibrate, detect_query, measure_queries, measure_tolerance, CalibrationSets, DetectError,
    DetectionConfig, DropoutBudget, ExactJudge, Judge, ProbeError, Query, Response, SubjectModel,
    ToleranceRecord,
};
pub use eval::{auroc, majority_vote, run_experiment, BaselineSpec, EvaluationReport, SplitSpec};
pub use synthetic::{generate, oracle_tolerance, SyntheticModel, SyntheticSpec};
