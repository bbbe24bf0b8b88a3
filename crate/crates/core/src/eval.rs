//! Evaluation protocol: repeated calibration/test splits of the
//! in-distribution queries, ROC/AUROC with OOD queries as positives, false
//! alarm curves over a grid of thresholds, and the comparison baselines.
//!
//! Tolerance measurements do not depend on the split, so every query is
//! measured once and the runs only re-partition the measured records.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{
    compute_p_value, detect_unchecked, merge_p_values, DetectionOutcome, LayerId, MergingMethod,
    PValue,
};
use crate::dropout::{
    calibrate_from_records, measure_queries, CalibrationSets, DetectError, DetectionConfig, Judge,
    LayerManifest, Query, SubjectModel, ToleranceRecord,
};
use crate::fsio::write_atomic;
use crate::synthetic::mix;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation setup: {0}")]
    Config(String),

    #[error("run {run} aborted: {source}")]
    Calibration {
        run: usize,
        #[source]
        source: DetectError,
    },

    #[error(transparent)]
    Detect(#[from] DetectError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Calibration/test partition of the in-distribution queries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub calibration_fraction: f64,
    pub runs: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            calibration_fraction: 0.2,
            runs: 5,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.calibration_fraction > 0.0 && self.calibration_fraction < 1.0) {
            return Err(EvalError::Config(format!(
                "calibration fraction must lie in (0, 1), got {}",
                self.calibration_fraction
            )));
        }
        if self.runs == 0 {
            return Err(EvalError::Config("at least one run is required".into()));
        }
        Ok(())
    }

    /// Calibration indices and test indices for one run over `n` queries.
    pub fn split(&self, n: usize, run: usize) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, run as u64));
        idx.shuffle(&mut rng);
        let n_cal = ((n as f64 * self.calibration_fraction).round() as usize).clamp(1, n - 1);
        let test = idx.split_off(n_cal);
        (idx, test)
    }
}

/// Area under the ROC curve via the rank-sum statistic; ties count one half.
///
/// Higher scores mean "more OOD". Panics on empty input.
pub fn auroc(positive_scores: &[f64], negative_scores: &[f64]) -> f64 {
    assert!(
        !positive_scores.is_empty() && !negative_scores.is_empty(),
        "auroc needs at least one positive and one negative score"
    );
    let mut all: Vec<(f64, bool)> = positive_scores
        .iter()
        .map(|&s| (s, true))
        .chain(negative_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // midranks over tied groups, 1-based
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < all.len() {
        let mut end = start;
        while end < all.len() && all[end].0 == all[start].0 {
            end += 1;
        }
        let midrank = (start + 1 + end) as f64 / 2.0;
        let positives = all[start..end].iter().filter(|(_, pos)| *pos).count();
        rank_sum_pos += midrank * positives as f64;
        start = end;
    }
    let np = positive_scores.len() as f64;
    let nn = negative_scores.len() as f64;
    (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn)
}

/// ROC points from a threshold sweep over the observed scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(false_positive_rate, true_positive_rate)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auroc: f64,
}

impl RocCurve {
    pub fn from_scores(positive_scores: &[f64], negative_scores: &[f64]) -> Self {
        let mut thresholds: Vec<f64> = positive_scores
            .iter()
            .chain(negative_scores)
            .copied()
            .collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();

        let np = positive_scores.len() as f64;
        let nn = negative_scores.len() as f64;
        let mut points = vec![(0.0, 0.0)];
        for t in thresholds {
            let tp = positive_scores.iter().filter(|&&s| s >= t).count() as f64;
            let fp = negative_scores.iter().filter(|&&s| s >= t).count() as f64;
            points.push((fp / nn, tp / np));
        }
        if points.last() != Some(&(1.0, 1.0)) {
            points.push((1.0, 1.0));
        }
        let auroc = trapezoid_area(&points);
        Self { points, auroc }
    }
}

fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// OOD iff strictly more than half of the votes are OOD.
pub fn majority_vote(detections: &[DetectionOutcome]) -> Result<DetectionOutcome, EvalError> {
    if detections.is_empty() {
        return Err(EvalError::Config("majority vote over no detections".into()));
    }
    let ood = detections.iter().filter(|d| d.is_ood()).count();
    Ok(if 2 * ood > detections.len() {
        DetectionOutcome::Ood
    } else {
        DetectionOutcome::InDistribution
    })
}

/// Default threshold grid `{0, 0.05, ..., 0.5}`.
pub fn epsilon_grid() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 20.0).collect()
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineSpec {
    /// Raw score of one layer, no calibration.
    BaseScore { layer: LayerId },
    /// Conformal p-value of one layer.
    SinglePValue { layer: LayerId },
    /// Majority vote over per-layer single p-value detections.
    MajorityVote { layers: Vec<LayerId> },
    /// Valid merge of the defined per-layer p-values.
    EnsembleMerged {
        layers: Vec<LayerId>,
        method: MergingMethod,
    },
}

/// What the harness knows about one layer of one test query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerScore {
    pub alpha: Option<f64>,
    pub p_value: Option<PValue>,
}

impl BaselineSpec {
    /// The standard comparison for a detector configuration.
    pub fn standard(cfg: &DetectionConfig) -> Vec<BaselineSpec> {
        let mut rows: Vec<BaselineSpec> = cfg
            .layers
            .iter()
            .map(|&layer| BaselineSpec::BaseScore { layer })
            .collect();
        rows.extend(
            cfg.layers
                .iter()
                .map(|&layer| BaselineSpec::SinglePValue { layer }),
        );
        if cfg.layers.len() > 1 {
            rows.push(BaselineSpec::MajorityVote {
                layers: cfg.layers.clone(),
            });
        }
        rows.push(BaselineSpec::EnsembleMerged {
            layers: cfg.layers.clone(),
            method: cfg.method,
        });
        rows
    }

    pub fn label(&self) -> String {
        match self {
            BaselineSpec::BaseScore { layer } => format!("base_score_l{layer}"),
            BaselineSpec::SinglePValue { layer } => format!("single_p_l{layer}"),
            BaselineSpec::MajorityVote { .. } => "majority_vote".to_string(),
            BaselineSpec::EnsembleMerged { method, .. } => format!("ensemble_{method}"),
        }
    }

    pub fn layers(&self) -> Vec<LayerId> {
        match self {
            BaselineSpec::BaseScore { layer } | BaselineSpec::SinglePValue { layer } => {
                vec![*layer]
            }
            BaselineSpec::MajorityVote { layers } | BaselineSpec::EnsembleMerged { layers, .. } => {
                layers.clone()
            }
        }
    }

    /// Whether the row thresholds a p-value (and so has a false alarm curve).
    pub fn has_threshold(&self) -> bool {
        !matches!(self, BaselineSpec::BaseScore { .. })
    }

    /// Detection score, higher = more OOD. Undefined inputs score 0.
    pub fn score(&self, layers: &BTreeMap<LayerId, LayerScore>) -> f64 {
        let get = |l: &LayerId| {
            layers.get(l).copied().unwrap_or(LayerScore {
                alpha: None,
                p_value: None,
            })
        };
        match self {
            BaselineSpec::BaseScore { layer } => get(layer).alpha.unwrap_or(0.0),
            BaselineSpec::SinglePValue { layer } => {
                get(layer).p_value.map_or(0.0, |p| 1.0 - p.value())
            }
            BaselineSpec::MajorityVote { layers: ids } => {
                // OOD at threshold eps iff the k-th smallest p-value is < eps
                let mut ps: Vec<f64> = ids
                    .iter()
                    .map(|l| get(l).p_value.map_or(1.0, PValue::value))
                    .collect();
                ps.sort_by(f64::total_cmp);
                1.0 - ps[ids.len() / 2]
            }
            BaselineSpec::EnsembleMerged {
                layers: ids,
                method,
            } => merged_value(ids, method, &get).map_or(0.0, |m| 1.0 - m),
        }
    }

    /// Detection at threshold `epsilon`; `None` for the raw-score row.
    pub fn detect(
        &self,
        layers: &BTreeMap<LayerId, LayerScore>,
        epsilon: f64,
    ) -> Option<DetectionOutcome> {
        let get = |l: &LayerId| {
            layers.get(l).copied().unwrap_or(LayerScore {
                alpha: None,
                p_value: None,
            })
        };
        let single = |l: &LayerId| match get(l).p_value {
            Some(p) => detect_unchecked(p.value(), epsilon),
            None => DetectionOutcome::InDistribution,
        };
        match self {
            BaselineSpec::BaseScore { .. } => None,
            BaselineSpec::SinglePValue { layer } => Some(single(layer)),
            BaselineSpec::MajorityVote { layers: ids } => {
                let votes: Vec<DetectionOutcome> = ids.iter().map(single).collect();
                majority_vote(&votes).ok()
            }
            BaselineSpec::EnsembleMerged {
                layers: ids,
                method,
            } => Some(match merged_value(ids, method, &get) {
                Some(m) => detect_unchecked(m, epsilon),
                None => DetectionOutcome::InDistribution,
            }),
        }
    }
}

fn merged_value(
    ids: &[LayerId],
    method: &MergingMethod,
    get: &impl Fn(&LayerId) -> LayerScore,
) -> Option<f64> {
    let defined: Vec<PValue> = ids.iter().filter_map(|l| get(l).p_value).collect();
    merge_p_values(&defined, *method).ok().map(|m| m.value)
}

impl fmt::Display for BaselineSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// False alarm rate on in-distribution test queries across thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuaranteeCurve {
    pub epsilons: Vec<f64>,
    /// `per_run[r][e]`: false alarm rate of run `r` at `epsilons[e]`.
    pub per_run: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

/// Per-baseline results across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub label: String,
    pub spec: BaselineSpec,
    pub auroc_per_run: Vec<f64>,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub roc_per_run: Vec<RocCurve>,
    pub guarantee: Option<GuaranteeCurve>,
}

/// Diagnostics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    pub run: usize,
    pub calibration_queries: usize,
    pub test_id_queries: usize,
    pub test_ood_queries: usize,
    pub calibration: Vec<LayerManifest>,
    /// Test queries (both classes) that fell back to in-distribution because
    /// no layer produced a score.
    pub default_id_fraction: f64,
}

/// Fraction of queries whose response never changed, per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer_id: LayerId,
    pub id_unchanged_fraction: f64,
    pub ood_unchanged_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config: DetectionConfig,
    pub split: SplitSpec,
    pub n_id: usize,
    pub n_ood: usize,
    pub baselines: Vec<BaselineReport>,
    pub layers: Vec<LayerDiagnostics>,
    pub runs: Vec<RunDiagnostics>,
}

impl EvaluationReport {
    pub fn baseline(&self, label: &str) -> Option<&BaselineReport> {
        self.baselines.iter().find(|b| b.label == label)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `report.json` plus one CSV per curve into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| EvalError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let mut written = Vec::new();

        let json = dir.join("report.json");
        write_atomic(&json, self.to_json().as_bytes()).map_err(io(&json))?;
        written.push(json);

        let summary = dir.join("auroc.csv");
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["label", "run", "auroc"])?;
        for b in &self.baselines {
            for (run, a) in b.auroc_per_run.iter().enumerate() {
                w.write_record([b.label.clone(), run.to_string(), a.to_string()])?;
            }
            w.write_record([b.label.clone(), "mean".into(), b.auroc_mean.to_string()])?;
            w.write_record([b.label.clone(), "std".into(), b.auroc_std.to_string()])?;
        }
        write_atomic(&summary, &csv_bytes(w)?).map_err(io(&summary))?;
        written.push(summary);

        for b in &self.baselines {
            for (run, roc) in b.roc_per_run.iter().enumerate() {
                let path = dir.join(format!("roc_{}_run{run}.csv", b.label));
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(["fpr", "tpr"])?;
                for (fpr, tpr) in &roc.points {
                    w.write_record([fpr.to_string(), tpr.to_string()])?;
                }
                write_atomic(&path, &csv_bytes(w)?).map_err(io(&path))?;
                written.push(path);
            }
            if let Some(g) = &b.guarantee {
                let path = dir.join(format!("guarantee_{}.csv", b.label));
                let mut w = csv::Writer::from_writer(Vec::new());
                let mut header = vec!["epsilon".to_string()];
                header.extend((0..g.per_run.len()).map(|r| format!("rate_run{r}")));
                header.push("rate_mean".into());
                w.write_record(&header)?;
                for (e, eps) in g.epsilons.iter().enumerate() {
                    let mut row = vec![eps.to_string()];
                    row.extend(g.per_run.iter().map(|run| run[e].to_string()));
                    row.push(g.mean[e].to_string());
                    w.write_record(&row)?;
                }
                write_atomic(&path, &csv_bytes(w)?).map_err(io(&path))?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

fn csv_bytes(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>, EvalError> {
    w.into_inner()
        .map_err(|e| EvalError::Config(format!("csv flush failed: {e}")))
}

/// Measures every query once, then evaluates all runs.
#[allow(clippy::too_many_arguments)]
pub fn run_experiment<M, J>(
    model: &M,
    judge: &J,
    id_queries: &[Query],
    ood_queries: &[Query],
    split: &SplitSpec,
    cfg: &DetectionConfig,
    baselines: &[BaselineSpec],
    jobs: usize,
) -> Result<EvaluationReport, EvalError>
where
    M: SubjectModel + Sync + ?Sized,
    J: Judge + Sync + ?Sized,
{
    if id_queries.is_empty() || ood_queries.is_empty() {
        return Err(EvalError::Config(
            "both in-distribution and OOD queries are required".into(),
        ));
    }
    cfg.validate()?;
    let layers = required_layers(cfg, baselines);
    let id = measure_queries(model, judge, id_queries, &layers, &cfg.budget, jobs)?;
    let ood = measure_queries(model, judge, ood_queries, &layers, &cfg.budget, jobs)?;
    evaluate_measurements(&id, &ood, split, cfg, baselines)
}

fn required_layers(cfg: &DetectionConfig, baselines: &[BaselineSpec]) -> Vec<LayerId> {
    let mut layers = cfg.layers.clone();
    for b in baselines {
        for l in b.layers() {
            if !layers.contains(&l) {
                layers.push(l);
            }
        }
    }
    layers
}

/// Evaluation over pre-measured records (`records[q]` holds one record per
/// required layer of query `q`).
pub fn evaluate_measurements(
    id_records: &[Vec<ToleranceRecord>],
    ood_records: &[Vec<ToleranceRecord>],
    split: &SplitSpec,
    cfg: &DetectionConfig,
    baselines: &[BaselineSpec],
) -> Result<EvaluationReport, EvalError> {
    split.validate()?;
    if id_records.len() < 2 {
        return Err(EvalError::Config(
            "need at least two in-distribution queries to split".into(),
        ));
    }
    if ood_records.is_empty() {
        return Err(EvalError::Config("no OOD queries".into()));
    }
    if baselines.is_empty() {
        return Err(EvalError::Config("no baselines to evaluate".into()));
    }
    let layers = required_layers(cfg, baselines);
    let epsilons = epsilon_grid();

    let mut aurocs = vec![Vec::with_capacity(split.runs); baselines.len()];
    let mut rocs = vec![Vec::with_capacity(split.runs); baselines.len()];
    let mut alarms: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(split.runs); baselines.len()];
    let mut runs = Vec::with_capacity(split.runs);

    for run in 0..split.runs {
        let (cal_idx, test_idx) = split.split(id_records.len(), run);
        let cal_records: Vec<ToleranceRecord> = cal_idx
            .iter()
            .flat_map(|&i| id_records[i].iter().cloned())
            .collect();
        let calibration = calibrate_from_records(
            &cal_records,
            &layers,
            &format!("run {run}: {} calibration queries", cal_idx.len()),
        )
        .map_err(|source| EvalError::Calibration { run, source })?;

        let view = |records: &Vec<ToleranceRecord>| layer_view(records, &calibration.sets);
        let id_test: Vec<_> = test_idx.iter().map(|&i| view(&id_records[i])).collect();
        let ood_test: Vec<_> = ood_records.iter().map(view).collect();

        let undefined = id_test
            .iter()
            .chain(&ood_test)
            .filter(|v| v.values().all(|s| s.p_value.is_none()))
            .count();

        for (b, spec) in baselines.iter().enumerate() {
            let pos: Vec<f64> = ood_test.iter().map(|v| spec.score(v)).collect();
            let neg: Vec<f64> = id_test.iter().map(|v| spec.score(v)).collect();
            aurocs[b].push(auroc(&pos, &neg));
            rocs[b].push(RocCurve::from_scores(&pos, &neg));
            if spec.has_threshold() {
                let rates = epsilons
                    .iter()
                    .map(|&eps| {
                        let alarms = id_test
                            .iter()
                            .filter(|v| spec.detect(v, eps) == Some(DetectionOutcome::Ood))
                            .count();
                        alarms as f64 / id_test.len() as f64
                    })
                    .collect();
                alarms[b].push(rates);
            }
        }

        runs.push(RunDiagnostics {
            run,
            calibration_queries: cal_idx.len(),
            test_id_queries: test_idx.len(),
            test_ood_queries: ood_records.len(),
            calibration: calibration.manifest,
            default_id_fraction: undefined as f64 / (id_test.len() + ood_test.len()) as f64,
        });
    }

    let baselines = baselines
        .iter()
        .enumerate()
        .map(|(b, spec)| {
            let (mean, std) = mean_std(&aurocs[b]);
            let guarantee = spec.has_threshold().then(|| {
                let per_run = alarms[b].clone();
                let mean = (0..epsilons.len())
                    .map(|e| per_run.iter().map(|r| r[e]).sum::<f64>() / per_run.len() as f64)
                    .collect();
                GuaranteeCurve {
                    epsilons: epsilons.clone(),
                    per_run,
                    mean,
                }
            });
            BaselineReport {
                label: spec.label(),
                spec: spec.clone(),
                auroc_per_run: aurocs[b].clone(),
                auroc_mean: mean,
                auroc_std: std,
                roc_per_run: rocs[b].clone(),
                guarantee,
            }
        })
        .collect();

    let unchanged = |records: &[Vec<ToleranceRecord>], layer: LayerId| {
        let of_layer: Vec<&ToleranceRecord> = records
            .iter()
            .flatten()
            .filter(|r| r.layer_id == layer)
            .collect();
        of_layer.iter().filter(|r| !r.changed).count() as f64 / of_layer.len().max(1) as f64
    };
    let layer_diag = layers
        .iter()
        .map(|&layer_id| LayerDiagnostics {
            layer_id,
            id_unchanged_fraction: unchanged(id_records, layer_id),
            ood_unchanged_fraction: unchanged(ood_records, layer_id),
        })
        .collect();

    Ok(EvaluationReport {
        config: cfg.clone(),
        split: *split,
        n_id: id_records.len(),
        n_ood: ood_records.len(),
        baselines,
        layers: layer_diag,
        runs,
    })
}

fn layer_view(
    records: &[ToleranceRecord],
    cals: &CalibrationSets,
) -> BTreeMap<LayerId, LayerScore> {
    records
        .iter()
        .map(|r| {
            let p_value = match (r.alpha, cals.get(&r.layer_id)) {
                (Some(a), Some(cal)) => Some(compute_p_value(a, cal)),
                _ => None,
            };
            (
                r.layer_id,
                LayerScore {
                    alpha: r.alpha.map(|a| a.value()),
                    p_value,
                },
            )
        })
        .collect()
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Pairwise enumeration, independent of the rank-sum route.
    fn auroc_by_pairs(pos: &[f64], neg: &[f64]) -> f64 {
        let mut wins = 0.0;
        for &p in pos {
            for &n in neg {
                wins += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        wins / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auroc_worked_examples() {
        assert_eq!(auroc(&[0.9, 0.9], &[0.1, 0.1, 0.1]), 1.0);
        assert_eq!(auroc(&[0.4, 0.4], &[0.4]), 0.5);
        assert_eq!(auroc(&[0.8, 0.6], &[0.7, 0.1]), 0.75);
        assert_eq!(auroc_by_pairs(&[0.8, 0.6], &[0.7, 0.1]), 0.75);
    }

    #[test]
    fn majority_vote_examples() {
        use DetectionOutcome::{InDistribution as I, Ood as O};
        assert_eq!(majority_vote(&[O, O, I]).unwrap(), O);
        assert_eq!(majority_vote(&[O, I]).unwrap(), I);
        assert_eq!(majority_vote(&[I, I, I]).unwrap(), I);
        assert!(majority_vote(&[]).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let split = SplitSpec::default();
        let (cal, test) = split.split(200, 0);
        assert_eq!(cal.len(), 40);
        assert_eq!(test.len(), 160);
        assert_eq!(split.split(200, 0), (cal.clone(), test));
        assert_ne!(split.split(200, 1).0, cal);
        let (cal, test) = split.split(2, 0);
        assert_eq!((cal.len(), test.len()), (1, 1));
        assert!(SplitSpec {
            calibration_fraction: 1.0,
            ..split
        }
        .validate()
        .is_err());
    }

    #[test]
    fn majority_score_matches_vote_at_every_threshold() {
        let spec = BaselineSpec::MajorityVote {
            layers: vec![1, 2, 3],
        };
        let p = |n: usize, d: usize| Some(PValue::from_rank(n - 1, d - 1));
        let view: BTreeMap<LayerId, LayerScore> = [
            (
                1,
                LayerScore {
                    alpha: Some(0.9),
                    p_value: p(1, 10),
                },
            ),
            (
                2,
                LayerScore {
                    alpha: Some(0.8),
                    p_value: p(3, 10),
                },
            ),
            (
                3,
                LayerScore {
                    alpha: None,
                    p_value: None,
                },
            ),
        ]
        .into_iter()
        .collect();
        assert!((spec.score(&view) - 0.7).abs() < 1e-12);
        for eps in epsilon_grid() {
            let by_score = 1.0 - spec.score(&view) < eps;
            assert_eq!(spec.detect(&view, eps).unwrap().is_ood(), by_score);
        }
    }

    proptest! {
        #[test]
        fn auroc_matches_pairwise_enumeration(
            pos in proptest::collection::vec(0u8..20, 1..40),
            neg in proptest::collection::vec(0u8..20, 1..40),
        ) {
            let pos: Vec<f64> = pos.into_iter().map(f64::from).collect();
            let neg: Vec<f64> = neg.into_iter().map(f64::from).collect();
            let a = auroc(&pos, &neg);
            prop_assert!((a - auroc_by_pairs(&pos, &neg)).abs() < 1e-12);
            let roc = RocCurve::from_scores(&pos, &neg);
            prop_assert!((roc.auroc - a).abs() < 1e-12);
            prop_assert_eq!(roc.points.first(), Some(&(0.0, 0.0)));
            prop_assert_eq!(roc.points.last(), Some(&(1.0, 1.0)));
            prop_assert!(roc.points.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
        }

        #[test]
        fn auroc_invariant_under_cubing(
            pos in proptest::collection::vec(-5.0f64..5.0, 1..30),
            neg in proptest::collection::vec(-5.0f64..5.0, 1..30),
        ) {
            let cube = |v: &[f64]| v.iter().map(|x| x * x * x).collect::<Vec<_>>();
            prop_assert!((auroc(&pos, &neg) - auroc(&cube(&pos), &cube(&neg))).abs() < 1e-12);
        }
    }
}
