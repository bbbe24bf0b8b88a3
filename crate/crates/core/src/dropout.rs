//! Dropout-tolerance non-conformity measure and the multi-layer detector.
//!
//! For each configured layer the driver asks the subject model for its `m`
//! most activated neurons on the query, then zeroes an ever larger prefix of
//! that list (`n`, `2n`, ... neurons, strongest first) until the judge says the
//! response changed. The number of dropped neurons `i` gives the score
//! `alpha = 1 - i / layer_width`. Layers whose response never changes inside
//! the budget have no score and are left out of the merge; a query with no
//! scored layer at all is reported in-distribution.

use std::collections::BTreeMap;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{
    compute_p_value, detect_unchecked, merge_p_values, CalibrationSet, ConformalError,
    DetectionOutcome, LayerId, MergedPValue, MergingMethod, NonconformityScore, PValue,
};

/// Index of a neuron in a layer's hidden dimension.
pub type NeuronId = u32;

/// Calibration sets keyed by layer.
pub type CalibrationSets = BTreeMap<LayerId, CalibrationSet>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Response(pub String);

impl Response {
    pub fn new(text: impl Into<String>) -> Self {
        Self(text.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Failures talking to a subject model or judge.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbeError {
    #[error("probe transport failed: {0}")]
    Transport(String),

    #[error("probe handshake failed: {0}")]
    Handshake(String),

    #[error("probe reported an error: {0}")]
    Remote(String),

    #[error("probe protocol violation: {0}")]
    Protocol(String),
}

/// A model that can be probed with neuron dropout.
///
/// Implementations must decode deterministically so that `answer` is
/// reproducible for a fixed query.
pub trait SubjectModel {
    /// Original response with no dropout.
    fn answer(&self, query: &Query) -> Result<Response, ProbeError>;

    /// The `min(m, width)` most activated neurons of `layer` at the final
    /// prompt token, in ascending order of activation.
    fn top_activated(
        &self,
        query: &Query,
        layer: LayerId,
        m: usize,
    ) -> Result<Vec<NeuronId>, ProbeError>;

    /// Response with the listed neurons of `layer` zeroed.
    fn answer_with_dropout(
        &self,
        query: &Query,
        layer: LayerId,
        dropped: &[NeuronId],
    ) -> Result<Response, ProbeError>;

    fn layer_width(&self, layer: LayerId) -> Result<usize, ProbeError>;
}

/// Semantic-equivalence oracle for two responses.
pub trait Judge {
    fn same(&self, a: &Response, b: &Response) -> Result<bool, ProbeError>;
}

impl<T: SubjectModel + ?Sized> SubjectModel for &T {
    fn answer(&self, query: &Query) -> Result<Response, ProbeError> {
        (**self).answer(query)
    }

    fn top_activated(
        &self,
        query: &Query,
        layer: LayerId,
        m: usize,
    ) -> Result<Vec<NeuronId>, ProbeError> {
        (**self).top_activated(query, layer, m)
    }

    fn answer_with_dropout(
        &self,
        query: &Query,
        layer: LayerId,
        dropped: &[NeuronId],
    ) -> Result<Response, ProbeError> {
        (**self).answer_with_dropout(query, layer, dropped)
    }

    fn layer_width(&self, layer: LayerId) -> Result<usize, ProbeError> {
        (**self).layer_width(layer)
    }
}

impl<T: Judge + ?Sized> Judge for &T {
    fn same(&self, a: &Response, b: &Response) -> Result<bool, ProbeError> {
        (**self).same(a, b)
    }
}

/// Judge that compares responses verbatim.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactJudge;

impl Judge for ExactJudge {
    fn same(&self, a: &Response, b: &Response) -> Result<bool, ProbeError> {
        Ok(a == b)
    }
}

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no calibration set for layer {0}")]
    MissingCalibration(LayerId),

    #[error(
        "layer {layer_id}: no calibration query changed its response within the dropout budget"
    )]
    UndefinedLayer { layer_id: LayerId },

    #[error(transparent)]
    Probe(#[from] ProbeError),

    #[error(transparent)]
    Conformal(#[from] ConformalError),
}

/// How many neurons may be dropped per layer and how fast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropoutBudget {
    /// Maximum number of dropped neurons, `m`.
    pub max_drop: usize,
    /// Neurons added per iteration, `n`.
    pub step: usize,
    /// Also try `i = m` when `m` is a multiple of `n`.
    #[serde(default)]
    pub inclusive_bound: bool,
}

impl Default for DropoutBudget {
    fn default() -> Self {
        Self {
            max_drop: 30,
            step: 5,
            inclusive_bound: false,
        }
    }
}

impl DropoutBudget {
    pub fn new(max_drop: usize, step: usize) -> Result<Self, DetectError> {
        let budget = Self {
            max_drop,
            step,
            inclusive_bound: false,
        };
        budget.validate()?;
        Ok(budget)
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        if self.step == 0 || self.step > self.max_drop {
            return Err(DetectError::Config(format!(
                "dropout budget needs 1 <= step <= max_drop, got step={} max_drop={}",
                self.step, self.max_drop
            )));
        }
        Ok(())
    }

    /// Dropped counts tried in order: `n, 2n, ...` while `i < m`
    /// (or `i <= m` with `inclusive_bound`).
    pub fn tried_counts(&self) -> impl Iterator<Item = usize> + '_ {
        (1..)
            .map(move |k| k * self.step)
            .take_while(move |&i| i < self.max_drop || (self.inclusive_bound && i == self.max_drop))
    }

    /// Largest count that is ever tried; `None` if the loop never runs.
    pub fn largest_tried(&self) -> Option<usize> {
        self.tried_counts().last()
    }
}

/// Outcome of the iterative dropout search on one (query, layer).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToleranceRecord {
    pub query_id: String,
    pub layer_id: LayerId,
    pub changed: bool,
    pub dropped_count: Option<usize>,
    pub layer_width: usize,
    pub alpha: Option<NonconformityScore>,
}

impl ToleranceRecord {
    pub fn changed_at(
        query_id: impl Into<String>,
        layer_id: LayerId,
        dropped_count: usize,
        layer_width: usize,
    ) -> Result<Self, DetectError> {
        if dropped_count == 0 || dropped_count > layer_width {
            return Err(DetectError::Config(format!(
                "dropped count {dropped_count} outside 1..={layer_width}"
            )));
        }
        let alpha = NonconformityScore::new(1.0 - dropped_count as f64 / layer_width as f64)?;
        Ok(Self {
            query_id: query_id.into(),
            layer_id,
            changed: true,
            dropped_count: Some(dropped_count),
            layer_width,
            alpha: Some(alpha),
        })
    }

    pub fn unchanged(query_id: impl Into<String>, layer_id: LayerId, layer_width: usize) -> Self {
        Self {
            query_id: query_id.into(),
            layer_id,
            changed: false,
            dropped_count: None,
            layer_width,
            alpha: None,
        }
    }
}

/// Layers to probe plus the merge and threshold settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub layers: Vec<LayerId>,
    pub budget: DropoutBudget,
    pub method: MergingMethod,
    pub epsilon: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            layers: vec![7, 15, 22],
            budget: DropoutBudget::default(),
            method: MergingMethod::Arithmetic,
            epsilon: 0.05,
        }
    }
}

impl DetectionConfig {
    /// `epsilon = 0` is accepted and never flags anything.
    pub fn validate(&self) -> Result<(), DetectError> {
        if self.layers.is_empty() {
            return Err(DetectError::Config("at least one layer is required".into()));
        }
        let mut seen = self.layers.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.layers.len() {
            return Err(DetectError::Config("layers must be distinct".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(DetectError::Config(format!(
                "epsilon must lie in [0, 1), got {}",
                self.epsilon
            )));
        }
        self.budget.validate()
    }
}

/// Runs the dropout search for one layer.
pub fn measure_tolerance<M, J>(
    model: &M,
    judge: &J,
    query: &Query,
    layer_id: LayerId,
    budget: &DropoutBudget,
) -> Result<ToleranceRecord, DetectError>
where
    M: SubjectModel + ?Sized,
    J: Judge + ?Sized,
{
    budget.validate()?;
    let original = model.answer(query)?;
    measure_against(model, judge, query, &original, layer_id, budget)
}

/// Dropout search against an already obtained original response.
fn measure_against<M, J>(
    model: &M,
    judge: &J,
    query: &Query,
    original: &Response,
    layer_id: LayerId,
    budget: &DropoutBudget,
) -> Result<ToleranceRecord, DetectError>
where
    M: SubjectModel + ?Sized,
    J: Judge + ?Sized,
{
    let width = model.layer_width(layer_id)?;
    let ascending = model.top_activated(query, layer_id, budget.max_drop)?;
    check_neuron_list(&ascending, budget.max_drop, width)?;
    // strongest first, so a prefix is always the i most activated neurons
    let order: Vec<NeuronId> = ascending.into_iter().rev().collect();

    for i in budget.tried_counts() {
        if i > order.len() {
            break;
        }
        let dropped = model.answer_with_dropout(query, layer_id, &order[..i])?;
        let same = dropped == *original || judge.same(original, &dropped)?;
        if !same {
            return ToleranceRecord::changed_at(&query.id, layer_id, i, width);
        }
    }
    Ok(ToleranceRecord::unchanged(&query.id, layer_id, width))
}

fn check_neuron_list(list: &[NeuronId], m: usize, width: usize) -> Result<(), ProbeError> {
    let expected = m.min(width);
    if list.len() != expected {
        return Err(ProbeError::Protocol(format!(
            "top_activated returned {} neurons, expected {expected}",
            list.len()
        )));
    }
    let mut sorted = list.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(ProbeError::Protocol(
            "top_activated returned duplicate neurons".into(),
        ));
    }
    if let Some(&bad) = sorted.iter().find(|&&id| id as usize >= width) {
        return Err(ProbeError::Protocol(format!(
            "neuron {bad} out of range for layer width {width}"
        )));
    }
    Ok(())
}

/// Per-layer slice of a detection.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDetection {
    pub record: ToleranceRecord,
    pub p_value: Option<PValue>,
}

/// Detector verdict on one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryDetection {
    pub query_id: String,
    pub outcome: DetectionOutcome,
    /// `None` when no layer produced a score (default in-distribution).
    pub merged: Option<MergedPValue>,
    pub layers: Vec<LayerDetection>,
}

impl QueryDetection {
    /// JSONL lines: one per layer, then the summary line.
    pub fn to_lines(&self) -> Vec<RecordLine> {
        let mut lines: Vec<RecordLine> = self
            .layers
            .iter()
            .map(|l| RecordLine::from_layer(&l.record, l.p_value))
            .collect();
        lines.push(self.summary_line());
        lines
    }

    pub fn summary_line(&self) -> RecordLine {
        RecordLine {
            query_id: self.query_id.clone(),
            merged_p: self.merged.map(|m| m.value),
            outcome: Some(self.outcome),
            ..RecordLine::default()
        }
    }
}

/// Turns measured records into a verdict. Pure; no model calls.
pub fn score_records(
    query_id: &str,
    records: &[ToleranceRecord],
    cals: &CalibrationSets,
    method: MergingMethod,
    epsilon: f64,
) -> Result<QueryDetection, DetectError> {
    let mut layers = Vec::with_capacity(records.len());
    for record in records {
        let cal = cals
            .get(&record.layer_id)
            .ok_or(DetectError::MissingCalibration(record.layer_id))?;
        let p_value = record.alpha.map(|a| compute_p_value(a, cal));
        layers.push(LayerDetection {
            record: record.clone(),
            p_value,
        });
    }
    let defined: Vec<PValue> = layers.iter().filter_map(|l| l.p_value).collect();
    let (merged, outcome) = if defined.is_empty() {
        (None, DetectionOutcome::InDistribution)
    } else {
        let merged = merge_p_values(&defined, method)?;
        (Some(merged), detect_unchecked(merged.value, epsilon))
    };
    Ok(QueryDetection {
        query_id: query_id.to_string(),
        outcome,
        merged,
        layers,
    })
}

/// Measures every configured layer for one query, sharing one original answer.
pub fn measure_query<M, J>(
    model: &M,
    judge: &J,
    query: &Query,
    layers: &[LayerId],
    budget: &DropoutBudget,
) -> Result<Vec<ToleranceRecord>, DetectError>
where
    M: SubjectModel + ?Sized,
    J: Judge + ?Sized,
{
    let original = model.answer(query)?;
    layers
        .iter()
        .map(|&layer| measure_against(model, judge, query, &original, layer, budget))
        .collect()
}

/// Full detector on one query.
pub fn detect_query<M, J>(
    model: &M,
    judge: &J,
    query: &Query,
    cals: &CalibrationSets,
    cfg: &DetectionConfig,
) -> Result<QueryDetection, DetectError>
where
    M: SubjectModel + ?Sized,
    J: Judge + ?Sized,
{
    cfg.validate()?;
    if let Some(&missing) = cfg.layers.iter().find(|l| !cals.contains_key(l)) {
        return Err(DetectError::MissingCalibration(missing));
    }
    let records = measure_query(model, judge, query, &cfg.layers, &cfg.budget)?;
    score_records(&query.id, &records, cals, cfg.method, cfg.epsilon)
}

/// Measures many queries, fanning out over `jobs` worker threads.
///
/// Output order follows `queries` regardless of scheduling.
pub fn measure_queries<M, J>(
    model: &M,
    judge: &J,
    queries: &[Query],
    layers: &[LayerId],
    budget: &DropoutBudget,
    jobs: usize,
) -> Result<Vec<Vec<ToleranceRecord>>, DetectError>
where
    M: SubjectModel + Sync + ?Sized,
    J: Judge + Sync + ?Sized,
{
    budget.validate()?;
    let jobs = jobs.clamp(1, queries.len().max(1));
    if jobs == 1 {
        return queries
            .iter()
            .map(|q| measure_query(model, judge, q, layers, budget))
            .collect();
    }
    let mut slots: Vec<Option<Result<Vec<ToleranceRecord>, DetectError>>> =
        (0..queries.len()).map(|_| None).collect();
    thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|worker| {
                scope.spawn(move || {
                    (worker..queries.len())
                        .step_by(jobs)
                        .map(|idx| {
                            (
                                idx,
                                measure_query(model, judge, &queries[idx], layers, budget),
                            )
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for handle in handles {
            for (idx, result) in handle.join().expect("measurement worker panicked") {
                slots[idx] = Some(result);
            }
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.expect("every query measured"))
        .collect()
}

/// Per-layer bookkeeping emitted next to calibration sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub layer_id: LayerId,
    pub queries: usize,
    pub changed: usize,
    pub unchanged: usize,
    pub unchanged_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub sets: CalibrationSets,
    pub manifest: Vec<LayerManifest>,
    pub records: Vec<ToleranceRecord>,
}

/// Builds per-layer calibration sets from already measured records.
///
/// `records` holds one entry per (query, layer); only defined scores enter
/// the sets.
pub fn calibrate_from_records(
    records: &[ToleranceRecord],
    layers: &[LayerId],
    source: &str,
) -> Result<Calibration, DetectError> {
    let mut sets = CalibrationSets::new();
    let mut manifest = Vec::with_capacity(layers.len());
    for &layer_id in layers {
        let of_layer: Vec<&ToleranceRecord> =
            records.iter().filter(|r| r.layer_id == layer_id).collect();
        let scores: Vec<NonconformityScore> = of_layer.iter().filter_map(|r| r.alpha).collect();
        let queries = of_layer.len();
        let changed = scores.len();
        manifest.push(LayerManifest {
            layer_id,
            queries,
            changed,
            unchanged: queries - changed,
            unchanged_fraction: if queries == 0 {
                0.0
            } else {
                (queries - changed) as f64 / queries as f64
            },
        });
        if scores.is_empty() {
            return Err(DetectError::UndefinedLayer { layer_id });
        }
        let set = CalibrationSet::new(layer_id, scores, format!("{source}; layer {layer_id}"))?;
        sets.insert(layer_id, set);
    }
    Ok(Calibration {
        sets,
        manifest,
        records: records.to_vec(),
    })
}

/// Measures the calibration queries and builds per-layer calibration sets.
pub fn calibrate<M, J>(
    model: &M,
    judge: &J,
    queries: &[Query],
    cfg: &DetectionConfig,
    jobs: usize,
) -> Result<Calibration, DetectError>
where
    M: SubjectModel + Sync + ?Sized,
    J: Judge + Sync + ?Sized,
{
    cfg.validate()?;
    if queries.is_empty() {
        return Err(DetectError::Config("no calibration queries".into()));
    }
    let records: Vec<ToleranceRecord> =
        measure_queries(model, judge, queries, &cfg.layers, &cfg.budget, jobs)?
            .into_iter()
            .flatten()
            .collect();
    let source = format!("{} calibration queries", queries.len());
    calibrate_from_records(&records, &cfg.layers, &source)
}

/// One JSONL line of detector output. Absent fields are omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordLine {
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_id: Option<LayerId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub changed: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropped_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merged_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<DetectionOutcome>,
}

impl RecordLine {
    pub fn from_layer(record: &ToleranceRecord, p_value: Option<PValue>) -> Self {
        Self {
            query_id: record.query_id.clone(),
            layer_id: Some(record.layer_id),
            changed: Some(record.changed),
            dropped_count: record.dropped_count,
            layer_width: Some(record.layer_width),
            alpha: record.alpha.map(NonconformityScore::value),
            p_value: p_value.map(PValue::value),
            ..Self::default()
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record line serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self, DetectError> {
        serde_json::from_str(line).map_err(|e| DetectError::Config(format!("bad record line: {e}")))
    }

    /// Recovers the tolerance record from a per-layer line, checking that the
    /// changed flag, dropped count and score agree with each other.
    pub fn to_tolerance_record(&self) -> Result<ToleranceRecord, DetectError> {
        let bad = |why: &str| DetectError::Config(format!("record for {}: {why}", self.query_id));
        let layer_id = self.layer_id.ok_or_else(|| bad("missing layer_id"))?;
        let width = self.layer_width.ok_or_else(|| bad("missing layer_width"))?;
        let changed = self.changed.ok_or_else(|| bad("missing changed"))?;
        match (changed, self.dropped_count, self.alpha) {
            (true, Some(count), Some(alpha)) => {
                let record = ToleranceRecord::changed_at(&self.query_id, layer_id, count, width)?;
                let expected = record
                    .alpha
                    .map(NonconformityScore::value)
                    .unwrap_or(f64::NAN);
                if (expected - alpha).abs() > 1e-12 {
                    return Err(bad("alpha does not match dropped_count / layer_width"));
                }
                Ok(record)
            }
            (false, None, None) => Ok(ToleranceRecord::unchanged(&self.query_id, layer_id, width)),
            _ => Err(bad("changed, dropped_count and alpha disagree")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    /// Voter over explicit contributions; neuron `i` has activation `v[i]`.
    struct Voter {
        v: Vec<u64>,
        background: u64,
    }

    impl Voter {
        fn label(&self, dropped: &[NeuronId]) -> Response {
            let removed: u64 = dropped.iter().map(|&i| self.v[i as usize]).sum();
            let rest = self.v.iter().sum::<u64>() - removed;
            Response::new(if rest > self.background { "A" } else { "B" })
        }
    }

    impl SubjectModel for Voter {
        fn answer(&self, _: &Query) -> Result<Response, ProbeError> {
            Ok(self.label(&[]))
        }

        fn top_activated(
            &self,
            _: &Query,
            _: LayerId,
            m: usize,
        ) -> Result<Vec<NeuronId>, ProbeError> {
            let mut ids: Vec<NeuronId> = (0..self.v.len() as NeuronId).collect();
            ids.sort_by_key(|&i| std::cmp::Reverse(self.v[i as usize]));
            ids.truncate(m);
            ids.reverse();
            Ok(ids)
        }

        fn answer_with_dropout(
            &self,
            _: &Query,
            _: LayerId,
            dropped: &[NeuronId],
        ) -> Result<Response, ProbeError> {
            Ok(self.label(dropped))
        }

        fn layer_width(&self, _: LayerId) -> Result<usize, ProbeError> {
            Ok(self.v.len())
        }
    }

    struct Counting<'a> {
        inner: &'a Voter,
        answers: Cell<usize>,
        dropout_answers: Cell<usize>,
        last_drop: std::cell::RefCell<Vec<NeuronId>>,
        prefix_ok: Cell<bool>,
    }

    impl SubjectModel for Counting<'_> {
        fn answer(&self, q: &Query) -> Result<Response, ProbeError> {
            self.answers.set(self.answers.get() + 1);
            self.inner.answer(q)
        }

        fn top_activated(
            &self,
            q: &Query,
            l: LayerId,
            m: usize,
        ) -> Result<Vec<NeuronId>, ProbeError> {
            self.last_drop.borrow_mut().clear();
            self.inner.top_activated(q, l, m)
        }

        fn answer_with_dropout(
            &self,
            q: &Query,
            l: LayerId,
            dropped: &[NeuronId],
        ) -> Result<Response, ProbeError> {
            self.dropout_answers.set(self.dropout_answers.get() + 1);
            let mut last = self.last_drop.borrow_mut();
            if !(dropped.len() > last.len() && dropped.starts_with(&last)) {
                self.prefix_ok.set(false);
            }
            *last = dropped.to_vec();
            self.inner.answer_with_dropout(q, l, dropped)
        }

        fn layer_width(&self, l: LayerId) -> Result<usize, ProbeError> {
            self.inner.layer_width(l)
        }
    }

    struct FailingJudge;

    impl Judge for FailingJudge {
        fn same(&self, _: &Response, _: &Response) -> Result<bool, ProbeError> {
            Err(ProbeError::Transport("judge offline".into()))
        }
    }

    fn q() -> Query {
        Query::new("q0", "q0")
    }

    fn cals(values: &[(LayerId, &[f64])]) -> CalibrationSets {
        values
            .iter()
            .map(|&(l, v)| (l, CalibrationSet::from_values(l, v, "t").unwrap()))
            .collect()
    }

    #[test]
    fn tried_counts_follow_strict_bound() {
        let b = DropoutBudget::default();
        assert_eq!(
            b.tried_counts().collect::<Vec<_>>(),
            vec![5, 10, 15, 20, 25]
        );
        let inclusive = DropoutBudget {
            inclusive_bound: true,
            ..b
        };
        assert_eq!(inclusive.largest_tried(), Some(30));
        assert_eq!(DropoutBudget::new(5, 5).unwrap().largest_tried(), None);
        assert!(DropoutBudget::new(5, 0).is_err());
        assert!(DropoutBudget::new(5, 6).is_err());
    }

    #[test]
    fn first_iteration_flip() {
        let mut v = vec![1u64; 100];
        v[0] = 1000;
        let voter = Voter { v, background: 500 };
        let rec =
            measure_tolerance(&voter, &ExactJudge, &q(), 7, &DropoutBudget::default()).unwrap();
        assert!(rec.changed);
        assert_eq!(rec.dropped_count, Some(5));
        assert_eq!(rec.alpha.unwrap().value(), 1.0 - 5.0 / 100.0);
    }

    #[test]
    fn heavy_background_never_flips() {
        let voter = Voter {
            v: vec![1; 100],
            background: 50,
        };
        let rec =
            measure_tolerance(&voter, &ExactJudge, &q(), 7, &DropoutBudget::default()).unwrap();
        assert!(!rec.changed);
        assert_eq!(rec.dropped_count, None);
        assert_eq!(rec.alpha, None);
    }

    #[test]
    fn dropout_sets_grow_by_prefix_and_respect_budget() {
        let voter = Voter {
            v: vec![1; 100],
            background: 50,
        };
        let counting = Counting {
            inner: &voter,
            answers: Cell::new(0),
            dropout_answers: Cell::new(0),
            last_drop: Default::default(),
            prefix_ok: Cell::new(true),
        };
        let cfg = DetectionConfig::default();
        let cal = cals(&[(7, &[0.5]), (15, &[0.5]), (22, &[0.5])]);
        let det = detect_query(&counting, &ExactJudge, &q(), &cal, &cfg).unwrap();
        assert_eq!(det.outcome, DetectionOutcome::InDistribution);
        assert!(det.merged.is_none());
        assert!(counting.prefix_ok.get());
        assert_eq!(counting.answers.get(), 1);
        // ceil((30 - 1) / 5) = 5 per layer
        assert_eq!(counting.dropout_answers.get(), 3 * 5);
    }

    #[test]
    fn probe_errors_propagate() {
        let mut v = vec![1u64; 10];
        v[0] = 100;
        let voter = Voter { v, background: 50 };
        let err = measure_tolerance(&voter, &FailingJudge, &q(), 0, &DropoutBudget::default());
        assert!(matches!(
            err,
            Err(DetectError::Probe(ProbeError::Transport(_)))
        ));
    }

    #[test]
    fn reflexive_responses_skip_the_judge() {
        let voter = Voter {
            v: vec![1; 100],
            background: 50,
        };
        // FailingJudge would error if consulted
        let rec =
            measure_tolerance(&voter, &FailingJudge, &q(), 0, &DropoutBudget::default()).unwrap();
        assert!(!rec.changed);
    }

    #[test]
    fn narrow_layers_stop_when_list_exhausted() {
        let voter = Voter {
            v: vec![1; 8],
            background: 0,
        };
        let rec =
            measure_tolerance(&voter, &ExactJudge, &q(), 0, &DropoutBudget::default()).unwrap();
        // i = 5 leaves 3 > 0; i = 10 exceeds the 8-neuron list
        assert!(!rec.changed);
    }

    #[test]
    fn missing_calibration_fails_before_model_calls() {
        let voter = Voter {
            v: vec![1; 10],
            background: 5,
        };
        let counting = Counting {
            inner: &voter,
            answers: Cell::new(0),
            dropout_answers: Cell::new(0),
            last_drop: Default::default(),
            prefix_ok: Cell::new(true),
        };
        let cal = cals(&[(7, &[0.5]), (15, &[0.5])]);
        let err = detect_query(
            &counting,
            &ExactJudge,
            &q(),
            &cal,
            &DetectionConfig::default(),
        );
        assert!(matches!(err, Err(DetectError::MissingCalibration(22))));
        assert_eq!(counting.answers.get(), 0);
    }

    fn record(layer: LayerId, count: Option<usize>) -> ToleranceRecord {
        match count {
            Some(c) => ToleranceRecord::changed_at("q", layer, c, 100).unwrap(),
            None => ToleranceRecord::unchanged("q", layer, 100),
        }
    }

    #[test]
    fn arithmetic_merge_flags_small_p_values() {
        // 24 calibration scores all below 0.95, so alpha = 0.95 gets p = 1/25 = 0.04
        let low: Vec<f64> = (0..24).map(|i| 0.5 + i as f64 * 0.01).collect();
        let cal = cals(&[(7, &low), (15, &low), (22, &low)]);
        let recs = [record(7, Some(5)), record(15, Some(5)), record(22, Some(5))];
        let det = score_records("q", &recs, &cal, MergingMethod::Arithmetic, 0.1).unwrap();
        for l in &det.layers {
            assert_eq!(l.p_value.unwrap().value(), 0.04);
        }
        let merged = det.merged.unwrap();
        assert!((merged.value - 0.08).abs() < 1e-12);
        assert_eq!(det.outcome, DetectionOutcome::Ood);
    }

    #[test]
    fn single_defined_layer_passes_through() {
        // alpha = 0.95 against {0.9, 0.99, 1.0}: two scores >= alpha, p = 3/4
        let cal = cals(&[(7, &[0.9, 0.99, 1.0]), (15, &[0.5]), (22, &[0.5])]);
        let recs = [record(7, Some(5)), record(15, None), record(22, None)];
        for method in MergingMethod::ALL {
            let det = score_records("q", &recs, &cal, method, 0.05).unwrap();
            let merged = det.merged.unwrap();
            assert_eq!(merged.inputs_used, 1);
            assert_eq!(merged.value, 0.75);
            assert_eq!(det.outcome, DetectionOutcome::InDistribution);
        }
    }

    #[test]
    fn no_defined_layer_defaults_to_in_distribution() {
        let cal = cals(&[(7, &[0.5]), (15, &[0.5]), (22, &[0.5])]);
        let recs = [record(7, None), record(15, None), record(22, None)];
        let det = score_records("q", &recs, &cal, MergingMethod::Arithmetic, 0.5).unwrap();
        assert_eq!(det.outcome, DetectionOutcome::InDistribution);
        assert!(det.merged.is_none());
        let summary = det.summary_line().to_json_line();
        assert_eq!(summary, r#"{"query_id":"q","outcome":"iD"}"#);
    }

    #[test]
    fn calibration_keeps_only_defined_scores() {
        let recs: Vec<ToleranceRecord> = (0..10)
            .map(|i| {
                let count = if i % 3 == 0 { None } else { Some(25) };
                match count {
                    Some(c) => ToleranceRecord::changed_at(format!("q{i}"), 7, c, 100).unwrap(),
                    None => ToleranceRecord::unchanged(format!("q{i}"), 7, 100),
                }
            })
            .collect();
        let cal = calibrate_from_records(&recs, &[7], "unit").unwrap();
        let set = &cal.sets[&7];
        assert_eq!(set.len(), 6);
        assert!(set.scores().iter().all(|s| s.value() == 0.75));
        assert_eq!(cal.manifest[0].unchanged, 4);

        let none: Vec<ToleranceRecord> = (0..3)
            .map(|i| ToleranceRecord::unchanged(format!("q{i}"), 7, 100))
            .collect();
        assert!(matches!(
            calibrate_from_records(&none, &[7], "unit"),
            Err(DetectError::UndefinedLayer { layer_id: 7 })
        ));
    }

    #[test]
    fn record_lines_round_trip_through_validation() {
        let rec = ToleranceRecord::changed_at("q9", 15, 10, 200).unwrap();
        let line = RecordLine::from_layer(&rec, Some(PValue::from_rank(1, 3)));
        let text = line.to_json_line();
        assert!(!text.contains("merged_p"));
        let back = RecordLine::from_json_line(&text).unwrap();
        assert_eq!(back.to_tolerance_record().unwrap(), rec);

        let inconsistent = r#"{"query_id":"q","layer_id":1,"changed":true,"layer_width":10}"#;
        let parsed = RecordLine::from_json_line(inconsistent).unwrap();
        assert!(parsed.to_tolerance_record().is_err());
        assert!(RecordLine::from_json_line(r#"{"query_id":"q","bogus":1}"#).is_err());
    }

    #[test]
    fn parallel_measurement_matches_serial() {
        let mut v: Vec<u64> = (1..=64).rev().collect();
        v[0] = 500;
        let voter = Voter { v, background: 900 };
        let queries: Vec<Query> = (0..9).map(|i| Query::new(format!("q{i}"), "x")).collect();
        let budget = DropoutBudget::default();
        let serial = measure_queries(&voter, &ExactJudge, &queries, &[1, 2], &budget, 1).unwrap();
        let parallel = measure_queries(&voter, &ExactJudge, &queries, &[1, 2], &budget, 4).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn config_validation() {
        let mut cfg = DetectionConfig::default();
        cfg.validate().unwrap();
        cfg.layers = vec![7, 7];
        assert!(cfg.validate().is_err());
        cfg.layers = vec![];
        assert!(cfg.validate().is_err());
        cfg = DetectionConfig {
            epsilon: 1.0,
            ..DetectionConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.epsilon = 0.0;
        cfg.validate().unwrap();
    }
}
