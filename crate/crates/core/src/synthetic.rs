//! Redundant-voter subject models with closed-form dropout tolerance.
//!
//! Every layer of a synthetic query holds `N` neurons with positive integer
//! contributions `v` and a background mass `B`. The model answers `"A"` while
//! the surviving contributions outweigh the background and `"B"` otherwise.
//! Contributions decay geometrically with a rate set by the redundancy
//! parameter `rho`: `rho = 1` spreads mass evenly over the layer (many neurons
//! must go before the vote flips), small `rho` piles it onto a handful of
//! neurons. In-distribution queries draw a high `rho`, OOD queries a low one.
//!
//! Because the activation order equals the contribution order, dropping the
//! most activated neurons first is optimal and the minimal flip count `t*` is
//! a prefix-sum scan ([`oracle_tolerance`]).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::LayerId;
use crate::dropout::{NeuronId, ProbeError, Query, Response, SubjectModel};

/// Lowest redundancy a query can draw; keeps the decay rate finite.
pub const RHO_MIN: f64 = 0.01;

/// Total contribution mass of a layer in integer units.
const MASS_UNITS: f64 = 1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyntheticError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("degenerate instance for {query_id} layer {layer_id}: background {background} >= total {total}")]
    Degenerate {
        query_id: String,
        layer_id: LayerId,
        background: u64,
        total: u64,
    },

    #[error("malformed corpus line: {0}")]
    Malformed(String),
}

/// Distribution of `rho` for one class: uniform on `center +- spread`,
/// clipped to `[RHO_MIN, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoDistribution {
    pub center: f64,
    pub spread: f64,
}

impl RhoDistribution {
    pub fn new(center: f64, spread: f64) -> Self {
        Self { center, spread }
    }

    fn validate(&self, what: &str) -> Result<(), SyntheticError> {
        if !(self.center > 0.0 && self.center <= 1.0) || !(0.0..=1.0).contains(&self.spread) {
            return Err(SyntheticError::InvalidSpec(format!(
                "{what}: rho center must be in (0, 1] and spread in [0, 1], got {} +- {}",
                self.center, self.spread
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        let lo = (self.center - self.spread).max(RHO_MIN);
        let hi = (self.center + self.spread).min(1.0);
        if hi <= lo {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    }
}

/// Corpus generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_id: usize,
    pub n_ood: usize,
    pub rho_id: RhoDistribution,
    pub rho_ood: RhoDistribution,
    pub layer_widths: BTreeMap<LayerId, usize>,
    /// Background mass as a fraction of the layer total, drawn uniformly.
    pub background: (f64, f64),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_id: 200,
            n_ood: 200,
            rho_id: RhoDistribution::new(0.95, 0.05),
            rho_ood: RhoDistribution::new(0.2, 0.1),
            layer_widths: [7, 15, 22].into_iter().map(|l| (l, 4096)).collect(),
            background: (0.3, 0.7),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        self.rho_id.validate("in-distribution")?;
        self.rho_ood.validate("out-of-distribution")?;
        if self.n_id + self.n_ood == 0 {
            return Err(SyntheticError::InvalidSpec("corpus would be empty".into()));
        }
        if self.layer_widths.is_empty() || self.layer_widths.values().any(|&w| w == 0) {
            return Err(SyntheticError::InvalidSpec(
                "every layer needs a positive width".into(),
            ));
        }
        let (lo, hi) = self.background;
        // a background of 1 or more would outvote the full layer
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(SyntheticError::InvalidSpec(format!(
                "background fraction range must satisfy 0 <= lo <= hi < 1, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }

    /// True when both classes draw `rho` from the same distribution.
    pub fn classes_indistinguishable(&self) -> bool {
        self.rho_id == self.rho_ood
    }
}

/// One exported query. The full contribution vectors are regenerated from
/// these fields and never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub query_id: String,
    pub rho: f64,
    pub layer_widths: BTreeMap<LayerId, usize>,
    #[serde(rename = "B")]
    pub background: f64,
    pub seed: u64,
}

impl CorpusEntry {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |why: String| SyntheticError::Malformed(format!("{}: {why}", self.query_id));
        if self.query_id.is_empty() {
            return Err(SyntheticError::Malformed("empty query_id".into()));
        }
        if !(self.rho >= RHO_MIN && self.rho <= 1.0) {
            return Err(bad(format!("rho {} outside [{RHO_MIN}, 1]", self.rho)));
        }
        if !(0.0..1.0).contains(&self.background) {
            return Err(bad(format!("B {} outside [0, 1)", self.background)));
        }
        if self.layer_widths.is_empty() || self.layer_widths.values().any(|&w| w == 0) {
            return Err(bad("layer widths must be positive".into()));
        }
        if self.layer_widths.values().any(|&w| w > MAX_WIDTH) {
            return Err(bad(format!("layer width above {MAX_WIDTH}")));
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("corpus entry serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self, SyntheticError> {
        let entry: Self =
            serde_json::from_str(line).map_err(|e| SyntheticError::Malformed(e.to_string()))?;
        entry.validate()?;
        Ok(entry)
    }

    pub fn query(&self) -> Query {
        Query::new(&self.query_id, &self.query_id)
    }
}

/// Upper bound on accepted layer widths when reading corpora.
pub const MAX_WIDTH: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub seed: u64,
    pub in_distribution: Vec<CorpusEntry>,
    pub out_of_distribution: Vec<CorpusEntry>,
}

impl SyntheticCorpus {
    pub fn all_entries(&self) -> impl Iterator<Item = &CorpusEntry> {
        self.in_distribution.iter().chain(&self.out_of_distribution)
    }

    pub fn id_queries(&self) -> Vec<Query> {
        self.in_distribution
            .iter()
            .map(CorpusEntry::query)
            .collect()
    }

    pub fn ood_queries(&self) -> Vec<Query> {
        self.out_of_distribution
            .iter()
            .map(CorpusEntry::query)
            .collect()
    }
}

/// Draws a corpus. Identical specs give identical corpora.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus, SyntheticError> {
    spec.validate()?;
    let make = |class: &str, tag: u64, count: usize, rho: &RhoDistribution| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, tag));
        (0..count)
            .map(|i| {
                let rho = rho.sample(&mut rng);
                let (lo, hi) = spec.background;
                let background = if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                };
                CorpusEntry {
                    query_id: format!("{class}-{i:05}"),
                    rho,
                    layer_widths: spec.layer_widths.clone(),
                    background,
                    seed: mix(mix(spec.seed, tag), i as u64),
                }
            })
            .collect::<Vec<_>>()
    };
    Ok(SyntheticCorpus {
        seed: spec.seed,
        in_distribution: make("id", 1, spec.n_id, &spec.rho_id),
        out_of_distribution: make("ood", 2, spec.n_ood, &spec.rho_ood),
    })
}

/// Shape constants of the voter family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyParams {
    /// Decay rate at `rho = 0`; contributions fall as `exp(-i (1 - rho) c)`.
    pub decay_scale: f64,
    /// Log-normal spread of the per-layer decay rate.
    pub layer_noise: f64,
    /// Log-normal spread of individual neuron contributions.
    pub neuron_noise: f64,
}

impl Default for FamilyParams {
    fn default() -> Self {
        Self {
            decay_scale: 1.0,
            layer_noise: 0.5,
            neuron_noise: 0.2,
        }
    }
}

/// How activations relate to contributions.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum ActivationOrder {
    /// Activation equals contribution; greedy dropout is optimal.
    #[default]
    Contribution,
    /// Activation is contribution times a log-normal perturbation of the
    /// given spread, so the top-activated neurons are not always the most
    /// influential ones.
    Shuffled { noise: f64 },
}

/// One layer of one query, fully materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct VoterLayer {
    /// Contribution of each neuron, indexed by neuron id.
    pub contributions: Vec<u64>,
    /// Activation of each neuron, indexed by neuron id.
    pub activations: Vec<f64>,
    pub background: u64,
}

impl VoterLayer {
    /// Layer whose activations equal its contributions.
    pub fn new(contributions: Vec<u64>, background: u64) -> Self {
        let activations = contributions.iter().map(|&c| c as f64).collect();
        Self {
            contributions,
            activations,
            background,
        }
    }

    pub fn width(&self) -> usize {
        self.contributions.len()
    }

    pub fn total(&self) -> u64 {
        self.contributions.iter().sum()
    }

    /// `"A"` while the surviving mass exceeds the background.
    pub fn vote(&self, dropped: &[NeuronId]) -> Result<Response, ProbeError> {
        let mut seen = vec![false; self.width()];
        let mut removed = 0u64;
        for &id in dropped {
            let slot = seen.get_mut(id as usize).ok_or_else(|| {
                ProbeError::Remote(format!(
                    "neuron {id} out of range for width {}",
                    self.width()
                ))
            })?;
            if !*slot {
                *slot = true;
                removed += self.contributions[id as usize];
            }
        }
        let label = if self.total() - removed > self.background {
            "A"
        } else {
            "B"
        };
        Ok(Response::new(label))
    }

    /// Neuron ids by descending activation; ties broken by id.
    pub fn activation_order(&self) -> Vec<NeuronId> {
        let mut ids: Vec<NeuronId> = (0..self.width() as NeuronId).collect();
        ids.sort_by(|&a, &b| {
            self.activations[b as usize]
                .total_cmp(&self.activations[a as usize])
                .then(a.cmp(&b))
        });
        ids
    }

    /// `min(m, N)` most activated ids in ascending activation order.
    pub fn top_activated(&self, m: usize) -> Vec<NeuronId> {
        let mut top = self.activation_order();
        top.truncate(m);
        top.reverse();
        top
    }

    pub fn oracle_tolerance(&self) -> usize {
        oracle_tolerance(&self.contributions, self.background)
    }
}

/// Smallest `t` such that removing the `t` largest contributions leaves a
/// mass `<= background`; `N + 1` if even removing everything does not.
pub fn oracle_tolerance(contributions: &[u64], background: u64) -> usize {
    let mut sorted = contributions.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let total: u64 = sorted.iter().sum();
    let mut removed = 0u64;
    for t in 0..=sorted.len() {
        if total - removed <= background {
            return t;
        }
        if t < sorted.len() {
            removed += sorted[t];
        }
    }
    sorted.len() + 1
}

/// Subject model backed by a set of corpus entries.
#[derive(Debug, Clone)]
pub struct SyntheticModel {
    entries: BTreeMap<String, CorpusEntry>,
    widths: BTreeMap<LayerId, usize>,
    params: FamilyParams,
    order: ActivationOrder,
}

impl SyntheticModel {
    pub fn new<'a>(
        entries: impl IntoIterator<Item = &'a CorpusEntry>,
    ) -> Result<Self, SyntheticError> {
        Self::with_family(entries, FamilyParams::default(), ActivationOrder::default())
    }

    pub fn with_family<'a>(
        entries: impl IntoIterator<Item = &'a CorpusEntry>,
        params: FamilyParams,
        order: ActivationOrder,
    ) -> Result<Self, SyntheticError> {
        let mut map = BTreeMap::new();
        let mut widths: Option<BTreeMap<LayerId, usize>> = None;
        for entry in entries {
            entry.validate()?;
            match &widths {
                None => widths = Some(entry.layer_widths.clone()),
                Some(w) if *w != entry.layer_widths => {
                    return Err(SyntheticError::InvalidSpec(format!(
                        "{} has layer widths differing from the rest of the corpus",
                        entry.query_id
                    )))
                }
                Some(_) => {}
            }
            if map.insert(entry.query_id.clone(), entry.clone()).is_some() {
                return Err(SyntheticError::InvalidSpec(format!(
                    "duplicate query id {}",
                    entry.query_id
                )));
            }
        }
        let widths =
            widths.ok_or_else(|| SyntheticError::InvalidSpec("no corpus entries".into()))?;
        Ok(Self {
            entries: map,
            widths,
            params,
            order,
        })
    }

    pub fn from_corpus(corpus: &SyntheticCorpus) -> Result<Self, SyntheticError> {
        Self::new(corpus.all_entries())
    }

    pub fn params(&self) -> FamilyParams {
        self.params
    }

    pub fn entry(&self, query: &Query) -> Option<&CorpusEntry> {
        self.entries
            .get(&query.id)
            .or_else(|| self.entries.get(&query.text))
    }

    /// Regenerates the layer instance for a query.
    pub fn layer(&self, query: &Query, layer_id: LayerId) -> Result<VoterLayer, ProbeError> {
        let entry = self
            .entry(query)
            .ok_or_else(|| ProbeError::Remote(format!("unknown query {}", query.id)))?;
        let width = *entry
            .layer_widths
            .get(&layer_id)
            .ok_or_else(|| ProbeError::Remote(format!("no layer {layer_id}")))?;
        build_layer(entry, layer_id, width, &self.params, self.order)
            .map_err(|e| ProbeError::Remote(e.to_string()))
    }

    /// Exact minimal flip count for `(query, layer)`.
    pub fn oracle_tolerance(&self, query: &Query, layer_id: LayerId) -> Result<usize, ProbeError> {
        Ok(self.layer(query, layer_id)?.oracle_tolerance())
    }
}

fn build_layer(
    entry: &CorpusEntry,
    layer_id: LayerId,
    width: usize,
    params: &FamilyParams,
    order: ActivationOrder,
) -> Result<VoterLayer, SyntheticError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(entry.seed, 0x1a7e_0000 + u64::from(layer_id)));
    let layer_z: f64 = rng.sample(StandardNormal);
    let rate = (1.0 - entry.rho) * params.decay_scale * (params.layer_noise * layer_z).exp();
    let mut weights: Vec<f64> = (0..width)
        .map(|i| {
            let z: f64 = rng.sample(StandardNormal);
            (-rate * i as f64 + params.neuron_noise * z).exp()
        })
        .collect();
    weights.sort_unstable_by(|a, b| b.total_cmp(a));
    let sum: f64 = weights.iter().sum();
    let mut sorted: Vec<u64> = weights
        .iter()
        .map(|w| ((w / sum) * MASS_UNITS).round().max(1.0) as u64)
        .collect();
    // rounding can reorder near-equal neighbours
    sorted.sort_unstable_by(|a, b| b.cmp(a));

    let mut ids: Vec<usize> = (0..width).collect();
    ids.shuffle(&mut rng);
    let mut contributions = vec![0u64; width];
    for (rank, &id) in ids.iter().enumerate() {
        contributions[id] = sorted[rank];
    }
    let activations: Vec<f64> = match order {
        ActivationOrder::Contribution => contributions.iter().map(|&c| c as f64).collect(),
        ActivationOrder::Shuffled { noise } => contributions
            .iter()
            .map(|&c| {
                let z: f64 = rng.sample(StandardNormal);
                c as f64 * (noise * z).exp()
            })
            .collect(),
    };
    let total: u64 = contributions.iter().sum();
    let background = (entry.background * total as f64).floor() as u64;
    if background >= total {
        return Err(SyntheticError::Degenerate {
            query_id: entry.query_id.clone(),
            layer_id,
            background,
            total,
        });
    }
    Ok(VoterLayer {
        contributions,
        activations,
        background,
    })
}

impl SubjectModel for SyntheticModel {
    fn answer(&self, query: &Query) -> Result<Response, ProbeError> {
        self.entry(query)
            .ok_or_else(|| ProbeError::Remote(format!("unknown query {}", query.id)))?;
        // the background never reaches the layer total, so every layer votes A
        Ok(Response::new("A"))
    }

    fn top_activated(
        &self,
        query: &Query,
        layer: LayerId,
        m: usize,
    ) -> Result<Vec<NeuronId>, ProbeError> {
        Ok(self.layer(query, layer)?.top_activated(m))
    }

    fn answer_with_dropout(
        &self,
        query: &Query,
        layer: LayerId,
        dropped: &[NeuronId],
    ) -> Result<Response, ProbeError> {
        self.layer(query, layer)?.vote(dropped)
    }

    fn layer_width(&self, layer: LayerId) -> Result<usize, ProbeError> {
        self.widths
            .get(&layer)
            .copied()
            .ok_or_else(|| ProbeError::Remote(format!("no layer {layer}")))
    }
}

/// SplitMix64 finalizer over two words; derives independent stream seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
