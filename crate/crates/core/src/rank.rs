//! Destination ranking in four phases: score production, normalization,
//! prioritization and constraint satisfaction.
//!
//! Two score components are produced per destination. *Proximity* is the
//! time-discounted mean closeness of recent samples to the SLO threshold.
//! *Staleness* is the number of rounds since the destination was last
//! measured, with never-measured destinations pinned to the top after
//! normalization so every destination keeps being probed.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DestinationId, MeasurementHistory, MeasurementSample, Round, SessionBudget, Slo};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RankError {
    #[error("discount must lie in (0, 1], got {0}")]
    Discount(f64),
    #[error("score weights must be finite and non-negative")]
    NegativeWeight,
    #[error("proximity and staleness weights cannot both be zero")]
    ZeroWeights,
    #[error("spread penalty must be finite and non-negative, got {0}")]
    SpreadPenalty(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankParams {
    /// Per-round geometric discount applied to past samples.
    pub discount: f64,
    pub proximity_weight: f64,
    pub staleness_weight: f64,
    /// Weight of the closeness standard deviation subtracted from the
    /// proximity score. Zero gives the plain discounted mean.
    pub spread_penalty: f64,
}

impl Default for RankParams {
    fn default() -> Self {
        Self {
            discount: 0.95,
            proximity_weight: 1.0,
            staleness_weight: 1.0,
            spread_penalty: 0.0,
        }
    }
}

impl RankParams {
    pub fn validate(&self) -> Result<(), RankError> {
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(RankError::Discount(self.discount));
        }
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(self.proximity_weight) || !ok(self.staleness_weight) {
            return Err(RankError::NegativeWeight);
        }
        if self.proximity_weight == 0.0 && self.staleness_weight == 0.0 {
            return Err(RankError::ZeroWeights);
        }
        if !ok(self.spread_penalty) {
            return Err(RankError::SpreadPenalty(self.spread_penalty));
        }
        Ok(())
    }
}

/// Which held samples reset a destination's staleness clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StalenessBasis {
    LocalOnly,
    LocalOrVirtual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoredDestination {
    pub destination: DestinationId,
    pub proximity_raw: f64,
    pub staleness_raw: f64,
    pub proximity_norm: f64,
    pub staleness_norm: f64,
    pub total: f64,
}

/// Destinations selected for real measurement sessions in one round.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize)]
#[serde(transparent)]
pub struct ActivationSet(BTreeSet<DestinationId>);

impl ActivationSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, d: DestinationId) -> bool {
        self.0.insert(d)
    }

    pub fn contains(&self, d: DestinationId) -> bool {
        self.0.contains(&d)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = DestinationId> + '_ {
        self.0.iter().copied()
    }
}

impl FromIterator<DestinationId> for ActivationSet {
    fn from_iter<I: IntoIterator<Item = DestinationId>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Closeness of one sample to the threshold, in [0, 1]. Samples at or past
/// the threshold on the violating side score 1.
pub fn closeness(value: f64, slo: &Slo) -> f64 {
    if slo.at_or_past(value) {
        return 1.0;
    }
    let thr = slo.threshold();
    1.0 - ((thr - value).abs() / thr.abs()).clamp(0.0, 1.0)
}

/// Discount-weighted mean closeness over `samples`, minus the spread
/// penalty times the weighted standard deviation. Empty input scores 0.
pub fn proximity_score<'a, I>(samples: I, slo: &Slo, current_round: Round, params: &RankParams) -> f64
where
    I: IntoIterator<Item = &'a MeasurementSample>,
{
    let mut wsum = 0.0;
    let mut acc = 0.0;
    let mut points = Vec::new();
    for s in samples {
        let age = current_round.saturating_sub(s.round);
        let w = params.discount.powi(age.min(i32::MAX as u64) as i32);
        let c = closeness(s.value, slo);
        wsum += w;
        acc += w * c;
        points.push((w, c));
    }
    if wsum == 0.0 {
        return 0.0;
    }
    let mean = acc / wsum;
    if params.spread_penalty == 0.0 {
        return mean;
    }
    let var = points.iter().map(|(w, c)| w * (c - mean).powi(2)).sum::<f64>() / wsum;
    (mean - params.spread_penalty * var.sqrt()).max(0.0)
}

/// Rounds elapsed since `last`; never-measured destinations are infinitely stale.
pub fn staleness_score(last: Option<Round>, current_round: Round) -> f64 {
    match last {
        Some(r) => current_round.saturating_sub(r) as f64,
        None => f64::INFINITY,
    }
}

/// Relative width below which a finite range counts as degenerate. Equal
/// closeness values averaged over different sample counts differ in the last
/// bits, and min-max scaling would blow that up to the full unit interval.
pub const DEGENERATE_RANGE: f64 = 1e-9;

/// Min-max normalization. `+inf` maps to 1 and is left out of the finite
/// range; a degenerate finite range maps to 0.5.
pub fn normalize(raw: &[f64]) -> Vec<f64> {
    let finite = raw.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    raw.iter()
        .map(|&v| {
            if v == f64::INFINITY {
                1.0
            } else if hi - lo > DEGENERATE_RANGE * hi.abs().max(lo.abs()).max(1.0) {
                (v - lo) / (hi - lo)
            } else {
                0.5
            }
        })
        .collect()
}

/// Normalization phase: turns raw component pairs into scored destinations.
pub fn score(raw: &[(DestinationId, f64, f64)], params: &RankParams) -> Vec<ScoredDestination> {
    let prox: Vec<f64> = raw.iter().map(|r| r.1).collect();
    let stale: Vec<f64> = raw.iter().map(|r| r.2).collect();
    let prox_n = normalize(&prox);
    let stale_n = normalize(&stale);
    raw.iter()
        .enumerate()
        .map(|(i, &(destination, proximity_raw, staleness_raw))| ScoredDestination {
            destination,
            proximity_raw,
            staleness_raw,
            proximity_norm: prox_n[i],
            staleness_norm: stale_n[i],
            total: params.proximity_weight * prox_n[i] + params.staleness_weight * stale_n[i],
        })
        .collect()
}

/// Prioritization phase: never-measured destinations first, then total
/// descending, ties by ascending id.
pub fn prioritize(scored: &mut [ScoredDestination]) {
    let never = |s: &ScoredDestination| s.staleness_raw == f64::INFINITY;
    scored.sort_by(|a, b| {
        never(b)
            .cmp(&never(a))
            .then_with(|| b.total.total_cmp(&a.total))
            .then_with(|| a.destination.cmp(&b.destination))
    });
}

/// Constraint satisfaction phase. Pinned destinations (contracted to
/// virtual-session consumers) take slots first, then the rank order fills
/// what is left of `local_max`.
pub fn satisfy_constraints(
    order: &[ScoredDestination],
    pinned: &BTreeSet<DestinationId>,
    local_max: usize,
) -> ActivationSet {
    let mut set = ActivationSet::new();
    for s in order.iter().filter(|s| pinned.contains(&s.destination)) {
        if set.len() == local_max {
            return set;
        }
        set.insert(s.destination);
    }
    for s in order {
        if set.len() == local_max {
            break;
        }
        set.insert(s.destination);
    }
    set
}

/// Result of one rank pass: prioritized scores and the activation cut.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub order: Vec<ScoredDestination>,
    pub activation: ActivationSet,
}

impl Ranking {
    /// Destinations in rank order that did not make the activation cut.
    pub fn excluded(&self) -> impl Iterator<Item = DestinationId> + '_ {
        self.order
            .iter()
            .map(|s| s.destination)
            .filter(|d| !self.activation.contains(*d))
    }
}

/// Ranks from precomputed raw components.
pub fn rank_raw(
    raw: &[(DestinationId, f64, f64)],
    params: &RankParams,
    pinned: &BTreeSet<DestinationId>,
    local_max: usize,
) -> Ranking {
    let mut order = score(raw, params);
    prioritize(&mut order);
    let activation = satisfy_constraints(&order, pinned, local_max);
    Ranking { order, activation }
}

/// What a device knows when ranking its destinations.
#[derive(Debug, Clone, Copy)]
pub struct DeviceView<'a> {
    pub destinations: &'a [DestinationId],
    /// Samples feeding the proximity score.
    pub history: &'a MeasurementHistory,
    /// Samples feeding the staleness score.
    pub staleness_history: &'a MeasurementHistory,
    pub staleness_basis: StalenessBasis,
    pub pinned: &'a BTreeSet<DestinationId>,
}

/// Full four-phase rank for one device and round.
pub fn destination_rank(
    view: &DeviceView<'_>,
    slo: &Slo,
    current_round: Round,
    params: &RankParams,
    budget: &SessionBudget,
) -> Ranking {
    let raw: Vec<_> = view
        .destinations
        .iter()
        .map(|&d| {
            let prox = proximity_score(view.history.samples(d), slo, current_round, params);
            let last = match view.staleness_basis {
                StalenessBasis::LocalOnly => view.staleness_history.last_measured(d),
                StalenessBasis::LocalOrVirtual => view.staleness_history.last_covered(d),
            };
            (d, prox, staleness_score(last, current_round))
        })
        .collect();
    rank_raw(&raw, params, view.pinned, budget.local_max)
}
