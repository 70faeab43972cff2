//! Correlated-peer evaluation and overlay maintenance.
//!
//! A device compares the measurement series it holds for a destination with
//! the series a candidate reported for the same destination. Series are
//! paired by round, correlated, and aggregated across shared destinations
//! into one score per candidate. Candidates above the lower bound are kept,
//! up to the peer limit.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DeviceId, MeasurementHistory, MeasurementSample, Round};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CorrelationError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 paired values, got {0}")]
    TooShort(usize),
    #[error("a constant series has undefined correlation")]
    Constant,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OverlayError {
    #[error("min_correlation must lie in (0, 1], got {0}")]
    MinCorrelation(f64),
    #[error("max_peers must be at least 1")]
    MaxPeers,
    #[error("min_shared_samples must be at least 3, got {0}")]
    MinSharedSamples(usize),
    #[error("topology_period must be at least 1")]
    TopologyPeriod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMethod {
    Pearson,
    Spearman,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlayParams {
    /// Lower bound on a candidate's score to become a peer.
    pub min_correlation: f64,
    /// Upper bound on the number of peers.
    pub max_peers: usize,
    /// Minimum paired samples on a destination for it to count.
    pub min_shared_samples: usize,
    pub method: CorrelationMethod,
    /// Rounds between peer-topology updates.
    pub topology_period: u64,
}

impl Default for OverlayParams {
    fn default() -> Self {
        Self {
            min_correlation: 0.7,
            max_peers: 4,
            min_shared_samples: 5,
            method: CorrelationMethod::Pearson,
            topology_period: 10,
        }
    }
}

impl OverlayParams {
    pub fn validate(&self) -> Result<(), OverlayError> {
        if !(self.min_correlation > 0.0 && self.min_correlation <= 1.0) {
            return Err(OverlayError::MinCorrelation(self.min_correlation));
        }
        if self.max_peers == 0 {
            return Err(OverlayError::MaxPeers);
        }
        if self.min_shared_samples < 3 {
            return Err(OverlayError::MinSharedSamples(self.min_shared_samples));
        }
        if self.topology_period == 0 {
            return Err(OverlayError::TopologyPeriod);
        }
        Ok(())
    }
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<(), CorrelationError> {
    if xs.len() != ys.len() {
        return Err(CorrelationError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(CorrelationError::TooShort(xs.len()));
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(xs) || constant(ys) {
        return Err(CorrelationError::Constant);
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample Pearson product-moment correlation, clamped to [-1, 1].
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, CorrelationError> {
    check_pair(xs, ys)?;
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CorrelationError::Constant);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson over average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, CorrelationError> {
    check_pair(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

pub fn correlate(method: CorrelationMethod, xs: &[f64], ys: &[f64]) -> Result<f64, CorrelationError> {
    match method {
        CorrelationMethod::Pearson => pearson(xs, ys),
        CorrelationMethod::Spearman => spearman(xs, ys),
    }
}

/// Values of two series observed in the same rounds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairedSeries {
    pub rounds: Vec<Round>,
    pub local: Vec<f64>,
    pub remote: Vec<f64>,
}

impl PairedSeries {
    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("only {found} paired samples, need {needed}")]
pub struct InsufficientData {
    pub found: usize,
    pub needed: usize,
}

/// Pairs two round-ordered sample sequences on equal rounds. When a series
/// holds several samples for a round, the last one is used.
pub fn align_series<'a, L, R>(local: L, remote: R, min_pairs: usize) -> Result<PairedSeries, InsufficientData>
where
    L: IntoIterator<Item = &'a MeasurementSample>,
    R: IntoIterator<Item = &'a MeasurementSample>,
{
    let by_round = |it: &mut dyn Iterator<Item = &'a MeasurementSample>| {
        it.map(|s| (s.round, s.value)).collect::<BTreeMap<_, _>>()
    };
    let local = by_round(&mut local.into_iter());
    let remote = by_round(&mut remote.into_iter());
    let mut out = PairedSeries::default();
    for (r, lv) in &local {
        if let Some(rv) = remote.get(r) {
            out.rounds.push(*r);
            out.local.push(*lv);
            out.remote.push(*rv);
        }
    }
    if out.len() < min_pairs {
        return Err(InsufficientData {
            found: out.len(),
            needed: min_pairs,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CandidateScore {
    pub peer: DeviceId,
    pub correlation: f64,
    pub shared_destinations: usize,
    pub pairs: usize,
}

/// Scores a candidate against the local series. Each destination with enough
/// paired, non-constant samples contributes its correlation weighted by its
/// pair count. Returns `None` when no destination qualifies.
pub fn evaluate_candidate(
    peer: DeviceId,
    local: &MeasurementHistory,
    reports: &MeasurementHistory,
    params: &OverlayParams,
) -> Option<CandidateScore> {
    let mut weighted = 0.0;
    let mut pairs = 0usize;
    let mut shared = 0usize;
    for d in reports.destinations() {
        let Ok(p) = align_series(local.samples(d), reports.samples(d), params.min_shared_samples) else {
            continue;
        };
        let Ok(r) = correlate(params.method, &p.local, &p.remote) else {
            continue;
        };
        weighted += r * p.len() as f64;
        pairs += p.len();
        shared += 1;
    }
    (pairs > 0).then(|| CandidateScore {
        peer,
        correlation: weighted / pairs as f64,
        shared_destinations: shared,
        pairs,
    })
}

/// A correlated-peer relationship.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PeerLink {
    pub peer: DeviceId,
    pub correlation: f64,
    pub shared_destinations: usize,
    pub established_round: Round,
}

/// Thresholds, orders (score descending, id ascending) and truncates.
pub fn select_peers(scored: &[CandidateScore], params: &OverlayParams, round: Round) -> Vec<PeerLink> {
    let mut keep: Vec<_> = scored
        .iter()
        .filter(|c| c.correlation >= params.min_correlation)
        .collect();
    keep.sort_by(|a, b| b.correlation.total_cmp(&a.correlation).then(a.peer.cmp(&b.peer)));
    keep.truncate(params.max_peers);
    keep.into_iter()
        .map(|c| PeerLink {
            peer: c.peer,
            correlation: c.correlation,
            shared_destinations: c.shared_destinations,
            established_round: round,
        })
        .collect()
}

/// A device's view of the overlay: seed neighbors, devices learned through
/// advertisements or incoming reports, and the current peer links.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerTable {
    owner: DeviceId,
    neighbors: BTreeSet<DeviceId>,
    discovered: BTreeSet<DeviceId>,
    peers: Vec<PeerLink>,
}

impl PeerTable {
    pub fn new(owner: DeviceId, neighbors: impl IntoIterator<Item = DeviceId>) -> Self {
        Self {
            owner,
            neighbors: neighbors.into_iter().filter(|&n| n != owner).collect(),
            discovered: BTreeSet::new(),
            peers: Vec::new(),
        }
    }

    /// Records devices named in a peer advertisement (peers of peers).
    pub fn learn(&mut self, ids: impl IntoIterator<Item = DeviceId>) {
        let owner = self.owner;
        self.discovered.extend(ids.into_iter().filter(|&i| i != owner));
    }

    /// Seed neighbors, plus everything learned so far, plus current peers
    /// kept for re-evaluation. Never contains the owner.
    pub fn bootstrap_candidates(&self) -> BTreeSet<DeviceId> {
        let mut c = self.neighbors.clone();
        c.extend(self.discovered.iter().copied());
        c.extend(self.peers.iter().map(|p| p.peer));
        c
    }

    pub fn peers(&self) -> &[PeerLink] {
        &self.peers
    }

    pub fn is_peer(&self, id: DeviceId) -> bool {
        self.peers.iter().any(|p| p.peer == id)
    }

    /// Replaces the peer set, returning the peers that were dropped.
    pub fn set_peers(&mut self, peers: Vec<PeerLink>) -> Vec<DeviceId> {
        let lost = self
            .peers
            .iter()
            .map(|p| p.peer)
            .filter(|id| !peers.iter().any(|n| n.peer == *id))
            .collect();
        // keep the original establishment round of links that survive
        let merged = peers
            .into_iter()
            .map(|mut n| {
                if let Some(old) = self.peers.iter().find(|o| o.peer == n.peer) {
                    n.established_round = old.established_round;
                }
                n
            })
            .collect();
        self.peers = merged;
        lost
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (3usize..40).prop_flat_map(|n| {
            (
                proptest::collection::vec(-1e3f64..1e3, n),
                proptest::collection::vec(-1e3f64..1e3, n),
            )
        })
    }

    proptest! {
        #[test]
        fn bounded_and_symmetric((xs, ys) in pair()) {
            for m in [CorrelationMethod::Pearson, CorrelationMethod::Spearman] {
                if let Ok(r) = correlate(m, &xs, &ys) {
                    prop_assert!((-1.0..=1.0).contains(&r));
                    prop_assert_eq!(Ok(r), correlate(m, &ys, &xs));
                }
            }
        }

        #[test]
        fn spearman_monotone_invariance((xs, ys) in pair(), a in 0.1f64..5.0, b in -10.0f64..10.0) {
            let tx: Vec<f64> = xs.iter().map(|x| (a * x + b).powi(3)).collect();
            prop_assert_eq!(average_ranks(&xs), average_ranks(&tx));
            prop_assert_eq!(spearman(&xs, &ys), spearman(&tx, &ys));
        }

        #[test]
        fn selection_respects_bounds(
            scores in proptest::collection::btree_map(0u32..50, -1.0f64..1.0, 0..20),
            min in 0.05f64..1.0,
            max in 1usize..6,
        ) {
            let p = OverlayParams { min_correlation: min, max_peers: max, ..Default::default() };
            let c: Vec<_> = scores.iter().map(|(&id, &c)| CandidateScore { peer: DeviceId(id), correlation: c, shared_destinations: 1, pairs: 5 }).collect();
            let sel = select_peers(&c, &p, 0);
            prop_assert!(sel.len() <= max);
            prop_assert!(sel.iter().all(|l| l.correlation >= min));
        }
    }
}
