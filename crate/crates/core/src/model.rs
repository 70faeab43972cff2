//! Core domain types: identifiers, SLOs, measurement samples and the bounded
//! per-destination measurement history.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default sliding-window length, in samples.
pub const DEFAULT_WINDOW: usize = 20;

/// Simulation time unit. One round is one strategy iteration.
pub type Round = u64;

/// Identifier of a monitoring device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub u32);

/// Identifier of a measurement destination. Every destination is also
/// addressable as a device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DestinationId(pub u32);

impl DestinationId {
    pub fn as_device(self) -> DeviceId {
        DeviceId(self.0)
    }
}

impl From<DeviceId> for DestinationId {
    fn from(d: DeviceId) -> Self {
        DestinationId(d.0)
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for DestinationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("SLO metric id must not be empty")]
    EmptyMetricId,
    #[error("SLO threshold must be finite and non-zero, got {0}")]
    BadThreshold(f64),
    #[error("sample value must be finite, got {0}")]
    NonFiniteValue(f64),
    #[error("sample for destination {destination} at round {round} is older than stored round {newest}")]
    OutOfOrder {
        destination: DestinationId,
        round: Round,
        newest: Round,
    },
    #[error("window length must be at least 1")]
    ZeroWindow,
    #[error("local session budget must be at least 1")]
    ZeroLocalBudget,
}

/// Which side of the threshold counts as a violation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Values strictly greater than the threshold violate (delay, loss).
    #[serde(alias = "above")]
    ViolatedAbove,
    /// Values strictly lower than the threshold violate (throughput).
    #[serde(alias = "below")]
    ViolatedBelow,
}

/// A service level objective on one metric.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Slo {
    metric_id: String,
    threshold: f64,
    direction: Direction,
}

impl Slo {
    /// The threshold must be finite and non-zero; closeness is measured
    /// relative to it.
    pub fn new(metric_id: impl Into<String>, threshold: f64, direction: Direction) -> Result<Self, ModelError> {
        let metric_id = metric_id.into();
        if metric_id.is_empty() {
            return Err(ModelError::EmptyMetricId);
        }
        if !threshold.is_finite() || threshold == 0.0 {
            return Err(ModelError::BadThreshold(threshold));
        }
        Ok(Self {
            metric_id,
            threshold,
            direction,
        })
    }

    pub fn metric_id(&self) -> &str {
        &self.metric_id
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// Strict breach test: a value exactly at the threshold is compliant.
    pub fn is_breached(&self, value: f64) -> bool {
        match self.direction {
            Direction::ViolatedAbove => value > self.threshold,
            Direction::ViolatedBelow => value < self.threshold,
        }
    }

    /// True when `value` sits at or beyond the threshold on the violating side.
    pub fn at_or_past(&self, value: f64) -> bool {
        match self.direction {
            Direction::ViolatedAbove => value >= self.threshold,
            Direction::ViolatedBelow => value <= self.threshold,
        }
    }
}

/// Where a sample held by a device came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    /// Produced by one of the device's own sessions.
    Local,
    /// Shared by a correlated peer for information only.
    Remote(DeviceId),
    /// Delivered by a producer under a virtual session contract.
    Virtual(DeviceId),
}

/// One service-level observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSample {
    pub source: DeviceId,
    pub destination: DestinationId,
    pub round: Round,
    pub value: f64,
    pub origin: Origin,
}

impl MeasurementSample {
    pub fn local(source: DeviceId, destination: DestinationId, round: Round, value: f64) -> Self {
        Self {
            source,
            destination,
            round,
            value,
            origin: Origin::Local,
        }
    }

    pub fn with_origin(mut self, origin: Origin) -> Self {
        self.origin = origin;
        self
    }
}

/// Bounded per-destination sample windows.
///
/// Tracks, per destination, the round of the newest `Local` sample
/// (`last_measured`) and the newest `Local` or `Virtual` sample
/// (`last_covered`).
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementHistory {
    window: usize,
    samples: BTreeMap<DestinationId, VecDeque<MeasurementSample>>,
    last_measured: BTreeMap<DestinationId, Round>,
    last_covered: BTreeMap<DestinationId, Round>,
}

impl MeasurementHistory {
    pub fn new(window: usize) -> Result<Self, ModelError> {
        if window == 0 {
            return Err(ModelError::ZeroWindow);
        }
        Ok(Self {
            window,
            samples: BTreeMap::new(),
            last_measured: BTreeMap::new(),
            last_covered: BTreeMap::new(),
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Appends a sample, evicting the oldest one for that destination when
    /// the window is full.
    pub fn append(&mut self, s: MeasurementSample) -> Result<(), ModelError> {
        if !s.value.is_finite() {
            return Err(ModelError::NonFiniteValue(s.value));
        }
        let window = self.window;
        let queue = self.samples.entry(s.destination).or_default();
        if let Some(newest) = queue.back() {
            if s.round < newest.round {
                return Err(ModelError::OutOfOrder {
                    destination: s.destination,
                    round: s.round,
                    newest: newest.round,
                });
            }
        }
        if queue.len() == window {
            queue.pop_front();
        }
        queue.push_back(s);
        match s.origin {
            Origin::Local => {
                self.last_measured.insert(s.destination, s.round);
                self.last_covered.insert(s.destination, s.round);
            }
            Origin::Virtual(_) => {
                self.last_covered.insert(s.destination, s.round);
            }
            Origin::Remote(_) => {}
        }
        Ok(())
    }

    /// Samples for `destination`, oldest first.
    pub fn samples(
        &self,
        destination: DestinationId,
    ) -> impl DoubleEndedIterator<Item = &MeasurementSample> + ExactSizeIterator {
        self.samples.get(&destination).map(|q| q.iter()).unwrap_or_default()
    }

    pub fn len(&self, destination: DestinationId) -> usize {
        self.samples.get(&destination).map_or(0, VecDeque::len)
    }

    pub fn is_empty(&self) -> bool {
        self.samples.values().all(VecDeque::is_empty)
    }

    pub fn destinations(&self) -> impl Iterator<Item = DestinationId> + '_ {
        self.samples.keys().copied()
    }

    pub fn last_measured(&self, destination: DestinationId) -> Option<Round> {
        self.last_measured.get(&destination).copied()
    }

    pub fn last_covered(&self, destination: DestinationId) -> Option<Round> {
        self.last_covered.get(&destination).copied()
    }
}

/// Per-device caps on concurrently held sessions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionBudget {
    pub local_max: usize,
    pub virtual_max: usize,
}

impl SessionBudget {
    pub fn new(local_max: usize, virtual_max: usize) -> Result<Self, ModelError> {
        if local_max == 0 {
            return Err(ModelError::ZeroLocalBudget);
        }
        Ok(Self { local_max, virtual_max })
    }

    /// Network-wide bound over devices that exchange management information.
    /// Reported, not enforced.
    pub fn global_bound(budgets: impl IntoIterator<Item = SessionBudget>) -> usize {
        budgets.into_iter().map(|b| b.local_max).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(d: u32, round: Round, v: f64) -> MeasurementSample {
        MeasurementSample::local(DeviceId(0), DestinationId(d), round, v)
    }

    #[test]
    fn first_sample_sets_last_measured() {
        let mut h = MeasurementHistory::new(DEFAULT_WINDOW).unwrap();
        h.append(s(3, 0, 10.0)).unwrap();
        assert_eq!(h.len(DestinationId(3)), 1);
        assert_eq!(h.last_measured(DestinationId(3)), Some(0));
    }

    #[test]
    fn full_window_evicts_oldest() {
        let mut h = MeasurementHistory::new(2).unwrap();
        for r in 1..=3 {
            h.append(s(1, r, 1.0)).unwrap();
        }
        let rounds: Vec<_> = h.samples(DestinationId(1)).map(|x| x.round).collect();
        assert_eq!(rounds, vec![2, 3]);
    }

    #[test]
    fn remote_sample_leaves_last_measured() {
        let mut h = MeasurementHistory::new(4).unwrap();
        h.append(s(1, 2, 1.0)).unwrap();
        h.append(s(1, 5, 1.0).with_origin(Origin::Remote(DeviceId(7)))).unwrap();
        assert_eq!(h.last_measured(DestinationId(1)), Some(2));
        assert_eq!(h.last_covered(DestinationId(1)), Some(2));
        h.append(s(1, 6, 1.0).with_origin(Origin::Virtual(DeviceId(7))))
            .unwrap();
        assert_eq!(h.last_measured(DestinationId(1)), Some(2));
        assert_eq!(h.last_covered(DestinationId(1)), Some(6));
    }

    #[test]
    fn rejects_non_finite_and_stale() {
        let mut h = MeasurementHistory::new(4).unwrap();
        assert!(matches!(
            h.append(s(1, 0, f64::NAN)),
            Err(ModelError::NonFiniteValue(_))
        ));
        h.append(s(1, 5, 1.0)).unwrap();
        h.append(s(1, 5, 2.0)).unwrap();
        assert!(matches!(
            h.append(s(1, 4, 1.0)),
            Err(ModelError::OutOfOrder { newest: 5, .. })
        ));
        // other destinations are independent
        h.append(s(2, 0, 1.0)).unwrap();
    }

    #[test]
    fn slo_validation_and_breach() {
        assert!(Slo::new("", 1.0, Direction::ViolatedAbove).is_err());
        assert!(Slo::new("owd", 0.0, Direction::ViolatedAbove).is_err());
        assert!(Slo::new("owd", f64::INFINITY, Direction::ViolatedAbove).is_err());
        let above = Slo::new("owd", 100.0, Direction::ViolatedAbove).unwrap();
        assert!(above.is_breached(101.0));
        assert!(!above.is_breached(100.0));
        let below = Slo::new("tput", 100.0, Direction::ViolatedBelow).unwrap();
        assert!(below.is_breached(99.0));
        assert!(!below.is_breached(100.0));
    }

    #[test]
    fn zero_local_budget_rejected() {
        assert_eq!(SessionBudget::new(0, 3), Err(ModelError::ZeroLocalBudget));
        let b = SessionBudget::new(2, 0).unwrap();
        assert_eq!(SessionBudget::global_bound([b, b, b]), 6);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn window_bound_and_last_measured(
            window in 1usize..6,
            ops in proptest::collection::vec((0u32..4, 0u64..3, 0u8..3), 0..60),
        ) {
            let mut h = MeasurementHistory::new(window).unwrap();
            let mut round = [0u64; 4];
            let mut had_local = [false; 4];
            for (d, step, kind) in ops {
                round[d as usize] += step;
                let origin = match kind {
                    0 => Origin::Local,
                    1 => Origin::Remote(DeviceId(9)),
                    _ => Origin::Virtual(DeviceId(9)),
                };
                if origin == Origin::Local {
                    had_local[d as usize] = true;
                }
                h.append(MeasurementSample::local(DeviceId(0), DestinationId(d), round[d as usize], 1.0).with_origin(origin)).unwrap();
                prop_assert!(h.len(DestinationId(d)) <= window);
            }
            for d in 0..4u32 {
                prop_assert_eq!(h.last_measured(DestinationId(d)).is_some(), had_local[d as usize]);
            }
        }

        #[test]
        fn destinations_are_independent(
            a in proptest::collection::vec(0u64..50, 0..10),
            b in proptest::collection::vec(0u64..50, 0..10),
        ) {
            let mut a = a; a.sort();
            let mut b = b; b.sort();
            let mk = |d: u32, r: u64| MeasurementSample::local(DeviceId(0), DestinationId(d), r, r as f64);
            let mut h1 = MeasurementHistory::new(5).unwrap();
            let mut h2 = MeasurementHistory::new(5).unwrap();
            for &r in &a { h1.append(mk(1, r)).unwrap(); }
            for &r in &b { h1.append(mk(2, r)).unwrap(); }
            for &r in &b { h2.append(mk(2, r)).unwrap(); }
            for &r in &a { h2.append(mk(1, r)).unwrap(); }
            for d in [1, 2] {
                let x: Vec<_> = h1.samples(DestinationId(d)).collect();
                let y: Vec<_> = h2.samples(DestinationId(d)).collect();
                prop_assert_eq!(x, y);
            }
        }
    }
}
