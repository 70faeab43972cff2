//! Scenario builder and the reference scenarios used by the acceptance
//! suite, the benches and `scenarios/*.toml`.

use std::collections::BTreeMap;

use crate::correlation::OverlayParams;
use crate::model::{DestinationId, DeviceId, Direction, SessionBudget, Slo, DEFAULT_WINDOW};
use crate::rank::RankParams;
use crate::simnet::{DeviceSpec, GroupModel, PathModel, Scenario, ScenarioError};

/// SLO threshold used by every preset (one-way delay, ms).
pub const THRESHOLD_MS: f64 = 100.0;
/// Normal-regime path latency used by the presets.
pub const BASE_MS: f64 = 50.0;
/// Violation offset used by the presets.
pub const DELTA_MS: f64 = 100.0;

#[derive(Debug, Clone)]
pub struct ScenarioBuilder {
    rounds: u64,
    slo: Slo,
    rank: RankParams,
    overlay: OverlayParams,
    budget: SessionBudget,
    window: usize,
    message_drop: f64,
    groups: Vec<GroupModel>,
    devices: Vec<DeviceSpec>,
    paths: BTreeMap<(DeviceId, DestinationId), PathModel>,
}

impl ScenarioBuilder {
    pub fn new(rounds: u64) -> Self {
        Self {
            rounds,
            slo: Slo::new("one_way_delay_ms", THRESHOLD_MS, Direction::ViolatedAbove).expect("valid slo"),
            rank: RankParams::default(),
            overlay: OverlayParams::default(),
            budget: SessionBudget {
                local_max: 1,
                virtual_max: 0,
            },
            window: DEFAULT_WINDOW,
            message_drop: 0.0,
            groups: Vec::new(),
            devices: Vec::new(),
            paths: BTreeMap::new(),
        }
    }

    pub fn budget(mut self, local_max: usize, virtual_max: usize) -> Self {
        self.budget = SessionBudget { local_max, virtual_max };
        self
    }

    pub fn rank(mut self, rank: RankParams) -> Self {
        self.rank = rank;
        self
    }

    pub fn overlay(mut self, overlay: OverlayParams) -> Self {
        self.overlay = overlay;
        self
    }

    pub fn window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    pub fn message_drop(mut self, p: f64) -> Self {
        self.message_drop = p;
        self
    }

    /// Adds a regime group and returns its index.
    pub fn group(&mut self, name: &str, p_enter: f64, p_exit: f64, start_violating: bool, divergence: f64) -> usize {
        self.groups.push(GroupModel {
            name: name.into(),
            p_enter,
            p_exit,
            delta: DELTA_MS,
            start_violating,
            divergence,
        });
        self.groups.len() - 1
    }

    /// Adds a device whose paths all belong to `group`.
    pub fn device(&mut self, id: u32, destinations: &[u32], neighbors: &[u32], group: usize, noise_sd: f64) {
        let id = DeviceId(id);
        for &d in destinations {
            self.paths.insert(
                (id, DestinationId(d)),
                PathModel {
                    base_latency: BASE_MS,
                    group,
                    noise_sd,
                },
            );
        }
        self.devices.push(DeviceSpec {
            id,
            destinations: destinations.iter().map(|&d| DestinationId(d)).collect(),
            neighbors: neighbors.iter().map(|&n| DeviceId(n)).collect(),
        });
    }

    /// Reassigns one path to another group.
    pub fn path_group(&mut self, device: u32, destination: u32, group: usize) {
        if let Some(p) = self.paths.get_mut(&(DeviceId(device), DestinationId(destination))) {
            p.group = group;
        }
    }

    /// Overrides the normal-regime latency of one path.
    pub fn path_base(&mut self, device: u32, destination: u32, base_latency: f64) {
        if let Some(p) = self.paths.get_mut(&(DeviceId(device), DestinationId(destination))) {
            p.base_latency = base_latency;
        }
    }

    pub fn build(self) -> Result<Scenario, ScenarioError> {
        let s = Scenario {
            rounds: self.rounds,
            slo: self.slo,
            rank: self.rank,
            overlay: self.overlay,
            budget: self.budget,
            window: self.window,
            message_drop: self.message_drop,
            groups: self.groups,
            devices: self.devices,
            paths: self.paths,
        };
        s.validate()?;
        Ok(s)
    }
}

fn ids(range: std::ops::Range<u32>) -> Vec<u32> {
    range.collect()
}

/// One device, `n` quiet destinations, budget `k`.
pub fn static_single(n: u32, k: usize, rounds: u64, noise_sd: f64) -> Scenario {
    let mut b = ScenarioBuilder::new(rounds).budget(k, 0);
    let quiet = b.group("quiet", 0.0, 1.0, false, 0.0);
    b.device(0, &ids(100..100 + n), &[], quiet, noise_sd);
    b.build().expect("preset is valid")
}

/// One device, `n` noiseless quiet destinations whose constant latencies
/// are spread evenly between 10 ms and 90 ms.
pub fn static_spread(n: u32, k: usize, rounds: u64) -> Scenario {
    let mut b = ScenarioBuilder::new(rounds).budget(k, 0);
    let quiet = b.group("quiet", 0.0, 1.0, false, 0.0);
    b.device(0, &ids(100..100 + n), &[], quiet, 0.0);
    for i in 0..n {
        let base = 10.0 + 80.0 * f64::from(i) / f64::from(n.max(2) - 1);
        b.path_base(0, 100 + i, base);
    }
    b.build().expect("preset is valid")
}

/// One device, 20 destinations, budget 3; destinations 100..104 violate
/// for the whole run, the rest never do.
pub fn persistent_hotspots(rounds: u64) -> Scenario {
    let mut b = ScenarioBuilder::new(rounds).budget(3, 0);
    let quiet = b.group("quiet", 0.0, 1.0, false, 0.0);
    let hot = b.group("hot", 1.0, 0.0, true, 0.0);
    b.device(0, &ids(100..120), &[], quiet, 5.0);
    for d in 100..104 {
        b.path_group(0, d, hot);
    }
    b.build().expect("preset is valid")
}

fn all_but(me: u32, devices: std::ops::Range<u32>) -> Vec<u32> {
    devices.filter(|&d| d != me).collect()
}

/// Two groups of four devices sharing four destinations, full local
/// coverage, fast regime switching and noise at 1% of the violation offset.
/// Every device starts with every other device as a neighbor.
pub fn two_groups(rounds: u64) -> Scenario {
    let mut b = ScenarioBuilder::new(rounds).budget(4, 0);
    let a = b.group("a", 0.3, 0.3, false, 0.0);
    let c = b.group("b", 0.3, 0.3, false, 0.0);
    for dev in 0..8 {
        let g = if dev < 4 { a } else { c };
        b.device(dev, &ids(100..104), &all_but(dev, 0..8), g, DELTA_MS * 0.01);
    }
    b.build().expect("preset is valid")
}

/// Six devices of one group towards eight shared destinations with
/// episodic violations that start simultaneously across the group.
/// Neighbors form a ring.
pub fn correlated_episodes(rounds: u64, local_max: usize, virtual_max: usize, divergence: f64) -> Scenario {
    let mut b = ScenarioBuilder::new(rounds).budget(local_max, virtual_max);
    let g = b.group("core", 0.05, 0.15, false, divergence);
    for dev in 0..6u32 {
        let ring = [(dev + 5) % 6, (dev + 1) % 6];
        b.device(dev, &ids(100..108), &ring, g, 3.0);
    }
    b.build().expect("preset is valid")
}
