//! Deterministic round-based network world with known ground truth.
//!
//! Each path (device, destination) belongs to a group. A group runs one
//! two-state regime process (Normal / Violating) per destination, so paths
//! of the same group towards the same destination degrade together while
//! paths of different groups are independent. The value a path shows in a
//! round is
//!
//! ```text
//! base_latency + delta * violating + N(0, noise_sd)
//! ```
//!
//! where `violating` is the group regime, optionally flipped per path and
//! round with probability `divergence`. Per-path randomness is keyed on
//! (seed, path, round), so which sessions a strategy activates never
//! changes the world another strategy sees.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordination::{Bus, MessageCounts};
use crate::correlation::{OverlayParams, PeerLink};
use crate::model::{DestinationId, DeviceId, MeasurementSample, ModelError, Round, SessionBudget, Slo};
use crate::rank::{ActivationSet, RankParams};
use crate::strategies::{Device, StrategyKind, StrategyParams};

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a tuple of keys.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| mix64(acc ^ mix64(p)))
}

const STREAM_REGIME: u64 = 1;
const STREAM_PATH: u64 = 2;
const STREAM_DEVICE: u64 = 3;
const STREAM_BUS: u64 = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        path: path.into(),
        message: message.into(),
    }
}

/// Regime process shared by the paths of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupModel {
    pub name: String,
    /// Per-round probability of entering the violating regime.
    pub p_enter: f64,
    /// Per-round probability of leaving it.
    pub p_exit: f64,
    /// Offset added while violating, in metric units.
    pub delta: f64,
    pub start_violating: bool,
    /// Per path and round probability that a path's regime disagrees with
    /// its group's.
    pub divergence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathModel {
    pub base_latency: f64,
    /// Index into the scenario's group list.
    pub group: usize,
    pub noise_sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSpec {
    pub id: DeviceId,
    pub destinations: Vec<DestinationId>,
    pub neighbors: Vec<DeviceId>,
}

/// A validated simulation input.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub rounds: Round,
    pub slo: Slo,
    pub rank: RankParams,
    pub overlay: OverlayParams,
    pub budget: SessionBudget,
    pub window: usize,
    pub message_drop: f64,
    pub groups: Vec<GroupModel>,
    pub devices: Vec<DeviceSpec>,
    pub paths: BTreeMap<(DeviceId, DestinationId), PathModel>,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.rounds == 0 {
            return Err(invalid("rounds", "must be at least 1"));
        }
        if self.window == 0 {
            return Err(invalid("rank.window", "must be at least 1"));
        }
        if self.budget.local_max == 0 {
            return Err(invalid("budget.local_max", "must be at least 1"));
        }
        self.rank.validate().map_err(|e| invalid("rank", e.to_string()))?;
        self.overlay.validate().map_err(|e| invalid("overlay", e.to_string()))?;
        if !(0.0..=1.0).contains(&self.message_drop) {
            return Err(invalid("network.message_drop", "must lie in [0, 1]"));
        }
        if self.devices.is_empty() {
            return Err(invalid("devices", "at least one device is required"));
        }
        for (i, g) in self.groups.iter().enumerate() {
            let p = |f: &str| format!("groups[{i}].{f}");
            for (name, v) in [
                ("p_enter", g.p_enter),
                ("p_exit", g.p_exit),
                ("divergence", g.divergence),
            ] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(invalid(p(name), "must lie in [0, 1]"));
                }
            }
            if !g.delta.is_finite() {
                return Err(invalid(p("delta"), "must be finite"));
            }
        }
        let ids: BTreeSet<_> = self.devices.iter().map(|d| d.id).collect();
        if ids.len() != self.devices.len() {
            return Err(invalid("devices", "device ids must be unique"));
        }
        for (i, d) in self.devices.iter().enumerate() {
            if d.destinations.is_empty() {
                return Err(invalid(format!("devices[{i}].destinations"), "must not be empty"));
            }
            for (j, dest) in d.destinations.iter().enumerate() {
                let here = format!("devices[{i}].destinations[{j}]");
                if dest.as_device() == d.id {
                    return Err(invalid(here, "a device cannot measure itself"));
                }
                let Some(path) = self.paths.get(&(d.id, *dest)) else {
                    return Err(invalid(here, "no path model for this destination"));
                };
                if !(path.base_latency > 0.0 && path.base_latency.is_finite()) {
                    return Err(invalid(here, "base_latency must be positive"));
                }
                if !(path.noise_sd >= 0.0 && path.noise_sd.is_finite()) {
                    return Err(invalid(here, "noise_sd must be non-negative"));
                }
                let Some(g) = self.groups.get(path.group) else {
                    return Err(invalid(here, format!("unknown group index {}", path.group)));
                };
                if !self.slo.is_breached(path.base_latency + g.delta) {
                    return Err(invalid(
                        here,
                        format!("group `{}` delta does not push the path past the SLO threshold", g.name),
                    ));
                }
            }
            for (j, n) in d.neighbors.iter().enumerate() {
                if !ids.contains(n) {
                    return Err(invalid(
                        format!("devices[{i}].neighbors[{j}]"),
                        format!("unknown device {n}"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn strategy_params(&self) -> StrategyParams {
        StrategyParams {
            slo: self.slo.clone(),
            rank: self.rank,
            overlay: self.overlay,
            budget: self.budget,
            window: self.window,
        }
    }
}

/// Regime trajectories and the value function for one (scenario, seed).
#[derive(Debug, Clone)]
pub struct World {
    seed: u64,
    regimes: BTreeMap<(usize, DestinationId), Vec<bool>>,
    paths: BTreeMap<(DeviceId, DestinationId), PathModel>,
    groups: Vec<GroupModel>,
    slo: Slo,
}

impl World {
    pub fn new(scenario: &Scenario, seed: u64) -> Self {
        let mut regimes = BTreeMap::new();
        let keys: BTreeSet<_> = scenario.paths.iter().map(|((_, d), p)| (p.group, *d)).collect();
        for (g, d) in keys {
            let gm = &scenario.groups[g];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, STREAM_REGIME, g as u64, d.0 as u64]));
            let mut state = gm.start_violating;
            let traj = (0..scenario.rounds)
                .map(|r| {
                    if r > 0 {
                        let u: f64 = rng.random();
                        state = if state { u >= gm.p_exit } else { u < gm.p_enter };
                    }
                    state
                })
                .collect();
            regimes.insert((g, d), traj);
        }
        Self {
            seed,
            regimes,
            paths: scenario.paths.clone(),
            groups: scenario.groups.clone(),
            slo: scenario.slo.clone(),
        }
    }

    /// Group regime for the path's group towards `d`.
    pub fn group_violating(&self, path: (DeviceId, DestinationId), round: Round) -> bool {
        let p = &self.paths[&path];
        self.regimes[&(p.group, path.1)][round as usize]
    }

    /// The path's true value this round; a real session measures exactly this.
    pub fn sample_measurement(&self, path: (DeviceId, DestinationId), round: Round) -> f64 {
        let p = &self.paths[&path];
        let g = &self.groups[p.group];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            self.seed,
            STREAM_PATH,
            path.0 .0 as u64,
            path.1 .0 as u64,
            round,
        ]));
        let flip: f64 = rng.random();
        let z: f64 = rng.sample(StandardNormal);
        let mut violating = self.group_violating(path, round);
        if flip < g.divergence {
            violating = !violating;
        }
        p.base_latency + if violating { g.delta } else { 0.0 } + p.noise_sd * z
    }

    pub fn is_violating(&self, path: (DeviceId, DestinationId), round: Round) -> bool {
        detect(self.sample_measurement(path, round), &self.slo)
    }
}

/// Whether one observed value breaches the SLO.
pub fn detect(value: f64, slo: &Slo) -> bool {
    slo.is_breached(value)
}

/// Ground-truth-aware results of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub rounds: Round,
    pub devices: usize,
    pub violation_rounds: u64,
    pub true_detections: u64,
    pub missed_violations: u64,
    pub false_virtual_detections: u64,
    pub virtual_false_negatives: u64,
    pub detection_ratio: f64,
    pub violation_episodes: u64,
    pub detected_episodes: u64,
    pub mean_detection_lag: Option<f64>,
    pub real_sessions_per_device_per_round: f64,
    pub distinct_destinations_covered_per_device: f64,
    pub max_real_sessions: usize,
    pub max_virtual_sessions: usize,
    pub global_session_bound: usize,
    pub peak_global_sessions: usize,
    pub mean_peers: f64,
    pub messages: MessageCounts,
}

/// A snapshot of every device's peer links after a topology update.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologySnapshot {
    pub round: Round,
    pub peers: BTreeMap<DeviceId, Vec<PeerLink>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    /// Per round, each device's real activation set.
    pub activations: Vec<BTreeMap<DeviceId, ActivationSet>>,
    pub topology: Vec<TopologySnapshot>,
    pub trace: Option<String>,
}

/// Indicator of a held result for (device, destination, round).
#[derive(Debug, Clone, Copy, Default)]
struct Held {
    breach: bool,
    virtual_breach: bool,
    virtual_clear: bool,
}

/// A run in progress. `step` advances one round; `finish` flushes the bus
/// and scores against ground truth.
pub struct Simulation {
    scenario: Scenario,
    params: StrategyParams,
    strategy: StrategyKind,
    seed: u64,
    world: World,
    bus: Bus,
    devices: Vec<Device>,
    round: Round,
    held: BTreeMap<(DeviceId, DestinationId, Round), Held>,
    covered: BTreeMap<(DeviceId, Round), BTreeSet<DestinationId>>,
    activations: Vec<BTreeMap<DeviceId, ActivationSet>>,
    topology: Vec<TopologySnapshot>,
    max_real: usize,
    max_virtual: usize,
    peak_global: usize,
}

impl Simulation {
    pub fn new(scenario: &Scenario, strategy: StrategyKind, seed: u64, trace: bool) -> Result<Self, ScenarioError> {
        scenario.validate()?;
        let devices = scenario
            .devices
            .iter()
            .map(|d| {
                Device::new(
                    d.id,
                    strategy,
                    d.destinations.clone(),
                    d.neighbors.iter().copied(),
                    scenario.window,
                    derive_seed(&[seed, STREAM_DEVICE, d.id.0 as u64]),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            params: scenario.strategy_params(),
            world: World::new(scenario, seed),
            bus: Bus::new(scenario.message_drop, derive_seed(&[seed, STREAM_BUS]), trace),
            scenario: scenario.clone(),
            strategy,
            seed,
            devices,
            round: 0,
            held: BTreeMap::new(),
            covered: BTreeMap::new(),
            activations: Vec::new(),
            topology: Vec::new(),
            max_real: 0,
            max_virtual: 0,
            peak_global: 0,
        })
    }

    pub fn round(&self) -> Round {
        self.round
    }

    pub fn is_done(&self) -> bool {
        self.round >= self.scenario.rounds
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    fn note_virtual(&mut self, device: DeviceId, samples: Vec<MeasurementSample>) {
        for s in samples {
            let h = self.held.entry((device, s.destination, s.round)).or_default();
            if detect(s.value, &self.params.slo) {
                h.breach = true;
                h.virtual_breach = true;
            } else {
                h.virtual_clear = true;
            }
            self.covered.entry((device, s.round)).or_default().insert(s.destination);
        }
    }

    /// Advances one round: deliver, decide, measure, report.
    pub fn step(&mut self) {
        let r = self.round;
        let mut inboxes = self.bus.deliver(r);
        let mut plans = Vec::with_capacity(self.devices.len());
        for dev in &mut self.devices {
            let inbox = inboxes.remove(&dev.id()).unwrap_or_default();
            plans.push(dev.begin_round(r, inbox, &self.params));
        }
        let mut round_sets = BTreeMap::new();
        let mut global = 0;
        for (i, plan) in plans.into_iter().enumerate() {
            let id = self.devices[i].id();
            self.bus.send_all(plan.outbound);
            self.note_virtual(id, plan.virtual_samples);

            let samples: Vec<_> = plan
                .activation
                .iter()
                .map(|d| MeasurementSample::local(id, d, r, self.world.sample_measurement((id, d), r)))
                .collect();
            for s in &samples {
                let h = self.held.entry((id, s.destination, r)).or_default();
                h.breach |= detect(s.value, &self.params.slo);
                self.covered.entry((id, r)).or_default().insert(s.destination);
            }
            let reports = self.devices[i].finish_round(r, &samples);
            self.bus.send_all(reports);

            self.max_real = self.max_real.max(plan.activation.len());
            self.max_virtual = self.max_virtual.max(self.devices[i].consumer_sessions().held());
            global += plan.activation.len();
            round_sets.insert(id, plan.activation);
        }
        self.peak_global = self.peak_global.max(global);
        self.activations.push(round_sets);
        if self.strategy.uses_overlay() && r > 0 && r.is_multiple_of(self.params.overlay.topology_period) {
            self.topology.push(TopologySnapshot {
                round: r,
                peers: self.devices.iter().map(|d| (d.id(), d.peers().to_vec())).collect(),
            });
        }
        self.round += 1;
    }

    pub fn run_to_end(&mut self) {
        while !self.is_done() {
            self.step();
        }
    }

    /// Flushes in-flight results and scores the run.
    pub fn finish(mut self) -> RunOutput {
        self.run_to_end();
        let mut inboxes = self.bus.deliver(self.round);
        for i in 0..self.devices.len() {
            let id = self.devices[i].id();
            let inbox = inboxes.remove(&id).unwrap_or_default();
            let v = self.devices[i].absorb(inbox);
            // results for rounds beyond the horizon are not scored
            let v = v.into_iter().filter(|s| s.round < self.scenario.rounds).collect();
            self.note_virtual(id, v);
        }
        let report = self.score();
        RunOutput {
            report,
            activations: self.activations,
            topology: self.topology,
            trace: self.bus.take_trace(),
        }
    }

    fn score(&self) -> MetricsReport {
        let rounds = self.scenario.rounds;
        let mut violation_rounds = 0;
        let mut true_detections = 0;
        let mut false_virtual = 0;
        let mut virtual_fn = 0;
        let mut episodes = 0;
        let mut detected_episodes = 0;
        let mut lag_sum = 0u64;
        for dev in &self.scenario.devices {
            for &d in &dev.destinations {
                let mut onset: Option<Round> = None;
                let mut found = false;
                for r in 0..rounds {
                    let truth = self.world.is_violating((dev.id, d), r);
                    let h = self.held.get(&(dev.id, d, r)).copied().unwrap_or_default();
                    if truth {
                        violation_rounds += 1;
                        if h.breach {
                            true_detections += 1;
                        }
                        if h.virtual_clear {
                            virtual_fn += 1;
                        }
                        if onset.is_none() {
                            onset = Some(r);
                            found = false;
                            episodes += 1;
                        }
                        if h.breach && !found {
                            found = true;
                            detected_episodes += 1;
                            lag_sum += r - onset.unwrap();
                        }
                    } else {
                        onset = None;
                        if h.virtual_breach {
                            false_virtual += 1;
                        }
                    }
                }
            }
        }
        let n_dev = self.devices.len();
        let dev_rounds = (n_dev as f64) * rounds as f64;
        let real: usize = self
            .activations
            .iter()
            .flat_map(|m| m.values())
            .map(ActivationSet::len)
            .sum();
        let covered: usize = self.covered.values().map(BTreeSet::len).sum();
        let peers: usize = self.devices.iter().map(|d| d.peers().len()).sum();
        MetricsReport {
            strategy: self.strategy,
            seed: self.seed,
            rounds,
            devices: n_dev,
            violation_rounds,
            true_detections,
            missed_violations: violation_rounds - true_detections,
            false_virtual_detections: false_virtual,
            virtual_false_negatives: virtual_fn,
            detection_ratio: if violation_rounds == 0 {
                1.0
            } else {
                true_detections as f64 / violation_rounds as f64
            },
            violation_episodes: episodes,
            detected_episodes,
            mean_detection_lag: (detected_episodes > 0).then(|| lag_sum as f64 / detected_episodes as f64),
            real_sessions_per_device_per_round: real as f64 / dev_rounds,
            distinct_destinations_covered_per_device: covered as f64 / dev_rounds,
            max_real_sessions: self.max_real,
            max_virtual_sessions: self.max_virtual,
            global_session_bound: SessionBudget::global_bound(std::iter::repeat_n(self.scenario.budget, n_dev)),
            peak_global_sessions: self.peak_global,
            mean_peers: peers as f64 / n_dev as f64,
            messages: self.bus.counts(),
        }
    }
}

/// Runs one (scenario, strategy, seed) to completion.
pub fn run(scenario: &Scenario, strategy: StrategyKind, seed: u64, trace: bool) -> Result<RunOutput, ScenarioError> {
    Ok(Simulation::new(scenario, strategy, seed, trace)?.finish())
}
