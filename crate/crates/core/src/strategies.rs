//! Measurement-session activation strategies.
//!
//! Each strategy builds on the previous one:
//!
//! * `Local` ranks destinations with the device's own results only.
//! * `LocalRemote` additionally maintains a correlated-peer overlay, shares
//!   results with it and folds peer results into the proximity score.
//! * `Virtual` additionally contracts peers to produce results for
//!   destinations that miss the local budget cut.
//!
//! `RandomBaseline` activates a uniform random subset and exists for
//! comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coordination::{ConsumerSessions, Message, MessageBody, ProducerObligations, ProducerView};
use crate::correlation::{evaluate_candidate, select_peers, OverlayParams, PeerLink, PeerTable};
use crate::model::{
    DestinationId, DeviceId, MeasurementHistory, MeasurementSample, ModelError, Origin, Round, SessionBudget, Slo,
};
use crate::rank::{destination_rank, ActivationSet, DeviceView, RankParams, Ranking, StalenessBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[serde(alias = "random")]
    RandomBaseline,
    Local,
    #[serde(alias = "local+remote")]
    LocalRemote,
    Virtual,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::RandomBaseline,
        StrategyKind::Local,
        StrategyKind::LocalRemote,
        StrategyKind::Virtual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::RandomBaseline => "random",
            StrategyKind::Local => "local",
            StrategyKind::LocalRemote => "local_remote",
            StrategyKind::Virtual => "virtual",
        }
    }

    /// Whether the strategy maintains the correlated-peer overlay.
    pub fn uses_overlay(self) -> bool {
        matches!(self, StrategyKind::LocalRemote | StrategyKind::Virtual)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" | "random_baseline" => Ok(StrategyKind::RandomBaseline),
            "local" => Ok(StrategyKind::Local),
            "local_remote" | "local+remote" => Ok(StrategyKind::LocalRemote),
            "virtual" => Ok(StrategyKind::Virtual),
            other => Err(format!(
                "unknown strategy `{other}` (expected random, local, local_remote or virtual)"
            )),
        }
    }
}

/// Parameters shared by every device in a run.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyParams {
    pub slo: Slo,
    pub rank: RankParams,
    pub overlay: OverlayParams,
    pub budget: SessionBudget,
    pub window: usize,
}

/// Output of the planning half of a device step.
#[derive(Debug, Clone, Default)]
pub struct RoundPlan {
    pub activation: ActivationSet,
    pub outbound: Vec<Message>,
    /// Samples received this round under an active virtual session.
    pub virtual_samples: Vec<MeasurementSample>,
}

/// One monitoring device and everything it knows.
#[derive(Debug, Clone)]
pub struct Device {
    id: DeviceId,
    kind: StrategyKind,
    destinations: Vec<DestinationId>,
    own: MeasurementHistory,
    pooled: MeasurementHistory,
    reports: BTreeMap<DeviceId, MeasurementHistory>,
    table: PeerTable,
    consumer: ConsumerSessions,
    producer: ProducerObligations,
    rng: ChaCha8Rng,
    last_ranking: Option<Ranking>,
}

impl Device {
    pub fn new(
        id: DeviceId,
        kind: StrategyKind,
        destinations: Vec<DestinationId>,
        neighbors: impl IntoIterator<Item = DeviceId>,
        window: usize,
        rng_seed: u64,
    ) -> Result<Self, ModelError> {
        let mut destinations = destinations;
        destinations.sort();
        destinations.dedup();
        Ok(Self {
            id,
            kind,
            destinations,
            own: MeasurementHistory::new(window)?,
            pooled: MeasurementHistory::new(window)?,
            reports: BTreeMap::new(),
            table: PeerTable::new(id, neighbors),
            consumer: ConsumerSessions::default(),
            producer: ProducerObligations::default(),
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            last_ranking: None,
        })
    }

    pub fn id(&self) -> DeviceId {
        self.id
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    pub fn destinations(&self) -> &[DestinationId] {
        &self.destinations
    }

    pub fn peers(&self) -> &[PeerLink] {
        self.table.peers()
    }

    pub fn peer_table(&self) -> &PeerTable {
        &self.table
    }

    pub fn consumer_sessions(&self) -> &ConsumerSessions {
        &self.consumer
    }

    pub fn producer_obligations(&self) -> &ProducerObligations {
        &self.producer
    }

    /// Local-origin samples only.
    pub fn own_history(&self) -> &MeasurementHistory {
        &self.own
    }

    /// Every sample the device ranks with.
    pub fn pooled_history(&self) -> &MeasurementHistory {
        &self.pooled
    }

    pub fn last_ranking(&self) -> Option<&Ranking> {
        self.last_ranking.as_ref()
    }

    /// Runs the decision half of a round: absorbs the inbox, updates the
    /// overlay when due, answers coordination requests and picks the
    /// activation set.
    pub fn begin_round(&mut self, round: Round, inbox: Vec<Message>, params: &StrategyParams) -> RoundPlan {
        let mut plan = RoundPlan::default();
        let requests = self.ingest(inbox, &mut plan);
        plan.outbound.extend(self.consumer.expire(round));

        if self.kind.uses_overlay() && round > 0 && round.is_multiple_of(params.overlay.topology_period) {
            self.update_topology(round, params, &mut plan.outbound);
        }

        for (from, d) in requests {
            let reply = self.answer_request(from, d, round, params);
            plan.outbound.push(reply);
        }

        plan.activation = match self.kind {
            StrategyKind::RandomBaseline => self.step_random(params),
            StrategyKind::Local => self.step_local(round, params),
            StrategyKind::LocalRemote => self.step_local_remote(round, params),
            StrategyKind::Virtual => self.step_virtual(round, params, &mut plan.outbound),
        };
        plan
    }

    /// Records this round's local samples and returns the reports to send.
    pub fn finish_round(&mut self, round: Round, samples: &[MeasurementSample]) -> Vec<Message> {
        for s in samples {
            debug_assert_eq!(s.origin, Origin::Local);
            // a sample for the current round is never older than what is held
            let _ = self.own.append(*s);
            let _ = self.pooled.append(*s);
        }
        if !self.kind.uses_overlay() || samples.is_empty() {
            return Vec::new();
        }
        let mut recipients: BTreeMap<DeviceId, Vec<MeasurementSample>> = self
            .table
            .bootstrap_candidates()
            .into_iter()
            .map(|c| (c, samples.to_vec()))
            .collect();
        for s in self.producer.iter() {
            let entry = recipients.entry(s.consumer).or_default();
            if let Some(x) = samples.iter().find(|x| x.destination == s.destination) {
                if !entry.contains(x) {
                    entry.push(*x);
                }
            }
        }
        recipients
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(dst, v)| Message::new(self.id, dst, round, MessageBody::MeasurementReport(v)))
            .collect()
    }

    /// Absorbs delivered messages without taking a decision. Used to flush
    /// the bus after the last round.
    pub fn absorb(&mut self, inbox: Vec<Message>) -> Vec<MeasurementSample> {
        let mut plan = RoundPlan::default();
        let _ = self.ingest(inbox, &mut plan);
        plan.virtual_samples
    }

    fn ingest(&mut self, inbox: Vec<Message>, plan: &mut RoundPlan) -> Vec<(DeviceId, DestinationId)> {
        let mut requests = Vec::new();
        let mut reports = Vec::new();
        for m in inbox {
            match m.body {
                MessageBody::CoordResponse(d, v) => self.consumer.on_response(m.src, d, v, m.round + 1),
                MessageBody::StopInform(d) => {
                    self.consumer.on_stop_inform(m.src, d);
                }
                MessageBody::StopRequest(d) => {
                    self.producer.on_stop_request(m.src, d);
                }
                MessageBody::CoordRequest(d) => requests.push((m.src, d)),
                MessageBody::PeerAdvertisement(ids) => {
                    if self.kind.uses_overlay() {
                        self.table.learn(ids);
                    }
                }
                MessageBody::MeasurementReport(samples) => reports.push((m.src, samples)),
            }
        }
        // coordination first, so samples of a just-activated session are
        // classified as virtual
        for (src, samples) in reports {
            if !self.kind.uses_overlay() {
                continue;
            }
            self.table.learn([src]);
            let window = self.own.window();
            for s in samples {
                let store = self
                    .reports
                    .entry(src)
                    .or_insert_with(|| MeasurementHistory::new(window).expect("window validated"));
                let _ = store.append(s.with_origin(Origin::Remote(src)));
                let origin = if self.consumer.is_active_with(src, s.destination) {
                    Origin::Virtual(src)
                } else if self.table.is_peer(src) && self.destinations.contains(&s.destination) {
                    Origin::Remote(src)
                } else {
                    continue;
                };
                if matches!(origin, Origin::Virtual(_)) {
                    self.consumer.on_sample(src, s.destination, s.round);
                }
                let tagged = s.with_origin(origin);
                if self.pooled.append(tagged).is_ok() && matches!(origin, Origin::Virtual(_)) {
                    plan.virtual_samples.push(tagged);
                }
            }
        }
        requests
    }

    fn update_topology(&mut self, round: Round, params: &StrategyParams, out: &mut Vec<Message>) {
        let scored: Vec<_> = self
            .table
            .bootstrap_candidates()
            .into_iter()
            .filter_map(|c| {
                let reports = self.reports.get(&c)?;
                evaluate_candidate(c, &self.own, reports, &params.overlay)
            })
            .collect();
        let lost = self.table.set_peers(select_peers(&scored, &params.overlay, round));
        for peer in lost {
            out.extend(self.consumer.stop_producer(peer, round));
            out.extend(self.producer.stop_consumer(self.id, peer, round));
        }
        self.consumer.reset_declines();
        let ids: Vec<_> = self.table.peers().iter().map(|p| p.peer).collect();
        for &p in &ids {
            out.push(Message::new(
                self.id,
                p,
                round,
                MessageBody::PeerAdvertisement(ids.iter().copied().filter(|&x| x != p).collect()),
            ));
        }
    }

    fn answer_request(&mut self, from: DeviceId, d: DestinationId, round: Round, params: &StrategyParams) -> Message {
        let table = &self.table;
        let is_peer = |id| table.is_peer(id);
        let view = ProducerView {
            producer: self.id,
            // only devices running the virtual strategy take on contracts
            local_max: if self.kind == StrategyKind::Virtual {
                params.budget.local_max
            } else {
                0
            },
            destinations: &self.destinations,
            is_peer: &is_peer,
        };
        self.producer.handle_coord_request(&view, from, d, round)
    }

    /// Uniform sample of `local_max` destinations without replacement.
    pub fn step_random(&mut self, params: &StrategyParams) -> ActivationSet {
        let k = params.budget.local_max.min(self.destinations.len());
        self.destinations.choose_multiple(&mut self.rng, k).copied().collect()
    }

    /// Rank over local results only.
    pub fn step_local(&mut self, round: Round, params: &StrategyParams) -> ActivationSet {
        let none = BTreeSet::new();
        let view = DeviceView {
            destinations: &self.destinations,
            history: &self.own,
            staleness_history: &self.own,
            staleness_basis: StalenessBasis::LocalOnly,
            pinned: &none,
        };
        self.finish_rank(destination_rank(
            &view,
            &params.slo,
            round,
            &params.rank,
            &params.budget,
        ))
    }

    /// Rank with peer results pooled into proximity; staleness stays local.
    pub fn step_local_remote(&mut self, round: Round, params: &StrategyParams) -> ActivationSet {
        let none = BTreeSet::new();
        let view = DeviceView {
            destinations: &self.destinations,
            history: &self.pooled,
            staleness_history: &self.own,
            staleness_basis: StalenessBasis::LocalOnly,
            pinned: &none,
        };
        self.finish_rank(destination_rank(
            &view,
            &params.slo,
            round,
            &params.rank,
            &params.budget,
        ))
    }

    /// Local+remote ranking with contracted destinations pinned, virtual
    /// results counting towards staleness, and virtual-session proposals for
    /// the best destinations left out by the budget cut.
    pub fn step_virtual(&mut self, round: Round, params: &StrategyParams, out: &mut Vec<Message>) -> ActivationSet {
        let pinned = self.producer.pinned();
        let view = DeviceView {
            destinations: &self.destinations,
            history: &self.pooled,
            staleness_history: &self.pooled,
            staleness_basis: StalenessBasis::LocalOrVirtual,
            pinned: &pinned,
        };
        let ranking = destination_rank(&view, &params.slo, round, &params.rank, &params.budget);

        // a destination probed locally no longer needs its virtual session
        let covered: Vec<_> = ranking
            .activation
            .iter()
            .filter(|d| self.consumer.get(*d).is_some())
            .collect();
        for d in covered {
            out.extend(self.consumer.stop(d, round));
        }

        let peers: Vec<_> = self.table.peers().iter().map(|p| p.peer).collect();
        if !peers.is_empty() {
            let excluded: Vec<_> = ranking.excluded().collect();
            for d in excluded {
                if self.consumer.held() >= params.budget.virtual_max {
                    break;
                }
                out.extend(
                    self.consumer
                        .propose_virtual(self.id, d, &peers, params.budget.virtual_max, false, round),
                );
            }
        }
        self.finish_rank(ranking)
    }

    fn finish_rank(&mut self, ranking: Ranking) -> ActivationSet {
        let set = ranking.activation.clone();
        self.last_ranking = Some(ranking);
        set
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::CorrelationMethod;
    use crate::model::Direction;

    fn params(local_max: usize, virtual_max: usize) -> StrategyParams {
        StrategyParams {
            slo: Slo::new("owd", 100.0, Direction::ViolatedAbove).unwrap(),
            rank: RankParams::default(),
            overlay: OverlayParams {
                method: CorrelationMethod::Pearson,
                ..Default::default()
            },
            budget: SessionBudget::new(local_max, virtual_max).unwrap(),
            window: 20,
        }
    }

    fn dests(ids: &[u32]) -> Vec<DestinationId> {
        ids.iter().map(|&d| DestinationId(d)).collect()
    }

    #[test]
    fn parses_strategy_names() {
        for k in StrategyKind::ALL {
            assert_eq!(k.name().parse::<StrategyKind>(), Ok(k));
        }
        assert!("nope".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn random_covers_all_when_budget_large() {
        let p = params(5, 0);
        let mut d = Device::new(DeviceId(0), StrategyKind::RandomBaseline, dests(&[1, 2, 3]), [], 20, 7).unwrap();
        assert_eq!(d.step_random(&p), dests(&[1, 2, 3]).into_iter().collect());
    }

    #[test]
    fn random_is_seeded() {
        let p = params(2, 0);
        let run = |seed| {
            let mut d = Device::new(
                DeviceId(0),
                StrategyKind::RandomBaseline,
                dests(&[1, 2, 3, 4, 5, 6]),
                [],
                20,
                seed,
            )
            .unwrap();
            (0..20).map(|_| d.step_random(&p)).collect::<Vec<_>>()
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }

    #[test]
    fn random_single_slot_is_fair() {
        // chi-square goodness of fit over 1000 rounds, 1 degree of freedom;
        // 6.635 is the 0.99 quantile
        let p = params(1, 0);
        let mut d = Device::new(DeviceId(0), StrategyKind::RandomBaseline, dests(&[1, 2]), [], 20, 2024).unwrap();
        let n = 1000;
        let ones = (0..n).filter(|_| d.step_random(&p).contains(DestinationId(1))).count() as f64;
        let e = n as f64 / 2.0;
        let chi2 = (ones - e).powi(2) / e + ((n as f64 - ones) - e).powi(2) / e;
        assert!(chi2 < 6.635, "chi2 = {chi2}, count = {ones}");
    }

    #[test]
    fn local_prefers_unmeasured_then_stale() {
        let p = params(1, 0);
        let mut d = Device::new(DeviceId(0), StrategyKind::Local, dests(&[1, 2, 3]), [], 20, 0).unwrap();
        let mut seen = Vec::new();
        for round in 0..3 {
            let set = d.step_local(round, &p);
            let pick = set.iter().next().unwrap();
            seen.push(pick.0);
            d.finish_round(round, &[MeasurementSample::local(DeviceId(0), pick, round, 50.0)]);
        }
        assert_eq!(seen, vec![1, 2, 3]);
    }

    #[test]
    fn local_sends_nothing() {
        let mut d = Device::new(DeviceId(0), StrategyKind::Local, dests(&[1]), [DeviceId(4)], 20, 0).unwrap();
        let out = d.finish_round(0, &[MeasurementSample::local(DeviceId(0), DestinationId(1), 0, 5.0)]);
        assert!(out.is_empty());
    }

    #[test]
    fn overlay_strategies_report_to_candidates() {
        let p = params(1, 0);
        let mut d = Device::new(
            DeviceId(0),
            StrategyKind::LocalRemote,
            dests(&[1]),
            [DeviceId(4), DeviceId(2)],
            20,
            0,
        )
        .unwrap();
        let _ = d.begin_round(0, vec![], &p);
        let out = d.finish_round(0, &[MeasurementSample::local(DeviceId(0), DestinationId(1), 0, 5.0)]);
        let to: Vec<_> = out.iter().map(|m| m.dst.0).collect();
        assert_eq!(to, vec![2, 4]);
    }

    #[test]
    fn non_virtual_devices_decline_contracts() {
        let p = params(2, 0);
        let mut d = Device::new(DeviceId(0), StrategyKind::LocalRemote, dests(&[1]), [], 20, 0).unwrap();
        let inbox = vec![Message::new(
            DeviceId(3),
            DeviceId(0),
            0,
            MessageBody::CoordRequest(DestinationId(1)),
        )];
        let plan = d.begin_round(1, inbox, &p);
        assert!(matches!(
            plan.outbound[0].body,
            MessageBody::CoordResponse(_, crate::coordination::Verdict::Negative)
        ));
    }
}
