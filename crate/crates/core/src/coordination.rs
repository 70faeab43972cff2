//! Overlay messages, the round-delayed message bus and the virtual
//! measurement session contract.
//!
//! A consumer asks its best-correlated peer to produce results for a
//! destination it cannot afford to probe. The producer accepts if it already
//! holds a contracted session for the destination or still has an
//! unpinned local slot. Accepted destinations are pinned into the
//! producer's activation set and their samples are forwarded every round
//! until either side stops the session.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::model::{DestinationId, DeviceId, MeasurementSample, Round};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum MessageBody {
    MeasurementReport(Vec<MeasurementSample>),
    PeerAdvertisement(Vec<DeviceId>),
    CoordRequest(DestinationId),
    CoordResponse(DestinationId, Verdict),
    StopRequest(DestinationId),
    StopInform(DestinationId),
}

impl MessageBody {
    pub fn variant(&self) -> &'static str {
        match self {
            MessageBody::MeasurementReport(_) => "MeasurementReport",
            MessageBody::PeerAdvertisement(_) => "PeerAdvertisement",
            MessageBody::CoordRequest(_) => "CoordRequest",
            MessageBody::CoordResponse(..) => "CoordResponse",
            MessageBody::StopRequest(_) => "StopRequest",
            MessageBody::StopInform(_) => "StopInform",
        }
    }

    pub fn destination(&self) -> Option<DestinationId> {
        match self {
            MessageBody::CoordRequest(d)
            | MessageBody::CoordResponse(d, _)
            | MessageBody::StopRequest(d)
            | MessageBody::StopInform(d) => Some(*d),
            _ => None,
        }
    }

    fn detail(&self) -> String {
        match self {
            MessageBody::MeasurementReport(s) => s.len().to_string(),
            MessageBody::PeerAdvertisement(p) => {
                let ids: Vec<_> = p.iter().map(|d| d.to_string()).collect();
                ids.join(" ")
            }
            MessageBody::CoordResponse(_, Verdict::Positive) => "positive".into(),
            MessageBody::CoordResponse(_, Verdict::Negative) => "negative".into(),
            _ => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Message {
    pub src: DeviceId,
    pub dst: DeviceId,
    /// Round in which the message was sent.
    pub round: Round,
    pub body: MessageBody,
}

impl Message {
    pub fn new(src: DeviceId, dst: DeviceId, round: Round, body: MessageBody) -> Self {
        Self { src, dst, round, body }
    }

    /// One trace line: `round,variant,src,dst,destination,detail`.
    pub fn trace_line(&self) -> String {
        let dest = self
            .body
            .destination()
            .map_or_else(|| "-".to_string(), |d| d.to_string());
        format!(
            "{},{},{},{},{},{}",
            self.round,
            self.body.variant(),
            self.src,
            self.dst,
            dest,
            self.body.detail()
        )
    }
}

/// Header line of the message trace log.
pub const TRACE_HEADER: &str = "round,variant,src,dst,destination,detail";

/// Per-variant message counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MessageCounts {
    pub report: u64,
    pub advertisement: u64,
    pub coordination: u64,
    pub dropped: u64,
}

impl MessageCounts {
    pub fn total(&self) -> u64 {
        self.report + self.advertisement + self.coordination
    }
}

/// Lossless (or i.i.d. lossy) bus with one round of latency.
#[derive(Debug)]
pub struct Bus {
    in_flight: Vec<Message>,
    drop_probability: f64,
    rng: ChaCha8Rng,
    counts: MessageCounts,
    trace: Option<String>,
}

impl Bus {
    pub fn new(drop_probability: f64, seed: u64, trace: bool) -> Self {
        Self {
            in_flight: Vec::new(),
            drop_probability,
            rng: ChaCha8Rng::seed_from_u64(seed),
            counts: MessageCounts::default(),
            trace: trace.then(|| format!("{TRACE_HEADER}\n")),
        }
    }

    pub fn send(&mut self, msg: Message) {
        match msg.body {
            MessageBody::MeasurementReport(_) => self.counts.report += 1,
            MessageBody::PeerAdvertisement(_) => self.counts.advertisement += 1,
            _ => self.counts.coordination += 1,
        }
        if let Some(t) = self.trace.as_mut() {
            let _ = writeln!(t, "{}", msg.trace_line());
        }
        if self.drop_probability > 0.0 && self.rng.random::<f64>() < self.drop_probability {
            self.counts.dropped += 1;
            return;
        }
        self.in_flight.push(msg);
    }

    pub fn send_all(&mut self, msgs: impl IntoIterator<Item = Message>) {
        for m in msgs {
            self.send(m);
        }
    }

    /// Hands every message sent before `round` to its recipient, ordered by
    /// (src, dst) and then send order.
    pub fn deliver(&mut self, round: Round) -> BTreeMap<DeviceId, Vec<Message>> {
        let (mut due, rest): (Vec<_>, Vec<_>) = self.in_flight.drain(..).partition(|m| m.round < round);
        self.in_flight = rest;
        due.sort_by_key(|m| (m.src, m.dst));
        let mut inboxes: BTreeMap<DeviceId, Vec<Message>> = BTreeMap::new();
        for m in due {
            inboxes.entry(m.dst).or_default().push(m);
        }
        inboxes
    }

    pub fn counts(&self) -> MessageCounts {
        self.counts
    }

    pub fn take_trace(&mut self) -> Option<String> {
        self.trace.take()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SessionState {
    Proposed,
    Active,
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct VirtualSession {
    pub consumer: DeviceId,
    pub producer: DeviceId,
    pub destination: DestinationId,
    pub state: SessionState,
    pub established_round: Round,
}

/// Rounds a consumer waits for a response, or for the next sample of an
/// active session, before giving the session up. A request sent in round r
/// is answered in the inbox of round r + 2.
pub const SESSION_TIMEOUT: Round = 3;

/// Consumer side: sessions it holds and the peers that declined each
/// destination during the current proposal cycle.
#[derive(Debug, Clone, Default)]
pub struct ConsumerSessions {
    sessions: BTreeMap<DestinationId, VirtualSession>,
    declined: BTreeMap<DestinationId, BTreeSet<DeviceId>>,
    // round by which the last sample of an active session was delivered
    heard: BTreeMap<DestinationId, Round>,
}

impl ConsumerSessions {
    /// Sessions counted against the virtual budget (proposed or active).
    pub fn held(&self) -> usize {
        self.sessions.len()
    }

    pub fn active(&self) -> impl Iterator<Item = &VirtualSession> {
        self.sessions.values().filter(|s| s.state == SessionState::Active)
    }

    pub fn get(&self, d: DestinationId) -> Option<&VirtualSession> {
        self.sessions.get(&d)
    }

    pub fn is_active_with(&self, producer: DeviceId, d: DestinationId) -> bool {
        self.sessions
            .get(&d)
            .is_some_and(|s| s.producer == producer && s.state == SessionState::Active)
    }

    /// Picks the best-correlated peer not yet asked for `d` in this cycle.
    /// `peers` must be ordered by correlation, best first. Exhausting every
    /// peer restarts the cycle on the next call.
    pub fn propose_virtual(
        &mut self,
        consumer: DeviceId,
        d: DestinationId,
        peers: &[DeviceId],
        virtual_max: usize,
        locally_measured: bool,
        round: Round,
    ) -> Option<Message> {
        if self.held() >= virtual_max || locally_measured || self.sessions.contains_key(&d) {
            return None;
        }
        let declined = self.declined.entry(d).or_default();
        let Some(&producer) = peers.iter().find(|p| !declined.contains(p)) else {
            declined.clear();
            return None;
        };
        self.sessions.insert(
            d,
            VirtualSession {
                consumer,
                producer,
                destination: d,
                state: SessionState::Proposed,
                established_round: round,
            },
        );
        Some(Message::new(consumer, producer, round, MessageBody::CoordRequest(d)))
    }

    pub fn on_response(&mut self, from: DeviceId, d: DestinationId, verdict: Verdict, round: Round) {
        let Some(s) = self.sessions.get_mut(&d) else { return };
        if s.producer != from || s.state != SessionState::Proposed {
            return;
        }
        match verdict {
            Verdict::Positive => {
                s.state = SessionState::Active;
                s.established_round = round;
                self.declined.remove(&d);
                self.heard.insert(d, round);
            }
            Verdict::Negative => {
                self.sessions.remove(&d);
                self.declined.entry(d).or_default().insert(from);
            }
        }
    }

    /// Records delivery of a virtual sample taken in `sample_round`.
    pub fn on_sample(&mut self, from: DeviceId, d: DestinationId, sample_round: Round) {
        if self.is_active_with(from, d) {
            let h = self.heard.entry(d).or_default();
            *h = (*h).max(sample_round + 1);
        }
    }

    /// Gives up on proposals left unanswered and on active sessions whose
    /// samples stopped arriving, e.g. because messages were lost. An
    /// unanswered proposal counts as a decline. Returns the StopRequests, so
    /// a producer that did accept releases its slot.
    pub fn expire(&mut self, round: Round) -> Vec<Message> {
        let stale: Vec<_> = self
            .sessions
            .values()
            .filter(|s| match s.state {
                SessionState::Proposed => round >= s.established_round + SESSION_TIMEOUT,
                _ => round >= self.heard.get(&s.destination).copied().unwrap_or(0) + SESSION_TIMEOUT,
            })
            .map(|s| (s.destination, s.producer, s.state))
            .collect();
        let mut out = Vec::new();
        for (d, producer, state) in stale {
            if state == SessionState::Proposed {
                self.declined.entry(d).or_default().insert(producer);
            }
            out.extend(self.stop(d, round));
        }
        out
    }

    /// Producer-initiated stop. Unknown sessions are ignored.
    pub fn on_stop_inform(&mut self, from: DeviceId, d: DestinationId) -> Option<VirtualSession> {
        match self.sessions.get(&d) {
            Some(s) if s.producer == from => self.sessions.remove(&d).map(|mut s| {
                self.heard.remove(&d);
                s.state = SessionState::Stopped;
                s
            }),
            _ => None,
        }
    }

    /// Consumer-initiated stop; returns the StopRequest to send.
    pub fn stop(&mut self, d: DestinationId, round: Round) -> Option<Message> {
        let s = self.sessions.remove(&d)?;
        self.heard.remove(&d);
        Some(Message::new(s.consumer, s.producer, round, MessageBody::StopRequest(d)))
    }

    /// Stops every session held with `producer`.
    pub fn stop_producer(&mut self, producer: DeviceId, round: Round) -> Vec<Message> {
        let ds: Vec<_> = self
            .sessions
            .values()
            .filter(|s| s.producer == producer)
            .map(|s| s.destination)
            .collect();
        ds.into_iter().filter_map(|d| self.stop(d, round)).collect()
    }

    /// Forgets declines, e.g. after the peer set changed.
    pub fn reset_declines(&mut self) {
        self.declined.clear();
    }
}

/// Producer side: forwarding obligations per (consumer, destination).
#[derive(Debug, Clone, Default)]
pub struct ProducerObligations {
    sessions: BTreeMap<(DeviceId, DestinationId), VirtualSession>,
}

/// What a producer knows when answering a coordination request.
#[derive(Clone, Copy)]
pub struct ProducerView<'a> {
    pub producer: DeviceId,
    pub local_max: usize,
    pub destinations: &'a [DestinationId],
    pub is_peer: &'a dyn Fn(DeviceId) -> bool,
}

impl ProducerObligations {
    /// Destinations that must be in the producer's activation set.
    pub fn pinned(&self) -> BTreeSet<DestinationId> {
        self.sessions.keys().map(|(_, d)| *d).collect()
    }

    pub fn consumers_of(&self, d: DestinationId) -> impl Iterator<Item = DeviceId> + '_ {
        self.sessions.keys().filter(move |(_, x)| *x == d).map(|(c, _)| *c)
    }

    pub fn iter(&self) -> impl Iterator<Item = &VirtualSession> {
        self.sessions.values()
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    /// Positive iff the requester is a peer, the destination is one the
    /// producer can probe, and it is either already pinned or a local slot is
    /// still unpinned. A positive answer registers the obligation.
    pub fn handle_coord_request(
        &mut self,
        view: &ProducerView<'_>,
        consumer: DeviceId,
        d: DestinationId,
        round: Round,
    ) -> Message {
        let pinned = self.pinned();
        let accept = consumer != view.producer
            && (view.is_peer)(consumer)
            && view.destinations.contains(&d)
            && (pinned.contains(&d) || pinned.len() < view.local_max);
        let verdict = if accept {
            self.sessions.insert(
                (consumer, d),
                VirtualSession {
                    consumer,
                    producer: view.producer,
                    destination: d,
                    state: SessionState::Active,
                    established_round: round,
                },
            );
            Verdict::Positive
        } else {
            Verdict::Negative
        };
        Message::new(view.producer, consumer, round, MessageBody::CoordResponse(d, verdict))
    }

    /// Consumer-initiated stop. Unknown sessions are ignored.
    pub fn on_stop_request(&mut self, consumer: DeviceId, d: DestinationId) -> Option<VirtualSession> {
        self.sessions.remove(&(consumer, d)).map(|mut s| {
            s.state = SessionState::Stopped;
            s
        })
    }

    /// Producer-initiated stop of every session with `consumer`.
    pub fn stop_consumer(&mut self, producer: DeviceId, consumer: DeviceId, round: Round) -> Vec<Message> {
        let keys: Vec<_> = self.sessions.keys().filter(|(c, _)| *c == consumer).copied().collect();
        keys.into_iter()
            .map(|(c, d)| {
                self.sessions.remove(&(c, d));
                Message::new(producer, c, round, MessageBody::StopInform(d))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: DeviceId = DeviceId(1);
    const B: DeviceId = DeviceId(2);
    const C: DeviceId = DeviceId(0);
    const D: DestinationId = DestinationId(9);

    #[test]
    fn proposes_to_best_peer_then_next() {
        let mut cs = ConsumerSessions::default();
        let m = cs.propose_virtual(C, D, &[A, B], 2, false, 0).unwrap();
        assert_eq!((m.dst, m.body.clone()), (A, MessageBody::CoordRequest(D)));
        // a pending proposal blocks another one
        assert!(cs.propose_virtual(C, D, &[A, B], 2, false, 0).is_none());
        cs.on_response(A, D, Verdict::Negative, 1);
        let m = cs.propose_virtual(C, D, &[A, B], 2, false, 1).unwrap();
        assert_eq!(m.dst, B);
        cs.on_response(B, D, Verdict::Negative, 2);
        assert!(cs.propose_virtual(C, D, &[A, B], 2, false, 2).is_none());
        // next cycle starts over
        assert_eq!(cs.propose_virtual(C, D, &[A, B], 2, false, 3).unwrap().dst, A);
    }

    #[test]
    fn budget_and_local_guards() {
        let mut cs = ConsumerSessions::default();
        assert!(cs.propose_virtual(C, D, &[A], 0, false, 0).is_none());
        assert!(cs.propose_virtual(C, D, &[A], 3, true, 0).is_none());
        cs.propose_virtual(C, DestinationId(1), &[A], 1, false, 0).unwrap();
        assert!(cs.propose_virtual(C, D, &[A], 1, false, 0).is_none());
    }

    #[test]
    fn positive_response_activates() {
        let mut cs = ConsumerSessions::default();
        cs.propose_virtual(C, D, &[A], 1, false, 0);
        // response from the wrong device is ignored
        cs.on_response(B, D, Verdict::Positive, 1);
        assert_eq!(cs.get(D).unwrap().state, SessionState::Proposed);
        cs.on_response(A, D, Verdict::Positive, 2);
        assert!(cs.is_active_with(A, D));
        assert_eq!(cs.active().count(), 1);
    }

    fn view<'a>(
        dests: &'a [DestinationId],
        is_peer: &'a dyn Fn(DeviceId) -> bool,
        local_max: usize,
    ) -> ProducerView<'a> {
        ProducerView {
            producer: A,
            local_max,
            destinations: dests,
            is_peer,
        }
    }

    #[test]
    fn producer_answers() {
        let dests = [DestinationId(7), D, DestinationId(11)];
        let peer = |_| true;
        let mut po = ProducerObligations::default();
        let v = view(&dests, &peer, 1);

        // one free slot: positive, destination pinned
        let r = po.handle_coord_request(&v, C, D, 3);
        assert_eq!(r.body, MessageBody::CoordResponse(D, Verdict::Positive));
        assert_eq!(po.pinned(), [D].into());
        // already measured for someone else: positive without a new slot
        let r = po.handle_coord_request(&v, B, D, 3);
        assert_eq!(r.body, MessageBody::CoordResponse(D, Verdict::Positive));
        // full budget and unmeasured destination: negative
        let r = po.handle_coord_request(&v, C, DestinationId(7), 3);
        assert_eq!(r.body, MessageBody::CoordResponse(DestinationId(7), Verdict::Negative));
        // destination the producer cannot probe: negative
        let v2 = view(&dests, &peer, 5);
        let r = po.handle_coord_request(&v2, C, DestinationId(40), 3);
        assert_eq!(r.body, MessageBody::CoordResponse(DestinationId(40), Verdict::Negative));
    }

    #[test]
    fn non_peer_gets_negative() {
        let dests = [D];
        let not_peer = |_| false;
        let mut po = ProducerObligations::default();
        let r = po.handle_coord_request(&view(&dests, &not_peer, 4), C, D, 0);
        assert_eq!(r.body, MessageBody::CoordResponse(D, Verdict::Negative));
        assert!(po.is_empty());
    }

    #[test]
    fn stops_are_idempotent() {
        let dests = [D];
        let peer = |_| true;
        let mut po = ProducerObligations::default();
        let mut cs = ConsumerSessions::default();
        cs.propose_virtual(C, D, &[A], 1, false, 0);
        po.handle_coord_request(&view(&dests, &peer, 1), C, D, 1);
        cs.on_response(A, D, Verdict::Positive, 2);

        // consumer stop
        let stop = cs.stop(D, 5).unwrap();
        assert_eq!(stop.body, MessageBody::StopRequest(D));
        assert_eq!(po.on_stop_request(C, D).unwrap().state, SessionState::Stopped);
        assert!(po.pinned().is_empty());
        assert!(po.on_stop_request(C, D).is_none());
        assert!(cs.stop(D, 6).is_none());

        // producer stop
        cs.propose_virtual(C, D, &[A], 1, false, 7);
        po.handle_coord_request(&view(&dests, &peer, 1), C, D, 8);
        cs.on_response(A, D, Verdict::Positive, 9);
        let informs = po.stop_consumer(A, C, 10);
        assert_eq!(informs.len(), 1);
        assert_eq!(cs.on_stop_inform(A, D).unwrap().state, SessionState::Stopped);
        assert!(cs.on_stop_inform(A, D).is_none());
        assert_eq!(cs.held(), 0);
    }

    #[test]
    fn bus_delays_one_round_in_order() {
        let mut bus = Bus::new(0.0, 1, true);
        assert!(bus.deliver(0).is_empty());
        bus.send(Message::new(B, C, 4, MessageBody::CoordRequest(D)));
        bus.send(Message::new(A, C, 4, MessageBody::StopRequest(D)));
        bus.send(Message::new(A, C, 4, MessageBody::StopInform(D)));
        assert!(bus.deliver(4).is_empty());
        let inbox = bus.deliver(5);
        let got: Vec<_> = inbox[&C].iter().map(|m| (m.src, m.body.variant())).collect();
        assert_eq!(got, vec![(A, "StopRequest"), (A, "StopInform"), (B, "CoordRequest")]);
        assert!(bus.deliver(6).is_empty());
        assert_eq!(bus.counts().coordination, 3);
        let trace = bus.take_trace().unwrap();
        assert_eq!(trace.lines().next(), Some(TRACE_HEADER));
        assert_eq!(trace.lines().nth(1), Some("4,CoordRequest,2,0,9,"));
    }

    #[test]
    fn lossy_bus_is_seeded() {
        let run = |seed| {
            let mut bus = Bus::new(0.5, seed, false);
            for i in 0..100 {
                bus.send(Message::new(A, C, 0, MessageBody::CoordRequest(DestinationId(i))));
            }
            let got: Vec<_> = bus.deliver(1).remove(&C).unwrap_or_default();
            (got, bus.counts().dropped)
        };
        let (a, da) = run(3);
        let (b, db) = run(3);
        assert_eq!(a, b);
        assert_eq!(da, db);
        assert!(da > 20 && da < 80);
    }

    #[test]
    fn unanswered_proposal_expires_as_decline() {
        let mut cs = ConsumerSessions::default();
        cs.propose_virtual(C, D, &[A, B], 2, false, 10).unwrap();
        assert!(cs.expire(12).is_empty());
        let stops = cs.expire(13);
        assert_eq!(stops.len(), 1);
        assert_eq!((stops[0].dst, stops[0].body.clone()), (A, MessageBody::StopRequest(D)));
        assert_eq!(cs.held(), 0);
        let m = cs.propose_virtual(C, D, &[A, B], 2, false, 13).unwrap();
        assert_eq!(m.dst, B);
    }

    #[test]
    fn silent_active_session_expires() {
        let mut cs = ConsumerSessions::default();
        cs.propose_virtual(C, D, &[A], 1, false, 0).unwrap();
        cs.on_response(A, D, Verdict::Positive, 2);
        cs.on_sample(A, D, 2);
        cs.on_sample(A, D, 3);
        assert!(cs.expire(6).is_empty());
        assert_eq!(cs.expire(7).len(), 1);
        assert_eq!(cs.held(), 0);
        // samples from a producer without a session are ignored
        cs.on_sample(A, D, 9);
        assert!(cs.expire(20).is_empty());
    }
}
