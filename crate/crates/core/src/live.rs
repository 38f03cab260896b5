//! Liveness extension: round-robin candidates, signed prevotes and
//! client-triggered leader disputes.
//!
//! A node never starts an election on its own. It signs a prevote for the
//! next term when one of its local conditions fires, and moves to that term
//! only once it holds prevotes from `prevote_threshold` distinct nodes. The
//! candidate of term `t` is node `t mod n`.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{NodeId, Signature};
use crate::protocol::{Delay, Message, Node, NodeEvent, TimerKind};
use crate::types::{LeaderCert, Prevote, Role, Term, VoteRequest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiveTimers {
    /// Upper bound on post-GST message delay.
    pub delta: u64,
    pub heart: u64,
    pub cand: u64,
    pub voter: u64,
    pub client: u64,
    pub req: u64,
}

impl LiveTimers {
    pub fn for_delta(delta: u64) -> LiveTimers {
        LiveTimers {
            delta,
            heart: delta,
            cand: 2 * delta,
            voter: 4 * delta,
            client: 4 * delta,
            // An honest leader needs up to 6 delays to commit a request
            // forwarded by a follower while another round is in flight.
            req: 6 * delta,
        }
    }

    pub fn validate(&self) -> Result<(), TimerError> {
        let d = self.delta;
        let checks = [
            ("heart", self.heart, d),
            ("cand", self.cand, 2 * d),
            ("voter", self.voter, self.cand + 2 * d),
            ("client", self.client, 4 * d),
            ("req", self.req, 2 * d),
        ];
        for (name, got, min) in checks {
            if got < min {
                return Err(TimerError { name, got, min });
            }
        }
        Ok(())
    }

    /// Worst-case time from a client's first submission to commitment with
    /// at most one faulty node, once the network is synchronous.
    pub fn liveness_bound(&self, f: usize) -> u64 {
        let f = f as u64;
        2 * (f + 1) * (self.delta + self.voter) + 2 * self.delta + 2 * self.client + self.req
    }
}

impl Default for LiveTimers {
    fn default() -> Self {
        LiveTimers::for_delta(10)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("timer {name} = {got} is below its minimum {min}")]
pub struct TimerError {
    pub name: &'static str,
    pub got: u64,
    pub min: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    pub timers: LiveTimers,
    pub prevote_threshold: usize,
}

impl Default for LiveConfig {
    fn default() -> Self {
        LiveConfig { timers: LiveTimers::default(), prevote_threshold: 2 }
    }
}

/// Local reasons to prevote.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrevoteCondition {
    /// Leader stopped sending heartbeats.
    LeaderSilent,
    /// A log synchronization request went unanswered.
    SyncUnanswered,
    /// Leader sent data that fails verification.
    InvalidLeaderData,
    /// A second-trial client request was not committed in time.
    RequestStalled,
    /// Voter saw no leader certificate in time.
    VoterTimeout,
    /// Candidate sent an invalid certificate.
    InvalidCandidate,
    /// Candidate failed to gather a quorum.
    CandidateFailed,
}

pub fn candidate_for(term: Term, n: usize) -> NodeId {
    NodeId(term % n as u64)
}

#[derive(Clone, Default)]
pub(crate) struct LiveState {
    prevotes: BTreeMap<Term, BTreeMap<NodeId, Prevote>>,
    prevoted: BTreeSet<Term>,
    waiting: Option<Term>,
    buffered: BTreeMap<Term, Vec<(NodeId, Message)>>,
    trials: BTreeMap<u64, Vec<u8>>,
    next_trial: u64,
}

impl Node {
    pub(crate) fn live_start(&mut self) {
        let d = self.live_timers().heart;
        self.set_timer(TimerKind::LeaderSilence, Delay::Fixed(d));
    }

    fn live_timers(&self) -> LiveTimers {
        self.cfg.live().map(|l| l.timers).unwrap_or_default()
    }

    pub(crate) fn live_timer(&mut self, kind: TimerKind) {
        match kind {
            TimerKind::LeaderSilence if !self.is_leader() => self.prevote_trigger(PrevoteCondition::LeaderSilent),
            TimerKind::Sync => self.prevote_trigger(PrevoteCondition::SyncUnanswered),
            TimerKind::Candidate if self.state.role == Role::Candidate => {
                self.prevote_trigger(PrevoteCondition::CandidateFailed)
            }
            TimerKind::Voter if self.leader.is_none() => self.prevote_trigger(PrevoteCondition::VoterTimeout),
            TimerKind::PrevoteRetry => {
                if let Some(t) = self.live.waiting.filter(|t| *t > self.state.current_term) {
                    if let Some(own) = self.live.prevotes.get(&t).and_then(|m| m.get(&self.state.id)).cloned() {
                        self.broadcast(Message::Prevote(own));
                    }
                    let d = self.live_timers().heart;
                    self.set_timer(TimerKind::PrevoteRetry, Delay::Fixed(d));
                }
            }
            TimerKind::Trial(key) => {
                if let Some(payload) = self.live.trials.remove(&key) {
                    if !self.is_committed_locally(&payload) {
                        self.prevote_trigger(PrevoteCondition::RequestStalled);
                    }
                }
            }
            _ => {}
        }
    }

    fn is_committed_locally(&self, payload: &[u8]) -> bool {
        self.find_payload(payload).is_some_and(|i| i <= self.state.commit_index())
    }

    /// Signs and broadcasts a prevote for the next term, at most once per term.
    pub fn prevote_trigger(&mut self, _cond: PrevoteCondition) {
        if self.cfg.live().is_none() {
            return;
        }
        let term = self.state.current_term + 1;
        if !self.live.prevoted.insert(term) {
            return;
        }
        let pv = Prevote::sign(&self.keys, term);
        self.live.prevotes.entry(term).or_default().insert(self.state.id, pv.clone());
        self.live.waiting = Some(term);
        self.emit(NodeEvent::Prevoted { term });
        self.broadcast(Message::Prevote(pv));
        let d = self.live_timers().heart;
        self.set_timer(TimerKind::PrevoteRetry, Delay::Fixed(d));
        self.check_prevotes(term);
    }

    pub(crate) fn live_prevote(&mut self, from: NodeId, pv: Prevote) {
        if pv.signature.signer != from {
            return;
        }
        let term = pv.term;
        if self.store_prevote(pv) {
            self.check_prevotes(term);
        }
    }

    pub(crate) fn live_bundle(&mut self, bundle: Vec<Prevote>) {
        let terms: BTreeSet<Term> = bundle.iter().map(|p| p.term).collect();
        for pv in bundle {
            self.store_prevote(pv);
        }
        for t in terms {
            self.check_prevotes(t);
        }
    }

    fn store_prevote(&mut self, pv: Prevote) -> bool {
        if pv.term <= self.state.current_term || !pv.verify(&self.registry) {
            return false;
        }
        self.live.prevotes.entry(pv.term).or_default().insert(pv.signature.signer, pv);
        true
    }

    fn check_prevotes(&mut self, term: Term) {
        let threshold = self.cfg.live().map_or(2, |l| l.prevote_threshold);
        if term <= self.state.current_term {
            return;
        }
        let Some(held) = self.live.prevotes.get(&term) else { return };
        if held.len() < threshold {
            return;
        }
        let bundle: Vec<Prevote> = held.values().cloned().collect();
        self.broadcast(Message::PrevoteBundle(bundle));
        self.enter_election(term);
    }

    fn enter_election(&mut self, term: Term) {
        self.step_down(term);
        if self.live.waiting.is_some_and(|w| w <= term) {
            self.live.waiting = None;
        }
        self.live.trials.clear();
        self.live.prevotes = self.live.prevotes.split_off(&(term + 1));
        self.cancel_timers_where(|k| {
            matches!(
                k,
                TimerKind::LeaderSilence
                    | TimerKind::Candidate
                    | TimerKind::Voter
                    | TimerKind::Sync
                    | TimerKind::PrevoteRetry
                    | TimerKind::Trial(_)
            )
        });
        self.emit(NodeEvent::EnteredTerm { term });
        let timers = self.live_timers();
        if candidate_for(term, self.cfg.n) == self.state.id {
            self.start_candidacy(term);
            self.set_timer(TimerKind::Candidate, Delay::Fixed(timers.cand));
        } else {
            self.set_timer(TimerKind::Voter, Delay::Fixed(timers.voter));
        }
        let buffered = std::mem::take(&mut self.live.buffered);
        let (stale_or_now, later): (BTreeMap<_, _>, BTreeMap<_, _>) = buffered.into_iter().partition(|(t, _)| *t <= term);
        self.live.buffered = later;
        for (from, msg) in stale_or_now.get(&term).cloned().unwrap_or_default() {
            match msg {
                Message::RequestVote(req) => self.live_request_vote(from, req),
                Message::LeaderCert(lc) => self.live_leader_cert(from, lc),
                _ => {}
            }
        }
    }

    pub(crate) fn live_request_vote(&mut self, from: NodeId, req: VoteRequest) {
        if req.leader != from || req.term < self.state.current_term {
            return;
        }
        if req.term > self.state.current_term {
            self.live.buffered.entry(req.term).or_default().push((from, Message::RequestVote(req)));
            return;
        }
        if from != candidate_for(req.term, self.cfg.n) || self.leader.is_some() || self.state.role != Role::Follower {
            return;
        }
        if self.state.voted_for.is_some_and(|(_, t)| t == req.term) {
            return;
        }
        if req.freshness >= self.state.freshness() {
            self.grant_vote(from, &req);
        } else {
            self.send(from, Message::Reject { term: req.term, kind: crate::protocol::RejectKind::Vote });
        }
    }

    pub(crate) fn live_vote(&mut self, from: NodeId, term: Term, sig: Signature) {
        if self.record_vote(from, term, sig) {
            self.cancel_timer(TimerKind::Candidate);
            self.become_leader();
        }
    }

    pub(crate) fn live_reject(&mut self, from: NodeId, term: Term) {
        if self.state.role != Role::Candidate || term != self.state.current_term {
            return;
        }
        let f = self.f();
        let Some(c) = self.candidacy.as_mut() else { return };
        c.rejections.insert(from);
        if c.rejections.len() > f {
            self.prevote_trigger(PrevoteCondition::CandidateFailed);
        }
    }

    pub(crate) fn live_leader_cert(&mut self, from: NodeId, lc: LeaderCert) {
        let term = lc.term();
        if term < self.state.current_term || lc.leader() != from {
            return;
        }
        if self.leader == Some(from) && term == self.state.current_term {
            return;
        }
        if lc.leader() != candidate_for(term, self.cfg.n) || !self.verify_lc(&lc) {
            if term == self.state.current_term {
                self.prevote_trigger(PrevoteCondition::InvalidCandidate);
            }
            return;
        }
        if self.is_leader() && term == self.state.current_term {
            return;
        }
        self.admit_leader(lc);
        self.cancel_timer(TimerKind::Voter);
        self.cancel_timer(TimerKind::Candidate);
        self.leader_contact();
    }

    pub(crate) fn live_arm_trial(&mut self, payload: &[u8]) {
        if self.is_committed_locally(payload) || self.live.trials.values().any(|p| p == payload) {
            return;
        }
        let key = self.live.next_trial;
        self.live.next_trial += 1;
        self.live.trials.insert(key, payload.to_vec());
        let d = self.live_timers().req;
        self.set_timer(TimerKind::Trial(key), Delay::Fixed(d));
    }

    pub(crate) fn live_on_commit(&mut self, _old: u64, new: u64) {
        let done: Vec<u64> = self
            .live
            .trials
            .iter()
            .filter(|(_, p)| self.find_payload(p).is_some_and(|i| i <= new))
            .map(|(k, _)| *k)
            .collect();
        for k in done {
            self.live.trials.remove(&k);
            self.cancel_timer(TimerKind::Trial(k));
        }
    }

    pub(crate) fn live_invalid_leader_data(&mut self) {
        if self.cfg.live().is_some() && !self.is_leader() {
            self.prevote_trigger(PrevoteCondition::InvalidLeaderData);
        }
    }

    /// Terms this node has already prevoted for.
    pub fn prevoted_terms(&self) -> Vec<Term> {
        self.live.prevoted.iter().copied().collect()
    }
}

/// Closed-form expected number of election rounds when the initial
/// candidate position is uniform and exactly `f + 1` nodes are fresh enough.
pub fn expected_election_rounds(n: usize) -> f64 {
    let f = (n - 1) / 2;
    (n + 1) as f64 / (f + 2) as f64
}

/// Monte Carlo estimate of the same quantity. Returns `(mean, standard error)`.
pub fn simulate_election_rounds<R: Rng>(n: usize, trials: usize, rng: &mut R) -> (f64, f64) {
    let f = (n - 1) / 2;
    let mut ranks: Vec<usize> = (0..n).collect();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..trials {
        ranks.shuffle(rng);
        let start = rng.gen_range(0..n);
        // Rank 0 is the freshest node; a candidate wins iff at least f + 1
        // nodes, itself included, are no fresher than it.
        let rounds = (0..n).position(|k| ranks[(start + k) % n] <= f).expect("some node is fresh enough") + 1;
        let r = rounds as f64;
        sum += r;
        sum_sq += r * r;
    }
    let t = trials as f64;
    let mean = sum / t;
    let var = (sum_sq / t - mean * mean) * t / (t - 1.0);
    (mean, (var / t).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_timers_are_legal() {
        assert_eq!(LiveTimers::default().validate(), Ok(()));
        let mut t = LiveTimers::default();
        t.voter = t.cand + 2 * t.delta - 1;
        assert_eq!(t.validate().unwrap_err().name, "voter");
    }

    #[test]
    fn candidates_rotate() {
        let seq: Vec<u64> = (1..=6).map(|t| candidate_for(t, 3).0).collect();
        assert_eq!(seq, vec![1, 2, 0, 1, 2, 0]);
    }

    #[test]
    fn bound_grows_with_f() {
        let t = LiveTimers::default();
        assert!(t.liveness_bound(2) > t.liveness_bound(1));
        assert_eq!(t.liveness_bound(1), 2 * 2 * 50 + 20 + 80 + 60);
    }
}
