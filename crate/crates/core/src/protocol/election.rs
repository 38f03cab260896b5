//! Randomized-timeout elections with signed votes.

use std::collections::{BTreeMap, BTreeSet};

use crate::crypto::{NodeId, Signature};
use crate::types::{LeaderCert, Role, Term, VoteRequest};

use super::node::{Candidacy, LeaderCtx, Node};
use super::{Delay, Message, NodeEvent, RejectKind, TimerKind};

impl Node {
    pub(super) fn on_election_timeout(&mut self) {
        if self.is_leader() {
            return;
        }
        self.start_candidacy(self.state.current_term + 1);
        self.set_timer(TimerKind::Election, Delay::Election);
    }

    /// Becomes candidate for `term` and asks everyone for a vote.
    pub(crate) fn start_candidacy(&mut self, term: Term) {
        self.step_down(term);
        self.state.role = Role::Candidate;
        self.state.voted_for = Some((self.state.id, term));
        let request = VoteRequest {
            leader: self.state.id,
            term,
            freshness: self.state.freshness(),
            pointer: self.state.tip_pointer,
        };
        self.candidacy = Some(Candidacy { request: request.clone(), votes: BTreeMap::new(), rejections: BTreeSet::new() });
        self.emit(NodeEvent::BecameCandidate { term });
        self.emit(NodeEvent::Voted { term, candidate: self.state.id });
        self.broadcast(Message::RequestVote(request));
    }

    pub(super) fn on_request_vote(&mut self, from: NodeId, req: VoteRequest) {
        if req.leader != from || req.term <= self.state.current_term {
            return;
        }
        self.step_down(req.term);
        if req.freshness < self.state.freshness() {
            self.send(from, Message::Reject { term: req.term, kind: RejectKind::Vote });
            return;
        }
        self.grant_vote(from, &req);
        self.set_timer(TimerKind::Election, Delay::Election);
    }

    pub(crate) fn grant_vote(&mut self, to: NodeId, req: &VoteRequest) {
        self.state.voted_for = Some((to, req.term));
        let signature = self.keys.sign(&req.digest());
        self.emit(NodeEvent::Voted { term: req.term, candidate: to });
        self.send(to, Message::Vote { term: req.term, signature });
    }

    pub(super) fn on_vote(&mut self, from: NodeId, term: Term, sig: Signature) {
        if self.record_vote(from, term, sig) {
            self.become_leader();
        }
    }

    /// Stores a verified vote; true once the candidacy holds a quorum.
    pub(crate) fn record_vote(&mut self, from: NodeId, term: Term, sig: Signature) -> bool {
        if self.state.role != Role::Candidate || term != self.state.current_term || sig.signer != from {
            return false;
        }
        let f = self.f();
        let Some(c) = self.candidacy.as_ref() else { return false };
        if !self.registry.verify(&sig, &c.request.digest()) {
            return false;
        }
        let c = self.candidacy.as_mut().expect("checked above");
        c.votes.insert(from, sig);
        c.votes.len() >= f
    }

    pub(crate) fn become_leader(&mut self) {
        let Some(c) = self.candidacy.take() else { return };
        let own = self.keys.sign(&c.request.digest());
        let mut voters = vec![self.state.id];
        let mut signatures = vec![own];
        for (v, s) in c.votes {
            voters.push(v);
            signatures.push(s);
        }
        let term = c.request.term;
        let lc = LeaderCert { request: c.request, voters, signatures };
        self.state.election_list.insert(term, lc.clone());
        self.state.role = Role::Leader;
        self.leader = Some(self.state.id);
        let tip = self.state.last_index();
        let pointer_index = (0..=tip).map(|i| (self.state.pointer_at(i).expect("cached"), i)).collect();
        self.lead = Some(LeaderCtx {
            next_index: self.peers().map(|p| (p, tip + 1)).collect(),
            pointer_index,
            round: None,
            waiting: BTreeMap::new(),
            committed_known: BTreeMap::new(),
            confirmed: BTreeSet::new(),
        });
        self.cancel_timer(TimerKind::Election);
        self.emit(NodeEvent::LeaderElected { term });
        self.broadcast(Message::LeaderCert(lc));
        let hb = self.cfg.heartbeat;
        self.set_timer(TimerKind::Heartbeat, Delay::Fixed(hb));
    }

    pub(super) fn on_leader_cert(&mut self, from: NodeId, lc: LeaderCert) {
        let term = lc.term();
        if term < self.state.current_term || lc.leader() != from {
            return;
        }
        if self.leader == Some(from) && term == self.state.current_term {
            return;
        }
        if !self.verify_lc(&lc) {
            return;
        }
        self.admit_leader(lc);
        self.set_timer(TimerKind::Election, Delay::Election);
    }

    pub(crate) fn admit_leader(&mut self, lc: LeaderCert) {
        let term = lc.term();
        let leader = lc.leader();
        self.step_down(term);
        self.leader = Some(leader);
        self.state.election_list.insert(term, lc);
        self.emit(NodeEvent::LeaderAdmitted { term, leader });
    }

    pub(super) fn on_reject(&mut self, from: NodeId, term: Term, kind: RejectKind) {
        if let Some(lead) = self.lead.as_mut() {
            lead.confirmed.insert(from);
        }
        match kind {
            RejectKind::Vote if self.cfg.live().is_some() => self.live_reject(from, term),
            RejectKind::Append | RejectKind::Sync | RejectKind::Commit if self.leader == Some(from) => {
                self.cancel_timer(TimerKind::Sync);
            }
            _ => {}
        }
    }
}
