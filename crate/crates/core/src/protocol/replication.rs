//! Log replication, synchronization and commitment.

use std::collections::BTreeMap;

use crate::crypto::{verify_quorum_cert, Digest, NodeId, Signature};
use crate::types::{assemble_commit_cert, hash_step, make_receipt, CommitCert, Index, LogEntry, Role, Term};

use super::node::{Node, Round};
use super::{AppendEntries, ClientId, Delay, Endpoint, Message, NodeEvent, Output, RejectKind, TimerKind};

enum AppendOutcome {
    Accept { pointer: Digest, pred_term: Option<Term> },
    /// Entries already present; re-acknowledge the given position.
    Duplicate(Index),
    Reject { invalid: bool },
    Sync,
}

impl Node {
    pub(super) fn on_client_tx(&mut self, from: Endpoint, client: ClientId, payload: Vec<u8>, second_trial: bool) {
        if self.is_leader() {
            self.leader_accept_tx(client, payload);
            return;
        }
        if second_trial && self.cfg.live().is_some() {
            self.live_arm_trial(&payload);
        }
        if let (Endpoint::Client(_), Some(leader)) = (from, self.leader) {
            self.send(leader, Message::ClientTx { client, payload, second_trial });
        }
    }

    /// Appends a client transaction as leader, or answers from the log if it
    /// is already there.
    pub fn leader_accept_tx(&mut self, client: ClientId, payload: Vec<u8>) {
        if !self.is_leader() {
            return;
        }
        if let Some(idx) = self.find_payload(&payload) {
            if idx <= self.state.commit_index() {
                let cc = self.state.latest_cc.clone().expect("committed index implies a certificate");
                if let Some(receipt) = make_receipt(&self.state, idx, &cc) {
                    self.push(Output::Receipt { client, receipt });
                }
            } else {
                self.wait_for_commit(idx, client);
            }
            return;
        }
        let idx = self.append_as_leader(payload);
        self.wait_for_commit(idx, client);
    }

    /// Appends and signs a new entry in the current term. Starts a round if
    /// none is in flight.
    pub fn append_as_leader(&mut self, payload: Vec<u8>) -> Index {
        let term = self.state.current_term;
        let index = self.state.last_index() + 1;
        let h = self.append_local(LogEntry::new(term, index, payload));
        let sig = self.keys.sign(&h);
        self.state.leader_sigs.insert(term, sig);
        if self.lead.as_ref().is_some_and(|l| l.round.is_none()) {
            self.start_round();
        }
        index
    }

    fn wait_for_commit(&mut self, idx: Index, client: ClientId) {
        if let Some(lead) = self.lead.as_mut() {
            let w = lead.waiting.entry(idx).or_default();
            if !w.contains(&client) {
                w.push(client);
            }
        }
    }

    fn start_round(&mut self) {
        let term = self.state.current_term;
        if self.state.tail().term != term || self.state.last_index() <= self.state.commit_index() {
            return;
        }
        let Some(own) = self.state.leader_sigs.get(&term).cloned() else { return };
        let round = Round { index: self.state.last_index(), pointer: self.state.tip_pointer, own, acks: BTreeMap::new() };
        let Some(lead) = self.lead.as_mut() else { return };
        lead.round = Some(round);
        let peers: Vec<NodeId> = self.peers().collect();
        for p in peers {
            self.send_append(p);
        }
    }

    fn send_append(&mut self, to: NodeId) {
        let Some(lead) = self.lead.as_ref() else { return };
        let from = lead.next_index.get(&to).copied().unwrap_or(1).max(1);
        if from > self.state.last_index() {
            return;
        }
        let ae = self.build_append(from);
        self.send(to, Message::AppendEntries(ae));
    }

    /// Entries `from..=tip` with the signatures and certificates a follower
    /// needs to check them.
    pub fn build_append(&self, from: Index) -> AppendEntries {
        let entries = self.state.log[from as usize..].to_vec();
        let mut sigs = BTreeMap::new();
        let mut lcs = BTreeMap::new();
        for e in &entries {
            if let std::collections::btree_map::Entry::Vacant(v) = sigs.entry(e.term) {
                if let Some(s) = self.state.leader_sigs.get(&e.term) {
                    v.insert(s.clone());
                }
                if let Some(lc) = self.state.election_list.get(&e.term) {
                    lcs.insert(e.term, lc.clone());
                }
            }
        }
        let pred = &self.state.log[from as usize - 1];
        if pred.index > 0 && entries.first().is_some_and(|h| pred.term < h.term) {
            if let Some(s) = self.state.leader_sigs.get(&pred.term) {
                sigs.insert(pred.term, s.clone());
            }
        }
        AppendEntries { entries, sigs, lcs }
    }

    pub(super) fn on_ack(&mut self, from: NodeId, pointer: Digest, sig: Signature) {
        if self.lead.is_none() || sig.signer != from || !self.registry.verify(&sig, &pointer) {
            return;
        }
        let f = self.f();
        let lead = self.lead.as_mut().expect("checked");
        lead.confirmed.insert(from);
        let idx = lead.pointer_index.get(&pointer).copied();
        if let Some(idx) = idx {
            let next = lead.next_index.entry(from).or_insert(idx + 1);
            *next = (*next).max(idx + 1);
        }
        let Some(round) = lead.round.as_mut() else { return };
        if round.pointer != pointer {
            // A follower that synced past the round can never ack it; move
            // the round up to the tip instead.
            if idx.is_some_and(|i| i > round.index) {
                lead.round = None;
                self.start_round();
                if let Some(r) = self.lead.as_mut().and_then(|l| l.round.as_mut()) {
                    if r.pointer == pointer {
                        r.acks.insert(from, sig);
                    }
                }
                self.maybe_commit_round();
            }
            return;
        }
        round.acks.insert(from, sig);
        if round.acks.len() >= f {
            self.commit_round();
        }
    }

    fn maybe_commit_round(&mut self) {
        let f = self.f();
        if self.lead.as_ref().and_then(|l| l.round.as_ref()).is_some_and(|r| r.acks.len() >= f) {
            self.commit_round();
        }
    }

    fn commit_round(&mut self) {
        let Some(round) = self.lead.as_mut().and_then(|l| l.round.take()) else { return };
        let term = self.state.log[round.index as usize].term;
        let cc = assemble_commit_cert(term, round.index, round.pointer, round.own, round.acks.into_values());
        self.install_commit(cc.clone());
        self.broadcast(Message::Commit(cc.clone()));
        let lead = self.lead.as_mut().expect("leader");
        let later = lead.waiting.split_off(&(cc.index + 1));
        let ready = std::mem::replace(&mut lead.waiting, later);
        for (idx, clients) in ready {
            if let Some(receipt) = make_receipt(&self.state, idx, &cc) {
                for client in clients {
                    self.push(Output::Receipt { client, receipt: receipt.clone() });
                }
            }
        }
        if self.state.last_index() > cc.index {
            self.start_round();
        }
    }

    fn install_commit(&mut self, cc: CommitCert) {
        let old = self.state.commit_index();
        self.state.committed_pointer = cc.pointer;
        let (index, pointer) = (cc.index, cc.pointer);
        self.state.latest_cc = Some(cc);
        self.emit(NodeEvent::Committed { index, pointer });
        if self.cfg.live().is_some() {
            self.live_on_commit(old, index);
        }
    }

    pub(super) fn on_committed(&mut self, from: NodeId, index: Index) {
        if let Some(lead) = self.lead.as_mut() {
            lead.confirmed.insert(from);
            let k = lead.committed_known.entry(from).or_insert(0);
            *k = (*k).max(index);
        }
    }

    pub(super) fn on_log_sync(&mut self, from: NodeId, term: Term, index: Index, pointer: Digest) {
        if !self.is_leader() {
            return;
        }
        if let Some(lead) = self.lead.as_mut() {
            lead.confirmed.insert(from);
        }
        let consistent = term <= self.state.current_term
            && index <= self.state.last_index()
            && self.state.log[index as usize].term == term
            && self.state.pointer_at(index) == Some(pointer);
        if !consistent {
            self.send(from, Message::Reject { term: self.state.current_term, kind: RejectKind::Sync });
            return;
        }
        if let Some(lead) = self.lead.as_mut() {
            lead.next_index.insert(from, index + 1);
        }
        if index < self.state.last_index() {
            let ae = self.build_append(index + 1);
            self.send(from, Message::AppendEntries(ae));
        } else if let Some(cc) = self.state.latest_cc.clone() {
            self.send(from, Message::Commit(cc));
        }
    }

    pub(super) fn on_heartbeat(&mut self, from: NodeId, _term: Term) {
        if self.state.role == Role::Follower && self.leader == Some(from) {
            self.leader_contact();
        }
    }

    /// Any valid contact from the current leader restarts the silence timer.
    pub(crate) fn leader_contact(&mut self) {
        match self.cfg.live() {
            None => self.set_timer(TimerKind::Election, Delay::Election),
            Some(l) => {
                let d = l.timers.heart;
                self.set_timer(TimerKind::LeaderSilence, Delay::Fixed(d));
            }
        }
    }

    pub(super) fn on_heartbeat_tick(&mut self) {
        if !self.is_leader() {
            return;
        }
        let term = self.state.current_term;
        self.broadcast(Message::Heartbeat { term });
        let peers: Vec<NodeId> = self.peers().collect();
        let lc = self.state.election_list.get(&term).cloned();
        for p in peers {
            let lead = self.lead.as_ref().expect("leader");
            let unconfirmed = !lead.confirmed.contains(&p);
            let awaiting = lead.round.as_ref().is_some_and(|r| !r.acks.contains_key(&p));
            let behind = self
                .state
                .latest_cc
                .as_ref()
                .is_some_and(|cc| lead.committed_known.get(&p).copied().unwrap_or(0) < cc.index);
            if unconfirmed {
                if let Some(lc) = lc.clone() {
                    self.send(p, Message::LeaderCert(lc));
                }
            }
            if awaiting {
                self.send_append(p);
            } else if behind {
                let cc = self.state.latest_cc.clone().expect("behind implies a certificate");
                self.send(p, Message::Commit(cc));
            }
        }
        let hb = self.cfg.heartbeat;
        self.set_timer(TimerKind::Heartbeat, Delay::Fixed(hb));
    }

    pub(super) fn on_append_entries(&mut self, from: NodeId, ae: AppendEntries) {
        if self.state.role != Role::Follower || self.leader != Some(from) {
            return;
        }
        self.leader_contact();
        self.cancel_timer(TimerKind::Sync);
        match self.check_append(&ae) {
            AppendOutcome::Accept { pointer, pred_term } => {
                for (t, sig) in &ae.sigs {
                    if let Some(lc) = ae.lcs.get(t) {
                        self.state.leader_sigs.insert(*t, sig.clone());
                        self.state.election_list.insert(*t, lc.clone());
                    }
                }
                if let Some(t) = pred_term {
                    self.state.leader_sigs.insert(t, ae.sigs[&t].clone());
                }
                self.splice_local(&ae.entries);
                debug_assert_eq!(self.state.tip_pointer, pointer);
                let signature = self.keys.sign(&pointer);
                self.send(from, Message::Ack { pointer, signature });
            }
            AppendOutcome::Duplicate(idx) => {
                let pointer = self.state.pointer_at(idx).expect("present");
                let signature = self.keys.sign(&pointer);
                self.send(from, Message::Ack { pointer, signature });
            }
            AppendOutcome::Reject { invalid } => {
                self.send(from, Message::Reject { term: self.state.current_term, kind: RejectKind::Append });
                if invalid {
                    self.live_invalid_leader_data();
                }
            }
            AppendOutcome::Sync => self.request_sync(from),
        }
    }

    fn request_sync(&mut self, to: NodeId) {
        let cf = self.state.commit_freshness();
        let pointer = self.state.committed_pointer;
        self.send(to, Message::LogSync { term: cf.term, index: cf.index, pointer });
        if let Some(l) = self.cfg.live() {
            let d = l.timers.heart;
            self.set_timer(TimerKind::Sync, Delay::Fixed(d));
        }
    }

    fn check_append(&self, ae: &AppendEntries) -> AppendOutcome {
        let (Some(head), Some(tail)) = (ae.entries.first(), ae.entries.last()) else {
            return AppendOutcome::Reject { invalid: true };
        };
        let st = &self.state;
        if tail.freshness() <= st.freshness() {
            let present = tail.index <= st.last_index()
                && head.index >= 1
                && ae.entries.iter().all(|e| st.entry(e.index) == Some(e));
            return if present { AppendOutcome::Duplicate(tail.index) } else { AppendOutcome::Reject { invalid: false } };
        }
        let cf = st.commit_freshness();
        if head.index <= cf.index || head.term < cf.term {
            return AppendOutcome::Reject { invalid: false };
        }
        if head.index > st.last_index() + 1 {
            return AppendOutcome::Sync;
        }
        let mut i = head.index - 1;
        let mut t = st.log[i as usize].term;
        let mut h = st.pointer_at(i).expect("cached");
        let mut fit = t <= head.term;
        let mut verified = false;
        let mut pred_term = None;
        // The init entry carries no signature.
        if t < head.term && i > 0 {
            verified = ae
                .sigs
                .get(&t)
                .is_some_and(|s| self.verify_leader_sig(s, &h, st.election_list.get(&t)));
            fit = verified;
            if verified {
                pred_term = Some(t);
            }
        }
        if !fit {
            return if i == cf.index { AppendOutcome::Reject { invalid: false } } else { AppendOutcome::Sync };
        }
        let mut h_prev_term = h;
        for (k, e) in ae.entries.iter().enumerate() {
            if e.index != i + 1 || t > e.term {
                return AppendOutcome::Reject { invalid: true };
            }
            i += 1;
            t = e.term;
            h = hash_step(&h, e);
            let last_of_term = ae.entries.get(k + 1).is_none_or(|next| next.term > t);
            if !last_of_term {
                continue;
            }
            let (Some(sig), Some(lc)) = (ae.sigs.get(&t), ae.lcs.get(&t)) else {
                return AppendOutcome::Reject { invalid: true };
            };
            if self.verify_leader_sig(sig, &h, Some(lc)) {
                verified = true;
            } else if verified {
                return AppendOutcome::Reject { invalid: true };
            } else {
                return AppendOutcome::Sync;
            }
            if lc.term() != t || verify_quorum_cert(lc, &self.registry, self.f()).is_err() {
                return AppendOutcome::Reject { invalid: true };
            }
            match st.election_list.get(&t) {
                Some(mine) if mine != lc => return AppendOutcome::Reject { invalid: true },
                Some(_) => {}
                None if lc.request.pointer != h_prev_term => return AppendOutcome::Reject { invalid: true },
                None => {}
            }
            h_prev_term = h;
        }
        AppendOutcome::Accept { pointer: h, pred_term }
    }

    pub(super) fn on_commit(&mut self, from: NodeId, cc: CommitCert) {
        if self.state.role != Role::Follower || self.leader != Some(from) {
            return;
        }
        self.leader_contact();
        let cf = self.state.commit_freshness();
        let (i, t) = (cc.index, cc.term);
        if i == cf.index && cc.pointer == self.state.committed_pointer {
            self.send(from, Message::Committed { index: i });
            return;
        }
        if i <= cf.index || t < cf.term {
            self.send(from, Message::Reject { term: self.state.current_term, kind: RejectKind::Commit });
            return;
        }
        if i > self.state.last_index() || t > self.state.log[i as usize].term {
            self.request_sync(from);
            return;
        }
        if t < self.state.log[i as usize].term {
            self.send(from, Message::Reject { term: self.state.current_term, kind: RejectKind::Commit });
            return;
        }
        let leader_signed = self
            .state
            .election_list
            .get(&t)
            .is_some_and(|lc| cc.voters.contains(&lc.leader()));
        if Some(cc.pointer) != self.state.pointer_at(i)
            || !leader_signed
            || verify_quorum_cert(&cc, &self.registry, self.f()).is_err()
        {
            self.send(from, Message::Reject { term: self.state.current_term, kind: RejectKind::Commit });
            self.live_invalid_leader_data();
            return;
        }
        self.install_commit(cc);
        self.send(from, Message::Committed { index: i });
    }
}
