//! Builds legitimate signed chains directly, without running the protocol.
//! Used to produce snapshots far larger than a simulation would, and to
//! shape conflicts precisely.

use std::collections::BTreeMap;

use crate::crypto::{Digest, KeyRegistry, NodeId};
use crate::types::{
    assemble_commit_cert, hash_step, Index, LeaderCert, LogEntry, Snapshot, Term, VoteRequest,
};

#[derive(Clone)]
pub struct ChainBuilder<'k> {
    keys: &'k KeyRegistry,
    log: Vec<LogEntry>,
    /// `pointers[i]` is the hash pointer after entry `i`.
    pointers: Vec<Digest>,
    elections: BTreeMap<Term, LeaderCert>,
    term: Term,
}

impl<'k> ChainBuilder<'k> {
    pub fn new(keys: &'k KeyRegistry) -> ChainBuilder<'k> {
        ChainBuilder {
            keys,
            log: vec![LogEntry::init()],
            pointers: vec![Digest::ZERO],
            elections: BTreeMap::new(),
            term: 0,
        }
    }

    pub fn tip(&self) -> Index {
        self.log.len() as Index - 1
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    /// Elects `leader` for `term` on the current tip with the given voters.
    pub fn elect(&mut self, term: Term, leader: NodeId, voters: &[NodeId]) -> &mut Self {
        let tail = &self.log[self.log.len() - 1];
        let request = VoteRequest { leader, term, freshness: tail.freshness(), pointer: self.pointers[tail.index as usize] };
        let d = request.digest();
        let signatures = voters.iter().map(|v| self.keys.keypair(*v).sign(&d)).collect();
        self.elections.insert(term, LeaderCert { request, voters: voters.to_vec(), signatures });
        self.term = term;
        self
    }

    pub fn push(&mut self, payload: Vec<u8>) -> &mut Self {
        let e = LogEntry::new(self.term, self.log.len() as Index, payload);
        let p = hash_step(&self.pointers[self.pointers.len() - 1], &e);
        self.log.push(e);
        self.pointers.push(p);
        self
    }

    /// Appends `count` entries in the current term.
    pub fn append(&mut self, count: usize) -> &mut Self {
        for _ in 0..count {
            let payload = format!("synth-{}-{}", self.term, self.log.len()).into_bytes();
            self.push(payload);
        }
        self
    }

    /// Drops every entry after `index`, as a log synchronization would.
    pub fn truncate(&mut self, index: Index) -> &mut Self {
        self.log.truncate(index as usize + 1);
        self.pointers.truncate(index as usize + 1);
        self
    }

    /// The committed snapshot `node` would hand over, with the tip certified
    /// by `cc_voters`. Leaders sign the last entry of each of their terms.
    pub fn snapshot(&self, node: NodeId, cc_voters: &[NodeId]) -> Snapshot {
        let mut leader_sigs = BTreeMap::new();
        for (i, e) in self.log.iter().enumerate().skip(1) {
            let last_of_term = self.log.get(i + 1).is_none_or(|n| n.term != e.term);
            if last_of_term {
                let leader = self.elections[&e.term].leader();
                leader_sigs.insert(e.term, self.keys.keypair(leader).sign(&self.pointers[i]));
            }
        }
        let cert = (self.tip() > 0).then(|| {
            let tail = &self.log[self.log.len() - 1];
            let p = self.pointers[tail.index as usize];
            let leader = self.elections[&tail.term].leader();
            let acks = cc_voters.iter().map(|v| self.keys.keypair(*v).sign(&p));
            assemble_commit_cert(tail.term, tail.index, p, self.keys.keypair(leader).sign(&p), acks)
        });
        Snapshot { node, log: self.log.clone(), elections: self.elections.clone(), cert, leader_sigs }
    }
}

/// An honest chain of `entries` entries spread evenly over `terms` terms,
/// with leaders in round-robin order and the first `f + 1` nodes voting.
pub fn honest_chain(keys: &KeyRegistry, entries: usize, terms: usize) -> ChainBuilder<'_> {
    let n = keys.len();
    let f = (n - 1) / 2;
    let mut b = ChainBuilder::new(keys);
    let per = entries / terms.max(1);
    for t in 1..=terms {
        let leader = NodeId((t % n) as u64);
        let voters: Vec<NodeId> = (0..=f).map(|k| NodeId(((t + k) % n) as u64)).collect();
        b.elect(t as Term, leader, &voters);
        let count = if t == terms { entries - per * (terms - 1) } else { per };
        b.append(count);
    }
    b
}

/// Two snapshots produced by a follower that certified an entry and then
/// voted for a staler candidate in a later term.
///
/// Node 0 leads term 1 and commits `at` entries with `byzantine` among the
/// certifying voters. Node 1 then wins term 2 on a log missing the last
/// entry, with `byzantine`'s vote, and extends it to `total` entries.
/// Returns `(lagging, leading)` snapshots of nodes 2 and 1.
pub fn bad_vote_pair(keys: &KeyRegistry, at: usize, total: usize, byzantine: NodeId) -> (Snapshot, Snapshot) {
    let n = keys.len();
    let f = (n - 1) / 2;
    assert!(n >= 5 && byzantine.0 >= 3 && (byzantine.0 as usize) < n && at >= 2 && total > at);
    let mut b = ChainBuilder::new(keys);
    b.elect(1, NodeId(0), &(0..=f as u64).map(NodeId).collect::<Vec<_>>());
    b.append(at);
    // Certified by the leader, node 2 and the Byzantine node.
    let mut cc_voters = vec![NodeId(2), byzantine];
    cc_voters.extend((3..n as u64).map(NodeId).filter(|v| *v != byzantine).take(f.saturating_sub(2)));
    let lagging = b.snapshot(NodeId(2), &cc_voters);

    let mut h = b.clone();
    h.truncate(at as Index - 1);
    let mut voters = vec![NodeId(1), byzantine];
    voters.extend((3..n as u64).map(NodeId).filter(|v| *v != byzantine && !cc_voters.contains(v)).take(f - 1));
    h.elect(2, NodeId(1), &voters);
    h.append(total - at + 1);
    let leading = h.snapshot(NodeId(1), &voters);
    (lagging, leading)
}
