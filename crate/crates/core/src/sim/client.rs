//! Simulated client: submits the workload, retries, and keeps receipts.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::crypto::{NodeId, PublicRegistry};
use crate::protocol::{ClientId, Message};
use crate::types::{ClientReceipt, Index, Term};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxRecord {
    #[serde(with = "crate::types::payload_hex")]
    pub payload: Vec<u8>,
    pub submitted: u64,
    /// Time the first valid receipt arrived.
    pub committed: Option<u64>,
    pub index: Option<Index>,
}

impl TxRecord {
    pub fn latency(&self) -> Option<u64> {
        self.committed.map(|c| c - self.submitted)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) enum ClientAction {
    Send { to: NodeId, msg: Message },
    Timer { payload: Vec<u8>, attempt: u32, delay: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Retry {
    /// Resend to the next node after `retry` without a receipt.
    RoundRobin { retry: u64 },
    /// First trial to the leader, then a broadcast second trial every `client`.
    TwoTrial { client: u64 },
}

struct Pending {
    k: usize,
    attempt: u32,
}

pub(crate) struct Client {
    id: ClientId,
    n: usize,
    retry: Retry,
    leader: Option<NodeId>,
    /// Highest term of any leader announcement seen.
    term: Term,
    next_rr: usize,
    pending: BTreeMap<Vec<u8>, Pending>,
    pub records: Vec<TxRecord>,
    pub receipts: Vec<ClientReceipt>,
    seen: BTreeSet<(Vec<u8>, Index)>,
}

impl Client {
    pub fn new(id: ClientId, n: usize, retry: Retry) -> Client {
        Client {
            id,
            n,
            retry,
            leader: None,
            term: 0,
            next_rr: 0,
            pending: BTreeMap::new(),
            records: Vec::new(),
            receipts: Vec::new(),
            seen: BTreeSet::new(),
        }
    }

    fn target(&mut self) -> NodeId {
        match self.leader {
            Some(l) => l,
            None => {
                let t = NodeId(self.next_rr as u64);
                self.next_rr = (self.next_rr + 1) % self.n;
                t
            }
        }
    }

    fn first_trial(&mut self, payload: &[u8], out: &mut Vec<ClientAction>) {
        let to = self.target();
        let Some(p) = self.pending.get_mut(payload) else { return };
        p.attempt += 1;
        let attempt = p.attempt;
        let msg = Message::ClientTx { client: self.id, payload: payload.to_vec(), second_trial: false };
        out.push(ClientAction::Send { to, msg });
        let delay = match self.retry {
            Retry::RoundRobin { retry } => retry,
            Retry::TwoTrial { client } => client,
        };
        out.push(ClientAction::Timer { payload: payload.to_vec(), attempt, delay });
    }

    pub fn submit(&mut self, now: u64, k: usize, payload: Vec<u8>) -> Vec<ClientAction> {
        self.records.push(TxRecord { payload: payload.clone(), submitted: now, committed: None, index: None });
        self.pending.insert(payload.clone(), Pending { k, attempt: 0 });
        let mut out = Vec::new();
        self.first_trial(&payload, &mut out);
        out
    }

    pub fn on_timeout(&mut self, payload: &[u8], attempt: u32) -> Vec<ClientAction> {
        let mut out = Vec::new();
        let Some(p) = self.pending.get_mut(payload) else { return out };
        if p.attempt != attempt {
            return out;
        }
        match self.retry {
            Retry::RoundRobin { .. } => {
                // The believed leader did not answer; try someone else.
                if let Some(l) = self.leader {
                    self.next_rr = (l.0 as usize + 1) % self.n;
                }
                self.leader = None;
                self.first_trial(payload, &mut out);
            }
            Retry::TwoTrial { client } => {
                for i in 0..self.n {
                    let msg = Message::ClientTx { client: self.id, payload: payload.to_vec(), second_trial: true };
                    out.push(ClientAction::Send { to: NodeId(i as u64), msg });
                }
                out.push(ClientAction::Timer { payload: payload.to_vec(), attempt, delay: client });
            }
        }
        out
    }

    /// A node admitted a new leader: resubmit everything still pending.
    pub fn on_leader(&mut self, term: Term, leader: NodeId) -> Vec<ClientAction> {
        let mut out = Vec::new();
        if term <= self.term {
            return out;
        }
        self.term = term;
        self.leader = Some(leader);
        let payloads: Vec<Vec<u8>> = self.pending.keys().cloned().collect();
        for p in payloads {
            self.first_trial(&p, &mut out);
        }
        out
    }

    pub fn on_receipt(&mut self, now: u64, receipt: ClientReceipt, registry: &PublicRegistry, f: usize) {
        if receipt.verify(registry, f).is_err() {
            return;
        }
        let first = receipt.first().clone();
        if let Some(p) = self.pending.remove(&first.payload) {
            let rec = &mut self.records[p.k];
            rec.committed = Some(now);
            rec.index = Some(first.index);
        }
        // Keep one receipt per (payload, position); a second position for the
        // same payload is exactly what a receipt audit needs.
        if self.seen.insert((first.payload, first.index)) {
            self.receipts.push(receipt);
        }
    }
}
