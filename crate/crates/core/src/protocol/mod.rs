//! Message types and the per-node protocol state machine.
//!
//! A [`Node`] consumes [`Input`]s and emits [`Output`]s. It never touches a
//! clock or a socket; the simulator owns time, delivery and randomness.

mod election;
mod node;
mod replication;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::crypto::{Digest, NodeId, Signature};
use crate::live::LiveConfig;
use crate::types::{ClientReceipt, CommitCert, Index, LeaderCert, LogEntry, Prevote, Term, VoteRequest};

pub use node::Node;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct ClientId(pub u32);

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum Endpoint {
    Node(NodeId),
    Client(ClientId),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Node(n) => write!(f, "{n}"),
            Endpoint::Client(c) => write!(f, "c{}", c.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AppendEntries {
    pub entries: Vec<LogEntry>,
    /// Leader signature on the last entry of each term carried, plus the
    /// predecessor's term when the batch opens a new term.
    pub sigs: BTreeMap<Term, Signature>,
    pub lcs: BTreeMap<Term, LeaderCert>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RejectKind {
    Vote,
    Append,
    Commit,
    Sync,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    RequestVote(VoteRequest),
    Vote { term: Term, signature: Signature },
    Reject { term: Term, kind: RejectKind },
    LeaderCert(LeaderCert),
    AppendEntries(AppendEntries),
    Ack { pointer: Digest, signature: Signature },
    /// Follower's latest committed position, asking for everything after it.
    LogSync { term: Term, index: Index, pointer: Digest },
    Commit(CommitCert),
    Committed { index: Index },
    Heartbeat { term: Term },
    Prevote(Prevote),
    PrevoteBundle(Vec<Prevote>),
    ClientTx { client: ClientId, payload: Vec<u8>, second_trial: bool },
}

impl Message {
    /// One-line summary used in transcripts.
    pub fn summary(&self) -> String {
        match self {
            Message::RequestVote(r) => format!("RequestVote t{} ({},{})", r.term, r.freshness.term, r.freshness.index),
            Message::Vote { term, .. } => format!("Vote t{term}"),
            Message::Reject { term, kind } => format!("Reject t{term} {kind:?}"),
            Message::LeaderCert(lc) => format!("LeaderCert t{} {}", lc.term(), lc.leader()),
            Message::AppendEntries(ae) => match (ae.entries.first(), ae.entries.last()) {
                (Some(h), Some(t)) => format!("AppendEntries {}..={} t{}", h.index, t.index, t.term),
                _ => "AppendEntries empty".to_string(),
            },
            Message::Ack { pointer, .. } => format!("Ack {pointer:?}"),
            Message::LogSync { term, index, .. } => format!("LogSync ({term},{index})"),
            Message::Commit(cc) => format!("Commit ({},{})", cc.term, cc.index),
            Message::Committed { index } => format!("Committed {index}"),
            Message::Heartbeat { term } => format!("Heartbeat t{term}"),
            Message::Prevote(p) => format!("Prevote t{}", p.term),
            Message::PrevoteBundle(b) => format!("PrevoteBundle t{} x{}", b.first().map_or(0, |p| p.term), b.len()),
            Message::ClientTx { client, payload, second_trial } => {
                format!("ClientTx c{} {} {}", client.0, hex::encode(payload), if *second_trial { "retry" } else { "first" })
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum TimerKind {
    /// Follower/candidate election timeout in base mode.
    Election,
    /// Leader heartbeat tick.
    Heartbeat,
    /// Live mode: follower has not heard from its leader.
    LeaderSilence,
    /// Live mode: candidate waiting for votes.
    Candidate,
    /// Live mode: voter waiting for a leader certificate.
    Voter,
    /// Live mode: log synchronization request unanswered.
    Sync,
    /// Live mode: re-broadcast an outstanding prevote.
    PrevoteRetry,
    /// Live mode: second-trial request waiting for commitment.
    Trial(u64),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Delay {
    Fixed(u64),
    /// Randomized election timeout drawn by the driver.
    Election,
}

#[derive(Clone, Debug)]
pub enum Input {
    Start,
    Message { from: Endpoint, msg: Message },
    Timer { kind: TimerKind, token: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeEvent {
    BecameCandidate { term: Term },
    LeaderElected { term: Term },
    LeaderAdmitted { term: Term, leader: NodeId },
    Voted { term: Term, candidate: NodeId },
    Committed { index: Index, pointer: Digest },
    Prevoted { term: Term },
    EnteredTerm { term: Term },
}

#[derive(Clone, Debug)]
pub enum Output {
    Send { to: NodeId, msg: Message },
    /// To every node except the sender.
    Broadcast(Message),
    Receipt { client: ClientId, receipt: ClientReceipt },
    Timer { kind: TimerKind, token: u64, delay: Delay },
    Event(NodeEvent),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mode {
    Base,
    Live(LiveConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeConfig {
    pub n: usize,
    pub mode: Mode,
    /// Interval between leader heartbeats.
    pub heartbeat: u64,
}

impl NodeConfig {
    pub fn f(&self) -> usize {
        (self.n - 1) / 2
    }

    pub fn live(&self) -> Option<&LiveConfig> {
        match &self.mode {
            Mode::Live(l) => Some(l),
            Mode::Base => None,
        }
    }
}
