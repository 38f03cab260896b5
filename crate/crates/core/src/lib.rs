//! Accountable Raft.
//!
//! Every log entry is hash-chained and signed by the leader of its term,
//! every vote and acknowledgement is a signature, and commit and leader
//! certificates carry a quorum of them. After a safety violation, an auditor
//! holding the nodes' committed state can name at least one misbehaving node
//! and present evidence that any third party can check.

pub mod adversary;
pub mod audit;
pub mod crypto;
pub mod live;
pub mod protocol;
pub mod sim;
pub mod storage;
pub mod synth;
pub mod types;

pub use crypto::{Digest, KeyPair, KeyRegistry, NodeId, PublicRegistry, Signature};
pub use types::{ClientReceipt, CommitCert, Freshness, LeaderCert, LogEntry, NodeState, Snapshot, VoteRequest};
