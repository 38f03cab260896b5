//! Log entries, certificates and per-node replicated state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crypto::{chain_hash, verify_quorum_cert, CertError, Digest, KeyPair, NodeId, PublicRegistry, QuorumCert, Signature};

/// Largest transaction payload a node accepts from a client.
pub const MAX_PAYLOAD: usize = 1 << 20;

pub type Term = u64;
pub type Index = u64;

#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct LogEntry {
    pub term: Term,
    pub index: Index,
    #[serde(with = "payload_hex")]
    pub payload: Vec<u8>,
}

pub(crate) mod payload_hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

impl LogEntry {
    pub fn new(term: Term, index: Index, payload: impl Into<Vec<u8>>) -> LogEntry {
        LogEntry { term, index, payload: payload.into() }
    }

    /// The sentinel at index 0. It is never hashed; its pointer is [`Digest::ZERO`].
    pub fn init() -> LogEntry {
        LogEntry { term: 0, index: 0, payload: Vec::new() }
    }

    pub fn freshness(&self) -> Freshness {
        Freshness { term: self.term, index: self.index }
    }
}

/// Extends a hash pointer by one entry.
pub fn hash_step(prev: &Digest, entry: &LogEntry) -> Digest {
    chain_hash(prev, entry.term, entry.index, &entry.payload)
}

/// Folds `entries` onto `from`.
pub fn chain_pointer<'a>(entries: impl IntoIterator<Item = &'a LogEntry>, from: Digest) -> Digest {
    entries.into_iter().fold(from, |h, e| hash_step(&h, e))
}

/// `(term, index)` of a log tail, ordered lexicographically.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Default, Serialize, Deserialize)]
pub struct Freshness {
    pub term: Term,
    pub index: Index,
}

impl Freshness {
    pub fn new(term: Term, index: Index) -> Freshness {
        Freshness { term, index }
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct CommitCert {
    pub term: Term,
    pub index: Index,
    pub pointer: Digest,
    pub voters: Vec<NodeId>,
    pub signatures: Vec<Signature>,
}

impl CommitCert {
    pub fn freshness(&self) -> Freshness {
        Freshness::new(self.term, self.index)
    }
}

impl QuorumCert for CommitCert {
    fn signed_digest(&self) -> Digest {
        self.pointer
    }
    fn voters(&self) -> &[NodeId] {
        &self.voters
    }
    fn signatures(&self) -> &[Signature] {
        &self.signatures
    }
}

/// Builds a certificate from the leader's own signature plus follower acks,
/// ordered leader first then by voter id.
pub fn assemble_commit_cert(
    term: Term,
    index: Index,
    pointer: Digest,
    own: Signature,
    acks: impl IntoIterator<Item = Signature>,
) -> CommitCert {
    let mut acks: Vec<Signature> = acks.into_iter().filter(|s| s.signer != own.signer).collect();
    acks.sort_by_key(|s| s.signer);
    acks.dedup_by_key(|s| s.signer);
    let mut signatures = vec![own];
    signatures.extend(acks);
    CommitCert { term, index, pointer, voters: signatures.iter().map(|s| s.signer).collect(), signatures }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct VoteRequest {
    pub leader: NodeId,
    pub term: Term,
    pub freshness: Freshness,
    pub pointer: Digest,
}

impl VoteRequest {
    pub fn digest(&self) -> Digest {
        let mut buf = Vec::with_capacity(64);
        buf.extend_from_slice(&self.leader.0.to_be_bytes());
        buf.extend_from_slice(&self.term.to_be_bytes());
        buf.extend_from_slice(&self.freshness.term.to_be_bytes());
        buf.extend_from_slice(&self.freshness.index.to_be_bytes());
        buf.extend_from_slice(&self.pointer.0);
        Digest::of(&buf)
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct LeaderCert {
    pub request: VoteRequest,
    pub voters: Vec<NodeId>,
    pub signatures: Vec<Signature>,
}

impl LeaderCert {
    pub fn term(&self) -> Term {
        self.request.term
    }

    pub fn leader(&self) -> NodeId {
        self.request.leader
    }
}

impl QuorumCert for LeaderCert {
    fn signed_digest(&self) -> Digest {
        self.request.digest()
    }
    fn voters(&self) -> &[NodeId] {
        &self.voters
    }
    fn signatures(&self) -> &[Signature] {
        &self.signatures
    }
}

pub fn prevote_digest(term: Term) -> Digest {
    let mut buf = b"PREVOTE".to_vec();
    buf.extend_from_slice(&term.to_be_bytes());
    Digest::of(&buf)
}

/// A signed request to move the cluster to `term`.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Prevote {
    pub term: Term,
    pub signature: Signature,
}

impl Prevote {
    pub fn sign(keys: &KeyPair, term: Term) -> Prevote {
        Prevote { term, signature: keys.sign(&prevote_digest(term)) }
    }

    pub fn verify(&self, registry: &PublicRegistry) -> bool {
        registry.verify(&self.signature, &prevote_digest(self.term))
    }
}

/// Proof handed to a client that its entry sits under a commit certificate.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ClientReceipt {
    pub entries: Vec<LogEntry>,
    /// Pointer of the position just before `entries[0]`.
    pub pointer: Digest,
    pub certificate: CommitCert,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReceiptError {
    #[error("receipt carries no entries")]
    Empty,
    #[error("entries are not contiguous")]
    Gap,
    #[error("last entry does not match the certificate position")]
    Position,
    #[error("entries do not hash to the certified pointer")]
    Pointer,
    #[error("certificate: {0}")]
    Cert(#[from] CertError),
}

impl ClientReceipt {
    /// The client's own entry.
    pub fn first(&self) -> &LogEntry {
        &self.entries[0]
    }

    pub fn verify(&self, registry: &PublicRegistry, f: usize) -> Result<(), ReceiptError> {
        let first = self.entries.first().ok_or(ReceiptError::Empty)?;
        if self.entries.iter().enumerate().any(|(k, e)| e.index != first.index + k as u64) {
            return Err(ReceiptError::Gap);
        }
        let last = self.entries.last().expect("non-empty");
        if last.freshness() != self.certificate.freshness() {
            return Err(ReceiptError::Position);
        }
        if chain_pointer(&self.entries, self.pointer) != self.certificate.pointer {
            return Err(ReceiptError::Pointer);
        }
        verify_quorum_cert(&self.certificate, registry, f)?;
        Ok(())
    }
}

pub fn verify_receipt(receipt: &ClientReceipt, registry: &PublicRegistry, f: usize) -> Result<(), ReceiptError> {
    receipt.verify(registry, f)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Role {
    Follower,
    Candidate,
    Leader,
}

/// Persistent replicated state of one node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub id: NodeId,
    pub current_term: Term,
    /// Last vote cast, as `(candidate, term)`.
    pub voted_for: Option<(NodeId, Term)>,
    pub role: Role,
    pub log: Vec<LogEntry>,
    pub tip_pointer: Digest,
    pub committed_pointer: Digest,
    /// Latest leader signature seen per term, over the last entry of that term.
    pub leader_sigs: BTreeMap<Term, Signature>,
    pub latest_cc: Option<CommitCert>,
    pub election_list: BTreeMap<Term, LeaderCert>,
    #[serde(skip)]
    pointers: Vec<Digest>,
}

impl NodeState {
    pub fn new(id: NodeId) -> NodeState {
        NodeState {
            id,
            current_term: 0,
            voted_for: None,
            role: Role::Follower,
            log: vec![LogEntry::init()],
            tip_pointer: Digest::ZERO,
            committed_pointer: Digest::ZERO,
            leader_sigs: BTreeMap::new(),
            latest_cc: None,
            election_list: BTreeMap::new(),
            pointers: vec![Digest::ZERO],
        }
    }

    /// Recomputes the pointer cache, e.g. after deserializing.
    pub fn rebuild_pointers(&mut self) {
        let mut ptrs = Vec::with_capacity(self.log.len());
        ptrs.push(Digest::ZERO);
        for e in &self.log[1..] {
            let next = hash_step(ptrs.last().unwrap(), e);
            ptrs.push(next);
        }
        self.tip_pointer = *ptrs.last().unwrap();
        self.pointers = ptrs;
    }

    pub fn tail(&self) -> &LogEntry {
        self.log.last().expect("log always holds the init entry")
    }

    pub fn last_index(&self) -> Index {
        self.tail().index
    }

    pub fn freshness(&self) -> Freshness {
        self.tail().freshness()
    }

    pub fn entry(&self, index: Index) -> Option<&LogEntry> {
        self.log.get(usize::try_from(index).ok()?)
    }

    pub fn pointer_at(&self, index: Index) -> Option<Digest> {
        self.pointers.get(usize::try_from(index).ok()?).copied()
    }

    pub fn commit_index(&self) -> Index {
        self.latest_cc.as_ref().map_or(0, |c| c.index)
    }

    pub fn commit_freshness(&self) -> Freshness {
        self.latest_cc.as_ref().map_or_else(Freshness::default, CommitCert::freshness)
    }

    pub fn append(&mut self, entry: LogEntry) -> Digest {
        debug_assert_eq!(entry.index, self.last_index() + 1);
        let h = hash_step(&self.tip_pointer, &entry);
        self.log.push(entry);
        self.pointers.push(h);
        self.tip_pointer = h;
        h
    }

    /// Drops every entry after `index`.
    pub fn truncate_after(&mut self, index: Index) {
        let keep = index as usize + 1;
        self.log.truncate(keep);
        self.pointers.truncate(keep);
        self.tip_pointer = *self.pointers.last().unwrap();
    }

    /// Replaces the suffix starting at `entries[0].index` with `entries`.
    pub fn splice(&mut self, entries: &[LogEntry]) {
        let Some(head) = entries.first() else { return };
        self.truncate_after(head.index - 1);
        for e in entries {
            self.append(e.clone());
        }
    }

    /// The committed view an auditor receives from this node.
    pub fn snapshot(&self) -> Snapshot {
        let ci = self.commit_index();
        let log = self.log[..=ci as usize].to_vec();
        let mut leader_sigs = BTreeMap::new();
        let mut terms: Vec<Term> = log[1..].iter().map(|e| e.term).collect();
        terms.dedup();
        for t in terms {
            let from_cert = self.latest_cc.as_ref().filter(|c| c.term == t).and_then(|c| {
                let leader = self.election_list.get(&t)?.leader();
                c.signatures.iter().find(|s| s.signer == leader).cloned()
            });
            if let Some(sig) = from_cert.or_else(|| self.leader_sigs.get(&t).cloned()) {
                leader_sigs.insert(t, sig);
            }
        }
        Snapshot {
            node: self.id,
            log,
            elections: self.election_list.clone(),
            cert: self.latest_cc.clone(),
            leader_sigs,
        }
    }
}

/// What a node hands to the auditor: its committed log prefix, election
/// list, latest commit certificate and leader signatures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot<L = Vec<LogEntry>> {
    pub node: NodeId,
    pub log: L,
    pub elections: BTreeMap<Term, LeaderCert>,
    pub cert: Option<CommitCert>,
    pub leader_sigs: BTreeMap<Term, Signature>,
}

impl<L> Snapshot<L> {
    pub fn commit_index(&self) -> Index {
        self.cert.as_ref().map_or(0, |c| c.index)
    }

    pub fn commit_term(&self) -> Term {
        self.cert.as_ref().map_or(0, |c| c.term)
    }

    pub fn with_log<M>(self, log: M) -> Snapshot<M> {
        Snapshot { node: self.node, log, elections: self.elections, cert: self.cert, leader_sigs: self.leader_sigs }
    }
}

/// Receipt for the entries `start..=cc.index` of `state`.
pub fn make_receipt(state: &NodeState, start: Index, cc: &CommitCert) -> Option<ClientReceipt> {
    if start == 0 || start > cc.index || cc.index > state.last_index() {
        return None;
    }
    Some(ClientReceipt {
        entries: state.log[start as usize..=cc.index as usize].to_vec(),
        pointer: state.pointer_at(start - 1)?,
        certificate: cc.clone(),
    })
}
