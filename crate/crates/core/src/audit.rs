//! Offline forensics over node snapshots.
//!
//! The auditor first checks that each node's data is legitimate (a signed,
//! hash-chained log ending at a valid commit certificate, with a valid leader
//! certificate for every term), then compares pairs of nodes. When two
//! committed logs conflict it names nodes that must have misbehaved and
//! returns evidence that anyone holding the public keys can check.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::crypto::{verify_quorum_cert, Digest, NodeId, PublicRegistry, QuorumCert, Signature};
use crate::types::{
    chain_pointer, hash_step, ClientReceipt, CommitCert, Freshness, Index, LeaderCert, LogEntry, ReceiptError, Snapshot,
    Term,
};

/// Read access to a committed log list, in memory or on disk.
pub trait LogView {
    /// Number of entries, InitLog included.
    fn len(&self) -> u64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn entry(&self, index: Index) -> Option<LogEntry>;

    /// Visits entries in order from `from` until `visit` returns false.
    fn scan(&self, from: Index, visit: &mut dyn FnMut(&LogEntry) -> bool) {
        let mut i = from;
        while let Some(e) = self.entry(i) {
            if !visit(&e) {
                break;
            }
            i += 1;
        }
    }

    /// Backing files opened so far; zero for in-memory logs.
    fn chunk_reads(&self) -> u64 {
        0
    }
}

impl LogView for Vec<LogEntry> {
    fn len(&self) -> u64 {
        self.as_slice().len() as u64
    }

    fn entry(&self, index: Index) -> Option<LogEntry> {
        self.get(index as usize).cloned()
    }

    fn scan(&self, from: Index, visit: &mut dyn FnMut(&LogEntry) -> bool) {
        for e in self.iter().skip(from as usize) {
            if !visit(e) {
                break;
            }
        }
    }
}

/// Why a snapshot is not legitimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(tag = "code", rename_all = "kebab-case")]
pub enum Reason {
    #[error("log does not start with InitLog")]
    InitLog,
    #[error("entry at position {position} claims index {index}")]
    Index { position: Index, index: Index },
    #[error("term decreases at index {index}")]
    TermOrder { index: Index },
    #[error("term {term} lacks a leader certificate or leader signature")]
    Untraced { term: Term },
    #[error("commit certificate is missing, invalid or not at the log tip")]
    CommitCert,
    #[error("hash chain does not reach the certified pointer")]
    HashChain,
    #[error("leader signature for term {term} does not verify")]
    LeaderSignature { term: Term },
    #[error("leader certificate of term {term} does not match the preceding entry")]
    ElectionLink { term: Term },
    #[error("leader certificate of term {term} is invalid")]
    LeaderCert { term: Term },
}

impl Reason {
    pub fn code(&self) -> &'static str {
        match self {
            Reason::InitLog => "init-log",
            Reason::Index { .. } => "index",
            Reason::TermOrder { .. } => "term-order",
            Reason::Untraced { .. } => "untraced",
            Reason::CommitCert => "commit-cert",
            Reason::HashChain => "hash-chain",
            Reason::LeaderSignature { .. } => "leader-signature",
            Reason::ElectionLink { .. } => "election-link",
            Reason::LeaderCert { .. } => "leader-cert",
        }
    }
}

/// A snapshot that passed the integrity check, with its election list split
/// into terms that appear in the log and terms that do not.
#[derive(Debug)]
pub struct Legit<'a, L> {
    pub snap: &'a Snapshot<L>,
    pub elections: BTreeMap<Term, LeaderCert>,
    pub unused: BTreeMap<Term, LeaderCert>,
}

impl<L> Legit<'_, L> {
    pub fn node(&self) -> NodeId {
        self.snap.node
    }
}

/// A leader-signed tip together with the entries leading to it from `base`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedChain {
    pub base: Digest,
    pub entries: Vec<LogEntry>,
    pub signature: Signature,
}

impl SignedChain {
    fn tip(&self) -> Digest {
        chain_pointer(&self.entries, self.base)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Evidence {
    /// Two leader certificates for one term over different requests.
    DoubleVote { term: Term, a: LeaderCert, b: LeaderCert },
    /// The leader of `term` signed two chains that disagree at the first
    /// index of both branches.
    ForkedTerm { term: Term, leader_cert: LeaderCert, a: SignedChain, b: SignedChain },
    /// Voters certified `tip` and then elected a leader of a later term whose
    /// request is staler than `tip`.
    IllegalVotePair { cc: CommitCert, tip: LogEntry, base: Digest, lc: LeaderCert },
    /// The node's own data failed the integrity check.
    IllegitimateData { node: NodeId, reason: Reason },
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum EvidenceError {
    #[error("certificate invalid: {0}")]
    Cert(#[from] crate::crypto::CertError),
    #[error("evidence does not refer to the claimed term")]
    Term,
    #[error("certificates do not conflict")]
    NoConflict,
    #[error("branch is empty or not contiguous")]
    Branch,
    #[error("signature is not the leader's or does not verify")]
    Signature,
    #[error("certified entry does not hash to the certificate pointer")]
    Pointer,
    #[error("no node signed both certificates")]
    EmptyIntersection,
}

fn overlap(a: &[NodeId], b: &[NodeId]) -> BTreeSet<NodeId> {
    let b: BTreeSet<&NodeId> = b.iter().collect();
    a.iter().filter(|v| b.contains(v)).copied().collect()
}

fn contiguous(entries: &[LogEntry]) -> bool {
    !entries.is_empty() && entries.windows(2).all(|w| w[1].index == w[0].index + 1)
}

impl Evidence {
    pub fn kind(&self) -> &'static str {
        match self {
            Evidence::DoubleVote { .. } => "double-vote",
            Evidence::ForkedTerm { .. } => "forked-term",
            Evidence::IllegalVotePair { .. } => "illegal-vote-pair",
            Evidence::IllegitimateData { .. } => "illegitimate-data",
        }
    }

    /// Rechecks the evidence from scratch and returns the nodes it convicts.
    /// Illegitimate data is proven by the snapshot itself, which is not part
    /// of the evidence; it convicts its node unconditionally.
    pub fn verify(&self, registry: &PublicRegistry, f: usize) -> Result<BTreeSet<NodeId>, EvidenceError> {
        match self {
            Evidence::DoubleVote { term, a, b } => {
                verify_quorum_cert(a, registry, f)?;
                verify_quorum_cert(b, registry, f)?;
                if a.term() != *term || b.term() != *term {
                    return Err(EvidenceError::Term);
                }
                if a.request == b.request {
                    return Err(EvidenceError::NoConflict);
                }
                nonempty(overlap(&a.voters, &b.voters))
            }
            Evidence::ForkedTerm { term, leader_cert, a, b } => {
                verify_quorum_cert(leader_cert, registry, f)?;
                if leader_cert.term() != *term {
                    return Err(EvidenceError::Term);
                }
                let leader = leader_cert.leader();
                for branch in [a, b] {
                    if !contiguous(&branch.entries) {
                        return Err(EvidenceError::Branch);
                    }
                    if branch.entries.last().map(|e| e.term) != Some(*term) {
                        return Err(EvidenceError::Term);
                    }
                    if branch.signature.signer != leader || !registry.verify(&branch.signature, &branch.tip()) {
                        return Err(EvidenceError::Signature);
                    }
                }
                if a.entries[0].index != b.entries[0].index
                    || hash_step(&a.base, &a.entries[0]) == hash_step(&b.base, &b.entries[0])
                {
                    return Err(EvidenceError::NoConflict);
                }
                Ok(BTreeSet::from([leader]))
            }
            Evidence::IllegalVotePair { cc, tip, base, lc } => {
                verify_quorum_cert(cc, registry, f)?;
                verify_quorum_cert(lc, registry, f)?;
                if hash_step(base, tip) != cc.pointer {
                    return Err(EvidenceError::Pointer);
                }
                if lc.term() <= tip.term {
                    return Err(EvidenceError::Term);
                }
                if lc.request.freshness >= tip.freshness() {
                    return Err(EvidenceError::NoConflict);
                }
                nonempty(overlap(&cc.voters, &lc.voters))
            }
            Evidence::IllegitimateData { node, .. } => Ok(BTreeSet::from([*node])),
        }
    }
}

fn nonempty(set: BTreeSet<NodeId>) -> Result<BTreeSet<NodeId>, EvidenceError> {
    if set.is_empty() {
        Err(EvidenceError::EmptyIntersection)
    } else {
        Ok(set)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditVerdict {
    pub culprits: BTreeSet<NodeId>,
    pub evidence: Vec<Evidence>,
}

impl AuditVerdict {
    pub fn consistent() -> AuditVerdict {
        AuditVerdict::default()
    }

    fn convict(culprits: BTreeSet<NodeId>, evidence: Evidence) -> AuditVerdict {
        AuditVerdict { culprits, evidence: vec![evidence] }
    }

    pub fn is_consistent(&self) -> bool {
        self.culprits.is_empty()
    }

    pub fn merge(&mut self, other: AuditVerdict) {
        self.culprits.extend(other.culprits);
        for e in other.evidence {
            if !self.evidence.contains(&e) {
                self.evidence.push(e);
            }
        }
    }

    pub fn evidence_type(&self) -> &'static str {
        self.evidence.first().map_or("consistent", Evidence::kind)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PhaseTimings {
    pub integrity: Duration,
    pub consistency: Duration,
    pub receipts: Duration,
}

/// Work counters for one audit run. `longest_chain`, `elections` and
/// `branches` are the sizes the cost depends on; the rest count operations.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditStats {
    pub longest_chain: u64,
    pub elections: u64,
    pub branches: u64,
    pub hash_steps: u64,
    pub sig_verifications: u64,
    pub entry_reads: u64,
    pub chunk_reads: u64,
    /// Wall-clock, kept out of reports so they stay reproducible.
    #[serde(skip)]
    pub timings: PhaseTimings,
}

impl AuditStats {
    /// Total counted operations.
    pub fn cost(&self) -> u64 {
        self.hash_steps + self.sig_verifications + self.entry_reads
    }
}

/// `{culprits, evidence_type, evidence, stats}` as written by the CLI.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub culprits: BTreeSet<NodeId>,
    pub evidence_type: String,
    pub evidence: Vec<Evidence>,
    pub stats: AuditStats,
}

impl AuditReport {
    pub fn new(verdict: AuditVerdict, stats: AuditStats) -> AuditReport {
        AuditReport {
            evidence_type: verdict.evidence_type().to_string(),
            culprits: verdict.culprits,
            evidence: verdict.evidence,
            stats,
        }
    }

    pub fn verdict(&self) -> AuditVerdict {
        AuditVerdict { culprits: self.culprits.clone(), evidence: self.evidence.clone() }
    }
}

/// Leader certificates gathered from every node, per term.
pub type LeaderCertPool = BTreeMap<Term, Vec<LeaderCert>>;

pub fn leader_cert_pool<L>(snaps: &[Snapshot<L>]) -> LeaderCertPool {
    let mut pool = LeaderCertPool::new();
    for s in snaps {
        for (t, lc) in &s.elections {
            let v = pool.entry(*t).or_default();
            if !v.contains(lc) {
                v.push(lc.clone());
            }
        }
    }
    pool
}

pub struct Auditor<'r> {
    registry: &'r PublicRegistry,
    f: usize,
    pub stats: AuditStats,
}

impl<'r> Auditor<'r> {
    pub fn new(registry: &'r PublicRegistry, f: usize) -> Auditor<'r> {
        Auditor { registry, f, stats: AuditStats::default() }
    }

    fn cert_ok<C: QuorumCert + ?Sized>(&mut self, cert: &C) -> bool {
        self.stats.sig_verifications += cert.signatures().len() as u64;
        verify_quorum_cert(cert, self.registry, self.f).is_ok()
    }

    fn sig_ok(&mut self, sig: &Signature, digest: &Digest) -> bool {
        self.stats.sig_verifications += 1;
        self.registry.verify(sig, digest)
    }

    fn read<L: LogView>(&mut self, log: &L, index: Index) -> Option<LogEntry> {
        let before = log.chunk_reads();
        self.stats.entry_reads += 1;
        let e = log.entry(index);
        self.stats.chunk_reads += log.chunk_reads() - before;
        e
    }

    fn read_range<L: LogView>(&mut self, log: &L, from: Index, to: Index) -> Vec<LogEntry> {
        let before = log.chunk_reads();
        let mut out = Vec::new();
        if from <= to {
            log.scan(from, &mut |e| {
                out.push(e.clone());
                e.index < to
            });
        }
        self.stats.entry_reads += out.len() as u64;
        self.stats.chunk_reads += log.chunk_reads() - before;
        out
    }

    /// Checks that a snapshot is legitimate data. Cost is linear in the log
    /// length plus the number of elections.
    pub fn check_integrity<'a, L: LogView>(&mut self, snap: &'a Snapshot<L>) -> Result<Legit<'a, L>, Reason> {
        let start = Instant::now();
        let r = self.integrity(snap);
        self.stats.timings.integrity += start.elapsed();
        r
    }

    fn integrity<'a, L: LogView>(&mut self, snap: &'a Snapshot<L>) -> Result<Legit<'a, L>, Reason> {
        let log = &snap.log;
        self.stats.longest_chain = self.stats.longest_chain.max(log.len().saturating_sub(1));
        if self.read(log, 0) != Some(LogEntry::init()) {
            return Err(Reason::InitLog);
        }

        // One pass over the log: structure, traceability and the hash chain.
        // Remember where each term starts and ends.
        struct Span {
            term: Term,
            before: Freshness,
            base: Digest,
            end: Index,
            tip: Digest,
        }
        let mut spans: Vec<Span> = Vec::new();
        let mut h = Digest::ZERO;
        let mut pos: Index = 0;
        let mut prev_term: Term = 0;
        let mut failure = None;
        let before = log.chunk_reads();
        log.scan(1, &mut |e| {
            pos += 1;
            if e.index != pos {
                failure = Some(Reason::Index { position: pos, index: e.index });
                return false;
            }
            if e.term < prev_term {
                failure = Some(Reason::TermOrder { index: pos });
                return false;
            }
            if e.term > prev_term || spans.is_empty() {
                if !snap.elections.contains_key(&e.term) || !snap.leader_sigs.contains_key(&e.term) {
                    failure = Some(Reason::Untraced { term: e.term });
                    return false;
                }
                spans.push(Span { term: e.term, before: Freshness::new(prev_term, pos - 1), base: h, end: pos, tip: h });
            }
            h = hash_step(&h, e);
            let span = spans.last_mut().expect("span opened above");
            span.end = pos;
            span.tip = h;
            prev_term = e.term;
            true
        });
        self.stats.entry_reads += pos;
        self.stats.hash_steps += pos;
        self.stats.chunk_reads += log.chunk_reads() - before;
        if let Some(r) = failure {
            return Err(r);
        }

        match &snap.cert {
            None if pos == 0 => {}
            None => return Err(Reason::CommitCert),
            Some(cc) => {
                if !self.cert_ok(cc) || cc.index != pos || cc.term != prev_term {
                    return Err(Reason::CommitCert);
                }
                if cc.pointer != h {
                    return Err(Reason::HashChain);
                }
            }
        }

        for s in &spans {
            let leader = snap.elections[&s.term].leader();
            let sig = &snap.leader_sigs[&s.term];
            if sig.signer != leader || !self.sig_ok(sig, &s.tip) {
                return Err(Reason::LeaderSignature { term: s.term });
            }
            let req = &snap.elections[&s.term].request;
            if req.freshness != s.before || req.pointer != s.base {
                return Err(Reason::ElectionLink { term: s.term });
            }
        }

        let used: BTreeSet<Term> = spans.iter().map(|s| s.term).collect();
        let mut elections = BTreeMap::new();
        let mut unused = BTreeMap::new();
        for (t, lc) in &snap.elections {
            if lc.term() != *t || !self.cert_ok(lc) {
                return Err(Reason::LeaderCert { term: *t });
            }
            if used.contains(t) {
                elections.insert(*t, lc.clone());
            } else {
                unused.insert(*t, lc.clone());
            }
        }
        Ok(Legit { snap, elections, unused })
    }

    /// Pointer of the entry just before `index` on `view`'s chain, hashed
    /// forward from the election request of that entry's term.
    fn pointer_before<L: LogView>(&mut self, view: &Legit<'_, L>, index: Index) -> Option<Digest> {
        let term = self.read(&view.snap.log, index)?.term;
        let req = &view.elections.get(&term)?.request;
        let (mut p, from) = (req.pointer, req.freshness.index + 1);
        if from < index {
            for e in self.read_range(&view.snap.log, from, index - 1) {
                p = hash_step(&p, &e);
                self.stats.hash_steps += 1;
            }
        }
        Some(p)
    }

    /// The chain from `from` to `tip` on `view`, signed by the leader of `term`.
    fn signed_branch<L: LogView>(&mut self, view: &Legit<'_, L>, term: Term, from: Index, tip: Index) -> Option<SignedChain> {
        Some(SignedChain {
            base: self.pointer_before(view, from)?,
            entries: self.read_range(&view.snap.log, from, tip),
            signature: view.snap.leader_sigs.get(&term)?.clone(),
        })
    }

    fn forked_term<L: LogView>(
        &mut self,
        term: Term,
        a: (&Legit<'_, L>, Index),
        b: (&Legit<'_, L>, Index),
        from: Index,
    ) -> AuditVerdict {
        let (Some(lc), Some(ca), Some(cb)) = (
            a.0.elections.get(&term).cloned(),
            self.signed_branch(a.0, term, from, a.1),
            self.signed_branch(b.0, term, from, b.1),
        ) else {
            return AuditVerdict::consistent();
        };
        AuditVerdict::convict(BTreeSet::from([lc.leader()]), Evidence::ForkedTerm { term, leader_cert: lc, a: ca, b: cb })
    }

    /// Pairwise consistency of two legitimate snapshots.
    pub fn audit_pair<L: LogView>(&mut self, u: &Legit<'_, L>, v: &Legit<'_, L>) -> AuditVerdict {
        let start = Instant::now();
        let r = self.pair(u, v);
        self.stats.timings.consistency += start.elapsed();
        r
    }

    fn pair<L: LogView>(&mut self, u: &Legit<'_, L>, v: &Legit<'_, L>) -> AuditVerdict {
        // Case 0: one term, two different elections.
        for (t, a) in &u.elections {
            if let Some(b) = v.elections.get(t) {
                if a.request != b.request {
                    let culprits = overlap(&a.voters, &b.voters);
                    return AuditVerdict::convict(culprits, Evidence::DoubleVote { term: *t, a: a.clone(), b: b.clone() });
                }
            }
        }

        let (iu, iv) = (u.snap.commit_index(), v.snap.commit_index());
        let m = iu.min(iv);
        if self.read(&u.snap.log, m) == self.read(&v.snap.log, m) {
            return AuditVerdict::consistent();
        }

        // Case 1: both certificates from the same term.
        let (tu, tv) = (u.snap.commit_term(), v.snap.commit_term());
        if tu == tv {
            return self.forked_term(tu, (u, iu), (v, iv), m);
        }

        let (h, l) = if tu > tv { (u, v) } else { (v, u) };
        let (tl, il) = (l.snap.commit_term(), l.snap.commit_index());
        let Some((_, next)) = h.elections.range(tl + 1..).next() else {
            return AuditVerdict::consistent();
        };
        let next = next.clone();

        // Case 2: h's chain holds entries of tl that disagree with l's.
        if h.elections.contains_key(&tl) {
            let j = next.request.freshness.index;
            let lj = if j <= il { self.read(&l.snap.log, j) } else { None };
            if lj != self.read(&h.snap.log, j) {
                return self.forked_term(tl, (l, il), (h, j), j.min(il));
            }
        }

        // Cases 3 and 4: someone certified l's tip and elected a staler leader.
        let Some(cc) = l.snap.cert.clone() else { return AuditVerdict::consistent() };
        let (Some(tip), Some(base)) = (self.read(&l.snap.log, il), self.pointer_before(l, il)) else {
            return AuditVerdict::consistent();
        };
        let culprits = overlap(&next.voters, &cc.voters);
        AuditVerdict::convict(culprits, Evidence::IllegalVotePair { cc, tip, base, lc: next })
    }

    fn sort_out<'a, L: LogView>(&mut self, snaps: &'a [Snapshot<L>]) -> (Vec<Legit<'a, L>>, AuditVerdict) {
        let terms: BTreeSet<Term> = snaps.iter().flat_map(|s| s.elections.keys().copied()).collect();
        self.stats.elections = terms.len() as u64;
        let mut legit = Vec::new();
        let mut bad = AuditVerdict::consistent();
        for s in snaps {
            match self.check_integrity(s) {
                Ok(l) => legit.push(l),
                Err(reason) => bad.merge(AuditVerdict::convict(
                    BTreeSet::from([s.node]),
                    Evidence::IllegitimateData { node: s.node, reason },
                )),
            }
        }
        (legit, bad)
    }

    /// Index of the node with the longest committed log, lowest id on ties.
    fn longest<L: LogView>(views: &[&Legit<'_, L>]) -> usize {
        let mut best = 0;
        for (i, v) in views.iter().enumerate() {
            let (len, best_len) = (v.snap.log.len(), views[best].snap.log.len());
            if len > best_len || (len == best_len && v.node() < views[best].node()) {
                best = i;
            }
        }
        best
    }

    /// Stops at the first illegitimate node or the first conflicting pair.
    pub fn audit_all_early<L: LogView>(&mut self, snaps: &[Snapshot<L>]) -> AuditVerdict {
        let terms: BTreeSet<Term> = snaps.iter().flat_map(|s| s.elections.keys().copied()).collect();
        self.stats.elections = terms.len() as u64;
        let mut legit = Vec::new();
        for s in snaps {
            match self.check_integrity(s) {
                Ok(l) => legit.push(l),
                Err(reason) => {
                    return AuditVerdict::convict(
                        BTreeSet::from([s.node]),
                        Evidence::IllegitimateData { node: s.node, reason },
                    )
                }
            }
        }
        let views: Vec<&Legit<'_, L>> = legit.iter().collect();
        if views.is_empty() {
            return AuditVerdict::consistent();
        }
        let w = Self::longest(&views);
        self.stats.branches = 1;
        for (i, v) in views.iter().enumerate() {
            if i != w {
                let r = self.audit_pair(v, views[w]);
                if !r.is_consistent() {
                    return r;
                }
            }
        }
        AuditVerdict::consistent()
    }

    /// Exhausts the data: every node in conflict with the current longest
    /// log is audited again among its own group until one node remains.
    pub fn audit_all_full<L: LogView>(&mut self, snaps: &[Snapshot<L>]) -> AuditVerdict {
        let (legit, mut verdict) = self.sort_out(snaps);
        let mut group: Vec<&Legit<'_, L>> = legit.iter().collect();
        while group.len() > 1 {
            self.stats.branches += 1;
            let w = Self::longest(&group);
            let mut rest = Vec::new();
            for (i, v) in group.iter().enumerate() {
                if i == w {
                    continue;
                }
                let r = self.audit_pair(v, group[w]);
                if !r.is_consistent() {
                    rest.push(*v);
                    verdict.merge(r);
                }
            }
            group = rest;
        }
        verdict
    }

    /// Audits a client receipt against one node's legitimate data. `pool`
    /// supplies leader certificates the node itself may not hold.
    pub fn audit_receipt<L: LogView>(
        &mut self,
        receipt: &ClientReceipt,
        node: &Legit<'_, L>,
        pool: &LeaderCertPool,
    ) -> Result<AuditVerdict, ReceiptError> {
        let start = Instant::now();
        self.stats.sig_verifications += receipt.certificate.signatures.len() as u64;
        self.stats.hash_steps += receipt.entries.len() as u64;
        receipt.verify(self.registry, self.f)?;
        let r = self.receipt(receipt, node, pool);
        self.stats.timings.receipts += start.elapsed();
        Ok(r)
    }

    fn receipt<L: LogView>(&mut self, receipt: &ClientReceipt, node: &Legit<'_, L>, pool: &LeaderCertPool) -> AuditVerdict {
        let log = &node.snap.log;
        let cc = &receipt.certificate;
        let s = receipt.first().index;
        let (c, tc) = (cc.index, cc.term);
        let (i_n, t_n) = (node.snap.commit_index(), node.snap.commit_term());
        if i_n < s {
            return AuditVerdict::consistent();
        }
        let m = c.min(i_n);
        let mut diverge = None;
        for (k, e) in self.read_range(log, s, m).into_iter().enumerate() {
            if e != receipt.entries[k] {
                diverge = Some(s + k as Index);
                break;
            }
        }
        let d = match diverge {
            Some(d) => d,
            None if self.pointer_before(node, s) == Some(receipt.pointer) => return AuditVerdict::consistent(),
            None => s,
        };

        // The receipt's own chain from `d` to its certified tip.
        let receipt_branch = |leader: NodeId| -> Option<SignedChain> {
            let skip = (d - s) as usize;
            let signature = cc.signatures.iter().find(|sig| sig.signer == leader)?.clone();
            Some(SignedChain {
                base: chain_pointer(&receipt.entries[..skip], receipt.pointer),
                entries: receipt.entries[skip..].to_vec(),
                signature,
            })
        };
        let fork = |me: &mut Self, term: Term, node_tip: Index| -> AuditVerdict {
            let Some(lc) = node.elections.get(&term).cloned() else { return AuditVerdict::consistent() };
            let (Some(a), Some(b)) = (receipt_branch(lc.leader()), me.signed_branch(node, term, d, node_tip)) else {
                return AuditVerdict::consistent();
            };
            AuditVerdict::convict(BTreeSet::from([lc.leader()]), Evidence::ForkedTerm { term, leader_cert: lc, a, b })
        };

        if tc == t_n {
            return fork(self, tc, i_n);
        }
        if tc > t_n {
            // Voters of the node's certificate also elected the receipt's leader.
            let Some(node_cc) = node.snap.cert.clone() else { return AuditVerdict::consistent() };
            let (Some(tip), Some(base)) = (self.read(log, i_n), self.pointer_before(node, i_n)) else {
                return AuditVerdict::consistent();
            };
            for lc in pool.get(&tc).into_iter().flatten() {
                if lc.term() == tc && lc.request.freshness < tip.freshness() && self.cert_ok(lc) {
                    let culprits = overlap(&node_cc.voters, &lc.voters);
                    return AuditVerdict::convict(
                        culprits,
                        Evidence::IllegalVotePair { cc: node_cc, tip, base, lc: lc.clone() },
                    );
                }
            }
            return AuditVerdict::consistent();
        }

        // The node moved past tc: its first later election either ran on a
        // staler log than the receipt certifies, or tc itself was forked.
        let Some((_, next)) = node.elections.range(tc + 1..).next() else { return AuditVerdict::consistent() };
        let next = next.clone();
        let tip = receipt.entries.last().expect("verified receipts are non-empty").clone();
        if next.request.freshness < tip.freshness() {
            let base = chain_pointer(&receipt.entries[..receipt.entries.len() - 1], receipt.pointer);
            let culprits = overlap(&cc.voters, &next.voters);
            return AuditVerdict::convict(culprits, Evidence::IllegalVotePair { cc: cc.clone(), tip, base, lc: next });
        }
        fork(self, tc, next.request.freshness.index)
    }
}

/// Integrity-checks `snap` alone.
pub fn check_integrity<'a, L: LogView>(
    snap: &'a Snapshot<L>,
    registry: &PublicRegistry,
    f: usize,
) -> Result<Legit<'a, L>, Reason> {
    Auditor::new(registry, f).check_integrity(snap)
}

/// Integrity-checks both snapshots, then compares them.
pub fn audit_pair<L: LogView>(u: &Snapshot<L>, v: &Snapshot<L>, registry: &PublicRegistry, f: usize) -> AuditVerdict {
    let mut a = Auditor::new(registry, f);
    let pair = [u, v].map(|s| a.check_integrity(s).map_err(|r| (s.node, r)));
    match pair {
        [Ok(lu), Ok(lv)] => a.audit_pair(&lu, &lv),
        [Err((node, reason)), _] | [_, Err((node, reason))] => {
            AuditVerdict::convict(BTreeSet::from([node]), Evidence::IllegitimateData { node, reason })
        }
    }
}

pub fn audit_all_early<L: LogView>(snaps: &[Snapshot<L>], registry: &PublicRegistry, f: usize) -> AuditReport {
    let mut a = Auditor::new(registry, f);
    let v = a.audit_all_early(snaps);
    AuditReport::new(v, a.stats)
}

pub fn audit_all_full<L: LogView>(snaps: &[Snapshot<L>], registry: &PublicRegistry, f: usize) -> AuditReport {
    let mut a = Auditor::new(registry, f);
    let v = a.audit_all_full(snaps);
    AuditReport::new(v, a.stats)
}

/// Receipts audited against a cluster, with the ones that failed
/// verification listed by position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiptAudit {
    pub report: AuditReport,
    pub rejected: Vec<(usize, String)>,
}

/// Audits each receipt against every legitimate snapshot, with leader
/// certificates pooled from all of them. Receipts that do not verify are
/// rejected without audit.
pub fn audit_receipts<L: LogView>(
    receipts: &[ClientReceipt],
    snaps: &[Snapshot<L>],
    registry: &PublicRegistry,
    f: usize,
) -> ReceiptAudit {
    let mut a = Auditor::new(registry, f);
    let pool = leader_cert_pool(snaps);
    let legit: Vec<Legit<'_, L>> = snaps.iter().filter_map(|s| a.check_integrity(s).ok()).collect();
    let mut verdict = AuditVerdict::consistent();
    let mut rejected = Vec::new();
    'receipts: for (k, r) in receipts.iter().enumerate() {
        for l in &legit {
            match a.audit_receipt(r, l, &pool) {
                Ok(v) => verdict.merge(v),
                Err(e) => {
                    rejected.push((k, e.to_string()));
                    continue 'receipts;
                }
            }
        }
    }
    ReceiptAudit { report: AuditReport::new(verdict, a.stats), rejected }
}
