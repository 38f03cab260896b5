//! Machine-readable summary of one run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{SafetyViolation, SimConfig, SimOutcome, SimStats};
use crate::audit::{audit_all_full, audit_receipts, AuditReport};
use crate::crypto::{Digest, NodeId};
use crate::types::{Index, Term};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Liveness {
    pub submitted: usize,
    pub committed: usize,
    /// Simulated ms from submission to first valid receipt, per request.
    pub latencies: Vec<Option<u64>>,
    pub max_latency: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: SimConfig,
    pub commit_heights: Vec<Index>,
    pub safety_violation: bool,
    pub violations: Vec<SafetyViolation>,
    pub double_votes: Vec<(NodeId, Term)>,
    pub leaders: BTreeMap<Term, NodeId>,
    pub liveness: Liveness,
    /// Full audit of the snapshots.
    pub audit: AuditReport,
    /// Audit of every receipt the client holds.
    pub receipt_audit: AuditReport,
    pub stats: SimStats,
    pub transcript_digest: Digest,
}

impl RunReport {
    pub fn new(config: &SimConfig, o: &SimOutcome) -> RunReport {
        let latencies: Vec<Option<u64>> = o.txs.iter().map(|t| t.latency()).collect();
        RunReport {
            config: config.clone(),
            commit_heights: o.commit_heights(),
            safety_violation: !o.violations.is_empty(),
            violations: o.violations.clone(),
            double_votes: o.double_votes.clone(),
            leaders: o.leaders.clone(),
            liveness: Liveness {
                submitted: o.txs.len(),
                committed: latencies.iter().flatten().count(),
                max_latency: latencies.iter().flatten().copied().max(),
                latencies,
            },
            audit: audit_all_full(&o.snapshots, &o.registry, o.f),
            receipt_audit: audit_receipts(&o.receipts, &o.snapshots, &o.registry, o.f).report,
            stats: o.stats.clone(),
            transcript_digest: o.transcript_digest,
        }
    }
}
