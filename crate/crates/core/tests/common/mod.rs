#![allow(dead_code)]

use forensic_raft::crypto::KeyRegistry;
use forensic_raft::sim::CrashWindow;
use forensic_raft::synth::honest_chain;
use forensic_raft::types::Term;
use forensic_raft::{Digest, NodeId, Snapshot};
use rand::seq::SliceRandom;
use rand::Rng;

/// Up to `max` crash windows inside `[from, to)` such that no more than `f`
/// nodes are down at any instant.
pub fn crash_schedule<R: Rng>(rng: &mut R, n: usize, from: u64, to: u64, max: usize) -> Vec<CrashWindow> {
    let f = (n - 1) / 2;
    let mut out: Vec<CrashWindow> = Vec::new();
    for _ in 0..rng.gen_range(0..=max) {
        let node = NodeId(rng.gen_range(0..n as u64));
        let down = rng.gen_range(from..to);
        let up = down + rng.gen_range(50..600);
        let busy = |t: u64| out.iter().filter(|c| c.down_at <= t && t < c.up_at.unwrap()).count();
        let same = out.iter().any(|c| c.node == node && c.down_at < up && down < c.up_at.unwrap());
        // Overlap peaks at some window start, so checking starts suffices.
        let starts = std::iter::once(down).chain(out.iter().map(|c| c.down_at).filter(|t| (down..up).contains(t)));
        if same || starts.clone().any(|t| busy(t) + 1 > f) {
            continue;
        }
        out.push(CrashWindow { node, down_at: down, up_at: Some(up) });
    }
    out
}

/// Most nodes down at once in a schedule.
pub fn peak_crashes(c: &[CrashWindow]) -> usize {
    c.iter().map(|w| c.iter().filter(|x| x.down_at <= w.down_at && w.down_at < x.up_at.unwrap_or(u64::MAX)).count()).max().unwrap_or(0)
}

/// A legitimate snapshot of a synthetic chain, certified by the leader of
/// the last term and the next `f` nodes.
pub fn honest_snapshot<R: Rng>(rng: &mut R, keys: &KeyRegistry) -> Snapshot {
    let n = keys.len();
    let f = (n - 1) / 2;
    let terms = rng.gen_range(1..6);
    let entries = rng.gen_range(terms..terms + 60);
    let b = honest_chain(keys, entries, terms);
    let last = b.log().last().unwrap().term as usize;
    let voters: Vec<NodeId> = (1..=f).map(|k| NodeId(((last + k) % n) as u64)).collect();
    b.snapshot(NodeId(rng.gen_range(0..n as u64)), &voters)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tamper {
    Payload,
    Term,
    LeaderSig,
    CcSigBytes,
    CcVoter,
    CcDuplicate,
    CcPointer,
    LcVoter,
    LcPointer,
}

pub const TAMPERS: [Tamper; 9] = [
    Tamper::Payload,
    Tamper::Term,
    Tamper::LeaderSig,
    Tamper::CcSigBytes,
    Tamper::CcVoter,
    Tamper::CcDuplicate,
    Tamper::CcPointer,
    Tamper::LcVoter,
    Tamper::LcPointer,
];

fn pick_term<R: Rng>(rng: &mut R, s: &Snapshot) -> Term {
    let terms: Vec<Term> = s.elections.keys().copied().collect();
    *terms.choose(rng).unwrap()
}

/// Changes one field of `s` and returns the reason code the integrity
/// check must report.
pub fn tamper<R: Rng>(rng: &mut R, s: &mut Snapshot, kind: Tamper, n: usize) -> &'static str {
    let len = s.log.len();
    let cc = s.cert.as_mut().expect("certified snapshot");
    match kind {
        Tamper::Payload => {
            let i = rng.gen_range(1..len);
            s.log[i].payload.push(b'!');
            "hash-chain"
        }
        Tamper::Term => {
            if len < 3 {
                s.log[1].term = 0;
                return "untraced";
            }
            let i = rng.gen_range(2..len);
            s.log[i].term = s.log[i - 1].term - 1;
            "term-order"
        }
        Tamper::LeaderSig => {
            let t = pick_used_term(rng, s);
            let sig = s.leader_sigs.get_mut(&t).unwrap();
            sig.bytes[rng.gen_range(0..64)] ^= 1 << rng.gen_range(0..8);
            "leader-signature"
        }
        Tamper::CcSigBytes => {
            let k = rng.gen_range(0..cc.signatures.len());
            cc.signatures[k].bytes[rng.gen_range(0..64)] ^= 1 << rng.gen_range(0..8);
            "commit-cert"
        }
        Tamper::CcVoter => {
            let k = rng.gen_range(0..cc.voters.len());
            let other = (0..n as u64).map(NodeId).find(|v| !cc.voters.contains(v)).unwrap();
            cc.voters[k] = other;
            "commit-cert"
        }
        Tamper::CcDuplicate => {
            let k = rng.gen_range(1..cc.voters.len());
            cc.voters[k] = cc.voters[0];
            cc.signatures[k] = cc.signatures[0].clone();
            "commit-cert"
        }
        Tamper::CcPointer => {
            cc.pointer.0[rng.gen_range(0..32)] ^= 1;
            "commit-cert"
        }
        Tamper::LcVoter => {
            let t = pick_term(rng, s);
            let lc = s.elections.get_mut(&t).unwrap();
            let k = rng.gen_range(0..lc.voters.len());
            let other = (0..n as u64).map(NodeId).find(|v| !lc.voters.contains(v)).unwrap();
            lc.voters[k] = other;
            "leader-cert"
        }
        Tamper::LcPointer => {
            let t = pick_used_term(rng, s);
            let lc = s.elections.get_mut(&t).unwrap();
            lc.request.pointer = Digest::of(&lc.request.pointer.0);
            "election-link"
        }
    }
}

fn pick_used_term<R: Rng>(rng: &mut R, s: &Snapshot) -> Term {
    let mut terms: Vec<Term> = s.log[1..].iter().map(|e| e.term).collect();
    terms.dedup();
    *terms.choose(rng).unwrap()
}
