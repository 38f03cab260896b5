mod common;

use std::collections::BTreeSet;

use forensic_raft::audit::{audit_all_early, audit_all_full, audit_pair, check_integrity, Evidence, EvidenceError};
use forensic_raft::crypto::KeyRegistry;
use forensic_raft::synth::{bad_vote_pair, honest_chain, ChainBuilder};
use forensic_raft::{LogEntry, NodeId, Snapshot};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ids(v: &[u64]) -> Vec<NodeId> {
    v.iter().copied().map(NodeId).collect()
}

#[test]
fn honest_chains_are_legitimate() {
    let keys = KeyRegistry::new(5, 1);
    let b = honest_chain(&keys, 200, 7);
    let s = b.snapshot(NodeId(3), &ids(&[3, 4]));
    let legit = check_integrity(&s, keys.public(), 2).unwrap();
    assert_eq!(legit.elections.len(), 7);
    assert!(legit.unused.is_empty());
}

#[test]
fn empty_snapshot_is_legitimate() {
    let keys = KeyRegistry::new(3, 1);
    let s = ChainBuilder::new(&keys).snapshot(NodeId(0), &[]);
    assert!(check_integrity(&s, keys.public(), 1).is_ok());
}

#[test]
fn prefixes_of_one_chain_are_consistent() {
    let keys = KeyRegistry::new(5, 1);
    let mut b = honest_chain(&keys, 120, 4);
    let long = b.snapshot(NodeId(0), &ids(&[1, 2]));
    b.truncate(95);
    let short = b.snapshot(NodeId(1), &ids(&[1, 2]));
    assert!(audit_pair(&long, &short, keys.public(), 2).is_consistent());
    assert!(audit_pair(&short, &long, keys.public(), 2).is_consistent());
}

#[test]
fn bad_vote_pair_convicts_the_intersection() {
    let keys = KeyRegistry::new(5, 3);
    let (lag, lead) = bad_vote_pair(&keys, 20, 60, NodeId(4));
    let v = audit_pair(&lag, &lead, keys.public(), 2);
    assert_eq!(v.culprits, BTreeSet::from([NodeId(4)]));
    assert!(matches!(v.evidence[0], Evidence::IllegalVotePair { .. }));
    assert_eq!(v.evidence[0].verify(keys.public(), 2).unwrap(), v.culprits);
    // Order of the pair does not matter.
    assert_eq!(audit_pair(&lead, &lag, keys.public(), 2).culprits, v.culprits);
}

/// Leader 1 of term 2 extends a shared prefix two different ways.
fn forked(keys: &KeyRegistry) -> (Snapshot, Snapshot) {
    let mut b = ChainBuilder::new(keys);
    b.elect(1, NodeId(0), &ids(&[0, 1])).append(5);
    b.elect(2, NodeId(1), &ids(&[1, 2])).append(3);
    let mut x = b.clone();
    x.push(b"left".to_vec()).append(2);
    let mut y = b.clone();
    y.push(b"right".to_vec());
    (x.snapshot(NodeId(0), &ids(&[0])), y.snapshot(NodeId(2), &ids(&[2])))
}

#[test]
fn same_term_fork_convicts_the_leader() {
    let keys = KeyRegistry::new(3, 5);
    let (x, y) = forked(&keys);
    let v = audit_pair(&x, &y, keys.public(), 1);
    assert_eq!(v.culprits, BTreeSet::from([NodeId(1)]));
    let Evidence::ForkedTerm { term, a, b, .. } = &v.evidence[0] else { panic!("{:?}", v.evidence) };
    assert_eq!(*term, 2);
    assert_eq!(a.entries[0].index, 9);
    assert_eq!(b.entries[0].index, 9);
    assert_eq!(v.evidence[0].verify(keys.public(), 1).unwrap(), v.culprits);
}

#[test]
fn two_certificates_for_one_term_convict_the_common_voters() {
    let keys = KeyRegistry::new(3, 5);
    let mut b = ChainBuilder::new(&keys);
    b.elect(1, NodeId(0), &ids(&[0, 1])).append(4);
    let mut x = b.clone();
    x.elect(2, NodeId(1), &ids(&[1, 2])).append(2);
    let mut y = b.clone();
    y.elect(2, NodeId(2), &ids(&[2, 0])).append(1);
    let (x, y) = (x.snapshot(NodeId(1), &ids(&[0])), y.snapshot(NodeId(2), &ids(&[0])));
    let v = audit_pair(&x, &y, keys.public(), 1);
    assert_eq!(v.culprits, BTreeSet::from([NodeId(2)]));
    assert_eq!(v.evidence_type(), "double-vote");
    assert_eq!(v.evidence[0].verify(keys.public(), 1).unwrap(), v.culprits);
}

#[test]
fn forged_evidence_does_not_verify() {
    let keys = KeyRegistry::new(3, 5);
    let (x, y) = forked(&keys);
    let v = audit_pair(&x, &y, keys.public(), 1);
    let Evidence::ForkedTerm { term, leader_cert, a, b } = v.evidence[0].clone() else { unreachable!() };

    let same = Evidence::ForkedTerm { term, leader_cert: leader_cert.clone(), a: a.clone(), b: a.clone() };
    assert_eq!(same.verify(keys.public(), 1), Err(EvidenceError::NoConflict));

    let mut resigned = b.clone();
    resigned.signature = keys.keypair(NodeId(0)).sign(&resigned.base);
    let wrong = Evidence::ForkedTerm { term, leader_cert: leader_cert.clone(), a: a.clone(), b: resigned };
    assert_eq!(wrong.verify(keys.public(), 1), Err(EvidenceError::Signature));

    let mut edited = a.clone();
    edited.entries[0] = LogEntry::new(term, edited.entries[0].index, b"other".to_vec());
    let edited = Evidence::ForkedTerm { term, leader_cert, a: edited, b };
    assert_eq!(edited.verify(keys.public(), 1), Err(EvidenceError::Signature));

    let keys5 = KeyRegistry::new(5, 3);
    let (lag, lead) = bad_vote_pair(&keys5, 20, 30, NodeId(3));
    let v = audit_pair(&lag, &lead, keys5.public(), 2);
    let Evidence::IllegalVotePair { cc, mut tip, base, lc } = v.evidence[0].clone() else { unreachable!() };
    tip.payload.push(0);
    let bad = Evidence::IllegalVotePair { cc, tip, base, lc };
    assert_eq!(bad.verify(keys5.public(), 2), Err(EvidenceError::Pointer));
}

#[test]
fn tampered_member_is_reported_before_comparison() {
    let keys = KeyRegistry::new(3, 2);
    let b = honest_chain(&keys, 40, 3);
    let good = b.snapshot(NodeId(0), &ids(&[1]));
    let mut bad = b.snapshot(NodeId(1), &ids(&[1]));
    bad.log[7].payload = b"x".to_vec();
    let snaps = vec![good.clone(), bad, good];
    for r in [audit_all_early(&snaps, keys.public(), 1), audit_all_full(&snaps, keys.public(), 1)] {
        assert_eq!(r.culprits, BTreeSet::from([NodeId(1)]));
        assert_eq!(r.evidence_type, "illegitimate-data");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn single_field_tampers_are_caught(seed in any::<u64>(), which in 0..common::TAMPERS.len(), big in any::<bool>()) {
        let keys = KeyRegistry::new(if big { 5 } else { 3 }, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = common::honest_snapshot(&mut rng, &keys);
        prop_assert!(check_integrity(&s, keys.public(), keys.len() / 2).is_ok());
        let expected = common::tamper(&mut rng, &mut s, common::TAMPERS[which], keys.len());
        let got = check_integrity(&s, keys.public(), keys.len() / 2).map(|_| ()).unwrap_err();
        prop_assert_eq!(got.code(), expected);
    }

    #[test]
    fn arbitrary_log_edits_never_panic(
        seed in any::<u64>(),
        edits in proptest::collection::vec((0usize..64, 0u64..8, 0u64..80, any::<bool>()), 1..6),
    ) {
        let keys = KeyRegistry::new(3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = common::honest_snapshot(&mut rng, &keys);
        for (pos, term, index, drop) in edits {
            let i = pos % s.log.len();
            if drop && s.log.len() > 1 {
                s.log.remove(i);
            } else {
                s.log[i].term = term;
                s.log[i].index = index;
            }
        }
        let other = common::honest_snapshot(&mut rng, &keys);
        let _ = audit_all_full(&[s.clone(), other.clone()], keys.public(), 1);
        let _ = audit_pair(&s, &other, keys.public(), 1);
    }
}
