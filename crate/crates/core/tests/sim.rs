mod common;

use forensic_raft::adversary::{AttackKind, AttackPlan, FraudVariant};
use forensic_raft::audit::audit_all_full;
use forensic_raft::sim::{run, SimConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn attacked(kind: AttackKind, n: usize, at: f64, seed: u64) -> SimConfig {
    let mut cfg = SimConfig::base(n, 24, seed);
    cfg.attack = Some(AttackPlan::new(kind, at, AttackPlan::default_byzantine(kind, FraudVariant::Equal, n)));
    cfg
}

#[test]
fn same_seed_same_transcript() {
    let a = run(attacked(AttackKind::Fork, 3, 0.5, 5)).unwrap();
    let b = run(attacked(AttackKind::Fork, 3, 0.5, 5)).unwrap();
    assert_eq!(a.transcript_digest, b.transcript_digest);
    let c = run(attacked(AttackKind::Fork, 3, 0.5, 6)).unwrap();
    assert_ne!(a.transcript_digest, c.transcript_digest);
}

#[test]
fn live_honest_run_commits_everything() {
    let o = run(SimConfig::live(5, 20, 4)).unwrap();
    assert!(o.txs.iter().all(|t| t.latency().is_some()));
    assert!(o.violations.is_empty());
    // Round-robin: every leader is the designated candidate of its term.
    for (t, l) in &o.leaders {
        assert_eq!(*l, forensic_raft::live::candidate_for(*t, 5));
    }
}

/// Two attackers handing leadership back and forth is outside the fault
/// model; the run is expected to stall.
#[test]
fn ping_pong_stalls_the_cluster() {
    for n in [3, 5] {
        let mut cfg = SimConfig::live(n, 10, 3);
        let byz = AttackPlan::default_byzantine(AttackKind::PingPong, FraudVariant::Equal, n);
        cfg.attack = Some(AttackPlan::new(AttackKind::PingPong, 0.0, byz.clone()));
        let o = run(cfg).unwrap();
        assert!(o.txs.iter().any(|t| t.latency().is_none()), "n={n}: every request committed");
        let leaders: Vec<_> = o.leaders.values().copied().collect();
        assert!(leaders.len() >= 4 && leaders.iter().all(|l| byz.contains(l)), "n={n}: {leaders:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn honest_clusters_stay_safe_under_crashes(seed in any::<u64>(), big in any::<bool>()) {
        let n = if big { 5 } else { 3 };
        let mut cfg = SimConfig::base(n, 15, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cfg.crashes = common::crash_schedule(&mut rng, n, 300, cfg.workload.end(), 4);
        prop_assert!(common::peak_crashes(&cfg.crashes) <= cfg.f());
        let o = run(cfg).unwrap();
        prop_assert!(o.violations.is_empty());
        prop_assert!(o.double_votes.is_empty());
        prop_assert!(audit_all_full(&o.snapshots, &o.registry, o.f).culprits.is_empty());
    }

    #[test]
    fn attacks_never_convict_honest_nodes(
        seed in any::<u64>(),
        at in 0.1f64..0.9,
        kind in prop_oneof![Just(AttackKind::Fork), Just(AttackKind::BadVote)],
    ) {
        let o = run(attacked(kind, 5, at, seed)).unwrap();
        let r = audit_all_full(&o.snapshots, &o.registry, o.f);
        prop_assert!(r.culprits.iter().all(|c| !o.honest(*c)), "{:?} vs {:?}", r.culprits, o.byzantine);
        if !o.violations.is_empty() {
            prop_assert!(!r.culprits.is_empty());
        }
        for e in &r.evidence {
            prop_assert!(e.verify(&o.registry, o.f).is_ok());
        }
    }
}
