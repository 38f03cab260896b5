//! One line per acceptance criterion. Runs without the libtest harness so the
//! lines always print; exits non-zero if any criterion fails.

mod common;

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use forensic_raft::adversary::{AttackKind, AttackPlan, FraudVariant};
use forensic_raft::audit::{audit_all_full, audit_receipts, Auditor, Evidence, LogView};
use forensic_raft::crypto::KeyRegistry;
use forensic_raft::live::{expected_election_rounds, simulate_election_rounds};
use forensic_raft::sim::{run, RunReport, SimConfig, SimOutcome};
use forensic_raft::storage::{write_cluster, ChunkedLog, Store};
use forensic_raft::synth::{bad_vote_pair, honest_chain};
use forensic_raft::types::{verify_receipt, NodeState};
use forensic_raft::{ClientReceipt, NodeId, Snapshot};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    }};
}

/// Scenarios from criteria 1 to 5 with the report each produced, replayed
/// by criterion 10.
#[derive(Default)]
struct Replay(Vec<(String, SimConfig, String)>);

impl Replay {
    fn run(&mut self, name: String, cfg: SimConfig) -> (SimOutcome, RunReport) {
        let o = run(cfg.clone()).unwrap_or_else(|e| panic!("{name}: {e}"));
        let r = RunReport::new(&cfg, &o);
        self.0.push((name, cfg, serde_json::to_string(&r).unwrap()));
        (o, r)
    }
}

fn attack(kind: AttackKind, variant: FraudVariant, n: usize, at: f64, cfg: SimConfig) -> SimConfig {
    let mut plan = AttackPlan::new(kind, at, AttackPlan::default_byzantine(kind, variant, n));
    plan.variant = variant;
    SimConfig { attack: Some(plan), ..cfg }
}

/// Committed prefixes of two states agree up to the shorter one.
fn prefix_ordered(a: &NodeState, b: &NodeState) -> bool {
    let m = a.commit_index().min(b.commit_index()) as usize;
    a.log[..=m] == b.log[..=m]
}

fn honest_safety(replay: &mut Replay) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut crashed_runs = 0;
    for seed in 1..=100u64 {
        let n = [3, 5, 7][seed as usize % 3];
        let mut cfg = SimConfig::base(n, 20, seed);
        cfg.crashes = common::crash_schedule(&mut rng, n, 300, cfg.workload.end() + 500, 5);
        ensure!(common::peak_crashes(&cfg.crashes) <= cfg.f(), "seed {seed}: schedule exceeds f");
        crashed_runs += usize::from(!cfg.crashes.is_empty());
        let (o, r) = replay.run(format!("honest seed {seed}"), cfg);
        ensure!(o.violations.is_empty(), "seed {seed} n={n}: {:?}", o.violations);
        for i in 0..n {
            for j in i + 1..n {
                ensure!(prefix_ordered(&o.states[i], &o.states[j]), "seed {seed}: nodes {i},{j} diverge");
            }
        }
        ensure!(r.audit.culprits.is_empty(), "seed {seed}: audit accused {:?}", r.audit.culprits);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("100 runs ({crashed_runs} with crashes), no divergence, audits empty, {secs:.1}s"))
}

fn fork_accountability(replay: &mut Replay) -> Outcome {
    let mut done = 0;
    for n in [3, 5] {
        for at in [0.1, 0.5, 0.9] {
            let cfg = attack(AttackKind::Fork, FraudVariant::Equal, n, at, SimConfig::base(n, 30, 2));
            let (o, r) = replay.run(format!("fork n={n} at={at}"), cfg);
            let tag = format!("n={n} at={at}");
            ensure!(!o.violations.is_empty(), "{tag}: no conflicting honest commits");
            ensure!(r.audit.culprits == BTreeSet::from([NodeId(0)]), "{tag}: culprits {:?}", r.audit.culprits);
            ensure!(r.receipt_audit.culprits.iter().all(|c| !o.honest(*c)), "{tag}: receipt audit accused an honest node");
            ensure!(!r.audit.evidence.is_empty(), "{tag}: no evidence");
            for e in &r.audit.evidence {
                ensure!(matches!(e, Evidence::ForkedTerm { .. }), "{tag}: evidence {}", e.kind());
                let c = e.verify(&o.registry, o.f).map_err(|err| format!("{tag}: {err}"))?;
                ensure!(c == BTreeSet::from([NodeId(0)]), "{tag}: evidence names {c:?}");
            }
            done += 1;
        }
    }
    Ok(format!("{done}/6 scenarios convict exactly the leader with verified forked-term evidence"))
}

fn bad_vote_accountability(replay: &mut Replay) -> Outcome {
    let n = 5;
    let cfg = attack(AttackKind::BadVote, FraudVariant::Equal, n, 0.5, SimConfig::base(n, 30, 2));
    let (o, r) = replay.run("badvote n=5".into(), cfg);
    ensure!(!o.violations.is_empty(), "attack produced no conflicting commits");
    let byz = o.byzantine[0];
    ensure!(r.audit.culprits.contains(&byz), "culprits {:?} miss {byz}", r.audit.culprits);
    let mut proven = BTreeSet::new();
    for e in &r.audit.evidence {
        ensure!(
            matches!(e, Evidence::IllegalVotePair { .. } | Evidence::DoubleVote { .. }),
            "unexpected evidence {}",
            e.kind()
        );
        // Standalone: only the serialized evidence and the public keys.
        let json = serde_json::to_string(e).unwrap();
        let back: Evidence = serde_json::from_str(&json).unwrap();
        proven.extend(back.verify(&o.registry, o.f).map_err(|err| err.to_string())?);
    }
    ensure!(proven == r.audit.culprits, "culprits {:?} but evidence proves {proven:?}", r.audit.culprits);
    Ok(format!("culprits {:?} = voter intersection, {} verified", r.audit.culprits, r.audit.evidence_type))
}

/// The receipt contradicts `state` somewhere both have committed.
fn conflicts(r: &ClientReceipt, state: &NodeState) -> bool {
    let c = state.commit_index();
    let s = r.entries[0].index;
    r.entries.iter().any(|e| e.index <= c && state.entry(e.index) != Some(e))
        || (s - 1 <= c && state.pointer_at(s - 1) != Some(r.pointer))
}

fn client_accountability(replay: &mut Replay) -> Outcome {
    let mut cases = BTreeSet::new();
    let mut parts = Vec::new();
    for n in [3, 5] {
        for v in [FraudVariant::Equal, FraudVariant::Lower, FraudVariant::Higher] {
            let cfg = attack(AttackKind::ReceiptFraud, v, n, 0.5, SimConfig::base(n, 30, 2));
            let (o, _) = replay.run(format!("receipt-fraud n={n} {v:?}"), cfg);
            let tag = format!("n={n} {v:?}");
            let mut fraud = Vec::new();
            for r in &o.receipts {
                let against: Vec<usize> = (0..n)
                    .filter(|&i| o.honest(NodeId(i as u64)) && conflicts(r, &o.states[i]))
                    .collect();
                if against.is_empty() {
                    continue;
                }
                ensure!(verify_receipt(r, &o.registry, o.f).is_ok(), "{tag}: fraudulent receipt fails verification");
                for i in against {
                    cases.insert(r.certificate.term.cmp(&o.snapshots[i].commit_term()));
                }
                fraud.push(r.clone());
            }
            ensure!(!fraud.is_empty(), "{tag}: no receipt conflicts with an honest log");
            let audit = audit_receipts(&fraud, &o.snapshots, &o.registry, o.f);
            let culprits = &audit.report.culprits;
            ensure!(!culprits.is_empty(), "{tag}: receipt audit found nobody");
            ensure!(culprits.iter().all(|c| !o.honest(*c)), "{tag}: accused honest node in {culprits:?}");
            for e in &audit.report.evidence {
                e.verify(&o.registry, o.f).map_err(|err| format!("{tag}: {err}"))?;
            }
            parts.push(format!("{tag}->{culprits:?}"));
        }
    }
    let want = BTreeSet::from([Ordering::Less, Ordering::Equal, Ordering::Greater]);
    ensure!(cases == want, "term relations covered: {cases:?}");
    Ok(format!("all three term relations covered; {}", parts.join(" ")))
}

fn liveness(replay: &mut Replay) -> Outcome {
    let mut worst_attack = 0;
    let mut worst_honest = 0;
    for n in [3, 5] {
        for seed in 1..=4u64 {
            // With GST at 0 the attacker wins the first round-robin term
            // and holds leadership when the workload begins.
            let base = SimConfig::live(n, 12, seed);
            let timers = base.live.as_ref().unwrap().timers;
            let bound = timers.liveness_bound(base.f());
            let cfg = attack(AttackKind::SilentLeader, FraudVariant::Equal, n, 0.0, base.clone());
            let (o, r) = replay.run(format!("silent-leader n={n} seed {seed}"), cfg);
            ensure!(o.leaders.values().any(|l| !o.honest(*l)), "n={n} seed {seed}: the silent leader never led");
            let late: Vec<_> = o.txs.iter().filter(|t| t.latency().is_none_or(|l| l > bound)).collect();
            let accused = !r.audit.culprits.is_empty() || !r.receipt_audit.culprits.is_empty();
            ensure!(late.is_empty() || accused, "n={n} seed {seed}: {} late requests, bound {bound}", late.len());
            worst_attack = worst_attack.max(o.txs.iter().filter_map(|t| t.latency()).max().unwrap_or(0));

            let honest = SimConfig { gst: 100, ..base };
            let (o, _) = replay.run(format!("live honest n={n} seed {seed}"), honest);
            for t in &o.txs {
                ensure!(t.submitted >= 100, "request before GST");
                let l = t.latency().ok_or(format!("honest n={n} seed {seed}: request never committed"))?;
                ensure!(l <= timers.client, "honest n={n} seed {seed}: latency {l} > {}", timers.client);
                worst_honest = worst_honest.max(l);
            }
        }
    }
    let t = forensic_raft::live::LiveTimers::default();
    Ok(format!(
        "silent leader worst {worst_attack} <= bound ({}/{} for n=3/5); honest worst {worst_honest} <= {}",
        t.liveness_bound(1),
        t.liveness_bound(2),
        t.client
    ))
}

fn round_robin() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut parts = Vec::new();
    for n in [3, 5, 9] {
        let (mean, se) = simulate_election_rounds(n, 100_000, &mut rng);
        let want = expected_election_rounds(n);
        ensure!((mean - want).abs() <= 3.0 * se, "n={n}: mean {mean:.4}, expected {want:.4}, se {se:.4}");
        ensure!(mean < 2.0 && want < 2.0, "n={n}: not below 2");
        parts.push(format!("n={n} {mean:.4}~{want:.4}"));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.1}s");
    Ok(format!("{} in {secs:.2}s", parts.join(", ")))
}

fn store(dir: &Path, snaps: &[Snapshot], keys: &KeyRegistry, chunk: Option<u64>) -> Vec<Snapshot<ChunkedLog>> {
    write_cluster(dir, snaps, keys.public(), keys.len() / 2, chunk).unwrap();
    Store::open(dir).unwrap().load_cluster().unwrap()
}

/// Counted cost of comparing two stored snapshots, integrity excluded, and
/// the chunk loads and parsed entries it took starting from a cold cache.
fn pair_cost(snaps: &[Snapshot<ChunkedLog>], keys: &KeyRegistry) -> (u64, u64, u64, BTreeSet<NodeId>) {
    let mut a = Auditor::new(keys.public(), keys.len() / 2);
    let u = a.check_integrity(&snaps[0]).unwrap();
    let v = a.check_integrity(&snaps[1]).unwrap();
    for s in snaps {
        s.log.evict();
    }
    let cost = a.stats.cost();
    let reads = a.stats.chunk_reads;
    let parsed: u64 = snaps.iter().map(|s| s.log.entries_parsed()).sum();
    let verdict = a.audit_pair(&u, &v);
    let parsed_after: u64 = snaps.iter().map(|s| s.log.entries_parsed()).sum();
    (a.stats.cost() - cost, a.stats.chunk_reads - reads, parsed_after - parsed, verdict.culprits)
}

fn complexity() -> Outcome {
    let keys = KeyRegistry::new(5, 7);
    let tmp = tempfile::tempdir().unwrap();
    let sizes = [1_000usize, 10_000, 100_000];
    let mut per_entry = Vec::new();
    let mut pair = Vec::new();
    for h in sizes {
        let s = honest_chain(&keys, h, 10).snapshot(NodeId(0), &[NodeId(1), NodeId(2)]);
        let stored = store(&tmp.path().join(format!("honest{h}")), &[s], &keys, Some(100));
        let mut a = Auditor::new(keys.public(), 2);
        a.check_integrity(&stored[0]).map_err(|r| r.to_string())?;
        per_entry.push(a.stats.cost() as f64 / h as f64);

        let (lag, lead) = bad_vote_pair(&keys, 50, h, NodeId(4));
        let stored = store(&tmp.path().join(format!("pair{h}")), &[lag, lead], &keys, Some(100));
        let (cost, _, _, culprits) = pair_cost(&stored, &keys);
        ensure!(culprits == BTreeSet::from([NodeId(4)]), "H={h}: culprits {culprits:?}");
        pair.push(cost);
    }
    for r in &per_entry {
        ensure!((0.8..=1.2).contains(&(r / per_entry[0])), "integrity cost per entry drifts: {per_entry:?}");
    }
    let (lo, hi) = (*pair.iter().min().unwrap(), *pair.iter().max().unwrap());
    ensure!(hi <= 2 * lo.max(1), "pair cost across H: {pair:?}");
    let per: Vec<String> = per_entry.iter().map(|c| format!("{c:.3}")).collect();
    Ok(format!("integrity cost/H = {} ; pair cost {pair:?}", per.join(", ")))
}

fn chunking() -> Outcome {
    let keys = KeyRegistry::new(5, 9);
    let tmp = tempfile::tempdir().unwrap();
    let mut parts = Vec::new();
    for h in [10_000usize, 40_000] {
        let (lag, lead) = bad_vote_pair(&keys, 40, h, NodeId(3));
        let snaps = [lag, lead];
        let memory = audit_all_full(&snaps, keys.public(), 2);
        let chunked = store(&tmp.path().join(format!("c{h}")), &snaps, &keys, Some(100));
        let whole = store(&tmp.path().join(format!("w{h}")), &snaps, &keys, None);
        let vc = audit_all_full(&chunked, keys.public(), 2);
        let vw = audit_all_full(&whole, keys.public(), 2);
        ensure!(vc.verdict() == vw.verdict() && vw.verdict() == memory.verdict(), "H={h}: verdicts differ");
        ensure!(!vc.culprits.is_empty(), "H={h}: attack not detected");

        let (_, reads_c, _, cc) = pair_cost(&chunked, &keys);
        let (_, reads_w, parsed_w, cw) = pair_cost(&whole, &keys);
        ensure!(cc == cw, "H={h}: pair verdicts differ");
        ensure!(reads_c <= 3, "H={h}: chunked pair audit loaded {reads_c} chunks");
        ensure!(parsed_w >= whole[0].log.len(), "H={h}: unchunked parsed only {parsed_w}");
        parts.push(format!("H={h}: {reads_c} chunks vs {parsed_w} entries ({reads_w} loads)"));
    }
    Ok(parts.join("; "))
}

fn integrity_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let keys = [KeyRegistry::new(3, 41), KeyRegistry::new(5, 42)];
    let mut pool: Vec<(usize, Snapshot)> = Vec::new();
    for (k, n) in [(0, 3), (1, 5)] {
        let cfg = SimConfig::base(n, 15, 41 + k as u64);
        // The simulator derives keys from the seed like KeyRegistry::new(n, seed).
        let o = run(cfg).unwrap();
        ensure!(&o.registry == keys[k].public(), "simulated registry differs from seeded keys");
        pool.extend(o.snapshots.into_iter().filter(|s| s.cert.is_some()).map(|s| (k, s)));
    }
    let sample = |rng: &mut ChaCha8Rng, pool: &[(usize, Snapshot)]| -> (usize, Snapshot) {
        if rng.gen_bool(0.5) {
            pool[rng.gen_range(0..pool.len())].clone()
        } else {
            let k = rng.gen_range(0..2);
            (k, common::honest_snapshot(rng, &keys[k]))
        }
    };
    for i in 0..100 {
        let (k, s) = sample(&mut rng, &pool);
        let f = keys[k].len() / 2;
        forensic_raft::audit::check_integrity(&s, keys[k].public(), f)
            .map_err(|r| format!("untampered #{i} rejected: {r}"))?;
    }
    let mut kinds = BTreeSet::new();
    for i in 0..50 {
        let (k, mut s) = sample(&mut rng, &pool);
        let n = keys[k].len();
        let kind = common::TAMPERS[rng.gen_range(0..common::TAMPERS.len())];
        let want = common::tamper(&mut rng, &mut s, kind, n);
        match forensic_raft::audit::check_integrity(&s, keys[k].public(), n / 2) {
            Ok(_) => return Err(format!("tamper #{i} ({kind:?}) accepted")),
            Err(r) => ensure!(r.code() == want, "tamper #{i} ({kind:?}): got {}, want {want}", r.code()),
        }
        kinds.insert(want);
    }
    Ok(format!("100/100 untampered pass, 50/50 tampers rejected with {} distinct codes", kinds.len()))
}

fn determinism(replay: &Replay) -> Outcome {
    for (name, cfg, json) in &replay.0 {
        let o = run(cfg.clone()).unwrap();
        let again = serde_json::to_string(&RunReport::new(cfg, &o)).unwrap();
        ensure!(&again == json, "{name}: report differs on replay");
    }
    Ok(format!("{} scenario reports replayed bit-identically", replay.0.len()))
}

fn main() {
    let mut replay = Replay::default();
    let results: Vec<(&str, Outcome)> = vec![
        ("honest safety", honest_safety(&mut replay)),
        ("fork accountability", fork_accountability(&mut replay)),
        ("bad-vote accountability", bad_vote_accountability(&mut replay)),
        ("client accountability", client_accountability(&mut replay)),
        ("liveness bound", liveness(&mut replay)),
        ("round-robin expectation", round_robin()),
        ("audit complexity shape", complexity()),
        ("chunking equivalence", chunking()),
        ("integrity oracle", integrity_oracle()),
        ("determinism", determinism(&replay)),
    ];
    let mut failed = 0;
    for (k, (name, r)) in results.iter().enumerate() {
        match r {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", k + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", k + 1);
            }
        }
    }
    println!("{} of {} criteria pass", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
