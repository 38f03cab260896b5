use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use forensic_raft::adversary::{AttackKind, AttackPlan, FraudVariant};
use forensic_raft::audit::{audit_all_early, audit_all_full, audit_receipts, AuditReport, AuditVerdict};
use forensic_raft::sim::{RunReport, SimConfig, Simulation};
use forensic_raft::storage::{write_cluster, Store};
use forensic_raft::{ClientReceipt, NodeId};
use serde::Serialize;

const SEED_ENV: &str = "FORENSIC_RAFT_SEED";

/// Accountable Raft: simulate attacks, store node states, audit them.
#[derive(Parser)]
#[command(name = "forensic-raft", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a simulation and persist every node's committed state.
    Simulate(SimulateArgs),
    /// Audit a store written by `simulate`.
    Audit(AuditArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Attack {
    None,
    Fork,
    Badvote,
    ReceiptFraud,
    SilentLeader,
    PingPong,
}

impl From<Attack> for AttackKind {
    fn from(a: Attack) -> AttackKind {
        match a {
            Attack::None => AttackKind::None,
            Attack::Fork => AttackKind::Fork,
            Attack::Badvote => AttackKind::BadVote,
            Attack::ReceiptFraud => AttackKind::ReceiptFraud,
            Attack::SilentLeader => AttackKind::SilentLeader,
            Attack::PingPong => AttackKind::PingPong,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Variant {
    Equal,
    Lower,
    Higher,
}

impl From<Variant> for FraudVariant {
    fn from(v: Variant) -> FraudVariant {
        match v {
            Variant::Equal => FraudVariant::Equal,
            Variant::Lower => FraudVariant::Lower,
            Variant::Higher => FraudVariant::Higher,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Early,
    Full,
}

/// A chunk size in entries, or `inf` for one file per node.
#[derive(Clone, Copy, Debug)]
struct ChunkSize(Option<u64>);

fn parse_chunk_size(s: &str) -> Result<ChunkSize, String> {
    match s {
        "inf" | "∞" => Ok(ChunkSize(None)),
        _ => match s.parse::<u64>() {
            Ok(0) | Err(_) => Err(format!("expected a positive entry count or `inf`, got {s:?}")),
            Ok(k) => Ok(ChunkSize(Some(k))),
        },
    }
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 3)]
    nodes: usize,
    #[arg(long, default_value_t = 20)]
    txs: usize,
    /// Overridden by the FORENSIC_RAFT_SEED environment variable.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Attack::None)]
    attack: Attack,
    /// Position of the attacked transaction in the workload, in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    attack_at: f64,
    /// Byzantine node ids; defaults depend on the attack.
    #[arg(long, value_delimiter = ',')]
    byzantine: Vec<u64>,
    /// Which way the certificate terms differ in a receipt fraud.
    #[arg(long, value_enum, default_value_t = Variant::Equal)]
    variant: Variant,
    #[arg(long, default_value = "100", value_parser = parse_chunk_size)]
    chunk_size: ChunkSize,
    /// Round-robin elections with prevotes.
    #[arg(long)]
    live: bool,
    #[arg(long)]
    gst: Option<u64>,
    #[arg(long)]
    delta: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct AuditArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Full)]
    mode: Mode,
    /// A receipt, or a JSON array of receipts, to audit against the store.
    #[arg(long)]
    receipt: Option<PathBuf>,
    /// Report path; defaults to `audit.json` inside the store.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn seed(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not a u64")),
        Err(_) => Ok(flag),
    }
}

fn config(a: &SimulateArgs) -> Result<SimConfig> {
    let seed = seed(a.seed)?;
    let mut cfg = if a.live { SimConfig::live(a.nodes, a.txs, seed) } else { SimConfig::base(a.nodes, a.txs, seed) };
    if let Some(g) = a.gst {
        cfg.gst = g;
    }
    if let Some(d) = a.delta {
        cfg = cfg.with_delta(d);
    }
    let kind = AttackKind::from(a.attack);
    if kind != AttackKind::None {
        let variant = FraudVariant::from(a.variant);
        let byz = if a.byzantine.is_empty() {
            AttackPlan::default_byzantine(kind, variant, a.nodes)
        } else {
            a.byzantine.iter().map(|b| NodeId(*b)).collect()
        };
        let mut plan = AttackPlan::new(kind, a.attack_at, byz);
        plan.variant = variant;
        cfg.attack = Some(plan);
    } else if !a.byzantine.is_empty() {
        bail!("--byzantine needs an --attack");
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_report<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, format!("{json}\n")).with_context(|| format!("writing {}", path.display()))?;
    Ok(json)
}

fn simulate(a: &SimulateArgs) -> Result<ExitCode> {
    let cfg = config(a)?;
    let outcome = Simulation::new(cfg.clone())?.run();
    let report = RunReport::new(&cfg, &outcome);
    write_cluster(&a.out, &outcome.snapshots, &outcome.registry, outcome.f, a.chunk_size.0)?;
    write_report(&a.out.join("receipts.json"), &outcome.receipts)?;
    let json = write_report(&a.out.join("report.json"), &report)?;
    println!("{json}");
    eprintln!(
        "simulated n={} txs={} seed={}: heights {:?}, {} of {} requests committed, {}",
        cfg.n,
        cfg.workload.count,
        cfg.seed,
        report.commit_heights,
        report.liveness.committed,
        report.liveness.submitted,
        if report.safety_violation { "SAFETY VIOLATED" } else { "no safety violation" },
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct AuditOutput {
    mode: &'static str,
    #[serde(flatten)]
    report: AuditReport,
    receipts_checked: usize,
    receipts_rejected: Vec<(usize, String)>,
}

fn read_receipts(path: &Path) -> Result<Vec<ClientReceipt>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let receipts = if value.is_array() { serde_json::from_value(value)? } else { vec![serde_json::from_value(value)?] };
    Ok(receipts)
}

fn audit(a: &AuditArgs) -> Result<ExitCode> {
    let store = Store::open(&a.input)?;
    let snaps = store.load_cluster()?;
    let (registry, f) = (store.registry(), store.f());
    let mut report = match a.mode {
        Mode::Early => audit_all_early(&snaps, registry, f),
        Mode::Full => audit_all_full(&snaps, registry, f),
    };
    let (mut checked, mut rejected) = (0, Vec::new());
    if let Some(path) = &a.receipt {
        let receipts = read_receipts(path)?;
        let r = audit_receipts(&receipts, &snaps, registry, f);
        checked = receipts.len();
        rejected = r.rejected;
        let mut verdict: AuditVerdict = report.verdict();
        verdict.merge(r.report.verdict());
        let mut stats = report.stats.clone();
        stats.sig_verifications += r.report.stats.sig_verifications;
        stats.hash_steps += r.report.stats.hash_steps;
        stats.entry_reads += r.report.stats.entry_reads;
        stats.chunk_reads += r.report.stats.chunk_reads;
        report = AuditReport::new(verdict, stats);
    }
    let culprits = report.culprits.clone();
    let out = AuditOutput {
        mode: match a.mode {
            Mode::Early => "early",
            Mode::Full => "full",
        },
        report,
        receipts_checked: checked,
        receipts_rejected: rejected,
    };
    let path = a.out.clone().unwrap_or_else(|| a.input.join("audit.json"));
    let json = write_report(&path, &out)?;
    println!("{json}");
    if culprits.is_empty() {
        eprintln!("audit ({}): consistent", out.mode);
        Ok(ExitCode::SUCCESS)
    } else {
        let ids: Vec<String> = culprits.iter().map(ToString::to_string).collect();
        eprintln!("audit ({}): culprits {} ({})", out.mode, ids.join(", "), out.report.evidence_type);
        Ok(ExitCode::from(2))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let r = match &cli.cmd {
        Cmd::Simulate(a) => simulate(a),
        Cmd::Audit(a) => audit(a),
    };
    r.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(1)
    })
}
