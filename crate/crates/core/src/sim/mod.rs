//! Deterministic discrete-event simulation of a cluster.
//!
//! One seeded RNG drives every random choice, and the event queue is totally
//! ordered by `(time, insertion sequence)`, so a configuration always
//! produces the same transcript.

mod client;
mod network;
mod report;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::adversary::{self, AttackPlan, PlanError};
use crate::crypto::{Digest, KeyRegistry, NodeId, PublicRegistry};
use crate::live::LiveConfig;
use crate::protocol::{ClientId, Delay, Endpoint, Input, Message, Mode, Node, NodeConfig, NodeEvent, Output, TimerKind};
use crate::types::{ClientReceipt, Index, NodeState, Snapshot, Term};

pub use client::TxRecord;
pub use network::{Delivery, Network};

use client::{Client, ClientAction, Retry};
pub use report::{Liveness, RunReport};

/// A participant in the simulation: an honest [`Node`] or an adversary.
pub trait Replica {
    fn id(&self) -> NodeId;
    fn handle(&mut self, input: Input) -> Vec<Output>;
    fn recover(&mut self) -> Vec<Output>;
    /// What this node hands the auditor.
    fn snapshot(&self) -> Snapshot;
    /// The protocol state this replica presents as its own.
    fn node(&self) -> &Node;
    fn byzantine(&self) -> bool {
        false
    }
    /// Called with the current simulated time before every input.
    fn set_time(&mut self, _now: u64) {}
}

impl Replica for Node {
    fn id(&self) -> NodeId {
        Node::id(self)
    }
    fn handle(&mut self, input: Input) -> Vec<Output> {
        Node::handle(self, input)
    }
    fn recover(&mut self) -> Vec<Output> {
        Node::recover(self)
    }
    fn snapshot(&self) -> Snapshot {
        self.state().snapshot()
    }
    fn node(&self) -> &Node {
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashWindow {
    pub node: NodeId,
    pub down_at: u64,
    /// `None` keeps the node down for the rest of the run.
    pub up_at: Option<u64>,
}

/// Forces the election timeout a node draws while `from <= now < until`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElectionBias {
    pub node: NodeId,
    pub from: u64,
    pub until: u64,
    pub timeout: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub count: usize,
    pub start: u64,
    pub interval: u64,
}

impl Workload {
    pub fn payload(k: usize) -> Vec<u8> {
        format!("tx-{k:06}").into_bytes()
    }

    pub fn submit_time(&self, k: usize) -> u64 {
        self.start + k as u64 * self.interval
    }

    pub fn end(&self) -> u64 {
        self.submit_time(self.count)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n: usize,
    pub seed: u64,
    /// Bound on post-GST message delay.
    pub delta: u64,
    pub gst: u64,
    /// Pre-GST drop probability.
    pub drop_prob: f64,
    /// Post-GST node-to-node delays; drawn from `1..=delta` when absent.
    pub delay_matrix: Option<Vec<Vec<u64>>>,
    /// Live mode when present.
    pub live: Option<LiveConfig>,
    pub election_timeout: (u64, u64),
    pub heartbeat: u64,
    /// Base-mode client retry interval.
    pub client_retry: u64,
    pub crashes: Vec<CrashWindow>,
    pub election_bias: Vec<ElectionBias>,
    pub initial_term: Term,
    pub workload: Workload,
    /// Simulated time after which the run stops.
    pub horizon: u64,
    pub attack: Option<AttackPlan>,
    /// Keep transcript lines in memory, not just their digest.
    pub record_transcript: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 3,
            seed: 0,
            delta: 10,
            gst: 0,
            drop_prob: 0.2,
            delay_matrix: None,
            live: None,
            election_timeout: (150, 300),
            heartbeat: 50,
            client_retry: 400,
            crashes: Vec::new(),
            election_bias: Vec::new(),
            initial_term: 0,
            workload: Workload { count: 10, start: 500, interval: 20 },
            horizon: 5_000,
            attack: None,
            record_transcript: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("cluster size must be odd and at least 3, got {0}")]
    ClusterSize(usize),
    #[error(transparent)]
    Timers(#[from] crate::live::TimerError),
    #[error("election timeout range {0}..{1} is empty")]
    ElectionRange(u64, u64),
    #[error(transparent)]
    Attack(#[from] PlanError),
    #[error("node {0} is outside the cluster")]
    UnknownNode(NodeId),
}

impl SimConfig {
    /// Defaults for a cluster of `n` running `txs` transactions.
    pub fn base(n: usize, txs: usize, seed: u64) -> SimConfig {
        let workload = Workload { count: txs, start: 500, interval: 20 };
        SimConfig { n, seed, workload, horizon: workload.end() + 3_000, ..SimConfig::default() }
    }

    /// Live-mode defaults. Requests are spaced so that an honest leader never
    /// has a replication round in flight when the next one arrives.
    pub fn live(n: usize, txs: usize, seed: u64) -> SimConfig {
        let live = LiveConfig::default();
        let delta = live.timers.delta;
        let workload = Workload { count: txs, start: 200, interval: 5 * delta };
        SimConfig {
            n,
            seed,
            delta,
            heartbeat: (live.timers.heart / 2).max(1),
            live: Some(live),
            workload,
            horizon: workload.end() + 3_000,
            ..SimConfig::default()
        }
    }

    /// Sets the post-GST delay bound; in live mode the timers and request
    /// spacing scale with it.
    pub fn with_delta(mut self, delta: u64) -> SimConfig {
        self.delta = delta;
        if let Some(live) = self.live.as_mut() {
            live.timers = crate::live::LiveTimers::for_delta(delta);
            self.heartbeat = (live.timers.heart / 2).max(1);
            self.workload.interval = 5 * delta;
            self.horizon = self.workload.end() + 3_000;
        }
        self
    }

    pub fn f(&self) -> usize {
        (self.n - 1) / 2
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n < 3 || self.n.is_multiple_of(2) {
            return Err(ConfigError::ClusterSize(self.n));
        }
        if let Some(l) = &self.live {
            l.timers.validate()?;
        }
        let (lo, hi) = self.election_timeout;
        if lo == 0 || lo > hi {
            return Err(ConfigError::ElectionRange(lo, hi));
        }
        let known = |id: NodeId| (id.0 as usize) < self.n;
        for c in &self.crashes {
            if !known(c.node) {
                return Err(ConfigError::UnknownNode(c.node));
            }
        }
        Ok(())
    }

    fn node_config(&self) -> NodeConfig {
        let mode = match &self.live {
            Some(l) => Mode::Live(l.clone()),
            None => Mode::Base,
        };
        NodeConfig { n: self.n, mode, heartbeat: self.heartbeat }
    }
}

#[derive(Clone, Debug)]
enum Payload {
    Msg(Message),
    Receipt(ClientReceipt),
}

#[derive(Clone, Debug)]
enum EventKind {
    Deliver { from: Endpoint, to: Endpoint, payload: Payload },
    Timer { node: NodeId, kind: TimerKind, token: u64 },
    ClientTimer { payload: Vec<u8>, attempt: u32 },
    Submit(usize),
    Crash(NodeId),
    Recover(NodeId),
}

#[derive(Clone, Debug)]
struct Scheduled {
    time: u64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

/// Running digest of the transcript, optionally keeping the lines.
#[derive(Clone)]
pub struct Transcript {
    hasher: Sha256,
    lines: Option<Vec<String>>,
    count: u64,
}

impl Transcript {
    fn new(record: bool) -> Transcript {
        Transcript { hasher: Sha256::new(), lines: record.then(Vec::new), count: 0 }
    }

    fn push(&mut self, line: String) {
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        self.count += 1;
        if let Some(l) = self.lines.as_mut() {
            l.push(line);
        }
    }

    fn digest(&self) -> Digest {
        Digest(self.hasher.clone().finalize().into())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyViolation {
    pub time: u64,
    pub nodes: (NodeId, NodeId),
    pub index: Index,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    pub events: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub leaders_elected: u64,
    pub max_term: Term,
    pub end_time: u64,
}

/// Everything a finished run leaves behind.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimOutcome {
    pub n: usize,
    pub f: usize,
    pub registry: PublicRegistry,
    pub byzantine: Vec<NodeId>,
    pub snapshots: Vec<Snapshot>,
    pub states: Vec<NodeState>,
    pub receipts: Vec<ClientReceipt>,
    pub txs: Vec<TxRecord>,
    pub violations: Vec<SafetyViolation>,
    /// Terms in which an honest node voted twice, with that node.
    pub double_votes: Vec<(NodeId, Term)>,
    pub leaders: BTreeMap<Term, NodeId>,
    pub stats: SimStats,
    pub transcript_digest: Digest,
    #[serde(skip)]
    pub transcript: Option<Vec<String>>,
}

impl SimOutcome {
    pub fn commit_heights(&self) -> Vec<Index> {
        self.states.iter().map(NodeState::commit_index).collect()
    }

    pub fn honest(&self, id: NodeId) -> bool {
        !self.byzantine.contains(&id)
    }

    /// Election certificates from every snapshot, keyed by term.
    pub fn leader_cert_pool(&self) -> BTreeMap<Term, Vec<crate::types::LeaderCert>> {
        let mut pool: BTreeMap<Term, Vec<crate::types::LeaderCert>> = BTreeMap::new();
        for s in &self.snapshots {
            for (t, lc) in &s.elections {
                let v = pool.entry(*t).or_default();
                if !v.contains(lc) {
                    v.push(lc.clone());
                }
            }
        }
        pool
    }
}

pub struct Simulation {
    cfg: SimConfig,
    rng: ChaCha8Rng,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    replicas: Vec<Box<dyn Replica>>,
    down: Vec<bool>,
    registry: Arc<PublicRegistry>,
    net: Network,
    client: Client,
    transcript: Transcript,
    stats: SimStats,
    violations: Vec<SafetyViolation>,
    votes: BTreeMap<(NodeId, Term), NodeId>,
    double_votes: Vec<(NodeId, Term)>,
    leaders: BTreeMap<Term, NodeId>,
}

const CLIENT: ClientId = ClientId(0);

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Simulation, ConfigError> {
        cfg.validate()?;
        let mut cfg = cfg;
        let keys = KeyRegistry::new(cfg.n, cfg.seed);
        let registry = Arc::new(keys.public().clone());
        let node_cfg = cfg.node_config();
        let nodes: Vec<Node> = (0..cfg.n as u64)
            .map(|i| {
                let mut node = Node::new(keys.keypair(NodeId(i)).clone(), registry.clone(), node_cfg.clone());
                node.set_term(cfg.initial_term);
                node
            })
            .collect();
        let replicas: Vec<Box<dyn Replica>> = match cfg.attack.clone() {
            Some(plan) => adversary::install(&plan, &mut cfg, nodes)?,
            None => nodes.into_iter().map(|n| Box::new(n) as Box<dyn Replica>).collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = Network::new(cfg.n + 1, cfg.delta, cfg.gst, cfg.drop_prob, cfg.delay_matrix.as_deref(), &mut rng);
        let retry = match &cfg.live {
            Some(l) => Retry::TwoTrial { client: l.timers.client },
            None => Retry::RoundRobin { retry: cfg.client_retry },
        };
        let client = Client::new(CLIENT, cfg.n, retry);
        let transcript = Transcript::new(cfg.record_transcript);
        let mut sim = Simulation {
            down: vec![false; cfg.n],
            rng,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            replicas,
            registry,
            net,
            client,
            transcript,
            stats: SimStats::default(),
            violations: Vec::new(),
            votes: BTreeMap::new(),
            double_votes: Vec::new(),
            leaders: BTreeMap::new(),
            cfg,
        };
        for k in 0..sim.cfg.workload.count {
            sim.push(sim.cfg.workload.submit_time(k), EventKind::Submit(k));
        }
        for c in sim.cfg.crashes.clone() {
            sim.push(c.down_at, EventKind::Crash(c.node));
            if let Some(up) = c.up_at {
                sim.push(up, EventKind::Recover(c.node));
            }
        }
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn replica(&self, id: NodeId) -> &dyn Replica {
        self.replicas[id.0 as usize].as_ref()
    }

    fn push(&mut self, time: u64, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Reverse(Scheduled { time, seq: self.seq, kind }));
    }

    fn endpoint_index(&self, e: Endpoint) -> usize {
        match e {
            Endpoint::Node(n) => n.0 as usize,
            Endpoint::Client(c) => self.cfg.n + c.0 as usize,
        }
    }

    fn send(&mut self, from: Endpoint, to: Endpoint, payload: Payload) {
        let (s, r) = (self.endpoint_index(from), self.endpoint_index(to));
        match self.net.schedule(self.now, s, r, &mut self.rng) {
            Delivery::At(t) => self.push(t, EventKind::Deliver { from, to, payload }),
            Delivery::Dropped => self.stats.dropped += 1,
        }
    }

    fn election_timeout(&mut self, node: NodeId) -> u64 {
        let now = self.now;
        if let Some(b) = self.cfg.election_bias.iter().find(|b| b.node == node && b.from <= now && now < b.until) {
            return b.timeout;
        }
        let (lo, hi) = self.cfg.election_timeout;
        self.rng.gen_range(lo..=hi)
    }

    fn start(&mut self) {
        for i in 0..self.cfg.n {
            let out = self.replicas[i].handle(Input::Start);
            self.apply(NodeId(i as u64), out);
        }
    }

    /// Runs until the queue drains or the horizon passes.
    pub fn run(mut self) -> SimOutcome {
        self.start();
        while let Some(Reverse(ev)) = self.queue.pop() {
            if ev.time > self.cfg.horizon {
                break;
            }
            self.now = ev.time;
            self.stats.events += 1;
            self.step(ev.kind);
        }
        self.stats.end_time = self.now;
        self.finish()
    }

    fn step(&mut self, kind: EventKind) {
        match kind {
            EventKind::Deliver { from, to, payload } => match (to, payload) {
                (Endpoint::Node(id), Payload::Msg(msg)) => {
                    if self.down[id.0 as usize] {
                        self.stats.dropped += 1;
                        return;
                    }
                    self.stats.delivered += 1;
                    let line = format!("{} {from}->{id} {}", self.now, msg.summary());
                    self.replicas[id.0 as usize].set_time(self.now);
                    let out = self.replicas[id.0 as usize].handle(Input::Message { from, msg });
                    self.log_node(line, id);
                    self.apply(id, out);
                }
                (Endpoint::Client(_), Payload::Receipt(r)) => {
                    self.stats.delivered += 1;
                    self.transcript.push(format!("{} {from}->client receipt ({},{})", self.now, r.certificate.term, r.certificate.index));
                    let f = self.cfg.f();
                    self.client.on_receipt(self.now, r, &self.registry, f);
                }
                _ => {}
            },
            EventKind::Timer { node, kind, token } => {
                if self.down[node.0 as usize] {
                    return;
                }
                self.replicas[node.0 as usize].set_time(self.now);
                let out = self.replicas[node.0 as usize].handle(Input::Timer { kind, token });
                if !out.is_empty() {
                    self.log_node(format!("{} {node} timer {kind:?}", self.now), node);
                }
                self.apply(node, out);
            }
            EventKind::ClientTimer { payload, attempt } => {
                let actions = self.client.on_timeout(&payload, attempt);
                if !actions.is_empty() {
                    self.transcript.push(format!("{} client retry {}", self.now, hex::encode(&payload)));
                }
                self.client_actions(actions);
            }
            EventKind::Submit(k) => {
                let payload = Workload::payload(k);
                self.transcript.push(format!("{} client submit {}", self.now, hex::encode(&payload)));
                let actions = self.client.submit(self.now, k, payload);
                self.client_actions(actions);
            }
            EventKind::Crash(id) => {
                self.down[id.0 as usize] = true;
                self.transcript.push(format!("{} {id} crash", self.now));
            }
            EventKind::Recover(id) => {
                self.down[id.0 as usize] = false;
                self.replicas[id.0 as usize].set_time(self.now);
                let out = self.replicas[id.0 as usize].recover();
                self.log_node(format!("{} {id} recover", self.now), id);
                self.apply(id, out);
            }
        }
    }

    fn log_node(&mut self, line: String, id: NodeId) {
        let st = self.replicas[id.0 as usize].node().state();
        let line = format!("{line} | t{} li{} ci{}", st.current_term, st.last_index(), st.commit_index());
        self.transcript.push(line);
    }

    fn client_actions(&mut self, actions: Vec<ClientAction>) {
        for a in actions {
            match a {
                ClientAction::Send { to, msg } => self.send(Endpoint::Client(CLIENT), Endpoint::Node(to), Payload::Msg(msg)),
                ClientAction::Timer { payload, attempt, delay } => {
                    self.push(self.now + delay, EventKind::ClientTimer { payload, attempt })
                }
            }
        }
    }

    fn apply(&mut self, id: NodeId, out: Vec<Output>) {
        let from = Endpoint::Node(id);
        for o in out {
            match o {
                Output::Send { to, msg } => self.send(from, Endpoint::Node(to), Payload::Msg(msg)),
                Output::Broadcast(msg) => {
                    for p in 0..self.cfg.n as u64 {
                        if p != id.0 {
                            self.send(from, Endpoint::Node(NodeId(p)), Payload::Msg(msg.clone()));
                        }
                    }
                }
                Output::Receipt { client, receipt } => self.send(from, Endpoint::Client(client), Payload::Receipt(receipt)),
                Output::Timer { kind, token, delay } => {
                    let d = match delay {
                        Delay::Fixed(d) => d,
                        Delay::Election => self.election_timeout(id),
                    };
                    self.push(self.now + d, EventKind::Timer { node: id, kind, token });
                }
                Output::Event(ev) => self.on_event(id, ev),
            }
        }
    }

    fn on_event(&mut self, id: NodeId, ev: NodeEvent) {
        if self.replicas[id.0 as usize].byzantine() {
            return;
        }
        match ev {
            NodeEvent::LeaderElected { term } => {
                self.stats.leaders_elected += 1;
                self.stats.max_term = self.stats.max_term.max(term);
                self.leaders.insert(term, id);
                let actions = self.client.on_leader(term, id);
                self.client_actions(actions);
            }
            NodeEvent::LeaderAdmitted { term, leader } => {
                self.leaders.entry(term).or_insert(leader);
                let actions = self.client.on_leader(term, leader);
                self.client_actions(actions);
            }
            NodeEvent::Voted { term, candidate } => {
                if let Some(prev) = self.votes.insert((id, term), candidate) {
                    if prev != candidate {
                        self.double_votes.push((id, term));
                    }
                }
            }
            NodeEvent::Committed { .. } => self.check_safety(id),
            NodeEvent::EnteredTerm { term } | NodeEvent::BecameCandidate { term } => {
                self.stats.max_term = self.stats.max_term.max(term);
            }
            NodeEvent::Prevoted { .. } => {}
        }
    }

    /// Committed prefixes of honest nodes must be prefix-ordered.
    fn check_safety(&mut self, u: NodeId) {
        let su = self.replicas[u.0 as usize].node().state();
        for v in 0..self.cfg.n {
            let rv = &self.replicas[v];
            if v == u.0 as usize || rv.byzantine() {
                continue;
            }
            let sv = rv.node().state();
            let m = su.commit_index().min(sv.commit_index());
            if su.pointer_at(m) != sv.pointer_at(m) {
                let nodes = (u.min(NodeId(v as u64)), u.max(NodeId(v as u64)));
                if !self.violations.iter().any(|x| x.nodes == nodes) {
                    self.violations.push(SafetyViolation { time: self.now, nodes, index: m });
                }
            }
        }
    }

    fn finish(self) -> SimOutcome {
        let byzantine: Vec<NodeId> = self.replicas.iter().filter(|r| r.byzantine()).map(|r| r.id()).collect();
        SimOutcome {
            n: self.cfg.n,
            f: self.cfg.f(),
            registry: (*self.registry).clone(),
            byzantine,
            snapshots: self.replicas.iter().map(|r| r.snapshot()).collect(),
            states: self.replicas.iter().map(|r| r.node().state().clone()).collect(),
            receipts: self.client.receipts,
            txs: self.client.records,
            violations: self.violations,
            double_votes: self.double_votes,
            leaders: self.leaders,
            stats: self.stats,
            transcript_digest: self.transcript.digest(),
            transcript: self.transcript.lines,
        }
    }
}

/// Builds and runs a simulation in one call.
pub fn run(cfg: SimConfig) -> Result<SimOutcome, ConfigError> {
    Ok(Simulation::new(cfg)?.run())
}
