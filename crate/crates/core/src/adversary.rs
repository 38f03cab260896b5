//! Scripted Byzantine replicas and the orchestration that sets them up.
//!
//! Every attacker wraps one or more honest [`Node`] views and only filters,
//! reroutes or adds to what they do. Attackers sign with their own key and
//! never touch honest-to-honest traffic.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::crypto::NodeId;
use crate::protocol::{Endpoint, Input, Message, Node, Output, TimerKind};
use crate::sim::{CrashWindow, ElectionBias, Replica, SimConfig, Workload};
use crate::types::{CommitCert, LogEntry, NodeState, Snapshot, Term};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    None,
    /// Leader replicates two conflicting branches to two halves.
    Fork,
    /// Follower votes for a stale candidate after certifying an entry.
    BadVote,
    /// Client ends up holding a receipt that the honest log contradicts.
    ReceiptFraud,
    /// Live mode: leader drops client requests.
    SilentLeader,
    /// Live mode: two attackers hand leadership back and forth.
    PingPong,
}

/// Which term relation the receipt-fraud script produces between the
/// receipt's certificate and the honest node's certificate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FraudVariant {
    /// Same term: the leader withholds a commit and rewrites the slot.
    #[default]
    Equal,
    /// Receipt older: the leader goes silent and votes for a stale candidate.
    Lower,
    /// Receipt newer: a follower campaigns from a stale checkpoint.
    Higher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackPlan {
    pub kind: AttackKind,
    /// Position of the trigger transaction as a fraction of the workload.
    pub trigger_at: f64,
    pub byzantine: Vec<NodeId>,
    #[serde(default)]
    pub variant: FraudVariant,
}

impl AttackPlan {
    pub fn new(kind: AttackKind, trigger_at: f64, byzantine: Vec<NodeId>) -> AttackPlan {
        AttackPlan { kind, trigger_at, byzantine, variant: FraudVariant::Equal }
    }

    /// The attacker set a scenario uses when none is given.
    pub fn default_byzantine(kind: AttackKind, variant: FraudVariant, n: usize) -> Vec<NodeId> {
        let f = (n as u64 - 1) / 2;
        match (kind, variant) {
            (AttackKind::None, _) => vec![],
            (AttackKind::BadVote, _) | (AttackKind::ReceiptFraud, FraudVariant::Higher) => vec![NodeId(n as u64 - 1)],
            (AttackKind::PingPong, _) => vec![NodeId(0), NodeId(f)],
            _ => vec![NodeId(0)],
        }
    }

    /// Index of the trigger transaction in a workload of `count`.
    pub fn trigger_tx(&self, count: usize) -> usize {
        let last = count.saturating_sub(2);
        ((self.trigger_at * count as f64).floor() as usize).min(last)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error("attack {0:?} runs in base mode only")]
    NeedsBase(AttackKind),
    #[error("attack {0:?} runs in live mode only")]
    NeedsLive(AttackKind),
    #[error("attack {kind:?} needs {expected} byzantine node(s), got {got}")]
    ByzantineCount { kind: AttackKind, expected: usize, got: usize },
    #[error("byzantine node {0} is outside the cluster")]
    UnknownNode(NodeId),
    #[error("trigger position {0} is outside [0, 1]")]
    Trigger(f64),
    #[error("attack needs at least two transactions")]
    Workload,
    #[error("the byzantine follower cannot be the initial leader n0")]
    FollowerIsLeader,
    #[error("byzantine nodes must be distinct")]
    Duplicate,
}

/// Initial leader for follower-side attacks.
const L0: NodeId = NodeId(0);
/// Slack after the trigger for the honest leader to commit it.
const COMMIT_WINDOW: u64 = 100;
/// Timeout that keeps bystanders from interfering with a scripted election.
const QUIET: u64 = 5_000;
/// Timer token reserved for adversary hooks.
const HOOK: u64 = u64::MAX;
/// Tag for timer tokens of a second view.
const VIEW_B: u64 = 1 << 62;

fn expected_count(kind: AttackKind) -> usize {
    match kind {
        AttackKind::None => 0,
        AttackKind::PingPong => 2,
        _ => 1,
    }
}

/// Validates `plan`, adjusts the schedule in `cfg` and wraps the attackers'
/// nodes into scripted replicas.
pub fn install(plan: &AttackPlan, cfg: &mut SimConfig, mut nodes: Vec<Node>) -> Result<Vec<Box<dyn Replica>>, PlanError> {
    let mut wrapped: BTreeMap<NodeId, Box<dyn Replica>> = BTreeMap::new();
    install_into(plan, cfg, &mut nodes, &mut wrapped)?;
    Ok(nodes
        .into_iter()
        .map(|node| wrapped.remove(&node.id()).unwrap_or_else(|| Box::new(node)))
        .collect())
}

fn install_into(
    plan: &AttackPlan,
    cfg: &mut SimConfig,
    nodes: &mut [Node],
    replicas: &mut BTreeMap<NodeId, Box<dyn Replica>>,
) -> Result<(), PlanError> {
    let kind = plan.kind;
    if kind == AttackKind::None {
        return Ok(());
    }
    if !(0.0..=1.0).contains(&plan.trigger_at) {
        return Err(PlanError::Trigger(plan.trigger_at));
    }
    let expected = expected_count(kind);
    if plan.byzantine.len() != expected {
        return Err(PlanError::ByzantineCount { kind, expected, got: plan.byzantine.len() });
    }
    if plan.byzantine.iter().collect::<BTreeSet<_>>().len() != plan.byzantine.len() {
        return Err(PlanError::Duplicate);
    }
    if let Some(&b) = plan.byzantine.iter().find(|b| b.0 as usize >= cfg.n) {
        return Err(PlanError::UnknownNode(b));
    }
    let live = cfg.live.is_some();
    match kind {
        AttackKind::SilentLeader | AttackKind::PingPong if !live => return Err(PlanError::NeedsLive(kind)),
        AttackKind::Fork | AttackKind::BadVote | AttackKind::ReceiptFraud if live => {
            return Err(PlanError::NeedsBase(kind))
        }
        _ => {}
    }
    if matches!(kind, AttackKind::Fork | AttackKind::BadVote | AttackKind::ReceiptFraud) && cfg.workload.count < 2 {
        return Err(PlanError::Workload);
    }
    let k = plan.trigger_tx(cfg.workload.count);
    let trigger = Workload::payload(k);
    let t_k = cfg.workload.submit_time(k);
    let n = cfg.n;
    let f = cfg.f();
    let b = plan.byzantine.first().copied().unwrap_or(L0);
    let take = |nodes: &mut [Node], id: NodeId| -> Node { nodes[id.0 as usize].clone() };
    let start_at = |nodes: &mut [Node], cfg: &mut SimConfig, term: Term| {
        cfg.initial_term = term;
        for node in nodes.iter_mut() {
            node.set_term(term);
        }
    };
    let others = |skip: &[NodeId]| -> Vec<NodeId> { (0..n as u64).map(NodeId).filter(|i| !skip.contains(i)).collect() };

    match kind {
        AttackKind::None => {}
        AttackKind::Fork => {
            prefer_leader(cfg, b);
            let followers = others(&[b]);
            let (p, q) = followers.split_at(f);
            let node = take(nodes, b);
            replicas.insert(b, Box::new(ForkLeader::new(node, trigger, p.to_vec(), q.to_vec())));
        }
        AttackKind::BadVote => {
            if b == L0 {
                return Err(PlanError::FollowerIsLeader);
            }
            let sched = follower_schedule(cfg, b, t_k);
            let victim = sched.lacking[0];
            // Only the victim may time out while the honest leader is down.
            quiet_except(cfg, victim, t_k.saturating_sub(200), sched.resume + QUIET);
            cfg.election_bias.push(ElectionBias { node: victim, from: sched.resume, until: sched.resume + QUIET, timeout: 4 * cfg.delta });
            let node = take(nodes, b);
            replicas.insert(b, Box::new(BadVoter { node, victim, shadow: None }));
        }
        AttackKind::ReceiptFraud => match plan.variant {
            FraudVariant::Equal | FraudVariant::Lower => {
                prefer_leader(cfg, b);
                let followers = others(&[b]);
                let (p, q) = followers.split_at(f);
                let candidate = q[0];
                if plan.variant == FraudVariant::Lower {
                    quiet_except(cfg, candidate, t_k, u64::MAX);
                    let lo = cfg.election_timeout.0;
                    cfg.election_bias.push(ElectionBias { node: candidate, from: t_k, until: u64::MAX, timeout: lo });
                }
                let node = take(nodes, b);
                replicas.insert(b, Box::new(FraudLeader {
                    a: node,
                    checkpoint: None,
                    trigger,
                    partition: p.to_vec(),
                    variant: plan.variant,
                    phase: FraudPhase::Normal,
                }));
            }
            FraudVariant::Higher => {
                if b == L0 {
                    return Err(PlanError::FollowerIsLeader);
                }
                let sched = follower_schedule(cfg, b, t_k);
                quiet_except(cfg, b, t_k.saturating_sub(200), sched.resume + QUIET);
                let node = take(nodes, b);
                replicas.insert(b, Box::new(StaleCampaigner {
                    node,
                    checkpoint: None,
                    trigger,
                    switch_at: sched.resume + cfg.delta,
                    switched: false,
                    now: 0,
                }));
            }
        },
        AttackKind::SilentLeader => {
            start_at(nodes, cfg, first_term_led_by(b, n));
            let node = take(nodes, b);
            replicas.insert(b, Box::new(SilentLeader { node }));
        }
        AttackKind::PingPong => {
            let (a, c) = (plan.byzantine[0], plan.byzantine[1]);
            start_at(nodes, cfg, first_term_led_by(a, n));
            let half_a: Vec<NodeId> = others(&[a]).into_iter().skip(f - 1).take(f + 1).collect();
            let half_c: Vec<NodeId> = others(&[c]).into_iter().filter(|x| !half_a.contains(x) || *x == a).collect();
            let team: BTreeSet<NodeId> = plan.byzantine.iter().copied().collect();
            for (id, targets) in [(a, half_a), (c, half_c)] {
                let node = take(nodes, id);
                replicas.insert(id, Box::new(PingPong { node, targets, team: team.clone(), dummied: BTreeSet::new() }));
            }
        }
    }
    Ok(())
}

/// Lets `b` time out first so that it wins the first election.
fn prefer_leader(cfg: &mut SimConfig, b: NodeId) {
    let lo = cfg.election_timeout.0;
    cfg.election_bias.push(ElectionBias { node: b, from: 0, until: cfg.workload.start, timeout: (lo / 2).max(1) });
}

/// Makes every node except `keep` draw a long election timeout in the window.
fn quiet_except(cfg: &mut SimConfig, keep: NodeId, from: u64, until: u64) {
    for i in 0..cfg.n as u64 {
        if NodeId(i) != keep {
            cfg.election_bias.push(ElectionBias { node: NodeId(i), from, until, timeout: QUIET });
        }
    }
}

/// Smallest term whose round-robin candidate is `b`.
fn first_term_led_by(b: NodeId, n: usize) -> Term {
    // The first election after start is for `initial_term + 1`.
    (b.0 + n as u64 - 1) % n as u64
}

struct FollowerSchedule {
    lacking: Vec<NodeId>,
    /// When the lacking nodes are back and the honest leader is gone.
    resume: u64,
}

/// Shared script for the follower-side attacks: n0 leads, `f` nodes that
/// are neither n0 nor the attacker miss the trigger entry, then n0 crashes
/// and the lacking nodes come back.
fn follower_schedule(cfg: &mut SimConfig, m: NodeId, t_k: u64) -> FollowerSchedule {
    prefer_leader(cfg, L0);
    let f = cfg.f();
    let lacking: Vec<NodeId> = (0..cfg.n as u64).map(NodeId).filter(|i| *i != L0 && *i != m).take(f).collect();
    let leader_down = t_k + COMMIT_WINDOW;
    // Anything the old leader sent is delivered or dropped before they return.
    let resume = leader_down + cfg.delta + 1;
    for (k, &q) in lacking.iter().enumerate() {
        // The first lacking node goes down last, so the others hold a prefix
        // of its log and will vote for it.
        let down_at = t_k.saturating_sub(1 + k as u64 * (2 * cfg.delta + 1));
        cfg.crashes.push(CrashWindow { node: q, down_at, up_at: Some(resume) });
    }
    cfg.crashes.push(CrashWindow { node: L0, down_at: leader_down, up_at: None });
    FollowerSchedule { lacking, resume }
}

fn tag(out: Vec<Output>, bit: u64) -> Vec<Output> {
    out.into_iter()
        .map(|o| match o {
            Output::Timer { kind, token, delay } => Output::Timer { kind, token: token | bit, delay },
            o => o,
        })
        .collect()
}

fn is_commit(msg: &Message) -> bool {
    matches!(msg, Message::Commit(_))
}

/// Rewrites broadcasts into sends restricted to `allowed`.
fn restrict(out: Vec<Output>, allowed: &[NodeId], keep: impl Fn(&Message) -> bool) -> Vec<Output> {
    let mut res = Vec::with_capacity(out.len());
    for o in out {
        match o {
            Output::Send { to, msg } => {
                if allowed.contains(&to) && keep(&msg) {
                    res.push(Output::Send { to, msg });
                }
            }
            Output::Broadcast(msg) => {
                if keep(&msg) {
                    res.extend(allowed.iter().map(|&to| Output::Send { to, msg: msg.clone() }));
                }
            }
            o => res.push(o),
        }
    }
    res
}

/// Leader that splits its followers in two and feeds each half its own
/// branch from the trigger transaction on.
pub struct ForkLeader {
    a: Node,
    b: Option<Node>,
    trigger: Vec<u8>,
    p: Vec<NodeId>,
    q: Vec<NodeId>,
    /// Which branch each transaction went to.
    assign: BTreeMap<Vec<u8>, bool>,
    next_b: bool,
}

impl ForkLeader {
    fn new(a: Node, trigger: Vec<u8>, p: Vec<NodeId>, q: Vec<NodeId>) -> ForkLeader {
        ForkLeader { a, b: None, trigger, p, q, assign: BTreeMap::new(), next_b: true }
    }

    fn run(&mut self, on_b: bool, input: Input) -> Vec<Output> {
        match (on_b, self.b.as_mut()) {
            (true, Some(b)) => {
                let out = b.handle(input);
                tag(restrict(out, &self.q, |_| true), VIEW_B)
            }
            (_, None) => self.a.handle(input),
            (false, Some(_)) => {
                let out = self.a.handle(input);
                restrict(out, &self.p, |_| true)
            }
        }
    }
}

impl Replica for ForkLeader {
    fn id(&self) -> NodeId {
        self.a.id()
    }

    fn handle(&mut self, input: Input) -> Vec<Output> {
        match input {
            Input::Timer { kind, token } if token & VIEW_B != 0 => {
                self.run(true, Input::Timer { kind, token: token & !VIEW_B })
            }
            Input::Message { from, msg: Message::ClientTx { client, payload, second_trial } } => {
                if self.b.is_none() && self.a.is_leader() && payload == self.trigger {
                    self.b = Some(self.a.clone());
                    self.assign.insert(payload.clone(), false);
                }
                let on_b = match self.b {
                    None => false,
                    Some(_) => *self.assign.entry(payload.clone()).or_insert_with(|| {
                        let v = self.next_b;
                        self.next_b = !v;
                        v
                    }),
                };
                self.run(on_b, Input::Message { from, msg: Message::ClientTx { client, payload, second_trial } })
            }
            Input::Message { from: Endpoint::Node(p), msg } => {
                let on_b = self.q.contains(&p);
                self.run(on_b, Input::Message { from: Endpoint::Node(p), msg })
            }
            input => self.run(false, input),
        }
    }

    fn recover(&mut self) -> Vec<Output> {
        self.b = None;
        self.a.recover()
    }

    fn snapshot(&self) -> Snapshot {
        self.a.state().snapshot()
    }

    fn node(&self) -> &Node {
        &self.a
    }

    fn byzantine(&self) -> bool {
        true
    }
}

/// Follower that votes for the victim although the victim is stale, then
/// acknowledges the victim's entries from a shadow copy of its log.
pub struct BadVoter {
    node: Node,
    victim: NodeId,
    shadow: Option<NodeState>,
}

impl Replica for BadVoter {
    fn id(&self) -> NodeId {
        self.node.id()
    }

    fn handle(&mut self, input: Input) -> Vec<Output> {
        let victim = Endpoint::Node(self.victim);
        match input {
            Input::Message { from, msg: Message::RequestVote(req) }
                if from == victim && req.leader == self.victim && req.term > self.node.state().current_term =>
            {
                let mut shadow = self.node.state().clone();
                if shadow.pointer_at(req.freshness.index) == Some(req.pointer) {
                    shadow.truncate_after(req.freshness.index);
                    self.shadow = Some(shadow);
                }
                self.node.force_vote(self.victim, &req)
            }
            Input::Message { from, msg: Message::AppendEntries(ae) } if from == victim && self.shadow.is_some() => {
                let shadow = self.shadow.as_mut().expect("checked");
                let Some(head) = ae.entries.first() else { return vec![] };
                if head.index > shadow.last_index() + 1 {
                    return vec![];
                }
                shadow.splice(&ae.entries);
                let pointer = shadow.tip_pointer;
                let signature = self.node.keys().sign(&pointer);
                vec![Output::Send { to: self.victim, msg: Message::Ack { pointer, signature } }]
            }
            Input::Message { from, msg: Message::Commit(_) } if from == victim && self.shadow.is_some() => vec![],
            input => self.node.handle(input),
        }
    }

    fn recover(&mut self) -> Vec<Output> {
        self.node.recover()
    }

    fn snapshot(&self) -> Snapshot {
        self.node.state().snapshot()
    }

    fn node(&self) -> &Node {
        &self.node
    }

    fn byzantine(&self) -> bool {
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FraudPhase {
    Normal,
    /// Replicating the trigger to one half only, withholding its commit.
    Withholding,
    /// Equal variant: continuing from the checkpoint taken before the trigger.
    Rewritten,
    /// Lower variant: silent apart from voting for whoever asks.
    Silent,
}

/// Leader that hands a client a receipt for an entry it never lets the
/// cluster commit.
pub struct FraudLeader {
    a: Node,
    checkpoint: Option<Node>,
    trigger: Vec<u8>,
    partition: Vec<NodeId>,
    variant: FraudVariant,
    phase: FraudPhase,
}

impl FraudLeader {
    fn withheld(&mut self, out: Vec<Output>) -> Vec<Output> {
        let out = restrict(out, &self.partition, |m| !is_commit(m));
        let issued = out.iter().any(|o| matches!(o, Output::Receipt { receipt, .. } if receipt.first().payload == self.trigger));
        if !issued {
            return out;
        }
        match self.variant {
            FraudVariant::Lower => {
                self.phase = FraudPhase::Silent;
                out.into_iter().filter(|o| matches!(o, Output::Receipt { .. })).collect()
            }
            _ => {
                self.phase = FraudPhase::Rewritten;
                let mut ck = self.checkpoint.take().expect("checkpoint taken at trigger");
                let mut res = out;
                res.extend(ck.restart_timers());
                self.a = ck;
                res
            }
        }
    }
}

impl Replica for FraudLeader {
    fn id(&self) -> NodeId {
        self.a.id()
    }

    fn handle(&mut self, input: Input) -> Vec<Output> {
        match self.phase {
            FraudPhase::Normal => {
                let hit = matches!(&input, Input::Message { msg: Message::ClientTx { payload, .. }, .. } if *payload == self.trigger);
                if hit && self.a.is_leader() {
                    self.checkpoint = Some(self.a.clone());
                    self.phase = FraudPhase::Withholding;
                    let out = self.a.handle(input);
                    return self.withheld(out);
                }
                self.a.handle(input)
            }
            FraudPhase::Withholding => {
                if matches!(&input, Input::Message { msg: Message::ClientTx { .. }, .. }) {
                    return vec![];
                }
                let out = self.a.handle(input);
                self.withheld(out)
            }
            FraudPhase::Rewritten => self.a.handle(input),
            FraudPhase::Silent => match input {
                Input::Message { from: Endpoint::Node(c), msg: Message::RequestVote(req) }
                    if req.leader == c && req.term > self.a.state().current_term =>
                {
                    self.a
                        .force_vote(c, &req)
                        .into_iter()
                        .filter(|o| matches!(o, Output::Send { msg: Message::Vote { .. }, .. }))
                        .collect()
                }
                _ => vec![],
            },
        }
    }

    fn recover(&mut self) -> Vec<Output> {
        self.a.recover()
    }

    fn snapshot(&self) -> Snapshot {
        self.a.state().snapshot()
    }

    fn node(&self) -> &Node {
        &self.a
    }

    fn byzantine(&self) -> bool {
        true
    }
}

/// Follower that keeps a copy of its state from before the trigger entry
/// and, once the honest leader is gone, campaigns from that copy.
pub struct StaleCampaigner {
    node: Node,
    checkpoint: Option<Node>,
    trigger: Vec<u8>,
    switch_at: u64,
    switched: bool,
    now: u64,
}

impl Replica for StaleCampaigner {
    fn id(&self) -> NodeId {
        self.node.id()
    }

    fn set_time(&mut self, now: u64) {
        self.now = now;
    }

    fn handle(&mut self, input: Input) -> Vec<Output> {
        if let Input::Timer { token: HOOK, .. } = input {
            if self.switched {
                return vec![];
            }
            let Some(mut ck) = self.checkpoint.take() else { return vec![] };
            self.switched = true;
            ck.set_term(self.node.state().current_term);
            let mut out = ck.restart_timers();
            out.extend(ck.campaign());
            self.node = ck;
            return out;
        }
        let mut hook = Vec::new();
        if !self.switched && self.checkpoint.is_none() {
            if let Input::Message { msg: Message::AppendEntries(ae), .. } = &input {
                if ae.entries.iter().any(|e| e.payload == self.trigger) {
                    self.checkpoint = Some(self.node.clone());
                    let delay = self.switch_at.saturating_sub(self.now).max(1);
                    hook.push(Output::Timer { kind: TimerKind::Election, token: HOOK, delay: crate::protocol::Delay::Fixed(delay) });
                }
            }
        }
        let mut out = self.node.handle(input);
        out.extend(hook);
        out
    }

    fn recover(&mut self) -> Vec<Output> {
        self.node.recover()
    }

    fn snapshot(&self) -> Snapshot {
        self.node.state().snapshot()
    }

    fn node(&self) -> &Node {
        &self.node
    }

    fn byzantine(&self) -> bool {
        true
    }
}

/// Live-mode leader that keeps sending heartbeats but drops every request.
pub struct SilentLeader {
    node: Node,
}

impl Replica for SilentLeader {
    fn id(&self) -> NodeId {
        self.node.id()
    }

    fn handle(&mut self, input: Input) -> Vec<Output> {
        if self.node.is_leader() && matches!(&input, Input::Message { msg: Message::ClientTx { .. }, .. }) {
            return vec![];
        }
        self.node.handle(input)
    }

    fn recover(&mut self) -> Vec<Output> {
        self.node.recover()
    }

    fn snapshot(&self) -> Snapshot {
        self.node.state().snapshot()
    }

    fn node(&self) -> &Node {
        &self.node
    }

    fn byzantine(&self) -> bool {
        true
    }
}

/// One of two colluding live-mode attackers. As leader it appends a dummy
/// entry, replicates it to `targets` only, and drops requests, so that the
/// next honest candidates are too stale to win.
pub struct PingPong {
    node: Node,
    targets: Vec<NodeId>,
    team: BTreeSet<NodeId>,
    dummied: BTreeSet<Term>,
}

impl Replica for PingPong {
    fn id(&self) -> NodeId {
        self.node.id()
    }

    fn handle(&mut self, input: Input) -> Vec<Output> {
        match &input {
            Input::Message { msg: Message::ClientTx { .. }, .. } if self.node.is_leader() => return vec![],
            Input::Message { from: Endpoint::Node(c), msg: Message::RequestVote(_) } if !self.team.contains(c) => {
                return vec![]
            }
            _ => {}
        }
        let mut out = self.node.handle(input);
        let term = self.node.state().current_term;
        if self.node.is_leader() && self.dummied.insert(term) {
            self.node.append_as_leader(format!("dummy-{term}").into_bytes());
            out.extend(self.node.drain());
        }
        let targets = self.targets.clone();
        let keep = |m: &Message| !is_commit(m);
        out.into_iter()
            .filter_map(|o| match o {
                Output::Send { to, msg: msg @ Message::AppendEntries(_) } => {
                    targets.contains(&to).then_some(Output::Send { to, msg })
                }
                Output::Send { msg, .. } if !keep(&msg) => None,
                Output::Broadcast(msg) if !keep(&msg) => None,
                o => Some(o),
            })
            .collect()
    }

    fn recover(&mut self) -> Vec<Output> {
        self.node.recover()
    }

    fn snapshot(&self) -> Snapshot {
        self.node.state().snapshot()
    }

    fn node(&self) -> &Node {
        &self.node
    }

    fn byzantine(&self) -> bool {
        true
    }
}

/// What a Byzantine node hands the auditor instead of its real snapshot.
#[derive(Clone, Debug, PartialEq)]
pub enum SnapshotTamper {
    Honest,
    /// Cut the log back to the position of an older certificate it holds.
    Truncate(CommitCert),
    /// Append an entry nobody signed.
    Fabricate,
}

impl SnapshotTamper {
    pub fn apply(&self, snap: &Snapshot) -> Snapshot {
        let mut s = snap.clone();
        match self {
            SnapshotTamper::Honest => {}
            SnapshotTamper::Truncate(cc) => {
                s.log.truncate(cc.index as usize + 1);
                s.cert = Some(cc.clone());
                let terms: BTreeSet<Term> = s.log[1..].iter().map(|e| e.term).collect();
                s.leader_sigs.retain(|t, _| terms.contains(t));
                // The certificate carries its leader's signature on the new tip.
                let leader = s.elections.get(&cc.term).map(|lc| lc.leader());
                if let Some(sig) = cc.signatures.iter().find(|sig| Some(sig.signer) == leader) {
                    s.leader_sigs.insert(cc.term, sig.clone());
                }
            }
            SnapshotTamper::Fabricate => {
                let tail = s.log.last().cloned().unwrap_or_else(LogEntry::init);
                s.log.push(LogEntry::new(tail.term.max(1), tail.index + 1, b"fabricated".to_vec()));
            }
        }
        s
    }
}
