use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use crate::crypto::{verify_quorum_cert, Digest, KeyPair, NodeId, PublicRegistry, Signature};
use crate::live::LiveState;
use crate::types::{Index, LeaderCert, LogEntry, NodeState, Role, VoteRequest};

use super::{Delay, Endpoint, Input, Message, Mode, NodeConfig, NodeEvent, Output, TimerKind};

#[derive(Clone)]
pub(crate) struct Candidacy {
    pub request: VoteRequest,
    pub votes: BTreeMap<NodeId, Signature>,
    pub rejections: BTreeSet<NodeId>,
}

/// An in-flight replication round for one tip of the leader's log.
#[derive(Clone)]
pub(super) struct Round {
    pub index: Index,
    pub pointer: Digest,
    pub own: Signature,
    pub acks: BTreeMap<NodeId, Signature>,
}

#[derive(Clone)]
pub(super) struct LeaderCtx {
    pub next_index: BTreeMap<NodeId, Index>,
    pub pointer_index: HashMap<Digest, Index>,
    pub round: Option<Round>,
    /// Clients waiting for a receipt, keyed by the index of their entry.
    pub waiting: BTreeMap<Index, Vec<super::ClientId>>,
    pub committed_known: BTreeMap<NodeId, Index>,
    /// Followers that have answered at least once this term.
    pub confirmed: BTreeSet<NodeId>,
}

/// One replica running the accountable protocol.
#[derive(Clone)]
pub struct Node {
    pub(crate) state: NodeState,
    pub(crate) keys: KeyPair,
    pub(crate) registry: Arc<PublicRegistry>,
    pub(crate) cfg: NodeConfig,
    pub(crate) leader: Option<NodeId>,
    tokens: BTreeMap<TimerKind, u64>,
    next_token: u64,
    pub(crate) payload_index: HashMap<Vec<u8>, Index>,
    pub(crate) candidacy: Option<Candidacy>,
    pub(super) lead: Option<LeaderCtx>,
    pub(crate) live: LiveState,
    out: Vec<Output>,
}

impl Node {
    pub fn new(keys: KeyPair, registry: Arc<PublicRegistry>, cfg: NodeConfig) -> Node {
        let state = NodeState::new(keys.id());
        Node::from_state(state, keys, registry, cfg)
    }

    /// Rebuilds a node from persisted state. Volatile state starts empty.
    pub fn from_state(mut state: NodeState, keys: KeyPair, registry: Arc<PublicRegistry>, cfg: NodeConfig) -> Node {
        state.rebuild_pointers();
        let mut node = Node {
            state,
            keys,
            registry,
            cfg,
            leader: None,
            tokens: BTreeMap::new(),
            next_token: 1,
            payload_index: HashMap::new(),
            candidacy: None,
            lead: None,
            live: LiveState::default(),
            out: Vec::new(),
        };
        node.reset_volatile();
        node
    }

    pub fn id(&self) -> NodeId {
        self.state.id
    }

    pub fn state(&self) -> &NodeState {
        &self.state
    }

    pub fn leader(&self) -> Option<NodeId> {
        self.leader
    }

    pub fn is_leader(&self) -> bool {
        self.state.role == Role::Leader
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn f(&self) -> usize {
        self.cfg.f()
    }

    pub fn keys(&self) -> &KeyPair {
        &self.keys
    }

    pub fn registry(&self) -> &PublicRegistry {
        &self.registry
    }

    /// Overrides the current term, e.g. to start a cluster mid-history.
    pub fn set_term(&mut self, term: u64) {
        self.state.current_term = term;
    }

    /// Crash recovery: persistent state survives, everything else restarts.
    pub fn recover(&mut self) -> Vec<Output> {
        self.reset_volatile();
        self.handle(Input::Start)
    }

    fn reset_volatile(&mut self) {
        self.state.role = Role::Follower;
        self.leader = self
            .state
            .election_list
            .get(&self.state.current_term)
            .map(LeaderCert::leader)
            .filter(|l| *l != self.state.id);
        self.candidacy = None;
        self.lead = None;
        self.live = LiveState::default();
        // Invalidate every timer armed before the crash.
        self.next_token += 1 << 20;
        self.tokens.clear();
        self.payload_index = self.state.log[1..].iter().map(|e| (e.payload.clone(), e.index)).collect();
    }

    pub fn handle(&mut self, input: Input) -> Vec<Output> {
        match input {
            Input::Start => self.on_start(),
            Input::Timer { kind, token } => {
                if self.tokens.get(&kind) == Some(&token) {
                    self.tokens.remove(&kind);
                    self.on_timer(kind);
                }
            }
            Input::Message { from, msg } => self.on_message(from, msg),
        }
        std::mem::take(&mut self.out)
    }

    fn on_start(&mut self) {
        match self.cfg.mode {
            Mode::Base => self.set_timer(TimerKind::Election, Delay::Election),
            Mode::Live(_) => self.live_start(),
        }
    }

    fn on_timer(&mut self, kind: TimerKind) {
        match (kind, self.cfg.live().is_some()) {
            (TimerKind::Election, false) => self.on_election_timeout(),
            (TimerKind::Heartbeat, _) => self.on_heartbeat_tick(),
            (_, true) => self.live_timer(kind),
            _ => {}
        }
    }

    fn on_message(&mut self, from: Endpoint, msg: Message) {
        if let Message::ClientTx { client, payload, second_trial } = msg {
            if payload.len() <= crate::types::MAX_PAYLOAD {
                self.on_client_tx(from, client, payload, second_trial);
            }
            return;
        }
        let Endpoint::Node(from) = from else { return };
        if from == self.state.id {
            return;
        }
        let live = self.cfg.live().is_some();
        match msg {
            Message::RequestVote(req) if live => self.live_request_vote(from, req),
            Message::RequestVote(req) => self.on_request_vote(from, req),
            Message::Vote { term, signature } if live => self.live_vote(from, term, signature),
            Message::Vote { term, signature } => self.on_vote(from, term, signature),
            Message::Reject { term, kind } => self.on_reject(from, term, kind),
            Message::LeaderCert(lc) if live => self.live_leader_cert(from, lc),
            Message::LeaderCert(lc) => self.on_leader_cert(from, lc),
            Message::AppendEntries(ae) => self.on_append_entries(from, ae),
            Message::Ack { pointer, signature } => self.on_ack(from, pointer, signature),
            Message::LogSync { term, index, pointer } => self.on_log_sync(from, term, index, pointer),
            Message::Commit(cc) => self.on_commit(from, cc),
            Message::Committed { index } => self.on_committed(from, index),
            Message::Heartbeat { term } => self.on_heartbeat(from, term),
            Message::Prevote(pv) if live => self.live_prevote(from, pv),
            Message::PrevoteBundle(b) if live => self.live_bundle(b),
            Message::Prevote(_) | Message::PrevoteBundle(_) | Message::ClientTx { .. } => {}
        }
    }

    // ---- output helpers ----

    pub(crate) fn send(&mut self, to: NodeId, msg: Message) {
        self.out.push(Output::Send { to, msg });
    }

    pub(crate) fn broadcast(&mut self, msg: Message) {
        self.out.push(Output::Broadcast(msg));
    }

    pub(crate) fn emit(&mut self, ev: NodeEvent) {
        self.out.push(Output::Event(ev));
    }

    pub(crate) fn push(&mut self, out: Output) {
        self.out.push(out);
    }

    pub(crate) fn set_timer(&mut self, kind: TimerKind, delay: Delay) {
        let token = self.next_token;
        self.next_token += 1;
        self.tokens.insert(kind, token);
        self.out.push(Output::Timer { kind, token, delay });
    }

    pub(crate) fn cancel_timer(&mut self, kind: TimerKind) {
        self.tokens.remove(&kind);
    }

    pub(crate) fn cancel_timers_where(&mut self, pred: impl Fn(&TimerKind) -> bool) {
        self.tokens.retain(|k, _| !pred(k));
    }

    // ---- shared state helpers ----

    pub(crate) fn peers(&self) -> impl Iterator<Item = NodeId> + '_ {
        let me = self.state.id;
        (0..self.cfg.n as u64).map(NodeId).filter(move |p| *p != me)
    }

    pub(crate) fn verify_lc(&self, lc: &LeaderCert) -> bool {
        verify_quorum_cert(lc, &self.registry, self.f()).is_ok()
    }

    /// Checks `sig` as the signature of the leader named by `lc` over `h`.
    pub(crate) fn verify_leader_sig(&self, sig: &Signature, h: &Digest, lc: Option<&LeaderCert>) -> bool {
        match lc {
            Some(lc) => sig.signer == lc.leader() && self.registry.verify(sig, h),
            None => false,
        }
    }

    pub(crate) fn append_local(&mut self, entry: LogEntry) -> Digest {
        self.payload_index.insert(entry.payload.clone(), entry.index);
        let h = self.state.append(entry);
        if let Some(lead) = self.lead.as_mut() {
            lead.pointer_index.insert(h, self.state.last_index());
        }
        h
    }

    pub(crate) fn splice_local(&mut self, entries: &[LogEntry]) {
        let Some(head) = entries.first() else { return };
        for e in &self.state.log[head.index as usize..] {
            if self.payload_index.get(&e.payload) == Some(&e.index) {
                self.payload_index.remove(&e.payload);
            }
        }
        self.state.splice(entries);
        for e in entries {
            self.payload_index.insert(e.payload.clone(), e.index);
        }
    }

    /// Index of the entry carrying `payload`, if it is in the log.
    pub fn find_payload(&self, payload: &[u8]) -> Option<Index> {
        self.payload_index.get(payload).copied()
    }

    // ---- hooks for scripted adversaries ----

    /// Takes outputs produced outside [`Node::handle`].
    pub(crate) fn drain(&mut self) -> Vec<Output> {
        std::mem::take(&mut self.out)
    }

    /// Signs `req` regardless of freshness.
    pub(crate) fn force_vote(&mut self, from: NodeId, req: &VoteRequest) -> Vec<Output> {
        self.step_down(req.term);
        self.grant_vote(from, req);
        if self.cfg.live().is_none() {
            self.set_timer(TimerKind::Election, Delay::Election);
        }
        self.drain()
    }

    /// Starts a candidacy for the next term right away.
    pub(crate) fn campaign(&mut self) -> Vec<Output> {
        self.start_candidacy(self.state.current_term + 1);
        if self.cfg.live().is_none() {
            self.set_timer(TimerKind::Election, Delay::Election);
        }
        self.drain()
    }

    /// Forgets every armed timer and arms the ones the current role needs.
    /// Used when a cloned view takes over from another.
    pub(crate) fn restart_timers(&mut self) -> Vec<Output> {
        self.next_token += 1 << 30;
        self.tokens.clear();
        if self.is_leader() {
            let hb = self.cfg.heartbeat;
            self.set_timer(TimerKind::Heartbeat, Delay::Fixed(hb));
        } else {
            self.on_start();
        }
        self.drain()
    }

    pub(crate) fn step_down(&mut self, term: u64) {
        self.state.current_term = term;
        self.state.role = Role::Follower;
        self.leader = None;
        self.candidacy = None;
        if self.lead.take().is_some() {
            self.cancel_timer(TimerKind::Heartbeat);
        }
    }
}
