//! Operational semantics of a small distributed machine: per-node heaps,
//! UDP-style datagram sockets, and a global message soup.
//!
//! Threads are state machines that emit one atomic [`Effect`] per scheduler
//! step. System steps deliver soup messages into socket buffers or drop them;
//! a receive consumes the newest buffered message, which datagram semantics
//! permit and which keeps a backlogged reader current instead of forever
//! draining stale history. Everything is deterministic given the initial
//! machine, a scheduler policy, and a seed.

pub mod sched;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::traces::FiniteTrace;

/// Node index into the machine's node table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u16);

/// Thread identifier; forked threads get the next id in spawn order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Tid(pub u32);

/// Heap location, fresh per node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Loc(pub u32);

/// Socket handle, fresh per node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Handle(pub u32);

/// Message identifier, unique per simulation; lets the soup act as a multiset
/// even when two messages carry identical bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MsgId(pub u64);

/// Network address: node name plus port.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SocketAddr {
    pub ip: String,
    pub port: u16,
}

impl SocketAddr {
    pub fn new(ip: impl Into<String>, port: u16) -> Self {
        SocketAddr { ip: ip.into(), port }
    }
}

/// A message in flight or in a buffer. Wire equality is `(from, to, body)`;
/// `id` exists only for bookkeeping.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub id: MsgId,
    pub from: SocketAddr,
    pub to: SocketAddr,
    pub body: String,
}

/// Heap values. Protocol payloads on the wire are strings; the heap also
/// stores the naturals, vectors and option cells the protocol threads use.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Value {
    Unit,
    Bool(bool),
    Nat(u64),
    Str(String),
    Vect(Vec<u64>),
    OptNat(Option<u64>),
    OptVote(Option<(u64, String)>),
}

impl Value {
    pub fn as_nat(&self) -> u64 {
        match self {
            Value::Nat(n) => *n,
            other => panic!("expected Nat, got {other:?}"),
        }
    }
    pub fn as_vect(&self) -> &Vec<u64> {
        match self {
            Value::Vect(v) => v,
            other => panic!("expected Vect, got {other:?}"),
        }
    }
}

/// Per-socket state. A freshly bound socket is blocking with an empty buffer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SocketState {
    pub bound: Option<SocketAddr>,
    pub blocking: bool,
    pub buffer: VecDeque<MsgId>,
}

/// What a thread asks the machine to do in one atomic step.
pub enum Effect {
    /// No-op step; `tag` lets couplings recognize protocol-significant no-ops.
    Pure { tag: Option<&'static str> },
    /// Draw one Bernoulli(1/2) bit from the machine's seeded coin stream.
    Coin,
    Alloc { label: Option<String>, value: Value },
    Load { loc: Loc },
    Store { loc: Loc, value: Value },
    Cas { loc: Loc, expect: Value, new: Value },
    Fork { program: Box<dyn ThreadProgram> },
    NewSocket,
    Bind { handle: Handle, addr: SocketAddr },
    SetBlocking { handle: Handle, blocking: bool },
    Send { handle: Handle, to: SocketAddr, body: String },
    Receive { handle: Handle },
    /// Runtime assertion; `ok = false` aborts the run as an assertion failure.
    Check { ok: bool, reason: String },
    Halt { value: Value },
    /// Thread-reported dead end (e.g. malformed wire input).
    Stuck { reason: String },
}

/// Serializable summary of an applied effect, recorded per step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EffectKind {
    Pure { tag: Option<String> },
    Coin { value: bool },
    Alloc { loc: Loc, label: Option<String> },
    Load { loc: Loc },
    Store { loc: Loc },
    Cas { loc: Loc, success: bool },
    Fork { child: Tid },
    NewSocket { handle: Handle },
    Bind { handle: Handle },
    SetBlocking { blocking: bool },
    Send { msg: MsgId },
    Recv { msg: Option<MsgId> },
    /// Blocking receive on an empty buffer: the step reduces to itself.
    RecvBlocked,
    Check { ok: bool },
    Halt,
}

/// Value fed back into a thread for its previous effect.
#[derive(Clone, Debug)]
pub enum EffectResult {
    /// Fed to the very first step of a thread.
    Start,
    Unit,
    Loc(Loc),
    Value(Value),
    Cas(bool),
    Handle(Handle),
    Received(Option<(String, SocketAddr)>),
    Coin(bool),
    Child(Tid),
}

impl EffectResult {
    pub fn loc(&self) -> Loc {
        match self {
            EffectResult::Loc(l) => *l,
            other => panic!("expected Loc result, got {other:?}"),
        }
    }
    pub fn value(&self) -> &Value {
        match self {
            EffectResult::Value(v) => v,
            other => panic!("expected Value result, got {other:?}"),
        }
    }
    pub fn cas(&self) -> bool {
        match self {
            EffectResult::Cas(b) => *b,
            other => panic!("expected Cas result, got {other:?}"),
        }
    }
    pub fn handle(&self) -> Handle {
        match self {
            EffectResult::Handle(h) => *h,
            other => panic!("expected Handle result, got {other:?}"),
        }
    }
    pub fn received(&self) -> &Option<(String, SocketAddr)> {
        match self {
            EffectResult::Received(r) => r,
            other => panic!("expected Received result, got {other:?}"),
        }
    }
    pub fn coin(&self) -> bool {
        match self {
            EffectResult::Coin(b) => *b,
            other => panic!("expected Coin result, got {other:?}"),
        }
    }
    pub fn child(&self) -> Tid {
        match self {
            EffectResult::Child(t) => *t,
            other => panic!("expected Child result, got {other:?}"),
        }
    }
}

/// A protocol thread as a deterministic state machine.
///
/// Each call consumes the result of the previously emitted effect and returns
/// the next effect. The machine guarantees call order; programs never see
/// results out of sequence.
pub trait ThreadProgram: Send {
    fn step(&mut self, input: EffectResult) -> Effect;
    /// Downcast hook so tests and checks can inspect final program state.
    fn as_any(&self) -> &dyn std::any::Any;
}

/// Observable events emitted by thread steps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Event {
    Alloc { label: String, loc: Loc, node: NodeId },
    Send { msg: MsgId },
    Recv { msg: MsgId, node: NodeId },
}

/// One transition of the whole system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StepLabel {
    Thread(Tid),
    Deliver(MsgId),
    Drop(MsgId),
}

/// Step metadata recorded alongside each configuration in an execution trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub label: StepLabel,
    pub effect: Option<EffectKind>,
    pub events: Vec<Event>,
}

/// Per-index view of a machine execution. Holds the heaps plus ledger
/// counters rather than the full configuration: soup and socket buffers can
/// grow with the horizon, and snapshotting them every step would make long
/// runs quadratic. Message history stays reconstructible per index through
/// the machine's append-only logs and the counters here.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Snapshot {
    pub heaps: Vec<BTreeMap<Loc, Value>>,
    pub soup_len: usize,
    pub sent_len: usize,
    pub consumed_len: usize,
    pub dropped_len: usize,
}

impl Snapshot {
    pub fn of(cfg: &Configuration) -> Self {
        Snapshot {
            heaps: cfg.heaps.clone(),
            soup_len: cfg.soup.len(),
            sent_len: cfg.sent_len,
            consumed_len: cfg.consumed_len,
            dropped_len: cfg.dropped_len,
        }
    }

    /// FNV-1a digest of one node's heap at this index.
    pub fn heap_digest(&self, node: NodeId) -> u64 {
        let mut h = Fnv::new();
        for (loc, v) in &self.heaps[node.0 as usize] {
            h.write_u64(loc.0 as u64);
            h.write_value(v);
        }
        h.finish()
    }
}

/// A machine execution: the snapshot sequence plus, for each transition, the
/// step record that produced it. `steps[i]` leads into `snaps[i + 1]`.
#[derive(Clone, Debug)]
pub struct ExecTrace {
    pub snaps: FiniteTrace<Snapshot>,
    pub steps: Vec<StepRecord>,
}

impl ExecTrace {
    pub fn new(init: Snapshot) -> Self {
        ExecTrace { snaps: FiniteTrace::singleton(init), steps: Vec::new() }
    }

    pub fn push(&mut self, snap: Snapshot, rec: StepRecord) {
        self.snaps.push(snap);
        self.steps.push(rec);
    }

    /// Removes the last transition (snapshot plus its step record); no-op on
    /// the initial singleton.
    pub fn pop(&mut self) -> Option<(Snapshot, StepRecord)> {
        let snap = self.snaps.pop()?;
        let rec = self.steps.pop().expect("steps track snapshots");
        Some((snap, rec))
    }

    pub fn len(&self) -> usize {
        self.snaps.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn last_snap(&self) -> &Snapshot {
        self.snaps.last()
    }
}

/// Thread lifecycle as visible in configuration snapshots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThreadStatus {
    Running,
    /// Parked on a blocking receive; still schedulable (the step no-ops).
    Blocked,
    Halted(Value),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadMeta {
    pub node: NodeId,
    pub status: ThreadStatus,
}

/// Snapshot of the machine state at one trace index.
///
/// Ledger fields (`sent_len`, `consumed_len`, `dropped_len`) are prefix
/// lengths into the machine's append-only logs, so snapshots stay small while
/// the ever-sent multiset remains reconstructible per index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Configuration {
    pub heaps: Vec<BTreeMap<Loc, Value>>,
    pub sockets: Vec<BTreeMap<Handle, SocketState>>,
    pub ports: Vec<BTreeSet<u16>>,
    pub soup: BTreeSet<MsgId>,
    pub threads: Vec<ThreadMeta>,
    pub sent_len: usize,
    pub consumed_len: usize,
    pub dropped_len: usize,
}

impl Configuration {
    pub fn all_halted(&self) -> bool {
        self.threads.iter().all(|t| matches!(t.status, ThreadStatus::Halted(_)))
    }

    pub fn halted_value(&self, tid: Tid) -> Option<&Value> {
        match &self.threads.get(tid.0 as usize)?.status {
            ThreadStatus::Halted(v) => Some(v),
            _ => None,
        }
    }

    /// FNV-1a digest of one node's heap, sockets and ports. Deterministic
    /// because the underlying maps iterate in key order.
    pub fn node_digest(&self, node: NodeId) -> u64 {
        let mut h = Fnv::new();
        let i = node.0 as usize;
        for (loc, v) in &self.heaps[i] {
            h.write_u64(loc.0 as u64);
            h.write_value(v);
        }
        for (handle, s) in &self.sockets[i] {
            h.write_u64(handle.0 as u64);
            match &s.bound {
                None => h.write_u64(0),
                Some(a) => {
                    h.write_bytes(a.ip.as_bytes());
                    h.write_u64(a.port as u64);
                }
            }
            h.write_u64(s.blocking as u64);
            for m in &s.buffer {
                h.write_u64(m.0);
            }
        }
        for p in &self.ports[i] {
            h.write_u64(*p as u64);
        }
        h.finish()
    }
}

/// Minimal FNV-1a, kept local so digests are stable across platforms and
/// library versions.
struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf29ce484222325)
    }
    fn write_bytes(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }
    fn write_u64(&mut self, x: u64) {
        self.write_bytes(&x.to_le_bytes());
    }
    fn write_value(&mut self, v: &Value) {
        match v {
            Value::Unit => self.write_u64(1),
            Value::Bool(b) => {
                self.write_u64(2);
                self.write_u64(*b as u64);
            }
            Value::Nat(n) => {
                self.write_u64(3);
                self.write_u64(*n);
            }
            Value::Str(s) => {
                self.write_u64(4);
                self.write_bytes(s.as_bytes());
            }
            Value::Vect(xs) => {
                self.write_u64(5);
                for x in xs {
                    self.write_u64(*x);
                }
            }
            Value::OptNat(o) => {
                self.write_u64(6);
                match o {
                    None => self.write_u64(0),
                    Some(n) => {
                        self.write_u64(1);
                        self.write_u64(*n);
                    }
                }
            }
            Value::OptVote(o) => {
                self.write_u64(7);
                match o {
                    None => self.write_u64(0),
                    Some((b, v)) => {
                        self.write_u64(1);
                        self.write_u64(*b);
                        self.write_bytes(v.as_bytes());
                    }
                }
            }
        }
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

/// Errors from applying a step. These are always surfaced to the caller;
/// a stuck thread is a checkable outcome, not a panic.
#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize)]
pub enum StepError {
    #[error("thread {0:?} is halted or does not exist")]
    NotRunnable(Tid),
    #[error("thread {tid:?}: location {loc:?} not allocated")]
    Unallocated { tid: Tid, loc: Loc },
    #[error("thread {tid:?}: socket {handle:?} does not exist")]
    NoSuchSocket { tid: Tid, handle: Handle },
    #[error("thread {tid:?}: operation requires a bound socket")]
    SocketNotBound { tid: Tid, handle: Handle },
    #[error("thread {tid:?}: socket {handle:?} already bound")]
    SocketAlreadyBound { tid: Tid, handle: Handle },
    #[error("thread {tid:?}: port {port} already in use on its node")]
    PortInUse { tid: Tid, port: u16 },
    #[error("thread {tid:?}: cannot bind to foreign address {ip}")]
    BindForeignAddress { tid: Tid, ip: String },
    #[error("thread {tid:?}: assertion failed: {reason}")]
    AssertionFailed { tid: Tid, reason: String },
    #[error("thread {tid:?} stuck: {reason}")]
    ThreadStuck { tid: Tid, reason: String },
    #[error("message {0:?} is not in the soup")]
    NotInSoup(MsgId),
    #[error("message {0:?} has no bound destination socket; delivery not enabled")]
    DeliverNotEnabled(MsgId),
}

impl StepError {
    /// True for errors that should surface as assertion failures rather than
    /// stuck threads.
    pub fn is_assertion(&self) -> bool {
        matches!(self, StepError::AssertionFailed { .. })
    }
}

/// Result of successfully applying one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Applied {
    pub effect: Option<EffectKind>,
    pub events: Vec<Event>,
}

enum Phase {
    /// Ready to run: feed this result into the program's next step.
    Feed(EffectResult),
    /// Parked on a blocking receive for this handle.
    AwaitBuffer(Handle),
    Done,
}

struct Slot {
    program: Box<dyn ThreadProgram>,
    phase: Phase,
}

/// The live simulator: configuration plus thread programs and append-only
/// message ledgers.
pub struct Machine {
    nodes: Vec<String>,
    node_index: BTreeMap<String, NodeId>,
    slots: Vec<Slot>,
    msg_table: Vec<Message>,
    consumed_log: Vec<MsgId>,
    dropped_log: Vec<MsgId>,
    alloc_log: Vec<(String, Loc, NodeId)>,
    next_loc: Vec<u32>,
    next_handle: Vec<u32>,
    coin_rng: ChaCha8Rng,
    coin_overrides: BTreeMap<Tid, bool>,
    pub config: Configuration,
}

/// Builder fixing node order and initial threads before the run starts.
pub struct MachineBuilder {
    nodes: Vec<String>,
    threads: Vec<(NodeId, Box<dyn ThreadProgram>)>,
    coin_overrides: BTreeMap<Tid, bool>,
    seed: u64,
}

impl MachineBuilder {
    pub fn new(seed: u64) -> Self {
        MachineBuilder { nodes: Vec::new(), threads: Vec::new(), coin_overrides: BTreeMap::new(), seed }
    }

    pub fn add_node(&mut self, ip: impl Into<String>) -> NodeId {
        let id = NodeId(self.nodes.len() as u16);
        self.nodes.push(ip.into());
        id
    }

    pub fn spawn(&mut self, node: NodeId, program: Box<dyn ThreadProgram>) -> Tid {
        let tid = Tid(self.threads.len() as u32);
        self.threads.push((node, program));
        tid
    }

    /// Forces the outcome of every `Coin` effect drawn by `tid`.
    pub fn force_coin(&mut self, tid: Tid, value: bool) {
        self.coin_overrides.insert(tid, value);
    }

    pub fn build(self) -> Machine {
        let n = self.nodes.len();
        let mut node_index = BTreeMap::new();
        for (i, name) in self.nodes.iter().enumerate() {
            node_index.insert(name.clone(), NodeId(i as u16));
        }
        let mut coin_rng = ChaCha8Rng::seed_from_u64(self.seed);
        coin_rng.set_stream(1);
        let mut slots = Vec::new();
        let mut threads = Vec::new();
        for (node, program) in self.threads {
            slots.push(Slot { program, phase: Phase::Feed(EffectResult::Start) });
            threads.push(ThreadMeta { node, status: ThreadStatus::Running });
        }
        Machine {
            nodes: self.nodes,
            node_index,
            slots,
            msg_table: Vec::new(),
            consumed_log: Vec::new(),
            dropped_log: Vec::new(),
            alloc_log: Vec::new(),
            next_loc: vec![0; n],
            next_handle: vec![0; n],
            coin_rng,
            coin_overrides: self.coin_overrides,
            config: Configuration {
                heaps: vec![BTreeMap::new(); n],
                sockets: vec![BTreeMap::new(); n],
                ports: vec![BTreeSet::new(); n],
                soup: BTreeSet::new(),
                threads,
                sent_len: 0,
                consumed_len: 0,
                dropped_len: 0,
            },
        }
    }
}

impl Machine {
    pub fn node_name(&self, node: NodeId) -> &str {
        &self.nodes[node.0 as usize]
    }

    pub fn node_id(&self, ip: &str) -> Option<NodeId> {
        self.node_index.get(ip).copied()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn thread_count(&self) -> usize {
        self.slots.len()
    }

    pub fn message(&self, id: MsgId) -> &Message {
        &self.msg_table[id.0 as usize]
    }

    /// Every message ever sent, in send order.
    pub fn sent_log(&self) -> &[Message] {
        &self.msg_table
    }

    pub fn consumed_log(&self) -> &[MsgId] {
        &self.consumed_log
    }

    pub fn dropped_log(&self) -> &[MsgId] {
        &self.dropped_log
    }

    /// Labeled allocations in the order they happened.
    pub fn alloc_log(&self) -> &[(String, Loc, NodeId)] {
        &self.alloc_log
    }

    pub fn all_halted(&self) -> bool {
        self.config.all_halted()
    }

    pub fn program(&self, tid: Tid) -> &dyn ThreadProgram {
        self.slots[tid.0 as usize].program.as_ref()
    }

    /// True if the soup message has a bound destination socket right now.
    pub fn deliverable(&self, id: MsgId) -> bool {
        self.dest_socket(id).is_some()
    }

    fn dest_socket(&self, id: MsgId) -> Option<(NodeId, Handle)> {
        let msg = self.msg_table.get(id.0 as usize)?;
        let node = self.node_index.get(&msg.to.ip).copied()?;
        let socks = &self.config.sockets[node.0 as usize];
        socks
            .iter()
            .find(|(_, s)| s.bound.as_ref() == Some(&msg.to))
            .map(|(h, _)| (node, *h))
    }

    /// All enabled step labels in deterministic order: thread steps by tid,
    /// then deliveries, then drops, each by message id.
    pub fn enabled_steps(&self) -> Vec<StepLabel> {
        let mut out = Vec::new();
        for (i, t) in self.config.threads.iter().enumerate() {
            if !matches!(t.status, ThreadStatus::Halted(_)) {
                out.push(StepLabel::Thread(Tid(i as u32)));
            }
        }
        for id in &self.config.soup {
            if self.deliverable(*id) {
                out.push(StepLabel::Deliver(*id));
            }
        }
        for id in &self.config.soup {
            out.push(StepLabel::Drop(*id));
        }
        out
    }

    /// Applies one step. On error the machine is unchanged except that the
    /// offending thread step consumed no state.
    pub fn apply(&mut self, label: StepLabel) -> Result<Applied, StepError> {
        match label {
            StepLabel::Thread(tid) => self.step_thread(tid),
            StepLabel::Deliver(id) => self.sys_deliver(id),
            StepLabel::Drop(id) => self.sys_drop(id),
        }
    }

    /// Moves a soup message into its destination buffer. Enabled only when the
    /// destination socket is bound.
    pub fn sys_deliver(&mut self, id: MsgId) -> Result<Applied, StepError> {
        if !self.config.soup.contains(&id) {
            return Err(StepError::NotInSoup(id));
        }
        let (node, handle) = self.dest_socket(id).ok_or(StepError::DeliverNotEnabled(id))?;
        self.config.soup.remove(&id);
        self.config.sockets[node.0 as usize]
            .get_mut(&handle)
            .expect("socket exists")
            .buffer
            .push_back(id);
        Ok(Applied { effect: None, events: vec![] })
    }

    /// Removes a soup message permanently.
    pub fn sys_drop(&mut self, id: MsgId) -> Result<Applied, StepError> {
        if !self.config.soup.remove(&id) {
            return Err(StepError::NotInSoup(id));
        }
        self.dropped_log.push(id);
        self.config.dropped_len = self.dropped_log.len();
        Ok(Applied { effect: None, events: vec![] })
    }

    /// Runs one atomic step of `tid`.
    pub fn step_thread(&mut self, tid: Tid) -> Result<Applied, StepError> {
        let idx = tid.0 as usize;
        if idx >= self.slots.len()
            || matches!(self.config.threads[idx].status, ThreadStatus::Halted(_))
        {
            return Err(StepError::NotRunnable(tid));
        }
        let node = self.config.threads[idx].node;
        match &self.slots[idx].phase {
            Phase::Done => Err(StepError::NotRunnable(tid)),
            Phase::AwaitBuffer(handle) => {
                let handle = *handle;
                self.resolve_receive(tid, node, handle, true)
            }
            Phase::Feed(_) => {
                let prev = match std::mem::replace(&mut self.slots[idx].phase, Phase::Done) {
                    Phase::Feed(r) => r,
                    _ => unreachable!(),
                };
                let effect = self.slots[idx].program.step(prev);
                self.apply_effect(tid, node, effect)
            }
        }
    }

    fn resolve_receive(
        &mut self,
        tid: Tid,
        node: NodeId,
        handle: Handle,
        was_blocked: bool,
    ) -> Result<Applied, StepError> {
        let idx = tid.0 as usize;
        let sock = self.config.sockets[node.0 as usize]
            .get_mut(&handle)
            .ok_or(StepError::NoSuchSocket { tid, handle })?;
        if sock.bound.is_none() {
            return Err(StepError::SocketNotBound { tid, handle });
        }
        if let Some(mid) = sock.buffer.pop_back() {
            let msg = self.msg_table[mid.0 as usize].clone();
            self.consumed_log.push(mid);
            self.config.consumed_len = self.consumed_log.len();
            self.slots[idx].phase =
                Phase::Feed(EffectResult::Received(Some((msg.body, msg.from))));
            self.config.threads[idx].status = ThreadStatus::Running;
            Ok(Applied {
                effect: Some(EffectKind::Recv { msg: Some(mid) }),
                events: vec![Event::Recv { msg: mid, node }],
            })
        } else if sock.blocking {
            // Blocking receive on an empty buffer reduces to itself: the step
            // is consumed, the configuration is unchanged, the thread stays
            // enabled.
            self.slots[idx].phase = Phase::AwaitBuffer(handle);
            self.config.threads[idx].status = ThreadStatus::Blocked;
            Ok(Applied { effect: Some(EffectKind::RecvBlocked), events: vec![] })
        } else {
            debug_assert!(!was_blocked, "non-blocking sockets never park threads");
            self.slots[idx].phase = Phase::Feed(EffectResult::Received(None));
            Ok(Applied { effect: Some(EffectKind::Recv { msg: None }), events: vec![] })
        }
    }

    fn apply_effect(&mut self, tid: Tid, node: NodeId, effect: Effect) -> Result<Applied, StepError> {
        let idx = tid.0 as usize;
        let ni = node.0 as usize;
        let mut events = Vec::new();
        let kind;
        match effect {
            Effect::Pure { tag } => {
                kind = EffectKind::Pure { tag: tag.map(str::to_owned) };
                self.slots[idx].phase = Phase::Feed(EffectResult::Unit);
            }
            Effect::Coin => {
                let value = match self.coin_overrides.get(&tid) {
                    Some(v) => *v,
                    None => self.coin_rng.gen_bool(0.5),
                };
                kind = EffectKind::Coin { value };
                self.slots[idx].phase = Phase::Feed(EffectResult::Coin(value));
            }
            Effect::Alloc { label, value } => {
                let loc = Loc(self.next_loc[ni]);
                self.next_loc[ni] += 1;
                self.config.heaps[ni].insert(loc, value);
                if let Some(l) = &label {
                    events.push(Event::Alloc { label: l.clone(), loc, node });
                    self.alloc_log.push((l.clone(), loc, node));
                }
                kind = EffectKind::Alloc { loc, label };
                self.slots[idx].phase = Phase::Feed(EffectResult::Loc(loc));
            }
            Effect::Load { loc } => {
                let v = self.config.heaps[ni]
                    .get(&loc)
                    .cloned()
                    .ok_or(StepError::Unallocated { tid, loc })?;
                kind = EffectKind::Load { loc };
                self.slots[idx].phase = Phase::Feed(EffectResult::Value(v));
            }
            Effect::Store { loc, value } => {
                let slot = self.config.heaps[ni]
                    .get_mut(&loc)
                    .ok_or(StepError::Unallocated { tid, loc })?;
                *slot = value;
                kind = EffectKind::Store { loc };
                self.slots[idx].phase = Phase::Feed(EffectResult::Unit);
            }
            Effect::Cas { loc, expect, new } => {
                let slot = self.config.heaps[ni]
                    .get_mut(&loc)
                    .ok_or(StepError::Unallocated { tid, loc })?;
                let success = *slot == expect;
                if success {
                    *slot = new;
                }
                kind = EffectKind::Cas { loc, success };
                self.slots[idx].phase = Phase::Feed(EffectResult::Cas(success));
            }
            Effect::Fork { program } => {
                let child = Tid(self.slots.len() as u32);
                self.slots.push(Slot { program, phase: Phase::Feed(EffectResult::Start) });
                self.config.threads.push(ThreadMeta { node, status: ThreadStatus::Running });
                kind = EffectKind::Fork { child };
                self.slots[idx].phase = Phase::Feed(EffectResult::Child(child));
            }
            Effect::NewSocket => {
                let handle = Handle(self.next_handle[ni]);
                self.next_handle[ni] += 1;
                self.config.sockets[ni].insert(
                    handle,
                    SocketState { bound: None, blocking: true, buffer: VecDeque::new() },
                );
                kind = EffectKind::NewSocket { handle };
                self.slots[idx].phase = Phase::Feed(EffectResult::Handle(handle));
            }
            Effect::Bind { handle, addr } => {
                if addr.ip != self.nodes[ni] {
                    return Err(StepError::BindForeignAddress { tid, ip: addr.ip });
                }
                if self.config.ports[ni].contains(&addr.port) {
                    return Err(StepError::PortInUse { tid, port: addr.port });
                }
                let sock = self.config.sockets[ni]
                    .get_mut(&handle)
                    .ok_or(StepError::NoSuchSocket { tid, handle })?;
                if sock.bound.is_some() {
                    return Err(StepError::SocketAlreadyBound { tid, handle });
                }
                sock.bound = Some(addr.clone());
                sock.blocking = true;
                self.config.ports[ni].insert(addr.port);
                kind = EffectKind::Bind { handle };
                self.slots[idx].phase = Phase::Feed(EffectResult::Unit);
            }
            Effect::SetBlocking { handle, blocking } => {
                let sock = self.config.sockets[ni]
                    .get_mut(&handle)
                    .ok_or(StepError::NoSuchSocket { tid, handle })?;
                sock.blocking = blocking;
                kind = EffectKind::SetBlocking { blocking };
                self.slots[idx].phase = Phase::Feed(EffectResult::Unit);
            }
            Effect::Send { handle, to, body } => {
                let sock = self.config.sockets[ni]
                    .get(&handle)
                    .ok_or(StepError::NoSuchSocket { tid, handle })?;
                let from =
                    sock.bound.clone().ok_or(StepError::SocketNotBound { tid, handle })?;
                let mid = MsgId(self.msg_table.len() as u64);
                self.msg_table.push(Message { id: mid, from, to, body });
                self.config.sent_len = self.msg_table.len();
                self.config.soup.insert(mid);
                events.push(Event::Send { msg: mid });
                kind = EffectKind::Send { msg: mid };
                self.slots[idx].phase = Phase::Feed(EffectResult::Unit);
            }
            Effect::Receive { handle } => {
                return self.resolve_receive(tid, node, handle, false);
            }
            Effect::Check { ok, reason } => {
                if !ok {
                    return Err(StepError::AssertionFailed { tid, reason });
                }
                kind = EffectKind::Check { ok: true };
                self.slots[idx].phase = Phase::Feed(EffectResult::Unit);
            }
            Effect::Halt { value } => {
                self.config.threads[idx].status = ThreadStatus::Halted(value);
                self.slots[idx].phase = Phase::Done;
                kind = EffectKind::Halt;
            }
            Effect::Stuck { reason } => {
                return Err(StepError::ThreadStuck { tid, reason });
            }
        }
        Ok(Applied { effect: Some(kind), events })
    }

    /// Message conservation: every ever-sent id is in exactly one of soup,
    /// buffers, consumed, dropped. Checked against a snapshot's ledger view.
    pub fn check_conservation(&self, cfg: &Configuration) -> Result<(), String> {
        let mut seen: BTreeMap<MsgId, &'static str> = BTreeMap::new();
        let place = |id: MsgId, w: &'static str, seen: &mut BTreeMap<MsgId, &'static str>| {
            if let Some(prev) = seen.insert(id, w) {
                return Err(format!("message {id:?} in both {prev} and {w}"));
            }
            Ok(())
        };
        for id in &cfg.soup {
            place(*id, "soup", &mut seen)?;
        }
        for socks in &cfg.sockets {
            for s in socks.values() {
                for id in &s.buffer {
                    place(*id, "buffer", &mut seen)?;
                }
            }
        }
        for id in &self.consumed_log[..cfg.consumed_len] {
            place(*id, "consumed", &mut seen)?;
        }
        for id in &self.dropped_log[..cfg.dropped_len] {
            place(*id, "dropped", &mut seen)?;
        }
        for i in 0..cfg.sent_len {
            if !seen.contains_key(&MsgId(i as u64)) {
                return Err(format!("sent message {i} unaccounted for"));
            }
        }
        if seen.len() != cfg.sent_len {
            return Err(format!(
                "conservation mismatch: {} placed vs {} sent",
                seen.len(),
                cfg.sent_len
            ));
        }
        Ok(())
    }
}

/// Filters for extracting event subsequences from recorded steps.
pub enum EventSelector<'a> {
    /// Alloc events carrying this label.
    ByLabel(&'a str),
    /// Send events whose message travels from `src` node to `dst` node.
    ByRoute(&'a str, &'a str),
    /// Recv events consumed at this node.
    ByReceiver(&'a str),
}

/// Extracts matching events (with their step indices) from a step log.
pub fn events_of(
    machine: &Machine,
    steps: &[StepRecord],
    selector: &EventSelector<'_>,
) -> Vec<(usize, Event)> {
    let mut out = Vec::new();
    for (i, rec) in steps.iter().enumerate() {
        for ev in &rec.events {
            let keep = match (selector, ev) {
                (EventSelector::ByLabel(l), Event::Alloc { label, .. }) => label == l,
                (EventSelector::ByRoute(src, dst), Event::Send { msg }) => {
                    let m = machine.message(*msg);
                    m.from.ip == *src && m.to.ip == *dst
                }
                (EventSelector::ByReceiver(ip), Event::Recv { node, .. }) => {
                    machine.node_name(*node) == *ip
                }
                _ => false,
            };
            if keep {
                out.push((i, ev.clone()));
            }
        }
    }
    out
}
