//! Two-phase commit over the message soup, coupled to the transaction-commit
//! transition system. A transaction manager polls every resource manager; on
//! unanimous agreement it commits, otherwise it aborts. The model steps
//! exactly when a resource manager sends its own state-changing reply.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::model::Sts;
use crate::netsem::{
    Effect, EffectKind, EffectResult, ExecTrace, Handle, Machine, MachineBuilder, SocketAddr,
    StepRecord, ThreadProgram, Tid, Value,
};
use crate::refinement::{Coupling, ModelTrace, StepView, TraceRel};

pub const PREPARE: &str = "PREPARE";
pub const PREPARED: &str = "PREPARED";
pub const COMMIT: &str = "COMMIT";
pub const COMMITTED: &str = "COMMITTED";
pub const ABORT: &str = "ABORT";
pub const ABORTED: &str = "ABORTED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum RmState {
    Working,
    Prepared,
    Committed,
    Aborted,
}

/// One state of the commit protocol: the phase of every resource manager,
/// indexed by position. The domain is fixed for a scenario.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct TcState(pub Vec<RmState>);

impl TcState {
    pub fn initial(n: usize) -> Self {
        TcState(vec![RmState::Working; n])
    }

    pub fn can_commit(&self) -> bool {
        self.0.iter().all(|s| matches!(s, RmState::Prepared | RmState::Committed))
    }

    pub fn not_committed(&self) -> bool {
        self.0.iter().all(|s| *s != RmState::Committed)
    }

    pub fn prepare(&self, r: usize) -> Option<TcState> {
        (self.0[r] == RmState::Working).then(|| self.with(r, RmState::Prepared))
    }

    pub fn commit(&self, r: usize) -> Option<TcState> {
        (self.0[r] == RmState::Prepared && self.can_commit())
            .then(|| self.with(r, RmState::Committed))
    }

    pub fn abort(&self, r: usize) -> Option<TcState> {
        (matches!(self.0[r], RmState::Working | RmState::Prepared) && self.not_committed())
            .then(|| self.with(r, RmState::Aborted))
    }

    fn with(&self, r: usize, s: RmState) -> TcState {
        let mut v = self.0.clone();
        v[r] = s;
        TcState(v)
    }
}

/// All states reachable from `s` by one rule application.
pub fn tc_successors(s: &TcState) -> Vec<TcState> {
    let mut out = Vec::new();
    for r in 0..s.0.len() {
        out.extend(s.prepare(r));
        out.extend(s.commit(r));
        out.extend(s.abort(r));
    }
    out
}

/// No resource manager pair disagrees by one committing and one aborting.
pub fn tc_agreement(s: &TcState) -> bool {
    !(s.0.iter().any(|x| *x == RmState::Committed)
        && s.0.iter().any(|x| *x == RmState::Aborted))
}

/// Wire form of agreement over (resource manager index, sent body) pairs: no
/// COMMITTED and ABORTED bodies from two distinct managers coexist.
pub fn tc_agreement_wire(sent: &[(usize, String)]) -> bool {
    let committed: BTreeSet<usize> =
        sent.iter().filter(|(_, b)| b == COMMITTED).map(|(r, _)| *r).collect();
    let aborted: BTreeSet<usize> =
        sent.iter().filter(|(_, b)| b == ABORTED).map(|(r, _)| *r).collect();
    !committed.iter().any(|c| aborted.iter().any(|a| a != c))
}

/// The commit transition system for a fixed number of resource managers.
pub struct TcModel {
    pub n: usize,
}

impl Sts for TcModel {
    type State = TcState;
    fn init(&self) -> TcState {
        TcState::initial(self.n)
    }
    fn successors(&self, s: &TcState) -> Vec<TcState> {
        tc_successors(s)
    }
}

/// Deliberately broken variant: commit no longer requires everyone to be
/// prepared. Exploration finds an agreement violation on it; used to show the
/// checkers are not vacuous.
pub struct TcModelNoGuard {
    pub n: usize,
}

impl Sts for TcModelNoGuard {
    type State = TcState;
    fn init(&self) -> TcState {
        TcState::initial(self.n)
    }
    fn successors(&self, s: &TcState) -> Vec<TcState> {
        let mut out = Vec::new();
        for r in 0..s.0.len() {
            out.extend(s.prepare(r));
            if s.0[r] == RmState::Prepared {
                out.push(s.with(r, RmState::Committed));
            }
            out.extend(s.abort(r));
        }
        out
    }
}

/// Orchestrator thread: broadcasts PREPARE, gathers per-sender deduplicated
/// replies, then drives the commit or abort round and halts with the final
/// decision string.
pub struct TransactionManager {
    addr: SocketAddr,
    rms: Vec<SocketAddr>,
    skt: Option<Handle>,
    /// (body, sender) pairs already delivered to the protocol logic;
    /// re-delivered duplicates are received again and skipped.
    seen: BTreeSet<(String, SocketAddr)>,
    prepared: BTreeSet<SocketAddr>,
    confirmed: BTreeSet<SocketAddr>,
    phase: TmPhase,
}

enum TmPhase {
    Start,
    GotSocket,
    Bound,
    NodupReady,
    Broadcasting { body: &'static str, next: usize, then: AfterBroadcast },
    AwaitReply,
    AwaitConfirm,
}

#[derive(Clone, Copy)]
enum AfterBroadcast {
    GatherReplies,
    GatherConfirms,
    HaltAborted,
}

impl TransactionManager {
    pub fn boxed(addr: SocketAddr, rms: Vec<SocketAddr>) -> Box<Self> {
        assert!(!rms.is_empty(), "need at least one resource manager");
        Box::new(TransactionManager {
            addr,
            rms,
            skt: None,
            seen: BTreeSet::new(),
            prepared: BTreeSet::new(),
            confirmed: BTreeSet::new(),
            phase: TmPhase::Start,
        })
    }

    fn broadcast(&mut self, body: &'static str, next: usize, then: AfterBroadcast) -> Effect {
        if next < self.rms.len() {
            let to = self.rms[next].clone();
            self.phase = TmPhase::Broadcasting { body, next: next + 1, then };
            Effect::Send { handle: self.skt.unwrap(), to, body: body.into() }
        } else {
            match then {
                AfterBroadcast::GatherReplies => {
                    self.phase = TmPhase::AwaitReply;
                    Effect::Receive { handle: self.skt.unwrap() }
                }
                AfterBroadcast::GatherConfirms => {
                    self.phase = TmPhase::AwaitConfirm;
                    Effect::Receive { handle: self.skt.unwrap() }
                }
                AfterBroadcast::HaltAborted => Effect::Halt { value: Value::Str(ABORTED.into()) },
            }
        }
    }
}

impl ThreadProgram for TransactionManager {
    fn step(&mut self, input: EffectResult) -> Effect {
        match std::mem::replace(&mut self.phase, TmPhase::Start) {
            TmPhase::Start => {
                self.phase = TmPhase::GotSocket;
                Effect::NewSocket
            }
            TmPhase::GotSocket => {
                self.skt = Some(input.handle());
                self.phase = TmPhase::Bound;
                Effect::Bind { handle: self.skt.unwrap(), addr: self.addr.clone() }
            }
            TmPhase::Bound => {
                self.phase = TmPhase::NodupReady;
                Effect::Pure { tag: Some("nodup_init") }
            }
            TmPhase::NodupReady => self.broadcast(PREPARE, 0, AfterBroadcast::GatherReplies),
            TmPhase::Broadcasting { body, next, then } => self.broadcast(body, next, then),
            TmPhase::AwaitReply => {
                let (body, from) = input.received().clone().expect("blocking receive");
                if !self.seen.insert((body.clone(), from.clone())) {
                    self.phase = TmPhase::AwaitReply;
                    return Effect::Receive { handle: self.skt.unwrap() };
                }
                match body.as_str() {
                    PREPARED => {
                        self.prepared.insert(from);
                        if self.rms.iter().all(|r| self.prepared.contains(r)) {
                            self.broadcast(COMMIT, 0, AfterBroadcast::GatherConfirms)
                        } else {
                            self.phase = TmPhase::AwaitReply;
                            Effect::Receive { handle: self.skt.unwrap() }
                        }
                    }
                    ABORTED => self.broadcast(ABORT, 0, AfterBroadcast::HaltAborted),
                    other => Effect::Stuck { reason: format!("unexpected reply {other:?}") },
                }
            }
            TmPhase::AwaitConfirm => {
                let (body, from) = input.received().clone().expect("blocking receive");
                if !self.seen.insert((body.clone(), from.clone())) {
                    self.phase = TmPhase::AwaitConfirm;
                    return Effect::Receive { handle: self.skt.unwrap() };
                }
                match body.as_str() {
                    COMMITTED => {
                        self.confirmed.insert(from);
                        if self.rms.iter().all(|r| self.confirmed.contains(r)) {
                            Effect::Halt { value: Value::Str(COMMITTED.into()) }
                        } else {
                            self.phase = TmPhase::AwaitConfirm;
                            Effect::Receive { handle: self.skt.unwrap() }
                        }
                    }
                    other => Effect::Stuck { reason: format!("unexpected confirmation {other:?}") },
                }
            }
        }
    }
    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

/// Participant thread: answers the first request, decides by coin flip when
/// asked to prepare, and confirms whatever final decision arrives. Halts with
/// its own final decision string.
pub struct ResourceManager {
    addr: SocketAddr,
    tm: SocketAddr,
    skt: Option<Handle>,
    phase: RmPhase,
}

enum RmPhase {
    Start,
    GotSocket,
    Bound,
    AwaitFirst,
    Flipped,
    AwaitDecision { receiving: bool },
    Halting(&'static str),
}

impl ResourceManager {
    pub fn boxed(addr: SocketAddr, tm: SocketAddr) -> Box<Self> {
        Box::new(ResourceManager { addr, tm, skt: None, phase: RmPhase::Start })
    }

    fn reply_and_halt(&mut self, body: &'static str) -> Effect {
        self.phase = RmPhase::Halting(body);
        Effect::Send { handle: self.skt.unwrap(), to: self.tm.clone(), body: body.into() }
    }
}

impl ThreadProgram for ResourceManager {
    fn step(&mut self, input: EffectResult) -> Effect {
        match std::mem::replace(&mut self.phase, RmPhase::Start) {
            RmPhase::Start => {
                self.phase = RmPhase::GotSocket;
                Effect::NewSocket
            }
            RmPhase::GotSocket => {
                self.skt = Some(input.handle());
                self.phase = RmPhase::Bound;
                Effect::Bind { handle: self.skt.unwrap(), addr: self.addr.clone() }
            }
            RmPhase::Bound => {
                self.phase = RmPhase::AwaitFirst;
                Effect::Receive { handle: self.skt.unwrap() }
            }
            RmPhase::AwaitFirst => {
                let (body, _) = input.received().clone().expect("blocking receive");
                match body.as_str() {
                    ABORT => self.reply_and_halt(ABORTED),
                    PREPARE => {
                        self.phase = RmPhase::Flipped;
                        Effect::Coin
                    }
                    other => Effect::Stuck { reason: format!("unexpected request {other:?}") },
                }
            }
            RmPhase::Flipped => {
                let local_abort = input.coin();
                if local_abort {
                    self.reply_and_halt(ABORTED)
                } else {
                    self.phase = RmPhase::AwaitDecision { receiving: false };
                    Effect::Send {
                        handle: self.skt.unwrap(),
                        to: self.tm.clone(),
                        body: PREPARED.into(),
                    }
                }
            }
            RmPhase::AwaitDecision { receiving } => {
                if !receiving {
                    self.phase = RmPhase::AwaitDecision { receiving: true };
                    return Effect::Receive { handle: self.skt.unwrap() };
                }
                let (body, _) = input.received().clone().expect("blocking receive");
                match body.as_str() {
                    COMMIT => self.reply_and_halt(COMMITTED),
                    ABORT => self.reply_and_halt(ABORTED),
                    // The decision wait filters: anything else is skipped.
                    _ => {
                        self.phase = RmPhase::AwaitDecision { receiving: true };
                        Effect::Receive { handle: self.skt.unwrap() }
                    }
                }
            }
            RmPhase::Halting(decision) => {
                let _ = input;
                Effect::Halt { value: Value::Str(decision.into()) }
            }
        }
    }
    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

/// Addresses and thread ids of an assembled commit scenario.
pub struct TpcNet {
    pub tm: SocketAddr,
    pub rms: Vec<SocketAddr>,
    pub tm_tid: Tid,
    pub rm_tids: Vec<Tid>,
}

impl TpcNet {
    /// Resource manager index of a sender address, if any.
    pub fn rm_index(&self, addr: &SocketAddr) -> Option<usize> {
        self.rms.iter().position(|a| a == addr)
    }

    /// (index, body) pairs for every reply a resource manager has sent.
    pub fn rm_bodies(&self, machine: &Machine) -> Vec<(usize, String)> {
        machine
            .sent_log()
            .iter()
            .filter(|m| m.to == self.tm)
            .filter_map(|m| self.rm_index(&m.from).map(|r| (r, m.body.clone())))
            .collect()
    }
}

/// One manager node plus one node per resource manager, every socket on the
/// same port. `coins[r]` forces resource manager r's decision coin.
pub fn build_tpc(seed: u64, n: usize, coins: &[Option<bool>]) -> (Machine, TpcNet) {
    assert!(n >= 1);
    assert!(coins.len() == n);
    let mut b = MachineBuilder::new(seed);
    let tm_addr = SocketAddr::new("10.0.0.1", 7000);
    let rm_addrs: Vec<SocketAddr> =
        (0..n).map(|i| SocketAddr::new(format!("10.0.1.{}", i + 1), 7000)).collect();
    let tm_node = b.add_node(tm_addr.ip.clone());
    let tm_tid = b.spawn(tm_node, TransactionManager::boxed(tm_addr.clone(), rm_addrs.clone()));
    let mut rm_tids = Vec::new();
    for (i, addr) in rm_addrs.iter().enumerate() {
        let node = b.add_node(addr.ip.clone());
        let tid = b.spawn(node, ResourceManager::boxed(addr.clone(), tm_addr.clone()));
        if let Some(v) = coins[i] {
            b.force_coin(tid, v);
        }
        rm_tids.push(tid);
    }
    (b.build(), TpcNet { tm: tm_addr, rms: rm_addrs, tm_tid, rm_tids })
}

/// Ties state-changing replies on the wire to model rules: a PREPARED,
/// COMMITTED or ABORTED send by resource manager r proposes the matching rule
/// applied at r; every other step stutters.
pub struct TpcCoupling {
    tm: SocketAddr,
    rms: Vec<SocketAddr>,
}

impl TpcCoupling {
    pub fn new(net: &TpcNet) -> Self {
        TpcCoupling { tm: net.tm.clone(), rms: net.rms.clone() }
    }
}

impl Coupling<TcState> for TpcCoupling {
    fn candidates(&mut self, view: &StepView<'_, TcState>) -> Vec<TcState> {
        let last = view.model.last();
        if let Some(EffectKind::Send { msg }) = &view.record.effect {
            let m = view.machine.message(*msg);
            if m.to == self.tm {
                if let Some(r) = self.rms.iter().position(|a| *a == m.from) {
                    return match m.body.as_str() {
                        PREPARED => last.prepare(r).into_iter().collect(),
                        COMMITTED => last.commit(r).into_iter().collect(),
                        ABORTED => last.abort(r).into_iter().collect(),
                        _ => vec![last.clone()],
                    };
                }
            }
        }
        vec![last.clone()]
    }
}

/// Per-manager summary of which replies are on the wire so far.
#[derive(Clone, Copy, Default, PartialEq, Eq)]
struct RmSent {
    prepared: bool,
    committed: bool,
    aborted: bool,
}

/// Coherence between model states and sent replies, checked in lock-step:
/// a manager is past Working exactly when its state-changing reply is on the
/// wire, and final states match final replies. Summaries are incremental, so
/// checking a whole run costs one pass.
pub struct TpcRel {
    tm: SocketAddr,
    rms: Vec<SocketAddr>,
    sent: Vec<RmSent>,
}

impl TpcRel {
    pub fn new(net: &TpcNet) -> Self {
        TpcRel { tm: net.tm.clone(), rms: net.rms.clone(), sent: vec![RmSent::default(); 0] }
    }

    fn absorb(&self, machine: &Machine, record: &StepRecord, into: &mut [RmSent]) {
        if let Some(EffectKind::Send { msg }) = &record.effect {
            let m = machine.message(*msg);
            if m.to != self.tm {
                return;
            }
            let Some(r) = self.rms.iter().position(|a| *a == m.from) else {
                return;
            };
            match m.body.as_str() {
                PREPARED => into[r].prepared = true,
                COMMITTED => into[r].committed = true,
                ABORTED => into[r].aborted = true,
                _ => {}
            }
        }
    }

    fn coherent(&self, state: &TcState, sent: &[RmSent]) -> Result<(), String> {
        if state.0.len() != self.rms.len() {
            return Err(format!(
                "model tracks {} managers, scenario has {}",
                state.0.len(),
                self.rms.len()
            ));
        }
        for (r, (phase, s)) in state.0.iter().zip(sent).enumerate() {
            let ok = match phase {
                RmState::Working => !s.prepared && !s.committed && !s.aborted,
                RmState::Prepared => s.prepared && !s.committed && !s.aborted,
                RmState::Committed => s.committed && !s.aborted,
                RmState::Aborted => s.aborted && !s.committed,
            };
            if !ok {
                return Err(format!(
                    "manager {r} in {phase:?} but wire shows prepared={} committed={} aborted={}",
                    s.prepared, s.committed, s.aborted
                ));
            }
        }
        Ok(())
    }
}

impl TraceRel<TcState> for TpcRel {
    fn on_init(&mut self, _m: &Machine, exec: &ExecTrace, model0: &TcState) -> Result<(), String> {
        assert_eq!(exec.len(), 1);
        self.sent = vec![RmSent::default(); self.rms.len()];
        if *model0 != TcState::initial(self.rms.len()) {
            return Err("initial model state must be all Working".into());
        }
        Ok(())
    }

    fn try_step(
        &self,
        machine: &Machine,
        exec: &ExecTrace,
        _model: &ModelTrace<TcState>,
        candidate: &TcState,
    ) -> Result<(), String> {
        let mut sent = self.sent.clone();
        self.absorb(machine, exec.steps.last().expect("exec extended"), &mut sent);
        self.coherent(candidate, &sent)
    }

    fn commit(
        &mut self,
        machine: &Machine,
        exec: &ExecTrace,
        _model: &ModelTrace<TcState>,
        _chosen: &TcState,
    ) {
        let mut sent = std::mem::take(&mut self.sent);
        self.absorb(machine, exec.steps.last().expect("exec extended"), &mut sent);
        self.sent = sent;
    }
}

/// One-pass check over a finished coupled run: agreement holds at every index
/// in both the model trace and the wire view.
pub fn check_tpc_agreement(
    machine: &Machine,
    exec: &ExecTrace,
    model: &ModelTrace<TcState>,
    net: &TpcNet,
) -> Result<(), String> {
    if exec.len() != model.len() {
        return Err("traces out of lock-step".into());
    }
    let mut wire: Vec<(usize, String)> = Vec::new();
    for i in 0..model.len() {
        if i > 0 {
            if let Some(EffectKind::Send { msg }) = &exec.steps[i - 1].effect {
                let m = machine.message(*msg);
                if m.to == net.tm {
                    if let Some(r) = net.rm_index(&m.from) {
                        wire.push((r, m.body.clone()));
                    }
                }
            }
        }
        if !tc_agreement(&model[i]) {
            return Err(format!("model agreement broken at index {i}: {:?}", model[i]));
        }
        if !tc_agreement_wire(&wire) {
            return Err(format!("wire agreement broken at index {i}"));
        }
    }
    Ok(())
}
