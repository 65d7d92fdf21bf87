//! Replicated grow-only counter: per-replica vector cells merged by pointwise
//! maximum, coupled to a square-matrix model. Safety is a four-condition
//! trace relation; eventual consistency is checked at a bounded horizon with
//! explicit network-fairness certificates.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::netsem::{
    Effect, EffectKind, EffectResult, Event, ExecTrace, Handle, Loc, Machine, MachineBuilder,
    NodeId, SocketAddr, ThreadProgram, Tid, Value,
};
use crate::refinement::{check_rel_all_prefixes, Coupling, ModelTrace, StepView, TraceRel};
use crate::traces::FiniteTrace;

pub fn vect_mk(n: usize) -> Vec<u64> {
    vec![0; n]
}

pub fn vect_inc(v: &[u64], i: usize) -> Vec<u64> {
    let mut out = v.to_vec();
    out[i] += 1;
    out
}

pub fn vect_sum(v: &[u64]) -> u64 {
    v.iter().sum()
}

/// Pointwise maximum; the lattice join.
pub fn vect_merge(a: &[u64], b: &[u64]) -> Vec<u64> {
    assert_eq!(a.len(), b.len(), "merge of unequal lengths");
    a.iter().zip(b).map(|(x, y)| *x.max(y)).collect()
}

/// Pointwise order.
pub fn vect_leq(a: &[u64], b: &[u64]) -> bool {
    assert_eq!(a.len(), b.len(), "order on unequal lengths");
    a.iter().zip(b).all(|(x, y)| x <= y)
}

/// Length-prefixed decimal form: `3|1,0,2`.
pub fn vect_ser(v: &[u64]) -> String {
    let body: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("{}|{}", v.len(), body.join(","))
}

pub fn vect_deser(s: &str) -> Option<Vec<u64>> {
    let (n, tail) = s.split_once('|')?;
    let n: usize = n.parse().ok()?;
    if n == 0 {
        return tail.is_empty().then(Vec::new);
    }
    let parts: Vec<&str> = tail.split(',').collect();
    if parts.len() != n {
        return None;
    }
    parts.iter().map(|p| p.parse().ok()).collect()
}

/// Model state: row i is replica i's vector.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct GcState(pub Vec<Vec<u64>>);

impl GcState {
    pub fn initial(n: usize) -> Self {
        GcState(vec![vect_mk(n); n])
    }

    pub fn diag(&self) -> Vec<u64> {
        self.0.iter().enumerate().map(|(i, row)| row[i]).collect()
    }
}

/// Replica i increments its own entry.
pub fn gc_incr_step(s: &GcState, i: usize) -> GcState {
    let mut next = s.clone();
    next.0[i][i] += 1;
    next
}

/// Replica i merges a vector dominated by some current row.
pub fn gc_apply_step(s: &GcState, i: usize, v: &[u64]) -> Option<GcState> {
    if !s.0.iter().any(|row| vect_leq(v, row)) {
        return None;
    }
    let mut next = s.clone();
    next.0[i] = vect_merge(&next.0[i], v);
    Some(next)
}

/// Successors with the merge vector drawn from a finite pool; the state space
/// is unbounded, so this exists for local reasoning, not exploration.
pub fn gc_successors(s: &GcState, pool: &[Vec<u64>]) -> Vec<GcState> {
    let n = s.0.len();
    let mut out: Vec<GcState> = (0..n).map(|i| gc_incr_step(s, i)).collect();
    for i in 0..n {
        for v in pool {
            if let Some(next) = gc_apply_step(s, i, v) {
                out.push(next);
            }
        }
    }
    out
}

/// Main replica thread: allocates the labeled vector cell, binds the node
/// socket, forks the merge and broadcast loops, then acts as the client:
/// a configured number of increments (load;cas retry) and a final query.
pub struct GcMain {
    addr: SocketAddr,
    peers: Vec<SocketAddr>,
    index: usize,
    n: usize,
    incrs: usize,
    loc: Option<Loc>,
    skt: Option<Handle>,
    done: usize,
    phase: GcMainPhase,
}

enum GcMainPhase {
    Start,
    GotLoc,
    GotSocket,
    Bound,
    ForkedApply,
    ForkedBcast,
    IncrLoaded,
    IncrCased,
    QueryLoaded,
}

impl GcMain {
    pub fn boxed(addr: SocketAddr, peers: Vec<SocketAddr>, index: usize, incrs: usize) -> Box<Self> {
        let n = peers.len() + 1;
        Box::new(GcMain {
            addr,
            peers,
            index,
            n,
            incrs,
            loc: None,
            skt: None,
            done: 0,
            phase: GcMainPhase::Start,
        })
    }

    fn next_client_step(&mut self) -> Effect {
        if self.done < self.incrs {
            self.phase = GcMainPhase::IncrLoaded;
        } else {
            self.phase = GcMainPhase::QueryLoaded;
        }
        Effect::Load { loc: self.loc.unwrap() }
    }
}

impl ThreadProgram for GcMain {
    fn step(&mut self, input: EffectResult) -> Effect {
        match std::mem::replace(&mut self.phase, GcMainPhase::Start) {
            GcMainPhase::Start => {
                self.phase = GcMainPhase::GotLoc;
                Effect::Alloc {
                    label: Some(self.index.to_string()),
                    value: Value::Vect(vect_mk(self.n)),
                }
            }
            GcMainPhase::GotLoc => {
                self.loc = Some(input.loc());
                self.phase = GcMainPhase::GotSocket;
                Effect::NewSocket
            }
            GcMainPhase::GotSocket => {
                self.skt = Some(input.handle());
                self.phase = GcMainPhase::Bound;
                Effect::Bind { handle: self.skt.unwrap(), addr: self.addr.clone() }
            }
            GcMainPhase::Bound => {
                self.phase = GcMainPhase::ForkedApply;
                Effect::Fork {
                    program: GcApply::boxed(self.loc.unwrap(), self.skt.unwrap()),
                }
            }
            GcMainPhase::ForkedApply => {
                self.phase = GcMainPhase::ForkedBcast;
                Effect::Fork {
                    program: GcBroadcast::boxed(
                        self.loc.unwrap(),
                        self.skt.unwrap(),
                        self.peers.clone(),
                    ),
                }
            }
            GcMainPhase::ForkedBcast => self.next_client_step(),
            GcMainPhase::IncrLoaded => {
                let t = input.value().as_vect().to_vec();
                self.phase = GcMainPhase::IncrCased;
                Effect::Cas {
                    loc: self.loc.unwrap(),
                    expect: Value::Vect(t.clone()),
                    new: Value::Vect(vect_inc(&t, self.index)),
                }
            }
            GcMainPhase::IncrCased => {
                if input.cas() {
                    self.done += 1;
                }
                self.next_client_step()
            }
            GcMainPhase::QueryLoaded => {
                let t = input.value().as_vect();
                Effect::Halt { value: Value::Nat(vect_sum(t)) }
            }
        }
    }
    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

/// Merge loop: receive a vector, then load;cas the join until it lands.
pub struct GcApply {
    loc: Loc,
    skt: Handle,
    incoming: Vec<u64>,
    phase: GcApplyPhase,
}

enum GcApplyPhase {
    Start,
    Received,
    Loaded,
    Cased,
}

impl GcApply {
    pub fn boxed(loc: Loc, skt: Handle) -> Box<Self> {
        Box::new(GcApply { loc, skt, incoming: Vec::new(), phase: GcApplyPhase::Start })
    }
}

impl ThreadProgram for GcApply {
    fn step(&mut self, input: EffectResult) -> Effect {
        match std::mem::replace(&mut self.phase, GcApplyPhase::Start) {
            GcApplyPhase::Start => {
                self.phase = GcApplyPhase::Received;
                Effect::Receive { handle: self.skt }
            }
            GcApplyPhase::Received => {
                let (body, _) = input.received().clone().expect("blocking receive");
                match vect_deser(&body) {
                    Some(v) => {
                        self.incoming = v;
                        self.phase = GcApplyPhase::Loaded;
                        Effect::Load { loc: self.loc }
                    }
                    None => Effect::Stuck { reason: format!("apply got {body:?}") },
                }
            }
            GcApplyPhase::Loaded => {
                let t = input.value().as_vect().to_vec();
                self.phase = GcApplyPhase::Cased;
                Effect::Cas {
                    loc: self.loc,
                    expect: Value::Vect(t.clone()),
                    new: Value::Vect(vect_merge(&t, &self.incoming)),
                }
            }
            GcApplyPhase::Cased => {
                if input.cas() {
                    self.phase = GcApplyPhase::Received;
                    Effect::Receive { handle: self.skt }
                } else {
                    self.phase = GcApplyPhase::Loaded;
                    Effect::Load { loc: self.loc }
                }
            }
        }
    }
    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

/// Broadcast loop: load, serialize, send to every peer, repeat forever.
pub struct GcBroadcast {
    loc: Loc,
    skt: Handle,
    peers: Vec<SocketAddr>,
    payload: String,
    next: usize,
    loaded: bool,
}

impl GcBroadcast {
    pub fn boxed(loc: Loc, skt: Handle, peers: Vec<SocketAddr>) -> Box<Self> {
        Box::new(GcBroadcast {
            loc,
            skt,
            peers,
            payload: String::new(),
            next: 0,
            loaded: false,
        })
    }
}

impl ThreadProgram for GcBroadcast {
    fn step(&mut self, input: EffectResult) -> Effect {
        if self.loaded && self.next < self.peers.len() {
            let to = self.peers[self.next].clone();
            self.next += 1;
            return Effect::Send { handle: self.skt, to, body: self.payload.clone() };
        }
        if self.loaded {
            self.loaded = false;
        } else if !matches!(input, EffectResult::Start) {
            self.payload = vect_ser(input.value().as_vect());
            self.loaded = true;
            self.next = 0;
            if !self.peers.is_empty() {
                let to = self.peers[0].clone();
                self.next = 1;
                return Effect::Send { handle: self.skt, to, body: self.payload.clone() };
            }
            self.loaded = false;
        }
        Effect::Load { loc: self.loc }
    }
    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

/// Scenario shape: one replica per entry, entry i giving replica i's number
/// of client increments.
#[derive(Clone, Debug)]
pub struct GcCfg {
    pub incrs: Vec<usize>,
}

impl GcCfg {
    pub fn uniform(n: usize, incrs: usize) -> Self {
        GcCfg { incrs: vec![incrs; n] }
    }
}

pub struct GcNet {
    pub addrs: Vec<SocketAddr>,
    pub main_tids: Vec<Tid>,
    pub replica_of_ip: BTreeMap<String, usize>,
}

/// One node per replica; node index equals replica index.
pub fn build_gc(seed: u64, cfg: &GcCfg) -> (Machine, GcNet) {
    let n = cfg.incrs.len();
    assert!(n >= 1);
    let addrs: Vec<SocketAddr> =
        (0..n).map(|i| SocketAddr::new(format!("10.2.0.{}", i + 1), 8000)).collect();
    let mut b = MachineBuilder::new(seed);
    let mut main_tids = Vec::new();
    for (i, addr) in addrs.iter().enumerate() {
        let node = b.add_node(addr.ip.clone());
        let peers: Vec<SocketAddr> =
            addrs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, a)| a.clone()).collect();
        main_tids.push(b.spawn(node, GcMain::boxed(addr.clone(), peers, i, cfg.incrs[i])));
    }
    let net = GcNet {
        replica_of_ip: addrs.iter().enumerate().map(|(i, a)| (a.ip.clone(), i)).collect(),
        addrs,
        main_tids,
    };
    (b.build(), net)
}

/// Matches machine steps to model steps: a successful client cas is that
/// replica's increment, a successful merge cas applies the exact vector the
/// merge loop last received, and every other step stutters. Fork and receive
/// steps are tracked to attribute later cas steps to roles.
pub struct GcCoupling {
    main_role: BTreeMap<Tid, usize>,
    apply_role: BTreeMap<Tid, usize>,
    forks_seen: BTreeMap<Tid, usize>,
    last_recv: Vec<Option<Vec<u64>>>,
}

impl GcCoupling {
    pub fn new(net: &GcNet) -> Self {
        GcCoupling {
            main_role: net.main_tids.iter().enumerate().map(|(i, t)| (*t, i)).collect(),
            apply_role: BTreeMap::new(),
            forks_seen: BTreeMap::new(),
            last_recv: vec![None; net.main_tids.len()],
        }
    }
}

impl Coupling<GcState> for GcCoupling {
    fn candidates(&mut self, view: &StepView<'_, GcState>) -> Vec<GcState> {
        let last = view.model.last();
        let crate::netsem::StepLabel::Thread(tid) = view.label else {
            return vec![last.clone()];
        };
        match &view.record.effect {
            Some(EffectKind::Fork { child }) => {
                if let Some(&i) = self.main_role.get(&tid) {
                    let seen = self.forks_seen.entry(tid).or_insert(0);
                    *seen += 1;
                    if *seen == 1 {
                        self.apply_role.insert(*child, i);
                    }
                }
                vec![last.clone()]
            }
            Some(EffectKind::Recv { msg: Some(mid) }) => {
                if let Some(&i) = self.apply_role.get(&tid) {
                    self.last_recv[i] = vect_deser(&view.machine.message(*mid).body);
                }
                vec![last.clone()]
            }
            Some(EffectKind::Cas { success: true, .. }) => {
                if let Some(&i) = self.main_role.get(&tid) {
                    return vec![gc_incr_step(last, i)];
                }
                if let Some(&i) = self.apply_role.get(&tid) {
                    return match &self.last_recv[i] {
                        Some(v) => gc_apply_step(last, i, v).into_iter().collect(),
                        None => Vec::new(),
                    };
                }
                vec![last.clone()]
            }
            _ => vec![last.clone()],
        }
    }
}

#[derive(Clone)]
struct GcSummary {
    locs: Vec<Option<Loc>>,
    /// Running join of the sender's heap vector at each send, per route.
    route_sent_max: BTreeMap<(usize, usize), Vec<u64>>,
    /// Join of everything received, excluding the most recent message.
    recv_max: Vec<Vec<u64>>,
    last_recv: Vec<Option<Vec<u64>>>,
}

/// The four-condition safety relation, checked at every prefix:
/// (1) replica i allocates exactly one cell labeled i, before any of its
/// network traffic; (2) each vector sent on a route dominates the sender's
/// heap as of every earlier send on that route; (3) each heap dominates
/// everything its node received except possibly the most recent message;
/// (4) heaps equal model rows everywhere, with unallocated replicas pinned
/// to zero rows. Summaries are incremental, so whole-run checking is linear.
pub struct GcRel {
    n: usize,
    replica_of_ip: BTreeMap<String, usize>,
    sum: GcSummary,
}

impl GcRel {
    pub fn new(net: &GcNet) -> Self {
        let n = net.main_tids.len();
        GcRel {
            n,
            replica_of_ip: net.replica_of_ip.clone(),
            sum: GcSummary {
                locs: vec![None; n],
                route_sent_max: BTreeMap::new(),
                recv_max: vec![vec![0; n]; n],
                last_recv: vec![None; n],
            },
        }
    }

    fn heap_vec(&self, machine: &Machine, exec: &ExecTrace, sum: &GcSummary, i: usize) -> Option<Vec<u64>> {
        let _ = machine;
        let loc = sum.locs[i]?;
        match exec.snaps.last().heaps[i].get(&loc) {
            Some(Value::Vect(v)) => Some(v.clone()),
            _ => None,
        }
    }

    /// Folds the newest step's events into `sum`, checking conditions (1)
    /// and (2) along the way.
    fn absorb(
        &self,
        machine: &Machine,
        exec: &ExecTrace,
        sum: &mut GcSummary,
    ) -> Result<(), String> {
        let Some(rec) = exec.steps.last() else {
            return Ok(());
        };
        for ev in &rec.events {
            match ev {
                Event::Alloc { label, loc, node } => {
                    let Ok(i) = label.parse::<usize>() else {
                        return Err(format!("allocation with foreign label {label:?}"));
                    };
                    if i >= self.n || NodeId(i as u16) != *node {
                        return Err(format!("label {i} allocated on node {node:?}"));
                    }
                    if sum.locs[i].is_some() {
                        return Err(format!("second allocation labeled {i}"));
                    }
                    sum.locs[i] = Some(*loc);
                }
                Event::Send { msg } => {
                    let m = machine.message(*msg);
                    let (Some(&i), Some(&j)) =
                        (self.replica_of_ip.get(&m.from.ip), self.replica_of_ip.get(&m.to.ip))
                    else {
                        continue;
                    };
                    if sum.locs[i].is_none() {
                        return Err(format!("replica {i} sent before allocating"));
                    }
                    if let Some(v) = vect_deser(&m.body) {
                        if let Some(floor) = sum.route_sent_max.get(&(i, j)) {
                            if !vect_leq(floor, &v) {
                                return Err(format!(
                                    "route {i}->{j}: sent {v:?} below earlier heap {floor:?}"
                                ));
                            }
                        }
                        let heap = self
                            .heap_vec(machine, exec, sum, i)
                            .ok_or_else(|| format!("replica {i} heap cell missing"))?;
                        let cur = sum
                            .route_sent_max
                            .entry((i, j))
                            .or_insert_with(|| vect_mk(self.n));
                        *cur = vect_merge(cur, &heap);
                    }
                }
                Event::Recv { msg, node } => {
                    let i = node.0 as usize;
                    if i >= self.n {
                        continue;
                    }
                    if sum.locs[i].is_none() {
                        return Err(format!("replica {i} received before allocating"));
                    }
                    if let Some(prev) = sum.last_recv[i].take() {
                        sum.recv_max[i] = vect_merge(&sum.recv_max[i], &prev);
                    }
                    sum.last_recv[i] = vect_deser(&machine.message(*msg).body);
                }
            }
        }
        Ok(())
    }

    /// Conditions (3) and (4) against the current configuration and model
    /// candidate.
    fn holds(
        &self,
        machine: &Machine,
        exec: &ExecTrace,
        sum: &GcSummary,
        candidate: &GcState,
    ) -> Result<(), String> {
        for i in 0..self.n {
            match self.heap_vec(machine, exec, sum, i) {
                None => {
                    if candidate.0[i].iter().any(|x| *x != 0) {
                        return Err(format!("model row {i} nonzero before allocation"));
                    }
                }
                Some(heap) => {
                    if !vect_leq(&sum.recv_max[i], &heap) {
                        return Err(format!(
                            "replica {i}: heap {heap:?} below settled receives {:?}",
                            sum.recv_max[i]
                        ));
                    }
                    if heap != candidate.0[i] {
                        return Err(format!(
                            "replica {i}: heap {heap:?} != model row {:?}",
                            candidate.0[i]
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

impl TraceRel<GcState> for GcRel {
    fn on_init(&mut self, _m: &Machine, exec: &ExecTrace, model0: &GcState) -> Result<(), String> {
        assert_eq!(exec.len(), 1);
        self.sum = GcSummary {
            locs: vec![None; self.n],
            route_sent_max: BTreeMap::new(),
            recv_max: vec![vec![0; self.n]; self.n],
            last_recv: vec![None; self.n],
        };
        if *model0 == GcState::initial(self.n) {
            Ok(())
        } else {
            Err("model does not start at the zero matrix".into())
        }
    }

    fn try_step(
        &self,
        machine: &Machine,
        exec: &ExecTrace,
        _model: &ModelTrace<GcState>,
        candidate: &GcState,
    ) -> Result<(), String> {
        let mut sum = self.sum.clone();
        self.absorb(machine, exec, &mut sum)?;
        self.holds(machine, exec, &sum, candidate)
    }

    fn commit(
        &mut self,
        machine: &Machine,
        exec: &ExecTrace,
        _model: &ModelTrace<GcState>,
        _chosen: &GcState,
    ) {
        let mut sum = self.sum.clone();
        let _ = self.absorb(machine, exec, &mut sum);
        self.sum = sum;
    }
}

/// Whole-run form of the safety relation: replays a fresh instance over every
/// prefix.
pub fn gc_main_rel(
    machine: &Machine,
    exec: &ExecTrace,
    model: &ModelTrace<GcState>,
    net: &GcNet,
) -> Result<(), (usize, String)> {
    let mut rel = GcRel::new(net);
    check_rel_all_prefixes(&mut rel, machine, exec, model)
}

/// Outcome of a bounded liveness check. `Inconclusive` means the horizon is
/// too short relative to the declared window, not that the property failed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Pass,
    Fail(String),
    Inconclusive(String),
}

impl Verdict {
    pub fn passed(&self) -> bool {
        matches!(self, Verdict::Pass)
    }
}

/// Index of the last increment in the model trace: the measured quiescence
/// point.
pub fn quiescence_step(model: &FiniteTrace<GcState>) -> usize {
    (1..model.len()).rev().find(|&t| model[t].diag() != model[t - 1].diag()).unwrap_or(0)
}

/// Diagonal stays fixed from `k` to the horizon.
pub fn model_stab(model: &FiniteTrace<GcState>, k: usize) -> Verdict {
    if k >= model.len() {
        return Verdict::Inconclusive(format!("stability point {k} beyond horizon"));
    }
    let v = model[k].diag();
    for t in k..model.len() {
        if model[t].diag() != v {
            return Verdict::Fail(format!("diagonal moved at {t}"));
        }
    }
    Verdict::Pass
}

/// All rows reach the stable diagonal vector at some index before the
/// horizon and stay there.
pub fn model_conv(model: &FiniteTrace<GcState>, k: usize) -> Verdict {
    if k >= model.len() {
        return Verdict::Inconclusive(format!("stability point {k} beyond horizon"));
    }
    let v = model[k].diag();
    let converged = |s: &GcState| s.0.iter().all(|row| *row == v);
    match (k..model.len()).find(|&t| converged(&model[t])) {
        None => Verdict::Fail(format!("no index reaches common vector {v:?}")),
        Some(t0) => {
            for t in t0..model.len() {
                if !converged(&model[t]) {
                    return Verdict::Fail(format!("diverged again at {t}"));
                }
            }
            Verdict::Pass
        }
    }
}

/// Stability implies convergence, at this horizon.
pub fn model_ev_cons(model: &FiniteTrace<GcState>, k: usize) -> Verdict {
    match model_stab(model, k) {
        Verdict::Pass => model_conv(model, k),
        Verdict::Fail(_) => {
            Verdict::Inconclusive("no stability point, implication is vacuous".into())
        }
        v => v,
    }
}

/// Every row is dominated by every other row within `window` further steps.
/// Rows grow monotonically, so checking at the window edge suffices.
pub fn model_fair(model: &FiniteTrace<GcState>, window: usize) -> Verdict {
    if model.len() <= window {
        return Verdict::Inconclusive(format!("horizon shorter than window {window}"));
    }
    let n = model.first().0.len();
    for t in 0..model.len() - window {
        let edge = &model[t + window];
        for i in 0..n {
            for j in 0..n {
                if !vect_leq(&model[t].0[i], &edge.0[j]) {
                    return Verdict::Fail(format!(
                        "row {i} at {t} not absorbed by row {j} within {window}"
                    ));
                }
            }
        }
    }
    Verdict::Pass
}

/// Network events between replicas, indexed for the fairness checkers.
pub struct RouteEvents {
    /// Per route: (step index, message id) of every send, in order.
    pub sends: BTreeMap<(usize, usize), Vec<(usize, crate::netsem::MsgId)>>,
    /// Message ids that were eventually received, anywhere.
    pub delivered: std::collections::BTreeSet<crate::netsem::MsgId>,
    /// Per replica: step indices of its receives.
    pub recvs: BTreeMap<usize, Vec<usize>>,
    pub horizon: usize,
}

pub fn route_events(machine: &Machine, exec: &ExecTrace, net: &GcNet) -> RouteEvents {
    let mut out = RouteEvents {
        sends: BTreeMap::new(),
        delivered: Default::default(),
        recvs: BTreeMap::new(),
        horizon: exec.len() - 1,
    };
    for (idx, rec) in exec.steps.iter().enumerate() {
        for ev in &rec.events {
            match ev {
                Event::Send { msg } => {
                    let m = machine.message(*msg);
                    if let (Some(&i), Some(&j)) =
                        (net.replica_of_ip.get(&m.from.ip), net.replica_of_ip.get(&m.to.ip))
                    {
                        out.sends.entry((i, j)).or_default().push((idx + 1, *msg));
                    }
                }
                Event::Recv { msg, node } => {
                    out.delivered.insert(*msg);
                    out.recvs.entry(node.0 as usize).or_default().push(idx + 1);
                }
                Event::Alloc { .. } => {}
            }
        }
    }
    out
}

fn max_gap(indices: &[usize], horizon: usize) -> usize {
    let mut prev = 0;
    let mut gap = 0;
    for &t in indices {
        gap = gap.max(t - prev);
        prev = t;
    }
    gap.max(horizon - prev)
}

/// Every route keeps sending: no window of `window` steps without a send.
pub fn net_fair_send(ev: &RouteEvents, n: usize, window: usize) -> Verdict {
    if ev.horizon < window {
        return Verdict::Inconclusive(format!("horizon shorter than window {window}"));
    }
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let idx: Vec<usize> =
                ev.sends.get(&(i, j)).map(|s| s.iter().map(|(t, _)| *t).collect()).unwrap_or_default();
            let gap = max_gap(&idx, ev.horizon);
            if gap > window {
                return Verdict::Fail(format!("route {i}->{j}: send gap {gap} > {window}"));
            }
        }
    }
    Verdict::Pass
}

/// Every replica keeps receiving: no window of `window` steps without a
/// receive.
pub fn net_fair_rec(ev: &RouteEvents, n: usize, window: usize) -> Verdict {
    if ev.horizon < window {
        return Verdict::Inconclusive(format!("horizon shorter than window {window}"));
    }
    for i in 0..n {
        let idx = ev.recvs.get(&i).cloned().unwrap_or_default();
        let gap = max_gap(&idx, ev.horizon);
        if gap > window {
            return Verdict::Fail(format!("replica {i}: receive gap {gap} > {window}"));
        }
    }
    Verdict::Pass
}

/// Every send is followed (or matched) within `window` steps by a send on the
/// same route whose message is eventually received. Sends too close to the
/// horizon to be judged are skipped.
pub fn net_fair_del(ev: &RouteEvents, window: usize) -> Verdict {
    if ev.horizon < window {
        return Verdict::Inconclusive(format!("horizon shorter than window {window}"));
    }
    for ((i, j), sends) in &ev.sends {
        for (pos, (t, _)) in sends.iter().enumerate() {
            if t + window > ev.horizon {
                break;
            }
            let ok = sends[pos..]
                .iter()
                .take_while(|(t2, _)| *t2 <= t + window)
                .any(|(_, mid)| ev.delivered.contains(mid));
            if !ok {
                return Verdict::Fail(format!(
                    "route {i}->{j}: send at {t} never followed by a delivery within {window}"
                ));
            }
        }
    }
    Verdict::Pass
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsem::sched::{FairParams, Policy, Scheduler};
    use crate::netsem::StepLabel;
    use crate::refinement::{check_events_signature, check_lockstep, run_coupled, CoupledRun};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vector_ops_satisfy_the_lattice_laws() {
        assert_eq!(vect_merge(&[1, 2, 0], &[0, 3, 1]), vec![1, 3, 1]);
        assert!(vect_leq(&[0, 2, 0], &[1, 2, 3]));
        assert!(!vect_leq(&[2, 0, 0], &[1, 2, 3]));
        assert_eq!(vect_sum(&[1, 3, 1]), 5);
        assert_eq!(vect_inc(&[1, 0], 1), vec![1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.gen_range(0..8);
            let v: Vec<u64> = (0..n).map(|_| rng.gen_range(0..1000)).collect();
            let w: Vec<u64> = (0..n).map(|_| rng.gen_range(0..1000)).collect();
            assert_eq!(vect_deser(&vect_ser(&v)), Some(v.clone()));
            assert_eq!(vect_merge(&v, &v), v);
            assert!(vect_leq(&v, &vect_merge(&v, &w)));
        }
        assert_eq!(vect_deser("3|1,0,2"), Some(vec![1, 0, 2]));
        assert_eq!(vect_deser("2|1"), None);
        assert_eq!(vect_deser("junk"), None);
        assert_eq!(vect_deser("0|"), Some(vec![]));
    }

    #[test]
    fn model_steps_match_the_rules() {
        let z = GcState::initial(2);
        let after_inc = gc_incr_step(&z, 0);
        assert_eq!(after_inc.0, vec![vec![1, 0], vec![0, 0]]);
        let row0 = after_inc.0[0].clone();
        let merged = gc_apply_step(&after_inc, 1, &row0).expect("row 0 dominates");
        assert_eq!(merged.0, vec![vec![1, 0], vec![1, 0]]);
        // A vector above every row is not a legal merge.
        assert_eq!(gc_apply_step(&after_inc, 1, &[5, 5]), None);
        let succ = gc_successors(&after_inc, &[row0]);
        assert!(succ.contains(&merged));
        assert!(succ.contains(&gc_incr_step(&after_inc, 1)));
    }

    fn run_gc(
        seed: u64,
        cfg: &GcCfg,
        policy: Policy,
        horizon: usize,
    ) -> (Machine, GcNet, CoupledRun<GcState>) {
        let (mut machine, net) = build_gc(seed, cfg);
        let mut sched = Scheduler::new(policy, seed);
        let mut coupling = GcCoupling::new(&net);
        let mut rel = GcRel::new(&net);
        let init = GcState::initial(cfg.incrs.len());
        let run = run_coupled(&mut machine, &mut sched, &mut coupling, &mut rel, init, horizon);
        (machine, net, run)
    }

    fn fair(drop_p: f64) -> Policy {
        Policy::Fair(FairParams { drop_p, ..FairParams::default() })
    }

    #[test]
    fn single_replica_counts_its_own_increments() {
        let (machine, net, run) = run_gc(1, &GcCfg::uniform(1, 3), fair(0.0), 400);
        assert!(run.ok(), "{:?}", run.violation);
        assert_eq!(
            machine.config.halted_value(net.main_tids[0]),
            Some(&Value::Nat(3))
        );
        assert_eq!(run.model.last().0, vec![vec![3]]);
        gc_main_rel(&machine, &run.exec, &run.model, &net).unwrap();
        // With one replica, stability at quiescence gives convergence at the
        // same point.
        let k = quiescence_step(&run.model);
        assert_eq!(model_stab(&run.model, k), Verdict::Pass);
        assert_eq!(model_conv(&run.model, k), Verdict::Pass);
        assert_eq!(model_ev_cons(&run.model, k), Verdict::Pass);
    }

    #[test]
    fn fair_lossy_replicas_converge_and_certify_delivery() {
        let cfg = GcCfg::uniform(3, 5);
        let (machine, net, run) = run_gc(42, &cfg, fair(0.1), 20_000);
        assert!(run.ok(), "{:?}", run.violation);
        check_lockstep(&run).unwrap();
        check_events_signature(&machine, &run.exec, &run.events).unwrap();
        gc_main_rel(&machine, &run.exec, &run.model, &net).unwrap();

        let k = quiescence_step(&run.model);
        assert_eq!(run.model[k].diag(), vec![5, 5, 5]);
        assert_eq!(model_stab(&run.model, k), Verdict::Pass);
        assert_eq!(model_conv(&run.model, k), Verdict::Pass, "no convergence by the horizon");
        assert_eq!(model_ev_cons(&run.model, k), Verdict::Pass);
        assert_eq!(model_fair(&run.model, 4096), Verdict::Pass);

        // Final heaps all hold the common vector.
        let final_snap = run.exec.snaps.last();
        for i in 0..3 {
            let loc = *final_snap.heaps[i].keys().next().unwrap();
            assert_eq!(final_snap.heaps[i][&loc], Value::Vect(vec![5, 5, 5]));
        }

        let ev = route_events(&machine, &run.exec, &net);
        assert_eq!(net_fair_del(&ev, 512), Verdict::Pass);
        assert_eq!(net_fair_send(&ev, 3, 512), Verdict::Pass);
        assert_eq!(net_fair_rec(&ev, 3, 512), Verdict::Pass);

        // Query monotonicity: each replica's heap sum never decreases.
        for i in 0..3 {
            let mut prev = 0;
            for t in 0..run.exec.len() {
                if let Some(Value::Vect(v)) = run.exec.snaps[t].heaps[i].values().next() {
                    let s = vect_sum(v);
                    assert!(s >= prev, "replica {i} shrank at {t}");
                    prev = s;
                }
            }
        }
    }

    #[test]
    fn starved_route_fails_delivery_fairness_but_stays_safe() {
        let cfg = GcCfg::uniform(3, 5);
        let (machine, net, _run) = run_gc(7, &cfg, fair(0.1), 20_000);
        let policy = Policy::StarveRoute {
            params: FairParams { drop_p: 0.1, ..FairParams::default() },
            src: net.addrs[0].ip.clone(),
            dst: net.addrs[1].ip.clone(),
        };
        drop((machine, net));
        let (machine, net, run) = run_gc(7, &cfg, policy, 20_000);
        assert!(run.ok(), "starvation must not break safety: {:?}", run.violation);
        gc_main_rel(&machine, &run.exec, &run.model, &net).unwrap();
        let ev = route_events(&machine, &run.exec, &net);
        assert!(matches!(net_fair_del(&ev, 512), Verdict::Fail(_)));
    }

    #[test]
    fn scripted_interleaving_forces_a_merge_retry() {
        // Replica 1 increments and broadcasts; replica 0's merge loop loads,
        // then replica 0's client increments, so the merge cas fails and
        // retries against the fresh heap. Thread ids: mains 0 and 1; replica
        // 0 forks merge thread 2 and broadcast 3, replica 1 forks 4 and 5.
        let t = |i: u32| StepLabel::Thread(Tid(i));
        let script = vec![
            t(0), t(0), t(0), t(0), t(0), // install on replica 0
            t(1), t(1), t(1), t(1), t(1), // install on replica 1
            t(1), t(1),                   // incr on 1: load, cas -> [0,1]
            t(5), t(5),                   // broadcast 1: load, send to 0
            StepLabel::Deliver(crate::netsem::MsgId(0)),
            t(2),                         // merge 0: receive [0,1]
            t(2),                         // merge 0: load [0,0]
            t(0), t(0),                   // incr on 0: load, cas -> [1,0]
            t(2),                         // merge cas: stale, fails
            t(2),                         // merge retries: load [1,0]
            t(2),                         // merge cas: [1,1]
        ];
        let horizon = script.len();
        let cfg = GcCfg { incrs: vec![1, 1] };
        let (machine, net, run) = run_gc(0, &cfg, Policy::Script(script), horizon);
        assert!(run.ok(), "{:?}", run.violation);
        let kinds: Vec<Option<EffectKind>> =
            run.exec.steps.iter().map(|r| r.effect.clone()).collect();
        assert!(matches!(kinds[19], Some(EffectKind::Cas { success: false, .. })));
        assert!(matches!(kinds[21], Some(EffectKind::Cas { success: true, .. })));
        // Final replica-0 heap is the join of both effects.
        let final_snap = run.exec.snaps.last();
        let loc = *final_snap.heaps[0].keys().next().unwrap();
        assert_eq!(final_snap.heaps[0][&loc], Value::Vect(vec![1, 1]));
        assert_eq!(run.model.last().0[0], vec![1, 1]);
        // The unmerged window between receive and final cas exercises the
        // last-received exception of the safety relation.
        gc_main_rel(&machine, &run.exec, &run.model, &net).unwrap();
    }

    #[test]
    fn tampered_model_row_is_rejected_at_that_index() {
        let (machine, net, run) = run_gc(3, &GcCfg::uniform(2, 2), fair(0.0), 2_000);
        assert!(run.ok());
        let mut states: Vec<GcState> = run.model.iter().cloned().collect();
        let idx = states.len() / 2;
        states[idx].0[0][0] += 7;
        let tampered = FiniteTrace::from_vec(states).unwrap();
        let err = gc_main_rel(&machine, &run.exec, &tampered, &net).unwrap_err();
        assert_eq!(err.0, idx);
        assert!(err.1.contains("heap"), "{}", err.1);
    }

    #[test]
    fn many_seeds_stay_safe_and_converge() {
        for seed in 0..10 {
            let (machine, net, run) = run_gc(seed, &GcCfg::uniform(3, 3), fair(0.1), 15_000);
            assert!(run.ok(), "seed {seed}: {:?}", run.violation);
            gc_main_rel(&machine, &run.exec, &run.model, &net).unwrap();
            let k = quiescence_step(&run.model);
            assert_eq!(model_conv(&run.model, k), Verdict::Pass, "seed {seed}");
        }
    }

    #[test]
    fn short_horizons_are_inconclusive_not_failed() {
        let (machine, net, run) = run_gc(1, &GcCfg::uniform(2, 1), fair(0.0), 40);
        assert!(run.ok());
        let ev = route_events(&machine, &run.exec, &net);
        assert!(matches!(net_fair_del(&ev, 512), Verdict::Inconclusive(_)));
        assert!(matches!(model_fair(&run.model, 512), Verdict::Inconclusive(_)));
        assert!(matches!(
            model_stab(&run.model, run.model.len() + 5),
            Verdict::Inconclusive(_)
        ));
    }
}
