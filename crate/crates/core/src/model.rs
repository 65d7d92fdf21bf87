//! Abstract models: plain state-transition systems, role-labeled fairness
//! models, the fuel construction that schedules roles onto threads, trace
//! destuttering, and a checker for termination under fair scheduling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Debug;

use serde::Serialize;

use crate::netsem::Tid;
use crate::traces::FiniteTrace;

/// A finitely-branching state transition system.
pub trait Sts {
    type State: Clone + Ord + Debug;

    fn init(&self) -> Self::State;
    /// Finite and pure for every state.
    fn successors(&self, s: &Self::State) -> Vec<Self::State>;
    /// Canonical text form, used for trace export and visited-set keys.
    fn render(&self, s: &Self::State) -> String {
        format!("{s:?}")
    }
}

/// Step oracle for [`crate::traces::valid_trace`] over an STS.
pub fn sts_oracle<M: Sts>(m: &M) -> impl Fn(&M::State, &M::State) -> bool + '_ {
    move |a, b| m.successors(a).contains(b)
}

/// A transition system whose transitions are labeled by roles, with a bound
/// on how much fuel a role may hold in each state.
///
/// Required shape: a transition's role is enabled at its source, and a step
/// by one role never disables a different enabled role.
pub trait FairnessModel {
    type State: Clone + Ord + Debug;
    type Role: Clone + Ord + Debug;

    fn roles(&self) -> Vec<Self::Role>;
    fn enabled(&self, s: &Self::State) -> Vec<Self::Role>;
    fn step(&self, s: &Self::State, role: &Self::Role) -> Vec<Self::State>;
    fn fuel_limit(&self, s: &Self::State) -> u64;
    fn init(&self) -> Self::State;
}

/// Model state augmented with per-role fuel and a role-to-thread assignment.
/// Both maps are keyed exactly by the roles enabled in `under`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct LiveState<S, R: Ord> {
    pub under: S,
    pub fuels: BTreeMap<R, u64>,
    pub mapping: BTreeMap<R, Tid>,
}

/// Transition labels of the fuel construction: a thread either performs one
/// of its roles or steps silently.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum LiveLabel<R> {
    Step(R, Tid),
    Silent(Tid),
}

/// The fuel construction over a fairness model. `tids` fixes the finite set
/// of threads roles may be assigned to, keeping enumeration finite.
pub struct LiveModel<F: FairnessModel> {
    pub f: F,
    pub tids: Vec<Tid>,
}

impl<F: FairnessModel> LiveModel<F> {
    pub fn new(f: F, tids: Vec<Tid>) -> Self {
        LiveModel { f, tids }
    }

    /// Initial live state: every enabled role fully fueled, owners assigned
    /// by `assign`.
    pub fn init_state(&self, assign: impl Fn(&F::Role) -> Tid) -> LiveState<F::State, F::Role> {
        let under = self.f.init();
        let fl = self.f.fuel_limit(&under);
        let mut fuels = BTreeMap::new();
        let mut mapping = BTreeMap::new();
        for r in self.f.enabled(&under) {
            fuels.insert(r.clone(), fl);
            mapping.insert(r.clone(), assign(&r));
        }
        LiveState { under, fuels, mapping }
    }

    fn roles_of(ls: &LiveState<F::State, F::Role>, tid: Tid) -> Vec<F::Role> {
        ls.mapping
            .iter()
            .filter(|(_, t)| **t == tid)
            .map(|(r, _)| r.clone())
            .collect()
    }

    /// All labels that could be attempted at `ls` (their successor sets may
    /// still be empty).
    pub fn labels(&self, ls: &LiveState<F::State, F::Role>) -> Vec<LiveLabel<F::Role>> {
        let mut out = Vec::new();
        for (r, t) in &ls.mapping {
            out.push(LiveLabel::Step(r.clone(), *t));
        }
        let owners: BTreeSet<Tid> = ls.mapping.values().copied().collect();
        for t in owners {
            out.push(LiveLabel::Silent(t));
        }
        out
    }

    /// Full successor enumeration for one label. Precondition failures yield
    /// an empty set rather than an error.
    pub fn successors_of(
        &self,
        ls: &LiveState<F::State, F::Role>,
        lbl: &LiveLabel<F::Role>,
    ) -> Vec<LiveState<F::State, F::Role>> {
        match lbl {
            LiveLabel::Silent(tid) => self.silent_successors(ls, *tid),
            LiveLabel::Step(role, tid) => self.step_successors(ls, role, *tid),
        }
    }

    fn silent_successors(
        &self,
        ls: &LiveState<F::State, F::Role>,
        tid: Tid,
    ) -> Vec<LiveState<F::State, F::Role>> {
        if Self::roles_of(ls, tid).is_empty() {
            return vec![];
        }
        // Per-role choices: (owner', fuel') with strict decrease for the
        // acting thread's roles and for any owner change.
        let mut per_role: Vec<Vec<(F::Role, Tid, u64)>> = Vec::new();
        for (r, owner) in &ls.mapping {
            let f = ls.fuels[r];
            let mut choices = Vec::new();
            for o in &self.tids {
                let strict = *owner == tid || *o != *owner;
                let hi = if strict {
                    if f == 0 {
                        continue;
                    }
                    f - 1
                } else {
                    f
                };
                for nf in 0..=hi {
                    choices.push((r.clone(), *o, nf));
                }
            }
            if choices.is_empty() {
                return vec![];
            }
            per_role.push(choices);
        }
        Self::product(ls.under.clone(), &per_role)
    }

    fn step_successors(
        &self,
        ls: &LiveState<F::State, F::Role>,
        role: &F::Role,
        tid: Tid,
    ) -> Vec<LiveState<F::State, F::Role>> {
        if ls.mapping.get(role) != Some(&tid) {
            return vec![];
        }
        let mut out = Vec::new();
        for s2 in self.f.step(&ls.under, role) {
            let fl2 = self.f.fuel_limit(&s2);
            let enabled2: BTreeSet<F::Role> = self.f.enabled(&s2).into_iter().collect();
            let mut per_role: Vec<Vec<(F::Role, Tid, u64)>> = Vec::new();
            let mut feasible = true;
            for r2 in &enabled2 {
                let mut choices = Vec::new();
                match (ls.mapping.get(r2), ls.fuels.get(r2)) {
                    // The stepping role refuels freely; surviving newly
                    // appearing roles get any fuel within the new limit.
                    _ if r2 == role => {
                        for o in &self.tids {
                            for nf in 0..=fl2 {
                                choices.push((r2.clone(), *o, nf));
                            }
                        }
                    }
                    (Some(owner), Some(f)) => {
                        for o in &self.tids {
                            let strict = *owner == tid || *o != *owner;
                            let hi = if strict {
                                if *f == 0 {
                                    continue;
                                }
                                *f - 1
                            } else {
                                *f
                            };
                            for nf in 0..=hi {
                                choices.push((r2.clone(), *o, nf));
                            }
                        }
                    }
                    _ => {
                        for o in &self.tids {
                            for nf in 0..=fl2 {
                                choices.push((r2.clone(), *o, nf));
                            }
                        }
                    }
                }
                if choices.is_empty() {
                    feasible = false;
                    break;
                }
                per_role.push(choices);
            }
            if feasible {
                out.extend(Self::product(s2, &per_role));
            }
        }
        out
    }

    fn product(
        under: F::State,
        per_role: &[Vec<(F::Role, Tid, u64)>],
    ) -> Vec<LiveState<F::State, F::Role>> {
        let mut acc = vec![(BTreeMap::new(), BTreeMap::new())];
        for choices in per_role {
            let mut next = Vec::with_capacity(acc.len() * choices.len());
            for (fuels, mapping) in &acc {
                for (r, o, nf) in choices {
                    let mut f2: BTreeMap<F::Role, u64> = fuels.clone();
                    let mut m2: BTreeMap<F::Role, Tid> = mapping.clone();
                    f2.insert(r.clone(), *nf);
                    m2.insert(r.clone(), *o);
                    next.push((f2, m2));
                }
            }
            acc = next;
        }
        acc.into_iter()
            .map(|(fuels, mapping)| LiveState { under: under.clone(), fuels, mapping })
            .collect()
    }

    /// Pointwise transition check, usable where full enumeration is too big
    /// (fuel limits in the tens make successor sets huge).
    pub fn is_successor(
        &self,
        ls: &LiveState<F::State, F::Role>,
        lbl: &LiveLabel<F::Role>,
        ls2: &LiveState<F::State, F::Role>,
    ) -> bool {
        let dom = |s: &LiveState<F::State, F::Role>| -> BTreeSet<F::Role> {
            s.fuels.keys().cloned().collect()
        };
        if dom(ls2) != self.f.enabled(&ls2.under).into_iter().collect::<BTreeSet<_>>()
            || dom(ls2) != ls2.mapping.keys().cloned().collect::<BTreeSet<_>>()
        {
            return false;
        }
        match lbl {
            LiveLabel::Silent(tid) => {
                if ls2.under != ls.under || Self::roles_of(ls, *tid).is_empty() {
                    return false;
                }
                if dom(ls2) != dom(ls) {
                    return false;
                }
                ls.mapping.iter().all(|(r, owner)| {
                    let f = ls.fuels[r];
                    let nf = ls2.fuels[r];
                    let no = ls2.mapping[r];
                    if *owner == *tid || no != *owner {
                        nf < f
                    } else {
                        nf <= f
                    }
                })
            }
            LiveLabel::Step(role, tid) => {
                if ls.mapping.get(role) != Some(tid) {
                    return false;
                }
                if !self.f.step(&ls.under, role).contains(&ls2.under) {
                    return false;
                }
                let fl2 = self.f.fuel_limit(&ls2.under);
                ls2.fuels.iter().all(|(r2, nf)| {
                    if r2 == role {
                        return *nf <= fl2;
                    }
                    match (ls.mapping.get(r2), ls.fuels.get(r2)) {
                        (Some(owner), Some(f)) => {
                            let no = ls2.mapping[r2];
                            if *owner == *tid || no != *owner {
                                *nf < *f
                            } else {
                                *nf <= *f
                            }
                        }
                        _ => *nf <= fl2,
                    }
                })
            }
        }
    }

    /// Canonical silent step used by coupled runs: every role of `tid`
    /// decreases by one, everything else is untouched. `None` when `tid`
    /// owns no role or a fuel would underflow.
    pub fn canonical_silent(
        &self,
        ls: &LiveState<F::State, F::Role>,
        tid: Tid,
    ) -> Option<LiveState<F::State, F::Role>> {
        let mine = Self::roles_of(ls, tid);
        if mine.is_empty() {
            return None;
        }
        let mut out = ls.clone();
        for r in mine {
            let f = out.fuels.get_mut(&r).unwrap();
            *f = f.checked_sub(1)?;
        }
        Some(out)
    }

    /// Canonical role step used by coupled runs: move to `target`, refuel the
    /// stepping role to the limit, decrement the thread's other roles, leave
    /// the rest, and give newly enabled roles full fuel with owners chosen by
    /// `assign`.
    pub fn canonical_step(
        &self,
        ls: &LiveState<F::State, F::Role>,
        role: &F::Role,
        tid: Tid,
        target: &F::State,
        assign: impl Fn(&F::Role) -> Tid,
    ) -> Option<LiveState<F::State, F::Role>> {
        if ls.mapping.get(role) != Some(&tid) || !self.f.step(&ls.under, role).contains(target) {
            return None;
        }
        let fl2 = self.f.fuel_limit(target);
        let mut fuels = BTreeMap::new();
        let mut mapping = BTreeMap::new();
        for r2 in self.f.enabled(target) {
            if r2 == *role {
                fuels.insert(r2.clone(), fl2);
                mapping.insert(r2, tid);
            } else {
                match (ls.mapping.get(&r2), ls.fuels.get(&r2)) {
                    (Some(owner), Some(f)) => {
                        let nf = if *owner == tid { f.checked_sub(1)? } else { *f };
                        fuels.insert(r2.clone(), nf);
                        mapping.insert(r2, *owner);
                    }
                    _ => {
                        fuels.insert(r2.clone(), fl2);
                        let o = assign(&r2);
                        mapping.insert(r2, o);
                    }
                }
            }
        }
        Some(LiveState { under: target.clone(), fuels, mapping })
    }

    /// Packages the construction as a plain STS over (state, incoming label)
    /// pairs, for the explorer. Branching is finite by construction.
    pub fn lift(
        &self,
        init: LiveState<F::State, F::Role>,
    ) -> LiftedSts<'_, F> {
        LiftedSts { lm: self, init }
    }
}

/// The fuel construction viewed as an unlabeled STS; each state carries the
/// label that produced it (the initial state carries `Silent(tid 0)` as a
/// placeholder).
pub struct LiftedSts<'a, F: FairnessModel> {
    lm: &'a LiveModel<F>,
    init: LiveState<F::State, F::Role>,
}

impl<F: FairnessModel> Sts for LiftedSts<'_, F> {
    type State = (LiveState<F::State, F::Role>, LiveLabel<F::Role>);

    fn init(&self) -> Self::State {
        (self.init.clone(), LiveLabel::Silent(Tid(0)))
    }

    fn successors(&self, s: &Self::State) -> Vec<Self::State> {
        let mut out = Vec::new();
        for lbl in self.lm.labels(&s.0) {
            for ls2 in self.lm.successors_of(&s.0, &lbl) {
                out.push((ls2, lbl.clone()));
            }
        }
        out
    }
}

/// Destuttered view of a fuel-construction trace: the underlying model states
/// joined by the roles of its non-silent transitions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Destuttered<S, R> {
    pub states: FiniteTrace<S>,
    pub labels: Vec<R>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DestutterError {
    #[error("transition {0} is not a valid fuel-construction step")]
    InvalidTransition(usize),
}

/// Projects the underlying states, keeping only role-labeled transitions.
/// Rejects traces that are not valid under the fuel discipline.
pub fn destutter<F: FairnessModel>(
    lm: &LiveModel<F>,
    t: &FiniteTrace<(LiveState<F::State, F::Role>, LiveLabel<F::Role>)>,
) -> Result<Destuttered<F::State, F::Role>, DestutterError> {
    for i in 1..t.len() {
        let (prev, _) = &t[i - 1];
        let (cur, lbl) = &t[i];
        if !lm.is_successor(prev, lbl, cur) {
            return Err(DestutterError::InvalidTransition(i));
        }
    }
    let mut states = FiniteTrace::singleton(t.first().0.under.clone());
    let mut labels = Vec::new();
    for i in 1..t.len() {
        if let (ls, LiveLabel::Step(r, _)) = &t[i] {
            states.push(ls.under.clone());
            labels.push(r.clone());
        }
    }
    Ok(Destuttered { states, labels })
}

/// Checks that a destuttered trace is a valid labeled trace of the model.
pub fn destuttered_is_valid<F: FairnessModel>(f: &F, d: &Destuttered<F::State, F::Role>) -> bool {
    if d.labels.len() + 1 != d.states.len() {
        return false;
    }
    (0..d.labels.len()).all(|i| {
        f.enabled(&d.states[i]).contains(&d.labels[i])
            && f.step(&d.states[i], &d.labels[i]).contains(&d.states[i + 1])
    })
}

/// Well-founded ordering given as a decidable `le` plus a rank into ℕ×ℕ.
/// The rank makes well-foundedness checkable: the checker verifies `le`
/// agrees with lexicographic rank comparison on every pair it tests.
pub struct WfOrder<S> {
    pub le: Box<dyn Fn(&S, &S) -> bool>,
    pub rank: Box<dyn Fn(&S) -> (u64, u64)>,
}

impl<S> WfOrder<S> {
    pub fn by_rank(rank: impl Fn(&S) -> (u64, u64) + Clone + 'static) -> Self {
        let r2 = rank.clone();
        WfOrder { le: Box::new(move |a, b| rank(a) <= rank(b)), rank: Box::new(r2) }
    }
}

/// Outcome of the fair-termination check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum FairTermination {
    Pass,
    /// `which` is the violated condition: 1 = transition not ≤-decreasing,
    /// 2 = progress role disabled or not strictly decreasing,
    /// 3 = non-progress transition changed the progress role.
    Violation { which: u8, state: String, role: String, target: Option<String>, detail: String },
    /// `le` disagreed with the rank function; the order is not trustworthy.
    ComparatorError { a: String, b: String },
}

/// Verifies the local termination conditions over `states` (which must cover
/// every state reachable in the scenario of interest):
/// every transition is non-increasing; at every non-dead-end state the
/// progress role is enabled and all its transitions strictly decrease; and
/// transitions by other roles preserve the progress role.
pub fn check_locally_fair_terminating<F: FairnessModel>(
    f: &F,
    order: &WfOrder<F::State>,
    progress: impl Fn(&F::State) -> F::Role,
    states: &[F::State],
) -> FairTermination {
    let le = |a: &F::State, b: &F::State| -> Result<bool, FairTermination> {
        let by_test = (order.le)(a, b);
        let by_rank = (order.rank)(a) <= (order.rank)(b);
        if by_test != by_rank {
            return Err(FairTermination::ComparatorError {
                a: format!("{a:?}"),
                b: format!("{b:?}"),
            });
        }
        Ok(by_test)
    };
    let lt = |a: &F::State, b: &F::State| -> Result<bool, FairTermination> {
        Ok(le(a, b)? && !le(b, a)?)
    };

    for s in states {
        let enabled = f.enabled(s);
        let mut dead_end = true;
        for r in &enabled {
            for s2 in f.step(s, r) {
                dead_end = false;
                match le(&s2, s) {
                    Err(e) => return e,
                    Ok(false) => {
                        return FairTermination::Violation {
                            which: 1,
                            state: format!("{s:?}"),
                            role: format!("{r:?}"),
                            target: Some(format!("{s2:?}")),
                            detail: "transition increases the order".into(),
                        }
                    }
                    Ok(true) => {}
                }
            }
        }
        if dead_end {
            continue;
        }
        let p = progress(s);
        if !enabled.contains(&p) {
            return FairTermination::Violation {
                which: 2,
                state: format!("{s:?}"),
                role: format!("{p:?}"),
                target: None,
                detail: "progress role not enabled".into(),
            };
        }
        for s2 in f.step(s, &p) {
            match lt(&s2, s) {
                Err(e) => return e,
                Ok(false) => {
                    return FairTermination::Violation {
                        which: 2,
                        state: format!("{s:?}"),
                        role: format!("{p:?}"),
                        target: Some(format!("{s2:?}")),
                        detail: "progress transition does not strictly decrease".into(),
                    }
                }
                Ok(true) => {}
            }
        }
        for r in &enabled {
            if *r == p {
                continue;
            }
            for s2 in f.step(s, r) {
                if progress(&s2) != p {
                    return FairTermination::Violation {
                        which: 3,
                        state: format!("{s:?}"),
                        role: format!("{r:?}"),
                        target: Some(format!("{s2:?}")),
                        detail: "non-progress transition changed the progress role".into(),
                    };
                }
            }
        }
    }
    FairTermination::Pass
}
