//! Flag flip-flop under fair scheduling: one thread sets a shared flag, the
//! other clears it, each a bounded number of times. The run couples to a
//! fueled role model whose transitions mirror the cas outcomes, so bounded
//! stuttering and termination of both threads fall out of the fuel
//! discipline and a local well-founded-order check.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::model::{
    destutter, Destuttered, DestutterError, FairnessModel, LiveLabel, LiveModel, LiveState,
    WfOrder,
};
use crate::netsem::sched::{Policy, Scheduler};
use crate::netsem::{
    Effect, EffectKind, EffectResult, Event, ExecTrace, Loc, Machine, MachineBuilder, StepLabel,
    ThreadProgram, Tid, Value,
};
use crate::refinement::{run_coupled, Coupling, CoupledRun, ModelTrace, StepView, TraceRel};

/// Every role holds at most this much fuel; refueled on each role step.
pub const YN_FUEL: u64 = 30;

/// Model state: remaining clear-side iterations, the flag, and one liveness
/// bit per role (a cleared bit means that role has shut down).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct YnState {
    pub m: u64,
    pub b: bool,
    pub ye: bool,
    pub ne: bool,
}

pub fn yn(m: u64, b: bool, ye: bool, ne: bool) -> YnState {
    YnState { m, b, ye, ne }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum YnRole {
    Yes,
    No,
}

/// The two-role flip-flop model. Transitions, writing states as (m, b, ye, ne):
///
/// 1. `(m,1,1,1) -Yes-> (m,0,1,1)` if m > 0   (Yes clears the flag)
/// 2. `(m,0,1,1) -Yes-> (m,0,1,1)` if m > 0   (Yes cas fails)
/// 3. `(m,0,1,1) -No->  (m-1,1,1,1)` if m > 0 (No sets the flag)
/// 4. `(m,1,1,1) -No->  (m,1,1,1)`            (No cas fails)
/// 5. `(1,0,0,1) -No->  (0,1,0,1)`            (No's last set after Yes is gone)
/// 6. `(m,b,1,ne) -Yes-> (m,b,0,ne)` if m <= 1 (Yes shuts down)
/// 7. `(0,b,ye,1) -No->  (0,b,ye,0)`           (No shuts down)
pub struct Fyn {
    pub k: u64,
    /// Fuel granted on every role step; roles also start with this much.
    pub fuel: u64,
}

impl Fyn {
    pub fn new(k: u64) -> Self {
        Fyn { k, fuel: YN_FUEL }
    }

    pub fn with_fuel(k: u64, fuel: u64) -> Self {
        Fyn { k, fuel }
    }
}

impl FairnessModel for Fyn {
    type State = YnState;
    type Role = YnRole;

    fn roles(&self) -> Vec<YnRole> {
        vec![YnRole::Yes, YnRole::No]
    }

    fn enabled(&self, s: &YnState) -> Vec<YnRole> {
        let mut out = Vec::new();
        if s.ye {
            out.push(YnRole::Yes);
        }
        if s.ne {
            out.push(YnRole::No);
        }
        out
    }

    fn step(&self, s: &YnState, role: &YnRole) -> Vec<YnState> {
        let mut out = Vec::new();
        match role {
            YnRole::Yes => {
                if s.b && s.ye && s.ne && s.m > 0 {
                    out.push(yn(s.m, false, true, true));
                }
                if !s.b && s.ye && s.ne && s.m > 0 {
                    out.push(*s);
                }
                if s.ye && s.m <= 1 {
                    out.push(yn(s.m, s.b, false, s.ne));
                }
            }
            YnRole::No => {
                if !s.b && s.ye && s.ne && s.m > 0 {
                    out.push(yn(s.m - 1, true, true, true));
                }
                if s.b && s.ye && s.ne {
                    out.push(*s);
                }
                if *s == yn(1, false, false, true) {
                    out.push(yn(0, true, false, true));
                }
                if s.ne && s.m == 0 {
                    out.push(yn(0, s.b, s.ye, false));
                }
            }
        }
        out
    }

    fn fuel_limit(&self, _s: &YnState) -> u64 {
        self.fuel
    }

    fn init(&self) -> YnState {
        yn(self.k, false, true, true)
    }
}

/// All states with the iteration counter bounded by `m_max`.
pub fn fyn_states(m_max: u64) -> Vec<YnState> {
    let mut out = Vec::new();
    for m in 0..=m_max {
        for b in [false, true] {
            for ye in [false, true] {
                for ne in [false, true] {
                    out.push(yn(m, b, ye, ne));
                }
            }
        }
    }
    out
}

/// States reachable from the `k`-iteration initial state, sorted.
pub fn reachable_fyn(k: u64) -> Vec<YnState> {
    let f = Fyn::new(k);
    let mut seen: BTreeSet<YnState> = BTreeSet::new();
    let mut frontier = vec![f.init()];
    seen.insert(f.init());
    while let Some(s) = frontier.pop() {
        for r in f.enabled(&s) {
            for s2 in f.step(&s, &r) {
                if seen.insert(s2) {
                    frontier.push(s2);
                }
            }
        }
    }
    seen.into_iter().collect()
}

/// Rank whose lexicographic order every non-loop transition strictly
/// decreases: the flag folds into the counter, the liveness bits into a sum.
pub fn fyn_order() -> WfOrder<YnState> {
    WfOrder::by_rank(|s: &YnState| (2 * s.m + s.b as u64, s.ye as u64 + s.ne as u64))
}

/// The flag-reading progress map. Fails the local-termination check: once
/// Yes has shut down with the flag still set, it names a disabled role.
pub fn progress_literal(s: &YnState) -> YnRole {
    if s.b {
        YnRole::Yes
    } else {
        YnRole::No
    }
}

/// Progress map that defers to the surviving role once one has shut down.
pub fn progress_shutdown_aware(s: &YnState) -> YnRole {
    if !s.ye {
        YnRole::No
    } else if !s.ne {
        YnRole::Yes
    } else if s.b {
        YnRole::Yes
    } else {
        YnRole::No
    }
}

/// Clear-side thread. Allocates the flag, forks the set-side thread, then
/// loops: cas the flag 0 -> 1, decrement on success, halt at zero.
pub struct YnMain {
    k: u64,
    m: u64,
    loc: Option<Loc>,
}

impl YnMain {
    pub fn boxed(k: u64) -> Box<Self> {
        Box::new(YnMain { k, m: k, loc: None })
    }

    fn attempt(&self) -> Effect {
        Effect::Cas {
            loc: self.loc.expect("flag allocated before first cas"),
            expect: Value::Nat(0),
            new: Value::Nat(1),
        }
    }
}

impl ThreadProgram for YnMain {
    fn step(&mut self, input: EffectResult) -> Effect {
        match input {
            EffectResult::Start => {
                Effect::Alloc { label: Some("b".into()), value: Value::Nat(0) }
            }
            EffectResult::Loc(l) => {
                self.loc = Some(l);
                Effect::Fork { program: YnYes::boxed(l, self.k) }
            }
            EffectResult::Child(_) => self.attempt(),
            EffectResult::Cas(false) => self.attempt(),
            EffectResult::Cas(true) => {
                self.m -= 1;
                if self.m == 0 {
                    Effect::Halt { value: Value::Unit }
                } else {
                    self.attempt()
                }
            }
            other => Effect::Stuck { reason: format!("flag clearer got {other:?}") },
        }
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

/// Set-side thread, forked with the flag's location: cas the flag 1 -> 0,
/// decrement on success, halt at zero.
pub struct YnYes {
    loc: Loc,
    n: u64,
}

impl YnYes {
    pub fn boxed(loc: Loc, n: u64) -> Box<Self> {
        Box::new(YnYes { loc, n })
    }

    fn attempt(&self) -> Effect {
        Effect::Cas { loc: self.loc, expect: Value::Nat(1), new: Value::Nat(0) }
    }
}

impl ThreadProgram for YnYes {
    fn step(&mut self, input: EffectResult) -> Effect {
        match input {
            EffectResult::Start | EffectResult::Cas(false) => self.attempt(),
            EffectResult::Cas(true) => {
                self.n -= 1;
                if self.n == 0 {
                    Effect::Halt { value: Value::Unit }
                } else {
                    self.attempt()
                }
            }
            other => Effect::Stuck { reason: format!("flag setter got {other:?}") },
        }
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

/// Model states carried along a coupled run: the fueled state plus the label
/// that produced it (the initial entry carries a placeholder label).
pub type YnModelState = (LiveState<YnState, YnRole>, LiveLabel<YnRole>);

pub fn yn_live_model(k: u64) -> LiveModel<Fyn> {
    yn_live_model_fuel(k, YN_FUEL)
}

pub fn yn_live_model_fuel(k: u64, fuel: u64) -> LiveModel<Fyn> {
    LiveModel::new(Fyn::with_fuel(k, fuel), vec![Tid(0), Tid(1)])
}

/// Initial model entry: both roles fully fueled and owned by the first
/// thread, which hands the set side off when it forks.
pub fn yn_init_model(k: u64) -> YnModelState {
    yn_init_model_fuel(k, YN_FUEL)
}

pub fn yn_init_model_fuel(k: u64, fuel: u64) -> YnModelState {
    let lm = yn_live_model_fuel(k, fuel);
    (lm.init_state(|_| Tid(0)), LiveLabel::Silent(Tid(0)))
}

/// Maps machine steps to fueled-model steps. Every cas resolution with a
/// matching model arrow takes it; the set side's last successful cas has no
/// arrow left (its success rule needs m > 0) and burns fuel instead; each
/// thread's halt step takes its shutdown arrow, which is the step to a state
/// where its role is no longer enabled.
pub struct YnCoupling {
    lm: LiveModel<Fyn>,
    main: Tid,
    yes: Option<Tid>,
}

impl YnCoupling {
    pub fn new(k: u64, main: Tid) -> Self {
        Self::with_fuel(k, YN_FUEL, main)
    }

    pub fn with_fuel(k: u64, fuel: u64, main: Tid) -> Self {
        YnCoupling { lm: yn_live_model_fuel(k, fuel), main, yes: None }
    }

    fn silent(&self, last: &LiveState<YnState, YnRole>, tid: Tid) -> Vec<YnModelState> {
        self.lm
            .canonical_silent(last, tid)
            .map(|ls| (ls, LiveLabel::Silent(tid)))
            .into_iter()
            .collect()
    }

    fn step_to(
        &self,
        last: &LiveState<YnState, YnRole>,
        role: YnRole,
        tid: Tid,
        target: YnState,
    ) -> Vec<YnModelState> {
        self.lm
            .canonical_step(last, &role, tid, &target, |_| tid)
            .map(|ls| (ls, LiveLabel::Step(role, tid)))
            .into_iter()
            .collect()
    }
}

impl Coupling<YnModelState> for YnCoupling {
    fn candidates(&mut self, view: &StepView<'_, YnModelState>) -> Vec<YnModelState> {
        let (last, _) = view.model.last();
        let u = last.under;
        let StepLabel::Thread(tid) = view.label else {
            return vec![];
        };
        match &view.record.effect {
            Some(EffectKind::Alloc { .. }) => self.silent(last, tid),
            Some(EffectKind::Fork { child }) => {
                self.yes = Some(*child);
                // The fork step hands the set-side role to the child; the
                // owner change rides on the same fuel-burning silent step.
                let Some(mut ls) = self.lm.canonical_silent(last, tid) else {
                    return vec![];
                };
                ls.mapping.insert(YnRole::Yes, *child);
                vec![(ls, LiveLabel::Silent(tid))]
            }
            Some(EffectKind::Cas { success, .. }) if Some(tid) == self.yes => {
                if !success {
                    self.step_to(last, YnRole::Yes, tid, u)
                } else if u.m > 0 {
                    self.step_to(last, YnRole::Yes, tid, yn(u.m, false, true, true))
                } else {
                    self.silent(last, tid)
                }
            }
            Some(EffectKind::Cas { success, .. }) if tid == self.main => {
                if !success {
                    self.step_to(last, YnRole::No, tid, u)
                } else if u.ye && u.m > 0 {
                    self.step_to(last, YnRole::No, tid, yn(u.m - 1, true, true, true))
                } else {
                    self.step_to(last, YnRole::No, tid, yn(0, true, false, true))
                }
            }
            Some(EffectKind::Halt) if Some(tid) == self.yes => {
                self.step_to(last, YnRole::Yes, tid, yn(u.m, u.b, false, u.ne))
            }
            Some(EffectKind::Halt) if tid == self.main => {
                self.step_to(last, YnRole::No, tid, yn(u.m, u.b, u.ye, false))
            }
            _ => vec![],
        }
    }
}

/// Step relation for coupled runs: every committed model entry must be a
/// valid fueled transition from its predecessor, and the heap flag must
/// agree with the model flag. The one sanctioned mismatch is after the set
/// side's final clear, which the model (out of success arrows at m = 0)
/// absorbs without moving its flag bit.
pub struct YnRel {
    lm: LiveModel<Fyn>,
    b_loc: Option<(Loc, usize)>,
}

impl YnRel {
    pub fn new(k: u64) -> Self {
        Self::with_fuel(k, YN_FUEL)
    }

    pub fn with_fuel(k: u64, fuel: u64) -> Self {
        YnRel { lm: yn_live_model_fuel(k, fuel), b_loc: None }
    }

    fn flag_cell(&self, exec: &ExecTrace) -> Option<(Loc, usize)> {
        self.b_loc.or_else(|| {
            let rec = exec.steps.last()?;
            rec.events.iter().find_map(|e| match e {
                Event::Alloc { label, loc, node } if label == "b" => {
                    Some((*loc, node.0 as usize))
                }
                _ => None,
            })
        })
    }
}

impl TraceRel<YnModelState> for YnRel {
    fn on_init(
        &mut self,
        _machine: &Machine,
        exec: &ExecTrace,
        model0: &YnModelState,
    ) -> Result<(), String> {
        assert_eq!(exec.len(), 1);
        self.b_loc = None;
        if model0.0.under != self.lm.f.init() {
            return Err(format!("model starts at {:?}, not the initial state", model0.0.under));
        }
        Ok(())
    }

    fn try_step(
        &self,
        _machine: &Machine,
        exec: &ExecTrace,
        model: &ModelTrace<YnModelState>,
        candidate: &YnModelState,
    ) -> Result<(), String> {
        let (prev, _) = model.last();
        let (ls, lbl) = candidate;
        if !self.lm.is_successor(prev, lbl, ls) {
            return Err(format!("{lbl:?} to {ls:?} is not a valid fueled step"));
        }
        match self.flag_cell(exec) {
            None => {
                if ls.under != self.lm.f.init() {
                    return Err("model moved before the flag was allocated".into());
                }
            }
            Some((loc, node)) => {
                let hb = match exec.last_snap().heaps[node].get(&loc) {
                    Some(Value::Nat(0)) => false,
                    Some(Value::Nat(1)) => true,
                    other => return Err(format!("flag cell holds {other:?}")),
                };
                let mb = ls.under.b;
                let after_final_clear = ls.under.m == 0 && mb && !hb;
                if hb != mb && !after_final_clear {
                    return Err(format!(
                        "heap flag {hb} disagrees with model flag {mb} at {:?}",
                        ls.under
                    ));
                }
            }
        }
        Ok(())
    }

    fn commit(
        &mut self,
        _machine: &Machine,
        exec: &ExecTrace,
        _model: &ModelTrace<YnModelState>,
        _chosen: &YnModelState,
    ) {
        if self.b_loc.is_none() {
            self.b_loc = self.flag_cell(exec);
        }
    }
}

pub struct YnRun {
    pub machine: Machine,
    pub run: CoupledRun<YnModelState>,
    pub main: Tid,
}

/// Builds the one-node machine (clear-side thread only; it forks the set
/// side) and runs it coupled to the fueled model. `k` is the per-side
/// iteration count and must be at least 1.
pub fn run_yesno(seed: u64, k: u64, policy: Policy, horizon: usize) -> YnRun {
    run_yesno_fuel(seed, k, YN_FUEL, policy, horizon)
}

pub fn run_yesno_fuel(seed: u64, k: u64, fuel: u64, policy: Policy, horizon: usize) -> YnRun {
    assert!(k >= 1, "at least one iteration per side");
    assert!(fuel >= 3, "fuel must cover the two setup steps plus a clear");
    let mut b = MachineBuilder::new(seed);
    let node = b.add_node("local");
    let main = b.spawn(node, YnMain::boxed(k));
    let mut machine = b.build();
    let mut sched = Scheduler::new(policy, seed);
    let mut coupling = YnCoupling::with_fuel(k, fuel, main);
    let mut rel = YnRel::with_fuel(k, fuel);
    let init = yn_init_model_fuel(k, fuel);
    let run = run_coupled(&mut machine, &mut sched, &mut coupling, &mut rel, init, horizon);
    YnRun { machine, run, main }
}

/// Projects the coupled model trace to the role-labeled flip-flop trace,
/// validating the fuel discipline along the way.
pub fn yn_destuttered(
    k: u64,
    model: &ModelTrace<YnModelState>,
) -> Result<Destuttered<YnState, YnRole>, DestutterError> {
    destutter(&yn_live_model(k), model)
}

/// Smallest fuel value any role holds anywhere in the trace. The initial
/// state is fully fueled, so this is the worst-case scheduling slack; a
/// shutdown state with no live roles contributes nothing.
pub fn min_residual_fuel(model: &ModelTrace<YnModelState>) -> u64 {
    model
        .iter()
        .flat_map(|(ls, _)| ls.fuels.values().copied())
        .min()
        .unwrap_or(YN_FUEL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{check_locally_fair_terminating, FairTermination};
    use crate::netsem::sched::FairParams;
    use crate::refinement::{check_lockstep, check_rel_all_prefixes};

    fn fair() -> Policy {
        Policy::Fair(FairParams::default())
    }

    #[test]
    fn transition_table_matches_the_seven_rules() {
        let f = Fyn::new(5);
        assert_eq!(f.init(), yn(5, false, true, true));
        assert_eq!(f.enabled(&yn(3, true, true, true)), vec![YnRole::Yes, YnRole::No]);
        assert_eq!(f.enabled(&yn(3, true, false, true)), vec![YnRole::No]);
        assert_eq!(f.enabled(&yn(0, true, false, false)), vec![]);

        // Main phase: success and failure arrows for each side.
        assert_eq!(f.step(&yn(3, true, true, true), &YnRole::Yes), vec![yn(3, false, true, true)]);
        assert_eq!(f.step(&yn(3, false, true, true), &YnRole::Yes), vec![yn(3, false, true, true)]);
        assert_eq!(f.step(&yn(3, false, true, true), &YnRole::No), vec![yn(2, true, true, true)]);
        // The failure loop is the only arrow the set side's rival has there.
        assert_eq!(f.step(&yn(5, true, true, true), &YnRole::No), vec![yn(5, true, true, true)]);

        // Near zero the shutdown arrows open up alongside the loops.
        assert_eq!(
            f.step(&yn(1, false, true, true), &YnRole::Yes),
            vec![yn(1, false, true, true), yn(1, false, false, true)]
        );
        assert_eq!(f.step(&yn(0, true, true, true), &YnRole::Yes), vec![yn(0, true, false, true)]);
        assert_eq!(
            f.step(&yn(0, true, true, true), &YnRole::No),
            vec![yn(0, true, true, true), yn(0, true, true, false)]
        );
        // Last set after the set side has shut down.
        assert_eq!(f.step(&yn(1, false, false, true), &YnRole::No), vec![yn(0, true, false, true)]);
        assert_eq!(f.step(&yn(1, false, false, true), &YnRole::Yes), vec![]);
        // Shutdown arrows are gated on the counter.
        assert_eq!(f.step(&yn(2, false, true, true), &YnRole::Yes), vec![yn(2, false, true, true)]);
    }

    #[test]
    fn steps_never_disable_the_other_role() {
        let f = Fyn::new(10);
        for s in fyn_states(10) {
            let before = f.enabled(&s);
            for r in &before {
                for s2 in f.step(&s, r) {
                    let after = f.enabled(&s2);
                    for other in &before {
                        if other != r {
                            assert!(
                                after.contains(other),
                                "{r:?} step {s:?} -> {s2:?} disabled {other:?}"
                            );
                        }
                    }
                }
            }
            // Arrows only exist for enabled roles.
            for r in [YnRole::Yes, YnRole::No] {
                if !before.contains(&r) {
                    assert!(f.step(&s, &r).is_empty());
                }
            }
        }
    }

    #[test]
    fn shutdown_aware_progress_certifies_fair_termination() {
        let v = check_locally_fair_terminating(
            &Fyn::new(10),
            &fyn_order(),
            progress_shutdown_aware,
            &fyn_states(10),
        );
        assert_eq!(v, FairTermination::Pass);
    }

    #[test]
    fn literal_progress_map_fails_after_the_set_side_shuts_down() {
        // Restricted to reachable states the literal flag-reading map fails
        // exactly once: the flag is still set but its reader is gone.
        let v = check_locally_fair_terminating(
            &Fyn::new(10),
            &fyn_order(),
            progress_literal,
            &reachable_fyn(10),
        );
        match v {
            FairTermination::Violation { which: 2, state, detail, .. } => {
                assert!(state.contains("m: 0") && state.contains("b: true"), "{state}");
                assert!(state.contains("ye: false") && state.contains("ne: true"), "{state}");
                assert!(detail.contains("not enabled"), "{detail}");
            }
            other => panic!("expected a progress violation, got {other:?}"),
        }
    }

    #[test]
    fn constant_progress_map_fails_at_a_shutdown_state() {
        let v = check_locally_fair_terminating(
            &Fyn::new(5),
            &fyn_order(),
            |_| YnRole::Yes,
            &reachable_fyn(5),
        );
        match v {
            FairTermination::Violation { which: 2, state, .. } => {
                // Sorted order reaches the post-shutdown states first, where
                // the constant map names the vanished role.
                assert!(state.contains("ye: false"), "{state}");
            }
            other => panic!("expected a progress violation, got {other:?}"),
        }
    }

    #[test]
    fn single_round_terminates_with_both_sides_shut_down() {
        let out = run_yesno(11, 1, fair(), 400);
        assert!(out.run.ok(), "{:?}", out.run.violation);
        assert!(out.machine.all_halted());
        check_lockstep(&out.run).unwrap();

        let (last, _) = out.run.model.last();
        assert_eq!((last.under.m, last.under.ye, last.under.ne), (0, false, false));
        assert!(last.fuels.is_empty() && last.mapping.is_empty());

        let d = yn_destuttered(1, &out.run.model).unwrap();
        assert_eq!(d.states.first(), &yn(1, false, true, true));
        assert_eq!(d.states.last(), &yn(0, true, false, false));
        let yes_steps = d.labels.iter().filter(|r| **r == YnRole::Yes).count();
        let no_steps = d.labels.iter().filter(|r| **r == YnRole::No).count();
        // One set, one clear, two shutdowns; failure loops may add more.
        assert!(yes_steps >= 1 && no_steps >= 2);

        // The set side's final clear leaves the heap flag at zero.
        assert_eq!(out.run.exec.last_snap().heaps[0].get(&Loc(0)), Some(&Value::Nat(0)));
    }

    #[test]
    fn scripted_schedule_pins_the_full_model_trace() {
        let t = |i: u32| StepLabel::Thread(Tid(i));
        // Alloc, fork, one set-side failure, the clear side's set and halt,
        // then the set side's final clear and halt.
        let script = vec![t(0), t(0), t(1), t(0), t(0), t(1), t(1)];
        let out = run_yesno(3, 1, Policy::Script(script), 100);
        assert!(out.run.ok(), "{:?}", out.run.violation);
        assert!(out.machine.all_halted());
        assert_eq!(out.run.model.len(), 8);

        let labels: Vec<_> = out.run.model.iter().skip(1).map(|(_, l)| l.clone()).collect();
        assert_eq!(
            labels,
            vec![
                LiveLabel::Silent(Tid(0)),
                LiveLabel::Silent(Tid(0)),
                LiveLabel::Step(YnRole::Yes, Tid(1)),
                LiveLabel::Step(YnRole::No, Tid(0)),
                LiveLabel::Step(YnRole::No, Tid(0)),
                LiveLabel::Silent(Tid(1)),
                LiveLabel::Step(YnRole::Yes, Tid(1)),
            ]
        );

        // Fuel burns on the two setup steps, the role handoff happens at the
        // fork, and each cas arrow refuels its role.
        let at = |i: usize| &out.run.model[i].0;
        assert_eq!(at(1).fuels[&YnRole::Yes], 29);
        assert_eq!(at(2).fuels[&YnRole::Yes], 28);
        assert_eq!(at(2).mapping[&YnRole::Yes], Tid(1));
        assert_eq!(at(2).mapping[&YnRole::No], Tid(0));
        assert_eq!(at(3).fuels[&YnRole::Yes], 30);
        assert_eq!(at(3).fuels[&YnRole::No], 28);
        assert_eq!(at(4).fuels[&YnRole::No], 30);
        assert_eq!(at(4).under, yn(0, true, true, true));
        // The clear side's shutdown drops its role; the set side keeps going.
        assert_eq!(at(5).under, yn(0, true, true, false));
        assert_eq!(at(5).fuels.keys().collect::<Vec<_>>(), vec![&YnRole::Yes]);
        // Final clear has no success arrow left and burns fuel instead.
        assert_eq!(at(6).under, yn(0, true, true, false));
        assert_eq!(at(6).fuels[&YnRole::Yes], 29);
        assert_eq!(at(7).under, yn(0, true, false, false));
        assert!(at(7).fuels.is_empty());

        assert_eq!(min_residual_fuel(&out.run.model), 28);
        let d = yn_destuttered(1, &out.run.model).unwrap();
        assert_eq!(
            d.states.as_slice(),
            &[
                yn(1, false, true, true),
                yn(1, false, true, true),
                yn(0, true, true, true),
                yn(0, true, true, false),
                yn(0, true, false, false),
            ]
        );
        assert_eq!(d.labels, vec![YnRole::Yes, YnRole::No, YnRole::No, YnRole::Yes]);
    }

    #[test]
    fn two_hundred_fair_schedules_terminate_without_underflow() {
        let mut worst_fuel = u64::MAX;
        let mut longest = 0usize;
        for seed in 0..200 {
            let out = run_yesno(seed, 5, fair(), 4000);
            assert!(out.run.ok(), "seed {seed}: {:?}", out.run.violation);
            assert!(out.machine.all_halted(), "seed {seed} did not terminate");
            let (last, _) = out.run.model.last();
            assert_eq!(
                (last.under.m, last.under.ye, last.under.ne),
                (0, false, false),
                "seed {seed}"
            );
            let d = yn_destuttered(5, &out.run.model).unwrap();
            assert_eq!(d.states.last(), &yn(0, true, false, false));
            worst_fuel = worst_fuel.min(min_residual_fuel(&out.run.model));
            longest = longest.max(out.run.exec.steps.len());
        }
        // The only silent steps are the two-step setup and each final clear,
        // so the fuel floor is exact across every schedule.
        assert_eq!(worst_fuel, 28);
        assert!(longest < 4000, "a run hit the horizon at {longest}");
    }

    #[test]
    fn random_schedules_couple_identically() {
        for seed in 0..20 {
            let out = run_yesno(seed, 3, Policy::Random { drop_p: 0.0 }, 4000);
            assert!(out.run.ok(), "seed {seed}: {:?}", out.run.violation);
            assert!(out.machine.all_halted(), "seed {seed}");
            yn_destuttered(3, &out.run.model).unwrap();
        }
    }

    #[test]
    fn smaller_fuel_grants_shift_the_floor() {
        // The two setup steps burn two units whatever the grant is.
        let out = run_yesno_fuel(9, 2, 5, fair(), 4000);
        assert!(out.run.ok(), "{:?}", out.run.violation);
        assert!(out.machine.all_halted());
        assert_eq!(min_residual_fuel(&out.run.model), 3);
        destutter(&yn_live_model_fuel(2, 5), &out.run.model).unwrap();
    }

    #[test]
    fn tampered_fuel_is_rejected_on_replay() {
        let out = run_yesno(5, 2, fair(), 4000);
        assert!(out.run.ok());
        let mut rel = YnRel::new(2);
        check_rel_all_prefixes(&mut rel, &out.machine, &out.run.exec, &out.run.model).unwrap();

        let mut entries = out.run.model.as_slice().to_vec();
        let idx = entries.len() / 2;
        if let Some(f) = entries[idx].0.fuels.get_mut(&YnRole::No) {
            *f += 1;
        } else {
            entries[idx].0.fuels.insert(YnRole::No, YN_FUEL + 1);
        }
        let tampered = crate::traces::FiniteTrace::from_vec(entries).unwrap();
        let mut rel = YnRel::new(2);
        let err = check_rel_all_prefixes(&mut rel, &out.machine, &out.run.exec, &tampered)
            .unwrap_err();
        assert_eq!(err.0, idx);
        assert!(err.1.contains("not a valid fueled step"), "{}", err.1);
    }
}
