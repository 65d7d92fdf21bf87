//! Shared-counter increment loop: two threads on one node race to bump a
//! single heap cell via cas, coupled to the counting model 0 -> 1 -> 2 -> ...
//! The model advances exactly on successful cas steps.

use crate::model::Sts;
use crate::netsem::{
    Effect, EffectKind, EffectResult, Event, ExecTrace, Loc, Machine, NodeId, ThreadProgram, Value,
};
use crate::refinement::{Coupling, ModelTrace, StepView, TraceRel};

/// The counting model: state n steps only to n + 1.
pub struct CounterModel;

impl Sts for CounterModel {
    type State = u64;
    fn init(&self) -> u64 {
        0
    }
    fn successors(&self, s: &u64) -> Vec<u64> {
        vec![s + 1]
    }
}

/// The load-then-cas retry loop shared by both threads. Never terminates.
struct IncrLoop {
    loc: Loc,
    issued: Issued,
}

enum Issued {
    Nothing,
    Load,
    Cas,
}

impl IncrLoop {
    fn next(&mut self, input: EffectResult) -> Effect {
        match self.issued {
            Issued::Nothing => {
                self.issued = Issued::Load;
                Effect::Load { loc: self.loc }
            }
            Issued::Load => {
                let n = input.value().as_nat();
                self.issued = Issued::Cas;
                Effect::Cas {
                    loc: self.loc,
                    expect: Value::Nat(n),
                    new: Value::Nat(n + 1),
                }
            }
            Issued::Cas => {
                let _ = input.cas();
                self.issued = Issued::Load;
                Effect::Load { loc: self.loc }
            }
        }
    }
}

/// Root thread: allocates the labeled counter cell, forks a second
/// incrementer, then increments forever.
pub struct IncrMain {
    label: String,
    state: MainState,
}

enum MainState {
    Start,
    AwaitLoc,
    AwaitFork(Loc),
    Looping(IncrLoop),
}

impl IncrMain {
    pub fn boxed(label: impl Into<String>) -> Box<Self> {
        Box::new(IncrMain { label: label.into(), state: MainState::Start })
    }
}

impl ThreadProgram for IncrMain {
    fn step(&mut self, input: EffectResult) -> Effect {
        match std::mem::replace(&mut self.state, MainState::Start) {
            MainState::Start => {
                self.state = MainState::AwaitLoc;
                Effect::Alloc { label: Some(self.label.clone()), value: Value::Nat(0) }
            }
            MainState::AwaitLoc => {
                let loc = input.loc();
                self.state = MainState::AwaitFork(loc);
                Effect::Fork {
                    program: Box::new(IncrWorker {
                        body: IncrLoop { loc, issued: Issued::Nothing },
                    }),
                }
            }
            MainState::AwaitFork(loc) => {
                let _ = input.child();
                let mut body = IncrLoop { loc, issued: Issued::Nothing };
                let eff = body.next(EffectResult::Unit);
                self.state = MainState::Looping(body);
                eff
            }
            MainState::Looping(mut body) => {
                let eff = body.next(input);
                self.state = MainState::Looping(body);
                eff
            }
        }
    }
    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

/// Forked thread: increments forever starting from a known cell.
pub struct IncrWorker {
    body: IncrLoop,
}

impl ThreadProgram for IncrWorker {
    fn step(&mut self, input: EffectResult) -> Effect {
        self.body.next(input)
    }
    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

/// Model moves exactly when a cas lands; everything else stutters.
pub struct IncrCoupling;

impl Coupling<u64> for IncrCoupling {
    fn candidates(&mut self, view: &StepView<'_, u64>) -> Vec<u64> {
        match &view.record.effect {
            Some(EffectKind::Cas { success: true, .. }) => vec![view.model.last() + 1],
            _ => vec![*view.model.last()],
        }
    }
}

/// Trace relation for the counter run. Either no cell with the expected label
/// has been allocated and the model trace is all zeros, or exactly one has
/// and, with n the current model state:
///   - the cell holds n in the newest configuration,
///   - wherever the cell exists in the past its value equals the model state
///     at that index and is at most n,
///   - every value up to n was attained at some index by both cell and model.
///
/// All facts are recomputed from the execution trace itself, so the relation
/// replays correctly over prefixes.
pub struct IncrRel {
    pub label: String,
}

impl IncrRel {
    pub fn new(label: impl Into<String>) -> Self {
        IncrRel { label: label.into() }
    }

    fn labeled_allocs(&self, exec: &ExecTrace) -> Vec<(Loc, NodeId)> {
        exec.steps
            .iter()
            .flat_map(|r| r.events.iter())
            .filter_map(|ev| match ev {
                Event::Alloc { label, loc, node } if *label == self.label => Some((*loc, *node)),
                _ => None,
            })
            .collect()
    }

    fn check(
        &self,
        exec: &ExecTrace,
        model_at: impl Fn(usize) -> u64,
        len: usize,
    ) -> Result<(), String> {
        assert_eq!(exec.len(), len, "traces out of lock-step");
        let allocs = self.labeled_allocs(exec);
        if allocs.is_empty() {
            for i in 0..len {
                if model_at(i) != 0 {
                    return Err(format!("model is {} at {i} before any allocation", model_at(i)));
                }
            }
            return Ok(());
        }
        if allocs.len() > 1 {
            return Err(format!("{} allocations labeled {:?}", allocs.len(), self.label));
        }
        let (loc, node) = allocs[0];
        let n = model_at(len - 1);
        let current = exec.last_snap().heaps[node.0 as usize].get(&loc);
        if current != Some(&Value::Nat(n)) {
            return Err(format!("cell holds {current:?} but model is {n}"));
        }
        let mut attained = vec![false; n as usize + 1];
        for i in 0..len {
            let Some(v) = exec.snaps[i].heaps[node.0 as usize].get(&loc) else {
                continue;
            };
            let m = v.as_nat();
            if m > n {
                return Err(format!("cell held {m} > current model state {n} at index {i}"));
            }
            if model_at(i) != m {
                return Err(format!("cell {m} != model {} at index {i}", model_at(i)));
            }
            attained[m as usize] = true;
        }
        match attained.iter().position(|hit| !hit) {
            None => Ok(()),
            Some(m) => Err(format!("value {m} never attained by cell and model together")),
        }
    }
}

impl TraceRel<u64> for IncrRel {
    fn on_init(&mut self, _m: &Machine, exec: &ExecTrace, model0: &u64) -> Result<(), String> {
        let m0 = *model0;
        self.check(exec, |_| m0, 1)
    }
    fn try_step(
        &self,
        _m: &Machine,
        exec: &ExecTrace,
        model: &ModelTrace<u64>,
        candidate: &u64,
    ) -> Result<(), String> {
        let c = *candidate;
        self.check(exec, |i| if i < model.len() { model[i] } else { c }, model.len() + 1)
    }
    fn commit(&mut self, _m: &Machine, _e: &ExecTrace, _t: &ModelTrace<u64>, _c: &u64) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsem::sched::{FairParams, Policy, Scheduler};
    use crate::netsem::{MachineBuilder, StepLabel, Tid};
    use crate::refinement::{
        check_events_signature, check_lockstep, check_rel_all_prefixes, run_coupled,
        valid_evolution_default,
    };
    use crate::traces::FiniteTrace;

    fn machine(seed: u64) -> Machine {
        let mut b = MachineBuilder::new(seed);
        let node = b.add_node("127.0.0.1");
        b.spawn(node, IncrMain::boxed("ctr"));
        b.build()
    }

    fn run(seed: u64, horizon: usize) -> (Machine, crate::refinement::CoupledRun<u64>) {
        let mut m = machine(seed);
        let mut sched = Scheduler::new(Policy::Fair(FairParams::default()), seed);
        let run = run_coupled(&mut m, &mut sched, &mut IncrCoupling, &mut IncrRel::new("ctr"), 0, horizon);
        (m, run)
    }

    #[test]
    fn coupled_run_keeps_cell_and_model_equal() {
        let (m, run) = run(7, 200);
        assert!(run.ok(), "{:?}", run.violation);
        check_lockstep(&run).unwrap();
        check_events_signature(&m, &run.exec, &run.events).unwrap();
        let n = *run.model.last();
        assert!(n > 0, "no increment landed in 200 steps");
        assert_eq!(m.config.heaps[0].get(&Loc(0)), Some(&Value::Nat(n)));
        assert!(run.max_candidates <= 1);
    }

    #[test]
    fn relation_replays_over_every_prefix() {
        let (m, run) = run(11, 200);
        assert!(run.ok());
        let mut fresh = IncrRel::new("ctr");
        check_rel_all_prefixes(&mut fresh, &m, &run.exec, &run.model).unwrap();
    }

    #[test]
    fn model_trace_evolves_by_at_most_one() {
        let (_, run) = run(3, 200);
        for i in 1..run.model.len() {
            let t = run.model.prefix(i - 1);
            assert!(valid_evolution_default(&t, &run.model[i], &CounterModel));
        }
    }

    #[test]
    fn forced_interleaving_makes_one_cas_fail_and_stutter() {
        let mut m = machine(0);
        // Root allocates and forks, both threads load the same value, the
        // first cas lands, the second fails and must stutter the model.
        let script = vec![
            StepLabel::Thread(Tid(0)), // alloc
            StepLabel::Thread(Tid(0)), // fork
            StepLabel::Thread(Tid(0)), // load 0
            StepLabel::Thread(Tid(1)), // load 0
            StepLabel::Thread(Tid(0)), // cas 0 -> 1 succeeds
            StepLabel::Thread(Tid(1)), // cas 0 -> 1 fails
        ];
        let mut sched = Scheduler::new(Policy::Script(script), 0);
        let run = run_coupled(&mut m, &mut sched, &mut IncrCoupling, &mut IncrRel::new("ctr"), 0, 16);
        assert!(run.ok(), "{:?}", run.violation);
        assert_eq!(*run.model.last(), 1);
        assert_eq!(run.model.len(), 7);
        let kinds: Vec<_> = run.exec.steps.iter().map(|r| r.effect.clone()).collect();
        assert!(matches!(kinds[4], Some(EffectKind::Cas { success: true, .. })));
        assert!(matches!(kinds[5], Some(EffectKind::Cas { success: false, .. })));
    }

    #[test]
    fn tampered_model_entry_is_caught_on_replay() {
        let (m, run) = run(5, 120);
        assert!(run.ok());
        let mut states: Vec<u64> = run.model.iter().copied().collect();
        let idx = states.len() / 2;
        states[idx] += 1;
        let bad = FiniteTrace::from_vec(states).unwrap();
        let mut fresh = IncrRel::new("ctr");
        let err = check_rel_all_prefixes(&mut fresh, &m, &run.exec, &bad).unwrap_err();
        assert!(err.0 <= idx, "failure squeezed past the tampered index: {err:?}");
    }

    #[test]
    fn wrong_label_sees_only_the_zero_branch() {
        let (m, run) = run(2, 60);
        assert!(run.ok());
        let mut fresh = IncrRel::new("other");
        let res = check_rel_all_prefixes(&mut fresh, &m, &run.exec, &run.model);
        // The first model move breaks the all-zero branch: no "other" cell.
        if *run.model.last() > 0 {
            assert!(res.is_err());
        }
    }

    #[test]
    fn many_seeds_stay_coupled() {
        for seed in 0..25 {
            let (m, run) = run(seed, 150);
            assert!(run.ok(), "seed {seed}: {:?}", run.violation);
            let n = *run.model.last();
            assert_eq!(m.config.heaps[0].get(&Loc(0)), Some(&Value::Nat(n)), "seed {seed}");
        }
    }
}
