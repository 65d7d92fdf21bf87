//! Lock-step coupling of machine executions to model traces.
//!
//! Each applied machine step asks a coupling for candidate next model states;
//! the first candidate that keeps the trace relation satisfied is appended, so
//! exec and model traces stay the same length. Any failure (no candidate, a
//! stuck thread, a false assertion) is reported as a violation at the first
//! offending index.

use std::fmt::Debug;

use serde::Serialize;

use crate::model::Sts;
use crate::netsem::sched::Scheduler;
use crate::netsem::{Event, ExecTrace, Machine, Snapshot, StepLabel, StepRecord};
use crate::traces::FiniteTrace;

pub type ModelTrace<MS> = FiniteTrace<MS>;

/// Everything a coupling may inspect when proposing candidates for the step
/// that just extended `exec`. The model trace has not been extended yet.
pub struct StepView<'a, MS> {
    pub machine: &'a Machine,
    pub exec: &'a ExecTrace,
    pub model: &'a ModelTrace<MS>,
    pub label: StepLabel,
    pub record: &'a StepRecord,
}

/// Proposes finitely many candidate next model states per machine step.
/// Candidate order matters: the runner commits the first one the relation
/// accepts.
pub trait Coupling<MS> {
    fn candidates(&mut self, view: &StepView<'_, MS>) -> Vec<MS>;
}

/// The always-stutter coupling: the model never moves. Turns a coupled run
/// into a plain simulation.
pub struct StutterCoupling;

impl<MS: Clone> Coupling<MS> for StutterCoupling {
    fn candidates(&mut self, view: &StepView<'_, MS>) -> Vec<MS> {
        vec![view.model.last().clone()]
    }
}

/// Default evolution discipline: a candidate either repeats the last model
/// state or is one model step away from it.
pub fn valid_evolution_default<M: Sts>(m: &ModelTrace<M::State>, cand: &M::State, sts: &M) -> bool
where
    M::State: PartialEq,
{
    cand == m.last() || sts.successors(m.last()).contains(cand)
}

/// A relation between aligned exec/model traces, checked on every prefix.
///
/// Implementations may carry incremental summaries: `try_step` must be
/// side-effect free (it runs once per candidate), `commit` is called exactly
/// once with the accepted candidate.
pub trait TraceRel<MS> {
    /// Checks the singleton pair and initializes summaries.
    fn on_init(
        &mut self,
        machine: &Machine,
        exec: &ExecTrace,
        model0: &MS,
    ) -> Result<(), String>;

    /// Would the relation hold if `candidate` extended the model trace?
    /// `exec` is already extended with the new configuration.
    fn try_step(
        &self,
        machine: &Machine,
        exec: &ExecTrace,
        model: &ModelTrace<MS>,
        candidate: &MS,
    ) -> Result<(), String>;

    /// Absorbs the accepted step into the summaries.
    fn commit(
        &mut self,
        machine: &Machine,
        exec: &ExecTrace,
        model: &ModelTrace<MS>,
        chosen: &MS,
    );
}

/// Relation that accepts everything; useful as the degenerate baseline.
pub struct TrueRel;

impl<MS> TraceRel<MS> for TrueRel {
    fn on_init(&mut self, _m: &Machine, _e: &ExecTrace, _s: &MS) -> Result<(), String> {
        Ok(())
    }
    fn try_step(
        &self,
        _m: &Machine,
        _e: &ExecTrace,
        _t: &ModelTrace<MS>,
        _c: &MS,
    ) -> Result<(), String> {
        Ok(())
    }
    fn commit(&mut self, _m: &Machine, _e: &ExecTrace, _t: &ModelTrace<MS>, _c: &MS) {}
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    /// The coupling offered no candidate the relation accepts.
    NoCandidate,
    /// The relation failed outside candidate selection (initial pair or a
    /// prefix re-check).
    RelationFailed,
    /// A scheduled thread's effect was inapplicable (safety violation).
    StuckThread,
    /// A thread-level runtime assertion evaluated to false.
    AssertionFailed,
    /// Simulator self-check tripped (e.g. the candidate cap).
    Internal,
}

/// First failure of a coupled run, with enough tail context to debug it.
#[derive(Clone, Debug, Serialize)]
pub struct RefinementViolation {
    pub index: usize,
    pub kind: ViolationKind,
    pub diagnostic: String,
    pub exec_tail: Vec<String>,
    pub model_tail: Vec<String>,
}

const TAIL: usize = 5;

fn exec_tail(exec: &ExecTrace) -> Vec<String> {
    let n = exec.steps.len();
    let lo = n.saturating_sub(TAIL);
    exec.steps[lo..]
        .iter()
        .enumerate()
        .map(|(i, r)| format!("#{}: {:?} {:?} {:?}", lo + i + 1, r.label, r.effect, r.events))
        .collect()
}

fn model_tail<MS: Debug>(model: &ModelTrace<MS>) -> Vec<String> {
    let n = model.len();
    let lo = n.saturating_sub(TAIL);
    (lo..n).map(|i| format!("#{i}: {:?}", model[i])).collect()
}

/// Result of a coupled run: the aligned trace pair plus bookkeeping. On
/// violation the traces cover everything accepted before the failure.
pub struct CoupledRun<MS> {
    pub exec: ExecTrace,
    pub model: ModelTrace<MS>,
    /// Largest candidate list any step produced (finitarity evidence).
    pub max_candidates: usize,
    /// Event ledger accumulated step by step: (step index, event).
    pub events: Vec<(usize, Event)>,
    pub violation: Option<RefinementViolation>,
}

impl<MS> CoupledRun<MS> {
    pub fn ok(&self) -> bool {
        self.violation.is_none()
    }
}

/// Hard bound on candidate-list size; a coupling exceeding it is broken.
pub const CANDIDATE_CAP: usize = 4096;

/// Runs the machine under the scheduler for at most `horizon` steps (or until
/// everything halts), extending the model trace in lock-step.
pub fn run_coupled<MS, C, R>(
    machine: &mut Machine,
    scheduler: &mut Scheduler,
    coupling: &mut C,
    rel: &mut R,
    init_model: MS,
    horizon: usize,
) -> CoupledRun<MS>
where
    MS: Clone + Debug,
    C: Coupling<MS>,
    R: TraceRel<MS>,
{
    let mut exec = ExecTrace::new(Snapshot::of(&machine.config));
    let mut model = FiniteTrace::singleton(init_model);
    let mut events: Vec<(usize, Event)> = Vec::new();
    let mut max_candidates = 0usize;

    if let Err(msg) = rel.on_init(machine, &exec, model.last()) {
        let violation = RefinementViolation {
            index: 0,
            kind: ViolationKind::RelationFailed,
            diagnostic: format!("initial pair rejected: {msg}"),
            exec_tail: exec_tail(&exec),
            model_tail: model_tail(&model),
        };
        return CoupledRun { exec, model, max_candidates, events, violation: Some(violation) };
    }

    for _ in 0..horizon {
        if machine.all_halted() {
            break;
        }
        let label = match scheduler.next(machine) {
            Some(l) => l,
            None => break,
        };
        let index = exec.len();
        let applied = match machine.apply(label) {
            Ok(a) => a,
            Err(e) => {
                let kind = if e.is_assertion() {
                    ViolationKind::AssertionFailed
                } else {
                    ViolationKind::StuckThread
                };
                let violation = RefinementViolation {
                    index,
                    kind,
                    diagnostic: e.to_string(),
                    exec_tail: exec_tail(&exec),
                    model_tail: model_tail(&model),
                };
                return CoupledRun {
                    exec,
                    model,
                    max_candidates,
                    events,
                    violation: Some(violation),
                };
            }
        };
        for ev in &applied.events {
            events.push((index, ev.clone()));
        }
        let record = StepRecord { label, effect: applied.effect, events: applied.events };
        exec.push(Snapshot::of(&machine.config), record);

        let view = StepView {
            machine,
            exec: &exec,
            model: &model,
            label,
            record: exec.steps.last().expect("just pushed"),
        };
        let cands = coupling.candidates(&view);
        max_candidates = max_candidates.max(cands.len());
        if cands.len() > CANDIDATE_CAP {
            let violation = RefinementViolation {
                index,
                kind: ViolationKind::Internal,
                diagnostic: format!("candidate list size {} exceeds cap", cands.len()),
                exec_tail: exec_tail(&exec),
                model_tail: model_tail(&model),
            };
            exec.pop();
            events.retain(|(i, _)| *i != index);
            return CoupledRun { exec, model, max_candidates, events, violation: Some(violation) };
        }

        let mut chosen: Option<MS> = None;
        let mut last_err = String::new();
        for c in cands {
            match rel.try_step(machine, &exec, &model, &c) {
                Ok(()) => {
                    chosen = Some(c);
                    break;
                }
                Err(e) => last_err = e,
            }
        }
        match chosen {
            Some(c) => {
                rel.commit(machine, &exec, &model, &c);
                model.push(c);
            }
            None => {
                let diagnostic = if last_err.is_empty() {
                    format!("no candidate for step {:?}", exec.steps.last().unwrap().label)
                } else {
                    format!("all candidates rejected; last: {last_err}")
                };
                let violation = RefinementViolation {
                    index,
                    kind: ViolationKind::NoCandidate,
                    diagnostic,
                    exec_tail: exec_tail(&exec),
                    model_tail: model_tail(&model),
                };
                // Keep the returned traces aligned: the rejected step stays
                // visible in the violation tail only.
                exec.pop();
                events.retain(|(i, _)| *i != index);
                return CoupledRun {
                    exec,
                    model,
                    max_candidates,
                    events,
                    violation: Some(violation),
                };
            }
        }
    }
    CoupledRun { exec, model, max_candidates, events, violation: None }
}

/// Replays a fresh relation instance over every aligned prefix of a finished
/// pair. Lengths must match.
pub fn check_rel_all_prefixes<MS, R>(
    rel: &mut R,
    machine: &Machine,
    exec: &ExecTrace,
    model: &ModelTrace<MS>,
) -> Result<(), (usize, String)>
where
    MS: Clone,
    R: TraceRel<MS>,
{
    if exec.len() != model.len() {
        return Err((0, format!("length mismatch: exec {} vs model {}", exec.len(), model.len())));
    }
    let mut prefix = ExecTrace::new(exec.snaps.first().clone());
    rel.on_init(machine, &prefix, &model[0]).map_err(|e| (0, e))?;
    // The model prefix grows in place; rebuilding it per index would make the
    // whole replay quadratic in the horizon.
    let mut model_prefix = FiniteTrace::singleton(model[0].clone());
    for i in 1..exec.len() {
        prefix.push(exec.snaps[i].clone(), exec.steps[i - 1].clone());
        rel.try_step(machine, &prefix, &model_prefix, &model[i]).map_err(|e| (i, e))?;
        rel.commit(machine, &prefix, &model_prefix, &model[i]);
        model_prefix.push(model[i].clone());
    }
    Ok(())
}

/// Cross-checks the three independent event records: per-step events in the
/// trace, the run's incremental ledger, and the machine's append-only logs.
pub fn check_events_signature(
    machine: &Machine,
    exec: &ExecTrace,
    ledger: &[(usize, Event)],
) -> Result<(), String> {
    let mut from_steps: Vec<(usize, Event)> = Vec::new();
    for (i, rec) in exec.steps.iter().enumerate() {
        for ev in &rec.events {
            from_steps.push((i + 1, ev.clone()));
        }
    }
    if from_steps != ledger {
        return Err(format!(
            "step events and ledger disagree: {} vs {} entries",
            from_steps.len(),
            ledger.len()
        ));
    }
    let allocs: Vec<_> = from_steps
        .iter()
        .filter_map(|(_, e)| match e {
            Event::Alloc { label, loc, node } => Some((label.clone(), *loc, *node)),
            _ => None,
        })
        .collect();
    if allocs != machine.alloc_log() {
        return Err("alloc events diverge from the allocation log".into());
    }
    let sends: Vec<_> = from_steps
        .iter()
        .filter_map(|(_, e)| match e {
            Event::Send { msg } => Some(*msg),
            _ => None,
        })
        .collect();
    let sent_ids: Vec<_> = machine.sent_log().iter().map(|m| m.id).collect();
    if sends != sent_ids {
        return Err("send events diverge from the sent log".into());
    }
    let recvs: Vec<_> = from_steps
        .iter()
        .filter_map(|(_, e)| match e {
            Event::Recv { msg, .. } => Some(*msg),
            _ => None,
        })
        .collect();
    if recvs != machine.consumed_log() {
        return Err("receive events diverge from the consumed log".into());
    }
    // Snapshot ledgers must agree with the final machine ledgers.
    let last = exec.last_snap();
    if last.sent_len != sent_ids.len() || last.consumed_len != recvs.len() {
        return Err("final configuration ledger counters diverge".into());
    }
    Ok(())
}

/// Shared sanity assertions after a successful run.
pub fn check_lockstep<MS>(run: &CoupledRun<MS>) -> Result<(), String> {
    if run.exec.len() != run.model.len() {
        return Err(format!(
            "lock-step broken: exec {} vs model {}",
            run.exec.len(),
            run.model.len()
        ));
    }
    if run.exec.steps.len() + 1 != run.exec.snaps.len() {
        return Err("step records out of sync with snapshots".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsem::sched::{FairParams, Policy};
    use crate::netsem::{Effect, EffectKind, Loc, MachineBuilder, Value};
    use std::any::Any;

    /// Counts up by storing 0,1,2,...,n into one cell, then halts.
    struct CountUp {
        n: u64,
        loc: Option<Loc>,
        next: u64,
    }

    impl CountUp {
        fn boxed(n: u64) -> Box<Self> {
            Box::new(CountUp { n, loc: None, next: 1 })
        }
    }

    impl crate::netsem::ThreadProgram for CountUp {
        fn step(&mut self, input: crate::netsem::EffectResult) -> Effect {
            match self.loc {
                None => match input {
                    crate::netsem::EffectResult::Start => {
                        Effect::Alloc { label: Some("ctr".into()), value: Value::Nat(0) }
                    }
                    r => {
                        self.loc = Some(r.loc());
                        self.emit()
                    }
                },
                Some(_) => self.emit(),
            }
        }
        fn as_any(&self) -> &dyn Any {
            self
        }
    }

    impl CountUp {
        fn emit(&mut self) -> Effect {
            if self.next > self.n {
                return Effect::Halt { value: Value::Unit };
            }
            let v = self.next;
            self.next += 1;
            Effect::Store { loc: self.loc.unwrap(), value: Value::Nat(v) }
        }
    }

    /// ℕ with successor steps.
    struct NatChain;
    impl Sts for NatChain {
        type State = u64;
        fn init(&self) -> u64 {
            0
        }
        fn successors(&self, s: &u64) -> Vec<u64> {
            vec![s + 1]
        }
    }

    /// Model steps exactly on stores to the counter cell.
    struct CountCoupling;
    impl Coupling<u64> for CountCoupling {
        fn candidates(&mut self, view: &StepView<'_, u64>) -> Vec<u64> {
            match &view.record.effect {
                Some(EffectKind::Store { .. }) => vec![view.model.last() + 1],
                _ => vec![*view.model.last()],
            }
        }
    }

    /// Last model state equals the counter cell (when allocated).
    struct CountRel;
    impl TraceRel<u64> for CountRel {
        fn on_init(&mut self, _m: &Machine, _e: &ExecTrace, s: &u64) -> Result<(), String> {
            if *s == 0 {
                Ok(())
            } else {
                Err("initial model state must be 0".into())
            }
        }
        fn try_step(
            &self,
            _m: &Machine,
            e: &ExecTrace,
            _t: &ModelTrace<u64>,
            c: &u64,
        ) -> Result<(), String> {
            let heap = &e.last_snap().heaps[0];
            match heap.get(&Loc(0)) {
                None => Ok(()),
                Some(Value::Nat(n)) => {
                    if n == c {
                        Ok(())
                    } else {
                        Err(format!("model {c} != heap {n}"))
                    }
                }
                Some(other) => Err(format!("unexpected cell {other:?}")),
            }
        }
        fn commit(&mut self, _m: &Machine, _e: &ExecTrace, _t: &ModelTrace<u64>, _c: &u64) {}
    }

    fn count_machine(n: u64) -> Machine {
        let mut b = MachineBuilder::new(0);
        let node = b.add_node("n");
        b.spawn(node, CountUp::boxed(n));
        b.build()
    }

    fn fair() -> Scheduler {
        Scheduler::new(Policy::Fair(FairParams::default()), 0)
    }

    #[test]
    fn counter_run_tracks_heap_in_model() {
        let mut m = count_machine(12);
        let run = run_coupled(
            &mut m,
            &mut fair(),
            &mut CountCoupling,
            &mut CountRel,
            0u64,
            200,
        );
        assert!(run.ok(), "{:?}", run.violation);
        check_lockstep(&run).unwrap();
        assert_eq!(*run.model.last(), 12);
        assert_eq!(
            m.config.heaps[0].get(&Loc(0)),
            Some(&Value::Nat(12))
        );
        check_events_signature(&m, &run.exec, &run.events).unwrap();
        assert!(run.max_candidates <= 1);
        let mut fresh = CountRel;
        check_rel_all_prefixes(&mut fresh, &m, &run.exec, &run.model).unwrap();
    }

    #[test]
    fn valid_evolution_default_examples() {
        let t = FiniteTrace::from_vec(vec![0u64, 1, 2, 3]).unwrap();
        assert!(valid_evolution_default(&t, &3, &NatChain));
        assert!(valid_evolution_default(&t, &4, &NatChain));
        assert!(!valid_evolution_default(&t, &5, &NatChain));
    }

    #[test]
    fn empty_thread_pool_succeeds_with_singletons() {
        let mut b = MachineBuilder::new(0);
        b.add_node("n");
        let mut m = b.build();
        let run = run_coupled(&mut m, &mut fair(), &mut StutterCoupling, &mut TrueRel, 7u64, 100);
        assert!(run.ok());
        assert_eq!(run.exec.len(), 1);
        assert_eq!(run.model.len(), 1);
    }

    #[test]
    fn stutter_coupling_is_plain_simulation() {
        let mut m = count_machine(5);
        let run =
            run_coupled(&mut m, &mut fair(), &mut StutterCoupling, &mut TrueRel, 99u64, 200);
        assert!(run.ok());
        check_lockstep(&run).unwrap();
        assert!(run.model.iter().all(|s| *s == 99));
        assert!(m.all_halted());
    }

    /// Coupling that refuses to move the model past a threshold.
    struct CappedCoupling(u64);
    impl Coupling<u64> for CappedCoupling {
        fn candidates(&mut self, view: &StepView<'_, u64>) -> Vec<u64> {
            match &view.record.effect {
                Some(EffectKind::Store { .. }) => {
                    let next = view.model.last() + 1;
                    if next > self.0 {
                        vec![]
                    } else {
                        vec![next]
                    }
                }
                _ => vec![*view.model.last()],
            }
        }
    }

    #[test]
    fn empty_candidates_report_no_candidate_at_first_failure() {
        let mut m = count_machine(8);
        let run = run_coupled(
            &mut m,
            &mut fair(),
            &mut CappedCoupling(3),
            &mut CountRel,
            0u64,
            200,
        );
        let v = run.violation.expect("must fail");
        assert_eq!(v.kind, ViolationKind::NoCandidate);
        // Everything accepted before the failure still satisfies the relation.
        let mut fresh = CountRel;
        check_rel_all_prefixes(&mut fresh, &m, &run.exec, &run.model).unwrap();
        assert_eq!(*run.model.last(), 3);
        assert_eq!(v.index, run.exec.len());
        assert!(!v.exec_tail.is_empty());
    }

    #[test]
    fn failing_initial_relation_is_index_zero() {
        let mut m = count_machine(1);
        let run = run_coupled(
            &mut m,
            &mut fair(),
            &mut CountCoupling,
            &mut CountRel,
            5u64,
            50,
        );
        let v = run.violation.expect("must fail");
        assert_eq!(v.kind, ViolationKind::RelationFailed);
        assert_eq!(v.index, 0);
    }

    #[test]
    fn stuck_thread_is_reported() {
        let mut b = MachineBuilder::new(0);
        let n = b.add_node("n");
        b.spawn(
            n,
            crate::netsem::testutil::Script::of(vec![Effect::Load { loc: Loc(9) }]),
        );
        let mut m = b.build();
        let run =
            run_coupled(&mut m, &mut fair(), &mut StutterCoupling, &mut TrueRel, 0u64, 50);
        let v = run.violation.expect("must fail");
        assert_eq!(v.kind, ViolationKind::StuckThread);
        assert_eq!(v.index, 1);
    }

    #[test]
    fn failed_check_is_reported_as_assertion() {
        let mut b = MachineBuilder::new(0);
        let n = b.add_node("n");
        b.spawn(
            n,
            crate::netsem::testutil::Script::of(vec![
                Effect::Pure { tag: None },
                Effect::Check { ok: false, reason: "invariant broke".into() },
            ]),
        );
        let mut m = b.build();
        let run =
            run_coupled(&mut m, &mut fair(), &mut StutterCoupling, &mut TrueRel, 0u64, 50);
        let v = run.violation.expect("must fail");
        assert_eq!(v.kind, ViolationKind::AssertionFailed);
        assert_eq!(v.index, 2);
        assert!(v.diagnostic.contains("invariant broke"));
    }

    #[test]
    fn violations_serialize_to_json_shape() {
        let v = RefinementViolation {
            index: 3,
            kind: ViolationKind::NoCandidate,
            diagnostic: "d".into(),
            exec_tail: vec!["e".into()],
            model_tail: vec!["m".into()],
        };
        let j: serde_json::Value = serde_json::to_value(&v).unwrap();
        assert_eq!(j["index"], 3);
        assert_eq!(j["kind"], "NoCandidate");
        assert!(j["exec_tail"].is_array() && j["model_tail"].is_array());
    }

    #[test]
    fn prefix_check_flags_first_bad_index() {
        let mut m = count_machine(4);
        let run = run_coupled(
            &mut m,
            &mut fair(),
            &mut CountCoupling,
            &mut CountRel,
            0u64,
            200,
        );
        assert!(run.ok());
        // Corrupt one model entry; the prefix check must catch exactly it.
        let mut tampered: Vec<u64> = run.model.iter().copied().collect();
        let idx = tampered.len() - 2;
        tampered[idx] = 77;
        let tampered = FiniteTrace::from_vec(tampered).unwrap();
        let mut fresh = CountRel;
        let err = check_rel_all_prefixes(&mut fresh, &m, &run.exec, &tampered).unwrap_err();
        assert_eq!(err.0, idx);
    }

    #[test]
    fn prefix_check_rejects_length_mismatch() {
        let m = count_machine(1);
        let exec = ExecTrace::new(Snapshot::of(&m.config));
        let model = FiniteTrace::from_vec(vec![0u64, 1]).unwrap();
        let mut fresh = CountRel;
        assert!(check_rel_all_prefixes(&mut fresh, &m, &exec, &model).is_err());
    }

    #[test]
    fn events_signature_checks_catch_tampering() {
        let mut m = count_machine(3);
        let run = run_coupled(
            &mut m,
            &mut fair(),
            &mut CountCoupling,
            &mut CountRel,
            0u64,
            200,
        );
        assert!(run.ok());
        check_events_signature(&m, &run.exec, &run.events).unwrap();
        let mut bad = run.events.clone();
        bad.push((
            0,
            Event::Alloc { label: "ghost".into(), loc: Loc(7), node: crate::netsem::NodeId(0) },
        ));
        assert!(check_events_signature(&m, &run.exec, &bad).is_err());
    }

    #[test]
    fn horizon_caps_the_run() {
        let mut m = count_machine(1_000_000);
        let run = run_coupled(
            &mut m,
            &mut fair(),
            &mut CountCoupling,
            &mut CountRel,
            0u64,
            64,
        );
        assert!(run.ok());
        assert_eq!(run.exec.len(), 65);
        assert!(!m.all_halted());
    }
}
