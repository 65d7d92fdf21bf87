//! Declarative scenario configs and the batch runner behind the CLI.
//!
//! A config names one protocol scenario plus its knobs, seeds and checks.
//! Validation happens up front: unknown keys, out-of-range numbers and knobs
//! that belong to a different scenario are all rejected before anything runs.
//! Each seed then drives one coupled run; per-seed check outcomes are merged
//! into a single report where a failure on any seed fails the check.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::netsem::sched::{FairParams, Policy, Scheduler};
use crate::netsem::{ExecTrace, Machine, MachineBuilder, Value};
use crate::protocols::{gcounter, incr, paxos, tpc, yesno};
use crate::refinement::{
    check_events_signature, check_lockstep, check_rel_all_prefixes, run_coupled, CoupledRun,
    RefinementViolation, TraceRel,
};
use crate::report::{CheckResult, CheckStatus, Report, SeedSummary};
use crate::Parallelism;

/// The protocol scenarios the runner knows how to assemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Incr,
    Tpc,
    Paxos,
    Gcounter,
    Yesno,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Incr => "incr",
            ScenarioKind::Tpc => "tpc",
            ScenarioKind::Paxos => "paxos",
            ScenarioKind::Gcounter => "gcounter",
            ScenarioKind::Yesno => "yesno",
        }
    }

    /// Checks this scenario supports; also the default selection.
    pub fn known_checks(self) -> &'static [&'static str] {
        match self {
            ScenarioKind::Incr => &["refinement"],
            ScenarioKind::Tpc => &["refinement", "agreement", "termination"],
            ScenarioKind::Paxos => &["refinement", "consistency"],
            ScenarioKind::Gcounter => &["refinement", "convergence", "fairdel"],
            ScenarioKind::Yesno => &["refinement", "termination", "fuel"],
        }
    }
}

/// Seed selection: a count `n` expands to `0..n`, a list is used verbatim.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedsSpec {
    Count(u64),
    List(Vec<u64>),
}

impl SeedsSpec {
    pub fn expand(&self) -> Vec<u64> {
        match self {
            SeedsSpec::Count(n) => (0..*n).collect(),
            SeedsSpec::List(v) => v.clone(),
        }
    }
}

impl Default for SeedsSpec {
    fn default() -> Self {
        SeedsSpec::Count(1)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    #[default]
    Fair,
    Random,
    /// Fair except one route is never served; exists to produce honest
    /// negatives for delivery-fairness certificates.
    Starve,
}

fn default_horizon() -> usize {
    10_000
}

/// One validated scenario description. `deny_unknown_fields` makes typos fail
/// at parse time instead of silently running defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    #[serde(default)]
    pub seeds: SeedsSpec,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub drop_p: f64,
    #[serde(default)]
    pub policy: PolicyKind,
    /// Fair-policy service window for threads.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thread_window: Option<u32>,
    /// Fair-policy service window for messages.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msg_window: Option<u32>,
    /// Starved route endpoints (node ips); required iff `policy` is starve.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub starve_src: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub starve_dst: Option<String>,

    /// Resource manager count (tpc).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rms: Option<usize>,
    /// Per-manager coin overrides (tpc): `false` forces prepare, `true`
    /// forces abort, `null` leaves the coin random.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coins: Option<Vec<Option<bool>>>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptors: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learners: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub with_client: Option<bool>,
    /// Proposable value alphabet (paxos).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<String>>,

    /// Replica count (gcounter).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicas: Option<usize>,
    /// Per-replica increment counts (gcounter).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub incrs: Option<Vec<usize>>,
    /// Window for the bounded delivery-fairness certificate (gcounter).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fairdel_window: Option<usize>,

    /// Per-side iteration count (yesno).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<u64>,
    /// Initial fuel grant (yesno). The fueled model starts every role at the
    /// cap and refuels to it, so this must equal `fuel_limit` when both are
    /// given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_init: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fuel_limit: Option<u64>,

    /// Checks to run; defaults to everything the scenario supports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checks: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_out: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_out: Option<String>,
    /// Full-state snapshot cadence in trace output; 0 disables snapshots.
    #[serde(default)]
    pub snapshot_every: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ScenarioConfig {
    /// Parses and validates in one step; a config that round-trips through
    /// here is safe to run.
    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if !(0.0..=1.0).contains(&self.drop_p) {
            return bad(format!("drop_p must lie in [0, 1], got {}", self.drop_p));
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.seeds.expand().is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.thread_window == Some(0) || self.msg_window == Some(0) {
            return bad("scheduler windows must be at least 1".into());
        }
        let starving = self.policy == PolicyKind::Starve;
        if starving && (self.starve_src.is_none() || self.starve_dst.is_none()) {
            return bad("policy \"starve\" needs starve_src and starve_dst".into());
        }
        if !starving && (self.starve_src.is_some() || self.starve_dst.is_some()) {
            return bad("starve_src/starve_dst need policy \"starve\"".into());
        }

        use ScenarioKind::*;
        let misplaced: &[(bool, &str, &[ScenarioKind])] = &[
            (self.rms.is_some(), "rms", &[Tpc]),
            (self.coins.is_some(), "coins", &[Tpc]),
            (self.proposers.is_some(), "proposers", &[Paxos]),
            (self.acceptors.is_some(), "acceptors", &[Paxos]),
            (self.learners.is_some(), "learners", &[Paxos]),
            (self.with_client.is_some(), "with_client", &[Paxos]),
            (self.values.is_some(), "values", &[Paxos]),
            (self.replicas.is_some(), "replicas", &[Gcounter]),
            (self.incrs.is_some(), "incrs", &[Gcounter]),
            (self.fairdel_window.is_some(), "fairdel_window", &[Gcounter]),
            (self.k.is_some(), "k", &[Yesno]),
            (self.f_init.is_some(), "f_init", &[Yesno]),
            (self.fuel_limit.is_some(), "fuel_limit", &[Yesno]),
        ];
        for (set, name, allowed) in misplaced {
            if *set && !allowed.contains(&self.scenario) {
                return bad(format!(
                    "knob {name:?} does not apply to scenario \"{}\"",
                    self.scenario.name()
                ));
            }
        }

        match self.scenario {
            Tpc => {
                if self.rms == Some(0) {
                    return bad("rms must be at least 1".into());
                }
                if let (Some(coins), Some(rms)) = (&self.coins, self.rms) {
                    if coins.len() != rms {
                        return bad(format!(
                            "coins length {} does not match rms {rms}",
                            coins.len()
                        ));
                    }
                }
                if self.coins.as_ref().is_some_and(|c| c.is_empty()) {
                    return bad("coins must be non-empty".into());
                }
            }
            Paxos => {
                if self.proposers == Some(0) || self.acceptors == Some(0) {
                    return bad("proposers and acceptors must be at least 1".into());
                }
                let learners = self.learners.unwrap_or(2);
                if self.with_client.unwrap_or(true) && learners < 2 {
                    return bad("with_client needs at least 2 learners".into());
                }
                if let Some(values) = &self.values {
                    if values.is_empty() {
                        return bad("values must be non-empty".into());
                    }
                    for v in values {
                        if v.contains(':') || v.contains(',') {
                            return bad(format!("value {v:?} clashes with the wire syntax"));
                        }
                    }
                }
            }
            Gcounter => {
                if self.replicas == Some(0) {
                    return bad("replicas must be at least 1".into());
                }
                if self.incrs.as_ref().is_some_and(|v| v.is_empty()) {
                    return bad("incrs must be non-empty".into());
                }
                if let (Some(incrs), Some(replicas)) = (&self.incrs, self.replicas) {
                    if incrs.len() != replicas {
                        return bad(format!(
                            "incrs length {} does not match replicas {replicas}",
                            incrs.len()
                        ));
                    }
                }
                if self.fairdel_window == Some(0) {
                    return bad("fairdel_window must be at least 1".into());
                }
            }
            Yesno => {
                if self.k == Some(0) {
                    return bad("k must be at least 1".into());
                }
                if let (Some(f), Some(l)) = (self.f_init, self.fuel_limit) {
                    if f != l {
                        return bad(format!(
                            "f_init {f} and fuel_limit {l} must be equal: the fueled model \
                             starts every role at the cap and refuels to it"
                        ));
                    }
                }
                if self.effective_fuel() < 3 {
                    return bad("fuel must be at least 3 to cover setup and shutdown".into());
                }
            }
            Incr => {}
        }

        if let Some(checks) = &self.checks {
            let known = self.scenario.known_checks();
            for c in checks {
                if !known.contains(&c.as_str()) {
                    return bad(format!(
                        "unknown check {c:?} for scenario \"{}\"; known: {known:?}",
                        self.scenario.name()
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn effective_checks(&self) -> Vec<String> {
        match &self.checks {
            Some(c) => c.clone(),
            None => self.scenario.known_checks().iter().map(|s| s.to_string()).collect(),
        }
    }

    fn effective_fuel(&self) -> u64 {
        self.fuel_limit.or(self.f_init).unwrap_or(yesno::YN_FUEL)
    }

    fn policy(&self) -> Policy {
        let d = FairParams::default();
        let params = FairParams {
            thread_window: self.thread_window.unwrap_or(d.thread_window),
            msg_window: self.msg_window.unwrap_or(d.msg_window),
            drop_p: self.drop_p,
            route_drop_cap: d.route_drop_cap,
        };
        match self.policy {
            PolicyKind::Fair => Policy::Fair(params),
            PolicyKind::Random => Policy::Random { drop_p: self.drop_p },
            PolicyKind::Starve => Policy::StarveRoute {
                params,
                src: self.starve_src.clone().expect("validated"),
                dst: self.starve_dst.clone().expect("validated"),
            },
        }
    }
}

/// Everything a scenario batch produces. Trace bytes are only assembled when
/// the config names a trace file; writing them is the caller's job.
pub struct ScenarioOutcome {
    pub report: Report,
    pub traces: Vec<(u64, Vec<u8>)>,
}

/// Runs every seed, merges per-seed check outcomes, and builds the report.
/// Seed order in the report matches the config regardless of parallelism.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    par: Parallelism,
) -> Result<ScenarioOutcome, ConfigError> {
    cfg.validate()?;
    let seeds = cfg.seeds.expand();
    let checks = cfg.effective_checks();
    let runs = run_seeds(&seeds, par, |seed| run_seed(cfg, seed, &checks));
    let merged = merge_checks(&checks, &runs);
    let mut summaries = Vec::with_capacity(runs.len());
    let mut traces = Vec::new();
    for r in runs {
        if let Some(bytes) = r.trace {
            traces.push((r.summary.seed, bytes));
        }
        summaries.push(r.summary);
    }
    Ok(ScenarioOutcome { report: Report::new(cfg.scenario.name(), summaries, merged), traces })
}

struct SeedRun {
    summary: SeedSummary,
    statuses: Vec<(String, CheckStatus)>,
    trace: Option<Vec<u8>>,
}

#[cfg(feature = "parallel")]
fn run_seeds<F>(seeds: &[u64], par: Parallelism, f: F) -> Vec<SeedRun>
where
    F: Fn(u64) -> SeedRun + Sync,
{
    if par.effective_parallel() && seeds.len() > 1 {
        seeds.par_iter().map(|&s| f(s)).collect()
    } else {
        seeds.iter().map(|&s| f(s)).collect()
    }
}

#[cfg(not(feature = "parallel"))]
fn run_seeds<F>(seeds: &[u64], _par: Parallelism, f: F) -> Vec<SeedRun>
where
    F: Fn(u64) -> SeedRun + Sync,
{
    seeds.iter().map(|&s| f(s)).collect()
}

/// Per check: the first failing seed wins the witness, inconclusive seeds
/// surface only when no seed fails.
fn merge_checks(names: &[String], runs: &[SeedRun]) -> Vec<CheckResult> {
    names
        .iter()
        .map(|name| {
            let mut fail: Option<String> = None;
            let mut extra_fails = 0usize;
            let mut inconclusive: Option<String> = None;
            for r in runs {
                for (n, st) in &r.statuses {
                    if n != name {
                        continue;
                    }
                    match st {
                        CheckStatus::Fail { witness } => {
                            if fail.is_none() {
                                fail = Some(format!("seed {}: {witness}", r.summary.seed));
                            } else {
                                extra_fails += 1;
                            }
                        }
                        CheckStatus::Inconclusive { reason } => {
                            if inconclusive.is_none() {
                                inconclusive =
                                    Some(format!("seed {}: {reason}", r.summary.seed));
                            }
                        }
                        CheckStatus::Pass => {}
                    }
                }
            }
            match (fail, inconclusive) {
                (Some(mut witness), _) => {
                    if extra_fails > 0 {
                        witness.push_str(&format!(" ({extra_fails} more seeds fail)"));
                    }
                    CheckResult::fail(name.clone(), witness)
                }
                (None, Some(reason)) => CheckResult::inconclusive(name.clone(), reason),
                (None, None) => CheckResult::pass(name.clone()),
            }
        })
        .collect()
}

fn run_seed(cfg: &ScenarioConfig, seed: u64, checks: &[String]) -> SeedRun {
    match cfg.scenario {
        ScenarioKind::Incr => incr_seed(cfg, seed, checks),
        ScenarioKind::Tpc => tpc_seed(cfg, seed, checks),
        ScenarioKind::Paxos => paxos_seed(cfg, seed, checks),
        ScenarioKind::Gcounter => gcounter_seed(cfg, seed, checks),
        ScenarioKind::Yesno => yesno_seed(cfg, seed, checks),
    }
}

fn want(checks: &[String], name: &str) -> bool {
    checks.iter().any(|c| c == name)
}

fn violation_string(v: &RefinementViolation) -> String {
    format!("step {}: {:?}: {}", v.index, v.kind, v.diagnostic)
}

/// In-run verdict plus a full replay of the relation over every prefix with a
/// fresh relation, plus the event-ledger cross-check.
fn refinement_status<MS: Clone, R: TraceRel<MS>>(
    machine: &Machine,
    run: &CoupledRun<MS>,
    rel: &mut R,
) -> CheckStatus {
    if let Some(v) = &run.violation {
        return CheckStatus::Fail { witness: violation_string(v) };
    }
    if let Err(e) = check_lockstep(run) {
        return CheckStatus::Fail { witness: e };
    }
    if let Err((i, e)) = check_rel_all_prefixes(rel, machine, &run.exec, &run.model) {
        return CheckStatus::Fail { witness: format!("prefix {i}: {e}") };
    }
    if let Err(e) = check_events_signature(machine, &run.exec, &run.events) {
        return CheckStatus::Fail { witness: e };
    }
    CheckStatus::Pass
}

fn summary_of<MS>(
    seed: u64,
    machine: &Machine,
    run: &CoupledRun<MS>,
    metrics: BTreeMap<String, serde_json::Value>,
) -> SeedSummary {
    SeedSummary {
        seed,
        steps: run.exec.len() - 1,
        halted: machine.all_halted(),
        violation: run.violation.as_ref().map(violation_string),
        metrics,
    }
}

fn trace_of(cfg: &ScenarioConfig, seed: u64, exec: &ExecTrace) -> Option<Vec<u8>> {
    cfg.trace_out.as_ref()?;
    let mut buf = Vec::new();
    crate::report::write_trace(&mut buf, seed, exec, cfg.snapshot_every)
        .expect("writing to memory");
    Some(buf)
}

fn incr_seed(cfg: &ScenarioConfig, seed: u64, checks: &[String]) -> SeedRun {
    let mut b = MachineBuilder::new(seed);
    let node = b.add_node("127.0.0.1");
    b.spawn(node, incr::IncrMain::boxed("ctr"));
    let mut machine = b.build();
    let mut sched = Scheduler::new(cfg.policy(), seed);
    let run = run_coupled(
        &mut machine,
        &mut sched,
        &mut incr::IncrCoupling,
        &mut incr::IncrRel::new("ctr"),
        0u64,
        cfg.horizon,
    );
    let mut statuses = Vec::new();
    if want(checks, "refinement") {
        let st = refinement_status(&machine, &run, &mut incr::IncrRel::new("ctr"));
        statuses.push(("refinement".to_string(), st));
    }
    let mut metrics = BTreeMap::new();
    metrics.insert("counter".to_string(), json!(*run.model.last()));
    SeedRun {
        trace: trace_of(cfg, seed, &run.exec),
        summary: summary_of(seed, &machine, &run, metrics),
        statuses,
    }
}

fn tpc_seed(cfg: &ScenarioConfig, seed: u64, checks: &[String]) -> SeedRun {
    let n = cfg.rms.unwrap_or_else(|| cfg.coins.as_ref().map_or(3, |c| c.len()));
    let coins = cfg.coins.clone().unwrap_or_else(|| vec![None; n]);
    let (mut machine, net) = tpc::build_tpc(seed, n, &coins);
    let mut sched = Scheduler::new(cfg.policy(), seed);
    let mut coupling = tpc::TpcCoupling::new(&net);
    let mut rel = tpc::TpcRel::new(&net);
    let run = run_coupled(
        &mut machine,
        &mut sched,
        &mut coupling,
        &mut rel,
        tpc::TcState::initial(n),
        cfg.horizon,
    );
    let mut statuses = Vec::new();
    if want(checks, "refinement") {
        let st = refinement_status(&machine, &run, &mut tpc::TpcRel::new(&net));
        statuses.push(("refinement".to_string(), st));
    }
    if want(checks, "agreement") {
        let st = match tpc::check_tpc_agreement(&machine, &run.exec, &run.model, &net) {
            Ok(()) => CheckStatus::Pass,
            Err(e) => CheckStatus::Fail { witness: e },
        };
        statuses.push(("agreement".to_string(), st));
    }
    if want(checks, "termination") {
        let st = if machine.all_halted() {
            CheckStatus::Pass
        } else {
            CheckStatus::Inconclusive {
                reason: format!("horizon {} reached with threads still live", cfg.horizon),
            }
        };
        statuses.push(("termination".to_string(), st));
    }
    let mut metrics = BTreeMap::new();
    if let Some(Value::Str(outcome)) = machine.config.halted_value(net.tm_tid) {
        metrics.insert("tm_outcome".to_string(), json!(outcome));
    }
    SeedRun {
        trace: trace_of(cfg, seed, &run.exec),
        summary: summary_of(seed, &machine, &run, metrics),
        statuses,
    }
}

fn paxos_seed(cfg: &ScenarioConfig, seed: u64, checks: &[String]) -> SeedRun {
    let d = paxos::PaxosCfg::default();
    let pcfg = paxos::PaxosCfg {
        n_proposers: cfg.proposers.unwrap_or(d.n_proposers),
        n_acceptors: cfg.acceptors.unwrap_or(d.n_acceptors),
        n_learners: cfg.learners.unwrap_or(d.n_learners),
        with_client: cfg.with_client.unwrap_or(d.with_client),
        values: cfg.values.clone().unwrap_or_else(|| d.values.clone()),
        ..d
    };
    let (mut machine, net) = paxos::build_paxos(seed, &pcfg);
    let mut sched = Scheduler::new(cfg.policy(), seed);
    let mut coupling = paxos::SdplCoupling::new(&net);
    let mut rel = paxos::SdpRel::new(&net);
    let run = run_coupled(
        &mut machine,
        &mut sched,
        &mut coupling,
        &mut rel,
        paxos::SdplState::initial(pcfg.n_proposers, pcfg.n_acceptors),
        cfg.horizon,
    );
    let mut statuses = Vec::new();
    if want(checks, "refinement") {
        let st = refinement_status(&machine, &run, &mut paxos::SdpRel::new(&net));
        statuses.push(("refinement".to_string(), st));
    }
    let chosen = paxos::chosen_values(&run.model.last().sdp.msgs, net.quorum_size);
    let decided: Vec<Value> = net
        .learner_tids
        .iter()
        .filter_map(|t| machine.config.halted_value(*t).cloned())
        .collect();
    if want(checks, "consistency") {
        let mut problem = None;
        if chosen.len() > 1 {
            problem = Some(format!("more than one chosen value: {chosen:?}"));
        } else if decided.windows(2).any(|w| w[0] != w[1]) {
            problem = Some(format!("halted learners disagree: {decided:?}"));
        } else if run
            .violation
            .as_ref()
            .is_some_and(|v| matches!(v.kind, crate::refinement::ViolationKind::AssertionFailed))
        {
            problem = Some(format!(
                "client assertion failed: {}",
                violation_string(run.violation.as_ref().unwrap())
            ));
        }
        let st = match problem {
            None => CheckStatus::Pass,
            Some(witness) => CheckStatus::Fail { witness },
        };
        statuses.push(("consistency".to_string(), st));
    }
    let mut metrics = BTreeMap::new();
    metrics.insert("chosen".to_string(), json!(chosen.iter().collect::<Vec<_>>()));
    metrics.insert("decided_learners".to_string(), json!(decided.len()));
    SeedRun {
        trace: trace_of(cfg, seed, &run.exec),
        summary: summary_of(seed, &machine, &run, metrics),
        statuses,
    }
}

fn gc_verdict_status(v: gcounter::Verdict) -> CheckStatus {
    match v {
        gcounter::Verdict::Pass => CheckStatus::Pass,
        gcounter::Verdict::Fail(witness) => CheckStatus::Fail { witness },
        gcounter::Verdict::Inconclusive(reason) => CheckStatus::Inconclusive { reason },
    }
}

fn gcounter_seed(cfg: &ScenarioConfig, seed: u64, checks: &[String]) -> SeedRun {
    let n = cfg.replicas.unwrap_or_else(|| cfg.incrs.as_ref().map_or(3, |v| v.len()));
    let gcfg = match &cfg.incrs {
        Some(v) => gcounter::GcCfg { incrs: v.clone() },
        None => gcounter::GcCfg::uniform(n, 5),
    };
    let (mut machine, net) = gcounter::build_gc(seed, &gcfg);
    let mut sched = Scheduler::new(cfg.policy(), seed);
    let mut coupling = gcounter::GcCoupling::new(&net);
    let mut rel = gcounter::GcRel::new(&net);
    let run = run_coupled(
        &mut machine,
        &mut sched,
        &mut coupling,
        &mut rel,
        gcounter::GcState::initial(n),
        cfg.horizon,
    );
    let mut statuses = Vec::new();
    if want(checks, "refinement") {
        let st = refinement_status(&machine, &run, &mut gcounter::GcRel::new(&net));
        statuses.push(("refinement".to_string(), st));
    }
    let k = gcounter::quiescence_step(&run.model);
    if want(checks, "convergence") {
        let st = match gcounter::model_ev_cons(&run.model, k) {
            gcounter::Verdict::Pass => {
                // Model rows converged; the heaps must agree with them.
                let rows = &run.model.last().0;
                let snap = run.exec.last_snap();
                let mismatch = snap.heaps.iter().enumerate().find_map(|(i, heap)| {
                    match heap.values().next() {
                        Some(Value::Vect(row)) if *row == rows[i] => None,
                        other => Some(format!(
                            "replica {i}: heap row {other:?} vs model row {:?}",
                            rows[i]
                        )),
                    }
                });
                match mismatch {
                    None => CheckStatus::Pass,
                    Some(witness) => CheckStatus::Fail { witness },
                }
            }
            v => gc_verdict_status(v),
        };
        statuses.push(("convergence".to_string(), st));
    }
    if want(checks, "fairdel") {
        let ev = gcounter::route_events(&machine, &run.exec, &net);
        let window = cfg.fairdel_window.unwrap_or(512);
        statuses.push(("fairdel".to_string(), gc_verdict_status(gcounter::net_fair_del(&ev, window))));
    }
    let mut metrics = BTreeMap::new();
    metrics.insert("quiescence_step".to_string(), json!(k));
    metrics.insert("diag".to_string(), json!(run.model.last().diag()));
    SeedRun {
        trace: trace_of(cfg, seed, &run.exec),
        summary: summary_of(seed, &machine, &run, metrics),
        statuses,
    }
}

fn yesno_seed(cfg: &ScenarioConfig, seed: u64, checks: &[String]) -> SeedRun {
    let k = cfg.k.unwrap_or(1);
    let fuel = cfg.effective_fuel();
    let out = yesno::run_yesno_fuel(seed, k, fuel, cfg.policy(), cfg.horizon);
    let mut statuses = Vec::new();
    if want(checks, "refinement") {
        let st = refinement_status(&out.machine, &out.run, &mut yesno::YnRel::with_fuel(k, fuel));
        statuses.push(("refinement".to_string(), st));
    }
    if want(checks, "termination") {
        let (last, _) = out.run.model.last();
        let shutdown = last.under.m == 0 && !last.under.ye && !last.under.ne;
        let st = if out.machine.all_halted() && shutdown {
            CheckStatus::Pass
        } else if !out.machine.all_halted() {
            CheckStatus::Inconclusive {
                reason: format!("horizon {} reached with threads still live", cfg.horizon),
            }
        } else {
            CheckStatus::Fail {
                witness: format!("halted away from the shutdown state: {:?}", last.under),
            }
        };
        statuses.push(("termination".to_string(), st));
    }
    let mut metrics = BTreeMap::new();
    metrics.insert("min_residual_fuel".to_string(), json!(yesno::min_residual_fuel(&out.run.model)));
    if want(checks, "fuel") {
        let lm = yesno::yn_live_model_fuel(k, fuel);
        let st = match crate::model::destutter(&lm, &out.run.model) {
            Ok(d) => {
                metrics.insert("model_steps".to_string(), json!(d.labels.len()));
                if crate::model::destuttered_is_valid(&lm.f, &d) {
                    CheckStatus::Pass
                } else {
                    CheckStatus::Fail { witness: "destuttered trace leaves the model".into() }
                }
            }
            Err(e) => CheckStatus::Fail { witness: e.to_string() },
        };
        statuses.push(("fuel".to_string(), st));
    }
    SeedRun {
        trace: trace_of(cfg, seed, &out.run.exec),
        summary: summary_of(seed, &out.machine, &out.run, metrics),
        statuses,
    }
}
