//! Command-line front end: seeded scenario batches (`run`) and bounded
//! exhaustive model exploration (`explore`).
//!
//! Exit codes: 0 when every requested check passes (or coverage is complete),
//! 1 when a check fails, an invariant is violated, a budget is exhausted, or
//! the search cross-check disagrees, and 2 for usage, config, or I/O errors.
//! Nothing is written to disk on exit 2.

use std::fmt::Debug;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use lockstep_core::explorer::{bfs, dfs, Coverage, ExploreBudget, ExploreResult};
use lockstep_core::model::{check_locally_fair_terminating, FairTermination};
use lockstep_core::protocols::paxos::{
    chosen_values, random_sdpl_walk, sdp_valid_step, PackedState, SdplCfg, SdplCompact,
};
use lockstep_core::protocols::tpc::{tc_agreement, TcModel};
use lockstep_core::protocols::yesno::{fyn_order, fyn_states, progress_shutdown_aware, Fyn};
use lockstep_core::report::Verdict;
use lockstep_core::scenario::{run_scenario, ScenarioConfig, SeedsSpec};
use lockstep_core::Parallelism;

#[derive(Parser)]
#[command(name = "lockstep", version, about = "Deterministic simulator for message-passing \
protocols, checked in lock step against their transition-system models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario across a batch of seeds and print the merged report.
    Run(Box<RunArgs>),
    /// Exhaustively search a finite model under an invariant, within a budget.
    Explore(Box<ExploreArgs>),
}

#[derive(Args)]
struct RunArgs {
    /// JSON scenario config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario name: incr, tpc, paxos, gcounter, or yesno.
    #[arg(long)]
    scenario: Option<String>,
    /// Number of seeds to run, numbered from 0.
    #[arg(long)]
    seeds: Option<u64>,
    /// Explicit seed; repeat the flag for several.
    #[arg(long, conflicts_with = "seeds")]
    seed: Vec<u64>,
    /// Steps to schedule per seed.
    #[arg(long)]
    horizon: Option<usize>,
    /// Probability of dropping each deliverable message.
    #[arg(long)]
    drop_p: Option<f64>,
    /// Schedule policy: fair, random, or starve.
    #[arg(long)]
    policy: Option<String>,
    /// Fair policy: steps between guaranteed turns for a runnable thread.
    #[arg(long)]
    thread_window: Option<u32>,
    /// Fair policy: steps between guaranteed deliveries for a pending message.
    #[arg(long)]
    msg_window: Option<u32>,
    /// Starve policy: source address of the suppressed route.
    #[arg(long)]
    starve_src: Option<String>,
    /// Starve policy: destination address of the suppressed route.
    #[arg(long)]
    starve_dst: Option<String>,
    /// Resource managers (tpc).
    #[arg(long)]
    rms: Option<usize>,
    /// Replicas (gcounter).
    #[arg(long)]
    replicas: Option<usize>,
    /// Shutdown threshold (yesno).
    #[arg(long)]
    k: Option<u64>,
    /// Initial per-role fuel (yesno).
    #[arg(long)]
    f_init: Option<u64>,
    /// Fuel granted back on every role step (yesno).
    #[arg(long)]
    fuel_limit: Option<u64>,
    /// Comma-separated checks to run; defaults to all for the scenario.
    #[arg(long, value_delimiter = ',')]
    check: Vec<String>,
    /// Write the per-step trace of every seed to this file as JSON lines.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    report_out: Option<PathBuf>,
    /// Insert a full-state snapshot line every N steps; 0 disables snapshots.
    #[arg(long)]
    snapshot_every: Option<usize>,
    /// Run seeds on one thread instead of a worker pool.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct ExploreArgs {
    /// JSON explore config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model name: tc, sdpl, or fyn.
    #[arg(long)]
    model: Option<String>,
    /// Resource managers (tc).
    #[arg(long)]
    rms: Option<usize>,
    /// Proposers (sdpl).
    #[arg(long)]
    proposers: Option<usize>,
    /// Acceptors (sdpl).
    #[arg(long)]
    acceptors: Option<usize>,
    /// Quorum size (sdpl); defaults to a majority of the acceptors.
    #[arg(long)]
    quorum: Option<usize>,
    /// Comma-separated value alphabet (sdpl).
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    /// Per-proposer proposal budget (sdpl).
    #[arg(long)]
    ctr_max: Option<u64>,
    /// Pending-message ceiling of the enumerated state space (fyn).
    #[arg(long)]
    m_max: Option<u64>,
    /// Check local fair termination over the enumerated states (fyn).
    #[arg(long)]
    criterion: bool,
    /// Stop after this many distinct states.
    #[arg(long)]
    max_states: Option<usize>,
    /// Stop past this depth.
    #[arg(long)]
    max_depth: Option<usize>,
    /// Repeat the search depth-first and compare the two state counts.
    #[arg(long)]
    cross_check: bool,
    /// Take this many random walks instead of searching exhaustively (sdpl).
    #[arg(long)]
    walks: Option<usize>,
    /// Steps per random walk.
    #[arg(long)]
    walk_depth: Option<usize>,
    /// Expand search frontiers on one thread instead of a worker pool.
    #[arg(long)]
    sequential: bool,
}

/// File form of the explore command; flags override these fields.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ExploreConfig {
    model: Option<ModelKind>,
    rms: Option<usize>,
    proposers: Option<usize>,
    acceptors: Option<usize>,
    quorum: Option<usize>,
    values: Option<Vec<String>>,
    ctr_max: Option<u64>,
    m_max: Option<u64>,
    criterion: bool,
    max_states: Option<usize>,
    max_depth: Option<usize>,
    cross_check: bool,
    walks: Option<usize>,
    walk_depth: Option<usize>,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ModelKind {
    Tc,
    Sdpl,
    Fyn,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run(a) => run_cmd(*a),
        Cmd::Explore(a) => explore_cmd(*a),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// Parses a bare word the way the config file would spell it.
fn parse_word<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Result<T, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("invalid {what} {s:?}"))
}

fn read_config<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, String> {
    let text =
        fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("config parse error: {e}"))
}

fn run_cmd(a: RunArgs) -> Result<u8, String> {
    let mut cfg: ScenarioConfig = if let Some(path) = &a.config {
        read_config(path)?
    } else if let Some(kind) = &a.scenario {
        let kind: lockstep_core::scenario::ScenarioKind = parse_word("scenario", kind)?;
        serde_json::from_value(json!({ "scenario": kind }))
            .expect("a bare scenario name is a complete config")
    } else {
        return Err("either --config or --scenario is required".into());
    };
    if let Some(kind) = &a.scenario {
        cfg.scenario = parse_word("scenario", kind)?;
    }
    if let Some(n) = a.seeds {
        cfg.seeds = SeedsSpec::Count(n);
    }
    if !a.seed.is_empty() {
        cfg.seeds = SeedsSpec::List(a.seed.clone());
    }
    if let Some(h) = a.horizon {
        cfg.horizon = h;
    }
    if let Some(p) = a.drop_p {
        cfg.drop_p = p;
    }
    if let Some(p) = &a.policy {
        cfg.policy = parse_word("policy", p)?;
    }
    if let Some(w) = a.thread_window {
        cfg.thread_window = Some(w);
    }
    if let Some(w) = a.msg_window {
        cfg.msg_window = Some(w);
    }
    if let Some(s) = &a.starve_src {
        cfg.starve_src = Some(s.clone());
    }
    if let Some(s) = &a.starve_dst {
        cfg.starve_dst = Some(s.clone());
    }
    if let Some(n) = a.rms {
        cfg.rms = Some(n);
    }
    if let Some(n) = a.replicas {
        cfg.replicas = Some(n);
    }
    if let Some(k) = a.k {
        cfg.k = Some(k);
    }
    if let Some(f) = a.f_init {
        cfg.f_init = Some(f);
    }
    if let Some(f) = a.fuel_limit {
        cfg.fuel_limit = Some(f);
    }
    if !a.check.is_empty() {
        cfg.checks = Some(a.check.clone());
    }
    if let Some(p) = &a.trace_out {
        cfg.trace_out = Some(p.display().to_string());
    }
    if let Some(p) = &a.report_out {
        cfg.report_out = Some(p.display().to_string());
    }
    if let Some(n) = a.snapshot_every {
        cfg.snapshot_every = n;
    }

    let trace_out = cfg.trace_out.clone();
    let report_out = cfg.report_out.clone();
    let par = if a.sequential { Parallelism::Sequential } else { Parallelism::Parallel };
    let out = run_scenario(cfg, par).map_err(|e| e.to_string())?;

    if let Some(path) = &trace_out {
        let mut bytes = Vec::new();
        for (_, b) in &out.traces {
            bytes.extend_from_slice(b);
        }
        fs::write(path, &bytes).map_err(|e| format!("cannot write {path}: {e}"))?;
        eprintln!("wrote trace to {path}");
    }
    let rendered = out.report.to_json();
    match &report_out {
        Some(path) => {
            fs::write(path, &rendered).map_err(|e| format!("cannot write {path}: {e}"))?;
            eprintln!("{path}: verdict {}", verdict_word(out.report.verdict));
        }
        None => print!("{rendered}"),
    }
    Ok(if out.report.exit_code() == 0 { 0 } else { 1 })
}

fn verdict_word(v: Verdict) -> &'static str {
    match v {
        Verdict::Pass => "pass",
        Verdict::Fail => "fail",
        Verdict::Inconclusive => "inconclusive",
    }
}

fn explore_cmd(a: ExploreArgs) -> Result<u8, String> {
    let mut c: ExploreConfig =
        if let Some(path) = &a.config { read_config(path)? } else { ExploreConfig::default() };
    if let Some(m) = &a.model {
        c.model = Some(parse_word("model", m)?);
    }
    if let Some(n) = a.rms {
        c.rms = Some(n);
    }
    if let Some(n) = a.proposers {
        c.proposers = Some(n);
    }
    if let Some(n) = a.acceptors {
        c.acceptors = Some(n);
    }
    if let Some(n) = a.quorum {
        c.quorum = Some(n);
    }
    if !a.values.is_empty() {
        c.values = Some(a.values.clone());
    }
    if let Some(n) = a.ctr_max {
        c.ctr_max = Some(n);
    }
    if let Some(n) = a.m_max {
        c.m_max = Some(n);
    }
    if a.criterion {
        c.criterion = true;
    }
    if let Some(n) = a.max_states {
        c.max_states = Some(n);
    }
    if let Some(n) = a.max_depth {
        c.max_depth = Some(n);
    }
    if a.cross_check {
        c.cross_check = true;
    }
    if let Some(n) = a.walks {
        c.walks = Some(n);
    }
    if let Some(n) = a.walk_depth {
        c.walk_depth = Some(n);
    }

    let model = c.model.ok_or("a model is required (--model tc|sdpl|fyn)")?;
    let budget = ExploreBudget {
        max_states: c.max_states.unwrap_or(1_000_000),
        max_depth: c.max_depth.unwrap_or(usize::MAX),
    };
    let par = if a.sequential { Parallelism::Sequential } else { Parallelism::Parallel };
    match model {
        ModelKind::Tc => explore_tc(&c, &budget, par),
        ModelKind::Sdpl => explore_sdpl(&c, &budget, par),
        ModelKind::Fyn => explore_fyn(&c),
    }
}

fn explore_tc(c: &ExploreConfig, budget: &ExploreBudget, par: Parallelism) -> Result<u8, String> {
    let n = c.rms.unwrap_or(3);
    if n == 0 {
        return Err("tc needs at least one resource manager".into());
    }
    let m = TcModel { n };
    let res = bfs(&m, tc_agreement, budget, par);
    let cross = cross_check(c, &res, || dfs(&m, tc_agreement, budget));
    finish_search("tc", &res, cross)
}

fn explore_sdpl(c: &ExploreConfig, budget: &ExploreBudget, par: Parallelism) -> Result<u8, String> {
    let cfg = sdpl_cfg(c)?;
    if let Some(walks) = c.walks {
        return sdpl_walks(&cfg, walks, c.walk_depth.unwrap_or(20));
    }
    let compact = SdplCompact::new(cfg);
    let quorum = compact.cfg.quorum_size;
    let inv =
        |s: &PackedState| chosen_values(&compact.decode(s).sdp.msgs, quorum).len() <= 1;
    let res = bfs(&compact, &inv, budget, par);
    let cross = cross_check(c, &res, || dfs(&compact, &inv, budget));
    finish_search("sdpl", &res, cross)
}

/// Checks the packing limits up front so bad sizes fail cleanly instead of
/// tripping the encoder's internal assertions.
fn sdpl_cfg(c: &ExploreConfig) -> Result<SdplCfg, String> {
    let n_acceptors = c.acceptors.unwrap_or(3);
    let n_proposers = c.proposers.unwrap_or(2);
    let quorum_size = c.quorum.unwrap_or(n_acceptors / 2 + 1);
    let values = c.values.clone().unwrap_or_else(|| vec!["x".into(), "y".into()]);
    let ctr_max = c.ctr_max.unwrap_or(1);
    if n_proposers == 0 || n_acceptors == 0 {
        return Err("sdpl needs at least one proposer and one acceptor".into());
    }
    if quorum_size == 0 || quorum_size > n_acceptors {
        return Err(format!("quorum size {quorum_size} must be between 1 and {n_acceptors}"));
    }
    if values.is_empty() || values.iter().any(|v| v.contains(':') || v.contains(',')) {
        return Err("values must be nonempty and free of ':' and ','".into());
    }
    if n_proposers > 8 || ctr_max > 0xff {
        return Err("the packed state fits at most 8 proposers with counters up to 255".into());
    }
    let b = (ctr_max as usize + 1) * n_proposers;
    let v = values.len();
    let a = n_acceptors;
    let universe = b + b * v + a * (b + v * b * (b - 1) / 2) + a * b * v;
    if universe > 128 {
        return Err(format!("the message universe needs {universe} bits; at most 128 are available"));
    }
    Ok(SdplCfg { n_proposers, n_acceptors, quorum_size, values, ctr_max })
}

fn sdpl_walks(cfg: &SdplCfg, walks: usize, depth: usize) -> Result<u8, String> {
    let mut invalid: Vec<u64> = Vec::new();
    for seed in 0..walks as u64 {
        let walk = random_sdpl_walk(cfg, seed, depth);
        let ok = walk.windows(2).all(|w| sdp_valid_step(&w[0].sdp, &w[1].sdp, cfg.quorum_size));
        if !ok {
            invalid.push(seed);
        }
    }
    let out = json!({
        "model": "sdpl",
        "walks": walks,
        "walk_depth": depth,
        "valid": invalid.is_empty(),
        "invalid_seeds": invalid,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("report is valid json"));
    Ok(if invalid.is_empty() { 0 } else { 1 })
}

fn explore_fyn(c: &ExploreConfig) -> Result<u8, String> {
    let m_max = c.m_max.unwrap_or(10);
    let states = fyn_states(m_max);
    let mut out = json!({
        "model": "fyn",
        "m_max": m_max,
        "states": states.len(),
    });
    let mut code = 0u8;
    if c.criterion {
        let verdict = check_locally_fair_terminating(
            &Fyn::new(1),
            &fyn_order(),
            progress_shutdown_aware,
            &states,
        );
        out["criterion"] = match verdict {
            FairTermination::Pass => json!("pass"),
            FairTermination::Violation { which, state, role, target, detail } => {
                code = 1;
                json!({ "which": which, "state": state, "role": role,
                        "target": target, "detail": detail })
            }
            FairTermination::ComparatorError { a, b } => {
                code = 1;
                json!({ "comparator_error": { "a": a, "b": b } })
            }
        };
    }
    println!("{}", serde_json::to_string_pretty(&out).expect("report is valid json"));
    Ok(code)
}

/// Reruns the search depth-first and compares the outcomes. Skipped when the
/// breadth-first pass already blew the budget: the two orders then visit
/// different subsets and the counts are incomparable.
fn cross_check<S: Debug>(
    c: &ExploreConfig,
    b: &ExploreResult<S>,
    run_dfs: impl FnOnce() -> ExploreResult<S>,
) -> Option<serde_json::Value> {
    if !c.cross_check {
        return None;
    }
    if b.coverage == Coverage::Exhausted {
        return Some(json!("skipped"));
    }
    let d = run_dfs();
    let agree = d.coverage == Coverage::Complete
        && d.reachable == b.reachable
        && d.violation.is_none() == b.violation.is_none();
    if agree {
        Some(json!("pass"))
    } else {
        Some(json!({
            "bfs": { "reachable": b.reachable, "violation": b.violation.is_some() },
            "dfs": { "reachable": d.reachable, "violation": d.violation.is_some() },
        }))
    }
}

fn finish_search<S: Debug>(
    model: &str,
    res: &ExploreResult<S>,
    cross: Option<serde_json::Value>,
) -> Result<u8, String> {
    let exhausted = res.coverage == Coverage::Exhausted;
    let mismatch = matches!(&cross, Some(v) if !v.is_string());
    let out = json!({
        "model": model,
        "reachable": res.reachable,
        "depth": res.depth_reached,
        "coverage": if exhausted { "exhausted" } else { "complete" },
        "violation": res.violation.as_ref().map(|w| json!({
            "state": format!("{:?}", w.state),
            "path_len": w.path.len(),
        })),
        "cross_check": cross,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("report is valid json"));
    Ok(if exhausted || res.violation.is_some() || mismatch { 1 } else { 0 })
}
