//! Run reports and machine-readable trace output.
//!
//! A report collects per-seed run summaries and named check outcomes into a
//! single verdict; a failing check fails the report even when other checks
//! are inconclusive. Traces are emitted as one JSON object per line, fully
//! determined by the run, so two replays of the same seed can be compared
//! byte for byte.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::netsem::{EffectKind, Event, ExecTrace, Loc, Snapshot, StepLabel, Value};

/// Report format version; bumped on any field change.
pub const REPORT_SCHEMA: u32 = 1;

/// Outcome of one named check over a batch of runs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail { witness: String },
    /// The runs neither established nor refuted the property (for example a
    /// termination check cut off by the horizon).
    Inconclusive { reason: String },
}

/// A named check with its outcome.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    #[serde(flatten)]
    pub status: CheckStatus,
}

impl CheckResult {
    pub fn pass(name: impl Into<String>) -> Self {
        CheckResult { name: name.into(), status: CheckStatus::Pass }
    }

    pub fn fail(name: impl Into<String>, witness: impl Into<String>) -> Self {
        CheckResult { name: name.into(), status: CheckStatus::Fail { witness: witness.into() } }
    }

    pub fn inconclusive(name: impl Into<String>, reason: impl Into<String>) -> Self {
        CheckResult {
            name: name.into(),
            status: CheckStatus::Inconclusive { reason: reason.into() },
        }
    }

    pub fn passed(&self) -> bool {
        self.status == CheckStatus::Pass
    }
}

/// Aggregate verdict over all checks in a report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

/// Any failing check fails the aggregate; an inconclusive check downgrades a
/// pass but never masks a fail. No checks at all count as a pass.
pub fn aggregate(checks: &[CheckResult]) -> Verdict {
    let mut verdict = Verdict::Pass;
    for check in checks {
        match &check.status {
            CheckStatus::Fail { .. } => return Verdict::Fail,
            CheckStatus::Inconclusive { .. } => verdict = Verdict::Inconclusive,
            CheckStatus::Pass => {}
        }
    }
    verdict
}

/// Summary of a single seeded run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    /// Applied steps (trace length minus the initial state).
    pub steps: usize,
    pub halted: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub violation: Option<String>,
    /// Scenario-specific observables, e.g. the minimum residual fuel.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub metrics: BTreeMap<String, serde_json::Value>,
}

/// Full result of a scenario batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: u32,
    pub scenario: String,
    pub seeds: Vec<SeedSummary>,
    pub checks: Vec<CheckResult>,
    pub verdict: Verdict,
}

impl Report {
    pub fn new(
        scenario: impl Into<String>,
        seeds: Vec<SeedSummary>,
        checks: Vec<CheckResult>,
    ) -> Self {
        let verdict = aggregate(&checks);
        Report { schema: REPORT_SCHEMA, scenario: scenario.into(), seeds, checks, verdict }
    }

    /// Process exit code: 1 on a failed verdict, 0 otherwise. Inconclusive is
    /// not a failure; callers that require conclusiveness must say so via an
    /// explicit check.
    pub fn exit_code(&self) -> i32 {
        if self.verdict == Verdict::Fail {
            1
        } else {
            0
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv(h: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *h = (*h ^ u64::from(b)).wrapping_mul(FNV_PRIME);
    }
}

fn digest_value(h: &mut u64, value: &Value) {
    // Variant tags and length prefixes keep distinct heaps from colliding by
    // concatenation.
    match value {
        Value::Unit => fnv(h, &[0]),
        Value::Bool(b) => fnv(h, &[1, *b as u8]),
        Value::Nat(n) => {
            fnv(h, &[2]);
            fnv(h, &n.to_le_bytes());
        }
        Value::Str(s) => {
            fnv(h, &[3]);
            fnv(h, &(s.len() as u64).to_le_bytes());
            fnv(h, s.as_bytes());
        }
        Value::Vect(v) => {
            fnv(h, &[4]);
            fnv(h, &(v.len() as u64).to_le_bytes());
            for n in v {
                fnv(h, &n.to_le_bytes());
            }
        }
        Value::OptNat(o) => {
            fnv(h, &[5]);
            match o {
                None => fnv(h, &[0]),
                Some(n) => {
                    fnv(h, &[1]);
                    fnv(h, &n.to_le_bytes());
                }
            }
        }
        Value::OptVote(o) => {
            fnv(h, &[6]);
            match o {
                None => fnv(h, &[0]),
                Some((round, v)) => {
                    fnv(h, &[1]);
                    fnv(h, &round.to_le_bytes());
                    fnv(h, &(v.len() as u64).to_le_bytes());
                    fnv(h, v.as_bytes());
                }
            }
        }
    }
}

/// 64-bit FNV-1a over a canonical rendering of one node heap. Trace step
/// lines carry these digests instead of full heaps so per-step comparison
/// stays cheap on long runs.
pub fn heap_digest(heap: &BTreeMap<Loc, Value>) -> u64 {
    let mut h = FNV_OFFSET;
    for (loc, value) in heap {
        fnv(&mut h, &loc.0.to_le_bytes());
        digest_value(&mut h, value);
    }
    h
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum TraceLine<'a> {
    Step {
        seed: u64,
        index: usize,
        label: StepLabel,
        effect: &'a Option<EffectKind>,
        events: &'a [Event],
        soup: usize,
        /// One digest per node heap, in node order.
        heaps: Vec<u64>,
    },
    Snapshot { seed: u64, index: usize, state: &'a Snapshot },
}

/// Writes an execution as append-only JSON lines: one `step` line per applied
/// step, plus full `snapshot` lines at index 0, every `snapshot_every` steps,
/// and at the final index. `snapshot_every == 0` disables snapshots entirely.
/// Output depends only on `seed` and the trace contents.
pub fn write_trace<W: Write>(
    w: &mut W,
    seed: u64,
    exec: &ExecTrace,
    snapshot_every: usize,
) -> io::Result<()> {
    let emit = |w: &mut W, line: &TraceLine| -> io::Result<()> {
        serde_json::to_writer(&mut *w, line).map_err(io::Error::other)?;
        w.write_all(b"\n")
    };
    if snapshot_every > 0 {
        emit(w, &TraceLine::Snapshot { seed, index: 0, state: &exec.snaps[0] })?;
    }
    let last = exec.len() - 1;
    for i in 1..exec.len() {
        let record = &exec.steps[i - 1];
        let snap = &exec.snaps[i];
        emit(
            w,
            &TraceLine::Step {
                seed,
                index: i,
                label: record.label,
                effect: &record.effect,
                events: &record.events,
                soup: snap.soup_len,
                heaps: snap.heaps.iter().map(heap_digest).collect(),
            },
        )?;
        if snapshot_every > 0 && (i % snapshot_every == 0 || i == last) {
            emit(w, &TraceLine::Snapshot { seed, index: i, state: snap })?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsem::sched::{FairParams, Policy};
    use crate::protocols::yesno::run_yesno;

    #[test]
    fn a_failing_check_outweighs_inconclusive_ones() {
        let checks = vec![
            CheckResult::pass("refinement"),
            CheckResult::inconclusive("termination", "horizon reached"),
            CheckResult::fail("agreement", "seed 3: outcomes diverge"),
        ];
        assert_eq!(aggregate(&checks), Verdict::Fail);
        let report = Report::new("tpc", Vec::new(), checks);
        assert_eq!(report.verdict, Verdict::Fail);
        assert_eq!(report.exit_code(), 1);
    }

    #[test]
    fn inconclusive_surfaces_only_when_nothing_fails() {
        let checks = vec![
            CheckResult::pass("refinement"),
            CheckResult::inconclusive("termination", "horizon reached"),
        ];
        assert_eq!(aggregate(&checks), Verdict::Inconclusive);
        assert_eq!(Report::new("tpc", Vec::new(), checks).exit_code(), 0);
        assert_eq!(aggregate(&[]), Verdict::Pass);
        assert_eq!(
            aggregate(&[CheckResult::pass("a"), CheckResult::pass("b")]),
            Verdict::Pass
        );
    }

    #[test]
    fn report_json_is_versioned_and_flattens_check_outcomes() {
        let seeds = vec![
            SeedSummary { seed: 0, steps: 12, halted: true, violation: None, metrics: BTreeMap::new() },
            SeedSummary {
                seed: 1,
                steps: 7,
                halted: false,
                violation: Some("step 6: no candidate".into()),
                metrics: BTreeMap::from([("min_residual_fuel".to_string(), serde_json::json!(28))]),
            },
        ];
        let report = Report::new(
            "yesno",
            seeds,
            vec![CheckResult::pass("refinement"), CheckResult::fail("fuel", "seed 1: underflow")],
        );
        let v: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(v["schema"], serde_json::json!(1));
        assert_eq!(v["scenario"], serde_json::json!("yesno"));
        assert_eq!(v["verdict"], serde_json::json!("fail"));
        assert_eq!(v["checks"][0], serde_json::json!({"name": "refinement", "status": "pass"}));
        assert_eq!(v["checks"][1]["status"], serde_json::json!("fail"));
        assert_eq!(v["checks"][1]["witness"], serde_json::json!("seed 1: underflow"));
        assert!(v["seeds"][0].get("violation").is_none());
        assert!(v["seeds"][0].get("metrics").is_none());
        assert_eq!(v["seeds"][1]["metrics"]["min_residual_fuel"], serde_json::json!(28));
        let back: Report = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn heap_digests_separate_values_that_print_alike() {
        let h = |pairs: &[(u32, Value)]| {
            let m: BTreeMap<Loc, Value> =
                pairs.iter().map(|(l, v)| (Loc(*l), v.clone())).collect();
            heap_digest(&m)
        };
        assert_eq!(h(&[]), h(&[]));
        assert_eq!(
            h(&[(0, Value::Nat(5)), (1, Value::Unit)]),
            h(&[(1, Value::Unit), (0, Value::Nat(5))])
        );
        assert_ne!(h(&[(0, Value::Nat(5))]), h(&[(1, Value::Nat(5))]));
        assert_ne!(h(&[(0, Value::Nat(5))]), h(&[(0, Value::Str("5".into()))]));
        assert_ne!(h(&[(0, Value::Vect(vec![]))]), h(&[(0, Value::Unit)]));
        assert_ne!(h(&[(0, Value::OptNat(None))]), h(&[(0, Value::OptVote(None))]));
        assert_ne!(h(&[(0, Value::Bool(false))]), h(&[(0, Value::Bool(true))]));
        assert_ne!(
            h(&[(0, Value::Str("ab".into())), (1, Value::Str("c".into()))]),
            h(&[(0, Value::Str("a".into())), (1, Value::Str("bc".into()))])
        );
    }

    #[test]
    fn trace_lines_mirror_the_execution() {
        let out = run_yesno(3, 1, Policy::Fair(FairParams::default()), 400);
        assert!(out.run.ok());
        let exec = &out.run.exec;
        let mut buf = Vec::new();
        write_trace(&mut buf, 3, exec, 4).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<serde_json::Value> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();

        let steps = exec.len() - 1;
        let step_lines: Vec<&serde_json::Value> =
            lines.iter().filter(|l| l["kind"] == "step").collect();
        let snap_indices: Vec<usize> = lines
            .iter()
            .filter(|l| l["kind"] == "snapshot")
            .map(|l| l["index"].as_u64().unwrap() as usize)
            .collect();
        assert_eq!(step_lines.len(), steps);
        assert_eq!(lines.len(), steps + snap_indices.len());

        let mut want: Vec<usize> = vec![0];
        want.extend((1..=steps).filter(|i| i % 4 == 0 && *i != steps));
        want.push(steps);
        assert_eq!(snap_indices, want);

        for (i, line) in step_lines.iter().enumerate() {
            let idx = i + 1;
            assert_eq!(line["index"].as_u64().unwrap() as usize, idx);
            assert_eq!(line["seed"].as_u64().unwrap(), 3);
            assert_eq!(line["soup"].as_u64().unwrap() as usize, exec.snaps[idx].soup_len);
            let want: Vec<u64> = exec.snaps[idx].heaps.iter().map(heap_digest).collect();
            let got: Vec<u64> = line["heaps"]
                .as_array()
                .unwrap()
                .iter()
                .map(|d| d.as_u64().unwrap())
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn snapshots_can_be_disabled() {
        let out = run_yesno(5, 1, Policy::Fair(FairParams::default()), 400);
        let mut buf = Vec::new();
        write_trace(&mut buf, 5, &out.run.exec, 0).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), out.run.exec.len() - 1);
        assert!(text.lines().all(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["kind"] == "step"
        }));
    }

    #[test]
    fn identical_runs_emit_identical_bytes() {
        let mk = || {
            let out = run_yesno(7, 2, Policy::Fair(FairParams::default()), 800);
            assert!(out.run.ok());
            let mut buf = Vec::new();
            write_trace(&mut buf, 7, &out.run.exec, 5).unwrap();
            buf
        };
        assert_eq!(mk(), mk());
    }
}
