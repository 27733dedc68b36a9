// SPDX-License-Identifier: Apache-2.0

//! Running a scenario and summarizing every explored run into a report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::costmodel::Breakdown;
use crate::events::{Event, KillCause, Witness};
use crate::scenario::{Expectations, Scenario, ScenarioError};
use crate::tasks::sched::{explore, run_seeded, RunOutcome, ScheduleMode};
use crate::tasks::Kernel;

/// Witness and violation examples kept in a report.
pub const MAX_EXAMPLES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectationResult {
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    /// The scenario exactly as run, overrides included.
    pub scenario: Scenario,
    pub interleavings: u64,
    pub truncated: u64,
    /// Runs that ended with stalled threads.
    pub deadlocks: u64,
    pub witness_count: u64,
    pub witnesses: Vec<Witness>,
    pub violation_count: u64,
    pub violations: Vec<String>,
    /// Process name, kill cause, number of runs.
    pub kills: BTreeMap<String, BTreeMap<KillCause, u64>>,
    pub diagnostics: Vec<String>,
    /// The first run with a check/use divergence, else the first run.
    pub representative: RunOutcome,
    pub cycles: Breakdown,
    pub total_cycles: f64,
    pub expectations: Vec<ExpectationResult>,
    /// SHA-256 over the rest of the report.
    pub hash: String,
}

impl SimReport {
    pub fn passed(&self) -> bool {
        self.expectations.iter().all(|e| e.passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<SimReport, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Recomputes the digest of everything but the `hash` field.
    pub fn compute_hash(&self) -> String {
        let mut copy = self.clone();
        copy.hash.clear();
        let bytes = serde_json::to_vec(&copy).expect("report serializes");
        hex(&Sha256::digest(&bytes))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let s = &self.scenario;
        let mode = match s.schedule {
            ScheduleMode::Seeded { seed } => format!("seeded (seed {seed})"),
            ScheduleMode::Exhaustive { max_steps } => format!("exhaustive (max {max_steps} steps)"),
        };
        let _ = writeln!(out, "scenario     {}", s.name);
        let _ = writeln!(out, "variant      {}", s.variant.as_str());
        let _ = writeln!(out, "schedule     {mode}");
        let _ = writeln!(out, "runs         {} ({} truncated, {} deadlocked)", self.interleavings, self.truncated, self.deadlocks);
        let _ = writeln!(out, "witnesses    {}", self.witness_count);
        for w in &self.witnesses {
            let _ = writeln!(
                out,
                "  t{} {} arg{}: checked {:?}, used {:?} (schedule {:?})",
                w.tid,
                crate::syscalls::display(w.nr),
                w.arg_index,
                w.checked,
                w.used,
                w.schedule
            );
        }
        let _ = writeln!(out, "violations   {}", self.violation_count);
        for v in &self.violations {
            let _ = writeln!(out, "  {v}");
        }
        if !self.kills.is_empty() {
            let _ = writeln!(out, "kills");
            for (proc, causes) in &self.kills {
                for (cause, n) in causes {
                    let _ = writeln!(out, "  {proc}: {} in {n} run(s)", cause.as_str());
                }
            }
        }
        for d in &self.diagnostics {
            let _ = writeln!(out, "note         {d}");
        }
        let _ = writeln!(out, "cycles       {:.1} (representative run)", self.total_cycles);
        for (name, v) in self.cycles.components() {
            if v != 0.0 {
                let _ = writeln!(out, "  {name:<20} {v:>10.1}");
            }
        }
        let _ = writeln!(out, "trace (representative run)");
        for t in &self.representative.trace {
            let _ = writeln!(out, "  {:>3} t{:<3} {:<36} {}", t.step, t.tid, t.op, t.outcome);
        }
        for e in &self.expectations {
            let mark = if e.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{mark} {}: {}", e.check, e.detail);
        }
        let _ = writeln!(out, "hash         {}", self.hash);
        out
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Running tallies over the explored runs.
#[derive(Default)]
struct Tally {
    runs: u64,
    truncated: u64,
    deadlocks: u64,
    witness_count: u64,
    witnesses: Vec<Witness>,
    violation_count: u64,
    violations: Vec<String>,
    kills: BTreeMap<String, BTreeMap<KillCause, u64>>,
    killed_any: BTreeMap<String, u64>,
    opened: BTreeMap<String, u64>,
    deadlock_notes: Vec<String>,
    first: Option<RunOutcome>,
    first_witness: Option<RunOutcome>,
}

impl Tally {
    fn add(&mut self, run: RunOutcome) {
        self.runs += 1;
        if run.truncated {
            self.truncated += 1;
        }
        if !run.deadlocked.is_empty() {
            self.deadlocks += 1;
            if self.deadlock_notes.len() < MAX_EXAMPLES {
                self.deadlock_notes.push(format!(
                    "deadlock: threads {:?} still stalled (schedule {:?})",
                    run.deadlocked, run.schedule
                ));
            }
        }
        self.witness_count += run.witnesses.len() as u64;
        for w in &run.witnesses {
            if self.witnesses.len() < MAX_EXAMPLES && !self.witnesses.iter().any(|x| same_witness(x, w)) {
                self.witnesses.push(w.clone());
            }
        }
        self.violation_count += run.violations.len() as u64;
        for v in &run.violations {
            if self.violations.len() < MAX_EXAMPLES && !self.violations.contains(v) {
                self.violations.push(v.clone());
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for (proc, cause) in &run.kills {
            if seen.insert((proc.clone(), *cause)) {
                *self.kills.entry(proc.clone()).or_default().entry(*cause).or_default() += 1;
            }
        }
        for proc in seen.iter().map(|(p, _)| p).collect::<std::collections::BTreeSet<_>>() {
            *self.killed_any.entry(proc.clone()).or_default() += 1;
        }
        let mut paths = std::collections::BTreeSet::new();
        for e in &run.events {
            if let Event::Open { path, .. } = e {
                paths.insert(path.clone());
            }
        }
        for p in paths {
            *self.opened.entry(p).or_default() += 1;
        }
        if self.first_witness.is_none() && !run.witnesses.is_empty() {
            self.first_witness = Some(run.clone());
        }
        if self.first.is_none() {
            self.first = Some(run);
        }
    }

    fn check(&self, exp: &Expectations) -> Vec<ExpectationResult> {
        let mut out = Vec::new();
        let mut push = |check: String, passed: bool, detail: String| {
            out.push(ExpectationResult { check, passed, detail });
        };
        let counts = [
            ("witnesses", exp.witnesses, self.witness_count),
            ("violations", exp.violations, self.violation_count),
            ("deadlocks", exp.deadlocks, self.deadlocks),
        ];
        for (name, bounds, got) in counts {
            if let Some(b) = bounds {
                push(format!("{name} {b}"), b.contains(got), format!("observed {got}"));
            }
        }
        for (proc, cause) in &exp.killed {
            let n = self.kills.get(proc).and_then(|c| c.get(cause)).copied().unwrap_or(0);
            push(
                format!("{proc} killed by {}", cause.as_str()),
                n == self.runs,
                format!("in {n} of {} run(s)", self.runs),
            );
        }
        for proc in &exp.survives {
            let n = self.killed_any.get(proc).copied().unwrap_or(0);
            push(format!("{proc} survives"), n == 0, format!("killed in {n} of {} run(s)", self.runs));
        }
        for path in &exp.opened {
            let n = self.opened.get(path).copied().unwrap_or(0);
            push(format!("opens {path}"), n == self.runs, format!("in {n} of {} run(s)", self.runs));
        }
        out
    }
}

fn same_witness(a: &Witness, b: &Witness) -> bool {
    a.tid == b.tid && a.nr == b.nr && a.arg_index == b.arg_index && a.checked == b.checked && a.used == b.used
}

/// Runs a scenario under its own schedule section.
pub fn run(scenario: &Scenario) -> Result<SimReport, ScenarioError> {
    let kernel = Kernel::from_scenario(scenario)?;
    let mut diagnostics = stale_stack_notes(&kernel);
    let mut tally = Tally::default();
    match scenario.schedule {
        ScheduleMode::Seeded { seed } => tally.add(run_seeded(kernel, seed)),
        ScheduleMode::Exhaustive { max_steps } => {
            explore(kernel, max_steps, &mut |run| tally.add(run));
        }
    }
    diagnostics.extend(tally.deadlock_notes.iter().cloned());
    let expectations = scenario
        .expectations
        .as_ref()
        .map(|e| tally.check(e.for_variant(scenario.variant)))
        .unwrap_or_default();
    let representative = tally.first_witness.take().or(tally.first.take()).expect("at least one run");
    let cycles = scenario.costs().charge(&representative.work);
    let mut report = SimReport {
        scenario: scenario.clone(),
        interleavings: tally.runs,
        truncated: tally.truncated,
        deadlocks: tally.deadlocks,
        witness_count: tally.witness_count,
        witnesses: tally.witnesses,
        violation_count: tally.violation_count,
        violations: tally.violations,
        kills: tally.kills,
        diagnostics,
        total_cycles: cycles.total(),
        cycles,
        representative,
        expectations,
        hash: String::new(),
    };
    report.hash = report.compute_hash();
    Ok(report)
}

/// Parses and runs scenario text.
pub fn run_json(text: &str) -> Result<SimReport, ScenarioError> {
    run(&Scenario::from_json(text)?)
}

fn stale_stack_notes(kernel: &Kernel) -> Vec<String> {
    let Some(d) = &kernel.enclave else { return Vec::new() };
    kernel
        .live_threads(d.host_pid)
        .into_iter()
        .filter_map(|tid| {
            let n = kernel.stale_stack_bytes(tid);
            (n > 0).then(|| format!("thread t{tid} has {n} non-zero stack bytes below its stack pointer"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(ops: &str) -> Scenario {
        Scenario::from_json(&format!(
            r#"{{"schema": "dpti-scenario/1", "name": "t",
                "processes": [{{"name": "p", "mappings": [{{"vaddr": "0x1000"}}],
                               "threads": [{{"ops": {ops}}}, {{"ops": {ops}}}]}}]}}"#
        ))
        .unwrap()
    }

    #[test]
    fn single_exit_has_no_violations() {
        let r = run(&scenario(r#"[{"op": "exit"}]"#)).unwrap();
        assert!(r.violations.is_empty());
        assert_eq!(r.interleavings, 1);
        assert!(r.passed());
    }

    #[test]
    fn seeded_runs_hash_identically() {
        let s = scenario(r#"[{"op": "write", "vaddr": "0x1000", "bytes": "ab"}, {"op": "read", "vaddr": "0x1000", "len": 2}]"#);
        let a = run(&s).unwrap();
        let b = run(&s).unwrap();
        assert_eq!(a.hash, b.hash);
        assert_eq!(a.hash.len(), 64);
        assert_eq!(a.hash, a.compute_hash());
    }

    #[test]
    fn exhaustive_counts_binomial_interleavings() {
        let mut s = scenario(
            r#"[{"op": "write", "vaddr": "0x1000", "bytes": "a"}, {"op": "read", "vaddr": "0x1000", "len": 1},
                {"op": "compute", "cycles": 1}, {"op": "read", "vaddr": "0x1000", "len": 1}]"#,
        );
        s.schedule = ScheduleMode::Exhaustive { max_steps: 24 };
        let r = run(&s).unwrap();
        assert_eq!(r.interleavings, 70);
        assert_eq!(r.truncated, 0);
    }

    #[test]
    fn report_round_trips_through_json() {
        let r = run(&scenario(r#"[{"op": "compute", "cycles": 5}]"#)).unwrap();
        let back = SimReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let rerun = run(&Scenario::from_json(&back.scenario.to_json()).unwrap()).unwrap();
        assert_eq!(rerun.hash, r.hash);
    }

    #[test]
    fn hex_formatting() {
        assert_eq!(hex(&[0, 0xab, 0x10]), "00ab10");
    }
}
