// SPDX-License-Identifier: Apache-2.0

//! Benchmark suites. Every row comes from running a small scenario and
//! charging the work it recorded; nothing is computed from the cost table
//! directly.

use serde_json::{json, Value};

use crate::costmodel::{BenchReport, BenchRow, Breakdown, CostTable};
use crate::dpti::Variant;
use crate::report;
use crate::scenario::{Scenario, ScenarioError};
use crate::syscalls::{self, SYSCALL_TABLE_SIZE};
use crate::tasks::sched::ScheduleMode;

pub const SUITES: [&str; 5] = ["getppid", "strings", "aliases", "sgx", "compute"];

/// Number of allowed strings in the string sweep and aliases in the alias sweep.
pub const SWEEP: [usize; 4] = [1, 2, 5, 10];

const ARG_PAGE: u64 = 0x10_0000;
const ALIAS_BASE: u64 = 0x20_0000;

fn scenario(value: Value) -> Scenario {
    let mut v = value;
    v["schema"] = json!(crate::scenario::SCHEMA);
    Scenario::from_json(&v.to_string()).expect("bench scenario is well formed")
}

/// Cycles of the single seeded run of `s`.
pub fn cycles(s: &Scenario, costs: &CostTable) -> Result<Breakdown, ScenarioError> {
    let mut s = s.clone();
    s.costs = Some(costs.clone());
    Ok(report::run(&s)?.cycles)
}

fn run(value: Value, costs: &CostTable) -> Breakdown {
    cycles(&scenario(value), costs).expect("bench scenario runs")
}

/// One getppid call. `rules` is the number of allowed syscalls, taken from
/// the lowest numbers with getppid always included; `engine` is `None` for
/// an unsandboxed process.
pub fn getppid_scenario(engine: Option<&str>, rules: usize) -> Scenario {
    let mut allow: Vec<u32> = (0..SYSCALL_TABLE_SIZE as u32).filter(|&n| n != syscalls::GETPPID).take(rules.saturating_sub(1)).collect();
    allow.push(syscalls::GETPPID);
    let mut s = json!({
        "name": format!("getppid-{}-{rules}", engine.unwrap_or("vanilla")),
        "engine": engine.unwrap_or("dpti"),
        "filters": {"f": {"allow": allow}},
        "processes": [{"name": "bench", "threads": [{"ops": [{"op": "syscall", "nr": "getppid"}]}]}]
    });
    if engine.is_some() {
        s["processes"][0]["filters"] = json!("f");
    }
    scenario(s)
}

fn getppid_suite(costs: &CostTable, out: &mut BenchReport) {
    let vanilla = cycles(&getppid_scenario(None, 0), costs).expect("runs");
    let base = vanilla.total();
    out.rows.push(BenchRow::new("getppid", "getppid", "vanilla", vanilla, base));
    let full = SYSCALL_TABLE_SIZE;
    for engine in ["seccomp", "dpti"] {
        let b = cycles(&getppid_scenario(Some(engine), full), costs).expect("runs");
        out.rows.push(BenchRow::new("getppid", "getppid", engine, b, base));
    }
    // getppid is visited after every allowed syscall with a smaller number.
    for rules in [1, 10, 50, 111, 200, full] {
        let position = rules.min(syscalls::GETPPID as usize + 1);
        let case = format!("{rules} rules, pos {position}");
        for engine in ["seccomp", "dpti"] {
            let b = cycles(&getppid_scenario(Some(engine), rules), costs).expect("runs");
            out.rows.push(BenchRow::new("getppid", &case, engine, b, base));
        }
    }
}

/// Fifteen-character path used as the openat argument.
pub fn bench_path(i: usize) -> String {
    format!("/etc/bench/p{i:03}")
}

/// openat whose path filter allows `strings` paths; the argument matches the
/// last one, so every allowed string is compared. `aliases` extra shared
/// mappings of the argument page are added. `strings == 0` allows openat
/// without an argument filter and `variant == None` runs unsandboxed.
pub fn openat_scenario(variant: Option<Variant>, strings: usize, aliases: usize) -> Value {
    let values: Vec<String> = (0..strings).map(bench_path).collect();
    let path = bench_path(strings.saturating_sub(1));
    let mut filter = json!({"allow": ["openat"]});
    if strings > 0 {
        filter = json!({"strings": [{"syscall": "openat", "arg": 1, "values": values}]});
    }
    let mut mappings = vec![json!({"vaddr": ARG_PAGE, "shared": "arg"})];
    for i in 0..aliases {
        mappings.push(json!({"vaddr": ALIAS_BASE + i as u64 * 0x1000, "shared": "arg"}));
    }
    let mut s = json!({
        "schema": crate::scenario::SCHEMA,
        "name": format!("openat-{strings}-strings-{aliases}-aliases"),
        "variant": variant.unwrap_or_default(),
        "filters": {"f": filter},
        "processes": [{
            "name": "bench",
            "mappings": mappings,
            "init": [{"vaddr": ARG_PAGE, "cstr": path}],
            "threads": [{"ops": [{"op": "syscall", "nr": "openat", "args": [0, ARG_PAGE, 0]}]}]
        }]
    });
    if variant.is_some() {
        s["processes"][0]["filters"] = json!("f");
    }
    s
}

fn strings_suite(costs: &CostTable, out: &mut BenchReport) {
    let vanilla = run(openat_scenario(None, 0, 0), costs);
    let base = vanilla.total();
    out.rows.push(BenchRow::new("strings", "0 strings", "vanilla", vanilla, base));
    out.rows.push(BenchRow::new("strings", "0 strings", "dpti", run(openat_scenario(Some(Variant::Stash), 0, 0), costs), base));
    for n in SWEEP {
        for v in [Variant::Stash, Variant::Freeze] {
            let b = run(openat_scenario(Some(v), n, 0), costs);
            out.rows.push(BenchRow::new("strings", &format!("{n} strings"), &format!("dpti-{}", v.as_str()), b, base));
        }
    }
}

fn aliases_suite(costs: &CostTable, out: &mut BenchReport) {
    let base = run(openat_scenario(None, 0, 0), costs).total();
    for n in SWEEP {
        for v in [Variant::Stash, Variant::Freeze] {
            // The primary mapping is one of the `n` mappings.
            let b = run(openat_scenario(Some(v), 1, n - 1), costs);
            out.rows.push(BenchRow::new("aliases", &format!("{n} aliases"), &format!("dpti-{}", v.as_str()), b, base));
        }
    }
}

/// An ECALL that returns directly or after one OCALL, hosted in a process
/// with the given confinement and exit style.
pub fn enclave_scenario(variant: Variant, syscall_exit: bool, with_ocall: bool) -> Scenario {
    let mut script = Vec::new();
    if with_ocall {
        script.push(json!({"op": "eexit", "kind": "ocall"}));
    }
    script.push(json!({"op": "eexit"}));
    scenario(json!({
        "name": "ecall",
        "variant": variant,
        "processes": [{
            "name": "host",
            "mappings": [{"vaddr": "0x400000", "pages": 2, "write": false, "exec": true}],
            "threads": [{"stack": {"top": "0x7ff000", "pages": 2}, "ops": [{"op": "ecall", "script": "call"}]}]
        }],
        "enclave": {
            "process": "host",
            "pages": [{"vaddr": "0x10000000", "pages": 4}],
            "cbp": "0x600000",
            "dbps": [{"vaddr": "0x601000"}],
            "syscall_exit": syscall_exit,
            "scripts": {"call": script}
        }
    }))
}

/// (ECALL, OCALL) cycles for one configuration. The OCALL cost is the
/// difference made by adding one OCALL to an ECALL.
pub fn transition_cycles(variant: Variant, syscall_exit: bool, costs: &CostTable) -> (Breakdown, Breakdown) {
    let ecall = cycles(&enclave_scenario(variant, syscall_exit, false), costs).expect("runs");
    let both = cycles(&enclave_scenario(variant, syscall_exit, true), costs).expect("runs");
    let ocall = diff(&both, &ecall);
    (ecall, ocall)
}

fn diff(a: &Breakdown, b: &Breakdown) -> Breakdown {
    Breakdown {
        base: a.base - b.base,
        filter_lookup: a.filter_lookup - b.filter_lookup,
        seccomp: a.seccomp - b.seccomp,
        pt_resolve: a.pt_resolve - b.pt_resolve,
        pte_manipulate: a.pte_manipulate - b.pte_manipulate,
        tlb_flush: a.tlb_flush - b.tlb_flush,
        string_check: a.string_check - b.string_check,
        enclave_transition: a.enclave_transition - b.enclave_transition,
        enclave_calls: a.enclave_calls - b.enclave_calls,
        compute: a.compute - b.compute,
    }
}

fn sgx_suite(costs: &CostTable, out: &mut BenchReport) {
    let (ecall0, ocall0) = transition_cycles(Variant::None, false, costs);
    let (e_base, o_base) = (ecall0.total(), ocall0.total());
    out.rows.push(BenchRow::new("sgx", "ecall", "vanilla", ecall0, e_base));
    out.rows.push(BenchRow::new("sgx", "ocall", "vanilla", ocall0, o_base));
    for v in [Variant::Stash, Variant::Freeze] {
        for (exit, label) in [(false, "fault-exit"), (true, "syscall-exit")] {
            let (e, o) = transition_cycles(v, exit, costs);
            let config = format!("{}-{label}", v.as_str());
            out.rows.push(BenchRow::new("sgx", "ecall", &config, e, e_base));
            out.rows.push(BenchRow::new("sgx", "ocall", &config, o, o_base));
        }
    }
}

/// A compute phase followed by one string-filtered openat.
fn compute_scenario(variant: Option<Variant>, work: u64) -> Value {
    let mut s = openat_scenario(variant, 1, 0);
    let ops = &mut s["processes"][0]["threads"][0]["ops"];
    let call = ops[0].clone();
    *ops = json!([{"op": "compute", "cycles": work}, call]);
    s
}

fn compute_suite(costs: &CostTable, out: &mut BenchReport) {
    for work in [0u64, 1_000, 10_000, 100_000, 1_000_000] {
        let vanilla = run(compute_scenario(None, work), costs);
        let base = vanilla.total();
        let case = format!("{work} compute cycles");
        out.rows.push(BenchRow::new("compute", &case, "vanilla", vanilla, base));
        let b = run(compute_scenario(Some(Variant::Stash), work), costs);
        out.rows.push(BenchRow::new("compute", &case, "dpti", b, base));
    }
}

/// Runs one named suite, or all of them for `None`.
pub fn run_suites(suite: Option<&str>, costs: &CostTable) -> Result<BenchReport, String> {
    let mut out = BenchReport::default();
    let wanted: Vec<&str> = match suite {
        None | Some("all") => SUITES.to_vec(),
        Some(s) if SUITES.contains(&s) => vec![s],
        Some(s) => return Err(format!("unknown bench suite {s:?} (expected one of {})", SUITES.join(", "))),
    };
    for s in wanted {
        match s {
            "getppid" => getppid_suite(costs, &mut out),
            "strings" => strings_suite(costs, &mut out),
            "aliases" => aliases_suite(costs, &mut out),
            "sgx" => sgx_suite(costs, &mut out),
            _ => compute_suite(costs, &mut out),
        }
    }
    Ok(out)
}

/// Runs a scenario as vanilla (filters removed), under the sequential
/// baseline engine and under its own configuration. The baseline row is
/// skipped when the filters use strings, which it cannot express.
pub fn bench_scenario(s: &Scenario, costs: &CostTable) -> Result<BenchReport, ScenarioError> {
    let mut s = s.clone();
    if let ScheduleMode::Exhaustive { .. } = s.schedule {
        s.schedule = ScheduleMode::Seeded { seed: 0 };
    }
    s.expectations = None;
    let mut vanilla = s.clone();
    for p in &mut vanilla.processes {
        p.filters = None;
    }
    let base = cycles(&vanilla, costs)?;
    let total = base.total();
    let mut out = BenchReport::default();
    out.rows.push(BenchRow::new("scenario", &s.name, "vanilla", base, total));
    let mut seccomp = s.clone();
    seccomp.engine = crate::tasks::Engine::Seccomp;
    match cycles(&seccomp, costs) {
        Ok(b) => out.rows.push(BenchRow::new("scenario", &s.name, "seccomp", b, total)),
        Err(ScenarioError::Kernel(_) | ScenarioError::Filter(_)) => {}
        Err(e) => return Err(e),
    }
    s.engine = crate::tasks::Engine::Dpti;
    let b = cycles(&s, costs)?;
    out.rows.push(BenchRow::new("scenario", &s.name, &format!("dpti-{}", s.variant.as_str()), b, total));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_is_fifteen_bytes() {
        assert_eq!(bench_path(9).len(), 15);
    }

    #[test]
    fn getppid_rows() {
        let r = run_suites(Some("getppid"), &CostTable::default()).unwrap();
        assert_eq!(r.find("getppid", "getppid", "vanilla").unwrap().cycles, 295.0);
        assert_eq!(r.find("getppid", "getppid", "seccomp").unwrap().cycles, 395.0);
        assert_eq!(r.find("getppid", "getppid", "dpti").unwrap().cycles, 360.0);
    }

    #[test]
    fn zeroed_costs_give_zero_rows() {
        let r = run_suites(None, &CostTable::zeroed()).unwrap();
        assert!(r.rows.iter().all(|row| row.cycles == 0.0));
    }

    #[test]
    fn unknown_suite() {
        assert!(run_suites(Some("nope"), &CostTable::default()).is_err());
    }
}
