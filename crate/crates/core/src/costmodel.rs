// SPDX-License-Identifier: Apache-2.0

//! Additive cycle accounting.
//!
//! The simulator counts work items ([`Work`]) as it runs; a [`CostTable`]
//! turns them into cycles. Every default constant is a measured input
//! (per-component costs of deep argument filtering, syscall latencies and
//! enclave transition overheads), not a prediction.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::syscalls;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostTable {
    /// Latency of a syscall body without any filtering.
    pub base_syscall: f64,
    /// Per-syscall latency where it differs from `base_syscall`.
    #[serde(with = "crate::wire::num_keys")]
    pub syscall_base: BTreeMap<u32, f64>,
    pub filter_lookup_dpti: f64,
    /// Fixed cost of entering the sequential filter program.
    pub seccomp_entry: f64,
    pub seccomp_per_rule_scanned: f64,
    pub pt_resolve: f64,
    pub pte_manipulate: f64,
    pub tlb_flush: f64,
    /// Comparing one allowed string costs this much per argument byte
    /// (terminator included).
    pub string_compare_per_byte: f64,
    pub isolation_enter: f64,
    pub fault_exit: f64,
    pub syscall_exit: f64,
    pub ocall_stack_toggle: f64,
    pub ecall_base: f64,
    pub ocall_base: f64,
    /// Multiplier for scripted compute work.
    pub compute_per_cycle: f64,
}

impl Default for CostTable {
    fn default() -> Self {
        calibrate_default()
    }
}

/// Calibrated defaults.
///
/// * getppid: 295 vanilla, 295 + 65 = 360 with the table lookup, and
///   295 + 44.5 + 111 * 0.5 = 395 with the sorted sequential program of
///   349 rules (getppid is the 111th rule visited).
/// * openat: 855 + 65 = 920 when allowed without argument checks; one
///   string adds resolve 86, two PTE updates of 27, two flushes of 458 and
///   a 16-byte compare at 2.5 per byte.
/// * enclave transitions: 10 000 cycle ECALL and 5 000 cycle OCALL
///   baselines; enter 500, page-fault exit 1490, syscall exit 490, OCALL
///   stack toggle 210.
pub fn calibrate_default() -> CostTable {
    CostTable {
        base_syscall: 295.0,
        syscall_base: BTreeMap::from([(syscalls::OPENAT, 855.0)]),
        filter_lookup_dpti: 65.0,
        seccomp_entry: 44.5,
        seccomp_per_rule_scanned: 0.5,
        pt_resolve: 86.0,
        pte_manipulate: 27.0,
        tlb_flush: 458.0,
        string_compare_per_byte: 2.5,
        isolation_enter: 500.0,
        fault_exit: 1490.0,
        syscall_exit: 490.0,
        ocall_stack_toggle: 210.0,
        ecall_base: 10_000.0,
        ocall_base: 5_000.0,
        compute_per_cycle: 1.0,
    }
}

impl CostTable {
    pub fn zeroed() -> Self {
        CostTable {
            base_syscall: 0.0,
            syscall_base: BTreeMap::new(),
            filter_lookup_dpti: 0.0,
            seccomp_entry: 0.0,
            seccomp_per_rule_scanned: 0.0,
            pt_resolve: 0.0,
            pte_manipulate: 0.0,
            tlb_flush: 0.0,
            string_compare_per_byte: 0.0,
            isolation_enter: 0.0,
            fault_exit: 0.0,
            syscall_exit: 0.0,
            ocall_stack_toggle: 0.0,
            ecall_base: 0.0,
            ocall_base: 0.0,
            compute_per_cycle: 0.0,
        }
    }

    pub fn base_for(&self, nr: u32) -> f64 {
        self.syscall_base.get(&nr).copied().unwrap_or(self.base_syscall)
    }

    /// Fails on any negative constant.
    pub fn validate(&self) -> Result<(), String> {
        let named = [
            ("base_syscall", self.base_syscall),
            ("filter_lookup_dpti", self.filter_lookup_dpti),
            ("seccomp_entry", self.seccomp_entry),
            ("seccomp_per_rule_scanned", self.seccomp_per_rule_scanned),
            ("pt_resolve", self.pt_resolve),
            ("pte_manipulate", self.pte_manipulate),
            ("tlb_flush", self.tlb_flush),
            ("string_compare_per_byte", self.string_compare_per_byte),
            ("isolation_enter", self.isolation_enter),
            ("fault_exit", self.fault_exit),
            ("syscall_exit", self.syscall_exit),
            ("ocall_stack_toggle", self.ocall_stack_toggle),
            ("ecall_base", self.ecall_base),
            ("ocall_base", self.ocall_base),
            ("compute_per_cycle", self.compute_per_cycle),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("cost {name} must be a non-negative number, got {v}"));
            }
        }
        for (nr, v) in &self.syscall_base {
            if !(*v >= 0.0 && v.is_finite()) {
                return Err(format!("cost for syscall {nr} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn charge(&self, work: &Work) -> Breakdown {
        let base = work.syscalls.iter().map(|(&nr, &n)| self.base_for(nr) * n as f64).sum();
        Breakdown {
            base,
            filter_lookup: self.filter_lookup_dpti * work.filter_lookups as f64,
            seccomp: self.seccomp_entry * work.seccomp_evals as f64
                + self.seccomp_per_rule_scanned * work.seccomp_rules_scanned as f64,
            pt_resolve: self.pt_resolve * work.pt_resolves as f64,
            pte_manipulate: self.pte_manipulate * work.pte_updates as f64,
            tlb_flush: self.tlb_flush * work.tlb_flushes as f64,
            string_check: self.string_compare_per_byte * work.string_bytes_compared as f64,
            enclave_transition: self.isolation_enter * work.enclave_enters as f64
                + self.fault_exit * work.fault_exits as f64
                + self.syscall_exit * work.syscall_exits as f64
                + self.ocall_stack_toggle * work.ocall_stack_toggles as f64,
            enclave_calls: self.ecall_base * work.ecalls as f64 + self.ocall_base * work.ocalls as f64,
            compute: self.compute_per_cycle * work.compute_cycles as f64,
        }
    }
}

/// Work items counted by the simulator.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Work {
    /// Executed syscall bodies by number.
    #[serde(with = "crate::wire::num_keys")]
    pub syscalls: BTreeMap<u32, u64>,
    pub filter_lookups: u64,
    pub seccomp_evals: u64,
    pub seccomp_rules_scanned: u64,
    pub pt_resolves: u64,
    pub pte_updates: u64,
    pub tlb_flushes: u64,
    pub string_compares: u64,
    pub string_bytes_compared: u64,
    pub enclave_enters: u64,
    pub fault_exits: u64,
    pub syscall_exits: u64,
    pub ocall_stack_toggles: u64,
    pub ecalls: u64,
    pub ocalls: u64,
    pub compute_cycles: u64,
}

impl Work {
    pub fn syscall(nr: u32) -> Self {
        Work { syscalls: BTreeMap::from([(nr, 1)]), ..Work::default() }
    }

    pub fn is_zero(&self) -> bool {
        *self == Work::default()
    }
}

impl AddAssign<&Work> for Work {
    fn add_assign(&mut self, rhs: &Work) {
        for (&nr, &n) in &rhs.syscalls {
            *self.syscalls.entry(nr).or_default() += n;
        }
        self.filter_lookups += rhs.filter_lookups;
        self.seccomp_evals += rhs.seccomp_evals;
        self.seccomp_rules_scanned += rhs.seccomp_rules_scanned;
        self.pt_resolves += rhs.pt_resolves;
        self.pte_updates += rhs.pte_updates;
        self.tlb_flushes += rhs.tlb_flushes;
        self.string_compares += rhs.string_compares;
        self.string_bytes_compared += rhs.string_bytes_compared;
        self.enclave_enters += rhs.enclave_enters;
        self.fault_exits += rhs.fault_exits;
        self.syscall_exits += rhs.syscall_exits;
        self.ocall_stack_toggles += rhs.ocall_stack_toggles;
        self.ecalls += rhs.ecalls;
        self.ocalls += rhs.ocalls;
        self.compute_cycles += rhs.compute_cycles;
    }
}

impl Add<&Work> for Work {
    type Output = Work;

    fn add(mut self, rhs: &Work) -> Work {
        self += rhs;
        self
    }
}

/// Cycles per component.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub base: f64,
    pub filter_lookup: f64,
    pub seccomp: f64,
    pub pt_resolve: f64,
    pub pte_manipulate: f64,
    pub tlb_flush: f64,
    pub string_check: f64,
    pub enclave_transition: f64,
    pub enclave_calls: f64,
    pub compute: f64,
}

impl Breakdown {
    pub fn total(&self) -> f64 {
        self.components().iter().map(|&(_, v)| v).sum()
    }

    pub fn components(&self) -> [(&'static str, f64); 10] {
        [
            ("base", self.base),
            ("filter_lookup", self.filter_lookup),
            ("seccomp", self.seccomp),
            ("pt_resolve", self.pt_resolve),
            ("pte_manipulate", self.pte_manipulate),
            ("tlb_flush", self.tlb_flush),
            ("string_check", self.string_check),
            ("enclave_transition", self.enclave_transition),
            ("enclave_calls", self.enclave_calls),
            ("compute", self.compute),
        ]
    }

    /// Largest component excluding the unfiltered base latency.
    pub fn largest_added(&self) -> (&'static str, f64) {
        self.components()
            .into_iter()
            .filter(|(n, _)| !matches!(*n, "base" | "enclave_calls" | "compute"))
            .fold(("none", 0.0), |best, c| if c.1 > best.1 { c } else { best })
    }
}

/// Overhead relative to `vanilla`, in percent, rounded to 0.1.
pub fn overhead_pct(total: f64, vanilla: f64) -> f64 {
    if vanilla == 0.0 {
        return 0.0;
    }
    ((total - vanilla) / vanilla * 1000.0).round() / 10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub suite: String,
    pub case: String,
    pub config: String,
    pub cycles: f64,
    pub vanilla: f64,
    pub overhead_pct: f64,
    pub breakdown: Breakdown,
}

impl BenchRow {
    pub fn new(suite: &str, case: &str, config: &str, breakdown: Breakdown, vanilla: f64) -> Self {
        let cycles = breakdown.total();
        BenchRow {
            suite: suite.to_string(),
            case: case.to_string(),
            config: config.to_string(),
            cycles,
            vanilla,
            overhead_pct: overhead_pct(cycles, vanilla),
            breakdown,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn find(&self, suite: &str, case: &str, config: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.suite == suite && r.case == case && r.config == config)
    }

    pub fn suite(&self, suite: &str) -> Vec<&BenchRow> {
        self.rows.iter().filter(|r| r.suite == suite).collect()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for row in &self.rows {
            if row.suite != current {
                current = &row.suite;
                let _ = writeln!(out, "\n== {current} ==");
                let _ = writeln!(
                    out,
                    "{:<24} {:<20} {:>10} {:>9}  largest added component",
                    "case", "config", "cycles", "overhead"
                );
            }
            let (name, value) = row.breakdown.largest_added();
            let _ = writeln!(
                out,
                "{:<24} {:<20} {:>10.1} {:>8.1}%  {}={:.1}",
                row.case, row.config, row.cycles, row.overhead_pct, name, value
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_constants() {
        let t = calibrate_default();
        assert_eq!(t.tlb_flush, 458.0);
        assert_eq!(t.base_for(syscalls::GETPPID), 295.0);
        assert!(t.validate().is_ok());
    }

    #[test]
    fn zeroed_table_costs_nothing() {
        let mut w = Work::syscall(syscalls::OPENAT);
        w.tlb_flushes = 7;
        w.string_bytes_compared = 99;
        w.ecalls = 3;
        assert_eq!(CostTable::zeroed().charge(&w).total(), 0.0);
    }

    #[test]
    fn charge_is_additive() {
        let t = calibrate_default();
        let mut a = Work::syscall(syscalls::GETPPID);
        a.filter_lookups = 1;
        let mut b = Work::syscall(syscalls::OPENAT);
        b.tlb_flushes = 2;
        b.pte_updates = 2;
        let sum = a.clone() + &b;
        let lhs = t.charge(&sum).total();
        let rhs = t.charge(&a).total() + t.charge(&b).total();
        assert_eq!(lhs, rhs);
        assert_eq!(t.charge(&a).total(), 360.0);
    }

    #[test]
    fn negative_cost_rejected() {
        let mut t = calibrate_default();
        t.tlb_flush = -1.0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn overhead_rounding() {
        assert_eq!(overhead_pct(395.0, 295.0), 33.9);
        assert_eq!(overhead_pct(360.0, 295.0), 22.0);
        assert_eq!(overhead_pct(1.0, 0.0), 0.0);
    }
}
