// SPDX-License-Identifier: Apache-2.0

//! Scenario files: a JSON description of processes, filters, an optional
//! enclave, the schedule and what the run is expected to produce.
//!
//! Thread ids are handed out in file order starting at 1, so the first
//! thread of the second process has id `1 + threads of the first process`.
//! Each process id equals the id of its first thread.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::CostTable;
use crate::dpti::Variant;
use crate::events::KillCause;
use crate::filters::{create_filters, CmpOp, FilterError, FilterTable};
use crate::sgxdom::{EnclaveOp, EnclaveSpec, SgxError};
use crate::tasks::sched::ScheduleMode;
use crate::tasks::{Engine, Kernel, KernelConfig, KernelError, ThreadOp, ViolationAction};
use crate::vmem::{vpn_of, Perms, PAGE_SIZE};
use crate::wire::{hex_u64, Addr, Bytes, Sys};

pub const SCHEMA: &str = "dpti-scenario/1";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("unsupported schema {found:?}; expected {SCHEMA:?}")]
    Schema { found: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Enclave(#[from] SgxError),
}

fn default_cores() -> usize {
    2
}

fn default_span() -> usize {
    2
}

fn one() -> u64 {
    1
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub engine: Engine,
    #[serde(default)]
    pub on_violation: ViolationAction,
    #[serde(default = "default_cores")]
    pub cores: usize,
    #[serde(default = "default_span")]
    pub max_span_pages: usize,
    #[serde(default)]
    pub filters: BTreeMap<String, FilterSpec>,
    /// Named op lists that fork, clone and exec can switch a thread to.
    #[serde(default)]
    pub programs: BTreeMap<String, Vec<ThreadOp>>,
    pub processes: Vec<ProcessSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enclave: Option<EnclaveSection>,
    #[serde(default)]
    pub schedule: ScheduleMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub costs: Option<CostTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expectations: Option<Expectations>,
}

/// Filter definition in the style of the user-space library: plain allows,
/// primitive comparisons and string sets.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    #[serde(default)]
    pub allow: Vec<Sys>,
    #[serde(default)]
    pub primitive: Vec<PrimitiveRule>,
    #[serde(default)]
    pub strings: Vec<StringRule>,
    /// Give the baseline sequential program an explicit deny rule for every
    /// unlisted syscall instead of a default action.
    #[serde(default, skip_serializing_if = "is_false")]
    pub explicit_denies: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimitiveRule {
    pub syscall: Sys,
    pub arg: u8,
    #[serde(default = "eq")]
    pub op: CmpOp,
    #[serde(with = "hex_u64")]
    pub value: u64,
}

fn eq() -> CmpOp {
    CmpOp::Eq
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StringRule {
    pub syscall: Sys,
    pub arg: u8,
    pub values: Vec<Bytes>,
}

impl FilterSpec {
    pub fn build(&self) -> Result<FilterTable, FilterError> {
        let mut table = create_filters();
        for s in &self.allow {
            table.add_rule(s.0)?;
        }
        for p in &self.primitive {
            table.add_rule_primitive(p.syscall.0, p.arg, p.op, p.value)?;
        }
        for s in &self.strings {
            for v in &s.values {
                table.add_rule_string(s.syscall.0, s.arg, CmpOp::Eq, v.as_slice())?;
            }
        }
        Ok(table)
    }

    /// Number of rules in the user-facing sense: one per allowed syscall,
    /// primitive comparison and allowed string.
    pub fn rule_count(&self) -> usize {
        self.allow.len() + self.primitive.len() + self.strings.iter().map(|s| s.values.len()).sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mapping {
    #[serde(with = "hex_u64")]
    pub vaddr: u64,
    #[serde(default = "one")]
    pub pages: u64,
    #[serde(default = "yes")]
    pub write: bool,
    #[serde(default)]
    pub exec: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared: Option<String>,
}

fn yes() -> bool {
    true
}

/// Initial memory contents. `cstr` appends a terminating NUL.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitBytes {
    #[serde(with = "hex_u64")]
    pub vaddr: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cstr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes: Option<Bytes>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackSpec {
    #[serde(with = "hex_u64")]
    pub top: u64,
    #[serde(default = "one")]
    pub pages: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreadSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stack: Option<StackSpec>,
    pub ops: Vec<ThreadOp>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filters: Option<String>,
    #[serde(default)]
    pub mappings: Vec<Mapping>,
    #[serde(default)]
    pub init: Vec<InitBytes>,
    pub threads: Vec<ThreadSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageRange {
    #[serde(with = "hex_u64")]
    pub vaddr: u64,
    #[serde(default = "one")]
    pub pages: u64,
}

impl PageRange {
    fn vpns(&self) -> impl Iterator<Item = u64> {
        let start = vpn_of(self.vaddr);
        start..start + self.pages
    }
}

/// Enclave living inside one of the processes. Pages not already mapped
/// by the process are added to it: enclave pages read-write, the code
/// bridge page read-execute and data bridges read-write.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnclaveSection {
    pub process: String,
    pub pages: Vec<PageRange>,
    #[serde(default)]
    pub lazy_pages: Vec<PageRange>,
    #[serde(with = "hex_u64")]
    pub cbp: u64,
    #[serde(default)]
    pub dbps: Vec<PageRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal_handler: Option<Addr>,
    #[serde(default)]
    pub syscall_exit: bool,
    #[serde(default)]
    pub scripts: BTreeMap<String, Vec<EnclaveOp>>,
}

/// Inclusive bounds on a count; either side may be left open.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<u64>,
}

impl Bounds {
    pub fn contains(&self, n: u64) -> bool {
        self.min.is_none_or(|m| n >= m) && self.max.is_none_or(|m| n <= m)
    }
}

impl std::fmt::Display for Bounds {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (self.min, self.max) {
            (Some(a), Some(b)) if a == b => write!(f, "exactly {a}"),
            (Some(a), Some(b)) => write!(f, "{a}..={b}"),
            (Some(a), None) => write!(f, ">= {a}"),
            (None, Some(b)) => write!(f, "<= {b}"),
            (None, None) => write!(f, "any"),
        }
    }
}

/// Self-checks for a fixture. Counts are totals over every explored run;
/// `killed`, `survives` and `opened` must hold in every run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witnesses: Option<Bounds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub violations: Option<Bounds>,
    /// Runs that ended with a stalled thread.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadlocks: Option<Bounds>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub killed: BTreeMap<String, KillCause>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub survives: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub opened: Vec<String>,
    /// Replacement expectations when running under a given variant.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_variant: BTreeMap<Variant, Expectations>,
}

impl Expectations {
    pub fn for_variant(&self, variant: Variant) -> &Expectations {
        self.per_variant.get(&variant).unwrap_or(self)
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        // Check the version first so an old file gets a clear message
        // instead of an unknown-field error.
        let value: serde_json::Value = serde_json::from_str(text).map_err(parse_error)?;
        match value.get("schema").and_then(|v| v.as_str()) {
            Some(SCHEMA) => {}
            Some(other) => return Err(ScenarioError::Schema { found: other.to_string() }),
            None => return Err(ScenarioError::Invalid("missing \"schema\" field".into())),
        }
        let scenario: Scenario = serde_json::from_str(text).map_err(parse_error)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn costs(&self) -> CostTable {
        self.costs.clone().unwrap_or_default()
    }

    pub fn kernel_config(&self) -> KernelConfig {
        KernelConfig {
            variant: self.variant,
            engine: self.engine,
            on_violation: self.on_violation,
            max_span_pages: self.max_span_pages,
        }
    }

    /// Checks cross references that the JSON schema cannot express.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |msg: String| Err(ScenarioError::Invalid(msg));
        if self.cores == 0 {
            return bad("cores must be at least 1".into());
        }
        if self.max_span_pages == 0 {
            return bad("max_span_pages must be at least 1".into());
        }
        if self.processes.is_empty() {
            return bad("scenario has no processes".into());
        }
        if let Some(costs) = &self.costs {
            costs.validate().map_err(ScenarioError::Invalid)?;
        }
        let scripts = self.enclave.as_ref().map(|e| &e.scripts);
        let check_ops = |ops: &[ThreadOp], whose: &str| -> Result<(), ScenarioError> {
            for op in ops {
                let (kind, name) = match op {
                    ThreadOp::Fork { program } | ThreadOp::Clone { program } => ("program", program),
                    ThreadOp::Exec { program: Some(program), .. } => ("program", program),
                    ThreadOp::Ecall { script } => ("enclave script", script),
                    _ => continue,
                };
                let known = match kind {
                    "program" => self.programs.contains_key(name),
                    _ => scripts.is_some_and(|s| s.contains_key(name)),
                };
                if !known {
                    return Err(ScenarioError::Invalid(format!("{whose} refers to unknown {kind} {name:?}")));
                }
            }
            Ok(())
        };
        for (name, ops) in &self.programs {
            check_ops(ops, &format!("program {name:?}"))?;
        }
        let mut names = std::collections::BTreeSet::new();
        for p in &self.processes {
            if !names.insert(p.name.as_str()) {
                return bad(format!("duplicate process name {:?}", p.name));
            }
            if p.threads.is_empty() {
                return bad(format!("process {:?} has no threads", p.name));
            }
            if let Some(f) = &p.filters {
                if !self.filters.contains_key(f) {
                    return bad(format!("process {:?} uses unknown filters {f:?}", p.name));
                }
            }
            for i in &p.init {
                if i.cstr.is_some() == i.bytes.is_some() {
                    return bad(format!("init entry at {:#x} needs exactly one of cstr and bytes", i.vaddr));
                }
            }
            for t in &p.threads {
                check_ops(&t.ops, &format!("process {:?}", p.name))?;
            }
        }
        if let Some(e) = &self.enclave {
            if !names.contains(e.process.as_str()) {
                return bad(format!("enclave host {:?} is not a process", e.process));
            }
        }
        Ok(())
    }
}

fn parse_error(e: serde_json::Error) -> ScenarioError {
    ScenarioError::Parse { line: e.line(), column: e.column(), message: strip_position(&e.to_string()) }
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

impl Kernel {
    /// Builds the initial machine state of a scenario.
    pub fn from_scenario(s: &Scenario) -> Result<Kernel, ScenarioError> {
        s.validate()?;
        let mut k = Kernel::new(s.kernel_config(), s.cores);
        for (name, ops) in &s.programs {
            k.add_program(name, ops.clone());
        }
        if let Some(e) = &s.enclave {
            for (name, ops) in &e.scripts {
                k.add_script(name, ops.clone());
            }
        }
        let mut pids = BTreeMap::new();
        for p in &s.processes {
            let pid = k.spawn_process(&p.name, p.threads[0].ops.clone());
            let mut tids = vec![pid];
            for t in &p.threads[1..] {
                tids.push(k.add_thread(pid, t.ops.clone())?);
            }
            for m in &p.mappings {
                let perms = Perms { user: true, writable: m.write, executable: m.exec };
                k.map_pages(pid, m.vaddr, m.pages, perms, m.shared.as_deref())?;
            }
            for (t, &tid) in p.threads.iter().zip(&tids) {
                if let Some(st) = &t.stack {
                    k.set_stack(tid, st.top, st.pages)?;
                }
            }
            for i in &p.init {
                let mut bytes = match (&i.cstr, &i.bytes) {
                    (Some(c), _) => c.as_bytes().to_vec(),
                    (None, Some(b)) => b.0.clone(),
                    (None, None) => Vec::new(),
                };
                if i.cstr.is_some() {
                    bytes.push(0);
                }
                k.poke(pid, i.vaddr, &bytes)?;
            }
            pids.insert(p.name.clone(), pid);
        }
        if let Some(e) = &s.enclave {
            let pid = pids[&e.process];
            let spec = enclave_spec(&mut k, pid, e)?;
            k.attach_enclave(pid, &spec)?;
        }
        // Filters go on last so every thread holds a reference.
        for p in &s.processes {
            if let Some(f) = &p.filters {
                let spec = &s.filters[f];
                k.install_filters(pids[&p.name], spec.build()?, spec.explicit_denies)?;
            }
        }
        Ok(k)
    }
}

fn enclave_spec(k: &mut Kernel, pid: u32, e: &EnclaveSection) -> Result<EnclaveSpec, ScenarioError> {
    let asid = k.process(pid)?.asid;
    let ensure = |k: &mut Kernel, vpn: u64, perms: Perms| -> Result<(), ScenarioError> {
        if k.mem.pte(asid, vpn).is_none() {
            k.map_pages(pid, vpn * PAGE_SIZE as u64, 1, perms, None)?;
        }
        Ok(())
    };
    let mut enclave_pages = Vec::new();
    for r in &e.pages {
        for vpn in r.vpns() {
            ensure(k, vpn, Perms::USER_RW)?;
            enclave_pages.push(vpn);
        }
    }
    let cbp_vpn = vpn_of(e.cbp);
    ensure(k, cbp_vpn, Perms::USER_RX)?;
    let mut dbps = Vec::new();
    for r in &e.dbps {
        for vpn in r.vpns() {
            ensure(k, vpn, Perms::USER_RW)?;
        }
        dbps.push((r.vaddr, r.pages * PAGE_SIZE as u64));
    }
    Ok(EnclaveSpec {
        enclave_pages,
        lazy_pages: e.lazy_pages.iter().flat_map(|r| r.vpns()).collect(),
        cbp_vpn,
        dbps,
        signal_handler: e.signal_handler.map(|a| a.0),
        syscall_exit: e.syscall_exit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema": "dpti-scenario/1",
        "name": "minimal",
        "processes": [{"name": "p", "threads": [{"ops": [{"op": "exit", "code": 0}]}]}]
    }"#;

    #[test]
    fn minimal_parses_with_defaults() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        assert_eq!(s.variant, Variant::Stash);
        assert_eq!(s.cores, 2);
        assert_eq!(s.schedule, ScheduleMode::Seeded { seed: 0 });
        let k = Kernel::from_scenario(&s).unwrap();
        assert_eq!(k.runnable(), vec![1]);
    }

    #[test]
    fn unknown_key_reports_position() {
        let text = MINIMAL.replace("\"name\": \"minimal\"", "\"name\": \"minimal\",\n \"colour\": 1");
        match Scenario::from_json(&text) {
            Err(ScenarioError::Parse { line, message, .. }) => {
                assert_eq!(line, 4);
                assert!(message.contains("colour"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_mismatch() {
        let text = MINIMAL.replace("dpti-scenario/1", "dpti-scenario/0");
        assert!(matches!(Scenario::from_json(&text), Err(ScenarioError::Schema { .. })));
        let text = MINIMAL.replace("\"schema\": \"dpti-scenario/1\",", "");
        assert!(matches!(Scenario::from_json(&text), Err(ScenarioError::Invalid(_))));
    }

    #[test]
    fn unknown_program_rejected() {
        let text = MINIMAL.replace(r#"{"op": "exit", "code": 0}"#, r#"{"op": "fork", "program": "nope"}"#);
        assert!(matches!(Scenario::from_json(&text), Err(ScenarioError::Invalid(_))));
    }

    #[test]
    fn echo_round_trips() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        let again = Scenario::from_json(&s.to_json()).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn bounds() {
        let b = Bounds { min: Some(1), max: None };
        assert!(!b.contains(0) && b.contains(7));
        assert_eq!(Bounds { min: Some(0), max: Some(0) }.to_string(), "exactly 0");
    }
}
