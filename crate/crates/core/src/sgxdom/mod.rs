// SPDX-License-Identifier: Apache-2.0

//! Confinement of an untrusted enclave inside its host process.
//!
//! Threads running enclave code switch to an isolated address space that
//! contains the enclave pages, one executable Code Bridge Page (CBP) and the
//! Data Bridge Pages (DBPs). With Stash, nothing else of the host is mapped.
//! With Freeze, the rest of the host is mapped read-only and non-executable.
//!
//! Leaving the isolated mapping is only possible by jumping to the first
//! byte after the CBP (a fetch fault the driver recognizes) or, with the
//! syscall-exit optimization, through the driver syscall at the end of the
//! CBP.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::Work;
use crate::dpti::Variant;
use crate::events::{Event, KillCause};
use crate::tasks::{CpuState, InFlight, Kernel, Pid, Step, Tid};
use crate::vmem::{
    page_base, page_offset, vpn_of, AccessKind, Asid, FaultReason, Memory, Mode, PageFault, Perms,
    PteBit, VmError, VmFlags, Vpn, PAGE_SIZE,
};
use crate::wire::{hex_u64, Bytes};

pub mod cbp;

use cbp::Landing;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SgxError {
    #[error("data bridge region {addr:#x}+{len:#x} is not page-aligned and page-padded")]
    UnalignedDbp { addr: u64, len: u64 },
    #[error("page {0:#x} is both an enclave page and a bridge page")]
    OverlapWithEnclave(Vpn),
    #[error("bridge page {0:#x} is not mapped in the host")]
    BridgeNotMapped(Vpn),
    #[error("enclave page {0:#x} directly follows the code bridge page")]
    EnclaveAfterCbp(Vpn),
    #[error("isolation requires the stash or freeze variant")]
    NoVariant,
    #[error(transparent)]
    Vm(#[from] VmError),
}

/// Static description of an enclave inside its host.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EnclaveSpec {
    /// Enclave pages already mapped in the host.
    pub enclave_pages: Vec<Vpn>,
    /// Enclave pages mapped on first touch.
    pub lazy_pages: Vec<Vpn>,
    pub cbp_vpn: Vpn,
    /// Data bridge regions as (address, length).
    pub dbps: Vec<(u64, u64)>,
    pub signal_handler: Option<u64>,
    pub syscall_exit: bool,
}

/// Per-thread state saved when entering the enclave.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SavedContext {
    /// Host registers before entry.
    pub host: CpuState,
    /// Registers at entry after aligning the stack pointer.
    pub entry: CpuState,
    /// Stack pages below the aligned stack pointer.
    pub stack_vpns: Vec<Vpn>,
    pub in_ocall: bool,
}

#[derive(Clone, Debug)]
pub struct EnclaveDomain {
    pub host_pid: Pid,
    pub host_as: Asid,
    pub isolated_as: Asid,
    /// `None` runs the enclave unconfined, in the host mapping.
    pub variant: Variant,
    pub enclave_pages: BTreeSet<Vpn>,
    pub lazy_pages: BTreeSet<Vpn>,
    pub cbp_vpn: Vpn,
    pub dbp_vpns: BTreeSet<Vpn>,
    pub signal_handler: Option<u64>,
    pub syscall_exit: bool,
    pub saved: BTreeMap<Tid, SavedContext>,
}

impl EnclaveDomain {
    pub fn cbp_base(&self) -> u64 {
        page_base(self.cbp_vpn)
    }

    /// First byte after the CBP; fetching it is the legal exit.
    pub fn cbp_end(&self) -> u64 {
        page_base(self.cbp_vpn + 1)
    }

    /// The exit address a well-behaved enclave passes in RBX.
    pub fn exit_target(&self) -> u64 {
        if self.syscall_exit {
            self.cbp_base() + cbp::PROLOGUE_START as u64
        } else {
            self.cbp_end()
        }
    }

    pub fn confined(&self) -> bool {
        self.variant.is_protecting()
    }

    fn permitted_stacks(&self) -> BTreeSet<Vpn> {
        self.saved.values().filter(|s| !s.in_ocall).flat_map(|s| s.stack_vpns.iter().copied()).collect()
    }

    /// Pages the enclave may legitimately write while confined.
    pub fn writable_vpns(&self) -> BTreeSet<Vpn> {
        let mut set: BTreeSet<Vpn> = self.enclave_pages.union(&self.dbp_vpns).copied().collect();
        set.extend(self.permitted_stacks());
        set
    }
}

/// Builds the isolated mapping for an enclave hosted in `host_as`.
pub fn build_isolated_mapping(
    mem: &mut Memory,
    host_pid: Pid,
    host_as: Asid,
    spec: &EnclaveSpec,
    variant: Variant,
) -> Result<EnclaveDomain, SgxError> {
    let enclave: BTreeSet<Vpn> = spec.enclave_pages.iter().chain(&spec.lazy_pages).copied().collect();
    let mut dbp_vpns = BTreeSet::new();
    for &(addr, len) in &spec.dbps {
        if page_offset(addr) != 0 || len == 0 || len % PAGE_SIZE as u64 != 0 {
            return Err(SgxError::UnalignedDbp { addr, len });
        }
        for vpn in vpn_of(addr)..vpn_of(addr + len) {
            dbp_vpns.insert(vpn);
        }
    }
    for &vpn in dbp_vpns.iter().chain(std::iter::once(&spec.cbp_vpn)) {
        if enclave.contains(&vpn) {
            return Err(SgxError::OverlapWithEnclave(vpn));
        }
        if mem.pte(host_as, vpn).is_none() {
            return Err(SgxError::BridgeNotMapped(vpn));
        }
    }
    if enclave.contains(&(spec.cbp_vpn + 1)) {
        return Err(SgxError::EnclaveAfterCbp(spec.cbp_vpn + 1));
    }
    let isolated_as = mem.create_space();
    mem.set_vma_source(isolated_as, Some(host_as))?;
    let domain = EnclaveDomain {
        host_pid,
        host_as,
        isolated_as,
        variant,
        enclave_pages: spec.enclave_pages.iter().copied().collect(),
        lazy_pages: spec.lazy_pages.iter().copied().collect(),
        cbp_vpn: spec.cbp_vpn,
        dbp_vpns,
        signal_handler: spec.signal_handler,
        syscall_exit: spec.syscall_exit,
        saved: BTreeMap::new(),
    };
    if variant.is_protecting() {
        sync_isolated(mem, &domain)?;
    }
    Ok(domain)
}

/// Brings the isolated mapping up to date with the host: adds enclave and
/// bridge pages, and under Freeze a read-only view of every other page.
fn sync_isolated(mem: &mut Memory, d: &EnclaveDomain) -> Result<(), SgxError> {
    let host: Vec<(Vpn, crate::vmem::Pte)> = match mem.space(d.host_as) {
        Some(s) => s.entries.iter().map(|(&v, &p)| (v, p)).collect(),
        None => return Ok(()),
    };
    for (vpn, pte) in host {
        if mem.pte(d.isolated_as, vpn).is_some() {
            continue;
        }
        let perms = if d.enclave_pages.contains(&vpn) {
            pte.perms()
        } else if vpn == d.cbp_vpn {
            Perms::USER_RX
        } else if d.dbp_vpns.contains(&vpn) {
            Perms::USER_RW
        } else if d.variant == Variant::Freeze {
            Perms::USER_RO
        } else {
            continue;
        };
        mem.map_with_flags(d.isolated_as, vpn, pte.frame, perms, VmFlags::default())?;
    }
    Ok(())
}

/// Outcome of an EEXIT.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    LegalExit(ExitPath),
    Kill(KillCause),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitPath {
    /// Fetch fault on the first byte after the CBP.
    Fault,
    /// Driver syscall at the end of the CBP.
    Syscall,
    /// A stat syscall ran, then the exit fault.
    StatThenFault,
    /// No isolation configured; the exit is an ordinary EEXIT.
    Unconfined,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultOrigin {
    /// Data access by enclave code.
    EnclaveAccess,
    /// Instruction fetch right after EEXIT.
    Eexit,
    /// Signal delivery after an asynchronous exit.
    Aex,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsolatedFault {
    LegalExit,
    Kill,
    EnclaveLazyMap,
    Deliver,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitKind {
    #[default]
    Return,
    Ocall,
}

/// One step of scripted enclave code.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnclaveOp {
    Read {
        #[serde(with = "hex_u64")]
        vaddr: u64,
        len: usize,
    },
    Write {
        #[serde(with = "hex_u64")]
        vaddr: u64,
        bytes: Bytes,
    },
    SetRsp {
        #[serde(with = "hex_u64")]
        value: u64,
    },
    SetRbp {
        #[serde(with = "hex_u64")]
        value: u64,
    },
    /// EEXIT to `target`; without one the enclave uses the proper exit.
    Eexit {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<crate::wire::Addr>,
        #[serde(default)]
        kind: ExitKind,
    },
    /// An interrupt or exception causing an asynchronous exit.
    Exception,
}

/// An ECALL in progress.
#[derive(Clone, Debug)]
pub struct EnclaveRun {
    pub script: Arc<[EnclaveOp]>,
    pub ip: usize,
    pub in_ocall: bool,
    pub work: Work,
}

impl Kernel {
    /// Sets up confinement for an enclave living in process `pid`.
    pub fn attach_enclave(&mut self, pid: Pid, spec: &EnclaveSpec) -> Result<(), SgxError> {
        let host_as = self.procs.get(&pid).map(|p| p.asid).ok_or(SgxError::NoVariant)?;
        let variant = self.config.variant;
        let domain = build_isolated_mapping(&mut self.mem, pid, host_as, spec, variant)?;
        self.enclave = Some(domain);
        Ok(())
    }

    /// Switches `tid` into the isolated mapping and records its registers.
    pub fn enter_isolation(&mut self, tid: Tid, work: &mut Work) -> Result<(), KillCause> {
        let task = self.tasks.get(&tid).ok_or(KillCause::IllegalEnclaveAccess)?;
        let (cpu, stack) = (task.cpu, task.stack);
        let domain = self.enclave.as_ref().ok_or(KillCause::IllegalEnclaveAccess)?;
        if task.pid != domain.host_pid || task.asid != domain.host_as {
            return Err(KillCause::IllegalEnclaveAccess);
        }
        let aligned = cpu.rsp & !(PAGE_SIZE as u64 - 1);
        let stack_vpns: Vec<Vpn> = match stack {
            Some((lo, hi)) => (lo..vpn_of(aligned).min(hi + 1)).collect(),
            None => Vec::new(),
        };
        let entry = CpuState { rsp: aligned, ..cpu };
        let confined = domain.confined();
        let isolated = domain.isolated_as;
        self.enclave.as_mut().expect("checked").saved.insert(
            tid,
            SavedContext { host: cpu, entry, stack_vpns: stack_vpns.clone(), in_ocall: false },
        );
        let task = self.tasks.get_mut(&tid).expect("checked");
        task.cpu = entry;
        if confined {
            self.add_stack(&stack_vpns);
            let _ = sync_isolated(&mut self.mem, self.enclave.as_ref().expect("checked"));
            self.tasks.get_mut(&tid).expect("checked").asid = isolated;
            work.enclave_enters += 1;
        }
        Ok(())
    }

    fn add_stack(&mut self, vpns: &[Vpn]) {
        let Some(d) = &self.enclave else { return };
        let (host, iso, variant) = (d.host_as, d.isolated_as, d.variant);
        for &vpn in vpns {
            let Some(pte) = self.mem.pte(host, vpn).copied() else { continue };
            match self.mem.pte(iso, vpn).copied() {
                Some(_) => {
                    let _ = self.mem.set_bit(iso, vpn, PteBit::Writable, true);
                }
                None => {
                    let _ = self.mem.map_with_flags(iso, vpn, pte.frame, Perms::USER_RW, VmFlags::default());
                }
            }
            self.mem.flush_all_cores(iso, vpn);
        }
        let _ = variant;
    }

    fn remove_stack(&mut self, vpns: &[Vpn]) {
        let Some(d) = &self.enclave else { return };
        let (iso, variant) = (d.isolated_as, d.variant);
        let still_permitted = d.permitted_stacks();
        for &vpn in vpns {
            if still_permitted.contains(&vpn) || self.mem.pte(iso, vpn).is_none() {
                continue;
            }
            match variant {
                Variant::Freeze => {
                    let _ = self.mem.set_bit(iso, vpn, PteBit::Writable, false);
                    self.mem.flush_all_cores(iso, vpn);
                }
                _ => {
                    let _ = self.mem.unmap(iso, vpn);
                }
            }
        }
    }

    /// Leaves the isolated mapping after a legal exit.
    pub fn exit_isolation(&mut self, tid: Tid, kind: ExitKind, work: &mut Work) -> Result<(), KillCause> {
        let domain = self.enclave.as_ref().ok_or(KillCause::IllegalEexit)?;
        let saved = domain.saved.get(&tid).cloned().ok_or(KillCause::IllegalEexit)?;
        let (confined, host) = (domain.confined(), domain.host_as);
        let cpu = self.tasks.get(&tid).ok_or(KillCause::IllegalEexit)?.cpu;
        match kind {
            ExitKind::Return => {
                if confined && (cpu.rsp != saved.entry.rsp || cpu.rbp != saved.entry.rbp) {
                    return Err(KillCause::StackTamper);
                }
                self.enclave.as_mut().expect("checked").saved.remove(&tid);
                if confined {
                    self.remove_stack(&saved.stack_vpns);
                }
                let task = self.tasks.get_mut(&tid).expect("checked");
                task.cpu = saved.host;
                task.asid = host;
            }
            ExitKind::Ocall => {
                if confined && cpu.rsp > saved.entry.rsp {
                    return Err(KillCause::StackTamper);
                }
                if let Some(s) = self.enclave.as_mut().expect("checked").saved.get_mut(&tid) {
                    s.in_ocall = true;
                }
                if confined {
                    self.remove_stack(&saved.stack_vpns);
                    work.ocall_stack_toggles += 1;
                }
                self.tasks.get_mut(&tid).expect("checked").asid = host;
            }
        }
        Ok(())
    }

    fn resume_from_ocall(&mut self, tid: Tid, work: &mut Work) {
        let Some(domain) = self.enclave.as_mut() else { return };
        let Some(saved) = domain.saved.get_mut(&tid) else { return };
        saved.in_ocall = false;
        let vpns = saved.stack_vpns.clone();
        let (confined, iso) = (domain.confined(), domain.isolated_as);
        if confined {
            self.add_stack(&vpns);
            if let Some(t) = self.tasks.get_mut(&tid) {
                t.asid = iso;
            }
            work.enclave_enters += 1;
        }
    }

    /// Classifies a fault raised while a thread runs on the isolated mapping.
    pub fn on_isolated_fault(&self, fault: &PageFault, origin: FaultOrigin) -> IsolatedFault {
        let Some(d) = &self.enclave else { return IsolatedFault::Kill };
        let vpn = fault.vpn();
        if origin == FaultOrigin::EnclaveAccess
            && fault.reason == FaultReason::NotPresent
            && d.lazy_pages.contains(&vpn)
        {
            return IsolatedFault::EnclaveLazyMap;
        }
        if origin == FaultOrigin::Eexit && fault.kind == AccessKind::Exec && fault.vaddr == d.cbp_end() {
            return IsolatedFault::LegalExit;
        }
        if origin == FaultOrigin::Aex
            && fault.kind == AccessKind::Exec
            && d.signal_handler.map(vpn_of) == Some(vpn)
        {
            return IsolatedFault::Deliver;
        }
        IsolatedFault::Kill
    }

    /// Executes EEXIT with RBX = `target` and classifies where it leads.
    pub fn eexit(&mut self, tid: Tid, target: u64) -> Transition {
        let Some(task) = self.tasks.get_mut(&tid) else { return Transition::Kill(KillCause::IllegalEexit) };
        task.cpu.rax = 4;
        task.cpu.rbx = target;
        let core = task.core;
        let Some(d) = &self.enclave else { return Transition::Kill(KillCause::IllegalEexit) };
        if !d.confined() {
            return Transition::LegalExit(ExitPath::Unconfined);
        }
        if vpn_of(target) == d.cbp_vpn {
            return match cbp::landing(page_offset(target), d.syscall_exit) {
                Landing::ExitFault => Transition::LegalExit(ExitPath::Fault),
                Landing::DriverSyscall => Transition::LegalExit(ExitPath::Syscall),
                Landing::StatThenExitFault => Transition::LegalExit(ExitPath::StatThenFault),
                Landing::InvalidEnclu => Transition::Kill(KillCause::IllegalEexit),
            };
        }
        let iso = d.isolated_as;
        match self.mem.access(core, iso, Mode::User, AccessKind::Exec, target) {
            // Executable and mapped but not the CBP: enclave code reached
            // from outside enclave mode.
            Ok(_) => Transition::Kill(KillCause::IllegalEexit),
            Err(fault) => match self.on_isolated_fault(&fault, FaultOrigin::Eexit) {
                IsolatedFault::LegalExit => Transition::LegalExit(ExitPath::Fault),
                _ => Transition::Kill(KillCause::IllegalEexit),
            },
        }
    }

    pub(crate) fn ecall_start(&mut self, tid: Tid, script: &str) -> Step {
        let Some(ops) = self.scripts.get(script).cloned() else {
            return Step::Done(format!("unknown script {script}"));
        };
        if self.enclave.is_none() {
            return Step::Done("no enclave".into());
        }
        let mut work = Work { ecalls: 1, ..Work::default() };
        if let Err(cause) = self.enter_isolation(tid, &mut work) {
            self.kill(tid, cause);
            return Step::Killed(cause.as_str().into());
        }
        let run = EnclaveRun { script: ops, ip: 0, in_ocall: false, work };
        if let Some(t) = self.tasks.get_mut(&tid) {
            t.inflight = Some(InFlight::Enclave(Box::new(run)));
        }
        Step::Pending(format!("enter {script}"))
    }

    fn enclave_event(&mut self, tid: Tid, what: String, work: Work) {
        let step = self.step;
        self.emit(Event::Enclave { step, tid, what, work });
    }

    fn enclave_kill(&mut self, tid: Tid, run: EnclaveRun, cause: KillCause, what: String) -> Step {
        self.enclave_event(tid, what.clone(), run.work);
        self.kill(tid, cause);
        Step::Killed(format!("{} ({what})", cause.as_str()))
    }

    pub(crate) fn enclave_step(&mut self, tid: Tid, mut run: EnclaveRun) -> Step {
        if run.in_ocall {
            run.in_ocall = false;
            self.resume_from_ocall(tid, &mut run.work);
            return self.park(tid, run, "ocall returned".into());
        }
        let op = match run.script.get(run.ip) {
            Some(op) => op.clone(),
            None => EnclaveOp::Eexit { target: None, kind: ExitKind::Return },
        };
        run.ip += 1;
        match op {
            EnclaveOp::Read { vaddr, len } => match self.enclave_access(tid, vaddr, len, None) {
                Ok(_) => self.park(tid, run, format!("read {vaddr:#x}")),
                Err(text) => self.enclave_kill(tid, run, KillCause::IllegalEnclaveAccess, text),
            },
            EnclaveOp::Write { vaddr, bytes } => {
                match self.enclave_access(tid, vaddr, bytes.0.len(), Some(bytes.as_slice())) {
                    Ok(_) => self.park(tid, run, format!("write {vaddr:#x}")),
                    Err(text) => self.enclave_kill(tid, run, KillCause::IllegalEnclaveAccess, text),
                }
            }
            EnclaveOp::SetRsp { value } => {
                if let Some(t) = self.tasks.get_mut(&tid) {
                    t.cpu.rsp = value;
                }
                self.park(tid, run, format!("rsp={value:#x}"))
            }
            EnclaveOp::SetRbp { value } => {
                if let Some(t) = self.tasks.get_mut(&tid) {
                    t.cpu.rbp = value;
                }
                self.park(tid, run, format!("rbp={value:#x}"))
            }
            EnclaveOp::Exception => {
                let outcome = self.deliver_signal(tid);
                match outcome {
                    IsolatedFault::Deliver | IsolatedFault::LegalExit => {
                        self.park(tid, run, "exception handled".into())
                    }
                    _ => self.enclave_kill(tid, run, KillCause::IllegalEnclaveAccess, "signal".into()),
                }
            }
            EnclaveOp::Eexit { target, kind } => {
                let target = match (target, &self.enclave) {
                    (Some(t), _) => t.0,
                    (None, Some(d)) => d.exit_target(),
                    (None, None) => 0,
                };
                let transition = self.eexit(tid, target);
                let path = match transition {
                    Transition::LegalExit(path) => path,
                    Transition::Kill(cause) => {
                        return self.enclave_kill(tid, run, cause, format!("eexit {target:#x}"));
                    }
                };
                match path {
                    ExitPath::Fault => run.work.fault_exits += 1,
                    ExitPath::Syscall => run.work.syscall_exits += 1,
                    ExitPath::StatThenFault => {
                        run.work.fault_exits += 1;
                        let step = self.step;
                        self.emit(Event::Stat { step, tid });
                    }
                    ExitPath::Unconfined => {}
                }
                if kind == ExitKind::Ocall {
                    run.work.ocalls += 1;
                }
                if let Err(cause) = self.exit_isolation(tid, kind, &mut run.work) {
                    return self.enclave_kill(tid, run, cause, format!("exit {kind:?}"));
                }
                match kind {
                    ExitKind::Ocall => {
                        run.in_ocall = true;
                        self.park(tid, run, format!("ocall via {path:?}"))
                    }
                    ExitKind::Return => {
                        self.enclave_event(tid, format!("ecall return via {path:?}"), run.work);
                        Step::Done(format!("returned via {path:?}"))
                    }
                }
            }
        }
    }

    fn park(&mut self, tid: Tid, run: EnclaveRun, text: String) -> Step {
        if let Some(t) = self.tasks.get_mut(&tid) {
            t.inflight = Some(InFlight::Enclave(Box::new(run)));
        }
        Step::Pending(text)
    }

    /// Data access by enclave code; `write` carries the bytes for a store.
    fn enclave_access(&mut self, tid: Tid, vaddr: u64, len: usize, write: Option<&[u8]>) -> Result<(), String> {
        let kind = if write.is_some() { AccessKind::Write } else { AccessKind::Read };
        loop {
            let (core, asid) = match self.tasks.get(&tid) {
                Some(t) => (t.core, t.asid),
                None => return Err("no task".into()),
            };
            let result = match write {
                Some(bytes) => self.mem.write_bytes(core, asid, Mode::User, vaddr, bytes),
                None => self.mem.read_bytes(core, asid, Mode::User, vaddr, len).map(|_| Vec::new()),
            };
            match result {
                Ok(frames) => {
                    if write.is_some() {
                        self.check_write_confinement(tid, vaddr, len, &frames);
                    }
                    return Ok(());
                }
                Err(fault) => match self.on_isolated_fault(&fault, FaultOrigin::EnclaveAccess) {
                    IsolatedFault::EnclaveLazyMap => self.lazy_map(tid, fault.vpn())?,
                    _ if fault.reason == FaultReason::CowPending => {
                        self.mem.cow_resolve(fault.asid, fault.vpn()).map_err(|e| e.to_string())?;
                    }
                    _ => return Err(format!("{kind:?} {:?} at {:#x}", fault.reason, fault.vaddr)),
                },
            }
        }
    }

    fn lazy_map(&mut self, tid: Tid, vpn: Vpn) -> Result<(), String> {
        let frame = self.mem.alloc_frame();
        let d = self.enclave.as_mut().ok_or("no enclave")?;
        d.lazy_pages.remove(&vpn);
        d.enclave_pages.insert(vpn);
        let (host, iso, confined) = (d.host_as, d.isolated_as, d.confined());
        let flags = VmFlags { vm_write: true, vm_exec: false, shared: false };
        self.mem.map_with_flags(host, vpn, frame, Perms::USER_RW, flags).map_err(|e| e.to_string())?;
        if confined {
            self.mem.map_with_flags(iso, vpn, frame, Perms::USER_RW, flags).map_err(|e| e.to_string())?;
        }
        self.enclave_event(tid, format!("lazy map {vpn:#x}"), Work::default());
        Ok(())
    }

    fn check_write_confinement(&mut self, tid: Tid, vaddr: u64, len: usize, _frames: &[crate::vmem::FrameId]) {
        let Some(d) = &self.enclave else { return };
        if !d.confined() {
            return;
        }
        let allowed = d.writable_vpns();
        let last = vpn_of(vaddr + len.max(1) as u64 - 1);
        for vpn in vpn_of(vaddr)..=last {
            if !allowed.contains(&vpn) {
                self.violation(format!("enclave thread t{tid} wrote host page {vpn:#x} outside its bridges"));
            }
        }
    }

    /// Asynchronous exit followed by signal delivery to the host handler.
    fn deliver_signal(&mut self, tid: Tid) -> IsolatedFault {
        let Some(d) = &self.enclave else { return IsolatedFault::Kill };
        let Some(handler) = d.signal_handler else { return IsolatedFault::Deliver };
        if !d.confined() {
            return IsolatedFault::Deliver;
        }
        let iso = d.isolated_as;
        let core = self.tasks.get(&tid).map(|t| t.core).unwrap_or(0);
        match self.mem.access(core, iso, Mode::User, AccessKind::Exec, handler) {
            Ok(_) => IsolatedFault::Kill,
            Err(fault) => self.on_isolated_fault(&fault, FaultOrigin::Aex),
        }
    }

    /// Bytes that are non-zero in a thread's stack below its current stack
    /// pointer; stale data there is visible to the enclave.
    pub fn stale_stack_bytes(&self, tid: Tid) -> usize {
        let Ok(task) = self.task(tid) else { return 0 };
        let Some((lo, _)) = task.stack else { return 0 };
        let aligned = task.cpu.rsp & !(PAGE_SIZE as u64 - 1);
        let start = page_base(lo);
        if aligned <= start {
            return 0;
        }
        self.mem
            .peek(task.asid, start, (aligned - start) as usize)
            .map(|b| b.iter().filter(|&&x| x != 0).count())
            .unwrap_or(0)
    }
}
