// SPDX-License-Identifier: Apache-2.0

//! Syscall dispatch with deep argument filtering.
//!
//! A syscall from a sandboxed task is looked up in the task's filter table.
//! Unlisted syscalls are rejected, plainly allowed ones run directly, and
//! syscalls with string filters run in three scheduler steps:
//!
//! 1. protect the argument pages and compare the string,
//! 2. run the syscall body, which fetches the argument again,
//! 3. restore the page permissions.
//!
//! While a page is protected, user-mode access to it (Stash) or user-mode
//! writes to it (Freeze) fault and the faulting thread is stalled until the
//! page is restored.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::costmodel::Work;
use crate::events::{show_bytes, Event, FilterCase, KillCause, SyscallOutcome, Witness};
use crate::filters::{FilterRule, SeccompAction, MAX_ARGS};
use crate::syscalls;
use crate::tasks::{
    Engine, InFlight, Kernel, Pid, Step, ThreadOp, Tid, ViolationAction, WaitReason, PROT_EXEC,
    PROT_WRITE,
};
use crate::vmem::{
    page_offset, vpn_of, Asid, FaultReason, FrameId, Memory, PageFault, Perms, Pte, PteBit, Vpn,
    PAGE_SIZE,
};

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No protection: filters still run but argument pages stay writable.
    None,
    /// Clear the user bit, making the page a kernel page.
    #[default]
    Stash,
    /// Clear the writable bit and the VMA write flag.
    Freeze,
}

impl Variant {
    pub fn is_protecting(self) -> bool {
        self != Variant::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Stash => "stash",
            Variant::Freeze => "freeze",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Variant::None),
            "stash" => Ok(Variant::Stash),
            "freeze" => Ok(Variant::Freeze),
            other => Err(format!("unknown variant {other:?} (expected stash, freeze or none)")),
        }
    }
}

pub type RecordId = u64;

/// Permission state of one mapping before it was protected.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingPrior {
    pub asid: Asid,
    pub vpn: Vpn,
    pub user: bool,
    pub writable: bool,
    pub executable: bool,
    pub vm_write: bool,
}

/// Protection state of one frame, shared by every record holding it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameGuard {
    pub variant: Variant,
    pub priors: Vec<MappingPrior>,
    pub holders: BTreeSet<RecordId>,
}

/// Pages one syscall protected for one string argument.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtectionRecord {
    pub id: RecordId,
    pub tid: Tid,
    pub pid: Pid,
    pub nr: u32,
    pub variant: Variant,
    pub frames: Vec<FrameId>,
}

#[derive(Clone, Debug, Default)]
pub struct ProtectionRegistry {
    frames: BTreeMap<FrameId, FrameGuard>,
    records: BTreeMap<RecordId, ProtectionRecord>,
}

impl ProtectionRegistry {
    pub fn is_protected(&self, frame: FrameId) -> bool {
        self.frames.contains_key(&frame)
    }

    pub fn guard(&self, frame: FrameId) -> Option<&FrameGuard> {
        self.frames.get(&frame)
    }

    pub fn guards(&self) -> Vec<(FrameId, FrameGuard)> {
        self.frames.iter().map(|(&f, g)| (f, g.clone())).collect()
    }

    pub fn record(&self, id: RecordId) -> Option<&ProtectionRecord> {
        self.records.get(&id)
    }

    pub fn records(&self) -> impl Iterator<Item = &ProtectionRecord> {
        self.records.values()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty() && self.records.is_empty()
    }

    fn prior_for(&self, frame: FrameId, asid: Asid, vpn: Vpn) -> Option<&MappingPrior> {
        self.frames.get(&frame)?.priors.iter().find(|p| p.asid == asid && p.vpn == vpn)
    }

    /// Pages of `asid` that are write-protected only temporarily.
    pub(crate) fn writable_priors(&self, asid: Asid) -> BTreeSet<Vpn> {
        self.frames
            .values()
            .flat_map(|g| g.priors.iter())
            .filter(|p| p.asid == asid && p.writable)
            .map(|p| p.vpn)
            .collect()
    }

    /// A forked child inherits protected mappings; record their priors so
    /// restore also covers the child.
    pub(crate) fn extend_to_fork(&mut self, parent: Asid, child: Asid) {
        for guard in self.frames.values_mut() {
            let extra: Vec<MappingPrior> = guard
                .priors
                .iter()
                .filter(|p| p.asid == parent)
                .map(|p| MappingPrior { asid: child, ..*p })
                .collect();
            guard.priors.extend(extra);
        }
    }

    /// Permissions a mapping has once all protection is lifted.
    pub fn effective_perms(&self, asid: Asid, vpn: Vpn, pte: &Pte, _mem: &Memory) -> Perms {
        match self.prior_for(pte.frame, asid, vpn) {
            Some(p) => Perms { user: p.user, writable: p.writable, executable: p.executable },
            None => pte.perms(),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PreemptionPoint {
    PreCheck,
    PostCheck,
    PreRestore,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyscallContext {
    pub tid: Tid,
    pub nr: u32,
    pub args: [u64; MAX_ARGS],
    pub point: PreemptionPoint,
}

/// Result of a syscall body.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) enum Body {
    Ret(i64),
    /// Returned and repositioned the caller's program (exec with a new
    /// program).
    Jumped(i64),
    Stall(WaitReason),
}

/// A string-filtered syscall between its check and its restore.
#[derive(Clone, Debug)]
pub struct PendingSyscall {
    pub ctx: SyscallContext,
    pub op: ThreadOp,
    pub records: Vec<RecordId>,
    /// Argument index and the bytes the filter compared.
    pub checked: Vec<(u8, Vec<u8>)>,
    pub work: Work,
    pub(crate) result: Option<Body>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum FaultDecision {
    /// The fault was resolved (copy-on-write); retry the access.
    Retry,
    Stall(FrameId),
    Kill,
    /// An ordinary fault delivered to the process.
    Deliver,
}

const EFAULT: i64 = -14;
const ENOMEM: i64 = -12;
const EEXIST: i64 = -17;
const ENOENT: i64 = -2;
const EAGAIN: i64 = -11;

impl Kernel {
    /// Entry point for every syscall-issuing op.
    pub(crate) fn start_syscall(&mut self, tid: Tid, op: ThreadOp, nr: u32, args: [u64; MAX_ARGS]) -> Step {
        let mut work = Work::syscall(nr);
        let ctx = SyscallContext { tid, nr, args, point: PreemptionPoint::PreCheck };
        if nr == syscalls::EXIT || nr == syscalls::EXIT_GROUP {
            return self.run_single(tid, op, ctx, FilterCase::Exempt, work);
        }
        let Some(fid) = self.process_of(tid).ok().and_then(|p| p.filters) else {
            return self.run_single(tid, op, ctx, FilterCase::Unfiltered, work);
        };
        if self.config.engine == Engine::Seccomp {
            if let Some(program) = &self.seccomp[fid] {
                let verdict = program.eval(nr, &args);
                work.seccomp_evals += 1;
                work.seccomp_rules_scanned += verdict.scanned as u64;
                return match verdict.action {
                    SeccompAction::Deny => {
                        self.deny(tid, ctx, FilterCase::Seccomp, KillCause::UnregisteredSyscall, work)
                    }
                    SeccompAction::Allow => self.run_single(tid, op, ctx, FilterCase::Seccomp, work),
                };
            }
        }
        work.filter_lookups += 1;
        let rule = self.filters[fid].lookup(nr).clone();
        let strings: Vec<(u8, Vec<Vec<u8>>)> =
            rule.string_filters().into_iter().map(|(i, s)| (i, s.to_vec())).collect();
        match rule {
            FilterRule::Deny => {
                self.deny(tid, ctx, FilterCase::NotAllowed, KillCause::UnregisteredSyscall, work)
            }
            FilterRule::Allow => self.run_single(tid, op, ctx, FilterCase::Allowed, work),
            FilterRule::AllowIf(_) if !rule.primitives_pass(&args) => {
                self.deny(tid, ctx, FilterCase::AllowedWithArgs, KillCause::FilterViolation, work)
            }
            FilterRule::AllowIf(_) if strings.is_empty() => {
                self.run_single(tid, op, ctx, FilterCase::AllowedWithArgs, work)
            }
            FilterRule::AllowIf(_) => self.check_phase(tid, op, ctx, strings, work),
        }
    }

    fn check_phase(
        &mut self,
        tid: Tid,
        op: ThreadOp,
        ctx: SyscallContext,
        strings: Vec<(u8, Vec<Vec<u8>>)>,
        work: Work,
    ) -> Step {
        let mut pending = PendingSyscall { ctx, op, records: Vec::new(), checked: Vec::new(), work, result: None };
        for (idx, allowed) in strings {
            let ptr = pending.ctx.args[idx as usize];
            let fetched = if self.config.variant.is_protecting() {
                match self.protect_argument(tid, ptr, pending.ctx.nr, &mut pending.work) {
                    Ok((rid, bytes)) => {
                        pending.records.push(rid);
                        bytes
                    }
                    Err(cause) => return self.fail_pending(tid, pending, cause),
                }
            } else {
                match self.fetch_cstr(tid, ptr) {
                    Ok(bytes) => bytes,
                    Err(cause) => return self.fail_pending(tid, pending, cause),
                }
            };
            let ok = check_string(&fetched, &allowed, &mut pending.work);
            let shown = show_bytes(&fetched);
            pending.checked.push((idx, fetched));
            if !ok {
                let _ = shown;
                return self.fail_pending(tid, pending, KillCause::FilterViolation);
            }
        }
        let shown: Vec<String> = pending.checked.iter().map(|(_, b)| format!("{:?}", show_bytes(b))).collect();
        pending.ctx.point = PreemptionPoint::PostCheck;
        self.set_inflight(tid, pending);
        Step::Pending(format!("checked {}", shown.join(",")))
    }

    fn set_inflight(&mut self, tid: Tid, pending: PendingSyscall) {
        if let Some(t) = self.tasks.get_mut(&tid) {
            t.inflight = Some(InFlight::Syscall(Box::new(pending)));
        }
    }

    fn fail_pending(&mut self, tid: Tid, mut pending: PendingSyscall, cause: KillCause) -> Step {
        for rid in std::mem::take(&mut pending.records) {
            let _ = self.restore_record(rid, true, &mut pending.work);
        }
        self.deny(tid, pending.ctx, FilterCase::AllowedWithArgs, cause, pending.work)
    }

    /// A filter rejected the call: kill or return an error per config.
    fn deny(&mut self, tid: Tid, ctx: SyscallContext, case: FilterCase, cause: KillCause, work: Work) -> Step {
        let step = self.step;
        match self.config.on_violation {
            ViolationAction::Kill => {
                let outcome = SyscallOutcome::Killed(cause);
                self.emit(Event::Syscall { step, tid, nr: ctx.nr, case, outcome, work });
                self.kill(tid, cause);
                Step::Killed(cause.as_str().to_string())
            }
            ViolationAction::Errno => {
                let outcome = SyscallOutcome::Denied;
                self.emit(Event::Syscall { step, tid, nr: ctx.nr, case, outcome, work });
                Step::Done(format!("denied ({})", cause.as_str()))
            }
        }
    }

    fn run_single(&mut self, tid: Tid, op: ThreadOp, ctx: SyscallContext, case: FilterCase, mut work: Work) -> Step {
        let step = self.step;
        if let ThreadOp::Exit { code, group } = op {
            let outcome = SyscallOutcome::Executed(0);
            self.emit(Event::Syscall { step, tid, nr: ctx.nr, case, outcome, work });
            self.exit(tid, code, group);
            return Step::Jumped(format!("exit {code}"));
        }
        if let ThreadOp::Syscall { nr, args } = op {
            if nr.0 == syscalls::EXIT || nr.0 == syscalls::EXIT_GROUP {
                let outcome = SyscallOutcome::Executed(0);
                self.emit(Event::Syscall { step, tid, nr: ctx.nr, case, outcome, work });
                self.exit(tid, args[0] as i32, nr.0 == syscalls::EXIT_GROUP);
                return Step::Jumped(format!("exit {}", args[0] as i32));
            }
        }
        let body = self.syscall_body(tid, &op, ctx.nr, ctx.args, &[], &mut work);
        match body {
            Body::Ret(r) | Body::Jumped(r) => {
                let outcome = SyscallOutcome::Executed(r);
                self.emit(Event::Syscall { step, tid, nr: ctx.nr, case, outcome, work });
                if matches!(body, Body::Jumped(_)) {
                    Step::Jumped(format!("= {r}"))
                } else {
                    Step::Done(format!("= {r}"))
                }
            }
            Body::Stall(reason) => {
                let _ = self.stall(tid, reason);
                Step::Stalled(syscalls::display(ctx.nr))
            }
        }
    }

    /// Second and third step of a string-filtered syscall.
    pub(crate) fn continue_syscall(&mut self, tid: Tid, mut pending: PendingSyscall) -> Step {
        let step = self.step;
        match pending.ctx.point {
            PreemptionPoint::PreCheck => unreachable!("check runs when the syscall starts"),
            PreemptionPoint::PostCheck => {
                let mut used = Vec::new();
                let mut fault = false;
                for (idx, checked) in &pending.checked {
                    match self.fetch_cstr(tid, pending.ctx.args[*idx as usize]) {
                        Ok(bytes) => {
                            if &bytes != checked {
                                self.witnesses.push(Witness {
                                    tid,
                                    nr: pending.ctx.nr,
                                    arg_index: *idx,
                                    checked: show_bytes(checked),
                                    used: show_bytes(&bytes),
                                    schedule: self.schedule.clone(),
                                });
                                if self.config.variant.is_protecting() {
                                    self.violation(format!(
                                        "step {step}: t{tid} {} used {:?} after checking {:?}",
                                        syscalls::display(pending.ctx.nr),
                                        show_bytes(&bytes),
                                        show_bytes(checked)
                                    ));
                                }
                            }
                            used.push((*idx, bytes));
                        }
                        Err(_) => fault = true,
                    }
                }
                let body = if fault {
                    Body::Ret(EFAULT)
                } else {
                    let op = pending.op.clone();
                    let (nr, args) = (pending.ctx.nr, pending.ctx.args);
                    self.syscall_body(tid, &op, nr, args, &used, &mut pending.work)
                };
                let body = match body {
                    Body::Stall(_) => Body::Ret(EAGAIN),
                    other => other,
                };
                let text = match &body {
                    Body::Ret(r) | Body::Jumped(r) => format!("= {r}"),
                    Body::Stall(_) => String::new(),
                };
                pending.result = Some(body);
                pending.ctx.point = PreemptionPoint::PreRestore;
                self.set_inflight(tid, pending);
                Step::Pending(text)
            }
            PreemptionPoint::PreRestore => {
                let mut conflict = false;
                for rid in std::mem::take(&mut pending.records) {
                    if self.restore_record(rid, false, &mut pending.work).is_err() {
                        conflict = true;
                    }
                }
                let (nr, work) = (pending.ctx.nr, pending.work);
                let case = FilterCase::AllowedWithArgs;
                if conflict {
                    let cause = KillCause::ConcurrentUse;
                    let outcome = SyscallOutcome::Killed(cause);
                    self.emit(Event::Syscall { step, tid, nr, case, outcome, work });
                    self.kill(tid, cause);
                    return Step::Killed(cause.as_str().to_string());
                }
                let body = pending.result.unwrap_or(Body::Ret(0));
                let r = match body {
                    Body::Ret(r) | Body::Jumped(r) => r,
                    _ => 0,
                };
                let outcome = SyscallOutcome::Executed(r);
                self.emit(Event::Syscall { step, tid, nr, case, outcome, work });
                if matches!(body, Body::Jumped(_)) {
                    Step::Jumped(format!("restored, = {r}"))
                } else {
                    Step::Done(format!("restored, = {r}"))
                }
            }
        }
    }

    /// Simulated effect of the syscall. `used` holds string arguments the
    /// filter path already fetched for this execution of the body.
    fn syscall_body(
        &mut self,
        tid: Tid,
        op: &ThreadOp,
        nr: u32,
        args: [u64; MAX_ARGS],
        used: &[(u8, Vec<u8>)],
        _work: &mut Work,
    ) -> Body {
        let string_arg = |this: &mut Kernel, idx: u8| -> Option<Vec<u8>> {
            match used.iter().find(|(i, _)| *i == idx) {
                Some((_, b)) => Some(b.clone()),
                None => this.fetch_cstr(tid, args[idx as usize]).ok(),
            }
        };
        match op {
            ThreadOp::Mmap { vaddr, pages, write, exec, shared } => {
                self.do_mmap(tid, *vaddr, *pages, *write, *exec, shared.as_deref())
            }
            ThreadOp::Mprotect { .. } => self.on_mprotect(tid, args[0], args[1], args[2]),
            ThreadOp::Fork { program } => match self.fork(tid, program) {
                Ok(pid) => Body::Ret(pid as i64),
                Err(_) => Body::Ret(ENOENT),
            },
            ThreadOp::Clone { program } => match self.clone_thread(tid, program) {
                Ok(child) => Body::Ret(child as i64),
                Err(_) => Body::Ret(ENOENT),
            },
            ThreadOp::Exec { program, .. } => {
                let Some(path) = string_arg(self, 0) else { return Body::Ret(EFAULT) };
                match self.exec_image(tid, &show_bytes(&path), program.as_deref()) {
                    Ok(()) if program.is_some() => Body::Jumped(0),
                    Ok(()) => Body::Ret(0),
                    Err(_) => Body::Ret(ENOENT),
                }
            }
            _ => match nr {
                syscalls::OPENAT | syscalls::OPEN => {
                    let idx = if nr == syscalls::OPENAT { 1 } else { 0 };
                    let Some(path) = string_arg(self, idx) else { return Body::Ret(EFAULT) };
                    let step = self.step;
                    self.emit(Event::Open { step, tid, path: show_bytes(&path) });
                    Body::Ret(self.next_fd(tid))
                }
                syscalls::EXECVE => {
                    let Some(path) = string_arg(self, 0) else { return Body::Ret(EFAULT) };
                    match self.exec_image(tid, &show_bytes(&path), None) {
                        Ok(()) => Body::Ret(0),
                        Err(_) => Body::Ret(ENOENT),
                    }
                }
                syscalls::READ => {
                    let len = (args[2] as usize).min(PAGE_SIZE * 4);
                    match self.kernel_write(tid, args[1], &vec![b'R'; len]) {
                        Ok(()) => Body::Ret(len as i64),
                        Err(e) => Body::Ret(e),
                    }
                }
                syscalls::WRITE => {
                    if used.iter().any(|(i, _)| *i == 1) {
                        return Body::Ret(args[2] as i64);
                    }
                    let len = (args[2] as usize).min(PAGE_SIZE * 4);
                    let (core, asid) = match self.tasks.get(&tid) {
                        Some(t) => (t.core, t.asid),
                        None => return Body::Ret(EFAULT),
                    };
                    let read = self.mem.read_bytes(core, asid, crate::vmem::Mode::Kernel, args[1], len);
                    match read {
                        Ok(_) => Body::Ret(len as i64),
                        Err(_) => Body::Ret(EFAULT),
                    }
                }
                syscalls::GETPPID => {
                    let parent = self.process_of(tid).ok().and_then(|p| p.parent).unwrap_or(0);
                    Body::Ret(parent as i64)
                }
                syscalls::STAT => {
                    let step = self.step;
                    self.emit(Event::Stat { step, tid });
                    Body::Ret(0)
                }
                syscalls::MPROTECT => self.on_mprotect(tid, args[0], args[1], args[2]),
                _ => Body::Ret(0),
            },
        }
    }

    fn do_mmap(&mut self, tid: Tid, vaddr: u64, pages: u64, write: bool, exec: bool, shared: Option<&str>) -> Body {
        let Some(asid) = self.tasks.get(&tid).map(|t| t.asid) else { return Body::Ret(EFAULT) };
        let start = vpn_of(vaddr);
        if (0..pages).any(|i| self.mem.pte(asid, start + i).is_some()) {
            return Body::Ret(EEXIST);
        }
        let perms = Perms { user: true, writable: write, executable: exec };
        let mut work = Work::default();
        for i in 0..pages {
            let frame = self.frame_for(shared, i);
            if self.mem.map(asid, start + i, frame, perms, shared.is_some()).is_err() {
                return Body::Ret(ENOMEM);
            }
            self.guard_new_alias(frame, asid, start + i, &mut work);
        }
        Body::Ret(vaddr as i64)
    }

    /// Resolves, checks and protects every page the string at `ptr` spans.
    /// Returns the record and the string bytes as read under protection.
    pub fn protect_argument(
        &mut self,
        tid: Tid,
        ptr: u64,
        nr: u32,
        work: &mut Work,
    ) -> Result<(RecordId, Vec<u8>), KillCause> {
        let variant = self.config.variant;
        let (asid, pid) = match self.tasks.get(&tid) {
            Some(t) => (t.asid, t.pid),
            None => return Err(KillCause::BadPointer),
        };
        let rid = self.next_record;
        self.next_record += 1;
        let record = ProtectionRecord { id: rid, tid, pid, nr, variant, frames: Vec::new() };
        self.registry.records.insert(rid, record);
        match self.protect_span(rid, asid, ptr, work) {
            Ok(bytes) => {
                let frames = self.registry.records[&rid].frames.clone();
                let mappings = frames
                    .iter()
                    .filter_map(|f| self.registry.frames.get(f))
                    .map(|g| g.priors.len())
                    .sum();
                let step = self.step;
                self.emit(Event::Protect { step, tid, variant, frames, mappings });
                Ok((rid, bytes))
            }
            Err(cause) => {
                let _ = self.restore_record(rid, true, work);
                Err(cause)
            }
        }
    }

    fn protect_span(&mut self, rid: RecordId, asid: Asid, ptr: u64, work: &mut Work) -> Result<Vec<u8>, KillCause> {
        let variant = self.config.variant;
        let mut out = Vec::new();
        let mut addr = ptr;
        for _ in 0..self.config.max_span_pages {
            let vpn = vpn_of(addr);
            work.pt_resolves += 1;
            let mut pte = *self.mem.pte(asid, vpn).filter(|p| p.present).ok_or(KillCause::BadPointer)?;
            let nested = self.registry.is_protected(pte.frame);
            if !pte.user && !nested {
                return Err(KillCause::BadPointer);
            }
            if pte.cow && !nested {
                self.mem.cow_resolve(asid, vpn).map_err(|_| KillCause::BadPointer)?;
                pte = *self.mem.pte(asid, vpn).expect("just resolved");
            }
            let executable = self
                .registry
                .prior_for(pte.frame, asid, vpn)
                .map_or(pte.executable, |p| p.executable);
            if variant == Variant::Stash && executable {
                return Err(KillCause::ExecutableArgument);
            }
            self.protect_frame(rid, pte.frame, work);
            let record = self.registry.records.get_mut(&rid).expect("inserted by caller");
            if !record.frames.contains(&pte.frame) {
                record.frames.push(pte.frame);
            }
            let page = &self.mem.frame_bytes(pte.frame)[page_offset(addr)..];
            match page.iter().position(|&b| b == 0) {
                Some(n) => {
                    out.extend_from_slice(&page[..n]);
                    return Ok(out);
                }
                None => out.extend_from_slice(page),
            }
            addr = (addr | (PAGE_SIZE as u64 - 1)) + 1;
        }
        Err(KillCause::BadPointer)
    }

    /// Protects every mapping of `frame`, or joins an existing protection.
    fn protect_frame(&mut self, rid: RecordId, frame: FrameId, work: &mut Work) {
        if let Some(guard) = self.registry.frames.get_mut(&frame) {
            guard.holders.insert(rid);
            return;
        }
        let variant = self.config.variant;
        let mut priors = Vec::new();
        for alias in self.mem.aliases_of(frame) {
            priors.push(self.protect_mapping(variant, alias.asid, alias.vpn, work));
        }
        self.registry.frames.insert(frame, FrameGuard { variant, priors, holders: BTreeSet::from([rid]) });
    }

    fn protect_mapping(&mut self, variant: Variant, asid: Asid, vpn: Vpn, work: &mut Work) -> MappingPrior {
        let pte = *self.mem.pte(asid, vpn).expect("alias from reverse map");
        let vm_write = self.mem.vm_flags(asid, vpn).map_or(pte.writable, |f| f.vm_write);
        let prior = MappingPrior {
            asid,
            vpn,
            user: pte.user,
            writable: pte.writable,
            executable: pte.executable,
            vm_write,
        };
        match variant {
            Variant::Stash => {
                let _ = self.mem.set_bit(asid, vpn, PteBit::User, false);
                let _ = self.mem.set_bit(asid, vpn, PteBit::Executable, false);
            }
            Variant::Freeze => {
                let _ = self.mem.set_bit(asid, vpn, PteBit::Writable, false);
                let _ = self.mem.set_vm_write(asid, vpn, false);
            }
            Variant::None => {}
        }
        self.mem.flush_all_cores(asid, vpn);
        work.pte_updates += 1;
        work.tlb_flushes += 1;
        prior
    }

    /// A new mapping of an already protected frame is protected as well.
    pub(crate) fn guard_new_alias(&mut self, frame: FrameId, asid: Asid, vpn: Vpn, work: &mut Work) {
        let Some(variant) = self.registry.frames.get(&frame).map(|g| g.variant) else { return };
        let prior = self.protect_mapping(variant, asid, vpn, work);
        if let Some(guard) = self.registry.frames.get_mut(&frame) {
            guard.priors.push(prior);
        }
    }

    /// Drops a record. Frames no other record holds get their prior bits
    /// back and their waiters woken. Under Stash, a frame still held by a
    /// different record is a concurrent-use violation unless `force`.
    pub fn restore_record(&mut self, rid: RecordId, force: bool, work: &mut Work) -> Result<(), KillCause> {
        let Some(record) = self.registry.records.remove(&rid) else { return Ok(()) };
        let mut conflict = false;
        let mut restored = Vec::new();
        for frame in record.frames {
            let Some(guard) = self.registry.frames.get_mut(&frame) else { continue };
            guard.holders.remove(&rid);
            if !guard.holders.is_empty() {
                if guard.variant == Variant::Stash && !force {
                    conflict = true;
                }
                continue;
            }
            let guard = self.registry.frames.remove(&frame).expect("present");
            for prior in guard.priors {
                self.restore_mapping(frame, prior, work);
            }
            restored.push(frame);
        }
        if !restored.is_empty() {
            let step = self.step;
            self.emit(Event::Restore { step, tid: record.tid, frames: restored.clone() });
        }
        for frame in restored {
            self.wake_frame(frame);
        }
        if conflict {
            Err(KillCause::ConcurrentUse)
        } else {
            Ok(())
        }
    }

    fn restore_mapping(&mut self, frame: FrameId, prior: MappingPrior, work: &mut Work) {
        let Some(pte) = self.mem.pte(prior.asid, prior.vpn).copied() else { return };
        if pte.frame != frame {
            return;
        }
        let (asid, vpn) = (prior.asid, prior.vpn);
        let _ = self.mem.set_bit(asid, vpn, PteBit::User, prior.user);
        let _ = self.mem.set_bit(asid, vpn, PteBit::Executable, prior.executable);
        let _ = self.mem.set_bit(asid, vpn, PteBit::Writable, prior.writable && !pte.cow);
        let _ = self.mem.set_vm_write(asid, vpn, prior.vm_write);
        self.mem.flush_all_cores(asid, vpn);
        work.pte_updates += 1;
        work.tlb_flushes += 1;
    }

    /// Page-fault policy for user-mode accesses.
    pub fn on_page_fault(&mut self, _tid: Tid, fault: &PageFault) -> FaultDecision {
        let pte = self.mem.pte(fault.asid, fault.vpn()).copied();
        let guarded = pte.filter(|p| self.registry.is_protected(p.frame)).map(|p| p.frame);
        let variant = guarded.and_then(|f| self.registry.guard(f)).map(|g| g.variant);
        match fault.reason {
            FaultReason::CowPending => match guarded {
                Some(frame) => FaultDecision::Stall(frame),
                None => match self.mem.cow_resolve(fault.asid, fault.vpn()) {
                    Ok(_) => FaultDecision::Retry,
                    Err(_) => FaultDecision::Kill,
                },
            },
            FaultReason::UserBitViolation => match (guarded, variant) {
                (Some(frame), Some(Variant::Stash)) => FaultDecision::Stall(frame),
                _ => FaultDecision::Kill,
            },
            FaultReason::WriteViolation => match (guarded, variant) {
                (Some(frame), Some(Variant::Freeze)) => FaultDecision::Stall(frame),
                _ => FaultDecision::Deliver,
            },
            FaultReason::NotPresent | FaultReason::ExecViolation => FaultDecision::Deliver,
        }
    }

    /// mprotect on protected pages waits for the protection to end.
    pub(crate) fn on_mprotect(&mut self, tid: Tid, vaddr: u64, len: u64, prot: u64) -> Body {
        let Some(asid) = self.tasks.get(&tid).map(|t| t.asid) else { return Body::Ret(EFAULT) };
        let pages = len.div_ceil(PAGE_SIZE as u64);
        let start = vpn_of(vaddr);
        let write = prot & PROT_WRITE != 0;
        let exec = prot & PROT_EXEC != 0;
        let mut frames = BTreeSet::new();
        for vpn in start..start + pages {
            match self.mem.pte(asid, vpn) {
                Some(pte) => {
                    if self.registry.is_protected(pte.frame) {
                        frames.insert(pte.frame);
                    }
                }
                None => return Body::Ret(ENOMEM),
            }
        }
        let stall = match self.config.variant {
            Variant::Freeze => write && !frames.is_empty(),
            Variant::Stash => !frames.is_empty(),
            Variant::None => false,
        };
        if stall {
            return Body::Stall(WaitReason::Mprotect(frames));
        }
        for vpn in start..start + pages {
            let pte = *self.mem.pte(asid, vpn).expect("checked above");
            let _ = self.mem.set_bit(asid, vpn, PteBit::Executable, exec);
            if !pte.cow {
                let _ = self.mem.set_bit(asid, vpn, PteBit::Writable, write);
            }
            let _ = self.mem.set_vm_write(asid, vpn, write);
            let _ = self.mem.set_vm_exec(asid, vpn, exec);
            self.mem.flush_all_cores(asid, vpn);
        }
        Body::Ret(0)
    }

    /// A write through `/proc/<pid>/mem`. It bypasses page permissions, so
    /// it is refused while DPTI is active for a sandboxed writer or target,
    /// and whenever it would land on a protected frame.
    pub fn on_proc_mem_write(&mut self, tid: Tid, target: Tid, vaddr: u64, bytes: &[u8]) -> bool {
        let Some(t) = self.tasks.get(&target) else { return false };
        if !t.state.is_alive() {
            return false;
        }
        let asid = t.asid;
        if self.config.variant.is_protecting() && (self.is_sandboxed(tid) || self.is_sandboxed(target)) {
            return false;
        }
        let first = vpn_of(vaddr);
        let last = vpn_of(vaddr + bytes.len().max(1) as u64 - 1);
        for vpn in first..=last {
            let Some(pte) = self.mem.pte(asid, vpn).copied() else { return false };
            if self.registry.is_protected(pte.frame) {
                let step = self.step;
                self.emit(Event::KernelWriteBlocked { step, tid, vaddr });
                return false;
            }
            if pte.cow && self.mem.cow_resolve(asid, vpn).is_err() {
                return false;
            }
        }
        self.mem.poke(asid, vaddr, bytes).is_ok()
    }
}

/// Compares the argument against each allowed string in order. Every
/// comparison charges the argument length plus terminator.
pub fn check_string(arg: &[u8], allowed: &[Vec<u8>], work: &mut Work) -> bool {
    for candidate in allowed {
        work.string_compares += 1;
        work.string_bytes_compared += arg.len() as u64 + 1;
        if candidate.as_slice() == arg {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_string_counts_position() {
        let allowed: Vec<Vec<u8>> = (0..10).map(|i| format!("file{i}").into_bytes()).collect();
        let mut work = Work::default();
        assert!(check_string(b"file9", &allowed, &mut work));
        assert_eq!(work.string_compares, 10);
        let mut work = Work::default();
        assert!(check_string(b"file0", &allowed, &mut work));
        assert_eq!(work.string_compares, 1);
        assert_eq!(work.string_bytes_compared, 6);
        assert!(!check_string(b"nope", &allowed, &mut Work::default()));
    }

    #[test]
    fn variant_parses() {
        assert_eq!("freeze".parse::<Variant>().unwrap(), Variant::Freeze);
        assert!("both".parse::<Variant>().is_err());
    }
}
