// SPDX-License-Identifier: Apache-2.0

//! Simulated threads and processes, and the kernel state they run on.
//!
//! A [`Kernel`] owns memory, tasks, installed filter tables and the DPTI
//! protection registry. The scheduler in [`sched`] drives it one step at a
//! time. The whole structure is `Clone` so exhaustive exploration can fork
//! the state at every scheduling decision.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::Work;
use crate::dpti::{PendingSyscall, ProtectionRegistry, Variant};
use crate::events::{Event, KillCause, TraceEntry, Witness};
use crate::filters::{FilterError, FilterTable, SeccompProgram, MAX_ARGS};
use crate::sgxdom::{EnclaveDomain, EnclaveOp, EnclaveRun};
use crate::syscalls;
use crate::vmem::{
    vpn_of, AccessKind, Asid, FrameId, Memory, Mode, Perms, VmError, VmFlags, Vpn, PAGE_SIZE,
};
use crate::wire::{hex_u64, Bytes, Sys};

pub mod sched;

pub type Tid = u32;
pub type Pid = u32;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CpuState {
    pub rax: u64,
    pub rbx: u64,
    pub rsp: u64,
    pub rbp: u64,
}

/// What a stalled thread waits for.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaitReason {
    /// A faulting access to a frame under DPTI protection.
    Frame(FrameId),
    /// An mprotect call touching protected frames.
    Mprotect(BTreeSet<FrameId>),
}

impl WaitReason {
    pub fn involves(&self, frame: FrameId) -> bool {
        match self {
            WaitReason::Frame(f) => *f == frame,
            WaitReason::Mprotect(set) => set.contains(&frame),
        }
    }

    fn describe(&self) -> String {
        match self {
            WaitReason::Frame(f) => format!("fault on protected {f}"),
            WaitReason::Mprotect(set) => {
                let list: Vec<String> = set.iter().map(|f| f.to_string()).collect();
                format!("mprotect on protected {}", list.join(","))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Runnable,
    Stalled(WaitReason),
    Exited(i32),
    Killed(KillCause),
}

impl TaskState {
    pub fn is_alive(&self) -> bool {
        matches!(self, TaskState::Runnable | TaskState::Stalled(_))
    }
}

/// One scripted thread operation. Each is a single scheduler step, except
/// string-filtered syscalls, which expose their check and use as separate
/// steps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThreadOp {
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
    Syscall {
        nr: Sys,
        #[serde(default, with = "crate::wire::args")]
        args: [u64; MAX_ARGS],
    },
    Mmap {
        #[serde(with = "hex_u64")]
        vaddr: u64,
        #[serde(default = "one")]
        pages: u64,
        #[serde(default = "yes")]
        write: bool,
        #[serde(default)]
        exec: bool,
        /// Name of a shared frame group; pages with the same name and index
        /// alias the same physical frames.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shared: Option<String>,
    },
    Mprotect {
        #[serde(with = "hex_u64")]
        vaddr: u64,
        #[serde(default = "one")]
        pages: u64,
        write: bool,
        #[serde(default)]
        exec: bool,
    },
    Fork {
        program: String,
    },
    Clone {
        program: String,
    },
    Exec {
        #[serde(with = "hex_u64")]
        path: u64,
        /// Program the thread runs after a successful exec. Without one the
        /// thread continues with its remaining ops.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        program: Option<String>,
    },
    Exit {
        #[serde(default)]
        code: i32,
        #[serde(default)]
        group: bool,
    },
    ProcMemWrite {
        target: Tid,
        #[serde(with = "hex_u64")]
        vaddr: u64,
        bytes: Bytes,
    },
    Compute {
        cycles: u64,
    },
    Ecall {
        script: String,
    },
}

fn one() -> u64 {
    1
}

fn yes() -> bool {
    true
}

pub const PROT_READ: u64 = 1;
pub const PROT_WRITE: u64 = 2;
pub const PROT_EXEC: u64 = 4;

impl ThreadOp {
    /// The syscall number and registers this op issues, if it is a syscall.
    pub fn syscall(&self) -> Option<(u32, [u64; MAX_ARGS])> {
        let prot = |write: bool, exec: bool| {
            PROT_READ | if write { PROT_WRITE } else { 0 } | if exec { PROT_EXEC } else { 0 }
        };
        Some(match self {
            ThreadOp::Syscall { nr, args } => (nr.0, *args),
            ThreadOp::Mmap { vaddr, pages, write, exec, shared } => {
                let flags = if shared.is_some() { 1 } else { 2 };
                let len = pages * PAGE_SIZE as u64;
                (syscalls::MMAP, [*vaddr, len, prot(*write, *exec), flags, 0, 0])
            }
            ThreadOp::Mprotect { vaddr, pages, write, exec } => {
                let len = pages * PAGE_SIZE as u64;
                (syscalls::MPROTECT, [*vaddr, len, prot(*write, *exec), 0, 0, 0])
            }
            ThreadOp::Fork { .. } => (syscalls::FORK, [0; MAX_ARGS]),
            ThreadOp::Clone { .. } => (syscalls::CLONE, [0; MAX_ARGS]),
            ThreadOp::Exec { path, .. } => (syscalls::EXECVE, [*path, 0, 0, 0, 0, 0]),
            ThreadOp::Exit { code, group } => {
                let nr = if *group { syscalls::EXIT_GROUP } else { syscalls::EXIT };
                (nr, [*code as u64, 0, 0, 0, 0, 0])
            }
            _ => return None,
        })
    }

    pub fn describe(&self) -> String {
        match self {
            ThreadOp::Read { vaddr, len } => format!("read {vaddr:#x}+{len}"),
            ThreadOp::Write { vaddr, bytes } => {
                format!("write {vaddr:#x} {:?}", String::from_utf8_lossy(bytes.as_slice()))
            }
            ThreadOp::Syscall { nr, .. } => format!("syscall {}", syscalls::display(nr.0)),
            ThreadOp::Mmap { vaddr, pages, .. } => format!("mmap {vaddr:#x} x{pages}"),
            ThreadOp::Mprotect { vaddr, pages, write, exec } => {
                format!("mprotect {vaddr:#x} x{pages} w={write} x={exec}")
            }
            ThreadOp::Fork { program } => format!("fork {program}"),
            ThreadOp::Clone { program } => format!("clone {program}"),
            ThreadOp::Exec { path, .. } => format!("execve {path:#x}"),
            ThreadOp::Exit { code, group } => {
                format!("{} {code}", if *group { "exit_group" } else { "exit" })
            }
            ThreadOp::ProcMemWrite { target, vaddr, .. } => {
                format!("proc-mem write t{target} {vaddr:#x}")
            }
            ThreadOp::Compute { cycles } => format!("compute {cycles}"),
            ThreadOp::Ecall { script } => format!("ecall {script}"),
        }
    }
}

/// Work a thread has started but not finished.
#[derive(Clone, Debug)]
pub(crate) enum InFlight {
    Syscall(Box<PendingSyscall>),
    Enclave(Box<EnclaveRun>),
}

#[derive(Clone, Debug)]
pub struct Task {
    pub tid: Tid,
    pub pid: Pid,
    pub asid: Asid,
    pub core: usize,
    pub state: TaskState,
    pub cpu: CpuState,
    /// Inclusive range of stack pages, if the thread has a stack mapping.
    pub stack: Option<(Vpn, Vpn)>,
    pub(crate) ops: Arc<[ThreadOp]>,
    pub pc: usize,
    pub(crate) inflight: Option<InFlight>,
}

impl Task {
    pub fn has_work(&self) -> bool {
        self.inflight.is_some() || self.pc < self.ops.len()
    }

    pub fn ops(&self) -> &[ThreadOp] {
        &self.ops
    }

    pub fn in_syscall(&self) -> bool {
        matches!(self.inflight, Some(InFlight::Syscall(_)))
    }
}

#[derive(Clone, Debug)]
pub struct Process {
    pub pid: Pid,
    pub name: String,
    pub asid: Asid,
    pub parent: Option<Pid>,
    pub threads: BTreeSet<Tid>,
    /// Index into [`Kernel::filters`] once sandboxed.
    pub filters: Option<usize>,
    pub alive: bool,
    pub(crate) next_fd: i64,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    #[default]
    Dpti,
    Seccomp,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationAction {
    #[default]
    Kill,
    Errno,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct KernelConfig {
    pub variant: Variant,
    pub engine: Engine,
    pub on_violation: ViolationAction,
    /// Maximum number of pages a protected string argument may span.
    pub max_span_pages: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            variant: Variant::Stash,
            engine: Engine::Dpti,
            on_violation: ViolationAction::Kill,
            max_span_pages: 2,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KernelError {
    #[error("no task {0}")]
    NoSuchTask(Tid),
    #[error("no process {0}")]
    NoSuchProcess(Pid),
    #[error("task {tid} is {state}, expected {expected}")]
    BadState { tid: Tid, state: String, expected: &'static str },
    #[error("unknown program {0:?}")]
    NoSuchProgram(String),
    #[error("unknown enclave script {0:?}")]
    NoSuchScript(String),
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error(transparent)]
    Filter(#[from] FilterError),
}

/// What happened when a thread took a step; rendered into the trace.
#[derive(Clone, Debug)]
pub(crate) enum Step {
    /// Op finished; advance the program counter.
    Done(String),
    /// Op finished and already positioned the program counter itself.
    Jumped(String),
    /// Op is part-way through; `inflight` holds the continuation.
    Pending(String),
    /// Thread stalled; the op will be re-executed on wake.
    Stalled(String),
    /// Thread group killed.
    Killed(String),
}

/// The simulated machine.
#[derive(Clone, Debug)]
pub struct Kernel {
    pub mem: Memory,
    pub config: KernelConfig,
    pub tasks: BTreeMap<Tid, Task>,
    pub procs: BTreeMap<Pid, Process>,
    pub filters: Vec<FilterTable>,
    pub(crate) seccomp: Vec<Option<SeccompProgram>>,
    pub registry: ProtectionRegistry,
    pub enclave: Option<EnclaveDomain>,
    programs: Arc<BTreeMap<String, Arc<[ThreadOp]>>>,
    pub(crate) scripts: Arc<BTreeMap<String, Arc<[EnclaveOp]>>>,
    pub(crate) named_frames: BTreeMap<String, FrameId>,
    pub events: Vec<Event>,
    pub trace: Vec<TraceEntry>,
    pub witnesses: Vec<Witness>,
    pub violations: Vec<String>,
    /// Thread chosen at every step so far.
    pub schedule: Vec<Tid>,
    pub work: Work,
    pub(crate) step: u64,
    next_tid: Tid,
    next_core: usize,
    pub(crate) next_record: u64,
}

impl Kernel {
    pub fn new(config: KernelConfig, cores: usize) -> Self {
        Kernel {
            mem: Memory::new(cores),
            config,
            tasks: BTreeMap::new(),
            procs: BTreeMap::new(),
            filters: Vec::new(),
            seccomp: Vec::new(),
            registry: ProtectionRegistry::default(),
            enclave: None,
            programs: Arc::new(BTreeMap::new()),
            scripts: Arc::new(BTreeMap::new()),
            named_frames: BTreeMap::new(),
            events: Vec::new(),
            trace: Vec::new(),
            witnesses: Vec::new(),
            violations: Vec::new(),
            schedule: Vec::new(),
            work: Work::default(),
            step: 0,
            next_tid: 1,
            next_core: 0,
            next_record: 1,
        }
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn current_step(&self) -> u64 {
        self.step
    }

    pub fn add_program(&mut self, name: &str, ops: Vec<ThreadOp>) {
        Arc::make_mut(&mut self.programs).insert(name.to_string(), ops.into());
    }

    pub fn add_script(&mut self, name: &str, ops: Vec<EnclaveOp>) {
        Arc::make_mut(&mut self.scripts).insert(name.to_string(), ops.into());
    }

    pub(crate) fn program(&self, name: &str) -> Result<Arc<[ThreadOp]>, KernelError> {
        self.programs.get(name).cloned().ok_or_else(|| KernelError::NoSuchProgram(name.to_string()))
    }

    pub fn task(&self, tid: Tid) -> Result<&Task, KernelError> {
        self.tasks.get(&tid).ok_or(KernelError::NoSuchTask(tid))
    }

    pub(crate) fn task_mut(&mut self, tid: Tid) -> Result<&mut Task, KernelError> {
        self.tasks.get_mut(&tid).ok_or(KernelError::NoSuchTask(tid))
    }

    pub fn process(&self, pid: Pid) -> Result<&Process, KernelError> {
        self.procs.get(&pid).ok_or(KernelError::NoSuchProcess(pid))
    }

    pub fn process_of(&self, tid: Tid) -> Result<&Process, KernelError> {
        let pid = self.task(tid)?.pid;
        self.process(pid)
    }

    pub fn process_by_name(&self, name: &str) -> Option<&Process> {
        self.procs.values().find(|p| p.name == name)
    }

    pub fn is_sandboxed(&self, tid: Tid) -> bool {
        self.process_of(tid).map(|p| p.filters.is_some()).unwrap_or(false)
    }

    fn alloc_core(&mut self) -> usize {
        let core = self.next_core % self.mem.cores();
        self.next_core += 1;
        core
    }

    fn new_task(&mut self, pid: Pid, asid: Asid, ops: Arc<[ThreadOp]>) -> Tid {
        let tid = self.next_tid;
        self.next_tid += 1;
        let core = self.alloc_core();
        self.tasks.insert(
            tid,
            Task {
                tid,
                pid,
                asid,
                core,
                state: TaskState::Runnable,
                cpu: CpuState::default(),
                stack: None,
                ops,
                pc: 0,
                inflight: None,
            },
        );
        tid
    }

    /// Creates a process with an empty address space and one thread.
    /// Returns the thread id, which is also the process id.
    pub fn spawn_process(&mut self, name: &str, ops: Vec<ThreadOp>) -> Tid {
        let asid = self.mem.create_space();
        let pid = self.next_tid;
        let tid = self.new_task(pid, asid, ops.into());
        self.procs.insert(
            pid,
            Process {
                pid,
                name: name.to_string(),
                asid,
                parent: None,
                threads: BTreeSet::from([tid]),
                filters: None,
                alive: true,
                next_fd: 3,
            },
        );
        tid
    }

    /// Adds a thread to an existing process. Sandboxed processes take one
    /// more filter reference.
    pub fn add_thread(&mut self, pid: Pid, ops: Vec<ThreadOp>) -> Result<Tid, KernelError> {
        self.add_thread_arc(pid, ops.into())
    }

    fn add_thread_arc(&mut self, pid: Pid, ops: Arc<[ThreadOp]>) -> Result<Tid, KernelError> {
        let proc = self.process(pid)?;
        let (asid, filters) = (proc.asid, proc.filters);
        let tid = self.new_task(pid, asid, ops);
        let proc = self.procs.get_mut(&pid).expect("checked above");
        proc.threads.insert(tid);
        if let Some(id) = filters {
            self.filters[id].retain(1);
        }
        Ok(tid)
    }

    /// Maps `pages` pages starting at `vaddr` into the process. Pages with a
    /// `shared` name reuse the named frames so that other mappings of the
    /// same name alias them.
    pub fn map_pages(
        &mut self,
        pid: Pid,
        vaddr: u64,
        pages: u64,
        perms: Perms,
        shared: Option<&str>,
    ) -> Result<Vec<FrameId>, KernelError> {
        let asid = self.process(pid)?.asid;
        let start = vpn_of(vaddr);
        let mut frames = Vec::new();
        for i in 0..pages {
            let frame = self.frame_for(shared, i);
            self.mem.map(asid, start + i, frame, perms, shared.is_some())?;
            frames.push(frame);
        }
        Ok(frames)
    }

    pub(crate) fn frame_for(&mut self, shared: Option<&str>, index: u64) -> FrameId {
        match shared {
            Some(name) => {
                let key = format!("{name}#{index}");
                if let Some(&f) = self.named_frames.get(&key) {
                    return f;
                }
                let f = self.mem.alloc_frame();
                self.named_frames.insert(key, f);
                f
            }
            None => self.mem.alloc_frame(),
        }
    }

    /// Writes initial memory contents, ignoring permissions.
    pub fn poke(&mut self, pid: Pid, vaddr: u64, bytes: &[u8]) -> Result<(), KernelError> {
        let asid = self.process(pid)?.asid;
        Ok(self.mem.poke(asid, vaddr, bytes)?)
    }

    pub fn peek(&self, pid: Pid, vaddr: u64, len: usize) -> Result<Vec<u8>, KernelError> {
        let asid = self.process(pid)?.asid;
        Ok(self.mem.peek(asid, vaddr, len)?)
    }

    /// Gives a thread a stack of `pages` pages ending at `top` and points
    /// rsp/rbp at its top.
    pub fn set_stack(&mut self, tid: Tid, top: u64, pages: u64) -> Result<(), KernelError> {
        let pid = self.task(tid)?.pid;
        let base = top - pages * PAGE_SIZE as u64;
        // An unaligned top touches one more page than `pages`.
        let span = vpn_of(top - 1) - vpn_of(base) + 1;
        self.map_pages(pid, base, span, Perms::USER_RW, None)?;
        let task = self.task_mut(tid)?;
        task.stack = Some((vpn_of(base), vpn_of(top - 1)));
        task.cpu.rsp = top;
        task.cpu.rbp = top;
        Ok(())
    }

    /// Installs a filter table for the process. The reference count starts
    /// at the number of live threads.
    pub fn install_filters(
        &mut self,
        pid: Pid,
        mut table: FilterTable,
        explicit_denies: bool,
    ) -> Result<usize, KernelError> {
        let proc = self.process(pid)?;
        if proc.filters.is_some() {
            return Err(FilterError::AlreadyInstalled.into());
        }
        let live = self.live_threads(pid).len() as u32;
        let seccomp = match self.config.engine {
            Engine::Seccomp => Some(SeccompProgram::from_table(&table, explicit_denies)?),
            Engine::Dpti => None,
        };
        table.install()?;
        if live > 1 {
            table.retain(live - 1);
        }
        let id = self.filters.len();
        self.filters.push(table);
        self.seccomp.push(seccomp);
        self.procs.get_mut(&pid).expect("checked above").filters = Some(id);
        Ok(id)
    }

    /// Replaces the compiled baseline program for a filter table.
    pub fn set_seccomp_program(&mut self, filter: usize, program: SeccompProgram) {
        if let Some(slot) = self.seccomp.get_mut(filter) {
            *slot = Some(program);
        }
    }

    pub fn live_threads(&self, pid: Pid) -> Vec<Tid> {
        match self.procs.get(&pid) {
            Some(p) => p
                .threads
                .iter()
                .copied()
                .filter(|t| self.tasks.get(t).is_some_and(|t| t.state.is_alive()))
                .collect(),
            None => Vec::new(),
        }
    }

    /// Threads that can take a step.
    pub fn runnable(&self) -> Vec<Tid> {
        self.tasks
            .values()
            .filter(|t| t.state == TaskState::Runnable && t.has_work())
            .map(|t| t.tid)
            .collect()
    }

    pub fn stalled(&self) -> Vec<Tid> {
        self.tasks
            .values()
            .filter(|t| matches!(t.state, TaskState::Stalled(_)))
            .map(|t| t.tid)
            .collect()
    }

    pub(crate) fn emit(&mut self, event: Event) {
        if let Some(work) = event.work() {
            self.work += work;
        }
        self.events.push(event);
    }

    pub(crate) fn violation(&mut self, text: String) {
        if !self.violations.contains(&text) {
            self.violations.push(text);
        }
    }

    pub fn stall(&mut self, tid: Tid, reason: WaitReason) -> Result<(), KernelError> {
        let step = self.step;
        let task = self.task_mut(tid)?;
        if task.state != TaskState::Runnable {
            return Err(KernelError::BadState {
                tid,
                state: format!("{:?}", task.state),
                expected: "runnable",
            });
        }
        let text = reason.describe();
        task.state = TaskState::Stalled(reason);
        self.emit(Event::Stall { step, tid, reason: text });
        Ok(())
    }

    /// Wakes every thread whose wait reason involves `frame`.
    pub fn wake_frame(&mut self, frame: FrameId) -> Vec<Tid> {
        self.wake_where(|r| r.involves(frame))
    }

    pub fn wake_where(&mut self, pred: impl Fn(&WaitReason) -> bool) -> Vec<Tid> {
        let step = self.step;
        let mut woken = Vec::new();
        for task in self.tasks.values_mut() {
            if let TaskState::Stalled(reason) = &task.state {
                if pred(reason) {
                    task.state = TaskState::Runnable;
                    woken.push(task.tid);
                }
            }
        }
        for &tid in &woken {
            self.emit(Event::Wake { step, tid });
        }
        woken
    }

    /// Executes one step of `tid`.
    pub fn step(&mut self, tid: Tid) -> Result<(), KernelError> {
        let task = self.task_mut(tid)?;
        if task.state != TaskState::Runnable || !task.has_work() {
            let state = format!("{:?}", task.state);
            return Err(KernelError::BadState { tid, state, expected: "runnable with work" });
        }
        let inflight = task.inflight.take();
        let op = task.ops.get(task.pc).cloned();
        self.step += 1;
        self.schedule.push(tid);
        let (desc, result) = match inflight {
            Some(InFlight::Syscall(pending)) => {
                (format!("{} [{:?}]", pending.op.describe(), pending.ctx.point), self.continue_syscall(tid, *pending))
            }
            Some(InFlight::Enclave(run)) => ("enclave".to_string(), self.enclave_step(tid, *run)),
            None => {
                let op = op.expect("has_work checked");
                (op.describe(), self.exec_op(tid, op))
            }
        };
        let outcome = match result {
            Step::Done(s) => {
                if let Some(t) = self.tasks.get_mut(&tid) {
                    if t.state.is_alive() {
                        t.pc += 1;
                    }
                }
                s
            }
            Step::Jumped(s) => s,
            Step::Pending(s) => format!("pending: {s}"),
            Step::Stalled(s) => format!("stalled: {s}"),
            Step::Killed(s) => format!("killed: {s}"),
        };
        self.trace.push(TraceEntry { step: self.step, tid, op: desc, outcome });
        self.check_invariants();
        self.reap_finished();
        Ok(())
    }

    /// Exits threads that have run out of ops.
    pub fn reap_finished(&mut self) {
        let done: Vec<Tid> = self
            .tasks
            .values()
            .filter(|t| t.state == TaskState::Runnable && !t.has_work())
            .map(|t| t.tid)
            .collect();
        for tid in done {
            self.exit(tid, 0, false);
        }
    }

    fn exec_op(&mut self, tid: Tid, op: ThreadOp) -> Step {
        match &op {
            ThreadOp::Read { vaddr, len } => self.user_read(tid, *vaddr, *len),
            ThreadOp::Write { vaddr, bytes } => self.user_write(tid, *vaddr, bytes.as_slice()),
            ThreadOp::ProcMemWrite { target, vaddr, bytes } => {
                let executed = self.on_proc_mem_write(tid, *target, *vaddr, bytes.as_slice());
                let step = self.step;
                self.emit(Event::ProcMemWrite { step, tid, target: *target, executed });
                Step::Done(if executed { "executed" } else { "denied" }.to_string())
            }
            ThreadOp::Compute { cycles } => {
                let work = Work { compute_cycles: *cycles, ..Work::default() };
                let step = self.step;
                self.emit(Event::Compute { step, tid, work });
                Step::Done(format!("{cycles} cycles"))
            }
            ThreadOp::Ecall { script } => self.ecall_start(tid, script),
            _ => {
                let (nr, args) = op.syscall().expect("remaining ops are syscalls");
                self.start_syscall(tid, op, nr, args)
            }
        }
    }

    fn user_read(&mut self, tid: Tid, vaddr: u64, len: usize) -> Step {
        loop {
            let (core, asid) = match self.tasks.get(&tid) {
                Some(t) => (t.core, t.asid),
                None => return Step::Killed("no task".into()),
            };
            match self.mem.read_bytes(core, asid, Mode::User, vaddr, len) {
                Ok(bytes) => return Step::Done(format!("{:?}", String::from_utf8_lossy(&bytes))),
                Err(fault) => {
                    if let Some(step) = self.handle_user_fault(tid, fault) {
                        return step;
                    }
                }
            }
        }
    }

    fn user_write(&mut self, tid: Tid, vaddr: u64, bytes: &[u8]) -> Step {
        loop {
            let (core, asid) = match self.tasks.get(&tid) {
                Some(t) => (t.core, t.asid),
                None => return Step::Killed("no task".into()),
            };
            match self.mem.write_bytes(core, asid, Mode::User, vaddr, bytes) {
                Ok(frames) => {
                    for f in frames {
                        if self.registry.is_protected(f) {
                            self.violation(format!(
                                "user write by t{tid} reached protected {f} at step {}",
                                self.step
                            ));
                        }
                    }
                    return Step::Done("ok".into());
                }
                Err(fault) => {
                    if let Some(step) = self.handle_user_fault(tid, fault) {
                        return step;
                    }
                }
            }
        }
    }

    /// Applies the fault policy. `None` means retry the access.
    fn handle_user_fault(&mut self, tid: Tid, fault: crate::vmem::PageFault) -> Option<Step> {
        use crate::dpti::FaultDecision;
        match self.on_page_fault(tid, &fault) {
            FaultDecision::Retry => None,
            FaultDecision::Stall(frame) => {
                let _ = self.stall(tid, WaitReason::Frame(frame));
                Some(Step::Stalled(format!("{:?} at {:#x}", fault.reason, fault.vaddr)))
            }
            FaultDecision::Kill | FaultDecision::Deliver => {
                self.kill(tid, KillCause::Segfault);
                Some(Step::Killed(format!("{:?} at {:#x}", fault.reason, fault.vaddr)))
            }
        }
    }

    /// Releases `n` filter references held by the process.
    fn release_filters(&mut self, pid: Pid, n: u32) {
        let Some(id) = self.procs.get(&pid).and_then(|p| p.filters) else { return };
        if n > 0 && self.filters[id].release(n) {
            let step = self.step;
            self.emit(Event::FiltersFreed { step, filter: id });
        }
    }

    /// Drops a thread's in-flight work, restoring any pages it protected.
    fn abandon_inflight(&mut self, tid: Tid) {
        let inflight = self.tasks.get_mut(&tid).and_then(|t| t.inflight.take());
        match inflight {
            Some(InFlight::Syscall(pending)) => {
                for rid in pending.records {
                    let _ = self.restore_record(rid, true, &mut Work::default());
                }
            }
            Some(InFlight::Enclave(_)) => {
                if let Some(domain) = self.enclave.as_mut() {
                    domain.saved.remove(&tid);
                }
            }
            None => {}
        }
    }

    fn teardown_if_empty(&mut self, pid: Pid) {
        if !self.live_threads(pid).is_empty() {
            return;
        }
        let Some(proc) = self.procs.get_mut(&pid) else { return };
        if !proc.alive {
            return;
        }
        proc.alive = false;
        let asid = proc.asid;
        self.mem.destroy_space(asid);
        if let Some(domain) = &self.enclave {
            if domain.host_pid == pid {
                let iso = domain.isolated_as;
                self.mem.destroy_space(iso);
            }
        }
    }

    /// Terminates one thread, or its whole group.
    pub fn exit(&mut self, tid: Tid, code: i32, group: bool) {
        let Some(task) = self.tasks.get(&tid) else { return };
        if !task.state.is_alive() {
            return;
        }
        let pid = task.pid;
        let targets = if group { self.live_threads(pid) } else { vec![tid] };
        for &t in &targets {
            self.abandon_inflight(t);
            if let Some(task) = self.tasks.get_mut(&t) {
                task.state = TaskState::Exited(code);
            }
        }
        self.release_filters(pid, targets.len() as u32);
        let step = self.step;
        self.emit(Event::Exit { step, tid, code, group });
        self.teardown_if_empty(pid);
    }

    /// Kills the whole thread group of `tid`.
    pub fn kill(&mut self, tid: Tid, cause: KillCause) {
        let Some(task) = self.tasks.get(&tid) else { return };
        let pid = task.pid;
        let targets = self.live_threads(pid);
        if targets.is_empty() {
            return;
        }
        for &t in &targets {
            self.abandon_inflight(t);
            if let Some(task) = self.tasks.get_mut(&t) {
                task.state = TaskState::Killed(cause);
            }
        }
        self.release_filters(pid, targets.len() as u32);
        let step = self.step;
        let process = self.procs.get(&pid).map(|p| p.name.clone()).unwrap_or_default();
        self.emit(Event::Kill { step, tid, pid, process, cause });
        self.teardown_if_empty(pid);
    }

    /// Forks the process of `tid`; the child runs `program` in one thread.
    pub fn fork(&mut self, tid: Tid, program: &str) -> Result<Pid, KernelError> {
        let ops = self.program(program)?;
        let parent = self.task(tid)?.pid;
        let (parent_asid, filters) = {
            let p = self.process(parent)?;
            (p.asid, p.filters)
        };
        let force_cow = self.registry.writable_priors(parent_asid);
        let child_asid = self.mem.fork_space_with(parent_asid, &force_cow)?;
        self.registry.extend_to_fork(parent_asid, child_asid);
        let child_pid = self.next_tid;
        let child_tid = self.new_task(child_pid, child_asid, ops);
        let cpu = self.task(tid)?.cpu;
        let stack = self.task(tid)?.stack;
        if let Some(t) = self.tasks.get_mut(&child_tid) {
            t.cpu = cpu;
            t.stack = stack;
        }
        self.procs.insert(
            child_pid,
            Process {
                pid: child_pid,
                name: program.to_string(),
                asid: child_asid,
                parent: Some(parent),
                threads: BTreeSet::from([child_tid]),
                filters,
                alive: true,
                next_fd: 3,
            },
        );
        if let Some(id) = filters {
            self.filters[id].retain(1);
        }
        let step = self.step;
        self.emit(Event::Fork { step, tid, child_pid, child_tid });
        Ok(child_pid)
    }

    /// Starts a new thread in the caller's process.
    pub fn clone_thread(&mut self, tid: Tid, program: &str) -> Result<Tid, KernelError> {
        let ops = self.program(program)?;
        let pid = self.task(tid)?.pid;
        let child = self.add_thread_arc(pid, ops)?;
        let step = self.step;
        self.emit(Event::Clone { step, tid, child_tid: child });
        Ok(child)
    }

    /// Replaces the process image: other threads end, and the caller gets a
    /// fresh private copy of the address space.
    pub fn exec_image(&mut self, tid: Tid, path: &str, program: Option<&str>) -> Result<(), KernelError> {
        let new_ops = program.map(|p| self.program(p)).transpose()?;
        let pid = self.task(tid)?.pid;
        let others: Vec<Tid> = self.live_threads(pid).into_iter().filter(|&t| t != tid).collect();
        for &t in &others {
            self.abandon_inflight(t);
            if let Some(task) = self.tasks.get_mut(&t) {
                task.state = TaskState::Exited(0);
            }
        }
        self.release_filters(pid, others.len() as u32);
        let old = self.process(pid)?.asid;
        let fresh = self.mem.create_space();
        let entries: Vec<(Vpn, crate::vmem::Pte)> = self
            .mem
            .space(old)
            .map(|s| s.entries.iter().map(|(&v, &p)| (v, p)).collect())
            .unwrap_or_default();
        for (vpn, pte) in entries {
            let perms = self.registry.effective_perms(old, vpn, &pte, &self.mem);
            let writable = perms.writable || pte.cow;
            let frame = self.mem.alloc_frame();
            let bytes = *self.mem.frame_bytes(pte.frame);
            *self.mem.frame_bytes_mut(frame) = bytes;
            let perms = Perms { writable, ..perms };
            let flags = VmFlags { vm_write: writable, vm_exec: perms.executable, shared: false };
            self.mem.map_with_flags(fresh, vpn, frame, perms, flags)?;
        }
        self.mem.destroy_space(old);
        self.procs.get_mut(&pid).expect("exists").asid = fresh;
        let task = self.task_mut(tid)?;
        task.asid = fresh;
        if let Some(ops) = new_ops {
            task.ops = ops;
            task.pc = 0;
        }
        let step = self.step;
        self.emit(Event::Exec { step, tid, path: path.to_string() });
        Ok(())
    }

    /// Checks the protection invariants that must hold at every step.
    fn check_invariants(&mut self) {
        let mut found = Vec::new();
        for (frame, guard) in self.registry.guards() {
            for prior in &guard.priors {
                let Some(pte) = self.mem.pte(prior.asid, prior.vpn) else { continue };
                if pte.frame != frame {
                    continue;
                }
                match guard.variant {
                    Variant::Stash if pte.executable || pte.user => found.push(format!(
                        "stashed {frame} user-accessible or executable at {} {:#x}",
                        prior.asid, prior.vpn
                    )),
                    Variant::Freeze if pte.writable => found.push(format!(
                        "frozen {frame} writable at {} {:#x}",
                        prior.asid, prior.vpn
                    )),
                    _ => {}
                }
                for core in 0..self.mem.cores() {
                    if let Some(cached) = self.mem.tlb(core).lookup(prior.asid, prior.vpn) {
                        let stale = match guard.variant {
                            Variant::Stash => cached.user,
                            Variant::Freeze => cached.writable,
                            Variant::None => false,
                        };
                        if stale {
                            found.push(format!(
                                "core {core} TLB grants access to protected {frame} at {} {:#x}",
                                prior.asid, prior.vpn
                            ));
                        }
                    }
                }
            }
        }
        for text in found {
            self.violation(format!("step {}: {text}", self.step));
        }
    }

    /// Kernel-mode read of a NUL-terminated string, spanning at most
    /// `max_span_pages` pages. Pointers into pages that were never user
    /// pages are rejected.
    pub(crate) fn fetch_cstr(&mut self, tid: Tid, ptr: u64) -> Result<Vec<u8>, KillCause> {
        let (core, asid) = {
            let t = self.tasks.get(&tid).ok_or(KillCause::BadPointer)?;
            (t.core, t.asid)
        };
        let mut out = Vec::new();
        let mut addr = ptr;
        for _ in 0..self.config.max_span_pages {
            let t = self
                .mem
                .access(core, asid, Mode::Kernel, AccessKind::Read, addr)
                .map_err(|_| KillCause::BadPointer)?;
            let pte = *self.mem.pte(asid, t.vpn).ok_or(KillCause::BadPointer)?;
            if !pte.user && !self.registry.is_protected(pte.frame) {
                return Err(KillCause::BadPointer);
            }
            let page = &self.mem.frame_bytes(t.frame)[t.offset..];
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

    /// Kernel-mode write into user memory (for example `read()` filling a
    /// buffer). Writes to protected frames are refused.
    pub(crate) fn kernel_write(&mut self, tid: Tid, vaddr: u64, bytes: &[u8]) -> Result<(), i64> {
        const EFAULT: i64 = -14;
        let (core, asid) = match self.tasks.get(&tid) {
            Some(t) => (t.core, t.asid),
            None => return Err(EFAULT),
        };
        let first = vpn_of(vaddr);
        let last = vpn_of(vaddr + bytes.len().max(1) as u64 - 1);
        for vpn in first..=last {
            let Some(pte) = self.mem.pte(asid, vpn).copied() else { return Err(EFAULT) };
            if self.registry.is_protected(pte.frame) {
                let step = self.step;
                self.emit(Event::KernelWriteBlocked { step, tid, vaddr });
                return Err(EFAULT);
            }
            if pte.cow {
                self.mem.cow_resolve(asid, vpn).map_err(|_| EFAULT)?;
            }
        }
        self.mem.write_bytes(core, asid, Mode::Kernel, vaddr, bytes).map(|_| ()).map_err(|_| EFAULT)
    }

    pub(crate) fn next_fd(&mut self, tid: Tid) -> i64 {
        let pid = self.tasks.get(&tid).map(|t| t.pid).unwrap_or_default();
        match self.procs.get_mut(&pid) {
            Some(p) => {
                let fd = p.next_fd;
                p.next_fd += 1;
                fd
            }
            None => -1,
        }
    }
}
