// SPDX-License-Identifier: Apache-2.0

//! Structured events emitted while a simulation runs.

use serde::{Deserialize, Serialize};

use crate::costmodel::Work;
use crate::dpti::Variant;
use crate::tasks::{Pid, Tid};
use crate::vmem::FrameId;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KillCause {
    /// Syscall not registered in the filter table.
    UnregisteredSyscall,
    /// An argument failed its filter.
    FilterViolation,
    /// String argument unmapped, not user memory or unterminated.
    BadPointer,
    /// String argument on an executable page under Stash.
    ExecutableArgument,
    /// Page released while another syscall still had it stashed.
    ConcurrentUse,
    /// Ordinary segmentation fault.
    Segfault,
    /// Enclave exit with a modified stack or base pointer.
    StackTamper,
    /// Enclave touched host memory it has no access to.
    IllegalEnclaveAccess,
    /// EEXIT to a destination other than the bridge page exit.
    IllegalEexit,
}

impl KillCause {
    pub fn as_str(&self) -> &'static str {
        match self {
            KillCause::UnregisteredSyscall => "unregistered_syscall",
            KillCause::FilterViolation => "filter_violation",
            KillCause::BadPointer => "bad_pointer",
            KillCause::ExecutableArgument => "executable_argument",
            KillCause::ConcurrentUse => "concurrent_use",
            KillCause::Segfault => "segfault",
            KillCause::StackTamper => "stack_tamper",
            KillCause::IllegalEnclaveAccess => "illegal_enclave_access",
            KillCause::IllegalEexit => "illegal_eexit",
        }
    }
}

/// Which of the three dispatch cases a syscall took.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterCase {
    /// Task not sandboxed.
    Unfiltered,
    NotAllowed,
    Allowed,
    AllowedWithArgs,
    /// Decided by the sequential baseline evaluator.
    Seccomp,
    /// exit and exit_group bypass the table.
    Exempt,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum SyscallOutcome {
    Executed(i64),
    Denied,
    Killed(KillCause),
}

/// A check/use divergence: the bytes compared by the filter differ from
/// the bytes the syscall body consumed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Witness {
    pub tid: Tid,
    pub nr: u32,
    pub arg_index: u8,
    pub checked: String,
    pub used: String,
    /// Scheduler choices (thread ids) that led here.
    pub schedule: Vec<Tid>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: u64,
    pub tid: Tid,
    pub op: String,
    pub outcome: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "event")]
pub enum Event {
    Syscall {
        step: u64,
        tid: Tid,
        nr: u32,
        case: FilterCase,
        outcome: SyscallOutcome,
        work: Work,
    },
    Protect {
        step: u64,
        tid: Tid,
        variant: Variant,
        frames: Vec<FrameId>,
        mappings: usize,
    },
    Restore {
        step: u64,
        tid: Tid,
        frames: Vec<FrameId>,
    },
    Stall {
        step: u64,
        tid: Tid,
        reason: String,
    },
    Wake {
        step: u64,
        tid: Tid,
    },
    Kill {
        step: u64,
        tid: Tid,
        pid: Pid,
        process: String,
        cause: KillCause,
    },
    Open {
        step: u64,
        tid: Tid,
        path: String,
    },
    Exec {
        step: u64,
        tid: Tid,
        path: String,
    },
    Stat {
        step: u64,
        tid: Tid,
    },
    Fork {
        step: u64,
        tid: Tid,
        child_pid: Pid,
        child_tid: Tid,
    },
    Clone {
        step: u64,
        tid: Tid,
        child_tid: Tid,
    },
    Exit {
        step: u64,
        tid: Tid,
        code: i32,
        group: bool,
    },
    FiltersFreed {
        step: u64,
        filter: usize,
    },
    ProcMemWrite {
        step: u64,
        tid: Tid,
        target: Tid,
        executed: bool,
    },
    KernelWriteBlocked {
        step: u64,
        tid: Tid,
        vaddr: u64,
    },
    Enclave {
        step: u64,
        tid: Tid,
        what: String,
        work: Work,
    },
    Compute {
        step: u64,
        tid: Tid,
        work: Work,
    },
}

impl Event {
    pub fn work(&self) -> Option<&Work> {
        match self {
            Event::Syscall { work, .. } | Event::Enclave { work, .. } | Event::Compute { work, .. } => {
                Some(work)
            }
            _ => None,
        }
    }
}

/// Lossy rendering of bytes for reports.
pub fn show_bytes(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}
