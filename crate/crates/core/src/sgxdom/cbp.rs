// SPDX-License-Identifier: Apache-2.0

//! Layout of the Code Bridge Page and what happens when execution lands
//! at a given offset in it.
//!
//! ```text
//! 0      3      6                                   P      P+5  4096
//! | EENTER | ERESUME |  single-byte NOP sled ...    | mov  | syscall |
//! | ENCLU  | ENCLU    |                             | eax  |         |
//! ```
//!
//! The driver prologue and the syscall instruction are only present when
//! the syscall-exit optimization is enabled; otherwise the sled runs to the
//! end of the page.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::vmem::PAGE_SIZE;

/// ENCLU used by the host to enter the enclave.
pub const ENTRY_STUB: Range<usize> = 0..3;
/// ENCLU used to resume after an asynchronous exit.
pub const RESUME_STUB: Range<usize> = 3..6;
pub const SLED_START: usize = 6;
/// `mov eax, <driver syscall>`; five bytes.
pub const PROLOGUE_LEN: usize = 5;
pub const SYSCALL_LEN: usize = 2;
pub const PROLOGUE_START: usize = PAGE_SIZE - PROLOGUE_LEN - SYSCALL_LEN;
pub const SYSCALL_START: usize = PAGE_SIZE - SYSCALL_LEN;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CbpRegion {
    EntryStub,
    ResumeStub,
    Sled,
    Prologue,
    SyscallInsn,
}

/// Where execution starting at an offset ends up.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Landing {
    /// Slides to the first byte after the page and faults there.
    ExitFault,
    /// Runs the complete prologue and issues the driver exit syscall.
    DriverSyscall,
    /// Skips the prologue, so RAX still holds the EEXIT leaf (4) and the
    /// syscall executes as stat; then falls through to the exit fault.
    StatThenExitFault,
    /// Executes an ENCLU outside enclave mode with RAX=4: #UD.
    InvalidEnclu,
}

pub fn region(offset: usize, optimized: bool) -> CbpRegion {
    assert!(offset < PAGE_SIZE, "offset {offset} outside the page");
    if ENTRY_STUB.contains(&offset) {
        CbpRegion::EntryStub
    } else if RESUME_STUB.contains(&offset) {
        CbpRegion::ResumeStub
    } else if !optimized || offset < PROLOGUE_START {
        CbpRegion::Sled
    } else if offset < SYSCALL_START {
        CbpRegion::Prologue
    } else {
        CbpRegion::SyscallInsn
    }
}

pub fn landing(offset: usize, optimized: bool) -> Landing {
    match region(offset, optimized) {
        CbpRegion::EntryStub | CbpRegion::ResumeStub => Landing::InvalidEnclu,
        CbpRegion::Sled if optimized => Landing::DriverSyscall,
        CbpRegion::Sled => Landing::ExitFault,
        CbpRegion::Prologue if offset == PROLOGUE_START => Landing::DriverSyscall,
        CbpRegion::Prologue => Landing::StatThenExitFault,
        // The second syscall byte decodes as the start of an `add eax, imm32`
        // whose immediate runs past the page: the fetch faults at the exit.
        CbpRegion::SyscallInsn if offset == SYSCALL_START => Landing::StatThenExitFault,
        CbpRegion::SyscallInsn => Landing::ExitFault,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regions_cover_page() {
        assert_eq!(region(0, false), CbpRegion::EntryStub);
        assert_eq!(region(5, false), CbpRegion::ResumeStub);
        assert_eq!(region(PAGE_SIZE - 1, false), CbpRegion::Sled);
        assert_eq!(region(PROLOGUE_START, true), CbpRegion::Prologue);
        assert_eq!(region(SYSCALL_START, true), CbpRegion::SyscallInsn);
    }

    #[test]
    fn unoptimized_page_has_no_syscall() {
        for off in 0..PAGE_SIZE {
            assert_ne!(landing(off, false), Landing::DriverSyscall);
            assert_ne!(landing(off, false), Landing::StatThenExitFault);
        }
    }

    #[test]
    fn misaligned_prologue_only_reaches_stat() {
        for off in PROLOGUE_START + 1..SYSCALL_START {
            assert_eq!(landing(off, true), Landing::StatThenExitFault);
        }
        assert_eq!(landing(SLED_START, true), Landing::DriverSyscall);
    }
}
