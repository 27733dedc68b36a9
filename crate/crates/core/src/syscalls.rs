// SPDX-License-Identifier: Apache-2.0

//! x86-64 syscall numbers used by the simulator.

/// Size of the dense filter table: one slot per syscall number.
pub const SYSCALL_TABLE_SIZE: usize = 349;

pub const READ: u32 = 0;
pub const WRITE: u32 = 1;
pub const OPEN: u32 = 2;
pub const CLOSE: u32 = 3;
pub const STAT: u32 = 4;
pub const FSTAT: u32 = 5;
pub const MMAP: u32 = 9;
pub const MPROTECT: u32 = 10;
pub const MUNMAP: u32 = 11;
pub const BRK: u32 = 12;
pub const IOCTL: u32 = 16;
pub const CLONE: u32 = 56;
pub const FORK: u32 = 57;
pub const EXECVE: u32 = 59;
pub const EXIT: u32 = 60;
pub const GETPPID: u32 = 110;
pub const EXIT_GROUP: u32 = 231;
pub const OPENAT: u32 = 257;

const NAMES: &[(&str, u32)] = &[
    ("read", READ),
    ("write", WRITE),
    ("open", OPEN),
    ("close", CLOSE),
    ("stat", STAT),
    ("fstat", FSTAT),
    ("lstat", 6),
    ("poll", 7),
    ("lseek", 8),
    ("mmap", MMAP),
    ("mprotect", MPROTECT),
    ("munmap", MUNMAP),
    ("brk", BRK),
    ("rt_sigaction", 13),
    ("rt_sigprocmask", 14),
    ("rt_sigreturn", 15),
    ("ioctl", IOCTL),
    ("pread64", 17),
    ("pwrite64", 18),
    ("readv", 19),
    ("writev", 20),
    ("access", 21),
    ("pipe", 22),
    ("select", 23),
    ("sched_yield", 24),
    ("mremap", 25),
    ("msync", 26),
    ("madvise", 28),
    ("dup", 32),
    ("dup2", 33),
    ("nanosleep", 35),
    ("getpid", 39),
    ("socket", 41),
    ("connect", 42),
    ("clone", CLONE),
    ("fork", FORK),
    ("vfork", 58),
    ("execve", EXECVE),
    ("exit", EXIT),
    ("wait4", 61),
    ("kill", 62),
    ("uname", 63),
    ("fcntl", 72),
    ("flock", 73),
    ("fsync", 74),
    ("ftruncate", 77),
    ("getdents", 78),
    ("getcwd", 79),
    ("chdir", 80),
    ("rename", 82),
    ("mkdir", 83),
    ("unlink", 87),
    ("readlink", 89),
    ("chmod", 90),
    ("fchmod", 91),
    ("chown", 92),
    ("fchown", 93),
    ("umask", 95),
    ("gettimeofday", 96),
    ("getrlimit", 97),
    ("getuid", 102),
    ("getgid", 104),
    ("setuid", 105),
    ("setgid", 106),
    ("geteuid", 107),
    ("getegid", 108),
    ("setpgid", 109),
    ("getppid", GETPPID),
    ("getpgrp", 111),
    ("setsid", 112),
    ("getgroups", 115),
    ("setgroups", 116),
    ("setresuid", 117),
    ("setresgid", 119),
    ("statfs", 137),
    ("fstatfs", 138),
    ("prctl", 157),
    ("arch_prctl", 158),
    ("gettid", 186),
    ("futex", 202),
    ("getdents64", 217),
    ("set_tid_address", 218),
    ("clock_gettime", 228),
    ("exit_group", EXIT_GROUP),
    ("openat", OPENAT),
    ("newfstatat", 262),
    ("unlinkat", 263),
    ("renameat", 264),
    ("faccessat", 269),
    ("set_robust_list", 273),
    ("pipe2", 293),
    ("prlimit64", 302),
    ("getrandom", 318),
];

pub fn name(nr: u32) -> Option<&'static str> {
    NAMES.iter().find(|&&(_, n)| n == nr).map(|&(s, _)| s)
}

pub fn number(name: &str) -> Option<u32> {
    NAMES.iter().find(|&&(s, _)| s == name).map(|&(_, n)| n)
}

/// `name(nr)` or `sys_<nr>` for numbers without a known name.
pub fn display(nr: u32) -> String {
    name(nr).map(str::to_string).unwrap_or_else(|| format!("sys_{nr}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for &(s, n) in NAMES {
            assert_eq!(number(s), Some(n));
            assert_eq!(name(n), Some(s));
            assert!((n as usize) < SYSCALL_TABLE_SIZE);
        }
    }
}
