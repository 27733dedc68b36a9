// SPDX-License-Identifier: Apache-2.0

//! Deterministic simulator for deep syscall-argument filtering with
//! page-table-based protection of the filtered arguments.
//!
//! A [`Kernel`](tasks::Kernel) holds simulated address spaces, tasks and
//! filter tables. Scripted threads issue syscalls and memory accesses; the
//! dispatcher in [`dpti`] protects string arguments while they are checked
//! and used, and [`sgxdom`] reuses the same page-table tricks to confine
//! enclave code. Runs are scheduled by a seeded scheduler or enumerated
//! exhaustively, and [`costmodel`] turns the counted work into cycles.
//!
//! ```
//! use dpti_core::{report, scenario::Scenario};
//!
//! let text = r#"{
//!     "schema": "dpti-scenario/1",
//!     "name": "hello",
//!     "processes": [{"name": "p", "threads": [{"ops": [{"op": "syscall", "nr": "getppid"}]}]}]
//! }"#;
//! let r = report::run(&Scenario::from_json(text).unwrap()).unwrap();
//! assert_eq!(r.total_cycles, 295.0);
//! ```

pub mod bench;
pub mod costmodel;
pub mod dpti;
pub mod events;
pub mod filters;
pub mod report;
pub mod scenario;
pub mod sgxdom;
pub mod syscalls;
pub mod tasks;
pub mod vmem;
pub mod wire;

pub use dpti::Variant;
pub use report::SimReport;
pub use scenario::Scenario;
pub use tasks::Kernel;
