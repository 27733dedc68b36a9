// SPDX-License-Identifier: Apache-2.0

//! Choosing which thread steps next: a seeded random scheduler and an
//! exhaustive depth-first enumeration of interleavings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Kernel, TaskState, Tid};
use crate::costmodel::Work;
use crate::events::{Event, KillCause, TraceEntry, Witness};

pub const DEFAULT_MAX_STEPS: usize = 24;

/// Safety bound for seeded runs; scenarios end long before this.
pub const SEEDED_STEP_LIMIT: usize = 100_000;

fn default_max_steps() -> usize {
    DEFAULT_MAX_STEPS
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleMode {
    Seeded {
        #[serde(default)]
        seed: u64,
    },
    Exhaustive {
        #[serde(default = "default_max_steps")]
        max_steps: usize,
    },
}

impl Default for ScheduleMode {
    fn default() -> Self {
        ScheduleMode::Seeded { seed: 0 }
    }
}

/// Everything observable about one complete run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub schedule: Vec<Tid>,
    pub trace: Vec<TraceEntry>,
    pub events: Vec<Event>,
    pub witnesses: Vec<Witness>,
    pub violations: Vec<String>,
    /// Killed processes and why.
    pub kills: Vec<(String, KillCause)>,
    /// Threads still stalled when nothing could run.
    pub deadlocked: Vec<Tid>,
    /// The step bound cut the run short.
    pub truncated: bool,
    pub work: Work,
    pub filters_freed: Vec<usize>,
}

impl Kernel {
    /// Summarizes the current state as a finished run.
    pub fn outcome(&self, truncated: bool) -> RunOutcome {
        let kills = self
            .events
            .iter()
            .filter_map(|e| match e {
                Event::Kill { process, cause, .. } => Some((process.clone(), *cause)),
                _ => None,
            })
            .collect();
        let deadlocked = if truncated {
            Vec::new()
        } else {
            self.tasks
                .values()
                .filter(|t| matches!(t.state, TaskState::Stalled(_)))
                .map(|t| t.tid)
                .collect()
        };
        RunOutcome {
            schedule: self.schedule.clone(),
            trace: self.trace.clone(),
            events: self.events.clone(),
            witnesses: self.witnesses.clone(),
            violations: self.violations.clone(),
            kills,
            deadlocked,
            truncated,
            work: self.work.clone(),
            filters_freed: self.filters.iter().enumerate().filter(|(_, f)| f.is_freed()).map(|(i, _)| i).collect(),
        }
    }
}

/// Runs to completion, picking uniformly among runnable threads.
pub fn run_seeded(mut kernel: Kernel, seed: u64) -> RunOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kernel.reap_finished();
    let mut steps = 0;
    loop {
        let runnable = kernel.runnable();
        if runnable.is_empty() {
            return kernel.outcome(false);
        }
        if steps >= SEEDED_STEP_LIMIT {
            return kernel.outcome(true);
        }
        let tid = runnable[rng.random_range(0..runnable.len())];
        kernel.step(tid).expect("runnable thread steps");
        steps += 1;
    }
}

/// Runs with a fixed choice sequence; stops early if a listed thread is
/// not runnable.
pub fn run_schedule(mut kernel: Kernel, schedule: &[Tid]) -> RunOutcome {
    kernel.reap_finished();
    for &tid in schedule {
        if !kernel.runnable().contains(&tid) {
            break;
        }
        kernel.step(tid).expect("runnable thread steps");
    }
    let done = kernel.runnable().is_empty();
    kernel.outcome(!done)
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploreStats {
    pub leaves: u64,
    pub truncated: u64,
}

/// Visits every interleaving of at most `max_steps` scheduler decisions.
/// Threads are tried in ascending id order, so the visiting order is
/// deterministic.
pub fn explore(mut kernel: Kernel, max_steps: usize, visit: &mut dyn FnMut(RunOutcome)) -> ExploreStats {
    kernel.reap_finished();
    let mut stats = ExploreStats::default();
    dfs(kernel, 0, max_steps, visit, &mut stats);
    stats
}

fn dfs(kernel: Kernel, depth: usize, max_steps: usize, visit: &mut dyn FnMut(RunOutcome), stats: &mut ExploreStats) {
    let runnable = kernel.runnable();
    if runnable.is_empty() {
        stats.leaves += 1;
        visit(kernel.outcome(false));
        return;
    }
    if depth >= max_steps {
        stats.leaves += 1;
        stats.truncated += 1;
        visit(kernel.outcome(true));
        return;
    }
    let last = runnable.len() - 1;
    let mut kernel = Some(kernel);
    for (i, tid) in runnable.into_iter().enumerate() {
        let mut child = if i == last {
            kernel.take().expect("consumed once")
        } else {
            kernel.as_ref().expect("kept until last").clone()
        };
        child.step(tid).expect("runnable thread steps");
        dfs(child, depth + 1, max_steps, visit, stats);
    }
}
