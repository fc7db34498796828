//! Executor that simulates a program instead of running it.
//!
//! The program text carries directives, one per line, anywhere in the file:
//!
//! ```text
//! # sim-exit: 1
//! # sim-seconds: 120
//! # sim-stdout: accuracy 0.81
//! # sim-stderr: Traceback: KeyError 'score'
//! # sim-artifact: results.json
//! ```
//!
//! Simulated seconds advance a [`ManualClock`]; a program that would run past
//! its time limit reports `TimedOut` after exactly the limit.

use std::sync::Arc;
use std::time::Duration;

use super::clock::ManualClock;
use crate::protocol::tag_value;
use crate::sandbox::{ExecutionRecord, ExecutionRequest, ExitStatus, Executor};

pub struct SimulatedExecutor {
    clock: Arc<ManualClock>,
    entry_file: String,
}

impl SimulatedExecutor {
    pub fn new(clock: Arc<ManualClock>, entry_file: &str) -> Self {
        SimulatedExecutor {
            clock,
            entry_file: entry_file.to_string(),
        }
    }
}

impl Executor for SimulatedExecutor {
    fn execute(&self, req: &ExecutionRequest) -> ExecutionRecord {
        let program = match std::fs::read_to_string(req.workdir.join(&self.entry_file)) {
            Ok(p) => p,
            Err(e) => return ExecutionRecord::launch_failed(&req.workdir, format!("no program: {e}")),
        };
        let directive = |key: &str| tag_value(&program, key).map(str::to_string);
        let seconds: f64 = directive("sim-seconds")
            .and_then(|s| s.parse().ok())
            .unwrap_or(1.0);
        let wanted = Duration::try_from_secs_f64(seconds.max(0.0)).unwrap_or(Duration::MAX);
        let timed_out = wanted > req.time_limit;
        let duration = wanted.min(req.time_limit);
        self.clock.advance(duration);

        let mut artifacts = Vec::new();
        if let Some(name) = directive("sim-artifact") {
            if std::fs::write(req.workdir.join(&name), b"simulated\n").is_ok() {
                artifacts.push(name.into());
            }
        }
        let line = |key: &str| {
            directive(key)
                .map(|s| format!("{s}\n").into_bytes())
                .unwrap_or_default()
        };
        ExecutionRecord {
            exit_status: if timed_out {
                ExitStatus::TimedOut
            } else {
                ExitStatus::Completed {
                    code: directive("sim-exit").and_then(|s| s.parse().ok()).unwrap_or(0),
                }
            },
            stdout: line("sim-stdout"),
            stderr: line("sim-stderr"),
            stdout_truncated: false,
            stderr_truncated: false,
            log_files: Vec::new(),
            duration,
            artifacts,
            workdir: req.workdir.clone(),
            process_group: None,
        }
    }
}
