use std::collections::{HashMap, VecDeque};
use std::sync::{Condvar, Mutex};

use super::SchedulerStats;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Task {
    pub run_id: String,
    pub job_id: String,
    pub job_cap: u32,
}

#[derive(Default)]
struct State {
    queue: VecDeque<Task>,
    running: usize,
    by_job: HashMap<String, u32>,
    peak: usize,
    workers: usize,
    shutdown: bool,
}

/// FIFO run queue. The global bound comes from the number of workers
/// pulling from it; a task is only handed out while its job has fewer than
/// `job_cap` tasks in flight.
#[derive(Default)]
pub(crate) struct RunQueue {
    state: Mutex<State>,
    changed: Condvar,
}

impl RunQueue {
    pub fn push(&self, task: Task) {
        let mut st = self.state.lock().unwrap();
        if st.queue.iter().any(|t| t.run_id == task.run_id) {
            return;
        }
        st.queue.push_back(task);
        self.changed.notify_all();
    }

    pub fn add_worker(&self) {
        self.state.lock().unwrap().workers += 1;
    }

    /// Block until a task is eligible, or return `None` on shutdown.
    pub fn take(&self) -> Option<Task> {
        let mut st = self.state.lock().unwrap();
        loop {
            if st.shutdown {
                return None;
            }
            let eligible = st
                .queue
                .iter()
                .position(|t| st.by_job.get(&t.job_id).copied().unwrap_or(0) < t.job_cap.max(1));
            if let Some(i) = eligible {
                let task = st.queue.remove(i).expect("index in range");
                st.running += 1;
                st.peak = st.peak.max(st.running);
                *st.by_job.entry(task.job_id.clone()).or_default() += 1;
                return Some(task);
            }
            st = self.changed.wait(st).unwrap();
        }
    }

    pub fn finish(&self, task: &Task) {
        let mut st = self.state.lock().unwrap();
        st.running -= 1;
        if let Some(n) = st.by_job.get_mut(&task.job_id) {
            *n -= 1;
            if *n == 0 {
                st.by_job.remove(&task.job_id);
            }
        }
        self.changed.notify_all();
    }

    /// Block until nothing is queued or running.
    pub fn wait_idle(&self) {
        let mut st = self.state.lock().unwrap();
        while !(st.queue.is_empty() && st.running == 0) && !st.shutdown {
            st = self.changed.wait(st).unwrap();
        }
    }

    pub fn shutdown(&self) {
        self.state.lock().unwrap().shutdown = true;
        self.changed.notify_all();
    }

    pub fn stats(&self) -> SchedulerStats {
        let st = self.state.lock().unwrap();
        SchedulerStats {
            queued: st.queue.len(),
            running: st.running,
            peak_running: st.peak,
            workers: st.workers,
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;
    use std::time::Duration;

    use super::*;

    fn task(run: &str, job: &str, cap: u32) -> Task {
        Task {
            run_id: run.into(),
            job_id: job.into(),
            job_cap: cap,
        }
    }

    #[test]
    fn per_job_cap_skips_to_other_jobs() {
        let q = RunQueue::default();
        q.push(task("a1", "a", 1));
        q.push(task("a2", "a", 1));
        q.push(task("b1", "b", 2));
        q.push(task("b1", "b", 2));
        assert_eq!(q.stats().queued, 3);
        let first = q.take().unwrap();
        assert_eq!(first.run_id, "a1");
        // a is at its cap, so b1 jumps the queue
        assert_eq!(q.take().unwrap().run_id, "b1");
        q.finish(&first);
        assert_eq!(q.take().unwrap().run_id, "a2");
        assert_eq!(q.stats().peak_running, 2);
    }

    #[test]
    fn shutdown_wakes_blocked_workers() {
        let q = Arc::new(RunQueue::default());
        let waiter = {
            let q = q.clone();
            std::thread::spawn(move || q.take())
        };
        std::thread::sleep(Duration::from_millis(50));
        q.shutdown();
        assert_eq!(waiter.join().unwrap(), None);
    }

    #[test]
    fn workers_never_exceed_pool_size() {
        let q = Arc::new(RunQueue::default());
        for i in 0..40 {
            q.push(task(&format!("r{i}"), &format!("j{}", i % 3), 10));
        }
        let handles: Vec<_> = (0..3)
            .map(|_| {
                let q = q.clone();
                q.add_worker();
                std::thread::spawn(move || {
                    while let Some(t) = q.take() {
                        std::thread::sleep(Duration::from_millis(1));
                        q.finish(&t);
                    }
                })
            })
            .collect();
        q.wait_idle();
        assert!(q.stats().peak_running <= 3);
        q.shutdown();
        for h in handles {
            h.join().unwrap();
        }
    }
}
