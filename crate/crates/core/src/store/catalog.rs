use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{read_document, write_document, StoreError};
use crate::builder::{ExperimentRun, OutcomeKind, RunOutcome, RUN_META};
use crate::gateway::BudgetPolicy;

pub const RECOVERY_NOTE: &str = "recovered after engine restart: no live supervisor";

/// Store root layout.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn ideas(&self) -> PathBuf {
        self.root.join("ideas")
    }
    pub fn plans(&self) -> PathBuf {
        self.root.join("plans")
    }
    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }
    pub fn run(&self, run_id: &str) -> PathBuf {
        self.runs().join(run_id)
    }
    pub fn meta(&self) -> PathBuf {
        self.root.join("meta")
    }
    pub fn reviews(&self) -> PathBuf {
        self.root.join("reviews")
    }
    pub fn ledgers(&self) -> PathBuf {
        self.root.join("ledgers")
    }
    pub fn prompts(&self) -> PathBuf {
        self.root.join("prompts")
    }
    pub fn catalog(&self) -> PathBuf {
        self.root.join("catalog.json")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Queued,
    Running,
    Terminal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunEntry {
    pub run_id: String,
    pub job_id: String,
    pub plan_id: String,
    pub idea_id: String,
    pub attempt_index: u32,
    pub status: RunStatus,
    pub outcome: Option<OutcomeKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// Relative to the store root.
    pub locator: PathBuf,
    pub updated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub seq: u64,
    pub plan_id: String,
    pub idea_id: String,
    pub attempts: u32,
    pub policy: BudgetPolicy,
    /// Most runs of this job allowed in "running" at once.
    #[serde(default = "one")]
    pub concurrency_cap: u32,
    pub run_ids: Vec<String>,
    pub created_at: DateTime<Utc>,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct CatalogData {
    runs: BTreeMap<String, RunEntry>,
    jobs: BTreeMap<String, JobRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("run {run_id}: cannot move from {from:?} to {to:?}")]
    Backward {
        run_id: String,
        from: RunStatus,
        to: RunStatus,
    },
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("duplicate id `{0}`")]
    Duplicate(String),
}

/// Index of jobs and runs with their lifecycle status. Every mutation is
/// serialized and written through atomically.
pub struct Catalog {
    layout: Layout,
    data: Mutex<CatalogData>,
}

impl Catalog {
    pub fn open(layout: Layout) -> Result<Self, StoreError> {
        let data = match read_document(&layout.catalog()) {
            Ok(d) => d,
            Err(StoreError::NotFound(_)) => CatalogData::default(),
            Err(e) => return Err(e),
        };
        Ok(Catalog {
            layout,
            data: Mutex::new(data),
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    fn save(&self, data: &CatalogData) -> Result<(), StoreError> {
        write_document(&self.layout.catalog(), data)
    }

    pub fn next_job_seq(&self) -> u64 {
        self.data.lock().unwrap().jobs.len() as u64 + 1
    }

    /// Record a job and its queued runs in one write.
    pub fn add_job(&self, job: JobRecord, runs: Vec<RunEntry>) -> Result<(), CatalogError> {
        let mut data = self.data.lock().unwrap();
        if data.jobs.contains_key(&job.job_id) {
            return Err(CatalogError::Duplicate(job.job_id));
        }
        if let Some(r) = runs.iter().find(|r| data.runs.contains_key(&r.run_id)) {
            return Err(CatalogError::Duplicate(r.run_id.clone()));
        }
        let mut next = data.clone();
        next.jobs.insert(job.job_id.clone(), job);
        for r in runs {
            next.runs.insert(r.run_id.clone(), r);
        }
        self.save(&next)?;
        *data = next;
        Ok(())
    }

    /// Move a run forward. Re-asserting the current non-terminal status is
    /// a no-op; going backwards or leaving Terminal is an error.
    pub fn set_status(
        &self,
        run_id: &str,
        status: RunStatus,
        outcome: Option<OutcomeKind>,
        note: Option<String>,
    ) -> Result<RunEntry, CatalogError> {
        let mut data = self.data.lock().unwrap();
        let entry = data
            .runs
            .get(run_id)
            .ok_or_else(|| CatalogError::UnknownRun(run_id.to_string()))?;
        let allowed = status > entry.status || (status == entry.status && status != RunStatus::Terminal);
        if !allowed {
            return Err(CatalogError::Backward {
                run_id: run_id.to_string(),
                from: entry.status,
                to: status,
            });
        }
        let mut next = data.clone();
        let e = next.runs.get_mut(run_id).expect("checked");
        e.status = status;
        if outcome.is_some() {
            e.outcome = outcome;
        }
        if note.is_some() {
            e.note = note;
        }
        e.updated_at = Utc::now();
        let updated = e.clone();
        self.save(&next)?;
        *data = next;
        Ok(updated)
    }

    pub fn run(&self, run_id: &str) -> Option<RunEntry> {
        self.data.lock().unwrap().runs.get(run_id).cloned()
    }

    pub fn runs(&self) -> Vec<RunEntry> {
        self.data.lock().unwrap().runs.values().cloned().collect()
    }

    pub fn job(&self, job_id: &str) -> Option<JobRecord> {
        self.data.lock().unwrap().jobs.get(job_id).cloned()
    }

    pub fn jobs(&self) -> Vec<JobRecord> {
        let mut jobs: Vec<JobRecord> = self.data.lock().unwrap().jobs.values().cloned().collect();
        jobs.sort_by_key(|j| j.seq);
        jobs
    }

    pub fn runs_for_plan(&self, plan_id: &str) -> Vec<RunEntry> {
        let mut runs: Vec<RunEntry> = self
            .data
            .lock()
            .unwrap()
            .runs
            .values()
            .filter(|r| r.plan_id == plan_id)
            .cloned()
            .collect();
        runs.sort_by(|a, b| (&a.job_id, a.attempt_index).cmp(&(&b.job_id, b.attempt_index)));
        runs
    }

    /// Sweep runs left "running" by a previous process: each becomes terminal
    /// HardTimeLimit with a recovery note, in the catalog and in its
    /// `run.meta` when one exists. Returns the swept ids.
    pub fn recover(&self) -> Result<Vec<String>, CatalogError> {
        let orphans: Vec<RunEntry> = self
            .runs()
            .into_iter()
            .filter(|r| r.status == RunStatus::Running)
            .collect();
        let mut swept = Vec::new();
        for entry in orphans {
            let meta_path = self.layout.root.join(&entry.locator).join(RUN_META);
            if let Ok(mut run) = read_document::<ExperimentRun>(&meta_path) {
                if run.outcome.is_none() {
                    run.outcome = Some(RunOutcome {
                        kind: OutcomeKind::HardTimeLimit,
                        detail: RECOVERY_NOTE.to_string(),
                    });
                    run.ended_at = Some(Utc::now());
                    write_document(&meta_path, &run).map_err(CatalogError::Store)?;
                }
            }
            self.set_status(
                &entry.run_id,
                RunStatus::Terminal,
                Some(OutcomeKind::HardTimeLimit),
                Some(RECOVERY_NOTE.to_string()),
            )?;
            swept.push(entry.run_id);
        }
        Ok(swept)
    }
}

/// Load a run record from its directory.
pub fn load_run(run_dir: &Path) -> Result<ExperimentRun, StoreError> {
    read_document(&run_dir.join(RUN_META))
}
