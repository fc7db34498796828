//! Job scheduling, the engine facade over every store, and the HTTP API.
//!
//! An [`Engine`] owns one store root. Jobs enqueue N attempts of a plan; a
//! fixed pool of workers (the concurrency cap) drives each attempt through
//! the builder and reporting, and the meta-analysis for a plan is produced
//! once all of its attempts are terminal.

mod api;
mod config;
mod engine;
mod scheduler;

pub use api::{listen, router};
pub use config::{EngineConfig, Models, CONFIG_FILE, ENV_API_TOKEN, ENV_ROOT};
pub use engine::{
    provider_from_config, scripted_catalog, DroppedIdeaView, Engine, IdeateReport, IngestReport, PlanView, ReviewView,
    TriageEntry, STAGE_LEDGERS,
};

use serde::{Deserialize, Serialize};

use crate::builder::OutcomeKind;
use crate::corpus::CorpusError;
use crate::gateway::{BudgetPolicy, GatewayError};
use crate::ideation::IdeationError;
use crate::meta::MetaError;
use crate::money::Micros;
use crate::planning::{PlanningError, TierName};
use crate::reporting::ReportError;
use crate::store::{CatalogError, RunStatus, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("{kind} `{id}` not found")]
    NotFound { kind: &'static str, id: String },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("runs pending for plan {plan_id}: {pending} of {total} not terminal")]
    RunsPending {
        plan_id: String,
        pending: usize,
        total: usize,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Ideation(IdeationError),
    #[error(transparent)]
    Planning(PlanningError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(StoreError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl EngineError {
    pub(crate) fn not_found(kind: &'static str, id: &str) -> Self {
        EngineError::NotFound {
            kind,
            id: id.to_string(),
        }
    }
}

impl From<IdeationError> for EngineError {
    fn from(e: IdeationError) -> Self {
        match e {
            IdeationError::NotFound(id) => EngineError::NotFound { kind: "idea", id },
            e => EngineError::Ideation(e),
        }
    }
}

impl From<PlanningError> for EngineError {
    fn from(e: PlanningError) -> Self {
        match e {
            PlanningError::NotFound(id) => EngineError::NotFound { kind: "plan", id },
            e => EngineError::Planning(e),
        }
    }
}

impl From<StoreError> for EngineError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(path) => EngineError::NotFound {
                kind: "document",
                id: path,
            },
            e => EngineError::Store(e),
        }
    }
}

/// Request to run a plan `attempts` times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub plan_id: String,
    #[serde(default)]
    pub attempts: Option<u32>,
    #[serde(default)]
    pub policy: Option<BudgetPolicy>,
    #[serde(default)]
    pub concurrency_cap: Option<u32>,
}

impl JobSpec {
    pub fn new(plan_id: impl Into<String>) -> Self {
        JobSpec {
            plan_id: plan_id.into(),
            attempts: None,
            policy: None,
            concurrency_cap: None,
        }
    }

    pub fn attempts(mut self, n: u32) -> Self {
        self.attempts = Some(n);
        self
    }

    pub fn policy(mut self, policy: BudgetPolicy) -> Self {
        self.policy = Some(policy);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobTicket {
    pub job_id: String,
    pub run_ids: Vec<String>,
}

/// Live view of one run, as served by the status endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunView {
    pub run_id: String,
    pub job_id: String,
    pub plan_id: String,
    pub idea_id: String,
    pub attempt_index: u32,
    pub status: RunStatus,
    pub outcome: Option<OutcomeKind>,
    pub note: Option<String>,
    /// Current (or final) debug iteration, 0 before the first.
    pub iteration: u32,
    pub tier: Option<TierName>,
    /// Ledger total; never lower than a previously reported value.
    pub cost: Micros,
    pub log_tail: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobView {
    pub job_id: String,
    pub plan_id: String,
    pub idea_id: String,
    pub attempts: u32,
    pub concurrency_cap: u32,
    pub runs: Vec<RunView>,
    /// All runs terminal.
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SchedulerStats {
    pub queued: usize,
    pub running: usize,
    /// Most runs ever observed running at once.
    pub peak_running: usize,
    pub workers: usize,
}
