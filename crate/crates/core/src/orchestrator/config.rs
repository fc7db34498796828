use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::builder::BuilderConfig;
use crate::gateway::{BudgetPolicy, PricingTable};
use crate::ideation::DEFAULT_THRESHOLD;
use crate::money::Micros;
use crate::sandbox::SandboxConfig;

/// Root directory used when none is given on the command line.
pub const ENV_ROOT: &str = "AUTOLAB_ROOT";
/// Shared API token; when set, every route except `/health` requires
/// `Authorization: Bearer <token>`.
pub const ENV_API_TOKEN: &str = "AUTOLAB_API_TOKEN";
pub const CONFIG_FILE: &str = "engine.toml";

/// Model names per pipeline role. They must exist in the provider catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Models {
    pub ideation: String,
    pub planning: String,
    pub builder: String,
    pub report: String,
    pub meta: String,
    /// Model generated experiments are told to use.
    pub experiment: String,
}

impl Default for Models {
    fn default() -> Self {
        let m = "scripted".to_string();
        Models {
            ideation: m.clone(),
            planning: m.clone(),
            builder: m.clone(),
            report: m.clone(),
            meta: m.clone(),
            experiment: m,
        }
    }
}

impl Models {
    pub fn all(&self) -> [&str; 6] {
        [
            &self.ideation,
            &self.planning,
            &self.builder,
            &self.report,
            &self.meta,
            &self.experiment,
        ]
    }
}

/// Engine settings, read from `<root>/engine.toml` when present.
///
/// ```toml
/// attempts = 5
/// concurrency_cap = 4
/// provider = "provider.toml"
///
/// [models]
/// builder = "gpt-4o"
/// experiment = "gpt-4o-mini"
///
/// [policy]
/// total_cost_limit = 10000000
/// llm_cost_limit_per_iteration = 1000000
/// max_debug_iterations = 25
/// execution_time_limit_per_iteration = 5400
/// hard_time_limit = 21600
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub models: Models,
    pub policy: BudgetPolicy,
    pub attempts: u32,
    pub concurrency_cap: u32,
    /// Provider catalog file (relative paths resolve against the root).
    pub provider: Option<PathBuf>,
    /// Scripted scenario; takes precedence over `provider`.
    pub scenario: Option<PathBuf>,
    /// Prices charged for scripted calls when no provider catalog is given.
    pub scripted_pricing: PricingTable,
    pub gateway_retries: u32,
    pub output_token_bound: Option<u64>,
    /// Spending cap for each pipeline stage ledger (ideation, planning,
    /// report, meta).
    pub stage_budget: Micros,
    pub builder: BuilderConfig,
    pub sandbox: SandboxConfig,
    /// Where the metering proxy listens; `None` disables it.
    pub proxy_bind: Option<String>,
    pub api_bind: String,
    pub dedup_threshold: f64,
    pub ideas_per_call: usize,
    /// Command that renders `report.tex` into `report.pdf`; `None` skips
    /// rendering.
    pub render_command: Option<Vec<String>>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            models: Models::default(),
            policy: BudgetPolicy::default(),
            attempts: 5,
            concurrency_cap: 4,
            provider: None,
            scenario: None,
            scripted_pricing: PricingTable::new(1_000_000, 4_000_000),
            gateway_retries: 3,
            output_token_bound: None,
            stage_budget: Micros::from_dollars(100),
            builder: BuilderConfig::default(),
            sandbox: SandboxConfig::default(),
            proxy_bind: Some("127.0.0.1:0".into()),
            api_bind: "127.0.0.1:8640".into(),
            dedup_threshold: DEFAULT_THRESHOLD,
            ideas_per_call: 10,
            render_command: None,
        }
    }
}

impl EngineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, EngineError> {
        toml::from_str(text).map_err(|e| EngineError::Config(e.to_string()))
    }

    /// `<root>/engine.toml`, or defaults when the file does not exist.
    pub fn load_or_default(root: &Path) -> Result<Self, EngineError> {
        let path = root.join(CONFIG_FILE);
        match std::fs::read_to_string(&path) {
            Ok(text) => Self::from_toml_str(&text)
                .map_err(|e| EngineError::Config(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(EngineError::Config(format!("{}: {e}", path.display()))),
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let mut bad = Vec::new();
        if self.attempts == 0 {
            bad.push("attempts must be >= 1".to_string());
        }
        if self.concurrency_cap == 0 {
            bad.push("concurrency_cap must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.dedup_threshold) {
            bad.push("dedup_threshold must be within [0, 1]".to_string());
        }
        if self.builder.entry_command.is_empty() {
            bad.push("builder.entry_command is empty".to_string());
        }
        if let Err(e) = self.policy.validate() {
            bad.push(format!("policy: {e}"));
        }
        if self.stage_budget == Micros::ZERO {
            bad.push("stage_budget must be > 0".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(EngineError::Config(bad.join("; ")))
        }
    }
}
