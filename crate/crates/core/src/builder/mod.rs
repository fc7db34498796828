//! The experiment builder: generate code, run it, reflect, repeat.
//!
//! Each debug iteration writes under `runs/<run_id>/iter<k>/`:
//!
//! ```text
//! code          program text as executed
//! work/         sandbox working directory
//! stdout        captured stdout
//! stderr        captured stderr
//! logs/         copies of log files the program wrote
//! artifacts/    archived artifacts
//! ```
//!
//! and `runs/<run_id>/run.meta` is rewritten after every iteration.
//!
//! Pilot tiers run in order. When reflection accepts a tier the same program
//! is re-run at the next tier with `PILOT_MODE` switched, without a new code
//! generation call. All tiers share one debug-iteration budget.

mod clock;
mod outcome;
mod sim;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, LazyLock};
use std::time::Duration;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

pub use clock::{Clock, ManualClock, SystemClock};
pub use outcome::{classify_outcome, OutcomeKind, RunOutcome, TerminationState};
pub use sim::SimulatedExecutor;

use crate::corpus::LibrarySnapshot;
use crate::gateway::proxy::{RunCredentials, ENV_PROXY_TOKEN, ENV_PROXY_URL};
use crate::gateway::{
    BudgetLimit, BudgetPolicy, CostScope, DecodingParams, Gateway, GatewayError, ModelSession,
    Stage,
};
use crate::ids::sha256_hex;
use crate::money::Micros;
use crate::planning::{Plan, TierName};
use crate::prompts::{PromptError, PromptKind, PromptSet};
use crate::protocol::{excerpt, first_fenced, tag_value};
use crate::sandbox::{collect_artifacts, ArtifactSet, ExecutionRecord, ExecutionRequest, Executor, ExitStatus};
use crate::store::{write_atomic, write_document, StoreError};

pub const RUN_META: &str = "run.meta";
pub const ENV_PILOT_MODE: &str = "PILOT_MODE";

static PILOT_ASSIGN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"(?m)^(\s*PILOT_MODE\s*(?::\s*\w+\s*)?=\s*)(["']?)(MINI_PILOT|PILOT|FULL_EXPERIMENT)(["']?)"#)
        .unwrap()
});

#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("plan {0} has no tiers to run")]
    NoTiers(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuilderConfig {
    pub language: String,
    pub entry_file: String,
    pub entry_command: Vec<String>,
    /// Attempts per model call whose reply cannot be parsed.
    pub retry_cap: u32,
    /// Consecutive identical failures (same error, same code) that end a run.
    pub stall_limit: u32,
    pub codegen_max_output_tokens: Option<u64>,
    pub cost_scope: CostScope,
    /// Head/tail window, in bytes, for output excerpts in prompts.
    pub excerpt_window: usize,
}

impl Default for BuilderConfig {
    fn default() -> Self {
        BuilderConfig {
            language: "python".into(),
            entry_file: "main.py".into(),
            entry_command: vec!["python3".into(), "main.py".into()],
            retry_cap: 3,
            stall_limit: 3,
            codegen_max_output_tokens: None,
            cost_scope: CostScope::All,
            excerpt_window: 8 * 1024,
        }
    }
}

impl BuilderConfig {
    /// Programs are POSIX shell scripts run with `sh`.
    pub fn shell() -> Self {
        BuilderConfig {
            language: "sh".into(),
            entry_file: "main.sh".into(),
            entry_command: vec!["sh".into(), "main.sh".into()],
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReflectionVerdict {
    Success,
    Continue,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionDecision {
    pub verdict: ReflectionVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub faithfulness_notes: String,
    pub code_patch_intent: String,
}

impl ReflectionDecision {
    fn fallback() -> Self {
        ReflectionDecision {
            verdict: ReflectionVerdict::Continue,
            reason: None,
            faithfulness_notes: String::new(),
            code_patch_intent: String::new(),
        }
    }
}

/// Parse a reflection reply; the `decision:` line is required.
pub fn parse_reflection(text: &str) -> Result<ReflectionDecision, String> {
    let raw = tag_value(text, "decision").ok_or("no `decision:` line")?;
    if raw.contains('|') {
        return Err(format!("ambiguous decision `{raw}`"));
    }
    let lower = raw.to_ascii_lowercase();
    let (verdict, reason) = if lower.starts_with("success") {
        (ReflectionVerdict::Success, None)
    } else if lower.starts_with("continue") {
        (ReflectionVerdict::Continue, None)
    } else if lower.starts_with("abort") {
        let reason = raw["abort".len()..]
            .trim_start_matches(|c: char| c == ':' || c == '-' || c.is_whitespace())
            .trim();
        let reason = if reason.is_empty() { "no reason given" } else { reason };
        (ReflectionVerdict::Abort, Some(reason.to_string()))
    } else {
        return Err(format!("unknown decision `{raw}`"));
    };
    Ok(ReflectionDecision {
        verdict,
        reason,
        faithfulness_notes: tag_value(text, "faithfulness").unwrap_or("").to_string(),
        code_patch_intent: tag_value(text, "intent").unwrap_or("").to_string(),
    })
}

/// Point the program's `PILOT_MODE = ...` assignments at `tier`.
pub fn switch_tier(code: &str, tier: TierName) -> String {
    PILOT_ASSIGN
        .replace_all(code, |c: &regex::Captures| {
            format!("{}{}{}{}", &c[1], &c[2], tier.as_str(), &c[4])
        })
        .into_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionSummary {
    pub exit_status: ExitStatus,
    #[serde(with = "crate::serde_secs")]
    pub duration: Duration,
    pub stdout_bytes: u64,
    pub stderr_bytes: u64,
    pub stdout_truncated: bool,
    pub stderr_truncated: bool,
    pub log_files: Vec<PathBuf>,
    pub artifacts: ArtifactSet,
    /// Fingerprint of a failed execution; `None` on success.
    pub error_signature: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebugIteration {
    pub index: u32,
    pub tier: TierName,
    pub code_sha256: Option<String>,
    pub code_regenerated: bool,
    pub execution: Option<ExecutionSummary>,
    pub reflection: Option<ReflectionDecision>,
    pub cost: Micros,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRun {
    pub id: String,
    pub plan_id: String,
    pub idea_id: String,
    pub attempt_index: u32,
    pub policy: BudgetPolicy,
    pub tier_history: Vec<TierName>,
    pub iterations: Vec<DebugIteration>,
    pub outcome: Option<RunOutcome>,
    pub total_cost: Micros,
    pub started_at: DateTime<Utc>,
    pub ended_at: Option<DateTime<Utc>>,
    #[serde(with = "crate::serde_secs")]
    pub elapsed: Duration,
    pub warnings: Vec<String>,
}

impl ExperimentRun {
    pub fn is_finished(&self) -> bool {
        self.outcome.is_some()
    }

    /// Highest tier whose execution reflection accepted.
    pub fn last_successful_tier(&self) -> Option<TierName> {
        self.iterations
            .iter()
            .rev()
            .find(|i| i.reflection.as_ref().is_some_and(|r| r.verdict == ReflectionVerdict::Success))
            .map(|i| i.tier)
    }

    /// Index of the last iteration that produced code.
    pub fn final_code_iteration(&self) -> Option<u32> {
        self.iterations
            .iter()
            .rev()
            .find(|i| i.code_sha256.is_some())
            .map(|i| i.index)
    }
}

/// Run `run_id` (`run-<plan8>-<seq>-<attempt>`) deterministic in its inputs.
pub fn run_id(plan_id: &str, job_seq: u64, attempt: u32) -> String {
    let digest = plan_id.strip_prefix("plan-").unwrap_or(plan_id);
    let short: String = digest.chars().take(8).collect();
    format!("run-{short}-{job_seq}-{attempt}")
}

pub fn iteration_dir(run_dir: &Path, index: u32) -> PathBuf {
    run_dir.join(format!("iter{index}"))
}

/// Where experiment code reaches the gateway's proxy.
#[derive(Clone)]
pub struct ProxyAccess {
    pub url: String,
    pub credentials: RunCredentials,
}

pub struct RunRequest<'a> {
    pub run_id: String,
    pub plan: &'a Plan,
    pub library: &'a LibrarySnapshot,
    pub policy: BudgetPolicy,
    pub attempt_index: u32,
    pub run_dir: PathBuf,
}

pub type ProgressFn = Arc<dyn Fn(&ExperimentRun) + Send + Sync>;

pub struct Builder {
    pub gateway: Arc<Gateway>,
    pub executor: Arc<dyn Executor>,
    pub prompts: Arc<PromptSet>,
    pub config: BuilderConfig,
    pub proxy: Option<ProxyAccess>,
    pub progress: Option<ProgressFn>,
    /// Model for code generation and reflection.
    pub model: String,
}

enum CallFailure {
    TotalBudget,
    Recoverable(String),
}

fn call_failure(e: GatewayError) -> CallFailure {
    match e.budget_limit() {
        Some(BudgetLimit::Total) => CallFailure::TotalBudget,
        _ => CallFailure::Recoverable(e.to_string()),
    }
}

enum Generated {
    Code(String),
    Truncated,
}

struct Prior {
    code: String,
    execution: String,
    reflection: ReflectionDecision,
}

impl Builder {
    pub fn new(
        gateway: Arc<Gateway>,
        executor: Arc<dyn Executor>,
        prompts: Arc<PromptSet>,
        model: impl Into<String>,
        config: BuilderConfig,
    ) -> Self {
        Builder {
            gateway,
            executor,
            prompts,
            config,
            proxy: None,
            progress: None,
            model: model.into(),
        }
    }

    pub fn with_proxy(mut self, proxy: ProxyAccess) -> Self {
        self.proxy = Some(proxy);
        self
    }

    pub fn with_progress(mut self, progress: ProgressFn) -> Self {
        self.progress = Some(progress);
        self
    }

    /// Drive one run to a terminal outcome. Only setup failures (invalid
    /// policy, unwritable run directory) are errors; everything that happens
    /// during the run ends up in the returned record.
    pub fn run(&self, req: RunRequest<'_>, clock: &dyn Clock) -> Result<ExperimentRun, BuildError> {
        let tiers: Vec<TierName> = req.plan.tiers_to_run().iter().map(|t| t.name).collect();
        if tiers.is_empty() {
            return Err(BuildError::NoTiers(req.plan.id.clone()));
        }
        std::fs::create_dir_all(&req.run_dir).map_err(StoreError::from)?;
        self.gateway.open_ledger(
            &req.run_id,
            req.policy.clone(),
            self.config.cost_scope,
            Some(req.run_dir.join("ledger.log")),
        )?;
        let token = self
            .proxy
            .as_ref()
            .map(|p| p.credentials.issue(&req.run_id));
        let result = self.drive(&req, &tiers, clock, token.as_deref());
        if let (Some(p), Some(t)) = (&self.proxy, &token) {
            p.credentials.revoke(t);
        }
        result
    }

    fn drive(
        &self,
        req: &RunRequest<'_>,
        tiers: &[TierName],
        clock: &dyn Clock,
        token: Option<&str>,
    ) -> Result<ExperimentRun, BuildError> {
        let policy = &req.policy;
        let session = ModelSession::new(self.gateway.clone(), &req.run_id, &self.model)
            .with_attempt(req.attempt_index)
            .with_params(DecodingParams {
                temperature: None,
                max_output_tokens: self.config.codegen_max_output_tokens,
            });
        let mut run = ExperimentRun {
            id: req.run_id.clone(),
            plan_id: req.plan.id.clone(),
            idea_id: req.plan.idea_id.clone(),
            attempt_index: req.attempt_index,
            policy: policy.clone(),
            tier_history: vec![tiers[0]],
            iterations: Vec::new(),
            outcome: None,
            total_cost: Micros::ZERO,
            started_at: Utc::now(),
            ended_at: None,
            elapsed: Duration::ZERO,
            warnings: Vec::new(),
        };
        self.persist(req, &mut run, clock);
        info!(run = %run.id, plan = %run.plan_id, "run started");

        let mut state = TerminationState::default();
        let mut tier_idx = 0usize;
        let mut code: Option<String> = None;
        let mut need_code = true;
        let mut prior: Option<Prior> = None;
        let mut streak: Option<(String, String, u32)> = None;

        for k in 1..=policy.max_debug_iterations {
            if clock.elapsed() >= policy.hard_time_limit {
                break;
            }
            let _ = self.gateway.set_iteration(&req.run_id, k);
            let tier = tiers[tier_idx];
            let mut it = DebugIteration {
                index: k,
                tier,
                code_sha256: None,
                code_regenerated: false,
                execution: None,
                reflection: None,
                cost: Micros::ZERO,
                warnings: Vec::new(),
            };

            if need_code {
                match self.generate(&session, k, req, tier, prior.as_ref()) {
                    Ok(Generated::Code(text)) => {
                        code = Some(text);
                        it.code_regenerated = true;
                        need_code = false;
                    }
                    Ok(Generated::Truncated) => {
                        state.generation_truncated = true;
                        it.warnings.push("code generation truncated at the output ceiling".into());
                        self.finish_iteration(req, &mut run, it, clock);
                        break;
                    }
                    Err(CallFailure::TotalBudget) => {
                        state.total_budget_denied = true;
                        self.finish_iteration(req, &mut run, it, clock);
                        break;
                    }
                    Err(CallFailure::Recoverable(msg)) => {
                        it.warnings.push(format!("code generation failed: {msg}"));
                        self.finish_iteration(req, &mut run, it, clock);
                        continue;
                    }
                }
            }
            let program = switch_tier(code.as_deref().unwrap_or_default(), tier);
            code = Some(program.clone());
            let code_sha = sha256_hex(program.as_bytes());
            it.code_sha256 = Some(code_sha.clone());

            let remaining = policy.hard_time_limit.saturating_sub(clock.elapsed());
            if remaining.is_zero() {
                self.finish_iteration(req, &mut run, it, clock);
                break;
            }
            let dir = iteration_dir(&req.run_dir, k);
            let (record, summary, exec_text) =
                match self.execute(req, k, tier, &program, &dir, remaining, token) {
                    Ok(v) => v,
                    Err(e) => {
                        it.warnings.push(format!("could not stage iteration: {e}"));
                        self.finish_iteration(req, &mut run, it, clock);
                        continue;
                    }
                };
            it.execution = Some(summary.clone());
            if clock.elapsed() >= policy.hard_time_limit {
                self.finish_iteration(req, &mut run, it, clock);
                break;
            }

            let usage = self.usage_text(&req.run_id, k, policy);
            let decision = match self.reflect(&session, k, req, tier, &program, &exec_text, &usage) {
                Ok((d, warning)) => {
                    it.warnings.extend(warning);
                    d
                }
                Err(CallFailure::TotalBudget) => {
                    state.total_budget_denied = true;
                    self.finish_iteration(req, &mut run, it, clock);
                    break;
                }
                Err(CallFailure::Recoverable(msg)) => {
                    it.warnings.push(format!("reflection failed, continuing: {msg}"));
                    ReflectionDecision::fallback()
                }
            };
            it.reflection = Some(decision.clone());
            let verdict = decision.verdict;
            let abort = decision.reason.clone().filter(|_| verdict == ReflectionVerdict::Abort);
            drop(record);

            // stall detection: same failure, same program, several times running
            match &summary.error_signature {
                Some(sig) if verdict != ReflectionVerdict::Success => {
                    let n = match &streak {
                        Some((s, c, n)) if s == sig && *c == code_sha => n + 1,
                        _ => 1,
                    };
                    streak = Some((sig.clone(), code_sha.clone(), n));
                    if n >= self.config.stall_limit {
                        state.stalled = true;
                    }
                }
                _ => streak = None,
            }
            self.finish_iteration(req, &mut run, it, clock);

            match verdict {
                ReflectionVerdict::Success if tier_idx + 1 == tiers.len() => {
                    state.final_tier_succeeded = true;
                    break;
                }
                ReflectionVerdict::Success => {
                    tier_idx += 1;
                    run.tier_history.push(tiers[tier_idx]);
                    prior = None;
                    streak = None;
                }
                ReflectionVerdict::Continue => {
                    need_code = true;
                    prior = Some(Prior {
                        code: program,
                        execution: exec_text,
                        reflection: decision,
                    });
                }
                ReflectionVerdict::Abort => {
                    state.abort_reason = abort;
                    break;
                }
            }
            if state.stalled {
                break;
            }
        }

        state.elapsed = clock.elapsed();
        state.iterations = run.iterations.len() as u32;
        let outcome = classify_outcome(&state, policy);
        info!(run = %run.id, outcome = %outcome.kind, "run finished");
        run.outcome = Some(outcome);
        run.ended_at = Some(Utc::now());
        self.persist(req, &mut run, clock);
        Ok(run)
    }

    fn finish_iteration(&self, req: &RunRequest<'_>, run: &mut ExperimentRun, mut it: DebugIteration, clock: &dyn Clock) {
        if let Ok(ledger) = self.gateway.ledger(&req.run_id) {
            it.cost = ledger.iteration_total(it.index);
        }
        for w in &it.warnings {
            warn!(run = %req.run_id, iteration = it.index, "{w}");
        }
        run.iterations.push(it);
        self.persist(req, run, clock);
    }

    fn persist(&self, req: &RunRequest<'_>, run: &mut ExperimentRun, clock: &dyn Clock) {
        run.elapsed = clock.elapsed();
        if let Ok(total) = self.gateway.ledger_total(&req.run_id) {
            run.total_cost = total;
        }
        if let Err(e) = write_document(&req.run_dir.join(RUN_META), run) {
            warn!(run = %run.id, "could not persist run: {e}");
            run.warnings.push(format!("persist failed: {e}"));
        }
        if let Some(progress) = &self.progress {
            progress(run);
        }
    }

    fn codeblock_text(&self, req: &RunRequest<'_>) -> String {
        let mut out = String::new();
        for id in &req.plan.codeblock_ids {
            if let Some(b) = req.library.get(id) {
                out.push_str(&format!("--- {} ({}) ---\n{}\n", b.id, b.name, b.code_text.trim_end()));
            }
        }
        if out.is_empty() {
            out.push_str("(none)\n");
        }
        out
    }

    fn generate(
        &self,
        session: &ModelSession,
        k: u32,
        req: &RunRequest<'_>,
        tier: TierName,
        prior: Option<&Prior>,
    ) -> Result<Generated, CallFailure> {
        let previous = match prior {
            None => String::new(),
            Some(p) => format!(
                "\n=== PREVIOUS ATTEMPT ===\n```{}\n{}\n```\n{}\nReviewer notes: {}\nRequested change: {}\n",
                self.config.language,
                p.code.trim_end(),
                p.execution,
                p.reflection.faithfulness_notes,
                p.reflection.code_patch_intent,
            ),
        };
        let plan_text = req.plan.text();
        let blocks = self.codeblock_text(req);
        let base = self
            .prompts
            .render(
                PromptKind::Debugging,
                &[
                    ("language", &self.config.language),
                    ("plan", &plan_text),
                    ("codeblocks", &blocks),
                    ("tier", tier.as_str()),
                    ("previous", &previous),
                ],
            )
            .map_err(|e| CallFailure::Recoverable(e.to_string()))?;
        let ext = Path::new(&self.config.entry_file)
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_string();
        let mut prompt = base.clone();
        for attempt in 1..=self.config.retry_cap.max(1) {
            let reply = session.ask(Stage::Codegen, k, &prompt).map_err(call_failure)?;
            if reply.truncated() {
                return Ok(Generated::Truncated);
            }
            let block = first_fenced(&reply.text, &[self.config.language.as_str(), ext.as_str()])
                .or_else(|| first_fenced(&reply.text, &[]));
            match block {
                Some(b) if !b.body.trim().is_empty() => return Ok(Generated::Code(b.body.to_string())),
                _ => {
                    warn!(run = %req.run_id, iteration = k, attempt, "reply had no code block");
                    prompt = format!(
                        "{base}\n\nYour previous reply contained no fenced code block. Reply with the complete program in one fenced block."
                    );
                }
            }
        }
        Err(CallFailure::Recoverable(format!(
            "no fenced code block after {} attempt(s)",
            self.config.retry_cap.max(1)
        )))
    }

    #[allow(clippy::too_many_arguments)]
    fn execute(
        &self,
        req: &RunRequest<'_>,
        k: u32,
        tier: TierName,
        program: &str,
        dir: &Path,
        remaining: Duration,
        token: Option<&str>,
    ) -> Result<(ExecutionRecord, ExecutionSummary, String), StoreError> {
        let work = dir.join("work");
        std::fs::create_dir_all(&work)?;
        write_atomic(&dir.join("code"), program.as_bytes())?;
        write_atomic(&work.join(&self.config.entry_file), program.as_bytes())?;

        let mut env = BTreeMap::new();
        env.insert(ENV_PILOT_MODE.to_string(), tier.as_str().to_string());
        env.insert("RUN_ID".to_string(), req.run_id.clone());
        env.insert("ITERATION".to_string(), k.to_string());
        if let (Some(p), Some(t)) = (&self.proxy, token) {
            env.insert(ENV_PROXY_URL.to_string(), p.url.clone());
            env.insert(ENV_PROXY_TOKEN.to_string(), t.to_string());
        }
        let request = ExecutionRequest {
            run_id: req.run_id.clone(),
            iteration_index: k,
            workdir: work.clone(),
            entry_command: self.config.entry_command.clone(),
            env,
            time_limit: req.policy.execution_time_limit_per_iteration.min(remaining),
        };
        let record = self.executor.execute(&request);

        write_atomic(&dir.join("stdout"), &record.stdout)?;
        write_atomic(&dir.join("stderr"), &record.stderr)?;
        let mut log_paths = Vec::new();
        for log in &record.log_files {
            let dst = dir.join("logs").join(&log.path);
            if let Some(parent) = dst.parent() {
                std::fs::create_dir_all(parent)?;
            }
            write_atomic(&dst, &log.bytes)?;
            log_paths.push(log.path.clone());
        }
        let artifacts = collect_artifacts(&record, &dir.join("artifacts"));

        let summary = ExecutionSummary {
            exit_status: record.exit_status.clone(),
            duration: record.duration,
            stdout_bytes: record.stdout.len() as u64,
            stderr_bytes: record.stderr.len() as u64,
            stdout_truncated: record.stdout_truncated,
            stderr_truncated: record.stderr_truncated,
            log_files: log_paths,
            artifacts,
            error_signature: error_signature(&record),
        };
        let text = self.execution_text(&record, &summary);
        Ok((record, summary, text))
    }

    fn execution_text(&self, record: &ExecutionRecord, summary: &ExecutionSummary) -> String {
        let w = self.config.excerpt_window;
        let status = match &record.exit_status {
            ExitStatus::Completed { code } => format!("exited with code {code}"),
            ExitStatus::TimedOut => "killed: time limit reached".to_string(),
            ExitStatus::LaunchFailed { diagnostic } => format!("failed to launch: {diagnostic}"),
        };
        let mut out = format!(
            "status: {status}\nduration: {:.1}s\n--- stdout ---\n{}\n--- stderr ---\n{}\n",
            record.duration.as_secs_f64(),
            excerpt(&String::from_utf8_lossy(&record.stdout), w),
            excerpt(&String::from_utf8_lossy(&record.stderr), w),
        );
        for log in &record.log_files {
            out.push_str(&format!(
                "--- log {} ---\n{}\n",
                log.path.display(),
                excerpt(&String::from_utf8_lossy(&log.bytes), w)
            ));
        }
        if !summary.artifacts.entries.is_empty() {
            out.push_str("--- artifacts ---\n");
            for a in &summary.artifacts.entries {
                out.push_str(&format!("{} ({} bytes)\n", a.path.display(), a.bytes));
            }
        }
        out
    }

    fn usage_text(&self, ledger: &str, k: u32, policy: &BudgetPolicy) -> String {
        let Ok(l) = self.gateway.ledger(ledger) else {
            return "(unavailable)".into();
        };
        let calls = l.records().iter().filter(|r| r.iteration_index == k).count();
        format!(
            "this iteration: {} over {calls} call(s) (limit {})\nrun total: {} (limit {})",
            l.iteration_total(k),
            policy.llm_cost_limit_per_iteration,
            l.total(),
            policy.total_cost_limit,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn reflect(
        &self,
        session: &ModelSession,
        k: u32,
        req: &RunRequest<'_>,
        tier: TierName,
        program: &str,
        execution: &str,
        usage: &str,
    ) -> Result<(ReflectionDecision, Option<String>), CallFailure> {
        let plan_text = req.plan.text();
        let prompt = self
            .prompts
            .render(
                PromptKind::Reflection,
                &[
                    ("plan", &plan_text),
                    ("tier", tier.as_str()),
                    ("code", program),
                    ("execution", execution),
                    ("usage", usage),
                ],
            )
            .map_err(|e| CallFailure::Recoverable(e.to_string()))?;
        let mut last = String::new();
        for _ in 0..self.config.retry_cap.max(1) {
            let reply = session.ask(Stage::Reflection, k, &prompt).map_err(call_failure)?;
            match parse_reflection(&reply.text) {
                Ok(d) => return Ok((d, None)),
                Err(e) => last = e,
            }
        }
        Ok((
            ReflectionDecision::fallback(),
            Some(format!("malformed reflection ({last}); treated as continue")),
        ))
    }
}

/// Failure fingerprint: exit status plus the last non-empty stderr line.
fn error_signature(record: &ExecutionRecord) -> Option<String> {
    if record.succeeded() {
        return None;
    }
    let status = match &record.exit_status {
        ExitStatus::Completed { code } => format!("exit {code}"),
        ExitStatus::TimedOut => "timeout".into(),
        ExitStatus::LaunchFailed { diagnostic } => format!("launch {diagnostic}"),
    };
    let stderr = String::from_utf8_lossy(&record.stderr);
    let last = stderr.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
    Some(sha256_hex(format!("{status}\n{}", last.trim()).as_bytes())[..16].to_string())
}
