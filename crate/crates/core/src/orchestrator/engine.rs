use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock, Weak};
use std::thread::JoinHandle;
use std::time::Duration;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use tracing::{error, info, warn};

use super::scheduler::{RunQueue, Task};
use super::{
    EngineConfig, EngineError, JobSpec, JobTicket, JobView, Models, RunView, SchedulerStats, ENV_API_TOKEN,
};
use crate::builder::{
    iteration_dir, run_id, Builder, ExperimentRun, OutcomeKind, ProgressFn, ProxyAccess, RunRequest, SystemClock,
};
use crate::corpus::{Corpus, PaperDocument};
use crate::gateway::http::HttpProvider;
use crate::gateway::proxy::{proxy_listen, RunCredentials, ServerHandle};
use crate::gateway::scripted::{Scenario, ScriptedProvider};
use crate::gateway::{
    BudgetPolicy, CompletionRequest, CostLedger, CostScope, Gateway, ModelSession, PricingTable, Provider,
    ProviderConfig, ProviderError, ProviderReply, UsageRecord,
};
use crate::ideation::{
    dedup_indices, GeneticOperator, HumanAnnotation, Idea, IdeaView, IdeationError, Ideator, Rating, TermFrequency,
};
use crate::meta::{
    load_meta, meta_report, save_meta, AuditEvent, GateDecision, InternalReview, MetaAnalysisReport, ReviewRating,
    ReviewStore,
};
use crate::money::Micros;
use crate::planning::{validate_plan, Plan, PlanStore, Planner, TierName, ValidationReport};
use crate::prompts::PromptSet;
use crate::reporting::{load_report, load_summary, render_document, CommandRenderer, Report, Reporter, ResultSummary};
use crate::sandbox::{Executor, Sandbox};
use crate::store::{load_run, Catalog, JobRecord, Layout, RecordLog, RunEntry, RunStatus, StoreError};

/// Ledgers for model calls made outside experiment runs.
pub const STAGE_LEDGERS: [&str; 4] = ["ideation", "planning", "report", "meta"];
const LOG_TAIL_LINES: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub papers: Vec<String>,
    pub codeblocks: Vec<String>,
    pub library_version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedIdeaView {
    pub name: String,
    pub nearest_kept: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdeateReport {
    pub pairs: usize,
    pub generated: usize,
    pub kept: Vec<String>,
    pub dropped: Vec<DroppedIdeaView>,
    pub failures: Vec<String>,
}

/// One line of a triage export. Only `idea_id` is required on import; the
/// idea context fields are informational.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageEntry {
    pub idea_id: String,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub short_description: String,
    #[serde(default)]
    pub hypothesis: String,
    #[serde(default)]
    pub operator: Option<GeneticOperator>,
    #[serde(default)]
    pub rating: Rating,
    #[serde(default)]
    pub notes: String,
    #[serde(default)]
    pub conditioning_text: String,
}

impl TriageEntry {
    fn annotation(&self) -> HumanAnnotation {
        HumanAnnotation {
            idea_id: self.idea_id.clone(),
            rating: self.rating,
            notes: self.notes.clone(),
            conditioning_text: self.conditioning_text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanView {
    pub plan: Plan,
    pub text: String,
    pub validation: ValidationReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewView {
    pub decision: GateDecision,
    pub ratings: Vec<ReviewRating>,
    pub audit: Vec<AuditEvent>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Live {
    iteration: u32,
    tier: Option<TierName>,
}

/// Facade over one store root: every pipeline operation, the run scheduler,
/// and the live status view.
pub struct Engine {
    layout: Layout,
    config: EngineConfig,
    gateway: Arc<Gateway>,
    prompts: Arc<PromptSet>,
    executor: Arc<dyn Executor>,
    corpus: Corpus,
    ideas: crate::ideation::IdeaStore,
    plans: PlanStore,
    catalog: Catalog,
    reviews: Mutex<ReviewStore>,
    proxy: Option<(ServerHandle, RunCredentials)>,
    api_token: RwLock<Option<String>>,
    queue: Arc<RunQueue>,
    workers: Mutex<Vec<JoinHandle<()>>>,
    started: AtomicBool,
    enqueue_lock: Mutex<()>,
    ideate_lock: Mutex<()>,
    meta_lock: Mutex<()>,
    live: Arc<Mutex<HashMap<String, Live>>>,
    reported_cost: Mutex<HashMap<String, Micros>>,
}

/// A catalog with every configured model at the same price.
pub fn scripted_catalog(models: &Models, pricing: PricingTable) -> ProviderConfig {
    let mut cfg = ProviderConfig::scripted(&models.builder, pricing);
    for m in models.all() {
        cfg.models.insert(m.to_string(), pricing);
    }
    cfg
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

pub const NO_PROVIDER: &str = "no provider configured: set `provider` or `scenario` (or pass --scenario)";

/// Stand-in when neither a catalog nor a scenario is configured.
struct Unconfigured;

impl Provider for Unconfigured {
    fn name(&self) -> &str {
        "unconfigured"
    }

    fn complete(&self, _req: &CompletionRequest) -> Result<ProviderReply, ProviderError> {
        Err(ProviderError::fatal(NO_PROVIDER))
    }
}

/// Provider selected by the configuration: a scripted scenario when one is
/// set, otherwise the HTTP provider described by the catalog file.
pub fn provider_from_config(
    root: &Path,
    config: &EngineConfig,
) -> Result<(Arc<dyn Provider>, ProviderConfig), EngineError> {
    let catalog = match &config.provider {
        Some(p) => Some(ProviderConfig::load(&resolve(root, p))?),
        None => None,
    };
    if let Some(path) = &config.scenario {
        let scenario = Scenario::load(&resolve(root, path))?;
        let catalog = catalog.unwrap_or_else(|| scripted_catalog(&config.models, config.scripted_pricing));
        return Ok((Arc::new(ScriptedProvider::new(scenario)), catalog));
    }
    let Some(catalog) = catalog else {
        // storage-only commands still work; the first model call fails
        let catalog = scripted_catalog(&config.models, config.scripted_pricing);
        return Ok((Arc::new(Unconfigured), catalog));
    };
    let http = HttpProvider::from_config(&catalog).map_err(|e| EngineError::Config(e.message))?;
    Ok((Arc::new(http), catalog))
}

fn list_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>, EngineError> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut inner: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            inner.sort();
            out.extend(inner);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn last_lines(text: &str, n: usize) -> Vec<String> {
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(n)..]
        .iter()
        .map(|l| l.to_string())
        .collect()
}

impl Engine {
    /// Open `root` with the provider and sandbox described by `config`.
    pub fn open(root: impl Into<PathBuf>, config: EngineConfig) -> Result<Arc<Engine>, EngineError> {
        let root = root.into();
        let provider = provider_from_config(&root, &config)?;
        let executor: Arc<dyn Executor> = Arc::new(Sandbox::new(config.sandbox.clone()));
        Self::open_with(root, config, provider, executor)
    }

    /// Open `root` with an explicit provider and executor. Runs left
    /// "running" by a previous process are swept to terminal here.
    pub fn open_with(
        root: impl Into<PathBuf>,
        config: EngineConfig,
        (provider, catalog): (Arc<dyn Provider>, ProviderConfig),
        executor: Arc<dyn Executor>,
    ) -> Result<Arc<Engine>, EngineError> {
        config.validate()?;
        for m in config.models.all() {
            catalog.pricing(m)?;
        }
        let layout = Layout::new(root.into());
        std::fs::create_dir_all(&layout.root)?;
        let prompts = if layout.prompts().is_dir() {
            PromptSet::load(&layout.prompts()).map_err(|e| EngineError::Config(e.to_string()))?
        } else {
            PromptSet::default()
        };
        let mut gateway =
            Gateway::new(provider, catalog).with_retries(config.gateway_retries.max(1), Duration::from_millis(200));
        if let Some(bound) = config.output_token_bound {
            gateway = gateway.with_output_bound(bound);
        }
        let gateway = Arc::new(gateway);
        let stage_policy = BudgetPolicy {
            total_cost_limit: config.stage_budget,
            llm_cost_limit_per_iteration: config.stage_budget,
            ..config.policy.clone()
        };
        for stage in STAGE_LEDGERS {
            gateway.open_ledger(
                stage,
                stage_policy.clone(),
                CostScope::All,
                Some(layout.ledgers().join(format!("{stage}.log"))),
            )?;
        }
        let corpus = Corpus::open(layout.corpus())?;
        let ideas = crate::ideation::IdeaStore::open(layout.ideas())?;
        let catalog = Catalog::open(layout.clone())?;
        let swept = catalog.recover()?;
        if !swept.is_empty() {
            warn!(runs = ?swept, "swept runs orphaned by a previous process");
        }
        let proxy = match &config.proxy_bind {
            Some(bind) => {
                let creds = RunCredentials::new();
                let handle = proxy_listen(bind, gateway.clone(), creds.clone())?;
                Some((handle, creds))
            }
            None => None,
        };
        let api_token = std::env::var(ENV_API_TOKEN).ok().filter(|t| !t.is_empty());
        Ok(Arc::new(Engine {
            plans: PlanStore::new(layout.plans()),
            reviews: Mutex::new(ReviewStore::new(layout.reviews())),
            layout,
            config,
            gateway,
            prompts: Arc::new(prompts),
            executor,
            corpus,
            ideas,
            catalog,
            proxy,
            api_token: RwLock::new(api_token),
            queue: Arc::new(RunQueue::default()),
            workers: Mutex::new(Vec::new()),
            started: AtomicBool::new(false),
            enqueue_lock: Mutex::new(()),
            ideate_lock: Mutex::new(()),
            meta_lock: Mutex::new(()),
            live: Arc::new(Mutex::new(HashMap::new())),
            reported_cost: Mutex::new(HashMap::new()),
        }))
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn proxy_url(&self) -> Option<String> {
        self.proxy.as_ref().map(|(h, _)| h.url())
    }

    /// Shared API token; initially taken from the environment.
    pub fn api_token(&self) -> Option<String> {
        self.api_token.read().unwrap().clone()
    }

    pub fn set_api_token(&self, token: Option<String>) {
        *self.api_token.write().unwrap() = token.filter(|t| !t.is_empty());
    }

    // ---- corpus -------------------------------------------------------------

    /// Ingest paper text files and codeblock files (directories are expanded
    /// one level, in name order).
    pub fn ingest(&self, papers: &[PathBuf], codeblocks: &[PathBuf]) -> Result<IngestReport, EngineError> {
        let mut report = IngestReport {
            papers: Vec::new(),
            codeblocks: Vec::new(),
            library_version: 0,
        };
        for path in list_files(papers)? {
            let text = std::fs::read_to_string(&path)?;
            let rec = self.corpus.ingest_paper(PaperDocument {
                text,
                source_path: Some(path.display().to_string()),
                ..Default::default()
            })?;
            report.papers.push(rec.id);
        }
        for path in list_files(codeblocks)? {
            let source = std::fs::read_to_string(&path)?;
            report.codeblocks.push(self.corpus.ingest_codeblock(&source)?.id);
        }
        report.library_version = self.corpus.library_version();
        Ok(report)
    }

    // ---- ideation -----------------------------------------------------------

    /// Generate ideas for `pairs` sampled paper pairs. Operators rotate
    /// round-robin over the pairs; new ideas too similar to any stored or
    /// earlier new idea are dropped. A pair whose generation fails is
    /// reported and skipped; a budget denial stops the batch.
    pub fn ideate(&self, pairs: usize, seed: u64) -> Result<IdeateReport, EngineError> {
        let _guard = self.ideate_lock.lock().unwrap();
        let sampled = self.corpus.sample_paper_pairs(pairs, seed)?;
        let library = self.corpus.snapshot();
        let session = ModelSession::new(self.gateway.clone(), "ideation", &self.config.models.ideation);
        let mut ideator = Ideator::new(&session, &self.prompts);
        ideator.ideas_per_call = self.config.ideas_per_call;
        let mut fresh: Vec<Idea> = Vec::new();
        let mut failures = Vec::new();
        for (i, pair) in sampled.iter().enumerate() {
            let (Some(a), Some(b)) = (self.corpus.paper(&pair.a), self.corpus.paper(&pair.b)) else {
                failures.push(format!("{pair}: paper missing from corpus"));
                continue;
            };
            match ideator.generate(&a, &b, &library, GeneticOperator::round_robin(i), i as u64) {
                Ok(batch) => fresh.extend(batch),
                Err(IdeationError::Gateway(e)) if e.budget_limit().is_some() => {
                    failures.push(format!("{pair}: {e}; stopping"));
                    break;
                }
                Err(e @ IdeationError::EmptyLibrary) => return Err(e.into()),
                Err(e) => failures.push(format!("{pair}: {e}")),
            }
        }
        let generated = fresh.len();
        let existing = self.ideas.list();
        let texts: Vec<String> = existing.iter().chain(&fresh).map(Idea::similarity_text).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let outcome = dedup_indices(&refs, self.config.dedup_threshold, &TermFrequency);
        let n = existing.len();
        let id_at = |i: usize| {
            if i < n {
                existing[i].id.clone()
            } else {
                fresh[i - n].id.clone()
            }
        };
        let kept: Vec<Idea> = outcome
            .kept
            .iter()
            .filter(|&&i| i >= n)
            .map(|&i| fresh[i - n].clone())
            .collect();
        let dropped = outcome
            .dropped
            .iter()
            .filter(|d| d.index >= n)
            .map(|d| DroppedIdeaView {
                name: fresh[d.index - n].name.clone(),
                nearest_kept: id_at(d.nearest_kept),
                similarity: d.similarity,
            })
            .collect();
        self.ideas.append(&kept)?;
        info!(pairs = sampled.len(), generated, kept = kept.len(), "ideation batch done");
        Ok(IdeateReport {
            pairs: sampled.len(),
            generated,
            kept: kept.into_iter().map(|i| i.id).collect(),
            dropped,
            failures,
        })
    }

    pub fn ideas(&self) -> Vec<Idea> {
        self.ideas.list()
    }

    pub fn idea(&self, id: &str) -> Result<IdeaView, EngineError> {
        Ok(self.ideas.view(id)?)
    }

    pub fn annotate(&self, annotation: HumanAnnotation) -> Result<IdeaView, EngineError> {
        Ok(self.ideas.attach_annotation(annotation)?)
    }

    /// Every idea with its current annotation (unreviewed when none).
    pub fn triage_export(&self) -> Vec<TriageEntry> {
        self.ideas
            .list()
            .into_iter()
            .map(|idea| {
                let ann = self.ideas.annotation(&idea.id).unwrap_or_default();
                TriageEntry {
                    idea_id: idea.id,
                    name: idea.name,
                    short_description: idea.short_description,
                    hypothesis: idea.hypothesis,
                    operator: Some(idea.operator),
                    rating: ann.rating,
                    notes: ann.notes,
                    conditioning_text: ann.conditioning_text,
                }
            })
            .collect()
    }

    /// Apply annotations; entries equal to the current annotation are
    /// skipped. Unknown ids reject the whole import before anything is
    /// written. Returns how many annotations were recorded.
    pub fn triage_import(&self, entries: &[TriageEntry]) -> Result<usize, EngineError> {
        for e in entries {
            self.ideas.get(&e.idea_id)?;
        }
        let mut applied = 0;
        for e in entries {
            let ann = e.annotation();
            if self.ideas.annotation(&e.idea_id).unwrap_or_else(|| HumanAnnotation {
                idea_id: e.idea_id.clone(),
                ..Default::default()
            }) == ann
            {
                continue;
            }
            self.ideas.attach_annotation(ann)?;
            applied += 1;
        }
        Ok(applied)
    }

    // ---- planning -----------------------------------------------------------

    /// Plan an idea, conditioned on its annotation. Ideas rejected in triage
    /// are refused.
    pub fn plan(&self, idea_id: &str) -> Result<Plan, EngineError> {
        let idea = self.ideas.get(idea_id)?;
        let annotation = self.ideas.annotation(idea_id);
        if annotation.as_ref().is_some_and(|a| a.rating == Rating::Rejected) {
            return Err(EngineError::Invalid(format!("idea {idea_id} was rejected in triage")));
        }
        let session = ModelSession::new(self.gateway.clone(), "planning", &self.config.models.planning);
        let planner = Planner::new(&session, &self.prompts, &self.config.models.experiment);
        let plan = planner.make_plan(&idea, annotation.as_ref(), &self.corpus.snapshot())?;
        self.plans.save(&plan)?;
        Ok(plan)
    }

    /// Store a plan written by hand (protocol text with the usual sections).
    pub fn import_plan(&self, idea_id: &str, text: &str) -> Result<PlanView, EngineError> {
        let plan = Plan::from_text(idea_id, text, self.corpus.library_version(), &self.config.models.experiment);
        self.plans.save(&plan)?;
        self.plan_view(&plan.id)
    }

    pub fn plan_view(&self, id: &str) -> Result<PlanView, EngineError> {
        let plan = self.plans.load(id)?;
        Ok(PlanView {
            text: plan.text(),
            validation: validate_plan(&plan, &self.corpus.snapshot()),
            plan,
        })
    }

    pub fn plans(&self) -> Result<Vec<Plan>, EngineError> {
        Ok(self.plans.list()?)
    }

    pub fn validate(&self, plan_id: &str) -> Result<ValidationReport, EngineError> {
        Ok(self.plan_view(plan_id)?.validation)
    }

    // ---- jobs and scheduling ------------------------------------------------

    /// Create `attempts` queued runs of a valid plan. They start once the
    /// scheduler runs.
    pub fn enqueue(&self, spec: JobSpec) -> Result<JobTicket, EngineError> {
        let plan = self.plans.load(&spec.plan_id)?;
        let attempts = spec.attempts.unwrap_or(self.config.attempts);
        if attempts == 0 {
            return Err(EngineError::Invalid("attempts must be >= 1".into()));
        }
        let cap = spec.concurrency_cap.unwrap_or(self.config.concurrency_cap);
        if cap == 0 {
            return Err(EngineError::Invalid("concurrency_cap must be >= 1".into()));
        }
        let policy = spec.policy.unwrap_or_else(|| self.config.policy.clone());
        policy.validate().map_err(EngineError::Invalid)?;
        let report = validate_plan(&plan, &self.corpus.snapshot());
        if !report.is_ok() {
            return Err(EngineError::Invalid(format!(
                "plan {} is invalid: {}",
                plan.id,
                report.messages().join("; ")
            )));
        }
        let _guard = self.enqueue_lock.lock().unwrap();
        let seq = self.catalog.next_job_seq();
        let job_id = format!("job-{seq:04}");
        let run_ids: Vec<String> = (0..attempts).map(|a| run_id(&plan.id, seq, a)).collect();
        let now = Utc::now();
        let entries = run_ids
            .iter()
            .enumerate()
            .map(|(a, id)| RunEntry {
                run_id: id.clone(),
                job_id: job_id.clone(),
                plan_id: plan.id.clone(),
                idea_id: plan.idea_id.clone(),
                attempt_index: a as u32,
                status: RunStatus::Queued,
                outcome: None,
                note: None,
                locator: PathBuf::from("runs").join(id),
                updated_at: now,
            })
            .collect();
        self.catalog.add_job(
            JobRecord {
                job_id: job_id.clone(),
                seq,
                plan_id: plan.id.clone(),
                idea_id: plan.idea_id.clone(),
                attempts,
                policy,
                concurrency_cap: cap,
                run_ids: run_ids.clone(),
                created_at: now,
            },
            entries,
        )?;
        if self.started.load(Ordering::SeqCst) {
            for id in &run_ids {
                self.queue.push(Task {
                    run_id: id.clone(),
                    job_id: job_id.clone(),
                    job_cap: cap,
                });
            }
        }
        info!(job = %job_id, plan = %plan.id, attempts, "job enqueued");
        Ok(JobTicket { job_id, run_ids })
    }

    /// Start the worker pool (idempotent) and queue every run the catalog
    /// still lists as queued.
    pub fn start_scheduler(self: &Arc<Self>) {
        let _guard = self.enqueue_lock.lock().unwrap();
        if self.started.swap(true, Ordering::SeqCst) {
            return;
        }
        let mut workers = self.workers.lock().unwrap();
        for i in 0..self.config.concurrency_cap {
            self.queue.add_worker();
            let engine = Arc::downgrade(self);
            let queue = self.queue.clone();
            let handle = std::thread::Builder::new()
                .name(format!("run-worker-{i}"))
                .spawn(move || worker_loop(engine, queue))
                .expect("spawn worker thread");
            workers.push(handle);
        }
        let caps: HashMap<String, u32> = self
            .catalog
            .jobs()
            .into_iter()
            .map(|j| (j.job_id, j.concurrency_cap))
            .collect();
        let mut pending: Vec<RunEntry> = self
            .catalog
            .runs()
            .into_iter()
            .filter(|r| r.status == RunStatus::Queued)
            .collect();
        pending.sort_by(|a, b| (&a.job_id, a.attempt_index).cmp(&(&b.job_id, b.attempt_index)));
        for r in pending {
            self.queue.push(Task {
                job_cap: caps.get(&r.job_id).copied().unwrap_or(1),
                run_id: r.run_id,
                job_id: r.job_id,
            });
        }
    }

    /// Block until no run is queued or running.
    pub fn wait_idle(&self) {
        self.queue.wait_idle();
    }

    /// Stop the workers after their current run and wait for them.
    pub fn shutdown(&self) {
        self.queue.shutdown();
        let handles: Vec<JoinHandle<()>> = self.workers.lock().unwrap().drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
    }

    pub fn scheduler_stats(&self) -> SchedulerStats {
        self.queue.stats()
    }

    fn execute(&self, run_id: &str) {
        let Some(entry) = self.catalog.run(run_id) else {
            warn!(run = run_id, "queued run vanished from catalog");
            return;
        };
        if entry.status != RunStatus::Queued {
            return;
        }
        if let Err(e) = self.execute_entry(&entry) {
            error!(run = run_id, error = %e, "run failed before it could start");
            let note = format!("setup failed: {e}");
            if let Err(e) =
                self.catalog
                    .set_status(run_id, RunStatus::Terminal, Some(OutcomeKind::DebugLimit), Some(note))
            {
                error!(run = run_id, error = %e, "cannot record run failure");
            }
        }
        self.live.lock().unwrap().remove(run_id);
        if let Err(e) = self.meta_if_done(&entry.plan_id) {
            warn!(plan = %entry.plan_id, error = %e, "meta-analysis failed");
        }
    }

    fn execute_entry(&self, entry: &RunEntry) -> Result<(), EngineError> {
        let plan = self.plans.load(&entry.plan_id)?;
        let job = self
            .catalog
            .job(&entry.job_id)
            .ok_or_else(|| EngineError::not_found("job", &entry.job_id))?;
        self.catalog.set_status(&entry.run_id, RunStatus::Running, None, None)?;
        self.live.lock().unwrap().insert(entry.run_id.clone(), Live::default());
        let run_dir = self.layout.root.join(&entry.locator);
        let live = self.live.clone();
        let progress: ProgressFn = Arc::new(move |run: &ExperimentRun| {
            if let Some(last) = run.iterations.last() {
                live.lock().unwrap().insert(
                    run.id.clone(),
                    Live {
                        iteration: last.index,
                        tier: Some(last.tier),
                    },
                );
            }
        });
        let mut builder = Builder::new(
            self.gateway.clone(),
            self.executor.clone(),
            self.prompts.clone(),
            &self.config.models.builder,
            self.config.builder.clone(),
        )
        .with_progress(progress);
        if let Some((handle, creds)) = &self.proxy {
            builder = builder.with_proxy(ProxyAccess {
                url: handle.url(),
                credentials: creds.clone(),
            });
        }
        let library = self.corpus.snapshot();
        let run = builder
            .run(
                RunRequest {
                    run_id: entry.run_id.clone(),
                    plan: &plan,
                    library: &library,
                    policy: job.policy.clone(),
                    attempt_index: entry.attempt_index,
                    run_dir: run_dir.clone(),
                },
                &SystemClock::start(),
            )
            .map_err(|e| EngineError::Invalid(e.to_string()))?;
        let kind = run.outcome.as_ref().map_or(OutcomeKind::DebugLimit, |o| o.kind);

        let session = ModelSession::new(self.gateway.clone(), "report", &self.config.models.report)
            .with_attempt(entry.attempt_index);
        let note = match Reporter::new(&session, &self.prompts).process(&plan, &run, &run_dir) {
            Ok(_) => None,
            Err(e) => {
                warn!(run = %run.id, error = %e, "reporting failed");
                Some(format!("reporting failed: {e}"))
            }
        };
        if let Some(argv) = &self.config.render_command {
            if note.is_none() {
                let renderer = CommandRenderer { argv: argv.clone() };
                match render_document(&run_dir, &renderer) {
                    Ok(rec) if !rec.ok => warn!(run = %run.id, error = ?rec.error, "report rendering failed"),
                    Ok(_) => {}
                    Err(e) => warn!(run = %run.id, error = %e, "report rendering failed"),
                }
            }
        }
        self.catalog
            .set_status(&entry.run_id, RunStatus::Terminal, Some(kind), note)?;
        info!(run = %entry.run_id, outcome = %kind, "run terminal");
        Ok(())
    }

    // ---- status -------------------------------------------------------------

    fn run_dir(&self, entry: &RunEntry) -> PathBuf {
        self.layout.root.join(&entry.locator)
    }

    fn entry(&self, run_id: &str) -> Result<RunEntry, EngineError> {
        self.catalog
            .run(run_id)
            .ok_or_else(|| EngineError::not_found("run", run_id))
    }

    fn ledger_total(&self, entry: &RunEntry) -> Micros {
        if let Ok(total) = self.gateway.ledger_total(&entry.run_id) {
            return total;
        }
        let log = RecordLog::<UsageRecord>::new(self.run_dir(entry).join("ledger.log"));
        match log.read_prefix() {
            Ok(p) => CostLedger::from_records(&entry.run_id, p.records).total(),
            Err(_) => Micros::ZERO,
        }
    }

    pub fn run_view(&self, run_id: &str) -> Result<RunView, EngineError> {
        let entry = self.entry(run_id)?;
        Ok(self.view_of(entry))
    }

    fn view_of(&self, entry: RunEntry) -> RunView {
        let run_dir = self.run_dir(&entry);
        let record = load_run(&run_dir).ok();
        let live = self.live.lock().unwrap().get(&entry.run_id).copied();
        let mut iteration = record
            .as_ref()
            .and_then(|r| r.iterations.last())
            .map_or(0, |i| i.index);
        let mut tier = record.as_ref().and_then(|r| r.iterations.last()).map(|i| i.tier);
        if let Some(l) = live {
            iteration = iteration.max(l.iteration);
            tier = l.tier.or(tier);
            if let Ok(k) = self.gateway.current_iteration(&entry.run_id) {
                iteration = iteration.max(k);
            }
        }
        let cost = {
            let current = self.ledger_total(&entry);
            let mut reported = self.reported_cost.lock().unwrap();
            let slot = reported.entry(entry.run_id.clone()).or_default();
            *slot = (*slot).max(current);
            *slot
        };
        let log_tail = self.log_tail(&run_dir, iteration);
        RunView {
            run_id: entry.run_id,
            job_id: entry.job_id,
            plan_id: entry.plan_id,
            idea_id: entry.idea_id,
            attempt_index: entry.attempt_index,
            status: entry.status,
            outcome: entry.outcome,
            note: entry.note,
            iteration,
            tier,
            cost,
            log_tail,
        }
    }

    /// Last lines of the newest iteration that has written its streams.
    fn log_tail(&self, run_dir: &Path, iteration: u32) -> Vec<String> {
        for k in (1..=iteration.max(1)).rev() {
            let dir = iteration_dir(run_dir, k);
            let out = std::fs::read(dir.join("stdout"));
            let err = std::fs::read(dir.join("stderr"));
            if out.is_err() && err.is_err() {
                continue;
            }
            let mut text = String::from_utf8_lossy(&out.unwrap_or_default()).into_owned();
            let err = err.unwrap_or_default();
            if !err.is_empty() {
                if !text.is_empty() && !text.ends_with('\n') {
                    text.push('\n');
                }
                text.push_str(&String::from_utf8_lossy(&err));
            }
            return last_lines(&text, LOG_TAIL_LINES);
        }
        Vec::new()
    }

    pub fn runs(&self, plan_id: Option<&str>) -> Vec<RunView> {
        let entries = match plan_id {
            Some(p) => self.catalog.runs_for_plan(p),
            None => self.catalog.runs(),
        };
        entries.into_iter().map(|e| self.view_of(e)).collect()
    }

    pub fn job_view(&self, job_id: &str) -> Result<JobView, EngineError> {
        let job = self
            .catalog
            .job(job_id)
            .ok_or_else(|| EngineError::not_found("job", job_id))?;
        let runs: Vec<RunView> = job
            .run_ids
            .iter()
            .filter_map(|id| self.catalog.run(id))
            .map(|e| self.view_of(e))
            .collect();
        Ok(JobView {
            done: runs.iter().all(|r| r.status == RunStatus::Terminal),
            job_id: job.job_id,
            plan_id: job.plan_id,
            idea_id: job.idea_id,
            attempts: job.attempts,
            concurrency_cap: job.concurrency_cap,
            runs,
        })
    }

    pub fn jobs(&self) -> Vec<JobRecord> {
        self.catalog.jobs()
    }

    pub fn run_record(&self, run_id: &str) -> Result<ExperimentRun, EngineError> {
        let entry = self.entry(run_id)?;
        Ok(load_run(&self.run_dir(&entry))?)
    }

    pub fn report(&self, run_id: &str) -> Result<Report, EngineError> {
        let entry = self.entry(run_id)?;
        load_report(&self.run_dir(&entry)).map_err(|e| match e {
            StoreError::NotFound(_) => EngineError::not_found("report", run_id),
            e => e.into(),
        })
    }

    pub fn summary(&self, run_id: &str) -> Result<ResultSummary, EngineError> {
        let entry = self.entry(run_id)?;
        load_summary(&self.run_dir(&entry)).map_err(|e| match e {
            StoreError::NotFound(_) => EngineError::not_found("summary", run_id),
            e => e.into(),
        })
    }

    // ---- meta-analysis ------------------------------------------------------

    fn summary_or_stub(&self, entry: &RunEntry) -> ResultSummary {
        match load_summary(&self.run_dir(entry)) {
            Ok(s) => s,
            Err(e) => ResultSummary {
                run_id: entry.run_id.clone(),
                outcome: entry.outcome.unwrap_or(OutcomeKind::DebugLimit),
                text: entry.note.clone().unwrap_or_else(|| "No summary available.".into()),
                verdict: None,
                interesting: false,
                interesting_rationale: String::new(),
                needs_human: true,
                warnings: vec![format!("summary unavailable: {e}")],
            },
        }
    }

    fn meta_if_done(&self, plan_id: &str) -> Result<(), EngineError> {
        match self.meta(plan_id) {
            Ok(_) | Err(EngineError::RunsPending { .. }) => Ok(()),
            Err(e) => Err(e),
        }
    }

    /// Meta-analysis over every attempt of `plan_id`. Reuses the stored
    /// report when it already covers exactly these runs.
    pub fn meta(&self, plan_id: &str) -> Result<MetaAnalysisReport, EngineError> {
        let runs = self.catalog.runs_for_plan(plan_id);
        if runs.is_empty() {
            return Err(EngineError::not_found("runs for plan", plan_id));
        }
        let pending = runs.iter().filter(|r| r.status != RunStatus::Terminal).count();
        if pending > 0 {
            return Err(EngineError::RunsPending {
                plan_id: plan_id.to_string(),
                pending,
                total: runs.len(),
            });
        }
        let _guard = self.meta_lock.lock().unwrap();
        if let Ok(existing) = load_meta(&self.layout.root, plan_id) {
            let ids: Vec<&str> = existing.attempt_summaries.iter().map(|a| a.run_id.as_str()).collect();
            if ids == runs.iter().map(|r| r.run_id.as_str()).collect::<Vec<_>>() {
                return Ok(existing);
            }
        }
        let plan = self.plans.load(plan_id)?;
        let idea_text = self
            .ideas
            .get(&plan.idea_id)
            .map(|i| i.describe())
            .unwrap_or_else(|_| plan.text());
        let summaries: Vec<ResultSummary> = runs.iter().map(|r| self.summary_or_stub(r)).collect();
        let session = ModelSession::new(self.gateway.clone(), "meta", &self.config.models.meta);
        let report = meta_report(&plan.idea_id, &idea_text, plan_id, &summaries, &session, &self.prompts)?;
        save_meta(&self.layout.root, &report)?;
        info!(plan = plan_id, classification = %report.classification, "meta-analysis written");
        Ok(report)
    }

    /// Meta-analyses for every plan of an idea that has runs.
    pub fn meta_for_idea(&self, idea_id: &str) -> Result<Vec<MetaAnalysisReport>, EngineError> {
        let mut plans: BTreeMap<String, ()> = BTreeMap::new();
        for r in self.catalog.runs().into_iter().filter(|r| r.idea_id == idea_id) {
            plans.insert(r.plan_id, ());
        }
        if plans.is_empty() {
            return Err(EngineError::not_found("runs for idea", idea_id));
        }
        plans.keys().map(|p| self.meta(p)).collect()
    }

    pub fn stored_meta(&self, plan_id: &str) -> Result<MetaAnalysisReport, EngineError> {
        load_meta(&self.layout.root, plan_id).map_err(|e| match e {
            crate::meta::MetaError::Store(StoreError::NotFound(_)) => EngineError::not_found("meta report", plan_id),
            e => e.into(),
        })
    }

    // ---- review gate --------------------------------------------------------

    pub fn add_rating(&self, discovery_id: &str, rating: ReviewRating) -> Result<GateDecision, EngineError> {
        if rating.reviewer_id.trim().is_empty() {
            return Err(EngineError::Invalid("reviewer_id is required".into()));
        }
        Ok(self.reviews.lock().unwrap().add_rating(discovery_id, rating)?)
    }

    pub fn set_internal(
        &self,
        discovery_id: &str,
        reviewer_id: &str,
        passed: bool,
        notes: &str,
    ) -> Result<GateDecision, EngineError> {
        let review = InternalReview {
            reviewer_id: reviewer_id.to_string(),
            passed,
            notes: notes.to_string(),
            at: Utc::now(),
        };
        Ok(self.reviews.lock().unwrap().set_internal(discovery_id, review)?)
    }

    pub fn review(&self, discovery_id: &str) -> Result<ReviewView, EngineError> {
        let store = self.reviews.lock().unwrap();
        Ok(ReviewView {
            decision: store.decision(discovery_id)?,
            ratings: store.ratings(discovery_id)?,
            audit: store.audit(discovery_id)?,
        })
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.queue.shutdown();
    }
}

fn worker_loop(engine: Weak<Engine>, queue: Arc<RunQueue>) {
    while let Some(task) = queue.take() {
        match engine.upgrade() {
            Some(e) => e.execute(&task.run_id),
            None => {
                queue.finish(&task);
                break;
            }
        }
        queue.finish(&task);
    }
}
