//! Turning an annotated idea into an operational, tiered experiment plan.
//!
//! The planner asks for a fenced ```plan block with eight section headers
//! plus a `CODEBLOCKS:` line. Pilot tiers are read from lines of the form
//! `MINI_PILOT: 3 episodes, 10 steps each` in the modes section; every
//! `<number> <word>` pair on such a line becomes a scale parameter. A tier is
//! marked `stop_after` when the execution flow says `<TIER> and then stop`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::corpus::LibrarySnapshot;
use crate::gateway::{GatewayError, ModelSession, Stage};
use crate::ideation::{HumanAnnotation, Idea};
use crate::ids::{content_id, sha256_hex};
use crate::prompts::{PromptError, PromptKind, PromptSet};
use crate::protocol::first_fenced;
use crate::store::{read_document, write_atomic, write_document, StoreError};

pub const DEFAULT_RETRY_CAP: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    ModesAndScope,
    EnvironmentSetup,
    ModelConfig,
    DataCollection,
    Analysis,
    LoggingOutput,
    ExecutionFlow,
    SuccessCriteria,
}

impl Section {
    pub const ALL: [Section; 8] = [
        Section::ModesAndScope,
        Section::EnvironmentSetup,
        Section::ModelConfig,
        Section::DataCollection,
        Section::Analysis,
        Section::LoggingOutput,
        Section::ExecutionFlow,
        Section::SuccessCriteria,
    ];

    pub fn header(self) -> &'static str {
        match self {
            Section::ModesAndScope => "EXPERIMENT MODES AND SCOPE",
            Section::EnvironmentSetup => "ENVIRONMENT SETUP",
            Section::ModelConfig => "LLM CONFIGURATION",
            Section::DataCollection => "DATA COLLECTION PROCEDURE",
            Section::Analysis => "DATA ANALYSIS",
            Section::LoggingOutput => "LOGGING AND OUTPUT",
            Section::ExecutionFlow => "EXECUTION FLOW",
            Section::SuccessCriteria => "SUCCESS CRITERIA",
        }
    }
}

const CODEBLOCKS_HEADER: &str = "CODEBLOCKS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TierName {
    MiniPilot,
    Pilot,
    FullExperiment,
}

impl TierName {
    pub const ORDER: [TierName; 3] = [TierName::MiniPilot, TierName::Pilot, TierName::FullExperiment];

    pub fn as_str(self) -> &'static str {
        match self {
            TierName::MiniPilot => "MINI_PILOT",
            TierName::Pilot => "PILOT",
            TierName::FullExperiment => "FULL_EXPERIMENT",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ORDER.into_iter().find(|t| t.as_str() == s)
    }

    fn rank(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TierName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PilotTier {
    pub name: TierName,
    pub scale_params: BTreeMap<String, u64>,
    #[serde(default)]
    pub stop_after: bool,
}

impl PilotTier {
    pub fn new(name: TierName, params: &[(&str, u64)]) -> Self {
        PilotTier {
            name,
            scale_params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            stop_after: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub id: String,
    pub idea_id: String,
    pub operationalization: BTreeMap<Section, String>,
    pub codeblock_ids: Vec<String>,
    pub tiers: Vec<PilotTier>,
    pub conditioning_text: String,
    pub library_version: u64,
    pub experiment_model: String,
}

impl Plan {
    /// Build a plan directly from protocol text, without a model call.
    pub fn from_text(idea_id: &str, text: &str, library_version: u64, experiment_model: &str) -> Plan {
        let parsed = parse_plan_text(text);
        let mut plan = Plan {
            id: String::new(),
            idea_id: idea_id.to_string(),
            operationalization: parsed.sections,
            codeblock_ids: parsed.codeblock_ids,
            tiers: parsed.tiers,
            conditioning_text: String::new(),
            library_version,
            experiment_model: experiment_model.to_string(),
        };
        plan.id = content_id("plan", &[idea_id, &plan.text()], 12);
        plan
    }

    pub fn section(&self, s: Section) -> &str {
        self.operationalization.get(&s).map_or("", String::as_str)
    }

    /// Tiers the builder will run, in order, ending at the first `stop_after`.
    pub fn tiers_to_run(&self) -> Vec<&PilotTier> {
        let mut out = Vec::new();
        for t in &self.tiers {
            out.push(t);
            if t.stop_after {
                break;
            }
        }
        out
    }

    /// Canonical plain-text rendering, as stored in `plan.txt`.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for s in Section::ALL {
            out.push_str(s.header());
            out.push_str(":\n");
            out.push_str(self.section(s).trim_end());
            out.push_str("\n\n");
        }
        out.push_str(CODEBLOCKS_HEADER);
        out.push_str(": ");
        out.push_str(&self.codeblock_ids.join(", "));
        out.push('\n');
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Violation {
    NoTiers,
    TierOrder { detail: String },
    DuplicateTier { tier: TierName },
    DecreasingScale { param: String, from: TierName, to: TierName },
    MissingSection { section: Section },
    UnknownCodeblock { id: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoTiers => f.write_str("tier order: no pilot tiers defined"),
            Violation::TierOrder { detail } => write!(f, "tier order: {detail}"),
            Violation::DuplicateTier { tier } => write!(f, "duplicate tier: {tier}"),
            Violation::DecreasingScale { param, from, to } => {
                write!(f, "decreasing scale: `{param}` shrinks from {from} to {to}")
            }
            Violation::MissingSection { section } => {
                write!(f, "missing section: {}", section.header())
            }
            Violation::UnknownCodeblock { id } => write!(f, "unknown codeblock: {id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn messages(&self) -> Vec<String> {
        self.violations.iter().map(ToString::to_string).collect()
    }
}

/// Every violated plan invariant; empty means the plan is acceptable.
pub fn validate_plan(plan: &Plan, library: &LibrarySnapshot) -> ValidationReport {
    let mut v = Vec::new();
    if plan.tiers.is_empty() {
        v.push(Violation::NoTiers);
    }
    let mut seen = Vec::new();
    for t in &plan.tiers {
        if seen.contains(&t.name) {
            v.push(Violation::DuplicateTier { tier: t.name });
        } else {
            seen.push(t.name);
        }
    }
    if let Some(w) = plan.tiers.windows(2).find(|w| w[0].name.rank() > w[1].name.rank()) {
        v.push(Violation::TierOrder {
            detail: format!("{} before {}", w[0].name, w[1].name),
        });
    } else if let Some(first) = seen.first() {
        if *first != TierName::MiniPilot {
            v.push(Violation::TierOrder {
                detail: format!("tiers must start at MINI_PILOT, found {first}"),
            });
        } else if seen.iter().enumerate().any(|(i, t)| t.rank() != i) {
            v.push(Violation::TierOrder {
                detail: "tiers skip a level".into(),
            });
        }
    }
    for w in plan.tiers.windows(2) {
        for (param, &before) in &w[0].scale_params {
            if let Some(&after) = w[1].scale_params.get(param) {
                if after < before {
                    v.push(Violation::DecreasingScale {
                        param: param.clone(),
                        from: w[0].name,
                        to: w[1].name,
                    });
                }
            }
        }
    }
    for s in Section::ALL {
        if plan.section(s).trim().is_empty() {
            v.push(Violation::MissingSection { section: s });
        }
    }
    for id in &plan.codeblock_ids {
        if !library.contains(id) {
            v.push(Violation::UnknownCodeblock { id: id.clone() });
        }
    }
    ValidationReport { violations: v }
}

/// Sections, codeblock ids and tiers read from plan text.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedPlan {
    pub sections: BTreeMap<Section, String>,
    pub codeblock_ids: Vec<String>,
    pub tiers: Vec<PilotTier>,
}

static TIER_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^[^A-Za-z0-9]*(MINI_PILOT|PILOT|FULL_EXPERIMENT)[`'*}\s]*:\s*(.*)$").unwrap()
});
static SCALE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(\d+)\s+([a-z_]+)").unwrap());
static STOP: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\b(MINI_PILOT|PILOT|FULL_EXPERIMENT)\b[`'*}\s]*(?:,\s*)?and\s+then\s+stop").unwrap()
});

/// Which header (section or codeblock list) a line opens, with the rest of the line.
fn header_of(line: &str) -> Option<(Option<Section>, &str)> {
    let stripped = line.trim_start_matches(|c: char| !c.is_ascii_alphanumeric());
    let stripped = stripped.strip_prefix("textbf{").unwrap_or(stripped);
    let candidates = Section::ALL
        .iter()
        .map(|s| (Some(*s), s.header()))
        .chain(std::iter::once((None, CODEBLOCKS_HEADER)));
    for (section, header) in candidates {
        if let Some(rest) = stripped.strip_prefix(header) {
            let rest = rest.trim_start_matches(['*', '}', ' ']);
            if let Some(rest) = rest.strip_prefix(':') {
                return Some((section, rest.trim_start_matches(['*', '}', ' '])));
            }
        }
    }
    None
}

pub fn parse_plan_text(text: &str) -> ParsedPlan {
    let mut sections: BTreeMap<Section, String> = BTreeMap::new();
    let mut codeblocks: Option<String> = None;
    // None = preamble, Some(None) = codeblocks, Some(Some(s)) = section s
    let mut current: Option<Option<Section>> = None;
    for line in text.lines() {
        if let Some((section, rest)) = header_of(line) {
            current = Some(section);
            match section {
                Some(s) => {
                    let body = sections.entry(s).or_default();
                    if !rest.is_empty() {
                        body.push_str(rest);
                        body.push('\n');
                    }
                }
                None => codeblocks = Some(rest.to_string()),
            }
            continue;
        }
        match current {
            Some(Some(s)) => {
                let body = sections.get_mut(&s).expect("section opened");
                body.push_str(line);
                body.push('\n');
            }
            Some(None) => {
                if let Some(c) = codeblocks.as_mut() {
                    c.push(' ');
                    c.push_str(line);
                }
            }
            None => {}
        }
    }
    for body in sections.values_mut() {
        *body = body.trim().to_string();
    }

    let codeblock_ids: Vec<String> = codeblocks
        .unwrap_or_default()
        .split(|c: char| c == ',' || c.is_whitespace())
        .map(|s| s.trim_matches(|c: char| c == '`' || c == '\'' || c == '"' || c == '.'))
        .filter(|s| !s.is_empty())
        .fold(Vec::new(), |mut acc, s| {
            if !acc.iter().any(|x: &String| x == s) {
                acc.push(s.to_string());
            }
            acc
        });

    let mut tiers = Vec::new();
    if let Some(modes) = sections.get(&Section::ModesAndScope) {
        for line in modes.lines() {
            if let Some(caps) = TIER_LINE.captures(line) {
                let name = TierName::parse(&caps[1]).expect("regex restricts names");
                let mut scale_params = BTreeMap::new();
                for m in SCALE.captures_iter(&caps[2].to_lowercase()) {
                    if let Ok(n) = m[1].parse::<u64>() {
                        scale_params.entry(m[2].to_string()).or_insert(n);
                    }
                }
                tiers.push(PilotTier {
                    name,
                    scale_params,
                    stop_after: false,
                });
            }
        }
    }
    if let Some(flow) = sections.get(&Section::ExecutionFlow) {
        if let Some(caps) = STOP.captures(flow) {
            let stop = TierName::parse(&caps[1]).expect("regex restricts names");
            if let Some(t) = tiers.iter_mut().find(|t| t.name == stop) {
                t.stop_after = true;
            }
        }
    }
    ParsedPlan {
        sections,
        codeblock_ids,
        tiers,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PlanningError {
    #[error("plan rejected after {attempts} attempts: {}", violations.join("; "))]
    Invalid {
        attempts: u32,
        violations: Vec<String>,
        raw_output: String,
    },
    #[error("codeblock library is empty")]
    EmptyLibrary,
    #[error("unknown plan `{0}`")]
    NotFound(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub struct Planner<'a> {
    pub session: &'a ModelSession,
    pub prompts: &'a PromptSet,
    /// Model the generated experiment should call.
    pub experiment_model: String,
    pub retry_cap: u32,
}

impl<'a> Planner<'a> {
    pub fn new(session: &'a ModelSession, prompts: &'a PromptSet, experiment_model: &str) -> Self {
        Planner {
            session,
            prompts,
            experiment_model: experiment_model.to_string(),
            retry_cap: DEFAULT_RETRY_CAP,
        }
    }

    /// Ask for a plan until one validates; violations of a rejected plan are
    /// fed back into the next prompt.
    pub fn make_plan(
        &self,
        idea: &Idea,
        annotation: Option<&HumanAnnotation>,
        library: &LibrarySnapshot,
    ) -> Result<Plan, PlanningError> {
        if library.is_empty() {
            return Err(PlanningError::EmptyLibrary);
        }
        let notes = annotation.map_or("", |a| a.notes.as_str());
        let conditioning = annotation.map_or("", |a| a.conditioning_text.as_str());
        let attempts = self.retry_cap.max(1);
        let mut feedback = String::new();
        let mut last = (Vec::new(), String::new());
        for attempt in 1..=attempts {
            let prompt = self.prompts.render(
                PromptKind::Planning,
                &[
                    ("idea", &idea.describe()),
                    ("comments", if notes.is_empty() { "(none)" } else { notes }),
                    ("conditioning", if conditioning.is_empty() { "(none)" } else { conditioning }),
                    ("codeblocks", &library.summaries()),
                    ("experiment_model", &self.experiment_model),
                    ("feedback", &feedback),
                ],
            )?;
            let reply = self.session.ask(Stage::Planning, 0, &prompt)?;
            let body = first_fenced(&reply.text, &["plan"])
                .map(|b| b.body)
                .unwrap_or(&reply.text);
            let plan = self.assemble(idea, conditioning, library, parse_plan_text(body));
            let report = validate_plan(&plan, library);
            if report.is_ok() {
                return Ok(plan);
            }
            let messages = report.messages();
            warn!(attempt, violations = ?messages, "plan rejected");
            feedback = format!(
                "\nYour previous plan was rejected for these reasons; fix all of them:\n- {}\n",
                messages.join("\n- ")
            );
            last = (messages, reply.text);
        }
        Err(PlanningError::Invalid {
            attempts,
            violations: last.0,
            raw_output: last.1,
        })
    }

    fn assemble(
        &self,
        idea: &Idea,
        conditioning: &str,
        library: &LibrarySnapshot,
        parsed: ParsedPlan,
    ) -> Plan {
        let mut operationalization = parsed.sections;
        if let Some(cfg) = operationalization.get_mut(&Section::ModelConfig) {
            if !cfg.contains(&self.experiment_model) {
                *cfg = format!(
                    "Use `{}` for all LLM calls made by the experiment.\n{cfg}",
                    self.experiment_model
                );
            }
        }
        let mut plan = Plan {
            id: String::new(),
            idea_id: idea.id.clone(),
            operationalization,
            codeblock_ids: parsed.codeblock_ids,
            tiers: parsed.tiers,
            conditioning_text: conditioning.to_string(),
            library_version: library.version,
            experiment_model: self.experiment_model.clone(),
        };
        plan.id = content_id("plan", &[&idea.id, &plan.text()], 12);
        plan
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PlanMeta {
    plan: Plan,
    text_sha256: String,
}

/// `plans/<id>/plan.txt` plus `plans/<id>/plan.meta.json`.
pub struct PlanStore {
    dir: PathBuf,
}

impl PlanStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        PlanStore { dir: dir.into() }
    }

    /// Persist a plan. Plan ids are content-derived, so saving an existing id
    /// is a no-op and stored plans never change.
    pub fn save(&self, plan: &Plan) -> Result<PathBuf, PlanningError> {
        let dir = self.dir.join(&plan.id);
        let meta_path = dir.join("plan.meta.json");
        if meta_path.exists() {
            return Ok(dir);
        }
        std::fs::create_dir_all(&dir).map_err(StoreError::Io)?;
        let text = plan.text();
        write_atomic(&dir.join("plan.txt"), text.as_bytes())?;
        write_document(
            &meta_path,
            &PlanMeta {
                plan: plan.clone(),
                text_sha256: sha256_hex(text.as_bytes()),
            },
        )?;
        Ok(dir)
    }

    pub fn load(&self, id: &str) -> Result<Plan, PlanningError> {
        let dir = self.dir.join(id);
        let meta: PlanMeta = match read_document(&dir.join("plan.meta.json")) {
            Ok(m) => m,
            Err(StoreError::NotFound(_)) => return Err(PlanningError::NotFound(id.to_string())),
            Err(e) => return Err(e.into()),
        };
        let text_path = dir.join("plan.txt");
        let text = std::fs::read(&text_path).map_err(StoreError::Io)?;
        if sha256_hex(&text) != meta.text_sha256 {
            return Err(StoreError::Integrity {
                path: text_path,
                detail: "plan text does not match recorded digest".into(),
            }
            .into());
        }
        Ok(meta.plan)
    }

    pub fn list(&self) -> Result<Vec<Plan>, PlanningError> {
        let mut out = Vec::new();
        let entries = match std::fs::read_dir(&self.dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(StoreError::Io(e).into()),
        };
        let mut ids: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("plan.meta.json").exists())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        for id in ids {
            out.push(self.load(&id)?);
        }
        Ok(out)
    }
}

/// A plan reply in the expected protocol, for scenarios and tests.
pub fn example_plan_reply(codeblocks: &[&str], stop_after_pilot: bool) -> String {
    let flow = if stop_after_pilot {
        "Run MINI_PILOT first; if successful, run PILOT and then stop."
    } else {
        "Run MINI_PILOT first; if successful, run PILOT, then FULL_EXPERIMENT."
    };
    format!(
        "```plan\n\
EXPERIMENT MODES AND SCOPE: Implement a global variable PILOT_MODE that can be set to one of: 'MINI_PILOT', 'PILOT', or 'FULL_EXPERIMENT'. For each mode:\n\
MINI_PILOT: 3 episodes of CookingWorld, 10 steps each (training set);\n\
PILOT: 20 episodes of CookingWorld, 25 steps each (training set);\n\
FULL_EXPERIMENT: 200 episodes, 50 steps each (balanced across train/dev/test sets).\n\
ENVIRONMENT SETUP: CookingWorld with 3 rooms, no doors, 2 ingredients.\n\
LLM CONFIGURATION: State prediction prompt with the last 2 observations and a 0-100 confidence score.\n\
DATA COLLECTION PROCEDURE: For each step, predict the next state with confidence, then score accuracy with a judge.\n\
DATA ANALYSIS: Correlate confidence with accuracy per episode; ROC curves.\n\
LOGGING AND OUTPUT: Log raw predictions, scores and plots.\n\
EXECUTION FLOW: {flow}\n\
SUCCESS CRITERIA: Clean execution in MINI_PILOT and significant correlation in PILOT (bootstrap).\n\
CODEBLOCKS: {}\n\
```\n",
        codeblocks.join(", ")
    )
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::corpus::Codeblock;
    use crate::gateway::scripted::{Scenario, ScriptedProvider};
    use crate::gateway::{BudgetPolicy, CostScope, Gateway, PricingTable, ProviderConfig};
    use crate::ideation::{GeneticOperator, Rating, Variables};

    fn library() -> LibrarySnapshot {
        let block = |id: &str| Codeblock {
            id: id.into(),
            name: id.into(),
            summary: "s".into(),
            code_text: "c".into(),
            declared_capabilities: vec![],
        };
        LibrarySnapshot::new(2, vec![block("bootstrap"), block("textworld"), block("plot")])
    }

    fn idea() -> Idea {
        Idea {
            id: "idea-1".into(),
            name: "confidence".into(),
            short_description: "s".into(),
            long_description: "l".into(),
            hypothesis: "h".into(),
            variables: Variables {
                independent: vec!["x".into()],
                dependent: vec!["y".into()],
                controls: vec![],
            },
            metric: "m".into(),
            baselines: "b".into(),
            pilot: "p".into(),
            required_resources: vec!["r".into()],
            operator: GeneticOperator::Combine,
            source_paper_ids: ["a".into(), "b".into()],
            codeblock_context_version: 2,
            created_at: chrono::DateTime::from_timestamp(0, 0).unwrap(),
        }
    }

    fn planner_session(yaml: &str) -> (ModelSession, Arc<ScriptedProvider>) {
        let provider = Arc::new(ScriptedProvider::new(Scenario::from_yaml(yaml).unwrap()));
        let gw = Arc::new(Gateway::new(
            provider.clone(),
            ProviderConfig::scripted("m", PricingTable::new(0, 0)),
        ));
        gw.open_ledger("planning", BudgetPolicy::default(), CostScope::All, None)
            .unwrap();
        (ModelSession::new(gw, "planning", "m"), provider)
    }

    fn yaml_text(text: &str) -> String {
        format!("rules:\n  - text: {}\n", serde_json::to_string(text).unwrap())
    }

    #[test]
    fn parses_the_example_plan() {
        let body = example_plan_reply(&["textworld", "bootstrap"], true);
        let parsed = parse_plan_text(first_fenced(&body, &["plan"]).unwrap().body);
        assert_eq!(parsed.sections.len(), 8);
        assert_eq!(parsed.codeblock_ids, ["textworld", "bootstrap"]);
        let tiers = &parsed.tiers;
        assert_eq!(
            tiers.iter().map(|t| t.name).collect::<Vec<_>>(),
            TierName::ORDER
        );
        assert_eq!(tiers[0].scale_params["episodes"], 3);
        assert_eq!(tiers[0].scale_params["steps"], 10);
        assert_eq!(tiers[1].scale_params["episodes"], 20);
        assert_eq!(tiers[2].scale_params["steps"], 50);
        assert!(tiers[1].stop_after && !tiers[0].stop_after && !tiers[2].stop_after);
        assert!(parsed.sections[&Section::ExecutionFlow].starts_with("Run MINI_PILOT first"));
    }

    #[test]
    fn make_plan_embeds_conditioning_and_model() {
        let (s, provider) = planner_session(&yaml_text(&example_plan_reply(&["textworld"], false)));
        let prompts = PromptSet::default();
        let ann = HumanAnnotation {
            idea_id: "idea-1".into(),
            rating: Rating::Selected,
            notes: "use task score, not completion".into(),
            conditioning_text: "Please use cheap-model for all LLM calls.".into(),
        };
        let plan = Planner::new(&s, &prompts, "cheap-model")
            .make_plan(&idea(), Some(&ann), &library())
            .unwrap();
        assert!(validate_plan(&plan, &library()).is_ok());
        assert_eq!(plan.tiers.len(), 3);
        assert_eq!(plan.tiers_to_run().len(), 3);
        assert!(plan.section(Section::ModelConfig).contains("cheap-model"));
        assert_eq!(plan.conditioning_text, ann.conditioning_text);
        let prompt = &provider.captured()[0].messages[0].content;
        assert!(prompt.contains(&ann.conditioning_text));
        assert!(prompt.contains(&ann.notes));
        assert!(plan.section(Section::ExecutionFlow).contains("run MINI_PILOT first") ||
            plan.section(Section::ExecutionFlow).contains("Run MINI_PILOT first"));
    }

    #[test]
    fn unknown_codeblock_fails_after_retries_with_feedback() {
        let (s, provider) = planner_session(&yaml_text(&example_plan_reply(&["no-such-block"], false)));
        let prompts = PromptSet::default();
        let err = Planner::new(&s, &prompts, "m")
            .make_plan(&idea(), None, &library())
            .unwrap_err();
        match err {
            PlanningError::Invalid { attempts, violations, .. } => {
                assert_eq!(attempts, DEFAULT_RETRY_CAP);
                assert_eq!(violations, ["unknown codeblock: no-such-block"]);
            }
            other => panic!("unexpected {other}"),
        }
        let calls = provider.captured();
        assert_eq!(calls.len(), 3);
        assert!(calls[1].messages[0].content.contains("unknown codeblock: no-such-block"));
    }

    #[test]
    fn empty_notes_still_plan() {
        let (s, _) = planner_session(&yaml_text(&example_plan_reply(&[], false)));
        let prompts = PromptSet::default();
        let ann = HumanAnnotation {
            idea_id: "idea-1".into(),
            ..Default::default()
        };
        assert!(Planner::new(&s, &prompts, "m")
            .make_plan(&idea(), Some(&ann), &library())
            .is_ok());
    }

    fn valid_plan() -> Plan {
        let body = example_plan_reply(&["textworld", "bootstrap", "plot"], false);
        let parsed = parse_plan_text(first_fenced(&body, &["plan"]).unwrap().body);
        Plan {
            id: "plan-x".into(),
            idea_id: "idea-1".into(),
            operationalization: parsed.sections,
            codeblock_ids: parsed.codeblock_ids,
            tiers: parsed.tiers,
            conditioning_text: String::new(),
            library_version: 2,
            experiment_model: "m".into(),
        }
    }

    #[test]
    fn validation_reports() {
        let lib = library();
        assert!(validate_plan(&valid_plan(), &lib).is_ok());

        let mut p = valid_plan();
        p.tiers.swap(0, 1);
        let msgs = validate_plan(&p, &lib).messages();
        assert_eq!(msgs[0], "tier order: PILOT before MINI_PILOT");

        let mut p = valid_plan();
        p.operationalization.remove(&Section::SuccessCriteria);
        assert_eq!(
            validate_plan(&p, &lib).messages(),
            ["missing section: SUCCESS CRITERIA"]
        );

        let mut p = valid_plan();
        p.tiers[1].scale_params.insert("episodes".into(), 1);
        assert!(matches!(
            validate_plan(&p, &lib).violations[..],
            [Violation::DecreasingScale { .. }, ..]
        ));

        let mut p = valid_plan();
        p.tiers.push(p.tiers[2].clone());
        assert!(validate_plan(&p, &lib)
            .violations
            .contains(&Violation::DuplicateTier { tier: TierName::FullExperiment }));

        let mut p = valid_plan();
        p.tiers.remove(0);
        assert!(validate_plan(&p, &lib).messages()[0].starts_with("tier order"));

        let mut p = valid_plan();
        p.tiers.truncate(2);
        assert!(validate_plan(&p, &lib).is_ok(), "a prefix of the tiers is fine");
    }

    #[test]
    fn store_round_trip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let store = PlanStore::new(dir.path());
        let plan = valid_plan();
        store.save(&plan).unwrap();
        assert_eq!(store.load(&plan.id).unwrap(), plan);
        assert_eq!(store.list().unwrap(), vec![plan.clone()]);
        assert!(matches!(store.load("nope"), Err(PlanningError::NotFound(_))));
        std::fs::write(dir.path().join(&plan.id).join("plan.txt"), "edited").unwrap();
        assert!(matches!(
            store.load(&plan.id),
            Err(PlanningError::Store(StoreError::Integrity { .. }))
        ));
    }

    #[test]
    fn plan_text_round_trips_through_parser() {
        let plan = valid_plan();
        let parsed = parse_plan_text(&plan.text());
        assert_eq!(parsed.sections, plan.operationalization);
        assert_eq!(parsed.codeblock_ids, plan.codeblock_ids);
        assert_eq!(parsed.tiers, plan.tiers);
    }

    #[test]
    fn markdown_decorated_headers() {
        let text = "**EXPERIMENT MODES AND SCOPE:**\n- `MINI_PILOT`: 2 episodes\n- `PILOT`: 5 episodes\n**EXECUTION FLOW:** run `MINI_PILOT` and then stop\n";
        let parsed = parse_plan_text(text);
        assert_eq!(parsed.tiers.len(), 2);
        assert!(parsed.tiers[0].stop_after);
        assert_eq!(parsed.tiers[1].scale_params["episodes"], 5);
    }
}
