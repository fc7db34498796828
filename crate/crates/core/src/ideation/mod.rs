//! Idea generation from paper pairs via genetic operators, near-duplicate
//! filtering, and the human triage record.

mod similarity;
mod triage;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tracing::warn;

pub use similarity::{
    cosine, dedup_by, dedup_indices, tokens, DedupOutcome, Dropped, Embedder, SparseVector, TermFrequency,
    DEFAULT_THRESHOLD,
};
pub use triage::{select_batch, StrataKey};

use crate::corpus::{LibrarySnapshot, PaperRecord};
use crate::gateway::{GatewayError, ModelSession, Stage};
use crate::ids::content_id;
use crate::prompts::{PromptError, PromptKind, PromptSet};
use crate::protocol::first_fenced;
use crate::store::{read_document, write_document, RecordLog, StoreError};

pub const DEFAULT_RETRY_CAP: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneticOperator {
    Combine,
    Extend,
    ChallengeAssumption,
    FillGap,
}

impl GeneticOperator {
    pub const ALL: [GeneticOperator; 4] = [
        GeneticOperator::Combine,
        GeneticOperator::Extend,
        GeneticOperator::ChallengeAssumption,
        GeneticOperator::FillGap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GeneticOperator::Combine => "combine",
            GeneticOperator::Extend => "extend",
            GeneticOperator::ChallengeAssumption => "challenge-assumption",
            GeneticOperator::FillGap => "fill-gap",
        }
    }

    /// Round-robin choice for the `n`-th batch.
    pub fn round_robin(n: usize) -> Self {
        Self::ALL[n % Self::ALL.len()]
    }

    fn instructions(self) -> &'static str {
        match self {
            GeneticOperator::Combine => {
                "Cross over: combine a core idea from paper A with a core idea from paper B into one experiment."
            }
            GeneticOperator::Extend => {
                "Mutate by extension: take an idea from either paper and push it to a new setting, scale, or variable."
            }
            GeneticOperator::ChallengeAssumption => {
                "Mutate by challenging an assumption: pick an assumption either paper relies on and design a test that could break it."
            }
            GeneticOperator::FillGap => {
                "Mutate by filling a gap: find something neither paper measured or controlled for, and measure it."
            }
        }
    }
}

impl fmt::Display for GeneticOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for GeneticOperator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| format!("unknown operator `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Variables {
    pub independent: Vec<String>,
    pub dependent: Vec<String>,
    #[serde(default)]
    pub controls: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Idea {
    pub id: String,
    pub name: String,
    pub short_description: String,
    pub long_description: String,
    pub hypothesis: String,
    pub variables: Variables,
    pub metric: String,
    pub baselines: String,
    pub pilot: String,
    pub required_resources: Vec<String>,
    pub operator: GeneticOperator,
    pub source_paper_ids: [String; 2],
    pub codeblock_context_version: u64,
    pub created_at: DateTime<Utc>,
}

impl Idea {
    /// Text compared by the duplicate filter.
    pub fn similarity_text(&self) -> String {
        format!(
            "{}\n{}\n{}\n{}",
            self.short_description, self.long_description, self.hypothesis, self.metric
        )
    }

    /// Plain-text rendering used in planner prompts.
    pub fn describe(&self) -> String {
        format!(
            "Name: {}\nShort description: {}\nLong description: {}\nHypothesis: {}\n\
             Independent variables: {}\nDependent variables: {}\nControls: {}\n\
             Metric: {}\nBaselines: {}\nPilot: {}\nRequired resources: {}",
            self.name,
            self.short_description,
            self.long_description,
            self.hypothesis,
            self.variables.independent.join("; "),
            self.variables.dependent.join("; "),
            self.variables.controls.join("; "),
            self.metric,
            self.baselines,
            self.pilot,
            self.required_resources.join("; ")
        )
    }
}

/// Idea fields as they come back from the model, before validation.
#[derive(Debug, Default, Deserialize)]
struct RawIdea {
    name: Option<String>,
    short_description: Option<String>,
    long_description: Option<String>,
    hypothesis: Option<String>,
    variables: Option<Variables>,
    metric: Option<String>,
    baselines: Option<String>,
    pilot: Option<String>,
    required_resources: Option<Vec<String>>,
}

fn required(field: &'static str, v: Option<String>) -> Result<String, String> {
    match v {
        Some(s) if !s.trim().is_empty() => Ok(s.trim().to_string()),
        _ => Err(format!("missing or empty `{field}`")),
    }
}

fn non_empty_list(field: &'static str, v: &[String]) -> Result<(), String> {
    if v.iter().any(|s| !s.trim().is_empty()) {
        Ok(())
    } else {
        Err(format!("missing or empty `{field}`"))
    }
}

impl RawIdea {
    fn validate(self) -> Result<ValidatedSlots, String> {
        let variables = self.variables.ok_or("missing `variables`")?;
        non_empty_list("variables.independent", &variables.independent)?;
        non_empty_list("variables.dependent", &variables.dependent)?;
        let required_resources = self.required_resources.unwrap_or_default();
        non_empty_list("required_resources", &required_resources)?;
        Ok(ValidatedSlots {
            name: required("name", self.name)?,
            short_description: required("short_description", self.short_description)?,
            long_description: required("long_description", self.long_description)?,
            hypothesis: required("hypothesis", self.hypothesis)?,
            metric: required("metric", self.metric)?,
            baselines: required("baselines", self.baselines)?,
            pilot: required("pilot", self.pilot)?,
            variables,
            required_resources,
        })
    }
}

struct ValidatedSlots {
    name: String,
    short_description: String,
    long_description: String,
    hypothesis: String,
    variables: Variables,
    metric: String,
    baselines: String,
    pilot: String,
    required_resources: Vec<String>,
}

/// Parse a model reply into validated idea slots, reporting per-item problems.
fn parse_reply(text: &str) -> (Vec<ValidatedSlots>, Vec<String>) {
    let body = first_fenced(text, &["json"])
        .or_else(|| first_fenced(text, &[""]))
        .map(|b| b.body)
        .unwrap_or(text);
    let value: serde_json::Value = match serde_json::from_str(body.trim()) {
        Ok(v) => v,
        Err(e) => return (Vec::new(), vec![format!("reply is not JSON: {e}")]),
    };
    let items = match value {
        serde_json::Value::Array(items) => items,
        obj @ serde_json::Value::Object(_) => vec![obj],
        _ => return (Vec::new(), vec!["reply is neither an array nor an object".into()]),
    };
    let mut ok = Vec::new();
    let mut problems = Vec::new();
    for (i, item) in items.into_iter().enumerate() {
        match serde_json::from_value::<RawIdea>(item)
            .map_err(|e| e.to_string())
            .and_then(RawIdea::validate)
        {
            Ok(slots) => ok.push(slots),
            Err(e) => problems.push(format!("idea {i}: {e}")),
        }
    }
    (ok, problems)
}

#[derive(Debug, thiserror::Error)]
pub enum IdeationError {
    #[error("no valid ideas after {attempts} attempts ({problems}); last output: {raw_output}")]
    Generation {
        attempts: u32,
        problems: String,
        raw_output: String,
    },
    #[error("codeblock library is empty")]
    EmptyLibrary,
    #[error("idea count must be at least 1")]
    ZeroCount,
    #[error("unknown idea `{0}`")]
    NotFound(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Generation settings bound to one model session.
pub struct Ideator<'a> {
    pub session: &'a ModelSession,
    pub prompts: &'a PromptSet,
    pub ideas_per_call: usize,
    pub retry_cap: u32,
}

impl<'a> Ideator<'a> {
    pub fn new(session: &'a ModelSession, prompts: &'a PromptSet) -> Self {
        Ideator {
            session,
            prompts,
            ideas_per_call: 10,
            retry_cap: DEFAULT_RETRY_CAP,
        }
    }

    /// Generate ideas for one paper pair. `seq` distinguishes repeated pairs
    /// and enters the idea ids. Items failing slot validation are discarded;
    /// the call is retried (up to `retry_cap` attempts in total) until at
    /// least `ideas_per_call` valid ideas are collected or attempts run out.
    pub fn generate(
        &self,
        a: &PaperRecord,
        b: &PaperRecord,
        library: &LibrarySnapshot,
        operator: GeneticOperator,
        seq: u64,
    ) -> Result<Vec<Idea>, IdeationError> {
        if library.is_empty() {
            return Err(IdeationError::EmptyLibrary);
        }
        if self.ideas_per_call == 0 {
            return Err(IdeationError::ZeroCount);
        }
        let count = self.ideas_per_call.to_string();
        let prompt = self.prompts.render(
            PromptKind::Ideation,
            &[
                ("paper_a", &paper_text(a)),
                ("paper_b", &paper_text(b)),
                ("codeblocks", &library.summaries()),
                ("operator", operator.as_str()),
                ("operator_instructions", operator.instructions()),
                ("count", &count),
            ],
        )?;
        let attempts = self.retry_cap.max(1);
        let mut slots = Vec::new();
        let mut problems = Vec::new();
        let mut last_raw = String::new();
        for attempt in 1..=attempts {
            let reply = self.session.ask(Stage::Ideation, 0, &prompt)?;
            let (ok, bad) = parse_reply(&reply.text);
            if !bad.is_empty() {
                warn!(attempt, problems = ?bad, "discarding malformed ideas");
            }
            slots.extend(ok);
            problems = bad;
            last_raw = reply.text;
            if slots.len() >= self.ideas_per_call {
                break;
            }
        }
        if slots.is_empty() {
            return Err(IdeationError::Generation {
                attempts,
                problems: problems.join("; "),
                raw_output: last_raw,
            });
        }
        slots.truncate(self.ideas_per_call);
        let now = Utc::now();
        let seq = seq.to_string();
        Ok(slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let idx = i.to_string();
                Idea {
                    id: content_id(
                        "idea",
                        &[&a.id, &b.id, operator.as_str(), &seq, &idx, &s.name, &s.hypothesis],
                        12,
                    ),
                    name: s.name,
                    short_description: s.short_description,
                    long_description: s.long_description,
                    hypothesis: s.hypothesis,
                    variables: s.variables,
                    metric: s.metric,
                    baselines: s.baselines,
                    pilot: s.pilot,
                    required_resources: s.required_resources,
                    operator,
                    source_paper_ids: [a.id.clone(), b.id.clone()],
                    codeblock_context_version: library.version,
                    created_at: now,
                }
            })
            .collect())
    }
}

fn paper_text(p: &PaperRecord) -> String {
    format!("Title: {}\n\n{}", p.title, p.body)
}

/// An idea dropped by [`dedup_filter`], with the kept idea it duplicates.
#[derive(Debug, Clone, PartialEq)]
pub struct DroppedIdea {
    pub idea: Idea,
    pub nearest_kept: String,
    pub similarity: f64,
}

pub fn dedup_filter(
    ideas: Vec<Idea>,
    threshold: f64,
    embedder: &dyn Embedder,
) -> (Vec<Idea>, Vec<DroppedIdea>) {
    let texts: Vec<String> = ideas.iter().map(Idea::similarity_text).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let outcome = dedup_indices(&refs, threshold, embedder);
    let ids: Vec<String> = ideas.iter().map(|i| i.id.clone()).collect();
    let mut slots: Vec<Option<Idea>> = ideas.into_iter().map(Some).collect();
    let kept = outcome
        .kept
        .iter()
        .map(|&i| slots[i].take().expect("index kept once"))
        .collect();
    let dropped = outcome
        .dropped
        .iter()
        .map(|d| DroppedIdea {
            idea: slots[d.index].take().expect("index dropped once"),
            nearest_kept: ids[d.nearest_kept].clone(),
            similarity: d.similarity,
        })
        .collect();
    (kept, dropped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rating {
    Selected,
    Rejected,
    #[default]
    Unreviewed,
    PotentiallyFeasible,
}

impl std::str::FromStr for Rating {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown rating `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HumanAnnotation {
    pub idea_id: String,
    pub rating: Rating,
    #[serde(default)]
    pub notes: String,
    #[serde(default)]
    pub conditioning_text: String,
}

/// One line of `ideas/annotations.log`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationEvent {
    pub annotation: HumanAnnotation,
    pub at: DateTime<Utc>,
}

/// An idea together with its current annotation and annotation history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdeaView {
    pub idea: Idea,
    pub annotation: Option<HumanAnnotation>,
    pub history: Vec<AnnotationEvent>,
}

/// File-backed idea store:
///
/// ```text
/// ideas/ideas.log         append-only log of every accepted idea
/// ideas/<id>.json         one document per idea
/// ideas/annotations.log   append-only annotation events (last one wins)
/// ```
pub struct IdeaStore {
    dir: PathBuf,
    log: RecordLog<Idea>,
    annotations_log: RecordLog<AnnotationEvent>,
    ideas: RwLock<BTreeMap<String, (usize, Idea)>>,
    annotations: RwLock<HashMap<String, Vec<AnnotationEvent>>>,
    write: Mutex<()>,
}

impl IdeaStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, IdeationError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(StoreError::Io)?;
        let log = RecordLog::<Idea>::new(dir.join("ideas.log"));
        let annotations_log = RecordLog::<AnnotationEvent>::new(dir.join("annotations.log"));
        let mut ideas = BTreeMap::new();
        for idea in recover_log(&log)? {
            let n = ideas.len();
            ideas.entry(idea.id.clone()).or_insert((n, idea));
        }
        let mut annotations: HashMap<String, Vec<AnnotationEvent>> = HashMap::new();
        for ev in recover_log(&annotations_log)? {
            annotations
                .entry(ev.annotation.idea_id.clone())
                .or_default()
                .push(ev);
        }
        Ok(IdeaStore {
            dir,
            log,
            annotations_log,
            ideas: RwLock::new(ideas),
            annotations: RwLock::new(annotations),
            write: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Append ideas; ids already present are skipped. Returns how many were new.
    pub fn append(&self, batch: &[Idea]) -> Result<usize, IdeationError> {
        let _guard = self.write.lock().unwrap();
        let mut added = 0;
        for idea in batch {
            if self.ideas.read().unwrap().contains_key(&idea.id) {
                continue;
            }
            write_document(&self.dir.join(format!("{}.json", idea.id)), idea)?;
            self.log.append(idea)?;
            let mut ideas = self.ideas.write().unwrap();
            let n = ideas.len();
            ideas.insert(idea.id.clone(), (n, idea.clone()));
            added += 1;
        }
        Ok(added)
    }

    pub fn len(&self) -> usize {
        self.ideas.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All ideas in insertion order.
    pub fn list(&self) -> Vec<Idea> {
        let ideas = self.ideas.read().unwrap();
        let mut all: Vec<&(usize, Idea)> = ideas.values().collect();
        all.sort_by_key(|(n, _)| *n);
        all.into_iter().map(|(_, i)| i.clone()).collect()
    }

    /// Load an idea from its document (digest-checked).
    pub fn get(&self, id: &str) -> Result<Idea, IdeationError> {
        if !self.ideas.read().unwrap().contains_key(id) {
            return Err(IdeationError::NotFound(id.to_string()));
        }
        Ok(read_document(&self.dir.join(format!("{id}.json")))?)
    }

    pub fn view(&self, id: &str) -> Result<IdeaView, IdeationError> {
        let idea = self.get(id)?;
        let history = self
            .annotations
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .unwrap_or_default();
        Ok(IdeaView {
            idea,
            annotation: history.last().map(|e| e.annotation.clone()),
            history,
        })
    }

    pub fn annotation(&self, id: &str) -> Option<HumanAnnotation> {
        self.annotations
            .read()
            .unwrap()
            .get(id)
            .and_then(|h| h.last())
            .map(|e| e.annotation.clone())
    }

    /// Record an annotation; the newest one replaces earlier ones, which stay
    /// in the history.
    pub fn attach_annotation(&self, annotation: HumanAnnotation) -> Result<IdeaView, IdeationError> {
        let id = annotation.idea_id.clone();
        if !self.ideas.read().unwrap().contains_key(&id) {
            return Err(IdeationError::NotFound(id));
        }
        {
            let _guard = self.write.lock().unwrap();
            let ev = AnnotationEvent {
                annotation,
                at: Utc::now(),
            };
            self.annotations_log.append(&ev)?;
            self.annotations
                .write()
                .unwrap()
                .entry(id.clone())
                .or_default()
                .push(ev);
        }
        self.view(&id)
    }

    /// Current annotations of every annotated idea, in idea order.
    pub fn annotations(&self) -> Vec<HumanAnnotation> {
        self.list()
            .iter()
            .filter_map(|i| self.annotation(&i.id))
            .collect()
    }
}

fn recover_log<T>(log: &RecordLog<T>) -> Result<Vec<T>, StoreError>
where
    T: Serialize + serde::de::DeserializeOwned,
{
    let prefix = log.read_prefix()?;
    if let Some(damage) = &prefix.damage {
        warn!(path = %log.path().display(), %damage, "log damaged; truncating to valid prefix");
        log.truncate_to_valid()?;
    }
    Ok(prefix.records)
}

#[cfg(test)]
pub(crate) fn test_idea(name: &str, operator: GeneticOperator) -> Idea {
    Idea {
        id: format!("idea-{name}"),
        name: name.into(),
        short_description: format!("{name} short"),
        long_description: format!("{name} long"),
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
        operator,
        source_paper_ids: ["pa".into(), "pb".into()],
        codeblock_context_version: 1,
        created_at: DateTime::<Utc>::from_timestamp(0, 0).unwrap(),
    }
}

/// A well-formed idea record as the model is asked to emit it.
pub fn example_idea_json(name: &str, hypothesis: &str) -> serde_json::Value {
    serde_json::json!({
        "name": name,
        "short_description": format!("Measure whether {hypothesis}."),
        "long_description": format!("Build an agent, vary the condition, and test whether {hypothesis}."),
        "hypothesis": hypothesis,
        "variables": {"independent": ["condition"], "dependent": ["task score"], "controls": ["seed"]},
        "metric": "task score",
        "baselines": "unmodified agent",
        "pilot": "3 episodes, 10 steps",
        "required_resources": ["agent loop", "plotting"]
    })
}
