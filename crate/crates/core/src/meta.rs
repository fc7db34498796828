//! Cross-run meta-analysis and the review gate.
//!
//! Consistency over N attempts of one plan is rule-based, checked in order:
//! Limited when at most 40% of attempts completed; Consistent when at least
//! 80% of attempts completed with the same verdict, supports or rejects
//! (inconclusive never counts as agreement); Mixed otherwise. Fractions use
//! all N attempts as the denominator.
//!
//! Review ratings binarize to (soundness, novelty) bits. A discovery passes
//! external review when a strict majority of reviewers give a one on both
//! scales; the final decision also needs a recorded internal pass.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::builder::OutcomeKind;
use crate::gateway::{ModelSession, Stage};
use crate::ids::is_safe_id;
use crate::prompts::{PromptError, PromptKind, PromptSet};
use crate::reporting::{ResultSummary, Verdict};
use crate::store::{read_document, write_document, RecordLog, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum MetaError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("no attempts to analyse")]
    NoAttempts,
    #[error("invalid id `{0}`")]
    InvalidId(String),
    #[error("unknown rating value `{0}`")]
    UnknownRating(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Classification {
    Consistent,
    Mixed,
    Limited,
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Classification::Consistent => "Consistent",
            Classification::Mixed => "Mixed",
            Classification::Limited => "Limited",
        })
    }
}

/// One attempt as the classifier sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttemptResult {
    pub completed: bool,
    pub verdict: Option<Verdict>,
}

pub fn classify_consistency(attempts: &[AttemptResult]) -> Classification {
    let n = attempts.len();
    let completed: Vec<&AttemptResult> = attempts.iter().filter(|a| a.completed).collect();
    if 5 * completed.len() <= 2 * n {
        return Classification::Limited;
    }
    let agreeing = [Verdict::Supports, Verdict::Rejects]
        .iter()
        .map(|v| completed.iter().filter(|a| a.verdict == Some(*v)).count())
        .max()
        .unwrap_or(0);
    if 5 * agreeing >= 4 * n {
        Classification::Consistent
    } else {
        Classification::Mixed
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptSummary {
    pub run_id: String,
    pub outcome: OutcomeKind,
    pub verdict: Option<Verdict>,
    pub interesting: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaAnalysisReport {
    pub idea_id: String,
    pub plan_id: String,
    pub attempt_summaries: Vec<AttemptSummary>,
    pub classification: Classification,
    pub narrative: String,
    /// Any attempt was flagged interesting.
    pub interesting: bool,
    pub warnings: Vec<String>,
}

/// Classify the attempts and ask the model for a narrative. The
/// classification never depends on the model; a failed narrative call
/// leaves it empty with a warning.
pub fn meta_report(
    idea_id: &str,
    idea_text: &str,
    plan_id: &str,
    summaries: &[ResultSummary],
    session: &ModelSession,
    prompts: &PromptSet,
) -> Result<MetaAnalysisReport, MetaError> {
    if summaries.is_empty() {
        return Err(MetaError::NoAttempts);
    }
    let attempts: Vec<AttemptResult> = summaries
        .iter()
        .map(|s| AttemptResult {
            completed: s.outcome == OutcomeKind::Completed,
            verdict: s.verdict,
        })
        .collect();
    let classification = classify_consistency(&attempts);
    let mut listing = String::new();
    for (i, s) in summaries.iter().enumerate() {
        let verdict = s.verdict.map_or("none".to_string(), |v| v.to_string());
        listing.push_str(&format!(
            "Run {} ({}): outcome {}, verdict {verdict}\n{}\n\n",
            i + 1,
            s.run_id,
            s.outcome,
            s.text
        ));
    }
    let prompt = prompts.render(
        PromptKind::MetaAnalysis,
        &[
            ("idea", idea_text),
            ("summaries", &listing),
            ("classification", &classification.to_string()),
        ],
    )?;
    let mut warnings = Vec::new();
    let narrative = match session.ask(Stage::Meta, 0, &prompt) {
        Ok(c) => c.text.trim().to_string(),
        Err(e) => {
            warn!(plan = plan_id, "meta narrative failed: {e}");
            warnings.push(format!("narrative unavailable: {e}"));
            String::new()
        }
    };
    Ok(MetaAnalysisReport {
        idea_id: idea_id.to_string(),
        plan_id: plan_id.to_string(),
        attempt_summaries: summaries
            .iter()
            .map(|s| AttemptSummary {
                run_id: s.run_id.clone(),
                outcome: s.outcome,
                verdict: s.verdict,
                interesting: s.interesting,
            })
            .collect(),
        classification,
        narrative,
        interesting: summaries.iter().any(|s| s.interesting),
        warnings,
    })
}

pub fn meta_path(root: &Path, plan_id: &str) -> PathBuf {
    root.join("meta").join(plan_id).join("meta.json")
}

pub fn save_meta(root: &Path, report: &MetaAnalysisReport) -> Result<PathBuf, MetaError> {
    if !is_safe_id(&report.plan_id) {
        return Err(MetaError::InvalidId(report.plan_id.clone()));
    }
    let path = meta_path(root, &report.plan_id);
    write_document(&path, report)?;
    Ok(path)
}

pub fn load_meta(root: &Path, plan_id: &str) -> Result<MetaAnalysisReport, MetaError> {
    if !is_safe_id(plan_id) {
        return Err(MetaError::InvalidId(plan_id.to_string()));
    }
    Ok(read_document(&meta_path(root, plan_id))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Soundness {
    ClearlySound,
    LikelySound,
    MinorConcerns,
    Unsound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Novelty {
    HighlyNovel,
    IncrSignificant,
    IncrMinor,
    NotNovel,
}

impl Soundness {
    pub const ALL: [Soundness; 4] = [
        Soundness::ClearlySound,
        Soundness::LikelySound,
        Soundness::MinorConcerns,
        Soundness::Unsound,
    ];
}

impl Novelty {
    pub const ALL: [Novelty; 4] = [
        Novelty::HighlyNovel,
        Novelty::IncrSignificant,
        Novelty::IncrMinor,
        Novelty::NotNovel,
    ];
}

fn norm(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_ascii_lowercase()
}

impl FromStr for Soundness {
    type Err = MetaError;

    fn from_str(s: &str) -> Result<Self, MetaError> {
        Soundness::ALL
            .into_iter()
            .find(|v| norm(&format!("{v:?}")) == norm(s))
            .ok_or_else(|| MetaError::UnknownRating(s.to_string()))
    }
}

impl FromStr for Novelty {
    type Err = MetaError;

    fn from_str(s: &str) -> Result<Self, MetaError> {
        Novelty::ALL
            .into_iter()
            .find(|v| norm(&format!("{v:?}")) == norm(s))
            .ok_or_else(|| MetaError::UnknownRating(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRating {
    pub reviewer_id: String,
    pub soundness: Soundness,
    pub novelty: Novelty,
    #[serde(default)]
    pub justification: String,
}

/// `(soundness_bit, novelty_bit)`: Unsound and NotNovel map to zero,
/// everything else to one.
pub fn binarize_rating(rating: &ReviewRating) -> (u8, u8) {
    (
        u8::from(rating.soundness != Soundness::Unsound),
        u8::from(rating.novelty != Novelty::NotNovel),
    )
}

/// Strict majority on both scales; ties and empty input fail.
pub fn external_gate_bits(bits: &[(u8, u8)]) -> bool {
    let n = bits.len();
    let sound = bits.iter().filter(|b| b.0 == 1).count();
    let novel = bits.iter().filter(|b| b.1 == 1).count();
    n > 0 && 2 * sound > n && 2 * novel > n
}

pub fn external_gate(ratings: &[ReviewRating]) -> bool {
    let bits: Vec<(u8, u8)> = ratings.iter().map(binarize_rating).collect();
    external_gate_bits(&bits)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InternalReview {
    pub reviewer_id: String,
    pub passed: bool,
    pub notes: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateDecision {
    pub discovery_id: String,
    pub external_pass: bool,
    /// False until an internal review is recorded.
    pub internal_pass: bool,
    pub internal_review: Option<InternalReview>,
    pub ratings: usize,
    #[serde(rename = "final")]
    pub final_pass: bool,
}

impl GateDecision {
    pub fn compute(discovery_id: &str, ratings: &[ReviewRating], internal: Option<&InternalReview>) -> Self {
        let external_pass = external_gate(ratings);
        let internal_pass = internal.is_some_and(|r| r.passed);
        GateDecision {
            discovery_id: discovery_id.to_string(),
            external_pass,
            internal_pass,
            internal_review: internal.cloned(),
            ratings: ratings.len(),
            final_pass: external_pass && internal_pass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum AuditAction {
    Rating { rating: ReviewRating },
    InternalReview { review: InternalReview },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub action: AuditAction,
    pub decision: GateDecision,
}

/// `reviews/<discovery_id>/{ratings.json, internal.json, gate.json, audit.log}`.
pub struct ReviewStore {
    dir: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct Ratings {
    ratings: Vec<ReviewRating>,
}

impl ReviewStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReviewStore { dir: dir.into() }
    }

    fn entry(&self, id: &str) -> Result<PathBuf, MetaError> {
        if !is_safe_id(id) {
            return Err(MetaError::InvalidId(id.to_string()));
        }
        Ok(self.dir.join(id))
    }

    pub fn ratings(&self, id: &str) -> Result<Vec<ReviewRating>, MetaError> {
        match read_document::<Ratings>(&self.entry(id)?.join("ratings.json")) {
            Ok(r) => Ok(r.ratings),
            Err(StoreError::NotFound(_)) => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn internal(&self, id: &str) -> Result<Option<InternalReview>, MetaError> {
        match read_document(&self.entry(id)?.join("internal.json")) {
            Ok(r) => Ok(Some(r)),
            Err(StoreError::NotFound(_)) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn decision(&self, id: &str) -> Result<GateDecision, MetaError> {
        let ratings = self.ratings(id)?;
        let internal = self.internal(id)?;
        Ok(GateDecision::compute(id, &ratings, internal.as_ref()))
    }

    /// Add or replace (same reviewer) a rating.
    pub fn add_rating(&self, id: &str, rating: ReviewRating) -> Result<GateDecision, MetaError> {
        let dir = self.entry(id)?;
        let mut ratings = self.ratings(id)?;
        match ratings.iter_mut().find(|r| r.reviewer_id == rating.reviewer_id) {
            Some(slot) => *slot = rating.clone(),
            None => ratings.push(rating.clone()),
        }
        write_document(
            &dir.join("ratings.json"),
            &Ratings {
                ratings: ratings.clone(),
            },
        )?;
        self.commit(id, &dir, AuditAction::Rating { rating })
    }

    pub fn set_internal(&self, id: &str, review: InternalReview) -> Result<GateDecision, MetaError> {
        let dir = self.entry(id)?;
        write_document(&dir.join("internal.json"), &review)?;
        self.commit(id, &dir, AuditAction::InternalReview { review })
    }

    fn commit(&self, id: &str, dir: &Path, action: AuditAction) -> Result<GateDecision, MetaError> {
        let decision = self.decision(id)?;
        write_document(&dir.join("gate.json"), &decision)?;
        RecordLog::new(dir.join("audit.log")).append(&AuditEvent {
            at: Utc::now(),
            action,
            decision: decision.clone(),
        })?;
        Ok(decision)
    }

    pub fn audit(&self, id: &str) -> Result<Vec<AuditEvent>, MetaError> {
        let log = RecordLog::new(self.entry(id)?.join("audit.log"));
        if !log.path().exists() {
            return Ok(Vec::new());
        }
        Ok(log.read_all()?)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;
    use crate::gateway::scripted::{Scenario, ScriptRule, ScriptedProvider, ScriptedReply};
    use crate::gateway::{BudgetPolicy, CostScope, Gateway, PricingTable, ProviderConfig};

    fn a(completed: bool, v: Option<Verdict>) -> AttemptResult {
        AttemptResult { completed, verdict: v }
    }

    const S: Option<Verdict> = Some(Verdict::Supports);
    const R: Option<Verdict> = Some(Verdict::Rejects);
    const I: Option<Verdict> = Some(Verdict::Inconclusive);

    #[test]
    fn classification_examples() {
        let c = |v: &[AttemptResult]| classify_consistency(v);
        assert_eq!(c(&[a(true, S), a(true, S), a(true, S), a(true, S), a(true, I)]), Classification::Consistent);
        assert_eq!(
            c(&[a(true, S), a(true, S), a(false, None), a(false, None), a(false, None)]),
            Classification::Limited
        );
        assert_eq!(c(&[a(true, S), a(true, S), a(true, S), a(true, R), a(true, R)]), Classification::Mixed);
        assert_eq!(c(&[a(true, S)]), Classification::Consistent);
        // four agreeing completions and one failure: 4/5 of all attempts
        assert_eq!(c(&[a(true, R), a(true, R), a(true, R), a(true, R), a(false, None)]), Classification::Consistent);
        // agreement on inconclusive is not a shared result
        assert_eq!(c(&[a(true, I), a(true, I), a(true, I), a(true, I), a(true, I)]), Classification::Mixed);
    }

    #[test]
    fn binarization() {
        let r = |s, n| ReviewRating {
            reviewer_id: "x".into(),
            soundness: s,
            novelty: n,
            justification: String::new(),
        };
        assert_eq!(binarize_rating(&r(Soundness::Unsound, Novelty::IncrMinor)), (0, 1));
        assert_eq!(binarize_rating(&r(Soundness::MinorConcerns, Novelty::NotNovel)), (1, 0));
        assert_eq!(binarize_rating(&r(Soundness::ClearlySound, Novelty::HighlyNovel)), (1, 1));
    }

    #[test]
    fn gate_examples() {
        assert!(external_gate_bits(&[(1, 1), (1, 1), (0, 1)]));
        assert!(!external_gate_bits(&[(1, 1), (0, 1), (0, 0)]));
        assert!(external_gate_bits(&[(1, 1); 3]));
        assert!(!external_gate_bits(&[(1, 1), (0, 0)]));
        assert!(!external_gate_bits(&[]));
    }

    #[test]
    fn rating_names_parse() {
        assert_eq!("Clearly Sound".parse::<Soundness>().unwrap(), Soundness::ClearlySound);
        assert_eq!("minor_concerns".parse::<Soundness>().unwrap(), Soundness::MinorConcerns);
        assert_eq!("IncrSignificant".parse::<Novelty>().unwrap(), Novelty::IncrSignificant);
        assert!("great".parse::<Novelty>().is_err());
    }

    proptest! {
        #[test]
        fn gate_is_monotone(bits in prop::collection::vec((0u8..2, 0u8..2), 1..8), idx in 0usize..8, which: bool) {
            let before = external_gate_bits(&bits);
            let mut after = bits.clone();
            let i = idx % after.len();
            if which { after[i].0 = 1 } else { after[i].1 = 1 }
            prop_assert!(!before || external_gate_bits(&after));
        }
    }

    #[test]
    fn review_store_veto_and_audit() {
        let dir = tempfile::tempdir().unwrap();
        let store = ReviewStore::new(dir.path());
        let rate = |who: &str, s, n| ReviewRating {
            reviewer_id: who.into(),
            soundness: s,
            novelty: n,
            justification: "j".into(),
        };
        store.add_rating("d12", rate("r1", Soundness::LikelySound, Novelty::IncrMinor)).unwrap();
        store.add_rating("d12", rate("r2", Soundness::ClearlySound, Novelty::IncrMinor)).unwrap();
        let d = store.add_rating("d12", rate("r3", Soundness::Unsound, Novelty::IncrMinor)).unwrap();
        assert!(d.external_pass);
        assert!(!d.final_pass, "no internal review yet");
        let review = |passed| InternalReview {
            reviewer_id: "internal".into(),
            passed,
            notes: "graph built but never used".into(),
            at: Utc::now(),
        };
        assert!(store.set_internal("d12", review(true)).unwrap().final_pass);
        let vetoed = store.set_internal("d12", review(false)).unwrap();
        assert!(vetoed.external_pass && !vetoed.final_pass);
        assert_eq!(store.audit("d12").unwrap().len(), 5);
        assert_eq!(store.decision("d12").unwrap(), vetoed);
        // same reviewer replaces
        store.add_rating("d12", rate("r3", Soundness::LikelySound, Novelty::IncrMinor)).unwrap();
        assert_eq!(store.ratings("d12").unwrap().len(), 3);
        assert!(store.add_rating("../x", rate("r", Soundness::Unsound, Novelty::NotNovel)).is_err());
    }

    fn summary(i: usize, outcome: OutcomeKind, verdict: Option<Verdict>) -> ResultSummary {
        ResultSummary {
            run_id: format!("run-{i}"),
            outcome,
            text: "t".into(),
            verdict,
            interesting: i == 2,
            interesting_rationale: String::new(),
            needs_human: false,
            warnings: vec![],
        }
    }

    fn session(rules: Vec<ScriptRule>) -> ModelSession {
        let gw = Arc::new(
            Gateway::new(
                Arc::new(ScriptedProvider::new(Scenario::new(rules))),
                ProviderConfig::scripted("m", PricingTable::new(0, 0)),
            )
            .with_retries(1, std::time::Duration::ZERO),
        );
        gw.open_ledger("meta", BudgetPolicy::default(), CostScope::All, None).unwrap();
        ModelSession::new(gw, "meta", "m")
    }

    #[test]
    fn meta_report_classifies_and_narrates() {
        let s = session(vec![ScriptRule {
            stage: Some(Stage::Meta),
            reply: ScriptedReply {
                text: Some("Four of five runs support the hypothesis.".into()),
                ..Default::default()
            },
            ..Default::default()
        }]);
        let mut sums: Vec<ResultSummary> = (0..4).map(|i| summary(i, OutcomeKind::Completed, S)).collect();
        sums.push(summary(4, OutcomeKind::Completed, I));
        let report = meta_report("idea-1", "idea", "plan-1", &sums, &s, &PromptSet::default()).unwrap();
        assert_eq!(report.classification, Classification::Consistent);
        assert!(!report.narrative.is_empty());
        assert!(report.interesting);
        assert_eq!(report.attempt_summaries.len(), 5);

        let dir = tempfile::tempdir().unwrap();
        save_meta(dir.path(), &report).unwrap();
        assert_eq!(load_meta(dir.path(), "plan-1").unwrap(), report);
    }

    #[test]
    fn narrative_failure_keeps_classification() {
        let s = session(vec![ScriptRule {
            stage: Some(Stage::Meta),
            reply: ScriptedReply {
                fail: Some("upstream 500".into()),
                ..Default::default()
            },
            ..Default::default()
        }]);
        let sums = vec![summary(0, OutcomeKind::Completed, S)];
        let report = meta_report("i", "idea", "p", &sums, &s, &PromptSet::default()).unwrap();
        assert_eq!(report.classification, Classification::Consistent);
        assert!(report.narrative.is_empty());
        assert_eq!(report.warnings.len(), 1);
    }
}
