//! Reports, one-line summaries with a hypothesis verdict, and the
//! "interesting" flag.
//!
//! Files live under `runs/<run_id>/report/`:
//! `report_source` (LaTeX, or the failure digest), `report_rendered`,
//! `report.meta` (figure manifest), `render.meta`, and `summary.meta`.
//!
//! Runs that did not complete get a failure digest assembled locally; they
//! cost no model calls and carry no verdict.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::builder::{iteration_dir, ExperimentRun, OutcomeKind};
use crate::gateway::{GatewayError, ModelSession, Stage};
use crate::ids::sha256_hex;
use crate::planning::Plan;
use crate::prompts::{PromptError, PromptKind, PromptSet};
use crate::protocol::{excerpt, first_fenced, tag_value};
use crate::store::{read_document, write_atomic, write_document, StoreError};

pub const REPORT_DIR: &str = "report";
pub const REPORT_SOURCE: &str = "report_source";
pub const REPORT_RENDERED: &str = "report_rendered";
pub const SUMMARY_META: &str = "summary.meta";
const REPORT_META: &str = "report.meta";
const RENDER_META: &str = "render.meta";

const FIGURE_EXTENSIONS: [&str; 7] = ["png", "jpg", "jpeg", "svg", "pdf", "eps", "gif"];

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("no usable {stage} reply after {attempts} attempt(s)")]
    Malformed {
        stage: Stage,
        attempts: u32,
        raw_output: String,
    },
    #[error("summary has no valid verdict after {attempts} attempt(s)")]
    MissingVerdict { attempts: u32, raw_output: String },
}

/// Per-run hypothesis status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Supports,
    Rejects,
    Inconclusive,
}

impl Verdict {
    pub const ALL: [Verdict; 3] = [Verdict::Supports, Verdict::Rejects, Verdict::Inconclusive];

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Supports => "supports",
            Verdict::Rejects => "rejects",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verdict {
    type Err = String;

    /// Accepts the canonical word and its close inflections; anything else,
    /// including an echo of the whole menu, is rejected.
    fn from_str(s: &str) -> Result<Self, String> {
        let word = s
            .trim()
            .trim_matches(|c: char| !c.is_ascii_alphanumeric())
            .to_ascii_lowercase();
        match word.as_str() {
            "supports" | "support" | "supported" | "supporting" => Ok(Verdict::Supports),
            "rejects" | "reject" | "rejected" | "rejecting" | "refutes" | "refuted" => {
                Ok(Verdict::Rejects)
            }
            "inconclusive" => Ok(Verdict::Inconclusive),
            _ => Err(format!("not a verdict: `{}`", s.trim())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportKind {
    Full,
    FailureDigest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FigureRef {
    /// Relative to the run directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub run_id: String,
    pub kind: ReportKind,
    #[serde(skip)]
    pub document: String,
    pub figures: Vec<FigureRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub run_id: String,
    pub outcome: OutcomeKind,
    pub text: String,
    pub verdict: Option<Verdict>,
    pub interesting: bool,
    pub interesting_rationale: String,
    /// Summarization failed; a person has to judge this run.
    pub needs_human: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderRecord {
    pub source_sha256: String,
    pub ok: bool,
    pub error: Option<String>,
}

pub fn report_dir(run_dir: &Path) -> PathBuf {
    run_dir.join(REPORT_DIR)
}

/// Last iteration that ran code, with the files it left behind.
fn final_iteration(run: &ExperimentRun) -> Option<&crate::builder::DebugIteration> {
    run.iterations.iter().rev().find(|i| i.execution.is_some())
}

fn read_lossy(path: &Path) -> String {
    std::fs::read(path)
        .map(|b| String::from_utf8_lossy(&b).into_owned())
        .unwrap_or_default()
}

/// Figures among the final iteration's archived artifacts.
pub fn figure_manifest(run: &ExperimentRun, run_dir: &Path) -> Vec<FigureRef> {
    let Some(it) = final_iteration(run) else {
        return Vec::new();
    };
    let base = iteration_dir(run_dir, it.index).join("artifacts");
    let mut out: Vec<FigureRef> = it
        .execution
        .iter()
        .flat_map(|e| &e.artifacts.entries)
        .filter(|a| {
            a.path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| FIGURE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .map(|a| FigureRef {
            path: base
                .join(&a.path)
                .strip_prefix(run_dir)
                .map(Path::to_path_buf)
                .unwrap_or_else(|_| a.path.clone()),
            sha256: a.sha256.clone(),
        })
        .collect();
    out.sort_by(|a, b| a.path.cmp(&b.path));
    out
}

/// Deterministic account of a run that did not complete.
pub fn failure_digest(run: &ExperimentRun, run_dir: &Path, window: usize) -> String {
    let (kind, detail) = run
        .outcome
        .as_ref()
        .map_or(("Unfinished".to_string(), String::new()), |o| {
            (o.kind.to_string(), o.detail.clone())
        });
    let tiers: Vec<&str> = run.tier_history.iter().map(|t| t.as_str()).collect();
    let mut out = format!(
        "Run {} ended with {kind}: {detail}\nIterations: {}\nTiers entered: {}\nTotal cost: {}\n",
        run.id,
        run.iterations.len(),
        tiers.join(" -> "),
        run.total_cost.to_dollar_string(),
    );
    match final_iteration(run) {
        Some(it) => {
            let stderr = read_lossy(&iteration_dir(run_dir, it.index).join("stderr"));
            let status = it
                .execution
                .as_ref()
                .map(|e| format!("{:?}", e.exit_status))
                .unwrap_or_default();
            out.push_str(&format!(
                "Last execution (iteration {}, {status}):\n{}\n",
                it.index,
                excerpt(stderr.trim_end(), window)
            ));
        }
        None => out.push_str("No program was executed.\n"),
    }
    let warnings: Vec<&String> = run.iterations.iter().flat_map(|i| &i.warnings).collect();
    if let Some(last) = warnings.last() {
        out.push_str(&format!("Last warning: {last}\n"));
    }
    out
}

pub struct Reporter<'a> {
    pub session: &'a ModelSession,
    pub prompts: &'a PromptSet,
    pub retry_cap: u32,
    pub excerpt_window: usize,
}

impl<'a> Reporter<'a> {
    pub fn new(session: &'a ModelSession, prompts: &'a PromptSet) -> Self {
        Reporter {
            session,
            prompts,
            retry_cap: 3,
            excerpt_window: 8 * 1024,
        }
    }

    fn logs_text(&self, run_dir: &Path, index: u32) -> String {
        let dir = iteration_dir(run_dir, index);
        let mut out = String::new();
        for name in ["stdout", "stderr"] {
            let text = read_lossy(&dir.join(name));
            out.push_str(&format!("--- {name} ---\n{}\n", excerpt(&text, self.excerpt_window)));
        }
        let mut logs: Vec<PathBuf> = walk(&dir.join("logs"));
        logs.sort();
        for path in logs {
            let rel = path.strip_prefix(dir.join("logs")).unwrap_or(&path);
            out.push_str(&format!(
                "--- {} ---\n{}\n",
                rel.display(),
                excerpt(&read_lossy(&path), self.excerpt_window)
            ));
        }
        out
    }

    /// Written report for a completed run; a failure digest otherwise.
    pub fn build_report(&self, plan: &Plan, run: &ExperimentRun, run_dir: &Path) -> Result<Report, ReportError> {
        let completed = run.outcome.as_ref().is_some_and(|o| o.kind == OutcomeKind::Completed);
        let figures = figure_manifest(run, run_dir);
        if !completed {
            return Ok(Report {
                run_id: run.id.clone(),
                kind: ReportKind::FailureDigest,
                document: failure_digest(run, run_dir, self.excerpt_window),
                figures,
            });
        }
        let it = final_iteration(run).expect("completed run executed code");
        let code = read_lossy(&iteration_dir(run_dir, it.index).join("code"));
        let mut artifacts = String::new();
        for a in it.execution.iter().flat_map(|e| &e.artifacts.entries) {
            artifacts.push_str(&format!("{} ({} bytes)\n", a.path.display(), a.bytes));
        }
        for f in &figures {
            artifacts.push_str(&format!("figure: {}\n", f.path.display()));
        }
        if artifacts.is_empty() {
            artifacts.push_str("(none)\n");
        }
        let plan_text = plan.text();
        let logs = self.logs_text(run_dir, it.index);
        let prompt = self.prompts.render(
            PromptKind::Report,
            &[
                ("plan", &plan_text),
                ("code", &code),
                ("artifacts", &artifacts),
                ("logs", &logs),
            ],
        )?;
        let attempts = self.retry_cap.max(1);
        let mut raw = String::new();
        for attempt in 1..=attempts {
            let reply = self.session.ask(Stage::Report, 0, &prompt)?;
            if let Some(block) = first_fenced(&reply.text, &["latex", "tex"]) {
                if !block.body.trim().is_empty() {
                    return Ok(Report {
                        run_id: run.id.clone(),
                        kind: ReportKind::Full,
                        document: block.body.to_string(),
                        figures,
                    });
                }
            }
            warn!(run = %run.id, attempt, "report reply had no latex block");
            raw = reply.text;
        }
        Err(ReportError::Malformed {
            stage: Stage::Report,
            attempts,
            raw_output: raw,
        })
    }

    /// Summary text and verdict. Failure digests are summarized locally.
    pub fn summarize(&self, plan: &Plan, run: &ExperimentRun, report: &Report) -> Result<ResultSummary, ReportError> {
        let outcome = run.outcome.as_ref().map_or(OutcomeKind::DebugLimit, |o| o.kind);
        let base = ResultSummary {
            run_id: run.id.clone(),
            outcome,
            text: String::new(),
            verdict: None,
            interesting: false,
            interesting_rationale: String::new(),
            needs_human: false,
            warnings: Vec::new(),
        };
        if report.kind == ReportKind::FailureDigest {
            let detail = run.outcome.as_ref().map_or("", |o| o.detail.as_str());
            return Ok(ResultSummary {
                text: format!(
                    "The experiment did not complete ({outcome}: {detail}) after {} debug iterations.",
                    run.iterations.len()
                ),
                ..base
            });
        }
        let plan_text = plan.text();
        let prompt = self.prompts.render(
            PromptKind::Summary,
            &[("plan", &plan_text), ("report", &report.document)],
        )?;
        let attempts = self.retry_cap.max(1);
        let mut raw = String::new();
        for attempt in 1..=attempts {
            let reply = self.session.ask(Stage::Summary, 0, &prompt)?;
            let text = tag_value(&reply.text, "summary").unwrap_or("").trim();
            let verdict = tag_value(&reply.text, "verdict").and_then(|v| v.parse::<Verdict>().ok());
            if let (false, Some(verdict)) = (text.is_empty(), verdict) {
                return Ok(ResultSummary {
                    text: text.to_string(),
                    verdict: Some(verdict),
                    ..base
                });
            }
            warn!(run = %run.id, attempt, "summary reply lacked summary or verdict");
            raw = reply.text;
        }
        Err(ReportError::MissingVerdict {
            attempts,
            raw_output: raw,
        })
    }

    /// Heuristic flag for human attention. Unparseable replies count as "no".
    pub fn flag_interesting(&self, summary: &mut ResultSummary) -> Result<bool, ReportError> {
        let body = match summary.verdict {
            Some(v) => format!("{}\nverdict: {v}", summary.text),
            None => summary.text.clone(),
        };
        let prompt = self.prompts.render(PromptKind::Interesting, &[("summary", &body)])?;
        let reply = self.session.ask(Stage::Interesting, 0, &prompt)?;
        let flag = tag_value(&reply.text, "interesting").and_then(|v| {
            match v.trim_end_matches('.').to_ascii_lowercase().as_str() {
                "yes" | "true" => Some(true),
                "no" | "false" => Some(false),
                _ => None,
            }
        });
        summary.interesting_rationale = tag_value(&reply.text, "rationale").unwrap_or("").to_string();
        match flag {
            Some(f) => summary.interesting = f,
            None => {
                summary.interesting = false;
                summary
                    .warnings
                    .push("interesting flag unreadable; recorded as no".into());
            }
        }
        Ok(summary.interesting)
    }

    /// Report, summary and flag for one terminal run, persisted under the
    /// run's `report/` directory. A summary failure is recorded as a
    /// needs-human summary rather than returned.
    pub fn process(&self, plan: &Plan, run: &ExperimentRun, run_dir: &Path) -> Result<ResultSummary, ReportError> {
        let mut warnings = Vec::new();
        let report = match self.build_report(plan, run, run_dir) {
            Ok(r) => r,
            Err(ReportError::Malformed { raw_output, .. }) => {
                warn!(run = %run.id, "malformed report: {}", excerpt(&raw_output, 200));
                warnings.push("report generation failed; summarizing from logs".to_string());
                let index = final_iteration(run).map_or(1, |i| i.index);
                Report {
                    run_id: run.id.clone(),
                    kind: ReportKind::Full,
                    document: format!("(no report document)\n{}", self.logs_text(run_dir, index)),
                    figures: figure_manifest(run, run_dir),
                }
            }
            Err(e) => return Err(e),
        };
        save_report(run_dir, &report)?;
        let mut summary = match self.summarize(plan, run, &report) {
            Ok(s) => s,
            Err(ReportError::MissingVerdict { attempts, .. }) => ResultSummary {
                run_id: run.id.clone(),
                outcome: run.outcome.as_ref().map_or(OutcomeKind::DebugLimit, |o| o.kind),
                text: format!("No verdict could be read after {attempts} attempts; needs human review."),
                verdict: None,
                interesting: false,
                interesting_rationale: String::new(),
                needs_human: true,
                warnings: Vec::new(),
            },
            Err(e) => return Err(e),
        };
        summary.warnings.splice(0..0, warnings);
        if report.kind == ReportKind::Full && !summary.needs_human {
            self.flag_interesting(&mut summary)?;
        }
        save_summary(run_dir, &summary)?;
        Ok(summary)
    }
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let Ok(entries) = std::fs::read_dir(dir) else {
        return out;
    };
    for e in entries.flatten() {
        let p = e.path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

pub fn save_report(run_dir: &Path, report: &Report) -> Result<(), StoreError> {
    let dir = report_dir(run_dir);
    std::fs::create_dir_all(&dir)?;
    write_atomic(&dir.join(REPORT_SOURCE), report.document.as_bytes())?;
    write_document(&dir.join(REPORT_META), report)
}

pub fn load_report(run_dir: &Path) -> Result<Report, StoreError> {
    let dir = report_dir(run_dir);
    let mut report: Report = read_document(&dir.join(REPORT_META))?;
    report.document = std::fs::read_to_string(dir.join(REPORT_SOURCE))?;
    Ok(report)
}

pub fn save_summary(run_dir: &Path, summary: &ResultSummary) -> Result<(), StoreError> {
    let dir = report_dir(run_dir);
    std::fs::create_dir_all(&dir)?;
    write_document(&dir.join(SUMMARY_META), summary)
}

pub fn load_summary(run_dir: &Path) -> Result<ResultSummary, StoreError> {
    read_document(&report_dir(run_dir).join(SUMMARY_META))
}

/// Turns typeset source into a portable document.
pub trait DocumentRenderer: Send + Sync {
    /// Run inside `workdir`, which holds the source as `report.tex`; leave the
    /// result in `workdir/report.pdf`.
    fn render(&self, workdir: &Path) -> Result<(), String>;
}

/// External typesetting command run in a scratch directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandRenderer {
    pub argv: Vec<String>,
}

impl Default for CommandRenderer {
    fn default() -> Self {
        CommandRenderer {
            argv: ["pdflatex", "-interaction=nonstopmode", "-halt-on-error", "report.tex"]
                .map(String::from)
                .to_vec(),
        }
    }
}

impl DocumentRenderer for CommandRenderer {
    fn render(&self, workdir: &Path) -> Result<(), String> {
        let (program, args) = self.argv.split_first().ok_or("empty render command")?;
        let out = Command::new(program)
            .args(args)
            .current_dir(workdir)
            .output()
            .map_err(|e| format!("{program}: {e}"))?;
        if out.status.success() {
            Ok(())
        } else {
            let mut msg = String::from_utf8_lossy(&out.stdout).into_owned();
            msg.push_str(&String::from_utf8_lossy(&out.stderr));
            Err(format!("{program} exited with {}: {}", out.status, excerpt(msg.trim(), 1024)))
        }
    }
}

/// Render `report_source` beside itself. Skips work when the source is
/// unchanged since the last successful render; failures are recorded, never
/// fatal, and the source is left alone.
pub fn render_document(run_dir: &Path, renderer: &dyn DocumentRenderer) -> Result<RenderRecord, StoreError> {
    let dir = report_dir(run_dir);
    let source = std::fs::read(dir.join(REPORT_SOURCE))?;
    let digest = sha256_hex(&source);
    let meta_path = dir.join(RENDER_META);
    let rendered = dir.join(REPORT_RENDERED);
    if let Ok(prev) = read_document::<RenderRecord>(&meta_path) {
        if prev.ok && prev.source_sha256 == digest && rendered.exists() {
            return Ok(prev);
        }
    }
    let scratch = tempfile::tempdir()?;
    std::fs::write(scratch.path().join("report.tex"), &source)?;
    let result = renderer.render(scratch.path()).and_then(|()| {
        let pdf = scratch.path().join("report.pdf");
        match std::fs::read(&pdf) {
            Ok(bytes) if !bytes.is_empty() => Ok(bytes),
            Ok(_) => Err("renderer produced an empty document".to_string()),
            Err(e) => Err(format!("renderer produced no document: {e}")),
        }
    });
    let record = match result {
        Ok(bytes) => {
            write_atomic(&rendered, &bytes)?;
            RenderRecord {
                source_sha256: digest,
                ok: true,
                error: None,
            }
        }
        Err(e) => {
            warn!(dir = %dir.display(), "render failed: {e}");
            RenderRecord {
                source_sha256: digest,
                ok: false,
                error: Some(e),
            }
        }
    };
    write_document(&meta_path, &record)?;
    Ok(record)
}
