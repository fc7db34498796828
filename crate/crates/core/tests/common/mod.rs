#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use autolab::builder::{BuilderConfig, OutcomeKind};
use autolab::gateway::BudgetPolicy;
use autolab::ideation::Rating;
use autolab::meta::{Classification, MetaAnalysisReport};
use autolab::orchestrator::{Engine, EngineConfig, JobSpec, TriageEntry};
use autolab::planning::TierName;
use autolab::reporting::Verdict;
use autolab::store::RunStatus;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/dryrun")
}

/// Engine settings for offline runs: shell programs, scripted provider,
/// small limits.
pub fn offline_config(scenario: &Path) -> EngineConfig {
    EngineConfig {
        scenario: Some(scenario.to_path_buf()),
        builder: BuilderConfig::shell(),
        ideas_per_call: 2,
        gateway_retries: 1,
        policy: BudgetPolicy {
            max_debug_iterations: 6,
            execution_time_limit_per_iteration: Duration::from_secs(20),
            hard_time_limit: Duration::from_secs(60),
            ..BudgetPolicy::default()
        },
        ..EngineConfig::default()
    }
}

pub fn open(root: &Path, config: EngineConfig) -> Arc<Engine> {
    Engine::open(root, config).expect("engine opens")
}

pub struct DryRun {
    pub engine: Arc<Engine>,
    pub selected_idea: String,
    pub plan_id: String,
    pub run_ids: Vec<String>,
    pub meta: MetaAnalysisReport,
    pub ideas_kept: usize,
    pub ideas_dropped: usize,
}

/// ingest → ideate → triage import → plan → 5 attempts → meta.
pub fn dry_run(root: &Path) -> DryRun {
    let fx = fixture_dir();
    let engine = open(root, offline_config(&fx.join("scenario.yaml")));
    engine
        .ingest(&[fx.join("papers")], &[fx.join("codeblocks")])
        .expect("ingest");
    let ideated = engine.ideate(3, 7).expect("ideate");
    assert!(ideated.failures.is_empty(), "{:?}", ideated.failures);

    let mut entries: Vec<TriageEntry> = engine.triage_export();
    for e in &mut entries {
        if e.name == "confidence-calibration" {
            e.rating = Rating::Selected;
            e.notes = "Use bootstrap intervals for the correlation.".into();
            e.conditioning_text = "Report the correlation with a 95% interval.".into();
        } else {
            e.rating = Rating::Rejected;
        }
    }
    let text = serde_json::to_string(&entries).unwrap();
    let imported: Vec<TriageEntry> = serde_json::from_str(&text).unwrap();
    engine.triage_import(&imported).expect("triage import");
    let selected = entries
        .iter()
        .find(|e| e.rating == Rating::Selected)
        .expect("selected idea")
        .idea_id
        .clone();

    let plan = engine.plan(&selected).expect("plan");
    assert_eq!(
        plan.tiers.iter().map(|t| t.name).collect::<Vec<_>>(),
        [TierName::MiniPilot, TierName::Pilot, TierName::FullExperiment]
    );
    let ticket = engine.enqueue(JobSpec::new(&plan.id).attempts(5)).expect("enqueue");
    engine.start_scheduler();
    engine.wait_idle();
    let meta = engine.meta(&plan.id).expect("meta");
    DryRun {
        engine,
        selected_idea: selected,
        plan_id: plan.id,
        run_ids: ticket.run_ids,
        meta,
        ideas_kept: ideated.kept.len(),
        ideas_dropped: ideated.dropped.len(),
    }
}

/// Everything a dry run produced that must not depend on wall-clock time or
/// scheduling: ids, outcomes, verdicts, program text, stdout, reports.
pub fn fingerprint(d: &DryRun) -> Vec<String> {
    let e = &d.engine;
    let mut out = vec![format!("ideas {:?}", e.ideas().iter().map(|i| &i.id).collect::<Vec<_>>())];
    out.push(format!("plan {}", d.plan_id));
    for id in &d.run_ids {
        let rec = e.run_record(id).unwrap();
        let summary = e.summary(id).unwrap();
        let report = e.report(id).unwrap();
        out.push(format!(
            "{id} {:?} tiers={:?} iters={} cost={} verdict={:?}",
            rec.outcome.as_ref().map(|o| o.kind),
            rec.tier_history,
            rec.iterations.len(),
            rec.total_cost,
            summary.verdict,
        ));
        let dir = e.layout().run(id);
        for it in &rec.iterations {
            let iter = dir.join(format!("iter{}", it.index));
            out.push(std::fs::read_to_string(iter.join("code")).unwrap_or_default());
            out.push(std::fs::read_to_string(iter.join("stdout")).unwrap_or_default());
            let mut arts: Vec<String> = it
                .execution
                .as_ref()
                .map(|x| x.artifacts.entries.iter().map(|a| format!("{} {}", a.path.display(), a.sha256)).collect())
                .unwrap_or_default();
            arts.sort();
            out.extend(arts);
        }
        out.push(report.document);
    }
    out.push(format!("{:?} {:?}", d.meta.classification, d.meta.attempt_summaries));
    out
}

pub fn assert_dry_run_shape(d: &DryRun) {
    let e = &d.engine;
    assert_eq!(d.run_ids.len(), 5);
    for id in &d.run_ids {
        let v = e.run_view(id).unwrap();
        assert_eq!(v.status, RunStatus::Terminal);
        assert_eq!(v.outcome, Some(OutcomeKind::Completed), "{id}");
        assert_eq!(e.summary(id).unwrap().verdict, Some(Verdict::Supports));
    }
    assert_eq!(d.meta.classification, Classification::Consistent);
    assert_eq!(d.meta.attempt_summaries.len(), 5);
}
