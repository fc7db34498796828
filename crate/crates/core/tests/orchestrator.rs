mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use autolab::builder::OutcomeKind;
use autolab::meta::Classification;
use autolab::orchestrator::{EngineConfig, EngineError, JobSpec};
use autolab::store::{Catalog, Layout, RunStatus, RECOVERY_NOTE};
use common::{dry_run, fixture_dir, offline_config, open};

const SLOW_PLAN: &str = "EXPERIMENT MODES AND SCOPE: PILOT_MODE is MINI_PILOT, PILOT or FULL_EXPERIMENT.\n\
MINI_PILOT: 2 episodes;\nPILOT: 4 episodes;\nFULL_EXPERIMENT: 8 episodes.\n\
ENVIRONMENT SETUP: none.\nLLM CONFIGURATION: none.\nDATA COLLECTION PROCEDURE: count.\n\
DATA ANALYSIS: none.\nLOGGING AND OUTPUT: stdout.\n\
EXECUTION FLOW: Run MINI_PILOT, then PILOT, then FULL_EXPERIMENT.\nSUCCESS CRITERIA: exit 0.\nCODEBLOCKS: plotting\n";

/// Scenario whose program sleeps, so runs overlap long enough to observe.
fn slow_scenario(dir: &Path, sleep: &str) -> std::path::PathBuf {
    let path = dir.join("slow.yaml");
    let yaml = format!(
        "rules:\n  - stage: codegen\n    input_tokens: 1000\n    output_tokens: 500\n    text: \"```sh\\nPILOT_MODE=MINI_PILOT\\nsleep {sleep}\\necho step $PILOT_MODE\\n```\"\n\
         \x20 - stage: reflection\n    input_tokens: 800\n    output_tokens: 100\n    text: \"decision: success\"\n\
         \x20 - stage: summary\n    text: \"summary: ok\\nverdict: rejects\"\n\
         \x20 - stage: interesting\n    text: \"interesting: no\"\n\
         \x20 - text: \"```latex\\n\\\\documentclass{{article}}\\n```\"\n"
    );
    std::fs::write(&path, yaml).unwrap();
    path
}

fn engine_with_plan(root: &Path, config: EngineConfig) -> (std::sync::Arc<autolab::orchestrator::Engine>, String) {
    let engine = open(root, config);
    engine.ingest(&[], &[fixture_dir().join("codeblocks")]).unwrap();
    let plan = engine.import_plan("idea-manual", SLOW_PLAN).unwrap();
    assert!(plan.validation.is_ok(), "{:?}", plan.validation);
    (engine, plan.plan.id)
}

#[test]
fn dry_run_produces_consistent_meta_and_layout() {
    let dir = tempfile::tempdir().unwrap();
    let d = dry_run(dir.path());
    common::assert_dry_run_shape(&d);
    assert_eq!((d.ideas_kept, d.ideas_dropped), (5, 1));
    let root = dir.path();
    for p in [
        "catalog.json",
        "ideas/ideas.log",
        "ideas/annotations.log",
        "ledgers/ideation.log",
        "ledgers/planning.log",
        "ledgers/report.log",
        "ledgers/meta.log",
        "corpus/codeblocks/library.json",
    ] {
        assert!(root.join(p).exists(), "{p}");
    }
    assert!(root.join("plans").join(&d.plan_id).join("plan.txt").exists());
    assert!(root.join("meta").join(&d.plan_id).join("meta.json").exists());
    for id in &d.run_ids {
        let run = root.join("runs").join(id);
        for p in ["run.meta", "ledger.log", "iter1/code", "iter3/stdout", "report/report_source", "report/summary.meta"] {
            assert!(run.join(p).exists(), "{id}/{p}");
        }
        assert!(run.join("iter3/artifacts/to_save/confidence_vs_accuracy.png").exists());
    }
}

#[test]
fn enqueue_rejects_unknown_plan_and_bad_attempts() {
    let dir = tempfile::tempdir().unwrap();
    let (engine, plan) = engine_with_plan(dir.path(), offline_config(&slow_scenario(dir.path(), "0")));
    assert!(matches!(
        engine.enqueue(JobSpec::new("plan-nope")),
        Err(EngineError::NotFound { kind: "plan", .. })
    ));
    assert!(matches!(
        engine.enqueue(JobSpec::new(&plan).attempts(0)),
        Err(EngineError::Invalid(_))
    ));
    let bad = engine
        .import_plan("idea-manual", &SLOW_PLAN.replace("plotting", "no-such-block"))
        .unwrap();
    assert!(!bad.validation.is_ok());
    assert!(matches!(engine.enqueue(JobSpec::new(&bad.plan.id)), Err(EngineError::Invalid(_))));
}

#[test]
fn single_attempt_meta_and_pending_error() {
    let dir = tempfile::tempdir().unwrap();
    let (engine, plan) = engine_with_plan(dir.path(), offline_config(&slow_scenario(dir.path(), "0")));
    let ticket = engine.enqueue(JobSpec::new(&plan).attempts(1)).unwrap();
    assert_eq!(ticket.run_ids.len(), 1);
    // scheduler not started yet: the run is still queued
    match engine.meta(&plan) {
        Err(e @ EngineError::RunsPending { .. }) => assert!(e.to_string().contains("runs pending")),
        other => panic!("expected pending, got {other:?}"),
    }
    assert!(matches!(engine.meta_for_idea("idea-manual"), Err(EngineError::RunsPending { .. })));
    engine.start_scheduler();
    engine.wait_idle();
    let meta = engine.stored_meta(&plan).expect("meta auto-triggered");
    assert_eq!(meta.attempt_summaries.len(), 1);
    // 1/1 completed with "rejects"
    assert_eq!(meta.classification, Classification::Consistent);
    assert_eq!(engine.meta_for_idea("idea-manual").unwrap(), vec![meta]);
}

#[test]
fn concurrency_cap_bounds_running_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = EngineConfig {
        concurrency_cap: 2,
        ..offline_config(&slow_scenario(dir.path(), "0.15"))
    };
    let (engine, plan) = engine_with_plan(dir.path(), config);
    engine.enqueue(JobSpec::new(&plan).attempts(6)).unwrap();
    engine.start_scheduler();
    let catalog_path = Layout::new(dir.path());
    let mut max_seen = 0;
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let runs = engine.runs(Some(&plan));
        let running = runs.iter().filter(|r| r.status == RunStatus::Running).count();
        max_seen = max_seen.max(running);
        if runs.iter().all(|r| r.status == RunStatus::Terminal) {
            break;
        }
        assert!(Instant::now() < deadline, "runs did not finish");
        std::thread::sleep(Duration::from_millis(20));
    }
    assert!(max_seen <= 2, "saw {max_seen} running");
    assert_eq!(max_seen, 2, "the pool should have been saturated");
    assert!(engine.scheduler_stats().peak_running <= 2);
    let reopened = Catalog::open(catalog_path).unwrap();
    assert!(reopened.runs().iter().all(|r| r.outcome == Some(OutcomeKind::Completed)));
}

#[test]
fn per_job_cap_serializes_a_job() {
    let dir = tempfile::tempdir().unwrap();
    let (engine, plan) = engine_with_plan(dir.path(), offline_config(&slow_scenario(dir.path(), "0.05")));
    let spec = JobSpec {
        concurrency_cap: Some(1),
        ..JobSpec::new(&plan).attempts(3)
    };
    engine.enqueue(spec).unwrap();
    engine.start_scheduler();
    engine.wait_idle();
    assert_eq!(engine.scheduler_stats().peak_running, 1);
}

#[test]
fn status_polls_are_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let (engine, plan) = engine_with_plan(dir.path(), offline_config(&slow_scenario(dir.path(), "0.2")));
    let ticket = engine.enqueue(JobSpec::new(&plan).attempts(1)).unwrap();
    engine.start_scheduler();
    let id = &ticket.run_ids[0];
    let mut last = (0u32, autolab::Micros::ZERO);
    let mut polls = Vec::new();
    loop {
        let v = engine.run_view(id).unwrap();
        assert!(v.iteration >= last.0 && v.cost >= last.1, "{last:?} -> {v:?}");
        last = (v.iteration, v.cost);
        polls.push(v.cost);
        if v.status == RunStatus::Terminal {
            assert_eq!(v.iteration, 3);
            assert!(v.log_tail.iter().any(|l| l.contains("FULL_EXPERIMENT")), "{:?}", v.log_tail);
            break;
        }
        std::thread::sleep(Duration::from_millis(15));
    }
    assert!(polls.len() >= 3);
    assert!(last.1 > autolab::Micros::ZERO);
    assert_eq!(last.1, engine.run_record(id).unwrap().total_cost);
}

#[test]
fn restart_sweeps_running_and_resumes_queued() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = slow_scenario(dir.path(), "0");
    let plan = {
        let (engine, plan) = engine_with_plan(dir.path(), offline_config(&scenario));
        let ticket = engine.enqueue(JobSpec::new(&plan).attempts(3)).unwrap();
        // pretend a worker had picked up the first run when the process died
        engine
            .catalog()
            .set_status(&ticket.run_ids[0], RunStatus::Running, None, None)
            .unwrap();
        plan
    };
    let engine = open(dir.path(), offline_config(&scenario));
    let runs = engine.runs(Some(&plan));
    assert_eq!(runs[0].status, RunStatus::Terminal);
    assert_eq!(runs[0].outcome, Some(OutcomeKind::HardTimeLimit));
    assert_eq!(runs[0].note.as_deref(), Some(RECOVERY_NOTE));
    assert!(runs[1..].iter().all(|r| r.status == RunStatus::Queued));
    engine.start_scheduler();
    engine.wait_idle();
    let runs = engine.runs(Some(&plan));
    assert!(runs[1..].iter().all(|r| r.outcome == Some(OutcomeKind::Completed)));
    let meta = engine.stored_meta(&plan).unwrap();
    // one of three attempts swept: 2/3 completed is above the limited bound
    assert_eq!(meta.attempt_summaries.len(), 3);
    assert_eq!(meta.classification, Classification::Mixed);
}

#[test]
fn rejected_ideas_cannot_be_planned() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture_dir();
    let engine = open(dir.path(), offline_config(&fx.join("scenario.yaml")));
    engine.ingest(&[fx.join("papers")], &[fx.join("codeblocks")]).unwrap();
    let report = engine.ideate(1, 3).unwrap();
    let id = report.kept[0].clone();
    engine
        .annotate(autolab::ideation::HumanAnnotation {
            idea_id: id.clone(),
            rating: autolab::ideation::Rating::Rejected,
            ..Default::default()
        })
        .unwrap();
    assert!(matches!(engine.plan(&id), Err(EngineError::Invalid(_))));
    // third scripted batch repeats the first batch's calibration idea
    engine.ideate(1, 3).unwrap();
    let third = engine.ideate(1, 3).unwrap();
    assert_eq!(third.kept.len(), 1);
    assert_eq!(third.dropped.len(), 1);
    let original = engine.ideas().into_iter().find(|i| i.name == "confidence-calibration").unwrap();
    assert_eq!(third.dropped[0].nearest_kept, original.id);
    assert_eq!(third.dropped[0].name, "confidence-calibration-repeat");
}
