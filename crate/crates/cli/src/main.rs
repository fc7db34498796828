use std::fs;
use std::io::{self, Read, Write};
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use autolab::meta::{Novelty, ReviewRating, Soundness};
use autolab::orchestrator::{listen, Engine, EngineConfig, JobSpec, TriageEntry, ENV_ROOT};

#[derive(Parser)]
#[command(name = "autolab", version, about = "Ideate, build, run, and analyze automated experiments")]
struct Cli {
    /// Store root (created on first use).
    #[arg(long, global = true, env = ENV_ROOT, default_value = "autolab-data")]
    root: PathBuf,

    /// Scripted scenario file; replaces every model provider.
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,

    /// Engine settings file (default: <root>/engine.toml when present).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Add papers and codeblocks to the corpus.
    Ingest {
        #[arg(long, num_args = 1..)]
        papers: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        codeblocks: Vec<PathBuf>,
    },
    /// Generate ideas from sampled paper pairs.
    Ideate {
        #[arg(long, default_value_t = 10)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export or import triage annotations as JSON.
    Triage {
        #[command(subcommand)]
        action: TriageAction,
    },
    /// Plan an idea, or import a hand-written plan.
    Plan {
        #[arg(long)]
        idea: String,
        /// Plan text to import instead of asking the planning model.
        #[arg(long)]
        from_file: Option<PathBuf>,
    },
    /// Run N attempts of a plan and wait for them to finish.
    Run {
        #[arg(long)]
        plan: String,
        #[arg(long)]
        attempts: Option<u32>,
        /// Most attempts of this job running at once.
        #[arg(long)]
        cap: Option<u32>,
    },
    /// Show runs and their status.
    Status {
        #[arg(long)]
        plan: Option<String>,
    },
    /// Print a run's report and summary.
    Report {
        #[arg(long)]
        run: String,
        /// Only the summary.
        #[arg(long)]
        summary: bool,
    },
    /// Meta-analysis across the attempts of a plan or all plans of an idea.
    Meta(MetaTarget),
    /// Record or show discovery reviews.
    Review {
        #[command(subcommand)]
        action: ReviewAction,
    },
    /// Serve the HTTP API until interrupted.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Subcommand)]
enum TriageAction {
    /// Write every idea with its current annotation.
    Export {
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply annotations from a file (`-` for stdin).
    Import { file: PathBuf },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct MetaTarget {
    #[arg(long)]
    idea: Option<String>,
    #[arg(long)]
    plan: Option<String>,
}

#[derive(Subcommand)]
enum ReviewAction {
    /// Add an external rating.
    Rate {
        #[arg(long)]
        id: String,
        #[arg(long)]
        reviewer: String,
        /// clearly-sound, likely-sound, minor-concerns, unsound
        #[arg(long)]
        soundness: Soundness,
        /// highly-novel, incr-significant, incr-minor, not-novel
        #[arg(long)]
        novelty: Novelty,
        #[arg(long, default_value = "")]
        justification: String,
    },
    /// Record the internal pass or veto.
    Internal {
        #[arg(long)]
        id: String,
        #[arg(long)]
        reviewer: String,
        #[arg(long, conflicts_with = "veto", required_unless_present = "veto")]
        pass: bool,
        #[arg(long)]
        veto: bool,
        #[arg(long, default_value = "")]
        notes: String,
    },
    Show {
        #[arg(long)]
        id: String,
    },
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn open(cli: &Cli) -> Result<Arc<Engine>> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            EngineConfig::from_toml_str(&text)?
        }
        None => EngineConfig::load_or_default(&cli.root)?,
    };
    if let Some(s) = &cli.scenario {
        // relative to where the command runs, not to the store root
        config.scenario = Some(std::path::absolute(s)?);
    }
    Engine::open(&cli.root, config).with_context(|| format!("opening store at {}", cli.root.display()))
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(io::stderr)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: &Cli) -> Result<()> {
    let engine = open(cli)?;
    match &cli.command {
        Command::Ingest { papers, codeblocks } => {
            if papers.is_empty() && codeblocks.is_empty() {
                bail!("nothing to ingest: pass --papers and/or --codeblocks");
            }
            print_json(&engine.ingest(papers, codeblocks)?)
        }
        Command::Ideate { pairs, seed } => {
            let report = engine.ideate(*pairs, *seed)?;
            eprintln!(
                "{} generated, {} kept, {} dropped as duplicates, {} failed calls",
                report.generated,
                report.kept.len(),
                report.dropped.len(),
                report.failures.len()
            );
            print_json(&report)
        }
        Command::Triage { action } => match action {
            TriageAction::Export { out } => {
                let text = serde_json::to_string_pretty(&engine.triage_export())?;
                match out {
                    Some(path) => fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display())),
                    None => {
                        println!("{text}");
                        Ok(())
                    }
                }
            }
            TriageAction::Import { file } => {
                let text = if file.as_os_str() == "-" {
                    let mut s = String::new();
                    io::stdin().read_to_string(&mut s)?;
                    s
                } else {
                    fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?
                };
                let entries: Vec<TriageEntry> = serde_json::from_str(&text).context("parsing triage file")?;
                let changed = engine.triage_import(&entries)?;
                eprintln!("{changed} annotation(s) updated");
                Ok(())
            }
        },
        Command::Plan { idea, from_file } => match from_file {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let view = engine.import_plan(idea, &text)?;
                if !view.validation.is_ok() {
                    eprintln!("warning: plan has validation problems: {:?}", view.validation.violations);
                }
                print_json(&view)
            }
            None => print_json(&engine.plan(idea)?),
        },
        Command::Run { plan, attempts, cap } => {
            let spec = JobSpec {
                plan_id: plan.clone(),
                attempts: *attempts,
                policy: None,
                concurrency_cap: *cap,
            };
            let ticket = engine.enqueue(spec)?;
            eprintln!("{}: {} attempt(s) queued", ticket.job_id, ticket.run_ids.len());
            engine.start_scheduler();
            engine.wait_idle();
            let view = engine.job_view(&ticket.job_id)?;
            for r in &view.runs {
                let outcome = r.outcome.map_or("-", |o| o.as_str());
                println!("{}\t{}\titer={}\tcost={}", r.run_id, outcome, r.iteration, r.cost);
            }
            if let Ok(meta) = engine.stored_meta(plan) {
                println!("meta\t{}", meta.classification);
            }
            Ok(())
        }
        Command::Status { plan } => {
            for r in engine.runs(plan.as_deref()) {
                let outcome = r.outcome.map_or("-", |o| o.as_str());
                println!(
                    "{}\t{:?}\t{}\titer={}\tcost={}",
                    r.run_id, r.status, outcome, r.iteration, r.cost
                );
            }
            Ok(())
        }
        Command::Report { run, summary } => {
            if !summary {
                println!("{}", engine.report(run)?.document);
            }
            print_json(&engine.summary(run)?)
        }
        Command::Meta(target) => match (&target.idea, &target.plan) {
            (Some(idea), _) => print_json(&engine.meta_for_idea(idea)?),
            (_, Some(plan)) => print_json(&engine.meta(plan)?),
            _ => unreachable!("clap requires one target"),
        },
        Command::Review { action } => match action {
            ReviewAction::Rate {
                id,
                reviewer,
                soundness,
                novelty,
                justification,
            } => print_json(&engine.add_rating(
                id,
                ReviewRating {
                    reviewer_id: reviewer.clone(),
                    soundness: *soundness,
                    novelty: *novelty,
                    justification: justification.clone(),
                },
            )?),
            ReviewAction::Internal {
                id,
                reviewer,
                pass,
                veto,
                notes,
            } => {
                debug_assert!(pass != veto);
                print_json(&engine.set_internal(id, reviewer, *pass, notes)?)
            }
            ReviewAction::Show { id } => print_json(&engine.review(id)?),
        },
        Command::Serve { bind } => {
            let bind = bind.clone().unwrap_or_else(|| engine.config().api_bind.clone());
            let server = listen(&bind, engine.clone())?;
            eprintln!("serving {}/api/v1", server.url());
            server.join();
            Ok(())
        }
    }
}
