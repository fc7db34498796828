//! Supervised execution of generated programs.
//!
//! Each execution gets its own working directory, its own process group, a
//! scrubbed environment, and a wall-clock limit. On timeout the whole group
//! gets SIGTERM, then SIGKILL once half the grace window has passed. Streams
//! are captured byte-exactly up to a cap; files created or changed in the
//! working directory are reported as artifacts.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Read;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant, SystemTime};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::ids::sha256_hex;

pub const DEFAULT_STREAM_CAP: usize = 16 * 1024 * 1024;
pub const DEFAULT_GRACE: Duration = Duration::from_secs(2);
/// Files under this directory are always archived, changed or not.
pub const DROP_DIR: &str = "to_save";

const POLL: Duration = Duration::from_millis(10);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionRequest {
    pub run_id: String,
    pub iteration_index: u32,
    pub workdir: PathBuf,
    pub entry_command: Vec<String>,
    pub env: BTreeMap<String, String>,
    pub time_limit: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ExitStatus {
    /// Normal exit, or `128 + signal` when killed by a signal we did not send.
    Completed { code: i32 },
    TimedOut,
    LaunchFailed { diagnostic: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogFile {
    pub path: PathBuf,
    #[serde(skip)]
    pub bytes: Vec<u8>,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionRecord {
    pub exit_status: ExitStatus,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub stdout_truncated: bool,
    pub stderr_truncated: bool,
    pub log_files: Vec<LogFile>,
    pub duration: Duration,
    /// Paths relative to the working directory, sorted.
    pub artifacts: Vec<PathBuf>,
    pub workdir: PathBuf,
    /// Process group the program ran in (for post-mortem process checks).
    pub process_group: Option<i32>,
}

impl ExecutionRecord {
    pub fn launch_failed(workdir: &Path, diagnostic: String) -> Self {
        ExecutionRecord {
            exit_status: ExitStatus::LaunchFailed { diagnostic },
            stdout: Vec::new(),
            stderr: Vec::new(),
            stdout_truncated: false,
            stderr_truncated: false,
            log_files: Vec::new(),
            duration: Duration::ZERO,
            artifacts: Vec::new(),
            workdir: workdir.to_path_buf(),
            process_group: None,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.exit_status == ExitStatus::Completed { code: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkPolicy {
    /// Unrestricted egress (a warning is logged once per sandbox).
    #[default]
    Allow,
    /// Point standard proxy variables at a blackhole so well-behaved HTTP
    /// clients can only reach the metering proxy. Advisory, not enforced.
    ProxyOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    pub stream_cap: usize,
    #[serde(with = "crate::serde_secs")]
    pub grace: Duration,
    /// Variables passed through from the engine's own environment.
    pub env_allowlist: Vec<String>,
    pub network: NetworkPolicy,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            stream_cap: DEFAULT_STREAM_CAP,
            grace: DEFAULT_GRACE,
            env_allowlist: ["PATH", "HOME", "LANG", "LC_ALL", "TZ", "TMPDIR"]
                .map(String::from)
                .to_vec(),
            network: NetworkPolicy::Allow,
        }
    }
}

/// Anything that can run an [`ExecutionRequest`].
pub trait Executor: Send + Sync {
    fn execute(&self, request: &ExecutionRequest) -> ExecutionRecord;
}

#[derive(Debug, Clone, Default)]
pub struct Sandbox {
    pub config: SandboxConfig,
}

type FileStamp = (u64, Option<SystemTime>);

fn snapshot(root: &Path) -> HashMap<PathBuf, FileStamp> {
    let mut out = HashMap::new();
    walk(root, root, &mut |rel, meta| {
        out.insert(rel.to_path_buf(), (meta.len(), meta.modified().ok()));
    });
    out
}

fn walk(root: &Path, dir: &Path, f: &mut dyn FnMut(&Path, &fs::Metadata)) {
    let Ok(entries) = fs::read_dir(dir) else {
        return;
    };
    for entry in entries.flatten() {
        let path = entry.path();
        let Ok(meta) = fs::symlink_metadata(&path) else {
            continue;
        };
        if meta.is_dir() {
            walk(root, &path, f);
        } else if meta.is_file() {
            if let Ok(rel) = path.strip_prefix(root) {
                f(rel, &meta);
            }
        }
    }
}

fn is_log_file(rel: &Path) -> bool {
    rel.extension().is_some_and(|e| e == "log") || rel.starts_with("logs")
}

/// Stream reader that keeps the first `cap` bytes and drains the rest.
struct Capture {
    buf: Arc<Mutex<(Vec<u8>, bool)>>,
    done: std::sync::mpsc::Receiver<()>,
}

impl Capture {
    fn spawn(mut source: impl Read + Send + 'static, cap: usize) -> Capture {
        let buf = Arc::new(Mutex::new((Vec::new(), false)));
        let (tx, done) = std::sync::mpsc::channel();
        let shared = buf.clone();
        thread::spawn(move || {
            let mut chunk = [0u8; 64 * 1024];
            loop {
                match source.read(&mut chunk) {
                    Ok(0) => break,
                    Ok(n) => {
                        let mut b = shared.lock().unwrap();
                        let room = cap.saturating_sub(b.0.len());
                        b.0.extend_from_slice(&chunk[..n.min(room)]);
                        if n > room {
                            b.1 = true;
                        }
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                    Err(_) => break,
                }
            }
            let _ = tx.send(());
        });
        Capture { buf, done }
    }

    /// Wait up to `timeout` for EOF, then take whatever was captured.
    fn finish(self, timeout: Duration) -> (Vec<u8>, bool) {
        let eof = self.done.recv_timeout(timeout).is_ok();
        let mut b = self.buf.lock().unwrap();
        let truncated = b.1 || !eof;
        (std::mem::take(&mut b.0), truncated)
    }
}

fn signal_group(pgid: i32, sig: libc::c_int) {
    // SAFETY: plain syscall; a stale group id just yields ESRCH.
    unsafe {
        libc::killpg(pgid, sig);
    }
}

/// Live (non-zombie) processes whose process group is `pgid`, from `/proc`.
pub fn live_group_members(pgid: i32) -> Vec<i32> {
    let mut out = Vec::new();
    let Ok(entries) = fs::read_dir("/proc") else {
        return out;
    };
    for entry in entries.flatten() {
        let Some(pid) = entry.file_name().to_str().and_then(|s| s.parse::<i32>().ok()) else {
            continue;
        };
        let Ok(stat) = fs::read_to_string(entry.path().join("stat")) else {
            continue;
        };
        // fields after the parenthesised command name: state ppid pgrp ...
        let Some(rest) = stat.rfind(')').map(|i| &stat[i + 1..]) else {
            continue;
        };
        let fields: Vec<&str> = rest.split_whitespace().collect();
        if fields.len() > 2 && fields[2].parse::<i32>() == Ok(pgid) && fields[0] != "Z" && fields[0] != "X" {
            out.push(pid);
        }
    }
    out
}

impl Sandbox {
    pub fn new(config: SandboxConfig) -> Self {
        if config.network == NetworkPolicy::Allow {
            warn!("sandbox network policy is `allow`: experiment code may reach the network directly");
        }
        Sandbox { config }
    }

    fn command(&self, req: &ExecutionRequest) -> Command {
        let mut cmd = Command::new(&req.entry_command[0]);
        cmd.args(&req.entry_command[1..])
            .current_dir(&req.workdir)
            .env_clear()
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0);
        for key in &self.config.env_allowlist {
            if let Ok(v) = std::env::var(key) {
                cmd.env(key, v);
            }
        }
        if self.config.network == NetworkPolicy::ProxyOnly {
            for key in ["HTTP_PROXY", "HTTPS_PROXY", "http_proxy", "https_proxy"] {
                cmd.env(key, "http://0.0.0.0:9");
            }
            let no_proxy = req
                .env
                .get(crate::gateway::proxy::ENV_PROXY_URL)
                .and_then(|u| u.split("://").nth(1))
                .and_then(|h| h.split(['/', ':']).next())
                .unwrap_or("127.0.0.1")
                .to_string();
            cmd.env("NO_PROXY", &no_proxy).env("no_proxy", &no_proxy);
        }
        cmd.envs(&req.env);
        cmd
    }
}

impl Executor for Sandbox {
    fn execute(&self, req: &ExecutionRequest) -> ExecutionRecord {
        if req.entry_command.is_empty() {
            return ExecutionRecord::launch_failed(&req.workdir, "empty entry command".into());
        }
        if !req.workdir.is_dir() {
            return ExecutionRecord::launch_failed(
                &req.workdir,
                format!("workdir {} does not exist", req.workdir.display()),
            );
        }
        let before = snapshot(&req.workdir);
        let start = Instant::now();
        let mut child = match self.command(req).spawn() {
            Ok(c) => c,
            Err(e) => {
                return ExecutionRecord::launch_failed(
                    &req.workdir,
                    format!("failed to launch `{}`: {e}", req.entry_command[0]),
                )
            }
        };
        let pgid = child.id() as i32;
        let cap = self.config.stream_cap;
        let out = Capture::spawn(child.stdout.take().expect("piped"), cap);
        let err = Capture::spawn(child.stderr.take().expect("piped"), cap);

        let deadline = start + req.time_limit;
        let mut timed_out = false;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break Some(status),
                Ok(None) => {}
                Err(e) => {
                    warn!(error = %e, "waiting on experiment process failed");
                    break None;
                }
            }
            if Instant::now() >= deadline {
                timed_out = true;
                signal_group(pgid, libc::SIGTERM);
                let term_deadline = Instant::now() + self.config.grace / 2;
                let mut exited = None;
                while Instant::now() < term_deadline {
                    if let Ok(Some(s)) = child.try_wait() {
                        exited = Some(s);
                        break;
                    }
                    thread::sleep(POLL);
                }
                signal_group(pgid, libc::SIGKILL);
                break exited.or_else(|| child.wait().ok());
            }
            thread::sleep(POLL);
        };
        // stragglers in the group (background children) go too
        signal_group(pgid, libc::SIGKILL);
        let reap_deadline = Instant::now() + self.config.grace / 2;
        while !live_group_members(pgid).is_empty() && Instant::now() < reap_deadline {
            thread::sleep(POLL);
        }
        let drain = self.config.grace / 4;
        let (stdout, stdout_truncated) = out.finish(drain);
        let (stderr, stderr_truncated) = err.finish(drain);
        let duration = start.elapsed();

        let exit_status = if timed_out {
            ExitStatus::TimedOut
        } else {
            match status {
                Some(s) => ExitStatus::Completed {
                    code: s.code().unwrap_or_else(|| 128 + s.signal().unwrap_or(0)),
                },
                None => ExitStatus::Completed { code: -1 },
            }
        };

        let after = snapshot(&req.workdir);
        let mut artifacts: Vec<PathBuf> = after
            .iter()
            .filter(|(p, stamp)| before.get(*p) != Some(stamp) || p.starts_with(DROP_DIR))
            .map(|(p, _)| p.clone())
            .collect();
        artifacts.sort();
        let log_files = artifacts
            .iter()
            .filter(|p| is_log_file(p))
            .filter_map(|p| {
                let mut bytes = fs::read(req.workdir.join(p)).ok()?;
                let truncated = bytes.len() > cap;
                bytes.truncate(cap);
                Some(LogFile {
                    path: p.clone(),
                    bytes,
                    truncated,
                })
            })
            .collect();

        ExecutionRecord {
            exit_status,
            stdout,
            stderr,
            stdout_truncated,
            stderr_truncated,
            log_files,
            duration,
            artifacts,
            workdir: req.workdir.clone(),
            process_group: Some(pgid),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchivedArtifact {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ArtifactSet {
    pub entries: Vec<ArchivedArtifact>,
    pub warnings: Vec<String>,
}

/// Copy the record's artifacts into `destination`, keeping relative paths.
/// Per-file failures become warnings.
pub fn collect_artifacts(record: &ExecutionRecord, destination: &Path) -> ArtifactSet {
    let mut set = ArtifactSet::default();
    for rel in &record.artifacts {
        let src = record.workdir.join(rel);
        let dst = destination.join(rel);
        let result = fs::read(&src).and_then(|bytes| {
            if let Some(parent) = dst.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&dst, &bytes)?;
            Ok(bytes)
        });
        match result {
            Ok(bytes) => set.entries.push(ArchivedArtifact {
                path: rel.clone(),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            }),
            Err(e) => set.warnings.push(format!("{}: {e}", rel.display())),
        }
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(dir: &Path, script: &str, limit: Duration) -> ExecutionRequest {
        fs::write(dir.join("main.sh"), script).unwrap();
        ExecutionRequest {
            run_id: "r".into(),
            iteration_index: 1,
            workdir: dir.to_path_buf(),
            entry_command: vec!["sh".into(), "main.sh".into()],
            env: BTreeMap::new(),
            time_limit: limit,
        }
    }

    #[test]
    fn captures_stdout_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Sandbox::default().execute(&request(dir.path(), "echo 'RESULT 42'\n", Duration::from_secs(10)));
        assert_eq!(rec.exit_status, ExitStatus::Completed { code: 0 });
        assert_eq!(rec.stdout, b"RESULT 42\n");
        assert!(rec.artifacts.is_empty());
    }

    #[test]
    fn nonzero_exit_and_stderr() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Sandbox::default().execute(&request(dir.path(), "echo oops >&2; exit 3\n", Duration::from_secs(10)));
        assert_eq!(rec.exit_status, ExitStatus::Completed { code: 3 });
        assert_eq!(rec.stderr, b"oops\n");
    }

    #[test]
    fn missing_interpreter_is_launch_failure() {
        let dir = tempfile::tempdir().unwrap();
        let mut req = request(dir.path(), "", Duration::from_secs(1));
        req.entry_command = vec!["/nonexistent/interpreter".into()];
        let rec = Sandbox::default().execute(&req);
        assert!(matches!(rec.exit_status, ExitStatus::LaunchFailed { .. }));
    }

    #[test]
    fn artifacts_and_logs_enumerated() {
        let dir = tempfile::tempdir().unwrap();
        let script = "echo '{}' > results.json; mkdir -p to_copy logs; echo pdf > to_copy/plot.pdf; echo hi > logs/run.txt; echo l > x.log\n";
        let rec = Sandbox::default().execute(&request(dir.path(), script, Duration::from_secs(10)));
        let names: Vec<_> = rec.artifacts.iter().map(|p| p.to_str().unwrap().to_string()).collect();
        assert_eq!(names, ["logs/run.txt", "results.json", "to_copy/plot.pdf", "x.log"]);
        let logs: Vec<_> = rec.log_files.iter().map(|l| l.path.to_str().unwrap()).collect();
        assert_eq!(logs, ["logs/run.txt", "x.log"]);
        assert_eq!(rec.log_files[1].bytes, b"l\n");

        let dest = tempfile::tempdir().unwrap();
        let set = collect_artifacts(&rec, dest.path());
        assert_eq!(set.entries.len(), 4);
        assert!(set.warnings.is_empty());
        assert_eq!(fs::read(dest.path().join("to_copy/plot.pdf")).unwrap(), b"pdf\n");
        assert_eq!(set.entries[1].sha256, sha256_hex(b"{}\n"));
    }

    #[test]
    fn missing_artifact_becomes_warning() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Sandbox::default().execute(&request(dir.path(), "echo a > a.txt; echo b > b.txt\n", Duration::from_secs(10)));
        fs::remove_file(dir.path().join("a.txt")).unwrap();
        let dest = tempfile::tempdir().unwrap();
        let set = collect_artifacts(&rec, dest.path());
        assert_eq!(set.entries.len(), 1);
        assert_eq!(set.warnings.len(), 1);
        assert!(set.warnings[0].starts_with("a.txt"));
    }

    #[test]
    fn zero_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Sandbox::default().execute(&request(dir.path(), "true\n", Duration::from_secs(10)));
        let dest = tempfile::tempdir().unwrap();
        assert_eq!(collect_artifacts(&rec, dest.path()), ArtifactSet::default());
    }

    #[test]
    fn environment_is_scrubbed() {
        std::env::set_var("AUTOLAB_SECRET_FOR_TEST", "leak");
        let dir = tempfile::tempdir().unwrap();
        let mut req = request(dir.path(), "echo \"[$AUTOLAB_SECRET_FOR_TEST][$GIVEN]\"\n", Duration::from_secs(10));
        req.env.insert("GIVEN".into(), "yes".into());
        let rec = Sandbox::default().execute(&req);
        assert_eq!(rec.stdout, b"[][yes]\n");
    }

    #[test]
    fn stream_cap_sets_truncation_flag() {
        let dir = tempfile::tempdir().unwrap();
        let sandbox = Sandbox::new(SandboxConfig {
            stream_cap: 10,
            ..Default::default()
        });
        let rec = sandbox.execute(&request(dir.path(), "printf '0123456789abcdef'\n", Duration::from_secs(10)));
        assert_eq!(rec.stdout, b"0123456789");
        assert!(rec.stdout_truncated);
    }
}
