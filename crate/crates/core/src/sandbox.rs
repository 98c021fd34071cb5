//! Isolated execution of candidate solutions against test cases.
//!
//! [`ProcessSandbox`] writes the solution and its serialized tests into a
//! fresh temporary directory and runs a harness script there in a new
//! interpreter process with a scrubbed environment and a wall-clock limit.
//! The harness reports through a single stdout line prefixed with
//! [`SENTINEL`]. Isolation is process-level only: the threat model is
//! self-generated code that has already passed review stages, not a
//! hostile adversary, so no OS jail is attempted.
//!
//! [`RecordedVerdicts`] replays verdicts keyed by a digest of the job,
//! which keeps test runs independent of an interpreter.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingestion::TestCase;

pub const SENTINEL: &str = "##KUBENCH##";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);
pub const SOLUTION_FILE: &str = "solution.py";
pub const TESTS_FILE: &str = "tests.json";
/// The bundled test runner, used when no harness path is configured.
pub const EMBEDDED_HARNESS: &str = include_str!("../../../subject_harness/kubench_harness.py");

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("interpreter `{0}` not found")]
    InterpreterMissing(String),
    #[error("harness script {0} does not exist")]
    HarnessMissing(String),
    #[error("solution is empty")]
    EmptySolution,
    #[error("sandbox I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("no recorded verdict for job {key}")]
    NotRecorded { key: String },
    #[error("verdict file {path}: {reason}")]
    VerdictFile { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Pass,
    Fail,
    RuntimeError,
    Timeout,
    HarnessError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestResult {
    pub test_index: usize,
    pub status: VerdictStatus,
    #[serde(default)]
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionVerdict {
    pub status: VerdictStatus,
    pub per_test: Vec<TestResult>,
    pub duration_ms: u64,
    /// Load failure reported by the harness (syntax or import error).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fatal: Option<String>,
    /// Files left behind in the working directory besides the inputs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub workdir_writes: Vec<String>,
}

impl ExecutionVerdict {
    /// The solution loaded and ran to completion (tests may still fail).
    pub fn executable(&self) -> bool {
        self.fatal.is_none() && matches!(self.status, VerdictStatus::Pass | VerdictStatus::Fail)
    }

    pub fn passed(&self) -> bool {
        self.status == VerdictStatus::Pass
    }

    fn harness_error(message: impl Into<String>, duration_ms: u64) -> Self {
        Self {
            status: VerdictStatus::HarnessError,
            per_test: Vec::new(),
            duration_ms,
            fatal: Some(message.into()),
            workdir_writes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionJob {
    pub solution: String,
    pub test_cases: Vec<TestCase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_point: Option<String>,
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

impl ExecutionJob {
    pub fn new(solution: impl Into<String>, test_cases: Vec<TestCase>) -> Self {
        Self {
            solution: solution.into(),
            test_cases,
            entry_point: None,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_entry_point(mut self, entry_point: Option<String>) -> Self {
        self.entry_point = entry_point;
        self
    }

    /// Stable digest of solution and tests; the timeout is not part of it.
    pub fn key(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.solution.as_bytes());
        hasher.update([0u8]);
        hasher.update(serde_json::to_vec(&self.test_cases).expect("tests serialize"));
        hex::encode(hasher.finalize())
    }
}

pub trait Executor: Send + Sync {
    fn execute(&self, job: &ExecutionJob) -> Result<ExecutionVerdict, SandboxError>;

    /// Runs `jobs` with at most `parallelism` in flight; results are
    /// positionally aligned and fail independently.
    fn execute_many(&self, jobs: &[ExecutionJob], parallelism: usize) -> Vec<Result<ExecutionVerdict, SandboxError>> {
        let slots: Vec<Mutex<Option<Result<ExecutionVerdict, SandboxError>>>> =
            jobs.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = parallelism.max(1).min(jobs.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= jobs.len() {
                        break;
                    }
                    let result = self.execute(&jobs[i]);
                    *slots[i].lock().expect("slot lock") = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().expect("slot lock").expect("every job ran"))
            .collect()
    }
}

#[derive(Debug, Deserialize)]
struct HarnessResult {
    test_index: usize,
    status: String,
    #[serde(default)]
    message: String,
}

#[derive(Debug, Deserialize)]
struct HarnessReport {
    results: Vec<HarnessResult>,
    #[serde(default)]
    fatal: Option<String>,
}

/// Turns raw harness output into a verdict for `n_tests` test cases.
pub fn interpret_report(stdout: &str, exit_ok: bool, n_tests: usize, duration_ms: u64) -> ExecutionVerdict {
    let Some(line) = stdout.lines().find_map(|l| l.strip_prefix(SENTINEL)) else {
        let why = if exit_ok {
            "harness produced no report line".to_string()
        } else {
            "harness exited abnormally without a report line".to_string()
        };
        return ExecutionVerdict::harness_error(why, duration_ms);
    };
    let report: HarnessReport = match serde_json::from_str(line.trim()) {
        Ok(r) => r,
        Err(e) => return ExecutionVerdict::harness_error(format!("unparsable report: {e}"), duration_ms),
    };
    if let Some(fatal) = report.fatal {
        let per_test = (0..n_tests)
            .map(|i| TestResult {
                test_index: i,
                status: VerdictStatus::RuntimeError,
                message: "solution failed to load".into(),
            })
            .collect();
        return ExecutionVerdict {
            status: VerdictStatus::RuntimeError,
            per_test,
            duration_ms,
            fatal: Some(fatal),
            workdir_writes: Vec::new(),
        };
    }
    let mut per_test = Vec::with_capacity(n_tests);
    for (expected_index, r) in report.results.iter().enumerate() {
        if r.test_index != expected_index {
            return ExecutionVerdict::harness_error(
                format!("report out of order at entry {expected_index}"),
                duration_ms,
            );
        }
        let status = match r.status.as_str() {
            "pass" => VerdictStatus::Pass,
            "fail" => VerdictStatus::Fail,
            "error" => VerdictStatus::RuntimeError,
            other => return ExecutionVerdict::harness_error(format!("unknown test status `{other}`"), duration_ms),
        };
        per_test.push(TestResult {
            test_index: r.test_index,
            status,
            message: r.message.clone(),
        });
    }
    if per_test.len() > n_tests {
        return ExecutionVerdict::harness_error("report lists more results than tests", duration_ms);
    }
    for i in per_test.len()..n_tests {
        per_test.push(TestResult {
            test_index: i,
            status: VerdictStatus::RuntimeError,
            message: "not reached".into(),
        });
    }
    let status = if per_test.iter().all(|t| t.status == VerdictStatus::Pass) {
        VerdictStatus::Pass
    } else if per_test.iter().any(|t| t.status == VerdictStatus::RuntimeError) {
        VerdictStatus::RuntimeError
    } else {
        VerdictStatus::Fail
    };
    ExecutionVerdict {
        status,
        per_test,
        duration_ms,
        fatal: None,
        workdir_writes: Vec::new(),
    }
}

/// Runs each job in a fresh interpreter process.
#[derive(Debug, Clone)]
pub struct ProcessSandbox {
    interpreter: PathBuf,
    harness: PathBuf,
    /// Keeps the extracted copy of the embedded harness alive.
    _extracted: Option<std::sync::Arc<tempfile::TempDir>>,
}

impl ProcessSandbox {
    pub fn new(interpreter: impl Into<PathBuf>, harness: impl AsRef<Path>) -> Result<Self, SandboxError> {
        let harness = harness.as_ref();
        let harness = harness
            .canonicalize()
            .map_err(|_| SandboxError::HarnessMissing(harness.display().to_string()))?;
        Ok(Self {
            interpreter: interpreter.into(),
            harness,
            _extracted: None,
        })
    }

    /// Uses [`EMBEDDED_HARNESS`], extracted to a private temporary directory.
    pub fn with_embedded_harness(interpreter: impl Into<PathBuf>) -> Result<Self, SandboxError> {
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("kubench_harness.py");
        std::fs::write(&path, EMBEDDED_HARNESS)?;
        let mut sandbox = Self::new(interpreter, &path)?;
        sandbox._extracted = Some(std::sync::Arc::new(dir));
        Ok(sandbox)
    }

    fn audit(dir: &Path) -> Vec<String> {
        let mut found: Vec<String> = walkdir::WalkDir::new(dir)
            .min_depth(1)
            .into_iter()
            .filter_map(Result::ok)
            .filter(|e| e.file_type().is_file())
            .filter_map(|e| {
                e.path()
                    .strip_prefix(dir)
                    .ok()
                    .map(|p| p.to_string_lossy().replace('\\', "/"))
            })
            .filter(|p| p != SOLUTION_FILE && p != TESTS_FILE)
            .collect();
        found.sort();
        found
    }
}

fn drain<R: Read + Send + 'static>(mut source: R) -> std::thread::JoinHandle<String> {
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = source.read_to_end(&mut buf);
        String::from_utf8_lossy(&buf).into_owned()
    })
}

impl Executor for ProcessSandbox {
    fn execute(&self, job: &ExecutionJob) -> Result<ExecutionVerdict, SandboxError> {
        if job.solution.trim().is_empty() {
            return Err(SandboxError::EmptySolution);
        }
        let dir = tempfile::tempdir()?;
        std::fs::write(dir.path().join(SOLUTION_FILE), &job.solution)?;
        std::fs::write(
            dir.path().join(TESTS_FILE),
            serde_json::to_vec(&job.test_cases).expect("tests serialize"),
        )?;

        let mut cmd = Command::new(&self.interpreter);
        cmd.arg(&self.harness)
            .arg(SOLUTION_FILE)
            .arg(TESTS_FILE)
            .current_dir(dir.path())
            .env_clear()
            .env("HOME", dir.path())
            .env("TMPDIR", dir.path())
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("PYTHONHASHSEED", "0")
            .env("PYTHONIOENCODING", "utf-8")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        if let Some(path) = std::env::var_os("PATH") {
            cmd.env("PATH", path);
        }
        if let Some(entry) = &job.entry_point {
            cmd.arg(entry);
        }
        let started = Instant::now();
        let mut child = cmd.spawn().map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => SandboxError::InterpreterMissing(self.interpreter.display().to_string()),
            _ => SandboxError::Io(e),
        })?;
        let stdout = drain(child.stdout.take().expect("piped stdout"));
        let stderr = drain(child.stderr.take().expect("piped stderr"));

        let exit = loop {
            if let Some(status) = child.try_wait()? {
                break Some(status);
            }
            if started.elapsed() >= job.timeout {
                let _ = child.kill();
                let _ = child.wait();
                break None;
            }
            std::thread::sleep(Duration::from_millis(5));
        };
        let elapsed = started.elapsed().as_millis() as u64;
        let out = stdout.join().unwrap_or_default();
        let err = stderr.join().unwrap_or_default();
        let workdir_writes = Self::audit(dir.path());

        let mut verdict = match exit {
            None => {
                let limit = job.timeout.as_millis() as u64;
                ExecutionVerdict {
                    status: VerdictStatus::Timeout,
                    per_test: (0..job.test_cases.len())
                        .map(|i| TestResult {
                            test_index: i,
                            status: VerdictStatus::Timeout,
                            message: format!("wall-clock limit of {limit} ms exceeded"),
                        })
                        .collect(),
                    duration_ms: elapsed.max(limit),
                    fatal: None,
                    workdir_writes: Vec::new(),
                }
            }
            Some(status) => {
                let mut v = interpret_report(&out, status.success(), job.test_cases.len(), elapsed);
                if v.status == VerdictStatus::HarnessError && !err.trim().is_empty() {
                    let tail: String = err
                        .chars()
                        .rev()
                        .take(2000)
                        .collect::<Vec<_>>()
                        .into_iter()
                        .rev()
                        .collect();
                    v.fatal = Some(format!("{}; stderr: {}", v.fatal.unwrap_or_default(), tail.trim()));
                }
                v
            }
        };
        verdict.workdir_writes = workdir_writes;
        Ok(verdict)
    }
}

/// Verdicts replayed from a JSON map `{job_key: verdict}`.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct RecordedVerdicts {
    verdicts: BTreeMap<String, ExecutionVerdict>,
}

impl RecordedVerdicts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self, SandboxError> {
        let text = std::fs::read_to_string(path)?;
        let verdicts = serde_json::from_str(&text).map_err(|e| SandboxError::VerdictFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Ok(Self { verdicts })
    }

    pub fn insert(&mut self, job: &ExecutionJob, verdict: ExecutionVerdict) {
        self.verdicts.insert(job.key(), verdict);
    }

    /// Adds every verdict from `other`, replacing entries with equal keys.
    pub fn extend(&mut self, other: RecordedVerdicts) {
        self.verdicts.extend(other.verdicts);
    }

    pub fn len(&self) -> usize {
        self.verdicts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verdicts.is_empty()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.verdicts).expect("verdicts serialize");
        s.push('\n');
        s
    }
}

impl Executor for RecordedVerdicts {
    fn execute(&self, job: &ExecutionJob) -> Result<ExecutionVerdict, SandboxError> {
        let key = job.key();
        self.verdicts
            .get(&key)
            .cloned()
            .ok_or(SandboxError::NotRecorded { key })
    }
}

/// Wraps an executor and remembers every verdict it produced, so a live
/// run can be turned into a [`RecordedVerdicts`] file.
pub struct RecordingExecutor<E> {
    inner: E,
    seen: Mutex<RecordedVerdicts>,
}

impl<E: Executor> RecordingExecutor<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            seen: Mutex::new(RecordedVerdicts::new()),
        }
    }

    pub fn recorded(&self) -> RecordedVerdicts {
        self.seen.lock().expect("record lock").clone()
    }
}

impl<E: Executor> Executor for RecordingExecutor<E> {
    fn execute(&self, job: &ExecutionJob) -> Result<ExecutionVerdict, SandboxError> {
        let verdict = self.inner.execute(job)?;
        self.seen.lock().expect("record lock").insert(job, verdict.clone());
        Ok(verdict)
    }
}
