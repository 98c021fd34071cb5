//! Per-invocation bookkeeping: file I/O with digests, captured warnings and
//! the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use anyhow::Context as _;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub enum CliError {
    Usage(String),
    Domain(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Domain(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

static WARNINGS: OnceLock<Mutex<Vec<String>>> = OnceLock::new();

fn warnings() -> &'static Mutex<Vec<String>> {
    WARNINGS.get_or_init(|| Mutex::new(Vec::new()))
}

/// Forwards to `env_logger` and keeps every warning for the manifest.
struct Capture {
    inner: env_logger::Logger,
}

impl log::Log for Capture {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= log::Level::Warn || self.inner.enabled(metadata)
    }

    fn log(&self, record: &log::Record) {
        if record.level() <= log::Level::Warn {
            warnings()
                .lock()
                .expect("warnings lock")
                .push(record.args().to_string());
        }
        if self.inner.enabled(record.metadata()) {
            self.inner.log(record);
        }
    }

    fn flush(&self) {
        self.inner.flush();
    }
}

pub fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let inner = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default))
        .format_timestamp(None)
        .build();
    let level = inner.filter().max(log::LevelFilter::Warn);
    if log::set_boxed_logger(Box::new(Capture { inner })).is_ok() {
        log::set_max_level(level);
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    tool_version: &'a str,
    seed: u64,
    config: &'a serde_json::Value,
    inputs: Vec<&'a FileDigest>,
    outputs: Vec<&'a FileDigest>,
    started_at: String,
    finished_at: String,
    duration_ms: u128,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    warnings: Vec<String>,
}

pub struct Run {
    command: &'static str,
    out_dir: PathBuf,
    inputs: BTreeMap<String, FileDigest>,
    outputs: BTreeMap<String, FileDigest>,
    started: time::OffsetDateTime,
    clock: Instant,
}

fn display(path: &Path) -> String {
    path.to_string_lossy().replace('\\', "/")
}

fn now() -> time::OffsetDateTime {
    time::OffsetDateTime::now_utc()
}

fn rfc3339(t: time::OffsetDateTime) -> String {
    t.format(&time::format_description::well_known::Rfc3339)
        .unwrap_or_else(|_| t.unix_timestamp().to_string())
}

impl Run {
    pub fn new(command: &'static str, out_dir: &Path) -> Self {
        Self {
            command,
            out_dir: out_dir.to_path_buf(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started: now(),
            clock: Instant::now(),
        }
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Records a file the command consumed.
    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
        self.record_input(path, &bytes);
        Ok(())
    }

    fn record_input(&mut self, path: &Path, bytes: &[u8]) {
        let key = display(path);
        self.inputs.insert(
            key.clone(),
            FileDigest {
                path: key,
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            },
        );
    }

    /// Records a directory by a digest over its files' relative paths and contents.
    pub fn input_dir(&mut self, dir: &Path) -> anyhow::Result<()> {
        if !dir.is_dir() {
            return Ok(());
        }
        let mut entries: Vec<(String, String)> = Vec::new();
        let mut total = 0u64;
        for entry in walkdir::WalkDir::new(dir).min_depth(1).sort_by_file_name() {
            let entry = entry.with_context(|| format!("cannot list {}", dir.display()))?;
            if entry.file_type().is_file() {
                let bytes = std::fs::read(entry.path())?;
                total += bytes.len() as u64;
                let rel = entry.path().strip_prefix(dir).unwrap_or(entry.path());
                entries.push((display(rel), sha256_hex(&bytes)));
            }
        }
        let mut h = Sha256::new();
        for (p, d) in &entries {
            h.update(p.as_bytes());
            h.update([0]);
            h.update(d.as_bytes());
            h.update(*b"\n");
        }
        let key = format!("{}/", display(dir).trim_end_matches('/'));
        self.inputs.insert(
            key.clone(),
            FileDigest {
                path: key,
                sha256: hex::encode(h.finalize()),
                bytes: total,
            },
        );
        Ok(())
    }

    pub fn read(&mut self, path: &Path) -> anyhow::Result<String> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        self.record_input(path, text.as_bytes());
        Ok(text)
    }

    pub fn read_json<T: serde::de::DeserializeOwned>(&mut self, path: &Path) -> anyhow::Result<T> {
        let text = self.read(path)?;
        serde_json::from_str(&text).with_context(|| format!("{} is not a valid artifact", path.display()))
    }

    pub fn read_jsonl<T: serde::de::DeserializeOwned>(&mut self, path: &Path) -> anyhow::Result<Vec<T>> {
        let text = self.read(path)?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).with_context(|| format!("{}:{}: invalid record", path.display(), i + 1))
            })
            .collect()
    }

    /// Writes atomically and records the output's digest.
    pub fn write(&mut self, path: &Path, contents: &str) -> anyhow::Result<()> {
        let parent = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        std::fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
        let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
        std::io::Write::write_all(&mut tmp, contents.as_bytes())?;
        tmp.persist(path)
            .with_context(|| format!("cannot write {}", path.display()))?;
        let key = display(path);
        self.outputs.insert(
            key.clone(),
            FileDigest {
                path: key,
                sha256: sha256_hex(contents.as_bytes()),
                bytes: contents.len() as u64,
            },
        );
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, path: &Path, value: &T) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(path, &text)
    }

    pub fn write_jsonl<T: Serialize>(&mut self, path: &Path, items: &[T]) -> anyhow::Result<()> {
        let mut text = String::new();
        for item in items {
            text.push_str(&serde_json::to_string(item)?);
            text.push('\n');
        }
        self.write(path, &text)
    }

    /// Writes the manifest; called on success and on domain errors alike.
    pub fn finish(
        self,
        manifest_path: &Path,
        seed: u64,
        config: &serde_json::Value,
        error: Option<String>,
    ) -> anyhow::Result<()> {
        let captured = std::mem::take(&mut *warnings().lock().expect("warnings lock"));
        let manifest = Manifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION"),
            seed,
            config,
            inputs: self.inputs.values().collect(),
            outputs: self.outputs.values().collect(),
            started_at: rfc3339(self.started),
            finished_at: rfc3339(now()),
            duration_ms: self.clock.elapsed().as_millis(),
            status: if error.is_some() { "error" } else { "ok" },
            error,
            warnings: captured,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let parent = manifest_path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        std::fs::create_dir_all(parent)?;
        std::fs::write(manifest_path, text).with_context(|| format!("cannot write {}", manifest_path.display()))
    }
}
