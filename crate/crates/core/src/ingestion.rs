//! Benchmark and corpus ingestion.
//!
//! Public benchmarks arrive as JSONL (HumanEval or MBPP layout) and are
//! mapped onto [`TaskRecord`]; the native format is a pretty-printed
//! [`BenchmarkSet`]. Project corpora are directory trees of `.py` files.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use globset::{Glob, GlobSet, GlobSetBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::catalog::KuId;
use crate::pysource;

pub const SUBJECT_EXTENSION: &str = "py";
pub const DEFAULT_MAX_CHARS: usize = 300_000;
pub const MIN_SYNTHESIZED_TESTS: usize = 5;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Record { path: String, line: usize, reason: String },
    #[error("{0}: no records")]
    Empty(String),
    #[error("unknown benchmark format `{0}` (expected humaneval-jsonl, mbpp-jsonl or native-json)")]
    UnknownFormat(String),
    #[error("duplicate task id `{0}`")]
    DuplicateTask(String),
    #[error("task `{task}`: {reason}")]
    Invalid { task: String, reason: String },
    #[error("invalid exclude glob `{glob}`: {reason}")]
    Glob { glob: String, reason: String },
}

/// One executable check attached to a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestCase {
    /// Passes iff `code` runs without raising.
    Assert { code: String },
    /// Passes iff evaluating `call` equals evaluating `expected`.
    Io {
        call: String,
        expected: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        float_tolerance: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Benchmark(String),
    Synthesized,
}

impl Provenance {
    pub fn is_synthesized(&self) -> bool {
        matches!(self, Provenance::Synthesized)
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Benchmark(name) => f.write_str(name),
            Provenance::Synthesized => f.write_str("synthesized"),
        }
    }
}

impl Serialize for Provenance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Provenance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(if s == "synthesized" {
            Provenance::Synthesized
        } else {
            Provenance::Benchmark(s)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub description: String,
    pub signature: String,
    pub canonical_solution: String,
    pub test_cases: Vec<TestCase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_point: Option<String>,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_ku: Option<KuId>,
}

impl TaskRecord {
    /// The canonical solution as a standalone program. HumanEval-style
    /// solutions hold only a function body and are prefixed with the
    /// signature.
    pub fn runnable_solution(&self) -> String {
        match &self.entry_point {
            Some(ep) if !pysource::defined_functions(&self.canonical_solution).contains(ep) => {
                let mut s = self.signature.clone();
                if !s.ends_with('\n') {
                    s.push('\n');
                }
                s.push_str(&self.canonical_solution);
                s
            }
            _ => self.canonical_solution.clone(),
        }
    }

    /// The text shown to a model under evaluation.
    pub fn prompt_text(&self) -> String {
        if self.signature.contains(self.description.trim()) {
            self.signature.clone()
        } else {
            format!(
                "{}\n\nFunction signature:\n{}\n",
                self.description.trim(),
                self.signature.trim()
            )
        }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let invalid = |reason: &str| IngestError::Invalid {
            task: self.task_id.clone(),
            reason: reason.to_string(),
        };
        if self.task_id.trim().is_empty() {
            return Err(invalid("empty task id"));
        }
        if self.provenance.is_synthesized() {
            if self.target_ku.is_none() {
                return Err(invalid("synthesized task without target_ku"));
            }
            if self.test_cases.len() < MIN_SYNTHESIZED_TESTS {
                return Err(invalid("synthesized task needs at least five test cases"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSet {
    pub name: String,
    pub tasks: Vec<TaskRecord>,
}

impl BenchmarkSet {
    pub fn new(name: impl Into<String>, tasks: Vec<TaskRecord>) -> Result<Self, IngestError> {
        let name = name.into();
        if tasks.is_empty() {
            return Err(IngestError::Empty(name));
        }
        let mut seen = HashSet::new();
        for t in &tasks {
            t.validate()?;
            if !seen.insert(t.task_id.as_str()) {
                return Err(IngestError::DuplicateTask(t.task_id.clone()));
            }
        }
        Ok(Self { name, tasks })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("benchmark serializes");
        s.push('\n');
        s
    }

    /// Union of `self` and `extra`, keeping order. Task-id collisions are
    /// errors; nothing is silently dropped.
    pub fn augment(&self, name: impl Into<String>, extra: &[TaskRecord]) -> Result<Self, IngestError> {
        let mut tasks = self.tasks.clone();
        tasks.extend_from_slice(extra);
        Self::new(name, tasks)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchmarkFormat {
    HumanevalJsonl,
    MbppJsonl,
    NativeJson,
}

impl FromStr for BenchmarkFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "humaneval-jsonl" => Ok(Self::HumanevalJsonl),
            "mbpp-jsonl" => Ok(Self::MbppJsonl),
            "native-json" => Ok(Self::NativeJson),
            other => Err(IngestError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Deserialize)]
struct HumanEvalRow {
    task_id: String,
    prompt: String,
    canonical_solution: String,
    test: String,
    entry_point: String,
}

#[derive(Deserialize)]
struct MbppRow {
    task_id: serde_json::Value,
    text: String,
    code: String,
    test_list: Vec<String>,
    #[serde(default)]
    test_setup_code: String,
}

fn read(path: &Path) -> Result<String, IngestError> {
    std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn default_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "benchmark".into())
}

pub fn load_benchmark(path: &Path, format: BenchmarkFormat) -> Result<BenchmarkSet, IngestError> {
    let text = read(path)?;
    let shown = path.display().to_string();
    match format {
        BenchmarkFormat::NativeJson => {
            if text.trim().is_empty() {
                return Err(IngestError::Empty(shown));
            }
            let set: BenchmarkSet = serde_json::from_str(&text).map_err(|e| IngestError::Record {
                path: shown.clone(),
                line: e.line(),
                reason: e.to_string(),
            })?;
            BenchmarkSet::new(set.name, set.tasks)
        }
        BenchmarkFormat::HumanevalJsonl | BenchmarkFormat::MbppJsonl => {
            let name = default_name(path);
            let mut tasks = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let record_err = |reason: String| IngestError::Record {
                    path: shown.clone(),
                    line: i + 1,
                    reason,
                };
                let task = if format == BenchmarkFormat::HumanevalJsonl {
                    let row: HumanEvalRow = serde_json::from_str(line).map_err(|e| record_err(e.to_string()))?;
                    humaneval_task(row, &name)
                } else {
                    let row: MbppRow = serde_json::from_str(line).map_err(|e| record_err(e.to_string()))?;
                    mbpp_task(row, &name)
                };
                tasks.push(task);
            }
            if tasks.is_empty() {
                return Err(IngestError::Empty(shown));
            }
            BenchmarkSet::new(name, tasks)
        }
    }
}

fn humaneval_task(row: HumanEvalRow, bench: &str) -> TaskRecord {
    let description = pysource::first_docstring(&row.prompt).unwrap_or_else(|| row.prompt.clone());
    let check = format!("{}\n\ncheck({})\n", row.test.trim_end(), row.entry_point);
    TaskRecord {
        task_id: row.task_id,
        description,
        signature: row.prompt,
        canonical_solution: row.canonical_solution,
        test_cases: vec![TestCase::Assert { code: check }],
        entry_point: Some(row.entry_point),
        provenance: Provenance::Benchmark(bench.to_string()),
        target_ku: None,
    }
}

fn mbpp_task(row: MbppRow, bench: &str) -> TaskRecord {
    let task_id = match row.task_id {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    };
    let signature = pysource::first_def_line(&row.code).unwrap_or("").trim_end().to_string();
    let entry_point = pysource::defined_functions(&signature).into_iter().next();
    let setup = row.test_setup_code.trim();
    let test_cases = row
        .test_list
        .into_iter()
        .map(|t| TestCase::Assert {
            code: if setup.is_empty() { t } else { format!("{setup}\n{t}") },
        })
        .collect();
    TaskRecord {
        task_id,
        description: row.text,
        signature,
        canonical_solution: row.code,
        test_cases,
        entry_point,
        provenance: Provenance::Benchmark(bench.to_string()),
        target_ku: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectCategory {
    Organizational,
    Utility,
}

impl FromStr for ProjectCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "organizational" => Ok(Self::Organizational),
            "utility" => Ok(Self::Utility),
            other => Err(format!("unknown project category `{other}`")),
        }
    }
}

impl fmt::Display for ProjectCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Organizational => "organizational",
            Self::Utility => "utility",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFileRecord {
    pub project: String,
    pub category: ProjectCategory,
    pub path: String,
    pub content: String,
}

impl SourceFileRecord {
    pub fn artifact_id(&self) -> String {
        format!("{}/{}", self.project, self.path)
    }
}

#[derive(Debug, Clone)]
pub struct ScanOptions {
    pub exclude_globs: Vec<String>,
    pub max_chars: usize,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            exclude_globs: Vec::new(),
            max_chars: DEFAULT_MAX_CHARS,
        }
    }
}

fn build_globs(globs: &[String]) -> Result<GlobSet, IngestError> {
    let mut builder = GlobSetBuilder::new();
    for g in globs {
        let glob = Glob::new(g).map_err(|e| IngestError::Glob {
            glob: g.clone(),
            reason: e.to_string(),
        })?;
        builder.add(glob);
    }
    builder.build().map_err(|e| IngestError::Glob {
        glob: globs.join(","),
        reason: e.to_string(),
    })
}

/// Collects every `.py` file under `root` except `__init__.py`, strips
/// comments and docstrings and returns the records sorted by path. Test
/// files are kept.
pub fn scan_project(
    root: &Path,
    project: &str,
    category: ProjectCategory,
    options: &ScanOptions,
) -> Result<Vec<SourceFileRecord>, IngestError> {
    let io_err = |path: &Path, source: std::io::Error| IngestError::Io {
        path: path.display().to_string(),
        source,
    };
    let meta = std::fs::metadata(root).map_err(|e| io_err(root, e))?;
    if !meta.is_dir() {
        return Err(io_err(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let excludes = build_globs(&options.exclude_globs)?;
    let mut paths: Vec<(String, PathBuf)> = Vec::new();
    for entry in WalkDir::new(root).follow_links(false) {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            io_err(&path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let p = entry.path();
        if p.extension().and_then(|e| e.to_str()) != Some(SUBJECT_EXTENSION) {
            continue;
        }
        if p.file_name().and_then(|n| n.to_str()) == Some("__init__.py") {
            continue;
        }
        let rel = p
            .strip_prefix(root)
            .expect("walkdir yields children of root")
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        if excludes.is_match(&rel) {
            continue;
        }
        paths.push((rel, p.to_path_buf()));
    }
    paths.sort();

    let mut records = Vec::with_capacity(paths.len());
    for (rel, full) in paths {
        let bytes = std::fs::read(&full).map_err(|e| io_err(&full, e))?;
        let raw = String::from_utf8_lossy(&bytes);
        let mut content = pysource::strip_comments(&raw);
        if content.chars().count() > options.max_chars {
            log::warn!(
                "{project}/{rel}: {} chars exceeds budget {}, truncating",
                content.chars().count(),
                options.max_chars
            );
            content = content.chars().take(options.max_chars).collect();
        }
        records.push(SourceFileRecord {
            project: project.to_string(),
            category,
            path: rel,
            content,
        });
    }
    Ok(records)
}
