//! KU-targeted task synthesis with a four-stage validation cascade.
//!
//! For each target KU the project files richest in that KU serve, one at a
//! time, as grounding context for a generation prompt. A candidate task is
//! accepted only if a judge model says it exercises the KU, the detector
//! finds the KU in its solution, the solution runs, and all of its test
//! cases pass. Each context gets a bounded number of attempts; the
//! convergence loop keeps adding batches until the augmented benchmark's
//! coverage is close enough to the reference distribution.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::catalog::{Catalog, KnowledgeUnit, KuId};
use crate::detector::{first_object, strip_fences, DetectError, Detector, DetectorConfig, KuVector};
use crate::gateway::{ChatRequest, Gateway, GatewayError, Message};
use crate::ingestion::{
    BenchmarkSet, IngestError, Provenance, SourceFileRecord, TaskRecord, TestCase, MIN_SYNTHESIZED_TESTS,
};
use crate::metrics::{coverage, js_distance, CoverageDistribution, MetricsError};
use crate::sandbox::{ExecutionJob, Executor, SandboxError, DEFAULT_TIMEOUT};
use crate::stats::{signed_rank_test, StatsError};

/// Share of the reference coverage below which a KU counts as under-represented.
pub const GAP_RATIO: f64 = 0.25;
/// Token-set similarity above which two descriptions are flagged.
pub const NEAR_DUPLICATE_THRESHOLD: f64 = 0.9;

static FORMAT_EXAMPLES: &str = include_str!("../data/format_examples.json");

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no context file has at least {min} instances of {ku}")]
    NoContext { ku: KuId, min: u64 },
    #[error("context `{0}` is empty")]
    EmptyContext(String),
    #[error("no target KUs given")]
    NoTargets,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Catalog(#[from] crate::catalog::CatalogError),
}

/// Exit criterion of the convergence loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convergence {
    /// Paired signed-rank test between merged and reference coverage is
    /// not significant.
    SignedRank,
    /// Jensen–Shannon distance at or below the epsilon.
    JsdThreshold,
    /// Whichever holds first.
    #[default]
    Either,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub target_kus: Vec<KuId>,
    pub batch_n: usize,
    pub max_retries_per_context: usize,
    pub min_ku_instances: u64,
    pub generation_temperature: f64,
    pub judge_temperature: f64,
    pub convergence: Convergence,
    pub jsd_epsilon: f64,
    pub alpha: f64,
    pub max_iterations: usize,
    pub generator_model: String,
    pub judge_model: String,
    /// Characters of context included in a prompt.
    pub context_budget: usize,
    pub timeout_secs: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            target_kus: Vec::new(),
            batch_n: 5,
            max_retries_per_context: 5,
            min_ku_instances: 2,
            generation_temperature: 0.5,
            judge_temperature: 0.0,
            convergence: Convergence::Either,
            jsd_epsilon: 0.15,
            alpha: 0.05,
            max_iterations: 10,
            generator_model: "gpt-4o-mini".into(),
            judge_model: "gpt-4o".into(),
            context_budget: 12_000,
            timeout_secs: DEFAULT_TIMEOUT.as_secs_f64(),
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.batch_n == 0 {
            return Err(SynthError::Config("batch_n must be at least 1".into()));
        }
        if self.max_retries_per_context == 0 {
            return Err(SynthError::Config("max_retries_per_context must be at least 1".into()));
        }
        if !(self.jsd_epsilon > 0.0 && self.jsd_epsilon < 1.0) {
            return Err(SynthError::Config(format!(
                "jsd_epsilon {} outside (0, 1)",
                self.jsd_epsilon
            )));
        }
        if self.min_ku_instances == 0 {
            return Err(SynthError::Config("min_ku_instances must be at least 1".into()));
        }
        Ok(())
    }
}

/// A corpus file together with its detected KU vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextFile {
    pub record: SourceFileRecord,
    pub vector: KuVector,
}

impl ContextFile {
    pub fn id(&self) -> String {
        self.record.artifact_id()
    }
}

/// Files with at least `min_instances` of the KU at `ku_index`, by count
/// descending then path ascending.
pub fn rank_contexts(
    files: &[ContextFile],
    ku: KuId,
    ku_index: usize,
    min_instances: u64,
) -> Result<Vec<&ContextFile>, SynthError> {
    let mut ranked: Vec<&ContextFile> = files
        .iter()
        .filter(|f| f.vector.counts.get(ku_index).copied().unwrap_or(0) >= min_instances)
        .collect();
    if ranked.is_empty() {
        return Err(SynthError::NoContext { ku, min: min_instances });
    }
    ranked.sort_by(|a, b| {
        b.vector.counts[ku_index]
            .cmp(&a.vector.counts[ku_index])
            .then_with(|| a.record.artifact_id().cmp(&b.record.artifact_id()))
    });
    Ok(ranked)
}

/// Cuts `content` to at most `budget` characters, preferring to end at a
/// top-level `def`/`class`/decorator boundary. Returns whether it cut.
pub fn truncate_context(content: &str, budget: usize) -> (String, bool) {
    if content.chars().count() <= budget {
        return (content.to_string(), false);
    }
    // Split into top-level blocks.
    let mut blocks: Vec<String> = Vec::new();
    let mut current = String::new();
    let mut prev_decorator = false;
    for line in content.split_inclusive('\n') {
        let starts_block = line.starts_with("def ")
            || line.starts_with("async def ")
            || line.starts_with("class ")
            || line.starts_with('@');
        if starts_block && !prev_decorator && !current.is_empty() {
            blocks.push(std::mem::take(&mut current));
        }
        prev_decorator = line.starts_with('@');
        current.push_str(line);
    }
    if !current.is_empty() {
        blocks.push(current);
    }
    let mut out = String::new();
    let mut used = 0;
    for block in &blocks {
        let len = block.chars().count();
        if used + len > budget {
            break;
        }
        out.push_str(block);
        used += len;
    }
    if out.is_empty() {
        // A single oversized block: fall back to whole lines.
        for line in content.split_inclusive('\n') {
            let len = line.chars().count();
            if used + len > budget {
                break;
            }
            out.push_str(line);
            used += len;
        }
    }
    (out, true)
}

/// The JSON object a generation call must return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTask {
    pub task_name: String,
    pub signature: String,
    pub description: String,
    #[serde(deserialize_with = "string_or_list")]
    pub objective: Vec<String>,
    pub solution: String,
    pub test_cases: Vec<GeneratedTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTest {
    pub call: String,
    #[serde(deserialize_with = "python_expression")]
    pub expected: String,
}

fn string_or_list<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    match Value::deserialize(d)? {
        Value::String(s) => Ok(s
            .lines()
            .map(|l| l.trim().trim_start_matches(['-', '*']).trim().to_string())
            .filter(|l| !l.is_empty())
            .collect()),
        Value::Array(items) => items
            .into_iter()
            .map(|v| match v {
                Value::String(s) => Ok(s),
                other => Ok(other.to_string()),
            })
            .collect(),
        other => Err(serde::de::Error::custom(format!(
            "objective must be text or a list, got {other}"
        ))),
    }
}

fn python_literal(v: &Value) -> String {
    match v {
        Value::Null => "None".into(),
        Value::Bool(true) => "True".into(),
        Value::Bool(false) => "False".into(),
        Value::Number(n) => n.to_string(),
        Value::String(s) => serde_json::to_string(s).expect("string serializes"),
        Value::Array(items) => format!("[{}]", items.iter().map(python_literal).collect::<Vec<_>>().join(", ")),
        Value::Object(map) => format!(
            "{{{}}}",
            map.iter()
                .map(|(k, v)| format!("{}: {}", serde_json::to_string(k).expect("key"), python_literal(v)))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    }
}

/// `expected` is a Python expression; non-string JSON is converted to the
/// equivalent Python literal.
fn python_expression<'de, D: serde::Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    Ok(match Value::deserialize(d)? {
        Value::String(s) => s,
        other => python_literal(&other),
    })
}

impl GeneratedTask {
    pub fn entry_point(&self) -> Option<String> {
        let line = self.signature.lines().find(|l| l.trim_start().starts_with("def "))?;
        let rest = line.trim_start().strip_prefix("def ")?;
        let name: String = rest.chars().take_while(|c| c.is_alphanumeric() || *c == '_').collect();
        (!name.is_empty()).then_some(name)
    }

    pub fn into_task(self, task_id: String, ku: KuId) -> TaskRecord {
        let entry_point = self.entry_point();
        let mut description = self.description.trim().to_string();
        if !self.objective.is_empty() {
            description.push_str("\n\nObjectives:\n");
            for (i, goal) in self.objective.iter().enumerate() {
                description.push_str(&format!("{}. {}\n", i + 1, goal.trim()));
            }
        }
        TaskRecord {
            task_id,
            description: description.trim_end().to_string(),
            signature: self.signature,
            canonical_solution: self.solution,
            test_cases: self
                .test_cases
                .into_iter()
                .map(|t| TestCase::Io {
                    call: t.call,
                    expected: t.expected,
                    float_tolerance: None,
                })
                .collect(),
            entry_point,
            provenance: Provenance::Synthesized,
            target_ku: Some(ku),
        }
    }
}

/// Parses a generation reply after one fence-stripping repair pass.
pub fn parse_generation(text: &str) -> Result<GeneratedTask, String> {
    let object = first_object(strip_fences(text))
        .or_else(|| first_object(text))
        .ok_or_else(|| "no JSON object in reply".to_string())?;
    let task: GeneratedTask = serde_json::from_value(Value::Object(object)).map_err(|e| e.to_string())?;
    if task.solution.trim().is_empty() {
        return Err("empty solution".into());
    }
    if task.test_cases.len() < MIN_SYNTHESIZED_TESTS {
        return Err(format!(
            "{} test cases, at least {MIN_SYNTHESIZED_TESTS} required",
            task.test_cases.len()
        ));
    }
    if task.entry_point().is_none() {
        return Err("signature does not name a function".into());
    }
    Ok(task)
}

fn format_examples() -> &'static BTreeMap<String, GeneratedTask> {
    static PARSED: OnceLock<BTreeMap<String, GeneratedTask>> = OnceLock::new();
    PARSED.get_or_init(|| serde_json::from_str(FORMAT_EXAMPLES).expect("embedded format examples are valid"))
}

/// The handcrafted output example for `ku`, or the generic one.
pub fn format_example(ku: KuId) -> &'static GeneratedTask {
    let all = format_examples();
    all.get(&ku.to_string())
        .or_else(|| all.get("generic"))
        .expect("generic example present")
}

/// All embedded examples keyed by KU id (plus `generic`).
pub fn all_format_examples() -> &'static BTreeMap<String, GeneratedTask> {
    format_examples()
}

/// Builds the generation prompt for one (KU, context) pair.
pub fn build_task_prompt(
    ku: &KnowledgeUnit,
    context: &SourceFileRecord,
    example: &GeneratedTask,
    context_budget: usize,
) -> Result<String, SynthError> {
    if context.content.trim().is_empty() {
        return Err(SynthError::EmptyContext(context.artifact_id()));
    }
    let (code, cut) = truncate_context(&context.content, context_budget);
    if cut {
        log::warn!(
            "{}: context truncated to {} of {} characters",
            context.artifact_id(),
            code.chars().count(),
            context.content.chars().count()
        );
    }
    let capabilities: Vec<String> = ku
        .capabilities
        .iter()
        .map(|c| format!("- [{}] {}", c.id, c.description))
        .collect();
    let example_json = serde_json::to_string_pretty(example).expect("example serializes");
    Ok(format!(
        "## Codebase context\n\
The Python code below comes from the real-world project `{project}` (file `{path}`).\n\
<codebase>\n{code}\n</codebase>\n\n\
## Knowledge unit\n\
Name: {name} ({id})\n\
Definition: {definition}\n\
Capabilities:\n{capabilities}\n\n\
## Task instructions\n\
- Write one self-contained Python programming task whose solution clearly exercises the {name} knowledge unit.\n\
- Ground the task in the codebase context: reuse the logic of at most three functions from the codebase.\n\
- The task's inputs and outputs must use basic data types only (int, float, str, bool, None, list, tuple, dict, set).\n\
- The description must state a structured objective made of 6–8 clearly specified sub-goals.\n\
- Provide a complete reference solution that defines the function named in the signature.\n\
- Your answer must include five test cases. Each gives a call expression and the expected result, both as Python expressions.\n\n\
## Output format\n\
Reply with one JSON object and nothing else. It must contain exactly these fields: \
\"task_name\" (string), \"signature\" (the function signature line), \"description\" (string), \
\"objective\" (list of sub-goal strings), \"solution\" (Python source), and \
\"test_cases\" (list of objects with \"call\" and \"expected\").\n\
Example output:\n{example_json}\n",
        project = context.project,
        path = context.path,
        name = ku.name,
        id = ku.id,
        definition = ku.definition,
        capabilities = capabilities.join("\n"),
    ))
}

fn judge_prompt(ku: &KnowledgeUnit, task: &TaskRecord) -> String {
    let capabilities: Vec<String> = ku
        .capabilities
        .iter()
        .map(|c| format!("[{}] {}", c.id, c.description))
        .collect();
    format!(
        "You review programming tasks. Decide whether the task below, including its reference solution, \
genuinely requires the {name} knowledge unit of Python.\n\n\
{name}: {definition}\nCapabilities: {caps}\n\n\
Task description:\n{description}\n\nSignature:\n{signature}\n\nReference solution:\n```python\n{solution}\n```\n\n\
Answer with a single word: yes or no.",
        name = ku.name,
        definition = ku.definition,
        caps = capabilities.join(", "),
        description = task.description,
        signature = task.signature,
        solution = task.canonical_solution,
    )
}

/// Reads a yes/no verdict from the judge's reply.
pub fn parse_judge(reply: &str) -> Option<bool> {
    let word: String = reply
        .trim()
        .trim_start_matches(|c: char| !c.is_alphabetic())
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_ascii_lowercase();
    match word.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Yes,
    No,
    Skipped,
}

impl Stage {
    fn from_bool(b: bool) -> Self {
        if b {
            Stage::Yes
        } else {
            Stage::No
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub judge_verdict: Stage,
    pub ku_present: Stage,
    pub executable: Stage,
    pub tests_pass: Stage,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl ValidationReport {
    fn new() -> Self {
        Self {
            judge_verdict: Stage::Skipped,
            ku_present: Stage::Skipped,
            executable: Stage::Skipped,
            tests_pass: Stage::Skipped,
            accepted: false,
            notes: Vec::new(),
        }
    }
}

/// Infrastructure failure during validation; the attempt is `errored`.
#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("judge call failed: {0}")]
    Judge(GatewayError),
    #[error("detector failed: {0}")]
    Detect(DetectError),
    #[error("sandbox failed: {0}")]
    Sandbox(SandboxError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptOutcome {
    Accepted,
    Rejected,
    /// The reply could not be parsed into a task.
    Malformed,
    /// A gateway or sandbox failure interrupted the attempt.
    Errored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisAttempt {
    pub target_ku: KuId,
    pub context_file: String,
    pub attempt_index: usize,
    pub iteration: usize,
    pub raw_response: String,
    pub parsed_task: Option<TaskRecord>,
    pub validation: Option<ValidationReport>,
    pub outcome: AttemptOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near_duplicate_of: Option<String>,
}

/// Word-set Jaccard similarity of two texts.
pub fn token_set_similarity(a: &str, b: &str) -> f64 {
    let set = |s: &str| -> BTreeSet<String> {
        s.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect()
    };
    let (x, y) = (set(a), set(b));
    if x.is_empty() && y.is_empty() {
        return 1.0;
    }
    let inter = x.intersection(&y).count() as f64;
    let union = x.union(&y).count() as f64;
    inter / union
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KuSynthesis {
    pub ku: KuId,
    pub requested: usize,
    pub tasks: Vec<TaskRecord>,
    /// Detected vectors of the accepted tasks' solutions, aligned with `tasks`.
    pub vectors: Vec<KuVector>,
    pub attempts: Vec<SynthesisAttempt>,
    pub shortfall: usize,
}

/// Everything the synthesis pipeline talks to.
pub struct Synthesizer<'a> {
    pub catalog: &'a Catalog,
    pub generator: &'a Gateway,
    pub judge: &'a Gateway,
    pub detector: Detector<'a>,
    pub executor: &'a dyn Executor,
    pub config: SynthesisConfig,
}

/// Per-KU progress that persists across iterations.
#[derive(Debug, Default, Clone)]
pub struct KuState {
    consumed: BTreeSet<String>,
    accepted: usize,
}

impl KuState {
    pub fn consumed(&self) -> &BTreeSet<String> {
        &self.consumed
    }
}

fn task_id_for(ku: KuId, ordinal: usize) -> String {
    format!("syn-{ku}-{ordinal:03}")
}

impl<'a> Synthesizer<'a> {
    pub fn new(
        catalog: &'a Catalog,
        generator: &'a Gateway,
        judge: &'a Gateway,
        executor: &'a dyn Executor,
        detector_config: DetectorConfig,
        config: SynthesisConfig,
    ) -> Self {
        Self {
            catalog,
            generator,
            judge,
            detector: Detector::new(generator, catalog, detector_config),
            executor,
            config,
        }
    }

    /// Four-stage validation; later stages are skipped after a failure.
    /// Returns the report and the solution's detected vector (if stage 2 ran).
    pub fn validate_task(
        &self,
        candidate: &TaskRecord,
        ku: KuId,
        tag_suffix: &str,
    ) -> Result<(ValidationReport, Option<KuVector>), ValidationError> {
        let unit = self.catalog.get(&ku).expect("target KU in catalog");
        let mut report = ValidationReport::new();

        let judge_req = ChatRequest::new(
            &self.config.judge_model,
            self.config.judge_temperature,
            vec![Message::user(judge_prompt(unit, candidate))],
            format!("judge/{tag_suffix}"),
        )
        .map_err(ValidationError::Judge)?;
        let reply = self.judge.complete(&judge_req).map_err(ValidationError::Judge)?;
        let verdict = parse_judge(&reply.content);
        if verdict.is_none() {
            report
                .notes
                .push(format!("judge reply not yes/no: {:?}", reply.content.trim()));
        }
        report.judge_verdict = Stage::from_bool(verdict == Some(true));
        if report.judge_verdict != Stage::Yes {
            return Ok((report, None));
        }

        let detection = self
            .detector
            .detect(&format!("synth/{tag_suffix}"), &candidate.canonical_solution)
            .map_err(ValidationError::Detect)?;
        let idx = self.catalog.ku_index(&ku).expect("target KU in catalog");
        report.ku_present = Stage::from_bool(detection.vector.covers(idx));
        if report.ku_present != Stage::Yes {
            return Ok((report, Some(detection.vector)));
        }

        let job = ExecutionJob::new(candidate.runnable_solution(), candidate.test_cases.clone())
            .with_entry_point(candidate.entry_point.clone())
            .with_timeout(Duration::from_secs_f64(self.config.timeout_secs));
        let verdict = self.executor.execute(&job).map_err(ValidationError::Sandbox)?;
        report.executable = Stage::from_bool(verdict.executable());
        if report.executable != Stage::Yes {
            if let Some(fatal) = &verdict.fatal {
                report
                    .notes
                    .push(format!("not executable: {}", fatal.lines().last().unwrap_or(fatal)));
            }
            return Ok((report, Some(detection.vector)));
        }
        let all_pass = verdict.passed() && verdict.per_test.len() >= MIN_SYNTHESIZED_TESTS;
        report.tests_pass = Stage::from_bool(all_pass);
        if !all_pass {
            for t in verdict
                .per_test
                .iter()
                .filter(|t| t.status != crate::sandbox::VerdictStatus::Pass)
            {
                report
                    .notes
                    .push(format!("test {} {:?}: {}", t.test_index, t.status, t.message));
            }
        }
        report.accepted = all_pass;
        Ok((report, Some(detection.vector)))
    }

    fn attempt(
        &self,
        unit: &KnowledgeUnit,
        context: &ContextFile,
        attempt_index: usize,
        iteration: usize,
        ordinal: usize,
        accepted_so_far: &[TaskRecord],
    ) -> (SynthesisAttempt, Option<KuVector>) {
        let ku = unit.id;
        let tag_suffix = format!("{ku}/{}/{attempt_index}", context.id());
        let mut record = SynthesisAttempt {
            target_ku: ku,
            context_file: context.id(),
            attempt_index,
            iteration,
            raw_response: String::new(),
            parsed_task: None,
            validation: None,
            outcome: AttemptOutcome::Errored,
            error: None,
            near_duplicate_of: None,
        };
        let prompt = match build_task_prompt(unit, &context.record, format_example(ku), self.config.context_budget) {
            Ok(p) => p,
            Err(e) => {
                record.error = Some(e.to_string());
                return (record, None);
            }
        };
        let request = match ChatRequest::new(
            &self.config.generator_model,
            self.config.generation_temperature,
            vec![Message::user(prompt)],
            format!("synth/{tag_suffix}"),
        ) {
            Ok(r) => r,
            Err(e) => {
                record.error = Some(e.to_string());
                return (record, None);
            }
        };
        let reply = match self.generator.complete(&request) {
            Ok(r) => r,
            Err(e) => {
                record.error = Some(e.to_string());
                return (record, None);
            }
        };
        record.raw_response = reply.content.clone();
        let generated = match parse_generation(&reply.content) {
            Ok(g) => g,
            Err(e) => {
                record.outcome = AttemptOutcome::Malformed;
                record.error = Some(e);
                return (record, None);
            }
        };
        let task = generated.into_task(task_id_for(ku, ordinal), ku);
        record.near_duplicate_of = accepted_so_far
            .iter()
            .find(|t| token_set_similarity(&t.description, &task.description) > NEAR_DUPLICATE_THRESHOLD)
            .map(|t| t.task_id.clone());
        record.parsed_task = Some(task.clone());
        match self.validate_task(&task, ku, &tag_suffix) {
            Ok((report, vector)) => {
                record.outcome = if report.accepted {
                    AttemptOutcome::Accepted
                } else {
                    AttemptOutcome::Rejected
                };
                record.validation = Some(report);
                (record, vector)
            }
            Err(e) => {
                record.error = Some(e.to_string());
                (record, None)
            }
        }
    }

    /// Walks `contexts` top-down until `quota` tasks are accepted. Contexts
    /// already in `state` are never reused for this KU.
    pub fn synthesize_for_ku(
        &self,
        ku: KuId,
        contexts: &[&ContextFile],
        quota: usize,
        iteration: usize,
        state: &mut KuState,
        accepted_so_far: &mut Vec<TaskRecord>,
    ) -> KuSynthesis {
        let unit = self.catalog.get(&ku).expect("target KU in catalog");
        let mut out = KuSynthesis {
            ku,
            requested: quota,
            tasks: Vec::new(),
            vectors: Vec::new(),
            attempts: Vec::new(),
            shortfall: 0,
        };
        for context in contexts {
            if out.tasks.len() >= quota {
                break;
            }
            if !state.consumed.insert(context.id()) {
                continue;
            }
            for attempt_index in 0..self.config.max_retries_per_context {
                let ordinal = state.accepted + 1;
                let (attempt, vector) = self.attempt(unit, context, attempt_index, iteration, ordinal, accepted_so_far);
                let accepted = attempt.outcome == AttemptOutcome::Accepted;
                if accepted {
                    let task = attempt.parsed_task.clone().expect("accepted attempt has a task");
                    let mut vector = vector.expect("accepted attempt ran the detector");
                    vector.artifact_id = task.task_id.clone();
                    state.accepted += 1;
                    accepted_so_far.push(task.clone());
                    out.tasks.push(task);
                    out.vectors.push(vector);
                }
                out.attempts.push(attempt);
                if accepted {
                    break;
                }
            }
        }
        out.shortfall = quota - out.tasks.len();
        if out.shortfall > 0 {
            log::warn!("{ku}: contexts exhausted with {} of {quota} tasks", out.tasks.len());
        }
        out
    }
}

/// Under-representation of a KU in one benchmark relative to the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub ku: KuId,
    pub name: String,
    pub benchmark: String,
    pub benchmark_coverage: f64,
    pub reference_coverage: f64,
    pub missing: bool,
}

/// KUs whose coverage in at least one benchmark is zero or below
/// [`GAP_RATIO`] of the reference coverage, in catalog order.
pub fn gap_report(
    catalog: &Catalog,
    benchmarks: &[CoverageDistribution],
    reference: &CoverageDistribution,
) -> Result<(Vec<KuId>, Vec<GapEntry>), SynthError> {
    let mut entries = Vec::new();
    let mut targets = BTreeSet::new();
    for bench in benchmarks {
        if bench.len() != reference.len() || bench.len() != catalog.len() {
            return Err(MetricsError::DimensionMismatch {
                left: bench.len(),
                right: reference.len(),
            }
            .into());
        }
        for (i, unit) in catalog.units().iter().enumerate() {
            let (b, r) = (bench.proportions[i], reference.proportions[i]);
            if r <= 0.0 {
                continue;
            }
            if b == 0.0 || b < GAP_RATIO * r {
                targets.insert(i);
                entries.push(GapEntry {
                    ku: unit.id,
                    name: unit.name.clone(),
                    benchmark: bench.dataset_label.clone(),
                    benchmark_coverage: b,
                    reference_coverage: r,
                    missing: b == 0.0,
                });
            }
        }
    }
    let ids = targets
        .into_iter()
        .map(|i| *catalog.id_at(i).expect("index in range"))
        .collect();
    Ok((ids, entries))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub tasks_added: usize,
    pub total_tasks: usize,
    pub jsd: f64,
    pub signed_rank_p: f64,
    pub alpha_adjusted: f64,
    pub jsd_converged: bool,
    pub signed_rank_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopResult {
    pub augmented: BenchmarkSet,
    pub new_tasks: Vec<TaskRecord>,
    pub new_vectors: Vec<KuVector>,
    pub iterations: Vec<IterationLog>,
    pub attempts: Vec<SynthesisAttempt>,
    pub converged: bool,
    /// Which criterion held at exit, if any.
    pub fired: Option<Convergence>,
    /// Unmet quota per KU summed over iterations.
    pub shortfall: BTreeMap<String, usize>,
    pub no_context: Vec<KuId>,
}

fn check(
    cfg: &SynthesisConfig,
    vectors: &[KuVector],
    reference: &CoverageDistribution,
    label: &str,
    iteration: usize,
    tasks_added: usize,
) -> Result<IterationLog, SynthError> {
    let merged = coverage(vectors, label)?;
    let jsd = js_distance(&merged, reference)?;
    let test = signed_rank_test(&merged.proportions, &reference.proportions, cfg.alpha, 1)?;
    Ok(IterationLog {
        iteration,
        tasks_added,
        total_tasks: vectors.len(),
        jsd,
        signed_rank_p: test.p_value,
        alpha_adjusted: test.alpha_adjusted,
        jsd_converged: jsd <= cfg.jsd_epsilon,
        signed_rank_converged: !test.significant,
    })
}

fn fired(cfg: &SynthesisConfig, log: &IterationLog) -> Option<Convergence> {
    match cfg.convergence {
        Convergence::JsdThreshold => log.jsd_converged.then_some(Convergence::JsdThreshold),
        Convergence::SignedRank => log.signed_rank_converged.then_some(Convergence::SignedRank),
        Convergence::Either => {
            if log.jsd_converged {
                Some(Convergence::JsdThreshold)
            } else if log.signed_rank_converged {
                Some(Convergence::SignedRank)
            } else {
                None
            }
        }
    }
}

impl Synthesizer<'_> {
    /// Adds `batch_n` tasks per target KU per iteration until coverage of
    /// the merged set meets the convergence criterion or the iteration
    /// budget runs out. `benchmark_vectors` are the detected vectors of
    /// the original tasks and are reused as-is.
    pub fn run_convergence_loop(
        &self,
        benchmark: &BenchmarkSet,
        benchmark_vectors: &[KuVector],
        corpus: &[ContextFile],
        reference: &CoverageDistribution,
        augmented_name: &str,
    ) -> Result<LoopResult, SynthError> {
        let cfg = &self.config;
        cfg.validate()?;
        if cfg.target_kus.is_empty() {
            return Err(SynthError::NoTargets);
        }
        let mut vectors = benchmark_vectors.to_vec();
        let mut result = LoopResult {
            augmented: benchmark.clone(),
            new_tasks: Vec::new(),
            new_vectors: Vec::new(),
            iterations: Vec::new(),
            attempts: Vec::new(),
            converged: false,
            fired: None,
            shortfall: BTreeMap::new(),
            no_context: Vec::new(),
        };
        let initial = check(cfg, &vectors, reference, augmented_name, 0, 0)?;
        result.fired = fired(cfg, &initial);
        result.iterations.push(initial);
        if result.fired.is_some() {
            result.converged = true;
            result.augmented = benchmark.augment(augmented_name, &[])?;
            return Ok(result);
        }

        let mut ranked: BTreeMap<KuId, Vec<&ContextFile>> = BTreeMap::new();
        for &ku in &cfg.target_kus {
            let idx = self.catalog.ku_index(&ku)?;
            match rank_contexts(corpus, ku, idx, cfg.min_ku_instances) {
                Ok(list) => {
                    ranked.insert(ku, list);
                }
                Err(e) => {
                    log::warn!("{e}");
                    result.no_context.push(ku);
                }
            }
        }
        let mut states: BTreeMap<KuId, KuState> = BTreeMap::new();
        let mut accepted: Vec<TaskRecord> = Vec::new();
        for iteration in 1..=cfg.max_iterations {
            let mut added = 0;
            for &ku in &cfg.target_kus {
                let Some(contexts) = ranked.get(&ku) else { continue };
                let state = states.entry(ku).or_default();
                let run = self.synthesize_for_ku(ku, contexts, cfg.batch_n, iteration, state, &mut accepted);
                added += run.tasks.len();
                *result.shortfall.entry(ku.to_string()).or_default() += run.shortfall;
                result.attempts.extend(run.attempts);
                vectors.extend(run.vectors.iter().cloned());
                result.new_vectors.extend(run.vectors);
                result.new_tasks.extend(run.tasks);
            }
            let log = check(cfg, &vectors, reference, augmented_name, iteration, added)?;
            result.fired = fired(cfg, &log);
            result.iterations.push(log);
            if result.fired.is_some() {
                result.converged = true;
                break;
            }
            if added == 0 {
                log::warn!("iteration {iteration} added no tasks; stopping");
                break;
            }
        }
        if !result.converged {
            log::warn!(
                "convergence criterion not met after {} iteration(s)",
                result.iterations.len() - 1
            );
        }
        result.augmented = benchmark.augment(augmented_name, &result.new_tasks)?;
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::ProjectCategory;

    fn file(path: &str, counts: &[(usize, u64)]) -> ContextFile {
        let mut v = KuVector::zeros(path, 20);
        for &(i, c) in counts {
            v.counts[i] = c;
        }
        ContextFile {
            record: SourceFileRecord {
                project: "p".into(),
                category: ProjectCategory::Utility,
                path: path.into(),
                content: "def f():\n    return 1\n".into(),
            },
            vector: v,
        }
    }

    #[test]
    fn rank_contexts_sorts_and_filters() {
        let ku: KuId = "K16".parse().unwrap();
        let files = vec![
            file("a.py", &[(15, 5)]),
            file("b.py", &[(15, 1)]),
            file("c.py", &[(15, 3)]),
            file("d.py", &[(15, 2)]),
        ];
        let ranked: Vec<String> = rank_contexts(&files, ku, 15, 2)
            .unwrap()
            .iter()
            .map(|f| f.record.path.clone())
            .collect();
        assert_eq!(ranked, ["a.py", "c.py", "d.py"]);
        assert!(matches!(
            rank_contexts(&files, ku, 15, 9),
            Err(SynthError::NoContext { .. })
        ));
        let ties = vec![file("y.py", &[(15, 3)]), file("x.py", &[(15, 3)])];
        let ranked: Vec<String> = rank_contexts(&ties, ku, 15, 2)
            .unwrap()
            .iter()
            .map(|f| f.record.path.clone())
            .collect();
        assert_eq!(ranked, ["x.py", "y.py"]);
    }

    #[test]
    fn truncation_respects_function_boundaries() {
        let block = |name: &str| format!("def {name}():\n    x = 1\n    return x\n\n");
        let content: String = ["a", "b", "c", "d"].iter().map(|n| block(n)).collect();
        let one = block("a").chars().count();
        let (cut, truncated) = truncate_context(&content, one * 2 + 3);
        assert!(truncated);
        assert_eq!(cut, format!("{}{}", block("a"), block("b")));
        let (same, truncated) = truncate_context(&content, 10_000);
        assert!(!truncated);
        assert_eq!(same, content);
        let decorated = "import x\n@wrap\ndef g():\n    pass\n";
        let (cut, _) = truncate_context(decorated, 12);
        assert_eq!(cut, "import x\n");
    }

    #[test]
    fn prompt_contents() {
        let cat = Catalog::embedded();
        let ku: KuId = "K16".parse().unwrap();
        let unit = cat.get(&ku).unwrap();
        let f = file("svc/worker.py", &[]);
        let prompt = build_task_prompt(unit, &f.record, format_example(ku), 10_000).unwrap();
        for cap in &unit.capabilities {
            assert!(prompt.contains(&cap.description));
        }
        for needle in [
            "at most three functions",
            "6–8 clearly specified sub-goals",
            "include five test cases",
            "basic data types",
            "\"task_name\"",
            "\"signature\"",
            "\"description\"",
            "\"objective\"",
            "\"solution\"",
            "\"test_cases\"",
            "parallel_word_counts",
        ] {
            assert!(prompt.contains(needle), "missing {needle}");
        }
        let mut empty = f.record.clone();
        empty.content = "  ".into();
        assert!(build_task_prompt(unit, &empty, format_example(ku), 100).is_err());
    }

    #[test]
    fn format_examples_cover_gap_kus() {
        let all = all_format_examples();
        for id in [
            "K8", "K9", "K10", "K11", "K12", "K13", "K14", "K16", "K18", "K19", "K20", "generic",
        ] {
            let ex = &all[id];
            assert!((6..=8).contains(&ex.objective.len()), "{id}");
            assert_eq!(ex.test_cases.len(), 5, "{id}");
            assert!(ex.entry_point().is_some(), "{id}");
        }
        assert_eq!(format_example("K1".parse().unwrap()).task_name, "normalize_titles");
    }

    #[test]
    fn generation_parsing() {
        let ex = format_example("K9".parse().unwrap());
        let reply = format!("Here you go:\n```json\n{}\n```", serde_json::to_string(ex).unwrap());
        assert_eq!(&parse_generation(&reply).unwrap(), ex);
        let loose = r#"{"task_name":"t","signature":"def f(x):","description":"d","objective":"- a\n- b",
            "solution":"def f(x):\n    return x","test_cases":[
            {"call":"f(1)","expected":1},{"call":"f(None)","expected":null},{"call":"f(True)","expected":true},
            {"call":"f([1])","expected":[1]},{"call":"f('a')","expected":"'a'"}]}"#;
        let g = parse_generation(loose).unwrap();
        assert_eq!(g.objective, ["a", "b"]);
        let expected: Vec<&str> = g.test_cases.iter().map(|t| t.expected.as_str()).collect();
        assert_eq!(expected, ["1", "None", "True", "[1]", "'a'"]);
        assert!(parse_generation("no json").is_err());
        let short = r#"{"task_name":"t","signature":"def f():","description":"d","objective":[],"solution":"x","test_cases":[]}"#;
        assert!(parse_generation(short).unwrap_err().contains("test cases"));
    }

    #[test]
    fn task_conversion() {
        let ku: KuId = "K11".parse().unwrap();
        let task = format_example(ku).clone().into_task("syn-K11-001".into(), ku);
        assert_eq!(task.entry_point.as_deref(), Some("windowed_averages"));
        assert!(task.validate().is_ok());
        assert!(task.description.contains("Objectives:\n1. "));
    }

    #[test]
    fn judge_parsing() {
        assert_eq!(parse_judge("Yes."), Some(true));
        assert_eq!(parse_judge("  no, because"), Some(false));
        assert_eq!(parse_judge("**YES**"), Some(true));
        assert_eq!(parse_judge("maybe"), None);
    }

    #[test]
    fn similarity() {
        assert_eq!(token_set_similarity("a b c", "c b a"), 1.0);
        assert_eq!(token_set_similarity("a b", "c d"), 0.0);
        assert!((token_set_similarity("a b c", "a b d") - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gap_thresholds() {
        let cat = Catalog::embedded();
        let mut bench = vec![0.0; 20];
        let mut reference = vec![0.0; 20];
        bench[0] = 0.5;
        reference[0] = 0.4;
        bench[1] = 0.01; // below a quarter of 0.2
        reference[1] = 0.2;
        bench[2] = 0.49;
        reference[2] = 0.2;
        reference[3] = 0.2; // missing entirely
        let b = CoverageDistribution::from_weights("b", &bench).unwrap();
        let r = CoverageDistribution::from_weights("r", &reference).unwrap();
        let (ids, entries) = gap_report(&cat, &[b], &r).unwrap();
        let ids: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
        assert_eq!(ids, ["K2", "K4"]);
        assert!(entries.iter().any(|e| e.missing && e.ku.to_string() == "K4"));
    }
}
