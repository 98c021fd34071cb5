//! Model evaluation over benchmark task sets.
//!
//! pass@k uses the unbiased estimator `1 − C(n−c, k) / C(n, k)`. Values are
//! computed as exact rationals and only rounded to `f64` at the end, so a
//! dataset mean over a merged benchmark is exactly the task-weighted mean
//! of its parts.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Duration;

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, KuId};
use crate::detector::strip_fences;
use crate::gateway::{ChatRequest, Gateway, GatewayError, Message};
use crate::ingestion::{BenchmarkSet, TaskRecord};
use crate::metrics::{relative_drop, MetricsError};
use crate::pysource;
use crate::sandbox::{ExecutionJob, Executor, VerdictStatus, DEFAULT_TIMEOUT};
use crate::stats::{cliffs_delta, signed_rank_test, EffectSize, StatTestResult, StatsError};

pub const DEFAULT_SAMPLES: usize = 10;
pub const DEFAULT_KS: [usize; 3] = [1, 3, 5];
pub const EVAL_TEMPERATURE: f64 = 0.8;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("pass@k domain error: n={n}, c={c}, k={k}")]
    Domain { n: usize, c: usize, k: usize },
    #[error("sample count {n} is smaller than the largest k ({k})")]
    TooFewSamples { n: usize, k: usize },
    #[error("no evaluable tasks in `{0}`")]
    NoTasks(String),
    #[error("model sets differ: only in original {only_original:?}, only in augmented {only_augmented:?}")]
    ModelMismatch {
        only_original: Vec<String>,
        only_augmented: Vec<String>,
    },
    #[error("duplicate table for model `{0}`")]
    DuplicateModel(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// Exact pass@k.
pub fn pass_at_k_exact(n: usize, c: usize, k: usize) -> Result<BigRational, EvalError> {
    if k == 0 || k > n || c > n {
        return Err(EvalError::Domain { n, c, k });
    }
    let miss = BigRational::new(BigInt::from(binomial(n - c, k)), BigInt::from(binomial(n, k)));
    Ok(BigRational::one() - miss)
}

pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64, EvalError> {
    Ok(to_f64(&pass_at_k_exact(n, c, k)?))
}

fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().expect("pass@k values are finite")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Pass,
    Fail,
    RuntimeError,
    Timeout,
    HarnessError,
    /// The model call failed; the sample counts as incorrect.
    GenerationError,
    /// The sandbox could not run the sample; counts as incorrect.
    ExecutionError,
}

impl From<VerdictStatus> for SampleStatus {
    fn from(v: VerdictStatus) -> Self {
        match v {
            VerdictStatus::Pass => Self::Pass,
            VerdictStatus::Fail => Self::Fail,
            VerdictStatus::RuntimeError => Self::RuntimeError,
            VerdictStatus::Timeout => Self::Timeout,
            VerdictStatus::HarnessError => Self::HarnessError,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample_index: usize,
    pub status: SampleStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub model: String,
    pub task_id: String,
    pub n_samples: usize,
    pub n_correct: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_ku: Option<KuId>,
    #[serde(default)]
    pub per_sample: Vec<SampleOutcome>,
}

impl EvalOutcome {
    /// Outcome with only counts, for aggregation tests and imports.
    pub fn counts(model: &str, task_id: &str, n_samples: usize, n_correct: usize) -> Self {
        Self {
            model: model.to_string(),
            task_id: task_id.to_string(),
            n_samples,
            n_correct,
            target_ku: None,
            per_sample: Vec::new(),
        }
    }
}

/// Mean pass@k over outcomes, exact.
pub fn dataset_pass_at_k_exact(outcomes: &[EvalOutcome], k: usize) -> Result<BigRational, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::NoTasks("outcomes".into()));
    }
    let mut sum = BigRational::zero();
    for o in outcomes {
        sum += pass_at_k_exact(o.n_samples, o.n_correct, k)?;
    }
    Ok(sum / BigRational::from_integer(BigInt::from(outcomes.len())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassAtKRow {
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerKuRow {
    pub ku: KuId,
    pub k: usize,
    pub value: f64,
    pub n_tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassAtKTable {
    pub model: String,
    pub dataset_label: String,
    pub n_tasks: usize,
    pub rows: Vec<PassAtKRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_ku_rows: Vec<PerKuRow>,
    /// Tasks left out because they have no test cases.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded_tasks: Vec<String>,
}

impl PassAtKTable {
    pub fn value(&self, k: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.k == k).map(|r| r.value)
    }
}

/// Aggregates outcomes of one model into a table. Per-KU rows cover the
/// outcomes that carry a `target_ku`.
pub fn pass_at_k_table(
    outcomes: &[EvalOutcome],
    model: &str,
    dataset_label: &str,
    ks: &[usize],
) -> Result<PassAtKTable, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::NoTasks(dataset_label.to_string()));
    }
    let mut ks: Vec<usize> = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut rows = Vec::with_capacity(ks.len());
    for &k in &ks {
        rows.push(PassAtKRow {
            k,
            value: to_f64(&dataset_pass_at_k_exact(outcomes, k)?),
        });
    }
    let mut by_ku: BTreeMap<KuId, Vec<EvalOutcome>> = BTreeMap::new();
    for o in outcomes {
        if let Some(ku) = o.target_ku {
            by_ku.entry(ku).or_default().push(o.clone());
        }
    }
    let mut per_ku_rows = Vec::new();
    for (ku, group) in &by_ku {
        for &k in &ks {
            per_ku_rows.push(PerKuRow {
                ku: *ku,
                k,
                value: to_f64(&dataset_pass_at_k_exact(group, k)?),
                n_tasks: group.len(),
            });
        }
    }
    Ok(PassAtKTable {
        model: model.to_string(),
        dataset_label: dataset_label.to_string(),
        n_tasks: outcomes.len(),
        rows,
        per_ku_rows,
        excluded_tasks: Vec::new(),
    })
}

/// Which tasks contribute to per-KU rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerKuMode {
    /// Only synthesized tasks, grouped by their target KU.
    #[default]
    TargetOnly,
    /// Also benchmark tasks, grouped by their detected dominant KU.
    Dominant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub ks: Vec<usize>,
    pub temperature: f64,
    pub batch_size: usize,
    pub parallelism: usize,
    #[serde(with = "secs")]
    pub timeout: Duration,
    pub per_ku_mode: PerKuMode,
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Duration::try_from_secs_f64(f64::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: DEFAULT_SAMPLES,
            ks: DEFAULT_KS.to_vec(),
            temperature: EVAL_TEMPERATURE,
            batch_size: 16,
            parallelism: 4,
            timeout: DEFAULT_TIMEOUT,
            per_ku_mode: PerKuMode::TargetOnly,
        }
    }
}

const EVAL_SYSTEM: &str = "Complete the following Python task. Reply with the full function implementation in a \
single Python code block.";

fn eval_request(model: &str, task: &TaskRecord, sample: usize, temperature: f64) -> Result<ChatRequest, GatewayError> {
    ChatRequest::new(
        model,
        temperature,
        vec![Message::system(EVAL_SYSTEM), Message::user(task.prompt_text())],
        format!("eval/{model}/{}/{sample}", task.task_id),
    )
}

/// Requests `n` completions for `task`; errors stay in position.
pub fn generate_samples(
    gateway: &Gateway,
    model: &str,
    task: &TaskRecord,
    n: usize,
    temperature: f64,
    batch_size: usize,
) -> Vec<Result<String, GatewayError>> {
    let requests: Result<Vec<_>, _> = (0..n).map(|i| eval_request(model, task, i, temperature)).collect();
    match requests {
        Err(e) => (0..n)
            .map(|_| Err(GatewayError::InvalidRequest(e.to_string())))
            .collect(),
        Ok(requests) => gateway
            .complete_batch(&requests, batch_size)
            .into_iter()
            .zip(&requests)
            .map(|(r, _)| r.map(|resp| clean_sample(&resp.content, task).0))
            .collect(),
    }
}

fn import_lines(text: &str) -> Vec<&str> {
    text.lines()
        .filter(|l| l.starts_with("import ") || l.starts_with("from "))
        .collect()
}

/// Makes a raw completion runnable against `task`. Returns the code and,
/// when the signature had to be reconciled, a note describing how.
pub fn clean_sample(raw: &str, task: &TaskRecord) -> (String, Option<String>) {
    let body = strip_fences(raw).to_string();
    let Some(entry) = task.entry_point.as_deref() else {
        return (ensure_newline(body), None);
    };
    if pysource::defined_functions(&body).iter().any(|f| f == entry) {
        let missing: Vec<&str> = import_lines(&task.signature)
            .into_iter()
            .filter(|imp| !body.lines().any(|l| l.trim() == imp.trim()))
            .collect();
        if missing.is_empty() {
            return (ensure_newline(body), None);
        }
        let mut code = missing.join("\n");
        code.push('\n');
        code.push_str(&body);
        return (ensure_newline(code), Some("prepended signature imports".into()));
    }
    // Treat the sample as a function body.
    let already_indented = body
        .lines()
        .filter(|l| !l.trim().is_empty())
        .all(|l| l.starts_with(' ') || l.starts_with('\t'));
    let mut code = task.signature.trim_end().to_string();
    code.push('\n');
    for line in body.lines() {
        if !already_indented && !line.trim().is_empty() {
            code.push_str("    ");
        }
        code.push_str(line);
        code.push('\n');
    }
    let note = format!("sample does not define `{entry}`; wrapped under the task signature");
    log::warn!("{}: {note}", task.task_id);
    (code, Some(note))
}

fn ensure_newline(mut s: String) -> String {
    if !s.ends_with('\n') {
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub table: PassAtKTable,
    pub outcomes: Vec<EvalOutcome>,
}

/// Runs `model` over `benchmark`. `dominant_ku` supplies per-task KUs for
/// benchmark tasks in [`PerKuMode::Dominant`].
pub fn evaluate(
    gateway: &Gateway,
    executor: &dyn Executor,
    model: &str,
    benchmark: &BenchmarkSet,
    cfg: &EvalConfig,
    dominant_ku: &HashMap<String, KuId>,
) -> Result<Evaluation, EvalError> {
    let max_k = cfg.ks.iter().copied().max().unwrap_or(1);
    if cfg.n_samples < max_k {
        return Err(EvalError::TooFewSamples {
            n: cfg.n_samples,
            k: max_k,
        });
    }
    let (tasks, excluded): (Vec<&TaskRecord>, Vec<&TaskRecord>) =
        benchmark.tasks.iter().partition(|t| !t.test_cases.is_empty());
    let excluded: Vec<String> = excluded.iter().map(|t| t.task_id.clone()).collect();
    for id in &excluded {
        log::warn!("{id}: no test cases; excluded from evaluation");
    }
    if tasks.is_empty() {
        return Err(EvalError::NoTasks(benchmark.name.clone()));
    }

    let mut requests = Vec::with_capacity(tasks.len() * cfg.n_samples);
    for task in &tasks {
        for i in 0..cfg.n_samples {
            requests.push(eval_request(model, task, i, cfg.temperature)?);
        }
    }
    let replies = gateway.complete_batch(&requests, cfg.batch_size);

    let mut jobs = Vec::new();
    let mut job_slot = Vec::new();
    let mut statuses: Vec<Option<SampleOutcome>> = vec![None; replies.len()];
    for (slot, reply) in replies.into_iter().enumerate() {
        let task = tasks[slot / cfg.n_samples];
        let sample_index = slot % cfg.n_samples;
        match reply {
            Err(e) => {
                statuses[slot] = Some(SampleOutcome {
                    sample_index,
                    status: SampleStatus::GenerationError,
                    detail: Some(e.to_string()),
                })
            }
            Ok(resp) => {
                let (code, _) = clean_sample(&resp.content, task);
                if code.trim().is_empty() {
                    statuses[slot] = Some(SampleOutcome {
                        sample_index,
                        status: SampleStatus::GenerationError,
                        detail: Some("empty completion".into()),
                    });
                    continue;
                }
                jobs.push(
                    ExecutionJob::new(code, task.test_cases.clone())
                        .with_entry_point(task.entry_point.clone())
                        .with_timeout(cfg.timeout),
                );
                job_slot.push(slot);
            }
        }
    }
    let verdicts = executor.execute_many(&jobs, cfg.parallelism);
    for (slot, verdict) in job_slot.into_iter().zip(verdicts) {
        let sample_index = slot % cfg.n_samples;
        statuses[slot] = Some(match verdict {
            Ok(v) => SampleOutcome {
                sample_index,
                status: v.status.into(),
                detail: None,
            },
            Err(e) => {
                log::warn!(
                    "{}: sample {sample_index} could not be executed: {e}",
                    tasks[slot / cfg.n_samples].task_id
                );
                SampleOutcome {
                    sample_index,
                    status: SampleStatus::ExecutionError,
                    detail: Some(e.to_string()),
                }
            }
        });
    }

    let mut outcomes = Vec::with_capacity(tasks.len());
    for (t, chunk) in statuses.chunks(cfg.n_samples).enumerate() {
        let task = tasks[t];
        let per_sample: Vec<SampleOutcome> = chunk
            .iter()
            .map(|s| s.clone().expect("every sample resolved"))
            .collect();
        let n_correct = per_sample.iter().filter(|s| s.status == SampleStatus::Pass).count();
        let target_ku = match (task.target_ku, cfg.per_ku_mode) {
            (Some(ku), _) => Some(ku),
            (None, PerKuMode::Dominant) => dominant_ku.get(&task.task_id).copied(),
            (None, PerKuMode::TargetOnly) => None,
        };
        outcomes.push(EvalOutcome {
            model: model.to_string(),
            task_id: task.task_id.clone(),
            n_samples: cfg.n_samples,
            n_correct,
            target_ku,
            per_sample,
        });
    }
    let mut table = pass_at_k_table(&outcomes, model, &benchmark.name, &cfg.ks)?;
    table.excluded_tasks = excluded;
    Ok(Evaluation { table, outcomes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropRow {
    pub model: String,
    pub original: f64,
    pub augmented: f64,
    /// Percentage decline; absent when the original score is zero.
    pub drop_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonLevel {
    pub k: usize,
    pub rows: Vec<DropRow>,
    pub test: StatTestResult,
    pub effect: EffectSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub original_label: String,
    pub augmented_label: String,
    pub levels: Vec<ComparisonLevel>,
}

fn by_model(tables: &[PassAtKTable]) -> Result<BTreeMap<&str, &PassAtKTable>, EvalError> {
    let mut map = BTreeMap::new();
    for t in tables {
        if map.insert(t.model.as_str(), t).is_some() {
            return Err(EvalError::DuplicateModel(t.model.clone()));
        }
    }
    Ok(map)
}

/// Compares per-model scores on an original and an augmented benchmark.
/// For each k present in every table, the signed-rank test pairs models'
/// original and augmented scores; Cliff's delta contrasts the two groups.
pub fn compare(
    original: &[PassAtKTable],
    augmented: &[PassAtKTable],
    alpha: f64,
    n_comparisons: usize,
) -> Result<ComparisonReport, EvalError> {
    let orig = by_model(original)?;
    let aug = by_model(augmented)?;
    let only_original: Vec<String> = orig
        .keys()
        .filter(|m| !aug.contains_key(*m))
        .map(|m| m.to_string())
        .collect();
    let only_augmented: Vec<String> = aug
        .keys()
        .filter(|m| !orig.contains_key(*m))
        .map(|m| m.to_string())
        .collect();
    if !only_original.is_empty() || !only_augmented.is_empty() || orig.is_empty() {
        return Err(EvalError::ModelMismatch {
            only_original,
            only_augmented,
        });
    }
    let mut ks: BTreeSet<usize> = original[0].rows.iter().map(|r| r.k).collect();
    for t in original.iter().chain(augmented) {
        let here: BTreeSet<usize> = t.rows.iter().map(|r| r.k).collect();
        ks = ks.intersection(&here).copied().collect();
    }
    let mut levels = Vec::new();
    for k in ks {
        let mut rows = Vec::new();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for (model, o) in &orig {
            let a = aug[model];
            let (ov, av) = (o.value(k).expect("k in table"), a.value(k).expect("k in table"));
            xs.push(ov);
            ys.push(av);
            rows.push(DropRow {
                model: model.to_string(),
                original: ov,
                augmented: av,
                drop_pct: relative_drop(ov, av).ok(),
            });
        }
        levels.push(ComparisonLevel {
            k,
            rows,
            test: signed_rank_test(&xs, &ys, alpha, n_comparisons)?,
            effect: cliffs_delta(&xs, &ys)?,
        });
    }
    Ok(ComparisonReport {
        original_label: original[0].dataset_label.clone(),
        augmented_label: augmented[0].dataset_label.clone(),
        levels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub model: String,
    pub ku: KuId,
    /// `None` when the model has no tasks for this KU.
    pub value: Option<f64>,
    pub n_tasks: usize,
}

/// pass@k per (model, KU) over outcomes carrying a target KU. Every model
/// gets a cell for every catalog KU; empty cells are `None`, never 0.
pub fn heatmap_data(outcomes: &[EvalOutcome], catalog: &Catalog, k: usize) -> Result<Vec<HeatmapCell>, EvalError> {
    let models: BTreeSet<&str> = outcomes.iter().map(|o| o.model.as_str()).collect();
    let mut cells = Vec::new();
    for model in models {
        for unit in catalog.units() {
            let group: Vec<EvalOutcome> = outcomes
                .iter()
                .filter(|o| o.model == model && o.target_ku == Some(unit.id))
                .cloned()
                .collect();
            let value = if group.is_empty() {
                None
            } else {
                Some(to_f64(&dataset_pass_at_k_exact(&group, k)?))
            };
            cells.push(HeatmapCell {
                model: model.to_string(),
                ku: unit.id,
                value,
                n_tasks: group.len(),
            });
        }
    }
    Ok(cells)
}
