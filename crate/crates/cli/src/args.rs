use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use kubench::evaluator::PerKuMode;
use kubench::gateway::GatewayMode;
use kubench::ingestion::{BenchmarkFormat, ProjectCategory};
use kubench::metrics::ReferenceMode;
use kubench::synthesizer::Convergence;

/// Environment variable holding the provider API key.
pub const API_KEY_ENV: &str = "KUBENCH_API_KEY";

#[derive(Debug, Parser, Serialize)]
#[command(name = "kubench", version)]
#[command(
    about = "Knowledge-unit coverage analysis, gap reporting, task synthesis and re-evaluation of code benchmarks"
)]
#[command(
    after_help = "All flags may also be given in a TOML or JSON file passed with --config; keys are the long \
flag names (global flags at the top level, command flags in a table named after the command). Flags on the command \
line win. The provider API key is read from the KUBENCH_API_KEY environment variable."
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GlobalArgs {
    /// Config file (TOML or JSON) mirroring the command-line flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for every artifact and manifest.
    #[arg(long, global = true, default_value = "kubench-out")]
    pub out_dir: PathBuf,
    /// Seed recorded in the manifest; no step draws random numbers without it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Alternative KU catalog JSON (the bundled Python catalog by default).
    #[arg(long, global = true)]
    pub catalog: Option<PathBuf>,
    /// How model calls are served.
    #[arg(long, global = true, value_enum, default_value_t = GatewayArg::Replay)]
    pub gateway: GatewayArg,
    /// Directory of recorded model responses.
    #[arg(long, global = true, default_value = "fixtures")]
    pub fixtures: PathBuf,
    /// Base URL of an OpenAI-compatible chat-completions API.
    #[arg(long, global = true, default_value = "https://api.openai.com/v1")]
    pub provider_url: String,
    /// Abort once this many live model calls have been made.
    #[arg(long, global = true)]
    pub max_live_calls: Option<usize>,
    /// Per-request timeout for live calls, in seconds.
    #[arg(long, global = true, default_value_t = 120)]
    pub request_timeout_secs: u64,
    /// Python interpreter used by the sandbox.
    #[arg(long, global = true, default_value = "python3")]
    pub python: PathBuf,
    /// Test harness script (the bundled one by default).
    #[arg(long, global = true)]
    pub harness: Option<PathBuf>,
    /// Replay sandbox verdicts from this file instead of running code.
    #[arg(long, global = true, conflicts_with = "record_verdicts")]
    pub verdicts: Option<PathBuf>,
    /// Run code and add every verdict to this file.
    #[arg(long, global = true)]
    pub record_verdicts: Option<PathBuf>,
    /// Manifest path (default: OUT_DIR/manifest-<command>[-<label>].json).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatewayArg {
    Replay,
    Record,
    ReplayOrRecord,
    Live,
}

impl From<GatewayArg> for GatewayMode {
    fn from(g: GatewayArg) -> Self {
        match g {
            GatewayArg::Replay => GatewayMode::Replay,
            GatewayArg::Record => GatewayMode::Record,
            GatewayArg::ReplayOrRecord => GatewayMode::ReplayOrRecord,
            GatewayArg::Live => GatewayMode::Live,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormatArg {
    HumanevalJsonl,
    MbppJsonl,
    NativeJson,
}

impl From<FormatArg> for BenchmarkFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::HumanevalJsonl => BenchmarkFormat::HumanevalJsonl,
            FormatArg::MbppJsonl => BenchmarkFormat::MbppJsonl,
            FormatArg::NativeJson => BenchmarkFormat::NativeJson,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CategoryArg {
    Organizational,
    Utility,
}

impl From<CategoryArg> for ProjectCategory {
    fn from(c: CategoryArg) -> Self {
        match c {
            CategoryArg::Organizational => ProjectCategory::Organizational,
            CategoryArg::Utility => ProjectCategory::Utility,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceArg {
    Median,
    Pooled,
}

impl From<ReferenceArg> for ReferenceMode {
    fn from(r: ReferenceArg) -> Self {
        match r {
            ReferenceArg::Median => ReferenceMode::Median,
            ReferenceArg::Pooled => ReferenceMode::Pooled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvergenceArg {
    SignedRank,
    JsdThreshold,
    Either,
}

impl From<ConvergenceArg> for Convergence {
    fn from(c: ConvergenceArg) -> Self {
        match c {
            ConvergenceArg::SignedRank => Convergence::SignedRank,
            ConvergenceArg::JsdThreshold => Convergence::JsdThreshold,
            ConvergenceArg::Either => Convergence::Either,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerKuArg {
    TargetOnly,
    Dominant,
}

impl From<PerKuArg> for PerKuMode {
    fn from(p: PerKuArg) -> Self {
        match p {
            PerKuArg::TargetOnly => PerKuMode::TargetOnly,
            PerKuArg::Dominant => PerKuMode::Dominant,
        }
    }
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Detect KU instances in benchmark tasks or in a project's source files.
    Detect(DetectArgs),
    /// Coverage distributions, Gini coefficients and distances to the real-world reference.
    Coverage(CoverageArgs),
    /// Lorenz-curve plot data for each coverage distribution.
    Lorenz(LorenzArgs),
    /// KUs that benchmarks miss or under-represent relative to the reference.
    GapReport(GapReportArgs),
    /// Generate and validate KU-targeted tasks until coverage converges.
    Synthesize(SynthesizeArgs),
    /// Merge a benchmark with synthesized tasks.
    Augment(AugmentArgs),
    /// Sample models on a benchmark and compute pass@k.
    Evaluate(EvaluateArgs),
    /// Compare pass@k between an original and an augmented benchmark.
    Compare(CompareArgs),
    /// Consolidate the artifacts of earlier commands into one report.
    Report(ReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Detect(_) => "detect",
            Command::Coverage(_) => "coverage",
            Command::Lorenz(_) => "lorenz",
            Command::GapReport(_) => "gap-report",
            Command::Synthesize(_) => "synthesize",
            Command::Augment(_) => "augment",
            Command::Evaluate(_) => "evaluate",
            Command::Compare(_) => "compare",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchmarkInput {
    /// Benchmark file.
    #[arg(long)]
    pub benchmark: Option<PathBuf>,
    /// Benchmark file format.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Dataset label (defaults to the benchmark's name).
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DetectArgs {
    #[command(flatten)]
    pub input: BenchmarkInput,
    /// Project source tree to scan instead of a benchmark.
    #[arg(long, conflicts_with = "benchmark")]
    pub project: Option<PathBuf>,
    /// Category of the scanned project.
    #[arg(long, value_enum, requires = "project")]
    pub category: Option<CategoryArg>,
    /// Glob patterns (relative to the project root) to skip.
    #[arg(long)]
    pub exclude: Vec<String>,
    /// Files longer than this many characters are skipped.
    #[arg(long)]
    pub max_chars: Option<usize>,
    /// Detection model.
    #[arg(long, default_value = "gpt-4o-mini")]
    pub model: String,
    /// Requests sent per batch.
    #[arg(long, default_value_t = kubench::detector::DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
    /// Output JSONL file (default: OUT_DIR/vectors-<name>.jsonl).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CoverageArgs {
    /// Benchmark vector file from `detect`, as PATH or LABEL=PATH. Repeatable.
    #[arg(long)]
    pub dataset: Vec<String>,
    /// Project vector file from `detect --project`. Repeatable.
    #[arg(long)]
    pub corpus: Vec<PathBuf>,
    /// How the real-world reference is formed from the corpus.
    #[arg(long, value_enum, default_value_t = ReferenceArg::Median)]
    pub reference: ReferenceArg,
    /// Label of the reference distribution.
    #[arg(long, default_value = "Real-world")]
    pub reference_label: String,
    /// Family-wise significance level for the per-KU project-category tests.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LorenzArgs {
    /// Coverage artifact from `coverage`.
    #[arg(long)]
    pub coverage: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GapReportArgs {
    /// Coverage artifact from `coverage` (or published proportions in the same shape).
    #[arg(long)]
    pub coverage: Option<PathBuf>,
    /// Family-wise significance level for the per-benchmark signed-rank tests.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthesizeArgs {
    #[command(flatten)]
    pub input: BenchmarkInput,
    /// KU vectors of the benchmark's tasks (from `detect`).
    #[arg(long)]
    pub benchmark_vectors: Option<PathBuf>,
    /// Project vector files with sources (from `detect --project`). Repeatable.
    #[arg(long)]
    pub corpus: Vec<PathBuf>,
    /// Coverage artifact providing the reference distribution.
    #[arg(long)]
    pub coverage: Option<PathBuf>,
    /// Gap artifact whose KUs become the targets.
    #[arg(long)]
    pub gaps: Option<PathBuf>,
    /// Target KU id (e.g. K16). Repeatable; overrides --gaps.
    #[arg(long)]
    pub ku: Vec<String>,
    /// Name of the synthesized task set.
    #[arg(long, default_value = "NewKUTasks")]
    pub set_name: String,
    /// Tasks added per KU per iteration.
    #[arg(long, default_value_t = 5)]
    pub quota: usize,
    #[arg(long, default_value_t = 10)]
    pub max_iterations: usize,
    #[arg(long, default_value_t = 5)]
    pub max_retries: usize,
    /// Minimum KU instances for a file to serve as context.
    #[arg(long, default_value_t = 2)]
    pub min_instances: u64,
    #[arg(long, value_enum, default_value_t = ConvergenceArg::Either)]
    pub convergence: ConvergenceArg,
    #[arg(long, default_value_t = 0.15)]
    pub jsd_epsilon: f64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    pub temperature: f64,
    #[arg(long, default_value = "gpt-4o-mini")]
    pub generator_model: String,
    #[arg(long, default_value = "gpt-4o")]
    pub judge_model: String,
    #[arg(long, default_value = "gpt-4o-mini")]
    pub detector_model: String,
    /// Characters of context code included in each prompt.
    #[arg(long, default_value_t = 12_000)]
    pub context_budget: usize,
    /// Sandbox time limit per task, in seconds.
    #[arg(long, default_value_t = 10.0)]
    pub timeout_secs: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AugmentArgs {
    #[command(flatten)]
    pub input: BenchmarkInput,
    /// Synthesized task set (native JSON, from `synthesize`).
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Name of the merged set (default: Augmented-<benchmark>).
    #[arg(long)]
    pub augmented_name: Option<String>,
    /// Benchmark vectors; with --task-vectors and --coverage, distances are reported.
    #[arg(long)]
    pub benchmark_vectors: Option<PathBuf>,
    #[arg(long)]
    pub task_vectors: Option<PathBuf>,
    #[arg(long)]
    pub coverage: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub input: BenchmarkInput,
    /// Model to evaluate. Repeatable.
    #[arg(long)]
    pub model: Vec<String>,
    /// Samples per task.
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// k values for pass@k.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 3, 5])]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 0.8)]
    pub temperature: f64,
    /// Concurrent sandbox runs.
    #[arg(long, default_value_t = 4)]
    pub parallelism: usize,
    /// Concurrent model requests.
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Sandbox time limit per sample, in seconds.
    #[arg(long, default_value_t = 10.0)]
    pub timeout_secs: f64,
    /// Which tasks enter per-KU rows and the heatmap.
    #[arg(long, value_enum, default_value_t = PerKuArg::TargetOnly)]
    pub per_ku: PerKuArg,
    /// Task vectors used to find each benchmark task's dominant KU.
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    /// k used for the heatmap.
    #[arg(long, default_value_t = 1)]
    pub heatmap_k: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CompareArgs {
    /// Evaluation artifacts on the original benchmark. Repeatable.
    #[arg(long)]
    pub original: Vec<PathBuf>,
    /// Evaluation artifacts on the augmented benchmark. Repeatable.
    #[arg(long)]
    pub augmented: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Comparisons in the Bonferroni family.
    #[arg(long, default_value_t = 1)]
    pub n_comparisons: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReportArgs {
    /// Directory holding earlier artifacts (default: OUT_DIR).
    #[arg(long)]
    pub inputs: Option<PathBuf>,
}
