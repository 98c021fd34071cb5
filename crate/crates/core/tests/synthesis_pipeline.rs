use std::sync::{Arc, Mutex};

use kubench::catalog::{Catalog, KuId};
use kubench::detector::{DetectorConfig, KuVector};
use kubench::gateway::{ChatRequest, ChatResponse, FinishReason, Gateway, Transport, TransportError};
use kubench::ingestion::{BenchmarkSet, ProjectCategory, SourceFileRecord};
use kubench::metrics::CoverageDistribution;
use kubench::sandbox::{
    ExecutionJob, ExecutionVerdict, Executor, ProcessSandbox, SandboxError, TestResult, VerdictStatus,
};
use kubench::synthesizer::{
    all_format_examples, format_example, AttemptOutcome, ContextFile, Convergence, Stage, SynthesisConfig, Synthesizer,
};

/// Answers by request tag: `synth/` generation, `judge/` verdicts, and
/// `detect/` KU counts, each produced by a closure.
struct Scripted<F: Fn(&ChatRequest) -> String + Send + Sync> {
    reply: F,
    tags: Mutex<Vec<String>>,
}

impl<F: Fn(&ChatRequest) -> String + Send + Sync> Transport for Scripted<F> {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        self.tags.lock().unwrap().push(request.request_tag.clone());
        Ok(ChatResponse {
            content: (self.reply)(request),
            finish_reason: FinishReason::Complete,
            latency_ms: 0,
        })
    }
}

/// Passes every test unless the solution contains `BROKEN`.
struct FakeExecutor {
    runs: Mutex<usize>,
}

impl Executor for FakeExecutor {
    fn execute(&self, job: &ExecutionJob) -> Result<ExecutionVerdict, SandboxError> {
        *self.runs.lock().unwrap() += 1;
        let broken = job.solution.contains("BROKEN");
        let status = if broken {
            VerdictStatus::Fail
        } else {
            VerdictStatus::Pass
        };
        Ok(ExecutionVerdict {
            status,
            per_test: (0..job.test_cases.len())
                .map(|i| TestResult {
                    test_index: i,
                    status,
                    message: String::new(),
                })
                .collect(),
            duration_ms: 1,
            fatal: None,
            workdir_writes: Vec::new(),
        })
    }
}

fn k16() -> KuId {
    "K16".parse().unwrap()
}

fn context(path: &str, k16_count: u64) -> ContextFile {
    let mut vector = KuVector::zeros(format!("proj/{path}"), 20);
    vector.counts[15] = k16_count;
    ContextFile {
        record: SourceFileRecord {
            project: "proj".into(),
            category: ProjectCategory::Utility,
            path: path.into(),
            content: format!("def helper_{}():\n    return 1\n", path.replace(['.', '/'], "_")),
        },
        vector,
    }
}

fn generation(broken: bool) -> String {
    let mut task = format_example(k16()).clone();
    if broken {
        task.solution.push_str("\n# BROKEN\n");
    }
    serde_json::to_string(&task).unwrap()
}

fn counts_reply(k16_count: u64) -> String {
    format!(r#"{{"K1": 1, "K16": {k16_count}}}"#)
}

fn config() -> SynthesisConfig {
    SynthesisConfig {
        target_kus: vec![k16()],
        ..SynthesisConfig::default()
    }
}

#[test]
fn five_failures_on_first_context_then_success_on_second() {
    let catalog = Catalog::embedded();
    let transport = Scripted {
        reply: |r: &ChatRequest| {
            let tag = &r.request_tag;
            if tag.starts_with("synth/") {
                generation(tag.contains("/a.py/"))
            } else if tag.starts_with("judge/") {
                "yes".into()
            } else {
                counts_reply(2)
            }
        },
        tags: Mutex::new(Vec::new()),
    };
    let gateway = Gateway::live(Arc::new(transport));
    let exec = FakeExecutor { runs: Mutex::new(0) };
    let synth = Synthesizer::new(&catalog, &gateway, &gateway, &exec, DetectorConfig::default(), config());
    let files = [context("a.py", 5), context("b.py", 3)];
    let ranked: Vec<&ContextFile> = files.iter().collect();
    let mut state = Default::default();
    let mut accepted = Vec::new();
    let run = synth.synthesize_for_ku(k16(), &ranked, 1, 1, &mut state, &mut accepted);

    assert_eq!(run.attempts.len(), 6);
    assert!(run.attempts[..5].iter().all(|a| a.outcome == AttemptOutcome::Rejected
        && a.context_file == "proj/a.py"
        && a.validation.as_ref().unwrap().tests_pass == Stage::No));
    let last = &run.attempts[5];
    assert_eq!(last.outcome, AttemptOutcome::Accepted);
    assert_eq!(last.context_file, "proj/b.py");
    assert_eq!(last.attempt_index, 0);
    assert_eq!(run.tasks.len(), 1);
    assert_eq!(run.shortfall, 0);
    assert_eq!(run.tasks[0].task_id, "syn-K16-001");
    assert_eq!(run.tasks[0].target_ku, Some(k16()));
    assert_eq!(run.vectors[0].artifact_id, "syn-K16-001");
    assert_eq!(*exec.runs.lock().unwrap(), 6);
    assert!(state.consumed().contains("proj/a.py") && state.consumed().contains("proj/b.py"));
}

#[test]
fn detector_rejection_skips_execution() {
    let catalog = Catalog::embedded();
    let transport = Scripted {
        reply: |r: &ChatRequest| {
            if r.request_tag.starts_with("synth/") {
                generation(false)
            } else if r.request_tag.starts_with("judge/") {
                "Yes".into()
            } else {
                counts_reply(0)
            }
        },
        tags: Mutex::new(Vec::new()),
    };
    let gateway = Gateway::live(Arc::new(transport));
    let exec = FakeExecutor { runs: Mutex::new(0) };
    let synth = Synthesizer::new(&catalog, &gateway, &gateway, &exec, DetectorConfig::default(), config());
    let files = [context("a.py", 4)];
    let ranked: Vec<&ContextFile> = files.iter().collect();
    let run = synth.synthesize_for_ku(k16(), &ranked, 2, 1, &mut Default::default(), &mut Vec::new());
    assert_eq!(run.attempts.len(), 5);
    for a in &run.attempts {
        let v = a.validation.as_ref().unwrap();
        assert_eq!(v.judge_verdict, Stage::Yes);
        assert_eq!(v.ku_present, Stage::No);
        assert_eq!(v.executable, Stage::Skipped);
        assert_eq!(v.tests_pass, Stage::Skipped);
    }
    assert_eq!(*exec.runs.lock().unwrap(), 0);
    assert_eq!(run.shortfall, 2);
}

#[test]
fn judge_rejection_and_malformed_replies() {
    let catalog = Catalog::embedded();
    let transport = Scripted {
        reply: |r: &ChatRequest| {
            let tag = &r.request_tag;
            if tag.starts_with("synth/") {
                if tag.ends_with("/0") {
                    "I cannot comply.".into()
                } else {
                    generation(false)
                }
            } else if tag.starts_with("judge/") {
                if tag.ends_with("/1") { "No." } else { "unclear" }.into()
            } else {
                counts_reply(1)
            }
        },
        tags: Mutex::new(Vec::new()),
    };
    let gateway = Gateway::live(Arc::new(transport));
    let exec = FakeExecutor { runs: Mutex::new(0) };
    let synth = Synthesizer::new(&catalog, &gateway, &gateway, &exec, DetectorConfig::default(), config());
    let files = [context("a.py", 4)];
    let ranked: Vec<&ContextFile> = files.iter().collect();
    let run = synth.synthesize_for_ku(k16(), &ranked, 1, 1, &mut Default::default(), &mut Vec::new());
    assert_eq!(run.attempts[0].outcome, AttemptOutcome::Malformed);
    assert_eq!(run.attempts[1].outcome, AttemptOutcome::Rejected);
    assert_eq!(run.attempts[1].validation.as_ref().unwrap().judge_verdict, Stage::No);
    // An unparseable judge reply counts as a rejection and is noted.
    let third = run.attempts[2].validation.as_ref().unwrap();
    assert_eq!(third.judge_verdict, Stage::No);
    assert!(!third.notes.is_empty());
    assert_eq!(third.ku_present, Stage::Skipped);
}

#[test]
fn gateway_errors_consume_retries() {
    let catalog = Catalog::embedded();
    // Replay mode with an empty fixture directory: every call misses.
    let dir = tempfile::tempdir().unwrap();
    let gateway = Gateway::replay(dir.path());
    let exec = FakeExecutor { runs: Mutex::new(0) };
    let synth = Synthesizer::new(&catalog, &gateway, &gateway, &exec, DetectorConfig::default(), config());
    let files = [context("a.py", 4)];
    let ranked: Vec<&ContextFile> = files.iter().collect();
    let run = synth.synthesize_for_ku(k16(), &ranked, 1, 1, &mut Default::default(), &mut Vec::new());
    assert_eq!(run.attempts.len(), 5);
    assert!(run
        .attempts
        .iter()
        .all(|a| a.outcome == AttemptOutcome::Errored && a.error.is_some()));
    assert_eq!(run.shortfall, 1);
}

fn accepting_gateway() -> Gateway {
    Gateway::live(Arc::new(Scripted {
        reply: |r: &ChatRequest| {
            if r.request_tag.starts_with("synth/") {
                generation(false)
            } else if r.request_tag.starts_with("judge/") {
                "yes".into()
            } else {
                r#"{"K16": 2}"#.into()
            }
        },
        tags: Mutex::new(Vec::new()),
    }))
}

fn seed_benchmark() -> (BenchmarkSet, Vec<KuVector>) {
    let task = format_example("K1".parse().unwrap())
        .clone()
        .into_task("seed-1".into(), "K1".parse().unwrap());
    let mut v = KuVector::zeros("seed-1", 20);
    v.counts[0] = 10;
    (BenchmarkSet::new("seed", vec![task]).unwrap(), vec![v])
}

fn half_half_reference() -> CoverageDistribution {
    let mut w = vec![0.0; 20];
    w[0] = 1.0;
    w[15] = 1.0;
    CoverageDistribution::from_weights("reference", &w).unwrap()
}

#[test]
fn convergence_loop_closes_the_gap() {
    let catalog = Catalog::embedded();
    let gateway = accepting_gateway();
    let exec = FakeExecutor { runs: Mutex::new(0) };
    let cfg = SynthesisConfig {
        convergence: Convergence::JsdThreshold,
        ..config()
    };
    let synth = Synthesizer::new(&catalog, &gateway, &gateway, &exec, DetectorConfig::default(), cfg);
    let files: Vec<ContextFile> = (0..12).map(|i| context(&format!("m{i:02}.py"), 3)).collect();
    let (bench, vectors) = seed_benchmark();
    let out = synth
        .run_convergence_loop(&bench, &vectors, &files, &half_half_reference(), "seed+")
        .unwrap();
    assert!(out.iterations[0].jsd > 0.5);
    assert_eq!(out.iterations.len(), 2);
    assert_eq!(out.iterations[1].tasks_added, 5);
    assert!(out.iterations[1].jsd < 1e-9);
    assert!(out.converged);
    assert_eq!(out.fired, Some(Convergence::JsdThreshold));
    assert_eq!(out.augmented.len(), 6);
    assert_eq!(out.augmented.name, "seed+");
    let ids: Vec<&str> = out.new_tasks.iter().map(|t| t.task_id.as_str()).collect();
    assert_eq!(
        ids,
        [
            "syn-K16-001",
            "syn-K16-002",
            "syn-K16-003",
            "syn-K16-004",
            "syn-K16-005"
        ]
    );
    // Re-running against the same replies is deterministic.
    let again = synth
        .run_convergence_loop(&bench, &vectors, &files, &half_half_reference(), "seed+")
        .unwrap();
    assert_eq!(again, out);
}

#[test]
fn convergence_loop_stops_when_contexts_run_out() {
    let catalog = Catalog::embedded();
    let gateway = accepting_gateway();
    let exec = FakeExecutor { runs: Mutex::new(0) };
    let cfg = SynthesisConfig {
        convergence: Convergence::JsdThreshold,
        jsd_epsilon: 0.01,
        ..config()
    };
    let synth = Synthesizer::new(&catalog, &gateway, &gateway, &exec, DetectorConfig::default(), cfg);
    let files: Vec<ContextFile> = (0..2).map(|i| context(&format!("m{i}.py"), 3)).collect();
    let (bench, vectors) = seed_benchmark();
    let out = synth
        .run_convergence_loop(&bench, &vectors, &files, &half_half_reference(), "seed+")
        .unwrap();
    assert!(!out.converged);
    // Iteration 1 uses both contexts; iteration 2 adds nothing and stops.
    assert_eq!(out.iterations.len(), 3);
    assert_eq!(out.iterations[1].tasks_added, 2);
    assert_eq!(out.iterations[2].tasks_added, 0);
    assert_eq!(out.shortfall["K16"], 3 + 5);
}

#[test]
fn signed_rank_criterion_can_hold_before_any_synthesis() {
    let catalog = Catalog::embedded();
    let gateway = accepting_gateway();
    let exec = FakeExecutor { runs: Mutex::new(0) };
    let synth = Synthesizer::new(&catalog, &gateway, &gateway, &exec, DetectorConfig::default(), config());
    let (bench, vectors) = seed_benchmark();
    let out = synth
        .run_convergence_loop(&bench, &vectors, &[], &half_half_reference(), "seed+")
        .unwrap();
    assert_eq!(out.iterations.len(), 1);
    assert_eq!(out.fired, Some(Convergence::SignedRank));
    assert!(out.new_tasks.is_empty());
}

#[test]
fn embedded_format_examples_pass_their_own_tests() {
    let sandbox = ProcessSandbox::with_embedded_harness("python3").unwrap();
    for (key, example) in all_format_examples() {
        let ku = if key == "generic" {
            "K1".parse().unwrap()
        } else {
            key.parse().unwrap()
        };
        let task = example.clone().into_task(format!("example-{key}"), ku);
        let job = ExecutionJob::new(task.runnable_solution(), task.test_cases.clone())
            .with_entry_point(task.entry_point.clone());
        let verdict = sandbox.execute(&job).unwrap();
        assert!(verdict.passed(), "{key}: {verdict:?}");
        assert_eq!(verdict.per_test.len(), 5);
    }
}
