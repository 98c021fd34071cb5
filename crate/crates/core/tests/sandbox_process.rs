use std::time::{Duration, Instant};

use kubench::ingestion::TestCase;
use kubench::sandbox::{ExecutionJob, Executor, ProcessSandbox, SandboxError, VerdictStatus};

fn sandbox() -> ProcessSandbox {
    ProcessSandbox::with_embedded_harness("python3").unwrap()
}

fn assert_case(code: &str) -> TestCase {
    TestCase::Assert { code: code.into() }
}

const ADD: &str = "def add(a, b):\n    return a + b\n";

#[test]
fn correct_solution_passes() {
    let v = sandbox()
        .execute(&ExecutionJob::new(ADD, vec![assert_case("assert add(1, 2) == 3")]))
        .unwrap();
    assert_eq!(v.status, VerdictStatus::Pass);
    assert_eq!(v.per_test.len(), 1);
    assert!(v.workdir_writes.is_empty());
}

#[test]
fn wrong_expectation_fails_on_test_zero() {
    let v = sandbox()
        .execute(&ExecutionJob::new(ADD, vec![assert_case("assert add(1, 2) == 4")]))
        .unwrap();
    assert_eq!(v.status, VerdictStatus::Fail);
    assert_eq!(v.per_test[0].status, VerdictStatus::Fail);
}

#[test]
fn io_cases_and_float_tolerance() {
    let tests = vec![
        TestCase::Io {
            call: "add(0.1, 0.2)".into(),
            expected: "0.3".into(),
            float_tolerance: None,
        },
        TestCase::Io {
            call: "add(0.1, 0.2)".into(),
            expected: "0.3".into(),
            float_tolerance: Some(1e-9),
        },
    ];
    let v = sandbox().execute(&ExecutionJob::new(ADD, tests)).unwrap();
    assert_eq!(v.per_test[0].status, VerdictStatus::Fail);
    assert_eq!(v.per_test[1].status, VerdictStatus::Pass);
}

#[test]
fn runtime_error_is_isolated_per_test() {
    let tests = vec![
        assert_case("assert add(1, 1) == 2"),
        assert_case("add(1, None)"),
        assert_case("assert add(2, 2) == 4"),
    ];
    let v = sandbox().execute(&ExecutionJob::new(ADD, tests)).unwrap();
    assert_eq!(v.status, VerdictStatus::RuntimeError);
    let statuses: Vec<_> = v.per_test.iter().map(|t| t.status).collect();
    assert_eq!(
        statuses,
        [VerdictStatus::Pass, VerdictStatus::RuntimeError, VerdictStatus::Pass]
    );
}

#[test]
fn syntax_error_is_fatal() {
    let v = sandbox()
        .execute(&ExecutionJob::new("def broken(:\n", vec![assert_case("pass")]))
        .unwrap();
    assert!(v.fatal.is_some());
    assert!(!v.executable());
}

#[test]
fn infinite_loop_times_out() {
    let limit = Duration::from_millis(400);
    let started = Instant::now();
    let v = sandbox()
        .execute(&ExecutionJob::new("while True:\n    pass\n", vec![assert_case("pass")]).with_timeout(limit))
        .unwrap();
    assert_eq!(v.status, VerdictStatus::Timeout);
    assert!(v.duration_ms >= 400);
    assert!(started.elapsed() < Duration::from_secs(5));
}

#[test]
fn workdir_writes_are_audited() {
    let solution = "open('scratch.txt', 'w').write('x')\n";
    let v = sandbox().execute(&ExecutionJob::new(solution, vec![])).unwrap();
    assert_eq!(v.status, VerdictStatus::Pass);
    assert_eq!(v.workdir_writes, ["scratch.txt"]);
}

#[test]
fn execute_many_keeps_alignment_and_isolation() {
    let jobs = vec![
        ExecutionJob::new(ADD, vec![assert_case("assert add(1, 2) == 3")]),
        ExecutionJob::new("while True:\n    pass\n", vec![assert_case("pass")])
            .with_timeout(Duration::from_millis(300)),
        ExecutionJob::new(ADD, vec![assert_case("assert add(1, 2) == 4")]),
    ];
    let out = sandbox().execute_many(&jobs, 2);
    let statuses: Vec<_> = out.iter().map(|r| r.as_ref().unwrap().status).collect();
    assert_eq!(
        statuses,
        [VerdictStatus::Pass, VerdictStatus::Timeout, VerdictStatus::Fail]
    );
    // Deterministic solutions give stable verdicts.
    let again = sandbox().execute(&jobs[0]).unwrap();
    assert_eq!(again.per_test, out[0].as_ref().unwrap().per_test);
}

#[test]
fn missing_interpreter_is_reported() {
    let sb = ProcessSandbox::with_embedded_harness("/nonexistent/python").unwrap();
    assert!(matches!(
        sb.execute(&ExecutionJob::new(ADD, vec![])),
        Err(SandboxError::InterpreterMissing(_))
    ));
}
