//! Shared by the CLI integration tests: a scripted OpenAI-compatible server
//! used to record the pipeline fixtures, and a driver that runs the full
//! pipeline through the `kubench` binary.

#![allow(dead_code)]

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Arc, Mutex};

use kubench::ingestion::{load_benchmark, BenchmarkFormat};
use kubench::synthesizer::all_format_examples;
use serde_json::{json, Value};

pub const STRONG: &str = "mock-strong";
pub const WEAK: &str = "mock-weak";
pub const API_KEY: &str = "test-key";

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_kubench")
}

pub fn pipeline_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/pipeline")
}

pub const PROJECTS: [(&str, &str); 4] = [
    ("org-ledger", "organizational"),
    ("org-scheduler", "organizational"),
    ("util-netkit", "utility"),
    ("util-textkit", "utility"),
];

// ---------------------------------------------------------------------------
// Scripted provider
// ---------------------------------------------------------------------------

/// Keyword heuristics standing in for a detection model. Deterministic and
/// good enough to give every fixture file a plausible KU profile.
pub fn keyword_counts(code: &str) -> [u64; 20] {
    let mut k = [0u64; 20];
    let count = |hay: &str, needle: &str| hay.matches(needle).count() as u64;
    for line in code.lines() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if is_assignment(t) {
            k[0] += 1;
        }
        for op in [
            " + ", " - ", " * ", " / ", " % ", "==", "!=", "<=", ">=", " < ", " > ", "+=", "-=", "*=", " and ", " or ",
            " not ",
        ] {
            k[1] += count(t, op);
        }
        if t.starts_with("if ") || t.starts_with("elif ") || t == "else:" {
            k[2] += 1;
        }
        if t.starts_with("for ") || t.starts_with("while ") {
            k[3] += 1;
        }
        if t.starts_with("def ") || t.starts_with("return") {
            k[4] += 1;
        }
        k[5] += count(t, "lambda");
        for ds in [
            "[]", "{}", ".append(", "dict(", "set(", "list(", "tuple(", ".items()", ".get(",
        ] {
            k[6] += count(t, ds);
        }
        k[7] += count(&t.replace("urlopen(", ""), "open(") + count(t, "os.replace") + count(t, "os.path.exists");
        if t.starts_with("class ") {
            k[8] += 1;
        }
        k[8] += count(t, "__init__") + count(t, "super(");
        if t == "try:" || t.starts_with("except") || t.starts_with("raise") || t == "finally:" {
            k[9] += 1;
        }
        k[10] += count(t, "yield");
        if t.starts_with('@') {
            k[11] += 1;
        }
        k[12] += count(t, "nonlocal");
        if t.starts_with("with ") {
            k[13] += 1;
        }
        k[13] += count(t, "__enter__") + count(t, "contextmanager(") + count(t, "@contextmanager");
        if t.contains(" for ") && !t.starts_with("for ") {
            k[14] += 1;
        }
        for c in ["threading.", "asyncio.", "concurrent.futures", ".Lock("] {
            k[15] += count(t, c);
        }
        for s in [
            ".split(",
            ".join(",
            ".strip(",
            ".lower(",
            ".upper(",
            ".replace(",
            ".capitalize(",
            "f\"",
            ".format(",
            "[::-1]",
            ".find(",
            ".rfind(",
        ] {
            k[16] += count(t, s);
        }
        for n in ["socket.", "urllib.", "requests.", "http."] {
            k[17] += count(t, n);
        }
        k[18] += count(t, "json.") + count(t, "pickle.");
        k[19] += count(t, "sqlite3.") + count(t, ".execute(");
    }
    k
}

fn is_assignment(t: &str) -> bool {
    let bytes = t.as_bytes();
    let Some(p) = t.find('=') else { return false };
    if bytes.get(p + 1) == Some(&b'=') || p == 0 {
        return false;
    }
    if matches!(
        bytes[p - 1],
        b'=' | b'!' | b'<' | b'>' | b'+' | b'-' | b'*' | b'/' | b'%'
    ) {
        return false;
    }
    let target = t[..p].trim();
    let first = target.split_whitespace().next().unwrap_or("");
    !target.is_empty()
        && ![
            "def", "if", "elif", "return", "for", "while", "with", "assert", "class", "lambda",
        ]
        .contains(&first)
        && target
            .chars()
            .all(|c| c.is_alphanumeric() || matches!(c, '_' | '.' | ',' | ' ' | '[' | ']' | '"' | '\''))
}

#[derive(Default)]
struct State {
    solutions: HashMap<String, String>,
    synthesized: Vec<String>,
    samples: HashMap<(String, String), usize>,
}

pub struct MockProvider {
    pub url: String,
    pub requests: Arc<Mutex<usize>>,
}

impl MockProvider {
    /// Starts the server with reference solutions for the benchmark files it
    /// will be asked to solve.
    pub fn start(benchmarks: &[(PathBuf, BenchmarkFormat)]) -> Self {
        let mut state = State::default();
        for (path, format) in benchmarks {
            let bench = load_benchmark(path, *format).expect("fixture benchmark loads");
            for task in &bench.tasks {
                let entry = task.entry_point.clone().expect("fixture tasks name an entry point");
                state.solutions.insert(entry, task.runnable_solution());
            }
        }
        let state = Arc::new(Mutex::new(state));
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock provider");
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(0));
        let counter = Arc::clone(&requests);
        std::thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let state = Arc::clone(&state);
                let counter = Arc::clone(&counter);
                std::thread::spawn(move || {
                    *counter.lock().unwrap() += 1;
                    serve(stream, &state);
                });
            }
        });
        Self { url, requests }
    }
}

fn serve(stream: TcpStream, state: &Mutex<State>) {
    let mut reader = BufReader::new(stream.try_clone().expect("clone stream"));
    let mut length = 0usize;
    let mut authorized = false;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        let lower = line.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("content-length:") {
            length = v.trim().parse().unwrap_or(0);
        }
        if lower == format!("authorization: bearer {API_KEY}") {
            authorized = true;
        }
    }
    let mut body = vec![0u8; length];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let (status, payload) = if !authorized {
        ("401 Unauthorized", json!({"error": {"message": "bad key"}}))
    } else {
        match serde_json::from_slice::<Value>(&body) {
            Ok(request) => {
                let content = reply(&request, state);
                (
                    "200 OK",
                    json!({"choices": [{"message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]}),
                )
            }
            Err(_) => ("400 Bad Request", json!({"error": {"message": "bad json"}})),
        }
    };
    let text = payload.to_string();
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
}

fn between<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.rfind(open)? + open.len();
    let end = text[start..].find(close)? + start;
    Some(&text[start..end])
}

fn reply(request: &Value, state: &Mutex<State>) -> String {
    let model = request["model"].as_str().unwrap_or_default().to_string();
    let prompt = request["messages"]
        .as_array()
        .and_then(|m| m.iter().rev().find(|x| x["role"] == "user"))
        .and_then(|m| m["content"].as_str())
        .unwrap_or_default()
        .to_string();

    if let Some(code) = between(&prompt, "<query_code>\n", "\n</query_code>") {
        let counts = keyword_counts(code);
        let object: serde_json::Map<String, Value> = counts
            .iter()
            .enumerate()
            .map(|(i, c)| (format!("K{}", i + 1), json!(c)))
            .collect();
        return Value::Object(object).to_string();
    }
    if prompt.contains("Answer with a single word: yes or no.") {
        return "Yes".into();
    }
    if let Some(ku) = between(&prompt, "## Knowledge unit\nName: ", "\n") {
        let id = between(ku, "(", ")").unwrap_or("generic");
        let path = between(&prompt, "(file `", "`)").unwrap_or("context.py");
        return synthesize(id, path, state);
    }
    solve(&model, &prompt, state)
}

/// Adapts the embedded format example for `ku` to one context file by
/// renaming its function, so each context yields a distinct task.
fn synthesize(ku: &str, path: &str, state: &Mutex<State>) -> String {
    let examples = all_format_examples();
    let example = examples.get(ku).or_else(|| examples.get("generic")).expect("example");
    let mut task = serde_json::to_value(example).unwrap();
    let entry = example.entry_point().expect("example entry point");
    let stem: String = Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    let renamed = format!("{entry}_{stem}");
    let rename = |s: &str| s.replace(&format!("{entry}("), &format!("{renamed}("));
    task["task_name"] = json!(format!("{}_{stem}", example.task_name));
    task["signature"] = json!(rename(&example.signature));
    task["description"] = json!(format!(
        "{} The scenario follows the code in {path}.",
        example.description
    ));
    task["solution"] = json!(rename(&example.solution));
    for case in task["test_cases"].as_array_mut().unwrap() {
        let call = rename(case["call"].as_str().unwrap());
        case["call"] = json!(call);
    }
    let mut st = state.lock().unwrap();
    st.solutions.insert(renamed.clone(), rename(&example.solution));
    st.synthesized.push(renamed);
    format!("```json\n{}\n```", serde_json::to_string_pretty(&task).unwrap())
}

/// The strong model misses one sample in five on original tasks and two in
/// five on synthesized ones; the weak model solves three in five originals
/// and one in five synthesized tasks.
fn solve(model: &str, prompt: &str, state: &Mutex<State>) -> String {
    let mut st = state.lock().unwrap();
    let entry = st
        .solutions
        .keys()
        .filter(|e| prompt.contains(&format!("def {e}(")))
        .max_by_key(|e| e.len())
        .cloned();
    let Some(entry) = entry else {
        return "I cannot tell which function to write.".into();
    };
    let synthesized = st.synthesized.contains(&entry);
    let slot = st.samples.entry((model.to_string(), entry.clone())).or_insert(0);
    let i = *slot;
    *slot += 1;
    let correct = match (model == STRONG, synthesized) {
        (true, false) => i % 5 != 4,
        (true, true) => i % 5 < 3,
        (false, false) => i % 5 < 3,
        (false, true) => i.is_multiple_of(5),
    };
    let code = if correct {
        st.solutions[&entry].clone()
    } else {
        format!("def {entry}(*args, **kwargs):\n    return None\n")
    };
    format!("Here is the implementation.\n\n```python\n{}\n```\n", code.trim_end())
}

// ---------------------------------------------------------------------------
// Pipeline driver
// ---------------------------------------------------------------------------

pub enum Mode<'a> {
    /// Live calls against `url`, writing gateway fixtures and verdicts.
    Record { url: &'a str },
    /// Committed fixtures and verdicts only.
    Replay,
}

pub fn kubench(args: &[String], cwd: &Path) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(cwd)
        .env("KUBENCH_API_KEY", API_KEY)
        .env_remove("RUST_LOG")
        .output()
        .expect("kubench runs")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Runs detect → coverage → gap-report → synthesize (2 KUs × quota 2) →
/// augment → evaluate (2 models, original and augmented) → compare → report.
pub fn run_pipeline(out: &Path, mode: Mode<'_>) -> Vec<(String, Output)> {
    let fx = pipeline_dir();
    let he = fx.join("HumanEval-mini.jsonl");
    let mbpp = fx.join("MBPP-mini.jsonl");
    let o = |name: &str| s(&out.join(name));
    let mut global = vec![
        "--out-dir".to_string(),
        s(out),
        "--fixtures".into(),
        s(&fx.join("responses")),
    ];
    match mode {
        // Later steps repeat earlier requests (the augmented set re-asks the
        // original tasks); reusing the first recording keeps replay faithful.
        Mode::Record { url } => global.extend([
            "--gateway".into(),
            "replay-or-record".into(),
            "--provider-url".into(),
            url.to_string(),
            "--record-verdicts".into(),
            s(&fx.join("verdicts.json")),
        ]),
        Mode::Replay => global.extend([
            "--gateway".into(),
            "replay".into(),
            "--verdicts".into(),
            s(&fx.join("verdicts.json")),
        ]),
    }
    let he_input = |name: &str| {
        vec![
            "--benchmark".to_string(),
            s(&he),
            "--format".into(),
            "humaneval-jsonl".into(),
            "--name".into(),
            name.into(),
        ]
    };

    let mut steps: Vec<(String, Vec<String>)> = Vec::new();
    steps.push((
        "detect HumanEval".into(),
        [vec!["detect".into()], he_input("HumanEval")].concat(),
    ));
    steps.push((
        "detect MBPP".into(),
        vec![
            "detect".into(),
            "--benchmark".into(),
            s(&mbpp),
            "--format".into(),
            "mbpp-jsonl".into(),
            "--name".into(),
            "MBPP".into(),
        ],
    ));
    for (project, category) in PROJECTS {
        steps.push((
            format!("detect {project}"),
            vec![
                "detect".into(),
                "--project".into(),
                s(&fx.join("projects").join(project)),
                "--category".into(),
                category.into(),
                "--name".into(),
                project.into(),
            ],
        ));
    }
    let corpus: Vec<String> = PROJECTS
        .iter()
        .flat_map(|(p, _)| ["--corpus".to_string(), o(&format!("vectors-{p}.jsonl"))])
        .collect();
    steps.push((
        "coverage".into(),
        [
            vec![
                "coverage".into(),
                "--dataset".into(),
                format!("HumanEval={}", o("vectors-HumanEval.jsonl")),
                "--dataset".into(),
                format!("MBPP={}", o("vectors-MBPP.jsonl")),
            ],
            corpus.clone(),
        ]
        .concat(),
    ));
    steps.push((
        "gap-report".into(),
        vec!["gap-report".into(), "--coverage".into(), o("coverage.json")],
    ));
    steps.push((
        "synthesize".into(),
        [
            vec!["synthesize".into()],
            he_input("HumanEval"),
            vec![
                "--benchmark-vectors".into(),
                o("vectors-HumanEval.jsonl"),
                "--coverage".into(),
                o("coverage.json"),
            ],
            corpus,
            [
                "--ku",
                "K9",
                "--ku",
                "K10",
                "--quota",
                "2",
                "--max-iterations",
                "1",
                "--convergence",
                "jsd-threshold",
                "--jsd-epsilon",
                "0.01",
            ]
            .map(String::from)
            .to_vec(),
        ]
        .concat(),
    ));
    steps.push((
        "augment".into(),
        [
            vec!["augment".into()],
            he_input("HumanEval"),
            vec![
                "--tasks".into(),
                o("NewKUTasks.json"),
                "--augmented-name".into(),
                "HumanEval-KU".into(),
                "--benchmark-vectors".into(),
                o("vectors-HumanEval.jsonl"),
                "--task-vectors".into(),
                o("vectors-NewKUTasks.jsonl"),
                "--coverage".into(),
                o("coverage.json"),
            ],
        ]
        .concat(),
    ));
    let models = ["--model", STRONG, "--model", WEAK, "--n", "5", "--k", "1,3,5"]
        .map(String::from)
        .to_vec();
    steps.push((
        "evaluate HumanEval".into(),
        [vec!["evaluate".into()], he_input("HumanEval"), models.clone()].concat(),
    ));
    steps.push((
        "evaluate HumanEval-KU".into(),
        [
            vec!["evaluate".into(), "--benchmark".into(), o("HumanEval-KU.json")],
            models,
        ]
        .concat(),
    ));
    steps.push((
        "compare".into(),
        vec![
            "compare".into(),
            "--original".into(),
            o(&format!("eval-HumanEval--{STRONG}.json")),
            "--original".into(),
            o(&format!("eval-HumanEval--{WEAK}.json")),
            "--augmented".into(),
            o(&format!("eval-HumanEval-KU--{STRONG}.json")),
            "--augmented".into(),
            o(&format!("eval-HumanEval-KU--{WEAK}.json")),
        ],
    ));
    steps.push(("report".into(), vec!["report".into()]));

    let mut outputs = Vec::new();
    for (label, args) in steps {
        let output = kubench(&[args, global.clone()].concat(), &fx);
        assert!(
            output.status.success(),
            "step `{label}` failed ({}):\n{}",
            output.status,
            String::from_utf8_lossy(&output.stderr)
        );
        outputs.push((label, output));
    }
    outputs
}

/// Every non-manifest file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = walkdir(dir)
        .into_iter()
        .filter(|p| !p.file_name().unwrap().to_string_lossy().starts_with("manifest-"))
        .map(|p| {
            (
                p.strip_prefix(dir).unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

/// Names of artifacts that differ between two snapshots, or exist in one only.
pub fn differing(a: &[(String, Vec<u8>)], b: &[(String, Vec<u8>)]) -> Vec<String> {
    let left: std::collections::BTreeMap<_, _> = a.iter().map(|(k, v)| (k, v)).collect();
    let right: std::collections::BTreeMap<_, _> = b.iter().map(|(k, v)| (k, v)).collect();
    let mut names: Vec<String> = left.keys().chain(right.keys()).map(|k| k.to_string()).collect();
    names.sort();
    names.dedup();
    names.retain(|n| left.get(n) != right.get(n));
    names
}

fn walkdir(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap().flatten() {
        let p = entry.path();
        if p.is_dir() {
            out.extend(walkdir(&p));
        } else {
            out.push(p);
        }
    }
    out
}
