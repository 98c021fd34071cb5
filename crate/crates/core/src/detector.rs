//! KU detection: prompt construction, model invocation and response parsing.
//!
//! The prompt has four parts: a `# Context` block listing every KU and its
//! capabilities between `[py-kus]` tags, an `# Instruction` block asking for
//! per-capability counts summed per KU, two worked `Input:`/`Output:`
//! examples, and the query code followed by `Output: ?`.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::catalog::{Catalog, KuId};
use crate::gateway::{ChatRequest, Gateway, GatewayError, Message, Role};
use crate::ingestion::{SourceFileRecord, TaskRecord};

/// Temperature used for detection calls unless explicitly overridden.
pub const DETECTION_TEMPERATURE: f64 = 0.2;
/// Prompts sent per gateway wave.
pub const DEFAULT_BATCH_SIZE: usize = 200;

pub const CONTEXT_OPEN: &str = "[py-kus]";
pub const CONTEXT_CLOSE: &str = "[/py-kus]";
pub const QUERY_OPEN: &str = "<query_code>";
pub const QUERY_CLOSE: &str = "</query_code>";

const FORMAT_REMINDER: &str = "Your previous reply could not be parsed. Reply with exactly one JSON object \
mapping each KU name to its integer count, and nothing else.";

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("code is empty after preprocessing")]
    EmptyCode,
    #[error("code contains the reserved delimiter `{0}`")]
    DelimiterCollision(&'static str),
    #[error("no JSON object could be recovered from the response: {reason}")]
    Parse { reason: String, raw: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Per-artifact KU incidence counts, indexed by catalog position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KuVector {
    pub artifact_id: String,
    #[serde(serialize_with = "counts_to_map", deserialize_with = "counts_from_map")]
    pub counts: Vec<u64>,
}

fn counts_to_map<S: Serializer>(counts: &[u64], s: S) -> Result<S::Ok, S::Error> {
    let map: IndexMap<String, u64> = counts
        .iter()
        .enumerate()
        .map(|(i, c)| (format!("K{}", i + 1), *c))
        .collect();
    map.serialize(s)
}

fn counts_from_map<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Shape {
        List(Vec<u64>),
        Map(BTreeMap<String, u64>),
    }
    match Shape::deserialize(d)? {
        Shape::List(v) => Ok(v),
        Shape::Map(m) => {
            let mut out = Vec::new();
            for (key, count) in m {
                let id: KuId = key.parse().map_err(serde::de::Error::custom)?;
                let idx = id.number() as usize - 1;
                if out.len() <= idx {
                    out.resize(idx + 1, 0);
                }
                out[idx] = count;
            }
            Ok(out)
        }
    }
}

impl KuVector {
    pub fn zeros(artifact_id: impl Into<String>, dim: usize) -> Self {
        Self {
            artifact_id: artifact_id.into(),
            counts: vec![0; dim],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// A KU is covered by an artifact iff its count is at least one.
    pub fn covers(&self, index: usize) -> bool {
        self.counts.get(index).is_some_and(|c| *c >= 1)
    }

    /// Pads or rejects so the vector matches the catalog dimension.
    pub fn conform(&mut self, dim: usize) -> Result<(), String> {
        if self.counts.len() > dim {
            return Err(format!(
                "{}: vector has {} entries but the catalog has {dim}",
                self.artifact_id,
                self.counts.len()
            ));
        }
        self.counts.resize(dim, 0);
        Ok(())
    }

    /// Index of the largest count (lowest index on ties), if any is positive.
    pub fn dominant(&self) -> Option<usize> {
        let max = *self.counts.iter().max()?;
        if max == 0 {
            return None;
        }
        self.counts.iter().position(|c| *c == max)
    }
}

/// One line of a vectors JSONL file: the vector plus, optionally, the
/// artifact it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorRecord {
    #[serde(flatten)]
    pub vector: KuVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SourceFileRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FewShotExample {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DetectionPrompt {
    pub context_block: String,
    pub instruction_block: String,
    pub few_shot_examples: Vec<FewShotExample>,
    pub query_code: String,
}

impl DetectionPrompt {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("# Context\n");
        out.push_str(&self.context_block);
        out.push_str("\n\n# Instruction\n");
        out.push_str(&self.instruction_block);
        out.push_str("\n\n# Few shot examples\n");
        for ex in &self.few_shot_examples {
            out.push_str("Input:\n```python\n");
            out.push_str(ex.input.trim_end());
            out.push_str("\n```\nOutput:\n");
            out.push_str(&ex.output);
            out.push_str("\n\n");
        }
        out.push_str(QUERY_OPEN);
        out.push('\n');
        out.push_str(self.query_code.trim_end());
        out.push('\n');
        out.push_str(QUERY_CLOSE);
        out.push_str("\nOutput: ?\n");
        out
    }
}

// Two hand-written worked examples. Counts are per capability occurrence,
// summed per KU; every KU is listed so the model sees the full schema.
const EXAMPLE_ONE: &str = "def count_evens(numbers):
    total = 0
    for n in numbers:
        if n % 2 == 0:
            total += 1
    return total
";

const EXAMPLE_TWO: &str = "import json

def load_config(path):
    try:
        with open(path) as handle:
            return json.load(handle)
    except FileNotFoundError:
        return None
";

fn example_counts(catalog: &Catalog, present: &[(&str, u64)]) -> String {
    let mut map: IndexMap<String, u64> = catalog.units().iter().map(|u| (u.name.clone(), 0)).collect();
    for (id, count) in present {
        let id: KuId = id.parse().expect("static id");
        if let Ok(unit) = catalog.get(&id) {
            map.insert(unit.name.clone(), *count);
        }
    }
    serde_json::to_string(&map).expect("map serializes")
}

fn few_shot_examples(catalog: &Catalog) -> Vec<FewShotExample> {
    vec![
        FewShotExample {
            input: EXAMPLE_ONE.to_string(),
            // Variable: assignment + numeric literal; Operators: %, ==, +=;
            // Condition: if; Loop: iteration over a list; Function: def,
            // parameter, return.
            output: example_counts(catalog, &[("K1", 2), ("K2", 3), ("K3", 1), ("K4", 1), ("K5", 3)]),
        },
        FewShotExample {
            input: EXAMPLE_TWO.to_string(),
            // Variable: None; Function: def, parameter, two returns; File
            // Handling: open; Exception Handling: try/except; Context
            // Managers: with; Serialization: json.load.
            output: example_counts(
                catalog,
                &[("K1", 1), ("K5", 4), ("K8", 1), ("K10", 1), ("K14", 1), ("K19", 1)],
            ),
        },
    ]
}

fn context_block(catalog: &Catalog) -> String {
    let mut out = String::from(
        "You are an expert at analysing programs. A knowledge unit (KU) is a cohesive set of key \
capabilities offered by the constructs and APIs of a programming language. You are familiar with the \
following KUs of the Python programming language, delimited by [py-kus] tags. Each line gives a KU name \
followed by its capabilities, separated by commas.\n",
    );
    out.push_str(CONTEXT_OPEN);
    out.push('\n');
    for unit in catalog.units() {
        let caps: Vec<String> = unit
            .capabilities
            .iter()
            .map(|c| format!("[{}] {}", c.id, c.description))
            .collect();
        out.push_str(&format!("{} {}: {}\n", unit.id, unit.name, caps.join(", ")));
    }
    out.push_str(CONTEXT_CLOSE);
    out
}

const INSTRUCTION: &str = "Detect every instance of the KUs listed inside the [py-kus] tags in the query code. \
For each KU, count how many times each of its capabilities occurs in the code, then add those counts to \
obtain the KU's total number of instances. Answer with a single JSON object whose keys are the KU names and \
whose values are the totals; use 0 for KUs that do not occur. Do not add any explanation.";

/// Builds the detection prompt for `code`.
pub fn build_prompt(code: &str, catalog: &Catalog) -> Result<DetectionPrompt, DetectError> {
    if code.trim().is_empty() {
        return Err(DetectError::EmptyCode);
    }
    for delim in [CONTEXT_OPEN, CONTEXT_CLOSE, QUERY_OPEN, QUERY_CLOSE] {
        if code.contains(delim) {
            return Err(DetectError::DelimiterCollision(delim));
        }
    }
    Ok(DetectionPrompt {
        context_block: context_block(catalog),
        instruction_block: INSTRUCTION.to_string(),
        few_shot_examples: few_shot_examples(catalog),
        query_code: code.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParsedDetection {
    pub vector: KuVector,
    pub warnings: Vec<String>,
}

/// Removes ``` fences, keeping the body of the first fenced block if any.
/// Leading indentation of the first code line is preserved.
pub fn strip_fences(text: &str) -> &str {
    let body = match text.find("```") {
        None => text,
        Some(start) => {
            let after = &text[start + 3..];
            // Skip an info string such as `json` or `python`.
            let body_start = after.find('\n').map_or(after.len(), |n| n + 1);
            let body = &after[body_start..];
            &body[..body.find("```").unwrap_or(body.len())]
        }
    };
    trim_blank_lines(body)
}

fn trim_blank_lines(text: &str) -> &str {
    let mut start = 0;
    for line in text.split_inclusive('\n') {
        if line.trim().is_empty() {
            start += line.len();
        } else {
            break;
        }
    }
    text[start..].trim_end()
}

/// First JSON object found scanning from each `{` in `text`.
pub(crate) fn first_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    for (i, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}

fn numeric(value: &Value, context: &str, warnings: &mut Vec<String>) -> Option<i64> {
    let n = match value {
        Value::Number(n) => n.as_f64()?,
        Value::String(s) => s.trim().parse::<f64>().ok()?,
        Value::Null => 0.0,
        _ => return None,
    };
    if !n.is_finite() {
        return None;
    }
    if n.fract() != 0.0 {
        warnings.push(format!("{context}: non-integer count {n} truncated"));
    }
    Some(n.trunc() as i64)
}

fn clamp(n: i64, context: &str, warnings: &mut Vec<String>) -> u64 {
    if n < 0 {
        warnings.push(format!("{context}: negative count {n} clamped to 0"));
        0
    } else {
        n as u64
    }
}

/// Sums a `{capability: count}` object, checking an explicit total if the
/// response also provides one.
fn capability_sum(name: &str, map: &serde_json::Map<String, Value>, warnings: &mut Vec<String>) -> u64 {
    let mut sum = 0u64;
    let mut stated_total = None;
    for (key, value) in map {
        let ctx = format!("{name}.{key}");
        let lowered = key.trim().to_ascii_lowercase();
        match numeric(value, &ctx, warnings) {
            Some(n) if lowered == "total" || lowered == "count" => stated_total = Some(clamp(n, &ctx, warnings)),
            Some(n) => sum += clamp(n, &ctx, warnings),
            None => warnings.push(format!("{ctx}: non-numeric value ignored")),
        }
    }
    match stated_total {
        Some(total) if sum == 0 && map.len() == 1 => total,
        Some(total) if total != sum => {
            warnings.push(format!(
                "{name}: capability counts sum to {sum} but total says {total}; using {sum}"
            ));
            sum
        }
        _ => sum,
    }
}

fn resolve<'c>(catalog: &'c Catalog, key: &str) -> Option<&'c crate::catalog::KnowledgeUnit> {
    if let Some(u) = catalog.find(key) {
        return Some(u);
    }
    // Keys such as "K9: OOP" or "OOP (K9)".
    key.split([':', '(', ')', '-'])
        .map(str::trim)
        .filter(|part| !part.is_empty())
        .find_map(|part| catalog.find(part))
}

/// Parses a model reply into a KU vector for `artifact_id`.
pub fn parse_response(text: &str, catalog: &Catalog, artifact_id: &str) -> Result<ParsedDetection, DetectError> {
    let body = strip_fences(text);
    let mut object = first_object(body)
        .or_else(|| first_object(text))
        .ok_or_else(|| DetectError::Parse {
            reason: "no JSON object found".into(),
            raw: text.to_string(),
        })?;
    let mut warnings = Vec::new();

    // Unwrap a single wrapper key such as {"kus": {...}}.
    if object.len() == 1 {
        let (key, value) = object.iter().next().expect("one entry");
        if resolve(catalog, key).is_none() {
            if let Value::Object(inner) = value {
                object = inner.clone();
            }
        }
    }

    let mut vector = KuVector::zeros(artifact_id, catalog.len());
    for (key, value) in &object {
        let Some(unit) = resolve(catalog, key) else {
            warnings.push(format!("unknown KU `{key}` ignored"));
            continue;
        };
        let idx = catalog.ku_index(&unit.id).expect("unit from catalog");
        let count = match value {
            Value::Object(caps) => capability_sum(&unit.name, caps, &mut warnings),
            other => match numeric(other, &unit.name, &mut warnings) {
                Some(n) => clamp(n, &unit.name, &mut warnings),
                None => {
                    warnings.push(format!("{}: unusable value {other} treated as 0", unit.name));
                    0
                }
            },
        };
        vector.counts[idx] += count;
    }
    for w in &warnings {
        log::warn!("{artifact_id}: {w}");
    }
    Ok(ParsedDetection { vector, warnings })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub model: String,
    pub temperature: f64,
    pub batch_size: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            model: "gpt-4o-mini".into(),
            temperature: DETECTION_TEMPERATURE,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Detection {
    pub vector: KuVector,
    pub warnings: Vec<String>,
    /// 1, or 2 if the reply needed a format-reminder retry.
    pub attempts: u32,
}

pub struct Detector<'a> {
    gateway: &'a Gateway,
    catalog: &'a Catalog,
    config: DetectorConfig,
}

impl<'a> Detector<'a> {
    pub fn new(gateway: &'a Gateway, catalog: &'a Catalog, config: DetectorConfig) -> Self {
        Self {
            gateway,
            catalog,
            config,
        }
    }

    pub fn catalog(&self) -> &Catalog {
        self.catalog
    }

    fn first_request(&self, artifact_id: &str, code: &str) -> Result<ChatRequest, DetectError> {
        let prompt = build_prompt(code, self.catalog)?;
        Ok(ChatRequest::new(
            &self.config.model,
            self.config.temperature,
            vec![Message::user(prompt.render())],
            format!("detect/{artifact_id}"),
        )?)
    }

    fn retry_request(&self, first: &ChatRequest, reply: &str) -> ChatRequest {
        let mut messages = first.messages.clone();
        messages.push(Message {
            role: Role::Assistant,
            content: reply.to_string(),
        });
        messages.push(Message::user(FORMAT_REMINDER));
        ChatRequest {
            messages,
            request_tag: format!("{}/retry", first.request_tag),
            ..first.clone()
        }
    }

    pub fn detect(&self, artifact_id: &str, code: &str) -> Result<Detection, DetectError> {
        self.detect_batch(&[(artifact_id.to_string(), code.to_string())])
            .pop()
            .expect("one result")
    }

    /// Detects many artifacts, sending prompts in waves of the configured
    /// batch size. Each slot fails independently.
    pub fn detect_batch(&self, items: &[(String, String)]) -> Vec<Result<Detection, DetectError>> {
        let mut results: Vec<Option<Result<Detection, DetectError>>> = (0..items.len()).map(|_| None).collect();
        let mut pending = Vec::new();
        let mut requests = Vec::new();
        for (i, (id, code)) in items.iter().enumerate() {
            match self.first_request(id, code) {
                Ok(req) => {
                    pending.push(i);
                    requests.push(req);
                }
                Err(e) => results[i] = Some(Err(e)),
            }
        }
        let replies = self.gateway.complete_batch(&requests, self.config.batch_size);

        let mut retry_slots = Vec::new();
        let mut retry_requests = Vec::new();
        for ((slot, req), reply) in pending.iter().zip(&requests).zip(replies) {
            let id = &items[*slot].0;
            match reply {
                Err(e) => results[*slot] = Some(Err(e.into())),
                Ok(resp) => match parse_response(&resp.content, self.catalog, id) {
                    Ok(parsed) => {
                        results[*slot] = Some(Ok(Detection {
                            vector: parsed.vector,
                            warnings: parsed.warnings,
                            attempts: 1,
                        }))
                    }
                    Err(_) => {
                        retry_slots.push(*slot);
                        retry_requests.push(self.retry_request(req, &resp.content));
                    }
                },
            }
        }
        let retried = self.gateway.complete_batch(&retry_requests, self.config.batch_size);
        for (slot, reply) in retry_slots.into_iter().zip(retried) {
            let id = &items[slot].0;
            results[slot] = Some(match reply {
                Err(e) => Err(e.into()),
                Ok(resp) => parse_response(&resp.content, self.catalog, id).map(|parsed| Detection {
                    vector: parsed.vector,
                    warnings: parsed.warnings,
                    attempts: 2,
                }),
            });
        }
        results.into_iter().map(|r| r.expect("every slot filled")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog() -> Catalog {
        Catalog::embedded()
    }

    #[test]
    fn prompt_lists_every_ku_and_two_examples() {
        let cat = catalog();
        let text = build_prompt("x = 1\n", &cat).unwrap().render();
        for unit in cat.units() {
            assert!(text.contains(&unit.name), "{} missing", unit.name);
        }
        assert_eq!(text.lines().filter(|l| *l == "Input:").count(), 2);
        assert_eq!(text.lines().filter(|l| *l == "Output:").count(), 2);
        assert!(text.trim_end().ends_with("Output: ?"));
        assert!(text.contains("# Context") && text.contains("# Instruction") && text.contains("# Few shot examples"));
        assert_eq!(text.lines().filter(|l| *l == CONTEXT_OPEN).count(), 1);
        assert_eq!(text.lines().filter(|l| *l == CONTEXT_CLOSE).count(), 1);
    }

    #[test]
    fn few_shot_outputs_parse_back() {
        let cat = catalog();
        for ex in few_shot_examples(&cat) {
            let parsed = parse_response(&ex.output, &cat, "ex").unwrap();
            assert!(parsed.warnings.is_empty());
            assert!(parsed.vector.total() > 0);
        }
    }

    #[test]
    fn prompt_preconditions() {
        let cat = catalog();
        assert!(matches!(build_prompt("  \n", &cat), Err(DetectError::EmptyCode)));
        assert!(matches!(
            build_prompt("s = '[py-kus]'", &cat),
            Err(DetectError::DelimiterCollision("[py-kus]"))
        ));
        assert!(matches!(
            build_prompt("s = '[/py-kus]'", &cat),
            Err(DetectError::DelimiterCollision("[/py-kus]"))
        ));
    }

    #[test]
    fn capability_counts_sum() {
        let cat = catalog();
        let p = parse_response(r#"{"Concurrency":{"C1":1,"C3":2,"C4":1}}"#, &cat, "a").unwrap();
        assert_eq!(p.vector.counts[15], 4);
        assert_eq!(p.vector.total(), 4);
    }

    #[test]
    fn empty_object_is_zero_vector() {
        let p = parse_response("{}", &catalog(), "a").unwrap();
        assert_eq!(p.vector.counts, vec![0; 20]);
    }

    #[test]
    fn fences_prose_and_names_are_tolerated() {
        let cat = catalog();
        let text = "Here is the analysis:\n```json\n{\"loops\": 2, \"exception  handling\": {\"C1\": 1, \"total\": 1}, \"K9\": 3, \"OOP\": 1}\n```\nThanks!";
        let p = parse_response(text, &cat, "a").unwrap();
        assert_eq!(p.vector.counts[3], 2);
        assert_eq!(p.vector.counts[9], 1);
        assert_eq!(p.vector.counts[8], 4);
    }

    #[test]
    fn junk_keys_and_negatives_warn() {
        let cat = catalog();
        let p = parse_response(r#"{"Quantum Teleportation": 5, "Loop": -2, "Function": 1}"#, &cat, "a").unwrap();
        assert_eq!(p.vector.total(), 1);
        assert_eq!(p.warnings.len(), 2);
        assert!(p.warnings.iter().any(|w| w.contains("Quantum")));
        assert!(p.warnings.iter().any(|w| w.contains("clamped")));
    }

    #[test]
    fn total_mismatch_uses_capability_sum() {
        let p = parse_response(r#"{"Loop": {"C1": 1, "C2": 2, "total": 5}}"#, &catalog(), "a").unwrap();
        assert_eq!(p.vector.counts[3], 3);
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn wrapper_object_is_unwrapped() {
        let p = parse_response(r#"{"kus": {"Loop": 2}}"#, &catalog(), "a").unwrap();
        assert_eq!(p.vector.counts[3], 2);
    }

    #[test]
    fn unparseable_reply_carries_raw_text() {
        match parse_response("I cannot help with that.", &catalog(), "a") {
            Err(DetectError::Parse { raw, .. }) => assert_eq!(raw, "I cannot help with that."),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn vector_serializes_by_ku_id() {
        let mut v = KuVector::zeros("t/1", 3);
        v.counts[2] = 4;
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"{"artifact_id":"t/1","counts":{"K1":0,"K2":0,"K3":4}}"#);
        let back: KuVector = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        let sparse: KuVector = serde_json::from_str(r#"{"artifact_id":"x","counts":{"K2":1}}"#).unwrap();
        assert_eq!(sparse.counts, vec![0, 1]);
    }

    #[test]
    fn dominant_index() {
        let v = KuVector {
            artifact_id: "a".into(),
            counts: vec![1, 3, 3],
        };
        assert_eq!(v.dominant(), Some(1));
        assert_eq!(KuVector::zeros("z", 3).dominant(), None);
    }
}
