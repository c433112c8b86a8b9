//! Class-level semantic neighbor graphs built by batched LLM prompting.
//!
//! The vocabulary is split into batches; each batch gets one prompt listing the
//! whole vocabulary as the candidate set. Responses are parsed leniently, merged,
//! and filtered down to a graph over class indices.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::error::{Error, Result};

pub const DEFAULT_BATCH_SIZE: usize = 20;
pub const DEFAULT_MAX_NEIGHBORS: usize = 5;
/// Environment variable holding the live provider's credential.
pub const API_KEY_ENV: &str = "CUE_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct GraphMeta {
    pub provider: String,
    pub model_id: String,
    pub batch_size: usize,
    pub max_neighbors: usize,
    /// Unix seconds.
    pub created_at: u64,
}

/// Per-class neighbor lists. Lists are sorted, duplicate-free, in range, and never
/// contain their own class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborGraph {
    pub classes: Vec<String>,
    pub neighbors: Vec<Vec<usize>>,
    pub meta: GraphMeta,
}

impl NeighborGraph {
    pub fn new(classes: Vec<String>, neighbors: Vec<Vec<usize>>, meta: GraphMeta) -> Result<Self> {
        let graph = Self {
            classes,
            neighbors,
            meta,
        };
        graph.validate()?;
        Ok(graph)
    }

    /// A graph with no edges.
    pub fn empty(classes: Vec<String>) -> Self {
        let neighbors = vec![Vec::new(); classes.len()];
        Self {
            classes,
            neighbors,
            meta: GraphMeta::default(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn of(&self, class: usize) -> &[usize] {
        &self.neighbors[class]
    }

    pub fn contains(&self, class: usize, other: usize) -> bool {
        self.neighbors[class].binary_search(&other).is_ok()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.neighbors.len();
        if !self.classes.is_empty() && self.classes.len() != c {
            return Err(Error::Validation(format!(
                "graph names {} classes but has {c} neighbor lists",
                self.classes.len()
            )));
        }
        for (class, list) in self.neighbors.iter().enumerate() {
            if list.contains(&class) {
                return Err(Error::Validation(format!("class {class} lists itself as a neighbor")));
            }
            if let Some(&bad) = list.iter().find(|&&n| n >= c) {
                return Err(Error::Validation(format!("class {class} has out-of-range neighbor {bad}")));
            }
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Validation(format!("neighbors of class {class} are not sorted and unique")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let graph: Self = crate::io::read_json(path)?;
        graph.validate()?;
        Ok(graph)
    }
}

/// One provider response: the raw text plus whatever mapping could be recovered from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawLlmResponse {
    pub text: String,
    /// `(class name, neighbor names)` pairs in the order the parser met them.
    pub parsed: Vec<(String, Vec<String>)>,
    pub parse_failed: bool,
}

impl RawLlmResponse {
    pub fn parse(text: impl Into<String>) -> Self {
        let text = text.into();
        match first_json_object(&text) {
            Some(Value::Object(map)) => {
                let parsed = map
                    .into_iter()
                    .map(|(k, v)| {
                        let names = match v {
                            Value::Array(items) => items
                                .into_iter()
                                .filter_map(|i| match i {
                                    Value::String(s) => Some(s),
                                    _ => None,
                                })
                                .collect(),
                            Value::String(s) => vec![s],
                            _ => Vec::new(),
                        };
                        (k, names)
                    })
                    .collect();
                Self {
                    text,
                    parsed,
                    parse_failed: false,
                }
            }
            _ => Self {
                text,
                parsed: Vec::new(),
                parse_failed: true,
            },
        }
    }
}

/// Finds the first balanced `{...}` span that parses as JSON.
fn first_json_object(text: &str) -> Option<Value> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(offset) = text[start..].find('{') {
        let open = start + offset;
        if let Some(close) = matching_brace(bytes, open) {
            if let Ok(v @ Value::Object(_)) = serde_json::from_str(&text[open..=close]) {
                return Some(v);
            }
        }
        start = open + 1;
    }
    None
}

fn matching_brace(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Consecutive, order-preserving batches of at most `batch_size` names.
pub fn batch_labels(class_names: &[String], batch_size: usize) -> Result<Vec<&[String]>> {
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be at least 1".into()));
    }
    Ok(class_names.chunks(batch_size).collect())
}

pub fn render_prompt(batch: &[String], vocabulary: &[String], max_neighbors: usize) -> Result<String> {
    if batch.is_empty() {
        return Err(Error::Validation("cannot render a prompt for an empty batch".into()));
    }
    if let Some(missing) = batch.iter().find(|b| !vocabulary.contains(b)) {
        return Err(Error::Validation(format!("batch class {missing:?} is not in the vocabulary")));
    }
    let list = |names: &[String]| names.iter().map(|n| format!("- {n}\n")).collect::<String>();
    let example_key = json!(batch[0]).to_string();
    Ok(format!(
        "You are annotating semantic neighbors for the label set of an image classification task.\n\
         \n\
         Candidate vocabulary ({vocab_len} classes):\n\
         {vocab}\
         \n\
         Target classes ({batch_len}):\n\
         {targets}\
         \n\
         For each target class, name up to {max_neighbors} classes that are semantically closest to it \
         and most likely to be confused with it. The candidate vocabulary is the only allowed set: \
         select semantic neighbors strictly from it, spelled exactly as listed. \
         Never list a target class as its own neighbor.\n\
         \n\
         Respond with exactly one JSON object and no other text. Each key is a target class name and \
         each value is an array of neighbor names, closest first, for example {{{example_key}: [...]}}.\n",
        vocab_len = vocabulary.len(),
        vocab = list(vocabulary),
        batch_len = batch.len(),
        targets = list(batch),
    ))
}

/// SHA-256 of the prompt text; the fixture file name.
pub fn prompt_hash(prompt: &str) -> String {
    crate::io::sha256_hex(prompt.as_bytes())
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("no fixture for prompt {hash} in {}", dir.display())]
    MissingFixture { hash: String, dir: PathBuf },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: usize, last: String },
    #[error("malformed provider payload: {0}")]
    MalformedPayload(String),
    #[error("provider returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("provider misconfigured: {0}")]
    Config(String),
    #[error("fixture i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ProviderError {
    pub fn kind(&self) -> &'static str {
        match self {
            ProviderError::MissingFixture { .. } => "missing_fixture",
            ProviderError::RetriesExhausted { .. } => "retries_exhausted",
            ProviderError::MalformedPayload(_) => "malformed_payload",
            ProviderError::Http { .. } => "http_status",
            ProviderError::Config(_) => "provider_config",
            ProviderError::Io { .. } => "fixture_io",
        }
    }
}

/// Anything that turns a prompt into response text.
pub trait Provider: Sync {
    fn name(&self) -> &str;
    fn model_id(&self) -> &str;
    fn complete(&self, prompt: &str) -> std::result::Result<String, ProviderError>;
}

pub fn query_provider(prompt: &str, provider: &dyn Provider) -> std::result::Result<RawLlmResponse, ProviderError> {
    provider.complete(prompt).map(RawLlmResponse::parse)
}

/// Canned responses stored as `<prompt_hash>.txt` in a directory.
#[derive(Debug, Clone)]
pub struct FixtureProvider {
    dir: PathBuf,
    model_id: String,
}

impl FixtureProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            model_id: "fixture".into(),
        }
    }

    pub fn path_for(&self, prompt: &str) -> PathBuf {
        self.dir.join(format!("{}.txt", prompt_hash(prompt)))
    }

    /// Stores `response` as the canned answer to `prompt`.
    pub fn record(&self, prompt: &str, response: &str) -> std::result::Result<PathBuf, ProviderError> {
        let path = self.path_for(prompt);
        fs::create_dir_all(&self.dir)
            .and_then(|_| fs::write(&path, response))
            .map_err(|source| ProviderError::Io {
                path: path.clone(),
                source,
            })?;
        Ok(path)
    }
}

impl Provider for FixtureProvider {
    fn name(&self) -> &str {
        "fixture"
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, prompt: &str) -> std::result::Result<String, ProviderError> {
        let path = self.path_for(prompt);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(ProviderError::MissingFixture {
                hash: prompt_hash(prompt),
                dir: self.dir.clone(),
            }),
            Err(source) => Err(ProviderError::Io { path, source }),
        }
    }
}

/// Outcome of a single HTTP exchange.
pub enum TransportOutcome {
    Response { status: u16, body: String },
    /// Connection-level failure (refused, reset, timed out).
    Failed(String),
}

pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, body: &Value, bearer: Option<&str>) -> TransportOutcome;
}

/// Blocking `reqwest` transport.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> std::result::Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Config(e.to_string()))?;
        Ok(Self { client })
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, url: &str, body: &Value, bearer: Option<&str>) -> TransportOutcome {
        let mut req = self.client.post(url).json(body);
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        match req.send() {
            Ok(resp) => {
                let status = resp.status().as_u16();
                match resp.text() {
                    Ok(body) => TransportOutcome::Response { status, body },
                    Err(e) => TransportOutcome::Failed(e.to_string()),
                }
            }
            Err(e) => TransportOutcome::Failed(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
}

fn default_retries() -> usize {
    3
}

fn default_backoff_ms() -> u64 {
    500
}

fn default_timeout_s() -> u64 {
    120
}

/// HTTP provider posting `{model, prompt, temperature: 0}`.
pub struct LiveProvider {
    config: LiveConfig,
    api_key: Option<String>,
    transport: Box<dyn Transport>,
}

impl LiveProvider {
    /// Reads the credential from [`API_KEY_ENV`].
    pub fn from_env(config: LiveConfig) -> std::result::Result<Self, ProviderError> {
        let transport = HttpTransport::new(Duration::from_secs(config.timeout_s))?;
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Ok(Self::with_transport(config, api_key, Box::new(transport)))
    }

    pub fn with_transport(config: LiveConfig, api_key: Option<String>, transport: Box<dyn Transport>) -> Self {
        Self {
            config,
            api_key,
            transport,
        }
    }

    fn backoff(&self, attempt: usize) -> Duration {
        Duration::from_millis(self.config.backoff_ms.saturating_mul(1 << attempt.min(16)))
    }
}

fn is_transient(status: u16) -> bool {
    status == 408 || status == 429 || (500..600).contains(&status)
}

/// Pulls the completion text out of the common response shapes.
pub fn extract_completion(body: &str) -> std::result::Result<String, ProviderError> {
    let value: Value =
        serde_json::from_str(body).map_err(|e| ProviderError::MalformedPayload(format!("not JSON: {e}")))?;
    const POINTERS: [&str; 7] = [
        "/response",
        "/text",
        "/output",
        "/content",
        "/choices/0/message/content",
        "/choices/0/text",
        "/content/0/text",
    ];
    POINTERS
        .iter()
        .find_map(|p| value.pointer(p).and_then(Value::as_str))
        .map(str::to_owned)
        .ok_or_else(|| ProviderError::MalformedPayload("no completion text field".into()))
}

impl Provider for LiveProvider {
    fn name(&self) -> &str {
        "live"
    }

    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, prompt: &str) -> std::result::Result<String, ProviderError> {
        let body = json!({
            "model": self.config.model,
            "prompt": prompt,
            "temperature": 0,
        });
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(self.backoff(attempt - 1));
            }
            match self
                .transport
                .post_json(&self.config.endpoint, &body, self.api_key.as_deref())
            {
                TransportOutcome::Response { status, body } if (200..300).contains(&status) => {
                    return extract_completion(&body);
                }
                TransportOutcome::Response { status, body } if is_transient(status) => {
                    log::warn!("provider returned HTTP {status} (attempt {})", attempt + 1);
                    last = format!("HTTP {status}: {body}");
                }
                TransportOutcome::Response { status, body } => {
                    return Err(ProviderError::Http { status, body });
                }
                TransportOutcome::Failed(msg) => {
                    log::warn!("provider transport failure (attempt {}): {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(ProviderError::RetriesExhausted { attempts, last })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropReason {
    Oov,
    #[serde(rename = "self")]
    SelfRef,
    Duplicate,
    Ambiguous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedEntry {
    pub class: String,
    pub dropped_name: String,
    pub reason: DropReason,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterReport {
    pub dropped: Vec<DroppedEntry>,
    /// Classes no response mentioned as a key.
    pub uncovered: Vec<String>,
    /// Neighbors cut by the per-class budget.
    pub truncated: usize,
}

impl FilterReport {
    /// Writes the dropped-entry list.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, &self.dropped)
    }
}

fn normalize(name: &str) -> String {
    name.trim().to_lowercase()
}

enum Resolved {
    Class(usize),
    Oov,
    Ambiguous,
}

struct Vocabulary {
    lookup: HashMap<String, Vec<usize>>,
}

impl Vocabulary {
    fn new(class_names: &[String]) -> Self {
        let mut lookup: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, n) in class_names.iter().enumerate() {
            lookup.entry(normalize(n)).or_default().push(i);
        }
        Self { lookup }
    }

    fn resolve(&self, name: &str) -> Resolved {
        match self.lookup.get(&normalize(name)).map(Vec::as_slice) {
            None | Some([]) => Resolved::Oov,
            Some([single]) => Resolved::Class(*single),
            Some(_) => Resolved::Ambiguous,
        }
    }
}

/// Merges parsed responses into a graph over `class_names`.
///
/// Names match case-insensitively after trimming. A name that normalizes to more than
/// one class is ambiguous and dropped. Each class keeps its first `max_neighbors`
/// accepted names in response order; the kept lists are then sorted.
pub fn filter_and_align(
    responses: &[RawLlmResponse],
    class_names: &[String],
    max_neighbors: usize,
) -> (NeighborGraph, FilterReport) {
    let vocab = Vocabulary::new(class_names);
    let mut lists: Vec<Vec<usize>> = vec![Vec::new(); class_names.len()];
    let mut covered = vec![false; class_names.len()];
    let mut report = FilterReport::default();
    let mut drop = |class: &str, name: &str, reason| {
        report.dropped.push(DroppedEntry {
            class: class.to_string(),
            dropped_name: name.to_string(),
            reason,
        })
    };

    for (key, names) in responses.iter().flat_map(|r| r.parsed.iter()) {
        let class = match vocab.resolve(key) {
            Resolved::Class(c) => c,
            Resolved::Oov => {
                drop(key, key, DropReason::Oov);
                continue;
            }
            Resolved::Ambiguous => {
                drop(key, key, DropReason::Ambiguous);
                continue;
            }
        };
        covered[class] = true;
        let class_name = &class_names[class];
        for name in names {
            match vocab.resolve(name) {
                Resolved::Oov => drop(class_name, name, DropReason::Oov),
                Resolved::Ambiguous => drop(class_name, name, DropReason::Ambiguous),
                Resolved::Class(n) if n == class => drop(class_name, name, DropReason::SelfRef),
                Resolved::Class(n) if lists[class].contains(&n) => drop(class_name, name, DropReason::Duplicate),
                Resolved::Class(n) => lists[class].push(n),
            }
        }
    }

    for list in &mut lists {
        if list.len() > max_neighbors {
            report.truncated += list.len() - max_neighbors;
            list.truncate(max_neighbors);
        }
        list.sort_unstable();
    }
    report.uncovered = class_names
        .iter()
        .zip(&covered)
        .filter(|(_, &c)| !c)
        .map(|(n, _)| n.clone())
        .collect();
    if !report.uncovered.is_empty() {
        log::warn!(
            "{} classes received no neighbors from any response",
            report.uncovered.len()
        );
    }

    let graph = NeighborGraph {
        classes: class_names.to_vec(),
        neighbors: lists,
        meta: GraphMeta {
            max_neighbors,
            ..GraphMeta::default()
        },
    };
    (graph, report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub batch_size: usize,
    pub max_neighbors: usize,
    /// Batches queried at once.
    pub concurrency: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            max_neighbors: DEFAULT_MAX_NEIGHBORS,
            concurrency: 1,
        }
    }
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub graph: NeighborGraph,
    pub report: FilterReport,
    pub responses: Vec<RawLlmResponse>,
}

/// Renders one prompt per batch, queries the provider and filters the merged answers.
pub fn build_neighbor_graph(
    class_names: &[String],
    provider: &dyn Provider,
    config: &PipelineConfig,
) -> Result<PipelineOutput> {
    let prompts = batch_labels(class_names, config.batch_size)?
        .into_iter()
        .map(|batch| render_prompt(batch, class_names, config.max_neighbors))
        .collect::<Result<Vec<_>>>()?;

    let mut responses = Vec::with_capacity(prompts.len());
    for group in prompts.chunks(config.concurrency.max(1)) {
        let results: Vec<_> = thread::scope(|s| {
            let handles: Vec<_> = group
                .iter()
                .map(|p| s.spawn(move || query_provider(p, provider)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("provider query panicked"))
                .collect()
        });
        for r in results {
            let r = r?;
            if r.parse_failed {
                log::warn!("unparseable provider response ({} bytes)", r.text.len());
            }
            responses.push(r);
        }
    }

    let (mut graph, report) = filter_and_align(&responses, class_names, config.max_neighbors);
    graph.meta = GraphMeta {
        provider: provider.name().to_string(),
        model_id: provider.model_id().to_string(),
        batch_size: config.batch_size,
        max_neighbors: config.max_neighbors,
        created_at: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    Ok(PipelineOutput {
        graph,
        report,
        responses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn parsed(text: &str) -> RawLlmResponse {
        RawLlmResponse::parse(text)
    }

    #[test]
    fn batching_examples() {
        let five = names(&["a", "b", "c", "d", "e"]);
        let sizes: Vec<usize> = batch_labels(&five, 2).unwrap().iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        assert_eq!(batch_labels(&five, 9).unwrap().len(), 1);
        let hundred: Vec<String> = (0..100).map(|i| format!("c{i}")).collect();
        let batches = batch_labels(&hundred, 25).unwrap();
        assert_eq!(batches.len(), 4);
        assert_eq!(batches.concat(), hundred);
        assert!(batch_labels(&five, 0).is_err());
    }

    #[test]
    fn prompt_properties() {
        let vocab = names(&["oak", "maple", "birch"]);
        let a = render_prompt(&vocab[1..2], &vocab, 3).unwrap();
        let b = render_prompt(&vocab[1..2], &vocab, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("select semantic neighbors strictly from it"));
        assert!(a.contains("Target classes (1):\n- maple\n"));
        assert!(a.contains("up to 3 classes"));
        assert!(render_prompt(&[], &vocab, 3).is_err());
        assert!(render_prompt(&names(&["pine"]), &vocab, 3).is_err());
    }

    #[test]
    fn parse_tolerates_prose() {
        let r = parsed("Sure! Here it is:\n```json\n{\"oak\": [\"maple\", 3, \"birch\"]}\n``` hope {this} helps");
        assert!(!r.parse_failed);
        assert_eq!(r.parsed, vec![("oak".into(), names(&["maple", "birch"]))]);
        let r = parsed("{\"a\": \"}\" } trailing");
        assert_eq!(r.parsed, vec![("a".into(), names(&["}"]))]);
        assert!(parsed("no json here {").parse_failed);
        assert!(parsed("[1, 2]").parse_failed);
    }

    #[test]
    fn filter_examples() {
        let vocab = names(&["oak", "maple", "birch"]);
        let (g, rep) = filter_and_align(&[parsed(r#"{"oak": ["maple", "granite"]}"#)], &vocab, 5);
        assert_eq!(g.of(0), &[1]);
        assert_eq!(rep.dropped[0].dropped_name, "granite");
        assert_eq!(rep.dropped[0].reason, DropReason::Oov);
        assert_eq!(rep.uncovered, names(&["maple", "birch"]));

        let (g, rep) = filter_and_align(&[parsed(r#"{"oak": ["oak", "maple", "maple"]}"#)], &vocab, 5);
        assert_eq!(g.of(0), &[1]);
        let reasons: Vec<_> = rep.dropped.iter().map(|d| d.reason).collect();
        assert_eq!(reasons, vec![DropReason::SelfRef, DropReason::Duplicate]);

        let (g, _) = filter_and_align(&[parsed(r#"{"Oak ": ["MAPLE"]}"#)], &vocab, 5);
        assert_eq!(g.of(0), &[1]);
    }

    #[test]
    fn ambiguous_and_budget() {
        let vocab = names(&["Oak", "oak ", "maple", "birch", "pine"]);
        let (g, rep) = filter_and_align(
            &[parsed(r#"{"maple": ["OAK", "pine", "birch"], "oak": ["maple"]}"#)],
            &vocab,
            1,
        );
        assert_eq!(g.of(2), &[4]);
        assert_eq!(rep.truncated, 1);
        assert!(rep.dropped.iter().filter(|d| d.reason == DropReason::Ambiguous).count() == 2);
        g.validate().unwrap();
    }

    #[test]
    fn fixture_hit_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let p = FixtureProvider::new(dir.path());
        p.record("hello", "{\"a\": []}").unwrap();
        assert_eq!(p.complete("hello").unwrap(), "{\"a\": []}");
        match p.complete("other") {
            Err(ProviderError::MissingFixture { hash, .. }) => assert_eq!(hash, prompt_hash("other")),
            other => panic!("unexpected {other:?}"),
        }
    }

    struct Scripted {
        outcomes: Vec<(u16, &'static str)>,
        calls: Arc<AtomicUsize>,
    }

    impl Transport for Scripted {
        fn post_json(&self, _url: &str, body: &Value, _bearer: Option<&str>) -> TransportOutcome {
            assert_eq!(body["temperature"], 0);
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            match self.outcomes.get(i) {
                Some((0, msg)) => TransportOutcome::Failed(msg.to_string()),
                Some((status, body)) => TransportOutcome::Response {
                    status: *status,
                    body: body.to_string(),
                },
                None => TransportOutcome::Failed("script exhausted".into()),
            }
        }
    }

    fn live(outcomes: Vec<(u16, &'static str)>, max_retries: usize) -> (LiveProvider, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        let config = LiveConfig {
            endpoint: "http://unused".into(),
            model: "m".into(),
            max_retries,
            backoff_ms: 0,
            timeout_s: 1,
        };
        let t = Scripted {
            outcomes,
            calls: calls.clone(),
        };
        (LiveProvider::with_transport(config, None, Box::new(t)), calls)
    }

    #[test]
    fn retries_transient_failures() {
        let (p, calls) = live(vec![(0, "reset"), (503, "busy"), (200, r#"{"response": "ok"}"#)], 3);
        assert_eq!(p.complete("x").unwrap(), "ok");
        assert_eq!(calls.load(Ordering::SeqCst), 3);

        let (p, calls) = live(vec![(0, "reset"), (503, "busy"), (200, r#"{"response": "ok"}"#)], 1);
        assert!(matches!(p.complete("x"), Err(ProviderError::RetriesExhausted { attempts: 2, .. })));
        assert_eq!(calls.load(Ordering::SeqCst), 2);

        let (p, _) = live(vec![(401, "denied")], 3);
        assert!(matches!(p.complete("x"), Err(ProviderError::Http { status: 401, .. })));

        let (p, _) = live(vec![(200, "<html>")], 3);
        assert!(matches!(p.complete("x"), Err(ProviderError::MalformedPayload(_))));
    }

    #[test]
    fn completion_shapes() {
        assert_eq!(
            extract_completion(r#"{"choices": [{"message": {"content": "hi"}}]}"#).unwrap(),
            "hi"
        );
        assert_eq!(extract_completion(r#"{"content": [{"text": "yo"}]}"#).unwrap(), "yo");
        assert!(extract_completion(r#"{"nothing": 1}"#).is_err());
    }

    #[test]
    fn pipeline_over_fixtures_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = names(&["oak", "maple", "birch", "rose", "tulip"]);
        let fixtures = FixtureProvider::new(dir.path());
        let config = PipelineConfig {
            batch_size: 2,
            max_neighbors: 2,
            concurrency: 2,
        };
        let answers = [
            r#"{"oak": ["maple", "birch"], "maple": ["oak"]}"#,
            r#"Here: {"birch": ["oak", "Maple", "cactus"], "rose": ["tulip"]}"#,
            "not json at all",
        ];
        for (batch, answer) in batch_labels(&vocab, 2).unwrap().into_iter().zip(answers) {
            fixtures
                .record(&render_prompt(batch, &vocab, 2).unwrap(), answer)
                .unwrap();
        }
        let a = build_neighbor_graph(&vocab, &fixtures, &config).unwrap();
        let b = build_neighbor_graph(&vocab, &fixtures, &config).unwrap();
        assert_eq!(a.graph.neighbors, b.graph.neighbors);
        assert_eq!(a.graph.neighbors, vec![vec![1, 2], vec![0], vec![0, 1], vec![4], vec![]]);
        assert_eq!(a.report.uncovered, names(&["tulip"]));
        assert!(a.responses[2].parse_failed);
        assert_eq!(a.graph.meta.provider, "fixture");
        a.graph.validate().unwrap();
    }
}
