//! Completion backends, batched submission, and raw-response persistence.
//!
//! Two backends implement [`CompletionBackend`]: [`HttpBackend`] talks to a
//! completion-API-compatible endpoint, [`FixtureBackend`] replays recorded
//! completions. [`run_batch`] drives either over a corpus and writes one raw
//! response file per paragraph plus a `manifest.json`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Corpus, Paragraph};
use crate::promptkit::{self, BudgetPolicy, FewShotExample, PromptError, TokenCounter, TokenEstimator};

pub use crate::parser::FinishReason;

pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/completions";
pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RAW_EXTENSION: &str = "response";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("transport error (status {status:?}): {body}")]
    Transport { status: Option<u16>, body: String },
    #[error("request rejected for exceeding the token budget: {0}")]
    BudgetRejected(String),
    #[error("no fixture entry for document {0:?}")]
    FixtureMissing(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("credential environment variable {0} is not set")]
    MissingCredential(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport { .. })
    }

    /// Errors after which the rest of a batch should not be attempted.
    pub fn aborts_batch(&self) -> bool {
        matches!(
            self,
            BackendError::Transport { .. } | BackendError::MissingCredential(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub model: String,
}

/// Name of the JSON field carrying the model id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelField {
    #[default]
    Model,
    Engine,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(BackendError::InvalidRequest("top_p must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_body(&self, model_field: ModelField) -> Value {
        let key = match model_field {
            ModelField::Model => "model",
            ModelField::Engine => "engine",
        };
        json!({
            "prompt": self.prompt,
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
            "top_p": self.top_p,
            key: self.model,
        })
    }

    /// Hex SHA-256 of the prompt, used as a fixture key.
    pub fn prompt_hash(&self) -> String {
        prompt_hash(&self.prompt)
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    Sha256::digest(prompt.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionResult {
    pub doc_id: String,
    /// Generated continuation only.
    pub text: String,
    pub finish_reason: FinishReason,
    /// Response body exactly as received.
    pub raw_response: String,
}

/// Reads `choices[0].text` and `choices[0].finish_reason` from a response body.
pub fn parse_response_body(doc_id: &str, body: &str) -> Result<CompletionResult, BackendError> {
    let value: Value =
        serde_json::from_str(body).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::MalformedResponse("no choices[0]".into()))?;
    let text = choice
        .get("text")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::MalformedResponse("choices[0].text missing".into()))?;
    let finish_reason = match choice.get("finish_reason") {
        Some(Value::String(s)) => FinishReason::parse(s),
        _ => FinishReason::Other("unknown".into()),
    };
    Ok(CompletionResult {
        doc_id: doc_id.to_string(),
        text: text.to_string(),
        finish_reason,
        raw_response: body.to_string(),
    })
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, doc_id: &str, request: &CompletionRequest) -> Result<CompletionResult, BackendError>;
}

/// Live backend: one JSON POST per request.
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    auth_header: String,
    model_field: ModelField,
    agent: ureq::Agent,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.endpoint)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("auth_header", &self.auth_header)
            .finish()
    }
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            api_key,
            auth_header: "Authorization".into(),
            model_field: ModelField::Model,
            agent,
        }
    }

    /// Reads the credential from environment variable `key_env`.
    pub fn from_env(endpoint: impl Into<String>, key_env: &str) -> Result<Self, BackendError> {
        let key = std::env::var(key_env).map_err(|_| BackendError::MissingCredential(key_env.to_string()))?;
        Ok(Self::new(endpoint, Some(key)))
    }

    /// Sends the key in `header` verbatim instead of as a bearer token.
    pub fn with_auth_header(mut self, header: impl Into<String>) -> Self {
        self.auth_header = header.into();
        self
    }

    pub fn with_model_field(mut self, model_field: ModelField) -> Self {
        self.model_field = model_field;
        self
    }
}

fn is_budget_rejection(status: u16, body: &str) -> bool {
    let body = body.to_ascii_lowercase();
    status == 400
        && (body.contains("context_length_exceeded")
            || body.contains("maximum context length")
            || body.contains("reduce your prompt"))
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, doc_id: &str, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.validate()?;
        let mut call = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            let value = if self.auth_header.eq_ignore_ascii_case("authorization") {
                format!("Bearer {key}")
            } else {
                key.clone()
            };
            call = call.header(self.auth_header.as_str(), value.as_str());
        }
        let mut response = call
            .content_type("application/json")
            .send(request.to_body(self.model_field).to_string())
            .map_err(|e| BackendError::Transport {
                status: None,
                body: e.to_string(),
            })?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport {
                status: Some(status),
                body: e.to_string(),
            })?;
        if !(200..300).contains(&status) {
            if is_budget_rejection(status, &body) {
                return Err(BackendError::BudgetRejected(body));
            }
            return Err(BackendError::Transport {
                status: Some(status),
                body,
            });
        }
        parse_response_body(doc_id, &body)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    pub text: String,
    #[serde(default = "default_finish")]
    pub finish_reason: String,
}

fn default_finish() -> String {
    "stop".into()
}

/// Replays recorded completions keyed by document id, or by prompt hash for
/// entries without one.
#[derive(Debug, Default)]
pub struct FixtureBackend {
    by_doc: HashMap<String, FixtureEntry>,
    by_prompt: HashMap<String, FixtureEntry>,
    requests: AtomicUsize,
    per_doc: Mutex<BTreeMap<String, usize>>,
}

impl FixtureBackend {
    pub fn new(entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        let mut backend = FixtureBackend::default();
        for entry in entries {
            if let Some(doc) = &entry.doc_id {
                backend.by_doc.insert(doc.clone(), entry);
            } else if let Some(hash) = &entry.prompt_sha256 {
                backend.by_prompt.insert(hash.clone(), entry);
            }
        }
        backend
    }

    /// Loads a JSON-lines fixture file, one [`FixtureEntry`] per line.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let content = fs::read_to_string(path).map_err(|source| RunError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut entries = Vec::new();
        for (i, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureEntry = serde_json::from_str(line).map_err(|e| RunError::Fixture {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            entries.push(entry);
        }
        Ok(Self::new(entries))
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn requests_for(&self, doc_id: &str) -> usize {
        self.per_doc
            .lock()
            .expect("fixture counter lock")
            .get(doc_id)
            .copied()
            .unwrap_or(0)
    }
}

impl CompletionBackend for FixtureBackend {
    fn complete(&self, doc_id: &str, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.validate()?;
        self.requests.fetch_add(1, Ordering::SeqCst);
        *self
            .per_doc
            .lock()
            .expect("fixture counter lock")
            .entry(doc_id.to_string())
            .or_default() += 1;
        let entry = self
            .by_doc
            .get(doc_id)
            .or_else(|| self.by_prompt.get(&request.prompt_hash()))
            .ok_or_else(|| BackendError::FixtureMissing(doc_id.to_string()))?;
        let body = json!({
            "id": format!("fixture-{doc_id}"),
            "object": "text_completion",
            "model": request.model,
            "choices": [{
                "text": entry.text,
                "index": 0,
                "logprobs": null,
                "finish_reason": entry.finish_reason,
            }],
        });
        Ok(CompletionResult {
            doc_id: doc_id.to_string(),
            text: entry.text.clone(),
            finish_reason: FinishReason::parse(&entry.finish_reason),
            raw_response: body.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub retry_limit: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retry_limit: 3,
            initial_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry).unwrap_or(u32::MAX);
        self.initial_backoff.saturating_mul(factor).min(self.max_backoff)
    }
}

/// Calls the backend, retrying transport errors with exponential backoff.
/// Returns the result and the number of attempts made.
pub fn complete_with_retry(
    backend: &dyn CompletionBackend,
    doc_id: &str,
    request: &CompletionRequest,
    policy: &RetryPolicy,
) -> (Result<CompletionResult, BackendError>, u32) {
    let mut attempts = 0;
    loop {
        attempts += 1;
        match backend.complete(doc_id, request) {
            Err(e) if e.is_retryable() && attempts <= policy.retry_limit => {
                thread::sleep(policy.backoff(attempts - 1));
            }
            outcome => return (outcome, attempts),
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Fixture {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("malformed raw response file {path}: {message}")]
    RawFile { path: PathBuf, message: String },
    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
}

#[derive(Clone)]
pub struct RunConfig {
    pub batch_size: usize,
    pub model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub budget: BudgetPolicy,
    /// Sub-word counter for exact estimation; unused in heuristic mode.
    pub token_counter: Option<Arc<dyn TokenCounter>>,
    pub output_directory: PathBuf,
    pub retry: RetryPolicy,
    pub request_concurrency: usize,
}

impl fmt::Debug for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RunConfig")
            .field("batch_size", &self.batch_size)
            .field("model", &self.model)
            .field("temperature", &self.temperature)
            .field("top_p", &self.top_p)
            .field("budget", &self.budget)
            .field("token_counter", &self.token_counter.is_some())
            .field("output_directory", &self.output_directory)
            .field("retry", &self.retry)
            .field("request_concurrency", &self.request_concurrency)
            .finish()
    }
}

impl RunConfig {
    pub fn new(output_directory: impl Into<PathBuf>) -> Self {
        Self {
            batch_size: 25,
            model: "davinci".into(),
            temperature: 0.0,
            top_p: 1.0,
            budget: BudgetPolicy::default(),
            token_counter: None,
            output_directory: output_directory.into(),
            retry: RetryPolicy::default(),
            request_concurrency: 1,
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.batch_size == 0 {
            return Err(RunError::Config("batch_size must be at least 1".into()));
        }
        if self.request_concurrency == 0 {
            return Err(RunError::Config("request_concurrency must be at least 1".into()));
        }
        self.budget.validate()?;
        Ok(())
    }

    pub fn estimator(&self) -> TokenEstimator {
        match &self.token_counter {
            Some(counter) => TokenEstimator::with_counter(self.budget.clone(), counter.clone()),
            None => TokenEstimator::new(self.budget.clone()),
        }
    }
}

/// Consecutive index ranges of at most `batch_size` items.
pub fn partition_batches(len: usize, batch_size: usize) -> Vec<Range<usize>> {
    let batch_size = batch_size.max(1);
    (0..len)
        .step_by(batch_size)
        .map(|start| start..(start + batch_size).min(len))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason")]
pub enum EntryStatus {
    Completed,
    OversizedPrompt,
    Failed(String),
    /// Skipped because an earlier request in the same batch aborted it.
    NotAttempted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub doc_id: String,
    pub batch: usize,
    #[serde(flatten)]
    pub status: EntryStatus,
    pub prompt_tokens: Option<usize>,
    pub max_tokens: Option<usize>,
    pub finish_reason: Option<String>,
    /// The completion stopped at its token budget.
    pub truncated: bool,
    pub attempts: u32,
    pub raw_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub entries: Vec<ManifestEntry>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let content = fs::read_to_string(path).map_err(|source| RunError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&content).map_err(|e| RunError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), RunError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, format!("{json}\n").as_bytes())
    }

    pub fn get(&self, doc_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.doc_id == doc_id)
    }

    pub fn count(&self, pred: impl Fn(&EntryStatus) -> bool) -> usize {
        self.entries.iter().filter(|e| pred(&e.status)).count()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    let io_err = |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    };
    fs::write(&tmp, bytes).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

/// A raw response file: metadata header plus the verbatim response body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawResponseFile {
    pub prompt_tokens: usize,
    pub max_tokens: usize,
    pub model: String,
    pub result: CompletionResult,
}

impl RawResponseFile {
    pub fn file_name(doc_id: &str) -> String {
        format!("{doc_id}.{RAW_EXTENSION}")
    }

    pub fn render(&self) -> String {
        format!(
            "# doc_id: {}\n# prompt_tokens: {}\n# max_tokens: {}\n# finish_reason: {}\n# model: {}\n{}",
            self.result.doc_id,
            self.prompt_tokens,
            self.max_tokens,
            self.result.finish_reason,
            self.model,
            self.result.raw_response
        )
    }

    pub fn parse(content: &str) -> Result<Self, String> {
        let mut header: HashMap<&str, &str> = HashMap::new();
        let mut rest = content;
        while let Some(line_end) = rest.starts_with('#').then(|| rest.find('\n')).flatten() {
            let line = &rest[1..line_end];
            if let Some((key, value)) = line.split_once(':') {
                header.insert(key.trim(), value.trim());
            }
            rest = &rest[line_end + 1..];
        }
        let field = |key: &str| header.get(key).copied().ok_or_else(|| format!("missing header {key:?}"));
        let number = |key: &str| {
            field(key)?
                .parse::<usize>()
                .map_err(|_| format!("header {key:?} is not a number"))
        };
        let doc_id = field("doc_id")?;
        let result = parse_response_body(doc_id, rest).map_err(|e| e.to_string())?;
        Ok(RawResponseFile {
            prompt_tokens: number("prompt_tokens")?,
            max_tokens: number("max_tokens")?,
            model: field("model")?.to_string(),
            result,
        })
    }

    pub fn read(path: &Path) -> Result<Self, RunError> {
        let content = fs::read_to_string(path).map_err(|source| RunError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&content).map_err(|message| RunError::RawFile {
            path: path.to_path_buf(),
            message,
        })
    }
}

/// Every raw response file in `dir`, sorted by document id.
pub fn read_raw_responses(dir: &Path) -> Result<Vec<RawResponseFile>, RunError> {
    let entries = fs::read_dir(dir).map_err(|source| RunError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|ext| ext == RAW_EXTENSION))
        .collect();
    paths.sort();
    paths.iter().map(|p| RawResponseFile::read(p)).collect()
}

enum Outcome {
    Completed {
        raw: RawResponseFile,
        attempts: u32,
    },
    Oversized {
        prompt_tokens: usize,
    },
    Failed {
        prompt_tokens: usize,
        max_tokens: usize,
        error: BackendError,
        attempts: u32,
    },
}

fn process(
    paragraph: &Paragraph,
    examples: &[FewShotExample],
    config: &RunConfig,
    estimator: &TokenEstimator,
    backend: &dyn CompletionBackend,
) -> Result<Outcome, RunError> {
    let prompt = promptkit::build_prompt(examples, paragraph)?;
    let prompt_tokens = estimator.estimate(&prompt)?;
    let max_tokens = match promptkit::compute_max_tokens(prompt_tokens, &config.budget) {
        Ok(n) => n,
        Err(PromptError::OversizedPrompt { .. }) => return Ok(Outcome::Oversized { prompt_tokens }),
        Err(e) => return Err(e.into()),
    };
    let request = CompletionRequest {
        prompt,
        max_tokens,
        temperature: config.temperature,
        top_p: config.top_p,
        model: config.model.clone(),
    };
    let (result, attempts) = complete_with_retry(backend, &paragraph.doc_id, &request, &config.retry);
    Ok(match result {
        Ok(result) => Outcome::Completed {
            raw: RawResponseFile {
                prompt_tokens,
                max_tokens,
                model: config.model.clone(),
                result,
            },
            attempts,
        },
        Err(error) => Outcome::Failed {
            prompt_tokens,
            max_tokens,
            error,
            attempts,
        },
    })
}

/// Submits every paragraph in consecutive batches of `batch_size`.
///
/// Completed entries from an existing manifest in the output directory are
/// skipped. Within a batch, a transport failure that survives its retries
/// stops the batch; the remaining paragraphs are marked `NotAttempted`.
/// Files and the manifest are written by this thread only.
pub fn run_batch(
    corpus: &Corpus,
    base_examples: &[FewShotExample],
    config: &RunConfig,
    backend: &dyn CompletionBackend,
) -> Result<RunManifest, RunError> {
    config.validate()?;
    if base_examples.is_empty() {
        return Err(PromptError::NoExamples.into());
    }
    let out_dir = &config.output_directory;
    fs::create_dir_all(out_dir).map_err(|source| RunError::Io {
        path: out_dir.clone(),
        source,
    })?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let previous = if manifest_path.exists() {
        RunManifest::load(&manifest_path)?
    } else {
        RunManifest::default()
    };

    let estimator = config.estimator();
    let paragraphs: Vec<&Paragraph> = corpus.paragraphs.values().collect();
    let mut entries: BTreeMap<String, ManifestEntry> = BTreeMap::new();
    if paragraphs.is_empty() {
        return Ok(RunManifest::default());
    }

    for (batch_index, range) in partition_batches(paragraphs.len(), config.batch_size).into_iter().enumerate() {
        let mut pending = Vec::new();
        for paragraph in &paragraphs[range] {
            let done = previous.get(&paragraph.doc_id).filter(|e| {
                e.status == EntryStatus::Completed
                    && e.raw_file.as_ref().is_some_and(|f| out_dir.join(f).is_file())
            });
            match done {
                Some(entry) => {
                    entries.insert(paragraph.doc_id.clone(), ManifestEntry {
                        batch: batch_index,
                        ..entry.clone()
                    });
                }
                None => pending.push(*paragraph),
            }
        }

        let abort = AtomicBool::new(false);
        let next = AtomicUsize::new(0);
        let workers = config.request_concurrency.min(pending.len());
        let (tx, rx) = mpsc::channel();
        let mut write_error = None;
        thread::scope(|scope| {
            for _ in 0..workers {
                let tx = tx.clone();
                let (abort, next, pending, estimator) = (&abort, &next, &pending, &estimator);
                scope.spawn(move || loop {
                    if abort.load(Ordering::SeqCst) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(paragraph) = pending.get(i) else {
                        break;
                    };
                    let outcome = process(paragraph, base_examples, config, estimator, backend);
                    let stop = match &outcome {
                        Ok(Outcome::Failed { error, .. }) => error.aborts_batch(),
                        Err(_) => true,
                        _ => false,
                    };
                    if stop {
                        abort.store(true, Ordering::SeqCst);
                    }
                    if tx.send((i, outcome)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);

            for (i, outcome) in rx {
                if write_error.is_some() {
                    continue;
                }
                let doc_id = pending[i].doc_id.clone();
                let entry = match outcome {
                    Ok(Outcome::Completed { raw, attempts }) => {
                        let name = RawResponseFile::file_name(&doc_id);
                        if let Err(e) = write_atomic(&out_dir.join(&name), raw.render().as_bytes()) {
                            write_error = Some(e);
                            abort.store(true, Ordering::SeqCst);
                            continue;
                        }
                        ManifestEntry {
                            doc_id: doc_id.clone(),
                            batch: batch_index,
                            status: EntryStatus::Completed,
                            prompt_tokens: Some(raw.prompt_tokens),
                            max_tokens: Some(raw.max_tokens),
                            finish_reason: Some(raw.result.finish_reason.to_string()),
                            truncated: raw.result.finish_reason == FinishReason::Length,
                            attempts,
                            raw_file: Some(name),
                        }
                    }
                    Ok(Outcome::Oversized { prompt_tokens }) => ManifestEntry {
                        doc_id: doc_id.clone(),
                        batch: batch_index,
                        status: EntryStatus::OversizedPrompt,
                        prompt_tokens: Some(prompt_tokens),
                        max_tokens: None,
                        finish_reason: None,
                        truncated: false,
                        attempts: 0,
                        raw_file: None,
                    },
                    Ok(Outcome::Failed {
                        prompt_tokens,
                        max_tokens,
                        error,
                        attempts,
                    }) => ManifestEntry {
                        doc_id: doc_id.clone(),
                        batch: batch_index,
                        status: EntryStatus::Failed(error.to_string()),
                        prompt_tokens: Some(prompt_tokens),
                        max_tokens: Some(max_tokens),
                        finish_reason: None,
                        truncated: false,
                        attempts,
                        raw_file: None,
                    },
                    Err(e) => {
                        write_error = Some(e);
                        continue;
                    }
                };
                entries.insert(doc_id, entry);
                let snapshot = RunManifest {
                    entries: entries.values().cloned().collect(),
                };
                if let Err(e) = snapshot.save(&manifest_path) {
                    write_error = Some(e);
                    abort.store(true, Ordering::SeqCst);
                }
            }
        });
        if let Some(e) = write_error {
            return Err(e);
        }

        for paragraph in &pending {
            entries.entry(paragraph.doc_id.clone()).or_insert_with(|| ManifestEntry {
                doc_id: paragraph.doc_id.clone(),
                batch: batch_index,
                status: EntryStatus::NotAttempted,
                prompt_tokens: None,
                max_tokens: None,
                finish_reason: None,
                truncated: false,
                attempts: 0,
                raw_file: None,
            });
        }
    }

    let manifest = RunManifest {
        entries: entries.into_values().collect(),
    };
    manifest.save(&manifest_path)?;
    Ok(manifest)
}
