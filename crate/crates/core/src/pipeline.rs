//! Stage orchestration behind the `measeval` command.
//!
//! Every stage reads and writes durable files under the output directory, so
//! any stage can be re-run on its own:
//!
//! ```text
//! <out>/prompts/<doc_id>.prompt     prompt
//! <out>/prompts/estimates.tsv       prompt
//! <out>/responses/<doc_id>.response run
//! <out>/responses/manifest.json     run
//! <out>/predictions.tsv             post
//! <out>/diagnostics.jsonl           post
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use serde_json::json;
use thiserror::Error;

use crate::backend::{
    self, CompletionBackend, EntryStatus, FixtureBackend, HttpBackend, ModelField, RetryPolicy, RunConfig, RunError,
    RunManifest,
};
use crate::corpus::{self, Corpus, CorpusError};
use crate::parser;
use crate::promptkit::{self, BudgetPolicy, EstimatorMode, FewShotExample, PromptError, TokenCounter};
use crate::reconstruct;
use crate::scorer::{self, ReportFormat, ScoreError};

pub const PROMPTS_DIR: &str = "prompts";
pub const RESPONSES_DIR: &str = "responses";
pub const PREDICTIONS_FILE: &str = "predictions.tsv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.jsonl";
pub const ESTIMATES_FILE: &str = "estimates.tsv";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("{0}")]
    Other(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Other(_) => 1,
            PipelineError::Config(_) => 2,
            PipelineError::Backend(_) => 3,
            PipelineError::Validation(_) => 4,
        }
    }
}

impl From<CorpusError> for PipelineError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io { .. } => PipelineError::Other(e.to_string()),
            _ => PipelineError::Validation(e.to_string()),
        }
    }
}

impl From<PromptError> for PipelineError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::OversizedPrompt { .. } | PromptError::InvalidBlock(_) => {
                PipelineError::Validation(e.to_string())
            }
            _ => PipelineError::Config(e.to_string()),
        }
    }
}

impl From<RunError> for PipelineError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(_) | RunError::Fixture { .. } => PipelineError::Config(e.to_string()),
            RunError::Prompt(p) => p.into(),
            RunError::Io { .. } => PipelineError::Other(e.to_string()),
            RunError::RawFile { .. } | RunError::Manifest { .. } => PipelineError::Validation(e.to_string()),
        }
    }
}

impl From<ScoreError> for PipelineError {
    fn from(e: ScoreError) -> Self {
        PipelineError::Validation(e.to_string())
    }
}

fn io_error(path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError::Other(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSelection {
    Live,
    Fixture(PathBuf),
}

impl std::str::FromStr for BackendSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(BackendSelection::Live),
            _ => match s.strip_prefix("fixture:") {
                Some(path) if !path.is_empty() => Ok(BackendSelection::Fixture(PathBuf::from(path))),
                _ => Err(format!("expected `live` or `fixture:<path>`, got {s:?}")),
            },
        }
    }
}

/// Settings for every stage. Built from defaults, then a config file, then
/// command-line flags, each layer overriding the previous one.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub corpus: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    /// Few-shot fixture; the shipped base prompt when unset.
    pub base_prompt: Option<PathBuf>,
    pub out: PathBuf,
    pub backend: BackendSelection,
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub auth_header: String,
    pub model_field: ModelField,
    pub batch_size: usize,
    pub model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub budget: BudgetPolicy,
    pub retry_limit: u32,
    pub request_concurrency: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            gold: None,
            predictions: None,
            base_prompt: None,
            out: PathBuf::from("measeval-out"),
            backend: BackendSelection::Live,
            endpoint: backend::DEFAULT_ENDPOINT.into(),
            api_key_env: backend::DEFAULT_API_KEY_ENV.into(),
            auth_header: "Authorization".into(),
            model_field: ModelField::Model,
            batch_size: 25,
            model: "davinci".into(),
            temperature: 0.0,
            top_p: 1.0,
            budget: BudgetPolicy::default(),
            retry_limit: RetryPolicy::default().retry_limit,
            request_concurrency: 1,
        }
    }
}

/// Keys accepted in a config file. Unknown keys are rejected, which also
/// keeps credentials out of config files.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub corpus: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub base_prompt: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub backend: Option<String>,
    pub endpoint: Option<String>,
    pub api_key_env: Option<String>,
    pub auth_header: Option<String>,
    pub model_field: Option<String>,
    pub batch_size: Option<usize>,
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub token_limit: Option<usize>,
    pub max_tokens_cap: Option<usize>,
    pub chars_per_token: Option<f64>,
    pub safety_margin: Option<usize>,
    pub estimator: Option<String>,
    pub retry_limit: Option<u32>,
    pub request_concurrency: Option<usize>,
}

pub fn parse_estimator(s: &str) -> Result<EstimatorMode, String> {
    match s {
        "heuristic" => Ok(EstimatorMode::Heuristic),
        "exact" => Ok(EstimatorMode::Exact),
        _ => Err(format!("expected `heuristic` or `exact`, got {s:?}")),
    }
}

pub fn parse_model_field(s: &str) -> Result<ModelField, String> {
    match s {
        "model" => Ok(ModelField::Model),
        "engine" => Ok(ModelField::Engine),
        _ => Err(format!("expected `model` or `engine`, got {s:?}")),
    }
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let content = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&content).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(content: &str) -> Result<Self, String> {
        toml::from_str(content).map_err(|e| e.message().to_string())
    }

    /// Applies the file on top of `config`. Relative paths are resolved
    /// against `base_dir`.
    pub fn apply(self, config: &mut PipelineConfig, base_dir: &Path) -> Result<(), PipelineError> {
        let resolve = |p: PathBuf| if p.is_relative() { base_dir.join(p) } else { p };
        let err = PipelineError::Config;
        if let Some(p) = self.corpus {
            config.corpus = Some(resolve(p));
        }
        if let Some(p) = self.gold {
            config.gold = Some(resolve(p));
        }
        if let Some(p) = self.predictions {
            config.predictions = Some(resolve(p));
        }
        if let Some(p) = self.base_prompt {
            config.base_prompt = Some(resolve(p));
        }
        if let Some(p) = self.out {
            config.out = resolve(p);
        }
        if let Some(b) = self.backend {
            config.backend = match b.parse().map_err(err)? {
                BackendSelection::Fixture(p) => BackendSelection::Fixture(resolve(p)),
                live => live,
            };
        }
        if let Some(v) = self.endpoint {
            config.endpoint = v;
        }
        if let Some(v) = self.api_key_env {
            config.api_key_env = v;
        }
        if let Some(v) = self.auth_header {
            config.auth_header = v;
        }
        if let Some(v) = self.model_field {
            config.model_field = parse_model_field(&v).map_err(err)?;
        }
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.model {
            config.model = v;
        }
        if let Some(v) = self.temperature {
            config.temperature = v;
        }
        if let Some(v) = self.top_p {
            config.top_p = v;
        }
        if let Some(v) = self.token_limit {
            config.budget.token_limit = v;
        }
        if let Some(v) = self.max_tokens_cap {
            config.budget.max_tokens_cap = v;
        }
        if let Some(v) = self.chars_per_token {
            config.budget.chars_per_token = v;
        }
        if let Some(v) = self.safety_margin {
            config.budget.safety_margin = v;
        }
        if let Some(v) = self.estimator {
            config.budget.estimator_mode = parse_estimator(&v).map_err(err)?;
        }
        if let Some(v) = self.retry_limit {
            config.retry_limit = v;
        }
        if let Some(v) = self.request_concurrency {
            config.request_concurrency = v;
        }
        Ok(())
    }
}

impl PipelineConfig {
    pub fn prompts_dir(&self) -> PathBuf {
        self.out.join(PROMPTS_DIR)
    }

    pub fn responses_dir(&self) -> PathBuf {
        self.out.join(RESPONSES_DIR)
    }

    pub fn predictions_path(&self) -> PathBuf {
        self.predictions.clone().unwrap_or_else(|| self.out.join(PREDICTIONS_FILE))
    }

    pub fn diagnostics_path(&self) -> PathBuf {
        self.out.join(DIAGNOSTICS_FILE)
    }

    fn require_dir(&self, path: Option<&PathBuf>, what: &str) -> Result<PathBuf, PipelineError> {
        let path = path.ok_or_else(|| PipelineError::Config(format!("no {what} given")))?;
        if !path.is_dir() {
            return Err(PipelineError::Config(format!("{what} {} is not a directory", path.display())));
        }
        Ok(path.clone())
    }

    fn require_path(&self, path: Option<&PathBuf>, what: &str) -> Result<PathBuf, PipelineError> {
        let path = path.ok_or_else(|| PipelineError::Config(format!("no {what} given")))?;
        if !path.exists() {
            return Err(PipelineError::Config(format!("{what} {} does not exist", path.display())));
        }
        Ok(path.clone())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if let Some(p) = &self.base_prompt {
            if !p.is_file() {
                return Err(PipelineError::Config(format!("base prompt {} does not exist", p.display())));
            }
        }
        if let BackendSelection::Fixture(p) = &self.backend {
            if !p.is_file() {
                return Err(PipelineError::Config(format!("fixture {} does not exist", p.display())));
            }
        }
        self.run_config().validate().map_err(PipelineError::from)?;
        Ok(())
    }

    pub fn token_counter(&self) -> Result<Option<Arc<dyn TokenCounter>>, PipelineError> {
        match self.budget.estimator_mode {
            EstimatorMode::Heuristic => Ok(None),
            #[cfg(feature = "bpe")]
            EstimatorMode::Exact => Ok(Some(Arc::new(promptkit::Gpt2TokenCounter::new()))),
            #[cfg(not(feature = "bpe"))]
            EstimatorMode::Exact => Err(PipelineError::Config(
                "exact token estimation needs the `bpe` feature".into(),
            )),
        }
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            batch_size: self.batch_size,
            model: self.model.clone(),
            temperature: self.temperature,
            top_p: self.top_p,
            budget: self.budget.clone(),
            token_counter: None,
            output_directory: self.responses_dir(),
            retry: RetryPolicy {
                retry_limit: self.retry_limit,
                ..RetryPolicy::default()
            },
            request_concurrency: self.request_concurrency,
        }
    }

    pub fn base_examples(&self) -> Result<Vec<FewShotExample>, PipelineError> {
        match &self.base_prompt {
            None => Ok(promptkit::builtin_base_prompt()),
            Some(path) => {
                let content = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
                Ok(promptkit::parse_base_prompt(&content)?)
            }
        }
    }

    pub fn build_backend(&self) -> Result<Box<dyn CompletionBackend>, PipelineError> {
        match &self.backend {
            BackendSelection::Fixture(path) => Ok(Box::new(FixtureBackend::load(path)?)),
            BackendSelection::Live => {
                let backend = HttpBackend::from_env(self.endpoint.clone(), &self.api_key_env)
                    .map_err(|e| PipelineError::Config(e.to_string()))?;
                Ok(Box::new(
                    backend
                        .with_auth_header(self.auth_header.clone())
                        .with_model_field(self.model_field),
                ))
            }
        }
    }
}

fn create_dir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

fn write_file(path: &Path, content: &str) -> Result<(), PipelineError> {
    fs::write(path, content).map_err(|e| io_error(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PromptSummary {
    pub written: usize,
    /// `(doc_id, prompt_tokens)` for prompts that leave no completion room.
    pub oversized: Vec<(String, usize)>,
}

/// Writes every prompt and its token estimate without contacting a backend.
pub fn stage_prompt(config: &PipelineConfig) -> Result<PromptSummary, PipelineError> {
    let corpus_dir = config.require_dir(config.corpus.as_ref(), "corpus directory")?;
    config.validate()?;
    let corpus = corpus::load_paragraphs(&corpus_dir)?;
    let examples = config.base_examples()?;
    let mut run = config.run_config();
    run.token_counter = config.token_counter()?;
    let estimator = run.estimator();

    let dir = config.prompts_dir();
    create_dir(&dir)?;
    let mut summary = PromptSummary::default();
    let mut estimates = String::from("doc_id\tprompt_tokens\tmax_tokens\n");
    for paragraph in corpus.paragraphs.values() {
        let prompt = promptkit::build_prompt(&examples, paragraph)?;
        let tokens = estimator.estimate(&prompt)?;
        write_file(&dir.join(format!("{}.prompt", paragraph.doc_id)), &prompt)?;
        summary.written += 1;
        let max_tokens = match promptkit::compute_max_tokens(tokens, &config.budget) {
            Ok(n) => n.to_string(),
            Err(PromptError::OversizedPrompt { .. }) => {
                summary.oversized.push((paragraph.doc_id.clone(), tokens));
                "oversized".into()
            }
            Err(e) => return Err(e.into()),
        };
        estimates.push_str(&format!("{}\t{tokens}\t{max_tokens}\n", paragraph.doc_id));
    }
    write_file(&dir.join(ESTIMATES_FILE), &estimates)?;
    Ok(summary)
}

/// Submits every paragraph through `backend`, resuming any earlier run in
/// the same output directory.
pub fn stage_run(config: &PipelineConfig, backend: &dyn CompletionBackend) -> Result<RunManifest, PipelineError> {
    let corpus_dir = config.require_dir(config.corpus.as_ref(), "corpus directory")?;
    config.validate()?;
    let corpus = corpus::load_paragraphs(&corpus_dir)?;
    let examples = config.base_examples()?;
    let mut run = config.run_config();
    run.token_counter = config.token_counter()?;
    Ok(backend::run_batch(&corpus, &examples, &run, backend)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PostSummary {
    pub documents: usize,
    pub annotations: usize,
    pub dropped: usize,
    pub dedup_removed: usize,
    /// Corpus documents without a raw response.
    pub missing_responses: Vec<String>,
}

/// Parses every raw response, reconstructs offsets and writes the
/// predictions TSV plus one diagnostics line per document.
pub fn stage_post(config: &PipelineConfig) -> Result<PostSummary, PipelineError> {
    let corpus_dir = config.require_dir(config.corpus.as_ref(), "corpus directory")?;
    let responses_dir = config.responses_dir();
    if !responses_dir.is_dir() {
        return Err(PipelineError::Config(format!(
            "no responses at {}; run the `run` stage first",
            responses_dir.display()
        )));
    }
    let corpus = corpus::load_paragraphs(&corpus_dir)?;
    let raws = backend::read_raw_responses(&responses_dir)?;

    let mut summary = PostSummary::default();
    let mut predicted = Corpus::new();
    let mut diagnostics = String::new();
    let mut seen = std::collections::BTreeSet::new();
    for raw in &raws {
        let doc_id = raw.result.doc_id.as_str();
        let paragraph = corpus.paragraphs.get(doc_id).ok_or_else(|| {
            PipelineError::Validation(format!("response for unknown document {doc_id:?}"))
        })?;
        seen.insert(doc_id.to_string());
        let parsed = parser::parse_completion(&raw.result.text, &raw.result.finish_reason);
        let report = reconstruct::reconstruct_deduped(paragraph, &parsed.blocks);
        summary.documents += 1;
        summary.annotations += report.annotations.len();
        summary.dropped += report.dropped.len();
        summary.dedup_removed += report.dedup_removed;
        let line = json!({
            "doc_id": doc_id,
            "status": "parsed",
            "finish_reason": raw.result.finish_reason.as_str(),
            "truncated": parsed.truncated,
            "final_block_suspect": parsed.final_block_suspect(),
            "warnings": parsed.warnings.iter().map(ToString::to_string).collect::<Vec<_>>(),
            "blocks": parsed.blocks.len(),
            "dedup_removed": report.dedup_removed,
            "annotations": report.annotations.len(),
            "dropped": report.dropped,
            "ambiguous": report.ambiguous,
            "relation_fallbacks": report.relation_fallbacks,
        });
        diagnostics.push_str(&line.to_string());
        diagnostics.push('\n');
        predicted.add_annotations(report.annotations);
    }
    for doc_id in corpus.paragraphs.keys().filter(|id| !seen.contains(*id)) {
        summary.missing_responses.push(doc_id.clone());
        let line = json!({ "doc_id": doc_id, "status": "no_response" });
        diagnostics.push_str(&line.to_string());
        diagnostics.push('\n');
    }

    predicted.paragraphs = corpus.paragraphs;
    let violations = corpus::validate(&predicted);
    if let Some(first) = violations.first() {
        return Err(PipelineError::Validation(format!(
            "{} invalid predicted annotations, first: {first}",
            violations.len()
        )));
    }
    create_dir(&config.out)?;
    let predictions_path = config.predictions_path();
    write_file(&predictions_path, &corpus::write_annotation_tsv(&predicted.all_annotations()))?;
    write_file(&config.diagnostics_path(), &diagnostics)?;
    Ok(summary)
}

/// Scores the predictions against gold and renders the report. When a
/// corpus is configured its paragraphs count as gold documents too, so
/// predictions for paragraphs without gold annotations are accepted.
pub fn stage_score(config: &PipelineConfig, format: ReportFormat) -> Result<String, PipelineError> {
    let gold_path = config.require_path(config.gold.as_ref(), "gold annotations")?;
    let pred_path = config.predictions_path();
    let pred_path = config.require_path(Some(&pred_path), "predictions")?;
    let mut gold = match &config.corpus {
        Some(dir) => corpus::load_paragraphs(&config.require_dir(Some(dir), "corpus directory")?)?,
        None => Corpus::new(),
    };
    gold.add_annotations(corpus::load_annotations(&gold_path)?);
    let mut pred = Corpus::new();
    pred.add_annotations(corpus::load_annotations(&pred_path)?);
    let report = scorer::score_corpus(&gold, &pred)?;
    Ok(scorer::render_report(&report, format))
}

/// Exit status for a finished run: backend failures surface as errors
/// after the manifest has been written.
pub fn check_manifest(manifest: &RunManifest) -> Result<(), PipelineError> {
    let failed = manifest.count(|s| matches!(s, EntryStatus::Failed(_) | EntryStatus::NotAttempted));
    if failed > 0 {
        return Err(PipelineError::Backend(format!(
            "{failed} of {} documents failed or were not attempted",
            manifest.entries.len()
        )));
    }
    Ok(())
}
