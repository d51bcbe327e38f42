//! C ABI over `measeval-core`.
//!
//! Every fallible call returns a [`MeasevalStatus`] and writes its result
//! through an out pointer. On failure, [`measeval_last_error`] describes the
//! most recent error on the calling thread. Strings returned to the caller
//! are owned by it and must be released with [`measeval_string_free`];
//! handles have their own `_free` functions.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use measeval_core::corpus::{self, Corpus, Paragraph};
use measeval_core::promptkit::{self, BudgetPolicy, FewShotExample, PromptError};
use measeval_core::reconstruct::reconstruct_deduped;
use measeval_core::scorer::{self, ClassScore, ReportFormat, ScoreClass, ScoreError, ScoreReport};
use measeval_core::{parse_completion, FinishReason};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasevalStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    OversizedPrompt = 4,
    ParseFailed = 5,
    UnknownDocument = 6,
    NotFound = 7,
    Panic = 99,
}

/// Few-shot examples used to build prompts.
pub struct MeasevalExamples {
    inner: Vec<FewShotExample>,
}

/// Result of scoring predictions against gold.
pub struct MeasevalReport {
    inner: ScoreReport,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MeasevalClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub n_gold: usize,
    pub n_pred: usize,
}

impl From<&ClassScore> for MeasevalClassScore {
    fn from(s: &ClassScore) -> Self {
        Self {
            precision: s.precision,
            recall: s.recall,
            f_measure: s.f_measure,
            n_gold: s.n_gold,
            n_pred: s.n_pred,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MeasevalExtractStats {
    pub blocks: usize,
    pub annotations: usize,
    pub dropped: usize,
    pub dedup_removed: usize,
    pub warnings: usize,
}

/// Budget settings for `measeval_compute_max_tokens`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeasevalBudget {
    pub token_limit: usize,
    pub max_tokens_cap: usize,
    pub safety_margin: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(MeasevalStatus, String);

impl From<PromptError> for Failure {
    fn from(e: PromptError) -> Self {
        let status = match e {
            PromptError::OversizedPrompt { .. } => MeasevalStatus::OversizedPrompt,
            PromptError::Fixture { .. } | PromptError::NoExamples => MeasevalStatus::ParseFailed,
            _ => MeasevalStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<ScoreError> for Failure {
    fn from(e: ScoreError) -> Self {
        let status = match e {
            ScoreError::UnknownDocuments(_) => MeasevalStatus::UnknownDocument,
            _ => MeasevalStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<corpus::CorpusError> for Failure {
    fn from(e: corpus::CorpusError) -> Self {
        Failure(MeasevalStatus::ParseFailed, e.to_string())
    }
}

fn set_last_error(message: &str) {
    let message = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(message));
}

/// Runs `body`, recording any error or panic for `measeval_last_error`.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> MeasevalStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            MeasevalStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            MeasevalStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(MeasevalStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MeasevalStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(MeasevalStatus::NullArgument, format!("{name} is null")))
}

fn out_arg<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(Failure(MeasevalStatus::NullArgument, format!("{name} is null")));
    }
    Ok(())
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(MeasevalStatus::InvalidArgument, "result contains a NUL byte".into()))
}

/// Error message from the previous call on this thread, or NULL if that
/// call succeeded. Valid until the next call from the same thread.
#[no_mangle]
pub extern "C" fn measeval_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn measeval_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// The shipped few-shot examples. Never NULL.
#[no_mangle]
pub extern "C" fn measeval_examples_builtin() -> *mut MeasevalExamples {
    Box::into_raw(Box::new(MeasevalExamples {
        inner: promptkit::builtin_base_prompt(),
    }))
}

/// Parses a base prompt in the `Text:` / `Data:` format.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn measeval_examples_parse(text: *const c_char, out: *mut *mut MeasevalExamples) -> MeasevalStatus {
    guard(|| {
        out_arg(out, "out")?;
        let inner = promptkit::parse_base_prompt(str_arg(text, "text")?)?;
        *out = Box::into_raw(Box::new(MeasevalExamples { inner }));
        Ok(())
    })
}

/// # Safety
/// `examples` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn measeval_examples_len(examples: *const MeasevalExamples) -> usize {
    examples.as_ref().map_or(0, |e| e.inner.len())
}

/// # Safety
/// `examples` must be NULL or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn measeval_examples_free(examples: *mut MeasevalExamples) {
    if !examples.is_null() {
        drop(Box::from_raw(examples));
    }
}

/// Builds the full prompt for one paragraph.
///
/// # Safety
/// Pointer arguments must be valid; `out` receives a string to free with
/// `measeval_string_free`.
#[no_mangle]
pub unsafe extern "C" fn measeval_build_prompt(
    examples: *const MeasevalExamples,
    doc_id: *const c_char,
    text: *const c_char,
    out: *mut *mut c_char,
) -> MeasevalStatus {
    guard(|| {
        out_arg(out, "out")?;
        let examples = ref_arg(examples, "examples")?;
        let paragraph = Paragraph::new(str_arg(doc_id, "doc_id")?, str_arg(text, "text")?);
        let prompt = promptkit::build_prompt(&examples.inner, &paragraph)?;
        *out = into_c_string(prompt)?;
        Ok(())
    })
}

/// Heuristic token estimate: characters divided by four, rounded up.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn measeval_estimate_tokens(text: *const c_char, out: *mut usize) -> MeasevalStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = promptkit::estimate_tokens(str_arg(text, "text")?, &BudgetPolicy::default(), None)?;
        Ok(())
    })
}

/// Defaults used by the pipeline: 2049 / 350 / 0.
#[no_mangle]
pub extern "C" fn measeval_budget_default() -> MeasevalBudget {
    let p = BudgetPolicy::default();
    MeasevalBudget {
        token_limit: p.token_limit,
        max_tokens_cap: p.max_tokens_cap,
        safety_margin: p.safety_margin,
    }
}

/// Completion budget for a prompt of `prompt_tokens` tokens.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn measeval_compute_max_tokens(
    prompt_tokens: usize,
    budget: MeasevalBudget,
    out: *mut usize,
) -> MeasevalStatus {
    guard(|| {
        out_arg(out, "out")?;
        let policy = BudgetPolicy {
            token_limit: budget.token_limit,
            max_tokens_cap: budget.max_tokens_cap,
            safety_margin: budget.safety_margin,
            ..BudgetPolicy::default()
        };
        policy.validate()?;
        *out = promptkit::compute_max_tokens(prompt_tokens, &policy)?;
        Ok(())
    })
}

/// Parses a completion, removes repeated blocks and maps the values back
/// onto `paragraph`. Writes the annotations as TSV with a header row.
///
/// # Safety
/// String arguments must be NUL-terminated; `finish_reason` may be NULL
/// (treated as "stop"); `stats` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn measeval_extract(
    doc_id: *const c_char,
    paragraph: *const c_char,
    completion: *const c_char,
    finish_reason: *const c_char,
    out_tsv: *mut *mut c_char,
    stats: *mut MeasevalExtractStats,
) -> MeasevalStatus {
    guard(|| {
        out_arg(out_tsv, "out_tsv")?;
        let paragraph = Paragraph::new(str_arg(doc_id, "doc_id")?, str_arg(paragraph, "paragraph")?);
        let finish = if finish_reason.is_null() {
            FinishReason::Stop
        } else {
            FinishReason::parse(str_arg(finish_reason, "finish_reason")?)
        };
        let parsed = parse_completion(str_arg(completion, "completion")?, &finish);
        let report = reconstruct_deduped(&paragraph, &parsed.blocks);
        if let Some(stats) = stats.as_mut() {
            *stats = MeasevalExtractStats {
                blocks: parsed.blocks.len(),
                annotations: report.annotations.len(),
                dropped: report.dropped.len(),
                dedup_removed: report.dedup_removed,
                warnings: parsed.warnings.len(),
            };
        }
        *out_tsv = into_c_string(corpus::write_annotation_tsv(&report.annotations))?;
        Ok(())
    })
}

fn corpus_from_tsv(tsv: &str) -> Result<Corpus, Failure> {
    let mut corpus = Corpus::new();
    corpus.add_annotations(corpus::parse_annotation_tsv(tsv, None)?);
    Ok(corpus)
}

/// Scores predicted annotations against gold, both given as TSV text.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn measeval_score(
    gold_tsv: *const c_char,
    pred_tsv: *const c_char,
    out: *mut *mut MeasevalReport,
) -> MeasevalStatus {
    guard(|| {
        out_arg(out, "out")?;
        let gold = corpus_from_tsv(str_arg(gold_tsv, "gold_tsv")?)?;
        let pred = corpus_from_tsv(str_arg(pred_tsv, "pred_tsv")?)?;
        let inner = scorer::score_corpus(&gold, &pred)?;
        *out = Box::into_raw(Box::new(MeasevalReport { inner }));
        Ok(())
    })
}

/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn measeval_report_overall(
    report: *const MeasevalReport,
    out: *mut MeasevalClassScore,
) -> MeasevalStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = (&ref_arg(report, "report")?.inner.overall).into();
        Ok(())
    })
}

/// Scores for one class, e.g. "Quantity" or "HasProperty". Returns
/// `NOT_FOUND` when the class had neither gold nor predicted items.
///
/// # Safety
/// `report` must be a live handle; `class_name` NUL-terminated; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn measeval_report_class(
    report: *const MeasevalReport,
    class_name: *const c_char,
    out: *mut MeasevalClassScore,
) -> MeasevalStatus {
    guard(|| {
        out_arg(out, "out")?;
        let report = ref_arg(report, "report")?;
        let name = str_arg(class_name, "class_name")?;
        let class = ScoreClass::ALL
            .into_iter()
            .find(|c| c.as_str() == name)
            .ok_or_else(|| Failure(MeasevalStatus::InvalidArgument, format!("unknown class {name:?}")))?;
        let score = report
            .inner
            .per_class
            .get(&class)
            .ok_or_else(|| Failure(MeasevalStatus::NotFound, format!("no items of class {name}")))?;
        *out = score.into();
        Ok(())
    })
}

/// Renders the report as an aligned table, or as TSV when `tsv` is nonzero.
///
/// # Safety
/// `report` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn measeval_report_render(
    report: *const MeasevalReport,
    tsv: i32,
    out: *mut *mut c_char,
) -> MeasevalStatus {
    guard(|| {
        out_arg(out, "out")?;
        let format = if tsv != 0 {
            ReportFormat::DelimitedValues
        } else {
            ReportFormat::Table
        };
        *out = into_c_string(scorer::render_report(&ref_arg(report, "report")?.inner, format))?;
        Ok(())
    })
}

/// # Safety
/// `report` must be NULL or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn measeval_report_free(report: *mut MeasevalReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}
