use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use measeval_core::backend::EntryStatus;
use measeval_core::pipeline::{self, BackendSelection, ConfigFile, PipelineConfig, PipelineError};
use measeval_core::scorer::ReportFormat;

/// Few-shot quantity extraction: build prompts, collect completions,
/// reconstruct annotations and score them.
///
/// The API key for the live backend is read from the environment variable
/// named by `api_key_env` (default OPENAI_API_KEY).
#[derive(Parser, Debug)]
#[command(name = "measeval", version)]
struct Cli {
    #[command(flatten)]
    options: Options,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Options {
    /// TOML file of `key = value` settings; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `live` or `fixture:<path to completions.jsonl>`.
    #[arg(long, global = true)]
    backend: Option<BackendSelection>,
    /// Output directory for all stage artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory with one paragraph per file.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Gold annotation TSV file or directory.
    #[arg(long, global = true)]
    gold: Option<PathBuf>,
    /// Predicted annotation TSV; defaults to <out>/predictions.tsv.
    #[arg(long, global = true)]
    predictions: Option<PathBuf>,
    /// Few-shot base prompt file; the shipped one when omitted.
    #[arg(long, global = true)]
    base_prompt: Option<PathBuf>,
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    api_key_env: Option<String>,
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    top_p: Option<f64>,
    #[arg(long, global = true)]
    token_limit: Option<usize>,
    #[arg(long, global = true)]
    max_tokens_cap: Option<usize>,
    #[arg(long, global = true)]
    safety_margin: Option<usize>,
    /// `heuristic` (characters / 4) or `exact` (GPT-2 byte-pair count).
    #[arg(long, global = true)]
    estimator: Option<String>,
    #[arg(long, global = true)]
    retry_limit: Option<u32>,
    #[arg(long, global = true)]
    concurrency: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write each prompt and its token estimate without sending anything.
    Prompt,
    /// Send prompts to the backend and save the raw responses.
    Run,
    /// Turn raw responses into predicted annotations.
    Post,
    /// Score predictions against gold annotations.
    Score {
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Tsv,
}

fn resolve_config(options: Options) -> Result<PipelineConfig, PipelineError> {
    let mut config = PipelineConfig::default();
    if let Some(path) = &options.config {
        let base = path.parent().map(PathBuf::from).unwrap_or_default();
        ConfigFile::load(path)?.apply(&mut config, &base)?;
    }
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = options.$flag { config.$($field).+ = v.into(); })*
        };
    }
    set!(
        backend => backend,
        out => out,
        endpoint => endpoint,
        api_key_env => api_key_env,
        model => model,
        batch_size => batch_size,
        temperature => temperature,
        top_p => top_p,
        token_limit => budget.token_limit,
        max_tokens_cap => budget.max_tokens_cap,
        safety_margin => budget.safety_margin,
        retry_limit => retry_limit,
        concurrency => request_concurrency,
    );
    for (flag, field) in [
        (options.corpus, &mut config.corpus),
        (options.gold, &mut config.gold),
        (options.predictions, &mut config.predictions),
        (options.base_prompt, &mut config.base_prompt),
    ] {
        if flag.is_some() {
            *field = flag;
        }
    }
    if let Some(mode) = options.estimator {
        config.budget.estimator_mode = pipeline::parse_estimator(&mode).map_err(PipelineError::Config)?;
    }
    Ok(config)
}

fn execute(command: Command, config: &PipelineConfig) -> Result<(), PipelineError> {
    match command {
        Command::Prompt => {
            let summary = pipeline::stage_prompt(config)?;
            println!("wrote {} prompts to {}", summary.written, config.prompts_dir().display());
            for (doc_id, tokens) in &summary.oversized {
                eprintln!("oversized: {doc_id} ({tokens} prompt tokens)");
            }
            if !summary.oversized.is_empty() {
                return Err(PipelineError::Validation(format!(
                    "{} prompts exceed the token limit",
                    summary.oversized.len()
                )));
            }
        }
        Command::Run => {
            config.validate()?;
            let backend = config.build_backend()?;
            let manifest = pipeline::stage_run(config, backend.as_ref())?;
            let completed = manifest.count(|s| *s == EntryStatus::Completed);
            println!(
                "{completed} of {} documents completed; manifest in {}",
                manifest.entries.len(),
                config.responses_dir().display()
            );
            for entry in &manifest.entries {
                if entry.status != EntryStatus::Completed {
                    eprintln!("{}: {:?}", entry.doc_id, entry.status);
                }
            }
            pipeline::check_manifest(&manifest)?;
        }
        Command::Post => {
            let summary = pipeline::stage_post(config)?;
            println!(
                "{} documents, {} annotations, {} dropped spans, {} duplicate blocks removed",
                summary.documents, summary.annotations, summary.dropped, summary.dedup_removed
            );
            for doc_id in &summary.missing_responses {
                eprintln!("no response for {doc_id}");
            }
        }
        Command::Score { format } => {
            let format = match format {
                Format::Table => ReportFormat::Table,
                Format::Tsv => ReportFormat::DelimitedValues,
            };
            print!("{}", pipeline::stage_score(config, format)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = resolve_config(cli.options).and_then(|config| execute(cli.command, &config));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("measeval: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
