//! `sopa`: train, evaluate, explain and certify soft-pattern classifiers.

mod config;
mod oracle;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use sopa::classifier::{
    evaluate, random_search, train, write_atomic, ModelBundle, DEFAULT_SEARCH_ITERATIONS,
};
use sopa::interpret::{
    pattern_contributions, render_report, top_k_phrases, Report, ReportFormat,
};

use config::{load_search_space, required, resolve_train_config, FileConfig, Inputs, ModelArgs, SharedArgs};

#[derive(Parser)]
#[command(name = "sopa", version, about = "Soft-pattern text classifier")]
struct Cli {
    /// TOML file supplying defaults for any long flag (kebab-case keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier and write the model file and training log.
    Train(TrainArgs),
    /// Report accuracy and per-class counts on a labeled dataset.
    Eval(EvalArgs),
    /// Top phrases per pattern, or pattern contributions for one document.
    Explain(ExplainArgs),
    /// Random hyperparameter search.
    Search(SearchArgs),
    /// Check a model against the brute-force oracles and finite differences.
    OracleCheck(OracleArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training data, `label<TAB>text` per line.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Model file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training log (one JSON record per epoch) [default: <out>.log.jsonl].
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    shared: SharedArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Write accuracy and per-class counts as JSON.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    shared: SharedArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExplainMode {
    Patterns,
    Doc,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "patterns")]
    mode: ExplainMode,
    /// Phrases per pattern.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Document index (0-based line among non-blank lines) for `--mode doc`.
    #[arg(long)]
    doc_id: Option<usize>,
    /// Attach best-match phrases to this many top and bottom contributors.
    #[arg(long, default_value_t = 3)]
    top_n: usize,
    /// Write `<out>.txt` and `<out>.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    shared: SharedArgs,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Candidate values per hyperparameter (TOML, or JSON by extension).
    #[arg(long)]
    space: Option<PathBuf>,
    /// [default: 30]
    #[arg(long)]
    iterations: Option<usize>,
    /// Results table, one JSON record per candidate.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Winning configuration as JSON.
    #[arg(long)]
    best_out: Option<PathBuf>,
    #[command(flatten)]
    shared: SharedArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Small labeled documents (at most 8 tokens each).
    #[arg(long)]
    docs: Option<PathBuf>,
    /// Allowed relative deviation from the brute-force scores.
    #[arg(long, default_value_t = 1e-10)]
    tolerance: f64,
    /// Allowed relative error of the gradient.
    #[arg(long, default_value_t = 1e-4)]
    grad_tolerance: f64,
    /// Standard deviation of the noise added before the gradient check.
    #[arg(long, default_value_t = 1e-7)]
    jitter: f64,
    #[command(flatten)]
    shared: SharedArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Train(a) => cmd_train(a, &file),
        Command::Eval(a) => cmd_eval(a, &file),
        Command::Explain(a) => cmd_explain(a, &file),
        Command::Search(a) => cmd_search(a, &file),
        Command::OracleCheck(a) => cmd_oracle_check(a, &file),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path) -> Result<ModelBundle> {
    ModelBundle::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn cmd_train(a: TrainArgs, file: &FileConfig) -> Result<bool> {
    let train_path = required(&a.train, &file.train, "train")?;
    let dev_path = required(&a.dev, &file.dev, "dev")?;
    let out = required(&a.out, &file.out, "out")?;
    let inputs = Inputs::load(&a.shared, file)?;
    let config = resolve_train_config(&a.model, file, inputs.seed)?;
    info!("resolved config: {}", serde_json::to_string(&config)?);
    let train_set = inputs.dataset(&train_path)?;
    let dev_set = inputs.dataset(&dev_path)?;
    let (model, log) = train(&train_set, &dev_set, &inputs.embeddings, &config)
        .context("training aborted")?;
    model.save(&out)?;
    let log_path = a.log.unwrap_or_else(|| out.with_extension("log.jsonl"));
    write_text(&log_path, &log.to_jsonl())?;
    println!(
        "best epoch {} of {}: dev loss {:.4}, dev accuracy {:.4}",
        log.best_epoch,
        log.epochs.len(),
        log.best_dev_loss,
        log.best_dev_accuracy
    );
    println!("model written to {}", out.display());
    Ok(true)
}

fn cmd_eval(a: EvalArgs, file: &FileConfig) -> Result<bool> {
    let model_path = required(&a.model, &file.model, "model")?;
    let data_path = required(&a.data, &file.data, "data")?;
    let inputs = Inputs::load(&a.shared, file)?;
    let model = load_model(&model_path)?;
    let data = inputs.dataset(&data_path)?;
    let report = evaluate(&model, &data, &inputs.embeddings)?;
    let mut text = format!("accuracy {:.4} ({}/{})\n", report.accuracy, report.correct, report.total);
    for c in &report.per_class {
        let _ = writeln!(
            text,
            "class {}: support {} correct {} predicted {}",
            c.label, c.support, c.correct, c.predicted
        );
    }
    print!("{text}");
    if let Some(path) = &a.metrics {
        write_text(path, &serde_json::to_string_pretty(&report)?)?;
    }
    Ok(true)
}

fn cmd_explain(a: ExplainArgs, file: &FileConfig) -> Result<bool> {
    let model_path = required(&a.model, &file.model, "model")?;
    let data_path = required(&a.data, &file.data, "data")?;
    let inputs = Inputs::load(&a.shared, file)?;
    let model = load_model(&model_path)?;
    let data = inputs.dataset(&data_path)?;
    let reports: Vec<Report> = match a.mode {
        ExplainMode::Patterns => (0..model.patterns.len())
            .map(|p| top_k_phrases(&model, &data, &inputs.embeddings, p, a.k).map(Report::Pattern))
            .collect::<Result<_, _>>()?,
        ExplainMode::Doc => {
            let Some(id) = a.doc_id else {
                bail!("--mode doc needs --doc-id");
            };
            let Some(doc) = data.get(id) else {
                bail!("--doc-id {id} out of range, dataset has {} documents", data.len());
            };
            vec![Report::Contribution(pattern_contributions(
                &model,
                doc,
                id,
                &inputs.embeddings,
                a.top_n,
            )?)]
        }
    };
    let render = |format| -> String { reports.iter().map(|r| render_report(r, format)).collect() };
    let plain = render(ReportFormat::PlainText);
    print!("{plain}");
    if let Some(out) = &a.out {
        write_text(&out.with_extension("txt"), &plain)?;
        write_text(&out.with_extension("jsonl"), &render(ReportFormat::Structured))?;
    }
    Ok(true)
}

fn cmd_search(a: SearchArgs, file: &FileConfig) -> Result<bool> {
    let train_path = required(&a.train, &file.train, "train")?;
    let dev_path = required(&a.dev, &file.dev, "dev")?;
    let space_path = a.space.clone().or(file.space.clone());
    let space = load_search_space(space_path.as_deref())?;
    let iterations = a.iterations.or(file.iterations).unwrap_or(DEFAULT_SEARCH_ITERATIONS);
    let inputs = Inputs::load(&a.shared, file)?;
    let base = resolve_train_config(&a.model, file, inputs.seed)?;
    info!(
        "resolved search: seed {} iterations {} space {} base {}",
        inputs.seed,
        iterations,
        serde_json::to_string(&space)?,
        serde_json::to_string(&base)?
    );
    let train_set = inputs.dataset(&train_path)?;
    let dev_set = inputs.dataset(&dev_path)?;
    let outcome = random_search(
        &space,
        iterations,
        &base,
        &train_set,
        &dev_set,
        &inputs.embeddings,
        inputs.seed,
    )?;
    let mut table = String::from("rank iter  dev_acc  dev_loss    lr  dropout hidden patterns\n");
    for (rank, r) in outcome.rows.iter().enumerate() {
        let _ = writeln!(
            table,
            "{:>4} {:>4}  {:.4}   {:.4}  {:<6} {:<7} {:>6} {}",
            rank + 1,
            r.iteration,
            r.dev_accuracy,
            r.dev_loss,
            r.config.learning_rate,
            r.config.dropout,
            r.config.mlp_hidden,
            r.config.patterns
        );
    }
    print!("{table}");
    if let Some(path) = &a.out {
        let rows: String = outcome
            .rows
            .iter()
            .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
            .collect::<Result<_, _>>()?;
        write_text(path, &rows)?;
    }
    if let Some(path) = &a.best_out {
        write_text(path, &serde_json::to_string_pretty(&outcome.best)?)?;
    }
    Ok(true)
}

fn cmd_oracle_check(a: OracleArgs, file: &FileConfig) -> Result<bool> {
    let model_path = required(&a.model, &file.model, "model")?;
    let docs_path = required(&a.docs, &file.data, "docs")?;
    let inputs = Inputs::load(&a.shared, file)?;
    let (model, digest_ok) = ModelBundle::load_unverified(&model_path)
        .with_context(|| format!("loading model {}", model_path.display()))?;
    let docs = inputs.dataset(&docs_path)?;
    let settings = oracle::OracleSettings {
        tolerance: a.tolerance,
        grad_tolerance: a.grad_tolerance,
        jitter: a.jitter,
        seed: inputs.seed,
    };
    let report = oracle::run(&model, digest_ok, &docs, &inputs.embeddings, &settings)?;
    print!("{report}");
    Ok(report.passed())
}
