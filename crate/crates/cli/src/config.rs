//! Flag resolution: command line, then config file, then built-in default.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Deserialize;

use sopa::classifier::{SearchSpace, TrainConfig};
use sopa::embeddings::{load_dataset, load_embeddings, Embeddings, TokenizedDocument};
use sopa::{Encoder, PatternSpec, SemiringKind};

/// Values a config file may supply. Keys mirror the long flag names.
#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct FileConfig {
    pub embeddings: Option<PathBuf>,
    pub seed: Option<u64>,
    pub lowercase: Option<bool>,
    pub normalize: Option<bool>,
    pub semiring: Option<SemiringKind>,
    pub encoder: Option<Encoder>,
    pub patterns: Option<PatternSpec>,
    pub self_loops: Option<bool>,
    pub epsilon: Option<bool>,
    pub lr: Option<f64>,
    pub dropout: Option<f64>,
    pub mlp_hidden: Option<usize>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub iterations: Option<usize>,
    pub space: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config file {}", path.display()))
    }
}

/// Flags every command accepts.
#[derive(Debug, Clone, Default, Args)]
pub struct SharedArgs {
    /// Word vectors, one `word v1 … ve` line each.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Seed for every random choice in the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Lowercase document tokens before lookup.
    #[arg(long)]
    pub lowercase: bool,
    /// Keep word vectors at their stored length instead of unit length.
    #[arg(long)]
    pub no_normalize: bool,
}

/// Model and optimizer flags.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub semiring: Option<SemiringKind>,
    #[arg(long)]
    pub encoder: Option<Encoder>,
    /// Pattern lengths and counts, e.g. `5:10,4:10`.
    #[arg(long)]
    pub patterns: Option<PatternSpec>,
    #[arg(long)]
    pub no_self_loops: bool,
    #[arg(long)]
    pub no_epsilon: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    /// Documents per minibatch [default: 150].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 250]
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Epochs without dev-loss improvement before stopping [default: 30].
    #[arg(long)]
    pub patience: Option<usize>,
}

pub fn required(cli: &Option<PathBuf>, file: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    match cli.as_ref().or(file.as_ref()) {
        Some(p) => Ok(p.clone()),
        None => bail!("missing --{flag} (flag or config file key `{flag}`)"),
    }
}

pub struct Inputs {
    pub embeddings: Embeddings,
    pub lowercase: bool,
    pub seed: u64,
}

impl Inputs {
    pub fn load(shared: &SharedArgs, file: &FileConfig) -> Result<Self> {
        let path = required(&shared.embeddings, &file.embeddings, "embeddings")?;
        let normalize = !shared.no_normalize && file.normalize.unwrap_or(true);
        let (vocab, matrix) = load_embeddings(&path, normalize)
            .with_context(|| format!("loading embeddings from {}", path.display()))?;
        log::info!(
            "loaded {} word vectors of dimension {} from {}",
            vocab.len(),
            vocab.dim(),
            path.display()
        );
        Ok(Inputs {
            embeddings: Embeddings::new(vocab, matrix),
            lowercase: shared.lowercase || file.lowercase.unwrap_or(false),
            seed: shared.seed.or(file.seed).unwrap_or(0),
        })
    }

    pub fn dataset(&self, path: &Path) -> Result<Vec<TokenizedDocument>> {
        load_dataset(path, &self.embeddings.vocab, self.lowercase)
            .with_context(|| format!("loading dataset {}", path.display()))
    }
}

pub fn resolve_train_config(model: &ModelArgs, file: &FileConfig, seed: u64) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let config = TrainConfig {
        learning_rate: model.lr.or(file.lr).unwrap_or(d.learning_rate),
        dropout: model.dropout.or(file.dropout).unwrap_or(d.dropout),
        batch_size: model.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
        max_epochs: model.max_epochs.or(file.max_epochs).unwrap_or(d.max_epochs),
        patience: model.patience.or(file.patience).unwrap_or(d.patience),
        seed,
        patterns: model.patterns.clone().or(file.patterns.clone()).unwrap_or(d.patterns),
        semiring: model.semiring.or(file.semiring).unwrap_or(d.semiring),
        encoder: model.encoder.or(file.encoder).unwrap_or(d.encoder),
        self_loops: !model.no_self_loops && file.self_loops.unwrap_or(d.self_loops),
        epsilons: !model.no_epsilon && file.epsilon.unwrap_or(d.epsilons),
        mlp_hidden: model.mlp_hidden.or(file.mlp_hidden).unwrap_or(d.mlp_hidden),
    };
    config.validate()?;
    Ok(config)
}

/// Reads a search space from TOML, or JSON when the extension is `.json`.
pub fn load_search_space(path: Option<&Path>) -> Result<SearchSpace> {
    let Some(path) = path else {
        return Ok(SearchSpace::default());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading search space {}", path.display()))?;
    let space: SearchSpace = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text)?
    };
    if space.is_empty() {
        bail!("search space {} has an empty candidate list", path.display());
    }
    Ok(space)
}
