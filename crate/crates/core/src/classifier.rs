//! Pattern scores → two-layer MLP → softmax, trained end to end with Adam.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::automata::{
    self, AutomatonError, Encoder, PatternParams, PatternSetConfig, PatternSpec, Transitions,
};
use crate::autodiff::{
    finite_difference_check, softmax, AdamState, AutodiffError, GradCheckReport, NodeId, Tape,
    TapeAlgebra, FD_STEP,
};
use crate::embeddings::{Embeddings, TokenizedDocument, VocabFingerprint};
use crate::semiring::{Semiring, SemiringKind};

pub const MODEL_VERSION: &str = "sopa-model-v1";
pub const INIT_STD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("vocabulary fingerprint mismatch: model expects {expected}, embeddings give {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error(transparent)]
    Automaton(#[from] AutomatonError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("pattern {pattern} produced a non-finite score {score}")]
    NonFiniteScore { pattern: usize, score: f64 },
    #[error("non-finite training loss in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("non-finite gradient for {parameter} in epoch {epoch}")]
    NonFiniteGradient { epoch: usize, parameter: String },
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("document {index} in the {set} set has no label")]
    MissingLabel { set: &'static str, index: usize },
    #[error("label {label} in the {set} set is outside 0..{classes}")]
    LabelOutOfRange {
        set: &'static str,
        label: usize,
        classes: usize,
    },
    #[error("need at least two classes, found {0}")]
    TooFewClasses(usize),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("unsupported model version `{0}`")]
    Version(String),
    #[error("model parameters do not match the stored digest")]
    DigestMismatch,
    #[error("model file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T, E = ClassifierError> = std::result::Result<T, E>;

/// Two layers: `hidden = relu(W₁ z + b₁)`, `logits = W₂ hidden + b₂`.
///
/// Weights are stored one row per output unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub hidden_weights: Vec<Vec<f64>>,
    pub hidden_bias: Vec<f64>,
    pub output_weights: Vec<Vec<f64>>,
    pub output_bias: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(inputs: usize, hidden: usize, classes: usize) -> Self {
        MlpParams {
            hidden_weights: vec![vec![0.0; inputs]; hidden],
            hidden_bias: vec![0.0; hidden],
            output_weights: vec![vec![0.0; hidden]; classes],
            output_bias: vec![0.0; classes],
        }
    }

    pub fn random<R: Rng + ?Sized>(
        inputs: usize,
        hidden: usize,
        classes: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut row = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(rng)).collect() };
        let hidden_weights = (0..hidden).map(|_| row(inputs)).collect();
        let hidden_bias = row(hidden);
        let output_weights = (0..classes).map(|_| row(hidden)).collect();
        let output_bias = row(classes);
        MlpParams {
            hidden_weights,
            hidden_bias,
            output_weights,
            output_bias,
        }
    }

    pub fn inputs(&self) -> usize {
        self.hidden_weights.first().map_or(0, Vec::len)
    }

    pub fn hidden(&self) -> usize {
        self.hidden_bias.len()
    }

    pub fn classes(&self) -> usize {
        self.output_bias.len()
    }

    /// `(k+1)·h + (h+1)·C`
    pub fn num_parameters(&self) -> usize {
        (self.inputs() + 1) * self.hidden() + (self.hidden() + 1) * self.classes()
    }

    /// Zeroes the hidden-layer weights reading input `p`.
    pub fn disconnect_input(&mut self, p: usize) {
        for row in &mut self.hidden_weights {
            row[p] = 0.0;
        }
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        for (row, b) in self.hidden_weights.iter().zip(&self.hidden_bias) {
            out.extend(row);
            out.push(*b);
        }
        for (row, b) in self.output_weights.iter().zip(&self.output_bias) {
            out.extend(row);
            out.push(*b);
        }
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for (row, b) in self.hidden_weights.iter_mut().zip(&mut self.hidden_bias) {
            row.iter_mut().for_each(&mut f);
            f(b);
        }
        for (row, b) in self.output_weights.iter_mut().zip(&mut self.output_bias) {
            row.iter_mut().for_each(&mut f);
            f(b);
        }
    }

    /// Returns `(hidden activations, logits)`; `masks` scale `z` and the hidden layer.
    fn forward(&self, z: &[f64], masks: Option<(&[f64], &[f64])>) -> (Vec<f64>, Vec<f64>) {
        let z: Vec<f64> = match masks {
            Some((mz, _)) => z.iter().zip(mz).map(|(x, m)| x * m).collect(),
            None => z.to_vec(),
        };
        let mut hidden: Vec<f64> = self
            .hidden_weights
            .iter()
            .zip(&self.hidden_bias)
            .map(|(w, b)| affine(w, &z, *b).max(0.0))
            .collect();
        if let Some((_, mh)) = masks {
            hidden.iter_mut().zip(mh).for_each(|(x, m)| *x *= m);
        }
        let logits = self
            .output_weights
            .iter()
            .zip(&self.output_bias)
            .map(|(w, b)| affine(w, &hidden, *b))
            .collect();
        (hidden, logits)
    }
}

/// Same accumulation order as the tape's linear node.
fn affine(w: &[f64], x: &[f64], b: f64) -> f64 {
    let mut acc = 0.0;
    for (wi, xi) in w.iter().zip(x) {
        acc += wi * xi;
    }
    acc + b
}

/// Offsets of every parameter block in the flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout {
    dim: usize,
    patterns: Vec<(usize, usize)>,
    mlp_offset: usize,
    inputs: usize,
    hidden: usize,
    classes: usize,
    total: usize,
}

impl ModelLayout {
    fn new(patterns: &[PatternParams], mlp: &MlpParams, dim: usize) -> Self {
        let mut offset = 0;
        let mut blocks = Vec::with_capacity(patterns.len());
        for p in patterns {
            blocks.push((offset, p.len()));
            offset += (2 * dim + 3) * p.len();
        }
        let mlp_offset = offset;
        ModelLayout {
            dim,
            patterns: blocks,
            mlp_offset,
            inputs: mlp.inputs(),
            hidden: mlp.hidden(),
            classes: mlp.classes(),
            total: mlp_offset + mlp.num_parameters(),
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn sopa_total(&self) -> usize {
        self.mlp_offset
    }

    fn slot(&self, pattern: usize, slot: usize) -> usize {
        self.patterns[pattern].0 + slot * (2 * self.dim + 3)
    }

    fn self_loop_weights(&self, p: usize, i: usize) -> usize {
        self.slot(p, i)
    }

    fn self_loop_bias(&self, p: usize, i: usize) -> usize {
        self.slot(p, i) + self.dim
    }

    fn main_weights(&self, p: usize, i: usize) -> usize {
        self.slot(p, i) + self.dim + 1
    }

    fn main_bias(&self, p: usize, i: usize) -> usize {
        self.slot(p, i) + 2 * self.dim + 1
    }

    fn epsilon(&self, p: usize, i: usize) -> usize {
        self.slot(p, i) + 2 * self.dim + 2
    }

    fn hidden_row(&self, j: usize) -> usize {
        self.mlp_offset + j * (self.inputs + 1)
    }

    fn output_row(&self, c: usize) -> usize {
        self.mlp_offset + self.hidden * (self.inputs + 1) + c * (self.hidden + 1)
    }

    /// Human-readable name of a flat parameter index.
    pub fn describe(&self, index: usize) -> String {
        if index < self.mlp_offset {
            let p = self
                .patterns
                .iter()
                .rposition(|&(off, _)| off <= index)
                .expect("index inside a pattern block");
            let rel = index - self.patterns[p].0;
            let stride = 2 * self.dim + 3;
            let (slot, k) = (rel / stride, rel % stride);
            let e = self.dim;
            return if k < e {
                format!("pattern {p} u[{slot}][{k}]")
            } else if k == e {
                format!("pattern {p} a[{slot}]")
            } else if k < 2 * e + 1 {
                format!("pattern {p} w[{slot}][{}]", k - e - 1)
            } else if k == 2 * e + 1 {
                format!("pattern {p} b[{slot}]")
            } else {
                format!("pattern {p} c[{slot}]")
            };
        }
        let rel = index - self.mlp_offset;
        let hidden_block = self.hidden * (self.inputs + 1);
        if rel < hidden_block {
            let (j, k) = (rel / (self.inputs + 1), rel % (self.inputs + 1));
            if k == self.inputs {
                format!("mlp hidden bias[{j}]")
            } else {
                format!("mlp hidden weight[{j}][{k}]")
            }
        } else {
            let rel = rel - hidden_block;
            let (c, k) = (rel / (self.hidden + 1), rel % (self.hidden + 1));
            if k == self.hidden {
                format!("mlp output bias[{c}]")
            } else {
                format!("mlp output weight[{c}][{k}]")
            }
        }
    }
}

/// Everything needed to score and classify documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub version: String,
    pub config: PatternSetConfig,
    pub num_labels: usize,
    pub vocab: VocabFingerprint,
    pub patterns: Vec<PatternParams>,
    pub mlp: MlpParams,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    #[serde(flatten)]
    model: ModelBundle,
    param_digest: String,
}

impl ModelBundle {
    pub fn random<R: Rng + ?Sized>(
        config: PatternSetConfig,
        vocab: VocabFingerprint,
        num_labels: usize,
        mlp_hidden: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let dim = vocab.dim;
        let patterns: Vec<PatternParams> = config
            .patterns
            .lengths()
            .map(|l| PatternParams::random(l, dim, std, rng))
            .collect();
        let mlp = MlpParams::random(patterns.len(), mlp_hidden, num_labels, std, rng);
        ModelBundle {
            version: MODEL_VERSION.to_string(),
            config,
            num_labels,
            vocab,
            patterns,
            mlp,
        }
    }

    pub fn dim(&self) -> usize {
        self.vocab.dim
    }

    pub fn layout(&self) -> ModelLayout {
        ModelLayout::new(&self.patterns, &self.mlp, self.dim())
    }

    /// All trainable scalars in layout order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout().total());
        for p in &self.patterns {
            p.flatten_into(&mut out);
        }
        self.mlp.flatten_into(&mut out);
        out
    }

    pub fn assign(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        let mut next = |x: &mut f64| *x = *it.next().expect("flat buffer too short");
        for p in &mut self.patterns {
            p.for_each_mut(&mut next);
        }
        self.mlp.for_each_mut(&mut next);
    }

    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.num_labels as u64).to_le_bytes());
        for x in self.flatten() {
            hasher.update(x.to_bits().to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn check_compatible(&self, embeddings: &Embeddings) -> Result<()> {
        let found = embeddings.fingerprint();
        if *found != self.vocab {
            return Err(ClassifierError::FingerprintMismatch {
                expected: format!("{}/{}", self.vocab.hash, self.vocab.dim),
                found: format!("{}/{}", found.hash, found.dim),
            });
        }
        Ok(())
    }

    /// Pattern scores for one document.
    pub fn encode(&self, vectors: &[&[f64]]) -> Result<Vec<f64>> {
        let z = automata::encode_vectors(&self.patterns, vectors, &self.config)?;
        if let Some(pattern) = z.iter().position(|x| !x.is_finite()) {
            return Err(ClassifierError::NonFiniteScore {
                pattern,
                score: z[pattern],
            });
        }
        Ok(z)
    }

    /// MLP head on a given `z`, without dropout.
    pub fn classify_z(&self, z: &[f64]) -> Prediction {
        let (_, logits) = self.mlp.forward(z, None);
        let probabilities = softmax(&logits);
        Prediction {
            z: z.to_vec(),
            logits,
            probabilities,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            model: self.clone(),
            param_digest: self.digest(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Parses a model file; `verify` checks the stored parameter digest.
    pub fn from_json(text: &str, verify: bool) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.model.version != MODEL_VERSION {
            return Err(ClassifierError::Version(file.model.version));
        }
        if verify && file.model.digest() != file.param_digest {
            return Err(ClassifierError::DigestMismatch);
        }
        Ok(file.model)
    }

    /// Writes atomically via a temporary file and rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&read_to_string(path.as_ref())?, true)
    }

    /// Loads without the digest check, returning whether the digest matched.
    pub fn load_unverified(path: impl AsRef<Path>) -> Result<(Self, bool)> {
        let text = read_to_string(path.as_ref())?;
        let file: ModelFile = serde_json::from_str(&text)?;
        if file.model.version != MODEL_VERSION {
            return Err(ClassifierError::Version(file.model.version));
        }
        let ok = file.model.digest() == file.param_digest;
        Ok((file.model, ok))
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| ClassifierError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| ClassifierError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub z: Vec<f64>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl Prediction {
    /// Highest probability, ties to the lowest class index.
    pub fn label(&self) -> usize {
        argmax(&self.probabilities)
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Dropout masks for `z` and the hidden layer: 0 or `1/(1−rate)`.
fn sample_masks(rng: &mut dyn RngCore, rate: f64, k: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let keep = 1.0 / (1.0 - rate);
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect()
    };
    let mz = draw(k);
    let mh = draw(h);
    (mz, mh)
}

/// Dropout source for training-mode forward passes.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut dyn RngCore,
}

/// Class probabilities for one document. With `dropout` set the pass runs in
/// training mode.
pub fn forward_logits(
    model: &ModelBundle,
    doc: &TokenizedDocument,
    embeddings: &Embeddings,
    dropout: Option<Dropout<'_>>,
) -> Result<Prediction> {
    model.check_compatible(embeddings)?;
    let vectors = embeddings.matrix.document_vectors(doc);
    let z = model.encode(&vectors)?;
    let masks = dropout
        .filter(|d| d.rate > 0.0)
        .map(|d| sample_masks(d.rng, d.rate, z.len(), model.mlp.hidden()));
    let (_, logits) = model
        .mlp
        .forward(&z, masks.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice())));
    let probabilities = softmax(&logits);
    Ok(Prediction {
        z,
        logits,
        probabilities,
    })
}

pub fn cross_entropy(probabilities: &[f64], label: usize) -> f64 {
    -probabilities[label].ln()
}

/// Records one pattern's document score on the tape.
fn record_pattern<'a>(
    tape: &mut Tape<'a>,
    layout: &ModelLayout,
    config: &PatternSetConfig,
    p: usize,
    length: usize,
    vectors: &[&'a [f64]],
) -> NodeId {
    let encode = |tape: &mut Tape<'a>, x: NodeId| match config.encoder {
        Encoder::Sigmoid => tape.sigmoid(x),
        Encoder::Identity => x,
    };
    let mut main = Vec::with_capacity(vectors.len());
    let mut self_loop = Vec::with_capacity(vectors.len());
    for v in vectors {
        let mut row = Vec::with_capacity(length);
        let mut sl_row = Vec::with_capacity(length);
        for i in 0..length {
            if config.self_loops {
                let x = tape.affine(layout.self_loop_weights(p, i), layout.self_loop_bias(p, i), v);
                sl_row.push(encode(tape, x));
            }
            let x = tape.affine(layout.main_weights(p, i), layout.main_bias(p, i), v);
            row.push(encode(tape, x));
        }
        main.push(row);
        self_loop.push(sl_row);
    }
    let epsilon = config.epsilons.then(|| {
        (0..length)
            .map(|i| {
                let c = tape.param(layout.epsilon(p, i));
                encode(tape, c)
            })
            .collect()
    });
    let trans = Transitions {
        self_loop: config.self_loops.then_some(self_loop),
        main,
        epsilon,
    };
    let out = automata::run_recurrence(
        &mut TapeAlgebra::new(tape, config.semiring),
        length,
        &trans,
        Default::default(),
    );
    match out.doc {
        Some(node) => node,
        None => tape.constant(config.semiring.zero()),
    }
}

/// Document score of one pattern and its gradient with respect to that
/// pattern's parameters. Word vectors are constants.
pub fn document_score_gradient(
    pattern: &PatternParams,
    vectors: &[&[f64]],
    config: &PatternSetConfig,
) -> Result<(f64, PatternParams)> {
    if vectors.is_empty() {
        return Err(AutomatonError::EmptyDocument.into());
    }
    let dim = pattern.dim();
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(AutomatonError::DimensionMismatch {
            expected: dim,
            found: v.len(),
        }
        .into());
    }
    let mut flat = Vec::with_capacity(pattern.num_parameters());
    pattern.flatten_into(&mut flat);
    let layout = ModelLayout::new(std::slice::from_ref(pattern), &MlpParams::zeros(1, 0, 0), dim);
    let mut tape = Tape::new(&flat);
    let score = record_pattern(&mut tape, &layout, config, 0, pattern.len(), vectors);
    let grads = tape.backward(score)?;
    let mut grad = pattern.clone();
    let mut it = grads.into_iter();
    grad.for_each_mut(|g| *g = it.next().expect("one gradient per parameter"));
    Ok((tape.value(score), grad))
}

/// Records the cross-entropy of one labeled document.
fn record_loss<'a>(
    tape: &mut Tape<'a>,
    model: &ModelBundle,
    layout: &ModelLayout,
    vectors: &[&'a [f64]],
    label: usize,
    masks: Option<&(Vec<f64>, Vec<f64>)>,
) -> NodeId {
    let mut z: Vec<NodeId> = model
        .patterns
        .iter()
        .enumerate()
        .map(|(p, params)| record_pattern(tape, layout, &model.config, p, params.len(), vectors))
        .collect();
    if let Some((mz, _)) = masks {
        z = z.iter().zip(mz).map(|(&n, &m)| tape.scale(n, m)).collect();
    }
    let mut hidden: Vec<NodeId> = (0..layout.hidden)
        .map(|j| {
            let row = layout.hidden_row(j);
            let pre = tape.linear(row, row + layout.inputs, z.clone());
            tape.relu(pre)
        })
        .collect();
    if let Some((_, mh)) = masks {
        hidden = hidden.iter().zip(mh).map(|(&n, &m)| tape.scale(n, m)).collect();
    }
    let logits: Vec<NodeId> = (0..layout.classes)
        .map(|c| {
            let row = layout.output_row(c);
            tape.linear(row, row + layout.hidden, hidden.clone())
        })
        .collect();
    tape.softmax_cross_entropy(logits, label)
}

/// Mean cross-entropy of a batch and its gradient with respect to `params`.
pub fn batch_loss_and_gradient(
    model: &ModelBundle,
    params: &[f64],
    batch: &[&TokenizedDocument],
    embeddings: &Embeddings,
    mut dropout: Option<Dropout<'_>>,
) -> Result<(f64, Vec<f64>)> {
    let layout = model.layout();
    let mut tape = Tape::new(params);
    let mut losses = Vec::with_capacity(batch.len());
    for doc in batch {
        let label = doc.label.ok_or(ClassifierError::MissingLabel {
            set: "train",
            index: 0,
        })?;
        let vectors = embeddings.matrix.document_vectors(doc);
        let masks = match dropout.as_mut() {
            Some(d) if d.rate > 0.0 => Some(sample_masks(
                d.rng,
                d.rate,
                model.patterns.len(),
                layout.hidden,
            )),
            _ => None,
        };
        losses.push(record_loss(&mut tape, model, &layout, &vectors, label, masks.as_ref()));
    }
    let total = tape.sum(losses);
    let mean = tape.scale(total, 1.0 / batch.len() as f64);
    let grads = tape.backward(mean)?;
    Ok((tape.value(mean), grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub patterns: PatternSpec,
    pub semiring: SemiringKind,
    pub encoder: Encoder,
    pub self_loops: bool,
    pub epsilons: bool,
    pub mlp_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            dropout: 0.0,
            batch_size: 150,
            max_epochs: 250,
            patience: 30,
            seed: 0,
            patterns: "5:10,4:10,3:10,2:10".parse().expect("valid spec"),
            semiring: SemiringKind::MaxProduct,
            encoder: Encoder::Sigmoid,
            self_loops: true,
            epsilons: true,
            mlp_hidden: 100,
        }
    }
}

impl TrainConfig {
    pub fn pattern_config(&self) -> PatternSetConfig {
        PatternSetConfig {
            self_loops: self.self_loops,
            epsilons: self.epsilons,
            ..PatternSetConfig::new(self.patterns.clone(), self.semiring, self.encoder)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ClassifierError::BadConfig(m));
        if !(0.0..1.0).contains(&self.learning_rate) {
            return bad(format!("learning rate {} outside [0, 1)", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.mlp_hidden == 0 {
            return bad("batch size, max epochs, patience and MLP hidden size must be positive".into());
        }
        self.pattern_config().validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the returned snapshot.
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub best_dev_accuracy: f64,
    pub stopped_early: bool,
    /// Scalars the optimizer updated.
    pub registered_parameters: usize,
}

impl TrainLog {
    /// One JSON record per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain record") + "\n")
            .collect()
    }
}

fn check_labels(docs: &[TokenizedDocument], set: &'static str, classes: usize) -> Result<()> {
    for (index, d) in docs.iter().enumerate() {
        let label = d.label.ok_or(ClassifierError::MissingLabel { set, index })?;
        if label >= classes {
            return Err(ClassifierError::LabelOutOfRange {
                set,
                label,
                classes,
            });
        }
    }
    Ok(())
}

/// Mean dev loss and accuracy under the eval-mode forward pass.
pub fn dev_metrics(
    model: &ModelBundle,
    docs: &[TokenizedDocument],
    embeddings: &Embeddings,
) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for d in docs {
        let pred = forward_logits(model, d, embeddings, None)?;
        let label = d.label.expect("labels checked");
        loss += cross_entropy(&pred.probabilities, label);
        correct += usize::from(pred.label() == label);
    }
    Ok((loss / docs.len() as f64, correct as f64 / docs.len() as f64))
}

/// Minibatch Adam on cross-entropy with dev-loss early stopping. Returns the
/// best-dev-loss snapshot.
pub fn train(
    train_set: &[TokenizedDocument],
    dev_set: &[TokenizedDocument],
    embeddings: &Embeddings,
    config: &TrainConfig,
) -> Result<(ModelBundle, TrainLog)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(ClassifierError::EmptySet("train"));
    }
    if dev_set.is_empty() {
        return Err(ClassifierError::EmptySet("dev"));
    }
    let mut classes = 0;
    for (index, d) in train_set.iter().enumerate() {
        let label = d.label.ok_or(ClassifierError::MissingLabel { set: "train", index })?;
        classes = classes.max(label + 1);
    }
    if classes < 2 {
        return Err(ClassifierError::TooFewClasses(classes));
    }
    check_labels(dev_set, "dev", classes)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ModelBundle::random(
        config.pattern_config(),
        embeddings.fingerprint().clone(),
        classes,
        config.mlp_hidden,
        INIT_STD,
        &mut rng,
    );
    let layout = model.layout();
    let mut params = model.flatten();
    let mut adam = AdamState::new(layout.total(), config.learning_rate);
    info!(
        "training {} patterns ({} sopa + {} mlp parameters) on {} documents",
        model.patterns.len(),
        layout.sopa_total(),
        layout.total() - layout.sopa_total(),
        train_set.len()
    );

    let mut best = model.clone();
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_dev_loss: f64::INFINITY,
        best_dev_accuracy: 0.0,
        stopped_early: false,
        registered_parameters: adam.registered(),
    };
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TokenizedDocument> = chunk.iter().map(|&i| &train_set[i]).collect();
            let dropout = Some(Dropout {
                rate: config.dropout,
                rng: &mut rng,
            });
            let (loss, grads) = batch_loss_and_gradient(&model, &params, &batch, embeddings, dropout)?;
            if !loss.is_finite() {
                return Err(ClassifierError::NonFiniteLoss { epoch });
            }
            epoch_loss += loss * batch.len() as f64;
            adam.step(&mut params, &grads).map_err(|e| match e {
                AutodiffError::NonFiniteGradient { index } => ClassifierError::NonFiniteGradient {
                    epoch,
                    parameter: layout.describe(index),
                },
                other => other.into(),
            })?;
        }
        model.assign(&params);
        let (dev_loss, dev_accuracy) = dev_metrics(&model, dev_set, embeddings)?;
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            dev_loss,
            dev_accuracy,
        };
        debug!("{}", serde_json::to_string(&record).expect("plain record"));
        log.epochs.push(record);
        if dev_loss < log.best_dev_loss {
            best = model.clone();
            log.best_epoch = epoch;
            log.best_dev_loss = dev_loss;
            log.best_dev_accuracy = dev_accuracy;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    info!(
        "best epoch {} dev loss {:.4} dev accuracy {:.4}",
        log.best_epoch, log.best_dev_loss, log.best_dev_accuracy
    );
    Ok((best, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub label: usize,
    pub support: usize,
    pub correct: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_class: Vec<ClassCounts>,
}

pub fn evaluate(
    model: &ModelBundle,
    dataset: &[TokenizedDocument],
    embeddings: &Embeddings,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(ClassifierError::EmptySet("evaluation"));
    }
    check_labels(dataset, "evaluation", model.num_labels)?;
    let mut per_class: Vec<ClassCounts> = (0..model.num_labels)
        .map(|label| ClassCounts {
            label,
            support: 0,
            correct: 0,
            predicted: 0,
        })
        .collect();
    let mut correct = 0;
    for d in dataset {
        let pred = forward_logits(model, d, embeddings, None)?.label();
        let gold = d.label.expect("labels checked");
        per_class[gold].support += 1;
        per_class[pred].predicted += 1;
        if pred == gold {
            per_class[gold].correct += 1;
            correct += 1;
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / dataset.len() as f64,
        correct,
        total: dataset.len(),
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub sopa: usize,
    pub mlp: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.sopa + self.mlp
    }
}

pub fn count_parameters(model: &ModelBundle) -> ParamCount {
    ParamCount {
        sopa: model.patterns.iter().map(PatternParams::num_parameters).sum(),
        mlp: model.mlp.num_parameters(),
    }
}

/// Adds `N(0, scale)` noise to every parameter, moving the model off exact
/// max ties before a finite-difference check.
pub fn jitter_parameters<R: Rng + ?Sized>(model: &mut ModelBundle, scale: f64, rng: &mut R) {
    let normal = Normal::new(0.0, scale).expect("finite scale");
    let flat: Vec<f64> = model.flatten().into_iter().map(|x| x + normal.sample(rng)).collect();
    model.assign(&flat);
}

/// Finite-difference check of the tape gradient of the mean eval-mode
/// cross-entropy over `docs`.
pub fn gradient_check(
    model: &ModelBundle,
    docs: &[TokenizedDocument],
    embeddings: &Embeddings,
    keep_worst: usize,
) -> Result<GradCheckReport> {
    let params = model.flatten();
    let batch: Vec<&TokenizedDocument> = docs.iter().collect();
    let (_, analytic) = batch_loss_and_gradient(model, &params, &batch, embeddings, None)?;
    let mut probe = model.clone();
    let mut failure = None;
    let report = finite_difference_check(
        |p| {
            probe.assign(p);
            let mut total = 0.0;
            for d in docs {
                match forward_logits(&probe, d, embeddings, None) {
                    Ok(pred) => total += cross_entropy(&pred.probabilities, d.label.unwrap_or(0)),
                    Err(e) => {
                        failure.get_or_insert(e);
                        return f64::NAN;
                    }
                }
            }
            total / docs.len() as f64
        },
        &params,
        &analytic,
        FD_STEP,
        keep_worst,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Candidate values per hyperparameter, sampled uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SearchSpace {
    pub learning_rates: Vec<f64>,
    pub dropouts: Vec<f64>,
    pub mlp_hidden: Vec<usize>,
    pub patterns: Vec<PatternSpec>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        let spec = |s: &str| s.parse().expect("valid spec");
        SearchSpace {
            learning_rates: vec![0.01, 0.05, 0.001, 0.005],
            dropouts: vec![0.0, 0.05, 0.1, 0.2],
            mlp_hidden: vec![10, 25, 50, 100, 300],
            patterns: vec![
                spec("5:10,4:10,3:10,2:10"),
                spec("6:10,5:10,4:10"),
                spec("6:10,5:10,4:10,3:10,2:10"),
                spec("6:20,5:20,4:10,3:10,2:10"),
                spec("7:10,6:10,5:10,4:10,3:10,2:10"),
            ],
        }
    }
}

impl SearchSpace {
    pub fn is_empty(&self) -> bool {
        self.learning_rates.is_empty()
            || self.dropouts.is_empty()
            || self.mlp_hidden.is_empty()
            || self.patterns.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRow {
    pub iteration: usize,
    pub config: TrainConfig,
    pub dev_accuracy: f64,
    pub dev_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: TrainConfig,
    pub best_dev_accuracy: f64,
    /// Sorted best first.
    pub rows: Vec<SearchRow>,
}

pub const DEFAULT_SEARCH_ITERATIONS: usize = 30;

/// Samples `iterations` configurations from `space` on top of `base`, trains
/// each, and ranks them by best dev accuracy (ties: lower dev loss, then
/// earlier iteration).
pub fn random_search(
    space: &SearchSpace,
    iterations: usize,
    base: &TrainConfig,
    train_set: &[TokenizedDocument],
    dev_set: &[TokenizedDocument],
    embeddings: &Embeddings,
    seed: u64,
) -> Result<SearchOutcome> {
    if space.is_empty() {
        return Err(ClassifierError::BadConfig("empty search space".into()));
    }
    if iterations == 0 {
        return Err(ClassifierError::BadConfig("zero search iterations".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(iterations);
    for iteration in 0..iterations {
        let pick = |rng: &mut ChaCha8Rng, n: usize| rng.random_range(0..n);
        let config = TrainConfig {
            learning_rate: space.learning_rates[pick(&mut rng, space.learning_rates.len())],
            dropout: space.dropouts[pick(&mut rng, space.dropouts.len())],
            mlp_hidden: space.mlp_hidden[pick(&mut rng, space.mlp_hidden.len())],
            patterns: space.patterns[pick(&mut rng, space.patterns.len())].clone(),
            seed: rng.random(),
            ..base.clone()
        };
        info!("search iteration {iteration}: {}", serde_json::to_string(&config)?);
        let (_, log) = train(train_set, dev_set, embeddings, &config)?;
        rows.push(SearchRow {
            iteration,
            config,
            dev_accuracy: log.best_dev_accuracy,
            dev_loss: log.best_dev_loss,
            best_epoch: log.best_epoch,
            epochs_run: log.epochs.len(),
        });
    }
    rows.sort_by(|a, b| {
        b.dev_accuracy
            .total_cmp(&a.dev_accuracy)
            .then(a.dev_loss.total_cmp(&b.dev_loss))
            .then(a.iteration.cmp(&b.iteration))
    });
    Ok(SearchOutcome {
        best: rows[0].config.clone(),
        best_dev_accuracy: rows[0].dev_accuracy,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::tokenize_and_encode;
    use crate::synthetic::{generate, PlantedTaskConfig};
    use proptest::prelude::*;

    fn small_embeddings(seed: u64) -> Embeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        Embeddings::from_pairs(
            ["a", "b", "c", "d", "e"]
                .iter()
                .map(|w| (*w, (0..3).map(|_| normal.sample(&mut rng)).collect())),
            true,
        )
    }

    fn doc(emb: &Embeddings, text: &str, label: usize) -> TokenizedDocument {
        tokenize_and_encode(text, &emb.vocab, false).unwrap().with_label(label)
    }

    fn small_model(emb: &Embeddings, spec: &str, hidden: usize, seed: u64) -> ModelBundle {
        let config = PatternSetConfig::new(spec.parse().unwrap(), SemiringKind::MaxProduct, Encoder::Sigmoid);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelBundle::random(config, emb.fingerprint().clone(), 2, hidden, INIT_STD, &mut rng)
    }

    fn tiny_task() -> crate::synthetic::PlantedTask {
        generate(&PlantedTaskConfig {
            train: 40,
            dev: 20,
            test: 20,
            ..Default::default()
        })
    }

    fn quick_config(lr: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            patterns: "3:2".parse().unwrap(),
            mlp_hidden: 5,
            max_epochs: 5,
            batch_size: 10,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_mlp_gives_uniform_probabilities() {
        let emb = small_embeddings(1);
        let mut model = small_model(&emb, "2:3", 4, 1);
        model.mlp = MlpParams::zeros(3, 4, 2);
        for text in ["a", "a b c", "e d c b a"] {
            let p = forward_logits(&model, &doc(&emb, text, 0), &emb, None).unwrap();
            assert_eq!(p.probabilities, vec![0.5, 0.5]);
        }
    }

    #[test]
    fn eval_mode_is_repeatable_and_normalized() {
        let emb = small_embeddings(2);
        let model = small_model(&emb, "3:2,2:2", 6, 2);
        let d = doc(&emb, "a b c d", 0);
        let p1 = forward_logits(&model, &d, &emb, None).unwrap();
        let p2 = forward_logits(&model, &d, &emb, None).unwrap();
        assert_eq!(p1, p2);
        assert!((p1.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn train_mode_dropout_changes_outputs() {
        let emb = small_embeddings(2);
        let model = small_model(&emb, "3:4,2:4", 8, 2);
        let d = doc(&emb, "a b c d", 0);
        let eval = forward_logits(&model, &d, &emb, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let differs = (0..10).any(|_| {
            let p = forward_logits(&model, &d, &emb, Some(Dropout { rate: 0.5, rng: &mut rng })).unwrap();
            assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            p.logits != eval.logits
        });
        assert!(differs);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = forward_logits(&model, &d, &emb, Some(Dropout { rate: 0.0, rng: &mut rng })).unwrap();
        assert_eq!(p, eval);
    }

    #[test]
    fn stronger_match_raises_class_zero_probability() {
        let emb = small_embeddings(3);
        let mut model = small_model(&emb, "2:1", 1, 3);
        model.mlp = MlpParams::zeros(1, 1, 2);
        model.mlp.hidden_weights[0][0] = 5.0;
        model.mlp.output_weights[0][0] = 1.0;
        let d = doc(&emb, "a b c", 0);
        let mut last = forward_logits(&model, &d, &emb, None).unwrap();
        for _ in 0..5 {
            for b in &mut model.patterns[0].main_bias {
                *b += 0.5;
            }
            let p = forward_logits(&model, &d, &emb, None).unwrap();
            assert!(p.z[0] > last.z[0]);
            assert!(p.probabilities[0] > last.probabilities[0]);
            last = p;
        }
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let emb = small_embeddings(4);
        let model = small_model(&emb, "2:1", 2, 4);
        let other = Embeddings::from_pairs([("x", vec![1.0, 0.0, 0.0])], false);
        let d = tokenize_and_encode("x", &other.vocab, false).unwrap();
        assert!(matches!(
            forward_logits(&model, &d, &other, None),
            Err(ClassifierError::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn parameter_counts() {
        let config = PatternSetConfig::new("5:10".parse().unwrap(), SemiringKind::MaxProduct, Encoder::Sigmoid);
        let fp = VocabFingerprint { hash: String::new(), dim: 300 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = ModelBundle::random(config, fp, 2, 100, INIT_STD, &mut rng);
        let counts = count_parameters(&model);
        assert_eq!(counts.sopa, 30_150);
        assert_eq!(counts.mlp, 11 * 100 + 101 * 2);
        assert_eq!(model.flatten().len(), counts.total());
        assert_eq!(AdamState::new(model.layout().total(), 0.1).registered(), counts.total());

        let emb = Embeddings::from_pairs([("x", vec![1.0, 0.0])], false);
        let model = ModelBundle::random(
            PatternSetConfig::new("1:1".parse().unwrap(), SemiringKind::MaxSum, Encoder::Identity),
            emb.fingerprint().clone(),
            2,
            3,
            INIT_STD,
            &mut rng,
        );
        assert_eq!(count_parameters(&model).sopa, 7);
    }

    #[test]
    fn layout_names_match_flatten_order() {
        let emb = small_embeddings(5);
        let mut model = small_model(&emb, "2:1,1:1", 2, 5);
        let layout = model.layout();

        let mut flat = model.flatten();
        flat[layout.main_bias(1, 0)] = 1234.5;
        flat[layout.self_loop_weights(0, 1) + 2] = -1234.5;
        flat[layout.hidden_row(1) + 2] = 77.0;
        model.assign(&flat);
        assert_eq!(model.patterns[1].main_bias[0], 1234.5);
        assert_eq!(model.patterns[0].self_loop_weights[1][2], -1234.5);
        assert_eq!(model.mlp.hidden_bias[1], 77.0);
        assert_eq!(model.flatten(), flat);

        assert_eq!(layout.describe(layout.main_bias(1, 0)), "pattern 1 b[0]");
        assert_eq!(layout.describe(layout.self_loop_weights(0, 1) + 2), "pattern 0 u[1][2]");
        assert_eq!(layout.describe(layout.epsilon(0, 1)), "pattern 0 c[1]");
        assert_eq!(layout.describe(layout.hidden_row(1) + 2), "mlp hidden bias[1]");
        assert_eq!(layout.describe(layout.output_row(1)), "mlp output weight[1][0]");
        assert_eq!(layout.describe(layout.total() - 1), "mlp output bias[1]");
    }

    #[test]
    fn uniform_model_loss_is_log_classes() {
        let emb = small_embeddings(6);
        let mut model = small_model(&emb, "2:2", 3, 6);
        model.mlp = MlpParams::zeros(2, 3, 2);
        let docs = [doc(&emb, "a b", 0), doc(&emb, "c d e", 1)];
        let batch: Vec<&TokenizedDocument> = docs.iter().collect();
        let (loss, _) = batch_loss_and_gradient(&model, &model.flatten(), &batch, &emb, None).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn uniform_model_accuracy_is_share_of_class_zero() {
        let emb = small_embeddings(7);
        let mut model = small_model(&emb, "2:2", 3, 7);
        model.mlp = MlpParams::zeros(2, 3, 2);
        let docs = vec![doc(&emb, "a b", 0), doc(&emb, "c d", 1), doc(&emb, "e", 1), doc(&emb, "a", 0)];
        let report = evaluate(&model, &docs, &emb).unwrap();
        assert_eq!(report.accuracy, 0.5);
        assert_eq!(report.per_class[0].predicted, 4);
        assert_eq!(report.per_class[1].support, 2);
        let one = evaluate(&model, &docs[..1], &emb).unwrap();
        assert_eq!(one.accuracy, 1.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let emb = small_embeddings(8);
        let model = small_model(&emb, "3:1,2:2", 4, 8);
        let docs = vec![doc(&emb, "a b c d", 0), doc(&emb, "e c a", 1)];
        let report = gradient_check(&model, &docs, &emb, 3).unwrap();
        assert_eq!(report.checked, model.layout().total());
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let task = tiny_task();
        let cfg = quick_config(0.0);
        let (model, log) = train(&task.train, &task.dev, &task.embeddings, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let initial = ModelBundle::random(
            cfg.pattern_config(),
            task.embeddings.fingerprint().clone(),
            2,
            cfg.mlp_hidden,
            INIT_STD,
            &mut rng,
        );
        assert_eq!(model.flatten(), initial.flatten());
        assert_eq!(log.epochs.len(), 1 + cfg.patience.min(cfg.max_epochs - 1));
        assert!(log.epochs.iter().all(|e| e.dev_loss == log.epochs[0].dev_loss));
    }

    #[test]
    fn patience_one_stops_after_two_worsening_epochs() {
        let task = tiny_task();
        // Train is mostly class 1 and dev is all class 0, so every update hurts dev.
        let train_set: Vec<TokenizedDocument> = task
            .train
            .iter()
            .enumerate()
            .map(|(i, d)| d.clone().with_label(usize::from(i % 10 != 0)))
            .collect();
        let dev: Vec<TokenizedDocument> = task.dev.iter().map(|d| d.clone().with_label(0)).collect();
        let cfg = TrainConfig {
            patience: 1,
            max_epochs: 50,
            ..quick_config(0.01)
        };
        let (_, log) = train(&train_set, &dev, &task.embeddings, &cfg).unwrap();
        assert!(log.epochs[1].dev_loss > log.epochs[0].dev_loss);
        assert_eq!(log.epochs.len(), 2);
        assert!(log.stopped_early);
        assert_eq!(log.best_epoch, 1);
    }

    #[test]
    fn returned_snapshot_has_the_lowest_dev_loss() {
        let task = tiny_task();
        let cfg = TrainConfig {
            max_epochs: 15,
            ..quick_config(0.01)
        };
        let (model, log) = train(&task.train, &task.dev, &task.embeddings, &cfg).unwrap();
        let (loss, acc) = dev_metrics(&model, &task.dev, &task.embeddings).unwrap();
        assert_eq!(loss, log.best_dev_loss);
        assert_eq!(acc, log.best_dev_accuracy);
        assert!(log.epochs.iter().all(|e| loss <= e.dev_loss));
        assert_eq!(log.to_jsonl().lines().count(), log.epochs.len());
    }

    #[test]
    fn fixed_seed_training_is_bit_identical() {
        let task = tiny_task();
        let cfg = TrainConfig {
            dropout: 0.2,
            ..quick_config(0.01)
        };
        let (a, la) = train(&task.train, &task.dev, &task.embeddings, &cfg).unwrap();
        let (b, lb) = train(&task.train, &task.dev, &task.embeddings, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn label_errors() {
        let task = tiny_task();
        let cfg = quick_config(0.01);
        let mut dev = task.dev.clone();
        dev[0].label = Some(2);
        assert!(matches!(
            train(&task.train, &dev, &task.embeddings, &cfg),
            Err(ClassifierError::LabelOutOfRange { label: 2, .. })
        ));
        let single: Vec<_> = task.train.iter().map(|d| d.clone().with_label(0)).collect();
        assert!(matches!(
            train(&single, &task.dev, &task.embeddings, &cfg),
            Err(ClassifierError::TooFewClasses(1))
        ));
        assert!(matches!(
            train(&[], &task.dev, &task.embeddings, &cfg),
            Err(ClassifierError::EmptySet("train"))
        ));
        let mut unlabeled = task.train.clone();
        unlabeled[3].label = None;
        assert!(matches!(
            train(&unlabeled, &task.dev, &task.embeddings, &cfg),
            Err(ClassifierError::MissingLabel { index: 3, .. })
        ));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let task = tiny_task();
        for cfg in [
            TrainConfig { dropout: 1.0, ..quick_config(0.01) },
            TrainConfig { learning_rate: -0.1, ..quick_config(0.01) },
            TrainConfig { batch_size: 0, ..quick_config(0.01) },
            TrainConfig { patterns: "8:1".parse().unwrap(), ..quick_config(0.01) },
        ] {
            assert!(train(&task.train, &task.dev, &task.embeddings, &cfg).is_err());
        }
    }

    #[test]
    fn model_json_round_trip_is_exact() {
        let task = tiny_task();
        let (model, _) = train(&task.train, &task.dev, &task.embeddings, &quick_config(0.01)).unwrap();
        let back = ModelBundle::from_json(&model.to_json().unwrap(), true).unwrap();
        assert_eq!(back, model);
        assert_eq!(
            evaluate(&back, &task.test, &task.embeddings).unwrap(),
            evaluate(&model, &task.test, &task.embeddings).unwrap()
        );

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        assert_eq!(ModelBundle::load(&path).unwrap(), model);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn tampered_parameters_fail_the_digest() {
        let emb = small_embeddings(9);
        let model = small_model(&emb, "2:1", 2, 9);
        let mut tampered = model.clone();
        tampered.patterns[0].main_bias[0] = -tampered.patterns[0].main_bias[0];
        let mut value: serde_json::Value = serde_json::from_str(&model.to_json().unwrap()).unwrap();
        value["patterns"] = serde_json::to_value(&tampered.patterns).unwrap();
        let text = value.to_string();
        assert!(matches!(ModelBundle::from_json(&text, true), Err(ClassifierError::DigestMismatch)));
        assert_eq!(ModelBundle::from_json(&text, false).unwrap(), tampered);

        value["version"] = "other".into();
        assert!(matches!(
            ModelBundle::from_json(&value.to_string(), false),
            Err(ClassifierError::Version(_))
        ));
    }

    #[test]
    fn search_is_seeded_and_ranked() {
        let task = tiny_task();
        let base = quick_config(0.01);
        let space = SearchSpace {
            learning_rates: vec![0.01, 0.005],
            dropouts: vec![0.0, 0.1],
            mlp_hidden: vec![3, 5],
            patterns: vec!["3:2".parse().unwrap(), "2:2".parse().unwrap()],
        };
        let a = random_search(&space, 3, &base, &task.train, &task.dev, &task.embeddings, 11).unwrap();
        let b = random_search(&space, 3, &base, &task.train, &task.dev, &task.embeddings, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 3);
        assert_eq!(a.best, a.rows[0].config);
        assert!(a.rows.windows(2).all(|w| w[0].dev_accuracy >= w[1].dev_accuracy));

        let one = random_search(&space, 1, &base, &task.train, &task.dev, &task.embeddings, 5).unwrap();
        assert_eq!(one.rows.len(), 1);
        assert_eq!(one.best, one.rows[0].config);

        let single = SearchSpace {
            learning_rates: vec![0.01],
            dropouts: vec![0.0],
            mlp_hidden: vec![5],
            patterns: vec!["3:2".parse().unwrap()],
        };
        let out = random_search(&single, 1, &base, &task.train, &task.dev, &task.embeddings, 5).unwrap();
        let (_, log) = train(&task.train, &task.dev, &task.embeddings, &out.best).unwrap();
        assert_eq!(out.best_dev_accuracy, log.best_dev_accuracy);
        assert_eq!((out.best.learning_rate, out.best.mlp_hidden), (0.01, 5));

        let empty = SearchSpace { dropouts: vec![], ..single };
        assert!(random_search(&empty, 1, &base, &task.train, &task.dev, &task.embeddings, 5).is_err());
    }

    #[test]
    fn default_search_space_covers_the_grid() {
        let s = SearchSpace::default();
        assert_eq!(s.learning_rates.len(), 4);
        assert_eq!(s.dropouts.len(), 4);
        assert_eq!(s.mlp_hidden, vec![10, 25, 50, 100, 300]);
        assert_eq!(s.patterns.len(), 5);
        assert_eq!(s.patterns[4].max_length(), 7);
    }

    proptest! {
        #[test]
        fn softmax_normalizes_and_ignores_shifts(
            logits in proptest::collection::vec(-30.0f64..30.0, 1..8),
            shift in -50.0f64..50.0,
        ) {
            let p = softmax(&logits);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
            for (a, b) in p.iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            for (i, &x) in p.iter().enumerate() {
                prop_assert!(cross_entropy(&p, i) >= 0.0);
                prop_assert!(x >= 0.0);
            }
        }
    }
}
