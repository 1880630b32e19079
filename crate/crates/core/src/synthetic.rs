//! Planted-trigram classification task.
//!
//! Documents are random word sequences. Positives contain a fixed trigram at a
//! random position; negatives never contain it.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embeddings::{tokenize_and_encode, Embeddings, TokenizedDocument};

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTaskConfig {
    pub vocab_size: usize,
    pub dim: usize,
    /// Documents per split; each split is half positive, half negative.
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for PlantedTaskConfig {
    fn default() -> Self {
        PlantedTaskConfig {
            vocab_size: 200,
            dim: 10,
            train: 500,
            dev: 200,
            test: 200,
            min_len: 8,
            max_len: 15,
            seed: 13,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedTask {
    pub embeddings: Embeddings,
    pub trigram: [String; 3],
    pub train: Vec<TokenizedDocument>,
    pub dev: Vec<TokenizedDocument>,
    pub test: Vec<TokenizedDocument>,
}

/// Label of documents containing the trigram.
pub const POSITIVE: usize = 1;

pub fn contains_trigram(words: &[String], trigram: &[String; 3]) -> bool {
    words.windows(3).any(|w| w == trigram)
}

fn word(i: usize) -> String {
    format!("w{i:03}")
}

pub fn generate(config: &PlantedTaskConfig) -> PlantedTask {
    assert!(config.vocab_size >= 3 && config.min_len >= 3 && config.min_len <= config.max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let words: Vec<String> = (0..config.vocab_size).map(word).collect();
    let pairs: Vec<(String, Vec<f64>)> = words
        .iter()
        .map(|w| {
            let v = (0..config.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            (w.clone(), v)
        })
        .collect();
    let embeddings = Embeddings::from_pairs(pairs, true);

    let picks: Vec<&String> = words.choose_multiple(&mut rng, 3).collect();
    let trigram = [picks[0].clone(), picks[1].clone(), picks[2].clone()];

    let mut split = |n: usize| -> Vec<TokenizedDocument> {
        (0..n)
            .map(|i| {
                let positive = i % 2 == 0;
                let len = rng.random_range(config.min_len..=config.max_len);
                let text = loop {
                    let mut doc: Vec<String> =
                        (0..len).map(|_| words.choose(&mut rng).unwrap().clone()).collect();
                    if positive {
                        let at = rng.random_range(0..=len - 3);
                        doc[at..at + 3].clone_from_slice(&trigram);
                        break doc;
                    }
                    if !contains_trigram(&doc, &trigram) {
                        break doc;
                    }
                };
                let label = usize::from(positive) * POSITIVE;
                tokenize_and_encode(&text.join(" "), &embeddings.vocab, false)
                    .expect("non-empty document")
                    .with_label(label)
            })
            .collect()
    };
    let train = split(config.train);
    let dev = split(config.dev);
    let test = split(config.test);
    PlantedTask {
        embeddings,
        trigram,
        train,
        dev,
        test,
    }
}

pub struct PlantedFiles {
    pub embeddings: PathBuf,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

fn dataset_text(docs: &[TokenizedDocument]) -> String {
    docs.iter()
        .map(|d| format!("{}\t{}\n", d.label.unwrap_or(0), d.raw.join(" ")))
        .collect()
}

impl PlantedTask {
    /// Writes `embeddings.txt` and `{train,dev,test}.tsv` into `dir`.
    pub fn write_files(&self, dir: &Path) -> io::Result<PlantedFiles> {
        let m = &self.embeddings.matrix;
        let mut emb = String::new();
        for (i, w) in self.embeddings.vocab.words().iter().enumerate() {
            emb.push_str(w);
            for x in m.row(i) {
                emb.push(' ');
                emb.push_str(&x.to_string());
            }
            emb.push('\n');
        }
        let files = PlantedFiles {
            embeddings: dir.join("embeddings.txt"),
            train: dir.join("train.tsv"),
            dev: dir.join("dev.tsv"),
            test: dir.join("test.tsv"),
        };
        fs::write(&files.embeddings, emb)?;
        fs::write(&files.train, dataset_text(&self.train))?;
        fs::write(&files.dev, dataset_text(&self.dev))?;
        fs::write(&files.test, dataset_text(&self.test))?;
        Ok(files)
    }
}
