//! Pretrained word vectors, vocabulary and tokenized documents.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::sync::OnceLock;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("embedding file is empty")]
    Empty,
    #[error("line {line}: expected {expected} components, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: cannot parse `{token}` as a number")]
    BadNumber { line: usize, token: String },
    #[error("line {line}: word has no vector components")]
    NoComponents { line: usize },
    #[error("document has no tokens")]
    EmptyDocument,
    #[error("dataset line {line}: {message}")]
    BadDatasetLine { line: usize, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Bijection between words and row indices of an [`EmbeddingMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    words: Vec<String>,
    dim: usize,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.words.get(index).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Content hash of the ordered word list plus the vector dimension.
    pub fn fingerprint(&self) -> VocabFingerprint {
        let mut hasher = Sha256::new();
        for w in &self.words {
            hasher.update(w.as_bytes());
            hasher.update([0u8]);
        }
        hasher.update((self.dim as u64).to_le_bytes());
        VocabFingerprint {
            hash: hex::encode(hasher.finalize()),
            dim: self.dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabFingerprint {
    pub hash: String,
    pub dim: usize,
}

/// Row-major `|V| × e` matrix with an extra all-zero row used for OOV lookups.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Vec<f64>,
    rows: usize,
    dim: usize,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, normalize: bool) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let n = rows.len();
        let mut data = Vec::with_capacity((n + 1) * dim);
        for r in rows {
            assert_eq!(r.len(), dim, "ragged embedding rows");
            data.extend(r);
        }
        data.extend(std::iter::repeat_n(0.0, dim));
        let mut m = EmbeddingMatrix {
            data,
            rows: n,
            dim,
            normalized: false,
        };
        if normalize {
            m.normalize();
        }
        m
    }

    /// Scales each nonzero row to unit Euclidean norm.
    pub fn normalize(&mut self) {
        if self.dim == 0 {
            return;
        }
        for row in self.data.chunks_mut(self.dim).take(self.rows) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        self.normalized = true;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    /// Vector for a token; OOV maps to the zero vector.
    pub fn lookup(&self, token: Token) -> &[f64] {
        match token {
            Token::Word(i) => self.row(i),
            Token::Oov => self.row(self.rows),
        }
    }

    /// Vectors for every token of a document, in order.
    pub fn document_vectors<'a>(&'a self, doc: &TokenizedDocument) -> Vec<&'a [f64]> {
        doc.tokens.iter().map(|&t| self.lookup(t)).collect()
    }
}

/// Vocabulary paired with its vectors.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub vocab: Vocabulary,
    pub matrix: EmbeddingMatrix,
    fingerprint: OnceLock<VocabFingerprint>,
}

impl Embeddings {
    pub fn new(vocab: Vocabulary, matrix: EmbeddingMatrix) -> Self {
        assert_eq!(vocab.len(), matrix.rows());
        Embeddings {
            vocab,
            matrix,
            fingerprint: OnceLock::new(),
        }
    }

    /// Builds embeddings from `(word, vector)` pairs. Later duplicates are ignored.
    pub fn from_pairs<I, S>(pairs: I, normalize: bool) -> Self
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut index = HashMap::new();
        let mut words = Vec::new();
        let mut rows = Vec::new();
        for (w, v) in pairs {
            let w = w.into();
            if index.contains_key(&w) {
                continue;
            }
            index.insert(w.clone(), words.len());
            words.push(w);
            rows.push(v);
        }
        let matrix = EmbeddingMatrix::from_rows(rows, normalize);
        let vocab = Vocabulary {
            index,
            words,
            dim: matrix.dim(),
        };
        Embeddings::new(vocab, matrix)
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    /// Cached [`Vocabulary::fingerprint`].
    pub fn fingerprint(&self) -> &VocabFingerprint {
        self.fingerprint.get_or_init(|| self.vocab.fingerprint())
    }
}

/// Reads a whitespace-separated `word v1 … ve` file.
pub fn load_embeddings(
    path: impl AsRef<Path>,
    normalize: bool,
) -> Result<(Vocabulary, EmbeddingMatrix), EmbeddingError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_embeddings(file, normalize).map_err(|e| match e {
        EmbeddingError::Io { source, .. } => EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        },
        other => other,
    })
}

pub fn read_embeddings(
    reader: impl Read,
    normalize: bool,
) -> Result<(Vocabulary, EmbeddingMatrix), EmbeddingError> {
    let reader = BufReader::new(reader);
    let mut index = HashMap::new();
    let mut words = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| EmbeddingError::Io {
            path: String::new(),
            source,
        })?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let vector = parts
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| EmbeddingError::BadNumber {
                    line: lineno,
                    token: tok.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if vector.is_empty() {
            return Err(EmbeddingError::NoComponents { line: lineno });
        }
        match dim {
            None => dim = Some(vector.len()),
            Some(d) if d != vector.len() => {
                return Err(EmbeddingError::DimensionMismatch {
                    line: lineno,
                    expected: d,
                    found: vector.len(),
                })
            }
            Some(_) => {}
        }
        if index.contains_key(word) {
            warn!("line {lineno}: duplicate word `{word}` ignored, keeping first occurrence");
            continue;
        }
        index.insert(word.to_string(), words.len());
        words.push(word.to_string());
        rows.push(vector);
    }
    let Some(dim) = dim else {
        return Err(EmbeddingError::Empty);
    };
    let matrix = EmbeddingMatrix::from_rows(rows, normalize);
    Ok((Vocabulary { index, words, dim }, matrix))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Token {
    Word(usize),
    Oov,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedDocument {
    pub tokens: Vec<Token>,
    pub raw: Vec<String>,
    pub label: Option<usize>,
}

impl TokenizedDocument {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }
}

/// Whitespace tokenization with optional lowercasing.
pub fn tokenize_and_encode(
    text: &str,
    vocab: &Vocabulary,
    lowercase: bool,
) -> Result<TokenizedDocument, EmbeddingError> {
    let raw: Vec<String> = text
        .split_whitespace()
        .map(|t| if lowercase { t.to_lowercase() } else { t.to_string() })
        .collect();
    if raw.is_empty() {
        return Err(EmbeddingError::EmptyDocument);
    }
    let tokens = raw
        .iter()
        .map(|t| vocab.get(t).map_or(Token::Oov, Token::Word))
        .collect();
    Ok(TokenizedDocument {
        tokens,
        raw,
        label: None,
    })
}

/// Reads `label<TAB>text` lines. Blank lines are skipped.
pub fn read_dataset(
    reader: impl Read,
    vocab: &Vocabulary,
    lowercase: bool,
) -> Result<Vec<TokenizedDocument>, EmbeddingError> {
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| EmbeddingError::Io {
            path: String::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let (label, text) = line
            .split_once('\t')
            .ok_or_else(|| EmbeddingError::BadDatasetLine {
                line: lineno,
                message: "missing tab between label and text".into(),
            })?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| EmbeddingError::BadDatasetLine {
                line: lineno,
                message: format!("label `{label}` is not a non-negative integer"),
            })?;
        let doc = tokenize_and_encode(text, vocab, lowercase).map_err(|_| {
            EmbeddingError::BadDatasetLine {
                line: lineno,
                message: "document has no tokens".into(),
            }
        })?;
        docs.push(doc.with_label(label));
    }
    if docs.is_empty() {
        return Err(EmbeddingError::EmptyDataset);
    }
    Ok(docs)
}

pub fn load_dataset(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    lowercase: bool,
) -> Result<Vec<TokenizedDocument>, EmbeddingError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_dataset(file, vocab, lowercase)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn read(text: &str, normalize: bool) -> Result<(Vocabulary, EmbeddingMatrix), EmbeddingError> {
        read_embeddings(text.as_bytes(), normalize)
    }

    #[test]
    fn normalizes_rows() {
        let (v, m) = read("cat 3.0 4.0\n", true).unwrap();
        assert_eq!(v.dim(), 2);
        assert_eq!(m.row(0), &[0.6, 0.8]);
        assert!(m.is_normalized());
    }

    #[test]
    fn identity_rows_without_normalization() {
        let (v, m) = read("a 1 0\nb 0 1\n", false).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.dim(), 2);
        assert_eq!(m.row(v.get("a").unwrap()), &[1.0, 0.0]);
        assert_eq!(m.row(v.get("b").unwrap()), &[0.0, 1.0]);
    }

    #[test]
    fn dimension_mismatch_reports_line() {
        match read("a 1 0\nb 1 0 0\n", false) {
            Err(EmbeddingError::DimensionMismatch { line, expected, found }) => {
                assert_eq!((line, expected, found), (2, 2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(read("", false), Err(EmbeddingError::Empty)));
        assert!(matches!(read("\n\n", false), Err(EmbeddingError::Empty)));
    }

    #[test]
    fn duplicate_word_keeps_first() {
        let (v, m) = read("a 1 0\na 0 1\n", false).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(m.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn zero_rows_stay_zero() {
        let (_, m) = read("z 0 0\n", true).unwrap();
        assert_eq!(m.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn tokenization() {
        let (v, m) = read("good 1 0\nmovie 0 1\n", false).unwrap();
        let d = tokenize_and_encode("good movie", &v, false).unwrap();
        assert_eq!(d.tokens, vec![Token::Word(0), Token::Word(1)]);
        let d = tokenize_and_encode("Good", &v, true).unwrap();
        assert_eq!(d.tokens, vec![Token::Word(0)]);
        let d = tokenize_and_encode("zzz", &v, false).unwrap();
        assert_eq!(d.tokens, vec![Token::Oov]);
        assert_eq!(m.lookup(Token::Oov), &[0.0, 0.0]);
        assert!(matches!(
            tokenize_and_encode("  \t ", &v, false),
            Err(EmbeddingError::EmptyDocument)
        ));
    }

    #[test]
    fn dataset_parsing() {
        let (v, _) = read("good 1 0\nbad 0 1\n", false).unwrap();
        let docs = read_dataset("1\tgood\n\n0\tbad movie\n".as_bytes(), &v, false).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[1].label, Some(0));
        assert_eq!(docs[1].tokens, vec![Token::Word(1), Token::Oov]);
        assert!(matches!(
            read_dataset("x\tgood\n".as_bytes(), &v, false),
            Err(EmbeddingError::BadDatasetLine { line: 1, .. })
        ));
        assert!(matches!(
            read_dataset("".as_bytes(), &v, false),
            Err(EmbeddingError::EmptyDataset)
        ));
    }

    #[test]
    fn fingerprint_depends_on_words_and_dim() {
        let (a, _) = read("a 1 0\nb 0 1\n", false).unwrap();
        let (b, _) = read("a 1 0\nc 0 1\n", false).unwrap();
        let (c, _) = read("a 1 0 0\nb 0 1 0\n", false).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(words in proptest::collection::hash_set("[a-z]{1,8}", 1..20)) {
            let words: Vec<String> = words.into_iter().collect();
            let emb = Embeddings::from_pairs(words.iter().map(|w| (w.clone(), vec![1.0, 2.0])), false);
            let text = words.join(" ");
            let doc = tokenize_and_encode(&text, &emb.vocab, false).unwrap();
            for (tok, w) in doc.tokens.iter().zip(&words) {
                match tok {
                    Token::Word(i) => prop_assert_eq!(emb.vocab.word(*i).unwrap(), w.as_str()),
                    Token::Oov => prop_assert!(false, "in-vocabulary word mapped to OOV"),
                }
            }
        }

        #[test]
        fn normalization_is_idempotent(rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 1..10)) {
            let mut m = EmbeddingMatrix::from_rows(rows, true);
            let once = m.clone();
            m.normalize();
            for r in 0..m.rows() {
                let norm = once.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!(norm == 0.0 || (norm - 1.0).abs() <= 1e-9);
                for (a, b) in m.row(r).iter().zip(once.row(r)) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }
}
