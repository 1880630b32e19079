//! Explanations: top matching phrases per pattern and leave-one-out pattern
//! contributions for single documents.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::automata::{trace_vectors, AutomatonError, MatchTrace, StepKind};
use crate::classifier::{ClassifierError, ModelBundle};
use crate::embeddings::{Embeddings, TokenizedDocument};
use crate::semiring::Semiring;

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error(transparent)]
    Model(#[from] ClassifierError),
    #[error(transparent)]
    Automaton(#[from] AutomatonError),
    #[error("pattern {pattern} out of range, model has {count}")]
    NoSuchPattern { pattern: usize, count: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

type Result<T, E = InterpretError> = std::result::Result<T, E>;

/// One step of a match, as shown to a reader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedToken {
    pub kind: StepKind,
    /// Consumed word; `None` for ε.
    pub word: Option<String>,
    pub position: Option<usize>,
}

impl AnnotatedToken {
    fn render(&self) -> String {
        match (self.kind, &self.word) {
            (StepKind::Epsilon, _) => "ε".to_string(),
            (StepKind::SelfLoop, Some(w)) => format!("{w}_SL"),
            (_, Some(w)) => w.clone(),
            (_, None) => "?".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseMatch {
    pub doc_id: usize,
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    pub score: f64,
    pub tokens: Vec<AnnotatedToken>,
}

impl PhraseMatch {
    pub fn from_trace(doc_id: usize, doc: &TokenizedDocument, trace: &MatchTrace) -> Self {
        let tokens = trace
            .steps
            .iter()
            .map(|s| AnnotatedToken {
                kind: s.kind,
                word: s.token.map(|t| doc.raw[t].clone()),
                position: s.token,
            })
            .collect();
        PhraseMatch {
            doc_id,
            start: trace.start,
            end: trace.end,
            score: trace.score,
            tokens,
        }
    }

    pub fn rendered(&self) -> String {
        self.tokens
            .iter()
            .map(AnnotatedToken::render)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternReport {
    pub pattern: usize,
    pub length: usize,
    /// Highest score first; equal scores by document id.
    pub matches: Vec<PhraseMatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub pattern: usize,
    pub contribution: f64,
    pub best_match: Option<PhraseMatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionReport {
    pub doc_id: usize,
    pub predicted: usize,
    pub probability: f64,
    /// Sorted by signed contribution, largest first.
    pub contributions: Vec<Contribution>,
}

fn check_pattern(model: &ModelBundle, pattern: usize) -> Result<()> {
    if pattern >= model.patterns.len() {
        return Err(InterpretError::NoSuchPattern {
            pattern,
            count: model.patterns.len(),
        });
    }
    Ok(())
}

fn best_match(
    model: &ModelBundle,
    pattern: usize,
    doc_id: usize,
    doc: &TokenizedDocument,
    embeddings: &Embeddings,
) -> Result<Option<PhraseMatch>> {
    let vectors = embeddings.matrix.document_vectors(doc);
    let trace = trace_vectors(&model.patterns[pattern], &vectors, &model.config)?;
    Ok(trace.map(|t| PhraseMatch::from_trace(doc_id, doc, &t)))
}

/// The `k` best-scoring phrases for one pattern across `dataset`, one per
/// document at most. Document ids are positions in `dataset`.
pub fn top_k_phrases(
    model: &ModelBundle,
    dataset: &[TokenizedDocument],
    embeddings: &Embeddings,
    pattern: usize,
    k: usize,
) -> Result<PatternReport> {
    check_pattern(model, pattern)?;
    if !model.config.semiring.is_idempotent() {
        return Err(AutomatonError::NotTraceable(model.config.semiring).into());
    }
    model.check_compatible(embeddings)?;
    let mut matches = Vec::new();
    if k > 0 {
        for (id, doc) in dataset.iter().enumerate() {
            if let Some(m) = best_match(model, pattern, id, doc, embeddings)? {
                matches.push(m);
            }
        }
    }
    matches.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.doc_id.cmp(&b.doc_id)));
    matches.truncate(k);
    Ok(PatternReport {
        pattern,
        length: model.patterns[pattern].len(),
        matches,
    })
}

/// Change in predicted-class probability when each pattern's score is
/// replaced by 0. Best-match phrases are attached to the `top_n` most positive
/// and `top_n` most negative contributors when the semiring is traceable.
pub fn pattern_contributions(
    model: &ModelBundle,
    doc: &TokenizedDocument,
    doc_id: usize,
    embeddings: &Embeddings,
    top_n: usize,
) -> Result<ContributionReport> {
    model.check_compatible(embeddings)?;
    let vectors = embeddings.matrix.document_vectors(doc);
    let z = model.encode(&vectors)?;
    let original = model.classify_z(&z);
    let predicted = original.label();
    let probability = original.probabilities[predicted];

    let mut contributions: Vec<Contribution> = (0..z.len())
        .map(|p| {
            let mut zeroed = z.clone();
            zeroed[p] = 0.0;
            let q = model.classify_z(&zeroed).probabilities[predicted];
            Contribution {
                pattern: p,
                contribution: probability - q,
                best_match: None,
            }
        })
        .collect();
    contributions.sort_by(|a, b| {
        b.contribution
            .total_cmp(&a.contribution)
            .then(a.pattern.cmp(&b.pattern))
    });

    if model.config.semiring.is_idempotent() {
        let n = contributions.len();
        for (i, c) in contributions.iter_mut().enumerate() {
            if i < top_n || i + top_n >= n {
                c.best_match = best_match(model, c.pattern, doc_id, doc, embeddings)?;
            }
        }
    }
    Ok(ContributionReport {
        doc_id,
        predicted,
        probability,
        contributions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Report {
    Pattern(PatternReport),
    Contribution(ContributionReport),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    PlainText,
    /// One JSON record per line.
    Structured,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
enum Record {
    Pattern { pattern: usize, length: usize },
    Match(PhraseMatch),
    Document { doc_id: usize, predicted: usize, probability: f64 },
    Contribution(Contribution),
}

fn records(report: &Report) -> Vec<Record> {
    match report {
        Report::Pattern(r) => std::iter::once(Record::Pattern {
            pattern: r.pattern,
            length: r.length,
        })
        .chain(r.matches.iter().cloned().map(Record::Match))
        .collect(),
        Report::Contribution(r) => std::iter::once(Record::Document {
            doc_id: r.doc_id,
            predicted: r.predicted,
            probability: r.probability,
        })
        .chain(r.contributions.iter().cloned().map(Record::Contribution))
        .collect(),
    }
}

pub fn render_report(report: &Report, format: ReportFormat) -> String {
    match format {
        ReportFormat::Structured => records(report)
            .iter()
            .map(|r| serde_json::to_string(r).expect("finite report values") + "\n")
            .collect(),
        ReportFormat::PlainText => render_plain(report),
    }
}

fn render_plain(report: &Report) -> String {
    let mut out = String::new();
    match report {
        Report::Pattern(r) => {
            let _ = writeln!(out, "pattern {} (length {})", r.pattern, r.length);
            for (rank, m) in r.matches.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{:>3}. {:.4}  doc {} [{}..{}]  {}",
                    rank + 1,
                    m.score,
                    m.doc_id,
                    m.start,
                    m.end,
                    m.rendered()
                );
            }
        }
        Report::Contribution(r) => {
            let _ = writeln!(
                out,
                "doc {}: predicted {} (p={:.4})",
                r.doc_id, r.predicted, r.probability
            );
            for c in &r.contributions {
                let phrase = c
                    .best_match
                    .as_ref()
                    .map(|m| format!("  [{}..{}] {}", m.start, m.end, m.rendered()))
                    .unwrap_or_default();
                let _ = writeln!(out, "  {:+.4}  pattern {}{}", c.contribution, c.pattern, phrase);
            }
        }
    }
    out
}

/// Parses structured output back into reports.
pub fn parse_structured(text: &str) -> Result<Vec<Report>> {
    let mut reports: Vec<Report> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| InterpretError::Parse {
            line: i + 1,
            message,
        };
        let record: Record = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        match (record, reports.last_mut()) {
            (Record::Pattern { pattern, length }, _) => reports.push(Report::Pattern(PatternReport {
                pattern,
                length,
                matches: Vec::new(),
            })),
            (
                Record::Document {
                    doc_id,
                    predicted,
                    probability,
                },
                _,
            ) => reports.push(Report::Contribution(ContributionReport {
                doc_id,
                predicted,
                probability,
                contributions: Vec::new(),
            })),
            (Record::Match(m), Some(Report::Pattern(r))) => r.matches.push(m),
            (Record::Contribution(c), Some(Report::Contribution(r))) => r.contributions.push(c),
            _ => return Err(err("record without a matching header".into())),
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::automata::{Encoder, PatternSetConfig};
    use crate::classifier::{MlpParams, INIT_STD};
    use crate::embeddings::tokenize_and_encode;
    use crate::semiring::SemiringKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(semiring: SemiringKind) -> (Embeddings, ModelBundle, Vec<TokenizedDocument>) {
        let emb = Embeddings::from_pairs(
            [
                ("the", vec![1.0, 0.0, 0.2]),
                ("most", vec![0.0, 1.0, -0.3]),
                ("good", vec![0.5, 0.5, 0.9]),
                ("movie", vec![-0.4, 0.1, 0.5]),
            ],
            true,
        );
        let config = PatternSetConfig::new("2:2,3:1".parse().unwrap(), semiring, Encoder::Sigmoid);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = ModelBundle::random(config, emb.fingerprint().clone(), 2, 4, INIT_STD, &mut rng);
        let docs = ["the most good movie", "good movie", "the the most", "movie good the most good"]
            .iter()
            .map(|t| tokenize_and_encode(t, &emb.vocab, false).unwrap().with_label(0))
            .collect();
        (emb, model, docs)
    }

    #[test]
    fn zero_k_gives_empty_report() {
        let (emb, model, docs) = setup(SemiringKind::MaxProduct);
        let r = top_k_phrases(&model, &docs, &emb, 0, 0).unwrap();
        assert!(r.matches.is_empty());
        assert_eq!(r.length, 2);
    }

    #[test]
    fn fewer_documents_than_k() {
        let (emb, model, docs) = setup(SemiringKind::MaxProduct);
        let r = top_k_phrases(&model, &docs[..1], &emb, 1, 5).unwrap();
        assert_eq!(r.matches.len(), 1);
        assert_eq!(r.matches[0].doc_id, 0);
    }

    #[test]
    fn matches_are_sorted_with_id_tie_break() {
        let (emb, model, mut docs) = setup(SemiringKind::MaxSum);
        docs.push(docs[1].clone());
        let r = top_k_phrases(&model, &docs, &emb, 0, 10).unwrap();
        assert_eq!(r.matches.len(), docs.len());
        for w in r.matches.windows(2) {
            assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].doc_id < w[1].doc_id));
        }
        for m in &r.matches {
            for t in &m.tokens {
                assert_eq!(t.word.is_none(), t.kind == StepKind::Epsilon);
            }
        }
    }

    #[test]
    fn sum_product_cannot_be_traced() {
        let (emb, model, docs) = setup(SemiringKind::SumProduct);
        assert!(matches!(
            top_k_phrases(&model, &docs, &emb, 0, 3),
            Err(InterpretError::Automaton(AutomatonError::NotTraceable(_)))
        ));
        let r = pattern_contributions(&model, &docs[0], 0, &emb, 1).unwrap();
        assert!(r.contributions.iter().all(|c| c.best_match.is_none()));
    }

    #[test]
    fn disconnected_pattern_contributes_exactly_zero() {
        let (emb, mut model, docs) = setup(SemiringKind::MaxProduct);
        model.mlp.disconnect_input(1);
        for (i, d) in docs.iter().enumerate() {
            let r = pattern_contributions(&model, d, i, &emb, 1).unwrap();
            let c = r.contributions.iter().find(|c| c.pattern == 1).unwrap();
            assert_eq!(c.contribution, 0.0);
        }
    }

    #[test]
    fn single_pattern_contribution_is_difference_to_zero_input() {
        let emb = Embeddings::from_pairs([("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])], false);
        let config = PatternSetConfig::new("2:1".parse().unwrap(), SemiringKind::MaxProduct, Encoder::Sigmoid);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = ModelBundle::random(config, emb.fingerprint().clone(), 2, 3, 1.0, &mut rng);
        model.mlp = MlpParams::random(1, 3, 2, 1.0, &mut rng);
        let d = tokenize_and_encode("a b a", &emb.vocab, false).unwrap();
        let r = pattern_contributions(&model, &d, 0, &emb, 1).unwrap();
        let z = model.encode(&emb.matrix.document_vectors(&d)).unwrap();
        let full = model.classify_z(&z);
        let zero = model.classify_z(&[0.0]);
        assert_eq!(r.predicted, full.label());
        assert_eq!(r.contributions[0].contribution, full.probabilities[r.predicted] - zero.probabilities[r.predicted]);
        assert!(r.contributions[0].best_match.is_some());
    }

    #[test]
    fn self_loops_and_epsilons_render_with_markers() {
        let m = PhraseMatch {
            doc_id: 0,
            start: 0,
            end: 2,
            score: 0.5,
            tokens: vec![
                AnnotatedToken { kind: StepKind::Main, word: Some("the".into()), position: Some(0) },
                AnnotatedToken { kind: StepKind::SelfLoop, word: Some("most".into()), position: Some(1) },
                AnnotatedToken { kind: StepKind::Epsilon, word: None, position: None },
                AnnotatedToken { kind: StepKind::Main, word: Some("good".into()), position: Some(2) },
            ],
        };
        assert_eq!(m.rendered(), "the most_SL ε good");
        let report = Report::Pattern(PatternReport { pattern: 4, length: 3, matches: vec![m] });
        let text = render_report(&report, ReportFormat::PlainText);
        assert!(text.contains("the most_SL ε good"));
    }

    #[test]
    fn empty_report_keeps_header() {
        let report = Report::Pattern(PatternReport { pattern: 2, length: 5, matches: vec![] });
        assert_eq!(render_report(&report, ReportFormat::PlainText), "pattern 2 (length 5)\n");
        assert_eq!(render_report(&report, ReportFormat::Structured).lines().count(), 1);
    }

    #[test]
    fn structured_output_round_trips() {
        let (emb, model, docs) = setup(SemiringKind::MaxProduct);
        let reports = vec![
            Report::Pattern(top_k_phrases(&model, &docs, &emb, 0, 3).unwrap()),
            Report::Pattern(top_k_phrases(&model, &docs, &emb, 1, 0).unwrap()),
            Report::Contribution(pattern_contributions(&model, &docs[3], 3, &emb, 1).unwrap()),
        ];
        let text: String = reports.iter().map(|r| render_report(r, ReportFormat::Structured)).collect();
        assert_eq!(parse_structured(&text).unwrap(), reports);
        assert!(parse_structured("{\"record\":\"match\"}").is_err());
    }

    #[test]
    fn unknown_pattern_is_an_error() {
        let (emb, model, docs) = setup(SemiringKind::MaxProduct);
        assert!(matches!(
            top_k_phrases(&model, &docs, &emb, 9, 1),
            Err(InterpretError::NoSuchPattern { pattern: 9, count: 3 })
        ));
    }
}
