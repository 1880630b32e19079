//! Interpretability output checked against the dense oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use sopa::automata::{Encoder, PatternSetConfig, StepKind};
use sopa::classifier::ModelBundle;
use sopa::embeddings::{tokenize_and_encode, Embeddings, TokenizedDocument};
use sopa::interpret::{pattern_contributions, top_k_phrases};
use sopa::reference::dense_span_score;
use sopa::semiring::SemiringKind;

fn setup(rng: &mut ChaCha8Rng) -> (Embeddings, Vec<TokenizedDocument>) {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let emb = Embeddings::from_pairs(
        (0..30).map(|i| (format!("t{i}"), (0..4).map(|_| normal.sample(rng)).collect::<Vec<f64>>())),
        true,
    );
    let docs = (0..25)
        .map(|i| {
            let n = rng.random_range(3..=12);
            let text: Vec<String> = (0..n).map(|_| format!("t{}", rng.random_range(0..30))).collect();
            tokenize_and_encode(&text.join(" "), &emb.vocab, false).unwrap().with_label(i % 2)
        })
        .collect();
    (emb, docs)
}

#[test]
fn phrase_scores_match_dense_rescoring() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for (semiring, encoder) in [
        (SemiringKind::MaxProduct, Encoder::Sigmoid),
        (SemiringKind::MaxProduct, Encoder::Identity),
        (SemiringKind::MaxSum, Encoder::Identity),
        (SemiringKind::MaxSum, Encoder::Sigmoid),
    ] {
        let (emb, docs) = setup(&mut rng);
        let config = PatternSetConfig::new("4:2,3:2,2:2".parse().unwrap(), semiring, encoder);
        let model = ModelBundle::random(config, emb.fingerprint().clone(), 2, 5, 1.0, &mut rng);
        for p in 0..model.patterns.len() {
            let report = top_k_phrases(&model, &docs, &emb, p, 10).unwrap();
            assert_eq!(report.matches.len(), 10);
            for m in &report.matches {
                let vectors = emb.matrix.document_vectors(&docs[m.doc_id]);
                let span = &vectors[m.start..=m.end];
                let dense = dense_span_score(&model.patterns[p], span, &model.config);
                assert_eq!(dense, m.score, "{semiring} {encoder} pattern {p}");
                let consumed = m.tokens.iter().filter(|t| t.kind != StepKind::Epsilon).count();
                assert_eq!(consumed, m.end + 1 - m.start);
            }
            assert!(report.matches.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }
}

#[test]
fn disconnected_patterns_contribute_exactly_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let (emb, docs) = setup(&mut rng);
    let config = PatternSetConfig::new("3:3,2:2".parse().unwrap(), SemiringKind::MaxProduct, Encoder::Sigmoid);
    let mut model = ModelBundle::random(config, emb.fingerprint().clone(), 2, 6, 1.0, &mut rng);
    model.mlp.disconnect_input(2);
    for (id, d) in docs.iter().enumerate() {
        let report = pattern_contributions(&model, d, id, &emb, 1).unwrap();
        let c = report.contributions.iter().find(|c| c.pattern == 2).unwrap();
        assert_eq!(c.contribution, 0.0);
        assert_eq!(report.contributions.len(), 5);
    }
}
