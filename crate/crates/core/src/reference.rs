//! Naive oracles for checking the scoring recurrence: dense semiring matrix
//! products, exhaustive path enumeration, and an explicit max-pooled
//! convolution. Nothing here shares code with the recurrence.

use thiserror::Error;

use crate::automata::{Encoder, PatternParams, PatternSetConfig};
use crate::semiring::{Semiring, SemiringKind};

pub const MAX_ENUM_SPAN: usize = 10;
pub const MAX_ENUM_LENGTH: usize = 7;
pub const MAX_ENUM_DOC: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReferenceError {
    #[error("span of {0} tokens exceeds the enumeration bound of {MAX_ENUM_SPAN}")]
    SpanTooLong(usize),
    #[error("pattern length {0} exceeds the enumeration bound of {MAX_ENUM_LENGTH}")]
    PatternTooLong(usize),
    #[error("document of {0} tokens exceeds the enumeration bound of {MAX_ENUM_DOC}")]
    DocTooLong(usize),
    #[error("filter has {found} weights, expected {expected}")]
    FilterShape { expected: usize, found: usize },
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn encode(encoder: Encoder, x: f64) -> f64 {
    match encoder {
        Encoder::Sigmoid => logistic(x),
        Encoder::Identity => x,
    }
}

fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `|a − b| / max(|a|, |b|)`, with equal values (including equal infinities)
/// at distance 0.
pub fn relative_deviation(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs())
}

/// `(L+1) × (L+1)` matrices with `None` for structurally absent transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTransition {
    pub token: Vec<Vec<Option<f64>>>,
    pub epsilon: Vec<Vec<Option<f64>>>,
}

impl DenseTransition {
    pub fn states(&self) -> usize {
        self.token.len()
    }
}

pub fn dense_transition(
    pattern: &PatternParams,
    token_vector: &[f64],
    config: &PatternSetConfig,
) -> DenseTransition {
    let states = pattern.len() + 1;
    let mut token = vec![vec![None; states]; states];
    let mut epsilon = vec![vec![None; states]; states];
    for i in 0..pattern.len() {
        if config.self_loops {
            let pre = inner(&pattern.self_loop_weights[i], token_vector) + pattern.self_loop_bias[i];
            token[i][i] = Some(encode(config.encoder, pre));
        }
        let pre = inner(&pattern.main_weights[i], token_vector) + pattern.main_bias[i];
        token[i][i + 1] = Some(encode(config.encoder, pre));
        if config.epsilons {
            epsilon[i][i + 1] = Some(encode(config.encoder, pattern.epsilon[i]));
        }
    }
    DenseTransition { token, epsilon }
}

fn accumulate(s: SemiringKind, acc: Option<f64>, x: f64) -> Option<f64> {
    Some(match acc {
        None => x,
        Some(a) => s.plus(a, x),
    })
}

/// Row entries carry the largest and smallest path value. The smallest only
/// matters for max-product, where a negative factor swaps the two.
type Extremes = Option<(f64, f64)>;

fn row_times(s: SemiringKind, row: &[Extremes], m: &[Vec<Option<f64>>]) -> Vec<Extremes> {
    let n = row.len();
    let signed = s.sign_sensitive();
    let mut out: Vec<Extremes> = vec![None; n];
    for (j, cell) in out.iter_mut().enumerate() {
        for k in 0..n {
            if let (Some((hi, lo)), Some(b)) = (row[k], m[k][j]) {
                let (a, c) = (s.times(hi, b), s.times(lo, b));
                let (big, small) = if signed && c > a { (c, a) } else { (a, c) };
                *cell = Some(match *cell {
                    None => (big, small),
                    Some((h, l)) => (s.plus(h, big), if signed { l.min(small) } else { l }),
                });
            }
        }
    }
    out
}

/// `I ⊕ T(ε)` with structural zeros.
fn first_order_closure(s: SemiringKind, eps: &[Vec<Option<f64>>]) -> Vec<Vec<Option<f64>>> {
    let mut m = eps.to_vec();
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = Some(match row[i] {
            None => s.one(),
            Some(x) => s.plus(s.one(), x),
        });
    }
    m
}

/// Exact-match score of a whole span: `π (I+T(ε)) Π [T(x_i) (I+T(ε))] η`.
pub fn dense_span_score(
    pattern: &PatternParams,
    span: &[&[f64]],
    config: &PatternSetConfig,
) -> f64 {
    let s = config.semiring;
    let states = pattern.len() + 1;
    let eps_matrix = dense_transition(pattern, &vec![0.0; pattern.dim()], config).epsilon;
    let closure = first_order_closure(s, &eps_matrix);
    let mut row: Vec<Extremes> = vec![None; states];
    row[0] = Some((s.one(), s.one()));
    row = row_times(s, &row, &closure);
    for v in span {
        let t = dense_transition(pattern, v, config);
        row = row_times(s, &row, &t.token);
        row = row_times(s, &row, &closure);
    }
    // η picks out END; η_L = one.
    row[states - 1].map_or(s.zero(), |(x, _)| s.times(x, s.one()))
}

struct Enumerator<'a> {
    s: SemiringKind,
    length: usize,
    main: Vec<Vec<f64>>,
    self_loop: Option<Vec<Vec<f64>>>,
    eps: Option<Vec<f64>>,
    n: usize,
    total: Option<f64>,
    paths: usize,
    _span: std::marker::PhantomData<&'a ()>,
}

impl Enumerator<'_> {
    fn walk(&mut self, pos: usize, state: usize, acc: f64, eps_taken: bool) {
        if pos == self.n && state == self.length {
            self.total = accumulate(self.s, self.total, acc);
            self.paths += 1;
        }
        if state == self.length {
            return;
        }
        if !eps_taken {
            if let Some(eps) = &self.eps {
                let next = self.s.times(acc, eps[state]);
                self.walk(pos, state + 1, next, true);
            }
        }
        if pos < self.n {
            let next = self.s.times(acc, self.main[pos][state]);
            self.walk(pos + 1, state + 1, next, false);
            if let Some(sl) = &self.self_loop {
                let next = self.s.times(acc, sl[pos][state]);
                self.walk(pos + 1, state, next, false);
            }
        }
    }
}

/// Result of exhaustive enumeration over one span.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanEnumeration {
    /// `None` when no legal path exists.
    pub score: Option<f64>,
    pub paths: usize,
}

pub fn enumerate_span(
    pattern: &PatternParams,
    span: &[&[f64]],
    config: &PatternSetConfig,
) -> Result<SpanEnumeration, ReferenceError> {
    if span.len() > MAX_ENUM_SPAN {
        return Err(ReferenceError::SpanTooLong(span.len()));
    }
    if pattern.len() > MAX_ENUM_LENGTH {
        return Err(ReferenceError::PatternTooLong(pattern.len()));
    }
    let l = pattern.len();
    let mut main = Vec::with_capacity(span.len());
    let mut self_loop = Vec::with_capacity(span.len());
    for v in span {
        main.push(
            (0..l)
                .map(|i| encode(config.encoder, inner(&pattern.main_weights[i], v) + pattern.main_bias[i]))
                .collect(),
        );
        self_loop.push(
            (0..l)
                .map(|i| {
                    encode(
                        config.encoder,
                        inner(&pattern.self_loop_weights[i], v) + pattern.self_loop_bias[i],
                    )
                })
                .collect(),
        );
    }
    let eps = config
        .epsilons
        .then(|| pattern.epsilon.iter().map(|&c| encode(config.encoder, c)).collect());
    let mut e = Enumerator {
        s: config.semiring,
        length: l,
        main,
        self_loop: config.self_loops.then_some(self_loop),
        eps,
        n: span.len(),
        total: None,
        paths: 0,
        _span: std::marker::PhantomData,
    };
    e.walk(0, 0, config.semiring.one(), false);
    Ok(SpanEnumeration {
        score: e.total,
        paths: e.paths,
    })
}

/// ⊕ over every legal path consuming exactly `span`.
pub fn brute_force_span_score(
    pattern: &PatternParams,
    span: &[&[f64]],
    config: &PatternSetConfig,
) -> Result<f64, ReferenceError> {
    Ok(enumerate_span(pattern, span, config)?
        .score
        .unwrap_or(config.semiring.zero()))
}

/// ⊕ of span scores over every nonempty subspan.
pub fn brute_force_doc_score(
    pattern: &PatternParams,
    doc: &[&[f64]],
    config: &PatternSetConfig,
) -> Result<f64, ReferenceError> {
    if doc.len() > MAX_ENUM_DOC {
        return Err(ReferenceError::DocTooLong(doc.len()));
    }
    let mut total = None;
    for i in 0..doc.len() {
        for j in i..doc.len() {
            if let Some(x) = enumerate_span(pattern, &doc[i..=j], config)?.score {
                total = accumulate(config.semiring, total, x);
            }
        }
    }
    Ok(total.unwrap_or(config.semiring.zero()))
}

/// Main-path weights concatenated into one `L·e` filter, plus the `L` biases.
pub fn cnn_filter(pattern: &PatternParams) -> (Vec<f64>, Vec<f64>) {
    let filter = pattern.main_weights.iter().flatten().copied().collect();
    (filter, pattern.main_bias.clone())
}

/// Max over windows of `w_{0:L} · [v_i; …; v_{i+L−1}] + Σ b_j`; −∞ when `n < L`.
pub fn explicit_cnn_score(
    filter: &[f64],
    biases: &[f64],
    doc: &[&[f64]],
) -> Result<f64, ReferenceError> {
    let width = biases.len();
    let dim = doc.first().map_or(0, |v| v.len());
    if filter.len() != width * dim {
        return Err(ReferenceError::FilterShape {
            expected: width * dim,
            found: filter.len(),
        });
    }
    let bias: f64 = biases.iter().sum();
    let mut best = f64::NEG_INFINITY;
    if doc.len() < width {
        return Ok(best);
    }
    for window in doc.windows(width) {
        let concat: Vec<f64> = window.iter().flat_map(|v| v.iter().copied()).collect();
        let score = inner(filter, &concat) + bias;
        if score > best {
            best = score;
        }
    }
    Ok(best)
}
