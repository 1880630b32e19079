//! Soft patterns: restricted WFSAs whose transition scores are functions of
//! word vectors, scored over every subspan of a document in one pass.
//!
//! A pattern of length `L` has states `0..=L` (`0` is START, `L` is END).
//! States `0..L` carry a self-loop, a main-path transition to the next state
//! and an ε transition to the next state. END has no outgoing transitions.
//! The per-token transition matrix is never materialized: only its diagonal
//! (self-loops) and superdiagonal (main path) are computed.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{EmbeddingMatrix, TokenizedDocument};
use crate::semiring::{Semiring, SemiringKind};

pub const DEFAULT_MAX_PATTERN_LENGTH: usize = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutomatonError {
    #[error("token vector has dimension {found}, pattern expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cannot score an empty document")]
    EmptyDocument,
    #[error("no single best path under {0}; tracing needs a max semiring")]
    NotTraceable(SemiringKind),
    #[error("NaN transition score in pattern slot {slot}")]
    NaNScore { slot: usize },
    #[error("invalid pattern spec `{spec}`: {reason}")]
    BadSpec { spec: String, reason: String },
    #[error("pattern length {length} exceeds configured maximum {max}")]
    TooLong { length: usize, max: usize },
}

/// Squashing function applied to transition pre-activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoder {
    Sigmoid,
    Identity,
}

impl Encoder {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Encoder::Sigmoid => sigmoid(x),
            Encoder::Identity => x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Encoder::Sigmoid => "sigmoid",
            Encoder::Identity => "identity",
        }
    }
}

impl fmt::Display for Encoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Encoder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sigmoid" => Ok(Encoder::Sigmoid),
            "identity" => Ok(Encoder::Identity),
            other => Err(format!("unknown encoder `{other}` (expected sigmoid or identity)")),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Learnable parameters of one pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternParams {
    /// `u_i`, one vector per slot.
    pub self_loop_weights: Vec<Vec<f64>>,
    /// `a_i`
    pub self_loop_bias: Vec<f64>,
    /// `w_i`
    pub main_weights: Vec<Vec<f64>>,
    /// `b_i`
    pub main_bias: Vec<f64>,
    /// `c_i`, the ε score pre-activation.
    pub epsilon: Vec<f64>,
}

impl PatternParams {
    pub fn zeros(length: usize, dim: usize) -> Self {
        PatternParams {
            self_loop_weights: vec![vec![0.0; dim]; length],
            self_loop_bias: vec![0.0; length],
            main_weights: vec![vec![0.0; dim]; length],
            main_bias: vec![0.0; length],
            epsilon: vec![0.0; length],
        }
    }

    /// Every scalar drawn from `N(0, std²)`.
    pub fn random<R: Rng + ?Sized>(length: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut vec = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(rng)).collect() };
        let self_loop_weights = (0..length).map(|_| vec(dim)).collect();
        let self_loop_bias = vec(length);
        let main_weights = (0..length).map(|_| vec(dim)).collect();
        let main_bias = vec(length);
        let epsilon = vec(length);
        PatternParams {
            self_loop_weights,
            self_loop_bias,
            main_weights,
            main_bias,
            epsilon,
        }
    }

    /// Number of main-path transitions; states are `0..=len()`.
    pub fn len(&self) -> usize {
        self.main_bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.main_weights.first().map_or(0, Vec::len)
    }

    /// `(2e + 3) · L`
    pub fn num_parameters(&self) -> usize {
        (2 * self.dim() + 3) * self.len()
    }

    /// Visits every scalar in a fixed order: per slot `u_i`, `a_i`, `w_i`, `b_i`, `c_i`.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for i in 0..self.len() {
            self.self_loop_weights[i].iter_mut().for_each(&mut f);
            f(&mut self.self_loop_bias[i]);
            self.main_weights[i].iter_mut().for_each(&mut f);
            f(&mut self.main_bias[i]);
            f(&mut self.epsilon[i]);
        }
    }

    /// Same order as [`PatternParams::for_each_mut`].
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for i in 0..self.len() {
            out.extend(&self.self_loop_weights[i]);
            out.push(self.self_loop_bias[i]);
            out.extend(&self.main_weights[i]);
            out.push(self.main_bias[i]);
            out.push(self.epsilon[i]);
        }
    }
}

/// Transition scores for one token: the diagonal and superdiagonal of `T(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionScores {
    pub self_loop: Vec<f64>,
    pub main: Vec<f64>,
}

pub fn transition_scores(
    pattern: &PatternParams,
    token_vector: &[f64],
    encoder: Encoder,
) -> Result<TransitionScores, AutomatonError> {
    if token_vector.len() != pattern.dim() {
        return Err(AutomatonError::DimensionMismatch {
            expected: pattern.dim(),
            found: token_vector.len(),
        });
    }
    let self_loop = pattern
        .self_loop_weights
        .iter()
        .zip(&pattern.self_loop_bias)
        .map(|(u, a)| encoder.apply(dot(u, token_vector) + a))
        .collect();
    let main = pattern
        .main_weights
        .iter()
        .zip(&pattern.main_bias)
        .map(|(w, b)| encoder.apply(dot(w, token_vector) + b))
        .collect();
    Ok(TransitionScores { self_loop, main })
}

/// ε scores, independent of any token.
pub fn epsilon_scores(pattern: &PatternParams, encoder: Encoder) -> Vec<f64> {
    pattern.epsilon.iter().map(|&c| encoder.apply(c)).collect()
}

/// One first-order ε step: `h'_j = h_j ⊕ (h_{j−1} ⊗ eps_{j−1})`, computed from
/// the pre-step vector so at most one ε is taken.
pub fn eps_step<S: Semiring>(h: &[f64], eps: &[f64], semiring: &S) -> Vec<f64> {
    assert_eq!(h.len(), eps.len() + 1, "hidden state must have L+1 entries");
    let mut out = h.to_vec();
    for j in 1..h.len() {
        out[j] = semiring.plus(h[j], semiring.times(h[j - 1], eps[j - 1]));
    }
    out
}

/// `length:count` pairs, e.g. `6:10,5:10,4:10`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternSpec(Vec<(usize, usize)>);

impl PatternSpec {
    pub fn new(entries: Vec<(usize, usize)>) -> Result<Self, AutomatonError> {
        let spec = PatternSpec(entries);
        let text = spec.to_string();
        if spec.0.is_empty() {
            return Err(AutomatonError::BadSpec {
                spec: text,
                reason: "no patterns".into(),
            });
        }
        for &(len, count) in &spec.0 {
            if len == 0 {
                return Err(AutomatonError::BadSpec {
                    spec: text,
                    reason: "pattern length must be at least 1".into(),
                });
            }
            if count == 0 {
                return Err(AutomatonError::BadSpec {
                    spec: text,
                    reason: format!("count for length {len} must be at least 1"),
                });
            }
        }
        Ok(spec)
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.0
    }

    /// Total pattern count `k`.
    pub fn total(&self) -> usize {
        self.0.iter().map(|&(_, c)| c).sum()
    }

    /// Length of every pattern, in instantiation order.
    pub fn lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .flat_map(|&(len, count)| std::iter::repeat_n(len, count))
    }

    pub fn max_length(&self) -> usize {
        self.0.iter().map(|&(l, _)| l).max().unwrap_or(0)
    }
}

impl fmt::Display for PatternSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(l, c)| format!("{l}:{c}")).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for PatternSpec {
    type Err = AutomatonError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |reason: String| AutomatonError::BadSpec {
            spec: s.to_string(),
            reason,
        };
        let mut entries = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (l, c) = part
                .split_once(':')
                .ok_or_else(|| bad(format!("`{part}` is not of the form length:count")))?;
            let l = l
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad length `{l}`")))?;
            let c = c
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad count `{c}`")))?;
            entries.push((l, c));
        }
        PatternSpec::new(entries).map_err(|e| match e {
            AutomatonError::BadSpec { reason, .. } => bad(reason),
            other => other,
        })
    }
}

impl Serialize for PatternSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PatternSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Shape and scoring options shared by a set of patterns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSetConfig {
    pub patterns: PatternSpec,
    pub semiring: SemiringKind,
    pub encoder: Encoder,
    pub self_loops: bool,
    pub epsilons: bool,
    #[serde(default = "default_max_length")]
    pub max_length: usize,
}

fn default_max_length() -> usize {
    DEFAULT_MAX_PATTERN_LENGTH
}

impl PatternSetConfig {
    pub fn new(patterns: PatternSpec, semiring: SemiringKind, encoder: Encoder) -> Self {
        PatternSetConfig {
            patterns,
            semiring,
            encoder,
            self_loops: true,
            epsilons: true,
            max_length: DEFAULT_MAX_PATTERN_LENGTH,
        }
    }

    /// Identity encoder, max-sum, main path only: a max-pooled linear convolution.
    pub fn cnn_mode(patterns: PatternSpec) -> Self {
        PatternSetConfig {
            self_loops: false,
            epsilons: false,
            ..PatternSetConfig::new(patterns, SemiringKind::MaxSum, Encoder::Identity)
        }
    }

    pub fn is_cnn_mode(&self) -> bool {
        self.semiring == SemiringKind::MaxSum
            && self.encoder == Encoder::Identity
            && !self.self_loops
            && !self.epsilons
    }

    pub fn validate(&self) -> Result<(), AutomatonError> {
        let longest = self.patterns.max_length();
        if longest > self.max_length {
            return Err(AutomatonError::TooLong {
                length: longest,
                max: self.max_length,
            });
        }
        Ok(())
    }

    /// ε scores with the ablation switch applied.
    pub fn epsilon_scores(&self, pattern: &PatternParams) -> Vec<f64> {
        if self.epsilons {
            epsilon_scores(pattern, self.encoder)
        } else {
            vec![self.semiring.zero(); pattern.len()]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepKind {
    Main,
    SelfLoop,
    Epsilon,
}

impl StepKind {
    /// Tie-break rank: lower wins.
    fn rank(self) -> u8 {
        match self {
            StepKind::Main => 0,
            StepKind::Epsilon => 1,
            StepKind::SelfLoop => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub kind: StepKind,
    /// Consumed token position, `None` for ε.
    pub token: Option<usize>,
    pub from: usize,
    pub to: usize,
}

/// Best-scoring path of a pattern through a document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchTrace {
    pub pattern: usize,
    /// First consumed token (0-based).
    pub start: usize,
    /// Last consumed token, inclusive.
    pub end: usize,
    pub score: f64,
    pub steps: Vec<TraceStep>,
}

impl MatchTrace {
    pub fn span_len(&self) -> usize {
        self.end + 1 - self.start
    }
}

/// Row of state scores after `t` tokens, restart included.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub t: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocumentScore {
    /// ⊕ over `per_token`.
    pub score: f64,
    /// `s_t`: ⊕ of exact-match scores of spans ending at token `t`.
    pub per_token: Vec<f64>,
}

/// Value domain the recurrence runs over: plain floats, counted floats or
/// tape nodes.
pub(crate) trait PathAlgebra {
    type Value: Copy;
    fn one(&mut self) -> Self::Value;
    fn times(&mut self, a: Self::Value, b: Self::Value) -> Self::Value;
    /// Non-idempotent ⊕.
    fn plus(&mut self, a: Self::Value, b: Self::Value) -> Self::Value;
    /// Idempotent ⊕ whose winner the recurrence already chose.
    fn select(&mut self, winner: Self::Value, loser: Self::Value) -> Self::Value;
    fn score(&self, v: Self::Value) -> f64;
    fn idempotent(&self) -> bool;
    fn sign_sensitive(&self) -> bool;
}

pub(crate) struct FloatAlgebra<'s, S>(pub &'s S);

impl<S: Semiring> PathAlgebra for FloatAlgebra<'_, S> {
    type Value = f64;

    fn one(&mut self) -> f64 {
        self.0.one()
    }

    fn times(&mut self, a: f64, b: f64) -> f64 {
        self.0.times(a, b)
    }

    fn plus(&mut self, a: f64, b: f64) -> f64 {
        self.0.plus(a, b)
    }

    fn select(&mut self, winner: f64, loser: f64) -> f64 {
        // Counted as a ⊕; the winner may be the minimum on the low lane.
        self.0.plus(winner, loser);
        winner
    }

    fn score(&self, v: f64) -> f64 {
        v
    }

    fn idempotent(&self) -> bool {
        self.0.is_idempotent()
    }

    fn sign_sensitive(&self) -> bool {
        self.0.sign_sensitive()
    }
}

/// Per-token transition values; `None` tables are structurally absent (zero).
pub(crate) struct Transitions<V> {
    pub self_loop: Option<Vec<Vec<V>>>,
    pub main: Vec<Vec<V>>,
    pub epsilon: Option<Vec<V>>,
}

#[derive(Clone, Copy)]
struct Cand<V> {
    value: V,
    start: usize,
    rank: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pick {
    First,
    Second,
}

/// Lane of the largest path value. Lane 1 holds the smallest, kept only when
/// negative transitions can flip the order under ⊗.
const HI: usize = 0;

#[derive(Clone, Default)]
struct StepPointers {
    src: [Vec<Option<Pick>>; 2],
    /// Pick plus the lane of the source cell.
    consume: [Vec<Option<(Pick, usize)>>; 2],
    eps: [Vec<Option<(Pick, usize)>>; 2],
}

#[derive(Clone, Copy, Default)]
pub(crate) struct RecurrenceOptions {
    /// Keep back-pointers for tracing.
    pub pointers: bool,
    /// Keep `h_0 … h_n`.
    pub hidden: bool,
}

pub(crate) struct RecurrenceOutput<V> {
    pub doc: Option<V>,
    pub per_token: Vec<Option<V>>,
    /// Hidden state after each token, restart merged in; index 0 is `h_0`.
    pub hidden: Vec<Vec<Option<V>>>,
    best: Option<(usize, usize)>,
    pointers: Vec<StepPointers>,
}

fn wins<A: PathAlgebra>(alg: &A, a: &Cand<A::Value>, b: &Cand<A::Value>, lane: usize) -> bool {
    let (sa, sb) = (alg.score(a.value), alg.score(b.value));
    if sa != sb {
        return if lane == HI { sa > sb } else { sa < sb };
    }
    if a.start != b.start {
        return a.start < b.start;
    }
    a.rank <= b.rank
}

fn oplus<A: PathAlgebra>(
    alg: &mut A,
    a: Option<Cand<A::Value>>,
    b: Option<Cand<A::Value>>,
    lane: usize,
) -> (Option<Cand<A::Value>>, Option<Pick>) {
    match (a, b) {
        (None, None) => (None, None),
        (Some(a), None) => (Some(a), Some(Pick::First)),
        (None, Some(b)) => (Some(b), Some(Pick::Second)),
        (Some(a), Some(b)) => {
            if alg.idempotent() {
                if wins(alg, &a, &b, lane) {
                    let value = alg.select(a.value, b.value);
                    (Some(Cand { value, ..a }), Some(Pick::First))
                } else {
                    let value = alg.select(b.value, a.value);
                    (Some(Cand { value, ..b }), Some(Pick::Second))
                }
            } else {
                let value = alg.plus(a.value, b.value);
                let cand = Cand {
                    value,
                    start: a.start.min(b.start),
                    rank: a.rank.min(b.rank),
                };
                (Some(cand), Some(Pick::First))
            }
        }
    }
}

fn otimes<A: PathAlgebra>(
    alg: &mut A,
    a: Option<Cand<A::Value>>,
    b: Option<A::Value>,
    kind: StepKind,
) -> Option<Cand<A::Value>> {
    match (a, b) {
        (Some(a), Some(b)) => Some(Cand {
            value: alg.times(a.value, b),
            start: a.start,
            rank: kind.rank(),
        }),
        _ => None,
    }
}

/// Lane whose cell feeds `lane` through a transition of value `w`: a negative
/// factor turns the smallest product into the largest.
fn source_lane<A: PathAlgebra>(alg: &A, signed: bool, lane: usize, w: A::Value) -> usize {
    if signed && alg.score(w) < 0.0 {
        1 - lane
    } else {
        lane
    }
}

fn any_negative<A: PathAlgebra>(alg: &A, trans: &Transitions<A::Value>) -> bool {
    let neg = |v: &A::Value| alg.score(*v) < 0.0;
    trans.main.iter().flatten().any(neg)
        || trans.self_loop.iter().flatten().flatten().any(neg)
        || trans.epsilon.iter().flatten().any(neg)
}

/// The single-pass recurrence over all subspans.
///
/// `g_t` holds paths over spans ending at token `t` (after the trailing ε step);
/// the source for token `t+1` is `g_t ⊕ h_0`, so every start position is covered.
#[allow(clippy::needless_range_loop)]
pub(crate) fn run_recurrence<A: PathAlgebra>(
    alg: &mut A,
    length: usize,
    trans: &Transitions<A::Value>,
    opts: RecurrenceOptions,
) -> RecurrenceOutput<A::Value> {
    let record = opts.pointers;
    let n = trans.main.len();
    let states = length + 1;
    let eps = trans.epsilon.as_ref();
    let signed = alg.sign_sensitive() && any_negative(alg, trans);
    let lanes = if signed { 2 } else { 1 };

    let one = alg.one();
    let mut h0: Vec<Option<Cand<A::Value>>> = vec![None; states];
    h0[0] = Some(Cand {
        value: one,
        start: 0,
        rank: StepKind::Main.rank(),
    });
    if let Some(eps) = eps {
        h0[1] = otimes(alg, h0[0], Some(eps[0]), StepKind::Epsilon);
    }

    let empty: Vec<Option<Cand<A::Value>>> = vec![None; states];
    let mut g = [empty.clone(), empty.clone()];
    let mut src = [empty.clone(), empty.clone()];
    let mut m = [empty.clone(), empty];
    let mut per_token = Vec::with_capacity(n);
    let mut hidden = Vec::new();
    let mut pointers = Vec::new();
    let mut best: Option<Cand<A::Value>> = None;
    let mut best_pos: Option<(usize, usize)> = None;

    for t in 0..n {
        let mut ptr = StepPointers::default();
        if record {
            for lane in 0..lanes {
                ptr.src[lane] = vec![None; states];
                ptr.consume[lane] = vec![None; states];
                ptr.eps[lane] = vec![None; states];
            }
        }

        // Restart: spans beginning at token t.
        for lane in 0..lanes {
            for j in 0..states {
                let restart = h0[j].map(|c| Cand { start: t, ..c });
                let (c, pick) = oplus(alg, g[lane][j], restart, lane);
                if record {
                    ptr.src[lane][j] = pick;
                }
                src[lane][j] = c;
            }
        }
        if opts.hidden {
            hidden.push(src[HI].iter().map(|c| c.map(|c| c.value)).collect());
        }

        // Consume token t: main path into j, or self-loop at j.
        for lane in 0..lanes {
            for j in 0..states {
                let (main, main_lane) = if j > 0 {
                    let w = trans.main[t][j - 1];
                    let from = source_lane(alg, signed, lane, w);
                    (otimes(alg, src[from][j - 1], Some(w), StepKind::Main), from)
                } else {
                    (None, lane)
                };
                let (self_loop, loop_lane) = match &trans.self_loop {
                    Some(sl) if j < length => {
                        let w = sl[t][j];
                        let from = source_lane(alg, signed, lane, w);
                        (otimes(alg, src[from][j], Some(w), StepKind::SelfLoop), from)
                    }
                    _ => (None, lane),
                };
                let (c, pick) = oplus(alg, main, self_loop, lane);
                if record {
                    ptr.consume[lane][j] = pick.map(|p| match p {
                        Pick::First => (p, main_lane),
                        Pick::Second => (p, loop_lane),
                    });
                }
                m[lane][j] = c;
            }
        }

        // At most one ε after the token.
        for lane in 0..lanes {
            g[lane][0] = m[lane][0];
            if record {
                ptr.eps[lane][0] = m[lane][0].map(|_| (Pick::First, lane));
            }
            for j in 1..states {
                let (via_eps, eps_lane) = match eps {
                    Some(eps) => {
                        let w = eps[j - 1];
                        let from = source_lane(alg, signed, lane, w);
                        (otimes(alg, m[from][j - 1], Some(w), StepKind::Epsilon), from)
                    }
                    None => (None, lane),
                };
                let (c, pick) = oplus(alg, m[lane][j], via_eps, lane);
                if record {
                    ptr.eps[lane][j] = pick.map(|p| match p {
                        Pick::First => (p, lane),
                        Pick::Second => (p, eps_lane),
                    });
                }
                g[lane][j] = c;
            }
        }

        let end = g[HI][length];
        per_token.push(end.map(|c| c.value));
        if let Some(end) = end {
            let end = Cand { rank: 0, ..end };
            match best {
                None => {
                    best = Some(end);
                    best_pos = Some((t, end.start));
                }
                Some(b) => {
                    let b = Cand { rank: 0, ..b };
                    let (c, pick) = oplus(alg, Some(b), Some(end), HI);
                    best = c;
                    if pick == Some(Pick::Second) {
                        best_pos = Some((t, end.start));
                    }
                }
            }
        }

        if record {
            pointers.push(ptr);
        }
    }

    if opts.hidden {
        let h = (0..states)
            .map(|j| {
                let restart = h0[j].map(|c| Cand { start: n, ..c });
                oplus(alg, g[HI][j], restart, HI).0.map(|c| c.value)
            })
            .collect();
        hidden.push(h);
    }

    RecurrenceOutput {
        doc: best.map(|c| c.value),
        per_token,
        hidden,
        best: best_pos,
        pointers,
    }
}

impl<V> RecurrenceOutput<V> {
    /// Follows back-pointers from the best END cell. Only meaningful for
    /// idempotent semirings run with `record = true`.
    fn backtrack(&self, length: usize) -> Option<(usize, usize, Vec<TraceStep>)> {
        let (end, _) = self.best?;
        let mut steps = Vec::new();
        let mut t = end;
        let mut j = length;
        let mut lane = HI;
        // Position in the cell graph: after ε (g), after consume (m), or source.
        enum At {
            G,
            M,
            Src,
        }
        let mut at = At::G;
        let start;
        loop {
            let ptr = &self.pointers[t];
            match at {
                At::G => {
                    if j > 0 {
                        if let Some((Pick::Second, from)) = ptr.eps[lane][j] {
                            steps.push(TraceStep {
                                kind: StepKind::Epsilon,
                                token: None,
                                from: j - 1,
                                to: j,
                            });
                            j -= 1;
                            lane = from;
                        }
                    }
                    at = At::M;
                }
                At::M => {
                    match ptr.consume[lane][j] {
                        Some((Pick::First, from)) => {
                            steps.push(TraceStep {
                                kind: StepKind::Main,
                                token: Some(t),
                                from: j - 1,
                                to: j,
                            });
                            j -= 1;
                            lane = from;
                        }
                        Some((Pick::Second, from)) => {
                            steps.push(TraceStep {
                                kind: StepKind::SelfLoop,
                                token: Some(t),
                                from: j,
                                to: j,
                            });
                            lane = from;
                        }
                        None => unreachable!("back-pointer into an empty cell"),
                    }
                    at = At::Src;
                }
                At::Src => match ptr.src[lane][j] {
                    Some(Pick::First) => {
                        t -= 1;
                        at = At::G;
                    }
                    Some(Pick::Second) => {
                        // Restart cell h_0[j]: START, or one ε from START.
                        if j == 1 {
                            steps.push(TraceStep {
                                kind: StepKind::Epsilon,
                                token: None,
                                from: 0,
                                to: 1,
                            });
                        } else {
                            debug_assert_eq!(j, 0);
                        }
                        start = t;
                        break;
                    }
                    None => unreachable!("back-pointer into an empty cell"),
                },
            }
        }
        steps.reverse();
        Some((start, end, steps))
    }
}

/// Builds float transition tables for a document, honoring the ablation switches.
pub(crate) fn float_transitions(
    pattern: &PatternParams,
    vectors: &[&[f64]],
    config: &PatternSetConfig,
) -> Result<Transitions<f64>, AutomatonError> {
    let mut main = Vec::with_capacity(vectors.len());
    let mut self_loop = Vec::with_capacity(vectors.len());
    for v in vectors {
        let ts = transition_scores(pattern, v, config.encoder)?;
        if let Some(slot) = ts
            .main
            .iter()
            .chain(&ts.self_loop)
            .position(|x| x.is_nan())
        {
            return Err(AutomatonError::NaNScore {
                slot: slot % pattern.len().max(1),
            });
        }
        main.push(ts.main);
        self_loop.push(ts.self_loop);
    }
    let epsilon = if config.epsilons {
        let eps = epsilon_scores(pattern, config.encoder);
        if let Some(slot) = eps.iter().position(|x| x.is_nan()) {
            return Err(AutomatonError::NaNScore { slot });
        }
        Some(eps)
    } else {
        None
    };
    Ok(Transitions {
        self_loop: config.self_loops.then_some(self_loop),
        main,
        epsilon,
    })
}

/// Scores one document given its token vectors, using an explicit semiring
/// (e.g. an instrumented one) in place of `config.semiring`.
pub fn score_vectors_in<S: Semiring>(
    semiring: &S,
    pattern: &PatternParams,
    vectors: &[&[f64]],
    config: &PatternSetConfig,
) -> Result<DocumentScore, AutomatonError> {
    if vectors.is_empty() {
        return Err(AutomatonError::EmptyDocument);
    }
    let trans = float_transitions(pattern, vectors, config)?;
    let out = run_recurrence(
        &mut FloatAlgebra(semiring),
        pattern.len(),
        &trans,
        RecurrenceOptions::default(),
    );
    let zero = semiring.zero();
    Ok(DocumentScore {
        score: out.doc.unwrap_or(zero),
        per_token: out.per_token.iter().map(|s| s.unwrap_or(zero)).collect(),
    })
}

pub fn score_vectors(
    pattern: &PatternParams,
    vectors: &[&[f64]],
    config: &PatternSetConfig,
) -> Result<DocumentScore, AutomatonError> {
    score_vectors_in(&config.semiring, pattern, vectors, config)
}

pub fn score_document(
    pattern: &PatternParams,
    doc: &TokenizedDocument,
    embeddings: &EmbeddingMatrix,
    config: &PatternSetConfig,
) -> Result<DocumentScore, AutomatonError> {
    score_vectors(pattern, &embeddings.document_vectors(doc), config)
}

/// Hidden state rows `h_0 … h_n`.
pub fn hidden_states(
    pattern: &PatternParams,
    vectors: &[&[f64]],
    config: &PatternSetConfig,
) -> Result<Vec<HiddenState>, AutomatonError> {
    if vectors.is_empty() {
        return Err(AutomatonError::EmptyDocument);
    }
    let trans = float_transitions(pattern, vectors, config)?;
    let out = run_recurrence(
        &mut FloatAlgebra(&config.semiring),
        pattern.len(),
        &trans,
        RecurrenceOptions {
            hidden: true,
            ..Default::default()
        },
    );
    let zero = config.semiring.zero();
    Ok(out
        .hidden
        .into_iter()
        .enumerate()
        .map(|(t, row)| HiddenState {
            t,
            scores: row.into_iter().map(|s| s.unwrap_or(zero)).collect(),
        })
        .collect())
}

/// The `z` vector: one document score per pattern.
pub fn encode_vectors(
    patterns: &[PatternParams],
    vectors: &[&[f64]],
    config: &PatternSetConfig,
) -> Result<Vec<f64>, AutomatonError> {
    patterns
        .iter()
        .map(|p| score_vectors(p, vectors, config).map(|s| s.score))
        .collect()
}

pub fn encode_document(
    patterns: &[PatternParams],
    doc: &TokenizedDocument,
    embeddings: &EmbeddingMatrix,
    config: &PatternSetConfig,
) -> Result<Vec<f64>, AutomatonError> {
    encode_vectors(patterns, &embeddings.document_vectors(doc), config)
}

/// Viterbi path realizing the document score, or `None` if no span matches.
///
/// Ties go to the earliest span start, then main > ε > self-loop.
pub fn trace_vectors(
    pattern: &PatternParams,
    vectors: &[&[f64]],
    config: &PatternSetConfig,
) -> Result<Option<MatchTrace>, AutomatonError> {
    if !config.semiring.is_idempotent() {
        return Err(AutomatonError::NotTraceable(config.semiring));
    }
    if vectors.is_empty() {
        return Err(AutomatonError::EmptyDocument);
    }
    let trans = float_transitions(pattern, vectors, config)?;
    let out = run_recurrence(
        &mut FloatAlgebra(&config.semiring),
        pattern.len(),
        &trans,
        RecurrenceOptions {
            pointers: true,
            ..Default::default()
        },
    );
    let Some(score) = out.doc else {
        return Ok(None);
    };
    let (start, end, steps) = out.backtrack(pattern.len()).expect("best cell recorded");
    Ok(Some(MatchTrace {
        pattern: 0,
        start,
        end,
        score,
        steps,
    }))
}

pub fn trace_best_match(
    pattern: &PatternParams,
    doc: &TokenizedDocument,
    embeddings: &EmbeddingMatrix,
    config: &PatternSetConfig,
) -> Result<Option<MatchTrace>, AutomatonError> {
    trace_vectors(pattern, &embeddings.document_vectors(doc), config)
}

/// Recomputes a trace's score by folding its steps' transition scores with ⊗.
pub fn replay_trace(
    pattern: &PatternParams,
    vectors: &[&[f64]],
    config: &PatternSetConfig,
    trace: &MatchTrace,
) -> Result<f64, AutomatonError> {
    let s = config.semiring;
    let eps = epsilon_scores(pattern, config.encoder);
    let mut acc = s.one();
    for step in &trace.steps {
        let score = match (step.kind, step.token) {
            (StepKind::Epsilon, _) => eps[step.from],
            (kind, Some(t)) => {
                let ts = transition_scores(pattern, vectors[t], config.encoder)?;
                if kind == StepKind::Main {
                    ts.main[step.from]
                } else {
                    ts.self_loop[step.from]
                }
            }
            (_, None) => unreachable!("token step without a token"),
        };
        acc = s.times(acc, score);
    }
    Ok(acc)
}
