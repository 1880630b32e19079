//! Reverse-mode differentiation over a define-by-run tape, Adam, and a
//! central-difference gradient checker.
//!
//! Nodes are scalars. Trainable parameters live in one flat buffer that the
//! tape reads from; gradients come back in the same layout. Word vectors are
//! borrowed as constant inputs to affine nodes and never receive gradient.

use thiserror::Error;

use crate::automata::{dot, PathAlgebra};
use crate::semiring::{Semiring, SemiringKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
    #[error("gradient buffer has {found} entries, optimizer registered {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("non-finite gradient for parameter {index}")]
    NonFiniteGradient { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<'a> {
    Const,
    Param(usize),
    /// `params[weights..weights+input.len()] · input + params[bias]`
    Affine {
        weights: usize,
        bias: usize,
        input: &'a [f64],
    },
    /// `params[weights..weights+inputs.len()] · inputs + params[bias]`
    Linear {
        weights: usize,
        bias: usize,
        inputs: Vec<NodeId>,
    },
    Sigmoid(NodeId),
    Relu(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Max whose adjoint routes entirely to `winner`.
    Max { winner: NodeId },
    Scale(NodeId, f64),
    Sum(Vec<NodeId>),
    SoftmaxCrossEntropy {
        logits: Vec<NodeId>,
        probabilities: Vec<f64>,
        target: usize,
    },
}

#[derive(Debug, Clone)]
struct Node<'a> {
    value: f64,
    op: Op<'a>,
}

/// Recorded forward pass. Reading parameter values from `params`.
#[derive(Debug, Clone)]
pub struct Tape<'a> {
    params: &'a [f64],
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a [f64]) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value
    }

    fn push(&mut self, value: f64, op: Op<'a>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.push(value, Op::Const)
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        self.push(self.params[index], Op::Param(index))
    }

    pub fn affine(&mut self, weights: usize, bias: usize, input: &'a [f64]) -> NodeId {
        let w = &self.params[weights..weights + input.len()];
        let value = dot(w, input) + self.params[bias];
        self.push(value, Op::Affine { weights, bias, input })
    }

    pub fn linear(&mut self, weights: usize, bias: usize, inputs: Vec<NodeId>) -> NodeId {
        let mut value = 0.0;
        for (k, x) in inputs.iter().enumerate() {
            value += self.params[weights + k] * self.nodes[x.0].value;
        }
        value += self.params[bias];
        self.push(value, Op::Linear { weights, bias, inputs })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = crate::automata::sigmoid(self.value(x));
        self.push(v, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).max(0.0);
        self.push(v, Op::Relu(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Max with ties going to `a`.
    pub fn max(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let winner = if self.value(b) > self.value(a) { b } else { a };
        self.max_with_winner(winner)
    }

    fn max_with_winner(&mut self, winner: NodeId) -> NodeId {
        let v = self.value(winner);
        self.push(v, Op::Max { winner })
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let v = self.value(x) * factor;
        self.push(v, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, xs: Vec<NodeId>) -> NodeId {
        let v = xs.iter().map(|x| self.value(*x)).sum();
        self.push(v, Op::Sum(xs))
    }

    /// `−ln softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Vec<NodeId>, target: usize) -> NodeId {
        let values: Vec<f64> = logits.iter().map(|l| self.value(*l)).collect();
        let probabilities = softmax(&values);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = log_z - values[target];
        self.push(
            loss,
            Op::SoftmaxCrossEntropy {
                logits,
                probabilities,
                target,
            },
        )
    }

    /// Gradient of `loss` with respect to every parameter in the buffer.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<f64>, AutodiffError> {
        if self.nodes.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        if loss.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode(loss.0));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut adj = vec![0.0; loss.0 + 1];
        adj[loss.0] = 1.0;
        for i in (0..=loss.0).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(p) => grads[*p] += a,
                Op::Affine { weights, bias, input } => {
                    for (k, x) in input.iter().enumerate() {
                        grads[weights + k] += a * x;
                    }
                    grads[*bias] += a;
                }
                Op::Linear { weights, bias, inputs } => {
                    for (k, x) in inputs.iter().enumerate() {
                        grads[weights + k] += a * self.nodes[x.0].value;
                        adj[x.0] += a * self.params[weights + k];
                    }
                    grads[*bias] += a;
                }
                Op::Sigmoid(x) => {
                    let y = self.nodes[i].value;
                    adj[x.0] += a * y * (1.0 - y);
                }
                Op::Relu(x) => {
                    if self.nodes[x.0].value > 0.0 {
                        adj[x.0] += a;
                    }
                }
                Op::Add(x, y) => {
                    adj[x.0] += a;
                    adj[y.0] += a;
                }
                Op::Mul(x, y) => {
                    let (vx, vy) = (self.nodes[x.0].value, self.nodes[y.0].value);
                    adj[x.0] += a * vy;
                    adj[y.0] += a * vx;
                }
                Op::Max { winner } => adj[winner.0] += a,
                Op::Scale(x, f) => adj[x.0] += a * f,
                Op::Sum(xs) => {
                    for x in xs {
                        adj[x.0] += a;
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    probabilities,
                    target,
                } => {
                    for (k, (l, p)) in logits.iter().zip(probabilities).enumerate() {
                        let indicator = if k == *target { 1.0 } else { 0.0 };
                        adj[l.0] += a * (p - indicator);
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Runs the scoring recurrence on the tape.
pub(crate) struct TapeAlgebra<'t, 'a> {
    pub tape: &'t mut Tape<'a>,
    pub semiring: SemiringKind,
    one: Option<NodeId>,
}

impl<'t, 'a> TapeAlgebra<'t, 'a> {
    pub fn new(tape: &'t mut Tape<'a>, semiring: SemiringKind) -> Self {
        TapeAlgebra {
            tape,
            semiring,
            one: None,
        }
    }
}

impl PathAlgebra for TapeAlgebra<'_, '_> {
    type Value = NodeId;

    fn one(&mut self) -> NodeId {
        use crate::semiring::Semiring;
        if let Some(one) = self.one {
            return one;
        }
        let one = self.tape.constant(self.semiring.one());
        self.one = Some(one);
        one
    }

    fn times(&mut self, a: NodeId, b: NodeId) -> NodeId {
        match self.semiring {
            SemiringKind::MaxSum => self.tape.add(a, b),
            SemiringKind::MaxProduct | SemiringKind::SumProduct => self.tape.mul(a, b),
        }
    }

    fn plus(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.tape.add(a, b)
    }

    fn select(&mut self, winner: NodeId, _loser: NodeId) -> NodeId {
        self.tape.max_with_winner(winner)
    }

    fn score(&self, v: NodeId) -> f64 {
        self.tape.value(v)
    }

    fn idempotent(&self) -> bool {
        !matches!(self.semiring, SemiringKind::SumProduct)
    }

    fn sign_sensitive(&self) -> bool {
        self.semiring.sign_sensitive()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step: 0,
        }
    }

    /// Scalars registered with this optimizer.
    pub fn registered(&self) -> usize {
        self.first_moment.len()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), AutodiffError> {
        let n = self.registered();
        if params.len() != n || grads.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                expected: n,
                found: if params.len() != n { params.len() } else { grads.len() },
            });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(AutodiffError::NonFiniteGradient { index });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..n {
            let g = grads[i];
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

pub const FD_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Largest relative errors first.
    pub worst: Vec<GradCheckEntry>,
}

/// Compares `analytic` against central differences of `loss` at `params`.
pub fn finite_difference_check(
    mut loss: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    step: f64,
    keep_worst: usize,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len());
    let mut probe = params.to_vec();
    let mut entries = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let x = params[i];
        let numeric = central_difference(
            |xi| {
                probe[i] = xi;
                let l = loss(&probe);
                probe[i] = x;
                l
            },
            x,
            step,
        );
        entries.push(GradCheckEntry {
            index: i,
            analytic: analytic[i],
            numeric,
            rel_error: relative_error(analytic[i], numeric),
        });
    }
    entries.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    let max_rel_error = entries.first().map_or(0.0, |e| e.rel_error);
    entries.truncate(keep_worst);
    GradCheckReport {
        checked: params.len(),
        max_rel_error,
        worst: entries,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_local_derivative() {
        let params = [0.0, 0.0];
        let mut tape = Tape::new(&params);
        let input = [1.0];
        let x = tape.affine(0, 1, &input);
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y), 0.5);
        let g = tape.backward(y).unwrap();
        assert_eq!(g, vec![0.25, 0.25]);
    }

    #[test]
    fn empty_tape_errors() {
        let tape = Tape::new(&[]);
        assert_eq!(tape.backward(NodeId(0)), Err(AutodiffError::EmptyTape));
        let mut tape = Tape::new(&[]);
        tape.constant(1.0);
        assert_eq!(tape.backward(NodeId(3)), Err(AutodiffError::UnknownNode(3)));
    }

    #[test]
    fn max_routes_to_winner() {
        let params = [2.0, 1.0];
        let mut tape = Tape::new(&params);
        let a = tape.param(0);
        let b = tape.param(1);
        let m = tape.max(a, b);
        let sq = tape.mul(m, m);
        let g = tape.backward(sq).unwrap();
        assert_eq!(g, vec![4.0, 0.0]);
        // Ties go to the first argument.
        let params = [1.0, 1.0];
        let mut tape = Tape::new(&params);
        let a = tape.param(0);
        let b = tape.param(1);
        let m = tape.max(a, b);
        assert_eq!(tape.backward(m).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn linear_relu_cross_entropy_matches_finite_differences() {
        let params = vec![0.3, -0.2, 0.1, 0.5, -0.4, 0.7, 0.2, -0.1, 0.05];
        let input = [0.9, -1.3];
        let build = |p: &[f64]| -> f64 {
            let mut tape = Tape::new(p);
            let h0 = tape.affine(0, 2, &input);
            let h1 = tape.affine(3, 5, &input);
            let r0 = tape.relu(h0);
            let s1 = tape.sigmoid(h1);
            let l0 = tape.linear(6, 8, vec![r0, s1]);
            let c = tape.constant(0.3);
            let l1 = tape.mul(c, s1);
            let loss = tape.softmax_cross_entropy(vec![l0, l1], 1);
            tape.value(loss)
        };
        let mut tape = Tape::new(&params);
        let h0 = tape.affine(0, 2, &input);
        let h1 = tape.affine(3, 5, &input);
        let r0 = tape.relu(h0);
        let s1 = tape.sigmoid(h1);
        let l0 = tape.linear(6, 8, vec![r0, s1]);
        let c = tape.constant(0.3);
        let l1 = tape.mul(c, s1);
        let loss = tape.softmax_cross_entropy(vec![l0, l1], 1);
        let g = tape.backward(loss).unwrap();
        let report = finite_difference_check(build, &params, &g, FD_STEP, 3);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn harness_self_test() {
        let d = central_difference(|x| x * x, 3.0, FD_STEP);
        assert!((d - 6.0).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_is_learning_rate() {
        let mut adam = AdamState::new(1, 0.1);
        let mut p = [1.0];
        adam.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] - 1.0 + 0.1).abs() < 1e-6);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut adam = AdamState::new(3, 0.1);
        let mut p = [1.0, -2.0, 0.5];
        for _ in 0..10 {
            adam.step(&mut p, &[0.0; 3]).unwrap();
        }
        assert_eq!(p, [1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_is_deterministic() {
        let mut a = AdamState::new(2, 0.01);
        let mut b = a.clone();
        let (mut pa, mut pb) = ([0.3, 0.4], [0.3, 0.4]);
        for g in [[0.1, -0.5], [1.0, 2.0], [-0.3, 0.0]] {
            a.step(&mut pa, &g).unwrap();
            b.step(&mut pb, &g).unwrap();
        }
        assert_eq!(pa, pb);
        assert_eq!(a, b);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut adam = AdamState::new(2, 0.1);
        let mut p = [1.0, 1.0];
        assert_eq!(
            adam.step(&mut p, &[0.0, f64::NAN]),
            Err(AutodiffError::NonFiniteGradient { index: 1 })
        );
        assert_eq!(p, [1.0, 1.0]);
        assert_eq!(adam.steps(), 0);
    }
}
