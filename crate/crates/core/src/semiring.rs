//! Semirings that parameterize automaton scoring.
//!
//! | kind          | ⊕   | ⊗ | zero | one |
//! |---------------|-----|---|------|-----|
//! | `max-product` | max | × | 0    | 1   |
//! | `max-sum`     | max | + | −∞   | 0   |
//! | `sum-product` | +   | × | 0    | 1   |

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SemiringError {
    #[error("NaN operand in {op} under {kind}")]
    NaN { kind: SemiringKind, op: &'static str },
    #[error("unknown semiring `{0}` (expected max-product, max-sum or sum-product)")]
    UnknownKind(String),
}

/// Score algebra used by every scoring routine.
///
/// Implementations must satisfy the usual semiring laws on the values they
/// are actually fed.
pub trait Semiring {
    fn zero(&self) -> f64;
    fn one(&self) -> f64;
    fn plus(&self, a: f64, b: f64) -> f64;
    fn times(&self, a: f64, b: f64) -> f64;
    /// True when `plus` selects one of its operands (a max).
    fn is_idempotent(&self) -> bool;
    /// True when `times` by a negative operand reverses the order `plus`
    /// selects by (max-product over all reals). Max over paths then needs the
    /// minimum tracked alongside.
    fn sign_sensitive(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SemiringKind {
    MaxProduct,
    MaxSum,
    SumProduct,
}

impl SemiringKind {
    pub const ALL: [SemiringKind; 3] = [
        SemiringKind::MaxProduct,
        SemiringKind::MaxSum,
        SemiringKind::SumProduct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SemiringKind::MaxProduct => "max-product",
            SemiringKind::MaxSum => "max-sum",
            SemiringKind::SumProduct => "sum-product",
        }
    }

    /// Checked ⊕. NaN operands are reported instead of propagated.
    pub fn checked_plus(self, a: f64, b: f64) -> Result<f64, SemiringError> {
        if a.is_nan() || b.is_nan() {
            return Err(SemiringError::NaN { kind: self, op: "plus" });
        }
        Ok(Semiring::plus(&self, a, b))
    }

    /// Checked ⊗. NaN operands are reported instead of propagated.
    pub fn checked_times(self, a: f64, b: f64) -> Result<f64, SemiringError> {
        if a.is_nan() || b.is_nan() {
            return Err(SemiringError::NaN { kind: self, op: "times" });
        }
        Ok(Semiring::times(&self, a, b))
    }
}

impl Semiring for SemiringKind {
    #[inline]
    fn zero(&self) -> f64 {
        match self {
            SemiringKind::MaxSum => f64::NEG_INFINITY,
            SemiringKind::MaxProduct | SemiringKind::SumProduct => 0.0,
        }
    }

    #[inline]
    fn one(&self) -> f64 {
        match self {
            SemiringKind::MaxSum => 0.0,
            SemiringKind::MaxProduct | SemiringKind::SumProduct => 1.0,
        }
    }

    #[inline]
    fn plus(&self, a: f64, b: f64) -> f64 {
        match self {
            SemiringKind::MaxProduct | SemiringKind::MaxSum => {
                if b > a {
                    b
                } else {
                    a
                }
            }
            SemiringKind::SumProduct => a + b,
        }
    }

    #[inline]
    fn times(&self, a: f64, b: f64) -> f64 {
        match self {
            // −∞ + x stays −∞ for every finite x.
            SemiringKind::MaxSum => a + b,
            SemiringKind::MaxProduct | SemiringKind::SumProduct => a * b,
        }
    }

    #[inline]
    fn is_idempotent(&self) -> bool {
        !matches!(self, SemiringKind::SumProduct)
    }

    fn sign_sensitive(&self) -> bool {
        matches!(self, SemiringKind::MaxProduct)
    }
}

impl fmt::Display for SemiringKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SemiringKind {
    type Err = SemiringError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max-product" => Ok(SemiringKind::MaxProduct),
            "max-sum" => Ok(SemiringKind::MaxSum),
            "sum-product" => Ok(SemiringKind::SumProduct),
            other => Err(SemiringError::UnknownKind(other.to_string())),
        }
    }
}

/// Wraps a semiring and counts ⊕ and ⊗ invocations.
#[derive(Debug)]
pub struct Counting<S> {
    inner: S,
    plus_calls: Cell<u64>,
    times_calls: Cell<u64>,
}

impl<S: Semiring> Counting<S> {
    pub fn new(inner: S) -> Self {
        Counting {
            inner,
            plus_calls: Cell::new(0),
            times_calls: Cell::new(0),
        }
    }

    pub fn plus_count(&self) -> u64 {
        self.plus_calls.get()
    }

    pub fn times_count(&self) -> u64 {
        self.times_calls.get()
    }

    pub fn total(&self) -> u64 {
        self.plus_count() + self.times_count()
    }

    pub fn reset(&self) {
        self.plus_calls.set(0);
        self.times_calls.set(0);
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }
}

impl<S: Semiring> Semiring for Counting<S> {
    fn zero(&self) -> f64 {
        self.inner.zero()
    }

    fn one(&self) -> f64 {
        self.inner.one()
    }

    fn plus(&self, a: f64, b: f64) -> f64 {
        self.plus_calls.set(self.plus_calls.get() + 1);
        self.inner.plus(a, b)
    }

    fn times(&self, a: f64, b: f64) -> f64 {
        self.times_calls.set(self.times_calls.get() + 1);
        self.inner.times(a, b)
    }

    fn is_idempotent(&self) -> bool {
        self.inner.is_idempotent()
    }

    fn sign_sensitive(&self) -> bool {
        self.inner.sign_sensitive()
    }
}
