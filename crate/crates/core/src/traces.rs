//! Finite traces with value semantics, plus bounded sources for
//! possibly-infinite continuations.
//!
//! A [`FiniteTrace`] is a non-empty sequence of states. Infinite behaviors are
//! represented as a finite prefix plus a seeded generator with an explicit
//! horizon ([`TraceSource`]), so every operation in this module terminates.

use thiserror::Error;

/// Errors raised by trace construction and source consumption.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    /// A trace must contain at least one element.
    #[error("trace must be non-empty")]
    Empty,
    /// The source was asked to produce past its end.
    #[error("source exhausted: cannot produce past end of trace")]
    SourceExhausted,
}

/// Non-empty immutable sequence of states.
///
/// `first` and `last` are total precisely because emptiness is unrepresentable.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FiniteTrace<T> {
    items: Vec<T>,
}

impl<T> FiniteTrace<T> {
    /// Single-element trace.
    pub fn singleton(first: T) -> Self {
        FiniteTrace { items: vec![first] }
    }

    /// Builds a trace from a vector; rejects the empty vector.
    pub fn from_vec(items: Vec<T>) -> Result<Self, TraceError> {
        if items.is_empty() {
            Err(TraceError::Empty)
        } else {
            Ok(FiniteTrace { items })
        }
    }

    pub fn first(&self) -> &T {
        &self.items[0]
    }

    pub fn last(&self) -> &T {
        self.items.last().expect("trace is non-empty")
    }

    /// Element at position `i`, or `None` past the end.
    pub fn lookup(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    /// A trace is never empty; provided for clippy symmetry only.
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Returns a new trace extended by exactly one state.
    pub fn extended(&self, next: T) -> Self
    where
        T: Clone,
    {
        let mut items = self.items.clone();
        items.push(next);
        FiniteTrace { items }
    }

    /// In-place extension; same semantics as [`FiniteTrace::extended`] without
    /// the copy. Length grows by exactly one.
    pub fn push(&mut self, next: T) {
        self.items.push(next);
    }

    /// Removes the last state; refuses to empty the trace.
    pub fn pop(&mut self) -> Option<T> {
        if self.items.len() > 1 {
            self.items.pop()
        } else {
            None
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.items.iter()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.items
    }

    /// The trace restricted to its first `n + 1` elements (a prefix is itself
    /// a valid, non-empty trace).
    pub fn prefix(&self, last_index: usize) -> Self
    where
        T: Clone,
    {
        FiniteTrace {
            items: self.items[..=last_index.min(self.items.len() - 1)].to_vec(),
        }
    }
}

impl<T> std::ops::Index<usize> for FiniteTrace<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.items[i]
    }
}

/// Pairwise admissibility test for adjacent trace states.
pub trait StepOracle<T> {
    fn admits(&self, from: &T, to: &T) -> bool;
}

impl<T, F: Fn(&T, &T) -> bool> StepOracle<T> for F {
    fn admits(&self, from: &T, to: &T) -> bool {
        self(from, to)
    }
}

/// True iff every adjacent pair of `t` is admitted by `oracle`.
pub fn valid_trace<T>(t: &FiniteTrace<T>, oracle: &impl StepOracle<T>) -> bool {
    t.as_slice().windows(2).all(|w| oracle.admits(&w[0], &w[1]))
}

/// Bounded stateful producer of trace continuations.
///
/// At most `horizon` elements are ever produced; asking for more after the
/// generator has signalled its end is an error rather than silence.
pub struct TraceSource<'a, T> {
    gen: Box<dyn FnMut() -> Option<T> + 'a>,
    horizon: usize,
    produced: usize,
    finished: bool,
}

impl<'a, T> TraceSource<'a, T> {
    pub fn new(horizon: usize, gen: impl FnMut() -> Option<T> + 'a) -> Self {
        TraceSource { gen: Box::new(gen), horizon, produced: 0, finished: false }
    }

    /// Wraps an iterator as a source with the given horizon.
    pub fn from_iter<I>(horizon: usize, iter: I) -> Self
    where
        I: IntoIterator<Item = T>,
        I::IntoIter: 'a,
    {
        let mut it = iter.into_iter();
        TraceSource::new(horizon, move || it.next())
    }

    /// Next element, `Ok(None)` exactly once at end-of-trace, then errors.
    pub fn next(&mut self) -> Result<Option<T>, TraceError> {
        if self.finished {
            return Err(TraceError::SourceExhausted);
        }
        if self.produced >= self.horizon {
            self.finished = true;
            return Ok(None);
        }
        match (self.gen)() {
            Some(x) => {
                self.produced += 1;
                Ok(Some(x))
            }
            None => {
                self.finished = true;
                Ok(None)
            }
        }
    }

    pub fn produced(&self) -> usize {
        self.produced
    }
}

/// Appends up to `n` elements drawn from `s` onto `t`.
///
/// Stops early without error if the source ends first, so the result length
/// is `t.len() + min(n, available)`.
pub fn unroll<T: Clone>(
    n: usize,
    t: &FiniteTrace<T>,
    s: &mut TraceSource<'_, T>,
) -> Result<FiniteTrace<T>, TraceError> {
    let mut out = t.clone();
    for _ in 0..n {
        match s.next() {
            Ok(Some(x)) => out.push(x),
            Ok(None) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Advances `s` past its first `min(n, available)` elements, returning how
/// many were actually dropped.
pub fn drop_prefix<T>(n: usize, s: &mut TraceSource<'_, T>) -> Result<usize, TraceError> {
    let mut dropped = 0;
    for _ in 0..n {
        match s.next() {
            Ok(Some(_)) => dropped += 1,
            Ok(None) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(dropped)
}
