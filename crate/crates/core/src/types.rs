//! Domain vocabulary: actions, contexts, logged samples, linear policies and
//! client sampling weights.
//!
//! Contexts have length `p = d * q`. The feature map used everywhere is block
//! slicing: the features of action `a` are the `a`-th length-`q` block of the
//! context.

use serde::{Deserialize, Serialize};

use crate::error::{FedoplError, Result};
use crate::scalar::{argmax, dot, Scalar};

// ── Actions and contexts ────────────────────────────────────────────────

/// Finite action space with `d >= 2` actions labelled `0..d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    d: usize,
}

impl ActionSpace {
    pub fn new(d: usize) -> Result<Self> {
        if d < 2 {
            return Err(FedoplError::Config(format!(
                "action space needs at least 2 actions, got {d}"
            )));
        }
        Ok(Self { d })
    }

    pub fn len(&self) -> usize {
        self.d
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, a: usize) -> bool {
        a < self.d
    }
}

/// Shape of the problem: `d` actions and a per-action block of `q` features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub actions: usize,
    pub block: usize,
}

impl Dims {
    pub fn new(actions: usize, block: usize) -> Result<Self> {
        ActionSpace::new(actions)?;
        if block == 0 {
            return Err(FedoplError::Config("feature block size must be positive".into()));
        }
        Ok(Self { actions, block })
    }

    /// Context length `p = d * q`.
    pub fn context_len(&self) -> usize {
        self.actions * self.block
    }

    pub fn check_context<T>(&self, x: &[T]) -> Result<()> {
        if x.len() != self.context_len() {
            return Err(FedoplError::Dimension {
                expected: self.context_len(),
                got: x.len(),
            });
        }
        Ok(())
    }
}

/// Feature block of action `a`: `phi(x, a) = x[a*q .. (a+1)*q]`.
#[inline]
pub fn features<T>(x: &[T], a: usize, block: usize) -> &[T] {
    &x[a * block..(a + 1) * block]
}

/// Real context vector with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector<T>(pub(crate) Vec<T>);

impl<T: Scalar> ContextVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FedoplError::NonFinite("context".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![T::zero(); len])
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

impl<T> AsRef<[T]> for ContextVector<T> {
    fn as_ref(&self) -> &[T] {
        &self.0
    }
}

// ── Logged data ─────────────────────────────────────────────────────────

/// One bandit-feedback record: context, taken action, observed reward and
/// optionally the propensity the logging policy assigned to the action.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedSample<T> {
    pub context: ContextVector<T>,
    pub action: usize,
    pub reward: T,
    pub logged_propensity: Option<T>,
}

impl<T: Scalar> LoggedSample<T> {
    pub fn new(
        context: ContextVector<T>,
        action: usize,
        reward: T,
        logged_propensity: Option<T>,
    ) -> Result<Self> {
        if !reward.is_finite() {
            return Err(FedoplError::NonFinite("reward".into()));
        }
        if let Some(p) = logged_propensity {
            if !(p > T::zero() && p <= T::one()) {
                return Err(FedoplError::InvalidArgument(format!(
                    "logged propensity must lie in (0, 1], got {p}"
                )));
            }
        }
        Ok(Self {
            context,
            action,
            reward,
            logged_propensity,
        })
    }

    pub fn x(&self) -> &[T] {
        self.context.as_slice()
    }
}

/// Local observational data of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset<T> {
    pub client_id: usize,
    pub samples: Vec<LoggedSample<T>>,
}

impl<T: Scalar> ClientDataset<T> {
    pub fn new(client_id: usize, samples: Vec<LoggedSample<T>>) -> Self {
        Self { client_id, samples }
    }

    /// Checks every sample against the problem shape.
    pub fn validate(&self, dims: Dims) -> Result<()> {
        for s in &self.samples {
            dims.check_context(s.x())?;
            if s.action >= dims.actions {
                return Err(FedoplError::InvalidArgument(format!(
                    "client {}: action {} outside 0..{}",
                    self.client_id, s.action, dims.actions
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

// ── Parameters and policies ─────────────────────────────────────────────

/// Dense row-major matrix with one row per action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> ParamMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FedoplError::Dimension {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FedoplError::NonFinite("parameter matrix".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(FedoplError::InvalidArgument("ragged parameter rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|v| *v * *v).sum::<T>().sqrt()
    }
}

/// Anything that maps a context to an action.
pub trait Decide<T: Scalar> {
    fn decide(&self, x: &[T]) -> Result<usize>;
}

/// Linear-score policy `pi(x) = argmax_a phi(x,a)^T theta_a + bias_a`.
///
/// `bias` is zero for the policy class proper; it carries the intercepts of
/// exported cost regressors so that exporting preserves every decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy<T> {
    theta: ParamMatrix<T>,
    bias: Vec<T>,
}

impl<T: Scalar> LinearPolicy<T> {
    pub fn new(theta: ParamMatrix<T>) -> Result<Self> {
        let bias = vec![T::zero(); theta.rows()];
        Self::with_bias(theta, bias)
    }

    pub fn with_bias(theta: ParamMatrix<T>, bias: Vec<T>) -> Result<Self> {
        ActionSpace::new(theta.rows())?;
        if bias.len() != theta.rows() {
            return Err(FedoplError::Dimension {
                expected: theta.rows(),
                got: bias.len(),
            });
        }
        if !theta.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(FedoplError::NonFinite("policy parameters".into()));
        }
        Ok(Self { theta, bias })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            theta: ParamMatrix::zeros(dims.actions, dims.block),
            bias: vec![T::zero(); dims.actions],
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            actions: self.theta.rows(),
            block: self.theta.cols(),
        }
    }

    pub fn theta(&self) -> &ParamMatrix<T> {
        &self.theta
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    /// Score of action `a`; `x` must already have the right length.
    #[inline]
    pub fn score(&self, x: &[T], a: usize) -> T {
        dot(features(x, a, self.theta.cols()), self.theta.row(a)) + self.bias[a]
    }

    pub fn scale(&self, c: T) -> Self {
        Self {
            theta: self.theta.map(|v| v * c),
            bias: self.bias.iter().map(|b| *b * c).collect(),
        }
    }
}

impl<T: Scalar> Decide<T> for LinearPolicy<T> {
    fn decide(&self, x: &[T]) -> Result<usize> {
        self.dims().check_context(x)?;
        Ok(argmax((0..self.theta.rows()).map(|a| self.score(x, a))))
    }
}

/// Action chosen by `policy` at `x`; ties go to the lowest action index.
pub fn policy_decide<T: Scalar>(policy: &LinearPolicy<T>, x: &ContextVector<T>) -> Result<usize> {
    policy.decide(x.as_slice())
}

/// Fraction of contexts on which two policies disagree.
pub fn hamming_distance<T, P1, P2, X>(p1: &P1, p2: &P2, xs: &[X]) -> Result<T>
where
    T: Scalar,
    P1: Decide<T> + ?Sized,
    P2: Decide<T> + ?Sized,
    X: AsRef<[T]>,
{
    if xs.is_empty() {
        return Err(FedoplError::InvalidArgument(
            "hamming distance needs at least one context".into(),
        ));
    }
    let mut disagreements = 0usize;
    for x in xs {
        if p1.decide(x.as_ref())? != p2.decide(x.as_ref())? {
            disagreements += 1;
        }
    }
    Ok(T::of_usize(disagreements) / T::of_usize(xs.len()))
}

// ── Client sampling distribution ────────────────────────────────────────

/// Weights `lambda` over clients, normalised to sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSamplingDistribution<T> {
    weights: Vec<T>,
}

impl<T: Scalar> ClientSamplingDistribution<T> {
    /// Normalises `weights`; rejects negative, non-finite or all-zero input.
    pub fn new(weights: Vec<T>) -> Result<Self> {
        if weights.is_empty() {
            return Err(FedoplError::InvalidArgument("no client weights".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
            return Err(FedoplError::InvalidArgument(
                "client weights must be finite and nonnegative".into(),
            ));
        }
        let total: T = weights.iter().copied().sum();
        if total <= T::zero() {
            return Err(FedoplError::InvalidArgument("client weights sum to zero".into()));
        }
        if (total - T::one()).abs() <= T::epsilon() {
            return Ok(Self { weights });
        }
        Ok(Self {
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    /// Empirical distribution of samples across clients, `n_c / n`.
    pub fn empirical(counts: &[usize]) -> Result<Self> {
        Self::new(counts.iter().map(|&c| T::of_usize(c)).collect())
    }

    pub fn uniform(clients: usize) -> Result<Self> {
        Self::new(vec![T::one(); clients])
    }

    pub fn point_mass(clients: usize, c: usize) -> Result<Self> {
        if c >= clients {
            return Err(FedoplError::InvalidArgument(format!(
                "client {c} outside 0..{clients}"
            )));
        }
        let mut w = vec![T::zero(); clients];
        w[c] = T::one();
        Self::new(w)
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}
