//! Online cost-sensitive one-against-all (CSOAA) oracle.
//!
//! Each action owns a linear regressor on its feature block plus an
//! intercept. Costs are negative AIPW scores; an update takes one SGD step on
//! the squared loss `0.5 * (phi(x,a)^T w_a + b_a - cost_a)^2` for every action
//! of every sample in the batch, and the policy picks the cheapest action.

use serde::{Deserialize, Serialize};

use crate::aipw::ClientScores;
use crate::error::{FedoplError, Result};
use crate::scalar::{argmin, dot, Scalar};
use crate::types::{features, ContextVector, Decide, Dims, LinearPolicy, ParamMatrix};

/// Step size `eta0 / (1 + t * decay)` at global step `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRate<T> {
    pub eta0: T,
    pub decay: T,
}

impl<T: Scalar> LearningRate<T> {
    pub fn new(eta0: T, decay: T) -> Self {
        Self { eta0, decay }
    }

    pub fn constant(eta0: T) -> Self {
        Self { eta0, decay: T::zero() }
    }

    #[inline]
    pub fn at(&self, step: u64) -> T {
        self.eta0 / (T::one() + T::from_u64(step).expect("step fits a float") * self.decay)
    }
}

impl<T: Scalar> Default for LearningRate<T> {
    fn default() -> Self {
        Self {
            eta0: T::of(0.05),
            decay: T::of(1e-4),
        }
    }
}

/// One training example: a context and the cost of every action.
#[derive(Debug, Clone, PartialEq)]
pub struct CsmcExample<T> {
    pub context: ContextVector<T>,
    pub costs: Vec<T>,
}

impl<T: Scalar> CsmcExample<T> {
    pub fn x(&self) -> &[T] {
        self.context.as_slice()
    }
}

/// Converts AIPW rows into examples with `cost = -score`.
pub fn examples_from_scores<T: Scalar>(scores: &ClientScores<T>) -> Vec<CsmcExample<T>> {
    scores
        .rows
        .iter()
        .map(|r| CsmcExample {
            context: r.context.clone(),
            costs: r.scores.iter().map(|s| -*s).collect(),
        })
        .collect()
}

/// Per-action cost regressors and the learning-rate step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsmcRegressors<T> {
    pub weights: ParamMatrix<T>,
    pub intercepts: Vec<T>,
    pub steps: u64,
}

/// Gradient of the per-sample loss, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CsmcGradient<T> {
    pub weights: ParamMatrix<T>,
    pub intercepts: Vec<T>,
}

impl<T: Scalar> CsmcRegressors<T> {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            weights: ParamMatrix::zeros(dims.actions, dims.block),
            intercepts: vec![T::zero(); dims.actions],
            steps: 0,
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            actions: self.weights.rows(),
            block: self.weights.cols(),
        }
    }

    #[inline]
    pub fn predict_cost(&self, x: &[T], a: usize) -> T {
        dot(features(x, a, self.weights.cols()), self.weights.row(a)) + self.intercepts[a]
    }

    /// Summed squared loss over actions for one example.
    pub fn loss(&self, ex: &CsmcExample<T>) -> T {
        let half = T::of(0.5);
        (0..self.weights.rows())
            .map(|a| {
                let r = self.predict_cost(ex.x(), a) - ex.costs[a];
                half * r * r
            })
            .sum()
    }

    pub fn gradient(&self, ex: &CsmcExample<T>) -> CsmcGradient<T> {
        let dims = self.dims();
        let mut weights = ParamMatrix::zeros(dims.actions, dims.block);
        let mut intercepts = vec![T::zero(); dims.actions];
        for a in 0..dims.actions {
            let r = self.predict_cost(ex.x(), a) - ex.costs[a];
            for (g, f) in weights.row_mut(a).iter_mut().zip(features(ex.x(), a, dims.block)) {
                *g = r * *f;
            }
            intercepts[a] = r;
        }
        CsmcGradient { weights, intercepts }
    }

    fn check_example(&self, ex: &CsmcExample<T>) -> Result<()> {
        let dims = self.dims();
        dims.check_context(ex.x())?;
        if ex.costs.len() != dims.actions {
            return Err(FedoplError::Dimension {
                expected: dims.actions,
                got: ex.costs.len(),
            });
        }
        if ex.costs.iter().any(|c| !c.is_finite()) {
            return Err(FedoplError::NonFinite("CSMC cost vector".into()));
        }
        Ok(())
    }

    /// One SGD step per example, in order. Returns the mean pre-update loss.
    ///
    /// The batch is validated before any parameter changes, so on error the
    /// state is untouched.
    pub fn update<'a, I>(&mut self, batch: I, lr: &LearningRate<T>) -> Result<T>
    where
        I: IntoIterator<Item = &'a CsmcExample<T>>,
        T: 'a,
    {
        let batch: Vec<&CsmcExample<T>> = batch.into_iter().collect();
        if batch.is_empty() {
            return Err(FedoplError::InvalidArgument("empty CSMC batch".into()));
        }
        for ex in &batch {
            self.check_example(ex)?;
        }
        let count = batch.len();
        let q = self.weights.cols();
        let half = T::of(0.5);
        let mut total_loss = T::zero();
        for ex in batch {
            let eta = lr.at(self.steps);
            for a in 0..self.weights.rows() {
                let phi = features(ex.x(), a, q);
                let r = self.predict_cost(ex.x(), a) - ex.costs[a];
                total_loss += half * r * r;
                let step = eta * r;
                for (w, f) in self.weights.row_mut(a).iter_mut().zip(phi) {
                    *w -= step * *f;
                }
                self.intercepts[a] -= step;
            }
            self.steps += 1;
        }
        if !self.is_finite() {
            return Err(FedoplError::NonFinite("CSMC parameters after update (learning rate too large?)".into()));
        }
        Ok(total_loss / T::of_usize(count))
    }

    pub fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.intercepts.iter().all(|b| b.is_finite())
    }

    /// Frobenius norm of weights and intercepts together.
    pub fn norm(&self) -> T {
        (self.weights.as_slice().iter().chain(&self.intercepts).map(|v| *v * *v).sum::<T>()).sqrt()
    }

    /// Flat view `[weights..., intercepts...]`, handy for averaging.
    pub fn to_flat(&self) -> Vec<T> {
        self.weights.as_slice().iter().chain(&self.intercepts).copied().collect()
    }

    pub fn from_flat(dims: Dims, flat: &[T], steps: u64) -> Result<Self> {
        let nw = dims.actions * dims.block;
        if flat.len() != nw + dims.actions {
            return Err(FedoplError::Dimension {
                expected: nw + dims.actions,
                got: flat.len(),
            });
        }
        Ok(Self {
            weights: ParamMatrix::from_vec(dims.actions, dims.block, flat[..nw].to_vec())?,
            intercepts: flat[nw..].to_vec(),
            steps,
        })
    }
}

impl<T: Scalar> Decide<T> for CsmcRegressors<T> {
    fn decide(&self, x: &[T]) -> Result<usize> {
        self.dims().check_context(x)?;
        Ok(argmin((0..self.weights.rows()).map(|a| self.predict_cost(x, a))))
    }
}

/// Functional form of [`CsmcRegressors::update`].
pub fn csmc_update<T: Scalar>(
    state: &CsmcRegressors<T>,
    batch: &[CsmcExample<T>],
    lr: &LearningRate<T>,
) -> Result<CsmcRegressors<T>> {
    let mut next = state.clone();
    next.update(batch, lr)?;
    Ok(next)
}

/// Cheapest action under the regressors; ties go to the lowest index.
pub fn csmc_predict<T: Scalar>(state: &CsmcRegressors<T>, x: &ContextVector<T>) -> Result<usize> {
    state.decide(x.as_slice())
}

/// Linear policy making the same decisions as the regressors.
///
/// Minimising `phi^T w_a + b_a` is maximising `phi^T (-w_a) + (-b_a)`, so the
/// exported policy carries `theta = -w` and `bias = -b`. Negation is exact in
/// floating point, which keeps every decision identical including ties.
pub fn export_policy<T: Scalar>(state: &CsmcRegressors<T>) -> LinearPolicy<T> {
    LinearPolicy::with_bias(
        state.weights.map(|w| -w),
        state.intercepts.iter().map(|b| -*b).collect(),
    )
    .expect("regressors are finite and well shaped")
}
