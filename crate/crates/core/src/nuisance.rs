//! Local nuisance estimation: per-action ridge regression for the conditional
//! mean reward and multinomial logistic regression for the logging
//! propensities.

use serde::{Deserialize, Serialize};

use crate::error::{FedoplError, Result};
use crate::scalar::{dot, Scalar};
use crate::types::{features, Dims, LoggedSample, ParamMatrix};

/// The two nuisance functions an AIPW score needs.
pub trait Nuisance<T: Scalar> {
    /// Estimate of `mu(x; a) = E[Y(a) | X = x]`.
    fn mean_reward(&self, x: &[T], a: usize) -> T;
    /// Estimate of `w(x; a) = 1 / P(A = a | X = x)`.
    fn inverse_propensity(&self, x: &[T], a: usize) -> T;
}

// ── Configuration ───────────────────────────────────────────────────────

/// Ridge penalty `absolute + per_sample * n_a` for an action with `n_a`
/// observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RidgePenalty<T> {
    pub absolute: T,
    pub per_sample: T,
}

impl<T: Scalar> RidgePenalty<T> {
    pub fn absolute(value: T) -> Self {
        Self {
            absolute: value,
            per_sample: T::zero(),
        }
    }

    pub fn for_count(&self, n: usize) -> T {
        self.absolute + self.per_sample * T::of_usize(n)
    }
}

impl<T: Scalar> Default for RidgePenalty<T> {
    fn default() -> Self {
        Self {
            absolute: T::zero(),
            per_sample: T::of(1e-6),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuisanceConfig<T> {
    pub ridge: RidgePenalty<T>,
    /// Propensity penalty on the mean log-likelihood.
    pub l2: T,
    /// Propensity penalty on the summed log-likelihood; contributes `l2_sum / n`.
    pub l2_sum: T,
    pub max_iter: usize,
    pub tol: T,
    pub clip_floor: T,
    /// Also shrink the propensity intercepts, pulling sparse fits toward uniform.
    pub penalize_intercept: bool,
    /// Use the logged propensity of each sample instead of fitting a model.
    pub use_logged_propensity: bool,
}

impl<T: Scalar> Default for NuisanceConfig<T> {
    fn default() -> Self {
        Self {
            ridge: RidgePenalty::default(),
            l2: T::zero(),
            l2_sum: T::of(100.0),
            max_iter: 500,
            tol: T::of(1e-6),
            clip_floor: T::of(0.01),
            penalize_intercept: true,
            use_logged_propensity: false,
        }
    }
}

// ── Response model ──────────────────────────────────────────────────────

/// One linear regressor per action on that action's feature block.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseModel<T> {
    weights: ParamMatrix<T>,
    intercepts: Vec<T>,
    /// Observations each action's regressor was fitted on.
    pub counts: Vec<usize>,
}

impl<T: Scalar> ResponseModel<T> {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            weights: ParamMatrix::zeros(dims.actions, dims.block),
            intercepts: vec![T::zero(); dims.actions],
            counts: vec![0; dims.actions],
        }
    }

    pub fn weights(&self) -> &ParamMatrix<T> {
        &self.weights
    }

    pub fn intercepts(&self) -> &[T] {
        &self.intercepts
    }

    #[inline]
    pub fn predict(&self, x: &[T], a: usize) -> T {
        dot(features(x, a, self.weights.cols()), self.weights.row(a)) + self.intercepts[a]
    }

    /// Actions without a single observation; their regressor is identically zero.
    pub fn unobserved_actions(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&a| self.counts[a] == 0).collect()
    }
}

/// Per-action ridge least squares of rewards on `[phi(x,a), 1]`.
///
/// Solves `(G^T G + ridge I) w = G^T y` for each action's subsample.
pub fn fit_response<T: Scalar>(
    samples: &[LoggedSample<T>],
    dims: Dims,
    ridge: RidgePenalty<T>,
) -> Result<ResponseModel<T>> {
    let q = dims.block;
    let m = q + 1;
    let mut model = ResponseModel::zeros(dims);
    // Accumulate normal equations for every action in one pass.
    let mut grams = vec![vec![T::zero(); m * m]; dims.actions];
    let mut rhs = vec![vec![T::zero(); m]; dims.actions];
    let mut row = vec![T::one(); m];
    for s in samples {
        dims.check_context(s.x())?;
        let a = s.action;
        if a >= dims.actions {
            return Err(FedoplError::InvalidArgument(format!("action {a} outside 0..{}", dims.actions)));
        }
        row[..q].copy_from_slice(features(s.x(), a, q));
        let gram = &mut grams[a];
        for i in 0..m {
            let ri = row[i];
            for j in 0..=i {
                gram[i * m + j] += ri * row[j];
            }
            rhs[a][i] += ri * s.reward;
        }
        model.counts[a] += 1;
    }
    for a in 0..dims.actions {
        if model.counts[a] == 0 {
            continue;
        }
        let gram = &mut grams[a];
        for i in 0..m {
            for j in 0..i {
                gram[j * m + i] = gram[i * m + j];
            }
        }
        let penalty = ridge.for_count(model.counts[a]);
        let coef = solve_ridge(gram, &rhs[a], m, penalty)?;
        model.weights.row_mut(a).copy_from_slice(&coef[..q]);
        model.intercepts[a] = coef[q];
    }
    Ok(model)
}

fn solve_ridge<T: Scalar>(gram: &[T], rhs: &[T], m: usize, penalty: T) -> Result<Vec<T>> {
    let mut a = gram.to_vec();
    for i in 0..m {
        a[i * m + i] += penalty;
    }
    if let Some(x) = cholesky_solve(&a, rhs, m) {
        return Ok(x);
    }
    // Singular with a zero penalty: retry with a jitter relative to the trace.
    let trace: T = (0..m).map(|i| gram[i * m + i]).sum();
    let jitter = (trace / T::of_usize(m)).max(T::one()) * T::of(1e-10);
    for i in 0..m {
        a[i * m + i] += jitter;
    }
    cholesky_solve(&a, rhs, m).ok_or_else(|| FedoplError::NonFinite("ridge normal equations".into()))
}

/// Solves `A x = b` for symmetric positive definite `A` (row-major, `m x m`).
fn cholesky_solve<T: Scalar>(a: &[T], b: &[T], m: usize) -> Option<Vec<T>> {
    let mut l = vec![T::zero(); m * m];
    for i in 0..m {
        for j in 0..=i {
            let mut s = a[i * m + j];
            for k in 0..j {
                s -= l[i * m + k] * l[j * m + k];
            }
            if i == j {
                if !(s > T::zero()) {
                    return None;
                }
                l[i * m + i] = s.sqrt();
            } else {
                l[i * m + j] = s / l[j * m + j];
            }
        }
    }
    let mut y = vec![T::zero(); m];
    for i in 0..m {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * m + k] * y[k];
        }
        y[i] = s / l[i * m + i];
    }
    let mut x = vec![T::zero(); m];
    for i in (0..m).rev() {
        let mut s = y[i];
        for k in i + 1..m {
            s -= l[k * m + i] * x[k];
        }
        x[i] = s / l[i * m + i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

// ── Propensity model ────────────────────────────────────────────────────

/// Multinomial logistic model over the full context plus an intercept, with
/// outputs clipped below at `clip_floor`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModel<T> {
    /// `d x (p + 1)`, the last column is the intercept.
    coef: ParamMatrix<T>,
    clip_floor: T,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: T,
}

impl<T: Scalar> PropensityModel<T> {
    /// All-zero coefficients: uniform probabilities.
    pub fn uniform(dims: Dims, clip_floor: T) -> Result<Self> {
        check_clip_floor(clip_floor, dims.actions)?;
        Ok(Self {
            coef: ParamMatrix::zeros(dims.actions, dims.context_len() + 1),
            clip_floor,
            iterations: 0,
            converged: true,
            gradient_norm: T::zero(),
        })
    }

    pub fn from_coefficients(coef: ParamMatrix<T>, clip_floor: T) -> Result<Self> {
        check_clip_floor(clip_floor, coef.rows())?;
        Ok(Self {
            coef,
            clip_floor,
            iterations: 0,
            converged: true,
            gradient_norm: T::zero(),
        })
    }

    pub fn coefficients(&self) -> &ParamMatrix<T> {
        &self.coef
    }

    pub fn clip_floor(&self) -> T {
        self.clip_floor
    }

    /// Unclipped softmax probabilities.
    pub fn raw_probabilities(&self, x: &[T]) -> Vec<T> {
        let mut logits: Vec<T> = (0..self.coef.rows()).map(|k| self.logit(x, k)).collect();
        softmax_in_place(&mut logits);
        logits
    }

    /// Clipped and renormalised probabilities.
    pub fn probabilities(&self, x: &[T]) -> Vec<T> {
        let mut p = self.raw_probabilities(x);
        clip_renormalize(&mut p, self.clip_floor);
        p
    }

    /// `1 / P(A = a | x)`, never larger than `1 / clip_floor`.
    pub fn inverse_propensity(&self, x: &[T], a: usize) -> T {
        T::one() / self.probabilities(x)[a]
    }

    #[inline]
    fn logit(&self, x: &[T], k: usize) -> T {
        let row = self.coef.row(k);
        let p = x.len();
        dot(&row[..p], x) + row[p]
    }
}

fn check_clip_floor<T: Scalar>(floor: T, d: usize) -> Result<()> {
    if !(floor > T::zero() && floor <= T::one() / T::of_usize(d)) {
        return Err(FedoplError::Config(format!(
            "clip floor must lie in (0, 1/d], got {floor} with d={d}"
        )));
    }
    Ok(())
}

fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for e in v.iter_mut() {
        *e = (*e - max).exp();
        total += *e;
    }
    for e in v.iter_mut() {
        *e /= total;
    }
}

/// Raises entries below `floor` to `floor` and rescales the rest so the
/// vector still sums to one, repeating until no free entry drops below.
pub fn clip_renormalize<T: Scalar>(p: &mut [T], floor: T) {
    let d = p.len();
    let mut clipped = vec![false; d];
    loop {
        let n_clipped = clipped.iter().filter(|c| **c).count();
        let free_mass: T = p
            .iter()
            .zip(&clipped)
            .filter(|(_, c)| !**c)
            .map(|(v, _)| *v)
            .sum();
        let target = T::one() - floor * T::of_usize(n_clipped);
        let scale = target / free_mass;
        let mut changed = false;
        for i in 0..d {
            if !clipped[i] && p[i] * scale < floor {
                clipped[i] = true;
                changed = true;
            }
        }
        if !changed {
            for i in 0..d {
                p[i] = if clipped[i] { floor } else { p[i] * scale };
            }
            return;
        }
    }
}

/// Fits the logging propensities by L2-penalised multinomial logistic
/// regression, using full-batch gradient ascent with backtracking.
///
/// Returns the best iterate even when `max_iter` is exhausted; check
/// [`PropensityModel::converged`].
pub fn fit_propensity<T: Scalar>(
    samples: &[LoggedSample<T>],
    dims: Dims,
    l2: T,
    max_iter: usize,
    tol: T,
    clip_floor: T,
) -> Result<PropensityModel<T>> {
    fit_propensity_penalized(samples, dims, (l2, T::zero()), max_iter, tol, clip_floor)
}

/// As [`fit_propensity`] with separate `(slope, intercept)` penalties.
pub fn fit_propensity_penalized<T: Scalar>(
    samples: &[LoggedSample<T>],
    dims: Dims,
    l2: (T, T),
    max_iter: usize,
    tol: T,
    clip_floor: T,
) -> Result<PropensityModel<T>> {
    check_clip_floor(clip_floor, dims.actions)?;
    let first = samples
        .first()
        .ok_or_else(|| FedoplError::InvalidArgument("no samples for propensity fit".into()))?
        .action;
    if samples.iter().all(|s| s.action == first) {
        return Err(FedoplError::SingleAction(first));
    }
    for s in samples {
        dims.check_context(s.x())?;
    }
    let mut model = PropensityModel::uniform(dims, clip_floor)?;
    let cols = dims.context_len() + 1;
    let mut objective = penalized_loglik(&model, samples, l2);
    let mut step = T::one();
    let half = T::of(0.5);
    for iter in 0..max_iter {
        let grad = loglik_gradient(&model, samples, l2);
        let gnorm2: T = grad.iter().map(|g| *g * *g).sum();
        model.gradient_norm = gnorm2.sqrt();
        model.iterations = iter;
        if model.gradient_norm <= tol {
            model.converged = true;
            return Ok(model);
        }
        step = step * T::of(2.0);
        loop {
            let mut trial = model.clone();
            for (c, g) in trial.coef.as_mut_slice().iter_mut().zip(&grad) {
                *c += step * *g;
            }
            let value = penalized_loglik(&trial, samples, l2);
            if value >= objective + half * step * gnorm2 {
                model.coef = trial.coef;
                objective = value;
                break;
            }
            step = step * half;
            if step < T::of(1e-20) {
                // No ascent direction left at working precision.
                model.converged = true;
                return Ok(model);
            }
        }
        debug_assert_eq!(model.coef.cols(), cols);
    }
    let grad = loglik_gradient(&model, samples, l2);
    model.gradient_norm = grad.iter().map(|g| *g * *g).sum::<T>().sqrt();
    model.iterations = max_iter;
    model.converged = model.gradient_norm <= tol;
    Ok(model)
}

fn penalized_loglik<T: Scalar>(model: &PropensityModel<T>, samples: &[LoggedSample<T>], l2: (T, T)) -> T {
    let d = model.coef.rows();
    let mut ll = T::zero();
    let mut logits = vec![T::zero(); d];
    for s in samples {
        for (k, l) in logits.iter_mut().enumerate() {
            *l = model.logit(s.x(), k);
        }
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + logits.iter().map(|l| (*l - max).exp()).sum::<T>().ln();
        ll += logits[s.action] - lse;
    }
    ll / T::of_usize(samples.len()) - T::of(0.5) * penalty(&model.coef, l2)
}

fn penalty<T: Scalar>(coef: &ParamMatrix<T>, (l2, l2_bias): (T, T)) -> T {
    let p = coef.cols() - 1;
    (0..coef.rows())
        .map(|k| {
            let row = coef.row(k);
            l2 * row[..p].iter().map(|v| *v * *v).sum::<T>() + l2_bias * row[p] * row[p]
        })
        .sum()
}

fn loglik_gradient<T: Scalar>(model: &PropensityModel<T>, samples: &[LoggedSample<T>], (l2, l2_bias): (T, T)) -> Vec<T> {
    let d = model.coef.rows();
    let cols = model.coef.cols();
    let p = cols - 1;
    let mut grad = vec![T::zero(); d * cols];
    for s in samples {
        let probs = model.raw_probabilities(s.x());
        for k in 0..d {
            let resid = if k == s.action { T::one() } else { T::zero() } - probs[k];
            let g = &mut grad[k * cols..(k + 1) * cols];
            for (gj, xj) in g[..p].iter_mut().zip(s.x()) {
                *gj += resid * *xj;
            }
            g[p] += resid;
        }
    }
    let n = T::of_usize(samples.len());
    for k in 0..d {
        let row = model.coef.row(k);
        for j in 0..cols {
            grad[k * cols + j] /= n;
            grad[k * cols + j] -= if j < p { l2 } else { l2_bias } * row[j];
        }
    }
    grad
}

/// `1 / clipped P(A = a | x)` under `model`.
pub fn inverse_propensity<T: Scalar>(model: &PropensityModel<T>, x: &[T], a: usize) -> T {
    model.inverse_propensity(x, a)
}

// ── Fitted pair ─────────────────────────────────────────────────────────

/// Nuisance estimates fitted on one set of samples.
#[derive(Debug, Clone)]
pub struct FittedNuisance<T> {
    pub response: ResponseModel<T>,
    pub propensity: PropensityModel<T>,
}

impl<T: Scalar> Nuisance<T> for FittedNuisance<T> {
    fn mean_reward(&self, x: &[T], a: usize) -> T {
        self.response.predict(x, a)
    }

    fn inverse_propensity(&self, x: &[T], a: usize) -> T {
        self.propensity.inverse_propensity(x, a)
    }
}

/// Fits both nuisances, falling back to the uniform propensity model when the
/// samples contain a single action. Warnings are returned alongside.
pub fn fit_nuisance<T: Scalar>(
    samples: &[LoggedSample<T>],
    dims: Dims,
    cfg: &NuisanceConfig<T>,
) -> Result<(FittedNuisance<T>, Vec<String>)> {
    let mut warnings = Vec::new();
    let response = fit_response(samples, dims, cfg.ridge)?;
    let missing = response.unobserved_actions();
    if !missing.is_empty() {
        warnings.push(format!("actions {missing:?} unobserved; using zero response model"));
    }
    let propensity = if cfg.use_logged_propensity {
        PropensityModel::uniform(dims, cfg.clip_floor)?
    } else {
        let l2 = cfg.l2 + cfg.l2_sum / T::of_usize(samples.len().max(1));
        let l2_bias = if cfg.penalize_intercept { l2 } else { T::zero() };
        match fit_propensity_penalized(samples, dims, (l2, l2_bias), cfg.max_iter, cfg.tol, cfg.clip_floor) {
            Ok(m) => {
                if !m.converged {
                    warnings.push(format!(
                        "propensity fit did not converge (gradient norm {})",
                        m.gradient_norm
                    ));
                }
                m
            }
            Err(FedoplError::SingleAction(a)) => {
                warnings.push(format!("only action {a} observed; using uniform propensities"));
                PropensityModel::uniform(dims, cfg.clip_floor)?
            }
            Err(e) => return Err(e),
        }
    };
    Ok((FittedNuisance { response, propensity }, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{draw_theta_star, sample_dataset, ClientEnvSpec, RewardKind};
    use crate::rng::substream;
    use crate::types::ContextVector;
    use proptest::prelude::*;
    use rand::Rng;

    fn sample(x: Vec<f64>, a: usize, y: f64) -> LoggedSample<f64> {
        LoggedSample::new(ContextVector::new(x).unwrap(), a, y, None).unwrap()
    }

    fn random_samples(seed: u64, n: usize, dims: Dims, mut f: impl FnMut(&[f64], usize) -> f64) -> Vec<LoggedSample<f64>> {
        let mut rng = substream(seed, &[]);
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..dims.context_len()).map(|_| rng.random_range(-2.0..2.0)).collect();
                let a = rng.random_range(0..dims.actions);
                let y = f(&x, a);
                sample(x, a, y)
            })
            .collect()
    }

    #[test]
    fn null_response_gives_zero_model() {
        let dims = Dims::new(3, 2).unwrap();
        let samples = random_samples(1, 60, dims, |_, _| 0.0);
        let m = fit_response(&samples, dims, RidgePenalty::default()).unwrap();
        assert!(m.weights().as_slice().iter().all(|w| *w == 0.0));
        assert!(m.intercepts().iter().all(|b| *b == 0.0));
    }

    #[test]
    fn noiseless_linear_data_is_recovered() {
        let dims = Dims::new(3, 4).unwrap();
        let w_true = [[1.0, -2.0, 0.5, 3.0], [0.0, 1.0, 1.0, -1.0], [2.0, 2.0, -0.5, 0.25]];
        let samples = random_samples(2, 600, dims, |x, a| dot(features(x, a, 4), &w_true[a]));
        let m = fit_response(&samples, dims, RidgePenalty::absolute(1e-8)).unwrap();
        for a in 0..3 {
            for j in 0..4 {
                assert!((m.weights().row(a)[j] - w_true[a][j]).abs() < 1e-4);
            }
            assert!(m.intercepts()[a].abs() < 1e-4);
        }
    }

    #[test]
    fn single_sample_per_action_stays_finite() {
        let dims = Dims::new(2, 3).unwrap();
        let samples = vec![sample(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 0, 1.5), sample(vec![0.5; 6], 1, -2.0)];
        let m = fit_response(&samples, dims, RidgePenalty::absolute(1.0)).unwrap();
        assert!(m.weights().is_finite());
        assert!(m.intercepts().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn unobserved_action_gets_zero_model() {
        let dims = Dims::new(3, 1).unwrap();
        let samples = vec![sample(vec![1.0, 1.0, 1.0], 0, 2.0), sample(vec![2.0, 1.0, 1.0], 1, 3.0)];
        let m = fit_response(&samples, dims, RidgePenalty::absolute(1.0)).unwrap();
        assert_eq!(m.unobserved_actions(), vec![2]);
        assert_eq!(m.predict(&[5.0, 5.0, 5.0], 2), 0.0);
    }

    #[test]
    fn normal_equation_residual_is_small() {
        let dims = Dims::new(2, 3).unwrap();
        let mut rng = substream(3, &[]);
        let samples = random_samples(4, 80, dims, |x, a| x[a * 3] * 2.0 - x[a * 3 + 2] + rng.random_range(-1.0..1.0));
        let ridge = 0.3;
        let m = fit_response(&samples, dims, RidgePenalty::absolute(ridge)).unwrap();
        for a in 0..2 {
            let mut coef = m.weights().row(a).to_vec();
            coef.push(m.intercepts()[a]);
            let mut lhs = vec![0.0; 4];
            let mut rhs = vec![0.0; 4];
            let mut scale: f64 = 1.0;
            for s in samples.iter().filter(|s| s.action == a) {
                let mut g = features(s.x(), a, 3).to_vec();
                g.push(1.0);
                let pred = dot(&g, &coef);
                for i in 0..4 {
                    lhs[i] += g[i] * pred;
                    rhs[i] += g[i] * s.reward;
                    scale = scale.max((g[i] * s.reward).abs());
                }
            }
            for i in 0..4 {
                lhs[i] += ridge * coef[i];
                assert!((lhs[i] - rhs[i]).abs() <= 1e-8 * scale);
            }
        }
    }

    #[test]
    fn zero_coefficient_model_is_uniform() {
        let dims = Dims::new(4, 2).unwrap();
        let m = PropensityModel::<f64>::uniform(dims, 0.01).unwrap();
        let x = [0.3; 8];
        assert_eq!(m.probabilities(&x), vec![0.25; 4]);
        assert_eq!(inverse_propensity(&m, &x, 2), 4.0);
    }

    #[test]
    fn clip_floor_bounds_inverse_propensity() {
        let mut p = vec![0.001f64, 0.009, 0.49, 0.5];
        clip_renormalize(&mut p, 0.01);
        assert_eq!(p[0], 0.01);
        assert_eq!(p[1], 0.01);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(1.0 / p[0], 100.0);
    }

    #[test]
    fn uniform_logging_is_recovered() {
        let dims = Dims::new(4, 10).unwrap();
        let mut rng = substream(5, &[]);
        let theta = draw_theta_star(dims, 1.0, &mut rng);
        let spec = ClientEnvSpec::<f64>::new(0, 1.0, 1.0, RewardKind::Linear, theta).unwrap();
        let data = sample_dataset(&spec, 1_000_000, &mut rng);
        let m = fit_propensity(&data.samples, dims, 1e-4, 500, 1e-6, 0.01).unwrap();
        for s in data.samples.iter().take(500) {
            for p in m.probabilities(s.x()) {
                assert!((p - 0.25).abs() < 0.02, "p={p}");
            }
        }
    }

    #[test]
    fn separable_data_is_kept_off_the_boundary() {
        let dims = Dims::new(2, 1).unwrap();
        let samples: Vec<_> = (0..40)
            .map(|i| {
                let v = if i % 2 == 0 { 3.0 } else { -3.0 };
                sample(vec![v, 0.0], usize::from(i % 2 == 1), 0.0)
            })
            .collect();
        let floor = 0.01;
        let m = fit_propensity(&samples, dims, 0.1, 500, 1e-6, floor).unwrap();
        for s in &samples {
            let p = m.probabilities(s.x());
            assert!(p.iter().all(|v| *v >= floor && *v <= 1.0 - floor));
            assert!(m.inverse_propensity(s.x(), 0) <= 1.0 / floor);
        }
    }

    #[test]
    fn single_action_data_is_an_error() {
        let dims = Dims::new(2, 1).unwrap();
        let samples = vec![sample(vec![1.0, 0.0], 1, 0.0), sample(vec![0.0, 1.0], 1, 0.0)];
        assert!(matches!(
            fit_propensity(&samples, dims, 0.1, 10, 1e-6, 0.01),
            Err(FedoplError::SingleAction(1))
        ));
        let (fitted, warnings) = fit_nuisance(&samples, dims, &NuisanceConfig::default()).unwrap();
        assert_eq!(fitted.propensity.probabilities(&[1.0, 0.0]), vec![0.5, 0.5]);
        assert_eq!(warnings.len(), 2);
    }

    #[test]
    fn inverse_propensity_matches_independent_softmax() {
        let mut rng = substream(6, &[]);
        let coef: Vec<f64> = (0..3 * 7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = PropensityModel::from_coefficients(ParamMatrix::from_vec(3, 7, coef.clone()).unwrap(), 0.01).unwrap();
        for _ in 0..50 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z: Vec<f64> = (0..3)
                .map(|k| (0..6).map(|j| coef[k * 7 + j] * x[j]).sum::<f64>() + coef[k * 7 + 6])
                .collect();
            let total: f64 = z.iter().map(|v| v.exp()).sum();
            for a in 0..3 {
                let expected = total / z[a].exp();
                // all raw probabilities exceed the floor here, so no clipping applies
                assert!((m.inverse_propensity(&x, a) - expected).abs() < 1e-12 * expected);
            }
        }
    }

    #[test]
    fn nuisance_error_product_shrinks_with_sample_size() {
        // squared error of mu-hat times squared error of w-hat, averaged over seeds
        let dims = Dims::new(4, 10).unwrap();
        let theta = draw_theta_star(dims, 1.0, &mut substream(7, &[0]));
        let spec = ClientEnvSpec::new(0, 1.0, 1.0, RewardKind::Linear, theta).unwrap();
        let cfg = NuisanceConfig::default();
        let test: Vec<Vec<f64>> = (0..2000).map(|_| spec.sample_context(&mut substream(7, &[1]))).collect();
        let mut products = Vec::new();
        for &n in &[250usize, 500, 1000] {
            let mut total = 0.0;
            for seed in 0..5u64 {
                let data = sample_dataset(&spec, n, &mut substream(7, &[2, n as u64, seed]));
                let (fit, _) = fit_nuisance(&data.samples, dims, &cfg).unwrap();
                let (mut mu_err, mut w_err) = (0.0, 0.0);
                for x in &test {
                    for a in 0..4 {
                        mu_err += (fit.mean_reward(x, a) - spec.mean_reward(x, a)).powi(2);
                        w_err += (fit.inverse_propensity(x, a) - 4.0).powi(2);
                    }
                }
                let m = (test.len() * 4) as f64;
                total += (mu_err / m) * (w_err / m);
            }
            products.push(total / 5.0);
        }
        assert!(products[0] > products[1] && products[1] > products[2], "{products:?}");
    }

    proptest! {
        #[test]
        fn clipped_probabilities_form_a_distribution(
            raw in proptest::collection::vec(1e-9f64..1.0, 2..8),
            frac in 0.05f64..1.0,
        ) {
            let total: f64 = raw.iter().sum();
            let mut p: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let floor = frac / p.len() as f64;
            clip_renormalize(&mut p, floor);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            prop_assert!(p.iter().all(|v| *v >= floor * (1.0 - 1e-12)));
        }
    }
}
