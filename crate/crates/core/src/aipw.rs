//! Cross-fitted AIPW scores and the doubly robust policy value estimate.
//!
//! For a logged sample `(x, a_obs, y)` and every action `a` the score is
//!
//! ```text
//! Gamma(a) = mu(x; a) + (y - mu(x; a)) * w(x; a) * 1{a_obs = a}
//! ```
//!
//! where `mu` and `w` come from nuisance models fitted on the folds that do
//! not contain the sample.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::datagen::ClientEnvSpec;
use crate::error::{FedoplError, Result};
use crate::nuisance::{fit_nuisance, FittedNuisance, Nuisance, NuisanceConfig};
use crate::scalar::Scalar;
use crate::types::{ClientDataset, ClientSamplingDistribution, ContextVector, Decide, Dims, LoggedSample};

/// Approximate AIPW scores of one sample for every action.
#[derive(Debug, Clone, PartialEq)]
pub struct AipwScoreRow<T> {
    pub context: ContextVector<T>,
    pub scores: Vec<T>,
}

/// AIPW rows of one client, in the order of its dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientScores<T> {
    pub client_id: usize,
    pub rows: Vec<AipwScoreRow<T>>,
    /// Fold of each row, when the rows were cross-fitted.
    pub folds: Option<Vec<usize>>,
}

impl<T: Scalar> ClientScores<T> {
    pub fn new(client_id: usize, rows: Vec<AipwScoreRow<T>>) -> Self {
        Self {
            client_id,
            rows,
            folds: None,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Scores of one sample under the given nuisances.
///
/// `observed_weight`, when given, replaces `w(x; a_obs)` (used for logged
/// propensities).
pub fn score_row<T: Scalar, N: Nuisance<T> + ?Sized>(
    nuisance: &N,
    sample: &LoggedSample<T>,
    d: usize,
    observed_weight: Option<T>,
) -> AipwScoreRow<T> {
    let x = sample.x();
    let scores = (0..d)
        .map(|a| {
            let mu = nuisance.mean_reward(x, a);
            if a == sample.action {
                let w = observed_weight.unwrap_or_else(|| nuisance.inverse_propensity(x, a));
                mu + (sample.reward - mu) * w
            } else {
                mu
            }
        })
        .collect();
    AipwScoreRow {
        context: sample.context.clone(),
        scores,
    }
}

/// Scores every sample of `dataset` with a single nuisance pair (no cross-fitting).
pub fn score_dataset<T: Scalar, N: Nuisance<T> + ?Sized>(
    nuisance: &N,
    dataset: &ClientDataset<T>,
    d: usize,
) -> ClientScores<T> {
    let rows = dataset.samples.iter().map(|s| score_row(nuisance, s, d, None)).collect();
    ClientScores::new(dataset.client_id, rows)
}

// ── Folds ───────────────────────────────────────────────────────────────

/// Surjective map from sample index to fold index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    k: usize,
    fold_of: Vec<usize>,
}

impl FoldAssignment {
    /// Seeded random permutation cut into `k` contiguous blocks whose sizes
    /// differ by at most one.
    pub fn random<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Self> {
        if k == 0 {
            return Err(FedoplError::Config("fold count must be positive".into()));
        }
        if n < k {
            return Err(FedoplError::InvalidArgument(format!(
                "{n} samples cannot fill {k} folds"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut fold_of = vec![0; n];
        let (base, extra) = (n / k, n % k);
        let mut pos = 0;
        for fold in 0..k {
            let size = base + usize::from(fold < extra);
            for &i in &order[pos..pos + size] {
                fold_of[i] = fold;
            }
            pos += size;
        }
        Ok(Self { k, fold_of })
    }

    /// Explicit assignment; every fold in `0..k` must be used.
    pub fn from_assignment(k: usize, fold_of: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; k];
        for &f in &fold_of {
            if f >= k {
                return Err(FedoplError::InvalidArgument(format!("fold {f} outside 0..{k}")));
            }
            seen[f] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(FedoplError::InvalidArgument("every fold must be nonempty".into()));
        }
        Ok(Self { k, fold_of })
    }

    pub fn folds(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self, i: usize) -> usize {
        self.fold_of[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.fold_of
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

// ── Cross-fitting ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct CrossFit<T> {
    pub scores: ClientScores<T>,
    pub folds: FoldAssignment,
    /// Nuisance models indexed by the fold they were *not* trained on.
    pub models: Vec<FittedNuisance<T>>,
    pub warnings: Vec<String>,
}

/// Cross-fitted AIPW scores with random folds.
pub fn cross_fit_scores<T: Scalar, R: Rng + ?Sized>(
    dataset: &ClientDataset<T>,
    dims: Dims,
    k: usize,
    cfg: &NuisanceConfig<T>,
    rng: &mut R,
) -> Result<CrossFit<T>> {
    let folds = FoldAssignment::random(dataset.len(), k, rng)?;
    cross_fit_with_folds(dataset, dims, folds, cfg)
}

/// Cross-fitted AIPW scores for a given fold assignment.
///
/// With `k = 1` there is no held-out data and the single model is fitted on
/// the whole dataset.
pub fn cross_fit_with_folds<T: Scalar>(
    dataset: &ClientDataset<T>,
    dims: Dims,
    folds: FoldAssignment,
    cfg: &NuisanceConfig<T>,
) -> Result<CrossFit<T>> {
    dataset.validate(dims)?;
    if folds.as_slice().len() != dataset.len() {
        return Err(FedoplError::Dimension {
            expected: dataset.len(),
            got: folds.as_slice().len(),
        });
    }
    let k = folds.folds();
    let fitted: Vec<Result<(FittedNuisance<T>, Vec<String>)>> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let train: Vec<LoggedSample<T>> = dataset
                .samples
                .iter()
                .enumerate()
                .filter(|(i, _)| k == 1 || folds.fold_of(*i) != fold)
                .map(|(_, s)| s.clone())
                .collect();
            fit_nuisance(&train, dims, cfg)
        })
        .collect();
    let mut models = Vec::with_capacity(k);
    let mut warnings = Vec::new();
    for (fold, res) in fitted.into_iter().enumerate() {
        let (model, w) = res?;
        warnings.extend(w.into_iter().map(|m| format!("client {} fold {fold}: {m}", dataset.client_id)));
        models.push(model);
    }
    for w in &warnings {
        log::debug!("{w}");
    }
    let rows = dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let observed_weight = if cfg.use_logged_propensity {
                s.logged_propensity.map(|p| T::one() / p.max(cfg.clip_floor))
            } else {
                None
            };
            score_row(&models[folds.fold_of(i)], s, dims.actions, observed_weight)
        })
        .collect();
    Ok(CrossFit {
        scores: ClientScores {
            client_id: dataset.client_id,
            rows,
            folds: Some(folds.as_slice().to_vec()),
        },
        folds,
        models,
        warnings,
    })
}

/// Number of scores exceeding the diagnostic bound `B + 2B / clip_floor`.
pub fn score_bound_violations<T: Scalar>(scores: &ClientScores<T>, reward_bound: T, clip_floor: T) -> usize {
    let bound = reward_bound + T::of(2.0) * reward_bound / clip_floor;
    scores
        .rows
        .iter()
        .flat_map(|r| r.scores.iter())
        .filter(|s| s.abs() > bound)
        .count()
}

// ── Value estimates ─────────────────────────────────────────────────────

/// Sample mean of the scores of the actions `policy` picks.
pub fn local_value_estimate<T: Scalar, P: Decide<T> + ?Sized>(scores: &ClientScores<T>, policy: &P) -> Result<T> {
    if scores.is_empty() {
        return Err(FedoplError::MissingClientData(scores.client_id));
    }
    let mut total = T::zero();
    for row in &scores.rows {
        total += row.scores[policy.decide(row.context.as_slice())?];
    }
    Ok(total / T::of_usize(scores.len()))
}

/// Doubly robust global value `sum_c lambda_c * mean_i Gamma_i^c(pi(X_i^c))`.
///
/// `clients[c]` is weighted by `lambda.weights()[c]`; clients with zero
/// weight may be empty.
pub fn policy_value_estimate<T: Scalar, P: Decide<T> + ?Sized>(
    clients: &[ClientScores<T>],
    policy: &P,
    lambda: &ClientSamplingDistribution<T>,
) -> Result<T> {
    if clients.len() != lambda.len() {
        return Err(FedoplError::Dimension {
            expected: lambda.len(),
            got: clients.len(),
        });
    }
    let mut value = T::zero();
    for (scores, &w) in clients.iter().zip(lambda.weights()) {
        if w == T::zero() {
            continue;
        }
        value += w * local_value_estimate(scores, policy)?;
    }
    Ok(value)
}

/// Monte Carlo estimate of the true value `E[mu_c(X, pi(X))]` with its
/// standard error.
pub fn oracle_value_monte_carlo<T: Scalar, P: Decide<T> + ?Sized, R: Rng + ?Sized>(
    spec: &ClientEnvSpec<T>,
    policy: &P,
    m: usize,
    rng: &mut R,
) -> Result<(T, T)> {
    if m == 0 {
        return Err(FedoplError::InvalidArgument("need at least one Monte Carlo draw".into()));
    }
    let mut values = Vec::with_capacity(m);
    for _ in 0..m {
        let x = spec.sample_context(rng);
        values.push(spec.mean_reward(&x, policy.decide(&x)?));
    }
    Ok(mean_and_se(&values))
}

/// Mean and standard error of the mean (zero for a single value).
pub fn mean_and_se<T: Scalar>(values: &[T]) -> (T, T) {
    let n = T::of_usize(values.len());
    let mean = values.iter().copied().sum::<T>() / n;
    if values.len() < 2 {
        return (mean, T::zero());
    }
    let var = values.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / (n - T::one());
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{draw_theta_star, sample_counterfactual, sample_dataset, OracleNuisance, RewardKind};
    use crate::nuisance::fit_nuisance;
    use crate::rng::substream;
    use crate::types::{LinearPolicy, ParamMatrix};

    fn spec(seed: u64, dims: Dims) -> ClientEnvSpec<f64> {
        let theta = draw_theta_star(dims, 1.0, &mut substream(seed, &[0]));
        ClientEnvSpec::new(0, 1.0, 1.0, RewardKind::Linear, theta).unwrap()
    }

    #[test]
    fn oracle_scores_for_unobserved_and_observed_actions() {
        let dims = Dims::new(4, 3).unwrap();
        let env = spec(1, dims);
        let oracle = OracleNuisance::new(&env);
        let mut rng = substream(1, &[1]);
        for _ in 0..20 {
            let s = sample_counterfactual(&env, &mut rng).to_logged();
            let row = score_row(&oracle, &s, 4, None);
            for a in 0..4 {
                let mu = env.mean_reward(s.x(), a);
                if a == s.action {
                    assert_eq!(row.scores[a], mu + (s.reward - mu) * 4.0);
                } else {
                    assert_eq!(row.scores[a], mu);
                }
            }
        }
    }

    #[test]
    fn folds_are_balanced_and_surjective() {
        let f = FoldAssignment::random(23, 5, &mut substream(2, &[])).unwrap();
        let sizes = f.sizes();
        assert_eq!(sizes.iter().sum::<usize>(), 23);
        assert!(sizes.iter().all(|s| *s == 4 || *s == 5));
        assert!(FoldAssignment::random(3, 5, &mut substream(2, &[])).is_err());
    }

    #[test]
    fn two_fold_cross_fit_matches_manual_procedure() {
        let dims = Dims::new(2, 2).unwrap();
        let env = {
            let theta = draw_theta_star(dims, 1.0, &mut substream(3, &[0]));
            ClientEnvSpec::new(0, 1.0, 1.0, RewardKind::Linear, theta).unwrap()
        };
        // alternate actions so every half sees both
        let mut data = sample_dataset(&env, 10, &mut substream(3, &[1]));
        for (i, s) in data.samples.iter_mut().enumerate() {
            s.action = i % 2;
        }
        let assignment: Vec<usize> = (0..10).map(|i| usize::from(i >= 6 || i == 2)).collect();
        let folds = FoldAssignment::from_assignment(2, assignment.clone()).unwrap();
        let cfg = NuisanceConfig {
            ridge: crate::nuisance::RidgePenalty::absolute(0.5),
            ..NuisanceConfig::default()
        };
        let fit = cross_fit_with_folds(&data, dims, folds, &cfg).unwrap();

        for fold in 0..2 {
            let train: Vec<_> = data
                .samples
                .iter()
                .zip(&assignment)
                .filter(|(_, f)| **f != fold)
                .map(|(s, _)| s.clone())
                .collect();
            let (model, _) = fit_nuisance(&train, dims, &cfg).unwrap();
            for (i, s) in data.samples.iter().enumerate() {
                if assignment[i] != fold {
                    continue;
                }
                for a in 0..2 {
                    let mu = model.response.predict(s.x(), a);
                    let expected = if a == s.action {
                        mu + (s.reward - mu) * model.propensity.inverse_propensity(s.x(), a)
                    } else {
                        mu
                    };
                    assert_eq!(fit.scores.rows[i].scores[a], expected);
                }
            }
        }
    }

    #[test]
    fn permuting_within_a_fold_leaves_its_scores_unchanged() {
        let dims = Dims::new(3, 2).unwrap();
        let env = spec(4, dims);
        let data = sample_dataset(&env, 60, &mut substream(4, &[1]));
        let folds = FoldAssignment::random(60, 3, &mut substream(4, &[2])).unwrap();
        let cfg = NuisanceConfig::default();
        let base = cross_fit_with_folds(&data, dims, folds.clone(), &cfg).unwrap();

        // reverse the order of the samples belonging to fold 0
        let idx: Vec<usize> = (0..60).filter(|i| folds.fold_of(*i) == 0).collect();
        let mut permuted = data.clone();
        for (from, to) in idx.iter().zip(idx.iter().rev()) {
            permuted.samples[*to] = data.samples[*from].clone();
        }
        let other = cross_fit_with_folds(&permuted, dims, folds.clone(), &cfg).unwrap();
        for (from, to) in idx.iter().zip(idx.iter().rev()) {
            assert_eq!(base.scores.rows[*from], other.scores.rows[*to]);
        }
    }

    #[test]
    fn too_few_samples_for_folds_is_an_error() {
        let dims = Dims::new(2, 1).unwrap();
        let env = spec(5, dims);
        let data = sample_dataset(&env, 3, &mut substream(5, &[1]));
        assert!(cross_fit_scores(&data, dims, 5, &NuisanceConfig::default(), &mut substream(5, &[2])).is_err());
    }

    #[test]
    fn out_fold_missing_an_action_warns_and_uses_zero_model() {
        let dims = Dims::new(3, 1).unwrap();
        let env = spec(6, dims);
        let mut data = sample_dataset(&env, 8, &mut substream(6, &[1]));
        // action 2 appears only in fold 0
        let assignment = vec![0, 0, 0, 0, 1, 1, 1, 1];
        for (i, s) in data.samples.iter_mut().enumerate() {
            s.action = if i == 0 { 2 } else { i % 2 };
        }
        let folds = FoldAssignment::from_assignment(2, assignment).unwrap();
        let fit = cross_fit_with_folds(&data, dims, folds, &NuisanceConfig::default()).unwrap();
        assert!(fit.warnings.iter().any(|w| w.contains("unobserved")));
        assert_eq!(fit.models[0].response.unobserved_actions(), vec![2]);
    }

    #[test]
    fn value_estimate_examples() {
        let ctx = |v: f64| ContextVector::new(vec![v, -v]).unwrap();
        let policy = LinearPolicy::<f64>::zeros(Dims::new(2, 1).unwrap()); // always action 0
        let c0 = ClientScores::new(
            0,
            vec![
                AipwScoreRow { context: ctx(1.0), scores: vec![1.0, 9.0] },
                AipwScoreRow { context: ctx(2.0), scores: vec![3.0, 9.0] },
            ],
        );
        let single = ClientSamplingDistribution::new(vec![1.0]).unwrap();
        assert_eq!(policy_value_estimate(std::slice::from_ref(&c0), &policy, &single).unwrap(), 2.0);

        let constant = |id, v: f64| ClientScores::new(id, vec![AipwScoreRow { context: ctx(0.5), scores: vec![v, v] }; 3]);
        let lam = ClientSamplingDistribution::new(vec![0.3, 0.7]).unwrap();
        let v = policy_value_estimate(&[constant(0, 2.0), constant(1, 5.0)], &policy, &lam).unwrap();
        assert!((v - (0.3 * 2.0 + 0.7 * 5.0)).abs() < 1e-15);

        let empty = ClientScores::new(1, vec![]);
        assert!(matches!(
            policy_value_estimate(&[c0.clone(), empty.clone()], &policy, &lam),
            Err(FedoplError::MissingClientData(1))
        ));
        let lam0 = ClientSamplingDistribution::new(vec![1.0, 0.0]).unwrap();
        assert!(policy_value_estimate(&[c0, empty], &policy, &lam0).is_ok());
    }

    #[test]
    fn value_estimate_matches_triple_loop() {
        let mut rng = substream(7, &[]);
        let clients: Vec<ClientScores<f64>> = (0..3)
            .map(|c| {
                let rows = (0..10 + c * 5)
                    .map(|_| AipwScoreRow {
                        context: ContextVector::new((0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
                        scores: (0..3).map(|_| rng.random_range(-5.0..5.0)).collect(),
                    })
                    .collect();
                ClientScores::new(c, rows)
            })
            .collect();
        let theta = ParamMatrix::from_vec(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let policy = LinearPolicy::new(theta).unwrap();
        let lam = ClientSamplingDistribution::new(vec![0.2, 0.5, 0.3]).unwrap();
        let mut expected = 0.0;
        for (c, scores) in clients.iter().enumerate() {
            let mut total = 0.0;
            for row in &scores.rows {
                let x = row.context.as_slice();
                let mut best = 0;
                for a in 1..3 {
                    if policy.score(x, a) > policy.score(x, best) {
                        best = a;
                    }
                }
                total += row.scores[best];
            }
            expected += lam.weights()[c] * total / scores.len() as f64;
        }
        let got = policy_value_estimate(&clients, &policy, &lam).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn oracle_value_of_zero_environment_is_zero() {
        let dims = Dims::new(4, 3).unwrap();
        let env = ClientEnvSpec::new(0, 1.0, 1.0, RewardKind::Linear, ParamMatrix::zeros(4, 3)).unwrap();
        let policy = LinearPolicy::zeros(dims);
        let (mean, se) = oracle_value_monte_carlo(&env, &policy, 1000, &mut substream(8, &[])).unwrap();
        assert_eq!(mean, 0.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn constant_policy_value_is_centred() {
        let dims = Dims::new(4, 3).unwrap();
        let env = spec(9, dims);
        let policy = LinearPolicy::zeros(dims);
        let (mean, se) = oracle_value_monte_carlo(&env, &policy, 20_000, &mut substream(9, &[1])).unwrap();
        assert!(mean.abs() < 3.0 * se, "{mean} {se}");
    }

    #[test]
    fn oracle_value_is_self_consistent() {
        let dims = Dims::new(4, 3).unwrap();
        let env = spec(10, dims);
        let theta = draw_theta_star(dims, 1.0, &mut substream(10, &[5]));
        let policy = LinearPolicy::new(theta).unwrap();
        let (m1, s1) = oracle_value_monte_carlo(&env, &policy, 1_000_000, &mut substream(10, &[1])).unwrap();
        let (m2, s2) = oracle_value_monte_carlo(&env, &policy, 10_000, &mut substream(10, &[2])).unwrap();
        assert!((m1 - m2).abs() < 3.0 * (s1 * s1 + s2 * s2).sqrt());
    }
}
