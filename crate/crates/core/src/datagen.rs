//! Synthetic multi-client bandit environments.
//!
//! Each client draws contexts `X ~ N(0, sigma2 I_p)`, logs an action uniformly
//! at random and observes one of `d` potential rewards
//! `Y(a) | X ~ N(mu(X; a), rho2)`. The mean reward is either linear in the
//! action's feature block or a scaled sine of it. All potential outcomes are
//! kept in [`CounterfactualSample`] so regret can be computed exactly.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FedoplError, Result};
use crate::nuisance::Nuisance;
use crate::scalar::{dot, Scalar};
use crate::types::{features, ClientDataset, ContextVector, Dims, LoggedSample, ParamMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardKind<T> {
    Linear,
    /// `k * sin(phi(x,a)^T theta_a / k)`
    ScaledSine { k: T },
}

/// Generative description of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientEnvSpec<T> {
    pub client_id: usize,
    sigma2: T,
    rho2: T,
    reward: RewardKind<T>,
    theta_star: ParamMatrix<T>,
}

impl<T: Scalar> ClientEnvSpec<T> {
    pub fn new(
        client_id: usize,
        sigma2: T,
        rho2: T,
        reward: RewardKind<T>,
        theta_star: ParamMatrix<T>,
    ) -> Result<Self> {
        if !(sigma2 > T::zero()) || !(rho2 > T::zero()) {
            return Err(FedoplError::Config(format!(
                "client {client_id}: variances must be positive (sigma2={sigma2}, rho2={rho2})"
            )));
        }
        if let RewardKind::ScaledSine { k } = reward {
            if !(k > T::zero()) {
                return Err(FedoplError::Config(format!(
                    "client {client_id}: sine scale must be positive, got {k}"
                )));
            }
        }
        Dims::new(theta_star.rows(), theta_star.cols())?;
        Ok(Self {
            client_id,
            sigma2,
            rho2,
            reward,
            theta_star,
        })
    }

    pub fn dims(&self) -> Dims {
        Dims {
            actions: self.theta_star.rows(),
            block: self.theta_star.cols(),
        }
    }

    pub fn sigma2(&self) -> T {
        self.sigma2
    }

    pub fn rho2(&self) -> T {
        self.rho2
    }

    pub fn reward_kind(&self) -> RewardKind<T> {
        self.reward
    }

    pub fn theta_star(&self) -> &ParamMatrix<T> {
        &self.theta_star
    }

    /// Logging propensity of every action under uniform logging.
    pub fn logging_propensity(&self) -> T {
        T::one() / T::of_usize(self.dims().actions)
    }

    /// `mu(x; a)` without the dimension check.
    #[inline]
    pub(crate) fn mean_reward(&self, x: &[T], a: usize) -> T {
        let z = dot(features(x, a, self.theta_star.cols()), self.theta_star.row(a));
        match self.reward {
            RewardKind::Linear => z,
            RewardKind::ScaledSine { k } => k * (z / k).sin(),
        }
    }

    pub fn sample_context<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let sd = self.sigma2.as_f64().sqrt();
        (0..self.dims().context_len())
            .map(|_| T::of(sd * rng.sample::<f64, _>(StandardNormal)))
            .collect()
    }
}

/// Draws `theta* ~ N(0, omega2 I)` with shape `d x q`.
pub fn draw_theta_star<T: Scalar, R: Rng + ?Sized>(dims: Dims, omega2: T, rng: &mut R) -> ParamMatrix<T> {
    let sd = omega2.as_f64().sqrt();
    let data = (0..dims.actions * dims.block)
        .map(|_| T::of(sd * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    ParamMatrix::from_vec(dims.actions, dims.block, data).expect("shape matches")
}

/// True conditional mean reward `mu_c(x; a)`.
pub fn true_mean_reward<T: Scalar>(spec: &ClientEnvSpec<T>, x: &ContextVector<T>, a: usize) -> Result<T> {
    let dims = spec.dims();
    dims.check_context(x.as_slice())?;
    if a >= dims.actions {
        return Err(FedoplError::InvalidArgument(format!("action {a} outside 0..{}", dims.actions)));
    }
    Ok(spec.mean_reward(x.as_slice(), a))
}

/// A draw with every potential outcome attached.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualSample<T> {
    pub context: ContextVector<T>,
    pub potential_rewards: Vec<T>,
    pub logged_action: usize,
    pub logged_reward: T,
}

impl<T: Scalar> CounterfactualSample<T> {
    /// The bandit-feedback view: only the logged action's reward survives.
    pub fn to_logged(&self) -> LoggedSample<T> {
        let d = self.potential_rewards.len();
        LoggedSample {
            context: self.context.clone(),
            action: self.logged_action,
            reward: self.logged_reward,
            logged_propensity: Some(T::one() / T::of_usize(d)),
        }
    }
}

/// One draw from the complete client distribution.
///
/// The action is drawn independently of the potential outcomes, so
/// unconfoundedness and overlap (`1/d` for every action) hold by construction.
pub fn sample_counterfactual<T: Scalar, R: Rng + ?Sized>(
    spec: &ClientEnvSpec<T>,
    rng: &mut R,
) -> CounterfactualSample<T> {
    let d = spec.dims().actions;
    let x = spec.sample_context(rng);
    let noise_sd = spec.rho2.as_f64().sqrt();
    let potential_rewards: Vec<T> = (0..d)
        .map(|a| spec.mean_reward(&x, a) + T::of(noise_sd * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let logged_action = rng.random_range(0..d);
    let logged_reward = potential_rewards[logged_action];
    CounterfactualSample {
        context: ContextVector(x),
        potential_rewards,
        logged_action,
        logged_reward,
    }
}

/// `n` logged samples for the client.
pub fn sample_dataset<T: Scalar, R: Rng + ?Sized>(
    spec: &ClientEnvSpec<T>,
    n: usize,
    rng: &mut R,
) -> ClientDataset<T> {
    let samples = (0..n).map(|_| sample_counterfactual(spec, rng).to_logged()).collect();
    ClientDataset::new(spec.client_id, samples)
}

// ── Sample allocation ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AllocationRule {
    /// `floor(n / C)` for every client; the remainder is dropped.
    EqualSplit,
    /// `floor(ln n)` for `special`, the rest split evenly among the others
    /// with the remainder going to the lowest ids.
    LogForOne { special: usize },
}

/// Per-client sample counts for a total budget of `n`.
pub fn allocate(rule: AllocationRule, n: usize, clients: usize) -> Result<Vec<usize>> {
    if clients == 0 {
        return Err(FedoplError::Config("no clients".into()));
    }
    let counts = match rule {
        AllocationRule::EqualSplit => vec![n / clients; clients],
        AllocationRule::LogForOne { special } => {
            if special >= clients {
                return Err(FedoplError::Config(format!(
                    "special client {special} outside 0..{clients}"
                )));
            }
            let small = if n == 0 { 0 } else { (n as f64).ln().floor() as usize };
            let mut counts = vec![0; clients];
            counts[special] = small.min(n);
            let others = clients - 1;
            if others > 0 {
                let rest = n - counts[special];
                let (base, extra) = (rest / others, rest % others);
                let mut handed = 0;
                for (c, slot) in counts.iter_mut().enumerate() {
                    if c == special {
                        continue;
                    }
                    *slot = base + usize::from(handed < extra);
                    handed += 1;
                }
            }
            counts
        }
    };
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(FedoplError::Config(format!(
            "total sample size {n} leaves client {c} with no samples"
        )));
    }
    Ok(counts)
}

// ── Oracle nuisances ────────────────────────────────────────────────────

/// True `mu_c` and `w_c = d` for a uniformly logging client.
#[derive(Debug, Clone)]
pub struct OracleNuisance<'a, T> {
    spec: &'a ClientEnvSpec<T>,
}

impl<'a, T: Scalar> OracleNuisance<'a, T> {
    pub fn new(spec: &'a ClientEnvSpec<T>) -> Self {
        Self { spec }
    }
}

impl<T: Scalar> Nuisance<T> for OracleNuisance<'_, T> {
    fn mean_reward(&self, x: &[T], a: usize) -> T {
        self.spec.mean_reward(x, a)
    }

    fn inverse_propensity(&self, _x: &[T], _a: usize) -> T {
        T::of_usize(self.spec.dims().actions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn linear_spec(theta: ParamMatrix<f64>, sigma2: f64, rho2: f64) -> ClientEnvSpec<f64> {
        ClientEnvSpec::new(0, sigma2, rho2, RewardKind::Linear, theta).unwrap()
    }

    #[test]
    fn zero_theta_gives_zero_mean() {
        let spec = linear_spec(ParamMatrix::zeros(4, 10), 1.0, 1.0);
        let mut rng = substream(1, &[]);
        for _ in 0..10 {
            let x = ContextVector::new(spec.sample_context(&mut rng)).unwrap();
            for a in 0..4 {
                assert_eq!(true_mean_reward(&spec, &x, a).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn scaled_sine_is_near_linear_near_zero() {
        let mut theta = ParamMatrix::zeros(2, 1);
        theta.row_mut(0)[0] = 1.0;
        let spec = ClientEnvSpec::new(0, 1.0, 1.0, RewardKind::ScaledSine { k: 50.0 }, theta).unwrap();
        let zero = ContextVector::new(vec![0.0, 0.0]).unwrap();
        assert_eq!(true_mean_reward(&spec, &zero, 0).unwrap(), 0.0);
        let one = ContextVector::new(vec![1.0, 0.0]).unwrap();
        let v = true_mean_reward(&spec, &one, 0).unwrap();
        assert!((v - 50.0 * (0.02f64).sin()).abs() < 1e-15);
        assert!((v - 0.9999).abs() < 1e-4);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let theta = ParamMatrix::<f64>::zeros(4, 2);
        assert!(ClientEnvSpec::new(0, 0.0, 1.0, RewardKind::Linear, theta.clone()).is_err());
        assert!(ClientEnvSpec::new(0, 1.0, -1.0, RewardKind::Linear, theta.clone()).is_err());
        assert!(ClientEnvSpec::new(0, 1.0, 1.0, RewardKind::ScaledSine { k: 0.0 }, theta).is_err());
    }

    #[test]
    fn degenerate_variance_collapses_context() {
        let spec = linear_spec(ParamMatrix::zeros(4, 3), f64::MIN_POSITIVE, 1.0);
        let s = sample_counterfactual(&spec, &mut substream(2, &[]));
        assert!(s.context.as_slice().iter().all(|v| v.abs() < 1e-100));
    }

    #[test]
    fn logged_reward_is_the_chosen_potential_outcome() {
        let mut rng = substream(3, &[]);
        let theta = draw_theta_star(Dims::new(4, 3).unwrap(), 1.0, &mut rng);
        let spec = linear_spec(theta, 1.0, 1.0);
        for _ in 0..100 {
            let s = sample_counterfactual(&spec, &mut rng);
            assert_eq!(s.logged_reward, s.potential_rewards[s.logged_action]);
            let l = s.to_logged();
            assert_eq!(l.logged_propensity, Some(0.25));
        }
    }

    #[test]
    fn action_frequencies_are_uniform() {
        let spec = linear_spec(ParamMatrix::zeros(4, 1), 1.0, 1.0);
        let mut rng = substream(4, &[]);
        let m = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..m {
            counts[sample_counterfactual(&spec, &mut rng).logged_action] += 1;
        }
        let sd = (m as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - m as f64 * 0.25).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn reward_noise_is_centred_and_unconfounded() {
        let mut rng = substream(1, &[]);
        let theta = draw_theta_star(Dims::new(4, 2).unwrap(), 1.0, &mut rng);
        let rho2 = 2.0;
        let spec = linear_spec(theta, 1.0, rho2);
        let m = 100_000;
        let (mut sum, mut cross, mut ind_sum, mut ind_sq, mut e_sq) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..m {
            let s = sample_counterfactual(&spec, &mut rng);
            let eps = s.potential_rewards[1] - spec.mean_reward(s.context.as_slice(), 1);
            let ind = f64::from(u8::from(s.logged_action == 1));
            sum += eps;
            cross += ind * eps;
            ind_sum += ind;
            ind_sq += ind * ind;
            e_sq += eps * eps;
        }
        let mf = m as f64;
        assert!((sum / mf).abs() < 3.0 * (rho2 / mf).sqrt());
        // correlation between the action indicator and the noise
        let cov = cross / mf - (ind_sum / mf) * (sum / mf);
        let corr = cov / ((ind_sq / mf - (ind_sum / mf).powi(2)) * (e_sq / mf)).sqrt();
        assert!(corr.abs() < 3.0 / mf.sqrt(), "corr {corr}");
    }

    #[test]
    fn identical_seeds_give_identical_streams() {
        let theta = draw_theta_star(Dims::new(3, 2).unwrap(), 1.0, &mut substream(9, &[0]));
        let spec = linear_spec(theta, 1.0, 1.0);
        let a = sample_dataset(&spec, 50, &mut substream(9, &[1, 2]));
        let b = sample_dataset(&spec, 50, &mut substream(9, &[1, 2]));
        assert_eq!(a, b);
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate(AllocationRule::EqualSplit, 999, 3).unwrap(), vec![333, 333, 333]);
        assert_eq!(allocate(AllocationRule::EqualSplit, 3, 3).unwrap(), vec![1, 1, 1]);
        assert_eq!(
            allocate(AllocationRule::LogForOne { special: 0 }, 10_000, 3).unwrap(),
            vec![9, 4996, 4995]
        );
        assert!(allocate(AllocationRule::EqualSplit, 2, 3).is_err());
        assert!(allocate(AllocationRule::LogForOne { special: 0 }, 2, 3).is_err());
    }
}
