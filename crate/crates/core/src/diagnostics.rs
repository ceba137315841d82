//! Skewness of a client sampling distribution, Gaussian distribution-shift
//! terms, empirical regret and the participation criterion.

use num_traits::{FromPrimitive, Num};
use rand::Rng;
use serde::Serialize;

use crate::aipw::mean_and_se;
use crate::datagen::ClientEnvSpec;
use crate::error::{FedoplError, Result};
use crate::rng::{purpose, substream};
use crate::scalar::Scalar;
use crate::types::{ClientSamplingDistribution, ContextVector, Decide};

// ── Skewness ────────────────────────────────────────────────────────────

/// `s(lambda || n_bar)` and `chi2(lambda || n_bar)`.
///
/// Both are `None` when `lambda` puts mass on a client without samples; the
/// offending clients are listed in `infinite_mass`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkewnessReport<T> {
    pub skewness: Option<T>,
    pub chi2: Option<T>,
    pub n_bar: Vec<T>,
    pub infinite_mass: Vec<usize>,
}

impl<T: Clone> SkewnessReport<T> {
    pub fn is_finite(&self) -> bool {
        self.infinite_mass.is_empty()
    }
}

/// Skewness over any numeric field, so exact rationals can be used.
///
/// `skewness = sum_c lambda_c^2 / n_bar_c` and, independently,
/// `chi2 = sum_c (lambda_c - n_bar_c)^2 / n_bar_c`.
pub fn skewness_exact<T>(lambda: &[T], counts: &[usize]) -> Result<SkewnessReport<T>>
where
    T: Num + Clone + PartialOrd + FromPrimitive,
{
    if lambda.len() != counts.len() {
        return Err(FedoplError::Dimension {
            expected: counts.len(),
            got: lambda.len(),
        });
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(FedoplError::InvalidArgument("no samples on any client".into()));
    }
    let conv = |v: usize| T::from_usize(v).ok_or_else(|| FedoplError::InvalidArgument(format!("{v} not representable")));
    let n = conv(total)?;
    let n_bar = counts.iter().map(|&c| conv(c).map(|c| c / n.clone())).collect::<Result<Vec<T>>>()?;
    let infinite_mass: Vec<usize> = (0..counts.len())
        .filter(|&c| counts[c] == 0 && lambda[c] > T::zero())
        .collect();
    if !infinite_mass.is_empty() {
        return Ok(SkewnessReport {
            skewness: None,
            chi2: None,
            n_bar,
            infinite_mass,
        });
    }
    let mut skew = T::zero();
    let mut chi2 = T::zero();
    for (l, nb) in lambda.iter().zip(&n_bar) {
        if *nb == T::zero() {
            continue;
        }
        skew = skew + l.clone() * l.clone() / nb.clone();
        let diff = l.clone() - nb.clone();
        chi2 = chi2 + diff.clone() * diff / nb.clone();
    }
    Ok(SkewnessReport {
        skewness: Some(skew),
        chi2: Some(chi2),
        n_bar,
        infinite_mass,
    })
}

/// Floating-point skewness; checks `s = 1 + chi2` to a relative `1e-9`.
pub fn skewness<T: Scalar>(lambda: &ClientSamplingDistribution<T>, counts: &[usize]) -> Result<SkewnessReport<T>> {
    let report = skewness_exact(lambda.weights(), counts)?;
    if let (Some(s), Some(chi2)) = (report.skewness, report.chi2) {
        let gap = (s - (T::one() + chi2)).abs();
        if gap > T::of(1e-9) * s.max(T::one()) {
            return Err(FedoplError::NonFinite(format!("skewness {s} disagrees with 1 + chi2 = {}", T::one() + chi2)));
        }
    }
    Ok(report)
}

/// `lambda = n_bar + eps` with `eps_c = -alpha n_bar_c` for `c != special`
/// and `eps_special = alpha (1 - n_bar_special)`.
pub fn skewed_lambda_exact<T>(n_bar: &[T], special: usize, alpha: T) -> Result<Vec<T>>
where
    T: Num + Clone + PartialOrd,
{
    if special >= n_bar.len() {
        return Err(FedoplError::InvalidArgument(format!(
            "special client {special} outside 0..{}",
            n_bar.len()
        )));
    }
    if alpha < T::zero() || alpha > T::one() {
        return Err(FedoplError::InvalidArgument("alpha must lie in [0, 1]".into()));
    }
    let out: Vec<T> = n_bar
        .iter()
        .enumerate()
        .map(|(c, nb)| {
            if c == special {
                nb.clone() + alpha.clone() * (T::one() - nb.clone())
            } else {
                nb.clone() - alpha.clone() * nb.clone()
            }
        })
        .collect();
    assert!(out.iter().all(|w| *w >= T::zero()), "skewed lambda has a negative weight");
    Ok(out)
}

/// Floating-point [`skewed_lambda_exact`] from sample counts.
pub fn skewed_lambda<T: Scalar>(counts: &[usize], special: usize, alpha: T) -> Result<ClientSamplingDistribution<T>> {
    let n_bar = ClientSamplingDistribution::<T>::empirical(counts)?;
    let weights = skewed_lambda_exact(n_bar.weights(), special, alpha)?;
    let total: T = weights.iter().copied().sum();
    assert!((total - T::one()).abs() <= T::of(1e-9), "skewed lambda sums to {total}");
    ClientSamplingDistribution::new(weights)
}

// ── Distribution shift ──────────────────────────────────────────────────

/// Gaussian KL terms between clients `c` and `k`, in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShiftTerms<T> {
    pub kl_context: T,
    pub kl_propensity: T,
    pub kl_reward: T,
    pub kl_reward_se: T,
}

impl<T: Scalar> ShiftTerms<T> {
    /// `sqrt(KL_X) + sqrt(KL_e) + sqrt(KL_Y|X)`.
    pub fn sqrt_sum(&self) -> T {
        self.kl_context.sqrt() + self.kl_propensity.sqrt() + self.kl_reward.sqrt()
    }
}

/// `KL(N(0, a I_p) || N(0, b I_p)) = (p/2)(a/b - 1 - ln(a/b))`.
pub fn gaussian_kl_isotropic<T: Scalar>(var_c: T, var_k: T, p: usize) -> T {
    let r = var_c / var_k;
    T::of_usize(p) * T::of(0.5) * (r - T::one() - r.ln())
}

/// KL terms of client `c` against client `k`.
///
/// The reward term averages over `x ~ N(0, sigma_c^2 I)` the per-context KL
/// between the `d` independent Gaussian potential rewards; it is computed in
/// closed form when the mean functions coincide.
pub fn gaussian_shift_terms<T: Scalar, R: Rng + ?Sized>(
    spec_c: &ClientEnvSpec<T>,
    spec_k: &ClientEnvSpec<T>,
    draws: usize,
    rng: &mut R,
) -> Result<ShiftTerms<T>> {
    let dims = spec_c.dims();
    if dims != spec_k.dims() {
        return Err(FedoplError::Dimension {
            expected: dims.context_len(),
            got: spec_k.dims().context_len(),
        });
    }
    let d = dims.actions;
    let kl_context = gaussian_kl_isotropic(spec_c.sigma2(), spec_k.sigma2(), dims.context_len());
    let (ec, ek) = (spec_c.logging_propensity(), spec_k.logging_propensity());
    let kl_propensity = T::of_usize(d) * ec * (ec / ek).ln();

    let r = spec_c.rho2() / spec_k.rho2();
    let variance_part = T::of_usize(d) * T::of(0.5) * (r - T::one() - r.ln());
    let same_mean = spec_c.reward_kind() == spec_k.reward_kind() && spec_c.theta_star() == spec_k.theta_star();
    let (mean_part, se) = if same_mean {
        (T::zero(), T::zero())
    } else {
        if draws == 0 {
            return Err(FedoplError::InvalidArgument("need at least one Monte Carlo draw".into()));
        }
        let scale = T::one() / (T::of(2.0) * spec_k.rho2());
        let values: Vec<T> = (0..draws)
            .map(|_| {
                let x = spec_c.sample_context(rng);
                (0..d)
                    .map(|a| {
                        let diff = spec_c.mean_reward(&x, a) - spec_k.mean_reward(&x, a);
                        diff * diff * scale
                    })
                    .sum()
            })
            .collect();
        mean_and_se(&values)
    };
    Ok(ShiftTerms {
        kl_context,
        kl_propensity,
        kl_reward: variance_part + mean_part,
        kl_reward_se: se,
    })
}

/// Pairwise shift terms and the TV upper bound of every client against the
/// `lambda` mixture.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftReport<T> {
    /// `pairs[c][k]` holds the terms of `c` against `k`.
    pub pairs: Vec<Vec<ShiftTerms<T>>>,
    /// `tv_upper[c] = E_{k ~ lambda}[sqrt_sum(c, k)]`.
    pub tv_upper: Vec<T>,
}

pub fn shift_report<T: Scalar>(
    specs: &[ClientEnvSpec<T>],
    lambda: &ClientSamplingDistribution<T>,
    draws: usize,
    seed: u64,
) -> Result<ShiftReport<T>> {
    if specs.len() != lambda.len() {
        return Err(FedoplError::Dimension {
            expected: specs.len(),
            got: lambda.len(),
        });
    }
    let mut pairs = Vec::with_capacity(specs.len());
    for (c, sc) in specs.iter().enumerate() {
        let row = specs
            .iter()
            .enumerate()
            .map(|(k, sk)| gaussian_shift_terms(sc, sk, draws, &mut substream(seed, &[purpose::SHIFT, c as u64, k as u64])))
            .collect::<Result<Vec<_>>>()?;
        pairs.push(row);
    }
    let tv_upper = pairs
        .iter()
        .map(|row| row.iter().zip(lambda.weights()).map(|(t, w)| *w * t.sqrt_sum()).sum())
        .collect();
    Ok(ShiftReport { pairs, tv_upper })
}

// ── Empirical regret ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate<T> {
    pub value: T,
    pub se: T,
}

/// Fixed test contexts per client with every action's true mean reward.
///
/// Reusing the same draws for every policy makes regret a paired
/// comparison: a policy against itself has regret exactly zero.
#[derive(Debug, Clone)]
pub struct TestBed<T> {
    contexts: Vec<Vec<ContextVector<T>>>,
    means: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> TestBed<T> {
    pub fn draw(specs: &[ClientEnvSpec<T>], draws: usize, seed: u64) -> Result<Self> {
        if draws == 0 {
            return Err(FedoplError::InvalidArgument("test bed needs at least one draw".into()));
        }
        let mut contexts = Vec::with_capacity(specs.len());
        let mut means = Vec::with_capacity(specs.len());
        for (c, spec) in specs.iter().enumerate() {
            let mut rng = substream(seed, &[purpose::TEST, c as u64]);
            let xs: Vec<ContextVector<T>> = (0..draws).map(|_| ContextVector(spec.sample_context(&mut rng))).collect();
            means.push(
                xs.iter()
                    .map(|x| (0..spec.dims().actions).map(|a| spec.mean_reward(x.as_slice(), a)).collect())
                    .collect(),
            );
            contexts.push(xs);
        }
        Ok(Self { contexts, means })
    }

    pub fn clients(&self) -> usize {
        self.contexts.len()
    }

    pub fn contexts(&self, c: usize) -> &[ContextVector<T>] {
        &self.contexts[c]
    }

    /// Per-context `mu_c(x, pi(x))`.
    pub fn rewards<P: Decide<T> + ?Sized>(&self, c: usize, policy: &P) -> Result<Vec<T>> {
        self.contexts[c]
            .iter()
            .zip(&self.means[c])
            .map(|(x, mu)| Ok(mu[policy.decide(x.as_slice())?]))
            .collect()
    }

    pub fn value<P: Decide<T> + ?Sized>(&self, c: usize, policy: &P) -> Result<Estimate<T>> {
        let (value, se) = mean_and_se(&self.rewards(c, policy)?);
        Ok(Estimate { value, se })
    }

    /// Paired `Q_c(reference) - Q_c(policy)`.
    pub fn regret<P: Decide<T> + ?Sized, Q: Decide<T> + ?Sized>(&self, c: usize, policy: &P, reference: &Q) -> Result<Estimate<T>> {
        let mine = self.rewards(c, policy)?;
        let theirs = self.rewards(c, reference)?;
        let diffs: Vec<T> = theirs.iter().zip(&mine).map(|(r, p)| *r - *p).collect();
        let (value, se) = mean_and_se(&diffs);
        Ok(Estimate { value, se })
    }
}

/// Regret of one policy against the global and per-client references.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegretReport<T> {
    pub n: usize,
    pub seed: u64,
    pub policy: String,
    pub global_regret: Estimate<T>,
    pub local_regret: Vec<Estimate<T>>,
    pub global_value: Estimate<T>,
    pub local_value: Vec<Estimate<T>>,
    pub reference_global_value: Estimate<T>,
    pub reference_local_value: Vec<Estimate<T>>,
}

/// `lambda`-weighted combination with `se = sqrt(sum lambda_c^2 se_c^2)`.
pub fn mix_estimates<T: Scalar>(parts: &[Estimate<T>], lambda: &ClientSamplingDistribution<T>) -> Estimate<T> {
    let mut value = T::zero();
    let mut var = T::zero();
    for (e, w) in parts.iter().zip(lambda.weights()) {
        value += *w * e.value;
        var += *w * *w * e.se * e.se;
    }
    Estimate { value, se: var.sqrt() }
}

/// `R_c = Q_c(ref_c) - Q_c(pi)` and `R_lambda = sum_c lambda_c [Q_c(ref_lambda) - Q_c(pi)]`
/// on the test bed.
#[allow(clippy::too_many_arguments)]
pub fn empirical_regret<T, P, G, L>(
    policy: &P,
    tag: &str,
    bed: &TestBed<T>,
    lambda: &ClientSamplingDistribution<T>,
    global_reference: &G,
    local_references: &[L],
    n: usize,
    seed: u64,
) -> Result<RegretReport<T>>
where
    T: Scalar,
    P: Decide<T> + ?Sized,
    G: Decide<T> + ?Sized,
    L: Decide<T>,
{
    let c_count = bed.clients();
    if lambda.len() != c_count || local_references.len() != c_count {
        return Err(FedoplError::Dimension {
            expected: c_count,
            got: local_references.len().min(lambda.len()),
        });
    }
    let mut local_regret = Vec::with_capacity(c_count);
    let mut against_global = Vec::with_capacity(c_count);
    let mut local_value = Vec::with_capacity(c_count);
    let mut reference_local_value = Vec::with_capacity(c_count);
    let mut reference_global_parts = Vec::with_capacity(c_count);
    for (c, reference) in local_references.iter().enumerate() {
        local_regret.push(bed.regret(c, policy, reference)?);
        against_global.push(bed.regret(c, policy, global_reference)?);
        local_value.push(bed.value(c, policy)?);
        reference_local_value.push(bed.value(c, reference)?);
        reference_global_parts.push(bed.value(c, global_reference)?);
    }
    Ok(RegretReport {
        n,
        seed,
        policy: tag.to_string(),
        global_regret: mix_estimates(&against_global, lambda),
        global_value: mix_estimates(&local_value, lambda),
        reference_global_value: mix_estimates(&reference_global_parts, lambda),
        local_regret,
        local_value,
        reference_local_value,
    })
}

// ── Value of information ────────────────────────────────────────────────

/// Participation verdict with its inputs echoed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParticipationVerdict<T> {
    pub r_local: T,
    pub r_global: T,
    pub tv_upper: T,
    pub skewness: T,
    pub u: T,
    pub alpha: T,
    pub beta: T,
    /// `tv < alpha r_c / U`
    pub shift_small: bool,
    /// `s < beta^2 r_c^2 / r^2`
    pub skew_small: bool,
    pub participate: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn value_of_information<T: Scalar>(
    r_local: T,
    r_global: T,
    tv_upper: T,
    skewness: T,
    u: T,
    alpha: T,
    beta: T,
) -> Result<ParticipationVerdict<T>> {
    if !(r_local > T::zero() && r_global > T::zero() && u > T::zero()) {
        return Err(FedoplError::InvalidArgument("r_c, r and U must be positive".into()));
    }
    if alpha < T::zero() || beta < T::zero() || alpha + beta > T::one() {
        return Err(FedoplError::InvalidArgument(format!(
            "alpha = {alpha} and beta = {beta} must be nonnegative with alpha + beta <= 1"
        )));
    }
    let shift_small = tv_upper < alpha * r_local / u;
    let skew_small = skewness < beta * beta * r_local * r_local / (r_global * r_global);
    Ok(ParticipationVerdict {
        r_local,
        r_global,
        tv_upper,
        skewness,
        u,
        alpha,
        beta,
        shift_small,
        skew_small,
        participate: shift_small && skew_small,
    })
}

/// `U = 3 B / eta` for rewards bounded by `B` and propensities clipped at `eta`.
pub fn default_score_bound<T: Scalar>(reward_bound: T, clip_floor: T) -> T {
    T::of(3.0) * reward_bound / clip_floor
}
