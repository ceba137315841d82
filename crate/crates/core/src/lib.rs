//! Federated offline policy learning from multi-client bandit feedback.
//!
//! Clients hold logged contextual-bandit data. Each client turns its data
//! into cross-fitted AIPW scores, and a server learns one linear policy by
//! federated averaging of cost-sensitive classification updates weighted by
//! a client sampling distribution `lambda`.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choice.

pub mod aipw;
pub mod cli;
pub mod csmc;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod federation;
pub mod nuisance;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod types;

pub use aipw::{cross_fit_scores, policy_value_estimate, AipwScoreRow, ClientScores};
pub use csmc::{csmc_predict, csmc_update, export_policy, CsmcExample, CsmcRegressors, LearningRate};
pub use datagen::{ClientEnvSpec, RewardKind};
pub use diagnostics::{skewed_lambda, skewness, value_of_information, RegretReport, ShiftReport, SkewnessReport};
pub use error::{FedoplError, Result};
pub use experiments::{run_experiment, Manifest, Scenario};
pub use federation::{run_centralized, run_fedopl, run_local_baseline, RoundConfig};
pub use nuisance::{fit_nuisance, NuisanceConfig};
pub use scalar::Scalar;
pub use types::{
    hamming_distance, ActionSpace, ClientDataset, ClientSamplingDistribution, ContextVector, Decide, Dims,
    LinearPolicy, LoggedSample, ParamMatrix,
};

pub type LinearPolicyF64 = LinearPolicy<f64>;
pub type LinearPolicyF32 = LinearPolicy<f32>;
pub type ClientScoresF64 = ClientScores<f64>;
pub type ClientScoresF32 = ClientScores<f32>;
pub type CsmcRegressorsF64 = CsmcRegressors<f64>;
pub type CsmcRegressorsF32 = CsmcRegressors<f32>;
pub type ClientEnvSpecF64 = ClientEnvSpec<f64>;
pub type ClientEnvSpecF32 = ClientEnvSpec<f32>;
pub type ClientSamplingDistributionF64 = ClientSamplingDistribution<f64>;
pub type ClientSamplingDistributionF32 = ClientSamplingDistribution<f32>;
pub type RoundConfigF64 = RoundConfig<f64>;
pub type RoundConfigF32 = RoundConfig<f32>;
