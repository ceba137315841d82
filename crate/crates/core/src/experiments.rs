//! Synthetic experiment runner: homogeneous and heterogeneous scenarios over
//! a sample-size grid and several seeds.
//!
//! A [`Manifest`] fully determines a run. Every random draw comes from a
//! substream keyed by the master seed and the role of the draw, so cells can
//! run in any order on any number of threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aipw::{cross_fit_scores, ClientScores};
use crate::csmc::LearningRate;
use crate::datagen::{allocate, draw_theta_star, sample_dataset, AllocationRule, ClientEnvSpec, RewardKind};
use crate::diagnostics::{empirical_regret, shift_report, skewed_lambda, skewness, RegretReport, ShiftReport, TestBed};
use crate::error::{FedoplError, Result};
use crate::federation::{run_fedopl, run_local_baseline, Participation, RoundConfig, RoundLog, Scheduler};
use crate::nuisance::NuisanceConfig;
use crate::rng::{derive_seed, purpose, substream};
use crate::scalar::Scalar;
use crate::types::{ClientSamplingDistribution, Dims, LinearPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Homogeneous,
    Heterogeneous,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Homogeneous => "homogeneous",
            Scenario::Heterogeneous => "heterogeneous",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = FedoplError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "homogeneous" => Ok(Scenario::Homogeneous),
            "heterogeneous" => Ok(Scenario::Heterogeneous),
            other => Err(FedoplError::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    Empirical,
    Skewed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardConfig {
    Linear,
    ScaledSine { k: f64 },
}

/// Complete description of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub scenario: Scenario,
    pub seed: u64,
    pub clients: usize,
    pub actions: usize,
    pub block: usize,
    pub n_max: usize,
    pub grid: Vec<usize>,
    pub seeds: usize,
    pub lambda_mode: LambdaMode,
    pub alpha: f64,
    pub special_client: usize,
    pub allocation: AllocationRule,
    pub omega2: f64,
    pub sigma2: Vec<f64>,
    pub rho2: Vec<f64>,
    pub reward: Vec<RewardConfig>,
    pub rounds: usize,
    pub local_steps: usize,
    pub batch: usize,
    /// Participants per round; all clients when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub participants: Option<usize>,
    pub failure_prob: f64,
    pub folds: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub reference_budget: usize,
    pub reference_rounds: usize,
    pub test_draws: usize,
    pub shift_draws: usize,
    pub nuisance: NuisanceConfig<f64>,
}

/// `points` log-spaced integers from `lo` to `hi`, deduplicated.
pub fn log_grid(lo: usize, hi: usize, points: usize) -> Vec<usize> {
    if points <= 1 || hi <= lo {
        return vec![hi];
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    let mut grid: Vec<usize> = (0..points)
        .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp().round() as usize)
        .collect();
    grid.dedup();
    grid
}

impl Manifest {
    pub fn for_scenario(scenario: Scenario) -> Self {
        let clients = 3;
        match scenario {
            Scenario::Homogeneous => Self {
                scenario,
                seed: 0,
                clients,
                actions: 4,
                block: 10,
                n_max: 1000,
                grid: log_grid(100, 1000, 8),
                seeds: 5,
                lambda_mode: LambdaMode::Empirical,
                alpha: 0.2,
                special_client: 0,
                allocation: AllocationRule::EqualSplit,
                omega2: 1.0,
                sigma2: vec![1.0; clients],
                rho2: vec![1.0; clients],
                reward: vec![RewardConfig::Linear; clients],
                rounds: 50,
                local_steps: 20,
                batch: 16,
                participants: None,
                failure_prob: 0.0,
                folds: 5,
                lr0: 0.05,
                lr_decay: 1e-4,
                reference_budget: 100_000,
                reference_rounds: 3000,
                test_draws: 10_000,
                shift_draws: 10_000,
                nuisance: NuisanceConfig::default(),
            },
            Scenario::Heterogeneous => {
                let mut sigma2 = vec![5.0; clients];
                let mut rho2 = vec![5.0; clients];
                let mut reward = vec![RewardConfig::Linear; clients];
                sigma2[0] = 10.0;
                rho2[0] = 10.0;
                reward[0] = RewardConfig::ScaledSine { k: 50.0 };
                Self {
                    n_max: 10_000,
                    grid: log_grid(100, 10_000, 8),
                    allocation: AllocationRule::LogForOne { special: 0 },
                    omega2: 5.0,
                    sigma2,
                    rho2,
                    reward,
                    lr0: 0.005,
                    ..Self::for_scenario(Scenario::Homogeneous)
                }
                .with_scenario(scenario)
            }
        }
    }

    fn with_scenario(mut self, scenario: Scenario) -> Self {
        self.scenario = scenario;
        self
    }

    /// Parses a manifest, filling every missing key from the defaults of its
    /// scenario, then applies `key=value` overrides (TOML values, dotted keys
    /// for nested tables).
    pub fn resolve(text: Option<&str>, scenario: Option<Scenario>, overrides: &[(String, String)]) -> Result<Self> {
        let mut user: toml::Table = match text {
            Some(t) => t.parse().map_err(|e: toml::de::Error| FedoplError::Config(format!("manifest: {e}")))?,
            None => toml::Table::new(),
        };
        for (key, value) in overrides {
            set_dotted(&mut user, key, parse_value(value)?)?;
        }
        let scenario = match (scenario, user.get("scenario")) {
            (Some(s), _) => s,
            (None, Some(toml::Value::String(s))) => s.parse()?,
            (None, Some(_)) => return Err(FedoplError::Config("`scenario` must be a string".into())),
            (None, None) => Scenario::Homogeneous,
        };
        user.insert("scenario".into(), toml::Value::String(scenario.name().into()));
        let mut defaults = Self::for_scenario(scenario);
        if !user.contains_key("grid") {
            if let Some(n_max) = user.get("n_max").and_then(toml::Value::as_integer) {
                defaults.grid = log_grid(100.min(n_max as usize), n_max as usize, 8);
            }
        }
        let mut merged = toml::Table::try_from(&defaults).map_err(|e| FedoplError::Config(e.to_string()))?;
        merge(&mut merged, user);
        let manifest: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| FedoplError::Config(format!("manifest: {e}")))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FedoplError::Config(e.to_string()))
    }

    pub fn dims(&self) -> Result<Dims> {
        Dims::new(self.actions, self.block)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(FedoplError::Config(m));
        self.dims().map_err(|e| FedoplError::Config(e.to_string()))?;
        if self.clients == 0 {
            return cfg("at least one client is required".into());
        }
        for (name, len) in [("sigma2", self.sigma2.len()), ("rho2", self.rho2.len()), ("reward", self.reward.len())] {
            if len != self.clients {
                return cfg(format!("`{name}` has {len} entries for {} clients", self.clients));
            }
        }
        if self.grid.is_empty() || self.grid.iter().any(|&n| n == 0 || n > self.n_max) {
            return cfg(format!("grid points must lie in 1..={}", self.n_max));
        }
        for (name, v) in [
            ("seeds", self.seeds),
            ("rounds", self.rounds),
            ("local_steps", self.local_steps),
            ("batch", self.batch),
            ("folds", self.folds),
            ("reference_budget", self.reference_budget),
            ("reference_rounds", self.reference_rounds),
            ("test_draws", self.test_draws),
            ("shift_draws", self.shift_draws),
        ] {
            if v == 0 {
                return cfg(format!("`{name}` must be positive"));
            }
        }
        if self.reference_budget < self.clients {
            return cfg("reference budget smaller than the number of clients".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return cfg("`alpha` must lie in [0, 1]".into());
        }
        if self.special_client >= self.clients {
            return cfg("`special_client` out of range".into());
        }
        if !(0.0..=1.0).contains(&self.failure_prob) {
            return cfg("`failure_prob` must lie in [0, 1]".into());
        }
        if let Some(s) = self.participants {
            if s == 0 || s > self.clients {
                return cfg(format!("cannot sample {s} participants from {} clients", self.clients));
            }
        }
        if !(self.lr0 > 0.0) || self.lr_decay < 0.0 {
            return cfg("learning rate must be positive with nonnegative decay".into());
        }
        if !(self.omega2 > 0.0) {
            return cfg("`omega2` must be positive".into());
        }
        for &n in &self.grid {
            allocate(self.allocation, n, self.clients).map_err(|e| FedoplError::Config(e.to_string()))?;
        }
        allocate(self.allocation, self.n_max, self.clients).map_err(|e| FedoplError::Config(e.to_string()))?;
        self.specs::<f64>()?;
        Ok(())
    }

    /// Client environments; `theta*` is drawn once and shared by all clients.
    pub fn specs<T: Scalar>(&self) -> Result<Vec<ClientEnvSpec<T>>> {
        let dims = self.dims()?;
        let theta = draw_theta_star(dims, T::of(self.omega2), &mut substream(self.seed, &[purpose::THETA_STAR]));
        (0..self.clients)
            .map(|c| {
                let reward = match self.reward[c] {
                    RewardConfig::Linear => RewardKind::Linear,
                    RewardConfig::ScaledSine { k } => RewardKind::ScaledSine { k: T::of(k) },
                };
                ClientEnvSpec::new(c, T::of(self.sigma2[c]), T::of(self.rho2[c]), reward, theta.clone())
            })
            .collect()
    }

    pub fn lambda_for<T: Scalar>(&self, counts: &[usize]) -> Result<ClientSamplingDistribution<T>> {
        match self.lambda_mode {
            LambdaMode::Empirical => ClientSamplingDistribution::empirical(counts),
            LambdaMode::Skewed => skewed_lambda(counts, self.special_client, T::of(self.alpha)),
        }
    }

    pub fn learning_rate<T: Scalar>(&self) -> LearningRate<T> {
        LearningRate::new(T::of(self.lr0), T::of(self.lr_decay))
    }

    pub fn nuisance_config<T: Scalar>(&self) -> NuisanceConfig<T> {
        let n = &self.nuisance;
        NuisanceConfig {
            ridge: crate::nuisance::RidgePenalty {
                absolute: T::of(n.ridge.absolute),
                per_sample: T::of(n.ridge.per_sample),
            },
            l2: T::of(n.l2),
            l2_sum: T::of(n.l2_sum),
            max_iter: n.max_iter,
            tol: T::of(n.tol),
            clip_floor: T::of(n.clip_floor),
            penalize_intercept: n.penalize_intercept,
            use_logged_propensity: n.use_logged_propensity,
        }
    }

    pub fn round_config<T: Scalar>(&self, lambda: ClientSamplingDistribution<T>, rounds: usize) -> RoundConfig<T> {
        RoundConfig {
            rounds,
            local_steps: self.local_steps,
            batch_size: self.batch,
            participation: self.participants.map_or(Participation::Full, Participation::Sample),
            lambda,
            lr: self.learning_rate(),
            failure_prob: self.failure_prob,
            scheduler: Scheduler::Sequential,
        }
    }
}

fn parse_value(raw: &str) -> Result<toml::Value> {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => Ok(t.remove("v").expect("parsed key")),
        // bare words are taken as strings
        Err(_) => Ok(toml::Value::String(raw.to_string())),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut current = table;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(FedoplError::Config(format!("bad override key `{key}`")));
        }
        if parts.peek().is_none() {
            current.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry
            .as_table_mut()
            .ok_or_else(|| FedoplError::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

// ── References ──────────────────────────────────────────────────────────

/// Policies regret is measured against.
#[derive(Debug, Clone)]
pub struct References<T> {
    pub global: LinearPolicy<T>,
    pub local: Vec<LinearPolicy<T>>,
    pub lambda: ClientSamplingDistribution<T>,
    pub warnings: Vec<String>,
}

/// Per-client references from `reference_budget` samples of each client and
/// a `lambda`-reference from FedOPL over `reference_budget / C` of those
/// samples per client, with `lambda` taken at `n_max`.
pub fn train_reference_policies<T: Scalar>(m: &Manifest, specs: &[ClientEnvSpec<T>]) -> Result<References<T>> {
    let dims = m.dims()?;
    let cfg = m.nuisance_config::<T>();
    let lr = m.learning_rate::<T>();
    let steps = m.reference_rounds * m.local_steps;
    let per_client: Vec<Result<(ClientScores<T>, LinearPolicy<T>, Vec<String>)>> = specs
        .par_iter()
        .enumerate()
        .map(|(c, spec)| {
            let key = |k: u64| substream(m.seed, &[purpose::REFERENCE, c as u64, k]);
            let data = sample_dataset(spec, m.reference_budget, &mut key(0));
            let fit = cross_fit_scores(&data, dims, m.folds.min(data.len()), &cfg, &mut key(1))?;
            let policy = run_local_baseline(&fit.scores, dims, steps, m.batch, &lr, &mut key(2))?;
            Ok((fit.scores, policy, fit.warnings))
        })
        .collect();
    let mut scores = Vec::with_capacity(specs.len());
    let mut local = Vec::with_capacity(specs.len());
    let mut warnings = Vec::new();
    for res in per_client {
        let (s, p, w) = res?;
        scores.push(s);
        local.push(p);
        warnings.extend(w);
    }
    let share = m.reference_budget / specs.len();
    let subsets: Vec<ClientScores<T>> = scores
        .iter()
        .map(|s| ClientScores::new(s.client_id, s.rows[..share].to_vec()))
        .collect();
    let lambda = m.lambda_for::<T>(&allocate(m.allocation, m.n_max, m.clients)?)?;
    let mut round_cfg = m.round_config(lambda.clone(), m.reference_rounds);
    round_cfg.participation = Participation::Full;
    round_cfg.failure_prob = 0.0;
    let fed = run_fedopl(&subsets, dims, &round_cfg, derive_seed(m.seed, &[purpose::REFERENCE, u64::MAX]))?;
    warnings.extend(fed.warnings);
    Ok(References {
        global: fed.policy,
        local,
        lambda,
        warnings,
    })
}

// ── Cells ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct CellOutput<T> {
    pub n: usize,
    pub seed: u64,
    pub counts: Vec<usize>,
    /// `global`, `local_<c>` for every client, then `reference`.
    pub reports: Vec<RegretReport<T>>,
    pub training_log: Vec<RoundLog<T>>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub n: usize,
    pub seed: u64,
    pub message: String,
}

/// Shared, read-only state of an experiment.
pub struct Context<'a, T> {
    pub manifest: &'a Manifest,
    pub specs: &'a [ClientEnvSpec<T>],
    pub references: &'a References<T>,
    pub bed: &'a TestBed<T>,
}

fn scores_for<T: Scalar>(
    m: &Manifest,
    spec: &ClientEnvSpec<T>,
    n: usize,
    cell: u64,
    role: u64,
) -> Result<(ClientScores<T>, Vec<String>)> {
    let dims = m.dims()?;
    let c = spec.client_id as u64;
    let data = sample_dataset(spec, n, &mut substream(cell, &[role, c]));
    let k = m.folds.min(n).max(1);
    let mut warnings = Vec::new();
    if k < m.folds {
        warnings.push(format!("client {c}: {n} samples, using {k} folds"));
    }
    let fit = cross_fit_scores(&data, dims, k, &m.nuisance_config(), &mut substream(cell, &[purpose::FOLDS, role, c]))?;
    warnings.extend(fit.warnings);
    Ok((fit.scores, warnings))
}

/// One `(n, seed)` cell: data, cross-fitting, FedOPL, local baselines and
/// regret of every policy.
pub fn run_cell<T: Scalar>(ctx: &Context<'_, T>, n: usize, seed: u64) -> Result<CellOutput<T>> {
    let m = ctx.manifest;
    let dims = m.dims()?;
    let cell = derive_seed(m.seed, &[n as u64, seed]);
    let counts = allocate(m.allocation, n, m.clients)?;
    let mut warnings = Vec::new();

    let mut fed_scores = Vec::with_capacity(m.clients);
    for (spec, &nc) in ctx.specs.iter().zip(&counts) {
        let (s, w) = scores_for(m, spec, nc, cell, purpose::TRAIN)?;
        fed_scores.push(s);
        warnings.extend(w);
    }
    let lambda = m.lambda_for::<T>(&counts)?;
    let fed = run_fedopl(&fed_scores, dims, &m.round_config(lambda.clone(), m.rounds), derive_seed(cell, &[purpose::BATCHES]))?;
    warnings.extend(fed.warnings);

    let mut local = Vec::with_capacity(m.clients);
    for spec in ctx.specs {
        let (s, w) = scores_for(m, spec, n, cell, purpose::LOCAL_TRAIN)?;
        warnings.extend(w);
        let mut rng = substream(cell, &[purpose::LOCAL_TRAIN, spec.client_id as u64, u64::MAX]);
        local.push(run_local_baseline(&s, dims, m.rounds * m.local_steps, m.batch, &m.learning_rate(), &mut rng)?);
    }

    let refs = ctx.references;
    let eval = |policy: &LinearPolicy<T>, tag: &str| {
        empirical_regret(policy, tag, ctx.bed, &lambda, &refs.global, &refs.local, n, seed)
    };
    let mut reports = vec![eval(&fed.policy, "global")?];
    for (c, p) in local.iter().enumerate() {
        reports.push(eval(p, &format!("local_{c}"))?);
    }
    reports.push(eval(&refs.global, "reference")?);
    if !fed.policy.theta().is_finite() {
        warnings.push(format!("n={n} seed={seed}: non-finite global policy"));
    }
    Ok(CellOutput {
        n,
        seed,
        counts,
        reports,
        training_log: fed.log,
        warnings,
    })
}

// ── Whole experiment ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct SkewnessRow<T> {
    pub n: usize,
    pub skewness: Option<T>,
    pub chi2: Option<T>,
    pub sqrt_skewness_over_n: Option<T>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput<T> {
    pub manifest: Manifest,
    pub cells: Vec<CellOutput<T>>,
    pub failures: Vec<CellFailure>,
    pub skewness: Vec<SkewnessRow<T>>,
    pub shift: ShiftReport<T>,
    pub references: References<T>,
}

impl<T: Scalar> ExperimentOutput<T> {
    pub fn reports(&self) -> impl Iterator<Item = &RegretReport<T>> {
        self.cells.iter().flat_map(|c| c.reports.iter())
    }

    /// Seed average of `policy`'s regret on `client` (`None` = global) at
    /// `n`, with the combined standard error `sqrt(sum se^2) / S`.
    pub fn mean_regret(&self, n: usize, policy: &str, client: Option<usize>) -> Option<(T, T)> {
        let picked: Vec<_> = self
            .reports()
            .filter(|r| r.n == n && r.policy == policy)
            .map(|r| match client {
                Some(c) => r.local_regret[c],
                None => r.global_regret,
            })
            .collect();
        if picked.is_empty() {
            return None;
        }
        let s = T::of_usize(picked.len());
        let mean = picked.iter().map(|e| e.value).sum::<T>() / s;
        let se = picked.iter().map(|e| e.se * e.se).sum::<T>().sqrt() / s;
        Some((mean, se))
    }

    pub fn warnings(&self) -> impl Iterator<Item = &String> {
        self.references.warnings.iter().chain(self.cells.iter().flat_map(|c| c.warnings.iter()))
    }
}

/// Runs the full grid on a pool of `threads` workers.
pub fn run_experiment<T: Scalar>(manifest: &Manifest, threads: usize) -> Result<ExperimentOutput<T>> {
    manifest.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| FedoplError::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_experiment_inner(manifest))
}

fn run_experiment_inner<T: Scalar>(m: &Manifest) -> Result<ExperimentOutput<T>> {
    let specs = m.specs::<T>()?;
    log::info!("{}: training references", m.scenario.name());
    let references = train_reference_policies(m, &specs)?;
    let bed = TestBed::draw(&specs, m.test_draws, m.seed)?;
    let ctx = Context {
        manifest: m,
        specs: &specs,
        references: &references,
        bed: &bed,
    };
    let jobs: Vec<(usize, u64)> = m
        .grid
        .iter()
        .flat_map(|&n| (0..m.seeds as u64).map(move |s| (n, s)))
        .collect();
    let results: Vec<Result<CellOutput<T>>> = jobs
        .par_iter()
        .map(|&(n, s)| {
            log::info!("{}: n={n} seed={s}", m.scenario.name());
            run_cell(&ctx, n, s)
        })
        .collect();
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for ((n, seed), res) in jobs.into_iter().zip(results) {
        match res {
            Ok(cell) => cells.push(cell),
            Err(e) => {
                log::error!("cell n={n} seed={seed} failed: {e}");
                failures.push(CellFailure {
                    n,
                    seed,
                    message: e.to_string(),
                });
            }
        }
    }

    let skewness = m
        .grid
        .iter()
        .map(|&n| {
            let counts = allocate(m.allocation, n, m.clients)?;
            let report = skewness(&m.lambda_for::<T>(&counts)?, &counts)?;
            Ok(SkewnessRow {
                n,
                skewness: report.skewness,
                chi2: report.chi2,
                sqrt_skewness_over_n: report.skewness.map(|s| (s / T::of_usize(n)).sqrt()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let shift = shift_report(&specs, &references.lambda, m.shift_draws, m.seed)?;
    Ok(ExperimentOutput {
        manifest: m.clone(),
        cells,
        failures,
        skewness,
        shift,
        references,
    })
}
