//! FedOPL runtime: server orchestration, client local training and a
//! centralized reference trainer.
//!
//! Every round the server picks participants, broadcasts the global
//! regressors, each participant runs `T` CSMC updates on batches of `B`
//! examples drawn with replacement from its own AIPW data, and the server
//! replaces the global parameters with the `lambda`-weighted average of the
//! returned local parameters, renormalised over the participants.
//!
//! Server and clients talk only through [`FederationMessage`]s over in-process
//! channels. Replies are ordered by client id before aggregation and every
//! client draws batches from its own keyed substream, so the sequential and
//! threaded schedulers produce bit-identical results.

use std::sync::mpsc::{channel, Receiver, Sender};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aipw::ClientScores;
use crate::csmc::{examples_from_scores, export_policy, CsmcExample, CsmcRegressors, LearningRate};
use crate::error::{FedoplError, Result};
use crate::rng::{purpose, substream, StreamRng};
use crate::scalar::Scalar;
use crate::types::{ClientSamplingDistribution, Dims, LinearPolicy};

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Participation {
    Full,
    /// Uniformly sample this many clients without replacement each round.
    Sample(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    #[default]
    Sequential,
    Threaded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig<T> {
    pub rounds: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub participation: Participation,
    pub lambda: ClientSamplingDistribution<T>,
    pub lr: LearningRate<T>,
    /// Probability that a participant's update is lost in a round.
    pub failure_prob: f64,
    pub scheduler: Scheduler,
}

impl<T: Scalar> RoundConfig<T> {
    /// Defaults: 50 rounds of 20 local steps with batches of 16, full participation.
    pub fn new(lambda: ClientSamplingDistribution<T>) -> Self {
        Self {
            rounds: 50,
            local_steps: 20,
            batch_size: 16,
            participation: Participation::Full,
            lambda,
            lr: LearningRate::default(),
            failure_prob: 0.0,
            scheduler: Scheduler::Sequential,
        }
    }

    pub fn validate(&self, clients: usize) -> Result<()> {
        if self.rounds == 0 || self.local_steps == 0 || self.batch_size == 0 {
            return Err(FedoplError::Config("rounds, local steps and batch size must be at least 1".into()));
        }
        if let Participation::Sample(s) = self.participation {
            if s == 0 || s > clients {
                return Err(FedoplError::Config(format!(
                    "cannot sample {s} participants from {clients} clients"
                )));
            }
        }
        if self.lambda.len() != clients {
            return Err(FedoplError::Dimension {
                expected: clients,
                got: self.lambda.len(),
            });
        }
        if !(0.0..=1.0).contains(&self.failure_prob) {
            return Err(FedoplError::Config("failure probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

// ── Protocol ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum FederationMessage<T> {
    Broadcast {
        round: usize,
        theta: CsmcRegressors<T>,
    },
    Update {
        round: usize,
        client_id: usize,
        theta: CsmcRegressors<T>,
        mean_loss: T,
    },
    Done,
}

// ── Batch sampling ──────────────────────────────────────────────────────

/// Two-stage sampler: a client with probability proportional to its weight,
/// then a uniform example within it. Each example of client `c` is therefore
/// drawn with probability proportional to `lambda_c / n_c`.
///
/// With a single positively weighted client the first stage consumes no
/// randomness, so the stream matches plain uniform sampling.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    sizes: Vec<usize>,
    positive: Vec<usize>,
    picker: Option<WeightedIndex<f64>>,
}

impl BatchSampler {
    pub fn new(sizes: Vec<usize>, weights: &[f64]) -> Result<Self> {
        if sizes.len() != weights.len() {
            return Err(FedoplError::Dimension {
                expected: sizes.len(),
                got: weights.len(),
            });
        }
        let positive: Vec<usize> = (0..sizes.len()).filter(|&c| weights[c] > 0.0).collect();
        if positive.is_empty() {
            return Err(FedoplError::InvalidArgument("no client with positive weight".into()));
        }
        if let Some(&c) = positive.iter().find(|&&c| sizes[c] == 0) {
            return Err(FedoplError::MissingClientData(c));
        }
        let picker = if positive.len() > 1 {
            let w: Vec<f64> = positive.iter().map(|&c| weights[c]).collect();
            Some(WeightedIndex::new(w).map_err(|e| FedoplError::InvalidArgument(e.to_string()))?)
        } else {
            None
        };
        Ok(Self { sizes, positive, picker })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![n], &[1.0])
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let c = match &self.picker {
            Some(p) => self.positive[p.sample(rng)],
            None => self.positive[0],
        };
        (c, rng.random_range(0..self.sizes[c]))
    }
}

// ── Client ──────────────────────────────────────────────────────────────

/// Client-side training task.
#[derive(Debug)]
pub struct ClientWorker<T> {
    pub client_id: usize,
    examples: Vec<CsmcExample<T>>,
    sampler: BatchSampler,
    rng: StreamRng,
    local_steps: usize,
    batch_size: usize,
    lr: LearningRate<T>,
}

impl<T: Scalar> ClientWorker<T> {
    pub fn new(
        client_id: usize,
        examples: Vec<CsmcExample<T>>,
        rng: StreamRng,
        local_steps: usize,
        batch_size: usize,
        lr: LearningRate<T>,
    ) -> Result<Self> {
        let sampler = BatchSampler::uniform(examples.len())?;
        Ok(Self {
            client_id,
            examples,
            sampler,
            rng,
            local_steps,
            batch_size,
            lr,
        })
    }

    /// Local training from the broadcast parameters.
    pub fn train(&mut self, global: &CsmcRegressors<T>) -> Result<(CsmcRegressors<T>, T)> {
        let mut local = global.clone();
        let mut loss = T::zero();
        for _ in 0..self.local_steps {
            let batch: Vec<&CsmcExample<T>> = (0..self.batch_size)
                .map(|_| &self.examples[self.sampler.draw(&mut self.rng).1])
                .collect();
            loss += local.update(batch, &self.lr)?;
        }
        Ok((local, loss / T::of_usize(self.local_steps)))
    }

    /// Answers one message; `None` for `Done`.
    pub fn handle(&mut self, msg: FederationMessage<T>) -> Result<Option<FederationMessage<T>>> {
        match msg {
            FederationMessage::Broadcast { round, theta } => {
                let (theta, mean_loss) = self.train(&theta)?;
                Ok(Some(FederationMessage::Update {
                    round,
                    client_id: self.client_id,
                    theta,
                    mean_loss,
                }))
            }
            FederationMessage::Done => Ok(None),
            FederationMessage::Update { .. } => Err(FederationProtocolError::unexpected(self.client_id)),
        }
    }

    /// Serves messages until `Done` or the channel closes.
    fn serve(&mut self, inbox: Receiver<FederationMessage<T>>, outbox: Sender<FederationMessage<T>>) {
        while let Ok(msg) = inbox.recv() {
            match self.handle(msg) {
                Ok(Some(reply)) => {
                    if outbox.send(reply).is_err() {
                        return;
                    }
                }
                Ok(None) => return,
                Err(e) => {
                    log::warn!("client {} failed: {e}", self.client_id);
                    return;
                }
            }
        }
    }
}

struct FederationProtocolError;

impl FederationProtocolError {
    fn unexpected(client_id: usize) -> FedoplError {
        FedoplError::InvalidArgument(format!("client {client_id} received an update message"))
    }
}

// ── Server ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState<T> {
    pub theta_g: CsmcRegressors<T>,
    pub round: usize,
    pub norm_history: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog<T> {
    pub round: usize,
    pub participants: Vec<usize>,
    pub mean_local_loss: T,
    pub theta_norm: T,
}

#[derive(Debug, Clone)]
pub struct FedoplOutcome<T> {
    pub policy: LinearPolicy<T>,
    pub state: ServerState<T>,
    pub log: Vec<RoundLog<T>>,
    pub warnings: Vec<String>,
}

/// `sum_c w_c theta_c / sum_c w_c`, or `None` when the weights sum to zero.
///
/// The accumulator starts from the first term, so a single participant with
/// weight one reproduces its parameters bit for bit.
pub fn aggregate<T: Scalar>(updates: &[(T, &CsmcRegressors<T>)]) -> Option<CsmcRegressors<T>> {
    let total: T = updates.iter().map(|(w, _)| *w).sum();
    if !(total > T::zero()) {
        return None;
    }
    let (first_w, first) = updates.first()?;
    let dims = first.dims();
    let mut acc: Vec<T> = first.to_flat().into_iter().map(|v| *first_w * v).collect();
    for (w, theta) in &updates[1..] {
        for (a, v) in acc.iter_mut().zip(theta.to_flat()) {
            *a += *w * v;
        }
    }
    for a in acc.iter_mut() {
        *a /= total;
    }
    let steps = updates.iter().map(|(_, t)| t.steps).max().unwrap_or(0);
    CsmcRegressors::from_flat(dims, &acc, steps).ok()
}

/// FedOPL server driving a set of client workers.
pub struct Server<T: Scalar> {
    cfg: RoundConfig<T>,
    state: ServerState<T>,
    rng: StreamRng,
    failure_rng: StreamRng,
}

impl<T: Scalar> Server<T> {
    pub fn new(dims: Dims, cfg: RoundConfig<T>, seed: u64) -> Self {
        Self {
            cfg,
            state: ServerState {
                theta_g: CsmcRegressors::zeros(dims),
                round: 0,
                norm_history: Vec::new(),
            },
            rng: substream(seed, &[purpose::SERVER]),
            failure_rng: substream(seed, &[purpose::FAILURES]),
        }
    }

    pub fn state(&self) -> &ServerState<T> {
        &self.state
    }

    fn select(&mut self, clients: usize) -> Vec<usize> {
        match self.cfg.participation {
            Participation::Full => (0..clients).collect(),
            Participation::Sample(s) => {
                let mut chosen = rand::seq::index::sample(&mut self.rng, clients, s).into_vec();
                chosen.sort_unstable();
                chosen
            }
        }
    }

    /// Runs all configured rounds. `workers[i]` is weighted by `lambda[i]`.
    pub fn run(&mut self, workers: &mut [ClientWorker<T>]) -> Result<(Vec<RoundLog<T>>, Vec<String>)> {
        self.cfg.validate(workers.len())?;
        let mut logs = Vec::with_capacity(self.cfg.rounds);
        let mut warnings = Vec::new();
        for round in 0..self.cfg.rounds {
            let selected = self.select(workers.len());
            let lost: Vec<bool> = selected
                .iter()
                .map(|_| self.cfg.failure_prob > 0.0 && self.failure_rng.random::<f64>() < self.cfg.failure_prob)
                .collect();
            let mut replies = self.exchange(round, &selected, workers);
            // order by position so aggregation never depends on arrival order
            replies.sort_by_key(|(pos, _)| *pos);

            let mut accepted: Vec<(usize, T, CsmcRegressors<T>, T)> = Vec::new();
            for (pos, msg) in replies {
                let FederationMessage::Update { round: r, client_id, theta, mean_loss } = msg else {
                    continue;
                };
                if r != round {
                    warnings.push(format!("round {round}: stale update from client {client_id} ignored"));
                    continue;
                }
                let slot = selected.iter().position(|&s| s == pos).expect("reply from a participant");
                if lost[slot] {
                    warnings.push(format!("round {round}: update from client {client_id} lost"));
                    continue;
                }
                accepted.push((pos, self.cfg.lambda.weights()[pos], theta, mean_loss));
            }
            for &pos in &selected {
                if !accepted.iter().any(|(p, ..)| *p == pos) && !lost[selected.iter().position(|&s| s == pos).unwrap()] {
                    warnings.push(format!("round {round}: client {} failed", workers[pos].client_id));
                }
            }

            let weighted: Vec<(T, &CsmcRegressors<T>)> = accepted.iter().map(|(_, w, t, _)| (*w, t)).collect();
            match aggregate(&weighted) {
                Some(theta) => self.state.theta_g = theta,
                None => {
                    let msg = format!("round {round}: participants carry no sampling weight; round skipped");
                    log::warn!("{msg}");
                    warnings.push(msg);
                }
            }
            self.state.round = round + 1;
            let norm = self.state.theta_g.norm();
            self.state.norm_history.push(norm);
            let mean_local_loss = if accepted.is_empty() {
                T::nan()
            } else {
                accepted.iter().map(|(.., l)| *l).sum::<T>() / T::of_usize(accepted.len())
            };
            logs.push(RoundLog {
                round,
                participants: accepted.iter().map(|(p, ..)| workers[*p].client_id).collect(),
                mean_local_loss,
                theta_norm: norm,
            });
        }
        Ok((logs, warnings))
    }

    /// Broadcasts to the selected workers and collects `(position, reply)`.
    fn exchange(
        &self,
        round: usize,
        selected: &[usize],
        workers: &mut [ClientWorker<T>],
    ) -> Vec<(usize, FederationMessage<T>)> {
        let (to_server, from_clients) = channel::<(usize, FederationMessage<T>)>();
        let mut tasks = Vec::new();
        for (pos, worker) in workers.iter_mut().enumerate() {
            if !selected.contains(&pos) {
                continue;
            }
            let (tx, rx) = channel();
            tx.send(FederationMessage::Broadcast {
                round,
                theta: self.state.theta_g.clone(),
            })
            .expect("inbox open");
            tx.send(FederationMessage::Done).expect("inbox open");
            tasks.push((pos, worker, rx));
        }
        let run = |pos: usize, worker: &mut ClientWorker<T>, rx: Receiver<FederationMessage<T>>, out: Sender<(usize, FederationMessage<T>)>| {
            let (tx, inner_rx) = channel();
            worker.serve(rx, tx);
            for msg in inner_rx.try_iter() {
                let _ = out.send((pos, msg));
            }
        };
        match self.cfg.scheduler {
            Scheduler::Sequential => {
                for (pos, worker, rx) in tasks {
                    run(pos, worker, rx, to_server.clone());
                }
            }
            Scheduler::Threaded => {
                std::thread::scope(|scope| {
                    for (pos, worker, rx) in tasks {
                        let out = to_server.clone();
                        scope.spawn(move || run(pos, worker, rx, out));
                    }
                });
            }
        }
        drop(to_server);
        from_clients.into_iter().collect()
    }

    pub fn into_state(self) -> ServerState<T> {
        self.state
    }
}

/// Batch substream of a client for a given master seed.
pub fn client_batch_rng(seed: u64, client_id: usize) -> StreamRng {
    substream(seed, &[purpose::BATCHES, client_id as u64])
}

/// Runs FedOPL over the clients' AIPW scores and exports the global policy.
///
/// `clients[i]` is weighted by `cfg.lambda.weights()[i]`.
pub fn run_fedopl<T: Scalar>(clients: &[ClientScores<T>], dims: Dims, cfg: &RoundConfig<T>, seed: u64) -> Result<FedoplOutcome<T>> {
    cfg.validate(clients.len())?;
    let mut workers = clients
        .iter()
        .map(|c| {
            if c.is_empty() {
                return Err(FedoplError::MissingClientData(c.client_id));
            }
            ClientWorker::new(
                c.client_id,
                examples_from_scores(c),
                client_batch_rng(seed, c.client_id),
                cfg.local_steps,
                cfg.batch_size,
                cfg.lr,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut server = Server::new(dims, cfg.clone(), seed);
    let (log, warnings) = server.run(&mut workers)?;
    let state = server.into_state();
    Ok(FedoplOutcome {
        policy: export_policy(&state.theta_g),
        state,
        log,
        warnings,
    })
}

// ── Centralized and local training ──────────────────────────────────────

/// Single CSMC trajectory over pooled data where each example of client `c`
/// is drawn with probability proportional to `lambda_c / n_c`.
pub fn train_centralized<T: Scalar, R: Rng + ?Sized>(
    clients: &[ClientScores<T>],
    lambda: &ClientSamplingDistribution<T>,
    dims: Dims,
    steps: usize,
    batch_size: usize,
    lr: &LearningRate<T>,
    rng: &mut R,
) -> Result<CsmcRegressors<T>> {
    if clients.len() != lambda.len() {
        return Err(FedoplError::Dimension {
            expected: lambda.len(),
            got: clients.len(),
        });
    }
    if batch_size == 0 {
        return Err(FedoplError::Config("batch size must be at least 1".into()));
    }
    let examples: Vec<Vec<CsmcExample<T>>> = clients.iter().map(examples_from_scores).collect();
    let weights: Vec<f64> = lambda.weights().iter().map(|w| w.as_f64()).collect();
    let sampler = BatchSampler::new(examples.iter().map(Vec::len).collect(), &weights)?;
    let mut state = CsmcRegressors::zeros(dims);
    for _ in 0..steps {
        let batch: Vec<&CsmcExample<T>> = (0..batch_size)
            .map(|_| {
                let (c, i) = sampler.draw(rng);
                &examples[c][i]
            })
            .collect();
        state.update(batch, lr)?;
    }
    Ok(state)
}

/// Non-federated comparator: the exported policy of [`train_centralized`].
pub fn run_centralized<T: Scalar, R: Rng + ?Sized>(
    clients: &[ClientScores<T>],
    lambda: &ClientSamplingDistribution<T>,
    dims: Dims,
    steps: usize,
    batch_size: usize,
    lr: &LearningRate<T>,
    rng: &mut R,
) -> Result<LinearPolicy<T>> {
    train_centralized(clients, lambda, dims, steps, batch_size, lr, rng).map(|s| export_policy(&s))
}

/// CSMC trajectory on a single client's data.
pub fn run_local_baseline<T: Scalar, R: Rng + ?Sized>(
    client: &ClientScores<T>,
    dims: Dims,
    steps: usize,
    batch_size: usize,
    lr: &LearningRate<T>,
    rng: &mut R,
) -> Result<LinearPolicy<T>> {
    let lambda = ClientSamplingDistribution::new(vec![T::one()])?;
    run_centralized(std::slice::from_ref(client), &lambda, dims, steps, batch_size, lr, rng)
}
