//! Federated training loop: client sampling, local SGD, median-norm
//! sensitivity, clipping, noised aggregation, and budget-gated termination.
//!
//! Each round selects `k` of `K` clients, runs `i` local epochs of SGD per
//! client, clips every update to the median norm `S` of the round's
//! unclipped updates, and adds one Gaussian noise vector (scale
//! `sigma * S`) to the summed clipped updates before averaging. Training
//! stops when the test threshold is met, the privacy budget would be
//! exceeded (the round is discarded and the previous model returned), or
//! the round cap is reached.
//!
//! Note that `S` is computed from the current round's unclipped norms, so a
//! data-dependent quantity feeds the noise scale. That is the aggregation
//! rule as specified; a privacy analysis of the leak is out of scope here.

use crate::attack::{malicious_spec, AttackProfile};
use crate::dp::{
    apply_spec, calibrate_sigma, gaussian_kl, sample_standard, ChargeOutcome, GaussianSpec,
    PrivacyAccountant, PrivacyParams,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{evaluate, gradient, Batch, EvalMetrics, ModelSpec, ParamVector, Targets, Task};
use crate::rng::{stream_rng, StreamPurpose};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use std::fmt;

/// Federated loop parameters. Defaults mirror the benchmark simulation
/// settings (100 clients, 30 per round, 10 local epochs).
#[derive(Debug, Clone, PartialEq)]
pub struct FLConfig {
    pub total_clients: usize,
    pub clients_per_round: usize,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    /// Classification: stop once test accuracy >= threshold.
    /// Regression: stop once test loss <= threshold.
    pub accuracy_threshold: f64,
    pub max_rounds: usize,
    pub master_seed: u64,
}

impl FLConfig {
    /// MNIST column of the simulation parameter table.
    pub fn mnist_defaults() -> FLConfig {
        FLConfig {
            total_clients: 100,
            clients_per_round: 30,
            batch_size: 32,
            local_epochs: 10,
            learning_rate: 0.01,
            accuracy_threshold: 0.95,
            max_rounds: 30,
            master_seed: 42,
        }
    }

    /// Power-consumption column: batch 7, learning rate 0.1; the threshold
    /// is a loss bound for regression, zero meaning "run all rounds".
    pub fn consumption_defaults() -> FLConfig {
        FLConfig {
            batch_size: 7,
            learning_rate: 0.1,
            accuracy_threshold: 0.0,
            ..FLConfig::mnist_defaults()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_clients == 0 {
            return Err(Error::Config("fl.total_clients must be positive".into()));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.total_clients {
            return Err(Error::Config(format!(
                "fl.clients_per_round must be in 1..={}, got {}",
                self.total_clients, self.clients_per_round
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("fl.batch_size must be positive".into()));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("fl.local_epochs must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "fl.learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.max_rounds == 0 {
            return Err(Error::Config("fl.max_rounds must be positive".into()));
        }
        Ok(())
    }
}

/// Privacy configuration of a run. `epsilon = +inf` is the no-DP sentinel:
/// noise, clip-scale calibration and the accountant are skipped entirely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacySetup {
    pub epsilon: f64,
    pub delta_round: f64,
    pub sensitivity: f64,
    pub budget: f64,
}

impl PrivacySetup {
    pub fn new(epsilon: f64, delta_round: f64, sensitivity: f64, budget: f64) -> Result<PrivacySetup> {
        if epsilon.is_finite() {
            PrivacyParams::new(epsilon, delta_round, sensitivity)?;
        }
        if !(budget >= 0.0) {
            return Err(Error::Config(format!("privacy.budget must be >= 0, got {budget}")));
        }
        Ok(PrivacySetup {
            epsilon,
            delta_round,
            sensitivity,
            budget,
        })
    }

    /// The no-DP baseline: noise and accounting disabled.
    pub fn no_dp() -> PrivacySetup {
        PrivacySetup {
            epsilon: f64::INFINITY,
            delta_round: 1e-5,
            sensitivity: 1.0,
            budget: f64::INFINITY,
        }
    }

    pub fn is_no_dp(&self) -> bool {
        !self.epsilon.is_finite()
    }
}

/// What the privacy agent sees between rounds: the global model's test loss
/// and the attack-attributable loss delta of the latest round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub federated_loss: f64,
    pub attacker_loss: f64,
}

/// Per-round verdict of the attack detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectionVerdict {
    /// No detector was running.
    None,
    Clear,
    AttackSuspected,
    /// The agent state was never visited while baselines were recorded.
    NoBaseline,
}

impl fmt::Display for DetectionVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DetectionVerdict::None => "none",
            DetectionVerdict::Clear => "clear",
            DetectionVerdict::AttackSuspected => "attack_suspected",
            DetectionVerdict::NoBaseline => "no_baseline",
        };
        f.write_str(s)
    }
}

/// What the advisor hands back after seeing a round's outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundFeedback {
    pub reward: Option<f64>,
    pub verdict: DetectionVerdict,
}

impl Default for RoundFeedback {
    fn default() -> Self {
        RoundFeedback {
            reward: None,
            verdict: DetectionVerdict::None,
        }
    }
}

/// Hook for the per-round privacy-level decision (Q-learning agent, frozen
/// policy replay, or nothing). Called once before and once after each
/// aggregated round.
pub trait RoundAdvisor {
    /// Pick the privacy loss for the coming round given the latest
    /// observation.
    fn choose_epsilon(&mut self, prior: &Observation) -> f64;

    /// Digest the round outcome. `terminal` marks the last feedback of the
    /// training run (episode boundary for learning agents).
    fn observe(&mut self, outcome: &Observation, epsilon: f64, terminal: bool) -> RoundFeedback;
}

/// The training substrate: pooled training data, its client partition, and
/// the held-out test batch.
#[derive(Debug, Clone)]
pub struct FlData {
    pub train_inputs: Matrix,
    pub train_targets: Targets,
    pub partition: crate::data::Partition,
    pub test: Batch,
}

impl FlData {
    fn validate(&self, cfg: &FLConfig) -> Result<()> {
        if self.partition.num_clients() != cfg.total_clients {
            return Err(Error::Config(format!(
                "partition has {} clients, fl.total_clients is {}",
                self.partition.num_clients(),
                cfg.total_clients
            )));
        }
        if self.train_inputs.rows() != self.train_targets.len() {
            return Err(Error::Shape(format!(
                "{} training rows vs {} targets",
                self.train_inputs.rows(),
                self.train_targets.len()
            )));
        }
        if self.test.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(())
    }
}

/// Uniform sample of `per_round` distinct client ids, ascending.
pub fn select_clients(
    total: usize,
    per_round: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<usize>> {
    if per_round > total {
        return Err(Error::Config(format!(
            "cannot select {per_round} of {total} clients"
        )));
    }
    let mut ids: Vec<usize> = rand::seq::index::sample(rng, total, per_round).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// A client's contribution: parameter delta, its norm, and the mean
/// training loss seen during the local pass. The trained local model is
/// kept alongside the delta: `global + delta` cannot reproduce it exactly
/// in floating point, and single-client aggregation needs the exact model.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub delta: ParamVector,
    pub norm: f64,
    pub train_loss: f64,
    pub params: ParamVector,
}

/// Local phase: `local_epochs` sweeps of mini-batch SGD over the client's
/// shard, starting from the global model. Batches are consecutive chunks of
/// the shard in index order; the shard is never resampled between rounds.
pub fn local_train(
    spec: &ModelSpec,
    global: &ParamVector,
    data: &FlData,
    client_id: usize,
    cfg: &FLConfig,
) -> Result<LocalUpdate> {
    let indices = data.partition.client(client_id);
    if indices.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut params = global.clone();
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    for _ in 0..cfg.local_epochs {
        for chunk in indices.chunks(cfg.batch_size) {
            let batch = Batch::new(
                data.train_inputs.gather_rows(chunk),
                data.train_targets.gather(chunk),
            )?;
            let (loss, grad) = gradient(spec, &params, &batch)?;
            loss_sum += loss;
            steps += 1;
            let eta = cfg.learning_rate;
            for (p, g) in params.values_mut().iter_mut().zip(grad.values()) {
                *p -= eta * g;
            }
        }
    }
    let delta = params.delta(global)?;
    let norm = delta.l2_norm();
    Ok(LocalUpdate {
        delta,
        norm,
        train_loss: loss_sum / steps as f64,
        params,
    })
}

/// Median of the round's update norms: middle order statistic for odd
/// counts, mean of the two middle ones for even counts.
pub fn median_sensitivity(norms: &[f64]) -> Result<f64> {
    if norms.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut sorted = norms.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("norms are finite"));
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    })
}

/// Scale an update by `1 / max(1, norm/s)` so its norm never exceeds `s`.
pub fn clip_update(delta: &ParamVector, norm: f64, s: f64) -> Result<ParamVector> {
    if !(s > 0.0) {
        return Err(Error::Config(format!("clip bound must be > 0, got {s}")));
    }
    let divisor = (norm / s).max(1.0);
    let mut clipped = delta.clone();
    if divisor > 1.0 {
        clipped.scale(1.0 / divisor);
    }
    Ok(clipped)
}

/// FedAvg aggregation: `w + (sum of clipped updates + noise) / k`, reduced
/// in ascending client-id order regardless of the order `clipped` arrives in.
pub fn aggregate(
    global: &ParamVector,
    clipped: &[(usize, ParamVector)],
    noise: &[f64],
) -> Result<ParamVector> {
    if clipped.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let dim = global.len();
    if noise.len() != dim {
        return Err(Error::Shape(format!(
            "noise has {} entries, model has {dim}",
            noise.len()
        )));
    }
    let mut order: Vec<usize> = (0..clipped.len()).collect();
    order.sort_by_key(|&i| clipped[i].0);

    let mut sum = vec![0.0; dim];
    for &i in &order {
        let update = &clipped[i].1;
        if update.len() != dim {
            return Err(Error::Shape(format!(
                "client {} update has {} entries, model has {dim}",
                clipped[i].0,
                update.len()
            )));
        }
        for (acc, v) in sum.iter_mut().zip(update.values()) {
            *acc += v;
        }
    }
    let k = clipped.len() as f64;
    let mut next = global.clone();
    for ((w, acc), n) in next.values_mut().iter_mut().zip(sum).zip(noise) {
        *w += (acc + n) / k;
    }
    Ok(next)
}

/// Why a training run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    ThresholdMet,
    BudgetExhausted,
    MaxRounds,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Termination::ThresholdMet => "threshold_met",
            Termination::BudgetExhausted => "budget_exhausted",
            Termination::MaxRounds => "max_rounds",
        };
        f.write_str(s)
    }
}

/// One row of the per-round metrics export.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub epsilon: f64,
    pub gamma: f64,
    pub sensitivity: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    /// NaN for regression runs, where accuracy is undefined.
    pub test_accuracy: f64,
    pub delta_spent: f64,
    pub noise_kl: f64,
    pub reward: Option<f64>,
    pub detection: DetectionVerdict,
}

/// Fixed column set of `rounds.csv`; the manifest records its version.
pub const ROUNDS_CSV_HEADER: &str =
    "round,epsilon,gamma,sensitivity,train_loss,test_loss,test_accuracy,delta_spent,noise_kl,reward,detection";

/// Version of the RoundRecord CSV schema.
pub const ROUNDS_SCHEMA_VERSION: u32 = 1;

impl RoundRecord {
    pub fn to_csv_row(&self) -> String {
        let reward = self.reward.map(|r| r.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.round,
            self.epsilon,
            self.gamma,
            self.sensitivity,
            self.train_loss,
            self.test_loss,
            self.test_accuracy,
            self.delta_spent,
            self.noise_kl,
            reward,
            self.detection
        )
    }
}

/// Complete per-round history of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingHistory {
    pub records: Vec<RoundRecord>,
    pub termination: Termination,
}

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(ROUNDS_CSV_HEADER);
        out.push('\n');
        for record in &self.records {
            out.push_str(&record.to_csv_row());
            out.push('\n');
        }
        out
    }

    pub fn final_record(&self) -> Option<&RoundRecord> {
        self.records.last()
    }
}

/// Outcome of one aggregated round.
#[derive(Debug, Clone)]
pub struct RoundStep {
    pub outcome: Observation,
    pub accuracy: Option<f64>,
    pub sensitivity: f64,
    pub noise_kl: f64,
    pub train_loss: f64,
    pub delta_spent: f64,
    /// Charging this round would overshoot the budget; the round was
    /// discarded and the model left untouched.
    pub budget_exhausted: bool,
}

/// Round-by-round driver of a federated run. Owns the model parameters and
/// accountant; callers (the training loop, the RL episode runner) feed it
/// the per-round privacy loss.
pub struct FlSession<'a> {
    cfg: &'a FLConfig,
    model: &'a ModelSpec,
    privacy: &'a PrivacySetup,
    attack: &'a AttackProfile,
    data: &'a FlData,
    accountant: PrivacyAccountant,
    params: ParamVector,
    round: usize,
    last_eval: EvalMetrics,
    last_attacker_loss: f64,
    noise_salt: u64,
}

impl<'a> FlSession<'a> {
    pub fn new(
        cfg: &'a FLConfig,
        model: &'a ModelSpec,
        privacy: &'a PrivacySetup,
        attack: &'a AttackProfile,
        data: &'a FlData,
    ) -> Result<FlSession<'a>> {
        FlSession::with_noise_salt(cfg, model, privacy, attack, data, 0)
    }

    /// `noise_salt` shifts the aggregation-noise substream without touching
    /// initialization, selection or data, so noise can be resampled in
    /// isolation (detector robustness checks rely on this).
    pub fn with_noise_salt(
        cfg: &'a FLConfig,
        model: &'a ModelSpec,
        privacy: &'a PrivacySetup,
        attack: &'a AttackProfile,
        data: &'a FlData,
        noise_salt: u64,
    ) -> Result<FlSession<'a>> {
        cfg.validate()?;
        data.validate(cfg)?;
        let mut init_rng = stream_rng(cfg.master_seed, StreamPurpose::Init, &[]);
        let params = crate::nn::init_params(model, &mut init_rng);
        let last_eval = evaluate(model, &params, &data.test)?;
        Ok(FlSession {
            cfg,
            model,
            privacy,
            attack,
            data,
            accountant: PrivacyAccountant::new(privacy.budget)?,
            params,
            round: 0,
            last_eval,
            last_attacker_loss: 0.0,
            noise_salt,
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn into_params(self) -> ParamVector {
        self.params
    }

    pub fn last_eval(&self) -> EvalMetrics {
        self.last_eval
    }

    /// Latest (federated loss, attacker loss) pair, the agent's raw state.
    pub fn observation(&self) -> Observation {
        Observation {
            federated_loss: self.last_eval.loss,
            attacker_loss: self.last_attacker_loss,
        }
    }

    /// Whether the configured stopping threshold is met by the latest eval.
    pub fn threshold_met(&self) -> bool {
        match self.model.task() {
            Task::Classification => self
                .last_eval
                .accuracy
                .is_some_and(|acc| acc >= self.cfg.accuracy_threshold),
            Task::Regression => self.last_eval.loss <= self.cfg.accuracy_threshold,
        }
    }

    /// Execute one communication round with the given privacy loss
    /// (`+inf` = no noise, no accounting).
    pub fn run_round(&mut self, epsilon: f64) -> Result<RoundStep> {
        self.round += 1;
        let t = self.round as u64;

        let mut select_rng = stream_rng(self.cfg.master_seed, StreamPurpose::ClientSelection, &[t]);
        let selected = select_clients(
            self.cfg.total_clients,
            self.cfg.clients_per_round,
            &mut select_rng,
        )?;

        // Local updates are independent; the collect preserves client order
        // so the reduction below is deterministic under any thread count.
        let updates: Vec<LocalUpdate> = selected
            .par_iter()
            .map(|&cid| local_train(self.model, &self.params, self.data, cid, self.cfg))
            .collect::<Result<Vec<_>>>()?;

        let train_loss =
            updates.iter().map(|u| u.train_loss).sum::<f64>() / updates.len() as f64;
        let norms: Vec<f64> = updates.iter().map(|u| u.norm).collect();
        let sensitivity = median_sensitivity(&norms)?;

        let clipped: Vec<(usize, ParamVector)> = if sensitivity > 0.0 {
            selected
                .iter()
                .zip(&updates)
                .map(|(&cid, u)| Ok((cid, clip_update(&u.delta, u.norm, sensitivity)?)))
                .collect::<Result<Vec<_>>>()?
        } else {
            // All updates are zero vectors; clipping is the identity.
            selected
                .iter()
                .zip(&updates)
                .map(|(&cid, u)| (cid, u.delta.clone()))
                .collect()
        };

        let dim = self.params.len();
        let no_dp = !epsilon.is_finite();
        let mut noise = vec![0.0; dim];
        let mut shadow_noise: Option<Vec<f64>> = None;
        let mut noise_kl = 0.0;
        if !no_dp {
            let params = PrivacyParams::new(epsilon, self.privacy.delta_round, self.privacy.sensitivity)?;
            if self.accountant.charge(&params) == ChargeOutcome::BudgetExhausted {
                return Ok(RoundStep {
                    outcome: self.observation(),
                    accuracy: self.last_eval.accuracy,
                    sensitivity,
                    noise_kl: 0.0,
                    train_loss,
                    delta_spent: self.accountant.spent(),
                    budget_exhausted: true,
                });
            }
            let sigma = calibrate_sigma(&params)?;
            let scale = sigma * sensitivity;
            if scale > 0.0 {
                let benign = GaussianSpec::new(0.0, scale)?;
                let mut noise_rng = stream_rng(
                    self.cfg.master_seed,
                    StreamPurpose::AggregationNoise,
                    &[self.noise_salt, t],
                );
                let standard = sample_standard(dim, &mut noise_rng);
                if self.attack.enabled {
                    let deployed = malicious_spec(&benign, self.attack)?;
                    noise_kl = gaussian_kl(&deployed, &benign);
                    noise = apply_spec(&deployed, &standard);
                    shadow_noise = Some(apply_spec(&benign, &standard));
                } else {
                    noise = apply_spec(&benign, &standard);
                }
            }
        }

        // Single-client rounds are always unclipped (S equals the lone
        // norm), so they reduce to the local model plus noise. Using the
        // kept local model keeps the no-noise path bit-identical to
        // centralized SGD.
        let noise_drawn = noise.iter().any(|&n| n != 0.0);
        let next_params = if clipped.len() == 1 {
            let mut p = updates[0].params.clone();
            if noise_drawn {
                for (w, n) in p.values_mut().iter_mut().zip(&noise) {
                    *w += n;
                }
            }
            p
        } else {
            aggregate(&self.params, &clipped, &noise)?
        };

        let attacker_loss = match shadow_noise {
            Some(shadow) => {
                let shadow_params = aggregate(&self.params, &clipped, &shadow)?;
                let shadow_eval = evaluate(self.model, &shadow_params, &self.data.test)?;
                let attacked_eval = evaluate(self.model, &next_params, &self.data.test)?;
                attacked_eval.loss - shadow_eval.loss
            }
            None => 0.0,
        };

        self.params = next_params;
        self.last_eval = evaluate(self.model, &self.params, &self.data.test)?;
        self.last_attacker_loss = attacker_loss;

        Ok(RoundStep {
            outcome: Observation {
                federated_loss: self.last_eval.loss,
                attacker_loss,
            },
            accuracy: self.last_eval.accuracy,
            sensitivity,
            noise_kl,
            train_loss,
            delta_spent: self.accountant.spent(),
            budget_exhausted: false,
        })
    }
}

/// Run a full federated training: rounds until the threshold is met, the
/// budget is exhausted (previous model returned), or `max_rounds` elapse.
/// Returns the final model and the per-round history.
pub fn run_training(
    fl: &FLConfig,
    model: &ModelSpec,
    privacy: &PrivacySetup,
    attack: &AttackProfile,
    mut advisor: Option<&mut dyn RoundAdvisor>,
    data: &FlData,
) -> Result<(ParamVector, TrainingHistory)> {
    let mut session = FlSession::new(fl, model, privacy, attack, data)?;
    run_session(&mut session, fl, privacy, attack, &mut advisor)
        .map(|history| (session.into_params(), history))
}

/// The round loop over an existing session, also used by detection replays
/// that need a salted noise stream.
pub fn run_session(
    session: &mut FlSession<'_>,
    fl: &FLConfig,
    privacy: &PrivacySetup,
    attack: &AttackProfile,
    advisor: &mut Option<&mut dyn RoundAdvisor>,
) -> Result<TrainingHistory> {
    let gamma = if attack.enabled { attack.gamma } else { 0.0 };
    let mut records = Vec::new();
    let mut termination = Termination::MaxRounds;
    for round in 1..=fl.max_rounds {
        let epsilon = match advisor.as_deref_mut() {
            Some(agent) => agent.choose_epsilon(&session.observation()),
            None => privacy.epsilon,
        };
        let step = session.run_round(epsilon).map_err(|e| e.in_round(round))?;
        if step.budget_exhausted {
            termination = Termination::BudgetExhausted;
            break;
        }
        let threshold_met = session.threshold_met();
        let terminal = threshold_met || round == fl.max_rounds;
        let feedback = match advisor.as_deref_mut() {
            Some(agent) => agent.observe(&step.outcome, epsilon, terminal),
            None => RoundFeedback::default(),
        };
        records.push(RoundRecord {
            round,
            epsilon,
            gamma,
            sensitivity: step.sensitivity,
            train_loss: step.train_loss,
            test_loss: step.outcome.federated_loss,
            test_accuracy: step.accuracy.unwrap_or(f64::NAN),
            delta_spent: step.delta_spent,
            noise_kl: step.noise_kl,
            reward: feedback.reward,
            detection: feedback.verdict,
        });
        if threshold_met {
            termination = Termination::ThresholdMet;
            break;
        }
    }
    Ok(TrainingHistory {
        records,
        termination,
    })
}
