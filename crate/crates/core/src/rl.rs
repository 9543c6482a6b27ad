//! Tabular Q-learning defense: the agent picks the per-round privacy loss
//! from a fixed grid, paid by a reward that balances federated loss,
//! attacker loss and privacy, plus a baseline-deviation attack detector.
//!
//! The state is the discretized triple (attacker loss, federated loss,
//! grid index of the current privacy loss). Actions move the grid index by
//! one or two steps in either direction or hold it. Updates are one-step
//! Q-learning with an epsilon-greedy behavior policy whose exploration
//! probability decays multiplicatively per episode down to a floor.
//!
//! While the agent trains it also records, per visited state, the running
//! mean of the federated loss observed after acting from that state. Those
//! baselines are what the detector compares live observations against.

use crate::error::{Error, Result};
use crate::fl::{DetectionVerdict, Observation, RoundAdvisor, RoundFeedback};
use crate::rng::{stream_rng, StreamPurpose};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::fmt::Write as _;
use std::path::Path;

/// Agent hyperparameters, state-space geometry and exploration schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct RLConfig {
    /// Q-learning step size.
    pub alpha: f64,
    /// Discount factor.
    pub chi: f64,
    /// Reward balance: (federated-loss term, attacker-loss term, privacy term).
    pub psi: [f64; 3],
    /// Scale of the federated-loss reward term and upper edge of its bins.
    pub f_l_max: f64,
    /// Scale of the attacker-loss reward term and upper edge of its bins.
    pub m_l_max: f64,
    pub m_bins: usize,
    pub f_bins: usize,
    /// Privacy-loss values the agent can deploy, ascending.
    pub eps_grid: Vec<f64>,
    /// Grid index the agent starts each episode from.
    pub eps_start_idx: usize,
    pub explore_start: f64,
    pub explore_min: f64,
    /// Multiplicative exploration decay per episode.
    pub explore_decay: f64,
    pub episodes: usize,
    /// Lower bound applied to losses before dividing, so the reward stays
    /// finite on degenerate rounds.
    pub loss_floor: f64,
    /// Flip the attacker-loss term to `psi2 * m_l / m_l_max`. The default
    /// (false) rewards small attacker loss as the reward formula is written;
    /// the switch exists for sensitivity studies of that sign choice.
    pub invert_attack_term: bool,
}

impl RLConfig {
    pub fn defaults() -> RLConfig {
        RLConfig {
            alpha: 0.1,
            chi: 1.0,
            psi: [1.0, 1.0, 1.0],
            f_l_max: 2.5,
            m_l_max: 1.0,
            m_bins: 10,
            f_bins: 10,
            eps_grid: RLConfig::log_grid(0.1, 20.0, 10),
            eps_start_idx: 5,
            explore_start: 1.0,
            explore_min: 0.05,
            explore_decay: 0.995,
            episodes: 300,
            loss_floor: 1e-6,
            invert_attack_term: false,
        }
    }

    /// `n` logarithmically spaced points from `lo` to `hi` inclusive.
    pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        assert!(n >= 2 && lo > 0.0 && hi > lo);
        let ratio = (hi / lo).ln() / (n - 1) as f64;
        (0..n).map(|i| lo * (ratio * i as f64).exp()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("rl.alpha must be in (0, 1], got {}", self.alpha)));
        }
        if !(self.chi >= 0.0 && self.chi <= 1.0) {
            return Err(Error::Config(format!("rl.chi must be in [0, 1], got {}", self.chi)));
        }
        if self.psi.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Config("rl.psi entries must be finite and >= 0".into()));
        }
        if !(self.f_l_max > 0.0) || !(self.m_l_max > 0.0) {
            return Err(Error::Config("rl.f_l_max and rl.m_l_max must be > 0".into()));
        }
        if self.m_bins == 0 || self.f_bins == 0 {
            return Err(Error::Config("rl.m_bins and rl.f_bins must be positive".into()));
        }
        if self.eps_grid.len() < 2 {
            return Err(Error::Config("rl.eps_grid needs at least 2 values".into()));
        }
        if self.eps_grid.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::Config("rl.eps_grid values must be finite and > 0".into()));
        }
        if self.eps_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("rl.eps_grid must be strictly ascending".into()));
        }
        if self.eps_start_idx >= self.eps_grid.len() {
            return Err(Error::Config(format!(
                "rl.eps_start_idx {} outside grid of {}",
                self.eps_start_idx,
                self.eps_grid.len()
            )));
        }
        if !(self.explore_start >= self.explore_min
            && self.explore_min >= 0.0
            && self.explore_start <= 1.0)
        {
            return Err(Error::Config(
                "rl exploration probabilities need 0 <= min <= start <= 1".into(),
            ));
        }
        if !(self.explore_decay > 0.0 && self.explore_decay <= 1.0) {
            return Err(Error::Config(format!(
                "rl.explore_decay must be in (0, 1], got {}",
                self.explore_decay
            )));
        }
        if self.episodes == 0 {
            return Err(Error::Config("rl.episodes must be positive".into()));
        }
        if !(self.loss_floor > 0.0) {
            return Err(Error::Config("rl.loss_floor must be > 0".into()));
        }
        Ok(())
    }

    /// Exploration probability for an episode index.
    pub fn explore_prob(&self, episode: usize) -> f64 {
        (self.explore_start * self.explore_decay.powi(episode as i32)).max(self.explore_min)
    }
}

/// Discretized agent state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AgentState {
    pub m_bin: usize,
    pub f_bin: usize,
    pub eps_idx: usize,
}

/// The five concrete actions on the privacy-loss grid index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    IncreaseOne,
    IncreaseTwo,
    DecreaseOne,
    DecreaseTwo,
    Static,
}

pub const ACTIONS: [Action; 5] = [
    Action::IncreaseOne,
    Action::IncreaseTwo,
    Action::DecreaseOne,
    Action::DecreaseTwo,
    Action::Static,
];

impl Action {
    pub fn index(self) -> usize {
        match self {
            Action::IncreaseOne => 0,
            Action::IncreaseTwo => 1,
            Action::DecreaseOne => 2,
            Action::DecreaseTwo => 3,
            Action::Static => 4,
        }
    }

    pub fn from_index(index: usize) -> Result<Action> {
        ACTIONS
            .get(index)
            .copied()
            .ok_or_else(|| Error::Config(format!("action index {index} out of range")))
    }

    /// Signed shift this action applies to the grid index.
    pub fn offset(self) -> isize {
        match self {
            Action::IncreaseOne => 1,
            Action::IncreaseTwo => 2,
            Action::DecreaseOne => -1,
            Action::DecreaseTwo => -2,
            Action::Static => 0,
        }
    }
}

fn bin_value(value: f64, max: f64, bins: usize) -> usize {
    if !(value > 0.0) {
        return 0;
    }
    let raw = (value / max * bins as f64).floor();
    if raw < 0.0 {
        0
    } else {
        (raw as usize).min(bins - 1)
    }
}

/// Map a raw (attacker loss, federated loss, privacy loss) observation onto
/// the state grid. Out-of-range losses clamp to the edge bins; the privacy
/// loss must be one of the grid values.
pub fn discretize_state(m_l: f64, f_l: f64, eps: f64, cfg: &RLConfig) -> Result<AgentState> {
    let eps_idx = cfg
        .eps_grid
        .iter()
        .position(|&g| g == eps)
        .ok_or_else(|| Error::Config(format!("epsilon {eps} is not on the grid")))?;
    Ok(AgentState {
        m_bin: bin_value(m_l, cfg.m_l_max, cfg.m_bins),
        f_bin: bin_value(f_l, cfg.f_l_max, cfg.f_bins),
        eps_idx,
    })
}

/// The reward for a round outcome:
/// `psi1 * f_max/f + psi2 * m_max/m + psi3 / eps`, with both losses floored
/// at `loss_floor` before dividing.
pub fn reward(f_l: f64, m_l: f64, eps: f64, cfg: &RLConfig) -> f64 {
    debug_assert!(eps > 0.0);
    let f = f_l.max(cfg.loss_floor);
    let m = m_l.max(cfg.loss_floor);
    let attack_term = if cfg.invert_attack_term {
        m / cfg.m_l_max
    } else {
        cfg.m_l_max / m
    };
    cfg.psi[0] * (cfg.f_l_max / f) + cfg.psi[1] * attack_term + cfg.psi[2] * (1.0 / eps)
}

/// Dense action-value table with visit counts.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    m_bins: usize,
    f_bins: usize,
    eps_len: usize,
    values: Vec<f64>,
    visits: Vec<u32>,
}

impl QTable {
    pub fn new(m_bins: usize, f_bins: usize, eps_len: usize) -> QTable {
        let size = m_bins * f_bins * eps_len * ACTIONS.len();
        QTable {
            m_bins,
            f_bins,
            eps_len,
            values: vec![0.0; size],
            visits: vec![0; size],
        }
    }

    pub fn for_config(cfg: &RLConfig) -> QTable {
        QTable::new(cfg.m_bins, cfg.f_bins, cfg.eps_grid.len())
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.m_bins, self.f_bins, self.eps_len)
    }

    fn slot(&self, s: &AgentState, a: Action) -> usize {
        debug_assert!(s.m_bin < self.m_bins && s.f_bin < self.f_bins && s.eps_idx < self.eps_len);
        ((s.m_bin * self.f_bins + s.f_bin) * self.eps_len + s.eps_idx) * ACTIONS.len() + a.index()
    }

    pub fn value(&self, s: &AgentState, a: Action) -> f64 {
        self.values[self.slot(s, a)]
    }

    pub fn visits(&self, s: &AgentState, a: Action) -> u32 {
        self.visits[self.slot(s, a)]
    }

    pub fn max_value(&self, s: &AgentState) -> f64 {
        ACTIONS
            .iter()
            .map(|&a| self.value(s, a))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Greedy action; ties break toward the lowest action index.
    pub fn greedy(&self, s: &AgentState) -> Action {
        let mut best = ACTIONS[0];
        let mut best_value = self.value(s, best);
        for &a in &ACTIONS[1..] {
            let v = self.value(s, a);
            if v > best_value {
                best = a;
                best_value = v;
            }
        }
        best
    }

    fn set(&mut self, s: &AgentState, a: Action, value: f64) {
        let slot = self.slot(s, a);
        self.values[slot] = value;
        self.visits[slot] += 1;
    }

    /// Entries with at least one visit, in deterministic index order.
    fn occupied(&self) -> impl Iterator<Item = (AgentState, Action, f64, u32)> + '_ {
        (0..self.values.len()).filter_map(move |slot| {
            if self.visits[slot] == 0 && self.values[slot] == 0.0 {
                return None;
            }
            let a = ACTIONS[slot % ACTIONS.len()];
            let rest = slot / ACTIONS.len();
            let eps_idx = rest % self.eps_len;
            let rest = rest / self.eps_len;
            let f_bin = rest % self.f_bins;
            let m_bin = rest / self.f_bins;
            Some((
                AgentState {
                    m_bin,
                    f_bin,
                    eps_idx,
                },
                a,
                self.values[slot],
                self.visits[slot],
            ))
        })
    }
}

/// Epsilon-greedy action choice: uniform over the five actions with
/// probability `explore_prob`, otherwise the greedy action.
pub fn choose_action(
    q: &QTable,
    s: &AgentState,
    explore_prob: f64,
    rng: &mut ChaCha12Rng,
) -> Action {
    debug_assert!((0.0..=1.0).contains(&explore_prob));
    if explore_prob > 0.0 && rng.random::<f64>() < explore_prob {
        ACTIONS[rng.random_range(0..ACTIONS.len())]
    } else {
        q.greedy(s)
    }
}

/// Apply an action to the grid index, clamping to the grid ends.
pub fn apply_action(eps_idx: usize, a: Action, grid_len: usize) -> usize {
    let shifted = eps_idx as isize + a.offset();
    shifted.clamp(0, grid_len as isize - 1) as usize
}

/// One-step Q-learning update. `s_next = None` marks a terminal transition
/// (end of the training run), which does not bootstrap.
pub fn q_update(
    q: &mut QTable,
    s: &AgentState,
    a: Action,
    r: f64,
    s_next: Option<&AgentState>,
    cfg: &RLConfig,
) -> Result<()> {
    if !r.is_finite() {
        return Err(Error::Domain(format!("non-finite reward {r}")));
    }
    let bootstrap = s_next.map_or(0.0, |sn| q.max_value(sn));
    let old = q.value(s, a);
    q.set(s, a, old + cfg.alpha * (r + cfg.chi * bootstrap - old));
    Ok(())
}

/// Per-state running mean of the federated loss observed after acting from
/// that state during trusted (attack-free) agent training.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineTable {
    m_bins: usize,
    f_bins: usize,
    eps_len: usize,
    means: Vec<f64>,
    counts: Vec<u32>,
}

impl BaselineTable {
    pub fn new(m_bins: usize, f_bins: usize, eps_len: usize) -> BaselineTable {
        let size = m_bins * f_bins * eps_len;
        BaselineTable {
            m_bins,
            f_bins,
            eps_len,
            means: vec![0.0; size],
            counts: vec![0; size],
        }
    }

    pub fn for_config(cfg: &RLConfig) -> BaselineTable {
        BaselineTable::new(cfg.m_bins, cfg.f_bins, cfg.eps_grid.len())
    }

    fn slot(&self, s: &AgentState) -> usize {
        (s.m_bin * self.f_bins + s.f_bin) * self.eps_len + s.eps_idx
    }

    pub fn record(&mut self, s: &AgentState, f_l: f64) {
        let slot = self.slot(s);
        self.counts[slot] += 1;
        let count = f64::from(self.counts[slot]);
        self.means[slot] += (f_l - self.means[slot]) / count;
    }

    pub fn mean(&self, s: &AgentState) -> Option<f64> {
        let slot = self.slot(s);
        (self.counts[slot] > 0).then(|| self.means[slot])
    }

    pub fn count(&self, s: &AgentState) -> u32 {
        self.counts[self.slot(s)]
    }

    fn occupied(&self) -> impl Iterator<Item = (AgentState, f64, u32)> + '_ {
        (0..self.means.len()).filter_map(move |slot| {
            if self.counts[slot] == 0 {
                return None;
            }
            let eps_idx = slot % self.eps_len;
            let rest = slot / self.eps_len;
            let f_bin = rest % self.f_bins;
            let m_bin = rest / self.f_bins;
            Some((
                AgentState {
                    m_bin,
                    f_bin,
                    eps_idx,
                },
                self.means[slot],
                self.counts[slot],
            ))
        })
    }
}

/// Baseline-deviation rule: suspect an attack when the observed federated
/// loss exceeds the state's trusted mean by more than the margin.
pub fn detect(
    f_l_observed: f64,
    s: &AgentState,
    baseline: &BaselineTable,
    margin: f64,
) -> DetectionVerdict {
    debug_assert!(margin >= 0.0);
    match baseline.mean(s) {
        None => DetectionVerdict::NoBaseline,
        Some(mean) => {
            if f_l_observed > mean * (1.0 + margin) {
                DetectionVerdict::AttackSuspected
            } else {
                DetectionVerdict::Clear
            }
        }
    }
}

/// The learning agent: drives epsilon-greedy exploration over episodes,
/// applies Q-updates on every observed transition, and records baselines.
pub struct LearningAgent {
    cfg: RLConfig,
    qtable: QTable,
    baseline: BaselineTable,
    rng: ChaCha12Rng,
    eps_idx: usize,
    explore: f64,
    pending: Option<(AgentState, Action)>,
    episode_reward: f64,
}

impl LearningAgent {
    pub fn new(cfg: RLConfig, agent_seed: u64) -> Result<LearningAgent> {
        cfg.validate()?;
        let qtable = QTable::for_config(&cfg);
        let baseline = BaselineTable::for_config(&cfg);
        let rng = stream_rng(agent_seed, StreamPurpose::Exploration, &[]);
        let eps_idx = cfg.eps_start_idx;
        let explore = cfg.explore_prob(0);
        Ok(LearningAgent {
            cfg,
            qtable,
            baseline,
            rng,
            eps_idx,
            explore,
            pending: None,
            episode_reward: 0.0,
        })
    }

    /// Reset per-episode state and set the episode's exploration probability.
    pub fn begin_episode(&mut self, episode: usize) {
        self.eps_idx = self.cfg.eps_start_idx;
        self.explore = self.cfg.explore_prob(episode);
        self.pending = None;
        self.episode_reward = 0.0;
    }

    pub fn explore_prob(&self) -> f64 {
        self.explore
    }

    pub fn episode_reward(&self) -> f64 {
        self.episode_reward
    }

    pub fn qtable(&self) -> &QTable {
        &self.qtable
    }

    pub fn baseline(&self) -> &BaselineTable {
        &self.baseline
    }

    pub fn into_tables(self) -> (QTable, BaselineTable) {
        (self.qtable, self.baseline)
    }
}

impl RoundAdvisor for LearningAgent {
    fn choose_epsilon(&mut self, prior: &Observation) -> f64 {
        let state = discretize_state(
            prior.attacker_loss,
            prior.federated_loss,
            self.cfg.eps_grid[self.eps_idx],
            &self.cfg,
        )
        .expect("grid epsilon is on the grid");
        let action = choose_action(&self.qtable, &state, self.explore, &mut self.rng);
        self.eps_idx = apply_action(self.eps_idx, action, self.cfg.eps_grid.len());
        self.pending = Some((state, action));
        self.cfg.eps_grid[self.eps_idx]
    }

    fn observe(&mut self, outcome: &Observation, epsilon: f64, terminal: bool) -> RoundFeedback {
        let Some((state, action)) = self.pending.take() else {
            return RoundFeedback::default();
        };
        let r = reward(outcome.federated_loss, outcome.attacker_loss, epsilon, &self.cfg);
        let next_state = discretize_state(
            outcome.attacker_loss,
            outcome.federated_loss,
            epsilon,
            &self.cfg,
        )
        .expect("grid epsilon is on the grid");
        let bootstrap = (!terminal).then_some(&next_state);
        q_update(&mut self.qtable, &state, action, r, bootstrap, &self.cfg)
            .expect("rewards are finite by construction");
        self.baseline.record(&state, outcome.federated_loss);
        self.episode_reward += r;
        RoundFeedback {
            reward: Some(r),
            verdict: DetectionVerdict::None,
        }
    }
}

/// Frozen greedy policy with the baseline detector attached; the advisor
/// used when replaying a trained policy against a live (possibly attacked)
/// run. The lookup state uses the defender-observable attacker loss of zero,
/// since the true attack delta is not observable outside the simulator.
pub struct DetectingPolicy {
    cfg: RLConfig,
    qtable: QTable,
    baseline: BaselineTable,
    margin: f64,
    eps_idx: usize,
    pending: Option<AgentState>,
    pub suspected_rounds: usize,
    pub clear_rounds: usize,
    pub no_baseline_rounds: usize,
}

impl DetectingPolicy {
    pub fn new(
        cfg: RLConfig,
        qtable: QTable,
        baseline: BaselineTable,
        margin: f64,
    ) -> Result<DetectingPolicy> {
        cfg.validate()?;
        if !(margin >= 0.0) {
            return Err(Error::Config(format!("margin must be >= 0, got {margin}")));
        }
        let eps_idx = cfg.eps_start_idx;
        Ok(DetectingPolicy {
            cfg,
            qtable,
            baseline,
            margin,
            eps_idx,
            pending: None,
            suspected_rounds: 0,
            clear_rounds: 0,
            no_baseline_rounds: 0,
        })
    }

    pub fn reset(&mut self) {
        self.eps_idx = self.cfg.eps_start_idx;
        self.pending = None;
    }

    pub fn rounds_evaluated(&self) -> usize {
        self.suspected_rounds + self.clear_rounds + self.no_baseline_rounds
    }
}

impl RoundAdvisor for DetectingPolicy {
    fn choose_epsilon(&mut self, prior: &Observation) -> f64 {
        let state = discretize_state(
            0.0,
            prior.federated_loss,
            self.cfg.eps_grid[self.eps_idx],
            &self.cfg,
        )
        .expect("grid epsilon is on the grid");
        let action = self.qtable.greedy(&state);
        self.eps_idx = apply_action(self.eps_idx, action, self.cfg.eps_grid.len());
        self.pending = Some(state);
        self.cfg.eps_grid[self.eps_idx]
    }

    fn observe(&mut self, outcome: &Observation, _epsilon: f64, _terminal: bool) -> RoundFeedback {
        let Some(state) = self.pending.take() else {
            return RoundFeedback::default();
        };
        let verdict = detect(outcome.federated_loss, &state, &self.baseline, self.margin);
        match verdict {
            DetectionVerdict::AttackSuspected => self.suspected_rounds += 1,
            DetectionVerdict::Clear => self.clear_rounds += 1,
            DetectionVerdict::NoBaseline => self.no_baseline_rounds += 1,
            DetectionVerdict::None => {}
        }
        RoundFeedback {
            reward: None,
            verdict,
        }
    }
}

/// Per-episode training statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub episode: usize,
    pub explore_prob: f64,
    pub accumulated_reward: f64,
}

/// A trained policy: the Q-table, the trusted baselines, and the reward
/// curve of the training run.
#[derive(Debug, Clone)]
pub struct TrainedPolicy {
    pub qtable: QTable,
    pub baseline: BaselineTable,
    pub reward_curve: Vec<EpisodeStats>,
}

/// Train the agent for `cfg.episodes` episodes. `run_episode` executes one
/// full federated training run (or toy environment rollout) driven by the
/// agent; the Q-table and baselines carry across episodes.
pub fn train_agent<F>(cfg: &RLConfig, agent_seed: u64, mut run_episode: F) -> Result<TrainedPolicy>
where
    F: FnMut(&mut LearningAgent) -> Result<()>,
{
    cfg.validate()?;
    let mut agent = LearningAgent::new(cfg.clone(), agent_seed)?;
    let mut reward_curve = Vec::with_capacity(cfg.episodes);
    for episode in 0..cfg.episodes {
        agent.begin_episode(episode);
        run_episode(&mut agent)?;
        reward_curve.push(EpisodeStats {
            episode,
            explore_prob: agent.explore_prob(),
            accumulated_reward: agent.episode_reward(),
        });
    }
    let (qtable, baseline) = agent.into_tables();
    Ok(TrainedPolicy {
        qtable,
        baseline,
        reward_curve,
    })
}

const POLICY_FORMAT_HEADER: &str = "dpfl-policy v1";

/// Serialize a trained policy to the versioned flat text format: one `q`
/// line per visited table entry, one `b` line per recorded baseline.
pub fn save_policy(cfg: &RLConfig, policy: &TrainedPolicy, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(POLICY_FORMAT_HEADER);
    out.push('\n');
    let _ = writeln!(out, "bins {} {}", cfg.m_bins, cfg.f_bins);
    out.push_str("grid");
    for g in &cfg.eps_grid {
        let _ = write!(out, " {g}");
    }
    out.push('\n');
    let _ = writeln!(out, "start {}", cfg.eps_start_idx);
    for (s, a, value, visits) in policy.qtable.occupied() {
        let _ = writeln!(
            out,
            "q {} {} {} {} {} {}",
            s.m_bin,
            s.f_bin,
            s.eps_idx,
            a.index(),
            value,
            visits
        );
    }
    for (s, mean, count) in policy.baseline.occupied() {
        let _ = writeln!(out, "b {} {} {} {} {}", s.m_bin, s.f_bin, s.eps_idx, mean, count);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// A policy loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedPolicy {
    pub m_bins: usize,
    pub f_bins: usize,
    pub eps_grid: Vec<f64>,
    pub eps_start_idx: usize,
    pub qtable: QTable,
    pub baseline: BaselineTable,
}

impl LoadedPolicy {
    /// True when no baseline was ever recorded (detection cannot run).
    pub fn baseline_is_empty(&self) -> bool {
        self.baseline.counts.iter().all(|&c| c == 0)
    }
}

pub fn load_policy(path: &Path) -> Result<LoadedPolicy> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let fail = |line_no: usize, detail: String| Error::Format {
        path: path.display().to_string(),
        detail: format!("line {}: {detail}", line_no + 1),
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| fail(0, "empty policy file".into()))?;
    if header != POLICY_FORMAT_HEADER {
        return Err(fail(0, format!("unknown format header {header:?}")));
    }

    let mut m_bins = None;
    let mut f_bins = None;
    let mut eps_grid: Option<Vec<f64>> = None;
    let mut eps_start_idx = None;
    let mut q_entries: Vec<(usize, usize, usize, usize, f64, u32)> = Vec::new();
    let mut b_entries: Vec<(usize, usize, usize, f64, u32)> = Vec::new();

    for (line_no, line) in lines {
        let mut fields = line.split_whitespace();
        let Some(tag) = fields.next() else { continue };
        let rest: Vec<&str> = fields.collect();
        match tag {
            "bins" => {
                if rest.len() != 2 {
                    return Err(fail(line_no, "bins needs 2 values".into()));
                }
                m_bins = Some(parse(rest[0], line_no, path)?);
                f_bins = Some(parse(rest[1], line_no, path)?);
            }
            "grid" => {
                let grid: Result<Vec<f64>> =
                    rest.iter().map(|v| parse(v, line_no, path)).collect();
                eps_grid = Some(grid?);
            }
            "start" => {
                if rest.len() != 1 {
                    return Err(fail(line_no, "start needs 1 value".into()));
                }
                eps_start_idx = Some(parse(rest[0], line_no, path)?);
            }
            "q" => {
                if rest.len() != 6 {
                    return Err(fail(line_no, "q entry needs 6 values".into()));
                }
                q_entries.push((
                    parse(rest[0], line_no, path)?,
                    parse(rest[1], line_no, path)?,
                    parse(rest[2], line_no, path)?,
                    parse(rest[3], line_no, path)?,
                    parse(rest[4], line_no, path)?,
                    parse(rest[5], line_no, path)?,
                ));
            }
            "b" => {
                if rest.len() != 5 {
                    return Err(fail(line_no, "b entry needs 5 values".into()));
                }
                b_entries.push((
                    parse(rest[0], line_no, path)?,
                    parse(rest[1], line_no, path)?,
                    parse(rest[2], line_no, path)?,
                    parse(rest[3], line_no, path)?,
                    parse(rest[4], line_no, path)?,
                ));
            }
            other => return Err(fail(line_no, format!("unknown tag {other:?}"))),
        }
    }

    let m_bins = m_bins.ok_or_else(|| fail(0, "missing bins line".into()))?;
    let f_bins = f_bins.ok_or_else(|| fail(0, "missing bins line".into()))?;
    let eps_grid = eps_grid.ok_or_else(|| fail(0, "missing grid line".into()))?;
    let eps_start_idx = eps_start_idx.ok_or_else(|| fail(0, "missing start line".into()))?;

    let mut qtable = QTable::new(m_bins, f_bins, eps_grid.len());
    for (m, f, e, a, value, visits) in q_entries {
        let state = AgentState {
            m_bin: m,
            f_bin: f,
            eps_idx: e,
        };
        if m >= m_bins || f >= f_bins || e >= eps_grid.len() {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!("q entry ({m},{f},{e}) outside table"),
            });
        }
        let action = Action::from_index(a)?;
        let slot = qtable.slot(&state, action);
        qtable.values[slot] = value;
        qtable.visits[slot] = visits;
    }
    let mut baseline = BaselineTable::new(m_bins, f_bins, eps_grid.len());
    for (m, f, e, mean, count) in b_entries {
        if m >= m_bins || f >= f_bins || e >= eps_grid.len() {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!("b entry ({m},{f},{e}) outside table"),
            });
        }
        let state = AgentState {
            m_bin: m,
            f_bin: f,
            eps_idx: e,
        };
        let slot = baseline.slot(&state);
        baseline.means[slot] = mean;
        baseline.counts[slot] = count;
    }
    Ok(LoadedPolicy {
        m_bins,
        f_bins,
        eps_grid,
        eps_start_idx,
        qtable,
        baseline,
    })
}

fn parse<T: std::str::FromStr>(field: &str, line_no: usize, path: &Path) -> Result<T> {
    field.parse::<T>().map_err(|_| Error::Format {
        path: path.display().to_string(),
        detail: format!("line {}: bad value {field:?}", line_no + 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_cfg() -> RLConfig {
        RLConfig {
            f_l_max: 1.0,
            m_l_max: 1.0,
            eps_grid: RLConfig::log_grid(0.1, 20.0, 10),
            ..RLConfig::defaults()
        }
    }

    #[test]
    fn discretize_clamps_and_bins() {
        let cfg = test_cfg();
        let eps = cfg.eps_grid[0];
        assert_eq!(discretize_state(0.0, 0.0, eps, &cfg).unwrap().f_bin, 0);
        assert_eq!(discretize_state(0.0, 99.0, eps, &cfg).unwrap().f_bin, 9);
        assert_eq!(discretize_state(0.0, 0.55, eps, &cfg).unwrap().f_bin, 5);
        assert_eq!(discretize_state(0.0, -3.0, eps, &cfg).unwrap().f_bin, 0);
    }

    #[test]
    fn discretize_rejects_off_grid_epsilon() {
        let cfg = test_cfg();
        assert!(discretize_state(0.0, 0.0, 0.123, &cfg).is_err());
    }

    #[test]
    fn reward_examples() {
        let mut cfg = test_cfg();
        cfg.psi = [1.0, 1.0, 1.0];
        assert_eq!(reward(0.5, 0.25, 2.0, &cfg), 6.5);

        cfg.psi = [0.0, 0.0, 1.0];
        assert_eq!(reward(0.5, 0.25, 0.1, &cfg), 10.0);

        cfg.psi = [1.0, 1.0, 0.0];
        assert_eq!(reward(cfg.f_l_max, cfg.m_l_max, 7.0, &cfg), 2.0);
    }

    #[test]
    fn reward_floors_degenerate_losses() {
        let cfg = test_cfg();
        let r = reward(0.0, 0.0, 1.0, &cfg);
        assert!(r.is_finite());
        assert_eq!(r, 1.0 / cfg.loss_floor + 1.0 / cfg.loss_floor + 1.0);
    }

    #[test]
    fn greedy_picks_argmax_and_breaks_ties_low() {
        let cfg = test_cfg();
        let mut q = QTable::for_config(&cfg);
        let s = AgentState {
            m_bin: 0,
            f_bin: 0,
            eps_idx: 0,
        };
        // all-zero table: tie-break to action index 0
        assert_eq!(q.greedy(&s), Action::IncreaseOne);
        q.set(&s, Action::DecreaseTwo, 1.0);
        assert_eq!(q.greedy(&s), Action::DecreaseTwo);
        let mut rng = stream_rng(1, StreamPurpose::Exploration, &[]);
        assert_eq!(choose_action(&q, &s, 0.0, &mut rng), Action::DecreaseTwo);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let cfg = test_cfg();
        let q = QTable::for_config(&cfg);
        let s = AgentState {
            m_bin: 0,
            f_bin: 0,
            eps_idx: 0,
        };
        let mut rng = stream_rng(2, StreamPurpose::Exploration, &[]);
        let draws = 100_000;
        let mut counts = [0u32; 5];
        for _ in 0..draws {
            counts[choose_action(&q, &s, 1.0, &mut rng).index()] += 1;
        }
        // Multinomial oracle: p = 0.2, 3 standard errors.
        let p: f64 = 0.2;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        for (i, c) in counts.iter().enumerate() {
            let freq = f64::from(*c) / draws as f64;
            assert!((freq - p).abs() < 3.0 * se, "action {i} frequency {freq}");
        }
    }

    #[test]
    fn apply_action_clamps_at_edges() {
        assert_eq!(apply_action(3, Action::Static, 10), 3);
        assert_eq!(apply_action(0, Action::DecreaseTwo, 10), 0);
        assert_eq!(apply_action(3, Action::IncreaseTwo, 10), 5);
        assert_eq!(apply_action(9, Action::IncreaseOne, 10), 9);
    }

    #[test]
    fn q_update_examples() {
        let cfg = test_cfg();
        let mut q = QTable::for_config(&cfg);
        let s = AgentState {
            m_bin: 1,
            f_bin: 2,
            eps_idx: 3,
        };
        let s2 = AgentState {
            m_bin: 1,
            f_bin: 2,
            eps_idx: 4,
        };
        q_update(&mut q, &s, Action::Static, 1.0, Some(&s2), &cfg).unwrap();
        assert_eq!(q.value(&s, Action::Static), 0.1);
        assert_eq!(q.visits(&s, Action::Static), 1);

        // r = 0 and zero next-state values decay the entry by (1 - alpha)
        q_update(&mut q, &s, Action::Static, 0.0, Some(&s2), &cfg).unwrap();
        assert!((q.value(&s, Action::Static) - 0.09).abs() < 1e-15);

        assert!(q_update(&mut q, &s, Action::Static, f64::NAN, None, &cfg).is_err());
    }

    /// Two-state deterministic chain: s0 --(any action)--> s1 (terminal).
    /// IncreaseOne from s0 pays 2, everything else pays 1; from s1 all
    /// actions pay 5 and terminate.
    #[test]
    fn q_converges_to_value_iteration_on_chain_mdp() {
        let mut cfg = test_cfg();
        cfg.alpha = 0.5;
        cfg.chi = 0.9;
        let s0 = AgentState {
            m_bin: 0,
            f_bin: 0,
            eps_idx: 0,
        };
        let s1 = AgentState {
            m_bin: 0,
            f_bin: 1,
            eps_idx: 0,
        };
        let reward_of = |s: &AgentState, a: Action| {
            if s.f_bin == 0 {
                if a == Action::IncreaseOne {
                    2.0
                } else {
                    1.0
                }
            } else {
                5.0
            }
        };
        // Value iteration oracle: Q*(s1, a) = 5 (terminal). Q*(s0, a) =
        // r(s0,a) + chi * max_a Q*(s1, a) = r + 0.9 * 5.
        let mut q = QTable::for_config(&cfg);
        for sweep in 0..100_000 {
            let s = if sweep % 2 == 0 { s0 } else { s1 };
            let a = ACTIONS[(sweep / 2) % ACTIONS.len()];
            let r = reward_of(&s, a);
            let next = if s.f_bin == 0 { Some(&s1) } else { None };
            q_update(&mut q, &s, a, r, next, &cfg).unwrap();
        }
        for &a in &ACTIONS {
            assert!((q.value(&s1, a) - 5.0).abs() < 1e-6);
            let expected = reward_of(&s0, a) + 0.9 * 5.0;
            assert!(
                (q.value(&s0, a) - expected).abs() < 1e-6,
                "Q(s0, {a:?}) = {} vs {expected}",
                q.value(&s0, a)
            );
        }
        assert_eq!(q.greedy(&s0), Action::IncreaseOne);
    }

    #[test]
    fn single_episode_curve_has_one_entry() {
        let mut cfg = test_cfg();
        cfg.episodes = 1;
        cfg.explore_min = 1.0; // purely random policy
        cfg.explore_start = 1.0;
        let policy = train_agent(&cfg, 7, |agent| {
            let mut obs = Observation {
                federated_loss: 0.5,
                attacker_loss: 0.0,
            };
            for round in 0..4 {
                let eps = agent.choose_epsilon(&obs);
                obs.federated_loss *= 0.9;
                agent.observe(&obs, eps, round == 3);
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(policy.reward_curve.len(), 1);
        assert_eq!(policy.reward_curve[0].explore_prob, 1.0);
        assert!(policy.reward_curve[0].accumulated_reward > 0.0);
    }

    #[test]
    fn frozen_environment_reward_constant_after_floor() {
        // Constant observations and psi3 = 0 make the per-episode total
        // independent of the action path.
        let mut cfg = test_cfg();
        cfg.psi = [1.0, 1.0, 0.0];
        cfg.episodes = 40;
        cfg.explore_decay = 0.5; // floor reached within a few episodes
        let policy = train_agent(&cfg, 8, |agent| {
            let obs = Observation {
                federated_loss: 0.5,
                attacker_loss: 0.25,
            };
            for round in 0..5 {
                let eps = agent.choose_epsilon(&obs);
                agent.observe(&obs, eps, round == 4);
            }
            Ok(())
        })
        .unwrap();
        let floor_reached = policy
            .reward_curve
            .iter()
            .position(|e| e.explore_prob == cfg.explore_min)
            .unwrap();
        let reference = policy.reward_curve[floor_reached].accumulated_reward;
        for entry in &policy.reward_curve[floor_reached..] {
            assert_eq!(entry.accumulated_reward, reference);
        }
    }

    #[test]
    fn toy_env_policy_saturates_at_max_epsilon() {
        // Larger epsilon strictly lowers the federated loss; with
        // psi = (1, 0, 0) the analytic optimum is the top of the grid.
        let mut cfg = test_cfg();
        cfg.psi = [1.0, 0.0, 0.0];
        cfg.episodes = 400;
        cfg.explore_decay = 0.97;
        cfg.eps_start_idx = 4;
        let grid = cfg.eps_grid.clone();
        let policy = train_agent(&cfg, 9, |agent| {
            let mut obs = Observation {
                federated_loss: 1.0,
                attacker_loss: 0.0,
            };
            for round in 0..6 {
                let eps = agent.choose_epsilon(&obs);
                obs.federated_loss = 1.0 / (1.0 + eps);
                agent.observe(&obs, eps, round == 5);
            }
            Ok(())
        })
        .unwrap();
        // Greedy rollout from the start state must climb to and stay at the
        // top grid index.
        let mut eps_idx = cfg.eps_start_idx;
        let mut obs = Observation {
            federated_loss: 1.0,
            attacker_loss: 0.0,
        };
        for _ in 0..12 {
            let state = discretize_state(obs.attacker_loss, obs.federated_loss, grid[eps_idx], &cfg)
                .unwrap();
            let action = policy.qtable.greedy(&state);
            eps_idx = apply_action(eps_idx, action, grid.len());
            obs.federated_loss = 1.0 / (1.0 + grid[eps_idx]);
        }
        assert_eq!(eps_idx, grid.len() - 1, "greedy policy should sit at max epsilon");
    }

    #[test]
    fn detect_examples() {
        let cfg = test_cfg();
        let mut baseline = BaselineTable::for_config(&cfg);
        let s = AgentState {
            m_bin: 0,
            f_bin: 1,
            eps_idx: 2,
        };
        baseline.record(&s, 0.10);
        assert_eq!(
            detect(0.13, &s, &baseline, 0.2),
            DetectionVerdict::AttackSuspected
        );
        assert_eq!(detect(0.11, &s, &baseline, 0.2), DetectionVerdict::Clear);
        let unvisited = AgentState {
            m_bin: 5,
            f_bin: 5,
            eps_idx: 5,
        };
        assert_eq!(
            detect(0.13, &unvisited, &baseline, 0.2),
            DetectionVerdict::NoBaseline
        );
        // Infinite margin: nothing is ever suspected.
        assert_eq!(
            detect(1e12, &s, &baseline, f64::INFINITY),
            DetectionVerdict::Clear
        );
    }

    #[test]
    fn baseline_running_mean_matches_batch_mean() {
        let cfg = test_cfg();
        let mut baseline = BaselineTable::for_config(&cfg);
        let s = AgentState {
            m_bin: 2,
            f_bin: 3,
            eps_idx: 4,
        };
        let samples = [0.5, 0.7, 0.4, 0.9, 0.6];
        for v in samples {
            baseline.record(&s, v);
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        assert!((baseline.mean(&s).unwrap() - mean).abs() < 1e-12);
        assert_eq!(baseline.count(&s), 5);
    }

    #[test]
    fn q_values_bounded_by_horizon_times_max_reward() {
        // chi = 1 with terminal episodes of length T keeps Q <= T * R_max.
        let mut cfg = test_cfg();
        cfg.psi = [1.0, 0.0, 0.0];
        cfg.episodes = 200;
        cfg.explore_decay = 0.99;
        let rounds = 5;
        let policy = train_agent(&cfg, 10, |agent| {
            let mut obs = Observation {
                federated_loss: 0.8,
                attacker_loss: 0.0,
            };
            for round in 0..rounds {
                let eps = agent.choose_epsilon(&obs);
                obs.federated_loss = 0.5 + 0.4 / (1.0 + eps);
                agent.observe(&obs, eps, round + 1 == rounds);
            }
            Ok(())
        })
        .unwrap();
        let r_max = reward(0.5, 0.0, cfg.eps_grid[0], &cfg);
        let bound = rounds as f64 * r_max;
        for slot in 0..policy.qtable.values.len() {
            assert!(policy.qtable.values[slot] <= bound + 1e-9);
        }
    }

    #[test]
    fn scaling_psi_by_power_of_two_preserves_greedy_policy() {
        let run = |psi_scale: f64, seed: u64| {
            let mut cfg = test_cfg();
            cfg.psi = [psi_scale, psi_scale, psi_scale * 0.5];
            cfg.episodes = 60;
            cfg.explore_decay = 0.9;
            train_agent(&cfg, seed, |agent| {
                let mut obs = Observation {
                    federated_loss: 0.9,
                    attacker_loss: 0.1,
                };
                for round in 0..5 {
                    let eps = agent.choose_epsilon(&obs);
                    obs.federated_loss = 0.2 + 0.5 / (1.0 + eps);
                    obs.attacker_loss = 0.05 + 0.1 / (1.0 + eps);
                    agent.observe(&obs, eps, round == 4);
                }
                Ok(())
            })
            .unwrap()
        };
        let base = run(1.0, 33);
        let scaled = run(4.0, 33);
        let cfg = test_cfg();
        for m in 0..cfg.m_bins {
            for f in 0..cfg.f_bins {
                for e in 0..cfg.eps_grid.len() {
                    let s = AgentState {
                        m_bin: m,
                        f_bin: f,
                        eps_idx: e,
                    };
                    assert_eq!(base.qtable.greedy(&s), scaled.qtable.greedy(&s));
                    for &a in &ACTIONS {
                        assert_eq!(base.qtable.value(&s, a) * 4.0, scaled.qtable.value(&s, a));
                    }
                }
            }
        }
    }

    #[test]
    fn policy_round_trips_through_text_format() {
        let mut cfg = test_cfg();
        cfg.episodes = 20;
        cfg.explore_decay = 0.8;
        let policy = train_agent(&cfg, 11, |agent| {
            let mut obs = Observation {
                federated_loss: 0.7,
                attacker_loss: 0.0,
            };
            for round in 0..4 {
                let eps = agent.choose_epsilon(&obs);
                obs.federated_loss = 0.3 + 0.4 / (1.0 + eps);
                agent.observe(&obs, eps, round == 3);
            }
            Ok(())
        })
        .unwrap();
        let path = std::env::temp_dir().join(format!("dpfl-policy-{}.txt", std::process::id()));
        save_policy(&cfg, &policy, &path).unwrap();
        let loaded = load_policy(&path).unwrap();
        assert_eq!(loaded.m_bins, cfg.m_bins);
        assert_eq!(loaded.f_bins, cfg.f_bins);
        assert_eq!(loaded.eps_grid, cfg.eps_grid);
        assert_eq!(loaded.eps_start_idx, cfg.eps_start_idx);
        assert_eq!(loaded.qtable, policy.qtable);
        assert_eq!(loaded.baseline, policy.baseline);
        std::fs::remove_file(&path).ok();

        let bad = std::env::temp_dir().join(format!("dpfl-policy-bad-{}.txt", std::process::id()));
        std::fs::write(&bad, "not-a-policy v9\n").unwrap();
        assert!(load_policy(&bad).is_err());
        std::fs::remove_file(&bad).ok();
    }
}
