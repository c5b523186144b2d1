//! The Prioritized Replay DDQN training loop: epsilon-greedy
//! exploration, double or single bootstrap targets, prioritized replay
//! with importance weighting, and phased escalation of the target
//! coverage rate. The two-level pipeline trains a preliminary placement
//! under the disk model and refines it against the terrain map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{ActionMode, EnvConfig, InitialPlacement, PlacementEnv};
use crate::error::{Error, Result};
use crate::geom::Point2D;
use crate::qnet::{encode_bitmap, AdamConfig, AdamState, NetworkSpec, QNetwork, TrainSample};
use crate::replay::{ReplayBuffer, Transition};
use crate::scenario::{coverage_bitmap_for, coverage_rate, ChannelModel, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// Double-network target with prioritized, importance-weighted replay.
    PrioritizedDdqn,
    /// Single-network bootstrap target; pair with zero replay exponents
    /// for the uniform benchmark.
    Dqn,
}

/// Linear decay from `start` to `end` over `decay_steps` environment
/// steps, then constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: usize,
}

impl EpsilonSchedule {
    pub fn value(&self, step: usize) -> f64 {
        if step >= self.decay_steps || self.decay_steps == 0 {
            self.end
        } else {
            let frac = step as f64 / self.decay_steps as f64;
            self.start + (self.end - self.start) * frac
        }
    }
}

/// Phase escalation of the target coverage rate: start at `start`, add
/// `increment` after each achieved phase, stop once a phase stalls
/// (`patience` consecutive trained episodes without reaching the target).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetSchedule {
    pub start: f64,
    pub increment: f64,
    pub patience: usize,
}

impl Default for TargetSchedule {
    fn default() -> Self {
        Self {
            start: 0.70,
            increment: 0.05,
            patience: 60,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub algorithm: Algorithm,
    /// Discount factor in (0,1).
    pub discount: f64,
    /// Minibatch size.
    pub batch_size: usize,
    /// Replay memory size; training starts only once it is full.
    pub replay_capacity: usize,
    /// Replay priority exponent.
    pub priority_exponent: f64,
    /// Importance-sampling correction exponent.
    pub correction_exponent: f64,
    /// Episode budget per phase.
    pub episodes_per_phase: usize,
    /// Step budget per episode.
    pub steps_per_episode: usize,
    pub epsilon: EpsilonSchedule,
    /// Copy the online weights into the target network every this many
    /// training steps.
    pub target_sync_period: u64,
    pub adam: AdamConfig,
    pub targets: TargetSchedule,
    /// Achieved episodes needed before a phase counts as done and the
    /// target escalates.
    pub successes_to_advance: usize,
    /// Network override; the default is the two-conv stack sized for the
    /// scenario grid and action count.
    pub network: Option<NetworkSpec>,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        let episodes_per_phase = 900;
        let steps_per_episode = 100;
        Self {
            algorithm: Algorithm::PrioritizedDdqn,
            discount: 0.95,
            batch_size: 64,
            replay_capacity: 40_000,
            priority_exponent: 0.6,
            correction_exponent: 0.4,
            episodes_per_phase,
            steps_per_episode,
            epsilon: EpsilonSchedule {
                start: 1.0,
                end: 0.05,
                decay_steps: episodes_per_phase * steps_per_episode / 2,
            },
            target_sync_period: 200,
            adam: AdamConfig::default(),
            targets: TargetSchedule::default(),
            successes_to_advance: 1,
            network: None,
            seed: 0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(Error::InvalidParam(format!(
                "discount must be in (0,1), got {}",
                self.discount
            )));
        }
        if self.batch_size == 0 || self.batch_size > self.replay_capacity {
            return Err(Error::InvalidParam(format!(
                "batch size {} must be in 1..={}",
                self.batch_size, self.replay_capacity
            )));
        }
        if self.steps_per_episode == 0 || self.episodes_per_phase == 0 {
            return Err(Error::InvalidParam("empty training budget".into()));
        }
        Ok(())
    }
}

/// First-index argmax; ties break toward the lowest index.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Epsilon-greedy action over the network's Q-values.
pub fn select_action<R: Rng>(
    net: &QNetwork,
    state: &[f64],
    epsilon: f64,
    rng: &mut R,
) -> usize {
    let n = net.n_outputs();
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        rng.gen_range(0..n)
    } else {
        argmax_first(&net.forward(state))
    }
}

/// Single-network bootstrap target: `r + beta * max_a Q_target(s', a)`,
/// or just `r` on terminal transitions.
pub fn dqn_target(reward: f64, terminal: bool, discount: f64, q_next_target: &[f64]) -> f64 {
    if terminal {
        reward
    } else {
        reward + discount * q_next_target[argmax_first(q_next_target)]
    }
}

/// Double target: the online network selects the action, the target
/// network evaluates it.
pub fn ddqn_target(
    reward: f64,
    terminal: bool,
    discount: f64,
    q_next_online: &[f64],
    q_next_target: &[f64],
) -> f64 {
    if terminal {
        reward
    } else {
        reward + discount * q_next_target[argmax_first(q_next_online)]
    }
}

/// One row of the per-step training log (CSV columns in this order).
#[derive(Debug, Clone, Copy)]
pub struct LogRow {
    pub phase_target: f64,
    pub episode: usize,
    pub step: usize,
    pub epsilon: f64,
    pub loss: Option<f64>,
    pub coverage_rate: f64,
    pub reward: f64,
}

pub trait TrainLog {
    fn record(&mut self, row: &LogRow);

    /// Called as each stage of a multi-stage run begins.
    fn on_stage_start(&mut self, _stage: &str) {}

    /// Called after every phase with the current online network, so
    /// callers can write per-phase checkpoints.
    fn on_phase_complete(&mut self, _target: f64, _achieved: bool, _network: &QNetwork) {}

    /// Per-step episode trace record.
    fn trace(&mut self, _record: &crate::env::TraceRecord) {}

    /// Whether [`TrainLog::trace`] wants records (skips building them
    /// otherwise).
    fn wants_trace(&self) -> bool {
        false
    }
}

/// Discards every row.
pub struct NullLog;

impl TrainLog for NullLog {
    fn record(&mut self, _: &LogRow) {}
}

/// Streams rows as CSV to any writer.
pub struct CsvLog<W: std::io::Write> {
    writer: W,
}

impl<W: std::io::Write> CsvLog<W> {
    pub fn new(mut writer: W) -> std::io::Result<Self> {
        writeln!(writer, "phase,episode,step,epsilon,loss,coverage,reward")?;
        Ok(Self { writer })
    }

    pub fn into_inner(self) -> W {
        self.writer
    }
}

impl<W: std::io::Write> TrainLog for CsvLog<W> {
    fn record(&mut self, row: &LogRow) {
        let loss = row.loss.map(|l| l.to_string()).unwrap_or_default();
        let _ = writeln!(
            self.writer,
            "{},{},{},{},{},{},{}",
            row.phase_target,
            row.episode,
            row.step,
            row.epsilon,
            loss,
            row.coverage_rate,
            row.reward
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStats {
    pub phase_target: f64,
    pub episode: usize,
    pub steps: usize,
    pub reward_sum: f64,
    pub final_coverage: f64,
    pub best_coverage: f64,
    pub mean_loss: Option<f64>,
    pub reached_target: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseStats {
    pub target: f64,
    pub achieved: bool,
    pub episodes: usize,
    pub train_steps: u64,
}

/// Everything a training stage produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub episodes: Vec<EpisodeStats>,
    pub phases: Vec<PhaseStats>,
    pub best_placement: Vec<Point2D>,
    pub best_coverage: f64,
    /// Highest phase target that was achieved, if any.
    pub achieved_target: Option<f64>,
    pub train_steps: u64,
}

impl TrainReport {
    /// Per-episode CSV; used both as the run artifact and to check
    /// run-to-run determinism.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("phase,episode,steps,reward_sum,final_coverage,best_coverage,mean_loss,reached\n");
        for e in &self.episodes {
            let loss = e.mean_loss.map(|l| l.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                e.phase_target,
                e.episode,
                e.steps,
                e.reward_sum,
                e.final_coverage,
                e.best_coverage,
                loss,
                e.reached_target as u8
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseOutcome {
    pub achieved: bool,
    pub episodes: usize,
}

/// Owns the networks, optimizer, replay buffer, and exploration state
/// for one training stage.
pub struct Trainer {
    cfg: AgentConfig,
    online: QNetwork,
    target: QNetwork,
    adam: AdamState,
    buffer: ReplayBuffer,
    action_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    cell_cap: u32,
    train_steps: u64,
    episodes_run: usize,
    episode_stats: Vec<EpisodeStats>,
    best_coverage: f64,
    best_placement: Vec<Point2D>,
}

impl Trainer {
    pub fn new(env: &PlacementEnv, cfg: AgentConfig) -> Result<Self> {
        cfg.validate()?;
        let n_actions = env.action_space().size();
        let grid_k = env.scenario().grid_k;
        let spec = cfg
            .network
            .clone()
            .unwrap_or_else(|| NetworkSpec::default_for(grid_k, n_actions));
        if spec.n_outputs()? != n_actions {
            return Err(Error::InvalidNetwork(format!(
                "network has {} outputs, action space has {n_actions}",
                spec.n_outputs()?
            )));
        }
        if spec.input_side != grid_k {
            return Err(Error::InvalidNetwork(format!(
                "network input side {} does not match grid {grid_k}",
                spec.input_side
            )));
        }
        let online = QNetwork::new(spec, cfg.seed)?;
        let target = online.clone();
        let adam = AdamState::new_for(&online);
        let buffer = ReplayBuffer::new(
            cfg.replay_capacity,
            cfg.priority_exponent,
            cfg.correction_exponent,
        )?;
        let mut action_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        action_rng.set_stream(10);
        let mut replay_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        replay_rng.set_stream(11);
        let cell_cap = env.scenario().max_gus_per_cell();
        Ok(Self {
            cfg,
            online,
            target,
            adam,
            buffer,
            action_rng,
            replay_rng,
            cell_cap,
            train_steps: 0,
            episodes_run: 0,
            episode_stats: Vec::new(),
            best_coverage: -1.0,
            best_placement: Vec::new(),
        })
    }

    pub fn online(&self) -> &QNetwork {
        &self.online
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn cell_cap(&self) -> u32 {
        self.cell_cap
    }

    pub fn best(&self) -> (f64, &[Point2D]) {
        (self.best_coverage, &self.best_placement)
    }

    fn track_best(&mut self, rate: f64, positions: &[Point2D]) {
        if rate > self.best_coverage {
            self.best_coverage = rate;
            self.best_placement = positions.to_vec();
        }
    }

    /// One gradient update: sample a prioritized minibatch, build
    /// bootstrap targets, descend the weighted TD loss, write the new
    /// |TD| priorities back, and periodically sync the target network.
    pub fn train_step(&mut self) -> Result<f64> {
        let batch = self.buffer.sample(self.cfg.batch_size, &mut self.replay_rng)?;
        let mut indices = Vec::with_capacity(batch.len());
        let mut encoded_states = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for entry in &batch {
            let t = &entry.transition;
            let next = encode_bitmap(&t.next_state, self.cell_cap);
            let y = match self.cfg.algorithm {
                Algorithm::PrioritizedDdqn => {
                    let q_next_target = self.target.forward(&next);
                    let q_next_online = self.online.forward(&next);
                    ddqn_target(
                        t.reward,
                        t.terminal,
                        self.cfg.discount,
                        &q_next_online,
                        &q_next_target,
                    )
                }
                Algorithm::Dqn => {
                    let q_next_target = self.target.forward(&next);
                    dqn_target(t.reward, t.terminal, self.cfg.discount, &q_next_target)
                }
            };
            targets.push(y);
            encoded_states.push(encode_bitmap(&t.state, self.cell_cap));
            indices.push(entry.index);
        }
        let samples: Vec<TrainSample> = batch
            .iter()
            .zip(&encoded_states)
            .zip(&targets)
            .map(|((entry, input), &target)| TrainSample {
                input,
                action: entry.transition.action,
                target,
                weight: entry.weight,
            })
            .collect();
        let (loss, grads, deltas) = self.online.loss_and_grad(&samples);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: self.train_steps,
            });
        }
        self.online.optimizer_step(grads, &mut self.adam, &self.cfg.adam);
        self.buffer.update_priorities(&indices, &deltas);
        self.train_steps += 1;
        if self.train_steps.is_multiple_of(self.cfg.target_sync_period) {
            self.target = self.online.clone();
        }
        Ok(loss)
    }

    /// Trains toward one fixed target coverage rate.
    ///
    /// Episodes run for the configured step budget; exploration fills
    /// the replay memory and gradient updates begin only once it is
    /// full errors. An episode that reaches the target (reward 1) while
    /// the memory is full terminates early and counts as a success; the
    /// phase ends achieved after `successes_to_advance` successes, or
    /// stalled after `patience` consecutive trained episodes without one.
    pub fn train_phase(
        &mut self,
        env: &mut PlacementEnv,
        target_rate: f64,
        log: &mut dyn TrainLog,
    ) -> Result<PhaseOutcome> {
        env.set_target_rate(target_rate);
        let mut phase_steps = 0usize;
        let mut successes = 0usize;
        let mut consecutive_failures = 0usize;
        let mut phase_episodes = 0usize;

        for _ in 0..self.cfg.episodes_per_phase {
            let mut state = env.reset()?;
            let n_gus = env.scenario().n_gus();
            let reset_rate = coverage_rate(&state.bitmap, n_gus);
            self.track_best(reset_rate, &state.abs_positions);

            let mut reward_sum = 0.0;
            let mut loss_sum = 0.0;
            let mut loss_count = 0usize;
            let mut final_rate = reset_rate;
            let mut best_rate = reset_rate;
            let mut reached = false;
            let mut steps = 0usize;

            for step in 1..=self.cfg.steps_per_episode {
                let epsilon = self.cfg.epsilon.value(phase_steps);
                let encoded = encode_bitmap(&state.bitmap, self.cell_cap);
                let action = select_action(&self.online, &encoded, epsilon, &mut self.action_rng);
                let res = env.step(action)?;
                self.buffer.push(Transition {
                    state: state.bitmap.clone(),
                    action,
                    reward: res.reward,
                    next_state: res.next_state.bitmap.clone(),
                    terminal: res.terminal,
                });

                let loss = if self.buffer.is_full() {
                    let l = self.train_step()?;
                    loss_sum += l;
                    loss_count += 1;
                    Some(l)
                } else {
                    None
                };
                log.record(&LogRow {
                    phase_target: target_rate,
                    episode: self.episodes_run + 1,
                    step,
                    epsilon,
                    loss,
                    coverage_rate: res.info.coverage_rate,
                    reward: res.reward,
                });
                if log.wants_trace() {
                    log.trace(&crate::env::TraceRecord {
                        step,
                        action,
                        reward: res.reward,
                        coverage_rate: res.info.coverage_rate,
                        positions: res.next_state.abs_positions.clone(),
                    });
                }

                reward_sum += res.reward;
                final_rate = res.info.coverage_rate;
                best_rate = best_rate.max(res.info.coverage_rate);
                self.track_best(res.info.coverage_rate, &res.next_state.abs_positions);
                phase_steps += 1;
                steps = step;
                state = res.next_state;
                if res.terminal && self.buffer.is_full() {
                    reached = true;
                    break;
                }
            }

            self.episodes_run += 1;
            phase_episodes += 1;
            self.episode_stats.push(EpisodeStats {
                phase_target: target_rate,
                episode: self.episodes_run,
                steps,
                reward_sum,
                final_coverage: final_rate,
                best_coverage: best_rate,
                mean_loss: (loss_count > 0).then(|| loss_sum / loss_count as f64),
                reached_target: reached,
            });

            if reached {
                successes += 1;
                consecutive_failures = 0;
                if successes >= self.cfg.successes_to_advance {
                    return Ok(PhaseOutcome {
                        achieved: true,
                        episodes: phase_episodes,
                    });
                }
            } else if self.buffer.is_full() {
                consecutive_failures += 1;
                if consecutive_failures >= self.cfg.targets.patience {
                    return Ok(PhaseOutcome {
                        achieved: false,
                        episodes: phase_episodes,
                    });
                }
            }
        }
        Ok(PhaseOutcome {
            achieved: successes > 0,
            episodes: phase_episodes,
        })
    }

    fn into_report(self, phases: Vec<PhaseStats>) -> TrainReport {
        let achieved_target = phases
            .iter()
            .filter(|p| p.achieved)
            .map(|p| p.target)
            .fold(None, |acc: Option<f64>, t| {
                Some(acc.map_or(t, |a| a.max(t)))
            });
        TrainReport {
            episodes: self.episode_stats,
            phases,
            best_placement: self.best_placement,
            best_coverage: self.best_coverage,
            achieved_target,
            train_steps: self.train_steps,
        }
    }
}

/// Environment knobs shared by both training stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoveRules {
    pub step_size_m: f64,
    pub reward_scale: f64,
    pub action_mode: ActionMode,
}

impl Default for MoveRules {
    fn default() -> Self {
        Self {
            step_size_m: 10.0,
            reward_scale: 1.0,
            action_mode: ActionMode::Factored,
        }
    }
}

/// Greedy rollout of a trained network from the environment's initial
/// placement.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub reached_target: bool,
    pub steps: usize,
    pub final_coverage: f64,
    pub best_coverage: f64,
    pub final_positions: Vec<Point2D>,
}

pub fn greedy_rollout(
    net: &QNetwork,
    env: &mut PlacementEnv,
    cell_cap: u32,
    max_steps: usize,
) -> Result<Rollout> {
    let mut state = env.reset()?;
    let n_gus = env.scenario().n_gus();
    let mut best = coverage_rate(&state.bitmap, n_gus);
    let mut rate = best;
    let mut steps = 0;
    let mut reached = rate >= env.config().target_rate;
    while steps < max_steps && !reached {
        let encoded = encode_bitmap(&state.bitmap, cell_cap);
        let action = argmax_first(&net.forward(&encoded));
        let res = env.step(action)?;
        steps += 1;
        rate = res.info.coverage_rate;
        best = best.max(rate);
        state = res.next_state;
        if res.terminal {
            reached = true;
        }
    }
    Ok(Rollout {
        reached_target: reached,
        steps,
        final_coverage: rate,
        best_coverage: best,
        final_positions: state.abs_positions,
    })
}

/// One trained stage: the report plus the placement it settled on (the
/// positions at the highest coverage rate ever observed).
#[derive(Debug, Clone, PartialEq)]
pub struct StageResult {
    pub report: TrainReport,
    pub placement: Vec<Point2D>,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoLevelResult {
    /// Disk-model stage.
    pub preliminary: StageResult,
    /// Terrain-model stage, started from the preliminary placement.
    pub advanced: StageResult,
    /// The preliminary placement evaluated under the terrain model.
    pub preliminary_on_terrain: f64,
}

/// Trains one stage: escalate the phase target from the schedule start
/// until a phase stalls or full coverage is achieved.
pub fn run_stage(
    scenario: &Scenario,
    model: ChannelModel,
    initial: InitialPlacement,
    cfg: &AgentConfig,
    rules: &MoveRules,
    env_seed: u64,
    log: &mut dyn TrainLog,
) -> Result<StageResult> {
    let env_cfg = EnvConfig {
        model,
        target_rate: cfg.targets.start,
        step_size_m: rules.step_size_m,
        reward_scale: rules.reward_scale,
        action_mode: rules.action_mode,
        initial,
        max_steps: cfg.steps_per_episode,
        seed: env_seed,
    };
    let mut env = PlacementEnv::new(scenario.clone(), env_cfg)?;
    let mut trainer = Trainer::new(&env, cfg.clone())?;
    let mut phases = Vec::new();
    let mut target = cfg.targets.start;
    loop {
        let before = trainer.train_steps();
        let outcome = trainer.train_phase(&mut env, target, log)?;
        phases.push(PhaseStats {
            target,
            achieved: outcome.achieved,
            episodes: outcome.episodes,
            train_steps: trainer.train_steps() - before,
        });
        log.on_phase_complete(target, outcome.achieved, trainer.online());
        if !outcome.achieved || target >= 1.0 {
            break;
        }
        target = (target + cfg.targets.increment).min(1.0);
    }
    let (coverage, placement) = trainer.best();
    let placement = placement.to_vec();
    Ok(StageResult {
        report: trainer.into_report(phases),
        placement,
        coverage,
    })
}

/// The full two-level pipeline: a preliminary design under the disk
/// model from random starts, then an advanced refinement under the
/// terrain model starting from the preliminary placement.
pub fn run_two_level(
    scenario: &Scenario,
    cfg: &AgentConfig,
    rules: &MoveRules,
    log: &mut dyn TrainLog,
) -> Result<TwoLevelResult> {
    log.on_stage_start("preliminary");
    let preliminary = run_stage(
        scenario,
        ChannelModel::Disk,
        InitialPlacement::RandomUniform,
        cfg,
        rules,
        cfg.seed,
        log,
    )?;

    let bitmap = coverage_bitmap_for(scenario, &preliminary.placement, ChannelModel::Terrain)?;
    let preliminary_on_terrain = coverage_rate(&bitmap, scenario.n_gus());

    let mut advanced_cfg = cfg.clone();
    advanced_cfg.seed = cfg.seed ^ 0xA5A5_0000;
    log.on_stage_start("advanced");
    let advanced = run_stage(
        scenario,
        ChannelModel::Terrain,
        InitialPlacement::Fixed(preliminary.placement.clone()),
        &advanced_cfg,
        rules,
        advanced_cfg.seed.wrapping_add(1),
        log,
    )?;

    Ok(TwoLevelResult {
        preliminary,
        advanced,
        preliminary_on_terrain,
    })
}
