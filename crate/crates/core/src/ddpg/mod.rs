//! DDPG over SMamba actor and critic networks.

mod checkpoint;
mod nets;

use std::collections::VecDeque;
use std::io::Write;

use pedsafe_nn::{AdamConfig, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curvttc::CriticalEvent;
use crate::env::{explore, rollout, Action, Episode, EpisodeConfig, Policy, RewardVariant, StateWindow, StepInfo, Terminal, Transition};
use crate::error::{Error, Result};
use crate::traj::AgentClass;

pub use checkpoint::{corpus_digest, PolicyCheckpoint, CHECKPOINT_VERSION};
pub use nets::{ActorFn, ActorNet, CriticNet, QFunction, WindowBatch, HIDDEN, STATE_SCALE};

pub const ROLLING_WINDOW: usize = 50;

const STREAM_INIT: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_SAMPLE: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub batch: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub gamma: f64,
    pub tau: f64,
    pub noise_sigma: f64,
    pub buffer: usize,
    pub seed: u64,
    pub episode: EpisodeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 3000,
            batch: 256,
            lr_actor: 5e-4,
            lr_critic: 1e-3,
            gamma: 0.9,
            tau: 0.01,
            noise_sigma: 0.01,
            buffer: 10_000,
            seed: 0,
            episode: EpisodeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.episodes == 0 || self.batch == 0 || self.buffer == 0 {
            return bad("episodes, batch and buffer must be positive");
        }
        if self.batch > self.buffer {
            return bad("batch cannot exceed the replay buffer size");
        }
        if !(self.lr_actor > 0.0) || !(self.lr_critic > 0.0) || !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("learning rates must be positive and noise sigma non-negative");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        self.episode.validate()
    }
}

/// FIFO replay memory with uniform sampling with replacement.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { items: VecDeque::with_capacity(capacity.min(1 << 16)), capacity }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if n == 0 || self.items.len() < n {
            return Err(Error::Contract(format!("cannot sample {n} from a buffer of {}", self.items.len())));
        }
        Ok((0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect())
    }
}

fn bootstraps(t: Terminal) -> bool {
    !matches!(t, Terminal::Collision | Terminal::Goal)
}

fn actions_tensor(batch: &[&Transition]) -> Tensor {
    let data = batch.iter().flat_map(|t| [t.action.alon, t.action.alat]).collect();
    Tensor::from_vec(batch.len(), 2, data).expect("two columns")
}

/// `r + gamma * Q'(s', mu'(s'))`, or `r` at collision and goal.
pub fn critic_target(batch: &[&Transition], target_actor: &dyn ActorFn, target_critic: &dyn QFunction, gamma: f64) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let next = WindowBatch::from_windows(batch.iter().map(|t| &t.next_state));
    let mut tape = Tape::inference();
    let a = target_actor.actions(&mut tape, &next, true)?;
    let q = target_critic.q(&mut tape, &next, a, true)?;
    let q = &tape.value(q).data;
    Ok(batch.iter().zip(q).map(|(t, &qn)| if bootstraps(t.terminal) { t.reward + gamma * qn } else { t.reward }).collect())
}

/// One Adam step on the mean squared TD error. Returns the loss before the
/// step.
pub fn update_critic(batch: &[&Transition], targets: &[f64], critic: &mut CriticNet, adam: &AdamConfig) -> Result<f64> {
    if batch.len() != targets.len() || batch.is_empty() {
        return Err(Error::Contract(format!("{} transitions for {} targets", batch.len(), targets.len())));
    }
    let states = WindowBatch::from_windows(batch.iter().map(|t| &t.state));
    let mut tape = Tape::new();
    let a = tape.constant(actions_tensor(batch));
    let q = critic.q(&mut tape, &states, a, false)?;
    let y = tape.constant(Tensor::from_vec(targets.len(), 1, targets.to_vec())?);
    let d = tape.sub(q, y)?;
    let d2 = tape.square(d);
    let loss = tape.mean(d2);
    let value = tape.value(loss).data[0];
    if !value.is_finite() {
        return Err(Error::Training(format!("critic loss is {value}")));
    }
    let grads = tape.backward(loss)?;
    critic.params.adam_step(&grads, adam)?;
    Ok(value)
}

/// Actor objective `-mean Q(s, mu(s))` on the tape, critic frozen.
pub fn actor_objective(tape: &mut Tape, states: &WindowBatch, actor: &dyn ActorFn, critic: &dyn QFunction) -> Result<pedsafe_nn::Var> {
    let a = actor.actions(tape, states, false)?;
    let q = critic.q(tape, states, a, true)?;
    let m = tape.mean(q);
    Ok(tape.neg(m))
}

/// One Adam step descending `-mean Q`. Returns the objective before the
/// step.
pub fn update_actor(windows: &[&StateWindow], actor: &mut ActorNet, critic: &dyn QFunction, adam: &AdamConfig) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Contract("empty actor batch".into()));
    }
    let states = WindowBatch::from_windows(windows.iter().copied());
    let mut tape = Tape::new();
    let obj = actor_objective(&mut tape, &states, actor, critic)?;
    let value = tape.value(obj).data[0];
    if !value.is_finite() {
        return Err(Error::Training(format!("actor objective is {value}")));
    }
    let grads = tape.backward(obj)?;
    actor.params.adam_step(&grads, adam)?;
    Ok(value)
}

/// `target <- tau * main + (1 - tau) * target`.
pub fn soft_update(main: &ParamStore, target: &mut ParamStore, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside [0, 1]")));
    }
    target.soft_update_from(main, tau).map_err(|e| Error::Contract(format!("soft update: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    pub raw_reward: f64,
    pub rolling_mean_50: f64,
}

/// Trailing mean over up to `window` values.
pub fn rolling_mean(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

pub fn write_curve_csv<W: Write>(writer: W, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["episode", "raw_reward", "rolling_mean_50"])?;
    for p in curve {
        w.write_record([p.episode.to_string(), p.raw_reward.to_string(), p.rolling_mean_50.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Main and target networks plus optimizer settings.
#[derive(Debug, Clone)]
pub struct Agent {
    pub actor: ActorNet,
    pub critic: CriticNet,
    pub target_actor: ActorNet,
    pub target_critic: CriticNet,
}

impl Agent {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_INIT);
        let actor = ActorNet::new(&mut rng);
        let critic = CriticNet::new(&mut rng);
        let target_actor = ActorNet::from_params(actor.params.values_only()).expect("same layout");
        let target_critic = CriticNet::from_params(critic.params.values_only()).expect("same layout");
        Agent { actor, critic, target_actor, target_critic }
    }

    /// Critic step, actor step and soft updates on one sampled batch.
    /// Returns `(critic_loss, actor_objective)`.
    pub fn train_step(&mut self, batch: &[&Transition], cfg: &TrainConfig) -> Result<(f64, f64)> {
        let y = critic_target(batch, &self.target_actor, &self.target_critic, cfg.gamma)?;
        let closs = update_critic(batch, &y, &mut self.critic, &AdamConfig::with_lr(cfg.lr_critic))?;
        let windows: Vec<&StateWindow> = batch.iter().map(|t| &t.state).collect();
        let aobj = update_actor(&windows, &mut self.actor, &self.critic, &AdamConfig::with_lr(cfg.lr_actor))?;
        soft_update(&self.actor.params, &mut self.target_actor.params, cfg.tau)?;
        soft_update(&self.critic.params, &mut self.target_critic.params, cfg.tau)?;
        debug_assert!(self.all_finite(), "non-finite parameter after a training step");
        Ok((closs, aobj))
    }

    fn all_finite(&self) -> bool {
        [&self.actor.params, &self.critic.params, &self.target_actor.params, &self.target_critic.params]
            .iter()
            .all(|p| p.names().all(|n| p.get(n).map(|t| t.all_finite()).unwrap_or(false)))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: PolicyCheckpoint,
    pub curve: Vec<CurvePoint>,
}

/// Trains one vehicle-type policy, cycling the corpus in order.
pub fn train(
    corpus: &[CriticalEvent],
    variant: RewardVariant,
    cfg: &TrainConfig,
    vehicle_type: AgentClass,
) -> Result<TrainOutput> {
    train_with_progress(corpus, variant, cfg, vehicle_type, &mut |_, _| {})
}

/// [`train`] with a callback after every episode.
pub fn train_with_progress(
    corpus: &[CriticalEvent],
    variant: RewardVariant,
    cfg: &TrainConfig,
    vehicle_type: AgentClass,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if !vehicle_type.is_vehicle() {
        return Err(Error::InvalidArgument("vehicle type must be AV or HDV".into()));
    }
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    let mut agent = Agent::new(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(STREAM_NOISE);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_rng.set_stream(STREAM_SAMPLE);
    let mut buffer = ReplayBuffer::new(cfg.buffer);
    let mut rewards = Vec::with_capacity(cfg.episodes);

    for ep in 0..cfg.episodes {
        let event = &corpus[ep % corpus.len()];
        let mut episode = Episode::new(event, cfg.episode, variant)?;
        let mut total = 0.0;
        while !episode.is_done() {
            let a = agent.actor.act(episode.window())?;
            let a = explore(a, cfg.noise_sigma, &mut noise_rng)?;
            let (tr, _) = episode.step(a)?;
            total += tr.raw_reward;
            buffer.push(tr);
            if buffer.len() >= cfg.batch {
                let batch = buffer.sample(cfg.batch, &mut sample_rng)?;
                agent.train_step(&batch, cfg).map_err(|e| match e {
                    Error::Training(m) => Error::Training(format!("episode {ep}: {m}")),
                    other => other,
                })?;
            }
        }
        rewards.push(total);
        progress(ep, total);
    }

    let rolling = rolling_mean(&rewards, ROLLING_WINDOW);
    let curve = rewards
        .iter()
        .zip(&rolling)
        .enumerate()
        .map(|(episode, (&raw_reward, &rolling_mean_50))| CurvePoint { episode, raw_reward, rolling_mean_50 })
        .collect();
    let checkpoint = PolicyCheckpoint::from_agent(&agent, vehicle_type, variant, *cfg, corpus_digest(corpus)?);
    Ok(TrainOutput { checkpoint, curve })
}

/// Deterministic policy backed by an actor network.
pub struct ActorPolicy<'a>(pub &'a ActorNet);

impl Policy for ActorPolicy<'_> {
    fn act(&mut self, window: &StateWindow) -> Result<Action> {
        self.0.act(window)
    }
}

/// Zero-noise closed-loop rollout of the checkpoint's actor.
pub fn reconstruct(checkpoint: &PolicyCheckpoint, event: &CriticalEvent) -> Result<Vec<(Transition, StepInfo)>> {
    let actor = checkpoint.actor()?;
    reconstruct_with_policy(&mut ActorPolicy(&actor), event, checkpoint.variant, checkpoint.config.episode)
}

pub fn reconstruct_with_policy(
    policy: &mut dyn Policy,
    event: &CriticalEvent,
    variant: RewardVariant,
    cfg: EpisodeConfig,
) -> Result<Vec<(Transition, StepInfo)>> {
    rollout(event, policy, variant, cfg, 0.0, 0)
}

#[cfg(test)]
mod tests;
