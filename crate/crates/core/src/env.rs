//! Pedestrian-centred kinematic environment replaying a recorded vehicle.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::curvttc::CriticalEvent;
use crate::error::{Error, Result};
use crate::traj::TrackPoint;

pub const WINDOW: usize = 10;
pub const STATE_DIM: usize = 6;
pub const ACTION_DIM: usize = 2;
pub const ACTION_BOUND: f64 = 7.0;
pub const REWARD_EPS: f64 = 1e-7;

/// Relative state with y longitudinal and x lateral.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnvState {
    pub dlon: f64,
    pub vlon_ped: f64,
    pub dvlon: f64,
    pub dlat: f64,
    pub vlat_ped: f64,
    pub dvlat: f64,
}

impl EnvState {
    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [self.dlon, self.vlon_ped, self.dvlon, self.dlat, self.vlat_ped, self.dvlat]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub alon: f64,
    pub alat: f64,
}

impl Action {
    pub fn clamped(self) -> Action {
        Action { alon: self.alon.clamp(-ACTION_BOUND, ACTION_BOUND), alat: self.alat.clamp(-ACTION_BOUND, ACTION_BOUND) }
    }
}

pub fn make_state(ped: &TrackPoint, veh: &TrackPoint) -> EnvState {
    EnvState {
        dlon: ped.y - veh.y,
        vlon_ped: ped.vy,
        dvlon: ped.vy - veh.vy,
        dlat: ped.x - veh.x,
        vlat_ped: ped.vx,
        dvlat: ped.vx - veh.vx,
    }
}

/// One step of the pedestrian kinematics: velocity by the action,
/// relative velocity against the vehicle velocity at the start of the
/// step, relative distance by the trapezoidal pedestrian displacement.
/// `veh_vel` is `(vx, vy)`.
pub fn step_dynamics(state: &EnvState, action: &Action, veh_vel: (f64, f64), dt: f64) -> Result<EnvState> {
    if !action.alon.is_finite() || !action.alat.is_finite() {
        return Err(Error::Contract(format!("non-finite action ({}, {})", action.alon, action.alat)));
    }
    let vlon = state.vlon_ped + action.alon * dt;
    let vlat = state.vlat_ped + action.alat * dt;
    Ok(EnvState {
        dlon: state.dlon + 0.5 * (state.vlon_ped + vlon) * dt,
        vlon_ped: vlon,
        dvlon: vlon - veh_vel.1,
        dlat: state.dlat + 0.5 * (state.vlat_ped + vlat) * dt,
        vlat_ped: vlat,
        dvlat: vlat - veh_vel.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RewardKind {
    Distance,
    AbsVelocity,
    RelVelocity,
}

impl RewardKind {
    pub fn label(self) -> &'static str {
        match self {
            RewardKind::Distance => "distance",
            RewardKind::AbsVelocity => "abs-velocity",
            RewardKind::RelVelocity => "rel-velocity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardVariant {
    pub kind: RewardKind,
    pub epsilon: f64,
}

impl RewardVariant {
    pub fn new(kind: RewardKind) -> Self {
        RewardVariant { kind, epsilon: REWARD_EPS }
    }
}

/// Negative sum of the normalised absolute deviations of the two
/// components selected by the variant.
pub fn core_reward(predicted: &EnvState, actual: &EnvState, variant: &RewardVariant) -> f64 {
    let (p, a) = match variant.kind {
        RewardKind::Distance => ((predicted.dlon, predicted.dlat), (actual.dlon, actual.dlat)),
        RewardKind::AbsVelocity => ((predicted.vlon_ped, predicted.vlat_ped), (actual.vlon_ped, actual.vlat_ped)),
        RewardKind::RelVelocity => ((predicted.dvlon, predicted.dvlat), (actual.dvlon, actual.dvlat)),
    };
    let e = variant.epsilon;
    -((p.0 - a.0).abs() / (a.0.abs() + e) + (p.1 - a.1).abs() / (a.1.abs() + e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub dt: f64,
    pub collision_dist: f64,
    pub goal_radius: f64,
    pub c_collision: f64,
    pub c_goal: f64,
    pub reward_scale: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { dt: 0.1, collision_dist: 1.3, goal_radius: 0.5, c_collision: -200.0, c_goal: 100.0, reward_scale: 100.0 }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.collision_dist > 0.0) || !(self.goal_radius > 0.0) || !(self.reward_scale > 0.0) {
            return Err(Error::InvalidArgument("episode dt, distances and reward scale must be positive".into()));
        }
        if !(self.c_collision < 0.0) || !(self.c_goal > 0.0) {
            return Err(Error::InvalidArgument("collision penalty must be negative and goal reward positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepEvent {
    None,
    Collision,
    Goal,
}

/// Unscaled total reward of a step.
pub fn total_reward(core: f64, event: StepEvent, cfg: &EpisodeConfig) -> f64 {
    match event {
        StepEvent::Collision => cfg.c_collision,
        StepEvent::Goal => cfg.c_goal,
        StepEvent::None => core,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Terminal {
    No,
    Collision,
    Goal,
    HorizonEnd,
}

impl Terminal {
    pub fn is_terminal(self) -> bool {
        self != Terminal::No
    }

    pub fn label(self) -> &'static str {
        match self {
            Terminal::No => "no",
            Terminal::Collision => "collision",
            Terminal::Goal => "goal",
            Terminal::HorizonEnd => "horizon_end",
        }
    }
}

/// The last ten states, oldest first; the leading `WINDOW - valid` rows
/// are masked and zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateWindow {
    pub rows: [[f64; STATE_DIM]; WINDOW],
    pub valid: usize,
}

impl Default for StateWindow {
    fn default() -> Self {
        StateWindow { rows: [[0.0; STATE_DIM]; WINDOW], valid: 0 }
    }
}

impl StateWindow {
    pub fn push(&self, s: &EnvState) -> StateWindow {
        let mut rows = [[0.0; STATE_DIM]; WINDOW];
        rows[..WINDOW - 1].copy_from_slice(&self.rows[1..]);
        rows[WINDOW - 1] = s.to_array();
        let valid = (self.valid + 1).min(WINDOW);
        for r in rows.iter_mut().take(WINDOW - valid) {
            *r = [0.0; STATE_DIM];
        }
        StateWindow { rows, valid }
    }

    pub fn mask(&self) -> [bool; WINDOW] {
        std::array::from_fn(|i| i >= WINDOW - self.valid)
    }

    pub fn masked_slots(&self) -> usize {
        WINDOW - self.valid
    }

    pub fn latest(&self) -> [f64; STATE_DIM] {
        self.rows[WINDOW - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: StateWindow,
    pub action: Action,
    /// Total reward after division by the reward scale.
    pub reward: f64,
    pub raw_reward: f64,
    pub next_state: StateWindow,
    pub terminal: Terminal,
}

/// What the simulator produced for one step, alongside the record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub t: f64,
    pub sim_pos: (f64, f64),
    pub sim_vel: (f64, f64),
    pub action: Action,
    pub rec_pos: (f64, f64),
    pub rec_vel: (f64, f64),
    /// Forward-difference acceleration of the recorded pedestrian.
    pub rec_accel: (f64, f64),
    pub sim_state: EnvState,
    pub rec_state: EnvState,
}

pub trait Policy {
    fn act(&mut self, window: &StateWindow) -> Result<Action>;
}

impl<F: FnMut(&StateWindow) -> Action> Policy for F {
    fn act(&mut self, window: &StateWindow) -> Result<Action> {
        Ok(self(window))
    }
}

/// Pedestrian and vehicle points over an event's critical window.
pub fn event_frames(event: &CriticalEvent) -> Result<Vec<(TrackPoint, TrackPoint)>> {
    let (f0, f1) = event.window_frames();
    let frames: Vec<(TrackPoint, TrackPoint)> = (f0..=f1)
        .map(|f| match (event.pair.pedestrian.at_frame(f), event.pair.vehicle.at_frame(f)) {
            (Some(p), Some(v)) => Ok((*p, *v)),
            _ => Err(Error::Data(format!("event {}: frame {f} missing", event.id()))),
        })
        .collect::<Result<_>>()?;
    if frames.len() < 2 {
        return Err(Error::InsufficientData(format!("event {} has no frame after onset", event.id())));
    }
    Ok(frames)
}

/// Stepwise episode over one critical event.
#[derive(Debug, Clone)]
pub struct Episode {
    frames: Vec<(TrackPoint, TrackPoint)>,
    k: usize,
    state: EnvState,
    window: StateWindow,
    ped_pos: (f64, f64),
    cfg: EpisodeConfig,
    variant: RewardVariant,
    done: bool,
}

impl Episode {
    pub fn new(event: &CriticalEvent, cfg: EpisodeConfig, variant: RewardVariant) -> Result<Self> {
        cfg.validate()?;
        if !(variant.epsilon > 0.0) {
            return Err(Error::InvalidArgument("reward epsilon must be positive".into()));
        }
        let frames = event_frames(event)?;
        let (p0, v0) = frames[0];
        let state = make_state(&p0, &v0);
        Ok(Episode { frames, k: 0, state, window: StateWindow::default().push(&state), ped_pos: p0.pos(), cfg, variant, done: false })
    }

    pub fn window(&self) -> &StateWindow {
        &self.window
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Number of transitions in a full-length episode.
    pub fn horizon(&self) -> usize {
        self.frames.len() - 1
    }

    pub fn frames(&self) -> &[(TrackPoint, TrackPoint)] {
        &self.frames
    }

    /// Recorded pedestrian accelerations that reproduce the recorded
    /// velocities under the step dynamics.
    pub fn recorded_actions(&self) -> Vec<Action> {
        let dt = self.cfg.dt;
        self.frames
            .windows(2)
            .map(|w| Action { alon: (w[1].0.vy - w[0].0.vy) / dt, alat: (w[1].0.vx - w[0].0.vx) / dt })
            .collect()
    }

    /// Applies an already clamped action.
    pub fn step(&mut self, action: Action) -> Result<(Transition, StepInfo)> {
        if self.done {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        let dt = self.cfg.dt;
        let (_, veh) = self.frames[self.k];
        let (ped_next, veh_next) = self.frames[self.k + 1];
        let mut next = step_dynamics(&self.state, &action, (veh.vx, veh.vy), dt)?;
        // the vehicle is replayed, so its displacement enters the relative distance here
        next.dlon -= veh_next.y - veh.y;
        next.dlat -= veh_next.x - veh.x;
        let sim_pos = (veh_next.x + next.dlat, veh_next.y + next.dlon);

        let mut actual = make_state(&ped_next, &veh_next);
        actual.dvlon = ped_next.vy - veh.vy;
        actual.dvlat = ped_next.vx - veh.vx;
        let core = core_reward(&next, &actual, &self.variant);

        let gap = next.dlon.hypot(next.dlat);
        let goal = self.frames.last().expect("non-empty").0.pos();
        let to_goal = (sim_pos.0 - goal.0).hypot(sim_pos.1 - goal.1);
        let last = self.k + 2 == self.frames.len();
        let (event, terminal) = if gap < self.cfg.collision_dist {
            (StepEvent::Collision, Terminal::Collision)
        } else if to_goal < self.cfg.goal_radius {
            (StepEvent::Goal, Terminal::Goal)
        } else if last {
            (StepEvent::None, Terminal::HorizonEnd)
        } else {
            (StepEvent::None, Terminal::No)
        };
        let raw = total_reward(core, event, &self.cfg);
        if !next.is_finite() || !raw.is_finite() {
            return Err(Error::Contract(format!("non-finite state or reward at step {}", self.k)));
        }
        let next_window = self.window.push(&next);
        let (ped_now, _) = self.frames[self.k];
        let info = StepInfo {
            t: ped_next.t,
            sim_pos,
            sim_vel: (next.vlat_ped, next.vlon_ped),
            action,
            rec_pos: ped_next.pos(),
            rec_vel: (ped_next.vx, ped_next.vy),
            rec_accel: ((ped_next.vx - ped_now.vx) / dt, (ped_next.vy - ped_now.vy) / dt),
            sim_state: next,
            rec_state: actual,
        };
        let tr = Transition { state: self.window, action, reward: raw / self.cfg.reward_scale, raw_reward: raw, next_state: next_window, terminal };
        self.state = next;
        self.window = next_window;
        self.ped_pos = sim_pos;
        self.k += 1;
        self.done = terminal.is_terminal();
        Ok((tr, info))
    }
}

/// Adds N(0, sigma^2) per axis and clamps to the action bounds.
pub fn explore(action: Action, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Action> {
    if sigma == 0.0 {
        return Ok(action.clamped());
    }
    let n = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(format!("noise sigma {sigma}: {e}")))?;
    Ok(Action { alon: action.alon + n.sample(rng), alat: action.alat + n.sample(rng) }.clamped())
}

/// Full episode with a fixed policy.
pub fn run_episode(
    event: &CriticalEvent,
    policy: &mut dyn Policy,
    variant: RewardVariant,
    cfg: EpisodeConfig,
    noise_sigma: f64,
    rng_seed: u64,
) -> Result<Vec<Transition>> {
    Ok(rollout(event, policy, variant, cfg, noise_sigma, rng_seed)?.into_iter().map(|(t, _)| t).collect())
}

/// Like [`run_episode`] but keeps the per-step simulation details.
pub fn rollout(
    event: &CriticalEvent,
    policy: &mut dyn Policy,
    variant: RewardVariant,
    cfg: EpisodeConfig,
    noise_sigma: f64,
    rng_seed: u64,
) -> Result<Vec<(Transition, StepInfo)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut ep = Episode::new(event, cfg, variant)?;
    let mut out = Vec::with_capacity(ep.horizon());
    while !ep.is_done() {
        let a = policy.act(ep.window())?;
        let a = explore(a, noise_sigma, &mut rng)?;
        out.push(ep.step(a)?);
    }
    Ok(out)
}

/// CSV rows `(episode, t, six state fields, alon, alat, reward, terminal)`;
/// the state is the one the action was taken from.
pub fn write_transitions_csv<W: Write>(writer: W, episodes: &[(usize, Vec<(Transition, StepInfo)>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["episode", "t", "dlon", "vlon_ped", "dvlon", "dlat", "vlat_ped", "dvlat", "alon", "alat", "reward", "terminal"])?;
    for (ep, steps) in episodes {
        for (tr, info) in steps {
            let s = tr.state.latest();
            let t0 = crate::traj::time_of(crate::traj::frame_of(info.t) - 1);
            let mut rec = vec![ep.to_string(), t0.to_string()];
            rec.extend(s.iter().map(|v| v.to_string()));
            rec.extend([tr.action.alon.to_string(), tr.action.alat.to_string(), tr.reward.to_string(), tr.terminal.label().to_string()]);
            w.write_record(rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
