//! Deterministic synthetic pedestrian-vehicle scenarios.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::curvttc::{curvttc_series, flag_critical, CurvTtcConfig};
use crate::error::{Error, Result};
use crate::traj::{
    min_point_distance, time_of, within_limits, AgentClass, InteractionPair, OutlierLimits, TrackPoint, Trajectory, DEFAULT_D_THRESH, DT,
};

/// Frames per scenario (11 s at 10 Hz).
pub const FRAMES: usize = 110;
const MAX_ATTEMPTS: usize = 500;
const SEPARATION_MARGIN: f64 = 0.3;
const VEHICLE_BRAKE: f64 = 3.0;
const VEHICLE_RESUME: f64 = 2.0;
const VEHICLE_CREEP: f64 = 0.3;
const PED_BRAKE: f64 = 2.0;
const PED_RESUME: f64 = 1.5;
const PED_CREEP: f64 = 0.1;
const CLEARANCE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemplateKind {
    StraightCrossing,
    HeadOn,
    TurningArc,
}

impl TemplateKind {
    pub fn label(self) -> &'static str {
        match self {
            TemplateKind::StraightCrossing => "crossing",
            TemplateKind::HeadOn => "headon",
            TemplateKind::TurningArc => "arc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Maneuver {
    None,
    VehicleYield,
    PedestrianYield,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTemplate {
    pub kind: TemplateKind,
    pub veh_speed: (f64, f64),
    pub ped_speed: (f64, f64),
    /// Angle between the vehicle heading and the pedestrian heading at the
    /// conflict point, degrees.
    pub approach_angle: (f64, f64),
    pub arc_radius: (f64, f64),
    /// Vehicle distance to the conflict point at the first frame, metres.
    pub initial_gap: (f64, f64),
    pub noise: f64,
    pub critical_fraction: f64,
    pub av_fraction: f64,
    /// Share of critical scenarios resolved by the vehicle yielding.
    pub vehicle_yield_fraction: f64,
    /// Vehicle moves away from the pedestrian along a shared line.
    pub diverging: bool,
    pub d_thresh: f64,
    pub seed: u64,
}

impl ScenarioTemplate {
    pub fn new(kind: TemplateKind, seed: u64) -> Self {
        let approach_angle = match kind {
            TemplateKind::StraightCrossing => (60.0, 120.0),
            TemplateKind::HeadOn => (140.0, 155.0),
            TemplateKind::TurningArc => (70.0, 110.0),
        };
        ScenarioTemplate {
            kind,
            veh_speed: (2.5, 4.0),
            ped_speed: (0.9, 1.8),
            approach_angle,
            arc_radius: (8.0, 15.0),
            initial_gap: (14.0, 22.0),
            noise: 0.0,
            critical_fraction: 0.5,
            av_fraction: 0.5,
            vehicle_yield_fraction: 0.5,
            diverging: false,
            d_thresh: DEFAULT_D_THRESH,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64), min: f64, max: f64| -> Result<()> {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= min && hi <= max) {
                return Err(Error::Generation(format!("{name} range ({lo}, {hi}) must be ordered within [{min}, {max}]")));
            }
            Ok(())
        };
        range("vehicle speed", self.veh_speed, 0.5, 4.0)?;
        range("pedestrian speed", self.ped_speed, 0.5, 4.0)?;
        range("approach angle", self.approach_angle, 10.0, 175.0)?;
        if self.kind == TemplateKind::TurningArc {
            range("arc radius", self.arc_radius, 2.0 + f64::EPSILON, 1e4)?;
        }
        range("initial gap", self.initial_gap, 0.0, 1e4)?;
        for (name, f) in [
            ("critical fraction", self.critical_fraction),
            ("AV fraction", self.av_fraction),
            ("vehicle-yield fraction", self.vehicle_yield_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Generation(format!("{name} {f} outside [0, 1]")));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.d_thresh > 0.0) {
            return Err(Error::Generation("noise must be non-negative and d_thresh positive".into()));
        }
        if !self.diverging {
            let earliest = self.initial_gap.0 / self.veh_speed.1;
            let latest = self.initial_gap.1 / self.veh_speed.0;
            if latest < MIN_CONFLICT_T || earliest > MAX_CONFLICT_T {
                return Err(Error::Generation(format!(
                    "initial gap ({}, {}) m at vehicle speeds ({}, {}) m/s puts the conflict at {earliest:.2}..{latest:.2} s; it must fall within {MIN_CONFLICT_T}..{MAX_CONFLICT_T} s",
                    self.initial_gap.0, self.initial_gap.1, self.veh_speed.0, self.veh_speed.1
                )));
            }
        }
        Ok(())
    }
}

const MIN_CONFLICT_T: f64 = 3.5;
const MAX_CONFLICT_T: f64 = 7.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthScenario {
    pub scenario_id: String,
    pub pedestrian: Trajectory,
    pub vehicle: Trajectory,
    pub intended_critical: bool,
    pub maneuver: Maneuver,
}

impl SynthScenario {
    pub fn pair(&self) -> InteractionPair {
        InteractionPair {
            pedestrian: self.pedestrian.clone(),
            vehicle: self.vehicle.clone(),
            vehicle_class: self.vehicle.agent_class,
            min_distance: min_point_distance(&self.pedestrian, &self.vehicle),
            overlap_window: (0.0, time_of(FRAMES as i64 - 1)),
        }
    }
}

pub fn trajectories(scenarios: &[SynthScenario]) -> Vec<Trajectory> {
    scenarios.iter().flat_map(|s| [s.pedestrian.clone(), s.vehicle.clone()]).collect()
}

/// Evenly spread selection of `round(p * n)` indices.
fn selected(i: usize, p: f64) -> bool {
    let f = |k: usize| (k as f64 * p + 0.5).floor();
    f(i + 1) > f(i)
}

/// Speed over time: cruise, brake to a creep speed, hold, resume.
#[derive(Debug, Clone, Copy)]
struct SpeedPlan {
    v0: f64,
    brake_at: f64,
    brake: f64,
    creep: f64,
    resume_at: f64,
    resume: f64,
}

impl SpeedPlan {
    fn constant(v0: f64) -> Self {
        SpeedPlan { v0, brake_at: f64::INFINITY, brake: 1.0, creep: v0, resume_at: f64::INFINITY, resume: 1.0 }
    }

    fn at(&self, t: f64) -> f64 {
        if t <= self.brake_at {
            return self.v0;
        }
        let reached = self.brake_at + (self.v0 - self.creep) / self.brake;
        if t < reached {
            return self.v0 - self.brake * (t - self.brake_at);
        }
        let resume_at = self.resume_at.max(reached);
        if t <= resume_at {
            return self.creep;
        }
        (self.creep + self.resume * (t - resume_at)).min(self.v0)
    }

    /// Speeds and trapezoid-integrated distances at every frame.
    fn sample(&self) -> (Vec<f64>, Vec<f64>) {
        let v: Vec<f64> = (0..FRAMES).map(|k| self.at(k as f64 * DT)).collect();
        let mut s = vec![0.0; FRAMES];
        for k in 1..FRAMES {
            s[k] = s[k - 1] + 0.5 * (v[k - 1] + v[k]) * DT;
        }
        (v, s)
    }
}

/// Path geometry with the conflict point at arc length zero.
#[derive(Debug, Clone, Copy)]
enum Path {
    Line { origin: (f64, f64), dir: (f64, f64) },
    Arc { center: (f64, f64), radius: f64, theta0: f64, sense: f64 },
}

impl Path {
    fn at(&self, s: f64) -> ((f64, f64), (f64, f64)) {
        match *self {
            Path::Line { origin, dir } => ((origin.0 + s * dir.0, origin.1 + s * dir.1), dir),
            Path::Arc { center, radius, theta0, sense } => {
                let th = theta0 + sense * s / radius;
                let pos = (center.0 + radius * th.cos(), center.1 + radius * th.sin());
                let tan = (-sense * th.sin(), sense * th.cos());
                (pos, tan)
            }
        }
    }
}

fn rotate((x, y): (f64, f64), a: f64) -> (f64, f64) {
    let (s, c) = a.sin_cos();
    (c * x - s * y, s * x + c * y)
}

/// Samples a trajectory that sits on the path's conflict point at `at_frame`.
fn build_track(
    scenario_id: &str,
    agent_id: &str,
    class: AgentClass,
    path: Path,
    speeds: &[f64],
    dist: &[f64],
    at_frame: usize,
    scene: (f64, (f64, f64)),
) -> Trajectory {
    let (rot, offset) = scene;
    let points = (0..FRAMES)
        .map(|k| {
            let (p, tan) = path.at(dist[k] - dist[at_frame]);
            let p = rotate(p, rot);
            let tan = rotate(tan, rot);
            TrackPoint {
                t: time_of(k as i64),
                x: p.0 + offset.0,
                y: p.1 + offset.1,
                vx: speeds[k] * tan.0,
                vy: speeds[k] * tan.1,
                heading: tan.1.atan2(tan.0),
            }
        })
        .collect();
    Trajectory { scenario_id: scenario_id.to_string(), agent_id: agent_id.to_string(), agent_class: class, points }
}

/// First frame at which the distance reaches `target`.
fn arrival_frame(dist: &[f64], target: f64) -> Option<usize> {
    dist.iter().position(|&s| s >= target - 1e-12)
}

fn axis_clear(angle: f64) -> bool {
    let m = angle.rem_euclid(FRAC_PI_2);
    m.min(FRAC_PI_2 - m) >= 10f64.to_radians()
}

/// Adds Gaussian position noise and recomputes velocities by central
/// differences. With `reintegrate`, positions are then rebuilt from the
/// first noisy point by trapezoidal integration of those velocities.
pub fn apply_noise(traj: &mut Trajectory, sigma: f64, reintegrate: bool, rng: &mut ChaCha8Rng) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let n = Normal::new(0.0, sigma).map_err(|e| Error::Generation(format!("noise sigma {sigma}: {e}")))?;
    let pts = &mut traj.points;
    for p in pts.iter_mut() {
        p.x += n.sample(rng);
        p.y += n.sample(rng);
    }
    let len = pts.len();
    if len < 2 {
        return Ok(());
    }
    let pos: Vec<(f64, f64)> = pts.iter().map(|p| p.pos()).collect();
    for k in 0..len {
        let (a, b, h) = if k == 0 {
            (0, 1, DT)
        } else if k == len - 1 {
            (len - 2, len - 1, DT)
        } else {
            (k - 1, k + 1, 2.0 * DT)
        };
        pts[k].vx = (pos[b].0 - pos[a].0) / h;
        pts[k].vy = (pos[b].1 - pos[a].1) / h;
        if pts[k].speed() > 1e-9 {
            pts[k].heading = pts[k].vy.atan2(pts[k].vx);
        }
    }
    if reintegrate {
        for k in 1..len {
            pts[k].x = pts[k - 1].x + 0.5 * (pts[k - 1].vx + pts[k].vx) * DT;
            pts[k].y = pts[k - 1].y + 0.5 * (pts[k - 1].vy + pts[k].vy) * DT;
        }
    }
    Ok(())
}

fn min_synchronized_distance(a: &Trajectory, b: &Trajectory) -> f64 {
    a.points.iter().zip(&b.points).map(|(p, q)| (p.x - q.x).hypot(p.y - q.y)).fold(f64::INFINITY, f64::min)
}

struct Draft {
    ped: Trajectory,
    veh: Trajectory,
}

fn draft(t: &ScenarioTemplate, id: &str, class: AgentClass, critical: bool, maneuver: Maneuver, rng: &mut ChaCha8Rng) -> Option<Draft> {
    let v_veh = rng.random_range(t.veh_speed.0..=t.veh_speed.1);
    let v_ped = rng.random_range(t.ped_speed.0..=t.ped_speed.1);
    let gap = rng.random_range(t.initial_gap.0..=t.initial_gap.1);
    let phi = rng.random_range(t.approach_angle.0..=t.approach_angle.1).to_radians() * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let rot = rng.random_range(0.0..2.0 * PI);
    let offset = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
    if !axis_clear(rot) || !axis_clear(rot + phi) {
        return None;
    }
    let scene = (rot, offset);

    if t.diverging {
        let veh_path = Path::Line { origin: (gap.max(t.d_thresh) * 1.0, 0.0), dir: (1.0, 0.0) };
        let ped_path = Path::Line { origin: (0.0, 0.0), dir: (-1.0, 0.0) };
        let (vv, sv) = SpeedPlan::constant(v_veh).sample();
        let (vp, sp) = SpeedPlan::constant(v_ped).sample();
        return Some(Draft {
            ped: build_track(id, "ped", AgentClass::Pedestrian, ped_path, &vp, &sp, 0, scene),
            veh: build_track(id, "veh", class, veh_path, &vv, &sv, 0, scene),
        });
    }

    let t_c = gap / v_veh;
    if !(MIN_CONFLICT_T..=MAX_CONFLICT_T).contains(&t_c) {
        return None;
    }
    let veh_path = match t.kind {
        TemplateKind::TurningArc => {
            let radius = rng.random_range(t.arc_radius.0..=t.arc_radius.1);
            let sense = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            // conflict point at the origin, heading +x
            Path::Arc { center: (0.0, sense * radius), radius, theta0: -sense * FRAC_PI_2, sense }
        }
        _ => Path::Line { origin: (0.0, 0.0), dir: (1.0, 0.0) },
    };
    let ped_path = Path::Line { origin: (0.0, 0.0), dir: (phi.cos(), phi.sin()) };

    let (veh_plan, ped_plan, veh_target, ped_target) = if critical {
        // distance along a path that leaves CLEARANCE metres to the other path
        let clear = CLEARANCE / phi.abs().sin().max(0.2);
        match maneuver {
            Maneuver::VehicleYield => {
                let stop = (v_veh * v_veh - VEHICLE_CREEP * VEHICLE_CREEP) / (2.0 * VEHICLE_BRAKE);
                let lead = (clear + stop) / v_veh + rng.random_range(0.2..1.0);
                let plan = SpeedPlan {
                    v0: v_veh,
                    brake_at: t_c - lead,
                    brake: VEHICLE_BRAKE,
                    creep: VEHICLE_CREEP,
                    resume_at: t_c + 0.5 + clear / v_ped,
                    resume: VEHICLE_RESUME,
                };
                (plan, SpeedPlan::constant(v_ped), v_veh * t_c, v_ped * t_c)
            }
            _ => {
                let stop = (v_ped * v_ped - PED_CREEP * PED_CREEP) / (2.0 * PED_BRAKE);
                let lead = (clear + stop) / v_ped + rng.random_range(0.2..0.8);
                let plan = SpeedPlan {
                    v0: v_ped,
                    brake_at: t_c - lead,
                    brake: PED_BRAKE,
                    creep: PED_CREEP,
                    resume_at: t_c + 1.0 + clear / v_veh,
                    resume: PED_RESUME,
                };
                (SpeedPlan::constant(v_veh), plan, v_veh * t_c, v_ped * t_c)
            }
        }
    } else {
        let shift = rng.random_range(3.5..5.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        (SpeedPlan::constant(v_veh), SpeedPlan::constant(v_ped), v_veh * t_c, v_ped * (t_c + shift))
    };
    if ped_target < 0.0 {
        return None;
    }
    let (vv, sv) = veh_plan.sample();
    let (vp, sp) = ped_plan.sample();
    let fv = arrival_frame(&sv, veh_target)?;
    let fp = arrival_frame(&sp, ped_target)?;
    if !(3..FRAMES - 3).contains(&fv) || !(3..FRAMES - 3).contains(&fp) {
        return None;
    }
    Some(Draft {
        ped: build_track(id, "ped", AgentClass::Pedestrian, ped_path, &vp, &sp, fp, scene),
        veh: build_track(id, "veh", class, veh_path, &vv, &sv, fv, scene),
    })
}

fn accept(t: &ScenarioTemplate, d: &Draft, critical: bool) -> bool {
    let limits = OutlierLimits::default();
    if within_limits(&d.ped, &limits).is_err() || within_limits(&d.veh, &limits).is_err() {
        return false;
    }
    if t.diverging {
        return !(min_point_distance(&d.ped, &d.veh) < t.d_thresh);
    }
    if !(min_point_distance(&d.ped, &d.veh) < t.d_thresh) {
        return false;
    }
    if min_synchronized_distance(&d.ped, &d.veh) < crate::curvttc::DEFAULT_THRESHOLD + SEPARATION_MARGIN {
        return false;
    }
    let pair = InteractionPair {
        pedestrian: d.ped.clone(),
        vehicle: d.veh.clone(),
        vehicle_class: d.veh.agent_class,
        min_distance: 0.0,
        overlap_window: (0.0, time_of(FRAMES as i64 - 1)),
    };
    match curvttc_series(&pair, &CurvTtcConfig::default()) {
        Ok(series) => flag_critical(&pair, series).is_some() == critical,
        Err(_) => false,
    }
}

/// Generates `count` scenarios. The `i`-th scenario draws from its own
/// stream of the template seed, so any scenario can be rebuilt alone.
pub fn generate(t: &ScenarioTemplate, count: usize) -> Result<Vec<SynthScenario>> {
    t.validate()?;
    if count == 0 {
        return Err(Error::Generation("count must be at least 1".into()));
    }
    (0..count).map(|i| generate_one(t, i)).collect()
}

pub fn generate_one(t: &ScenarioTemplate, i: usize) -> Result<SynthScenario> {
    let id = format!("{}-{i:04}", t.kind.label());
    let critical = !t.diverging && selected(i, t.critical_fraction);
    // AV slots are spread within the critical and subcritical groups separately
    let crit_before = if t.diverging { 0 } else { (i as f64 * t.critical_fraction + 0.5).floor() as usize };
    let rank = if critical { crit_before } else { i - crit_before };
    let class = if selected(rank, t.av_fraction) { AgentClass::AV } else { AgentClass::HDV };
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    rng.set_stream(i as u64 + 1);
    let maneuver = match critical {
        false => Maneuver::None,
        true if rng.random_bool(t.vehicle_yield_fraction) => Maneuver::VehicleYield,
        true => Maneuver::PedestrianYield,
    };
    for _ in 0..MAX_ATTEMPTS {
        let Some(mut d) = draft(t, &id, class, critical, maneuver, &mut rng) else { continue };
        apply_noise(&mut d.ped, t.noise, true, &mut rng)?;
        apply_noise(&mut d.veh, t.noise, false, &mut rng)?;
        if accept(t, &d, critical) {
            return Ok(SynthScenario { scenario_id: id, pedestrian: d.ped, vehicle: d.veh, intended_critical: critical, maneuver });
        }
    }
    let hint = if critical && t.noise > 0.0 {
        "; three-point CurvTTC fits rarely stay critical above a few millimetres of noise"
    } else {
        ""
    };
    Err(Error::Generation(format!(
        "scenario {id}: no feasible {} draw in {MAX_ATTEMPTS} attempts (noise {} m, d_thresh {} m){hint}",
        if critical { "critical" } else { "subcritical" },
        t.noise,
        t.d_thresh
    )))
}

/// Square-wave acceleration pattern shared by planted-lag pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagPattern {
    pub start: f64,
    pub segment: f64,
    pub amplitude: f64,
}

impl Default for LagPattern {
    fn default() -> Self {
        LagPattern { start: 3.5, segment: 0.4, amplitude: 3.0 }
    }
}

const LAG_SIGNS: [f64; 10] = [1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0];

impl LagPattern {
    fn accel(&self, t: f64) -> f64 {
        let rel = t - self.start;
        if rel < 0.0 {
            return 0.0;
        }
        let seg = (rel / self.segment + 1e-9).floor() as usize;
        LAG_SIGNS.get(seg).map_or(0.0, |s| s * self.amplitude)
    }

    pub fn duration(&self) -> f64 {
        self.segment * LAG_SIGNS.len() as f64
    }
}

fn lag_track(id: &str, agent: &str, class: AgentClass, start: (f64, f64), vel0: (f64, f64), dir: (f64, f64), p: &LagPattern, delay: f64) -> Trajectory {
    let n = FRAMES;
    let mut v = vec![vel0; n];
    for k in 1..n {
        // acceleration is constant over each frame interval
        let a = p.accel((k - 1) as f64 * DT - delay + 0.5 * DT);
        v[k] = (v[k - 1].0 + a * dir.0 * DT, v[k - 1].1 + a * dir.1 * DT);
    }
    let mut pos = vec![start; n];
    for k in 1..n {
        pos[k] = (pos[k - 1].0 + 0.5 * (v[k - 1].0 + v[k].0) * DT, pos[k - 1].1 + 0.5 * (v[k - 1].1 + v[k].1) * DT);
    }
    let points = (0..n)
        .map(|k| TrackPoint { t: time_of(k as i64), x: pos[k].0, y: pos[k].1, vx: v[k].0, vy: v[k].1, heading: v[k].1.atan2(v[k].0) })
        .collect();
    Trajectory { scenario_id: id.to_string(), agent_id: agent.to_string(), agent_class: class, points }
}

/// A vehicle runs the square-wave pattern; the pedestrian applies the same
/// acceleration vector `lag` seconds later. Both tracks get independent
/// position noise of `noise` metres.
pub fn planted_lag_pair(lag: f64, noise: f64, pattern: &LagPattern, seed: u64) -> Result<InteractionPair> {
    if !(lag >= 0.0) || pattern.start + lag + pattern.duration() > time_of(FRAMES as i64 - 3) {
        return Err(Error::Generation(format!("lag {lag} s does not fit the {} s window", time_of(FRAMES as i64))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = rng.random_range(0.0..2.0 * PI);
    let dir = rotate((1.0, 0.0), rot);
    let side = rotate((0.0, 1.0), rot);
    let v_veh = rng.random_range(2.5..3.5);
    let v_ped = rng.random_range(1.0..1.6);
    let id = format!("lag-{}", (lag * 10.0).round() as i64);
    let mut veh = lag_track(&id, "veh", AgentClass::HDV, (0.0, 0.0), (v_veh * dir.0, v_veh * dir.1), dir, pattern, 0.0);
    let ped_start = (-15.0 * side.0 + 5.0 * dir.0, -15.0 * side.1 + 5.0 * dir.1);
    let mut ped = lag_track(&id, "ped", AgentClass::Pedestrian, ped_start, (v_ped * side.0, v_ped * side.1), dir, pattern, lag);
    apply_noise(&mut veh, noise, false, &mut rng)?;
    apply_noise(&mut ped, noise, false, &mut rng)?;
    Ok(InteractionPair {
        min_distance: min_point_distance(&ped, &veh),
        pedestrian: ped,
        vehicle: veh,
        vehicle_class: AgentClass::HDV,
        overlap_window: (0.0, time_of(FRAMES as i64 - 1)),
    })
}
