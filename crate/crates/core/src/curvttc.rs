//! Curvilinear time-to-collision: circular-arc vehicle prediction,
//! quadratic pedestrian interpolation and lockstep collision search.

use std::io::Write;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::traj::{InteractionPair, DT};

pub const DEFAULT_THRESHOLD: f64 = 1.3;
pub const DEFAULT_HORIZON: f64 = 10.0;
pub const DEFAULT_STEP: f64 = 0.1;
pub const CRITICAL_TTC: f64 = 5.0;
pub const CRITICAL_MIN_FRAMES: usize = 10;
/// Angle between velocity directions above which a conflict is frontal.
pub const FRONTAL_ANGLE_DEG: f64 = 135.0;

const COINCIDENT_TOL: f64 = 1e-6;
const COLLINEAR_TOL: f64 = 1e-9;
const NEGLIGIBLE_SPEED: f64 = 1e-9;

type P2 = (f64, f64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode")]
pub enum ArcPath {
    Arc { center: P2, radius: f64, start_angle: f64, angular_rate: f64 },
    Line { origin: P2, direction: P2, speed: f64 },
}

impl ArcPath {
    /// Position `tau` seconds after the latest fit point.
    pub fn position(&self, tau: f64) -> P2 {
        match *self {
            ArcPath::Arc { center, radius, start_angle, angular_rate } => {
                let th = start_angle + angular_rate * tau;
                (center.0 + radius * th.cos(), center.1 + radius * th.sin())
            }
            ArcPath::Line { origin, direction, speed } => (origin.0 + direction.0 * speed * tau, origin.1 + direction.1 * speed * tau),
        }
    }

    pub fn velocity(&self, tau: f64) -> P2 {
        match *self {
            ArcPath::Arc { radius, start_angle, angular_rate, .. } => {
                let th = start_angle + angular_rate * tau;
                (-radius * angular_rate * th.sin(), radius * angular_rate * th.cos())
            }
            ArcPath::Line { direction, speed, .. } => (direction.0 * speed, direction.1 * speed),
        }
    }

    pub fn speed(&self) -> f64 {
        match *self {
            ArcPath::Arc { radius, angular_rate, .. } => radius * angular_rate.abs(),
            ArcPath::Line { speed, .. } => speed,
        }
    }

    /// Distance travelled along the path after `tau` seconds.
    pub fn arc_length(&self, tau: f64) -> f64 {
        self.speed() * tau
    }
}

/// Circle through three consecutive samples, traversed p1 -> p3 in `2 dt`.
/// Collinear points give a straight line; coincident points a stationary one.
pub fn fit_arc(p1: P2, p2: P2, p3: P2, dt: f64) -> ArcPath {
    let d12 = dist(p1, p2);
    let d23 = dist(p2, p3);
    let d13 = dist(p1, p3);
    let spread = d12.max(d23).max(d13);
    if spread <= COINCIDENT_TOL {
        return ArcPath::Line { origin: p3, direction: (1.0, 0.0), speed: 0.0 };
    }
    let det = 2.0 * (p1.0 * (p2.1 - p3.1) + p2.0 * (p3.1 - p1.1) + p3.0 * (p1.1 - p2.1));
    if det.abs() < COLLINEAR_TOL * spread * spread {
        let (dx, dy) = (p3.0 - p1.0, p3.1 - p1.1);
        let len = dx.hypot(dy);
        if len <= COINCIDENT_TOL {
            let (ex, ey) = (p2.0 - p1.0, p2.1 - p1.1);
            let l2 = ex.hypot(ey);
            return ArcPath::Line { origin: p3, direction: (ex / l2, ey / l2), speed: 0.0 };
        }
        return ArcPath::Line { origin: p3, direction: (dx / len, dy / len), speed: len / (2.0 * dt) };
    }
    let s1 = p1.0 * p1.0 + p1.1 * p1.1;
    let s2 = p2.0 * p2.0 + p2.1 * p2.1;
    let s3 = p3.0 * p3.0 + p3.1 * p3.1;
    let cx = (s1 * (p2.1 - p3.1) + s2 * (p3.1 - p1.1) + s3 * (p1.1 - p2.1)) / det;
    let cy = (s1 * (p3.0 - p2.0) + s2 * (p1.0 - p3.0) + s3 * (p2.0 - p1.0)) / det;
    let center = (cx, cy);
    let radius = dist(center, p3);
    let th1 = (p1.1 - cy).atan2(p1.0 - cx);
    let th3 = (p3.1 - cy).atan2(p3.0 - cx);
    let tau = std::f64::consts::TAU;
    // positive det means p1 -> p2 -> p3 turns counter-clockwise
    let sweep = if det > 0.0 { (th3 - th1).rem_euclid(tau) } else { -(th1 - th3).rem_euclid(tau) };
    ArcPath::Arc { center, radius, start_angle: th3, angular_rate: sweep / (2.0 * dt) }
}

fn dist(a: P2, b: P2) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Per-axis quadratic through three samples at `tau = 0, dt, 2 dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadPath {
    pub coeffs_x: [f64; 3],
    pub coeffs_y: [f64; 3],
    /// Time of the latest fit point relative to the anchor (`2 dt`).
    pub now: f64,
}

impl QuadPath {
    pub fn position(&self, tau: f64) -> P2 {
        let [ax, bx, cx] = self.coeffs_x;
        let [ay, by, cy] = self.coeffs_y;
        ((ax * tau + bx) * tau + cx, (ay * tau + by) * tau + cy)
    }

    pub fn velocity(&self, tau: f64) -> P2 {
        (2.0 * self.coeffs_x[0] * tau + self.coeffs_x[1], 2.0 * self.coeffs_y[0] * tau + self.coeffs_y[1])
    }
}

pub fn fit_quadratic(p1: P2, p2: P2, p3: P2, dt: f64) -> QuadPath {
    let axis = |a: f64, b: f64, c: f64| {
        let qa = (a - 2.0 * b + c) / (2.0 * dt * dt);
        let qb = (b - a) / dt - qa * dt;
        [qa, qb, a]
    };
    QuadPath { coeffs_x: axis(p1.0, p2.0, p3.0), coeffs_y: axis(p1.1, p2.1, p3.1), now: 2.0 * dt }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConflictType {
    Frontal,
    Lateral,
    None,
}

impl ConflictType {
    pub fn label(self) -> &'static str {
        match self {
            ConflictType::Frontal => "frontal",
            ConflictType::Lateral => "lateral",
            ConflictType::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvTtcSample {
    pub t: f64,
    #[serde(serialize_with = "ser_ttc", deserialize_with = "de_ttc")]
    pub value: f64,
    pub conflict_type: ConflictType,
    pub projected_collision_point: Option<P2>,
}

impl CurvTtcSample {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

/// Formats a CurvTTC value with `+inf` written as `inf`.
pub fn format_ttc(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        v.to_string()
    }
}

fn ser_ttc<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_ttc<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Raw::Str(s) => Err(serde::de::Error::custom(format!("bad CurvTTC value `{s}`"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvTtcConfig {
    pub threshold: f64,
    pub horizon: f64,
    pub step: f64,
}

impl Default for CurvTtcConfig {
    fn default() -> Self {
        CurvTtcConfig { threshold: DEFAULT_THRESHOLD, horizon: DEFAULT_HORIZON, step: DEFAULT_STEP }
    }
}

impl CurvTtcConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("threshold", self.threshold), ("horizon", self.horizon), ("step", self.step)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Steps both predictions forward together and returns the first time
/// their separation drops below the threshold, refined by bisection
/// inside the first breaching step.
pub fn curvttc_at(t: f64, veh: &ArcPath, ped: &QuadPath, cfg: &CurvTtcConfig) -> Result<CurvTtcSample> {
    cfg.validate()?;
    let gap = |tau: f64| dist(veh.position(tau), ped.position(ped.now + tau));
    if gap(0.0) < cfg.threshold {
        return Err(Error::DegenerateStart(format!(
            "agents already within {} m at t={t} (vehicle speed {})",
            cfg.threshold,
            veh.speed()
        )));
    }
    let steps = (cfg.horizon / cfg.step - 1e-9).ceil() as usize;
    let mut prev = 0.0;
    let mut hit = None;
    for k in 1..=steps {
        let tau = (k as f64 * cfg.step).min(cfg.horizon);
        if gap(tau) < cfg.threshold {
            let (mut lo, mut hi) = (prev, tau);
            for _ in 0..100 {
                if hi - lo <= 1e-12 {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                if gap(mid) < cfg.threshold {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            hit = Some(hi);
            break;
        }
        prev = tau;
    }
    let Some(tau) = hit else {
        return Ok(CurvTtcSample { t, value: f64::INFINITY, conflict_type: ConflictType::None, projected_collision_point: None });
    };
    let speed = veh.speed();
    let value = if speed > 0.0 { veh.arc_length(tau) / speed } else { tau };
    let vv = veh.velocity(tau);
    let pv = ped.velocity(ped.now + tau);
    let (nv, np) = (vv.0.hypot(vv.1), pv.0.hypot(pv.1));
    let conflict_type = if np <= NEGLIGIBLE_SPEED {
        ConflictType::Frontal
    } else if nv <= NEGLIGIBLE_SPEED {
        ConflictType::Lateral
    } else {
        let cos = (vv.0 * pv.0 + vv.1 * pv.1) / (nv * np);
        if cos < FRONTAL_ANGLE_DEG.to_radians().cos() {
            ConflictType::Frontal
        } else {
            ConflictType::Lateral
        }
    };
    Ok(CurvTtcSample { t, value, conflict_type, projected_collision_point: Some(veh.position(tau)) })
}

/// One sample per overlap frame that has two predecessors for both agents.
pub fn curvttc_series(pair: &InteractionPair, cfg: &CurvTtcConfig) -> Result<Vec<CurvTtcSample>> {
    cfg.validate()?;
    let pts = pair.aligned()?;
    if pts.len() < 3 {
        return Err(Error::InsufficientData(format!("pair {} overlaps for {} frame(s); need 3", pair.id(), pts.len())));
    }
    pts.windows(3)
        .map(|w| {
            let veh = fit_arc(w[0].1.pos(), w[1].1.pos(), w[2].1.pos(), DT);
            let ped = fit_quadratic(w[0].0.pos(), w[1].0.pos(), w[2].0.pos(), DT);
            curvttc_at(w[2].0.t, &veh, &ped, cfg)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CriticalRun {
    pub start: usize,
    pub len: usize,
}

/// First run of at least ten consecutive samples below 5 s.
pub fn find_critical_run(series: &[CurvTtcSample]) -> Option<CriticalRun> {
    let mut i = 0;
    while i < series.len() {
        if series[i].value < CRITICAL_TTC {
            let start = i;
            while i < series.len() && series[i].value < CRITICAL_TTC {
                i += 1;
            }
            if i - start >= CRITICAL_MIN_FRAMES {
                return Some(CriticalRun { start, len: i - start });
            }
        } else {
            i += 1;
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalEvent {
    pub pair: InteractionPair,
    pub onset_t: f64,
    pub frames_below_5s: usize,
    pub curvttc_series: Vec<CurvTtcSample>,
}

impl CriticalEvent {
    pub fn id(&self) -> String {
        self.pair.id()
    }

    /// Absolute frames `[onset, onset + frames_below_5s - 1]`.
    pub fn window_frames(&self) -> (i64, i64) {
        let f0 = crate::traj::frame_of(self.onset_t);
        (f0, f0 + self.frames_below_5s as i64 - 1)
    }
}

pub fn flag_critical(pair: &InteractionPair, series: Vec<CurvTtcSample>) -> Option<CriticalEvent> {
    let run = find_critical_run(&series)?;
    Some(CriticalEvent { pair: pair.clone(), onset_t: series[run.start].t, frames_below_5s: run.len, curvttc_series: series })
}

/// Writes `pair_id,t,curvttc,conflict_type` rows.
pub fn write_series_csv<W: Write>(writer: W, rows: &[(String, Vec<CurvTtcSample>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["pair_id", "t", "curvttc", "conflict_type"])?;
    for (id, series) in rows {
        for s in series {
            w.write_record([id.clone(), s.t.to_string(), format_ttc(s.value), s.conflict_type.label().to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: P2, b: P2) -> bool {
        dist(a, b) < 1e-9
    }

    #[test]
    fn arc_examples() {
        match fit_arc((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), 0.1) {
            ArcPath::Arc { center, radius, .. } => {
                assert!(close(center, (0.0, 0.0)));
                assert!((radius - 1.0).abs() < 1e-12);
            }
            other => panic!("expected arc, got {other:?}"),
        }
        match fit_arc((0.0, 0.0), (1.0, 0.0), (2.0, 0.0), 0.1) {
            ArcPath::Line { direction, speed, .. } => {
                assert!(close(direction, (1.0, 0.0)));
                assert!((speed - 10.0).abs() < 1e-12);
            }
            other => panic!("expected line, got {other:?}"),
        }
        match fit_arc((0.0, 0.0), (1.0, 1.0), (2.0, 0.0), 0.1) {
            ArcPath::Arc { center, radius, .. } => {
                assert!(close(center, (1.0, 0.0)));
                assert!((radius - 1.0).abs() < 1e-12);
            }
            other => panic!("expected arc, got {other:?}"),
        }
        assert_eq!(fit_arc((3.0, 4.0), (3.0, 4.0), (3.0, 4.0), 0.1).speed(), 0.0);
    }

    #[test]
    fn arc_traverses_points_in_order() {
        let dt = 0.1;
        let (p1, p2, p3) = ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0));
        let path = fit_arc(p1, p2, p3, dt);
        assert!(close(path.position(0.0), p3));
        assert!(close(path.position(-dt), p2));
        assert!(close(path.position(-2.0 * dt), p1));
        let cw = fit_arc(p3, p2, p1, dt);
        assert!(close(cw.position(-dt), p2));
        assert!(close(cw.position(-2.0 * dt), p3));
    }

    #[test]
    fn quadratic_examples() {
        let q = fit_quadratic((0.0, 0.0), (0.1, 0.01), (0.2, 0.04), 0.1);
        assert!((q.coeffs_x[0]).abs() < 1e-12 && (q.coeffs_x[1] - 1.0).abs() < 1e-12);
        assert!((q.coeffs_y[0] - 1.0).abs() < 1e-9 && q.coeffs_y[1].abs() < 1e-9);
        let s = fit_quadratic((2.0, 3.0), (2.0, 3.0), (2.0, 3.0), 0.1);
        assert_eq!(s.coeffs_x, [0.0, 0.0, 2.0]);
        let l = fit_quadratic((0.0, 0.0), (0.1, 0.2), (0.2, 0.4), 0.1);
        assert!(l.coeffs_x[0].abs() < 1e-9 && l.coeffs_y[0].abs() < 1e-9);
    }

    fn line(origin: P2, direction: P2, speed: f64) -> ArcPath {
        ArcPath::Line { origin, direction, speed }
    }

    fn still(p: P2) -> QuadPath {
        fit_quadratic(p, p, p, 0.1)
    }

    #[test]
    fn head_on_examples() {
        let cfg = CurvTtcConfig::default();
        let s = curvttc_at(0.0, &line((0.0, 0.0), (0.0, 1.0), 10.0), &still((0.0, 21.3)), &cfg).unwrap();
        assert!((s.value - 2.0).abs() < 1e-6, "{}", s.value);
        assert_eq!(s.conflict_type, ConflictType::Frontal);

        let walker = fit_quadratic((0.0, 23.5), (0.0, 23.4), (0.0, 23.3), 0.1);
        let s = curvttc_at(0.0, &line((0.0, 0.0), (0.0, 1.0), 10.0), &walker, &cfg).unwrap();
        assert!((s.value - 2.0).abs() < 1e-6, "{}", s.value);
        assert_eq!(s.conflict_type, ConflictType::Frontal);

        let away = curvttc_at(0.0, &line((0.0, 0.0), (0.0, -1.0), 10.0), &still((0.0, 21.3)), &cfg).unwrap();
        assert!(away.value.is_infinite());
        assert_eq!(away.conflict_type, ConflictType::None);
        assert!(away.projected_collision_point.is_none());
    }

    #[test]
    fn degenerate_start_is_reported() {
        let cfg = CurvTtcConfig::default();
        let r = curvttc_at(0.0, &line((0.0, 0.0), (1.0, 0.0), 0.0), &still((0.5, 0.0)), &cfg);
        assert!(matches!(r, Err(Error::DegenerateStart(_))));
    }

    #[test]
    fn perpendicular_crossing_is_lateral() {
        let cfg = CurvTtcConfig::default();
        let ped = fit_quadratic((-5.2, 20.0), (-5.1, 20.0), (-5.0, 20.0), 0.1);
        let s = curvttc_at(0.0, &line((0.0, 0.0), (0.0, 1.0), 4.0), &ped, &cfg).unwrap();
        assert!(s.value.is_finite());
        assert_eq!(s.conflict_type, ConflictType::Lateral);
    }

    fn samples(values: &[f64]) -> Vec<CurvTtcSample> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| CurvTtcSample {
                t: i as f64 / 10.0,
                value: v,
                conflict_type: if v.is_finite() { ConflictType::Lateral } else { ConflictType::None },
                projected_collision_point: None,
            })
            .collect()
    }

    #[test]
    fn critical_run_examples() {
        let run = find_critical_run(&samples(&[4.9; 10])).unwrap();
        assert_eq!(run, CriticalRun { start: 0, len: 10 });
        let mut nine = vec![1.0; 9];
        nine.push(f64::INFINITY);
        assert!(find_critical_run(&samples(&nine)).is_none());
        let alt: Vec<f64> = (0..30).map(|i| if i % 2 == 0 { 4.0 } else { 6.0 }).collect();
        assert!(find_critical_run(&samples(&alt)).is_none());
        let mut v = vec![9.0, 9.0];
        v.extend([3.0; 12]);
        v.push(7.0);
        assert_eq!(find_critical_run(&samples(&v)), Some(CriticalRun { start: 2, len: 12 }));
    }

    #[test]
    fn inf_serializes_as_string() {
        let s = samples(&[f64::INFINITY, 2.5]);
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("\"inf\""));
        let back: Vec<CurvTtcSample> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }
}
