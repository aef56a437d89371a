//! Trajectory records, CSV ingestion, derived kinematics, outlier filtering
//! and high-proximity interaction extraction.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling interval of the source data (10 Hz).
pub const DT: f64 = 0.1;
pub const MAX_SPEED: f64 = 90.0;
pub const MAX_ACCEL: f64 = 7.0;
pub const DEFAULT_D_THRESH: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgentClass {
    Pedestrian,
    AV,
    HDV,
}

impl AgentClass {
    pub fn is_vehicle(self) -> bool {
        !matches!(self, AgentClass::Pedestrian)
    }

    pub fn label(self) -> &'static str {
        match self {
            AgentClass::Pedestrian => "pedestrian",
            AgentClass::AV => "AV",
            AgentClass::HDV => "HDV",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub heading: f64,
}

impl TrackPoint {
    pub fn frame(&self) -> i64 {
        frame_of(self.t)
    }

    pub fn pos(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }
}

pub fn frame_of(t: f64) -> i64 {
    (t / DT).round() as i64
}

pub fn time_of(frame: i64) -> f64 {
    frame as f64 / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub scenario_id: String,
    pub agent_id: String,
    pub agent_class: AgentClass,
    pub points: Vec<TrackPoint>,
}

impl Trajectory {
    pub fn start_frame(&self) -> Option<i64> {
        self.points.first().map(TrackPoint::frame)
    }

    pub fn end_frame(&self) -> Option<i64> {
        self.points.last().map(TrackPoint::frame)
    }

    /// Point at an absolute frame, for contiguous trajectories.
    pub fn at_frame(&self, frame: i64) -> Option<&TrackPoint> {
        let start = self.start_frame()?;
        let idx = usize::try_from(frame - start).ok()?;
        self.points.get(idx).filter(|p| p.frame() == frame)
    }

    pub fn is_contiguous(&self) -> bool {
        self.points.windows(2).all(|w| w[1].frame() - w[0].frame() == 1)
    }

    /// Splits at missing timesteps into contiguous pieces.
    pub fn split_segments(&self) -> Vec<Trajectory> {
        let mut out = Vec::new();
        let mut cur: Vec<TrackPoint> = Vec::new();
        for p in &self.points {
            if let Some(last) = cur.last() {
                if p.frame() - last.frame() != 1 {
                    out.push(self.with_points(std::mem::take(&mut cur)));
                }
            }
            cur.push(*p);
        }
        if !cur.is_empty() {
            out.push(self.with_points(cur));
        }
        out
    }

    fn with_points(&self, points: Vec<TrackPoint>) -> Trajectory {
        Trajectory { scenario_id: self.scenario_id.clone(), agent_id: self.agent_id.clone(), agent_class: self.agent_class, points }
    }
}

/// Header names for each logical column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub scenario_id: String,
    pub track_id: String,
    pub object_type: String,
    pub timestep: String,
    pub position_x: String,
    pub position_y: String,
    pub heading: String,
    pub velocity_x: String,
    pub velocity_y: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            scenario_id: "scenario_id".into(),
            track_id: "track_id".into(),
            object_type: "object_type".into(),
            timestep: "timestep".into(),
            position_x: "position_x".into(),
            position_y: "position_y".into(),
            heading: "heading".into(),
            velocity_x: "velocity_x".into(),
            velocity_y: "velocity_y".into(),
        }
    }
}

impl CsvSchema {
    fn columns(&self) -> [&str; 9] {
        [
            &self.scenario_id,
            &self.track_id,
            &self.object_type,
            &self.timestep,
            &self.position_x,
            &self.position_y,
            &self.heading,
            &self.velocity_x,
            &self.velocity_y,
        ]
    }
}

/// Maps an `object_type` cell to an agent class. Types other than
/// pedestrians and road vehicles are ignored.
fn classify(object_type: &str, track_id: &str) -> Option<AgentClass> {
    match object_type.trim().to_ascii_lowercase().as_str() {
        "pedestrian" => Some(AgentClass::Pedestrian),
        "av" => Some(AgentClass::AV),
        "vehicle" | "hdv" | "bus" => Some(if track_id == "AV" { AgentClass::AV } else { AgentClass::HDV }),
        _ => None,
    }
}

fn object_type_token(class: AgentClass) -> &'static str {
    match class {
        AgentClass::Pedestrian => "pedestrian",
        AgentClass::AV => "av",
        AgentClass::HDV => "vehicle",
    }
}

pub fn load_scenario(path: &Path, schema: &CsvSchema) -> Result<Vec<Trajectory>> {
    let file = std::fs::File::open(path)?;
    read_trajectories(file, schema).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parses trajectories from CSV text. Output is ordered by
/// `(scenario_id, track_id)`; points keep file order, which must have
/// strictly increasing timesteps.
pub fn read_trajectories<R: Read>(reader: R, schema: &CsvSchema) -> Result<Vec<Trajectory>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 9];
    for (slot, name) in idx.iter_mut().zip(schema.columns()) {
        *slot = headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }
    let mut tracks: BTreeMap<(String, String), (AgentClass, Vec<(i64, TrackPoint)>)> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        let field = |k: usize| rec.get(idx[k]).unwrap_or("");
        let (scenario, track, otype) = (field(0), field(1), field(2));
        let Some(class) = classify(otype, track) else { continue };
        let timestep = parse_timestep(field(3)).ok_or_else(|| Error::Data(format!("row {row}: bad timestep `{}`", field(3))))?;
        let num = |k: usize, name: &str| -> Result<f64> {
            let s = field(k);
            let v: f64 = s.parse().map_err(|_| Error::Data(format!("row {row}: bad {name} `{s}`")))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("row {row}: non-finite {name}")));
            }
            Ok(v)
        };
        let p = TrackPoint {
            t: time_of(timestep),
            x: num(4, "position_x")?,
            y: num(5, "position_y")?,
            heading: num(6, "heading")?,
            vx: num(7, "velocity_x")?,
            vy: num(8, "velocity_y")?,
        };
        let entry = tracks.entry((scenario.to_string(), track.to_string())).or_insert_with(|| (class, Vec::new()));
        if entry.0 != class {
            return Err(Error::Data(format!("track `{track}` changes object type at row {row}")));
        }
        if let Some(&(last, _)) = entry.1.last() {
            if timestep <= last {
                return Err(Error::Data(format!("track `{track}`: non-monotone timestep {timestep} after {last}")));
            }
        }
        entry.1.push((timestep, p));
    }
    Ok(tracks
        .into_iter()
        .map(|((scenario_id, agent_id), (agent_class, pts))| Trajectory {
            scenario_id,
            agent_id,
            agent_class,
            points: pts.into_iter().map(|(_, p)| p).collect(),
        })
        .collect())
}

fn parse_timestep(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return (v >= 0).then_some(v);
    }
    let f: f64 = s.parse().ok()?;
    (f >= 0.0 && f.fract() == 0.0 && f < 1e15).then_some(f as i64)
}

/// Writes trajectories in the input schema. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_trajectories<W: Write>(writer: W, trajs: &[Trajectory]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CsvSchema::default().columns())?;
    for tr in trajs {
        for p in &tr.points {
            w.write_record([
                tr.scenario_id.clone(),
                tr.agent_id.clone(),
                object_type_token(tr.agent_class).to_string(),
                p.frame().to_string(),
                p.x.to_string(),
                p.y.to_string(),
                p.heading.to_string(),
                p.vx.to_string(),
                p.vy.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_scenario(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_trajectories(std::io::BufWriter::new(file), trajs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kinematics {
    pub speed: f64,
    pub ax: f64,
    pub ay: f64,
}

/// Speeds and finite-difference accelerations (central inside, one-sided
/// at the ends). Expects a contiguous trajectory.
pub fn derive_kinematics(traj: &Trajectory) -> Result<Vec<Kinematics>> {
    let pts = &traj.points;
    let n = pts.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("track `{}` has {n} point(s); need 2", traj.agent_id)));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (lo, hi) = if i == 0 {
            (0, 1)
        } else if i == n - 1 {
            (n - 2, n - 1)
        } else {
            (i - 1, i + 1)
        };
        let span = (hi - lo) as f64 * DT;
        out.push(Kinematics {
            speed: pts[i].speed(),
            ax: (pts[hi].vx - pts[lo].vx) / span,
            ay: (pts[hi].vy - pts[lo].vy) / span,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierLimits {
    pub max_speed: f64,
    pub max_accel: f64,
}

impl Default for OutlierLimits {
    fn default() -> Self {
        OutlierLimits { max_speed: MAX_SPEED, max_accel: MAX_ACCEL }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedTrack {
    pub scenario_id: String,
    pub agent_id: String,
    pub reason: String,
}

/// True when a trajectory stays inside the speed and acceleration limits.
/// Kinematics are computed per contiguous segment.
pub fn within_limits(traj: &Trajectory, limits: &OutlierLimits) -> std::result::Result<(), String> {
    for seg in traj.split_segments() {
        if seg.points.len() < 2 {
            if let Some(p) = seg.points.first() {
                if p.speed() > limits.max_speed {
                    return Err(format!("speed {:.3} m/s at t={}", p.speed(), p.t));
                }
            }
            continue;
        }
        let kin = derive_kinematics(&seg).expect("segment has two points");
        for (p, k) in seg.points.iter().zip(&kin) {
            if k.speed > limits.max_speed {
                return Err(format!("speed {:.3} m/s at t={}", k.speed, p.t));
            }
            let a = k.ax.hypot(k.ay);
            if a > limits.max_accel {
                return Err(format!("acceleration {a:.3} m/s^2 at t={}", p.t));
            }
        }
    }
    Ok(())
}

/// Removes every trajectory that breaks a limit; survivors are untouched.
pub fn filter_outliers(trajs: Vec<Trajectory>, limits: &OutlierLimits) -> (Vec<Trajectory>, Vec<RemovedTrack>) {
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for tr in trajs {
        match within_limits(&tr, limits) {
            Ok(()) => kept.push(tr),
            Err(reason) => removed.push(RemovedTrack { scenario_id: tr.scenario_id.clone(), agent_id: tr.agent_id.clone(), reason }),
        }
    }
    (kept, removed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionPair {
    pub pedestrian: Trajectory,
    pub vehicle: Trajectory,
    pub vehicle_class: AgentClass,
    pub min_distance: f64,
    pub overlap_window: (f64, f64),
}

impl InteractionPair {
    pub fn id(&self) -> String {
        format!(
            "{}/{}/{}@{}",
            self.pedestrian.scenario_id,
            self.pedestrian.agent_id,
            self.vehicle.agent_id,
            frame_of(self.overlap_window.0)
        )
    }

    pub fn overlap_frames(&self) -> (i64, i64) {
        (frame_of(self.overlap_window.0), frame_of(self.overlap_window.1))
    }

    /// Pedestrian and vehicle points at every frame of the overlap window.
    pub fn aligned(&self) -> Result<Vec<(TrackPoint, TrackPoint)>> {
        let (f0, f1) = self.overlap_frames();
        (f0..=f1)
            .map(|f| match (self.pedestrian.at_frame(f), self.vehicle.at_frame(f)) {
                (Some(p), Some(v)) => Ok((*p, *v)),
                _ => Err(Error::Data(format!("pair {}: frame {f} missing inside the overlap window", self.id()))),
            })
            .collect()
    }

    /// The pedestrian and vehicle restricted to the overlap window.
    pub fn overlap_trajectories(&self) -> Result<(Trajectory, Trajectory)> {
        let pts = self.aligned()?;
        let ped = self.pedestrian.with_points(pts.iter().map(|p| p.0).collect());
        let veh = self.vehicle.with_points(pts.iter().map(|p| p.1).collect());
        Ok((ped, veh))
    }
}

/// Minimum Euclidean distance over all point pairs.
pub fn min_point_distance(a: &Trajectory, b: &Trajectory) -> f64 {
    let mut best = f64::INFINITY;
    for p in &a.points {
        for q in &b.points {
            let d = (p.x - q.x).hypot(p.y - q.y);
            if d < best {
                best = d;
            }
        }
    }
    best
}

/// High-proximity pairs: pedestrian/vehicle trajectories from the same
/// scenario whose closest point pair is strictly nearer than `d_thresh`.
/// Inputs should be contiguous segments; pairs with no common frame are
/// skipped because no time-aligned analysis is possible.
pub fn extract_interactions(peds: &[Trajectory], vehs: &[Trajectory], d_thresh: f64) -> Result<Vec<InteractionPair>> {
    if !(d_thresh > 0.0) {
        return Err(Error::InvalidArgument(format!("d_thresh must be positive, got {d_thresh}")));
    }
    let mut out = Vec::new();
    for ped in peds.iter().filter(|p| p.agent_class == AgentClass::Pedestrian) {
        for veh in vehs.iter().filter(|v| v.agent_class.is_vehicle() && v.scenario_id == ped.scenario_id) {
            let d = min_point_distance(ped, veh);
            if !(d < d_thresh) {
                continue;
            }
            let (Some(ps), Some(pe), Some(vs), Some(ve)) = (ped.start_frame(), ped.end_frame(), veh.start_frame(), veh.end_frame())
            else {
                continue;
            };
            let (s, e) = (ps.max(vs), pe.min(ve));
            if s > e {
                continue;
            }
            out.push(InteractionPair {
                pedestrian: ped.clone(),
                vehicle: veh.clone(),
                vehicle_class: veh.agent_class,
                min_distance: d,
                overlap_window: (time_of(s), time_of(e)),
            });
        }
    }
    Ok(out)
}

/// Splits every trajectory at gaps and extracts pairs between segments.
pub fn extract_from_tracks(trajs: &[Trajectory], d_thresh: f64) -> Result<Vec<InteractionPair>> {
    let segs: Vec<Trajectory> = trajs.iter().flat_map(Trajectory::split_segments).collect();
    let (peds, vehs): (Vec<Trajectory>, Vec<Trajectory>) = segs.into_iter().partition(|t| t.agent_class == AgentClass::Pedestrian);
    extract_interactions(&peds, &vehs, d_thresh)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "scenario_id,track_id,object_type,timestep,position_x,position_y,heading,velocity_x,velocity_y\n";

    fn traj(class: AgentClass, id: &str, vx: &[f64]) -> Trajectory {
        Trajectory {
            scenario_id: "s".into(),
            agent_id: id.into(),
            agent_class: class,
            points: vx
                .iter()
                .enumerate()
                .map(|(i, &v)| TrackPoint { t: time_of(i as i64), x: 0.0, y: 0.0, vx: v, vy: 0.0, heading: 0.0 })
                .collect(),
        }
    }

    fn fixed(class: AgentClass, id: &str, pts: &[(f64, f64)]) -> Trajectory {
        Trajectory {
            scenario_id: "s".into(),
            agent_id: id.into(),
            agent_class: class,
            points: pts
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| TrackPoint { t: time_of(i as i64), x, y, vx: 0.0, vy: 0.0, heading: 0.0 })
                .collect(),
        }
    }

    #[test]
    fn loads_and_converts_timesteps() {
        let csv = format!("{HEADER}s1,p1,pedestrian,0,0,0,0,1,0\ns1,p1,pedestrian,1,0.1,0,0,1,0\ns1,p1,pedestrian,2,0.2,0,0,1,0\n");
        let trajs = read_trajectories(csv.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(trajs.len(), 1);
        let ts: Vec<f64> = trajs[0].points.iter().map(|p| p.t).collect();
        assert_eq!(ts, vec![0.0, 0.1, 0.2]);
    }

    #[test]
    fn groups_by_track() {
        let csv = format!("{HEADER}s1,p1,pedestrian,0,0,0,0,1,0\ns1,v1,vehicle,0,5,0,0,1,0\ns1,AV,vehicle,0,9,0,0,1,0\n");
        let trajs = read_trajectories(csv.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(trajs.len(), 3);
        let classes: Vec<AgentClass> = trajs.iter().map(|t| t.agent_class).collect();
        assert_eq!(classes, vec![AgentClass::AV, AgentClass::Pedestrian, AgentClass::HDV]);
    }

    #[test]
    fn rejects_non_monotone_timesteps() {
        let csv = format!("{HEADER}s1,p1,pedestrian,0,0,0,0,1,0\ns1,p1,pedestrian,2,0,0,0,1,0\ns1,p1,pedestrian,1,0,0,0,1,0\n");
        match read_trajectories(csv.as_bytes(), &CsvSchema::default()) {
            Err(Error::Data(msg)) => assert!(msg.contains("p1"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_named() {
        let csv = "scenario_id,track_id,object_type,timestep,position_x,position_y,heading,velocity_x\n";
        match read_trajectories(csv.as_bytes(), &CsvSchema::default()) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "velocity_y"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn custom_schema_maps_columns() {
        let schema = CsvSchema { velocity_y: "vel_y".into(), ..Default::default() };
        let csv = "scenario_id,track_id,object_type,timestep,position_x,position_y,heading,velocity_x,vel_y\ns,p,pedestrian,0,1,2,0,3,4\n";
        let t = read_trajectories(csv.as_bytes(), &schema).unwrap();
        assert_eq!(t[0].points[0].vy, 4.0);
    }

    #[test]
    fn kinematics_examples() {
        let k = derive_kinematics(&traj(AgentClass::HDV, "v", &[1.0, 1.0, 1.0])).unwrap();
        assert!(k.iter().all(|k| k.ax == 0.0));
        let k = derive_kinematics(&traj(AgentClass::HDV, "v", &[0.0, 0.1, 0.2])).unwrap();
        assert!((k[1].ax - 1.0).abs() < 1e-12);
        let k = derive_kinematics(&traj(AgentClass::HDV, "v", &[0.0, 0.3])).unwrap();
        assert!((k[0].ax - 3.0).abs() < 1e-12 && (k[1].ax - 3.0).abs() < 1e-12);
        assert!(matches!(derive_kinematics(&traj(AgentClass::HDV, "v", &[1.0])), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn outlier_examples() {
        let limits = OutlierLimits::default();
        let fast = traj(AgentClass::HDV, "fast", &[91.0, 91.0, 91.0]);
        let ok = traj(AgentClass::HDV, "ok", &[89.9, 89.21, 89.9]);
        let jerky = traj(AgentClass::HDV, "jerky", &[0.0, 0.75, 1.5]);
        let (kept, removed) = filter_outliers(vec![fast, ok.clone(), jerky], &limits);
        assert_eq!(kept, vec![ok]);
        assert_eq!(removed.len(), 2);
    }

    #[test]
    fn interaction_thresholds() {
        let ped = fixed(AgentClass::Pedestrian, "p", &[(0.0, 0.0), (0.0, 0.0)]);
        let near = fixed(AgentClass::HDV, "v", &[(1.0, 0.0), (0.05, 0.0)]);
        let pairs = extract_interactions(&[ped.clone()], &[near], 0.1).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].min_distance, 0.05);
        assert_eq!(pairs[0].overlap_window, (0.0, 0.1));

        let far = fixed(AgentClass::HDV, "v", &[(0.5, 0.0)]);
        assert!(extract_interactions(&[ped.clone()], &[far], 0.1).unwrap().is_empty());
        let tie = fixed(AgentClass::HDV, "v", &[(0.0, 0.1)]);
        assert!(extract_interactions(&[ped.clone()], &[tie], 0.1).unwrap().is_empty());
        assert!(extract_interactions(&[ped], &[], 0.0).is_err());
    }

    #[test]
    fn gaps_split_segments() {
        let mut t = traj(AgentClass::Pedestrian, "p", &[1.0; 5]);
        t.points.remove(2);
        let segs = t.split_segments();
        assert_eq!(segs.len(), 2);
        assert!(segs.iter().all(Trajectory::is_contiguous));
        assert_eq!(segs[1].points[0].frame(), 3);
    }
}
