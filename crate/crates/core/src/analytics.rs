//! Error metrics, reaction times, distribution tests, conflict grids,
//! yielding labels and 1-D k-means.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::curvttc::CurvTtcSample;
use crate::env::StepInfo;
use crate::error::{Error, Result};
use crate::traj::{derive_kinematics, frame_of, time_of, InteractionPair, TrackPoint, DT};

pub const REACTION_EPSILON: f64 = 0.05;
pub const MAX_LAG: f64 = 3.0;
pub const GRID_BINS: usize = 8;
pub const GRID_BIN_WIDTH: f64 = 0.5;
pub const ONSET_TTC: f64 = 10.0;
pub const CONFLICT_TTC: f64 = 2.0;
/// Operating speed splits for the quadrant analysis, m/s.
pub const VEHICLE_SPEED_SPLIT: f64 = 3.5;
pub const PED_SPEED_SPLIT: f64 = 1.9;
const WELCH_VAR_FLOOR: f64 = 1e-12;
const KS_TERMS: usize = 100;

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{what}: {a} predictions for {b} observations")));
    }
    if a == 0 {
        return Err(Error::InsufficientData(format!("{what}: empty series")));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), truth.len(), "rmse")?;
    let se: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((se / pred.len() as f64).sqrt())
}

/// Mean pointwise and mean final-point Euclidean error over matched
/// trajectories.
pub fn ade_fde(pred: &[Vec<(f64, f64)>], truth: &[Vec<(f64, f64)>]) -> Result<(f64, f64)> {
    check_lengths(pred.len(), truth.len(), "ade/fde")?;
    let (mut total, mut n, mut fde) = (0.0, 0usize, 0.0);
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        check_lengths(p.len(), t.len(), &format!("ade/fde trajectory {i}"))?;
        let errs: Vec<f64> = p.iter().zip(t).map(|(a, b)| (a.0 - b.0).hypot(a.1 - b.1)).collect();
        total += errs.iter().sum::<f64>();
        n += errs.len();
        fde += errs[errs.len() - 1];
    }
    Ok((total / n as f64, fde / pred.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Keys `v_lon`, `a_lon`, `d_lon`, `v_lat`, `a_lat`, `d_lat`.
    pub rmse: BTreeMap<String, f64>,
    pub ade: f64,
    pub fde: f64,
}

/// Compares simulated against recorded pedestrian motion over a set of
/// rollouts. Longitudinal is the y axis.
pub fn error_report(rollouts: &[Vec<StepInfo>]) -> Result<ErrorReport> {
    let steps: Vec<&StepInfo> = rollouts.iter().flatten().collect();
    if steps.is_empty() {
        return Err(Error::InsufficientData("no simulated steps to evaluate".into()));
    }
    let col = |f: &dyn Fn(&StepInfo) -> (f64, f64)| -> Result<f64> {
        let (p, t): (Vec<f64>, Vec<f64>) = steps.iter().map(|s| f(s)).unzip();
        rmse(&p, &t)
    };
    let mut m = BTreeMap::new();
    m.insert("v_lon".to_string(), col(&|s| (s.sim_vel.1, s.rec_vel.1))?);
    m.insert("v_lat".to_string(), col(&|s| (s.sim_vel.0, s.rec_vel.0))?);
    m.insert("a_lon".to_string(), col(&|s| (s.action.alon, s.rec_accel.1))?);
    m.insert("a_lat".to_string(), col(&|s| (s.action.alat, s.rec_accel.0))?);
    m.insert("d_lon".to_string(), col(&|s| (s.sim_state.dlon, s.rec_state.dlon))?);
    m.insert("d_lat".to_string(), col(&|s| (s.sim_state.dlat, s.rec_state.dlat))?);
    let nonempty: Vec<&Vec<StepInfo>> = rollouts.iter().filter(|r| !r.is_empty()).collect();
    let pred: Vec<Vec<(f64, f64)>> = nonempty.iter().map(|r| r.iter().map(|s| s.sim_pos).collect()).collect();
    let truth: Vec<Vec<(f64, f64)>> = nonempty.iter().map(|r| r.iter().map(|s| s.rec_pos).collect()).collect();
    let (ade, fde) = ade_fde(&pred, &truth)?;
    Ok(ErrorReport { rmse: m, ade, fde })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReactionEstimate {
    pub t_d: Option<f64>,
    /// First qualifying frame, or 0 when none qualifies.
    pub onset_frame: usize,
    pub qualifying: bool,
}

fn norm(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Lag on the 0.1 s grid minimising the summed acceleration mismatch over
/// the frames where the pedestrian's acceleration changes by more than
/// `epsilon`. Only frames at or after the largest lag are scored so every
/// candidate sees the same frames.
pub fn reaction_time(ped_accel: &[(f64, f64)], veh_accel: &[(f64, f64)], epsilon: f64, max_lag: f64) -> Result<ReactionEstimate> {
    if ped_accel.len() != veh_accel.len() {
        return Err(Error::Dimension(format!("{} pedestrian vs {} vehicle frames", ped_accel.len(), veh_accel.len())));
    }
    let n = ped_accel.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("reaction time needs 2 frames, got {n}")));
    }
    if !(epsilon >= 0.0) || !(max_lag >= 0.0) {
        return Err(Error::InvalidArgument("epsilon and max_lag must be non-negative".into()));
    }
    let max_k = ((max_lag / DT).round() as usize).min(n - 1);
    let qualifying: Vec<usize> = (max_k.max(1)..n).filter(|&t| norm(ped_accel[t], ped_accel[t - 1]) > epsilon).collect();
    let Some(&onset) = qualifying.first() else {
        return Ok(ReactionEstimate { t_d: None, onset_frame: 0, qualifying: false });
    };
    let mut best = (f64::INFINITY, 0usize);
    for k in 0..=max_k {
        let cost: f64 = qualifying.iter().map(|&t| norm(ped_accel[t], veh_accel[t - k])).sum();
        if cost < best.0 {
            best = (cost, k);
        }
    }
    Ok(ReactionEstimate { t_d: Some(time_of(best.1 as i64)), onset_frame: onset, qualifying: true })
}

/// Reaction time of a pair from finite-difference accelerations over the
/// overlap window.
pub fn pair_reaction_time(pair: &InteractionPair, epsilon: f64, max_lag: f64) -> Result<ReactionEstimate> {
    let (ped, veh) = pair.overlap_trajectories()?;
    let pa: Vec<(f64, f64)> = derive_kinematics(&ped)?.iter().map(|k| (k.ax, k.ay)).collect();
    let va: Vec<(f64, f64)> = derive_kinematics(&veh)?.iter().map(|k| (k.ax, k.ay)).collect();
    reaction_time(&pa, &va, epsilon, max_lag)
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        let pi2 = std::f64::consts::PI.powi(2);
        let mut cdf = 0.0;
        for j in 1..=KS_TERMS {
            let k = (2 * j - 1) as f64;
            cdf += (-k * k * pi2 / (8.0 * lambda * lambda)).exp();
        }
        cdf *= (2.0 * std::f64::consts::PI).sqrt() / lambda;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut sf = 0.0;
    for j in 1..=KS_TERMS {
        let j = j as f64;
        let sign = if j as usize % 2 == 1 { 1.0 } else { -1.0 };
        sf += sign * (-2.0 * j * j * lambda * lambda).exp();
    }
    (2.0 * sf).clamp(0.0, 1.0)
}

/// Two-sided two-sample KS statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData("KS test needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("KS samples must be finite".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (na, nb) = (sa.len(), sb.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < na && j < nb {
        let x = sa[i].min(sb[j]);
        while i < na && sa[i] <= x {
            i += 1;
        }
        while j < nb && sb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na * nb) as f64 / (na + nb) as f64;
    Ok((d, kolmogorov_sf(ne.sqrt() * d)))
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Welch's unequal-variance t statistic with a two-sided p-value.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientData("t test needs at least two values per sample".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (qa, qb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = qa + qb;
    if se2 == 0.0 {
        if ma == mb {
            return Ok((0.0, 1.0));
        }
        return Ok(((ma - mb) / WELCH_VAR_FLOOR.sqrt(), 0.0));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (qa * qa / (a.len() as f64 - 1.0) + qb * qb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidArgument(format!("t distribution with {df} dof: {e}")))?;
    Ok((t, (2.0 * dist.sf(t.abs())).min(1.0)))
}

pub fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    if x.len() == 1 {
        return (x[0], 0.0);
    }
    let (m, v) = mean_var(x);
    (m, v.sqrt())
}

/// A pair together with its CurvTTC series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub pair: InteractionPair,
    pub series: Vec<CurvTtcSample>,
}

impl Sequence {
    /// Index into `series` of the first value below 10 s.
    pub fn onset(&self) -> Option<usize> {
        self.series.iter().position(|s| s.value < ONSET_TTC)
    }

    pub fn has_conflict(&self) -> bool {
        self.series.iter().any(|s| s.value < CONFLICT_TTC)
    }

    fn points_from(&self, t: f64) -> Result<Vec<(TrackPoint, TrackPoint)>> {
        let f = frame_of(t);
        Ok(self.pair.aligned()?.into_iter().filter(|(p, _)| p.frame() >= f).collect())
    }

    /// Vehicle and pedestrian speeds at the onset frame.
    pub fn onset_speeds(&self) -> Result<Option<(f64, f64)>> {
        let Some(i) = self.onset() else { return Ok(None) };
        let pts = self.points_from(self.series[i].t)?;
        let (p, v) = pts.first().ok_or_else(|| Error::Data(format!("{}: onset outside the overlap", self.pair.id())))?;
        Ok(Some((v.speed(), p.speed())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GridCell {
    pub count: usize,
    pub conflicts: usize,
}

impl GridCell {
    /// Conflict share, `None` for an empty cell.
    pub fn rate(&self) -> Option<f64> {
        (self.count > 0).then(|| self.conflicts as f64 / self.count as f64)
    }
}

/// Conflict counts binned by onset speeds, `cells[vehicle_bin][ped_bin]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictGrid {
    pub cells: [[GridCell; GRID_BINS]; GRID_BINS],
    /// Sequences that never fell below the onset threshold.
    pub excluded: usize,
}

pub fn speed_bin(speed: f64) -> usize {
    ((speed / GRID_BIN_WIDTH).floor().max(0.0) as usize).min(GRID_BINS - 1)
}

impl ConflictGrid {
    pub fn included(&self) -> usize {
        self.cells.iter().flatten().map(|c| c.count).sum()
    }

    /// Rows `veh_bin_lo,ped_bin_lo,count,conflicts,rate` with an empty
    /// rate for unoccupied cells.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["veh_speed_lo", "ped_speed_lo", "count", "conflicts", "rate"])?;
        for (i, row) in self.cells.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                w.write_record([
                    (i as f64 * GRID_BIN_WIDTH).to_string(),
                    (j as f64 * GRID_BIN_WIDTH).to_string(),
                    c.count.to_string(),
                    c.conflicts.to_string(),
                    c.rate().map(|r| r.to_string()).unwrap_or_default(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn conflict_grid(sequences: &[Sequence]) -> Result<ConflictGrid> {
    let mut grid = ConflictGrid { cells: [[GridCell::default(); GRID_BINS]; GRID_BINS], excluded: 0 };
    for s in sequences {
        match s.onset_speeds()? {
            None => grid.excluded += 1,
            Some((v_veh, v_ped)) => {
                let cell = &mut grid.cells[speed_bin(v_veh)][speed_bin(v_ped)];
                cell.count += 1;
                cell.conflicts += usize::from(s.has_conflict());
            }
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum YieldKind {
    VehicleYield,
    PedestrianYield,
    Unclassified,
}

impl YieldKind {
    pub fn label(self) -> &'static str {
        match self {
            YieldKind::VehicleYield => "vehicle_yield",
            YieldKind::PedestrianYield => "pedestrian_yield",
            YieldKind::Unclassified => "unclassified",
        }
    }
}

/// Quantities measured from the onset frame to the end of the overlap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YieldEvidence {
    /// Most negative rate of change of vehicle speed, m/s^2.
    pub vehicle_decel: f64,
    /// `(|dv| at onset - min |dv|) / |dv| at onset`.
    pub rel_speed_reduction: f64,
    /// Minimum pedestrian speed minus onset speed, m/s.
    pub ped_speed_change: f64,
    /// Largest retreat against the onset walking direction, m.
    pub backward_displacement: f64,
    pub ped_path_length: f64,
    pub veh_path_length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YieldLabel {
    pub label: YieldKind,
    pub evidence: YieldEvidence,
    /// Both rule sets matched; the label is then Unclassified.
    pub both_matched: bool,
}

pub fn vehicle_yield_rule(e: &YieldEvidence) -> bool {
    (e.vehicle_decel <= -2.5 || e.rel_speed_reduction >= 0.35) && e.ped_speed_change > -0.3 && e.ped_path_length >= 3.0
}

pub fn pedestrian_yield_rule(e: &YieldEvidence) -> bool {
    (e.ped_speed_change <= -0.5 || e.backward_displacement >= 0.3)
        && e.vehicle_decel > -1.5
        && e.rel_speed_reduction < 0.20
        && e.veh_path_length >= 8.0
}

pub fn classify_evidence(evidence: YieldEvidence) -> YieldLabel {
    let (v, p) = (vehicle_yield_rule(&evidence), pedestrian_yield_rule(&evidence));
    let label = match (v, p) {
        (true, false) => YieldKind::VehicleYield,
        (false, true) => YieldKind::PedestrianYield,
        _ => YieldKind::Unclassified,
    };
    YieldLabel { label, evidence, both_matched: v && p }
}

fn path_length(pts: &[(f64, f64)]) -> f64 {
    pts.windows(2).map(|w| norm(w[0], w[1])).sum()
}

pub fn yield_evidence(seq: &Sequence) -> Result<Option<YieldEvidence>> {
    let Some(i) = seq.onset() else { return Ok(None) };
    let pts = seq.points_from(seq.series[i].t)?;
    if pts.len() < 2 {
        return Ok(None);
    }
    let (p0, _) = pts[0];
    let vel = |p: &TrackPoint| (p.vx, p.vy);
    let veh_speed: Vec<f64> = pts.iter().map(|(_, v)| v.speed()).collect();
    let vehicle_decel = veh_speed.windows(2).map(|w| (w[1] - w[0]) / DT).fold(f64::INFINITY, f64::min);
    let rel: Vec<f64> = pts.iter().map(|(p, v)| norm(vel(p), vel(v))).collect();
    let rel_speed_reduction = if rel[0] > 1e-9 { (rel[0] - rel.iter().copied().fold(f64::INFINITY, f64::min)) / rel[0] } else { 0.0 };
    let ped_speed_change = pts.iter().map(|(p, _)| p.speed()).fold(f64::INFINITY, f64::min) - p0.speed();
    let backward_displacement = if p0.speed() > 1e-9 {
        let u = (p0.vx / p0.speed(), p0.vy / p0.speed());
        pts.iter().map(|(p, _)| -((p.x - p0.x) * u.0 + (p.y - p0.y) * u.1)).fold(0.0, f64::max)
    } else {
        0.0
    };
    Ok(Some(YieldEvidence {
        vehicle_decel,
        rel_speed_reduction,
        ped_speed_change,
        backward_displacement,
        ped_path_length: path_length(&pts.iter().map(|(p, _)| p.pos()).collect::<Vec<_>>()),
        veh_path_length: path_length(&pts.iter().map(|(_, v)| v.pos()).collect::<Vec<_>>()),
    }))
}

/// Label for a sequence with an onset; `None` when it has none.
pub fn classify_yield(seq: &Sequence) -> Result<Option<YieldLabel>> {
    Ok(yield_evidence(seq)?.map(classify_evidence))
}

/// Percentages of vehicle-yield, pedestrian-yield and unclassified labels.
pub fn yield_rates(labels: &[YieldLabel]) -> (f64, f64, f64) {
    if labels.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = labels.len() as f64;
    let pct = |k: YieldKind| 100.0 * labels.iter().filter(|l| l.label == k).count() as f64 / n;
    (pct(YieldKind::VehicleYield), pct(YieldKind::PedestrianYield), pct(YieldKind::Unclassified))
}

/// Quadrant label from onset speeds against the operating splits.
pub fn speed_quadrant(veh_speed: f64, ped_speed: f64) -> &'static str {
    match (veh_speed >= VEHICLE_SPEED_SPLIT, ped_speed >= PED_SPEED_SPLIT) {
        (true, true) => "fast_vehicle_fast_ped",
        (true, false) => "fast_vehicle_slow_ped",
        (false, true) => "slow_vehicle_fast_ped",
        (false, false) => "slow_vehicle_slow_ped",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeans1d {
    /// Ascending.
    pub centroids: Vec<f64>,
    /// Midpoints between neighbouring centroids.
    pub thresholds: Vec<f64>,
    pub sse: f64,
}

impl KMeans1d {
    /// The single split of a two-cluster fit.
    pub fn threshold(&self) -> Option<f64> {
        self.thresholds.first().copied()
    }
}

fn nearest(c: &[f64], x: f64) -> usize {
    let mut best = 0;
    for (i, &ci) in c.iter().enumerate() {
        if (x - ci).abs() < (x - c[best]).abs() {
            best = i;
        }
    }
    best
}

fn sse(values: &[f64], c: &[f64]) -> f64 {
    values.iter().map(|&x| (x - c[nearest(c, x)]).powi(2)).sum()
}

/// Lloyd iterations from `init` until assignments stop changing. Returns
/// the centroids and the objective after every assignment step.
pub fn lloyd_1d(values: &[f64], init: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut c = init.to_vec();
    let mut assign: Vec<usize> = values.iter().map(|&x| nearest(&c, x)).collect();
    let mut history = vec![sse(values, &c)];
    for _ in 0..1000 {
        let mut sum = vec![0.0; c.len()];
        let mut cnt = vec![0usize; c.len()];
        for (&x, &a) in values.iter().zip(&assign) {
            sum[a] += x;
            cnt[a] += 1;
        }
        for k in 0..c.len() {
            if cnt[k] > 0 {
                c[k] = sum[k] / cnt[k] as f64;
            }
        }
        let next: Vec<usize> = values.iter().map(|&x| nearest(&c, x)).collect();
        history.push(sse(values, &c));
        if next == assign {
            break;
        }
        assign = next;
    }
    (c, history)
}

/// Globally optimal 1-D k-means. Optimal clusters are contiguous in sorted
/// order, so a dynamic program over split points finds the exact minimum.
pub fn kmeans_1d(values: &[f64], k: usize) -> Result<KMeans1d> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("k-means values must be finite".into()));
    }
    let mut x = values.to_vec();
    x.sort_by(f64::total_cmp);
    let mut distinct = x.clone();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::InsufficientData(format!("{} distinct values for k = {k}", distinct.len())));
    }
    let n = x.len();
    let shift = x[n / 2];
    let mut s1 = vec![0.0; n + 1];
    let mut s2 = vec![0.0; n + 1];
    for (i, v) in x.iter().enumerate() {
        let d = v - shift;
        s1[i + 1] = s1[i] + d;
        s2[i + 1] = s2[i] + d * d;
    }
    // cost of x[i..j]
    let cost = |i: usize, j: usize| {
        let m = (j - i) as f64;
        let s = s1[j] - s1[i];
        (s2[j] - s2[i] - s * s / m).max(0.0)
    };
    let mut dp = vec![vec![f64::INFINITY; n + 1]; k + 1];
    let mut arg = vec![vec![0usize; n + 1]; k + 1];
    dp[0][0] = 0.0;
    for c in 1..=k {
        for j in c..=n {
            for i in (c - 1)..j {
                let v = dp[c - 1][i] + cost(i, j);
                if v < dp[c][j] {
                    dp[c][j] = v;
                    arg[c][j] = i;
                }
            }
        }
    }
    let mut centroids = vec![0.0; k];
    let mut j = n;
    for c in (1..=k).rev() {
        let i = arg[c][j];
        centroids[c - 1] = x[i..j].iter().sum::<f64>() / (j - i) as f64;
        j = i;
    }
    let thresholds = centroids.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    Ok(KMeans1d { centroids, thresholds, sse: dp[k][n] })
}
