use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use pedsafe_core::analytics::{
    classify_yield, conflict_grid, error_report, kmeans_1d, ks_two_sample, mean_std, pair_reaction_time, speed_quadrant,
    welch_t, yield_rates, ConflictGrid, Sequence, YieldKind, YieldLabel, GRID_BIN_WIDTH,
};
use pedsafe_core::curvttc::{curvttc_series, flag_critical, write_series_csv, CriticalEvent, CurvTtcConfig, CurvTtcSample};
use pedsafe_core::ddpg::{reconstruct as rollout_policy, train_with_progress, write_curve_csv, PolicyCheckpoint, TrainConfig};
use pedsafe_core::env::{event_frames, write_transitions_csv, RewardVariant, StepInfo, Transition};
use pedsafe_core::synth::{generate, trajectories, Maneuver, ScenarioTemplate};
use pedsafe_core::traj::{
    extract_from_tracks, filter_outliers, load_scenario, min_point_distance, write_trajectories, AgentClass, CsvSchema,
    InteractionPair, OutlierLimits, TrackPoint, Trajectory, DEFAULT_D_THRESH,
};
use pedsafe_core::Error;

use crate::args::*;
use crate::output::{digest_inputs, list_files, now_unix, RunManifest, Staging};
use crate::CliError;

fn manifest(command: &str, started: f64, seed: Option<u64>, config: Value, inputs: &[&Path]) -> Result<RunManifest, CliError> {
    Ok(RunManifest {
        command: command.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config,
        inputs: digest_inputs(inputs)?,
        outputs: Vec::new(),
        started_unix: started,
        finished_unix: 0.0,
    })
}

fn to_value<T: Serialize>(v: &T) -> Result<Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::Core(e.into()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Core(Error::Data(format!("{}: {e}", path.display()))))
}

fn load_checkpoint(path: &Path) -> Result<PolicyCheckpoint, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    PolicyCheckpoint::from_json(&text).map_err(|e| match e {
        Error::Json(j) => CliError::Core(Error::Data(format!("{}: {j}", path.display()))),
        other => CliError::Core(other),
    })
}

fn csv_files(input: &Path) -> Result<Vec<PathBuf>, CliError> {
    if input.is_dir() {
        list_files(input, Some("csv"))
    } else {
        Ok(vec![input.to_path_buf()])
    }
}

fn load_tracks(files: &[PathBuf]) -> Result<Vec<Trajectory>, CliError> {
    let mut out = Vec::new();
    for f in files {
        out.extend(load_scenario(f, &CsvSchema::default()).map_err(|e| match e {
            Error::Io(io) => CliError::io(f, io),
            Error::Csv(c) => CliError::Core(Error::Data(format!("{}: {c}", f.display()))),
            Error::MissingColumn(c) => CliError::Core(Error::Data(format!("{}: missing column `{c}`", f.display()))),
            other => CliError::Core(other),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct Skipped {
    id: String,
    reason: String,
}

/// CurvTTC series for every pair; pairs whose series cannot be formed are
/// reported instead.
fn series_for(pairs: Vec<InteractionPair>, cfg: &CurvTtcConfig, skipped: &mut Vec<Skipped>) -> Result<Vec<Sequence>, CliError> {
    let mut out = Vec::new();
    for pair in pairs {
        match curvttc_series(&pair, cfg) {
            Ok(series) => out.push(Sequence { pair, series }),
            Err(e @ (Error::DegenerateStart(_) | Error::InsufficientData(_))) => {
                eprintln!("skipping {}: {e}", pair.id());
                skipped.push(Skipped { id: pair.id(), reason: e.to_string() });
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

fn class_counts<'a>(classes: impl Iterator<Item = &'a AgentClass>) -> BTreeMap<&'static str, usize> {
    let mut m = BTreeMap::from([("AV", 0), ("HDV", 0)]);
    for c in classes {
        *m.entry(c.label()).or_default() += 1;
    }
    m
}

fn maneuver_label(m: Maneuver) -> &'static str {
    match m {
        Maneuver::None => "none",
        Maneuver::VehicleYield => "vehicle_yield",
        Maneuver::PedestrianYield => "pedestrian_yield",
    }
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let started = now_unix();
    let a = resolve(&a, a.config.as_deref())?;
    let out = required(&a.out, "out")?;
    let mut t = ScenarioTemplate::new(a.kind.unwrap_or(KindArg::Crossing).into(), a.seed.unwrap_or(0));
    let or = |v: Option<f64>, d: f64| v.unwrap_or(d);
    t.noise = or(a.noise, t.noise);
    t.critical_fraction = or(a.critical_fraction, t.critical_fraction);
    t.av_fraction = or(a.av_fraction, t.av_fraction);
    t.vehicle_yield_fraction = or(a.vehicle_yield_fraction, t.vehicle_yield_fraction);
    t.veh_speed = (or(a.veh_speed_min, t.veh_speed.0), or(a.veh_speed_max, t.veh_speed.1));
    t.ped_speed = (or(a.ped_speed_min, t.ped_speed.0), or(a.ped_speed_max, t.ped_speed.1));
    t.initial_gap = (or(a.gap_min, t.initial_gap.0), or(a.gap_max, t.initial_gap.1));
    t.arc_radius = (or(a.radius_min, t.arc_radius.0), or(a.radius_max, t.arc_radius.1));
    t.diverging = a.diverging.unwrap_or(false);
    let count = a.count.unwrap_or(100);

    let scenarios = generate(&t, count)?;
    let mut stage = Staging::new(&out)?;
    stage.write_with("tracks.csv", |w| write_trajectories(w, &trajectories(&scenarios)))?;
    let meta: Vec<Value> = scenarios
        .iter()
        .map(|s| {
            json!({
                "scenario_id": s.scenario_id,
                "kind": t.kind.label(),
                "vehicle_class": s.vehicle.agent_class.label(),
                "intended_critical": s.intended_critical,
                "maneuver": maneuver_label(s.maneuver),
            })
        })
        .collect();
    stage.write_json("scenarios.json", &meta)?;
    let config = json!({ "template": to_value(&t)?, "count": count });
    let m = manifest("synth", started, Some(t.seed), config, &[])?;
    let dir = stage.commit(m)?;
    eprintln!("wrote {count} scenarios to {}", dir.display());
    Ok(())
}

pub fn extract(a: ExtractArgs) -> Result<(), CliError> {
    let started = now_unix();
    let a = resolve(&a, a.config.as_deref())?;
    let input = required(&a.input, "input")?;
    let out = required(&a.out, "out")?;
    let d_thresh = a.d_thresh.unwrap_or(DEFAULT_D_THRESH);
    let cfg = CurvTtcConfig {
        threshold: a.threshold.unwrap_or(CurvTtcConfig::default().threshold),
        horizon: a.horizon.unwrap_or(CurvTtcConfig::default().horizon),
        step: a.step.unwrap_or(CurvTtcConfig::default().step),
    };
    cfg.validate()?;
    let limits = OutlierLimits {
        max_speed: a.max_speed.unwrap_or(OutlierLimits::default().max_speed),
        max_accel: a.max_accel.unwrap_or(OutlierLimits::default().max_accel),
    };

    let files = csv_files(&input)?;
    let tracks = load_tracks(&files)?;
    let loaded = tracks.len();
    let (kept, removed) = filter_outliers(tracks, &limits);
    let pairs = extract_from_tracks(&kept, d_thresh)?;
    let mut skipped = Vec::new();
    let interaction_counts = class_counts(pairs.iter().map(|p| &p.vehicle_class));
    let sequences = series_for(pairs.clone(), &cfg, &mut skipped)?;
    let events: Vec<CriticalEvent> = sequences.iter().filter_map(|s| flag_critical(&s.pair, s.series.clone())).collect();
    let rows: Vec<(String, Vec<CurvTtcSample>)> = sequences.iter().map(|s| (s.pair.id(), s.series.clone())).collect();
    let by_class = |c: AgentClass| events.iter().filter(|e| e.pair.vehicle_class == c).cloned().collect::<Vec<_>>();

    let summary = json!({
        "files": files.len(),
        "tracks_loaded": loaded,
        "tracks_removed": removed,
        "interactions": interaction_counts,
        "critical_events": class_counts(events.iter().map(|e| &e.pair.vehicle_class)),
        "skipped_pairs": skipped,
    });
    let mut stage = Staging::new(&out)?;
    stage.write_json("interactions.json", &pairs)?;
    stage.write_with("curvttc.csv", |w| write_series_csv(w, &rows))?;
    stage.write_json("events.json", &events)?;
    stage.write_json("events_av.json", &by_class(AgentClass::AV))?;
    stage.write_json("events_hdv.json", &by_class(AgentClass::HDV))?;
    stage.write_json("summary.json", &summary)?;
    let config = json!({ "d_thresh": d_thresh, "curvttc": to_value(&cfg)?, "outlier_limits": to_value(&limits)? });
    let m = manifest("extract", started, None, config, &[&input])?;
    let dir = stage.commit(m)?;
    eprintln!("{} interactions, {} critical events -> {}", pairs.len(), events.len(), dir.display());
    Ok(())
}

fn events_of(path: &Path, class: AgentClass) -> Result<Vec<CriticalEvent>, CliError> {
    let all: Vec<CriticalEvent> = read_json(path)?;
    Ok(all.into_iter().filter(|e| e.pair.vehicle_class == class).collect())
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let started = now_unix();
    let a = resolve(&a, a.config.as_deref())?;
    let events_path = required(&a.events, "events")?;
    let out = required(&a.out, "out")?;
    let vehicle: AgentClass = required(&a.vehicle_type, "vehicle-type")?.into();
    let reward = a.reward.unwrap_or(RewardArg::AbsVelocity);
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        episodes: a.episodes.unwrap_or(d.episodes),
        batch: a.batch.unwrap_or(d.batch),
        lr_actor: a.lr_actor.unwrap_or(d.lr_actor),
        lr_critic: a.lr_critic.unwrap_or(d.lr_critic),
        gamma: a.gamma.unwrap_or(d.gamma),
        tau: a.tau.unwrap_or(d.tau),
        noise_sigma: a.noise_sigma.unwrap_or(d.noise_sigma),
        buffer: a.buffer.unwrap_or(d.buffer),
        seed: a.seed.unwrap_or(d.seed),
        episode: d.episode,
    };
    cfg.validate()?;
    let corpus = events_of(&events_path, vehicle)?;
    if corpus.is_empty() {
        return Err(CliError::Usage(format!("{} holds no {} events to train on", events_path.display(), vehicle.label())));
    }

    let every = (cfg.episodes / 10).max(1);
    let result = train_with_progress(&corpus, RewardVariant::new(reward.into()), &cfg, vehicle, &mut |ep, r| {
        if ep % every == 0 || ep + 1 == cfg.episodes {
            eprintln!("episode {ep}: reward {r:.3}");
        }
    })?;
    let mut stage = Staging::new(&out)?;
    stage.write("checkpoint.json", result.checkpoint.to_json()?.as_bytes())?;
    stage.write_with("reward_curve.csv", |w| write_curve_csv(w, &result.curve))?;
    let config = json!({
        "vehicle_type": vehicle.label(),
        "reward": reward,
        "train": to_value(&cfg)?,
        "events": corpus.len(),
    });
    let m = manifest("train", started, Some(cfg.seed), config, &[&events_path])?;
    let dir = stage.commit(m)?;
    eprintln!("trained on {} events -> {}", corpus.len(), dir.display());
    Ok(())
}

struct Rollouts {
    steps: Vec<(usize, Vec<(Transition, StepInfo)>)>,
    /// Simulated pedestrian against the recorded vehicle.
    pairs: Vec<InteractionPair>,
    ids: Vec<String>,
    skipped: Vec<Skipped>,
}

fn simulated_pair(event: &CriticalEvent, steps: &[(Transition, StepInfo)]) -> Result<InteractionPair, CliError> {
    let frames = event_frames(event)?;
    let point = |t: f64, pos: (f64, f64), vel: (f64, f64)| TrackPoint { t, x: pos.0, y: pos.1, vx: vel.0, vy: vel.1, heading: vel.1.atan2(vel.0) };
    let mut ped = vec![frames[0].0];
    ped.extend(steps.iter().map(|(_, s)| point(s.t, s.sim_pos, s.sim_vel)));
    let veh: Vec<TrackPoint> = frames.iter().take(ped.len()).map(|f| f.1).collect();
    let pedestrian = Trajectory { points: ped, ..event.pair.pedestrian.clone() };
    let vehicle = Trajectory { points: veh, ..event.pair.vehicle.clone() };
    let window = (pedestrian.points[0].t, pedestrian.points[pedestrian.points.len() - 1].t);
    Ok(InteractionPair {
        min_distance: min_point_distance(&pedestrian, &vehicle),
        vehicle_class: event.pair.vehicle_class,
        overlap_window: window,
        pedestrian,
        vehicle,
    })
}

fn roll_all(ckpt: &PolicyCheckpoint, events: &[CriticalEvent]) -> Result<Rollouts, CliError> {
    let mut r = Rollouts { steps: Vec::new(), pairs: Vec::new(), ids: Vec::new(), skipped: Vec::new() };
    for (i, ev) in events.iter().enumerate() {
        match rollout_policy(ckpt, ev) {
            Ok(steps) => {
                r.pairs.push(simulated_pair(ev, &steps)?);
                r.ids.push(ev.id());
                r.steps.push((i, steps));
            }
            Err(e @ Error::InsufficientData(_)) => {
                eprintln!("skipping {}: {e}", ev.id());
                r.skipped.push(Skipped { id: ev.id(), reason: e.to_string() });
            }
            Err(e) => return Err(e.into()),
        }
    }
    if r.steps.is_empty() {
        return Err(CliError::Core(Error::InsufficientData("no event could be rolled out".into())));
    }
    Ok(r)
}

fn write_sim_trajectories(buf: &mut Vec<u8>, r: &Rollouts) -> pedsafe_core::Result<()> {
    let mut w = csv::Writer::from_writer(buf);
    w.write_record([
        "event_id", "t", "sim_x", "sim_y", "sim_vx", "sim_vy", "rec_x", "rec_y", "rec_vx", "rec_vy", "alon", "alat",
    ])?;
    for (id, (_, steps)) in r.ids.iter().zip(&r.steps) {
        for (_, s) in steps {
            let mut rec = vec![id.clone(), s.t.to_string()];
            for v in [s.sim_pos.0, s.sim_pos.1, s.sim_vel.0, s.sim_vel.1, s.rec_pos.0, s.rec_pos.1, s.rec_vel.0, s.rec_vel.1] {
                rec.push(v.to_string());
            }
            rec.extend([s.action.alon.to_string(), s.action.alat.to_string()]);
            w.write_record(rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn infos(r: &Rollouts) -> Vec<Vec<StepInfo>> {
    r.steps.iter().map(|(_, s)| s.iter().map(|(_, i)| *i).collect()).collect()
}

pub fn reconstruct(a: ReconstructArgs) -> Result<(), CliError> {
    let started = now_unix();
    let a = resolve(&a, a.config.as_deref())?;
    let ckpt_path = required(&a.checkpoint, "checkpoint")?;
    let events_path = required(&a.events, "events")?;
    let out = required(&a.out, "out")?;
    let allow_cross = a.counterfactual.unwrap_or(false);
    let ckpt = load_checkpoint(&ckpt_path)?;
    let events: Vec<CriticalEvent> = read_json(&events_path)?;
    if events.is_empty() {
        return Err(CliError::Usage(format!("{} holds no events", events_path.display())));
    }
    if !allow_cross {
        if let Some(ev) = events.iter().find(|e| e.pair.vehicle_class != ckpt.vehicle_type) {
            return Err(Error::VehicleTypeMismatch(format!(
                "checkpoint was trained on {} events but {} is {}; pass --counterfactual to allow this",
                ckpt.vehicle_type.label(),
                ev.id(),
                ev.pair.vehicle_class.label()
            ))
            .into());
        }
    }

    let r = roll_all(&ckpt, &events)?;
    let report = error_report(&infos(&r))?;
    let mut stage = Staging::new(&out)?;
    stage.write_with("steps.csv", |w| write_transitions_csv(w, &r.steps))?;
    stage.write_with("trajectories.csv", |w| write_sim_trajectories(w, &r))?;
    stage.write_json("pairs.json", &r.pairs)?;
    stage.write_json("report.json", &json!({ "events": r.steps.len(), "error": report, "skipped": r.skipped }))?;
    let config = json!({ "counterfactual": allow_cross, "vehicle_type": ckpt.vehicle_type.label() });
    let m = manifest("reconstruct", started, None, config, &[&ckpt_path, &events_path])?;
    let dir = stage.commit(m)?;
    eprintln!("v_lon RMSE {:.4} m/s, ADE {:.4} m -> {}", report.rmse["v_lon"], report.ade, dir.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct Comparison {
    metric: &'static str,
    ks: f64,
    ks_p: f64,
    welch_t: f64,
    welch_p: f64,
    observed: (f64, f64),
    counterfactual: (f64, f64),
    n: usize,
}

pub fn counterfactual(a: CounterfactualArgs) -> Result<(), CliError> {
    let started = now_unix();
    let a = resolve(&a, a.config.as_deref())?;
    let ckpt_path = required(&a.checkpoint, "checkpoint")?;
    let events_path = required(&a.events, "events")?;
    let out = required(&a.out, "out")?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let events: Vec<CriticalEvent> = read_json(&events_path)?;
    if events.iter().any(|e| e.pair.vehicle_class == ckpt.vehicle_type) {
        return Err(CliError::Usage(format!(
            "{} contains {} events, the checkpoint's own vehicle type; use `pedsafe reconstruct` for those",
            events_path.display(),
            ckpt.vehicle_type.label()
        )));
    }
    if events.is_empty() {
        return Err(CliError::Usage(format!("{} holds no events", events_path.display())));
    }

    let r = roll_all(&ckpt, &events)?;
    let steps: Vec<StepInfo> = infos(&r).into_iter().flatten().collect();
    let mag = |v: (f64, f64)| v.0.hypot(v.1);
    let metrics: [(&'static str, Vec<f64>, Vec<f64>); 2] = [
        ("speed", steps.iter().map(|s| mag(s.rec_vel)).collect(), steps.iter().map(|s| mag(s.sim_vel)).collect()),
        (
            "acceleration",
            steps.iter().map(|s| mag(s.rec_accel)).collect(),
            steps.iter().map(|s| mag((s.action.alon, s.action.alat))).collect(),
        ),
    ];
    let observed = ckpt_other(ckpt.vehicle_type);
    let mut table = Vec::new();
    for (name, obs, cf) in &metrics {
        let (ks, ks_p) = ks_two_sample(obs, cf)?;
        let (t, p) = welch_t(obs, cf)?;
        table.push(Comparison {
            metric: name,
            ks,
            ks_p,
            welch_t: t,
            welch_p: p,
            observed: mean_std(obs),
            counterfactual: mean_std(cf),
            n: obs.len(),
        });
    }
    let cf_label = format!("{}_policy_in_{}", ckpt.vehicle_type.label(), observed.label());
    let mut stage = Staging::new(&out)?;
    stage.write_with("comparison.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["metric", "scenario", "KS", "p", "mean", "std"])?;
        for c in &table {
            for (scenario, (mean, std)) in [(format!("observed_{}", observed.label()), c.observed), (cf_label.clone(), c.counterfactual)] {
                w.write_record([c.metric.to_string(), scenario, c.ks.to_string(), c.ks_p.to_string(), mean.to_string(), std.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    })?;
    stage.write_with("trajectories.csv", |w| write_sim_trajectories(w, &r))?;
    stage.write_json("pairs.json", &r.pairs)?;
    stage.write_json("summary.json", &json!({ "events": r.steps.len(), "comparison": table, "skipped": r.skipped }))?;
    let config = json!({ "policy_vehicle_type": ckpt.vehicle_type.label(), "event_vehicle_type": observed.label() });
    let m = manifest("counterfactual", started, None, config, &[&ckpt_path, &events_path])?;
    let dir = stage.commit(m)?;
    eprintln!("compared {} steps over {} events -> {}", steps.len(), r.steps.len(), dir.display());
    Ok(())
}

fn ckpt_other(c: AgentClass) -> AgentClass {
    if c == AgentClass::AV {
        AgentClass::HDV
    } else {
        AgentClass::AV
    }
}

/// Sequences from events (series attached) or bare pairs (series computed).
fn load_sequences(input: &Path, a: &AnalyzeArgs, cfg: &CurvTtcConfig, skipped: &mut Vec<Skipped>) -> Result<Vec<Sequence>, CliError> {
    let is_json = input.is_file() && input.extension().is_some_and(|e| e == "json");
    if !is_json {
        let tracks = load_tracks(&csv_files(input)?)?;
        let pairs = extract_from_tracks(&tracks, a.d_thresh.unwrap_or(DEFAULT_D_THRESH))?;
        return series_for(pairs, cfg, skipped);
    }
    let value: Value = read_json(input)?;
    if let Ok(events) = serde_json::from_value::<Vec<CriticalEvent>>(value.clone()) {
        return Ok(events.into_iter().map(|e| Sequence { pair: e.pair, series: e.curvttc_series }).collect());
    }
    match serde_json::from_value::<Vec<InteractionPair>>(value) {
        Ok(pairs) => series_for(pairs, cfg, skipped),
        Err(e) => Err(Error::Data(format!("{}: neither critical events nor interaction pairs: {e}", input.display())).into()),
    }
}

fn reaction_stats(xs: &[f64]) -> Value {
    let (mean, std) = mean_std(xs);
    if xs.is_empty() {
        json!({ "n": 0 })
    } else {
        json!({ "n": xs.len(), "mean": mean, "std": std })
    }
}

/// KS and Welch between two samples, or null when either is too small.
fn compare(a: &[f64], b: &[f64]) -> Value {
    match (ks_two_sample(a, b), welch_t(a, b)) {
        (Ok((d, p)), Ok((t, tp))) => json!({ "ks": d, "ks_p": p, "welch_t": t, "welch_p": tp }),
        _ => Value::Null,
    }
}

fn write_grids(buf: &mut Vec<u8>, grids: &[(&str, ConflictGrid)]) -> pedsafe_core::Result<()> {
    let mut w = csv::Writer::from_writer(buf);
    w.write_record(["vehicle_class", "veh_speed_lo", "ped_speed_lo", "count", "conflicts", "rate"])?;
    for (label, g) in grids {
        for (i, row) in g.cells.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                w.write_record([
                    label.to_string(),
                    (i as f64 * GRID_BIN_WIDTH).to_string(),
                    (j as f64 * GRID_BIN_WIDTH).to_string(),
                    c.count.to_string(),
                    c.conflicts.to_string(),
                    c.rate().map(|r| r.to_string()).unwrap_or_default(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn rates_json(labels: &[&YieldLabel]) -> Value {
    let owned: Vec<YieldLabel> = labels.iter().map(|l| **l).collect();
    let (v, p, u) = yield_rates(&owned);
    json!({ "n": owned.len(), "vehicle_yield_pct": v, "pedestrian_yield_pct": p, "unclassified_pct": u })
}

pub fn analyze(a: AnalyzeArgs) -> Result<(), CliError> {
    let started = now_unix();
    let a = resolve(&a, a.config.as_deref())?;
    let input = required(&a.input, "input")?;
    let out = required(&a.out, "out")?;
    let epsilon = a.epsilon.unwrap_or(pedsafe_core::analytics::REACTION_EPSILON);
    let max_lag = a.max_lag.unwrap_or(pedsafe_core::analytics::MAX_LAG);
    let cfg = CurvTtcConfig {
        threshold: a.threshold.unwrap_or(CurvTtcConfig::default().threshold),
        horizon: a.horizon.unwrap_or(CurvTtcConfig::default().horizon),
        step: a.step.unwrap_or(CurvTtcConfig::default().step),
    };
    cfg.validate()?;
    if !(epsilon >= 0.0) || !(max_lag >= 0.0) {
        return Err(CliError::Usage("--epsilon and --max-lag must be non-negative".into()));
    }

    let mut skipped = Vec::new();
    let seqs = load_sequences(&input, &a, &cfg, &mut skipped)?;

    // reaction times
    let mut reaction_rows = Vec::new();
    for s in &seqs {
        match pair_reaction_time(&s.pair, epsilon, max_lag) {
            Ok(r) => reaction_rows.push((s.pair.id(), s.pair.vehicle_class, r)),
            Err(e @ Error::InsufficientData(_)) => skipped.push(Skipped { id: s.pair.id(), reason: e.to_string() }),
            Err(e) => return Err(e.into()),
        }
    }
    let lags = |c: AgentClass| -> Vec<f64> { reaction_rows.iter().filter(|r| r.1 == c).filter_map(|r| r.2.t_d).collect() };
    let (av_lags, hdv_lags) = (lags(AgentClass::AV), lags(AgentClass::HDV));

    // conflict grids
    let subset = |c: Option<AgentClass>| -> Vec<Sequence> { seqs.iter().filter(|s| c.is_none_or(|c| s.pair.vehicle_class == c)).cloned().collect() };
    let grids = [
        ("AV", conflict_grid(&subset(Some(AgentClass::AV)))?),
        ("HDV", conflict_grid(&subset(Some(AgentClass::HDV)))?),
        ("all", conflict_grid(&subset(None))?),
    ];

    // yielding
    let mut labels = Vec::new();
    for s in &seqs {
        if let Some(l) = classify_yield(s)? {
            let speeds = s.onset_speeds()?.unwrap_or((f64::NAN, f64::NAN));
            labels.push((s.pair.id(), s.pair.vehicle_class, l, speeds));
        }
    }
    let labels_of = |c: Option<AgentClass>| -> Vec<&YieldLabel> { labels.iter().filter(|l| c.is_none_or(|c| l.1 == c)).map(|l| &l.2).collect() };
    let mut quadrants: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for (_, _, l, (v, p)) in &labels {
        *quadrants.entry(speed_quadrant(*v, *p)).or_default().entry(l.label.label()).or_default() += 1;
    }
    let split = |xs: Vec<f64>| -> Value {
        match kmeans_1d(&xs, 2) {
            Ok(k) => json!({ "centroids": k.centroids, "threshold": k.threshold() }),
            Err(_) => Value::Null,
        }
    };
    let onset: Vec<(f64, f64)> = labels.iter().map(|l| l.3).collect();
    let thresholds = json!({
        "vehicle_speed": split(onset.iter().map(|o| o.0).collect()),
        "pedestrian_speed": split(onset.iter().map(|o| o.1).collect()),
    });

    let summary = json!({
        "sequences": class_counts(seqs.iter().map(|s| &s.pair.vehicle_class)),
        "reaction_time": {
            "AV": reaction_stats(&av_lags),
            "HDV": reaction_stats(&hdv_lags),
            "AV_vs_HDV": compare(&av_lags, &hdv_lags),
        },
        "conflict_grid": grids.iter().map(|(k, g)| (k.to_string(), json!({ "included": g.included(), "excluded": g.excluded }))).collect::<BTreeMap<_, _>>(),
        "yield_rates": {
            "AV": rates_json(&labels_of(Some(AgentClass::AV))),
            "HDV": rates_json(&labels_of(Some(AgentClass::HDV))),
            "all": rates_json(&labels_of(None)),
        },
        "onset_speed_clusters": thresholds,
        "quadrants": quadrants,
        "skipped": skipped,
    });

    let mut stage = Staging::new(&out)?;
    stage.write_with("reaction_times.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["pair_id", "vehicle_class", "t_d", "onset_frame", "qualifying"])?;
        for (id, c, r) in &reaction_rows {
            w.write_record([
                id.clone(),
                c.label().to_string(),
                r.t_d.map(|t| t.to_string()).unwrap_or_default(),
                r.onset_frame.to_string(),
                r.qualifying.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    stage.write_with("conflict_grid.csv", |w| write_grids(w, &grids))?;
    stage.write_with("yield_labels.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record([
            "pair_id",
            "vehicle_class",
            "label",
            "both_matched",
            "veh_onset_speed",
            "ped_onset_speed",
            "quadrant",
            "vehicle_decel",
            "rel_speed_reduction",
            "ped_speed_change",
            "backward_displacement",
            "ped_path_length",
            "veh_path_length",
        ])?;
        for (id, c, l, (v, p)) in &labels {
            let e = l.evidence;
            let mut rec = vec![id.clone(), c.label().to_string(), l.label.label().to_string(), l.both_matched.to_string()];
            rec.extend([v.to_string(), p.to_string(), speed_quadrant(*v, *p).to_string()]);
            for x in [e.vehicle_decel, e.rel_speed_reduction, e.ped_speed_change, e.backward_displacement, e.ped_path_length, e.veh_path_length] {
                rec.push(x.to_string());
            }
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    })?;
    stage.write_json("summary.json", &summary)?;
    let config = json!({ "epsilon": epsilon, "max_lag": max_lag, "d_thresh": a.d_thresh.unwrap_or(DEFAULT_D_THRESH), "curvttc": to_value(&cfg)? });
    let m = manifest("analyze", started, None, config, &[&input])?;
    let dir = stage.commit(m)?;
    let unclassified = labels.iter().filter(|l| l.2.label == YieldKind::Unclassified).count();
    eprintln!("{} sequences, {} labelled ({} unclassified) -> {}", seqs.len(), labels.len(), unclassified, dir.display());
    Ok(())
}
