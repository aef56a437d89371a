use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pedsafe_core::synth::{planted_lag_pair, LagPattern};
use pedsafe_core::traj::{time_of, AgentClass, InteractionPair, TrackPoint, Trajectory};
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pedsafe")).args(args).output().expect("spawn pedsafe")
}

fn ok(args: &[&str]) {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: PathBuf) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect()
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("syn");
    let mut args = vec!["synth", "--out", p(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

/// Constant-velocity head-on approach; never closer than 4 m.
fn head_on(id: &str, v_veh: f64, v_ped: f64) -> InteractionPair {
    let n = 31;
    let traj = |agent: &str, class, x0: f64, vx: f64| Trajectory {
        scenario_id: id.into(),
        agent_id: agent.into(),
        agent_class: class,
        points: (0..n)
            .map(|k| {
                let t = time_of(k);
                TrackPoint { t, x: x0 + vx * t, y: 0.0, vx, vy: 0.0, heading: if vx < 0.0 { std::f64::consts::PI } else { 0.0 } }
            })
            .collect(),
    };
    let pedestrian = traj("ped", AgentClass::Pedestrian, 0.0, v_ped);
    let vehicle = traj("veh", AgentClass::HDV, 4.0 + 3.0 * (v_veh + v_ped), -v_veh);
    InteractionPair { pedestrian, vehicle, vehicle_class: AgentClass::HDV, min_distance: 4.0, overlap_window: (0.0, time_of(n - 1)) }
}

#[test]
fn help_and_bad_flags() {
    let o = run(&["train", "--help"]);
    assert!(o.status.success());
    let help = String::from_utf8(o.stdout).unwrap();
    for flag in ["--episodes", "--batch", "--gamma", "--tau", "--noise-sigma", "--buffer", "--seed", "--lr-actor", "--lr-critic", "--config"] {
        assert!(help.contains(flag), "{flag}");
    }
    for d in ["[default: 3000]", "[default: 256]", "[default: 0.9]", "[default: 0.01]", "[default: 10000]"] {
        assert!(help.contains(d), "{d}");
    }
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["train", "--no-such-flag"]), 1);
    assert_eq!(code(&["extract"]), 1);
}

#[test]
fn synth_is_deterministic_and_extract_round_trips() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["--kind", "crossing", "--count", "100", "--seed", "7"];
    let sa = synth(a.path(), &args);
    let sb = synth(b.path(), &args);
    assert_eq!(fs::read(sa.join("tracks.csv")).unwrap(), fs::read(sb.join("tracks.csv")).unwrap());
    let meta = json(sa.join("scenarios.json"));
    let meta = meta.as_array().unwrap();
    assert_eq!(meta.len(), 100);
    let manifest = json(sa.join("manifest.json"));
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["outputs"], serde_json::json!(["tracks.csv", "scenarios.json"]));

    let ext = a.path().join("ext");
    ok(&["extract", "--input", p(&sa), "--out", p(&ext)]);
    let summary = json(ext.join("summary.json"));
    for class in ["AV", "HDV"] {
        let intended = meta.iter().filter(|m| m["intended_critical"] == true && m["vehicle_class"] == class).count();
        assert_eq!(summary["critical_events"][class], intended, "{class}");
    }
    assert_eq!(summary["interactions"]["AV"].as_u64().unwrap() + summary["interactions"]["HDV"].as_u64().unwrap(), 100);
    let events = json(ext.join("events.json"));
    assert_eq!(events.as_array().unwrap().len(), 50);
    let series = csv_rows(ext.join("curvttc.csv"));
    assert!(series.len() > 100 * 100);
}

#[test]
fn infeasible_synth_geometry_fails_cleanly() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("syn");
    let o = run(&["synth", "--gap-min", "100", "--gap-max", "120", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("initial gap"));
    assert!(!out.exists());
}

#[test]
fn extract_edge_cases() {
    let d = tempfile::tempdir().unwrap();
    let empty = d.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = d.path().join("ext");
    ok(&["extract", "--input", p(&empty), "--out", p(&out)]);
    let s = json(out.join("summary.json"));
    assert_eq!(s["interactions"], serde_json::json!({"AV": 0, "HDV": 0}));
    assert_eq!(s["critical_events"], serde_json::json!({"AV": 0, "HDV": 0}));

    let bad = d.path().join("bad");
    fs::create_dir(&bad).unwrap();
    fs::write(bad.join("a.csv"), "scenario_id,track_id,object_type,timestep,position_x,position_y,heading,velocity_x,velocity_y\ns,p,pedestrian,0,zero,0,0,0,0\n").unwrap();
    let out2 = d.path().join("ext2");
    let o = run(&["extract", "--input", p(&bad), "--out", p(&out2)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("a.csv"));
    assert!(!out2.exists());
    assert!(!d.path().join("ext2.partial").exists());

    // a failed run leaves an earlier output untouched
    let o = run(&["extract", "--input", p(&bad), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(out.join("summary.json").exists());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("cfg.json");
    fs::write(&cfg, r#"{"count": 3, "seed": 5, "kind": "arc"}"#).unwrap();
    let out = d.path().join("syn");
    ok(&["synth", "--config", p(&cfg), "--seed", "9", "--out", p(&out)]);
    let m = json(out.join("manifest.json"));
    assert_eq!(m["config"]["count"], 3);
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["template"]["kind"], "TurningArc");

    fs::write(&cfg, r#"{"cuont": 3}"#).unwrap();
    assert_eq!(code(&["synth", "--config", p(&cfg), "--out", p(&out)]), 1);
}

#[test]
fn train_reconstruct_and_counterfactual_guards() {
    let d = tempfile::tempdir().unwrap();
    let syn = synth(d.path(), &["--count", "8", "--seed", "4", "--critical-fraction", "1"]);
    let ext = d.path().join("ext");
    ok(&["extract", "--input", p(&syn), "--out", p(&ext)]);
    let events = ext.join("events.json");

    let tr = |name: &str, extra: &[&str]| -> PathBuf {
        let out = d.path().join(name);
        let mut args = vec!["train", "--events", p(&events), "--vehicle-type", "av", "--episodes", "3", "--batch", "16", "--seed", "2", "--out", p(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        out
    };
    let t1 = tr("t1", &[]);
    let t2 = tr("t2", &[]);
    assert_eq!(fs::read(t1.join("reward_curve.csv")).unwrap(), fs::read(t2.join("reward_curve.csv")).unwrap());
    assert_eq!(csv_rows(t1.join("reward_curve.csv")).len(), 3);
    let m = json(t1.join("manifest.json"));
    let c = &m["config"]["train"];
    assert_eq!((c["episodes"].as_u64(), c["buffer"].as_u64()), (Some(3), Some(10000)));
    assert_eq!((c["gamma"].as_f64(), c["tau"].as_f64(), c["noise_sigma"].as_f64()), (Some(0.9), Some(0.01), Some(0.01)));

    // defaults land in the manifest untouched
    let t3 = d.path().join("t3");
    ok(&["train", "--events", p(&events), "--vehicle-type", "hdv", "--episodes", "1", "--out", p(&t3)]);
    let c = json(t3.join("manifest.json"))["config"]["train"].clone();
    assert_eq!((c["batch"].as_u64(), c["buffer"].as_u64(), c["gamma"].as_f64()), (Some(256), Some(10000), Some(0.9)));

    let no_events = d.path().join("none.json");
    fs::write(&no_events, "[]").unwrap();
    assert_eq!(code(&["train", "--events", p(&no_events), "--vehicle-type", "av", "--out", p(&d.path().join("t4"))]), 1);

    let ckpt = t1.join("checkpoint.json");
    let rec = d.path().join("rec");
    ok(&["reconstruct", "--checkpoint", p(&ckpt), "--events", p(&ext.join("events_av.json")), "--out", p(&rec)]);
    let report = json(rec.join("report.json"));
    assert!(report["error"]["rmse"]["v_lon"].as_f64().unwrap().is_finite());
    assert!(rec.join("trajectories.csv").exists() && rec.join("pairs.json").exists());

    let hdv = ext.join("events_hdv.json");
    let o = run(&["reconstruct", "--checkpoint", p(&ckpt), "--events", p(&hdv), "--out", p(&d.path().join("rec2"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--counterfactual"));
    ok(&["reconstruct", "--checkpoint", p(&ckpt), "--events", p(&hdv), "--counterfactual", "--out", p(&d.path().join("rec3"))]);

    let o = run(&["counterfactual", "--checkpoint", p(&ckpt), "--events", p(&ext.join("events_av.json")), "--out", p(&d.path().join("cf0"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("reconstruct"));

    let cf = d.path().join("cf");
    ok(&["counterfactual", "--checkpoint", p(&ckpt), "--events", p(&hdv), "--out", p(&cf)]);
    let text = fs::read_to_string(cf.join("comparison.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("metric,scenario,KS,p,mean,std"));
    let rows = csv_rows(cf.join("comparison.csv"));
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["speed", "speed", "acceleration", "acceleration"]);
    assert_eq!(rows[0][1], "observed_HDV");
    assert_eq!(rows[1][1], "AV_policy_in_HDV");
}

#[test]
fn analyze_recovers_planted_lags() {
    let d = tempfile::tempdir().unwrap();
    let lags = [0.0, 0.4, 1.1, 2.5];
    let pairs: Vec<InteractionPair> = lags
        .iter()
        .enumerate()
        .map(|(i, &lag)| {
            let mut pair = planted_lag_pair(lag, 0.0, &LagPattern::default(), i as u64).unwrap();
            pair.pedestrian.scenario_id = format!("lag{i}");
            pair.vehicle.scenario_id = format!("lag{i}");
            pair
        })
        .collect();
    let input = d.path().join("pairs.json");
    fs::write(&input, serde_json::to_string(&pairs).unwrap()).unwrap();
    let out = d.path().join("an");
    ok(&["analyze", "--input", p(&input), "--out", p(&out)]);
    let rows = csv_rows(out.join("reaction_times.csv"));
    assert_eq!(rows.len(), lags.len());
    for (row, lag) in rows.iter().zip(lags) {
        assert_eq!(row[2].parse::<f64>().unwrap(), lag, "{row:?}");
    }
}

#[test]
fn analyze_all_conflict_corpus() {
    let d = tempfile::tempdir().unwrap();
    let pairs = vec![head_on("a", 3.0, 1.0), head_on("b", 3.1, 1.2), head_on("c", 1.2, 0.6), head_on("d", 2.0, 1.6)];
    let input = d.path().join("pairs.json");
    fs::write(&input, serde_json::to_string(&pairs).unwrap()).unwrap();
    let out = d.path().join("an");
    ok(&["analyze", "--input", p(&input), "--out", p(&out)]);
    let rows = csv_rows(out.join("conflict_grid.csv"));
    let occupied: Vec<&Vec<String>> = rows.iter().filter(|r| r[0] == "HDV" && r[3] != "0").collect();
    assert_eq!(occupied.len(), 3);
    for r in &occupied {
        assert_eq!(r[5], "1", "{r:?}");
    }
    let cell = |v: &str, p: &str| rows.iter().find(|r| r[0] == "HDV" && r[1] == v && r[2] == p).unwrap()[3].clone();
    assert_eq!(cell("3", "1"), "2");
    assert_eq!(cell("1", "0.5"), "1");
    assert_eq!(cell("2", "1.5"), "1");

    // constant velocities never meet either yielding rule
    let labels = csv_rows(out.join("yield_labels.csv"));
    assert_eq!(labels.len(), 4);
    assert!(labels.iter().all(|r| r[2] == "unclassified"));
    let s = json(out.join("summary.json"));
    assert_eq!(s["yield_rates"]["all"]["vehicle_yield_pct"], 0.0);
    assert_eq!(s["yield_rates"]["all"]["pedestrian_yield_pct"], 0.0);
}
