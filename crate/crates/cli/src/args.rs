//! Command-line flags. Every command accepts `--config <json>` whose keys
//! are the long flag names in snake case; flags given on the command line
//! win over the file.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use pedsafe_core::env::RewardKind;
use pedsafe_core::synth::TemplateKind;
use pedsafe_core::traj::AgentClass;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "pedsafe", version, about = "Pedestrian-vehicle interaction safety toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic trajectory corpus
    Synth(SynthArgs),
    /// Extract interactions, CurvTTC series and critical events
    Extract(ExtractArgs),
    /// Train an SMamba-DDPG pedestrian policy
    Train(TrainArgs),
    /// Roll a trained policy out on events of its own vehicle type
    Reconstruct(ReconstructArgs),
    /// Apply a policy to events of the other vehicle type and compare distributions
    Counterfactual(CounterfactualArgs),
    /// Reaction times, conflict grids and yielding labels
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KindArg {
    Crossing,
    Headon,
    Arc,
}

impl From<KindArg> for TemplateKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Crossing => TemplateKind::StraightCrossing,
            KindArg::Headon => TemplateKind::HeadOn,
            KindArg::Arc => TemplateKind::TurningArc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VehicleArg {
    Av,
    Hdv,
}

impl From<VehicleArg> for AgentClass {
    fn from(v: VehicleArg) -> Self {
        match v {
            VehicleArg::Av => AgentClass::AV,
            VehicleArg::Hdv => AgentClass::HDV,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardArg {
    Distance,
    AbsVelocity,
    RelVelocity,
}

impl From<RewardArg> for RewardKind {
    fn from(r: RewardArg) -> Self {
        match r {
            RewardArg::Distance => RewardKind::Distance,
            RewardArg::AbsVelocity => RewardKind::AbsVelocity,
            RewardArg::RelVelocity => RewardKind::RelVelocity,
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthArgs {
    /// JSON file with default values for any of these flags
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Scenario template [default: crossing]
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    /// Number of scenarios [default: 100]
    #[arg(long)]
    pub count: Option<usize>,
    /// Random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Positional noise std, metres [default: 0]
    #[arg(long)]
    pub noise: Option<f64>,
    /// Share of scenarios built to be CurvTTC-critical [default: 0.5]
    #[arg(long)]
    pub critical_fraction: Option<f64>,
    /// Share of scenarios whose vehicle is an AV [default: 0.5]
    #[arg(long)]
    pub av_fraction: Option<f64>,
    /// Share of critical scenarios resolved by the vehicle yielding [default: 0.5]
    #[arg(long)]
    pub vehicle_yield_fraction: Option<f64>,
    /// Vehicle speed range lower end, m/s [default: 2.5]
    #[arg(long)]
    pub veh_speed_min: Option<f64>,
    /// Vehicle speed range upper end, m/s [default: 4.0]
    #[arg(long)]
    pub veh_speed_max: Option<f64>,
    /// Pedestrian speed range lower end, m/s [default: 0.9]
    #[arg(long)]
    pub ped_speed_min: Option<f64>,
    /// Pedestrian speed range upper end, m/s [default: 1.8]
    #[arg(long)]
    pub ped_speed_max: Option<f64>,
    /// Initial vehicle distance to the conflict point, lower end, m [default: 14]
    #[arg(long)]
    pub gap_min: Option<f64>,
    /// Initial vehicle distance to the conflict point, upper end, m [default: 22]
    #[arg(long)]
    pub gap_max: Option<f64>,
    /// Turning radius lower end for arc scenarios, m [default: 8]
    #[arg(long)]
    pub radius_min: Option<f64>,
    /// Turning radius upper end for arc scenarios, m [default: 15]
    #[arg(long)]
    pub radius_max: Option<f64>,
    /// Vehicle drives away from the pedestrian [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub diverging: Option<bool>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractArgs {
    /// JSON file with default values for any of these flags
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Trajectory CSV file or a directory of CSV files
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Interaction distance threshold, m [default: 0.1]
    #[arg(long)]
    pub d_thresh: Option<f64>,
    /// CurvTTC collision threshold, m [default: 1.3]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// CurvTTC prediction horizon, s [default: 10]
    #[arg(long)]
    pub horizon: Option<f64>,
    /// CurvTTC search step, s [default: 0.1]
    #[arg(long)]
    pub step: Option<f64>,
    /// Outlier speed limit, m/s [default: 90]
    #[arg(long)]
    pub max_speed: Option<f64>,
    /// Outlier acceleration limit, m/s^2 [default: 7]
    #[arg(long)]
    pub max_accel: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// JSON file with default values for any of these flags
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Critical events JSON written by `extract`
    #[arg(long)]
    pub events: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Train on events with this vehicle type
    #[arg(long, value_enum)]
    pub vehicle_type: Option<VehicleArg>,
    /// Reward variant [default: abs-velocity]
    #[arg(long, value_enum)]
    pub reward: Option<RewardArg>,
    /// Training episodes [default: 3000]
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Minibatch size [default: 256]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Actor learning rate [default: 0.0005]
    #[arg(long)]
    pub lr_actor: Option<f64>,
    /// Critic learning rate [default: 0.001]
    #[arg(long)]
    pub lr_critic: Option<f64>,
    /// Discount factor [default: 0.9]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Soft update rate [default: 0.01]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Exploration noise std per action axis, m/s^2 [default: 0.01]
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Replay buffer capacity [default: 10000]
    #[arg(long)]
    pub buffer: Option<usize>,
    /// Random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructArgs {
    /// JSON file with default values for any of these flags
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Policy checkpoint written by `train`
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Critical events JSON
    #[arg(long)]
    pub events: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Allow events whose vehicle type differs from the checkpoint's [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub counterfactual: Option<bool>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CounterfactualArgs {
    /// JSON file with default values for any of these flags
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Policy checkpoint written by `train`
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Critical events JSON of the other vehicle type
    #[arg(long)]
    pub events: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeArgs {
    /// JSON file with default values for any of these flags
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Interactions or events JSON, or trajectory CSV file/directory
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Pedestrian acceleration change counted as a reaction, m/s^2 [default: 0.05]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Largest reaction lag searched, s [default: 3.0]
    #[arg(long)]
    pub max_lag: Option<f64>,
    /// Interaction distance threshold for CSV input, m [default: 0.1]
    #[arg(long)]
    pub d_thresh: Option<f64>,
    /// CurvTTC collision threshold, m [default: 1.3]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// CurvTTC prediction horizon, s [default: 10]
    #[arg(long)]
    pub horizon: Option<f64>,
    /// CurvTTC search step, s [default: 0.1]
    #[arg(long)]
    pub step: Option<f64>,
}

/// Overlays command-line values on the config file, if any.
pub fn resolve<T: Serialize + DeserializeOwned>(args: &T, config: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = config else {
        return Ok(serde_json::from_value(serde_json::to_value(args).map_err(json_usage)?).map_err(json_usage)?);
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut merged: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    let serde_json::Value::Object(base) = &mut merged else {
        return Err(CliError::Usage(format!("config {} must hold a JSON object", path.display())));
    };
    if let serde_json::Value::Object(given) = serde_json::to_value(args).map_err(json_usage)? {
        for (k, v) in given {
            if !v.is_null() {
                base.insert(k, v);
            }
        }
    }
    serde_json::from_value(merged).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

fn json_usage(e: serde_json::Error) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T, CliError> {
    v.clone().ok_or_else(|| CliError::Usage(format!("missing required --{flag}")))
}
