//! Pedestrian–vehicle interaction safety toolkit: trajectory ingestion,
//! curvilinear time-to-collision, a pedestrian response environment,
//! DDPG training of SMamba policies, analytics and a synthetic generator.

pub mod analytics;
pub mod curvttc;
pub mod ddpg;
pub mod env;
pub mod error;
pub mod synth;
pub mod traj;

pub use error::{Error, ErrorKind, Result};
