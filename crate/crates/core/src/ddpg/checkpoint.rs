use std::fs;
use std::path::Path;

use pedsafe_nn::ParamStore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Agent, ActorNet, CriticNet, TrainConfig};
use crate::curvttc::CriticalEvent;
use crate::env::RewardVariant;
use crate::error::{Error, Result};
use crate::traj::AgentClass;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Hex SHA-256 of the corpus serialized as JSON.
pub fn corpus_digest(corpus: &[CriticalEvent]) -> Result<String> {
    let bytes = serde_json::to_vec(corpus)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Trained policy of one vehicle type with everything needed to resume
/// inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format_version: u32,
    pub vehicle_type: AgentClass,
    pub variant: RewardVariant,
    pub config: TrainConfig,
    pub corpus_digest: String,
    pub actor: serde_json::Value,
    pub critic: serde_json::Value,
    pub target_actor: serde_json::Value,
    pub target_critic: serde_json::Value,
}

impl PolicyCheckpoint {
    pub fn from_agent(agent: &Agent, vehicle_type: AgentClass, variant: RewardVariant, config: TrainConfig, corpus_digest: String) -> Self {
        PolicyCheckpoint {
            format_version: CHECKPOINT_VERSION,
            vehicle_type,
            variant,
            config,
            corpus_digest,
            actor: agent.actor.params.to_json_value(),
            critic: agent.critic.params.to_json_value(),
            target_actor: agent.target_actor.params.to_json_value(),
            target_critic: agent.target_critic.params.to_json_value(),
        }
    }

    pub fn actor(&self) -> Result<ActorNet> {
        ActorNet::from_params(ParamStore::from_json_value(self.actor.clone())?)
    }

    pub fn critic(&self) -> Result<CriticNet> {
        CriticNet::from_params(ParamStore::from_json_value(self.critic.clone())?)
    }

    pub fn agent(&self) -> Result<Agent> {
        Ok(Agent {
            actor: self.actor()?,
            critic: self.critic()?,
            target_actor: ActorNet::from_params(ParamStore::from_json_value(self.target_actor.clone())?)?,
            target_critic: CriticNet::from_params(ParamStore::from_json_value(self.target_critic.clone())?)?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: PolicyCheckpoint = serde_json::from_str(s)?;
        if c.format_version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})", c.format_version)));
        }
        if !c.vehicle_type.is_vehicle() {
            return Err(Error::Data("checkpoint vehicle type must be AV or HDV".into()));
        }
        c.agent()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }
}
