//! Synthetic labeler that prefers whichever clip earned more true reward.

use serde::{Deserialize, Serialize};

use crate::env::EnvId;
use crate::error::{Error, Result};
use crate::segment::{Mu, TrajectorySegment};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Return differences of at most this much are reported as indifference.
    pub tie_tolerance: f64,
    /// Clip each step's reward to `[-1, 1]` before summing.
    pub clip_rewards: bool,
}

impl OracleConfig {
    pub fn for_env(env: EnvId) -> Self {
        match env {
            EnvId::Pendulum => Self { tie_tolerance: 1e-9, clip_rewards: false },
            EnvId::Arcade => Self { tie_tolerance: 0.0, clip_rewards: true },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tie_tolerance >= 0.0 {
            Ok(())
        } else {
            Err(Error::config(format!("oracle tie tolerance must be non-negative, got {}", self.tie_tolerance)))
        }
    }
}

/// Label for two returns under the given tolerance.
pub fn label_from_returns(first: f64, second: f64, tie_tolerance: f64) -> Mu {
    if first > second + tie_tolerance {
        Mu::FIRST
    } else if second > first + tie_tolerance {
        Mu::SECOND
    } else {
        Mu::TIE
    }
}

pub fn oracle_label(first: &TrajectorySegment, second: &TrajectorySegment, config: &OracleConfig) -> Result<Mu> {
    config.validate()?;
    let r1 = first.true_return(config.clip_rewards)?;
    let r2 = second.true_return(config.clip_rewards)?;
    Ok(label_from_returns(r1, r2, config.tie_tolerance))
}
