//! Reward terms for both agents.

use serde::{Deserialize, Serialize};

use crate::agent::ActionOmega;
use crate::sim::{detect_collision, WorldState};
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub rho_start: f64,
    pub rho_maintain: f64,
    pub rho_collision: f64,
    pub rho_lane_deviation: f64,
    pub rho_risk: f64,
    pub rho_comfort: f64,
    pub v_smin: f64,
    pub v_smax: f64,
    /// Normalizer for the change in longitudinal acceleration.
    pub accel_norm: f64,
    pub lane_width: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            rho_start: 0.5,
            rho_maintain: 4.0,
            rho_collision: -50.0,
            rho_lane_deviation: -1.0,
            rho_risk: -5.0,
            rho_comfort: -0.5,
            v_smin: 8.0,
            v_smax: 15.0,
            accel_norm: 4.0,
            lane_width: 3.5,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let ok = self.rho_collision <= 0.0
            && self.rho_lane_deviation <= 0.0
            && self.rho_risk <= 0.0
            && self.rho_comfort <= 0.0
            && self.rho_start >= 0.0
            && self.rho_maintain >= 0.0
            && 0.0 < self.v_smin
            && self.v_smin < self.v_smax
            && self.accel_norm > 0.0
            && self.lane_width > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid reward config: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardComponents {
    pub speed: f64,
    pub collision: f64,
    pub lane_deviation: f64,
    pub risk: f64,
    pub comfort: f64,
}

impl RewardComponents {
    /// Driving-agent total: speed + collision + lane deviation.
    pub fn total_phi(&self) -> f64 {
        self.speed + self.collision + self.lane_deviation
    }

    /// Deployment-agent total: all five terms.
    pub fn total_omega(&self) -> f64 {
        self.total_phi() + self.risk + self.comfort
    }
}

/// Two-phase speed reward: a start-phase ramp up to `v_smin` and a
/// maintain-phase ramp from `v_smin` to `v_smax`, flat above.
pub fn speed_reward(v: f64, cfg: &RewardConfig) -> f64 {
    let start = v.clamp(0.0, cfg.v_smin) / cfg.v_smin;
    let maintain = ((v - cfg.v_smin) / (cfg.v_smax - cfg.v_smin)).clamp(0.0, 1.0);
    cfg.rho_start * start + cfg.rho_maintain * maintain
}

pub fn comfort_reward(prev: &ActionOmega, cur: &ActionOmega, cfg: &RewardConfig) -> f64 {
    cfg.rho_comfort
        * ((cur.d_fn - prev.d_fn).abs() / (2.0 * cfg.lane_width)
            + (cur.a_x - prev.a_x).abs() / cfg.accel_norm)
}

/// `prev`/`cur` are the executed actions of the previous and current step;
/// `intervened` is the guard flag for the current step.
pub fn reward_components(
    world: &WorldState,
    prev: &ActionOmega,
    cur: &ActionOmega,
    intervened: bool,
    cfg: &RewardConfig,
) -> RewardComponents {
    let ego = &world.ego;
    let d_ld = (ego.d - world.lanes.nearest_center(ego.d)).abs();
    RewardComponents {
        speed: speed_reward(ego.v_s, cfg),
        collision: if detect_collision(world) { cfg.rho_collision } else { 0.0 },
        lane_deviation: cfg.rho_lane_deviation * d_ld,
        risk: if intervened { cfg.rho_risk } else { 0.0 },
        comfort: comfort_reward(prev, cur, cfg),
    }
}
