//! Safe distance, safe critical acceleration and the action shield.

use serde::{Deserialize, Serialize};

use crate::agent::{lateral_target, ActionOmega, TC_MAX, TC_MIN};
use crate::rq::RqModel;
use crate::sim::{observe_with_slots, WorldState};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// Tightest bound per set.
    Conservative,
    /// Loosest importance-shifted bound per set.
    Paper,
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "conservative" => Ok(SelectionMode::Conservative),
            "paper" => Ok(SelectionMode::Paper),
            other => Err(Error::Config(format!("unknown shield mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShieldConfig {
    pub k1: f64,
    pub b1: f64,
    pub k2: f64,
    pub b2: f64,
    pub a_max: f64,
    pub a_min: f64,
    pub selection_mode: SelectionMode,
    pub lane_overlap_margin: f64,
    /// Seconds of headway in the safe distance.
    pub headway: f64,
}

impl Default for ShieldConfig {
    fn default() -> Self {
        Self {
            k1: -7.0 / 200.0,
            b1: 4.0,
            k2: 0.92,
            b2: 0.02,
            a_max: 2.0,
            a_min: -2.0,
            selection_mode: SelectionMode::Conservative,
            lane_overlap_margin: 0.5,
            headway: 3.6,
        }
    }
}

impl ShieldConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let lo = self.k1 * 100.0 + self.b1;
        let ok = self.k1 < 0.0
            && self.a_min < self.a_max
            && lo >= TC_MIN - 1e-12
            && self.b1 <= TC_MAX + 1e-12
            && self.lane_overlap_margin >= 0.0
            && self.headway > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid shield config: {self:?}")))
        }
    }
}

/// Where the guard's adjustment horizon comes from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GuardMode {
    Adaptive,
    Fixed(f64),
    Off,
}

impl std::str::FromStr for GuardMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "adaptive" => Ok(GuardMode::Adaptive),
            "off" => Ok(GuardMode::Off),
            _ => {
                let tc = s
                    .strip_prefix("fixed:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .filter(|v| *v > 0.0)
                    .ok_or_else(|| Error::Config(format!("unknown guard `{s}`")))?;
                Ok(GuardMode::Fixed(tc))
            }
        }
    }
}

impl std::fmt::Display for GuardMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GuardMode::Adaptive => write!(f, "adaptive"),
            GuardMode::Fixed(t) => write!(f, "fixed:{t}"),
            GuardMode::Off => write!(f, "off"),
        }
    }
}

impl Serialize for GuardMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for GuardMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn safe_distance(v_ego: f64, headway: f64) -> f64 {
    headway * v_ego
}

/// Constant acceleration that restores the safe gap to a vehicle after
/// `t_c`: an upper bound for vehicles ahead (`ds > 0`), a lower bound for
/// vehicles behind. `ds = s_obj - s_ego`, `dv = v_obj - v_ego`. A zero gap
/// is treated as a vehicle ahead already inside the safe distance and
/// reported as `a_min`.
pub fn sca(ds: f64, dv: f64, s_safe: f64, t_c: f64, a_min: f64) -> Result<f64, Error> {
    if !(t_c > 0.0 && t_c.is_finite()) {
        return Err(Error::InvalidHorizon(t_c));
    }
    if ds == 0.0 {
        return Ok(a_min);
    }
    Ok(2.0 * (ds - ds.signum() * s_safe + t_c * dv) / (t_c * t_c))
}

pub fn rq_to_tc(rq: f64, cfg: &ShieldConfig) -> f64 {
    (cfg.k1 * rq + cfg.b1).clamp(TC_MIN, TC_MAX)
}

/// Horizon and per-vehicle importance used by one shield evaluation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RiskAssessment {
    pub t_c: f64,
    pub rq_percent: Option<f64>,
    /// `(vehicle id, importance score)` for vehicles in observation slots.
    pub importance: Vec<(u32, f64)>,
}

impl RiskAssessment {
    pub fn fixed(t_c: f64) -> Self {
        Self {
            t_c,
            rq_percent: None,
            importance: Vec::new(),
        }
    }

    pub fn importance_of(&self, id: u32) -> f64 {
        self.importance
            .iter()
            .find(|(v, _)| *v == id)
            .map_or(0.0, |(_, s)| *s)
    }
}

pub fn assess_risk(world: &WorldState, model: &RqModel, cfg: &ShieldConfig) -> RiskAssessment {
    let (x, slots) = observe_with_slots(world);
    let out = model.infer(&x);
    let importance = slots
        .vehicles
        .iter()
        .enumerate()
        .filter_map(|(i, id)| id.map(|id| (id, out.importance[i])))
        .collect();
    RiskAssessment {
        t_c: rq_to_tc(out.rq_percent, cfg),
        rq_percent: Some(out.rq_percent),
        importance,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub pre: Option<f64>,
    pub follow: Option<f64>,
    pub binding_pre: Option<u32>,
    pub binding_follow: Option<u32>,
    pub target_center: f64,
}

/// Bounds against vehicles whose lateral center lies within half a lane
/// plus the margin of `target_center`.
pub fn constraint_bounds(world: &WorldState, risk: &RiskAssessment, target_center: f64, cfg: &ShieldConfig) -> Bounds {
    let ego = &world.ego;
    let s_safe = safe_distance(ego.v_s.max(0.0), cfg.headway);
    let band = world.lanes.lane_width / 2.0 + cfg.lane_overlap_margin;
    let mut out = Bounds {
        pre: None,
        follow: None,
        binding_pre: None,
        binding_follow: None,
        target_center,
    };
    for tv in world.traffic.iter().filter(|t| !t.departed) {
        let v = &tv.state;
        if (v.d - target_center).abs() > band {
            continue;
        }
        let ds = v.s - ego.s;
        let a = sca(ds, v.v_s - ego.v_s, s_safe, risk.t_c, cfg.a_min).expect("positive horizon");
        let key = match cfg.selection_mode {
            SelectionMode::Conservative => a,
            SelectionMode::Paper => a + cfg.k2 * risk.importance_of(v.id) + cfg.b2,
        };
        if ds >= 0.0 {
            let better = match (cfg.selection_mode, out.pre) {
                (_, None) => true,
                (SelectionMode::Conservative, Some(p)) => key < p,
                (SelectionMode::Paper, Some(p)) => key > p,
            };
            if better {
                out.pre = Some(key);
                out.binding_pre = Some(v.id);
            }
        } else if out.follow.map_or(true, |f| key > f) {
            out.follow = Some(key);
            out.binding_follow = Some(v.id);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShieldDecision {
    pub intervened: bool,
    pub lateral_overridden: bool,
    pub longitudinal_overridden: bool,
    pub proposed: ActionOmega,
    pub final_action: ActionOmega,
    pub a_safe_pre: Option<f64>,
    pub a_safe_follow: Option<f64>,
    pub binding_pre: Option<u32>,
    pub binding_follow: Option<u32>,
    pub t_c_used: f64,
    pub rq_percent: Option<f64>,
}

impl ShieldDecision {
    pub fn passthrough(action: ActionOmega) -> Self {
        Self {
            intervened: false,
            lateral_overridden: false,
            longitudinal_overridden: false,
            proposed: action,
            final_action: action,
            a_safe_pre: None,
            a_safe_follow: None,
            binding_pre: None,
            binding_follow: None,
            t_c_used: f64::NAN,
            rq_percent: None,
        }
    }
}

fn lateral_conflict(b: &Bounds, cfg: &ShieldConfig) -> bool {
    let inconsistent = matches!((b.pre, b.follow), (Some(p), Some(f)) if p < f);
    inconsistent || b.pre.is_some_and(|p| p < cfg.a_min) || b.follow.is_some_and(|f| f > cfg.a_max)
}

/// Lateral check against the proposed target lane (falling back to lane
/// keeping), then the longitudinal clamp.
pub fn shield_with(world: &WorldState, risk: &RiskAssessment, action: ActionOmega, cfg: &ShieldConfig) -> ShieldDecision {
    let ego = &world.ego;
    let mut decision = ShieldDecision::passthrough(action);
    decision.t_c_used = risk.t_c;
    decision.rq_percent = risk.rq_percent;

    let target = lateral_target(action.d_fn, ego, &world.lanes);
    let mut bounds = constraint_bounds(world, risk, target, cfg);
    let mut final_action = action;
    if lateral_conflict(&bounds, cfg) {
        decision.lateral_overridden = true;
        final_action.d_fn = 0.0;
        let hold = lateral_target(0.0, ego, &world.lanes);
        bounds = constraint_bounds(world, risk, hold, cfg);
    }

    let above = bounds.pre.is_some_and(|p| final_action.a_x > p);
    let below = bounds.follow.is_some_and(|f| final_action.a_x < f);
    if above || below {
        decision.longitudinal_overridden = true;
        final_action.a_x = bounds.pre.unwrap_or(cfg.a_max).clamp(cfg.a_min, cfg.a_max);
    }

    decision.intervened = decision.lateral_overridden || decision.longitudinal_overridden;
    decision.final_action = final_action;
    decision.a_safe_pre = bounds.pre;
    decision.a_safe_follow = bounds.follow;
    decision.binding_pre = bounds.binding_pre;
    decision.binding_follow = bounds.binding_follow;
    decision
}

/// Adaptive shield: horizon from the risk model.
pub fn shield(world: &WorldState, model: &RqModel, action: ActionOmega, cfg: &ShieldConfig) -> ShieldDecision {
    let risk = assess_risk(world, model, cfg);
    shield_with(world, &risk, action, cfg)
}
