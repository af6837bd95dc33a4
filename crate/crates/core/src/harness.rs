//! Pipeline orchestration: run configuration, training and evaluation loops,
//! metrics, episode traces and spatio-temporal plots.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{
    plan_omega, plan_phi, ActionBox, ActionOmega, ActionPhi, ReplayBuffer, Sac, SacConfig,
    Transition, UpdateStats,
};
use crate::frenet::{PidGains, PidTracker, Trajectory};
use crate::guard::{shield, shield_with, GuardMode, RiskAssessment, ShieldConfig, ShieldDecision};
use crate::rewards::{reward_components, RewardComponents, RewardConfig};
use crate::rq::{train_rq, write_dataset, DaRecord, RqConfig, RqModel, RqTrainReport};
use crate::sim::{
    collision_target, observe, spawn_scenario, step_world, CollisionTarget, IdmParams,
    LaneGeometry, Scenario, TrafficParams, WorldState, DT, OBS_DIM,
};
use crate::Error;

pub const DRIVING_CHECKPOINT: &str = "driving_agent.ckpt";
pub const DEPLOYMENT_CHECKPOINT: &str = "deployment_agent.ckpt";
pub const RISK_CHECKPOINT: &str = "risk_model.ckpt";
pub const DATASET_FILE: &str = "dataset.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub seed: u64,
    /// Seeds for multi-seed training runs.
    pub seeds: Vec<u64>,
    pub driving_steps: usize,
    pub deployment_steps: usize,
    pub dataset_records: usize,
    pub eval_episodes: usize,
    pub max_episode_steps: usize,
    /// Upper end of the target-speed action of the driving agent.
    pub target_speed_max: f64,
    pub guard: GuardMode,
    /// Window length in steps for return trends.
    pub return_window: usize,
    /// Window length in steps for the intervention-ratio log.
    pub intervention_window: usize,
    pub traffic: TrafficParams,
    pub reward: RewardConfig,
    pub shield: ShieldConfig,
    pub sac: SacConfig,
    pub rq: RqConfig,
    pub pid: PidGains,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::A,
            seed: 0,
            seeds: vec![1, 2, 3],
            driving_steps: 150_000,
            deployment_steps: 100_000,
            dataset_records: 50_000,
            eval_episodes: 200,
            max_episode_steps: 600,
            target_speed_max: 15.0,
            guard: GuardMode::Adaptive,
            return_window: 10_000,
            intervention_window: 1_000,
            traffic: TrafficParams::default(),
            reward: RewardConfig::default(),
            shield: ShieldConfig::default(),
            sac: SacConfig::default(),
            rq: RqConfig::default(),
            pid: PidGains::default(),
        }
    }
}

impl RunConfig {
    /// Step counts, dataset size and network widths of the full-scale runs.
    pub fn full_scale() -> Self {
        Self {
            driving_steps: 1_000_000,
            deployment_steps: 1_000_000,
            dataset_records: 300_000,
            sac: SacConfig::paper_scale(),
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, Error> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.traffic.validate()?;
        self.reward.validate()?;
        self.shield.validate()?;
        if self.max_episode_steps == 0 || self.eval_episodes == 0 {
            return Err(Error::Config("episode limits must be positive".into()));
        }
        if self.return_window == 0 || self.intervention_window == 0 {
            return Err(Error::Config("windows must be positive".into()));
        }
        if !(self.target_speed_max > 0.0) {
            return Err(Error::Config("target_speed_max must be positive".into()));
        }
        if let GuardMode::Fixed(t) = self.guard {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("fixed horizon must be positive, got {t}")));
            }
        }
        if self.sac.batch_size == 0 || self.rq.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn lanes(&self) -> LaneGeometry {
        LaneGeometry::default()
    }

    pub fn driving_box(&self) -> ActionBox {
        ActionBox::phi(self.lanes().lane_width, self.target_speed_max)
    }

    pub fn deployment_box(&self) -> ActionBox {
        ActionBox::omega(self.lanes().lane_width, self.shield.a_min, self.shield.a_max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    /// Chooses horizon, lateral offset and target speed.
    Driving,
    /// Chooses lateral offset and acceleration under the guard.
    Deployment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "T")]
    Training,
    #[serde(rename = "A")]
    Application,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub stage: Stage,
    pub episodes: usize,
    pub steps: usize,
    pub collisions: usize,
    /// Percent of episodes ending in a collision.
    pub collision_rate: f64,
    /// Mean longitudinal ego speed over all control steps.
    pub avg_speed: f64,
    /// Percent of control steps with a guard intervention.
    pub intervention_ratio: f64,
    pub avg_return: f64,
}

/// Per-episode totals that metrics are aggregated from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub seed: u64,
    pub steps: usize,
    pub episode_return: f64,
    pub collision: Option<CollisionEvent>,
    pub interventions: usize,
    pub speed_sum: f64,
}

impl MetricsReport {
    pub fn from_episodes(stage: Stage, episodes: &[EpisodeSummary]) -> Option<Self> {
        if episodes.is_empty() {
            return None;
        }
        let n = episodes.len();
        let steps: usize = episodes.iter().map(|e| e.steps).sum();
        let collisions = episodes.iter().filter(|e| e.collision.is_some()).count();
        let interventions: usize = episodes.iter().map(|e| e.interventions).sum();
        let speed: f64 = episodes.iter().map(|e| e.speed_sum).sum();
        let ret: f64 = episodes.iter().map(|e| e.episode_return).sum();
        let per_step = |x: f64| if steps == 0 { 0.0 } else { x / steps as f64 };
        Some(Self {
            stage,
            episodes: n,
            steps,
            collisions,
            collision_rate: 100.0 * collisions as f64 / n as f64,
            avg_speed: per_step(speed),
            intervention_ratio: 100.0 * per_step(interventions as f64),
            avg_return: ret / n as f64,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionKind {
    /// Ego ran into a vehicle ahead in its lane.
    Preceding,
    /// A vehicle behind ran into the ego.
    Following,
    SideSwipe,
    Pedestrian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub target: CollisionTarget,
    pub kind: CollisionKind,
}

/// Same-lane contacts count as front or rear depending on the sign of the
/// longitudinal offset; everything else is a side contact.
pub fn classify_collision(world: &WorldState, target: CollisionTarget) -> CollisionEvent {
    let kind = match target {
        CollisionTarget::Pedestrian(_) => CollisionKind::Pedestrian,
        CollisionTarget::Vehicle(id) => {
            let ego = &world.ego;
            let v = world
                .traffic
                .iter()
                .find(|t| t.state.id == id)
                .map(|t| &t.state)
                .expect("collision target exists");
            if (v.d - ego.d).abs() < world.lanes.lane_width / 2.0 {
                if v.s >= ego.s {
                    CollisionKind::Preceding
                } else {
                    CollisionKind::Following
                }
            } else {
                CollisionKind::SideSwipe
            }
        }
    };
    CollisionEvent { target, kind }
}

/// Outcome of one control step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    pub components: RewardComponents,
    pub reward: f64,
    /// Executed action in box coordinates.
    pub executed: Vec<f64>,
    pub decision: Option<ShieldDecision>,
    pub collision: Option<CollisionEvent>,
    pub terminal: bool,
}

impl StepInfo {
    pub fn intervened(&self) -> bool {
        self.decision.as_ref().is_some_and(|d| d.intervened)
    }
}

/// Turns agent actions into actuator commands: guard (deployment only),
/// path planning, tracking and the simulation step.
#[derive(Clone, Debug)]
pub struct Controller<'a> {
    pub kind: AgentKind,
    pub guard: GuardMode,
    rq: Option<&'a RqModel>,
    reward: RewardConfig,
    shield: ShieldConfig,
    tracker: PidTracker,
    prev: ActionOmega,
}

impl<'a> Controller<'a> {
    pub fn new(kind: AgentKind, guard: GuardMode, rq: Option<&'a RqModel>, cfg: &RunConfig) -> Result<Self, Error> {
        if kind == AgentKind::Deployment && guard == GuardMode::Adaptive && rq.is_none() {
            return Err(Error::Config("adaptive guard needs a risk model".into()));
        }
        Ok(Self {
            kind,
            guard,
            rq,
            reward: cfg.reward.clone(),
            shield: cfg.shield,
            tracker: PidTracker::new(cfg.pid),
            prev: ActionOmega::default(),
        })
    }

    pub fn reset(&mut self) {
        self.tracker.reset();
        self.prev = ActionOmega::default();
    }

    fn decide(&self, world: &WorldState, proposed: ActionOmega) -> Option<ShieldDecision> {
        match self.guard {
            GuardMode::Off => None,
            GuardMode::Fixed(t) => Some(shield_with(world, &RiskAssessment::fixed(t), proposed, &self.shield)),
            GuardMode::Adaptive => Some(shield(
                world,
                self.rq.expect("checked at construction"),
                proposed,
                &self.shield,
            )),
        }
    }

    /// `action` is in box coordinates.
    pub fn step(&mut self, world: &mut WorldState, action: &[f64]) -> Result<StepInfo, Error> {
        let (plan, executed, decision) = match self.kind {
            AgentKind::Driving => {
                let a = ActionPhi::from_slice(action);
                (plan_phi(&a, &world.ego, &world.lanes), action.to_vec(), None)
            }
            AgentKind::Deployment => {
                let proposed = ActionOmega::from_slice(action);
                let decision = self.decide(world, proposed);
                let exec = decision.as_ref().map_or(proposed, |d| d.final_action);
                (
                    plan_omega(&exec, &world.ego, &world.lanes),
                    vec![exec.d_fn, exec.a_x],
                    decision,
                )
            }
        };
        let traj = Trajectory::plan(&plan.lateral, &plan.longitudinal, plan.horizon)?;
        let (steer, accel) = self.tracker.track(&traj, &world.ego, 0.0, plan.mode, DT);
        step_world(world, steer, accel, DT);

        let cur = match self.kind {
            AgentKind::Driving => ActionOmega { d_fn: executed[1], a_x: accel },
            AgentKind::Deployment => ActionOmega { d_fn: executed[0], a_x: executed[1] },
        };
        let intervened = decision.as_ref().is_some_and(|d| d.intervened);
        let components = reward_components(world, &self.prev, &cur, intervened, &self.reward);
        self.prev = cur;
        let reward = match self.kind {
            AgentKind::Driving => components.total_phi(),
            AgentKind::Deployment => components.total_omega(),
        };
        let collision = collision_target(world).map(|t| classify_collision(world, t));
        let terminal = collision.is_some() || world.ego.s >= world.lanes.road_length;
        Ok(StepInfo {
            components,
            reward,
            executed,
            decision,
            collision,
            terminal,
        })
    }
}

fn uniform_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// One row per finished training episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    /// Environment steps taken when the episode ended.
    pub step: usize,
    pub episode: usize,
    pub episode_return: f64,
    pub length: usize,
    pub collision: bool,
    pub interventions: usize,
    /// Means over the updates made during the episode.
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub alpha_loss: Option<f64>,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRow {
    pub start: usize,
    pub end: usize,
    pub intervention_ratio: f64,
    pub collisions: usize,
}

pub struct TrainOutcome {
    pub agent: Sac,
    pub curve: Vec<CurveRow>,
    pub windows: Vec<WindowRow>,
    pub episodes: Vec<EpisodeSummary>,
    pub metrics: Option<MetricsReport>,
}

#[derive(Default)]
struct LossAccumulator {
    n: usize,
    critic: f64,
    actor: f64,
    alpha: f64,
}

impl LossAccumulator {
    fn add(&mut self, s: &UpdateStats) {
        if s.skipped {
            return;
        }
        self.n += 1;
        self.critic += s.critic_loss;
        self.actor += s.actor_loss;
        self.alpha += s.alpha_loss;
    }

    fn mean(&self, x: f64) -> Option<f64> {
        (self.n > 0).then(|| x / self.n as f64)
    }
}

/// Sequential SAC training: uniform random actions during warmup, then one
/// gradient update per environment step. Episodes end on collision, road
/// end or the step cap; only the first two are terminal for bootstrapping.
pub fn train_agent(
    cfg: &RunConfig,
    kind: AgentKind,
    steps: usize,
    guard: GuardMode,
    rq: Option<&RqModel>,
    seed: u64,
) -> Result<TrainOutcome, Error> {
    cfg.validate()?;
    let (action_box, guard, scenario) = match kind {
        AgentKind::Driving => (cfg.driving_box(), GuardMode::Off, cfg.scenario),
        AgentKind::Deployment => (cfg.deployment_box(), guard, cfg.scenario),
    };
    let mut agent = Sac::new(cfg.sac.clone(), OBS_DIM, action_box.clone(), seed);
    let mut env_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e17a_0000_0001);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e17a_0000_0002);
    let mut replay = ReplayBuffer::new(cfg.sac.replay_capacity);
    let mut ctrl = Controller::new(kind, guard, rq, cfg)?;

    let mut curve = Vec::new();
    let mut windows = Vec::new();
    let mut episodes = Vec::new();
    let (mut win_interventions, mut win_collisions, mut win_start) = (0usize, 0usize, 0usize);

    let mut episode_seed: u64 = env_rng.gen();
    let mut world = spawn_scenario(episode_seed, scenario, &cfg.traffic)?;
    let mut obs = observe(&world).0.to_vec();
    let mut ep = EpisodeSummary {
        seed: episode_seed,
        steps: 0,
        episode_return: 0.0,
        collision: None,
        interventions: 0,
        speed_sum: 0.0,
    };
    let mut losses = LossAccumulator::default();

    for t in 0..steps {
        let unit = if t < cfg.sac.warmup_steps {
            uniform_unit(action_box.dim(), &mut env_rng)
        } else {
            agent.sample_action(&obs, true).unit
        };
        let action = action_box.to_box(&unit);
        let info = ctrl.step(&mut world, &action)?;
        let next_obs = observe(&world).0.to_vec();
        replay.push(Transition {
            obs: std::mem::take(&mut obs),
            action: unit,
            reward: info.reward,
            next_obs: next_obs.clone(),
            done: info.terminal,
        });
        obs = next_obs;

        ep.steps += 1;
        ep.episode_return += info.reward;
        ep.speed_sum += world.ego.v_s;
        if info.intervened() {
            ep.interventions += 1;
            win_interventions += 1;
        }
        if info.collision.is_some() {
            ep.collision = info.collision;
            win_collisions += 1;
        }

        if t + 1 >= cfg.sac.warmup_steps && replay.len() >= cfg.sac.batch_size {
            let batch = replay.sample(cfg.sac.batch_size, &mut sample_rng)?;
            losses.add(&agent.update(&batch));
        }

        if (t + 1) % cfg.intervention_window == 0 {
            let n = t + 1 - win_start;
            windows.push(WindowRow {
                start: win_start,
                end: t + 1,
                intervention_ratio: 100.0 * win_interventions as f64 / n as f64,
                collisions: win_collisions,
            });
            win_start = t + 1;
            win_interventions = 0;
            win_collisions = 0;
        }

        if info.terminal || ep.steps >= cfg.max_episode_steps {
            curve.push(CurveRow {
                step: t + 1,
                episode: episodes.len(),
                episode_return: ep.episode_return,
                length: ep.steps,
                collision: ep.collision.is_some(),
                interventions: ep.interventions,
                critic_loss: losses.mean(losses.critic),
                actor_loss: losses.mean(losses.actor),
                alpha_loss: losses.mean(losses.alpha),
                alpha: agent.alpha(),
            });
            episodes.push(ep);
            losses = LossAccumulator::default();
            ctrl.reset();
            episode_seed = env_rng.gen();
            world = spawn_scenario(episode_seed, scenario, &cfg.traffic)?;
            obs = observe(&world).0.to_vec();
            ep = EpisodeSummary {
                seed: episode_seed,
                steps: 0,
                episode_return: 0.0,
                collision: None,
                interventions: 0,
                speed_sum: 0.0,
            };
        }
    }

    let metrics = MetricsReport::from_episodes(Stage::Training, &episodes);
    Ok(TrainOutcome {
        agent,
        curve,
        windows,
        episodes,
        metrics,
    })
}

/// Mean episode return over episodes ending in `[start, end)` steps.
pub fn window_mean_return(curve: &[CurveRow], start: usize, end: usize) -> Option<f64> {
    let sel: Vec<f64> = curve
        .iter()
        .filter(|r| r.step > start && r.step <= end)
        .map(|r| r.episode_return)
        .collect();
    (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
}

/// `(first window mean, final window mean)` of episode returns.
pub fn return_trend(curve: &[CurveRow], total_steps: usize, window: usize) -> (Option<f64>, Option<f64>) {
    let first = window_mean_return(curve, 0, window.min(total_steps));
    let last = window_mean_return(curve, total_steps.saturating_sub(window), total_steps);
    (first, last)
}

pub struct DaCollection {
    pub records: Vec<DaRecord>,
    /// Traffic behavior parameters drawn for each episode.
    pub episode_idm: Vec<IdmParams>,
}

/// Rolls out the deterministic driving agent with traffic behavior redrawn
/// every episode; each control step yields the state and the chosen horizon.
pub fn collect_da_dataset(driver: &Sac, cfg: &RunConfig, n_target: usize, seed: u64) -> Result<DaCollection, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xda7a_5e7c_0000_0001);
    let mut ctrl = Controller::new(AgentKind::Driving, GuardMode::Off, None, cfg)?;
    let mut records = Vec::with_capacity(n_target);
    let mut episode_idm = Vec::new();
    while records.len() < n_target {
        let params = cfg.traffic.randomized(&mut rng);
        episode_idm.push(params.idm);
        let mut world = spawn_scenario(rng.gen(), cfg.scenario, &params)?;
        ctrl.reset();
        for _ in 0..cfg.max_episode_steps {
            if records.len() >= n_target {
                break;
            }
            let x = observe(&world);
            let action = driver.deterministic_action(x.as_slice());
            records.push(DaRecord { x, tc: action[0] });
            if ctrl.step(&mut world, &action)?.terminal {
                break;
            }
        }
    }
    Ok(DaCollection { records, episode_idm })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoTrace {
    pub s: f64,
    pub d: f64,
    pub v_s: f64,
    pub v_d: f64,
    pub heading: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleTrace {
    pub id: u32,
    pub s: f64,
    pub d: f64,
    pub v_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PedestrianTrace {
    pub id: u32,
    pub s: f64,
    pub d: f64,
    pub v_d: f64,
}

/// One control step: the state after the step plus what produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub ego: EgoTrace,
    pub traffic: Vec<VehicleTrace>,
    pub pedestrians: Vec<PedestrianTrace>,
    pub collision: bool,
    pub collision_event: Option<CollisionEvent>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub intervened: bool,
    pub shield: Option<ShieldDecision>,
}

impl TraceRecord {
    pub fn capture(world: &WorldState, info: &StepInfo) -> Self {
        let e = &world.ego;
        Self {
            t: world.time,
            ego: EgoTrace {
                s: e.s,
                d: e.d,
                v_s: e.v_s,
                v_d: e.v_d,
                heading: e.heading,
            },
            traffic: world
                .traffic
                .iter()
                .filter(|t| !t.departed)
                .map(|t| VehicleTrace {
                    id: t.state.id,
                    s: t.state.s,
                    d: t.state.d,
                    v_s: t.state.v_s,
                })
                .collect(),
            pedestrians: world
                .pedestrians
                .iter()
                .filter(|p| p.active)
                .map(|p| PedestrianTrace {
                    id: p.id,
                    s: p.s,
                    d: p.d,
                    v_d: p.v_d,
                })
                .collect(),
            collision: info.collision.is_some(),
            collision_event: info.collision,
            action: info.executed.clone(),
            reward: info.reward,
            intervened: info.intervened(),
            shield: info.decision.clone(),
        }
    }
}

/// Source of actions during evaluation.
#[derive(Clone, Copy)]
pub enum EvalPolicy<'a> {
    /// Deterministic actor.
    Actor(&'a Sac),
    /// Uniform random actions in the agent's action box.
    Random,
}

pub struct EpisodeRun {
    pub summary: EpisodeSummary,
    pub trace: Vec<TraceRecord>,
}

pub fn run_episode(
    cfg: &RunConfig,
    kind: AgentKind,
    policy: EvalPolicy<'_>,
    guard: GuardMode,
    rq: Option<&RqModel>,
    seed: u64,
    record: bool,
) -> Result<EpisodeRun, Error> {
    let action_box = match kind {
        AgentKind::Driving => cfg.driving_box(),
        AgentKind::Deployment => cfg.deployment_box(),
    };
    let mut ctrl = Controller::new(kind, guard, rq, cfg)?;
    let mut world = spawn_scenario(seed, cfg.scenario, &cfg.traffic)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a4d_0000_0000_0001);
    let mut summary = EpisodeSummary {
        seed,
        steps: 0,
        episode_return: 0.0,
        collision: None,
        interventions: 0,
        speed_sum: 0.0,
    };
    let mut trace = Vec::new();
    for _ in 0..cfg.max_episode_steps {
        let action = match policy {
            EvalPolicy::Actor(a) => a.deterministic_action(observe(&world).as_slice()),
            EvalPolicy::Random => action_box.to_box(&uniform_unit(action_box.dim(), &mut rng)),
        };
        let info = ctrl.step(&mut world, &action)?;
        summary.steps += 1;
        summary.episode_return += info.reward;
        summary.speed_sum += world.ego.v_s;
        if info.intervened() {
            summary.interventions += 1;
        }
        if info.collision.is_some() {
            summary.collision = info.collision;
        }
        if record {
            trace.push(TraceRecord::capture(&world, &info));
        }
        if info.terminal {
            break;
        }
    }
    Ok(EpisodeRun { summary, trace })
}

pub fn episode_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1_0000_0000_0001);
    (0..n).map(|_| rng.gen()).collect()
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub runs: Vec<EpisodeRun>,
}

/// Episode-parallel evaluation; results keep episode order.
pub fn evaluate(
    cfg: &RunConfig,
    kind: AgentKind,
    policy: EvalPolicy<'_>,
    guard: GuardMode,
    rq: Option<&RqModel>,
    episodes: usize,
    seed: u64,
    record: bool,
) -> Result<Evaluation, Error> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let runs = episode_seeds(seed, episodes)
        .into_par_iter()
        .map(|s| run_episode(cfg, kind, policy, guard, rq, s, record))
        .collect::<Result<Vec<_>, Error>>()?;
    let summaries: Vec<EpisodeSummary> = runs.iter().map(|r| r.summary.clone()).collect();
    let report = MetricsReport::from_episodes(Stage::Application, &summaries).expect("nonempty");
    Ok(Evaluation { report, runs })
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io_at(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| Error::io_at(path, e))?;
    w.flush().map_err(|e| Error::io_at(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::io_at(path, e))?;
    write_text(path, &(text + "\n"))
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

pub fn write_curve_csv(path: &Path, curve: &[CurveRow]) -> Result<(), Error> {
    let mut s = String::from("step,episode,return,length,collision,interventions,critic_loss,actor_loss,alpha_loss,alpha\n");
    for r in curve {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.episode,
            r.episode_return,
            r.length,
            u8::from(r.collision),
            r.interventions,
            opt(r.critic_loss),
            opt(r.actor_loss),
            opt(r.alpha_loss),
            r.alpha
        );
    }
    write_text(path, &s)
}

pub fn write_windows_csv(path: &Path, rows: &[WindowRow]) -> Result<(), Error> {
    let mut s = String::from("start,end,intervention_ratio,collisions\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.start, r.end, r.intervention_ratio, r.collisions);
    }
    write_text(path, &s)
}

pub fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<(), Error> {
    let mut w = create(path)?;
    for r in trace {
        let line = serde_json::to_string(r).map_err(|e| Error::io_at(path, e))?;
        writeln!(w, "{line}").map_err(|e| Error::io_at(path, e))?;
    }
    w.flush().map_err(|e| Error::io_at(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, Error> {
    let f = File::open(path).map_err(|e| Error::io_at(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io_at(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::io_at(path, e))?);
        }
    }
    Ok(out)
}

/// Trace files of a directory in name order.
pub fn trace_files(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io_at(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

/// Rebuilds a metrics report from trace files alone.
pub fn replay_traces(dir: &Path, stage: Stage) -> Result<MetricsReport, Error> {
    let mut episodes = Vec::new();
    for path in trace_files(dir)? {
        let trace = read_trace(&path)?;
        episodes.push(EpisodeSummary {
            seed: 0,
            steps: trace.len(),
            episode_return: trace.iter().map(|r| r.reward).sum(),
            collision: trace.iter().find_map(|r| r.collision_event),
            interventions: trace.iter().filter(|r| r.intervened).count(),
            speed_sum: trace.iter().map(|r| r.ego.v_s).sum(),
        });
    }
    MetricsReport::from_episodes(stage, &episodes)
        .ok_or_else(|| Error::Config(format!("no trace files in {}", dir.display())))
}

/// Spatio-temporal diagram: time on the horizontal axis, station on the
/// vertical axis, one rectangle per participant and step.
pub fn plot_trace_svg(trace: &[TraceRecord], lanes: &LaneGeometry) -> String {
    const PX_PER_S: f64 = 12.0;
    const PX_PER_M: f64 = 1.0;
    const MARGIN: f64 = 40.0;
    let t_end = trace.last().map_or(DT, |r| r.t).max(DT);
    let s_max = trace
        .iter()
        .flat_map(|r| std::iter::once(r.ego.s).chain(r.traffic.iter().map(|v| v.s)))
        .fold(lanes.road_length, f64::max);
    let w = t_end * PX_PER_S + 2.0 * MARGIN;
    let h = s_max * PX_PER_M + 2.0 * MARGIN;
    let x_of = |t: f64| MARGIN + (t - DT) * PX_PER_S;
    let y_of = |s: f64| h - MARGIN - s * PX_PER_M;
    let half = crate::sim::VEHICLE_HALF_LENGTH * PX_PER_M;
    let lane_color = |d: f64| match lanes.lane_of(d) {
        0 => "#4c72b0",
        1 => "#55a868",
        _ => "#8172b2",
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.1} {h:.1}">"#
    );
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(
        svg,
        r##"<line x1="{m}" y1="{b:.1}" x2="{r:.1}" y2="{b:.1}" stroke="#000"/><line x1="{m}" y1="{m}" x2="{m}" y2="{b:.1}" stroke="#000"/>"##,
        m = MARGIN,
        b = h - MARGIN,
        r = w - MARGIN
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="12">t [s]</text><text x="4" y="{:.1}" font-size="12">s [m]</text>"#,
        w / 2.0,
        h - 10.0,
        MARGIN - 8.0
    );
    let cell = DT * PX_PER_S;
    for r in trace {
        let x = x_of(r.t);
        for v in &r.traffic {
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.2}" y="{:.2}" width="{cell:.2}" height="{:.2}" fill="{}" fill-opacity="0.35"/>"#,
                y_of(v.s) - half,
                2.0 * half,
                lane_color(v.d)
            );
        }
        for p in &r.pedestrians {
            let _ = writeln!(
                svg,
                r##"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="#dd8452"/>"##,
                x + cell / 2.0,
                y_of(p.s)
            );
        }
        let fill = if r.intervened { "#c44e52" } else { "#222222" };
        let _ = writeln!(
            svg,
            r#"<rect x="{x:.2}" y="{:.2}" width="{cell:.2}" height="{:.2}" fill="{fill}"/>"#,
            y_of(r.ego.s) - half,
            2.0 * half
        );
        if r.collision {
            let _ = writeln!(
                svg,
                r##"<circle cx="{:.2}" cy="{:.2}" r="6" fill="none" stroke="#ff0000" stroke-width="2"/>"##,
                x + cell / 2.0,
                y_of(r.ego.s)
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn trace_path(dir: &Path, episode: usize) -> PathBuf {
    dir.join(format!("episode_{episode:04}.jsonl"))
}

pub struct DrivingRun {
    pub curve: Vec<CurveRow>,
    pub metrics: Option<MetricsReport>,
}

/// Trains the driving agent and writes its checkpoint, return curve and
/// training metrics under `out`.
pub fn cmd_train_phi(cfg: &RunConfig, out: &Path) -> Result<DrivingRun, Error> {
    let run = train_agent(cfg, AgentKind::Driving, cfg.driving_steps, GuardMode::Off, None, cfg.seed)?;
    write_artifacts(out, "driving", &run)?;
    run.agent.save(&out.join(DRIVING_CHECKPOINT), "driving_agent")?;
    Ok(DrivingRun {
        curve: run.curve,
        metrics: run.metrics,
    })
}

fn write_artifacts(out: &Path, prefix: &str, run: &TrainOutcome) -> Result<(), Error> {
    fs::create_dir_all(out).map_err(|e| Error::io_at(out, e))?;
    write_curve_csv(&out.join(format!("{prefix}_curve.csv")), &run.curve)?;
    write_windows_csv(&out.join(format!("{prefix}_windows.csv")), &run.windows)?;
    if let Some(m) = &run.metrics {
        write_json(&out.join(format!("{prefix}_metrics.json")), m)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RiskRun {
    pub records: usize,
    pub label_min: f64,
    pub label_max: f64,
    pub report: Option<RqTrainReport>,
}

/// Collects the behavior-cloning dataset with a trained driving agent and
/// fits the risk model. An empty dataset skips training.
pub fn cmd_collect_train_rq(cfg: &RunConfig, driving_ckpt: &Path, out: &Path) -> Result<RiskRun, Error> {
    let driver = Sac::load(driving_ckpt, cfg.sac.clone(), cfg.seed)?;
    let data = collect_da_dataset(&driver, cfg, cfg.dataset_records, cfg.seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io_at(out, e))?;
    write_dataset(&out.join(DATASET_FILE), &data.records)?;
    let labels = data.records.iter().map(|r| r.tc);
    let mut run = RiskRun {
        records: data.records.len(),
        label_min: labels.clone().fold(f64::INFINITY, f64::min),
        label_max: labels.fold(f64::NEG_INFINITY, f64::max),
        report: None,
    };
    if !data.records.is_empty() {
        let mut model = RqModel::new(cfg.rq.clone(), cfg.seed);
        run.report = Some(train_rq(&mut model, &data.records, cfg.seed)?);
        model.save(&out.join(RISK_CHECKPOINT))?;
    }
    write_json(&out.join("risk_model_report.json"), &run)?;
    Ok(run)
}

pub struct DeploymentRun {
    pub curve: Vec<CurveRow>,
    pub windows: Vec<WindowRow>,
    pub metrics: Option<MetricsReport>,
}

pub fn load_risk_model(cfg: &RunConfig, path: Option<&Path>) -> Result<Option<RqModel>, Error> {
    match (cfg.guard, path) {
        (GuardMode::Adaptive, None) => Err(Error::Config("adaptive guard needs a risk model checkpoint".into())),
        (_, Some(p)) => RqModel::load(p, cfg.rq.clone()).map(Some),
        (_, None) => Ok(None),
    }
}

/// Trains the deployment agent behind the configured guard.
pub fn cmd_train_omega(cfg: &RunConfig, rq_ckpt: Option<&Path>, out: &Path) -> Result<DeploymentRun, Error> {
    let rq = load_risk_model(cfg, rq_ckpt)?;
    let run = train_agent(cfg, AgentKind::Deployment, cfg.deployment_steps, cfg.guard, rq.as_ref(), cfg.seed)?;
    write_artifacts(out, "deployment", &run)?;
    run.agent.save(&out.join(DEPLOYMENT_CHECKPOINT), "deployment_agent")?;
    Ok(DeploymentRun {
        curve: run.curve,
        windows: run.windows,
        metrics: run.metrics,
    })
}

/// Which agent drives an evaluation and where its parameters come from.
pub enum EvalTarget<'a> {
    Checkpoint { kind: AgentKind, path: &'a Path },
    Random { kind: AgentKind },
}

pub struct EvalOptions {
    pub traces: bool,
    pub plots: bool,
}

/// Evaluates and writes `metrics.json`, plus per-episode traces and plots
/// when requested.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    target: EvalTarget<'_>,
    rq_ckpt: Option<&Path>,
    out: &Path,
    opts: &EvalOptions,
) -> Result<MetricsReport, Error> {
    let (kind, actor) = match target {
        EvalTarget::Checkpoint { kind, path } => (kind, Some(Sac::load(path, cfg.sac.clone(), cfg.seed)?)),
        EvalTarget::Random { kind } => (kind, None),
    };
    let guard = if kind == AgentKind::Driving { GuardMode::Off } else { cfg.guard };
    let rq = if guard == GuardMode::Adaptive {
        load_risk_model(cfg, rq_ckpt)?
    } else {
        None
    };
    let policy = actor.as_ref().map_or(EvalPolicy::Random, EvalPolicy::Actor);
    let record = opts.traces || opts.plots;
    let eval = evaluate(cfg, kind, policy, guard, rq.as_ref(), cfg.eval_episodes, cfg.seed, record)?;
    fs::create_dir_all(out).map_err(|e| Error::io_at(out, e))?;
    write_json(&out.join("metrics.json"), &eval.report)?;
    for (i, run) in eval.runs.iter().enumerate() {
        if opts.traces {
            write_trace(&trace_path(&out.join("traces"), i), &run.trace)?;
        }
        if opts.plots {
            let svg = plot_trace_svg(&run.trace, &cfg.lanes());
            write_text(&out.join("plots").join(format!("episode_{i:04}.svg")), &svg)?;
        }
    }
    Ok(eval.report)
}

pub fn write_svg(path: &Path, svg: &str) -> Result<(), Error> {
    write_text(path, svg)
}
