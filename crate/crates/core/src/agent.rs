//! Soft actor-critic with twin critics and automatic temperature, shared by
//! the driving agent (`[T_c, d_fn, s_dot_f]`) and the deployment agent
//! (`[d_fn, a_x]`).

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use ssev_nn::{Activation, AdamConfig, Bound, Checkpoint, Graph, Mlp, ParamStore, Tensor, Var};

use crate::frenet::{LateralBoundary, LongitudinalBoundary, TrackMode};
use crate::sim::{LaneGeometry, VehicleState};
use crate::Error;

pub const TC_MIN: f64 = 0.5;
pub const TC_MAX: f64 = 4.0;
/// Path horizon used for deployment-agent plans.
pub const OMEGA_PATH_HORIZON: f64 = TC_MAX;
const LN_2: f64 = std::f64::consts::LN_2;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionPhi {
    pub t_c: f64,
    pub d_fn: f64,
    pub s_dot_f: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionOmega {
    pub d_fn: f64,
    pub a_x: f64,
}

impl ActionPhi {
    pub fn from_slice(a: &[f64]) -> Self {
        Self {
            t_c: a[0],
            d_fn: a[1],
            s_dot_f: a[2],
        }
    }
}

impl ActionOmega {
    pub fn from_slice(a: &[f64]) -> Self {
        Self { d_fn: a[0], a_x: a[1] }
    }
}

/// Axis-aligned action box; policies act in `(-1, 1)` and map affinely.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionBox {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ActionBox {
    pub fn phi(lane_width: f64, v_max: f64) -> Self {
        Self {
            low: vec![TC_MIN, -lane_width, 0.0],
            high: vec![TC_MAX, lane_width, v_max],
        }
    }

    pub fn omega(lane_width: f64, a_min: f64, a_max: f64) -> Self {
        Self {
            low: vec![-lane_width, a_min],
            high: vec![lane_width, a_max],
        }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn to_box(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(&y, (&lo, &hi))| lo + 0.5 * (y + 1.0) * (hi - lo))
            .collect()
    }

    pub fn to_unit(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(&a, (&lo, &hi))| 2.0 * (a - lo) / (hi - lo) - 1.0)
            .collect()
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        a.iter()
            .zip(self.low.iter().zip(&self.high))
            .all(|(&a, (&lo, &hi))| lo <= a && a <= hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    pub hidden: usize,
    /// Linear layers in the actor / each critic.
    pub actor_layers: usize,
    pub critic_layers: usize,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub init_alpha: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub replay_capacity: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            actor_layers: 4,
            critic_layers: 3,
            gamma: 0.99,
            tau: 5e-3,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            init_alpha: 0.2,
            batch_size: 64,
            warmup_steps: 1000,
            replay_capacity: 200_000,
            log_std_min: -5.0,
            log_std_max: 2.0,
        }
    }
}

impl SacConfig {
    /// Network widths and batch size of the full-scale hyperparameter table.
    pub fn paper_scale() -> Self {
        Self {
            hidden: 256,
            batch_size: 256,
            replay_capacity: 1_000_000,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    /// Proposed action in unit coordinates.
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub obs: Tensor,
    pub action: Tensor,
    pub reward: Tensor,
    pub next_obs: Tensor,
    pub done: Tensor,
}

impl Batch {
    pub fn from_transitions(ts: &[&Transition]) -> Self {
        let rows = |f: &dyn Fn(&Transition) -> Vec<f64>| {
            Tensor::from_rows(&ts.iter().map(|t| f(t)).collect::<Vec<_>>())
        };
        Self {
            obs: rows(&|t| t.obs.clone()),
            action: rows(&|t| t.action.clone()),
            reward: rows(&|t| vec![t.reward]),
            next_obs: rows(&|t| t.next_obs.clone()),
            done: rows(&|t| vec![if t.done { 1.0 } else { 0.0 }]),
        }
    }

    pub fn len(&self) -> usize {
        self.obs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// FIFO ring of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::new(),
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn items(&self) -> &[Transition] {
        &self.items
    }

    /// `k` distinct stored transitions (all of them if fewer are stored).
    pub fn sample_refs<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<&Transition>, Error> {
        if self.items.is_empty() {
            return Err(Error::EmptyReplay);
        }
        let k = k.min(self.items.len());
        Ok(sample_indices(rng, self.items.len(), k)
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Batch, Error> {
        Ok(Batch::from_transitions(&self.sample_refs(k, rng)?))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug)]
pub struct PolicySample {
    /// Action in the box.
    pub action: Vec<f64>,
    /// Same action in unit coordinates.
    pub unit: Vec<f64>,
    pub log_prob: f64,
}

#[derive(Clone, Debug)]
pub struct Sac {
    pub cfg: SacConfig,
    pub action_box: ActionBox,
    pub obs_dim: usize,
    actor_net: Mlp,
    critic_net: Mlp,
    pub actor: ParamStore,
    pub q1: ParamStore,
    pub q2: ParamStore,
    pub q1_target: ParamStore,
    pub q2_target: ParamStore,
    pub log_alpha: ParamStore,
    pub target_entropy: f64,
    pub rng: ChaCha8Rng,
    pub updates: u64,
}

/// Graph outputs of one policy evaluation.
pub struct PolicyVars {
    pub mean: Var,
    pub log_std: Var,
    pub unit: Var,
    pub log_prob: Var,
}

impl Sac {
    pub fn new(cfg: SacConfig, obs_dim: usize, action_box: ActionBox, seed: u64) -> Self {
        assert!(cfg.actor_layers >= 1 && cfg.critic_layers >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = action_box.dim();
        let widths = |inp: usize, layers: usize, out: usize| {
            let mut w = vec![inp];
            w.extend(std::iter::repeat(cfg.hidden).take(layers - 1));
            w.push(out);
            w
        };
        let mut actor = ParamStore::new();
        let actor_net = Mlp::new(&mut actor, "actor", &widths(obs_dim, cfg.actor_layers, 2 * a), Activation::Relu, &mut rng);
        let mut q1 = ParamStore::new();
        let critic_net = Mlp::new(&mut q1, "critic", &widths(obs_dim + a, cfg.critic_layers, 1), Activation::Relu, &mut rng);
        let mut q2 = ParamStore::new();
        Mlp::new(&mut q2, "critic", &widths(obs_dim + a, cfg.critic_layers, 1), Activation::Relu, &mut rng);
        let q1_target = q1.clone_values();
        let q2_target = q2.clone_values();
        let mut log_alpha = ParamStore::new();
        log_alpha.add("log_alpha", Tensor::scalar(cfg.init_alpha.ln()));
        Self {
            target_entropy: -(a as f64),
            cfg,
            action_box,
            obs_dim,
            actor_net,
            critic_net,
            actor,
            q1,
            q2,
            q1_target,
            q2_target,
            log_alpha,
            rng,
            updates: 0,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.action_box.dim()
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.get(ssev_nn::ParamId(0)).item().exp()
    }

    /// Mean and clamped log-std of the pre-squash Gaussian.
    pub fn actor_head(&self, g: &mut Graph, actor: &Bound, obs: Var) -> (Var, Var) {
        let a = self.action_dim();
        let out = self.actor_net.forward(g, actor, obs);
        let mean = g.slice_cols(out, 0, a);
        let raw = g.slice_cols(out, a, 2 * a);
        let t = g.tanh(raw);
        let half = 0.5 * (self.cfg.log_std_max - self.cfg.log_std_min);
        let scaled = g.scale(t, half);
        let log_std = g.add_const(scaled, self.cfg.log_std_min + half);
        (mean, log_std)
    }

    /// Reparameterized squashed-Gaussian sample with noise `eps` (`[B, A]`).
    /// The log-density is taken in unit coordinates.
    pub fn policy(&self, g: &mut Graph, actor: &Bound, obs: Var, eps: Var) -> PolicyVars {
        let (mean, log_std) = self.actor_head(g, actor, obs);
        let std = g.exp(log_std);
        let noise = g.mul(std, eps);
        let u = g.add(mean, noise);
        let unit = g.tanh(u);

        let eps_sq = g.square(eps);
        let half_eps_sq = g.scale(eps_sq, -0.5);
        let gauss = g.sub(half_eps_sq, log_std);
        let gauss = g.add_const(gauss, -HALF_LN_2PI);
        // log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))
        let neg2u = g.scale(u, -2.0);
        let sp = g.softplus(neg2u);
        let usp = g.add(u, sp);
        let corr = g.scale(usp, -2.0);
        let corr = g.add_const(corr, 2.0 * LN_2);
        let per_dim = g.sub(gauss, corr);
        let log_prob = g.sum_cols(per_dim);
        PolicyVars {
            mean,
            log_std,
            unit,
            log_prob,
        }
    }

    pub fn q_value(&self, g: &mut Graph, critic: &Bound, obs: Var, unit_action: Var) -> Var {
        let x = g.concat_cols(&[obs, unit_action]);
        self.critic_net.forward(g, critic, x)
    }

    fn noise(&mut self, rows: usize) -> Tensor {
        let a = self.action_dim();
        let data = (0..rows * a).map(|_| self.rng.sample(StandardNormal)).collect();
        Tensor::matrix(rows, a, data)
    }

    /// Stochastic sample drawn from the agent's own stream, or the squashed
    /// mean when `stochastic` is false.
    pub fn sample_action(&mut self, obs: &[f64], stochastic: bool) -> PolicySample {
        let eps = if stochastic {
            self.noise(1)
        } else {
            Tensor::zeros(1, self.action_dim())
        };
        self.sample_with_noise(obs, &eps)
    }

    pub fn sample_with_noise(&self, obs: &[f64], eps: &Tensor) -> PolicySample {
        let mut g = Graph::new();
        let bound = self.actor.bind(&mut g);
        let o = g.input(Tensor::row(obs));
        let e = g.input(eps.clone());
        let p = self.policy(&mut g, &bound, o, e);
        let unit = g.value(p.unit).data().to_vec();
        PolicySample {
            action: self.action_box.to_box(&unit),
            log_prob: g.value(p.log_prob).item(),
            unit,
        }
    }

    /// Squashed mean action in the box.
    pub fn deterministic_action(&self, obs: &[f64]) -> Vec<f64> {
        self.sample_with_noise(obs, &Tensor::zeros(1, self.action_dim()))
            .action
    }

    /// Bellman targets `r + gamma (1 - done) (min target-Q - alpha log pi)`.
    pub fn critic_targets(&self, batch: &Batch, eps_next: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let actor = self.actor.bind(&mut g);
        let t1 = self.q1_target.bind(&mut g);
        let t2 = self.q2_target.bind(&mut g);
        let next = g.input(batch.next_obs.clone());
        let e = g.input(eps_next.clone());
        let p = self.policy(&mut g, &actor, next, e);
        let qa = self.q_value(&mut g, &t1, next, p.unit);
        let qb = self.q_value(&mut g, &t2, next, p.unit);
        let q = g.minimum(qa, qb);
        let alpha = self.alpha();
        let (qv, lp) = (g.value(q), g.value(p.log_prob));
        let data = (0..batch.len())
            .map(|i| {
                let soft = qv.data()[i] - alpha * lp.data()[i];
                batch.reward.data()[i] + self.cfg.gamma * (1.0 - batch.done.data()[i]) * soft
            })
            .collect();
        Tensor::matrix(batch.len(), 1, data)
    }

    /// Sum of both critics' mean squared Bellman errors.
    pub fn critic_loss(&self, g: &mut Graph, q1: &Bound, q2: &Bound, batch: &Batch, targets: &Tensor) -> Var {
        let obs = g.input(batch.obs.clone());
        let act = g.input(batch.action.clone());
        let y = g.input(targets.clone());
        let mut total = None;
        for q in [q1, q2] {
            let v = self.q_value(g, q, obs, act);
            let e = g.sub(v, y);
            let sq = g.square(e);
            let m = g.mean(sq);
            total = Some(match total {
                None => m,
                Some(t) => g.add(t, m),
            });
        }
        total.unwrap()
    }

    /// `mean(alpha log pi - min Q)`; returns the loss and the log-prob node.
    pub fn actor_loss(
        &self,
        g: &mut Graph,
        actor: &Bound,
        q1: &Bound,
        q2: &Bound,
        obs: &Tensor,
        eps: &Tensor,
        alpha: f64,
    ) -> (Var, Var) {
        let o = g.input(obs.clone());
        let e = g.input(eps.clone());
        let p = self.policy(g, actor, o, e);
        let qa = self.q_value(g, q1, o, p.unit);
        let qb = self.q_value(g, q2, o, p.unit);
        let q = g.minimum(qa, qb);
        let weighted = g.scale(p.log_prob, alpha);
        let diff = g.sub(weighted, q);
        (g.mean(diff), p.log_prob)
    }

    /// `-log_alpha * mean(log pi + target_entropy)` with `log pi` held fixed.
    pub fn alpha_loss(&self, g: &mut Graph, log_alpha: Var, log_prob: &Tensor) -> Var {
        let shifted = log_prob.map(|v| v + self.target_entropy);
        let c = g.input(Tensor::scalar(-shifted.sum() / shifted.len() as f64));
        g.mul(log_alpha, c)
    }

    /// One gradient step on critics, actor and temperature, then a soft
    /// target update. A non-finite loss or gradient skips the whole update.
    pub fn update(&mut self, batch: &Batch) -> UpdateStats {
        assert!(!batch.is_empty(), "update needs a nonempty batch");
        let n = batch.len();
        let eps_next = self.noise(n);
        let eps = self.noise(n);
        let skipped = UpdateStats {
            skipped: true,
            alpha: self.alpha(),
            ..UpdateStats::default()
        };

        let targets = self.critic_targets(batch, &eps_next);
        let mut g = Graph::new();
        let b1 = self.q1.bind(&mut g);
        let b2 = self.q2.bind(&mut g);
        let closs = self.critic_loss(&mut g, &b1, &b2, batch, &targets);
        let critic_loss = g.value(closs).item();
        if !critic_loss.is_finite() {
            return skipped;
        }
        let grads = g.backward(closs);
        let g1 = self.q1.collect_grads(&grads, &b1);
        let g2 = self.q2.collect_grads(&grads, &b2);

        let alpha = self.alpha();
        let mut ga = Graph::new();
        let ba = self.actor.bind(&mut ga);
        let c1 = self.q1.bind(&mut ga);
        let c2 = self.q2.bind(&mut ga);
        let (aloss, logp) = self.actor_loss(&mut ga, &ba, &c1, &c2, &batch.obs, &eps, alpha);
        let actor_loss = ga.value(aloss).item();
        if !actor_loss.is_finite() {
            return skipped;
        }
        let agrads = ga.backward(aloss);
        let g_actor = self.actor.collect_grads(&agrads, &ba);
        let logp_t = ga.value(logp).clone();
        let entropy = -logp_t.sum() / n as f64;

        let mut gt = Graph::new();
        let bl = self.log_alpha.bind(&mut gt);
        let lloss = self.alpha_loss(&mut gt, bl[ssev_nn::ParamId(0)], &logp_t);
        let alpha_loss = gt.value(lloss).item();
        let lgrads = gt.backward(lloss);
        let g_alpha = self.log_alpha.collect_grads(&lgrads, &bl);

        let all_finite = [&g1, &g2, &g_actor, &g_alpha]
            .iter()
            .all(|gs| gs.iter().all(Tensor::is_finite));
        if !all_finite || !alpha_loss.is_finite() {
            return skipped;
        }
        let (c_cfg, a_cfg, t_cfg) = (
            AdamConfig::with_lr(self.cfg.critic_lr),
            AdamConfig::with_lr(self.cfg.actor_lr),
            AdamConfig::with_lr(self.cfg.alpha_lr),
        );
        self.q1.adam_step(&g1, &c_cfg).expect("finite gradients checked");
        self.q2.adam_step(&g2, &c_cfg).expect("finite gradients checked");
        self.actor.adam_step(&g_actor, &a_cfg).expect("finite gradients checked");
        self.log_alpha.adam_step(&g_alpha, &t_cfg).expect("finite gradients checked");
        self.soft_update_targets(self.cfg.tau);
        self.updates += 1;
        UpdateStats {
            critic_loss,
            actor_loss,
            alpha_loss,
            alpha: self.alpha(),
            entropy,
            skipped: false,
        }
    }

    pub fn soft_update_targets(&mut self, tau: f64) {
        self.q1_target.soft_update_from(&self.q1, tau);
        self.q2_target.soft_update_from(&self.q2, tau);
    }

    pub fn arch(&self) -> serde_json::Value {
        serde_json::json!({
            "obs_dim": self.obs_dim,
            "action_low": self.action_box.low,
            "action_high": self.action_box.high,
            "hidden": self.cfg.hidden,
            "actor_layers": self.cfg.actor_layers,
            "critic_layers": self.cfg.critic_layers,
        })
    }

    pub fn to_checkpoint(&self, module: &str) -> Checkpoint {
        let mut tensors = self.actor.named_tensors("");
        tensors.extend(self.q1.named_tensors("q1."));
        tensors.extend(self.q2.named_tensors("q2."));
        tensors.extend(self.q1_target.named_tensors("q1_target."));
        tensors.extend(self.q2_target.named_tensors("q2_target."));
        tensors.extend(self.log_alpha.named_tensors(""));
        Checkpoint::new(module, self.arch()).with_tensors(tensors)
    }

    pub fn save(&self, path: &Path, module: &str) -> Result<(), Error> {
        self.to_checkpoint(module).save(path).map_err(|e| Error::io_at(path, e))
    }

    /// Rebuilds an agent from a checkpoint written by [`Sac::save`]; the
    /// architecture comes from the header, the rest of `cfg` from the caller.
    pub fn from_checkpoint(ck: &Checkpoint, mut cfg: SacConfig, seed: u64) -> Result<Self, Error> {
        let arch = &ck.arch;
        let get_usize = |k: &str| {
            arch.get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{k}` in header")))
        };
        let get_vec = |k: &str| -> Result<Vec<f64>, Error> {
            serde_json::from_value(arch.get(k).cloned().unwrap_or_default())
                .map_err(|_| Error::Checkpoint(format!("missing `{k}` in header")))
        };
        cfg.hidden = get_usize("hidden")?;
        cfg.actor_layers = get_usize("actor_layers")?;
        cfg.critic_layers = get_usize("critic_layers")?;
        let action_box = ActionBox {
            low: get_vec("action_low")?,
            high: get_vec("action_high")?,
        };
        let mut sac = Sac::new(cfg, get_usize("obs_dim")?, action_box, seed);
        let t = &ck.tensors;
        let wrap = |e: ssev_nn::NnError| Error::Checkpoint(e.to_string());
        sac.actor.load_named(t, "").map_err(wrap)?;
        sac.q1.load_named(t, "q1.").map_err(wrap)?;
        sac.q2.load_named(t, "q2.").map_err(wrap)?;
        sac.q1_target.load_named(t, "q1_target.").map_err(wrap)?;
        sac.q2_target.load_named(t, "q2_target.").map_err(wrap)?;
        sac.log_alpha.load_named(t, "").map_err(wrap)?;
        Ok(sac)
    }

    pub fn load(path: &Path, cfg: SacConfig, seed: u64) -> Result<Self, Error> {
        let ck = Checkpoint::load(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_checkpoint(&ck, cfg, seed)
    }
}

/// Boundary conditions, horizon and tracker mode for one control step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plan {
    pub lateral: LateralBoundary,
    pub longitudinal: LongitudinalBoundary,
    pub horizon: f64,
    pub mode: TrackMode,
}

/// Absolute lateral target: `d_fn` is measured from the current lane center
/// and the result is kept between the outermost lane centers.
pub fn lateral_target(d_fn: f64, ego: &VehicleState, lanes: &LaneGeometry) -> f64 {
    let d_fn = d_fn.clamp(-lanes.lane_width, lanes.lane_width);
    (lanes.nearest_center(ego.d) + d_fn).clamp(lanes.min_center(), lanes.max_center())
}

fn lateral_from(ego: &VehicleState, target: f64) -> LateralBoundary {
    LateralBoundary {
        d0: ego.d,
        d0_dot: ego.v_d,
        d0_ddot: ego.a_d,
        d_fn: target,
        d_fn_dot: 0.0,
        d_fn_ddot: 0.0,
    }
}

pub fn plan_phi(a: &ActionPhi, ego: &VehicleState, lanes: &LaneGeometry) -> Plan {
    Plan {
        lateral: lateral_from(ego, lateral_target(a.d_fn, ego, lanes)),
        longitudinal: LongitudinalBoundary {
            s0: ego.s,
            s0_dot: ego.v_s,
            s0_ddot: ego.a_s,
            sf_dot: a.s_dot_f.max(0.0),
            sf_ddot: 0.0,
        },
        horizon: a.t_c.clamp(TC_MIN, TC_MAX),
        mode: TrackMode::SpeedProfile,
    }
}

pub fn plan_omega(a: &ActionOmega, ego: &VehicleState, lanes: &LaneGeometry) -> Plan {
    Plan {
        lateral: lateral_from(ego, lateral_target(a.d_fn, ego, lanes)),
        longitudinal: LongitudinalBoundary {
            s0: ego.s,
            s0_dot: ego.v_s,
            s0_ddot: ego.a_s,
            sf_dot: (ego.v_s + a.a_x * OMEGA_PATH_HORIZON).max(0.0),
            sf_ddot: 0.0,
        },
        horizon: OMEGA_PATH_HORIZON,
        mode: TrackMode::DirectAccel(a.a_x),
    }
}
