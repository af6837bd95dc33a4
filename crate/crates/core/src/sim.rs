//! Straight three-lane road with IDM traffic, crossing pedestrians and a
//! kinematic-bicycle ego vehicle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::Error;

pub const DT: f64 = 0.1;
pub const WHEELBASE: f64 = 2.7;
pub const VEHICLE_HALF_LENGTH: f64 = 2.25;
pub const VEHICLE_HALF_WIDTH: f64 = 0.9;
pub const PEDESTRIAN_RADIUS: f64 = 0.3;
/// Steering-angle actuator limit.
pub const MAX_STEER: f64 = 0.5;
/// Physical acceleration cap applied before integration.
pub const ACCEL_CAP: f64 = 8.0;
/// Ego heading is held inside this band so `|heading| < pi/2` always.
pub const MAX_HEADING: f64 = std::f64::consts::FRAC_PI_4;

pub const OBS_DIM: usize = 36;
pub const VEHICLE_SLOTS: usize = 5;
pub const PEDESTRIAN_SLOTS: usize = 2;
pub const EGO_SPEED_NORM: f64 = 15.0;
pub const REL_DISTANCE_NORM: f64 = 200.0;
pub const REL_SPEED_NORM: f64 = 11.11;
pub const VEHICLE_PADDING: [f64; 5] = [1.0, 1.0, 0.0, 0.0, 0.0];
pub const PEDESTRIAN_PADDING: [f64; 3] = [1.0, 1.0, 0.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Vehicles only.
    A,
    /// Vehicles plus crossing pedestrians.
    B,
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "a" | "A" => Ok(Scenario::A),
            "b" | "B" => Ok(Scenario::B),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneGeometry {
    pub lane_count: usize,
    pub lane_width: f64,
    pub road_length: f64,
    pub lane_centers: Vec<f64>,
}

impl LaneGeometry {
    /// Lanes centered on `d = 0`.
    pub fn new(lane_count: usize, lane_width: f64, road_length: f64) -> Self {
        assert!(lane_count >= 2 && lane_width > 0.0 && road_length > 0.0);
        let mid = (lane_count as f64 - 1.0) / 2.0;
        let lane_centers = (0..lane_count)
            .map(|i| (i as f64 - mid) * lane_width)
            .collect();
        Self {
            lane_count,
            lane_width,
            road_length,
            lane_centers,
        }
    }

    pub fn half_road_width(&self) -> f64 {
        self.lane_count as f64 * self.lane_width / 2.0
    }

    pub fn lane_of(&self, d: f64) -> usize {
        let mut best = 0;
        for (i, c) in self.lane_centers.iter().enumerate() {
            if (d - c).abs() < (d - self.lane_centers[best]).abs() {
                best = i;
            }
        }
        best
    }

    pub fn nearest_center(&self, d: f64) -> f64 {
        self.lane_centers[self.lane_of(d)]
    }

    pub fn min_center(&self) -> f64 {
        self.lane_centers[0]
    }

    pub fn max_center(&self) -> f64 {
        self.lane_centers[self.lane_count - 1]
    }
}

impl Default for LaneGeometry {
    fn default() -> Self {
        Self::new(3, 3.5, 760.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: u32,
    pub s: f64,
    pub d: f64,
    pub v_s: f64,
    pub v_d: f64,
    pub heading: f64,
    /// Longitudinal / lateral acceleration over the last step.
    pub a_s: f64,
    pub a_d: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl VehicleState {
    pub fn new(id: u32, s: f64, d: f64, v_s: f64) -> Self {
        Self {
            id,
            s,
            d,
            v_s,
            v_d: 0.0,
            heading: 0.0,
            a_s: 0.0,
            a_d: 0.0,
            half_length: VEHICLE_HALF_LENGTH,
            half_width: VEHICLE_HALF_WIDTH,
        }
    }

    pub fn speed(&self) -> f64 {
        self.v_s.hypot(self.v_d)
    }

    pub fn footprint(&self) -> Obb {
        Obb {
            cx: self.s,
            cy: self.d,
            heading: self.heading,
            half_length: self.half_length,
            half_width: self.half_width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficVehicle {
    pub state: VehicleState,
    /// IDM free-flow speed; equals the spawn speed.
    pub desired_speed: f64,
    pub departed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PedestrianState {
    pub id: u32,
    pub s: f64,
    pub d: f64,
    pub v_d: f64,
    pub active: bool,
    /// Simulation time at which the crossing starts.
    pub start_time: f64,
    /// Longitudinal offset ahead of the ego at `start_time`.
    pub ahead: f64,
    pub finished: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdmParams {
    /// Standstill gap `s0`.
    pub min_gap: f64,
    pub time_headway: f64,
    pub max_accel: f64,
    pub comfortable_decel: f64,
    /// Hard braking limit, also used for the emergency output.
    pub decel_cap: f64,
    pub exponent: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            min_gap: 2.0,
            time_headway: 1.5,
            max_accel: 1.5,
            comfortable_decel: 2.0,
            decel_cap: 6.0,
            exponent: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficParams {
    /// Farthest spawn distance ahead of the ego.
    pub spawn_range: f64,
    /// Nearest spawn distance ahead of the ego.
    pub spawn_min_ahead: f64,
    /// Minimum center-to-center gap between spawned vehicles in one lane.
    pub min_spawn_gap: f64,
    pub speed_low: f64,
    pub speed_high: f64,
    pub vehicle_count_range: [usize; 2],
    pub idm: IdmParams,
    /// Crossings per episode in scenario b.
    pub pedestrian_count_range: [usize; 2],
    pub pedestrian_window: f64,
    pub pedestrian_speed: [f64; 2],
    pub pedestrian_ahead: [f64; 2],
}

impl Default for TrafficParams {
    fn default() -> Self {
        Self {
            spawn_range: 180.0,
            spawn_min_ahead: 20.0,
            min_spawn_gap: 25.0,
            speed_low: 8.0,
            speed_high: 12.0,
            vehicle_count_range: [6, 10],
            idm: IdmParams::default(),
            pedestrian_count_range: [1, 3],
            pedestrian_window: 40.0,
            pedestrian_speed: [1.0, 2.0],
            pedestrian_ahead: [30.0, 150.0],
        }
    }
}

impl TrafficParams {
    pub fn validate(&self) -> Result<(), Error> {
        let idm = &self.idm;
        let ok = self.speed_low <= self.speed_high
            && self.speed_low >= 0.0
            && self.spawn_range > 0.0
            && self.spawn_min_ahead >= 0.0
            && self.spawn_min_ahead <= self.spawn_range
            && self.min_spawn_gap > 0.0
            && self.vehicle_count_range[0] <= self.vehicle_count_range[1]
            && self.pedestrian_count_range[0] <= self.pedestrian_count_range[1]
            && self.pedestrian_speed[0] > 0.0
            && self.pedestrian_speed[0] <= self.pedestrian_speed[1]
            && self.pedestrian_ahead[0] <= self.pedestrian_ahead[1]
            && self.pedestrian_window >= 0.0
            && [
                idm.min_gap,
                idm.time_headway,
                idm.max_accel,
                idm.comfortable_decel,
                idm.decel_cap,
                idm.exponent,
            ]
            .iter()
            .all(|&x| x > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid traffic parameters: {self:?}")))
        }
    }

    /// Redraws the IDM behavior parameters around their defaults, keeping
    /// the speed band and geometry.
    pub fn randomized<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let mut out = self.clone();
        out.idm.min_gap = rng.gen_range(1.5..3.0);
        out.idm.time_headway = rng.gen_range(1.0..2.0);
        out.idm.max_accel = rng.gen_range(1.0..2.0);
        out.idm.comfortable_decel = rng.gen_range(1.5..2.5);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub ego: VehicleState,
    pub traffic: Vec<TrafficVehicle>,
    pub pedestrians: Vec<PedestrianState>,
    pub lanes: LaneGeometry,
    pub params: TrafficParams,
    pub scenario: Scenario,
    pub time: f64,
    pub steps: u64,
    pub rng: ChaCha8Rng,
}

/// Bumper gap at or below which IDM returns the emergency output.
pub fn traffic_accel(gap: f64, v: f64, v_leader: f64, v_desired: f64, idm: &IdmParams) -> f64 {
    if gap <= 0.0 {
        return -idm.decel_cap;
    }
    let free = 1.0 - (v / v_desired.max(1e-6)).powf(idm.exponent);
    let interaction = if gap.is_finite() {
        let dv = v - v_leader;
        let s_star = idm.min_gap
            + (v * idm.time_headway + v * dv / (2.0 * (idm.max_accel * idm.comfortable_decel).sqrt()))
                .max(0.0);
        (s_star / gap).powi(2)
    } else {
        0.0
    };
    (idm.max_accel * (free - interaction)).clamp(-idm.decel_cap, idm.max_accel)
}

pub fn spawn_scenario(seed: u64, scenario: Scenario, params: &TrafficParams) -> Result<WorldState, Error> {
    spawn_on(seed, scenario, params, LaneGeometry::default())
}

pub fn spawn_on(
    seed: u64,
    scenario: Scenario,
    params: &TrafficParams,
    lanes: LaneGeometry,
) -> Result<WorldState, Error> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ego_lane = rng.gen_range(0..lanes.lane_count);
    let ego = VehicleState::new(0, 0.0, lanes.lane_centers[ego_lane], 0.0);

    let [lo, hi] = params.vehicle_count_range;
    let count = rng.gen_range(lo..=hi);
    let mut placed: Vec<(usize, f64)> = Vec::with_capacity(count);
    let max_attempts = 200 * count.max(1);
    let mut attempts = 0;
    while placed.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Placement {
                requested: count,
                placed: placed.len(),
            });
        }
        let lane = rng.gen_range(0..lanes.lane_count);
        let s = rng.gen_range(params.spawn_min_ahead..=params.spawn_range);
        let clear = placed
            .iter()
            .all(|&(l, other)| l != lane || (other - s).abs() >= params.min_spawn_gap);
        if clear {
            placed.push((lane, s));
        }
    }
    let traffic = placed
        .iter()
        .enumerate()
        .map(|(i, &(lane, s))| {
            let v = rng.gen_range(params.speed_low..=params.speed_high);
            TrafficVehicle {
                state: VehicleState::new(i as u32 + 1, s, lanes.lane_centers[lane], v),
                desired_speed: v,
                departed: false,
            }
        })
        .collect();

    let mut pedestrians = Vec::new();
    if scenario == Scenario::B {
        let [plo, phi] = params.pedestrian_count_range;
        let n = rng.gen_range(plo..=phi);
        let edge = lanes.half_road_width();
        for i in 0..n {
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let speed = rng.gen_range(params.pedestrian_speed[0]..=params.pedestrian_speed[1]);
            pedestrians.push(PedestrianState {
                id: 1000 + i as u32,
                s: 0.0,
                d: side * edge,
                v_d: -side * speed,
                active: false,
                start_time: rng.gen_range(0.0..=params.pedestrian_window),
                ahead: rng.gen_range(params.pedestrian_ahead[0]..=params.pedestrian_ahead[1]),
                finished: false,
            });
        }
    }

    let mut world = WorldState {
        ego,
        traffic,
        pedestrians,
        lanes,
        params: params.clone(),
        scenario,
        time: 0.0,
        steps: 0,
        rng,
    };
    activate_pedestrians(&mut world);
    Ok(world)
}

fn activate_pedestrians(world: &mut WorldState) {
    let ego_s = world.ego.s;
    for p in &mut world.pedestrians {
        if !p.active && !p.finished && world.time + 1e-9 >= p.start_time {
            p.active = true;
            p.s = ego_s + p.ahead;
        }
    }
}

/// Lateral band in which an object counts as occupying a lane for IDM.
fn in_lane(lanes: &LaneGeometry, lane: usize, d: f64, half_width: f64) -> bool {
    (d - lanes.lane_centers[lane]).abs() < lanes.lane_width / 2.0 + half_width
}

fn traffic_accelerations(world: &WorldState) -> Vec<f64> {
    let lanes = &world.lanes;
    let idm = &world.params.idm;
    world
        .traffic
        .iter()
        .map(|tv| {
            if tv.departed {
                return 0.0;
            }
            let me = &tv.state;
            let lane = lanes.lane_of(me.d);
            let mut gap = f64::INFINITY;
            let mut v_leader = me.v_s;
            let mut consider = |s: f64, half_len: f64, v: f64| {
                if s > me.s {
                    let g = s - me.s - half_len - me.half_length;
                    if g < gap {
                        gap = g;
                        v_leader = v;
                    }
                }
            };
            for other in &world.traffic {
                if other.departed || other.state.id == me.id {
                    continue;
                }
                if lanes.lane_of(other.state.d) == lane {
                    consider(other.state.s, other.state.half_length, other.state.v_s);
                }
            }
            let ego = &world.ego;
            if in_lane(lanes, lane, ego.d, ego.half_width) {
                consider(ego.s, ego.half_length, ego.v_s);
            }
            for p in world.pedestrians.iter().filter(|p| p.active) {
                if in_lane(lanes, lane, p.d, PEDESTRIAN_RADIUS) {
                    consider(p.s, PEDESTRIAN_RADIUS, 0.0);
                }
            }
            traffic_accel(gap, me.v_s, v_leader, tv.desired_speed, idm)
        })
        .collect()
}

/// Advances one step of length `dt` under ego `(steer, accel)`.
pub fn step_world(world: &mut WorldState, steer: f64, accel: f64, dt: f64) {
    assert!(dt > 0.0, "step length must be positive");
    let accels = traffic_accelerations(world);

    let ego = &mut world.ego;
    let steer = steer.clamp(-MAX_STEER, MAX_STEER);
    let accel = accel.clamp(-ACCEL_CAP, ACCEL_CAP);
    let v0 = ego.speed();
    let v1 = (v0 + accel * dt).max(0.0);
    let v_mid = 0.5 * (v0 + v1);
    let psi0 = ego.heading;
    let psi1 = (psi0 + v_mid * steer.tan() / WHEELBASE * dt).clamp(-MAX_HEADING, MAX_HEADING);
    let psi_mid = 0.5 * (psi0 + psi1);
    ego.s += v_mid * psi_mid.cos() * dt;
    ego.d += v_mid * psi_mid.sin() * dt;
    let (vs_old, vd_old) = (ego.v_s, ego.v_d);
    ego.heading = psi1;
    ego.v_s = v1 * psi1.cos();
    ego.v_d = v1 * psi1.sin();
    ego.a_s = (ego.v_s - vs_old) / dt;
    ego.a_d = (ego.v_d - vd_old) / dt;

    let road_end = world.lanes.road_length;
    for (tv, a) in world.traffic.iter_mut().zip(accels) {
        if tv.departed {
            continue;
        }
        let st = &mut tv.state;
        let v_new = (st.v_s + a * dt).max(0.0);
        st.s += 0.5 * (st.v_s + v_new) * dt;
        st.a_s = (v_new - st.v_s) / dt;
        st.v_s = v_new;
        if st.s - st.half_length > road_end {
            tv.departed = true;
        }
    }

    let edge = world.lanes.half_road_width() + 1.0;
    for p in world.pedestrians.iter_mut().filter(|p| p.active) {
        p.d += p.v_d * dt;
        if p.d.abs() > edge && p.d.signum() == p.v_d.signum() {
            p.active = false;
            p.finished = true;
        }
    }

    world.steps += 1;
    world.time = world.steps as f64 * dt;
    activate_pedestrians(world);
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateVector(pub [f64; OBS_DIM]);

impl StateVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn vehicle_slot(&self, i: usize) -> &[f64] {
        &self.0[5 + 5 * i..10 + 5 * i]
    }

    pub fn pedestrian_slot(&self, j: usize) -> &[f64] {
        let base = 5 + 5 * VEHICLE_SLOTS;
        &self.0[base + 3 * j..base + 3 * j + 3]
    }

    pub fn from_slice(x: &[f64]) -> Option<Self> {
        x.try_into().ok().map(StateVector)
    }
}

impl Serialize for StateVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.as_slice().serialize(s)
    }
}

impl<'de> Deserialize<'de> for StateVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        StateVector::from_slice(&v)
            .ok_or_else(|| serde::de::Error::invalid_length(v.len(), &"36 entries"))
    }
}

/// Which participant occupies each observation slot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SlotMap {
    pub vehicles: [Option<u32>; VEHICLE_SLOTS],
    pub pedestrians: [Option<u32>; PEDESTRIAN_SLOTS],
}

pub fn observe(world: &WorldState) -> StateVector {
    observe_with_slots(world).0
}

pub fn observe_with_slots(world: &WorldState) -> (StateVector, SlotMap) {
    let ego = &world.ego;
    let w = world.lanes.lane_width;
    let mut x = [0.0; OBS_DIM];
    x[0] = ego.s / world.lanes.road_length;
    x[1] = ego.d / w;
    x[2] = ego.v_s / EGO_SPEED_NORM;
    x[3] = ego.v_d;
    x[4] = ego.heading;

    let mut near: Vec<&VehicleState> = world
        .traffic
        .iter()
        .filter(|t| !t.departed && (t.state.s - ego.s).abs() <= REL_DISTANCE_NORM)
        .map(|t| &t.state)
        .collect();
    near.sort_by(|a, b| {
        (a.s - ego.s)
            .abs()
            .total_cmp(&(b.s - ego.s).abs())
            .then(a.id.cmp(&b.id))
    });
    let mut slots = SlotMap::default();
    for i in 0..VEHICLE_SLOTS {
        let base = 5 + 5 * i;
        let feat = match near.get(i) {
            Some(v) => {
                slots.vehicles[i] = Some(v.id);
                [
                    (v.s - ego.s) / REL_DISTANCE_NORM,
                    (v.d - ego.d) / (3.0 * w),
                    (v.v_s - ego.v_s) / REL_SPEED_NORM,
                    v.v_d - ego.v_d,
                    v.heading,
                ]
            }
            None => VEHICLE_PADDING,
        };
        x[base..base + 5].copy_from_slice(&feat);
    }

    let mut peds: Vec<&PedestrianState> = world
        .pedestrians
        .iter()
        .filter(|p| p.active && (p.s - ego.s).abs() <= REL_DISTANCE_NORM)
        .collect();
    peds.sort_by(|a, b| {
        (a.s - ego.s)
            .abs()
            .total_cmp(&(b.s - ego.s).abs())
            .then(a.id.cmp(&b.id))
    });
    for j in 0..PEDESTRIAN_SLOTS {
        let base = 5 + 5 * VEHICLE_SLOTS + 3 * j;
        let feat = match peds.get(j) {
            Some(p) => {
                slots.pedestrians[j] = Some(p.id);
                [(p.s - ego.s) / REL_DISTANCE_NORM, (p.d - ego.d) / (3.0 * w), p.v_d]
            }
            None => PEDESTRIAN_PADDING,
        };
        x[base..base + 3].copy_from_slice(&feat);
    }
    (StateVector(x), slots)
}

/// Oriented rectangle in road coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obb {
    pub cx: f64,
    pub cy: f64,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl Obb {
    fn axes(&self) -> [(f64, f64); 2] {
        let (sin, cos) = self.heading.sin_cos();
        [(cos, sin), (-sin, cos)]
    }

    fn project_radius(&self, axis: (f64, f64)) -> f64 {
        let [u, v] = self.axes();
        self.half_length * (u.0 * axis.0 + u.1 * axis.1).abs()
            + self.half_width * (v.0 * axis.0 + v.1 * axis.1).abs()
    }

    /// Separating-axis test; touching boundaries count as overlap.
    pub fn intersects(&self, other: &Obb) -> bool {
        let (dx, dy) = (other.cx - self.cx, other.cy - self.cy);
        self.axes().iter().chain(other.axes().iter()).all(|&axis| {
            let dist = (dx * axis.0 + dy * axis.1).abs();
            dist <= self.project_radius(axis) + other.project_radius(axis)
        })
    }

    pub fn intersects_disc(&self, x: f64, y: f64, r: f64) -> bool {
        let [u, v] = self.axes();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let lu = (dx * u.0 + dy * u.1).clamp(-self.half_length, self.half_length);
        let lv = (dx * v.0 + dy * v.1).clamp(-self.half_width, self.half_width);
        let px = self.cx + lu * u.0 + lv * v.0;
        let py = self.cy + lu * u.1 + lv * v.1;
        (x - px).hypot(y - py) <= r
    }
}

/// First participant the ego overlaps, if any.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CollisionTarget {
    Vehicle(u32),
    Pedestrian(u32),
}

pub fn collision_target(world: &WorldState) -> Option<CollisionTarget> {
    let fp = world.ego.footprint();
    for t in world.traffic.iter().filter(|t| !t.departed) {
        if fp.intersects(&t.state.footprint()) {
            return Some(CollisionTarget::Vehicle(t.state.id));
        }
    }
    for p in world.pedestrians.iter().filter(|p| p.active) {
        if fp.intersects_disc(p.s, p.d, PEDESTRIAN_RADIUS) {
            return Some(CollisionTarget::Pedestrian(p.id));
        }
    }
    None
}

pub fn detect_collision(world: &WorldState) -> bool {
    collision_target(world).is_some()
}

/// Any pair of active traffic vehicles overlapping.
pub fn traffic_collision(world: &WorldState) -> bool {
    let active: Vec<Obb> = world
        .traffic
        .iter()
        .filter(|t| !t.departed)
        .map(|t| t.state.footprint())
        .collect();
    (0..active.len()).any(|i| (i + 1..active.len()).any(|j| active[i].intersects(&active[j])))
}

pub fn ego_off_road(world: &WorldState) -> bool {
    world.ego.d.abs() + world.ego.half_width > world.lanes.half_road_width()
}
