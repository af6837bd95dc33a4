use proptest::prelude::*;
use ssev_core::sim::{
    detect_collision, observe, observe_with_slots, spawn_scenario, step_world, traffic_accel, traffic_collision,
    IdmParams, Obb, Scenario, TrafficParams, VehicleState, WorldState, DT, OBS_DIM,
    PEDESTRIAN_PADDING, REL_SPEED_NORM, VEHICLE_PADDING,
};

fn idm_oracle(gap: f64, v: f64, v_lead: f64, v0: f64, p: &IdmParams) -> f64 {
    let s_star = p.min_gap
        + (v * p.time_headway + v * (v - v_lead) / (2.0 * (p.max_accel * p.comfortable_decel).sqrt())).max(0.0);
    p.max_accel * (1.0 - (v / v0).powf(p.exponent) - (s_star / gap).powi(2))
}

fn traffic_only(seed: u64) -> WorldState {
    let mut w = spawn_scenario(seed, Scenario::A, &TrafficParams::default()).unwrap();
    // Park the ego far behind the flow and off the road so it never leads anyone.
    w.ego.s = -1.0e6;
    w.ego.d = 100.0;
    w
}

#[test]
fn idm_matches_single_expression() {
    let p = IdmParams::default();
    let got = traffic_accel(20.0, 10.0, 8.0, 12.0, &p);
    let want = idm_oracle(20.0, 10.0, 8.0, 12.0, &p);
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn idm_free_flow_limits() {
    let p = IdmParams::default();
    assert!(traffic_accel(f64::INFINITY, 11.0, 0.0, 11.0, &p).abs() < 1e-6);
    assert!((traffic_accel(f64::INFINITY, 0.0, 0.0, 11.0, &p) - p.max_accel).abs() < 1e-12);
    assert_eq!(traffic_accel(0.0, 5.0, 5.0, 11.0, &p), -p.decel_cap);
    assert_eq!(traffic_accel(-1.0, 5.0, 5.0, 11.0, &p), -p.decel_cap);
}

#[test]
fn spawn_speeds_and_gaps() {
    let params = TrafficParams::default();
    let w = spawn_scenario(7, Scenario::A, &params).unwrap();
    assert!(!w.traffic.is_empty());
    for (i, a) in w.traffic.iter().enumerate() {
        assert!((8.0..=12.0).contains(&a.state.v_s));
        for b in &w.traffic[i + 1..] {
            if w.lanes.lane_of(a.state.d) == w.lanes.lane_of(b.state.d) {
                assert!((a.state.s - b.state.s).abs() >= params.min_spawn_gap);
            }
        }
    }
    assert_eq!(w.ego.s, 0.0);
    assert_eq!(w.ego.v_s, 0.0);
    assert!(w.lanes.lane_centers.contains(&w.ego.d));
}

#[test]
fn empty_traffic_and_same_seed() {
    let params = TrafficParams {
        vehicle_count_range: [0, 0],
        ..TrafficParams::default()
    };
    assert!(spawn_scenario(3, Scenario::A, &params).unwrap().traffic.is_empty());
    let a = serde_json::to_string(&spawn_scenario(11, Scenario::B, &TrafficParams::default()).unwrap()).unwrap();
    let b = serde_json::to_string(&spawn_scenario(11, Scenario::B, &TrafficParams::default()).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn traffic_flow_never_collides() {
    for seed in 0..50 {
        let mut w = traffic_only(seed);
        for _ in 0..10_000 {
            step_world(&mut w, 0.0, 0.0, DT);
            assert!(!traffic_collision(&w), "seed {seed} at t={}", w.time);
        }
    }
}

#[test]
fn scenario_b_pedestrians_cross() {
    let mut saw_active = false;
    for seed in 0..5 {
        let mut w = spawn_scenario(seed, Scenario::B, &TrafficParams::default()).unwrap();
        assert!(!w.pedestrians.is_empty());
        for _ in 0..600 {
            step_world(&mut w, 0.0, 1.0, DT);
            for p in w.pedestrians.iter().filter(|p| p.active) {
                saw_active = true;
                assert!(p.v_d.abs() >= 1.0 && p.v_d.abs() <= 2.0);
            }
        }
    }
    assert!(saw_active);
}

#[test]
fn observation_endpoints() {
    let params = TrafficParams {
        vehicle_count_range: [0, 0],
        ..TrafficParams::default()
    };
    let mut w = spawn_scenario(1, Scenario::A, &params).unwrap();
    w.ego.s = 380.0;
    w.ego.v_s = 10.0;
    let mut lead = VehicleState::new(0, 580.0, w.ego.d, 10.0);
    lead.heading = 0.0;
    w.traffic.push(ssev_core::sim::TrafficVehicle {
        state: lead,
        desired_speed: 10.0,
        departed: false,
    });
    let x = observe(&w);
    assert_eq!(x.0.len(), OBS_DIM);
    assert_eq!(x.0[0], 0.5);
    let slot = x.vehicle_slot(0);
    assert_eq!(slot[0], 1.0);
    assert_eq!(slot[2], 0.0);
    assert_eq!(slot[3], 0.0);
    assert_eq!(slot[4], 0.0);
    for i in 1..5 {
        assert_eq!(x.vehicle_slot(i), VEHICLE_PADDING);
    }
    for j in 0..2 {
        assert_eq!(x.pedestrian_slot(j), PEDESTRIAN_PADDING);
    }
}

#[test]
fn coincident_and_distant_collisions() {
    let params = TrafficParams {
        vehicle_count_range: [0, 0],
        ..TrafficParams::default()
    };
    let mut w = spawn_scenario(1, Scenario::A, &params).unwrap();
    let mut other = w.ego.clone();
    other.id = 0;
    w.traffic.push(ssev_core::sim::TrafficVehicle {
        state: other.clone(),
        desired_speed: 10.0,
        departed: false,
    });
    assert!(detect_collision(&w));
    w.traffic[0].state.s += 50.0;
    assert!(!detect_collision(&w));
}

fn sat_oracle(a: &Obb, b: &Obb) -> bool {
    let corners = |o: &Obb| {
        let (c, s) = (o.heading.cos(), o.heading.sin());
        [(1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0)].map(|(i, j)| {
            (
                o.cx + i * o.half_length * c - j * o.half_width * s,
                o.cy + i * o.half_length * s + j * o.half_width * c,
            )
        })
    };
    let (ca, cb) = (corners(a), corners(b));
    let axes = [a.heading, a.heading + std::f64::consts::FRAC_PI_2, b.heading, b.heading + std::f64::consts::FRAC_PI_2];
    axes.iter().all(|&t| {
        let (ux, uy) = (t.cos(), t.sin());
        let proj = |cs: &[(f64, f64); 4]| {
            cs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, y)| {
                let p = x * ux + y * uy;
                (lo.min(p), hi.max(p))
            })
        };
        let (pa, pb) = (proj(&ca), proj(&cb));
        pa.1 >= pb.0 - 1e-9 && pb.1 >= pa.0 - 1e-9
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn sat_agrees_with_corner_oracle(
        x in -6.0f64..6.0, y in -4.0f64..4.0, h1 in -0.7f64..0.7, h2 in -0.7f64..0.7,
    ) {
        let a = Obb { cx: 0.0, cy: 0.0, heading: h1, half_length: 2.25, half_width: 0.9 };
        let b = Obb { cx: x, cy: y, heading: h2, half_length: 2.25, half_width: 0.9 };
        prop_assert_eq!(a.intersects(&b), sat_oracle(&a, &b));
    }

    #[test]
    fn speed_change_is_bounded(seed in 0u64..1000, steer in -0.6f64..0.6, accel in -8.0f64..8.0) {
        let mut w = spawn_scenario(seed, Scenario::A, &TrafficParams::default()).unwrap();
        w.ego.v_s = 10.0;
        for _ in 0..20 {
            let before = w.ego.speed();
            step_world(&mut w, steer, accel, DT);
            prop_assert!((w.ego.speed() - before).abs() <= accel.abs() * DT + 1e-9);
            for t in &w.traffic {
                prop_assert!(t.state.v_s >= 0.0);
            }
        }
    }

    #[test]
    fn deterministic_rollouts(seed in 0u64..1000, controls in proptest::collection::vec((-0.5f64..0.5, -3.0f64..3.0), 1..40)) {
        let run = || {
            let mut w = spawn_scenario(seed, Scenario::B, &TrafficParams::default()).unwrap();
            let mut out = Vec::new();
            for &(s, a) in &controls {
                step_world(&mut w, s, a, DT);
                out.push(serde_json::to_string(&w).unwrap());
            }
            out
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn normalized_entries_stay_in_range(seed in 0u64..1000, steps in 0usize..200) {
        let mut w = spawn_scenario(seed, Scenario::B, &TrafficParams::default()).unwrap();
        for _ in 0..steps {
            step_world(&mut w, 0.0, 1.0, DT);
        }
        let (x, slots) = observe_with_slots(&w);
        prop_assert!(x.0.iter().all(|v| v.is_finite()));
        if w.ego.v_s <= 15.0 {
            prop_assert!((0.0..=1.0).contains(&x.0[2]));
        }
        for (i, id) in slots.vehicles.iter().enumerate() {
            let slot = x.vehicle_slot(i);
            prop_assert!((-1.0..=1.0).contains(&slot[0]));
            let Some(id) = id else { continue };
            let v = w.traffic.iter().find(|t| t.state.id == *id).unwrap();
            if (v.state.v_s - w.ego.v_s).abs() <= REL_SPEED_NORM {
                prop_assert!((-1.0..=1.0).contains(&slot[2]));
            }
        }
    }
}
