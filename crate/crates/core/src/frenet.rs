//! Quintic lateral / quartic longitudinal boundary-value trajectories and
//! the PID tracker that follows them.

use serde::{Deserialize, Serialize};

use crate::sim::VehicleState;
use crate::Error;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LateralBoundary {
    pub d0: f64,
    pub d0_dot: f64,
    pub d0_ddot: f64,
    pub d_fn: f64,
    pub d_fn_dot: f64,
    pub d_fn_ddot: f64,
}

impl LateralBoundary {
    pub fn rhs(&self) -> [f64; 6] {
        [self.d0, self.d0_dot, self.d0_ddot, self.d_fn, self.d_fn_dot, self.d_fn_ddot]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalBoundary {
    pub s0: f64,
    pub s0_dot: f64,
    pub s0_ddot: f64,
    pub sf_dot: f64,
    pub sf_ddot: f64,
}

impl LongitudinalBoundary {
    pub fn rhs(&self) -> [f64; 5] {
        [self.s0, self.s0_dot, self.s0_ddot, self.sf_dot, self.sf_ddot]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub p_d: [f64; 6],
    pub p_s: [f64; 5],
    pub horizon: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrenetPoint {
    pub s: f64,
    pub s_dot: f64,
    pub s_ddot: f64,
    pub d: f64,
    pub d_dot: f64,
    pub d_ddot: f64,
}

/// Boundary matrix of the quintic: position/velocity/acceleration at 0 and `t`.
pub fn lateral_matrix(t: f64) -> [[f64; 6]; 6] {
    let (t2, t3, t4, t5) = (t * t, t.powi(3), t.powi(4), t.powi(5));
    [
        [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 2.0, 0.0, 0.0, 0.0],
        [1.0, t, t2, t3, t4, t5],
        [0.0, 1.0, 2.0 * t, 3.0 * t2, 4.0 * t3, 5.0 * t4],
        [0.0, 0.0, 2.0, 6.0 * t, 12.0 * t2, 20.0 * t3],
    ]
}

/// Boundary matrix of the quartic: state at 0, velocity/acceleration at `t`.
pub fn longitudinal_matrix(t: f64) -> [[f64; 5]; 5] {
    let (t2, t3) = (t * t, t.powi(3));
    [
        [1.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 2.0, 0.0, 0.0],
        [0.0, 1.0, 2.0 * t, 3.0 * t2, 4.0 * t3],
        [0.0, 0.0, 2.0, 6.0 * t, 12.0 * t2],
    ]
}

/// Gaussian elimination with partial pivoting. `None` for a singular system.
pub fn solve_dense<const N: usize>(mut a: [[f64; N]; N], mut b: [f64; N]) -> Option<[f64; N]> {
    for col in 0..N {
        let pivot = (col..N).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..N {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..N {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = [0.0; N];
    for row in (0..N).rev() {
        let tail: f64 = (row + 1..N).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Some(x)
}

fn check_horizon(t: f64) -> Result<(), Error> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidHorizon(t))
    }
}

pub fn solve_lateral_quintic(b: &LateralBoundary, t_c: f64) -> Result<[f64; 6], Error> {
    check_horizon(t_c)?;
    solve_dense(lateral_matrix(t_c), b.rhs()).ok_or(Error::InvalidHorizon(t_c))
}

pub fn solve_longitudinal_quartic(b: &LongitudinalBoundary, t_c: f64) -> Result<[f64; 5], Error> {
    check_horizon(t_c)?;
    solve_dense(longitudinal_matrix(t_c), b.rhs()).ok_or(Error::InvalidHorizon(t_c))
}

impl Trajectory {
    pub fn plan(lat: &LateralBoundary, lon: &LongitudinalBoundary, t_c: f64) -> Result<Self, Error> {
        Ok(Self {
            p_d: solve_lateral_quintic(lat, t_c)?,
            p_s: solve_longitudinal_quartic(lon, t_c)?,
            horizon: t_c,
        })
    }
}

/// Value, first and second derivative of `sum c_i t^i` by Horner's rule.
pub fn poly_eval(c: &[f64], t: f64) -> (f64, f64, f64) {
    let (mut p, mut dp, mut ddp) = (0.0, 0.0, 0.0);
    for &a in c.iter().rev() {
        ddp = ddp * t + 2.0 * dp;
        dp = dp * t + p;
        p = p * t + a;
    }
    (p, dp, ddp)
}

pub fn eval_trajectory(traj: &Trajectory, t: f64) -> Result<FrenetPoint, Error> {
    if !(0.0..=traj.horizon).contains(&t) {
        return Err(Error::OutOfRange {
            t,
            horizon: traj.horizon,
        });
    }
    let (s, s_dot, s_ddot) = poly_eval(&traj.p_s, t);
    let (d, d_dot, d_ddot) = poly_eval(&traj.p_d, t);
    Ok(FrenetPoint {
        s,
        s_dot,
        s_ddot,
        d,
        d_dot,
        d_ddot,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PidGains {
    pub lateral_kp: f64,
    pub lateral_ki: f64,
    pub lateral_kd: f64,
    pub heading_gain: f64,
    pub speed_kp: f64,
    pub speed_ki: f64,
    pub speed_kd: f64,
    /// Look-ahead along the reference at which the speed error is measured.
    pub preview: f64,
    /// Time gap to the point the heading reference aims at.
    pub lookahead_time: f64,
    /// Floor on the look-ahead distance, m.
    pub min_lookahead: f64,
    pub max_steer: f64,
    pub accel_min: f64,
    pub accel_max: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            lateral_kp: 0.6,
            lateral_ki: 0.0,
            lateral_kd: 0.15,
            heading_gain: 1.2,
            speed_kp: 1.0,
            speed_ki: 0.05,
            speed_kd: 0.0,
            preview: 0.5,
            lookahead_time: 2.0,
            min_lookahead: 5.0,
            max_steer: crate::sim::MAX_STEER,
            accel_min: -2.0,
            accel_max: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TrackMode {
    /// Follow the longitudinal speed profile of the trajectory.
    SpeedProfile,
    /// Use the given longitudinal acceleration as-is.
    DirectAccel(f64),
}

const INTEGRAL_LIMIT: f64 = 10.0;

/// Per-episode PID state.
#[derive(Clone, Debug, PartialEq)]
pub struct PidTracker {
    pub gains: PidGains,
    lateral_integral: f64,
    speed_integral: f64,
    prev_speed_error: Option<f64>,
}

impl PidTracker {
    pub fn new(gains: PidGains) -> Self {
        Self {
            gains,
            lateral_integral: 0.0,
            speed_integral: 0.0,
            prev_speed_error: None,
        }
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.gains);
    }

    /// Returns `(steer, accel)` clamped to the actuator limits.
    pub fn track(
        &mut self,
        traj: &Trajectory,
        ego: &VehicleState,
        elapsed: f64,
        mode: TrackMode,
        dt: f64,
    ) -> (f64, f64) {
        let g = self.gains;
        let t_now = elapsed.clamp(0.0, traj.horizon);
        let now = eval_trajectory(traj, t_now).expect("elapsed time clamped into the horizon");
        let t_ref = (elapsed + g.preview).clamp(0.0, traj.horizon);
        let r = eval_trajectory(traj, t_ref).expect("preview time clamped into the horizon");

        let e_lat = now.d - ego.d;
        let e_lat_rate = now.d_dot - ego.v_d;
        self.lateral_integral =
            (self.lateral_integral + e_lat * dt).clamp(-INTEGRAL_LIMIT, INTEGRAL_LIMIT);
        let speed = ego.speed();
        let reach = (speed * g.lookahead_time).max(g.min_lookahead);
        let t_aim = (elapsed + reach / speed.max(1e-3)).clamp(0.0, traj.horizon);
        let aim = eval_trajectory(traj, t_aim).expect("aim time clamped into the horizon");
        let heading_err = (aim.d - ego.d).atan2(reach) - ego.heading;
        let steer = g.lateral_kp * e_lat
            + g.lateral_ki * self.lateral_integral
            + g.lateral_kd * e_lat_rate
            + g.heading_gain * heading_err;

        let accel = match mode {
            TrackMode::DirectAccel(a) => a,
            TrackMode::SpeedProfile => {
                let e = r.s_dot - ego.v_s;
                self.speed_integral =
                    (self.speed_integral + e * dt).clamp(-INTEGRAL_LIMIT, INTEGRAL_LIMIT);
                let de = self.prev_speed_error.map_or(0.0, |p| (e - p) / dt);
                self.prev_speed_error = Some(e);
                r.s_ddot + g.speed_kp * e + g.speed_ki * self.speed_integral + g.speed_kd * de
            }
        };
        (
            steer.clamp(-g.max_steer, g.max_steer),
            accel.clamp(g.accel_min, g.accel_max),
        )
    }
}
