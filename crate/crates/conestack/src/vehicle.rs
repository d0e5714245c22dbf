//! Ground-truth vehicle plant: a dynamic bicycle model with linear tire
//! forces integrated by RK4, plus per-wheel speeds derived from rigid-body
//! kinematics and a commanded slip ratio.
//!
//! The slip ratio is what makes wheel odometry lie to the estimator: wheel
//! circumferential speed is `hub_speed * (1 + kappa)` with `kappa`
//! proportional to the commanded longitudinal acceleration, saturated at
//! `slip_max`.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::geom::{wrap_finite, Pose2D, VelocityState};
use crate::{Error, Result};

pub const WHEEL_COUNT: usize = 4;

/// Wheel order: front-left, front-right, rear-left, rear-right.
pub const WHEEL_NAMES: [&str; WHEEL_COUNT] = ["fl", "fr", "rl", "rr"];

/// Physical constants of the plant and its wheel kinematics.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    /// Vehicle mass (kg).
    pub mass: f64,
    /// Yaw inertia (kg m^2).
    pub yaw_inertia: f64,
    /// CG to front axle (m).
    pub lf: f64,
    /// CG to rear axle (m).
    pub lr: f64,
    /// Half of the wheel track (m).
    pub half_track: f64,
    /// Front cornering stiffness (N/rad), linear tire model.
    pub cornering_front: f64,
    /// Rear cornering stiffness (N/rad).
    pub cornering_rear: f64,
    /// Effective wheel radius (m).
    pub r_eff: f64,
    /// Steering limit (rad).
    pub steer_max: f64,
    /// Longitudinal acceleration limit (m/s^2).
    pub accel_max: f64,
    /// Slip ratio per commanded m/s^2.
    pub slip_per_accel: f64,
    /// Slip ratio saturation.
    pub slip_max: f64,
    /// Speed (m/s) below which tire forces fade out linearly.
    pub low_speed_fade: f64,
    /// Floor on the speed used in the slip-angle denominators (m/s). Keeps
    /// the lateral dynamics non-stiff at launch: the fastest eigenvalue is
    /// bounded by 2 C / (m * floor), which must stay well under the RK4
    /// stability limit at the base step.
    pub slip_speed_floor: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            mass: 190.0,
            yaw_inertia: 110.0,
            lf: 0.775,
            lr: 0.775,
            half_track: 0.6,
            cornering_front: 5.0e4,
            cornering_rear: 5.0e4,
            r_eff: 0.23,
            steer_max: 0.45,
            accel_max: 6.0,
            slip_per_accel: 0.01,
            slip_max: 0.1,
            low_speed_fade: 1.0,
            slip_speed_floor: 2.5,
        }
    }
}

impl VehicleParams {
    pub fn wheelbase(&self) -> f64 {
        self.lf + self.lr
    }

    /// Wheel positions in the body frame `(x forward, y left)`.
    pub fn wheel_positions(&self) -> [Vector2<f64>; WHEEL_COUNT] {
        [
            Vector2::new(self.lf, self.half_track),
            Vector2::new(self.lf, -self.half_track),
            Vector2::new(-self.lr, self.half_track),
            Vector2::new(-self.lr, -self.half_track),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mass", self.mass),
            ("yaw_inertia", self.yaw_inertia),
            ("lf", self.lf),
            ("lr", self.lr),
            ("half_track", self.half_track),
            ("cornering_front", self.cornering_front),
            ("cornering_rear", self.cornering_rear),
            ("r_eff", self.r_eff),
            ("steer_max", self.steer_max),
            ("accel_max", self.accel_max),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(name, "must be positive and finite"));
            }
        }
        if self.slip_max < 0.0 || self.slip_per_accel < 0.0 {
            return Err(Error::param("slip", "slip parameters must be nonnegative"));
        }
        Ok(())
    }
}

/// Full plant state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub pose: Pose2D,
    pub vel: VelocityState,
    pub wheel_omegas: [f64; WHEEL_COUNT],
    /// Simulation time (s).
    pub t: f64,
}

impl VehicleState {
    pub fn at_rest(pose: Pose2D) -> Self {
        VehicleState {
            pose,
            vel: VelocityState::default(),
            wheel_omegas: [0.0; WHEEL_COUNT],
            t: 0.0,
        }
    }
}

/// Driver command: front-axle steering angle and a longitudinal
/// acceleration surrogate for drive/brake force.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DriveInput {
    pub steering: f64,
    pub accel_cmd: f64,
}

impl DriveInput {
    pub fn clamped(self, p: &VehicleParams) -> DriveInput {
        DriveInput {
            steering: self.steering.clamp(-p.steer_max, p.steer_max),
            accel_cmd: self.accel_cmd.clamp(-p.accel_max, p.accel_max),
        }
    }
}

/// Commanded slip ratio for the current drive input.
pub fn slip_ratio(u: &DriveInput, p: &VehicleParams) -> f64 {
    (p.slip_per_accel * u.accel_cmd).clamp(-p.slip_max, p.slip_max)
}

/// Longitudinal hub speed of wheel `i`, projected through the steering
/// angle for the front axle.
pub fn hub_speed(vel: &VelocityState, steering: f64, wheel: usize, p: &VehicleParams) -> f64 {
    let pos = p.wheel_positions()[wheel];
    let hub_vx = vel.vx - vel.r * pos.y;
    let hub_vy = vel.vy + vel.r * pos.x;
    if wheel < 2 {
        let (s, c) = steering.sin_cos();
        c * hub_vx + s * hub_vy
    } else {
        hub_vx
    }
}

/// Wheel angular rates from hub kinematics plus commanded slip.
pub fn wheel_omegas_from(vel: &VelocityState, u: &DriveInput, p: &VehicleParams) -> [f64; WHEEL_COUNT] {
    let kappa = slip_ratio(u, p);
    let mut out = [0.0; WHEEL_COUNT];
    for (i, w) in out.iter_mut().enumerate() {
        *w = hub_speed(vel, u.steering, i, p) * (1.0 + kappa) / p.r_eff;
    }
    out
}

/// Body-frame velocity derivatives for the bicycle model.
fn vel_deriv(vel: &VelocityState, u: &DriveInput, p: &VehicleParams) -> (f64, f64, f64) {
    let (ax_f, ay_f, moment) = tire_forces(vel, u, p);
    (
        u.accel_cmd + ax_f + vel.r * vel.vy,
        ay_f - vel.r * vel.vx,
        moment,
    )
}

/// Specific-force contributions `(ax, ay)` of the tires plus drive command,
/// and the yaw moment over inertia. `(ax, ay)` is exactly what an ideal
/// accelerometer at the CG measures.
fn tire_forces(vel: &VelocityState, u: &DriveInput, p: &VehicleParams) -> (f64, f64, f64) {
    // Fade lateral forces out below walking pace so a standing car with
    // steered wheels stays at rest.
    let fade = (vel.vx.abs() / p.low_speed_fade).clamp(0.0, 1.0);
    let vx_safe = vel.vx.max(p.slip_speed_floor);
    let alpha_f = u.steering - (vel.vy + p.lf * vel.r).atan2(vx_safe);
    let alpha_r = -(vel.vy - p.lr * vel.r).atan2(vx_safe);
    let fy_f = fade * p.cornering_front * alpha_f;
    let fy_r = fade * p.cornering_rear * alpha_r;
    let (sd, cd) = u.steering.sin_cos();
    (
        -fy_f * sd / p.mass,
        (fy_f * cd + fy_r) / p.mass,
        (p.lf * fy_f * cd - p.lr * fy_r) / p.yaw_inertia,
    )
}

/// Body-frame specific force `(ax, ay)` an ideal IMU reports for the
/// current state and input.
pub fn body_accel(s: &VehicleState, u: &DriveInput, p: &VehicleParams) -> (f64, f64) {
    let (ax_f, ay_f, _) = tire_forces(&s.vel, u, p);
    (u.accel_cmd + ax_f, ay_f)
}

const STATE_DIM: usize = 6;
type PlantVec = [f64; STATE_DIM]; // x, y, theta, vx, vy, r

fn plant_deriv(y: &PlantVec, u: &DriveInput, p: &VehicleParams) -> PlantVec {
    let vel = VelocityState {
        vx: y[3],
        vy: y[4],
        r: y[5],
    };
    let (dvx, dvy, dr) = vel_deriv(&vel, u, p);
    let (st, ct) = y[2].sin_cos();
    [
        y[3] * ct - y[4] * st,
        y[3] * st + y[4] * ct,
        y[5],
        dvx,
        dvy,
        dr,
    ]
}

pub const MAX_PLANT_DT: f64 = 0.02;

/// Advance the plant by one RK4 step of `dt` seconds under input `u`.
pub fn step_dynamics(
    s: &VehicleState,
    u: &DriveInput,
    dt: f64,
    p: &VehicleParams,
) -> Result<VehicleState> {
    if !(dt > 0.0 && dt <= MAX_PLANT_DT) {
        return Err(Error::param(
            "dt",
            format!("{dt} outside (0, {MAX_PLANT_DT}]"),
        ));
    }
    let u = u.clamped(p);
    let y0: PlantVec = [
        s.pose.x, s.pose.y, s.pose.theta, s.vel.vx, s.vel.vy, s.vel.r,
    ];
    let add = |a: &PlantVec, b: &PlantVec, h: f64| {
        let mut out = *a;
        for i in 0..STATE_DIM {
            out[i] += b[i] * h;
        }
        out
    };
    let k1 = plant_deriv(&y0, &u, p);
    let k2 = plant_deriv(&add(&y0, &k1, dt / 2.0), &u, p);
    let k3 = plant_deriv(&add(&y0, &k2, dt / 2.0), &u, p);
    let k4 = plant_deriv(&add(&y0, &k3, dt), &u, p);
    let mut y1 = y0;
    for i in 0..STATE_DIM {
        y1[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }

    let vel = VelocityState {
        vx: y1[3],
        vy: y1[4],
        r: y1[5],
    };
    vel.check_finite()?;
    Ok(VehicleState {
        pose: Pose2D {
            x: y1[0],
            y: y1[1],
            theta: wrap_finite(y1[2]),
        },
        vel,
        wheel_omegas: wheel_omegas_from(&vel, &u, p),
        t: s.t + dt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn straight_state(vx: f64) -> VehicleState {
        let p = VehicleParams::default();
        let vel = VelocityState { vx, vy: 0.0, r: 0.0 };
        VehicleState {
            pose: Pose2D::identity(),
            vel,
            wheel_omegas: wheel_omegas_from(&vel, &DriveInput::default(), &p),
            t: 0.0,
        }
    }

    #[test]
    fn rest_is_equilibrium() {
        let p = VehicleParams::default();
        let s0 = VehicleState::at_rest(Pose2D::identity());
        let s1 = step_dynamics(&s0, &DriveInput::default(), 0.01, &p).unwrap();
        assert_eq!(s1.pose, s0.pose);
        assert_eq!(s1.vel, s0.vel);
        assert_eq!(s1.wheel_omegas, s0.wheel_omegas);
    }

    #[test]
    fn straight_line_advances_exactly() {
        let p = VehicleParams::default();
        let mut s = straight_state(10.0);
        for _ in 0..100 {
            s = step_dynamics(&s, &DriveInput::default(), 0.01, &p).unwrap();
        }
        assert_relative_eq!(s.pose.x, 10.0, epsilon = 1e-9);
        assert_eq!(s.pose.y, 0.0);
        assert_eq!(s.vel.vy, 0.0);
        assert_eq!(s.vel.r, 0.0);
    }

    #[test]
    fn dt_out_of_range_rejected() {
        let p = VehicleParams::default();
        let s = straight_state(5.0);
        assert!(step_dynamics(&s, &DriveInput::default(), 0.0, &p).is_err());
        assert!(step_dynamics(&s, &DriveInput::default(), 0.05, &p).is_err());
    }

    #[test]
    fn steady_state_yaw_rate_matches_kinematic_bicycle() {
        // Kinematic limit oracle: r = vx tan(delta) / L, integrated to
        // convergence at low speed.
        let p = VehicleParams::default();
        let delta = 0.12;
        let mut s = straight_state(3.0);
        for _ in 0..800 {
            let u = DriveInput {
                steering: delta,
                accel_cmd: 2.0 * (3.0 - s.vel.vx),
            };
            s = step_dynamics(&s, &u, 0.01, &p).unwrap();
        }
        let expect = s.vel.vx * delta.tan() / p.wheelbase();
        let rel = (s.vel.r - expect).abs() / expect;
        assert!(rel < 0.02, "yaw rate {} vs kinematic {expect} ({rel:.4})", s.vel.r);
    }

    #[test]
    fn rk4_dt_refinement_consistent() {
        let p = VehicleParams::default();
        let u = DriveInput {
            steering: 0.1,
            accel_cmd: 1.0,
        };
        let run = |dt: f64| {
            let mut s = straight_state(8.0);
            let steps = (1.0 / dt).round() as usize;
            for _ in 0..steps {
                s = step_dynamics(&s, &u, dt, &p).unwrap();
            }
            s
        };
        let a = run(0.01);
        let b = run(0.005);
        let dp = ((a.pose.x - b.pose.x).powi(2) + (a.pose.y - b.pose.y).powi(2)).sqrt();
        assert!(dp < 1e-3, "position refinement gap {dp}");
    }

    #[test]
    fn hub_speeds_split_left_right_in_yaw() {
        // Rigid-body kinematics oracle: v_hub = vx -/+ r * half_track.
        let p = VehicleParams::default();
        let vel = VelocityState {
            vx: 10.0,
            vy: 0.0,
            r: 1.0,
        };
        assert_relative_eq!(hub_speed(&vel, 0.0, 2, &p), 9.4, epsilon = 1e-12);
        assert_relative_eq!(hub_speed(&vel, 0.0, 3, &p), 10.6, epsilon = 1e-12);
    }

    #[test]
    fn wheel_omega_is_speed_over_radius_without_slip() {
        let p = VehicleParams::default();
        let vel = VelocityState {
            vx: 10.0,
            vy: 0.0,
            r: 0.0,
        };
        let omegas = wheel_omegas_from(&vel, &DriveInput::default(), &p);
        for w in omegas {
            assert_relative_eq!(w, 10.0 / 0.23, epsilon = 1e-9);
        }
    }

    #[test]
    fn slip_inflates_wheel_speed_under_traction() {
        let p = VehicleParams::default();
        let vel = VelocityState {
            vx: 10.0,
            vy: 0.0,
            r: 0.0,
        };
        let u = DriveInput {
            steering: 0.0,
            accel_cmd: 4.0,
        };
        let omegas = wheel_omegas_from(&vel, &u, &p);
        let kappa = slip_ratio(&u, &p);
        assert_relative_eq!(kappa, 0.04, epsilon = 1e-12);
        for w in omegas {
            assert_relative_eq!(w, 10.0 * 1.04 / 0.23, epsilon = 1e-9);
        }
        // Saturation.
        let hard = DriveInput {
            steering: 0.0,
            accel_cmd: 100.0,
        };
        assert_relative_eq!(slip_ratio(&hard.clamped(&p), &p), 0.06, epsilon = 1e-12);
        assert_relative_eq!(slip_ratio(&hard, &p), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn speed_change_bounded_by_command_plus_coupling() {
        let p = VehicleParams::default();
        let u = DriveInput {
            steering: 0.2,
            accel_cmd: 3.0,
        };
        let mut s = straight_state(8.0);
        for _ in 0..200 {
            let before = s.vel.speed();
            s = step_dynamics(&s, &u, 0.01, &p).unwrap();
            let dv = (s.vel.speed() - before).abs();
            // Lateral coupling bound: centripetal terms cancel in |v|; allow
            // the tire-force contribution.
            let bound = (u.accel_cmd.abs() + 2.0 * p.cornering_front * 0.5 / p.mass) * 0.01;
            assert!(dv <= bound, "dv {dv} exceeds bound {bound}");
        }
    }
}
