//! Reference-path driver: pure pursuit steering plus a curvature-aware
//! speed controller over the track centerline.
//!
//! A commanded speed profile is rejected up front if any centerline arc
//! would demand more than 1.7 g of lateral acceleration at that speed; at
//! runtime the controller additionally caps speed a little below the same
//! envelope so transients stay inside it.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::geom::{wrap_finite, Pose2D};
use crate::track::TrackSpec;
use crate::vehicle::{step_dynamics, DriveInput, VehicleParams, VehicleState};
use crate::{Error, Result};

/// Speed envelope from the vehicle's operating regime: 90 km/h top speed.
pub const MAX_SPEED: f64 = 25.0;
/// Lateral acceleration envelope: 1.7 g.
pub const MAX_LAT_ACCEL: f64 = 1.7 * 9.81;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriverParams {
    /// Commanded speed profile (m/s), constant over the lap.
    pub speed_mps: f64,
    /// Lookahead distance = clamp(gain * v, min, max).
    pub lookahead_gain: f64,
    pub lookahead_min: f64,
    pub lookahead_max: f64,
    /// Proportional speed-tracking gain (1/s).
    pub speed_kp: f64,
    /// Fraction of the lateral envelope the runtime limiter uses.
    pub lat_margin: f64,
}

impl Default for DriverParams {
    fn default() -> Self {
        DriverParams {
            speed_mps: 10.5,
            lookahead_gain: 0.45,
            lookahead_min: 3.0,
            lookahead_max: 7.0,
            speed_kp: 1.5,
            lat_margin: 0.92,
        }
    }
}

/// Arc-length table over a closed polyline: projection, interpolation and
/// smoothed three-point curvature.
pub struct ArcTable {
    pts: Vec<Vector2<f64>>,
    cum: Vec<f64>,
    curv: Vec<f64>,
    total: f64,
}

impl ArcTable {
    /// Build from a closed polyline whose first point is repeated at the end.
    pub fn from_closed_polyline(poly: &[[f64; 2]]) -> Result<Self> {
        if poly.len() < 8 {
            return Err(Error::InfeasibleTrack("polyline too short".into()));
        }
        let pts: Vec<Vector2<f64>> = poly[..poly.len() - 1]
            .iter()
            .map(|p| Vector2::from(*p))
            .collect();
        let n = pts.len();
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(0.0);
        for i in 0..n {
            let d = (pts[(i + 1) % n] - pts[i]).norm();
            cum.push(cum[i] + d);
        }
        let total = *cum.last().unwrap();

        // Three-point circumradius curvature, then a short moving average
        // to damp discretization noise.
        let mut raw = vec![0.0; n];
        for i in 0..n {
            let a = pts[(i + n - 1) % n];
            let b = pts[i];
            let c = pts[(i + 1) % n];
            let ab = b - a;
            let bc = c - b;
            let ac = c - a;
            let cross = (ab.x * ac.y - ab.y * ac.x).abs();
            let denom = ab.norm() * bc.norm() * ac.norm();
            raw[i] = if denom > 1e-12 { 2.0 * cross / denom } else { 0.0 };
        }
        let mut curv = vec![0.0; n];
        let w = 2usize;
        for i in 0..n {
            let mut s = 0.0;
            for k in 0..=2 * w {
                s += raw[(i + n + k - w) % n];
            }
            curv[i] = s / (2 * w + 1) as f64;
        }

        Ok(ArcTable {
            pts,
            cum,
            curv,
            total,
        })
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    fn wrap_s(&self, s: f64) -> f64 {
        s.rem_euclid(self.total)
    }

    fn segment_of(&self, s: f64) -> (usize, f64) {
        let s = self.wrap_s(s);
        let mut lo = 0usize;
        let mut hi = self.cum.len() - 1;
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if self.cum[mid] <= s {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let span = (self.cum[lo + 1] - self.cum[lo]).max(1e-12);
        (lo, (s - self.cum[lo]) / span)
    }

    pub fn point_at(&self, s: f64) -> Vector2<f64> {
        let (i, frac) = self.segment_of(s);
        let n = self.pts.len();
        self.pts[i] + (self.pts[(i + 1) % n] - self.pts[i]) * frac
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        let (i, _) = self.segment_of(s);
        self.curv[i]
    }

    /// Largest curvature over the window `[s, s + ahead]`.
    pub fn max_curvature_ahead(&self, s: f64, ahead: f64) -> f64 {
        let n = self.pts.len();
        let (start, _) = self.segment_of(s);
        let step = self.total / n as f64;
        let count = ((ahead / step).ceil() as usize).min(n);
        let mut k: f64 = 0.0;
        for j in 0..=count {
            k = k.max(self.curv[(start + j) % n]);
        }
        k
    }

    /// Arc-length station of the point nearest `p`, warm-started from
    /// `hint` when given.
    pub fn project(&self, p: Vector2<f64>, hint: Option<f64>) -> f64 {
        let n = self.pts.len();
        let (center, window) = match hint {
            Some(h) => (self.segment_of(h).0, n / 8),
            None => (0, n),
        };
        let mut best = (f64::INFINITY, center);
        for off in 0..=(2 * window) {
            let i = (center + n + off - window) % n;
            let d = (self.pts[i] - p).norm_squared();
            if d < best.0 {
                best = (d, i);
            }
        }
        let i = best.1;
        // Refine on the two segments adjacent to the best vertex.
        let mut out = (f64::INFINITY, self.cum[i]);
        for seg in [(i + n - 1) % n, i] {
            let a = self.pts[seg];
            let b = self.pts[(seg + 1) % n];
            let ab = b - a;
            let len2 = ab.norm_squared().max(1e-12);
            let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
            let q = a + ab * t;
            let d = (q - p).norm_squared();
            if d < out.0 {
                out = (d, self.cum[seg] + t * ab.norm());
            }
        }
        out.1
    }

    /// Perpendicular distance from `p` to the polyline.
    pub fn cross_track(&self, p: Vector2<f64>, hint: Option<f64>) -> f64 {
        let s = self.project(p, hint);
        (self.point_at(s) - p).norm()
    }

    pub fn max_curvature(&self) -> (f64, f64) {
        let mut best = (0.0f64, 0.0f64);
        for (i, &k) in self.curv.iter().enumerate() {
            if k > best.0 {
                best = (k, self.cum[i]);
            }
        }
        best
    }
}

/// Stateful pure-pursuit follower with curvature-limited speed.
pub struct PathFollower {
    table: ArcTable,
    params: DriverParams,
    vehicle: VehicleParams,
    s_hint: Option<f64>,
}

impl PathFollower {
    pub fn new(track: &TrackSpec, params: DriverParams, vehicle: VehicleParams) -> Result<Self> {
        if !(params.speed_mps > 0.0 && params.speed_mps <= MAX_SPEED) {
            return Err(Error::InfeasibleSpeed(format!(
                "speed {} m/s outside (0, {MAX_SPEED}]",
                params.speed_mps
            )));
        }
        let table = ArcTable::from_closed_polyline(&track.centerline)?;
        // Feasibility precheck: the commanded profile may not demand more
        // than the lateral envelope anywhere on the centerline.
        let v2 = params.speed_mps * params.speed_mps;
        let (k_max, s_at) = table.max_curvature();
        if v2 * k_max > MAX_LAT_ACCEL {
            return Err(Error::InfeasibleSpeed(format!(
                "{} m/s on the arc at s = {:.1} m (radius {:.1} m) needs {:.2} m/s^2 lateral \
                 acceleration; the envelope is {:.2} m/s^2 (1.7 g)",
                params.speed_mps,
                s_at,
                1.0 / k_max.max(1e-9),
                v2 * k_max,
                MAX_LAT_ACCEL
            )));
        }
        Ok(PathFollower {
            table,
            params,
            vehicle,
            s_hint: None,
        })
    }

    pub fn table(&self) -> &ArcTable {
        &self.table
    }

    pub fn start_pose(track: &TrackSpec) -> Pose2D {
        track.start_pose
    }

    /// One control evaluation (pure pursuit + speed loop).
    pub fn control(&mut self, state: &VehicleState) -> DriveInput {
        let p = state.pose.translation();
        let s = self.table.project(p, self.s_hint);
        self.s_hint = Some(s);

        let ld = (self.params.lookahead_gain * state.vel.vx)
            .clamp(self.params.lookahead_min, self.params.lookahead_max);
        let target = self.table.point_at(s + ld);
        let to_target = target - p;
        let alpha = wrap_finite(to_target.y.atan2(to_target.x) - state.pose.theta);
        let steering = (2.0 * self.vehicle.wheelbase() * alpha.sin()).atan2(ld);

        // Cap commanded speed below the lateral envelope for the curvature
        // coming up within a braking distance.
        let ahead = state.vel.vx.max(3.0) * 1.5 + ld;
        let k_ahead = self.table.max_curvature_ahead(s, ahead).max(1e-6);
        let v_limit = (self.params.lat_margin * MAX_LAT_ACCEL / k_ahead).sqrt();
        let v_cmd = self.params.speed_mps.min(v_limit);
        let accel = self.params.speed_kp * (v_cmd - state.vel.vx);

        DriveInput {
            steering,
            accel_cmd: accel,
        }
        .clamped(&self.vehicle)
    }
}

/// Drive the plant around the track at a constant speed profile; returns
/// the trajectory sampled every `dt`, starting from rest at the start pose.
pub fn follow_path(
    track: &TrackSpec,
    speed_mps: f64,
    duration: f64,
    dt: f64,
    vehicle: VehicleParams,
) -> Result<Vec<VehicleState>> {
    let params = DriverParams {
        speed_mps,
        ..Default::default()
    };
    let mut follower = PathFollower::new(track, params, vehicle)?;
    if !(duration >= 0.0 && duration.is_finite()) {
        return Err(Error::param("duration", "must be nonnegative"));
    }
    let steps = (duration / dt).round() as usize;
    let mut state = VehicleState::at_rest(track.start_pose);
    let mut out = Vec::with_capacity(steps + 1);
    out.push(state);
    for _ in 0..steps {
        let u = follower.control(&state);
        state = step_dynamics(&state, &u, dt, &vehicle)?;
        out.push(state);
    }
    Ok(out)
}
