//! Procedural closed-loop cone tracks.
//!
//! Centerlines are perturbed circles (radial Fourier series, harmonics 3-6)
//! traversed clockwise so the left boundary is the outer one. Boundaries are
//! normal offsets of the centerline and cones are placed by arc-length
//! resampling; feasibility (offset self-intersection) is checked through the
//! analytic curvature of the radial profile.

use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::geom::{Pose2D, Rng};
use crate::{Error, Result};

/// Cone classes. `Unknown` is only ever produced by estimators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConeColor {
    Blue,
    Yellow,
    Orange,
    Unknown,
}

impl ConeColor {
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        match self {
            ConeColor::Blue => 0,
            ConeColor::Yellow => 1,
            ConeColor::Orange => 2,
            ConeColor::Unknown => 3,
        }
    }

    pub fn from_index(i: usize) -> ConeColor {
        match i {
            0 => ConeColor::Blue,
            1 => ConeColor::Yellow,
            2 => ConeColor::Orange,
            _ => ConeColor::Unknown,
        }
    }
}

/// A ground-truth cone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cone {
    pub pos: [f64; 2],
    pub color: ConeColor,
}

impl Cone {
    pub fn point(&self) -> Vector2<f64> {
        Vector2::new(self.pos[0], self.pos[1])
    }
}

/// Generation parameters for [`generate_track`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackGenParams {
    /// Centerline sample count.
    pub n_waypoints: usize,
    /// Mean centerline radius (m).
    pub mean_radius: f64,
    /// Shape perturbation in `[0, 1]`; 0 is a circle.
    pub irregularity: f64,
    /// Boundary-to-boundary width (m), at least 3.0.
    pub track_width: f64,
    /// Maximum distance between consecutive same-side cones (m), in (0.5, 5].
    pub cone_spacing: f64,
}

impl Default for TrackGenParams {
    fn default() -> Self {
        TrackGenParams {
            n_waypoints: 512,
            mean_radius: 45.0,
            irregularity: 0.35,
            track_width: 3.5,
            cone_spacing: 5.0,
        }
    }
}

pub const MIN_TRACK_WIDTH: f64 = 3.0;
pub const MAX_CONE_SPACING: f64 = 5.0;

/// Ground-truth track: closed centerline, delimiting cones, start pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    /// Closed polyline; the first point is repeated at the end.
    pub centerline: Vec<[f64; 2]>,
    /// Left-boundary cones (blue, with orange start markers).
    pub left_cones: Vec<Cone>,
    /// Right-boundary cones (yellow, with orange start markers).
    pub right_cones: Vec<Cone>,
    pub start_pose: Pose2D,
    pub track_width: f64,
}

impl TrackSpec {
    pub fn all_cones(&self) -> impl Iterator<Item = &Cone> {
        self.left_cones.iter().chain(self.right_cones.iter())
    }

    /// Arc length of the closed centerline.
    pub fn total_length(&self) -> f64 {
        self.centerline
            .windows(2)
            .map(|w| (Vector2::from(w[1]) - Vector2::from(w[0])).norm())
            .sum()
    }

    /// Check every structural invariant of the track.
    pub fn validate(&self) -> Result<()> {
        if self.centerline.len() < 8 {
            return Err(Error::InfeasibleTrack("centerline too short".into()));
        }
        let first = Vector2::from(self.centerline[0]);
        let last = Vector2::from(*self.centerline.last().unwrap());
        if (first - last).norm() > 1e-6 {
            return Err(Error::InfeasibleTrack(format!(
                "centerline not closed: gap {} m",
                (first - last).norm()
            )));
        }
        if self.track_width < MIN_TRACK_WIDTH {
            return Err(Error::InfeasibleTrack(format!(
                "track width {} below minimum {MIN_TRACK_WIDTH}",
                self.track_width
            )));
        }
        if polyline_self_intersects(&self.centerline) {
            return Err(Error::InfeasibleTrack("centerline self-intersects".into()));
        }
        for (side, cones, base) in [
            ("left", &self.left_cones, ConeColor::Blue),
            ("right", &self.right_cones, ConeColor::Yellow),
        ] {
            if cones.len() < 3 {
                return Err(Error::InfeasibleTrack(format!(
                    "{side} side has too few cones"
                )));
            }
            for c in cones.iter() {
                if c.color != base && c.color != ConeColor::Orange {
                    return Err(Error::InfeasibleTrack(format!(
                        "{side} cone has color {:?}",
                        c.color
                    )));
                }
            }
            if !cones.iter().any(|c| c.color == ConeColor::Orange) {
                return Err(Error::InfeasibleTrack(format!(
                    "{side} side has no orange start marker"
                )));
            }
            let n = cones.len();
            for i in 0..n {
                let j = (i + 1) % n;
                let d = (cones[i].point() - cones[j].point()).norm();
                if d > MAX_CONE_SPACING + 1e-9 {
                    return Err(Error::InfeasibleTrack(format!(
                        "{side} cones {i}-{j} are {d:.3} m apart"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let spec: TrackSpec = serde_json::from_reader(std::io::BufReader::new(file))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Radial profile of the centerline: `rho(t) = R (1 + sum c_k cos(k t + psi_k))`.
struct RadialProfile {
    mean_radius: f64,
    terms: Vec<(f64, f64, f64)>, // (c_k, k, psi_k)
}

impl RadialProfile {
    fn rho(&self, t: f64) -> f64 {
        let mut s = 1.0;
        for &(c, k, psi) in &self.terms {
            s += c * (k * t + psi).cos();
        }
        self.mean_radius * s
    }

    fn drho(&self, t: f64) -> f64 {
        let mut s = 0.0;
        for &(c, k, psi) in &self.terms {
            s -= c * k * (k * t + psi).sin();
        }
        self.mean_radius * s
    }

    fn ddrho(&self, t: f64) -> f64 {
        let mut s = 0.0;
        for &(c, k, psi) in &self.terms {
            s -= c * k * k * (k * t + psi).cos();
        }
        self.mean_radius * s
    }

    /// Unsigned curvature of the polar curve at parameter `t`.
    fn curvature(&self, t: f64) -> f64 {
        let r = self.rho(t);
        let dr = self.drho(t);
        let ddr = self.ddrho(t);
        (r * r + 2.0 * dr * dr - r * ddr).abs() / (r * r + dr * dr).powf(1.5)
    }

    /// Clockwise sample point at parameter `t`.
    fn point(&self, t: f64) -> Vector2<f64> {
        let r = self.rho(t);
        Vector2::new(r * t.cos(), -r * t.sin())
    }

    /// Unit tangent along the direction of travel.
    fn tangent(&self, t: f64) -> Vector2<f64> {
        let r = self.rho(t);
        let dr = self.drho(t);
        let (s, c) = t.sin_cos();
        // d/dt of (rho cos t, -rho sin t).
        Vector2::new(dr * c - r * s, -dr * s - r * c).normalize()
    }

    /// Unit normal pointing to the left of the direction of travel.
    fn left_normal(&self, t: f64) -> Vector2<f64> {
        let tan = self.tangent(t);
        Vector2::new(-tan.y, tan.x)
    }
}

/// Generate a closed cone track. Deterministic in `(rng seed, params)`.
pub fn generate_track(rng: &mut Rng, params: &TrackGenParams) -> Result<TrackSpec> {
    if params.track_width < MIN_TRACK_WIDTH {
        return Err(Error::param(
            "track_width",
            format!(
                "{} is below the minimum {MIN_TRACK_WIDTH} m",
                params.track_width
            ),
        ));
    }
    if !(params.cone_spacing > 0.5 && params.cone_spacing <= MAX_CONE_SPACING) {
        return Err(Error::param(
            "cone_spacing",
            format!("{} outside (0.5, {MAX_CONE_SPACING}]", params.cone_spacing),
        ));
    }
    if !(0.0..=1.0).contains(&params.irregularity) {
        return Err(Error::param("irregularity", "outside [0, 1]"));
    }
    if params.n_waypoints < 64 {
        return Err(Error::param("n_waypoints", "fewer than 64"));
    }
    if params.mean_radius <= 0.0 || !params.mean_radius.is_finite() {
        return Err(Error::param("mean_radius", "must be positive"));
    }

    // Harmonics 3-6, amplitudes normalized so the curvature perturbation
    // sum_k |c_k| (1 + k^2) stays at 0.55 * irregularity. That keeps the
    // radius of curvature within roughly [0.6 R, 2.2 R] at irregularity 1.
    let mut raw = Vec::new();
    for k in 3..=6 {
        let amp = rng.range(0.5, 1.0);
        let phase = rng.range(0.0, TAU);
        raw.push((amp, k as f64, phase));
    }
    let weight: f64 = raw.iter().map(|&(a, k, _)| a * (1.0 + k * k)).sum();
    let scale = if weight > 0.0 {
        0.55 * params.irregularity / weight
    } else {
        0.0
    };
    let profile = RadialProfile {
        mean_radius: params.mean_radius,
        terms: raw.iter().map(|&(a, k, p)| (a * scale, k, p)).collect(),
    };

    // Offsetting by w/2 self-intersects where the radius of curvature
    // drops below the offset; require margin beyond that.
    let half_width = params.track_width / 2.0;
    let mut min_curv_radius = f64::INFINITY;
    let mut worst_t = 0.0;
    let check_n = 2048;
    for i in 0..check_n {
        let t = TAU * i as f64 / check_n as f64;
        let rc = 1.0 / profile.curvature(t).max(1e-12);
        if rc < min_curv_radius {
            min_curv_radius = rc;
            worst_t = t;
        }
    }
    if min_curv_radius < half_width + 0.5 {
        return Err(Error::InfeasibleTrack(format!(
            "radius of curvature {min_curv_radius:.2} m at parameter {worst_t:.3} rad \
             cannot take a {half_width:.2} m boundary offset"
        )));
    }

    let n = params.n_waypoints;
    let mut centerline = Vec::with_capacity(n + 1);
    for i in 0..n {
        let t = TAU * i as f64 / n as f64;
        let p = profile.point(t);
        centerline.push([p.x, p.y]);
    }
    centerline.push(centerline[0]);

    // Boundaries sampled finer than the centerline for accurate arc lengths.
    let nb = n * 4;
    let mut left_pts = Vec::with_capacity(nb);
    let mut right_pts = Vec::with_capacity(nb);
    for i in 0..nb {
        let t = TAU * i as f64 / nb as f64;
        let p = profile.point(t);
        let nrm = profile.left_normal(t);
        left_pts.push(p + nrm * half_width);
        right_pts.push(p - nrm * half_width);
    }

    let left_cones = place_cones(&left_pts, params.cone_spacing, ConeColor::Blue);
    let right_cones = place_cones(&right_pts, params.cone_spacing, ConeColor::Yellow);

    let start_dir = profile.tangent(0.0);
    let p0 = profile.point(0.0);
    let start_pose = Pose2D::new(p0.x, p0.y, start_dir.y.atan2(start_dir.x))?;

    let spec = TrackSpec {
        centerline,
        left_cones,
        right_cones,
        start_pose,
        track_width: params.track_width,
    };
    spec.validate()?;
    Ok(spec)
}

/// Arc-length resampling of a closed boundary polyline; the first and last
/// cones (the two nearest the start line) are the orange markers.
fn place_cones(pts: &[Vector2<f64>], spacing: f64, color: ConeColor) -> Vec<Cone> {
    let nb = pts.len();
    let mut cum = Vec::with_capacity(nb + 1);
    cum.push(0.0);
    for i in 0..nb {
        let a = pts[i];
        let b = pts[(i + 1) % nb];
        cum.push(cum[i] + (b - a).norm());
    }
    let total = *cum.last().unwrap();
    let count = (total / spacing).ceil() as usize;
    let step = total / count as f64;

    let mut cones = Vec::with_capacity(count);
    let mut seg = 0usize;
    for j in 0..count {
        let s = j as f64 * step;
        while seg + 1 < cum.len() - 1 && cum[seg + 1] < s {
            seg += 1;
        }
        let span = (cum[seg + 1] - cum[seg]).max(1e-12);
        let frac = (s - cum[seg]) / span;
        let p = pts[seg] + (pts[(seg + 1) % nb] - pts[seg]) * frac;
        let c = if j == 0 || j == count - 1 {
            ConeColor::Orange
        } else {
            color
        };
        cones.push(Cone {
            pos: [p.x, p.y],
            color: c,
        });
    }
    cones
}

fn segments_intersect(
    p1: Vector2<f64>,
    p2: Vector2<f64>,
    q1: Vector2<f64>,
    q2: Vector2<f64>,
) -> bool {
    let d1 = p2 - p1;
    let d2 = q2 - q1;
    let denom = d1.x * d2.y - d1.y * d2.x;
    if denom.abs() < 1e-12 {
        return false;
    }
    let r = q1 - p1;
    let t = (r.x * d2.y - r.y * d2.x) / denom;
    let u = (r.x * d1.y - r.y * d1.x) / denom;
    (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u)
}

/// O(n^2) closed-polyline self-intersection test with adjacency exclusion.
fn polyline_self_intersects(pts: &[[f64; 2]]) -> bool {
    // The polyline is closed with the first point repeated; drop it.
    let n = pts.len() - 1;
    let seg = |i: usize| (Vector2::from(pts[i]), Vector2::from(pts[(i + 1) % n]));
    for i in 0..n {
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue; // adjacent around the loop
            }
            let (a1, a2) = seg(i);
            let (b1, b2) = seg(j);
            if segments_intersect(a1, a2, b1, b2) {
                return true;
            }
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn circle_track_matches_closed_form_cone_count() {
        let params = TrackGenParams {
            irregularity: 0.0,
            mean_radius: 20.0,
            track_width: 3.0,
            cone_spacing: 5.0,
            ..Default::default()
        };
        let spec = generate_track(&mut Rng::from_seed(1), &params).unwrap();
        // Left boundary is the outer ring at R + w/2 = 21.5 m.
        let expected = (TAU * 21.5 / 5.0).ceil() as usize;
        assert_eq!(spec.left_cones.len(), expected);
        for c in &spec.left_cones {
            assert!((c.point().norm() - 21.5).abs() < 1e-3);
        }
        for c in &spec.right_cones {
            assert!((c.point().norm() - 18.5).abs() < 1e-3);
        }
    }

    #[test]
    fn deterministic_in_seed_and_params() {
        let params = TrackGenParams::default();
        let a = generate_track(&mut Rng::from_seed(7), &params).unwrap();
        let b = generate_track(&mut Rng::from_seed(7), &params).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = generate_track(&mut Rng::from_seed(8), &params).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn narrow_width_rejected() {
        let params = TrackGenParams {
            track_width: 1.0,
            ..Default::default()
        };
        assert!(generate_track(&mut Rng::from_seed(1), &params).is_err());
    }

    #[test]
    fn tiny_radius_with_irregularity_rejected() {
        let params = TrackGenParams {
            mean_radius: 2.5,
            irregularity: 1.0,
            ..Default::default()
        };
        let r = generate_track(&mut Rng::from_seed(1), &params);
        assert!(matches!(r, Err(Error::InfeasibleTrack(_))));
    }

    #[test]
    fn start_markers_are_orange_and_sides_colored() {
        let spec = generate_track(&mut Rng::from_seed(3), &TrackGenParams::default()).unwrap();
        assert_eq!(spec.left_cones[0].color, ConeColor::Orange);
        assert_eq!(spec.right_cones[0].color, ConeColor::Orange);
        assert!(spec.left_cones[1..spec.left_cones.len() - 1]
            .iter()
            .all(|c| c.color == ConeColor::Blue));
        assert!(spec.right_cones[1..spec.right_cones.len() - 1]
            .iter()
            .all(|c| c.color == ConeColor::Yellow));
    }

    #[test]
    fn start_pose_heading_is_clockwise_tangent() {
        let params = TrackGenParams {
            irregularity: 0.0,
            ..Default::default()
        };
        let spec = generate_track(&mut Rng::from_seed(3), &params).unwrap();
        // On a circle, clockwise travel at (R, 0) heads in -y.
        assert!((spec.start_pose.theta + PI / 2.0).abs() < 1e-9);
    }

    #[test]
    fn invariants_hold_over_200_random_seeds() {
        for seed in 0..200u64 {
            let params = TrackGenParams {
                mean_radius: 30.0 + (seed % 7) as f64 * 5.0,
                irregularity: (seed % 11) as f64 / 10.0,
                cone_spacing: 2.0 + (seed % 4) as f64,
                ..Default::default()
            };
            let spec = generate_track(&mut Rng::from_seed(seed), &params)
                .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
            spec.validate().unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        }
    }

    #[test]
    fn json_round_trip() {
        let spec = generate_track(&mut Rng::from_seed(5), &TrackGenParams::default()).unwrap();
        let s = serde_json::to_string(&spec).unwrap();
        let back: TrackSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(spec, back);
    }
}
