//! Geometric LiDAR cone pipeline on synthetic point clouds.
//!
//! The stages mirror a real cone-detection stack: ray-cast cloud synthesis
//! (spinning multi-beam sensor over a ground plane with true cone solids),
//! adaptive polar-grid ground removal, Euclidean clustering in the x-y
//! projection, cone-candidate filtering against the expected return count
//! for the sensor geometry, and color classification from the vertical
//! intensity pattern of the cone's paint bands.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::geom::{Cov2, Rng};
use crate::sensors::{ConeObservation, LidarObsParams, Modality};
use crate::track::{Cone, ConeColor};
use crate::vehicle::VehicleState;
use crate::{Error, Result};

/// One return in the sensor frame (x forward, y left, z up from the local
/// ground plane at the sensor footprint).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Reflectivity in [0, 1].
    pub intensity: f64,
}

impl LidarPoint {
    pub fn xy(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn range_xy(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// A density-connected cluster of returns.
#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub indices: Vec<usize>,
    pub centroid: Vector3<f64>,
    /// Axis-aligned extents (x, y, z).
    pub extents: Vector3<f64>,
}

/// A cluster that passed the cone filter.
#[derive(Clone, Debug, PartialEq)]
pub struct ConeCandidate {
    /// Sensor-frame position (m).
    pub pos_sensor: [f64; 2],
    pub n_points: usize,
    /// Mean intensity per vertical band, bottom to top.
    pub intensity_profile: Vec<f64>,
}

/// Sensor geometry, cone geometry and stage thresholds.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarPipelineParams {
    /// Beam count over the vertical field of view.
    pub beams: usize,
    /// Full vertical field of view (rad), centered on the horizon.
    pub vertical_fov: f64,
    /// Horizontal angular resolution (rad).
    pub horizontal_res: f64,
    /// Sensor height above the local ground plane (m).
    pub sensor_height: f64,
    /// Maximum return range (m).
    pub max_range: f64,
    /// Ground reflectivity and noise.
    pub ground_intensity: f64,
    pub range_noise: f64,
    pub intensity_noise: f64,
    /// Cone geometry: base radius, paint-band height, big (orange) height.
    pub cone_base_radius: f64,
    pub cone_height: f64,
    pub big_cone_height: f64,
    /// Ground removal grid: sector count, radial cell size, z margin.
    pub ground_sectors: usize,
    pub ground_cell_radial: f64,
    pub ground_margin: f64,
    /// Minimum points for a cell to estimate its own ground height.
    pub ground_min_cell_points: usize,
    /// Clustering radius (x-y) and minimum cluster size.
    pub cluster_eps: f64,
    pub cluster_min_pts: usize,
    /// Cone filter: accepted band around the expected return count and the
    /// bounding-box slack factor.
    pub count_lo: f64,
    pub count_hi: f64,
    pub extent_factor: f64,
    /// Color classifier: band count, logistic temperature, flatness scale.
    pub color_bands: usize,
    pub color_tau: f64,
    pub color_flat_var: f64,
    pub color_p_orange: f64,
}

impl Default for LidarPipelineParams {
    fn default() -> Self {
        LidarPipelineParams {
            beams: 32,
            vertical_fov: 30f64.to_radians(),
            horizontal_res: 0.2f64.to_radians(),
            sensor_height: 0.5,
            max_range: 12.0,
            ground_intensity: 0.3,
            range_noise: 0.01,
            intensity_noise: 0.05,
            cone_base_radius: 0.115,
            cone_height: 0.31,
            big_cone_height: 0.45,
            ground_sectors: 128,
            ground_cell_radial: 0.5,
            ground_margin: 0.032,
            ground_min_cell_points: 5,
            cluster_eps: 0.3,
            cluster_min_pts: 3,
            count_lo: 0.3,
            count_hi: 3.0,
            extent_factor: 1.5,
            color_bands: 6,
            color_tau: 0.05,
            color_flat_var: 0.015,
            color_p_orange: 0.8,
        }
    }
}

impl LidarPipelineParams {
    /// Vertical spacing between adjacent beams (rad).
    pub fn beam_spacing(&self) -> f64 {
        self.vertical_fov / (self.beams.max(2) - 1) as f64
    }

    pub fn noiseless(self) -> Self {
        LidarPipelineParams {
            range_noise: 0.0,
            intensity_noise: 0.0,
            ..self
        }
    }

    /// Closed-form expected return count for a cone at distance `d`: half
    /// of the angular-extent product of the cone silhouette over the beam
    /// grid (half because the silhouette is a triangle).
    pub fn expected_points(&self, d: f64) -> f64 {
        let d = d.max(0.5);
        let vertical = self.cone_height / (2.0 * d * (self.beam_spacing() / 2.0).tan());
        let horizontal =
            (2.0 * self.cone_base_radius) / (2.0 * d * (self.horizontal_res / 2.0).tan());
        0.5 * vertical * horizontal
    }

    fn cone_height_of(&self, color: ConeColor) -> f64 {
        if color == ConeColor::Orange {
            self.big_cone_height
        } else {
            self.cone_height
        }
    }

    /// Paint-band reflectivity at normalized height `frac` on the cone.
    fn paint_intensity(&self, color: ConeColor, frac: f64) -> f64 {
        let band = (frac * 3.0).clamp(0.0, 2.999) as usize;
        match color {
            ConeColor::Blue => [0.2, 0.8, 0.2][band],
            ConeColor::Yellow => [0.8, 0.2, 0.8][band],
            _ => 0.6,
        }
    }
}

/// Cloud plus per-point provenance: `Some(cone index)` or `None` (ground).
pub struct LabeledCloud {
    pub points: Vec<LidarPoint>,
    pub labels: Vec<Option<usize>>,
}

/// Ray-cast a full revolution against a (possibly pitched) ground plane and
/// the cone solids. Deterministic for a fixed seed.
pub fn synth_pointcloud_labeled(
    truth: &VehicleState,
    cones: &[Cone],
    rng: &mut Rng,
    params: &LidarPipelineParams,
    ground_pitch: f64,
) -> LabeledCloud {
    let n_az = (std::f64::consts::TAU / params.horizontal_res).round() as usize;
    let spacing = params.beam_spacing();
    let h_s = params.sensor_height;
    let slope = ground_pitch.tan();

    let elevations: Vec<f64> = (0..params.beams)
        .map(|i| -params.vertical_fov / 2.0 + i as f64 * spacing)
        .collect();

    // Nearest hit per (beam, azimuth): (range, cone index or ground).
    let mut hits: Vec<Option<(f64, Option<usize>)>> = vec![None; params.beams * n_az];

    // Ground plane z = slope * x, sensor origin at (0, 0, h_s).
    for (bi, &e) in elevations.iter().enumerate() {
        let (se, ce) = e.sin_cos();
        for ai in 0..n_az {
            let az = ai as f64 * params.horizontal_res;
            let ca = az.cos();
            let dx = ce * ca;
            let dz = se;
            let denom = dz - dx * slope;
            if denom >= -1e-12 {
                continue; // ray never descends onto the plane
            }
            let t = -h_s / denom;
            if t > 0.1 && t <= params.max_range {
                hits[bi * n_az + ai] = Some((t, None));
            }
        }
    }

    // Cone solids: vertical cones standing on the local ground.
    for (ci, cone) in cones.iter().enumerate() {
        let base = truth.pose.to_body(cone.point());
        let dist = base.norm();
        if dist < 0.3 || dist > params.max_range + 1.0 {
            continue;
        }
        let h = params.cone_height_of(cone.color);
        let rb = params.cone_base_radius;
        let base_z = base.x * slope; // cone stands on the pitched plane
        let az_center = base.y.atan2(base.x);
        let az_half = ((rb * 1.5) / dist).asin().min(0.5);
        let ai_lo = ((az_center - az_half) / params.horizontal_res).floor() as i64;
        let ai_hi = ((az_center + az_half) / params.horizontal_res).ceil() as i64;
        let u = rb / h;
        for (bi, &e) in elevations.iter().enumerate() {
            let (se, ce) = e.sin_cos();
            for raw_ai in ai_lo..=ai_hi {
                let ai = raw_ai.rem_euclid(n_az as i64) as usize;
                let az = raw_ai as f64 * params.horizontal_res;
                let (sa, ca) = az.sin_cos();
                let d = Vector3::new(ce * ca, ce * sa, se);
                // Shift so the cone base sits at the origin.
                let o = Vector3::new(-base.x, -base.y, h_s - base_z);
                let q0 = rb - u * o.z;
                let q1 = -u * d.z;
                let a = d.x * d.x + d.y * d.y - q1 * q1;
                let b = 2.0 * (o.x * d.x + o.y * d.y) - 2.0 * q0 * q1;
                let c = o.x * o.x + o.y * o.y - q0 * q0;
                let disc = b * b - 4.0 * a * c;
                if disc <= 0.0 || a.abs() < 1e-12 {
                    continue;
                }
                let sq = disc.sqrt();
                for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                    if !(t > 0.1 && t <= params.max_range) {
                        continue;
                    }
                    let z_local = o.z + t * d.z;
                    if !(0.0..=h).contains(&z_local) {
                        continue;
                    }
                    let slot = &mut hits[bi * n_az + ai];
                    if slot.map(|(prev, _)| t < prev).unwrap_or(true) {
                        *slot = Some((t, Some(ci)));
                    }
                    break; // nearer root first
                }
            }
        }
    }

    // Emit points in fixed (beam, azimuth) order with noise.
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (bi, &e) in elevations.iter().enumerate() {
        let (se, ce) = e.sin_cos();
        for ai in 0..n_az {
            let Some((t, label)) = hits[bi * n_az + ai] else {
                continue;
            };
            let t = t + rng.normal() * params.range_noise;
            let az = ai as f64 * params.horizontal_res;
            let (sa, ca) = az.sin_cos();
            let p = Vector3::new(t * ce * ca, t * ce * sa, h_s + t * se);
            let raw_intensity = match label {
                None => params.ground_intensity,
                Some(ci) => {
                    let cone = &cones[ci];
                    let base = truth.pose.to_body(cone.point());
                    let base_z = base.x * slope;
                    let h = params.cone_height_of(cone.color);
                    let frac = ((p.z - base_z) / h).clamp(0.0, 1.0);
                    params.paint_intensity(cone.color, frac)
                }
            };
            let intensity =
                (raw_intensity + rng.normal() * params.intensity_noise).clamp(0.0, 1.0);
            // z datum: the flat ground plane at the sensor footprint is z = 0.
            points.push(LidarPoint {
                x: p.x,
                y: p.y,
                z: p.z,
                intensity,
            });
            labels.push(label);
        }
    }
    LabeledCloud { points, labels }
}

/// Plain cloud synthesis on flat ground.
pub fn synth_pointcloud(
    truth: &VehicleState,
    cones: &[Cone],
    rng: &mut Rng,
    params: &LidarPipelineParams,
) -> Vec<LidarPoint> {
    synth_pointcloud_labeled(truth, cones, rng, params, 0.0).points
}

/// Indices of points that survive adaptive ground removal.
pub fn remove_ground_indices(cloud: &[LidarPoint], params: &LidarPipelineParams) -> Vec<usize> {
    if cloud.is_empty() {
        return Vec::new();
    }
    let sectors = params.ground_sectors.max(1);
    let rings = (params.max_range / params.ground_cell_radial).ceil() as usize + 2;
    let cell_of = |p: &LidarPoint| {
        let sector = ((p.y.atan2(p.x) + std::f64::consts::PI)
            / (std::f64::consts::TAU / sectors as f64)) as usize
            % sectors;
        let ring = ((p.range_xy() / params.ground_cell_radial) as usize).min(rings - 1);
        sector * rings + ring
    };

    let mut cells: Vec<Vec<f64>> = vec![Vec::new(); sectors * rings];
    for p in cloud {
        cells[cell_of(p)].push(p.z);
    }

    // Own estimate: p5 z-quantile of sufficiently populated cells.
    let mut own: Vec<Option<f64>> = vec![None; sectors * rings];
    for (i, zs) in cells.iter_mut().enumerate() {
        if zs.len() >= params.ground_min_cell_points {
            zs.sort_by(|a, b| a.total_cmp(b));
            let idx = ((zs.len() - 1) as f64 * 0.05).floor() as usize;
            own[i] = Some(zs[idx]);
        }
    }
    let mut all_z: Vec<f64> = cloud.iter().map(|p| p.z).collect();
    all_z.sort_by(|a, b| a.total_cmp(b));
    let global = all_z[((all_z.len() - 1) as f64 * 0.05).floor() as usize];

    // Smooth across the 8-neighborhood, weighting the cell's own estimate.
    let smoothed = |sector: usize, ring: usize| -> f64 {
        let mut sum = 0.0;
        let mut weight = 0.0;
        for ds in -1i64..=1 {
            for dr in -1i64..=1 {
                let s = (sector as i64 + ds).rem_euclid(sectors as i64) as usize;
                let r = ring as i64 + dr;
                if r < 0 || r >= rings as i64 {
                    continue;
                }
                if let Some(est) = own[s * rings + r as usize] {
                    let w = if ds == 0 && dr == 0 { 3.0 } else { 1.0 };
                    sum += w * est;
                    weight += w;
                }
            }
        }
        if weight > 0.0 {
            sum / weight
        } else {
            global
        }
    };

    let mut keep = Vec::new();
    for (i, p) in cloud.iter().enumerate() {
        let cell = cell_of(p);
        let sector = cell / rings;
        let ring = cell % rings;
        let ground = smoothed(sector, ring);
        if p.z >= ground + params.ground_margin {
            keep.push(i);
        }
    }
    keep
}

/// Adaptive ground removal; an empty cloud yields an empty cloud.
pub fn remove_ground(cloud: &[LidarPoint], params: &LidarPipelineParams) -> Vec<LidarPoint> {
    remove_ground_indices(cloud, params)
        .into_iter()
        .map(|i| cloud[i])
        .collect()
}

/// Euclidean clustering: density-connected components of radius `eps` in
/// the x-y projection; clusters below `min_pts` are discarded.
pub fn cluster(cloud: &[LidarPoint], eps: f64, min_pts: usize) -> Vec<Cluster> {
    if cloud.is_empty() || eps <= 0.0 {
        return Vec::new();
    }
    // Uniform grid of cell size eps for neighbor lookups.
    let cell = |p: &LidarPoint| ((p.x / eps).floor() as i64, (p.y / eps).floor() as i64);
    let mut grid: std::collections::HashMap<(i64, i64), Vec<usize>> =
        std::collections::HashMap::new();
    for (i, p) in cloud.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let eps2 = eps * eps;
    let mut visited = vec![false; cloud.len()];
    let mut clusters = Vec::new();
    for seed in 0..cloud.len() {
        if visited[seed] {
            continue;
        }
        visited[seed] = true;
        let mut members = vec![seed];
        let mut frontier = vec![seed];
        while let Some(i) = frontier.pop() {
            let (cx, cy) = cell(&cloud[i]);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let Some(bucket) = grid.get(&(cx + dx, cy + dy)) else {
                        continue;
                    };
                    for &j in bucket {
                        if visited[j] {
                            continue;
                        }
                        let d2 = (cloud[i].x - cloud[j].x).powi(2)
                            + (cloud[i].y - cloud[j].y).powi(2);
                        if d2 <= eps2 {
                            visited[j] = true;
                            members.push(j);
                            frontier.push(j);
                        }
                    }
                }
            }
        }
        if members.len() < min_pts {
            continue;
        }
        let mut lo = Vector3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = -lo;
        let mut sum = Vector3::zeros();
        for &i in &members {
            let p = Vector3::new(cloud[i].x, cloud[i].y, cloud[i].z);
            sum += p;
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
        clusters.push(Cluster {
            centroid: sum / members.len() as f64,
            extents: hi - lo,
            indices: members,
        });
    }
    clusters
}

/// Keep clusters whose return count and extents are consistent with a cone
/// at the cluster's distance, and compute their vertical intensity profile.
pub fn filter_cones(
    cloud: &[LidarPoint],
    clusters: &[Cluster],
    params: &LidarPipelineParams,
) -> Vec<ConeCandidate> {
    let mut out = Vec::new();
    for cl in clusters {
        let d = cl.centroid.xy().norm();
        let expected = params.expected_points(d);
        let n = cl.indices.len() as f64;
        if n < params.count_lo * expected || n > params.count_hi * expected {
            continue;
        }
        let max_xy = 2.0 * params.cone_base_radius * params.extent_factor;
        let max_z = params.cone_height * params.extent_factor;
        if cl.extents.x > max_xy || cl.extents.y > max_xy || cl.extents.z > max_z {
            continue;
        }
        out.push(ConeCandidate {
            pos_sensor: [cl.centroid.x, cl.centroid.y],
            n_points: cl.indices.len(),
            intensity_profile: intensity_profile(cloud, &cl.indices, params),
        });
    }
    out
}

/// Mean intensity per vertical band over `[0, cone_height]`, bottom to top;
/// empty bands are filled by linear interpolation from their neighbors.
///
/// Bands are anchored at the ground datum (z = 0): cones stand on the
/// ground plane, and anchoring at the lowest return instead would shift
/// the band frame whenever the beam fan or the ground margin clips the
/// cone bottom, inverting the measured paint contrast.
fn intensity_profile(
    cloud: &[LidarPoint],
    members: &[usize],
    params: &LidarPipelineParams,
) -> Vec<f64> {
    let k = params.color_bands.max(3);
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for &i in members {
        let frac = (cloud[i].z / params.cone_height).clamp(0.0, 0.999_999);
        let band = (frac * k as f64) as usize;
        sums[band] += cloud[i].intensity;
        counts[band] += 1;
    }
    let mut bands: Vec<Option<f64>> = (0..k)
        .map(|b| (counts[b] > 0).then(|| sums[b] / counts[b] as f64))
        .collect();
    // Fill gaps: linear interpolation between the nearest filled bands,
    // constant extension at the ends.
    let filled: Vec<usize> = (0..k).filter(|&b| bands[b].is_some()).collect();
    if filled.is_empty() {
        return vec![0.0; k];
    }
    for b in 0..k {
        if bands[b].is_some() {
            continue;
        }
        let below = filled.iter().rev().find(|&&f| f < b);
        let above = filled.iter().find(|&&f| f > b);
        bands[b] = Some(match (below, above) {
            (Some(&lo), Some(&hi)) => {
                let w = (b - lo) as f64 / (hi - lo) as f64;
                bands[lo].unwrap() * (1.0 - w) + bands[hi].unwrap() * w
            }
            (Some(&lo), None) => bands[lo].unwrap(),
            (None, Some(&hi)) => bands[hi].unwrap(),
            (None, None) => 0.0,
        });
    }
    bands.into_iter().map(|b| b.unwrap()).collect()
}

/// Color probabilities `[blue, yellow, orange, unknown]` from the vertical
/// band profile: the paint stripe makes the middle third brighter (blue) or
/// darker (yellow) than the outer thirds, while orange cones are flat.
pub fn classify_color(
    profile: &[f64],
    n_points: usize,
    params: &LidarPipelineParams,
) -> Result<[f64; 4]> {
    let k = profile.len();
    if k < 3 {
        return Err(Error::param("profile", "needs at least 3 bands"));
    }
    for v in profile {
        if !(0.0..=1.0).contains(v) {
            return Err(Error::param("profile", format!("band value {v} outside [0, 1]")));
        }
    }
    if n_points < 2 * k {
        let third = 1.0 / 3.0;
        return Ok([third, third, third, 0.0]);
    }
    let lo = k / 3;
    let hi = k - k / 3;
    let middle: f64 = profile[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
    let outer_count = k - (hi - lo);
    let outer: f64 = (profile[..lo].iter().sum::<f64>() + profile[hi..].iter().sum::<f64>())
        / outer_count as f64;
    let m = middle - outer;
    let s = 1.0 / (1.0 + (-m / params.color_tau).exp());

    let mean = profile.iter().sum::<f64>() / k as f64;
    let var = profile.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
    let p_orange = params.color_p_orange * (-(var / params.color_flat_var).powi(2)).exp();

    Ok([
        s * (1.0 - p_orange),
        (1.0 - s) * (1.0 - p_orange),
        p_orange,
        0.0,
    ])
}

/// Full pipeline: cloud -> ground removal -> clustering -> cone filter ->
/// color classification -> observations with the reported range-dependent
/// covariance of the LiDAR observation model.
pub fn detect_cones(
    truth: &VehicleState,
    cones: &[Cone],
    rng: &mut Rng,
    params: &LidarPipelineParams,
    obs_model: &LidarObsParams,
) -> Result<Vec<ConeObservation>> {
    let cloud = synth_pointcloud(truth, cones, rng, params);
    let above = remove_ground(&cloud, params);
    let clusters = cluster(&above, params.cluster_eps, params.cluster_min_pts);
    let candidates = filter_cones(&above, &clusters, params);
    let mut out = Vec::with_capacity(candidates.len());
    for cand in &candidates {
        let probs = classify_color(&cand.intensity_profile, cand.n_points, params)?;
        let r = Vector2::from(cand.pos_sensor).norm();
        let sigma = obs_model.sigma(r);
        out.push(ConeObservation {
            pos_body: cand.pos_sensor,
            cov: Cov2::diagonal(sigma * sigma, sigma * sigma).expect("diagonal PSD"),
            color_probs: probs,
            modality: Modality::Lidar,
            t: truth.t,
        });
    }
    Ok(out)
}

/// A randomly furnished evaluation scene: labeled cones scattered around
/// the sensor with bearing separation so cones never occlude each other.
pub fn random_scene(rng: &mut Rng, n_cones: usize, r_max: f64) -> Vec<Cone> {
    let colors = [ConeColor::Blue, ConeColor::Yellow, ConeColor::Orange];
    let mut cones: Vec<Cone> = Vec::new();
    let mut bearings: Vec<f64> = Vec::new();
    let mut guard = 0;
    while cones.len() < n_cones && guard < 1000 {
        guard += 1;
        let r = rng.range(1.5, r_max);
        let b = rng.range(0.0, std::f64::consts::TAU);
        if bearings.iter().any(|x| {
            let d = (x - b + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU)
                - std::f64::consts::PI;
            d.abs() < 0.12
        }) {
            continue;
        }
        bearings.push(b);
        cones.push(Cone {
            pos: [r * b.cos(), r * b.sin()],
            color: colors[rng.index(3)],
        });
    }
    cones
}
