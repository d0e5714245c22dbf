//! Rao-Blackwellized particle-filter SLAM over cone landmarks.
//!
//! Particles carry the pose hypothesis; each particle owns its landmark map
//! with an independent 2x2 EKF and per-modality color mass per landmark.
//! The pose proposal is the velocity belief (motion prior only), data
//! association is greedy gated one-to-one per particle, resampling is
//! systematic and triggered by the effective sample size. After lap closure
//! the map freezes and the same machinery runs in localization mode against
//! the frozen map.

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::geom::{psd_sqrt3, wrap_finite, Cov2, Pose2D, Rng};
use crate::sensors::{ConeObservation, Modality};
use crate::track::ConeColor;
use crate::velocity::VelBelief;
use crate::{Error, Result};

/// chi-square 0.99 gate for the 2D association distance.
pub const ASSOC_GATE_D2: f64 = crate::velocity::CHI2_99_2DOF;

/// One cone hypothesis owned by a particle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub mean: [f64; 2],
    /// Flat [xx, xy, yy] position covariance.
    pub cov: [f64; 3],
    /// Accumulated color probability mass per modality
    /// (`[lidar, camera] x [blue, yellow, orange, unknown]`).
    pub color_counts: [[f64; 4]; 2],
    pub n_obs: u32,
    pub last_seen: f64,
}

impl Landmark {
    pub fn point(&self) -> Vector2<f64> {
        Vector2::new(self.mean[0], self.mean[1])
    }

    pub fn cov_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.cov[0], self.cov[1], self.cov[1], self.cov[2])
    }

    fn set_cov(&mut self, m: &Matrix2<f64>) {
        let sym = (m + m.transpose()) * 0.5;
        self.cov = [sym[(0, 0)], sym[(0, 1)], sym[(1, 1)]];
    }

    pub fn cov_trace(&self) -> f64 {
        self.cov[0] + self.cov[2]
    }

    /// Validated covariance (the 2x2 PSD invariant).
    pub fn cov_checked(&self) -> Result<Cov2> {
        Cov2::from_flat(self.cov)
    }
}

/// A pose hypothesis with its owned map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub pose: Pose2D,
    pub log_weight: f64,
    pub landmarks: Vec<Landmark>,
}

/// Association decision for one observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Matched(usize),
    New,
    Clutter,
}

/// Extracted map cone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapCone {
    pub pos: [f64; 2],
    pub color: ConeColor,
    pub confidence: f64,
}

impl MapCone {
    pub fn point(&self) -> Vector2<f64> {
        Vector2::new(self.pos[0], self.pos[1])
    }
}

/// The frozen (or extracted) cone map, anchored at the run's start pose.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlamMap {
    pub cones: Vec<MapCone>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlamParams {
    pub n_particles: usize,
    /// Velocity sampling floor added to the belief covariance diagonal.
    pub q_floor: [f64; 3],
    /// Association gate on the Mahalanobis distance squared (2 dof).
    pub gate_d2: f64,
    /// Unmatched observations farther than this from every landmark become
    /// new landmarks; closer ones are clutter.
    pub new_landmark_dist: f64,
    /// Isotropic position sigma added to association/new-landmark
    /// covariance for the pose-proposal spread (m).
    pub pose_inflation: f64,
    /// Extra isotropic sigma added to the weight likelihood during mapping
    /// (m). Tempering the likelihood keeps the effective sample size high,
    /// which preserves particle ancestry so loop closure can still select
    /// low-drift trajectories.
    pub weight_inflation: f64,
    /// Velocity sampling floor in localization mode (tighter: the map is
    /// fixed, so jitter only hurts).
    pub loc_q_floor: [f64; 3],
    /// Weight-likelihood sigma in localization mode.
    pub loc_weight_inflation: f64,
    pub p_new: f64,
    pub p_clutter: f64,
    /// Resample when ESS < ess_frac * N (strict).
    pub ess_frac: f64,
    /// Landmarks need this many sightings to reach the map.
    pub min_obs: u32,
    /// Map cones closer than this merge.
    pub merge_dist: f64,
    /// Below this color confidence the map cone is unknown.
    pub min_confidence: f64,
    pub weight_lidar: f64,
    pub weight_camera: f64,
    /// Unconfirmed landmarks unseen this long while inside the sensor
    /// footprint are dropped.
    pub prune_age: f64,
    pub prune_range: f64,
}

impl Default for SlamParams {
    fn default() -> Self {
        SlamParams {
            n_particles: 100,
            q_floor: [4.0e-5, 4.0e-5, 4.0e-6],
            gate_d2: ASSOC_GATE_D2,
            new_landmark_dist: 1.5,
            pose_inflation: 0.2,
            weight_inflation: 0.1,
            loc_q_floor: [4.0e-5, 4.0e-5, 4.0e-6],
            loc_weight_inflation: 0.1,
            p_new: 1e-3,
            p_clutter: 1e-4,
            ess_frac: 0.5,
            min_obs: 3,
            merge_dist: 0.5,
            min_confidence: 0.6,
            weight_lidar: 1.0,
            weight_camera: 2.0,
            prune_age: 5.0,
            prune_range: 9.0,
        }
    }
}

pub const MAX_FRAME_DT: f64 = 0.2;

/// Initialize `n` particles at the anchor pose with uniform weights.
pub fn init_particles(n: usize, start: Pose2D) -> Vec<Particle> {
    let lw = -(n as f64).ln();
    (0..n)
        .map(|_| Particle {
            pose: start,
            log_weight: lw,
            landmarks: Vec::new(),
        })
        .collect()
}

/// Motion update: sample a velocity per particle from the belief (plus
/// floor noise) and dead-reckon the pose over `dt`. Weights unchanged.
pub fn predict_particles(
    particles: &mut [Particle],
    vel: &VelBelief,
    dt: f64,
    q_floor: [f64; 3],
    rng: &mut Rng,
) -> Result<()> {
    if !(dt > 0.0 && dt <= MAX_FRAME_DT) {
        return Err(Error::param("dt", format!("{dt} outside (0, {MAX_FRAME_DT}]")));
    }
    let mut cov = *vel.cov.as_matrix();
    for i in 0..3 {
        cov[(i, i)] += q_floor[i];
    }
    let l = psd_sqrt3(&cov);
    let mean = vel.mean.as_vector();
    for p in particles.iter_mut() {
        let z = Vector3::new(rng.normal(), rng.normal(), rng.normal());
        let v = mean + l * z;
        // Midpoint arc integration of the body-frame velocity.
        let theta_mid = p.pose.theta + 0.5 * v.z * dt;
        let (s, c) = theta_mid.sin_cos();
        p.pose = Pose2D {
            x: p.pose.x + (v.x * c - v.y * s) * dt,
            y: p.pose.y + (v.x * s + v.y * c) * dt,
            theta: wrap_finite(p.pose.theta + v.z * dt),
        };
    }
    Ok(())
}

/// Innovation and its covariance for observation `obs` against landmark
/// position `lm` seen from `pose`. Measurement frame is the body frame, so
/// the landmark Jacobian is the rotation by `-theta`.
pub fn innovation(
    pose: &Pose2D,
    lm_mean: Vector2<f64>,
    lm_cov: &Matrix2<f64>,
    obs: &ConeObservation,
    pose_inflation: f64,
) -> (Vector2<f64>, Matrix2<f64>) {
    let h = pose.rotation().transpose();
    let nu = obs.point() - pose.to_body(lm_mean);
    let infl = pose_inflation * pose_inflation;
    let s = h * lm_cov * h.transpose()
        + obs.cov.as_matrix()
        + Matrix2::new(infl, 0.0, 0.0, infl);
    (nu, s)
}

pub fn mahalanobis2(nu: &Vector2<f64>, s: &Matrix2<f64>) -> f64 {
    let det = s[(0, 0)] * s[(1, 1)] - s[(0, 1)] * s[(1, 0)];
    if det <= 0.0 {
        return f64::INFINITY;
    }
    (nu.x * nu.x * s[(1, 1)] - 2.0 * nu.x * nu.y * s[(0, 1)] + nu.y * nu.y * s[(0, 0)]) / det
}

fn log_gaussian2(nu: &Vector2<f64>, s: &Matrix2<f64>) -> f64 {
    let det = (s[(0, 0)] * s[(1, 1)] - s[(0, 1)] * s[(1, 0)]).max(1e-300);
    -0.5 * (mahalanobis2(nu, s) + det.ln() + 2.0 * (2.0 * std::f64::consts::PI).ln())
}

/// Greedy gated one-to-one association of a frame against a particle's map.
pub fn associate(p: &Particle, obs: &[ConeObservation], params: &SlamParams) -> Vec<Decision> {
    associate_points(
        &p.pose,
        obs,
        params,
        p.landmarks.len(),
        |j| (p.landmarks[j].point(), p.landmarks[j].cov_matrix()),
    )
}

/// Association core shared by mapping (landmarks) and localization (map
/// cones with zero covariance).
fn associate_points<F>(
    pose: &Pose2D,
    obs: &[ConeObservation],
    params: &SlamParams,
    n_candidates: usize,
    candidate: F,
) -> Vec<Decision>
where
    F: Fn(usize) -> (Vector2<f64>, Matrix2<f64>),
{
    let mut decisions = vec![Decision::Clutter; obs.len()];
    if obs.is_empty() {
        return decisions;
    }
    // Coarse Euclidean prefilter bound per pair, then exact Mahalanobis.
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    let sqrt_gate = params.gate_d2.sqrt();
    for (i, o) in obs.iter().enumerate() {
        let obs_world = pose.to_world(o.point());
        let sigma_obs = o.cov.as_matrix().trace().sqrt();
        for j in 0..n_candidates {
            let (lm_mean, lm_cov) = candidate(j);
            let reach = sqrt_gate * (sigma_obs + lm_cov.trace().sqrt() + params.pose_inflation)
                + 1e-6;
            if (obs_world - lm_mean).norm() > reach.max(params.new_landmark_dist + 1.0) {
                continue;
            }
            let (nu, s) = innovation(pose, lm_mean, &lm_cov, o, params.pose_inflation);
            let d2 = mahalanobis2(&nu, &s);
            if d2 <= params.gate_d2 {
                pairs.push((d2, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut obs_taken = vec![false; obs.len()];
    let mut lm_taken = vec![false; n_candidates];
    for (_, i, j) in pairs {
        if !obs_taken[i] && !lm_taken[j] {
            obs_taken[i] = true;
            lm_taken[j] = true;
            decisions[i] = Decision::Matched(j);
        }
    }
    // Unmatched: new landmark if clear of everything, else clutter.
    for (i, o) in obs.iter().enumerate() {
        if obs_taken[i] {
            continue;
        }
        let obs_world = pose.to_world(o.point());
        let nearest = (0..n_candidates)
            .map(|j| (candidate(j).0 - obs_world).norm())
            .fold(f64::INFINITY, f64::min);
        decisions[i] = if nearest > params.new_landmark_dist {
            Decision::New
        } else {
            Decision::Clutter
        };
    }
    decisions
}

/// Standard per-landmark EKF update with the body-frame position
/// measurement (Joseph-form covariance).
pub fn update_landmark(lm: &mut Landmark, obs: &ConeObservation, pose: &Pose2D) {
    let h = pose.rotation().transpose();
    let p = lm.cov_matrix();
    let nu = obs.point() - pose.to_body(lm.point());
    let s = h * p * h.transpose() + obs.cov.as_matrix();
    let det = s[(0, 0)] * s[(1, 1)] - s[(0, 1)] * s[(1, 0)];
    if det.abs() < 1e-300 {
        return;
    }
    let s_inv = Matrix2::new(s[(1, 1)], -s[(0, 1)], -s[(1, 0)], s[(0, 0)]) / det;
    let k = p * h.transpose() * s_inv;
    let mean = lm.point() + k * nu;
    lm.mean = [mean.x, mean.y];
    let i_kh = Matrix2::identity() - k * h;
    let p_new = i_kh * p * i_kh.transpose() + k * obs.cov.as_matrix() * k.transpose();
    lm.set_cov(&p_new);
}

fn accumulate_color(lm: &mut Landmark, obs: &ConeObservation) {
    let m = match obs.modality {
        Modality::Lidar => 0,
        Modality::Camera => 1,
    };
    for c in 0..4 {
        lm.color_counts[m][c] += obs.color_probs[c];
    }
}

/// Score a frame against one particle and fuse it into the particle's map.
pub fn weight_and_fuse(
    p: &mut Particle,
    obs: &[ConeObservation],
    decisions: &[Decision],
    params: &SlamParams,
) {
    debug_assert_eq!(obs.len(), decisions.len());
    let infl = params.pose_inflation * params.pose_inflation;
    for (o, d) in obs.iter().zip(decisions.iter()) {
        match *d {
            Decision::Matched(j) => {
                let lm_mean = p.landmarks[j].point();
                let lm_cov = p.landmarks[j].cov_matrix();
                let (nu, s) = innovation(&p.pose, lm_mean, &lm_cov, o, params.weight_inflation);
                p.log_weight += log_gaussian2(&nu, &s);
                update_landmark(&mut p.landmarks[j], o, &p.pose);
                accumulate_color(&mut p.landmarks[j], o);
                p.landmarks[j].n_obs += 1;
                p.landmarks[j].last_seen = o.t;
            }
            Decision::New => {
                p.log_weight += params.p_new.ln();
                let world = p.pose.to_world(o.point());
                let rot = p.pose.rotation();
                let cov_world = rot * obs_cov(o) * rot.transpose()
                    + Matrix2::new(infl, 0.0, 0.0, infl);
                let mut lm = Landmark {
                    mean: [world.x, world.y],
                    cov: [0.0; 3],
                    color_counts: [[0.0; 4]; 2],
                    n_obs: 1,
                    last_seen: o.t,
                };
                lm.set_cov(&cov_world);
                accumulate_color(&mut lm, o);
                p.landmarks.push(lm);
            }
            Decision::Clutter => {
                p.log_weight += params.p_clutter.ln();
            }
        }
    }
}

fn obs_cov(o: &ConeObservation) -> Matrix2<f64> {
    *o.cov.as_matrix()
}

/// Normalize particle weights so `sum(exp(log_weight)) == 1`.
pub fn normalize_weights(particles: &mut [Particle]) {
    let max = particles
        .iter()
        .map(|p| p.log_weight)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = particles.iter().map(|p| (p.log_weight - max).exp()).sum();
    let log_norm = max + sum.ln();
    for p in particles.iter_mut() {
        p.log_weight -= log_norm;
    }
}

/// Effective sample size over normalized weights.
pub fn effective_sample_size(particles: &[Particle]) -> f64 {
    let sum_sq: f64 = particles
        .iter()
        .map(|p| {
            let w = p.log_weight.exp();
            w * w
        })
        .sum();
    if sum_sq > 0.0 {
        1.0 / sum_sq
    } else {
        0.0
    }
}

/// Systematic (low-variance) resampling with a single uniform draw.
/// Copied particles deep-copy their maps; weights reset to 1/N.
pub fn resample_systematic(particles: &mut Vec<Particle>, rng: &mut Rng) {
    let n = particles.len();
    if n == 0 {
        return;
    }
    let weights: Vec<f64> = particles.iter().map(|p| p.log_weight.exp()).collect();
    let mut cum = Vec::with_capacity(n);
    let mut acc = 0.0;
    for w in &weights {
        acc += w;
        cum.push(acc);
    }
    let u0 = rng.uniform() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut j = 0usize;
    for k in 0..n {
        let u = u0 + k as f64 / n as f64;
        while j < n - 1 && cum[j] < u {
            j += 1;
        }
        let mut p = particles[j].clone();
        p.log_weight = -(n as f64).ln();
        out.push(p);
    }
    *particles = out;
}

/// ESS-triggered resampling: resample only when `ESS < ess_frac * N`.
pub fn maybe_resample(particles: &mut Vec<Particle>, params: &SlamParams, rng: &mut Rng) -> bool {
    let ess = effective_sample_size(particles);
    if ess < params.ess_frac * particles.len() as f64 {
        resample_systematic(particles, rng);
        true
    } else {
        false
    }
}

/// Fused color of a landmark under modality weights; `(color, confidence)`.
///
/// Unknown mass is absence of information, not a color vote: it is left
/// out of the denominator so far sightings do not erase close ones.
pub fn fused_color(lm: &Landmark, params: &SlamParams) -> (ConeColor, f64) {
    let mut fused = [0.0f64; 4];
    for c in 0..4 {
        fused[c] = params.weight_lidar * lm.color_counts[0][c]
            + params.weight_camera * lm.color_counts[1][c];
    }
    let total: f64 = fused[..3].iter().sum();
    if total <= 0.0 {
        return (ConeColor::Unknown, 0.0);
    }
    let mut best = 0;
    for c in 1..3 {
        if fused[c] > fused[best] {
            best = c;
        }
    }
    let confidence = fused[best] / total;
    if confidence < params.min_confidence {
        (ConeColor::Unknown, confidence)
    } else {
        (ConeColor::from_index(best), confidence)
    }
}

/// Extract the map of the highest-weight particle: confirmed landmarks
/// only, nearby pairs merged (information-weighted), colors fused across
/// modalities.
pub fn extract_map(particles: &[Particle], params: &SlamParams) -> Result<SlamMap> {
    let best = particles
        .iter()
        .max_by(|a, b| a.log_weight.total_cmp(&b.log_weight))
        .ok_or_else(|| Error::param("particles", "empty particle set"))?;

    let mut survivors: Vec<Landmark> = best
        .landmarks
        .iter()
        .filter(|lm| lm.n_obs >= params.min_obs)
        .cloned()
        .collect();

    // Merge closest pairs below the separation floor.
    loop {
        let mut closest: Option<(f64, usize, usize)> = None;
        for i in 0..survivors.len() {
            for j in (i + 1)..survivors.len() {
                let d = (survivors[i].point() - survivors[j].point()).norm();
                if d < params.merge_dist && closest.map(|c| d < c.0).unwrap_or(true) {
                    closest = Some((d, i, j));
                }
            }
        }
        let Some((_, i, j)) = closest else { break };
        let merged = merge_landmarks(&survivors[i], &survivors[j]);
        survivors[i] = merged;
        survivors.swap_remove(j);
    }

    let cones = survivors
        .iter()
        .map(|lm| {
            let (color, confidence) = fused_color(lm, params);
            MapCone {
                pos: lm.mean,
                color,
                confidence,
            }
        })
        .collect();
    Ok(SlamMap { cones })
}

/// Information-weighted merge of two landmark estimates; counts add.
fn merge_landmarks(a: &Landmark, b: &Landmark) -> Landmark {
    let pa = a.cov_matrix();
    let pb = b.cov_matrix();
    let ia = pa.try_inverse().unwrap_or_else(|| Matrix2::identity() * 1e6);
    let ib = pb.try_inverse().unwrap_or_else(|| Matrix2::identity() * 1e6);
    let info = ia + ib;
    let cov = info.try_inverse().unwrap_or_else(|| Matrix2::identity() * 1e-6);
    let mean = cov * (ia * a.point() + ib * b.point());
    let mut out = a.clone();
    out.mean = [mean.x, mean.y];
    out.set_cov(&cov);
    for m in 0..2 {
        for c in 0..4 {
            out.color_counts[m][c] += b.color_counts[m][c];
        }
    }
    out.n_obs += b.n_obs;
    out.last_seen = a.last_seen.max(b.last_seen);
    out
}

/// Drop unconfirmed landmarks that sat unseen inside the sensor footprint.
pub fn prune_landmarks(p: &mut Particle, t: f64, params: &SlamParams) {
    let pose = p.pose;
    p.landmarks.retain(|lm| {
        let stale = lm.n_obs < params.min_obs && t - lm.last_seen > params.prune_age;
        let in_footprint = (pose.translation() - lm.point()).norm() < params.prune_range;
        !(stale && in_footprint)
    });
}

/// Localization-mode scoring against a frozen map: identical weighting,
/// but landmarks are immutable and unmatched observations are clutter.
pub fn localization_update(
    particles: &mut [Particle],
    obs: &[ConeObservation],
    map: &SlamMap,
    params: &SlamParams,
) {
    let mut loc_params = *params;
    loc_params.pose_inflation = params.loc_weight_inflation;
    for p in particles.iter_mut() {
        let decisions = associate_points(&p.pose, obs, &loc_params, map.cones.len(), |j| {
            (map.cones[j].point(), Matrix2::zeros())
        });
        for (o, d) in obs.iter().zip(decisions.iter()) {
            match *d {
                Decision::Matched(j) => {
                    let (nu, s) = innovation(
                        &p.pose,
                        map.cones[j].point(),
                        &Matrix2::zeros(),
                        o,
                        params.loc_weight_inflation,
                    );
                    p.log_weight += log_gaussian2(&nu, &s);
                }
                // No new landmarks in localization mode.
                Decision::New | Decision::Clutter => {
                    p.log_weight += params.p_clutter.ln();
                }
            }
        }
    }
}

/// Lap-closure detector: fires once each time the pose re-enters a 3 m
/// disc around the start with aligned heading after having left it.
#[derive(Clone, Debug)]
pub struct LapDetector {
    start: Pose2D,
    armed: bool,
    pub laps: usize,
}

pub const LAP_ENTER_RADIUS: f64 = 3.0;
pub const LAP_LEAVE_RADIUS: f64 = 15.0;
pub const LAP_HEADING_TOL: f64 = std::f64::consts::FRAC_PI_4;

impl LapDetector {
    pub fn new(start: Pose2D) -> Self {
        LapDetector {
            start,
            armed: false,
            laps: 0,
        }
    }

    /// Feed the next pose; true exactly when a lap closes.
    pub fn update(&mut self, pose: &Pose2D) -> bool {
        let d = (pose.translation() - self.start.translation()).norm();
        if !self.armed {
            if d > LAP_LEAVE_RADIUS {
                self.armed = true;
            }
            return false;
        }
        let heading_ok = wrap_finite(pose.theta - self.start.theta).abs() < LAP_HEADING_TOL;
        if d < LAP_ENTER_RADIUS && heading_ok {
            self.armed = false;
            self.laps += 1;
            return true;
        }
        false
    }
}

/// True if the time-ordered pose history contains a lap closure.
pub fn detect_lap(history: &[Pose2D], start: &Pose2D) -> bool {
    let mut det = LapDetector::new(*start);
    history.iter().any(|p| det.update(p))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlamMode {
    Mapping,
    Localization,
}

/// Per-frame output of the runner.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FrameSummary {
    pub t: f64,
    pub pose: Pose2D,
    pub ess: f64,
    pub n_particles: usize,
    pub lap_closed: bool,
}

/// Harness-facing SLAM state machine: velocity-driven prediction at
/// observation frames, mapping until lap closure, localization after.
pub struct SlamRunner {
    pub particles: Vec<Particle>,
    params: SlamParams,
    rng: Rng,
    mode: SlamMode,
    frozen: Option<SlamMap>,
    frozen_at: Option<f64>,
    lap: LapDetector,
    last_t: f64,
    latest_vel: Option<VelBelief>,
    vel_at_last_frame: Option<VelBelief>,
}

impl SlamRunner {
    pub fn new(params: SlamParams, start: Pose2D, t0: f64, rng: Rng) -> Self {
        SlamRunner {
            particles: init_particles(params.n_particles, start),
            params,
            rng,
            mode: SlamMode::Mapping,
            frozen: None,
            frozen_at: None,
            lap: LapDetector::new(start),
            last_t: t0,
            latest_vel: None,
            vel_at_last_frame: None,
        }
    }

    pub fn params(&self) -> &SlamParams {
        &self.params
    }

    pub fn mode(&self) -> SlamMode {
        self.mode
    }

    pub fn frozen_map(&self) -> Option<&SlamMap> {
        self.frozen.as_ref()
    }

    pub fn frozen_at(&self) -> Option<f64> {
        self.frozen_at
    }

    pub fn on_velocity(&mut self, belief: &VelBelief) {
        self.latest_vel = Some(*belief);
    }

    /// Weighted-mean pose over particles (circular mean for the heading).
    pub fn pose_estimate(&self) -> Pose2D {
        let mut x = 0.0;
        let mut y = 0.0;
        let mut sc = (0.0, 0.0);
        for p in &self.particles {
            let w = p.log_weight.exp();
            x += w * p.pose.x;
            y += w * p.pose.y;
            sc.0 += w * p.pose.theta.sin();
            sc.1 += w * p.pose.theta.cos();
        }
        Pose2D {
            x,
            y,
            theta: sc.0.atan2(sc.1),
        }
    }

    /// The current map: frozen after lap closure, extracted live before.
    pub fn map(&self) -> Result<SlamMap> {
        match &self.frozen {
            Some(m) => Ok(m.clone()),
            None => extract_map(&self.particles, &self.params),
        }
    }

    /// Process one observation frame (all observations share a timestamp).
    pub fn on_frame(&mut self, t: f64, obs: &[ConeObservation]) -> Result<FrameSummary> {
        let mut dt = t - self.last_t;
        if let Some(latest) = self.latest_vel {
            // Trapezoidal velocity over the gap: integrating with the
            // endpoint belief alone overshoots by a * dt^2 / 2 per frame
            // under acceleration, which bakes a gauge offset into the map.
            let vel = match self.vel_at_last_frame {
                Some(prev) => VelBelief {
                    mean: crate::geom::VelocityState::from_vector(
                        (prev.mean.as_vector() + latest.mean.as_vector()) * 0.5,
                    ),
                    cov: latest.cov,
                    t: latest.t,
                },
                None => latest,
            };
            let q_floor = match self.mode {
                SlamMode::Mapping => self.params.q_floor,
                SlamMode::Localization => self.params.loc_q_floor,
            };
            while dt > 1e-12 {
                let step = dt.min(MAX_FRAME_DT);
                predict_particles(&mut self.particles, &vel, step, q_floor, &mut self.rng)?;
                dt -= step;
            }
            self.vel_at_last_frame = Some(latest);
        }
        self.last_t = t;

        match self.mode {
            SlamMode::Mapping => {
                for p in self.particles.iter_mut() {
                    let decisions = associate(p, obs, &self.params);
                    weight_and_fuse(p, obs, &decisions, &self.params);
                }
            }
            SlamMode::Localization => {
                let map = self.frozen.as_ref().expect("frozen map in localization");
                localization_update(&mut self.particles, obs, map, &self.params);
            }
        }
        normalize_weights(&mut self.particles);
        let ess = effective_sample_size(&self.particles);
        maybe_resample(&mut self.particles, &self.params, &mut self.rng);

        if self.mode == SlamMode::Mapping {
            let t_now = t;
            let params = self.params;
            for p in self.particles.iter_mut() {
                prune_landmarks(p, t_now, &params);
            }
        }

        let pose = self.pose_estimate();
        let mut lap_closed = false;
        if self.mode == SlamMode::Mapping && self.lap.update(&pose) {
            // Freeze the lap-1 map and switch to localization.
            let map = extract_map(&self.particles, &self.params)?;
            self.frozen = Some(map);
            self.frozen_at = Some(t);
            self.mode = SlamMode::Localization;
            lap_closed = true;
        }

        Ok(FrameSummary {
            t,
            pose,
            ess,
            n_particles: self.particles.len(),
            lap_closed,
        })
    }
}
