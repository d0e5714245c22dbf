//! Synthetic sensor suite: cone observations for the LiDAR and camera
//! modalities, wheel-speed encoders, IMU, ground-speed sensor, and scripted
//! failure injection.
//!
//! Both cone modalities publish the same observation currency: a body-frame
//! position, the covariance the pipeline *reports* (consumers never see the
//! true noise), per-class color probabilities, and the modality tag. The
//! color channel degrades with range; past `color_range` the leftover
//! probability mass is declared unknown rather than spread over colors.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::geom::{Cov2, Rng};
use crate::track::{ConeColor, TrackSpec};
use crate::vehicle::{body_accel, DriveInput, VehicleParams, VehicleState, WHEEL_COUNT};
use crate::{Error, Result};

/// Sensing chain that produced a cone observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Lidar,
    Camera,
}

/// One detected cone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeObservation {
    /// Body-frame position (m): x forward, y left.
    pub pos_body: [f64; 2],
    /// Reported position covariance (body frame).
    pub cov: Cov2,
    /// Probabilities per [blue, yellow, orange, unknown]; sums to one.
    pub color_probs: [f64; 4],
    pub modality: Modality,
    /// Sample time (s).
    pub t: f64,
}

impl ConeObservation {
    pub fn point(&self) -> Vector2<f64> {
        Vector2::new(self.pos_body[0], self.pos_body[1])
    }

    pub fn range(&self) -> f64 {
        self.point().norm()
    }

    /// Most likely color class.
    pub fn argmax_color(&self) -> ConeColor {
        let mut best = 0;
        for i in 1..4 {
            if self.color_probs[i] > self.color_probs[best] {
                best = i;
            }
        }
        ConeColor::from_index(best)
    }

    pub fn validate(&self, max_range: f64) -> Result<()> {
        let sum: f64 = self.color_probs.iter().sum();
        if self.color_probs.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::param("color_probs", format!("sum {sum}")));
        }
        if self.range() > max_range + 1e-9 {
            return Err(Error::param(
                "pos_body",
                format!("range {} beyond max {max_range}", self.range()),
            ));
        }
        Ok(())
    }
}

/// Inertial sample, bias-corrupted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub ax: f64,
    pub ay: f64,
    pub gz: f64,
    pub t: f64,
}

/// Wheel-speed sample, one channel per wheel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WheelSpeeds {
    pub omegas: [f64; WHEEL_COUNT],
    pub t: f64,
}

/// Ground-speed-sensor sample: direct body-frame velocity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GssSample {
    pub vx: f64,
    pub vy: f64,
    pub t: f64,
}

/// Identifier for a failable channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorId {
    #[serde(rename = "wheel_0")]
    Wheel0,
    #[serde(rename = "wheel_1")]
    Wheel1,
    #[serde(rename = "wheel_2")]
    Wheel2,
    #[serde(rename = "wheel_3")]
    Wheel3,
    Imu,
    Gss,
    Lidar,
    Camera,
}

impl SensorId {
    pub const ALL: [SensorId; 8] = [
        SensorId::Wheel0,
        SensorId::Wheel1,
        SensorId::Wheel2,
        SensorId::Wheel3,
        SensorId::Imu,
        SensorId::Gss,
        SensorId::Lidar,
        SensorId::Camera,
    ];

    pub fn wheel(i: usize) -> SensorId {
        match i {
            0 => SensorId::Wheel0,
            1 => SensorId::Wheel1,
            2 => SensorId::Wheel2,
            _ => SensorId::Wheel3,
        }
    }

    pub fn wheel_index(self) -> Option<usize> {
        match self {
            SensorId::Wheel0 => Some(0),
            SensorId::Wheel1 => Some(1),
            SensorId::Wheel2 => Some(2),
            SensorId::Wheel3 => Some(3),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SensorId::Wheel0 => "wheel_0",
            SensorId::Wheel1 => "wheel_1",
            SensorId::Wheel2 => "wheel_2",
            SensorId::Wheel3 => "wheel_3",
            SensorId::Imu => "imu",
            SensorId::Gss => "gss",
            SensorId::Lidar => "lidar",
            SensorId::Camera => "camera",
        }
    }

    pub fn parse(s: &str) -> Result<SensorId> {
        SensorId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::UnknownSensor(s.to_string()))
    }
}

impl std::fmt::Display for SensorId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// LiDAR-modality observation model.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarObsParams {
    /// Detection range (m), 360 degree field of view.
    pub max_range: f64,
    /// Detection probability: clamp(det_p0 - det_slope * r, det_floor, det_ceil).
    pub det_p0: f64,
    pub det_slope: f64,
    pub det_floor: f64,
    pub det_ceil: f64,
    /// Per-axis position noise sigma(r) = sigma0 + sigma_k * r.
    pub sigma0: f64,
    pub sigma_k: f64,
    /// Color curve p(r) = clamp(1 - r / color_range, color_floor, color_ceil);
    /// beyond `color_range` the leftover mass is unknown.
    pub color_range: f64,
    pub color_floor: f64,
    pub color_ceil: f64,
    /// False positives per frame (Poisson rate), uniform in range.
    pub fp_rate: f64,
}

impl Default for LidarObsParams {
    fn default() -> Self {
        LidarObsParams {
            max_range: 12.0,
            det_p0: 0.9,
            det_slope: 0.1,
            det_floor: 0.05,
            det_ceil: 0.85,
            sigma0: 0.03,
            sigma_k: 0.005,
            color_range: 8.0,
            color_floor: 0.34,
            color_ceil: 0.97,
            fp_rate: 0.1,
        }
    }
}

impl LidarObsParams {
    pub fn p_det(&self, r: f64) -> f64 {
        (self.det_p0 - self.det_slope * r).clamp(self.det_floor, self.det_ceil)
    }

    pub fn p_color(&self, r: f64) -> f64 {
        (1.0 - r / self.color_range).clamp(self.color_floor, self.color_ceil)
    }

    pub fn sigma(&self, r: f64) -> f64 {
        self.sigma0 + self.sigma_k * r
    }

    /// All-noise-off variant used by tests and the degenerate examples.
    pub fn noiseless(self) -> Self {
        LidarObsParams {
            det_p0: 1.0,
            det_slope: 0.0,
            det_floor: 1.0,
            det_ceil: 1.0,
            sigma0: 0.0,
            sigma_k: 0.0,
            fp_rate: 0.0,
            ..self
        }
    }
}

/// Camera-modality observation model (stereo-style range noise).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraObsParams {
    pub max_range: f64,
    /// Half field of view (rad), forward-facing.
    pub fov_half: f64,
    pub det_p0: f64,
    pub det_slope: f64,
    pub det_floor: f64,
    pub det_ceil: f64,
    /// Depth noise sigma_d(r) = depth_coeff * r^2 (stereo depth error).
    pub depth_coeff: f64,
    /// Tangential noise sigma_t(r) = tang0 + tang_k * r.
    pub tang0: f64,
    pub tang_k: f64,
    /// Flat color accuracy.
    pub p_color: f64,
    pub fp_rate: f64,
}

impl Default for CameraObsParams {
    fn default() -> Self {
        CameraObsParams {
            max_range: 15.0,
            fov_half: 55f64.to_radians(),
            det_p0: 1.05,
            det_slope: 1.0 / 13.0,
            det_floor: 0.05,
            det_ceil: 0.85,
            depth_coeff: 0.01,
            tang0: 0.02,
            tang_k: 0.002,
            p_color: 0.97,
            fp_rate: 0.0,
        }
    }
}

impl CameraObsParams {
    pub fn p_det(&self, r: f64) -> f64 {
        (self.det_p0 - self.det_slope * r).clamp(self.det_floor, self.det_ceil)
    }

    pub fn sigma_depth(&self, r: f64) -> f64 {
        self.depth_coeff * r * r
    }

    pub fn sigma_tang(&self, r: f64) -> f64 {
        self.tang0 + self.tang_k * r
    }

    pub fn noiseless(self) -> Self {
        CameraObsParams {
            det_p0: 1.0,
            det_slope: 0.0,
            det_floor: 1.0,
            det_ceil: 1.0,
            depth_coeff: 0.0,
            tang0: 0.0,
            tang_k: 0.0,
            fp_rate: 0.0,
            ..self
        }
    }

    /// Reported covariance at body-frame position `p`: depth variance along
    /// the bearing, tangential variance across it.
    pub fn cov_at(&self, p: Vector2<f64>) -> Cov2 {
        let r = p.norm();
        let bearing = p.y.atan2(p.x);
        let (s, c) = bearing.sin_cos();
        let rot = Matrix2::new(c, -s, s, c);
        let d = Matrix2::new(
            self.sigma_depth(r).powi(2),
            0.0,
            0.0,
            self.sigma_tang(r).powi(2),
        );
        let m = rot * d * rot.transpose();
        // Symmetrize the rounding residue before validation.
        let m = (m + m.transpose()) * 0.5;
        Cov2::new(m).expect("rotated diagonal is PSD")
    }
}

/// Wheel-speed encoder noise.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WheelSensorParams {
    /// White noise per channel (rad/s).
    pub sigma: f64,
}

impl Default for WheelSensorParams {
    fn default() -> Self {
        WheelSensorParams { sigma: 0.1 }
    }
}

/// IMU noise and fixed biases (biases are config-known to consumers).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImuSensorParams {
    pub sigma_accel: f64,
    pub sigma_gyro: f64,
    pub bias_ax: f64,
    pub bias_ay: f64,
    pub bias_gz: f64,
}

impl Default for ImuSensorParams {
    fn default() -> Self {
        ImuSensorParams {
            sigma_accel: 0.05,
            sigma_gyro: 0.001,
            bias_ax: 0.05,
            bias_ay: -0.03,
            bias_gz: 0.002,
        }
    }
}

/// Ground-speed sensor noise.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GssSensorParams {
    pub sigma: f64,
}

impl Default for GssSensorParams {
    fn default() -> Self {
        GssSensorParams { sigma: 0.03 }
    }
}

/// Reported color distribution for a cone observed at range `r`.
///
/// The reported class is correct with probability `p`, otherwise one of the
/// other two cone colors uniformly. Within the color range the leftover
/// mass spreads over the two alternatives; beyond it the leftover mass is
/// unknown.
fn sample_color_probs(
    rng: &mut Rng,
    true_color: ConeColor,
    p: f64,
    beyond_color_range: bool,
) -> [f64; 4] {
    let cone_colors = [ConeColor::Blue, ConeColor::Yellow, ConeColor::Orange];
    let alternatives: Vec<ConeColor> = cone_colors
        .into_iter()
        .filter(|c| *c != true_color)
        .collect();
    let reported = if rng.bernoulli(p) {
        true_color
    } else {
        alternatives[rng.index(2)]
    };
    let mut probs = [0.0; 4];
    probs[reported.index()] = p;
    if beyond_color_range {
        probs[ConeColor::Unknown.index()] = 1.0 - p;
    } else {
        for c in cone_colors {
            if c != reported {
                probs[c.index()] += (1.0 - p) / 2.0;
            }
        }
    }
    probs
}

/// LiDAR-modality cone observations for one frame.
pub fn sample_lidar_cones(
    truth: &VehicleState,
    track: &TrackSpec,
    rng: &mut Rng,
    params: &LidarObsParams,
) -> Vec<ConeObservation> {
    let mut out = Vec::new();
    for cone in track.all_cones() {
        let p_body = truth.pose.to_body(cone.point());
        let r = p_body.norm();
        if r > params.max_range || !rng.bernoulli(params.p_det(r)) {
            continue;
        }
        let sigma = params.sigma(r);
        let noisy = p_body + Vector2::new(rng.normal() * sigma, rng.normal() * sigma);
        if noisy.norm() > params.max_range {
            continue;
        }
        let p_col = params.p_color(r);
        let probs = sample_color_probs(rng, cone.color, p_col, r > params.color_range);
        out.push(ConeObservation {
            pos_body: [noisy.x, noisy.y],
            cov: Cov2::diagonal(sigma * sigma, sigma * sigma).expect("diagonal PSD"),
            color_probs: probs,
            modality: Modality::Lidar,
            t: truth.t,
        });
    }
    // False positives, uniform over the sensing disc.
    for _ in 0..rng.poisson(params.fp_rate) {
        let r = params.max_range * rng.uniform().sqrt();
        let b = rng.range(0.0, std::f64::consts::TAU);
        let pos = Vector2::new(r * b.cos(), r * b.sin());
        let sigma = params.sigma(r);
        let ghost = ConeColor::from_index(rng.index(3));
        let probs = sample_color_probs(rng, ghost, params.p_color(r), r > params.color_range);
        out.push(ConeObservation {
            pos_body: [pos.x, pos.y],
            cov: Cov2::diagonal(sigma * sigma, sigma * sigma).expect("diagonal PSD"),
            color_probs: probs,
            modality: Modality::Lidar,
            t: truth.t,
        });
    }
    out
}

/// Camera-modality cone observations for one frame.
pub fn sample_camera_cones(
    truth: &VehicleState,
    track: &TrackSpec,
    rng: &mut Rng,
    params: &CameraObsParams,
) -> Vec<ConeObservation> {
    let mut out = Vec::new();
    for cone in track.all_cones() {
        let p_body = truth.pose.to_body(cone.point());
        let r = p_body.norm();
        let bearing = p_body.y.atan2(p_body.x);
        if r > params.max_range || bearing.abs() > params.fov_half {
            continue;
        }
        if !rng.bernoulli(params.p_det(r)) {
            continue;
        }
        let (s, c) = bearing.sin_cos();
        let radial = Vector2::new(c, s);
        let tangential = Vector2::new(-s, c);
        let noisy = p_body
            + radial * (rng.normal() * params.sigma_depth(r))
            + tangential * (rng.normal() * params.sigma_tang(r));
        if noisy.norm() > params.max_range {
            continue;
        }
        let probs = sample_color_probs(rng, cone.color, params.p_color, false);
        out.push(ConeObservation {
            pos_body: [noisy.x, noisy.y],
            cov: params.cov_at(p_body),
            color_probs: probs,
            modality: Modality::Camera,
            t: truth.t,
        });
    }
    for _ in 0..rng.poisson(params.fp_rate) {
        let r = params.max_range * rng.uniform().sqrt();
        let b = rng.range(-params.fov_half, params.fov_half);
        let pos = Vector2::new(r * b.cos(), r * b.sin());
        let ghost = ConeColor::from_index(rng.index(3));
        let probs = sample_color_probs(rng, ghost, params.p_color, false);
        out.push(ConeObservation {
            pos_body: [pos.x, pos.y],
            cov: params.cov_at(pos),
            color_probs: probs,
            modality: Modality::Camera,
            t: truth.t,
        });
    }
    out
}

/// Noisy wheel-speed sample from the plant's wheel rates.
pub fn sample_wheel_speeds(
    truth: &VehicleState,
    rng: &mut Rng,
    params: &WheelSensorParams,
) -> WheelSpeeds {
    let mut omegas = truth.wheel_omegas;
    for w in omegas.iter_mut() {
        *w += rng.normal() * params.sigma;
    }
    WheelSpeeds { omegas, t: truth.t }
}

/// Noisy, biased IMU sample; the true specific force comes from the plant
/// model at the current input.
pub fn sample_imu(
    truth: &VehicleState,
    input: &DriveInput,
    vehicle: &VehicleParams,
    rng: &mut Rng,
    params: &ImuSensorParams,
) -> ImuSample {
    let (ax, ay) = body_accel(truth, input, vehicle);
    ImuSample {
        ax: ax + params.bias_ax + rng.normal() * params.sigma_accel,
        ay: ay + params.bias_ay + rng.normal() * params.sigma_accel,
        gz: truth.vel.r + params.bias_gz + rng.normal() * params.sigma_gyro,
        t: truth.t,
    }
}

/// Noisy ground-speed sample.
pub fn sample_gss(truth: &VehicleState, rng: &mut Rng, params: &GssSensorParams) -> GssSample {
    GssSample {
        vx: truth.vel.vx + rng.normal() * params.sigma,
        vy: truth.vel.vy + rng.normal() * params.sigma,
        t: truth.t,
    }
}

/// Fault classes the detector must catch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    Stuck,
    Offset,
    Dropout,
    NoiseBurst,
}

/// One scripted fault interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureEvent {
    pub sensor: SensorId,
    pub mode: FailureMode,
    pub t_start: f64,
    pub t_end: f64,
    /// Offset magnitude, or noise multiplier for `NoiseBurst` (>= 1).
    #[serde(default)]
    pub magnitude: f64,
}

impl FailureEvent {
    pub fn active_at(&self, t: f64) -> bool {
        t >= self.t_start && t < self.t_end
    }
}

/// The full fault script for a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FailureScript {
    pub events: Vec<FailureEvent>,
}

impl FailureScript {
    pub fn empty() -> Self {
        FailureScript { events: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        for ev in &self.events {
            if !(ev.t_start.is_finite() && ev.t_end.is_finite() && ev.t_start < ev.t_end) {
                return Err(Error::param(
                    "failure interval",
                    format!("[{}, {}) is not well-ordered", ev.t_start, ev.t_end),
                ));
            }
            if ev.mode == FailureMode::NoiseBurst && ev.magnitude < 1.0 {
                return Err(Error::param(
                    "magnitude",
                    "noise burst multiplier must be >= 1",
                ));
            }
            let frame_channel = matches!(ev.sensor, SensorId::Lidar | SensorId::Camera);
            if frame_channel && matches!(ev.mode, FailureMode::Offset | FailureMode::NoiseBurst) {
                return Err(Error::param(
                    "mode",
                    format!(
                        "{:?} is not defined for frame channel {}",
                        ev.mode,
                        ev.sensor.name()
                    ),
                ));
            }
        }
        // Per-channel intervals must not overlap.
        for id in SensorId::ALL {
            let mut ivs: Vec<(f64, f64)> = self
                .events
                .iter()
                .filter(|e| e.sensor == id)
                .map(|e| (e.t_start, e.t_end))
                .collect();
            ivs.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in ivs.windows(2) {
                if w[1].0 < w[0].1 {
                    return Err(Error::param(
                        "failure intervals",
                        format!("overlapping intervals on {}", id.name()),
                    ));
                }
            }
        }
        Ok(())
    }

    fn active(&self, sensor: SensorId, t: f64) -> Option<&FailureEvent> {
        self.events
            .iter()
            .find(|e| e.sensor == sensor && e.active_at(t))
    }
}

/// A raw sensor event, the unit the fault injector transforms.
#[derive(Clone, Debug, PartialEq)]
pub enum SensorEvent {
    Wheels(WheelSpeeds),
    Imu(ImuSample),
    Gss(GssSample),
    LidarFrame(f64, Vec<ConeObservation>),
    CameraFrame(f64, Vec<ConeObservation>),
}

impl SensorEvent {
    pub fn t(&self) -> f64 {
        match self {
            SensorEvent::Wheels(w) => w.t,
            SensorEvent::Imu(i) => i.t,
            SensorEvent::Gss(g) => g.t,
            SensorEvent::LidarFrame(t, _) => *t,
            SensorEvent::CameraFrame(t, _) => *t,
        }
    }
}

/// Channel noise levels the injector needs for `NoiseBurst`.
#[derive(Clone, Copy, Debug)]
pub struct ChannelNoise {
    pub wheel_sigma: f64,
    pub imu_sigma_accel: f64,
    pub imu_sigma_gyro: f64,
    pub gss_sigma: f64,
}

impl Default for ChannelNoise {
    fn default() -> Self {
        ChannelNoise {
            wheel_sigma: WheelSensorParams::default().sigma,
            imu_sigma_accel: ImuSensorParams::default().sigma_accel,
            imu_sigma_gyro: ImuSensorParams::default().sigma_gyro,
            gss_sigma: GssSensorParams::default().sigma,
        }
    }
}

/// Stateful transformer applying a [`FailureScript`] to a sensor stream.
pub struct FaultInjector {
    script: FailureScript,
    noise: ChannelNoise,
    rng: Rng,
    last_wheels: Option<WheelSpeeds>,
    last_imu: Option<ImuSample>,
    last_gss: Option<GssSample>,
    last_lidar: Option<Vec<ConeObservation>>,
    last_camera: Option<Vec<ConeObservation>>,
}

impl FaultInjector {
    pub fn new(script: FailureScript, noise: ChannelNoise, rng: Rng) -> Result<Self> {
        script.validate()?;
        Ok(FaultInjector {
            script,
            noise,
            rng,
            last_wheels: None,
            last_imu: None,
            last_gss: None,
            last_lidar: None,
            last_camera: None,
        })
    }

    /// Extra white noise raising a channel's sigma to `mult * sigma`.
    fn burst(&mut self, sigma: f64, mult: f64) -> f64 {
        self.rng.normal() * sigma * (mult * mult - 1.0).max(0.0).sqrt()
    }

    /// Transform one event; `None` means the event is dropped.
    pub fn process(&mut self, ev: SensorEvent) -> Option<SensorEvent> {
        let t = ev.t();
        match ev {
            SensorEvent::Wheels(mut w) => {
                let held = self.last_wheels;
                for i in 0..WHEEL_COUNT {
                    if let Some(f) = self.script.active(SensorId::wheel(i), t).copied() {
                        match f.mode {
                            FailureMode::Dropout => return None,
                            FailureMode::Stuck => {
                                if let Some(h) = held {
                                    w.omegas[i] = h.omegas[i];
                                }
                            }
                            FailureMode::Offset => w.omegas[i] += f.magnitude,
                            FailureMode::NoiseBurst => {
                                let extra = self.burst(self.noise.wheel_sigma, f.magnitude);
                                w.omegas[i] += extra;
                            }
                        }
                    }
                }
                // Remember pre-fault values: refresh only non-stuck channels.
                let mut remembered = held.unwrap_or(w);
                for i in 0..WHEEL_COUNT {
                    let stuck = self
                        .script
                        .active(SensorId::wheel(i), t)
                        .map(|f| f.mode == FailureMode::Stuck)
                        .unwrap_or(false);
                    if !stuck {
                        remembered.omegas[i] = w.omegas[i];
                    }
                }
                remembered.t = t;
                self.last_wheels = Some(remembered);
                Some(SensorEvent::Wheels(w))
            }
            SensorEvent::Imu(mut s) => {
                if let Some(f) = self.script.active(SensorId::Imu, t).copied() {
                    match f.mode {
                        FailureMode::Dropout => return None,
                        FailureMode::Stuck => {
                            if let Some(h) = self.last_imu {
                                s = ImuSample { t, ..h };
                            }
                        }
                        FailureMode::Offset => {
                            s.ax += f.magnitude;
                            s.ay += f.magnitude;
                            s.gz += f.magnitude;
                        }
                        FailureMode::NoiseBurst => {
                            let (ba, bg) = (self.noise.imu_sigma_accel, self.noise.imu_sigma_gyro);
                            s.ax += self.burst(ba, f.magnitude);
                            s.ay += self.burst(ba, f.magnitude);
                            s.gz += self.burst(bg, f.magnitude);
                        }
                    }
                } else {
                    self.last_imu = Some(s);
                }
                Some(SensorEvent::Imu(s))
            }
            SensorEvent::Gss(mut s) => {
                if let Some(f) = self.script.active(SensorId::Gss, t).copied() {
                    match f.mode {
                        FailureMode::Dropout => return None,
                        FailureMode::Stuck => {
                            if let Some(h) = self.last_gss {
                                s = GssSample { t, ..h };
                            }
                        }
                        FailureMode::Offset => {
                            s.vx += f.magnitude;
                            s.vy += f.magnitude;
                        }
                        FailureMode::NoiseBurst => {
                            let b = self.noise.gss_sigma;
                            s.vx += self.burst(b, f.magnitude);
                            s.vy += self.burst(b, f.magnitude);
                        }
                    }
                } else {
                    self.last_gss = Some(s);
                }
                Some(SensorEvent::Gss(s))
            }
            SensorEvent::LidarFrame(_, mut obs) => {
                if let Some(f) = self.script.active(SensorId::Lidar, t) {
                    match f.mode {
                        FailureMode::Dropout => return None,
                        FailureMode::Stuck => {
                            if let Some(h) = &self.last_lidar {
                                obs = h.clone();
                                for o in obs.iter_mut() {
                                    o.t = t;
                                }
                            }
                        }
                        _ => unreachable!("rejected by validate"),
                    }
                } else {
                    self.last_lidar = Some(obs.clone());
                }
                Some(SensorEvent::LidarFrame(t, obs))
            }
            SensorEvent::CameraFrame(_, mut obs) => {
                if let Some(f) = self.script.active(SensorId::Camera, t) {
                    match f.mode {
                        FailureMode::Dropout => return None,
                        FailureMode::Stuck => {
                            if let Some(h) = &self.last_camera {
                                obs = h.clone();
                                for o in obs.iter_mut() {
                                    o.t = t;
                                }
                            }
                        }
                        _ => unreachable!("rejected by validate"),
                    }
                } else {
                    self.last_camera = Some(obs.clone());
                }
                Some(SensorEvent::CameraFrame(t, obs))
            }
        }
    }
}

/// Apply a failure script to a recorded stream.
pub fn apply_failures(
    events: Vec<SensorEvent>,
    script: &FailureScript,
    noise: &ChannelNoise,
    seed: u64,
) -> Result<Vec<SensorEvent>> {
    let mut injector = FaultInjector::new(script.clone(), *noise, Rng::from_seed(seed))?;
    Ok(events
        .into_iter()
        .filter_map(|e| injector.process(e))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Pose2D, VelocityState};
    use crate::track::{generate_track, Cone, TrackGenParams};
    use approx::assert_relative_eq;

    fn test_track() -> TrackSpec {
        generate_track(
            &mut Rng::from_seed(2),
            &TrackGenParams {
                irregularity: 0.0,
                mean_radius: 45.0,
                track_width: 3.5,
                cone_spacing: 5.0,
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn state_at(pose: Pose2D) -> VehicleState {
        VehicleState {
            pose,
            vel: VelocityState::default(),
            wheel_omegas: [0.0; 4],
            t: 1.0,
        }
    }

    fn one_cone_track(pos: [f64; 2], color: ConeColor) -> TrackSpec {
        TrackSpec {
            centerline: vec![[0.0, 0.0]; 9],
            left_cones: vec![Cone { pos, color }],
            right_cones: vec![],
            start_pose: Pose2D::identity(),
            track_width: 3.0,
        }
    }

    #[test]
    fn no_cones_in_range_gives_empty_frame() {
        // Center of a 45 m circle: the nearest cone is over 40 m away.
        let track = test_track();
        let state = state_at(Pose2D::identity());
        let lp = LidarObsParams::default().noiseless();
        assert!(sample_lidar_cones(&state, &track, &mut Rng::from_seed(1), &lp).is_empty());
        let cp = CameraObsParams::default().noiseless();
        assert!(sample_camera_cones(&state, &track, &mut Rng::from_seed(1), &cp).is_empty());
    }

    #[test]
    fn zero_noise_positions_match_to_body_oracle() {
        let track = test_track();
        let state = state_at(track.start_pose);
        let lp = LidarObsParams::default().noiseless();
        let obs = sample_lidar_cones(&state, &track, &mut Rng::from_seed(1), &lp);
        assert!(!obs.is_empty());
        for o in &obs {
            let best = track
                .all_cones()
                .map(|c| (state.pose.to_body(c.point()) - o.point()).norm())
                .fold(f64::INFINITY, f64::min)
;
            assert!(best < 1e-12, "offset {best}");
        }
        let cp = CameraObsParams::default().noiseless();
        let cam = sample_camera_cones(&state, &track, &mut Rng::from_seed(1), &cp);
        assert!(!cam.is_empty());
        for o in &cam {
            let best = track
                .all_cones()
                .map(|c| (state.pose.to_body(c.point()) - o.point()).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-12, "offset {best}");
        }
    }

    #[test]
    fn camera_ignores_cone_behind() {
        // One cone straight behind the car.
        let track = one_cone_track([-5.0, 0.0], ConeColor::Blue);
        let state = state_at(Pose2D::identity());
        let cp = CameraObsParams::default().noiseless();
        assert!(sample_camera_cones(&state, &track, &mut Rng::from_seed(1), &cp).is_empty());
        // The LiDAR modality sees all around.
        let lp = LidarObsParams::default().noiseless();
        assert_eq!(
            sample_lidar_cones(&state, &track, &mut Rng::from_seed(1), &lp).len(),
            1
        );
    }

    #[test]
    fn camera_cov_eigenvalues_match_noise_model() {
        // Eigen-decomposition oracle at r = 10 m: sigma_d = 1.0, sigma_t = 0.04.
        let params = CameraObsParams::default();
        let p = Vector2::new(6.0, 8.0);
        let cov = params.cov_at(p);
        let eig = nalgebra::SymmetricEigen::new(*cov.as_matrix());
        let mut vals: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
        vals.sort_by(|a, b| a.total_cmp(b));
        assert_relative_eq!(vals[1], 1.0f64, epsilon = 1e-9);
        assert_relative_eq!(vals[0], 0.04f64 * 0.04, epsilon = 1e-9);
    }

    #[test]
    fn color_accuracy_tracks_curve_at_4m() {
        // Monte-Carlo against p_color(4) = clamp(1 - 4/8, ...) = 0.5.
        let params = LidarObsParams::default().noiseless();
        assert_relative_eq!(params.p_color(4.0), 0.5, epsilon = 1e-12);
        let track = one_cone_track([4.0, 0.0], ConeColor::Blue);
        let state = state_at(Pose2D::identity());
        let mut rng = Rng::from_seed(9);
        let n = 10_000;
        let mut correct = 0;
        for _ in 0..n {
            let obs = sample_lidar_cones(&state, &track, &mut rng, &params);
            assert_eq!(obs.len(), 1);
            if obs[0].argmax_color() == ConeColor::Blue {
                correct += 1;
            }
        }
        let acc = correct as f64 / n as f64;
        assert!((acc - 0.5).abs() < 0.02, "accuracy {acc}");
    }

    #[test]
    fn far_lidar_color_mass_goes_unknown() {
        let params = LidarObsParams::default().noiseless();
        let track = one_cone_track([10.0, 0.0], ConeColor::Blue);
        let state = state_at(Pose2D::identity());
        let obs = sample_lidar_cones(&state, &track, &mut Rng::from_seed(4), &params);
        assert_eq!(obs.len(), 1);
        let probs = obs[0].color_probs;
        assert_relative_eq!(probs[ConeColor::Unknown.index()], 0.66, epsilon = 1e-12);
        assert_eq!(obs[0].argmax_color(), ConeColor::Unknown);
    }

    #[test]
    fn stationary_zero_noise_scalar_sensors() {
        let state = state_at(Pose2D::identity());
        let wp = WheelSensorParams { sigma: 0.0 };
        let ip = ImuSensorParams {
            sigma_accel: 0.0,
            sigma_gyro: 0.0,
            bias_ax: 0.0,
            bias_ay: 0.0,
            bias_gz: 0.0,
        };
        let gp = GssSensorParams { sigma: 0.0 };
        let mut rng = Rng::from_seed(1);
        let w = sample_wheel_speeds(&state, &mut rng, &wp);
        assert_eq!(w.omegas, [0.0; 4]);
        let imu = sample_imu(
            &state,
            &DriveInput::default(),
            &VehicleParams::default(),
            &mut rng,
            &ip,
        );
        assert_eq!((imu.ax, imu.ay, imu.gz), (0.0, 0.0, 0.0));
        let g = sample_gss(&state, &mut rng, &gp);
        assert_eq!((g.vx, g.vy), (0.0, 0.0));
    }

    #[test]
    fn wheel_omegas_match_kinematics_oracle() {
        use crate::vehicle::wheel_omegas_from;
        let p = VehicleParams::default();
        let mk = |vel: VelocityState| VehicleState {
            pose: Pose2D::identity(),
            vel,
            wheel_omegas: wheel_omegas_from(&vel, &DriveInput::default(), &p),
            t: 0.0,
        };
        let quiet = WheelSensorParams { sigma: 0.0 };
        let state = mk(VelocityState {
            vx: 10.0,
            vy: 0.0,
            r: 0.0,
        });
        let w = sample_wheel_speeds(&state, &mut Rng::from_seed(1), &quiet);
        for omega in w.omegas {
            assert_relative_eq!(omega, 43.47826086956522, epsilon = 1e-9);
        }
        // Yaw split: left hub 9.4 m/s, right hub 10.6 m/s.
        let state = mk(VelocityState {
            vx: 10.0,
            vy: 0.0,
            r: 1.0,
        });
        let w = sample_wheel_speeds(&state, &mut Rng::from_seed(1), &quiet);
        assert_relative_eq!(w.omegas[2] * p.r_eff, 9.4, epsilon = 1e-9);
        assert_relative_eq!(w.omegas[3] * p.r_eff, 10.6, epsilon = 1e-9);
    }

    #[test]
    fn noise_calibration_within_10pct() {
        let state = state_at(Pose2D::identity());
        let mut rng = Rng::from_seed(77);
        let n = 10_000;
        let wp = WheelSensorParams::default();
        let mut sum2 = 0.0;
        for _ in 0..n {
            let w = sample_wheel_speeds(&state, &mut rng, &wp);
            sum2 += w.omegas[0] * w.omegas[0];
        }
        let var = sum2 / n as f64;
        assert!(
            (var - wp.sigma * wp.sigma).abs() < 0.1 * wp.sigma * wp.sigma,
            "wheel var {var}"
        );

        let gp = GssSensorParams::default();
        let mut sum2 = 0.0;
        for _ in 0..n {
            let g = sample_gss(&state, &mut rng, &gp);
            sum2 += g.vx * g.vx;
        }
        let var = sum2 / n as f64;
        assert!(
            (var - gp.sigma * gp.sigma).abs() < 0.1 * gp.sigma * gp.sigma,
            "gss var {var}"
        );
    }

    #[test]
    fn deterministic_streams_under_fixed_seed() {
        let track = test_track();
        let state = state_at(track.start_pose);
        let a = sample_lidar_cones(
            &state,
            &track,
            &mut Rng::from_seed(5),
            &LidarObsParams::default(),
        );
        let b = sample_lidar_cones(
            &state,
            &track,
            &mut Rng::from_seed(5),
            &LidarObsParams::default(),
        );
        assert_eq!(a, b);
    }

    #[test]
    fn every_emitted_observation_is_valid() {
        let track = test_track();
        let mut rng = Rng::from_seed(31);
        let lp = LidarObsParams::default();
        let cp = CameraObsParams::default();
        for k in 0..50 {
            let pose = Pose2D::new(
                track.start_pose.x + rng.range(-3.0, 3.0),
                track.start_pose.y + rng.range(-3.0, 3.0),
                rng.range(-3.1, 3.1),
            )
            .unwrap();
            let mut state = state_at(pose);
            state.t = k as f64 * 0.1;
            for o in sample_lidar_cones(&state, &track, &mut rng, &lp) {
                o.validate(lp.max_range).unwrap();
            }
            for o in sample_camera_cones(&state, &track, &mut rng, &cp) {
                o.validate(cp.max_range).unwrap();
            }
        }
    }

    fn wheels_stream(n: usize, base: f64) -> Vec<SensorEvent> {
        (0..n)
            .map(|k| {
                SensorEvent::Wheels(WheelSpeeds {
                    omegas: [base + k as f64 * 0.1; 4],
                    t: k as f64 * 0.01,
                })
            })
            .collect()
    }

    #[test]
    fn empty_script_is_identity() {
        let events = wheels_stream(100, 5.0);
        let out = apply_failures(
            events.clone(),
            &FailureScript::empty(),
            &ChannelNoise::default(),
            1,
        )
        .unwrap();
        assert_eq!(events, out);
    }

    #[test]
    fn stuck_holds_one_channel_only() {
        let events = wheels_stream(1000, 5.0);
        let script = FailureScript {
            events: vec![FailureEvent {
                sensor: SensorId::Wheel0,
                mode: FailureMode::Stuck,
                t_start: 5.0,
                t_end: 7.0,
                magnitude: 0.0,
            }],
        };
        let out = apply_failures(events.clone(), &script, &ChannelNoise::default(), 1).unwrap();
        assert_eq!(out.len(), events.len());
        // Last pre-fault sample is k = 499 (t = 4.99): value 5.0 + 49.9.
        for (raw, got) in events.iter().zip(out.iter()) {
            let (SensorEvent::Wheels(r), SensorEvent::Wheels(g)) = (raw, got) else {
                unreachable!()
            };
            if r.t >= 5.0 && r.t < 7.0 {
                assert_relative_eq!(g.omegas[0], 5.0 + 49.9, epsilon = 1e-9);
                assert_eq!(g.omegas[1], r.omegas[1]);
            } else {
                assert_eq!(g.omegas, r.omegas);
            }
        }
    }

    #[test]
    fn offset_shifts_mean_by_magnitude() {
        let n = 2000;
        let mut rng = Rng::from_seed(3);
        let events: Vec<SensorEvent> = (0..n)
            .map(|k| {
                SensorEvent::Wheels(WheelSpeeds {
                    omegas: [rng.normal() * 0.1; 4],
                    t: k as f64 * 0.01,
                })
            })
            .collect();
        let script = FailureScript {
            events: vec![FailureEvent {
                sensor: SensorId::Wheel2,
                mode: FailureMode::Offset,
                t_start: 0.0,
                t_end: 100.0,
                magnitude: 5.0,
            }],
        };
        let out = apply_failures(events.clone(), &script, &ChannelNoise::default(), 1).unwrap();
        let mut delta = 0.0;
        for (raw, got) in events.iter().zip(out.iter()) {
            let (SensorEvent::Wheels(r), SensorEvent::Wheels(g)) = (raw, got) else {
                unreachable!()
            };
            delta += g.omegas[2] - r.omegas[2];
        }
        assert_relative_eq!(delta / n as f64, 5.0, epsilon = 1e-9);
    }

    #[test]
    fn dropout_deletes_and_burst_scales_variance() {
        let events = wheels_stream(1000, 1.0);
        let script = FailureScript {
            events: vec![FailureEvent {
                sensor: SensorId::Wheel1,
                mode: FailureMode::Dropout,
                t_start: 2.0,
                t_end: 4.0,
                magnitude: 0.0,
            }],
        };
        let out = apply_failures(events, &script, &ChannelNoise::default(), 1).unwrap();
        assert_eq!(out.len(), 1000 - 200);

        // Noise burst: added variance is (mag^2 - 1) sigma^2.
        let n = 20_000;
        let clean: Vec<SensorEvent> = (0..n)
            .map(|k| {
                SensorEvent::Wheels(WheelSpeeds {
                    omegas: [0.0; 4],
                    t: k as f64 * 0.01,
                })
            })
            .collect();
        let script = FailureScript {
            events: vec![FailureEvent {
                sensor: SensorId::Wheel0,
                mode: FailureMode::NoiseBurst,
                t_start: 0.0,
                t_end: 1e9,
                magnitude: 10.0,
            }],
        };
        let noise = ChannelNoise::default();
        let out = apply_failures(clean, &script, &noise, 2).unwrap();
        let mut sum2 = 0.0;
        for e in &out {
            let SensorEvent::Wheels(w) = e else { unreachable!() };
            sum2 += w.omegas[0] * w.omegas[0];
        }
        let var = sum2 / n as f64;
        let want = (10.0f64.powi(2) - 1.0) * noise.wheel_sigma.powi(2);
        assert!((var / want - 1.0).abs() < 0.1, "var {var} want {want}");
    }

    #[test]
    fn script_validation_catches_bad_intervals_and_modes() {
        let bad = FailureScript {
            events: vec![FailureEvent {
                sensor: SensorId::Imu,
                mode: FailureMode::Stuck,
                t_start: 3.0,
                t_end: 2.0,
                magnitude: 0.0,
            }],
        };
        assert!(bad.validate().is_err());
        let bad = FailureScript {
            events: vec![FailureEvent {
                sensor: SensorId::Lidar,
                mode: FailureMode::NoiseBurst,
                t_start: 0.0,
                t_end: 1.0,
                magnitude: 10.0,
            }],
        };
        assert!(bad.validate().is_err());
        assert!(SensorId::parse("wheel_7").is_err());
        assert_eq!(SensorId::parse("wheel_2").unwrap(), SensorId::Wheel2);
    }
}
