//! Scenario configuration: one TOML document reproduces any experiment.
//!
//! Every field has a committed default; unknown keys are rejected, and
//! `validate` reports each offending key by name.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::driver::{DriverParams, MAX_SPEED};
use crate::lidar::LidarPipelineParams;
use crate::sensors::{
    CameraObsParams, FailureScript, GssSensorParams, ImuSensorParams, LidarObsParams,
    WheelSensorParams,
};
use crate::slam::SlamParams;
use crate::track::TrackGenParams;
use crate::vehicle::VehicleParams;
use crate::velocity::VelestParams;
use crate::{Error, Result};

/// Where LiDAR cone observations come from: the observation-level error
/// model, or the full point-cloud pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LidarSource {
    Model,
    Pipeline,
}

/// Stream rates (Hz). Every rate must divide the base rate.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateConfig {
    /// Plant and scheduler base rate.
    pub base_hz: u32,
    pub truth_hz: u32,
    pub wheels_hz: u32,
    pub imu_hz: u32,
    pub gss_hz: u32,
    pub lidar_hz: u32,
    pub camera_hz: u32,
    /// Camera phase offset relative to the LiDAR frames (s).
    pub camera_phase_s: f64,
}

impl Default for RateConfig {
    fn default() -> Self {
        RateConfig {
            base_hz: 100,
            truth_hz: 100,
            wheels_hz: 100,
            imu_hz: 100,
            gss_hz: 100,
            lidar_hz: 10,
            camera_hz: 10,
            camera_phase_s: 0.05,
        }
    }
}

impl RateConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.base_hz as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_hz == 0 || self.base_hz > 1000 {
            return Err(Error::InvalidConfig("rates.base_hz outside 1..=1000".into()));
        }
        for (name, hz) in [
            ("rates.truth_hz", self.truth_hz),
            ("rates.wheels_hz", self.wheels_hz),
            ("rates.imu_hz", self.imu_hz),
            ("rates.gss_hz", self.gss_hz),
            ("rates.lidar_hz", self.lidar_hz),
            ("rates.camera_hz", self.camera_hz),
        ] {
            if hz == 0 || self.base_hz % hz != 0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} = {hz} must divide rates.base_hz = {}",
                    self.base_hz
                )));
            }
        }
        let phase_ticks = self.camera_phase_s * self.base_hz as f64;
        if phase_ticks < 0.0 || (phase_ticks - phase_ticks.round()).abs() > 1e-9 {
            return Err(Error::InvalidConfig(
                "rates.camera_phase_s must be a nonnegative multiple of the base period".into(),
            ));
        }
        Ok(())
    }
}

/// The complete scenario: everything needed to reproduce a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration_s: f64,
    pub track: TrackGenParams,
    pub vehicle: VehicleParams,
    pub driver: DriverParams,
    pub rates: RateConfig,
    pub lidar_obs: LidarObsParams,
    pub camera_obs: CameraObsParams,
    pub wheel_sensor: WheelSensorParams,
    pub imu_sensor: ImuSensorParams,
    pub gss_sensor: GssSensorParams,
    pub lidar_pipeline: LidarPipelineParams,
    pub lidar_source: LidarSource,
    pub failures: FailureScript,
    pub velest: VelestParams,
    pub slam: SlamParams,
    pub enable_velest: bool,
    pub enable_slam: bool,
    /// Modality toggles (ablation runs).
    pub enable_lidar: bool,
    pub enable_camera: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 1,
            duration_s: 60.0,
            track: TrackGenParams::default(),
            vehicle: VehicleParams::default(),
            driver: DriverParams::default(),
            rates: RateConfig::default(),
            lidar_obs: LidarObsParams::default(),
            camera_obs: CameraObsParams::default(),
            wheel_sensor: WheelSensorParams::default(),
            imu_sensor: ImuSensorParams::default(),
            gss_sensor: GssSensorParams::default(),
            lidar_pipeline: LidarPipelineParams::default(),
            lidar_source: LidarSource::Model,
            failures: FailureScript::empty(),
            velest: VelestParams::default(),
            slam: SlamParams::default(),
            enable_velest: true,
            enable_slam: true,
            enable_lidar: true,
            enable_camera: true,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s >= 0.0 && self.duration_s.is_finite()) {
            return Err(Error::InvalidConfig("duration_s must be nonnegative".into()));
        }
        self.rates.validate()?;
        self.vehicle.validate()?;
        if !(self.driver.speed_mps > 0.0 && self.driver.speed_mps <= MAX_SPEED) {
            return Err(Error::InvalidConfig(format!(
                "driver.speed_mps = {} outside (0, {MAX_SPEED}]",
                self.driver.speed_mps
            )));
        }
        self.failures.validate()?;
        if self.enable_slam && !self.enable_velest {
            return Err(Error::InvalidConfig(
                "enable_slam requires enable_velest (the pose proposal is the velocity belief)"
                    .into(),
            ));
        }
        if self.slam.n_particles == 0 {
            return Err(Error::InvalidConfig("slam.n_particles must be positive".into()));
        }
        for (name, v) in [
            ("lidar_obs.max_range", self.lidar_obs.max_range),
            ("camera_obs.max_range", self.camera_obs.max_range),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }
}
