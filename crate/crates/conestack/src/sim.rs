//! Deterministic simulation driver and estimator replay.
//!
//! A single-threaded loop in simulated time advances the plant at the base
//! rate, emits each sensor stream at its configured rate through the fault
//! injector, and feeds the estimators in timestamp order. The estimator
//! stack consumes only logged streams, so replaying a recorded log through
//! [`replay_estimators`] reproduces the estimator events of the original
//! run bit for bit (same config, same derived RNG streams).
//!
//! Canonical intra-tick event order: TRUTH, IMU, WHEELS, GSS, LIDAR_OBS,
//! CAM_OBS, then estimator outputs VEL_EST, HEALTH, SLAM_POSE, MAP.

use std::time::Instant;

use crate::config::{LidarSource, ScenarioConfig};
use crate::driver::PathFollower;
use crate::geom::{Pose2D, Rng};
use crate::lidar;
use crate::log::{
    ChannelRecord, GssRecord, HealthRecord, ImuRecord, LogEvent, MapRecord, ObsFrame, Payload,
    SlamPoseRecord, TruthRecord, VelEstRecord, WheelsRecord,
};
use crate::sensors::{
    sample_camera_cones, sample_gss, sample_imu, sample_lidar_cones, sample_wheel_speeds,
    ChannelNoise, FaultInjector, Modality, SensorEvent,
};
use crate::slam::SlamRunner;
use crate::track::{Cone, TrackSpec};
use crate::vehicle::{step_dynamics, VehicleState};
use crate::velocity::VelEstimator;
use crate::{Error, Result};

/// Wall-clock accounting for the estimator code only.
#[derive(Clone, Copy, Debug)]
pub struct RunStats {
    pub sim_duration_s: f64,
    pub estimator_wall_s: f64,
    /// Simulated seconds per wall second spent inside the estimators.
    pub real_time_factor: f64,
    /// Accepted-GSS NIS sample count and mean (filter consistency).
    pub gss_nis_count: usize,
    pub gss_nis_mean: f64,
}

impl RunStats {
    fn new(sim_duration_s: f64, estimator_wall_s: f64, gss_nis: (usize, f64)) -> Self {
        RunStats {
            sim_duration_s,
            estimator_wall_s,
            real_time_factor: if estimator_wall_s > 0.0 {
                sim_duration_s / estimator_wall_s
            } else {
                f64::INFINITY
            },
            gss_nis_count: gss_nis.0,
            gss_nis_mean: gss_nis.1,
        }
    }
}

#[derive(Debug)]
pub struct SimOutput {
    pub events: Vec<LogEvent>,
    pub track: TrackSpec,
    pub stats: RunStats,
}

/// The estimator side of the system: velocity EKF plus SLAM, driven purely
/// by logged streams.
pub struct EstimatorStack {
    vel: Option<VelEstimator>,
    slam: Option<SlamRunner>,
    enable_lidar: bool,
    enable_camera: bool,
    last_steering: f64,
    velest_updated: bool,
    pending: Vec<LogEvent>,
    wall: f64,
}

impl EstimatorStack {
    pub fn new(cfg: &ScenarioConfig, start: Pose2D) -> Self {
        let vel = cfg
            .enable_velest
            .then(|| VelEstimator::new(cfg.velest, cfg.vehicle, 0.0));
        let slam = cfg
            .enable_slam
            .then(|| SlamRunner::new(cfg.slam, start, 0.0, Rng::derive(cfg.seed, 4)));
        EstimatorStack {
            vel,
            slam,
            enable_lidar: cfg.enable_lidar,
            enable_camera: cfg.enable_camera,
            last_steering: 0.0,
            velest_updated: false,
            pending: Vec::new(),
            wall: 0.0,
        }
    }

    pub fn wall_seconds(&self) -> f64 {
        self.wall
    }

    pub fn gss_nis(&self) -> (usize, f64) {
        self.vel.as_ref().map(|v| v.gss_nis_stats()).unwrap_or((0, 0.0))
    }

    pub fn slam(&self) -> Option<&SlamRunner> {
        self.slam.as_ref()
    }

    pub fn velocity(&self) -> Option<&VelEstimator> {
        self.vel.as_ref()
    }

    /// Feed one logged event. Estimator-output streams are ignored, so a
    /// full recorded log can be replayed directly.
    pub fn process(&mut self, ev: &LogEvent) -> Result<()> {
        let t = ev.t;
        match &ev.payload {
            Payload::Truth(rec) => {
                // The steering command is the only thing the estimators
                // take from this stream (the wheel model projects front
                // wheels through it).
                self.last_steering = rec.input.steering;
            }
            Payload::Imu(rec) => {
                if let Some(vel) = self.vel.as_mut() {
                    let start = Instant::now();
                    vel.on_imu(&rec.to_sample(t))?;
                    self.wall += start.elapsed().as_secs_f64();
                }
            }
            Payload::Wheels(rec) => {
                if let Some(vel) = self.vel.as_mut() {
                    let start = Instant::now();
                    vel.on_wheels(&rec.to_sample(t), self.last_steering)?;
                    self.wall += start.elapsed().as_secs_f64();
                    self.velest_updated = true;
                }
            }
            Payload::Gss(rec) => {
                if let Some(vel) = self.vel.as_mut() {
                    let start = Instant::now();
                    vel.on_gss(&rec.to_sample(t))?;
                    self.wall += start.elapsed().as_secs_f64();
                    self.velest_updated = true;
                }
            }
            Payload::LidarObs(frame) => {
                if self.enable_lidar {
                    self.slam_frame(t, frame, Modality::Lidar)?;
                }
            }
            Payload::CamObs(frame) => {
                if self.enable_camera {
                    self.slam_frame(t, frame, Modality::Camera)?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn slam_frame(&mut self, t: f64, frame: &ObsFrame, modality: Modality) -> Result<()> {
        let Some(slam) = self.slam.as_mut() else {
            return Ok(());
        };
        let obs = frame.to_observations(t, modality)?;
        let start = Instant::now();
        if let Some(vel) = self.vel.as_ref() {
            slam.on_velocity(&vel.belief);
        }
        let summary = slam.on_frame(t, &obs)?;
        self.wall += start.elapsed().as_secs_f64();
        self.pending.push(LogEvent {
            t,
            payload: Payload::SlamPose(SlamPoseRecord {
                x: summary.pose.x,
                y: summary.pose.y,
                theta: summary.pose.theta,
                ess: summary.ess,
                n_particles: summary.n_particles,
            }),
        });
        if summary.lap_closed {
            let map = slam.frozen_map().cloned().unwrap_or_default();
            self.pending.push(LogEvent {
                t,
                payload: Payload::Map(MapRecord {
                    cones: map.cones,
                    frozen: true,
                }),
            });
        }
        Ok(())
    }

    /// Emit this tick's estimator events (canonical order).
    pub fn flush(&mut self, t: f64) -> Vec<LogEvent> {
        let mut out = Vec::new();
        if self.velest_updated {
            if let Some(vel) = self.vel.as_ref() {
                out.push(LogEvent {
                    t,
                    payload: Payload::VelEst(VelEstRecord {
                        vx: vel.belief.mean.vx,
                        vy: vel.belief.mean.vy,
                        r: vel.belief.mean.r,
                        cov: vel.belief.cov.to_flat(),
                    }),
                });
                out.push(LogEvent {
                    t,
                    payload: Payload::Health(HealthRecord {
                        sensors: vel
                            .health
                            .channels
                            .iter()
                            .map(|(id, ch)| ChannelRecord {
                                id: id.clone(),
                                status: ch.status,
                                belief: ch.fail_belief,
                            })
                            .collect(),
                    }),
                });
            }
            self.velest_updated = false;
        }
        out.append(&mut self.pending);
        out
    }

    /// End-of-run map event.
    pub fn finalize(&mut self, t: f64) -> Result<Vec<LogEvent>> {
        let mut out = Vec::new();
        if let Some(slam) = self.slam.as_ref() {
            let map = slam.map()?;
            out.push(LogEvent {
                t,
                payload: Payload::Map(MapRecord {
                    cones: map.cones,
                    frozen: false,
                }),
            });
        }
        Ok(out)
    }
}

fn channel_noise(cfg: &ScenarioConfig) -> ChannelNoise {
    ChannelNoise {
        wheel_sigma: cfg.wheel_sensor.sigma,
        imu_sigma_accel: cfg.imu_sensor.sigma_accel,
        imu_sigma_gyro: cfg.imu_sensor.sigma_gyro,
        gss_sigma: cfg.gss_sensor.sigma,
    }
}

/// Run the full closed-loop scenario. Deterministic in the config.
pub fn run_simulation(cfg: &ScenarioConfig) -> Result<SimOutput> {
    cfg.validate()?;
    let mut track_rng = Rng::derive(cfg.seed, 1);
    let track = crate::track::generate_track(&mut track_rng, &cfg.track)?;
    let cones: Vec<Cone> = track.all_cones().cloned().collect();
    let mut follower = PathFollower::new(&track, cfg.driver, cfg.vehicle)?;
    let mut sensor_rng = Rng::derive(cfg.seed, 2);
    let mut injector = FaultInjector::new(
        cfg.failures.clone(),
        channel_noise(cfg),
        Rng::derive(cfg.seed, 3),
    )?;
    let mut pipeline_rng = Rng::derive(cfg.seed, 5);
    let mut stack = EstimatorStack::new(cfg, track.start_pose);

    let dt = cfg.rates.dt();
    let base = cfg.rates.base_hz;
    let steps = (cfg.duration_s / dt).round() as u64;
    let due = |k: u64, hz: u32| k % (base / hz) as u64 == 0;
    let camera_phase_ticks = (cfg.rates.camera_phase_s * base as f64).round() as u64;

    let mut state = VehicleState::at_rest(track.start_pose);
    let mut events: Vec<LogEvent> = Vec::new();

    for k in 0..=steps {
        let t = k as f64 * dt;
        state.t = t;
        let input = follower.control(&state);

        if due(k, cfg.rates.truth_hz) {
            events.push(LogEvent {
                t,
                payload: Payload::Truth(TruthRecord {
                    pose: state.pose,
                    vel: state.vel,
                    wheel_omegas: state.wheel_omegas,
                    input,
                }),
            });
            stack.process(events.last().unwrap())?;
        }

        if k > 0 {
            let mut tick_sensors: Vec<SensorEvent> = Vec::new();
            if due(k, cfg.rates.imu_hz) {
                tick_sensors.push(SensorEvent::Imu(sample_imu(
                    &state,
                    &input,
                    &cfg.vehicle,
                    &mut sensor_rng,
                    &cfg.imu_sensor,
                )));
            }
            if due(k, cfg.rates.wheels_hz) {
                tick_sensors.push(SensorEvent::Wheels(sample_wheel_speeds(
                    &state,
                    &mut sensor_rng,
                    &cfg.wheel_sensor,
                )));
            }
            if due(k, cfg.rates.gss_hz) {
                tick_sensors.push(SensorEvent::Gss(sample_gss(
                    &state,
                    &mut sensor_rng,
                    &cfg.gss_sensor,
                )));
            }
            if cfg.enable_lidar && due(k, cfg.rates.lidar_hz) {
                let obs = match cfg.lidar_source {
                    LidarSource::Model => {
                        sample_lidar_cones(&state, &track, &mut sensor_rng, &cfg.lidar_obs)
                    }
                    LidarSource::Pipeline => lidar::detect_cones(
                        &state,
                        &cones,
                        &mut pipeline_rng,
                        &cfg.lidar_pipeline,
                        &cfg.lidar_obs,
                    )?,
                };
                tick_sensors.push(SensorEvent::LidarFrame(t, obs));
            }
            if cfg.enable_camera
                && k >= camera_phase_ticks
                && due(k - camera_phase_ticks, cfg.rates.camera_hz)
            {
                let obs = sample_camera_cones(&state, &track, &mut sensor_rng, &cfg.camera_obs);
                tick_sensors.push(SensorEvent::CameraFrame(t, obs));
            }

            for raw in tick_sensors {
                let Some(surviving) = injector.process(raw) else {
                    continue;
                };
                let payload = match surviving {
                    SensorEvent::Imu(s) => Payload::Imu(ImuRecord {
                        ax: s.ax,
                        ay: s.ay,
                        gz: s.gz,
                    }),
                    SensorEvent::Wheels(s) => Payload::Wheels(WheelsRecord { omegas: s.omegas }),
                    SensorEvent::Gss(s) => Payload::Gss(GssRecord { vx: s.vx, vy: s.vy }),
                    SensorEvent::LidarFrame(_, obs) => {
                        Payload::LidarObs(ObsFrame::from_observations(&obs))
                    }
                    SensorEvent::CameraFrame(_, obs) => {
                        Payload::CamObs(ObsFrame::from_observations(&obs))
                    }
                };
                events.push(LogEvent { t, payload });
                stack.process(events.last().unwrap())?;
            }
        }

        events.extend(stack.flush(t));

        if k < steps {
            state = step_dynamics(&state, &input, dt, &cfg.vehicle)?;
        }
    }

    let t_end = steps as f64 * dt;
    events.extend(stack.finalize(t_end)?);

    let stats = RunStats::new(cfg.duration_s, stack.wall_seconds(), stack.gss_nis());
    Ok(SimOutput {
        events,
        track,
        stats,
    })
}

/// Re-run the estimators over a recorded log. The output contains the
/// input's non-estimator events plus freshly generated estimator events,
/// interleaved exactly as `run_simulation` would have written them.
pub fn replay_estimators(
    events: &[LogEvent],
    cfg: &ScenarioConfig,
) -> Result<(Vec<LogEvent>, RunStats)> {
    cfg.validate()?;
    let mut track_rng = Rng::derive(cfg.seed, 1);
    let track = crate::track::generate_track(&mut track_rng, &cfg.track)?;
    let mut stack = EstimatorStack::new(cfg, track.start_pose);

    let mut out: Vec<LogEvent> = Vec::new();
    let mut tick_t: Option<f64> = None;
    for ev in events {
        if ev.payload.is_estimator_output() {
            continue;
        }
        if let Some(t_prev) = tick_t {
            if ev.t > t_prev {
                out.extend(stack.flush(t_prev));
            }
        }
        tick_t = Some(ev.t);
        out.push(ev.clone());
        stack.process(ev)?;
    }
    let t_last = tick_t.ok_or_else(|| Error::Log("log contains no input events".into()))?;
    out.extend(stack.flush(t_last));
    let dt = cfg.rates.dt();
    let t_end = (cfg.duration_s / dt).round() * dt;
    out.extend(stack.finalize(t_end)?);

    let stats = RunStats::new(cfg.duration_s, stack.wall_seconds(), stack.gss_nis());
    Ok((out, stats))
}
