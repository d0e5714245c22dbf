//! JSONL event log: one event per line, `{"t": ..., "stream": ..., "payload": {...}}`.
//!
//! Floats round-trip exactly (shortest-representation encoding, exact
//! parsing), which is what makes record/replay bit-identical.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geom::{Cov2, Pose2D, VelocityState};
use crate::sensors::{ConeObservation, GssSample, ImuSample, Modality, WheelSpeeds};
use crate::slam::MapCone;
use crate::vehicle::{DriveInput, WHEEL_COUNT};
use crate::velocity::HealthStatus;
use crate::{Error, Result};

/// One timestamped log event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub t: f64,
    #[serde(flatten)]
    pub payload: Payload,
}

/// Stream-tagged payloads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stream", content = "payload")]
pub enum Payload {
    #[serde(rename = "TRUTH")]
    Truth(TruthRecord),
    #[serde(rename = "LIDAR_OBS")]
    LidarObs(ObsFrame),
    #[serde(rename = "CAM_OBS")]
    CamObs(ObsFrame),
    #[serde(rename = "WHEELS")]
    Wheels(WheelsRecord),
    #[serde(rename = "IMU")]
    Imu(ImuRecord),
    #[serde(rename = "GSS")]
    Gss(GssRecord),
    #[serde(rename = "VEL_EST")]
    VelEst(VelEstRecord),
    #[serde(rename = "HEALTH")]
    Health(HealthRecord),
    #[serde(rename = "SLAM_POSE")]
    SlamPose(SlamPoseRecord),
    #[serde(rename = "MAP")]
    Map(MapRecord),
}

impl Payload {
    pub fn stream_name(&self) -> &'static str {
        match self {
            Payload::Truth(_) => "TRUTH",
            Payload::LidarObs(_) => "LIDAR_OBS",
            Payload::CamObs(_) => "CAM_OBS",
            Payload::Wheels(_) => "WHEELS",
            Payload::Imu(_) => "IMU",
            Payload::Gss(_) => "GSS",
            Payload::VelEst(_) => "VEL_EST",
            Payload::Health(_) => "HEALTH",
            Payload::SlamPose(_) => "SLAM_POSE",
            Payload::Map(_) => "MAP",
        }
    }

    /// Estimator-produced streams (regenerated on replay).
    pub fn is_estimator_output(&self) -> bool {
        matches!(
            self,
            Payload::VelEst(_) | Payload::Health(_) | Payload::SlamPose(_) | Payload::Map(_)
        )
    }
}

pub const STREAM_NAMES: [&str; 10] = [
    "TRUTH",
    "LIDAR_OBS",
    "CAM_OBS",
    "WHEELS",
    "IMU",
    "GSS",
    "VEL_EST",
    "HEALTH",
    "SLAM_POSE",
    "MAP",
];

/// Ground-truth state plus the drive command active at this tick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub pose: Pose2D,
    pub vel: VelocityState,
    pub wheel_omegas: [f64; WHEEL_COUNT],
    pub input: DriveInput,
}

/// One cone observation, timestamp and modality implied by the event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsRecord {
    pub pos: [f64; 2],
    /// Flat covariance [xx, xy, yy].
    pub cov: [f64; 3],
    /// [blue, yellow, orange, unknown].
    pub probs: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsFrame {
    pub cones: Vec<ObsRecord>,
}

impl ObsFrame {
    pub fn from_observations(obs: &[ConeObservation]) -> Self {
        ObsFrame {
            cones: obs
                .iter()
                .map(|o| ObsRecord {
                    pos: o.pos_body,
                    cov: o.cov.to_flat(),
                    probs: o.color_probs,
                })
                .collect(),
        }
    }

    pub fn to_observations(&self, t: f64, modality: Modality) -> Result<Vec<ConeObservation>> {
        self.cones
            .iter()
            .map(|r| {
                Ok(ConeObservation {
                    pos_body: r.pos,
                    cov: Cov2::from_flat(r.cov)?,
                    color_probs: r.probs,
                    modality,
                    t,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WheelsRecord {
    pub omegas: [f64; WHEEL_COUNT],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuRecord {
    pub ax: f64,
    pub ay: f64,
    pub gz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GssRecord {
    pub vx: f64,
    pub vy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelEstRecord {
    pub vx: f64,
    pub vy: f64,
    pub r: f64,
    /// Flat upper triangle [xx, xy, xz, yy, yz, zz].
    pub cov: [f64; 6],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelRecord {
    pub id: String,
    pub status: HealthStatus,
    pub belief: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthRecord {
    pub sensors: Vec<ChannelRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlamPoseRecord {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub ess: f64,
    pub n_particles: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapRecord {
    pub cones: Vec<MapCone>,
    /// True for the lap-closure freeze, false for the end-of-run map.
    pub frozen: bool,
}

impl WheelsRecord {
    pub fn to_sample(&self, t: f64) -> WheelSpeeds {
        WheelSpeeds {
            omegas: self.omegas,
            t,
        }
    }
}

impl ImuRecord {
    pub fn to_sample(&self, t: f64) -> ImuSample {
        ImuSample {
            ax: self.ax,
            ay: self.ay,
            gz: self.gz,
            t,
        }
    }
}

impl GssRecord {
    pub fn to_sample(&self, t: f64) -> GssSample {
        GssSample {
            vx: self.vx,
            vy: self.vy,
            t,
        }
    }
}

/// Serialize events, one JSON object per line.
pub fn to_jsonl(events: &[LogEvent]) -> Result<String> {
    let mut out = String::new();
    for ev in events {
        out.push_str(&serde_json::to_string(ev)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parse a JSONL document and check the log invariants: nonnegative
/// timestamps, time-ordered per stream.
pub fn from_jsonl(text: &str) -> Result<Vec<LogEvent>> {
    let mut events = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ev: LogEvent = serde_json::from_str(line)
            .map_err(|e| Error::Log(format!("line {}: {e}", lineno + 1)))?;
        events.push(ev);
    }
    validate_events(&events)?;
    Ok(events)
}

pub fn validate_events(events: &[LogEvent]) -> Result<()> {
    let mut last: std::collections::HashMap<&'static str, f64> = std::collections::HashMap::new();
    for ev in events {
        if !(ev.t >= 0.0 && ev.t.is_finite()) {
            return Err(Error::Log(format!("bad timestamp {}", ev.t)));
        }
        let name = ev.payload.stream_name();
        if let Some(prev) = last.get(name) {
            if ev.t < *prev {
                return Err(Error::Log(format!(
                    "stream {name} goes backwards: {} after {}",
                    ev.t, prev
                )));
            }
        }
        last.insert(name, ev.t);
    }
    Ok(())
}

pub fn write_jsonl(path: &Path, events: &[LogEvent]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for ev in events {
        serde_json::to_writer(&mut w, ev)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<LogEvent>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut events = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: LogEvent = serde_json::from_str(&line)
            .map_err(|e| Error::Log(format!("line {}: {e}", lineno + 1)))?;
        events.push(ev);
    }
    validate_events(&events)?;
    Ok(events)
}
