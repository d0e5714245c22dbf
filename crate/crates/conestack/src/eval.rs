//! Evaluation: map quality against the ground-truth track, trajectory and
//! velocity errors against the logged truth, failure-detection latency,
//! and CSV export of reports and raw streams.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::assign::assign_with_gate;
use crate::log::{LogEvent, Payload};
use crate::sensors::FailureScript;
use crate::sim::RunStats;
use crate::slam::MapCone;
use crate::track::{ConeColor, TrackSpec};
use crate::velocity::HealthStatus;
use crate::{Error, Result};

/// Matching gate for estimated-to-true cone assignment: half the minimum
/// track width.
pub const MAP_MATCH_GATE: f64 = 1.5;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MapMetrics {
    pub matched: usize,
    pub missed: usize,
    pub false_cones: usize,
    pub position_rmse: f64,
    /// Fraction of matched cones whose map color equals the true color
    /// (unknown counts as wrong).
    pub color_accuracy: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub ate_rmse: f64,
    pub max_err: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VelocityMetrics {
    pub vx_rmse: f64,
    pub vy_rmse: f64,
    pub r_rmse: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FaultLatency {
    pub sensor: String,
    pub t_start: f64,
    /// None when the fault was never declared FAILED.
    pub latency_s: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FailureMetrics {
    pub detection_latency: Vec<FaultLatency>,
    pub false_alarms_per_min: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RuntimeMetrics {
    /// NaN when the report was computed from a log alone.
    pub real_time_factor: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: MapMetrics,
    pub trajectory: TrajectoryMetrics,
    pub velocity: VelocityMetrics,
    pub failures: FailureMetrics,
    pub runtime: RuntimeMetrics,
}

/// Map quality of `estimate` against the true cone set: optimal one-to-one
/// matching under the gate, position RMSE and color accuracy over matches.
pub fn map_metrics(estimate: &[MapCone], track: &TrackSpec) -> MapMetrics {
    let truth: Vec<(Vector2<f64>, ConeColor)> = track
        .all_cones()
        .map(|c| (c.point(), c.color))
        .collect();
    let cost: Vec<Vec<f64>> = estimate
        .iter()
        .map(|e| truth.iter().map(|(p, _)| (e.point() - p).norm()).collect())
        .collect();
    let assignment = assign_with_gate(&cost, MAP_MATCH_GATE);
    let mut matched = 0usize;
    let mut color_right = 0usize;
    let mut sq_sum = 0.0;
    for (i, a) in assignment.iter().enumerate() {
        if let Some(j) = a {
            matched += 1;
            sq_sum += cost[i][*j] * cost[i][*j];
            if estimate[i].color == truth[*j].1 {
                color_right += 1;
            }
        }
    }
    let missed = truth.len() - matched;
    let false_cones = estimate.len() - matched;
    MapMetrics {
        matched,
        missed,
        false_cones,
        position_rmse: if matched > 0 {
            (sq_sum / matched as f64).sqrt()
        } else {
            0.0
        },
        color_accuracy: if matched > 0 {
            color_right as f64 / matched as f64
        } else {
            0.0
        },
        recall: if truth.is_empty() {
            1.0
        } else {
            matched as f64 / truth.len() as f64
        },
        precision: if estimate.is_empty() {
            1.0
        } else {
            matched as f64 / estimate.len() as f64
        },
    }
}

/// Time series of the TRUTH stream.
fn truth_series(events: &[LogEvent]) -> Vec<(f64, crate::log::TruthRecord)> {
    events
        .iter()
        .filter_map(|e| match &e.payload {
            Payload::Truth(rec) => Some((e.t, rec.clone())),
            _ => None,
        })
        .collect()
}

/// Linear interpolation of the truth pose position at time `t`.
fn interp_truth_position(series: &[(f64, crate::log::TruthRecord)], t: f64) -> Option<Vector2<f64>> {
    interp(series, t, |rec| rec.pose.translation())
}

fn interp<F>(series: &[(f64, crate::log::TruthRecord)], t: f64, f: F) -> Option<Vector2<f64>>
where
    F: Fn(&crate::log::TruthRecord) -> Vector2<f64>,
{
    if series.is_empty() {
        return None;
    }
    let idx = series.partition_point(|(ts, _)| *ts <= t);
    if idx == 0 {
        return (t >= series[0].0 - 1e-9).then(|| f(&series[0].1));
    }
    if idx >= series.len() {
        let last = &series[series.len() - 1];
        return (t <= last.0 + 1e-9).then(|| f(&last.1));
    }
    let (t0, a) = &series[idx - 1];
    let (t1, b) = &series[idx];
    let w = ((t - t0) / (t1 - t0).max(1e-12)).clamp(0.0, 1.0);
    Some(f(a) * (1.0 - w) + f(b) * w)
}

/// Absolute trajectory error of the SLAM poses over `[t_from, t_to]` after
/// aligning the first pose pair (shared anchor makes this a formality).
pub fn trajectory_error(events: &[LogEvent], t_from: f64, t_to: f64) -> Result<TrajectoryMetrics> {
    let truth = truth_series(events);
    let poses: Vec<(f64, Vector2<f64>)> = events
        .iter()
        .filter_map(|e| match &e.payload {
            Payload::SlamPose(rec) if e.t >= t_from && e.t <= t_to => {
                Some((e.t, Vector2::new(rec.x, rec.y)))
            }
            _ => None,
        })
        .collect();
    if poses.is_empty() {
        return Err(Error::Log("no SLAM_POSE events in the window".into()));
    }
    // Anchor alignment: subtract the initial offset between the estimated
    // and true positions.
    let first_truth = interp_truth_position(&truth, poses[0].0)
        .ok_or_else(|| Error::Log("no TRUTH coverage for the pose window".into()))?;
    let offset = first_truth - poses[0].1;
    let mut sq = 0.0;
    let mut max_err: f64 = 0.0;
    let mut n = 0usize;
    for (t, p) in &poses {
        let Some(truth_p) = interp_truth_position(&truth, *t) else {
            continue;
        };
        let err = (p + offset - truth_p).norm();
        sq += err * err;
        max_err = max_err.max(err);
        n += 1;
    }
    Ok(TrajectoryMetrics {
        ate_rmse: (sq / n.max(1) as f64).sqrt(),
        max_err,
    })
}

/// RMS velocity estimation error against interpolated truth.
pub fn velocity_error(events: &[LogEvent]) -> Result<VelocityMetrics> {
    let truth = truth_series(events);
    if truth.is_empty() {
        return Err(Error::Log("no TRUTH events".into()));
    }
    let mut n = 0usize;
    let mut sq = [0.0f64; 3];
    for e in events {
        let Payload::VelEst(rec) = &e.payload else {
            continue;
        };
        let Some(v_true) = interp(&truth, e.t, |r| Vector2::new(r.vel.vx, r.vel.vy)) else {
            continue;
        };
        let Some(r_true) = interp(&truth, e.t, |r| Vector2::new(r.vel.r, 0.0)) else {
            continue;
        };
        sq[0] += (rec.vx - v_true.x).powi(2);
        sq[1] += (rec.vy - v_true.y).powi(2);
        sq[2] += (rec.r - r_true.x).powi(2);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Log("no VEL_EST events".into()));
    }
    Ok(VelocityMetrics {
        vx_rmse: (sq[0] / n as f64).sqrt(),
        vy_rmse: (sq[1] / n as f64).sqrt(),
        r_rmse: (sq[2] / n as f64).sqrt(),
    })
}

/// Detection latency per injected fault plus the false-alarm rate on
/// channels without an active fault.
pub fn failure_metrics(events: &[LogEvent], script: &FailureScript) -> FailureMetrics {
    // FAILED transitions per channel.
    let mut transitions: Vec<(f64, String)> = Vec::new();
    let mut last_status: std::collections::HashMap<String, HealthStatus> =
        std::collections::HashMap::new();
    let mut t_span = (f64::INFINITY, f64::NEG_INFINITY);
    for e in events {
        t_span.0 = t_span.0.min(e.t);
        t_span.1 = t_span.1.max(e.t);
        let Payload::Health(rec) = &e.payload else {
            continue;
        };
        for ch in &rec.sensors {
            let prev = last_status
                .insert(ch.id.clone(), ch.status)
                .unwrap_or(HealthStatus::Healthy);
            if prev != HealthStatus::Failed && ch.status == HealthStatus::Failed {
                transitions.push((e.t, ch.id.clone()));
            }
        }
    }

    let grace = 5.0;
    let mut latencies = Vec::new();
    for fault in &script.events {
        let name = fault.sensor.name().to_string();
        let hit = transitions
            .iter()
            .find(|(t, id)| *id == name && *t >= fault.t_start && *t <= fault.t_end + grace)
            .map(|(t, _)| t - fault.t_start);
        latencies.push(FaultLatency {
            sensor: name,
            t_start: fault.t_start,
            latency_s: hit,
        });
    }

    // A FAILED transition is a false alarm when the channel had no fault
    // covering (or shortly preceding) that instant.
    let mut false_alarms = 0usize;
    for (t, id) in &transitions {
        let excused = script.events.iter().any(|f| {
            f.sensor.name() == id && *t >= f.t_start && *t <= f.t_end + grace
        });
        if !excused {
            false_alarms += 1;
        }
    }
    let minutes = ((t_span.1 - t_span.0).max(0.0) / 60.0).max(1e-9);
    FailureMetrics {
        detection_latency: latencies,
        false_alarms_per_min: false_alarms as f64 / minutes,
    }
}

/// The last MAP event of the log.
pub fn final_map(events: &[LogEvent]) -> Result<Vec<MapCone>> {
    events
        .iter()
        .rev()
        .find_map(|e| match &e.payload {
            Payload::Map(rec) => Some(rec.cones.clone()),
            _ => None,
        })
        .ok_or_else(|| Error::Log("log contains no MAP events".into()))
}

/// Timestamp of the lap-closure map freeze, if any.
pub fn freeze_time(events: &[LogEvent]) -> Option<f64> {
    events.iter().find_map(|e| match &e.payload {
        Payload::Map(rec) if rec.frozen => Some(e.t),
        _ => None,
    })
}

/// Full report over a recorded log.
pub fn evaluate(
    events: &[LogEvent],
    track: &TrackSpec,
    script: &FailureScript,
    stats: Option<&RunStats>,
) -> Result<EvalReport> {
    let map_cones = final_map(events)?;
    let map = map_metrics(&map_cones, track);
    let trajectory = trajectory_error(events, f64::NEG_INFINITY, f64::INFINITY)?;
    let velocity = velocity_error(events)?;
    let failures = failure_metrics(events, script);
    Ok(EvalReport {
        map,
        trajectory,
        velocity,
        failures,
        runtime: RuntimeMetrics {
            real_time_factor: stats.map(|s| s.real_time_factor).unwrap_or(f64::NAN),
        },
    })
}

/// One-row CSV rendering of a report (header + values).
pub fn report_to_csv(report: &EvalReport) -> String {
    let lat = report
        .failures
        .detection_latency
        .iter()
        .map(|l| match l.latency_s {
            Some(s) => format!("{}@{}:{:.3}", l.sensor, l.t_start, s),
            None => format!("{}@{}:miss", l.sensor, l.t_start),
        })
        .collect::<Vec<_>>()
        .join(";");
    let mut out = String::new();
    out.push_str(
        "matched,missed,false_cones,position_rmse,color_accuracy,recall,precision,\
         ate_rmse,ate_max,vx_rmse,vy_rmse,r_rmse,fault_latencies,false_alarms_per_min,\
         real_time_factor\n",
    );
    out.push_str(&format!(
        "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.6},{}\n",
        report.map.matched,
        report.map.missed,
        report.map.false_cones,
        report.map.position_rmse,
        report.map.color_accuracy,
        report.map.recall,
        report.map.precision,
        report.trajectory.ate_rmse,
        report.trajectory.max_err,
        report.velocity.vx_rmse,
        report.velocity.vy_rmse,
        report.velocity.r_rmse,
        if lat.is_empty() { "-".to_string() } else { lat },
        report.failures.false_alarms_per_min,
        if report.runtime.real_time_factor.is_nan() {
            String::new()
        } else {
            format!("{:.3}", report.runtime.real_time_factor)
        },
    ));
    out
}

/// Per-stream CSV export with a header row.
pub fn stream_to_csv(events: &[LogEvent], stream: &str) -> Result<String> {
    let mut out = String::new();
    match stream {
        "TRUTH" => {
            out.push_str("t,x,y,theta,vx,vy,r,omega_0,omega_1,omega_2,omega_3,steering,accel_cmd\n");
            for e in events {
                if let Payload::Truth(r) = &e.payload {
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                        e.t,
                        r.pose.x,
                        r.pose.y,
                        r.pose.theta,
                        r.vel.vx,
                        r.vel.vy,
                        r.vel.r,
                        r.wheel_omegas[0],
                        r.wheel_omegas[1],
                        r.wheel_omegas[2],
                        r.wheel_omegas[3],
                        r.input.steering,
                        r.input.accel_cmd
                    ));
                }
            }
        }
        "WHEELS" => {
            out.push_str("t,omega_0,omega_1,omega_2,omega_3\n");
            for e in events {
                if let Payload::Wheels(r) = &e.payload {
                    out.push_str(&format!(
                        "{},{},{},{},{}\n",
                        e.t, r.omegas[0], r.omegas[1], r.omegas[2], r.omegas[3]
                    ));
                }
            }
        }
        "IMU" => {
            out.push_str("t,ax,ay,gz\n");
            for e in events {
                if let Payload::Imu(r) = &e.payload {
                    out.push_str(&format!("{},{},{},{}\n", e.t, r.ax, r.ay, r.gz));
                }
            }
        }
        "GSS" => {
            out.push_str("t,vx,vy\n");
            for e in events {
                if let Payload::Gss(r) = &e.payload {
                    out.push_str(&format!("{},{},{}\n", e.t, r.vx, r.vy));
                }
            }
        }
        "VEL_EST" => {
            out.push_str("t,vx,vy,r,cov_xx,cov_xy,cov_xz,cov_yy,cov_yz,cov_zz\n");
            for e in events {
                if let Payload::VelEst(r) = &e.payload {
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{},{},{},{}\n",
                        e.t,
                        r.vx,
                        r.vy,
                        r.r,
                        r.cov[0],
                        r.cov[1],
                        r.cov[2],
                        r.cov[3],
                        r.cov[4],
                        r.cov[5]
                    ));
                }
            }
        }
        "HEALTH" => {
            out.push_str("t,sensor,status,belief\n");
            for e in events {
                if let Payload::Health(r) = &e.payload {
                    for ch in &r.sensors {
                        out.push_str(&format!(
                            "{},{},{:?},{}\n",
                            e.t, ch.id, ch.status, ch.belief
                        ));
                    }
                }
            }
        }
        "SLAM_POSE" => {
            out.push_str("t,x,y,theta,ess,n_particles\n");
            for e in events {
                if let Payload::SlamPose(r) = &e.payload {
                    out.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        e.t, r.x, r.y, r.theta, r.ess, r.n_particles
                    ));
                }
            }
        }
        "LIDAR_OBS" | "CAM_OBS" => {
            out.push_str("t,idx,x,y,cov_xx,cov_xy,cov_yy,p_blue,p_yellow,p_orange,p_unknown\n");
            for e in events {
                let frame = match (&e.payload, stream) {
                    (Payload::LidarObs(f), "LIDAR_OBS") => f,
                    (Payload::CamObs(f), "CAM_OBS") => f,
                    _ => continue,
                };
                for (i, c) in frame.cones.iter().enumerate() {
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{},{},{},{},{}\n",
                        e.t,
                        i,
                        c.pos[0],
                        c.pos[1],
                        c.cov[0],
                        c.cov[1],
                        c.cov[2],
                        c.probs[0],
                        c.probs[1],
                        c.probs[2],
                        c.probs[3]
                    ));
                }
            }
        }
        "MAP" => {
            out.push_str("t,frozen,idx,x,y,color,confidence\n");
            for e in events {
                if let Payload::Map(r) = &e.payload {
                    for (i, c) in r.cones.iter().enumerate() {
                        out.push_str(&format!(
                            "{},{},{},{},{},{:?},{}\n",
                            e.t, r.frozen, i, c.pos[0], c.pos[1], c.color, c.confidence
                        ));
                    }
                }
            }
        }
        other => {
            return Err(Error::param(
                "stream",
                format!(
                    "unknown stream `{other}`; expected one of {:?}",
                    crate::log::STREAM_NAMES
                ),
            ));
        }
    }
    Ok(out)
}
