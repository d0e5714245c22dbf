//! Velocity EKF over body-frame (vx, vy, yaw rate), driven by IMU
//! mechanization, updated by wheel speeds and the ground-speed sensor, with
//! a per-sensor probabilistic failure detector.
//!
//! Tire slip is not estimated; it is absorbed by inflating the wheel
//! measurement variance with the current traction demand:
//! `R_i = sigma_omega^2 + (gamma * |ax|)^2`. Each scalar channel is gated on
//! its normalized innovation squared (chi-square 0.99), and a binary Bayes
//! filter over gate outcomes decides HEALTHY / SUSPECT / FAILED per sensor.
//! FAILED channels are excluded from the joint update but their NIS is still
//! evaluated against the fused estimate so recovery is observable.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector, Matrix3, RowVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geom::{Cov3, VelocityState};
use crate::sensors::{GssSample, ImuSample, SensorId, WheelSpeeds};
use crate::vehicle::{hub_speed, VehicleParams, WHEEL_COUNT};
use crate::{Error, Result};

/// chi-square 0.99 quantile, 1 dof (scalar wheel channels).
pub const CHI2_99_1DOF: f64 = 6.634896601021213;
/// chi-square 0.99 quantile, 2 dof (ground-speed sensor); equals -2 ln(0.01).
pub const CHI2_99_2DOF: f64 = 9.210340371976184;

pub const MAX_PREDICT_DT: f64 = 0.05;

/// Gaussian velocity belief.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelBelief {
    pub mean: VelocityState,
    pub cov: Cov3,
    pub t: f64,
}

/// Health state of one monitored channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HealthStatus {
    Healthy,
    Suspect,
    Failed,
}

/// Result of one innovation gate evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub sensor: SensorId,
    pub nis: f64,
    pub dof: usize,
    /// Innovation inside the gate.
    pub passed: bool,
    /// Channel was excluded from the joint update (gated out or FAILED).
    pub excluded: bool,
}

/// Recursive fault belief for one channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelHealth {
    pub status: HealthStatus,
    pub fail_belief: f64,
    /// Ring of recent gate outcomes (true = passed), diagnostics only.
    #[serde(skip)]
    pub window: VecDeque<bool>,
}

impl Default for ChannelHealth {
    fn default() -> Self {
        ChannelHealth {
            status: HealthStatus::Healthy,
            fail_belief: 0.01,
            window: VecDeque::new(),
        }
    }
}

/// Health records for all monitored channels (wheels and GSS).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SensorHealth {
    pub channels: BTreeMap<String, ChannelHealth>,
}

impl SensorHealth {
    pub fn monitored() -> Self {
        let mut channels = BTreeMap::new();
        for id in [
            SensorId::Wheel0,
            SensorId::Wheel1,
            SensorId::Wheel2,
            SensorId::Wheel3,
            SensorId::Gss,
        ] {
            channels.insert(id.name().to_string(), ChannelHealth::default());
        }
        SensorHealth { channels }
    }

    pub fn get(&self, id: SensorId) -> &ChannelHealth {
        &self.channels[id.name()]
    }

    pub fn status(&self, id: SensorId) -> HealthStatus {
        self.channels
            .get(id.name())
            .map(|c| c.status)
            .unwrap_or(HealthStatus::Healthy)
    }

    fn get_mut(&mut self, id: SensorId) -> &mut ChannelHealth {
        self.channels.get_mut(id.name()).expect("monitored channel")
    }
}

/// Estimator tuning. The process noise defaults are calibrated for the
/// default sensor noise at 100 Hz.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VelestParams {
    /// Gyro-tracking time constant for the yaw-rate state (s).
    pub tau_r: f64,
    /// Diagonal process noise rate; `q * dt` is added per predict.
    pub process_noise: [f64; 3],
    /// Initial covariance diagonal.
    pub init_cov: [f64; 3],
    /// Wheel noise used by the filter (rad/s).
    pub sigma_wheel: f64,
    /// GSS noise used by the filter (m/s).
    pub sigma_gss: f64,
    /// Slip inflation: R_i gains (gamma * |ax|)^2.
    pub gamma_slip: f64,
    /// Known IMU biases, subtracted before mechanization.
    pub imu_bias: [f64; 3],
    /// Gate thresholds.
    pub gate_1dof: f64,
    pub gate_2dof: f64,
    /// Failure-detector likelihoods and transition leaks.
    pub p_gate_fail_given_failed: f64,
    pub p_gate_fail_given_healthy: f64,
    pub leak_to_failed: f64,
    pub leak_to_healthy: f64,
    /// Status thresholds on the fail belief.
    pub threshold_failed: f64,
    pub threshold_healthy: f64,
    /// Diagnostic window length.
    pub health_window: usize,
}

impl Default for VelestParams {
    fn default() -> Self {
        let imu = crate::sensors::ImuSensorParams::default();
        let dt_nominal = 0.01;
        let tau_r = 0.01;
        // vx: mapped accelerometer noise. vy and r additionally budget for
        // the yaw-transient error of the gyro-tracking model (the lag
        // tau_r * rdot couples into the lateral prediction scaled by vx).
        VelestParams {
            tau_r,
            process_noise: [
                imu.sigma_accel * imu.sigma_accel * dt_nominal,
                imu.sigma_accel * imu.sigma_accel * dt_nominal + 1.2e-4,
                (imu.sigma_gyro / tau_r).powi(2) * dt_nominal + 2.0e-3,
            ],
            init_cov: [1e-4, 1e-4, 1e-4],
            sigma_wheel: crate::sensors::WheelSensorParams::default().sigma,
            sigma_gss: crate::sensors::GssSensorParams::default().sigma,
            gamma_slip: 0.5,
            imu_bias: [imu.bias_ax, imu.bias_ay, imu.bias_gz],
            gate_1dof: CHI2_99_1DOF,
            gate_2dof: CHI2_99_2DOF,
            p_gate_fail_given_failed: 0.9,
            p_gate_fail_given_healthy: 0.01,
            leak_to_failed: 0.001,
            leak_to_healthy: 0.01,
            threshold_failed: 0.95,
            threshold_healthy: 0.5,
            health_window: 50,
        }
    }
}

/// Analytic Jacobian of the state transition for one Euler step.
pub fn predict_jacobian(mean: &VelocityState, dt: f64, tau_r: f64) -> Matrix3<f64> {
    Matrix3::identity()
        + dt * Matrix3::new(
            0.0, mean.r, mean.vy, //
            -mean.r, 0.0, -mean.vx, //
            0.0, 0.0, -1.0 / tau_r,
        )
}

/// Propagate the belief with one bias-corrected IMU sample over `dt`.
pub fn predict(
    belief: &VelBelief,
    imu: &ImuSample,
    dt: f64,
    params: &VelestParams,
) -> Result<VelBelief> {
    if !(dt > 0.0 && dt <= MAX_PREDICT_DT) {
        return Err(Error::param(
            "dt",
            format!("{dt} outside (0, {MAX_PREDICT_DT}]"),
        ));
    }
    let m = belief.mean;
    let ax = imu.ax - params.imu_bias[0];
    let ay = imu.ay - params.imu_bias[1];
    let gz = imu.gz - params.imu_bias[2];
    let deriv = Vector3::new(
        ax + m.r * m.vy,
        ay - m.r * m.vx,
        (gz - m.r) / params.tau_r,
    );
    let mean = m.as_vector() + deriv * dt;
    let f = predict_jacobian(&m, dt, params.tau_r);
    let q = Matrix3::from_diagonal(&Vector3::from(params.process_noise)) * dt;
    let p = f * belief.cov.as_matrix() * f.transpose() + q;
    let p = (p + p.transpose()) * 0.5;
    Ok(VelBelief {
        mean: VelocityState::from_vector(mean),
        cov: Cov3::new(p)?,
        t: belief.t + dt,
    })
}

/// Wheel measurement model: predicted wheel rate and its Jacobian row.
pub fn wheel_model(
    mean: &VelocityState,
    steering: f64,
    wheel: usize,
    vp: &VehicleParams,
) -> (f64, RowVector3<f64>) {
    let pos = vp.wheel_positions()[wheel];
    let h = hub_speed(mean, steering, wheel, vp) / vp.r_eff;
    let row = if wheel < 2 {
        let (s, c) = steering.sin_cos();
        RowVector3::new(c, s, -pos.y * c + pos.x * s) / vp.r_eff
    } else {
        RowVector3::new(1.0, 0.0, -pos.y) / vp.r_eff
    };
    (h, row)
}

/// Joint EKF update over scalar rows with independent noise (Joseph form).
fn joint_update(
    mean: Vector3<f64>,
    cov: Matrix3<f64>,
    rows: &[(RowVector3<f64>, f64, f64)], // (H row, innovation, variance)
) -> (Vector3<f64>, Matrix3<f64>) {
    let k = rows.len();
    if k == 0 {
        return (mean, cov);
    }
    let mut h = DMatrix::<f64>::zeros(k, 3);
    let mut r = DMatrix::<f64>::zeros(k, k);
    let mut nu = DVector::<f64>::zeros(k);
    for (i, (row, innov, var)) in rows.iter().enumerate() {
        for j in 0..3 {
            h[(i, j)] = row[j];
        }
        r[(i, i)] = *var;
        nu[i] = *innov;
    }
    let p = DMatrix::<f64>::from_fn(3, 3, |i, j| cov[(i, j)]);
    let s = &h * &p * h.transpose() + &r;
    let Some(s_inv) = s.try_inverse() else {
        return (mean, cov);
    };
    let gain = &p * h.transpose() * s_inv;
    let dm = &gain * &nu;
    let mean = mean + Vector3::new(dm[0], dm[1], dm[2]);
    let i_kh = DMatrix::<f64>::identity(3, 3) - &gain * &h;
    let p_new = &i_kh * &p * i_kh.transpose() + &gain * &r * gain.transpose();
    let mut out = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            out[(i, j)] = (p_new[(i, j)] + p_new[(j, i)]) * 0.5;
        }
    }
    (mean, out)
}

fn scalar_nis(cov: &Matrix3<f64>, row: &RowVector3<f64>, innov: f64, var: f64) -> f64 {
    let s = (row * cov * row.transpose())[(0, 0)] + var;
    innov * innov / s
}

/// Wheel-speed update: per-channel gating, joint update over accepted
/// channels, NIS for FAILED channels evaluated against the posterior.
pub fn update_wheels(
    belief: &VelBelief,
    meas: &WheelSpeeds,
    steering: f64,
    accel_est: f64,
    health: &SensorHealth,
    params: &VelestParams,
    vp: &VehicleParams,
) -> Result<(VelBelief, Vec<GateOutcome>)> {
    if meas.t + 1e-9 < belief.t {
        return Err(Error::param(
            "measurement time",
            format!("wheel sample at {} precedes belief at {}", meas.t, belief.t),
        ));
    }
    let var = params.sigma_wheel.powi(2) + (params.gamma_slip * accel_est.abs()).powi(2);
    let cov = *belief.cov.as_matrix();
    let mut outcomes = Vec::with_capacity(WHEEL_COUNT);
    let mut accepted = Vec::new();
    let mut failed_rows = Vec::new();
    for i in 0..WHEEL_COUNT {
        let id = SensorId::wheel(i);
        let (h, row) = wheel_model(&belief.mean, steering, i, vp);
        let innov = meas.omegas[i] - h;
        if health.status(id) == HealthStatus::Failed {
            failed_rows.push((id, row, meas.omegas[i]));
            continue;
        }
        let nis = scalar_nis(&cov, &row, innov, var);
        let passed = nis <= params.gate_1dof;
        if passed {
            accepted.push((row, innov, var));
        }
        outcomes.push(GateOutcome {
            sensor: id,
            nis,
            dof: 1,
            passed,
            excluded: !passed,
        });
    }
    let (mean, cov_new) = joint_update(belief.mean.as_vector(), cov, &accepted);
    // Recovery visibility: FAILED channels are scored against the fused
    // posterior rather than the prior.
    let post_mean = VelocityState::from_vector(mean);
    for (id, _row, omega) in failed_rows {
        let wheel = id.wheel_index().unwrap();
        let (h, row) = wheel_model(&post_mean, steering, wheel, vp);
        let innov = omega - h;
        let nis = scalar_nis(&cov_new, &row, innov, var);
        outcomes.push(GateOutcome {
            sensor: id,
            nis,
            dof: 1,
            passed: nis <= params.gate_1dof,
            excluded: true,
        });
    }
    Ok((
        VelBelief {
            mean: post_mean,
            cov: Cov3::new(cov_new)?,
            t: meas.t,
        },
        outcomes,
    ))
}

/// Ground-speed update: a single 2-dof gate, joint update if accepted.
pub fn update_gss(
    belief: &VelBelief,
    meas: &GssSample,
    health: &SensorHealth,
    params: &VelestParams,
) -> Result<(VelBelief, Vec<GateOutcome>)> {
    if meas.t + 1e-9 < belief.t {
        return Err(Error::param(
            "measurement time",
            format!("gss sample at {} precedes belief at {}", meas.t, belief.t),
        ));
    }
    let cov = *belief.cov.as_matrix();
    let var = params.sigma_gss.powi(2);
    let rows = [
        (RowVector3::new(1.0, 0.0, 0.0), meas.vx - belief.mean.vx, var),
        (RowVector3::new(0.0, 1.0, 0.0), meas.vy - belief.mean.vy, var),
    ];
    // 2-dof NIS with the joint 2x2 innovation covariance (diagonal R).
    let s00 = (rows[0].0 * cov * rows[0].0.transpose())[(0, 0)] + var;
    let s11 = (rows[1].0 * cov * rows[1].0.transpose())[(0, 0)] + var;
    let s01 = (rows[0].0 * cov * rows[1].0.transpose())[(0, 0)];
    let det = s00 * s11 - s01 * s01;
    let (n0, n1) = (rows[0].1, rows[1].1);
    let nis = (n0 * n0 * s11 - 2.0 * n0 * n1 * s01 + n1 * n1 * s00) / det.max(1e-300);
    let failed = health.status(SensorId::Gss) == HealthStatus::Failed;
    let passed = nis <= params.gate_2dof;
    let accept = passed && !failed;
    let (mean, cov_new) = if accept {
        joint_update(belief.mean.as_vector(), cov, &rows)
    } else {
        (belief.mean.as_vector(), cov)
    };
    let outcomes = vec![GateOutcome {
        sensor: SensorId::Gss,
        nis,
        dof: 2,
        passed,
        excluded: !accept,
    }];
    Ok((
        VelBelief {
            mean: VelocityState::from_vector(mean),
            cov: Cov3::new(cov_new)?,
            t: meas.t,
        },
        outcomes,
    ))
}

/// One step of the binary Bayes failure recursion for a channel.
///
/// Prediction leaks a little probability toward failure and recovery, then
/// the gate outcome updates the belief with fixed likelihoods.
pub fn update_failure_belief(
    health: &mut ChannelHealth,
    gate_passed: bool,
    params: &VelestParams,
) {
    let b = health.fail_belief;
    let predicted = b * (1.0 - params.leak_to_healthy) + (1.0 - b) * params.leak_to_failed;
    let (l_failed, l_healthy) = if gate_passed {
        (
            1.0 - params.p_gate_fail_given_failed,
            1.0 - params.p_gate_fail_given_healthy,
        )
    } else {
        (
            params.p_gate_fail_given_failed,
            params.p_gate_fail_given_healthy,
        )
    };
    let numer = predicted * l_failed;
    let denom = numer + (1.0 - predicted) * l_healthy;
    health.fail_belief = if denom > 0.0 { numer / denom } else { predicted };
    health.status = if health.fail_belief > params.threshold_failed {
        HealthStatus::Failed
    } else if health.fail_belief < params.threshold_healthy {
        HealthStatus::Healthy
    } else {
        HealthStatus::Suspect
    };
    health.window.push_back(gate_passed);
    while health.window.len() > params.health_window {
        health.window.pop_front();
    }
}

/// Stateful estimator: predict-to-timestamp sequencing over the sensor
/// streams plus health bookkeeping. Single-owner; updates are serialized.
#[derive(Clone, Debug)]
pub struct VelEstimator {
    pub belief: VelBelief,
    pub health: SensorHealth,
    params: VelestParams,
    vehicle: VehicleParams,
    last_imu: Option<ImuSample>,
    accel_est: f64,
    gss_nis_sum: f64,
    gss_nis_count: usize,
}

impl VelEstimator {
    pub fn new(params: VelestParams, vehicle: VehicleParams, t0: f64) -> Self {
        VelEstimator {
            belief: VelBelief {
                mean: VelocityState::default(),
                cov: Cov3::diagonal(params.init_cov[0], params.init_cov[1], params.init_cov[2])
                    .expect("diagonal PSD"),
                t: t0,
            },
            health: SensorHealth::monitored(),
            params,
            vehicle,
            last_imu: None,
            accel_est: 0.0,
            gss_nis_sum: 0.0,
            gss_nis_count: 0,
        }
    }

    /// Count and mean of the NIS over accepted GSS updates (the filter
    /// consistency statistic).
    pub fn gss_nis_stats(&self) -> (usize, f64) {
        if self.gss_nis_count == 0 {
            (0, 0.0)
        } else {
            (self.gss_nis_count, self.gss_nis_sum / self.gss_nis_count as f64)
        }
    }

    pub fn params(&self) -> &VelestParams {
        &self.params
    }

    /// Propagate the belief to time `t` using the last IMU sample.
    fn predict_to(&mut self, t: f64) -> Result<()> {
        let Some(imu) = self.last_imu else {
            self.belief.t = t;
            return Ok(());
        };
        let mut remaining = t - self.belief.t;
        while remaining > 1e-12 {
            let dt = remaining.min(MAX_PREDICT_DT);
            self.belief = predict(&self.belief, &imu, dt, &self.params)?;
            remaining = t - self.belief.t;
        }
        Ok(())
    }

    pub fn on_imu(&mut self, imu: &ImuSample) -> Result<()> {
        if imu.t > self.belief.t {
            // Mechanize with the newest sample over the gap.
            self.last_imu = Some(*imu);
            self.predict_to(imu.t)?;
        } else {
            self.last_imu = Some(*imu);
        }
        self.accel_est = imu.ax - self.params.imu_bias[0];
        Ok(())
    }

    pub fn on_wheels(&mut self, meas: &WheelSpeeds, steering: f64) -> Result<Vec<GateOutcome>> {
        self.predict_to(meas.t)?;
        let (belief, outcomes) = update_wheels(
            &self.belief,
            meas,
            steering,
            self.accel_est,
            &self.health,
            &self.params,
            &self.vehicle,
        )?;
        self.belief = belief;
        for o in &outcomes {
            update_failure_belief(self.health.get_mut(o.sensor), o.passed, &self.params);
        }
        Ok(outcomes)
    }

    pub fn on_gss(&mut self, meas: &GssSample) -> Result<Vec<GateOutcome>> {
        self.predict_to(meas.t)?;
        let (belief, outcomes) = update_gss(&self.belief, meas, &self.health, &self.params)?;
        self.belief = belief;
        for o in &outcomes {
            if !o.excluded {
                self.gss_nis_sum += o.nis;
                self.gss_nis_count += 1;
            }
            update_failure_belief(self.health.get_mut(o.sensor), o.passed, &self.params);
        }
        Ok(outcomes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Rng;
    use crate::vehicle::wheel_omegas_from;
    use crate::vehicle::DriveInput;
    use approx::assert_relative_eq;

    fn quiet_params() -> VelestParams {
        VelestParams {
            imu_bias: [0.0; 3],
            ..Default::default()
        }
    }

    fn belief(vx: f64, vy: f64, r: f64, cov: f64) -> VelBelief {
        VelBelief {
            mean: VelocityState { vx, vy, r },
            cov: Cov3::diagonal(cov, cov, cov).unwrap(),
            t: 0.0,
        }
    }

    fn imu0(t: f64) -> ImuSample {
        ImuSample {
            ax: 0.0,
            ay: 0.0,
            gz: 0.0,
            t,
        }
    }

    // Regularized lower incomplete gamma P(a, x), series + continued
    // fraction; oracle for the chi-square quantiles.
    fn gammp(a: f64, x: f64) -> f64 {
        fn gser(a: f64, x: f64) -> f64 {
            let gln = ln_gamma(a);
            let mut ap = a;
            let mut sum = 1.0 / a;
            let mut del = sum;
            for _ in 0..500 {
                ap += 1.0;
                del *= x / ap;
                sum += del;
                if del.abs() < sum.abs() * 1e-15 {
                    break;
                }
            }
            sum * (-x + a * x.ln() - gln).exp()
        }
        fn gcf(a: f64, x: f64) -> f64 {
            let gln = ln_gamma(a);
            let mut b = x + 1.0 - a;
            let mut c = 1e300;
            let mut d = 1.0 / b;
            let mut h = d;
            for i in 1..500 {
                let an = -(i as f64) * (i as f64 - a);
                b += 2.0;
                d = an * d + b;
                if d.abs() < 1e-300 {
                    d = 1e-300;
                }
                c = b + an / c;
                if c.abs() < 1e-300 {
                    c = 1e-300;
                }
                d = 1.0 / d;
                let del = d * c;
                h *= del;
                if (del - 1.0).abs() < 1e-15 {
                    break;
                }
            }
            (-x + a * x.ln() - gln).exp() * h
        }
        fn ln_gamma(x: f64) -> f64 {
            // Lanczos approximation.
            let g = [
                76.18009172947146,
                -86.50532032941677,
                24.01409824083091,
                -1.231739572450155,
                0.1208650973866179e-2,
                -0.5395239384953e-5,
            ];
            let mut y = x;
            let tmp = x + 5.5;
            let tmp = tmp - (x + 0.5) * tmp.ln();
            let mut ser = 1.000000000190015;
            for gi in g {
                y += 1.0;
                ser += gi / y;
            }
            -tmp + (2.5066282746310005 * ser / x).ln()
        }
        if x < a + 1.0 {
            gser(a, x)
        } else {
            1.0 - gcf(a, x)
        }
    }

    fn chi2_quantile(p: f64, dof: f64) -> f64 {
        let mut lo = 0.0;
        let mut hi = 200.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if gammp(dof / 2.0, mid / 2.0) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn chi2_gate_constants_match_numeric_quantiles() {
        assert!((chi2_quantile(0.99, 1.0) - CHI2_99_1DOF).abs() < 1e-6);
        assert!((chi2_quantile(0.99, 2.0) - CHI2_99_2DOF).abs() < 1e-6);
        assert_relative_eq!(CHI2_99_2DOF, -2.0 * 0.01f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn zero_imu_zero_mean_grows_cov_by_q_dt() {
        let p = quiet_params();
        let b = belief(0.0, 0.0, 0.0, 0.0);
        let out = predict(&b, &imu0(0.01), 0.01, &p).unwrap();
        assert_eq!(out.mean, VelocityState::default());
        for i in 0..3 {
            assert_relative_eq!(
                out.cov.as_matrix()[(i, i)],
                p.process_noise[i] * 0.01,
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn centripetal_coupling_in_mean_propagation() {
        // vx=10, r=0.5, ax=ay=0: dvx = r*vy = 0, dvy = -r*vx = -5.
        let p = quiet_params();
        let b = belief(10.0, 0.0, 0.5, 1e-6);
        let dt = 0.01;
        let out = predict(&b, &ImuSample { ax: 0.0, ay: 0.0, gz: 0.5, t: dt }, dt, &p).unwrap();
        assert_relative_eq!(out.mean.vx, 10.0, epsilon = 1e-12);
        assert_relative_eq!(out.mean.vy, -5.0 * dt, epsilon = 1e-12);
    }

    #[test]
    fn jacobian_matches_central_finite_differences() {
        let p = quiet_params();
        let mut rng = Rng::from_seed(8);
        let dt = 0.01;
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let state = VelocityState {
                vx: rng.range(-15.0, 15.0),
                vy: rng.range(-3.0, 3.0),
                r: rng.range(-2.0, 2.0),
            };
            let imu = ImuSample {
                ax: rng.range(-5.0, 5.0),
                ay: rng.range(-5.0, 5.0),
                gz: rng.range(-2.0, 2.0),
                t: dt,
            };
            let f = predict_jacobian(&state, dt, p.tau_r);
            let propagate = |s: VelocityState| {
                let b = VelBelief {
                    mean: s,
                    cov: Cov3::diagonal(1e-9, 1e-9, 1e-9).unwrap(),
                    t: 0.0,
                };
                predict(&b, &imu, dt, &p).unwrap().mean.as_vector()
            };
            for j in 0..3 {
                let mut plus = state;
                let mut minus = state;
                match j {
                    0 => {
                        plus.vx += eps;
                        minus.vx -= eps;
                    }
                    1 => {
                        plus.vy += eps;
                        minus.vy -= eps;
                    }
                    _ => {
                        plus.r += eps;
                        minus.r -= eps;
                    }
                }
                let col = (propagate(plus) - propagate(minus)) / (2.0 * eps);
                for i in 0..3 {
                    worst = worst.max((col[i] - f[(i, j)]).abs());
                }
            }
        }
        assert!(worst < 1e-6, "max Jacobian error {worst}");
    }

    #[test]
    fn perfect_wheel_measurement_shrinks_cov_keeps_mean() {
        let p = quiet_params();
        let vp = VehicleParams::default();
        let b = belief(10.0, 0.0, 0.0, 0.05);
        let vel = b.mean;
        let meas = WheelSpeeds {
            omegas: wheel_omegas_from(&vel, &DriveInput::default(), &vp),
            t: 0.0,
        };
        let health = SensorHealth::monitored();
        let (out, gates) = update_wheels(&b, &meas, 0.0, 0.0, &health, &p, &vp).unwrap();
        assert_relative_eq!(out.mean.vx, 10.0, epsilon = 1e-12);
        assert!(out.cov.trace() <= b.cov.trace());
        assert!(gates.iter().all(|g| g.passed && g.nis < 1e-9));
    }

    #[test]
    fn posterior_never_exceeds_prior_in_psd_order() {
        let p = quiet_params();
        let vp = VehicleParams::default();
        let mut rng = Rng::from_seed(4);
        let health = SensorHealth::monitored();
        for _ in 0..500 {
            let b = belief(
                rng.range(-10.0, 10.0),
                rng.range(-2.0, 2.0),
                rng.range(-1.5, 1.5),
                rng.range(1e-4, 0.5),
            );
            let vel = b.mean;
            let mut meas = WheelSpeeds {
                omegas: wheel_omegas_from(&vel, &DriveInput::default(), &vp),
                t: 0.0,
            };
            for w in meas.omegas.iter_mut() {
                *w += rng.normal() * 0.05;
            }
            let (out, _) = update_wheels(&b, &meas, 0.0, 0.0, &health, &p, &vp).unwrap();
            let diff = b.cov.as_matrix() - out.cov.as_matrix();
            let eig = nalgebra::SymmetricEigen::new((diff + diff.transpose()) * 0.5);
            let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min > -1e-9, "posterior exceeded prior: min eig {min}");
        }
    }

    #[test]
    fn covariance_stays_psd_through_many_random_cycles() {
        let p = quiet_params();
        let vp = VehicleParams::default();
        let mut rng = Rng::from_seed(12);
        let mut est = VelEstimator::new(p, vp, 0.0);
        let mut t = 0.0;
        for k in 0..100_000 {
            t += 0.01;
            let imu = ImuSample {
                ax: rng.range(-4.0, 4.0),
                ay: rng.range(-4.0, 4.0),
                gz: rng.range(-1.0, 1.0),
                t,
            };
            est.on_imu(&imu).unwrap();
            if k % 3 == 0 {
                let vel = est.belief.mean;
                let meas = WheelSpeeds {
                    omegas: wheel_omegas_from(&vel, &DriveInput::default(), &vp)
                        .map(|w| w + rng.normal() * 0.3),
                    t,
                };
                est.on_wheels(&meas, 0.0).unwrap();
            }
            if k % 7 == 0 {
                let g = GssSample {
                    vx: est.belief.mean.vx + rng.normal() * 0.1,
                    vy: est.belief.mean.vy + rng.normal() * 0.1,
                    t,
                };
                est.on_gss(&g).unwrap();
            }
            // Cov3 revalidates symmetric PSD on every construction; reaching
            // here means the invariant held.
        }
        assert!(est.belief.cov.trace().is_finite());
    }

    #[test]
    fn failure_belief_decays_monotonically_on_passes() {
        let p = VelestParams::default();
        let mut ch = ChannelHealth {
            status: HealthStatus::Healthy,
            fail_belief: 0.4,
            window: VecDeque::new(),
        };
        let mut prev = ch.fail_belief;
        for _ in 0..200 {
            update_failure_belief(&mut ch, true, &p);
            assert!(ch.fail_belief <= prev + 1e-12);
            prev = ch.fail_belief;
        }
        // Settles at the leak floor, far below the healthy threshold.
        assert!(ch.fail_belief < 0.01);
        assert_eq!(ch.status, HealthStatus::Healthy);
    }

    #[test]
    fn consecutive_gate_failures_cross_threshold_quickly() {
        // Oracle: iterate the stated recursion numerically from 0.5.
        let p = VelestParams::default();
        let mut expect = 0.5;
        let mut ch = ChannelHealth {
            status: HealthStatus::Suspect,
            fail_belief: 0.5,
            window: VecDeque::new(),
        };
        let mut crossed_at = None;
        for k in 1..=6 {
            let predicted = expect * (1.0 - p.leak_to_healthy) + (1.0 - expect) * p.leak_to_failed;
            expect = predicted * p.p_gate_fail_given_failed
                / (predicted * p.p_gate_fail_given_failed
                    + (1.0 - predicted) * p.p_gate_fail_given_healthy);
            update_failure_belief(&mut ch, false, &p);
            assert_relative_eq!(ch.fail_belief, expect, epsilon = 1e-12);
            if ch.fail_belief > p.threshold_failed && crossed_at.is_none() {
                crossed_at = Some(k);
            }
        }
        assert!(crossed_at.unwrap() <= 6, "crossed at {crossed_at:?}");
        assert_eq!(ch.status, HealthStatus::Failed);
    }

    /// Synthetic cornering stream: speed ramp to 8 m/s, yaw rate
    /// r(t) = 0.5 sin(1.5 t). Optionally one wheel sticks at `t_fault`, or
    /// all four wheels stick at zero for the whole run.
    fn run_synthetic(
        duration: f64,
        stuck_wheel: Option<(usize, f64)>,
        all_wheels_dead: bool,
        seed: u64,
    ) -> (VelEstimator, Vec<(f64, f64)>, Option<f64>) {
        let p = quiet_params();
        let vp = VehicleParams::default();
        let mut est = VelEstimator::new(p, vp, 0.0);
        let mut rng = Rng::from_seed(seed);
        let v_target = 8.0;
        let ramp_accel = 2.0;
        let dt = 0.01;
        let steps = (duration / dt) as usize;
        let mut errs = Vec::new();
        let mut stuck_value = [0.0f64; 4];
        let mut detected_at = None;
        for k in 1..=steps {
            let t = k as f64 * dt;
            let vx = (ramp_accel * t).min(v_target);
            let ax = if vx < v_target { ramp_accel } else { 0.0 };
            let r = 0.5 * (1.5 * t).sin();
            let truth = VelocityState { vx, vy: 0.0, r };
            let imu = ImuSample {
                ax: ax + rng.normal() * 0.05,
                ay: r * vx + rng.normal() * 0.05,
                gz: r + rng.normal() * 0.005,
                t,
            };
            est.on_imu(&imu).unwrap();
            let mut omegas = [0.0; 4];
            for (i, w) in omegas.iter_mut().enumerate() {
                *w = hub_speed(&truth, 0.0, i, &vp) / vp.r_eff + rng.normal() * 0.1;
            }
            if all_wheels_dead {
                omegas = [0.0; 4];
            }
            if let Some((wheel, t_fault)) = stuck_wheel {
                if t < t_fault {
                    stuck_value = omegas;
                } else {
                    omegas[wheel] = stuck_value[wheel];
                }
            }
            est.on_wheels(&WheelSpeeds { omegas, t }, 0.0).unwrap();
            est.on_gss(
                &GssSample {
                    vx: vx + rng.normal() * 0.03,
                    vy: rng.normal() * 0.03,
                    t,
                },
            )
            .unwrap();
            errs.push((t, est.belief.mean.vx - vx));
            if detected_at.is_none() {
                if let Some((wheel, t_fault)) = stuck_wheel {
                    if t >= t_fault
                        && est.health.status(SensorId::wheel(wheel)) == HealthStatus::Failed
                    {
                        detected_at = Some(t - t_fault);
                    }
                }
            }
        }
        (est, errs, detected_at)
    }

    #[test]
    fn straight_line_vx_rms_under_15cm_per_s() {
        let (_, errs, _) = run_synthetic(10.0, None, false, 21);
        let rms = (errs.iter().map(|(_, e)| e * e).sum::<f64>() / errs.len() as f64).sqrt();
        assert!(rms < 0.15, "vx RMS {rms}");
    }

    #[test]
    fn stuck_wheel_detected_within_a_second_no_false_alarms() {
        let (est, _, detected) = run_synthetic(10.0, Some((0, 5.0)), false, 33);
        let latency = detected.expect("stuck wheel never declared FAILED");
        assert!(latency <= 1.0, "latency {latency}");
        // The other channels stay clear.
        for i in 1..4 {
            assert_ne!(est.health.status(SensorId::wheel(i)), HealthStatus::Failed);
        }
        assert_ne!(est.health.status(SensorId::Gss), HealthStatus::Failed);

        // Fault-free run: nothing is ever declared FAILED.
        let (est, _, _) = run_synthetic(60.0, None, false, 44);
        for id in [
            SensorId::Wheel0,
            SensorId::Wheel1,
            SensorId::Wheel2,
            SensorId::Wheel3,
            SensorId::Gss,
        ] {
            assert_ne!(est.health.status(id), HealthStatus::Failed, "{id}");
        }
    }

    #[test]
    fn all_wheels_failed_still_tracks_on_gss_and_imu() {
        // Every wheel reads zero for the whole run; the detector isolates
        // all four and GSS + IMU carry the estimate.
        let (est, errs, _) = run_synthetic(10.0, None, true, 55);
        let rms = (errs.iter().map(|(_, e)| e * e).sum::<f64>() / errs.len() as f64).sqrt();
        assert!(rms < 0.3, "vx RMS {rms} with wheels out");
        for i in 0..4 {
            assert_eq!(est.health.status(SensorId::wheel(i)), HealthStatus::Failed);
        }
        assert_ne!(est.health.status(SensorId::Gss), HealthStatus::Failed);
    }

    #[test]
    fn out_of_order_measurement_rejected() {
        let p = quiet_params();
        let vp = VehicleParams::default();
        let b = VelBelief {
            mean: VelocityState::default(),
            cov: Cov3::identity(),
            t: 1.0,
        };
        let meas = WheelSpeeds {
            omegas: [0.0; 4],
            t: 0.5,
        };
        assert!(update_wheels(&b, &meas, 0.0, 0.0, &SensorHealth::monitored(), &p, &vp).is_err());
    }
}
