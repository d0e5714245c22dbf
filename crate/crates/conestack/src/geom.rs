//! Shared geometric and probabilistic primitives: SE(2) poses, angle
//! arithmetic, validated 2x2/3x3 covariances, and a seeded portable RNG.
//!
//! Angle convention: every angle stored in a [`Pose2D`] lies in `(-PI, PI]`,
//! with `-PI` mapped to `PI`. All stochastic code draws from [`Rng`], a
//! ChaCha8 stream that produces identical values for identical seeds on
//! every platform.

use std::f64::consts::{PI, TAU};

use nalgebra::{Cholesky, Matrix2, Matrix3, SMatrix, SVector, SymmetricEigen, Vector2, Vector3};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Wrap an angle to the half-open interval `(-PI, PI]`.
///
/// `PI` and `-PI` both map to `PI`. Errors on non-finite input.
pub fn wrap_angle(a: f64) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::NonFinite("angle"));
    }
    Ok(wrap_finite(a))
}

/// Angle wrap for values already known to be finite.
pub(crate) fn wrap_finite(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a; // already wrapped; keep bit-exact
    }
    let r = a.rem_euclid(TAU); // [0, 2*pi)
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// An SE(2) pose: world position in meters, heading in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRaw")]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    /// Heading in `(-PI, PI]`.
    pub theta: f64,
}

#[derive(Deserialize)]
struct PoseRaw {
    x: f64,
    y: f64,
    theta: f64,
}

impl TryFrom<PoseRaw> for Pose2D {
    type Error = Error;
    fn try_from(raw: PoseRaw) -> Result<Self> {
        Pose2D::new(raw.x, raw.y, raw.theta)
    }
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::NonFinite("pose translation"));
        }
        Ok(Pose2D {
            x,
            y,
            theta: wrap_angle(theta)?,
        })
    }

    pub fn identity() -> Self {
        Pose2D {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    pub fn translation(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn rotation(&self) -> Matrix2<f64> {
        let (s, c) = self.theta.sin_cos();
        Matrix2::new(c, -s, s, c)
    }

    /// Homogeneous-transform product: `self` then `other`.
    pub fn compose(&self, other: &Pose2D) -> Pose2D {
        let t = self.translation() + self.rotation() * other.translation();
        Pose2D {
            x: t.x,
            y: t.y,
            theta: wrap_finite(self.theta + other.theta),
        }
    }

    pub fn inverse(&self) -> Pose2D {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation());
        Pose2D {
            x: t.x,
            y: t.y,
            theta: wrap_finite(-self.theta),
        }
    }

    /// Map a body-frame point into the world frame.
    pub fn to_world(&self, p_body: Vector2<f64>) -> Vector2<f64> {
        self.translation() + self.rotation() * p_body
    }

    /// Map a world-frame point into the body frame.
    pub fn to_body(&self, p_world: Vector2<f64>) -> Vector2<f64> {
        self.rotation().transpose() * (p_world - self.translation())
    }
}

/// Body-frame velocity: longitudinal, lateral, yaw rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VelocityState {
    /// Longitudinal speed (m/s).
    pub vx: f64,
    /// Lateral speed (m/s).
    pub vy: f64,
    /// Yaw rate (rad/s).
    pub r: f64,
}

impl VelocityState {
    pub fn new(vx: f64, vy: f64, r: f64) -> Result<Self> {
        let v = VelocityState { vx, vy, r };
        v.check_finite()?;
        Ok(v)
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.vx.is_finite() && self.vy.is_finite() && self.r.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("velocity state"))
        }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.vx, self.vy, self.r)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        VelocityState {
            vx: v.x,
            vy: v.y,
            r: v.z,
        }
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }
}

/// Tolerance scale used by the shared covariance validator: symmetry and
/// eigenvalue slack are `1e-9` relative to `1 + max |entry|`.
const PSD_TOL: f64 = 1e-9;

macro_rules! sym_psd_impl {
    ($validate:ident, $sqrt:ident, $mat:ty, $n:literal) => {
        /// Validate that the matrix is symmetric PSD up to numerical slack.
        pub(crate) fn $validate(m: &$mat) -> Result<()> {
            let mut max_abs: f64 = 0.0;
            for v in m.iter() {
                if !v.is_finite() {
                    return Err(Error::NonFinite("covariance entry"));
                }
                max_abs = max_abs.max(v.abs());
            }
            let scale = 1.0 + max_abs;
            for i in 0..$n {
                for j in (i + 1)..$n {
                    if (m[(i, j)] - m[(j, i)]).abs() > PSD_TOL * scale {
                        return Err(Error::NotPsd(format!(
                            "asymmetric at ({i},{j}): {} vs {}",
                            m[(i, j)],
                            m[(j, i)]
                        )));
                    }
                }
            }
            let sym = (m + m.transpose()) * 0.5;
            let eig = SymmetricEigen::new(sym);
            let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            if min_eig < -PSD_TOL * scale {
                return Err(Error::NotPsd(format!("minimum eigenvalue {min_eig}")));
            }
            Ok(())
        }

        /// Factor `L` with `L * L^T = m` for a PSD matrix: Cholesky when
        /// definite, symmetric-eigen square root with negative eigenvalues
        /// clamped otherwise, so zero and semidefinite covariances factor
        /// cleanly.
        pub(crate) fn $sqrt(m: &$mat) -> $mat {
            if let Some(chol) = Cholesky::new(*m) {
                return chol.l();
            }
            let sym = (m + m.transpose()) * 0.5;
            let eig = SymmetricEigen::new(sym);
            let mut sqrt_vals = eig.eigenvalues;
            for v in sqrt_vals.iter_mut() {
                *v = v.max(0.0).sqrt();
            }
            let mut scaled = eig.eigenvectors;
            for (c, s) in sqrt_vals.iter().enumerate() {
                scaled.column_mut(c).scale_mut(*s);
            }
            scaled
        }
    };
}

sym_psd_impl!(validate_sym_psd2, psd_sqrt2, Matrix2<f64>, 2);
sym_psd_impl!(validate_sym_psd3, psd_sqrt3, Matrix3<f64>, 3);

macro_rules! cov_newtype {
    ($name:ident, $mat:ty, $validate:ident, $doc:expr) => {
        #[doc = $doc]
        #[derive(Clone, Copy, Debug, PartialEq)]
        pub struct $name($mat);

        impl $name {
            /// Validate symmetry and numerical positive semidefiniteness.
            pub fn new(m: $mat) -> Result<Self> {
                $validate(&m)?;
                Ok(Self(m))
            }

            pub fn zero() -> Self {
                Self(<$mat>::zeros())
            }

            pub fn identity() -> Self {
                Self(<$mat>::identity())
            }

            pub fn as_matrix(&self) -> &$mat {
                &self.0
            }

            pub fn into_matrix(self) -> $mat {
                self.0
            }

            pub fn trace(&self) -> f64 {
                self.0.trace()
            }
        }
    };
}

cov_newtype!(Cov2, Matrix2<f64>, validate_sym_psd2, "A validated symmetric PSD 2x2 covariance.");
cov_newtype!(Cov3, Matrix3<f64>, validate_sym_psd3, "A validated symmetric PSD 3x3 covariance.");

impl Cov2 {
    pub fn diagonal(a: f64, b: f64) -> Result<Self> {
        Self::new(Matrix2::new(a, 0.0, 0.0, b))
    }

    /// Flat form `[xx, xy, yy]` used by the log schema.
    pub fn to_flat(&self) -> [f64; 3] {
        [self.0[(0, 0)], self.0[(0, 1)], self.0[(1, 1)]]
    }

    pub fn from_flat(f: [f64; 3]) -> Result<Self> {
        Self::new(Matrix2::new(f[0], f[1], f[1], f[2]))
    }
}

impl Cov3 {
    pub fn diagonal(a: f64, b: f64, c: f64) -> Result<Self> {
        Self::new(Matrix3::from_diagonal(&Vector3::new(a, b, c)))
    }

    /// Flat upper triangle `[xx, xy, xz, yy, yz, zz]`.
    pub fn to_flat(&self) -> [f64; 6] {
        [
            self.0[(0, 0)],
            self.0[(0, 1)],
            self.0[(0, 2)],
            self.0[(1, 1)],
            self.0[(1, 2)],
            self.0[(2, 2)],
        ]
    }

    pub fn from_flat(f: [f64; 6]) -> Result<Self> {
        Self::new(Matrix3::new(
            f[0], f[1], f[2], f[1], f[3], f[4], f[2], f[4], f[5],
        ))
    }
}

impl Serialize for Cov2 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_flat().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Cov2 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = <[f64; 3]>::deserialize(d)?;
        Cov2::from_flat(f).map_err(serde::de::Error::custom)
    }
}

impl Serialize for Cov3 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_flat().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Cov3 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = <[f64; 6]>::deserialize(d)?;
        Cov3::from_flat(f).map_err(serde::de::Error::custom)
    }
}

/// Draw from `N(mean, cov)` for a validated 2x2 covariance.
pub fn sample_gaussian2(rng: &mut Rng, mean: Vector2<f64>, cov: &Cov2) -> Vector2<f64> {
    let l = psd_sqrt2(cov.as_matrix());
    mean + l * Vector2::new(rng.normal(), rng.normal())
}

/// Draw from `N(mean, cov)` for a validated 3x3 covariance.
pub fn sample_gaussian3(rng: &mut Rng, mean: Vector3<f64>, cov: &Cov3) -> Vector3<f64> {
    let l = psd_sqrt3(cov.as_matrix());
    mean + l * Vector3::new(rng.normal(), rng.normal(), rng.normal())
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded, portable random stream (ChaCha8 core).
///
/// Identical seeds produce identical streams on every platform. The
/// generator is single-owner; parallel or independent consumers must take
/// their own stream via [`Rng::split`] or [`Rng::derive`].
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream keyed by `(seed, stream)`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Rng::from_seed(splitmix64(seed ^ splitmix64(stream)))
    }

    /// Split off an independent child generator, advancing this one.
    pub fn split(&mut self) -> Self {
        Rng::from_seed(self.inner.next_u64())
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits, the conventional u64 -> f64 construction.
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Poisson draw by Knuth's product method; adequate for the small
    /// rates used by the sensor models.
    pub fn poisson(&mut self, lambda: f64) -> usize {
        if lambda <= 0.0 {
            return 0;
        }
        let limit = (-lambda).exp();
        let mut k = 0usize;
        let mut p = 1.0;
        loop {
            p *= self.uniform();
            if p <= limit {
                return k;
            }
            k += 1;
        }
    }

    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.inner.next_u64() % n as u64) as usize
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}

/// Draw from `N(mean, sigma^2)`.
pub fn sample_normal(rng: &mut Rng, mean: f64, sigma: f64) -> f64 {
    mean + sigma * rng.normal()
}

/// Sample-mean and sample-covariance of 2D points (test and eval support).
pub fn sample_stats2(points: &[Vector2<f64>]) -> (Vector2<f64>, Matrix2<f64>) {
    let n = points.len().max(1) as f64;
    let mean = points.iter().sum::<Vector2<f64>>() / n;
    let mut cov = Matrix2::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    (mean, cov / (n - 1.0).max(1.0))
}

/// Mean and covariance of N-dimensional samples stored row-wise.
pub fn sample_stats<const N: usize>(rows: &[SVector<f64, N>]) -> (SVector<f64, N>, SMatrix<f64, N, N>) {
    let n = rows.len().max(1) as f64;
    let mean: SVector<f64, N> = rows.iter().sum::<SVector<f64, N>>() / n;
    let mut cov = SMatrix::<f64, N, N>::zeros();
    for r in rows {
        let d = r - mean;
        cov += d * d.transpose();
    }
    (mean, cov / (n - 1.0).max(1.0))
}
