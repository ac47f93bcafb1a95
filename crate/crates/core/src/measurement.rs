//! Range/bearing measurement model.
//!
//! A sensing entity (SE) at pose `(x_s, y_s, theta_s)` reports `z = [r, beta]`
//! with independent Gaussian noise on both components. The world position is
//! `p_s + R(theta_s) [r cos beta, r sin beta]`, and its covariance is the
//! first-order propagation `J diag(sigma_r^2, sigma_beta^2) J^T`, rotated into
//! the world frame.

use core::f64::consts::{PI, TAU};
use core::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeasurementError {
    #[error("{field} must be finite, got {value}")]
    NonFinite { field: &'static str, value: f64 },
    #[error("{field} must be strictly positive, got {value}")]
    NotPositive { field: &'static str, value: f64 },
    #[error("target coincides with the sensing entity position; bearing is undefined")]
    DegenerateGeometry,
}

/// Wraps an angle to `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let w = libm::remainder(a, TAU);
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

/// Sensing entity identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SeId(pub u32);

impl fmt::Display for SeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SE-{}", self.0)
    }
}

/// World position and boresight orientation of a sensing entity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Radians in `(-pi, pi]`.
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Result<Self, MeasurementError> {
        for (field, value) in [("x_s", x), ("y_s", y), ("theta_s", theta)] {
            if !value.is_finite() {
                return Err(MeasurementError::NonFinite { field, value });
            }
        }
        Ok(Self {
            x,
            y,
            theta: normalize_angle(theta),
        })
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

/// Standard deviations of range (m) and bearing (rad) noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    sigma_r: f64,
    sigma_beta: f64,
}

impl NoiseModel {
    pub fn new(sigma_r: f64, sigma_beta: f64) -> Result<Self, MeasurementError> {
        for (field, value) in [("sigma_r", sigma_r), ("sigma_beta", sigma_beta)] {
            if !value.is_finite() {
                return Err(MeasurementError::NonFinite { field, value });
            }
            if value <= 0.0 {
                return Err(MeasurementError::NotPositive { field, value });
            }
        }
        Ok(Self {
            sigma_r,
            sigma_beta,
        })
    }

    pub fn from_degrees(sigma_r: f64, sigma_beta_deg: f64) -> Result<Self, MeasurementError> {
        Self::new(sigma_r, sigma_beta_deg.to_radians())
    }

    pub fn sigma_r(&self) -> f64 {
        self.sigma_r
    }

    pub fn sigma_beta(&self) -> f64 {
        self.sigma_beta
    }
}

/// A local polar measurement `z = [r, beta]` in the reporting SE's frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarMeasurement {
    pub range: f64,
    pub bearing: f64,
    pub source: SeId,
}

impl PolarMeasurement {
    pub fn new(range: f64, bearing: f64, source: SeId) -> Result<Self, MeasurementError> {
        if !range.is_finite() {
            return Err(MeasurementError::NonFinite {
                field: "range",
                value: range,
            });
        }
        if !bearing.is_finite() {
            return Err(MeasurementError::NonFinite {
                field: "bearing",
                value: bearing,
            });
        }
        if range <= 0.0 {
            return Err(MeasurementError::NotPositive {
                field: "range",
                value: range,
            });
        }
        Ok(Self {
            range,
            bearing: normalize_angle(bearing),
            source,
        })
    }
}

/// Row-major 2x2 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat2(pub [[f64; 2]; 2]);

impl Mat2 {
    pub fn rotation(theta: f64) -> Self {
        let (s, c) = libm::sincos(theta);
        Mat2([[c, -s], [s, c]])
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Mat2([[m[0][0], m[1][0]], [m[0][1], m[1][1]]])
    }

    pub fn mul(&self, other: &Mat2) -> Mat2 {
        let (a, b) = (&self.0, &other.0);
        let mut out = [[0.0; 2]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        Mat2(out)
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }
}

/// Symmetric 2x2 covariance, m^2.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Cov2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Cov2 {
    pub const PSD_SLACK: f64 = 1e-12;

    pub fn diag(xx: f64, yy: f64) -> Self {
        Self { xx, xy: 0.0, yy }
    }

    /// Symmetrizes `m` by averaging the off-diagonal terms.
    pub fn from_mat(m: &Mat2) -> Self {
        Self {
            xx: m.0[0][0],
            xy: 0.5 * (m.0[0][1] + m.0[1][0]),
            yy: m.0[1][1],
        }
    }

    pub fn to_mat(&self) -> Mat2 {
        Mat2([[self.xx, self.xy], [self.xy, self.yy]])
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn trace(&self) -> f64 {
        self.xx + self.yy
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let half_tr = 0.5 * self.trace();
        let disc = libm::hypot(0.5 * (self.xx - self.yy), self.xy);
        (half_tr - disc, half_tr + disc)
    }

    pub fn is_psd(&self) -> bool {
        self.eigenvalues().0 >= -Self::PSD_SLACK
    }

    /// `R(theta) * self * R(theta)^T`.
    pub fn rotated(&self, theta: f64) -> Self {
        let r = Mat2::rotation(theta);
        Self::from_mat(&r.mul(&self.to_mat()).mul(&r.transpose()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        libm::sqrt(self.xx * self.xx + 2.0 * self.xy * self.xy + self.yy * self.yy)
    }

    pub fn sub(&self, other: &Cov2) -> Cov2 {
        Cov2 {
            xx: self.xx - other.xx,
            xy: self.xy - other.xy,
            yy: self.yy - other.yy,
        }
    }
}

/// A back-projected detection in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldDetection {
    pub point: Point,
    pub cov: Cov2,
    pub source: SeId,
    /// Simulation ground truth; fusion never reads it.
    #[serde(default)]
    clutter_truth: bool,
}

impl WorldDetection {
    pub fn new(point: Point, cov: Cov2, source: SeId) -> Self {
        Self {
            point,
            cov,
            source,
            clutter_truth: false,
        }
    }

    pub fn with_clutter_truth(mut self, is_clutter: bool) -> Self {
        self.clutter_truth = is_clutter;
        self
    }

    /// Ground-truth tag for evaluation code only.
    pub fn is_clutter_truth(&self) -> bool {
        self.clutter_truth
    }
}

/// SE-local polar measurement to world point.
pub fn polar_to_world(pose: &Pose, z: &PolarMeasurement) -> Point {
    let (sb, cb) = libm::sincos(z.bearing);
    let (lx, ly) = (z.range * cb, z.range * sb);
    let (st, ct) = libm::sincos(pose.theta);
    Point::new(pose.x + ct * lx - st * ly, pose.y + st * lx + ct * ly)
}

/// World point to the SE-local polar measurement that would observe it.
pub fn world_to_polar(pose: &Pose, p: &Point, source: SeId) -> Result<PolarMeasurement, MeasurementError> {
    let (dx, dy) = (p.x - pose.x, p.y - pose.y);
    let range = libm::hypot(dx, dy);
    if range == 0.0 {
        return Err(MeasurementError::DegenerateGeometry);
    }
    // rotate the displacement into the SE frame
    let (st, ct) = libm::sincos(pose.theta);
    let (lx, ly) = (ct * dx + st * dy, -st * dx + ct * dy);
    Ok(PolarMeasurement {
        range,
        bearing: normalize_angle(libm::atan2(ly, lx)),
        source,
    })
}

/// Noisy measurement of `p` from `pose`.
///
/// Non-positive ranges are redrawn; the bearing is wrapped after noise.
pub fn sample_measurement<R: Rng + ?Sized>(
    pose: &Pose,
    p: &Point,
    noise: &NoiseModel,
    source: SeId,
    rng: &mut R,
) -> Result<PolarMeasurement, MeasurementError> {
    let truth = world_to_polar(pose, p, source)?;
    let range = loop {
        let n: f64 = rng.sample(StandardNormal);
        let r = truth.range + noise.sigma_r * n;
        if r > 0.0 {
            break r;
        }
    };
    let nb: f64 = rng.sample(StandardNormal);
    Ok(PolarMeasurement {
        range,
        bearing: normalize_angle(truth.bearing + noise.sigma_beta * nb),
        source,
    })
}

/// `d(x, y) / d(r, beta)` in the SE-local frame.
pub fn jacobian(z: &PolarMeasurement) -> Mat2 {
    let (s, c) = libm::sincos(z.bearing);
    Mat2([[c, -z.range * s], [s, z.range * c]])
}

/// `J diag(sigma_r^2, sigma_beta^2) J^T` in the SE-local frame.
pub fn propagate_covariance(z: &PolarMeasurement, noise: &NoiseModel) -> Cov2 {
    let j = jacobian(z);
    let sigma = Cov2::diag(noise.sigma_r * noise.sigma_r, noise.sigma_beta * noise.sigma_beta);
    Cov2::from_mat(&j.mul(&sigma.to_mat()).mul(&j.transpose()))
}

/// Local covariance rotated into the world frame by the SE orientation.
pub fn world_covariance(pose: &Pose, z: &PolarMeasurement, noise: &NoiseModel) -> Cov2 {
    propagate_covariance(z, noise).rotated(pose.theta)
}

/// Projects a measurement into a world detection carrying its covariance.
pub fn back_project(pose: &Pose, z: &PolarMeasurement, noise: &NoiseModel) -> WorldDetection {
    WorldDetection::new(polar_to_world(pose, z), world_covariance(pose, z, noise), z.source)
}
