//! Rigid 6-DoF probe poses.
//!
//! Convention used everywhere in the crate: translations in millimetres,
//! rotations as Euler angles in degrees applied in intrinsic Z-Y-X order, so
//! the rotation matrix is `R = Rz(rz) * Ry(ry) * Rx(rx)`. A pose maps plane
//! coordinates to world coordinates: `X_world = R * X_plane + t`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Normalisation scale for translation channels (mm).
pub const TRANSLATION_SCALE_MM: f64 = 25.0;
/// Normalisation scale for rotation channels (degrees).
pub const ROTATION_SCALE_DEG: f64 = 45.0;
/// Per-channel scales for `(dx, dy, dz, drx, dry, drz)`.
pub const POSE_SCALES: [f64; 6] = [
    TRANSLATION_SCALE_MM,
    TRANSLATION_SCALE_MM,
    TRANSLATION_SCALE_MM,
    ROTATION_SCALE_DEG,
    ROTATION_SCALE_DEG,
    ROTATION_SCALE_DEG,
];

/// Pitch values closer than this to +/-90 degrees are rejected.
pub const GIMBAL_MARGIN_DEG: f64 = 0.5;

pub type Mat3 = [[f64; 3]; 3];

/// Wraps an angle in degrees into (-180, 180].
pub fn wrap_degrees(deg: f64) -> f64 {
    let w = deg.rem_euclid(360.0);
    if w > 180.0 {
        w - 360.0
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Translation (x, y, z) in mm.
    pub t: [f64; 3],
    /// Euler angles (rx, ry, rz) in degrees, each in (-180, 180].
    pub r: [f64; 3],
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(t: [f64; 3], r: [f64; 3]) -> Self {
        Self {
            t,
            r: r.map(wrap_degrees),
        }
    }

    pub fn identity() -> Self {
        Self {
            t: [0.0; 3],
            r: [0.0; 3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.t.iter().chain(self.r.iter()).all(|v| v.is_finite())
    }

    pub fn rotation(&self) -> Mat3 {
        euler_zyx_to_matrix(self.r)
    }

    pub fn to_rigid(&self) -> Rigid {
        Rigid {
            rot: self.rotation(),
            trans: self.t,
        }
    }

    /// Rigidly moves this pose by `delta`, expressed as a world-frame
    /// transform: `T_out = T(delta) * T(self)`.
    pub fn apply(&self, delta: &PoseDelta) -> Result<Pose> {
        if !self.is_finite() || !delta.is_finite() {
            return Err(invalid!("non-finite pose or delta"));
        }
        delta.to_rigid().compose(&self.to_rigid()).to_pose()
    }
}

/// Relative pose `a = (dx, dy, dz, drx, dry, drz)` between two planes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseDelta {
    pub a: [f64; 6],
}

impl PoseDelta {
    pub const ZERO: PoseDelta = PoseDelta { a: [0.0; 6] };

    pub fn new(a: [f64; 6]) -> Self {
        Self { a }
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.a[0], self.a[1], self.a[2]]
    }

    pub fn rotation_deg(&self) -> [f64; 3] {
        [self.a[3], self.a[4], self.a[5]]
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self, tol: f64) -> bool {
        self.a.iter().all(|v| v.abs() <= tol)
    }

    pub fn to_rigid(&self) -> Rigid {
        Rigid {
            rot: euler_zyx_to_matrix(self.rotation_deg()),
            trans: self.translation(),
        }
    }

    /// Divides each channel by its scale so all six are O(1).
    pub fn normalized(&self) -> [f64; 6] {
        std::array::from_fn(|i| self.a[i] / POSE_SCALES[i])
    }

    pub fn from_normalized(v: [f64; 6]) -> Self {
        Self {
            a: std::array::from_fn(|i| v[i] * POSE_SCALES[i]),
        }
    }
}

/// A rigid transform `x -> rot * x + trans`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rigid {
    pub rot: Mat3,
    pub trans: [f64; 3],
}

impl Rigid {
    pub fn identity() -> Self {
        Self {
            rot: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            trans: [0.0; 3],
        }
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Rigid) -> Rigid {
        let rot = mat_mul(&self.rot, &other.rot);
        let moved = mat_vec(&self.rot, &other.trans);
        Rigid {
            rot,
            trans: std::array::from_fn(|i| moved[i] + self.trans[i]),
        }
    }

    pub fn inverse(&self) -> Rigid {
        let rt = transpose(&self.rot);
        let t = mat_vec(&rt, &self.trans);
        Rigid {
            rot: rt,
            trans: t.map(|v| -v),
        }
    }

    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let r = mat_vec(&self.rot, &p);
        std::array::from_fn(|i| r[i] + self.trans[i])
    }

    /// Euler Z-Y-X decomposition; fails inside the gimbal-lock band.
    pub fn to_pose(&self) -> Result<Pose> {
        let r = matrix_to_euler_zyx(&self.rot)?;
        Ok(Pose { t: self.trans, r })
    }

    pub fn to_delta(&self) -> Result<PoseDelta> {
        let p = self.to_pose()?;
        Ok(PoseDelta {
            a: [p.t[0], p.t[1], p.t[2], p.r[0], p.r[1], p.r[2]],
        })
    }

    /// Largest absolute entry-wise difference of the two 4x4 matrices.
    pub fn max_abs_diff(&self, other: &Rigid) -> f64 {
        let mut m = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                m = m.max((self.rot[i][j] - other.rot[i][j]).abs());
            }
            m = m.max((self.trans[i] - other.trans[i]).abs());
        }
        m
    }
}

/// Pose of `tgt` relative to `src`, extracted from `T_tgt * T_src^-1`, so
/// that `src.apply(relative_pose(src, tgt)) == tgt`.
pub fn relative_pose(src: &Pose, tgt: &Pose) -> Result<PoseDelta> {
    if !src.is_finite() || !tgt.is_finite() {
        return Err(invalid!("non-finite pose"));
    }
    let mut d = tgt.to_rigid().compose(&src.to_rigid().inverse()).to_delta()?;
    // Avoid signed zeros and round-off noise on identical inputs.
    if src == tgt {
        d = PoseDelta::ZERO;
    }
    Ok(d)
}

pub fn euler_zyx_to_matrix(r_deg: [f64; 3]) -> Mat3 {
    let [rx, ry, rz] = r_deg.map(f64::to_radians);
    let (sx, cx) = rx.sin_cos();
    let (sy, cy) = ry.sin_cos();
    let (sz, cz) = rz.sin_cos();
    [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
}

pub fn matrix_to_euler_zyx(m: &Mat3) -> Result<[f64; 3]> {
    let ry = (-m[2][0]).atan2((m[0][0] * m[0][0] + m[1][0] * m[1][0]).sqrt());
    let ry_deg = ry.to_degrees();
    if (90.0 - ry_deg.abs()) < GIMBAL_MARGIN_DEG {
        return Err(Error::DegeneratePose { pitch_deg: ry_deg });
    }
    let rx = m[2][1].atan2(m[2][2]);
    let rz = m[1][0].atan2(m[0][0]);
    Ok([
        wrap_degrees(rx.to_degrees()),
        wrap_degrees(ry_deg),
        wrap_degrees(rz.to_degrees()),
    ])
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn mat_vec(a: &Mat3, v: &[f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| (0..3).map(|k| a[i][k] * v[k]).sum())
}

fn transpose(a: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| a[j][i]))
}
