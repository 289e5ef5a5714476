//! Rotation and pose types, SO(3) metrics and seeded sampling.
//!
//! Rotations are kept as 3x3 matrices because the solvers produce matrices
//! straight out of an SVD. Quaternions only appear at the edges (sampling and
//! conversion helpers).

use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GrrError, Result};

/// Element-wise tolerance used when validating rotations and unit vectors.
pub const ORTHO_TOL: f64 = 1e-9;

/// A proper rotation matrix (`RᵀR = I`, `det R = +1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates `m` against the rotation invariants.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GrrError::InvalidRotation {
                ortho_err: f64::NAN,
                det: f64::NAN,
            });
        }
        let ortho_err = (m.transpose() * m - Matrix3::identity()).amax();
        let det = m.determinant();
        if ortho_err > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
            return Err(GrrError::InvalidRotation { ortho_err, det });
        }
        Ok(Rotation(m))
    }

    /// Wraps a matrix the caller knows to be a rotation (e.g. `U·S·Vᵀ` from an SVD).
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Rotation of `angle` radians about `axis` (Rodrigues). A zero axis yields identity.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let norm = axis.norm();
        if norm == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        let k = axis / norm;
        let kx = k.cross_matrix();
        let m = Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos());
        Rotation(m)
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle)
    }

    /// From a quaternion `(w, x, y, z)`; the quaternion is normalized first.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(GrrError::InvalidInput(
                "quaternion must be finite and nonzero".into(),
            ));
        }
        let uq = UnitQuaternion::from_quaternion(q);
        Ok(Rotation(*uq.to_rotation_matrix().matrix()))
    }

    /// Quaternion `(w, x, y, z)` with `w ≥ 0`.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let uq = UnitQuaternion::from_matrix(&self.0);
        let q = uq.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.w, s * q.i, s * q.j, s * q.k]
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn mul(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }
}

/// Angle of the relative rotation `aᵀb`, in `[0, π]`.
///
/// Evaluated as `atan2(sin θ, cos θ)` with `cos θ = (tr(aᵀb) − 1)/2` and
/// `sin θ` taken from the skew part of `aᵀb`. This agrees with the usual
/// `arccos` form everywhere but keeps full precision near 0 and π, where
/// `arccos` loses about half the significant digits.
pub fn geodesic_distance(a: &Rotation, b: &Rotation) -> f64 {
    let rel = a.0.transpose() * b.0;
    let cos = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let skew = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin = (0.5 * skew.norm()).min(1.0);
    sin.atan2(cos)
}

/// Camera-to-world rigid transform: `x_world = r · x_cam + t`, with `t` the
/// camera center in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub r: Rotation,
    pub t: Vector3<f64>,
}

impl Pose {
    pub fn new(r: Rotation, t: Vector3<f64>) -> Result<Self> {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(GrrError::InvalidInput("translation must be finite".into()));
        }
        Ok(Pose { r, t })
    }

    pub fn identity() -> Self {
        Pose {
            r: Rotation::identity(),
            t: Vector3::zeros(),
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.r.inverse();
        Pose {
            t: -(rt.apply(&self.t)),
            r: rt,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r.apply(p) + self.t
    }

    /// 4x4 homogeneous matrix.
    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.r.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.t);
        m
    }
}

/// `p ∘ q`: apply `q` first, then `p`.
pub fn compose(p: &Pose, q: &Pose) -> Pose {
    Pose {
        r: p.r.mul(&q.r),
        t: p.r.apply(&q.t) + p.t,
    }
}

/// A unit-norm 3-vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVec3(Vector3<f64>);

impl UnitVec3 {
    pub fn new(v: Vector3<f64>) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || (n - 1.0).abs() > ORTHO_TOL {
            return Err(GrrError::InvalidInput(format!("vector norm {n} is not 1")));
        }
        Ok(UnitVec3(v))
    }

    /// Normalizes `v`; fails on zero or non-finite input.
    pub fn normalize(v: Vector3<f64>) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(GrrError::InvalidInput(
                "cannot normalize zero vector".into(),
            ));
        }
        Ok(UnitVec3(v / n))
    }

    pub fn into_inner(self) -> Vector3<f64> {
        self.0
    }

    pub fn as_vec(&self) -> &Vector3<f64> {
        &self.0
    }
}

/// Root of all randomness in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Seed {
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Independent child seed keyed by `index` (splitmix64 finalizer over
    /// the pair). Used to key per-frame streams so results do not depend on
    /// execution order.
    pub fn derive(&self, index: u64) -> Seed {
        let mut z = self
            .0
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Seed(z ^ (z >> 31))
    }
}

/// Uniform rotation drawn from `rng` (normalized 4D Gaussian quaternion).
pub fn sample_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    loop {
        let w: f64 = rng.sample(StandardNormal);
        let x: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        if let Ok(r) = Rotation::from_quaternion(w, x, y, z) {
            return r;
        }
    }
}

/// Uniform direction on the unit sphere.
pub fn sample_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Uniformly distributed rotation, deterministic per seed.
pub fn random_rotation(seed: Seed) -> Rotation {
    sample_rotation(&mut seed.rng())
}

/// Formats a pose as 12 numbers: row-major rotation, then `t`.
pub fn format_pose(pose: &Pose) -> String {
    let m = pose.r.matrix();
    let mut vals = Vec::with_capacity(12);
    for i in 0..3 {
        for j in 0..3 {
            vals.push(m[(i, j)]);
        }
    }
    vals.extend(pose.t.iter().copied());
    vals.iter()
        .map(|v| format!("{v:.16e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_pose(line: &str) -> Result<Pose> {
    let vals = line
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|e| GrrError::Parse(format!("bad number {tok:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != 12 {
        return Err(GrrError::Parse(format!(
            "expected 12 numbers per pose line, got {}",
            vals.len()
        )));
    }
    let m = Matrix3::from_row_slice(&vals[..9]);
    Pose::new(
        Rotation::from_matrix(m)?,
        Vector3::new(vals[9], vals[10], vals[11]),
    )
}

pub fn write_poses<W: Write>(mut out: W, poses: &[Pose]) -> std::io::Result<()> {
    for p in poses {
        writeln!(out, "{}", format_pose(p))?;
    }
    Ok(())
}

/// Reads one pose per line; blank lines and `#` comments are skipped.
pub fn read_poses<R: BufRead>(input: R) -> Result<Vec<Pose>> {
    let mut poses = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| GrrError::Parse(e.to_string()))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let pose = parse_pose(trimmed)
            .map_err(|e| GrrError::Parse(format!("line {}: {e}", lineno + 1)))?;
        poses.push(pose);
    }
    Ok(poses)
}
