//! Closed-form pose recovery from rays and points.
//!
//! Both sub-problems are Kabsch alignments. Rotation comes from the ray
//! bundle (rotation-only Procrustes), translation from rigid registration of
//! the pointmap; the rotation estimated by the point branch is kept only for
//! diagnostics and ablations.

use nalgebra::{Matrix3, Vector3, SVD};

use crate::camera::{PointMap, RayBundle};
use crate::error::{Branch, GrrError, Result};
use crate::geometry::{Pose, Rotation};

/// `σ₂/σ₁` below this makes the rotation unobservable.
pub const DEGENERACY_RATIO: f64 = 1e-9;

/// Weighted correspondences `source_i → target_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentProblem {
    source: Vec<Vector3<f64>>,
    target: Vec<Vector3<f64>>,
    weights: Option<Vec<f64>>,
}

impl AlignmentProblem {
    pub fn new(source: Vec<Vector3<f64>>, target: Vec<Vector3<f64>>) -> Result<Self> {
        Self::build(source, target, None)
    }

    pub fn weighted(
        source: Vec<Vector3<f64>>,
        target: Vec<Vector3<f64>>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        Self::build(source, target, Some(weights))
    }

    fn build(
        source: Vec<Vector3<f64>>,
        target: Vec<Vector3<f64>>,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        if source.len() != target.len() {
            return Err(GrrError::LengthMismatch {
                expected: source.len(),
                actual: target.len(),
            });
        }
        if source.len() < 3 {
            return Err(GrrError::InvalidInput(format!(
                "alignment needs at least 3 correspondences, got {}",
                source.len()
            )));
        }
        let finite = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
        if !source.iter().all(finite) || !target.iter().all(finite) {
            return Err(GrrError::InvalidInput("non-finite coordinates".into()));
        }
        if let Some(w) = &weights {
            if w.len() != source.len() {
                return Err(GrrError::LengthMismatch {
                    expected: source.len(),
                    actual: w.len(),
                });
            }
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(GrrError::InvalidInput(
                    "weights must be finite and nonnegative".into(),
                ));
            }
            if w.iter().sum::<f64>() <= 0.0 {
                return Err(GrrError::InvalidInput(
                    "weights must not sum to zero".into(),
                ));
            }
        }
        Ok(AlignmentProblem {
            source,
            target,
            weights,
        })
    }

    pub fn source(&self) -> &[Vector3<f64>] {
        &self.source
    }

    pub fn target(&self) -> &[Vector3<f64>] {
        &self.target
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Weight of correspondence `i` (1 when unweighted).
    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    pub fn total_weight(&self) -> f64 {
        self.weights
            .as_ref()
            .map_or(self.source.len() as f64, |w| w.iter().sum())
    }

    /// Cross-covariance `H = Σ wᵢ·targetᵢ·sourceᵢᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        self.source
            .iter()
            .zip(&self.target)
            .enumerate()
            .fold(Matrix3::zeros(), |acc, (i, (s, t))| {
                acc + self.weight(i) * t * s.transpose()
            })
    }

    pub fn source_centroid(&self) -> Vector3<f64> {
        self.centroid(&self.source)
    }

    pub fn target_centroid(&self) -> Vector3<f64> {
        self.centroid(&self.target)
    }

    fn centroid(&self, pts: &[Vector3<f64>]) -> Vector3<f64> {
        let sum = pts
            .iter()
            .enumerate()
            .fold(Vector3::zeros(), |acc, (i, p)| acc + self.weight(i) * p);
        sum / self.total_weight()
    }

    /// Same weights, both sides centroid-subtracted.
    pub fn centered(&self) -> AlignmentProblem {
        let cs = self.source_centroid();
        let ct = self.target_centroid();
        AlignmentProblem {
            source: self.source.iter().map(|p| p - cs).collect(),
            target: self.target.iter().map(|p| p - ct).collect(),
            weights: self.weights.clone(),
        }
    }

    /// Same correspondences with every weight multiplied by `c`.
    pub fn scaled_weights(&self, c: f64) -> Result<AlignmentProblem> {
        let w = (0..self.len()).map(|i| c * self.weight(i)).collect();
        Self::weighted(self.source.clone(), self.target.clone(), w)
    }

    /// `Σ wᵢ‖R·sourceᵢ + t − targetᵢ‖²`.
    pub fn cost(&self, r: &Rotation, t: &Vector3<f64>) -> f64 {
        self.source
            .iter()
            .zip(&self.target)
            .enumerate()
            .map(|(i, (s, y))| self.weight(i) * (r.apply(s) + t - y).norm_squared())
            .sum()
    }
}

/// Singular values and reflection flag of a solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveDiagnostics {
    /// Descending.
    pub singular_values: [f64; 3],
    pub reflection_corrected: bool,
    /// `σ₁/σ₃`, infinite when `σ₃ = 0`.
    pub condition: f64,
}

/// Sorted SVD of a covariance plus the sign fix. `R = U·diag(1,1,d)·Vᵀ`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct KabschFactors {
    pub u: Matrix3<f64>,
    pub v: Matrix3<f64>,
    pub sigma: [f64; 3],
    pub d: f64,
}

impl KabschFactors {
    pub fn from_covariance(h: &Matrix3<f64>) -> Self {
        let svd = SVD::new(*h, true, true);
        let u = svd.u.expect("SVD computed with U");
        let v = svd.v_t.expect("SVD computed with Vᵀ").transpose();
        let s = svd.singular_values;
        let d = if (u * v.transpose()).determinant() < 0.0 {
            -1.0
        } else {
            1.0
        };
        KabschFactors {
            u,
            v,
            sigma: [s[0], s[1], s[2]],
            d,
        }
    }

    pub fn rotation(&self) -> Rotation {
        let s = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, self.d));
        Rotation::from_matrix_unchecked(self.u * s * self.v.transpose())
    }

    pub fn diagnostics(&self) -> SolveDiagnostics {
        let [s1, _, s3] = self.sigma;
        SolveDiagnostics {
            singular_values: self.sigma,
            reflection_corrected: self.d < 0.0,
            condition: if s3 == 0.0 { f64::INFINITY } else { s1 / s3 },
        }
    }

    fn check_degenerate(&self, branch: Branch) -> Result<()> {
        let [s1, s2, _] = self.sigma;
        let ratio = if s1 > 0.0 { s2 / s1 } else { 0.0 };
        if ratio < DEGENERACY_RATIO {
            return Err(GrrError::DegenerateConfiguration { branch, ratio });
        }
        Ok(())
    }
}

/// Rotation minimizing `Σ wᵢ‖R·sourceᵢ − targetᵢ‖²`.
pub fn kabsch_rotation(prob: &AlignmentProblem) -> Result<(Rotation, SolveDiagnostics)> {
    kabsch_tagged(prob, Branch::Direct)
}

fn kabsch_tagged(prob: &AlignmentProblem, branch: Branch) -> Result<(Rotation, SolveDiagnostics)> {
    let f = KabschFactors::from_covariance(&prob.covariance());
    f.check_degenerate(branch)?;
    Ok((f.rotation(), f.diagnostics()))
}

/// Rigid `(R, t)` minimizing `Σ wᵢ‖R·sourceᵢ + t − targetᵢ‖²`, no scale.
pub fn rigid_align(prob: &AlignmentProblem) -> Result<(Pose, SolveDiagnostics)> {
    rigid_tagged(prob, Branch::Direct)
}

fn rigid_tagged(prob: &AlignmentProblem, branch: Branch) -> Result<(Pose, SolveDiagnostics)> {
    let (r, diag) = kabsch_tagged(&prob.centered(), branch)?;
    let t = prob.target_centroid() - r.apply(&prob.source_centroid());
    Ok((Pose { r, t }, diag))
}

/// Output of the decoupled solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEstimate {
    /// Rotation from the ray branch, translation from the point branch.
    pub pose: Pose,
    /// Rotation estimated by the point branch; not part of `pose`.
    pub rotation_from_points: Rotation,
    pub ray_diagnostics: SolveDiagnostics,
    pub point_diagnostics: SolveDiagnostics,
}

pub(crate) fn normalized(dirs: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
    dirs.iter()
        .map(|d| {
            let n = d.norm();
            if n > 0.0 && n.is_finite() {
                Ok(d / n)
            } else {
                Err(GrrError::InvalidInput(
                    "ray with zero or non-finite norm".into(),
                ))
            }
        })
        .collect()
}

/// Ray alignment problem `rays_cam → rays_pred`, both sides renormalized.
pub fn ray_problem(rays_cam: &RayBundle, rays_pred: &RayBundle) -> Result<AlignmentProblem> {
    AlignmentProblem::new(normalized(&rays_cam.dirs)?, normalized(&rays_pred.dirs)?)
}

pub fn point_problem(pts_cam: &PointMap, pts_pred: &PointMap) -> Result<AlignmentProblem> {
    AlignmentProblem::new(pts_cam.pts.clone(), pts_pred.pts.clone())
}

/// Recovers a camera-to-world pose from predicted world-frame rays and points.
pub fn recover_pose(
    rays_cam: &RayBundle,
    pts_cam: &PointMap,
    rays_pred: &RayBundle,
    pts_pred: &PointMap,
) -> Result<PoseEstimate> {
    let n = rays_cam.len();
    for len in [pts_cam.len(), rays_pred.len(), pts_pred.len()] {
        if len != n {
            return Err(GrrError::LengthMismatch {
                expected: n,
                actual: len,
            });
        }
    }
    let (r, ray_diagnostics) = kabsch_tagged(&ray_problem(rays_cam, rays_pred)?, Branch::Ray)?;
    let (point_pose, point_diagnostics) =
        rigid_tagged(&point_problem(pts_cam, pts_pred)?, Branch::Point)?;
    Ok(PoseEstimate {
        pose: Pose { r, t: point_pose.t },
        rotation_from_points: point_pose.r,
        ray_diagnostics,
        point_diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use rand::Rng;

    use super::*;
    use crate::camera::{
        canonical_points, canonical_rays, world_points, world_rays, Intrinsics, PatchGrid,
    };
    use crate::geometry::{geodesic_distance, sample_rotation, sample_unit_vector, Seed};

    fn grid16() -> PatchGrid {
        PatchGrid::new(
            16,
            Intrinsics {
                fx: 220.0,
                fy: 220.0,
                cx: 128.0,
                cy: 128.0,
                width: 256,
                height: 256,
            },
        )
        .unwrap()
    }

    #[test]
    fn identity_alignment() {
        let rays = canonical_rays(&grid16()).unwrap();
        let prob = AlignmentProblem::new(rays.dirs.clone(), rays.dirs.clone()).unwrap();
        let (r, diag) = kabsch_rotation(&prob).unwrap();
        assert!((r.matrix() - Matrix3::identity()).amax() < 1e-12);
        assert!(!diag.reflection_corrected);
        let (pose, _) = rigid_align(&prob).unwrap();
        assert!(geodesic_distance(&pose.r, &Rotation::identity()) < 1e-12);
        assert!(pose.t.amax() < 1e-12);
    }

    #[test]
    fn recovers_known_rotation_on_canonical_bundle() {
        let rays = canonical_rays(&grid16()).unwrap();
        let q = Rotation::rot_z(PI / 2.0);
        let target = rays.dirs.iter().map(|d| q.apply(d)).collect();
        let prob = AlignmentProblem::new(rays.dirs.clone(), target).unwrap();
        let (r, _) = kabsch_rotation(&prob).unwrap();
        assert!((r.matrix() - q.matrix()).amax() < 1e-9);
    }

    #[test]
    fn rigid_recovers_random_pose() {
        let pts = canonical_points(&canonical_rays(&grid16()).unwrap());
        let mut rng = Seed(4).rng();
        let gt = Pose::new(sample_rotation(&mut rng), Vector3::new(1.5, -3.0, 0.25)).unwrap();
        let target = world_points(&gt, &pts);
        let (pose, _) = rigid_align(&AlignmentProblem::new(pts.pts, target.pts).unwrap()).unwrap();
        assert!(geodesic_distance(&pose.r, &gt.r) < 1e-7);
        assert!((pose.t - gt.t).norm() < 1e-9);
    }

    #[test]
    fn coplanar_reflective_input_is_corrected() {
        // Nearly planar source mirrored through its own plane: the best
        // orthogonal map is the reflection diag(1, 1, -1).
        let src = vec![
            Vector3::new(1.0, 0.0, 0.01),
            Vector3::new(0.0, 2.0, -0.02),
            Vector3::new(-1.0, -0.5, 0.015),
            Vector3::new(0.3, -1.2, -0.005),
        ];
        let tgt: Vec<_> = src.iter().map(|p| Vector3::new(p.x, p.y, -p.z)).collect();
        let (pose, diag) = rigid_align(&AlignmentProblem::new(src, tgt).unwrap()).unwrap();
        assert!(diag.reflection_corrected);
        assert!((pose.r.matrix().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_rays_are_degenerate() {
        let d = Vector3::new(0.0, 0.0, 1.0);
        let prob = AlignmentProblem::new(vec![d; 5], vec![d; 5]).unwrap();
        assert!(matches!(
            kabsch_rotation(&prob),
            Err(GrrError::DegenerateConfiguration {
                branch: Branch::Direct,
                ..
            })
        ));
    }

    #[test]
    fn collinear_points_are_degenerate_and_tagged() {
        let rays = canonical_rays(&grid16()).unwrap();
        let line: Vec<_> = (0..256).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let err = recover_pose(
            &rays,
            &PointMap::new(line.clone()),
            &rays,
            &PointMap::new(line),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            GrrError::DegenerateConfiguration {
                branch: Branch::Point,
                ..
            }
        ));
    }

    #[test]
    fn problem_validation() {
        let v = vec![Vector3::zeros(); 3];
        assert!(AlignmentProblem::new(v.clone(), vec![Vector3::zeros(); 2]).is_err());
        assert!(AlignmentProblem::new(v[..2].to_vec(), v[..2].to_vec()).is_err());
        assert!(AlignmentProblem::weighted(v.clone(), v.clone(), vec![0.0; 3]).is_err());
        assert!(AlignmentProblem::weighted(v.clone(), v.clone(), vec![1.0, -1.0, 1.0]).is_err());
    }

    #[test]
    fn point_offset_moves_only_translation() {
        let rays = canonical_rays(&grid16()).unwrap();
        let pts = canonical_points(&rays);
        let mut rng = Seed(8).rng();
        let gt = Pose::new(sample_rotation(&mut rng), Vector3::new(0.2, 0.4, -1.0)).unwrap();
        let wr = world_rays(&gt, &rays);
        let wp = world_points(&gt, &pts);
        let base = recover_pose(&rays, &pts, &wr, &wp).unwrap();
        let delta = sample_unit_vector(&mut rng) * rng.random_range(0.1..5.0);
        let shifted = PointMap::new(wp.pts.iter().map(|p| p + delta).collect());
        let moved = recover_pose(&rays, &pts, &wr, &shifted).unwrap();
        assert_eq!(moved.pose.r, base.pose.r);
        assert!((moved.pose.t - base.pose.t - delta).amax() < 1e-12);
    }
}
