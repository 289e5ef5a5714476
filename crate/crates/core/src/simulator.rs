//! Synthetic ground truth and perturbed "predictions" for exercising the
//! solvers without a network.
//!
//! Every random draw is keyed by `(seed, frame)` and, within a frame, by
//! stream (rays, points, per-patch scales), so runs are reproducible
//! regardless of thread count and changing one noise source never shifts
//! the draws of another.

use std::io::Write;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{
    canonical_points, canonical_rays, world_points, world_rays, PatchGrid, PointMap, RayBundle,
};
use crate::error::{GrrError, Result};
use crate::geometry::{geodesic_distance, sample_unit_vector, Pose, Rotation, Seed};
use crate::solver::recover_pose;
use crate::stats::median;

const RAY_STREAM: u64 = 0;
const POINT_STREAM: u64 = 1;
const SCALE_STREAM: u64 = 2;

/// Pose augmentation by perturbing base poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosePerturbSpec {
    pub sigma_t: f64,
    pub sigma_r: f64,
    pub count: usize,
    #[serde(default)]
    pub seed: Seed,
}

impl PosePerturbSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_t >= 0.0 && self.sigma_r >= 0.0) || self.count == 0 {
            return Err(GrrError::InvalidInput(
                "perturbation needs sigmas >= 0 and count >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Same sigma for every patch.
    #[default]
    IidGaussian,
    /// Each patch's sigmas are scaled by `|z|·√(π/2)`, `z ~ N(0, 1)` drawn
    /// once per patch (mean scale 1), shared by its ray and point.
    PerPatchScaled,
}

impl NoiseMode {
    pub fn name(self) -> &'static str {
        match self {
            NoiseMode::IidGaussian => "iid_gaussian",
            NoiseMode::PerPatchScaled => "per_patch_scaled",
        }
    }
}

/// Noise applied to ground-truth representations to imitate prediction error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Angular std of ray perturbations, radians.
    #[serde(default)]
    pub ray_sigma: f64,
    /// Positional std of point perturbations, scene units.
    #[serde(default)]
    pub point_sigma: f64,
    #[serde(default)]
    pub point_bias: Option<[f64; 3]>,
    #[serde(default)]
    pub mode: NoiseMode,
    #[serde(default)]
    pub seed: Seed,
}

impl NoiseSpec {
    pub fn zero(seed: Seed) -> Self {
        NoiseSpec {
            ray_sigma: 0.0,
            point_sigma: 0.0,
            point_bias: None,
            mode: NoiseMode::IidGaussian,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bias_ok = self
            .point_bias
            .is_none_or(|b| b.iter().all(|v| v.is_finite()));
        if !(self.ray_sigma >= 0.0 && self.point_sigma >= 0.0) || !bias_ok {
            return Err(GrrError::InvalidInput(
                "noise sigmas must be >= 0 and bias finite".into(),
            ));
        }
        Ok(())
    }

    fn bias(&self) -> Vector3<f64> {
        self.point_bias.map_or(Vector3::zeros(), Vector3::from)
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// `count` perturbed copies of every base pose, in base order. Translation
/// gets `N(0, σ_t²I)`; rotation is right-multiplied (camera frame) by a
/// random-axis rotation of angle `|N(0, σ_r²)|`.
pub fn sample_poses(base: &[Pose], spec: &PosePerturbSpec) -> Result<Vec<Pose>> {
    if base.is_empty() {
        return Err(GrrError::InvalidInput("no base poses".into()));
    }
    spec.validate()?;
    let mut out = Vec::with_capacity(base.len() * spec.count);
    for (b, pose) in base.iter().enumerate() {
        let mut rng = spec.seed.derive(b as u64).rng();
        for _ in 0..spec.count {
            let dt = Vector3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng));
            let axis = sample_unit_vector(&mut rng);
            let angle = normal(&mut rng).abs();
            let r = if spec.sigma_r > 0.0 {
                pose.r
                    .mul(&Rotation::from_axis_angle(&axis, angle * spec.sigma_r))
            } else {
                pose.r
            };
            let t = if spec.sigma_t > 0.0 {
                pose.t + dt * spec.sigma_t
            } else {
                pose.t
            };
            out.push(Pose { r, t });
        }
    }
    Ok(out)
}

/// Perturbs rays and points with the spec's own seed.
pub fn perturb_representations(
    d_gt: &RayBundle,
    p_gt: &PointMap,
    spec: &NoiseSpec,
) -> Result<(RayBundle, PointMap)> {
    perturb_with_seed(d_gt, p_gt, spec, spec.seed)
}

/// Each ray is rotated by `|N(0, σ²)|` about a random axis orthogonal to it,
/// so the angular deviation equals the drawn angle. Each point gets
/// `N(0, σ²I)` plus the bias.
pub fn perturb_with_seed(
    d_gt: &RayBundle,
    p_gt: &PointMap,
    spec: &NoiseSpec,
    seed: Seed,
) -> Result<(RayBundle, PointMap)> {
    spec.validate()?;
    if d_gt.len() != p_gt.len() {
        return Err(GrrError::LengthMismatch {
            expected: d_gt.len(),
            actual: p_gt.len(),
        });
    }
    let n = d_gt.len();
    let scales: Vec<f64> = match spec.mode {
        NoiseMode::IidGaussian => vec![1.0; n],
        NoiseMode::PerPatchScaled => {
            let mut rng = seed.derive(SCALE_STREAM).rng();
            let k = (std::f64::consts::PI / 2.0).sqrt();
            (0..n).map(|_| normal(&mut rng).abs() * k).collect()
        }
    };

    let rays = if spec.ray_sigma > 0.0 {
        let mut rng = seed.derive(RAY_STREAM).rng();
        d_gt.dirs
            .iter()
            .zip(&scales)
            .map(|(d, s)| {
                let u = d.normalize();
                let mut axis = sample_unit_vector(&mut rng);
                axis -= u * u.dot(&axis);
                let an = axis.norm();
                let angle = normal(&mut rng).abs() * spec.ray_sigma * s;
                if an < 1e-9 {
                    // Draw landed on the ray itself; leave this ray alone.
                    return u;
                }
                let k = axis / an;
                (u * angle.cos() + k.cross(&u) * angle.sin()).normalize()
            })
            .collect()
    } else {
        d_gt.dirs.clone()
    };

    let bias = spec.bias();
    let points = if spec.point_sigma > 0.0 {
        let mut rng = seed.derive(POINT_STREAM).rng();
        p_gt.pts
            .iter()
            .zip(&scales)
            .map(|(p, s)| {
                let e = Vector3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng));
                p + e * (spec.point_sigma * s) + bias
            })
            .collect()
    } else if spec.point_bias.is_some() {
        p_gt.pts.iter().map(|p| p + bias).collect()
    } else {
        p_gt.pts.clone()
    };
    Ok((RayBundle::new(rays), PointMap::new(points)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameStatus {
    Ok,
    DegenerateRay,
    DegeneratePoint,
    Failed,
}

impl FrameStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            FrameStatus::Ok => "ok",
            FrameStatus::DegenerateRay => "degenerate_ray",
            FrameStatus::DegeneratePoint => "degenerate_point",
            FrameStatus::Failed => "failed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ok" => Some(FrameStatus::Ok),
            "degenerate_ray" => Some(FrameStatus::DegenerateRay),
            "degenerate_point" => Some(FrameStatus::DegeneratePoint),
            "failed" => Some(FrameStatus::Failed),
            _ => None,
        }
    }

    pub fn from_error(err: &GrrError) -> Self {
        use crate::error::Branch;
        match err {
            GrrError::DegenerateConfiguration {
                branch: Branch::Ray,
                ..
            } => FrameStatus::DegenerateRay,
            GrrError::DegenerateConfiguration {
                branch: Branch::Point,
                ..
            } => FrameStatus::DegeneratePoint,
            _ => FrameStatus::Failed,
        }
    }
}

/// Errors for one frame; NaN when the frame failed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameRecord {
    pub frame: usize,
    pub rot_err_rays_deg: f64,
    pub rot_err_points_deg: f64,
    pub trans_err: f64,
    pub status: FrameStatus,
}

impl FrameRecord {
    /// Compares an estimate against ground truth.
    pub fn from_estimate(frame: usize, est: &crate::solver::PoseEstimate, gt: &Pose) -> Self {
        FrameRecord {
            frame,
            rot_err_rays_deg: geodesic_distance(&est.pose.r, &gt.r).to_degrees(),
            rot_err_points_deg: geodesic_distance(&est.rotation_from_points, &gt.r).to_degrees(),
            trans_err: (est.pose.t - gt.t).norm(),
            status: FrameStatus::Ok,
        }
    }

    pub fn failed(frame: usize, status: FrameStatus) -> Self {
        FrameRecord {
            frame,
            rot_err_rays_deg: f64::NAN,
            rot_err_points_deg: f64::NAN,
            trans_err: f64::NAN,
            status,
        }
    }
}

/// Per-frame records plus medians over the successful frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialReport {
    pub records: Vec<FrameRecord>,
    pub median_rot_err_rays_deg: Option<f64>,
    pub median_rot_err_points_deg: Option<f64>,
    pub median_trans_err: Option<f64>,
}

impl TrialReport {
    pub fn from_records(records: Vec<FrameRecord>) -> Self {
        let ok: Vec<&FrameRecord> = records
            .iter()
            .filter(|r| r.status == FrameStatus::Ok)
            .collect();
        let col = |f: fn(&FrameRecord) -> f64| median(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
        TrialReport {
            median_rot_err_rays_deg: col(|r| r.rot_err_rays_deg),
            median_rot_err_points_deg: col(|r| r.rot_err_points_deg),
            median_trans_err: col(|r| r.trans_err),
            records,
        }
    }

    pub fn failure_count(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.status != FrameStatus::Ok)
            .count()
    }

    /// `median(points-branch) − median(ray-branch)` rotation error, degrees.
    pub fn rotation_gap_deg(&self) -> Option<f64> {
        Some(self.median_rot_err_points_deg? - self.median_rot_err_rays_deg?)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "frame,rot_err_rays_deg,rot_err_points_deg,trans_err,status"
        )?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.frame,
                r.rot_err_rays_deg,
                r.rot_err_points_deg,
                r.trans_err,
                r.status.as_str()
            )?;
        }
        Ok(())
    }
}

/// Ground-truth world representations for each pose, then perturbation and
/// decoupled recovery. Frame `k` uses noise seed `noise.seed.derive(k)`.
pub fn run_trial(grid: &PatchGrid, poses: &[Pose], noise: &NoiseSpec) -> Result<TrialReport> {
    noise.validate()?;
    let rays_cam = canonical_rays(grid)?;
    let pts_cam = canonical_points(&rays_cam);
    let records = poses
        .par_iter()
        .enumerate()
        .map(|(k, gt)| {
            let d_gt = world_rays(gt, &rays_cam);
            let p_gt = world_points(gt, &pts_cam);
            let solved = perturb_with_seed(&d_gt, &p_gt, noise, noise.seed.derive(k as u64))
                .and_then(|(d, p)| recover_pose(&rays_cam, &pts_cam, &d, &p));
            match solved {
                Ok(est) => FrameRecord::from_estimate(k, &est, gt),
                Err(e) => FrameRecord::failed(k, FrameStatus::from_error(&e)),
            }
        })
        .collect();
    Ok(TrialReport::from_records(records))
}

/// One trial per noise cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub cells: Vec<(NoiseSpec, TrialReport)>,
}

pub fn ablation_sweep(
    grid: &PatchGrid,
    poses: &[Pose],
    noise_grid: &[NoiseSpec],
) -> Result<AblationTable> {
    if noise_grid.is_empty() {
        return Err(GrrError::InvalidInput("empty noise grid".into()));
    }
    let cells = noise_grid
        .iter()
        .map(|spec| Ok((*spec, run_trial(grid, poses, spec)?)))
        .collect::<Result<_>>()?;
    Ok(AblationTable { cells })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

impl AblationTable {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "cell,ray_sigma,point_sigma,bias_x,bias_y,bias_z,mode,seed,frames,failures,\
             median_rot_err_rays_deg,median_rot_err_points_deg,median_trans_err"
        )?;
        for (k, (spec, rep)) in self.cells.iter().enumerate() {
            let b = spec.point_bias.unwrap_or([0.0; 3]);
            writeln!(
                out,
                "{k},{},{},{},{},{},{},{},{},{},{},{},{}",
                spec.ray_sigma,
                spec.point_sigma,
                b[0],
                b[1],
                b[2],
                spec.mode.name(),
                spec.seed.0,
                rep.records.len(),
                rep.failure_count(),
                fmt_opt(rep.median_rot_err_rays_deg),
                fmt_opt(rep.median_rot_err_points_deg),
                fmt_opt(rep.median_trans_err),
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use crate::geometry::sample_rotation;

    fn grid(n: usize) -> PatchGrid {
        PatchGrid::new(
            n,
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

    fn random_poses(seed: u64, n: usize) -> Vec<Pose> {
        let mut rng = Seed(seed).rng();
        (0..n)
            .map(|_| {
                let r = sample_rotation(&mut rng);
                let t = Vector3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                );
                Pose { r, t }
            })
            .collect()
    }

    #[test]
    fn zero_perturbation_copies_poses() {
        let base = random_poses(1, 3);
        let spec = PosePerturbSpec {
            sigma_t: 0.0,
            sigma_r: 0.0,
            count: 4,
            seed: Seed(2),
        };
        let out = sample_poses(&base, &spec).unwrap();
        assert_eq!(out.len(), 12);
        for (i, p) in out.iter().enumerate() {
            assert_eq!(*p, base[i / 4]);
        }
    }

    #[test]
    fn pose_sampling_is_deterministic_and_centered() {
        let base = vec![Pose::identity()];
        let spec = PosePerturbSpec {
            sigma_t: 0.5,
            sigma_r: 0.1,
            count: 10_000,
            seed: Seed(3),
        };
        let a = sample_poses(&base, &spec).unwrap();
        assert_eq!(a, sample_poses(&base, &spec).unwrap());
        let mean: Vector3<f64> = a.iter().map(|p| p.t).sum::<Vector3<f64>>() / a.len() as f64;
        assert!(mean.amax() < 3.0 * spec.sigma_t / 100.0, "{mean:?}");
        assert!(sample_poses(&[], &spec).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let rays = canonical_rays(&grid(4)).unwrap();
        let pts = canonical_points(&rays);
        let (d, p) = perturb_representations(&rays, &pts, &NoiseSpec::zero(Seed(1))).unwrap();
        assert_eq!(d, rays);
        assert_eq!(p, pts);
    }

    #[test]
    fn bias_only_shifts_points_exactly() {
        let rays = canonical_rays(&grid(4)).unwrap();
        let pts = canonical_points(&rays);
        let spec = NoiseSpec {
            point_bias: Some([1.0, 0.0, 0.0]),
            ..NoiseSpec::zero(Seed(1))
        };
        let (d, p) = perturb_representations(&rays, &pts, &spec).unwrap();
        assert_eq!(d, rays);
        for (a, b) in p.pts.iter().zip(&pts.pts) {
            assert_eq!(*a, b + Vector3::new(1.0, 0.0, 0.0));
        }
    }

    #[test]
    fn ray_noise_has_half_normal_mean() {
        let n = 10_000;
        let mut rng = Seed(5).rng();
        let dirs: Vec<_> = (0..n).map(|_| sample_unit_vector(&mut rng)).collect();
        let rays = RayBundle::new(dirs);
        let pts = PointMap::new(rays.dirs.clone());
        let sigma = 0.01;
        let spec = NoiseSpec {
            ray_sigma: sigma,
            ..NoiseSpec::zero(Seed(6))
        };
        let (d, _) = perturb_representations(&rays, &pts, &spec).unwrap();
        let mean: f64 = d
            .dirs
            .iter()
            .zip(&rays.dirs)
            .map(|(a, b)| a.cross(b).norm().atan2(a.dot(b)))
            .sum::<f64>()
            / n as f64;
        let expected = sigma * (2.0 / std::f64::consts::PI).sqrt();
        assert!(
            (mean - expected).abs() < 0.05 * expected,
            "{mean} vs {expected}"
        );
        assert!(d.dirs.iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn per_patch_scaled_mode_runs() {
        let rays = canonical_rays(&grid(4)).unwrap();
        let pts = canonical_points(&rays);
        let spec = NoiseSpec {
            ray_sigma: 0.01,
            point_sigma: 0.01,
            mode: NoiseMode::PerPatchScaled,
            ..NoiseSpec::zero(Seed(1))
        };
        let (d, p) = perturb_representations(&rays, &pts, &spec).unwrap();
        assert_ne!(d, rays);
        assert_ne!(p, pts);
    }

    #[test]
    fn zero_noise_trial_inverts_exactly() {
        let rep = run_trial(&grid(16), &random_poses(9, 20), &NoiseSpec::zero(Seed(0))).unwrap();
        for r in &rep.records {
            assert_eq!(r.status, FrameStatus::Ok);
            assert!(r.rot_err_rays_deg < 1e-7);
            assert!(r.rot_err_points_deg < 1e-7);
            assert!(r.trans_err < 1e-9);
        }
    }

    #[test]
    fn bias_trial_moves_only_translation() {
        let spec = NoiseSpec {
            point_bias: Some([0.5, 0.0, 0.0]),
            ..NoiseSpec::zero(Seed(0))
        };
        let poses = random_poses(10, 20);
        let rep = run_trial(&grid(16), &poses, &spec).unwrap();
        let clean = run_trial(&grid(16), &poses, &NoiseSpec::zero(Seed(0))).unwrap();
        for (r, c) in rep.records.iter().zip(&clean.records) {
            assert_eq!(r.rot_err_rays_deg, c.rot_err_rays_deg);
            assert!(r.rot_err_rays_deg < 1e-7);
            assert!((r.trans_err - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn medians_match_records() {
        let spec = NoiseSpec {
            ray_sigma: 0.01,
            point_sigma: 0.02,
            ..NoiseSpec::zero(Seed(4))
        };
        let rep = run_trial(&grid(8), &random_poses(11, 25), &spec).unwrap();
        let rays: Vec<f64> = rep.records.iter().map(|r| r.rot_err_rays_deg).collect();
        assert_eq!(rep.median_rot_err_rays_deg, median(&rays));
        assert!(rep.rotation_gap_deg().is_some());
    }

    #[test]
    fn sweep_csv_is_deterministic() {
        let poses = random_poses(12, 30);
        let cells: Vec<NoiseSpec> = [0.0, 0.01]
            .iter()
            .map(|&s| NoiseSpec {
                ray_sigma: s,
                point_sigma: s,
                ..NoiseSpec::zero(Seed(7))
            })
            .collect();
        let render = || {
            let table = ablation_sweep(&grid(8), &poses, &cells).unwrap();
            let mut buf = Vec::new();
            table.write_csv(&mut buf).unwrap();
            buf
        };
        let a = render();
        assert_eq!(a, render());
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 3);
        assert!(ablation_sweep(&grid(8), &poses, &[]).is_err());
    }
}
