//! Seeded random problem instances for gradient checks and benchmarks.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::camera::{
    canonical_points, canonical_rays, world_points, world_rays, Intrinsics, PatchGrid, PointMap,
    RayBundle,
};
use crate::geometry::{sample_rotation, sample_unit_vector, Pose, Seed};
use crate::grad::{GradOp, LossInstance};
use crate::losses::{FrameLossInputs, LossWeights, NeighborSet, NormP, TranslationPenalty};
use crate::simulator::{perturb_with_seed, NoiseMode, NoiseSpec};
use crate::solver::AlignmentProblem;
use crate::{GrrError, Result};

/// A solver instance with `size` correspondences.
///
/// For [`GradOp::Rotation`] the sources are unit directions and the targets
/// their rotated copies; for [`GradOp::Rigid`] the sources are points in the
/// unit cube and the targets get a translation as well. Targets are then
/// displaced by `noise` along random directions. `collinear` puts every
/// source on one line through the origin (the rotation about that line is
/// unobservable).
pub fn random_alignment_problem(
    op: GradOp,
    size: usize,
    noise: f64,
    collinear: bool,
    seed: Seed,
) -> Result<AlignmentProblem> {
    if op == GradOp::LossTotal {
        return Err(GrrError::InvalidInput(
            "loss_total is not an alignment op".into(),
        ));
    }
    let mut rng = seed.rng();
    let r = sample_rotation(&mut rng);
    let t = match op {
        GradOp::Rigid => Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
        _ => Vector3::zeros(),
    };
    let axis = sample_unit_vector(&mut rng);
    let src: Vec<Vector3<f64>> = (0..size)
        .map(|k| match (op, collinear) {
            (GradOp::Rotation, true) => axis,
            (_, true) => axis * (k as f64 - size as f64 / 2.0),
            (GradOp::Rotation, false) => sample_unit_vector(&mut rng),
            (_, false) => Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
        })
        .collect();
    let tgt = src
        .iter()
        .map(|s| {
            let jitter = if collinear {
                Vector3::zeros()
            } else {
                sample_unit_vector(&mut rng) * noise
            };
            r.apply(s) + t + jitter
        })
        .collect();
    AlignmentProblem::new(src, tgt)
}

/// Ground truth and predictions for one frame.
#[derive(Debug, Clone)]
pub struct FrameFixture {
    pub gt_pose: Pose,
    pub rays_gt: RayBundle,
    pub pts_gt: PointMap,
    pub rays_pred: RayBundle,
    pub pts_pred: PointMap,
}

/// Owned data behind a [`LossInstance`]: an `n × n` patch grid, one
/// synthetic and one real frame with noisy predictions, and random logits.
#[derive(Debug, Clone)]
pub struct LossFixture {
    pub rays_cam: RayBundle,
    pub pts_cam: PointMap,
    pub neighbors: NeighborSet,
    pub syn: FrameFixture,
    pub real: FrameFixture,
    pub syn_logits: (f64, f64),
    pub real_logits: (f64, f64),
    pub weights: LossWeights,
    pub p: NormP,
    pub penalty: TranslationPenalty,
}

impl LossFixture {
    /// `n ≥ 2` patches per side; ray and point noise both have std `noise`.
    pub fn random(n: usize, noise: f64, p: NormP, seed: Seed) -> Result<Self> {
        if n < 2 {
            return Err(GrrError::InvalidInput(format!(
                "loss instance needs n >= 2, got {n}"
            )));
        }
        let side = 16 * n;
        let grid = PatchGrid::new(
            n,
            Intrinsics {
                fx: side as f64,
                fy: side as f64,
                cx: side as f64 / 2.0,
                cy: side as f64 / 2.0,
                width: side,
                height: side,
            },
        )?;
        let rays_cam = canonical_rays(&grid)?;
        let pts_cam = canonical_points(&rays_cam);
        let spec = NoiseSpec {
            ray_sigma: noise,
            point_sigma: noise,
            point_bias: None,
            mode: NoiseMode::IidGaussian,
            seed,
        };
        let frame = |k: u64| -> Result<FrameFixture> {
            let mut rng = seed.derive(k).rng();
            let t = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
            let gt_pose = Pose::new(sample_rotation(&mut rng), t)?;
            let rays_gt = world_rays(&gt_pose, &rays_cam);
            let pts_gt = world_points(&gt_pose, &pts_cam);
            let (rays_pred, pts_pred) =
                perturb_with_seed(&rays_gt, &pts_gt, &spec, seed.derive(k + 10))?;
            Ok(FrameFixture {
                gt_pose,
                rays_gt,
                pts_gt,
                rays_pred,
                pts_pred,
            })
        };
        let syn = frame(0)?;
        let real = frame(1)?;
        let mut rng = seed.derive(2).rng();
        let mut logit = || rng.sample::<f64, _>(StandardNormal);
        Ok(LossFixture {
            neighbors: NeighborSet::four_connected(n),
            rays_cam,
            pts_cam,
            syn,
            real,
            syn_logits: (logit(), logit()),
            real_logits: (logit(), logit()),
            weights: LossWeights::default(),
            p,
            penalty: TranslationPenalty::Norm,
        })
    }

    fn inputs<'a>(&'a self, f: &'a FrameFixture) -> FrameLossInputs<'a> {
        FrameLossInputs {
            rays_cam: &self.rays_cam,
            pts_cam: &self.pts_cam,
            rays_gt: &f.rays_gt,
            pts_gt: &f.pts_gt,
            gt_pose: &f.gt_pose,
            neighbors: &self.neighbors,
        }
    }

    pub fn instance(&self) -> LossInstance<'_> {
        LossInstance {
            syn: self.inputs(&self.syn),
            real: self.inputs(&self.real),
            syn_pred: (self.syn.rays_pred.clone(), self.syn.pts_pred.clone()),
            real_pred: (self.real.rays_pred.clone(), self.real.pts_pred.clone()),
            syn_logits: self.syn_logits,
            real_logits: self.real_logits,
            weights: self.weights,
            p: self.p,
            penalty: self.penalty,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{finite_diff_check, GradInstance, Probe};

    #[test]
    fn alignment_instances_are_seeded() {
        let a = random_alignment_problem(GradOp::Rigid, 8, 0.1, false, Seed(3)).unwrap();
        let b = random_alignment_problem(GradOp::Rigid, 8, 0.1, false, Seed(3)).unwrap();
        assert_eq!(a.source(), b.source());
        assert_eq!(a.target(), b.target());
    }

    #[test]
    fn collinear_instance_flags_jacobian() {
        for op in [GradOp::Rotation, GradOp::Rigid] {
            let prob = random_alignment_problem(op, 12, 0.1, true, Seed(4)).unwrap();
            let inst = GradInstance::Alignment {
                problem: prob,
                probe: Probe::Cotangent(Seed(5)),
            };
            assert!(matches!(
                finite_diff_check(op, &inst, 1e-5),
                Err(GrrError::NearSingularJacobian { .. })
            ));
        }
    }

    #[test]
    fn loss_fixture_passes_gradcheck() {
        let fx = LossFixture::random(3, 0.05, NormP::L2, Seed(6)).unwrap();
        let rep = finite_diff_check(
            GradOp::LossTotal,
            &GradInstance::Loss(Box::new(fx.instance())),
            1e-5,
        )
        .unwrap();
        assert_eq!(rep.n_params(), 2 * 2 * 9 * 3 + 4);
        assert!(rep.max_rel_err < 1e-4, "{}", rep.max_rel_err);
    }

    #[test]
    fn loss_needs_two_patches_per_side() {
        assert!(LossFixture::random(1, 0.0, NormP::L2, Seed(0)).is_err());
    }
}
