use std::sync::OnceLock;

use grr_core::camera::{
    canonical_points, canonical_rays, world_points, world_rays, Intrinsics, PatchGrid, PointMap,
    RayBundle,
};
use grr_core::geometry::{
    geodesic_distance, random_rotation, sample_rotation, sample_unit_vector, Pose, Rotation, Seed,
};
use grr_core::simulator::{perturb_with_seed, NoiseMode, NoiseSpec};
use grr_core::solver::{kabsch_rotation, recover_pose, rigid_align, AlignmentProblem};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::Rng;

fn grid(n: usize) -> PatchGrid {
    PatchGrid::new(
        n,
        Intrinsics {
            fx: 525.0,
            fy: 525.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        },
    )
    .unwrap()
}

fn canonical8() -> &'static (RayBundle, PointMap) {
    static CELL: OnceLock<(RayBundle, PointMap)> = OnceLock::new();
    CELL.get_or_init(|| {
        let rays = canonical_rays(&grid(8)).unwrap();
        let pts = canonical_points(&rays);
        (rays, pts)
    })
}

fn noisy_frame(seed: u64, sigma: f64) -> (RayBundle, PointMap, RayBundle, PointMap, Pose) {
    let (rays, pts) = canonical8().clone();
    let mut rng = Seed(seed).rng();
    let t = Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0));
    let pose = Pose::new(sample_rotation(&mut rng), t).unwrap();
    let spec = NoiseSpec {
        ray_sigma: sigma,
        point_sigma: sigma,
        point_bias: None,
        mode: NoiseMode::IidGaussian,
        seed: Seed(seed),
    };
    let (d, p) = perturb_with_seed(
        &world_rays(&pose, &rays),
        &world_points(&pose, &pts),
        &spec,
        Seed(seed),
    )
    .unwrap();
    (rays, pts, d, p, pose)
}

fn random_problem(seed: u64, n: usize) -> AlignmentProblem {
    let mut rng = Seed(seed).rng();
    let r = sample_rotation(&mut rng);
    let t = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
    let src: Vec<_> = (0..n)
        .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let tgt = src
        .iter()
        .map(|s| r.apply(s) + t + sample_unit_vector(&mut rng) * 0.3)
        .collect();
    AlignmentProblem::new(src, tgt).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recovery_is_equivariant(seed in any::<u64>(), q in any::<u64>()) {
        let (rays, pts, d, p, _) = noisy_frame(seed, 0.02);
        let q = random_rotation(Seed(q));
        let est = recover_pose(&rays, &pts, &d, &p).unwrap();
        let d_q = RayBundle::new(d.dirs.iter().map(|v| q.apply(v)).collect());
        let p_q = PointMap::new(p.pts.iter().map(|v| q.apply(v)).collect());
        let est_q = recover_pose(&rays, &pts, &d_q, &p_q).unwrap();
        prop_assert!((q.matrix() * est.pose.r.matrix() - est_q.pose.r.matrix()).abs().max() < 1e-9);
        prop_assert!((q.apply(&est.pose.t) - est_q.pose.t).norm() < 1e-9);
    }

    #[test]
    fn weight_scaling_does_not_change_solution(seed in any::<u64>(), c in 1e-3..1e3f64) {
        let prob = random_problem(seed, 10);
        let mut rng = Seed(seed ^ 1).rng();
        let w: Vec<f64> = (0..10).map(|_| rng.random_range(0.1..2.0)).collect();
        let a = AlignmentProblem::weighted(prob.source().to_vec(), prob.target().to_vec(), w).unwrap();
        let b = a.scaled_weights(c).unwrap();
        let (pa, _) = rigid_align(&a).unwrap();
        let (pb, _) = rigid_align(&b).unwrap();
        prop_assert!((pa.r.matrix() - pb.r.matrix()).abs().max() < 1e-10);
        prop_assert!((pa.t - pb.t).norm() < 1e-10);
    }

    #[test]
    fn permutation_does_not_change_solution(seed in any::<u64>(), shift in 1usize..10) {
        let prob = random_problem(seed, 10);
        let mut src = prob.source().to_vec();
        let mut tgt = prob.target().to_vec();
        src.rotate_left(shift);
        tgt.rotate_left(shift);
        src.swap(0, 5);
        tgt.swap(0, 5);
        let perm = AlignmentProblem::new(src, tgt).unwrap();
        let (a, _) = rigid_align(&prob).unwrap();
        let (b, _) = rigid_align(&perm).unwrap();
        prop_assert!((a.r.matrix() - b.r.matrix()).abs().max() < 1e-10);
        prop_assert!((a.t - b.t).norm() < 1e-10);
    }

    #[test]
    fn point_offset_shifts_translation_only(seed in any::<u64>(), off in prop::array::uniform3(-5.0..5.0f64)) {
        let (rays, pts, d, p, _) = noisy_frame(seed, 0.01);
        let off = Vector3::from(off);
        let shifted = PointMap::new(p.pts.iter().map(|v| v + off).collect());
        let a = recover_pose(&rays, &pts, &d, &p).unwrap();
        let b = recover_pose(&rays, &pts, &d, &shifted).unwrap();
        prop_assert_eq!(a.pose.r, b.pose.r);
        prop_assert!((b.pose.t - a.pose.t - off).norm() < 1e-12);
    }

    #[test]
    fn solutions_are_proper_rotations(seed in any::<u64>()) {
        let prob = random_problem(seed, 6);
        let (r, diag) = kabsch_rotation(&prob).unwrap();
        let m = r.matrix();
        prop_assert!((m.transpose() * m - nalgebra::Matrix3::identity()).abs().max() < 1e-12);
        prop_assert!((m.determinant() - 1.0).abs() < 1e-12);
        prop_assert!(diag.singular_values[0] >= diag.singular_values[1]);
        prop_assert!(diag.singular_values[1] >= diag.singular_values[2]);
    }
}

/// Smallest residual among `samples` Haar rotations, each paired with its
/// optimal translation `c_t − R·c_s`.
fn brute_force_min(prob: &AlignmentProblem, samples: usize, seed: Seed) -> f64 {
    let cs = prob.source_centroid();
    let ct = prob.target_centroid();
    let mut rng = seed.rng();
    (0..samples)
        .map(|_| {
            let r = sample_rotation(&mut rng);
            prob.cost(&r, &(ct - r.apply(&cs)))
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn kabsch_beats_sampled_rotations() {
    for k in 0..4 {
        let prob = random_problem(100 + k, 12);
        let (pose, _) = rigid_align(&prob).unwrap();
        let solver = prob.cost(&pose.r, &pose.t);
        let best = brute_force_min(&prob, 20_000, Seed(k));
        assert!(
            solver <= best * (1.0 + 1e-12),
            "instance {k}: {solver} > {best}"
        );
    }
}

#[test]
fn exact_representations_invert_exactly() {
    let g = grid(16);
    let rays = canonical_rays(&g).unwrap();
    let pts = canonical_points(&rays);
    let mut rng = Seed(77).rng();
    for _ in 0..100 {
        let t = Vector3::from_fn(|_, _| rng.random_range(-10.0..10.0));
        let pose = Pose::new(sample_rotation(&mut rng), t).unwrap();
        let est = recover_pose(
            &rays,
            &pts,
            &world_rays(&pose, &rays),
            &world_points(&pose, &pts),
        )
        .unwrap();
        assert!(geodesic_distance(&est.pose.r, &pose.r).to_degrees() < 1e-7);
        assert!((est.pose.t - pose.t).norm() < 1e-9);
    }
}

#[test]
fn near_planar_mirror_is_corrected() {
    let mut rng = Seed(5).rng();
    for _ in 0..20 {
        let src: Vec<Vector3<f64>> = (0..12)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1e-3..1e-3),
                )
            })
            .collect();
        let q = sample_rotation(&mut rng);
        let tgt = src
            .iter()
            .map(|s| q.apply(&Vector3::new(s.x, s.y, -s.z)))
            .collect();
        let prob = AlignmentProblem::new(src, tgt).unwrap();
        let (r, diag) = kabsch_rotation(&prob).unwrap();
        assert!(diag.reflection_corrected);
        assert!((r.matrix().determinant() - 1.0).abs() < 1e-12);
        let _ = Rotation::from_matrix(*r.matrix()).unwrap();
    }
}
