use grr_core::camera::{PointMap, RayBundle};
use grr_core::geometry::{random_rotation, Seed};
use grr_core::instances::LossFixture;
use grr_core::losses::{
    domain_bce, frame_loss, geometry_loss, pose_loss, regularization_loss, total_loss, DomainLabel,
    DomainTerms, LossWeights, NormP, NormSchedule,
};
use nalgebra::Vector3;
use proptest::prelude::*;

fn fixture(seed: u64, p: NormP) -> LossFixture {
    LossFixture::random(4, 0.05, p, Seed(seed)).unwrap()
}

fn p_of(l1: bool) -> NormP {
    if l1 {
        NormP::L1
    } else {
        NormP::L2
    }
}

fn weighted_total(fx: &LossFixture, w: &LossWeights) -> f64 {
    let inst = fx.instance();
    let ls = frame_loss(
        &inst.syn,
        &fx.syn.rays_pred,
        &fx.syn.pts_pred,
        w,
        fx.p,
        fx.penalty,
    )
    .unwrap();
    let lr = frame_loss(
        &inst.real,
        &fx.real.rays_pred,
        &fx.real.pts_pred,
        w,
        fx.p,
        fx.penalty,
    )
    .unwrap();
    let dom = DomainTerms {
        syn: DomainTerms::branch_sum(fx.syn_logits.0, fx.syn_logits.1, DomainLabel::Synthetic),
        real: DomainTerms::branch_sum(fx.real_logits.0, fx.real_logits.1, DomainLabel::Real),
    };
    total_loss(&ls, &lr, &dom, w)
}

fn weight_mut(w: &mut LossWeights, k: usize) -> &mut f64 {
    match k {
        0 => &mut w.w_pose_r,
        1 => &mut w.w_pose_p,
        2 => &mut w.w_geo_r,
        3 => &mut w.w_geo_p,
        4 => &mut w.w_reg_r,
        5 => &mut w.w_reg_p,
        6 => &mut w.w_syn,
        7 => &mut w.w_real,
        _ => &mut w.w_domain,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn losses_vanish_at_ground_truth(seed in any::<u64>(), l1 in any::<bool>()) {
        let fx = fixture(seed, p_of(l1));
        let p = fx.p;
        let w = LossWeights::default();
        let f = &fx.syn;
        prop_assert!(pose_loss(&f.gt_pose.r, &f.gt_pose.t, &f.gt_pose, &w, p).abs() < 1e-9);
        prop_assert!(geometry_loss(&f.rays_gt, &f.rays_gt, &f.pts_gt, &f.pts_gt, &w, p).unwrap().abs() < 1e-9);
        let reg = regularization_loss(&f.rays_gt, &f.pts_gt, &fx.rays_cam, &f.pts_gt, &fx.neighbors, &w, p).unwrap();
        prop_assert!(reg.abs() < 1e-9);
        let inst = fx.instance();
        let terms = frame_loss(&inst.syn, &f.rays_gt, &f.pts_gt, &w, p, fx.penalty).unwrap();
        prop_assert!(terms.sum().abs() < 1e-9);
        // A classifier saturated at the correct label.
        prop_assert_eq!(domain_bce(-800.0, DomainLabel::Synthetic), 0.0);
        prop_assert_eq!(domain_bce(800.0, DomainLabel::Real), 0.0);
    }

    #[test]
    fn regularization_ignores_global_motion(seed in any::<u64>(), q in any::<u64>(), l1 in any::<bool>(),
                                            t in prop::array::uniform3(-10.0..10.0f64)) {
        let fx = fixture(seed, p_of(l1));
        let w = LossWeights::default();
        let f = &fx.real;
        let q = random_rotation(Seed(q));
        let t = Vector3::from(t);
        let base = regularization_loss(&f.rays_pred, &f.pts_pred, &fx.rays_cam, &f.pts_gt, &fx.neighbors, &w, fx.p).unwrap();
        let d = RayBundle::new(f.rays_pred.dirs.iter().map(|v| q.apply(v)).collect());
        let pts = PointMap::new(f.pts_pred.pts.iter().map(|v| q.apply(v) + t).collect());
        let moved = regularization_loss(&d, &pts, &fx.rays_cam, &f.pts_gt, &fx.neighbors, &w, fx.p).unwrap();
        prop_assert!((moved - base).abs() <= 1e-9, "{} vs {}", moved, base);
    }

    #[test]
    fn total_is_linear_in_each_weight(seed in any::<u64>(), k in 0usize..9) {
        let fx = fixture(seed, NormP::L2);
        let w0 = LossWeights::default();
        let h = 1e-3;
        let at = |delta: f64| {
            let mut w = w0;
            *weight_mut(&mut w, k) += delta;
            weighted_total(&fx, &w)
        };
        let (lo, mid, hi) = (at(-h), at(0.0), at(h));
        let slope = (hi - lo) / (2.0 * h);
        // The slope oracle: unit weight on component k, and the outer
        // weights held, with every other component weight zeroed.
        let mut unit = if k < 6 { LossWeights { w_syn: w0.w_syn, w_real: w0.w_real, ..LossWeights::zeros() } } else { w0 };
        if k >= 6 {
            for j in 6..9 {
                *weight_mut(&mut unit, j) = 0.0;
            }
        }
        *weight_mut(&mut unit, k) = 1.0;
        let expected = weighted_total(&fx, &unit);
        prop_assert!((slope - expected).abs() <= 1e-10 * expected.abs().max(1.0), "slope {} vs {}", slope, expected);
        prop_assert!((hi - 2.0 * mid + lo).abs() <= 1e-10 * mid.abs().max(1.0));
    }

    #[test]
    fn norm_switch_happens_at_warmup(warmup in 0u64..1000, step in 0u64..2000) {
        let s = NormSchedule { warmup_steps: warmup, current_step: step };
        prop_assert_eq!(s.p(), if step < warmup { NormP::L1 } else { NormP::L2 });
    }
}
