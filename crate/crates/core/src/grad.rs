//! Vector-Jacobian products through the SVD-based solvers and a central
//! finite-difference harness to check them.
//!
//! With `H = U·Σ·Vᵀ` and `R = U·S·Vᵀ`, `S = diag(1, 1, d)`, a perturbation of
//! `H` gives `dR = U·X·Vᵀ` where, for `i ≠ j` and `M = Uᵀ·dH·V`,
//!
//! ```text
//! X_ij = (s_i + s_j)/2 · (M_ij − M_ji)/(σ_i + σ_j)
//!      + (s_j − s_i)/2 · (M_ij + M_ji)/(σ_j − σ_i)
//! ```
//!
//! and `X_ii = 0`. The second line only survives when `d = −1`, so the
//! difference denominators are touched only for reflection-corrected
//! solves. The sign `d` is held constant.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::camera::{PointMap, RayBundle};
use crate::error::{GrrError, Result};
use crate::geometry::Seed;
use crate::losses::{
    domain_bce, domain_bce_grad, frame_loss, geometry_loss_grad, pose_loss_grad,
    regularization_loss_grad, total_loss, DomainLabel, DomainTerms, FrameLossInputs, LossTerms,
    LossWeights, NormP, TranslationPenalty,
};
use crate::solver::{
    normalized, point_problem, ray_problem, recover_pose, AlignmentProblem, KabschFactors,
};

/// Minimum `σ_i + σ_j` (and `|σ_i − σ_j|` where used) for a trusted VJP.
pub const SINGULAR_GUARD: f64 = 1e-8;

/// Cotangents for one solver call.
#[derive(Debug, Clone)]
pub struct VjpRequest<'a> {
    pub problem: &'a AlignmentProblem,
    pub upstream_rotation_grad: Matrix3<f64>,
    /// Ignored by the rotation-only VJP.
    pub upstream_translation_grad: Vector3<f64>,
}

/// Gradients w.r.t. each correspondence.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentGrads {
    pub target: Vec<Vector3<f64>>,
    pub source: Vec<Vector3<f64>>,
}

/// `∂L/∂H` given `∂L/∂R`.
fn covariance_grad(f: &KabschFactors, grad_r: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let s = [1.0, 1.0, f.d];
    let g = f.u.transpose() * grad_r * f.v;
    let mut k = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            if i == j {
                continue;
            }
            let sum = f.sigma[i] + f.sigma[j];
            if sum < SINGULAR_GUARD {
                return Err(GrrError::NearSingularJacobian {
                    i: i + 1,
                    j: j + 1,
                    value: sum,
                });
            }
            let mut kij = 0.5 * (s[i] + s[j]) / sum * (g[(i, j)] - g[(j, i)]);
            if s[i] != s[j] {
                let diff = f.sigma[j] - f.sigma[i];
                if diff.abs() < SINGULAR_GUARD {
                    return Err(GrrError::NearSingularJacobian {
                        i: i + 1,
                        j: j + 1,
                        value: diff.abs(),
                    });
                }
                kij += 0.5 * (s[j] - s[i]) / diff * (g[(i, j)] + g[(j, i)]);
            }
            k[(i, j)] = kij;
        }
    }
    Ok(f.u * k * f.v.transpose())
}

/// Backward pass of [`crate::solver::kabsch_rotation`].
pub fn kabsch_rotation_vjp(req: &VjpRequest<'_>) -> Result<AlignmentGrads> {
    let prob = req.problem;
    let f = KabschFactors::from_covariance(&prob.covariance());
    let gh = covariance_grad(&f, &req.upstream_rotation_grad)?;
    let target = (0..prob.len())
        .map(|i| prob.weight(i) * gh * prob.source()[i])
        .collect();
    let source = (0..prob.len())
        .map(|i| prob.weight(i) * gh.transpose() * prob.target()[i])
        .collect();
    Ok(AlignmentGrads { target, source })
}

/// Backward pass of [`crate::solver::rigid_align`], with cotangents on both
/// the rotation and the translation.
pub fn rigid_align_vjp(req: &VjpRequest<'_>) -> Result<AlignmentGrads> {
    let prob = req.problem;
    let centered = prob.centered();
    let cs = prob.source_centroid();
    let f = KabschFactors::from_covariance(&centered.covariance());
    let r = f.rotation();
    let g = req.upstream_translation_grad;
    // t = c_t − R·c_s feeds back into the rotation cotangent.
    let grad_r = req.upstream_rotation_grad - g * cs.transpose();
    let gh = covariance_grad(&f, &grad_r)?;
    let total = prob.total_weight();
    // Centering drops out of H's gradient because Σ wᵢ·(xᵢ − c) = 0.
    let target = (0..prob.len())
        .map(|i| {
            let w = prob.weight(i);
            w * gh * centered.source()[i] + g * (w / total)
        })
        .collect();
    let rt_g = r.matrix().transpose() * g;
    let source = (0..prob.len())
        .map(|i| {
            let w = prob.weight(i);
            w * gh.transpose() * centered.target()[i] - rt_g * (w / total)
        })
        .collect();
    Ok(AlignmentGrads { target, source })
}

/// Gradients of one frame's `pose + geo + reg` w.r.t. the raw predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGrads {
    pub rays: Vec<Vector3<f64>>,
    pub points: Vec<Vector3<f64>>,
}

/// Forward value and gradient of [`frame_loss`], chained through ray
/// renormalization and both solvers.
pub fn frame_loss_grad(
    inputs: &FrameLossInputs<'_>,
    rays_pred: &RayBundle,
    pts_pred: &PointMap,
    w: &LossWeights,
    p: NormP,
    penalty: TranslationPenalty,
) -> Result<(LossTerms, FrameGrads)> {
    let terms = frame_loss(inputs, rays_pred, pts_pred, w, p, penalty)?;
    let est = recover_pose(inputs.rays_cam, inputs.pts_cam, rays_pred, pts_pred)?;
    let (grad_r, grad_t) = pose_loss_grad(&est.pose.r, &est.pose.t, inputs.gt_pose, w, p, penalty);

    let rp = ray_problem(inputs.rays_cam, rays_pred)?;
    let ray_vjp = kabsch_rotation_vjp(&VjpRequest {
        problem: &rp,
        upstream_rotation_grad: grad_r,
        upstream_translation_grad: Vector3::zeros(),
    })?;
    let pp = point_problem(inputs.pts_cam, pts_pred)?;
    let pt_vjp = rigid_align_vjp(&VjpRequest {
        problem: &pp,
        upstream_rotation_grad: Matrix3::zeros(),
        upstream_translation_grad: grad_t,
    })?;

    let (geo_d, geo_p) =
        geometry_loss_grad(rays_pred, inputs.rays_gt, pts_pred, inputs.pts_gt, w, p)?;
    let (reg_d, reg_p) = regularization_loss_grad(
        rays_pred,
        pts_pred,
        inputs.rays_cam,
        inputs.pts_gt,
        inputs.neighbors,
        w,
        p,
    )?;

    let units = normalized(&rays_pred.dirs)?;
    let rays = (0..rays_pred.len())
        .map(|i| {
            let u = units[i];
            let g = ray_vjp.target[i];
            // d(a/‖a‖) = (I − ûûᵀ)/‖a‖
            (g - u * u.dot(&g)) / rays_pred.dirs[i].norm() + geo_d[i] + reg_d[i]
        })
        .collect();
    let points = (0..pts_pred.len())
        .map(|i| pt_vjp.target[i] + geo_p[i] + reg_p[i])
        .collect();
    Ok((terms, FrameGrads { rays, points }))
}

/// Which differentiable map [`finite_diff_check`] probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradOp {
    Rotation,
    Rigid,
    LossTotal,
}

impl GradOp {
    pub fn name(self) -> &'static str {
        match self {
            GradOp::Rotation => "rotation",
            GradOp::Rigid => "rigid",
            GradOp::LossTotal => "loss_total",
        }
    }
}

/// Scalar probe for the solver ops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Probe {
    /// `⟨G, R⟩ + ⟨g, t⟩` with `G`, `g` standard normal draws from the seed.
    Cotangent(Seed),
    /// The alignment residual `Σ wᵢ‖R·sᵢ + t − yᵢ‖²` at the solver output.
    ResidualCost,
}

/// One synthetic and one real frame plus domain logits; the scalar is the
/// weighted total over both.
#[derive(Debug, Clone)]
pub struct LossInstance<'a> {
    pub syn: FrameLossInputs<'a>,
    pub real: FrameLossInputs<'a>,
    pub syn_pred: (RayBundle, PointMap),
    pub real_pred: (RayBundle, PointMap),
    /// `(ray, point)` classifier logits for the synthetic sample.
    pub syn_logits: (f64, f64),
    pub real_logits: (f64, f64),
    pub weights: LossWeights,
    pub p: NormP,
    pub penalty: TranslationPenalty,
}

impl LossInstance<'_> {
    fn params(&self) -> Vec<f64> {
        let mut x = Vec::new();
        for (rays, pts) in [&self.syn_pred, &self.real_pred] {
            x.extend(rays.dirs.iter().flat_map(|v| v.iter().copied()));
            x.extend(pts.pts.iter().flat_map(|v| v.iter().copied()));
        }
        x.extend([
            self.syn_logits.0,
            self.syn_logits.1,
            self.real_logits.0,
            self.real_logits.1,
        ]);
        x
    }

    fn unpack(&self, x: &[f64]) -> ((RayBundle, PointMap), (RayBundle, PointMap), [f64; 4]) {
        let mut it = x.chunks_exact(3);
        let mut take = |n: usize| -> Vec<Vector3<f64>> {
            (0..n)
                .map(|_| Vector3::from_column_slice(it.next().expect("param length")))
                .collect()
        };
        let ns = self.syn_pred.0.len();
        let nr = self.real_pred.0.len();
        let syn = (RayBundle::new(take(ns)), PointMap::new(take(ns)));
        let real = (RayBundle::new(take(nr)), PointMap::new(take(nr)));
        let l = &x[x.len() - 4..];
        (syn, real, [l[0], l[1], l[2], l[3]])
    }

    fn value_at(&self, x: &[f64]) -> Result<f64> {
        let (syn, real, l) = self.unpack(x);
        let ls = frame_loss(
            &self.syn,
            &syn.0,
            &syn.1,
            &self.weights,
            self.p,
            self.penalty,
        )?;
        let lr = frame_loss(
            &self.real,
            &real.0,
            &real.1,
            &self.weights,
            self.p,
            self.penalty,
        )?;
        let dom = DomainTerms {
            syn: DomainTerms::branch_sum(l[0], l[1], DomainLabel::Synthetic),
            real: DomainTerms::branch_sum(l[2], l[3], DomainLabel::Real),
        };
        Ok(total_loss(&ls, &lr, &dom, &self.weights))
    }

    /// Total loss and its gradient in the same flat layout as the
    /// finite-difference parameters.
    pub fn value_and_grad(&self) -> Result<(f64, Vec<f64>)> {
        let w = &self.weights;
        let (ls, gs) = frame_loss_grad(
            &self.syn,
            &self.syn_pred.0,
            &self.syn_pred.1,
            w,
            self.p,
            self.penalty,
        )?;
        let (lr, gr) = frame_loss_grad(
            &self.real,
            &self.real_pred.0,
            &self.real_pred.1,
            w,
            self.p,
            self.penalty,
        )?;
        let (a, b) = self.syn_logits;
        let (c, d) = self.real_logits;
        let dom = DomainTerms {
            syn: domain_bce(a, DomainLabel::Synthetic) + domain_bce(b, DomainLabel::Synthetic),
            real: domain_bce(c, DomainLabel::Real) + domain_bce(d, DomainLabel::Real),
        };
        let value = total_loss(&ls, &lr, &dom, w);
        let mut g = Vec::new();
        for (fg, scale) in [(&gs, w.w_syn), (&gr, w.w_real)] {
            g.extend(
                fg.rays
                    .iter()
                    .flat_map(|v| (v * scale).iter().copied().collect::<Vec<_>>()),
            );
            g.extend(
                fg.points
                    .iter()
                    .flat_map(|v| (v * scale).iter().copied().collect::<Vec<_>>()),
            );
        }
        g.extend([
            w.w_domain * domain_bce_grad(a, DomainLabel::Synthetic),
            w.w_domain * domain_bce_grad(b, DomainLabel::Synthetic),
            w.w_domain * domain_bce_grad(c, DomainLabel::Real),
            w.w_domain * domain_bce_grad(d, DomainLabel::Real),
        ]);
        Ok((value, g))
    }
}

/// What to differentiate.
#[derive(Debug, Clone)]
pub enum GradInstance<'a> {
    Alignment {
        problem: AlignmentProblem,
        probe: Probe,
    },
    Loss(Box<LossInstance<'a>>),
}

/// Analytic vs. numeric partials for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub op: GradOp,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl GradReport {
    pub fn n_params(&self) -> usize {
        self.analytic.len()
    }
}

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Central differences of `f` at `x`. Non-finite evaluations propagate as NaN.
pub fn central_differences<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = xp[k];
            xp[k] = orig + h;
            let fp = f(&xp);
            xp[k] = orig - h;
            let fm = f(&xp);
            xp[k] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `(max relative error, max absolute error)`; relative error uses
/// `max(|a|, |n|, REL_ERR_FLOOR)` as denominator. NaN anywhere gives NaN.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> (f64, f64) {
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        let abs = (a - n).abs();
        if abs.is_nan() {
            return (f64::NAN, f64::NAN);
        }
        let rel = abs / a.abs().max(n.abs()).max(REL_ERR_FLOOR);
        max_rel = max_rel.max(rel);
        max_abs = max_abs.max(abs);
    }
    (max_rel, max_abs)
}

fn flatten(vs: &[Vector3<f64>]) -> Vec<f64> {
    vs.iter().flat_map(|v| v.iter().copied()).collect()
}

fn unflatten(x: &[f64]) -> Vec<Vector3<f64>> {
    x.chunks_exact(3).map(Vector3::from_column_slice).collect()
}

struct ProbeCotangents {
    g_r: Matrix3<f64>,
    g_t: Vector3<f64>,
}

impl ProbeCotangents {
    fn draw(seed: Seed) -> Self {
        let mut rng = seed.rng();
        let mut normal = || rng.sample::<f64, _>(StandardNormal);
        let g_r = Matrix3::from_fn(|_, _| normal());
        let g_t = Vector3::new(normal(), normal(), normal());
        ProbeCotangents { g_r, g_t }
    }
}

/// Rebuilds `prob` with new coordinates; parameters are targets then sources.
fn rebuild(prob: &AlignmentProblem, x: &[f64]) -> Result<AlignmentProblem> {
    let n = prob.len();
    let target = unflatten(&x[..3 * n]);
    let source = unflatten(&x[3 * n..]);
    let weights = (0..n).map(|i| prob.weight(i)).collect();
    AlignmentProblem::weighted(source, target, weights)
}

fn solve_op(op: GradOp, prob: &AlignmentProblem) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    match op {
        GradOp::Rotation => {
            let (r, _) = crate::solver::kabsch_rotation(prob)?;
            Ok((*r.matrix(), Vector3::zeros()))
        }
        _ => {
            let (pose, _) = crate::solver::rigid_align(prob)?;
            Ok((*pose.r.matrix(), pose.t))
        }
    }
}

fn alignment_scalar(
    op: GradOp,
    prob: &AlignmentProblem,
    probe: &Probe,
    cot: &ProbeCotangents,
) -> f64 {
    match solve_op(op, prob) {
        Ok((r, t)) => match probe {
            Probe::Cotangent(_) => cot.g_r.dot(&r) + cot.g_t.dot(&t),
            Probe::ResidualCost => (0..prob.len())
                .map(|i| {
                    let res = r * prob.source()[i] + t - prob.target()[i];
                    prob.weight(i) * res.norm_squared()
                })
                .sum(),
        },
        Err(_) => f64::NAN,
    }
}

fn alignment_analytic(
    op: GradOp,
    prob: &AlignmentProblem,
    probe: &Probe,
    cot: &ProbeCotangents,
) -> Result<Vec<f64>> {
    // The Jacobian guard runs first so a collinear instance reports the
    // singular backward pass rather than the forward degeneracy.
    let h = match op {
        GradOp::Rotation => prob.covariance(),
        _ => prob.centered().covariance(),
    };
    covariance_grad(&KabschFactors::from_covariance(&h), &Matrix3::zeros())?;
    let (r, t) = solve_op(op, prob)?;
    let n = prob.len();
    // Explicit dependence of the probe on the coordinates, plus cotangents
    // on the solver outputs.
    let (g_r, g_t, mut explicit_t, mut explicit_s) = match probe {
        Probe::Cotangent(_) => (
            cot.g_r,
            if op == GradOp::Rotation {
                Vector3::zeros()
            } else {
                cot.g_t
            },
            vec![Vector3::zeros(); n],
            vec![Vector3::zeros(); n],
        ),
        Probe::ResidualCost => {
            let mut g_r = Matrix3::zeros();
            let mut g_t = Vector3::zeros();
            let mut et = Vec::with_capacity(n);
            let mut es = Vec::with_capacity(n);
            for i in 0..n {
                let w = prob.weight(i);
                let s = prob.source()[i];
                let res = r * s + t - prob.target()[i];
                g_r += 2.0 * w * res * s.transpose();
                g_t += 2.0 * w * res;
                et.push(-2.0 * w * res);
                es.push(2.0 * w * r.transpose() * res);
            }
            if op == GradOp::Rotation {
                g_t = Vector3::zeros();
            }
            (g_r, g_t, et, es)
        }
    };
    let req = VjpRequest {
        problem: prob,
        upstream_rotation_grad: g_r,
        upstream_translation_grad: g_t,
    };
    let grads = match op {
        GradOp::Rotation => kabsch_rotation_vjp(&req)?,
        _ => rigid_align_vjp(&req)?,
    };
    for i in 0..n {
        explicit_t[i] += grads.target[i];
        explicit_s[i] += grads.source[i];
    }
    let mut out = flatten(&explicit_t);
    out.extend(flatten(&explicit_s));
    Ok(out)
}

/// Compares the analytic gradient of a scalar probe with central
/// differences of step `h`. Fails only when the analytic side cannot be
/// evaluated (e.g. [`GrrError::NearSingularJacobian`]); large disagreements
/// are reported, not raised.
pub fn finite_diff_check(op: GradOp, instance: &GradInstance<'_>, h: f64) -> Result<GradReport> {
    if !(1e-8..=1e-3).contains(&h) {
        return Err(GrrError::InvalidInput(format!(
            "finite-difference step {h} outside [1e-8, 1e-3]"
        )));
    }
    let (analytic, numeric) = match (op, instance) {
        (GradOp::Rotation | GradOp::Rigid, GradInstance::Alignment { problem, probe }) => {
            let seed = match probe {
                Probe::Cotangent(s) => *s,
                Probe::ResidualCost => Seed(0),
            };
            let cot = ProbeCotangents::draw(seed);
            let analytic = alignment_analytic(op, problem, probe, &cot)?;
            let mut x = flatten(problem.target());
            x.extend(flatten(problem.source()));
            let numeric = central_differences(
                |x| match rebuild(problem, x) {
                    Ok(p) => alignment_scalar(op, &p, probe, &cot),
                    Err(_) => f64::NAN,
                },
                &x,
                h,
            );
            (analytic, numeric)
        }
        (GradOp::LossTotal, GradInstance::Loss(inst)) => {
            let (_, analytic) = inst.value_and_grad()?;
            let numeric =
                central_differences(|x| inst.value_at(x).unwrap_or(f64::NAN), &inst.params(), h);
            (analytic, numeric)
        }
        _ => {
            return Err(GrrError::InvalidInput(format!(
                "instance kind does not match op {}",
                op.name()
            )))
        }
    };
    let (max_rel_err, max_abs_err) = compare_gradients(&analytic, &numeric);
    Ok(GradReport {
        op,
        analytic,
        numeric,
        max_rel_err,
        max_abs_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_rotation, sample_unit_vector};

    fn random_problem(seed: u64, n: usize, noise: f64) -> AlignmentProblem {
        let mut rng = Seed(seed).rng();
        let r = sample_rotation(&mut rng);
        let t = Vector3::new(0.5, -1.0, 2.0);
        let src: Vec<_> = (0..n).map(|_| sample_unit_vector(&mut rng)).collect();
        let tgt = src
            .iter()
            .map(|s| r.apply(s) + t + sample_unit_vector(&mut rng) * noise)
            .collect();
        AlignmentProblem::new(src, tgt).unwrap()
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let prob = random_problem(1, 12, 0.1);
        let req = VjpRequest {
            problem: &prob,
            upstream_rotation_grad: Matrix3::zeros(),
            upstream_translation_grad: Vector3::zeros(),
        };
        for g in [
            kabsch_rotation_vjp(&req).unwrap(),
            rigid_align_vjp(&req).unwrap(),
        ] {
            assert!(g
                .target
                .iter()
                .chain(&g.source)
                .all(|v| *v == Vector3::zeros()));
        }
    }

    #[test]
    fn rotation_vjp_matches_finite_differences() {
        let prob = random_problem(2, 12, 0.2);
        let inst = GradInstance::Alignment {
            problem: prob,
            probe: Probe::Cotangent(Seed(5)),
        };
        let rep = finite_diff_check(GradOp::Rotation, &inst, 1e-5).unwrap();
        assert_eq!(rep.n_params(), 72);
        assert!(rep.max_rel_err < 1e-4, "{}", rep.max_rel_err);
    }

    #[test]
    fn rigid_vjp_matches_finite_differences() {
        let prob = random_problem(3, 16, 0.2);
        let inst = GradInstance::Alignment {
            problem: prob,
            probe: Probe::Cotangent(Seed(6)),
        };
        let rep = finite_diff_check(GradOp::Rigid, &inst, 1e-5).unwrap();
        assert!(rep.max_rel_err < 1e-4, "{}", rep.max_rel_err);
    }

    #[test]
    fn reflection_corrected_vjp_matches_finite_differences() {
        // Mirrored targets force d = -1, exercising the difference terms.
        let mut rng = Seed(21).rng();
        let src: Vec<_> = (0..10)
            .map(|_| {
                let v = sample_unit_vector(&mut rng);
                Vector3::new(3.0 * v.x, 1.5 * v.y, 0.5 * v.z)
            })
            .collect();
        let tgt = src.iter().map(|s| Vector3::new(s.x, s.y, -s.z)).collect();
        let prob = AlignmentProblem::new(src, tgt).unwrap();
        let (_, diag) = crate::solver::kabsch_rotation(&prob).unwrap();
        assert!(diag.reflection_corrected);
        let inst = GradInstance::Alignment {
            problem: prob,
            probe: Probe::Cotangent(Seed(8)),
        };
        let rep = finite_diff_check(GradOp::Rotation, &inst, 1e-6).unwrap();
        assert!(rep.max_rel_err < 1e-4, "{}", rep.max_rel_err);
    }

    #[test]
    fn rigid_residual_gradient_vanishes_at_optimum() {
        let prob = random_problem(4, 16, 0.0);
        let inst = GradInstance::Alignment {
            problem: prob,
            probe: Probe::ResidualCost,
        };
        let rep = finite_diff_check(GradOp::Rigid, &inst, 1e-5).unwrap();
        assert!(rep.analytic.iter().all(|g| g.abs() < 1e-7));
        assert!(rep.numeric.iter().all(|g| g.abs() < 1e-7));
    }

    #[test]
    fn residual_gradient_nonzero_off_optimum() {
        let prob = random_problem(5, 16, 0.3);
        let inst = GradInstance::Alignment {
            problem: prob,
            probe: Probe::ResidualCost,
        };
        for op in [GradOp::Rotation, GradOp::Rigid] {
            let rep = finite_diff_check(op, &inst, 1e-5).unwrap();
            assert!(rep.max_rel_err < 1e-4, "{op:?} {}", rep.max_rel_err);
        }
    }

    #[test]
    fn vjp_is_linear_in_cotangent() {
        let prob = random_problem(6, 12, 0.1);
        let mut rng = Seed(9).rng();
        let mut normal = || rng.sample::<f64, _>(StandardNormal);
        let g1 = Matrix3::from_fn(|_, _| normal());
        let g2 = Matrix3::from_fn(|_, _| normal());
        let t1 = Vector3::new(normal(), normal(), normal());
        let t2 = Vector3::new(normal(), normal(), normal());
        let (a, b) = (0.7, -1.3);
        let run = |gr, gt| {
            rigid_align_vjp(&VjpRequest {
                problem: &prob,
                upstream_rotation_grad: gr,
                upstream_translation_grad: gt,
            })
            .unwrap()
        };
        let lhs = run(a * g1 + b * g2, a * t1 + b * t2);
        let r1 = run(g1, t1);
        let r2 = run(g2, t2);
        for i in 0..prob.len() {
            assert!((lhs.target[i] - (a * r1.target[i] + b * r2.target[i])).amax() < 1e-10);
            assert!((lhs.source[i] - (a * r1.source[i] + b * r2.source[i])).amax() < 1e-10);
        }
    }

    #[test]
    fn collinear_problem_is_near_singular() {
        let d = Vector3::new(0.0, 0.6, 0.8);
        let prob = AlignmentProblem::new(vec![d; 6], vec![d; 6]).unwrap();
        let req = VjpRequest {
            problem: &prob,
            upstream_rotation_grad: Matrix3::identity(),
            upstream_translation_grad: Vector3::zeros(),
        };
        assert!(matches!(
            kabsch_rotation_vjp(&req),
            Err(GrrError::NearSingularJacobian { .. })
        ));
    }

    #[test]
    fn rejects_out_of_range_step() {
        let inst = GradInstance::Alignment {
            problem: random_problem(7, 5, 0.1),
            probe: Probe::ResidualCost,
        };
        assert!(finite_diff_check(GradOp::Rotation, &inst, 1e-2).is_err());
        assert!(finite_diff_check(GradOp::LossTotal, &inst, 1e-5).is_err());
    }

    #[test]
    fn translation_cotangent_spreads_by_weight() {
        // With the source centroid at the origin, t does not depend on R, so
        // each target receives exactly w_i/Σw of the translation cotangent.
        let base = random_problem(8, 8, 0.2);
        let weights: Vec<f64> = (1..=8).map(|k| k as f64).collect();
        let total: f64 = weights.iter().sum();
        let weighted = AlignmentProblem::weighted(
            base.source().to_vec(),
            base.target().to_vec(),
            weights.clone(),
        )
        .unwrap();
        let c = weighted.source_centroid();
        let src: Vec<_> = base.source().iter().map(|s| s - c).collect();
        let prob =
            AlignmentProblem::weighted(src, base.target().to_vec(), weights.clone()).unwrap();
        let g = Vector3::new(0.3, -0.2, 0.9);
        let grads = rigid_align_vjp(&VjpRequest {
            problem: &prob,
            upstream_rotation_grad: Matrix3::zeros(),
            upstream_translation_grad: g,
        })
        .unwrap();
        for (i, gi) in grads.target.iter().enumerate() {
            assert!((gi - g * (weights[i] / total)).amax() < 1e-12);
        }
        let sum: Vector3<f64> = grads.target.iter().sum();
        assert!((sum - g).amax() < 1e-12);
    }
}
