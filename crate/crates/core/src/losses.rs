//! Training objective: pose, geometry, regularization and domain terms, and
//! their weighted total. Every loss also has a `*_grad` companion returning
//! the partials the end-to-end gradient check chains through the solvers.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{PointMap, RayBundle};
use crate::error::{GrrError, Result};
use crate::geometry::{geodesic_distance, Pose, Rotation};
use crate::solver::recover_pose;

fn one() -> f64 {
    1.0
}

fn tenth() -> f64 {
    0.1
}

/// Loss weights. Defaults are 1.0 except `w_domain = 0.1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "one")]
    pub w_pose_r: f64,
    #[serde(default = "one")]
    pub w_pose_p: f64,
    #[serde(default = "one")]
    pub w_geo_r: f64,
    #[serde(default = "one")]
    pub w_geo_p: f64,
    #[serde(default = "one")]
    pub w_reg_r: f64,
    #[serde(default = "one")]
    pub w_reg_p: f64,
    #[serde(default = "one")]
    pub w_syn: f64,
    #[serde(default = "one")]
    pub w_real: f64,
    #[serde(default = "tenth")]
    pub w_domain: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_pose_r: 1.0,
            w_pose_p: 1.0,
            w_geo_r: 1.0,
            w_geo_p: 1.0,
            w_reg_r: 1.0,
            w_reg_p: 1.0,
            w_syn: 1.0,
            w_real: 1.0,
            w_domain: 0.1,
        }
    }
}

impl LossWeights {
    /// All weights zero; convenient for isolating single terms.
    pub fn zeros() -> Self {
        LossWeights {
            w_pose_r: 0.0,
            w_pose_p: 0.0,
            w_geo_r: 0.0,
            w_geo_p: 0.0,
            w_reg_r: 0.0,
            w_reg_p: 0.0,
            w_syn: 0.0,
            w_real: 0.0,
            w_domain: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_pose_r,
            self.w_pose_p,
            self.w_geo_r,
            self.w_geo_p,
            self.w_reg_r,
            self.w_reg_p,
            self.w_syn,
            self.w_real,
            self.w_domain,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(GrrError::InvalidInput(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Exponent `p` of the loss norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormP {
    #[serde(rename = "1")]
    L1,
    #[serde(rename = "2")]
    L2,
}

impl NormP {
    pub fn exponent(self) -> i32 {
        match self {
            NormP::L1 => 1,
            NormP::L2 => 2,
        }
    }

    /// `‖v‖_p` of a 3-vector.
    pub fn vector_norm(self, v: &Vector3<f64>) -> f64 {
        match self {
            NormP::L1 => v.abs().sum(),
            NormP::L2 => v.norm(),
        }
    }

    fn vector_norm_grad(self, v: &Vector3<f64>) -> Vector3<f64> {
        match self {
            NormP::L1 => v.map(sign),
            NormP::L2 => {
                let n = v.norm();
                if n > 0.0 {
                    v / n
                } else {
                    Vector3::zeros()
                }
            }
        }
    }

    /// `|x|^p` of a scalar.
    pub fn scalar_power(self, x: f64) -> f64 {
        match self {
            NormP::L1 => x.abs(),
            NormP::L2 => x * x,
        }
    }

    fn scalar_power_grad(self, x: f64) -> f64 {
        match self {
            NormP::L1 => sign(x),
            NormP::L2 => 2.0 * x,
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Warmup switch: `p = 1` while `current_step < warmup_steps`, then `p = 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormSchedule {
    #[serde(default)]
    pub warmup_steps: u64,
    #[serde(default)]
    pub current_step: u64,
}

impl NormSchedule {
    pub fn p(&self) -> NormP {
        if self.current_step < self.warmup_steps {
            NormP::L1
        } else {
            NormP::L2
        }
    }
}

/// How the translation term of the pose loss treats `p = 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationPenalty {
    /// `‖Δt‖_p`.
    #[default]
    Norm,
    /// `‖Δt‖₂²` when `p = 2`; identical to `Norm` when `p = 1`.
    Squared,
}

/// Patch index pairs for the local-rigidity term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSet {
    pairs: Vec<(usize, usize)>,
}

impl NeighborSet {
    /// Validates indices against `num_patches` and rejects self-pairs and
    /// duplicate unordered pairs.
    pub fn new(pairs: Vec<(usize, usize)>, num_patches: usize) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for &(i, j) in &pairs {
            if i >= num_patches || j >= num_patches {
                return Err(GrrError::InvalidInput(format!(
                    "neighbor pair ({i}, {j}) out of range for {num_patches} patches"
                )));
            }
            if i == j {
                return Err(GrrError::InvalidInput(format!("self pair ({i}, {i})")));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(GrrError::InvalidInput(format!("duplicate pair ({i}, {j})")));
            }
        }
        Ok(NeighborSet { pairs })
    }

    /// Right and down neighbors on an `n × n` grid.
    pub fn four_connected(n: usize) -> Self {
        let mut pairs = Vec::new();
        for r in 0..n {
            for c in 0..n {
                let i = r * n + c;
                if c + 1 < n {
                    pairs.push((i, i + 1));
                }
                if r + 1 < n {
                    pairs.push((i, i + n));
                }
            }
        }
        NeighborSet { pairs }
    }

    /// Four-connectivity plus both diagonals.
    pub fn eight_connected(n: usize) -> Self {
        let mut pairs = Self::four_connected(n).pairs;
        for r in 0..n.saturating_sub(1) {
            for c in 0..n {
                let i = r * n + c;
                if c + 1 < n {
                    pairs.push((i, i + n + 1));
                }
                if c > 0 {
                    pairs.push((i, i + n - 1));
                }
            }
        }
        NeighborSet { pairs }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn pose_loss(
    r_hat: &Rotation,
    t_hat: &Vector3<f64>,
    gt: &Pose,
    w: &LossWeights,
    p: NormP,
) -> f64 {
    pose_loss_with(r_hat, t_hat, gt, w, p, TranslationPenalty::Norm)
}

pub fn pose_loss_with(
    r_hat: &Rotation,
    t_hat: &Vector3<f64>,
    gt: &Pose,
    w: &LossWeights,
    p: NormP,
    penalty: TranslationPenalty,
) -> f64 {
    let angle = geodesic_distance(r_hat, &gt.r);
    let dt = t_hat - gt.t;
    let trans = match (p, penalty) {
        (NormP::L2, TranslationPenalty::Squared) => dt.norm_squared(),
        _ => p.vector_norm(&dt),
    };
    w.w_pose_r * angle.powi(p.exponent()) + w.w_pose_p * trans
}

/// `(∂L/∂R̂, ∂L/∂t̂)` of [`pose_loss_with`]. The rotation partial is the
/// ambient gradient of `arccos((tr(R_gtᵀR̂) − 1)/2)`; only its tangent part
/// matters downstream.
pub fn pose_loss_grad(
    r_hat: &Rotation,
    t_hat: &Vector3<f64>,
    gt: &Pose,
    w: &LossWeights,
    p: NormP,
    penalty: TranslationPenalty,
) -> (Matrix3<f64>, Vector3<f64>) {
    let angle = geodesic_distance(r_hat, &gt.r);
    let sin = angle.sin();
    // d angle / d cos = -1/sin; d cos / d R̂ = R_gt / 2
    let coef = match p {
        NormP::L1 => {
            if sin > 1e-300 {
                -1.0 / sin
            } else {
                0.0
            }
        }
        NormP::L2 => {
            let ratio = if angle < 1e-8 { 1.0 } else { angle / sin };
            -2.0 * ratio
        }
    };
    let grad_r = gt.r.matrix() * (0.5 * coef * w.w_pose_r);
    let dt = t_hat - gt.t;
    let grad_t = match (p, penalty) {
        (NormP::L2, TranslationPenalty::Squared) => 2.0 * dt,
        _ => p.vector_norm_grad(&dt),
    } * w.w_pose_p;
    (grad_r, grad_t)
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(GrrError::LengthMismatch { expected, actual });
    }
    Ok(())
}

fn cosine(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.dot(b) / (a.norm() * b.norm())
}

/// `w_geo_r·mean(1 − cos(d̂ᵢ, dᵢ)) + w_geo_p·mean‖p̂ᵢ − pᵢ‖_p`.
pub fn geometry_loss(
    d_hat: &RayBundle,
    d_gt: &RayBundle,
    p_hat: &PointMap,
    p_gt: &PointMap,
    w: &LossWeights,
    p: NormP,
) -> Result<f64> {
    let n = d_gt.len();
    check_len(n, d_hat.len())?;
    check_len(n, p_hat.len())?;
    check_len(n, p_gt.len())?;
    if n == 0 {
        return Ok(0.0);
    }
    let rays: f64 = d_hat
        .dirs
        .iter()
        .zip(&d_gt.dirs)
        .map(|(a, b)| 1.0 - cosine(a, b))
        .sum();
    let pts: f64 = p_hat
        .pts
        .iter()
        .zip(&p_gt.pts)
        .map(|(a, b)| p.vector_norm(&(a - b)))
        .sum();
    Ok((w.w_geo_r * rays + w.w_geo_p * pts) / n as f64)
}

/// Gradients with respect to predicted rays and points, in that order.
pub type VectorGrads = (Vec<Vector3<f64>>, Vec<Vector3<f64>>);

/// Partials of [`geometry_loss`] w.r.t. `d_hat` and `p_hat`.
pub fn geometry_loss_grad(
    d_hat: &RayBundle,
    d_gt: &RayBundle,
    p_hat: &PointMap,
    p_gt: &PointMap,
    w: &LossWeights,
    p: NormP,
) -> Result<VectorGrads> {
    let n = d_gt.len();
    check_len(n, d_hat.len())?;
    check_len(n, p_hat.len())?;
    check_len(n, p_gt.len())?;
    let scale = 1.0 / n.max(1) as f64;
    let rays = d_hat
        .dirs
        .iter()
        .zip(&d_gt.dirs)
        .map(|(a, b)| {
            let na = a.norm();
            let ua = a / na;
            let ub = b / b.norm();
            // d cos / d a = (b̂ − cos·â)/‖a‖
            -(ub - ua * ua.dot(&ub)) / na * (w.w_geo_r * scale)
        })
        .collect();
    let pts = p_hat
        .pts
        .iter()
        .zip(&p_gt.pts)
        .map(|(a, b)| p.vector_norm_grad(&(a - b)) * (w.w_geo_p * scale))
        .collect();
    Ok((rays, pts))
}

/// Local-structure regularizer over `nbrs`: predicted ray dot products
/// against camera-frame canonical ones, predicted pairwise point distances
/// against ground-truth ones.
pub fn regularization_loss(
    d_hat: &RayBundle,
    p_hat: &PointMap,
    d_cam: &RayBundle,
    p_gt: &PointMap,
    nbrs: &NeighborSet,
    w: &LossWeights,
    p: NormP,
) -> Result<f64> {
    check_reg_inputs(d_hat, p_hat, d_cam, p_gt, nbrs)?;
    let total: f64 = nbrs
        .pairs()
        .iter()
        .map(|&(i, j)| {
            let (ray_res, pt_res) = reg_residuals(d_hat, p_hat, d_cam, p_gt, i, j);
            w.w_reg_r * p.scalar_power(ray_res) + w.w_reg_p * p.scalar_power(pt_res)
        })
        .sum();
    Ok(total / nbrs.len() as f64)
}

fn check_reg_inputs(
    d_hat: &RayBundle,
    p_hat: &PointMap,
    d_cam: &RayBundle,
    p_gt: &PointMap,
    nbrs: &NeighborSet,
) -> Result<()> {
    if nbrs.is_empty() {
        return Err(GrrError::EmptyNeighborSet);
    }
    let n = d_cam.len();
    check_len(n, d_hat.len())?;
    check_len(n, p_hat.len())?;
    check_len(n, p_gt.len())?;
    if let Some(&(i, j)) = nbrs.pairs().iter().find(|&&(i, j)| i >= n || j >= n) {
        return Err(GrrError::InvalidInput(format!(
            "neighbor pair ({i}, {j}) out of range for {n} patches"
        )));
    }
    Ok(())
}

fn reg_residuals(
    d_hat: &RayBundle,
    p_hat: &PointMap,
    d_cam: &RayBundle,
    p_gt: &PointMap,
    i: usize,
    j: usize,
) -> (f64, f64) {
    let ray = d_hat.dirs[i].dot(&d_hat.dirs[j]) - d_cam.dirs[i].dot(&d_cam.dirs[j]);
    let pt = (p_hat.pts[i] - p_hat.pts[j]).norm() - (p_gt.pts[i] - p_gt.pts[j]).norm();
    (ray, pt)
}

/// Partials of [`regularization_loss`] w.r.t. `d_hat` and `p_hat`.
pub fn regularization_loss_grad(
    d_hat: &RayBundle,
    p_hat: &PointMap,
    d_cam: &RayBundle,
    p_gt: &PointMap,
    nbrs: &NeighborSet,
    w: &LossWeights,
    p: NormP,
) -> Result<VectorGrads> {
    check_reg_inputs(d_hat, p_hat, d_cam, p_gt, nbrs)?;
    let n = d_cam.len();
    let scale = 1.0 / nbrs.len() as f64;
    let mut gd = vec![Vector3::zeros(); n];
    let mut gp = vec![Vector3::zeros(); n];
    for &(i, j) in nbrs.pairs() {
        let (ray_res, pt_res) = reg_residuals(d_hat, p_hat, d_cam, p_gt, i, j);
        let cr = w.w_reg_r * p.scalar_power_grad(ray_res) * scale;
        gd[i] += d_hat.dirs[j] * cr;
        gd[j] += d_hat.dirs[i] * cr;
        let diff = p_hat.pts[i] - p_hat.pts[j];
        let dist = diff.norm();
        if dist > 0.0 {
            let cp = w.w_reg_p * p.scalar_power_grad(pt_res) * scale / dist;
            gp[i] += diff * cp;
            gp[j] -= diff * cp;
        }
    }
    Ok((gd, gp))
}

/// Binary cross-entropy on a logit; label 0 = synthetic, 1 = real.
/// Evaluated as `softplus(x) − y·x` in a form that never overflows.
pub fn domain_bce(logit: f64, label: DomainLabel) -> f64 {
    let y = label.value();
    logit.max(0.0) - y * logit + (-logit.abs()).exp().ln_1p()
}

/// `d BCE / d logit = σ(x) − y`.
pub fn domain_bce_grad(logit: f64, label: DomainLabel) -> f64 {
    let sig = if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    };
    sig - label.value()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainLabel {
    Synthetic,
    Real,
}

impl DomainLabel {
    pub fn value(self) -> f64 {
        match self {
            DomainLabel::Synthetic => 0.0,
            DomainLabel::Real => 1.0,
        }
    }
}

/// Per-domain supervised components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossTerms {
    pub pose: f64,
    pub geo: f64,
    pub reg: f64,
}

impl LossTerms {
    pub fn sum(&self) -> f64 {
        self.pose + self.geo + self.reg
    }
}

/// Domain-classifier losses per domain (each already summed over the ray
/// and point classifiers).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct DomainTerms {
    pub syn: f64,
    pub real: f64,
}

impl DomainTerms {
    /// Sum of BCE over the ray and point classifier logits of one sample.
    pub fn branch_sum(ray_logit: f64, point_logit: f64, label: DomainLabel) -> f64 {
        domain_bce(ray_logit, label) + domain_bce(point_logit, label)
    }
}

/// `w_syn·L_syn + w_real·L_real + w_domain·(L_dom_syn + L_dom_real)`.
pub fn total_loss(syn: &LossTerms, real: &LossTerms, domain: &DomainTerms, w: &LossWeights) -> f64 {
    w.w_syn * syn.sum() + w.w_real * real.sum() + w.w_domain * (domain.syn + domain.real)
}

/// Everything needed to score one frame's predictions.
#[derive(Debug, Clone)]
pub struct FrameLossInputs<'a> {
    pub rays_cam: &'a RayBundle,
    pub pts_cam: &'a PointMap,
    pub rays_gt: &'a RayBundle,
    pub pts_gt: &'a PointMap,
    pub gt_pose: &'a Pose,
    pub neighbors: &'a NeighborSet,
}

/// Solves the pose from the predictions, then evaluates pose, geometry and
/// regularization terms.
pub fn frame_loss(
    inputs: &FrameLossInputs<'_>,
    rays_pred: &RayBundle,
    pts_pred: &PointMap,
    w: &LossWeights,
    p: NormP,
    penalty: TranslationPenalty,
) -> Result<LossTerms> {
    let est = recover_pose(inputs.rays_cam, inputs.pts_cam, rays_pred, pts_pred)?;
    Ok(LossTerms {
        pose: pose_loss_with(&est.pose.r, &est.pose.t, inputs.gt_pose, w, p, penalty),
        geo: geometry_loss(rays_pred, inputs.rays_gt, pts_pred, inputs.pts_gt, w, p)?,
        reg: regularization_loss(
            rays_pred,
            pts_pred,
            inputs.rays_cam,
            inputs.pts_gt,
            inputs.neighbors,
            w,
            p,
        )?,
    })
}
