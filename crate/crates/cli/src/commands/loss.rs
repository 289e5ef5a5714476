use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use grr_core::camera::{canonical_points, canonical_rays};
use grr_core::geometry::Pose;
use grr_core::losses::{
    geometry_loss, pose_loss_with, regularization_loss, total_loss, DomainLabel, DomainTerms,
    LossTerms,
};
use grr_core::solver::recover_pose;
use grr_core::stats::mean;
use grr_core::GrrError;
use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use super::{print_json, Outcome};
use crate::config::{read_pose_file, RunConfig};
use crate::repsets::{count_frames, ensure_dir, read_frame, write_text};

#[derive(Debug, Clone, Copy)]
struct Logits {
    domain: DomainLabel,
    ray: f64,
    point: f64,
}

#[derive(Debug, Serialize)]
struct FrameJson {
    frame: usize,
    domain: &'static str,
    status: String,
    pose: Option<f64>,
    geo: Option<f64>,
    reg: Option<f64>,
    /// True when the neighbor set is empty (a 1×1 grid) and `reg` is 0.
    reg_skipped: bool,
    sum: Option<f64>,
    domain_loss: Option<f64>,
}

#[derive(Debug, Serialize)]
struct LossJson {
    p: i32,
    frames: Vec<FrameJson>,
    /// Mean per-frame `pose + geo + reg` over each domain's valid frames.
    l_syn: f64,
    l_real: f64,
    l_domain_syn: Option<f64>,
    l_domain_real: Option<f64>,
    total: f64,
    failures: usize,
}

fn domain_name(d: DomainLabel) -> &'static str {
    match d {
        DomainLabel::Synthetic => "synthetic",
        DomainLabel::Real => "real",
    }
}

/// `frame,domain,ray_logit,point_logit` with `domain` in
/// `{synthetic, real}`; rows must cover frames `0..n` in order.
fn read_logits(path: &Path, frames: usize) -> Result<Vec<Logits>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == "frame,domain,ray_logit,point_logit" => {}
        other => bail!("{}: unexpected header {:?}", path.display(), other),
    }
    let mut out = Vec::with_capacity(frames);
    for (k, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            bail!("{}: row {k} has {} fields", path.display(), f.len());
        }
        if f[0].parse::<usize>().ok() != Some(k) {
            bail!("{}: row {k} has frame {:?}", path.display(), f[0]);
        }
        let domain = match f[1] {
            "synthetic" | "syn" => DomainLabel::Synthetic,
            "real" => DomainLabel::Real,
            d => bail!("{}: unknown domain {d:?}", path.display()),
        };
        out.push(Logits {
            domain,
            ray: f[2].parse().with_context(|| format!("row {k} ray_logit"))?,
            point: f[3]
                .parse()
                .with_context(|| format!("row {k} point_logit"))?,
        });
    }
    if out.len() != frames {
        bail!(
            "{}: {} rows for {} frames",
            path.display(),
            out.len(),
            frames
        );
    }
    Ok(out)
}

fn frame_terms(
    cfg: &RunConfig,
    k: usize,
    given_pose: Option<&Pose>,
    ctx: &Ctx<'_>,
) -> Result<std::result::Result<(LossTerms, bool), GrrError>> {
    let n = ctx.rays_cam.len();
    let (rays_pred, pts_pred) = read_frame(ctx.pred_dir, k, n)?;
    let (rays_gt, pts_gt) = read_frame(ctx.gt_dir, k, n)?;
    let w = &cfg.weights;
    let p = cfg.schedule.p();
    let eval = || -> Result<(LossTerms, bool), GrrError> {
        let pose = match given_pose {
            Some(pose) => *pose,
            None => recover_pose(ctx.rays_cam, ctx.pts_cam, &rays_pred, &pts_pred)?.pose,
        };
        let gt = &ctx.gt_poses[k];
        let geo = geometry_loss(&rays_pred, &rays_gt, &pts_pred, &pts_gt, w, p)?;
        let (reg, skipped) = if ctx.neighbors.is_empty() {
            (0.0, true)
        } else {
            let reg = regularization_loss(
                &rays_pred,
                &pts_pred,
                ctx.rays_cam,
                &pts_gt,
                ctx.neighbors,
                w,
                p,
            )?;
            (reg, false)
        };
        Ok((
            LossTerms {
                pose: pose_loss_with(&pose.r, &pose.t, gt, w, p, cfg.translation_penalty),
                geo,
                reg,
            },
            skipped,
        ))
    };
    Ok(eval())
}

struct Ctx<'a> {
    rays_cam: &'a grr_core::camera::RayBundle,
    pts_cam: &'a grr_core::camera::PointMap,
    pred_dir: &'a Path,
    gt_dir: &'a Path,
    gt_poses: &'a [Pose],
    neighbors: &'a grr_core::losses::NeighborSet,
}

/// Evaluates the loss stack over `predictions_dir` against `gt_dir` and
/// `gt_poses_file`. Poses come from `pred_poses_file` when given, otherwise
/// from the solver. Writes `loss.json` and prints the same document.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let grid = cfg.grid()?;
    let rays_cam = canonical_rays(&grid)?;
    let pts_cam = canonical_points(&rays_cam);
    let (Some(pred), Some(gt), Some(gt_poses)) =
        (&cfg.predictions_dir, &cfg.gt_dir, &cfg.gt_poses_file)
    else {
        bail!("loss needs \"predictions_dir\", \"gt_dir\" and \"gt_poses_file\"");
    };
    let pred_dir = cfg.resolve(pred);
    let gt_dir = cfg.resolve(gt);
    let frames = count_frames(&pred_dir)?;
    if count_frames(&gt_dir)? != frames {
        bail!("prediction and ground-truth sets differ in frame count");
    }
    let gt_poses = read_pose_file(&cfg.resolve(gt_poses))?;
    if gt_poses.len() != frames {
        bail!("{} ground-truth poses for {frames} frames", gt_poses.len());
    }
    let pred_poses = match &cfg.pred_poses_file {
        Some(p) => {
            let poses = read_pose_file(&cfg.resolve(p))?;
            if poses.len() != frames {
                bail!("{} predicted poses for {frames} frames", poses.len());
            }
            Some(poses)
        }
        None => None,
    };
    let logits = match &cfg.logits_file {
        Some(p) => Some(read_logits(&cfg.resolve(p), frames)?),
        None => None,
    };
    let neighbors = cfg.neighbor_set(grid.n);
    let ctx = Ctx {
        rays_cam: &rays_cam,
        pts_cam: &pts_cam,
        pred_dir: &pred_dir,
        gt_dir: &gt_dir,
        gt_poses: &gt_poses,
        neighbors: &neighbors,
    };

    let results = (0..frames)
        .into_par_iter()
        .map(|k| frame_terms(cfg, k, pred_poses.as_ref().map(|v| &v[k]), &ctx))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(frames);
    let mut sums = [Vec::new(), Vec::new()];
    let mut doms = [Vec::new(), Vec::new()];
    for (k, res) in results.into_iter().enumerate() {
        let lg = logits.as_ref().map(|l| l[k]);
        let domain = lg.map_or(DomainLabel::Synthetic, |l| l.domain);
        let slot = usize::from(domain == DomainLabel::Real);
        let domain_loss = lg.map(|l| DomainTerms::branch_sum(l.ray, l.point, l.domain));
        if let Some(d) = domain_loss {
            doms[slot].push(d);
        }
        let row = match res {
            Ok((terms, skipped)) => {
                sums[slot].push(terms.sum());
                FrameJson {
                    frame: k,
                    domain: domain_name(domain),
                    status: "ok".into(),
                    pose: Some(terms.pose),
                    geo: Some(terms.geo),
                    reg: Some(terms.reg),
                    reg_skipped: skipped,
                    sum: Some(terms.sum()),
                    domain_loss,
                }
            }
            Err(e) => {
                warn!("frame {k}: {e}");
                FrameJson {
                    frame: k,
                    domain: domain_name(domain),
                    status: grr_core::simulator::FrameStatus::from_error(&e)
                        .as_str()
                        .into(),
                    pose: None,
                    geo: None,
                    reg: None,
                    reg_skipped: false,
                    sum: None,
                    domain_loss,
                }
            }
        };
        rows.push(row);
    }
    let failures = rows.iter().filter(|r| r.sum.is_none()).count();
    let l_syn = mean(&sums[0]).unwrap_or(0.0);
    let l_real = mean(&sums[1]).unwrap_or(0.0);
    let l_domain_syn = logits.as_ref().map(|_| mean(&doms[0]).unwrap_or(0.0));
    let l_domain_real = logits.as_ref().map(|_| mean(&doms[1]).unwrap_or(0.0));
    // Each domain's loss enters as a single "pose" term so total_loss applies
    // the weights exactly once.
    let as_terms = |v: f64| LossTerms {
        pose: v,
        geo: 0.0,
        reg: 0.0,
    };
    let total = total_loss(
        &as_terms(l_syn),
        &as_terms(l_real),
        &DomainTerms {
            syn: l_domain_syn.unwrap_or(0.0),
            real: l_domain_real.unwrap_or(0.0),
        },
        &cfg.weights,
    );
    let doc = LossJson {
        p: cfg.schedule.p().exponent(),
        frames: rows,
        l_syn,
        l_real,
        l_domain_syn,
        l_domain_real,
        total,
        failures,
    };
    ensure_dir(out)?;
    write_text(&out.join("loss.json"), &serde_json::to_string_pretty(&doc)?)?;
    print_json(&doc)?;
    Ok(if failures > 0 {
        Outcome::Degenerate
    } else {
        Outcome::Success
    })
}
