use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use grr_core::camera::{canonical_points, canonical_rays};
use grr_core::geometry::format_pose;
use grr_core::simulator::{FrameRecord, FrameStatus, TrialReport};
use grr_core::solver::{recover_pose, PoseEstimate};
use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use super::{print_json, Outcome};
use crate::config::{read_pose_file, RunConfig};
use crate::repsets::{count_frames, ensure_dir, read_frame, write_text};

/// Median errors over successfully solved frames; translation is in
/// scene units times `unit_scale`.
#[derive(Debug, Serialize)]
pub struct MetricsSummary {
    pub median_translation: Option<f64>,
    pub median_rotation_deg: Option<f64>,
    pub median_rotation_points_deg: Option<f64>,
    pub frame_count: usize,
    pub failure_count: usize,
    pub unit_scale: f64,
}

impl MetricsSummary {
    pub fn from_report(report: &TrialReport, unit_scale: f64, has_gt: bool) -> Self {
        let gate = |v: Option<f64>| if has_gt { v } else { None };
        MetricsSummary {
            median_translation: gate(report.median_trans_err.map(|t| t * unit_scale)),
            median_rotation_deg: gate(report.median_rot_err_rays_deg),
            median_rotation_points_deg: gate(report.median_rot_err_points_deg),
            frame_count: report.records.len(),
            failure_count: report.failure_count(),
            unit_scale,
        }
    }
}

/// Reads `predictions_dir`, writes `poses_pred.txt` (a line of `nan` for a
/// failed frame), `solve_frames.csv` and `metrics.json` to `out`.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let grid = cfg.grid()?;
    let rays_cam = canonical_rays(&grid)?;
    let pts_cam = canonical_points(&rays_cam);
    let Some(pred) = &cfg.predictions_dir else {
        bail!("config has no \"predictions_dir\"");
    };
    let pred_dir = cfg.resolve(pred);
    let frames = count_frames(&pred_dir)?;
    let gt = match &cfg.gt_poses_file {
        Some(p) => {
            let poses = read_pose_file(&cfg.resolve(p))?;
            if poses.len() != frames {
                bail!("{} ground-truth poses for {} frames", poses.len(), frames);
            }
            Some(poses)
        }
        None => None,
    };

    let n = rays_cam.len();
    let solved: Vec<(Option<PoseEstimate>, FrameRecord)> = (0..frames)
        .into_par_iter()
        .map(|k| -> Result<_> {
            let (d, p) = read_frame(&pred_dir, k, n)?;
            Ok(match recover_pose(&rays_cam, &pts_cam, &d, &p) {
                Ok(est) => {
                    let rec = match &gt {
                        Some(g) => FrameRecord::from_estimate(k, &est, &g[k]),
                        None => FrameRecord {
                            status: FrameStatus::Ok,
                            ..FrameRecord::failed(k, FrameStatus::Ok)
                        },
                    };
                    (Some(est), rec)
                }
                Err(e) => {
                    warn!("frame {k}: {e}");
                    (None, FrameRecord::failed(k, FrameStatus::from_error(&e)))
                }
            })
        })
        .collect::<Result<_>>()?;

    ensure_dir(out)?;
    let path = out.join("poses_pred.txt");
    let mut w = BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    );
    for (est, _) in &solved {
        match est {
            Some(e) => writeln!(w, "{}", format_pose(&e.pose))?,
            None => writeln!(w, "{}", ["nan"; 12].join(" "))?,
        }
    }
    w.flush()?;

    let report = TrialReport::from_records(solved.into_iter().map(|(_, r)| r).collect());
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_text(&out.join("solve_frames.csv"), std::str::from_utf8(&csv)?)?;

    let summary = MetricsSummary::from_report(&report, cfg.unit_scale, gt.is_some());
    write_text(
        &out.join("metrics.json"),
        &serde_json::to_string_pretty(&summary)?,
    )?;
    print_json(&summary)?;
    Ok(Outcome::Success)
}
