use std::path::Path;

use anyhow::Result;
use grr_core::camera::{canonical_points, canonical_rays, world_points, world_rays};
use grr_core::geometry::write_poses;
use grr_core::simulator::perturb_with_seed;
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use super::{print_json, Outcome};
use crate::config::RunConfig;
use crate::repsets::{ensure_dir, write_csv_file, write_frame, write_text};

#[derive(Serialize)]
struct GenSummary {
    frames: usize,
    patches: usize,
    predictions: bool,
}

/// Layout under `out`:
/// `canonical_rays.csv`, `canonical_points.csv`, `gt_poses.txt`, `gt/`
/// (world-frame ground truth per frame) and, when the config lists noise,
/// `pred/` perturbed with the first noise entry.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let grid = cfg.grid()?;
    let rays_cam = canonical_rays(&grid)?;
    let pts_cam = canonical_points(&rays_cam);
    let poses = cfg.poses()?;
    let noise = cfg.noise_specs().first().copied();
    if let Some(n) = &noise {
        n.validate()?;
    }

    ensure_dir(out)?;
    write_csv_file(&out.join("canonical_rays.csv"), &rays_cam.dirs)?;
    write_csv_file(&out.join("canonical_points.csv"), &pts_cam.pts)?;
    let mut buf = Vec::new();
    write_poses(&mut buf, &poses)?;
    write_text(&out.join("gt_poses.txt"), std::str::from_utf8(&buf)?)?;

    let gt_dir = out.join("gt");
    let pred_dir = out.join("pred");
    ensure_dir(&gt_dir)?;
    if noise.is_some() {
        ensure_dir(&pred_dir)?;
    }
    poses
        .par_iter()
        .enumerate()
        .try_for_each(|(k, pose)| -> Result<()> {
            let d = world_rays(pose, &rays_cam);
            let p = world_points(pose, &pts_cam);
            write_frame(&gt_dir, k, &d, &p)?;
            if let Some(spec) = &noise {
                let (dn, pn) = perturb_with_seed(&d, &p, spec, spec.seed.derive(k as u64))?;
                write_frame(&pred_dir, k, &dn, &pn)?;
            }
            Ok(())
        })?;
    info!("wrote {} frames to {}", poses.len(), out.display());
    print_json(&GenSummary {
        frames: poses.len(),
        patches: rays_cam.len(),
        predictions: noise.is_some(),
    })?;
    Ok(Outcome::Success)
}
