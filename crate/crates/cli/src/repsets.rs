//! Representation sets on disk: one directory holding
//! `frame_NNNNN_rays.csv` and `frame_NNNNN_points.csv` per frame.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use grr_core::camera::{read_vectors_csv, write_vectors_csv, PointMap, RayBundle};
use nalgebra::Vector3;

pub fn rays_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join(format!("frame_{frame:05}_rays.csv"))
}

pub fn points_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join(format!("frame_{frame:05}_points.csv"))
}

pub fn write_csv_file(path: &Path, vectors: &[Vector3<f64>]) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    write_vectors_csv(&mut w, vectors).with_context(|| format!("writing {}", path.display()))?;
    w.flush()?;
    Ok(())
}

pub fn read_csv_file(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_vectors_csv(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_frame(dir: &Path, frame: usize, rays: &RayBundle, pts: &PointMap) -> Result<()> {
    write_csv_file(&rays_path(dir, frame), &rays.dirs)?;
    write_csv_file(&points_path(dir, frame), &pts.pts)
}

/// Number of consecutive frames starting at 0 present in `dir`.
pub fn count_frames(dir: &Path) -> Result<usize> {
    if !dir.is_dir() {
        bail!("representation directory {} does not exist", dir.display());
    }
    let mut n = 0;
    while rays_path(dir, n).exists() {
        n += 1;
    }
    Ok(n)
}

/// Reads frame `frame`, checking both files hold `expected` rows.
pub fn read_frame(dir: &Path, frame: usize, expected: usize) -> Result<(RayBundle, PointMap)> {
    let rays = read_csv_file(&rays_path(dir, frame))?;
    let pts = read_csv_file(&points_path(dir, frame))?;
    if rays.len() != expected || pts.len() != expected {
        bail!(
            "frame {frame}: expected {expected} rows, found {} rays and {} points",
            rays.len(),
            pts.len()
        );
    }
    Ok((RayBundle::new(rays), PointMap::new(pts)))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating directory {}", dir.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
