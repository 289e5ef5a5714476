//! Pinhole camera, patch tessellation and the canonical ray/point representations.
//!
//! Camera frame is +z forward, +x right, +y down. Pixel `(u, v)` is sampled
//! at its center `(u + 0.5, v + 0.5)`.

use std::io::{BufRead, Write};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{GrrError, Result};
use crate::geometry::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GrrError::InvalidInput(
                "focal lengths must be finite and positive".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GrrError::InvalidInput(
                "image size must be at least 1x1".into(),
            ));
        }
        if !(0.0..=self.width as f64).contains(&self.cx)
            || !(0.0..=self.height as f64).contains(&self.cy)
        {
            return Err(GrrError::InvalidInput(
                "principal point must lie inside the image".into(),
            ));
        }
        Ok(())
    }

    /// Unnormalized camera-frame direction through pixel coordinate `(u, v)`.
    fn pixel_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// An `n × n` tessellation of the image. Deserializes from the flat config
/// object `{"fx", "fy", "cx", "cy", "width", "height", "n"}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub n: usize,
    #[serde(flatten)]
    pub intrinsics: Intrinsics,
}

impl PatchGrid {
    pub fn new(n: usize, intrinsics: Intrinsics) -> Result<Self> {
        let grid = PatchGrid { n, intrinsics };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.n == 0 {
            return Err(GrrError::InvalidInput("patch grid needs n >= 1".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.n * self.n
    }

    /// Half-open pixel range `[floor(k·len/n), floor((k+1)·len/n))`.
    fn bounds(len: usize, n: usize, k: usize) -> (usize, usize) {
        (k * len / n, (k + 1) * len / n)
    }

    /// Pixel columns covered by patch column `col`.
    pub fn col_range(&self, col: usize) -> (usize, usize) {
        Self::bounds(self.intrinsics.width, self.n, col)
    }

    /// Pixel rows covered by patch row `row`.
    pub fn row_range(&self, row: usize) -> (usize, usize) {
        Self::bounds(self.intrinsics.height, self.n, row)
    }
}

/// How a patch's representative direction is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PatchRayMode {
    /// Renormalized mean of the normalized per-pixel rays.
    #[default]
    MeanDirection,
    /// Single ray through the geometric center of the patch.
    CenterPixel,
}

/// Per-patch unit directions, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBundle {
    pub dirs: Vec<Vector3<f64>>,
}

/// Per-patch 3D points, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    pub pts: Vec<Vector3<f64>>,
}

impl RayBundle {
    pub fn new(dirs: Vec<Vector3<f64>>) -> Self {
        RayBundle { dirs }
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }
}

impl PointMap {
    pub fn new(pts: Vec<Vector3<f64>>) -> Self {
        PointMap { pts }
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }
}

pub fn canonical_rays(grid: &PatchGrid) -> Result<RayBundle> {
    canonical_rays_with(grid, PatchRayMode::MeanDirection)
}

pub fn canonical_rays_with(grid: &PatchGrid, mode: PatchRayMode) -> Result<RayBundle> {
    grid.validate()?;
    let k = &grid.intrinsics;
    let mut dirs = Vec::with_capacity(grid.num_patches());
    for row in 0..grid.n {
        let (v0, v1) = grid.row_range(row);
        for col in 0..grid.n {
            let (u0, u1) = grid.col_range(col);
            if u0 == u1 || v0 == v1 {
                return Err(GrrError::EmptyPatch { row, col });
            }
            let sum = match mode {
                PatchRayMode::MeanDirection => {
                    let mut acc = Vector3::zeros();
                    for v in v0..v1 {
                        for u in u0..u1 {
                            acc += k
                                .pixel_direction(u as f64 + 0.5, v as f64 + 0.5)
                                .normalize();
                        }
                    }
                    acc
                }
                PatchRayMode::CenterPixel => {
                    k.pixel_direction((u0 + u1) as f64 * 0.5, (v0 + v1) as f64 * 0.5)
                }
            };
            dirs.push(sum.normalize());
        }
    }
    Ok(RayBundle { dirs })
}

/// Unit-distance points along each camera-frame ray.
pub fn canonical_points(rays: &RayBundle) -> PointMap {
    PointMap {
        pts: rays.dirs.clone(),
    }
}

pub fn world_rays(pose: &Pose, rays_cam: &RayBundle) -> RayBundle {
    RayBundle {
        dirs: rays_cam.dirs.iter().map(|d| pose.r.apply(d)).collect(),
    }
}

pub fn world_points(pose: &Pose, pts_cam: &PointMap) -> PointMap {
    PointMap {
        pts: pts_cam
            .pts
            .iter()
            .map(|p| pose.transform_point(p))
            .collect(),
    }
}

/// Writes `i,x,y,z` rows in patch order.
pub fn write_vectors_csv<W: Write>(mut out: W, vectors: &[Vector3<f64>]) -> std::io::Result<()> {
    writeln!(out, "i,x,y,z")?;
    for (i, v) in vectors.iter().enumerate() {
        writeln!(out, "{i},{},{},{}", v.x, v.y, v.z)?;
    }
    Ok(())
}

/// Reads an `i,x,y,z` CSV; rows must appear in index order starting at 0.
pub fn read_vectors_csv<R: BufRead>(input: R) -> Result<Vec<Vector3<f64>>> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| GrrError::Parse("empty CSV".into()))?
        .map_err(|e| GrrError::Parse(e.to_string()))?;
    if header.trim() != "i,x,y,z" {
        return Err(GrrError::Parse(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line.map_err(|e| GrrError::Parse(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(GrrError::Parse(format!("expected 4 fields in {line:?}")));
        }
        let idx: usize = fields[0]
            .parse()
            .map_err(|_| GrrError::Parse(format!("bad index in {line:?}")))?;
        if idx != out.len() {
            return Err(GrrError::Parse(format!(
                "row index {idx} out of order (expected {})",
                out.len()
            )));
        }
        let mut v = [0.0; 3];
        for (slot, tok) in v.iter_mut().zip(&fields[1..]) {
            *slot = tok
                .parse()
                .map_err(|_| GrrError::Parse(format!("bad number {tok:?}")))?;
        }
        out.push(Vector3::from(v));
    }
    Ok(out)
}
