use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use grr_core::camera::PatchGrid;
use grr_core::geometry::{read_poses, sample_rotation, Pose, Seed};
use grr_core::losses::{LossWeights, NeighborSet, NormSchedule, TranslationPenalty};
use grr_core::simulator::{sample_poses, NoiseMode, NoiseSpec, PosePerturbSpec};
use nalgebra::Vector3;
use rand::Rng;
use serde::Deserialize;

/// Either an inline grid object or a path to a JSON file holding one.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum GridSource {
    Inline(PatchGrid),
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomPoses {
    #[serde(default = "default_pose_count")]
    pub count: usize,
    /// Camera centers are uniform in `[-extent, extent]³`.
    #[serde(default = "default_extent")]
    pub extent: f64,
}

fn default_pose_count() -> usize {
    100
}

fn default_extent() -> f64 {
    5.0
}

impl Default for RandomPoses {
    fn default() -> Self {
        RandomPoses {
            count: default_pose_count(),
            extent: default_extent(),
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    pub sigma_t: f64,
    pub sigma_r: f64,
    pub count: usize,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub ray_sigma: f64,
    #[serde(default)]
    pub point_sigma: f64,
    pub point_bias: Option<[f64; 3]>,
    #[serde(default)]
    pub mode: NoiseMode,
    pub seed: Option<u64>,
}

impl NoiseConfig {
    fn to_spec(self, run_seed: Seed) -> NoiseSpec {
        NoiseSpec {
            ray_sigma: self.ray_sigma,
            point_sigma: self.point_sigma,
            point_bias: self.point_bias,
            mode: self.mode,
            seed: self.seed.map_or(run_seed, Seed),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradOpName {
    Rotation,
    Rigid,
    LossTotal,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    #[serde(default = "default_op")]
    pub op: GradOpName,
    /// Correspondences for the solver ops; patches per side for `loss_total`.
    pub size: Option<usize>,
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Collinear instance, for exercising the degenerate path.
    #[serde(default)]
    pub degenerate: bool,
    #[serde(default = "default_grad_noise")]
    pub noise: f64,
}

fn default_op() -> GradOpName {
    GradOpName::Rotation
}

fn default_h() -> f64 {
    1e-5
}

fn default_threshold() -> f64 {
    1e-4
}

fn default_grad_noise() -> f64 {
    0.1
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            op: default_op(),
            size: None,
            h: default_h(),
            threshold: default_threshold(),
            degenerate: false,
            noise: default_grad_noise(),
        }
    }
}

fn default_unit_scale() -> f64 {
    1.0
}

/// Experiment configuration shared by every subcommand. Relative paths are
/// resolved against the config file's directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: Option<GridSource>,
    pub poses_file: Option<PathBuf>,
    pub random_poses: Option<RandomPoses>,
    pub perturb: Option<PerturbConfig>,
    #[serde(default)]
    pub noise: Vec<NoiseConfig>,
    /// Ground-truth representation set (for `loss`).
    pub gt_dir: Option<PathBuf>,
    /// Predicted representation set (for `solve` and `loss`).
    pub predictions_dir: Option<PathBuf>,
    pub gt_poses_file: Option<PathBuf>,
    pub pred_poses_file: Option<PathBuf>,
    pub logits_file: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub schedule: NormSchedule,
    #[serde(default)]
    pub translation_penalty: TranslationPenalty,
    #[serde(default)]
    pub neighbors: Connectivity,
    #[serde(default)]
    pub seed: u64,
    /// Multiplier from scene units to reported translation units (e.g. 100 for m → cm).
    #[serde(default = "default_unit_scale")]
    pub unit_scale: f64,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config deserializes")
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig {
                base_dir: PathBuf::from("."),
                ..Default::default()
            });
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.unit_scale.is_finite() && self.unit_scale > 0.0) {
            bail!("unit_scale must be positive");
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn run_seed(&self) -> Seed {
        Seed(self.seed)
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        let grid = match &self.grid {
            None => bail!("config has no \"grid\""),
            Some(GridSource::Inline(g)) => *g,
            Some(GridSource::File(p)) => {
                let path = self.resolve(p);
                let text = fs::read_to_string(&path)
                    .with_context(|| format!("reading grid {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing grid {}", path.display()))?
            }
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn neighbor_set(&self, n: usize) -> NeighborSet {
        match self.neighbors {
            Connectivity::Four => NeighborSet::four_connected(n),
            Connectivity::Eight => NeighborSet::eight_connected(n),
        }
    }

    pub fn noise_specs(&self) -> Vec<NoiseSpec> {
        self.noise
            .iter()
            .map(|n| n.to_spec(self.run_seed()))
            .collect()
    }

    /// Poses from `poses_file`, else seeded random poses; then augmented by
    /// `perturb` when present.
    pub fn poses(&self) -> Result<Vec<Pose>> {
        let base = match &self.poses_file {
            Some(p) => read_pose_file(&self.resolve(p))?,
            None => random_poses(self.run_seed(), self.random_poses.unwrap_or_default()),
        };
        match self.perturb {
            None => Ok(base),
            Some(pc) => {
                let spec = PosePerturbSpec {
                    sigma_t: pc.sigma_t,
                    sigma_r: pc.sigma_r,
                    count: pc.count,
                    seed: pc.seed.map_or(self.run_seed().derive(1), Seed),
                };
                Ok(sample_poses(&base, &spec)?)
            }
        }
    }

    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        match (flag, &self.output_dir) {
            (Some(f), _) => f.to_path_buf(),
            (None, Some(p)) => self.resolve(p),
            (None, None) => PathBuf::from("."),
        }
    }
}

pub fn read_pose_file(path: &Path) -> Result<Vec<Pose>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading poses {}", path.display()))?;
    read_poses(text.as_bytes()).with_context(|| format!("parsing poses {}", path.display()))
}

pub fn random_poses(seed: Seed, spec: RandomPoses) -> Vec<Pose> {
    let mut rng = seed.derive(0).rng();
    (0..spec.count)
        .map(|_| {
            let r = sample_rotation(&mut rng);
            let e = spec.extent;
            let t = Vector3::new(
                rng.random_range(-e..=e),
                rng.random_range(-e..=e),
                rng.random_range(-e..=e),
            );
            Pose { r, t }
        })
        .collect()
}
