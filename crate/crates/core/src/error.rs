use std::fmt;

use thiserror::Error;

/// Which solver branch produced a failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    /// Rotation-only alignment of ray directions.
    Ray,
    /// Rigid registration of the pointmap.
    Point,
    /// A solver called directly, outside `recover_pose`.
    Direct,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Branch::Ray => f.write_str("ray"),
            Branch::Point => f.write_str("point"),
            Branch::Direct => f.write_str("direct"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrrError {
    #[error("matrix is not a rotation (orthogonality error {ortho_err:.3e}, det {det})")]
    InvalidRotation { ortho_err: f64, det: f64 },

    #[error("{branch} branch: degenerate configuration (sigma2/sigma1 = {ratio:.3e})")]
    DegenerateConfiguration { branch: Branch, ratio: f64 },

    #[error("near-singular jacobian: sigma_{i} and sigma_{j} too close ({value:.3e})")]
    NearSingularJacobian { i: usize, j: usize, value: f64 },

    #[error("neighbor set is empty")]
    EmptyNeighborSet,

    #[error("patch ({row}, {col}) contains no pixels")]
    EmptyPatch { row: usize, col: usize },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = GrrError> = std::result::Result<T, E>;
