//! Point-cloud data model, file IO, synthetic labeled scenes, sampling
//! primitives and the multi-region view augmentation.

mod augment;
pub mod io;
mod sampling;
mod synth;

pub use augment::{augment, AugmentConfig, AugmentedViews, View, ViewKind};
pub use sampling::{
    ball_crop_indices, farthest_point_indices, farthest_point_sample, fps_extend, normalize_coords,
    voxel_sample, voxel_sample_indices,
};
pub use synth::{class_prototype, generate_corpus, ClassPrototype, SceneSpec, ShapeKind};

pub type Point = [f64; 3];

#[derive(Debug, thiserror::Error)]
pub enum PointCloudError {
    #[error("point cloud must contain at least one point")]
    Empty,
    #[error("point {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error("label count {labels} does not match point count {points}")]
    LabelCount { labels: usize, points: usize },
    #[error("requested {requested} points from a cloud of {available}")]
    TooSmall { requested: usize, available: usize },
    #[error("seed index {seed} out of range for {n} points")]
    SeedOutOfRange { seed: usize, n: usize },
    #[error("voxel cell size must be positive, got {0}")]
    InvalidCellSize(f64),
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("class coverage cannot be satisfied: {0}")]
    CoverageUnsatisfiable(String),
    #[error("invalid augmentation request: {0}")]
    InvalidAugment(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A set of 3D points with optional per-point semantic labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<Point>,
    pub labels: Option<Vec<u32>>,
    pub scene_id: String,
}

impl PointCloud {
    pub fn new(
        coords: Vec<Point>,
        labels: Option<Vec<u32>>,
        scene_id: impl Into<String>,
    ) -> Result<Self, PointCloudError> {
        let pc = Self {
            coords,
            labels,
            scene_id: scene_id.into(),
        };
        pc.validate()?;
        Ok(pc)
    }

    pub fn validate(&self) -> Result<(), PointCloudError> {
        if self.coords.is_empty() {
            return Err(PointCloudError::Empty);
        }
        if let Some(i) = self
            .coords
            .iter()
            .position(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(PointCloudError::NonFinite(i));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.coords.len() {
                return Err(PointCloudError::LabelCount {
                    labels: l.len(),
                    points: self.coords.len(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// New cloud made of the points at `idx` (repeats allowed).
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            scene_id: self.scene_id.clone(),
        }
    }

    /// Flattened `[N * 3]` coordinates.
    pub fn flat_coords(&self) -> Vec<f64> {
        self.coords.iter().flat_map(|p| p.iter().copied()).collect()
    }
}

pub(crate) fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}
