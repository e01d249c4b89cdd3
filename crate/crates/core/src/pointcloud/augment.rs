//! Multi-region view augmentation.
//!
//! A candidate region covering a fixed share of the scene is cropped first;
//! global and local views are then cropped from the candidate at ratios
//! drawn uniformly from their ranges. Crops are contiguous ball crops around
//! an anchor point: the `round(ratio * n)` points nearest to the anchor. Every
//! view is reduced to exactly `target_points` points and normalized.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sampling::{ball_crop_indices, fps_extend, normalize_coords, voxel_sample_indices};
use super::{Point, PointCloud, PointCloudError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub n_global: usize,
    pub n_local: usize,
    pub target_points: usize,
    pub candidate_ratio: f64,
    pub global_ratio: (f64, f64),
    pub local_ratio: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            n_global: 2,
            n_local: 8,
            target_points: 1024,
            candidate_ratio: 0.6,
            global_ratio: (0.4, 0.8),
            local_ratio: (0.1, 0.3),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewKind {
    Global,
    Local,
}

/// One augmented view.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub kind: ViewKind,
    /// Normalized coordinates (and labels, when the source has them).
    pub cloud: PointCloud,
    /// Index into the source cloud for every point of `cloud`.
    pub provenance: Vec<usize>,
    /// Number of source points in the crop before reduction.
    pub crop_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedViews {
    /// The candidate region, in source coordinates.
    pub candidate: PointCloud,
    /// Indices of the candidate region into the source cloud.
    pub candidate_indices: Vec<usize>,
    pub globals: Vec<View>,
    pub locals: Vec<View>,
}

impl AugmentedViews {
    /// Globals followed by locals.
    pub fn all_views(&self) -> impl Iterator<Item = &View> {
        self.globals.iter().chain(&self.locals)
    }
}

fn crop<R: Rng + ?Sized>(coords: &[Point], ratio: f64, rng: &mut R) -> Vec<usize> {
    let count = ((ratio * coords.len() as f64).round() as usize).clamp(1, coords.len());
    let anchor = coords[rng.random_range(0..coords.len())];
    ball_crop_indices(coords, &anchor, count)
}

/// Pads a selection to `target` by cycling through it.
fn pad_cyclic(mut idx: Vec<usize>, target: usize) -> Vec<usize> {
    let n = idx.len();
    for k in 0..target.saturating_sub(n) {
        idx.push(idx[k % n]);
    }
    idx
}

/// Voxel sampling at the largest occupancy not above `target`, then
/// farthest-point top-up to exactly `target`.
fn reduce_global(coords: &[Point], target: usize) -> Result<Vec<usize>, PointCloudError> {
    if coords.len() <= target {
        return Ok(pad_cyclic((0..coords.len()).collect(), target));
    }
    let extent = bbox_extent(coords).max(1e-9);
    let mut cell = extent / (target as f64).sqrt() / 2.0;
    let mut reps = voxel_sample_indices(coords, cell)?;
    let mut guard = 0;
    while reps.len() > target && guard < 200 {
        cell *= 1.15;
        reps = voxel_sample_indices(coords, cell)?;
        guard += 1;
    }
    reps.truncate(target);
    fps_extend(coords, &reps, target)
}

fn reduce_local<R: Rng + ?Sized>(
    coords: &[Point],
    target: usize,
    rng: &mut R,
) -> Result<Vec<usize>, PointCloudError> {
    if coords.len() <= target {
        return Ok(pad_cyclic((0..coords.len()).collect(), target));
    }
    let seed = rng.random_range(0..coords.len());
    fps_extend(coords, &[seed], target)
}

fn bbox_extent(coords: &[Point]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in coords {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max)
}

fn make_view(
    source: &PointCloud,
    candidate_idx: &[usize],
    local_idx: &[usize],
    crop_size: usize,
    kind: ViewKind,
) -> View {
    let provenance: Vec<usize> = local_idx.iter().map(|&i| candidate_idx[i]).collect();
    let mut cloud = source.select(&provenance);
    cloud.coords = normalize_coords(&cloud.coords);
    View {
        kind,
        cloud,
        provenance,
        crop_size,
    }
}

/// Builds `n_global` global and `n_local` local views of `pc`.
pub fn augment<R: Rng + ?Sized>(
    pc: &PointCloud,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<AugmentedViews, PointCloudError> {
    pc.validate()?;
    if cfg.n_global == 0 || cfg.target_points == 0 {
        return Err(PointCloudError::InvalidAugment(
            "need at least one global view and a positive target size".into(),
        ));
    }
    if pc.len() < cfg.target_points {
        return Err(PointCloudError::TooSmall {
            requested: cfg.target_points,
            available: pc.len(),
        });
    }
    let candidate_idx = crop(&pc.coords, cfg.candidate_ratio, rng);
    let candidate = pc.select(&candidate_idx);
    let mut globals = Vec::with_capacity(cfg.n_global);
    for _ in 0..cfg.n_global {
        let ratio = rng.random_range(cfg.global_ratio.0..=cfg.global_ratio.1);
        let region = crop(&candidate.coords, ratio, rng);
        let region_coords: Vec<Point> = region.iter().map(|&i| candidate.coords[i]).collect();
        let reduced = reduce_global(&region_coords, cfg.target_points)?;
        let idx: Vec<usize> = reduced.iter().map(|&i| region[i]).collect();
        globals.push(make_view(
            pc,
            &candidate_idx,
            &idx,
            region.len(),
            ViewKind::Global,
        ));
    }
    let mut locals = Vec::with_capacity(cfg.n_local);
    for _ in 0..cfg.n_local {
        let ratio = rng.random_range(cfg.local_ratio.0..=cfg.local_ratio.1);
        let region = crop(&candidate.coords, ratio, rng);
        let region_coords: Vec<Point> = region.iter().map(|&i| candidate.coords[i]).collect();
        let reduced = reduce_local(&region_coords, cfg.target_points, rng)?;
        let idx: Vec<usize> = reduced.iter().map(|&i| region[i]).collect();
        locals.push(make_view(
            pc,
            &candidate_idx,
            &idx,
            region.len(),
            ViewKind::Local,
        ));
    }
    Ok(AugmentedViews {
        candidate,
        candidate_indices: candidate_idx,
        globals,
        locals,
    })
}
