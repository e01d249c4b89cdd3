use std::collections::BTreeMap;

use super::{dist2, Point, PointCloud, PointCloudError};

/// Greedy max-min selection of `k` indices starting from `seed`.
///
/// Ties are broken by the lowest point index.
pub fn farthest_point_indices(
    coords: &[Point],
    k: usize,
    seed: usize,
) -> Result<Vec<usize>, PointCloudError> {
    if seed >= coords.len() {
        return Err(PointCloudError::SeedOutOfRange {
            seed,
            n: coords.len(),
        });
    }
    fps_extend(coords, &[seed], k)
}

/// Continues farthest-point selection from an already chosen set until `k`
/// indices are selected. The preselected indices come first in the output.
pub fn fps_extend(
    coords: &[Point],
    preselected: &[usize],
    k: usize,
) -> Result<Vec<usize>, PointCloudError> {
    let n = coords.len();
    if k > n {
        return Err(PointCloudError::TooSmall {
            requested: k,
            available: n,
        });
    }
    if preselected.is_empty() {
        return Err(PointCloudError::InvalidAugment(
            "fps needs at least one start point".into(),
        ));
    }
    let mut selected: Vec<usize> = preselected.iter().copied().take(k).collect();
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    for &s in &selected {
        taken[s] = true;
        let p = coords[s];
        for (d, q) in min_d.iter_mut().zip(coords) {
            *d = d.min(dist2(&p, q));
        }
    }
    while selected.len() < k {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if !taken[i] && d > best_d {
                best_d = d;
                best = i;
            }
        }
        taken[best] = true;
        selected.push(best);
        let p = coords[best];
        for (d, q) in min_d.iter_mut().zip(coords) {
            *d = d.min(dist2(&p, q));
        }
    }
    Ok(selected)
}

pub fn farthest_point_sample(
    pc: &PointCloud,
    k: usize,
    seed_index: usize,
) -> Result<PointCloud, PointCloudError> {
    if k == 0 {
        return Err(PointCloudError::InvalidAugment(
            "k must be at least 1".into(),
        ));
    }
    let idx = farthest_point_indices(&pc.coords, k, seed_index)?;
    Ok(pc.select(&idx))
}

fn voxel_key(p: &Point, cell: f64) -> [i64; 3] {
    [
        (p[0] / cell).floor() as i64,
        (p[1] / cell).floor() as i64,
        (p[2] / cell).floor() as i64,
    ]
}

/// One representative per occupied voxel: the member nearest the voxel's
/// point centroid, ties by lowest index. Output is in ascending index order.
pub fn voxel_sample_indices(
    coords: &[Point],
    cell_size: f64,
) -> Result<Vec<usize>, PointCloudError> {
    if !(cell_size > 0.0 && cell_size.is_finite()) {
        return Err(PointCloudError::InvalidCellSize(cell_size));
    }
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in coords.iter().enumerate() {
        cells.entry(voxel_key(p, cell_size)).or_default().push(i);
    }
    let mut reps: Vec<usize> = cells
        .values()
        .map(|members| {
            let inv = 1.0 / members.len() as f64;
            let mut c = [0.0; 3];
            for &i in members {
                for (ck, pk) in c.iter_mut().zip(&coords[i]) {
                    *ck += pk * inv;
                }
            }
            let mut best = members[0];
            let mut best_d = f64::INFINITY;
            for &i in members {
                let d = dist2(&coords[i], &c);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best
        })
        .collect();
    reps.sort_unstable();
    Ok(reps)
}

pub fn voxel_sample(pc: &PointCloud, cell_size: f64) -> Result<PointCloud, PointCloudError> {
    let idx = voxel_sample_indices(&pc.coords, cell_size)?;
    Ok(pc.select(&idx))
}

/// Centers on the centroid and scales so the farthest point has norm 1.
/// A cloud of identical points is only centered.
pub fn normalize_coords(coords: &[Point]) -> Vec<Point> {
    let n = coords.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in coords {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    for v in &mut c {
        *v /= n;
    }
    let centered: Vec<Point> = coords
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let radius = centered
        .iter()
        .map(|p| dist2(p, &[0.0; 3]).sqrt())
        .fold(0.0, f64::max);
    if radius == 0.0 {
        return centered;
    }
    centered
        .into_iter()
        .map(|p| [p[0] / radius, p[1] / radius, p[2] / radius])
        .collect()
}

/// Indices of the `count` points nearest to `anchor` (a ball crop whose
/// radius is the distance to the `count`-th neighbour), ties by lowest
/// index, returned in ascending index order.
pub fn ball_crop_indices(coords: &[Point], anchor: &Point, count: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = coords
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2(p, anchor), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut idx: Vec<usize> = order.into_iter().take(count).map(|(_, i)| i).collect();
    idx.sort_unstable();
    idx
}
