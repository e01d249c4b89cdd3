//! Synthetic indoor-like scenes built from labeled primitive surfaces.
//!
//! Every class has a fixed prototype (shape kind, size, resting height)
//! shared by all scenes, so the same class looks alike across scenes while
//! pose, placement and noise vary per object.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use super::{Point, PointCloud, PointCloudError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Plane,
    Box,
    Sphere,
    Cylinder,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassPrototype {
    pub kind: ShapeKind,
    /// Extents `(x, y, z)` for planes and boxes, `(radius, radius, height)`
    /// for cylinders, `(radius, radius, radius)` for spheres.
    pub dims: [f64; 3],
    /// Height of the lowest point of the object above the floor.
    pub elevation: f64,
}

/// Fixed prototype of class `c`.
pub fn class_prototype(c: u32) -> ClassPrototype {
    const KINDS: [ShapeKind; 4] = [
        ShapeKind::Plane,
        ShapeKind::Box,
        ShapeKind::Sphere,
        ShapeKind::Cylinder,
    ];
    let kind = KINDS[c as usize % 4];
    let tier = (c / 4) as f64;
    let s = 1.0 + 0.6 * tier;
    let (dims, elevation) = match kind {
        ShapeKind::Plane => ([1.6 * s, 1.2 * s, 0.0], 0.0 + 1.8 * tier),
        ShapeKind::Box => ([0.8 * s, 0.6 * s, 0.7 * s], 0.0 + 0.9 * tier),
        ShapeKind::Sphere => ([0.35 * s; 3], 0.6 + 0.5 * tier),
        ShapeKind::Cylinder => ([0.2 * s, 0.2 * s, 1.4 * s], 0.0),
    };
    ClassPrototype {
        kind,
        dims,
        elevation,
    }
}

/// Parameters of a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub classes: u32,
    pub objects_per_scene: usize,
    pub points_per_object: usize,
    pub noise_sigma: f64,
    /// Side length of the square floor area objects are placed on.
    pub room_size: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            classes: 6,
            objects_per_scene: 4,
            points_per_object: 1200,
            noise_sigma: 0.005,
            room_size: 4.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), PointCloudError> {
        if self.classes == 0 {
            return Err(PointCloudError::InvalidSpec(
                "classes must be at least 1".into(),
            ));
        }
        if self.objects_per_scene == 0 || self.points_per_object == 0 {
            return Err(PointCloudError::InvalidSpec(
                "objects_per_scene and points_per_object must be positive".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(PointCloudError::InvalidSpec(
                "noise_sigma must be finite and >= 0".into(),
            ));
        }
        if !(self.room_size > 0.0 && self.room_size.is_finite()) {
            return Err(PointCloudError::InvalidSpec(
                "room_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Class assignment: the first scenes walk the class list round-robin so
/// that every class lands in two distinct scenes; later scenes use a random
/// rotation of the same round-robin.
fn assign_classes(
    spec: &SceneSpec,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<u32>>, PointCloudError> {
    let k = spec.classes as usize;
    let per = spec.objects_per_scene;
    let covering_slots = if per >= k { 2 * per } else { 2 * k };
    if count * per < covering_slots || count < 2 {
        return Err(PointCloudError::CoverageUnsatisfiable(format!(
            "{count} scenes x {per} objects cannot place each of {k} classes in two scenes"
        )));
    }
    let covering_scenes = covering_slots.div_ceil(per);
    let mut out = Vec::with_capacity(count);
    for s in 0..count {
        let offset = if s < covering_scenes {
            s * per
        } else {
            rng.random_range(0..k)
        };
        out.push((0..per).map(|o| ((offset + o) % k) as u32).collect());
    }
    Ok(out)
}

fn sample_surface(proto: &ClassPrototype, rng: &mut ChaCha8Rng) -> Point {
    let [a, b, c] = proto.dims;
    match proto.kind {
        ShapeKind::Plane => [
            rng.random_range(-0.5..0.5) * a,
            rng.random_range(-0.5..0.5) * b,
            0.0,
        ],
        ShapeKind::Box => {
            let areas = [b * c, b * c, a * c, a * c, a * b, a * b];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.random_range(0.0..total);
            let mut face = 0;
            while face < 5 && pick >= areas[face] {
                pick -= areas[face];
                face += 1;
            }
            let (u, v) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let sign = if face % 2 == 0 { -0.5 } else { 0.5 };
            match face / 2 {
                0 => [sign * a, u * b, (v + 0.5) * c],
                1 => [u * a, sign * b, (v + 0.5) * c],
                _ => [u * a, v * b, (sign + 0.5) * c],
            }
        }
        ShapeKind::Sphere => {
            let d: [f64; 3] = UnitSphere.sample(rng);
            [d[0] * a, d[1] * a, d[2] * a + a]
        }
        ShapeKind::Cylinder => {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            [a * theta.cos(), a * theta.sin(), rng.random_range(0.0..c)]
        }
    }
}

/// Generates `count` labeled scenes. Output is a pure function of `spec`
/// and `count`.
pub fn generate_corpus(spec: &SceneSpec, count: usize) -> Result<Vec<PointCloud>, PointCloudError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes = assign_classes(spec, count, &mut rng)?;
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut scenes = Vec::with_capacity(count);
    for (s, scene_classes) in classes.into_iter().enumerate() {
        let mut coords = Vec::with_capacity(spec.objects_per_scene * spec.points_per_object);
        let mut labels = Vec::with_capacity(coords.capacity());
        for class in scene_classes {
            let proto = class_prototype(class);
            let yaw = rng.random_range(0.0..std::f64::consts::TAU);
            let (sy, cy) = yaw.sin_cos();
            let tx = rng.random_range(0.0..spec.room_size);
            let ty = rng.random_range(0.0..spec.room_size);
            for _ in 0..spec.points_per_object {
                let p = sample_surface(&proto, &mut rng);
                let mut q = [
                    cy * p[0] - sy * p[1] + tx,
                    sy * p[0] + cy * p[1] + ty,
                    p[2] + proto.elevation,
                ];
                if spec.noise_sigma > 0.0 {
                    for v in &mut q {
                        *v += noise.sample(&mut rng);
                    }
                }
                coords.push(q);
                labels.push(class);
            }
        }
        scenes.push(PointCloud::new(
            coords,
            Some(labels),
            format!("scene_{s:04}"),
        )?);
    }
    Ok(scenes)
}
