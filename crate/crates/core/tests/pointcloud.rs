use std::collections::{BTreeSet, HashMap};

use pointcsp::pointcloud::{
    augment, farthest_point_indices, farthest_point_sample, generate_corpus, io, voxel_sample,
    voxel_sample_indices, AugmentConfig, Point, PointCloud, SceneSpec,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn d2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Brute-force max-min selection recomputing every distance at each step.
fn fps_oracle(coords: &[Point], k: usize, seed: usize) -> Vec<usize> {
    let mut chosen = vec![seed];
    while chosen.len() < k {
        let mut best = None;
        let mut best_d = -1.0;
        for i in 0..coords.len() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&c| d2(&coords[i], &coords[c]))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        chosen.push(best.unwrap());
    }
    chosen
}

/// Hash-grid voxel oracle returning the representative set.
fn voxel_oracle(coords: &[Point], cell: f64) -> BTreeSet<usize> {
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in coords.iter().enumerate() {
        let key = (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        );
        grid.entry(key).or_default().push(i);
    }
    grid.values()
        .map(|m| {
            let n = m.len() as f64;
            let c = [0, 1, 2].map(|k| m.iter().map(|&i| coords[i][k]).sum::<f64>() / n);
            *m.iter()
                .min_by(|&&a, &&b| {
                    d2(&coords[a], &c)
                        .total_cmp(&d2(&coords[b], &c))
                        .then(a.cmp(&b))
                })
                .unwrap()
        })
        .collect()
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect()
}

#[test]
fn fps_matches_brute_force_on_64_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let coords = random_cloud(&mut rng, 64);
    assert_eq!(
        farthest_point_indices(&coords, 8, 0).unwrap(),
        fps_oracle(&coords, 8, 0)
    );
}

#[test]
fn fps_and_voxel_match_oracles_on_random_clouds() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let n = rng.random_range(1..=128);
        let coords = random_cloud(&mut rng, n);
        let k = rng.random_range(1..=n);
        let seed = rng.random_range(0..n);
        assert_eq!(
            farthest_point_indices(&coords, k, seed).unwrap(),
            fps_oracle(&coords, k, seed)
        );
        let cell = rng.random_range(0.05..1.5);
        let got: BTreeSet<usize> = voxel_sample_indices(&coords, cell)
            .unwrap()
            .into_iter()
            .collect();
        assert_eq!(got, voxel_oracle(&coords, cell));
    }
}

#[test]
fn voxel_count_equals_occupied_cells_at_quarter_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let coords = random_cloud(&mut rng, 500);
    let pc = PointCloud::new(coords.clone(), None, "r").unwrap();
    assert_eq!(
        voxel_sample(&pc, 0.25).unwrap().len(),
        voxel_oracle(&coords, 0.25).len()
    );
}

#[test]
fn fps_sample_keeps_labels_aligned() {
    let pc = PointCloud::new(
        vec![[0.0; 3], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0]],
        Some(vec![7, 8, 9]),
        "l",
    )
    .unwrap();
    let out = farthest_point_sample(&pc, 2, 0).unwrap();
    assert_eq!(out.labels, Some(vec![7, 9]));
}

fn big_scene() -> PointCloud {
    let spec = SceneSpec {
        classes: 4,
        objects_per_scene: 4,
        points_per_object: 4500,
        seed: 3,
        ..Default::default()
    };
    generate_corpus(&spec, 2).unwrap().remove(0)
}

#[test]
fn default_view_layout_two_global_eight_local_of_1024() {
    let scene = big_scene();
    let cfg = AugmentConfig::default();
    assert_eq!((cfg.n_global, cfg.n_local, cfg.target_points), (2, 8, 1024));
    let views = augment(&scene, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(views.globals.len() + views.locals.len(), 10);
    for v in views.all_views() {
        assert_eq!(v.cloud.len(), 1024);
        assert_eq!(v.provenance.len(), 1024);
    }
}

fn check_views(scene: &PointCloud, cfg: &AugmentConfig, seed: u64) {
    let views = augment(scene, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let n = scene.len() as f64;
    let cand = views.candidate.len() as f64;
    assert!(
        (cand / n - 0.6).abs() <= 0.02,
        "candidate ratio {}",
        cand / n
    );
    let cand_set: BTreeSet<usize> = views.candidate_indices.iter().copied().collect();
    for v in &views.globals {
        let r = v.crop_size as f64 / cand;
        assert!((0.38..=0.82).contains(&r), "global ratio {r}");
    }
    for v in &views.locals {
        let r = v.crop_size as f64 / cand;
        assert!((0.08..=0.32).contains(&r), "local ratio {r}");
    }
    for v in views.all_views() {
        assert_eq!(v.cloud.len(), cfg.target_points);
        assert!(v.provenance.iter().all(|i| cand_set.contains(i)));
        let labels = v.cloud.labels.as_ref().unwrap();
        let src = scene.labels.as_ref().unwrap();
        assert!(v.provenance.iter().zip(labels).all(|(&i, &l)| src[i] == l));
        let m = v.cloud.len() as f64;
        for k in 0..3 {
            let mean: f64 = v.cloud.coords.iter().map(|p| p[k]).sum::<f64>() / m;
            assert!(mean.abs() < 1e-9);
        }
        let r = v
            .cloud
            .coords
            .iter()
            .map(|p| d2(p, &[0.0; 3]).sqrt())
            .fold(0.0, f64::max);
        assert!((r - 1.0).abs() < 1e-9);
    }
}

#[test]
fn augmentation_invariants_hold_with_reduced_targets() {
    let scene = big_scene();
    for (seed, target) in [(1, 256), (2, 128), (3, 512)] {
        check_views(
            &scene,
            &AugmentConfig {
                target_points: target,
                ..Default::default()
            },
            seed,
        );
    }
}

#[test]
fn augmentation_is_deterministic_for_a_seed() {
    let scene = big_scene();
    let cfg = AugmentConfig {
        target_points: 128,
        ..Default::default()
    };
    let a = augment(&scene, &cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let b = augment(&scene, &cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn file_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let pc = generate_corpus(
        &SceneSpec {
            points_per_object: 20,
            ..Default::default()
        },
        3,
    )
    .unwrap()
    .remove(1);
    let text = dir.path().join("a.pcsp");
    io::write(&text, &pc, io::Format::Text).unwrap();
    let back = io::read(&text).unwrap();
    assert_eq!(back.coords, pc.coords);
    assert_eq!(back.labels, pc.labels);
    let bin = dir.path().join("b.pcsp");
    io::write(&bin, &pc, io::Format::Binary).unwrap();
    let back = io::read(&bin).unwrap();
    assert_eq!(back.labels, pc.labels);
    assert_eq!(back.len(), pc.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn local_views_are_subsets_of_candidate(seed in 0u64..10_000) {
        let spec = SceneSpec { classes: 4, objects_per_scene: 4, points_per_object: 300, seed, ..Default::default() };
        let scene = generate_corpus(&spec, 2).unwrap().remove(0);
        let cfg = AugmentConfig { target_points: 64, ..Default::default() };
        let views = augment(&scene, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let cand: BTreeSet<usize> = views.candidate_indices.iter().copied().collect();
        for v in &views.locals {
            prop_assert!(v.provenance.iter().all(|i| cand.contains(i)));
        }
        for v in views.all_views() {
            prop_assert_eq!(v.cloud.len(), 64);
        }
    }
}
