use pointcsp::backbone::{
    forward_rows, forward_values, init_backbone, serialize, ssm_scan, ssm_scan_segments,
    BackboneConfig, FeatureSequence, GateParams, Propagation, SsmBlock, SsmVariant, SsmVars,
};
use pointcsp::numerics::gradcheck::{check_gradients, GradCheckOptions};
use pointcsp::numerics::{ParamStore, Tape, Tensor, Transition};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols)
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn block(
    c: usize,
    h: usize,
    variant: SsmVariant,
    transition: Transition,
    rng: &mut ChaCha8Rng,
) -> SsmBlock {
    let gate = match variant {
        SsmVariant::Static => GateParams::Static(random(1, h, 1.0, rng).reshape(&[h]).unwrap()),
        SsmVariant::Selective => GateParams::Selective {
            weight: random(c, h, 0.5, rng),
            bias: random(1, h, 0.5, rng).reshape(&[h]).unwrap(),
        },
    };
    SsmBlock {
        a: random(h, h, 0.3, rng),
        b: random(c, h, 0.5, rng),
        c: random(h, c, 0.5, rng),
        gate,
        transition,
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Step-by-step evaluation of the recursion with explicit index loops.
fn naive_unroll(x: &Tensor, blk: &SsmBlock, h0: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (c, h) = (blk.b.rows(), blk.a.rows());
    let mut state = h0.to_vec();
    let mut ys = Vec::new();
    for t in 0..x.rows() {
        let xt = x.row(t);
        let mut next = vec![0.0; h];
        for i in 0..h {
            let mut z = 0.0;
            for j in 0..h {
                z += blk.a.at(i, j) * state[j];
            }
            for k in 0..c {
                z += xt[k] * blk.b.at(k, i);
            }
            next[i] = match blk.transition {
                Transition::Identity => z,
                Transition::GatedTanh => {
                    let g = match &blk.gate {
                        GateParams::Static(g) => g.data()[i],
                        GateParams::Selective { weight, bias } => {
                            bias.data()[i] + (0..c).map(|k| xt[k] * weight.at(k, i)).sum::<f64>()
                        }
                    };
                    sigmoid(g) * z.tanh()
                }
            };
        }
        state = next;
        ys.push(
            (0..c)
                .map(|k| (0..h).map(|i| state[i] * blk.c.at(i, k)).sum())
                .collect(),
        );
    }
    (ys, state)
}

#[test]
fn scan_matches_naive_unroll() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for &len in &[4usize, 32, 256] {
        for variant in [SsmVariant::Static, SsmVariant::Selective] {
            let blk = block(5, 6, variant, Transition::GatedTanh, &mut rng);
            let x = random(len, 5, 1.0, &mut rng);
            let h0: Vec<f64> = (0..6).map(|_| rng.random_range(-0.5..0.5)).collect();
            let (y, last) = ssm_scan(&x, &blk, &h0).unwrap();
            let (ys, state) = naive_unroll(&x, &blk, &h0);
            let mut worst: f64 = 0.0;
            for t in 0..len {
                for k in 0..5 {
                    worst = worst.max((y.at(t, k) - ys[t][k]).abs());
                }
            }
            for (a, b) in last.iter().zip(&state) {
                worst = worst.max((a - b).abs());
            }
            assert!(worst <= 1e-10, "len {len} {variant:?}: {worst}");

            let tape = Tape::new();
            let mut params = ParamStore::new();
            blk.write_params(&mut params, "s");
            let vars = SsmVars::register(&tape, &params, "s", blk.transition).unwrap();
            let yt = vars
                .scan(tape.constant(x.clone()), &h0, vec![0..len])
                .value();
            assert!(yt.max_abs_diff(&y) <= 1e-10);
        }
    }
}

#[test]
fn scalar_prefix_sum_is_exact() {
    let blk = SsmBlock {
        a: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
        b: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
        c: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
        gate: GateParams::Static(Tensor::vector(vec![0.0])),
        transition: Transition::Identity,
    };
    let x = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
    let (y, last) = ssm_scan(&x, &blk, &[0.0]).unwrap();
    assert_eq!(y.data(), &[1.0, 3.0, 6.0]);
    assert_eq!(last, vec![6.0]);
}

#[test]
fn zero_state_matrix_removes_token_dependence() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut blk = block(4, 4, SsmVariant::Static, Transition::Identity, &mut rng);
    blk.a = Tensor::zeros(&[4, 4]);
    let x = random(6, 4, 1.0, &mut rng);
    let (y, _) = ssm_scan(&x, &blk, &[0.3; 4]).unwrap();
    let cb = blk.b.matmul(&blk.c);
    let direct = x.matmul(&cb);
    assert!(y.max_abs_diff(&direct) <= 1e-12);
}

#[test]
fn scan_rejects_bad_widths() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let blk = block(4, 5, SsmVariant::Static, Transition::GatedTanh, &mut rng);
    assert!(ssm_scan(&random(3, 4, 1.0, &mut rng), &blk, &[0.0; 4]).is_err());
    assert!(ssm_scan(&random(3, 3, 1.0, &mut rng), &blk, &[0.0; 5]).is_err());
}

#[test]
fn segmented_scan_equals_separate_scans() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let blk = block(3, 4, SsmVariant::Selective, Transition::GatedTanh, &mut rng);
    let a = random(5, 3, 1.0, &mut rng);
    let b = random(7, 3, 1.0, &mut rng);
    let both = Tensor::new(vec![12, 3], [a.data(), b.data()].concat()).unwrap();
    let (y, _) = ssm_scan_segments(&both, &blk, &[0.0; 4], &[0..5, 5..12]).unwrap();
    let (ya, _) = ssm_scan(&a, &blk, &[0.0; 4]).unwrap();
    let (yb, _) = ssm_scan(&b, &blk, &[0.0; 4]).unwrap();
    assert_eq!(y.data(), [ya.data(), yb.data()].concat().as_slice());
}

#[test]
fn scan_gradients_match_finite_differences() {
    for (seed, len) in [(0u64, 4usize), (1, 17), (2, 32)] {
        for variant in [SsmVariant::Static, SsmVariant::Selective] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let blk = block(3, 4, variant, Transition::GatedTanh, &mut rng);
            let mut params = ParamStore::new();
            blk.write_params(&mut params, "s");
            params.insert("x", random(len, 3, 1.0, &mut rng));
            let target = random(len, 3, 1.0, &mut rng);
            let report = check_gradients(
                &params,
                |tape, p| {
                    let vars = SsmVars::register(tape, p, "s", Transition::GatedTanh).unwrap();
                    let x = tape.param("x", p.get("x").unwrap());
                    let y = vars.scan(x, &[0.1, -0.2, 0.0, 0.3], vec![0..len]);
                    (y * tape.constant(target.clone())).sum()
                },
                GradCheckOptions::default(),
            )
            .unwrap();
            assert!(
                report.passes(1e-4),
                "len {len} {variant:?}: {}",
                report.max_rel_error()
            );
        }
    }
}

fn small_cfg() -> BackboneConfig {
    BackboneConfig {
        channels: 8,
        c_out: 8,
        state_width: 8,
        ..Default::default()
    }
}

fn clouds(seed: u64, count: usize, rows: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random(rows, 3, 1.0, &mut rng)).collect()
}

fn max_diff(a: &[(Vec<Tensor>, Tensor)], b: &[(Vec<Tensor>, Tensor)], sample: usize) -> f64 {
    a[sample].1.max_abs_diff(&b[sample].1)
}

#[test]
fn per_sample_path_has_no_cross_sample_coupling() {
    let cfg = small_cfg();
    let params = init_backbone(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let base = clouds(2, 2, 16);
    let mut perturbed = base.clone();
    perturbed[0].data_mut()[5] += 0.7;
    let a = forward_values(&params, &cfg, &base, Propagation::PER_SAMPLE).unwrap();
    let b = forward_values(&params, &cfg, &perturbed, Propagation::PER_SAMPLE).unwrap();
    assert_eq!(a[1].1, b[1].1);
    assert!(max_diff(&a, &b, 0) > 0.0);
}

#[test]
fn cross_sample_path_couples_samples() {
    let cfg = small_cfg();
    let params = init_backbone(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let base = clouds(2, 2, 16);
    let mut perturbed = base.clone();
    for v in perturbed[0].data_mut() {
        *v += 0.3;
    }
    for prop in [
        Propagation::cross_sample(None),
        Propagation::cross_sample(Some(9)),
    ] {
        let a = forward_values(&params, &cfg, &base, prop).unwrap();
        let b = forward_values(&params, &cfg, &perturbed, prop).unwrap();
        assert!(max_diff(&a, &b, 1) > 0.0, "{prop:?}");
    }
}

#[test]
fn unshuffled_coupling_is_causal() {
    let cfg = small_cfg();
    let params = init_backbone(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let base = clouds(5, 3, 12);
    for later in 1..3 {
        let mut perturbed = base.clone();
        perturbed[later].data_mut()[0] += 1.0;
        let a = forward_values(&params, &cfg, &base, Propagation::cross_sample(None)).unwrap();
        let b = forward_values(&params, &cfg, &perturbed, Propagation::cross_sample(None)).unwrap();
        for earlier in 0..later {
            assert_eq!(a[earlier].1, b[earlier].1);
            for (ta, tb) in a[earlier].0.iter().zip(&b[earlier].0) {
                assert_eq!(ta, tb);
            }
        }
        for after in later..3 {
            assert!(max_diff(&a, &b, after) > 0.0);
        }
    }
}

#[test]
fn causal_jacobian_blocks_are_zero() {
    let cfg = small_cfg();
    let params = init_backbone(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let inputs = clouds(7, 3, 6);
    let spans = pointcsp::backbone::spans([6, 6, 6]);
    for (i, j, expect_zero) in [
        (0usize, 1usize, true),
        (0, 2, true),
        (1, 2, true),
        (2, 0, false),
        (1, 0, false),
    ] {
        let tape = Tape::new();
        let xs: Vec<_> = inputs
            .iter()
            .enumerate()
            .map(|(k, x)| tape.param(&format!("x{k}"), x))
            .collect();
        let out = forward_rows(
            &tape,
            &params,
            &cfg,
            tape.concat_rows(&xs),
            spans.clone(),
            Propagation::cross_sample(None),
        )
        .unwrap();
        let cols = cfg.c_out;
        let mask: Vec<f64> = (0..18 * cols)
            .map(|k| {
                if spans[i].contains(&(k / cols)) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let loss = (out.features * tape.constant(Tensor::new(vec![18, cols], mask).unwrap())).sum();
        let g = loss.backward().unwrap();
        let norm = g.get(&format!("x{j}")).unwrap().l2_norm();
        if expect_zero {
            assert_eq!(norm, 0.0, "d y{i} / d x{j}");
        } else {
            assert!(norm > 0.0, "d y{i} / d x{j}");
        }
    }
}

#[test]
fn single_sample_with_zero_state_matrix_ignores_propagation_mode() {
    let cfg = small_cfg();
    let mut params = init_backbone(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    *params.get_mut("backbone.ssm.A").unwrap() = Tensor::zeros(&[8, 8]);
    let x = clouds(3, 1, 20);
    let a = forward_values(&params, &cfg, &x, Propagation::PER_SAMPLE).unwrap();
    let b = forward_values(&params, &cfg, &x, Propagation::cross_sample(Some(5))).unwrap();
    assert_eq!(a[0].1, b[0].1);
}

#[test]
fn per_sample_path_is_batch_order_equivariant() {
    let cfg = BackboneConfig {
        ssm_variant: SsmVariant::Selective,
        ..small_cfg()
    };
    let params = init_backbone(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let x = clouds(9, 4, 10);
    let order = [2usize, 0, 3, 1];
    let shuffled: Vec<Tensor> = order.iter().map(|&i| x[i].clone()).collect();
    let a = forward_values(&params, &cfg, &x, Propagation::PER_SAMPLE).unwrap();
    let b = forward_values(&params, &cfg, &shuffled, Propagation::PER_SAMPLE).unwrap();
    for (k, &i) in order.iter().enumerate() {
        assert_eq!(a[i].1, b[k].1);
    }
}

#[test]
fn serialization_round_trip_preserves_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let parts: Vec<Tensor> = (0..3).map(|_| random(4, 2, 1.0, &mut rng)).collect();
    let weights = random(12, 2, 1.0, &mut rng);
    let perm = pointcsp::backbone::token_permutation(12, Some(77));
    let inv = pointcsp::backbone::invert_permutation(&perm);
    let tape = Tape::new();
    let xs: Vec<_> = parts
        .iter()
        .enumerate()
        .map(|(k, p)| tape.param(&format!("p{k}"), p))
        .collect();
    let round = tape.concat_rows(&xs).gather_rows(&perm).gather_rows(&inv);
    let g = (round * tape.constant(weights.clone()))
        .sum()
        .backward()
        .unwrap();
    for k in 0..3 {
        let expect = Tensor::new(vec![4, 2], weights.data()[k * 8..k * 8 + 8].to_vec()).unwrap();
        assert_eq!(g.get(&format!("p{k}")).unwrap(), &expect);
    }
}

proptest! {
    #[test]
    fn serialize_round_trip_is_exact(
        lens in proptest::collection::vec(1usize..6, 1..5),
        seed in proptest::option::of(any::<u64>()),
        c in 1usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
        let batch: Vec<FeatureSequence> = lens
            .iter()
            .enumerate()
            .map(|(i, &l)| FeatureSequence::new(random(l, c, 10.0, &mut rng), i))
            .collect();
        let sb = serialize(&batch, seed).unwrap();
        let mut sorted = sb.permutation.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..lens.iter().sum::<usize>()).collect::<Vec<_>>());
        prop_assert_eq!(sb.deserialize(), batch);
    }
}
