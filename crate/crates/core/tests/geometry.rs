use pointcsp::geometry::{
    decode_coords, geo_loss, geo_loss_layer, geo_loss_tape, sample_rows, Decoder, GeoLayer,
    GeoSupervision,
};
use pointcsp::numerics::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

/// Solves `(M^T M) w = M^T y` by Gauss-Jordan elimination with partial
/// pivoting.
fn least_squares(m: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let d = m[0].len();
    let mut a = vec![vec![0.0; d + 1]; d];
    for (row, &t) in m.iter().zip(y) {
        for i in 0..d {
            for j in 0..d {
                a[i][j] += row[i] * row[j];
            }
            a[i][d] += row[i] * t;
        }
    }
    for c in 0..d {
        let p = (c..d)
            .max_by(|&x, &z| a[x][c].abs().total_cmp(&a[z][c].abs()))
            .unwrap();
        a.swap(c, p);
        for r in 0..d {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..=d {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    (0..d).map(|i| a[i][d] / a[i][i]).collect()
}

#[test]
fn least_squares_decoder_recovers_coordinates() {
    // Coordinates embedded in a 6-wide feature; the hidden layer (width 3)
    // runs in the near-linear regime of tanh and the output layer is the
    // least-squares fit.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let k = 64;
    let x = random(k, 3, &mut rng);
    let mut feats = Vec::new();
    for i in 0..k {
        feats.extend_from_slice(x.row(i));
        feats.extend((0..3).map(|_| rng.random_range(-1.0..1.0)));
    }
    let f = Tensor::new(vec![k, 6], feats).unwrap();
    let eps = 1e-3;
    let mut dec = Decoder::zeros(6);
    for i in 0..3 {
        dec.w1.data_mut()[i * 3 + i] = eps;
    }
    let hidden: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let mut h: Vec<f64> = (0..3).map(|j| (eps * x.at(i, j)).tanh()).collect();
            h.push(1.0);
            h
        })
        .collect();
    for out in 0..3 {
        let target: Vec<f64> = (0..k).map(|i| x.at(i, out)).collect();
        let w = least_squares(&hidden, &target);
        for j in 0..3 {
            dec.w2.data_mut()[j * 3 + out] = w[j];
        }
        dec.b2.data_mut()[out] = w[3];
    }
    let err = geo_loss_layer(&f, &x, &dec).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn layer_loss_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = random(11, 8, &mut rng);
    let x = random(11, 3, &mut rng);
    let dec = Decoder::random(8, &mut rng);
    let mut total = 0.0;
    for i in 0..11 {
        let mut hidden = [0.0; 4];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut z = dec.b1.data()[j];
            for c in 0..8 {
                z += f.at(i, c) * dec.w1.at(c, j);
            }
            *h = z.tanh();
        }
        for o in 0..3 {
            let mut p = dec.b2.data()[o];
            for (j, h) in hidden.iter().enumerate() {
                p += h * dec.w2.at(j, o);
            }
            total += (p - x.at(i, o)).powi(2);
        }
    }
    let oracle = total / 11.0;
    assert!((geo_loss_layer(&f, &x, &dec).unwrap() - oracle).abs() <= 1e-12);
    assert_eq!(decode_coords(&f, &dec).unwrap().shape(), &[11, 3]);
}

fn setup(
    seed: u64,
) -> (
    Vec<Tensor>,
    Tensor,
    Vec<Decoder>,
    Vec<std::ops::Range<usize>>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let taps: Vec<Tensor> = (0..3).map(|_| random(40, 6, &mut rng)).collect();
    let coords = random(40, 3, &mut rng);
    let decs = (0..3).map(|_| Decoder::random(6, &mut rng)).collect();
    (taps, coords, decs, vec![0..20, 20..40])
}

#[test]
fn aggregation_properties() {
    let (taps, coords, decs, spans) = setup(1);
    let sup = GeoSupervision::uniform(3, 5);
    let a = geo_loss(
        &sup,
        &decs,
        &taps,
        &coords,
        &spans,
        &mut ChaCha8Rng::seed_from_u64(9),
    )
    .unwrap();
    let b = geo_loss(
        &sup,
        &decs,
        &taps,
        &coords,
        &spans,
        &mut ChaCha8Rng::seed_from_u64(9),
    )
    .unwrap();
    assert_eq!(a, b);
    assert!(a > 0.0);

    let mut scaled = sup.clone();
    scaled.layers.iter_mut().for_each(|l| l.alpha *= 2.5);
    let c = geo_loss(
        &scaled,
        &decs,
        &taps,
        &coords,
        &spans,
        &mut ChaCha8Rng::seed_from_u64(9),
    )
    .unwrap();
    assert!((c - 2.5 * a).abs() <= 1e-12 * c.abs());

    let mut zero = sup.clone();
    zero.layers.iter_mut().for_each(|l| l.alpha = 0.0);
    assert_eq!(
        geo_loss(
            &zero,
            &decs,
            &taps,
            &coords,
            &spans,
            &mut ChaCha8Rng::seed_from_u64(9)
        )
        .unwrap(),
        0.0
    );
}

#[test]
fn single_layer_reduces_to_layer_loss() {
    let (taps, coords, decs, spans) = setup(2);
    let sup = GeoSupervision {
        layers: vec![GeoLayer {
            layer: 2,
            samples: 7,
            alpha: 1.0,
        }],
    };
    let rows = sample_rows(&sup, &spans, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let pick = |t: &Tensor| {
        let data: Vec<f64> = rows[0].iter().flat_map(|&r| t.row(r).to_vec()).collect();
        Tensor::new(vec![rows[0].len(), t.cols()], data).unwrap()
    };
    let direct = geo_loss_layer(&pick(&taps[1]), &pick(&coords), &decs[1]).unwrap();
    let agg = geo_loss(
        &sup,
        &decs[1..2],
        &taps,
        &coords,
        &spans,
        &mut ChaCha8Rng::seed_from_u64(4),
    )
    .unwrap();
    assert_eq!(agg, direct);
}

#[test]
fn exact_reconstruction_gives_zero() {
    // A zero decoder reconstructs the origin exactly.
    let (taps, _, _, spans) = setup(3);
    let decs = vec![Decoder::zeros(6); 3];
    let sup = GeoSupervision::uniform(3, 4);
    let origin = Tensor::zeros(&[40, 3]);
    assert_eq!(
        geo_loss(
            &sup,
            &decs,
            &taps,
            &origin,
            &spans,
            &mut ChaCha8Rng::seed_from_u64(0)
        )
        .unwrap(),
        0.0
    );
}

#[test]
fn sampling_is_without_replacement_and_independent_per_layer() {
    let sup = GeoSupervision::uniform(3, 20);
    let rows = sample_rows(&sup, &[0..20, 20..40], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    for r in &rows {
        let mut s = r.clone();
        s.sort_unstable();
        assert_eq!(s, (0..40).collect::<Vec<_>>());
    }
    let partial = GeoSupervision::uniform(3, 6);
    let rows = sample_rows(&partial, &[0..20], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert!(rows[0] != rows[1] || rows[1] != rows[2]);
}

#[test]
fn tape_loss_matches_values_and_reaches_both_groups() {
    let (taps, coords, decs, spans) = setup(6);
    let sup = GeoSupervision::uniform(3, 5);
    let mut params = ParamStore::new();
    for (l, d) in decs.iter().enumerate() {
        d.write_params(&mut params, l + 1);
    }
    let value = geo_loss(
        &sup,
        &decs,
        &taps,
        &coords,
        &spans,
        &mut ChaCha8Rng::seed_from_u64(2),
    )
    .unwrap();
    let tape = Tape::new();
    let tap_vars: Vec<_> = taps
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(&format!("tap{i}"), t))
        .collect();
    let loss = geo_loss_tape(
        &tape,
        &params,
        &sup,
        &tap_vars,
        &coords,
        &spans,
        &mut ChaCha8Rng::seed_from_u64(2),
    )
    .unwrap();
    assert!((loss.value().item() - value).abs() <= 1e-12);
    let g = loss.backward().unwrap();
    for i in 0..3 {
        assert!(g.get(&format!("tap{i}")).unwrap().l2_norm() > 0.0);
        assert!(g.get(&format!("geo.{}.w1", i + 1)).unwrap().l2_norm() > 0.0);
    }
}
