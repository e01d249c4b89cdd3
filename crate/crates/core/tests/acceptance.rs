//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 6, 7 and 8 contain directional measurements on a toy corpus;
//! their lines are reported but only the exact parts of criterion 6 fail the
//! run. Every other criterion is gating.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use pointcsp::backbone::{forward_values, ssm_scan, GateParams, SsmBlock, SsmVars};
use pointcsp::distillation::{csc_loss, ema_update, init_student, pair_count, ViewDistribution};
use pointcsp::evaluation::{evaluate, EvalOptions};
use pointcsp::geometry::{geo_loss, Decoder, GeoSupervision};
use pointcsp::numerics::{AdamW, AdamWConfig, ParamStore, Tape, Tensor, Transition};
use pointcsp::pointcloud::{farthest_point_indices, voxel_sample_indices, Point, ViewKind};
use pointcsp::spd::{finetune_step, init_finetune_params, prepare_sample, spd_loss, SpdPair};
use pointcsp::training::{
    build_corpus, checkpoint_path, eval_options, grad_check_suite, run_ablation, run_finetune,
    run_pretrain, AblationMatrix, AblationReport, Arm, Checkpoint, TrainingConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Toy benchmark for the training criteria: 16 scenes with 6 classes.
const BENCHMARK: &str = "
corpus.scenes = 16
corpus.test_scenes = 4
corpus.classes = 6
corpus.objects_per_scene = 8
corpus.points_per_object = 150
model.channels = 16
model.c_out = 16
model.state_width = 16
views.n_local = 4
views.target_points = 128
distill.k_proto = 16
geo.samples = 32
optim.lr_max = 3e-3
pretrain.total_steps = 300
finetune.total_steps = 300
finetune.eval_every = 100
eval.probe_steps = 200
";

const CORPUS_SEEDS: [u64; 3] = [1, 2, 3];
const SWEEP: [usize; 4] = [1, 2, 4, 8];

struct Outcome {
    pass: bool,
    gating: bool,
    detail: String,
}

impl Outcome {
    fn gating(pass: bool, detail: String) -> Self {
        Self {
            pass,
            gating: true,
            detail,
        }
    }
}

fn random(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols)
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn benchmark() -> TrainingConfig {
    TrainingConfig::parse(BENCHMARK).unwrap()
}

// 1 -------------------------------------------------------------------------

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for variant in ["static", "gated"] {
        let cfg = TrainingConfig::default()
            .with_overrides(&[("model.ssm_variant".into(), variant.into())])
            .unwrap();
        for row in grad_check_suite(&cfg, &[0, 1, 2, 3, 4]).unwrap() {
            let w = worst.entry(row.loss).or_insert(0.0);
            *w = w.max(row.max_rel_error);
        }
    }
    let elapsed = start.elapsed();
    let max = worst.values().copied().fold(0.0, f64::max);
    let table: Vec<String> = worst.iter().map(|(k, v)| format!("{k}={v:.1e}")).collect();
    Outcome::gating(
        worst.len() == 5 && max <= 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "{} over 5 seeds x 2 variants, {}",
            table.join(" "),
            secs(elapsed)
        ),
    )
}

// 2 -------------------------------------------------------------------------

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Token-by-token recursion with explicit index loops.
fn unroll(x: &Tensor, blk: &SsmBlock, h0: &[f64]) -> Vec<Vec<f64>> {
    let (c, h) = (blk.b.rows(), blk.a.rows());
    let mut state = h0.to_vec();
    let mut ys = Vec::new();
    for t in 0..x.rows() {
        let xt = x.row(t);
        let mut next = vec![0.0; h];
        for (i, n) in next.iter_mut().enumerate() {
            let mut z = 0.0;
            for (j, s) in state.iter().enumerate() {
                z += blk.a.at(i, j) * s;
            }
            for (k, v) in xt.iter().enumerate() {
                z += v * blk.b.at(k, i);
            }
            *n = match blk.transition {
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
    ys
}

fn recursion_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (c, h) = (5, 6);
    let mut worst: f64 = 0.0;
    for len in [4usize, 32, 256] {
        for selective in [false, true] {
            let gate = if selective {
                GateParams::Selective {
                    weight: random(c, h, 0.5, &mut rng),
                    bias: Tensor::vector((0..h).map(|_| rng.random_range(-0.5..0.5)).collect()),
                }
            } else {
                GateParams::Static(Tensor::vector(
                    (0..h).map(|_| rng.random_range(-1.0..1.0)).collect(),
                ))
            };
            let blk = SsmBlock {
                a: random(h, h, 0.3, &mut rng),
                b: random(c, h, 0.5, &mut rng),
                c: random(h, c, 0.5, &mut rng),
                gate,
                transition: Transition::GatedTanh,
            };
            let x = random(len, c, 1.0, &mut rng);
            let h0: Vec<f64> = (0..h).map(|_| rng.random_range(-0.5..0.5)).collect();
            let oracle = unroll(&x, &blk, &h0);
            let (fast, _) = ssm_scan(&x, &blk, &h0).unwrap();
            let tape = Tape::new();
            let mut params = ParamStore::new();
            blk.write_params(&mut params, "s");
            let taped = SsmVars::register(&tape, &params, "s", blk.transition)
                .unwrap()
                .scan(tape.constant(x.clone()), &h0, vec![0..len])
                .value();
            for (t, row) in oracle.iter().enumerate() {
                for (k, v) in row.iter().enumerate() {
                    worst = worst
                        .max((fast.at(t, k) - v).abs())
                        .max((taped.at(t, k) - v).abs());
                }
            }
        }
    }
    let one = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let prefix = SsmBlock {
        a: one.clone(),
        b: one.clone(),
        c: one,
        gate: GateParams::Static(Tensor::vector(vec![0.0])),
        transition: Transition::Identity,
    };
    let xs: Vec<f64> = (1..=64).map(f64::from).collect();
    let (y, _) = ssm_scan(
        &Tensor::new(vec![64, 1], xs.clone()).unwrap(),
        &prefix,
        &[0.0],
    )
    .unwrap();
    let sums: Vec<f64> = xs
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect();
    let exact = y.data() == sums.as_slice();
    Outcome::gating(
        worst <= 1e-10 && exact,
        format!("max |scan - unroll| = {worst:.1e} on L in {{4,32,256}} x 2 variants; prefix sum exact: {exact}"),
    )
}

// 3 -------------------------------------------------------------------------

fn dist(probs: Vec<f64>, kind: ViewKind) -> ViewDistribution {
    ViewDistribution {
        probs,
        kind,
        sample_id: 0,
    }
}

fn loss_identities() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let mut worst_uniform: f64 = 0.0;
    for k in [2usize, 16, 64, 1000] {
        let u = vec![1.0 / k as f64; k];
        let t = vec![dist(u.clone(), ViewKind::Global); 2];
        let s: Vec<_> = (0..10)
            .map(|i| {
                dist(
                    u.clone(),
                    if i < 2 {
                        ViewKind::Global
                    } else {
                        ViewKind::Local
                    },
                )
            })
            .collect();
        worst_uniform =
            worst_uniform.max((csc_loss(&t, &s, false).unwrap() - (k as f64).ln()).abs());
    }
    ok &= worst_uniform <= 1e-9;
    notes.push(format!("|uniform - ln K| = {worst_uniform:.1e}"));

    // Distinct distributions so every pair contributes a different term.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut random_dist = |kind| {
        let raw: Vec<f64> = (0..8).map(|_| rng.random_range(0.05..1.0)).collect();
        let z: f64 = raw.iter().sum();
        dist(raw.into_iter().map(|v| v / z).collect(), kind)
    };
    let t: Vec<_> = (0..2).map(|_| random_dist(ViewKind::Global)).collect();
    let s: Vec<_> = (0..10)
        .map(|i| {
            random_dist(if i < 2 {
                ViewKind::Global
            } else {
                ViewKind::Local
            })
        })
        .collect();
    let mut terms = 0usize;
    let mut total = 0.0;
    for tv in &t {
        for sv in &s {
            total -= tv
                .probs
                .iter()
                .zip(&sv.probs)
                .map(|(p, q)| p * q.ln())
                .sum::<f64>();
            terms += 1;
        }
    }
    let gap = (csc_loss(&t, &s, false).unwrap() - total / 20.0).abs();
    let counted = terms == 20 && pair_count(2, 8, false) == 20;
    ok &= counted && gap <= 1e-12;
    notes.push(format!("n=2,m=8 terms {terms}, normalizer gap {gap:.1e}"));

    let mut spd_ok = true;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(9, 4, 2.0, &mut rng);
        let mut b = a.clone();
        spd_ok &= spd_loss(&a, &b).unwrap() == 0.0;
        let i = rng.random_range(0..36);
        b.data_mut()[i] += 1e-6;
        spd_ok &= spd_loss(&a, &b).unwrap() > 0.0;
    }
    ok &= spd_ok;
    notes.push(format!("spd zero iff equal: {spd_ok}"));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let taps: Vec<Tensor> = (0..3).map(|_| random(24, 6, 1.0, &mut rng)).collect();
    let spans = vec![0..12, 12..24];
    let sup = GeoSupervision::uniform(3, 5);
    let p = [0.3, -1.2, 0.7];
    let constant = Tensor::new(vec![24, 3], p.repeat(24)).unwrap();
    let decoders: Vec<Decoder> = (0..3)
        .map(|_| {
            let mut d = Decoder::random(6, &mut rng);
            d.w2 = Tensor::zeros(d.w2.shape());
            d.b2 = Tensor::vector(p.to_vec());
            d
        })
        .collect();
    let geo_exact = geo_loss(&sup, &decoders, &taps, &constant, &spans, &mut rng).unwrap();
    let origin = geo_loss(
        &sup,
        &vec![Decoder::zeros(6); 3],
        &taps,
        &Tensor::zeros(&[24, 3]),
        &spans,
        &mut rng,
    )
    .unwrap();
    ok &= geo_exact == 0.0 && origin == 0.0;
    notes.push(format!(
        "geo under exact reconstruction {geo_exact:e}, {origin:e}"
    ));
    Outcome::gating(ok, notes.join("; "))
}

// 4 -------------------------------------------------------------------------

fn coupling_structure() -> Outcome {
    let base = benchmark();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs: Vec<Tensor> = (0..3).map(|_| random(20, 3, 1.0, &mut rng)).collect();
    let settings = |csp: bool, shuffle: bool| {
        let mut c = base.clone();
        c.pretrain.csp_enabled = csp;
        c.pretrain.shuffle = shuffle;
        c.pretrain_settings()
    };
    let s = settings(true, true);
    let params = init_student(
        &s.model,
        &s.distill,
        &s.geo,
        &mut ChaCha8Rng::seed_from_u64(6),
    )
    .unwrap();
    let a_nonzero = params
        .get("backbone.ssm.A")
        .unwrap()
        .data()
        .iter()
        .any(|v| *v != 0.0);

    let perturb = |k: usize| {
        let mut p = inputs.clone();
        p[k].data_mut().iter_mut().for_each(|v| *v += 0.25);
        p
    };
    let diff = |csp: bool, shuffle: bool, changed: usize, observed: usize| {
        let prop = settings(csp, shuffle).propagation(17);
        let a = forward_values(&params, &s.model, &inputs, prop).unwrap();
        let b = forward_values(&params, &s.model, &perturb(changed), prop).unwrap();
        let taps = a[observed]
            .0
            .iter()
            .zip(&b[observed].0)
            .map(|(x, y)| x.max_abs_diff(y))
            .fold(0.0, f64::max);
        taps.max(a[observed].1.max_abs_diff(&b[observed].1))
    };

    let off = (0..3)
        .flat_map(|i| (0..3).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| diff(false, true, i, j))
        .fold(0.0, f64::max);
    let on_shuffled = diff(true, true, 0, 1).min(diff(true, true, 2, 0));
    let on_ordered = diff(true, false, 0, 1);
    let acausal = diff(true, false, 2, 0)
        .max(diff(true, false, 1, 0))
        .max(diff(true, false, 2, 1));
    Outcome::gating(
        off == 0.0 && a_nonzero && on_shuffled > 0.0 && on_ordered > 0.0 && acausal == 0.0,
        format!(
            "off: max cross perturbation {off:e}; on: {on_shuffled:.2e} shuffled, {on_ordered:.2e} ordered; \
             later-to-earlier without shuffle {acausal:e}"
        ),
    )
}

// 5 -------------------------------------------------------------------------

fn ema_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let store = |rng: &mut ChaCha8Rng| {
        let mut p = ParamStore::new();
        p.insert("w", random(4, 5, 3.0, rng));
        p.insert("b", random(1, 5, 3.0, rng));
        p
    };
    let mut worst: f64 = 0.0;
    let mut copies = true;
    for gamma in [0.0, 0.3, 0.9, 0.996, 0.999, 1.0 - 1e-9] {
        let student = store(&mut rng);
        let mut teacher = store(&mut rng);
        let before = teacher.clone();
        ema_update(&mut teacher, &student, gamma).unwrap();
        for (name, t) in teacher.iter() {
            let s = student.get(name).unwrap();
            let d1 = t.zip_map(s, |a, b| a - b).l2_norm();
            let d0 = before.get(name).unwrap().zip_map(s, |a, b| a - b).l2_norm();
            worst = worst.max((d1 - gamma * d0).abs());
        }
        if gamma == 0.0 {
            copies = teacher == student;
        }
    }
    let rejects_one = ema_update(&mut store(&mut rng), &store(&mut rng), 1.0).is_err();

    // Unit finetuning momentum freezes the teacher through real steps.
    let cfg = TrainingConfig::parse("finetune.gamma_ft = 1.0\nmodel.channels = 8\nmodel.c_out = 8\nmodel.state_width = 8\ngeo.samples = 4\n")
        .unwrap();
    let st = cfg.finetune_settings();
    let params = init_finetune_params(
        None,
        &st.model,
        &st.geo,
        st.classes,
        &mut ChaCha8Rng::seed_from_u64(8),
    )
    .unwrap();
    let mut pair = SpdPair::new(params.clone(), &st.spd).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default());
    let scenes = build_corpus(&cfg, 8).unwrap();
    let batch: Vec<_> = scenes.train[..2]
        .iter()
        .map(|s| prepare_sample(s, 16, 0).unwrap())
        .collect();
    for step in 0..3 {
        finetune_step(&batch, &mut pair, &mut opt, 1e-2, &st, step).unwrap();
    }
    let frozen = pair.teacher == params && pair.student != params;
    Outcome::gating(
        worst <= 1e-12 && copies && frozen && rejects_one,
        format!(
            "max | |t'-s| - g|t-s| | = {worst:.1e}; g=0 copies: {copies}; g=1 freezes finetune teacher: {frozen}; \
             pretrain rejects g=1: {rejects_one}"
        ),
    )
}

// 6, 7, 8 -------------------------------------------------------------------

fn batch_size_independence(root: &Path, pretrained: &Checkpoint) -> (Outcome, bool) {
    let start = Instant::now();
    let cfg = Arm::FULL.apply(&benchmark());
    let corpus = build_corpus(&cfg, CORPUS_SEEDS[0]).unwrap();
    let mut val = Vec::new();
    let mut identical = true;
    for bf in SWEEP {
        let mut c = cfg.clone();
        c.finetune.batch_size = bf;
        let run = run_finetune(
            &c,
            Some(pretrained),
            &corpus.train,
            &corpus.test,
            &root.join(format!("bf_{bf}")),
        )
        .unwrap();
        val.push(run.final_val_acc());
        let reference = eval_options(&c);
        for group in [2, 4, 8] {
            let opts = EvalOptions {
                group,
                ..reference.clone()
            };
            let again = evaluate(
                &run.checkpoint.student,
                &c.model,
                &corpus.train,
                &corpus.test,
                6,
                &opts,
            )
            .unwrap();
            identical &= again == run.summary;
        }
    }
    let spread =
        val.iter().copied().fold(f64::MIN, f64::max) - val.iter().copied().fold(f64::MAX, f64::min);
    let elapsed = start.elapsed();
    let accs: Vec<String> = val.iter().map(|v| format!("{v:.4}")).collect();
    let pass = identical && spread < 0.02 && elapsed < Duration::from_secs(15 * 60);
    (
        Outcome {
            pass,
            gating: false,
            detail: format!(
                "inference bit-identical over groups {{1,2,4,8}}: {identical}; val acc for B_F {{1,2,4,8}} = [{}], \
                 spread {:.2} pp (< 2 pp); {}",
                accs.join(", "),
                100.0 * spread,
                secs(elapsed)
            ),
        },
        identical,
    )
}

fn ablation_ordering(report: &AblationReport, elapsed: Duration) -> Outcome {
    let mut holds = 0;
    let mut rows = Vec::new();
    for seed in CORPUS_SEEDS {
        let m = |arm| report.row(seed, arm).unwrap().miou;
        let (b, c, s, f) = (m(Arm::BASELINE), m(Arm::CSP), m(Arm::SPD), m(Arm::FULL));
        let ok = f >= c && f >= s && c >= b && s >= b;
        holds += usize::from(ok);
        rows.push(format!(
            "seed {seed}: base {b:.4} csp {c:.4} spd {s:.4} full {f:.4} {}",
            if ok { "ok" } else { "x" }
        ));
    }
    Outcome {
        pass: holds >= 2 && elapsed < Duration::from_secs(30 * 60),
        gating: false,
        detail: format!(
            "ordering holds on {holds}/3 seeds ({}); {}",
            rows.join("; "),
            secs(elapsed)
        ),
    }
}

fn consistency_direction(report: &AblationReport) -> Outcome {
    let mean = |arm| {
        let v: Vec<f64> = CORPUS_SEEDS
            .iter()
            .map(|&s| {
                report
                    .row(s, arm)
                    .unwrap()
                    .pretrain_consistency_ratio
                    .unwrap()
            })
            .collect();
        (v.iter().sum::<f64>() / v.len() as f64, v)
    };
    let (csp, csp_v) = mean(Arm::CSP);
    let (off, off_v) = mean(Arm::BASELINE);
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.4}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    Outcome {
        pass: csp < off,
        gating: false,
        detail: format!(
            "pretrained intra/inter ratio: csp {csp:.4} [{}] vs per-sample {off:.4} [{}]",
            fmt(&csp_v),
            fmt(&off_v)
        ),
    }
}

// 9 -------------------------------------------------------------------------

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn reproducibility(root: &Path) -> Outcome {
    let cfg = TrainingConfig::parse(
        "corpus.scenes = 6\ncorpus.test_scenes = 2\ncorpus.classes = 3\ncorpus.objects_per_scene = 3\n\
         corpus.points_per_object = 40\nmodel.channels = 8\nmodel.c_out = 8\nmodel.state_width = 8\n\
         views.n_local = 2\nviews.target_points = 32\ndistill.k_proto = 8\ngeo.samples = 8\n\
         pretrain.total_steps = 8\npretrain.checkpoint_every = 4\nfinetune.total_steps = 8\nfinetune.eval_every = 4\n\
         eval.probe_steps = 40\nrun.seed = 99\n",
    )
    .unwrap();
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let dir = root.join(run);
        let corpus = build_corpus(&cfg, 4).unwrap();
        let pre = run_pretrain(&cfg, &corpus.train, &dir.join("pretrain")).unwrap();
        run_finetune(
            &cfg,
            Some(&pre.checkpoint),
            &corpus.train,
            &corpus.test,
            &dir.join("finetune"),
        )
        .unwrap();
        trees.push(tree(&dir));
    }
    let checkpoints = trees[0]
        .keys()
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .count();
    let metrics = trees[0]
        .keys()
        .filter(|p| p.extension().is_some_and(|e| e == "json" || e == "jsonl"))
        .count();
    let same_keys = trees[0].keys().eq(trees[1].keys());
    let differing = trees[0]
        .iter()
        .filter(|(k, v)| trees[1].get(*k) != Some(v))
        .count();
    Outcome::gating(
        same_keys && differing == 0 && checkpoints >= 3,
        format!("{} files compared ({checkpoints} checkpoints, {metrics} metrics/log files), {differing} differ", trees[0].len()),
    )
}

// 10 ------------------------------------------------------------------------

fn d2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

fn fps_brute(coords: &[Point], k: usize, first: usize) -> Vec<usize> {
    let mut chosen = vec![first];
    while chosen.len() < k {
        let (mut best, mut best_d) = (usize::MAX, -1.0);
        for i in (0..coords.len()).filter(|i| !chosen.contains(i)) {
            let d = chosen
                .iter()
                .map(|&c| d2(&coords[i], &coords[c]))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                (best, best_d) = (i, d);
            }
        }
        chosen.push(best);
    }
    chosen
}

fn voxel_brute(coords: &[Point], cell: f64) -> BTreeSet<usize> {
    let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in coords.iter().enumerate() {
        cells
            .entry(p.map(|v| (v / cell).floor() as i64))
            .or_default()
            .push(i);
    }
    cells
        .values()
        .map(|members| {
            let n = members.len() as f64;
            let centroid =
                [0, 1, 2].map(|k| members.iter().map(|&i| coords[i][k]).sum::<f64>() / n);
            *members
                .iter()
                .min_by(|&&a, &&b| {
                    d2(&coords[a], &centroid)
                        .total_cmp(&d2(&coords[b], &centroid))
                        .then(a.cmp(&b))
                })
                .unwrap()
        })
        .collect()
}

fn sampling_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut fps_bad, mut voxel_bad) = (0, 0);
    for _ in 0..100 {
        let n = rng.random_range(1..=128);
        let coords: Vec<Point> = (0..n)
            .map(|_| [0, 1, 2].map(|_| rng.random_range(-2.0..2.0)))
            .collect();
        let k = rng.random_range(1..=n);
        let first = rng.random_range(0..n);
        fps_bad += usize::from(
            farthest_point_indices(&coords, k, first).unwrap() != fps_brute(&coords, k, first),
        );
        let cell = rng.random_range(0.1..2.0);
        let got: BTreeSet<usize> = voxel_sample_indices(&coords, cell)
            .unwrap()
            .into_iter()
            .collect();
        voxel_bad += usize::from(got != voxel_brute(&coords, cell));
    }
    Outcome::gating(
        fps_bad == 0 && voxel_bad == 0,
        format!(
            "100 clouds of <= 128 points: fps mismatches {fps_bad}, voxel mismatches {voxel_bad}"
        ),
    )
}

fn main() -> ExitCode {
    // Honour `cargo test -- --list` and name filters from the default runner.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    if args
        .iter()
        .any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str()))
    {
        return ExitCode::SUCCESS;
    }

    let scratch = tempfile::tempdir().unwrap();
    let names = [
        "gradient fidelity",
        "recursion oracle",
        "loss identities",
        "cross-sample coupling structure",
        "EMA contract",
        "batch-size independence",
        "component ablation ordering",
        "semantic-consistency direction",
        "reproducibility",
        "small-oracle equivalence",
    ];
    let mut failures = 0;
    let mut report = |n: usize, o: Outcome| {
        let status = if o.pass { "PASS" } else { "FAIL" };
        let note = if !o.pass && !o.gating {
            " (directional, not gating)"
        } else {
            ""
        };
        println!("{status} {n:>2} {}: {}{note}", names[n - 1], o.detail);
        failures += usize::from(!o.pass && o.gating);
    };

    report(1, gradient_fidelity());
    report(2, recursion_oracle());
    report(3, loss_identities());
    report(4, coupling_structure());
    report(5, ema_contract());

    let start = Instant::now();
    let matrix = AblationMatrix {
        sweep_batch_sizes: Vec::new(),
        ..AblationMatrix::four_arm(CORPUS_SEEDS.to_vec())
    };
    let ablation = run_ablation(
        &matrix,
        &benchmark(),
        &scratch.path().join("ablation"),
        false,
    )
    .unwrap();
    let ablation_time = start.elapsed();
    let pretrained = Checkpoint::load(&checkpoint_path(
        &scratch
            .path()
            .join(format!("ablation/corpus_{}/pretrain_csp", CORPUS_SEEDS[0])),
        benchmark().pretrain.total_steps,
    ))
    .unwrap();
    let (sweep, exact) = batch_size_independence(&scratch.path().join("sweep"), &pretrained);
    report(6, sweep);
    report(7, ablation_ordering(&ablation, ablation_time));
    report(8, consistency_direction(&ablation));
    report(9, reproducibility(&scratch.path().join("repro")));
    report(10, sampling_oracles());
    failures += usize::from(!exact);

    if failures == 0 {
        println!("acceptance: all gating checks passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} gating check(s) failed");
        ExitCode::FAILURE
    }
}
