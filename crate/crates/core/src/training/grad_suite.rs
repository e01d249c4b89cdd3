//! Finite-difference checks of every training loss at toy sizes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{TrainingConfig, TrainingError};
use crate::backbone::Propagation;
use crate::distillation::{
    augment_batch, csc_loss_tape, init_student, pretrain_objective, teacher_targets,
};
use crate::geometry::{geo_loss_tape, Decoder};
use crate::numerics::gradcheck::{check_gradients, GradCheckOptions};
use crate::numerics::{ParamStore, Tensor};
use crate::pointcloud::generate_corpus;
use crate::spd::{
    finetune_objective, init_finetune_params, prepare_sample, spd_loss_tape, teacher_features,
};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossCheck {
    pub loss: &'static str,
    pub seeds: usize,
    /// Worst per-tensor relative error over all seeds.
    pub max_rel_error: f64,
}

impl LossCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

fn random(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
    .expect("shape")
}

/// `cfg` shrunk to sizes where a full finite-difference sweep is cheap; the
/// model variant, transition, temperatures and flags are kept.
pub fn toy_config(cfg: &TrainingConfig) -> TrainingConfig {
    let mut c = cfg.clone();
    c.model.channels = 4;
    c.model.c_out = 4;
    c.model.state_width = 4;
    c.distill.k_proto = 6;
    c.views.n_local = c.views.n_local.min(2);
    c.views.n_global = c.views.n_global.min(2);
    c.views.target_points = 8;
    c.geo.samples = 4;
    c.corpus.points_per_object = 10;
    c.corpus.classes = c.corpus.classes.min(3);
    c.corpus.objects_per_scene = 3;
    c.pretrain.lambda_geo = c.pretrain.lambda_geo.max(0.1);
    c.finetune.lambda_geo = c.finetune.lambda_geo.max(0.1);
    c
}

/// Central-difference check of the consistency, preservation, geometric,
/// pretraining and finetuning losses, one report row per loss.
pub fn grad_check_suite(
    cfg: &TrainingConfig,
    seeds: &[u64],
) -> Result<Vec<LossCheck>, TrainingError> {
    let toy = toy_config(cfg);
    let opts = || GradCheckOptions {
        max_entries_per_param: 12,
        ..Default::default()
    };
    let mut worst = [0.0f64; 5];
    let pre = toy.pretrain_settings();
    let fine = toy.finetune_settings();
    let (n, m, k) = (toy.views.n_global, toy.views.n_local, toy.distill.k_proto);
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let batch = 2;
        let mut p = ParamStore::new();
        p.insert("logits", random(batch * (n + m), k, 2.0, &mut rng));
        let mut probs = random(batch * n, k, 1.0, &mut rng).map(|v| v.exp());
        for r in 0..probs.rows() {
            let s: f64 = probs.row(r).iter().sum();
            let row = &mut probs.data_mut()[r * k..(r + 1) * k];
            row.iter_mut().for_each(|v| *v /= s);
        }
        let tau_s = toy.distill.tau_s;
        let excl = toy.distill.exclude_same_view;
        let r = check_gradients(
            &p,
            |tape, q| {
                let logp = tape
                    .param("logits", q.get("logits").expect("logits"))
                    .scale(1.0 / tau_s)
                    .softmax_rows()
                    .clamp_min(1e-12)
                    .log();
                csc_loss_tape(logp, &probs, n, m, excl)
            },
            opts(),
        )?;
        worst[0] = worst[0].max(r.max_rel_error());

        let mut p = ParamStore::new();
        p.insert("features", random(12, 5, 1.0, &mut rng));
        let target = random(12, 5, 1.0, &mut rng);
        let r = check_gradients(
            &p,
            |tape, q| {
                spd_loss_tape(
                    tape.param("features", q.get("features").expect("features")),
                    &target,
                )
                .expect("shapes")
            },
            opts(),
        )?;
        worst[1] = worst[1].max(r.max_rel_error());

        let sup = toy.geo_supervision();
        let mut p = ParamStore::new();
        for l in 1..=sup.layers.len() {
            p.insert(format!("tap{l}"), random(16, 6, 1.0, &mut rng));
            Decoder::random(6, &mut rng).write_params(&mut p, l);
        }
        let coords = random(16, 3, 1.0, &mut rng);
        let spans = vec![0..8, 8..16];
        let r = check_gradients(
            &p,
            |tape, q| {
                let taps: Vec<_> = (1..=sup.layers.len())
                    .map(|l| {
                        tape.param(&format!("tap{l}"), q.get(&format!("tap{l}")).expect("tap"))
                    })
                    .collect();
                geo_loss_tape(
                    tape,
                    q,
                    &sup,
                    &taps,
                    &coords,
                    &spans,
                    &mut ChaCha8Rng::seed_from_u64(seed),
                )
                .expect("geo loss")
            },
            opts(),
        )?;
        worst[2] = worst[2].max(r.max_rel_error());

        let scenes = generate_corpus(&toy.scene_spec(seed), 2)?;
        let views = augment_batch(&scenes, &pre.augment, seed, 0)?;
        let student = init_student(&pre.model, &pre.distill, &pre.geo, &mut rng)?;
        let center = vec![0.1; k];
        let (_, tprobs) = teacher_targets(&student, &center, &views, &pre, 5)?;
        let r = check_gradients(
            &student,
            |tape, q| {
                pretrain_objective(tape, q, &views, &tprobs, &pre, 5, 6)
                    .expect("objective")
                    .0
            },
            opts(),
        )?;
        worst[3] = worst[3].max(r.max_rel_error());

        let samples = scenes
            .iter()
            .map(|s| prepare_sample(s, toy.views.target_points, 0))
            .collect::<Result<Vec<_>, _>>()?;
        let params = init_finetune_params(None, &fine.model, &fine.geo, fine.classes, &mut rng)?;
        let mut teacher = params.clone();
        for (_, t) in teacher.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 1.05);
        }
        let tf = teacher_features(
            &teacher,
            &fine.model,
            &samples,
            Propagation::cross_sample(Some(3)),
        )?;
        let r = check_gradients(
            &params,
            |tape, q| {
                finetune_objective(tape, q, &samples, Some(&tf), &fine, 4)
                    .expect("objective")
                    .0
            },
            opts(),
        )?;
        worst[4] = worst[4].max(r.max_rel_error());
    }
    Ok(["csc", "spd", "geo", "pretrain_total", "finetune_total"]
        .into_iter()
        .zip(worst)
        .map(|(loss, max_rel_error)| LossCheck {
            loss,
            seeds: seeds.len(),
            max_rel_error,
        })
        .collect())
}
