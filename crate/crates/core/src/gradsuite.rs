//! Registered gradient-check suites.
//!
//! Each suite draws random small instances and compares tape gradients with
//! central differences. Instances keep L1 kinks and top-k boundaries at least
//! `MARGIN` away from the finite-difference step so the comparison is
//! well-defined.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{dual_view_scores, AlignmentConfig};
use crate::encoders::{encode_image, init_head, init_vit, TextEncoder, TextEncoderConfig, VitConfig};
use crate::error::{Error, Result};
use crate::losses::{
    bce_loss, db_loss, loss_kd, loss_sc, stage_loss, ClassStats, CountPolicy, DbLossParams, LossWeights, Stage,
    StageParts,
};
use crate::params::{Bound, ParamStore};
use crate::prompts::build_hierarchical_embeddings;
use crate::tensor::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use crate::tensor::Tensor;

/// Suites run by `all`.
pub const MODULES: [&str; 10] = [
    "kd", "sc", "db", "db-star", "bce", "l1", "l2", "topk", "cosine", "pipeline",
];

/// Negative control: an operation with a deliberately wrong backward rule.
pub const NEGATIVE_CONTROL: &str = "broken-square";

const MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub module: String,
    pub trials: usize,
    pub passed_trials: usize,
    pub report: GradCheckReport,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.trials > 0 && self.passed_trials == self.trials
    }
}

/// Runs `trials` random instances of `module`.
pub fn run_suite(module: &str, trials: usize, seed: u64) -> Result<SuiteResult> {
    if trials == 0 {
        return Err(Error::config("gradient check needs at least one trial"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_salt(module));
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        failures: 0,
    };
    let mut passed = 0;
    for t in 0..trials {
        let cfg = GradCheckConfig {
            seed: seed.wrapping_add(t as u64),
            ..GradCheckConfig::default()
        };
        let r = trial(module, &mut rng, &cfg)?;
        if r.passed() {
            passed += 1;
        }
        report = report.merge(r);
    }
    Ok(SuiteResult {
        module: module.to_string(),
        trials,
        passed_trials: passed,
        report,
    })
}

fn name_salt(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn trial(module: &str, rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    match module {
        "kd" => {
            let (b, d) = (rng.random_range(1..=4), rng.random_range(2..=8));
            let (s, t) = separated_pair(rng, &[b, d]);
            check_gradients(&[s], |tape, v| loss_kd(v[0], tape.constant(&t)), cfg)
        }
        "sc" => {
            let (c, d) = (rng.random_range(2..=6), rng.random_range(2..=8));
            let (g, h) = separated_pair(rng, &[c, d]);
            check_gradients(&[g], |tape, v| loss_sc(tape.constant(&h), v[0]), cfg)
        }
        "db" | "db-star" => {
            let inst = ClsInstance::random(rng)?;
            let pw = module == "db-star";
            check_gradients(
                &[inst.scores.clone()],
                |_, v| db_loss(v[0], &inst.labels, &inst.stats, &DbLossParams::default(), pw),
                cfg,
            )
        }
        "bce" => {
            let inst = ClsInstance::random(rng)?;
            check_gradients(&[inst.scores.clone()], |_, v| bce_loss(v[0], &inst.labels), cfg)
        }
        "l1" => {
            let inst = ClsInstance::random(rng)?;
            let b = inst.scores.shape()[0];
            let d = rng.random_range(2..=6);
            let (s, t) = separated_pair(rng, &[b, d]);
            check_gradients(
                &[inst.scores.clone(), s],
                |tape, v| {
                    let parts = StageParts {
                        cls: Some(db_loss(v[0], &inst.labels, &inst.stats, &DbLossParams::default(), true)?),
                        kd: Some(loss_kd(v[1], tape.constant(&t))?),
                        sc: None,
                    };
                    stage_loss(Stage::One, parts, &LossWeights::default())
                },
                cfg,
            )
        }
        "l2" => l2_trial(rng, cfg),
        "topk" => {
            let (b, c, n) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(2..=16));
            let k = rng.random_range(1..=n);
            let x = separated_values(rng, &[b, c, n]);
            check_gradients(&[x], |_, v| Ok(v[0].topk_mean_last(k)?.square().sum_all()), cfg)
        }
        "cosine" => {
            let (b, c, n, d) = (
                rng.random_range(1..=3),
                rng.random_range(2..=5),
                rng.random_range(2..=6),
                rng.random_range(2..=6),
            );
            let align = AlignmentConfig {
                alpha: rng.random_range(0.05..0.95),
                k: rng.random_range(1..=n),
                logit_scale: 10.0,
            };
            let inputs = [
                gaussian(rng, &[c, d]),
                gaussian(rng, &[c, d]),
                gaussian(rng, &[b, d]),
                gaussian(rng, &[b, n, d]),
            ];
            let w = gaussian(rng, &[b, c]);
            check_gradients(
                &inputs,
                |tape, v| {
                    let s = dual_view_scores(v[0], v[1], v[2], v[3], &align)?;
                    Ok(s.s_global.add(s.s_local.sum_axis(2, false)?)?.mul(tape.constant(&w))?.sum_all())
                },
                cfg,
            )
        }
        "pipeline" => pipeline_trial(rng, cfg),
        NEGATIVE_CONTROL => {
            let n = rng.random_range(2..=6);
            let x = gaussian(rng, &[n]);
            check_gradients(&[x], |_, v| Ok(v[0].broken_square().sum_all()), cfg)
        }
        other => Err(Error::config(format!(
            "unknown gradient-check module `{other}`; known: {}, {NEGATIVE_CONTROL}",
            MODULES.join(", ")
        ))),
    }
}

struct ClsInstance {
    scores: Tensor<f64>,
    labels: Vec<bool>,
    stats: ClassStats<f64>,
}

impl ClsInstance {
    fn random(rng: &mut ChaCha8Rng) -> Result<Self> {
        let (b, c) = (rng.random_range(1..=4), rng.random_range(2..=6));
        let n = rng.random_range(20..=400);
        let counts: Vec<usize> = (0..c).map(|_| rng.random_range(1..n)).collect();
        Ok(Self {
            scores: gaussian(rng, &[b, c]).map(|x| 3.0 * x),
            labels: (0..b * c).map(|_| rng.random_bool(0.4)).collect(),
            stats: ClassStats::from_counts(&counts, n, &DbLossParams::default(), CountPolicy::Strict)?,
        })
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Two tensors whose elementwise differences all exceed `MARGIN` in magnitude.
fn separated_pair(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Tensor<f64>, Tensor<f64>) {
    let a = gaussian(rng, shape);
    let mut b = gaussian(rng, shape);
    for (x, y) in a.data().iter().zip(b.data_mut()) {
        if (*x - *y).abs() < MARGIN {
            *y = *x + 10.0 * MARGIN;
        }
    }
    (a, b)
}

/// Values whose rows along the last axis have pairwise gaps above `MARGIN`.
fn separated_values(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    loop {
        let t = gaussian(rng, shape);
        let n = *shape.last().unwrap();
        let ok = t.data().chunks(n).all(|row| {
            let mut s = row.to_vec();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            s.windows(2).all(|w| w[1] - w[0] > MARGIN)
        });
        if ok {
            return t;
        }
    }
}

fn tiny_text(rng: &mut ChaCha8Rng) -> Result<TextEncoder<f64>> {
    TextEncoder::new(TextEncoderConfig {
        vocab_size: 24,
        width: 6,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        max_len: 8,
        embed_out: 6,
        seed: rng.random(),
    })
}

fn class_words(rng: &mut ChaCha8Rng, enc: &TextEncoder<f64>, c: usize) -> Result<Tensor<f64>> {
    let ids: Vec<u32> = (0..c).map(|i| 4 + i as u32 + rng.random_range(0..2) * 8).collect();
    enc.token_embeddings(&ids)
}

/// `L2 = DB* + L_sc` with respect to both prompt sets, image embeddings fixed.
fn l2_trial(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let enc = tiny_text(rng)?;
    let inst = ClsInstance::random(rng)?;
    let (b, c) = (inst.scores.shape()[0], inst.scores.shape()[1]);
    let m = rng.random_range(1..=3);
    let n = 4;
    let words = class_words(rng, &enc, c)?;
    let template = gaussian(rng, &[m, 6]);
    let img_g = gaussian(rng, &[b, 6]);
    let img_l = gaussian(rng, &[b, n, 6]);
    let align = AlignmentConfig {
        alpha: 0.4,
        k: 2,
        logit_scale: 10.0,
    };
    let prompts = [gaussian(rng, &[m, 6]).map(|x| 0.5 * x), gaussian(rng, &[m, 6]).map(|x| 0.5 * x)];
    let cfg = GradCheckConfig { step: 1e-6, ..*cfg };
    check_gradients(
        &prompts,
        |tape, v| {
            let p = enc.bind(tape);
            let (pg, pl) = build_hierarchical_embeddings(&enc, &p, v[0], v[1], tape.constant(&words))?;
            let (ph, _) = build_hierarchical_embeddings(
                &enc,
                &p,
                tape.constant(&template),
                tape.constant(&template),
                tape.constant(&words),
            )?;
            let s = dual_view_scores(pg, pl, tape.constant(&img_g), tape.constant(&img_l), &align)?;
            let parts = StageParts {
                cls: Some(db_loss(s.logits, &inst.labels, &inst.stats, &DbLossParams::default(), true)?),
                kd: None,
                sc: Some(loss_sc(ph, pg)?),
            };
            stage_loss(Stage::Two, parts, &LossWeights::default())
        },
        &cfg,
    )
}

/// Image tower, embedding head and both prompt sets through fused scores into
/// `L_cls + L_kd + L_sc`. A random subset of coordinates is perturbed per tensor.
fn pipeline_trial(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let vit = VitConfig {
        image_size: 8,
        patch_size: 4,
        channels: 2,
        depth: 1,
        embed_dim: 6,
        heads: 2,
        mlp_ratio: 2,
        embed_out: 6,
    };
    let enc = tiny_text(rng)?;
    let inst = ClsInstance::random(rng)?;
    let (b, c) = (inst.scores.shape()[0], inst.scores.shape()[1]);
    let words = class_words(rng, &enc, c)?;
    let m = 2;
    let template = gaussian(rng, &[m, 6]);
    let mut store: ParamStore<f64> = init_vit(&vit, rng);
    for (k, v) in init_head::<f64, _>(&vit, rng).iter() {
        store.insert(k.clone(), v.clone());
    }
    store.insert("prompt.global", gaussian(rng, &[m, 6]).map(|x| 0.5 * x));
    store.insert("prompt.local", gaussian(rng, &[m, 6]).map(|x| 0.5 * x));
    let names: Vec<String> = store.names().cloned().collect();
    let inputs: Vec<Tensor<f64>> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    let patches = gaussian(rng, &[b, vit.num_patches(), vit.patch_dim()]);
    let teacher = gaussian(rng, &[b, vit.embed_dim]);
    let align = AlignmentConfig {
        alpha: rng.random_range(0.1..0.9),
        k: rng.random_range(1..=vit.num_patches()),
        logit_scale: 10.0,
    };
    let cfg = GradCheckConfig {
        max_coords: Some(4),
        step: 1e-6,
        ..*cfg
    };
    check_gradients(
        &inputs,
        |tape, v| {
            let bound = Bound::from_vars(names.iter().cloned().zip(v.iter().copied()));
            let dv = encode_image(&vit, &bound, tape.constant(&patches), false)?;
            let p = enc.bind(tape);
            let w = tape.constant(&words);
            let (pg, pl) = build_hierarchical_embeddings(
                &enc,
                &p,
                bound.get("prompt.global")?,
                bound.get("prompt.local")?,
                w,
            )?;
            let (ph, _) =
                build_hierarchical_embeddings(&enc, &p, tape.constant(&template), tape.constant(&template), w)?;
            let s = dual_view_scores(pg, pl, dv.f_cls_emb, dv.f_patch_emb, &align)?;
            let parts = StageParts {
                cls: Some(db_loss(s.logits, &inst.labels, &inst.stats, &DbLossParams::default(), true)?),
                kd: Some(loss_kd(dv.f_cls, tape.constant(&teacher))?),
                sc: Some(loss_sc(ph, pg)?),
            };
            crate::losses::sum_parts(tape, parts, &LossWeights::default())
        },
        &cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_module_and_zero_trials_are_rejected() {
        assert!(run_suite("nope", 1, 0).is_err());
        assert!(run_suite("kd", 0, 0).is_err());
    }

    #[test]
    fn negative_control_fails() {
        let r = run_suite(NEGATIVE_CONTROL, 3, 1).unwrap();
        assert_eq!(r.passed_trials, 0);
        assert!(!r.passed());
    }
}
