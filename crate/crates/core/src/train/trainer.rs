//! Stage-one, stage-two and joint optimization loops.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Schedule, StageConfig};
use super::model::{Model, StageTag};
use super::optimizer::AdamW;
use crate::alignment::dual_view_scores;
use crate::data::{class_stats, read_teacher_file, Dataset};
use crate::encoders::{encode_image, patchify, TeacherHandle, TeacherMode};
use crate::error::{Error, Result};
use crate::losses::{cls_loss, loss_kd, loss_sc, stage_loss, sum_parts, ClassStats, Stage, StageParts};
use crate::params::{Bound, ParamStore};
use crate::prompts::{build_hierarchical_embeddings, GLOBAL_PROMPT, LOCAL_PROMPT};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Stage1,
    Stage2,
    Joint,
}

impl Phase {
    pub fn code(self) -> u8 {
        match self {
            Phase::Stage1 => 1,
            Phase::Stage2 => 2,
            Phase::Joint => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => Phase::Stage1,
            2 => Phase::Stage2,
            3 => Phase::Joint,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        self.tag().name()
    }

    pub fn tag(self) -> StageTag {
        match self {
            Phase::Stage1 => StageTag::Stage1,
            Phase::Stage2 => StageTag::Stage2,
            Phase::Joint => StageTag::Joint,
        }
    }
}

/// Position inside a phase plus optimizer state; enough to resume bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Progress<T: Scalar> {
    pub phase: Phase,
    pub epoch: usize,
    /// Next batch index within `epoch`.
    pub batch: usize,
    pub step: u64,
    pub optimizer: AdamW<T>,
}

impl<T: Scalar> Progress<T> {
    pub fn new(phase: Phase) -> Self {
        Self {
            phase,
            epoch: 0,
            batch: 0,
            step: 0,
            optimizer: AdamW::new(),
        }
    }
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: String,
    pub epoch: usize,
    pub batch: usize,
    pub step: u64,
    pub loss: f64,
    pub cls: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sc: Option<f64>,
    pub lr: f64,
}

/// Training split with its class statistics and cached teacher targets.
pub struct TrainData<'a, T: Scalar> {
    pub data: &'a Dataset,
    pub stats: ClassStats<T>,
    /// `[len, D]` teacher class-token embeddings, in sample order.
    teacher: Option<Tensor<T>>,
}

impl<'a, T: Scalar> TrainData<'a, T> {
    pub fn new(data: &'a Dataset, model: &Model<T>, teacher: Option<&TeacherHandle<T>>) -> Result<Self> {
        if data.classes != model.classes() {
            return Err(Error::contract(format!(
                "dataset has {} classes, model has {}",
                data.classes,
                model.classes()
            )));
        }
        let stats = class_stats(data, &model.config.db)?;
        let teacher = match teacher {
            None => None,
            Some(t) => {
                let missing = t.missing_ids(&data.ids());
                if !missing.is_empty() {
                    return Err(Error::format(format!(
                        "teacher embeddings missing for {} samples: {missing:?}",
                        missing.len()
                    )));
                }
                let idx: Vec<usize> = (0..data.len()).collect();
                let mut rows = Vec::new();
                let mut dim = 0;
                for chunk in idx.chunks(model.config.eval_batch) {
                    let e = t.embed(&data.images(chunk), &data.ids_of(chunk))?;
                    dim = e.shape()[1];
                    rows.extend_from_slice(e.data());
                }
                if dim != model.config.vit.embed_dim {
                    return Err(Error::contract(format!(
                        "teacher width {dim} differs from student width {}",
                        model.config.vit.embed_dim
                    )));
                }
                Some(Tensor::new([data.len(), dim], rows)?)
            }
        };
        Ok(Self { data, stats, teacher })
    }

    fn teacher_rows(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let t = self
            .teacher
            .as_ref()
            .ok_or_else(|| Error::contract("distillation needs teacher embeddings"))?;
        gather_rows(t, idx)
    }
}

fn gather_rows<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let mut shape = t.shape().to_vec();
    let mut data = Vec::with_capacity(idx.len() * t.numel() / shape[0]);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    shape[0] = idx.len();
    Ok(Tensor::new(shape, data)?)
}

/// Names each phase optimizes.
pub fn trainable_names<T: Scalar>(model: &Model<T>, phase: Phase) -> Vec<String> {
    let image = model.image.names().cloned();
    let prompts = [GLOBAL_PROMPT.to_string(), LOCAL_PROMPT.to_string()];
    match phase {
        Phase::Stage1 => image.collect(),
        Phase::Stage2 => prompts.to_vec(),
        Phase::Joint => image.chain(prompts).collect(),
    }
}

fn stage_config<T: Scalar>(model: &Model<T>, phase: Phase) -> StageConfig {
    match phase {
        Phase::Stage1 | Phase::Joint => model.config.stage1,
        Phase::Stage2 => model.config.stage2,
    }
}

fn epoch_order(seed: u64, phase: Phase, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((phase.code() as u64) << 32) | epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn scheduled_lr(base: f64, schedule: Schedule, step: u64, total: u64) -> f64 {
    match schedule {
        Schedule::Constant => base,
        Schedule::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
    }
}

struct StepOut<T> {
    grads: BTreeMap<String, Vec<T>>,
    record: LogRecord,
}

fn collect_grads<'t, T: Scalar>(tape: &'t Tape<T>, loss: Var<'t, T>, bound: &Bound<'t, T>) -> Result<BTreeMap<String, Vec<T>>> {
    let grads = tape.backward(loss)?;
    Ok(bound
        .iter()
        .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.to_vec())))
        .collect())
}

fn item<T: Scalar>(v: Option<Var<'_, T>>) -> Option<f64> {
    v.map(|v| v.item().as_f64())
}

fn check_finite<T: Scalar>(
    record: &LogRecord,
    logits: &Var<'_, T>,
    data: &Dataset,
    idx: &[usize],
) -> Result<()> {
    if record.loss.is_finite() {
        return Ok(());
    }
    let (lo, hi) = logits.with_data(|d| {
        d.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x.as_f64()), hi.max(x.as_f64())))
    });
    let nan = logits.with_data(|d| d.iter().filter(|x| !x.is_finite()).count());
    Err(Error::NonFinite(format!(
        "{} epoch {} batch {} step {}: loss {} (cls {}, kd {:?}, sc {:?}); logits range [{lo}, {hi}] with {nan} non-finite; sample ids {:?}",
        record.phase,
        record.epoch,
        record.batch,
        record.step,
        record.loss,
        record.cls,
        record.kd,
        record.sc,
        data.ids_of(idx)
    )))
}

/// Stage one (fixed prompts, image tower trainable) and joint training.
fn image_step<T: Scalar>(model: &Model<T>, data: &TrainData<'_, T>, idx: &[usize], phase: Phase, record: LogRecord) -> Result<StepOut<T>> {
    let cfg = &model.config;
    let tape = Tape::new();
    let store = match phase {
        Phase::Joint => model.trainable_store(),
        _ => model.image.clone(),
    };
    let bound = store.bind(&tape, |_| true);
    let patches = tape.constant(&patchify(&data.data.images(idx), &cfg.vit)?);
    let dv = encode_image(&cfg.vit, &bound, patches, false)?;
    let p_h = tape.constant(model.p_h());
    let (text_g, text_l, sc) = if phase == Phase::Joint {
        let prompts = model.prompts.as_ref().expect("joint training initializes prompts");
        let tb = model.text().bind(&tape);
        let words = tape.constant(&prompts.word_embeddings);
        let (g, l) =
            build_hierarchical_embeddings(model.text(), &tb, bound.get(GLOBAL_PROMPT)?, bound.get(LOCAL_PROMPT)?, words)?;
        let sc = if cfg.ablation.semantic_consistency() {
            Some(loss_sc(p_h, g)?)
        } else {
            None
        };
        (g, l, sc)
    } else {
        (p_h, p_h, None)
    };
    let scores = dual_view_scores(text_g, text_l, dv.f_cls_emb, dv.f_patch_emb, &cfg.alignment)?;
    let labels = data.data.labels_of(idx);
    let cls = cls_loss(
        cfg.ablation.cls_loss,
        scores.logits,
        &labels,
        &data.stats,
        &cfg.db,
        cfg.ablation.pos_weighting,
    )?;
    let kd = loss_kd(dv.f_cls, tape.constant(&data.teacher_rows(idx)?))?;
    let parts = StageParts {
        cls: Some(cls),
        kd: Some(kd),
        sc,
    };
    let loss = match phase {
        Phase::Stage1 => stage_loss(Stage::One, parts, &cfg.loss_weights)?,
        _ => sum_parts(&tape, parts, &cfg.loss_weights)?,
    };
    let record = LogRecord {
        loss: loss.item().as_f64(),
        cls: cls.item().as_f64(),
        kd: Some(kd.item().as_f64()),
        sc: item(sc),
        ..record
    };
    check_finite(&record, &scores.logits, data.data, idx)?;
    let grads = collect_grads(&tape, loss, &bound)?;
    Ok(StepOut { grads, record })
}

/// Frozen-tower features for every training image, computed once per stage-two run.
struct FeatureCache<T: Scalar> {
    global: Tensor<T>,
    local: Tensor<T>,
}

impl<T: Scalar> FeatureCache<T> {
    fn build(model: &Model<T>, data: &Dataset) -> Result<Self> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let (mut g, mut l) = (Vec::new(), Vec::new());
        for chunk in idx.chunks(model.config.eval_batch) {
            let f = model.features(&data.images(chunk))?;
            g.extend_from_slice(f.f_cls_emb.data());
            l.extend_from_slice(f.f_patch_emb.data());
        }
        let (n, e) = (model.config.vit.num_patches(), model.config.vit.embed_out);
        Ok(Self {
            global: Tensor::new([data.len(), e], g)?,
            local: Tensor::new([data.len(), n, e], l)?,
        })
    }
}

fn prompt_step<T: Scalar>(
    model: &Model<T>,
    data: &TrainData<'_, T>,
    cache: &FeatureCache<T>,
    idx: &[usize],
    record: LogRecord,
) -> Result<StepOut<T>> {
    let cfg = &model.config;
    let prompts = model.prompts.as_ref().expect("stage two initializes prompts");
    let tape = Tape::new();
    let store = prompts.to_store();
    let bound = store.bind(&tape, |_| true);
    let tb = model.text().bind(&tape);
    let words = tape.constant(&prompts.word_embeddings);
    let (g, l) = build_hierarchical_embeddings(model.text(), &tb, bound.get(GLOBAL_PROMPT)?, bound.get(LOCAL_PROMPT)?, words)?;
    let img_g = tape.constant(&gather_rows(&cache.global, idx)?);
    let img_l = tape.constant(&gather_rows(&cache.local, idx)?);
    let scores = dual_view_scores(g, l, img_g, img_l, &cfg.alignment)?;
    let labels = data.data.labels_of(idx);
    let cls = cls_loss(
        cfg.ablation.cls_loss,
        scores.logits,
        &labels,
        &data.stats,
        &cfg.db,
        cfg.ablation.pos_weighting,
    )?;
    let (loss, sc) = if cfg.ablation.semantic_consistency() {
        let sc = loss_sc(tape.constant(model.p_h()), g)?;
        let parts = StageParts {
            cls: Some(cls),
            kd: None,
            sc: Some(sc),
        };
        (stage_loss(Stage::Two, parts, &cfg.loss_weights)?, Some(sc))
    } else {
        let parts = StageParts {
            cls: Some(cls),
            kd: None,
            sc: None,
        };
        (sum_parts(&tape, parts, &cfg.loss_weights)?, None)
    };
    let record = LogRecord {
        loss: loss.item().as_f64(),
        cls: cls.item().as_f64(),
        kd: None,
        sc: item(sc),
        ..record
    };
    check_finite(&record, &scores.logits, data.data, idx)?;
    let grads = collect_grads(&tape, loss, &bound)?;
    Ok(StepOut { grads, record })
}

fn check_entry<T: Scalar>(model: &Model<T>, phase: Phase, resuming: bool) -> Result<()> {
    let ok = match (phase, model.stage) {
        (Phase::Stage1, StageTag::Init) => true,
        (Phase::Stage2, StageTag::Stage1) => true,
        (Phase::Joint, StageTag::Init) => true,
        (p, s) => resuming && p.tag() == s,
    };
    if ok {
        return Ok(());
    }
    let need = match phase {
        Phase::Stage1 | Phase::Joint => "a freshly initialized model".to_string(),
        Phase::Stage2 => "a stage-1 checkpoint".to_string(),
    };
    Err(Error::contract(format!(
        "{} needs {need}; got a {} model{}",
        phase.name(),
        model.stage.name(),
        if resuming { " with mismatching progress" } else { "" }
    )))
}

/// Runs (or resumes) one phase.
///
/// Stops early once `progress.step` reaches `stop_at`, leaving the model
/// mid-phase so the returned progress can be checkpointed and resumed.
pub fn train_phase<T: Scalar>(
    model: &mut Model<T>,
    phase: Phase,
    data: &TrainData<'_, T>,
    resume: Option<Progress<T>>,
    stop_at: Option<u64>,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<Progress<T>> {
    if let Some(p) = &resume {
        if p.phase != phase {
            return Err(Error::contract(format!(
                "cannot resume {} from {} progress",
                phase.name(),
                p.phase.name()
            )));
        }
    }
    check_entry(model, phase, resume.is_some())?;
    if phase != Phase::Stage1 && !model.config.ablation.hierarchical() {
        return Err(Error::config(format!(
            "{} requires hierarchical prompts, which the ablation flags disable",
            phase.name()
        )));
    }
    if phase != Phase::Stage1 && model.prompts.is_none() {
        model.init_prompts()?;
    }
    if phase == Phase::Stage2 && model.config.ablation.joint_training {
        return Err(Error::config("stage2 is not used with joint_training; run the joint phase"));
    }
    let sc = stage_config(model, phase);
    let n = data.data.len();
    let batches = n.div_ceil(sc.batch_size);
    let total_steps = (batches * sc.epochs) as u64;
    let cache = match phase {
        Phase::Stage2 => Some(FeatureCache::build(model, data.data)?),
        _ => None,
    };
    let mut progress = resume.unwrap_or_else(|| Progress::new(phase));
    model.stage = phase.tag();
    while progress.epoch < sc.epochs {
        let order = epoch_order(model.config.seed, phase, progress.epoch, n);
        while progress.batch < batches {
            if stop_at.is_some_and(|s| progress.step >= s) {
                return Ok(progress);
            }
            let idx = &order[progress.batch * sc.batch_size..((progress.batch + 1) * sc.batch_size).min(n)];
            let lr = scheduled_lr(sc.lr, model.config.schedule, progress.step, total_steps);
            let record = LogRecord {
                phase: phase.name().to_string(),
                epoch: progress.epoch,
                batch: progress.batch,
                step: progress.step,
                loss: 0.0,
                cls: 0.0,
                kd: None,
                sc: None,
                lr,
            };
            let out = match &cache {
                Some(c) => prompt_step(model, data, c, idx, record)?,
                None => image_step(model, data, idx, phase, record)?,
            };
            log(&out.record);
            apply(model, phase, &mut progress.optimizer, &out.grads, lr, sc.weight_decay)?;
            progress.step += 1;
            progress.batch += 1;
        }
        progress.batch = 0;
        progress.epoch += 1;
    }
    Ok(progress)
}

fn apply<T: Scalar>(
    model: &mut Model<T>,
    phase: Phase,
    opt: &mut AdamW<T>,
    grads: &BTreeMap<String, Vec<T>>,
    lr: f64,
    wd: f64,
) -> Result<()> {
    match phase {
        Phase::Stage1 => opt.update(&mut model.image, grads, |_| lr, wd),
        Phase::Stage2 => {
            let prompts = model.prompts.as_mut().expect("initialized");
            let mut store = prompts.to_store();
            opt.update(&mut store, grads, |_| lr, wd)?;
            prompts.update_from_store(&store)
        }
        Phase::Joint => {
            let ratio = if model.config.stage1.lr > 0.0 {
                model.config.stage2.lr / model.config.stage1.lr
            } else {
                0.0
            };
            let mut store = model.trainable_store();
            opt.update(&mut store, grads, |name| if name.starts_with("prompt.") { lr * ratio } else { lr }, wd)?;
            let mut image = ParamStore::new();
            for (k, v) in store.iter().filter(|(k, _)| !k.starts_with("prompt.")) {
                image.insert(k.clone(), v.clone());
            }
            model.image = image;
            model.prompts.as_mut().expect("initialized").update_from_store(&store)
        }
    }
}

/// Teacher selected by `config.teacher`: the seeded frozen copy, or the DVTE
/// file it names.
pub fn build_teacher<T: Scalar>(config: &super::TrainConfig) -> Result<TeacherHandle<T>> {
    let t = &config.teacher;
    match t.mode {
        TeacherMode::SeededFrozenEncoder => Ok(TeacherHandle::seeded(&config.vit, t.seed)),
        TeacherMode::PrecomputedFile => {
            let path = t
                .file
                .as_ref()
                .ok_or_else(|| Error::config("teacher.file: required in precomputed-file mode"))?;
            let table = read_teacher_file(path)?;
            TeacherHandle::precomputed(table, config.vit.embed_dim, t.adapter, t.seed)
        }
    }
}

/// The full schedule selected by the ablation flags: joint training, or stage
/// one followed by stage two when hierarchical prompts are enabled.
pub fn run_schedule<T: Scalar>(
    model: &mut Model<T>,
    train: &Dataset,
    teacher: &TeacherHandle<T>,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<()> {
    let data = TrainData::new(train, model, Some(teacher))?;
    if model.config.ablation.joint_training {
        train_phase(model, Phase::Joint, &data, None, None, log)?;
        return Ok(());
    }
    train_phase(model, Phase::Stage1, &data, None, None, log)?;
    if model.config.ablation.hierarchical() {
        train_phase(model, Phase::Stage2, &data, None, None, log)?;
    }
    Ok(())
}
