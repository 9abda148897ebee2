use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::alignment::fused_scores;
use crate::data::Dataset;
use crate::encoders::{encode_image_values, init_head, init_vit, DualViewFeatures, TextEncoder};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::prompts::{build_fixed_prompts, ClassVocabulary, PromptMode, PromptSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How far a model has been trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageTag {
    Init,
    Stage1,
    Stage2,
    Joint,
}

impl StageTag {
    pub fn code(self) -> u8 {
        match self {
            StageTag::Init => 0,
            StageTag::Stage1 => 1,
            StageTag::Stage2 => 2,
            StageTag::Joint => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => StageTag::Init,
            1 => StageTag::Stage1,
            2 => StageTag::Stage2,
            3 => StageTag::Joint,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            StageTag::Init => "init",
            StageTag::Stage1 => "stage1",
            StageTag::Stage2 => "stage2",
            StageTag::Joint => "joint",
        }
    }
}

/// Student image tower, frozen text side and (after prompt tuning) the hierarchical prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: TrainConfig,
    /// `vit.*` transformer and `head.*` embedding head.
    pub image: ParamStore<T>,
    pub prompts: Option<PromptSet<T>>,
    pub stage: StageTag,
    classes: usize,
    text: TextEncoder<T>,
    vocab: ClassVocabulary,
    p_h: Tensor<T>,
}

const STUDENT_STREAM: u64 = 11;

impl<T: Scalar> Model<T> {
    /// Fresh student seeded from `config.seed`.
    pub fn new(config: TrainConfig, classes: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(STUDENT_STREAM);
        let mut image = init_vit(&config.vit, &mut rng);
        for (k, v) in init_head(&config.vit, &mut rng).iter() {
            image.insert(k.clone(), v.clone());
        }
        Self::from_parts(config, classes, image, None, StageTag::Init)
    }

    /// Reassembles a model from stored tensors; the text side is rebuilt from its seed.
    pub fn from_parts(
        config: TrainConfig,
        classes: usize,
        image: ParamStore<T>,
        prompts: Option<ParamStore<T>>,
        stage: StageTag,
    ) -> Result<Self> {
        config.validate()?;
        let text = TextEncoder::new(config.text)?;
        let vocab = ClassVocabulary::seeded(classes, config.text.vocab_size, config.vocab_seed)?;
        let p_h = build_fixed_prompts(&vocab, &text)?;
        let mut model = Self {
            config,
            image: ParamStore::new(),
            prompts: None,
            stage,
            classes,
            text,
            vocab,
            p_h,
        };
        let mut reference = Self::reference_image_shapes(&model.config);
        for (name, t) in image.iter() {
            match reference.remove(name.as_str()) {
                Some(shape) if shape == t.shape() => {}
                Some(shape) => {
                    return Err(Error::contract(format!(
                        "parameter {name} has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::contract(format!("unexpected image parameter {name}"))),
            }
        }
        if let Some(name) = reference.keys().next() {
            return Err(Error::contract(format!("image parameter {name} missing")));
        }
        model.image = image;
        if let Some(store) = prompts {
            model.init_prompts()?;
            let set = model.prompts.as_mut().expect("just initialized");
            set.update_from_store(&store)?;
            let w = model.config.text.width;
            if set.global.shape() != [model.config.prompts.m, w] || set.local.shape() != [model.config.prompts.m, w] {
                return Err(Error::contract("prompt tensors do not match prompts.m × text.width"));
            }
        }
        Ok(model)
    }

    fn reference_image_shapes(cfg: &TrainConfig) -> std::collections::BTreeMap<String, Vec<usize>> {
        // Shapes only; the values from this throwaway init are discarded.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s: ParamStore<f32> = init_vit(&cfg.vit, &mut rng);
        for (k, v) in init_head(&cfg.vit, &mut rng).iter() {
            s.insert(k.clone(), v.clone());
        }
        s.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn text(&self) -> &TextEncoder<T> {
        &self.text
    }

    pub fn vocab(&self) -> &ClassVocabulary {
        &self.vocab
    }

    /// Fixed-template text embeddings `[c, D_e]`.
    pub fn p_h(&self) -> &Tensor<T> {
        &self.p_h
    }

    /// Creates the hierarchical prompts from the configured initializer.
    pub fn init_prompts(&mut self) -> Result<()> {
        let p = self.config.prompts;
        self.prompts = Some(PromptSet::init(
            p.init,
            p.m,
            &self.vocab,
            &self.text,
            p.std,
            self.config.seed ^ 0x9e37_79b9_7f4a_7c15,
        )?);
        Ok(())
    }

    /// Prompt mode used at inference: hierarchical once prompts exist.
    pub fn default_mode(&self) -> PromptMode {
        if self.prompts.is_some() {
            PromptMode::Hierarchical
        } else {
            PromptMode::Fixed
        }
    }

    /// `(text_global, text_local)`, each `[c, D_e]`.
    pub fn text_embeddings(&self, mode: PromptMode) -> Result<(Tensor<T>, Tensor<T>)> {
        match mode {
            PromptMode::Fixed => Ok((self.p_h.clone(), self.p_h.clone())),
            PromptMode::Hierarchical => {
                let set = self.prompts.as_ref().ok_or_else(|| {
                    Error::contract(format!(
                        "hierarchical prompts are absent from this {} model; evaluate with fixed prompts",
                        self.stage.name()
                    ))
                })?;
                set.embeddings(&self.text)
            }
        }
    }

    pub fn features(&self, images: &Tensor<T>) -> Result<DualViewFeatures<T>> {
        encode_image_values(&self.config.vit, &self.image, images, false)
    }

    /// Pre-scale fused scores `[B, c]` for a batch of images.
    pub fn score_images(&self, images: &Tensor<T>, mode: PromptMode) -> Result<Tensor<T>> {
        let (g, l) = self.text_embeddings(mode)?;
        let f = self.features(images)?;
        fused_scores(&g, &l, &f.f_cls_emb, &f.f_patch_emb, &self.config.alignment)
    }

    /// Pre-scale fused scores `[len, c]` for a whole dataset.
    pub fn score_dataset(&self, ds: &Dataset, mode: PromptMode) -> Result<Tensor<T>> {
        if ds.classes != self.classes {
            return Err(Error::contract(format!(
                "dataset has {} classes, model has {}",
                ds.classes, self.classes
            )));
        }
        let (g, l) = self.text_embeddings(mode)?;
        let mut data = Vec::with_capacity(ds.len() * self.classes);
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(self.config.eval_batch) {
            let f = self.features(&ds.images(chunk))?;
            let s = fused_scores(&g, &l, &f.f_cls_emb, &f.f_patch_emb, &self.config.alignment)?;
            data.extend_from_slice(s.data());
        }
        Ok(Tensor::new([ds.len(), self.classes], data)?)
    }

    pub fn image_hash(&self) -> String {
        self.image.content_hash()
    }

    /// Image parameters plus prompt vectors, if any.
    pub fn trainable_store(&self) -> ParamStore<T> {
        let mut s = self.image.clone();
        if let Some(p) = &self.prompts {
            for (k, v) in p.to_store().iter() {
                s.insert(k.clone(), v.clone());
            }
        }
        s
    }
}
