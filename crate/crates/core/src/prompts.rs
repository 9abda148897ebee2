//! Fixed template prompts and class-shared hierarchical learnable prompts.
//!
//! A fixed prompt is the template `a photo of a` (four reserved token ids)
//! followed by the class-name id. Hierarchical prompts replace the template
//! with `M` learnable vectors: one set for the global view, one for the local
//! view, both prepended to the frozen class-name embedding.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::params::{normal_tensor, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Token ids of the fixed template.
pub const TEMPLATE_IDS: [u32; 4] = [0, 1, 2, 3];
pub const GLOBAL_PROMPT: &str = "prompt.global";
pub const LOCAL_PROMPT: &str = "prompt.local";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    Fixed,
    Hierarchical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptInit {
    /// i.i.d. `N(0, std²)` entries.
    Gaussian,
    /// Copies of the template token embeddings; requires `M == 4`.
    Template,
}

/// Class-name token ids, one per class, drawn without replacement from the
/// non-template part of the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    pub class_ids: Vec<u32>,
}

impl ClassVocabulary {
    pub fn seeded(classes: usize, vocab_size: usize, seed: u64) -> Result<Self> {
        let free = vocab_size.saturating_sub(TEMPLATE_IDS.len());
        if classes == 0 || classes > free {
            return Err(Error::config(format!(
                "cannot assign {classes} class names from a vocabulary of {vocab_size}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let class_ids = sample(&mut rng, free, classes)
            .into_iter()
            .map(|i| (i + TEMPLATE_IDS.len()) as u32)
            .collect();
        Ok(Self { class_ids })
    }

    pub fn classes(&self) -> usize {
        self.class_ids.len()
    }

    /// Rows `template ⊕ class` for every class.
    pub fn fixed_rows(&self) -> Vec<Vec<u32>> {
        self.class_ids
            .iter()
            .map(|&c| TEMPLATE_IDS.iter().copied().chain([c]).collect())
            .collect()
    }
}

/// `P_H`: fixed-template text embeddings, `[c, D_e]`.
pub fn build_fixed_prompts<T: Scalar>(vocab: &ClassVocabulary, enc: &TextEncoder<T>) -> Result<Tensor<T>> {
    if vocab.classes() == 0 {
        return Err(Error::config("at least one class is required"));
    }
    enc.encode_tokens(&vocab.fixed_rows())
}

/// Learnable global and local prompt vectors plus the frozen class-name embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet<T: Scalar> {
    /// `[M, D_t]`
    pub global: Tensor<T>,
    /// `[M, D_t]`
    pub local: Tensor<T>,
    /// `[c, D_t]`, frozen.
    pub word_embeddings: Tensor<T>,
}

impl<T: Scalar> PromptSet<T> {
    /// Gaussian initialization with standard deviation `std`.
    pub fn init_hierarchical(
        m: usize,
        vocab: &ClassVocabulary,
        enc: &TextEncoder<T>,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("prompt length M must be at least 1"));
        }
        let w = enc.config().width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            global: normal_tensor(&mut rng, &[m, w], std),
            local: normal_tensor(&mut rng, &[m, w], std),
            word_embeddings: enc.token_embeddings(&vocab.class_ids)?,
        })
    }

    /// Both prompt sets start as the template token embeddings, so the
    /// hierarchical rows coincide with the fixed rows.
    pub fn init_from_template(m: usize, vocab: &ClassVocabulary, enc: &TextEncoder<T>) -> Result<Self> {
        if m != TEMPLATE_IDS.len() {
            return Err(Error::config(format!(
                "template initialization needs M = {}, got {m}",
                TEMPLATE_IDS.len()
            )));
        }
        let template = enc.token_embeddings(&TEMPLATE_IDS)?;
        Ok(Self {
            global: template.clone(),
            local: template,
            word_embeddings: enc.token_embeddings(&vocab.class_ids)?,
        })
    }

    pub fn init(
        init: PromptInit,
        m: usize,
        vocab: &ClassVocabulary,
        enc: &TextEncoder<T>,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        match init {
            PromptInit::Gaussian => Self::init_hierarchical(m, vocab, enc, std, seed),
            PromptInit::Template => Self::init_from_template(m, vocab, enc),
        }
    }

    pub fn m(&self) -> usize {
        self.global.shape()[0]
    }

    /// Number of trainable scalars, `2·M·D_t`.
    pub fn trainable_count(&self) -> usize {
        self.global.numel() + self.local.numel()
    }

    /// Trainable vectors as a parameter store (`prompt.global`, `prompt.local`).
    pub fn to_store(&self) -> ParamStore<T> {
        let mut s = ParamStore::new();
        s.insert(GLOBAL_PROMPT, self.global.clone());
        s.insert(LOCAL_PROMPT, self.local.clone());
        s
    }

    pub fn update_from_store(&mut self, store: &ParamStore<T>) -> Result<()> {
        self.global = store.require(GLOBAL_PROMPT)?.clone();
        self.local = store.require(LOCAL_PROMPT)?.clone();
        Ok(())
    }

    /// `(P_G, P_L)` without gradients.
    pub fn embeddings(&self, enc: &TextEncoder<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let tape = Tape::new();
        let p = enc.bind(&tape);
        let (g, l) = build_hierarchical_embeddings(
            enc,
            &p,
            tape.constant(&self.global),
            tape.constant(&self.local),
            tape.constant(&self.word_embeddings),
        )?;
        Ok((g.value(), l.value()))
    }
}

fn encode_with_prefix<'t, T: Scalar>(
    enc: &TextEncoder<T>,
    p: &Bound<'t, T>,
    prefix: Var<'t, T>,
    words: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (m, w) = {
        let s = prefix.shape();
        (s[0], s[1])
    };
    let c = words.shape()[0];
    let rows: Vec<usize> = (0..c).flat_map(|_| 0..m).collect();
    let repeated = prefix.index_select(&rows)?.reshape([c, m, w])?;
    let x = prefix.tape().concat(&[repeated, words.reshape([c, 1, w])?], 1)?;
    enc.encode_embedded(p, x)
}

/// `(P_G, P_L)`: rows `[v_1..v_M, w_i]` and `[v'_1..v'_M, w_i]` through the frozen encoder.
///
/// Gradients reach `global` and `local` only when they are trainable leaves.
pub fn build_hierarchical_embeddings<'t, T: Scalar>(
    enc: &TextEncoder<T>,
    p: &Bound<'t, T>,
    global: Var<'t, T>,
    local: Var<'t, T>,
    words: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    Ok((
        encode_with_prefix(enc, p, global, words)?,
        encode_with_prefix(enc, p, local, words)?,
    ))
}

/// Text embeddings used for alignment; the hierarchical pair is absent in fixed mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingSet<T: Scalar> {
    pub p_h: Tensor<T>,
    pub p_g: Option<Tensor<T>>,
    pub p_l: Option<Tensor<T>>,
}
