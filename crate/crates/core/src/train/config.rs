use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentConfig;
use crate::encoders::{TeacherMode, TextEncoderConfig, VitConfig};
use crate::error::{Error, Result};
use crate::losses::{ClsLossKind, DbLossParams, LossWeights};
use crate::prompts::PromptInit;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    /// Learnable tokens per view (`M`).
    pub m: usize,
    pub init: PromptInit,
    /// Standard deviation of the Gaussian initialization.
    pub std: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            m: 4,
            init: PromptInit::Gaussian,
            std: 0.02,
        }
    }
}

/// Switches for the ablation rows.
///
/// `dval_only` skips prompt tuning altogether (fixed prompts, stage one only).
/// `use_sc` has no effect without hierarchical prompts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub dval_only: bool,
    pub use_hpt: bool,
    pub use_sc: bool,
    pub joint_training: bool,
    pub cls_loss: ClsLossKind,
    pub pos_weighting: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            dval_only: false,
            use_hpt: true,
            use_sc: true,
            joint_training: false,
            cls_loss: ClsLossKind::Db,
            pos_weighting: true,
        }
    }
}

impl Ablation {
    pub fn hierarchical(&self) -> bool {
        self.use_hpt && !self.dval_only
    }

    pub fn semantic_consistency(&self) -> bool {
        self.use_sc && self.hierarchical()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub mode: TeacherMode,
    pub seed: u64,
    /// DVTE file, required in `precomputed-file` mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    /// Insert a frozen random adapter when the file width differs from the student.
    #[serde(default)]
    pub adapter: bool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            mode: TeacherMode::SeededFrozenEncoder,
            seed: 0x7eac,
            file: None,
            adapter: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine decay to zero over the stage.
    Cosine,
}

/// Everything that determines a training run.
///
/// Only `seed` and `db` are required in a config file; every other section
/// falls back to the desk defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub db: DbLossParams,
    #[serde(default = "desk_stage1")]
    pub stage1: StageConfig,
    #[serde(default = "desk_stage2")]
    pub stage2: StageConfig,
    #[serde(default)]
    pub alignment: AlignmentConfig,
    #[serde(default)]
    pub prompts: PromptConfig,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub vit: VitConfig,
    #[serde(default)]
    pub text: TextEncoderConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    /// Seed for class-name token ids.
    #[serde(default = "default_vocab_seed")]
    pub vocab_seed: u64,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
}

fn desk_stage1() -> StageConfig {
    StageConfig {
        epochs: 30,
        lr: 1e-3,
        weight_decay: 1e-4,
        batch_size: 32,
    }
}

fn desk_stage2() -> StageConfig {
    StageConfig {
        epochs: 15,
        lr: 1e-3,
        weight_decay: 1e-4,
        batch_size: 32,
    }
}

fn default_vocab_seed() -> u64 {
    0xc1a55
}

fn default_eval_batch() -> usize {
    64
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            db: DbLossParams::default(),
            stage1: desk_stage1(),
            stage2: desk_stage2(),
            alignment: AlignmentConfig::default(),
            prompts: PromptConfig::default(),
            ablation: Ablation::default(),
            loss_weights: LossWeights::default(),
            schedule: Schedule::default(),
            vit: VitConfig::default(),
            text: TextEncoderConfig::default(),
            teacher: TeacherConfig::default(),
            vocab_seed: default_vocab_seed(),
            eval_batch: default_eval_batch(),
        }
    }
}

impl TrainConfig {
    /// Pretrained-backbone schedule: 20 + 10 epochs, learning rates 1e-5 and 5e-6,
    /// weight decay 1e-4, batch 32.
    pub fn reference_schedule(mut self) -> Self {
        self.stage1 = StageConfig {
            epochs: 20,
            lr: 1e-5,
            weight_decay: 1e-4,
            batch_size: 32,
        };
        self.stage2 = StageConfig {
            epochs: 10,
            lr: 5e-6,
            weight_decay: 1e-4,
            batch_size: 32,
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.db.validate()?;
        self.alignment
            .validate(self.vit.num_patches())
            .map_err(|e| Error::config(format!("alignment: {e}")))?;
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if s.batch_size == 0 {
                return Err(Error::config(format!("{name}.batch_size: must be positive")));
            }
            if !(s.lr >= 0.0 && s.lr.is_finite()) {
                return Err(Error::config(format!("{name}.lr: must be a finite non-negative number")));
            }
            if !(s.weight_decay >= 0.0 && s.weight_decay.is_finite()) {
                return Err(Error::config(format!("{name}.weight_decay: must be finite and non-negative")));
            }
        }
        if self.prompts.m == 0 {
            return Err(Error::config("prompts.m: must be at least 1"));
        }
        if self.prompts.m + 1 > self.text.max_len {
            return Err(Error::config(format!(
                "prompts.m: {} tokens plus the class name exceed text.max_len {}",
                self.prompts.m, self.text.max_len
            )));
        }
        if self.text.embed_out != self.vit.embed_out {
            return Err(Error::config(format!(
                "text.embed_out {} differs from vit.embed_out {}",
                self.text.embed_out, self.vit.embed_out
            )));
        }
        if self.teacher.mode == TeacherMode::PrecomputedFile && self.teacher.file.is_none() {
            return Err(Error::config("teacher.file: required in precomputed-file mode"));
        }
        if self.eval_batch == 0 {
            return Err(Error::config("eval_batch: must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
