use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Precision;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Mlm,
    Contrastive,
    HardNegative,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Mlm => "mlm",
            Stage::Contrastive => "contrastive",
            Stage::HardNegative => "hard_negative",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    pub warmup_fraction: f64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup_fraction {} must lie strictly between 0 and 1",
                self.warmup_fraction
            )));
        }
        Ok(())
    }

    /// At least one warmup step, and at least one decay step when there is room.
    pub fn warmup_steps(&self) -> usize {
        let w = (self.warmup_fraction * self.total_steps as f64).round() as usize;
        if self.total_steps < 2 {
            1
        } else {
            w.clamp(1, self.total_steps - 1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Architecture used when a stage starts without an initial checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub num_projections: usize,
    pub precision: Precision,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 2,
            heads: 4,
            ffn_dim: 512,
            num_projections: 4,
            precision: Precision::F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StageConfigFile", into = "StageConfigFile")]
pub struct StageConfig {
    pub version: u32,
    pub stage: Stage,
    pub global_batch: usize,
    pub grad_accum: usize,
    pub max_len: usize,
    pub mask_rate: f64,
    /// Of the selected positions: share replaced by [MASK], share replaced by
    /// a random token; the rest keep the original token.
    pub mask_token_prob: f64,
    pub random_token_prob: f64,
    pub temperature: f64,
    pub symmetric_loss: bool,
    pub in_batch_negatives: bool,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    /// Stop after this many passes over the data instead of cycling.
    pub max_epochs: Option<usize>,
    pub arch: ArchConfig,
}

/// On-disk form: everything but `stage` falls back to the stage's defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageConfigFile {
    version: Option<u32>,
    stage: Stage,
    global_batch: Option<usize>,
    grad_accum: Option<usize>,
    max_len: Option<usize>,
    mask_rate: Option<f64>,
    mask_token_prob: Option<f64>,
    random_token_prob: Option<f64>,
    temperature: Option<f64>,
    symmetric_loss: Option<bool>,
    in_batch_negatives: Option<bool>,
    seed: Option<u64>,
    lr: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
    weight_decay: Option<f64>,
    total_steps: Option<usize>,
    warmup_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_epochs: Option<usize>,
    arch: Option<ArchConfig>,
}

impl From<StageConfig> for StageConfigFile {
    fn from(c: StageConfig) -> Self {
        StageConfigFile {
            version: Some(c.version),
            stage: c.stage,
            global_batch: Some(c.global_batch),
            grad_accum: Some(c.grad_accum),
            max_len: Some(c.max_len),
            mask_rate: Some(c.mask_rate),
            mask_token_prob: Some(c.mask_token_prob),
            random_token_prob: Some(c.random_token_prob),
            temperature: Some(c.temperature),
            symmetric_loss: Some(c.symmetric_loss),
            in_batch_negatives: Some(c.in_batch_negatives),
            seed: Some(c.seed),
            lr: Some(c.optimizer.lr),
            beta1: Some(c.optimizer.beta1),
            beta2: Some(c.optimizer.beta2),
            eps: Some(c.optimizer.eps),
            weight_decay: Some(c.optimizer.weight_decay),
            total_steps: Some(c.schedule.total_steps),
            warmup_fraction: Some(c.schedule.warmup_fraction),
            max_epochs: c.max_epochs,
            arch: Some(c.arch),
        }
    }
}

impl TryFrom<StageConfigFile> for StageConfig {
    type Error = Error;

    fn try_from(f: StageConfigFile) -> Result<Self> {
        let d = StageConfig::defaults(f.stage);
        let cfg = StageConfig {
            version: f.version.unwrap_or(CONFIG_VERSION),
            stage: f.stage,
            global_batch: f.global_batch.unwrap_or(d.global_batch),
            grad_accum: f.grad_accum.unwrap_or(d.grad_accum),
            max_len: f.max_len.unwrap_or(d.max_len),
            mask_rate: f.mask_rate.unwrap_or(d.mask_rate),
            mask_token_prob: f.mask_token_prob.unwrap_or(d.mask_token_prob),
            random_token_prob: f.random_token_prob.unwrap_or(d.random_token_prob),
            temperature: f.temperature.unwrap_or(d.temperature),
            symmetric_loss: f.symmetric_loss.unwrap_or(d.symmetric_loss),
            in_batch_negatives: f.in_batch_negatives.unwrap_or(d.in_batch_negatives),
            seed: f.seed.unwrap_or(d.seed),
            optimizer: OptimizerConfig {
                lr: f.lr.unwrap_or(d.optimizer.lr),
                beta1: f.beta1.unwrap_or(d.optimizer.beta1),
                beta2: f.beta2.unwrap_or(d.optimizer.beta2),
                eps: f.eps.unwrap_or(d.optimizer.eps),
                weight_decay: f.weight_decay.unwrap_or(d.optimizer.weight_decay),
            },
            schedule: ScheduleConfig {
                total_steps: f.total_steps.unwrap_or(d.schedule.total_steps),
                warmup_fraction: f.warmup_fraction.unwrap_or(d.schedule.warmup_fraction),
            },
            max_epochs: f.max_epochs,
            arch: f.arch.unwrap_or_default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl StageConfig {
    pub fn defaults(stage: Stage) -> Self {
        let (global_batch, grad_accum, lr, beta1, warmup) = match stage {
            Stage::Mlm => (16, 2, 2e-4, 0.9, 0.10),
            Stage::Contrastive => (1024, 1, 5e-5, 0.95, 0.06),
            Stage::HardNegative => (1024, 2, 5e-5, 0.95, 0.06),
        };
        StageConfig {
            version: CONFIG_VERSION,
            stage,
            global_batch,
            grad_accum,
            max_len: 512,
            mask_rate: 0.30,
            mask_token_prob: 1.0,
            random_token_prob: 0.0,
            temperature: 0.05,
            symmetric_loss: false,
            in_batch_negatives: true,
            seed: 0,
            optimizer: OptimizerConfig {
                lr,
                beta1,
                beta2: 0.98,
                eps: 1e-8,
                weight_decay: 0.01,
            },
            schedule: ScheduleConfig {
                total_steps: 1000,
                warmup_fraction: warmup,
            },
            max_epochs: None,
            arch: ArchConfig::default(),
        }
    }

    pub fn micro_batch(&self) -> usize {
        self.global_batch / self.grad_accum
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return fail(format!("config version {} is not supported (expected {CONFIG_VERSION})", self.version));
        }
        if self.global_batch == 0 || self.grad_accum == 0 || self.global_batch % self.grad_accum != 0 {
            return fail(format!(
                "global_batch {} must be a positive multiple of grad_accum {}",
                self.global_batch, self.grad_accum
            ));
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return fail(format!("mask_rate {} outside [0, 1]", self.mask_rate));
        }
        let p = (self.mask_token_prob, self.random_token_prob);
        if p.0 < 0.0 || p.1 < 0.0 || p.0 + p.1 > 1.0 + 1e-12 {
            return fail(format!("mask_token_prob + random_token_prob must be a probability split, got {p:?}"));
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return fail(format!("invalid optimizer settings {o:?}"));
        }
        if self.max_epochs == Some(0) {
            return fail("max_epochs must be positive".into());
        }
        self.schedule.validate()
    }
}
