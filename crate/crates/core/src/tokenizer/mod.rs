//! Multi-scale VQ tokenizer: patch embedding with learnable tokens, a
//! transformer encoder, a residual quantizer that reuses one codebook at
//! every scale, and a transformer decoder with learned query tokens.

mod disc;
mod frontend;
mod model;
mod patch;
mod quant;
mod tokens;
mod train;

pub use disc::{generator_loss, hinge_loss, PatchDiscriminator};
pub use frontend::{decode_tokens, detokenize, tokenize, AudioFrontend, NormStats};
pub use model::{tokenizer_loss, Forward, LossComponents, Tokenizer};
pub use patch::{patchify, unpatchify, unpatchify_index};
pub use quant::{
    area_matrix, bilinear_matrix, multiscale_quantize, multiscale_quantize_identity, quantize_nearest,
    QuantizeResult, ScaleOps,
};
pub use tokens::MultiScaleTokenMap;
pub use train::{TokenizerStepReport, TokenizerTrainer};

use crate::error::{Error, Result};
use crate::substrate::AdamConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    /// Input channels C.
    pub channels: usize,
    /// Input side M (inputs are C x M x M).
    pub size: usize,
    /// Patch side L.
    pub patch: usize,
    /// Learnable tokens S appended before encoding.
    pub learnable_tokens: usize,
    pub width: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub schedule: Vec<usize>,
    pub lambda_recon: f64,
    pub lambda_vq: f64,
    pub lambda_ad: f64,
    pub beta: f64,
    /// Steps a code may go unused before it is reseeded.
    pub dead_code_steps: u64,
    pub disc_channels: usize,
    pub optimizer: AdamConfig,
    pub disc_optimizer: AdamConfig,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            channels: 2,
            size: 256,
            patch: 16,
            learnable_tokens: 4,
            width: 64,
            encoder_depth: 2,
            decoder_depth: 2,
            heads: 4,
            mlp_ratio: 2,
            codebook_size: 1024,
            code_dim: 16,
            schedule: vec![1, 2, 4, 8, 16],
            lambda_recon: 1.0,
            lambda_vq: 1.0,
            lambda_ad: 0.0,
            beta: 0.25,
            dead_code_steps: 256,
            disc_channels: 16,
            optimizer: AdamConfig {
                lr: 2e-3,
                clip_norm: Some(1.0),
                ..Default::default()
            },
            disc_optimizer: AdamConfig {
                lr: 1e-3,
                ..Default::default()
            },
        }
    }
}

/// Checks a scale schedule against the full grid side `k`.
pub fn validate_schedule(schedule: &[usize], k: usize) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::Config("scale schedule is empty".into()));
    }
    if schedule.windows(2).any(|w| w[0] >= w[1]) || schedule[0] == 0 {
        return Err(Error::Config(format!("schedule {schedule:?} must be strictly ascending and positive")));
    }
    if *schedule.last().unwrap() != k {
        return Err(Error::Config(format!("schedule {schedule:?} must end at the grid side {k}")));
    }
    if let Some(bad) = schedule.iter().find(|&&s| !k.is_multiple_of(s)) {
        return Err(Error::Config(format!("scale {bad} does not divide the grid side {k}")));
    }
    Ok(())
}

impl TokenizerConfig {
    /// Grid side K = M / L.
    pub fn grid(&self) -> usize {
        self.size / self.patch.max(1)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn sequence_len(&self) -> usize {
        self.schedule.iter().map(|k| k * k).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("size", self.size),
            ("patch", self.patch),
            ("width", self.width),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("code_dim", self.code_dim),
            ("disc_channels", self.disc_channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("tokenizer {name} must be positive")));
        }
        if !self.size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "patch size {} does not divide input size {}",
                self.patch, self.size
            )));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook needs at least 2 entries".into()));
        }
        let lambdas = [self.lambda_recon, self.lambda_vq, self.lambda_ad, self.beta];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.dead_code_steps == 0 {
            return Err(Error::Config("dead_code_steps must be positive".into()));
        }
        self.optimizer.validate()?;
        self.disc_optimizer.validate()?;
        validate_schedule(&self.schedule, self.grid())
    }
}
