use super::{ArModel, Condition, SamplingParams};
use crate::dsp::{Spectrogram, Waveform};
use crate::error::Result;
use crate::substrate::Scalar;
use crate::tokenizer::{decode_tokens, AudioFrontend, MultiScaleTokenMap, Tokenizer};

#[derive(Debug, Clone)]
pub struct Generated {
    pub waveform: Waveform,
    pub tokens: MultiScaleTokenMap,
    /// log1p magnitude spectrogram handed to Griffin-Lim.
    pub spectrogram: Spectrogram,
}

/// Samples a token map and renders it to audio. Errors carry the stage
/// that raised them.
pub fn generate<T: Scalar>(
    cond: Condition,
    seed: u64,
    params: &SamplingParams,
    model: &ArModel<T>,
    tokenizer: &Tokenizer<T>,
    frontend: &AudioFrontend,
) -> Result<Generated> {
    let tokens = model.sample(cond, seed, params).map_err(|e| e.in_stage("armodel"))?;
    let spectrogram = decode_tokens(&tokens, frontend, tokenizer).map_err(|e| e.in_stage("tokenizer"))?;
    let waveform = frontend
        .synthesize(&spectrogram, seed)
        .map_err(|e| e.in_stage("griffin-lim"))?;
    Ok(Generated {
        waveform,
        tokens,
        spectrogram,
    })
}
