//! Next-scale autoregressive transformer over multi-scale token maps.
//!
//! A token map is flattened coarse to fine. Every position of scale `s`
//! sees the class start token and the accumulated codebook latent of all
//! coarser scales, resampled to its own grid, so a whole scale is predicted
//! in one parallel step.

mod generate;
mod model;
mod sample;
mod train;

pub use generate::{generate, Generated};
pub use model::ArModel;
pub use sample::{sample_index, SamplingParams};
pub use train::{ArStepReport, ArTrainer};

use crate::error::{Error, Result};
use crate::substrate::{AdamConfig, AttentionMask};
use crate::tokenizer::{validate_schedule, MultiScaleTokenMap};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArConfig {
    /// Vocabulary V, the tokenizer's codebook size.
    pub vocab: usize,
    pub schedule: Vec<usize>,
    /// Codebook vector length, used to build scale inputs.
    pub code_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Number of real classes; id `num_classes` is the unconditional sentinel.
    pub num_classes: usize,
    pub sampling: SamplingParams,
    pub optimizer: AdamConfig,
}

impl Default for ArConfig {
    fn default() -> Self {
        Self {
            vocab: 1024,
            schedule: vec![1, 2, 4, 8, 16],
            code_dim: 16,
            width: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            num_classes: 11,
            sampling: SamplingParams::default(),
            optimizer: AdamConfig {
                lr: 1e-3,
                clip_norm: Some(1.0),
                ..Default::default()
            },
        }
    }
}

impl ArConfig {
    pub fn grid(&self) -> usize {
        *self.schedule.last().unwrap_or(&0)
    }

    /// Positions per sequence. The start token occupies the single
    /// position of the first scale.
    pub fn context_len(&self) -> usize {
        self.schedule.iter().map(|k| k * k).sum()
    }

    pub fn condition_vocab(&self) -> usize {
        self.num_classes + 1
    }

    pub fn validate(&self) -> Result<()> {
        validate_schedule(&self.schedule, self.grid())?;
        if self.schedule[0] != 1 {
            return Err(Error::Config("the first scale must be 1x1 to hold the start token".into()));
        }
        if self.vocab < 2 {
            return Err(Error::Config("vocabulary needs at least two codes".into()));
        }
        for (name, v) in [
            ("code_dim", self.code_dim),
            ("width", self.width),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("ar {name} must be positive")));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        self.sampling.validate()?;
        self.optimizer.validate()
    }
}

/// Class label or the unconditional sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    Class(usize),
    Unconditional,
}

impl Condition {
    pub fn id(self, cfg: &ArConfig) -> Result<usize> {
        match self {
            Condition::Class(c) if c < cfg.num_classes => Ok(c),
            Condition::Class(c) => Err(Error::InvalidInput(format!(
                "unknown class id {c} (model has {} classes)",
                cfg.num_classes
            ))),
            Condition::Unconditional => Ok(cfg.num_classes),
        }
    }
}

/// Token map flattened coarse to fine, each grid row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleSequence {
    pub schedule: Vec<usize>,
    pub tokens: Vec<u32>,
    /// Index into the schedule for every position.
    pub scale_ids: Vec<usize>,
    /// Row-major position within its own grid.
    pub pos_ids: Vec<usize>,
}

impl ScaleSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Position ranges of each scale.
    pub fn scale_ranges(schedule: &[usize]) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        schedule
            .iter()
            .map(|k| {
                let r = start..start + k * k;
                start = r.end;
                r
            })
            .collect()
    }
}

pub fn flatten_scales(t: &MultiScaleTokenMap) -> ScaleSequence {
    let mut seq = ScaleSequence {
        schedule: t.schedule.clone(),
        tokens: Vec::with_capacity(t.len()),
        scale_ids: Vec::with_capacity(t.len()),
        pos_ids: Vec::with_capacity(t.len()),
    };
    for (s, grid) in t.grids.iter().enumerate() {
        for (p, &tok) in grid.iter().enumerate() {
            seq.tokens.push(tok);
            seq.scale_ids.push(s);
            seq.pos_ids.push(p);
        }
    }
    seq
}

pub fn unflatten_scales(seq: &ScaleSequence) -> Result<MultiScaleTokenMap> {
    let total: usize = seq.schedule.iter().map(|k| k * k).sum();
    if seq.tokens.len() != total {
        return Err(Error::Shape(format!(
            "{} tokens for schedule {:?} ({total} positions)",
            seq.tokens.len(),
            seq.schedule
        )));
    }
    let grids = ScaleSequence::scale_ranges(&seq.schedule)
        .into_iter()
        .map(|r| seq.tokens[r].to_vec())
        .collect();
    MultiScaleTokenMap::new(seq.schedule.clone(), grids)
}

/// Position `i` may attend to `j` iff `scale(j) <= scale(i)`.
pub fn block_causal_mask(schedule: &[usize]) -> AttentionMask {
    let ids: Vec<usize> = schedule
        .iter()
        .enumerate()
        .flat_map(|(s, k)| std::iter::repeat_n(s, k * k))
        .collect();
    let n = ids.len();
    let allow = (0..n * n).map(|x| ids[x % n] <= ids[x / n]).collect();
    AttentionMask::new(n, n, allow).expect("every position sees itself")
}
