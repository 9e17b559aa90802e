use crate::armodel::{ArConfig, SamplingParams};
use crate::cmx::{plan_cmx, CmxDescriptor, CmxMode};
use crate::dsp::{GriffinLimOptions, MelConfig, StftConfig};
use crate::error::{Error, Result};
use crate::metrics::MiniClassifierConfig;
use crate::tokenizer::{AudioFrontend, NormStats, TokenizerConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// The eleven NSynth instrument families.
pub const NSYNTH_FAMILIES: [&str; 11] = [
    "bass", "brass", "flute", "guitar", "keyboard", "mallet", "organ", "reed", "string", "synth_lead", "vocal",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSON-lines manifest; relative audio paths resolve against its directory.
    pub manifest: Option<PathBuf>,
    pub sample_rate: u32,
    /// STFT frames per clip. Audio is cropped or zero-padded to `frames * hop`.
    pub frames: usize,
    /// Resample clips at other rates instead of skipping them.
    pub resample: bool,
    pub instrument_families: Vec<String>,
    /// Exclusive upper bound on pitch labels.
    pub pitch_classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            sample_rate: 16000,
            frames: 256,
            resample: false,
            instrument_families: NSYNTH_FAMILIES.iter().map(|s| s.to_string()).collect(),
            pitch_classes: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmxConfig {
    pub mode: CmxMode,
    /// Packed spatial side; the spectrogram becomes `C x side x side`.
    pub side: usize,
}

impl Default for CmxConfig {
    fn default() -> Self {
        Self {
            mode: CmxMode::Interleave,
            side: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tokenizer_steps: u64,
    pub ar_steps: u64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tokenizer_steps: 2000,
            ar_steps: 1000,
            batch_size: 8,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub count: usize,
    /// Instrument family name, class index, or "unconditional".
    pub condition: String,
    pub sampling: SamplingParams,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            count: 4,
            condition: "unconditional".into(),
            sampling: SamplingParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    MelStats,
    MiniClassifier,
    ExternalFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub ndb_k: usize,
    pub ndb_alpha: f64,
    /// Minimum clips per set for the distribution metrics.
    pub min_samples: usize,
    /// Embedder for FAD.
    pub provider: ProviderKind,
    /// MARSEMBD files for the external provider.
    pub reference_embeddings: Option<PathBuf>,
    pub candidate_embeddings: Option<PathBuf>,
    pub mel: MelConfig,
    pub classifier: MiniClassifierConfig,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            ndb_k: 10,
            ndb_alpha: 0.05,
            min_samples: 2,
            provider: ProviderKind::MelStats,
            reference_embeddings: None,
            candidate_embeddings: None,
            mel: MelConfig::default(),
            classifier: MiniClassifierConfig::default(),
        }
    }
}

/// Everything a run needs. Loaded from TOML, validated before use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub stft: StftConfig,
    pub cmx: CmxConfig,
    pub griffin_lim: GriffinLimOptions,
    pub tokenizer: TokenizerConfig,
    pub ar: ArConfig,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
    pub metrics: MetricsConfig,
}


impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(m) = &cfg.data.manifest {
            if m.is_relative() {
                cfg.data.manifest = Some(path.parent().unwrap_or(Path::new(".")).join(m));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON form. The manifest location is left
    /// out so that moving a dataset does not orphan its artifacts.
    pub fn hash(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.data.manifest = None;
        let json = serde_json::to_vec(&c).expect("config serialises");
        Sha256::digest(&json).into()
    }

    pub fn hash_hex(&self) -> String {
        hex(&self.hash())
    }

    pub fn cmx_descriptor(&self) -> Result<CmxDescriptor> {
        plan_cmx(self.stft.trimmed_bins(), self.data.frames, self.cmx.side, self.cmx.side, self.cmx.mode)
    }

    pub fn frontend(&self, norm: NormStats) -> Result<AudioFrontend> {
        let f = AudioFrontend {
            stft: self.stft,
            sample_rate: self.data.sample_rate,
            frames: self.data.frames,
            cmx: self.cmx_descriptor()?,
            norm,
            griffin_lim: self.griffin_lim,
        };
        f.validate()?;
        Ok(f)
    }

    /// Per-module checks plus the cross-module ones: the packed spectrogram
    /// must be the tokenizer input, and the AR model must share the
    /// tokenizer's schedule, vocabulary and code size.
    pub fn validate(&self) -> Result<()> {
        if self.data.sample_rate == 0 || self.data.frames == 0 {
            return Err(Error::Config("sample_rate and frames must be positive".into()));
        }
        if self.data.instrument_families.len() < 2 || self.data.pitch_classes < 2 {
            return Err(Error::Config("label vocabularies need at least two entries".into()));
        }
        let mut names = self.data.instrument_families.clone();
        names.sort();
        names.dedup();
        if names.len() != self.data.instrument_families.len() {
            return Err(Error::Config("instrument family names must be unique".into()));
        }
        self.stft.validate()?;
        let d = self.cmx_descriptor()?;
        self.tokenizer.validate()?;
        self.ar.validate()?;
        let t = &self.tokenizer;
        if d.out_shape() != (t.channels, t.size, t.size) {
            return Err(Error::Config(format!(
                "cmx output {:?} does not match tokenizer input {}x{}x{}",
                d.out_shape(),
                t.channels,
                t.size,
                t.size
            )));
        }
        if self.ar.schedule != t.schedule || self.ar.vocab != t.codebook_size || self.ar.code_dim != t.code_dim {
            return Err(Error::Config(
                "ar schedule, vocab and code_dim must equal the tokenizer's schedule, codebook_size and code_dim".into(),
            ));
        }
        if self.ar.num_classes != self.data.instrument_families.len() {
            return Err(Error::Config(format!(
                "ar num_classes {} but {} instrument families",
                self.ar.num_classes,
                self.data.instrument_families.len()
            )));
        }
        if self.train.batch_size == 0 || self.train.checkpoint_every == 0 {
            return Err(Error::Config("batch_size and checkpoint_every must be positive".into()));
        }
        self.generate.sampling.validate()?;
        if self.metrics.ndb_k < 2 || !(self.metrics.ndb_alpha > 0.0 && self.metrics.ndb_alpha < 1.0) {
            return Err(Error::Config("ndb_k must be >= 2 and ndb_alpha in (0, 1)".into()));
        }
        if self.metrics.min_samples < 2 {
            return Err(Error::Config("metrics.min_samples must be at least 2".into()));
        }
        if self.metrics.provider == ProviderKind::ExternalFile
            && (self.metrics.reference_embeddings.is_none() || self.metrics.candidate_embeddings.is_none())
        {
            return Err(Error::Config("external_file provider needs both embedding paths".into()));
        }
        Ok(())
    }

    /// Small end-to-end configuration: 0.512 s clips, 4 x 64 x 64 packed
    /// spectrograms and a two-block tokenizer and AR model.
    pub fn desk_scale() -> Self {
        let mut c = Self::default();
        c.stft.n_fft = 256;
        c.stft.hop = 64;
        c.data.frames = 128;
        c.cmx.side = 64;
        c.griffin_lim.iters = 32;
        c.tokenizer = TokenizerConfig {
            channels: 4,
            size: 64,
            patch: 8,
            width: 32,
            heads: 2,
            codebook_size: 64,
            code_dim: 8,
            schedule: vec![1, 2, 4, 8],
            dead_code_steps: 64,
            ..Default::default()
        };
        c.ar = ArConfig {
            vocab: 64,
            schedule: vec![1, 2, 4, 8],
            code_dim: 8,
            width: 32,
            heads: 2,
            ..Default::default()
        };
        c.train = TrainConfig {
            tokenizer_steps: 200,
            ar_steps: 200,
            batch_size: 4,
            checkpoint_every: 100,
        };
        c.metrics.ndb_k = 2;
        c.metrics.mel.n_mels = 32;
        c
    }
}

pub(crate) fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_compose() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.cmx_descriptor().unwrap().out_shape(), (2, 256, 256));
        RunConfig::desk_scale().validate().unwrap();
        assert_eq!(RunConfig::desk_scale().cmx_descriptor().unwrap().out_shape(), (4, 64, 64));
    }

    #[test]
    fn toml_roundtrip_and_hash() {
        let c = RunConfig::desk_scale();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(d.hash(), c.hash());
        let mut e = c.clone();
        e.data.manifest = Some("elsewhere.jsonl".into());
        assert_eq!(e.hash(), c.hash());
        assert_eq!(c.hash_hex().len(), 64);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let c = RunConfig::from_toml("seed = 7\n[train]\nbatch_size = 2\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.batch_size, 2);
        assert_eq!(c.train.ar_steps, TrainConfig::default().ar_steps);
        let err = RunConfig::from_toml("[train]\nbatchsize = 2\n").unwrap_err();
        assert_eq!(err.category(), "config");
    }

    #[test]
    fn cross_module_mismatches() {
        let mut c = RunConfig::default();
        c.ar.schedule = vec![1, 4, 16];
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.tokenizer.channels = 4;
        assert!(c.validate().unwrap_err().to_string().contains("cmx output"));
        let mut c = RunConfig::default();
        c.ar.num_classes = 3;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.metrics.provider = ProviderKind::ExternalFile;
        assert!(c.validate().is_err());
    }
}
