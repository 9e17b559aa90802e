use super::config::DataConfig;
use crate::dsp::{decode_wav, Waveform};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?} (train, valid, test)"))),
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub path: PathBuf,
    pub pitch: usize,
    pub instrument: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestReport {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub skipped: usize,
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn audio_path(&self, r: &ManifestRecord) -> PathBuf {
        if r.path.is_absolute() {
            r.path.clone()
        } else {
            self.root.join(&r.path)
        }
    }

    pub fn split(&self, s: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == s).collect()
    }

    pub fn count(&self, s: Split) -> usize {
        self.records.iter().filter(|r| r.split == s).count()
    }

    pub fn parse(text: &str, root: &Path, cfg: &DataConfig) -> Result<Self> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::Manifest(format!("line {}: {e}", no + 1)))?;
            if !seen.insert(r.id.clone()) {
                return Err(Error::Manifest(format!("line {}: duplicate id {:?}", no + 1, r.id)));
            }
            if r.pitch >= cfg.pitch_classes {
                return Err(Error::Manifest(format!(
                    "line {}: pitch {} outside 0..{}",
                    no + 1,
                    r.pitch,
                    cfg.pitch_classes
                )));
            }
            if !cfg.instrument_families.contains(&r.instrument) {
                return Err(Error::Manifest(format!(
                    "line {}: unknown instrument family {:?}",
                    no + 1,
                    r.instrument
                )));
            }
            records.push(r);
        }
        if records.is_empty() {
            return Err(Error::Manifest("manifest has no records".into()));
        }
        Ok(Self {
            records,
            root: root.to_path_buf(),
        })
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.path = self.audio_path(&r);
                serde_json::to_string(&r).expect("record serialises") + "\n"
            })
            .collect()
    }

    pub fn instrument_index(&self, r: &ManifestRecord, cfg: &DataConfig) -> usize {
        cfg.instrument_families.iter().position(|f| *f == r.instrument).expect("validated at ingest")
    }
}

/// Parses and checks a manifest: unique ids, known labels, readable audio.
/// Clips at a foreign sample rate are dropped with a warning unless
/// resampling is enabled; clips of unexpected length only warn.
pub fn ingest(path: &Path, cfg: &DataConfig, clip_len: usize) -> Result<(DatasetManifest, IngestReport)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MissingPrerequisite(format!("manifest {}: {e}", path.display())))?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut m = DatasetManifest::parse(&text, &root, cfg)?;
    let mut warnings = Vec::new();
    let mut keep = Vec::with_capacity(m.records.len());
    for r in &m.records {
        let p = m.audio_path(r);
        let bytes = std::fs::read(&p)
            .map_err(|e| Error::Manifest(format!("record {:?}: cannot read {}: {e}", r.id, p.display())))?;
        let w = decode_wav(&bytes).map_err(|e| Error::Manifest(format!("record {:?}: {e}", r.id)))?;
        if w.sample_rate != cfg.sample_rate {
            if cfg.resample {
                warnings.push(format!("{}: {} Hz, resampling to {} Hz", r.id, w.sample_rate, cfg.sample_rate));
            } else {
                warnings.push(format!("{}: {} Hz instead of {} Hz, skipped", r.id, w.sample_rate, cfg.sample_rate));
                continue;
            }
        }
        let len = (w.len() as u64 * cfg.sample_rate as u64 / w.sample_rate as u64) as usize;
        if len.abs_diff(clip_len) * 10 > clip_len {
            warnings.push(format!("{}: {len} samples, fitted to {clip_len}", r.id));
        }
        keep.push(r.clone());
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let skipped = m.records.len() - keep.len();
    m.records = keep;
    let report = IngestReport {
        train: m.count(Split::Train),
        valid: m.count(Split::Valid),
        test: m.count(Split::Test),
        skipped,
        warnings,
    };
    Ok((m, report))
}

/// Linear-interpolation resampling.
pub fn resample_linear(w: &Waveform, rate: u32) -> Result<Waveform> {
    if w.sample_rate == rate {
        return Ok(w.clone());
    }
    let ratio = w.sample_rate as f64 / rate as f64;
    let n = ((w.len() as f64) / ratio).round().max(1.0) as usize;
    let s = &w.samples;
    let out = (0..n)
        .map(|i| {
            let x = i as f64 * ratio;
            let j = x.floor() as usize;
            let f = x - j as f64;
            let a = s[j.min(s.len() - 1)] as f64;
            let b = s[(j + 1).min(s.len() - 1)] as f64;
            (a + f * (b - a)) as f32
        })
        .collect();
    Waveform::new(out, rate)
}

/// Decodes a record's audio at the configured rate, fitted to `clip_len`.
pub fn load_clip(m: &DatasetManifest, r: &ManifestRecord, cfg: &DataConfig, clip_len: usize) -> Result<Waveform> {
    let p = m.audio_path(r);
    let bytes = std::fs::read(&p)
        .map_err(|e| Error::MissingPrerequisite(format!("audio {}: {e}", p.display())))?;
    let w = decode_wav(&bytes)?;
    let w = if w.sample_rate != cfg.sample_rate {
        if !cfg.resample {
            return Err(Error::InvalidInput(format!(
                "{}: sample rate {} differs from {}",
                r.id, w.sample_rate, cfg.sample_rate
            )));
        }
        resample_linear(&w, cfg.sample_rate)?
    } else {
        w
    };
    Ok(w.fit_length(clip_len))
}
