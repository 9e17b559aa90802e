use super::config::RunConfig;
use super::manifest::{load_clip, DatasetManifest, ManifestRecord, Split};
use crate::cmx::{cmx_unpack, CmxDescriptor, PackedTensor, Tensor3};
use crate::error::{Error, Result};
use crate::tokenizer::{AudioFrontend, NormStats};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

const CMX_MAGIC: &[u8; 8] = b"MARSCMX0";

/// `MARSCMX0`, descriptor, packed (c, h, w) as u32, f32 values, then the
/// SHA-256 of every preceding byte.
pub fn encode_cmx_file(p: &PackedTensor) -> Vec<u8> {
    let v = &p.values;
    let mut out = Vec::with_capacity(8 + 21 + 12 + 4 * v.data.len() + 32);
    out.extend_from_slice(CMX_MAGIC);
    out.extend_from_slice(&p.descriptor.to_bytes());
    for d in [v.channels, v.height, v.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_cmx_file(b: &[u8]) -> Result<PackedTensor> {
    if b.len() < 8 + 21 + 12 + 32 || &b[..8] != CMX_MAGIC {
        return Err(Error::Format("not a MARSCMX0 file".into()));
    }
    let (body, digest) = b.split_at(b.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("MARSCMX0 content digest mismatch".into()));
    }
    let descriptor = CmxDescriptor::from_bytes(&body[8..29])?;
    let dim = |i: usize| u32::from_le_bytes(body[29 + 4 * i..33 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    if (c, h, w) != descriptor.out_shape() {
        return Err(Error::Format(format!(
            "MARSCMX0 dims {:?} disagree with descriptor output {:?}",
            (c, h, w),
            descriptor.out_shape()
        )));
    }
    let payload = &body[41..];
    if payload.len() != 4 * c * h * w {
        return Err(Error::Format(format!("MARSCMX0 payload holds {} bytes for {c}x{h}x{w}", payload.len())));
    }
    let data = payload.chunks_exact(4).map(|x| f32::from_le_bytes(x.try_into().unwrap())).collect();
    Ok(PackedTensor {
        values: Tensor3::new(c, h, w, data)?,
        descriptor,
    })
}

pub fn read_cmx_file(path: &Path) -> Result<PackedTensor> {
    decode_cmx_file(&std::fs::read(path)?)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Cache-wide record: the config that built it and the normalisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheIndex {
    pub config_hash: String,
    pub norm: NormStats,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PreprocessReport {
    pub written: usize,
    pub skipped: usize,
    pub regenerated: usize,
    pub failed: Vec<(String, String)>,
    pub norm: Option<NormStats>,
}

pub fn cache_dir(out: &Path) -> PathBuf {
    out.join("cache")
}

fn entry_path(out: &Path, id: &str) -> PathBuf {
    cache_dir(out).join(format!("{id}.cmx"))
}

fn index_path(out: &Path) -> PathBuf {
    cache_dir(out).join("index.json")
}

/// Reads the cache index, checking it was made by this configuration.
pub fn load_index(out: &Path, cfg: &RunConfig) -> Result<CacheIndex> {
    let p = index_path(out);
    let text = std::fs::read_to_string(&p).map_err(|_| {
        Error::MissingPrerequisite(format!("preprocessing cache not found at {}; run preprocess", p.display()))
    })?;
    let idx: CacheIndex =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("cache index {}: {e}", p.display())))?;
    if idx.config_hash != cfg.hash_hex() {
        return Err(Error::Config(format!(
            "cache was built by config {} but the current config is {}; re-run preprocess",
            &idx.config_hash[..12],
            &cfg.hash_hex()[..12]
        )));
    }
    Ok(idx)
}

fn analyze_record(m: &DatasetManifest, r: &ManifestRecord, cfg: &RunConfig, f: &AudioFrontend) -> Result<Vec<f64>> {
    let w = load_clip(m, r, &cfg.data, f.clip_len())?;
    Ok(f.analyze(&w)?.values)
}

/// Builds one cache entry per record: decode, STFT, log1p magnitude,
/// normalise, pack. Entries already valid for this config are kept, and
/// every new entry is verified by unpacking before it is written.
pub fn preprocess(m: &DatasetManifest, cfg: &RunConfig, out: &Path) -> Result<PreprocessReport> {
    cfg.validate()?;
    std::fs::create_dir_all(cache_dir(out))?;
    let hash = cfg.hash_hex();
    let mut frontend = cfg.frontend(NormStats::default())?;
    let previous = load_index(out, cfg).ok();
    let mut report = PreprocessReport::default();

    let norm = match &previous {
        Some(idx) => idx.norm,
        None => {
            let train = m.split(Split::Train);
            if train.is_empty() {
                return Err(Error::MissingPrerequisite("no train-split records to fit normalisation".into()));
            }
            let specs: Vec<Result<Vec<f64>>> =
                train.par_iter().map(|r| analyze_record(m, r, cfg, &frontend)).collect();
            let ok: Vec<&Vec<f64>> = specs.iter().filter_map(|s| s.as_ref().ok()).collect();
            NormStats::fit(ok.iter().map(|v| v.as_slice()))?
        }
    };
    frontend.norm = norm;
    report.norm = Some(norm);

    #[derive(PartialEq)]
    enum Outcome {
        Skipped,
        Written,
        Regenerated,
    }
    let results: Vec<Result<Outcome>> = m
        .records
        .par_iter()
        .map(|r| {
            let path = entry_path(out, &r.id);
            let existed = path.exists();
            if previous.is_some() && existed {
                if let Ok(p) = read_cmx_file(&path) {
                    if p.descriptor == frontend.cmx {
                        return Ok(Outcome::Skipped);
                    }
                }
            }
            let w = load_clip(m, r, &cfg.data, frontend.clip_len())?;
            let spec = frontend.analyze(&w)?;
            let packed = frontend.pack(&spec)?;
            let bytes = encode_cmx_file(&packed);
            // the stored bytes must decode and unpack to exactly the normalised spectrogram
            let back = decode_cmx_file(&bytes)?;
            let unpacked = cmx_unpack(&back)?;
            let expected: Vec<f32> = spec
                .values
                .iter()
                .map(|v| ((v - norm.mean) / norm.std) as f32)
                .collect();
            if back != packed || unpacked.data != expected {
                return Err(Error::Numerical(format!("{}: cache roundtrip verification failed", r.id)));
            }
            write_atomic(&path, &bytes)?;
            Ok(if existed { Outcome::Regenerated } else { Outcome::Written })
        })
        .collect();
    let mut ids = Vec::new();
    for (r, res) in m.records.iter().zip(results) {
        match res {
            Ok(o) => {
                ids.push(r.id.clone());
                match o {
                    Outcome::Skipped => report.skipped += 1,
                    Outcome::Written => report.written += 1,
                    Outcome::Regenerated => report.regenerated += 1,
                }
            }
            Err(e) => {
                log::warn!("{}: {e}", r.id);
                report.failed.push((r.id.clone(), e.to_string()));
            }
        }
    }
    let idx = CacheIndex {
        config_hash: hash,
        norm,
        ids,
    };
    if previous.as_ref() != Some(&idx) {
        write_atomic(&index_path(out), serde_json::to_string_pretty(&idx).expect("index serialises").as_bytes())?;
    }
    Ok(report)
}

/// Cached packed tensors of one split, in manifest order.
pub fn load_split(m: &DatasetManifest, cfg: &RunConfig, out: &Path, split: Split) -> Result<(CacheIndex, Vec<(ManifestRecord, Tensor3)>)> {
    let idx = load_index(out, cfg)?;
    let mut items = Vec::new();
    for r in m.split(split) {
        if !idx.ids.contains(&r.id) {
            continue;
        }
        let p = read_cmx_file(&entry_path(out, &r.id)).map_err(|e| {
            Error::MissingPrerequisite(format!("cache entry {}: {e}; re-run preprocess", r.id))
        })?;
        items.push((r.clone(), p.values));
    }
    Ok((idx, items))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmx::{cmx_pack, CmxMode};
    use crate::pipeline::manifest::ingest;
    use crate::pipeline::synth::write_synthetic_dataset;

    #[test]
    fn file_roundtrip_and_digest() {
        let d = CmxDescriptor::new((1, 4, 6), 2, 2, CmxMode::Block).unwrap();
        let x = Tensor3::new(1, 4, 6, (0..24).map(|i| i as f32 * 0.5 - 3.0).collect()).unwrap();
        let p = cmx_pack(&x, &d).unwrap();
        let mut b = encode_cmx_file(&p);
        assert_eq!(&b[..8], b"MARSCMX0");
        assert_eq!(b.len(), 8 + 21 + 12 + 96 + 32);
        assert_eq!(decode_cmx_file(&b).unwrap(), p);
        b[50] ^= 1;
        assert!(decode_cmx_file(&b).unwrap_err().to_string().contains("digest"));
    }

    fn tiny_cfg() -> RunConfig {
        RunConfig::desk_scale()
    }

    #[test]
    fn preprocess_is_idempotent_and_repairs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let clip = cfg.data.frames * cfg.stft.hop;
        let mpath = write_synthetic_dataset(&dir.path().join("data"), 8, 0.4, 16000, 1).unwrap();
        let (m, _) = ingest(&mpath, &cfg.data, clip).unwrap();
        let out = dir.path().join("run");
        let r = preprocess(&m, &cfg, &out).unwrap();
        assert_eq!((r.written, r.skipped, r.regenerated), (8, 0, 0));
        let r = preprocess(&m, &cfg, &out).unwrap();
        assert_eq!((r.written, r.skipped, r.regenerated), (0, 8, 0));

        let p = entry_path(&out, &m.records[2].id);
        let mut b = std::fs::read(&p).unwrap();
        b[60] ^= 0x40;
        std::fs::write(&p, b).unwrap();
        let r = preprocess(&m, &cfg, &out).unwrap();
        assert_eq!((r.skipped, r.regenerated), (7, 1));

        let (idx, items) = load_split(&m, &cfg, &out, Split::Train).unwrap();
        assert_eq!(items.len(), 5);
        assert_eq!(items[0].1.shape(), (4, 64, 64));
        // entry unpacks to exactly a fresh recomputation
        let f = cfg.frontend(idx.norm).unwrap();
        let w = load_clip(&m, &items[0].0, &cfg.data, f.clip_len()).unwrap();
        let fresh = f.pack(&f.analyze(&w).unwrap()).unwrap();
        assert_eq!(fresh.values, items[0].1);

        let mut other = cfg.clone();
        other.seed = 99;
        assert_eq!(load_index(&out, &other).unwrap_err().category(), "config");
        assert_eq!(load_index(&dir.path().join("none"), &cfg).unwrap_err().category(), "missing-prerequisite");
    }

    #[test]
    fn default_config_shape_trace() {
        let cfg = RunConfig::default();
        let f = cfg.frontend(NormStats::default()).unwrap();
        assert_eq!(f.clip_len(), 65536);
        let w = crate::pipeline::synth::synth_note(60, 2, 64000, 16000, 0).unwrap();
        let s = f.analyze(&w).unwrap();
        assert_eq!((s.bins, s.frames), (512, 256));
        assert_eq!(f.pack(&s).unwrap().values.shape(), (2, 256, 256));
    }
}
