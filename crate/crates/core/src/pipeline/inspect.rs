use super::cache::decode_cmx_file;
use super::config::{hex, RunConfig};
use super::manifest::DatasetManifest;
use crate::dsp::decode_wav;
use crate::error::{Error, Result};
use crate::metrics::EmbeddingSet;
use crate::substrate::Checkpoint;
use crate::tokenizer::MultiScaleTokenMap;
use std::fmt::Write;
use std::path::Path;

/// Human-readable summary of any artifact, recognised by magic bytes or,
/// for text formats, by extension.
pub fn inspect(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::MissingPrerequisite(format!("{}: {e}", path.display())))?;
    let mut s = String::new();
    let magic = bytes.get(..8).unwrap_or(&[]);
    match magic {
        b"MARSCKPT" => {
            let c = Checkpoint::from_bytes(&bytes)?;
            writeln!(s, "kind = checkpoint").unwrap();
            writeln!(s, "config_hash = {}", hex(&c.config_hash)).unwrap();
            writeln!(s, "meta.kind = {}", c.meta["kind"].as_str().unwrap_or("?")).unwrap();
            writeln!(s, "meta.step = {}", c.meta["step"]).unwrap();
            let params = c.records.iter().filter(|r| !r.name.starts_with("adam.")).count();
            let elements: usize = c.records.iter().filter(|r| !r.name.starts_with("adam.")).map(|r| r.values.len()).sum();
            writeln!(s, "records = {} ({params} parameters, {elements} values)", c.records.len()).unwrap();
            for r in c.records.iter().filter(|r| !r.name.starts_with("adam.")) {
                writeln!(s, "param {} = {:?}", r.name, r.shape).unwrap();
            }
        }
        b"MARSTOKS" => {
            let t = MultiScaleTokenMap::from_bytes(&bytes)?;
            writeln!(s, "kind = token_map").unwrap();
            writeln!(s, "schedule = {:?}", t.schedule).unwrap();
            writeln!(s, "tokens = {}", t.len()).unwrap();
            writeln!(s, "max_index = {}", t.grids.iter().flatten().max().copied().unwrap_or(0)).unwrap();
        }
        b"MARSEMBD" => {
            let e = EmbeddingSet::from_bytes(&bytes, "external_file")?;
            writeln!(s, "kind = embeddings").unwrap();
            writeln!(s, "n = {}\nd = {}", e.n, e.d).unwrap();
        }
        b"MARSCMX0" => {
            let p = decode_cmx_file(&bytes)?;
            let d = p.descriptor;
            writeln!(s, "kind = cmx_tensor").unwrap();
            writeln!(s, "in_shape = {:?}", d.in_shape).unwrap();
            writeln!(s, "out_shape = {:?}", d.out_shape()).unwrap();
            writeln!(s, "factors = ({}, {})", d.factor_h, d.factor_w).unwrap();
            writeln!(s, "mode = {:?}", d.mode).unwrap();
            writeln!(s, "digest = ok").unwrap();
        }
        _ if bytes.starts_with(b"RIFF") => {
            let w = decode_wav(&bytes)?;
            writeln!(s, "kind = wav").unwrap();
            writeln!(s, "sample_rate = {}", w.sample_rate).unwrap();
            writeln!(s, "samples = {}", w.len()).unwrap();
            writeln!(s, "duration_secs = {:.4}", w.duration_secs()).unwrap();
            let peak = w.samples.iter().fold(0f32, |m, v| m.max(v.abs()));
            writeln!(s, "peak = {peak:.6}").unwrap();
        }
        _ => {
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::Format(format!("{}: unrecognised artifact", path.display())))?;
            match path.extension().and_then(|e| e.to_str()) {
                Some("toml") => {
                    let c = RunConfig::from_toml(&text)?;
                    writeln!(s, "kind = config").unwrap();
                    writeln!(s, "config_hash = {}", c.hash_hex()).unwrap();
                    match c.validate() {
                        Ok(()) => writeln!(s, "valid = true").unwrap(),
                        Err(e) => writeln!(s, "valid = false ({e})").unwrap(),
                    }
                    if let Ok(d) = c.cmx_descriptor() {
                        writeln!(s, "spectrogram = {:?}", d.in_shape).unwrap();
                        writeln!(s, "packed = {:?}", d.out_shape()).unwrap();
                    }
                    writeln!(s, "token_schedule = {:?}", c.tokenizer.schedule).unwrap();
                }
                Some("jsonl") => {
                    let m = DatasetManifest::parse(&text, path.parent().unwrap_or(Path::new(".")), &Default::default())?;
                    writeln!(s, "kind = manifest").unwrap();
                    writeln!(s, "records = {}", m.records.len()).unwrap();
                    for split in [super::Split::Train, super::Split::Valid, super::Split::Test] {
                        writeln!(s, "{split:?} = {}", m.count(split)).unwrap();
                    }
                }
                _ => {
                    let v: serde_json::Value = serde_json::from_str(&text)
                        .map_err(|_| Error::Format(format!("{}: unrecognised artifact", path.display())))?;
                    writeln!(s, "kind = json").unwrap();
                    if let Some(o) = v.as_object() {
                        writeln!(s, "keys = {}", o.keys().cloned().collect::<Vec<_>>().join(", ")).unwrap();
                    }
                }
            }
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmx::{cmx_pack, CmxDescriptor, CmxMode, Tensor3};

    #[test]
    fn recognises_formats() {
        let dir = tempfile::tempdir().unwrap();
        let x = Tensor3::new(1, 4, 4, vec![0.5; 16]).unwrap();
        let p = cmx_pack(&x, &CmxDescriptor::new((1, 4, 4), 2, 2, CmxMode::Interleave).unwrap()).unwrap();
        let f = dir.path().join("a.cmx");
        std::fs::write(&f, super::super::encode_cmx_file(&p)).unwrap();
        let out = inspect(&f).unwrap();
        assert!(out.contains("out_shape = (4, 2, 2)"), "{out}");

        let f = dir.path().join("c.toml");
        std::fs::write(&f, RunConfig::desk_scale().to_toml()).unwrap();
        let out = inspect(&f).unwrap();
        assert!(out.contains("packed = (4, 64, 64)") && out.contains("valid = true"), "{out}");

        let t = MultiScaleTokenMap::new(vec![1, 2], vec![vec![3], vec![0, 1, 2, 5]]).unwrap();
        let f = dir.path().join("t.toks");
        t.save(&f).unwrap();
        assert!(inspect(&f).unwrap().contains("tokens = 5"));

        let f = dir.path().join("junk.bin");
        std::fs::write(&f, [0xffu8, 0, 1]).unwrap();
        assert_eq!(inspect(&f).unwrap_err().category(), "format");
        assert_eq!(inspect(&dir.path().join("none")).unwrap_err().category(), "missing-prerequisite");
    }
}
