use super::cache::{load_index, write_atomic};
use super::config::{ProviderKind, RunConfig};
use super::manifest::{load_clip, DatasetManifest, ManifestRecord, Split};
use super::stages::{generated_dir, load_tokenizer};
use crate::dsp::{decode_wav, Waveform};
use crate::error::{Error, Result};
use crate::metrics::{
    frechet_distance, gaussian_stats, inception_score, kid, log_mel, mel_stats, ndb, nearest_neighbor_error,
    spectro_error, EmbeddingSet, MetricEntry, MetricReport, MiniClassifier,
};
use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Each reference clip against its tokenizer roundtrip.
    Reconstruction,
    /// Generated clips against the reference set, errors by nearest match.
    Generation,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstruction" => Ok(EvalMode::Reconstruction),
            "generation" => Ok(EvalMode::Generation),
            other => Err(Error::InvalidInput(format!("unknown mode {other:?} (reconstruction, generation)"))),
        }
    }
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Reconstruction => "reconstruction",
            EvalMode::Generation => "generation",
        }
    }
}

/// Audio plus the labels the classifiers are trained on.
#[derive(Debug, Clone)]
pub struct LabelledClips {
    pub waves: Vec<Waveform>,
    pub pitch: Vec<usize>,
    pub instrument: Vec<usize>,
}

fn load_labelled(m: &DatasetManifest, records: &[&ManifestRecord], cfg: &RunConfig) -> Result<LabelledClips> {
    let clip = cfg.data.frames * cfg.stft.hop;
    let waves = records
        .par_iter()
        .map(|r| load_clip(m, r, &cfg.data, clip))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelledClips {
        waves,
        pitch: records.iter().map(|r| r.pitch).collect(),
        instrument: records.iter().map(|r| m.instrument_index(r, &cfg.data)).collect(),
    })
}

/// All eight scores for one (reference, candidate) pair. `paired` selects
/// element-wise errors; otherwise each candidate is matched to its nearest
/// reference. The pitch and instrument classifiers are fitted on `labelled`.
pub fn evaluate_sets(
    reference: &[Waveform],
    candidate: &[Waveform],
    paired: bool,
    labelled: &LabelledClips,
    cfg: &RunConfig,
    mode: &str,
) -> Result<MetricReport> {
    let mc = &cfg.metrics;
    let (nr, nc) = (reference.len(), candidate.len());
    if nr < mc.min_samples || nc < mc.min_samples {
        return Err(Error::InvalidInput(format!(
            "insufficient samples: {nr} reference and {nc} candidate clips, at least {} each required",
            mc.min_samples
        )));
    }
    if nr < mc.ndb_k {
        return Err(Error::InvalidInput(format!(
            "insufficient samples: NDB with k = {} needs at least {} reference clips, got {nr}",
            mc.ndb_k, mc.ndb_k
        )));
    }
    if labelled.waves.len() < 2 {
        return Err(Error::InvalidInput("insufficient samples: classifiers need at least 2 labelled clips".into()));
    }
    let mels = |w: &[Waveform]| -> Result<Vec<Vec<f64>>> {
        w.par_iter().map(|x| log_mel(x, &cfg.stft, &mc.mel)).collect()
    };
    let (ref_mels, cand_mels) = (mels(reference)?, mels(candidate)?);
    let (mse, mae, error_kind) = if paired {
        let (a, b) = spectro_error(&ref_mels, &cand_mels)?;
        (a, b, "paired")
    } else {
        let nn = nearest_neighbor_error(&cand_mels, &ref_mels)?;
        (nn.mse, nn.mae, "nearest_neighbor")
    };

    let ref_stats = mel_stats(reference, &cfg.stft, &mc.mel)?;
    let cand_stats = mel_stats(candidate, &cfg.stft, &mc.mel)?;
    let train_stats = mel_stats(&labelled.waves, &cfg.stft, &mc.mel)?;
    let pitch_clf = MiniClassifier::train(&train_stats, &labelled.pitch, cfg.data.pitch_classes, &mc.classifier, cfg.seed)?;
    let inst_clf = MiniClassifier::train(
        &train_stats,
        &labelled.instrument,
        cfg.data.instrument_families.len(),
        &mc.classifier,
        cfg.seed.wrapping_add(1),
    )?;

    let (ref_emb, cand_emb): (EmbeddingSet, EmbeddingSet) = match mc.provider {
        ProviderKind::MelStats => (ref_stats.clone(), cand_stats.clone()),
        ProviderKind::MiniClassifier => (inst_clf.embed(&ref_stats)?, inst_clf.embed(&cand_stats)?),
        ProviderKind::ExternalFile => {
            let load = |p: &Option<std::path::PathBuf>, n: usize| -> Result<EmbeddingSet> {
                let p = p.as_ref().ok_or_else(|| Error::Config("embedding path not set".into()))?;
                let e = EmbeddingSet::load(p)?;
                if e.n != n {
                    return Err(Error::Shape(format!("{} has {} rows for {n} clips", p.display(), e.n)));
                }
                Ok(e)
            };
            (load(&mc.reference_embeddings, nr)?, load(&mc.candidate_embeddings, nc)?)
        }
    };
    ref_emb.check_pair(&cand_emb)?;
    let fad = frechet_distance(&gaussian_stats(&ref_emb)?, &gaussian_stats(&cand_emb)?)?;
    let ndb_result = ndb(&ref_emb, &cand_emb, mc.ndb_k, mc.ndb_alpha, cfg.seed)?;
    let pkid = kid(&pitch_clf.embed(&ref_stats)?, &pitch_clf.embed(&cand_stats)?)?;
    let ikid = kid(&inst_clf.embed(&ref_stats)?, &inst_clf.embed(&cand_stats)?)?;
    let pis = inception_score(&pitch_clf.probabilities(&cand_stats)?);
    let iis = inception_score(&inst_clf.probabilities(&cand_stats)?);

    let entry = |value: f64, provider: &str| {
        Some(MetricEntry {
            value,
            reference_count: nr,
            candidate_count: nc,
            provider: provider.to_string(),
            seed: cfg.seed,
        })
    };
    let provider = ref_emb.provider.clone();
    let mut report = MetricReport {
        mode: mode.to_string(),
        ndb_over_k: entry(ndb_result.ndb_over_k, &provider),
        pkid: entry(pkid, "mini_classifier/pitch"),
        ikid: entry(ikid, "mini_classifier/instrument"),
        pis: entry(pis, "mini_classifier/pitch"),
        iis: entry(iis, "mini_classifier/instrument"),
        mse: entry(mse, "log_mel"),
        mae: entry(mae, "log_mel"),
        fad: entry(fad, &provider),
        ..Default::default()
    };
    report.extra.insert("config_hash".into(), cfg.hash_hex());
    report.extra.insert("error_matching".into(), error_kind.into());
    report.extra.insert("ndb_k".into(), mc.ndb_k.to_string());
    report.extra.insert("ndb_alpha".into(), mc.ndb_alpha.to_string());
    report.extra.insert("ndb_bins_different".into(), ndb_result.ndb.to_string());
    report.extra.insert("classifier_train_count".into(), labelled.waves.len().to_string());
    report.validate()?;
    Ok(report)
}

/// Reference set is the test split. Reconstruction mode needs the tokenizer
/// checkpoint, generation mode needs `generated/*.wav`; both need the cache.
pub fn run_evaluate(m: &DatasetManifest, cfg: &RunConfig, out: &Path, mode: EvalMode) -> Result<MetricReport> {
    cfg.validate()?;
    let idx = load_index(out, cfg)?;
    let test = m.split(Split::Test);
    let reference = load_labelled(m, &test, cfg)?;
    let train = m.split(Split::Train);
    let labelled = load_labelled(m, &train, cfg)?;
    let candidate: Vec<Waveform> = match mode {
        EvalMode::Reconstruction => {
            let t = load_tokenizer(cfg, out)?;
            let f = cfg.frontend(idx.norm)?;
            reference
                .waves
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let (x, _) = t.reconstruct(&f.encode_audio(w)?)?;
                    f.synthesize(&f.unpack(x)?, cfg.seed.wrapping_add(i as u64))
                })
                .collect::<Result<_>>()?
        }
        EvalMode::Generation => {
            let dir = generated_dir(out);
            let mut files: Vec<_> = std::fs::read_dir(&dir)
                .map_err(|_| Error::MissingPrerequisite(format!("no generated clips in {}; run generate", dir.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "wav"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::MissingPrerequisite(format!("no generated clips in {}; run generate", dir.display())));
            }
            let clip = cfg.data.frames * cfg.stft.hop;
            files
                .iter()
                .map(|p| Ok(decode_wav(&std::fs::read(p)?)?.fit_length(clip)))
                .collect::<Result<_>>()?
        }
    };
    let report = evaluate_sets(
        &reference.waves,
        &candidate,
        mode == EvalMode::Reconstruction,
        &labelled,
        cfg,
        mode.name(),
    )?;
    let dir = out.join("reports");
    std::fs::create_dir_all(&dir)?;
    write_atomic(&dir.join(format!("{}.txt", mode.name())), report.to_text().as_bytes())?;
    let json = serde_json::to_string_pretty(&report.to_json()).expect("report serialises");
    write_atomic(&dir.join(format!("{}.json", mode.name())), json.as_bytes())?;
    Ok(report)
}
