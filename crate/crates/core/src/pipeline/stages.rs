use super::cache::{load_index, load_split, write_atomic};
use super::config::{hex, RunConfig};
use super::manifest::{DatasetManifest, Split};
use crate::armodel::{generate, ArModel, ArTrainer, Condition};
use crate::cmx::Tensor3;
use crate::dsp::{encode_wav, BitDepth};
use crate::error::{Error, Result};
use crate::substrate::{step_rng, Checkpoint};
use crate::tokenizer::{MultiScaleTokenMap, Tokenizer, TokenizerTrainer};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

const BATCH_STREAM: u64 = 0xba7c_4e55;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub stage: String,
    pub start_step: u64,
    pub end_step: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

pub fn checkpoint_path(out: &Path, stage: &str) -> PathBuf {
    out.join("checkpoints").join(format!("{stage}.ckpt"))
}

/// Loads a checkpoint, refusing one made by a different configuration.
pub fn load_checkpoint(path: &Path, cfg: &RunConfig, what: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!("{what} checkpoint required ({})", path.display())));
    }
    let c = Checkpoint::load(path)?;
    if c.config_hash != cfg.hash() {
        return Err(Error::Config(format!(
            "{} was produced by config {} but the current config is {}",
            path.display(),
            &hex(&c.config_hash)[..12],
            &cfg.hash_hex()[..12]
        )));
    }
    Ok(c)
}

fn save_checkpoint(c: &Checkpoint, out: &Path, stage: &str, step: u64, periodic: bool) -> Result<PathBuf> {
    let dir = out.join("checkpoints");
    std::fs::create_dir_all(&dir)?;
    let bytes = c.to_bytes();
    if periodic {
        write_atomic(&dir.join(format!("{stage}-{step:06}.ckpt")), &bytes)?;
    }
    let latest = checkpoint_path(out, stage);
    write_atomic(&latest, &bytes)?;
    Ok(latest)
}

fn append_log(out: &Path, stage: &str, line: &impl Serialize) -> Result<()> {
    let dir = out.join("logs");
    std::fs::create_dir_all(&dir)?;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(dir.join(format!("{stage}.jsonl")))?;
    writeln!(f, "{}", serde_json::to_string(line).expect("log line serialises"))?;
    Ok(())
}

/// Item indices for one step, drawn from the run seed and the step so a
/// resumed run sees the same batches.
fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    if n <= batch {
        return (0..n).collect();
    }
    let mut rng = step_rng(seed ^ BATCH_STREAM, step);
    let mut idx = rand::seq::index::sample(&mut rng, n, batch).into_vec();
    idx.sort_unstable();
    idx
}

/// Trains (or resumes) the tokenizer on the cached train split up to the
/// configured budget, or to `stop_at` if that comes first.
pub fn run_train_tokenizer(m: &DatasetManifest, cfg: &RunConfig, out: &Path, stop_at: Option<u64>) -> Result<TrainSummary> {
    cfg.validate()?;
    let (_, items) = load_split(m, cfg, out, Split::Train)?;
    if items.is_empty() {
        return Err(Error::MissingPrerequisite("no cached train-split items".into()));
    }
    let data: Vec<Tensor3> = items.into_iter().map(|(_, t)| t).collect();
    let latest = checkpoint_path(out, "tokenizer");
    let mut trainer = if latest.exists() {
        TokenizerTrainer::from_checkpoint(&load_checkpoint(&latest, cfg, "tokenizer")?)?
    } else {
        TokenizerTrainer::new(&cfg.tokenizer, cfg.seed)?
    };
    let end = stop_at.map_or(cfg.train.tokenizer_steps, |s| s.min(cfg.train.tokenizer_steps));
    let start = trainer.step_count();
    let (mut first, mut last) = (None, None);
    while trainer.step_count() < end {
        let step = trainer.step_count();
        let batch: Vec<Tensor3> = batch_indices(data.len(), cfg.train.batch_size, cfg.seed, step)
            .into_iter()
            .map(|i| data[i].clone())
            .collect();
        let r = trainer.step(&batch)?;
        first.get_or_insert(r.loss.total);
        last = Some(r.loss.total);
        if let Some(reason) = &r.skipped {
            log::warn!("tokenizer step {step} skipped: {reason}");
        }
        append_log(out, "tokenizer", &r)?;
        let done = trainer.step_count();
        if done % cfg.train.checkpoint_every == 0 && done < end {
            save_checkpoint(&trainer.to_checkpoint(cfg.hash()), out, "tokenizer", done, true)?;
        }
    }
    let checkpoint = save_checkpoint(&trainer.to_checkpoint(cfg.hash()), out, "tokenizer", trainer.step_count(), true)?;
    Ok(TrainSummary {
        stage: "tokenizer".into(),
        start_step: start,
        end_step: trainer.step_count(),
        first_loss: first,
        last_loss: last,
        checkpoint,
    })
}

pub fn load_tokenizer(cfg: &RunConfig, out: &Path) -> Result<Tokenizer<f32>> {
    Tokenizer::from_checkpoint(&load_checkpoint(&checkpoint_path(out, "tokenizer"), cfg, "tokenizer")?)
}

pub fn load_ar(cfg: &RunConfig, out: &Path) -> Result<ArModel<f32>> {
    ArModel::from_checkpoint(&load_checkpoint(&checkpoint_path(out, "ar"), cfg, "ar")?)
}

/// Token maps of the cached train split under the frozen tokenizer, also
/// written to `tokens/<id>.toks`.
pub fn tokenize_split(m: &DatasetManifest, cfg: &RunConfig, out: &Path, t: &Tokenizer<f32>) -> Result<Vec<(MultiScaleTokenMap, Condition)>> {
    let (_, items) = load_split(m, cfg, out, Split::Train)?;
    let dir = out.join("tokens");
    std::fs::create_dir_all(&dir)?;
    let mut maps = Vec::with_capacity(items.len());
    for (r, x) in &items {
        let tokens = t.quantize(&t.encode(x)?)?.tokens;
        write_atomic(&dir.join(format!("{}.toks", r.id)), &tokens.to_bytes())?;
        maps.push((tokens, Condition::Class(m.instrument_index(r, &cfg.data))));
    }
    Ok(maps)
}

/// Trains (or resumes) the AR model on token maps from the frozen tokenizer.
pub fn run_train_ar(m: &DatasetManifest, cfg: &RunConfig, out: &Path, stop_at: Option<u64>) -> Result<TrainSummary> {
    cfg.validate()?;
    let tokenizer = load_tokenizer(cfg, out)?;
    let data = tokenize_split(m, cfg, out, &tokenizer)?;
    if data.is_empty() {
        return Err(Error::MissingPrerequisite("no cached train-split items".into()));
    }
    let latest = checkpoint_path(out, "ar");
    let mut trainer = if latest.exists() {
        ArTrainer::from_checkpoint(&load_checkpoint(&latest, cfg, "ar")?)?
    } else {
        let cb = tokenizer.store.get(tokenizer.codebook_id()).value.clone();
        ArTrainer::new(&cfg.ar, &cb, cfg.seed)?
    };
    let end = stop_at.map_or(cfg.train.ar_steps, |s| s.min(cfg.train.ar_steps));
    let start = trainer.step_count();
    let (mut first, mut last) = (None, None);
    while trainer.step_count() < end {
        let step = trainer.step_count();
        let batch: Vec<_> = batch_indices(data.len(), cfg.train.batch_size, cfg.seed, step)
            .into_iter()
            .map(|i| data[i].clone())
            .collect();
        let r = trainer.step(&batch)?;
        first.get_or_insert(r.loss);
        last = Some(r.loss);
        append_log(out, "ar", &r)?;
        let done = trainer.step_count();
        if done % cfg.train.checkpoint_every == 0 && done < end {
            save_checkpoint(&trainer.to_checkpoint(cfg.hash()), out, "ar", done, true)?;
        }
    }
    let checkpoint = save_checkpoint(&trainer.to_checkpoint(cfg.hash()), out, "ar", trainer.step_count(), true)?;
    Ok(TrainSummary {
        stage: "ar".into(),
        start_step: start,
        end_step: trainer.step_count(),
        first_loss: first,
        last_loss: last,
        checkpoint,
    })
}

/// Resolves an instrument family name, class index or "unconditional".
pub fn parse_condition(spec: &str, cfg: &RunConfig) -> Result<Condition> {
    let families = &cfg.data.instrument_families;
    if spec == "unconditional" || spec == "none" {
        return Ok(Condition::Unconditional);
    }
    if let Some(i) = families.iter().position(|f| f == spec) {
        return Ok(Condition::Class(i));
    }
    if let Ok(i) = spec.parse::<usize>() {
        if i < families.len() {
            return Ok(Condition::Class(i));
        }
    }
    Err(Error::InvalidInput(format!(
        "unknown condition {spec:?}; valid labels: unconditional, {}",
        families.join(", ")
    )))
}

/// Sidecar written next to every generated clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub config_hash: String,
    pub run_seed: u64,
    pub clip_seed: u64,
    pub index: usize,
    pub condition: String,
    pub sample_rate: u32,
    pub samples: usize,
    pub duration_secs: f64,
}

pub fn generated_dir(out: &Path) -> PathBuf {
    out.join("generated")
}

/// Samples `n` clips; clip `i` uses seed `seed + i`. Files are named
/// `gen-s<seed>-<i>.wav` with a `.json` sidecar and a `.toks` token map.
pub fn run_generate(cfg: &RunConfig, out: &Path, n: usize, condition: &str, seed: u64) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let cond = parse_condition(condition, cfg)?;
    let idx = load_index(out, cfg)?;
    let tokenizer = load_tokenizer(cfg, out)?;
    let ar = load_ar(cfg, out)?;
    let frontend = cfg.frontend(idx.norm)?;
    let dir = generated_dir(out);
    std::fs::create_dir_all(&dir)?;
    let mut paths = Vec::with_capacity(n);
    for i in 0..n {
        let clip_seed = seed.wrapping_add(i as u64);
        let g = generate(cond, clip_seed, &cfg.generate.sampling, &ar, &tokenizer, &frontend)?;
        let stem = format!("gen-s{seed}-{i:03}");
        let wav = dir.join(format!("{stem}.wav"));
        write_atomic(&wav, &encode_wav(&g.waveform, BitDepth::Float32)?)?;
        write_atomic(&dir.join(format!("{stem}.toks")), &g.tokens.to_bytes())?;
        let meta = GenerationMeta {
            config_hash: cfg.hash_hex(),
            run_seed: seed,
            clip_seed,
            index: i,
            condition: condition.to_string(),
            sample_rate: g.waveform.sample_rate,
            samples: g.waveform.len(),
            duration_secs: g.waveform.duration_secs(),
        };
        let json = serde_json::to_string_pretty(&meta).expect("meta serialises");
        write_atomic(&dir.join(format!("{stem}.json")), json.as_bytes())?;
        paths.push(wav);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_are_reproducible() {
        assert_eq!(batch_indices(3, 8, 0, 0), vec![0, 1, 2]);
        let a = batch_indices(20, 4, 1, 5);
        assert_eq!(a, batch_indices(20, 4, 1, 5));
        assert_eq!(a.len(), 4);
        assert_ne!(a, batch_indices(20, 4, 1, 6));
    }

    #[test]
    fn conditions() {
        let cfg = RunConfig::default();
        assert_eq!(parse_condition("guitar", &cfg).unwrap(), Condition::Class(3));
        assert_eq!(parse_condition("0", &cfg).unwrap(), Condition::Class(0));
        assert_eq!(parse_condition("unconditional", &cfg).unwrap(), Condition::Unconditional);
        let e = parse_condition("kazoo", &cfg).unwrap_err().to_string();
        assert!(e.contains("bass") && e.contains("vocal"), "{e}");
        assert!(parse_condition("11", &cfg).is_err());
    }
}
