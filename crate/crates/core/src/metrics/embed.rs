use super::{ClassProbMatrix, EmbeddingSet};
use crate::dsp::{magnitude, mel_spectrogram, stft, AmplitudeScale, MelConfig, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::substrate::nn::Linear;
use crate::substrate::{adam_step, AdamConfig, AdamState, Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// log1p mel spectrogram of a waveform, `n_mels x frames` row-major.
pub fn log_mel(w: &Waveform, s: &StftConfig, m: &MelConfig) -> Result<Vec<f64>> {
    let spec = magnitude(&stft(w, s)?, s, s.bin_trim, AmplitudeScale::Linear);
    Ok(mel_spectrogram(&spec, m)?.into_iter().map(f64::ln_1p).collect())
}

/// Per-band mean and standard deviation of the log mel over time, giving
/// `2 * n_mels` features per clip.
pub fn mel_stats(waves: &[Waveform], s: &StftConfig, m: &MelConfig) -> Result<EmbeddingSet> {
    let mut data = Vec::with_capacity(waves.len() * 2 * m.n_mels);
    for w in waves {
        let mel = log_mel(w, s, m)?;
        let frames = mel.len() / m.n_mels;
        let mut stds = Vec::with_capacity(m.n_mels);
        for band in mel.chunks(frames) {
            let mean = band.iter().sum::<f64>() / frames as f64;
            let var = band.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / frames as f64;
            data.push(mean);
            stds.push(var.sqrt());
        }
        data.extend(stds);
    }
    EmbeddingSet::new(waves.len(), 2 * m.n_mels, data, "mel_stats")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiniClassifierConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for MiniClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            steps: 300,
            lr: 1e-2,
        }
    }
}

/// One-hidden-layer ReLU network over standardised input features.
#[derive(Debug, Clone)]
pub struct MiniClassifier {
    store: ParamStore<f64>,
    hidden: Linear,
    out: Linear,
    mean: Vec<f64>,
    std: Vec<f64>,
    pub classes: usize,
}

impl MiniClassifier {
    /// Full-batch Adam on cross-entropy.
    pub fn train(x: &EmbeddingSet, labels: &[usize], classes: usize, cfg: &MiniClassifierConfig, seed: u64) -> Result<Self> {
        if labels.len() != x.n || x.n == 0 {
            return Err(Error::Shape(format!("{} labels for {} samples", labels.len(), x.n)));
        }
        if classes < 2 || labels.iter().any(|&l| l >= classes) {
            return Err(Error::InvalidInput(format!("labels must lie in 0..{classes} with at least 2 classes")));
        }
        if cfg.hidden == 0 {
            return Err(Error::Config("classifier hidden width must be positive".into()));
        }
        let mut mean = vec![0.0; x.d];
        for r in x.rows() {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / x.n as f64);
        }
        let mut std = vec![0.0; x.d];
        for r in x.rows() {
            std.iter_mut().zip(r.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m) / x.n as f64);
        }
        let std: Vec<f64> = std.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let hidden = Linear::new(&mut store, "hidden", x.d, cfg.hidden, true, 2f64.sqrt(), &mut rng)?;
        let out = Linear::new(&mut store, "out", cfg.hidden, classes, true, 1.0, &mut rng)?;
        let mut model = Self {
            store,
            hidden,
            out,
            mean,
            std,
            classes,
        };
        let inputs = model.standardise(x)?;
        let mut opt = AdamState::new(&model.store);
        let adam = AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        };
        adam.validate()?;
        for _ in 0..cfg.steps {
            let mut g = Graph::new();
            let (_, logits) = model.forward(&mut g, &inputs)?;
            let loss = g.cross_entropy(logits, labels)?;
            let grads = g.backward(loss)?;
            let pg = g.param_grads(&model.store, &grads);
            adam_step(&mut model.store, &pg, &mut opt, &adam)?;
        }
        Ok(model)
    }

    fn standardise(&self, x: &EmbeddingSet) -> Result<Tensor<f64>> {
        if x.d != self.mean.len() {
            return Err(Error::Shape(format!("classifier expects {} features, got {}", self.mean.len(), x.d)));
        }
        let data = x
            .rows()
            .flat_map(|r| r.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s))
            .collect();
        Tensor::new(vec![x.n, x.d], data)
    }

    fn forward(&self, g: &mut Graph<f64>, x: &Tensor<f64>) -> Result<(crate::substrate::Var, crate::substrate::Var)> {
        let x = g.constant(x.clone());
        let h = self.hidden.forward(g, &self.store, x)?;
        let h = g.relu(h);
        let logits = self.out.forward(g, &self.store, h)?;
        Ok((h, logits))
    }

    /// Penultimate (hidden-layer) activations.
    pub fn embed(&self, x: &EmbeddingSet) -> Result<EmbeddingSet> {
        let mut g = Graph::new();
        let (h, _) = self.forward(&mut g, &self.standardise(x)?)?;
        EmbeddingSet::new(x.n, self.store.get(self.hidden.w).value.shape[1], g.value(h).data.clone(), "mini_classifier")
    }

    pub fn probabilities(&self, x: &EmbeddingSet) -> Result<ClassProbMatrix> {
        let mut g = Graph::new();
        let (_, logits) = self.forward(&mut g, &self.standardise(x)?)?;
        let p = g.softmax(logits);
        ClassProbMatrix::new(x.n, self.classes, g.value(p).data.clone())
    }

    pub fn accuracy(&self, x: &EmbeddingSet, labels: &[usize]) -> Result<f64> {
        let p = self.probabilities(x)?;
        if labels.len() != p.n {
            return Err(Error::Shape(format!("{} labels for {} samples", labels.len(), p.n)));
        }
        let hits = (0..p.n)
            .filter(|&i| {
                let row = p.row(i);
                let best = (0..p.classes).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                best == labels[i]
            })
            .count();
        Ok(hits as f64 / p.n as f64)
    }
}

/// Source of embeddings for the distribution metrics.
#[derive(Debug, Clone)]
pub enum EmbeddingProvider {
    MelStats { stft: StftConfig, mel: MelConfig },
    /// Hidden activations of a classifier over mel statistics.
    MiniClassifier { stft: StftConfig, mel: MelConfig, model: Box<MiniClassifier> },
    /// Precomputed MARSEMBD matrix, one row per clip.
    ExternalFile(PathBuf),
}

impl EmbeddingProvider {
    pub fn name(&self) -> &'static str {
        match self {
            EmbeddingProvider::MelStats { .. } => "mel_stats",
            EmbeddingProvider::MiniClassifier { .. } => "mini_classifier",
            EmbeddingProvider::ExternalFile(_) => "external_file",
        }
    }

    pub fn embed(&self, waves: &[Waveform]) -> Result<EmbeddingSet> {
        match self {
            EmbeddingProvider::MelStats { stft, mel } => mel_stats(waves, stft, mel),
            EmbeddingProvider::MiniClassifier { stft, mel, model } => model.embed(&mel_stats(waves, stft, mel)?),
            EmbeddingProvider::ExternalFile(path) => {
                let e = EmbeddingSet::load(path)?;
                if e.n != waves.len() {
                    return Err(Error::Shape(format!(
                        "{} has {} rows for {} clips",
                        path.display(),
                        e.n,
                        waves.len()
                    )));
                }
                Ok(e)
            }
        }
    }
}
