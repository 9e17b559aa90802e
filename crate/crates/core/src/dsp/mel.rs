use super::{AmplitudeScale, Spectrogram, StftConfig};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            f_min: 0.0,
            f_max: 8000.0,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Dense `n_mels x freq_bins` projection matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub weights: Vec<f64>,
    pub n_mels: usize,
    pub bins: usize,
}

impl MelFilterbank {
    /// Triangular filters with unit peak on HTK-mel-spaced centres, laid out
    /// over the rows that remain after the config's bin trim.
    pub fn new(m: &MelConfig, stft: &StftConfig, sample_rate: u32) -> Result<Self> {
        let bins = stft.trimmed_bins();
        if m.n_mels == 0 || m.n_mels > bins {
            return Err(Error::Config(format!(
                "n_mels {} must be in 1..={bins} (frequency rows)",
                m.n_mels
            )));
        }
        let nyquist = sample_rate as f64 / 2.0;
        if !(0.0 <= m.f_min && m.f_min < m.f_max && m.f_max <= nyquist) {
            return Err(Error::Config(format!(
                "mel range [{}, {}] must satisfy 0 <= f_min < f_max <= {nyquist}",
                m.f_min, m.f_max
            )));
        }
        let (lo, hi) = (hz_to_mel(m.f_min), hz_to_mel(m.f_max));
        let edges: Vec<f64> = (0..m.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (m.n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / stft.n_fft as f64;
        let mut weights = vec![0.0; m.n_mels * bins];
        for f in 0..m.n_mels {
            let (left, centre, right) = (edges[f], edges[f + 1], edges[f + 2]);
            for row in 0..bins {
                let hz = stft.bin_of_row(row) as f64 * bin_hz;
                let w = if hz > left && hz <= centre {
                    (hz - left) / (centre - left)
                } else if hz > centre && hz < right {
                    (right - hz) / (right - centre)
                } else {
                    0.0
                };
                weights[f * bins + row] = w;
            }
        }
        let fb = Self {
            weights,
            n_mels: m.n_mels,
            bins,
        };
        if let Some(f) = (0..fb.n_mels).find(|&f| fb.row_sum(f) <= 0.0) {
            return Err(Error::Config(format!(
                "mel filter {f} covers no frequency bin; reduce n_mels or raise n_fft"
            )));
        }
        Ok(fb)
    }

    /// Delta filters: mel row `i` copies frequency row `i`.
    pub fn identity(bins: usize) -> Self {
        let mut weights = vec![0.0; bins * bins];
        for i in 0..bins {
            weights[i * bins + i] = 1.0;
        }
        Self {
            weights,
            n_mels: bins,
            bins,
        }
    }

    pub fn row_sum(&self, f: usize) -> f64 {
        self.weights[f * self.bins..(f + 1) * self.bins].iter().sum()
    }

    /// Projects a linear spectrogram, returning `n_mels x frames` row-major.
    pub fn apply(&self, s: &Spectrogram) -> Result<Vec<f64>> {
        if s.scale != AmplitudeScale::Linear {
            return Err(Error::InvalidInput("mel projection expects a linear spectrogram".into()));
        }
        if s.bins != self.bins {
            return Err(Error::Shape(format!(
                "filterbank expects {} rows, spectrogram has {}",
                self.bins, s.bins
            )));
        }
        let frames = s.frames;
        let mut out = vec![0.0; self.n_mels * frames];
        for f in 0..self.n_mels {
            let dst = &mut out[f * frames..(f + 1) * frames];
            for b in 0..self.bins {
                let w = self.weights[f * self.bins + b];
                if w == 0.0 {
                    continue;
                }
                for (d, &v) in dst.iter_mut().zip(&s.values[b * frames..(b + 1) * frames]) {
                    *d += w * v;
                }
            }
        }
        Ok(out)
    }
}

pub fn mel_spectrogram(s: &Spectrogram, m: &MelConfig) -> Result<Vec<f64>> {
    MelFilterbank::new(m, &s.config, s.sample_rate)?.apply(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::BinTrim;

    fn spec(values: Vec<f64>, bins: usize, frames: usize) -> Spectrogram {
        Spectrogram::new(
            values,
            bins,
            frames,
            StftConfig::default(),
            AmplitudeScale::Linear,
            16000,
        )
        .unwrap()
    }

    #[test]
    fn identity_filterbank_is_passthrough() {
        let values: Vec<f64> = (0..512 * 3).map(|i| (i % 17) as f64).collect();
        let s = spec(values.clone(), 512, 3);
        assert_eq!(MelFilterbank::identity(512).apply(&s).unwrap(), values);
    }

    #[test]
    fn all_ones_gives_row_sums() {
        let fb = MelFilterbank::new(&MelConfig::default(), &StftConfig::default(), 16000).unwrap();
        let s = spec(vec![1.0; 512 * 2], 512, 2);
        let mel = fb.apply(&s).unwrap();
        for f in 0..fb.n_mels {
            assert!((mel[f * 2] - fb.row_sum(f)).abs() < 1e-12);
            assert_eq!(mel[f * 2], mel[f * 2 + 1]);
        }
    }

    #[test]
    fn single_tone_lands_in_overlapping_filters() {
        let cfg = StftConfig::default();
        let fb = MelFilterbank::new(&MelConfig::default(), &cfg, 16000).unwrap();
        let row = 100;
        let mut values = vec![0.0; 512];
        values[row] = 2.0;
        let mel = fb.apply(&spec(values, 512, 1)).unwrap();
        for f in 0..fb.n_mels {
            // direct multiplication oracle
            let expected = 2.0 * fb.weights[f * 512 + row];
            assert_eq!(mel[f], expected);
        }
        let active: Vec<usize> = (0..fb.n_mels).filter(|&f| mel[f] > 0.0).collect();
        assert!(!active.is_empty() && active.len() <= 2);
    }

    #[test]
    fn validation() {
        let cfg = StftConfig::default();
        let too_many = MelConfig {
            n_mels: 600,
            ..Default::default()
        };
        assert!(MelFilterbank::new(&too_many, &cfg, 16000).is_err());
        let bad_range = MelConfig {
            f_max: 9000.0,
            ..Default::default()
        };
        assert!(MelFilterbank::new(&bad_range, &cfg, 16000).is_err());
        let crowded = MelConfig {
            n_mels: 500,
            ..Default::default()
        };
        assert!(MelFilterbank::new(&crowded, &cfg, 16000).is_err());
        let keep = StftConfig {
            bin_trim: BinTrim::KeepAll,
            ..cfg
        };
        assert_eq!(MelFilterbank::new(&MelConfig::default(), &keep, 16000).unwrap().bins, 513);
    }
}
