//! Deterministic signal processing: WAV I/O, STFT/ISTFT, amplitude and mel
//! spectrograms, and Griffin-Lim phase reconstruction.
//!
//! Everything here is a pure function of its inputs. Waveform samples are
//! stored as `f32`; spectral data is computed and stored in `f64`.

mod griffin_lim;
mod mel;
mod stft;
mod wav;

pub use griffin_lim::{griffin_lim, griffin_lim_with_residuals, GriffinLimOptions, GriffinLimOutput};
pub use mel::{mel_spectrogram, MelConfig, MelFilterbank};
pub use stft::{istft, magnitude, stft, StftEngine};
pub use wav::{decode_wav, encode_wav, BitDepth};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidInput("waveform is empty".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Zero-pads or crops the tail to exactly `len` samples.
    pub fn fit_length(&self, len: usize) -> Waveform {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// Periodic Hann.
    Hann,
    /// Periodic Hamming.
    Hamming,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        let tau = 2.0 * std::f64::consts::PI;
        (0..n)
            .map(|i| {
                let phase = tau * i as f64 / n as f64;
                match self {
                    Window::Hann => 0.5 - 0.5 * phase.cos(),
                    Window::Hamming => 0.54 - 0.46 * phase.cos(),
                    Window::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    Reflect,
    Zero,
}

/// Which frequency row, if any, is removed when taking magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinTrim {
    DropDc,
    DropNyquist,
    KeepAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmplitudeScale {
    Linear,
    Log1p,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub window: Window,
    pub pad_mode: PadMode,
    pub bin_trim: BinTrim,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            hop: 256,
            window: Window::Hann,
            pad_mode: PadMode::Zero,
            bin_trim: BinTrim::DropDc,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 || !self.n_fft.is_power_of_two() {
            return Err(Error::Config(format!(
                "n_fft must be a power of two >= 2, got {}",
                self.n_fft
            )));
        }
        if self.hop == 0 || self.hop > self.n_fft || !self.n_fft.is_multiple_of(self.hop) {
            return Err(Error::Config(format!(
                "hop {} must divide n_fft {}",
                self.hop, self.n_fft
            )));
        }
        if !self.is_cola() {
            return Err(Error::Config(format!(
                "{:?} window with n_fft {} and hop {} violates constant overlap-add",
                self.window, self.n_fft, self.hop
            )));
        }
        Ok(())
    }

    /// Checks that the squared window overlap-adds to a constant, which is
    /// the condition for the least-squares inverse to be a plain division.
    pub fn is_cola(&self) -> bool {
        let w = self.window.coefficients(self.n_fft);
        let sums: Vec<f64> = (0..self.hop)
            .map(|r| w.iter().skip(r).step_by(self.hop).map(|x| x * x).sum())
            .collect();
        let mean = sums.iter().sum::<f64>() / sums.len() as f64;
        mean > 0.0 && sums.iter().all(|s| (s - mean).abs() <= 1e-9 * mean)
    }

    pub fn full_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Rows remaining after `bin_trim`.
    pub fn trimmed_bins(&self) -> usize {
        match self.bin_trim {
            BinTrim::KeepAll => self.full_bins(),
            _ => self.full_bins() - 1,
        }
    }

    /// Number of frames for a waveform of `len` samples under center padding.
    pub fn frame_count(&self, len: usize) -> usize {
        len.div_ceil(self.hop).max(1)
    }

    /// Maps a trimmed row index back to its FFT bin index.
    pub fn bin_of_row(&self, row: usize) -> usize {
        match self.bin_trim {
            BinTrim::DropDc => row + 1,
            _ => row,
        }
    }
}

/// Complex STFT with `n_fft / 2 + 1` rows, stored row-major (bins x frames).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub real: Vec<f64>,
    pub imag: Vec<f64>,
    pub bins: usize,
    pub frames: usize,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn zeros(bins: usize, frames: usize, sample_rate: u32) -> Self {
        Self {
            real: vec![0.0; bins * frames],
            imag: vec![0.0; bins * frames],
            bins,
            frames,
            sample_rate,
        }
    }
}

/// Amplitude spectrogram, row-major (freq_bins x frames).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Vec<f64>,
    pub bins: usize,
    pub frames: usize,
    pub config: StftConfig,
    pub scale: AmplitudeScale,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn new(
        values: Vec<f64>,
        bins: usize,
        frames: usize,
        config: StftConfig,
        scale: AmplitudeScale,
        sample_rate: u32,
    ) -> Result<Self> {
        if values.len() != bins * frames {
            return Err(Error::Shape(format!(
                "spectrogram has {} values for {bins}x{frames}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("spectrogram has non-finite values".into()));
        }
        if scale == AmplitudeScale::Linear && values.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidInput("negative magnitudes".into()));
        }
        Ok(Self {
            values,
            bins,
            frames,
            config,
            scale,
            sample_rate,
        })
    }

    pub fn at(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }

    pub fn to_log1p(&self) -> Spectrogram {
        match self.scale {
            AmplitudeScale::Log1p => self.clone(),
            AmplitudeScale::Linear => Spectrogram {
                values: self.values.iter().map(|v| v.ln_1p()).collect(),
                scale: AmplitudeScale::Log1p,
                ..self.clone()
            },
        }
    }

    /// Inverts log1p; negative results (possible after modelling) clamp to 0.
    pub fn to_linear(&self) -> Spectrogram {
        match self.scale {
            AmplitudeScale::Linear => self.clone(),
            AmplitudeScale::Log1p => Spectrogram {
                values: self.values.iter().map(|v| v.exp_m1().max(0.0)).collect(),
                scale: AmplitudeScale::Linear,
                ..self.clone()
            },
        }
    }

    /// Re-inserts the trimmed row as zeros, giving `n_fft / 2 + 1` rows.
    pub fn restore_full_bins(&self) -> Vec<f64> {
        let full = self.config.full_bins();
        if self.bins == full {
            return self.values.clone();
        }
        let mut out = vec![0.0; full * self.frames];
        for row in 0..self.bins {
            let bin = self.config.bin_of_row(row);
            out[bin * self.frames..(bin + 1) * self.frames]
                .copy_from_slice(&self.values[row * self.frames..(row + 1) * self.frames]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn waveform_validation() {
        assert!(Waveform::new(vec![], 16000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
        assert!(Waveform::new(vec![f32::NAN], 16000).is_err());
        let w = Waveform::new(vec![0.1; 10], 10).unwrap();
        assert_eq!(w.duration_secs(), 1.0);
        assert_eq!(w.fit_length(12).samples.len(), 12);
        assert_eq!(w.fit_length(4).samples, vec![0.1; 4]);
    }

    #[test]
    fn cola_validation() {
        assert!(StftConfig::default().validate().is_ok());
        let half = StftConfig {
            hop: 512,
            ..Default::default()
        };
        assert!(half.validate().is_err());
        let rect = StftConfig {
            hop: 1024,
            window: Window::Rectangular,
            ..Default::default()
        };
        assert!(rect.validate().is_ok());
        let odd = StftConfig {
            n_fft: 1000,
            ..Default::default()
        };
        assert!(odd.validate().is_err());
        let bad_hop = StftConfig {
            hop: 300,
            ..Default::default()
        };
        assert!(bad_hop.validate().is_err());
    }

    #[test]
    fn frame_arithmetic() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.frame_count(131072), 512);
        assert_eq!(cfg.frame_count(64000), 250);
        assert_eq!(cfg.trimmed_bins(), 512);
    }
}
