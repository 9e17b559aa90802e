use super::{AmplitudeScale, BinTrim, ComplexSpectrogram, PadMode, Spectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Planned forward/inverse FFTs plus window for one [`StftConfig`].
///
/// Frame `t` is centred on sample `t * hop`; the signal is padded by
/// `n_fft / 2` on the left and as needed on the right, giving
/// `ceil(len / hop)` frames. The inverse is the least-squares overlap-add
/// (window applied on synthesis, divided by the summed squared window).
pub struct StftEngine {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl StftEngine {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: cfg.window.coefficients(cfg.n_fft),
            forward: planner.plan_fft_forward(cfg.n_fft),
            inverse: planner.plan_fft_inverse(cfg.n_fft),
            cfg,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    fn padded(&self, samples: &[f64], frames: usize) -> Result<Vec<f64>> {
        let n = self.cfg.n_fft;
        let half = n / 2;
        let len = samples.len();
        if len == 0 {
            return Err(Error::InvalidInput("waveform shorter than one frame".into()));
        }
        if self.cfg.pad_mode == PadMode::Reflect && len <= half {
            return Err(Error::InvalidInput(format!(
                "waveform shorter than one frame: reflect padding needs more than {half} samples, got {len}"
            )));
        }
        let total = (frames - 1) * self.cfg.hop + n;
        let mut out = vec![0.0; total];
        for (i, o) in out.iter_mut().enumerate() {
            let idx = i as isize - half as isize;
            *o = if idx >= 0 && (idx as usize) < len {
                samples[idx as usize]
            } else {
                match self.cfg.pad_mode {
                    PadMode::Zero => 0.0,
                    PadMode::Reflect => {
                        let period = 2 * (len as isize - 1);
                        if period == 0 {
                            samples[0]
                        } else {
                            let mut m = idx.rem_euclid(period);
                            if m >= len as isize {
                                m = period - m;
                            }
                            samples[m as usize]
                        }
                    }
                }
            };
        }
        Ok(out)
    }

    /// STFT of a real signal given in `f64`.
    pub fn forward_f64(&self, samples: &[f64], sample_rate: u32) -> Result<ComplexSpectrogram> {
        let n = self.cfg.n_fft;
        let bins = self.cfg.full_bins();
        let frames = self.cfg.frame_count(samples.len());
        let padded = self.padded(samples, frames)?;
        let mut out = ComplexSpectrogram::zeros(bins, frames, sample_rate);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            let frame = &padded[t * self.cfg.hop..t * self.cfg.hop + n];
            for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex64::new(x * w, 0.0);
            }
            self.forward.process(&mut buf);
            for (k, c) in buf.iter().take(bins).enumerate() {
                out.real[k * frames + t] = c.re;
                out.imag[k * frames + t] = c.im;
            }
        }
        Ok(out)
    }

    pub fn forward(&self, w: &Waveform) -> Result<ComplexSpectrogram> {
        let samples: Vec<f64> = w.samples.iter().map(|&s| s as f64).collect();
        self.forward_f64(&samples, w.sample_rate)
    }

    /// Least-squares inverse; returns `frames * hop` samples.
    pub fn inverse_f64(&self, c: &ComplexSpectrogram) -> Result<Vec<f64>> {
        let n = self.cfg.n_fft;
        let bins = self.cfg.full_bins();
        if c.bins != bins {
            return Err(Error::Shape(format!(
                "complex spectrogram has {} rows, expected {bins}",
                c.bins
            )));
        }
        let frames = c.frames;
        let hop = self.cfg.hop;
        let half = n / 2;
        let total = ((frames - 1) * hop + n).max(half + frames * hop);
        let mut acc = vec![0.0; total];
        let mut wsum = vec![0.0; total];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let scale = 1.0 / n as f64;
        for t in 0..frames {
            for k in 0..bins {
                buf[k] = Complex64::new(c.real[k * frames + t], c.imag[k * frames + t]);
            }
            for k in bins..n {
                buf[k] = buf[n - k].conj();
            }
            self.inverse.process(&mut buf);
            let base = t * hop;
            for i in 0..n {
                let w = self.window[i];
                acc[base + i] += buf[i].re * scale * w;
                wsum[base + i] += w * w;
            }
        }
        let out = (half..half + frames * hop)
            .map(|i| {
                if wsum[i] > 1e-12 {
                    acc[i] / wsum[i]
                } else {
                    0.0
                }
            })
            .collect();
        Ok(out)
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    StftEngine::new(*cfg)?.forward(w)
}

pub fn istft(c: &ComplexSpectrogram, cfg: &StftConfig) -> Result<Waveform> {
    let out = StftEngine::new(*cfg)?.inverse_f64(c)?;
    Waveform::new(out.into_iter().map(|v| v as f32).collect(), c.sample_rate)
}

/// Amplitude of a complex spectrogram with one row trimmed per `trim`.
pub fn magnitude(
    c: &ComplexSpectrogram,
    cfg: &StftConfig,
    trim: BinTrim,
    scale: AmplitudeScale,
) -> Spectrogram {
    let (lo, hi) = match trim {
        BinTrim::DropDc => (1, c.bins),
        BinTrim::DropNyquist => (0, c.bins - 1),
        BinTrim::KeepAll => (0, c.bins),
    };
    let frames = c.frames;
    let mut values = Vec::with_capacity((hi - lo) * frames);
    for k in lo..hi {
        for t in 0..frames {
            let i = k * frames + t;
            let m = c.real[i].hypot(c.imag[i]);
            values.push(match scale {
                AmplitudeScale::Linear => m,
                AmplitudeScale::Log1p => m.ln_1p(),
            });
        }
    }
    Spectrogram {
        values,
        bins: hi - lo,
        frames,
        config: StftConfig {
            bin_trim: trim,
            ..*cfg
        },
        scale,
        sample_rate: c.sample_rate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::Window;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_wave(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.random_range(-0.9f32..0.9)).collect(), 16000).unwrap()
    }

    #[test]
    fn eight_seconds_gives_512_square() {
        let cfg = StftConfig::default();
        // 8 s at 16 kHz, tail-padded to the 512-frame target
        let w = random_wave(128_000, 1).fit_length(512 * 256);
        let c = stft(&w, &cfg).unwrap();
        assert_eq!((c.bins, c.frames), (513, 512));
        let m = magnitude(&c, &cfg, BinTrim::DropDc, AmplitudeScale::Linear);
        assert_eq!((m.bins, m.frames), (512, 512));
    }

    #[test]
    fn zero_in_zero_out() {
        let cfg = StftConfig::default();
        let w = Waveform::new(vec![0.0; 4096], 16000).unwrap();
        let c = stft(&w, &cfg).unwrap();
        assert!(c.real.iter().chain(&c.imag).all(|&v| v == 0.0));
        let back = istft(&ComplexSpectrogram::zeros(513, 8, 16000), &cfg).unwrap();
        assert!(back.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bin_centred_sinusoid_peaks_in_its_row() {
        let cfg = StftConfig {
            n_fft: 256,
            hop: 64,
            ..Default::default()
        };
        let k = 10usize;
        let sr = 16000u32;
        let f = k as f64 * sr as f64 / cfg.n_fft as f64;
        let w = Waveform::new(
            (0..4096)
                .map(|i| (0.5 * (2.0 * std::f64::consts::PI * f * i as f64 / sr as f64).sin()) as f32)
                .collect(),
            sr,
        )
        .unwrap();
        let c = stft(&w, &cfg).unwrap();
        let m = magnitude(&c, &cfg, BinTrim::KeepAll, AmplitudeScale::Linear);
        // direct-summation DFT of one interior frame
        let t = 20;
        let win = Window::Hann.coefficients(cfg.n_fft);
        let start = t * cfg.hop - cfg.n_fft / 2;
        let mut direct = vec![0.0; cfg.full_bins()];
        for (b, d) in direct.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for n in 0..cfg.n_fft {
                let x = w.samples[start + n] as f64 * win[n];
                let ph = -2.0 * std::f64::consts::PI * (b * n) as f64 / cfg.n_fft as f64;
                re += x * ph.cos();
                im += x * ph.sin();
            }
            *d = re.hypot(im);
        }
        for (b, d) in direct.iter().enumerate() {
            assert!((m.at(b, t) - d).abs() < 1e-6 * (1.0 + d));
        }
        for t in 4..c.frames - 4 {
            let col: Vec<f64> = (0..m.bins).map(|b| m.at(b, t)).collect();
            let best = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(best, k, "frame {t}");
        }
    }

    #[test]
    fn pythagorean_magnitude_and_log1p_zero() {
        let mut c = ComplexSpectrogram::zeros(3, 1, 16000);
        c.real[1] = 3.0;
        c.imag[1] = 4.0;
        let cfg = StftConfig {
            n_fft: 4,
            hop: 1,
            ..Default::default()
        };
        let m = magnitude(&c, &cfg, BinTrim::KeepAll, AmplitudeScale::Linear);
        assert_eq!(m.values, vec![0.0, 5.0, 0.0]);
        let trimmed = magnitude(&c, &cfg, BinTrim::DropDc, AmplitudeScale::Log1p);
        assert_eq!(trimmed.values, vec![5.0f64.ln_1p(), 0.0]);
        let nyq = magnitude(&c, &cfg, BinTrim::DropNyquist, AmplitudeScale::Linear);
        assert_eq!(nyq.values, vec![0.0, 5.0]);
    }

    #[test]
    fn roundtrip_interior_snr() {
        let w = random_wave(16000, 3);
        for pad_mode in [PadMode::Zero, PadMode::Reflect] {
            let cfg = StftConfig {
                pad_mode,
                ..Default::default()
            };
            let back = istft(&stft(&w, &cfg).unwrap(), &cfg).unwrap();
            let (mut sig, mut err) = (0.0, 0.0);
            for i in 1024..15000 {
                sig += (w.samples[i] as f64).powi(2);
                err += (w.samples[i] as f64 - back.samples[i] as f64).powi(2);
            }
            assert!(10.0 * (sig / err).log10() > 60.0);
        }
    }

    #[test]
    fn single_frame_inverse_divides_out_the_window() {
        // the spectrum of one Hann-windowed sinusoid frame comes back as
        // y * w / w^2 = sinusoid wherever the window is non-negligible
        let cfg = StftConfig {
            n_fft: 64,
            hop: 16,
            ..Default::default()
        };
        let n = cfg.n_fft;
        let win = Window::Hann.coefficients(n);
        let s: Vec<f64> = (0..n).map(|i| (0.3 * i as f64).sin()).collect();
        let mut c = ComplexSpectrogram::zeros(cfg.full_bins(), 1, 16000);
        for k in 0..cfg.full_bins() {
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..n {
                let ph = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                re += s[i] * win[i] * ph.cos();
                im += s[i] * win[i] * ph.sin();
            }
            c.real[k] = re;
            c.imag[k] = im;
        }
        let back = StftEngine::new(cfg).unwrap().inverse_f64(&c).unwrap();
        // output sample j sits at frame offset j + n/2
        assert_eq!(back.len(), 16);
        for (j, b) in back.iter().enumerate() {
            let i = j + n / 2;
            assert!((b - s[i]).abs() < 1e-9, "{j}: {b} vs {}", s[i]);
        }
    }

    #[test]
    fn hop_equal_to_window_length() {
        let cfg = StftConfig {
            n_fft: 64,
            hop: 64,
            window: Window::Rectangular,
            pad_mode: PadMode::Zero,
            bin_trim: BinTrim::KeepAll,
        };
        let x: Vec<f64> = (0..64).map(|i| (0.3 * i as f64).sin()).collect();
        let engine = StftEngine::new(cfg).unwrap();
        let c = engine.forward_f64(&x, 16000).unwrap();
        assert_eq!(c.frames, 1);
        let back = engine.inverse_f64(&c).unwrap();
        assert_eq!(back.len(), 64);
        for i in 0..32 {
            assert!((back[i] - x[i]).abs() < 1e-12);
        }
        // samples past the single frame are not observed
        assert!(back[32..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reflect_needs_enough_samples() {
        let cfg = StftConfig {
            pad_mode: PadMode::Reflect,
            ..Default::default()
        };
        let w = Waveform::new(vec![0.1; 100], 16000).unwrap();
        assert!(stft(&w, &cfg).is_err());
    }
}
