use super::{MultiScaleTokenMap, Tokenizer};
use crate::cmx::{cmx_pack, cmx_unpack, CmxDescriptor, PackedTensor, Tensor3};
use crate::dsp::{
    griffin_lim_with_residuals, magnitude, stft, AmplitudeScale, GriffinLimOptions, Spectrogram, StftConfig, Waveform,
};
use crate::error::{Error, Result};
use crate::substrate::Scalar;
use serde::{Deserialize, Serialize};

/// Global normalisation of log1p magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for NormStats {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl NormStats {
    /// Mean and population standard deviation over all values.
    pub fn fit<'a>(values: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
        for chunk in values {
            for &v in chunk {
                n += 1;
                sum += v;
                sq += v * v;
            }
        }
        if n == 0 {
            return Err(Error::InvalidInput("no values to normalise".into()));
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        let std = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
        Ok(Self { mean, std })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mean.is_finite() || !(self.std.is_finite() && self.std > 0.0) {
            return Err(Error::Config(format!("invalid normalisation stats {self:?}")));
        }
        Ok(())
    }
}

/// Waveform to packed-tensor chain and its inverse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioFrontend {
    pub stft: StftConfig,
    pub sample_rate: u32,
    /// STFT frames per clip; audio is padded or cropped to `frames * hop`.
    pub frames: usize,
    pub cmx: CmxDescriptor,
    pub norm: NormStats,
    pub griffin_lim: GriffinLimOptions,
}

impl AudioFrontend {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.cmx.validate()?;
        self.norm.validate()?;
        let want = (1, self.stft.trimmed_bins(), self.frames);
        if self.cmx.in_shape != want {
            return Err(Error::Config(format!(
                "cmx input {:?} does not match spectrogram shape {want:?}",
                self.cmx.in_shape
            )));
        }
        Ok(())
    }

    pub fn clip_len(&self) -> usize {
        self.frames * self.stft.hop
    }

    /// log1p magnitude spectrogram of a clip fitted to the frame budget.
    pub fn analyze(&self, w: &Waveform) -> Result<Spectrogram> {
        if w.sample_rate != self.sample_rate {
            return Err(Error::InvalidInput(format!(
                "sample rate {} differs from configured {}",
                w.sample_rate, self.sample_rate
            )));
        }
        let c = stft(&w.fit_length(self.clip_len()), &self.stft)?;
        Ok(magnitude(&c, &self.stft, self.stft.bin_trim, AmplitudeScale::Log1p))
    }

    pub fn pack(&self, s: &Spectrogram) -> Result<PackedTensor> {
        if s.scale != AmplitudeScale::Log1p || (1, s.bins, s.frames) != self.cmx.in_shape {
            return Err(Error::Shape(format!(
                "spectrogram {}x{} ({:?}) does not match frontend input {:?}",
                s.bins, s.frames, s.scale, self.cmx.in_shape
            )));
        }
        let NormStats { mean, std } = self.norm;
        let data = s.values.iter().map(|v| ((v - mean) / std) as f32).collect();
        cmx_pack(&Tensor3::new(1, s.bins, s.frames, data)?, &self.cmx)
    }

    pub fn encode_audio(&self, w: &Waveform) -> Result<Tensor3> {
        Ok(self.pack(&self.analyze(w)?)?.values)
    }

    /// Inverse of [`pack`](Self::pack) back to a log1p spectrogram.
    pub fn unpack(&self, values: Tensor3) -> Result<Spectrogram> {
        let t = cmx_unpack(&PackedTensor {
            values,
            descriptor: self.cmx,
        })?;
        let NormStats { mean, std } = self.norm;
        Spectrogram::new(
            t.data.iter().map(|&v| v as f64 * std + mean).collect(),
            t.height,
            t.width,
            self.stft,
            AmplitudeScale::Log1p,
            self.sample_rate,
        )
    }

    pub fn synthesize(&self, s: &Spectrogram, seed: u64) -> Result<Waveform> {
        let opts = GriffinLimOptions {
            seed,
            ..self.griffin_lim
        };
        Ok(griffin_lim_with_residuals(&s.to_linear(), &opts)?.waveform)
    }
}

fn check_compatible<T: Scalar>(f: &AudioFrontend, t: &Tokenizer<T>) -> Result<()> {
    let c = &t.cfg;
    if f.cmx.out_shape() != (c.channels, c.size, c.size) {
        return Err(Error::Config(format!(
            "frontend produces {:?} but the tokenizer expects {}x{}x{}",
            f.cmx.out_shape(),
            c.channels,
            c.size,
            c.size
        )));
    }
    Ok(())
}

/// stft, magnitude, pack, encode and quantize.
pub fn tokenize<T: Scalar>(w: &Waveform, f: &AudioFrontend, t: &Tokenizer<T>) -> Result<MultiScaleTokenMap> {
    check_compatible(f, t)?;
    let x = f.encode_audio(w)?;
    Ok(t.quantize(&t.encode(&x)?)?.tokens)
}

/// Decoded log1p spectrogram of a token map.
pub fn decode_tokens<T: Scalar>(tokens: &MultiScaleTokenMap, f: &AudioFrontend, t: &Tokenizer<T>) -> Result<Spectrogram> {
    check_compatible(f, t)?;
    f.unpack(t.decode(&t.tokens_to_latent(tokens)?)?)
}

/// decode, unpack and Griffin-Lim.
pub fn detokenize<T: Scalar>(
    tokens: &MultiScaleTokenMap,
    f: &AudioFrontend,
    t: &Tokenizer<T>,
    seed: u64,
) -> Result<Waveform> {
    f.synthesize(&decode_tokens(tokens, f, t)?, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmx::{plan_cmx, CmxMode};
    use crate::tokenizer::TokenizerConfig;

    fn frontend() -> AudioFrontend {
        let stft = StftConfig {
            n_fft: 64,
            hop: 16,
            ..Default::default()
        };
        AudioFrontend {
            stft,
            sample_rate: 8000,
            frames: 16,
            cmx: plan_cmx(32, 16, 16, 16, CmxMode::Interleave).unwrap(),
            norm: NormStats { mean: 0.1, std: 0.5 },
            griffin_lim: GriffinLimOptions {
                iters: 8,
                ..Default::default()
            },
        }
    }

    fn tone() -> Waveform {
        Waveform::new((0..300).map(|i| (i as f32 * 0.2).sin() * 0.5).collect(), 8000).unwrap()
    }

    #[test]
    fn norm_stats() {
        let s = NormStats::fit([&[1.0, 3.0][..], &[1.0, 3.0][..]]).unwrap();
        assert_eq!(s, NormStats { mean: 2.0, std: 1.0 });
        assert_eq!(NormStats::fit([&[2.0, 2.0][..]]).unwrap().std, 1.0);
        assert!(NormStats::fit(Vec::<&[f64]>::new()).is_err());
    }

    #[test]
    fn pack_unpack_roundtrip() {
        let f = frontend();
        f.validate().unwrap();
        let s = f.analyze(&tone()).unwrap();
        assert_eq!((s.bins, s.frames), (32, 16));
        let p = f.pack(&s).unwrap();
        assert_eq!(p.values.shape(), (2, 16, 16));
        let back = f.unpack(p.values).unwrap();
        for (a, b) in back.values.iter().zip(&s.values) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(f.analyze(&Waveform::new(vec![0.0; 10], 16000).unwrap()).is_err());
    }

    #[test]
    fn tokenize_shape_trace_and_determinism() {
        let f = frontend();
        let cfg = TokenizerConfig {
            channels: 2,
            size: 16,
            patch: 4,
            width: 8,
            heads: 2,
            encoder_depth: 1,
            decoder_depth: 1,
            codebook_size: 8,
            code_dim: 4,
            schedule: vec![1, 2, 4],
            ..Default::default()
        };
        let t = Tokenizer::<f32>::new(&cfg, 0).unwrap();
        let a = tokenize(&tone(), &f, &t).unwrap();
        assert_eq!(a.grids.iter().map(Vec::len).collect::<Vec<_>>(), vec![1, 4, 16]);
        assert_eq!(a, tokenize(&tone(), &f, &t).unwrap());
        let w = detokenize(&a, &f, &t, 3).unwrap();
        assert_eq!(w.len(), f.clip_len());
        assert_eq!(w, detokenize(&a, &f, &t, 3).unwrap());
        let small = Tokenizer::<f32>::new(&TokenizerConfig { size: 8, patch: 2, ..cfg }, 0).unwrap();
        assert!(tokenize(&tone(), &f, &small).is_err());
    }
}
