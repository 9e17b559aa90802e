use super::{AmplitudeScale, ComplexSpectrogram, Spectrogram, StftEngine, Waveform};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct GriffinLimOutput {
    pub waveform: Waveform,
    /// Consistency residual of every iterate, the returned waveform last.
    pub residuals: Vec<f64>,
}

/// Distance between `|c|` and the target over the two-sided spectrum,
/// i.e. interior bins counted twice. This is the norm the least-squares
/// inverse minimises, so it cannot increase across iterations.
fn residual(c: &ComplexSpectrogram, target: &[f64]) -> f64 {
    let last = c.bins - 1;
    let mut acc = 0.0;
    for k in 0..c.bins {
        let weight = if k == 0 || k == last { 1.0 } else { 2.0 };
        for t in 0..c.frames {
            let i = k * c.frames + t;
            let d = c.real[i].hypot(c.imag[i]) - target[i];
            acc += weight * d * d;
        }
    }
    acc.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GriffinLimOptions {
    pub iters: usize,
    pub seed: u64,
    /// Spectral-domain momentum; 0 gives the classic algorithm.
    pub momentum: f64,
}

impl Default for GriffinLimOptions {
    fn default() -> Self {
        Self {
            iters: 64,
            seed: 0,
            momentum: 0.99,
        }
    }
}

pub fn griffin_lim(s: &Spectrogram, iters: usize, seed: u64) -> Result<Waveform> {
    let opts = GriffinLimOptions {
        iters,
        seed,
        ..Default::default()
    };
    Ok(griffin_lim_with_residuals(s, &opts)?.waveform)
}

fn project(c: &ComplexSpectrogram, target: &[f64], out: &mut ComplexSpectrogram) {
    for i in 0..target.len() {
        let m = c.real[i].hypot(c.imag[i]);
        if m > 0.0 {
            out.real[i] = target[i] * c.real[i] / m;
            out.imag[i] = target[i] * c.imag[i] / m;
        } else {
            out.real[i] = target[i];
            out.imag[i] = 0.0;
        }
    }
}

/// Griffin-Lim phase retrieval from uniform random initial phase.
///
/// Each iteration projects onto the target magnitudes and back through the
/// least-squares ISTFT. With `momentum > 0` the accelerated update
/// `t = p + momentum * (p - p_prev)` is tried first and kept only if the
/// residual does not grow; otherwise the plain projection step is taken.
/// The plain step never increases the residual (up to roundoff), so the
/// residual sequence is non-increasing either way.
pub fn griffin_lim_with_residuals(
    s: &Spectrogram,
    opts: &GriffinLimOptions,
) -> Result<GriffinLimOutput> {
    if opts.iters == 0 {
        return Err(Error::InvalidInput("griffin-lim needs at least one iteration".into()));
    }
    if !(0.0..1.0).contains(&opts.momentum) {
        return Err(Error::InvalidInput(format!(
            "griffin-lim momentum {} outside [0, 1)",
            opts.momentum
        )));
    }
    if s.scale != AmplitudeScale::Linear {
        return Err(Error::InvalidInput("griffin-lim expects a linear-scale spectrogram".into()));
    }
    if s.values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidInput("negative magnitudes".into()));
    }
    let engine = StftEngine::new(s.config)?;
    let target = s.restore_full_bins();
    let bins = s.config.full_bins();
    let frames = s.frames;
    let n = bins * frames;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut proj = ComplexSpectrogram::zeros(bins, frames, s.sample_rate);
    for i in 0..n {
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        proj.real[i] = target[i] * phase.cos();
        proj.imag[i] = target[i] * phase.sin();
    }
    let mut signal = engine.inverse_f64(&proj)?;
    let mut c = engine.forward_f64(&signal, s.sample_rate)?;
    let mut current = residual(&c, &target);
    let mut residuals = Vec::with_capacity(opts.iters + 1);
    residuals.push(current);
    let mut prev_proj: Option<ComplexSpectrogram> = None;
    let mut accel = ComplexSpectrogram::zeros(bins, frames, s.sample_rate);
    for _ in 0..opts.iters {
        project(&c, &target, &mut proj);
        let mut accepted = false;
        if let (Some(prev), true) = (&prev_proj, opts.momentum > 0.0) {
            for i in 0..n {
                accel.real[i] = proj.real[i] + opts.momentum * (proj.real[i] - prev.real[i]);
                accel.imag[i] = proj.imag[i] + opts.momentum * (proj.imag[i] - prev.imag[i]);
            }
            let candidate = engine.inverse_f64(&accel)?;
            let cc = engine.forward_f64(&candidate, s.sample_rate)?;
            let r = residual(&cc, &target);
            if r <= current {
                signal = candidate;
                c = cc;
                current = r;
                accepted = true;
            }
        }
        if !accepted {
            signal = engine.inverse_f64(&proj)?;
            c = engine.forward_f64(&signal, s.sample_rate)?;
            current = residual(&c, &target);
        }
        match &mut prev_proj {
            Some(prev) => std::mem::swap(prev, &mut proj),
            None => prev_proj = Some(proj.clone()),
        }
        residuals.push(current);
    }
    Ok(GriffinLimOutput {
        waveform: Waveform::new(signal.into_iter().map(|v| v as f32).collect(), s.sample_rate)?,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{magnitude, stft, BinTrim, StftConfig};

    fn small_cfg() -> StftConfig {
        StftConfig {
            n_fft: 256,
            hop: 64,
            ..Default::default()
        }
    }

    #[test]
    fn zero_spectrogram_gives_silence() {
        let cfg = small_cfg();
        let s = Spectrogram::new(vec![0.0; 128 * 10], 128, 10, cfg, AmplitudeScale::Linear, 16000)
            .unwrap();
        let w = griffin_lim(&s, 4, 0).unwrap();
        assert_eq!(w.samples.len(), 640);
        assert!(w.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = small_cfg();
        let mut s =
            Spectrogram::new(vec![1.0; 128 * 4], 128, 4, cfg, AmplitudeScale::Linear, 16000).unwrap();
        assert!(griffin_lim(&s, 0, 0).is_err());
        s.values[3] = -1.0;
        assert!(griffin_lim(&s, 2, 0).unwrap_err().to_string().contains("negative"));
    }

    #[test]
    fn residual_non_increasing_and_seeded() {
        let cfg = small_cfg();
        let w = Waveform::new(
            (0..4096).map(|i| (0.05 * i as f32).sin() * 0.5 + (0.31 * i as f32).cos() * 0.2).collect(),
            16000,
        )
        .unwrap();
        let s = magnitude(&stft(&w, &cfg).unwrap(), &cfg, BinTrim::DropDc, AmplitudeScale::Linear);
        let opts = |momentum, seed| GriffinLimOptions { iters: 16, seed, momentum };
        let a = griffin_lim_with_residuals(&s, &opts(0.0, 5)).unwrap();
        for pair in a.residuals.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-9), "{pair:?}");
        }
        let b = griffin_lim_with_residuals(&s, &opts(0.0, 5)).unwrap();
        assert_eq!(a.waveform, b.waveform);
        let c = griffin_lim_with_residuals(&s, &opts(0.0, 6)).unwrap();
        assert_ne!(a.waveform, c.waveform);
        let fast = griffin_lim_with_residuals(&s, &opts(0.99, 5)).unwrap();
        for pair in fast.residuals.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-9));
        }
        assert!(fast.residuals.last() <= a.residuals.last());
    }
}
