use mars_core::cmx::{cmx_pack, cmx_unpack, CmxDescriptor, CmxMode, PackedTensor, Tensor3};
use mars_core::dsp::{self, AmplitudeScale, StftConfig, Waveform};
use mars_core::metrics::{self, EmbeddingSet};
use mars_core::pipeline::RunConfig;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(mars, MarsError, PyException, "Error raised by the mars core; the message starts with its category.");

fn err(e: mars_core::Error) -> PyErr {
    MarsError::new_err(format!("{}: {e}", e.category()))
}

fn stft_config(n_fft: usize, hop: usize) -> PyResult<StftConfig> {
    let cfg = StftConfig {
        n_fft,
        hop,
        ..Default::default()
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

fn embeddings(rows: Vec<Vec<f64>>) -> PyResult<EmbeddingSet> {
    EmbeddingSet::from_rows(&rows, "python").map_err(err)
}

fn mode(name: &str) -> PyResult<CmxMode> {
    match name {
        "interleave" => Ok(CmxMode::Interleave),
        "block" => Ok(CmxMode::Block),
        other => Err(MarsError::new_err(format!("invalid-input: unknown cmx mode {other:?}"))),
    }
}

/// Log1p magnitude spectrogram as `bins` rows of `frames` values.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate, n_fft = 1024, hop = 256))]
fn spectrogram(samples: Vec<f32>, sample_rate: u32, n_fft: usize, hop: usize) -> PyResult<Vec<Vec<f64>>> {
    let cfg = stft_config(n_fft, hop)?;
    let w = Waveform::new(samples, sample_rate).map_err(err)?;
    let c = dsp::stft(&w, &cfg).map_err(err)?;
    let s = dsp::magnitude(&c, &cfg, cfg.bin_trim, AmplitudeScale::Log1p);
    Ok(s.values.chunks(s.frames).map(<[f64]>::to_vec).collect())
}

/// Inverts a log1p spectrogram from `spectrogram` with Griffin-Lim.
#[pyfunction]
#[pyo3(signature = (spec, sample_rate, n_fft = 1024, hop = 256, iters = 64, seed = 0))]
fn griffin_lim(spec: Vec<Vec<f64>>, sample_rate: u32, n_fft: usize, hop: usize, iters: usize, seed: u64) -> PyResult<Vec<f32>> {
    let cfg = stft_config(n_fft, hop)?;
    let frames = spec.first().map_or(0, Vec::len);
    if spec.iter().any(|r| r.len() != frames) {
        return Err(MarsError::new_err("shape: ragged spectrogram rows"));
    }
    let bins = spec.len();
    let s = dsp::Spectrogram::new(spec.concat(), bins, frames, cfg, AmplitudeScale::Log1p, sample_rate).map_err(err)?;
    Ok(dsp::griffin_lim(&s.to_linear(), iters, seed).map_err(err)?.samples)
}

/// Decodes WAV bytes into `(samples, sample_rate)`.
#[pyfunction]
fn read_wav(data: &[u8]) -> PyResult<(Vec<f32>, u32)> {
    let w = dsp::decode_wav(data).map_err(err)?;
    Ok((w.samples, w.sample_rate))
}

/// Packs a flat `(c, h, w)` tensor and returns `(values, packed_shape)`.
#[pyfunction]
#[pyo3(signature = (values, shape, factor_h, factor_w, mode = "interleave"))]
fn pack(
    values: Vec<f32>,
    shape: (usize, usize, usize),
    factor_h: usize,
    factor_w: usize,
    mode: &str,
) -> PyResult<(Vec<f32>, (usize, usize, usize))> {
    let x = Tensor3::new(shape.0, shape.1, shape.2, values).map_err(err)?;
    let d = CmxDescriptor::new(shape, factor_h, factor_w, self::mode(mode)?).map_err(err)?;
    let p = cmx_pack(&x, &d).map_err(err)?;
    let s = p.values.shape();
    Ok((p.values.data, s))
}

/// Inverse of `pack` given the original shape and factors.
#[pyfunction]
#[pyo3(signature = (values, shape, factor_h, factor_w, mode = "interleave"))]
fn unpack(values: Vec<f32>, shape: (usize, usize, usize), factor_h: usize, factor_w: usize, mode: &str) -> PyResult<Vec<f32>> {
    let descriptor = CmxDescriptor::new(shape, factor_h, factor_w, self::mode(mode)?).map_err(err)?;
    let (c, h, w) = descriptor.out_shape();
    let p = PackedTensor {
        values: Tensor3::new(c, h, w, values).map_err(err)?,
        descriptor,
    };
    Ok(cmx_unpack(&p).map_err(err)?.data)
}

#[pyfunction]
fn fad(reference: Vec<Vec<f64>>, candidate: Vec<Vec<f64>>) -> PyResult<f64> {
    let a = metrics::gaussian_stats(&embeddings(reference)?).map_err(err)?;
    let b = metrics::gaussian_stats(&embeddings(candidate)?).map_err(err)?;
    metrics::frechet_distance(&a, &b).map_err(err)
}

#[pyfunction]
fn kid(reference: Vec<Vec<f64>>, candidate: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::kid(&embeddings(reference)?, &embeddings(candidate)?).map_err(err)
}

/// Returns `(ndb, ndb / k)`.
#[pyfunction]
#[pyo3(signature = (train, eval, k = 10, alpha = 0.05, seed = 0))]
fn ndb(train: Vec<Vec<f64>>, eval: Vec<Vec<f64>>, k: usize, alpha: f64, seed: u64) -> PyResult<(usize, f64)> {
    let r = metrics::ndb(&embeddings(train)?, &embeddings(eval)?, k, alpha, seed).map_err(err)?;
    Ok((r.ndb, r.ndb_over_k))
}

/// SHA-256 of a TOML run configuration, as used to pin checkpoints.
#[pyfunction]
fn config_hash(toml: &str) -> PyResult<String> {
    let cfg = RunConfig::from_toml(toml).map_err(err)?;
    cfg.validate().map_err(err)?;
    Ok(cfg.hash_hex())
}

#[pyfunction]
fn inspect(path: std::path::PathBuf) -> PyResult<String> {
    mars_core::pipeline::inspect(&path).map_err(err)
}

#[pymodule]
fn mars(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MarsError", m.py().get_type::<MarsError>())?;
    m.add_function(wrap_pyfunction!(spectrogram, m)?)?;
    m.add_function(wrap_pyfunction!(griffin_lim, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(pack, m)?)?;
    m.add_function(wrap_pyfunction!(unpack, m)?)?;
    m.add_function(wrap_pyfunction!(fad, m)?)?;
    m.add_function(wrap_pyfunction!(kid, m)?)?;
    m.add_function(wrap_pyfunction!(ndb, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(inspect, m)?)?;
    Ok(())
}
