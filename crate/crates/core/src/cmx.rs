//! Channel multiplexing: a lossless reshaping that trades spatial
//! resolution for channels.
//!
//! For factors `(fh, fw)` every input channel `c` is split into
//! `fh * fw` sub-grids, written to output channel
//! `k = c * fh * fw + a * fw + b` with `0 <= a < fh`, `0 <= b < fw`:
//!
//! * [`CmxMode::Interleave`] (chessboard): `out[k][i][j] = x[c][i * fh + a][j * fw + b]`
//! * [`CmxMode::Block`] (contiguous): `out[k][i][j] = x[c][a * H / fh + i][b * W / fw + j]`
//!
//! The channel ordering is fixed so packed files are portable.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmxMode {
    Interleave,
    Block,
}

impl CmxMode {
    pub fn to_byte(self) -> u8 {
        match self {
            CmxMode::Interleave => 0,
            CmxMode::Block => 1,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(CmxMode::Interleave),
            1 => Ok(CmxMode::Block),
            other => Err(Error::Format(format!("unknown cmx mode byte {other}"))),
        }
    }
}

/// Dense channels x height x width tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn at(&self, c: usize, i: usize, j: usize) -> f32 {
        self.data[(c * self.height + i) * self.width + j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CmxDescriptor {
    /// (channels, height, width) of the unpacked tensor.
    pub in_shape: (usize, usize, usize),
    pub factor_h: usize,
    pub factor_w: usize,
    pub mode: CmxMode,
}

fn factor_ok(f: usize) -> bool {
    f >= 1 && f.is_power_of_two()
}

impl CmxDescriptor {
    pub fn new(
        in_shape: (usize, usize, usize),
        factor_h: usize,
        factor_w: usize,
        mode: CmxMode,
    ) -> Result<Self> {
        let d = Self {
            in_shape,
            factor_h,
            factor_w,
            mode,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn identity(in_shape: (usize, usize, usize)) -> Self {
        Self {
            in_shape,
            factor_h: 1,
            factor_w: 1,
            mode: CmxMode::Interleave,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.in_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("empty cmx input shape {:?}", self.in_shape)));
        }
        if !factor_ok(self.factor_h) || !factor_ok(self.factor_w) {
            return Err(Error::Config(format!(
                "cmx factors must be powers of two, got ({}, {})",
                self.factor_h, self.factor_w
            )));
        }
        if h % self.factor_h != 0 || w % self.factor_w != 0 {
            return Err(Error::Config(format!(
                "cmx factors ({}, {}) do not divide {h}x{w}",
                self.factor_h, self.factor_w
            )));
        }
        Ok(())
    }

    pub fn out_shape(&self) -> (usize, usize, usize) {
        let (c, h, w) = self.in_shape;
        (
            c * self.factor_h * self.factor_w,
            h / self.factor_h,
            w / self.factor_w,
        )
    }

    pub fn is_identity(&self) -> bool {
        self.factor_h == 1 && self.factor_w == 1
    }

    /// Five little-endian u32 values (c, h, w, fh, fw) followed by the mode byte.
    pub fn to_bytes(&self) -> [u8; 21] {
        let (c, h, w) = self.in_shape;
        let mut out = [0u8; 21];
        for (slot, v) in [c, h, w, self.factor_h, self.factor_w].into_iter().enumerate() {
            out[slot * 4..slot * 4 + 4].copy_from_slice(&(v as u32).to_le_bytes());
        }
        out[20] = self.mode.to_byte();
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < 21 {
            return Err(Error::Format("cmx descriptor needs 21 bytes".into()));
        }
        let v = |i: usize| u32::from_le_bytes([b[i * 4], b[i * 4 + 1], b[i * 4 + 2], b[i * 4 + 3]]) as usize;
        Self::new((v(0), v(1), v(2)), v(3), v(4), CmxMode::from_byte(b[20])?)
    }

    /// Source position `(c, row, col)` in the unpacked tensor for packed
    /// position `(k, i, j)`.
    #[inline]
    fn source(&self, k: usize, i: usize, j: usize) -> (usize, usize, usize) {
        let per = self.factor_h * self.factor_w;
        let (c, sub) = (k / per, k % per);
        let (a, b) = (sub / self.factor_w, sub % self.factor_w);
        let (_, h, w) = self.in_shape;
        match self.mode {
            CmxMode::Interleave => (c, i * self.factor_h + a, j * self.factor_w + b),
            CmxMode::Block => (c, a * (h / self.factor_h) + i, b * (w / self.factor_w) + j),
        }
    }
}

/// Packed tensor together with the descriptor needed to undo it.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTensor {
    pub values: Tensor3,
    pub descriptor: CmxDescriptor,
}

/// Chooses factors that bring a `freq_bins x frames` spectrogram to
/// `target_h x target_w`.
pub fn plan_cmx(
    freq_bins: usize,
    frames: usize,
    target_h: usize,
    target_w: usize,
    mode: CmxMode,
) -> Result<CmxDescriptor> {
    if target_h == 0 || target_w == 0 || !freq_bins.is_multiple_of(target_h) || !frames.is_multiple_of(target_w) {
        return Err(Error::Config(format!(
            "target {target_h}x{target_w} does not divide {freq_bins}x{frames}"
        )));
    }
    CmxDescriptor::new(
        (1, freq_bins, frames),
        freq_bins / target_h,
        frames / target_w,
        mode,
    )
}

pub fn cmx_pack(x: &Tensor3, d: &CmxDescriptor) -> Result<PackedTensor> {
    d.validate()?;
    if x.shape() != d.in_shape {
        return Err(Error::Shape(format!(
            "tensor shape {:?} does not match descriptor input {:?}",
            x.shape(),
            d.in_shape
        )));
    }
    let (oc, oh, ow) = d.out_shape();
    let mut data = Vec::with_capacity(x.data.len());
    for k in 0..oc {
        for i in 0..oh {
            for j in 0..ow {
                let (c, r, col) = d.source(k, i, j);
                data.push(x.at(c, r, col));
            }
        }
    }
    Ok(PackedTensor {
        values: Tensor3::new(oc, oh, ow, data)?,
        descriptor: *d,
    })
}

pub fn cmx_unpack(p: &PackedTensor) -> Result<Tensor3> {
    let d = &p.descriptor;
    d.validate()?;
    if p.values.shape() != d.out_shape() {
        return Err(Error::Shape(format!(
            "packed shape {:?} does not match descriptor output {:?}",
            p.values.shape(),
            d.out_shape()
        )));
    }
    let (c, h, w) = d.in_shape;
    let mut out = Tensor3::zeros(c, h, w);
    let (oc, oh, ow) = d.out_shape();
    let mut src = p.values.data.iter();
    for k in 0..oc {
        for i in 0..oh {
            for j in 0..ow {
                let (ch, r, col) = d.source(k, i, j);
                out.data[(ch * h + r) * w + col] = *src.next().expect("length checked");
            }
        }
    }
    Ok(out)
}
