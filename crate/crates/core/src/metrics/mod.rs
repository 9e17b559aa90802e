//! Evaluation suite: mel-domain reconstruction errors, Frechet and kernel
//! distances between embedding sets, NDB/k and inception scores, plus the
//! embedding providers that feed them.

mod embed;
mod fad;
mod kid;
mod ndb;
mod report;
mod scores;

pub use embed::{log_mel, mel_stats, EmbeddingProvider, MiniClassifier, MiniClassifierConfig};
pub use ndb::NdbBin;
pub use fad::{frechet_distance, gaussian_stats, psd_sqrt, GaussianStats};
pub use kid::kid;
pub use ndb::{kmeans, ndb, NdbResult};
pub use report::{MetricEntry, MetricReport, REPORT_HEADER};
pub use scores::{inception_score, nearest_neighbor_error, spectro_error, NearestNeighborError};

use crate::error::{Error, Result};
use std::path::Path;

/// `n x d` embeddings, row-major, tagged with the provider that made them.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
    pub provider: String,
}

const EMBD_MAGIC: &[u8; 8] = b"MARSEMBD";

impl EmbeddingSet {
    pub fn new(n: usize, d: usize, data: Vec<f64>, provider: impl Into<String>) -> Result<Self> {
        if data.len() != n * d || d == 0 {
            return Err(Error::Shape(format!("{} values for {n}x{d} embeddings", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("embeddings contain non-finite values".into()));
        }
        Ok(Self {
            n,
            d,
            data,
            provider: provider.into(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], provider: impl Into<String>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("embedding rows differ in length".into()));
        }
        Self::new(rows.len(), d, rows.concat(), provider)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.d)
    }

    /// Copy with rows in lexicographic order, so order-sensitive estimators
    /// give the same answer for any permutation of the input.
    pub fn canonical(&self) -> EmbeddingSet {
        let mut rows: Vec<&[f64]> = self.rows().collect();
        rows.sort_by(|a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        EmbeddingSet {
            n: self.n,
            d: self.d,
            data: rows.concat(),
            provider: self.provider.clone(),
        }
    }

    pub fn check_pair(&self, other: &EmbeddingSet) -> Result<()> {
        if self.d != other.d {
            return Err(Error::Shape(format!(
                "embedding dimensions differ: {} ({}) vs {} ({})",
                self.d, self.provider, other.d, other.provider
            )));
        }
        Ok(())
    }

    /// `MARSEMBD`, u32 n, u32 d, then `n*d` little-endian f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(EMBD_MAGIC);
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8], provider: impl Into<String>) -> Result<Self> {
        if b.len() < 16 || &b[..8] != EMBD_MAGIC {
            return Err(Error::Format("not a MARSEMBD embedding file".into()));
        }
        let n = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(b[12..16].try_into().unwrap()) as usize;
        if b.len() != 16 + 4 * n * d {
            return Err(Error::Format(format!("embedding file has {} bytes for {n}x{d}", b.len())));
        }
        let data = b[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::new(n, d, data, provider)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::MissingPrerequisite(format!("embedding file {}: {e}", path.display())))?;
        Self::from_bytes(&bytes, "external_file")
    }
}

/// Row-stochastic `n x classes` matrix of class posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbMatrix {
    pub n: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl ClassProbMatrix {
    pub fn new(n: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * classes || classes == 0 || n == 0 {
            return Err(Error::Shape(format!("{} values for {n}x{classes} probabilities", data.len())));
        }
        for (i, row) in data.chunks(classes).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!("row {i} is not a probability vector (sum {sum})")));
            }
        }
        Ok(Self { n, classes, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }
}
