use super::EmbeddingSet;
use crate::error::{Error, Result};

fn kernel(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased squared MMD with kernel `(x.y / d + 1)^3`. Every term skips
/// the `i == j` pairs, so identical sets score exactly 0. Both sets are put
/// in canonical row order first because the cross term's skipped pairs
/// depend on it.
pub fn kid(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    a.check_pair(b)?;
    if a.n < 2 || b.n < 2 {
        return Err(Error::InvalidInput("kid needs at least 2 samples per set".into()));
    }
    let mean_off = |x: &EmbeddingSet, y: &EmbeddingSet| {
        let (mut sum, mut count) = (0.0, 0usize);
        for i in 0..x.n {
            for j in 0..y.n {
                if i != j {
                    sum += kernel(x.row(i), y.row(j));
                    count += 1;
                }
            }
        }
        sum / count as f64
    };
    let (a, b) = (&a.canonical(), &b.canonical());
    Ok(mean_off(a, a) + mean_off(b, b) - 2.0 * mean_off(a, b))
}
