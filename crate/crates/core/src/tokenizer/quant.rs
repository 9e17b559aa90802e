use super::{validate_schedule, MultiScaleTokenMap};
use crate::error::{shape_err, Result};
use crate::substrate::matmul_plain;
use rayon::prelude::*;

/// `[k*k, n*n]` matrix averaging each `(n/k) x (n/k)` block of an `n x n` grid.
pub fn area_matrix(k: usize, n: usize) -> Vec<f64> {
    let f = n / k;
    let w = 1.0 / (f * f) as f64;
    let mut m = vec![0.0; k * k * n * n];
    for y in 0..n {
        for x in 0..n {
            let row = (y / f) * k + x / f;
            m[row * n * n + y * n + x] = w;
        }
    }
    m
}

/// 1-D half-pixel-centred linear interpolation weights from `k` to `n` samples.
fn linear_weights(k: usize, n: usize) -> Vec<[(usize, f64); 2]> {
    (0..n)
        .map(|i| {
            let src = ((i as f64 + 0.5) * k as f64 / n as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(k - 1);
            let i1 = (i0 + 1).min(k - 1);
            let frac = src - i0 as f64;
            [(i0, 1.0 - frac), (i1, frac)]
        })
        .collect()
}

/// `[n*n, k*k]` bilinear upsampling matrix; rows sum to 1.
pub fn bilinear_matrix(k: usize, n: usize) -> Vec<f64> {
    let w = linear_weights(k, n);
    let mut m = vec![0.0; n * n * k * k];
    for y in 0..n {
        for x in 0..n {
            for &(sy, wy) in &w[y] {
                for &(sx, wx) in &w[x] {
                    m[(y * n + x) * k * k + sy * k + sx] += wy * wx;
                }
            }
        }
    }
    m
}

/// Resampling operators for one schedule over a `grid x grid` latent.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleOps {
    pub schedule: Vec<usize>,
    pub grid: usize,
    /// Per scale, `[k*k, grid*grid]`.
    pub down: Vec<Vec<f64>>,
    /// Per scale, `[grid*grid, k*k]`.
    pub up: Vec<Vec<f64>>,
}

impl ScaleOps {
    pub fn new(schedule: &[usize], grid: usize) -> Result<Self> {
        validate_schedule(schedule, grid)?;
        Ok(Self {
            schedule: schedule.to_vec(),
            grid,
            down: schedule.iter().map(|&k| area_matrix(k, grid)).collect(),
            up: schedule.iter().map(|&k| bilinear_matrix(k, grid)).collect(),
        })
    }

    /// `[grid*grid, sum k*k]`: the per-scale upsamplers side by side, so the
    /// quantized latent is `up_all * codes` for codes stacked in scale order.
    pub fn up_all(&self) -> Vec<f64> {
        let n = self.grid * self.grid;
        let total: usize = self.schedule.iter().map(|k| k * k).sum();
        let mut m = vec![0.0; n * total];
        let mut off = 0;
        for (s, &k) in self.schedule.iter().enumerate() {
            for r in 0..n {
                m[r * total + off..r * total + off + k * k]
                    .copy_from_slice(&self.up[s][r * k * k..(r + 1) * k * k]);
            }
            off += k * k;
        }
        m
    }
}

/// Nearest codebook row by squared Euclidean distance, lowest index on ties.
pub fn quantize_nearest(vectors: &[f64], codebook: &[f64], dim: usize) -> (Vec<u32>, Vec<f64>) {
    let idx: Vec<u32> = vectors
        .par_chunks(dim)
        .map(|v| {
            let mut best = (f64::INFINITY, 0usize);
            for (i, e) in codebook.chunks_exact(dim).enumerate() {
                let d: f64 = v.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, i);
                }
            }
            best.1 as u32
        })
        .collect();
    let mut q = Vec::with_capacity(vectors.len());
    for &i in &idx {
        q.extend_from_slice(&codebook[i as usize * dim..(i as usize + 1) * dim]);
    }
    (idx, q)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult {
    pub tokens: MultiScaleTokenMap,
    /// Quantized latent `z'`, `[grid*grid, dim]` row-major.
    pub zq: Vec<f64>,
    /// `mean((z' - sg(z))^2)`; pulls codes toward encoder outputs.
    pub codebook_loss: f64,
    /// `mean((z - sg(z'))^2)`; same value, gradient reaches the encoder.
    pub commitment_loss: f64,
    /// `||z - z_hat||` after each scale.
    pub residual_norms: Vec<f64>,
}

fn residual_quantize(
    z: &[f64],
    ops: &ScaleOps,
    dim: usize,
    mut quantize: impl FnMut(&[f64]) -> (Vec<u32>, Vec<f64>),
) -> Result<QuantizeResult> {
    let n = ops.grid * ops.grid;
    if z.len() != n * dim {
        return shape_err(format!("latent has {} values, expected {n}x{dim}", z.len()));
    }
    let mut zhat = vec![0.0; n * dim];
    let mut residual = z.to_vec();
    let mut grids = Vec::new();
    let mut norms = Vec::new();
    for (s, &k) in ops.schedule.iter().enumerate() {
        let down = matmul_plain(&ops.down[s], &residual, k * k, n, dim);
        let (idx, q) = quantize(&down);
        let up = matmul_plain(&ops.up[s], &q, n, k * k, dim);
        for i in 0..n * dim {
            zhat[i] += up[i];
            residual[i] = z[i] - zhat[i];
        }
        norms.push(residual.iter().map(|r| r * r).sum::<f64>().sqrt());
        grids.push(idx);
    }
    let mse = residual.iter().map(|r| r * r).sum::<f64>() / residual.len() as f64;
    Ok(QuantizeResult {
        tokens: MultiScaleTokenMap::new(ops.schedule.clone(), grids)?,
        zq: zhat,
        codebook_loss: mse,
        commitment_loss: mse,
        residual_norms: norms,
    })
}

/// Residual coarse-to-fine quantization with one shared codebook.
pub fn multiscale_quantize(z: &[f64], codebook: &[f64], dim: usize, ops: &ScaleOps) -> Result<QuantizeResult> {
    if dim == 0 || codebook.is_empty() || !codebook.len().is_multiple_of(dim) {
        return shape_err(format!("codebook of {} values for code_dim {dim}", codebook.len()));
    }
    residual_quantize(z, ops, dim, |v| quantize_nearest(v, codebook, dim))
}

/// Same procedure with a pass-through quantizer (all indices 0).
pub fn multiscale_quantize_identity(z: &[f64], dim: usize, ops: &ScaleOps) -> Result<QuantizeResult> {
    residual_quantize(z, ops, dim, |v| (vec![0; v.len() / dim], v.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_row_and_tie_rule() {
        let cb = [0.0, 0.0, 1.0, 0.0, 5.0, 5.0, -1.0, 2.0, 3.0, 0.0];
        let (i, q) = quantize_nearest(&[-1.0, 2.0], &cb, 2);
        assert_eq!((i[0], q), (3, vec![-1.0, 2.0]));
        // (2, 0) is distance 1 from row 1 (1,0) and row 4 (3,0)
        let (i, _) = quantize_nearest(&[2.0, 0.0], &cb, 2);
        assert_eq!(i[0], 1);
    }

    #[test]
    fn resampling_matrices() {
        let a = area_matrix(2, 4);
        let ones = vec![1.0; 16];
        assert_eq!(matmul_plain(&a, &ones, 4, 16, 1), vec![1.0; 4]);
        let u = bilinear_matrix(2, 4);
        let c = matmul_plain(&u, &[3.0; 4], 16, 4, 1);
        assert!(c.iter().all(|&v| (v - 3.0).abs() < 1e-15));
        for n in [1, 2, 4, 8] {
            let id = bilinear_matrix(n, n);
            for r in 0..n * n {
                for c in 0..n * n {
                    assert_eq!(id[r * n * n + c], if r == c { 1.0 } else { 0.0 });
                }
            }
        }
        // 1-D weights from 2 to 4: 0.25-spaced half-pixel grid
        let u1 = linear_weights(2, 4);
        assert_eq!(u1[1], [(0, 0.75), (1, 0.25)]);
        assert_eq!(u1[0], [(0, 1.0), (1, 0.0)]);
    }

    #[test]
    fn single_scale_equals_plain_quantization() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z: Vec<f64> = (0..16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cb: Vec<f64> = (0..8 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ops = ScaleOps::new(&[4], 4).unwrap();
        let r = multiscale_quantize(&z, &cb, 3, &ops).unwrap();
        let (i, q) = quantize_nearest(&z, &cb, 3);
        assert_eq!(r.tokens.grids[0], i);
        assert_eq!(r.zq, q);
    }

    #[test]
    fn identity_quantizer_telescopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z: Vec<f64> = (0..64 * 4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let ops = ScaleOps::new(&[1, 2, 4, 8], 8).unwrap();
        let r = multiscale_quantize_identity(&z, 4, &ops).unwrap();
        for (a, b) in r.zq.iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(*r.residual_norms.last().unwrap() < 1e-11);
    }

    #[test]
    fn two_scale_hand_trace() {
        // K = 2, schedule {1, 2}, V = 4, dim 1
        let z = [1.0, 3.0, 2.0, 6.0];
        let cb = [0.0, 3.0, -1.0, 1.0];
        let ops = ScaleOps::new(&[1, 2], 2).unwrap();
        let r = multiscale_quantize(&z, &cb, 1, &ops).unwrap();
        // scale 1: mean 3 -> code 1 (3.0); z_hat = 3 everywhere
        // residual {-2, 0, -1, 3} -> codes {2, 0, 2, 1}
        assert_eq!(r.tokens.grids, vec![vec![1], vec![2, 0, 2, 1]]);
        assert_eq!(r.zq, vec![2.0, 3.0, 2.0, 6.0]);
        assert_eq!(r.codebook_loss, 0.25);
    }
}
