use super::ClassProbMatrix;
use crate::error::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

/// `exp(mean_i KL(p_i || p_bar))`, with `0 log 0 = 0`.
pub fn inception_score(p: &ClassProbMatrix) -> f64 {
    let mut marginal = vec![0.0; p.classes];
    for i in 0..p.n {
        for (m, v) in marginal.iter_mut().zip(p.row(i)) {
            *m += v;
        }
    }
    marginal.iter_mut().for_each(|m| *m /= p.n as f64);
    let kl: f64 = (0..p.n)
        .map(|i| {
            p.row(i)
                .iter()
                .zip(&marginal)
                .filter(|(&q, _)| q > 0.0)
                .map(|(&q, &m)| q * (q / m).ln())
                .sum::<f64>()
        })
        .sum();
    (kl / p.n as f64).exp()
}

fn check_pairs(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::InvalidInput("no mel spectrograms to compare".into()));
    }
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} reference vs {} estimated items", a.len(), b.len())));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.len() != y.len() {
            return Err(Error::Shape(format!("item {i}: {} vs {} mel values", x.len(), y.len())));
        }
    }
    Ok(())
}

fn pair_error(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (mut se, mut ae) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        se += d * d;
        ae += d.abs();
    }
    (se, ae)
}

/// Element-wise MSE and MAE over every value of every pair.
pub fn spectro_error(reference: &[Vec<f64>], estimate: &[Vec<f64>]) -> Result<(f64, f64)> {
    check_pairs(reference, estimate)?;
    let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
    for (a, b) in reference.iter().zip(estimate) {
        for (x, y) in a.iter().zip(b) {
            let d = x - y;
            se += d * d;
            ae += d.abs();
        }
        count += a.len();
    }
    Ok((se / count as f64, ae / count as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NearestNeighborError {
    pub mse: f64,
    pub mae: f64,
    pub matches: Vec<usize>,
}

/// Matches each generated mel to the test mel with the lowest MSE (lowest
/// index on ties) and averages the errors of the matched pairs.
pub fn nearest_neighbor_error(generated: &[Vec<f64>], test: &[Vec<f64>]) -> Result<NearestNeighborError> {
    if generated.is_empty() || test.is_empty() {
        return Err(Error::InvalidInput("nearest-neighbour error needs non-empty sets".into()));
    }
    let len = test[0].len();
    if let Some(bad) = generated.iter().chain(test).find(|m| m.len() != len) {
        return Err(Error::Shape(format!("mel of {} values, expected {len}", bad.len())));
    }
    let found: Vec<(usize, f64, f64)> = generated
        .par_iter()
        .map(|g| {
            let mut best = (0, f64::INFINITY, 0.0);
            for (j, t) in test.iter().enumerate() {
                let (se, ae) = pair_error(g, t);
                if se < best.1 {
                    best = (j, se, ae);
                }
            }
            best
        })
        .collect();
    let n = (generated.len() * len) as f64;
    Ok(NearestNeighborError {
        mse: found.iter().map(|f| f.1).sum::<f64>() / n,
        mae: found.iter().map(|f| f.2).sum::<f64>() / n,
        matches: found.iter().map(|f| f.0).collect(),
    })
}
