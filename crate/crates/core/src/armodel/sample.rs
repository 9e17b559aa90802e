use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingParams {
    /// 0 selects the argmax.
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 64,
            top_p: 1.0,
        }
    }
}

impl SamplingParams {
    pub fn greedy() -> Self {
        Self {
            temperature: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::InvalidInput(format!("temperature {} must be >= 0", self.temperature)));
        }
        if self.top_k < 1 {
            return Err(Error::InvalidInput("top_k must be at least 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidInput(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        Ok(())
    }
}

fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Draws one index from `softmax(logits / temperature)` restricted to the
/// `top_k` largest logits and then to the smallest prefix whose mass
/// reaches `top_p`. Ties rank the lower index first.
pub fn sample_index(logits: &[f64], p: &SamplingParams, rng: &mut impl Rng) -> Result<usize> {
    p.validate()?;
    if logits.is_empty() || logits.iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical("cannot sample from empty or NaN logits".into()));
    }
    if p.temperature == 0.0 || p.top_k == 1 {
        return Ok(argmax(logits));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(p.top_k.min(logits.len()));
    let top = logits[order[0]];
    let mut w: Vec<f64> = order.iter().map(|&i| ((logits[i] - top) / p.temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    if p.top_p < 1.0 {
        let mut cum = 0.0;
        let mut keep = w.len();
        for (n, v) in w.iter().enumerate() {
            cum += v / total;
            if cum >= p.top_p {
                keep = n + 1;
                break;
            }
        }
        w.truncate(keep);
    }
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (n, v) in w.iter().enumerate() {
        if u < *v {
            return Ok(order[n]);
        }
        u -= v;
    }
    Ok(order[w.len() - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn greedy_and_top1_agree() {
        let l = [0.1, 2.0, 2.0, -1.0];
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_index(&l, &SamplingParams::greedy(), &mut r).unwrap(), 1);
        let top1 = SamplingParams {
            top_k: 1,
            ..Default::default()
        };
        assert_eq!(sample_index(&l, &top1, &mut r).unwrap(), 1);
    }

    #[test]
    fn frequencies_follow_softmax() {
        let l = [0.0, 1.0f64.ln(), 2.0f64.ln(), f64::NEG_INFINITY];
        let p = SamplingParams {
            top_k: 4,
            ..Default::default()
        };
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 4];
        for _ in 0..40000 {
            counts[sample_index(&l, &p, &mut r).unwrap()] += 1;
        }
        // weights 1 : 1 : 2 : 0
        assert_eq!(counts[3], 0);
        assert!((counts[2] as f64 / 40000.0 - 0.5).abs() < 0.01);
        assert!((counts[0] as f64 / 40000.0 - 0.25).abs() < 0.01);
    }

    #[test]
    fn truncation_rules() {
        let l = [3.0, 2.0, 1.0, 0.0];
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let k2 = SamplingParams {
            top_k: 2,
            ..Default::default()
        };
        let nucleus = SamplingParams {
            top_p: 0.5,
            ..Default::default()
        };
        for _ in 0..500 {
            assert!(sample_index(&l, &k2, &mut r).unwrap() < 2);
            assert_eq!(sample_index(&l, &nucleus, &mut r).unwrap(), 0);
        }
    }

    #[test]
    fn invalid_parameters() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        for p in [
            SamplingParams { top_k: 0, ..Default::default() },
            SamplingParams { top_p: 0.0, ..Default::default() },
            SamplingParams { top_p: 1.5, ..Default::default() },
            SamplingParams { temperature: -1.0, ..Default::default() },
        ] {
            assert!(sample_index(&[0.0, 1.0], &p, &mut r).is_err());
        }
    }
}
