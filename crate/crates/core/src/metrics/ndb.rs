use super::EmbeddingSet;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

const MAX_ITERS: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest centroid, lowest index on ties.
fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, m) in centroids.iter().enumerate() {
        let d = sq_dist(x, m);
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

/// Lloyd's k-means with k-means++ seeding. Returns the centroids.
pub fn kmeans(e: &EmbeddingSet, k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if k == 0 || e.n < k {
        return Err(Error::InvalidInput(format!("k-means with k = {k} on {} points", e.n)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![e.row(rng.random_range(0..e.n)).to_vec()];
    let mut d2: Vec<f64> = e.rows().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut idx = e.n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..e.n)
        };
        let c = e.row(pick).to_vec();
        for (d, r) in d2.iter_mut().zip(e.rows()) {
            *d = d.min(sq_dist(r, &c));
        }
        centroids.push(c);
    }
    let mut assign = vec![usize::MAX; e.n];
    for _ in 0..MAX_ITERS {
        let next: Vec<usize> = (0..e.n).into_par_iter().map(|i| nearest(e.row(i), &centroids)).collect();
        if next == assign {
            break;
        }
        assign = next;
        let mut sums = vec![vec![0.0; e.d]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(e.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            // empty clusters keep their previous centroid
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Ok(centroids)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NdbBin {
    pub train_count: usize,
    pub eval_count: usize,
    pub z: f64,
    pub different: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NdbResult {
    pub ndb: usize,
    pub ndb_over_k: f64,
    pub bins: Vec<NdbBin>,
}

/// Number of statistically different bins. Bins come from k-means on the
/// training set, which is first put in canonical row order so the result
/// does not depend on sample order.
pub fn ndb(train: &EmbeddingSet, eval: &EmbeddingSet, k: usize, alpha: f64, seed: u64) -> Result<NdbResult> {
    train.check_pair(eval)?;
    if k < 2 {
        return Err(Error::InvalidInput(format!("ndb needs k >= 2, got {k}")));
    }
    if eval.n == 0 {
        return Err(Error::InvalidInput("ndb evaluation set is empty".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("significance level {alpha} outside (0, 1)")));
    }
    let canonical = train.canonical();
    let centroids = kmeans(&canonical, k, seed)?;

    let mut train_counts = vec![0usize; k];
    let mut eval_counts = vec![0usize; k];
    for r in canonical.rows() {
        train_counts[nearest(r, &centroids)] += 1;
    }
    for r in eval.rows() {
        eval_counts[nearest(r, &centroids)] += 1;
    }
    let threshold = Normal::new(0.0, 1.0)
        .map_err(|e| Error::Numerical(e.to_string()))?
        .inverse_cdf(1.0 - alpha / 2.0);
    let (nt, ne) = (train.n as f64, eval.n as f64);
    let bins: Vec<NdbBin> = (0..k)
        .map(|c| {
            let (a, b) = (train_counts[c] as f64, eval_counts[c] as f64);
            let (pt, pe) = (a / nt, b / ne);
            let pooled = (a + b) / (nt + ne);
            let se = (pooled * (1.0 - pooled) * (1.0 / nt + 1.0 / ne)).sqrt();
            let z = if se > 0.0 { (pe - pt) / se } else { 0.0 };
            NdbBin {
                train_count: train_counts[c],
                eval_count: eval_counts[c],
                z,
                different: z.abs() > threshold,
            }
        })
        .collect();
    let ndb = bins.iter().filter(|b| b.different).count();
    Ok(NdbResult {
        ndb,
        ndb_over_k: ndb as f64 / k as f64,
        bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand_distr::StandardNormal;

    fn clusters(centres: &[(f64, usize)], seed: u64) -> EmbeddingSet {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        for &(c, n) in centres {
            for _ in 0..n {
                data.push(c + 0.1 * r.sample::<f64, _>(StandardNormal));
                data.push(c + 0.1 * r.sample::<f64, _>(StandardNormal));
            }
        }
        let n = data.len() / 2;
        EmbeddingSet::new(n, 2, data, "t").unwrap()
    }

    #[test]
    fn same_set_has_no_different_bins() {
        let t = clusters(&[(0.0, 40), (5.0, 40), (10.0, 20)], 1);
        let r = ndb(&t, &t, 10, 0.05, 0).unwrap();
        assert_eq!(r.ndb, 0);
        assert_eq!(r.bins.iter().map(|b| b.train_count).sum::<usize>(), 100);
    }

    #[test]
    fn two_cluster_fixture() {
        let train = clusters(&[(0.0, 50), (20.0, 50)], 2);
        let eval = clusters(&[(0.0, 50)], 3);
        let r = ndb(&train, &eval, 2, 0.05, 0).unwrap();
        assert_eq!(r.ndb_over_k, 1.0);
        // moving eval mass back to the second cluster lowers the score
        let mut last = f64::INFINITY;
        for moved in [0, 10, 20, 25] {
            let e = clusters(&[(0.0, 50 - moved), (20.0, moved)], 4);
            let zs: f64 = ndb(&train, &e, 2, 0.05, 0).unwrap().bins.iter().map(|b| b.z.abs()).sum();
            assert!(zs < last);
            last = zs;
        }
    }

    #[test]
    fn kmeans_finds_separated_centres() {
        let e = clusters(&[(0.0, 30), (10.0, 30), (-10.0, 30)], 5);
        let mut c = kmeans(&e, 3, 9).unwrap();
        c.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for (got, want) in c.iter().zip([-10.0, 0.0, 10.0]) {
            assert!((got[0] - want).abs() < 0.1 && (got[1] - want).abs() < 0.1);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let t = clusters(&[(0.0, 5)], 1);
        assert!(ndb(&t, &t, 1, 0.05, 0).is_err());
        assert!(ndb(&t, &t, 6, 0.05, 0).is_err());
        let empty = EmbeddingSet::new(0, 2, vec![], "t").unwrap();
        assert!(ndb(&t, &empty, 2, 0.05, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn order_invariant_and_bounded(seed in 0u64..1000, shift in 0.0f64..4.0) {
            let train = clusters(&[(0.0, 20), (3.0, 20), (6.0, 20)], seed);
            let eval = clusters(&[(shift, 30)], seed + 1);
            let a = ndb(&train, &eval, 5, 0.05, 7).unwrap();
            let mut rows: Vec<Vec<f64>> = train.rows().map(<[f64]>::to_vec).collect();
            rows.reverse();
            rows.swap(0, 17);
            let shuffled = EmbeddingSet::from_rows(&rows, "t").unwrap();
            let mut erows: Vec<Vec<f64>> = eval.rows().map(<[f64]>::to_vec).collect();
            erows.reverse();
            let eshuffled = EmbeddingSet::from_rows(&erows, "t").unwrap();
            let b = ndb(&shuffled, &eshuffled, 5, 0.05, 7).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!((0.0..=1.0).contains(&a.ndb_over_k));
        }
    }
}
