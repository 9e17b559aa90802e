use super::EmbeddingSet;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Sample mean and unbiased (n - 1) covariance, symmetrised.
pub fn gaussian_stats(e: &EmbeddingSet) -> Result<GaussianStats> {
    if e.n < 2 {
        return Err(Error::InvalidInput(format!("gaussian stats need at least 2 samples, got {}", e.n)));
    }
    let d = e.d;
    let mut mean = DVector::zeros(d);
    for r in e.rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean /= e.n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in e.rows() {
        let c = DVector::from_iterator(d, r.iter().zip(mean.iter()).map(|(v, m)| v - m));
        cov += &c * c.transpose();
    }
    cov /= (e.n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov })
}

/// Symmetric square root through the eigendecomposition; eigenvalues down
/// to -1e-8 are treated as zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::Shape(format!("psd_sqrt of a {}x{} matrix", a.nrows(), a.ncols())));
    }
    let scale = a.amax().max(1.0);
    if (a - a.transpose()).amax() > 1e-9 * scale {
        return Err(Error::InvalidInput("psd_sqrt input is not symmetric".into()));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if let Some(min) = eig.eigenvalues.iter().cloned().reduce(f64::min) {
        if min < -1e-8 * scale {
            return Err(Error::Numerical(format!("matrix has eigenvalue {min:e} < 0")));
        }
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let s = v * DMatrix::from_diagonal(&roots) * v.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`, clamped at 0.
/// Identical statistics give exactly 0.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Shape(format!(
            "gaussian dimensions differ: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    if a == b {
        return Ok(0.0);
    }
    let ra = psd_sqrt(&a.cov)?;
    let inner = &ra * &b.cov * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = psd_sqrt(&inner)?;
    let diff = (&a.mean - &b.mean).norm_squared();
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace()).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(n: usize, d: usize, seed: u64) -> EmbeddingSet {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingSet::new(n, d, (0..n * d).map(|_| r.random_range(-2.0..2.0)).collect(), "t").unwrap()
    }

    fn stats(mean: &[f64], cov: &[f64]) -> GaussianStats {
        let d = mean.len();
        GaussianStats {
            mean: DVector::from_column_slice(mean),
            cov: DMatrix::from_row_slice(d, d, cov),
        }
    }

    #[test]
    fn stats_hand_cases() {
        let s = gaussian_stats(&EmbeddingSet::new(2, 1, vec![0.0, 2.0], "t").unwrap()).unwrap();
        assert_eq!(s.mean[0], 1.0);
        assert_eq!(s.cov[(0, 0)], 2.0);
        let same = gaussian_stats(&EmbeddingSet::new(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0], "t").unwrap()).unwrap();
        assert!(same.cov.iter().all(|&v| v == 0.0));
        assert!(gaussian_stats(&EmbeddingSet::new(1, 2, vec![0.0, 0.0], "t").unwrap()).is_err());
    }

    #[test]
    fn stats_match_two_pass_formula() {
        let e = random_set(50, 4, 1);
        let s = gaussian_stats(&e).unwrap();
        for i in 0..4 {
            let mi: f64 = (0..50).map(|r| e.row(r)[i]).sum::<f64>() / 50.0;
            assert!((s.mean[i] - mi).abs() < 1e-12);
            for j in 0..4 {
                let mj: f64 = (0..50).map(|r| e.row(r)[j]).sum::<f64>() / 50.0;
                let c: f64 = (0..50).map(|r| (e.row(r)[i] - mi) * (e.row(r)[j] - mj)).sum::<f64>() / 49.0;
                assert!((s.cov[(i, j)] - c).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn square_roots() {
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert!((psd_sqrt(&i3).unwrap() - &i3).amax() < 1e-15);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let s = psd_sqrt(&d).unwrap();
        assert!((s - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).amax() < 1e-14);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let b = DMatrix::from_fn(5, 5, |_, _| r.random_range(-1.0..1.0));
        let a = b.transpose() * &b;
        let s = psd_sqrt(&a).unwrap();
        assert!((&s * &s - &a).norm() / a.norm() < 1e-8);
        assert!(psd_sqrt(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0])).is_err());
    }

    #[test]
    fn frechet_closed_forms() {
        let a = stats(&[0.0], &[1.0]);
        let b = stats(&[1.0], &[1.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-14);
        // (mu1 - mu2)^2 + (sigma1 - sigma2)^2
        let c = stats(&[0.5], &[4.0]);
        assert!((frechet_distance(&a, &c).unwrap() - 1.25).abs() < 1e-14);
        let e = gaussian_stats(&random_set(30, 3, 3)).unwrap();
        assert_eq!(frechet_distance(&e, &e).unwrap(), 0.0);
        assert!(frechet_distance(&a, &e).is_err());
    }

    /// sqrt(S_a S_b) by Denman-Beavers iteration, an independent route to
    /// the cross term.
    fn denman_beavers(m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = m.clone();
        let mut z = DMatrix::identity(m.nrows(), m.ncols());
        for _ in 0..100 {
            let yi = y.clone().try_inverse().unwrap();
            let zi = z.clone().try_inverse().unwrap();
            let ny = (&y + zi) * 0.5;
            let nz = (&z + yi) * 0.5;
            y = ny;
            z = nz;
        }
        y
    }

    #[test]
    fn frechet_matches_independent_evaluation() {
        let a = gaussian_stats(&random_set(20, 3, 4)).unwrap();
        let b = gaussian_stats(&random_set(25, 3, 5)).unwrap();
        let cross = denman_beavers(&(&a.cov * &b.cov)).trace();
        let want = (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
        let got = frechet_distance(&a, &b).unwrap();
        assert!(((got - want) / want).abs() < 1e-8, "{got} vs {want}");
        let back = frechet_distance(&b, &a).unwrap();
        assert!((got - back).abs() < 1e-8);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn frechet_symmetric_and_order_free(seed in 0u64..10_000, n in 4usize..20) {
            let a = random_set(n, 3, seed);
            let b = random_set(n + 3, 3, seed + 1);
            let (sa, sb) = (gaussian_stats(&a).unwrap(), gaussian_stats(&b).unwrap());
            let f = frechet_distance(&sa, &sb).unwrap();
            proptest::prop_assert!(f >= 0.0);
            proptest::prop_assert!((f - frechet_distance(&sb, &sa).unwrap()).abs() < 1e-8);
            proptest::prop_assert_eq!(frechet_distance(&sa, &sa).unwrap(), 0.0);
            let mut rows: Vec<Vec<f64>> = a.rows().map(<[f64]>::to_vec).collect();
            rows.rotate_left(n / 2);
            let rotated = gaussian_stats(&EmbeddingSet::from_rows(&rows, "t").unwrap()).unwrap();
            proptest::prop_assert!((frechet_distance(&rotated, &sb).unwrap() - f).abs() < 1e-8);
        }
    }
}
