//! Cluster-robust sandwich variance, one-way and two-way.

use nalgebra::{DMatrix, SymmetricEigen};

use super::fe::Grouping;
use crate::error::{Error, Result};

/// `Σ_g s_g s_gᵀ` with `s_g = Σ_{i∈g} x_i u_i`.
pub fn meat(x: &[&[f64]], residuals: &[f64], clusters: &Grouping) -> DMatrix<f64> {
    let p = x.len();
    let mut scores = DMatrix::<f64>::zeros(clusters.n_groups(), p);
    for (j, col) in x.iter().enumerate() {
        for ((&g, xi), u) in clusters.ids().iter().zip(col.iter()).zip(residuals) {
            scores[(g as usize, j)] += xi * u;
        }
    }
    scores.transpose() * scores
}

/// One-way cluster-robust variance with CR1 scaling
/// `G/(G−1) · (N−1)/(N−K)`, where `k` counts every estimated parameter.
pub fn cluster_vcov(
    x: &[&[f64]],
    residuals: &[f64],
    xtx_inv: &DMatrix<f64>,
    clusters: &Grouping,
    k: usize,
) -> Result<DMatrix<f64>> {
    let g = clusters.n_groups();
    if g < 2 {
        return Err(Error::SingleCluster(g));
    }
    let n = residuals.len();
    if n <= k {
        return Err(Error::InsufficientData { needed: k + 1, got: n });
    }
    let scale = (g as f64 / (g as f64 - 1.0)) * ((n as f64 - 1.0) / (n - k) as f64);
    let m = meat(x, residuals, clusters);
    let v = xtx_inv * m * xtx_inv * scale;
    Ok(symmetrize(v))
}

fn symmetrize(v: DMatrix<f64>) -> DMatrix<f64> {
    (&v + v.transpose()) * 0.5
}

/// Two-way clustering by inclusion–exclusion, `V_A + V_B − V_{A∩B}`.
/// Negative eigenvalues of the result are set to zero.
pub fn twoway_vcov(
    x: &[&[f64]],
    residuals: &[f64],
    xtx_inv: &DMatrix<f64>,
    a: &Grouping,
    b: &Grouping,
    k: usize,
) -> Result<DMatrix<f64>> {
    let va = cluster_vcov(x, residuals, xtx_inv, a, k)?;
    if a.same_partition(b) {
        return Ok(va);
    }
    let vb = cluster_vcov(x, residuals, xtx_inv, b, k)?;
    let ab = a.intersect(b);
    let vab = if ab.same_partition(b) { vb.clone() } else { cluster_vcov(x, residuals, xtx_inv, &ab, k)? };
    let v = va + (vb - vab);
    Ok(psd_floor(v))
}

pub fn psd_floor(v: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(v.clone());
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return v;
    }
    let floored = eig.eigenvalues.map(|l| l.max(0.0));
    let q = &eig.eigenvectors;
    symmetrize(q * DMatrix::from_diagonal(&floored) * q.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn instance(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<f64>, DMatrix<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..2).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xtx = DMatrix::from_fn(2, 2, |i, j| x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum());
        (x, u, xtx.try_inverse().unwrap())
    }

    #[test]
    fn singleton_clusters_give_hc1() {
        let n = 40;
        let (x, u, inv) = instance(1, n);
        let xs: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
        let v = cluster_vcov(&xs, &u, &inv, &Grouping::singletons(n), 2).unwrap();
        let mut m = DMatrix::zeros(2, 2);
        for i in 0..n {
            for r in 0..2 {
                for c in 0..2 {
                    m[(r, c)] += x[r][i] * x[c][i] * u[i] * u[i];
                }
            }
        }
        let hc1 = &inv * m * &inv * (n as f64 / (n - 2) as f64);
        assert!((v - hc1).abs().max() < 1e-14);
    }

    #[test]
    fn same_dimension_is_oneway() {
        let n = 30;
        let (x, u, inv) = instance(2, n);
        let xs: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
        let g = Grouping::from_keys((0..n).map(|i| i % 7));
        let one = cluster_vcov(&xs, &u, &inv, &g, 2).unwrap();
        let two = twoway_vcov(&xs, &u, &inv, &g, &g.clone(), 2).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn single_cluster_rejected() {
        let (x, u, inv) = instance(3, 10);
        let xs: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
        assert!(matches!(cluster_vcov(&xs, &u, &inv, &Grouping::single(10), 2), Err(Error::SingleCluster(1))));
    }

    #[test]
    fn floor_repairs_indefinite() {
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let f = psd_floor(v);
        let eig = SymmetricEigen::new(f);
        assert!(eig.eigenvalues.iter().all(|&l| l > -1e-12));
    }
}
