//! Least squares through a Householder QR with column pivoting on norms.

use crate::error::{Error, Result};

pub const PIVOT_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct OlsFit {
    /// One entry per input column; `NaN` for dropped columns.
    pub beta: Vec<f64>,
    /// Retained columns, ascending.
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
    pub residuals: Vec<f64>,
    /// `(X'X)⁻¹` over the retained columns, in `kept` order, row-major.
    pub xtx_inv: Vec<Vec<f64>>,
}

impl OlsFit {
    pub fn rss(&self) -> f64 {
        self.residuals.iter().map(|e| e * e).sum()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `min ‖y − Xβ‖` with `X` given as columns. Columns whose pivot falls
/// below `PIVOT_TOL` relative to the leading pivot are dropped.
pub fn ols(columns: &[Vec<f64>], y: &[f64]) -> Result<OlsFit> {
    let k = columns.len();
    let n = y.len();
    if k == 0 {
        return Err(Error::NotEstimable("no regressors".into()));
    }
    if columns.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidInput("regressor length differs from outcome length".into()));
    }

    let mut a: Vec<Vec<f64>> = columns.to_vec();
    let mut qty = y.to_vec();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut diag = Vec::with_capacity(k);
    let steps = n.min(k);

    for i in 0..steps {
        let (p, _) = (i..k)
            .map(|j| (j, dot(&a[j][i..], &a[j][i..])))
            .fold((i, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        a.swap(i, p);
        perm.swap(i, p);

        let norm = dot(&a[i][i..], &a[i][i..]).sqrt();
        if norm == 0.0 {
            break;
        }
        let alpha = if a[i][i] > 0.0 { -norm } else { norm };
        let mut v = a[i][i..].to_vec();
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);
        if vnorm2 > 0.0 {
            for col in a.iter_mut().skip(i + 1) {
                let f = 2.0 * dot(&v, &col[i..]) / vnorm2;
                col[i..].iter_mut().zip(&v).for_each(|(c, vi)| *c -= f * vi);
            }
            let f = 2.0 * dot(&v, &qty[i..]) / vnorm2;
            qty[i..].iter_mut().zip(&v).for_each(|(c, vi)| *c -= f * vi);
        }
        a[i][i] = alpha;
        diag.push(alpha);
    }

    let lead = diag.first().map_or(0.0, |d| d.abs());
    let rank = diag.iter().take_while(|d| lead > 0.0 && d.abs() > PIVOT_TOL * lead).count();
    if rank == 0 {
        return Err(Error::NotEstimable("all regressors are zero or collinear".into()));
    }
    if n <= rank {
        return Err(Error::InsufficientData { needed: rank + 1, got: n });
    }

    // R[i][j] = a[j][i] for i ≤ j < rank
    let r = |i: usize, j: usize| a[j][i];
    let mut bp = vec![0.0; rank];
    for i in (0..rank).rev() {
        let s: f64 = (i + 1..rank).map(|j| r(i, j) * bp[j]).sum();
        bp[i] = (qty[i] - s) / r(i, i);
    }
    // R⁻¹, upper triangular
    let mut rinv = vec![vec![0.0; rank]; rank];
    for j in 0..rank {
        rinv[j][j] = 1.0 / r(j, j);
        for i in (0..j).rev() {
            let s: f64 = (i + 1..=j).map(|m| r(i, m) * rinv[m][j]).sum();
            rinv[i][j] = -s / r(i, i);
        }
    }

    let mut order: Vec<usize> = (0..rank).collect();
    order.sort_by_key(|&i| perm[i]);
    let kept: Vec<usize> = order.iter().map(|&i| perm[i]).collect();
    let mut dropped: Vec<usize> = perm[rank..].to_vec();
    dropped.sort_unstable();

    let mut beta = vec![f64::NAN; k];
    for i in 0..rank {
        beta[perm[i]] = bp[i];
    }
    let mut residuals = y.to_vec();
    for &j in &kept {
        let b = beta[j];
        residuals.iter_mut().zip(&columns[j]).for_each(|(e, x)| *e -= b * x);
    }
    // (R'R)⁻¹ = R⁻¹ R⁻ᵀ
    let xtx_inv = order
        .iter()
        .map(|&p| {
            order
                .iter()
                .map(|&q| (p.max(q)..rank).map(|m| rinv[p][m] * rinv[q][m]).sum())
                .collect()
        })
        .collect();

    Ok(OlsFit { beta, kept, dropped, residuals, xtx_inv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn exact_line() {
        let x = vec![vec![1.0, 2.0, 3.0, 4.0]];
        let y = vec![2.0, 4.0, 6.0, 8.0];
        let fit = ols(&x, &y).unwrap();
        assert!((fit.beta[0] - 2.0).abs() < 1e-14);
        assert!(fit.residuals.iter().all(|e| e.abs() < 1e-13));
        assert!((fit.xtx_inv[0][0] - 1.0 / 30.0).abs() < 1e-15);
    }

    #[test]
    fn duplicate_column_dropped() {
        let c = vec![1.0, 0.0, 2.0, 5.0, 3.0];
        let d = vec![0.5, 1.0, 1.0, 0.0, 2.0];
        let y = vec![1.0, 2.0, 0.0, 4.0, 3.0];
        let fit = ols(&[c.clone(), d, c], &y).unwrap();
        assert_eq!(fit.kept.len(), 2);
        assert_eq!(fit.dropped.len(), 1);
        assert!(fit.beta[fit.dropped[0]].is_nan());
    }

    #[test]
    fn zero_columns_not_estimable() {
        assert!(matches!(ols(&[vec![0.0; 4]], &[1.0, 2.0, 3.0, 4.0]), Err(Error::NotEstimable(_))));
        assert!(matches!(ols(&[], &[1.0]), Err(Error::NotEstimable(_))));
    }

    fn solve_normal_equations(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
        // Gauss-Jordan on X'X | X'y
        let k = x.len();
        let mut m: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                let mut row: Vec<f64> = (0..k).map(|j| dot(&x[i], &x[j])).collect();
                row.push(dot(&x[i], y));
                row
            })
            .collect();
        for c in 0..k {
            let p = (c..k).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())).unwrap();
            m.swap(c, p);
            for r in 0..k {
                if r != c {
                    let f = m[r][c] / m[c][c];
                    for j in c..=k {
                        m[r][j] -= f * m[c][j];
                    }
                }
            }
        }
        (0..k).map(|i| m[i][k] / m[i][i]).collect()
    }

    #[test]
    fn matches_normal_equations() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.random_range(20..80);
            let k = rng.random_range(1..6);
            let x: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let fit = ols(&x, &y).unwrap();
            let oracle = solve_normal_equations(&x, &y);
            for (b, o) in fit.beta.iter().zip(&oracle) {
                assert!((b - o).abs() < 1e-9);
            }
            // X'e = 0
            for c in &x {
                assert!(dot(c, &fit.residuals).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn inverse_is_inverse() {
        let x = vec![vec![1.0, 2.0, 0.0, 1.0, 3.0], vec![0.0, 1.0, 1.0, 4.0, 2.0]];
        let fit = ols(&x, &[1.0, 0.0, 2.0, 1.0, 0.5]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let v: f64 = (0..2).map(|m| dot(&x[i], &x[m]) * fit.xtx_inv[m][j]).sum();
                assert!((v - f64::from(u8::from(i == j))).abs() < 1e-12);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn residuals_orthogonal_to_kept_columns(
            rows in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 6..40)
        ) {
            let x1: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let x2: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let x3: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a - 2.0 * b).collect();
            let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let cols = vec![vec![1.0; rows.len()], x1, x2, x3];
            let Ok(f) = ols(&cols, &y) else { return Ok(()) };
            proptest::prop_assert!(f.kept.len() <= 3);
            let scale = 1.0 + y.iter().map(|v| v.abs()).sum::<f64>();
            for &k in &f.kept {
                proptest::prop_assert!(dot(&cols[k], &f.residuals).abs() < 1e-8 * scale * rows.len() as f64);
            }
        }
    }
}

