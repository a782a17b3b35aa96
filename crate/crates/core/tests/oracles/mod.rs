//! Independent reference computations for the acceptance suite. Nothing here
//! calls into the library's numerical code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use std::f64::consts::PI;

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, eps: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * eps {
        return left + right + delta / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, eps: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson(f, a, b, fa, fm, fb, whole, eps, 50)
}

/// Upper tail `P(T > x)` of Student's t for `x ≥ 0` and `ν ≥ 1`.
///
/// With `t = √ν·tan θ` the density becomes proportional to `cos^{ν−1} θ` on
/// `[0, π/2)`, so the tail is a ratio of two integrals of that kernel and no
/// normalizing constant is needed.
pub fn t_upper_tail(x: f64, nu: f64) -> f64 {
    assert!(x >= 0.0 && nu >= 1.0);
    let kernel = |th: f64| th.cos().powf(nu - 1.0);
    let theta = (x / nu.sqrt()).atan();
    let total = integrate(&kernel, 0.0, PI / 2.0, 1e-14);
    let tail = integrate(&kernel, theta, PI / 2.0, 1e-14);
    0.5 * tail / total
}

/// `x` with `P(T > x) = tail`, for `tail < 0.5`, by bisection.
pub fn t_upper_quantile(tail: f64, nu: f64) -> f64 {
    assert!(tail > 0.0 && tail < 0.5);
    let mut lo = 0.0;
    let mut hi = 1.0;
    while t_upper_tail(hi, nu) > tail {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if t_upper_tail(mid, nu) > tail {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// ESD critical values `λ_1..λ_r` for a sample of `n`, from the quadrature
/// t quantile.
pub fn esd_lambdas(n: usize, r: usize, alpha: f64) -> Vec<f64> {
    (1..=r)
        .map(|i| {
            let p = alpha / (2.0 * (n - i + 1) as f64);
            let df = (n - i - 1) as f64;
            let t = t_upper_quantile(p, df);
            (n - i) as f64 * t / ((df + t * t) * (n - i + 1) as f64).sqrt()
        })
        .collect()
}

/// Textbook sequential generalized ESD: recompute mean and sample sd of
/// the remaining values, remove the most extreme, repeat once per critical
/// value. Returns the declared outliers in removal order.
pub fn generalized_esd(values: &[f64], lambdas: &[f64]) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..values.len()).collect();
    let mut removed = Vec::new();
    let mut declared = 0;
    for (i, &lambda) in (1..).zip(lambdas) {
        let m = remaining.len() as f64;
        let mean = remaining.iter().map(|&j| values[j]).sum::<f64>() / m;
        let sd = (remaining.iter().map(|&j| (values[j] - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
        let mut best = 0;
        for (pos, &j) in remaining.iter().enumerate() {
            if (values[j] - mean).abs() > (values[remaining[best]] - mean).abs() {
                best = pos;
            }
        }
        let idx = remaining.remove(best);
        let stat = (values[idx] - mean).abs() / sd;
        if stat > lambda {
            declared = i;
        }
        removed.push(idx);
    }
    removed.truncate(declared);
    removed
}

/// Least squares on explicit dummies: the regressors, one dummy per level of
/// the first factor and all but the first level of the second. Returns the
/// regressor coefficients.
pub fn dummy_ols(x: &[Vec<f64>], y: &[f64], f1: &[usize], f2: &[usize]) -> Vec<f64> {
    let n = y.len();
    let mut l1: Vec<usize> = f1.to_vec();
    l1.sort_unstable();
    l1.dedup();
    let mut l2: Vec<usize> = f2.to_vec();
    l2.sort_unstable();
    l2.dedup();
    let p = x.len() + l1.len() + l2.len() - 1;
    let mut m = DMatrix::<f64>::zeros(n, p);
    for i in 0..n {
        for (j, col) in x.iter().enumerate() {
            m[(i, j)] = col[i];
        }
        let a = l1.binary_search(&f1[i]).unwrap();
        m[(i, x.len() + a)] = 1.0;
        let b = l2.binary_search(&f2[i]).unwrap();
        if b > 0 {
            m[(i, x.len() + l1.len() + b - 1)] = 1.0;
        }
    }
    let sol = m.svd(true, true).solve(&DVector::from_column_slice(y), 1e-12).unwrap();
    sol.iter().take(x.len()).copied().collect()
}

fn count_levels<K: std::hash::Hash + Eq>(keys: impl Iterator<Item = K>) -> usize {
    keys.collect::<std::collections::HashSet<_>>().len()
}

/// Meat of a clustered sandwich by summing `u_i u_j x_i x_jᵀ` over every
/// pair of observations sharing a cluster.
pub fn pairwise_meat(x: &[Vec<f64>], u: &[f64], same: &dyn Fn(usize, usize) -> bool) -> DMatrix<f64> {
    let n = u.len();
    let p = x.len();
    let mut m = DMatrix::zeros(p, p);
    for i in 0..n {
        for j in 0..n {
            if !same(i, j) {
                continue;
            }
            let w = u[i] * u[j];
            for r in 0..p {
                for c in 0..p {
                    m[(r, c)] += w * x[r][i] * x[c][j];
                }
            }
        }
    }
    m
}

/// Two-way clustered variance by inclusion–exclusion over brute-force meat
/// matrices, CR1 scaled per dimension, with negative eigenvalues clipped.
pub fn cgm_vcov(x: &[Vec<f64>], u: &[f64], xtx_inv: &DMatrix<f64>, a: &[usize], b: &[usize], k: usize) -> DMatrix<f64> {
    let n = u.len() as f64;
    let scale = |g: usize| g as f64 / (g as f64 - 1.0) * (n - 1.0) / (n - k as f64);
    let ga = count_levels(a.iter());
    let gb = count_levels(b.iter());
    let gab = count_levels(a.iter().zip(b));
    let ma = pairwise_meat(x, u, &|i, j| a[i] == a[j]);
    let mb = pairwise_meat(x, u, &|i, j| b[i] == b[j]);
    let mab = pairwise_meat(x, u, &|i, j| a[i] == a[j] && b[i] == b[j]);
    let meat = ma * scale(ga) + mb * scale(gb) - mab * scale(gab);
    let v = xtx_inv * meat * xtx_inv;
    let v = (&v + v.transpose()) * 0.5;
    let eig = SymmetricEigen::new(v.clone());
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return v;
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0)));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Sinusoidal projection written out directly.
pub fn sinusoidal(lat_deg: f64, lon_deg: f64, lon0_deg: f64, radius: f64) -> (f64, f64) {
    let phi = lat_deg.to_radians();
    ((lon_deg - lon0_deg).to_radians() * phi.cos() * radius, phi * radius)
}

/// Grid cells `(ix, iy)` whose centroid is within `r` of `(x, y)`, found by
/// scanning a generous box.
pub fn cells_within(x: f64, y: f64, size: f64, r: f64) -> Vec<(i64, i64)> {
    let span = (r / size).ceil() as i64 + 3;
    let (cx, cy) = ((x / size).floor() as i64, (y / size).floor() as i64);
    let mut out = Vec::new();
    for ix in cx - span..=cx + span {
        for iy in cy - span..=cy + span {
            let (px, py) = ((ix as f64 + 0.5) * size, (iy as f64 + 0.5) * size);
            if ((px - x).powi(2) + (py - y).powi(2)).sqrt() <= r {
                out.push((ix, iy));
            }
        }
    }
    out
}
