//! Fixed-effects least squares with cluster-robust inference, and the
//! event-study, difference-in-differences and conflict specifications built
//! on it.

pub mod fe;
pub mod ols;
pub mod specs;
pub mod vcov;

use nalgebra::DMatrix;

use crate::dist::{t_quantile, t_two_sided_p};
use crate::error::{Error, Result};
pub use fe::{absorbed_df, within_transform, Grouping};
pub use ols::{ols, OlsFit};
pub use specs::*;
pub use vcov::{cluster_vcov, twoway_vcov};

/// A demeaned column counts as absorbed by the fixed effects when its norm
/// drops below this fraction of the raw norm.
const ABSORBED_RATIO: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// confidence level of reported intervals
    pub level: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { tol: fe::DEFAULT_TOL, max_iter: fe::DEFAULT_MAX_ITER, level: 0.95 }
    }
}

/// One regression problem: outcome, named regressors, absorbed fixed effects
/// and up to two clustering dimensions.
#[derive(Debug, Clone, Default)]
pub struct Regression {
    pub y: Vec<f64>,
    pub regressors: Vec<(String, Vec<f64>)>,
    pub fixed_effects: Vec<Grouping>,
    pub clusters: Vec<(String, Grouping)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coefficient {
    pub term: String,
    pub beta: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
}

impl Coefficient {
    pub fn t_stat(&self) -> f64 {
        self.beta / self.se
    }

    pub fn significant(&self, level: f64) -> bool {
        self.p_value < level
    }
}

#[derive(Debug, Clone)]
pub struct RegressionResult {
    pub coefficients: Vec<Coefficient>,
    /// variance of the retained coefficients, in `coefficients` order
    pub vcov: DMatrix<f64>,
    pub dropped_collinear: Vec<String>,
    pub n_obs: usize,
    pub clusters: Vec<(String, usize)>,
    /// degrees of freedom behind the t critical values
    pub t_df: usize,
    pub fe_df: usize,
    pub r2: f64,
    pub r2_within: f64,
    pub r2_adj: f64,
    pub iterations: usize,
}

impl RegressionResult {
    pub fn coef(&self, term: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.term == term)
    }

    pub fn n_clusters(&self, name: &str) -> Option<usize> {
        self.clusters.iter().find(|(n, _)| n == name).map(|&(_, g)| g)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn fit(reg: &Regression, opts: &FitOptions) -> Result<RegressionResult> {
    let n = reg.y.len();
    if n == 0 {
        return Err(Error::EmptyInput("regression rows"));
    }
    if reg.regressors.iter().any(|(_, x)| x.len() != n) {
        return Err(Error::InvalidInput("regressor length differs from outcome length".into()));
    }
    if reg.clusters.len() > 2 {
        return Err(Error::InvalidInput("at most two clustering dimensions are supported".into()));
    }
    let fe_dims = if reg.fixed_effects.is_empty() { vec![Grouping::single(n)] } else { reg.fixed_effects.clone() };

    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(reg.regressors.len() + 1);
    cols.push(reg.y.clone());
    cols.extend(reg.regressors.iter().map(|(_, x)| x.clone()));
    let iterations = within_transform(&mut cols, &fe_dims, opts.tol, opts.max_iter)?;
    let y_dm = cols.remove(0);

    let mut dropped: Vec<usize> = Vec::new();
    let mut candidates: Vec<usize> = Vec::new();
    for (j, (_, raw)) in reg.regressors.iter().enumerate() {
        let raw_norm = norm(raw);
        if raw_norm == 0.0 || norm(&cols[j]) <= ABSORBED_RATIO * raw_norm {
            dropped.push(j);
        } else {
            candidates.push(j);
        }
    }
    if candidates.is_empty() {
        return Err(Error::NotEstimable("every regressor is absorbed by the fixed effects".into()));
    }
    let x_cand: Vec<Vec<f64>> = candidates.iter().map(|&j| std::mem::take(&mut cols[j])).collect();
    let fit = ols(&x_cand, &y_dm)?;
    dropped.extend(fit.dropped.iter().map(|&i| candidates[i]));
    dropped.sort_unstable();
    let kept: Vec<usize> = fit.kept.iter().map(|&i| candidates[i]).collect();

    let fe_df = absorbed_df(&fe_dims);
    let k_total = kept.len() + fe_df;
    if n <= k_total {
        return Err(Error::InsufficientData { needed: k_total + 1, got: n });
    }
    let xk: Vec<&[f64]> = fit.kept.iter().map(|&i| x_cand[i].as_slice()).collect();
    let kk = kept.len();
    let xtx_inv = DMatrix::from_fn(kk, kk, |i, j| fit.xtx_inv[i][j]);
    let (vcov, t_df) = match reg.clusters.as_slice() {
        [] => {
            let v = cluster_vcov(&xk, &fit.residuals, &xtx_inv, &Grouping::singletons(n), k_total)?;
            (v, n - k_total)
        }
        [(_, a)] => (cluster_vcov(&xk, &fit.residuals, &xtx_inv, a, k_total)?, a.n_groups() - 1),
        [(_, a), (_, b)] => {
            let v = twoway_vcov(&xk, &fit.residuals, &xtx_inv, a, b, k_total)?;
            (v, a.n_groups().min(b.n_groups()) - 1)
        }
        _ => unreachable!(),
    };
    let crit = t_quantile(0.5 + opts.level / 2.0, t_df as f64);

    let coefficients = kept
        .iter()
        .zip(fit.kept.iter())
        .enumerate()
        .map(|(pos, (&j, &i))| {
            let beta = fit.beta[i];
            let se = vcov[(pos, pos)].max(0.0).sqrt();
            Coefficient {
                term: reg.regressors[j].0.clone(),
                beta,
                se,
                ci_low: beta - crit * se,
                ci_high: beta + crit * se,
                p_value: if se > 0.0 { t_two_sided_p(beta / se, t_df as f64) } else { f64::NAN },
            }
        })
        .collect();

    let rss = fit.rss();
    let ybar = reg.y.iter().sum::<f64>() / n as f64;
    let tss: f64 = reg.y.iter().map(|v| (v - ybar).powi(2)).sum();
    let tss_within: f64 = y_dm.iter().map(|v| v * v).sum();
    let r2 = if tss > 0.0 { 1.0 - rss / tss } else { f64::NAN };
    let r2_adj = 1.0 - (1.0 - r2) * (n as f64 - 1.0) / (n - k_total) as f64;
    let r2_within = if tss_within > 0.0 { 1.0 - rss / tss_within } else { f64::NAN };

    Ok(RegressionResult {
        coefficients,
        vcov,
        dropped_collinear: dropped.iter().map(|&j| reg.regressors[j].0.clone()).collect(),
        n_obs: n,
        clusters: reg.clusters.iter().map(|(name, g)| (name.clone(), g.n_groups())).collect(),
        t_df,
        fe_df,
        r2,
        r2_within,
        r2_adj,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Random two-way FE design with `k` regressors.
    pub(crate) fn random_design(seed: u64, n: usize, g1: usize, g2: usize, k: usize) -> Regression {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..g1)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..g2)).collect();
        let fa: Vec<f64> = (0..g1).map(|_| rng.random_range(-2.0..2.0)).collect();
        let fb: Vec<f64> = (0..g2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|i| rng.random_range(-1.0..1.0) + 0.3 * fa[a[i]]).collect()).collect();
        let y = (0..n)
            .map(|i| fa[a[i]] + fb[b[i]] + x.iter().enumerate().map(|(j, c)| (j as f64 + 1.0) * c[i]).sum::<f64>() + rng.random_range(-1.0..1.0))
            .collect();
        Regression {
            y,
            regressors: x.into_iter().enumerate().map(|(j, c)| (format!("x{j}"), c)).collect(),
            fixed_effects: vec![Grouping::from_keys(a.clone()), Grouping::from_keys(b)],
            clusters: vec![("a".into(), Grouping::from_keys(a))],
        }
    }

    /// Dummy-variable least squares: regressors plus one dummy per group of
    /// the first dimension and all but one group of the others.
    fn dummy_ols(reg: &Regression) -> Vec<f64> {
        let n = reg.y.len();
        let mut cols: Vec<Vec<f64>> = reg.regressors.iter().map(|(_, c)| c.clone()).collect();
        for (d, g) in reg.fixed_effects.iter().enumerate() {
            for grp in usize::from(d > 0)..g.n_groups() {
                cols.push((0..n).map(|i| f64::from(u8::from(g.ids()[i] as usize == grp))).collect());
            }
        }
        let fit = ols(&cols, &reg.y).unwrap();
        fit.beta[..reg.regressors.len()].to_vec()
    }

    #[test]
    fn matches_dummy_variable_ols() {
        for seed in 0..5 {
            let reg = random_design(seed, 300, 12, 9, 3);
            let res = fit(&reg, &FitOptions::default()).unwrap();
            let oracle = dummy_ols(&reg);
            for (c, o) in res.coefficients.iter().zip(&oracle) {
                assert!((c.beta - o).abs() < 1e-8, "{} vs {}", c.beta, o);
            }
        }
    }

    #[test]
    fn constant_shift_changes_nothing() {
        let reg = random_design(11, 200, 8, 5, 2);
        let mut shifted = reg.clone();
        shifted.y.iter_mut().for_each(|v| *v += 42.0);
        let (a, b) = (fit(&reg, &FitOptions::default()).unwrap(), fit(&shifted, &FitOptions::default()).unwrap());
        for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
            assert!((x.beta - y.beta).abs() < 1e-9);
        }
    }

    #[test]
    fn se_scale_with_outcome() {
        let reg = random_design(12, 200, 8, 5, 2);
        let mut scaled = reg.clone();
        scaled.y.iter_mut().for_each(|v| *v *= 10.0);
        let (a, b) = (fit(&reg, &FitOptions::default()).unwrap(), fit(&scaled, &FitOptions::default()).unwrap());
        for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
            assert!((10.0 * x.se - y.se).abs() < 1e-8 * y.se.max(1.0));
        }
    }

    #[test]
    fn absorbed_regressor_reported() {
        let mut reg = random_design(13, 150, 6, 4, 1);
        let dummy: Vec<f64> = reg.fixed_effects[0].ids().iter().map(|&g| f64::from(g)).collect();
        reg.regressors.push(("group_level".into(), dummy));
        let res = fit(&reg, &FitOptions::default()).unwrap();
        assert_eq!(res.dropped_collinear, vec!["group_level".to_string()]);
        assert_eq!(res.coefficients.len(), 1);
    }

    #[test]
    fn homoskedastic_cluster_se_close_to_analytic() {
        // one regressor, no FE beyond the intercept, 500 singleton clusters
        let mut hits = 0;
        for seed in 0..50u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 500;
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = x.iter().map(|v| 0.5 * v + rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng)).collect();
            let reg = Regression {
                y,
                regressors: vec![("x".into(), x.clone())],
                fixed_effects: vec![],
                clusters: vec![("obs".into(), Grouping::singletons(n))],
            };
            let res = fit(&reg, &FitOptions::default()).unwrap();
            let xbar = x.iter().sum::<f64>() / n as f64;
            let sxx: f64 = x.iter().map(|v| (v - xbar).powi(2)).sum();
            let analytic = (1.0 / sxx).sqrt();
            if (res.coefficients[0].se / analytic - 1.0).abs() < 0.10 {
                hits += 1;
            }
        }
        assert!(hits >= 45, "{hits} of 50");
    }
}
