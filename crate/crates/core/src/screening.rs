//! Outlier screening: interquartile fences followed by a generalized ESD test.
//!
//! Observations more than `k` interquartile ranges outside the quartiles are
//! flagged; the flagged observations are then tested one at a time, most
//! extreme first, with the generalized extreme studentized deviate procedure.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dist::t_upper_quantile;
use crate::error::{Error, Result};
use crate::geo::TileId;
use crate::lifecycle::Period;
use crate::raster::{Outcome, OutcomeRow};

pub const DEFAULT_ALPHA: f64 = 0.10;
pub const DEFAULT_IQR_K: f64 = 2.0;

/// Quantile by linear interpolation between order statistics (type 7).
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Indices of values below `Q1 − k·IQR` or above `Q3 + k·IQR`.
pub fn iqr_flag(values: &[f64], k: f64) -> Result<Vec<usize>> {
    if values.len() < 4 {
        return Err(Error::InsufficientData { needed: 4, got: values.len() });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in screening input".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_type7(&sorted, 0.25);
    let q3 = quantile_type7(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - k * iqr, q3 + k * iqr);
    Ok(values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v < lo || v > hi)
        .map(|(i, _)| i)
        .collect())
}

/// Critical value `λ_i` of the generalized ESD test (`i` is 1-based).
pub fn esd_critical_value(n: usize, i: usize, alpha: f64) -> f64 {
    let remaining = (n - i + 1) as f64;
    let df = (n - i - 1) as f64;
    let t = t_upper_quantile(alpha / (2.0 * remaining), df);
    (n - i) as f64 * t / ((df + t * t) * remaining).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsdStep {
    /// index into the input slice of the observation removed at this step
    pub index: usize,
    pub r: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EsdResult {
    pub n_outliers: usize,
    pub steps: Vec<EsdStep>,
}

impl EsdResult {
    /// Indices of the declared outliers, in removal order.
    pub fn outliers(&self) -> Vec<usize> {
        self.steps[..self.n_outliers].iter().map(|s| s.index).collect()
    }
}

/// Generalized ESD test for up to `max_outliers` outliers.
pub fn esd_test(values: &[f64], max_outliers: usize, alpha: f64) -> Result<EsdResult> {
    let all: Vec<usize> = (0..values.len()).collect();
    esd_core(values, &all, max_outliers, alpha)
}

/// Generalized ESD restricted to a candidate set: at each step the candidate
/// with the largest studentized deviation (mean and sd over every remaining
/// observation) is tested and removed.
pub fn esd_test_among(values: &[f64], candidates: &[usize], alpha: f64) -> Result<EsdResult> {
    esd_core(values, candidates, candidates.len(), alpha)
}

fn esd_core(values: &[f64], candidates: &[usize], max_outliers: usize, alpha: f64) -> Result<EsdResult> {
    let n = values.len();
    if max_outliers < 1 {
        return Err(Error::InvalidInput("max_outliers must be >= 1".into()));
    }
    if n < max_outliers + 2 {
        return Err(Error::InsufficientData { needed: max_outliers + 2, got: n });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let mut removed = vec![false; n];
    let mut pool: Vec<usize> = candidates.to_vec();
    let mut sum: f64 = values.iter().sum();
    let mut steps = Vec::with_capacity(max_outliers);
    let mut n_outliers = 0;

    for i in 1..=max_outliers.min(pool.len()) {
        let m = (n - i + 1) as f64;
        let mean = sum / m;
        let ss: f64 = values
            .iter()
            .zip(&removed)
            .filter(|(_, &r)| !r)
            .map(|(v, _)| (v - mean).powi(2))
            .sum();
        let sd = (ss / (m - 1.0)).sqrt();
        if !(sd > 0.0) {
            break;
        }
        let (pos, &idx) = pool
            .iter()
            .enumerate()
            .max_by(|(_, &a), (_, &b)| {
                let da = (values[a] - mean).abs();
                let db = (values[b] - mean).abs();
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("non-empty pool");
        let r = (values[idx] - mean).abs() / sd;
        let lambda = esd_critical_value(n, i, alpha);
        if r > lambda {
            n_outliers = i;
        }
        steps.push(EsdStep { index: idx, r, lambda });
        removed[idx] = true;
        sum -= values[idx];
        pool.swap_remove(pos);
    }
    Ok(EsdResult { n_outliers, steps })
}

/// Grouping over which screening statistics are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreeningPool {
    #[default]
    Pooled,
    PerPeriod,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportStep {
    pub iteration: usize,
    pub r: f64,
    pub lambda: f64,
    pub removed: (TileId, Period),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierReport {
    pub outcome: Outcome,
    pub alpha: f64,
    pub flagged_count: usize,
    pub confirmed: Vec<(TileId, Period)>,
    pub steps: Vec<ReportStep>,
}

/// Screens one outcome column and blanks the confirmed outliers.
pub fn clean_outcome(
    rows: &mut [OutcomeRow],
    outcome: Outcome,
    k: f64,
    alpha: f64,
    pool: ScreeningPool,
) -> Result<OutlierReport> {
    let mut report = OutlierReport { outcome, alpha, flagged_count: 0, confirmed: Vec::new(), steps: Vec::new() };
    let groups: Vec<Vec<usize>> = match pool {
        ScreeningPool::Pooled => vec![(0..rows.len()).collect()],
        ScreeningPool::PerPeriod => {
            let mut periods: Vec<Period> = rows.iter().map(|r| r.period).collect();
            periods.sort_unstable();
            periods.dedup();
            periods
                .into_iter()
                .map(|p| (0..rows.len()).filter(|&i| rows[i].period == p).collect())
                .collect()
        }
    };

    for group in groups {
        let (idx, values): (Vec<usize>, Vec<f64>) =
            group.into_iter().filter_map(|i| outcome.get(&rows[i]).map(|v| (i, v))).unzip();
        if values.len() < 4 {
            continue;
        }
        let flagged = iqr_flag(&values, k)?;
        report.flagged_count += flagged.len();
        if flagged.is_empty() || values.len() < flagged.len() + 2 {
            continue;
        }
        let esd = esd_test_among(&values, &flagged, alpha)?;
        let mut iteration = report.steps.len();
        for step in &esd.steps {
            iteration += 1;
            let row = &rows[idx[step.index]];
            report.steps.push(ReportStep {
                iteration,
                r: step.r,
                lambda: step.lambda,
                removed: (row.tile_id.clone(), row.period),
            });
        }
        for j in esd.outliers() {
            let row = &mut rows[idx[j]];
            report.confirmed.push((row.tile_id.clone(), row.period));
            outcome.set(row, None);
        }
    }
    Ok(report)
}

#[derive(Serialize)]
struct ReportRecord<'a> {
    outcome: &'a str,
    iteration: usize,
    #[serde(rename = "R_i")]
    r_i: f64,
    lambda_i: f64,
    removed_id: String,
}

pub fn write_reports<W: Write>(writer: W, reports: &[OutlierReport]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    wtr.write_record(["outcome", "iteration", "R_i", "lambda_i", "removed_id"])?;
    for rep in reports {
        for s in &rep.steps {
            wtr.serialize(ReportRecord {
                outcome: rep.outcome.as_str(),
                iteration: s.iteration,
                r_i: s.r,
                lambda_i: s.lambda,
                removed_id: format!("{}@{}", s.removed.0, s.removed.1),
            })?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn iqr_examples() {
        assert!(iqr_flag(&[1.0, 2.0, 3.0, 4.0], 2.0).unwrap().is_empty());
        assert_eq!(iqr_flag(&[0.0, 0.0, 0.0, 0.0, 100.0], 2.0).unwrap(), vec![4]);
        assert!(matches!(iqr_flag(&[1.0, 2.0, 3.0], 2.0), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn type7_quartiles() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_type7(&s, 0.25), 1.75);
        assert_eq!(quantile_type7(&s, 0.75), 3.25);
        assert_eq!(quantile_type7(&s, 1.0), 4.0);
    }

    #[test]
    fn lambda_decreases_in_i() {
        for &n in &[10usize, 25, 100, 1000] {
            let lams: Vec<f64> = (1..=5).map(|i| esd_critical_value(n, i, 0.10)).collect();
            assert!(lams.windows(2).all(|w| w[1] < w[0]), "n={n}: {lams:?}");
        }
    }

    #[test]
    fn single_planted_outlier() {
        let mut v: Vec<f64> = (0..20).map(|i| ((i * 37 % 11) as f64 - 5.0) * 1e-3).collect();
        v.push(50.0);
        let res = esd_test(&v, 3, 0.10).unwrap();
        assert_eq!(res.n_outliers, 1);
        assert_eq!(res.outliers(), vec![20]);
    }

    #[test]
    fn preconditions() {
        assert!(esd_test(&[1.0, 2.0, 3.0], 2, 0.1).is_err());
        assert!(esd_test(&[1.0, 2.0, 3.0], 0, 0.1).is_err());
        // zero variance stops without outliers
        let res = esd_test(&[1.0; 10], 3, 0.1).unwrap();
        assert_eq!(res.n_outliers, 0);
        assert!(res.steps.is_empty());
    }

    #[test]
    fn clean_normal_samples_mostly_pass() {
        let mut zero = 0;
        for seed in 0..200u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..100).map(|_| StandardNormal.sample(&mut rng)).collect();
            if esd_test(&v, 3, 0.10).unwrap().n_outliers == 0 {
                zero += 1;
            }
        }
        assert!(zero >= 170, "{zero} of 200");
    }

    #[test]
    fn max_one_matches_single_grubbs_rule() {
        for seed in 0..100u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut v: Vec<f64> = (0..30).map(|_| StandardNormal.sample(&mut rng)).collect();
            v[0] += (seed % 5) as f64;
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let g = v.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max) / sd;
            let decision = g > esd_critical_value(v.len(), 1, 0.1);
            assert_eq!(esd_test(&v, 1, 0.1).unwrap().n_outliers == 1, decision);
        }
    }

    fn rows_from(values: &[f64]) -> Vec<OutcomeRow> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| OutcomeRow {
                tile_id: TileId::from_indices(i as i64, 0),
                period: 1 + (i % 12) as Period,
                log_urban: Some(v),
                log_crop: None,
                wealth_z: None,
                conflict_count: None,
            })
            .collect()
    }

    #[test]
    fn unflagged_panel_unchanged() {
        let vals: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        let mut rows = rows_from(&vals);
        let before = rows.clone();
        let rep = clean_outcome(&mut rows, Outcome::LogUrban, 2.0, 0.1, ScreeningPool::Pooled).unwrap();
        assert_eq!(rep.flagged_count, 0);
        assert_eq!(rows, before);
    }

    #[test]
    fn removal_count_matches_report() {
        let mut vals: Vec<f64> = (0..60).map(|i| (i % 10) as f64 * 0.1).collect();
        vals[5] = 40.0;
        vals[17] = -35.0;
        let mut rows = rows_from(&vals);
        let rep = clean_outcome(&mut rows, Outcome::LogUrban, 2.0, 0.1, ScreeningPool::Pooled).unwrap();
        let blanked = rows.iter().filter(|r| r.log_urban.is_none()).count();
        assert_eq!(blanked, rep.confirmed.len());
        assert_eq!(rep.confirmed.len(), 2);
        assert!(rep.confirmed.len() <= rep.flagged_count);
        assert!(rows[5].log_urban.is_none() && rows[17].log_urban.is_none());
    }

    #[test]
    fn second_pass_can_remove_more() {
        // A point just inside the first-pass fence falls outside once the
        // far cluster is gone and the quartiles tighten.
        let mut vals: Vec<f64> = (0..40).map(|i| i as f64 / 39.0).collect();
        vals.push(1.85);
        vals.extend([100.0, 100.0, 100.0]);
        let mut rows = rows_from(&vals);
        let chain: Vec<usize> = (0..3)
            .map(|_| {
                clean_outcome(&mut rows, Outcome::LogUrban, 2.0, 0.1, ScreeningPool::Pooled)
                    .unwrap()
                    .confirmed
                    .len()
            })
            .collect();
        assert_eq!(chain, vec![3, 1, 0]);
        assert!(rows[40].log_urban.is_none());
    }

    #[test]
    fn report_csv_header() {
        let mut vals: Vec<f64> = (0..30).map(|i| (i % 7) as f64).collect();
        vals[3] = 500.0;
        let mut rows = rows_from(&vals);
        let rep = clean_outcome(&mut rows, Outcome::LogUrban, 2.0, 0.1, ScreeningPool::Pooled).unwrap();
        let mut buf = Vec::new();
        write_reports(&mut buf, &[rep]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("outcome,iteration,R_i,lambda_i,removed_id"));
        assert!(lines.next().unwrap().starts_with("log_urban,1,"));
    }

    proptest! {
        #[test]
        fn iqr_flags_symmetric_under_negation(v in prop::collection::vec(-100.0f64..100.0, 4..40)) {
            let neg: Vec<f64> = v.iter().map(|x| -x).collect();
            prop_assert_eq!(iqr_flag(&v, 2.0).unwrap(), iqr_flag(&neg, 2.0).unwrap());
        }

        #[test]
        fn esd_affine_invariant(seed in any::<u64>(), a in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0], b in -100.0f64..100.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut v: Vec<f64> = (0..40).map(|_| StandardNormal.sample(&mut rng)).collect();
            v[3] += 6.0;
            v[11] -= 4.0;
            let w: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            let (r1, r2) = (esd_test(&v, 4, 0.1).unwrap(), esd_test(&w, 4, 0.1).unwrap());
            prop_assert_eq!(r1.outliers(), r2.outliers());
        }
    }
}
