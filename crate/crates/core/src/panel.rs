//! The tile × period panel: assembly from assignments, statuses and outcomes,
//! distance-bin descriptives, reference-group demeaning and balancing tests.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::deposit::{Deposit, DepositId, SizeClass};
use crate::dist::t_quantile;
use crate::error::{Error, Result};
use crate::estimator::{fit, FitOptions, Grouping, Regression};
use crate::geo::{Assignment, Band, TileId};
use crate::lifecycle::{EventKind, MineStatus, Period, PeriodCalendar, TreatmentSchedule};
use crate::raster::{Outcome, OutcomeRow};

/// Country-level regime data: `country,polity2_mean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryMeta {
    pub country: String,
    pub polity2_mean: f64,
}

impl CountryMeta {
    /// A mean Polity2 score of exactly zero counts as autocratic.
    pub fn is_democracy(&self) -> bool {
        self.polity2_mean > 0.0
    }
}

pub fn read_country_meta<R: Read>(reader: R) -> Result<Vec<CountryMeta>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_country_meta<W: Write>(writer: W, meta: &[CountryMeta]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for m in meta {
        wtr.serialize(m)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelObservation {
    pub tile_id: TileId,
    pub deposit_id: DepositId,
    pub country: String,
    pub period: Period,
    pub status: MineStatus,
    pub band: Band,
    pub distance_m: f64,
    pub log_urban: Option<f64>,
    pub log_crop: Option<f64>,
    pub wealth_z: Option<f64>,
    pub conflict_count: Option<u32>,
    pub size_class: SizeClass,
    pub democracy: bool,
    pub event_kind: Option<EventKind>,
    pub event_period: Option<Period>,
    pub discovery_year: Option<i32>,
    /// first producing year inside the study window, for openings
    pub opening_year: Option<i32>,
}

impl PanelObservation {
    pub fn outcome(&self, o: Outcome) -> Option<f64> {
        match o {
            Outcome::LogUrban => self.log_urban,
            Outcome::LogCrop => self.log_crop,
            Outcome::WealthZ => self.wealth_z,
            Outcome::ConflictAny => self.conflict_count.map(|c| f64::from(u8::from(c >= 1))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AssemblyReport {
    pub rows: usize,
    pub confounded_dropped: usize,
    pub assignments_without_outcome: usize,
    pub outcomes_without_assignment: usize,
    pub missing_deposits: usize,
    pub countries_without_meta: usize,
}

fn opening_year(deposit: &Deposit, calendar: &PeriodCalendar) -> Option<i32> {
    deposit
        .activity
        .iter()
        .filter(|iv| iv.end >= calendar.start_year && iv.start <= calendar.end_year())
        .map(|iv| iv.start.max(calendar.start_year))
        .min()
}

/// Inner join of assignments and outcomes on `(tile, period)`, enriched with
/// deposit, status and country attributes. Confounded tiles are dropped and
/// conflict is unavailable in period 1. Rows come out sorted by tile and
/// period.
pub fn assemble(
    assignments: &[Assignment],
    schedules: &[TreatmentSchedule],
    deposits: &[Deposit],
    outcomes: &[OutcomeRow],
    meta: &[CountryMeta],
    calendar: &PeriodCalendar,
) -> Result<(Vec<PanelObservation>, AssemblyReport)> {
    let mut report = AssemblyReport::default();
    let mut outs: Vec<&OutcomeRow> = outcomes.iter().collect();
    outs.sort_unstable_by(|x, y| (&x.tile_id, x.period).cmp(&(&y.tile_id, y.period)));
    if let Some(w) = outs.windows(2).find(|w| (&w[0].tile_id, w[0].period) == (&w[1].tile_id, w[1].period)) {
        return Err(Error::DuplicateKey(format!("outcome row ({}, {})", w[0].tile_id, w[0].period)));
    }
    let mut asg: Vec<&Assignment> = assignments.iter().collect();
    asg.sort_unstable_by(|x, y| (&x.tile_id, x.period).cmp(&(&y.tile_id, y.period)));
    if let Some(w) = asg.windows(2).find(|w| (&w[0].tile_id, w[0].period) == (&w[1].tile_id, w[1].period)) {
        return Err(Error::DuplicateKey(format!("assignment ({}, {})", w[0].tile_id, w[0].period)));
    }
    let sched: HashMap<&DepositId, &TreatmentSchedule> = schedules.iter().map(|s| (&s.deposit_id, s)).collect();
    let deps: HashMap<&DepositId, &Deposit> = deposits.iter().map(|d| (&d.id, d)).collect();
    let regimes: HashMap<&str, bool> = meta.iter().map(|m| (m.country.as_str(), m.is_democracy())).collect();

    let mut used = 0usize;
    let mut missing_meta: BTreeSet<&str> = BTreeSet::new();
    let mut rows = Vec::with_capacity(assignments.len());
    let mut oi = 0;
    for a in asg {
        let key = (&a.tile_id, a.period);
        while oi < outs.len() && (&outs[oi].tile_id, outs[oi].period) < key {
            oi += 1;
        }
        if oi == outs.len() || (&outs[oi].tile_id, outs[oi].period) != key {
            report.assignments_without_outcome += 1;
            continue;
        }
        let out = outs[oi];
        used += 1;
        if a.dropped_confounded {
            report.confounded_dropped += 1;
            continue;
        }
        let (Some(dep), Some(s)) = (deps.get(&a.deposit_id), sched.get(&a.deposit_id)) else {
            report.missing_deposits += 1;
            continue;
        };
        let democracy = match regimes.get(dep.country.as_str()) {
            Some(&d) => d,
            None => {
                missing_meta.insert(dep.country.as_str());
                false
            }
        };
        rows.push(PanelObservation {
            tile_id: a.tile_id.clone(),
            deposit_id: a.deposit_id.clone(),
            country: dep.country.clone(),
            period: a.period,
            status: s.status,
            band: a.band,
            distance_m: a.distance_m,
            log_urban: out.log_urban,
            log_crop: out.log_crop,
            wealth_z: out.wealth_z,
            conflict_count: if a.period == 1 { None } else { out.conflict_count },
            size_class: dep.size_class,
            democracy,
            event_kind: s.event_kind,
            event_period: s.event_period,
            discovery_year: dep.discovery_year,
            opening_year: if s.event_kind == Some(EventKind::Opening) { opening_year(dep, calendar) } else { None },
        });
    }
    report.outcomes_without_assignment = outcomes.len() - used;
    report.countries_without_meta = missing_meta.len();
    if !missing_meta.is_empty() {
        log::warn!("{} countries without regime data, treated as autocracies", missing_meta.len());
    }
    report.rows = rows.len();
    Ok((rows, report))
}

pub fn status_counts(panel: &[PanelObservation]) -> BTreeMap<MineStatus, usize> {
    let mut m = BTreeMap::new();
    for r in panel {
        *m.entry(r.status).or_insert(0) += 1;
    }
    m
}

pub fn read_panel<R: Read>(reader: R) -> Result<Vec<PanelObservation>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_panel<W: Write>(writer: W, panel: &[PanelObservation]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for r in panel {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Mean with a cluster-robust confidence interval. `None` bounds when fewer
/// than two clusters contribute.
fn clustered_mean<'a>(values: impl Iterator<Item = (f64, &'a DepositId)>, level: f64) -> Option<(usize, f64, Option<(f64, f64)>)> {
    let pairs: Vec<(f64, &DepositId)> = values.collect();
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    let mean = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mut sums: BTreeMap<&DepositId, f64> = BTreeMap::new();
    for (v, d) in &pairs {
        *sums.entry(d).or_insert(0.0) += v - mean;
    }
    let g = sums.len();
    let ci = (g >= 2).then(|| {
        let meat: f64 = sums.values().map(|s| s * s).sum();
        let se = (g as f64 / (g as f64 - 1.0) * meat).sqrt() / n;
        let crit = t_quantile(0.5 + level / 2.0, (g - 1) as f64);
        (mean - crit * se, mean + crit * se)
    });
    Some((pairs.len(), mean, ci))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinMean {
    pub status: MineStatus,
    /// lower edge of the bin in km
    pub bin_km: f64,
    pub period: Period,
    pub n: usize,
    pub mean: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

/// Bin index for a distance: half-open bins of `width_m` with the last bin
/// closed at `max_m`.
pub fn distance_bin(distance_m: f64, width_m: f64, max_m: f64) -> Option<usize> {
    if !(0.0..=max_m).contains(&distance_m) {
        return None;
    }
    let n_bins = (max_m / width_m).ceil() as usize;
    Some(((distance_m / width_m).floor() as usize).min(n_bins - 1))
}

/// Outcome mean and 95% mine-clustered interval per status, distance bin and
/// period. Every combination of present status, bin and requested period is
/// emitted; empty cells carry `None`.
pub fn distance_bin_means(
    panel: &[PanelObservation],
    outcome: Outcome,
    width_m: f64,
    max_m: f64,
    periods: &[Period],
) -> Result<Vec<BinMean>> {
    if panel.is_empty() {
        return Err(Error::EmptyInput("panel"));
    }
    if !(width_m > 0.0 && max_m > 0.0) {
        return Err(Error::InvalidInput("bin width and range must be positive".into()));
    }
    let n_bins = (max_m / width_m).ceil() as usize;
    let statuses: BTreeSet<MineStatus> = panel.iter().map(|r| r.status).collect();
    let mut cells: BTreeMap<(MineStatus, usize, Period), Vec<(f64, &DepositId)>> = BTreeMap::new();
    for r in panel {
        if !periods.contains(&r.period) {
            continue;
        }
        if let (Some(b), Some(v)) = (distance_bin(r.distance_m, width_m, max_m), r.outcome(outcome)) {
            cells.entry((r.status, b, r.period)).or_default().push((v, &r.deposit_id));
        }
    }
    let mut out = Vec::new();
    for &status in &statuses {
        for b in 0..n_bins {
            for &p in periods {
                let stats = cells.get(&(status, b, p)).and_then(|v| clustered_mean(v.iter().copied(), 0.95));
                let (n, mean, ci) = match stats {
                    Some((n, m, ci)) => (n, Some(m), ci),
                    None => (0, None, None),
                };
                out.push(BinMean {
                    status,
                    bin_km: b as f64 * width_m / 1000.0,
                    period: p,
                    n,
                    mean,
                    ci_low: ci.map(|c| c.0),
                    ci_high: ci.map(|c| c.1),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelativeRow {
    pub tile_id: TileId,
    pub deposit_id: DepositId,
    pub country: String,
    pub period: Period,
    pub status: MineStatus,
    pub distance_m: f64,
    pub value: f64,
    /// reference-group mean that was subtracted
    pub cell_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demeaned {
    pub rows: Vec<RelativeRow>,
    /// rows in country-period cells without reference observations
    pub dropped: usize,
}

/// Subtracts the `(country, period)` mean of the reference status group.
pub fn demean_relative(panel: &[PanelObservation], outcome: Outcome, reference: MineStatus) -> Demeaned {
    let mut sums: HashMap<(&str, Period), (f64, usize)> = HashMap::new();
    for r in panel.iter().filter(|r| r.status == reference) {
        if let Some(v) = r.outcome(outcome) {
            let e = sums.entry((r.country.as_str(), r.period)).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    let mut dropped = 0;
    let mut rows = Vec::new();
    for r in panel {
        let Some(v) = r.outcome(outcome) else { continue };
        match sums.get(&(r.country.as_str(), r.period)) {
            Some(&(s, c)) => {
                let m = s / c as f64;
                rows.push(RelativeRow {
                    tile_id: r.tile_id.clone(),
                    deposit_id: r.deposit_id.clone(),
                    country: r.country.clone(),
                    period: r.period,
                    status: r.status,
                    distance_m: r.distance_m,
                    value: v - m,
                    cell_mean: m,
                });
            }
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::info!("{dropped} rows dropped for lack of a reference group in their cell");
    }
    Demeaned { rows, dropped }
}

/// Per status, bin and period means of demeaned values (same layout as
/// [`distance_bin_means`]).
pub fn relative_bin_means(rel: &Demeaned, width_m: f64, max_m: f64, periods: &[Period]) -> Vec<BinMean> {
    let n_bins = (max_m / width_m).ceil() as usize;
    let statuses: BTreeSet<MineStatus> = rel.rows.iter().map(|r| r.status).collect();
    let mut cells: BTreeMap<(MineStatus, usize, Period), Vec<(f64, &DepositId)>> = BTreeMap::new();
    for r in rel.rows.iter().filter(|r| periods.contains(&r.period)) {
        if let Some(b) = distance_bin(r.distance_m, width_m, max_m) {
            cells.entry((r.status, b, r.period)).or_default().push((r.value, &r.deposit_id));
        }
    }
    let mut out = Vec::new();
    for &status in &statuses {
        for b in 0..n_bins {
            for &p in periods {
                let stats = cells.get(&(status, b, p)).and_then(|v| clustered_mean(v.iter().copied(), 0.95));
                out.push(BinMean {
                    status,
                    bin_km: b as f64 * width_m / 1000.0,
                    period: p,
                    n: stats.map_or(0, |s| s.0),
                    mean: stats.map(|s| s.1),
                    ci_low: stats.and_then(|s| s.2).map(|c| c.0),
                    ci_high: stats.and_then(|s| s.2).map(|c| c.1),
                });
            }
        }
    }
    out
}

#[derive(Serialize)]
struct PlotRecord {
    status: String,
    bin_km: f64,
    period: Period,
    mean: Option<f64>,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
}

/// Plot-ready CSV: `status,bin_km,period,mean,ci_low,ci_high`. Empty cells
/// have blank values.
pub fn write_bin_means<W: Write>(writer: W, bins: &[BinMean]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for b in bins {
        wtr.serialize(PlotRecord {
            status: b.status.to_string(),
            bin_km: b.bin_km,
            period: b.period,
            mean: b.mean,
            ci_low: b.ci_low,
            ci_high: b.ci_high,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

/// One tile in the balancing cross-section.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceUnit {
    pub tile_id: TileId,
    pub deposit_id: DepositId,
    pub country: String,
    pub status: MineStatus,
    pub opening_year: Option<i32>,
    pub covariates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceRegressor {
    /// 1 for Opening, 0 for NotYetOpened
    GroupDummy,
    /// log of the opening year, Opening tiles only
    LogOpeningYear,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceResult {
    pub covariate: String,
    pub regressor: BalanceRegressor,
    /// `None` when the regressor does not vary within any country
    pub beta: Option<f64>,
    pub se: Option<f64>,
    pub n: usize,
}

/// Period-1 cross-section of Opening and NotYetOpened tiles with their
/// period-1 outcomes plus any extra tile covariates.
pub fn balance_cross_section(
    panel: &[PanelObservation],
    extra: &BTreeMap<TileId, BTreeMap<String, f64>>,
) -> Vec<BalanceUnit> {
    panel
        .iter()
        .filter(|r| r.period == 1 && matches!(r.status, MineStatus::Opening | MineStatus::NotYetOpened))
        .map(|r| {
            let mut covariates: BTreeMap<String, f64> = Outcome::SCREENED
                .iter()
                .filter_map(|&o| r.outcome(o).map(|v| (o.as_str().to_string(), v)))
                .collect();
            if let Some(x) = extra.get(&r.tile_id) {
                covariates.extend(x.iter().map(|(k, v)| (k.clone(), *v)));
            }
            BalanceUnit {
                tile_id: r.tile_id.clone(),
                deposit_id: r.deposit_id.clone(),
                country: r.country.clone(),
                status: r.status,
                opening_year: r.opening_year,
                covariates,
            }
        })
        .collect()
}

/// Regresses each covariate on the regressor with country fixed effects and
/// mine-clustered standard errors.
pub fn balance_test(units: &[BalanceUnit], regressor: BalanceRegressor, covariates: &[String]) -> Result<Vec<BalanceResult>> {
    let opts = FitOptions::default();
    covariates
        .iter()
        .map(|cov| {
            let rows: Vec<(&BalanceUnit, f64, f64)> = units
                .iter()
                .filter_map(|u| {
                    let x = match regressor {
                        BalanceRegressor::GroupDummy => Some(f64::from(u8::from(u.status == MineStatus::Opening))),
                        BalanceRegressor::LogOpeningYear => u.opening_year.map(|y| f64::from(y).ln()),
                    }?;
                    Some((u, x, *u.covariates.get(cov)?))
                })
                .collect();
            let n = rows.len();
            let reg = Regression {
                y: rows.iter().map(|r| r.2).collect(),
                regressors: vec![(regressor_name(regressor).to_string(), rows.iter().map(|r| r.1).collect())],
                fixed_effects: vec![Grouping::from_keys(rows.iter().map(|r| r.0.country.as_str()))],
                clusters: vec![("mine".into(), Grouping::from_keys(rows.iter().map(|r| &r.0.deposit_id)))],
            };
            let (beta, se) = match fit(&reg, &opts) {
                Ok(res) => match res.coefficients.first() {
                    Some(c) => (Some(c.beta), Some(c.se)),
                    None => (None, None),
                },
                Err(Error::NotEstimable(_)) | Err(Error::SingleCluster(_)) | Err(Error::EmptyInput(_)) => (None, None),
                Err(e) => return Err(e),
            };
            Ok(BalanceResult { covariate: cov.clone(), regressor, beta, se, n })
        })
        .collect()
}

fn regressor_name(r: BalanceRegressor) -> &'static str {
    match r {
        BalanceRegressor::GroupDummy => "opening",
        BalanceRegressor::LogOpeningYear => "log_opening_year",
    }
}

pub fn write_balance<W: Write>(writer: W, results: &[BalanceResult]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["covariate", "regressor", "beta", "se", "n"])?;
    for r in results {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        wtr.write_record([
            r.covariate.clone(),
            regressor_name(r.regressor).to_string(),
            fmt(r.beta),
            fmt(r.se),
            r.n.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
