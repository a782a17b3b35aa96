//! Event-study, difference-in-differences and conflict specifications on a
//! stacked (or ordinary) dataset.
//!
//! Both designs absorb event×tile and event×period effects. In the ordinary
//! design each country is a single pseudo-event, so these are tile and
//! country×period effects. Ordinary fits cluster by mine; stacked fits by
//! mine and tile.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{fit, FitOptions, Grouping, Regression, RegressionResult};
use crate::deposit::SizeClass;
use crate::error::{Error, Result};
use crate::geo::Band;
use crate::raster::Outcome;
use crate::stacking::{Design, StackedDataset, StackedRow, Window};

/// Grouping used to split the treatment indicator into cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Size,
    Regime,
    Band,
}

impl Split {
    fn label(self, row: &StackedRow<'_>) -> &'static str {
        match self {
            Split::Size => match row.obs.size_class {
                SizeClass::Large => "large",
                SizeClass::Small => "small",
            },
            Split::Regime => {
                if row.obs.democracy {
                    "democracy"
                } else {
                    "autocracy"
                }
            }
            Split::Band => match row.obs.band {
                Band::Near => "near",
                Band::Far => "far",
            },
        }
    }

    fn labels(self) -> [&'static str; 2] {
        match self {
            Split::Size => ["large", "small"],
            Split::Regime => ["democracy", "autocracy"],
            Split::Band => ["near", "far"],
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Split::Size => "size",
            Split::Regime => "regime",
            Split::Band => "band",
        }
    }
}

/// How the treatment indicator enters: alone, or as one indicator per cell
/// of the cross product of the listed splits.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Interactions {
    #[default]
    None,
    Cells(Vec<Split>),
}

impl Interactions {
    pub fn near_far() -> Self {
        Interactions::Cells(vec![Split::Band])
    }

    fn cell_terms(&self) -> Vec<String> {
        let Interactions::Cells(splits) = self else {
            return vec!["treat_post".to_string()];
        };
        let mut terms = vec!["treat_post".to_string()];
        for s in splits {
            terms = terms.iter().flat_map(|t| s.labels().map(|l| format!("{t}:{l}"))).collect();
        }
        terms
    }

    fn cell_of(&self, row: &StackedRow<'_>) -> String {
        match self {
            Interactions::None => "treat_post".to_string(),
            Interactions::Cells(splits) => {
                let mut t = "treat_post".to_string();
                for s in splits {
                    t.push(':');
                    t.push_str(s.label(row));
                }
                t
            }
        }
    }
}

impl fmt::Display for Interactions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Interactions::None => f.write_str("none"),
            Interactions::Cells(s) if s.as_slice() == [Split::Band] => f.write_str("near_far"),
            Interactions::Cells(s) => {
                let names: Vec<&str> = s.iter().map(|x| x.as_str()).collect();
                f.write_str(&names.join("+"))
            }
        }
    }
}

impl FromStr for Interactions {
    type Err = Error;
    /// `none`, `near_far`, or `+`-joined splits such as `size+regime`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" | "" => Ok(Interactions::None),
            "near_far" => Ok(Interactions::near_far()),
            other => other
                .split('+')
                .map(|p| match p.trim() {
                    "size" => Ok(Split::Size),
                    "regime" => Ok(Split::Regime),
                    "band" => Ok(Split::Band),
                    x => Err(Error::InvalidInput(format!("unknown interaction split '{x}'"))),
                })
                .collect::<Result<Vec<_>>>()
                .map(Interactions::Cells),
        }
    }
}

impl Serialize for Interactions {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Interactions {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn usable<'a, 'p>(data: &'a StackedDataset<'p>, outcome: Outcome, band: Option<Band>) -> Vec<&'a StackedRow<'p>> {
    data.rows
        .iter()
        .filter(|r| band.is_none_or(|b| r.obs.band == b) && r.outcome(outcome).is_some())
        .collect()
}

fn regression(data: &StackedDataset<'_>, rows: &[&StackedRow<'_>], outcome: Outcome, regressors: Vec<(String, Vec<f64>)>) -> Regression {
    let event_tile = Grouping::from_keys(rows.iter().map(|r| (r.event, r.obs.tile_id.0.as_str())));
    let event_period = Grouping::from_keys(rows.iter().map(|r| (r.event, r.obs.period)));
    let mine = Grouping::from_keys(rows.iter().map(|r| r.obs.deposit_id.0.as_str()));
    let mut clusters = vec![("mine".to_string(), mine)];
    if data.design == Design::Stacked {
        clusters.push(("tile".to_string(), Grouping::from_keys(rows.iter().map(|r| r.obs.tile_id.0.as_str()))));
    }
    Regression {
        y: rows.iter().map(|r| r.outcome(outcome).expect("filtered")).collect(),
        regressors,
        fixed_effects: vec![event_tile, event_period],
        clusters,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EventStudyPoint {
    pub rel_time: i32,
    pub beta: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone)]
pub struct EventStudy {
    pub result: RegressionResult,
    /// one point per relative period in the window; `t = 0` is the baseline
    pub points: Vec<EventStudyPoint>,
}

/// Proportional change implied by a coefficient on a log outcome,
/// `exp(β) − 1`.
pub fn proportional_change(beta: f64) -> f64 {
    beta.exp_m1()
}

/// Multiplicative factor implied by a coefficient on a log outcome.
pub fn level_ratio(beta: f64) -> f64 {
    beta.exp()
}

pub fn rel_term(t: i32) -> String {
    format!("rel_time[{t}]")
}

/// Regresses the outcome on `D_t · Treat_i` for every `t ≠ 0` in the window.
pub fn event_study(
    data: &StackedDataset<'_>,
    window: Window,
    outcome: Outcome,
    band: Option<Band>,
    opts: &FitOptions,
) -> Result<EventStudy> {
    window.validate()?;
    let rows: Vec<&StackedRow<'_>> = usable(data, outcome, band)
        .into_iter()
        .filter(|r| r.rel_time.is_some_and(|t| (window.t_neg..=window.t_pos).contains(&t)))
        .collect();
    let treated_t = |pred: &dyn Fn(i32) -> bool| rows.iter().any(|r| r.treat_group && r.rel_time.is_some_and(pred));
    if !treated_t(&|t| t < 0) || !treated_t(&|t| t >= 1) {
        return Err(Error::NotEstimable("event study needs treated observations before and after onset".into()));
    }
    let regressors = window
        .dummies()
        .map(|t| {
            let col = rows.iter().map(|r| f64::from(u8::from(r.treat_group && r.rel_time == Some(t)))).collect();
            (rel_term(t), col)
        })
        .collect();
    let result = fit(&regression(data, &rows, outcome, regressors), opts)?;
    let points = (window.t_neg..=window.t_pos)
        .filter_map(|t| {
            if t == 0 {
                return Some(EventStudyPoint { rel_time: 0, beta: 0.0, ci_low: 0.0, ci_high: 0.0 });
            }
            result.coef(&rel_term(t)).map(|c| EventStudyPoint { rel_time: t, beta: c.beta, ci_low: c.ci_low, ci_high: c.ci_high })
        })
        .collect();
    Ok(EventStudy { result, points })
}

/// Difference in differences on `Treat_{i,p}`, optionally split into cells.
/// Cells without treated post-onset observations come back in
/// `dropped_collinear`.
pub fn did(
    data: &StackedDataset<'_>,
    interactions: &Interactions,
    outcome: Outcome,
    band: Option<Band>,
    opts: &FitOptions,
) -> Result<RegressionResult> {
    let rows = usable(data, outcome, band);
    if rows.is_empty() {
        return Err(Error::EmptyInput("did sample"));
    }
    let cells: Vec<String> = rows.iter().map(|r| interactions.cell_of(r)).collect();
    let regressors = interactions
        .cell_terms()
        .into_iter()
        .map(|term| {
            let col = rows.iter().zip(&cells).map(|(r, c)| f64::from(u8::from(r.treat_post && *c == term))).collect();
            (term, col)
        })
        .collect();
    fit(&regression(data, &rows, outcome, regressors), opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictSplit {
    Pooled,
    DemocracyAutocracy,
}

#[derive(Debug, Clone)]
pub struct ConflictResult {
    pub result: RegressionResult,
    /// mean conflict probability of treated tiles before onset, per term
    pub baseline: Vec<(String, f64)>,
}

/// Linear probability model for any conflict in a tile-period.
pub fn lpm_conflict(
    data: &StackedDataset<'_>,
    split: ConflictSplit,
    band: Option<Band>,
    opts: &FitOptions,
) -> Result<ConflictResult> {
    let interactions = match split {
        ConflictSplit::Pooled => Interactions::None,
        ConflictSplit::DemocracyAutocracy => Interactions::Cells(vec![Split::Regime]),
    };
    let result = did(data, &interactions, Outcome::ConflictAny, band, opts)?;
    let rows = usable(data, Outcome::ConflictAny, band);
    let baseline = interactions
        .cell_terms()
        .into_iter()
        .filter_map(|term| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.treat_group && !r.treat_post && interactions.cell_of(r) == term)
                .filter_map(|r| r.outcome(Outcome::ConflictAny))
                .collect();
            (!vals.is_empty()).then(|| (term, vals.iter().sum::<f64>() / vals.len() as f64))
        })
        .collect();
    Ok(ConflictResult { result, baseline })
}

/// A fitted specification ready for the results table.
#[derive(Debug, Clone)]
pub struct SpecOutput<'a> {
    pub spec: &'a str,
    pub outcome: Outcome,
    pub result: &'a RegressionResult,
    /// extra rows reported with only a value, e.g. baseline means
    pub extras: &'a [(String, f64)],
}

/// CSV: `spec,outcome,term,beta,se,ci_low,ci_high,n,clusters_mine,clusters_tile,r2_adj`.
/// Dropped terms are listed with `NA` estimates.
pub fn write_results<W: Write>(writer: W, outputs: &[SpecOutput<'_>]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "spec", "outcome", "term", "beta", "se", "ci_low", "ci_high", "n", "clusters_mine", "clusters_tile", "r2_adj",
    ])?;
    let na = || "NA".to_string();
    for o in outputs {
        let r = o.result;
        let meta = [
            r.n_obs.to_string(),
            r.n_clusters("mine").map_or_else(na, |g| g.to_string()),
            r.n_clusters("tile").map_or_else(na, |g| g.to_string()),
            r.r2_adj.to_string(),
        ];
        let mut write = |term: &str, vals: [String; 4]| -> Result<()> {
            let mut rec = vec![o.spec.to_string(), o.outcome.to_string(), term.to_string()];
            rec.extend(vals);
            rec.extend(meta.iter().cloned());
            wtr.write_record(&rec)?;
            Ok(())
        };
        for c in &r.coefficients {
            write(&c.term, [c.beta.to_string(), c.se.to_string(), c.ci_low.to_string(), c.ci_high.to_string()])?;
        }
        for t in &r.dropped_collinear {
            write(t, [na(), na(), na(), na()])?;
        }
        for (t, v) in o.extras {
            write(t, [v.to_string(), na(), na(), na()])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// CSV: `rel_time,beta,ci_low,ci_high`.
pub fn write_event_study<W: Write>(writer: W, points: &[EventStudyPoint]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for p in points {
        wtr.serialize(p)?;
    }
    wtr.flush()?;
    Ok(())
}
