//! Study calendar and deposit life-cycle classification.
//!
//! The study window is split into equal periods (12 × 3 years from 1984 by
//! default). A deposit is active in a period when any of its activity years
//! falls inside the period's calendar years. Its status follows from the set
//! of active periods:
//!
//! | active periods        | status            |
//! |-----------------------|-------------------|
//! | all                   | `Continuous`      |
//! | `k..=N`, `k ≥ 2`      | `Opening`         |
//! | `1..=m`, `m < N`      | `Closing`         |
//! | any other non-empty   | `OpeningClosing`  |
//! | none, ended earlier   | `NoLongerActive`  |
//! | none otherwise        | `NotYetOpened`    |

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::deposit::{ActivityInterval, Deposit, DepositId};
use crate::error::{Error, Result};

/// Period index, 1-based.
pub type Period = u8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodCalendar {
    pub start_year: i32,
    pub period_length: i32,
    pub n_periods: u8,
}

impl Default for PeriodCalendar {
    fn default() -> Self {
        Self { start_year: 1984, period_length: 3, n_periods: 12 }
    }
}

impl PeriodCalendar {
    pub fn validate(&self) -> Result<()> {
        if self.period_length < 1 || self.n_periods < 1 {
            return Err(Error::Config("calendar needs period_length >= 1 and n_periods >= 1".into()));
        }
        Ok(())
    }

    pub fn end_year(&self) -> i32 {
        self.start_year + self.period_length * self.n_periods as i32 - 1
    }

    /// First and last calendar year of period `p`.
    pub fn years(&self, p: Period) -> (i32, i32) {
        let first = self.start_year + self.period_length * (p as i32 - 1);
        (first, first + self.period_length - 1)
    }

    pub fn period_of(&self, year: i32) -> Option<Period> {
        if year < self.start_year || year > self.end_year() {
            return None;
        }
        Some(((year - self.start_year) / self.period_length + 1) as Period)
    }

    pub fn periods(&self) -> impl Iterator<Item = Period> {
        1..=self.n_periods
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MineStatus {
    Continuous,
    Opening,
    Closing,
    OpeningClosing,
    NoLongerActive,
    NotYetOpened,
}

impl MineStatus {
    pub const ALL: [MineStatus; 6] = [
        MineStatus::Continuous,
        MineStatus::Opening,
        MineStatus::Closing,
        MineStatus::OpeningClosing,
        MineStatus::NoLongerActive,
        MineStatus::NotYetOpened,
    ];

    /// Active during at least one study period.
    pub fn is_active(self) -> bool {
        matches!(
            self,
            MineStatus::Continuous | MineStatus::Opening | MineStatus::Closing | MineStatus::OpeningClosing
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MineStatus::Continuous => "Continuous",
            MineStatus::Opening => "Opening",
            MineStatus::Closing => "Closing",
            MineStatus::OpeningClosing => "OpeningClosing",
            MineStatus::NoLongerActive => "NoLongerActive",
            MineStatus::NotYetOpened => "NotYetOpened",
        }
    }
}

impl fmt::Display for MineStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MineStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MineStatus::ALL
            .into_iter()
            .find(|st| st.as_str() == s.trim())
            .ok_or_else(|| Error::InvalidInput(format!("unknown mine status '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Opening,
    Closing,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Opening => "opening",
            EventKind::Closing => "closing",
        })
    }
}

impl FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "opening" => Ok(EventKind::Opening),
            "closing" => Ok(EventKind::Closing),
            other => Err(Error::InvalidInput(format!("unknown event kind '{other}'"))),
        }
    }
}

/// Status of a deposit together with its treatment timing.
///
/// For `Opening` deposits `event_period` is the first active period; for
/// `Closing` deposits it is the last active period.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreatmentSchedule {
    pub deposit_id: DepositId,
    pub status: MineStatus,
    pub event_period: Option<Period>,
    pub event_kind: Option<EventKind>,
}

impl TreatmentSchedule {
    /// First period in which the deposit is treated (first active period for
    /// openings, first inactive period for closings).
    pub fn onset_period(&self) -> Option<Period> {
        match (self.event_kind, self.event_period) {
            (Some(EventKind::Opening), Some(p)) => Some(p),
            (Some(EventKind::Closing), Some(p)) => Some(p + 1),
            _ => None,
        }
    }
}

fn check_disjoint(intervals: &[ActivityInterval]) -> Result<Vec<ActivityInterval>> {
    let mut sorted = intervals.to_vec();
    sorted.sort();
    for pair in sorted.windows(2) {
        // touching intervals (end == next start) are allowed
        if pair[1].start < pair[0].end {
            return Err(Error::InvalidInput(format!(
                "overlapping activity intervals {}-{} and {}-{}",
                pair[0].start, pair[0].end, pair[1].start, pair[1].end
            )));
        }
    }
    Ok(sorted)
}

/// Per-period activity flags, index `p - 1`.
pub fn active_periods(intervals: &[ActivityInterval], calendar: &PeriodCalendar) -> Vec<bool> {
    calendar
        .periods()
        .map(|p| {
            let (lo, hi) = calendar.years(p);
            intervals.iter().any(|iv| iv.start <= hi && iv.end >= lo)
        })
        .collect()
}

pub fn classify_status(
    intervals: &[ActivityInterval],
    _discovery_year: Option<i32>,
    calendar: &PeriodCalendar,
) -> Result<MineStatus> {
    let intervals = check_disjoint(intervals)?;
    let active = active_periods(&intervals, calendar);
    let n = active.len();
    let first = active.iter().position(|&a| a);
    let Some(first) = first else {
        let ended_before = intervals.iter().any(|iv| iv.end < calendar.start_year);
        return Ok(if ended_before { MineStatus::NoLongerActive } else { MineStatus::NotYetOpened });
    };
    let last = active.iter().rposition(|&a| a).expect("non-empty");
    let contiguous = active[first..=last].iter().all(|&a| a);
    Ok(match (contiguous, first, last) {
        (true, 0, l) if l == n - 1 => MineStatus::Continuous,
        (true, _, l) if l == n - 1 => MineStatus::Opening,
        (true, 0, _) => MineStatus::Closing,
        _ => MineStatus::OpeningClosing,
    })
}

pub fn schedule(deposit: &Deposit, calendar: &PeriodCalendar) -> Result<TreatmentSchedule> {
    let status = classify_status(&deposit.activity, deposit.discovery_year, calendar)
        .map_err(|e| Error::InvalidInput(format!("deposit {}: {e}", deposit.id)))?;
    let active = active_periods(&deposit.activity, calendar);
    let (event_period, event_kind) = match status {
        MineStatus::Opening => (
            active.iter().position(|&a| a).map(|i| (i + 1) as Period),
            Some(EventKind::Opening),
        ),
        MineStatus::Closing => (
            active.iter().rposition(|&a| a).map(|i| (i + 1) as Period),
            Some(EventKind::Closing),
        ),
        _ => (None, None),
    };
    Ok(TreatmentSchedule { deposit_id: deposit.id.clone(), status, event_period, event_kind })
}

pub fn schedule_all(deposits: &[Deposit], calendar: &PeriodCalendar) -> Result<Vec<TreatmentSchedule>> {
    deposits.iter().map(|d| schedule(d, calendar)).collect()
}

pub fn status_map(schedules: &[TreatmentSchedule]) -> BTreeMap<DepositId, MineStatus> {
    schedules.iter().map(|s| (s.deposit_id.clone(), s.status)).collect()
}

pub fn is_recent_discovery(deposit: &Deposit, calendar: &PeriodCalendar) -> bool {
    deposit.discovery_year.is_some_and(|y| y >= calendar.start_year)
}

/// Keeps deposits discovered during or after the first study year. Returns
/// the kept deposits and the number of rows excluded for a missing year.
pub fn restrict_recent_discoveries(
    deposits: &[Deposit],
    calendar: &PeriodCalendar,
) -> (Vec<Deposit>, usize) {
    let missing = deposits.iter().filter(|d| d.discovery_year.is_none()).count();
    if missing > 0 {
        log::warn!("{missing} deposits without discovery year excluded");
    }
    let kept = deposits.iter().filter(|d| is_recent_discovery(d, calendar)).cloned().collect();
    (kept, missing)
}

#[derive(Debug, Serialize, Deserialize)]
struct StatusRecord {
    deposit_id: String,
    status: String,
    event_period: Option<u8>,
    event_kind: Option<String>,
}

pub fn write_statuses<W: Write>(writer: W, schedules: &[TreatmentSchedule]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for s in schedules {
        wtr.serialize(StatusRecord {
            deposit_id: s.deposit_id.0.clone(),
            status: s.status.to_string(),
            event_period: s.event_period,
            event_kind: s.event_kind.map(|k| k.to_string()),
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_statuses<R: Read>(reader: R) -> Result<Vec<TreatmentSchedule>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize::<StatusRecord>()
        .map(|rec| {
            let rec = rec?;
            Ok(TreatmentSchedule {
                deposit_id: DepositId(rec.deposit_id),
                status: rec.status.parse()?,
                event_period: rec.event_period,
                event_kind: rec.event_kind.as_deref().filter(|s| !s.is_empty()).map(str::parse).transpose()?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deposit::{parse_intervals, SizeClass};
    use proptest::prelude::*;

    fn cal() -> PeriodCalendar {
        PeriodCalendar::default()
    }

    fn status(spec: &str) -> MineStatus {
        classify_status(&parse_intervals(spec).unwrap(), None, &cal()).unwrap()
    }

    fn deposit(spec: &str, discovery: Option<i32>) -> Deposit {
        Deposit {
            id: "D".into(),
            lat: 0.0,
            lon: 0.0,
            country: "X".into(),
            discovery_year: discovery,
            size_class: SizeClass::Small,
            activity: parse_intervals(spec).unwrap(),
        }
    }

    #[test]
    fn period_of_boundaries() {
        let c = cal();
        assert_eq!(c.period_of(1984), Some(1));
        assert_eq!(c.period_of(1986), Some(1));
        assert_eq!(c.period_of(1987), Some(2));
        assert_eq!(c.period_of(2019), Some(12));
        assert_eq!(c.period_of(1983), None);
        assert_eq!(c.period_of(2020), None);
        assert_eq!(c.years(12), (2017, 2019));
    }

    #[test]
    fn taxonomy_examples() {
        assert_eq!(status("1980-2019"), MineStatus::Continuous);
        assert_eq!(status("1996-2019"), MineStatus::Opening);
        assert_eq!(status("1970-1995"), MineStatus::Closing);
        assert_eq!(status("1990-2000"), MineStatus::OpeningClosing);
        assert_eq!(status(""), MineStatus::NotYetOpened);
        assert_eq!(status("1960-1975"), MineStatus::NoLongerActive);
        assert_eq!(status("2021-2023"), MineStatus::NotYetOpened);
        // active in period 1, closes, reopens before period 12
        assert_eq!(status("1980-1990;2000-2010"), MineStatus::OpeningClosing);
    }

    #[test]
    fn event_periods() {
        let s = schedule(&deposit("1996-2019", Some(1990)), &cal()).unwrap();
        assert_eq!((s.status, s.event_period, s.event_kind), (MineStatus::Opening, Some(5), Some(EventKind::Opening)));
        assert_eq!(s.onset_period(), Some(5));
        let s = schedule(&deposit("1970-1995", Some(1960)), &cal()).unwrap();
        assert_eq!((s.status, s.event_period), (MineStatus::Closing, Some(4)));
        assert_eq!(s.onset_period(), Some(5));
        let s = schedule(&deposit("", Some(1992)), &cal()).unwrap();
        assert_eq!((s.status, s.event_period, s.event_kind), (MineStatus::NotYetOpened, None, None));
    }

    #[test]
    fn overlapping_intervals_rejected() {
        let ivs = parse_intervals("1980-1995;1990-2000").unwrap();
        assert!(classify_status(&ivs, None, &cal()).is_err());
    }

    #[test]
    fn recent_discoveries() {
        let deps = vec![deposit("", Some(1990)), deposit("", Some(1975)), deposit("", None)];
        let (kept, missing) = restrict_recent_discoveries(&deps, &cal());
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].discovery_year, Some(1990));
        assert_eq!(missing, 1);
        assert!(restrict_recent_discoveries(&[], &cal()).0.is_empty());
    }

    #[test]
    fn statuses_csv_round_trip() {
        let deps = [deposit("1996-2019", Some(1990)), deposit("1970-1995", None), deposit("", None)];
        let sched = schedule_all(&deps, &cal()).unwrap();
        let mut buf = Vec::new();
        write_statuses(&mut buf, &sched).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("deposit_id,status,event_period,event_kind\n"));
        assert_eq!(read_statuses(buf.as_slice()).unwrap(), sched);
    }

    fn intervals_strategy() -> impl Strategy<Value = Vec<ActivityInterval>> {
        prop::collection::vec((1950i32..2030, 0i32..15, 0i32..6), 0..4).prop_map(|parts| {
            let mut out: Vec<ActivityInterval> = Vec::new();
            let mut cursor = 1940;
            for (start, len, gap) in parts {
                let s = start.max(cursor + gap + 1);
                let e = s + len;
                out.push(ActivityInterval { start: s, end: e });
                cursor = e;
            }
            out
        })
    }

    proptest! {
        #[test]
        fn opening_and_closing_shapes(ivs in intervals_strategy()) {
            let c = cal();
            let st = classify_status(&ivs, None, &c).unwrap();
            let act = active_periods(&ivs, &c);
            match st {
                MineStatus::Opening => prop_assert!(!act[0] && act[11]),
                MineStatus::Closing => prop_assert!(act[0] && !act[11]),
                MineStatus::Continuous => prop_assert!(act.iter().all(|&a| a)),
                MineStatus::NoLongerActive | MineStatus::NotYetOpened => prop_assert!(act.iter().all(|&a| !a)),
                MineStatus::OpeningClosing => prop_assert!(act.iter().any(|&a| a)),
            }
        }

        #[test]
        fn splitting_an_interval_keeps_status(start in 1960i32..2025, len in 1i32..40, cut in 0i32..40, touch in any::<bool>()) {
            let end = start + len;
            let cut = start + cut % len;
            let whole = [ActivityInterval { start, end }];
            let second_start = if touch { cut } else { cut + 1 };
            prop_assume!(second_start <= end);
            let split = [ActivityInterval { start, end: cut }, ActivityInterval { start: second_start, end }];
            let c = cal();
            prop_assert_eq!(classify_status(&whole, None, &c).unwrap(), classify_status(&split, None, &c).unwrap());
        }
    }
}
