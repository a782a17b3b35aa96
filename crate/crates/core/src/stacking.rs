//! Treatment events, their control groups and the stacked dataset.
//!
//! An event is the set of deposits of one country whose treatment starts in
//! the same period. Each event carries its own control tiles. Relative time
//! is `t = p − r`, where the reference period `r` is the last untreated
//! period, so `t = 1` is the first treated period and `t = 0` is the omitted
//! baseline.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::deposit::DepositId;
use crate::error::{Error, Result};
use crate::geo::TileId;
use crate::lifecycle::{EventKind, MineStatus, Period, PeriodCalendar};
use crate::panel::PanelObservation;
use crate::raster::Outcome;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlRule {
    NotYetOpened,
    /// deposits of the same kind treated after the event window closes
    LateTreated,
    Continuous,
}

impl ControlRule {
    pub fn as_str(self) -> &'static str {
        match self {
            ControlRule::NotYetOpened => "not_yet_opened",
            ControlRule::LateTreated => "late_treated",
            ControlRule::Continuous => "continuous",
        }
    }
}

impl fmt::Display for ControlRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControlRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [ControlRule::NotYetOpened, ControlRule::LateTreated, ControlRule::Continuous]
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown control rule '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub t_neg: i32,
    pub t_pos: i32,
}

impl Default for Window {
    fn default() -> Self {
        Window { t_neg: -5, t_pos: 5 }
    }
}

impl Window {
    pub fn new(t_neg: i32, t_pos: i32) -> Result<Self> {
        let w = Window { t_neg, t_pos };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_neg < 0 && self.t_pos > 0 {
            Ok(())
        } else {
            Err(Error::Config(format!("window must satisfy t_neg < 0 < t_pos, got ({}, {})", self.t_neg, self.t_pos)))
        }
    }

    /// Relative periods carrying an event-time dummy (all but 0).
    pub fn dummies(&self) -> impl Iterator<Item = i32> {
        (self.t_neg..=self.t_pos).filter(|&t| t != 0)
    }
}

/// Whether a dataset holds stacked events or the plain panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    Ordinary,
    Stacked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub event_id: String,
    pub country: String,
    pub kind: EventKind,
    /// period from the deposit schedule (first active for openings, last
    /// active for closings)
    pub event_period: Period,
    /// period with `t = 0`
    pub reference_period: i32,
    pub control_rule: ControlRule,
    pub treated_deposits: Vec<DepositId>,
    pub treated_tiles: Vec<TileId>,
    pub control_tiles: Vec<TileId>,
}

#[derive(Debug, Clone)]
struct TileInfo<'a> {
    deposit: &'a DepositId,
    country: &'a str,
    status: MineStatus,
    event_period: Option<Period>,
    discovery_year: Option<i32>,
}

fn tile_table(panel: &[PanelObservation]) -> BTreeMap<&TileId, TileInfo<'_>> {
    let mut m = BTreeMap::new();
    for r in panel {
        m.entry(&r.tile_id).or_insert(TileInfo {
            deposit: &r.deposit_id,
            country: r.country.as_str(),
            status: r.status,
            event_period: r.event_period,
            discovery_year: r.discovery_year,
        });
    }
    m
}

fn kind_status(kind: EventKind) -> MineStatus {
    match kind {
        EventKind::Opening => MineStatus::Opening,
        EventKind::Closing => MineStatus::Closing,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventReport {
    pub dropped_no_controls: usize,
    /// tiles left out by the recent-discovery restriction
    pub excluded_not_recent: usize,
}

/// One event per `(country, event_period)` among deposits of the given kind.
/// For openings with not-yet-opened controls, both groups are limited to
/// deposits discovered within the study window. Events without any eligible
/// control tile are dropped.
pub fn build_events(
    panel: &[PanelObservation],
    kind: EventKind,
    rule: ControlRule,
    window: Window,
    calendar: &PeriodCalendar,
) -> (Vec<Event>, EventReport) {
    let mut report = EventReport::default();
    let recent_only = kind == EventKind::Opening && rule == ControlRule::NotYetOpened;
    let mut tiles = tile_table(panel);
    if recent_only {
        let before = tiles.len();
        tiles.retain(|_, t| t.discovery_year.is_some_and(|y| y >= calendar.start_year));
        report.excluded_not_recent = before - tiles.len();
    }
    let status = kind_status(kind);

    let mut groups: BTreeMap<(&str, Period), (Vec<DepositId>, Vec<TileId>)> = BTreeMap::new();
    for (&tile, info) in &tiles {
        if let (true, Some(ep)) = (info.status == status, info.event_period) {
            let g = groups.entry((info.country, ep)).or_default();
            if !g.0.contains(info.deposit) {
                g.0.push(info.deposit.clone());
            }
            g.1.push(tile.clone());
        }
    }

    let mut events = Vec::new();
    for ((country, ep), (mut deps, treated_tiles)) in groups {
        deps.sort();
        let control_tiles: Vec<TileId> = tiles
            .iter()
            .filter(|(_, t)| t.country == country)
            .filter(|(_, t)| match rule {
                ControlRule::NotYetOpened => t.status == MineStatus::NotYetOpened,
                ControlRule::Continuous => t.status == MineStatus::Continuous,
                ControlRule::LateTreated => {
                    t.status == status && t.event_period.is_some_and(|p| i32::from(p) > i32::from(ep) + window.t_pos)
                }
            })
            .map(|(&id, _)| id.clone())
            .collect();
        let event_id = format!("{}-{}-{:02}", kind_label(kind), country, ep);
        if control_tiles.is_empty() {
            log::warn!("event {event_id} has no eligible control tiles and is dropped");
            report.dropped_no_controls += 1;
            continue;
        }
        events.push(Event {
            event_id,
            country: country.to_string(),
            kind,
            event_period: ep,
            reference_period: i32::from(ep) - 1,
            control_rule: rule,
            treated_deposits: deps,
            treated_tiles,
            control_tiles,
        });
    }
    events.sort_by(|a, b| a.event_id.cmp(&b.event_id));
    (events, report)
}

fn kind_label(kind: EventKind) -> &'static str {
    match kind {
        EventKind::Opening => "opening",
        EventKind::Closing => "closing",
    }
}

/// Re-centres closing events on the last active period, so `t = 1` is the
/// first period without activity.
pub fn center_closing(events: Vec<Event>) -> Result<Vec<Event>> {
    events
        .into_iter()
        .map(|mut e| {
            if e.kind != EventKind::Closing {
                return Err(Error::InvalidInput(format!("event {} is not a closing event", e.event_id)));
            }
            e.reference_period = i32::from(e.event_period);
            Ok(e)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackedRow<'a> {
    /// index into the dataset's events
    pub event: u32,
    pub rel_time: Option<i32>,
    pub treat_group: bool,
    pub treat_post: bool,
    pub obs: &'a PanelObservation,
}

impl StackedRow<'_> {
    pub fn outcome(&self, o: Outcome) -> Option<f64> {
        self.obs.outcome(o)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackedDataset<'a> {
    pub design: Design,
    pub events: Vec<Event>,
    pub rows: Vec<StackedRow<'a>>,
    pub dropped_unbalanced: usize,
}

/// Replicates treated and control tiles of every event over the window
/// `[r + t_neg, r + t_pos]` clipped to the calendar. With `balanced`, events
/// whose window leaves the calendar are dropped.
pub fn stack<'a>(
    panel: &'a [PanelObservation],
    events: &[Event],
    window: Window,
    balanced: bool,
    n_periods: Period,
) -> Result<StackedDataset<'a>> {
    if events.is_empty() {
        return Err(Error::EmptyInput("events"));
    }
    window.validate()?;
    let index: HashMap<(&TileId, Period), &PanelObservation> =
        panel.iter().map(|r| ((&r.tile_id, r.period), r)).collect();
    let mut kept = Vec::new();
    let mut rows = Vec::new();
    let mut dropped = 0;
    for ev in events {
        let lo = ev.reference_period + window.t_neg;
        let hi = ev.reference_period + window.t_pos;
        if balanced && (lo < 1 || hi > i32::from(n_periods)) {
            dropped += 1;
            continue;
        }
        let e = kept.len() as u32;
        let periods = lo.max(1)..=hi.min(i32::from(n_periods));
        for (tiles, treated) in [(&ev.treated_tiles, true), (&ev.control_tiles, false)] {
            for tile in tiles {
                for p in periods.clone() {
                    if let Some(&obs) = index.get(&(tile, p as Period)) {
                        let t = p - ev.reference_period;
                        rows.push(StackedRow {
                            event: e,
                            rel_time: Some(t),
                            treat_group: treated,
                            treat_post: treated && t >= 1,
                            obs,
                        });
                    }
                }
            }
        }
        kept.push(ev.clone());
    }
    Ok(StackedDataset { design: Design::Stacked, events: kept, rows, dropped_unbalanced: dropped })
}

/// The unstacked panel for the ordinary design: one pseudo-event per country
/// covering every period, holding the treated tiles of the given kind and the
/// rule's control tiles. Treated tiles switch on from their own onset.
pub fn ordinary_dataset<'a>(
    panel: &'a [PanelObservation],
    kind: EventKind,
    rule: ControlRule,
    calendar: &PeriodCalendar,
) -> Result<StackedDataset<'a>> {
    let status = kind_status(kind);
    let recent_only = kind == EventKind::Opening && rule == ControlRule::NotYetOpened;
    let control_status = match rule {
        ControlRule::NotYetOpened => Some(MineStatus::NotYetOpened),
        ControlRule::Continuous => Some(MineStatus::Continuous),
        ControlRule::LateTreated => None,
    };
    let names: std::collections::BTreeSet<&str> = panel.iter().map(|r| r.country.as_str()).collect();
    let countries: BTreeMap<&str, u32> = names.into_iter().enumerate().map(|(i, c)| (c, i as u32)).collect();
    let events: Vec<Event> = countries
        .keys()
        .map(|c| Event {
            event_id: format!("ordinary-{c}"),
            country: c.to_string(),
            kind,
            event_period: 1,
            reference_period: 0,
            control_rule: rule,
            treated_deposits: Vec::new(),
            treated_tiles: Vec::new(),
            control_tiles: Vec::new(),
        })
        .collect();
    let mut rows = Vec::new();
    for r in panel {
        if recent_only && !r.discovery_year.is_some_and(|y| y >= calendar.start_year) {
            continue;
        }
        let treated = r.status == status && r.event_period.is_some();
        if !treated && Some(r.status) != control_status {
            continue;
        }
        let reference = match (treated, r.event_period) {
            (true, Some(ep)) if kind == EventKind::Opening => Some(i32::from(ep) - 1),
            (true, Some(ep)) => Some(i32::from(ep)),
            _ => None,
        };
        let rel_time = reference.map(|g| i32::from(r.period) - g);
        rows.push(StackedRow {
            event: countries[r.country.as_str()],
            rel_time,
            treat_group: treated,
            treat_post: rel_time.is_some_and(|t| t >= 1),
            obs: r,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("ordinary design sample"));
    }
    Ok(StackedDataset { design: Design::Ordinary, events, rows, dropped_unbalanced: 0 })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// CSV: `event_id,tile_id,deposit_id,period,rel_time,treat_group,treat_post,`
/// followed by the outcome columns.
pub fn write_stacked<W: Write>(writer: W, data: &StackedDataset<'_>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["event_id", "tile_id", "deposit_id", "period", "rel_time", "treat_group", "treat_post"];
    header.extend(Outcome::ALL.iter().map(|o| o.as_str()));
    wtr.write_record(&header)?;
    for r in &data.rows {
        let mut rec = vec![
            data.events[r.event as usize].event_id.clone(),
            r.obs.tile_id.0.clone(),
            r.obs.deposit_id.0.clone(),
            r.obs.period.to_string(),
            opt(r.rel_time),
            u8::from(r.treat_group).to_string(),
            u8::from(r.treat_post).to_string(),
        ];
        rec.extend(Outcome::ALL.iter().map(|&o| opt(r.outcome(o))));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::tests::obs;

    fn tile(
        panel: &mut Vec<PanelObservation>,
        id: &str,
        dep: &str,
        country: &str,
        status: MineStatus,
        ep: Option<Period>,
        kind: Option<EventKind>,
    ) {
        for p in 1..=12 {
            let mut o = obs(id, dep, country, p, status, 1000.0, f64::from(p));
            o.event_period = ep;
            o.event_kind = kind;
            o.discovery_year = Some(1990);
            panel.push(o);
        }
    }

    fn opening(panel: &mut Vec<PanelObservation>, id: &str, dep: &str, country: &str, ep: Period) {
        tile(panel, id, dep, country, MineStatus::Opening, Some(ep), Some(EventKind::Opening));
    }

    fn nyo(panel: &mut Vec<PanelObservation>, id: &str, dep: &str, country: &str) {
        tile(panel, id, dep, country, MineStatus::NotYetOpened, None, None);
    }

    #[test]
    fn same_country_same_period_is_one_event() {
        let mut p = Vec::new();
        opening(&mut p, "a", "d1", "A", 7);
        opening(&mut p, "b", "d2", "A", 7);
        nyo(&mut p, "c", "d3", "A");
        let (ev, _) = build_events(&p, EventKind::Opening, ControlRule::NotYetOpened, Window::default(), &PeriodCalendar::default());
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].treated_deposits, vec![DepositId::from("d1"), DepositId::from("d2")]);
        assert_eq!(ev[0].reference_period, 6);
    }

    #[test]
    fn late_treated_horizon() {
        let mut p = Vec::new();
        opening(&mut p, "a", "d1", "A", 4);
        opening(&mut p, "b", "d2", "A", 8);
        opening(&mut p, "c", "d3", "A", 10);
        let (ev, _) = build_events(&p, EventKind::Opening, ControlRule::LateTreated, Window::default(), &PeriodCalendar::default());
        let first = ev.iter().find(|e| e.event_period == 4).unwrap();
        assert_eq!(first.control_tiles, vec![TileId("c".into())]);
        // d3 has nobody later than 15
        assert!(ev.iter().all(|e| e.event_period != 10));
    }

    #[test]
    fn other_country_never_control() {
        let mut p = Vec::new();
        opening(&mut p, "a", "d1", "A", 7);
        nyo(&mut p, "b", "d2", "B");
        let (ev, rep) = build_events(&p, EventKind::Opening, ControlRule::NotYetOpened, Window::default(), &PeriodCalendar::default());
        assert!(ev.is_empty());
        assert_eq!(rep.dropped_no_controls, 1);
    }

    #[test]
    fn old_discoveries_excluded_for_openings() {
        let mut p = Vec::new();
        opening(&mut p, "a", "d1", "A", 7);
        nyo(&mut p, "b", "d2", "A");
        for r in p.iter_mut().filter(|r| r.tile_id.0 == "b") {
            r.discovery_year = Some(1970);
        }
        let (ev, rep) = build_events(&p, EventKind::Opening, ControlRule::NotYetOpened, Window::default(), &PeriodCalendar::default());
        assert!(ev.is_empty());
        assert_eq!(rep.excluded_not_recent, 1);
    }

    fn simple_events(reference: i32) -> (Vec<PanelObservation>, Vec<Event>) {
        let mut p = Vec::new();
        opening(&mut p, "a", "d1", "A", (reference + 1) as Period);
        nyo(&mut p, "c", "d3", "A");
        let (ev, _) = build_events(&p, EventKind::Opening, ControlRule::NotYetOpened, Window::default(), &PeriodCalendar::default());
        (p, ev)
    }

    #[test]
    fn full_window_balanced() {
        let (p, ev) = simple_events(6);
        let s = stack(&p, &ev, Window::default(), true, 12).unwrap();
        let mut ts: Vec<i32> = s.rows.iter().filter(|r| r.treat_group).map(|r| r.rel_time.unwrap()).collect();
        ts.sort_unstable();
        assert_eq!(ts, (-5..=5).collect::<Vec<_>>());
        for r in &s.rows {
            assert_eq!(r.treat_post, r.treat_group && r.rel_time.unwrap() >= 1);
        }
    }

    #[test]
    fn early_event_dropped_when_balanced() {
        let (p, ev) = simple_events(3);
        let s = stack(&p, &ev, Window::default(), true, 12).unwrap();
        assert!(s.rows.is_empty());
        assert_eq!(s.dropped_unbalanced, 1);
        let s = stack(&p, &ev, Window::default(), false, 12).unwrap();
        // periods 1..=8 for two tiles
        assert_eq!(s.rows.len(), 2 * 8);
    }

    #[test]
    fn shared_control_duplicated() {
        let mut p = Vec::new();
        opening(&mut p, "a", "d1", "A", 6);
        opening(&mut p, "b", "d2", "A", 7);
        nyo(&mut p, "c", "d3", "A");
        let (ev, _) = build_events(&p, EventKind::Opening, ControlRule::NotYetOpened, Window::default(), &PeriodCalendar::default());
        let s = stack(&p, &ev, Window::default(), false, 12).unwrap();
        let events_with_c: std::collections::BTreeSet<u32> =
            s.rows.iter().filter(|r| r.obs.tile_id.0 == "c" && r.obs.period == 6).map(|r| r.event).collect();
        assert_eq!(events_with_c.len(), 2);
        // row count = Σ tiles × observed periods
        let expected: usize = s
            .events
            .iter()
            .map(|e| {
                let lo = (e.reference_period - 5).max(1);
                let hi = (e.reference_period + 5).min(12);
                (e.treated_tiles.len() + e.control_tiles.len()) * (hi - lo + 1) as usize
            })
            .sum();
        assert_eq!(s.rows.len(), expected);
        // a treated tile is never a control
        assert!(s.rows.iter().filter(|r| r.obs.status == MineStatus::Opening).all(|r| r.treat_group));
    }

    #[test]
    fn single_event_is_panel_slice() {
        let (p, ev) = simple_events(4);
        let s = stack(&p, &ev, Window::default(), false, 12).unwrap();
        let mut stacked: Vec<(String, Period)> = s.rows.iter().map(|r| (r.obs.tile_id.0.clone(), r.obs.period)).collect();
        let mut slice: Vec<(String, Period)> =
            p.iter().filter(|r| r.period <= 9).map(|r| (r.tile_id.0.clone(), r.period)).collect();
        stacked.sort();
        slice.sort();
        assert_eq!(stacked, slice);
    }

    fn closing_panel(last_active: Period) -> Vec<PanelObservation> {
        let mut p = Vec::new();
        tile(&mut p, "a", "d1", "A", MineStatus::Closing, Some(last_active), Some(EventKind::Closing));
        tile(&mut p, "b", "d2", "A", MineStatus::Continuous, None, None);
        p
    }

    #[test]
    fn closing_centered_on_last_active() {
        let p = closing_panel(7);
        let (ev, _) = build_events(&p, EventKind::Closing, ControlRule::Continuous, Window::default(), &PeriodCalendar::default());
        let ev = center_closing(ev).unwrap();
        assert_eq!(ev[0].reference_period, 7);
        let s = stack(&p, &ev, Window::default(), false, 12).unwrap();
        let zero: Vec<_> = s.rows.iter().filter(|r| r.rel_time == Some(0)).collect();
        assert!(zero.iter().all(|r| r.obs.period == 7));
        // controls share the event's alignment
        assert_eq!(zero.len(), 2);
    }

    #[test]
    fn closing_in_last_period_dropped_when_balanced() {
        let p = closing_panel(12);
        let (ev, _) = build_events(&p, EventKind::Closing, ControlRule::Continuous, Window::default(), &PeriodCalendar::default());
        let ev = center_closing(ev).unwrap();
        let s = stack(&p, &ev, Window::default(), true, 12).unwrap();
        assert!(s.events.is_empty());
        assert!(center_closing(simple_events(6).1).is_err());
    }

    #[test]
    fn window_validation() {
        assert!(Window::new(0, 5).is_err());
        assert!(Window::new(-3, 0).is_err());
        assert_eq!(Window::default().dummies().count(), 10);
    }

    #[test]
    fn stacked_csv_header() {
        let (p, ev) = simple_events(6);
        let s = stack(&p, &ev, Window::default(), true, 12).unwrap();
        let mut buf = Vec::new();
        write_stacked(&mut buf, &s).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "event_id,tile_id,deposit_id,period,rel_time,treat_group,treat_post,log_urban,log_crop,wealth_z,conflict_any\n"
        ));
    }
}
