//! Mineral deposit records and their CSV form.
//!
//! CSV columns: `deposit_id,lat,lon,country,discovery_year,size_class,activity_intervals`
//! where `activity_intervals` is `start1-end1;start2-end2` in calendar years and
//! may be empty for deposits that were never mined.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DepositId(pub String);

impl fmt::Display for DepositId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DepositId {
    fn from(s: &str) -> Self {
        DepositId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Large,
}

impl FromStr for SizeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "small" => Ok(SizeClass::Small),
            "large" => Ok(SizeClass::Large),
            other => Err(Error::InvalidInput(format!("unknown size class '{other}'"))),
        }
    }
}

impl fmt::Display for SizeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SizeClass::Small => "small",
            SizeClass::Large => "large",
        })
    }
}

/// Closed interval of calendar years during which a mine was producing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ActivityInterval {
    pub start: i32,
    pub end: i32,
}

impl ActivityInterval {
    pub fn new(start: i32, end: i32) -> Result<Self> {
        if end < start {
            return Err(Error::InvalidInput(format!(
                "activity interval ends before it starts: {start}-{end}"
            )));
        }
        Ok(Self { start, end })
    }
}

pub fn parse_intervals(s: &str) -> Result<Vec<ActivityInterval>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|part| {
            let (a, b) = part.trim().split_once('-').ok_or_else(|| {
                Error::InvalidInput(format!("activity interval '{part}' is not start-end"))
            })?;
            let parse = |v: &str| {
                v.trim().parse::<i32>().map_err(|_| {
                    Error::InvalidInput(format!("activity interval '{part}' has a non-integer year"))
                })
            };
            ActivityInterval::new(parse(a)?, parse(b)?)
        })
        .collect()
}

pub fn format_intervals(intervals: &[ActivityInterval]) -> String {
    intervals
        .iter()
        .map(|iv| format!("{}-{}", iv.start, iv.end))
        .collect::<Vec<_>>()
        .join(";")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deposit {
    pub id: DepositId,
    pub lat: f64,
    pub lon: f64,
    pub country: String,
    pub discovery_year: Option<i32>,
    pub size_class: SizeClass,
    pub activity: Vec<ActivityInterval>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DepositRecord {
    deposit_id: String,
    lat: f64,
    lon: f64,
    country: String,
    discovery_year: Option<i32>,
    size_class: String,
    activity_intervals: String,
}

pub fn read_deposits<R: Read>(reader: R) -> Result<Vec<Deposit>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (line, rec) in rdr.deserialize::<DepositRecord>().enumerate() {
        let rec = rec?;
        let ctx = |e: Error| Error::Format {
            context: format!("deposits row {}", line + 2),
            message: e.to_string(),
        };
        out.push(Deposit {
            id: DepositId(rec.deposit_id),
            lat: rec.lat,
            lon: rec.lon,
            country: rec.country,
            discovery_year: rec.discovery_year,
            size_class: rec.size_class.parse().map_err(ctx)?,
            activity: parse_intervals(&rec.activity_intervals).map_err(ctx)?,
        });
    }
    Ok(out)
}

pub fn write_deposits<W: Write>(writer: W, deposits: &[Deposit]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for d in deposits {
        wtr.serialize(DepositRecord {
            deposit_id: d.id.0.clone(),
            lat: d.lat,
            lon: d.lon,
            country: d.country.clone(),
            discovery_year: d.discovery_year,
            size_class: d.size_class.to_string(),
            activity_intervals: format_intervals(&d.activity),
        })?;
    }
    wtr.flush()?;
    Ok(())
}
