//! Segmentation masks, land-cover shares and outcome rows.
//!
//! Masks are stored as binary PGM (`P5`, maxval 255) with one byte per pixel
//! holding the class label. Files are named `<tile_id>_<period>_landuse.pgm`
//! and `<tile_id>_<period>_mine.pgm`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::TileId;
use crate::lifecycle::Period;

pub const MASK_SIZE: usize = 224;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum LandClass {
    Other = 0,
    Urban = 1,
    Cropland = 2,
    Water = 3,
}

impl LandClass {
    pub const ALL: [LandClass; 4] = [LandClass::Other, LandClass::Urban, LandClass::Cropland, LandClass::Water];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    LandUse,
    Mine,
}

impl MaskKind {
    fn max_label(self) -> u8 {
        match self {
            MaskKind::LandUse => 3,
            MaskKind::Mine => 1,
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            MaskKind::LandUse => "landuse",
            MaskKind::Mine => "mine",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub kind: MaskKind,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Mask {
    pub fn filled(kind: MaskKind, label: u8) -> Self {
        Mask { kind, width: MASK_SIZE, height: MASK_SIZE, pixels: vec![label; MASK_SIZE * MASK_SIZE] }
    }

    pub fn from_pixels(kind: MaskKind, pixels: Vec<u8>) -> Result<Self> {
        let m = Mask { kind, width: MASK_SIZE, height: MASK_SIZE, pixels };
        m.validate("in-memory mask")?;
        Ok(m)
    }

    fn validate(&self, context: &str) -> Result<()> {
        let fmt_err = |message: String| Error::Format { context: context.to_string(), message };
        if self.width != MASK_SIZE || self.height != MASK_SIZE {
            return Err(fmt_err(format!(
                "mask is {}x{}, expected {MASK_SIZE}x{MASK_SIZE}",
                self.width, self.height
            )));
        }
        if self.pixels.len() != self.width * self.height {
            return Err(fmt_err(format!("expected {} pixels, got {}", self.width * self.height, self.pixels.len())));
        }
        if let Some(i) = self.pixels.iter().position(|&v| v > self.kind.max_label()) {
            return Err(fmt_err(format!(
                "unknown label {} at pixel (x={}, y={})",
                self.pixels[i],
                i % self.width,
                i / self.width
            )));
        }
        Ok(())
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8], kind: MaskKind, context: &str) -> Result<Self> {
        let fmt_err = |message: &str| Error::Format { context: context.to_string(), message: message.to_string() };
        let mut pos = 0usize;
        let mut fields = Vec::with_capacity(4);
        // header: magic, width, height, maxval separated by whitespace and comments
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(fmt_err("truncated PGM header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| fmt_err("non-ASCII header"))?);
        }
        if fields[0] != "P5" {
            return Err(fmt_err("not a binary PGM (missing P5 magic)"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| fmt_err("non-numeric header field"));
        let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(fmt_err("maxval must be in 1..=255"));
        }
        // exactly one whitespace byte before the raster
        pos += 1;
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() != width * height {
            return Err(Error::Format {
                context: context.to_string(),
                message: format!("{width}x{height} header but {} raster bytes", raster.len()),
            });
        }
        let mask = Mask { kind, width, height, pixels: raster.to_vec() };
        mask.validate(context)?;
        Ok(mask)
    }
}

pub fn read_mask(path: &Path, kind: MaskKind) -> Result<Mask> {
    let bytes = fs::read(path)?;
    Mask::from_pgm(&bytes, kind, &path.display().to_string())
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    fs::write(path, mask.to_pgm())?;
    Ok(())
}

pub fn mask_path(dir: &Path, tile: &TileId, period: Period, kind: MaskKind) -> PathBuf {
    dir.join(format!("{}_{}_{}.pgm", tile, period, kind.suffix()))
}

/// Pixel counts per land class over non-mine pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassCounts {
    pub counts: [u32; 4],
    pub valid: u32,
}

impl ClassCounts {
    pub fn count(&self, class: LandClass) -> u32 {
        self.counts[class as usize]
    }

    pub fn share(&self, class: LandClass) -> f64 {
        self.count(class) as f64 / self.valid as f64
    }
}

pub fn class_shares(landuse: &Mask, mine: &Mask) -> Result<ClassCounts> {
    if landuse.pixels.len() != mine.pixels.len() {
        return Err(Error::InvalidInput("land-use and mine masks differ in size".into()));
    }
    let mut counts = [0u32; 4];
    let mut valid = 0u32;
    for (&c, &m) in landuse.pixels.iter().zip(&mine.pixels) {
        if m == 0 {
            counts[c as usize] += 1;
            valid += 1;
        }
    }
    if valid == 0 {
        return Err(Error::UndefinedShare);
    }
    Ok(ClassCounts { counts, valid })
}

/// How zero shares enter the log outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroShare {
    /// `ln((c + ½)/(n + ½))`, keeps zero-share tiles in the sample
    #[default]
    HalfPixel,
    /// plain `ln(c/n)`, zero shares become missing
    Drop,
}

/// Log share with half-pixel smoothing.
pub fn log_share(class_pixels: u32, valid_pixels: u32) -> f64 {
    ((class_pixels as f64 + 0.5) / (valid_pixels as f64 + 0.5)).ln()
}

pub fn log_share_with(class_pixels: u32, valid_pixels: u32, policy: ZeroShare) -> Option<f64> {
    match policy {
        ZeroShare::HalfPixel => Some(log_share(class_pixels, valid_pixels)),
        ZeroShare::Drop if class_pixels == 0 => None,
        ZeroShare::Drop => Some((class_pixels as f64 / valid_pixels as f64).ln()),
    }
}

/// Standardizes with the sample standard deviation (divisor `n − 1`).
pub fn zscore(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: values.len() });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if !(sd > 0.0) || sd <= 1e-14 * mean.abs() {
        return Err(Error::Degenerate("zero variance"));
    }
    Ok(values.iter().map(|v| (v - mean) / sd).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub tile_id: TileId,
    pub period: Period,
    pub log_urban: Option<f64>,
    pub log_crop: Option<f64>,
    pub wealth_z: Option<f64>,
    pub conflict_count: Option<u32>,
}

impl OutcomeRow {
    pub fn conflict_any(&self) -> Option<u8> {
        self.conflict_count.map(|c| u8::from(c >= 1))
    }
}

/// Outcome variables carried through the panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    LogUrban,
    LogCrop,
    WealthZ,
    ConflictAny,
}

impl Outcome {
    pub const ALL: [Outcome; 4] = [Outcome::LogUrban, Outcome::LogCrop, Outcome::WealthZ, Outcome::ConflictAny];
    /// Continuous outcomes subject to outlier screening.
    pub const SCREENED: [Outcome; 3] = [Outcome::LogUrban, Outcome::LogCrop, Outcome::WealthZ];

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::LogUrban => "log_urban",
            Outcome::LogCrop => "log_crop",
            Outcome::WealthZ => "wealth_z",
            Outcome::ConflictAny => "conflict_any",
        }
    }

    pub fn get(self, row: &OutcomeRow) -> Option<f64> {
        match self {
            Outcome::LogUrban => row.log_urban,
            Outcome::LogCrop => row.log_crop,
            Outcome::WealthZ => row.wealth_z,
            Outcome::ConflictAny => row.conflict_any().map(f64::from),
        }
    }

    /// Overwrites the value; for `ConflictAny` only clearing is meaningful.
    pub fn set(self, row: &mut OutcomeRow, value: Option<f64>) {
        match self {
            Outcome::LogUrban => row.log_urban = value,
            Outcome::LogCrop => row.log_crop = value,
            Outcome::WealthZ => row.wealth_z = value,
            Outcome::ConflictAny => {
                if value.is_none() {
                    row.conflict_count = None;
                }
            }
        }
    }
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Outcome {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Outcome::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown outcome '{s}'")))
    }
}

pub fn read_outcomes<R: Read>(reader: R) -> Result<Vec<OutcomeRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_outcomes<W: Write>(writer: W, rows: &[OutcomeRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Fills `log_urban` and `log_crop` from mask files where a land-use mask
/// exists for the row. A missing mine mask counts as no mine pixels. Returns
/// the number of rows updated.
pub fn ingest_masks(dir: &Path, rows: &mut [OutcomeRow], policy: ZeroShare) -> Result<usize> {
    let updates: Vec<Option<(Option<f64>, Option<f64>)>> = rows
        .par_iter()
        .map(|row| -> Result<_> {
            let lu_path = mask_path(dir, &row.tile_id, row.period, MaskKind::LandUse);
            if !lu_path.exists() {
                return Ok(None);
            }
            let landuse = read_mask(&lu_path, MaskKind::LandUse)?;
            let mine_path = mask_path(dir, &row.tile_id, row.period, MaskKind::Mine);
            let mine = if mine_path.exists() {
                read_mask(&mine_path, MaskKind::Mine)?
            } else {
                Mask::filled(MaskKind::Mine, 0)
            };
            let counts = class_shares(&landuse, &mine)?;
            Ok(Some((
                log_share_with(counts.count(LandClass::Urban), counts.valid, policy),
                log_share_with(counts.count(LandClass::Cropland), counts.valid, policy),
            )))
        })
        .collect::<Result<_>>()?;
    let mut n = 0;
    for (row, upd) in rows.iter_mut().zip(updates) {
        if let Some((u, c)) = upd {
            row.log_urban = u;
            row.log_crop = c;
            n += 1;
        }
    }
    Ok(n)
}
