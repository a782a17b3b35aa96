//! Sinusoidal projection, tile grid generation and tile-to-deposit assignment.
//!
//! The grid is anchored at the projected origin: tile `(ix, iy)` spans
//! `[ix·S, (ix+1)·S) × [iy·S, (iy+1)·S)` for tile size `S` (224 px × 30 m).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deposit::{Deposit, DepositId};
use crate::error::{Error, Result};
use crate::lifecycle::{MineStatus, Period};

pub const DEFAULT_TILE_SIZE_M: f64 = 6720.0;
pub const DEFAULT_RADIUS_M: f64 = 40_000.0;
pub const DEFAULT_NEAR_M: f64 = 20_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    pub central_meridian_deg: f64,
    pub sphere_radius_m: f64,
}

impl Default for ProjectionParams {
    fn default() -> Self {
        Self { central_meridian_deg: 15.0, sphere_radius_m: 6_371_007.181 }
    }
}

impl ProjectionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sphere_radius_m > 0.0) || !self.sphere_radius_m.is_finite() {
            return Err(Error::Config(format!("sphere_radius_m must be > 0, got {}", self.sphere_radius_m)));
        }
        if !(-180.0..=180.0).contains(&self.central_meridian_deg) {
            return Err(Error::Config(format!(
                "central_meridian_deg must be in [-180, 180], got {}",
                self.central_meridian_deg
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub x_m: f64,
    pub y_m: f64,
}

impl ProjectedPoint {
    pub fn new(x_m: f64, y_m: f64) -> Self {
        Self { x_m, y_m }
    }
}

pub fn project(lat_deg: f64, lon_deg: f64, params: &ProjectionParams) -> Result<ProjectedPoint> {
    if !lat_deg.is_finite() || !lon_deg.is_finite() || lat_deg.abs() > 90.0 || lon_deg.abs() > 180.0 {
        return Err(Error::InvalidCoordinate { lat: lat_deg, lon: lon_deg });
    }
    let phi = lat_deg.to_radians();
    let dlambda = (lon_deg - params.central_meridian_deg).to_radians();
    let r = params.sphere_radius_m;
    Ok(ProjectedPoint { x_m: r * dlambda * phi.cos(), y_m: r * phi })
}

/// Inverse of [`project`]; returns `(lat, lon)` in degrees.
pub fn unproject(p: ProjectedPoint, params: &ProjectionParams) -> Result<(f64, f64)> {
    if !p.x_m.is_finite() || !p.y_m.is_finite() {
        return Err(Error::InvalidCoordinate { lat: p.y_m, lon: p.x_m });
    }
    let r = params.sphere_radius_m;
    let phi = p.y_m / r;
    let cos_phi = phi.cos();
    let lon = if cos_phi.abs() < 1e-15 {
        params.central_meridian_deg
    } else {
        params.central_meridian_deg + (p.x_m / (r * cos_phi)).to_degrees()
    };
    Ok((phi.to_degrees(), lon))
}

pub fn distance(a: ProjectedPoint, b: ProjectedPoint) -> f64 {
    (a.x_m - b.x_m).hypot(a.y_m - b.y_m)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TileId(pub String);

impl TileId {
    pub fn from_indices(ix: i64, iy: i64) -> Self {
        TileId(format!("x{ix}y{iy}"))
    }
}

impl fmt::Display for TileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TileId {
    fn from(s: &str) -> Self {
        TileId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub tile_id: TileId,
    pub ix: i64,
    pub iy: i64,
    pub centroid: ProjectedPoint,
}

impl Tile {
    pub fn at(ix: i64, iy: i64, tile_size_m: f64) -> Self {
        Tile {
            tile_id: TileId::from_indices(ix, iy),
            ix,
            iy,
            centroid: ProjectedPoint::new((ix as f64 + 0.5) * tile_size_m, (iy as f64 + 0.5) * tile_size_m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub projection: ProjectionParams,
    pub tile_size_m: f64,
    pub radius_m: f64,
    pub near_m: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            projection: ProjectionParams::default(),
            tile_size_m: DEFAULT_TILE_SIZE_M,
            radius_m: DEFAULT_RADIUS_M,
            near_m: DEFAULT_NEAR_M,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        self.projection.validate()?;
        if !(self.tile_size_m > 0.0) {
            return Err(Error::Config("tile_size_m must be > 0".into()));
        }
        if !(self.radius_m > 0.0) || !(self.near_m > 0.0) || self.near_m > self.radius_m {
            return Err(Error::Config("need 0 < near_m <= radius_m".into()));
        }
        Ok(())
    }
}

/// Indices of tiles whose centroid lies within `radius_m` of `p`.
fn tiles_around(p: ProjectedPoint, tile_size_m: f64, radius_m: f64) -> Vec<(i64, i64)> {
    let s = tile_size_m;
    let lo_x = ((p.x_m - radius_m) / s - 0.5).floor() as i64;
    let hi_x = ((p.x_m + radius_m) / s - 0.5).ceil() as i64;
    let lo_y = ((p.y_m - radius_m) / s - 0.5).floor() as i64;
    let hi_y = ((p.y_m + radius_m) / s - 0.5).ceil() as i64;
    let mut out = Vec::new();
    for ix in lo_x..=hi_x {
        for iy in lo_y..=hi_y {
            let c = ProjectedPoint::new((ix as f64 + 0.5) * s, (iy as f64 + 0.5) * s);
            if distance(c, p) <= radius_m {
                out.push((ix, iy));
            }
        }
    }
    out
}

/// Tiles within `radius_m` of already-projected deposit locations.
pub fn grid_around_points(points: &[ProjectedPoint], tile_size_m: f64, radius_m: f64) -> Result<Vec<Tile>> {
    if points.is_empty() {
        return Err(Error::EmptyInput("deposit list"));
    }
    if !(tile_size_m > 0.0) {
        return Err(Error::InvalidInput("tile_size_m must be > 0".into()));
    }
    let cells: BTreeSet<(i64, i64)> = points
        .par_iter()
        .map(|&p| tiles_around(p, tile_size_m, radius_m))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    Ok(cells.into_iter().map(|(ix, iy)| Tile::at(ix, iy, tile_size_m)).collect())
}

/// All tiles whose centroid lies within `radius_m` of at least one deposit,
/// sorted by grid index.
pub fn generate_grid(deposits: &[Deposit], config: &GridConfig) -> Result<Vec<Tile>> {
    let points = project_deposits(deposits, &config.projection)?;
    grid_around_points(&points, config.tile_size_m, config.radius_m)
}

pub fn project_deposits(deposits: &[Deposit], params: &ProjectionParams) -> Result<Vec<ProjectedPoint>> {
    deposits.iter().map(|d| project(d.lat, d.lon, params)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Band {
    Near,
    Far,
}

impl Band {
    pub fn classify(distance_m: f64, near_m: f64) -> Band {
        if distance_m < near_m {
            Band::Near
        } else {
            Band::Far
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Band::Near => "Near",
            Band::Far => "Far",
        })
    }
}

impl std::str::FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "Near" | "near" => Ok(Band::Near),
            "Far" | "far" => Ok(Band::Far),
            other => Err(Error::InvalidInput(format!("unknown band '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub tile_id: TileId,
    pub period: Period,
    pub deposit_id: DepositId,
    pub distance_m: f64,
    pub band: Band,
    pub dropped_confounded: bool,
}

/// Uniform-bucket lookup of deposits by projected location.
struct DepositIndex {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl DepositIndex {
    fn new(points: &[ProjectedPoint], cell: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, buckets }
    }

    fn key(p: &ProjectedPoint, cell: f64) -> (i64, i64) {
        ((p.x_m / cell).floor() as i64, (p.y_m / cell).floor() as i64)
    }

    fn candidates(&self, p: &ProjectedPoint) -> impl Iterator<Item = usize> + '_ {
        let (kx, ky) = Self::key(p, self.cell);
        (-1..=1).flat_map(move |dx| {
            (-1..=1).flat_map(move |dy| self.buckets.get(&(kx + dx, ky + dy)).into_iter().flatten().copied())
        })
    }
}

/// A deposit reduced to what tile assignment needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SitedDeposit {
    pub id: DepositId,
    pub point: ProjectedPoint,
    pub status: MineStatus,
}

pub fn site_deposits(
    deposits: &[Deposit],
    statuses: &BTreeMap<DepositId, MineStatus>,
    params: &ProjectionParams,
) -> Result<Vec<SitedDeposit>> {
    deposits
        .iter()
        .map(|d| {
            let status = statuses
                .get(&d.id)
                .copied()
                .ok_or_else(|| Error::InvalidInput(format!("no status for deposit {}", d.id)))?;
            Ok(SitedDeposit { id: d.id.clone(), point: project(d.lat, d.lon, params)?, status })
        })
        .collect()
}

/// Assigns each tile to its closest `Active` deposit within the radius, else
/// to its closest `Inactive` deposit. Tiles near deposits of more than one
/// active category are flagged `dropped_confounded`. Tiles beyond the radius
/// of every deposit are left out. Distance ties go to the smallest deposit id.
pub fn assign_tiles(
    tiles: &[Tile],
    deposits: &[Deposit],
    statuses: &BTreeMap<DepositId, MineStatus>,
    period: Period,
    config: &GridConfig,
) -> Result<Vec<Assignment>> {
    let sited = site_deposits(deposits, statuses, &config.projection)?;
    Ok(assign_sited(tiles, &sited, period, config))
}

pub fn assign_sited(tiles: &[Tile], sited: &[SitedDeposit], period: Period, config: &GridConfig) -> Vec<Assignment> {
    let points: Vec<ProjectedPoint> = sited.iter().map(|d| d.point).collect();
    let index = DepositIndex::new(&points, config.radius_m);

    tiles
        .par_iter()
        .filter_map(|tile| {
            let mut best_active: Option<(f64, usize)> = None;
            let mut best_inactive: Option<(f64, usize)> = None;
            let mut active_kinds: BTreeSet<MineStatus> = BTreeSet::new();
            for j in index.candidates(&tile.centroid) {
                let d = distance(tile.centroid, points[j]);
                if d > config.radius_m {
                    continue;
                }
                let slot = if sited[j].status.is_active() {
                    active_kinds.insert(sited[j].status);
                    &mut best_active
                } else {
                    &mut best_inactive
                };
                let better = match *slot {
                    None => true,
                    Some((bd, bj)) => d < bd || (d == bd && sited[j].id < sited[bj].id),
                };
                if better {
                    *slot = Some((d, j));
                }
            }
            let (d, j) = best_active.or(best_inactive)?;
            Some(Assignment {
                tile_id: tile.tile_id.clone(),
                period,
                deposit_id: sited[j].id.clone(),
                distance_m: d,
                band: Band::classify(d, config.near_m),
                dropped_confounded: active_kinds.len() > 1,
            })
        })
        .collect()
}

/// Assignment is time-invariant, so one pass is replicated over every period.
/// Rows come out sorted by tile and period.
pub fn assign_all_periods(
    tiles: &[Tile],
    deposits: &[Deposit],
    statuses: &BTreeMap<DepositId, MineStatus>,
    n_periods: Period,
    config: &GridConfig,
) -> Result<Vec<Assignment>> {
    let sited = site_deposits(deposits, statuses, &config.projection)?;
    let mut base = assign_sited(tiles, &sited, 1, config);
    base.sort_unstable_by(|a, b| a.tile_id.cmp(&b.tile_id));
    let mut out = Vec::with_capacity(base.len() * usize::from(n_periods));
    for a in base {
        for p in 1..=n_periods {
            out.push(Assignment { period: p, ..a.clone() });
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct TileRecord {
    tile_id: String,
    ix: i64,
    iy: i64,
    x_m: f64,
    y_m: f64,
}

pub fn write_tiles<W: Write>(writer: W, tiles: &[Tile]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for t in tiles {
        wtr.serialize(TileRecord {
            tile_id: t.tile_id.0.clone(),
            ix: t.ix,
            iy: t.iy,
            x_m: t.centroid.x_m,
            y_m: t.centroid.y_m,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_tiles<R: Read>(reader: R) -> Result<Vec<Tile>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize::<TileRecord>()
        .map(|r| {
            let r = r?;
            Ok(Tile {
                tile_id: TileId(r.tile_id),
                ix: r.ix,
                iy: r.iy,
                centroid: ProjectedPoint::new(r.x_m, r.y_m),
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct AssignmentRecord {
    tile_id: String,
    period: u8,
    deposit_id: String,
    distance_m: f64,
    band: String,
    dropped_confounded: bool,
}

pub fn write_assignments<W: Write>(writer: W, assignments: &[Assignment]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for a in assignments {
        wtr.serialize(AssignmentRecord {
            tile_id: a.tile_id.0.clone(),
            period: a.period,
            deposit_id: a.deposit_id.0.clone(),
            distance_m: a.distance_m,
            band: a.band.to_string(),
            dropped_confounded: a.dropped_confounded,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_assignments<R: Read>(reader: R) -> Result<Vec<Assignment>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize::<AssignmentRecord>()
        .map(|r| {
            let r = r?;
            Ok(Assignment {
                tile_id: TileId(r.tile_id),
                period: r.period,
                deposit_id: DepositId(r.deposit_id),
                distance_m: r.distance_m,
                band: r.band.parse()?,
                dropped_confounded: r.dropped_confounded,
            })
        })
        .collect()
}
