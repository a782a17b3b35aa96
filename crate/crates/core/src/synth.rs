//! Seeded synthetic deposits, outcomes, conflict and masks with known
//! treatment effects.
//!
//! Outcome model for tile `i` of country `c` in period `p`:
//! `Y = α_i + γ_{c,p} + effect(t) · Treat_i + ε`, with `t` the period
//! relative to the tile's opening and `ε ~ N(0, noise_sd)`. Each purpose
//! draws from its own ChaCha stream, so changing one component leaves the
//! draws of the others unchanged.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::deposit::{write_deposits, ActivityInterval, Deposit, DepositId, SizeClass};
use crate::error::{Error, Result};
use crate::geo::{self, Assignment, GridConfig, ProjectedPoint, Tile, TileId};
use crate::lifecycle::{self, EventKind, MineStatus, Period, PeriodCalendar, TreatmentSchedule};
use crate::panel::{write_country_meta, CountryMeta};
use crate::raster::{self, log_share, write_outcomes, LandClass, Mask, MaskKind, Outcome, OutcomeRow, MASK_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_countries: usize,
    pub deposits_per_country: usize,
    pub share_opening: f64,
    pub share_closing: f64,
    pub share_continuous: f64,
    pub share_not_yet: f64,
    /// inclusive range of first active periods for openings
    pub opening_periods: (Period, Period),
    /// inclusive range of last active periods for closings
    pub closing_periods: (Period, Period),
    pub att_urban: f64,
    pub att_crop: f64,
    pub att_wealth: f64,
    /// effect at `t = 1, 2, …`; the last entry carries forward. Empty means
    /// a constant step of the outcome's ATT.
    pub dynamic_profile: Vec<f64>,
    /// differential slope of treated tiles before onset, per period
    pub pre_trend: f64,
    pub noise_sd: f64,
    pub tile_sd: f64,
    pub shock_sd: f64,
    pub conflict_base_p: f64,
    pub conflict_treat_uplift_autocracy: f64,
    pub democracy_share: f64,
    pub large_share: f64,
    pub deposit_spacing_m: f64,
    /// number of tiles (in id order) that also get mask files
    pub mask_tiles: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            n_countries: 5,
            deposits_per_country: 40,
            share_opening: 0.35,
            share_closing: 0.15,
            share_continuous: 0.2,
            share_not_yet: 0.2,
            opening_periods: (2, 12),
            closing_periods: (1, 11),
            att_urban: 0.25,
            att_crop: 0.0,
            att_wealth: 0.0,
            dynamic_profile: Vec::new(),
            pre_trend: 0.0,
            noise_sd: 0.5,
            tile_sd: 0.5,
            shock_sd: 0.2,
            conflict_base_p: 0.003,
            conflict_treat_uplift_autocracy: 0.006,
            democracy_share: 0.4,
            large_share: 0.3,
            deposit_spacing_m: 100_000.0,
            mask_tiles: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let shares = [self.share_opening, self.share_closing, self.share_continuous, self.share_not_yet];
        let probs = [
            self.conflict_base_p,
            self.conflict_base_p + self.conflict_treat_uplift_autocracy,
            self.democracy_share,
            self.large_share,
        ];
        if shares.iter().chain(&probs).any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Config("synth shares and probabilities must lie in [0, 1]".into()));
        }
        if shares.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::Config("synth status shares sum to more than 1".into()));
        }
        let (a, b) = self.opening_periods;
        if a < 2 || a > b || b > 12 {
            return Err(Error::Config("opening_periods must satisfy 2 <= lo <= hi <= 12".into()));
        }
        let (a, b) = self.closing_periods;
        if a < 1 || a > b || b > 11 {
            return Err(Error::Config("closing_periods must satisfy 1 <= lo <= hi <= 11".into()));
        }
        if self.n_countries == 0 || self.deposits_per_country == 0 {
            return Err(Error::Config("synth needs at least one country and one deposit".into()));
        }
        if [self.noise_sd, self.tile_sd, self.shock_sd].iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("standard deviations must be finite and >= 0".into()));
        }
        if !(self.deposit_spacing_m > 0.0) {
            return Err(Error::Config("deposit_spacing_m must be > 0".into()));
        }
        Ok(())
    }

    fn att(&self, o: Outcome) -> f64 {
        match o {
            Outcome::LogUrban => self.att_urban,
            Outcome::LogCrop => self.att_crop,
            Outcome::WealthZ => self.att_wealth,
            Outcome::ConflictAny => 0.0,
        }
    }

    /// Injected effect at relative period `t` for an outcome.
    pub fn effect(&self, o: Outcome, t: i32) -> f64 {
        if t >= 1 {
            let base = self.att(o);
            if o == Outcome::LogUrban && !self.dynamic_profile.is_empty() {
                let i = (t as usize - 1).min(self.dynamic_profile.len() - 1);
                return self.dynamic_profile[i];
            }
            base
        } else if o == Outcome::LogUrban {
            self.pre_trend * f64::from(t)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stream {
    Placement = 0,
    TileEffects = 1,
    Shocks = 2,
    Noise = 3,
    Conflict = 4,
}

fn rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub schedules: Vec<TreatmentSchedule>,
    /// `(outcome, t, effect)` for every relative period the calendar allows
    pub effects: Vec<(Outcome, i32, f64)>,
}

impl GroundTruth {
    pub fn att(&self, o: Outcome, t: i32) -> f64 {
        self.effects.iter().find(|e| e.0 == o && e.1 == t).map_or(0.0, |e| e.2)
    }
}

/// Pixel counts from which a tile-period's masks are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub tile_id: TileId,
    pub period: Period,
    pub urban: u32,
    pub crop: u32,
    pub water: u32,
    pub mine: u32,
}

impl MaskSpec {
    /// Land-use labels filled in row-major order over the non-mine pixels;
    /// mine pixels form a block in the top-left corner.
    pub fn render(&self) -> (Mask, Mask) {
        let n = MASK_SIZE * MASK_SIZE;
        let side = (self.mine as f64).sqrt() as usize;
        let mut mine = vec![0u8; n];
        for y in 0..side {
            for x in 0..side {
                mine[y * MASK_SIZE + x] = 1;
            }
        }
        let mut lu = vec![LandClass::Other as u8; n];
        let mut quota = [
            (LandClass::Urban, self.urban),
            (LandClass::Cropland, self.crop),
            (LandClass::Water, self.water),
        ];
        let mut k = 0;
        for (px, m) in lu.iter_mut().zip(&mine) {
            if *m == 1 {
                continue;
            }
            while k < quota.len() && quota[k].1 == 0 {
                k += 1;
            }
            if k == quota.len() {
                break;
            }
            *px = quota[k].0 as u8;
            quota[k].1 -= 1;
        }
        (
            Mask::from_pixels(MaskKind::LandUse, lu).expect("valid labels"),
            Mask::from_pixels(MaskKind::Mine, mine).expect("valid labels"),
        )
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub config: SynthConfig,
    pub calendar: PeriodCalendar,
    pub grid: GridConfig,
    pub deposits: Vec<Deposit>,
    pub country_meta: Vec<CountryMeta>,
    pub tiles: Vec<Tile>,
    pub assignments: Vec<Assignment>,
    pub outcomes: Vec<OutcomeRow>,
    pub masks: Vec<MaskSpec>,
    pub truth: GroundTruth,
}

fn place_deposits(cfg: &SynthConfig, calendar: &PeriodCalendar, grid: &GridConfig) -> Result<(Vec<Deposit>, Vec<CountryMeta>)> {
    let mut r = rng(cfg.seed, Stream::Placement);
    let n = cfg.deposits_per_country;
    let cols = (n as f64).sqrt().ceil() as usize;
    let s = cfg.deposit_spacing_m;
    let jitter = 0.05 * s;
    let n_dem = (cfg.democracy_share * cfg.n_countries as f64).round() as usize;
    let mut regimes: Vec<bool> = (0..cfg.n_countries).map(|k| k < n_dem).collect();
    regimes.shuffle(&mut r);

    let mut deposits = Vec::new();
    let mut meta = Vec::new();
    for (k, &dem) in regimes.iter().enumerate() {
        let country = format!("C{k:02}");
        let polity2 = if dem { r.random_range(1.0..10.0) } else { r.random_range(-10.0..=0.0) };
        meta.push(CountryMeta { country: country.clone(), polity2_mean: polity2 });

        let count = |share: f64| (share * n as f64).round() as usize;
        let mut statuses = Vec::with_capacity(n);
        for (st, c) in [
            (MineStatus::Opening, count(cfg.share_opening)),
            (MineStatus::Closing, count(cfg.share_closing)),
            (MineStatus::Continuous, count(cfg.share_continuous)),
            (MineStatus::NotYetOpened, count(cfg.share_not_yet)),
        ] {
            statuses.extend(std::iter::repeat_n(st, c.min(n - statuses.len())));
        }
        statuses.resize(n, MineStatus::NoLongerActive);
        statuses.shuffle(&mut r);

        let x0 = k as f64 * (cols as f64 + 2.0) * s;
        for (j, &status) in statuses.iter().enumerate() {
            let x = x0 + (j % cols) as f64 * s + r.random_range(-jitter..jitter);
            let y = (j / cols) as f64 * s + r.random_range(-jitter..jitter);
            let (lat, lon) = geo::unproject(ProjectedPoint::new(x, y), &grid.projection)?;
            let (activity, discovery_year) = match status {
                MineStatus::Opening => {
                    let e = r.random_range(cfg.opening_periods.0..=cfg.opening_periods.1);
                    let (y0, y1) = calendar.years(e);
                    let start = r.random_range(y0..=y1);
                    (vec![(start, calendar.end_year())], r.random_range(calendar.start_year..=start))
                }
                MineStatus::Closing => {
                    let l = r.random_range(cfg.closing_periods.0..=cfg.closing_periods.1);
                    let (y0, y1) = calendar.years(l);
                    (vec![(calendar.start_year - 10, r.random_range(y0..=y1))], r.random_range(1950..calendar.start_year - 10))
                }
                MineStatus::Continuous => {
                    (vec![(calendar.start_year - 15, calendar.end_year())], r.random_range(1950..calendar.start_year - 15))
                }
                MineStatus::NotYetOpened => (vec![], r.random_range(calendar.start_year..=calendar.end_year())),
                _ => (vec![(calendar.start_year - 25, calendar.start_year - 5)], r.random_range(1930..calendar.start_year - 25)),
            };
            deposits.push(Deposit {
                id: DepositId(format!("{country}-{j:03}")),
                lat,
                lon,
                country: country.clone(),
                discovery_year: Some(discovery_year),
                size_class: if r.random_bool(cfg.large_share) { SizeClass::Large } else { SizeClass::Small },
                activity: activity.into_iter().map(|(a, b)| ActivityInterval::new(a, b)).collect::<Result<_>>()?,
            });
        }
    }
    Ok((deposits, meta))
}

/// Draws a full synthetic data set.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let calendar = PeriodCalendar::default();
    let grid = GridConfig::default();
    let (deposits, country_meta) = place_deposits(cfg, &calendar, &grid)?;
    let schedules = lifecycle::schedule_all(&deposits, &calendar)?;
    let statuses = lifecycle::status_map(&schedules);
    let tiles = geo::generate_grid(&deposits, &grid)?;
    let assignments = geo::assign_all_periods(&tiles, &deposits, &statuses, calendar.n_periods, &grid)?;

    let dep_by_id: HashMap<&DepositId, &Deposit> = deposits.iter().map(|d| (&d.id, d)).collect();
    let sched_by_id: HashMap<&DepositId, &TreatmentSchedule> = schedules.iter().map(|s| (&s.deposit_id, s)).collect();
    let democracy: HashMap<&str, bool> = country_meta.iter().map(|m| (m.country.as_str(), m.is_democracy())).collect();
    let np = calendar.n_periods as usize;

    // tile effects in tile order, one draw per continuous outcome
    let mut r_tile = rng(cfg.seed, Stream::TileEffects);
    let tile_sd = Normal::new(0.0, cfg.tile_sd).map_err(|e| Error::Config(e.to_string()))?;
    let tile_fx: HashMap<&TileId, [f64; 3]> = tiles
        .iter()
        .map(|t| {
            let fx = [-4.0 + tile_sd.sample(&mut r_tile), -1.5 + tile_sd.sample(&mut r_tile), tile_sd.sample(&mut r_tile)];
            (&t.tile_id, fx)
        })
        .collect();
    let mut r_shock = rng(cfg.seed, Stream::Shocks);
    let shock_sd = Normal::new(0.0, cfg.shock_sd).map_err(|e| Error::Config(e.to_string()))?;
    let shocks: HashMap<&str, Vec<[f64; 3]>> = country_meta
        .iter()
        .map(|m| {
            let v = (0..np)
                .map(|_| [shock_sd.sample(&mut r_shock), shock_sd.sample(&mut r_shock), shock_sd.sample(&mut r_shock)])
                .collect();
            (m.country.as_str(), v)
        })
        .collect();

    let mut r_noise = rng(cfg.seed, Stream::Noise);
    let mut r_conf = rng(cfg.seed, Stream::Conflict);
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let mut outcomes = Vec::with_capacity(assignments.len());
    let mut masks = Vec::new();
    let mut mask_set: BTreeSet<&TileId> = BTreeSet::new();
    for a in &assignments {
        if mask_set.len() == cfg.mask_tiles {
            break;
        }
        mask_set.insert(&a.tile_id);
    }

    for a in &assignments {
        let dep = dep_by_id[&a.deposit_id];
        let s = sched_by_id[&a.deposit_id];
        let fx = tile_fx[&a.tile_id];
        let shock = shocks[dep.country.as_str()][a.period as usize - 1];
        let rel = match (s.event_kind, s.event_period) {
            (Some(EventKind::Opening), Some(e)) => Some(i32::from(a.period) - (i32::from(e) - 1)),
            _ => None,
        };
        let value = |i: usize, o: Outcome, eps: f64| fx[i] + shock[i] + rel.map_or(0.0, |t| cfg.effect(o, t)) + eps;
        let log_urban = value(0, Outcome::LogUrban, noise.sample(&mut r_noise));
        let log_crop = value(1, Outcome::LogCrop, noise.sample(&mut r_noise));
        let wealth = value(2, Outcome::WealthZ, noise.sample(&mut r_noise));
        let conflict_count = (a.period > 1).then(|| {
            let treated_post = rel.is_some_and(|t| t >= 1);
            let uplift = if treated_post && !democracy[dep.country.as_str()] { cfg.conflict_treat_uplift_autocracy } else { 0.0 };
            u32::from(r_conf.random_bool(cfg.conflict_base_p + uplift))
        });
        let mut row = OutcomeRow {
            tile_id: a.tile_id.clone(),
            period: a.period,
            log_urban: Some(log_urban),
            log_crop: Some(log_crop),
            wealth_z: Some(wealth),
            conflict_count,
        };

        if mask_set.contains(&a.tile_id) {
            let active = lifecycle::active_periods(&dep.activity, &calendar)[a.period as usize - 1];
            let mine = if active && a.distance_m < grid.tile_size_m { 256 } else { 0 };
            let valid = (MASK_SIZE * MASK_SIZE) as u32 - mine;
            let cap = |share: f64, room: u32| ((share * f64::from(valid)).round() as u32).min(room);
            let urban = cap(log_urban.exp(), valid);
            let crop = cap(log_crop.exp(), valid - urban);
            let water = cap(0.02, valid - urban - crop);
            row.log_urban = Some(log_share(urban, valid));
            row.log_crop = Some(log_share(crop, valid));
            masks.push(MaskSpec { tile_id: a.tile_id.clone(), period: a.period, urban, crop, water, mine });
        }
        outcomes.push(row);
    }

    let max_t = i32::from(calendar.n_periods);
    let effects = Outcome::SCREENED
        .iter()
        .flat_map(|&o| (-max_t..=max_t).map(move |t| (o, t, cfg.effect(o, t))))
        .collect();

    Ok(SynthData {
        config: cfg.clone(),
        calendar,
        grid,
        deposits,
        country_meta,
        tiles,
        assignments,
        outcomes,
        masks,
        truth: GroundTruth { schedules, effects },
    })
}

/// File names written by [`write_dataset`].
pub const DEPOSITS_FILE: &str = "deposits.csv";
pub const OUTCOMES_FILE: &str = "outcomes.csv";
pub const COUNTRY_META_FILE: &str = "country_meta.csv";
pub const TRUTH_EVENTS_FILE: &str = "ground_truth_events.csv";
pub const TRUTH_EFFECTS_FILE: &str = "ground_truth_effects.csv";
pub const MASK_DIR: &str = "masks";

/// Writes the data set in the ingestion formats under `dir`.
pub fn write_dataset(data: &SynthData, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_deposits(fs::File::create(dir.join(DEPOSITS_FILE))?, &data.deposits)?;
    write_outcomes(fs::File::create(dir.join(OUTCOMES_FILE))?, &data.outcomes)?;
    write_country_meta(fs::File::create(dir.join(COUNTRY_META_FILE))?, &data.country_meta)?;
    lifecycle::write_statuses(fs::File::create(dir.join(TRUTH_EVENTS_FILE))?, &data.truth.schedules)?;
    let mut w = csv::Writer::from_writer(fs::File::create(dir.join(TRUTH_EFFECTS_FILE))?);
    w.write_record(["outcome", "rel_time", "effect"])?;
    for (o, t, e) in &data.truth.effects {
        w.write_record([o.as_str().to_string(), t.to_string(), e.to_string()])?;
    }
    w.flush()?;
    let mask_dir = dir.join(MASK_DIR);
    fs::create_dir_all(&mask_dir)?;
    for m in &data.masks {
        let (lu, mine) = m.render();
        raster::write_mask(&raster::mask_path(&mask_dir, &m.tile_id, m.period, MaskKind::LandUse), &lu)?;
        if m.mine > 0 {
            raster::write_mask(&raster::mask_path(&mask_dir, &m.tile_id, m.period, MaskKind::Mine), &mine)?;
        }
    }
    let mut f = fs::File::create(dir.join("synth_config.json"))?;
    serde_json::to_writer_pretty(&mut f, &data.config)?;
    writeln!(f)?;
    Ok(())
}

/// Difference of group-mean differences from `(treated, post, y)` triples.
pub fn oracle_did(rows: &[(bool, bool, f64)]) -> Result<f64> {
    let mut sums = [[(0.0, 0usize); 2]; 2];
    for &(treated, post, y) in rows {
        let cell = &mut sums[usize::from(treated)][usize::from(post)];
        cell.0 += y;
        cell.1 += 1;
    }
    let mean = |t: usize, p: usize| -> Result<f64> {
        let (s, n) = sums[t][p];
        if n == 0 {
            return Err(Error::EmptyInput("did cell"));
        }
        Ok(s / n as f64)
    };
    Ok((mean(1, 1)? - mean(1, 0)?) - (mean(0, 1)? - mean(0, 0)?))
}
