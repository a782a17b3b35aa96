//! Batch pipeline: run configuration, stages, CSV artifacts and the run
//! manifest.
//!
//! Stages read their inputs from the configured files or from artifacts of
//! earlier stages in the output directory, so each can be rerun on its own.
//! Every stage records its artifacts, row counts and hashes in
//! `manifest.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::deposit::{read_deposits, Deposit};
use crate::error::{Error, Result};
use crate::estimator::{
    did, event_study, lpm_conflict, write_event_study, write_results, ConflictSplit, FitOptions, Interactions,
    RegressionResult, SpecOutput,
};
use crate::geo::{
    assign_all_periods, generate_grid, read_assignments, read_tiles, write_assignments, write_tiles, Band, GridConfig,
    ProjectionParams, TileId,
};
use crate::lifecycle::{
    read_statuses, schedule_all, status_map, write_statuses, EventKind, MineStatus, Period, PeriodCalendar,
};
use crate::panel::{
    assemble, balance_cross_section, balance_test, demean_relative, distance_bin_means, read_country_meta, read_panel,
    relative_bin_means, status_counts, write_balance, write_bin_means, write_panel, BalanceRegressor,
    PanelObservation,
};
use crate::raster::{ingest_masks, read_outcomes, write_outcomes, zscore, Outcome, OutcomeRow, ZeroShare};
use crate::screening::{clean_outcome, write_reports, ScreeningPool, DEFAULT_ALPHA, DEFAULT_IQR_K};
use crate::stacking::{
    build_events, center_closing, ordinary_dataset, stack, write_stacked, ControlRule, Design, Event, StackedDataset,
    Window,
};
use crate::synth::{self, SynthConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Grid,
    Classify,
    Ingest,
    Screen,
    Panel,
    Stack,
    Estimate,
    Describe,
}

impl Stage {
    /// Order chained by `all`.
    pub const ALL: [Stage; 8] = [
        Stage::Grid,
        Stage::Classify,
        Stage::Ingest,
        Stage::Screen,
        Stage::Panel,
        Stage::Stack,
        Stage::Estimate,
        Stage::Describe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Grid => "grid",
            Stage::Classify => "classify",
            Stage::Ingest => "ingest",
            Stage::Screen => "screen",
            Stage::Panel => "panel",
            Stage::Stack => "stack",
            Stage::Estimate => "estimate",
            Stage::Describe => "describe",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown stage '{s}'")))
    }
}

/// Tile band a specification is restricted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandChoice {
    #[default]
    All,
    Near,
    Far,
}

impl BandChoice {
    pub fn band(self) -> Option<Band> {
        match self {
            BandChoice::All => None,
            BandChoice::Near => Some(Band::Near),
            BandChoice::Far => Some(Band::Far),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    EventStudy,
    Did,
    ConflictLpm,
}

fn default_outcome() -> Outcome {
    Outcome::LogUrban
}
fn default_design() -> Design {
    Design::Stacked
}
fn default_kind() -> EventKind {
    EventKind::Opening
}
fn default_rule() -> ControlRule {
    ControlRule::NotYetOpened
}
fn default_split() -> ConflictSplit {
    ConflictSplit::DemocracyAutocracy
}

/// One entry of the specification list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecConfig {
    pub name: String,
    pub estimator: Estimator,
    #[serde(default = "default_outcome")]
    pub outcome: Outcome,
    #[serde(default = "default_design")]
    pub design: Design,
    #[serde(default)]
    pub band: BandChoice,
    #[serde(default)]
    pub interactions: Interactions,
    #[serde(default = "default_split")]
    pub conflict_split: ConflictSplit,
    #[serde(default = "default_kind")]
    pub event_kind: EventKind,
    #[serde(default = "default_rule")]
    pub control_rule: ControlRule,
    /// keep only events whose full window lies inside the calendar
    #[serde(default)]
    pub balanced: bool,
    /// closing events measured from the last active period
    #[serde(default)]
    pub center_closing: bool,
}

impl SpecConfig {
    fn new(name: &str, estimator: Estimator, outcome: Outcome) -> Self {
        SpecConfig {
            name: name.to_string(),
            estimator,
            outcome,
            design: Design::Stacked,
            band: BandChoice::All,
            interactions: Interactions::None,
            conflict_split: default_split(),
            event_kind: EventKind::Opening,
            control_rule: ControlRule::NotYetOpened,
            balanced: false,
            center_closing: false,
        }
    }

    /// Label of the estimation sample, shared by specs that use the same one.
    pub fn dataset_label(&self) -> String {
        let mut s = match self.design {
            Design::Ordinary => format!("ordinary_{}_{}", self.event_kind, self.control_rule),
            Design::Stacked => format!("{}_{}", self.event_kind, self.control_rule),
        };
        if self.design == Design::Stacked && self.balanced {
            s.push_str("_balanced");
        }
        if self.design == Design::Stacked && self.center_closing {
            s.push_str("_centered");
        }
        s
    }
}

/// The default specification list: event studies by band, DiD by band for
/// the three continuous outcomes under both designs, the size × regime
/// split, the conflict LPM and a closing event study.
pub fn default_specs() -> Vec<SpecConfig> {
    let es = |name: &str, band| SpecConfig {
        band,
        balanced: true,
        ..SpecConfig::new(name, Estimator::EventStudy, Outcome::LogUrban)
    };
    let did_nf = |name: &str, o, design| SpecConfig {
        design,
        interactions: Interactions::near_far(),
        ..SpecConfig::new(name, Estimator::Did, o)
    };
    vec![
        es("event_study_urban_near", BandChoice::Near),
        es("event_study_urban_far", BandChoice::Far),
        did_nf("did_urban_ordinary", Outcome::LogUrban, Design::Ordinary),
        did_nf("did_urban", Outcome::LogUrban, Design::Stacked),
        did_nf("did_crop", Outcome::LogCrop, Design::Stacked),
        did_nf("did_wealth", Outcome::WealthZ, Design::Stacked),
        SpecConfig {
            band: BandChoice::Near,
            interactions: "size+regime".parse().expect("valid interaction list"),
            ..SpecConfig::new("did_urban_size_regime", Estimator::Did, Outcome::LogUrban)
        },
        SpecConfig::new("conflict_lpm", Estimator::ConflictLpm, Outcome::ConflictAny),
        SpecConfig {
            band: BandChoice::Near,
            event_kind: EventKind::Closing,
            control_rule: ControlRule::Continuous,
            center_closing: true,
            ..SpecConfig::new("event_study_urban_closing", Estimator::EventStudy, Outcome::LogUrban)
        },
    ]
}

/// Declarative run configuration, read from a single JSON document.
/// Relative paths resolve against the directory holding the document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub deposits: PathBuf,
    pub outcomes: PathBuf,
    pub country_meta: PathBuf,
    /// directory of segmentation masks; rows with a land-use mask get their
    /// land-cover outcomes from it
    pub masks: Option<PathBuf>,
    /// extra tile covariates for the balance tests: `tile_id,<name>,…`
    pub covariates: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub start_year: i32,
    pub period_length: i32,
    pub n_periods: Period,
    pub central_meridian_deg: f64,
    pub sphere_radius_m: f64,
    pub tile_size_m: f64,
    pub radius_m: f64,
    pub near_m: f64,
    pub t_neg: i32,
    pub t_pos: i32,
    pub screening: bool,
    pub screening_pool: ScreeningPool,
    pub iqr_k: f64,
    pub esd_alpha: f64,
    pub zero_share: ZeroShare,
    pub fe_tol: f64,
    pub fe_max_iter: usize,
    pub bin_width_m: f64,
    pub specs: Vec<SpecConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cal = PeriodCalendar::default();
        let grid = GridConfig::default();
        let window = Window::default();
        let fit = FitOptions::default();
        RunConfig {
            deposits: PathBuf::new(),
            outcomes: PathBuf::new(),
            country_meta: PathBuf::new(),
            masks: None,
            covariates: None,
            output_dir: PathBuf::from("out"),
            start_year: cal.start_year,
            period_length: cal.period_length,
            n_periods: cal.n_periods,
            central_meridian_deg: grid.projection.central_meridian_deg,
            sphere_radius_m: grid.projection.sphere_radius_m,
            tile_size_m: grid.tile_size_m,
            radius_m: grid.radius_m,
            near_m: grid.near_m,
            t_neg: window.t_neg,
            t_pos: window.t_pos,
            screening: true,
            screening_pool: ScreeningPool::Pooled,
            iqr_k: DEFAULT_IQR_K,
            esd_alpha: DEFAULT_ALPHA,
            zero_share: ZeroShare::HalfPixel,
            fe_tol: fit.tol,
            fe_max_iter: fit.max_iter,
            bin_width_m: 5000.0,
            specs: default_specs(),
        }
    }
}

impl RunConfig {
    pub fn calendar(&self) -> PeriodCalendar {
        PeriodCalendar { start_year: self.start_year, period_length: self.period_length, n_periods: self.n_periods }
    }

    pub fn grid(&self) -> GridConfig {
        GridConfig {
            projection: ProjectionParams {
                central_meridian_deg: self.central_meridian_deg,
                sphere_radius_m: self.sphere_radius_m,
            },
            tile_size_m: self.tile_size_m,
            radius_m: self.radius_m,
            near_m: self.near_m,
        }
    }

    pub fn window(&self) -> Window {
        Window { t_neg: self.t_neg, t_pos: self.t_pos }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions { tol: self.fe_tol, max_iter: self.fe_max_iter, ..FitOptions::default() }
    }

    /// Hex SHA-256 of the configuration without its output directory.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.manifest_value()).expect("config serializes"))
    }

    fn manifest_value(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
        }
        v
    }
}

/// A parsed and validated configuration with its paths resolved.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub source: PathBuf,
    pub output_dir: PathBuf,
    base: PathBuf,
}

impl LoadedConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}

fn line_of(text: &str, needle: &str) -> Option<usize> {
    text.find(needle).map(|pos| text[..pos].matches('\n').count() + 1)
}

/// Reads the configuration, validates it and checks that every referenced
/// input exists. `output_dir` overrides the configured one.
pub fn load_config(path: &Path, output_dir: Option<&Path>) -> Result<LoadedConfig> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let config: RunConfig = serde_json::from_str(&text).map_err(|e| {
        Error::Config(format!("{}:{}:{}: {}", path.display(), e.line(), e.column(), e))
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
    let mut loaded = LoadedConfig {
        output_dir: PathBuf::new(),
        source: path.to_path_buf(),
        base,
        config,
    };
    loaded.output_dir = match output_dir {
        Some(d) => d.to_path_buf(),
        None => loaded.resolve(&loaded.config.output_dir),
    };
    validate(&loaded, &text)?;
    Ok(loaded)
}

fn validate(loaded: &LoadedConfig, text: &str) -> Result<()> {
    let cfg = &loaded.config;
    let fail = |needle: &str, msg: String| {
        let at = match line_of(text, needle) {
            Some(line) => format!("{}:{line}", loaded.source.display()),
            None => loaded.source.display().to_string(),
        };
        Error::Config(format!("{at}: {msg}"))
    };
    let key = |k: &str| format!("\"{k}\"");
    let plain = |e: Error| match e {
        Error::Config(m) => m,
        other => other.to_string(),
    };

    cfg.calendar().validate().map_err(|e| fail(&key("n_periods"), plain(e)))?;
    cfg.grid().validate().map_err(|e| fail(&key("tile_size_m"), plain(e)))?;
    cfg.window().validate().map_err(|e| fail(&key("t_neg"), plain(e)))?;
    if !(cfg.esd_alpha > 0.0 && cfg.esd_alpha < 1.0) {
        return Err(fail(&key("esd_alpha"), format!("esd_alpha must lie in (0, 1), got {}", cfg.esd_alpha)));
    }
    if !(cfg.iqr_k > 0.0) {
        return Err(fail(&key("iqr_k"), format!("iqr_k must be positive, got {}", cfg.iqr_k)));
    }
    if !(cfg.fe_tol > 0.0) || cfg.fe_max_iter == 0 {
        return Err(fail(&key("fe_tol"), "need fe_tol > 0 and fe_max_iter >= 1".into()));
    }
    if !(cfg.bin_width_m > 0.0) {
        return Err(fail(&key("bin_width_m"), format!("bin_width_m must be positive, got {}", cfg.bin_width_m)));
    }

    let mut names = BTreeSet::new();
    for s in &cfg.specs {
        let at = format!("\"{}\"", s.name);
        if s.name.is_empty() || !s.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(fail(&at, format!("spec name '{}' must be non-empty and use only [A-Za-z0-9_-]", s.name)));
        }
        if !names.insert(s.name.as_str()) {
            return Err(fail(&at, format!("duplicate spec name '{}'", s.name)));
        }
        if s.center_closing && s.event_kind != EventKind::Closing {
            return Err(fail(&at, format!("spec '{}': center_closing applies to closing events only", s.name)));
        }
        if s.estimator == Estimator::EventStudy && s.design == Design::Ordinary {
            return Err(fail(&at, format!("spec '{}': event studies need the stacked design", s.name)));
        }
        if s.estimator == Estimator::Did && s.outcome == Outcome::ConflictAny {
            return Err(fail(&at, format!("spec '{}': use conflict_lpm for conflict_any", s.name)));
        }
    }

    let required = [("deposits", &cfg.deposits), ("outcomes", &cfg.outcomes), ("country_meta", &cfg.country_meta)];
    for (name, p) in required {
        if p.as_os_str().is_empty() {
            return Err(fail(&key(name), format!("{name} path is required")));
        }
        let full = loaded.resolve(p);
        if !full.is_file() {
            return Err(fail(&key(name), format!("{name} file not found: {}", full.display())));
        }
    }
    if let Some(m) = &cfg.masks {
        let full = loaded.resolve(m);
        if !full.is_dir() {
            return Err(fail(&key("masks"), format!("masks directory not found: {}", full.display())));
        }
    }
    if let Some(c) = &cfg.covariates {
        let full = loaded.resolve(c);
        if !full.is_file() {
            return Err(fail(&key("covariates"), format!("covariates file not found: {}", full.display())));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    pub rows: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputHash {
    pub name: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputHash>,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    pub fn completed(&self) -> Vec<Stage> {
        self.stages.iter().filter(|r| r.status == StageStatus::Completed).map(|r| r.stage).collect()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_path(p: &Path) -> Result<String> {
    if p.is_dir() {
        let mut files = Vec::new();
        collect_files(p, p, &mut files)?;
        files.sort();
        let mut h = Sha256::new();
        for rel in files {
            h.update(rel.as_bytes());
            h.update([0]);
            h.update(fs::read(p.join(&rel))?);
        }
        Ok(hex::encode(h.finalize()))
    } else {
        Ok(sha256_hex(&fs::read(p)?))
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap_or(&path);
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// A stage that stopped the run.
#[derive(Debug)]
pub struct StageFailure {
    pub stage: Stage,
    pub error: Error,
}

impl StageFailure {
    /// 1 for estimation-level failures, 2 for configuration and input
    /// problems.
    pub fn exit_code(&self) -> i32 {
        let estimation = matches!(
            self.error,
            Error::NotEstimable(_)
                | Error::NonConvergence { .. }
                | Error::SingleCluster(_)
                | Error::InsufficientData { .. }
                | Error::Degenerate(_)
                | Error::EmptyInput(_)
        );
        if estimation && matches!(self.stage, Stage::Stack | Stage::Estimate | Stage::Describe) {
            1
        } else {
            2
        }
    }
}

impl fmt::Display for StageFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageFailure {}

/// What a stage produced. Failures of individual specifications leave the
/// other results in place and mark the stage failed.
struct StageOutput {
    artifacts: Vec<Artifact>,
    failures: Vec<String>,
}

struct Runner<'a> {
    cfg: &'a LoadedConfig,
    out: &'a Path,
}

/// Runs the given stages in order, updating the manifest after each one.
pub fn run(cfg: &LoadedConfig, stages: &[Stage]) -> std::result::Result<Manifest, StageFailure> {
    let first = stages.first().copied().unwrap_or(Stage::Grid);
    let at_first = |error| StageFailure { stage: first, error };
    fs::create_dir_all(&cfg.output_dir).map_err(|e| at_first(e.into()))?;
    let mut manifest = fresh_manifest(cfg).map_err(at_first)?;
    if let Some(old) = read_manifest(&cfg.output_dir) {
        if old.config_hash == manifest.config_hash && old.inputs == manifest.inputs {
            manifest.stages = old.stages;
        }
    }
    let runner = Runner { cfg, out: &cfg.output_dir };
    for &stage in stages {
        log::info!("stage {stage}");
        let result = runner.run_stage(stage);
        let (record, failure) = match result {
            Ok(StageOutput { artifacts, failures }) if failures.is_empty() => {
                (StageRecord { stage, status: StageStatus::Completed, error: None, artifacts }, None)
            }
            Ok(StageOutput { artifacts, failures }) => {
                let msg = failures.join("; ");
                let rec = StageRecord { stage, status: StageStatus::Failed, error: Some(msg.clone()), artifacts };
                (rec, Some(StageFailure { stage, error: Error::NotEstimable(msg) }))
            }
            Err(error) => {
                let rec =
                    StageRecord { stage, status: StageStatus::Failed, error: Some(error.to_string()), artifacts: vec![] };
                (rec, Some(StageFailure { stage, error }))
            }
        };
        manifest.stages.retain(|r| r.stage != stage);
        manifest.stages.push(record);
        manifest.stages.sort_by_key(|r| r.stage);
        write_manifest(&cfg.output_dir, &manifest).map_err(|error| StageFailure { stage, error })?;
        if let Some(f) = failure {
            return Err(f);
        }
    }
    Ok(manifest)
}

fn fresh_manifest(cfg: &LoadedConfig) -> Result<Manifest> {
    let c = &cfg.config;
    let mut inputs = Vec::new();
    let mut add = |name: &str, p: &Path| -> Result<()> {
        inputs.push(InputHash {
            name: name.to_string(),
            path: p.to_string_lossy().into_owned(),
            sha256: hash_path(&cfg.resolve(p))?,
        });
        Ok(())
    };
    add("deposits", &c.deposits)?;
    add("outcomes", &c.outcomes)?;
    add("country_meta", &c.country_meta)?;
    if let Some(m) = &c.masks {
        add("masks", m)?;
    }
    if let Some(cv) = &c.covariates {
        add("covariates", cv)?;
    }
    Ok(Manifest { config_hash: c.hash(), config: c.manifest_value(), inputs, stages: Vec::new() })
}

pub fn read_manifest(dir: &Path) -> Option<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(m)?;
    bytes.push(b'\n');
    fs::write(dir.join(MANIFEST_FILE), bytes)?;
    Ok(())
}

impl Runner<'_> {
    fn run_stage(&self, stage: Stage) -> Result<StageOutput> {
        let artifacts = match stage {
            Stage::Grid => self.grid()?,
            Stage::Classify => self.classify()?,
            Stage::Ingest => self.ingest()?,
            Stage::Screen => self.screen()?,
            Stage::Panel => self.panel()?,
            Stage::Stack => self.stack()?,
            Stage::Estimate => return self.estimate(),
            Stage::Describe => self.describe()?,
        };
        Ok(StageOutput { artifacts, failures: Vec::new() })
    }

    fn input(&self, p: &Path) -> Result<BufReader<fs::File>> {
        let full = self.cfg.resolve(p);
        let f = fs::File::open(&full).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(full.clone()),
            _ => e.into(),
        })?;
        Ok(BufReader::new(f))
    }

    /// An artifact of an earlier stage.
    fn artifact(&self, file: &str) -> Result<BufReader<fs::File>> {
        let path = self.out.join(file);
        if !path.is_file() {
            return Err(Error::MissingFile(path));
        }
        Ok(BufReader::new(fs::File::open(path)?))
    }

    fn emit(&self, file: &str, rows: usize, bytes: Vec<u8>) -> Result<Artifact> {
        let path = self.out.join(file);
        let mut f = fs::File::create(&path)?;
        f.write_all(&bytes)?;
        Ok(Artifact { file: file.to_string(), rows, sha256: sha256_hex(&bytes) })
    }

    fn deposits(&self) -> Result<Vec<Deposit>> {
        read_deposits(self.input(&self.cfg.config.deposits)?)
    }

    fn load_panel(&self) -> Result<Vec<PanelObservation>> {
        read_panel(self.artifact(PANEL_FILE)?)
    }

    fn grid(&self) -> Result<Vec<Artifact>> {
        let deposits = self.deposits()?;
        let tiles = generate_grid(&deposits, &self.cfg.config.grid())?;
        let mut buf = Vec::new();
        write_tiles(&mut buf, &tiles)?;
        Ok(vec![self.emit(TILES_FILE, tiles.len(), buf)?])
    }

    fn classify(&self) -> Result<Vec<Artifact>> {
        let c = &self.cfg.config;
        let deposits = self.deposits()?;
        let tiles = read_tiles(self.artifact(TILES_FILE)?)?;
        let schedules = schedule_all(&deposits, &c.calendar())?;
        let assignments = assign_all_periods(&tiles, &deposits, &status_map(&schedules), c.n_periods, &c.grid())?;
        let mut sbuf = Vec::new();
        write_statuses(&mut sbuf, &schedules)?;
        let mut abuf = Vec::new();
        write_assignments(&mut abuf, &assignments)?;
        Ok(vec![
            self.emit(STATUSES_FILE, schedules.len(), sbuf)?,
            self.emit(ASSIGNMENTS_FILE, assignments.len(), abuf)?,
        ])
    }

    fn ingest(&self) -> Result<Vec<Artifact>> {
        let c = &self.cfg.config;
        let mut rows = read_outcomes(self.input(&c.outcomes)?)?;
        if let Some(m) = &c.masks {
            let n = ingest_masks(&self.cfg.resolve(m), &mut rows, c.zero_share)?;
            log::info!("{n} outcome rows filled from masks");
        }
        let mut buf = Vec::new();
        write_outcomes(&mut buf, &rows)?;
        Ok(vec![self.emit(INGESTED_FILE, rows.len(), buf)?])
    }

    fn screen(&self) -> Result<Vec<Artifact>> {
        let c = &self.cfg.config;
        let mut rows: Vec<OutcomeRow> = read_outcomes(self.artifact(INGESTED_FILE)?)?;
        let mut reports = Vec::new();
        if c.screening {
            for &o in &Outcome::SCREENED {
                let rep = clean_outcome(&mut rows, o, c.iqr_k, c.esd_alpha, c.screening_pool)?;
                log::info!("{o}: {} flagged, {} removed", rep.flagged_count, rep.confirmed.len());
                reports.push(rep);
            }
        }
        standardize_wealth(&mut rows)?;
        let mut obuf = Vec::new();
        write_outcomes(&mut obuf, &rows)?;
        let mut rbuf = Vec::new();
        write_reports(&mut rbuf, &reports)?;
        let steps = reports.iter().map(|r| r.steps.len()).sum();
        Ok(vec![self.emit(SCREENED_FILE, rows.len(), obuf)?, self.emit(OUTLIERS_FILE, steps, rbuf)?])
    }

    fn panel(&self) -> Result<Vec<Artifact>> {
        let c = &self.cfg.config;
        let assignments = read_assignments(self.artifact(ASSIGNMENTS_FILE)?)?;
        let schedules = read_statuses(self.artifact(STATUSES_FILE)?)?;
        let outcomes = read_outcomes(self.artifact(SCREENED_FILE)?)?;
        let meta = read_country_meta(self.input(&c.country_meta)?)?;
        let deposits = self.deposits()?;
        let (panel, report) = assemble(&assignments, &schedules, &deposits, &outcomes, &meta, &c.calendar())?;
        let mut pbuf = Vec::new();
        write_panel(&mut pbuf, &panel)?;
        let mut rbuf = serde_json::to_vec_pretty(&report)?;
        rbuf.push(b'\n');
        let counts = status_counts(&panel);
        let mut cbuf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut cbuf);
            w.write_record(["status", "tile_periods"])?;
            for (s, n) in &counts {
                w.write_record([s.to_string(), n.to_string()])?;
            }
            w.flush()?;
        }
        Ok(vec![
            self.emit(PANEL_FILE, panel.len(), pbuf)?,
            self.emit(PANEL_REPORT_FILE, 1, rbuf)?,
            self.emit(STATUS_COUNTS_FILE, counts.len(), cbuf)?,
        ])
    }

    fn dataset<'p>(&self, panel: &'p [PanelObservation], spec: &SpecConfig) -> Result<StackedDataset<'p>> {
        let c = &self.cfg.config;
        let cal = c.calendar();
        match spec.design {
            Design::Ordinary => ordinary_dataset(panel, spec.event_kind, spec.control_rule, &cal),
            Design::Stacked => {
                let (events, report) = build_events(panel, spec.event_kind, spec.control_rule, c.window(), &cal);
                if report.dropped_no_controls > 0 {
                    log::info!("{}: {} events without controls", spec.dataset_label(), report.dropped_no_controls);
                }
                let events = if spec.center_closing { center_closing(events)? } else { events };
                stack(panel, &events, c.window(), spec.balanced, c.n_periods)
            }
        }
    }

    fn stack(&self) -> Result<Vec<Artifact>> {
        let panel = self.load_panel()?;
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for spec in self.cfg.config.specs.iter().filter(|s| s.design == Design::Stacked) {
            let label = spec.dataset_label();
            if !seen.insert(label.clone()) {
                continue;
            }
            let data = self.dataset(&panel, spec)?;
            let mut ebuf = Vec::new();
            write_events(&mut ebuf, &data.events)?;
            let mut sbuf = Vec::new();
            write_stacked(&mut sbuf, &data)?;
            out.push(self.emit(&format!("events_{label}.csv"), data.events.len(), ebuf)?);
            out.push(self.emit(&format!("stacked_{label}.csv"), data.rows.len(), sbuf)?);
        }
        Ok(out)
    }

    fn estimate(&self) -> Result<StageOutput> {
        let c = &self.cfg.config;
        let opts = c.fit_options();
        let panel = self.load_panel()?;
        let mut datasets: BTreeMap<String, StackedDataset<'_>> = BTreeMap::new();
        let mut fitted: Vec<(String, Outcome, RegressionResult, Vec<(String, f64)>)> = Vec::new();
        let mut artifacts = Vec::new();
        let mut failures = Vec::new();

        for spec in &c.specs {
            let label = spec.dataset_label();
            if !datasets.contains_key(&label) {
                match self.dataset(&panel, spec) {
                    Ok(d) => {
                        datasets.insert(label.clone(), d);
                    }
                    Err(e) => {
                        log::warn!("spec {}: {e}", spec.name);
                        failures.push(format!("{}: {e}", spec.name));
                        continue;
                    }
                }
            }
            let data = &datasets[&label];
            let band = spec.band.band();
            let res = match spec.estimator {
                Estimator::EventStudy => event_study(data, c.window(), spec.outcome, band, &opts).and_then(|es| {
                    let mut buf = Vec::new();
                    write_event_study(&mut buf, &es.points)?;
                    artifacts.push(self.emit(&format!("event_study_{}.csv", spec.name), es.points.len(), buf)?);
                    Ok((spec.outcome, es.result, Vec::new()))
                }),
                Estimator::Did => {
                    did(data, &spec.interactions, spec.outcome, band, &opts).map(|r| (spec.outcome, r, Vec::new()))
                }
                Estimator::ConflictLpm => lpm_conflict(data, spec.conflict_split, band, &opts).map(|r| {
                    let extras = r.baseline.into_iter().map(|(t, v)| (format!("baseline:{t}"), v)).collect();
                    (Outcome::ConflictAny, r.result, extras)
                }),
            };
            match res {
                Ok((o, r, extras)) => fitted.push((spec.name.clone(), o, r, extras)),
                Err(e @ (Error::Io(_) | Error::Csv(_))) => return Err(e),
                Err(e) => {
                    log::warn!("spec {}: {e}", spec.name);
                    failures.push(format!("{}: {e}", spec.name));
                }
            }
        }

        let outputs: Vec<SpecOutput<'_>> = fitted
            .iter()
            .map(|(name, o, r, extras)| SpecOutput { spec: name, outcome: *o, result: r, extras })
            .collect();
        let rows = fitted.iter().map(|(_, _, r, e)| r.coefficients.len() + r.dropped_collinear.len() + e.len()).sum();
        let mut buf = Vec::new();
        write_results(&mut buf, &outputs)?;
        artifacts.insert(0, self.emit(RESULTS_FILE, rows, buf)?);
        Ok(StageOutput { artifacts, failures })
    }

    fn describe(&self) -> Result<Vec<Artifact>> {
        let c = &self.cfg.config;
        let panel = self.load_panel()?;
        let periods = [1, c.n_periods];
        let mut out = Vec::new();
        for &o in &Outcome::SCREENED {
            let bins = distance_bin_means(&panel, o, c.bin_width_m, c.radius_m, &periods)?;
            let mut buf = Vec::new();
            write_bin_means(&mut buf, &bins)?;
            out.push(self.emit(&format!("bins_{o}.csv"), bins.len(), buf)?);

            let rel = relative_bin_means(&demean_relative(&panel, o, MineStatus::NotYetOpened), c.bin_width_m, c.radius_m, &periods);
            let mut buf = Vec::new();
            write_bin_means(&mut buf, &rel)?;
            out.push(self.emit(&format!("relative_bins_{o}.csv"), rel.len(), buf)?);
        }

        let extra = match &c.covariates {
            Some(p) => read_covariates(self.input(p)?)?,
            None => BTreeMap::new(),
        };
        let units = balance_cross_section(&panel, &extra);
        let names: BTreeSet<String> = units.iter().flat_map(|u| u.covariates.keys().cloned()).collect();
        let names: Vec<String> = names.into_iter().collect();
        let mut results = balance_test(&units, BalanceRegressor::GroupDummy, &names)?;
        results.extend(balance_test(&units, BalanceRegressor::LogOpeningYear, &names)?);
        let mut buf = Vec::new();
        write_balance(&mut buf, &results)?;
        out.push(self.emit(BALANCE_FILE, results.len(), buf)?);
        Ok(out)
    }
}

pub const TILES_FILE: &str = "tiles.csv";
pub const STATUSES_FILE: &str = "statuses.csv";
pub const ASSIGNMENTS_FILE: &str = "assignments.csv";
pub const INGESTED_FILE: &str = "outcomes_ingested.csv";
pub const SCREENED_FILE: &str = "outcomes_screened.csv";
pub const OUTLIERS_FILE: &str = "outliers.csv";
pub const PANEL_FILE: &str = "panel.csv";
pub const PANEL_REPORT_FILE: &str = "panel_report.json";
pub const STATUS_COUNTS_FILE: &str = "status_counts.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const BALANCE_FILE: &str = "balance.csv";

/// Re-standardizes the wealth column over its non-missing values.
fn standardize_wealth(rows: &mut [OutcomeRow]) -> Result<()> {
    let (idx, vals): (Vec<usize>, Vec<f64>) =
        rows.iter().enumerate().filter_map(|(i, r)| r.wealth_z.map(|v| (i, v))).unzip();
    if vals.len() < 2 {
        return Ok(());
    }
    let z = zscore(&vals)?;
    for (i, v) in idx.into_iter().zip(z) {
        rows[i].wealth_z = Some(v);
    }
    Ok(())
}

/// CSV: `event_id,country,kind,event_period,reference_period,control_rule,treated_deposits,treated_tiles,control_tiles`.
pub fn write_events<W: Write>(writer: W, events: &[Event]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "event_id",
        "country",
        "kind",
        "event_period",
        "reference_period",
        "control_rule",
        "treated_deposits",
        "treated_tiles",
        "control_tiles",
    ])?;
    for e in events {
        w.write_record([
            e.event_id.clone(),
            e.country.clone(),
            e.kind.to_string(),
            e.event_period.to_string(),
            e.reference_period.to_string(),
            e.control_rule.to_string(),
            e.treated_deposits.len().to_string(),
            e.treated_tiles.len().to_string(),
            e.control_tiles.len().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Tile covariates: a `tile_id` column followed by numeric columns. Blank
/// cells are skipped.
pub fn read_covariates<R: std::io::Read>(reader: R) -> Result<BTreeMap<TileId, BTreeMap<String, f64>>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("tile_id") {
        return Err(Error::Format { context: "covariates".into(), message: "first column must be tile_id".into() });
    }
    let mut out = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut vals = BTreeMap::new();
        for (h, v) in headers.iter().zip(rec.iter()).skip(1) {
            if v.trim().is_empty() {
                continue;
            }
            let x: f64 = v.trim().parse().map_err(|_| Error::Format {
                context: format!("covariates row {}", line + 2),
                message: format!("'{v}' in column {h} is not a number"),
            })?;
            vals.insert(h.to_string(), x);
        }
        if out.insert(TileId(rec[0].to_string()), vals).is_some() {
            return Err(Error::DuplicateKey(format!("covariates tile {}", &rec[0])));
        }
    }
    Ok(out)
}

/// Writes a synthetic data set under `dir` together with a `config.json`
/// that runs the full pipeline on it into `dir/out`.
pub fn run_synth(cfg: &SynthConfig, dir: &Path) -> Result<RunConfig> {
    let data = synth::generate(cfg)?;
    synth::write_dataset(&data, dir)?;
    let run = RunConfig {
        deposits: PathBuf::from(synth::DEPOSITS_FILE),
        outcomes: PathBuf::from(synth::OUTCOMES_FILE),
        country_meta: PathBuf::from(synth::COUNTRY_META_FILE),
        masks: (!data.masks.is_empty()).then(|| PathBuf::from(synth::MASK_DIR)),
        start_year: data.calendar.start_year,
        period_length: data.calendar.period_length,
        n_periods: data.calendar.n_periods,
        ..RunConfig::default()
    };
    let mut bytes = serde_json::to_vec_pretty(&run)?;
    bytes.push(b'\n');
    fs::write(dir.join(CONFIG_FILE), bytes)?;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_synth() -> SynthConfig {
        SynthConfig { seed: 3, n_countries: 2, deposits_per_country: 16, opening_periods: (6, 8), ..SynthConfig::default() }
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
        assert!("synth".parse::<Stage>().is_err());
    }

    #[test]
    fn default_config_round_trips_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = RunConfig::default();
        let b = RunConfig { output_dir: "elsewhere".into(), ..RunConfig::default() };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig { t_pos: 4, ..RunConfig::default() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn parse_error_carries_line_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, "{\n  \"t_neg\": -5,\n  \"t_pos\": ,\n}\n").unwrap();
        let msg = load_config(&p, None).unwrap_err().to_string();
        assert!(msg.contains("c.json:3:"), "{msg}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, "{\n  \"t_negative\": -5\n}\n").unwrap();
        let msg = load_config(&p, None).unwrap_err().to_string();
        assert!(msg.contains("t_negative") && msg.contains("c.json:2:"), "{msg}");
    }

    #[test]
    fn validation_points_at_offending_key() {
        let dir = tempfile::tempdir().unwrap();
        run_synth(&small_synth(), dir.path()).unwrap();
        let p = dir.path().join(CONFIG_FILE);
        let text = fs::read_to_string(&p).unwrap();
        let bad = text.replace("\"t_pos\": 5", "\"t_pos\": 0");
        fs::write(&p, &bad).unwrap();
        let msg = load_config(&p, None).unwrap_err().to_string();
        let line = line_of(&bad, "\"t_neg\"").unwrap();
        assert!(msg.contains(&format!("{CONFIG_FILE}:{line}:")), "{msg}");
    }

    #[test]
    fn missing_deposits_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        run_synth(&small_synth(), dir.path()).unwrap();
        fs::remove_file(dir.path().join(synth::DEPOSITS_FILE)).unwrap();
        let msg = load_config(&dir.path().join(CONFIG_FILE), None).unwrap_err().to_string();
        assert!(msg.contains(synth::DEPOSITS_FILE) && msg.contains("not found"), "{msg}");
    }

    #[test]
    fn full_run_completes_and_records_stages() {
        let dir = tempfile::tempdir().unwrap();
        run_synth(&small_synth(), dir.path()).unwrap();
        let cfg = load_config(&dir.path().join(CONFIG_FILE), None).unwrap();
        let m = run(&cfg, &Stage::ALL).unwrap();
        assert_eq!(m.completed(), Stage::ALL.to_vec());
        let results = fs::read_to_string(cfg.output_dir.join(RESULTS_FILE)).unwrap();
        assert!(results.starts_with("spec,outcome,term,beta"));
        for s in &cfg.config.specs {
            assert!(results.contains(&format!("\n{},", s.name)), "missing {}", s.name);
        }
        let panel = m.stage(Stage::Panel).unwrap();
        assert!(panel.artifacts[0].rows > 0);
    }

    #[test]
    fn stage_without_upstream_artifact_fails_with_input_code() {
        let dir = tempfile::tempdir().unwrap();
        run_synth(&small_synth(), dir.path()).unwrap();
        let cfg = load_config(&dir.path().join(CONFIG_FILE), None).unwrap();
        let err = run(&cfg, &[Stage::Estimate]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let m = read_manifest(&cfg.output_dir).unwrap();
        assert_eq!(m.stage(Stage::Estimate).unwrap().status, StageStatus::Failed);
    }

    #[test]
    fn unestimable_spec_is_partial_failure() {
        let dir = tempfile::tempdir().unwrap();
        run_synth(&small_synth(), dir.path()).unwrap();
        let p = dir.path().join(CONFIG_FILE);
        let mut cfg: RunConfig = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        cfg.specs = vec![
            SpecConfig::new("ok", Estimator::Did, Outcome::LogUrban),
            // a window longer than the calendar leaves no balanced events
            SpecConfig { balanced: true, ..SpecConfig::new("empty", Estimator::EventStudy, Outcome::LogUrban) },
        ];
        cfg.t_neg = -11;
        fs::write(&p, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
        let loaded = load_config(&p, None).unwrap();
        let err = run(&loaded, &Stage::ALL).unwrap_err();
        assert_eq!(err.stage, Stage::Estimate);
        assert_eq!(err.exit_code(), 1);
        let m = read_manifest(&loaded.output_dir).unwrap();
        assert_eq!(m.completed(), Stage::ALL[..6].to_vec());
        let results = fs::read_to_string(loaded.output_dir.join(RESULTS_FILE)).unwrap();
        assert!(results.contains("\nok,") && !results.contains("\nempty,"));
    }

    #[test]
    fn covariates_parse_and_reject_text() {
        let good = "tile_id,elev,slope\nT1,10.5,\nT2,3,0.2\n";
        let m = read_covariates(good.as_bytes()).unwrap();
        assert_eq!(m[&TileId("T1".into())].len(), 1);
        assert_eq!(m[&TileId("T2".into())]["slope"], 0.2);
        assert!(read_covariates("tile_id,elev\nT1,high\n".as_bytes()).is_err());
    }
}
