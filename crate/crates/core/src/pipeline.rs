//! Stage orchestration: configuration, artifact layout, atomic writes and
//! the run manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::ReturnGrid;
use crate::market_data::{
    compute_returns, parse_transactions, write_transactions, OptionQuote, ParsedQuotes, RatesSeries, RealizedVariance, ReturnSeries,
    SpotSeries,
};
use crate::physical::assemble_physical;
use crate::premia::{bvix, lower_bounds, parse_intervals, read_bvix, write_bvix, write_curves, BvixQuote, ExpiryChain};
use crate::regimes::{
    cluster_names, cluster_with, conditional_reports, logistic_diagnostics, multivariate_distance, pca_embedding, read_labels,
    write_dendrogram, write_labels, ClrPanel, ClusterDiagnostics, ConditionalSet, Linkage, RegimeDay, RegimeModel, TenorWeighting,
    MOMENT_FEATURES,
};
use crate::rnd::{clr_inverse, clr_transform, density_moments, extract_rnd, read_clr, read_densities, write_clr, write_densities, DensityGrid};
use crate::vol_surface::{fit_daily_surface, interpolate_tenor, read_surfaces, write_surfaces, DailySurface, SviFitOptions};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
/// Environment variable holding the worker-thread count.
pub const WORKERS_ENV: &str = "BITCOIN_PREMIA_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub quotes: PathBuf,
    pub spots: PathBuf,
    pub rates: PathBuf,
    pub out_dir: PathBuf,
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_step: f64,
    pub tenors: Vec<u32>,
    pub target_tenor: u32,
    pub n_bins: usize,
    pub intervals: String,
    pub seed: u64,
    pub k: usize,
    pub tenor_weighting: TenorWeighting,
    pub linkage: Linkage,
    /// Reuse the nearest maturity instead of refusing to extrapolate.
    pub carry_nearest: bool,
    pub rv_window: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            quotes: "quotes.csv".into(),
            spots: "spots.csv".into(),
            rates: "rates.csv".into(),
            out_dir: "out".into(),
            grid_min: crate::grid::DEFAULT_R_MIN,
            grid_max: crate::grid::DEFAULT_R_MAX,
            grid_step: crate::grid::DEFAULT_STEP,
            tenors: crate::regimes::DEFAULT_TENORS.to_vec(),
            target_tenor: 27,
            n_bins: crate::physical::DEFAULT_BINS,
            intervals: "-0.6:-0.2,0.2:0.6".into(),
            seed: 7,
            k: 2,
            tenor_weighting: TenorWeighting::Trapezoid,
            linkage: Linkage::Ward,
            carry_nearest: false,
            rv_window: 27,
        }
    }
}

impl PipelineConfig {
    /// Parse TOML; relative paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            for p in [&mut cfg.quotes, &mut cfg.spots, &mut cfg.rates, &mut cfg.out_dir] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let v = |msg: String| Err(Error::Validation(msg));
        if !(self.grid_step > 0.0) {
            return v(format!("grid_step must be positive, got {}", self.grid_step));
        }
        if !(self.grid_min > -1.0 && self.grid_min < self.grid_max) {
            return v(format!("grid bounds [{}, {}] invalid", self.grid_min, self.grid_max));
        }
        if self.tenors.is_empty() || self.tenors.contains(&0) {
            return v("tenor set must be nonempty and positive".into());
        }
        if !self.tenors.contains(&self.target_tenor) {
            return v(format!("target tenor {} must be in the tenor set", self.target_tenor));
        }
        if self.n_bins == 0 || self.k == 0 || self.rv_window == 0 {
            return v("n_bins, k and rv_window must be positive".into());
        }
        parse_intervals(&self.intervals)?;
        self.grid()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<ReturnGrid> {
        ReturnGrid::new(self.grid_min, self.grid_max, self.grid_step).map_err(|e| Error::Validation(e.to_string()))
    }

    /// SHA-256 of the configuration with locations removed, so runs that
    /// differ only in where files live share a hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        for p in [&mut c.quotes, &mut c.spots, &mut c.rates] {
            *p = p.file_name().map(PathBuf::from).unwrap_or_default();
        }
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    FitSurface,
    Rnd,
    Pdensity,
    Bvix,
    Premia,
    Cluster,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::FitSurface,
        Stage::Rnd,
        Stage::Pdensity,
        Stage::Bvix,
        Stage::Premia,
        Stage::Cluster,
        Stage::Report,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::FitSurface => "fit-surface",
            Stage::Rnd => "rnd",
            Stage::Pdensity => "pdensity",
            Stage::Bvix => "bvix",
            Stage::Premia => "premia",
            Stage::Cluster => "cluster",
            Stage::Report => "report",
        }
    }

    /// Stages producing this stage's inputs.
    pub fn upstream(&self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::FitSurface | Stage::Bvix => &[Stage::Ingest],
            Stage::Rnd => &[Stage::FitSurface],
            Stage::Pdensity => &[Stage::Ingest],
            Stage::Premia => &[Stage::Ingest, Stage::Rnd, Stage::Bvix],
            Stage::Cluster => &[Stage::Rnd],
            Stage::Report => &[Stage::Ingest, Stage::Rnd, Stage::Bvix, Stage::Cluster],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown stage '{s}'")))
    }
}

/// Locations of every artifact. Defaults follow the output directory;
/// callers may point individual entries elsewhere.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paths {
    pub out_dir: PathBuf,
    pub quotes: PathBuf,
    pub spots: PathBuf,
    pub rates: PathBuf,
    pub quotes_clean: PathBuf,
    pub rejections: PathBuf,
    pub returns: PathBuf,
    pub realized_variance: PathBuf,
    pub surface: PathBuf,
    /// Directory (or single file) of density CSVs.
    pub densities: PathBuf,
    /// Directory (or single file) of CLR CSVs.
    pub clr: PathBuf,
    pub physical_csv: PathBuf,
    pub physical_json: PathBuf,
    pub bvix: PathBuf,
    pub premia_dir: PathBuf,
    pub labels: PathBuf,
    pub dendrogram: PathBuf,
    pub diagnostics: PathBuf,
    pub report_dir: PathBuf,
    pub manifest: PathBuf,
}

impl Paths {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        let o = &cfg.out_dir;
        Self {
            out_dir: o.clone(),
            quotes: cfg.quotes.clone(),
            spots: cfg.spots.clone(),
            rates: cfg.rates.clone(),
            quotes_clean: o.join("quotes_clean.csv"),
            rejections: o.join("rejections.csv"),
            returns: o.join("returns.csv"),
            realized_variance: o.join("realized_variance.csv"),
            surface: o.join("surface.csv"),
            densities: o.join("densities"),
            clr: o.join("clr"),
            physical_csv: o.join("physical.csv"),
            physical_json: o.join("physical.json"),
            bvix: o.join("bvix.csv"),
            premia_dir: o.join("premia"),
            labels: o.join("labels.csv"),
            dendrogram: o.join("dendrogram.csv"),
            diagnostics: o.join("diagnostics.json"),
            report_dir: o.join("report"),
            manifest: o.join("manifest.json"),
        }
    }

    /// Paths the stage reads; for [`Stage::Ingest`] these are raw inputs.
    pub fn inputs(&self, stage: Stage) -> Vec<PathBuf> {
        match stage {
            Stage::Ingest => vec![self.quotes.clone(), self.spots.clone(), self.rates.clone()],
            Stage::FitSurface => vec![self.quotes_clean.clone()],
            Stage::Rnd => vec![self.surface.clone(), self.spots.clone(), self.rates.clone()],
            Stage::Pdensity => vec![self.returns.clone()],
            Stage::Bvix => vec![self.quotes_clean.clone(), self.spots.clone(), self.rates.clone()],
            Stage::Premia => vec![
                self.densities.clone(),
                self.returns.clone(),
                self.realized_variance.clone(),
                self.bvix.clone(),
                self.rates.clone(),
            ],
            Stage::Cluster => vec![self.clr.clone()],
            Stage::Report => vec![
                self.labels.clone(),
                self.densities.clone(),
                self.returns.clone(),
                self.realized_variance.clone(),
                self.bvix.clone(),
                self.rates.clone(),
            ],
        }
    }
}

/// Write through a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// CSV files under `path`: the file itself, or the sorted `*.csv` entries of a directory.
fn csv_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

/// Where a `densities`/`clr` artifact is written: inside the directory, or
/// the path itself when it names a `.csv` file.
fn dir_target(path: &Path, file: &str) -> PathBuf {
    if path.extension().is_some_and(|x| x == "csv") {
        path.to_path_buf()
    } else {
        path.join(file)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    fn new(config_hash: String) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            stages: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Key for a path in the manifest: relative to the output directory when
/// inside it, the file name otherwise.
fn manifest_key(path: &Path, out_dir: &Path) -> String {
    match path.strip_prefix(out_dir) {
        Ok(rel) => rel.to_string_lossy().replace('\\', "/"),
        Err(_) => path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
    }
}

fn hash_entries(paths: &[PathBuf], out_dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in paths {
        for f in csv_or_any(p)? {
            out.insert(manifest_key(&f, out_dir), sha256_file(&f)?);
        }
    }
    Ok(out)
}

fn csv_or_any(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
            .collect();
        files.sort();
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

/// Artifacts written by one stage: `(path, bytes)` pairs.
type Outputs = Vec<(PathBuf, Vec<u8>)>;

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut buf = serde_json::to_vec_pretty(v)?;
    buf.push(b'\n');
    Ok(buf)
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| Error::MissingPrerequisite(format!("{}: {e}", path.display())))
}

fn check_prerequisites(stage: Stage, paths: &Paths) -> Result<()> {
    for p in paths.inputs(stage) {
        if !p.exists() {
            return Err(if stage == Stage::Ingest {
                Error::Validation(format!("input file {} does not exist", p.display()))
            } else {
                Error::MissingPrerequisite(p.display().to_string())
            });
        }
    }
    Ok(())
}

/// Run one stage with the default artifact layout.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    run_stage_with(stage, cfg, &Paths::from_config(cfg))
}

/// Run one stage: check prerequisites, compute, write outputs atomically
/// and record hashes in the manifest. Returns the written paths.
pub fn run_stage_with(stage: Stage, cfg: &PipelineConfig, paths: &Paths) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    check_prerequisites(stage, paths)?;
    log::info!("stage {stage}: start");
    let outputs = match stage {
        Stage::Ingest => ingest(cfg, paths)?,
        Stage::FitSurface => fit_surface(cfg, paths)?,
        Stage::Rnd => rnd(cfg, paths)?,
        Stage::Pdensity => pdensity(cfg, paths)?,
        Stage::Bvix => bvix_stage(cfg, paths)?,
        Stage::Premia => premia_stage(cfg, paths)?,
        Stage::Cluster => cluster(cfg, paths)?,
        Stage::Report => report(cfg, paths)?,
    };
    for (p, bytes) in &outputs {
        write_atomic(p, bytes)?;
    }
    let written: Vec<PathBuf> = outputs.into_iter().map(|(p, _)| p).collect();

    let hash = cfg.hash();
    let mut manifest = match Manifest::load(&paths.manifest) {
        Ok(m) if m.config_hash == hash && m.schema_version == MANIFEST_SCHEMA_VERSION => m,
        _ => Manifest::new(hash),
    };
    manifest.stages.insert(
        stage.name().to_string(),
        StageRecord {
            inputs: hash_entries(&paths.inputs(stage), &paths.out_dir)?,
            outputs: hash_entries(&written, &paths.out_dir)?,
        },
    );
    write_atomic(&paths.manifest, &json_bytes(&manifest)?)?;
    log::info!("stage {stage}: wrote {} artifacts", written.len());
    Ok(written)
}

/// Every stage in dependency order.
pub fn run_all(cfg: &PipelineConfig) -> Result<()> {
    let paths = Paths::from_config(cfg);
    for stage in Stage::ALL {
        run_stage_with(stage, cfg, &paths)?;
    }
    Ok(())
}

fn load_rates(paths: &Paths) -> Result<RatesSeries> {
    RatesSeries::read_csv(open(&paths.rates)?)
}

fn load_spots(paths: &Paths) -> Result<SpotSeries> {
    SpotSeries::read_csv(open(&paths.spots)?)
}

fn ingest(cfg: &PipelineConfig, paths: &Paths) -> Result<Outputs> {
    let mut parsed: ParsedQuotes = parse_transactions(open(&paths.quotes)?)?;
    let spots = load_spots(paths)?;
    let rates = load_rates(paths)?;
    parsed.apply_no_arbitrage(|d| rates.rate_on(d));
    log::info!("ingest: {} quotes kept, {} rejected", parsed.quotes.len(), parsed.rejections.len());
    let returns = compute_returns(&spots, cfg.target_tenor as usize)?;
    let rv = crate::market_data::realized_variance(&returns, cfg.rv_window)?;
    Ok(vec![
        (paths.quotes_clean.clone(), csv_bytes(|b| write_transactions(&parsed.quotes, b))?),
        (paths.rejections.clone(), csv_bytes(|b| parsed.write_rejections(b))?),
        (paths.returns.clone(), csv_bytes(|b| returns.write_csv(b))?),
        (paths.realized_variance.clone(), csv_bytes(|b| rv.write_csv(b))?),
    ])
}

fn load_quotes(path: &Path) -> Result<Vec<OptionQuote>> {
    let parsed = parse_transactions(open(path)?)?;
    if !parsed.rejections.is_empty() {
        return Err(Error::Validation(format!("{}: {} unparseable rows", path.display(), parsed.rejections.len())));
    }
    Ok(parsed.quotes)
}

fn by_date(quotes: Vec<OptionQuote>) -> BTreeMap<NaiveDate, Vec<OptionQuote>> {
    let mut out: BTreeMap<NaiveDate, Vec<OptionQuote>> = BTreeMap::new();
    for q in quotes {
        out.entry(q.trade_date()).or_default().push(q);
    }
    out
}

fn fit_surface(cfg: &PipelineConfig, paths: &Paths) -> Result<Outputs> {
    let quotes: Vec<OptionQuote> = load_quotes(&paths.quotes_clean)?
        .into_iter()
        .filter(|q| (cfg.grid_min..=cfg.grid_max).contains(&q.return_state()))
        .collect();
    let opts = SviFitOptions {
        seed: cfg.seed,
        ..SviFitOptions::default()
    };
    let days: Vec<(NaiveDate, Vec<OptionQuote>)> = by_date(quotes).into_iter().collect();
    let surfaces: Vec<DailySurface> = days
        .par_iter()
        .map(|(d, q)| fit_daily_surface(*d, q, &opts))
        .filter(|s| !s.curves.is_empty())
        .collect();
    if surfaces.is_empty() {
        return Err(Error::NoConvergence {
            best_objective: f64::INFINITY,
            restarts: 0,
            best_params: Vec::new(),
        });
    }
    Ok(vec![(paths.surface.clone(), csv_bytes(|b| write_surfaces(&surfaces, b))?)])
}

fn rnd(cfg: &PipelineConfig, paths: &Paths) -> Result<Outputs> {
    let grid = cfg.grid()?;
    let surfaces = read_surfaces(open(&paths.surface)?)?;
    let spots = load_spots(paths)?;
    let rates = load_rates(paths)?;
    let per_day: Vec<Vec<DensityGrid>> = surfaces
        .par_iter()
        .map(|s| {
            let Some(spot) = spots.price_on(s.date) else {
                log::warn!("{}: no spot price, skipped", s.date);
                return Vec::new();
            };
            let rf = rates.rate_on(s.date);
            cfg.tenors
                .iter()
                .filter_map(|&t| {
                    let res = interpolate_tenor(s, t as f64, &grid, cfg.carry_nearest).and_then(|iv| extract_rnd(&iv, spot, rf, t as f64));
                    match res {
                        Ok(d) => Some(d.with_date(s.date)),
                        Err(e) => {
                            log::warn!("{} tenor {t}: {e}", s.date);
                            None
                        }
                    }
                })
                .collect()
        })
        .collect();
    let densities: Vec<DensityGrid> = per_day.into_iter().flatten().collect();
    if densities.is_empty() {
        return Err(Error::NonFinite("no risk-neutral density could be extracted".into()));
    }
    let clrs: Vec<_> = densities.iter().map(clr_transform).collect();
    let rows: Vec<_> = densities.iter().zip(&clrs).map(|(d, c)| (d.date, d.tenor_days, c)).collect();
    Ok(vec![
        (dir_target(&paths.densities, "densities.csv"), csv_bytes(|b| write_densities(&densities, b))?),
        (dir_target(&paths.clr, "clr.csv"), csv_bytes(|b| write_clr(&rows, b))?),
    ])
}

fn load_returns(paths: &Paths) -> Result<ReturnSeries> {
    ReturnSeries::read_csv(open(&paths.returns)?)
}

fn pdensity(cfg: &PipelineConfig, paths: &Paths) -> Result<Outputs> {
    let returns = load_returns(paths)?;
    let pd = assemble_physical(&returns.simple_returns, cfg.n_bins, &cfg.grid()?, cfg.target_tenor as f64)?;
    Ok(vec![
        (paths.physical_csv.clone(), csv_bytes(|b| pd.write_csv(b))?),
        (paths.physical_json.clone(), json_bytes(&pd.sidecar())?),
    ])
}

fn bvix_stage(cfg: &PipelineConfig, paths: &Paths) -> Result<Outputs> {
    let quotes = load_quotes(&paths.quotes_clean)?;
    let spots = load_spots(paths)?;
    let rates = load_rates(paths)?;
    let days: Vec<(NaiveDate, Vec<OptionQuote>)> = by_date(quotes).into_iter().collect();
    let target = cfg.target_tenor as f64;
    let out: Vec<Option<BvixQuote>> = days
        .par_iter()
        .map(|(date, qs)| {
            let spot = spots.price_on(*date)?;
            let rf = rates.rate_on(*date);
            let mut by_tenor: BTreeMap<u32, Vec<OptionQuote>> = BTreeMap::new();
            for q in qs {
                by_tenor.entry(q.tenor_days).or_default().push(q.clone());
            }
            let chains: Vec<ExpiryChain> = by_tenor
                .iter()
                .map(|(t, q)| ExpiryChain::from_quotes(q, *t as f64, spot))
                .collect();
            match bvix(&chains, target, rf) {
                Ok(mut b) => {
                    b.date = Some(*date);
                    Some(b)
                }
                Err(e) => {
                    log::warn!("{date}: index skipped: {e}");
                    None
                }
            }
        })
        .collect();
    let quotes: Vec<BvixQuote> = out.into_iter().flatten().collect();
    Ok(vec![(paths.bvix.clone(), csv_bytes(|b| write_bvix(&quotes, b))?)])
}

fn load_densities(path: &Path) -> Result<Vec<DensityGrid>> {
    let files = csv_files(path)?;
    if files.is_empty() {
        return Err(Error::MissingPrerequisite(format!("no CSV files in {}", path.display())));
    }
    let mut out = Vec::new();
    for f in files {
        out.extend(read_densities(open(&f)?)?);
    }
    Ok(out)
}

/// Per-date inputs on dates carrying a target-tenor density, realized
/// variance and index value.
fn regime_days(cfg: &PipelineConfig, paths: &Paths) -> Result<Vec<RegimeDay>> {
    let target = cfg.target_tenor as f64;
    let densities: BTreeMap<NaiveDate, DensityGrid> = load_densities(&paths.densities)?
        .into_iter()
        .filter(|d| d.tenor_days == target)
        .filter_map(|d| d.date.map(|date| (date, d)))
        .collect();
    let rv = RealizedVariance::read_csv(open(&paths.realized_variance)?)?;
    let index: BTreeMap<NaiveDate, f64> = read_bvix(open(&paths.bvix)?)?
        .into_iter()
        .filter_map(|b| b.date.map(|d| (d, b.index)))
        .collect();
    let rates = load_rates(paths)?;
    let mut days = Vec::new();
    for (date, q) in densities {
        let (Some(v), Some(&b)) = (rv.value_on(date), index.get(&date)) else {
            log::info!("{date}: missing realized variance or index value, excluded");
            continue;
        };
        let rf = rates.rate_on(date);
        let bounds = lower_bounds(&q, rf)?;
        days.push(RegimeDay {
            date,
            q27: q,
            realized_variance: v,
            bvix: b,
            rf,
            bounds,
        });
    }
    if days.is_empty() {
        return Err(Error::Validation("no date has a density, realized variance and index value".into()));
    }
    Ok(days)
}

fn set_outputs(dir: &Path, set: &ConditionalSet) -> Result<Outputs> {
    let name = set.report.label.clone();
    Ok(vec![
        (dir.join(format!("{name}.json")), json_bytes(&set.report)?),
        (
            dir.join(format!("{name}_curves.csv")),
            csv_bytes(|b| write_curves(&set.curve, &set.kernel, &set.p, &set.q, b))?,
        ),
    ])
}

fn premia_stage(cfg: &PipelineConfig, paths: &Paths) -> Result<Outputs> {
    let days = regime_days(cfg, paths)?;
    let returns = load_returns(paths)?;
    let intervals = parse_intervals(&cfg.intervals)?;
    let model = single_cluster(&days);
    let (sets, _) = conditional_reports(&model, &days, &returns.simple_returns, cfg.n_bins, &intervals)?;
    set_outputs(&paths.premia_dir, &sets[0])
}

fn single_cluster(days: &[RegimeDay]) -> RegimeModel {
    RegimeModel {
        dates: days.iter().map(|d| d.date).collect(),
        labels: vec![0; days.len()],
        names: cluster_names(1),
        merges: Vec::new(),
        k: 1,
        linkage: Linkage::Ward,
    }
}

fn cluster(cfg: &PipelineConfig, paths: &Paths) -> Result<Outputs> {
    let mut panel = ClrPanel::new();
    for f in csv_files(&paths.clr)? {
        for (date, tenor, c) in read_clr(open(&f)?)? {
            let date = date.ok_or_else(|| Error::Validation(format!("{}: CLR row without date", f.display())))?;
            if tenor.fract() != 0.0 || tenor <= 0.0 {
                return Err(Error::Validation(format!("{}: tenor {tenor} is not a whole number of days", f.display())));
            }
            panel.entry(date).or_default().insert(tenor as u32, c);
        }
    }
    let (d, _excluded) = multivariate_distance(&panel, &cfg.tenors, cfg.tenor_weighting)?;
    if d.len() < cfg.k {
        return Err(Error::Validation(format!("{} dates cannot form {} clusters", d.len(), cfg.k)));
    }
    let target = cfg.target_tenor as f64;
    let mut moments = Vec::with_capacity(d.len());
    for date in &d.dates {
        let q = clr_inverse(&panel[date][&cfg.target_tenor], target)?;
        let m = density_moments(&q, false);
        moments.push([m.mean, m.variance, m.skewness, m.excess_kurtosis]);
    }
    let variance27: Vec<f64> = moments.iter().map(|m| m[1]).collect();
    let model = cluster_with(&d, cfg.k, &variance27, cfg.linkage)?;
    let logistic = if cfg.k == 2 {
        logistic_diagnostics(&model, &moments)
            .map_err(|e| log::warn!("logistic diagnostics skipped: {e}"))
            .ok()
    } else {
        None
    };
    let embedding = pca_embedding(&d).map_err(|e| log::warn!("embedding skipped: {e}")).ok();
    let diagnostics = ClusterDiagnostics {
        feature_names: MOMENT_FEATURES.iter().map(|s| s.to_string()).collect(),
        logistic,
        embedding,
        anova: BTreeMap::new(),
    };
    Ok(vec![
        (paths.labels.clone(), csv_bytes(|b| write_labels(&model, b))?),
        (paths.dendrogram.clone(), csv_bytes(|b| write_dendrogram(&model.merges, b))?),
        (paths.diagnostics.clone(), json_bytes(&diagnostics)?),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub reports: Vec<crate::premia::PremiaReport>,
    pub anova: BTreeMap<String, crate::premia::AnovaResult>,
    pub cluster_sizes: BTreeMap<String, usize>,
}

fn report(cfg: &PipelineConfig, paths: &Paths) -> Result<Outputs> {
    let labels = read_labels(open(&paths.labels)?)?;
    let days = regime_days(cfg, paths)?;
    let by_date: BTreeMap<NaiveDate, &RegimeDay> = days.iter().map(|d| (d.date, d)).collect();
    let mut names: Vec<String> = Vec::new();
    for (_, l) in &labels {
        if !names.contains(l) {
            names.push(l.clone());
        }
    }
    let k = names.len();
    let canonical = cluster_names(k);
    if names.iter().all(|n| canonical.contains(n)) {
        names = canonical;
    } else {
        names.sort();
    }
    let mut kept = Vec::with_capacity(labels.len());
    let mut label_idx = Vec::with_capacity(labels.len());
    for (date, l) in &labels {
        let day = by_date
            .get(date)
            .ok_or_else(|| Error::Validation(format!("labeled date {date} lacks a density, realized variance or index value")))?;
        kept.push((*day).clone());
        label_idx.push(names.iter().position(|n| n == l).expect("name collected"));
    }
    let model = RegimeModel {
        dates: kept.iter().map(|d| d.date).collect(),
        labels: label_idx,
        names,
        merges: Vec::new(),
        k,
        linkage: cfg.linkage,
    };
    let returns = load_returns(paths)?;
    let intervals = parse_intervals(&cfg.intervals)?;
    let (sets, anova) = conditional_reports(&model, &kept, &returns.simple_returns, cfg.n_bins, &intervals)?;
    let mut outputs = Vec::new();
    for s in &sets {
        outputs.extend(set_outputs(&paths.report_dir, s)?);
    }
    let summary = ReportSummary {
        reports: sets.iter().map(|s| s.report.clone()).collect(),
        anova: anova.clone(),
        cluster_sizes: (0..model.k).map(|c| (model.names[c].clone(), model.members(c).len())).collect(),
    };
    outputs.push((paths.report_dir.join("anova.json"), json_bytes(&anova)?));
    outputs.push((paths.report_dir.join("summary.json"), json_bytes(&summary)?));
    Ok(outputs)
}

/// Configure the global thread pool from [`WORKERS_ENV`] or an explicit count.
pub fn configure_workers(explicit: Option<usize>) -> Result<()> {
    let n = match explicit {
        Some(n) => Some(n),
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => Some(
                v.parse::<usize>()
                    .map_err(|_| Error::Validation(format!("{WORKERS_ENV} must be a positive integer, got '{v}'")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Validation("worker count must be positive".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::debug!("thread pool already configured: {e}");
        }
    }
    Ok(())
}
