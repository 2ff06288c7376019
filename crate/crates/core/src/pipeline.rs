//! Experiment assembly: per-site datasets, train/test splits, real and
//! synthetic mixing, scenario evaluation and result tables.
//!
//! Every random choice derives from the top-level seed through
//! [`derive_seed`], keyed by a purpose string:
//!
//! | purpose          | used for                                   |
//! |------------------|--------------------------------------------|
//! | `terrain:<site>` | synthetic terrain generation               |
//! | `grid:<site>`    | random receiver grids                      |
//! | `drive:<site>`   | synthetic drive-test positions and noise   |
//! | `split:<site>`   | the real-data train/test permutation       |
//! | `gbm`            | row subsampling during boosting            |
//!
//! Repetition is literal row duplication before fitting. For least-squares
//! trees this is the same as giving the repeated rows an integer weight.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::{compute_features, FeatureConfig, FeatureError, FeatureVector};
use crate::gbm::{self, GbmError, GbmModel, TrainConfig, TrainingData};
use crate::measurements::{
    convert_measurements, read_measurements, MeasurementError, OffsetGrouping, RsrpMeasurement,
    SiteOffset,
};
use crate::propagation::PropagationModel;
use crate::simulate::{
    generate_grid, simulate_site, synthesize_drive_test, DatasetRow, DriveTestSpec, GridSpec,
    SimulateError, SiteSimulation, Source,
};
use crate::terrain::{
    generate_synthetic_terrain, Bounds, Raster, SyntheticTerrainParams, TerrainError, TerrainStack,
    TxSite,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("unknown site `{0}`")]
    UnknownSite(String),
    #[error("site `{0}` has no real measurements")]
    NoRealData(String),
    #[error("site `{site}` has {n} rows; a split needs at least 2")]
    TooFewRows { site: String, n: usize },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("site `{site}`: {source}")]
    Site {
        site: String,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Terrain(#[from] TerrainError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Gbm(#[from] GbmError),
    #[error("config json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(PipelineError::Config(msg.into()))
}

/// Seed for one purpose, derived from the top-level seed.
///
/// The first eight bytes (little endian) of
/// `sha256("<seed>:<purpose>:<local>")`, where `local` is the seed written
/// in the nested config (0 when absent).
pub fn derive_seed(seed: u64, purpose: &str, local: u64) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{purpose}:{local}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Elevation inputs of a site: raster files or a synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TerrainSource {
    Files { dsm: PathBuf, dhm: PathBuf },
    Synthetic(SyntheticTerrainParams),
}

/// Where a site's drive-test data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasurementSource {
    /// A measurement CSV file.
    Csv(PathBuf),
    /// Synthetic RSRP drawn from a ground-truth model plus Gaussian noise.
    DriveTest(DriveTestConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveTestConfig {
    pub truth_model: PropagationModel,
    #[serde(default = "default_n_measurements")]
    pub n_measurements: usize,
    #[serde(default = "default_noise")]
    pub noise_sigma_db: f64,
    #[serde(default = "default_delta")]
    pub delta_db: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Bounds>,
}

fn default_n_measurements() -> usize {
    DriveTestSpec::default().n_measurements
}

fn default_noise() -> f64 {
    DriveTestSpec::default().noise_sigma_db
}

fn default_delta() -> f64 {
    DriveTestSpec::default().delta_db
}

/// Transmitter placement; the site id comes from the map key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TxConfig {
    pub x: f64,
    pub y: f64,
    pub tower_height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteConfig {
    pub terrain: TerrainSource,
    pub tx: TxConfig,
    /// Carrier frequencies in MHz.
    pub freqs: Vec<f64>,
    pub grid: GridSpec,
    /// Model used to produce this site's synthetic rows.
    pub synthetic_model: PropagationModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measurements: Option<MeasurementSource>,
    /// Matching radius between measurements and simulated points; twice the
    /// raster cellsize when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_match_distance: Option<f64>,
    #[serde(default)]
    pub grouping: OffsetGrouping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealPart {
    pub site: String,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default = "default_repeat")]
    pub repeat: usize,
}

fn default_fraction() -> f64 {
    0.5
}

fn default_repeat() -> usize {
    1
}

/// Composition of one training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default)]
    pub real: Vec<RealPart>,
    #[serde(default)]
    pub synthetic: Vec<String>,
}

impl TrainSpec {
    /// `A(R)+B(S)` style label; repeated real parts carry `xN`.
    pub fn display_label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        let real = self.real.iter().map(|r| {
            if r.repeat > 1 {
                format!("{}(R)x{}", r.site, r.repeat)
            } else {
                format!("{}(R)", r.site)
            }
        });
        let syn = self.synthetic.iter().map(|s| format!("{s}(S)"));
        real.chain(syn).collect::<Vec<_>>().join("+")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSpec {
    pub site: String,
    pub kind: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl TestSpec {
    pub fn display_label(&self) -> String {
        self.label.clone().unwrap_or_else(|| match self.kind {
            Source::Real => format!("{}(R)", self.site),
            Source::Synthetic => format!("{}(S)", self.site),
        })
    }
}

/// One training set or several.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(TrainSpec),
    Many(Vec<TrainSpec>),
}

impl OneOrMany {
    pub fn specs(&self) -> &[TrainSpec] {
        match self {
            OneOrMany::One(s) => std::slice::from_ref(s),
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Training set whose real parts get each repeat value.
    pub train: TrainSpec,
    pub repeats: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub sites: BTreeMap<String, SiteConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<OneOrMany>,
    pub test: Vec<TestSpec>,
    #[serde(default, alias = "model_config")]
    pub model: TrainConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.normalize()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        for site in self.sites.values_mut() {
            if let TerrainSource::Files { dsm, dhm } = &mut site.terrain {
                fix(dsm);
                fix(dhm);
            }
            if let Some(MeasurementSource::Csv(p)) = &mut site.measurements {
                fix(p);
            }
        }
    }

    /// Aligns the model's feature list with the feature flags when the model
    /// config leaves it at its default.
    fn normalize(&mut self) -> Result<()> {
        let inputs = self.features.model_inputs();
        if self.model.feature_names != inputs {
            if self.model.feature_names == TrainConfig::default().feature_names {
                self.model.feature_names = inputs;
            } else {
                return config_err(format!(
                    "model.feature_names {:?} disagree with the feature flags, which select {:?}",
                    self.model.feature_names, inputs
                ));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.features.validate()?;
        if self.sites.is_empty() {
            return config_err("no sites");
        }
        for (id, site) in &self.sites {
            if site.freqs.is_empty() {
                return config_err(format!("site `{id}`: no frequencies"));
            }
            site.grid.layout()?;
            if let Some(d) = site.max_match_distance {
                if !(d > 0.0 && d.is_finite()) {
                    return config_err(format!("site `{id}`: max_match_distance must be positive"));
                }
            }
        }
        let site_known = |s: &str| {
            if self.sites.contains_key(s) {
                Ok(())
            } else {
                Err(PipelineError::UnknownSite(s.to_string()))
            }
        };
        let mut specs: Vec<&TrainSpec> = self.train.iter().flat_map(|t| t.specs()).collect();
        if let Some(sweep) = &self.sweep {
            if sweep.repeats.is_empty() {
                return config_err("sweep.repeats is empty");
            }
            if sweep.repeats.contains(&0) {
                return config_err("sweep repeats must be at least 1");
            }
            if sweep.train.real.is_empty() {
                return config_err("sweep.train has no real parts to repeat");
            }
            specs.push(&sweep.train);
        }
        if specs.is_empty() {
            return config_err("nothing to run: set `train` or `sweep`");
        }
        for spec in specs {
            if spec.real.is_empty() && spec.synthetic.is_empty() {
                return config_err("a training set must name at least one real or synthetic part");
            }
            for r in &spec.real {
                site_known(&r.site)?;
                if !(r.fraction > 0.0 && r.fraction <= 1.0) {
                    return config_err(format!(
                        "fraction {} for site `{}` outside (0, 1]",
                        r.fraction, r.site
                    ));
                }
                if r.repeat == 0 {
                    return config_err(format!("repeat for site `{}` must be at least 1", r.site));
                }
                if self.sites[&r.site].measurements.is_none() {
                    return Err(PipelineError::NoRealData(r.site.clone()));
                }
            }
            for s in &spec.synthetic {
                site_known(s)?;
            }
        }
        if self.test.is_empty() {
            return config_err("no test sets");
        }
        for t in &self.test {
            site_known(&t.site)?;
            if t.kind == Source::Real && self.sites[&t.site].measurements.is_none() {
                return Err(PipelineError::NoRealData(t.site.clone()));
            }
        }
        Ok(())
    }

    /// Short content hash of the effective config.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialization is infallible");
        hex::encode(&Sha256::digest(json.as_bytes())[..6])
    }

    fn all_train_specs(&self) -> Vec<&TrainSpec> {
        self.train
            .iter()
            .flat_map(|t| t.specs())
            .chain(self.sweep.as_ref().map(|s| &s.train))
            .collect()
    }
}

fn sites_err(site: &str, e: impl Into<PipelineError>) -> PipelineError {
    PipelineError::Site {
        site: site.to_string(),
        source: Box::new(e.into()),
    }
}

/// Counts describing how a site's data was produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiteReport {
    pub site: String,
    pub clamped_negative_dhm: usize,
    pub grid_points: usize,
    pub grid_discarded: usize,
    pub synthetic_rows: usize,
    pub dropped_coincident: usize,
    pub dropped_below_reference: usize,
    pub measurements: usize,
    pub unmatched_measurements: usize,
    pub real_rows: usize,
    pub offsets: Vec<SiteOffset>,
}

/// Everything derived for one site.
#[derive(Debug, Clone)]
pub struct SiteData {
    pub stack: TerrainStack,
    pub tx: TxSite,
    pub simulation: SiteSimulation,
    pub measurements: Vec<RsrpMeasurement>,
    /// Converted measurements with features, in measurement order.
    pub real: Vec<DatasetRow>,
    pub report: SiteReport,
}

impl SiteData {
    pub fn synthetic(&self) -> &[DatasetRow] {
        &self.simulation.rows
    }
}

pub fn load_terrain(
    source: &TerrainSource,
    seed: u64,
    site: &str,
) -> Result<(TerrainStack, usize)> {
    let (stack, report) = match source {
        TerrainSource::Files { dsm, dhm } => {
            TerrainStack::new(Raster::read_ascii_grid(dsm)?, Raster::read_ascii_grid(dhm)?)?
        }
        TerrainSource::Synthetic(params) => {
            let params = SyntheticTerrainParams {
                seed: derive_seed(seed, &format!("terrain:{site}"), params.seed),
                ..params.clone()
            };
            (generate_synthetic_terrain(&params)?, Default::default())
        }
    };
    Ok((stack, report.clamped_negative_dhm))
}

/// Real dataset rows for converted measurements.
pub fn real_rows(
    stack: &TerrainStack,
    tx: &TxSite,
    measurements: &[RsrpMeasurement],
    sim: &SiteSimulation,
    max_dist: f64,
    grouping: OffsetGrouping,
    features: &FeatureConfig,
) -> Result<(Vec<DatasetRow>, Vec<SiteOffset>, usize)> {
    let conversion = convert_measurements(measurements, &sim.sim_points(), max_dist, grouping)?;
    let rows = conversion
        .rows
        .par_iter()
        .map(|c| {
            let m = &measurements[c.measurement];
            let fv = compute_features(stack, tx, m.position(), c.freq, features)?;
            Ok(DatasetRow {
                site: tx.site_id.clone(),
                source: Source::Real,
                features: fv,
                pathloss: c.pathloss,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, conversion.offsets, conversion.unmatched))
}

pub fn prepare_site(
    id: &str,
    site: &SiteConfig,
    seed: u64,
    features: &FeatureConfig,
) -> Result<SiteData> {
    let (stack, clamped) = load_terrain(&site.terrain, seed, id)?;
    let tx = TxSite {
        site_id: id.to_string(),
        x: site.tx.x,
        y: site.tx.y,
        tower_height: site.tx.tower_height,
        freqs: site.freqs.clone(),
    };
    tx.validate()?;
    if !stack.contains(tx.position()) {
        return Err(TerrainError::OutOfBounds { x: tx.x, y: tx.y }.into());
    }
    let grid_spec = GridSpec {
        seed: derive_seed(seed, &format!("grid:{id}"), site.grid.seed),
        ..site.grid.clone()
    };
    let grid = generate_grid(&grid_spec, &stack)?;
    let simulation = simulate_site(
        &stack,
        &tx,
        &grid.points,
        &tx.freqs,
        &site.synthetic_model,
        features,
    )?;

    let measurements = match &site.measurements {
        None => Vec::new(),
        Some(MeasurementSource::Csv(path)) => {
            let file = std::fs::File::open(path).map_err(|source| PipelineError::Io {
                path: path.clone(),
                source,
            })?;
            let all = read_measurements(file)?;
            let (mine, other): (Vec<_>, Vec<_>) = all.into_iter().partition(|m| m.site_id == id);
            if !other.is_empty() {
                log::warn!(
                    "site {id}: ignoring {} measurements of other sites",
                    other.len()
                );
            }
            mine
        }
        Some(MeasurementSource::DriveTest(d)) => {
            let spec = DriveTestSpec {
                n_measurements: d.n_measurements,
                noise_sigma_db: d.noise_sigma_db,
                delta_db: d.delta_db,
                seed: derive_seed(seed, &format!("drive:{id}"), 0),
                bounds: d.bounds,
            };
            synthesize_drive_test(&stack, &tx, &d.truth_model, features.rx_height, &spec)?
        }
    };

    let (real, offsets, unmatched) = if measurements.is_empty() {
        if site.measurements.is_some() {
            return Err(PipelineError::NoRealData(id.to_string()));
        }
        (Vec::new(), Vec::new(), 0)
    } else {
        let max_dist = site
            .max_match_distance
            .unwrap_or(2.0 * stack.dsm().cellsize());
        real_rows(
            &stack,
            &tx,
            &measurements,
            &simulation,
            max_dist,
            site.grouping,
            features,
        )?
    };

    let report = SiteReport {
        site: id.to_string(),
        clamped_negative_dhm: clamped,
        grid_points: grid.points.len(),
        grid_discarded: grid.discarded,
        synthetic_rows: simulation.rows.len(),
        dropped_coincident: simulation.dropped_coincident,
        dropped_below_reference: simulation.dropped_below_reference,
        measurements: measurements.len(),
        unmatched_measurements: unmatched,
        real_rows: real.len(),
        offsets,
    };
    Ok(SiteData {
        stack,
        tx,
        simulation,
        measurements,
        real,
        report,
    })
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

fn take_sorted(rows: &[DatasetRow], idx: &[usize]) -> Vec<DatasetRow> {
    let mut idx = idx.to_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| rows[i].clone()).collect()
}

fn train_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

/// Seeded random partition, done independently for each site. Each site
/// contributes `round(fraction * n)` training rows; both halves keep the
/// input order.
pub fn split(
    rows: &[DatasetRow],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<DatasetRow>, Vec<DatasetRow>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return config_err(format!("split fraction {fraction} outside (0, 1)"));
    }
    if rows.is_empty() {
        return Err(PipelineError::EmptyTrainingSet);
    }
    let mut by_site: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        by_site.entry(&r.site).or_default().push(i);
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (site, idx) in by_site {
        if idx.len() < 2 {
            return Err(PipelineError::TooFewRows {
                site: site.to_string(),
                n: idx.len(),
            });
        }
        let perm = permutation(idx.len(), derive_seed(seed, &format!("split:{site}"), 0));
        let k = train_count(fraction, idx.len());
        train_idx.extend(perm[..k].iter().map(|&p| idx[p]));
        test_idx.extend(perm[k..].iter().map(|&p| idx[p]));
    }
    Ok((take_sorted(rows, &train_idx), take_sorted(rows, &test_idx)))
}

fn repeated(rows: &[DatasetRow], repeat: usize) -> impl Iterator<Item = &DatasetRow> {
    (0..repeat).flat_map(move |_| rows.iter())
}

/// `synthetic` followed by `repeat` copies of `real_train`.
pub fn mix(
    real_train: &[DatasetRow],
    synthetic: &[DatasetRow],
    repeat: usize,
) -> Result<Vec<DatasetRow>> {
    if repeat == 0 {
        return config_err("repeat must be at least 1");
    }
    if real_train.is_empty() && synthetic.is_empty() {
        return Err(PipelineError::EmptyTrainingSet);
    }
    Ok(synthetic
        .iter()
        .chain(repeated(real_train, repeat))
        .cloned()
        .collect())
}

/// Builds the gbm training matrix from dataset rows.
pub fn training_data(rows: &[DatasetRow], feature_names: &[String]) -> Result<TrainingData> {
    let pairs: Vec<(FeatureVector, f64)> = rows.iter().map(|r| (r.features, r.pathloss)).collect();
    Ok(TrainingData::from_sources(feature_names, &pairs)?)
}

/// Predictions for `rows`.
pub fn predict_rows(model: &GbmModel, rows: &[DatasetRow]) -> Result<Vec<f64>> {
    rows.iter()
        .map(|r| gbm::predict(model, &r.features).map_err(Into::into))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub train_label: String,
    pub test_label: String,
    pub mae_db: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

pub const RESULT_HEADER: [&str; 6] = [
    "train_label",
    "test_label",
    "mae_db",
    "n_train",
    "n_test",
    "config_digest",
];

impl ResultTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(RESULT_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.train_label.clone(),
                r.test_label.clone(),
                r.mae_db.to_string(),
                r.n_train.to_string(),
                r.n_test.to_string(),
                r.config_digest.clone(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
    }

    /// Aligned plain-text table, followed by the model hyperparameters.
    pub fn render(&self, model: &TrainConfig) -> String {
        let head = ["training set", "test set", "MAE [dB]", "n_train", "n_test"];
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.train_label.clone(),
                    r.test_label.clone(),
                    format!("{:.2}", r.mae_db),
                    r.n_train.to_string(),
                    r.n_test.to_string(),
                ]
            })
            .collect();
        let mut width = head.map(str::len);
        for row in &cells {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, row: [&str; 5]| {
            let _ = writeln!(
                out,
                "{:<w0$}  {:<w1$}  {:>w2$}  {:>w3$}  {:>w4$}",
                row[0],
                row[1],
                row[2],
                row[3],
                row[4],
                w0 = width[0],
                w1 = width[1],
                w2 = width[2],
                w3 = width[3],
                w4 = width[4]
            );
        };
        line(&mut out, head);
        let _ = writeln!(out, "{}", "-".repeat(width.iter().sum::<usize>() + 8));
        for row in &cells {
            line(&mut out, [&row[0], &row[1], &row[2], &row[3], &row[4]]);
        }
        let _ = writeln!(
            out,
            "\nmodel: n_trees={} learning_rate={} max_depth={} min_samples_leaf={} subsample={} features={}",
            model.n_trees,
            model.learning_rate,
            model.max_depth,
            model.min_samples_leaf,
            model.subsample,
            model.feature_names.join(",")
        );
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(self.to_csv().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub repeat: usize,
    pub test_label: String,
    pub mae_db: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Plot-ready `repeat,test_label,mae_db` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("repeat,test_label,mae_db\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.repeat, r.test_label, r.mae_db);
        }
        out
    }
}

/// A fitted scenario.
#[derive(Debug, Clone)]
pub struct ScenarioOutput {
    pub label: String,
    pub model: GbmModel,
    pub rows: Vec<ResultRow>,
}

/// Prepared sites plus the shared real-data holdouts.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub sites: BTreeMap<String, SiteData>,
    /// Per site, the real-data permutation and the holdout start.
    splits: BTreeMap<String, (Vec<usize>, usize)>,
    digest: String,
}

impl Experiment {
    /// Loads or generates every site and fixes the real-data splits.
    ///
    /// All training sets draw a site's real rows from the front of one
    /// seeded permutation; the test holdout is the tail left after the
    /// largest fraction any training set uses. Every scenario is therefore
    /// scored on the same rows.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut sites = BTreeMap::new();
        for (id, site) in &config.sites {
            let data = prepare_site(id, site, config.seed, &config.features)
                .map_err(|e| sites_err(id, e))?;
            sites.insert(id.clone(), data);
        }

        let mut max_fraction: BTreeMap<&str, f64> = BTreeMap::new();
        for spec in config.all_train_specs() {
            for r in &spec.real {
                let f = max_fraction.entry(&r.site).or_insert(0.0);
                *f = f.max(r.fraction);
            }
        }
        let mut splits = BTreeMap::new();
        for (id, data) in &sites {
            let n = data.real.len();
            if data.report.measurements == 0 {
                continue;
            }
            if n < 2 {
                return Err(PipelineError::TooFewRows {
                    site: id.clone(),
                    n,
                });
            }
            let perm = permutation(n, derive_seed(config.seed, &format!("split:{id}"), 0));
            let start = max_fraction
                .get(id.as_str())
                .map_or(0, |&f| train_count(f, n));
            splits.insert(id.clone(), (perm, start));
        }
        let digest = config.digest();
        Ok(Experiment {
            config,
            sites,
            splits,
            digest,
        })
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    fn site(&self, id: &str) -> Result<&SiteData> {
        self.sites
            .get(id)
            .ok_or_else(|| PipelineError::UnknownSite(id.to_string()))
    }

    /// The first `round(fraction * n)` rows of the site's real permutation.
    pub fn real_train(&self, site: &str, fraction: f64) -> Result<Vec<DatasetRow>> {
        let data = self.site(site)?;
        let (perm, _) = self
            .splits
            .get(site)
            .ok_or_else(|| PipelineError::NoRealData(site.to_string()))?;
        Ok(take_sorted(
            &data.real,
            &perm[..train_count(fraction, perm.len())],
        ))
    }

    /// Real rows never used for training by any configured training set.
    pub fn real_holdout(&self, site: &str) -> Result<Vec<DatasetRow>> {
        let data = self.site(site)?;
        let (perm, start) = self
            .splits
            .get(site)
            .ok_or_else(|| PipelineError::NoRealData(site.to_string()))?;
        Ok(take_sorted(&data.real, &perm[*start..]))
    }

    pub fn test_rows(&self, test: &TestSpec) -> Result<Vec<DatasetRow>> {
        match test.kind {
            Source::Real => self.real_holdout(&test.site),
            Source::Synthetic => Ok(self.site(&test.site)?.synthetic().to_vec()),
        }
    }

    pub fn training_rows(&self, spec: &TrainSpec) -> Result<Vec<DatasetRow>> {
        let mut out = Vec::new();
        for s in &spec.synthetic {
            out.extend_from_slice(self.site(s)?.synthetic());
        }
        for r in &spec.real {
            let rows = self.real_train(&r.site, r.fraction)?;
            out.extend(repeated(&rows, r.repeat).cloned());
        }
        if out.is_empty() {
            return Err(PipelineError::EmptyTrainingSet);
        }
        Ok(out)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.config.seed, "gbm", self.config.model.seed),
            ..self.config.model.clone()
        }
    }

    /// Fits one model on `spec` and scores it on every test set.
    pub fn run_scenario(&self, spec: &TrainSpec) -> Result<ScenarioOutput> {
        let label = spec.display_label();
        let train = self.training_rows(spec)?;
        let cfg = self.train_config();
        let data = training_data(&train, &cfg.feature_names)?;
        let model = gbm::fit_data(&data, &cfg)?;
        let mut rows = Vec::new();
        for test in &self.config.test {
            let test_rows = self.test_rows(test)?;
            if test_rows.is_empty() {
                return config_err(format!("test set {} is empty", test.display_label()));
            }
            let pred = predict_rows(&model, &test_rows)?;
            let truth: Vec<f64> = test_rows.iter().map(|r| r.pathloss).collect();
            rows.push(ResultRow {
                train_label: label.clone(),
                test_label: test.display_label(),
                mae_db: gbm::mae(&pred, &truth)?,
                n_train: train.len(),
                n_test: test_rows.len(),
                config_digest: self.digest.clone(),
            });
        }
        log::info!("trained {label} on {} rows", train.len());
        Ok(ScenarioOutput { label, model, rows })
    }

    /// Every configured training set, in order.
    pub fn run_all(&self) -> Result<(ResultTable, Vec<ScenarioOutput>)> {
        let specs: Vec<&TrainSpec> = self.config.train.iter().flat_map(|t| t.specs()).collect();
        let outputs = specs
            .into_iter()
            .map(|s| self.run_scenario(s))
            .collect::<Result<Vec<_>>>()?;
        let table = ResultTable {
            rows: outputs
                .iter()
                .flat_map(|o| o.rows.iter().cloned())
                .collect(),
        };
        Ok((table, outputs))
    }

    /// Runs `spec` once per repeat value, applied to all of its real parts.
    pub fn repetition_sweep(
        &self,
        spec: &TrainSpec,
        repeats: &[usize],
    ) -> Result<(ResultTable, SweepTable)> {
        if repeats.is_empty() {
            return config_err("no repeat values");
        }
        let mut table = ResultTable::default();
        let mut sweep = SweepTable::default();
        for &k in repeats {
            let mut s = spec.clone();
            for r in &mut s.real {
                r.repeat = k;
            }
            if let Some(l) = &spec.label {
                s.label = Some(format!("{l} x{k}"));
            }
            let out = self.run_scenario(&s)?;
            for row in &out.rows {
                sweep.rows.push(SweepRow {
                    repeat: k,
                    test_label: row.test_label.clone(),
                    mae_db: row.mae_db,
                });
            }
            table.rows.extend(out.rows);
        }
        Ok((table, sweep))
    }
}

/// Outputs of a complete experiment run.
pub struct ExperimentOutput {
    pub table: ResultTable,
    pub scenarios: Vec<ScenarioOutput>,
    pub sweep: Option<(ResultTable, SweepTable)>,
    pub reports: Vec<SiteReport>,
    pub digest: String,
}

pub fn run_experiment(config: ExperimentConfig) -> Result<ExperimentOutput> {
    let exp = Experiment::prepare(config)?;
    let (table, scenarios) = exp.run_all()?;
    let sweep = match &exp.config.sweep {
        Some(s) => Some(exp.repetition_sweep(&s.train, &s.repeats)?),
        None => None,
    };
    Ok(ExperimentOutput {
        table,
        scenarios,
        sweep,
        reports: exp.sites.values().map(|s| s.report.clone()).collect(),
        digest: exp.digest.clone(),
    })
}

/// The bundled two-environment demo.
///
/// Site `A` is nearly flat with SUI terrain C as ground truth, site `B` is
/// hilly with suburban COST-231 Hata. Each site's synthetic rows come from
/// its own noiseless truth model and its drive test adds 2 dB Gaussian
/// noise. The three training sets `A(R)`, `B(S)` and `A(R)+B(S)` are each
/// scored on both sites' real holdouts.
pub fn demo_config(seed: u64) -> ExperimentConfig {
    let site = |relief: f64, density: f64, model: PropagationModel| SiteConfig {
        terrain: TerrainSource::Synthetic(SyntheticTerrainParams {
            size: 257,
            cellsize: 5.0,
            relief,
            clutter_density: density,
            ..Default::default()
        }),
        tx: TxConfig {
            x: 642.5,
            y: 642.5,
            tower_height: 30.0,
        },
        freqs: vec![731.5, 1935.0, 2538.2],
        grid: GridSpec::lattice(16.0),
        synthetic_model: model,
        measurements: Some(MeasurementSource::DriveTest(DriveTestConfig {
            truth_model: model,
            n_measurements: 2000,
            noise_sigma_db: 2.0,
            delta_db: 15.0,
            bounds: None,
        })),
        max_match_distance: Some(16.0),
        grouping: OffsetGrouping::PerSite,
    };
    let sui_c = PropagationModel::Sui {
        terrain: crate::propagation::SuiTerrain::C,
        shadowing: Default::default(),
    };
    let cost = PropagationModel::Cost231 {
        environment: Default::default(),
    };
    let real_a = RealPart {
        site: "A".into(),
        fraction: 0.5,
        repeat: 1,
    };
    ExperimentConfig {
        seed,
        sites: BTreeMap::from([
            ("A".to_string(), site(4.0, 0.1, sui_c)),
            ("B".to_string(), site(80.0, 0.3, cost)),
        ]),
        train: Some(OneOrMany::Many(vec![
            TrainSpec {
                real: vec![real_a.clone()],
                ..Default::default()
            },
            TrainSpec {
                synthetic: vec!["B".into()],
                ..Default::default()
            },
            TrainSpec {
                real: vec![real_a],
                synthetic: vec!["B".into()],
                label: None,
            },
        ])),
        test: vec![
            TestSpec {
                site: "A".into(),
                kind: Source::Real,
                label: None,
            },
            TestSpec {
                site: "B".into(),
                kind: Source::Real,
                label: None,
            },
        ],
        model: TrainConfig::default(),
        features: FeatureConfig::default(),
        sweep: None,
    }
}

/// The bundled repetition experiment on the demo's site `A`.
///
/// Synthetic rows come from free-space loss while the drive test follows
/// SUI terrain C, so the simulator is deliberately mismatched. The sweep
/// trains on 5% of the real rows, repeated 1 to 20 times, plus all synthetic
/// rows; the baseline trains on synthetic rows alone.
pub fn repetition_config(seed: u64) -> ExperimentConfig {
    let mut cfg = demo_config(seed);
    let mut site = cfg.sites.remove("A").expect("demo defines site A");
    site.synthetic_model = PropagationModel::Fspl;
    if let Some(MeasurementSource::DriveTest(d)) = &mut site.measurements {
        d.n_measurements = 71_068;
    }
    let spec = TrainSpec {
        real: vec![RealPart {
            site: "A".into(),
            fraction: 0.05,
            repeat: 1,
        }],
        synthetic: vec!["A".into()],
        label: None,
    };
    ExperimentConfig {
        sites: BTreeMap::from([("A".to_string(), site)]),
        train: Some(OneOrMany::One(TrainSpec {
            synthetic: vec!["A".into()],
            ..Default::default()
        })),
        test: vec![TestSpec {
            site: "A".into(),
            kind: Source::Real,
            label: None,
        }],
        sweep: Some(SweepSpec {
            train: spec,
            repeats: (1..=20).collect(),
        }),
        ..cfg
    }
}

/// Distinct site ids of `rows`, sorted.
pub fn sites_of(rows: &[DatasetRow]) -> BTreeSet<String> {
    rows.iter().map(|r| r.site.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(site: &str, i: usize) -> DatasetRow {
        DatasetRow {
            site: site.into(),
            source: Source::Real,
            features: FeatureVector {
                freq: 731.5,
                d_bs: 100.0 + i as f64,
                h_bs: 30.0,
                h_c: 0.0,
                roughness: 0.0,
                tx_haat: 30.0,
                alpha: 0.3,
                blockage: None,
            },
            pathloss: i as f64,
        }
    }

    fn rows(site: &str, n: usize) -> Vec<DatasetRow> {
        (0..n).map(|i| row(site, i)).collect()
    }

    #[test]
    fn split_partitions_per_site() {
        let mut all = rows("A", 1000);
        all.extend(rows("B", 11));
        let (train, test) = split(&all, 0.5, 3).unwrap();
        let count = |v: &[DatasetRow], s: &str| v.iter().filter(|r| r.site == s).count();
        assert_eq!(count(&train, "A"), 500);
        assert_eq!(count(&test, "A"), 500);
        assert_eq!(count(&train, "B"), 6);
        assert_eq!(count(&test, "B"), 5);
        let mut seen: Vec<(String, u64)> = train
            .iter()
            .chain(&test)
            .map(|r| (r.site.clone(), r.pathloss as u64))
            .collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), all.len());
        assert_eq!(split(&all, 0.5, 3).unwrap(), (train.clone(), test));
        assert_ne!(split(&all, 0.5, 4).unwrap().0, train);
    }

    #[test]
    fn split_small_fraction_and_errors() {
        let all = rows("A", 1000);
        assert_eq!(split(&all, 0.05, 1).unwrap().0.len(), 50);
        assert!(split(&all, 1.0, 1).is_err());
        assert!(split(&all, 0.0, 1).is_err());
        assert!(matches!(
            split(&rows("A", 1), 0.5, 1),
            Err(PipelineError::TooFewRows { .. })
        ));
    }

    #[test]
    fn mix_counts() {
        let real = rows("A", 50);
        let syn = rows("B", 6000);
        let out = mix(&real, &syn, 20).unwrap();
        assert_eq!(out.len(), 7000);
        assert_eq!(out[..6000], syn[..]);
        assert_eq!(out[6000..6050], real[..]);
        assert_eq!(out[6950..], real[..]);
        assert_eq!(mix(&real, &syn, 1).unwrap().len(), 6050);
        assert!(mix(&[], &[], 1).is_err());
        assert!(mix(&real, &syn, 0).is_err());
    }

    #[test]
    fn derived_seeds_differ_by_purpose() {
        assert_eq!(derive_seed(1, "grid:A", 0), derive_seed(1, "grid:A", 0));
        assert_ne!(derive_seed(1, "grid:A", 0), derive_seed(1, "grid:B", 0));
        assert_ne!(derive_seed(1, "grid:A", 0), derive_seed(2, "grid:A", 0));
        assert_ne!(derive_seed(1, "grid:A", 0), derive_seed(1, "grid:A", 1));
    }

    #[test]
    fn labels() {
        let spec = TrainSpec {
            label: None,
            real: vec![RealPart {
                site: "A".into(),
                fraction: 0.5,
                repeat: 1,
            }],
            synthetic: vec!["B".into()],
        };
        assert_eq!(spec.display_label(), "A(R)+B(S)");
        let rep = TrainSpec {
            real: vec![RealPart {
                repeat: 16,
                ..spec.real[0].clone()
            }],
            synthetic: vec![],
            label: None,
        };
        assert_eq!(rep.display_label(), "A(R)x16");
    }

    #[test]
    fn result_table_csv() {
        let t = ResultTable {
            rows: vec![ResultRow {
                train_label: "A(R)".into(),
                test_label: "B(R)".into(),
                mae_db: 4.25,
                n_train: 10,
                n_test: 20,
                config_digest: "abc".into(),
            }],
        };
        assert_eq!(
            t.to_csv(),
            "train_label,test_label,mae_db,n_train,n_test,config_digest\nA(R),B(R),4.25,10,20,abc\n"
        );
        let text = t.render(&TrainConfig::default());
        assert!(text.contains("4.25") && text.contains("n_trees=500"));
    }
}
