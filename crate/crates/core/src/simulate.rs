//! Synthetic dataset generation over receiver grids.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{batch_features, FeatureConfig, FeatureError, FeatureVector};
use crate::measurements::{freq_to_earfcn, RsrpMeasurement, SimPoint, RSRP_RANGE};
use crate::propagation::{model_pathloss, LinkGeometry, PathlossModel, PropagationError};
use crate::terrain::{Bounds, Point, Raster, TerrainError, TerrainStack, TxSite};

/// Column header of dataset CSV files.
pub const DATASET_HEADER: [&str; 11] = [
    "site",
    "source",
    "freq_mhz",
    "d_bs_m",
    "h_bs_m",
    "h_c_m",
    "roughness_m",
    "txhaat_m",
    "alpha",
    "blockage_m",
    "pathloss_db",
];

/// Column header of simulated-point CSV files.
pub const SIM_POINTS_HEADER: [&str; 5] = ["x", "y", "site", "freq_mhz", "pathloss_db"];

const COVERAGE_NODATA: f64 = -9999.0;

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error(transparent)]
    Terrain(#[from] TerrainError),
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid is empty after discarding {discarded} nodata points")]
    EmptyGrid { discarded: usize },
    #[error("no frequencies")]
    NoFrequencies,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("row {row}: {message}")]
    Row { row: u64, message: String },
    #[error("bad header: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimulateError>;

/// Receiver grid layout. Exactly one of `spacing` and `n_points` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Area to cover; the whole raster when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Bounds>,
    /// Lattice spacing in meters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<f64>,
    /// Number of uniformly random points.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_points: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

/// A validated grid layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridLayout {
    Lattice { spacing: f64 },
    Random { n_points: usize, seed: u64 },
}

impl GridSpec {
    pub fn lattice(spacing: f64) -> Self {
        GridSpec {
            bounds: None,
            spacing: Some(spacing),
            n_points: None,
            seed: 0,
        }
    }

    pub fn random(n_points: usize, seed: u64) -> Self {
        GridSpec {
            bounds: None,
            spacing: None,
            n_points: Some(n_points),
            seed,
        }
    }

    pub fn with_bounds(mut self, bounds: Bounds) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn layout(&self) -> Result<GridLayout> {
        match (self.spacing, self.n_points) {
            (Some(spacing), None) if spacing > 0.0 && spacing.is_finite() => {
                Ok(GridLayout::Lattice { spacing })
            }
            (Some(spacing), None) => Err(SimulateError::InvalidGrid(format!(
                "spacing must be positive, got {spacing}"
            ))),
            (None, Some(0)) => Err(SimulateError::InvalidGrid(
                "n_points must be at least 1".into(),
            )),
            (None, Some(n_points)) => Ok(GridLayout::Random {
                n_points,
                seed: self.seed,
            }),
            _ => Err(SimulateError::InvalidGrid(
                "exactly one of `spacing` and `n_points` must be set".into(),
            )),
        }
    }

    /// The covered area, checked against the stack extent.
    pub fn resolve_bounds(&self, stack: &TerrainStack) -> Result<Bounds> {
        let extent = stack.bounds();
        let b = self.bounds.unwrap_or(extent);
        if !(b.xmin < b.xmax && b.ymin < b.ymax) {
            return Err(SimulateError::InvalidGrid(format!(
                "degenerate bounds {b:?}"
            )));
        }
        if !extent.contains_bounds(&b) {
            return Err(SimulateError::InvalidGrid(format!(
                "bounds {b:?} extend outside the raster {extent:?}"
            )));
        }
        Ok(b)
    }
}

/// Lattice node counts along x and y.
fn lattice_shape(b: &Bounds, spacing: f64) -> (usize, usize) {
    let count = |span: f64| (span / spacing + 1e-9).floor() as usize + 1;
    (count(b.xmax - b.xmin), count(b.ymax - b.ymin))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub points: Vec<Point>,
    /// Points dropped because they fell on nodata cells.
    pub discarded: usize,
}

/// Lays out receiver points. Lattice points run row-major from
/// `(xmin, ymin)`: x varies fastest.
pub fn generate_grid(spec: &GridSpec, stack: &TerrainStack) -> Result<Grid> {
    let layout = spec.layout()?;
    let b = spec.resolve_bounds(stack)?;
    let candidates: Vec<Point> = match layout {
        GridLayout::Lattice { spacing } => {
            let (nx, ny) = lattice_shape(&b, spacing);
            (0..ny)
                .flat_map(|j| {
                    (0..nx).map(move |i| {
                        Point::new(b.xmin + i as f64 * spacing, b.ymin + j as f64 * spacing)
                    })
                })
                .collect()
        }
        GridLayout::Random { n_points, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n_points)
                .map(|_| {
                    Point::new(
                        rng.random_range(b.xmin..=b.xmax),
                        rng.random_range(b.ymin..=b.ymax),
                    )
                })
                .collect()
        }
    };
    let total = candidates.len();
    let points: Vec<Point> = candidates
        .into_iter()
        .filter(|&p| stack.ground_at(p).is_ok())
        .collect();
    let discarded = total - points.len();
    if points.is_empty() {
        return Err(SimulateError::EmptyGrid { discarded });
    }
    if discarded > 0 {
        log::warn!("discarded {discarded} grid points on nodata cells");
    }
    Ok(Grid { points, discarded })
}

/// Origin of a dataset row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Synthetic,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Real => "real",
            Source::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "real" => Ok(Source::Real),
            "synthetic" => Ok(Source::Synthetic),
            other => Err(format!(
                "unknown source `{other}`, expected real or synthetic"
            )),
        }
    }
}

/// One training or test example.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRow {
    pub site: String,
    pub source: Source,
    pub features: FeatureVector,
    /// dB.
    pub pathloss: f64,
}

/// Geometry of the link from `tx` to a receiver at `rx`.
pub fn link_geometry(
    stack: &TerrainStack,
    tx: &TxSite,
    rx: Point,
    freq: f64,
    rx_height: f64,
) -> Result<LinkGeometry> {
    let tx_ground = stack.ground_at(tx.position())?;
    let rx_ground = stack.ground_at(rx)?;
    Ok(LinkGeometry {
        tx_antenna_asl: tx_ground + tx.tower_height,
        rx_antenna_asl: rx_ground + rx_height,
        tx_height: tx.tower_height,
        rx_height,
        distance_2d: rx.distance(&tx.position()),
        freq,
    })
}

/// Out-of-domain model inputs seen during a simulation, per parameter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WarningSummary {
    pub model: String,
    pub parameter: String,
    pub range: (f64, f64),
    pub count: usize,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteSimulation {
    pub rows: Vec<DatasetRow>,
    /// Receiver position of each row.
    pub positions: Vec<Point>,
    /// Points skipped because they coincide with the transmitter.
    pub dropped_coincident: usize,
    /// (point, frequency) pairs the model refused as closer than its
    /// reference distance.
    pub dropped_below_reference: usize,
    pub warnings: Vec<WarningSummary>,
}

impl SiteSimulation {
    /// The rows as simulated points for measurement matching.
    pub fn sim_points(&self) -> Vec<SimPoint> {
        self.rows
            .iter()
            .zip(&self.positions)
            .map(|(r, p)| SimPoint {
                x: p.x,
                y: p.y,
                freq: r.features.freq,
                pathloss: r.pathloss,
            })
            .collect()
    }
}

/// Simulates every `(point, frequency)` pair and attaches features.
///
/// Rows come out point-major, then in `freqs` order, whatever the parallel
/// schedule.
pub fn simulate_site(
    stack: &TerrainStack,
    tx: &TxSite,
    grid: &[Point],
    freqs: &[f64],
    model: &dyn PathlossModel,
    cfg: &FeatureConfig,
) -> Result<SiteSimulation> {
    if grid.is_empty() {
        return Err(SimulateError::InvalidArgument("empty receiver grid".into()));
    }
    if freqs.is_empty() {
        return Err(SimulateError::NoFrequencies);
    }
    cfg.validate()?;
    tx.validate()?;
    let tx_pos = tx.position();
    let points: Vec<Point> = grid.iter().copied().filter(|p| *p != tx_pos).collect();
    let dropped_coincident = grid.len() - points.len();
    if points.is_empty() {
        return Err(SimulateError::InvalidArgument(
            "every grid point coincides with the transmitter".into(),
        ));
    }

    type Evaluated = Vec<Option<(f64, Vec<crate::propagation::DomainWarning>)>>;
    let losses: Vec<Evaluated> = points
        .par_iter()
        .map(|&p| {
            freqs
                .iter()
                .map(|&f| {
                    let link = link_geometry(stack, tx, p, f, cfg.rx_height)?;
                    match model_pathloss(model, &link) {
                        Ok(l) => Ok(Some((l.loss_db, l.warnings))),
                        Err(PropagationError::BelowReferenceDistance { .. }) => Ok(None),
                        Err(e) => Err(e.into()),
                    }
                })
                .collect::<Result<Evaluated>>()
        })
        .collect::<Result<_>>()?;

    let features = batch_features(stack, tx, &points, freqs, cfg)?;

    let mut rows = Vec::with_capacity(features.len());
    let mut positions = Vec::with_capacity(features.len());
    let mut dropped_below_reference = 0;
    let mut summaries: BTreeMap<(String, String), WarningSummary> = BTreeMap::new();
    for (i, per_freq) in losses.into_iter().enumerate() {
        for (j, loss) in per_freq.into_iter().enumerate() {
            let Some((pathloss, warnings)) = loss else {
                dropped_below_reference += 1;
                continue;
            };
            for w in warnings {
                summaries
                    .entry((w.model.to_string(), w.parameter.to_string()))
                    .and_modify(|s| {
                        s.count += 1;
                        s.min = s.min.min(w.value);
                        s.max = s.max.max(w.value);
                    })
                    .or_insert(WarningSummary {
                        model: w.model.to_string(),
                        parameter: w.parameter.to_string(),
                        range: w.range,
                        count: 1,
                        min: w.value,
                        max: w.value,
                    });
            }
            rows.push(DatasetRow {
                site: tx.site_id.clone(),
                source: Source::Synthetic,
                features: features[i * freqs.len() + j],
                pathloss,
            });
            positions.push(points[i]);
        }
    }
    if dropped_below_reference > 0 {
        log::info!(
            "site {}: dropped {dropped_below_reference} links closer than the {} reference distance",
            tx.site_id,
            model.name()
        );
    }
    let warnings: Vec<WarningSummary> = summaries.into_values().collect();
    for w in &warnings {
        log::warn!(
            "site {}: {} {} outside [{}, {}] on {} links (seen {}..{})",
            tx.site_id,
            w.model,
            w.parameter,
            w.range.0,
            w.range.1,
            w.count,
            w.min,
            w.max
        );
    }
    Ok(SiteSimulation {
        rows,
        positions,
        dropped_coincident,
        dropped_below_reference,
        warnings,
    })
}

/// Parameters of a synthetic drive test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriveTestSpec {
    pub n_measurements: usize,
    /// Standard deviation of the Gaussian measurement noise, dB.
    pub noise_sigma_db: f64,
    /// True offset between pathloss and RSRP, dB.
    pub delta_db: f64,
    pub seed: u64,
    /// Area to sample; the whole raster when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Bounds>,
}

impl Default for DriveTestSpec {
    fn default() -> Self {
        DriveTestSpec {
            n_measurements: 2000,
            noise_sigma_db: 2.0,
            delta_db: 15.0,
            seed: 0,
            bounds: None,
        }
    }
}

/// Draws RSRP samples `delta - (truth pathloss + noise)` at uniform random
/// positions. Frequencies cycle through `tx.freqs`; each carrier is its own
/// cell. Positions the model refuses, or that would yield an RSRP outside
/// the plausible range, are redrawn.
pub fn synthesize_drive_test(
    stack: &TerrainStack,
    tx: &TxSite,
    truth: &dyn PathlossModel,
    rx_height: f64,
    spec: &DriveTestSpec,
) -> Result<Vec<RsrpMeasurement>> {
    tx.validate()?;
    if !(spec.noise_sigma_db >= 0.0 && spec.noise_sigma_db.is_finite()) {
        return Err(SimulateError::InvalidArgument(format!(
            "noise sigma must be non-negative, got {}",
            spec.noise_sigma_db
        )));
    }
    let noise = Normal::new(0.0, spec.noise_sigma_db)
        .map_err(|e| SimulateError::InvalidArgument(e.to_string()))?;
    let b = GridSpec {
        bounds: spec.bounds,
        ..GridSpec::random(1, 0)
    }
    .resolve_bounds(stack)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let max_attempts = 100 * spec.n_measurements.max(1);
    let mut out = Vec::with_capacity(spec.n_measurements);
    let mut attempts = 0;
    while out.len() < spec.n_measurements {
        attempts += 1;
        if attempts > max_attempts {
            return Err(SimulateError::InvalidArgument(format!(
                "could only place {} of {} measurements",
                out.len(),
                spec.n_measurements
            )));
        }
        let p = Point::new(
            rng.random_range(b.xmin..=b.xmax),
            rng.random_range(b.ymin..=b.ymax),
        );
        let carrier = out.len() % tx.freqs.len();
        let freq = tx.freqs[carrier];
        let eps = noise.sample(&mut rng);
        if p == tx.position() || stack.ground_at(p).is_err() {
            continue;
        }
        let link = link_geometry(stack, tx, p, freq, rx_height)?;
        let loss = match model_pathloss(truth, &link) {
            Ok(l) => l.loss_db,
            Err(PropagationError::BelowReferenceDistance { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        let rsrp = spec.delta_db - (loss + eps);
        if !(rsrp >= RSRP_RANGE.0 && rsrp <= RSRP_RANGE.1) {
            continue;
        }
        let earfcn = freq_to_earfcn(freq);
        out.push(RsrpMeasurement {
            x: p.x,
            y: p.y,
            rsrp,
            earfcn,
            freq: if earfcn.is_some() { None } else { Some(freq) },
            cell_id: Some(format!("{}-{}", tx.site_id, carrier + 1)),
            site_id: tx.site_id.clone(),
        });
    }
    Ok(out)
}

/// Rasterizes one carrier of a lattice simulation as an ESRI grid whose cell
/// centers are the lattice nodes. Nodes without a row hold nodata.
pub fn coverage_raster(
    spec: &GridSpec,
    stack: &TerrainStack,
    sim: &SiteSimulation,
    freq: f64,
) -> Result<Raster> {
    let GridLayout::Lattice { spacing } = spec.layout()? else {
        return Err(SimulateError::InvalidGrid(
            "coverage rasters need a lattice grid".into(),
        ));
    };
    let b = spec.resolve_bounds(stack)?;
    let (nx, ny) = lattice_shape(&b, spacing);
    let mut values = vec![COVERAGE_NODATA; nx * ny];
    for (row, p) in sim.rows.iter().zip(&sim.positions) {
        if row.features.freq != freq {
            continue;
        }
        let i = ((p.x - b.xmin) / spacing).round() as usize;
        let j = ((p.y - b.ymin) / spacing).round() as usize;
        if i < nx && j < ny {
            values[(ny - 1 - j) * nx + i] = row.pathloss;
        }
    }
    Ok(Raster::new(
        nx,
        ny,
        b.xmin - spacing / 2.0,
        b.ymin - spacing / 2.0,
        spacing,
        COVERAGE_NODATA,
        values,
    )?)
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    if found.iter().ne(expected.iter().copied()) {
        return Err(SimulateError::Header {
            expected: expected.join(","),
            found: found.iter().collect::<Vec<_>>().join(","),
        });
    }
    Ok(())
}

fn parse_field(record: &csv::StringRecord, idx: usize, row: u64) -> Result<f64> {
    let text = &record[idx];
    let v: f64 = text.parse().map_err(|_| SimulateError::Row {
        row,
        message: format!("{}: cannot parse `{text}` as a number", DATASET_HEADER[idx]),
    })?;
    if !v.is_finite() {
        return Err(SimulateError::Row {
            row,
            message: format!("{}: value is not finite", DATASET_HEADER[idx]),
        });
    }
    Ok(v)
}

pub fn write_dataset<W: Write>(writer: W, rows: &[DatasetRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(DATASET_HEADER)?;
    for r in rows {
        let f = &r.features;
        w.write_record([
            r.site.clone(),
            r.source.to_string(),
            f.freq.to_string(),
            f.d_bs.to_string(),
            f.h_bs.to_string(),
            f.h_c.to_string(),
            f.roughness.to_string(),
            f.tx_haat.to_string(),
            f.alpha.to_string(),
            f.blockage.map(|b| b.to_string()).unwrap_or_default(),
            r.pathloss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset CSV, validating the header and every value. Row numbers
/// in errors count the header as row 1.
pub fn read_dataset<R: Read>(reader: R) -> Result<Vec<DatasetRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    check_header(rdr.headers()?, &DATASET_HEADER)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i as u64 + 2;
        let rec = rec?;
        let source = rec[1]
            .parse()
            .map_err(|message| SimulateError::Row { row, message })?;
        let num = |idx| parse_field(&rec, idx, row);
        let blockage = if rec[9].is_empty() {
            None
        } else {
            Some(num(9)?)
        };
        rows.push(DatasetRow {
            site: rec[0].to_string(),
            source,
            features: FeatureVector {
                freq: num(2)?,
                d_bs: num(3)?,
                h_bs: num(4)?,
                h_c: num(5)?,
                roughness: num(6)?,
                tx_haat: num(7)?,
                alpha: num(8)?,
                blockage,
            },
            pathloss: num(10)?,
        });
    }
    Ok(rows)
}

/// A simulated point tagged with its site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSimPoint {
    pub site: String,
    #[serde(flatten)]
    pub point: SimPoint,
}

pub fn write_sim_points<W: Write>(writer: W, site: &str, points: &[SimPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SIM_POINTS_HEADER)?;
    for p in points {
        w.write_record([
            p.x.to_string(),
            p.y.to_string(),
            site.to_string(),
            p.freq.to_string(),
            p.pathloss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sim_points<R: Read>(reader: R) -> Result<Vec<SiteSimPoint>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    check_header(rdr.headers()?, &SIM_POINTS_HEADER)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i as u64 + 2;
        let rec = rec?;
        let num = |idx: usize| -> Result<f64> {
            let text = &rec[idx];
            text.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| SimulateError::Row {
                    row,
                    message: format!("{}: bad number `{text}`", SIM_POINTS_HEADER[idx]),
                })
        };
        out.push(SiteSimPoint {
            site: rec[2].to_string(),
            point: SimPoint {
                x: num(0)?,
                y: num(1)?,
                freq: num(3)?,
                pathloss: num(4)?,
            },
        });
    }
    Ok(out)
}
