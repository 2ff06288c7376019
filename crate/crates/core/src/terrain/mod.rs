//! Elevation rasters and terrain stacks.
//!
//! A [`TerrainStack`] pairs a surface model (DSM, top of clutter above sea
//! level) with a height model (DHM, clutter height above ground) and keeps the
//! derived bare-ground raster alongside them. All coordinates are planar
//! meters in one shared projected system.

mod ascii_grid;
mod synthetic;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use synthetic::{generate_synthetic_terrain, SyntheticTerrainParams};

/// Value written for missing cells when a grid header does not declare one.
pub const DEFAULT_NODATA: f64 = -9999.0;

#[derive(Debug, Error)]
pub enum TerrainError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing required key `{0}`")]
    MissingKey(&'static str),
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("point ({x}, {y}) is outside the raster bounds")]
    OutOfBounds { x: f64, y: f64 },
    #[error("point ({x}, {y}) resolves onto a nodata cell")]
    NoData { x: f64, y: f64 },
    #[error("DSM and DHM grids do not share the same geometry")]
    GridMismatch,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty neighborhood around ({x}, {y}) with radius {radius}")]
    EmptyNeighborhood { x: f64, y: f64, radius: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TerrainError>;

/// A planar position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Nearest,
    #[default]
    Bilinear,
}

/// Axis-aligned extent `(xmin, ymin, xmax, ymax)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl Bounds {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.xmin && x <= self.xmax && y >= self.ymin && y <= self.ymax
    }

    pub fn contains_bounds(&self, other: &Bounds) -> bool {
        self.contains(other.xmin, other.ymin) && self.contains(other.xmax, other.ymax)
    }
}

/// A georeferenced grid of elevations stored row-major, north row first.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    ncols: usize,
    nrows: usize,
    xll: f64,
    yll: f64,
    cellsize: f64,
    nodata: f64,
    values: Vec<f64>,
}

impl Raster {
    pub fn new(
        ncols: usize,
        nrows: usize,
        xll: f64,
        yll: f64,
        cellsize: f64,
        nodata: f64,
        values: Vec<f64>,
    ) -> Result<Self> {
        if ncols < 2 || nrows < 2 {
            return Err(TerrainError::InvalidRaster(format!(
                "grid must be at least 2x2, got {ncols}x{nrows}"
            )));
        }
        if !(cellsize > 0.0 && cellsize.is_finite()) {
            return Err(TerrainError::InvalidRaster(format!(
                "cellsize must be positive, got {cellsize}"
            )));
        }
        if !xll.is_finite() || !yll.is_finite() {
            return Err(TerrainError::InvalidRaster("non-finite origin".into()));
        }
        if values.len() != ncols * nrows {
            return Err(TerrainError::InvalidRaster(format!(
                "expected {} values, got {}",
                ncols * nrows,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() && *v != nodata) {
            return Err(TerrainError::InvalidRaster(format!(
                "non-finite value at row {}, col {}",
                i / ncols,
                i % ncols
            )));
        }
        Ok(Raster {
            ncols,
            nrows,
            xll,
            yll,
            cellsize,
            nodata,
            values,
        })
    }

    /// Builds a raster by evaluating `f(x, y)` at every cell center.
    pub fn from_fn(
        ncols: usize,
        nrows: usize,
        xll: f64,
        yll: f64,
        cellsize: f64,
        mut f: impl FnMut(f64, f64) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(ncols * nrows);
        for row in 0..nrows {
            for col in 0..ncols {
                let x = xll + (col as f64 + 0.5) * cellsize;
                let y = yll + ((nrows - 1 - row) as f64 + 0.5) * cellsize;
                values.push(f(x, y));
            }
        }
        Raster::new(ncols, nrows, xll, yll, cellsize, DEFAULT_NODATA, values)
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn xll(&self) -> f64 {
        self.xll
    }

    pub fn yll(&self) -> f64 {
        self.yll
    }

    pub fn cellsize(&self) -> f64 {
        self.cellsize
    }

    pub fn nodata(&self) -> f64 {
        self.nodata
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v == self.nodata || v.is_nan()
    }

    /// Value at `(col, row)`, row 0 being the northernmost.
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.ncols + col]
    }

    pub fn cell_center(&self, col: usize, row: usize) -> Point {
        Point::new(
            self.xll + (col as f64 + 0.5) * self.cellsize,
            self.yll + ((self.nrows - 1 - row) as f64 + 0.5) * self.cellsize,
        )
    }

    pub fn bounds(&self) -> Bounds {
        Bounds {
            xmin: self.xll,
            ymin: self.yll,
            xmax: self.xll + self.ncols as f64 * self.cellsize,
            ymax: self.yll + self.nrows as f64 * self.cellsize,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.bounds().contains(x, y)
    }

    pub fn same_geometry(&self, other: &Raster) -> bool {
        self.ncols == other.ncols
            && self.nrows == other.nrows
            && self.xll == other.xll
            && self.yll == other.yll
            && self.cellsize == other.cellsize
    }

    /// Returns a copy with `f` applied to every data cell; nodata is preserved.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Raster {
        let values = self
            .values
            .iter()
            .map(|&v| if self.is_nodata(v) { v } else { f(v) })
            .collect();
        Raster {
            values,
            ..self.clone()
        }
    }

    fn check_bounds(&self, x: f64, y: f64) -> Result<()> {
        if x.is_finite() && y.is_finite() && self.contains(x, y) {
            Ok(())
        } else {
            Err(TerrainError::OutOfBounds { x, y })
        }
    }

    /// Column and row (north-first) of the cell containing `(x, y)`.
    /// The caller must have checked bounds; the east and north edges belong
    /// to the last cell.
    fn containing_cell(&self, x: f64, y: f64) -> (usize, usize) {
        let col = ((x - self.xll) / self.cellsize).floor().max(0.0) as usize;
        let row_from_south = ((y - self.yll) / self.cellsize).floor().max(0.0) as usize;
        let col = col.min(self.ncols - 1);
        let row_from_south = row_from_south.min(self.nrows - 1);
        (col, self.nrows - 1 - row_from_south)
    }

    /// Cell column/row containing `(x, y)`, or an out-of-bounds error.
    pub fn locate(&self, x: f64, y: f64) -> Result<(usize, usize)> {
        self.check_bounds(x, y)?;
        Ok(self.containing_cell(x, y))
    }

    pub fn sample(&self, x: f64, y: f64, mode: SampleMode) -> Result<f64> {
        self.check_bounds(x, y)?;
        let (col, row) = self.containing_cell(x, y);
        let nearest = self.get(col, row);
        if self.is_nodata(nearest) {
            return Err(TerrainError::NoData { x, y });
        }
        if mode == SampleMode::Nearest {
            return Ok(nearest);
        }

        // Fractional position in cell-center index space, clamped so the
        // outer half-cell margin collapses onto the edge centers.
        let fc = ((x - self.xll) / self.cellsize - 0.5).clamp(0.0, (self.ncols - 1) as f64);
        let fr = ((y - self.yll) / self.cellsize - 0.5).clamp(0.0, (self.nrows - 1) as f64);
        let c0 = (fc.floor() as usize).min(self.ncols - 2);
        let s0 = (fr.floor() as usize).min(self.nrows - 2);
        let tx = fc - c0 as f64;
        let ty = fr - s0 as f64;
        let r0 = self.nrows - 1 - s0;
        let r1 = r0 - 1;

        let v00 = self.get(c0, r0);
        let v10 = self.get(c0 + 1, r0);
        let v01 = self.get(c0, r1);
        let v11 = self.get(c0 + 1, r1);
        if [v00, v10, v01, v11].iter().any(|&v| self.is_nodata(v)) {
            return Ok(nearest);
        }
        let south = v00 * (1.0 - tx) + v10 * tx;
        let north = v01 * (1.0 - tx) + v11 * tx;
        Ok(south * (1.0 - ty) + north * ty)
    }

    /// Values of all data cells whose centers lie within `radius` of `center`
    /// (inclusive), in row-major order.
    pub fn neighbors_within(&self, center: Point, radius: f64) -> Result<Vec<f64>> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(TerrainError::InvalidArgument(format!(
                "radius must be positive, got {radius}"
            )));
        }
        self.check_bounds(center.x, center.y)?;
        // Slack absorbs rounding in reconstructed cell-center coordinates.
        let limit = radius + 1e-9 * self.cellsize;
        let limit_sq = limit * limit;

        let reach = (radius / self.cellsize).ceil() as isize + 1;
        let (ccol, crow) = self.containing_cell(center.x, center.y);
        let col_lo = (ccol as isize - reach).max(0) as usize;
        let col_hi = ((ccol as isize + reach) as usize).min(self.ncols - 1);
        let row_lo = (crow as isize - reach).max(0) as usize;
        let row_hi = ((crow as isize + reach) as usize).min(self.nrows - 1);

        let mut out = Vec::new();
        for row in row_lo..=row_hi {
            for col in col_lo..=col_hi {
                let p = self.cell_center(col, row);
                let dx = p.x - center.x;
                let dy = p.y - center.y;
                if dx * dx + dy * dy <= limit_sq {
                    let v = self.get(col, row);
                    if !self.is_nodata(v) {
                        out.push(v);
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(TerrainError::EmptyNeighborhood {
                x: center.x,
                y: center.y,
                radius,
            });
        }
        Ok(out)
    }
}

/// Load-time summary for a [`TerrainStack`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StackReport {
    /// DHM cells below zero that were clamped to zero.
    pub clamped_negative_dhm: usize,
}

/// Surface, clutter and derived ground rasters on one shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TerrainStack {
    dsm: Raster,
    dhm: Raster,
    ground: Raster,
}

impl TerrainStack {
    pub fn new(dsm: Raster, dhm: Raster) -> Result<(Self, StackReport)> {
        if !dsm.same_geometry(&dhm) {
            return Err(TerrainError::GridMismatch);
        }
        let mut report = StackReport::default();
        let mut dhm = dhm;
        let dhm_nodata = dhm.nodata;
        for v in dhm.values.iter_mut() {
            if *v != dhm_nodata && *v < 0.0 {
                *v = 0.0;
                report.clamped_negative_dhm += 1;
            }
        }
        if report.clamped_negative_dhm > 0 {
            log::warn!(
                "clamped {} negative DHM cells to zero",
                report.clamped_negative_dhm
            );
        }

        let ground_values = dsm
            .values
            .iter()
            .zip(&dhm.values)
            .map(|(&s, &h)| {
                if dsm.is_nodata(s) || dhm.is_nodata(h) {
                    dsm.nodata
                } else {
                    exact_difference(s, h)
                }
            })
            .collect();
        let ground = Raster {
            values: ground_values,
            ..dsm.clone()
        };
        Ok((TerrainStack { dsm, dhm, ground }, report))
    }

    pub fn dsm(&self) -> &Raster {
        &self.dsm
    }

    pub fn dhm(&self) -> &Raster {
        &self.dhm
    }

    pub fn ground(&self) -> &Raster {
        &self.ground
    }

    pub fn bounds(&self) -> Bounds {
        self.dsm.bounds()
    }

    pub fn contains(&self, p: Point) -> bool {
        self.dsm.contains(p.x, p.y)
    }

    pub fn ground_at(&self, p: Point) -> Result<f64> {
        self.ground.sample(p.x, p.y, SampleMode::Bilinear)
    }

    pub fn surface_at(&self, p: Point) -> Result<f64> {
        self.dsm.sample(p.x, p.y, SampleMode::Bilinear)
    }

    /// Same stack with a constant added to every surface elevation.
    pub fn shifted(&self, offset: f64) -> Result<TerrainStack> {
        let (stack, _) = TerrainStack::new(self.dsm.map(|v| v + offset), self.dhm.clone())?;
        Ok(stack)
    }
}

/// Returns `g` close to `surface - clutter` such that `g + clutter == surface`
/// when such a float exists within a few ulps of the rounded difference.
/// Values on a dyadic lattice (such as generated terrain) always succeed.
fn exact_difference(surface: f64, clutter: f64) -> f64 {
    let g = surface - clutter;
    if g + clutter == surface {
        return g;
    }
    let (mut up, mut down) = (g, g);
    for _ in 0..8 {
        up = up.next_up();
        if up + clutter == surface {
            return up;
        }
        down = down.next_down();
        if down + clutter == surface {
            return down;
        }
    }
    g
}

/// One sample of a terrain profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileSample {
    /// Distance along the path from the start point, meters.
    pub distance: f64,
    pub ground: f64,
    pub surface: f64,
}

/// Samples ground and surface elevation from `a` to `b` every `step` meters.
///
/// The final sample always sits exactly on `b`, so the last interval may be
/// shorter than `step`.
pub fn extract_profile(
    stack: &TerrainStack,
    a: Point,
    b: Point,
    step: f64,
) -> Result<Vec<ProfileSample>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(TerrainError::InvalidArgument(format!(
            "profile step must be positive, got {step}"
        )));
    }
    let total = a.distance(&b);
    if total == 0.0 {
        return Err(TerrainError::InvalidArgument(
            "profile endpoints coincide".into(),
        ));
    }
    for p in [a, b] {
        if !stack.contains(p) {
            return Err(TerrainError::OutOfBounds { x: p.x, y: p.y });
        }
    }

    let eps = 1e-9 * total.max(1.0);
    let mut distances = Vec::with_capacity((total / step) as usize + 2);
    let mut k = 0usize;
    loop {
        let d = k as f64 * step;
        if d >= total - eps {
            break;
        }
        distances.push(d);
        k += 1;
    }
    distances.push(total);

    distances
        .into_iter()
        .map(|d| {
            let p = if d == total {
                b
            } else {
                let t = d / total;
                Point::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t)
            };
            Ok(ProfileSample {
                distance: d,
                ground: stack.ground_at(p)?,
                surface: stack.surface_at(p)?,
            })
        })
        .collect()
}

/// A transmitter site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxSite {
    pub site_id: String,
    pub x: f64,
    pub y: f64,
    /// Antenna height above local ground, meters.
    pub tower_height: f64,
    /// Carrier frequencies in MHz.
    #[serde(default)]
    pub freqs: Vec<f64>,
}

impl TxSite {
    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tower_height > 0.0 && self.tower_height.is_finite()) {
            return Err(TerrainError::InvalidArgument(format!(
                "site {}: tower height must be positive",
                self.site_id
            )));
        }
        if self.freqs.is_empty() {
            return Err(TerrainError::InvalidArgument(format!(
                "site {}: no carrier frequencies",
                self.site_id
            )));
        }
        if let Some(f) = self.freqs.iter().find(|f| !(**f > 0.0 && **f < 100_000.0)) {
            return Err(TerrainError::InvalidArgument(format!(
                "site {}: frequency {f} MHz outside (0, 100000)",
                self.site_id
            )));
        }
        Ok(())
    }
}
