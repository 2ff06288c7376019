//! Engineered radio and geographic features for a transmitter/receiver pair.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::propagation::{blockage_distance, PropagationError};
use crate::terrain::{Point, Raster, TerrainError, TerrainStack, TxSite};

/// Neighborhood radius shared by clutter, roughness and HAAT features.
pub const DEFAULT_RADIUS: f64 = 50.0;

/// Receiver antenna height above ground, meters.
pub const DEFAULT_RX_HEIGHT: f64 = 1.5;

/// Column names of every feature, in canonical order.
pub const FEATURE_NAMES: [&str; 8] = [
    "freq_mhz",
    "d_bs_m",
    "h_bs_m",
    "h_c_m",
    "roughness_m",
    "txhaat_m",
    "alpha",
    "blockage_m",
];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Terrain(#[from] TerrainError),
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error("no frequencies")]
    NoFrequencies,
    #[error("percentile of an empty list")]
    EmptyList,
    #[error("percentile rank {0} outside [0, 1]")]
    InvalidPercentile(f64),
    #[error("receiver at ({x}, {y}) coincides with the transmitter")]
    CoincidentPoints { x: f64, y: f64 },
    #[error("invalid feature configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Neighborhood radius in meters.
    pub radius: f64,
    /// Feed the carrier frequency to the model.
    pub include_freq: bool,
    /// Compute the Fresnel blockage distance and feed it to the model.
    pub include_blockage: bool,
    /// Receiver antenna height used for blockage geometry.
    pub rx_height: f64,
    /// Profile sampling step for blockage; the raster cellsize when absent.
    pub profile_step: Option<f64>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            radius: DEFAULT_RADIUS,
            include_freq: true,
            include_blockage: false,
            rx_height: DEFAULT_RX_HEIGHT,
            profile_step: None,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(FeatureError::InvalidConfig(format!(
                "radius must be positive, got {}",
                self.radius
            )));
        }
        if !(self.rx_height > 0.0 && self.rx_height.is_finite()) {
            return Err(FeatureError::InvalidConfig(format!(
                "rx_height must be positive, got {}",
                self.rx_height
            )));
        }
        if let Some(step) = self.profile_step {
            if !(step > 0.0 && step.is_finite()) {
                return Err(FeatureError::InvalidConfig(format!(
                    "profile_step must be positive, got {step}"
                )));
            }
        }
        Ok(())
    }

    /// Names of the model inputs selected by this configuration.
    pub fn model_inputs(&self) -> Vec<String> {
        FEATURE_NAMES
            .iter()
            .filter(|&&n| {
                (n != "freq_mhz" || self.include_freq)
                    && (n != "blockage_m" || self.include_blockage)
            })
            .map(|n| n.to_string())
            .collect()
    }
}

/// The tabular inputs of the pathloss model for one (receiver, frequency).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// Carrier frequency, MHz.
    pub freq: f64,
    /// Horizontal distance to the serving transmitter, meters.
    pub d_bs: f64,
    /// Transmitter antenna elevation above the receiver's ground, meters.
    pub h_bs: f64,
    /// Mean clutter height around the receiver.
    pub h_c: f64,
    /// 90th minus 10th percentile of ground elevation around the receiver.
    pub roughness: f64,
    /// Transmitter antenna elevation above the mean surface around it.
    pub tx_haat: f64,
    /// `(h_bs - h_c) / d_bs`, the tangent of the elevation angle.
    pub alpha: f64,
    pub blockage: Option<f64>,
}

impl FeatureVector {
    /// Value of a feature by column name.
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "freq_mhz" => Some(self.freq),
            "d_bs_m" => Some(self.d_bs),
            "h_bs_m" => Some(self.h_bs),
            "h_c_m" => Some(self.h_c),
            "roughness_m" => Some(self.roughness),
            "txhaat_m" => Some(self.tx_haat),
            "alpha" => Some(self.alpha),
            "blockage_m" => self.blockage,
            _ => None,
        }
    }
}

/// Values of the data cells within `radius` of `center`.
pub fn neighbors_within(raster: &Raster, center: Point, radius: f64) -> Result<Vec<f64>> {
    Ok(raster.neighbors_within(center, radius)?)
}

/// Linear-interpolated percentile at rank `p * (n - 1)` of the sorted values.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(FeatureError::EmptyList);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(FeatureError::InvalidPercentile(p));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, p))
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let rank = p * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Per-transmitter quantities shared by every receiver.
struct SiteContext {
    antenna_asl: f64,
    tx_haat: f64,
}

impl SiteContext {
    fn new(stack: &TerrainStack, tx: &TxSite, radius: f64) -> Result<Self> {
        let pos = tx.position();
        let antenna_asl = stack.ground_at(pos)? + tx.tower_height;
        let surface = neighbors_within(stack.dsm(), pos, radius)?;
        Ok(SiteContext {
            antenna_asl,
            tx_haat: antenna_asl - mean(&surface),
        })
    }
}

/// Frequency-independent features of one receiver point.
struct PointFeatures {
    d_bs: f64,
    h_bs: f64,
    h_c: f64,
    roughness: f64,
}

impl PointFeatures {
    fn new(
        stack: &TerrainStack,
        tx: &TxSite,
        site: &SiteContext,
        rx: Point,
        radius: f64,
    ) -> Result<Self> {
        let d_bs = rx.distance(&tx.position());
        if d_bs == 0.0 {
            return Err(FeatureError::CoincidentPoints { x: rx.x, y: rx.y });
        }
        let h_bs = site.antenna_asl - stack.ground_at(rx)?;
        let h_c = mean(&neighbors_within(stack.dhm(), rx, radius)?);
        let mut ground = neighbors_within(stack.ground(), rx, radius)?;
        ground.sort_by(f64::total_cmp);
        let roughness = percentile_sorted(&ground, 0.90) - percentile_sorted(&ground, 0.10);
        Ok(PointFeatures {
            d_bs,
            h_bs,
            h_c,
            roughness,
        })
    }

    fn with_freq(
        &self,
        stack: &TerrainStack,
        tx: &TxSite,
        site: &SiteContext,
        rx: Point,
        freq: f64,
        cfg: &FeatureConfig,
    ) -> Result<FeatureVector> {
        let blockage = if cfg.include_blockage {
            let step = cfg.profile_step.unwrap_or(stack.dsm().cellsize());
            Some(blockage_distance(stack, tx, rx, cfg.rx_height, freq, step)?)
        } else {
            None
        };
        Ok(FeatureVector {
            freq,
            d_bs: self.d_bs,
            h_bs: self.h_bs,
            h_c: self.h_c,
            roughness: self.roughness,
            tx_haat: site.tx_haat,
            alpha: (self.h_bs - self.h_c) / self.d_bs,
            blockage,
        })
    }
}

fn check_freq(freq: f64) -> Result<()> {
    if freq > 0.0 && freq.is_finite() {
        Ok(())
    } else {
        Err(FeatureError::InvalidConfig(format!(
            "frequency must be positive, got {freq}"
        )))
    }
}

pub fn compute_features(
    stack: &TerrainStack,
    tx: &TxSite,
    rx: Point,
    freq: f64,
    cfg: &FeatureConfig,
) -> Result<FeatureVector> {
    cfg.validate()?;
    check_freq(freq)?;
    let site = SiteContext::new(stack, tx, cfg.radius)?;
    let point = PointFeatures::new(stack, tx, &site, rx, cfg.radius)?;
    point.with_freq(stack, tx, &site, rx, freq, cfg)
}

/// Features for every `(point, frequency)` pair, ordered point-major.
///
/// Points are evaluated in parallel; the output order never depends on the
/// scheduling.
pub fn batch_features(
    stack: &TerrainStack,
    tx: &TxSite,
    rx_points: &[Point],
    freqs: &[f64],
    cfg: &FeatureConfig,
) -> Result<Vec<FeatureVector>> {
    cfg.validate()?;
    if freqs.is_empty() {
        return Err(FeatureError::NoFrequencies);
    }
    for &f in freqs {
        check_freq(f)?;
    }
    let site = SiteContext::new(stack, tx, cfg.radius)?;
    let per_point: Vec<Vec<FeatureVector>> = rx_points
        .par_iter()
        .map(|&rx| {
            let point = PointFeatures::new(stack, tx, &site, rx, cfg.radius)?;
            freqs
                .iter()
                .map(|&f| point.with_freq(stack, tx, &site, rx, f, cfg))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(per_point.into_iter().flatten().collect())
}
