//! Empirical pathloss models and the first Fresnel-zone clearance test.
//!
//! All models are deterministic closed forms. Inputs outside a model's
//! nominal validity domain are still evaluated; the caller receives a list of
//! [`DomainWarning`]s alongside the loss.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::terrain::{extract_profile, Point, TerrainError, TerrainStack, TxSite};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// SUI reference distance in meters.
pub const SUI_REFERENCE_DISTANCE: f64 = 100.0;

/// Fraction of the first Fresnel radius that must be clear of obstruction.
pub const FRESNEL_CLEARANCE: f64 = 0.6;

#[derive(Debug, Error)]
pub enum PropagationError {
    #[error("{name} must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("distance {distance} m is below the SUI reference distance of {reference} m")]
    BelowReferenceDistance { distance: f64, reference: f64 },
    #[error(
        "unknown propagation model `{0}`; built-in models are fspl, cost231, sui. \
         Other models (e.g. eHata) plug in by implementing the PathlossModel trait"
    )]
    UnknownModel(String),
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Terrain(#[from] TerrainError),
}

pub type Result<T> = std::result::Result<T, PropagationError>;

fn positive(name: &'static str, value: f64) -> Result<f64> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(PropagationError::NonPositive { name, value })
    }
}

/// An input that lies outside the nominal validity range of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainWarning {
    pub model: &'static str,
    pub parameter: &'static str,
    pub value: f64,
    pub range: (f64, f64),
}

impl fmt::Display for DomainWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} = {} outside recommended range [{}, {}]",
            self.model, self.parameter, self.value, self.range.0, self.range.1
        )
    }
}

fn check_range(
    out: &mut Vec<DomainWarning>,
    model: &'static str,
    parameter: &'static str,
    value: f64,
    range: (f64, f64),
) {
    if value < range.0 || value > range.1 {
        out.push(DomainWarning {
            model,
            parameter,
            value,
            range,
        });
    }
}

pub fn wavelength(freq_mhz: f64) -> f64 {
    SPEED_OF_LIGHT / (freq_mhz * 1e6)
}

/// Free-space pathloss in dB for a distance in meters and a frequency in MHz.
pub fn fspl(distance_m: f64, freq_mhz: f64) -> Result<f64> {
    let d = positive("distance", distance_m)?;
    let f = positive("frequency", freq_mhz)?;
    let k = 20.0 * (4.0 * std::f64::consts::PI / SPEED_OF_LIGHT).log10();
    Ok(20.0 * d.log10() + 20.0 * (f * 1e6).log10() + k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum Cost231Environment {
    /// Suburban and medium-city areas (C = 0 dB). Rural requests map here.
    #[default]
    Suburban,
    /// Metropolitan centers (C = 3 dB).
    Metropolitan,
}

impl Cost231Environment {
    pub fn correction_db(self) -> f64 {
        match self {
            Cost231Environment::Suburban => 0.0,
            Cost231Environment::Metropolitan => 3.0,
        }
    }
}

impl FromStr for Cost231Environment {
    type Err = PropagationError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "suburban" => Ok(Cost231Environment::Suburban),
            "metropolitan" | "urban" => Ok(Cost231Environment::Metropolitan),
            "rural" => {
                log::warn!("COST-231 Hata defines no rural correction; using suburban (C = 0 dB)");
                Ok(Cost231Environment::Suburban)
            }
            other => Err(PropagationError::InvalidParameter(format!(
                "unknown COST-231 environment `{other}`"
            ))),
        }
    }
}

impl TryFrom<String> for Cost231Environment {
    type Error = PropagationError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Cost231Environment> for String {
    fn from(e: Cost231Environment) -> String {
        match e {
            Cost231Environment::Suburban => "suburban".into(),
            Cost231Environment::Metropolitan => "metropolitan".into(),
        }
    }
}

/// COST-231 Hata pathloss in dB. Distance in km, frequency in MHz, antenna
/// heights in meters above local ground.
pub fn cost231_hata(
    distance_km: f64,
    freq_mhz: f64,
    h_base: f64,
    h_mobile: f64,
    env: Cost231Environment,
) -> Result<f64> {
    let d = positive("distance", distance_km)?;
    let f = positive("frequency", freq_mhz)?;
    let hb = positive("base station height", h_base)?;
    let hm = positive("mobile height", h_mobile)?;
    let log_f = f.log10();
    let mobile_correction = (1.1 * log_f - 0.7) * hm - (1.56 * log_f - 0.8);
    Ok(46.3 + 33.9 * log_f - 13.82 * hb.log10() - mobile_correction
        + (44.9 - 6.55 * hb.log10()) * d.log10()
        + env.correction_db())
}

pub fn cost231_domain_warnings(
    distance_km: f64,
    freq_mhz: f64,
    h_base: f64,
    h_mobile: f64,
) -> Vec<DomainWarning> {
    let mut out = Vec::new();
    check_range(
        &mut out,
        "cost231",
        "frequency_mhz",
        freq_mhz,
        (1500.0, 2000.0),
    );
    check_range(&mut out, "cost231", "h_base_m", h_base, (30.0, 200.0));
    check_range(&mut out, "cost231", "h_mobile_m", h_mobile, (1.0, 10.0));
    check_range(
        &mut out,
        "cost231",
        "distance_km",
        distance_km,
        (0.02, 20.0),
    );
    out
}

/// SUI terrain categories: A is hilly with dense trees (highest loss), C is
/// flat with light tree density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SuiTerrain {
    A,
    B,
    C,
}

impl SuiTerrain {
    fn gamma_coefficients(self) -> (f64, f64, f64) {
        match self {
            SuiTerrain::A => (4.6, 0.0075, 12.6),
            SuiTerrain::B => (4.0, 0.0065, 17.1),
            SuiTerrain::C => (3.6, 0.005, 20.0),
        }
    }

    fn receiver_height_factor(self) -> f64 {
        match self {
            SuiTerrain::A | SuiTerrain::B => -10.8,
            SuiTerrain::C => -20.0,
        }
    }

    /// Pathloss exponent for a base station height in meters.
    pub fn path_loss_exponent(self, h_base: f64) -> f64 {
        let (a, b, c) = self.gamma_coefficients();
        a - b * h_base + c / h_base
    }
}

impl FromStr for SuiTerrain {
    type Err = PropagationError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(SuiTerrain::A),
            "B" | "b" => Ok(SuiTerrain::B),
            "C" | "c" => Ok(SuiTerrain::C),
            other => Err(PropagationError::InvalidParameter(format!(
                "unknown SUI terrain `{other}` (expected A, B or C)"
            ))),
        }
    }
}

/// Deterministic SUI pathloss (shadowing term zero).
pub fn sui(
    distance_m: f64,
    freq_mhz: f64,
    h_base: f64,
    h_rx: f64,
    terrain: SuiTerrain,
) -> Result<f64> {
    let d = positive("distance", distance_m)?;
    let f = positive("frequency", freq_mhz)?;
    let hb = positive("base station height", h_base)?;
    let hr = positive("receiver height", h_rx)?;
    if d < SUI_REFERENCE_DISTANCE {
        return Err(PropagationError::BelowReferenceDistance {
            distance: d,
            reference: SUI_REFERENCE_DISTANCE,
        });
    }
    let d0 = SUI_REFERENCE_DISTANCE;
    let intercept = 20.0 * (4.0 * std::f64::consts::PI * d0 / wavelength(f)).log10();
    let gamma = terrain.path_loss_exponent(hb);
    let freq_correction = 6.0 * (f / 2000.0).log10();
    let height_correction = terrain.receiver_height_factor() * (hr / 2.0).log10();
    Ok(intercept + 10.0 * gamma * (d / d0).log10() + freq_correction + height_correction)
}

pub fn sui_domain_warnings(h_base: f64, h_rx: f64) -> Vec<DomainWarning> {
    let mut out = Vec::new();
    check_range(&mut out, "sui", "h_base_m", h_base, (10.0, 80.0));
    check_range(&mut out, "sui", "h_rx_m", h_rx, (2.0, 10.0));
    out
}

/// Radius of the first Fresnel zone at distances `d1` and `d2` (meters) from
/// the two link ends.
pub fn fresnel_radius(d1: f64, d2: f64, freq_mhz: f64) -> Result<f64> {
    let d1 = positive("d1", d1)?;
    let d2 = positive("d2", d2)?;
    let f = positive("frequency", freq_mhz)?;
    Ok((wavelength(f) * d1 * d2 / (d1 + d2)).sqrt())
}

/// Cumulative blocked path length between a transmitter and a receiver.
///
/// Interior profile samples whose surface rises above the direct
/// antenna-to-antenna line minus 60% of the first Fresnel radius count as
/// blocked; each contributes `step` meters. The endpoints are never counted.
pub fn blockage_distance(
    stack: &TerrainStack,
    tx: &TxSite,
    rx: Point,
    rx_antenna: f64,
    freq_mhz: f64,
    step: f64,
) -> Result<f64> {
    let f = positive("frequency", freq_mhz)?;
    let rx_antenna = positive("receiver antenna height", rx_antenna)?;
    let tx_height = positive("tower height", tx.tower_height)?;
    let profile = extract_profile(stack, tx.position(), rx, step)?;
    let first = profile[0];
    let last = profile[profile.len() - 1];
    let total = last.distance;
    let tx_asl = first.ground + tx_height;
    let rx_asl = last.ground + rx_antenna;

    let mut blocked = 0usize;
    for s in &profile[1..profile.len() - 1] {
        let line = tx_asl + (rx_asl - tx_asl) * (s.distance / total);
        let r1 = fresnel_radius(s.distance, total - s.distance, f)?;
        if s.surface > line - FRESNEL_CLEARANCE * r1 {
            blocked += 1;
        }
    }
    Ok((blocked as f64 * step).clamp(0.0, total))
}

/// End-to-end geometry of one link, as consumed by the pathloss models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkGeometry {
    /// Transmitter ground elevation plus tower height.
    pub tx_antenna_asl: f64,
    /// Receiver ground elevation plus receiver antenna height.
    pub rx_antenna_asl: f64,
    /// Transmitter antenna height above its local ground.
    pub tx_height: f64,
    /// Receiver antenna height above its local ground.
    pub rx_height: f64,
    /// Horizontal distance in meters.
    pub distance_2d: f64,
    pub freq: f64,
}

impl LinkGeometry {
    /// Straight-line antenna-to-antenna distance.
    pub fn slant_distance(&self) -> f64 {
        self.distance_2d
            .hypot(self.tx_antenna_asl - self.rx_antenna_asl)
    }

    fn validate(&self) -> Result<()> {
        positive("distance", self.distance_2d)?;
        positive("frequency", self.freq)?;
        positive("transmitter height", self.tx_height)?;
        positive("receiver height", self.rx_height)?;
        if !self.tx_antenna_asl.is_finite() || !self.rx_antenna_asl.is_finite() {
            return Err(PropagationError::InvalidParameter(
                "non-finite antenna elevation".into(),
            ));
        }
        Ok(())
    }
}

/// Log-normal shadowing applied on top of the deterministic SUI loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Shadowing {
    #[default]
    None,
    LogNormal {
        sigma_db: f64,
        seed: u64,
    },
}

/// Pathloss plus any out-of-domain notes raised while computing it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLoss {
    pub loss_db: f64,
    pub warnings: Vec<DomainWarning>,
}

/// Extension point for propagation models. Implement this to plug in a model
/// that is not built in (for example a full eHata implementation).
pub trait PathlossModel: Sync {
    fn name(&self) -> &str;
    fn pathloss(&self, link: &LinkGeometry) -> Result<ModelLoss>;
}

/// The built-in models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase", deny_unknown_fields)]
pub enum PropagationModel {
    /// Free space over the 3-D antenna-to-antenna distance.
    Fspl,
    Cost231 {
        #[serde(default)]
        environment: Cost231Environment,
    },
    Sui {
        terrain: SuiTerrain,
        #[serde(default)]
        shadowing: Shadowing,
    },
}

impl FromStr for PropagationModel {
    type Err = PropagationError;

    /// Accepts `fspl`, `cost231[:suburban|metropolitan|rural]` and
    /// `sui:A|B|C`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        match (name.to_ascii_lowercase().as_str(), arg) {
            ("fspl", None) => Ok(PropagationModel::Fspl),
            ("cost231" | "cost231-hata", arg) => Ok(PropagationModel::Cost231 {
                environment: arg.map(str::parse).transpose()?.unwrap_or_default(),
            }),
            ("sui", Some(t)) => Ok(PropagationModel::Sui {
                terrain: t.parse()?,
                shadowing: Shadowing::None,
            }),
            ("sui", None) => Err(PropagationError::InvalidParameter(
                "sui requires a terrain category, e.g. sui:C".into(),
            )),
            _ => Err(PropagationError::UnknownModel(s.to_string())),
        }
    }
}

impl fmt::Display for PropagationModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PropagationModel::Fspl => f.write_str("fspl"),
            PropagationModel::Cost231 { environment } => {
                write!(f, "cost231:{}", String::from(*environment))
            }
            PropagationModel::Sui { terrain, .. } => write!(f, "sui:{terrain:?}"),
        }
    }
}

/// SplitMix64 finalizer, used to key per-link shadowing draws.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn shadowing_draw(sigma_db: f64, seed: u64, link: &LinkGeometry) -> Result<f64> {
    let normal = Normal::new(0.0, sigma_db)
        .map_err(|e| PropagationError::InvalidParameter(format!("shadowing sigma: {e}")))?;
    let key = [
        link.distance_2d,
        link.freq,
        link.tx_antenna_asl,
        link.rx_antenna_asl,
    ]
    .iter()
    .fold(mix64(seed), |acc, v| mix64(acc ^ v.to_bits()));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    Ok(normal.sample(&mut rng))
}

impl PathlossModel for PropagationModel {
    fn name(&self) -> &str {
        match self {
            PropagationModel::Fspl => "fspl",
            PropagationModel::Cost231 { .. } => "cost231",
            PropagationModel::Sui { .. } => "sui",
        }
    }

    fn pathloss(&self, link: &LinkGeometry) -> Result<ModelLoss> {
        link.validate()?;
        match *self {
            PropagationModel::Fspl => Ok(ModelLoss {
                loss_db: fspl(link.slant_distance(), link.freq)?,
                warnings: Vec::new(),
            }),
            PropagationModel::Cost231 { environment } => {
                let d_km = link.distance_2d / 1000.0;
                Ok(ModelLoss {
                    loss_db: cost231_hata(
                        d_km,
                        link.freq,
                        link.tx_height,
                        link.rx_height,
                        environment,
                    )?,
                    warnings: cost231_domain_warnings(
                        d_km,
                        link.freq,
                        link.tx_height,
                        link.rx_height,
                    ),
                })
            }
            PropagationModel::Sui { terrain, shadowing } => {
                let mut loss = sui(
                    link.distance_2d,
                    link.freq,
                    link.tx_height,
                    link.rx_height,
                    terrain,
                )?;
                if let Shadowing::LogNormal { sigma_db, seed } = shadowing {
                    loss += shadowing_draw(sigma_db, seed, link)?;
                }
                Ok(ModelLoss {
                    loss_db: loss,
                    warnings: sui_domain_warnings(link.tx_height, link.rx_height),
                })
            }
        }
    }
}

/// Evaluates `model` on `link`.
pub fn model_pathloss(model: &dyn PathlossModel, link: &LinkGeometry) -> Result<ModelLoss> {
    model.pathloss(link)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terrain::Raster;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn fspl_reference_values() {
        assert!(close(fspl(1000.0, 2400.0).unwrap(), 100.05, 0.01));
        assert!(close(fspl(100.0, 751.0).unwrap(), 69.96, 0.01));
        let step = fspl(2000.0, 900.0).unwrap() - fspl(1000.0, 900.0).unwrap();
        assert!(close(step, 20.0 * 2f64.log10(), 1e-12));
        assert!(fspl(0.0, 900.0).is_err());
        assert!(fspl(10.0, -1.0).is_err());
    }

    #[test]
    fn cost231_reference_values() {
        let sub = cost231_hata(1.0, 2000.0, 50.0, 1.5, Cost231Environment::Suburban).unwrap();
        assert!(close(sub, 134.68, 0.01));
        let far = cost231_hata(2.0, 2000.0, 50.0, 1.5, Cost231Environment::Suburban).unwrap();
        assert!(close(far, 144.84, 0.01));
        assert!(close(
            far - sub,
            (44.9 - 6.55 * 50f64.log10()) * 2f64.log10(),
            1e-9
        ));
        let metro = cost231_hata(1.0, 2000.0, 50.0, 1.5, Cost231Environment::Metropolitan).unwrap();
        assert_eq!(metro - sub, 3.0);
        assert!(cost231_hata(1.0, 2000.0, 0.0, 1.5, Cost231Environment::Suburban).is_err());
    }

    #[test]
    fn cost231_domain_is_flagged_not_rejected() {
        assert!(cost231_domain_warnings(1.0, 1800.0, 50.0, 1.5).is_empty());
        let w = cost231_domain_warnings(1.0, 731.5, 50.0, 1.5);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].parameter, "frequency_mhz");
        assert!(cost231_hata(1.0, 731.5, 50.0, 1.5, Cost231Environment::Suburban).is_ok());
    }

    #[test]
    fn rural_maps_to_suburban() {
        let env: Cost231Environment = "rural".parse().unwrap();
        assert_eq!(env, Cost231Environment::Suburban);
        let json: Cost231Environment = serde_json::from_str("\"rural\"").unwrap();
        assert_eq!(json, Cost231Environment::Suburban);
    }

    #[test]
    fn sui_reference_values() {
        let c = sui(1000.0, 2000.0, 50.0, 2.0, SuiTerrain::C).unwrap();
        assert!(close(c, 115.97, 0.05));
        assert!(close(SuiTerrain::C.path_loss_exponent(50.0), 3.75, 1e-12));
        let a = sui(500.0, 1900.0, 30.0, 1.5, SuiTerrain::A).unwrap();
        assert!(close(a, 112.75, 0.05));
        let intercept = 20.0 * (4.0 * std::f64::consts::PI * 100.0 / wavelength(2000.0)).log10();
        for t in [SuiTerrain::A, SuiTerrain::B, SuiTerrain::C] {
            for hb in [15.0, 50.0] {
                assert!(close(
                    sui(100.0, 2000.0, hb, 2.0, t).unwrap(),
                    intercept,
                    1e-12
                ));
            }
        }
    }

    #[test]
    fn sui_rejects_below_reference_distance() {
        assert!(matches!(
            sui(99.0, 2000.0, 30.0, 2.0, SuiTerrain::B),
            Err(PropagationError::BelowReferenceDistance { .. })
        ));
    }

    #[test]
    fn fresnel_reference_values() {
        assert!(close(
            fresnel_radius(500.0, 500.0, 1500.0).unwrap(),
            7.069,
            0.005
        ));
        assert_eq!(
            fresnel_radius(120.0, 880.0, 731.5).unwrap(),
            fresnel_radius(880.0, 120.0, 731.5).unwrap()
        );
        let near = fresnel_radius(1e-3, 1000.0, 1500.0).unwrap();
        let nearer = fresnel_radius(1e-6, 1000.0, 1500.0).unwrap();
        assert!(nearer < near && near < 0.02);
        assert!(fresnel_radius(0.0, 1.0, 1500.0).is_err());
    }

    fn block_stack() -> TerrainStack {
        // 1100 m x 100 m strip, 10 m cells, clutter block 40 m tall covering
        // x in [450, 550].
        let dsm = Raster::from_fn(110, 10, -50.0, -50.0, 10.0, |x, _| {
            if (450.0..=550.0).contains(&x) {
                40.0
            } else {
                0.0
            }
        })
        .unwrap();
        let dhm = dsm.clone();
        TerrainStack::new(dsm, dhm).unwrap().0
    }

    fn tower(height: f64) -> TxSite {
        TxSite {
            site_id: "t".into(),
            x: 0.0,
            y: 0.0,
            tower_height: height,
            freqs: vec![1500.0],
        }
    }

    #[test]
    fn blockage_flat_is_zero() {
        let dsm = Raster::from_fn(110, 10, -50.0, -50.0, 10.0, |_, _| 0.0).unwrap();
        let (stack, _) = TerrainStack::new(dsm.clone(), dsm).unwrap();
        let b = blockage_distance(
            &stack,
            &tower(50.0),
            Point::new(1000.0, 0.0),
            10.0,
            1500.0,
            10.0,
        )
        .unwrap();
        assert_eq!(b, 0.0);
    }

    #[test]
    fn blockage_single_block() {
        let stack = block_stack();
        let b = blockage_distance(
            &stack,
            &tower(50.0),
            Point::new(1000.0, 0.0),
            10.0,
            1500.0,
            10.0,
        )
        .unwrap();
        assert!(close(b, 100.0, 20.0), "blockage {b}");
    }

    #[test]
    fn blockage_fully_buried_link_counts_every_interior_sample() {
        let dsm = Raster::from_fn(30, 4, 0.0, 0.0, 10.0, |_, _| 100.0).unwrap();
        let dhm = Raster::from_fn(30, 4, 0.0, 0.0, 10.0, |_, _| 100.0).unwrap();
        let (stack, _) = TerrainStack::new(dsm, dhm).unwrap();
        let tx = TxSite {
            x: 5.0,
            y: 20.0,
            ..tower(10.0)
        };
        let b = blockage_distance(&stack, &tx, Point::new(255.0, 20.0), 1.5, 900.0, 10.0).unwrap();
        // 250 m path, interior samples at 10..240.
        assert_eq!(b, 240.0);
    }

    #[test]
    fn model_dispatch() {
        let link = LinkGeometry {
            tx_antenna_asl: 230.0,
            rx_antenna_asl: 202.0,
            tx_height: 50.0,
            rx_height: 2.0,
            distance_2d: 1000.0,
            freq: 2000.0,
        };
        let f = model_pathloss(&PropagationModel::Fspl, &link).unwrap();
        assert_eq!(f.loss_db, fspl(link.slant_distance(), 2000.0).unwrap());
        let s: PropagationModel = "sui:C".parse().unwrap();
        let out = model_pathloss(&s, &link).unwrap();
        assert!(close(out.loss_db, 115.97, 0.05));
        assert!(out.warnings.is_empty());
        let err = "ehata".parse::<PropagationModel>().unwrap_err();
        assert!(err.to_string().contains("PathlossModel"), "{err}");
        let c: PropagationModel = "cost231:metropolitan".parse().unwrap();
        assert_eq!(c.to_string(), "cost231:metropolitan");
    }

    #[test]
    fn model_json_shape() {
        let m: PropagationModel = serde_json::from_str(r#"{"model":"sui","terrain":"A"}"#).unwrap();
        assert_eq!(
            m,
            PropagationModel::Sui {
                terrain: SuiTerrain::A,
                shadowing: Shadowing::None
            }
        );
        let c: PropagationModel = serde_json::from_str(r#"{"model":"cost231"}"#).unwrap();
        assert_eq!(
            c,
            PropagationModel::Cost231 {
                environment: Cost231Environment::Suburban
            }
        );
        assert!(serde_json::from_str::<PropagationModel>(r#"{"model":"ehata"}"#).is_err());
    }

    #[test]
    fn shadowing_is_keyed_and_reproducible() {
        let model = PropagationModel::Sui {
            terrain: SuiTerrain::B,
            shadowing: Shadowing::LogNormal {
                sigma_db: 8.0,
                seed: 3,
            },
        };
        let mut link = LinkGeometry {
            tx_antenna_asl: 230.0,
            rx_antenna_asl: 202.0,
            tx_height: 30.0,
            rx_height: 2.0,
            distance_2d: 800.0,
            freq: 1900.0,
        };
        let a = model.pathloss(&link).unwrap().loss_db;
        assert_eq!(a, model.pathloss(&link).unwrap().loss_db);
        let base = sui(800.0, 1900.0, 30.0, 2.0, SuiTerrain::B).unwrap();
        assert_ne!(a, base);
        link.distance_2d = 801.0;
        assert_ne!(model.pathloss(&link).unwrap().loss_db - a, 0.0);
    }

    proptest! {
        #[test]
        fn losses_increase_with_distance(
            d in 100.0f64..20_000.0,
            extra in 1.0f64..5_000.0,
            f in 500.0f64..6000.0,
            hb in 30.0f64..80.0,
            hm in 1.0f64..10.0,
        ) {
            prop_assert!(fspl(d + extra, f).unwrap() > fspl(d, f).unwrap());
            let env = Cost231Environment::Suburban;
            prop_assert!(
                cost231_hata((d + extra) / 1000.0, f, hb, hm, env).unwrap()
                    > cost231_hata(d / 1000.0, f, hb, hm, env).unwrap()
            );
            for t in [SuiTerrain::A, SuiTerrain::B, SuiTerrain::C] {
                prop_assert!(sui(d + extra, f, hb, hm, t).unwrap() > sui(d, f, hb, hm, t).unwrap());
            }
        }

        #[test]
        fn frequency_monotonicity(d in 100.0f64..20_000.0, f in 500.0f64..6000.0, df in 1.0f64..1000.0) {
            prop_assert!(fspl(d, f + df).unwrap() > fspl(d, f).unwrap());
            let xf = |f: f64| 6.0 * (f / 2000.0).log10();
            prop_assert!(xf(f + df) > xf(f));
        }

        #[test]
        fn cost231_decreases_with_base_height(
            d in 1.001f64..20.0,
            f in 1500.0f64..2000.0,
            hb in 30.0f64..199.0,
            dh in 0.5f64..50.0,
            hm in 1.0f64..10.0,
        ) {
            let hb2 = (hb + dh).min(200.0);
            prop_assume!(hb2 > hb);
            let env = Cost231Environment::Metropolitan;
            prop_assert!(
                cost231_hata(d, f, hb2, hm, env).unwrap() < cost231_hata(d, f, hb, hm, env).unwrap()
            );
        }
    }
}
