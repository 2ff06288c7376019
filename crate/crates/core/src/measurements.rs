//! RSRP measurement ingest and conversion to pathloss.
//!
//! Received power relates to pathloss through a per-site offset,
//! `rsrp = -pathloss + delta`, where `delta` lumps transmit power, antenna
//! gain and cable losses. The offset is estimated by pairing measurements
//! with simulated pathloss at the same place and frequency and averaging
//! `rsrp + pathloss_sim`; measured pathloss is then `delta - rsrp`.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::terrain::Point;

/// Plausible RSRP range in dBm; rows outside are rejected at ingest.
pub const RSRP_RANGE: (f64, f64) = (-160.0, -30.0);

/// Frequencies closer than this (MHz) are treated as the same carrier.
pub const FREQ_MATCH_TOLERANCE: f64 = 0.1;

pub const MEASUREMENT_HEADER: [&str; 7] = [
    "x", "y", "rsrp_dbm", "earfcn", "freq_mhz", "cell_id", "site_id",
];

#[derive(Debug, Error)]
pub enum MeasurementError {
    #[error("row {row}: {message}")]
    Row { row: u64, message: String },
    #[error("measurement CSV header must be `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("EARFCN {earfcn} is outside every supported downlink band ({supported})")]
    UnsupportedEarfcn { earfcn: u32, supported: String },
    #[error("measurement has neither an EARFCN nor a frequency")]
    MissingFrequency,
    #[error("no measurement matched a simulated point")]
    NoMatches,
    #[error("cannot estimate an offset from zero samples")]
    EmptyInput,
    #[error("offset for site `{offset}` applied to a measurement from site `{measurement}`")]
    SiteMismatch { offset: String, measurement: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MeasurementError>;

/// One LTE downlink band of the channel raster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LteBand {
    pub band: u16,
    /// Lowest downlink frequency in MHz.
    pub f_dl_low: f64,
    /// First downlink EARFCN of the band.
    pub n_offs_dl: u32,
    /// Last downlink EARFCN of the band.
    pub n_dl_max: u32,
}

pub const LTE_BANDS: &[LteBand] = &[
    LteBand {
        band: 2,
        f_dl_low: 1930.0,
        n_offs_dl: 600,
        n_dl_max: 1199,
    },
    LteBand {
        band: 4,
        f_dl_low: 2110.0,
        n_offs_dl: 1950,
        n_dl_max: 2399,
    },
    LteBand {
        band: 5,
        f_dl_low: 869.0,
        n_offs_dl: 2400,
        n_dl_max: 2649,
    },
    LteBand {
        band: 12,
        f_dl_low: 729.0,
        n_offs_dl: 5010,
        n_dl_max: 5179,
    },
    LteBand {
        band: 13,
        f_dl_low: 746.0,
        n_offs_dl: 5180,
        n_dl_max: 5279,
    },
    LteBand {
        band: 17,
        f_dl_low: 734.0,
        n_offs_dl: 5730,
        n_dl_max: 5849,
    },
    LteBand {
        band: 25,
        f_dl_low: 1930.0,
        n_offs_dl: 8040,
        n_dl_max: 8689,
    },
    LteBand {
        band: 26,
        f_dl_low: 859.0,
        n_offs_dl: 8690,
        n_dl_max: 9039,
    },
    LteBand {
        band: 30,
        f_dl_low: 2350.0,
        n_offs_dl: 9770,
        n_dl_max: 9869,
    },
    LteBand {
        band: 41,
        f_dl_low: 2496.0,
        n_offs_dl: 39650,
        n_dl_max: 41589,
    },
    LteBand {
        band: 66,
        f_dl_low: 2110.0,
        n_offs_dl: 66436,
        n_dl_max: 67335,
    },
];

/// Downlink center frequency in MHz for an EARFCN.
pub fn earfcn_to_freq(earfcn: u32) -> Result<f64> {
    let band = LTE_BANDS
        .iter()
        .find(|b| (b.n_offs_dl..=b.n_dl_max).contains(&earfcn))
        .ok_or_else(|| MeasurementError::UnsupportedEarfcn {
            earfcn,
            supported: LTE_BANDS
                .iter()
                .map(|b| format!("band {}: {}-{}", b.band, b.n_offs_dl, b.n_dl_max))
                .collect::<Vec<_>>()
                .join(", "),
        })?;
    // Work in 100 kHz units so decimal frequencies come out exact.
    let tenths = (band.f_dl_low * 10.0).round() + f64::from(earfcn - band.n_offs_dl);
    Ok(tenths / 10.0)
}

/// First EARFCN in the band table whose downlink center is `freq_mhz`.
pub fn freq_to_earfcn(freq_mhz: f64) -> Option<u32> {
    let tenths = (freq_mhz * 10.0).round();
    if (tenths - freq_mhz * 10.0).abs() > 1e-6 {
        return None;
    }
    LTE_BANDS.iter().find_map(|b| {
        let n = tenths - (b.f_dl_low * 10.0).round() + f64::from(b.n_offs_dl);
        (n >= f64::from(b.n_offs_dl) && n <= f64::from(b.n_dl_max)).then_some(n as u32)
    })
}

/// One row of a drive-test log.
#[derive(Debug, Clone, PartialEq)]
pub struct RsrpMeasurement {
    pub x: f64,
    pub y: f64,
    /// dBm.
    pub rsrp: f64,
    pub earfcn: Option<u32>,
    /// MHz.
    pub freq: Option<f64>,
    pub cell_id: Option<String>,
    pub site_id: String,
}

impl RsrpMeasurement {
    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }

    /// Carrier frequency in MHz; the explicit frequency wins over the EARFCN.
    pub fn frequency(&self) -> Result<f64> {
        match (self.freq, self.earfcn) {
            (Some(f), _) => Ok(f),
            (None, Some(n)) => earfcn_to_freq(n),
            (None, None) => Err(MeasurementError::MissingFrequency),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MeasurementRecord {
    x: f64,
    y: f64,
    rsrp_dbm: f64,
    earfcn: Option<u32>,
    freq_mhz: Option<f64>,
    cell_id: Option<String>,
    site_id: String,
}

fn row_error(row: u64, message: impl Into<String>) -> MeasurementError {
    MeasurementError::Row {
        row,
        message: message.into(),
    }
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    if found.iter().ne(expected.iter().copied()) {
        return Err(MeasurementError::Header {
            expected: expected.join(","),
            found: found.iter().collect::<Vec<_>>().join(","),
        });
    }
    Ok(())
}

/// Reads a measurement CSV. Row numbers in errors count the header as row 1.
pub fn read_measurements<R: Read>(reader: R) -> Result<Vec<RsrpMeasurement>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    check_header(rdr.headers()?, &MEASUREMENT_HEADER)?;

    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<MeasurementRecord>().enumerate() {
        let row = i as u64 + 2;
        let rec = rec.map_err(|e| row_error(row, e.to_string()))?;
        if !rec.x.is_finite() || !rec.y.is_finite() {
            return Err(row_error(row, "non-finite coordinates"));
        }
        if !(RSRP_RANGE.0..=RSRP_RANGE.1).contains(&rec.rsrp_dbm) {
            return Err(row_error(
                row,
                format!(
                    "rsrp {} dBm outside [{}, {}]",
                    rec.rsrp_dbm, RSRP_RANGE.0, RSRP_RANGE.1
                ),
            ));
        }
        if rec.earfcn.is_none() && rec.freq_mhz.is_none() {
            return Err(row_error(row, "one of earfcn or freq_mhz is required"));
        }
        if let Some(f) = rec.freq_mhz {
            if !(f > 0.0 && f.is_finite()) {
                return Err(row_error(row, format!("invalid frequency {f}")));
            }
        }
        if let Some(n) = rec.earfcn {
            earfcn_to_freq(n).map_err(|e| row_error(row, e.to_string()))?;
        }
        if rec.site_id.is_empty() {
            return Err(row_error(row, "empty site_id"));
        }
        out.push(RsrpMeasurement {
            x: rec.x,
            y: rec.y,
            rsrp: rec.rsrp_dbm,
            earfcn: rec.earfcn,
            freq: rec.freq_mhz,
            cell_id: rec.cell_id.filter(|c| !c.is_empty()),
            site_id: rec.site_id,
        });
    }
    Ok(out)
}

pub fn write_measurements<W: Write>(writer: W, rows: &[RsrpMeasurement]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for m in rows {
        w.serialize(MeasurementRecord {
            x: m.x,
            y: m.y,
            rsrp_dbm: m.rsrp,
            earfcn: m.earfcn,
            freq_mhz: m.freq,
            cell_id: m.cell_id.clone(),
            site_id: m.site_id.clone(),
        })?;
    }
    if rows.is_empty() {
        w.write_record(MEASUREMENT_HEADER)?;
    }
    w.flush()?;
    Ok(())
}

/// A simulated pathloss value at a location and carrier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimPoint {
    pub x: f64,
    pub y: f64,
    #[serde(rename = "freq_mhz")]
    pub freq: f64,
    #[serde(rename = "pathloss_db")]
    pub pathloss: f64,
}

/// A measurement paired with its nearest simulated point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    /// Index into the measurement slice.
    pub measurement: usize,
    pub sim_pathloss: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
    /// Measurements with no same-frequency point within the distance limit.
    pub dropped: usize,
}

/// Grid-bucketed index of simulated points of one frequency.
struct FreqIndex {
    freq: f64,
    bucket: f64,
    cells: HashMap<(i64, i64), Vec<SimPoint>>,
}

impl FreqIndex {
    fn key(&self, x: f64, y: f64) -> (i64, i64) {
        (
            (x / self.bucket).floor() as i64,
            (y / self.bucket).floor() as i64,
        )
    }

    /// Nearest point within `max_dist`, ties broken by lower x, then y.
    fn nearest(&self, p: Point, max_dist: f64) -> Option<(f64, SimPoint)> {
        let (kx, ky) = self.key(p.x, p.y);
        let mut best: Option<(f64, SimPoint)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                let Some(cands) = self.cells.get(&(kx + dx, ky + dy)) else {
                    continue;
                };
                for s in cands {
                    let d2 = (s.x - p.x).powi(2) + (s.y - p.y).powi(2);
                    best = match best {
                        Some((bd, b)) if sim_order(d2, s, bd, &b).is_ge() => Some((bd, b)),
                        _ => Some((d2, *s)),
                    };
                }
            }
        }
        best.filter(|(d2, _)| d2.sqrt() <= max_dist)
            .map(|(d2, s)| (d2.sqrt(), s))
    }
}

fn sim_order(d2: f64, s: &SimPoint, bd2: f64, b: &SimPoint) -> std::cmp::Ordering {
    d2.total_cmp(&bd2)
        .then(s.x.total_cmp(&b.x))
        .then(s.y.total_cmp(&b.y))
        .then(s.freq.total_cmp(&b.freq))
        .then(s.pathloss.total_cmp(&b.pathloss))
}

/// Pairs each measurement with the nearest simulated point of the same
/// carrier within `max_dist` meters.
pub fn match_to_simulation(
    measurements: &[RsrpMeasurement],
    sim_points: &[SimPoint],
    max_dist: f64,
) -> Result<MatchResult> {
    if measurements.is_empty() || sim_points.is_empty() {
        return Err(MeasurementError::EmptyInput);
    }
    if !(max_dist > 0.0 && max_dist.is_finite()) {
        return Err(MeasurementError::InvalidArgument(format!(
            "max_dist must be positive and finite, got {max_dist}"
        )));
    }

    let mut by_freq: BTreeMap<u64, Vec<SimPoint>> = BTreeMap::new();
    for s in sim_points {
        by_freq.entry(s.freq.to_bits()).or_default().push(*s);
    }
    let indices: Vec<FreqIndex> = by_freq
        .into_values()
        .map(|pts| {
            let mut idx = FreqIndex {
                freq: pts[0].freq,
                bucket: max_dist,
                cells: HashMap::new(),
            };
            for s in pts {
                let k = idx.key(s.x, s.y);
                idx.cells.entry(k).or_default().push(s);
            }
            idx
        })
        .collect();

    let mut pairs = Vec::new();
    let mut dropped = 0;
    for (i, m) in measurements.iter().enumerate() {
        let f = m.frequency()?;
        let best = indices
            .iter()
            .filter(|idx| (idx.freq - f).abs() <= FREQ_MATCH_TOLERANCE + 1e-9)
            .filter_map(|idx| idx.nearest(m.position(), max_dist))
            .min_by(|(da, a), (db, b)| sim_order(da * da, a, db * db, b));
        match best {
            Some((distance, s)) => pairs.push(MatchedPair {
                measurement: i,
                sim_pathloss: s.pathloss,
                distance,
            }),
            None => dropped += 1,
        }
    }
    if pairs.is_empty() {
        return Err(MeasurementError::NoMatches);
    }
    Ok(MatchResult { pairs, dropped })
}

/// Estimated offset for one site (or one cell of a site).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteOffset {
    pub site_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_id: Option<String>,
    #[serde(rename = "delta_db")]
    pub delta: f64,
    pub n_samples: usize,
    #[serde(rename = "residual_std_db")]
    pub residual_std: f64,
}

/// Averages `rsrp + sim_pathloss` over `(rsrp, sim_pathloss)` pairs.
pub fn estimate_offset(
    site_id: &str,
    cell_id: Option<&str>,
    pairs: &[(f64, f64)],
) -> Result<SiteOffset> {
    if pairs.is_empty() {
        return Err(MeasurementError::EmptyInput);
    }
    let n = pairs.len();
    let deltas: Vec<f64> = pairs.iter().map(|(rsrp, pl)| rsrp + pl).collect();
    let delta = deltas.iter().sum::<f64>() / n as f64;
    let residual_std = if n > 1 {
        (deltas.iter().map(|d| (d - delta).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(SiteOffset {
        site_id: site_id.to_string(),
        cell_id: cell_id.map(str::to_string),
        delta,
        n_samples: n,
        residual_std,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetGrouping {
    /// One offset per site, averaged over all its cells and carriers.
    PerSite,
    /// One offset per (site, cell) when the cell id is known.
    #[default]
    PerCell,
}

type OffsetKey = (String, Option<String>);

fn offset_key(m: &RsrpMeasurement, grouping: OffsetGrouping) -> OffsetKey {
    match grouping {
        OffsetGrouping::PerSite => (m.site_id.clone(), None),
        OffsetGrouping::PerCell => (m.site_id.clone(), m.cell_id.clone()),
    }
}

/// Estimates one offset per group from matched pairs, sorted by key.
pub fn estimate_offsets(
    measurements: &[RsrpMeasurement],
    matches: &MatchResult,
    grouping: OffsetGrouping,
) -> Result<Vec<SiteOffset>> {
    let mut groups: BTreeMap<OffsetKey, Vec<(f64, f64)>> = BTreeMap::new();
    for p in &matches.pairs {
        let m = &measurements[p.measurement];
        groups
            .entry(offset_key(m, grouping))
            .or_default()
            .push((m.rsrp, p.sim_pathloss));
    }
    groups
        .iter()
        .map(|((site, cell), pairs)| estimate_offset(site, cell.as_deref(), pairs))
        .collect()
}

/// Pathloss in dB implied by a measurement and its site offset.
pub fn rsrp_to_pathloss(m: &RsrpMeasurement, offset: &SiteOffset) -> Result<f64> {
    let cell_ok = offset.cell_id.is_none() || offset.cell_id == m.cell_id;
    if offset.site_id != m.site_id || !cell_ok {
        let describe = |site: &str, cell: &Option<String>| match cell {
            Some(c) => format!("{site}/{c}"),
            None => site.to_string(),
        };
        return Err(MeasurementError::SiteMismatch {
            offset: describe(&offset.site_id, &offset.cell_id),
            measurement: describe(&m.site_id, &m.cell_id),
        });
    }
    Ok(offset.delta - m.rsrp)
}

/// A measurement turned into a pathloss sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvertedMeasurement {
    /// Index into the measurement slice.
    pub measurement: usize,
    pub freq: f64,
    pub pathloss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversion {
    pub offsets: Vec<SiteOffset>,
    pub rows: Vec<ConvertedMeasurement>,
    /// Measurements that found no simulated partner.
    pub unmatched: usize,
    /// Measurements whose group received no offset.
    pub without_offset: usize,
}

/// Matches, estimates offsets and converts every measurement whose group has
/// an offset.
pub fn convert_measurements(
    measurements: &[RsrpMeasurement],
    sim_points: &[SimPoint],
    max_dist: f64,
    grouping: OffsetGrouping,
) -> Result<Conversion> {
    let matches = match_to_simulation(measurements, sim_points, max_dist)?;
    let offsets = estimate_offsets(measurements, &matches, grouping)?;
    let lookup: BTreeMap<OffsetKey, &SiteOffset> = offsets
        .iter()
        .map(|o| ((o.site_id.clone(), o.cell_id.clone()), o))
        .collect();

    let mut rows = Vec::with_capacity(measurements.len());
    let mut without_offset = 0;
    for (i, m) in measurements.iter().enumerate() {
        match lookup.get(&offset_key(m, grouping)) {
            Some(o) => rows.push(ConvertedMeasurement {
                measurement: i,
                freq: m.frequency()?,
                pathloss: rsrp_to_pathloss(m, o)?,
            }),
            None => without_offset += 1,
        }
    }
    Ok(Conversion {
        offsets,
        rows,
        unmatched: matches.dropped,
        without_offset,
    })
}

pub fn offsets_to_json(offsets: &[SiteOffset]) -> Result<String> {
    Ok(serde_json::to_string_pretty(offsets)?)
}

pub fn offsets_from_json(text: &str) -> Result<Vec<SiteOffset>> {
    Ok(serde_json::from_str(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn meas(x: f64, y: f64, rsrp: f64, freq: f64) -> RsrpMeasurement {
        RsrpMeasurement {
            x,
            y,
            rsrp,
            earfcn: None,
            freq: Some(freq),
            cell_id: None,
            site_id: "s1".into(),
        }
    }

    fn sp(x: f64, y: f64, freq: f64, pathloss: f64) -> SimPoint {
        SimPoint {
            x,
            y,
            freq,
            pathloss,
        }
    }

    #[test]
    fn earfcn_examples() {
        assert_eq!(earfcn_to_freq(5035).unwrap(), 731.5);
        assert_eq!(earfcn_to_freq(5230).unwrap(), 751.0);
        assert_eq!(earfcn_to_freq(600).unwrap(), 1930.0);
        assert_eq!(earfcn_to_freq(40072).unwrap(), 2538.2);
        let err = earfcn_to_freq(3).unwrap_err().to_string();
        assert!(err.contains("band 12: 5010-5179"), "{err}");
    }

    #[test]
    fn earfcn_inverse() {
        assert_eq!(freq_to_earfcn(731.5), Some(5035));
        assert_eq!(freq_to_earfcn(2538.2), Some(40072));
        assert_eq!(freq_to_earfcn(1935.0), Some(650));
        assert_eq!(freq_to_earfcn(100.0), None);
        assert_eq!(freq_to_earfcn(731.55), None);
        for f in [731.5, 1935.0, 2538.2, 751.0] {
            assert_eq!(earfcn_to_freq(freq_to_earfcn(f).unwrap()).unwrap(), f);
        }
    }

    #[test]
    fn earfcn_matches_channel_raster_formula() {
        for b in LTE_BANDS {
            for n in [b.n_offs_dl, (b.n_offs_dl + b.n_dl_max) / 2, b.n_dl_max] {
                let f = earfcn_to_freq(n).unwrap();
                let expected = b.f_dl_low + 0.1 * f64::from(n - b.n_offs_dl);
                assert!((f - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn matching_rules() {
        let ms = vec![
            meas(10.0, 10.0, -90.0, 731.5),
            meas(500.0, 500.0, -90.0, 731.5),
        ];
        let sims = vec![sp(10.0, 10.0, 731.5, 120.0), sp(10.0, 10.0, 1935.0, 130.0)];
        let r = match_to_simulation(&ms, &sims, 10.0).unwrap();
        assert_eq!(r.dropped, 1);
        assert_eq!(r.pairs.len(), 1);
        assert_eq!(r.pairs[0].sim_pathloss, 120.0);
        assert_eq!(r.pairs[0].distance, 0.0);
    }

    #[test]
    fn frequency_tolerance() {
        let ms = vec![meas(0.0, 0.0, -90.0, 731.55)];
        let r = match_to_simulation(&ms, &[sp(1.0, 0.0, 731.5, 100.0)], 5.0).unwrap();
        assert_eq!(r.pairs.len(), 1);
        assert!(matches!(
            match_to_simulation(&ms, &[sp(1.0, 0.0, 731.3, 100.0)], 5.0),
            Err(MeasurementError::NoMatches)
        ));
    }

    #[test]
    fn equidistant_tie_prefers_lower_x_then_y() {
        let ms = vec![meas(0.0, 0.0, -90.0, 900.0)];
        let sims = vec![
            sp(3.0, 0.0, 900.0, 1.0),
            sp(0.0, 3.0, 900.0, 2.0),
            sp(0.0, -3.0, 900.0, 3.0),
            sp(-3.0, 0.0, 900.0, 4.0),
        ];
        let r = match_to_simulation(&ms, &sims, 5.0).unwrap();
        assert_eq!(r.pairs[0].sim_pathloss, 4.0);
        let r = match_to_simulation(&ms, &sims[..3], 5.0).unwrap();
        assert_eq!(r.pairs[0].sim_pathloss, 3.0);
    }

    #[test]
    fn offset_examples() {
        let o = estimate_offset("s", None, &[(-100.0, 130.0)]).unwrap();
        assert_eq!((o.delta, o.n_samples, o.residual_std), (30.0, 1, 0.0));
        let o = estimate_offset(
            "s",
            None,
            &[(-100.0, 130.0), (-100.0, 132.0), (-100.0, 128.0)],
        )
        .unwrap();
        assert!((o.delta - 30.0).abs() < 1e-12);
        assert!((o.residual_std - 2.0).abs() < 1e-12);
        assert!(matches!(
            estimate_offset("s", None, &[]),
            Err(MeasurementError::EmptyInput)
        ));
    }

    #[test]
    fn conversion_examples() {
        let o = estimate_offset("s1", None, &[(-100.0, 130.0)]).unwrap();
        assert_eq!(
            rsrp_to_pathloss(&meas(0.0, 0.0, -100.0, 900.0), &o).unwrap(),
            130.0
        );
        assert_eq!(
            rsrp_to_pathloss(&meas(0.0, 0.0, -30.0, 900.0), &o).unwrap(),
            60.0
        );
        let mut other = meas(0.0, 0.0, -30.0, 900.0);
        other.site_id = "s2".into();
        assert!(matches!(
            rsrp_to_pathloss(&other, &o),
            Err(MeasurementError::SiteMismatch { .. })
        ));
        let cell_offset = SiteOffset {
            cell_id: Some("c9".into()),
            ..o
        };
        assert!(rsrp_to_pathloss(&meas(0.0, 0.0, -30.0, 900.0), &cell_offset).is_err());
    }

    #[test]
    fn noiseless_offset_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let delta_true = 27.25;
        let sims: Vec<SimPoint> = (0..200)
            .map(|i| sp(i as f64 * 10.0, 0.0, 1935.0, rng.random_range(80.0..150.0)))
            .collect();
        let ms: Vec<RsrpMeasurement> = sims
            .iter()
            .map(|s| meas(s.x, s.y, -s.pathloss + delta_true, s.freq))
            .collect();
        let conv = convert_measurements(&ms, &sims, 5.0, OffsetGrouping::PerSite).unwrap();
        assert_eq!(conv.offsets.len(), 1);
        assert!((conv.offsets[0].delta - delta_true).abs() <= 1e-9);
        for (row, s) in conv.rows.iter().zip(&sims) {
            assert!((row.pathloss - s.pathloss).abs() < 1e-9);
        }
    }

    #[test]
    fn noisy_offset_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let noise = Normal::new(0.0, 2.0).unwrap();
        let delta_true = 15.0;
        let pairs: Vec<(f64, f64)> = (0..1000)
            .map(|_| {
                let pl = rng.random_range(90.0..140.0);
                (-pl + delta_true + noise.sample(&mut rng), pl)
            })
            .collect();
        let o = estimate_offset("s", None, &pairs).unwrap();
        assert!((o.delta - delta_true).abs() <= 0.25, "delta {}", o.delta);
        assert!((o.residual_std - 2.0).abs() < 0.2);
    }

    #[test]
    fn per_cell_grouping() {
        let mut a = meas(0.0, 0.0, -80.0, 900.0);
        a.cell_id = Some("c1".into());
        let mut b = meas(10.0, 0.0, -70.0, 900.0);
        b.cell_id = Some("c2".into());
        let ms = vec![a, b];
        let sims = vec![sp(0.0, 0.0, 900.0, 100.0), sp(10.0, 0.0, 900.0, 100.0)];
        let cells = convert_measurements(&ms, &sims, 1.0, OffsetGrouping::PerCell).unwrap();
        assert_eq!(cells.offsets.len(), 2);
        assert_eq!(cells.rows[0].pathloss, 100.0);
        assert_eq!(cells.rows[1].pathloss, 100.0);
        let site = convert_measurements(&ms, &sims, 1.0, OffsetGrouping::PerSite).unwrap();
        assert_eq!(site.offsets.len(), 1);
        assert_eq!(site.offsets[0].delta, 25.0);
    }

    #[test]
    fn csv_ingest() {
        let text = "x,y,rsrp_dbm,earfcn,freq_mhz,cell_id,site_id\n\
                    1.5,2,-95,5035,,c1,acre\n\
                    3,4,-101.25,,1935,,acre\n";
        let ms = read_measurements(text.as_bytes()).unwrap();
        assert_eq!(ms.len(), 2);
        assert_eq!(ms[0].frequency().unwrap(), 731.5);
        assert_eq!(ms[0].cell_id.as_deref(), Some("c1"));
        assert_eq!(ms[1].cell_id, None);
        assert_eq!(ms[1].frequency().unwrap(), 1935.0);

        let mut buf = Vec::new();
        write_measurements(&mut buf, &ms).unwrap();
        assert_eq!(read_measurements(buf.as_slice()).unwrap(), ms);
    }

    #[test]
    fn csv_rejections_name_the_row() {
        let header = "x,y,rsrp_dbm,earfcn,freq_mhz,cell_id,site_id\n";
        let cases = [
            format!("{header}1,2,-95,5035,,c1,a\n1,2,-10,5035,,c1,a\n"),
            format!("{header}1,2,-95,5035,,c1,a\n1,2,-95,,,c1,a\n"),
            format!("{header}1,2,-95,5035,,c1,a\n1,2,-95,7,,c1,a\n"),
            format!("{header}1,2,-95,5035,,c1,a\n1,two,-95,5035,,c1,a\n"),
        ];
        for text in &cases {
            match read_measurements(text.as_bytes()).unwrap_err() {
                MeasurementError::Row { row, .. } => assert_eq!(row, 3, "{text}"),
                e => panic!("unexpected {e}"),
            }
        }
        let bad_header = "x,y,rsrp,earfcn,freq_mhz,cell_id,site_id\n";
        assert!(matches!(
            read_measurements(bad_header.as_bytes()),
            Err(MeasurementError::Header { .. })
        ));
    }

    #[test]
    fn offsets_json_shape() {
        let o = estimate_offset("acre", Some("c1"), &[(-100.0, 130.0)]).unwrap();
        let json = offsets_to_json(std::slice::from_ref(&o)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let keys: Vec<&str> = v[0]
            .as_object()
            .unwrap()
            .keys()
            .map(String::as_str)
            .collect();
        assert_eq!(keys.len(), 5);
        for k in [
            "site_id",
            "cell_id",
            "delta_db",
            "n_samples",
            "residual_std_db",
        ] {
            assert!(keys.contains(&k));
        }
        assert_eq!(offsets_from_json(&json).unwrap(), vec![o]);
    }

    proptest! {
        #[test]
        fn shifting_rsrp_shifts_delta(
            pairs in proptest::collection::vec((-140.0f64..-50.0, 60.0f64..160.0), 1..50),
            c in -10.0f64..10.0,
        ) {
            let base = estimate_offset("s", None, &pairs).unwrap();
            let shifted: Vec<(f64, f64)> = pairs.iter().map(|(r, p)| (r + c, *p)).collect();
            let moved = estimate_offset("s", None, &shifted).unwrap();
            prop_assert!((moved.delta - base.delta - c).abs() < 1e-9);
        }

        #[test]
        fn conversion_inverts_the_link_equation(pl in 40.0f64..190.0, delta in -20.0f64..40.0) {
            let m = meas(0.0, 0.0, -pl + delta, 900.0);
            let o = SiteOffset { site_id: "s1".into(), cell_id: None, delta, n_samples: 1, residual_std: 0.0 };
            let back = rsrp_to_pathloss(&m, &o).unwrap();
            prop_assert!((back - pl).abs() < 1e-9);
            prop_assert!((back + m.rsrp - delta).abs() < 1e-12);
        }

        #[test]
        fn matching_is_permutation_invariant(
            pts in proptest::collection::vec((0i32..20, 0i32..20, 0usize..2, 80.0f64..120.0), 1..60),
            probes in proptest::collection::vec((0.0f64..20.0, 0.0f64..20.0), 1..20),
            rot in 0usize..60,
        ) {
            let freqs = [731.5, 1935.0];
            let sims: Vec<SimPoint> = pts.iter()
                .map(|&(x, y, f, pl)| sp(f64::from(x), f64::from(y), freqs[f], pl))
                .collect();
            let ms: Vec<RsrpMeasurement> = probes.iter().enumerate()
                .map(|(i, &(x, y))| meas(x, y, -90.0, freqs[i % 2]))
                .collect();
            let mut permuted = sims.clone();
            permuted.reverse();
            let k = rot % permuted.len();
            permuted.rotate_left(k);
            let a = match_to_simulation(&ms, &sims, 3.0);
            let b = match_to_simulation(&ms, &permuted, 3.0);
            match (a, b) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (Err(MeasurementError::NoMatches), Err(MeasurementError::NoMatches)) => {}
                (a, b) => prop_assert!(false, "diverged: {:?} / {:?}", a, b),
            }
        }
    }
}
