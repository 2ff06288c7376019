//! Desk-scale synthetic terrain: diamond-square ground plus rectangular
//! clutter blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Raster, Result, TerrainError, TerrainStack, DEFAULT_NODATA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTerrainParams {
    pub seed: u64,
    /// Cells per side; must be `2^k + 1`.
    pub size: usize,
    pub cellsize: f64,
    /// Peak-to-trough ground relief in meters.
    pub relief: f64,
    /// Target fraction of cells covered by clutter.
    pub clutter_density: f64,
    /// Inclusive `[min, max]` clutter height in meters.
    pub clutter_height_range: [f64; 2],
    /// Elevation of the lowest ground cell.
    pub base_elevation: f64,
    /// Lower-left corner of the grid.
    pub origin: [f64; 2],
    /// Amplitude decay per diamond-square level, in (0, 1].
    pub persistence: f64,
    /// Largest clutter block side length, in cells.
    pub max_block_cells: usize,
}

impl Default for SyntheticTerrainParams {
    fn default() -> Self {
        SyntheticTerrainParams {
            seed: 0,
            size: 129,
            cellsize: 5.0,
            relief: 0.0,
            clutter_density: 0.0,
            clutter_height_range: [3.0, 15.0],
            base_elevation: 200.0,
            origin: [0.0, 0.0],
            persistence: 0.5,
            max_block_cells: 8,
        }
    }
}

impl SyntheticTerrainParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TerrainError::InvalidArgument(msg));
        if self.size < 3 || !(self.size - 1).is_power_of_two() {
            return bad(format!("size must be 2^k + 1 (k >= 1), got {}", self.size));
        }
        if !(self.cellsize > 0.0 && self.cellsize.is_finite()) {
            return bad(format!("cellsize must be positive, got {}", self.cellsize));
        }
        if !(self.relief >= 0.0 && self.relief.is_finite()) {
            return bad(format!("relief must be non-negative, got {}", self.relief));
        }
        if !(0.0..=1.0).contains(&self.clutter_density) {
            return bad(format!(
                "clutter_density must be in [0, 1], got {}",
                self.clutter_density
            ));
        }
        let [lo, hi] = self.clutter_height_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("invalid clutter height range [{lo}, {hi}]"));
        }
        if !(self.persistence > 0.0 && self.persistence <= 1.0) {
            return bad(format!(
                "persistence must be in (0, 1], got {}",
                self.persistence
            ));
        }
        if self.max_block_cells == 0 {
            return bad("max_block_cells must be at least 1".into());
        }
        if !self.base_elevation.is_finite() || !self.origin.iter().all(|v| v.is_finite()) {
            return bad("non-finite base elevation or origin".into());
        }
        Ok(())
    }
}

/// Generates a deterministic terrain stack from `params`.
pub fn generate_synthetic_terrain(params: &SyntheticTerrainParams) -> Result<TerrainStack> {
    params.validate()?;
    let n = params.size;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let mut ground = diamond_square(n, params.persistence, &mut rng);
    let (lo, hi) = ground
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    for v in ground.iter_mut() {
        *v = if span > 0.0 && params.relief > 0.0 {
            params.base_elevation + (*v - lo) / span * params.relief
        } else {
            params.base_elevation
        };
    }

    let mut clutter = place_clutter(n, params, &mut rng);
    for v in ground.iter_mut().chain(clutter.iter_mut()) {
        *v = quantize(*v);
    }
    let dsm: Vec<f64> = ground.iter().zip(&clutter).map(|(g, c)| g + c).collect();

    let [x0, y0] = params.origin;
    let dsm = Raster::new(n, n, x0, y0, params.cellsize, DEFAULT_NODATA, dsm)?;
    let dhm = Raster::new(n, n, x0, y0, params.cellsize, DEFAULT_NODATA, clutter)?;
    let (stack, _) = TerrainStack::new(dsm, dhm)?;
    Ok(stack)
}

/// Heights are snapped to 1/1024 m so that surface = ground + clutter is
/// exactly representable.
fn quantize(v: f64) -> f64 {
    (v * 1024.0).round() / 1024.0
}

/// Midpoint displacement on an `n x n` grid (`n = 2^k + 1`), row-major.
fn diamond_square(n: usize, persistence: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut h = vec![0.0f64; n * n];
    let idx = |r: usize, c: usize| r * n + c;
    for &(r, c) in &[(0, 0), (0, n - 1), (n - 1, 0), (n - 1, n - 1)] {
        h[idx(r, c)] = rng.random_range(-1.0..1.0);
    }

    let mut step = n - 1;
    let mut amplitude = 1.0;
    while step > 1 {
        let half = step / 2;

        // Diamond: centers of each square.
        for r in (half..n).step_by(step) {
            for c in (half..n).step_by(step) {
                let avg = (h[idx(r - half, c - half)]
                    + h[idx(r - half, c + half)]
                    + h[idx(r + half, c - half)]
                    + h[idx(r + half, c + half)])
                    / 4.0;
                h[idx(r, c)] = avg + rng.random_range(-amplitude..amplitude);
            }
        }

        // Square: edge midpoints, averaging the in-grid neighbors.
        for r in (0..n).step_by(half) {
            let start = if (r / half).is_multiple_of(2) { half } else { 0 };
            for c in (start..n).step_by(step) {
                let mut sum = 0.0;
                let mut count = 0.0;
                if r >= half {
                    sum += h[idx(r - half, c)];
                    count += 1.0;
                }
                if r + half < n {
                    sum += h[idx(r + half, c)];
                    count += 1.0;
                }
                if c >= half {
                    sum += h[idx(r, c - half)];
                    count += 1.0;
                }
                if c + half < n {
                    sum += h[idx(r, c + half)];
                    count += 1.0;
                }
                h[idx(r, c)] = sum / count + rng.random_range(-amplitude..amplitude);
            }
        }

        step = half;
        amplitude *= persistence;
    }
    h
}

fn place_clutter(n: usize, params: &SyntheticTerrainParams, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut clutter = vec![0.0f64; n * n];
    let target = (params.clutter_density * (n * n) as f64).round() as usize;
    if target == 0 {
        return clutter;
    }
    let [lo, hi] = params.clutter_height_range;
    let max_side = params.max_block_cells.min(n);
    let mut covered = vec![false; n * n];
    let mut n_covered = 0usize;
    // Bounded so a pathological configuration cannot spin forever.
    let max_blocks = 16 * n * n;

    for _ in 0..max_blocks {
        if n_covered >= target {
            break;
        }
        let w = rng.random_range(1..=max_side);
        let hgt = rng.random_range(1..=max_side);
        let c0 = rng.random_range(0..=n - w);
        let r0 = rng.random_range(0..=n - hgt);
        let height = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        for r in r0..r0 + hgt {
            for c in c0..c0 + w {
                let i = r * n + c;
                clutter[i] = height;
                if !covered[i] {
                    covered[i] = true;
                    n_covered += 1;
                }
            }
        }
    }
    clutter
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> SyntheticTerrainParams {
        SyntheticTerrainParams {
            seed: 11,
            size: 65,
            relief: 40.0,
            clutter_density: 0.3,
            ..Default::default()
        }
    }

    #[test]
    fn degenerate_parameters_give_flat_stack() {
        let p = SyntheticTerrainParams {
            relief: 0.0,
            clutter_density: 0.0,
            ..params()
        };
        let s = generate_synthetic_terrain(&p).unwrap();
        assert!(s.dsm().values().iter().all(|&v| v == p.base_elevation));
        assert!(s.dhm().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = generate_synthetic_terrain(&params()).unwrap();
        let b = generate_synthetic_terrain(&params()).unwrap();
        assert_eq!(a, b);
        let bits = |s: &TerrainStack| {
            s.dsm()
                .values()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        let c = generate_synthetic_terrain(&SyntheticTerrainParams {
            seed: 12,
            ..params()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn relief_is_respected() {
        for seed in 0..10 {
            let s =
                generate_synthetic_terrain(&SyntheticTerrainParams { seed, ..params() }).unwrap();
            let g = s.ground().values();
            let (lo, hi) = g
                .iter()
                .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            let span = hi - lo;
            assert!((20.0..=40.0 + 1e-9).contains(&span), "span {span}");
        }
    }

    #[test]
    fn clutter_density_is_approximate() {
        let s = generate_synthetic_terrain(&params()).unwrap();
        let frac = s.dhm().values().iter().filter(|&&v| v > 0.0).count() as f64
            / s.dhm().values().len() as f64;
        assert!((0.3..0.4).contains(&frac), "coverage {frac}");
        let [lo, hi] = params().clutter_height_range;
        assert!(s
            .dhm()
            .values()
            .iter()
            .all(|&v| v == 0.0 || (lo..=hi).contains(&v)));
    }

    #[test]
    fn full_density_covers_everything() {
        let s = generate_synthetic_terrain(&SyntheticTerrainParams {
            size: 17,
            clutter_density: 1.0,
            clutter_height_range: [2.0, 4.0],
            ..params()
        })
        .unwrap();
        assert!(s.dhm().values().iter().all(|&v| v >= 2.0));
    }

    #[test]
    fn stack_identity_holds() {
        let s = generate_synthetic_terrain(&params()).unwrap();
        for ((g, h), d) in s
            .ground()
            .values()
            .iter()
            .zip(s.dhm().values())
            .zip(s.dsm().values())
        {
            assert_eq!(g + h, *d);
        }
    }

    #[test]
    fn invalid_size() {
        for size in [0, 2, 64, 100] {
            let p = SyntheticTerrainParams { size, ..params() };
            assert!(generate_synthetic_terrain(&p).is_err(), "size {size}");
        }
    }
}
