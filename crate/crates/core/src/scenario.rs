//! Scenario description (users, stations, terrain, radio, grid) and all
//! coverage computations: per-GU indicators, the K-by-K coverage bitmap
//! used as the learning state, and the coverage rate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{generate_terrain, Building, Point2D, TerrainMap};
use crate::radio::RadioParams;

/// Which coverage rule applies: uniform disk range, or the site-specific
/// LoS/NLoS gain against the terrain map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelModel {
    Disk,
    Terrain,
}

/// A complete world description.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub gus: Vec<Point2D>,
    pub abss: Vec<Point2D>,
    pub terrain: TerrainMap,
    pub radio: RadioParams,
    pub grid_k: usize,
}

/// On-disk scenario document.
#[derive(Serialize, Deserialize)]
struct ScenarioWire {
    region_side: f64,
    buildings: Vec<Building>,
    gus: Vec<Point2D>,
    abss: Vec<Point2D>,
    radio: RadioParams,
    #[serde(rename = "K")]
    k: usize,
}

impl Scenario {
    pub fn new(
        gus: Vec<Point2D>,
        abss: Vec<Point2D>,
        terrain: TerrainMap,
        radio: RadioParams,
        grid_k: usize,
    ) -> Result<Self> {
        let scenario = Self {
            gus,
            abss,
            terrain,
            radio,
            grid_k,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gus.is_empty() {
            return Err(Error::InvalidScenario("need at least one GU".into()));
        }
        if self.abss.is_empty() {
            return Err(Error::InvalidScenario("need at least one ABS".into()));
        }
        if self.grid_k == 0 {
            return Err(Error::InvalidScenario("grid_k must be at least 1".into()));
        }
        self.radio.validate()?;
        let side = self.terrain.region_side();
        for (n, gu) in self.gus.iter().enumerate() {
            if !gu.is_finite() || !gu.in_region(side) {
                return Err(Error::InvalidScenario(format!(
                    "GU {n} lies outside the region"
                )));
            }
            if self.terrain.on_any_footprint(*gu) {
                return Err(Error::InvalidScenario(format!(
                    "GU {n} lies on a building footprint"
                )));
            }
        }
        for (m, abs) in self.abss.iter().enumerate() {
            if !abs.is_finite() || !abs.in_region(side) {
                return Err(Error::InvalidScenario(format!(
                    "ABS {m} lies outside the region"
                )));
            }
        }
        Ok(())
    }

    pub fn n_gus(&self) -> usize {
        self.gus.len()
    }

    pub fn n_abs(&self) -> usize {
        self.abss.len()
    }

    pub fn region_side(&self) -> f64 {
        self.terrain.region_side()
    }

    /// Largest number of GUs sharing one grid cell; at least 1. Used to
    /// normalize bitmap counts before they reach the network.
    pub fn max_gus_per_cell(&self) -> u32 {
        let k = self.grid_k;
        let mut counts = vec![0u32; k * k];
        for gu in &self.gus {
            let (i, j) = grid_cell(*gu, k, self.region_side());
            counts[i * k + j] += 1;
        }
        counts.into_iter().max().unwrap_or(0).max(1)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let wire = ScenarioWire {
            region_side: self.terrain.region_side(),
            buildings: self.terrain.buildings().to_vec(),
            gus: self.gus.clone(),
            abss: self.abss.clone(),
            radio: self.radio,
            k: self.grid_k,
        };
        let mut text = serde_json::to_string_pretty(&wire)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let wire: ScenarioWire = serde_json::from_str(text)?;
        Scenario::new(
            wire.gus,
            wire.abss,
            TerrainMap::new(wire.region_side, wire.buildings)?,
            wire.radio,
            wire.k,
        )
    }

    /// Generates a full random scenario: terrain by rejection sampling,
    /// GUs uniform outside footprints, ABSs uniform over the region.
    /// Deterministic for a fixed seed.
    pub fn generate(params: &GenParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let terrain = generate_terrain(
            seed,
            params.region_side,
            params.n_buildings,
            params.footprint,
            params.height_range,
        )?;

        let mut gu_rng = ChaCha8Rng::seed_from_u64(seed);
        gu_rng.set_stream(1);
        let mut gus = Vec::with_capacity(params.n_gus);
        let budget = 1000 * params.n_gus.max(1);
        let mut attempts = 0;
        while gus.len() < params.n_gus {
            if attempts >= budget {
                return Err(Error::InvalidScenario(
                    "could not place GUs outside building footprints".into(),
                ));
            }
            attempts += 1;
            let p = Point2D::new(
                gu_rng.gen_range(0.0..=params.region_side),
                gu_rng.gen_range(0.0..=params.region_side),
            );
            if !terrain.on_any_footprint(p) {
                gus.push(p);
            }
        }

        let mut abs_rng = ChaCha8Rng::seed_from_u64(seed);
        abs_rng.set_stream(2);
        let abss = (0..params.n_abs)
            .map(|_| {
                Point2D::new(
                    abs_rng.gen_range(0.0..=params.region_side),
                    abs_rng.gen_range(0.0..=params.region_side),
                )
            })
            .collect();

        Scenario::new(gus, abss, terrain, params.radio, params.grid_k)
    }
}

/// Knobs for [`Scenario::generate`]. Defaults reproduce the experiment
/// setup: 3 km region, 30 buildings of 150 m footprint and 30-70 m
/// height, 80 GUs, 10 ABSs, a 20x20 grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    pub region_side: f64,
    pub n_buildings: usize,
    pub footprint: f64,
    pub height_range: (f64, f64),
    pub n_gus: usize,
    pub n_abs: usize,
    pub grid_k: usize,
    pub radio: RadioParams,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            region_side: 3000.0,
            n_buildings: 30,
            footprint: 150.0,
            height_range: (30.0, 70.0),
            n_gus: 80,
            n_abs: 10,
            grid_k: 20,
            radio: RadioParams::paper_defaults(),
        }
    }
}

impl GenParams {
    fn validate(&self) -> Result<()> {
        if self.n_gus == 0 {
            return Err(Error::InvalidParam("n_gus must be at least 1".into()));
        }
        if self.n_abs == 0 {
            return Err(Error::InvalidParam("n_abs must be at least 1".into()));
        }
        if self.grid_k == 0 {
            return Err(Error::InvalidParam("grid_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// K-by-K matrix of covered-GU counts per grid cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageBitmap {
    k: usize,
    counts: Vec<u32>,
}

impl CoverageBitmap {
    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.counts[i * self.k + j]
    }

    fn add(&mut self, i: usize, j: usize, v: u32) {
        self.counts[i * self.k + j] += v;
    }

    /// Total number of covered GUs.
    pub fn total_covered(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.counts
    }

    pub(crate) fn counts_mut(&mut self) -> &mut [u32] {
        &mut self.counts
    }
}

/// Maps a position to its grid cell `(floor(x*K/L), floor(y*K/L))`,
/// clamped so points on the far edge land in the last cell.
pub fn grid_cell(p: Point2D, k: usize, region_side: f64) -> (usize, usize) {
    let scale = k as f64 / region_side;
    let clamp = |v: f64| ((v * scale).floor().max(0.0) as usize).min(k - 1);
    (clamp(p.x), clamp(p.y))
}

/// Disk-model coverage indicator: covered iff the nearest ABS is within
/// the coverage range (non-strict).
pub fn coverage_indicator_disk(gu: Point2D, abss: &[Point2D], range: f64) -> bool {
    abss.iter().any(|abs| abs.distance(gu) <= range)
}

/// Terrain-model coverage indicator: covered iff some ABS achieves the
/// gain threshold under the LoS/NLoS channel (non-strict).
pub fn coverage_indicator_terrain(
    gu: Point2D,
    abss: &[Point2D],
    radio: &RadioParams,
    terrain: &TerrainMap,
) -> bool {
    let floor = radio.gain_threshold();
    abss.iter()
        .any(|abs| radio.site_gain(*abs, gu, terrain) >= floor)
}

/// Per-GU coverage decision under the selected model.
pub fn coverage_indicator(scenario: &Scenario, model: ChannelModel, gu_index: usize) -> Result<bool> {
    let gu = scenario.gus[gu_index];
    match model {
        ChannelModel::Disk => {
            let range = scenario.radio.coverage_range()?;
            Ok(coverage_indicator_disk(gu, &scenario.abss, range))
        }
        ChannelModel::Terrain => Ok(coverage_indicator_terrain(
            gu,
            &scenario.abss,
            &scenario.radio,
            &scenario.terrain,
        )),
    }
}

/// Builds the coverage bitmap. For each GU the ABSs are tested in
/// ascending order of distance with an early exit at the first one that
/// covers it; the nearest ABS is the most likely to, so most GUs resolve
/// after one test.
pub fn coverage_bitmap(scenario: &Scenario, model: ChannelModel) -> Result<CoverageBitmap> {
    coverage_bitmap_for(scenario, &scenario.abss, model)
}

/// Same as [`coverage_bitmap`], with the ABS placement supplied
/// separately (used while the environment moves stations around).
pub fn coverage_bitmap_for(
    scenario: &Scenario,
    abss: &[Point2D],
    model: ChannelModel,
) -> Result<CoverageBitmap> {
    let k = scenario.grid_k;
    let side = scenario.region_side();
    let mut bitmap = CoverageBitmap::zeros(k);
    let range = match model {
        ChannelModel::Disk => Some(scenario.radio.coverage_range()?),
        ChannelModel::Terrain => None,
    };
    let floor = scenario.radio.gain_threshold();

    let mut order: Vec<usize> = Vec::with_capacity(abss.len());
    let mut dists: Vec<f64> = Vec::with_capacity(abss.len());
    for gu in &scenario.gus {
        order.clear();
        order.extend(0..abss.len());
        dists.clear();
        dists.extend(abss.iter().map(|abs| abs.distance(*gu)));
        order.sort_unstable_by(|&a, &b| dists[a].total_cmp(&dists[b]));

        let covered = match model {
            ChannelModel::Disk => {
                let d = range.unwrap();
                order.first().is_some_and(|&m| dists[m] <= d)
            }
            ChannelModel::Terrain => order.iter().any(|&m| {
                scenario.radio.site_gain(abss[m], *gu, &scenario.terrain) >= floor
            }),
        };
        if covered {
            let (i, j) = grid_cell(*gu, k, side);
            bitmap.add(i, j, 1);
        }
    }
    Ok(bitmap)
}

/// Fraction of GUs covered by at least one ABS.
pub fn coverage_rate(bitmap: &CoverageBitmap, n_gus: usize) -> f64 {
    debug_assert!(bitmap.total_covered() as usize <= n_gus);
    bitmap.total_covered() as f64 / n_gus as f64
}

/// Per-GU evaluation row: coverage decision and the best channel gain
/// seen from any ABS under the model.
#[derive(Debug, Clone, Serialize)]
pub struct GuCoverage {
    pub covered: bool,
    pub best_gain: f64,
}

/// Evaluates every GU under the model for an explicit placement.
pub fn coverage_report(
    scenario: &Scenario,
    abss: &[Point2D],
    model: ChannelModel,
) -> Result<Vec<GuCoverage>> {
    let range = match model {
        ChannelModel::Disk => Some(scenario.radio.coverage_range()?),
        ChannelModel::Terrain => None,
    };
    let floor = scenario.radio.gain_threshold();
    scenario
        .gus
        .iter()
        .map(|gu| {
            let (covered, best_gain) = match model {
                ChannelModel::Disk => {
                    let best = abss
                        .iter()
                        .map(|abs| abs.distance(*gu))
                        .fold(f64::INFINITY, f64::min);
                    (best <= range.unwrap(), scenario.radio.los_gain_at(best))
                }
                ChannelModel::Terrain => {
                    let best = abss
                        .iter()
                        .map(|abs| scenario.radio.site_gain(*abs, *gu, &scenario.terrain))
                        .fold(0.0f64, f64::max);
                    (best >= floor, best)
                }
            };
            Ok(GuCoverage { covered, best_gain })
        })
        .collect()
}
