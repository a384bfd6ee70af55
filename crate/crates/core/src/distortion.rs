//! Synthesis distortions applied directly to Gaussian primitives and the
//! distortion-grid dataset manifest.
//!
//! Randomness comes from ChaCha20 (`rand_chacha`), seeded with
//! `seed_from_u64`. Dataset entries derive their own seed from the dataset
//! seed and the entry index, so entries can be generated in any order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::ply::{write_ply, Encoding};
use crate::splat::GaussianCloud;

pub const RNG_DESCRIPTION: &str =
    "ChaCha20Rng (rand_chacha 0.3) via seed_from_u64; entry seed = splitmix64(dataset_seed ^ splitmix64(entry_index))";

pub(crate) fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn entry_seed(dataset_seed: u64, index: u64) -> u64 {
    splitmix64(dataset_seed ^ splitmix64(index))
}

/// `round()` with ties to even.
pub fn target_count(p_frac: f64, n: usize) -> usize {
    (p_frac * n as f64).round_ties_even() as usize
}

/// Minimum spacing `(V / (N·p))^(1/3)` used by the Poisson-disk downsampler.
pub fn poisson_radius(volume: f64, n: usize, p_frac: f64) -> f64 {
    (volume / (n as f64 * p_frac)).cbrt()
}

#[derive(Debug, Clone)]
pub struct DownsampleOutcome {
    pub cloud: GaussianCloud,
    pub r_min: f64,
    /// Input indices accepted by dart throwing, in acceptance order.
    pub accepted: Vec<usize>,
    /// Input indices added afterwards to reach the target count.
    pub filled: Vec<usize>,
}

type Cell = (i64, i64, i64);

fn cell_of(p: [f64; 3], r: f64) -> Cell {
    (
        (p[0] / r).floor() as i64,
        (p[1] / r).floor() as i64,
        (p[2] / r).floor() as i64,
    )
}

pub fn downsample_poisson(cloud: &GaussianCloud, p_frac: f64, seed: u64) -> Result<GaussianCloud> {
    downsample_poisson_detailed(cloud, p_frac, seed).map(|o| o.cloud)
}

/// Poisson-disk constrained random downsampling to exactly `round(p·N)` splats.
///
/// Splats are visited in a seeded random order and accepted when their
/// centroid lies at least `r_min` from every accepted centroid. If the visit
/// order runs out first, the remainder is drawn uniformly from the rejected
/// splats. Retained splats keep their input order.
pub fn downsample_poisson_detailed(
    cloud: &GaussianCloud,
    p_frac: f64,
    seed: u64,
) -> Result<DownsampleOutcome> {
    if !(p_frac > 0.0 && p_frac <= 1.0) {
        return Err(domain!("sampling fraction {p_frac} outside (0, 1]"));
    }
    let n = cloud.len();
    if n == 0 {
        return Err(domain!("cannot downsample an empty cloud"));
    }
    let target = target_count(p_frac, n);
    let r_min = poisson_radius(cloud.bounding_volume()?, n, p_frac);
    let r2 = r_min * r_min;

    let mut rng = rng(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let pos = |i: usize| cloud.splats[i].centroid.map(f64::from);
    let mut grid: HashMap<Cell, Vec<usize>> = HashMap::new();
    let mut accepted = Vec::with_capacity(target);
    let mut rejected = Vec::new();
    for &i in &order {
        if accepted.len() == target {
            break;
        }
        let p = pos(i);
        let (cx, cy, cz) = cell_of(p, r_min);
        let mut clear = true;
        'scan: for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(members) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &j in members {
                            let q = pos(j);
                            let d2: f64 = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum();
                            if d2 < r2 {
                                clear = false;
                                break 'scan;
                            }
                        }
                    }
                }
            }
        }
        if clear {
            grid.entry((cx, cy, cz)).or_default().push(i);
            accepted.push(i);
        } else {
            rejected.push(i);
        }
    }

    let missing = target - accepted.len();
    let filled: Vec<usize> = rejected.choose_multiple(&mut rng, missing).copied().collect();

    let mut keep: Vec<usize> = accepted.iter().chain(&filled).copied().collect();
    keep.sort_unstable();
    Ok(DownsampleOutcome {
        cloud: cloud.select(&keep),
        r_min,
        accepted,
        filled,
    })
}

/// Adds i.i.d. `N(0, σ²)` offsets to every centroid coordinate.
pub fn perturb_positions(cloud: &GaussianCloud, sigma: f64, seed: u64) -> Result<GaussianCloud> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(domain!("spatial noise sigma must be finite and >= 0, got {sigma}"));
    }
    let mut out = cloud.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| domain!("{e}"))?;
    let mut rng = rng(seed);
    for s in &mut out.splats {
        for c in &mut s.centroid {
            *c = (f64::from(*c) + normal.sample(&mut rng)) as f32;
        }
    }
    Ok(out)
}

fn step_toward(v: f32, target: f32) -> f32 {
    if v == target {
        return v;
    }
    if v == 0.0 {
        return f32::from_bits(1).copysign(target);
    }
    // for either sign, decrementing the bit pattern shrinks the magnitude
    let shrink = (v > target) == (v > 0.0);
    let bits = v.to_bits();
    f32::from_bits(if shrink { bits - 1 } else { bits + 1 })
}

/// Adds i.i.d. `U(−δ, δ)` offsets to all 48 SH coefficients of every splat.
///
/// Stored offsets never exceed δ after rounding to `f32`.
pub fn perturb_sh(cloud: &GaussianCloud, delta: f64, seed: u64) -> Result<GaussianCloud> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(domain!("color noise delta must be finite and >= 0, got {delta}"));
    }
    let mut out = cloud.clone();
    if delta == 0.0 {
        return Ok(out);
    }
    let dist = Uniform::new_inclusive(-delta, delta);
    let mut rng = rng(seed);
    for s in &mut out.splats {
        for c in &mut s.sh {
            let orig = *c;
            let mut v = (f64::from(orig) + dist.sample(&mut rng)) as f32;
            while (f64::from(v) - f64::from(orig)).abs() > delta {
                v = step_toward(v, orig);
            }
            *c = v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    Downsample,
    SpatialNoise,
    ColorNoise,
    ReducedViewports,
    LimitedTraining,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 5] = [
        Self::Downsample,
        Self::SpatialNoise,
        Self::ColorNoise,
        Self::ReducedViewports,
        Self::LimitedTraining,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Downsample => "downsample",
            Self::SpatialNoise => "spatial_noise",
            Self::ColorNoise => "color_noise",
            Self::ReducedViewports => "reduced_viewports",
            Self::LimitedTraining => "limited_training",
        }
    }

    pub fn is_executable(self) -> bool {
        matches!(self, Self::Downsample | Self::SpatialNoise | Self::ColorNoise)
    }

    pub fn category(self) -> DistortionCategory {
        match self {
            Self::ReducedViewports | Self::LimitedTraining => DistortionCategory::Reconstruction,
            Self::Downsample => DistortionCategory::Downsampling,
            Self::SpatialNoise => DistortionCategory::GaussianNoise,
            Self::ColorNoise => DistortionCategory::ColorNoise,
        }
    }

    /// Default severity levels, mildest first.
    pub fn default_levels(self) -> [f64; 3] {
        match self {
            Self::Downsample => [0.75, 0.50, 0.25],
            Self::SpatialNoise => [0.001, 0.005, 0.01],
            Self::ColorNoise => [0.01, 0.05, 0.1],
            Self::ReducedViewports => [360.0, 270.0, 180.0],
            // only 7k and 30k are known; the middle level is a placeholder
            Self::LimitedTraining => [30_000.0, 15_000.0, 7_000.0],
        }
    }
}

impl std::str::FromStr for DistortionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| domain!("unknown distortion kind `{s}`"))
    }
}

/// Column groups of the per-distortion evaluation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionCategory {
    Reconstruction,
    Downsampling,
    GaussianNoise,
    ColorNoise,
}

impl DistortionCategory {
    pub const ALL: [DistortionCategory; 4] = [
        Self::Reconstruction,
        Self::Downsampling,
        Self::GaussianNoise,
        Self::ColorNoise,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::Reconstruction => "Reconstruction Distortion",
            Self::Downsampling => "Downsampling",
            Self::GaussianNoise => "Gaussian Noise",
            Self::ColorNoise => "Color Noise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub level: f64,
    pub seed: u64,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, level: f64, seed: u64) -> Self {
        Self { kind, level, seed }
    }

    pub fn apply(&self, cloud: &GaussianCloud) -> Result<GaussianCloud> {
        match self.kind {
            DistortionKind::Downsample => downsample_poisson(cloud, self.level, self.seed),
            DistortionKind::SpatialNoise => perturb_positions(cloud, self.level, self.seed),
            DistortionKind::ColorNoise => perturb_sh(cloud, self.level, self.seed),
            k => Err(domain!(
                "`{}` needs the reconstruction pipeline and cannot be synthesized",
                k.as_str()
            )),
        }
    }
}

/// Distortion grid applied to every base model.
#[derive(Debug, Clone, PartialEq)]
pub enum Grid {
    /// Three levels of each of the five distortion kinds.
    Default,
    /// `(kind, level)` pairs; seeds are derived per entry.
    Custom(Vec<(DistortionKind, f64)>),
}

impl Grid {
    pub fn levels(&self) -> Vec<(DistortionKind, f64)> {
        match self {
            Grid::Default => DistortionKind::ALL
                .iter()
                .flat_map(|&k| k.default_levels().map(|l| (k, l)))
                .collect(),
            Grid::Custom(v) => v.clone(),
        }
    }

    /// Only the executable synthesis distortions of the default grid.
    pub fn synthesis() -> Grid {
        Grid::Custom(
            Grid::Default
                .levels()
                .into_iter()
                .filter(|(k, _)| k.is_executable())
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseModelRef {
    pub name: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalRecipe {
    pub kind: DistortionKind,
    pub views: Option<u32>,
    pub iterations: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub base: String,
    pub spec: DistortionSpec,
    /// Path of the generated PLY, relative to the manifest directory.
    pub output: Option<String>,
    pub external_recipe: Option<ExternalRecipe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub rng: String,
    pub seed: u64,
    pub base_models: Vec<BaseModelRef>,
    pub entries: Vec<ManifestEntry>,
    pub mos: Option<BTreeMap<String, f64>>,
    pub notes: Vec<String>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn executable_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.output.is_some())
    }
}

pub fn entry_id(base: &str, kind: DistortionKind, level: f64) -> String {
    format!("{base}__{}_{level}", kind.as_str())
}

pub struct BaseModel {
    pub name: String,
    pub path: PathBuf,
    pub cloud: GaussianCloud,
}

/// Lays out the distortion grid over `bases`, generating every executable
/// entry into `out_dir` (in parallel) and returning the manifest.
pub fn build_manifest(
    bases: &[BaseModel],
    grid: &Grid,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    if bases.is_empty() {
        return Err(domain!("dataset needs at least one base model"));
    }
    let levels = grid.levels();
    let mut entries = Vec::with_capacity(bases.len() * levels.len());
    let mut seen = HashSet::new();
    for base in bases {
        for &(kind, level) in &levels {
            let index = entries.len() as u64;
            let id = entry_id(&base.name, kind, level);
            if !seen.insert(id.clone()) {
                return Err(Error::Config(format!("output path collision for entry `{id}`")));
            }
            let (output, external_recipe) = if kind.is_executable() {
                (Some(format!("{id}.ply")), None)
            } else {
                let (views, iterations) = match kind {
                    DistortionKind::ReducedViewports => (Some(level as u32), None),
                    _ => (None, Some(level as u32)),
                };
                (
                    None,
                    Some(ExternalRecipe {
                        kind,
                        views,
                        iterations,
                    }),
                )
            };
            entries.push(ManifestEntry {
                id,
                base: base.name.clone(),
                spec: DistortionSpec::new(kind, level, entry_seed(seed, index)),
                output,
                external_recipe,
            });
        }
    }

    let by_name: HashMap<&str, &BaseModel> = bases.iter().map(|b| (b.name.as_str(), b)).collect();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    entries
        .par_iter()
        .filter(|e| e.output.is_some())
        .try_for_each(|e| -> Result<()> {
            let cloud = e.spec.apply(&by_name[e.base.as_str()].cloud)?;
            write_ply(&cloud, out_dir.join(e.output.as_ref().unwrap()), Encoding::BinaryLittleEndian)
        })?;

    Ok(DatasetManifest {
        rng: RNG_DESCRIPTION.to_string(),
        seed,
        base_models: bases
            .iter()
            .map(|b| BaseModelRef {
                name: b.name.clone(),
                path: b.path.display().to_string(),
            })
            .collect(),
        entries,
        mos: None,
        notes: vec![
            "reduced_viewports and limited_training entries are external recipes; they require the 3DGS reconstruction pipeline".into(),
            "limited_training has only two documented iteration levels (7000, 30000); 15000 is a placeholder third level".into(),
        ],
    })
}

/// Uniformly random subset of `k` indices out of `n`, in ascending order.
pub(crate) fn sample_sorted_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}
