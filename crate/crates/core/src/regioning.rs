//! Geometric preprocessing: random pre-downsampling, farthest point sampling
//! of region centers in the 9-D grouping space and k-nearest-neighbor region
//! extraction with full 59-attribute embeddings.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::distortion::{rng, sample_sorted_indices, splitmix64};
use crate::error::{domain, Error, Result};
use crate::splat::{GaussianCloud, GaussianSplat, ATTRIBUTES, SH_DC};

pub const GROUPING_DIM: usize = 9;

/// Centroid, raw scale and the DC color terms of one splat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupingPoint(pub [f64; GROUPING_DIM]);

impl GroupingPoint {
    pub fn from_splat(s: &GaussianSplat) -> Self {
        let mut g = [0.0; GROUPING_DIM];
        for a in 0..3 {
            g[a] = f64::from(s.centroid[a]);
            g[3 + a] = f64::from(s.scale[a]);
        }
        for a in 0..SH_DC {
            g[6 + a] = f64::from(s.sh[a]);
        }
        Self(g)
    }

    /// Same as [`from_splat`](Self::from_splat) on a flattened attribute row.
    pub fn from_attributes(attrs: &[f32]) -> Self {
        let mut g = [0.0; GROUPING_DIM];
        for a in 0..3 {
            g[a] = f64::from(attrs[a]);
            g[3 + a] = f64::from(attrs[4 + a]);
            g[6 + a] = f64::from(attrs[11 + a]);
        }
        Self(g)
    }

    pub fn dist2(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RegionConfig {
    pub p_pre: usize,
    pub n: usize,
    pub k: usize,
    /// Standardize each grouping dimension before sampling and neighbor search.
    pub standardize: bool,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            p_pre: 8192,
            n: 64,
            k: 32,
            standardize: false,
        }
    }
}

/// Uniformly random subset of `p_pre` splats in input order; identity when
/// the cloud is already small enough.
pub fn pre_downsample(cloud: &GaussianCloud, p_pre: usize, seed: u64) -> Result<GaussianCloud> {
    if p_pre < 1 {
        return Err(domain!("pre-downsampling count must be >= 1"));
    }
    if cloud.len() <= p_pre {
        return Ok(cloud.clone());
    }
    Ok(cloud.select(&sample_sorted_indices(cloud.len(), p_pre, seed)))
}

pub fn grouping_space(cloud: &GaussianCloud) -> Vec<GroupingPoint> {
    cloud.splats.iter().map(GroupingPoint::from_splat).collect()
}

/// Per-dimension z-scoring; dimensions with zero spread are only centered.
pub fn standardize(points: &[GroupingPoint]) -> Vec<GroupingPoint> {
    if points.is_empty() {
        return Vec::new();
    }
    let m = points.len() as f64;
    let mut mean = [0.0; GROUPING_DIM];
    let mut sd = [0.0; GROUPING_DIM];
    for p in points {
        for d in 0..GROUPING_DIM {
            mean[d] += p.0[d] / m;
        }
    }
    for p in points {
        for d in 0..GROUPING_DIM {
            sd[d] += (p.0[d] - mean[d]).powi(2) / m;
        }
    }
    let sd = sd.map(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
    points
        .iter()
        .map(|p| GroupingPoint(std::array::from_fn(|d| (p.0[d] - mean[d]) / sd[d])))
        .collect()
}

/// Farthest point sampling from a seeded random start.
///
/// Each step picks the unselected point with the largest distance to its
/// nearest selected center, lowest index first on ties.
pub fn fps(points: &[GroupingPoint], n: usize, seed: u64) -> Result<Vec<usize>> {
    let start = if points.is_empty() {
        0
    } else {
        rng(seed).gen_range(0..points.len())
    };
    fps_from(points, n, start)
}

pub fn fps_from(points: &[GroupingPoint], n: usize, start: usize) -> Result<Vec<usize>> {
    let m = points.len();
    if n < 1 || n > m {
        return Err(domain!("cannot select {n} centers from {m} points"));
    }
    if start >= m {
        return Err(domain!("start index {start} out of range for {m} points"));
    }
    let mut selected = vec![false; m];
    let mut nearest = vec![f64::INFINITY; m];
    let mut centers = Vec::with_capacity(n);
    let mut current = start;
    loop {
        selected[current] = true;
        centers.push(current);
        if centers.len() == n {
            break;
        }
        let c = points[current];
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if selected[i] {
                continue;
            }
            let d = p.dist2(&c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if best.map_or(true, |(_, bd)| nearest[i] > bd) {
                best = Some((i, nearest[i]));
            }
        }
        current = best.expect("unselected point remains").0;
    }
    Ok(centers)
}

/// Neighbor table (row-major `centers.len() × k`).
///
/// Row `i` starts with center `i` itself followed by its nearest other points
/// in nondecreasing distance, ties broken by lowest index.
pub fn knn_regions(points: &[GroupingPoint], centers: &[usize], k: usize) -> Result<Vec<usize>> {
    let m = points.len();
    if k < 1 || k > m {
        return Err(domain!("cannot take {k} neighbors among {m} points"));
    }
    if let Some(&bad) = centers.iter().find(|&&c| c >= m) {
        return Err(domain!("center index {bad} out of range for {m} points"));
    }
    let rows: Vec<Vec<usize>> = centers
        .par_iter()
        .map(|&c| {
            let mut cand: Vec<(f64, usize)> = points
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != c)
                .map(|(i, p)| (p.dist2(&points[c]), i))
                .collect();
            let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            let want = k - 1;
            if want < cand.len() && want > 0 {
                cand.select_nth_unstable_by(want - 1, order);
                cand.truncate(want);
            } else {
                cand.truncate(want);
            }
            cand.sort_unstable_by(order);
            std::iter::once(c).chain(cand.into_iter().map(|(_, i)| i)).collect()
        })
        .collect();
    Ok(rows.concat())
}

/// Gathers the 59 attributes of every referenced splat, row-major `len × 59`.
pub fn assemble_embeddings(cloud: &GaussianCloud, neighbors: &[usize]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(neighbors.len() * ATTRIBUTES);
    for &i in neighbors {
        let s = cloud
            .splats
            .get(i)
            .ok_or_else(|| domain!("neighbor index {i} out of range for {} splats", cloud.len()))?;
        out.extend_from_slice(&s.attributes());
    }
    Ok(out)
}

/// Preprocessed regions of one stimulus.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionBatch {
    pub p_pre: usize,
    pub n: usize,
    pub k: usize,
    pub center_indices: Vec<usize>,
    /// `n × k`, row-major.
    pub neighbors: Vec<usize>,
    /// `n × k × 59`, row-major.
    pub embeddings: Vec<f32>,
}

impl RegionBatch {
    pub fn embedding(&self, region: usize, member: usize) -> &[f32] {
        let at = (region * self.k + member) * ATTRIBUTES;
        &self.embeddings[at..at + ATTRIBUTES]
    }

    /// Grouping coordinates of each region's anchor splat.
    pub fn center_points(&self) -> Vec<GroupingPoint> {
        (0..self.n)
            .map(|r| GroupingPoint::from_attributes(self.embedding(r, 0)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, k) = (self.n, self.k);
        if self.center_indices.len() != n
            || self.neighbors.len() != n * k
            || self.embeddings.len() != n * k * ATTRIBUTES
        {
            return Err(Error::Contract(format!(
                "region batch buffers do not match n={n}, k={k}"
            )));
        }
        Ok(())
    }
}

/// Full preprocessing pipeline for one cloud.
pub fn build_regions(cloud: &GaussianCloud, cfg: &RegionConfig, seed: u64) -> Result<RegionBatch> {
    let reduced = pre_downsample(cloud, cfg.p_pre, seed)?;
    let mut points = grouping_space(&reduced);
    if cfg.standardize {
        points = standardize(&points);
    }
    let centers = fps(&points, cfg.n, splitmix64(seed))?;
    let neighbors = knn_regions(&points, &centers, cfg.k)?;
    let embeddings = assemble_embeddings(&reduced, &neighbors)?;
    Ok(RegionBatch {
        p_pre: cfg.p_pre,
        n: cfg.n,
        k: cfg.k,
        center_indices: centers,
        neighbors,
        embeddings,
    })
}

pub const REGION_MAGIC: &[u8; 4] = b"GSRB";
pub const REGION_VERSION: u32 = 1;

/// Binary container, all little-endian:
/// magic `GSRB`, u32 version, u32 p_pre, u32 n, u32 k, then n u32 center
/// indices, n·k u32 neighbor indices and n·k·59 f32 embeddings.
pub fn write_regions<W: Write>(batch: &RegionBatch, w: &mut W) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(20 + 4 * (batch.n * (1 + batch.k * (1 + ATTRIBUTES))));
    buf.extend_from_slice(REGION_MAGIC);
    for v in [REGION_VERSION, batch.p_pre as u32, batch.n as u32, batch.k as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &i in batch.center_indices.iter().chain(&batch.neighbors) {
        buf.extend_from_slice(&(i as u32).to_le_bytes());
    }
    for &x in &batch.embeddings {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_regions<R: Read>(r: &mut R) -> Result<RegionBatch> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("reading region file: {e}")))?;
    if bytes.len() < 20 || &bytes[..4] != REGION_MAGIC {
        return Err(Error::Format("not a region file (bad magic)".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
    let version = word(1);
    if version != REGION_VERSION {
        return Err(Error::Format(format!("unsupported region file version {version}")));
    }
    let (p_pre, n, k) = (word(2) as usize, word(3) as usize, word(4) as usize);
    let words = n + n * k + n * k * ATTRIBUTES;
    if bytes.len() != 20 + 4 * words {
        return Err(Error::Format(format!(
            "region file holds {} bytes, expected {}",
            bytes.len(),
            20 + 4 * words
        )));
    }
    let idx: Vec<usize> = (5..5 + n + n * k).map(|i| word(i) as usize).collect();
    let embeddings = (5 + n + n * k..5 + words)
        .map(|i| f32::from_bits(word(i)))
        .collect();
    let batch = RegionBatch {
        p_pre,
        n,
        k,
        center_indices: idx[..n].to_vec(),
        neighbors: idx[n..].to_vec(),
        embeddings,
    };
    batch.validate()?;
    Ok(batch)
}

pub fn save_regions(batch: &RegionBatch, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    write_regions(batch, &mut f).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn load_regions(path: impl AsRef<Path>) -> Result<RegionBatch> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_regions(&mut f)
}
