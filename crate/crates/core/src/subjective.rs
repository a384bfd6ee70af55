//! Rating ingestion, participant screening and mean opinion scores.
//!
//! Screening runs two passes. Each score is flagged when it falls outside
//! the Tukey fence `[Q1 − f·IQR, Q3 + f·IQR]` of its stimulus (quartiles by
//! linear interpolation between order statistics). A participant is then
//! excluded when too many of their scores are flagged, when their scores
//! have (near) zero variance, or when almost all of them sit at a scale end.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distortion::DatasetManifest;
use crate::error::{Error, Result};

pub const SCALE_MIN: u8 = 1;
pub const SCALE_MAX: u8 = 5;

/// One row of the ratings CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub participant_id: String,
    pub stimulus_id: String,
    pub score: u8,
    pub timestamp_iso8601: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreeningConfig {
    pub fence: f64,
    /// Exclude when strictly more than this fraction of a participant's scores is flagged.
    pub max_flagged_fraction: f64,
    pub min_variance: f64,
    /// Exclude when at least this fraction of scores is 1 or 5.
    pub extreme_fraction: f64,
    pub min_raters: usize,
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        Self {
            fence: 1.5,
            max_flagged_fraction: 0.05,
            min_variance: 1e-6,
            extreme_fraction: 0.95,
            min_raters: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    Outliers,
    Uniform,
    Extreme,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RatingTable {
    pub participants: Vec<String>,
    pub stimuli: Vec<String>,
    /// `(participant, stimulus)` index pairs to scores.
    pub scores: BTreeMap<(usize, usize), u8>,
    pub flags: BTreeSet<(usize, usize)>,
    pub excluded: Vec<Option<ExclusionReason>>,
}

impl RatingTable {
    /// Builds a table, keeping participants and stimuli in first-seen order.
    pub fn from_ratings<'a>(ratings: impl IntoIterator<Item = &'a Rating>) -> Result<Self> {
        let mut t = RatingTable::default();
        let mut pix: HashMap<String, usize> = HashMap::new();
        let mut six: HashMap<String, usize> = HashMap::new();
        for r in ratings {
            if !(SCALE_MIN..=SCALE_MAX).contains(&r.score) {
                return Err(Error::Data(format!(
                    "score {} from `{}` for `{}` is outside {SCALE_MIN}..={SCALE_MAX}",
                    r.score, r.participant_id, r.stimulus_id
                )));
            }
            let p = *pix.entry(r.participant_id.clone()).or_insert_with(|| {
                t.participants.push(r.participant_id.clone());
                t.participants.len() - 1
            });
            let s = *six.entry(r.stimulus_id.clone()).or_insert_with(|| {
                t.stimuli.push(r.stimulus_id.clone());
                t.stimuli.len() - 1
            });
            if t.scores.insert((p, s), r.score).is_some() {
                return Err(Error::Data(format!(
                    "`{}` rated `{}` more than once",
                    r.participant_id, r.stimulus_id
                )));
            }
        }
        t.excluded = vec![None; t.participants.len()];
        Ok(t)
    }

    pub fn is_flagged(&self, participant: &str, stimulus: &str) -> bool {
        let p = self.participants.iter().position(|x| x == participant);
        let s = self.stimuli.iter().position(|x| x == stimulus);
        matches!((p, s), (Some(p), Some(s)) if self.flags.contains(&(p, s)))
    }

    pub fn exclusion(&self, participant: &str) -> Option<ExclusionReason> {
        let p = self.participants.iter().position(|x| x == participant)?;
        self.excluded[p]
    }

    fn stimulus_scores(&self, s: usize) -> Vec<(usize, u8)> {
        self.scores.iter().filter(|((_, si), _)| *si == s).map(|(&(p, _), &v)| (p, v)).collect()
    }
}

/// Quantile by linear interpolation between order statistics of sorted `v`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Fills flags and exclusions from scratch; re-screening gives the same result.
pub fn screen_participants(table: &RatingTable, cfg: &ScreeningConfig) -> Result<RatingTable> {
    let mut out = table.clone();
    out.flags.clear();
    out.excluded = vec![None; table.participants.len()];
    let short: Vec<&str> = (0..table.stimuli.len())
        .filter(|&s| table.stimulus_scores(s).len() < cfg.min_raters)
        .map(|s| table.stimuli[s].as_str())
        .collect();
    if !short.is_empty() {
        return Err(Error::Data(format!(
            "fewer than {} raters for: {}",
            cfg.min_raters,
            short.join(", ")
        )));
    }
    for s in 0..table.stimuli.len() {
        let scores = table.stimulus_scores(s);
        let mut sorted: Vec<f64> = scores.iter().map(|&(_, v)| f64::from(v)).collect();
        sorted.sort_by(f64::total_cmp);
        let (q1, q3) = (quantile(&sorted, 0.25), quantile(&sorted, 0.75));
        let iqr = q3 - q1;
        let (lo, hi) = (q1 - cfg.fence * iqr, q3 + cfg.fence * iqr);
        for (p, v) in scores {
            let v = f64::from(v);
            if v < lo || v > hi {
                out.flags.insert((p, s));
            }
        }
    }
    for p in 0..table.participants.len() {
        let mine: Vec<(usize, f64)> = table
            .scores
            .iter()
            .filter(|((pi, _), _)| *pi == p)
            .map(|(&(_, s), &v)| (s, f64::from(v)))
            .collect();
        if mine.is_empty() {
            continue;
        }
        let n = mine.len() as f64;
        let flagged = mine.iter().filter(|(s, _)| out.flags.contains(&(p, *s))).count() as f64;
        let mean = mine.iter().map(|(_, v)| v).sum::<f64>() / n;
        let var = mine.iter().map(|(_, v)| (v - mean).powi(2)).sum::<f64>() / n;
        let extremes = mine
            .iter()
            .filter(|(_, v)| *v == f64::from(SCALE_MIN) || *v == f64::from(SCALE_MAX))
            .count() as f64;
        out.excluded[p] = if flagged / n > cfg.max_flagged_fraction {
            Some(ExclusionReason::Outliers)
        } else if var < cfg.min_variance {
            Some(ExclusionReason::Uniform)
        } else if extremes / n >= cfg.extreme_fraction {
            Some(ExclusionReason::Extreme)
        } else {
            None
        };
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosRow {
    pub stimulus_id: String,
    pub mos: f64,
    pub n_raters: usize,
}

/// Mean of the valid scores of every stimulus, in table order.
pub fn compute_mos(table: &RatingTable) -> Result<Vec<MosRow>> {
    let mut rows = Vec::with_capacity(table.stimuli.len());
    let mut empty = Vec::new();
    for (s, id) in table.stimuli.iter().enumerate() {
        let valid: Vec<f64> = table
            .stimulus_scores(s)
            .into_iter()
            .filter(|&(p, _)| table.excluded[p].is_none() && !table.flags.contains(&(p, s)))
            .map(|(_, v)| f64::from(v))
            .collect();
        if valid.is_empty() {
            empty.push(id.as_str());
            continue;
        }
        rows.push(MosRow {
            stimulus_id: id.clone(),
            mos: valid.iter().sum::<f64>() / valid.len() as f64,
            n_raters: valid.len(),
        });
    }
    if !empty.is_empty() {
        return Err(Error::Data(format!("no valid scores for: {}", empty.join(", "))));
    }
    Ok(rows)
}

/// Attaches MOS values to the manifest entries. Returns warnings (e.g. an
/// empty table); unknown or duplicate stimulus IDs are errors.
pub fn export_manifest_mos(mos: &[MosRow], manifest: &DatasetManifest) -> Result<(DatasetManifest, Vec<String>)> {
    let mut out = manifest.clone();
    if mos.is_empty() {
        return Ok((out, vec!["MOS table is empty; manifest left unchanged".into()]));
    }
    let mut seen = HashSet::new();
    let dups: BTreeSet<&str> = mos
        .iter()
        .filter(|r| !seen.insert(r.stimulus_id.as_str()))
        .map(|r| r.stimulus_id.as_str())
        .collect();
    if !dups.is_empty() {
        return Err(Error::Data(format!("duplicate stimulus IDs: {}", dups.into_iter().collect::<Vec<_>>().join(", "))));
    }
    let known: HashSet<&str> = manifest.entries.iter().map(|e| e.id.as_str()).collect();
    let unmatched: Vec<&str> = mos
        .iter()
        .map(|r| r.stimulus_id.as_str())
        .filter(|id| !known.contains(id))
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::Data(format!("stimuli not in manifest: {}", unmatched.join(", "))));
    }
    let map = out.mos.get_or_insert_with(BTreeMap::new);
    for r in mos {
        map.insert(r.stimulus_id.clone(), r.mos);
    }
    let mut warnings = Vec::new();
    let missing = manifest.entries.iter().filter(|e| !map.contains_key(&e.id)).count();
    if missing > 0 {
        warnings.push(format!("{missing} manifest entries have no MOS"));
    }
    Ok((out, warnings))
}

pub fn read_ratings<R: Read>(r: R) -> Result<Vec<Rating>> {
    let mut rdr = csv::Reader::from_reader(r);
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<Rating>, _>>()?)
}

pub fn write_ratings<W: Write>(ratings: &[Rating], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in ratings {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::io("<ratings>", e))
}

pub fn load_ratings(path: impl AsRef<Path>) -> Result<Vec<Rating>> {
    let path = path.as_ref();
    read_ratings(std::fs::File::open(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_mos<R: Read>(r: R) -> Result<Vec<MosRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<MosRow>, _>>()?)
}

pub fn write_mos<W: Write>(rows: &[MosRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::io("<mos>", e))
}
