//! Gaussian splat data model.
//!
//! All attributes are kept in their stored (pre-activation) form: opacity is
//! a logit, scales are log-scales and the rotation is an unnormalized
//! quaternion. Nothing in this crate applies the activations.

use crate::error::{domain, Result};

pub const SH_COEFFS: usize = 48;
pub const SH_DC: usize = 3;
/// Attribute count of one splat: centroid, opacity, scale, rotation, SH.
pub const ATTRIBUTES: usize = 3 + 1 + 3 + 4 + SH_COEFFS;

/// Smallest axis extent used when computing bounding volumes.
pub const EPSILON_EXTENT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSplat {
    pub centroid: [f32; 3],
    pub opacity: f32,
    pub scale: [f32; 3],
    /// Quaternion in w, x, y, z order.
    pub rotation: [f32; 4],
    /// DC terms first (`f_dc_0..2`), then `f_rest_0..44` in file order.
    pub sh: [f32; SH_COEFFS],
}

impl Default for GaussianSplat {
    fn default() -> Self {
        Self {
            centroid: [0.0; 3],
            opacity: 0.0,
            scale: [0.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            sh: [0.0; SH_COEFFS],
        }
    }
}

impl GaussianSplat {
    /// Flattened `[C, O, S, R, SH]` attribute vector.
    pub fn attributes(&self) -> [f32; ATTRIBUTES] {
        let mut out = [0.0; ATTRIBUTES];
        out[0..3].copy_from_slice(&self.centroid);
        out[3] = self.opacity;
        out[4..7].copy_from_slice(&self.scale);
        out[7..11].copy_from_slice(&self.rotation);
        out[11..].copy_from_slice(&self.sh);
        out
    }

    pub fn from_attributes(attrs: &[f32; ATTRIBUTES]) -> Self {
        let mut s = Self::default();
        s.centroid.copy_from_slice(&attrs[0..3]);
        s.opacity = attrs[3];
        s.scale.copy_from_slice(&attrs[4..7]);
        s.rotation.copy_from_slice(&attrs[7..11]);
        s.sh.copy_from_slice(&attrs[11..]);
        s
    }

    pub fn rotation_is_normalizable(&self) -> bool {
        self.rotation.iter().any(|&q| q != 0.0) && self.rotation.iter().all(|q| q.is_finite())
    }
}

/// A non-splat PLY vertex property carried along for round-trip fidelity.
///
/// Values are held as `f64`, which represents every PLY scalar type exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtraProperty {
    pub name: String,
    pub kind: crate::ply::ScalarKind,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    pub splats: Vec<GaussianSplat>,
    pub source_label: String,
    /// Passthrough side table, one column per unknown property.
    pub extras: Vec<ExtraProperty>,
}

impl GaussianCloud {
    pub fn new(splats: Vec<GaussianSplat>, source_label: impl Into<String>) -> Self {
        Self {
            splats,
            source_label: source_label.into(),
            extras: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    /// Gathers the given splats (and their passthrough columns) in the given order.
    pub fn select(&self, indices: &[usize]) -> GaussianCloud {
        GaussianCloud {
            splats: indices.iter().map(|&i| self.splats[i]).collect(),
            source_label: self.source_label.clone(),
            extras: self
                .extras
                .iter()
                .map(|e| ExtraProperty {
                    name: e.name.clone(),
                    kind: e.kind,
                    values: indices.iter().map(|&i| e.values[i]).collect(),
                })
                .collect(),
        }
    }

    /// Axis-aligned bounds of the centroids, `None` for an empty cloud.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = self.splats.first()?;
        let mut lo = first.centroid.map(f64::from);
        let mut hi = lo;
        for s in &self.splats[1..] {
            for a in 0..3 {
                let v = f64::from(s.centroid[a]);
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
        Some((lo, hi))
    }

    /// Product of the centroid bounding-box extents, each clamped to at
    /// least [`EPSILON_EXTENT`].
    pub fn bounding_volume(&self) -> Result<f64> {
        let (lo, hi) = self
            .bounds()
            .ok_or_else(|| domain!("bounding volume of an empty cloud"))?;
        Ok((0..3)
            .map(|a| (hi[a] - lo[a]).max(EPSILON_EXTENT))
            .product())
    }
}
