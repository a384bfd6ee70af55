//! Procedural Gaussian clouds for smoke tests and demos.
//!
//! Each shape places splats on a closed or open surface inside the unit
//! cube, with scales tied to the local sample spacing, random orientations
//! and a smooth procedural color field.

use rand::Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::distortion::rng;
use crate::splat::{GaussianCloud, GaussianSplat, SH_COEFFS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    Torus,
    Wave,
    Cylinder,
    Shell,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Sphere, Shape::Torus, Shape::Wave, Shape::Cylinder, Shape::Shell];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Torus => "torus",
            Shape::Wave => "wave",
            Shape::Cylinder => "cylinder",
            Shape::Shell => "shell",
        }
    }

    fn point(self, r: &mut impl Rng) -> [f64; 3] {
        use std::f64::consts::TAU;
        match self {
            Shape::Sphere => {
                let [x, y, z]: [f64; 3] = UnitSphere.sample(r);
                [0.5 * x, 0.5 * y, 0.5 * z]
            }
            Shape::Torus => {
                let (u, v) = (r.gen::<f64>() * TAU, r.gen::<f64>() * TAU);
                let (big, small) = (0.35, 0.12);
                [(big + small * v.cos()) * u.cos(), (big + small * v.cos()) * u.sin(), small * v.sin()]
            }
            Shape::Wave => {
                let (x, y) = (r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5));
                [x, y, 0.08 * (6.0 * x).sin() * (4.0 * y).cos()]
            }
            Shape::Cylinder => {
                let a = r.gen::<f64>() * TAU;
                [0.3 * a.cos(), 0.3 * a.sin(), r.gen_range(-0.5..0.5)]
            }
            Shape::Shell => {
                // two concentric spheres
                let [x, y, z]: [f64; 3] = UnitSphere.sample(r);
                let s = if r.gen::<bool>() { 0.45 } else { 0.25 };
                [s * x, s * y, s * z]
            }
        }
    }
}

struct Style {
    log_scale: f32,
    jitter: Normal<f64>,
    phase: [f64; 3],
}

impl Style {
    fn new(count: usize, r: &mut impl Rng) -> Self {
        let spacing = (1.0 / count.max(1) as f64).sqrt();
        Self {
            log_scale: spacing.ln() as f32,
            jitter: Normal::new(0.0, 0.15).unwrap(),
            phase: [r.gen::<f64>() * 6.0, r.gen::<f64>() * 6.0, r.gen::<f64>() * 6.0],
        }
    }

    fn splat(&self, p: [f64; 3], r: &mut impl Rng) -> GaussianSplat {
        let mut sh = [0f32; SH_COEFFS];
        for c in 0..3 {
            sh[c] = (1.2 * (4.0 * p[c] + 3.0 * p[(c + 1) % 3] + self.phase[c]).sin()) as f32;
        }
        for v in &mut sh[3..] {
            *v = (0.05 * self.jitter.sample(r)) as f32;
        }
        let q: [f64; 4] = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        GaussianSplat {
            centroid: p.map(|v| v as f32),
            opacity: r.gen_range(-1.0f32..3.0),
            scale: [0; 3].map(|_| self.log_scale + self.jitter.sample(r) as f32),
            rotation: q.map(|v| (v / qn) as f32),
            sh,
        }
    }
}

/// A cloud of `count` splats on `shape`, fully determined by `seed`.
pub fn procedural_cloud(shape: Shape, count: usize, seed: u64) -> GaussianCloud {
    let mut r = rng(seed);
    let style = Style::new(count, &mut r);
    let splats = (0..count)
        .map(|_| {
            let p = shape.point(&mut r);
            style.splat(p, &mut r)
        })
        .collect();
    GaussianCloud::new(splats, format!("{}-{seed}", shape.name()))
}
