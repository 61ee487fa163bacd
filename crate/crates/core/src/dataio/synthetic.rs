//! Desk-scale stand-in for prostate MRI.
//!
//! Each patient gets an outer elliptical structure (class 2, the peripheral
//! zone) enclosing a smaller, offset inner structure (class 1, the central
//! gland). Boundaries carry low-order angular ripples, the pose and size vary
//! per patient and shrink toward the first and last slice. Intensities mix a
//! smooth background texture, a multiplicative bias field and Gaussian noise;
//! the inner/outer contrast is low and vanishes entirely inside a random
//! angular sector, so the base network cannot be perfect there.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabeledSlice, PatientVolume};
use crate::grid::{ImageSlice, LabelMap};

pub const SYNTHETIC_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_patients: usize,
    pub slices_per_patient: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub noise_std: f64,
    /// Mean intensities of background, inner and outer structure.
    pub intensities: [f64; 3],
    /// Range (radians) of the angular sector where the outer structure takes
    /// the inner intensity, hiding the boundary between the two.
    pub ambiguous_width: [f64; 2],
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_patients: 29,
            slices_per_patient: 4,
            height: 320,
            width: 320,
            seed: 0,
            noise_std: 0.10,
            intensities: [0.30, 0.50, 0.56],
            ambiguous_width: [0.6, 1.2],
        }
    }
}

/// Closed curve `r(φ) = 1 + Σ a_k cos(kφ + φ_k)` in normalized ellipse coordinates.
#[derive(Debug, Clone)]
struct Ripple {
    terms: Vec<(f64, f64)>,
}

impl Ripple {
    fn random<R: Rng>(rng: &mut R, max_total: f64) -> Self {
        let terms = (2..=4)
            .map(|_| (rng.gen_range(0.0..max_total / 3.0), rng.gen_range(0.0..2.0 * PI)))
            .collect();
        Self { terms }
    }

    fn radius(&self, phi: f64) -> f64 {
        1.0 + self
            .terms
            .iter()
            .enumerate()
            .map(|(i, (a, p))| a * ((i + 2) as f64 * phi + p).cos())
            .sum::<f64>()
    }
}

#[derive(Debug, Clone)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
    ripple: Ripple,
}

impl Ellipse {
    /// (normalized radius relative to the rippled boundary, polar angle).
    fn level(&self, y: f64, x: f64) -> (f64, f64) {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        let phi = v.atan2(u);
        ((u * u + v * v).sqrt() / self.ripple.radius(phi), phi)
    }
}

struct PatientShape {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
    outer_ripple: Ripple,
    inner_ripple: Ripple,
    inner_scale: f64,
    inner_shift: f64,
    ambiguous_from: f64,
    ambiguous_width: f64,
    bias_dir: f64,
    bias_amp: f64,
}

fn patient_shape<R: Rng>(rng: &mut R, h: f64, w: f64, ambiguous: [f64; 2]) -> PatientShape {
    let m = h.min(w);
    let a = rng.gen_range(0.24..0.33) * m;
    PatientShape {
        cy: h / 2.0 + rng.gen_range(-0.06..0.06) * m,
        cx: w / 2.0 + rng.gen_range(-0.06..0.06) * m,
        a,
        b: a * rng.gen_range(0.70..0.90),
        theta: rng.gen_range(0.0..PI),
        outer_ripple: Ripple::random(rng, 0.12),
        inner_ripple: Ripple::random(rng, 0.15),
        inner_scale: rng.gen_range(0.50..0.68),
        inner_shift: rng.gen_range(-0.15..0.15),
        ambiguous_from: rng.gen_range(-PI..PI),
        ambiguous_width: rng.gen_range(ambiguous[0]..=ambiguous[1]),
        bias_dir: rng.gen_range(0.0..2.0 * PI),
        bias_amp: rng.gen_range(0.0..0.15),
    }
}

fn angle_in_sector(phi: f64, from: f64, width: f64) -> bool {
    (phi - from).rem_euclid(2.0 * PI) < width
}

fn render_slice<R: Rng>(cfg: &SyntheticConfig, p: &PatientShape, z: f64, rng: &mut R) -> LabeledSlice {
    let (h, w) = (cfg.height, cfg.width);
    // Apex/base slices are smaller.
    let scale = (1.0 - 0.45 * z * z).sqrt();
    let jitter = 0.02 * h.min(w) as f64;
    let outer = Ellipse {
        cy: p.cy + rng.gen_range(-jitter..=jitter),
        cx: p.cx + rng.gen_range(-jitter..=jitter),
        a: p.a * scale,
        b: p.b * scale,
        theta: p.theta,
        ripple: p.outer_ripple.clone(),
    };
    let (s, c) = p.theta.sin_cos();
    let shift = p.inner_shift * outer.b;
    let inner = Ellipse {
        cy: outer.cy + shift * c,
        cx: outer.cx - shift * s,
        a: outer.a * p.inner_scale,
        b: outer.b * p.inner_scale,
        theta: p.theta,
        ripple: p.inner_ripple.clone(),
    };
    // Keep at least ~1.5 px of outer structure around the inner one.
    let margin = (1.0 - 1.5 / outer.b.min(outer.a)).min(0.8);

    let phases: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.5..3.0) * 2.0 * PI / h as f64,
                rng.gen_range(0.5..3.0) * 2.0 * PI / w as f64,
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).expect("valid std");
    let (bs, bc) = p.bias_dir.sin_cos();
    let [bg, inner_i, outer_i] = cfg.intensities;

    let mut labels = Vec::with_capacity(h * w);
    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            let (lo, phi_o) = outer.level(yf, xf);
            let (li, _) = inner.level(yf, xf);
            let class = if lo <= 1.0 {
                if li <= 1.0 && lo <= margin {
                    1
                } else {
                    2
                }
            } else {
                0
            };
            let texture: f64 = phases
                .iter()
                .map(|(fy, fx, ph)| (fy * yf + fx * xf + ph).sin())
                .sum::<f64>()
                / 3.0;
            let base = match class {
                0 => bg + 0.06 * texture,
                1 => inner_i,
                _ if angle_in_sector(phi_o, p.ambiguous_from, p.ambiguous_width) => inner_i,
                _ => outer_i,
            };
            let ny = (yf / h as f64) * 2.0 - 1.0;
            let nx = (xf / w as f64) * 2.0 - 1.0;
            let bias = 1.0 + p.bias_amp * (ny * bs + nx * bc);
            let v = (base * bias + noise.sample(rng)).clamp(0.0, 1.0);
            labels.push(class as u8);
            pixels.push(v as f32);
        }
    }
    LabeledSlice {
        image: ImageSlice::new(h, w, pixels).expect("clamped values are finite"),
        labels: LabelMap::new(h, w, SYNTHETIC_CLASSES, labels).expect("labels in 0..3"),
    }
}

/// Deterministic synthetic dataset; patient `i` depends only on `(seed, i)`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Vec<PatientVolume> {
    assert!(cfg.n_patients >= 1 && cfg.slices_per_patient >= 1);
    assert!(cfg.height >= 8 && cfg.width >= 8);
    assert!(0.0 <= cfg.ambiguous_width[0] && cfg.ambiguous_width[0] <= cfg.ambiguous_width[1]);
    (0..cfg.n_patients)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let shape = patient_shape(&mut rng, cfg.height as f64, cfg.width as f64, cfg.ambiguous_width);
            let n = cfg.slices_per_patient;
            let slices = (0..n)
                .map(|j| {
                    let z = if n == 1 { 0.0 } else { (j as f64 / (n - 1) as f64) * 1.6 - 0.8 };
                    render_slice(cfg, &shape, z, &mut rng)
                })
                .collect();
            PatientVolume {
                patient_id: format!("synth{i:03}"),
                slices,
            }
        })
        .collect()
}
