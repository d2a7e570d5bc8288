use std::f64::consts::PI;

use rand::Rng;

use super::PointCloud;

/// Which augmentations run and with what ranges. Every field off is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_x: bool,
    pub flip_y: bool,
    /// Maximum absolute rotation angle per axis (x, y, z) in radians.
    pub rotate: Option<[f64; 3]>,
    /// Additive uniform color noise half-width.
    pub color_jitter: Option<f64>,
    pub brightness: Option<(f64, f64)>,
    pub contrast: Option<(f64, f64)>,
    pub scale: Option<(f64, f64)>,
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            flip_x: false,
            flip_y: false,
            rotate: None,
            color_jitter: None,
            brightness: None,
            contrast: None,
            scale: None,
        }
    }

    /// Scene preset: flips, rotations, color jitter, brightness and contrast.
    pub fn scene() -> Self {
        AugmentConfig {
            flip_x: true,
            flip_y: true,
            rotate: Some([PI / 64.0, PI / 64.0, PI]),
            color_jitter: Some(0.05),
            brightness: Some((0.8, 1.2)),
            contrast: Some((0.8, 1.2)),
            scale: None,
        }
    }

    /// Shape preset for retrieval finetuning: uniform scale and z rotation.
    pub fn shape() -> Self {
        AugmentConfig {
            rotate: Some([0.0, 0.0, PI / 2.0]),
            scale: Some((0.8, 1.2)),
            ..AugmentConfig::none()
        }
    }
}

pub fn flip_x(pc: &mut PointCloud) {
    for p in &mut pc.positions {
        p[0] = -p[0];
    }
}

pub fn flip_y(pc: &mut PointCloud) {
    for p in &mut pc.positions {
        p[1] = -p[1];
    }
}

/// Rotates about the centroid by the given angles around x, then y, then z.
pub fn rotate(pc: &mut PointCloud, angles: [f64; 3]) {
    let c = pc.centroid();
    let (sx, cx) = angles[0].sin_cos();
    let (sy, cy) = angles[1].sin_cos();
    let (sz, cz) = angles[2].sin_cos();
    for p in &mut pc.positions {
        let (x, y, z) = (p[0] - c[0], p[1] - c[1], p[2] - c[2]);
        let (y, z) = (cx * y - sx * z, sx * y + cx * z);
        let (x, z) = (cy * x + sy * z, -sy * x + cy * z);
        let (x, y) = (cz * x - sz * y, sz * x + cz * y);
        *p = [x + c[0], y + c[1], z + c[2]];
    }
}

fn scale_about_centroid(pc: &mut PointCloud, s: f64) {
    let c = pc.centroid();
    for p in &mut pc.positions {
        for k in 0..3 {
            p[k] = (p[k] - c[k]) * s + c[k];
        }
    }
}

/// Applies the enabled augmentations; point count and labels are unchanged and
/// colors stay in `[0, 1]`.
pub fn augment(pc: &PointCloud, cfg: &AugmentConfig, rng: &mut impl Rng) -> PointCloud {
    let mut out = pc.clone();
    if cfg.flip_x && rng.gen_bool(0.5) {
        flip_x(&mut out);
    }
    if cfg.flip_y && rng.gen_bool(0.5) {
        flip_y(&mut out);
    }
    if let Some(max) = cfg.rotate {
        let angles = max.map(|m| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 });
        rotate(&mut out, angles);
    }
    if let Some((lo, hi)) = cfg.scale {
        let s = rng.gen_range(lo..=hi);
        scale_about_centroid(&mut out, s);
    }
    if let Some(j) = cfg.color_jitter {
        for c in out.colors.iter_mut().flatten() {
            *c += rng.gen_range(-j..=j);
        }
    }
    if let Some((lo, hi)) = cfg.brightness {
        let f = rng.gen_range(lo..=hi);
        for c in out.colors.iter_mut().flatten() {
            *c *= f;
        }
    }
    if let Some((lo, hi)) = cfg.contrast {
        let f = rng.gen_range(lo..=hi);
        let n = out.len() as f64;
        let mut mean = [0.0; 3];
        for c in &out.colors {
            for k in 0..3 {
                mean[k] += c[k] / n;
            }
        }
        for c in &mut out.colors {
            for k in 0..3 {
                c[k] = (c[k] - mean[k]) * f + mean[k];
            }
        }
    }
    for c in out.colors.iter_mut().flatten() {
        *c = c.clamp(0.0, 1.0);
    }
    out
}
