//! Synthetic CT volumes with known liver geometry.
//!
//! Each volume has a soft-tissue background, one to three bright bone
//! ellipses that run through every slice, and an elliptical liver present on
//! a contiguous block of slices. The liver mask is exact.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{save_raw, CtVolume};
use crate::seed::derive_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// Slice height and width in pixels.
    pub size: usize,
    pub depth: usize,
    /// Range of the number of slices containing liver.
    pub liver_slices: (usize, usize),
    pub liver_hu_mean: f64,
    pub liver_hu_std: f64,
    /// Liver HU samples outside this range are redrawn.
    pub liver_hu_range: (f64, f64),
    pub background_hu: (f64, f64),
    pub bone_hu: (f64, f64),
    pub bones: (usize, usize),
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 64,
            depth: 24,
            liver_slices: (10, 14),
            liver_hu_mean: 55.0,
            liver_hu_std: 5.0,
            liver_hu_range: (50.0, 150.0),
            background_hu: (-100.0, 40.0),
            bone_hu: (400.0, 1000.0),
            bones: (1, 3),
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::invalid("phantom size must be at least 16"));
        }
        let (lo, hi) = self.liver_slices;
        if lo == 0 || lo > hi || hi > self.depth {
            return Err(Error::invalid("liver_slices must satisfy 1 <= min <= max <= depth"));
        }
        if self.bones.0 > self.bones.1 {
            return Err(Error::invalid("bones range is inverted"));
        }
        let (a, b) = self.liver_hu_range;
        if !(a < b && self.liver_hu_std > 0.0) {
            return Err(Error::invalid("liver HU range must be nonempty and std positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }

    fn overlaps(&self, other: &Ellipse, margin: f64) -> bool {
        let dy = (self.cy - other.cy) / (self.ry.max(self.rx) + other.ry.max(other.rx) + margin);
        let dx = (self.cx - other.cx) / (self.ry.max(self.rx) + other.ry.max(other.rx) + margin);
        dy * dy + dx * dx < 1.0
    }
}

fn sample_truncated<R: Rng>(dist: &Normal<f64>, (lo, hi): (f64, f64), rng: &mut R) -> Result<f64> {
    for _ in 0..10_000 {
        let v = dist.sample(rng);
        if (lo..=hi).contains(&v) {
            return Ok(v);
        }
    }
    Err(Error::invalid(format!("liver HU range [{lo}, {hi}] is too unlikely under the liver distribution")))
}

pub fn phantom_volume_id(index: usize) -> String {
    format!("phantom_{index:03}")
}

/// Volume `index` of the corpus defined by `seed`.
pub fn generate_volume(index: usize, cfg: &PhantomConfig, seed: u64) -> Result<CtVolume> {
    cfg.validate()?;
    let id = phantom_volume_id(index);
    let mut rng: ChaCha8Rng = derive_rng(seed, &["phantom", &id]);
    let s = cfg.size as f64;
    let (d, n) = (cfg.depth, cfg.size);

    // liver footprint at its widest slice
    let liver = Ellipse {
        cy: rng.random_range(0.35 * s..0.6 * s),
        cx: rng.random_range(0.3 * s..0.55 * s),
        ry: rng.random_range(0.16 * s..0.26 * s),
        rx: rng.random_range(0.18 * s..0.3 * s),
    };
    let n_liver = rng.random_range(cfg.liver_slices.0..=cfg.liver_slices.1);
    let z0 = rng.random_range(0..=d - n_liver);

    let n_bones = rng.random_range(cfg.bones.0..=cfg.bones.1);
    let mut bones: Vec<Ellipse> = Vec::with_capacity(n_bones);
    let mut attempts = 0;
    while bones.len() < n_bones && attempts < 1000 {
        attempts += 1;
        let r = rng.random_range(0.04 * s..0.09 * s);
        let b = Ellipse {
            cy: rng.random_range(r + 1.0..s - r - 1.0),
            cx: rng.random_range(r + 1.0..s - r - 1.0),
            ry: r * rng.random_range(0.7..1.3),
            rx: r * rng.random_range(0.7..1.3),
        };
        if !b.overlaps(&liver, 1.0) && bones.iter().all(|o| !b.overlaps(o, 1.0)) {
            bones.push(b);
        }
    }

    let liver_dist = Normal::new(cfg.liver_hu_mean, cfg.liver_hu_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut voxels = Array3::<i16>::zeros((d, n, n));
    let mut mask = Array3::<u8>::zeros((d, n, n));
    for z in 0..d {
        let in_liver = z >= z0 && z < z0 + n_liver;
        // the liver cross-section tapers towards the ends of its block
        let shape = in_liver.then(|| {
            let t = (z - z0) as f64 + 0.5;
            let u = 2.0 * t / n_liver as f64 - 1.0;
            let f = (1.0 - 0.6 * u * u).sqrt();
            Ellipse {
                ry: liver.ry * f,
                rx: liver.rx * f,
                ..liver
            }
        });
        for y in 0..n {
            for x in 0..n {
                let hu = if shape.is_some_and(|e| e.contains(y, x)) {
                    mask[(z, y, x)] = 1;
                    sample_truncated(&liver_dist, cfg.liver_hu_range, &mut rng)?
                } else if bones.iter().any(|b| b.contains(y, x)) {
                    rng.random_range(cfg.bone_hu.0..=cfg.bone_hu.1)
                } else {
                    rng.random_range(cfg.background_hu.0..=cfg.background_hu.1)
                };
                voxels[(z, y, x)] = hu.round() as i16;
            }
        }
    }
    CtVolume::new(id, voxels, Some(mask), [2.5, 0.8, 0.8])
}

pub fn generate_corpus(n_volumes: usize, cfg: &PhantomConfig, seed: u64) -> Result<Vec<CtVolume>> {
    (0..n_volumes).map(|i| generate_volume(i, cfg, seed)).collect()
}

/// Writes `n_volumes` raw volumes (with masks) into `out_dir`.
pub fn write_corpus(out_dir: &Path, n_volumes: usize, cfg: &PhantomConfig, seed: u64) -> Result<Vec<PathBuf>> {
    if n_volumes == 0 {
        return Err(Error::invalid("n_volumes must be at least 1"));
    }
    (0..n_volumes)
        .map(|i| save_raw(&generate_volume(i, cfg, seed)?, out_dir))
        .collect()
}
