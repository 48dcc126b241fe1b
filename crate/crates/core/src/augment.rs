//! Two-view generation for self-supervised training.
//!
//! Every call to [`augment`] consumes exactly [`AugmentDraws::COUNT`] uniform
//! draws from the supplied RNG, regardless of which transforms fire. The two
//! views of [`make_views`] therefore always use disjoint, equally sized blocks
//! of the random stream.

use ndarray::{Array3, ArrayView2, ArrayView3, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::resize::{resize_region_chw, Region};
use crate::imaging::{clip_and_scale, pseudo_rgb, ClipWindow};

const CROP_ATTEMPTS: usize = 10;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Range of the crop area as a fraction of the image area.
    pub crop_scale: (f64, f64),
    /// Range of the crop aspect ratio (width / height).
    pub crop_ratio: (f64, f64),
    pub out_size: (usize, usize),
    pub hflip_prob: f64,
    /// Brightness, contrast, saturation, hue.
    pub jitter_strength: [f64; 4],
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub narrow: ClipWindow,
    pub wide: ClipWindow,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            out_size: (224, 224),
            hflip_prob: 0.5,
            jitter_strength: [0.4, 0.4, 0.4, 0.1],
            jitter_prob: 1.0,
            grayscale_prob: 0.2,
            narrow: ClipWindow::NARROW,
            wide: ClipWindow::WIDE,
        }
    }
}

impl AugmentConfig {
    /// All stochastic transforms switched off; only the resize remains.
    pub fn deterministic(out_size: (usize, usize)) -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            out_size,
            hflip_prob: 0.0,
            jitter_strength: [0.0; 4],
            grayscale_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be in [0, 1], got {p}")))
            }
        };
        prob("hflip_prob", self.hflip_prob)?;
        prob("jitter_prob", self.jitter_prob)?;
        prob("grayscale_prob", self.grayscale_prob)?;
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!("crop_scale must satisfy 0 < lo <= hi <= 1, got {:?}", self.crop_scale)));
        }
        let (rlo, rhi) = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi && rhi.is_finite()) {
            return Err(Error::invalid(format!("bad crop_ratio {:?}", self.crop_ratio)));
        }
        if self.out_size.0 == 0 || self.out_size.1 == 0 {
            return Err(Error::invalid("out_size must be positive"));
        }
        let [b, c, s, h] = self.jitter_strength;
        if [b, c, s].iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !(0.0..=0.5).contains(&h) {
            return Err(Error::invalid(format!("bad jitter_strength {:?}", self.jitter_strength)));
        }
        Ok(())
    }
}

/// Which windows feed the two views.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    /// Narrow window for the first view, wide for the second.
    #[default]
    DualClip,
    /// Wide window for both views (the standard single-clip baseline).
    SingleClip,
}

/// The full block of uniforms used by one [`augment`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraws {
    crop: [[f64; 4]; CROP_ATTEMPTS],
    flip: f64,
    jitter_apply: f64,
    jitter_factors: [f64; 4],
    jitter_order: [f64; 4],
    grayscale: f64,
}

impl AugmentDraws {
    pub const COUNT: usize = CROP_ATTEMPTS * 4 + 1 + 1 + 4 + 4 + 1;

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut u = || rng.random::<f64>();
        let mut crop = [[0.0; 4]; CROP_ATTEMPTS];
        for attempt in &mut crop {
            for v in attempt.iter_mut() {
                *v = u();
            }
        }
        Self {
            crop,
            flip: u(),
            jitter_apply: u(),
            jitter_factors: [u(), u(), u(), u()],
            jitter_order: [u(), u(), u(), u()],
            grayscale: u(),
        }
    }
}

fn lerp(lo: f64, hi: f64, u: f64) -> f64 {
    lo + (hi - lo) * u
}

fn crop_region(h: usize, w: usize, cfg: &AugmentConfig, draws: &AugmentDraws) -> Region {
    // Only the whole image has an area fraction of exactly one.
    if cfg.crop_scale.0 >= 1.0 {
        return Region::full(h, w);
    }
    let area = (h * w) as f64;
    let (log_lo, log_hi) = (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
    for [u_scale, u_ratio, u_top, u_left] in draws.crop {
        let target = area * lerp(cfg.crop_scale.0, cfg.crop_scale.1, u_scale);
        let ratio = lerp(log_lo, log_hi, u_ratio).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && cw <= w && ch > 0 && ch <= h {
            let top = ((u_top * (h - ch + 1) as f64) as usize).min(h - ch);
            let left = ((u_left * (w - cw + 1) as f64) as usize).min(w - cw);
            return Region {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    // Fallback: central crop with the aspect ratio clamped into range.
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < cfg.crop_ratio.0 {
        (((w as f64 / cfg.crop_ratio.0).round() as usize).clamp(1, h), w)
    } else if in_ratio > cfg.crop_ratio.1 {
        (h, ((h as f64 * cfg.crop_ratio.1).round() as usize).clamp(1, w))
    } else {
        (h, w)
    };
    Region {
        top: (h - ch) / 2,
        left: (w - cw) / 2,
        height: ch,
        width: cw,
    }
}

fn luminance(img: &Array3<f64>) -> ndarray::Array2<f64> {
    let r = img.index_axis(Axis(0), 0);
    let g = img.index_axis(Axis(0), 1);
    let b = img.index_axis(Axis(0), 2);
    Zip::from(&r)
        .and(&g)
        .and(&b)
        .map_collect(|&r, &g, &b| LUMA[0] * r + LUMA[1] * g + LUMA[2] * b)
}

fn clamp01(img: &mut Array3<f64>) {
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

fn adjust_brightness(img: &mut Array3<f64>, f: f64) {
    img.mapv_inplace(|v| v * f);
    clamp01(img);
}

fn adjust_contrast(img: &mut Array3<f64>, f: f64) {
    let mean = luminance(img).mean().unwrap_or(0.0);
    img.mapv_inplace(|v| f * v + (1.0 - f) * mean);
    clamp01(img);
}

fn adjust_saturation(img: &mut Array3<f64>, f: f64) {
    let gray = luminance(img);
    for mut plane in img.outer_iter_mut() {
        Zip::from(&mut plane).and(&gray).for_each(|v, &g| *v = f * *v + (1.0 - f) * g);
    }
    clamp01(img);
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn adjust_hue(img: &mut Array3<f64>, shift: f64) {
    let (_, h, w) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = (img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
            let (hue, s, v) = rgb_to_hsv(r, g, b);
            if s == 0.0 {
                continue;
            }
            let (r, g, b) = hsv_to_rgb(hue + shift, s, v);
            img[[0, y, x]] = r;
            img[[1, y, x]] = g;
            img[[2, y, x]] = b;
        }
    }
    clamp01(img);
}

fn to_grayscale(img: &mut Array3<f64>) {
    let gray = luminance(img);
    for mut plane in img.outer_iter_mut() {
        plane.assign(&gray);
    }
}

/// Apply the augmentation chain with pre-drawn randomness.
pub fn augment_with(img: ArrayView3<'_, f64>, cfg: &AugmentConfig, draws: &AugmentDraws) -> Result<Array3<f64>> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::invalid(format!("expected 3 channels, got {c}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("empty image"));
    }
    if img.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("image contains non-finite pixels"));
    }

    let region = crop_region(h, w, cfg, draws);
    let mut out = resize_region_chw(img, region, cfg.out_size);

    if draws.flip < cfg.hflip_prob {
        out.invert_axis(Axis(2));
    }

    if draws.jitter_apply < cfg.jitter_prob {
        let [sb, sc, ss, sh] = cfg.jitter_strength;
        let factor = |s: f64, u: f64| lerp((1.0 - s).max(0.0), 1.0 + s, u);
        let mut order = [0usize, 1, 2, 3];
        order.sort_by(|&a, &b| draws.jitter_order[a].total_cmp(&draws.jitter_order[b]));
        for op in order {
            let u = draws.jitter_factors[op];
            match op {
                0 if sb > 0.0 => adjust_brightness(&mut out, factor(sb, u)),
                1 if sc > 0.0 => adjust_contrast(&mut out, factor(sc, u)),
                2 if ss > 0.0 => adjust_saturation(&mut out, factor(ss, u)),
                3 if sh > 0.0 => adjust_hue(&mut out, lerp(-sh, sh, u)),
                _ => {}
            }
        }
    }

    if draws.grayscale < cfg.grayscale_prob {
        to_grayscale(&mut out);
    }
    clamp01(&mut out);
    Ok(out)
}

/// Random resized crop, horizontal flip, colour jitter and random grayscale,
/// in that order. Output is `(3, out_h, out_w)` in `[0, 1]`.
pub fn augment<R: Rng + ?Sized>(img: ArrayView3<'_, f64>, cfg: &AugmentConfig, rng: &mut R) -> Result<Array3<f64>> {
    let draws = AugmentDraws::sample(rng);
    augment_with(img, cfg, &draws)
}

/// The two training views of one HU slice.
pub fn make_views<R: Rng + ?Sized>(
    hu: ArrayView2<'_, i16>,
    cfg: &AugmentConfig,
    mode: ViewMode,
    rng: &mut R,
) -> Result<(Array3<f64>, Array3<f64>)> {
    let first_window = match mode {
        ViewMode::DualClip => cfg.narrow,
        ViewMode::SingleClip => cfg.wide,
    };
    let first = pseudo_rgb(clip_and_scale(hu, first_window).view());
    let second = pseudo_rgb(clip_and_scale(hu, cfg.wide).view());
    let v1 = augment(first.view(), cfg, rng)?;
    let v2 = augment(second.view(), cfg, rng)?;
    Ok((v1, v2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Array3<f64> {
        let plane = Array2::from_shape_fn((h, w), |(y, x)| ((y * w + x) as f64) / ((h * w) as f64));
        pseudo_rgb(plane.view())
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn disabled_randomness_is_identity() {
        let img = ramp(16, 16);
        let cfg = AugmentConfig::deterministic((16, 16));
        for s in 0..5 {
            assert_eq!(augment(img.view(), &cfg, &mut rng(s)).unwrap(), img);
        }
    }

    #[test]
    fn disabled_randomness_upsamples_only() {
        let img = ramp(8, 8);
        let cfg = AugmentConfig::deterministic((16, 16));
        let out = augment(img.view(), &cfg, &mut rng(3)).unwrap();
        let expect = crate::imaging::resize::resize_chw(img.view(), (16, 16));
        assert_eq!(out, expect);
    }

    #[test]
    fn forced_flip_mirrors() {
        let img = ramp(6, 9);
        let cfg = AugmentConfig {
            hflip_prob: 1.0,
            ..AugmentConfig::deterministic((6, 9))
        };
        let out = augment(img.view(), &cfg, &mut rng(0)).unwrap();
        let mut mirrored = img.clone();
        mirrored.invert_axis(Axis(2));
        assert_eq!(out, mirrored);
    }

    #[test]
    fn forced_grayscale_equalizes_channels() {
        let mut img = ramp(5, 5);
        img.index_axis_mut(Axis(0), 0).mapv_inplace(|v| v * 0.5);
        let cfg = AugmentConfig {
            grayscale_prob: 1.0,
            ..AugmentConfig::deterministic((5, 5))
        };
        let out = augment(img.view(), &cfg, &mut rng(0)).unwrap();
        assert_eq!(out.index_axis(Axis(0), 0), out.index_axis(Axis(0), 1));
        assert_eq!(out.index_axis(Axis(0), 1), out.index_axis(Axis(0), 2));
    }

    #[test]
    fn brightness_only_scales_pixels() {
        let img = ramp(4, 4).mapv(|v| v * 0.5);
        let cfg = AugmentConfig {
            jitter_strength: [0.4, 0.0, 0.0, 0.0],
            ..AugmentConfig::deterministic((4, 4))
        };
        let mut r = rng(11);
        let draws = AugmentDraws::sample(&mut r);
        let f = lerp(0.6, 1.4, draws.jitter_factors[0]);
        let out = augment_with(img.view(), &cfg, &draws).unwrap();
        for (o, i) in out.iter().zip(img.iter()) {
            assert!((o - (i * f).min(1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn hue_shift_round_trips_on_colour() {
        let (h, s, v) = rgb_to_hsv(0.8, 0.3, 0.1);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        assert!((r - 0.8).abs() < 1e-12 && (g - 0.3).abs() < 1e-12 && (b - 0.1).abs() < 1e-12);
    }

    #[test]
    fn seeded_output_is_reproducible_and_bounded() {
        let img = ramp(32, 24);
        let cfg = AugmentConfig {
            out_size: (20, 20),
            ..AugmentConfig::default()
        };
        for s in 0..20 {
            let a = augment(img.view(), &cfg, &mut rng(s)).unwrap();
            let b = augment(img.view(), &cfg, &mut rng(s)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.dim(), (3, 20, 20));
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut img = ramp(4, 4);
        img[[1, 2, 2]] = f64::NAN;
        let cfg = AugmentConfig::deterministic((4, 4));
        assert!(matches!(augment(img.view(), &cfg, &mut rng(0)), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            hflip_prob: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            crop_scale: (0.0, 1.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn views_differ_only_by_window() {
        let hu = Array2::from_shape_fn((8, 8), |(y, x)| 50 + (y * 8 + x) as i16);
        let cfg = AugmentConfig::deterministic((8, 8));
        let (v1, v2) = make_views(hu.view(), &cfg, ViewMode::DualClip, &mut rng(0)).unwrap();
        for ((a, b), h) in v1.index_axis(Axis(0), 0).iter().zip(v2.index_axis(Axis(0), 0)).zip(hu.iter()) {
            assert!((a - (*h as f64 - 50.0) / 100.0).abs() < 1e-12);
            assert!((b - (*h as f64 + 200.0) / 500.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_slice_views() {
        let hu = Array2::from_elem((6, 6), 100i16);
        let cfg = AugmentConfig::deterministic((6, 6));
        let (v1, v2) = make_views(hu.view(), &cfg, ViewMode::DualClip, &mut rng(0)).unwrap();
        assert!(v1.iter().all(|&v| (v - 0.5).abs() < 1e-12));
        assert!(v2.iter().all(|&v| (v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn baseline_views_match_without_randomness() {
        let hu = Array2::from_shape_fn((8, 8), |(y, x)| (y as i16 - 4) * 60 + x as i16);
        let cfg = AugmentConfig::deterministic((8, 8));
        let (v1, v2) = make_views(hu.view(), &cfg, ViewMode::SingleClip, &mut rng(5)).unwrap();
        assert_eq!(v1, v2);
    }

    /// Counts 64-bit draws and remembers each one.
    struct SpyRng {
        inner: ChaCha8Rng,
        log: Vec<u64>,
    }

    impl RngCore for SpyRng {
        fn next_u32(&mut self) -> u32 {
            self.next_u64() as u32
        }
        fn next_u64(&mut self) -> u64 {
            let v = self.inner.next_u64();
            self.log.push(v);
            v
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            for chunk in dst.chunks_mut(8) {
                let v = self.next_u64().to_le_bytes();
                chunk.copy_from_slice(&v[..chunk.len()]);
            }
        }
    }

    #[test]
    fn views_use_equal_disjoint_draws() {
        let hu = Array2::from_shape_fn((16, 16), |(y, x)| (y * 30 + x) as i16 - 100);
        let cfg = AugmentConfig {
            out_size: (12, 12),
            ..Default::default()
        };
        for seed in 0..10 {
            let mut spy = SpyRng {
                inner: ChaCha8Rng::seed_from_u64(seed),
                log: Vec::new(),
            };
            make_views(hu.view(), &cfg, ViewMode::DualClip, &mut spy).unwrap();
            assert_eq!(spy.log.len(), 2 * AugmentDraws::COUNT);
            // replaying each half separately reproduces each view's draws
            let mut first = ChaCha8Rng::seed_from_u64(seed);
            let d1 = AugmentDraws::sample(&mut first);
            let d2 = AugmentDraws::sample(&mut first);
            assert_ne!(d1, d2);
            let (a, b) = spy.log.split_at(AugmentDraws::COUNT);
            assert!(a.iter().all(|v| !b.contains(v)));
        }
    }
}
