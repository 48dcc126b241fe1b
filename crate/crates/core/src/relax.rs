//! Occlusion-based importance maps for representations.
//!
//! Each random mask `M_n` occludes the input; the importance of pixel `(i, j)`
//! is the mask-weighted mean cosine similarity between the embedding of the
//! occluded image and that of the original:
//! `R_ij = (1/N) * sum_n s(h, h_n) * M_ij(n)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, ArrayView3, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::resize::resize;
use crate::seed::derive_rng;
use crate::ssl::SimSiamModel;

pub const DEFAULT_GRID: (usize, usize) = (7, 7);
pub const DEFAULT_P: f64 = 0.5;
pub const DEFAULT_N_MASKS: usize = 3000;
/// Fraction of skipped masks above which a degeneracy warning is raised.
pub const SKIP_WARN_FRACTION: f64 = 0.1;
/// Masks evaluated per parallel work item; fixes the reduction order.
const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
enum Source {
    /// Low-resolution Bernoulli grids, upsampled on access.
    Grids(Vec<Array2<f64>>),
    /// Full-resolution masks given directly.
    Explicit(Vec<Array2<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskBatch {
    source: Source,
    pub grid: (usize, usize),
    pub p: f64,
    pub seed: u64,
    pub out: (usize, usize),
}

/// `n` masks of `grid`-sized Bernoulli(`p`) cells, bilinearly upsampled to `out`.
/// `p` must lie strictly inside (0, 1).
pub fn generate_masks(n: usize, grid: (usize, usize), p: f64, out: (usize, usize), seed: u64) -> Result<MaskBatch> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("mask probability must be in (0, 1), got {p}")));
    }
    MaskBatch::bernoulli(n, grid, p, out, seed)
}

impl MaskBatch {
    /// Like [`generate_masks`] but also accepts `p` of exactly 0 or 1.
    pub fn bernoulli(n: usize, grid: (usize, usize), p: f64, out: (usize, usize), seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("at least one mask is required"));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("mask probability must be in [0, 1], got {p}")));
        }
        if grid.0 == 0 || grid.1 == 0 || grid.0 >= out.0 || grid.1 >= out.1 {
            return Err(Error::invalid(format!(
                "mask grid {grid:?} must be nonempty and smaller than the image {out:?}"
            )));
        }
        let mut rng: ChaCha8Rng = derive_rng(seed, &["relax_masks"]);
        let grids = (0..n)
            .map(|_| Array2::from_shape_simple_fn(grid, || if rng.random::<f64>() < p { 1.0 } else { 0.0 }))
            .collect();
        Ok(Self {
            source: Source::Grids(grids),
            grid,
            p,
            seed,
            out,
        })
    }

    /// Masks supplied at full resolution, e.g. hand-built test patterns.
    pub fn from_masks(masks: Vec<Array2<f64>>) -> Result<Self> {
        let first = masks.first().ok_or_else(|| Error::invalid("at least one mask is required"))?;
        let out = first.dim();
        for m in &masks {
            if m.dim() != out {
                return Err(Error::invalid("masks differ in shape"));
            }
            if !m.iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(Error::invalid("mask values must lie in [0, 1]"));
            }
        }
        Ok(Self {
            source: Source::Explicit(masks),
            grid: out,
            p: f64::NAN,
            seed: 0,
            out,
        })
    }

    pub fn len(&self) -> usize {
        match &self.source {
            Source::Grids(g) => g.len(),
            Source::Explicit(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mask `i` at output resolution.
    pub fn mask(&self, i: usize) -> Array2<f64> {
        match &self.source {
            Source::Grids(g) => resize(g[i].view(), self.out).mapv(|v| v.clamp(0.0, 1.0)),
            Source::Explicit(m) => m[i].clone(),
        }
    }

    /// All masks of `self` followed by those of `other`, as explicit masks.
    pub fn concat(&self, other: &MaskBatch) -> Result<MaskBatch> {
        if self.out != other.out {
            return Err(Error::invalid("mask batches differ in resolution"));
        }
        let masks = (0..self.len()).map(|i| self.mask(i)).chain((0..other.len()).map(|i| other.mask(i)));
        MaskBatch::from_masks(masks.collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub r: Array2<f64>,
    /// Masks whose term entered the sum.
    pub n_masks_used: usize,
    /// Masks skipped because the occluded embedding had zero norm.
    pub n_skipped: usize,
    /// Mask-weighted variance of the similarity, when requested.
    pub uncertainty: Option<Array2<f64>>,
}

impl SaliencyMap {
    pub const SIMILARITY_KIND: &'static str = "cosine";
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RelaxOptions {
    pub with_uncertainty: bool,
}

fn cosine64(a: &ndarray::Array1<f64>, b: &ndarray::Array1<f64>) -> Option<f64> {
    let (na, nb) = (a.dot(a).sqrt(), b.dot(b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Importance map of `image` (already scaled and sized for `model`).
pub fn relax_importance(model: &SimSiamModel, image: ArrayView3<'_, f64>, masks: &MaskBatch) -> Result<SaliencyMap> {
    relax_importance_with(model, image, masks, RelaxOptions::default())
}

pub fn relax_importance_with(
    model: &SimSiamModel,
    image: ArrayView3<'_, f64>,
    masks: &MaskBatch,
    opts: RelaxOptions,
) -> Result<SaliencyMap> {
    let (_, height, width) = image.dim();
    if masks.out != (height, width) {
        return Err(Error::invalid(format!(
            "masks are {:?} but the image is {:?}",
            masks.out,
            (height, width)
        )));
    }
    let h = model.extract_h(image)?;
    if h.dot(&h) == 0.0 {
        return Err(Error::NumericDegeneracy("unmasked embedding has zero norm".into()));
    }
    let n = masks.len();

    // (similarity per mask, or None when skipped), chunked for a fixed reduction order
    let chunks: Vec<Vec<(usize, Option<f64>)>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|idx| {
            idx.iter()
                .map(|&i| {
                    let m = masks.mask(i);
                    let mut x = image.to_owned();
                    for mut channel in x.outer_iter_mut() {
                        channel *= &m;
                    }
                    model.extract_h(x.view()).map(|hm| (i, cosine64(&h, &hm)))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut sims = vec![None; n];
    for (i, s) in chunks.into_iter().flatten() {
        sims[i] = s;
    }
    let mut r = Array2::<f64>::zeros((height, width));
    let mut skipped = 0;
    for (i, s) in sims.iter().enumerate() {
        match s {
            Some(s) => r.scaled_add(*s, &masks.mask(i)),
            None => skipped += 1,
        }
    }
    r /= n as f64;
    if skipped as f64 > SKIP_WARN_FRACTION * n as f64 {
        tracing::warn!(skipped, n, "many occluded embeddings had zero norm; importance map may be degenerate");
    }

    let uncertainty = opts.with_uncertainty.then(|| {
        let mut u = Array2::<f64>::zeros((height, width));
        for (i, s) in sims.iter().enumerate() {
            if let Some(s) = s {
                let m = masks.mask(i);
                Zip::from(&mut u).and(&r).and(&m).for_each(|u, &rb, &mv| *u += (s - rb).powi(2) * mv);
            }
        }
        u / n as f64
    });

    Ok(SaliencyMap {
        r,
        n_masks_used: n - skipped,
        n_skipped: skipped,
        uncertainty,
    })
}

/// Min-max scaling to [0, 1]; a constant map becomes 0.5 everywhere.
pub fn normalize_for_display(r: ArrayView2<'_, f64>) -> Array2<f64> {
    let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Array2::from_elem(r.dim(), 0.5);
    }
    r.mapv(|v| (v - lo) / (hi - lo))
}

/// Sidecar written next to an exported map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencySidecar {
    pub slice_id: String,
    pub n_masks: usize,
    pub grid: (usize, usize),
    pub p: f64,
    pub seed: u64,
    pub model_fingerprint: String,
    pub n_skipped: usize,
}

/// Single-channel little-endian PFM: `Pf\n{w} {h}\n-1.0\n`, rows bottom to top.
pub fn encode_pfm(map: ArrayView2<'_, f64>) -> Vec<u8> {
    let (h, w) = map.dim();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for row in map.outer_iter().rev() {
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Array2<f32>> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos as u64, "PFM header truncated"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "Pf" {
        return Err(Error::format(0, "only single-channel PFM is supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(3, format!("bad PFM size {s}")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let scale: f64 = fields[3].parse().map_err(|_| Error::format(pos as u64, "bad PFM scale"))?;
    let little = scale < 0.0;
    let body = bytes.get(pos..pos + w * h * 4).ok_or_else(|| Error::format(bytes.len() as u64, "PFM data truncated"))?;
    let mut out = Array2::zeros((h, w));
    for (k, c) in body.chunks_exact(4).enumerate() {
        let b: [u8; 4] = c.try_into().expect("4 bytes");
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        out[(h - 1 - k / w, k % w)] = v;
    }
    Ok(out)
}

/// Writes `<stem>.pfm` and `<stem>.json` and returns both paths.
pub fn export_saliency(
    map: &SaliencyMap,
    sidecar: &SaliencySidecar,
    stem: &Path,
) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    let pfm = stem.with_extension("pfm");
    let json = stem.with_extension("json");
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&pfm, encode_pfm(map.r.view())).map_err(|e| Error::io(&pfm, e))?;
    let mut f = fs::File::create(&json).map_err(|e| Error::io(&json, e))?;
    let text = serde_json::to_string_pretty(&serde_json::to_value(sidecar)?)?;
    writeln!(f, "{text}").map_err(|e| Error::io(&json, e))?;
    Ok((pfm, json))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssl::{EncoderSpec, HeadSpec, LossMode, ModelSpec};
    use ndarray::{array, Array3};

    fn model(size: usize) -> SimSiamModel {
        let spec = ModelSpec {
            encoder: EncoderSpec::tiny_conv(vec![4], 8),
            head: HeadSpec::new(8),
            input_size: (size, size),
            loss_mode: LossMode::Simsiam,
        };
        SimSiamModel::new(spec, 4).unwrap()
    }

    fn image(size: usize) -> Array3<f64> {
        Array3::from_shape_fn((3, size, size), |(c, y, x)| 0.1 + ((c * 5 + y * 3 + x * 7) % 11) as f64 / 11.0)
    }

    #[test]
    fn degenerate_probabilities() {
        let ones = MaskBatch::bernoulli(5, (2, 2), 1.0, (8, 8), 0).unwrap();
        assert!((0..5).all(|i| ones.mask(i).iter().all(|&v| v == 1.0)));
        let zeros = MaskBatch::bernoulli(5, (2, 2), 0.0, (8, 8), 0).unwrap();
        assert!((0..5).all(|i| zeros.mask(i).iter().all(|&v| v == 0.0)));
        assert!(generate_masks(5, (2, 2), 1.0, (8, 8), 0).is_err());
        assert!(generate_masks(5, (8, 2), 0.5, (8, 8), 0).is_err());
        assert!(generate_masks(0, (2, 2), 0.5, (8, 8), 0).is_err());
    }

    #[test]
    fn grand_mean_concentrates() {
        // 3000 * 49 Bernoulli(0.5) cells: 6 sigma of the cell mean is about 0.008.
        let b = generate_masks(3000, DEFAULT_GRID, 0.5, (32, 32), 1).unwrap();
        let mean: f64 = (0..b.len()).map(|i| b.mask(i).mean().unwrap()).sum::<f64>() / b.len() as f64;
        assert!((0.48..=0.52).contains(&mean), "{mean}");
        assert!((0..10).all(|i| b.mask(i).iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(b, generate_masks(3000, DEFAULT_GRID, 0.5, (32, 32), 1).unwrap());
    }

    #[test]
    fn identity_and_zero_masks() {
        let m = model(8);
        let img = image(8);
        let ones = MaskBatch::bernoulli(4, (2, 2), 1.0, (8, 8), 0).unwrap();
        let r = relax_importance(&m, img.view(), &ones).unwrap();
        assert!(r.r.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let zeros = MaskBatch::bernoulli(4, (2, 2), 0.0, (8, 8), 0).unwrap();
        let r = relax_importance(&m, img.view(), &zeros).unwrap();
        assert!(r.r.iter().all(|&v| v == 0.0));
    }

    /// Direct evaluation of the importance sum with explicit loops.
    fn brute_force(m: &SimSiamModel, img: &Array3<f64>, masks: &[Array2<f64>]) -> Array2<f64> {
        let (_, hh, ww) = img.dim();
        let h = m.extract_h(img.view()).unwrap();
        let mut out = Array2::zeros((hh, ww));
        for mask in masks {
            let mut x = img.clone();
            for c in 0..3 {
                for i in 0..hh {
                    for j in 0..ww {
                        x[(c, i, j)] *= mask[(i, j)];
                    }
                }
            }
            let hm = m.extract_h(x.view()).unwrap();
            let (mut d, mut a, mut b) = (0.0, 0.0, 0.0);
            for k in 0..h.len() {
                d += h[k] * hm[k];
                a += h[k] * h[k];
                b += hm[k] * hm[k];
            }
            let s = if b == 0.0 { 0.0 } else { d / (a.sqrt() * b.sqrt()) };
            for i in 0..hh {
                for j in 0..ww {
                    out[(i, j)] += s * mask[(i, j)];
                }
            }
        }
        out / masks.len() as f64
    }

    pub(crate) fn single_cell_off_masks(size: usize) -> Vec<Array2<f64>> {
        (0..size * size)
            .map(|k| {
                let mut m = Array2::ones((size, size));
                m[(k / size, k % size)] = 0.0;
                m
            })
            .collect()
    }

    #[test]
    fn matches_double_loop_on_4x4() {
        let m = model(4);
        let img = image(4);
        let masks = single_cell_off_masks(4);
        let batch = MaskBatch::from_masks(masks.clone()).unwrap();
        let r = relax_importance(&m, img.view(), &batch).unwrap();
        let want = brute_force(&m, &img, &masks);
        assert!(r.r.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(r.r.dim(), (4, 4));
    }

    #[test]
    fn concatenation_is_size_weighted_average() {
        let m = model(8);
        let img = image(8);
        let a = generate_masks(7, (3, 3), 0.5, (8, 8), 1).unwrap();
        let b = generate_masks(13, (3, 3), 0.5, (8, 8), 2).unwrap();
        let ra = relax_importance(&m, img.view(), &a).unwrap().r;
        let rb = relax_importance(&m, img.view(), &b).unwrap().r;
        let rab = relax_importance(&m, img.view(), &a.concat(&b).unwrap()).unwrap().r;
        let want = (ra * 7.0 + rb * 13.0) / 20.0;
        assert!(rab.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-10));
    }

    #[test]
    fn uncertainty_is_nonnegative() {
        let m = model(8);
        let b = generate_masks(20, (3, 3), 0.5, (8, 8), 1).unwrap();
        let s = relax_importance_with(&m, image(8).view(), &b, RelaxOptions { with_uncertainty: true }).unwrap();
        assert!(s.uncertainty.unwrap().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn display_normalization() {
        assert!(normalize_for_display(Array2::from_elem((2, 2), 3.0).view()).iter().all(|&v| v == 0.5));
        let id = array![[0.0, 0.25], [1.0, 0.5]];
        assert_eq!(normalize_for_display(id.view()), id);
        assert_eq!(normalize_for_display(array![[-1.0, 0.0, 1.0]].view()), array![[0.0, 0.5, 1.0]]);
    }

    #[test]
    fn pfm_round_trip() {
        let r = array![[1.0, 2.0, 3.0], [-4.0, 0.5, 6.0]];
        let back = decode_pfm(&encode_pfm(r.view())).unwrap();
        assert_eq!(back, r.mapv(|v| v as f32));
        let dir = tempfile::tempdir().unwrap();
        let map = SaliencyMap {
            r,
            n_masks_used: 1,
            n_skipped: 0,
            uncertainty: None,
        };
        let side = SaliencySidecar {
            slice_id: "a:0001".into(),
            n_masks: 1,
            grid: (7, 7),
            p: 0.5,
            seed: 3,
            model_fingerprint: "ff".into(),
            n_skipped: 0,
        };
        let (pfm, json) = export_saliency(&map, &side, &dir.path().join("x")).unwrap();
        assert!(pfm.exists());
        let parsed: SaliencySidecar = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
        assert_eq!(parsed, side);
    }

    #[test]
    fn larger_budget_reduces_seed_variance() {
        let m = model(8);
        let img = image(8);
        let spread = |n: usize| -> f64 {
            let maps: Vec<Array2<f64>> = (0..10)
                .map(|seed| relax_importance(&m, img.view(), &generate_masks(n, (3, 3), 0.5, (8, 8), seed).unwrap()).unwrap().r)
                .collect();
            let mean = maps.iter().fold(Array2::<f64>::zeros((8, 8)), |acc, r| acc + r) / 10.0;
            let var = maps.iter().fold(Array2::<f64>::zeros((8, 8)), |acc, r| acc + (r - &mean).mapv(|v| v * v)) / 9.0;
            var.mapv(f64::sqrt).mean().unwrap()
        };
        let (small, large) = (spread(300), spread(3000));
        assert!(large < small, "std with 3000 masks {large} vs 300 masks {small}");
    }
}
