//! CT volume containers.
//!
//! Two on-disk layouts are understood:
//!
//! * **raw**: `<stem>.json` header `{"shape": [D, H, W], "dtype": "int16",
//!   "byte_order": "little"}` next to `<stem>.bin` holding `D*H*W` little-endian
//!   `i16` HU values, plus an optional same-shaped `u8` mask in `<stem>.mask.bin`.
//! * **NIfTI-1** (`.nii` or `.nii.gz`), as distributed by the Medical
//!   Segmentation Decathlon. Companion labels are looked up in a sibling
//!   `labelsTr/` directory or as `<stem>_mask.nii[.gz]`.
//!
//! Volumes are held as `(depth, height, width)` arrays; axial slices are taken
//! along the slowest axis (the third NIfTI axis).

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use ndarray::{Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::window::{saturate_hu, HU_MAX, HU_MIN};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    pub volume_id: String,
    /// `(depth, height, width)` Hounsfield units, saturated into `[-1024, 3071]`.
    pub voxels: Array3<i16>,
    pub liver_mask: Option<Array3<u8>>,
    /// mm per voxel along `(depth, height, width)`.
    pub spacing: [f64; 3],
}

impl CtVolume {
    pub fn new(
        volume_id: impl Into<String>,
        voxels: Array3<i16>,
        liver_mask: Option<Array3<u8>>,
        spacing: [f64; 3],
    ) -> Result<Self> {
        if let Some(mask) = &liver_mask {
            if mask.shape() != voxels.shape() {
                return Err(Error::Alignment {
                    image: voxels.shape().to_vec(),
                    mask: mask.shape().to_vec(),
                });
            }
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid(format!("non-positive spacing {spacing:?}")));
        }
        let voxels = voxels.mapv(|v| v.clamp(HU_MIN, HU_MAX));
        Ok(Self {
            volume_id: volume_id.into(),
            voxels,
            liver_mask,
            spacing,
        })
    }

    pub fn depth(&self) -> usize {
        self.voxels.dim().0
    }

    pub fn slice_shape(&self) -> (usize, usize) {
        let (_, h, w) = self.voxels.dim();
        (h, w)
    }

    pub fn slice(&self, index: usize) -> ArrayView2<'_, i16> {
        self.voxels.index_axis(Axis(0), index)
    }

    pub fn mask_slice(&self, index: usize) -> Option<ArrayView2<'_, u8>> {
        self.liver_mask.as_ref().map(|m| m.index_axis(Axis(0), index))
    }

    /// Number of nonzero mask pixels in each axial slice.
    pub fn liver_pixel_counts(&self) -> Option<Vec<usize>> {
        self.liver_mask.as_ref().map(|m| {
            m.outer_iter()
                .map(|s| s.iter().filter(|&&v| v != 0).count())
                .collect()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeFormat {
    Raw,
    Nifti,
}

impl VolumeFormat {
    pub fn detect(path: &Path) -> Option<Self> {
        let name = path.file_name()?.to_str()?;
        if name.ends_with(".nii") || name.ends_with(".nii.gz") {
            Some(VolumeFormat::Nifti)
        } else if name.ends_with(".json") {
            Some(VolumeFormat::Raw)
        } else {
            None
        }
    }
}

/// Header of the raw container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub shape: [usize; 3],
    pub dtype: String,
    pub byte_order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<[f64; 3]>,
    /// Only meaningful in the packed single-buffer form.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub mask: bool,
}

impl RawHeader {
    fn validate(&self, offset: u64) -> Result<()> {
        if self.dtype != "int16" {
            return Err(Error::format(offset, format!("unsupported dtype `{}`", self.dtype)));
        }
        if self.byte_order != "little" {
            return Err(Error::format(
                offset,
                format!("unsupported byte order `{}`", self.byte_order),
            ));
        }
        if self.shape.iter().any(|&d| d == 0) {
            return Err(Error::format(offset, format!("empty shape {:?}", self.shape)));
        }
        Ok(())
    }

    fn n_voxels(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Translate a serde_json line/column position into a byte offset of `text`.
fn json_error_offset(text: &[u8], err: &serde_json::Error) -> u64 {
    let mut line = 1;
    let mut offset = 0usize;
    for (i, &b) in text.iter().enumerate() {
        if line == err.line() {
            offset = i;
            break;
        }
        if b == b'\n' {
            line += 1;
        }
    }
    (offset + err.column().saturating_sub(1)) as u64
}

fn parse_header(bytes: &[u8], base_offset: u64) -> Result<RawHeader> {
    let header: RawHeader = serde_json::from_slice(bytes).map_err(|e| {
        Error::format(
            base_offset + json_error_offset(bytes, &e),
            format!("bad volume header: {e}"),
        )
    })?;
    header.validate(base_offset)?;
    Ok(header)
}

fn decode_i16(bytes: &[u8], n: usize, base_offset: u64) -> Result<Vec<i16>> {
    if bytes.len() < n * 2 {
        return Err(Error::format(
            base_offset + bytes.len() as u64,
            format!("voxel blob truncated: expected {} bytes, found {}", n * 2, bytes.len()),
        ));
    }
    Ok(bytes[..n * 2]
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn stem_of(path: &Path) -> String {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_string();
    for ext in [".nii.gz", ".nii", ".json"] {
        if let Some(s) = name.strip_suffix(ext) {
            return s.to_string();
        }
    }
    name
}

/// Paths of the companion blobs of a raw header.
pub fn raw_companions(header_path: &Path) -> (PathBuf, PathBuf) {
    let stem = stem_of(header_path);
    let dir = header_path.parent().unwrap_or(Path::new("."));
    (dir.join(format!("{stem}.bin")), dir.join(format!("{stem}.mask.bin")))
}

fn load_raw(header_path: &Path) -> Result<CtVolume> {
    let header = parse_header(&read_file(header_path)?, 0)?;
    let (data_path, mask_path) = raw_companions(header_path);
    let n = header.n_voxels();
    let [d, h, w] = header.shape;
    let data = read_file(&data_path)?;
    if data.len() != n * 2 {
        return Err(Error::format(
            data.len().min(n * 2) as u64,
            format!(
                "{}: expected {} bytes of int16 voxels, found {}",
                data_path.display(),
                n * 2,
                data.len()
            ),
        ));
    }
    let voxels = Array3::from_shape_vec((d, h, w), decode_i16(&data, n, 0)?)
        .expect("length checked");
    let mask = if mask_path.exists() {
        let m = read_file(&mask_path)?;
        if m.len() != n {
            return Err(Error::Alignment {
                image: vec![d, h, w],
                mask: vec![m.len()],
            });
        }
        Some(Array3::from_shape_vec((d, h, w), m).expect("length checked"))
    } else {
        None
    };
    let id = header.volume_id.clone().unwrap_or_else(|| stem_of(header_path));
    CtVolume::new(id, voxels, mask, header.spacing.unwrap_or([1.0; 3]))
}

fn raw_header_for(volume: &CtVolume, packed: bool) -> RawHeader {
    let (d, h, w) = volume.voxels.dim();
    RawHeader {
        shape: [d, h, w],
        dtype: "int16".into(),
        byte_order: "little".into(),
        volume_id: Some(volume.volume_id.clone()),
        spacing: Some(volume.spacing),
        mask: packed && volume.liver_mask.is_some(),
    }
}

fn voxel_bytes(volume: &CtVolume) -> Vec<u8> {
    volume.voxels.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Write `<dir>/<volume_id>.json` (+ `.bin`, + `.mask.bin`). Returns the header path.
pub fn save_raw(volume: &CtVolume, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header_path = dir.join(format!("{}.json", volume.volume_id));
    let (data_path, mask_path) = raw_companions(&header_path);
    let header = serde_json::to_vec_pretty(&raw_header_for(volume, false))?;
    fs::write(&header_path, header).map_err(|e| Error::io(&header_path, e))?;
    fs::write(&data_path, voxel_bytes(volume)).map_err(|e| Error::io(&data_path, e))?;
    if let Some(mask) = &volume.liver_mask {
        let bytes: Vec<u8> = mask.iter().copied().collect();
        fs::write(&mask_path, bytes).map_err(|e| Error::io(&mask_path, e))?;
    }
    Ok(header_path)
}

/// Single-buffer form of the raw container used for uploads:
/// `u32 LE header length | header JSON | i16 voxels | [u8 mask]`.
pub fn encode_packed(volume: &CtVolume) -> Vec<u8> {
    let header = serde_json::to_vec(&raw_header_for(volume, true)).expect("header serializes");
    let mut out = Vec::with_capacity(4 + header.len() + volume.voxels.len() * 3);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&voxel_bytes(volume));
    if let Some(mask) = &volume.liver_mask {
        out.extend(mask.iter().copied());
    }
    out
}

pub fn decode_packed(bytes: &[u8]) -> Result<CtVolume> {
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len() as u64, "missing header length prefix"));
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    let body = &bytes[4..];
    if body.len() < hlen {
        return Err(Error::format(bytes.len() as u64, "header truncated"));
    }
    let header = parse_header(&body[..hlen], 4)?;
    let id = header
        .volume_id
        .clone()
        .ok_or_else(|| Error::format(4, "packed volume needs a volume_id"))?;
    let n = header.n_voxels();
    let data_start = 4 + hlen;
    let data = &bytes[data_start..];
    let voxels = decode_i16(data, n, data_start as u64)?;
    let rest = &data[n * 2..];
    let expected_rest = if header.mask { n } else { 0 };
    if rest.len() != expected_rest {
        return Err(Error::format(
            (data_start + n * 2 + rest.len().min(expected_rest)) as u64,
            format!("expected {expected_rest} mask bytes, found {}", rest.len()),
        ));
    }
    let [d, h, w] = header.shape;
    let voxels = Array3::from_shape_vec((d, h, w), voxels).expect("length checked");
    let mask = header
        .mask
        .then(|| Array3::from_shape_vec((d, h, w), rest.to_vec()).expect("length checked"));
    CtVolume::new(id, voxels, mask, header.spacing.unwrap_or([1.0; 3]))
}

// --- NIfTI-1 -----------------------------------------------------------------

const NIFTI_HEADER_LEN: usize = 348;

struct NiftiVolume {
    dims: [usize; 3],
    pixdim: [f64; 3],
    values: Vec<f64>,
}

fn maybe_gunzip(path: &Path, bytes: Vec<u8>) -> Result<Vec<u8>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(0, format!("{}: gzip: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn read_nifti(path: &Path) -> Result<NiftiVolume> {
    let bytes = maybe_gunzip(path, read_file(path)?)?;
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(Error::format(bytes.len() as u64, "NIfTI header truncated"));
    }
    let little = i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == NIFTI_HEADER_LEN as i32;
    if !little && i32::from_be_bytes(bytes[0..4].try_into().unwrap()) != NIFTI_HEADER_LEN as i32 {
        return Err(Error::format(0, "sizeof_hdr is not 348"));
    }
    let i16_at = |o: usize| {
        let b = [bytes[o], bytes[o + 1]];
        if little {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    };
    let f32_at = |o: usize| {
        let b: [u8; 4] = bytes[o..o + 4].try_into().unwrap();
        if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    let magic = &bytes[344..348];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(Error::format(344, "bad NIfTI magic"));
    }
    let ndim = i16_at(40);
    if !(3..=7).contains(&ndim) {
        return Err(Error::format(40, format!("unsupported dimensionality {ndim}")));
    }
    let mut dims = [0usize; 3];
    for (k, d) in dims.iter_mut().enumerate() {
        let v = i16_at(42 + 2 * k);
        if v <= 0 {
            return Err(Error::format(42 + 2 * k as u64, format!("bad dim {v}")));
        }
        *d = v as usize;
    }
    for k in 3..ndim as usize {
        if i16_at(42 + 2 * k) > 1 {
            return Err(Error::format(42 + 2 * k as u64, "only single 3-D volumes are supported"));
        }
    }
    let datatype = i16_at(70);
    let pixdim = [f32_at(80) as f64, f32_at(84) as f64, f32_at(88) as f64];
    let vox_offset = f32_at(108).max(352.0) as usize;
    let slope = f32_at(112) as f64;
    let inter = f32_at(116) as f64;
    let n = dims.iter().product::<usize>();
    let width = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 => 4,
        64 => 8,
        other => return Err(Error::format(70, format!("unsupported NIfTI datatype {other}"))),
    };
    let data = bytes.get(vox_offset..).unwrap_or_default();
    if data.len() < n * width {
        return Err(Error::format(
            (vox_offset + data.len()) as u64,
            format!("voxel data truncated: expected {} bytes", n * width),
        ));
    }
    let data = &data[..n * width];
    macro_rules! decode {
        ($t:ty) => {
            data.chunks_exact(width)
                .map(|c| {
                    let b = c.try_into().unwrap();
                    (if little { <$t>::from_le_bytes(b) } else { <$t>::from_be_bytes(b) }) as f64
                })
                .collect::<Vec<f64>>()
        };
    }
    let mut values = match datatype {
        2 => data.iter().map(|&b| b as f64).collect(),
        256 => data.iter().map(|&b| b as i8 as f64).collect(),
        4 => decode!(i16),
        512 => decode!(u16),
        8 => decode!(i32),
        16 => decode!(f32),
        64 => decode!(f64),
        _ => unreachable!(),
    };
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }
    Ok(NiftiVolume {
        dims,
        pixdim,
        values,
    })
}

fn nifti_mask_companion(path: &Path) -> Option<PathBuf> {
    let name = path.file_name()?.to_str()?;
    let dir = path.parent()?;
    if dir.file_name().and_then(|n| n.to_str()) == Some("imagesTr") {
        let p = dir.parent()?.join("labelsTr").join(name);
        if p.exists() {
            return Some(p);
        }
    }
    let stem = stem_of(path);
    ["nii.gz", "nii"]
        .iter()
        .map(|ext| dir.join(format!("{stem}_mask.{ext}")))
        .find(|p| p.exists())
}

fn load_nifti(path: &Path) -> Result<CtVolume> {
    let img = read_nifti(path)?;
    // x varies fastest, so the row-major shape is (z, y, x).
    let shape = (img.dims[2], img.dims[1], img.dims[0]);
    let voxels = Array3::from_shape_vec(shape, img.values.iter().map(|&v| saturate_hu(v)).collect())
        .expect("length checked");
    let mask = match nifti_mask_companion(path) {
        Some(mp) => {
            let m = read_nifti(&mp)?;
            if m.dims != img.dims {
                return Err(Error::Alignment {
                    image: vec![shape.0, shape.1, shape.2],
                    mask: vec![m.dims[2], m.dims[1], m.dims[0]],
                });
            }
            let bits = m.values.iter().map(|&v| u8::from(v != 0.0)).collect();
            Some(Array3::from_shape_vec(shape, bits).expect("length checked"))
        }
        None => None,
    };
    let spacing = [img.pixdim[2], img.pixdim[1], img.pixdim[0]]
        .map(|s| if s.is_finite() && s > 0.0 { s } else { 1.0 });
    CtVolume::new(stem_of(path), voxels, mask, spacing)
}

/// Load a volume and, if present, its companion liver mask.
pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<CtVolume> {
    match format {
        VolumeFormat::Raw => load_raw(path),
        VolumeFormat::Nifti => load_nifti(path),
    }
}

/// A volume file found on disk, not yet loaded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeSource {
    pub volume_id: String,
    pub path: PathBuf,
    pub format: VolumeFormat,
}

impl VolumeSource {
    pub fn load(&self) -> Result<CtVolume> {
        let mut v = load_volume(&self.path, self.format)?;
        v.volume_id = self.volume_id.clone();
        Ok(v)
    }
}

/// Compare ids so that embedded digit runs sort numerically (`liver_2 < liver_10`).
pub fn natural_cmp(a: &str, b: &str) -> std::cmp::Ordering {
    fn chunks(s: &str) -> Vec<(bool, &str)> {
        let mut out = Vec::new();
        let mut start = 0;
        let bytes = s.as_bytes();
        for i in 1..=bytes.len() {
            if i == bytes.len() || bytes[i].is_ascii_digit() != bytes[start].is_ascii_digit() {
                out.push((bytes[start].is_ascii_digit(), &s[start..i]));
                start = i;
            }
        }
        out
    }
    let (ca, cb) = (chunks(a), chunks(b));
    for ((da, sa), (db, sb)) in ca.iter().zip(cb.iter()) {
        let ord = if *da && *db {
            let (ta, tb) = (sa.trim_start_matches('0'), sb.trim_start_matches('0'));
            ta.len().cmp(&tb.len()).then_with(|| ta.cmp(tb))
        } else {
            sa.cmp(sb)
        };
        if ord.is_ne() {
            return ord;
        }
    }
    ca.len().cmp(&cb.len()).then_with(|| a.cmp(b))
}

/// Find every volume under `dir`, ordered by volume id.
///
/// A Decathlon-style `imagesTr/` subdirectory takes precedence; otherwise raw
/// headers and NIfTI files directly inside `dir` are used.
pub fn discover_volumes(dir: &Path) -> Result<Vec<VolumeSource>> {
    if !dir.is_dir() {
        return Err(Error::invalid(format!("{} is not a directory", dir.display())));
    }
    let images_tr = dir.join("imagesTr");
    let scan = if images_tr.is_dir() { images_tr } else { dir.to_path_buf() };
    let mut out = Vec::new();
    for entry in fs::read_dir(&scan).map_err(|e| Error::io(&scan, e))? {
        let path = entry.map_err(|e| Error::io(&scan, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        // AppleDouble files ship inside the Decathlon archives.
        if name.starts_with("._") || name.starts_with('.') {
            continue;
        }
        let Some(format) = VolumeFormat::detect(&path) else {
            continue;
        };
        let stem = stem_of(&path);
        if stem.ends_with("_mask") {
            continue;
        }
        if format == VolumeFormat::Raw && !raw_companions(&path).0.exists() {
            // some other JSON file (manifest, config, ...)
            continue;
        }
        let volume_id = if format == VolumeFormat::Raw {
            parse_header(&read_file(&path)?, 0)?.volume_id.unwrap_or(stem)
        } else {
            stem
        };
        out.push(VolumeSource {
            volume_id,
            path,
            format,
        });
    }
    out.sort_by(|a, b| natural_cmp(&a.volume_id, &b.volume_id));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn synthetic(d: usize) -> CtVolume {
        let voxels = Array3::from_shape_fn((d, 4, 4), |(z, y, x)| (z * 100 + y * 10 + x) as i16 - 50);
        let mask = Array3::from_shape_fn((d, 4, 4), |(z, y, _)| u8::from(z % 2 == 0 && y > 1));
        CtVolume::new("vol_a", voxels, Some(mask), [2.5, 0.7, 0.7]).unwrap()
    }

    #[test]
    fn raw_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = synthetic(4);
        let p = save_raw(&v, dir.path()).unwrap();
        let back = load_volume(&p, VolumeFormat::Raw).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn saturates_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let header = r#"{"shape":[1,1,2],"dtype":"int16","byte_order":"little"}"#;
        fs::write(dir.path().join("s.json"), header).unwrap();
        let blob: Vec<u8> = [5000i16, -3000].iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.path().join("s.bin"), blob).unwrap();
        let v = load_volume(&dir.path().join("s.json"), VolumeFormat::Raw).unwrap();
        assert_eq!(v.voxels.iter().copied().collect::<Vec<_>>(), vec![3071, -1024]);
        assert_eq!(v.volume_id, "s");
    }

    #[test]
    fn mismatched_mask_is_alignment_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = save_raw(&synthetic(2), dir.path()).unwrap();
        fs::write(raw_companions(&p).1, vec![0u8; 5]).unwrap();
        assert!(matches!(
            load_volume(&p, VolumeFormat::Raw),
            Err(Error::Alignment { .. })
        ));
        let bad = CtVolume::new(
            "x",
            Array3::zeros((2, 3, 3)),
            Some(Array3::zeros((2, 3, 4))),
            [1.0; 3],
        );
        assert!(matches!(bad, Err(Error::Alignment { .. })));
    }

    #[test]
    fn truncated_blob_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = save_raw(&synthetic(2), dir.path()).unwrap();
        let data = raw_companions(&p).0;
        let bytes = fs::read(&data).unwrap();
        fs::write(&data, &bytes[..10]).unwrap();
        match load_volume(&p, VolumeFormat::Raw) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_header_json_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.json"), "{\"shape\": [1,2,3], oops}").unwrap();
        match load_volume(&dir.path().join("b.json"), VolumeFormat::Raw) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 19),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn packed_round_trip_and_truncation() {
        let v = synthetic(3);
        let bytes = encode_packed(&v);
        assert_eq!(decode_packed(&bytes).unwrap(), v);
        let err = decode_packed(&bytes[..bytes.len() - 7]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(decode_packed(&bytes[..3]).is_err());
    }

    fn nifti_bytes(dims: [i16; 3], datatype: i16, payload: &[u8], slope: f32, inter: f32) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        h[40..42].copy_from_slice(&3i16.to_le_bytes());
        for (k, d) in dims.iter().enumerate() {
            h[42 + 2 * k..44 + 2 * k].copy_from_slice(&d.to_le_bytes());
        }
        h[70..72].copy_from_slice(&datatype.to_le_bytes());
        for (k, s) in [0.8f32, 0.8, 2.0].iter().enumerate() {
            h[80 + 4 * k..84 + 4 * k].copy_from_slice(&s.to_le_bytes());
        }
        h[108..112].copy_from_slice(&352f32.to_le_bytes());
        h[112..116].copy_from_slice(&slope.to_le_bytes());
        h[116..120].copy_from_slice(&inter.to_le_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(payload);
        h
    }

    fn gz(bytes: &[u8]) -> Vec<u8> {
        let mut e = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        e.write_all(bytes).unwrap();
        e.finish().unwrap()
    }

    #[test]
    fn nifti_decathlon_layout() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("imagesTr");
        let labels = dir.path().join("labelsTr");
        fs::create_dir_all(&images).unwrap();
        fs::create_dir_all(&labels).unwrap();
        // x=3, y=2, z=2
        let vals: Vec<i16> = (0..12).map(|i| i * 10 - 20).collect();
        let payload: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(images.join("liver_0.nii.gz"), gz(&nifti_bytes([3, 2, 2], 4, &payload, 1.0, 0.0))).unwrap();
        let lab: Vec<u8> = (0..12).map(|i| if i >= 6 { 2 } else { 0 }).collect();
        fs::write(labels.join("liver_0.nii.gz"), gz(&nifti_bytes([3, 2, 2], 2, &lab, 0.0, 0.0))).unwrap();
        fs::write(images.join("._liver_0.nii.gz"), b"junk").unwrap();

        let found = discover_volumes(dir.path()).unwrap();
        assert_eq!(found.len(), 1);
        let v = found[0].load().unwrap();
        assert_eq!(v.volume_id, "liver_0");
        assert_eq!(v.voxels.dim(), (2, 2, 3));
        assert_eq!(v.voxels[[1, 0, 2]], 8 * 10 - 20);
        assert_eq!(v.spacing.map(|s| s as f32), [2.0, 0.8, 0.8]);
        assert_eq!(v.liver_pixel_counts().unwrap(), vec![0, 6]);
    }

    #[test]
    fn nifti_applies_slope_and_saturates() {
        let dir = tempfile::tempdir().unwrap();
        let vals: Vec<u8> = [0u16, 10, 9000, 5].iter().flat_map(|v| v.to_le_bytes()).collect();
        let p = dir.path().join("v.nii");
        fs::write(&p, nifti_bytes([2, 2, 1], 512, &vals, 1.0, -1024.0)).unwrap();
        let v = load_volume(&p, VolumeFormat::Nifti).unwrap();
        assert_eq!(v.voxels.iter().copied().collect::<Vec<_>>(), vec![-1024, -1014, 3071, -1019]);
        assert!(v.liver_mask.is_none());
        fs::write(&p, &nifti_bytes([2, 2, 1], 512, &vals, 1.0, 0.0)[..356]).unwrap();
        assert!(matches!(load_volume(&p, VolumeFormat::Nifti), Err(Error::Format { .. })));
    }

    #[test]
    fn natural_order() {
        let mut ids = vec!["liver_10", "liver_2", "liver_1", "abc"];
        ids.sort_by(|a, b| natural_cmp(a, b));
        assert_eq!(ids, vec!["abc", "liver_1", "liver_2", "liver_10"]);
        assert!(natural_cmp("p_007", "p_7").is_ne());
    }
}
