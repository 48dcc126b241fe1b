//! Balanced slice sampling and the train/test dataset manifest.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::volume::{discover_volumes, natural_cmp, CtVolume, VolumeSource};
use crate::error::{Error, Result};
use crate::seed::derive_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split `{s}`"))),
        }
    }
}

pub fn slice_id(volume_id: &str, slice_index: usize) -> String {
    format!("{volume_id}:{slice_index:04}")
}

/// Provenance of one sampled slice, as stored in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceRef {
    pub slice_id: String,
    pub volume_id: String,
    pub slice_index: usize,
    pub liver_label: bool,
    pub liver_pixels: usize,
    pub split: Split,
}

/// One axial slice with its pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub slice_id: String,
    pub volume_id: String,
    pub slice_index: usize,
    pub hu: Array2<i16>,
    pub liver_label: bool,
    pub liver_mask: Option<Array2<u8>>,
    pub split: Split,
}

impl SliceRecord {
    pub fn from_volume(volume: &CtVolume, slice_index: usize, split: Split, liver_threshold: usize) -> Self {
        let mask = volume.mask_slice(slice_index).map(|m| m.to_owned());
        let liver_pixels = mask
            .as_ref()
            .map_or(0, |m| m.iter().filter(|&&v| v != 0).count());
        Self {
            slice_id: slice_id(&volume.volume_id, slice_index),
            volume_id: volume.volume_id.clone(),
            slice_index,
            hu: volume.slice(slice_index).to_owned(),
            liver_label: liver_pixels > liver_threshold,
            liver_mask: mask,
            split,
        }
    }

    pub fn liver_pixels(&self) -> usize {
        self.liver_mask
            .as_ref()
            .map_or(0, |m| m.iter().filter(|&&v| v != 0).count())
    }

    pub fn to_ref(&self) -> SliceRef {
        SliceRef {
            slice_id: self.slice_id.clone(),
            volume_id: self.volume_id.clone(),
            slice_index: self.slice_index,
            liver_label: self.liver_label,
            liver_pixels: self.liver_pixels(),
            split: self.split,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingOptions {
    pub n_liver: usize,
    pub n_nonliver: usize,
    /// A slice counts as "liver" when its mask has more than this many nonzero pixels.
    pub liver_threshold: usize,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self {
            n_liver: 5,
            n_nonliver: 5,
            liver_threshold: 0,
        }
    }
}

/// Draw `n_liver` slices with liver and `n_nonliver` without, uniformly without
/// replacement within each stratum. Returns [`Error::VolumeSkipped`] when a
/// stratum is too small or the volume has no mask.
pub fn sample_slices(
    volume: &CtVolume,
    opts: SamplingOptions,
    seed: u64,
    split: Split,
) -> Result<Vec<SliceRecord>> {
    let skipped = |reason: String| Error::VolumeSkipped {
        volume_id: volume.volume_id.clone(),
        reason,
    };
    let counts = volume
        .liver_pixel_counts()
        .ok_or_else(|| skipped("no liver mask".into()))?;
    let (liver, nonliver): (Vec<usize>, Vec<usize>) =
        (0..counts.len()).partition(|&i| counts[i] > opts.liver_threshold);
    if liver.len() < opts.n_liver {
        return Err(skipped(format!(
            "{} liver slices, {} required",
            liver.len(),
            opts.n_liver
        )));
    }
    if nonliver.len() < opts.n_nonliver {
        return Err(skipped(format!(
            "{} liver-free slices, {} required",
            nonliver.len(),
            opts.n_nonliver
        )));
    }
    let mut rng: ChaCha8Rng = derive_rng(seed, &["sample_slices", &volume.volume_id]);
    let mut chosen: Vec<usize> = index::sample(&mut rng, liver.len(), opts.n_liver)
        .into_iter()
        .map(|i| liver[i])
        .chain(
            index::sample(&mut rng, nonliver.len(), opts.n_nonliver)
                .into_iter()
                .map(|i| nonliver[i]),
        )
        .collect();
    chosen.sort_unstable();
    Ok(chosen
        .into_iter()
        .map(|i| SliceRecord::from_volume(volume, i, split, opts.liver_threshold))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeEntry {
    pub volume_id: String,
    pub position: usize,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<VolumeSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub liver: usize,
    pub non_liver: usize,
}

impl LabelCounts {
    pub fn total(&self) -> usize {
        self.liver + self.non_liver
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_train_volumes: usize,
    pub sampling: SamplingOptions,
    pub volumes: Vec<VolumeEntry>,
    pub records: Vec<SliceRef>,
    pub counts: BTreeMap<Split, LabelCounts>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SliceRef> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.counts.get(&split).map_or(0, LabelCounts::total)
    }

    /// Canonical serialization: UTF-8 JSON with lexicographically sorted keys.
    pub fn to_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&value)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Re-read the pixels of every record in `split` from the volume sources.
    pub fn load_records(&self, split: Split) -> Result<Vec<SliceRecord>> {
        let mut by_volume: BTreeMap<&str, Vec<&SliceRef>> = BTreeMap::new();
        for r in self.split(split) {
            by_volume.entry(&r.volume_id).or_default().push(r);
        }
        let mut loaded: BTreeMap<String, SliceRecord> = BTreeMap::new();
        for entry in &self.volumes {
            let Some(refs) = by_volume.get(entry.volume_id.as_str()) else {
                continue;
            };
            let source = entry.source.as_ref().ok_or_else(|| {
                Error::invalid(format!("manifest has no source path for {}", entry.volume_id))
            })?;
            let volume = source.load()?;
            for r in refs {
                if r.slice_index >= volume.depth() {
                    return Err(Error::invalid(format!(
                        "{} refers to slice {} but the volume has {}",
                        r.slice_id,
                        r.slice_index,
                        volume.depth()
                    )));
                }
                let rec = SliceRecord::from_volume(&volume, r.slice_index, split, self.sampling.liver_threshold);
                loaded.insert(r.slice_id.clone(), rec);
            }
        }
        self.split(split)
            .map(|r| {
                loaded
                    .remove(&r.slice_id)
                    .ok_or_else(|| Error::NotFound(r.slice_id.clone()))
            })
            .collect()
    }
}

/// Incremental manifest construction over volumes supplied in id order, so
/// that only one volume needs to be resident at a time.
#[derive(Debug)]
pub struct ManifestBuilder {
    seed: u64,
    n_train_volumes: usize,
    sampling: SamplingOptions,
    volumes: Vec<VolumeEntry>,
    records: Vec<SliceRef>,
    warnings: Vec<String>,
}

impl ManifestBuilder {
    pub fn new(n_train_volumes: usize, seed: u64, sampling: SamplingOptions) -> Self {
        Self {
            seed,
            n_train_volumes,
            sampling,
            volumes: Vec::new(),
            records: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Add the next volume. Its split is determined by its position, whether
    /// or not it ends up skipped. Returns the sampled slices (empty when skipped).
    pub fn push(&mut self, volume: &CtVolume, source: Option<VolumeSource>) -> Result<Vec<SliceRecord>> {
        if let Some(last) = self.volumes.last() {
            if natural_cmp(&last.volume_id, &volume.volume_id).is_ge() {
                return Err(Error::invalid(format!(
                    "volumes must be supplied in ascending id order ({} after {})",
                    volume.volume_id, last.volume_id
                )));
            }
        }
        let position = self.volumes.len();
        let split = if position < self.n_train_volumes {
            Split::Train
        } else {
            Split::Test
        };
        let mut entry = VolumeEntry {
            volume_id: volume.volume_id.clone(),
            position,
            split,
            source,
            skipped: None,
        };
        let sampled = match sample_slices(volume, self.sampling, self.seed, split) {
            Ok(recs) => recs,
            Err(Error::VolumeSkipped { volume_id, reason }) => {
                warn!(%volume_id, %reason, "volume skipped");
                self.warnings.push(format!("volume {volume_id} skipped: {reason}"));
                entry.skipped = Some(reason);
                Vec::new()
            }
            Err(e) => return Err(e),
        };
        self.records.extend(sampled.iter().map(SliceRecord::to_ref));
        self.volumes.push(entry);
        Ok(sampled)
    }

    pub fn finish(mut self) -> Result<DatasetManifest> {
        if self.volumes.is_empty() {
            return Err(Error::invalid("no volumes to build a dataset from"));
        }
        let mut counts: BTreeMap<Split, LabelCounts> = BTreeMap::new();
        counts.insert(Split::Train, LabelCounts::default());
        counts.insert(Split::Test, LabelCounts::default());
        for r in &self.records {
            let c = counts.get_mut(&r.split).expect("both splits present");
            if r.liver_label {
                c.liver += 1;
            } else {
                c.non_liver += 1;
            }
        }
        for split in [Split::Train, Split::Test] {
            if counts[&split].total() == 0 {
                let msg = format!("{split} split is empty");
                warn!("{msg}");
                self.warnings.push(msg);
            }
        }
        Ok(DatasetManifest {
            seed: self.seed,
            n_train_volumes: self.n_train_volumes,
            sampling: self.sampling,
            volumes: self.volumes,
            records: self.records,
            counts,
            warnings: self.warnings,
        })
    }
}

/// Build the manifest and keep the sampled slices in memory.
pub fn sample_dataset(
    volumes: &[CtVolume],
    n_train_volumes: usize,
    seed: u64,
    sampling: SamplingOptions,
) -> Result<(DatasetManifest, Vec<SliceRecord>)> {
    let mut ordered: Vec<&CtVolume> = volumes.iter().collect();
    ordered.sort_by(|a, b| natural_cmp(&a.volume_id, &b.volume_id));
    let mut builder = ManifestBuilder::new(n_train_volumes, seed, sampling);
    let mut records = Vec::new();
    for v in ordered {
        records.extend(builder.push(v, None)?);
    }
    Ok((builder.finish()?, records))
}

/// Manifest over every volume found under `dir`, loading one volume at a time.
pub fn build_manifest_from_dir(
    dir: &Path,
    n_train_volumes: usize,
    seed: u64,
    sampling: SamplingOptions,
) -> Result<DatasetManifest> {
    let sources = discover_volumes(dir)?;
    if sources.is_empty() {
        return Err(Error::invalid(format!("no volumes found under {}", dir.display())));
    }
    let mut builder = ManifestBuilder::new(n_train_volumes, seed, sampling);
    for src in sources {
        let volume = src.load()?;
        builder.push(&volume, Some(src))?;
    }
    builder.finish()
}

/// Manifest over in-memory volumes with the default 5 + 5 sampling.
pub fn build_manifest(volumes: &[CtVolume], n_train_volumes: usize, seed: u64) -> Result<DatasetManifest> {
    sample_dataset(volumes, n_train_volumes, seed, SamplingOptions::default()).map(|(m, _)| m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use std::collections::BTreeSet;

    /// `n_liver` liver slices followed by `n_free` liver-free slices.
    fn volume(id: &str, n_liver: usize, n_free: usize) -> CtVolume {
        let d = n_liver + n_free;
        let voxels = Array3::from_shape_fn((d, 4, 4), |(z, _, _)| z as i16);
        let mask = Array3::from_shape_fn((d, 4, 4), |(z, y, x)| u8::from(z < n_liver && y == 1 && x == 2));
        CtVolume::new(id, voxels, Some(mask), [1.0; 3]).unwrap()
    }

    #[test]
    fn samples_balanced_and_reproducible() {
        let v = volume("v", 12, 30);
        let a = sample_slices(&v, SamplingOptions::default(), 7, Split::Train).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a.iter().filter(|r| r.liver_label).count(), 5);
        for r in &a {
            assert_eq!(r.liver_label, r.slice_index < 12);
            assert_eq!(r.hu[[0, 0]] as usize, r.slice_index);
        }
        let b = sample_slices(&v, SamplingOptions::default(), 7, Split::Train).unwrap();
        let idx = |rs: &[SliceRecord]| rs.iter().map(|r| r.slice_index).collect::<Vec<_>>();
        assert_eq!(idx(&a), idx(&b));
        let distinct: BTreeSet<_> = idx(&a).into_iter().collect();
        assert_eq!(distinct.len(), 10);
    }

    #[test]
    fn short_stratum_skips_volume() {
        let v = volume("v", 3, 30);
        assert!(matches!(
            sample_slices(&v, SamplingOptions::default(), 1, Split::Train),
            Err(Error::VolumeSkipped { .. })
        ));
        let unmasked = CtVolume::new("u", Array3::zeros((20, 2, 2)), None, [1.0; 3]).unwrap();
        assert!(matches!(
            sample_slices(&unmasked, SamplingOptions::default(), 1, Split::Train),
            Err(Error::VolumeSkipped { .. })
        ));
    }

    #[test]
    fn threshold_is_configurable() {
        let v = volume("v", 12, 30);
        let opts = SamplingOptions {
            liver_threshold: 1,
            ..Default::default()
        };
        // every liver slice has exactly one mask pixel, so none pass a threshold of 1
        assert!(sample_slices(&v, opts, 1, Split::Train).is_err());
    }

    #[test]
    fn manifest_splits_by_position() {
        let vols: Vec<CtVolume> = (0..13).map(|i| volume(&format!("p{i:02}"), 8, 9)).collect();
        let m = build_manifest(&vols, 10, 3).unwrap();
        assert_eq!(m.count(Split::Train), 100);
        assert_eq!(m.count(Split::Test), 30);
        for split in [Split::Train, Split::Test] {
            assert_eq!(m.counts[&split].liver, m.counts[&split].non_liver);
        }
        for r in m.split(Split::Test) {
            let pos = m.volumes.iter().find(|v| v.volume_id == r.volume_id).unwrap().position;
            assert!(pos >= 10);
        }
        assert_eq!(m.to_json().unwrap(), build_manifest(&vols, 10, 3).unwrap().to_json().unwrap());
    }

    #[test]
    fn skipped_volume_keeps_its_position() {
        let mut vols: Vec<CtVolume> = (0..4).map(|i| volume(&format!("p{i}"), 8, 9)).collect();
        vols[1] = volume("p1", 2, 9);
        let m = build_manifest(&vols, 2, 0).unwrap();
        assert_eq!(m.count(Split::Train), 10);
        assert_eq!(m.count(Split::Test), 20);
        assert!(m.volumes[1].skipped.is_some());
        assert_eq!(m.warnings.len(), 1);
    }

    #[test]
    fn single_volume_warns_about_empty_test() {
        let m = build_manifest(&[volume("only", 6, 6)], 1, 0).unwrap();
        assert_eq!(m.count(Split::Train), 10);
        assert_eq!(m.count(Split::Test), 0);
        assert!(m.warnings.iter().any(|w| w.contains("test split is empty")));
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(build_manifest(&[], 1, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn json_keys_are_sorted() {
        let m = build_manifest(&[volume("a", 6, 6), volume("b", 6, 6)], 1, 9).unwrap();
        let text = m.to_json().unwrap();
        let i_counts = text.find("\"counts\"").unwrap();
        let i_records = text.find("\"records\"").unwrap();
        let i_seed = text.find("\"seed\"").unwrap();
        assert!(i_counts < i_records && i_records < i_seed);
        assert_eq!(DatasetManifest::from_json(&text).unwrap(), m);
    }

    #[test]
    fn builder_rejects_out_of_order() {
        let mut b = ManifestBuilder::new(1, 0, SamplingOptions::default());
        b.push(&volume("b", 6, 6), None).unwrap();
        assert!(b.push(&volume("a", 6, 6), None).is_err());
    }
}
