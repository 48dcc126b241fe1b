//! Loading CT volumes, Hounsfield windowing, and the balanced slice dataset.

mod manifest;
pub mod resize;
mod volume;
mod window;

pub use manifest::{
    build_manifest, build_manifest_from_dir, sample_dataset, sample_slices, slice_id, DatasetManifest, LabelCounts,
    ManifestBuilder, SamplingOptions, SliceRecord, SliceRef, Split, VolumeEntry,
};
pub use volume::{
    decode_packed, discover_volumes, encode_packed, load_volume, natural_cmp, raw_companions,
    save_raw, CtVolume, RawHeader, VolumeFormat, VolumeSource,
};
pub use window::{clip_and_scale, pseudo_rgb, saturate_hu, ClipWindow, HU_MAX, HU_MIN};
