//! PNG renders of slices and saliency overlays.

use std::io::Cursor;

use image::{GrayImage, ImageFormat, RgbImage};
use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::imaging::ClipWindow;

fn encode<I: Into<image::DynamicImage>>(img: I) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.into()
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::invalid(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit grayscale pixels of `hu` seen through `window`, row-major.
pub fn window_pixels(hu: ArrayView2<'_, i16>, window: ClipWindow) -> Vec<u8> {
    hu.iter().map(|&v| to_u8(window.scale(v as f64))).collect()
}

/// Grayscale PNG of one slice.
pub fn slice_png(hu: ArrayView2<'_, i16>, window: ClipWindow) -> Result<Vec<u8>> {
    let (h, w) = hu.dim();
    let img = GrayImage::from_raw(w as u32, h as u32, window_pixels(hu, window)).expect("buffer matches shape");
    encode(img)
}

/// Blue (low) to red (high) color for `t` in [0, 1].
fn heat(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [t, 1.0 - (2.0 * t - 1.0).abs(), 1.0 - t]
}

/// Slice in `window` blended with a heat map of `importance`, which must be in
/// [0, 1] and have the slice's shape. `alpha` is the weight of the heat map.
pub fn overlay_png(hu: ArrayView2<'_, i16>, window: ClipWindow, importance: ArrayView2<'_, f64>, alpha: f64) -> Result<Vec<u8>> {
    if hu.dim() != importance.dim() {
        return Err(Error::invalid(format!(
            "slice {:?} and importance map {:?} differ in shape",
            hu.dim(),
            importance.dim()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("overlay alpha must be in [0, 1]"));
    }
    let (h, w) = hu.dim();
    let mut buf = Vec::with_capacity(h * w * 3);
    for (&v, &r) in hu.iter().zip(importance.iter()) {
        let g = window.scale(v as f64);
        for c in heat(r) {
            buf.push(to_u8((1.0 - alpha) * g + alpha * c));
        }
    }
    encode(RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer matches shape"))
}
