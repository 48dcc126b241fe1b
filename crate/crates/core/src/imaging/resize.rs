//! Bilinear resampling with half-pixel centres (the `align_corners = false`
//! convention). Sampling positions are clamped to the source region, so values
//! never leave the convex hull of the input.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

/// Rectangular region of an image: `(top, left, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height,
            width,
        }
    }
}

/// Precomputed (index0, index1, frac) triples along one axis.
fn axis_taps(start: usize, len: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let scale = len as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (start + i0, start + i1, src - i0 as f64)
        })
        .collect()
}

pub fn resize_region(img: ArrayView2<'_, f64>, region: Region, out: (usize, usize)) -> Array2<f64> {
    assert!(region.height > 0 && region.width > 0, "empty region");
    assert!(
        region.top + region.height <= img.nrows() && region.left + region.width <= img.ncols(),
        "region out of bounds"
    );
    let rows = axis_taps(region.top, region.height, out.0);
    let cols = axis_taps(region.left, region.width, out.1);
    Array2::from_shape_fn(out, |(y, x)| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
        let bottom = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

pub fn resize(img: ArrayView2<'_, f64>, out: (usize, usize)) -> Array2<f64> {
    let (h, w) = img.dim();
    if (h, w) == out {
        return img.to_owned();
    }
    resize_region(img, Region::full(h, w), out)
}

/// Channel-wise [`resize_region`] for a `(C, H, W)` image.
pub fn resize_region_chw(
    img: ArrayView3<'_, f64>,
    region: Region,
    out: (usize, usize),
) -> Array3<f64> {
    let c = img.dim().0;
    let mut res = Array3::zeros((c, out.0, out.1));
    for (k, plane) in img.outer_iter().enumerate() {
        res.index_axis_mut(ndarray::Axis(0), k)
            .assign(&resize_region(plane, region, out));
    }
    res
}

pub fn resize_chw(img: ArrayView3<'_, f64>, out: (usize, usize)) -> Array3<f64> {
    let (_, h, w) = img.dim();
    if (h, w) == out {
        return img.to_owned();
    }
    resize_region_chw(img, Region::full(h, w), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn same_size_is_identity() {
        let a = array![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]];
        assert_eq!(resize_region(a.view(), Region::full(2, 3), (2, 3)), a);
    }

    #[test]
    fn constant_stays_constant() {
        let a = Array2::from_elem((5, 7), 0.25);
        let r = resize(a.view(), (13, 3));
        assert!(r.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn upsample_2x_interpolates() {
        let a = array![[0.0, 1.0]];
        let r = resize(a.view(), (1, 4));
        // half-pixel centres: -0.25 -> 0, 0.25, 0.75, 1.25 -> 1
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (v, e) in r.iter().zip(expect) {
            assert!((v - e).abs() < 1e-12, "{v} vs {e}");
        }
    }

    #[test]
    fn region_samples_inside() {
        let a = Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f64);
        let r = resize_region(
            a.view(),
            Region {
                top: 1,
                left: 2,
                height: 2,
                width: 2,
            },
            (2, 2),
        );
        assert_eq!(r, array![[6.0, 7.0], [10.0, 11.0]]);
    }
}
