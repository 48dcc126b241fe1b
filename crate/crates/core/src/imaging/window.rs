use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound of the stored Hounsfield range (12-bit CT convention).
pub const HU_MIN: i16 = -1024;
/// Upper bound of the stored Hounsfield range.
pub const HU_MAX: i16 = 3071;

/// Saturate a raw value into `[HU_MIN, HU_MAX]`.
#[inline]
pub fn saturate_hu(v: f64) -> i16 {
    if v.is_nan() {
        return HU_MIN;
    }
    v.round().clamp(HU_MIN as f64, HU_MAX as f64) as i16
}

/// A Hounsfield interval `[low, high]` with `low < high`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "(i32, i32)", into = "(i32, i32)")]
pub struct ClipWindow {
    low: i32,
    high: i32,
}

impl ClipWindow {
    /// Narrow liver window, 50 to 150 HU.
    pub const NARROW: ClipWindow = ClipWindow { low: 50, high: 150 };
    /// Wide abdominal window, -200 to 300 HU. Also used at test time.
    pub const WIDE: ClipWindow = ClipWindow {
        low: -200,
        high: 300,
    };

    pub fn new(low: i32, high: i32) -> Result<Self> {
        if low >= high {
            return Err(Error::invalid(format!(
                "degenerate clip window: low ({low}) must be below high ({high})"
            )));
        }
        Ok(Self { low, high })
    }

    pub fn low(&self) -> i32 {
        self.low
    }

    pub fn high(&self) -> i32 {
        self.high
    }

    pub fn width(&self) -> f64 {
        (self.high - self.low) as f64
    }

    /// Map a single HU value into `[0, 1]`.
    #[inline]
    pub fn scale(&self, hu: f64) -> f64 {
        let low = self.low as f64;
        (hu.clamp(low, self.high as f64) - low) / self.width()
    }

    /// Inverse of [`scale`](Self::scale) on `[0, 1]`.
    #[inline]
    pub fn unscale(&self, v: f64) -> f64 {
        v * self.width() + self.low as f64
    }
}

impl TryFrom<(i32, i32)> for ClipWindow {
    type Error = Error;

    fn try_from((low, high): (i32, i32)) -> Result<Self> {
        ClipWindow::new(low, high)
    }
}

impl From<ClipWindow> for (i32, i32) {
    fn from(w: ClipWindow) -> Self {
        (w.low, w.high)
    }
}

impl std::fmt::Display for ClipWindow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.low, self.high)
    }
}

impl std::str::FromStr for ClipWindow {
    type Err = Error;

    /// Accepts `narrow`, `wide`, or `low,high`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "narrow" => Ok(ClipWindow::NARROW),
            "wide" => Ok(ClipWindow::WIDE),
            other => {
                let (lo, hi) = other
                    .split_once(',')
                    .ok_or_else(|| Error::invalid(format!("bad window `{s}`")))?;
                let parse = |t: &str| {
                    t.trim()
                        .parse::<i32>()
                        .map_err(|_| Error::invalid(format!("bad window bound `{t}`")))
                };
                ClipWindow::new(parse(lo)?, parse(hi)?)
            }
        }
    }
}

/// Clamp every pixel into the window and min-max scale it to `[0, 1]`.
pub fn clip_and_scale<T>(hu: ArrayView2<'_, T>, window: ClipWindow) -> Array2<f64>
where
    T: Copy + Into<f64>,
{
    hu.mapv(|v| window.scale(v.into()))
}

/// Stack a single-channel image three times into a `(3, H, W)` pseudo-RGB image.
pub fn pseudo_rgb(img: ArrayView2<'_, f64>) -> Array3<f64> {
    let plane = img.insert_axis(Axis(0));
    ndarray::concatenate(Axis(0), &[plane, plane, plane]).expect("equal plane shapes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn one(hu: i16, w: ClipWindow) -> f64 {
        clip_and_scale(array![[hu]].view(), w)[[0, 0]]
    }

    #[test]
    fn named_windows() {
        assert_eq!((ClipWindow::NARROW.low(), ClipWindow::NARROW.high()), (50, 150));
        assert_eq!((ClipWindow::WIDE.low(), ClipWindow::WIDE.high()), (-200, 300));
    }

    #[test]
    fn scale_examples() {
        assert_eq!(one(400, ClipWindow::WIDE), 1.0);
        assert_eq!(one(50, ClipWindow::NARROW), 0.0);
        assert_eq!(one(50, ClipWindow::WIDE), 0.5);
    }

    #[test]
    fn degenerate_window_rejected() {
        assert!(matches!(ClipWindow::new(10, 10), Err(Error::InvalidArgument(_))));
        assert!(ClipWindow::new(150, 50).is_err());
        assert!(serde_json::from_str::<ClipWindow>("[5, 1]").is_err());
        let w: ClipWindow = serde_json::from_str("[-200, 300]").unwrap();
        assert_eq!(w, ClipWindow::WIDE);
    }

    #[test]
    fn parse_window() {
        assert_eq!("narrow".parse::<ClipWindow>().unwrap(), ClipWindow::NARROW);
        assert_eq!("-200,300".parse::<ClipWindow>().unwrap(), ClipWindow::WIDE);
        assert!("3,1".parse::<ClipWindow>().is_err());
    }

    #[test]
    fn pseudo_rgb_replicates_channels() {
        let img = array![[0.3]];
        let rgb = pseudo_rgb(img.view());
        assert_eq!(rgb.shape(), &[3, 1, 1]);
        for c in 0..3 {
            assert_eq!(rgb[[c, 0, 0]], 0.3);
        }
        let zeros = Array2::<f64>::zeros((4, 5));
        let rgb = pseudo_rgb(zeros.view());
        assert_eq!(rgb.shape(), &[3, 4, 5]);
        assert!(rgb.iter().all(|&v| v == 0.0));
    }

    fn window_strategy() -> impl Strategy<Value = ClipWindow> {
        (-1024i32..3000, 1i32..2000).prop_map(|(lo, w)| ClipWindow::new(lo, lo + w).unwrap())
    }

    proptest! {
        #[test]
        fn output_in_unit_interval(
            w in window_strategy(),
            px in proptest::collection::vec(HU_MIN..=HU_MAX, 1..64),
        ) {
            let n = px.len();
            let a = Array2::from_shape_vec((1, n), px).unwrap();
            let out = clip_and_scale(a.view(), w);
            prop_assert_eq!(out.shape(), a.shape());
            prop_assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn monotone_in_hu(w in window_strategy(), a in HU_MIN..=HU_MAX, b in HU_MIN..=HU_MAX) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(one(lo, w) <= one(hi, w));
        }

        #[test]
        fn rewindowing_is_noop(
            w in window_strategy(),
            px in proptest::collection::vec(HU_MIN..=HU_MAX, 1..64),
        ) {
            let n = px.len();
            let a = Array2::from_shape_vec((1, n), px).unwrap();
            let once = clip_and_scale(a.view(), w);
            let back = once.mapv(|v| w.unscale(v));
            let twice = clip_and_scale(back.view(), w);
            for (x, y) in once.iter().zip(twice.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
