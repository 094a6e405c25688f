//! Per-pixel preprocessing: temporal gapfilling, radiometric indices,
//! patch extraction and min-max normalization.

use log::warn;

use super::dataset::{Bounds, Dataset};
use crate::error::{Error, Result};
use crate::grad::Float;

/// Replaces invalid entries by linear interpolation between the nearest
/// valid neighbours (in date-index space). Leading and trailing gaps take
/// the nearest valid value.
pub fn gapfill_linear(values: &[Float], valid: &[bool]) -> Result<Vec<Float>> {
    if values.len() != valid.len() {
        return Err(Error::Invalid(format!(
            "{} values but {} mask entries",
            values.len(),
            valid.len()
        )));
    }
    let known: Vec<usize> = (0..values.len()).filter(|&i| valid[i]).collect();
    let (Some(&first), Some(&last)) = (known.first(), known.last()) else {
        return Err(Error::NoValidObservation(format!(
            "all {} dates masked",
            values.len()
        )));
    };
    let mut out = values.to_vec();
    out[..first].fill(values[first]);
    out[last + 1..].fill(values[last]);
    for pair in known.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (va, vb) = (values[a] as f64, values[b] as f64);
        for (i, o) in out.iter_mut().enumerate().take(b).skip(a + 1) {
            let t = (i - a) as f64 / (b - a) as f64;
            *o = (va + t * (vb - va)) as Float;
        }
    }
    Ok(out)
}

/// Positions of the ten reflectance bands in a per-date vector.
pub mod band {
    pub const BLUE: usize = 0;
    pub const GREEN: usize = 1;
    pub const RED: usize = 2;
    /// First red-edge band.
    pub const RED_EDGE: usize = 3;
    pub const RED_EDGE_2: usize = 4;
    pub const RED_EDGE_3: usize = 5;
    pub const NIR: usize = 6;
    pub const NIR_NARROW: usize = 7;
    pub const SWIR_1: usize = 8;
    pub const SWIR_2: usize = 9;
    pub const COUNT: usize = 10;
}

pub const INDEX_NAMES: [&str; 6] = ["NDVI", "NDWI", "BI", "MNDVI", "MNDWI", "RNDVI"];

/// `(a - b) / (a + b)`, or 0 when the denominator vanishes.
fn normalized_difference(a: f64, b: f64) -> f64 {
    let d = a + b;
    if d == 0.0 {
        0.0
    } else {
        (a - b) / d
    }
}

/// The six indices of one date, in [`INDEX_NAMES`] order, from the ten
/// reflectances ordered as in [`band`]. SWIR enters the mid-infrared
/// indices as the mean of the two SWIR bands.
pub fn compute_indices(bands: &[Float]) -> Result<[Float; 6]> {
    if bands.len() != band::COUNT {
        return Err(Error::Invalid(format!(
            "expected {} reflectances, got {}",
            band::COUNT,
            bands.len()
        )));
    }
    if let Some(b) = bands.iter().position(|&v| !(v >= 0.0)) {
        return Err(Error::Invalid(format!("band {b} has negative reflectance {}", bands[b])));
    }
    let at = |i: usize| bands[i] as f64;
    let (green, red, nir) = (at(band::GREEN), at(band::RED), at(band::NIR));
    let swir = (at(band::SWIR_1) + at(band::SWIR_2)) / 2.0;
    let out = [
        normalized_difference(nir, red),
        normalized_difference(green, nir),
        ((red * red + nir * nir) / 2.0).sqrt(),
        normalized_difference(nir, swir),
        normalized_difference(green, swir),
        normalized_difference(nir, at(band::RED_EDGE)),
    ];
    Ok(out.map(|v| v as Float))
}

/// The per-date variable vector: ten reflectances followed by six indices.
pub fn date_variables(bands: &[Float]) -> Result<Vec<Float>> {
    let mut v = bands.to_vec();
    v.extend(compute_indices(bands)?);
    Ok(v)
}

/// Very high resolution image, `channels x height x width`, on a grid five
/// times finer than the time series.
#[derive(Clone, Debug, PartialEq)]
pub struct VhsrImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<Float>,
}

/// VHSR pixels per time-series pixel along each axis.
pub const BLOCK: usize = 5;

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

impl VhsrImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<Float>) -> Result<Self> {
        if data.len() != channels * height * width || !height.is_multiple_of(BLOCK) || !width.is_multiple_of(BLOCK) {
            return Err(Error::Invalid(format!(
                "VHSR image {channels}x{height}x{width} with {} values (sides must be multiples of {BLOCK})",
                data.len()
            )));
        }
        Ok(VhsrImage {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> Float {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// `window x window` patch centred on the middle of the 5x5 block of
    /// time-series pixel `(row, col)`: VHSR rows `5 row + 2 ± window / 2`.
    /// Out-of-image positions are mirrored.
    pub fn extract_patch(&self, row: usize, col: usize, window: usize) -> Result<Vec<Float>> {
        if row >= self.height / BLOCK || col >= self.width / BLOCK {
            return Err(Error::Invalid(format!(
                "pixel ({row}, {col}) outside the {}x{} series grid",
                self.height / BLOCK,
                self.width / BLOCK
            )));
        }
        if window.is_multiple_of(2) {
            return Err(Error::Invalid(format!("patch window {window} must be odd")));
        }
        let half = (window / 2) as isize;
        let (cy, cx) = ((BLOCK * row + BLOCK / 2) as isize, (BLOCK * col + BLOCK / 2) as isize);
        let mut out = Vec::with_capacity(self.channels * window * window);
        for c in 0..self.channels {
            for dy in -half..=half {
                let y = reflect(cy + dy, self.height);
                for dx in -half..=half {
                    out.push(self.at(c, y, reflect(cx + dx, self.width)));
                }
            }
        }
        Ok(out)
    }
}

fn min_max(values: impl Iterator<Item = Float>) -> (Float, Float) {
    values.fold((Float::INFINITY, Float::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Per-variable and per-channel extremes over all samples of `ds`.
pub fn fit_bounds(ds: &Dataset) -> Bounds {
    let b = ds.variables;
    let area = ds.patch * ds.patch;
    let ts = (0..b)
        .map(|v| min_max(ds.samples.iter().flat_map(|s| s.ts.iter().skip(v).step_by(b).copied())))
        .collect();
    let patch = (0..ds.channels)
        .map(|c| min_max(ds.samples.iter().flat_map(|s| s.patch[c * area..(c + 1) * area].iter().copied())))
        .collect();
    Bounds { ts, patch }
}

fn scale(v: Float, (lo, hi): (Float, Float)) -> Float {
    if hi > lo {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Maps every value to `[0, 1]` with the given bounds, clipping values
/// outside them. Constant bands become 0.
pub fn apply_bounds(ds: &mut Dataset, bounds: &Bounds) -> Result<()> {
    if bounds.ts.len() != ds.variables || bounds.patch.len() != ds.channels {
        return Err(Error::Invalid(format!(
            "bounds for {} variables and {} channels, dataset has {} and {}",
            bounds.ts.len(),
            bounds.patch.len(),
            ds.variables,
            ds.channels
        )));
    }
    let b = ds.variables;
    let area = ds.patch * ds.patch;
    for s in &mut ds.samples {
        for (i, v) in s.ts.iter_mut().enumerate() {
            *v = scale(*v, bounds.ts[i % b]);
        }
        for (i, v) in s.patch.iter_mut().enumerate() {
            *v = scale(*v, bounds.patch[i / area]);
        }
    }
    ds.bounds = Some(bounds.clone());
    Ok(())
}

/// Min-max normalization fitted on `train` and applied to both splits.
pub fn normalize(train: &mut Dataset, test: &mut Dataset) -> Result<Bounds> {
    let bounds = fit_bounds(train);
    for (kind, pairs) in [("variable", &bounds.ts), ("channel", &bounds.patch)] {
        for (i, &(lo, hi)) in pairs.iter().enumerate() {
            if !(hi > lo) {
                warn!("{kind} {i} is constant on the training split; mapped to 0");
            }
        }
    }
    apply_bounds(train, &bounds)?;
    apply_bounds(test, &bounds)?;
    Ok(bounds)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::dataset::Sample;

    const NAN: Float = Float::NAN;

    #[test]
    fn gapfill_examples() {
        let filled = gapfill_linear(&[1.0, NAN, 3.0], &[true, false, true]).unwrap();
        assert_eq!(filled, [1.0, 2.0, 3.0]);
        let filled = gapfill_linear(&[NAN, 5.0, NAN], &[false, true, false]).unwrap();
        assert_eq!(filled, [5.0, 5.0, 5.0]);
        assert!(matches!(
            gapfill_linear(&[1.0, 2.0], &[false, false]),
            Err(Error::NoValidObservation(_))
        ));
        assert!(gapfill_linear(&[1.0], &[true, true]).is_err());
    }

    proptest! {
        #[test]
        fn gapfill_reconstructs_ramps(
            a in -5.0f64..5.0,
            slope in -2.0f64..2.0,
            mask in prop::collection::vec(any::<bool>(), 2..40),
        ) {
            let mut mask = mask;
            let n = mask.len();
            // Keep both ends so no extrapolation is involved.
            mask[0] = true;
            mask[n - 1] = true;
            let ramp: Vec<Float> = (0..n).map(|i| (a + slope * i as f64) as Float).collect();
            let holed: Vec<Float> = ramp.iter().zip(&mask).map(|(&v, &m)| if m { v } else { -999.0 }).collect();
            let filled = gapfill_linear(&holed, &mask).unwrap();
            for (f, r) in filled.iter().zip(&ramp) {
                prop_assert!((f - r).abs() < 1e-5 * (1.0 + r.abs()));
            }
        }

        #[test]
        fn gapfill_keeps_valid_and_is_idempotent(
            values in prop::collection::vec(-10.0f32..10.0, 1..30),
            seed_mask in prop::collection::vec(any::<bool>(), 30),
        ) {
            let values: Vec<Float> = values.iter().map(|&v| v as Float).collect();
            let mut mask = seed_mask[..values.len()].to_vec();
            mask[0] = true;
            let filled = gapfill_linear(&values, &mask).unwrap();
            for i in 0..values.len() {
                if mask[i] {
                    prop_assert_eq!(filled[i], values[i]);
                }
            }
            let all = vec![true; values.len()];
            prop_assert_eq!(gapfill_linear(&filled, &all).unwrap(), filled);
        }
    }

    fn bands(red: Float, nir: Float) -> [Float; 10] {
        let mut b = [0.1; 10];
        b[band::RED] = red;
        b[band::NIR] = nir;
        b
    }

    #[test]
    fn index_examples() {
        assert_eq!(compute_indices(&bands(0.4, 0.4)).unwrap()[0], 0.0);
        assert_eq!(compute_indices(&bands(0.0, 0.3)).unwrap()[0], 1.0);
        let bi = compute_indices(&bands(0.3, 0.4)).unwrap()[2];
        assert!((bi as f64 - 0.125f64.sqrt()).abs() < 1e-6);
        assert!((0.125f64.sqrt() - 0.35355).abs() < 1e-5);
        assert_eq!(compute_indices(&[0.0; 10]).unwrap(), [0.0; 6]);
        assert!(compute_indices(&[0.1; 9]).is_err());
        assert!(compute_indices(&bands(-0.1, 0.2)).is_err());
    }

    #[test]
    fn index_formulas_by_hand() {
        let b: [Float; 10] = [0.05, 0.08, 0.06, 0.12, 0.2, 0.25, 0.3, 0.32, 0.18, 0.1];
        let idx = compute_indices(&b).unwrap();
        let swir = (0.18 + 0.1) / 2.0;
        let expected = [
            (0.3 - 0.06) / (0.3 + 0.06),
            (0.08 - 0.3) / (0.08 + 0.3),
            ((0.06f64.powi(2) + 0.3f64.powi(2)) / 2.0).sqrt(),
            (0.3 - swir) / (0.3 + swir),
            (0.08 - swir) / (0.08 + swir),
            (0.3 - 0.12) / (0.3 + 0.12),
        ];
        for (got, want) in idx.iter().zip(expected) {
            assert!((*got as f64 - want).abs() < 1e-6, "{got} vs {want}");
        }
        assert_eq!(date_variables(&b).unwrap().len(), 16);
    }

    /// 2-channel image whose value encodes its coordinates.
    fn coded_image(h: usize, w: usize) -> VhsrImage {
        let data = (0..2 * h * w)
            .map(|i| {
                let (c, y, x) = (i / (h * w), i / w % h, i % w);
                (c * 10000 + y * 100 + x) as Float
            })
            .collect();
        VhsrImage::new(2, h, w, data).unwrap()
    }

    #[test]
    fn patch_spans_block_centre_plus_minus_twelve() {
        let img = coded_image(150, 150);
        let p = img.extract_patch(10, 10, 25).unwrap();
        assert_eq!(p.len(), 2 * 25 * 25);
        // First row is VHSR row 40, last row 64; first column 40.
        assert_eq!(p[0], (40 * 100 + 40) as Float);
        assert_eq!(p[24 * 25], (64 * 100 + 40) as Float);
        assert_eq!(p[12 * 25 + 12], img.at(0, 52, 52));
        assert_eq!(p[625 + 12 * 25 + 12], img.at(1, 52, 52));
    }

    #[test]
    fn corner_patch_is_mirrored() {
        let img = coded_image(50, 50);
        let p = img.extract_patch(0, 0, 25).unwrap();
        // Centre is VHSR (2, 2); offsets -12..=12.
        for py in 0..25 {
            for px in 0..25 {
                let (y, x) = (py as isize - 10, px as isize - 10);
                let expect_y = y.unsigned_abs();
                let expect_x = x.unsigned_abs();
                assert_eq!(p[py * 25 + px], img.at(0, expect_y, expect_x));
                if y >= 0 && x >= 0 {
                    assert_eq!(p[py * 25 + px], img.at(0, y as usize, x as usize));
                }
            }
        }
    }

    #[test]
    fn adjacent_patches_overlap_by_twenty_columns() {
        let img = coded_image(100, 100);
        let a = img.extract_patch(8, 8, 25).unwrap();
        let b = img.extract_patch(8, 9, 25).unwrap();
        for row in 0..25 {
            assert_eq!(a[row * 25 + 5..row * 25 + 25], b[row * 25..row * 25 + 20]);
        }
    }

    #[test]
    fn patch_errors() {
        let img = coded_image(50, 50);
        assert!(img.extract_patch(10, 0, 25).is_err());
        assert!(img.extract_patch(0, 0, 24).is_err());
        assert!(VhsrImage::new(1, 12, 10, vec![0.0; 120]).is_err());
    }

    fn toy(values: &[Float]) -> Dataset {
        let mut ds = Dataset::new(values.len(), 1, 1, 1, 2);
        ds.push(Sample {
            ts: values.to_vec(),
            patch: vec![values[0]],
            label: 0,
            object: 0,
        })
        .unwrap();
        ds
    }

    #[test]
    fn normalization_examples() {
        let mut train = toy(&[2.0, 4.0, 6.0]);
        let mut test = toy(&[1.0, 4.0, 9.0]);
        let bounds = normalize(&mut train, &mut test).unwrap();
        assert_eq!(bounds.ts, [(2.0, 6.0)]);
        assert_eq!(train.samples[0].ts, [0.0, 0.5, 1.0]);
        assert_eq!(test.samples[0].ts, [0.0, 0.5, 1.0]);
        // single patch value per split: constant channel
        assert_eq!(train.samples[0].patch, [0.0]);
        assert_eq!(train.bounds.as_ref(), Some(&bounds));
        assert_eq!(test.bounds.as_ref(), Some(&bounds));
    }
}
