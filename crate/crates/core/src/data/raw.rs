//! Building datasets from raw raster dumps.
//!
//! A manifest (TOML) describes the grid and names flat little-endian
//! binary files relative to the manifest's directory:
//!
//! ```toml
//! dates = 34
//! bands = 10            # reflectances, ordered as in `preprocess::band`
//! height = 200          # time-series grid
//! width = 300
//! vhsr_channels = 5
//! classes = 13
//! patch = 25
//! series = "series.f32"     # f32, dates x bands x height x width
//! mask = "mask.u8"          # u8, dates x height x width, nonzero = valid
//! vhsr = "vhsr.f32"         # f32, channels x 5*height x 5*width
//! labels = "labels.u16"     # u16, height x width, 65535 = unlabelled
//! objects = "objects.u32"   # u32, height x width
//! reflectance_scale = 10000.0   # optional divisor, default 1
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::dataset::{Dataset, Sample};
use super::preprocess::{band, date_variables, gapfill_linear, VhsrImage, BLOCK, INDEX_NAMES};
use crate::error::{Error, Result};
use crate::grad::Float;

/// Label value marking pixels without ground truth.
pub const UNLABELLED: u16 = u16::MAX;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dates: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub vhsr_channels: usize,
    pub classes: usize,
    pub patch: usize,
    pub series: PathBuf,
    pub mask: PathBuf,
    pub vhsr: PathBuf,
    pub labels: PathBuf,
    pub objects: PathBuf,
    #[serde(default = "unit_scale")]
    pub reflectance_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

/// Reflectances `dates x bands x height x width` with a per-pixel,
/// per-date validity mask `dates x height x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeriesCube {
    pub dates: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<Float>,
    pub valid: Vec<bool>,
}

impl RawSeriesCube {
    pub fn new(
        dates: usize,
        bands: usize,
        height: usize,
        width: usize,
        values: Vec<Float>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let plane = height * width;
        if values.len() != dates * bands * plane || valid.len() != dates * plane {
            return Err(Error::Invalid(format!(
                "cube {dates}x{bands}x{height}x{width} got {} values and {} mask entries",
                values.len(),
                valid.len()
            )));
        }
        Ok(RawSeriesCube {
            dates,
            bands,
            height,
            width,
            values,
            valid,
        })
    }

    /// Gapfilled `dates x (bands + 6)` variables of one pixel.
    pub fn pixel_variables(&self, row: usize, col: usize) -> Result<Vec<Float>> {
        let plane = self.height * self.width;
        let px = row * self.width + col;
        let valid: Vec<bool> = (0..self.dates).map(|t| self.valid[t * plane + px]).collect();
        let mut filled = vec![0.0; self.dates * self.bands];
        for b in 0..self.bands {
            let series: Vec<Float> = (0..self.dates)
                .map(|t| self.values[(t * self.bands + b) * plane + px])
                .collect();
            let f = gapfill_linear(&series, &valid).map_err(|_| {
                Error::NoValidObservation(format!("pixel ({row}, {col}), band {b}"))
            })?;
            for (t, v) in f.into_iter().enumerate() {
                filled[t * self.bands + b] = v;
            }
        }
        let mut out = Vec::with_capacity(self.dates * (self.bands + INDEX_NAMES.len()));
        for date in filled.chunks(self.bands) {
            out.extend(date_variables(date)?);
        }
        Ok(out)
    }
}

/// Per-pixel class (or none) and object id on the time-series grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<Option<usize>>,
    pub objects: Vec<u32>,
}

/// One sample per labelled pixel, in row-major pixel order.
pub fn build_dataset(
    cube: &RawSeriesCube,
    vhsr: &VhsrImage,
    truth: &GroundTruth,
    classes: usize,
    window: usize,
) -> Result<Dataset> {
    if cube.bands != band::COUNT {
        return Err(Error::Invalid(format!(
            "expected {} reflectance bands, got {}",
            band::COUNT,
            cube.bands
        )));
    }
    if (truth.height, truth.width) != (cube.height, cube.width)
        || (vhsr.height, vhsr.width) != (BLOCK * cube.height, BLOCK * cube.width)
    {
        return Err(Error::Invalid(format!(
            "grids disagree: series {}x{}, ground truth {}x{}, VHSR {}x{}",
            cube.height, cube.width, truth.height, truth.width, vhsr.height, vhsr.width
        )));
    }
    let variables = cube.bands + INDEX_NAMES.len();
    let mut ds = Dataset::new(cube.dates, variables, window, vhsr.channels, classes);
    for row in 0..cube.height {
        for col in 0..cube.width {
            let px = row * cube.width + col;
            let Some(label) = truth.labels[px] else { continue };
            ds.push(Sample {
                ts: cube.pixel_variables(row, col)?,
                patch: vhsr.extract_patch(row, col, window)?,
                label,
                object: truth.objects[px],
            })?;
        }
    }
    Ok(ds)
}

fn read_file(dir: &Path, name: &Path, expected: usize, what: &str) -> Result<Vec<u8>> {
    let bytes = fs::read(dir.join(name))?;
    if bytes.len() != expected {
        return Err(Error::Truncated(format!(
            "{what} file {} has {} bytes, expected {expected}",
            name.display(),
            bytes.len()
        )));
    }
    Ok(bytes)
}

fn f32s(bytes: &[u8], scale: f64) -> Vec<Float> {
    bytes
        .chunks_exact(4)
        .map(|c| (f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64 / scale) as Float)
        .collect()
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::MalformedHeader(format!("manifest: {e}")))
}

/// Reads every raster named by the manifest at `path` and builds one
/// sample per labelled pixel.
pub fn load_raw(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let m = read_manifest(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let plane = m.height * m.width;
    let vplane = BLOCK * BLOCK * plane;
    let series = read_file(dir, &m.series, 4 * m.dates * m.bands * plane, "series")?;
    let mask = read_file(dir, &m.mask, m.dates * plane, "mask")?;
    let vhsr = read_file(dir, &m.vhsr, 4 * m.vhsr_channels * vplane, "VHSR")?;
    let labels = read_file(dir, &m.labels, 2 * plane, "labels")?;
    let objects = read_file(dir, &m.objects, 4 * plane, "objects")?;

    let cube = RawSeriesCube::new(
        m.dates,
        m.bands,
        m.height,
        m.width,
        f32s(&series, m.reflectance_scale),
        mask.iter().map(|&v| v != 0).collect(),
    )?;
    let vhsr = VhsrImage::new(m.vhsr_channels, BLOCK * m.height, BLOCK * m.width, f32s(&vhsr, 1.0))?;
    let labels = labels
        .chunks_exact(2)
        .map(|c| match u16::from_le_bytes([c[0], c[1]]) {
            UNLABELLED => None,
            l => Some(l as usize),
        })
        .collect();
    let objects = objects
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let truth = GroundTruth {
        height: m.height,
        width: m.width,
        labels,
        objects,
    };
    build_dataset(&cube, &vhsr, &truth, m.classes, m.patch)
}
