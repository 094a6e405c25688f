//! In-memory samples and the dataset file format.
//!
//! All integers and floats are little-endian, floats 32-bit.
//!
//! ```text
//! magic     b"M3FD"
//! version   u16                          (currently 1)
//! header    count u64, N u16, B u16, P u16, CH u16, C u16
//! record    label u16, object u32, ts f32 x N*B (date-major), patch f32 x CH*P*P
//! bounds    present u8; if 1: B x (min f32, max f32), then CH x (min f32, max f32)
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::fusion::{Batch, Dims};
use crate::grad::{Float, Tensor};

pub const MAGIC: &[u8; 4] = b"M3FD";
pub const VERSION: u16 = 1;

/// One labelled pixel: its time series and the image patch around it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `dates x variables`, date-major.
    pub ts: Vec<Float>,
    /// `channels x patch x patch`.
    pub patch: Vec<Float>,
    pub label: usize,
    pub object: u32,
}

/// Per-variable and per-channel `(min, max)` used for normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Bounds {
    pub ts: Vec<(Float, Float)>,
    pub patch: Vec<(Float, Float)>,
}

/// Samples sharing one layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dates: usize,
    pub variables: usize,
    pub patch: usize,
    pub channels: usize,
    pub classes: usize,
    pub samples: Vec<Sample>,
    pub bounds: Option<Bounds>,
}

impl Dataset {
    pub fn new(dates: usize, variables: usize, patch: usize, channels: usize, classes: usize) -> Self {
        Dataset {
            dates,
            variables,
            patch,
            channels,
            classes,
            samples: Vec::new(),
            bounds: None,
        }
    }

    /// An empty dataset with the same layout.
    pub fn like(&self) -> Self {
        Dataset {
            samples: Vec::new(),
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ts_len(&self) -> usize {
        self.dates * self.variables
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn push(&mut self, sample: Sample) -> Result<()> {
        if sample.ts.len() != self.ts_len() || sample.patch.len() != self.patch_len() {
            return Err(Error::Invalid(format!(
                "sample has {} series and {} patch values, layout needs {} and {}",
                sample.ts.len(),
                sample.patch.len(),
                self.ts_len(),
                self.patch_len()
            )));
        }
        if sample.label >= self.classes {
            return Err(Error::LabelOutOfRange {
                label: sample.label,
                classes: self.classes,
            });
        }
        self.samples.push(sample);
        Ok(())
    }

    /// Subset in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.like()
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Model dims with this dataset's input layout.
    pub fn model_dims(&self, template: Dims) -> Dims {
        Dims {
            classes: self.classes,
            channels: self.channels,
            patch: self.patch,
            dates: self.dates,
            variables: self.variables,
            ..template
        }
    }

    /// Stacks the given samples into a model batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let n = indices.len();
        let mut ts = Vec::with_capacity(n * self.ts_len());
        let mut patch = Vec::with_capacity(n * self.patch_len());
        let mut labels = Vec::with_capacity(n);
        for &i in indices {
            let s = &self.samples[i];
            ts.extend_from_slice(&s.ts);
            patch.extend_from_slice(&s.patch);
            labels.push(s.label);
        }
        Batch {
            ts: Tensor::new([n, self.dates, self.variables], ts).expect("dataset layout"),
            patch: Tensor::new([n, self.channels, self.patch, self.patch], patch).expect("dataset layout"),
            labels,
        }
    }

    pub fn all(&self) -> Batch {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let small = |v: usize, what: &str| {
            u16::try_from(v).map_err(|_| Error::Invalid(format!("{what} {v} does not fit the file header")))
        };
        w.write_all(MAGIC)?;
        w.write_u16::<LE>(VERSION)?;
        w.write_u64::<LE>(self.len() as u64)?;
        w.write_u16::<LE>(small(self.dates, "date count")?)?;
        w.write_u16::<LE>(small(self.variables, "variable count")?)?;
        w.write_u16::<LE>(small(self.patch, "patch size")?)?;
        w.write_u16::<LE>(small(self.channels, "channel count")?)?;
        w.write_u16::<LE>(small(self.classes, "class count")?)?;
        for s in &self.samples {
            w.write_u16::<LE>(s.label as u16)?;
            w.write_u32::<LE>(s.object)?;
            for &v in s.ts.iter().chain(&s.patch) {
                w.write_f32::<LE>(v as f32)?;
            }
        }
        match &self.bounds {
            None => w.write_u8(0)?,
            Some(b) => {
                w.write_u8(1)?;
                for &(lo, hi) in b.ts.iter().chain(&b.patch) {
                    w.write_f32::<LE>(lo as f32)?;
                    w.write_f32::<LE>(hi as f32)?;
                }
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Dataset> {
        let eof = |what: &'static str| {
            move |e: io::Error| {
                if e.kind() == io::ErrorKind::UnexpectedEof {
                    Error::Truncated(what.into())
                } else {
                    Error::Io(e)
                }
            }
        };
        let header = eof("dataset header");
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(header)?;
        if &magic != MAGIC {
            return Err(Error::BadMagic { expected: "M3FD" });
        }
        let version = r.read_u16::<LE>().map_err(header)?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.read_u64::<LE>().map_err(header)?;
        let mut fields = [0usize; 5];
        for f in &mut fields {
            *f = r.read_u16::<LE>().map_err(header)? as usize;
        }
        let [dates, variables, patch, channels, classes] = fields;
        if fields.contains(&0) {
            return Err(Error::MalformedHeader(format!(
                "zero dimension in N={dates} B={variables} P={patch} CH={channels} C={classes}"
            )));
        }
        let mut ds = Dataset::new(dates, variables, patch, channels, classes);
        let body = eof("dataset sample records");
        let mut buf = vec![0f32; ds.ts_len() + ds.patch_len()];
        for i in 0..count {
            let label = r.read_u16::<LE>().map_err(body)? as usize;
            let object = r.read_u32::<LE>().map_err(body)?;
            r.read_f32_into::<LE>(&mut buf).map_err(body)?;
            if label >= classes {
                return Err(Error::MalformedHeader(format!(
                    "record {i} has label {label} but the header declares {classes} classes"
                )));
            }
            let (ts, p) = buf.split_at(ds.ts_len());
            ds.samples.push(Sample {
                ts: ts.iter().map(|&v| v as Float).collect(),
                patch: p.iter().map(|&v| v as Float).collect(),
                label,
                object,
            });
        }
        let tail = eof("dataset bounds block");
        ds.bounds = match r.read_u8().map_err(tail)? {
            0 => None,
            1 => {
                let mut pairs = vec![0f32; 2 * (variables + channels)];
                r.read_f32_into::<LE>(&mut pairs).map_err(tail)?;
                let pairs: Vec<(Float, Float)> =
                    pairs.chunks(2).map(|p| (p[0] as Float, p[1] as Float)).collect();
                Some(Bounds {
                    ts: pairs[..variables].to_vec(),
                    patch: pairs[variables..].to_vec(),
                })
            }
            flag => return Err(Error::MalformedHeader(format!("bad bounds flag {flag}"))),
        };
        if r.read_u8().is_ok() {
            return Err(Error::MalformedHeader("trailing bytes after bounds block".into()));
        }
        Ok(ds)
    }
}
