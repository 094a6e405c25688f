//! Model checkpoint files.
//!
//! All integers and floats are little-endian; tensor values are always
//! stored as 32-bit floats.
//!
//! ```text
//! magic      b"M3FC"
//! version    u16                       (currently 1)
//! variant    u8                        0 fusion, 1 rnn only, 2 cnn only
//! seed       u64
//! alpha1     f32
//! alpha2     f32
//! dims       9 x u32                   hidden, classes, channels, patch, dates,
//!                                      variables, widths.first, widths.second, widths.out
//! count      u32                       number of tensor records
//! record     kind u8                   0 parameter, 1 running statistic
//!            name_len u16, name        UTF-8
//!            rank u8, shape rank x u32
//!            values f32 x prod(shape)
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::cnn::CnnWidths;
use crate::error::{Error, Result};
use crate::fusion::{Architecture, Dims, FusionModel, LossWeights, Variant};
use crate::grad::{Float, Tensor};

pub const MAGIC: &[u8; 4] = b"M3FC";
pub const VERSION: u16 = 1;

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;

pub fn save(model: &FusionModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<FusionModel> {
    read(&mut BufReader::new(File::open(path)?))
}

pub fn write(model: &FusionModel, w: &mut impl Write) -> Result<()> {
    let dims = model.dims();
    w.write_all(MAGIC)?;
    w.write_u16::<LE>(VERSION)?;
    w.write_u8(model.variant().code())?;
    w.write_u64::<LE>(model.seed)?;
    w.write_f32::<LE>(model.weights.alpha1 as f32)?;
    w.write_f32::<LE>(model.weights.alpha2 as f32)?;
    for d in [
        dims.hidden,
        dims.classes,
        dims.channels,
        dims.patch,
        dims.dates,
        dims.variables,
        dims.widths.first,
        dims.widths.second,
        dims.widths.out,
    ] {
        w.write_u32::<LE>(d as u32)?;
    }
    let store = &model.store;
    let records: Vec<(u8, &str, &Tensor)> = store
        .params()
        .map(|(n, e)| (KIND_PARAM, n, &e.value))
        .chain(store.buffers().map(|(n, t)| (KIND_BUFFER, n, t)))
        .collect();
    w.write_u32::<LE>(records.len() as u32)?;
    for (kind, name, tensor) in records {
        w.write_u8(kind)?;
        w.write_u16::<LE>(name.len() as u16)?;
        w.write_all(name.as_bytes())?;
        w.write_u8(tensor.rank() as u8)?;
        for &d in tensor.shape() {
            w.write_u32::<LE>(d as u32)?;
        }
        for &v in tensor.data() {
            w.write_f32::<LE>(v as f32)?;
        }
    }
    Ok(())
}

/// Maps an early end of input to [`Error::Truncated`].
fn truncated(what: &'static str) -> impl Fn(io::Error) -> Error {
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::Truncated(what.into())
        } else {
            Error::Io(e)
        }
    }
}

pub fn read(r: &mut impl Read) -> Result<FusionModel> {
    let header = truncated("checkpoint header");
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(&header)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic { expected: "M3FC" });
    }
    let version = r.read_u16::<LE>().map_err(&header)?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let code = r.read_u8().map_err(&header)?;
    let variant = Variant::from_code(code)
        .ok_or_else(|| Error::MalformedHeader(format!("unknown model variant {code}")))?;
    let seed = r.read_u64::<LE>().map_err(&header)?;
    let alpha1 = r.read_f32::<LE>().map_err(&header)? as f64;
    let alpha2 = r.read_f32::<LE>().map_err(&header)? as f64;
    let weights =
        LossWeights::new(alpha1, alpha2).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let mut d = [0usize; 9];
    for v in &mut d {
        *v = r.read_u32::<LE>().map_err(&header)? as usize;
    }
    let dims = Dims {
        hidden: d[0],
        classes: d[1],
        channels: d[2],
        patch: d[3],
        dates: d[4],
        variables: d[5],
        widths: CnnWidths {
            first: d[6],
            second: d[7],
            out: d[8],
        },
    };
    let arch = Architecture::new(dims, variant).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let mut store = arch.init(seed);
    let count = r.read_u32::<LE>().map_err(&header)? as usize;
    let expected = store.len() + store.buffers().count();
    if count != expected {
        return Err(Error::MalformedHeader(format!(
            "{count} tensor records, architecture has {expected}"
        )));
    }
    let body = truncated("checkpoint tensor records");
    for _ in 0..count {
        let kind = r.read_u8().map_err(&body)?;
        let len = r.read_u16::<LE>().map_err(&body)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(&body)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::MalformedHeader("tensor name is not UTF-8".into()))?;
        let rank = r.read_u8().map_err(&body)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LE>().map_err(&body)? as usize);
        }
        let target = match kind {
            KIND_PARAM if store.contains(&name) => store.value_mut(&name)?,
            KIND_BUFFER => store
                .buffer_mut(&name)
                .map_err(|_| Error::MalformedHeader(format!("unexpected buffer `{name}`")))?,
            _ => return Err(Error::MalformedHeader(format!("unexpected record `{name}`"))),
        };
        if target.shape() != shape.as_slice() {
            return Err(Error::MalformedHeader(format!(
                "`{name}` has shape {shape:?}, architecture expects {:?}",
                target.shape()
            )));
        }
        for v in target.data_mut() {
            *v = r.read_f32::<LE>().map_err(&body)? as Float;
        }
    }
    if r.read_u8().is_ok() {
        return Err(Error::MalformedHeader("trailing bytes after last record".into()));
    }
    Ok(FusionModel {
        arch,
        store,
        weights,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::CnnWidths;

    fn small() -> FusionModel {
        let dims = Dims {
            hidden: 6,
            classes: 3,
            channels: 2,
            patch: 13,
            dates: 4,
            variables: 3,
            widths: CnnWidths {
                first: 3,
                second: 4,
                out: 5,
            },
        };
        let mut m = FusionModel::new(dims, Variant::Fusion, LossWeights::new(0.25, 0.5).unwrap(), 9).unwrap();
        // Make the buffers distinguishable from a fresh init.
        let name = m.arch.cnn.as_ref().unwrap().block1.running_var();
        m.store.buffer_mut(&name).unwrap().data_mut()[1] = 3.5;
        m
    }

    fn bytes(model: &FusionModel) -> Vec<u8> {
        let mut buf = Vec::new();
        write(model, &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_exact() {
        let m = small();
        let back = read(&mut bytes(&m).as_slice()).unwrap();
        assert_eq!(back.arch, m.arch);
        assert_eq!(back.seed, 9);
        assert_eq!(back.weights, m.weights);
        // Values are stored as f32, which is lossless in the default build.
        let stored = |t: &Tensor| t.map(|v| v as f32 as Float);
        for (name, e) in m.store.params() {
            assert_eq!(back.store.value(name).unwrap(), &stored(&e.value), "{name}");
        }
        for (name, t) in m.store.buffers() {
            assert_eq!(back.store.buffer(name).unwrap(), &stored(t), "{name}");
        }
    }

    #[test]
    fn header_layout() {
        let b = bytes(&small());
        assert_eq!(&b[..4], b"M3FC");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), VERSION);
        assert_eq!(b[6], 0);
        assert_eq!(u64::from_le_bytes(b[7..15].try_into().unwrap()), 9);
        assert_eq!(f32::from_le_bytes(b[15..19].try_into().unwrap()), 0.25);
        // hidden, then classes
        assert_eq!(u32::from_le_bytes(b[23..27].try_into().unwrap()), 6);
        assert_eq!(u32::from_le_bytes(b[27..31].try_into().unwrap()), 3);
    }

    #[test]
    fn distinct_errors() {
        let b = bytes(&small());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(read(&mut bad.as_slice()), Err(Error::BadMagic { .. })));
        let mut bad = b.clone();
        bad[4] = 7;
        assert!(matches!(read(&mut bad.as_slice()), Err(Error::Version { found: 7, .. })));
        assert!(matches!(read(&mut &b[..b.len() - 3]), Err(Error::Truncated(_))));
        assert!(matches!(read(&mut &b[..10]), Err(Error::Truncated(_))));
        let mut bad = b.clone();
        bad[6] = 9;
        assert!(matches!(read(&mut bad.as_slice()), Err(Error::MalformedHeader(_))));
        let mut bad = b;
        bad.push(0);
        assert!(matches!(read(&mut bad.as_slice()), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = small();
        save(&m, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(bytes(&back), bytes(&m));
    }
}
