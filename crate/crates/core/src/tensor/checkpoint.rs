//! Flat binary parameter files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "TSC1" | version | count | count x record
//! record = name_len | name (UTF-8) | rank | rank x dim | numel x f32 (LE)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{numel, Module, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TSC1";
pub const VERSION: u32 = 1;

/// A tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf) as usize)
}

pub fn write_records<'a, T: Real>(
    w: &mut impl Write,
    tensors: impl ExactSizeIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION as usize)?;
    put_u32(w, tensors.len())?;
    for (name, t) in tensors {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.shape().len())?;
        for &d in t.shape() {
            put_u32(w, d)?;
        }
        for &v in t.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_records(r: &mut impl Read) -> Result<Vec<Record>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = get_u32(r)?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = get_u32(r)?;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = get_u32(r)?;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rank = get_u32(r)?;
        let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let mut data = vec![0f32; numel(&shape)];
        let mut buf = [0u8; 4];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        records.push(Record { name, shape, data });
    }
    Ok(records)
}

pub fn save<T: Real>(module: &impl Module<T>, path: &Path) -> Result<()> {
    let named = module.named_tensors();
    let mut w = BufWriter::new(File::create(path)?);
    write_records(&mut w, named.iter().map(|(n, t)| (n.as_str(), *t)))?;
    w.flush()?;
    Ok(())
}

/// Overwrites every tensor of `module` with the record of the same name.
/// Trainability flags of the module are kept.
pub fn load_into<T: Real>(module: &mut impl Module<T>, path: &Path) -> Result<()> {
    let records = read_records(&mut BufReader::new(File::open(path)?))?;
    for (name, t) in module.named_tensors_mut() {
        let rec = records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if rec.shape != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?} on disk, expected {:?}",
                rec.shape,
                t.shape()
            )));
        }
        for (dst, &src) in t.data_mut().iter_mut().zip(&rec.data) {
            *dst = T::from_f64_lossy(src as f64);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(&[2, 1], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_records(&mut buf, [("w", &t)].into_iter()).unwrap();
        assert_eq!(&buf[..4], b"TSC1");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(buf[16], b'w');
        assert_eq!(&buf[17..21], &2u32.to_le_bytes());
        assert_eq!(&buf[29..33], &1.5f32.to_le_bytes());
        assert_eq!(buf.len(), 37);
        let back = read_records(&mut buf.as_slice()).unwrap();
        assert_eq!(back[0].shape, vec![2, 1]);
        assert_eq!(back[0].data, vec![1.5, -2.0]);
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00";
        assert!(matches!(read_records(&mut &bytes[..]), Err(Error::Checkpoint(_))));
    }
}
