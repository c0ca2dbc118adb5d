//! Bit-exact tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"ITAH"
//! version u32                      (currently 1)
//! record*:
//!     name_len u32, name utf-8 bytes
//!     ndim u32, dims u64 * ndim
//!     dtype u8                     (0 = f32, 1 = u8)
//!     payload                      (row-major, product(dims) elements)
//! index:
//!     count u32, offsets u64 * count   (offset of each record from file start)
//! index_pos u64                    (offset of the index; last 8 bytes of file)
//! ```
//!
//! Datasets, checkpoints, and mask exports all use this one format so any
//! language can read them back with a page of code.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use ndarray::ArrayD;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ITAH";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(ArrayD<f32>),
    U8(ArrayD<u8>),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(a) => a.shape(),
            TensorData::U8(a) => a.shape(),
        }
    }

    pub fn as_f32(&self) -> Result<&ArrayD<f32>> {
        match self {
            TensorData::F32(a) => Ok(a),
            TensorData::U8(_) => Err(Error::Format("expected f32 tensor, found u8".into())),
        }
    }

    pub fn as_u8(&self) -> Result<&ArrayD<u8>> {
        match self {
            TensorData::U8(a) => Ok(a),
            TensorData::F32(_) => Err(Error::Format("expected u8 tensor, found f32".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub data: TensorData,
}

impl Record {
    pub fn f32<D: ndarray::Dimension>(name: &str, arr: ndarray::Array<f32, D>) -> Self {
        Record { name: name.to_string(), data: TensorData::F32(arr.into_dyn()) }
    }

    pub fn u8<D: ndarray::Dimension>(name: &str, arr: ndarray::Array<u8, D>) -> Self {
        Record { name: name.to_string(), data: TensorData::U8(arr.into_dyn()) }
    }
}

pub fn write(path: &Path, records: &[Record]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let mut pos: u64 = 0;

    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    pos += 8;

    let mut offsets = Vec::with_capacity(records.len());
    for rec in records {
        offsets.push(pos);
        let name = rec.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        pos += 4 + name.len() as u64;

        let shape = rec.data.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        pos += 4;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
            pos += 8;
        }
        match &rec.data {
            TensorData::F32(a) => {
                w.write_all(&[DTYPE_F32])?;
                pos += 1;
                // row-major; arrays are made contiguous before writing
                let a = a.as_standard_layout();
                for v in a.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
                pos += 4 * a.len() as u64;
            }
            TensorData::U8(a) => {
                w.write_all(&[DTYPE_U8])?;
                pos += 1;
                let a = a.as_standard_layout();
                for v in a.iter() {
                    w.write_all(&[*v])?;
                }
                pos += a.len() as u64;
            }
        }
    }

    let index_pos = pos;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for off in &offsets {
        w.write_all(&off.to_le_bytes())?;
    }
    w.write_all(&index_pos.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<Record>> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }

    r.seek(SeekFrom::End(-8))?;
    let index_pos = read_u64(&mut r)?;
    r.seek(SeekFrom::Start(index_pos))?;
    let count = read_u32(&mut r)? as usize;
    let mut offsets = Vec::with_capacity(count);
    for _ in 0..count {
        offsets.push(read_u64(&mut r)?);
    }

    let mut records = Vec::with_capacity(count);
    for off in offsets {
        r.seek(SeekFrom::Start(off))?;
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("record name is not utf-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u64(&mut r)? as usize);
        }
        let n: usize = dims.iter().product();
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        let data = match dtype[0] {
            DTYPE_F32 => {
                let mut buf = vec![0u8; 4 * n];
                r.read_exact(&mut buf)?;
                let vals: Vec<f32> = buf
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                TensorData::F32(
                    ArrayD::from_shape_vec(ndarray::IxDyn(&dims), vals)
                        .map_err(|e| Error::Format(e.to_string()))?,
                )
            }
            DTYPE_U8 => {
                let mut buf = vec![0u8; n];
                r.read_exact(&mut buf)?;
                TensorData::U8(
                    ArrayD::from_shape_vec(ndarray::IxDyn(&dims), buf)
                        .map_err(|e| Error::Format(e.to_string()))?,
                )
            }
            d => return Err(Error::Format(format!("unknown dtype code {d}"))),
        };
        records.push(Record { name, data });
    }
    Ok(records)
}

/// Find a record by name.
pub fn find<'a>(records: &'a [Record], name: &str) -> Result<&'a Record> {
    records
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| Error::Format(format!("record `{name}` not found in container")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array3};

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.itah");
        let a = arr2(&[[1.0f32, -2.5, 3.25], [f32::MIN_POSITIVE, 0.0, -0.0]]);
        let b = Array3::<u8>::from_shape_fn((2, 3, 4), |(i, j, k)| (i * 12 + j * 4 + k) as u8);
        let recs = vec![Record::f32("alpha", a.clone()), Record::u8("beta", b.clone())];
        write(&path, &recs).unwrap();
        let back = read(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].name, "alpha");
        let a2 = back[0].data.as_f32().unwrap();
        assert_eq!(a2.shape(), &[2, 3]);
        for (x, y) in a.iter().zip(a2.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(back[1].data.as_u8().unwrap(), &b.into_dyn());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.itah");
        std::fs::write(&path, b"NOPE0000somethingelse").unwrap();
        assert!(matches!(read(&path), Err(Error::Format(_))));
    }

    #[test]
    fn header_layout_is_pinned() {
        // The first eight bytes are the magic and the version; a writer in any
        // other language must produce these exact bytes.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.itah");
        write(&path, &[Record::f32("x", ndarray::arr1(&[1.0f32]))]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"ITAH");
        assert_eq!(u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]), 1);
        // name_len=1, "x"
        assert_eq!(u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]), 1);
        assert_eq!(bytes[12], b'x');
    }
}
