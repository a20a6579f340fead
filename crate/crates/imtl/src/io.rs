//! Binary tensor file format "IMTD".
//!
//! Layout: magic bytes `IMTD`, version `u32` LE (currently 1), ndim `u32` LE,
//! the dimensions as `u64` LE each, then the values as IEEE-754 `f64` LE in
//! vectorization order (first index fastest).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

const MAGIC: &[u8; 4] = b"IMTD";
const VERSION: u32 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &DenseTensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<DenseTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:?}")));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported IMTD version {version}")));
    }
    r.read_exact(&mut buf4)?;
    let ndim = u32::from_le_bytes(buf4) as usize;
    if ndim == 0 {
        return Err(Error::Format("zero-dimensional tensor".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut buf8 = [0u8; 8];
    for _ in 0..ndim {
        r.read_exact(&mut buf8)?;
        dims.push(u64::from_le_bytes(buf8) as usize);
    }
    let total: usize = dims.iter().product();
    let mut values = Vec::with_capacity(total);
    for _ in 0..total {
        r.read_exact(&mut buf8)?;
        values.push(f64::from_le_bytes(buf8));
    }
    DenseTensor::new(dims, values)
}

pub fn save_tensor<P: AsRef<Path>>(path: P, t: &DenseTensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor<P: AsRef<Path>>(path: P) -> Result<DenseTensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}
