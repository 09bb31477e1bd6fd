//! Minimal container for dense tensors: magic "TNSR", u32 LE version,
//! u8 dtype (0 = f64, 1 = u8), u32 ndim, u32 extents, row-major payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const DTYPE_U8: u8 = 1;

pub fn write_f64(path: &Path, tensor: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_f64_to(&mut w, tensor).map_err(|e| Error::io(path, e))
}

pub fn write_f64_to(w: &mut impl Write, tensor: &Tensor) -> std::io::Result<()> {
    write_header(w, DTYPE_F64, tensor.shape())?;
    for v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let go = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        write_header(w, DTYPE_U8, &[labels.height(), labels.width()])?;
        w.write_all(labels.data())
    };
    go(&mut w).map_err(|e| Error::io(path, e))
}

fn write_header(w: &mut impl Write, dtype: u8, shape: &[usize]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[dtype])?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &e in shape {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f64(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    read_f64_from(&mut r, path)
}

pub fn read_f64_from(r: &mut impl Read, path: &Path) -> Result<Tensor> {
    let (dtype, shape) = read_header(r, path)?;
    if dtype != DTYPE_F64 {
        return Err(Error::format(path, format!("expected f64 payload, dtype {dtype}")));
    }
    let numel: usize = shape.iter().product();
    let mut data = vec![0.0f64; numel];
    let mut buf = [0u8; 8];
    for v in data.iter_mut() {
        r.read_exact(&mut buf)
            .map_err(|_| Error::format(path, "truncated payload"))?;
        *v = f64::from_le_bytes(buf);
    }
    Tensor::new(shape, data)
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let (dtype, shape) = read_header(&mut r, path)?;
    if dtype != DTYPE_U8 {
        return Err(Error::format(path, format!("expected u8 payload, dtype {dtype}")));
    }
    if shape.len() != 2 {
        return Err(Error::format(path, format!("label map must be rank 2, got {shape:?}")));
    }
    let numel = shape[0] * shape[1];
    let mut data = vec![0u8; numel];
    r.read_exact(&mut data)
        .map_err(|_| Error::format(path, "truncated payload"))?;
    LabelMap::new(shape[0], shape[1], data)
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<(u8, Vec<usize>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(path, "file too short for header"))?;
    if &magic != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| Error::format(path, "truncated header"))?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype)
        .map_err(|_| Error::format(path, "truncated header"))?;
    if dtype[0] > DTYPE_U8 {
        return Err(Error::format(path, format!("unknown dtype {}", dtype[0])));
    }
    r.read_exact(&mut u32buf)
        .map_err(|_| Error::format(path, "truncated header"))?;
    let ndim = u32::from_le_bytes(u32buf) as usize;
    if ndim > 8 {
        return Err(Error::format(path, format!("implausible rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        r.read_exact(&mut u32buf)
            .map_err(|_| Error::format(path, "truncated header"))?;
        shape.push(u32::from_le_bytes(u32buf) as usize);
    }
    Ok((dtype[0], shape))
}
