//! `TNSR` binary files: magic `TNSR`, a `u8` rank, `rank` little-endian `u32`
//! dims, then the row-major payload as little-endian `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TNSR";

pub fn write_tnsr_to<W: Write>(t: &Tensor, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[t.dims().len() as u8])?;
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {} exceeds u32", d)))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tnsr_from<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", magic)));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    let rank = rank[0] as usize;
    if rank == 0 || rank > 4 {
        return Err(Error::Format(format!("rank {} unsupported", rank)));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut buf = [0u8; 4];
    for _ in 0..rank {
        r.read_exact(&mut buf)?;
        dims.push(u32::from_le_bytes(buf) as usize);
    }
    let n: usize = dims.iter().product();
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Tensor::new(dims, data)
}

pub fn write_tnsr(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tnsr_to(t, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_tnsr(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tnsr_from(BufReader::new(File::open(path)?))
}
