//! `LITCKPT1` named-tensor container.
//!
//! Layout (all integers little-endian `u64`):
//! `"LITCKPT1"`, then until EOF one record per tensor:
//! name byte length, UTF-8 name, rank, `rank` extents, `product(extents)` values as `f32` LE.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{LitError, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"LITCKPT1";

pub fn write_to<'a, F: Real, W: Write>(
    mut w: W,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<F>)>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_from<F: Real, R: Read>(mut r: R) -> Result<Vec<(String, Tensor<F>)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| LitError::Format("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(LitError::Format("bad magic, expected LITCKPT1".into()));
    }
    let mut out = Vec::new();
    loop {
        let name_len = match read_u64(&mut r) {
            Ok(n) => n as usize,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| LitError::Format("name is not UTF-8".into()))?;
        let rank = read_u64(&mut r).map_err(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r).map_err(truncated)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(truncated)?;
        let data =
            raw.chunks_exact(4).map(|c| F::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
        let t = Tensor::new(&shape, data).map_err(|e| LitError::Format(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save<'a, F: Real>(
    path: impl AsRef<Path>,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<F>)>,
) -> Result<()> {
    write_to(BufWriter::new(File::create(path)?), tensors)
}

pub fn load<F: Real>(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<F>)>> {
    read_from(BufReader::new(File::open(path)?))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(_: io::Error) -> LitError {
    LitError::Format("truncated record".into())
}
