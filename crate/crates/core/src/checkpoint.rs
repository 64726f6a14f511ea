//! Binary checkpoint bundling the embedding map with its memory bank, so
//! inference always runs with the exact trained queries.
//!
//! Layout (all integers little-endian u64 unless noted):
//!
//! ```text
//! magic "CIAE-EMB/1" (10 bytes)
//! height, width, dim, generation
//! prenorm values: height*width*dim f64, row-major (y, x, d)
//! memory count, memory dim
//! memory vectors: count*dim f64
//! current_iter, total_iters, num_stuff
//! merged_things (1 byte: 0/1)
//! base_momentum (f64), seed
//! ```

use std::fs;
use std::path::Path;

use crate::embedding::EmbeddingMap;
use crate::error::{Error, Result};
use crate::memory::MemoryBank;

const MAGIC: &[u8; 10] = b"CIAE-EMB/1";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("{}: truncated checkpoint", self.path)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Serialize map and bank to `path`.
pub fn save_checkpoint(path: &Path, map: &EmbeddingMap, bank: &MemoryBank) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + 8 * (map.prenorm().len() + bank.vectors().len()));
    buf.extend_from_slice(MAGIC);
    for v in [
        map.height() as u64,
        map.width() as u64,
        map.dim() as u64,
        map.generation(),
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in map.prenorm() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in [bank.num_categories() as u64, bank.dim() as u64] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in bank.vectors() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in [
        bank.current_iter() as u64,
        bank.total_iters() as u64,
        bank.num_stuff() as u64,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(bank.merged_things() as u8);
    buf.extend_from_slice(&bank.base_momentum().to_le_bytes());
    buf.extend_from_slice(&bank.seed().to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(EmbeddingMap, MemoryBank)> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic, not an embedding checkpoint",
            path.display()
        )));
    }
    let height = r.u64()? as usize;
    let width = r.u64()? as usize;
    let dim = r.u64()? as usize;
    let generation = r.u64()?;
    if height.checked_mul(width).and_then(|n| n.checked_mul(dim)).is_none()
        || height * width * dim * 8 > bytes.len()
    {
        return Err(Error::Format(format!(
            "{}: implausible dimensions {height}x{width}x{dim}",
            path.display()
        )));
    }
    let prenorm = r.f64_vec(height * width * dim)?;
    let map = EmbeddingMap::from_parts(height, width, dim, prenorm, generation)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;

    let mem_count = r.u64()? as usize;
    let mem_dim = r.u64()? as usize;
    if mem_dim != dim {
        return Err(Error::Format(format!(
            "{}: memory dim {mem_dim} disagrees with map dim {dim}",
            path.display()
        )));
    }
    if mem_count.checked_mul(mem_dim).is_none() || mem_count * mem_dim * 8 > bytes.len() {
        return Err(Error::Format(format!(
            "{}: implausible memory section {mem_count}x{mem_dim}",
            path.display()
        )));
    }
    let vectors = r.f64_vec(mem_count * mem_dim)?;
    let current_iter = r.u64()? as usize;
    let total_iters = r.u64()? as usize;
    let num_stuff = r.u64()? as usize;
    let merged = match r.take(1)?[0] {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Format(format!(
                "{}: bad merged flag {other}",
                path.display()
            )))
        }
    };
    let base_momentum = r.f64()?;
    let seed = r.u64()?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - r.pos
        )));
    }
    let bank = MemoryBank::from_parts(
        mem_dim,
        num_stuff,
        merged,
        vectors,
        current_iter,
        total_iters,
        base_momentum,
        seed,
    )
    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok((map, bank))
}
