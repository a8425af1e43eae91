//! `.oemb`: a precomputed patch-embedding grid.
//!
//! Layout (little endian): `b"OEMB"`, `u32` version = 1, `u32` grid_h,
//! `u32` grid_w, `u32` dim, `u32` patch_size, then
//! `grid_h * grid_w * dim` `f32` values, row-major with the embedding
//! dimension innermost.

use std::path::Path;

use oasic_core::features::PatchEmbeddingGrid;

use crate::error::{Error, Result};
use crate::formats::binary::{read_file, write_file, Reader, Writer};

const MAGIC: &[u8; 4] = b"OEMB";
const VERSION: u32 = 1;

pub fn encode(grid: &PatchEmbeddingGrid) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.u32(grid.grid_h() as u32);
    w.u32(grid.grid_w() as u32);
    w.u32(grid.dim() as u32);
    w.u32(grid.patch_size() as u32);
    w.f32s(grid.as_flat());
    w.finish()
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<PatchEmbeddingGrid> {
    let mut r = Reader::open(path, bytes, "OEMB", VERSION)?;
    let gh = r.u32()? as usize;
    let gw = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let ps = r.u32()? as usize;
    if dim == 0 || gh == 0 || gw == 0 || ps == 0 {
        return Err(Error::format(path, "zero grid dimension, embedding dim or patch size"));
    }
    let values = r.trailing_f32s(gh * gw * dim)?;
    PatchEmbeddingGrid::new(gh, gw, dim, ps, values).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write(path: &Path, grid: &PatchEmbeddingGrid) -> Result<()> {
    write_file(path, &encode(grid))
}

pub fn read(path: &Path) -> Result<PatchEmbeddingGrid> {
    decode(path, &read_file(path)?)
}
