//! `.amap`: a continuous anomaly map.
//!
//! Layout (little endian): `b"AMAP"`, `u32` version = 1, `u32` height,
//! `u32` width, then `height * width` `f32` values in row-major order.

use std::path::Path;

use oasic_core::AnomalyMap;

use crate::error::{Error, Result};
use crate::formats::binary::{read_file, write_file, Reader, Writer};

const MAGIC: &[u8; 4] = b"AMAP";
const VERSION: u32 = 1;

pub fn encode(map: &AnomalyMap) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.u32(map.height() as u32);
    w.u32(map.width() as u32);
    w.f32s(map.values());
    w.finish()
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<AnomalyMap> {
    let mut r = Reader::open(path, bytes, "AMAP", VERSION)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let values = r.trailing_f32s(h * w)?;
    AnomalyMap::new(w, h, values).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write(path: &Path, map: &AnomalyMap) -> Result<()> {
    write_file(path, &encode(map))
}

pub fn read(path: &Path) -> Result<AnomalyMap> {
    decode(path, &read_file(path)?)
}
