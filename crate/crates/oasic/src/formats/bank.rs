//! `.bank`: a memory bank with its calibration.
//!
//! Layout (little endian): `b"OBNK"`, `u32` version = 1, `u32` dim,
//! `u32` patch_size, `u32` entry count `M`, `f32` a_lo, `f32` a_hi (both NaN
//! when uncalibrated), `u32` label count followed by each label as a `u32`
//! byte length and UTF-8 bytes, `M` `u32` label indices, then `M * dim`
//! `f32` entries.

use std::path::Path;

use oasic_core::bank::{Calibration, MemoryBank};
use oasic_core::features::FeatureDescriptor;

use crate::error::{Error, Result};
use crate::formats::binary::{read_file, write_file, Reader, Writer};

const MAGIC: &[u8; 4] = b"OBNK";
const VERSION: u32 = 1;

/// Name given to the descriptor of a loaded bank; the file stores only the
/// shape of the features.
pub const LOADED_FEATURE_NAME: &str = "bank";

pub fn encode(bank: &MemoryBank) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.u32(bank.dim() as u32);
    w.u32(bank.descriptor().patch_size as u32);
    w.u32(bank.len() as u32);
    let (lo, hi) = bank
        .calibration()
        .map_or((f32::NAN, f32::NAN), |c| (c.lo, c.hi));
    w.f32(lo);
    w.f32(hi);
    w.u32(bank.labels().len() as u32);
    for l in bank.labels() {
        w.u32(l.len() as u32);
        w.bytes(l.as_bytes());
    }
    for &i in bank.entry_labels() {
        w.u32(i);
    }
    w.f32s(bank.entries_flat());
    w.finish()
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<MemoryBank> {
    let mut r = Reader::open(path, bytes, "OBNK", VERSION)?;
    let dim = r.u32()? as usize;
    let patch_size = r.u32()? as usize;
    let count = r.u32()? as usize;
    let lo = r.f32()?;
    let hi = r.f32()?;
    let calibration = match (lo.is_nan(), hi.is_nan()) {
        (true, true) => None,
        (false, false) => {
            Some(Calibration::new(lo, hi).map_err(|e| Error::format(path, e.to_string()))?)
        }
        _ => return Err(Error::format(path, "only one calibration bound is set")),
    };
    let n_labels = r.u32()? as usize;
    let mut labels = Vec::with_capacity(n_labels.min(1 << 16));
    for _ in 0..n_labels {
        let len = r.u32()? as usize;
        let raw = r.bytes(len)?;
        let label = std::str::from_utf8(raw)
            .map_err(|_| Error::format(path, "label is not UTF-8"))?;
        labels.push(label.to_string());
    }
    let mut entry_labels = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        entry_labels.push(r.u32()?);
    }
    let entries = r.trailing_f32s(count * dim)?;
    let descriptor = FeatureDescriptor {
        name: LOADED_FEATURE_NAME.into(),
        dim,
        patch_size,
    };
    MemoryBank::from_parts(descriptor, labels, entry_labels, entries, calibration)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write(path: &Path, bank: &MemoryBank) -> Result<()> {
    write_file(path, &encode(bank))
}

pub fn read(path: &Path) -> Result<MemoryBank> {
    decode(path, &read_file(path)?)
}
