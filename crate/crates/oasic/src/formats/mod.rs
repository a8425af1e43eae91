pub mod amap;
pub mod bank;
pub(crate) mod binary;
pub mod dataset;
pub mod oemb;
pub mod png;
pub mod pool;
