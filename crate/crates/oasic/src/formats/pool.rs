//! Model pools on disk: a directory with `pool.json` and one
//! `f_<p>.model` file per member.
//!
//! `.model` layout (little endian): `b"OCLS"`, `u32` version = 1, `u32`
//! class count `C`, `u32` dim, `C * dim` `f32` weights (class-major), then
//! `C` `f32` biases.

use std::path::Path;

use oasic_core::classifier::{Classifier, ModelPool};
use oasic_core::features::FeatureDescriptor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::binary::{read_file, write_file, Reader, Writer};

const MAGIC: &[u8; 4] = b"OCLS";
const VERSION: u32 = 1;
pub const MANIFEST: &str = "pool.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureInfo {
    pub name: String,
    pub dim: usize,
    pub patch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberInfo {
    pub p: f64,
    pub file: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub version: u32,
    pub keys: Vec<f64>,
    pub labels: Vec<String>,
    pub feature: FeatureInfo,
    pub members: Vec<MemberInfo>,
}

pub fn member_file(p: f64) -> String {
    format!("f_{p}.model")
}

pub fn encode_model(model: &Classifier) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.u32(model.classes() as u32);
    w.u32(model.descriptor().dim as u32);
    w.f32s(model.weights());
    w.f32s(model.bias());
    w.finish()
}

/// Decodes weights and biases; returns `(classes, dim, weights, bias)`.
pub fn decode_model(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f32>, Vec<f32>)> {
    let mut r = Reader::open(path, bytes, "OCLS", VERSION)?;
    let classes = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mut all = r.trailing_f32s(classes * dim + classes)?;
    let bias = all.split_off(classes * dim);
    Ok((classes, dim, all, bias))
}

/// Writes the pool into `dir`, which is created if needed.
pub fn write_pool(dir: &Path, pool: &ModelPool, seeds: &[u64]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let d = pool.descriptor();
    let mut members = Vec::with_capacity(pool.len());
    for (i, m) in pool.members().iter().enumerate() {
        let file = member_file(m.trained_p());
        write_file(&dir.join(&file), &encode_model(m))?;
        members.push(MemberInfo {
            p: m.trained_p(),
            file,
            seed: seeds.get(i).copied().unwrap_or(0),
        });
    }
    let manifest = PoolManifest {
        version: VERSION,
        keys: pool.keys(),
        labels: pool.labels().to_vec(),
        feature: FeatureInfo {
            name: d.name.clone(),
            dim: d.dim,
            patch_size: d.patch_size,
        },
        members,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)?;
    write_file(&path, json.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<PoolManifest> {
    let path = dir.join(MANIFEST);
    let manifest: PoolManifest = serde_json::from_slice(&read_file(&path)?)
        .map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.version != VERSION {
        return Err(Error::BadVersion {
            path,
            version: manifest.version,
        });
    }
    Ok(manifest)
}

pub fn read_pool(dir: &Path) -> Result<ModelPool> {
    let manifest = read_manifest(dir)?;
    let descriptor = FeatureDescriptor {
        name: manifest.feature.name.clone(),
        dim: manifest.feature.dim,
        patch_size: manifest.feature.patch_size,
    };
    let listed: Vec<f64> = manifest.members.iter().map(|m| m.p).collect();
    if listed != manifest.keys {
        return Err(Error::format(dir.join(MANIFEST), "keys disagree with the member list"));
    }
    let mut members = Vec::with_capacity(manifest.members.len());
    for m in &manifest.members {
        let path = dir.join(&m.file);
        let (classes, dim, weights, bias) = decode_model(&path, &read_file(&path)?)?;
        if classes != manifest.labels.len() || dim != descriptor.dim {
            return Err(Error::format(&path, "model shape disagrees with pool.json"));
        }
        let c = Classifier::from_parts(manifest.labels.clone(), descriptor.clone(), weights, bias, m.p)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        members.push(c);
    }
    ModelPool::new(members).map_err(|e| Error::format(dir.join(MANIFEST), e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn member(p: f64) -> Classifier {
        Classifier::from_parts(
            vec!["a".into(), "b".into()],
            FeatureDescriptor {
                name: "handcrafted".into(),
                dim: 3,
                patch_size: 16,
            },
            vec![0.5, -1.25, 3.0, 1e-7, 0.0, -2.0],
            vec![0.125, -0.5],
            p,
        )
        .unwrap()
    }

    #[test]
    fn pool_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pool = ModelPool::new(vec![member(0.3), member(0.0), member(0.9)]).unwrap();
        write_pool(dir.path(), &pool, &[1, 2, 3]).unwrap();
        assert!(dir.path().join("f_0.3.model").exists());
        assert!(dir.path().join("f_0.model").exists());
        assert_eq!(read_pool(dir.path()).unwrap(), pool);
        assert_eq!(read_manifest(dir.path()).unwrap().members[2].seed, 3);
    }

    #[test]
    fn model_file_checks_shape() {
        let b = encode_model(&member(0.1));
        assert_eq!(b.len(), 16 + 8 * 4);
        let p = Path::new("x");
        assert!(matches!(decode_model(p, &b[..b.len() - 4]), Err(Error::Truncated { .. })));
        let dir = tempfile::tempdir().unwrap();
        let pool = ModelPool::new(vec![member(0.0)]).unwrap();
        write_pool(dir.path(), &pool, &[0]).unwrap();
        std::fs::write(dir.path().join("f_0.model"), &b[..b.len() - 4]).unwrap();
        assert!(read_pool(dir.path()).is_err());
    }
}
