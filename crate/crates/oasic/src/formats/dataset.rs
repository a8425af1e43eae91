//! Labelled image directories (`<root>/<label>/<name>.png`) and their
//! `manifest.csv` (`name,label,coverage,seed`).

use std::path::{Path, PathBuf};

use oasic_core::LabeledImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::png::{read_image, write_image};

pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub name: String,
    pub label: String,
    pub coverage: f64,
    pub seed: u64,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Reads every `<label>/<name>.png` under `root`, in sorted label then name
/// order.
pub fn read_labeled_dir(root: &Path) -> Result<Vec<LabeledImage>> {
    let mut items = Vec::new();
    for class_dir in sorted_entries(root)? {
        if !class_dir.is_dir() {
            continue;
        }
        let label = file_name(&class_dir)?;
        for file in sorted_entries(&class_dir)? {
            if file.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let name = file
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::format(&file, "file name is not UTF-8"))?
                .to_string();
            items.push(LabeledImage {
                name,
                label: label.clone(),
                image: read_image(&file)?,
            });
        }
    }
    if items.is_empty() {
        return Err(Error::format(root, "no <label>/<name>.png images found"));
    }
    Ok(items)
}

fn file_name(path: &Path) -> Result<String> {
    path.file_name()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::format(path, "name is not UTF-8"))
}

pub fn write_labeled_dir(root: &Path, items: &[LabeledImage]) -> Result<()> {
    for item in items {
        let dir = root.join(&item.label);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_image(&dir.join(format!("{}.png", item.name)), &item.image)?;
    }
    Ok(())
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}
