//! On-disk datasets: one PNG per image plus a JSON manifest carrying labels
//! and a content digest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LabeledImages, RgbImage};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub name: String,
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
    /// Hex SHA-256 over every image's pixels followed by its label.
    pub digest: String,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn digest(images: &[RgbImage]) -> String {
    let mut h = Sha256::new();
    for img in images {
        h.update(img.pixels());
        h.update([img.label()]);
    }
    hex::encode(h.finalize())
}

fn image_name(i: usize) -> String {
    format!("{i:06}.png")
}

/// Writes `images` under `dir` (created if missing).
pub fn save_dataset(dir: &Path, name: &str, data: &LabeledImages, meta: serde_json::Value) -> Result<DatasetManifest> {
    let Some(first) = data.images.first() else {
        return Err(Error::Dimension("refusing to save an empty dataset".into()));
    };
    fs::create_dir_all(dir)?;
    for (i, img) in data.images.iter().enumerate() {
        if (img.width(), img.height()) != (first.width(), first.height()) {
            return Err(Error::Dimension(format!("image {i} has a different size from image 0")));
        }
        img.to_image().save(dir.join(image_name(i)))?;
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        name: name.to_string(),
        count: data.len(),
        width: first.width(),
        height: first.height(),
        labels: data.labels(),
        digest: digest(&data.images),
        meta,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let m: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Version { found: m.version, expected: MANIFEST_VERSION });
    }
    if m.labels.len() != m.count {
        return Err(Error::Format(format!("manifest lists {} labels for {} images", m.labels.len(), m.count)));
    }
    Ok(m)
}

/// Reads a dataset written by [`save_dataset`] and checks its digest.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, LabeledImages)> {
    let m = read_manifest(dir)?;
    let mut images = Vec::with_capacity(m.count);
    for (i, &label) in m.labels.iter().enumerate() {
        let img = image::open(dir.join(image_name(i)))?.to_rgb8();
        if (img.width() as usize, img.height() as usize) != (m.width, m.height) {
            return Err(Error::Format(format!("image {i} is {}x{}, manifest says {}x{}", img.width(), img.height(), m.width, m.height)));
        }
        images.push(RgbImage::from_image(&img, label)?);
    }
    let found = digest(&images);
    if found != m.digest {
        return Err(Error::Integrity(format!("dataset digest {found} does not match manifest {}", m.digest)));
    }
    Ok((m, LabeledImages::new(images)))
}
