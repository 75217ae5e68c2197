//! Writes a generated set to disk in the Market-1501 layout.

use std::fs;
use std::path::Path;

use plr_core::dataset::{parse_filename, Image, ImageRecord};
use plr_core::synthetic::SyntheticSet;

use crate::error::{io_err, Result};
use crate::imageio::save_png;

pub const MANIFEST: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ManifestRow {
    /// Relative to the dataset root.
    pub path: String,
    /// Identity as written in the file name (train labels are 1-based here).
    pub person_id: i64,
    pub camera_id: u32,
    pub split: String,
}

/// PNG files under `root` plus `manifest.csv`; the result scans back as a
/// `market1501` root with the same split.
pub fn write_synthetic(root: &Path, set: &SyntheticSet) -> Result<Vec<ManifestRow>> {
    let subsets: [(&str, &[ImageRecord], &[Image]); 3] = [
        ("train", &set.split.train, &set.train_images),
        ("query", &set.split.query, &set.query_images),
        ("gallery", &set.split.gallery, &set.gallery_images),
    ];
    let mut rows = Vec::new();
    for (split, recs, imgs) in subsets {
        for (rec, img) in recs.iter().zip(imgs) {
            let path = root.join(&rec.path);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            save_png(&path, img)?;
            let (pid, cam) = parse_filename(&rec.path)?;
            rows.push(ManifestRow { path: rec.path.clone(), person_id: pid, camera_id: cam, split: split.into() });
        }
    }
    let mpath = root.join(MANIFEST);
    let mut w = csv::Writer::from_path(&mpath)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(&mpath))?;
    Ok(rows)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
