//! Directory layouts of the standard re-identification benchmarks.

use std::fs;
use std::path::{Path, PathBuf};

use plr_core::dataset::{parse_filename, split_from_paths, DatasetSplit};

use crate::error::{io_err, ReidError, Result};

/// All three layouts share the Market-1501 directory names; CUHK03 here is
/// the new (767/700) protocol, pointed at its `labeled` or `detected` root.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, clap::ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    Market1501,
    Dukemtmc,
    Cuhk03New,
}

impl Layout {
    pub fn name(self) -> &'static str {
        match self {
            Layout::Market1501 => "market1501",
            Layout::Dukemtmc => "dukemtmc",
            Layout::Cuhk03New => "cuhk03_new",
        }
    }

    /// (train, query, gallery) directory names.
    pub fn subdirs(self) -> [&'static str; 3] {
        ["bounding_box_train", "query", "bounding_box_test"]
    }

    /// Whether the longer CUHK03 schedule applies.
    pub fn is_cuhk03(self) -> bool {
        self == Layout::Cuhk03New
    }
}

const EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "bmp"];

/// Image files directly inside `dir`, sorted.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn path_strings(paths: &[PathBuf]) -> Result<Vec<String>> {
    paths
        .iter()
        .map(|p| {
            let s = p.to_str().ok_or_else(|| ReidError::BadFilename { path: p.clone() })?;
            parse_filename(s).map_err(|_| ReidError::BadFilename { path: p.clone() })?;
            Ok(s.to_string())
        })
        .collect()
}

/// Scans `root` and builds the split: identities and cameras parsed from
/// file names, junk (`-1`) flagged, train identities relabeled densely.
pub fn scan_reid_dir(root: &Path, layout: Layout) -> Result<DatasetSplit> {
    let dirs = layout.subdirs().map(|d| root.join(d));
    let missing: Vec<String> = layout
        .subdirs()
        .iter()
        .zip(&dirs)
        .filter(|(_, d)| !d.is_dir())
        .map(|(n, _)| n.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(ReidError::LayoutMismatch { root: root.to_path_buf(), layout: layout.name().into(), missing });
    }
    let [train, query, gallery] = dirs;
    let train = path_strings(&list_images(&train)?)?;
    let query = path_strings(&list_images(&query)?)?;
    let gallery = path_strings(&list_images(&gallery)?)?;
    Ok(split_from_paths(&train, &query, &gallery)?)
}
