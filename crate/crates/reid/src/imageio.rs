use std::path::Path;

use plr_core::dataset::{Image, ImageRecord};
use plr_core::trainer::ImageSource;

use crate::error::{ReidError, Result};

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| ReidError::Image { path: path.to_path_buf(), message: e.to_string() })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Image::from_rgb8(h as usize, w as usize, rgb.as_raw())?)
}

/// Writes interleaved 8-bit RGB as PNG.
pub fn save_rgb8(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    image::save_buffer(path, rgb, width as u32, height as u32, image::ColorType::Rgb8)
        .map_err(|e| ReidError::Image { path: path.to_path_buf(), message: e.to_string() })
}

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    save_rgb8(path, img.width, img.height, &img.to_rgb8())
}

/// Decodes records' files on demand; index `i` is `records[i]`.
pub struct FileSource<'a> {
    pub records: &'a [ImageRecord],
}

impl ImageSource for FileSource<'_> {
    fn load(&self, index: usize) -> plr_core::Result<Image> {
        let rec = self
            .records
            .get(index)
            .ok_or_else(|| plr_core::Error::Image(format!("no record {index}")))?;
        load_image(Path::new(&rec.path)).map_err(|e| plr_core::Error::Image(e.to_string()))
    }
}
