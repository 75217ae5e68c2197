//! Activation-map overlays and retrieval strips.

use plr_core::dataset::{preprocess_test, AugmentConfig, Image};
use plr_core::model::PlrOsNet;

use crate::error::Result;

/// Blend weight of the heatmap over the image.
pub const ALPHA: f32 = 0.5;

/// Min-max scales `map` to [0, 1]; a constant map becomes all zeros.
pub fn normalize_map(map: &[f32]) -> Vec<f32> {
    let lo = map.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    if !(span > 1e-12) {
        return vec![0.0; map.len()];
    }
    map.iter().map(|v| (v - lo) / span).collect()
}

/// Bilinear upsampling of a single `[h, w]` plane.
pub fn upsample(map: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(map);
    }
    let img = Image { height: h, width: w, data };
    let mut r = img.resize(out_h, out_w).data;
    r.truncate(out_h * out_w);
    r
}

/// Jet colormap on [0, 1].
pub fn jet(t: f32) -> [f32; 3] {
    let f = |c: f32| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0);
    [f(3.0), f(2.0), f(1.0)]
}

/// Colors `heat` (values in [0, 1], same size as `img`) and blends it over `img`.
pub fn overlay(img: &Image, heat: &[f32]) -> Image {
    let hw = img.height * img.width;
    let mut data = img.data.clone();
    for (i, &t) in heat.iter().enumerate() {
        let c = jet(t);
        for ch in 0..3 {
            let v = &mut data[ch * hw + i];
            *v = (1.0 - ALPHA) * *v + ALPHA * c[ch];
        }
    }
    Image { height: img.height, width: img.width, data }
}

/// Overlays for one image: `("global", …)` when the branch exists, then
/// `("part1", …)` upward. Drawn on the image resized to the model input.
pub fn cam_overlays(model: &mut PlrOsNet<f32>, img: &Image, aug: &AugmentConfig) -> Result<Vec<(String, Image)>> {
    let (h, w) = (aug.target_height, aug.target_width);
    let x = preprocess_test(img, aug)?.reshape(&[1, 3, h, w])?;
    let maps = model.activation_maps(x)?;
    let base = img.resize(h, w);
    let draw = |m: &[f32]| overlay(&base, &upsample(&normalize_map(m), maps.height, maps.width, h, w));
    let mut out = Vec::new();
    if let Some(g) = &maps.global {
        out.push(("global".to_string(), draw(g)));
    }
    for (i, p) in maps.parts.iter().enumerate() {
        out.push((format!("part{}", i + 1), draw(p)));
    }
    Ok(out)
}

pub const TILE_H: usize = 128;
pub const TILE_W: usize = 64;
pub const BORDER: usize = 4;
pub const GAP: usize = 12;

const GREEN: [f32; 3] = [0.1, 0.8, 0.1];
const RED: [f32; 3] = [0.9, 0.1, 0.1];
const GRAY: [f32; 3] = [0.5, 0.5, 0.5];

/// Width of a strip with `n` tiles (query included).
pub fn strip_width(n: usize) -> usize {
    n * (TILE_W + 2 * BORDER) + GAP
}

fn paste(dst: &mut Image, src: &Image, x0: usize, frame: [f32; 3]) {
    let tile = src.resize(TILE_H, TILE_W);
    let (fh, fw) = (TILE_H + 2 * BORDER, TILE_W + 2 * BORDER);
    let hw = dst.height * dst.width;
    for y in 0..fh {
        for x in 0..fw {
            let inside = (BORDER..BORDER + TILE_H).contains(&y) && (BORDER..BORDER + TILE_W).contains(&x);
            for c in 0..3 {
                dst.data[c * hw + y * dst.width + x0 + x] = if inside {
                    tile.data[c * TILE_H * TILE_W + (y - BORDER) * TILE_W + (x - BORDER)]
                } else {
                    frame[c]
                };
            }
        }
    }
}

/// Query tile (gray frame), a gap, then the ranked gallery tiles framed
/// green when `correct[i]` and red otherwise.
pub fn rank_strip(query: &Image, ranked: &[&Image], correct: &[bool]) -> Image {
    let n = 1 + ranked.len();
    let (h, w) = (TILE_H + 2 * BORDER, strip_width(n));
    let mut strip = Image::filled(h, w, [1.0; 3]);
    paste(&mut strip, query, 0, GRAY);
    for (i, (g, &ok)) in ranked.iter().zip(correct).enumerate() {
        let x0 = (i + 1) * (TILE_W + 2 * BORDER) + GAP;
        paste(&mut strip, g, x0, if ok { GREEN } else { RED });
    }
    strip
}

/// Frame color at the top-left corner of tile `i` (0 is the query).
pub fn tile_frame(strip: &Image, i: usize) -> [f32; 3] {
    let x = if i == 0 { 0 } else { i * (TILE_W + 2 * BORDER) + GAP };
    let hw = strip.height * strip.width;
    [strip.data[x], strip.data[hw + x], strip.data[2 * hw + x]]
}
