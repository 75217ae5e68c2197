//! Procedural pedestrians for desk-scale runs.
//!
//! Each identity fixes clothing colors, a torso pattern, trouser style,
//! hair, and an optional bag. Each camera fixes a color response. Each
//! rendered instance draws its own background, jitters position, scale and
//! brightness, and adds pixel noise. Query and gallery images are fresh renders of the train
//! identities, so retrieval on them measures generalization across instances
//! and cameras rather than across identities.

use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{DatasetSplit, Image, ImageRecord};
use crate::error::{Error, Result};
use crate::rng;

pub const HEIGHT: usize = 256;
pub const WIDTH: usize = 128;

const K_ID: u64 = 0x1D;
const K_CAM: u64 = 0xCA;
const K_INST: u64 = 0x15;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Pattern {
    Plain,
    HStripes(f32),
    VStripes(f32),
    Checker(f32),
    Split,
}

#[derive(Clone, Debug)]
struct Identity {
    top: [f32; 3],
    accent: [f32; 3],
    pattern: Pattern,
    bottom: [f32; 3],
    shorts: bool,
    skin: [f32; 3],
    hair: [f32; 3],
    bag: Option<(bool, [f32; 3])>,
    height: f32,
    girth: f32,
}

#[derive(Clone, Debug)]
struct Camera {
    gain: [f32; 3],
    offset: f32,
}

fn color(r: &mut ChaCha8Rng) -> [f32; 3] {
    [r.random_range(0.05..0.95), r.random_range(0.05..0.95), r.random_range(0.05..0.95)]
}

fn identity(seed: u64, pid: usize) -> Identity {
    let mut r = rng::stream(seed, &[K_ID, pid as u64]);
    let pattern = match r.random_range(0..5) {
        0 => Pattern::Plain,
        1 => Pattern::HStripes(r.random_range(6.0..16.0)),
        2 => Pattern::VStripes(r.random_range(5.0..12.0)),
        3 => Pattern::Checker(r.random_range(6.0..14.0)),
        _ => Pattern::Split,
    };
    let s = r.random_range(0.35..0.85f32);
    Identity {
        top: color(&mut r),
        accent: color(&mut r),
        pattern,
        bottom: color(&mut r),
        shorts: r.random_bool(0.3),
        skin: [s, s * 0.8, s * 0.65],
        hair: {
            let h = r.random_range(0.02..0.5f32);
            [h, h * 0.8, h * 0.6]
        },
        bag: r.random_bool(0.4).then(|| (r.random_bool(0.5), color(&mut r))),
        height: r.random_range(0.84..0.96),
        girth: r.random_range(0.85..1.15),
    }
}

fn camera(seed: u64, cam: usize) -> Camera {
    let mut r = rng::stream(seed, &[K_CAM, cam as u64]);
    Camera {
        gain: [r.random_range(0.8..1.2), r.random_range(0.8..1.2), r.random_range(0.8..1.2)],
        offset: r.random_range(-0.08..0.08),
    }
}

fn ellipse(y: f32, x: f32, cy: f32, cx: f32, ry: f32, rx: f32) -> bool {
    let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
    dy * dy + dx * dx <= 1.0
}

fn pattern_color(id: &Identity, ly: f32, lx: f32) -> [f32; 3] {
    let alt = match id.pattern {
        Pattern::Plain => false,
        Pattern::HStripes(p) => (Float::floor(ly / p) as i64) % 2 == 1,
        Pattern::VStripes(p) => (Float::floor(lx / p) as i64) % 2 == 1,
        Pattern::Checker(p) => (Float::floor(ly / p) as i64 + Float::floor(lx / p) as i64) % 2 == 1,
        Pattern::Split => lx > 0.0,
    };
    if alt {
        id.accent
    } else {
        id.top
    }
}

/// Renders one instance of identity `pid` seen by camera `cam`.
fn render(id: &Identity, cam: &Camera, inst: &mut ChaCha8Rng) -> Image {
    let (h, w) = (HEIGHT as f32, WIDTH as f32);
    let scale = id.height * inst.random_range(0.95..1.05f32);
    let body_h = h * scale;
    let top = (h - body_h) * 0.5 + inst.random_range(-6.0..6.0f32);
    let cx = w * 0.5 + inst.random_range(-6.0..6.0f32);
    let half = w * 0.2 * id.girth;
    let bright = inst.random_range(-0.05..0.05f32);
    let noise_amp = 0.03f32;
    let wall = color(inst).map(|v| v * 0.5 + 0.25);
    let floor = color(inst).map(|v| v * 0.4 + 0.1);
    let horizon = inst.random_range(0.55..0.8f32);

    let mut data = alloc::vec![0.0f32; 3 * HEIGHT * WIDTH];
    let hw = HEIGHT * WIDTH;
    for yi in 0..HEIGHT {
        let y = yi as f32 + 0.5;
        let v = (y - top) / body_h;
        for xi in 0..WIDTH {
            let x = xi as f32 + 0.5;
            let lx = x - cx;
            let mut px = if y / h > horizon { floor } else { wall };
            // head and hair
            if ellipse(v, lx, 0.085, 0.0, 0.07, half * 0.45) {
                px = if v < 0.075 { id.hair } else { id.skin };
            }
            // torso and arms
            if (0.155..0.53).contains(&v) {
                if Float::abs(lx) <= half {
                    px = pattern_color(id, (v - 0.155) * body_h, lx);
                } else if Float::abs(lx) <= half * 1.3 && v < 0.48 {
                    px = if v < 0.3 { id.top } else { id.skin };
                }
            }
            // legs
            if (0.53..0.95).contains(&v) && Float::abs(lx) <= half * 0.8 && Float::abs(lx) >= half * 0.08 {
                px = if id.shorts && v > 0.68 { id.skin } else { id.bottom };
            }
            if (0.95..1.0).contains(&v) && Float::abs(lx) <= half * 0.85 {
                px = [0.08, 0.08, 0.1];
            }
            if let Some((left, c)) = id.bag {
                let bx = if left { -half * 1.25 } else { half * 1.25 };
                if ellipse(v, lx, 0.46, bx, 0.08, half * 0.35) {
                    px = c;
                }
            }
            for c in 0..3 {
                let n = inst.random_range(-noise_amp..noise_amp);
                data[c * hw + yi * WIDTH + xi] = (px[c] * cam.gain[c] + cam.offset + bright + n).clamp(0.0, 1.0);
            }
        }
    }
    Image { height: HEIGHT, width: WIDTH, data }
}

/// Generated records plus their pixels, index-aligned with the split.
#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub split: DatasetSplit,
    pub train_images: Vec<Image>,
    pub query_images: Vec<Image>,
    pub gallery_images: Vec<Image>,
}

fn file_name(dir: &str, pid: usize, cam: usize, k: usize) -> String {
    alloc::format!("{dir}/{:04}_c{}s1_{:06}_00.png", pid + 1, cam + 1, k)
}

/// `num_ids × cams × per_id_per_cam` train images; one query per
/// (identity, camera) and `per_id_per_cam` gallery images per (identity, camera).
/// Paths follow the Market-1501 layout so a written copy scans back identically.
pub fn make_synthetic_dataset(num_ids: usize, cams: usize, per_id_per_cam: usize, seed: u64) -> Result<SyntheticSet> {
    if num_ids < 2 || cams < 2 || per_id_per_cam == 0 {
        return Err(Error::Config("synthetic data needs >= 2 identities, >= 2 cameras, >= 1 image each".into()));
    }
    let ids: Vec<Identity> = (0..num_ids).map(|p| identity(seed, p)).collect();
    let cameras: Vec<Camera> = (0..cams).map(|c| camera(seed, c)).collect();
    let mut split = DatasetSplit { num_train_identities: num_ids, ..DatasetSplit::default() };
    let (mut tr, mut qu, mut ga) = (Vec::new(), Vec::new(), Vec::new());
    // (subset key, images per (id, cam))
    for (subset, per) in [(0u64, per_id_per_cam), (1, 1), (2, per_id_per_cam)] {
        for (pid, id) in ids.iter().enumerate() {
            for (c, cam) in cameras.iter().enumerate() {
                for k in 0..per {
                    let mut inst = rng::stream(seed, &[K_INST, subset, pid as u64, c as u64, k as u64]);
                    let img = render(id, cam, &mut inst);
                    let serial = (pid * cams + c) * per + k;
                    let (dir, label, out, imgs) = match subset {
                        0 => ("bounding_box_train", pid as i64, &mut split.train, &mut tr),
                        1 => ("query", pid as i64 + 1, &mut split.query, &mut qu),
                        _ => ("bounding_box_test", pid as i64 + 1, &mut split.gallery, &mut ga),
                    };
                    out.push(ImageRecord { path: file_name(dir, pid, c, serial), person_id: label, camera_id: c as u32 + 1, is_junk: false });
                    imgs.push(img);
                }
            }
        }
    }
    Ok(SyntheticSet { split, train_images: tr, query_images: qu, gallery_images: ga })
}
