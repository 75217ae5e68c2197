//! Records, splits, identity-balanced batching, and image preprocessing on
//! in-memory images.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ImageRecord {
    pub path: String,
    /// Dense label for train records; the file's identity otherwise (`-1` for junk).
    pub person_id: i64,
    pub camera_id: u32,
    pub is_junk: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetSplit {
    pub train: Vec<ImageRecord>,
    pub query: Vec<ImageRecord>,
    pub gallery: Vec<ImageRecord>,
    pub num_train_identities: usize,
}

impl DatasetSplit {
    /// Dense train labels, aligned with `train`.
    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|r| r.person_id as usize).collect()
    }
}

/// Parses `{pid}_c{cam}…` from a file name (directories are ignored).
pub fn parse_filename(path: &str) -> Result<(i64, u32)> {
    let name = path.rsplit(['/', '\\']).next().unwrap_or(path);
    let bad = || Error::Image(alloc::format!("cannot parse identity/camera from file name {path:?}"));
    let (pid, rest) = name.split_once('_').ok_or_else(bad)?;
    let pid: i64 = pid.parse().map_err(|_| bad())?;
    let rest = rest.strip_prefix('c').ok_or_else(bad)?;
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    let cam: u32 = digits.parse().map_err(|_| bad())?;
    if pid < -1 {
        return Err(bad());
    }
    Ok((pid, cam))
}

/// Builds records for one subset. Train subsets drop junk and distractor
/// files and relabel identities densely in order of sorted original ids.
pub fn records_from_paths(paths: &[String], train: bool) -> Result<(Vec<ImageRecord>, usize)> {
    let mut sorted: Vec<&String> = paths.iter().collect();
    sorted.sort();
    let mut parsed = Vec::with_capacity(sorted.len());
    for p in sorted {
        let (pid, cam) = parse_filename(p)?;
        parsed.push((p.clone(), pid, cam));
    }
    if !train {
        let recs = parsed
            .into_iter()
            .map(|(path, pid, cam)| ImageRecord { path, person_id: pid, camera_id: cam, is_junk: pid == -1 })
            .collect();
        return Ok((recs, 0));
    }
    parsed.retain(|&(_, pid, _)| pid > 0);
    let mut labels = BTreeMap::new();
    for (_, pid, _) in &parsed {
        labels.entry(*pid).or_insert(0usize);
    }
    for (i, v) in labels.values_mut().enumerate() {
        *v = i;
    }
    let recs = parsed
        .into_iter()
        .map(|(path, pid, cam)| ImageRecord { path, person_id: labels[&pid] as i64, camera_id: cam, is_junk: false })
        .collect();
    Ok((recs, labels.len()))
}

/// Assembles a split from file lists of the three subsets. Queries never
/// include junk files.
pub fn split_from_paths(train: &[String], query: &[String], gallery: &[String]) -> Result<DatasetSplit> {
    let (train, n) = records_from_paths(train, true)?;
    let (mut query, _) = records_from_paths(query, false)?;
    query.retain(|r| !r.is_junk);
    let (gallery, _) = records_from_paths(gallery, false)?;
    Ok(DatasetSplit { train, query, gallery, num_train_identities: n })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PkBatch {
    /// Indices into `split.train`, grouped by identity (`K` consecutive entries each).
    pub indices: Vec<usize>,
    pub p: usize,
    pub k: usize,
}

/// One epoch of P×K batches. Identities are shuffled and cut into groups of
/// `p`; a short last group is topped up with other identities. Each identity
/// contributes `k` distinct records, or `k` draws with replacement when it has
/// fewer than `k`.
pub fn make_pk_batches(split: &DatasetSplit, p: usize, k: usize, seed: u64) -> Result<Vec<PkBatch>> {
    if split.train.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }
    if p == 0 || k == 0 {
        return Err(Error::Config("P and K must be positive".into()));
    }
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in split.train.iter().enumerate() {
        by_id.entry(r.person_id as usize).or_default().push(i);
    }
    let ids: Vec<usize> = by_id.keys().copied().collect();
    if p > ids.len() {
        return Err(Error::NotEnoughIdentities { requested: p, available: ids.len() });
    }
    let mut rng = rng::stream(seed, &[0x5A3F]);
    let mut order = ids.clone();
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    for group in order.chunks(p) {
        let mut group = group.to_vec();
        if group.len() < p {
            let mut rest: Vec<usize> = ids.iter().copied().filter(|i| !group.contains(i)).collect();
            rest.shuffle(&mut rng);
            group.extend(rest.into_iter().take(p - group.len()));
        }
        let mut indices = Vec::with_capacity(p * k);
        for id in group {
            let pool = &by_id[&id];
            if pool.len() >= k {
                let mut pick = pool.clone();
                pick.shuffle(&mut rng);
                indices.extend_from_slice(&pick[..k]);
            } else {
                indices.extend((0..k).map(|_| pool[rng.random_range(0..pool.len())]));
            }
        }
        batches.push(PkBatch { indices, p, k });
    }
    Ok(batches)
}

/// Planar RGB image with values in `[0, 1]`, laid out `[3, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width || height == 0 || width == 0 {
            return Err(Error::Image(alloc::format!("{} values for a 3x{height}x{width} image", data.len())));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Image { height, width, data }
    }

    /// From interleaved 8-bit RGB.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(Error::Image(alloc::format!("{} bytes for a {height}x{width} RGB image", rgb.len())));
        }
        let hw = height * width;
        let mut data = vec![0.0; 3 * hw];
        for (i, px) in rgb.chunks(3).enumerate() {
            for c in 0..3 {
                data[c * hw + i] = px[c] as f32 / 255.0;
            }
        }
        Ok(Image { height, width, data })
    }

    /// Interleaved 8-bit RGB, rounding and clamping.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        let mut out = Vec::with_capacity(3 * hw);
        for i in 0..hw {
            for c in 0..3 {
                out.push(Float::round(self.data[c * hw + i].clamp(0.0, 1.0) * 255.0) as u8);
            }
        }
        out
    }

    /// Bilinear resampling with half-pixel centers; same size is a copy.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let (sh, sw) = (self.height, self.width);
        let (fy, fx) = (sh as f32 / height as f32, sw as f32 / width as f32);
        let axis = |dst: usize, f: f32, src: usize| -> Vec<(usize, usize, f32)> {
            (0..dst)
                .map(|o| {
                    let s = ((o as f32 + 0.5) * f - 0.5).max(0.0);
                    let i0 = (s as usize).min(src - 1);
                    let i1 = (i0 + 1).min(src - 1);
                    (i0, i1, s - i0 as f32)
                })
                .collect()
        };
        let ys = axis(height, fy, sh);
        let xs = axis(width, fx, sw);
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            let plane = &self.data[c * sh * sw..(c + 1) * sh * sw];
            for &(y0, y1, ty) in &ys {
                for &(x0, x1, tx) in &xs {
                    let a = plane[y0 * sw + x0] * (1.0 - tx) + plane[y0 * sw + x1] * tx;
                    let b = plane[y1 * sw + x0] * (1.0 - tx) + plane[y1 * sw + x1] * tx;
                    data.push(a * (1.0 - ty) + b * ty);
                }
            }
        }
        Image { height, width, data }
    }
}

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AugmentConfig {
    pub target_height: usize,
    pub target_width: usize,
    pub flip_probability: f64,
    pub erase_probability: f64,
    pub erase_area_range: (f64, f64),
    pub erase_aspect_range: (f64, f64),
    pub channel_mean: [f32; 3],
    pub channel_std: [f32; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            target_height: 256,
            target_width: 128,
            flip_probability: 0.5,
            erase_probability: 0.5,
            erase_area_range: (0.02, 0.4),
            erase_aspect_range: (0.3, 3.33),
            channel_mean: IMAGENET_MEAN,
            channel_std: IMAGENET_STD,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let (a0, a1) = self.erase_area_range;
        let (r0, r1) = self.erase_aspect_range;
        if !prob(self.flip_probability) || !prob(self.erase_probability) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        if !(0.0 < a0 && a0 <= a1 && a1 <= 1.0) || !(0.0 < r0 && r0 <= r1) {
            return Err(Error::Config("erase ranges must be positive and ordered".into()));
        }
        if self.channel_std.iter().any(|&s| s <= 0.0) || self.target_height == 0 || self.target_width == 0 {
            return Err(Error::Config("invalid normalization or target size".into()));
        }
        Ok(())
    }
}

/// Erased rectangle `(top, left, height, width)`.
pub type Rect = (usize, usize, usize, usize);

fn normalize(img: &Image, cfg: &AugmentConfig) -> Vec<f32> {
    let hw = img.height * img.width;
    let mut out = img.data.clone();
    for c in 0..3 {
        let (m, s) = (cfg.channel_mean[c], cfg.channel_std[c]);
        out[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    out
}

/// Picks an erase rectangle whose area fraction and aspect lie in the configured ranges.
fn sample_rect(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Option<Rect> {
    let total = (h * w) as f64;
    let (a0, a1) = cfg.erase_area_range;
    let (r0, r1) = cfg.erase_aspect_range;
    for _ in 0..100 {
        let area = rng.random_range(a0..=a1) * total;
        let aspect = Float::exp(rng.random_range(Float::ln(r0)..=Float::ln(r1)));
        let eh = Float::round(Float::sqrt(area * aspect)) as usize;
        let ew = Float::round(Float::sqrt(area / aspect)) as usize;
        let frac = (eh * ew) as f64 / total;
        if eh == 0 || ew == 0 || eh >= h || ew >= w || frac < a0 || frac > a1 {
            continue;
        }
        let top = rng.random_range(0..=h - eh);
        let left = rng.random_range(0..=w - ew);
        return Some((top, left, eh, ew));
    }
    None
}

/// Resize, random horizontal flip, normalize, random erasing; returns `[3, H, W]`
/// and the erased rectangle if any.
pub fn augment_train_with_rect(img: &Image, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<(Tensor<f32>, Option<Rect>)> {
    cfg.validate()?;
    let (h, w) = (cfg.target_height, cfg.target_width);
    let mut r = img.resize(h, w);
    if rng.random_bool(cfg.flip_probability) {
        for plane in r.data.chunks_mut(h * w) {
            for row in plane.chunks_mut(w) {
                row.reverse();
            }
        }
    }
    let mut data = normalize(&r, cfg);
    let mut rect = None;
    if rng.random_bool(cfg.erase_probability) {
        rect = sample_rect(h, w, cfg, rng);
        if let Some((top, left, eh, ew)) = rect {
            for c in 0..3 {
                for y in top..top + eh {
                    for x in left..left + ew {
                        data[c * h * w + y * w + x] = rng.random_range(0.0..1.0);
                    }
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[3, h, w], data)?, rect))
}

pub fn augment_train(img: &Image, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    augment_train_with_rect(img, cfg, rng).map(|(t, _)| t)
}

/// Resize and normalize only.
pub fn preprocess_test(img: &Image, cfg: &AugmentConfig) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let r = img.resize(cfg.target_height, cfg.target_width);
    Tensor::from_vec(&[3, cfg.target_height, cfg.target_width], normalize(&r, cfg))
}

/// Stacks `[3, H, W]` tensors into `[N, 3, H, W]`.
pub fn stack(items: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = items.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape() != shape.as_slice() {
            return Err(crate::error::shape_err("stack", "images differ in size"));
        }
        data.extend_from_slice(t.data());
    }
    let mut full = vec![items.len()];
    full.extend_from_slice(&shape);
    Tensor::from_vec(&full, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| String::from(*x)).collect()
    }

    #[test]
    fn filename_grammar() {
        assert_eq!(parse_filename("a/b/0001_c1s1_000001_00.jpg").unwrap(), (1, 1));
        assert_eq!(parse_filename("-1_c3s2_000123_01.jpg").unwrap(), (-1, 3));
        assert_eq!(parse_filename("0000_c6s1_000001_00.jpg").unwrap(), (0, 6));
        assert_eq!(parse_filename("0005_c2_f0046182.jpg").unwrap(), (5, 2));
        assert!(parse_filename("Thumbs.db").is_err());
        assert!(parse_filename("0001_x1.jpg").is_err());
    }

    #[test]
    fn fixture_train_subset() {
        let (recs, n) = records_from_paths(&s(&["t/0001_c2s1_000002_00.jpg", "t/0001_c1s1_000001_00.jpg"]), true).unwrap();
        assert_eq!(n, 1);
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].path, "t/0001_c1s1_000001_00.jpg");
        assert_eq!(recs.iter().map(|r| r.camera_id).collect::<Vec<_>>(), vec![1, 2]);
        assert!(recs.iter().all(|r| r.person_id == 0));
    }

    #[test]
    fn relabel_is_dense_and_order_independent() {
        let a = s(&["0042_c1_a.jpg", "0007_c2_b.jpg", "0042_c3_c.jpg", "0100_c1_d.jpg"]);
        let mut b = a.clone();
        b.reverse();
        let (ra, na) = records_from_paths(&a, true).unwrap();
        let (rb, _) = records_from_paths(&b, true).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(na, 3);
        let labels: Vec<i64> = ra.iter().map(|r| r.person_id).collect();
        assert_eq!(labels, vec![0, 1, 1, 2]);
    }

    #[test]
    fn junk_is_flagged_and_kept_out_of_queries() {
        let split = split_from_paths(
            &s(&["0001_c1_a.jpg", "0002_c1_a.jpg"]),
            &s(&["0003_c1_q.jpg", "-1_c1_q.jpg"]),
            &s(&["-1_c2_g.jpg", "0000_c2_g.jpg", "0003_c2_g.jpg"]),
        )
        .unwrap();
        assert_eq!(split.query.len(), 1);
        assert!(split.gallery.iter().any(|r| r.is_junk && r.person_id == -1));
        assert!(split.gallery.iter().any(|r| !r.is_junk && r.person_id == 0));
    }

    fn split_with_counts(counts: &[usize]) -> DatasetSplit {
        let mut train = Vec::new();
        for (pid, &c) in counts.iter().enumerate() {
            for j in 0..c {
                train.push(ImageRecord { path: alloc::format!("{pid}_{j}"), person_id: pid as i64, camera_id: 1, is_junk: false });
            }
        }
        DatasetSplit { train, query: vec![], gallery: vec![], num_train_identities: counts.len() }
    }

    fn check_batch(split: &DatasetSplit, b: &PkBatch) {
        assert_eq!(b.indices.len(), b.p * b.k);
        let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
        for &i in &b.indices {
            *counts.entry(split.train[i].person_id).or_default() += 1;
        }
        assert_eq!(counts.len(), b.p);
        assert!(counts.values().all(|&c| c == b.k));
    }

    #[test]
    fn pk_batches_respect_multiset_property() {
        let split = split_with_counts(&[6; 20]);
        let batches = make_pk_batches(&split, 16, 4, 3).unwrap();
        assert_eq!(batches.len(), 2);
        for b in &batches {
            assert_eq!(b.indices.len(), 64);
            check_batch(&split, b);
        }
    }

    #[test]
    fn single_record_batches() {
        let split = split_with_counts(&[2, 3, 1]);
        let batches = make_pk_batches(&split, 1, 1, 0).unwrap();
        assert_eq!(batches.len(), 3);
        assert!(batches.iter().all(|b| b.indices.len() == 1));
    }

    #[test]
    fn short_identity_draws_with_replacement() {
        let split = split_with_counts(&[2, 5, 5]);
        let batches = make_pk_batches(&split, 3, 4, 1).unwrap();
        let b = &batches[0];
        check_batch(&split, b);
        let ones: Vec<usize> = b.indices.iter().copied().filter(|&i| split.train[i].person_id == 0).collect();
        assert_eq!(ones.len(), 4);
        assert!(ones.iter().all(|&i| i < 2));
    }

    #[test]
    fn too_many_identities_requested() {
        let split = split_with_counts(&[2, 2]);
        assert!(matches!(make_pk_batches(&split, 3, 2, 0), Err(Error::NotEnoughIdentities { requested: 3, available: 2 })));
    }

    fn gradient_image(h: usize, w: usize) -> Image {
        let mut data = Vec::new();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(((c * 31 + y * 7 + x * 3) % 97) as f32 / 97.0);
                }
            }
        }
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn all_off_augmentation_is_plain_resize() {
        let img = gradient_image(100, 50);
        let cfg = AugmentConfig {
            flip_probability: 0.0,
            erase_probability: 0.0,
            channel_mean: [0.0; 3],
            channel_std: [1.0; 3],
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = augment_train(&img, &cfg, &mut rng).unwrap();
        assert_eq!(t.shape(), &[3, 256, 128]);
        assert_eq!(t.data(), img.resize(256, 128).data.as_slice());
    }

    #[test]
    fn erased_region_matches_reported_rectangle() {
        let img = gradient_image(256, 128);
        let cfg = AugmentConfig { flip_probability: 0.0, erase_probability: 1.0, ..AugmentConfig::default() };
        let clean = preprocess_test(&img, &cfg).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (t, rect) = augment_train_with_rect(&img, &cfg, &mut rng).unwrap();
            let (top, left, eh, ew) = rect.unwrap();
            let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
            for c in 0..3 {
                for y in 0..256 {
                    for x in 0..128 {
                        let i = c * 256 * 128 + y * 128 + x;
                        if t.data()[i] != clean.data()[i] {
                            (y0, y1, x0, x1) = (y0.min(y), y1.max(y), x0.min(x), x1.max(x));
                        }
                    }
                }
            }
            assert_eq!((y0, x0, y1 + 1 - y0, x1 + 1 - x0), (top, left, eh, ew));
            let frac = (eh * ew) as f64 / (256.0 * 128.0);
            assert!((0.02..=0.4).contains(&frac), "{frac}");
        }
    }

    #[test]
    fn replayed_rng_gives_same_output() {
        let img = gradient_image(64, 32);
        let cfg = AugmentConfig::default();
        let a = augment_train(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = augment_train(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flip_mirrors_columns() {
        let img = gradient_image(256, 128);
        let cfg = AugmentConfig { flip_probability: 1.0, erase_probability: 0.0, ..AugmentConfig::default() };
        let a = augment_train(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = preprocess_test(&img, &cfg).unwrap();
        assert_eq!(a.data()[5 * 128], b.data()[5 * 128 + 127]);
    }

    #[test]
    fn gray_image_normalizes_to_constant() {
        let img = Image::filled(300, 90, [0.8; 3]);
        let cfg = AugmentConfig { channel_mean: [0.5; 3], channel_std: [0.5; 3], ..AugmentConfig::default() };
        let t = preprocess_test(&img, &cfg).unwrap();
        assert_eq!(t.shape(), &[3, 256, 128]);
        let want = (0.8f32 - 0.5) / 0.5;
        assert!(t.data().iter().all(|&v| (v - want).abs() < 1e-6));
        assert_eq!(t, preprocess_test(&img, &cfg).unwrap());
    }

    #[test]
    fn rgb8_roundtrip() {
        let bytes: Vec<u8> = (0..4 * 2 * 3).map(|i| (i * 10) as u8).collect();
        let img = Image::from_rgb8(4, 2, &bytes).unwrap();
        assert_eq!(img.to_rgb8(), bytes);
    }

    proptest! {
        #[test]
        fn every_epoch_covers_all_identities(
            counts in proptest::collection::vec(1usize..7, 2..20),
            p_frac in 0.0f64..1.0,
            k in 1usize..5,
            seed in 0u64..1000,
        ) {
            let split = split_with_counts(&counts);
            let p = 1 + ((counts.len() - 1) as f64 * p_frac) as usize;
            let batches = make_pk_batches(&split, p, k, seed).unwrap();
            let mut seen = alloc::collections::BTreeSet::new();
            for b in &batches {
                check_batch(&split, b);
                seen.extend(b.indices.iter().map(|&i| split.train[i].person_id));
            }
            prop_assert_eq!(seen.len(), counts.len());
            prop_assert_eq!(batches.clone(), make_pk_batches(&split, p, k, seed).unwrap());
        }
    }
}
