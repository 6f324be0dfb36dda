//! Synthetic multi-domain segmentation data, directory ingestion, cropping
//! and tile merging.
//!
//! Each domain renders pale pink "tissue" with darker purple foreground
//! regions, then applies its own colour transform. Shape family stands in
//! for organ type, the colour transform for scanner differences.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DOMAINS_CSV: &str = "domains.csv";
pub const DESK_IMAGE_SIZE: usize = 96;
pub const TRAIN_PER_DOMAIN: usize = 60;
pub const TEST_PER_DOMAIN: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Ellipse,
    Polygon,
    BlobUnion,
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(Self::Ellipse),
            "polygon" => Ok(Self::Polygon),
            "blob-union" => Ok(Self::BlobUnion),
            _ => Err(Error::Config(format!("unknown shape family `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: String,
    pub shape_family: ShapeFamily,
    pub hue_shift: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub image_size: usize,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, lo: f64, hi: f64| {
            if (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside [{lo}, {hi}]")))
            }
        };
        check("hue_shift", self.hue_shift, -0.5, 0.5)?;
        check("contrast", self.contrast, 0.5, 2.0)?;
        check("noise_sigma", self.noise_sigma, 0.0, 0.1)?;
        if self.image_size < 16 {
            return Err(Error::Config(format!("image_size {} is below 16", self.image_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// H x W x 3, values in [0, 1].
    pub image: Array3<f32>,
    pub mask: Array2<bool>,
    pub domain_id: String,
    pub sample_id: String,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.mask.ncols()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len().max(1) as f64
    }
}

// Base palette before the domain transform.
const BACKGROUND: [f32; 3] = [0.94, 0.80, 0.86];
const BACKGROUND_SPECK: [f32; 3] = [0.84, 0.62, 0.74];
const FOREGROUND: [f32; 3] = [0.58, 0.34, 0.62];
const FOREGROUND_NUCLEUS: [f32; 3] = [0.34, 0.16, 0.44];

enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, cos: f64, sin: f64 },
    Polygon(Vec<(f64, f64)>),
    Blobs(Vec<(f64, f64, f64)>),
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Ellipse { cy, cx, ry, rx, cos, sin } => {
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon(pts) => {
                let mut inside = false;
                let mut j = pts.len() - 1;
                for i in 0..pts.len() {
                    let ((yi, xi), (yj, xj)) = (pts[i], pts[j]);
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
            Shape::Blobs(circles) => circles.iter().any(|&(cy, cx, r)| (y - cy).powi(2) + (x - cx).powi(2) <= r * r),
        }
    }
}

fn random_shape(family: ShapeFamily, size: f64, rng: &mut ChaCha8Rng) -> Shape {
    let cy = rng.random_range(0.15..0.85) * size;
    let cx = rng.random_range(0.15..0.85) * size;
    match family {
        ShapeFamily::Ellipse => {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Shape::Ellipse {
                cy,
                cx,
                ry: rng.random_range(0.07..0.2) * size,
                rx: rng.random_range(0.07..0.2) * size,
                cos: theta.cos(),
                sin: theta.sin(),
            }
        }
        ShapeFamily::Polygon => {
            let k = rng.random_range(5..=8);
            let base = rng.random_range(0.08..0.2) * size;
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let pts = (0..k)
                .map(|i| {
                    let a = phase + std::f64::consts::TAU * i as f64 / k as f64;
                    let r = base * rng.random_range(0.6..1.2);
                    (cy + r * a.sin(), cx + r * a.cos())
                })
                .collect();
            Shape::Polygon(pts)
        }
        ShapeFamily::BlobUnion => {
            let n = rng.random_range(3..=5);
            let spread = 0.08 * size;
            let circles = (0..n)
                .map(|_| {
                    (
                        cy + rng.random_range(-spread..spread),
                        cx + rng.random_range(-spread..spread),
                        rng.random_range(0.05..0.11) * size,
                    )
                })
                .collect();
            Shape::Blobs(circles)
        }
    }
}

/// Per-sample generator, derived from the domain seed so samples can be
/// rendered in any order.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Renders sample `index` of a domain before any colour transform.
pub fn render_raw(spec: &DomainSpec, index: usize) -> (Array3<f32>, Array2<bool>) {
    let n = spec.image_size;
    let mut rng = sample_rng(spec.seed, index);
    let mask = loop {
        let count = rng.random_range(1..=4);
        let shapes: Vec<Shape> = (0..count).map(|_| random_shape(spec.shape_family, n as f64, &mut rng)).collect();
        let mask = Array2::from_shape_fn((n, n), |(y, x)| {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            shapes.iter().any(|s| s.contains(py, px))
        });
        let fg = mask.iter().filter(|&&m| m).count() as f64 / (n * n) as f64;
        if fg > 0.0 && fg < 0.9 {
            break mask;
        }
    };
    let mut image = Array3::zeros((n, n, 3));
    for y in 0..n {
        for x in 0..n {
            let fg = mask[[y, x]];
            let speck = rng.random::<f32>() < if fg { 0.3 } else { 0.06 };
            let shade: f32 = rng.random_range(-0.03..0.03);
            let colour = match (fg, speck) {
                (true, true) => FOREGROUND_NUCLEUS,
                (true, false) => FOREGROUND,
                (false, true) => BACKGROUND_SPECK,
                (false, false) => BACKGROUND,
            };
            for ch in 0..3 {
                image[[y, x, ch]] = (colour[ch] + shade).clamp(0.0, 1.0);
            }
        }
    }
    (image, mask)
}

/// Hue rotation in YIQ space, contrast about mid-grey, additive Gaussian
/// noise. Identity settings leave the image untouched.
pub fn apply_color_transform(image: &mut Array3<f32>, spec: &DomainSpec, rng: &mut ChaCha8Rng) {
    if spec.hue_shift != 0.0 {
        let (sin, cos) = (std::f64::consts::TAU * spec.hue_shift).sin_cos();
        for mut px in image.rows_mut() {
            let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
            let yy = 0.299 * r + 0.587 * g + 0.114 * b;
            let i = 0.596 * r - 0.274 * g - 0.322 * b;
            let q = 0.211 * r - 0.523 * g + 0.312 * b;
            let (i, q) = (i * cos - q * sin, i * sin + q * cos);
            px[0] = (yy + 0.956 * i + 0.621 * q).clamp(0.0, 1.0) as f32;
            px[1] = (yy - 0.272 * i - 0.647 * q).clamp(0.0, 1.0) as f32;
            px[2] = (yy - 1.106 * i + 1.703 * q).clamp(0.0, 1.0) as f32;
        }
    }
    if spec.contrast != 1.0 {
        let c = spec.contrast as f32;
        image.mapv_inplace(|v| (0.5 + c * (v - 0.5)).clamp(0.0, 1.0));
    }
    if spec.noise_sigma != 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
        image.mapv_inplace(|v| (v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32);
    }
}

fn render_sample(spec: &DomainSpec, index: usize) -> ImageSample {
    let (mut image, mask) = render_raw(spec, index);
    let mut rng = sample_rng(spec.seed ^ 0x5eed_c010_0000_0000, index);
    apply_color_transform(&mut image, spec, &mut rng);
    ImageSample {
        image,
        mask,
        domain_id: spec.domain_id.clone(),
        sample_id: format!("{}_{index:03}", spec.domain_id),
    }
}

/// Renders `count` samples; the result does not depend on thread count.
pub fn generate_domain(spec: &DomainSpec, count: usize) -> Result<Vec<ImageSample>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    Ok((0..count).into_par_iter().map(|i| render_sample(spec, i)).collect())
}

/// The six desk domains. The first three are seen during training; the
/// last three differ in every appearance parameter.
pub fn standard_domains(seed: u64, image_size: usize) -> (Vec<DomainSpec>, Vec<DomainSpec>) {
    let table: [(&str, ShapeFamily, f64, f64, f64); 6] = [
        ("A", ShapeFamily::Ellipse, 0.0, 1.0, 0.02),
        ("B", ShapeFamily::Polygon, 0.06, 0.85, 0.04),
        ("C", ShapeFamily::BlobUnion, -0.06, 1.2, 0.03),
        ("D", ShapeFamily::Ellipse, 0.03, 0.9, 0.05),
        ("E", ShapeFamily::Polygon, -0.04, 1.35, 0.025),
        ("F", ShapeFamily::BlobUnion, 0.09, 0.75, 0.06),
    ];
    let specs: Vec<DomainSpec> = table
        .iter()
        .enumerate()
        .map(|(i, &(id, family, hue, contrast, noise))| DomainSpec {
            domain_id: id.to_string(),
            shape_family: family,
            hue_shift: hue,
            contrast,
            noise_sigma: noise,
            seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64 * 7919),
            image_size,
        })
        .collect();
    let (seen, unseen) = specs.split_at(3);
    (seen.to_vec(), unseen.to_vec())
}

pub const SEEN_DOMAINS: [&str; 3] = ["A", "B", "C"];

#[derive(Clone, Debug)]
pub struct Protocol {
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

/// Train on the three seen domains; test on all six, with seen-domain test
/// samples drawn from a different seed than their training counterparts.
pub fn generate_protocol(seed: u64, image_size: usize, train_per_domain: usize, test_per_domain: usize) -> Result<Protocol> {
    let (seen, unseen) = standard_domains(seed, image_size);
    let mut train = Vec::new();
    for spec in &seen {
        train.extend(generate_domain(spec, train_per_domain)?);
    }
    let mut test = Vec::new();
    for spec in seen.iter().chain(&unseen) {
        let mut spec = spec.clone();
        spec.seed = spec.seed.wrapping_add(0x7e57);
        test.extend(generate_domain(&spec, test_per_domain)?);
    }
    Ok(Protocol { train, test })
}

/// Stratified split: every domain contributes its share, and the total
/// train size is exactly `round(ratio * N)`.
pub fn split_train_val(samples: &[ImageSample], ratio: f64, seed: u64) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Validation(format!("split ratio {ratio} must lie strictly between 0 and 1")));
    }
    let total = samples.len();
    let want = (ratio * total as f64).round() as usize;
    if want == 0 || want == total {
        return Err(Error::Validation(format!("split of {total} samples at ratio {ratio} leaves one side empty")));
    }
    let mut by_domain: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_domain.entry(&s.domain_id).or_default().push(i);
    }
    // Largest-remainder apportionment of the train quota across domains.
    let mut quotas: Vec<(usize, f64)> = by_domain
        .values()
        .map(|idx| {
            let exact = ratio * idx.len() as f64;
            (exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut short = want - quotas.iter().map(|q| q.0).sum::<usize>();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
    for &d in &order {
        if short == 0 {
            break;
        }
        quotas[d].0 += 1;
        short -= 1;
    }
    let mut in_train = vec![false; total];
    for (d, idx) in by_domain.values().enumerate() {
        let mut idx = idx.clone();
        let mut rng = sample_rng(seed, d);
        idx.shuffle(&mut rng);
        for &i in &idx[..quotas[d].0] {
            in_train[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::with_capacity(want), Vec::with_capacity(total - want));
    for (s, t) in samples.iter().zip(in_train) {
        if t {
            train.push(s.clone())
        } else {
            val.push(s.clone())
        }
    }
    Ok((train, val))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropPolicy {
    Random { seed: u64 },
    Sliding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub sample: ImageSample,
    pub y: usize,
    pub x: usize,
}

/// Tile offsets along one axis: stride `size / 2`, last tile flush with
/// the far edge.
pub fn sliding_offsets(extent: usize, size: usize) -> Vec<usize> {
    let stride = (size / 2).max(1);
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + size < extent).collect();
    out.push(extent - size);
    out
}

pub fn crop(sample: &ImageSample, size: usize, policy: CropPolicy) -> Result<Vec<Crop>> {
    let (h, w) = (sample.height(), sample.width());
    if size == 0 || size > h.min(w) {
        return Err(Error::shape("crop size", format!("<= {}", h.min(w)), size));
    }
    let coords: Vec<(usize, usize)> = match policy {
        CropPolicy::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            vec![(rng.random_range(0..=h - size), rng.random_range(0..=w - size))]
        }
        CropPolicy::Sliding => {
            let xs = sliding_offsets(w, size);
            sliding_offsets(h, size).into_iter().flat_map(|y| xs.iter().map(move |&x| (y, x))).collect()
        }
    };
    Ok(coords
        .into_iter()
        .map(|(y, x)| Crop {
            sample: ImageSample {
                image: sample.image.slice(s![y..y + size, x..x + size, ..]).to_owned(),
                mask: sample.mask.slice(s![y..y + size, x..x + size]).to_owned(),
                domain_id: sample.domain_id.clone(),
                sample_id: format!("{}@{y},{x}", sample.sample_id),
            },
            y,
            x,
        })
        .collect())
}

/// Per-pixel mean of overlapping tiles.
pub fn merge_tiles(tile_probs: &[Array2<f64>], coords: &[(usize, usize)], h: usize, w: usize) -> Result<Array2<f64>> {
    if tile_probs.len() != coords.len() {
        return Err(Error::shape("merge coordinates", tile_probs.len(), coords.len()));
    }
    let mut sum = Array2::<f64>::zeros((h, w));
    let mut count = Array2::<u32>::zeros((h, w));
    for (tile, &(y, x)) in tile_probs.iter().zip(coords) {
        let (th, tw) = tile.dim();
        if y + th > h || x + tw > w {
            return Err(Error::shape("tile extent", format!("within {h}x{w}"), format!("{th}x{tw} at ({y},{x})")));
        }
        sum.slice_mut(s![y..y + th, x..x + tw]).zip_mut_with(tile, |a, &b| *a += b);
        count.slice_mut(s![y..y + th, x..x + tw]).mapv_inplace(|c| c + 1);
    }
    if let Some(((y, x), _)) = count.indexed_iter().find(|(_, &c)| c == 0) {
        return Err(Error::Coverage { y, x });
    }
    sum.zip_mut_with(&count, |s, &c| *s /= c as f64);
    Ok(sum)
}

fn image_error(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn read_domains(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join(DOMAINS_CSV);
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let (id, domain) = line
            .split_once(',')
            .ok_or_else(|| Error::Ingestion(format!("{}: line {} is not `sample_id,domain_id`", path.display(), i + 1)))?;
        out.insert(id.trim().to_string(), domain.trim().to_string());
    }
    Ok(out)
}

/// Reads `images/<id>.png` with `masks/<id>.png`; mask pixels > 0 are
/// foreground. Domains come from `domains.csv` when present.
pub fn load_dataset_dir(dir: &Path) -> Result<Vec<ImageSample>> {
    let (img_dir, mask_dir) = (dir.join("images"), dir.join("masks"));
    if !img_dir.is_dir() {
        return Err(Error::Ingestion(format!("{} has no images/ directory", dir.display())));
    }
    let mut stems = Vec::new();
    for entry in fs::read_dir(&img_dir).map_err(Error::io(&img_dir))? {
        let path = entry.map_err(Error::io(&img_dir))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    let missing: Vec<String> = stems
        .iter()
        .filter(|s| !mask_dir.join(format!("{s}.png")).is_file())
        .map(|s| format!("images/{s}.png"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Ingestion(format!("no mask for {}", missing.join(", "))));
    }
    let domains = read_domains(dir)?;
    stems
        .par_iter()
        .map(|stem| {
            let ip = img_dir.join(format!("{stem}.png"));
            let img = image::open(&ip).map_err(image_error(&ip))?.to_rgb8();
            let (w, h) = img.dimensions();
            let image = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
                img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
            });
            let mask = crate::metrics::load_mask(&mask_dir.join(format!("{stem}.png")))?;
            if mask.dim() != (h as usize, w as usize) {
                return Err(Error::shape("mask size", format!("{h}x{w} for {stem}"), format!("{:?}", mask.dim())));
            }
            Ok(ImageSample {
                image,
                mask,
                domain_id: domains.get(stem).cloned().unwrap_or_else(|| "unknown".into()),
                sample_id: stem.clone(),
            })
        })
        .collect()
}

pub fn save_image(image: &Array3<f32>, path: &Path) -> Result<()> {
    let (h, w, _) = image.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(image_error(path))
}

/// Writes the directory layout read by [`load_dataset_dir`].
pub fn write_dataset_dir(samples: &[ImageSample], dir: &Path) -> Result<()> {
    let (img_dir, mask_dir) = (dir.join("images"), dir.join("masks"));
    for d in [&img_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(Error::io(d))?;
    }
    samples.par_iter().try_for_each(|s| {
        save_image(&s.image, &img_dir.join(format!("{}.png", s.sample_id)))?;
        crate::metrics::save_mask(&s.mask, &mask_dir.join(format!("{}.png", s.sample_id)))
    })?;
    let mut csv = String::from("sample_id,domain_id\n");
    for s in samples {
        writeln!(csv, "{},{}", s.sample_id, s.domain_id).unwrap();
    }
    let path = dir.join(DOMAINS_CSV);
    fs::write(&path, csv).map_err(Error::io(&path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: &str) -> DomainSpec {
        DomainSpec {
            domain_id: id.into(),
            shape_family: ShapeFamily::BlobUnion,
            hue_shift: 0.1,
            contrast: 1.3,
            noise_sigma: 0.05,
            seed: 11,
            image_size: 32,
        }
    }

    fn sample(domain: &str, i: usize) -> ImageSample {
        ImageSample {
            image: Array3::zeros((4, 4, 3)),
            mask: Array2::from_elem((4, 4), false),
            domain_id: domain.into(),
            sample_id: format!("{domain}{i}"),
        }
    }

    #[test]
    fn generation_is_deterministic_and_thread_independent() {
        let a = generate_domain(&spec("A"), 6).unwrap();
        let b = generate_domain(&spec("A"), 6).unwrap();
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| generate_domain(&spec("A"), 6).unwrap());
        assert_eq!(a, c);
        // A sample does not depend on how many were requested.
        assert_eq!(generate_domain(&spec("A"), 2).unwrap()[1], a[1]);
    }

    #[test]
    fn identity_transform_returns_raw_render() {
        let mut s = spec("A");
        s.hue_shift = 0.0;
        s.contrast = 1.0;
        s.noise_sigma = 0.0;
        let samples = generate_domain(&s, 3).unwrap();
        for (i, smp) in samples.iter().enumerate() {
            let (raw, mask) = render_raw(&s, i);
            assert_eq!(smp.image, raw);
            assert_eq!(smp.mask, mask);
        }
    }

    #[test]
    fn samples_satisfy_invariants() {
        for family in [ShapeFamily::Ellipse, ShapeFamily::Polygon, ShapeFamily::BlobUnion] {
            let mut s = spec("X");
            s.shape_family = family;
            for smp in generate_domain(&s, 20).unwrap() {
                let fg = smp.foreground_fraction();
                assert!(fg > 0.0 && fg < 0.9, "{family:?}: {fg}");
                assert!(smp.image.iter().all(|v| (0.0..=1.0).contains(v)));
                assert_eq!(smp.image.dim(), (32, 32, 3));
            }
        }
    }

    #[test]
    fn foreground_is_darker_than_background_in_raw_render() {
        let (img, mask) = render_raw(&spec("A"), 0);
        let mean = |want: bool| {
            let v: Vec<f32> = mask
                .indexed_iter()
                .filter(|(_, &m)| m == want)
                .map(|((y, x), _)| img[[y, x, 0]] + img[[y, x, 1]] + img[[y, x, 2]])
                .collect();
            v.iter().sum::<f32>() / v.len() as f32
        };
        assert!(mean(true) < mean(false) - 0.5);
    }

    #[test]
    fn out_of_range_spec_is_rejected() {
        let mut s = spec("A");
        s.contrast = 2.5;
        assert!(generate_domain(&s, 1).is_err());
        assert!(generate_domain(&spec("A"), 0).is_err());
    }

    #[test]
    fn protocol_mirrors_table_structure() {
        let p = generate_protocol(3, 24, 60, 15).unwrap();
        assert_eq!(p.train.len(), 180);
        let train_domains: std::collections::BTreeSet<_> = p.train.iter().map(|s| s.domain_id.as_str()).collect();
        assert_eq!(train_domains.into_iter().collect::<Vec<_>>(), SEEN_DOMAINS);
        assert_eq!(p.test.len(), 90);
        let test_domains: std::collections::BTreeSet<_> = p.test.iter().map(|s| s.domain_id.as_str()).collect();
        assert_eq!(test_domains.len(), 6);
        // Seen-domain test images are new renders, not copies of training ones.
        assert_ne!(p.train[0].image, p.test[0].image);
    }

    #[test]
    fn split_sizes_and_stratification() {
        let samples: Vec<_> = (0..180).map(|i| sample(["A", "B", "C"][i % 3], i)).collect();
        let (t, v) = split_train_val(&samples, 0.8, 1).unwrap();
        assert_eq!((t.len(), v.len()), (144, 36));
        let ids: std::collections::BTreeSet<_> = t.iter().chain(&v).map(|s| s.sample_id.clone()).collect();
        assert_eq!(ids.len(), 180);

        let ten: Vec<_> = (0..30).map(|i| sample(["A", "B", "C"][i / 10], i)).collect();
        let (t, v) = split_train_val(&ten, 0.8, 9).unwrap();
        for d in ["A", "B", "C"] {
            assert_eq!(t.iter().filter(|s| s.domain_id == d).count(), 8);
            assert_eq!(v.iter().filter(|s| s.domain_id == d).count(), 2);
        }
        assert_eq!(split_train_val(&ten, 0.8, 9).unwrap().0, t);
        assert_ne!(split_train_val(&ten, 0.8, 10).unwrap().0, t);
        assert!(split_train_val(&ten, 1.0, 9).is_err());
        assert!(split_train_val(&ten, 0.0, 9).is_err());
        assert!(split_train_val(&ten[..1], 0.8, 9).is_err());
    }

    #[test]
    fn split_size_law_holds_for_uneven_domains() {
        for n in 2..40 {
            for ratio in [0.1, 0.33, 0.5, 0.8, 0.95] {
                let samples: Vec<_> = (0..n).map(|i| sample(["A", "B", "C", "D"][(i * i) % 4], i)).collect();
                let want = (ratio * n as f64).round() as usize;
                match split_train_val(&samples, ratio, 5) {
                    Ok((t, v)) => {
                        assert_eq!(t.len(), want);
                        assert_eq!(t.len() + v.len(), n);
                    }
                    Err(_) => assert!(want == 0 || want == n),
                }
            }
        }
    }

    #[test]
    fn sliding_tiles_cover_the_image() {
        assert_eq!(sliding_offsets(96, 64), vec![0, 32]);
        assert_eq!(sliding_offsets(64, 64), vec![0]);
        assert_eq!(sliding_offsets(100, 64), vec![0, 32, 36]);
        let smp = generate_domain(&spec("A"), 1).unwrap().remove(0);
        let tiles = crop(&smp, 32, CropPolicy::Sliding).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].sample.image, smp.image);
        let tiles = crop(&smp, 16, CropPolicy::Sliding).unwrap();
        assert_eq!(tiles.len(), 9);
        let probs: Vec<_> = tiles.iter().map(|t| t.sample.mask.mapv(|m| m as u8 as f64)).collect();
        let coords: Vec<_> = tiles.iter().map(|t| (t.y, t.x)).collect();
        let merged = merge_tiles(&probs, &coords, 32, 32).unwrap();
        assert_eq!(merged, smp.mask.mapv(|m| m as u8 as f64));
    }

    #[test]
    fn random_crop_keeps_image_and_mask_aligned() {
        let smp = generate_domain(&spec("A"), 1).unwrap().remove(0);
        let c = crop(&smp, 20, CropPolicy::Random { seed: 4 }).unwrap().remove(0);
        assert_eq!(c.sample.mask, smp.mask.slice(s![c.y..c.y + 20, c.x..c.x + 20]));
        assert_eq!(c.sample.image, smp.image.slice(s![c.y..c.y + 20, c.x..c.x + 20, ..]));
        assert!(matches!(crop(&smp, 33, CropPolicy::Sliding), Err(Error::Shape { .. })));
    }

    #[test]
    fn merge_averages_overlaps_and_detects_gaps() {
        let tiles = vec![Array2::from_elem((4, 4), 0.2), Array2::from_elem((4, 4), 0.6)];
        let merged = merge_tiles(&tiles, &[(0, 0), (0, 2)], 4, 6).unwrap();
        assert!((merged[[1, 0]] - 0.2).abs() < 1e-15);
        assert!((merged[[1, 3]] - 0.4).abs() < 1e-15);
        assert!((merged[[1, 5]] - 0.6).abs() < 1e-15);
        assert!(matches!(merge_tiles(&tiles, &[(0, 0), (0, 2)], 4, 7), Err(Error::Coverage { y: 0, x: 6 })));
        let one = merge_tiles(&tiles[..1], &[(0, 0)], 4, 4).unwrap();
        assert_eq!(one, tiles[0]);
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_domain(&spec("Q"), 3).unwrap();
        write_dataset_dir(&samples, dir.path()).unwrap();
        let loaded = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.mask, b.mask);
            assert_eq!(b.domain_id, "Q");
            let err = a.image.iter().zip(&b.image).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
            assert!(err <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn ingestion_maps_nonzero_mask_values_and_reports_missing_masks() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        fs::create_dir_all(dir.path().join("masks")).unwrap();
        save_image(&Array3::from_elem((1, 3, 3), 0.5), &dir.path().join("images/a.png")).unwrap();
        image::GrayImage::from_raw(3, 1, vec![0, 128, 255]).unwrap().save(dir.path().join("masks/a.png")).unwrap();
        let loaded = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(loaded[0].mask.iter().copied().collect::<Vec<_>>(), [false, true, true]);
        assert_eq!(loaded[0].domain_id, "unknown");
        save_image(&Array3::from_elem((1, 3, 3), 0.5), &dir.path().join("images/b.png")).unwrap();
        match load_dataset_dir(dir.path()) {
            Err(Error::Ingestion(msg)) => assert!(msg.contains("images/b.png"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
