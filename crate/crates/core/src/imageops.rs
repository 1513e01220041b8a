//! Derived image assets: marker overlays, corruptions, tiles and cutouts.
//!
//! Every asset carries the transform chain that produced it from its parent
//! image, and replaying that chain reproduces the pixels bit-exactly.

use std::collections::HashMap;

use image::{imageops, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::enrich::luminance;
use crate::model::{AnnotatedImage, BBox, MarkStyle, MarkTarget, MarkerColor, Marking};

pub const CUTOUT_GRAY: [u8; 3] = [128, 128, 128];
pub const BOX_STROKE: u32 = 3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ImageOpsError {
    #[error("object {0} not found in image")]
    UnknownObject(String),
    #[error("point ({x}, {y}) outside {width}x{height} image")]
    PointOutOfBounds { x: u32, y: u32, width: u32, height: u32 },
    #[error("object {0} requested with both marker colors")]
    ConflictingColors(String),
    #[error("rotation must be 90, 180 or 270 degrees, got {0}")]
    InvalidRotation(u32),
    #[error("{kind} magnitude {magnitude} is a no-op or out of range")]
    InvalidMagnitude { kind: &'static str, magnitude: f64 },
    #[error("rectangle {0:?} outside image")]
    RectOutOfBounds(BBox),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Blur,
    Noise,
    ColorShift,
    BrightnessShift,
    Rotation,
}

impl CorruptionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::Blur => "blur",
            CorruptionKind::Noise => "noise",
            CorruptionKind::ColorShift => "color_shift",
            CorruptionKind::BrightnessShift => "brightness_shift",
            CorruptionKind::Rotation => "rotation",
        }
    }
}

/// Default magnitude grids for each corruption kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionGrids {
    pub blur_sigma: Vec<f64>,
    pub noise_std: Vec<f64>,
    pub hue_degrees: Vec<f64>,
    pub brightness_factors: Vec<f64>,
}

impl Default for CorruptionGrids {
    fn default() -> Self {
        Self {
            blur_sigma: vec![2.0, 4.0, 8.0],
            noise_std: vec![15.0, 30.0, 60.0],
            hue_degrees: vec![60.0, 120.0, 180.0],
            brightness_factors: vec![0.5, 0.75, 1.25, 1.5],
        }
    }
}

/// One step of a transform chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Markers { markings: Vec<Marking> },
    Blur { sigma: f64, #[serde(default, skip_serializing_if = "Option::is_none")] region: Option<BBox> },
    Noise { std: f64, seed: u64, #[serde(default, skip_serializing_if = "Option::is_none")] region: Option<BBox> },
    ColorShift { degrees: f64, #[serde(default, skip_serializing_if = "Option::is_none")] region: Option<BBox> },
    Brightness { factor: f64, #[serde(default, skip_serializing_if = "Option::is_none")] region: Option<BBox> },
    Rotate { degrees: u32 },
    Crop { rect: BBox },
    Fill { rect: BBox, rgb: [u8; 3] },
    Solid { width: u32, height: u32, rgb: [u8; 3] },
}

impl Transform {
    pub fn apply(&self, img: &RgbImage) -> Result<RgbImage, ImageOpsError> {
        let in_bounds = |r: &BBox| r.x_max <= img.width() && r.y_max <= img.height() && !r.is_degenerate();
        let regional = |region: &Option<BBox>, f: &dyn Fn(&RgbImage) -> RgbImage| -> Result<RgbImage, ImageOpsError> {
            match region {
                None => Ok(f(img)),
                Some(r) => {
                    if !in_bounds(r) {
                        return Err(ImageOpsError::RectOutOfBounds(*r));
                    }
                    let crop = imageops::crop_imm(img, r.x_min, r.y_min, r.width(), r.height()).to_image();
                    let mut out = img.clone();
                    imageops::replace(&mut out, &f(&crop), r.x_min as i64, r.y_min as i64);
                    Ok(out)
                }
            }
        };
        match self {
            Transform::Markers { markings } => Ok(render_markings(img, markings)),
            Transform::Blur { sigma, region } => regional(region, &|i| gaussian_blur(i, *sigma)),
            Transform::Noise { std, seed, region } => regional(region, &|i| add_gaussian_noise(i, *std, *seed)),
            Transform::ColorShift { degrees, region } => regional(region, &|i| rotate_hue(i, *degrees)),
            Transform::Brightness { factor, region } => regional(region, &|i| scale_brightness(i, *factor)),
            Transform::Rotate { degrees } => rotate_exact(img, *degrees),
            Transform::Crop { rect } => {
                if !in_bounds(rect) {
                    return Err(ImageOpsError::RectOutOfBounds(*rect));
                }
                Ok(imageops::crop_imm(img, rect.x_min, rect.y_min, rect.width(), rect.height()).to_image())
            }
            Transform::Fill { rect, rgb } => {
                if !in_bounds(rect) {
                    return Err(ImageOpsError::RectOutOfBounds(*rect));
                }
                let mut out = img.clone();
                for y in rect.y_min..rect.y_max {
                    for x in rect.x_min..rect.x_max {
                        out.put_pixel(x, y, Rgb(*rgb));
                    }
                }
                Ok(out)
            }
            Transform::Solid { width, height, rgb } => Ok(RgbImage::from_pixel(*width, *height, Rgb(*rgb))),
        }
    }
}

/// A derived image and the recipe that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedAsset {
    pub asset_id: String,
    pub parent_image_id: String,
    pub transform_chain: Vec<Transform>,
    #[serde(skip)]
    pub pixels: RgbImage,
}

impl RenderedAsset {
    /// Replays `chain` on `parent` and names the result by a digest of its recipe.
    pub fn render(parent_image_id: &str, parent: &RgbImage, chain: Vec<Transform>) -> Result<Self, ImageOpsError> {
        let pixels = replay(parent, &chain)?;
        Ok(Self { asset_id: asset_id_for(parent_image_id, &chain), parent_image_id: parent_image_id.to_owned(), transform_chain: chain, pixels })
    }
}

pub fn replay(parent: &RgbImage, chain: &[Transform]) -> Result<RgbImage, ImageOpsError> {
    let mut img = parent.clone();
    for t in chain {
        img = t.apply(&img)?;
    }
    Ok(img)
}

pub fn asset_id_for(parent_image_id: &str, chain: &[Transform]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(parent_image_id.as_bytes());
    hasher.update([0u8]);
    hasher.update(serde_json::to_vec(chain).expect("transform chain serializes"));
    let digest = hasher.finalize();
    format!("a{}", hex::encode(&digest[..12]))
}

/// Marker request before object ids are resolved to boxes.
#[derive(Debug, Clone, PartialEq)]
pub enum MarkRequest {
    Object { object_id: String, color: MarkerColor },
    Point { x: u32, y: u32, color: MarkerColor },
}

pub fn point_radius(width: u32, height: u32) -> f64 {
    (0.006 * width.min(height) as f64).max(4.0)
}

/// Draws red/green box and point markers on an image.
pub fn draw_markers(image: &AnnotatedImage, requests: &[MarkRequest]) -> Result<RenderedAsset, ImageOpsError> {
    let mut colors: HashMap<&str, MarkerColor> = HashMap::new();
    let mut markings = Vec::with_capacity(requests.len());
    for req in requests {
        match req {
            MarkRequest::Object { object_id, color } => {
                let obj = image.object(object_id).ok_or_else(|| ImageOpsError::UnknownObject(object_id.clone()))?;
                if let Some(prev) = colors.insert(object_id, *color) {
                    if prev != *color {
                        return Err(ImageOpsError::ConflictingColors(object_id.clone()));
                    }
                }
                markings.push(Marking {
                    target: MarkTarget::Object { object_id: object_id.clone(), bbox: obj.bbox },
                    color: *color,
                    style: MarkStyle::Box,
                });
            }
            MarkRequest::Point { x, y, color } => {
                if *x >= image.width || *y >= image.height {
                    return Err(ImageOpsError::PointOutOfBounds { x: *x, y: *y, width: image.width, height: image.height });
                }
                markings.push(Marking { target: MarkTarget::Point { x: *x, y: *y }, color: *color, style: MarkStyle::Point });
            }
        }
    }
    RenderedAsset::render(&image.image_id, &image.pixels, vec![Transform::Markers { markings }])
}

/// Pixels covered by a box marker: the band of width [`BOX_STROKE`] just inside the bbox.
pub fn in_box_band(bbox: &BBox, x: u32, y: u32) -> bool {
    bbox.contains(x, y)
        && (x < bbox.x_min + BOX_STROKE
            || x + BOX_STROKE >= bbox.x_max
            || y < bbox.y_min + BOX_STROKE
            || y + BOX_STROKE >= bbox.y_max)
}

fn render_markings(img: &RgbImage, markings: &[Marking]) -> RgbImage {
    let mut out = img.clone();
    let (w, h) = out.dimensions();
    for m in markings {
        let rgb = Rgb(m.color.rgb());
        match &m.target {
            MarkTarget::Object { bbox, .. } => {
                for y in bbox.y_min..bbox.y_max.min(h) {
                    for x in bbox.x_min..bbox.x_max.min(w) {
                        if in_box_band(bbox, x, y) {
                            out.put_pixel(x, y, rgb);
                        }
                    }
                }
            }
            MarkTarget::Point { x, y } => {
                let r = point_radius(w, h);
                let reach = (r + 1.0).ceil() as i64;
                for dy in -reach..=reach {
                    for dx in -reach..=reach {
                        let (px, py) = (*x as i64 + dx, *y as i64 + dy);
                        if px < 0 || py < 0 || px >= w as i64 || py >= h as i64 {
                            continue;
                        }
                        let d2 = (dx * dx + dy * dy) as f64;
                        if d2 <= r * r {
                            out.put_pixel(px as u32, py as u32, rgb);
                        } else if d2 <= (r + 1.0) * (r + 1.0) {
                            out.put_pixel(px as u32, py as u32, Rgb([255, 255, 255]));
                        }
                    }
                }
            }
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    let (w, h) = img.dimensions();
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let mut horiz = vec![[0f64; 3]; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f64; 3];
            for (i, kv) in kernel.iter().enumerate() {
                let sx = (x as i64 + i as i64 - radius).clamp(0, w as i64 - 1) as u32;
                let p = img.get_pixel(sx, y).0;
                for c in 0..3 {
                    acc[c] += kv * p[c] as f64;
                }
            }
            horiz[(y * w + x) as usize] = acc;
        }
    }
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f64; 3];
            for (i, kv) in kernel.iter().enumerate() {
                let sy = (y as i64 + i as i64 - radius).clamp(0, h as i64 - 1) as u32;
                let p = horiz[(sy * w + x) as usize];
                for c in 0..3 {
                    acc[c] += kv * p[c];
                }
            }
            out.put_pixel(x, y, Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8)));
        }
    }
    out
}

/// Additive per-channel Gaussian noise from a seeded stream.
pub fn add_gaussian_noise(img: &RgbImage, std: f64, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("finite positive std");
    let mut out = img.clone();
    for p in out.pixels_mut() {
        for c in 0..3 {
            let v = p.0[c] as f64 + normal.sample(&mut rng);
            p.0[c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

pub fn rgb_to_hsv(rgb: [u8; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb.map(|c| c as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    (hue, sat, max)
}

pub fn hsv_to_rgb(hue: f64, sat: f64, val: f64) -> [u8; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = val * sat;
    let x = c * (1.0 - (h.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r, g, b].map(|v| ((v + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

pub fn rotate_hue(img: &RgbImage, degrees: f64) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        let (h, s, v) = rgb_to_hsv(p.0);
        p.0 = hsv_to_rgb(h + degrees, s, v);
    }
    out
}

pub fn scale_brightness(img: &RgbImage, factor: f64) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        p.0 = p.0.map(|c| (c as f64 * factor).round().clamp(0.0, 255.0) as u8);
    }
    out
}

pub fn rotate_exact(img: &RgbImage, degrees: u32) -> Result<RgbImage, ImageOpsError> {
    match degrees {
        90 => Ok(imageops::rotate90(img)),
        180 => Ok(imageops::rotate180(img)),
        270 => Ok(imageops::rotate270(img)),
        other => Err(ImageOpsError::InvalidRotation(other)),
    }
}

/// Builds the transform for one corruption, rejecting no-op magnitudes.
pub fn corruption_transform(
    kind: CorruptionKind,
    magnitude: f64,
    seed: u64,
    region: Option<BBox>,
) -> Result<Transform, ImageOpsError> {
    let invalid = || ImageOpsError::InvalidMagnitude { kind: kind.as_str(), magnitude };
    if !magnitude.is_finite() {
        return Err(invalid());
    }
    match kind {
        CorruptionKind::Blur if magnitude > 0.0 => Ok(Transform::Blur { sigma: magnitude, region }),
        CorruptionKind::Noise if magnitude > 0.0 => Ok(Transform::Noise { std: magnitude, seed, region }),
        CorruptionKind::ColorShift if magnitude.rem_euclid(360.0) != 0.0 => {
            Ok(Transform::ColorShift { degrees: magnitude, region })
        }
        CorruptionKind::BrightnessShift if magnitude > 0.0 && magnitude != 1.0 => {
            Ok(Transform::Brightness { factor: magnitude, region })
        }
        CorruptionKind::Rotation => {
            let deg = magnitude as u32;
            if deg as f64 != magnitude || !matches!(deg, 90 | 180 | 270) {
                return Err(ImageOpsError::InvalidRotation(magnitude.max(0.0) as u32));
            }
            Ok(Transform::Rotate { degrees: deg })
        }
        _ => Err(invalid()),
    }
}

/// Applies one corruption to an image, or only inside `region` when given.
pub fn apply_corruption(
    image_id: &str,
    pixels: &RgbImage,
    kind: CorruptionKind,
    magnitude: f64,
    seed: u64,
    region: Option<BBox>,
) -> Result<RenderedAsset, ImageOpsError> {
    let t = corruption_transform(kind, magnitude, seed, region)?;
    RenderedAsset::render(image_id, pixels, vec![t])
}

/// Square tile edge: 20% of the shorter image side, rounded to an even size.
pub fn tile_size(width: u32, height: u32) -> u32 {
    let s = ((0.2 * width.min(height) as f64) / 2.0).round() as u32 * 2;
    s.max(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileSet {
    pub tile_rect: BBox,
    pub distractor_rects: [BBox; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("tile placement infeasible: {0}")]
pub struct Ineligible(pub String);

const MAX_ENUMERATED_POSITIONS: u64 = 250_000;

/// Places three equally sized distractor rectangles with zero overlap with
/// `tile_rect` and with each other.
pub fn place_distractors(width: u32, height: u32, tile_rect: BBox, seed: u64) -> Result<TileSet, Ineligible> {
    let (tw, th) = (tile_rect.width(), tile_rect.height());
    if tile_rect.is_degenerate() || tile_rect.x_max > width || tile_rect.y_max > height {
        return Err(Ineligible(format!("tile {tile_rect:?} not inside {width}x{height}")));
    }
    let nx = (width - tw + 1) as u64;
    let ny = (height - th + 1) as u64;
    let step = {
        let mut s = 1u32;
        while (nx / s as u64 + 1) * (ny / s as u64 + 1) > MAX_ENUMERATED_POSITIONS {
            s += 1;
        }
        s
    };
    let mut candidates: Vec<BBox> = Vec::new();
    let mut y = 0;
    while y + th <= height {
        let mut x = 0;
        while x + tw <= width {
            let r = BBox::new(x, y, x + tw, y + th);
            if r.intersection_area(&tile_rect) == 0 {
                candidates.push(r);
            }
            x += step;
        }
        y += step;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    let mut chosen: Vec<BBox> = Vec::with_capacity(3);
    for c in candidates {
        if chosen.iter().all(|o| o.intersection_area(&c) == 0) {
            chosen.push(c);
            if chosen.len() == 3 {
                return Ok(TileSet { tile_rect, distractor_rects: [chosen[0], chosen[1], chosen[2]] });
            }
        }
    }
    Err(Ineligible(format!("no room for 3 disjoint {tw}x{th} distractors in {width}x{height}")))
}

/// Tile rectangle plus distractors, cutout and tile crops for a jigsaw task.
#[derive(Debug, Clone)]
pub struct Jigsaw {
    pub tiles: TileSet,
    pub cutout: RenderedAsset,
    pub correct: RenderedAsset,
    pub distractors: [RenderedAsset; 3],
}

/// Cuts `tile_rect` out of the image (mid-gray fill) and crops the correct
/// tile plus three disjoint distractors. `rotation` rotates every tile.
pub fn extract_tile(
    image_id: &str,
    pixels: &RgbImage,
    tile_rect: BBox,
    rotation: Option<u32>,
    seed: u64,
) -> Result<Jigsaw, Ineligible> {
    let tiles = place_distractors(pixels.width(), pixels.height(), tile_rect, seed)?;
    let render = |chain: Vec<Transform>| {
        RenderedAsset::render(image_id, pixels, chain).map_err(|e| Ineligible(e.to_string()))
    };
    let crop = |rect: BBox| {
        let mut chain = vec![Transform::Crop { rect }];
        if let Some(deg) = rotation {
            chain.push(Transform::Rotate { degrees: deg });
        }
        render(chain)
    };
    let cutout = render(vec![Transform::Fill { rect: tile_rect, rgb: CUTOUT_GRAY }])?;
    let correct = crop(tile_rect)?;
    let distractors = [crop(tiles.distractor_rects[0])?, crop(tiles.distractor_rects[1])?, crop(tiles.distractor_rects[2])?];
    Ok(Jigsaw { tiles, cutout, correct, distractors })
}

/// Variance of the 4-neighbour Laplacian of luminance over interior pixels.
pub fn laplacian_variance(img: &RgbImage) -> f64 {
    let (w, h) = img.dimensions();
    if w < 3 || h < 3 {
        return 0.0;
    }
    let lum = |x: u32, y: u32| luminance(img.get_pixel(x, y).0) * 255.0;
    let mut values = Vec::with_capacity(((w - 2) * (h - 2)) as usize);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            values.push(lum(x - 1, y) + lum(x + 1, y) + lum(x, y - 1) + lum(x, y + 1) - 4.0 * lum(x, y));
        }
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64
}

/// Mean luminance of a whole image.
pub fn mean_luminance(img: &RgbImage) -> f64 {
    let n = (img.width() * img.height()) as f64;
    img.pixels().map(|p| luminance(p.0)).sum::<f64>() / n
}

/// Mean absolute per-channel difference between equally sized images.
pub fn mean_abs_delta(a: &RgbImage, b: &RgbImage) -> f64 {
    let total: u64 = a.as_raw().iter().zip(b.as_raw()).map(|(x, y)| x.abs_diff(*y) as u64).sum();
    total as f64 / a.as_raw().len().max(1) as f64
}
