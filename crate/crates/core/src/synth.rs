//! Synthetic scenes with known ground truth, used for fixtures, demos and
//! end-to-end tests.
//!
//! Each scene is a textured background with a few flat-hued objects painted
//! in order, so later objects occlude earlier ones. Depth is analytic:
//! a vertical background ramp plus one constant depth per object, with
//! later objects closer.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::imageops::hsv_to_rgb;
use crate::ingest::{encode_rle_string, mask_to_rle, save_depth_png, DepthMap, IngestError};
use crate::model::{
    AnnotatedImage, Answer, AnswerType, Direction, HumanAttribute, HumanRating, Mask, MarkerColor, ObjectInstance,
    RatingItem, TaskInstance,
};

pub const SYNTH_CLASSES: [&str; 8] = ["cup", "lamp", "chair", "plant", "book", "vase", "clock", "bottle"];
const MIN_VISIBLE_PIXELS: u64 = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub images: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Raters per (object, attribute) item.
    pub raters: usize,
    /// Probability that a rater reports the true attribute value.
    pub rater_accuracy: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { images: 12, width: 160, height: 120, seed: 7, min_objects: 2, max_objects: 6, raters: 5, rater_accuracy: 0.85 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectTruth {
    pub occluded: bool,
    pub truncated: bool,
    pub direction: Direction,
    pub depth: f64,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub images: Vec<AnnotatedImage>,
    pub depth: BTreeMap<String, DepthMap>,
    pub ratings: Vec<HumanRating>,
    /// Keyed by (image_id, object_id).
    pub truth: BTreeMap<(String, String), ObjectTruth>,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, Copy)]
struct Placed {
    shape: Shape,
    x0: i64,
    y0: i64,
    w: i64,
    h: i64,
    hue: f64,
    class: usize,
}

impl Placed {
    fn covers(&self, x: i64, y: i64) -> bool {
        if x < self.x0 || y < self.y0 || x >= self.x0 + self.w || y >= self.y0 + self.h {
            return false;
        }
        match self.shape {
            Shape::Rect => true,
            Shape::Ellipse => {
                let cx = self.x0 as f64 + self.w as f64 / 2.0;
                let cy = self.y0 as f64 + self.h as f64 / 2.0;
                let dx = (x as f64 + 0.5 - cx) / (self.w as f64 / 2.0);
                let dy = (y as f64 + 0.5 - cy) / (self.h as f64 / 2.0);
                dx * dx + dy * dy <= 1.0
            }
        }
    }

    fn truncated(&self, width: u32, height: u32) -> bool {
        self.x0 < 0 || self.y0 < 0 || self.x0 + self.w > width as i64 || self.y0 + self.h > height as i64
    }
}

fn background(x: u32, y: u32, w: u32, h: u32, jitter: i32) -> [u8; 3] {
    let r = 30.0 + 150.0 * x as f64 / w as f64;
    let g = 50.0 + 120.0 * y as f64 / h as f64;
    let b = if ((x / 10) + (y / 10)) % 2 == 0 { 170.0 } else { 100.0 };
    [r, g, b].map(|c| (c as i32 + jitter).clamp(0, 255) as u8)
}

fn object_color(p: &Placed, x: u32, y: u32, jitter: i32) -> [u8; 3] {
    let stripe = ((x / 3 + y / 5) % 2) as f64;
    let rgb = hsv_to_rgb(p.hue, 0.8, 0.6 + 0.3 * stripe);
    rgb.map(|c| (c as i32 + jitter).clamp(0, 255) as u8)
}

fn scene(image_id: &str, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (AnnotatedImage, DepthMap, Vec<ObjectTruth>) {
    let (w, h) = (cfg.width, cfg.height);
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects.max(cfg.min_objects));
    let mut placed = Vec::with_capacity(n);
    for _ in 0..n {
        let ow = rng.random_range((w as i64 / 8).max(4)..=(w as i64 / 3).max(5));
        let oh = rng.random_range((h as i64 / 8).max(4)..=(h as i64 / 3).max(5));
        let class = rng.random_range(0..SYNTH_CLASSES.len());
        placed.push(Placed {
            shape: if rng.random_bool(0.5) { Shape::Rect } else { Shape::Ellipse },
            x0: rng.random_range(-ow / 4..=w as i64 - 3 * ow / 4),
            y0: rng.random_range(-oh / 4..=h as i64 - 3 * oh / 4),
            w: ow,
            h: oh,
            hue: (class as f64 * 45.0 + rng.random_range(-8.0..8.0)).rem_euclid(360.0),
            class,
        });
    }
    let mut depths: Vec<f64> = (0..n).map(|_| rng.random_range(0.45..0.95)).collect();
    depths.sort_by(f64::total_cmp);

    let mut owner: Vec<Option<usize>> = vec![None; (w * h) as usize];
    let mut in_frame = vec![0u64; n];
    let mut pixels = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let jitter = rng.random_range(-6..=6);
            let mut px = background(x, y, w, h, jitter);
            for (k, p) in placed.iter().enumerate() {
                if p.covers(x as i64, y as i64) {
                    in_frame[k] += 1;
                    owner[(y * w + x) as usize] = Some(k);
                    px = object_color(p, x, y, jitter);
                }
            }
            pixels.put_pixel(x, y, Rgb(px));
        }
    }

    let mut objects = Vec::new();
    let mut truths = Vec::new();
    let mut kept_depth: Vec<Option<f64>> = vec![None; n];
    for (k, p) in placed.iter().enumerate() {
        let mask = Mask::from_fn(w, h, |x, y| owner[(y * w + x) as usize] == Some(k));
        if mask.count() < MIN_VISIBLE_PIXELS {
            continue;
        }
        let visible = mask.count();
        let obj = ObjectInstance::from_mask(format!("{image_id}{:02}", k + 1), SYNTH_CLASSES[p.class], mask)
            .expect("non-empty mask");
        objects.push(obj);
        kept_depth[k] = Some(depths[k]);
        truths.push(ObjectTruth {
            occluded: visible < in_frame[k],
            truncated: p.truncated(w, h),
            direction: *[Direction::TowardCamera, Direction::Away, Direction::Left, Direction::Right]
                .choose(rng)
                .expect("non-empty"),
            depth: depths[k],
        });
    }

    let depth = DepthMap::from_fn(image_id, w, h, |x, y| {
        let d = match owner[(y * w + x) as usize].and_then(|k| kept_depth[k]) {
            Some(d) => d,
            None => 0.05 + 0.35 * y as f64 / h as f64,
        };
        (d * u16::MAX as f64).round() as u16
    });
    let image = AnnotatedImage {
        image_id: image_id.to_owned(),
        width: w,
        height: h,
        pixels,
        objects,
        domain_tag: "synthetic".into(),
    };
    (image, depth, truths)
}

fn truth_token(truth: &ObjectTruth, attribute: HumanAttribute) -> &'static str {
    match attribute {
        HumanAttribute::Occluded => if truth.occluded { "yes" } else { "no" },
        HumanAttribute::Truncated => if truth.truncated { "yes" } else { "no" },
        HumanAttribute::Direction => match truth.direction {
            Direction::TowardCamera => "toward_camera",
            Direction::Away => "away",
            Direction::Left => "left",
            _ => "right",
        },
    }
}

/// Generates a dataset. Image ids are "1", "2", ...; object ids are the image
/// id followed by a two-digit index.
pub fn synth_dataset(cfg: &SynthConfig) -> SynthDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = SynthDataset { images: Vec::new(), depth: BTreeMap::new(), ratings: Vec::new(), truth: BTreeMap::new() };
    for i in 0..cfg.images {
        let image_id = (i + 1).to_string();
        let (image, depth, truths) = scene(&image_id, cfg, &mut rng);
        for (obj, truth) in image.objects.iter().zip(truths) {
            for attribute in HumanAttribute::ALL {
                let correct = truth_token(&truth, attribute);
                let offset = rng.random_range(0..40);
                for r in 0..cfg.raters {
                    let answer = if rng.random_bool(cfg.rater_accuracy) {
                        correct
                    } else {
                        let others: Vec<&str> =
                            attribute.allowed_answers().iter().copied().filter(|a| *a != correct).collect();
                        others.choose(&mut rng).copied().unwrap_or(correct)
                    };
                    out.ratings.push(HumanRating {
                        item: RatingItem::Object { image_id: image_id.clone(), object_id: obj.object_id.clone(), attribute },
                        rater_id: format!("r{}", (offset + r) % 40),
                        answer: answer.to_owned(),
                        rank_in_sequence: r as u32 + 1,
                    });
                }
            }
            out.truth.insert((image_id.clone(), obj.object_id.clone()), truth);
        }
        out.depth.insert(image_id, depth);
        out.images.push(image);
    }
    out
}

/// Locations of a fixture written by [`write_fixture`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixturePaths {
    pub annotations: PathBuf,
    pub image_root: PathBuf,
    pub depth_dir: PathBuf,
    pub depth_manifest: PathBuf,
    pub ratings: PathBuf,
}

/// Writes COCO annotations (alternating raw and compressed RLE), PNG images,
/// 16-bit depth PNGs with a TSV manifest, and a ratings CSV.
pub fn write_fixture(ds: &SynthDataset, dir: &Path) -> Result<FixturePaths, IngestError> {
    let io = |path: &Path| {
        let path = path.to_owned();
        move |source: std::io::Error| IngestError::Io { path, source }
    };
    let image_err = |path: &Path| {
        let path = path.to_owned();
        move |e: image::ImageError| IngestError::Io { path, source: std::io::Error::other(e.to_string()) }
    };
    let paths = FixturePaths {
        annotations: dir.join("annotations.json"),
        image_root: dir.join("images"),
        depth_dir: dir.join("depth"),
        depth_manifest: dir.join("depth").join("manifest.tsv"),
        ratings: dir.join("ratings.csv"),
    };
    fs::create_dir_all(&paths.image_root).map_err(io(&paths.image_root))?;
    fs::create_dir_all(&paths.depth_dir).map_err(io(&paths.depth_dir))?;

    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut manifest = String::new();
    let mut n = 0;
    for img in &ds.images {
        let file_name = format!("{}.png", img.image_id);
        let path = paths.image_root.join(&file_name);
        img.pixels.save(&path).map_err(image_err(&path))?;
        images.push(json!({"id": img.image_id.parse::<u64>().ok(), "file_name": file_name, "width": img.width, "height": img.height}));
        for o in &img.objects {
            let counts = mask_to_rle(&o.mask);
            let counts = if n % 2 == 0 { json!(counts) } else { json!(encode_rle_string(&counts)) };
            n += 1;
            let category = SYNTH_CLASSES.iter().position(|c| *c == o.class_name).expect("synthetic class") + 1;
            annotations.push(json!({
                "id": o.object_id.parse::<u64>().ok(),
                "image_id": img.image_id.parse::<u64>().ok(),
                "category_id": category,
                "segmentation": {"size": [img.height, img.width], "counts": counts},
                "area": o.mask.count(),
                "bbox": [o.bbox.x_min, o.bbox.y_min, o.bbox.width(), o.bbox.height()],
                "iscrowd": 0,
            }));
        }
        if let Some(depth) = ds.depth.get(&img.image_id) {
            let name = format!("{}_depth.png", img.image_id);
            let path = paths.depth_dir.join(&name);
            save_depth_png(depth, &path).map_err(image_err(&path))?;
            manifest.push_str(&format!("{}\t{}\n", img.image_id, name));
        }
    }
    let categories: Vec<_> =
        SYNTH_CLASSES.iter().enumerate().map(|(i, c)| json!({"id": i + 1, "name": c, "supercategory": "object"})).collect();
    let coco = json!({"images": images, "annotations": annotations, "categories": categories});
    fs::write(&paths.annotations, serde_json::to_vec_pretty(&coco).expect("json")).map_err(io(&paths.annotations))?;
    fs::write(&paths.depth_manifest, manifest).map_err(io(&paths.depth_manifest))?;
    let csv = crate::ingest::write_ratings_csv(&ds.ratings, "synthetic")?;
    fs::write(&paths.ratings, csv).map_err(io(&paths.ratings))?;
    Ok(paths)
}

/// A wrong answer of the same type as `key`.
pub fn wrong_answer(key: &Answer, rng: &mut impl Rng) -> Answer {
    match key {
        Answer::Yes => Answer::No,
        Answer::No => Answer::Yes,
        Answer::Color(c) => Answer::Color(c.other()),
        Answer::Count(n) => {
            if *n == 0 || rng.random_bool(0.5) {
                Answer::Count(n + 1)
            } else {
                Answer::Count(n - 1)
            }
        }
        Answer::Choice(k) => {
            let others: Vec<u8> = (0..4).filter(|c| c != k).collect();
            Answer::Choice(*others.choose(rng).expect("three others"))
        }
    }
}

/// A random answer of the given type.
pub fn random_answer(answer_type: AnswerType, rng: &mut impl Rng) -> Answer {
    match answer_type {
        AnswerType::Binary => Answer::binary(rng.random_bool(0.5)),
        AnswerType::Color => Answer::Color(if rng.random_bool(0.5) { MarkerColor::Red } else { MarkerColor::Green }),
        AnswerType::Count => Answer::Count(rng.random_range(0..6)),
        AnswerType::Quiz4 => Answer::Choice(rng.random_range(0..4)),
    }
}

/// Simulated per-task human ratings: each rater is right with probability
/// `accuracy`, lowered per task by a seeded difficulty in `[0, spread]`.
pub fn simulate_task_ratings(tasks: &[TaskInstance], raters: usize, accuracy: f64, spread: f64, seed: u64) -> Vec<HumanRating> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut ids: Vec<usize> = (0..raters.max(1) * 4).collect();
    for t in tasks {
        let p = (accuracy - rng.random_range(0.0..=spread.max(0.0))).clamp(0.0, 1.0);
        ids.shuffle(&mut rng);
        for (rank, rater) in ids.iter().take(raters).enumerate() {
            let answer = if rng.random_bool(p) { t.answer_key.clone() } else { wrong_answer(&t.answer_key, &mut rng) };
            out.push(HumanRating {
                item: RatingItem::Task { task_id: t.task_id.clone() },
                rater_id: format!("h{rater}"),
                answer: answer.token(),
                rank_in_sequence: rank as u32 + 1,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_dataset_is_valid_and_deterministic() {
        let cfg = SynthConfig { images: 4, ..Default::default() };
        let a = synth_dataset(&cfg);
        let b = synth_dataset(&cfg);
        assert!(crate::model::validate_dataset(&a.images).is_clean());
        assert_eq!(a.images.len(), 4);
        assert_eq!(a.ratings, b.ratings);
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.pixels, y.pixels);
        }
        assert!(a.images.iter().all(|i| !i.objects.is_empty()));
    }

    #[test]
    fn wrong_answer_differs_from_key() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for key in [Answer::Yes, Answer::No, Answer::Count(0), Answer::Count(3), Answer::Choice(2), Answer::Color(MarkerColor::Red)] {
            for _ in 0..20 {
                let w = wrong_answer(&key, &mut rng);
                assert_ne!(w, key);
                assert_eq!(w.answer_type(), key.answer_type());
            }
        }
    }
}
