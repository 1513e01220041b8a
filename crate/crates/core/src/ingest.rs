//! COCO ingestion, depth-map loading, and the human annotation job round trip.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::model::{AnnotatedImage, Answer, BBox, HumanAttribute, HumanRating, Mask, ObjectInstance, RatingItem};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("malformed annotation JSON at byte {offset}: {message}")]
    Json { offset: usize, message: String },
    #[error("depth map for image {image_id}: expected {expected:?}, found {found:?}")]
    DepthDimensions { image_id: String, expected: (u32, u32), found: (u32, u32) },
    #[error("depth map for image {image_id}: {message}")]
    DepthFile { image_id: String, message: String },
    #[error("depth manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("no attributes requested")]
    NoAttributes,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// A non-fatal problem with one item; parsing continues past it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ItemError {
    pub item: String,
    pub message: String,
}

#[derive(Debug, Deserialize)]
struct CocoFile {
    #[serde(default)]
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: serde_json::Value,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    id: serde_json::Value,
    image_id: serde_json::Value,
    category_id: serde_json::Value,
    segmentation: Segmentation,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: serde_json::Value,
    name: String,
}

/// COCO segmentation: polygon list or RLE (uncompressed counts or compressed string).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle(RleSegmentation),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RleSegmentation {
    /// `[height, width]`.
    pub size: [u32; 2],
    pub counts: RleCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RleCounts {
    Raw(Vec<u64>),
    Compressed(String),
}

fn id_string(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in bytes.split(|b| *b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(bytes.len());
        }
        offset += l.len() + 1;
    }
    bytes.len()
}

/// Result of parsing one COCO file.
#[derive(Debug, Default)]
pub struct CocoParse {
    pub images: Vec<AnnotatedImage>,
    pub item_errors: Vec<ItemError>,
    pub warnings: Vec<String>,
}

/// Parses a COCO instance annotation file. Pixel data is read from
/// `image_root/<file_name>`; images whose file is missing or whose
/// dimensions disagree with the JSON are reported as item errors and skipped.
pub fn parse_coco(annotation_file: &[u8], image_root: &Path, domain_tag: &str) -> Result<CocoParse, IngestError> {
    let coco: CocoFile = serde_json::from_slice(annotation_file).map_err(|e| IngestError::Json {
        offset: byte_offset(annotation_file, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let mut out = CocoParse::default();

    let categories: HashMap<String, String> =
        coco.categories.iter().map(|c| (id_string(&c.id), c.name.clone())).collect();
    let image_dims: HashMap<String, (u32, u32)> =
        coco.images.iter().map(|i| (id_string(&i.id), (i.width, i.height))).collect();

    let mut objects: HashMap<String, Vec<ObjectInstance>> = HashMap::new();
    for ann in &coco.annotations {
        let ann_id = id_string(&ann.id);
        let image_id = id_string(&ann.image_id);
        let item = format!("annotation {ann_id}");
        let Some(&(width, height)) = image_dims.get(&image_id) else {
            out.item_errors.push(ItemError { item, message: format!("unknown image_id {image_id}") });
            continue;
        };
        let Some(class_name) = categories.get(&id_string(&ann.category_id)) else {
            out.item_errors.push(ItemError {
                item,
                message: format!("unknown category_id {}", id_string(&ann.category_id)),
            });
            continue;
        };
        if ann.iscrowd != 0 {
            let msg = format!("skipping crowd annotation {ann_id} on image {image_id}");
            warn!("{msg}");
            out.warnings.push(msg);
            continue;
        }
        let mask = match rasterize_segmentation(&ann.segmentation, width, height) {
            Ok(m) => m,
            Err(message) => {
                out.item_errors.push(ItemError { item, message });
                continue;
            }
        };
        match ObjectInstance::from_mask(ann_id, class_name.clone(), mask) {
            Some(obj) => objects.entry(image_id).or_default().push(obj),
            None => out.item_errors.push(ItemError { item, message: "segmentation rasterizes to an empty mask".into() }),
        }
    }

    for img in &coco.images {
        let image_id = id_string(&img.id);
        let path = image_root.join(&img.file_name);
        let pixels = match image::open(&path) {
            Ok(p) => p.to_rgb8(),
            Err(e) => {
                out.item_errors.push(ItemError {
                    item: format!("image {image_id}"),
                    message: format!("cannot read {}: {e}", path.display()),
                });
                continue;
            }
        };
        if pixels.dimensions() != (img.width, img.height) {
            out.item_errors.push(ItemError {
                item: format!("image {image_id}"),
                message: format!("file is {:?}, annotation says {}x{}", pixels.dimensions(), img.width, img.height),
            });
            continue;
        }
        out.images.push(AnnotatedImage {
            objects: objects.remove(&image_id).unwrap_or_default(),
            image_id,
            width: img.width,
            height: img.height,
            pixels,
            domain_tag: domain_tag.to_owned(),
        });
    }
    Ok(out)
}

pub fn rasterize_segmentation(seg: &Segmentation, width: u32, height: u32) -> Result<Mask, String> {
    match seg {
        Segmentation::Polygons(polys) => {
            let mut mask = Mask::empty(width, height);
            for poly in polys {
                if poly.len() < 6 || poly.len() % 2 != 0 {
                    return Err(format!("polygon with {} coordinates", poly.len()));
                }
                let pts: Vec<(f64, f64)> = poly.chunks(2).map(|c| (c[0], c[1])).collect();
                fill_polygon(&mut mask, &pts);
            }
            Ok(mask)
        }
        Segmentation::Rle(rle) => {
            let [h, w] = rle.size;
            if (w, h) != (width, height) {
                return Err(format!("RLE size {w}x{h} differs from image {width}x{height}"));
            }
            let counts = match &rle.counts {
                RleCounts::Raw(c) => c.clone(),
                RleCounts::Compressed(s) => decode_rle_string(s)?,
            };
            rle_to_mask(&counts, width, height)
        }
    }
}

/// Sets every pixel whose center lies inside the polygon (even-odd rule).
pub fn fill_polygon(mask: &mut Mask, pts: &[(f64, f64)]) {
    let (w, h) = (mask.width(), mask.height());
    let mut xs = Vec::new();
    for y in 0..h {
        let yc = y as f64 + 0.5;
        xs.clear();
        for i in 0..pts.len() {
            let (x0, y0) = pts[i];
            let (x1, y1) = pts[(i + 1) % pts.len()];
            if (y0 <= yc && yc < y1) || (y1 <= yc && yc < y0) {
                xs.push(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        xs.sort_by(|a, b| a.total_cmp(b));
        for pair in xs.chunks_exact(2) {
            // pixel x is inside when x + 0.5 ∈ [pair[0], pair[1])
            let start = (pair[0] - 0.5).ceil().max(0.0);
            let end = (pair[1] - 0.5).ceil().min(w as f64);
            let mut x = start;
            while x < end {
                mask.set(x as u32, y, true);
                x += 1.0;
            }
        }
    }
}

/// Expands column-major run lengths (starting with a background run) into a mask.
pub fn rle_to_mask(counts: &[u64], width: u32, height: u32) -> Result<Mask, String> {
    let total = width as u64 * height as u64;
    let sum: u64 = counts.iter().sum();
    if sum != total {
        return Err(format!("RLE covers {sum} pixels, image has {total}"));
    }
    let mut mask = Mask::empty(width, height);
    let mut pos = 0u64;
    for (i, &run) in counts.iter().enumerate() {
        if i % 2 == 1 {
            for p in pos..pos + run {
                let x = (p / height as u64) as u32;
                let y = (p % height as u64) as u32;
                mask.set(x, y, true);
            }
        }
        pos += run;
    }
    Ok(mask)
}

/// Column-major run lengths of a mask, starting with a (possibly empty) background run.
pub fn mask_to_rle(mask: &Mask) -> Vec<u64> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for x in 0..mask.width() {
        for y in 0..mask.height() {
            let v = mask.get(x, y);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    counts
}

/// Decodes the compressed COCO RLE string (6-bit chunks, delta coded from the third count on).
pub fn decode_rle_string(s: &str) -> Result<Vec<u64>, String> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            if p >= bytes.len() {
                return Err("truncated RLE string".into());
            }
            let c = bytes[p] as i64 - 48;
            if !(0..64).contains(&c) || k > 12 {
                return Err(format!("invalid RLE byte at {p}"));
            }
            x |= (c & 0x1f) << (5 * k);
            let more = c & 0x20 != 0;
            p += 1;
            k += 1;
            if !more {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| u64::try_from(c).map_err(|_| "negative run length in RLE string".to_string()))
        .collect()
}

pub fn encode_rle_string(counts: &[u64]) -> String {
    let mut out = String::new();
    for i in 0..counts.len() {
        let mut x = counts[i] as i64;
        if i > 2 {
            x -= counts[i - 2] as i64;
        }
        loop {
            let mut c = x & 0x1f;
            x >>= 5;
            let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                c |= 0x20;
            }
            out.push((c as u8 + 48) as char);
            if !more {
                break;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthNormalization {
    Relative01,
}

/// Relative depth raster; larger values are closer to the camera.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub raster: Vec<u16>,
    pub normalization: DepthNormalization,
}

impl DepthMap {
    pub fn from_fn(image_id: impl Into<String>, width: u32, height: u32, f: impl Fn(u32, u32) -> u16) -> Self {
        let mut raster = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                raster.push(f(x, y));
            }
        }
        Self { image_id: image_id.into(), width, height, raster, normalization: DepthNormalization::Relative01 }
    }

    pub fn raw(&self, x: u32, y: u32) -> u16 {
        self.raster[(y * self.width + x) as usize]
    }

    /// Relative depth in `[0, 1]`.
    pub fn depth(&self, x: u32, y: u32) -> f64 {
        normalize_depth(self.raw(x, y))
    }

    pub fn is_constant(&self) -> bool {
        self.raster.windows(2).all(|w| w[0] == w[1])
    }
}

pub fn normalize_depth(raw: u16) -> f64 {
    raw as f64 / u16::MAX as f64
}

/// Loads the depth maps listed in a TSV manifest (`image_id<TAB>filename`),
/// checking each against the expected image dimensions.
pub fn load_depth_maps(
    directory: &Path,
    manifest: &Path,
    image_dims: &HashMap<String, (u32, u32)>,
) -> Result<BTreeMap<String, DepthMap>, IngestError> {
    let text = fs::read_to_string(manifest).map_err(|source| IngestError::Io { path: manifest.to_owned(), source })?;
    let mut maps = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((image_id, filename)) = line.split_once('\t') else {
            return Err(IngestError::Manifest { line: n + 1, message: "expected image_id<TAB>filename".into() });
        };
        let Some(&expected) = image_dims.get(image_id) else {
            return Err(IngestError::Manifest { line: n + 1, message: format!("unknown image_id {image_id}") });
        };
        let path = directory.join(filename);
        let depth_err = |message: String| IngestError::DepthFile { image_id: image_id.to_owned(), message };
        let decoded = image::open(&path).map_err(|e| depth_err(format!("cannot read {}: {e}", path.display())))?;
        let image::DynamicImage::ImageLuma16(gray) = decoded else {
            return Err(depth_err(format!("{} is not 16-bit grayscale", path.display())));
        };
        if gray.dimensions() != expected {
            return Err(IngestError::DepthDimensions {
                image_id: image_id.to_owned(),
                expected,
                found: gray.dimensions(),
            });
        }
        let (width, height) = gray.dimensions();
        maps.insert(
            image_id.to_owned(),
            DepthMap {
                image_id: image_id.to_owned(),
                width,
                height,
                raster: gray.into_raw(),
                normalization: DepthNormalization::Relative01,
            },
        );
    }
    Ok(maps)
}

/// Writes a depth map as a 16-bit grayscale PNG.
pub fn save_depth_png(depth: &DepthMap, path: &Path) -> Result<(), image::ImageError> {
    let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(depth.width, depth.height, depth.raster.clone())
            .expect("raster length matches dimensions");
    buf.save(path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobItem {
    pub image_id: String,
    pub object_id: String,
    pub attribute: HumanAttribute,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationJob {
    pub job_id: String,
    pub items: Vec<JobItem>,
    pub max_raters: u32,
    pub consensus_threshold: u32,
}

#[derive(Debug, Serialize)]
struct JobRow<'a> {
    job_id: &'a str,
    image_id: &'a str,
    object_id: &'a str,
    attribute: &'a str,
    crop_x_min: u32,
    crop_y_min: u32,
    crop_x_max: u32,
    crop_y_max: u32,
    allowed_answers: String,
}

/// Builds a human annotation job and its CSV, one row per (object, attribute)
/// in (image_id, object_id, attribute) order.
pub fn export_annotation_job(
    dataset: &[AnnotatedImage],
    attributes: &[HumanAttribute],
    job_id: &str,
    max_raters: u32,
    consensus_threshold: u32,
) -> Result<(AnnotationJob, String), IngestError> {
    if attributes.is_empty() {
        return Err(IngestError::NoAttributes);
    }
    let attrs: BTreeSet<HumanAttribute> = attributes.iter().copied().collect();
    let mut rows: Vec<(&str, &str, HumanAttribute, BBox)> = Vec::new();
    for image in dataset {
        for object in &image.objects {
            for &a in &attrs {
                rows.push((&image.image_id, &object.object_id, a, object.bbox));
            }
        }
    }
    rows.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));

    let mut writer = csv::Writer::from_writer(Vec::new());
    for (image_id, object_id, attribute, bbox) in &rows {
        writer.serialize(JobRow {
            job_id,
            image_id,
            object_id,
            attribute: attribute.as_str(),
            crop_x_min: bbox.x_min,
            crop_y_min: bbox.y_min,
            crop_x_max: bbox.x_max,
            crop_y_max: bbox.y_max,
            allowed_answers: attribute.allowed_answers().join("|"),
        })?;
    }
    let bytes = writer.into_inner().map_err(|e| IngestError::Io {
        path: PathBuf::from("<memory>"),
        source: std::io::Error::other(e.to_string()),
    })?;
    let job = AnnotationJob {
        job_id: job_id.to_owned(),
        items: rows
            .iter()
            .map(|(i, o, a, _)| JobItem { image_id: (*i).to_owned(), object_id: (*o).to_owned(), attribute: *a })
            .collect(),
        max_raters,
        consensus_threshold: consensus_threshold.min(max_raters),
    };
    Ok((job, String::from_utf8(bytes).expect("csv output is utf-8")))
}

/// One row of a returned annotation file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatingRow {
    pub job_id: String,
    #[serde(default)]
    pub image_id: String,
    #[serde(default)]
    pub object_id: String,
    #[serde(default)]
    pub task_id: String,
    #[serde(default)]
    pub attribute: String,
    pub rater_id: String,
    pub answer: String,
    pub rank_in_sequence: u32,
}

#[derive(Debug, Default)]
pub struct RatingImport {
    pub ratings: Vec<HumanRating>,
    pub errors: Vec<ItemError>,
}

fn item_label(item: &RatingItem) -> String {
    match item {
        RatingItem::Task { task_id } => format!("task {task_id}"),
        RatingItem::Object { image_id, object_id, attribute } => format!("{image_id}/{object_id}/{attribute}"),
    }
}

/// Reads returned human ratings. Items with an unknown answer token or a
/// rank sequence that is not `1..=n` are rejected whole.
pub fn import_human_annotations(reader: impl Read) -> Result<RatingImport, IngestError> {
    let mut csv_reader = csv::Reader::from_reader(reader);
    let mut grouped: BTreeMap<RatingItem, Vec<HumanRating>> = BTreeMap::new();
    let mut bad: BTreeMap<RatingItem, Vec<String>> = BTreeMap::new();
    let mut errors = Vec::new();

    for (line, row) in csv_reader.deserialize::<RatingRow>().enumerate() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                errors.push(ItemError { item: format!("row {}", line + 2), message: e.to_string() });
                continue;
            }
        };
        let answer = row.answer.trim().to_ascii_lowercase();
        let (item, valid) = if !row.task_id.is_empty() {
            (RatingItem::Task { task_id: row.task_id.clone() }, Answer::from_token(&answer).is_some())
        } else {
            let attribute: HumanAttribute = match row.attribute.parse() {
                Ok(a) => a,
                Err(message) => {
                    errors.push(ItemError { item: format!("row {}", line + 2), message });
                    continue;
                }
            };
            let valid = attribute.allowed_answers().contains(&answer.as_str());
            (RatingItem::Object { image_id: row.image_id.clone(), object_id: row.object_id.clone(), attribute }, valid)
        };
        if !valid {
            bad.entry(item.clone()).or_default().push(format!("unknown token {:?}", row.answer));
        }
        grouped.entry(item.clone()).or_default().push(HumanRating {
            item,
            rater_id: row.rater_id,
            answer,
            rank_in_sequence: row.rank_in_sequence,
        });
    }

    let mut ratings = Vec::new();
    for (item, mut group) in grouped {
        if let Some(problems) = bad.remove(&item) {
            for message in problems {
                errors.push(ItemError { item: item_label(&item), message });
            }
            continue;
        }
        group.sort_by_key(|r| r.rank_in_sequence);
        let consecutive = group.iter().enumerate().all(|(i, r)| r.rank_in_sequence as usize == i + 1);
        if !consecutive {
            let ranks: Vec<String> = group.iter().map(|r| r.rank_in_sequence.to_string()).collect();
            errors.push(ItemError {
                item: item_label(&item),
                message: format!("non-consecutive ranks {}", ranks.join(",")),
            });
            continue;
        }
        ratings.extend(group);
    }
    Ok(RatingImport { ratings, errors })
}

/// Serializes ratings in the import schema.
pub fn write_ratings_csv(ratings: &[HumanRating], job_id: &str) -> Result<String, IngestError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for r in ratings {
        let (image_id, object_id, task_id, attribute) = match &r.item {
            RatingItem::Task { task_id } => (String::new(), String::new(), task_id.clone(), "task".to_string()),
            RatingItem::Object { image_id, object_id, attribute } => {
                (image_id.clone(), object_id.clone(), String::new(), attribute.as_str().to_string())
            }
        };
        writer.serialize(RatingRow {
            job_id: job_id.to_owned(),
            image_id,
            object_id,
            task_id,
            attribute,
            rater_id: r.rater_id.clone(),
            answer: r.answer.clone(),
            rank_in_sequence: r.rank_in_sequence,
        })?;
    }
    let bytes = writer.into_inner().map_err(|e| IngestError::Io {
        path: PathBuf::from("<memory>"),
        source: std::io::Error::other(e.to_string()),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
