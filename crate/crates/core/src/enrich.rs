//! Per-object metadata from mask geometry, pixel photometry, depth maps and
//! human consensus.

use std::collections::{BTreeMap, HashMap};

use image::RgbImage;
use rayon::prelude::*;
use serde::Serialize;

use crate::ingest::{normalize_depth, DepthMap, ItemError};
use crate::model::{
    AnnotatedImage, Attribute, Consensus, Direction, HumanAttribute, HumanRating, Mask, MetadataRecord, RatingItem,
};

/// Rec.601 luma of an 8-bit RGB pixel, scaled to `[0, 1]`.
#[inline]
pub fn luminance(rgb: [u8; 3]) -> f64 {
    (0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64) / 255.0
}

/// Geometry attributes: size, area, bbox and adjacency.
pub fn compute_geometry_metadata(image: &AnnotatedImage) -> Vec<MetadataRecord> {
    let total = image.width as f64 * image.height as f64;
    image
        .objects
        .iter()
        .map(|obj| {
            let mut rec = MetadataRecord::new(&image.image_id, &obj.object_id);
            let area = obj.mask.count();
            rec.class_name = Some(obj.class_name.clone());
            rec.bbox = Some(obj.bbox);
            rec.segmentation_area = Some(area);
            rec.relative_size = Some(area as f64 / total);
            let bbox_touch = image.objects.iter().any(|o| o.object_id != obj.object_id && obj.bbox.touches(&o.bbox));
            let touching: Vec<String> = image
                .objects
                .iter()
                .filter(|o| o.object_id != obj.object_id && obj.mask.touches(&o.mask))
                .map(|o| o.object_id.clone())
                .collect();
            rec.bbox_touches_bbox = Some(bbox_touch);
            rec.segmask_touches_segmask = Some(!touching.is_empty());
            rec.segmask_touches_segmask_with = Some(touching);
            for a in [
                Attribute::ClassName,
                Attribute::BboxCoordinates,
                Attribute::SegmentationArea,
                Attribute::RelativeSize,
                Attribute::BboxTouchesBbox,
                Attribute::SegmaskTouchesSegmask,
                Attribute::SegmaskTouchesSegmaskWith,
            ] {
                rec.tag(a);
            }
            rec
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Photometry {
    pub brightness: f64,
    pub michelson_contrast: f64,
}

/// Mean luminance and Michelson contrast over the set pixels of `mask`
/// (or the whole image when `mask` is `None`).
pub fn region_photometry(pixels: &RgbImage, mask: Option<&Mask>) -> Option<Photometry> {
    let mut sum = 0.0;
    let mut n = 0u64;
    let mut lmin = f64::INFINITY;
    let mut lmax = f64::NEG_INFINITY;
    let mut visit = |x: u32, y: u32| {
        let l = luminance(pixels.get_pixel(x, y).0);
        sum += l;
        n += 1;
        lmin = lmin.min(l);
        lmax = lmax.max(l);
    };
    match mask {
        Some(m) => m.pixels().for_each(|(x, y)| visit(x, y)),
        None => {
            for y in 0..pixels.height() {
                for x in 0..pixels.width() {
                    visit(x, y);
                }
            }
        }
    }
    if n == 0 {
        return None;
    }
    let michelson_contrast = if lmax + lmin == 0.0 { 0.0 } else { (lmax - lmin) / (lmax + lmin) };
    Some(Photometry { brightness: (sum / n as f64).clamp(0.0, 1.0), michelson_contrast: michelson_contrast.clamp(0.0, 1.0) })
}

pub fn image_brightness(image: &AnnotatedImage) -> f64 {
    region_photometry(&image.pixels, None).map_or(0.0, |p| p.brightness)
}

pub fn compute_photometry_metadata(image: &AnnotatedImage) -> Vec<MetadataRecord> {
    image
        .objects
        .iter()
        .map(|obj| {
            let mut rec = MetadataRecord::new(&image.image_id, &obj.object_id);
            if let Some(p) = region_photometry(&image.pixels, Some(&obj.mask)) {
                rec.brightness_score = Some(p.brightness);
                rec.michelson_contrast_score = Some(p.michelson_contrast);
                rec.tag(Attribute::BrightnessScore);
                rec.tag(Attribute::MichelsonContrastScore);
            }
            rec
        })
        .collect()
}

/// Nearest-rank percentile of already sorted values: the value at rank
/// `ceil(p/100 · n)` (1-based). `percent` is an integer in `1..=100`.
pub fn nearest_rank(sorted: &[f64], percent: u32) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = (percent as usize * n).div_ceil(100).max(1);
    Some(sorted[rank - 1])
}

fn normalize_depth_f64(raw: f64) -> f64 {
    raw / u16::MAX as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DepthStats {
    pub average: f64,
    pub top_95: f64,
    pub bottom_5: f64,
}

pub fn mask_depth_stats(mask: &Mask, depth: &DepthMap) -> Option<DepthStats> {
    let raw: Vec<u16> = mask.pixels().map(|(x, y)| depth.raw(x, y)).collect();
    if raw.is_empty() {
        return None;
    }
    // integer sum keeps the mean exact for constant fields
    let sum: u64 = raw.iter().map(|&v| v as u64).sum();
    let average = normalize_depth_f64(sum as f64 / raw.len() as f64);
    let mut values: Vec<f64> = raw.into_iter().map(normalize_depth).collect();
    values.sort_by(|a, b| a.total_cmp(b));
    Some(DepthStats {
        average,
        top_95: nearest_rank(&values, 95)?,
        bottom_5: nearest_rank(&values, 5)?,
    })
}

/// Depth attributes per object. Fails for the whole image when the depth
/// map is missing or does not match the image dimensions.
pub fn compute_depth_metadata(image: &AnnotatedImage, depth: Option<&DepthMap>) -> Result<Vec<MetadataRecord>, ItemError> {
    let depth = depth.ok_or_else(|| ItemError { item: format!("image {}", image.image_id), message: "no depth map".into() })?;
    if (depth.width, depth.height) != (image.width, image.height) {
        return Err(ItemError {
            item: format!("image {}", image.image_id),
            message: format!("depth map is {}x{}, image is {}x{}", depth.width, depth.height, image.width, image.height),
        });
    }
    Ok(image
        .objects
        .iter()
        .map(|obj| {
            let mut rec = MetadataRecord::new(&image.image_id, &obj.object_id);
            if let Some(stats) = mask_depth_stats(&obj.mask, depth) {
                rec.average_depth = Some(stats.average);
                rec.top_95_depth = Some(stats.top_95);
                rec.bottom_5_depth = Some(stats.bottom_5);
                rec.tag(Attribute::AverageDepth);
                rec.tag(Attribute::Top95Depth);
                rec.tag(Attribute::Bottom5Depth);
            }
            rec
        })
        .collect())
}

/// Outcome of consensus over one item's rank-ordered answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConsensusOutcome {
    /// Agreed answer token, `None` when unresolved.
    pub answer: Option<String>,
    pub ratings_used: usize,
    pub stopped_early: bool,
}

/// Consumes answers in order and stops as soon as one answer has
/// `threshold` votes. Without a threshold hit, a strict majority of all
/// answers wins; otherwise the item is unresolved.
pub fn consensus<S: AsRef<str>>(answers: &[S], threshold: usize) -> ConsensusOutcome {
    let threshold = threshold.max(1);
    let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, a) in answers.iter().enumerate() {
        let count = votes.entry(a.as_ref()).or_default();
        *count += 1;
        if *count >= threshold {
            return ConsensusOutcome {
                answer: Some(a.as_ref().to_owned()),
                ratings_used: i + 1,
                stopped_early: i + 1 < answers.len(),
            };
        }
    }
    let n = answers.len();
    let majority = votes.iter().find(|(_, c)| **c * 2 > n).map(|(a, _)| (*a).to_owned());
    ConsensusOutcome { answer: majority, ratings_used: n, stopped_early: false }
}

/// Groups ratings per item, orders each group by rank and applies [`consensus`].
pub fn merge_human_metadata(ratings: &[HumanRating], consensus_threshold: usize) -> BTreeMap<RatingItem, ConsensusOutcome> {
    let mut grouped: BTreeMap<&RatingItem, Vec<&HumanRating>> = BTreeMap::new();
    for r in ratings {
        grouped.entry(&r.item).or_default().push(r);
    }
    grouped
        .into_iter()
        .map(|(item, mut group)| {
            group.sort_by_key(|r| r.rank_in_sequence);
            let answers: Vec<&str> = group.iter().map(|r| r.answer.as_str()).collect();
            (item.clone(), consensus(&answers, consensus_threshold))
        })
        .collect()
}

fn to_consensus(outcome: &ConsensusOutcome) -> Consensus {
    match outcome.answer.as_deref() {
        Some("yes") => Consensus::Yes,
        Some("no") => Consensus::No,
        _ => Consensus::Unresolved,
    }
}

/// Writes human consensus results onto the matching metadata records.
pub fn apply_human_consensus(records: &mut [MetadataRecord], outcomes: &BTreeMap<RatingItem, ConsensusOutcome>) {
    let mut index: HashMap<(&str, &str), usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        index.insert((r.image_id.as_str(), r.object_id.as_str()), i);
    }
    let mut updates = Vec::new();
    for (item, outcome) in outcomes {
        if let RatingItem::Object { image_id, object_id, attribute } = item {
            if let Some(&i) = index.get(&(image_id.as_str(), object_id.as_str())) {
                updates.push((i, *attribute, outcome));
            }
        }
    }
    for (i, attribute, outcome) in updates {
        let rec = &mut records[i];
        match attribute {
            HumanAttribute::Occluded => {
                rec.occluded = Some(to_consensus(outcome));
                rec.tag(Attribute::Occluded);
            }
            HumanAttribute::Truncated => {
                rec.truncated = Some(to_consensus(outcome));
                rec.tag(Attribute::Truncated);
            }
            HumanAttribute::Direction => {
                rec.direction =
                    Some(outcome.answer.as_deref().and_then(Direction::from_token).unwrap_or(Direction::Unresolved));
                rec.tag(Attribute::Direction);
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct EnrichOutput {
    pub records: Vec<MetadataRecord>,
    pub errors: Vec<ItemError>,
}

/// Runs every enrichment pass over a dataset. Images are processed in
/// parallel; output order follows dataset order.
pub fn enrich_dataset(
    dataset: &[AnnotatedImage],
    depth_maps: &BTreeMap<String, DepthMap>,
    ratings: &[HumanRating],
    consensus_threshold: usize,
) -> EnrichOutput {
    let per_image: Vec<(Vec<MetadataRecord>, Option<ItemError>)> = dataset
        .par_iter()
        .map(|image| {
            let mut records = compute_geometry_metadata(image);
            for (rec, photo) in records.iter_mut().zip(compute_photometry_metadata(image)) {
                rec.merge(photo);
            }
            let err = match compute_depth_metadata(image, depth_maps.get(&image.image_id)) {
                Ok(depth) => {
                    for (rec, d) in records.iter_mut().zip(depth) {
                        rec.merge(d);
                    }
                    None
                }
                Err(e) => Some(e),
            };
            (records, err)
        })
        .collect();
    let mut out = EnrichOutput::default();
    for (records, err) in per_image {
        out.records.extend(records);
        out.errors.extend(err);
    }
    let outcomes = merge_human_metadata(ratings, consensus_threshold);
    apply_human_consensus(&mut out.records, &outcomes);
    out
}

/// One JSON object per line.
pub fn metadata_to_jsonl(records: &[MetadataRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("metadata serializes"));
        out.push('\n');
    }
    out
}

pub fn metadata_from_jsonl(text: &str) -> Result<Vec<MetadataRecord>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}
