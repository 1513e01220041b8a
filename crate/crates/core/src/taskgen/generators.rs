//! Per-image candidate generation for every task type.
//!
//! Each generator returns candidate drafts; the bundle reduction decides
//! which ones are kept. Generators are pure functions of the image context
//! and the configured seed.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use image::RgbImage;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{derive_seed, GenerationConfig};
use crate::enrich::luminance;
use crate::imageops::{
    corruption_transform, hsv_to_rgb, laplacian_variance, mean_abs_delta, mean_luminance, place_distractors,
    rgb_to_hsv, tile_size, CorruptionKind, ImageOpsError, MarkRequest, RenderedAsset, Transform, BOX_STROKE,
};
use crate::ingest::DepthMap;
use crate::model::{
    AnnotatedImage, Answer, BBox, Consensus, Direction, MarkStyle, MarkTarget, MarkerColor, Marking, MetadataRecord,
    ObjectInstance, TaskInstance, TaskOption, TaskType,
};
use crate::templates::{TemplateError, TemplateSet};

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    ImageOps(#[from] ImageOpsError),
}

/// Everything a generator may look at for one image.
pub struct ImageContext<'a> {
    pub image: &'a AnnotatedImage,
    pub metadata: HashMap<&'a str, &'a MetadataRecord>,
    pub depth: Option<&'a DepthMap>,
    /// Every class name in the dataset.
    pub vocabulary: &'a BTreeSet<String>,
    pub config: &'a GenerationConfig,
    pub templates: &'a TemplateSet,
}

/// A candidate task and the assets it references.
#[derive(Debug, Clone)]
pub struct Draft {
    pub task: TaskInstance,
    pub assets: Vec<RenderedAsset>,
}

pub const OCCLUSION_OPTIONS: [&str; 4] = ["fully visible", "partially occluded", "fully occluded", "cannot tell"];
pub const DIRECTION_OPTIONS: [&str; 4] =
    ["facing toward the camera", "facing away from the camera", "facing left", "facing right"];
const HUE_BINS: usize = 8;
const MIN_VISIBLE_DELTA: f64 = 1.0;
const MIN_HUE_SHIFT_DELTA: f64 = 2.0;
const POINT_SAMPLES: usize = 64;
const LOCAL_WINDOW: u32 = 4;
const CONTEXT_WINDOW: u32 = 12;

impl<'a> ImageContext<'a> {
    fn rng(&self, task_type: TaskType) -> (ChaCha8Rng, u64) {
        let seed = derive_seed(self.config.seed, &[&self.image.image_id, task_type.id()]);
        (ChaCha8Rng::seed_from_u64(seed), seed)
    }

    fn meta(&self, object_id: &str) -> Option<&'a MetadataRecord> {
        self.metadata.get(object_id).copied()
    }

    fn cap(&self) -> usize {
        self.config.max_tasks_per_type_per_image
    }

    fn original(&self) -> RenderedAsset {
        RenderedAsset::render(&self.image.image_id, &self.image.pixels, Vec::new()).expect("empty chain")
    }

    fn task(&self, task_type: TaskType, seed: u64, class: Option<&str>, key: Answer) -> Result<TaskInstance, GenError> {
        Ok(TaskInstance {
            task_id: String::new(),
            task_type,
            answer_type: task_type.answer_type(),
            image_id: self.image.image_id.clone(),
            dataset: self.image.domain_tag.clone(),
            image_refs: Vec::new(),
            prompt_text: self.templates.question(task_type, class)?,
            options: Vec::new(),
            answer_key: key,
            subject_object_ids: Vec::new(),
            markings: Vec::new(),
            params: BTreeMap::new(),
            generation_seed: seed,
            provenance: Vec::new(),
        })
    }

    fn center(&self, object_id: &str) -> Option<(f64, f64)> {
        self.meta(object_id).and_then(|m| m.bbox).map(|b| b.center())
    }
}

fn box_marking(obj: &ObjectInstance, color: MarkerColor) -> Marking {
    Marking {
        target: MarkTarget::Object { object_id: obj.object_id.clone(), bbox: obj.bbox },
        color,
        style: MarkStyle::Box,
    }
}

fn point_marking(x: u32, y: u32, color: MarkerColor) -> Marking {
    Marking { target: MarkTarget::Point { x, y }, color, style: MarkStyle::Point }
}

fn marked(ctx: &ImageContext, markings: Vec<Marking>) -> Result<RenderedAsset, GenError> {
    let requests: Vec<MarkRequest> = markings
        .iter()
        .map(|m| match &m.target {
            MarkTarget::Object { object_id, .. } => MarkRequest::Object { object_id: object_id.clone(), color: m.color },
            MarkTarget::Point { x, y } => MarkRequest::Point { x: *x, y: *y, color: m.color },
        })
        .collect();
    Ok(crate::imageops::draw_markers(ctx.image, &requests)?)
}

/// Single-image task: the image (possibly marked) is the only attachment.
fn single_image(mut task: TaskInstance, asset: RenderedAsset, markings: Vec<Marking>) -> Draft {
    task.image_refs = vec![asset.asset_id.clone()];
    task.markings = markings;
    Draft { task, assets: vec![asset] }
}

/// Image-valued quiz. `options[0]` must be the correct one; options are
/// shuffled and labelled by their attachment position.
fn variant_quiz(
    mut task: TaskInstance,
    rng: &mut ChaCha8Rng,
    prefix: Vec<RenderedAsset>,
    options: Vec<RenderedAsset>,
    key_index: usize,
) -> Draft {
    assert_eq!(options.len(), 4, "quiz needs four options");
    let mut order: Vec<usize> = (0..4).collect();
    order.shuffle(rng);
    let key_pos = order.iter().position(|&i| i == key_index).expect("key present");
    let mut image_refs: Vec<String> = prefix.iter().map(|a| a.asset_id.clone()).collect();
    let mut task_options = Vec::with_capacity(4);
    for &i in &order {
        image_refs.push(options[i].asset_id.clone());
        task_options.push(TaskOption { label: format!("Image {}", image_refs.len()), asset_id: Some(options[i].asset_id.clone()) });
    }
    task.image_refs = image_refs;
    task.options = task_options;
    task.answer_key = Answer::choice(key_pos);
    let mut assets = prefix;
    let mut opts: Vec<Option<RenderedAsset>> = options.into_iter().map(Some).collect();
    for &i in &order {
        assets.push(opts[i].take().expect("each option used once"));
    }
    Draft { task, assets }
}

fn fixed_quiz(mut task: TaskInstance, labels: &[&str; 4], key: usize, asset: RenderedAsset, markings: Vec<Marking>) -> Draft {
    task.options = labels.iter().map(|l| TaskOption { label: (*l).to_string(), asset_id: None }).collect();
    task.answer_key = Answer::choice(key);
    single_image(task, asset, markings)
}

/// Runs every generator for one image.
pub fn generate_image_drafts(ctx: &ImageContext) -> Result<BTreeMap<TaskType, Vec<Draft>>, GenError> {
    let mut out = BTreeMap::new();
    for t in TaskType::ALL {
        let drafts = match t {
            TaskType::T1_1 => gen_presence(ctx)?,
            TaskType::T1_2 => gen_count(ctx)?,
            TaskType::T1_3 => gen_other_present(ctx)?,
            TaskType::T2_1 => gen_occluded(ctx)?,
            TaskType::T2_2 => gen_truncated(ctx)?,
            TaskType::T2_3 => gen_object_corruption(ctx, TaskType::T2_3, CorruptionKind::Blur)?,
            TaskType::T2_4 => gen_object_corruption(ctx, TaskType::T2_4, CorruptionKind::Noise)?,
            TaskType::T2_5 => gen_image_blur(ctx)?,
            TaskType::T2_6 => gen_image_noise(ctx)?,
            TaskType::T3_1 | TaskType::T3_2 | TaskType::T3_3 | TaskType::T6_1 => gen_pair_comparison(ctx, t)?,
            TaskType::T3_4 | TaskType::T3_5 => gen_other_side(ctx, t)?,
            TaskType::T4_1 => gen_touching(ctx)?,
            TaskType::T4_2 => gen_direction(ctx)?,
            TaskType::T5_1 => gen_color_match(ctx)?,
            TaskType::T5_2 => gen_second_brightest(ctx)?,
            TaskType::T5_3 => gen_color_shift(ctx)?,
            TaskType::T5_4 | TaskType::T6_2 => gen_point_pair(ctx, t)?,
            TaskType::T7_1 | TaskType::T7_2 => gen_jigsaw(ctx, t)?,
            TaskType::T8_1 => gen_rotation(ctx)?,
        };
        for d in &drafts {
            debug_assert!(d.task.check().is_ok(), "{:?}", d.task.check());
        }
        out.insert(t, drafts);
    }
    Ok(out)
}

fn class_counts(image: &AnnotatedImage) -> BTreeMap<&str, usize> {
    let mut counts = BTreeMap::new();
    for o in &image.objects {
        *counts.entry(o.class_name.as_str()).or_default() += 1;
    }
    counts
}

fn gen_presence(ctx: &ImageContext) -> Result<Vec<Draft>, GenError> {
    let (mut rng, seed) = ctx.rng(TaskType::T1_1);
    let counts = class_counts(ctx.image);
    let mut present: Vec<&str> = counts.keys().copied().collect();
    let mut absent: Vec<&str> =
        ctx.vocabulary.iter().map(String::as_str).filter(|c| !counts.contains_key(c)).collect();
    present.shuffle(&mut rng);
    absent.shuffle(&mut rng);
    let mut drafts = Vec::new();
    for (classes, key) in [(present, Answer::Yes), (absent, Answer::No)] {
        for class in classes.into_iter().take(ctx.cap()) {
            let mut task = ctx.task(TaskType::T1_1, seed, Some(class), key)?;
            task.provenance = vec!["class_name".into()];
            task.params.insert("class".into(), json!(class));
            drafts.push(single_image(task, ctx.original(), vec![]));
        }
    }
    Ok(drafts)
}

fn gen_count(ctx: &ImageContext) -> Result<Vec<Draft>, GenError> {
    let (mut rng, seed) = ctx.rng(TaskType::T1_2);
    let mut counts: Vec<(&str, usize)> = class_counts(ctx.image).into_iter().collect();
    counts.shuffle(&mut rng);
    let mut drafts = Vec::new();
    for (class, n) in counts.into_iter().take(ctx.cap()) {
        let mut task = ctx.task(TaskType::T1_2, seed, Some(class), Answer::Count(n as u64))?;
        task.provenance = vec!["class_name".into()];
        task.params.insert("class".into(), json!(class));
        drafts.push(single_image(task, ctx.original(), vec![]));
    }
    Ok(drafts)
}

fn gen_other_present(ctx: &ImageContext) -> Result<Vec<Draft>, GenError> {
    let (mut rng, seed) = ctx.rng(TaskType::T1_3);
    let counts = class_counts(ctx.image);
    let mut objects: Vec<&ObjectInstance> = ctx.image.objects.iter().collect();
    objects.shuffle(&mut rng);
    let mut drafts = Vec::new();
    for key in [Answer::Yes, Answer::No] {
        let picks = objects.iter().filter(|o| Answer::binary(counts[o.class_name.as_str()] >= 2) == key);
        for obj in picks.take(ctx.cap()) {
            let mut task = ctx.task(TaskType::T1_3, seed, Some(&obj.class_name), key)?;
            task.subject_object_ids = vec![obj.object_id.clone()];
            task.provenance = vec!["class_name".into()];
            let markings = vec![box_marking(obj, MarkerColor::Green)];
            drafts.push(single_image(task, marked(ctx, markings.clone())?, markings));
        }
    }
    Ok(drafts)
}

fn gen_occluded(ctx: &ImageContext) -> Result<Vec<Draft>, GenError> {
    let (mut rng, seed) = ctx.rng(TaskType::T2_1);
    let mut objects: Vec<&ObjectInstance> = ctx.image.objects.iter().collect();
    objects.shuffle(&mut rng);
    let mut drafts = Vec::new();
    for obj in objects {
        let key = match ctx.meta(&obj.object_id).and_then(|m| m.occluded) {
            Some(Consensus::No) => 0,
            Some(Consensus::Yes) => 1,
            _ => continue,
        };
        let mut task = ctx.task(TaskType::T2_1, seed, Some(&obj.class_name), Answer::choice(key))?;
        task.subject_object_ids = vec![obj.object_id.clone()];
        task.provenance = vec!["occluded".into()];
        let markings = vec![box_marking(obj, MarkerColor::Green)];
        drafts.push(fixed_quiz(task, &OCCLUSION_OPTIONS, key, marked(ctx, markings.clone())?, markings));
        if drafts.len() == ctx.cap() {
            break;
        }
    }
    Ok(drafts)
}

fn gen_truncated(ctx: &ImageContext) -> Result<Vec<Draft>, GenError> {
    let (mut rng, seed) = ctx.rng(TaskType::T2_2);
    let mut objects: Vec<&ObjectInstance> = ctx.image.objects.iter().collect();
    objects.shuffle(&mut rng);
    let mut drafts = Vec::new();
    for key in [Answer::Yes, Answer::No] {
        let picks = objects.iter().filter(|o| {
            let c = ctx.meta(&o.object_id).and_then(|m| m.truncated);
            matches!((c, key), (Some(Consensus::Yes), Answer::Yes) | (Some(Consensus::No), Answer::No))
        });
        for obj in picks.take(ctx.cap()) {
            let mut task = ctx.task(TaskType::T2_2, seed, Some(&obj.class_name), key)?;
            task.subject_object_ids = vec![obj.object_id.clone()];
            task.provenance = vec!["truncated".into()];
            let markings = vec![box_marking(obj, MarkerColor::Green)];
            drafts.push(single_image(task, marked(ctx, markings.clone())?, markings));
        }
    }
    Ok(drafts)
}

/// Interior of a box marker: the bbox minus the stroke band.
pub fn marker_interior(bbox: &BBox) -> Option<BBox> {
    let inner = BBox::new(
        bbox.x_min + BOX_STROKE,
        bbox.y_min + BOX_STROKE,
        bbox.x_max.saturating_sub(BOX_STROKE),
        bbox.y_max.saturating_sub(BOX_STROKE),
    );
    (!inner.is_degenerate()).then_some(inner)
}

fn region_delta(a: &RgbImage, b: &RgbImage, region: &BBox) -> f64 {
    let mut total = 0u64;
    for y in region.y_min..region.y_max {
        for x in region.x_min..region.x_max {
            let (p, q) = (a.get_pixel(x, y).0, b.get_pixel(x, y).0);
            total += (0..3).map(|c| p[c].abs_diff(q[c]) as u64).sum::<u64>();
        }
    }
    total as f64 / (region.area() * 3) as f64
}

fn gen_object_corruption(ctx: &ImageContext, task_type: TaskType, kind: CorruptionKind) -> Result<Vec<Draft>, GenError> {
    let (mut rng, seed) = ctx.rng(task_type);
    let grid = match kind {
        CorruptionKind::Blur => &ctx.config.corruption.blur_sigma,
        _ => &ctx.config.corruption.noise_std,
    };
    let mut objects: Vec<&ObjectInstance> = ctx.image.objects.iter().collect();
    objects.shuffle(&mut rng);
    let mut drafts = Vec::new();
    for obj in objects {
        let Some(interior) = marker_interior(&obj.bbox) else { continue };
        let Ok(tiles) = place_distractors(ctx.image.width, ctx.image.height, obj.bbox, rng.random()) else {
            continue;
        };
        let magnitude = *grid.choose(&mut rng).expect("non-empty grid");
        let noise_seed: u64 = rng.random();
        let marking = box_marking(obj, MarkerColor::Green);
        let variant = |region: BBox| -> Result<RenderedAsset, GenError> {
            let chain = vec![
                corruption_transform(kind, magnitude, noise_seed, Some(region))?,
                Transform::Markers { markings: vec![marking.clone()] },
            ];
            Ok(RenderedAsset::render(&ctx.image.image_id, &ctx.image.pixels, chain)?)
        };
        let key_variant = variant(obj.bbox)?;
        if region_delta(&key_variant.pixels, &ctx.image.pixels, &interior) < MIN_VISIBLE_DELTA {
            continue;
        }
        let mut options = vec![key_variant];
        for r in tiles.distractor_rects {
            options.push(variant(r)?);
        }
        let mut task = ctx.task(task_type, seed, Some(&obj.class_name), Answer::Choice(0))?;
        task.subject_object_ids = vec![obj.object_id.clone()];
        task.markings = vec![marking.clone()];
        task.provenance = vec!["bbox_coordinates".into()];
        task.params.insert("magnitude".into(), json!(magnitude));
        task.params.insert("distractor_regions".into(), json!(tiles.distractor_rects));
        drafts.push(variant_quiz(task, &mut rng, vec![], options, 0));
        if drafts.len() == ctx.cap() {
            break;
        }
    }
    Ok(drafts)
}

fn render_variants(ctx: &ImageContext, chains: Vec<Vec<Transform>>) -> Result<Vec<RenderedAsset>, GenError> {
    chains
        .into_iter()
        .map(|c| Ok(RenderedAsset::render(&ctx.image.image_id, &ctx.image.pixels, c)?))
        .collect()
}

fn gen_image_blur(ctx: &ImageContext) -> Result<Vec<Draft>, GenError> {
    let (mut rng, seed) = ctx.rng(TaskType::T2_5);
    let mut sigmas = ctx.config.corruption.blur_sigma.clone();
    sigmas.shuffle(&mut rng);
    let chains = sigmas.iter().take(3).map(|s| vec![Transform::Blur { sigma: *s, region: None }]).collect();
    let blurred = render_variants(ctx, chains)?;
    let base = laplacian_variance(&ctx.image.pixels);
    if blurred.iter().any(|b| laplacian_variance(&b.pixels) >= base) {
        return Ok(vec![]);
    }
    let mut options = vec![ctx.original()];
    options.extend(blurred);
    let mut task = ctx.task(TaskType::T2_5, seed, None, Answer::Choice(0))?;
    task.provenance = vec!["laplacian_variance".into()];
    Ok(vec![variant_quiz(task, &mut rng, vec![], options, 0)])
}

fn gen_image_noise(ctx: &ImageContext) -> Result<Vec<Draft>, GenError> {
    let (mut rng, seed) = ctx.rng(TaskType::T2_6);
    let mut stds = ctx.config.corruption.noise_std.clone();
    stds.shuffle(&mut rng);
    let chains = stds
        .iter()
        .take(3)
        .map(|s| vec![Transform::Noise { std: *s, seed: rng.random(), region: None }])
        .collect();
    let noisy = render_variants(ctx, chains)?;
    if noisy.iter().any(|n| n.pixels == ctx.image.pixels) {
        return Ok(vec![]);
    }
    let mut options = vec![ctx.original()];
    options.extend(noisy);
    let mut task = ctx.task(TaskType::T2_6, seed, None, Answer::Choice(0))?;
    task.provenance = vec!["construction".into()];
    Ok(vec![variant_quiz(task, &mut rng, vec![], options, 0)])
}

/// For a comparison pair, which object is correct (0 or 1), if eligible.
fn compare_pair(ctx: &ImageContext, task_type: TaskType, a: &MetadataRecord, b: &MetadataRecord) -> Option<usize> {
    let cfg = ctx.config;
    match task_type {
        TaskType::T3_1 => {
            let (sa, sb) = (a.segmentation_area? as f64, b.segmentation_area? as f64);
            let (big, small) = if sa >= sb { (sa, sb) } else { (sb, sa) };
            (small > 0.0 && big / small >= cfg.min_size_ratio).then_some(if sa > sb { 0 } else { 1 })
        }
        TaskType::T3_2 => {
            let (xa, xb) = (a.bbox?.center().0, b.bbox?.center().0);
            ((xa - xb).abs() >= cfg.min_position_margin * ctx.image.width as f64).then_some(if xa < xb { 0 } else { 1 })
        }
        TaskType::T3_3 => {
            let (ya, yb) = (a.bbox?.center().1, b.bbox?.center().1);
            ((ya - yb).abs() >= cfg.min_position_margin * ctx.image.height as f64).then_some(if ya > yb { 0 } else { 1 })
        }
        TaskType::T6_1 => {
            let (da, db) = (a.average_depth?, b.average_depth?);
            ((da - db).abs() >= cfg.min_depth_margin).then_some(if da > db { 0 } else { 1 })
        }
        _ => None,
    }
}

fn provenance_for(task_type: TaskType) -> &'static str {
    match task_type {
        TaskType::T3_1 => "segmentation_area",
        TaskType::T6_1 | TaskType::T6_2 => "average_depth",
        TaskType::T4_1 => "segmask_touches_segmask_with",
        TaskType::T5_4 => "brightness_score",
        _ => "bbox_coordinates",
    }
}

fn object_pairs<'a>(ctx: &ImageContext<'a>) -> Vec<(&'a ObjectInstance, &'a ObjectInstance)> {
    let objs = &ctx.image.objects;
    let mut pairs = Vec::new();
    for i in 0..objs.len() {
        for j in i + 1..objs.len() {
            pairs.push((&objs[i], &objs[j]));
        }
    }
    pairs
}

fn pair_draft(
    ctx: &ImageContext,
    task_type: TaskType,
    seed: u64,
    rng: &mut ChaCha8Rng,
    a: &ObjectInstance,
    b: &ObjectInstance,
    key: impl FnOnce(MarkerColor, MarkerColor) -> Answer,
) -> Result<Draft, GenError> {
    let color_a = if rng.random_bool(0.5) { MarkerColor::Red } else { MarkerColor::Green };
    let color_b = color_a.other();
    let mut task = ctx.task(task_type, seed, None, key(color_a, color_b))?;
    task.subject_object_ids = vec![a.object_id.clone(), b.object_id.clone()];
    task.provenance = vec![provenance_for(task_type).into()];
    let markings = vec![box_marking(a, color_a), box_marking(b, color_b)];
    Ok(single_image(task, marked(ctx, markings.clone())?, markings))
}

fn gen_pair_comparison(ctx: &ImageContext, task_type: TaskType) -> Result<Vec<Draft>, GenError> {
    let (mut rng, seed) = ctx.rng(task_type);
    let mut eligible: Vec<(&ObjectInstance, &ObjectInstance, usize)> = object_pairs(ctx)
        .into_iter()
        .filter_map(|(a, b)| {
            let correct = compare_pair(ctx, task_type, ctx.meta(&a.object_id)?, ctx.meta(&b.object_id)?)?;
            Some((a, b, correct))
        })
        .collect();
    eligible.shuffle(&mut rng);
    let mut drafts = Vec::new();
    for (a, b, correct) in eligible.into_iter().take(ctx.cap()) {
        drafts.push(pair_draft(ctx, task_type, seed, &mut rng, a, b, |ca, cb| {
            Answer::Color(if correct == 0 { ca } else { cb })
        })?);
    }
    Ok(drafts)
}

fn gen_other_side(ctx: &ImageContext, task_type: TaskType) -> Result<Vec<Draft>, GenError> {
    let (mut rng, seed) = ctx.rng(task_type);
    let objs = &ctx.image.objects;
    if objs.len() < 2 {
        return Ok(vec![]);
    }
    let (axis_len, horizontal) = match task_type {
        TaskType::T3_4 => (ctx.image.width as f64, true),
        _ => (ctx.image.height as f64, false),
    };
    let margin = ctx.config.min_position_margin * axis_len;
    // signed offset of `other` toward the queried side (left or bottom)
    let toward = |subject: (f64, f64), other: (f64, f64)| {
        if horizontal {
            subject.0 - other.0
        } else {
            other.1 - subject.1
        }
    };
    let mut yes = Vec::new();
    let mut no = Vec::new();
    for s in objs {
        let Some(cs) = ctx.center(&s.object_id) else { continue };
        let offsets: Option<Vec<f64>> =
            objs.iter().filter(|o| o.object_id != s.object_id).map(|o| ctx.center(&o.object_id).map(|c| toward(cs, c))).collect();
        let Some(offsets) = offsets else { continue };
        if offsets.iter().any(|d| *d >= margin) {
            yes.push(s);
        } else if offsets.iter().all(|d| *d <= -margin) {
            no.push(s);
        }
    }
    yes.shuffle(&mut rng);
    no.shuffle(&mut rng);
    let mut drafts = Vec::new();
    for (subjects, key) in [(yes, Answer::Yes), (no, Answer::No)] {
        for s in subjects.into_iter().take(ctx.cap()) {
            let mut task = ctx.task(task_type, seed, Some(&s.class_name), key)?;
            task.subject_object_ids = vec![s.object_id.clone()];
            task.provenance = vec!["bbox_coordinates".into()];
            let markings = vec![box_marking(s, MarkerColor::Green)];
            drafts.push(single_image(task, marked(ctx, markings.clone())?, markings));
        }
    }
    Ok(drafts)
}

fn gen_touching(ctx: &ImageContext) -> Result<Vec<Draft>, GenError> {
    let (mut rng, seed) = ctx.rng(TaskType::T4_1);
    let mut touching = Vec::new();
    let mut apart = Vec::new();
    for (a, b) in object_pairs(ctx) {
        let Some(with) = ctx.meta(&a.object_id).and_then(|m| m.segmask_touches_segmask_with.as_ref()) else {
            continue;
        };
        if with.contains(&b.object_id) {
            touching.push((a, b));
        } else {
            apart.push((a, b));
        }
    }
    touching.shuffle(&mut rng);
    apart.shuffle(&mut rng);
    let mut drafts = Vec::new();
    for (pairs, key) in [(touching, Answer::Yes), (apart, Answer::No)] {
        for (a, b) in pairs.into_iter().take(ctx.cap()) {
            drafts.push(pair_draft(ctx, TaskType::T4_1, seed, &mut rng, a, b, |_, _| key)?);
        }
    }
    Ok(drafts)
}

fn gen_direction(ctx: &ImageContext) -> Result<Vec<Draft>, GenError> {
    let (mut rng, seed) = ctx.rng(TaskType::T4_2);
    let mut objects: Vec<&ObjectInstance> = ctx.image.objects.iter().collect();
    objects.shuffle(&mut rng);
    let mut drafts = Vec::new();
    for obj in objects {
        let key = match ctx.meta(&obj.object_id).and_then(|m| m.direction) {
            Some(Direction::TowardCamera) => 0,
            Some(Direction::Away) => 1,
            Some(Direction::Left) => 2,
            Some(Direction::Right) => 3,
            _ => continue,
        };
        let mut task = ctx.task(TaskType::T4_2, seed, Some(&obj.class_name), Answer::choice(key))?;
        task.subject_object_ids = vec![obj.object_id.clone()];
        task.provenance = vec!["direction".into()];
        let markings = vec![box_marking(obj, MarkerColor::Green)];
        drafts.push(fixed_quiz(task, &DIRECTION_OPTIONS, key, marked(ctx, markings.clone())?, markings));
        if drafts.len() == ctx.cap() {
            break;
        }
    }
    Ok(drafts)
}

/// Hue bin (0..8, 45° wide, centred on multiples of 45°) of a chromatic pixel.
pub fn hue_bin(rgb: [u8; 3]) -> Option<usize> {
    let (h, s, v) = rgb_to_hsv(rgb);
    if s < 0.25 || v < 0.2 {
        return None;
    }
    Some((((h + 22.5) / 45.0).floor() as usize) % HUE_BINS)
}

pub fn hue_bin_color(bin: usize) -> [u8; 3] {
    hsv_to_rgb(bin as f64 * 45.0, 1.0, 1.0)
}

fn gen_color_match(ctx: &ImageContext) -> Result<Vec<Draft>, GenError> {
    let (mut rng, seed) = ctx.rng(TaskType::T5_1);
    let mut objects: Vec<&ObjectInstance> = ctx.image.objects.iter().collect();
    objects.shuffle(&mut rng);
    let side = tile_size(ctx.image.width, ctx.image.height).max(32);
    let mut drafts = Vec::new();
    for obj in objects {
        let mut hist = [0u64; HUE_BINS];
        let mut total = 0u64;
        for (x, y) in obj.mask.pixels() {
            total += 1;
            if let Some(b) = hue_bin(ctx.image.pixels.get_pixel(x, y).0) {
                hist[b] += 1;
            }
        }
        let (bin, count) = hist.iter().enumerate().max_by_key(|(i, c)| (**c, std::cmp::Reverse(*i))).expect("bins");
        if total == 0 || (*count as f64) < ctx.config.dominant_hue_share * total as f64 {
            continue;
        }
        let circular = |a: usize, b: usize| {
            let d = a.abs_diff(b);
            d.min(HUE_BINS - d)
        };
        let mut others: Vec<usize> = (0..HUE_BINS).filter(|b| circular(*b, bin) >= 2).collect();
        others.shuffle(&mut rng);
        let bins: Vec<usize> = std::iter::once(bin).chain(others.into_iter().take(3)).collect();
        let tiles = render_variants(
            ctx,
            bins.iter().map(|b| vec![Transform::Solid { width: side, height: side, rgb: hue_bin_color(*b) }]).collect(),
        )?;
        let marking = box_marking(obj, MarkerColor::Green);
        let image = marked(ctx, vec![marking.clone()])?;
        let mut task = ctx.task(TaskType::T5_1, seed, Some(&obj.class_name), Answer::Choice(0))?;
        task.subject_object_ids = vec![obj.object_id.clone()];
        task.markings = vec![marking];
        task.provenance = vec!["hue_histogram".into()];
        task.params.insert("hue_bins".into(), json!(bins));
        drafts.push(variant_quiz(task, &mut rng, vec![image], tiles, 0));
        if drafts.len() == ctx.cap() {
            break;
        }
    }
    Ok(drafts)
}

fn gen_second_brightest(ctx: &ImageContext) -> Result<Vec<Draft>, GenError> {
    let (mut rng, seed) = ctx.rng(TaskType::T5_2);
    let mut factors = ctx.config.corruption.brightness_factors.clone();
    factors.shuffle(&mut rng);
    factors.truncate(3);
    let mut options = vec![ctx.original()];
    options.extend(render_variants(ctx, factors.iter().map(|f| vec![Transform::Brightness { factor: *f, region: None }]).collect())?);
    let lum: Vec<f64> = options.iter().map(|o| mean_luminance(&o.pixels)).collect();
    for i in 0..4 {
        for j in i + 1..4 {
            if (lum[i] - lum[j]).abs() < ctx.config.min_brightness_margin {
                return Ok(vec![]);
            }
        }
    }
    let mut by_brightness: Vec<usize> = (0..4).collect();
    by_brightness.sort_by(|a, b| lum[*b].total_cmp(&lum[*a]));
    let key = by_brightness[1];
    let mut task = ctx.task(TaskType::T5_2, seed, None, Answer::Choice(0))?;
    task.provenance = vec!["brightness_score".into()];
    let mut all_factors = vec![1.0];
    all_factors.extend(&factors);
    task.params.insert("factors".into(), json!(all_factors));
    Ok(vec![variant_quiz(task, &mut rng, vec![], options, key)])
}

fn gen_color_shift(ctx: &ImageContext) -> Result<Vec<Draft>, GenError> {
    let (mut rng, seed) = ctx.rng(TaskType::T5_3);
    let mut degrees = ctx.config.corruption.hue_degrees.clone();
    degrees.shuffle(&mut rng);
    let shifted = render_variants(
        ctx,
        degrees.iter().take(3).map(|d| vec![Transform::ColorShift { degrees: *d, region: None }]).collect(),
    )?;
    if shifted.iter().any(|s| mean_abs_delta(&s.pixels, &ctx.image.pixels) < MIN_HUE_SHIFT_DELTA) {
        return Ok(vec![]);
    }
    let mut options = vec![ctx.original()];
    options.extend(shifted);
    let mut task = ctx.task(TaskType::T5_3, seed, None, Answer::Choice(0))?;
    task.provenance = vec!["construction".into()];
    Ok(vec![variant_quiz(task, &mut rng, vec![], options, 0)])
}

/// Mean luminance over the square window of the given half-size, clipped to the image.
pub fn window_luminance(pixels: &RgbImage, x: u32, y: u32, half: u32) -> f64 {
    let (w, h) = pixels.dimensions();
    let (x0, x1) = (x.saturating_sub(half), (x + half).min(w - 1));
    let (y0, y1) = (y.saturating_sub(half), (y + half).min(h - 1));
    let mut sum = 0.0;
    let mut n = 0.0;
    for yy in y0..=y1 {
        for xx in x0..=x1 {
            sum += luminance(pixels.get_pixel(xx, yy).0);
            n += 1.0;
        }
    }
    sum / n
}

fn gen_point_pair(ctx: &ImageContext, task_type: TaskType) -> Result<Vec<Draft>, GenError> {
    let (mut rng, seed) = ctx.rng(task_type);
    let (w, h) = (ctx.image.width, ctx.image.height);
    if w <= 2 * LOCAL_WINDOW + 1 || h <= 2 * LOCAL_WINDOW + 1 {
        return Ok(vec![]);
    }
    let depth = match task_type {
        TaskType::T6_2 => match ctx.depth {
            Some(d) if (d.width, d.height) == (w, h) => Some(d),
            _ => return Ok(vec![]),
        },
        _ => None,
    };
    let points: Vec<(u32, u32)> = (0..POINT_SAMPLES)
        .map(|_| (rng.random_range(LOCAL_WINDOW..w - LOCAL_WINDOW), rng.random_range(LOCAL_WINDOW..h - LOCAL_WINDOW)))
        .collect();
    let value = |(x, y): (u32, u32)| match depth {
        Some(d) => d.depth(x, y),
        None => window_luminance(&ctx.image.pixels, x, y, LOCAL_WINDOW),
    };
    let margin = match task_type {
        TaskType::T6_2 => ctx.config.min_depth_margin,
        _ => ctx.config.min_brightness_margin,
    };
    let min_dist = ctx.config.min_point_distance * ((w as f64).powi(2) + (h as f64).powi(2)).sqrt();
    let values: Vec<f64> = points.iter().map(|p| value(*p)).collect();
    let mut drafts = Vec::new();
    let mut pairs_found = 0;
    'search: for i in 0..points.len() {
        for j in i + 1..points.len() {
            let (p, q) = (points[i], points[j]);
            let dist = ((p.0 as f64 - q.0 as f64).powi(2) + (p.1 as f64 - q.1 as f64).powi(2)).sqrt();
            if dist < min_dist || (values[i] - values[j]).abs() < margin {
                continue;
            }
            if depth.is_none() {
                // the marker disc hides the 9x9 window; the visible surroundings must agree
                let ctx_i = window_luminance(&ctx.image.pixels, p.0, p.1, CONTEXT_WINDOW);
                let ctx_j = window_luminance(&ctx.image.pixels, q.0, q.1, CONTEXT_WINDOW);
                if (ctx_i > ctx_j) != (values[i] > values[j]) {
                    continue;
                }
            }
            let (high, low) = if values[i] > values[j] { (p, q) } else { (q, p) };
            for key in [Answer::Yes, Answer::No] {
                let (red, green) = if key == Answer::Yes { (high, low) } else { (low, high) };
                let mut task = ctx.task(task_type, seed, None, key)?;
                task.provenance = vec![provenance_for(task_type).into()];
                task.params.insert("points".into(), json!([[red.0, red.1], [green.0, green.1]]));
                let markings = vec![point_marking(red.0, red.1, MarkerColor::Red), point_marking(green.0, green.1, MarkerColor::Green)];
                drafts.push(single_image(task, marked(ctx, markings.clone())?, markings));
            }
            pairs_found += 1;
            if pairs_found == ctx.cap() {
                break 'search;
            }
        }
    }
    Ok(drafts)
}

const TILE_PLACEMENT_ATTEMPTS: usize = 8;

fn gen_jigsaw(ctx: &ImageContext, task_type: TaskType) -> Result<Vec<Draft>, GenError> {
    let (mut rng, seed) = ctx.rng(task_type);
    let (w, h) = (ctx.image.width, ctx.image.height);
    let side = tile_size(w, h);
    if side >= w || side >= h {
        return Ok(vec![]);
    }
    let mut drafts = Vec::new();
    for _ in 0..TILE_PLACEMENT_ATTEMPTS {
        let x = rng.random_range(0..=w - side);
        let y = rng.random_range(0..=h - side);
        let rect = BBox::new(x, y, x + side, y + side);
        let rotation = (task_type == TaskType::T7_1).then(|| *[90u32, 180, 270].choose(&mut rng).expect("non-empty"));
        let Ok(jig) = crate::imageops::extract_tile(&ctx.image.image_id, &ctx.image.pixels, rect, rotation, rng.random())
        else {
            continue;
        };
        if jig.distractors.iter().any(|d| d.pixels == jig.correct.pixels) {
            continue;
        }
        let mut task = ctx.task(task_type, seed, None, Answer::Choice(0))?;
        task.provenance = vec!["construction".into()];
        task.params.insert("tile_rect".into(), json!(rect));
        task.params.insert("distractor_rects".into(), json!(jig.tiles.distractor_rects));
        if let Some(r) = rotation {
            task.params.insert("rotation".into(), json!(r));
        }
        let mut options = vec![jig.correct];
        options.extend(jig.distractors);
        drafts.push(variant_quiz(task, &mut rng, vec![jig.cutout], options, 0));
        if drafts.len() == ctx.cap() {
            break;
        }
    }
    Ok(drafts)
}

fn gen_rotation(ctx: &ImageContext) -> Result<Vec<Draft>, GenError> {
    let (mut rng, seed) = ctx.rng(TaskType::T8_1);
    let rotated = render_variants(ctx, [90, 180, 270].map(|d| vec![Transform::Rotate { degrees: d }]).to_vec())?;
    if rotated.iter().any(|r| r.pixels == ctx.image.pixels) {
        return Ok(vec![]);
    }
    let mut options = vec![ctx.original()];
    options.extend(rotated);
    let mut task = ctx.task(TaskType::T8_1, seed, None, Answer::Choice(0))?;
    task.provenance = vec!["construction".into()];
    Ok(vec![variant_quiz(task, &mut rng, vec![], options, 0)])
}
