//! Shared domain types: images, object instances, metadata, tasks, answers
//! and evaluation records.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Half-open axis-aligned box in pixel coordinates: `[x_min, x_max) × [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> u32 {
        self.x_max.saturating_sub(self.x_min)
    }

    pub fn height(&self) -> u32 {
        self.y_max.saturating_sub(self.y_min)
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn is_degenerate(&self) -> bool {
        self.x_min >= self.x_max || self.y_min >= self.y_max
    }

    /// Center in continuous pixel coordinates.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min as f64 + self.x_max as f64) / 2.0,
            (self.y_min as f64 + self.y_max as f64) / 2.0,
        )
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = self.x_max.min(other.x_max).saturating_sub(self.x_min.max(other.x_min));
        let h = self.y_max.min(other.y_max).saturating_sub(self.y_min.max(other.y_min));
        w as u64 * h as u64
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        if inter == 0 {
            return 0.0;
        }
        inter as f64 / (self.area() + other.area() - inter) as f64
    }

    /// True when the two boxes overlap or share an edge or corner, i.e. one box
    /// dilated by one pixel intersects the other.
    pub fn touches(&self, other: &BBox) -> bool {
        let dilated_x_min = self.x_min as i64 - 1;
        let dilated_y_min = self.y_min as i64 - 1;
        let dilated_x_max = self.x_max as i64 + 1;
        let dilated_y_max = self.y_max as i64 + 1;
        dilated_x_min < other.x_max as i64
            && (other.x_min as i64) < dilated_x_max
            && dilated_y_min < other.y_max as i64
            && (other.y_min as i64) < dilated_y_max
    }
}

/// Binary raster aligned to an image, stored row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Mask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("set", &self.count())
            .finish()
    }
}

impl Mask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![false; width as usize * height as usize] }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut mask = Self::empty(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    mask.set(x, y, true);
                }
            }
        }
        mask
    }

    pub fn from_rect(width: u32, height: u32, rect: BBox) -> Self {
        Self::from_fn(width, height, |x, y| rect.contains(x, y))
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        x < self.width && y < self.height && self.bits[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let idx = (y * self.width + x) as usize;
        self.bits[idx] = value;
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().filter(|b| **b).count() as u64
    }

    /// Iterates set pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| (i as u32 % w, i as u32 / w))
    }

    /// Tight half-open bounding box of the set pixels, or `None` for an empty mask.
    pub fn tight_bbox(&self) -> Option<BBox> {
        let mut bbox: Option<BBox> = None;
        for (x, y) in self.pixels() {
            bbox = Some(match bbox {
                None => BBox::new(x, y, x + 1, y + 1),
                Some(b) => BBox::new(b.x_min.min(x), b.y_min.min(y), b.x_max.max(x + 1), b.y_max.max(y + 1)),
            });
        }
        bbox
    }

    /// True when some pixel of `other` lies within Chebyshev distance 1 of a
    /// pixel of `self` (one-pixel dilation, 8-connectivity). Overlap counts.
    pub fn touches(&self, other: &Mask) -> bool {
        let (Some(a), Some(b)) = (self.tight_bbox(), other.tight_bbox()) else {
            return false;
        };
        if !a.touches(&b) {
            return false;
        }
        for (x, y) in self.pixels() {
            let x0 = x.saturating_sub(1);
            let y0 = y.saturating_sub(1);
            for ny in y0..=(y + 1).min(other.height.saturating_sub(1)) {
                for nx in x0..=(x + 1).min(other.width.saturating_sub(1)) {
                    if other.get(nx, ny) {
                        return true;
                    }
                }
            }
        }
        false
    }
}

/// One annotated object instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectInstance {
    pub object_id: String,
    pub class_name: String,
    pub mask: Mask,
    pub bbox: BBox,
}

impl ObjectInstance {
    /// Builds an instance whose bbox is recomputed from the mask.
    pub fn from_mask(object_id: impl Into<String>, class_name: impl Into<String>, mask: Mask) -> Option<Self> {
        let bbox = mask.tight_bbox()?;
        Some(Self { object_id: object_id.into(), class_name: class_name.into(), mask, bbox })
    }
}

/// An image with its instance segmentation. The unit of input.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub pixels: RgbImage,
    pub objects: Vec<ObjectInstance>,
    pub domain_tag: String,
}

impl AnnotatedImage {
    pub fn object(&self, object_id: &str) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.object_id == object_id)
    }

    pub fn distinct_classes(&self) -> usize {
        self.objects.iter().map(|o| o.class_name.as_str()).collect::<HashSet<_>>().len()
    }
}

/// Where a metadata attribute came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetadataSource {
    Heuristic,
    Model,
    Human,
}

/// The fifteen per-object metadata attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Occluded,
    Truncated,
    Direction,
    RelativeSize,
    BboxTouchesBbox,
    SegmaskTouchesSegmask,
    SegmaskTouchesSegmaskWith,
    SegmentationArea,
    BrightnessScore,
    MichelsonContrastScore,
    BboxCoordinates,
    ClassName,
    AverageDepth,
    Top95Depth,
    Bottom5Depth,
}

impl Attribute {
    pub const ALL: [Attribute; 15] = [
        Attribute::Occluded,
        Attribute::Truncated,
        Attribute::Direction,
        Attribute::RelativeSize,
        Attribute::BboxTouchesBbox,
        Attribute::SegmaskTouchesSegmask,
        Attribute::SegmaskTouchesSegmaskWith,
        Attribute::SegmentationArea,
        Attribute::BrightnessScore,
        Attribute::MichelsonContrastScore,
        Attribute::BboxCoordinates,
        Attribute::ClassName,
        Attribute::AverageDepth,
        Attribute::Top95Depth,
        Attribute::Bottom5Depth,
    ];

    pub fn source(self) -> MetadataSource {
        match self {
            Attribute::Occluded | Attribute::Truncated | Attribute::Direction => MetadataSource::Human,
            Attribute::AverageDepth | Attribute::Top95Depth | Attribute::Bottom5Depth => MetadataSource::Model,
            _ => MetadataSource::Heuristic,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Occluded => "occluded",
            Attribute::Truncated => "truncated",
            Attribute::Direction => "direction",
            Attribute::RelativeSize => "relative_size",
            Attribute::BboxTouchesBbox => "bbox_touches_bbox",
            Attribute::SegmaskTouchesSegmask => "segmask_touches_segmask",
            Attribute::SegmaskTouchesSegmaskWith => "segmask_touches_segmask_with",
            Attribute::SegmentationArea => "segmentation_area",
            Attribute::BrightnessScore => "brightness_score",
            Attribute::MichelsonContrastScore => "michelson_contrast_score",
            Attribute::BboxCoordinates => "bbox_coordinates",
            Attribute::ClassName => "class_name",
            Attribute::AverageDepth => "average_depth",
            Attribute::Top95Depth => "top_95_depth",
            Attribute::Bottom5Depth => "bottom_5_depth",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Attribute {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Attribute::ALL
            .iter()
            .copied()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown attribute {s:?}"))
    }
}

/// Attributes that are collected from human raters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanAttribute {
    Occluded,
    Truncated,
    Direction,
}

impl HumanAttribute {
    pub const ALL: [HumanAttribute; 3] = [HumanAttribute::Occluded, HumanAttribute::Truncated, HumanAttribute::Direction];

    pub fn as_str(self) -> &'static str {
        match self {
            HumanAttribute::Occluded => "occluded",
            HumanAttribute::Truncated => "truncated",
            HumanAttribute::Direction => "direction",
        }
    }

    /// Answer tokens a rater may give.
    pub fn allowed_answers(self) -> &'static [&'static str] {
        match self {
            HumanAttribute::Occluded | HumanAttribute::Truncated => &["yes", "no"],
            HumanAttribute::Direction => &["toward_camera", "away", "left", "right"],
        }
    }
}

impl fmt::Display for HumanAttribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HumanAttribute {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        HumanAttribute::ALL
            .iter()
            .copied()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown human attribute {s:?}"))
    }
}

/// Tri-state consensus on a yes/no attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Consensus {
    Yes,
    No,
    Unresolved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TowardCamera,
    Away,
    Left,
    Right,
    Unresolved,
}

impl Direction {
    pub fn from_token(token: &str) -> Option<Self> {
        match token {
            "toward_camera" => Some(Direction::TowardCamera),
            "away" => Some(Direction::Away),
            "left" => Some(Direction::Left),
            "right" => Some(Direction::Right),
            "unresolved" => Some(Direction::Unresolved),
            _ => None,
        }
    }
}

/// Per-object metadata. Fields are optional so partial records from the
/// individual enrichment passes can be merged.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub image_id: String,
    pub object_id: String,
    pub class_name: Option<String>,
    pub bbox: Option<BBox>,
    pub relative_size: Option<f64>,
    pub segmentation_area: Option<u64>,
    pub bbox_touches_bbox: Option<bool>,
    pub segmask_touches_segmask: Option<bool>,
    pub segmask_touches_segmask_with: Option<Vec<String>>,
    pub brightness_score: Option<f64>,
    pub michelson_contrast_score: Option<f64>,
    pub average_depth: Option<f64>,
    pub top_95_depth: Option<f64>,
    pub bottom_5_depth: Option<f64>,
    pub occluded: Option<Consensus>,
    pub truncated: Option<Consensus>,
    pub direction: Option<Direction>,
    pub source_tags: BTreeMap<Attribute, MetadataSource>,
}

impl MetadataRecord {
    pub fn new(image_id: impl Into<String>, object_id: impl Into<String>) -> Self {
        Self { image_id: image_id.into(), object_id: object_id.into(), ..Default::default() }
    }

    pub fn tag(&mut self, attribute: Attribute) {
        self.source_tags.insert(attribute, attribute.source());
    }

    /// Copies every populated field of `other` into `self`.
    pub fn merge(&mut self, other: MetadataRecord) {
        macro_rules! take {
            ($($field:ident),*) => {
                $(if other.$field.is_some() { self.$field = other.$field; })*
            };
        }
        take!(
            class_name,
            bbox,
            relative_size,
            segmentation_area,
            bbox_touches_bbox,
            segmask_touches_segmask,
            segmask_touches_segmask_with,
            brightness_score,
            michelson_contrast_score,
            average_depth,
            top_95_depth,
            bottom_5_depth,
            occluded,
            truncated,
            direction
        );
        self.source_tags.extend(other.source_tags);
    }
}

/// The 25 task types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskType {
    T1_1,
    T1_2,
    T1_3,
    T2_1,
    T2_2,
    T2_3,
    T2_4,
    T2_5,
    T2_6,
    T3_1,
    T3_2,
    T3_3,
    T3_4,
    T3_5,
    T4_1,
    T4_2,
    T5_1,
    T5_2,
    T5_3,
    T5_4,
    T6_1,
    T6_2,
    T7_1,
    T7_2,
    T8_1,
}

impl TaskType {
    pub const ALL: [TaskType; 25] = [
        TaskType::T1_1,
        TaskType::T1_2,
        TaskType::T1_3,
        TaskType::T2_1,
        TaskType::T2_2,
        TaskType::T2_3,
        TaskType::T2_4,
        TaskType::T2_5,
        TaskType::T2_6,
        TaskType::T3_1,
        TaskType::T3_2,
        TaskType::T3_3,
        TaskType::T3_4,
        TaskType::T3_5,
        TaskType::T4_1,
        TaskType::T4_2,
        TaskType::T5_1,
        TaskType::T5_2,
        TaskType::T5_3,
        TaskType::T5_4,
        TaskType::T6_1,
        TaskType::T6_2,
        TaskType::T7_1,
        TaskType::T7_2,
        TaskType::T8_1,
    ];

    pub fn id(self) -> &'static str {
        match self {
            TaskType::T1_1 => "T1.1",
            TaskType::T1_2 => "T1.2",
            TaskType::T1_3 => "T1.3",
            TaskType::T2_1 => "T2.1",
            TaskType::T2_2 => "T2.2",
            TaskType::T2_3 => "T2.3",
            TaskType::T2_4 => "T2.4",
            TaskType::T2_5 => "T2.5",
            TaskType::T2_6 => "T2.6",
            TaskType::T3_1 => "T3.1",
            TaskType::T3_2 => "T3.2",
            TaskType::T3_3 => "T3.3",
            TaskType::T3_4 => "T3.4",
            TaskType::T3_5 => "T3.5",
            TaskType::T4_1 => "T4.1",
            TaskType::T4_2 => "T4.2",
            TaskType::T5_1 => "T5.1",
            TaskType::T5_2 => "T5.2",
            TaskType::T5_3 => "T5.3",
            TaskType::T5_4 => "T5.4",
            TaskType::T6_1 => "T6.1",
            TaskType::T6_2 => "T6.2",
            TaskType::T7_1 => "T7.1",
            TaskType::T7_2 => "T7.2",
            TaskType::T8_1 => "T8.1",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskType::T1_1 => "Is Object Present",
            TaskType::T1_2 => "Count Objects",
            TaskType::T1_3 => "Is Other Object Present",
            TaskType::T2_1 => "Is Object Occluded",
            TaskType::T2_2 => "Is Object Truncated",
            TaskType::T2_3 => "Blur Object",
            TaskType::T2_4 => "Noise Object",
            TaskType::T2_5 => "Blur Of Image",
            TaskType::T2_6 => "Noise Of Image",
            TaskType::T3_1 => "Size Comparison",
            TaskType::T3_2 => "Horizontal Comparison",
            TaskType::T3_3 => "Vertical Comparison",
            TaskType::T3_4 => "Is Other Object Left",
            TaskType::T3_5 => "Is Other Object Lower",
            TaskType::T4_1 => "Is Object Touching Other Object",
            TaskType::T4_2 => "Is Object Facing Camera",
            TaskType::T5_1 => "Color Object Matching",
            TaskType::T5_2 => "2nd Brightest Image",
            TaskType::T5_3 => "Color Of Image",
            TaskType::T5_4 => "Brightness Comparison Of Two Points",
            TaskType::T6_1 => "Depth Comparison",
            TaskType::T6_2 => "Depth Two Points Image",
            TaskType::T7_1 => "Jigsaw Rotation Puzzle",
            TaskType::T7_2 => "Jigsaw Puzzle Image",
            TaskType::T8_1 => "Rotation Of Image",
        }
    }

    pub fn answer_type(self) -> AnswerType {
        use TaskType::*;
        match self {
            T1_1 | T1_3 | T2_2 | T3_4 | T3_5 | T4_1 | T5_4 | T6_2 => AnswerType::Binary,
            T1_2 => AnswerType::Count,
            T3_1 | T3_2 | T3_3 | T6_1 => AnswerType::Color,
            T2_1 | T2_3 | T2_4 | T2_5 | T2_6 | T4_2 | T5_1 | T5_2 | T5_3 | T7_1 | T7_2 | T8_1 => AnswerType::Quiz4,
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for TaskType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskType::ALL
            .iter()
            .copied()
            .find(|t| t.id() == s)
            .ok_or_else(|| format!("unknown task type {s:?}"))
    }
}

impl Serialize for TaskType {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.id())
    }
}

impl<'de> Deserialize<'de> for TaskType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerType {
    Binary,
    Count,
    Quiz4,
    Color,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerColor {
    Red,
    Green,
}

impl MarkerColor {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            MarkerColor::Red => [255, 0, 0],
            MarkerColor::Green => [0, 255, 0],
        }
    }

    pub fn other(self) -> Self {
        match self {
            MarkerColor::Red => MarkerColor::Green,
            MarkerColor::Green => MarkerColor::Red,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MarkerColor::Red => "red",
            MarkerColor::Green => "green",
        }
    }
}

/// Canonical answer. Serialized as a lowercase token: `yes`, `no`, `a`..`d`,
/// `red`, `green` or a decimal integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Answer {
    Yes,
    No,
    /// Quiz option index 0..=3.
    Choice(u8),
    Color(MarkerColor),
    Count(u64),
}

impl Answer {
    pub fn binary(value: bool) -> Self {
        if value {
            Answer::Yes
        } else {
            Answer::No
        }
    }

    pub fn choice(index: usize) -> Self {
        assert!(index < 4, "quiz option index out of range");
        Answer::Choice(index as u8)
    }

    pub fn answer_type(&self) -> AnswerType {
        match self {
            Answer::Yes | Answer::No => AnswerType::Binary,
            Answer::Choice(_) => AnswerType::Quiz4,
            Answer::Color(_) => AnswerType::Color,
            Answer::Count(_) => AnswerType::Count,
        }
    }

    pub fn token(&self) -> String {
        match self {
            Answer::Yes => "yes".into(),
            Answer::No => "no".into(),
            Answer::Choice(i) => ((b'a' + i) as char).to_string(),
            Answer::Color(c) => c.as_str().into(),
            Answer::Count(n) => n.to_string(),
        }
    }

    /// Parses a canonical token (case-insensitive, surrounding whitespace ignored).
    pub fn from_token(token: &str) -> Option<Self> {
        let t = token.trim().to_ascii_lowercase();
        match t.as_str() {
            "yes" => Some(Answer::Yes),
            "no" => Some(Answer::No),
            "a" | "b" | "c" | "d" => Some(Answer::Choice(t.as_bytes()[0] - b'a')),
            "red" => Some(Answer::Color(MarkerColor::Red)),
            "green" => Some(Answer::Color(MarkerColor::Green)),
            _ if !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit()) => t.parse().ok().map(Answer::Count),
            _ => None,
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.token())
    }
}

impl Serialize for Answer {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.token())
    }
}

impl<'de> Deserialize<'de> for Answer {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Answer::from_token(&s).ok_or_else(|| serde::de::Error::custom(format!("invalid answer token {s:?}")))
    }
}

/// Marker drawn on an image: an object's box or a point disc.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marking {
    pub target: MarkTarget,
    pub color: MarkerColor,
    pub style: MarkStyle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkTarget {
    Object { object_id: String, bbox: BBox },
    Point { x: u32, y: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkStyle {
    Box,
    Point,
}

/// One quiz option: a text label and, for image-valued options, the asset shown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOption {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asset_id: Option<String>,
}

/// One generated benchmark question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: String,
    pub task_type: TaskType,
    pub answer_type: AnswerType,
    pub image_id: String,
    pub dataset: String,
    pub image_refs: Vec<String>,
    pub prompt_text: String,
    pub options: Vec<TaskOption>,
    pub answer_key: Answer,
    pub subject_object_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub markings: Vec<Marking>,
    /// Task-specific geometry (tile rectangles, point coordinates, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, serde_json::Value>,
    pub generation_seed: u64,
    /// Metadata attributes or pixel measures the key was derived from.
    pub provenance: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskViolation(pub String);

impl TaskInstance {
    /// Checks the answer-type and option invariants.
    pub fn check(&self) -> Result<(), TaskViolation> {
        if self.answer_type != self.task_type.answer_type() {
            return Err(TaskViolation(format!(
                "{}: answer type {:?} does not match {:?}",
                self.task_id,
                self.answer_type,
                self.task_type.answer_type()
            )));
        }
        if self.answer_key.answer_type() != self.answer_type {
            return Err(TaskViolation(format!("{}: answer key {} is not {:?}", self.task_id, self.answer_key, self.answer_type)));
        }
        match self.answer_type {
            AnswerType::Quiz4 if self.options.len() != 4 => {
                Err(TaskViolation(format!("{}: quiz has {} options", self.task_id, self.options.len())))
            }
            AnswerType::Binary | AnswerType::Count if !self.options.is_empty() => {
                Err(TaskViolation(format!("{}: {:?} task carries options", self.task_id, self.answer_type)))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalStatus {
    Answered,
    Unparseable,
    UnansweredSafety,
    TransportError,
}

/// One model's response to one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task_id: String,
    pub model_id: String,
    pub raw_response: String,
    pub parsed_answer: Option<Answer>,
    pub status: EvalStatus,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

impl EvalRecord {
    pub fn is_consistent(&self) -> bool {
        (self.status == EvalStatus::Answered) == self.parsed_answer.is_some()
    }
}

/// What a human rating refers to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingItem {
    Task { task_id: String },
    Object { image_id: String, object_id: String, attribute: HumanAttribute },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanRating {
    pub item: RatingItem,
    pub rater_id: String,
    /// Canonical lowercase answer token.
    pub answer: String,
    pub rank_in_sequence: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ViolationKind {
    ZeroDimension,
    PixelDimensionMismatch,
    DuplicateImageId,
    DuplicateObjectId,
    EmptyMask,
    MaskDimensionMismatch,
    DegenerateBbox,
    BboxNotTight,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub image_id: String,
    pub object_id: Option<String>,
    #[serde(flatten)]
    pub kind: ViolationKind,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub images_checked: usize,
    pub objects_checked: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every structural invariant of a dataset without modifying it.
pub fn validate_dataset(dataset: &[AnnotatedImage]) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut image_ids = HashSet::new();
    for image in dataset {
        report.images_checked += 1;
        let mut push = |object_id: Option<&str>, kind: ViolationKind, message: String| {
            report.violations.push(Violation {
                image_id: image.image_id.clone(),
                object_id: object_id.map(str::to_owned),
                kind,
                message,
            });
        };
        if !image_ids.insert(image.image_id.as_str()) {
            push(None, ViolationKind::DuplicateImageId, "duplicate id".into());
        }
        if image.width == 0 || image.height == 0 {
            push(None, ViolationKind::ZeroDimension, "image has zero width or height".into());
        }
        if image.pixels.dimensions() != (image.width, image.height) {
            push(
                None,
                ViolationKind::PixelDimensionMismatch,
                format!("pixel data is {:?}, expected {}x{}", image.pixels.dimensions(), image.width, image.height),
            );
        }
        let mut object_ids = HashSet::new();
        for object in &image.objects {
            let oid = Some(object.object_id.as_str());
            if !object_ids.insert(object.object_id.as_str()) {
                push(oid, ViolationKind::DuplicateObjectId, "duplicate id".into());
            }
            if (object.mask.width(), object.mask.height()) != (image.width, image.height) {
                push(oid, ViolationKind::MaskDimensionMismatch, "mask not aligned to image".into());
            }
            if object.bbox.is_degenerate() {
                push(oid, ViolationKind::DegenerateBbox, "bbox has zero extent".into());
            }
            match object.mask.tight_bbox() {
                None => push(oid, ViolationKind::EmptyMask, "mask has no set pixels".into()),
                Some(tight) if tight != object.bbox => push(
                    oid,
                    ViolationKind::BboxNotTight,
                    format!("bbox not tight: stored {:?}, mask extent {:?}", object.bbox, tight),
                ),
                Some(_) => {}
            }
        }
        report.objects_checked += image.objects.len();
    }
    report
}
