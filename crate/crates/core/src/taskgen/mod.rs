//! Task generation: eligibility rules and answer keys for the 25 task types,
//! and deterministic assembly into a task bundle.

mod bundle;
mod generators;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::imageops::CorruptionGrids;
use crate::model::{AnnotatedImage, MetadataSource, TaskType};

pub use bundle::{
    build_bundle, dataset_hash, read_bundle, BundleError, BundleManifest, LoadedBundle, TaskBundle, TypeCount, BUNDLE_FORMAT,
};
pub use generators::{generate_image_drafts, hue_bin, hue_bin_color, marker_interior, window_luminance, Draft, GenError, ImageContext, DIRECTION_OPTIONS, OCCLUSION_OPTIONS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub seed: u64,
    /// Minimum segmentation-area ratio between the two objects of a size comparison.
    pub min_size_ratio: f64,
    /// Minimum relative-depth difference for depth comparisons.
    pub min_depth_margin: f64,
    /// Minimum mean-luminance difference for brightness comparisons.
    pub min_brightness_margin: f64,
    /// Minimum bbox-center separation, as a fraction of the image side along the queried axis.
    pub min_position_margin: f64,
    /// Minimum distance between two marked points, as a fraction of the image diagonal.
    pub min_point_distance: f64,
    pub max_tasks_per_type_per_image: usize,
    pub binary_balance_tolerance: f64,
    /// Share of mask pixels that must fall in one hue bin for a color-matching task.
    pub dominant_hue_share: f64,
    /// Number of images to use, highest priority first. `None` uses all.
    pub image_budget: Option<usize>,
    pub corruption: CorruptionGrids,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            min_size_ratio: 1.5,
            min_depth_margin: 0.10,
            min_brightness_margin: 0.10,
            min_position_margin: 0.05,
            min_point_distance: 0.10,
            max_tasks_per_type_per_image: 1,
            binary_balance_tolerance: 0.1,
            dominant_hue_share: 0.4,
            image_budget: None,
            corruption: CorruptionGrids::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid generation config: {0}")]
pub struct ConfigError(pub String);

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let margins = [
            ("min_depth_margin", self.min_depth_margin),
            ("min_brightness_margin", self.min_brightness_margin),
            ("min_position_margin", self.min_position_margin),
            ("min_point_distance", self.min_point_distance),
            ("binary_balance_tolerance", self.binary_balance_tolerance),
            ("dominant_hue_share", self.dominant_hue_share),
        ];
        for (name, v) in margins {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.min_size_ratio > 1.0) {
            return Err(ConfigError(format!("min_size_ratio must exceed 1, got {}", self.min_size_ratio)));
        }
        if self.max_tasks_per_type_per_image == 0 {
            return Err(ConfigError("max_tasks_per_type_per_image must be at least 1".into()));
        }
        let g = &self.corruption;
        if g.blur_sigma.len() < 3 || g.noise_std.len() < 3 || g.hue_degrees.len() < 3 || g.brightness_factors.len() < 3 {
            return Err(ConfigError("each corruption grid needs at least 3 magnitudes".into()));
        }
        if g.blur_sigma.iter().chain(&g.noise_std).any(|v| *v <= 0.0)
            || g.hue_degrees.iter().any(|d| d.rem_euclid(360.0) == 0.0)
            || g.brightness_factors.iter().any(|f| *f <= 0.0 || *f == 1.0)
        {
            return Err(ConfigError("corruption grids may not contain no-op magnitudes".into()));
        }
        Ok(())
    }
}

/// Static description of one task type.
#[derive(Debug, Clone, Serialize)]
pub struct TaskCatalogEntry {
    pub task_type: TaskType,
    pub name: &'static str,
    pub required_attributes: &'static [&'static str],
    pub eligibility: &'static str,
    pub answer_rule: &'static str,
    pub template_id: &'static str,
    /// Which metadata source the key depends on.
    pub key_source: MetadataSource,
}

pub fn catalog() -> Vec<TaskCatalogEntry> {
    use MetadataSource::*;
    use TaskType::*;
    let e = |task_type: TaskType,
             required_attributes: &'static [&'static str],
             eligibility: &'static str,
             answer_rule: &'static str,
             key_source: MetadataSource| TaskCatalogEntry {
        task_type,
        name: task_type.name(),
        required_attributes,
        eligibility,
        answer_rule,
        template_id: task_type.id(),
        key_source,
    };
    vec![
        e(T1_1, &["class_name"], "a present class, or an absent class from the dataset vocabulary", "yes iff the class is annotated in the image", Heuristic),
        e(T1_2, &["class_name"], "at least one object", "number of instances of the queried class", Heuristic),
        e(T1_3, &["class_name"], "at least one object", "yes iff the marked object's class has another instance", Heuristic),
        e(T2_1, &["occluded"], "resolved occlusion consensus", "A fully visible / B partially occluded", Human),
        e(T2_2, &["truncated"], "resolved truncation consensus", "yes iff consensus says truncated", Human),
        e(T2_3, &["bbox_coordinates"], "object interior visible and three disjoint same-size regions available", "variant whose marked object region is blurred", Heuristic),
        e(T2_4, &["bbox_coordinates"], "object interior visible and three disjoint same-size regions available", "variant whose marked object region is noised", Heuristic),
        e(T2_5, &[], "every blur variant lowers Laplacian variance", "the unblurred original", Heuristic),
        e(T2_6, &[], "every noise variant differs from the original", "the uncorrupted original", Heuristic),
        e(T3_1, &["segmentation_area"], "area ratio at least min_size_ratio", "color of the larger object", Heuristic),
        e(T3_2, &["bbox_coordinates"], "center x separation at least min_position_margin x width", "color of the object with smaller center x", Heuristic),
        e(T3_3, &["bbox_coordinates"], "center y separation at least min_position_margin x height", "color of the object with larger center y", Heuristic),
        e(T3_4, &["bbox_coordinates"], "every other center is at least the margin left or right of the subject", "yes iff another center lies left by the margin", Heuristic),
        e(T3_5, &["bbox_coordinates"], "every other center is at least the margin above or below the subject", "yes iff another center lies lower by the margin", Heuristic),
        e(T4_1, &["segmask_touches_segmask_with"], "a touching or non-touching pair", "yes iff the masks are adjacent", Heuristic),
        e(T4_2, &["direction"], "resolved direction consensus", "A toward camera / B away / C left / D right", Human),
        e(T5_1, &["class_name"], "dominant hue bin holds at least the configured share of mask pixels", "tile of the dominant hue bin", Heuristic),
        e(T5_2, &["brightness_score"], "pairwise mean-luminance gaps at least min_brightness_margin", "variant ranked second by mean luminance", Heuristic),
        e(T5_3, &[], "every hue-shifted variant visibly differs from the original", "the unshifted original", Heuristic),
        e(T5_4, &["brightness_score"], "two points with 9x9 mean luminance gap and distance above the margins", "yes iff the red point is brighter", Heuristic),
        e(T6_1, &["average_depth"], "average depth gap at least min_depth_margin", "color of the object with larger relative depth", Model),
        e(T6_2, &["average_depth"], "two points with depth gap and distance above the margins", "yes iff the red point is closer", Model),
        e(T7_1, &[], "room for three disjoint distractor tiles", "the tile cut from the gray area", Heuristic),
        e(T7_2, &[], "room for three disjoint distractor tiles", "the tile cut from the gray area", Heuristic),
        e(T8_1, &[], "no rotated variant equals the original", "the unrotated original", Heuristic),
    ]
}

/// Orders images by distinct class count, then object count (both
/// descending), then image id, and keeps the first `budget`.
pub fn select_images(dataset: &[AnnotatedImage], budget: usize) -> Vec<&AnnotatedImage> {
    let mut images: Vec<&AnnotatedImage> = dataset.iter().collect();
    images.sort_by(|a, b| {
        b.distinct_classes()
            .cmp(&a.distinct_classes())
            .then(b.objects.len().cmp(&a.objects.len()))
            .then(a.image_id.cmp(&b.image_id))
    });
    images.truncate(budget.max(1));
    images
}

/// Derives a stable 64-bit seed from a base seed and string parts.
pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BBox, Mask, ObjectInstance};

    fn img(id: &str, classes: &[&str]) -> AnnotatedImage {
        let objects = classes
            .iter()
            .enumerate()
            .map(|(i, c)| {
                ObjectInstance::from_mask(format!("o{i}"), *c, Mask::from_rect(20, 20, BBox::new(i as u32, 0, i as u32 + 1, 1)))
                    .unwrap()
            })
            .collect();
        AnnotatedImage {
            image_id: id.into(),
            width: 20,
            height: 20,
            pixels: image::RgbImage::new(20, 20),
            objects,
            domain_tag: "t".into(),
        }
    }

    #[test]
    fn image_priority_order() {
        let data = vec![
            img("a", &["x", "y", "z", "x", "x"]),
            img("b", &["x", "y", "z", "x", "x", "x", "x"]),
            img("c", &["x"; 9]),
        ];
        let picked: Vec<&str> = select_images(&data, 2).iter().map(|i| i.image_id.as_str()).collect();
        assert_eq!(picked, ["b", "a"]);
        let all: Vec<&str> = select_images(&data, 10).iter().map(|i| i.image_id.as_str()).collect();
        assert_eq!(all, ["b", "a", "c"]);
        let tied = vec![img("z", &["x"]), img("m", &["y"])];
        let order: Vec<&str> = select_images(&tied, 5).iter().map(|i| i.image_id.as_str()).collect();
        assert_eq!(order, ["m", "z"]);
    }

    #[test]
    fn catalog_is_complete() {
        let cat = catalog();
        assert_eq!(cat.len(), 25);
        for (entry, t) in cat.iter().zip(TaskType::ALL) {
            assert_eq!(entry.task_type, t);
            for a in entry.required_attributes {
                assert!(a.parse::<crate::model::Attribute>().is_ok(), "{a}");
            }
        }
    }

    #[test]
    fn default_config_validates() {
        assert!(GenerationConfig::default().validate().is_ok());
        let bad = GenerationConfig { min_depth_margin: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
