use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generators::{generate_image_drafts, Draft, GenError, ImageContext};
use super::{derive_seed, select_images, ConfigError, GenerationConfig};
use crate::imageops::{replay, RenderedAsset};
use crate::ingest::DepthMap;
use crate::model::{AnnotatedImage, Answer, AnswerType, MetadataRecord, TaskInstance, TaskType};
use crate::templates::TemplateSet;

pub const BUNDLE_FORMAT: &str = "segbench-bundle-1";

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Generation(#[from] GenError),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad json in {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("image error for {path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{0}")]
    Format(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BundleError + '_ {
    move |source| BundleError::Io { path: path.to_owned(), source }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeCount {
    pub total: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub no: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format: String,
    pub template_version: String,
    pub seed: u64,
    pub dataset_hash: String,
    pub images_used: usize,
    pub config: GenerationConfig,
    pub counts: BTreeMap<TaskType, TypeCount>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TaskBundle {
    pub manifest: BundleManifest,
    pub tasks: Vec<TaskInstance>,
    /// Deduplicated by asset id, sorted.
    pub assets: Vec<RenderedAsset>,
}

/// Digest of image ids, pixels and annotations, independent of input order.
pub fn dataset_hash(dataset: &[AnnotatedImage]) -> String {
    let mut images: Vec<&AnnotatedImage> = dataset.iter().collect();
    images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut h = Sha256::new();
    for img in images {
        h.update(img.image_id.as_bytes());
        h.update([0]);
        h.update(img.width.to_le_bytes());
        h.update(img.height.to_le_bytes());
        h.update(img.pixels.as_raw());
        let mut objects: Vec<_> = img.objects.iter().collect();
        objects.sort_by(|a, b| a.object_id.cmp(&b.object_id));
        for o in objects {
            h.update(o.object_id.as_bytes());
            h.update([0]);
            h.update(o.class_name.as_bytes());
            h.update([0]);
            for (x, y) in o.mask.pixels() {
                h.update(x.to_le_bytes());
                h.update(y.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// Generates the task bundle. Candidate generation runs on `workers`
/// threads; selection is a sequential pass in image priority order, so the
/// output does not depend on the worker count.
pub fn build_bundle(
    dataset: &[AnnotatedImage],
    metadata: &[MetadataRecord],
    depth: &BTreeMap<String, DepthMap>,
    config: &GenerationConfig,
    templates: &TemplateSet,
    workers: usize,
) -> Result<TaskBundle, BundleError> {
    config.validate()?;
    let images = select_images(dataset, config.image_budget.unwrap_or(dataset.len()));
    let vocabulary: BTreeSet<String> =
        dataset.iter().flat_map(|i| i.objects.iter().map(|o| o.class_name.clone())).collect();
    let mut by_image: HashMap<&str, HashMap<&str, &MetadataRecord>> = HashMap::new();
    for m in metadata {
        by_image.entry(m.image_id.as_str()).or_default().insert(m.object_id.as_str(), m);
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| BundleError::Pool(e.to_string()))?;
    let per_image: Vec<BTreeMap<TaskType, Vec<Draft>>> = pool.install(|| {
        images
            .par_iter()
            .map(|img| {
                let ctx = ImageContext {
                    image: img,
                    metadata: by_image.get(img.image_id.as_str()).cloned().unwrap_or_default(),
                    depth: depth.get(&img.image_id),
                    vocabulary: &vocabulary,
                    config,
                    templates,
                };
                generate_image_drafts(&ctx)
            })
            .collect::<Result<_, _>>()
    })?;

    let mut ledger: BTreeMap<TaskType, (usize, usize)> = BTreeMap::new();
    let mut tasks = Vec::new();
    let mut assets: BTreeMap<String, RenderedAsset> = BTreeMap::new();
    for (img, mut drafts) in images.iter().zip(per_image) {
        for t in TaskType::ALL {
            let candidates = drafts.remove(&t).unwrap_or_default();
            let chosen = if t.answer_type() == AnswerType::Binary {
                pick_balanced(candidates, ledger.entry(t).or_default(), config, &img.image_id, t)
            } else {
                candidates.into_iter().take(config.max_tasks_per_type_per_image).collect()
            };
            for (n, mut d) in chosen.into_iter().enumerate() {
                d.task.task_id = format!("{}-{}-{}", img.image_id, t.id(), n);
                tasks.push(d.task);
                for a in d.assets {
                    assets.entry(a.asset_id.clone()).or_insert(a);
                }
            }
        }
    }

    let mut counts: BTreeMap<TaskType, TypeCount> = BTreeMap::new();
    for t in &tasks {
        let c = counts.entry(t.task_type).or_default();
        c.total += 1;
        if t.answer_type == AnswerType::Binary {
            *c.yes.get_or_insert(0) += (t.answer_key == Answer::Yes) as usize;
            *c.no.get_or_insert(0) += (t.answer_key == Answer::No) as usize;
        }
    }
    let mut warnings = Vec::new();
    for t in TaskType::ALL {
        match counts.get(&t) {
            None => warnings.push(format!("{t}: no eligible instances")),
            Some(TypeCount { total, yes: Some(yes), .. }) => {
                let share = *yes as f64 / *total as f64;
                if (share - 0.5).abs() > config.binary_balance_tolerance {
                    warnings.push(format!("{t}: yes share {share:.3} outside 0.5 +/- {}", config.binary_balance_tolerance));
                }
            }
            _ => {}
        }
    }
    for w in &warnings {
        tracing::warn!("{w}");
    }

    Ok(TaskBundle {
        manifest: BundleManifest {
            format: BUNDLE_FORMAT.into(),
            template_version: templates.version.clone(),
            seed: config.seed,
            dataset_hash: dataset_hash(dataset),
            images_used: images.len(),
            config: config.clone(),
            counts,
            warnings,
        },
        tasks,
        assets: assets.into_values().collect(),
    })
}

/// Picks up to the per-image cap, each slot preferring the polarity that is
/// currently behind in the running ledger.
fn pick_balanced(
    candidates: Vec<Draft>,
    ledger: &mut (usize, usize),
    config: &GenerationConfig,
    image_id: &str,
    t: TaskType,
) -> Vec<Draft> {
    let (mut yes, mut no): (Vec<Draft>, Vec<Draft>) = candidates.into_iter().partition(|d| d.task.answer_key == Answer::Yes);
    yes.reverse();
    no.reverse();
    let mut chosen = Vec::new();
    for slot in 0..config.max_tasks_per_type_per_image {
        let prefer_yes = match ledger.0.cmp(&ledger.1) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => derive_seed(config.seed, &[image_id, t.id(), "coin", &slot.to_string()]) & 1 == 0,
        };
        let pick = if prefer_yes { yes.pop().or_else(|| no.pop()) } else { no.pop().or_else(|| yes.pop()) };
        let Some(d) = pick else { break };
        if d.task.answer_key == Answer::Yes {
            ledger.0 += 1;
        } else {
            ledger.1 += 1;
        }
        chosen.push(d);
    }
    chosen
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), BundleError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|source| BundleError::Json { path: path.to_owned(), source })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, BundleError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|source| BundleError::Json { path: path.to_owned(), source }))
        .collect()
}

impl TaskBundle {
    /// Writes tasks.jsonl, assets.jsonl, assets/<id>.png and manifest.json.
    pub fn write(&self, dir: &Path) -> Result<(), BundleError> {
        let asset_dir = dir.join("assets");
        fs::create_dir_all(&asset_dir).map_err(io_err(&asset_dir))?;
        write_jsonl(&dir.join("tasks.jsonl"), &self.tasks)?;
        write_jsonl(&dir.join("assets.jsonl"), &self.assets)?;
        self.assets.par_iter().try_for_each(|a| {
            let path = asset_dir.join(format!("{}.png", a.asset_id));
            a.pixels.save(&path).map_err(|source| BundleError::Image { path, source })
        })?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|source| BundleError::Json { path: path.clone(), source })?;
        fs::write(&path, text + "\n").map_err(io_err(&path))
    }
}

/// A bundle read back from disk. Asset pixels are not loaded.
#[derive(Debug, Clone)]
pub struct LoadedBundle {
    pub dir: PathBuf,
    pub manifest: BundleManifest,
    pub tasks: Vec<TaskInstance>,
    pub assets: BTreeMap<String, RenderedAsset>,
}

pub fn read_bundle(dir: &Path) -> Result<LoadedBundle, BundleError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: BundleManifest =
        serde_json::from_str(&text).map_err(|source| BundleError::Json { path: path.clone(), source })?;
    if manifest.format != BUNDLE_FORMAT {
        return Err(BundleError::Format(format!("unsupported bundle format {}", manifest.format)));
    }
    let tasks: Vec<TaskInstance> = read_jsonl(&dir.join("tasks.jsonl"))?;
    let assets: Vec<RenderedAsset> = read_jsonl(&dir.join("assets.jsonl"))?;
    let assets: BTreeMap<String, RenderedAsset> = assets.into_iter().map(|a| (a.asset_id.clone(), a)).collect();
    for t in &tasks {
        if let Some(missing) = t.image_refs.iter().find(|r| !assets.contains_key(*r)) {
            return Err(BundleError::Format(format!("task {} references unknown asset {missing}", t.task_id)));
        }
    }
    Ok(LoadedBundle { dir: dir.to_owned(), manifest, tasks, assets })
}

impl LoadedBundle {
    pub fn asset_path(&self, asset_id: &str) -> PathBuf {
        self.dir.join("assets").join(format!("{asset_id}.png"))
    }

    pub fn asset_png(&self, asset_id: &str) -> Result<Vec<u8>, BundleError> {
        let path = self.asset_path(asset_id);
        fs::read(&path).map_err(io_err(&path))
    }

    /// Replays every asset's chain from the source images and compares it
    /// with the stored PNG. Returns the ids that differ.
    pub fn verify_replay(&self, dataset: &[AnnotatedImage]) -> Result<Vec<String>, BundleError> {
        let images: HashMap<&str, &AnnotatedImage> = dataset.iter().map(|i| (i.image_id.as_str(), i)).collect();
        let results: Vec<Option<String>> = self
            .assets
            .par_iter()
            .map(|(id, a)| {
                let Some(img) = images.get(a.parent_image_id.as_str()) else { return Ok(Some(id.clone())) };
                let replayed = replay(&img.pixels, &a.transform_chain).map_err(GenError::from)?;
                let path = self.asset_path(id);
                let stored = image::open(&path).map_err(|source| BundleError::Image { path, source })?.to_rgb8();
                Ok((stored != replayed).then(|| id.clone()))
            })
            .collect::<Result<_, BundleError>>()?;
        Ok(results.into_iter().flatten().collect())
    }
}
