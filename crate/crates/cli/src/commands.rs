use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use serde_json::json;
use sha2::{Digest, Sha256};
use tracing::{info, warn};

use segbench_core::enrich::{enrich_dataset, metadata_from_jsonl, metadata_to_jsonl};
use segbench_core::ingest::{
    export_annotation_job, import_human_annotations, load_depth_maps, parse_coco, write_ratings_csv, DepthMap, ItemError,
};
use segbench_core::metrics::{build_report, write_report, Group, ReportInputs, ScoreMatrix, ScoringMode};
use segbench_core::model::{validate_dataset, AnnotatedImage, EvalRecord, HumanAttribute, HumanRating, MetadataRecord};
use segbench_core::synth::{simulate_task_ratings, synth_dataset, write_fixture};
use segbench_core::taskgen::{build_bundle, derive_seed, read_bundle, LoadedBundle};
use segbench_core::templates::TemplateSet;
use segbench_harness::mock::{spawn_mock, MockConfig, MockIndex, MockProfile};
use segbench_harness::{ingest_human_answers, read_journal, run_benchmark, EndpointConfig, RunOptions, Transport};

use crate::config::{Config, DatasetConfig, SimulatedHumans, MOCK_URL};
use crate::manifest::{write_manifest, RunManifest, MANIFEST_FILE};

/// Marks errors that map to the usage exit code.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

pub struct Context {
    pub cfg: Config,
    pub seed_override: Option<u64>,
    pub out: PathBuf,
    pub workers: usize,
    pub templates: TemplateSet,
}

impl Context {
    pub fn new(config: Option<&Path>, seed: Option<u64>, out: PathBuf, workers: Option<usize>) -> anyhow::Result<Self> {
        let mut cfg = match config {
            Some(p) => Config::load(p).map_err(|e| usage(format!("{e:#}")))?,
            None => Config::default(),
        };
        cfg.apply_seed(seed);
        cfg.generation.validate().map_err(|e| usage(e.to_string()))?;
        let templates = cfg.templates().map_err(|e| usage(format!("{e:#}")))?;
        let workers = match workers {
            Some(0) => return Err(usage("--workers must be at least 1")),
            Some(n) => n,
            None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        };
        Ok(Self { cfg, seed_override: seed, out, workers, templates })
    }

    fn path(&self, sub: &str) -> PathBuf {
        self.out.join(sub)
    }

    fn manifest(&self, command: &str, extra: serde_json::Value) -> RunManifest {
        RunManifest {
            command: command.to_owned(),
            code_version: env!("CARGO_PKG_VERSION").to_owned(),
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed(),
            template_version: self.templates.version.clone(),
            extra,
            artifacts: Vec::new(),
        }
    }
}

/// Empties a previous output directory of ours, refusing anything else.
fn fresh_dir(dir: &Path) -> anyhow::Result<()> {
    if dir.exists() {
        let empty = fs::read_dir(dir)?.next().is_none();
        if !empty && !dir.join(MANIFEST_FILE).exists() {
            bail!("{} exists and was not written by segbench; refusing to overwrite", dir.display());
        }
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Default)]
struct Loaded {
    images: Vec<AnnotatedImage>,
    depth: BTreeMap<String, DepthMap>,
    ratings: Vec<HumanRating>,
    item_errors: Vec<ItemError>,
    warnings: Vec<String>,
}

fn load_one(d: &DatasetConfig, out: &mut Loaded) -> anyhow::Result<()> {
    let bytes = fs::read(&d.annotations).with_context(|| format!("reading {}", d.annotations.display()))?;
    let parsed = parse_coco(&bytes, &d.image_root, &d.name).with_context(|| format!("parsing {}", d.annotations.display()))?;
    let tag = |e: ItemError| ItemError { item: format!("{}: {}", d.name, e.item), message: e.message };
    out.item_errors.extend(parsed.item_errors.into_iter().map(tag));
    out.warnings.extend(parsed.warnings.into_iter().map(|w| format!("{}: {w}", d.name)));

    if let Some(manifest) = &d.depth_manifest {
        let dir = d.depth_dir.clone().or_else(|| manifest.parent().map(Path::to_path_buf)).unwrap_or_default();
        let dims: HashMap<String, (u32, u32)> = parsed.images.iter().map(|i| (i.image_id.clone(), (i.width, i.height))).collect();
        let maps = load_depth_maps(&dir, manifest, &dims).with_context(|| format!("loading depth for {}", d.name))?;
        out.depth.extend(maps);
    }
    if let Some(path) = &d.ratings {
        let file = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
        let import = import_human_annotations(file).with_context(|| format!("parsing {}", path.display()))?;
        out.item_errors.extend(import.errors.into_iter().map(tag));
        out.ratings.extend(import.ratings);
    }
    out.images.extend(parsed.images);
    Ok(())
}

fn load_datasets(ctx: &Context) -> anyhow::Result<Loaded> {
    if ctx.cfg.datasets.is_empty() {
        return Err(usage("no [[datasets]] configured"));
    }
    let mut out = Loaded::default();
    for d in &ctx.cfg.datasets {
        load_one(d, &mut out)?;
    }
    for w in &out.warnings {
        warn!("{w}");
    }
    info!(images = out.images.len(), depth_maps = out.depth.len(), ratings = out.ratings.len(), "datasets loaded");
    Ok(out)
}

pub fn validate(ctx: &Context) -> anyhow::Result<()> {
    let loaded = load_datasets(ctx)?;
    let report = validate_dataset(&loaded.images);
    let dir = ctx.path("validation");
    fresh_dir(&dir)?;
    write_json(
        &dir.join("report.json"),
        &json!({
            "images_checked": report.images_checked,
            "objects_checked": report.objects_checked,
            "violations": report.violations,
            "item_errors": loaded.item_errors,
            "warnings": loaded.warnings,
        }),
    )?;
    write_manifest(&dir, ctx.manifest("validate", serde_json::Value::Null))?;
    let problems = report.violations.len() + loaded.item_errors.len();
    if problems > 0 {
        for v in &report.violations {
            warn!("{}/{}: {}", v.image_id, v.object_id.as_deref().unwrap_or("-"), v.message);
        }
        for e in &loaded.item_errors {
            warn!("{}: {}", e.item, e.message);
        }
        bail!("validation failed: {} violations, {} item errors", report.violations.len(), loaded.item_errors.len());
    }
    println!("{} images, {} objects: clean", report.images_checked, report.objects_checked);
    Ok(())
}

fn compute_metadata(ctx: &Context, loaded: &Loaded) -> (Vec<MetadataRecord>, Vec<ItemError>) {
    let out = enrich_dataset(&loaded.images, &loaded.depth, &loaded.ratings, ctx.cfg.enrich.consensus_threshold);
    (out.records, out.errors)
}

pub fn enrich(ctx: &Context) -> anyhow::Result<()> {
    let loaded = load_datasets(ctx)?;
    let (records, errors) = compute_metadata(ctx, &loaded);
    let dir = ctx.path("metadata");
    fresh_dir(&dir)?;
    fs::write(dir.join("metadata.jsonl"), metadata_to_jsonl(&records))?;
    let all_errors: Vec<&ItemError> = loaded.item_errors.iter().chain(&errors).collect();
    write_json(&dir.join("errors.json"), &all_errors)?;
    write_manifest(&dir, ctx.manifest("enrich", serde_json::Value::Null))?;
    for e in &errors {
        warn!("{}: {}", e.item, e.message);
    }
    println!("{} metadata records, {} item errors", records.len(), all_errors.len());
    Ok(())
}

pub fn jobs_export(ctx: &Context, job_id: &str, attributes: &[String]) -> anyhow::Result<()> {
    let attrs = attributes
        .iter()
        .map(|a| a.trim().parse::<HumanAttribute>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(usage)?;
    let loaded = load_datasets(ctx)?;
    let threshold = ctx.cfg.enrich.consensus_threshold as u32;
    let (job, csv) = export_annotation_job(&loaded.images, &attrs, job_id, ctx.cfg.enrich.max_raters as u32, threshold)?;
    let dir = ctx.path("jobs").join(job_id);
    fresh_dir(&dir)?;
    fs::write(dir.join("job.csv"), csv)?;
    write_json(&dir.join("job.json"), &job)?;
    write_manifest(&dir, ctx.manifest("jobs export", json!({"job_id": job_id})))?;
    println!("{} items written to {}", job.items.len(), dir.display());
    Ok(())
}

pub fn jobs_import(ctx: &Context, file: &Path) -> anyhow::Result<()> {
    let reader = fs::File::open(file).map_err(|e| usage(format!("{}: {e}", file.display())))?;
    let import = import_human_annotations(reader)?;
    let dir = ctx.path("jobs").join("imported");
    fresh_dir(&dir)?;
    fs::write(dir.join("ratings.csv"), write_ratings_csv(&import.ratings, "imported")?)?;
    write_json(&dir.join("errors.json"), &import.errors)?;
    write_manifest(&dir, ctx.manifest("jobs import", json!({"source": file.display().to_string()})))?;
    println!("{} ratings accepted, {} rejected items", import.ratings.len(), import.errors.len());
    if !import.errors.is_empty() {
        for e in &import.errors {
            warn!("{}: {}", e.item, e.message);
        }
        bail!("{} rating items failed validation", import.errors.len());
    }
    Ok(())
}

/// Digest over every file in a directory tree except the run manifest.
pub fn tree_hash(dir: &Path) -> anyhow::Result<String> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    files.retain(|f| f.file_name().is_some_and(|n| n != MANIFEST_FILE));
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(dir)?.to_string_lossy().replace('\\', "/");
        let bytes = fs::read(&f)?;
        h.update((rel.len() as u64).to_le_bytes());
        h.update(rel.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn generate(ctx: &Context) -> anyhow::Result<()> {
    let loaded = load_datasets(ctx)?;
    let metadata_path = ctx.path("metadata").join("metadata.jsonl");
    let metadata = if metadata_path.exists() {
        info!("using {}", metadata_path.display());
        metadata_from_jsonl(&fs::read_to_string(&metadata_path)?).with_context(|| format!("parsing {}", metadata_path.display()))?
    } else {
        info!("no metadata on disk; enriching in memory");
        compute_metadata(ctx, &loaded).0
    };
    let bundle = build_bundle(&loaded.images, &metadata, &loaded.depth, &ctx.cfg.generation, &ctx.templates, ctx.workers)?;
    let dir = ctx.path("bundle");
    fresh_dir(&dir)?;
    bundle.write(&dir)?;
    let hash = tree_hash(&dir)?;
    write_manifest(&dir, ctx.manifest("generate", json!({"bundle_hash": hash})))?;
    println!("{} tasks, {} assets; bundle hash {hash}", bundle.tasks.len(), bundle.assets.len());
    Ok(())
}

fn load_bundle(ctx: &Context) -> anyhow::Result<LoadedBundle> {
    let dir = ctx.path("bundle");
    if !dir.join("manifest.json").exists() {
        bail!("no task bundle under {}; run generate first", dir.display());
    }
    Ok(read_bundle(&dir)?)
}

fn human_ratings(ctx: &Context, bundle: &LoadedBundle) -> anyhow::Result<Vec<HumanRating>> {
    let ev = &ctx.cfg.evaluation;
    if let Some(path) = &ev.human_ratings {
        let import = import_human_annotations(fs::File::open(path).with_context(|| format!("reading {}", path.display()))?)?;
        for e in &import.errors {
            warn!("{}: {}", e.item, e.message);
        }
        return Ok(import.ratings);
    }
    Ok(match &ev.simulated_humans {
        Some(SimulatedHumans { raters, accuracy, spread }) => {
            let seed = derive_seed(ctx.cfg.seed(), &["simulated-humans"]);
            simulate_task_ratings(&bundle.tasks, *raters, *accuracy, *spread, seed)
        }
        None => Vec::new(),
    })
}

pub fn evaluate(ctx: &Context) -> anyhow::Result<()> {
    let bundle = load_bundle(ctx)?;
    let ev = &ctx.cfg.evaluation;
    if ev.endpoints.is_empty() && ev.human_ratings.is_none() && ev.simulated_humans.is_none() {
        return Err(usage("no [[evaluation.endpoints]] or human ratings configured"));
    }
    let dir = ctx.path("eval");
    fs::create_dir_all(&dir)?;
    let journal = dir.join("records.jsonl");

    let mut endpoints: Vec<EndpointConfig> = ev.endpoints.clone();
    let runtime = tokio::runtime::Runtime::new()?;
    let summary = runtime.block_on(async {
        let _mock = if endpoints.iter().any(|e| e.base_url == MOCK_URL) {
            let index = MockIndex::from_bundle(&bundle, &ctx.templates)?;
            let server = spawn_mock(SocketAddr::from(([127, 0, 0, 1], 0)), ctx.cfg.mock.clone(), index).await?;
            for e in endpoints.iter_mut().filter(|e| e.base_url == MOCK_URL) {
                e.base_url = match e.transport {
                    Transport::Openai => server.base_url(),
                    Transport::Custom => server.custom_url(),
                };
            }
            info!(addr = %server.addr, "mock endpoint running");
            Some(server)
        } else {
            None
        };
        let options = RunOptions { max_new_records: ev.max_new_records };
        anyhow::Ok(run_benchmark(&bundle, &endpoints, &ctx.templates, &journal, &options).await?)
    })?;

    let ratings = human_ratings(ctx, &bundle)?;
    let mut humans = json!(null);
    if !ratings.is_empty() {
        let ingest =
            ingest_human_answers(&bundle.tasks, &ratings, ctx.cfg.enrich.consensus_threshold, ctx.cfg.enrich.max_raters);
        fs::write(dir.join("human_ratings.csv"), write_ratings_csv(&ratings, "humans")?)?;
        let mut lines = String::new();
        for r in &ingest.records {
            lines.push_str(&serde_json::to_string(r)?);
            lines.push('\n');
        }
        fs::write(dir.join("humans.jsonl"), lines)?;
        for w in &ingest.warnings {
            warn!("{w}");
        }
        humans = json!({"records": ingest.records.len(), "missing": ingest.missing.len(), "warnings": ingest.warnings});
    }
    write_json(&dir.join("summary.json"), &json!({"run": summary, "humans": humans}))?;
    write_manifest(&dir, ctx.manifest("evaluate", json!({"endpoints": ev.endpoints})))?;
    println!("{} earlier records kept, {} new", summary.previously_done, summary.new_records);
    for (model, counts) in &summary.status_counts {
        println!("  {model}: {}", serde_json::to_string(counts)?);
    }
    Ok(())
}

fn load_records(ctx: &Context) -> anyhow::Result<Vec<EvalRecord>> {
    let dir = ctx.path("eval");
    let mut records = Vec::new();
    let journal = dir.join("records.jsonl");
    if journal.exists() {
        records.extend(read_journal(&journal)?);
    }
    let humans = dir.join("humans.jsonl");
    if humans.exists() {
        for line in fs::read_to_string(&humans)?.lines().filter(|l| !l.trim().is_empty()) {
            records.push(serde_json::from_str(line).with_context(|| format!("parsing {}", humans.display()))?);
        }
    }
    if records.is_empty() {
        bail!("no evaluation records under {}; run evaluate first", dir.display());
    }
    Ok(records)
}

fn stored_human_ratings(ctx: &Context) -> anyhow::Result<Vec<HumanRating>> {
    let path = ctx.path("eval").join("human_ratings.csv");
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(import_human_annotations(fs::File::open(&path)?)?.ratings)
}

fn open_models(ctx: &Context) -> BTreeSet<String> {
    ctx.cfg.evaluation.endpoints.iter().filter(|e| e.open_weights).map(|e| e.model_id.clone()).collect()
}

pub fn score(ctx: &Context) -> anyhow::Result<()> {
    let bundle = load_bundle(ctx)?;
    let records = load_records(ctx)?;
    let matrix = ScoreMatrix::from_records(&bundle.tasks, &records);
    let ratings = stored_human_ratings(ctx)?;
    let open = open_models(ctx);
    let grid = &ctx.cfg.scoring.thresholds;
    let mode = ctx.cfg.scoring.mode;
    let report = build_report(&ReportInputs { matrix: &matrix, ratings: &ratings, open_models: &open, grid, mode });

    let dir = ctx.path("scores");
    fresh_dir(&dir)?;
    write_json(
        &dir.join("scores.json"),
        &json!({
            "scoring_mode": mode,
            "thresholds": grid,
            "models": report.models,
            "accuracy_by_dataset": report.accuracy_by_dataset,
            "accuracy_by_task": report.accuracy_by_task,
            "curves": report.curves,
        }),
    )?;
    write_manifest(&dir, ctx.manifest("score", serde_json::Value::Null))?;
    println!("{:<24} {:>9} {:>9}", "model", "accuracy", "auc");
    for (i, model) in matrix.models.iter().enumerate() {
        let acc = matrix.accuracy(i, &Group::All, mode);
        let auc = matrix.auc(i, &Group::All, mode, grid);
        let fmt = |v: Option<f64>| v.map_or("-".to_owned(), |v| format!("{v:.4}"));
        println!("{model:<24} {:>9} {:>9}", fmt(acc), fmt(auc));
    }
    if mode == ScoringMode::Exclude {
        info!("non-answered cells excluded from accuracy");
    }
    Ok(())
}

pub fn report(ctx: &Context) -> anyhow::Result<()> {
    let bundle = load_bundle(ctx)?;
    let records = load_records(ctx)?;
    let matrix = ScoreMatrix::from_records(&bundle.tasks, &records);
    let ratings = stored_human_ratings(ctx)?;
    let open = open_models(ctx);
    let report = build_report(&ReportInputs {
        matrix: &matrix,
        ratings: &ratings,
        open_models: &open,
        grid: &ctx.cfg.scoring.thresholds,
        mode: ctx.cfg.scoring.mode,
    });
    for w in &report.warnings {
        warn!("{w}");
    }
    let dir = ctx.path("report");
    fresh_dir(&dir)?;
    let written = write_report(&report, &dir)?;
    write_manifest(&dir, ctx.manifest("report", serde_json::Value::Null))?;
    println!("{} report files in {}", written.len(), dir.display());
    Ok(())
}

fn mock_endpoint(model_id: &str, transport: Transport, open_weights: bool) -> EndpointConfig {
    EndpointConfig {
        transport,
        open_weights,
        max_concurrency: 8,
        timeout_ms: 10_000,
        backoff_base_ms: 20,
        backoff_max_ms: 200,
        ..EndpointConfig::new(model_id, MOCK_URL)
    }
}

/// Config for a freshly written synthetic fixture: one dataset, four mock
/// models of varying skill and a simulated human panel.
fn synth_config(ctx: &Context, synth: segbench_core::synth::SynthConfig) -> Config {
    let profile = |accuracy, safety_rate, unparseable_rate| MockProfile { accuracy, safety_rate, unparseable_rate, ..Default::default() };
    let mut profiles = BTreeMap::new();
    profiles.insert("mock-strong".to_owned(), profile(0.9, 0.0, 0.0));
    profiles.insert("mock-mid".to_owned(), profile(0.7, 0.02, 0.02));
    profiles.insert("mock-weak".to_owned(), profile(0.45, 0.05, 0.05));
    profiles.insert("mock-custom".to_owned(), profile(0.6, 0.03, 0.0));
    let mut cfg = Config {
        seed: Some(ctx.cfg.seed()),
        datasets: vec![DatasetConfig {
            name: "synthetic".to_owned(),
            annotations: "annotations.json".into(),
            image_root: "images".into(),
            depth_dir: Some("depth".into()),
            depth_manifest: Some("depth/manifest.tsv".into()),
            ratings: Some("ratings.csv".into()),
        }],
        synth,
        mock: MockConfig { seed: ctx.cfg.seed(), default_profile: MockProfile::default(), profiles },
        ..Config::default()
    };
    cfg.generation = ctx.cfg.generation.clone();
    cfg.evaluation.endpoints = vec![
        mock_endpoint("mock-strong", Transport::Openai, false),
        mock_endpoint("mock-mid", Transport::Openai, true),
        mock_endpoint("mock-weak", Transport::Openai, true),
        mock_endpoint("mock-custom", Transport::Custom, false),
    ];
    cfg.evaluation.simulated_humans = Some(SimulatedHumans::default());
    cfg
}

pub fn synth(ctx: &Context, images: Option<usize>) -> anyhow::Result<()> {
    let mut sc = ctx.cfg.synth.clone();
    if let Some(n) = images {
        sc.images = n;
    }
    if let Some(seed) = ctx.seed_override {
        sc.seed = seed;
    }
    let ds = synth_dataset(&sc);
    let dir = ctx.path("fixture");
    fresh_dir(&dir)?;
    let paths = write_fixture(&ds, &dir)?;
    let cfg = synth_config(ctx, sc);
    let config_path = dir.join("segbench.toml");
    fs::write(&config_path, toml::to_string(&cfg)?)?;
    write_manifest(&dir, ctx.manifest("synth", json!({"images": ds.images.len()})))?;
    println!("{} synthetic images in {}; config {}", ds.images.len(), paths.image_root.display(), config_path.display());
    Ok(())
}

pub fn mock_serve(ctx: &Context, addr: SocketAddr) -> anyhow::Result<()> {
    let bundle = load_bundle(ctx)?;
    let index = MockIndex::from_bundle(&bundle, &ctx.templates)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let server = spawn_mock(addr, ctx.cfg.mock.clone(), index).await?;
        println!("openai-style: {}", server.base_url());
        println!("custom:       {}", server.custom_url());
        tokio::signal::ctrl_c().await?;
        let stats = &server.stats;
        info!(requests = stats.requests.load(std::sync::atomic::Ordering::SeqCst), "mock stopped");
        anyhow::Ok(())
    })
}
