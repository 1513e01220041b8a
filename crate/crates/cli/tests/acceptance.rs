//! Acceptance suite. Runs every criterion in order and prints one PASS/FAIL
//! line per criterion; exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use image::RgbImage;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segbench_core::enrich::consensus;
use segbench_core::imageops::{corruption_transform, laplacian_variance, mean_abs_delta, CorruptionKind, RenderedAsset, Transform};
use segbench_core::ingest::import_human_annotations;
use segbench_core::metrics::{
    average_linkage, build_report, pearson, CellStatus, Group, MetricReport, ReportInputs, ScoreMatrix, ScoringMode,
    TaskInfo, ThresholdGrid, DEFAULT_THRESHOLDS, HUMANS_MODEL_ID,
};
use segbench_core::model::{
    AnnotatedImage, Answer, AnswerType, BBox, EvalRecord, EvalStatus, HumanRating, MarkTarget, MarkerColor, Mask,
    RatingItem, TaskInstance, TaskType,
};
use segbench_core::synth::{synth_dataset, SynthConfig, SynthDataset};
use segbench_core::taskgen::{read_bundle, LoadedBundle};
use segbench_core::templates::TemplateSet;
use segbench_harness::mock::{spawn_mock, MockConfig, MockIndex, MockProfile};
use segbench_harness::{ingest_human_answers, parse_answer, read_journal, run_benchmark, EndpointConfig, RunOptions};

const FIXTURE_IMAGES: usize = 24;

type Outcome = Result<String, String>;

struct Tally {
    failed: usize,
}

impl Tally {
    fn run(&mut self, n: u32, name: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} [{name}]: PASS ({secs:.2}s) {detail}"),
            Err(detail) => {
                self.failed += 1;
                println!("criterion {n} [{name}]: FAIL ({secs:.2}s) {detail}");
            }
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- pipeline

fn segbench(out: &Path, config: Option<&Path>, args: &[&str]) -> Result<(), String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_segbench"));
    cmd.arg("--out-dir").arg(out).arg("--log-level").arg("warn");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    let output = cmd.args(args).output().map_err(|e| e.to_string())?;
    if output.status.success() {
        Ok(())
    } else {
        Err(format!("segbench {args:?} exited {:?}: {}", output.status.code(), String::from_utf8_lossy(&output.stderr)))
    }
}

/// Runs validate through report on a fresh synthetic fixture.
fn run_pipeline(out: &Path) -> Result<Duration, String> {
    let start = Instant::now();
    segbench(out, None, &["synth", "--images", &FIXTURE_IMAGES.to_string()])?;
    let config = out.join("fixture").join("segbench.toml");
    for step in ["validate", "enrich", "generate", "evaluate", "score", "report"] {
        segbench(out, Some(&config), &[step])?;
    }
    Ok(start.elapsed())
}

// ---------------------------------------------------------------- criterion 1 + 2

fn random_matrix(rng: &mut ChaCha8Rng) -> ScoreMatrix {
    let images = rng.random_range(1..=50);
    let models = rng.random_range(1..=10);
    let mut tasks = Vec::new();
    for i in 0..images {
        for q in 0..rng.random_range(1..=25) {
            tasks.push(TaskInfo {
                task_id: format!("{i}-{q}"),
                image_id: format!("img{i}"),
                dataset: if i % 3 == 0 { "a".into() } else { "b".into() },
                task_type: TaskType::ALL[q % TaskType::ALL.len()],
            });
        }
    }
    let correct: Vec<Vec<bool>> = (0..models)
        .map(|_| {
            let p = rng.random_range(0.0..=1.0);
            tasks.iter().map(|_| rng.random_bool(p)).collect()
        })
        .collect();
    let mut m = ScoreMatrix::from_correctness(tasks, (0..models).map(|k| format!("m{k}")).collect(), correct);
    let statuses = [CellStatus::Unparseable, CellStatus::UnansweredSafety, CellStatus::TransportError, CellStatus::Missing];
    for row in &mut m.cells {
        for cell in row.iter_mut() {
            if rng.random_bool(0.1) {
                cell.status = statuses[rng.random_range(0..4)];
            }
        }
    }
    m
}

/// Per-image (correct, scored) counts by direct iteration.
fn oracle_fractions(m: &ScoreMatrix, model: usize, mode: ScoringMode) -> Vec<f64> {
    let mut per_image: BTreeMap<&str, (u32, u32)> = BTreeMap::new();
    for (q, t) in m.tasks.iter().enumerate() {
        let cell = m.cells[model][q];
        let answered = cell.status == CellStatus::Answered;
        if mode == ScoringMode::Exclude && !answered {
            continue;
        }
        let e = per_image.entry(&t.image_id).or_default();
        e.1 += 1;
        if answered && cell.correct {
            e.0 += 1;
        }
    }
    per_image.values().map(|(c, n)| *c as f64 / *n as f64).collect()
}

fn oracle_acc(fractions: &[f64], t: f64) -> f64 {
    let mut hit = 0;
    for f in fractions {
        if *f >= t {
            hit += 1;
        }
    }
    100.0 * hit as f64 / fractions.len() as f64
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grid = ThresholdGrid::default();
    let (mut checks, mut worst_acc, mut worst_auc) = (0usize, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let m = random_matrix(&mut rng);
        for model in 0..m.models.len() {
            for mode in [ScoringMode::Default, ScoringMode::Exclude] {
                let fr = oracle_fractions(&m, model, mode);
                let curve = m.accuracy_curve(model, &Group::All, mode, &grid);
                if fr.is_empty() {
                    ensure(curve.is_none(), || "curve for a model with no scored image".into())?;
                    continue;
                }
                let curve = curve.ok_or("missing curve")?;
                let mut auc_oracle = 0.0;
                for (k, t) in DEFAULT_THRESHOLDS.iter().enumerate() {
                    let want = oracle_acc(&fr, *t);
                    let got = m.accuracy_percent_t(model, &Group::All, mode, *t).ok_or("missing accuracy")?;
                    worst_acc = worst_acc.max((got - want).abs()).max((curve[k] - want).abs());
                    auc_oracle += want / 100.0;
                    checks += 1;
                }
                auc_oracle /= DEFAULT_THRESHOLDS.len() as f64;
                let auc = m.auc(model, &Group::All, mode, &grid).ok_or("missing auc")?;
                worst_auc = worst_auc.max((auc - auc_oracle).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(worst_acc <= 1e-9, || format!("accuracy deviation {worst_acc:e} > 1e-9"))?;
    ensure(worst_auc <= 1e-12, || format!("AUC deviation {worst_auc:e} > 1e-12"))?;
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?} (limit 10s)"))?;
    Ok(format!("200 matrices, {checks} grid points, max |dAcc|={worst_acc:e} (tol 1e-9), max |dAUC|={worst_auc:e} (tol 1e-12), {elapsed:.2?} (limit 10s)"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grid = ThresholdGrid::default();
    let fine: Vec<f64> = (0..=200).map(|k| k as f64 / 200.0).collect();
    let mut curves = 0;
    for _ in 0..200 {
        let m = random_matrix(&mut rng);
        for model in 0..m.models.len() {
            for mode in [ScoringMode::Default, ScoringMode::Exclude] {
                let Some(at0) = m.accuracy_percent_t(model, &Group::All, mode, 0.0) else { continue };
                ensure(at0 == 100.0, || format!("Accuracy%(0) = {at0}"))?;
                let values: Vec<f64> = fine.iter().map(|t| m.accuracy_percent_t(model, &Group::All, mode, *t).unwrap()).collect();
                ensure(values.windows(2).all(|w| w[1] <= w[0]), || "Accuracy%(t) increased in t".into())?;
                curves += 1;
            }
        }
        let all_correct = ScoreMatrix::from_correctness(
            m.tasks.clone(),
            vec!["perfect".into()],
            vec![vec![true; m.tasks.len()]],
        );
        for mode in [ScoringMode::Default, ScoringMode::Exclude] {
            let auc = all_correct.auc(0, &Group::All, mode, &grid).unwrap();
            ensure(auc == 1.0, || format!("all-correct AUC = {auc:?}"))?;
        }
    }
    Ok(format!("{curves} curves: Acc%(0)=100 exactly, non-increasing on 201-point grid; all-correct AUC == 1.0 exactly"))
}

// ---------------------------------------------------------------- criterion 3

fn load_png(path: &Path) -> RgbImage {
    image::open(path).unwrap_or_else(|e| panic!("{}: {e}", path.display())).to_rgb8()
}

struct Oracle<'a> {
    ds: &'a SynthDataset,
    images: HashMap<&'a str, &'a AnnotatedImage>,
    bundle: &'a LoadedBundle,
    /// (image, object, attribute) -> rater answers in rank order.
    ratings: BTreeMap<(String, String, String), Vec<(u32, String)>>,
}

fn own_luma(p: [u8; 3]) -> f64 {
    (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0
}

fn own_hue_bin(p: [u8; 3]) -> Option<usize> {
    let [r, g, b] = p.map(|c| c as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max == 0.0 { 0.0 } else { d / max };
    if s < 0.25 || max < 0.2 {
        return None;
    }
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    Some(((h + 22.5) / 45.0).floor() as usize % 8)
}

fn own_laplacian_variance(img: &RgbImage) -> f64 {
    let (w, h) = img.dimensions();
    let l = |x: u32, y: u32| own_luma(img.get_pixel(x, y).0) * 255.0;
    let mut vals = Vec::new();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            vals.push(l(x - 1, y) + l(x + 1, y) + l(x, y - 1) + l(x, y + 1) - 4.0 * l(x, y));
        }
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64
}

/// Tight half-open bbox of a mask by full scan.
fn own_bbox(mask: &Mask) -> (u32, u32, u32, u32) {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0, y0, x1, y1)
}

fn own_center(mask: &Mask) -> (f64, f64) {
    let (x0, y0, x1, y1) = own_bbox(mask);
    ((x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0)
}

fn own_area(mask: &Mask) -> u64 {
    let mut n = 0;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            n += mask.get(x, y) as u64;
        }
    }
    n
}

/// 8-connected adjacency or overlap, by brute force over pixel pairs near each other.
fn own_touch(a: &Mask, b: &Mask) -> bool {
    let (w, h) = (a.width() as i64, a.height() as i64);
    for y in 0..h {
        for x in 0..w {
            if !a.get(x as u32, y as u32) {
                continue;
            }
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && nx < w && ny < h && b.get(nx as u32, ny as u32) {
                        return true;
                    }
                }
            }
        }
    }
    false
}

fn own_window_luma(img: &RgbImage, x: u32, y: u32, half: u32) -> f64 {
    let (w, h) = img.dimensions();
    let (mut s, mut n) = (0.0, 0.0);
    for yy in y.saturating_sub(half)..=(y + half).min(h - 1) {
        for xx in x.saturating_sub(half)..=(x + half).min(w - 1) {
            s += own_luma(img.get_pixel(xx, yy).0);
            n += 1.0;
        }
    }
    s / n
}

fn own_rotate_cw(img: &RgbImage) -> RgbImage {
    let (w, h) = img.dimensions();
    RgbImage::from_fn(h, w, |x, y| *img.get_pixel(y, h - 1 - x))
}

fn own_crop(img: &RgbImage, r: &BBox) -> RgbImage {
    RgbImage::from_fn(r.width(), r.height(), |x, y| *img.get_pixel(r.x_min + x, r.y_min + y))
}

fn own_consensus(answers: &[String]) -> Option<String> {
    let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
    for a in answers {
        let v = votes.entry(a).or_default();
        *v += 1;
        if *v == 4 {
            return Some(a.clone());
        }
    }
    votes.into_iter().find(|(_, c)| c * 2 > answers.len()).map(|(a, _)| a.to_owned())
}

impl<'a> Oracle<'a> {
    fn new(ds: &'a SynthDataset, bundle: &'a LoadedBundle) -> Self {
        let mut ratings: BTreeMap<(String, String, String), Vec<(u32, String)>> = BTreeMap::new();
        for r in &ds.ratings {
            if let RatingItem::Object { image_id, object_id, attribute } = &r.item {
                ratings
                    .entry((image_id.clone(), object_id.clone(), attribute.to_string()))
                    .or_default()
                    .push((r.rank_in_sequence, r.answer.clone()));
            }
        }
        for v in ratings.values_mut() {
            v.sort();
        }
        Self { ds, images: ds.images.iter().map(|i| (i.image_id.as_str(), i)).collect(), bundle, ratings }
    }

    fn human(&self, image: &str, object: &str, attribute: &str) -> Option<String> {
        let answers: Vec<String> =
            self.ratings.get(&(image.into(), object.into(), attribute.into()))?.iter().map(|(_, a)| a.clone()).collect();
        own_consensus(&answers)
    }

    fn option_pixels(&self, t: &TaskInstance) -> Vec<RgbImage> {
        t.options.iter().map(|o| load_png(&self.bundle.asset_path(o.asset_id.as_ref().expect("image option")))).collect()
    }

    fn marked_pair(&self, t: &TaskInstance) -> Vec<(&'a Mask, MarkerColor)> {
        let img = self.images[t.image_id.as_str()];
        t.markings
            .iter()
            .map(|m| match &m.target {
                MarkTarget::Object { object_id, .. } => (&img.object(object_id).expect("object").mask, m.color),
                MarkTarget::Point { .. } => panic!("expected box markings"),
            })
            .collect()
    }

    fn points(&self, t: &TaskInstance) -> [(u32, u32); 2] {
        let p: Vec<Vec<u32>> = serde_json::from_value(t.params["points"].clone()).expect("points");
        [(p[0][0], p[0][1]), (p[1][0], p[1][1])]
    }

    /// The only option satisfying `pred`, or an error.
    fn unique(options: &[RgbImage], pred: impl Fn(&RgbImage) -> bool) -> Result<Answer, String> {
        let hits: Vec<usize> = options.iter().enumerate().filter(|(_, o)| pred(o)).map(|(i, _)| i).collect();
        match hits.as_slice() {
            [i] => Ok(Answer::Choice(*i as u8)),
            _ => Err(format!("{} options qualify", hits.len())),
        }
    }

    /// Recomputes the key of a task from raw data.
    fn key(&self, t: &TaskInstance) -> Result<Answer, String> {
        let img = self.images[t.image_id.as_str()];
        let raw = &img.pixels;
        let (w, h) = (img.width as f64, img.height as f64);
        let depth = &self.ds.depth[&t.image_id];
        let subject = t.subject_object_ids.first().map(|id| img.object(id).expect("subject"));
        let class_count = |c: &str| img.objects.iter().filter(|o| o.class_name == c).count();
        Ok(match t.task_type {
            TaskType::T1_1 => Answer::binary(class_count(t.params["class"].as_str().unwrap()) > 0),
            TaskType::T1_2 => Answer::Count(class_count(t.params["class"].as_str().unwrap()) as u64),
            TaskType::T1_3 => Answer::binary(class_count(&subject.unwrap().class_name) >= 2),
            TaskType::T2_1 => match self.human(&t.image_id, &subject.unwrap().object_id, "occluded").as_deref() {
                Some("no") => Answer::Choice(0),
                Some("yes") => Answer::Choice(1),
                other => return Err(format!("occlusion consensus {other:?}")),
            },
            TaskType::T2_2 => match self.human(&t.image_id, &subject.unwrap().object_id, "truncated").as_deref() {
                Some("yes") => Answer::Yes,
                Some("no") => Answer::No,
                other => return Err(format!("truncation consensus {other:?}")),
            },
            TaskType::T4_2 => match self.human(&t.image_id, &subject.unwrap().object_id, "direction").as_deref() {
                Some("toward_camera") => Answer::Choice(0),
                Some("away") => Answer::Choice(1),
                Some("left") => Answer::Choice(2),
                Some("right") => Answer::Choice(3),
                other => return Err(format!("direction consensus {other:?}")),
            },
            TaskType::T2_3 | TaskType::T2_4 => {
                let (x0, y0, x1, y1) = own_bbox(&subject.unwrap().mask);
                let opts = self.option_pixels(t);
                Self::unique(&opts, |o| {
                    let mut inside = 0;
                    let mut outside = 0;
                    for (x, y, p) in o.enumerate_pixels() {
                        if p == raw.get_pixel(x, y) {
                            continue;
                        }
                        if x >= x0 + 3 && x + 3 < x1 && y >= y0 + 3 && y + 3 < y1 {
                            inside += 1;
                        } else if !(x >= x0 && x < x1 && y >= y0 && y < y1) {
                            outside += 1;
                        }
                    }
                    inside > 0 && outside == 0
                })?
            }
            TaskType::T2_5 => {
                let opts = self.option_pixels(t);
                let lv: Vec<f64> = opts.iter().map(own_laplacian_variance).collect();
                let best = lv.iter().cloned().fold(f64::MIN, f64::max);
                let by_sharpness = Self::unique(&opts, |o| own_laplacian_variance(o) == best)?;
                let by_identity = Self::unique(&opts, |o| o == raw)?;
                if by_sharpness != by_identity {
                    return Err("sharpest option is not the original".into());
                }
                by_identity
            }
            TaskType::T2_6 | TaskType::T5_3 | TaskType::T8_1 => Self::unique(&self.option_pixels(t), |o| o == raw)?,
            TaskType::T3_1 | TaskType::T3_2 | TaskType::T3_3 | TaskType::T6_1 | TaskType::T4_1 => {
                let pair = self.marked_pair(t);
                let [(a, ca), (b, _)] = [pair[0], pair[1]];
                let pick = |first: bool| Answer::Color(if first { ca } else { ca.other() });
                match t.task_type {
                    TaskType::T3_1 => {
                        let (sa, sb) = (own_area(a) as f64, own_area(b) as f64);
                        if sa.max(sb) / sa.min(sb) < 1.5 {
                            return Err("size ratio below margin".into());
                        }
                        pick(sa > sb)
                    }
                    TaskType::T3_2 => {
                        let (xa, xb) = (own_center(a).0, own_center(b).0);
                        if (xa - xb).abs() < 0.05 * w {
                            return Err("x gap below margin".into());
                        }
                        pick(xa < xb)
                    }
                    TaskType::T3_3 => {
                        let (ya, yb) = (own_center(a).1, own_center(b).1);
                        if (ya - yb).abs() < 0.05 * h {
                            return Err("y gap below margin".into());
                        }
                        pick(ya > yb)
                    }
                    TaskType::T6_1 => {
                        let mean = |m: &Mask| {
                            let (mut s, mut n) = (0u64, 0u64);
                            for y in 0..m.height() {
                                for x in 0..m.width() {
                                    if m.get(x, y) {
                                        s += depth.raw(x, y) as u64;
                                        n += 1;
                                    }
                                }
                            }
                            s as f64 / n as f64 / 65535.0
                        };
                        let (da, db) = (mean(a), mean(b));
                        if (da - db).abs() < 0.10 {
                            return Err("depth gap below margin".into());
                        }
                        pick(da > db)
                    }
                    _ => Answer::binary(own_touch(a, b)),
                }
            }
            TaskType::T3_4 | TaskType::T3_5 => {
                let s = subject.unwrap();
                let cs = own_center(&s.mask);
                let horizontal = t.task_type == TaskType::T3_4;
                let margin = 0.05 * if horizontal { w } else { h };
                let offsets: Vec<f64> = img
                    .objects
                    .iter()
                    .filter(|o| o.object_id != s.object_id)
                    .map(|o| {
                        let c = own_center(&o.mask);
                        if horizontal {
                            cs.0 - c.0
                        } else {
                            c.1 - cs.1
                        }
                    })
                    .collect();
                if offsets.iter().any(|d| *d >= margin) {
                    Answer::Yes
                } else if offsets.iter().all(|d| *d <= -margin) {
                    Answer::No
                } else {
                    return Err("no object clears the margin either way".into());
                }
            }
            TaskType::T5_1 => {
                let s = subject.unwrap();
                let mut hist = [0usize; 8];
                let mut total = 0;
                for y in 0..img.height {
                    for x in 0..img.width {
                        if s.mask.get(x, y) {
                            total += 1;
                            if let Some(b) = own_hue_bin(raw.get_pixel(x, y).0) {
                                hist[b] += 1;
                            }
                        }
                    }
                }
                let top = *hist.iter().max().unwrap();
                let bin = hist.iter().position(|c| *c == top).unwrap();
                if (top as f64) < 0.4 * total as f64 {
                    return Err("no dominant hue".into());
                }
                Self::unique(&self.option_pixels(t), |o| own_hue_bin(o.get_pixel(0, 0).0) == Some(bin))?
            }
            TaskType::T5_2 => {
                let opts = self.option_pixels(t);
                let lum: Vec<f64> = opts.iter().map(|o| o.pixels().map(|p| own_luma(p.0)).sum::<f64>() / (o.width() * o.height()) as f64).collect();
                let mut order: Vec<usize> = (0..lum.len()).collect();
                order.sort_by(|a, b| lum[*b].partial_cmp(&lum[*a]).unwrap());
                if lum[order[0]] - lum[order[1]] < 0.10 || lum[order[1]] - lum[order[2]] < 0.10 {
                    return Err("brightness gaps below margin".into());
                }
                Answer::Choice(order[1] as u8)
            }
            TaskType::T5_4 => {
                let [red, green] = self.points(t);
                let (lr, lg) = (own_window_luma(raw, red.0, red.1, 4), own_window_luma(raw, green.0, green.1, 4));
                if (lr - lg).abs() < 0.10 {
                    return Err("luminance gap below margin".into());
                }
                Answer::binary(lr > lg)
            }
            TaskType::T6_2 => {
                let [red, green] = self.points(t);
                let (dr, dg) = (depth.raw(red.0, red.1) as f64 / 65535.0, depth.raw(green.0, green.1) as f64 / 65535.0);
                if (dr - dg).abs() < 0.10 {
                    return Err("depth gap below margin".into());
                }
                Answer::binary(dr > dg)
            }
            TaskType::T7_1 | TaskType::T7_2 => {
                let rect: BBox = serde_json::from_value(t.params["tile_rect"].clone()).expect("tile_rect");
                let cutout = load_png(&self.bundle.asset_path(&t.image_refs[0]));
                let hole_ok = cutout.enumerate_pixels().all(|(x, y, p)| {
                    let inside = rect.contains(x, y);
                    if inside {
                        p == cutout.get_pixel(rect.x_min, rect.y_min)
                    } else {
                        p == raw.get_pixel(x, y)
                    }
                });
                if !hole_ok {
                    return Err("cut-out image does not match the tile rectangle".into());
                }
                let tile = own_crop(raw, &rect);
                let r90 = own_rotate_cw(&tile);
                let r180 = own_rotate_cw(&r90);
                let r270 = own_rotate_cw(&r180);
                let opts = self.option_pixels(t);
                if t.task_type == TaskType::T7_2 {
                    Self::unique(&opts, |o| *o == tile)?
                } else {
                    Self::unique(&opts, |o| *o == r90 || *o == r180 || *o == r270)?
                }
            }
        })
    }
}

fn criterion_3(ds: &SynthDataset, bundle: &LoadedBundle) -> Outcome {
    let start = Instant::now();
    for img in &ds.images {
        let on_disk = load_png(&bundle.dir.join("..").join("fixture").join("images").join(format!("{}.png", img.image_id)));
        ensure(on_disk == img.pixels, || format!("fixture image {} differs from the generator", img.image_id))?;
    }
    let oracle = Oracle::new(ds, bundle);
    let mut per_type: BTreeMap<TaskType, usize> = BTreeMap::new();
    let mut failures = Vec::new();
    for t in &bundle.tasks {
        *per_type.entry(t.task_type).or_default() += 1;
        match oracle.key(t) {
            Ok(k) if k == t.answer_key => {}
            Ok(k) => failures.push(format!("{}: key {:?}, oracle {:?}", t.task_id, t.answer_key, k)),
            Err(e) => failures.push(format!("{}: {e}", t.task_id)),
        }
    }
    let elapsed = start.elapsed();
    let images: BTreeSet<&str> = bundle.tasks.iter().map(|t| t.image_id.as_str()).collect();
    ensure(failures.is_empty(), || format!("{} of {} keys disagree: {:?}", failures.len(), bundle.tasks.len(), &failures[..failures.len().min(5)]))?;
    ensure(images.len() >= 20, || format!("only {} scenes", images.len()))?;
    ensure(per_type.len() >= 23, || format!("only {} task types exercised", per_type.len()))?;
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?} (limit 120s)"))?;
    Ok(format!(
        "{} keys over {} scenes agree 100%, {}/25 types exercised, {elapsed:.2?} (limit 120s)",
        bundle.tasks.len(),
        images.len(),
        per_type.len()
    ))
}

// ---------------------------------------------------------------- criterion 4

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_owned(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn criterion_4(e2e: &Path, scratch: &Path) -> Outcome {
    let config = e2e.join("fixture").join("segbench.toml");
    let reference = tree(&e2e.join("bundle"));
    let mut runs = Vec::new();
    for (k, workers) in ["1", "3", "4", "4"].iter().enumerate() {
        let out = scratch.join(format!("det{k}"));
        segbench(&out, Some(&config), &["generate", "--workers", workers])?;
        runs.push((workers, tree(&out.join("bundle"))));
    }
    let pngs = reference.keys().filter(|p| p.extension().is_some_and(|e| e == "png")).count();
    for (workers, t) in &runs {
        ensure(t.keys().eq(reference.keys()), || format!("workers={workers}: file sets differ"))?;
        for (path, bytes) in t {
            ensure(reference[path] == *bytes, || format!("workers={workers}: {} differs", path.display()))?;
        }
    }
    Ok(format!("{} files ({pngs} PNG assets) byte-identical across 5 runs with workers 1,1,3,4,4", reference.len()))
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let alphabet = ["yes", "no", "left", "right"];
    let mut stops = 0;
    for _ in 0..5000 {
        let k = rng.random_range(2..=4);
        let len = rng.random_range(0..=12);
        let seq: Vec<&str> = (0..len).map(|_| alphabet[rng.random_range(0..k)]).collect();
        let out = consensus(&seq, 4);
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut hit = None;
        for (i, a) in seq.iter().enumerate() {
            let c = counts.entry(a).or_default();
            *c += 1;
            if *c == 4 {
                hit = Some((i + 1, *a));
                break;
            }
        }
        match hit {
            Some((used, a)) => {
                stops += 1;
                ensure(out.ratings_used == used && out.answer.as_deref() == Some(a), || format!("{seq:?}: stop not at threshold: {out:?}"))?;
                ensure(out.stopped_early == (used < seq.len()), || format!("{seq:?}: stopped_early flag {out:?}"))?;
                let mut longer = seq.clone();
                for _ in 0..rng.random_range(1..=6) {
                    longer.push(alphabet[rng.random_range(0..k)]);
                }
                let again = consensus(&longer, 4);
                ensure(again.answer == out.answer && again.ratings_used == used, || format!("{longer:?}: appended ratings changed {again:?}"))?;
            }
            None => {
                let majority = counts.iter().find(|(_, c)| **c * 2 > seq.len()).map(|(a, _)| a.to_string());
                ensure(out.ratings_used == seq.len() && !out.stopped_early && out.answer == majority, || format!("{seq:?}: {out:?}"))?;
            }
        }
    }
    // every arrangement of three "yes" and three "no"
    let mut splits = 0;
    for bits in 0u32..64 {
        if bits.count_ones() != 3 {
            continue;
        }
        let seq: Vec<&str> = (0..6).map(|i| if bits >> i & 1 == 1 { "yes" } else { "no" }).collect();
        let out = consensus(&seq, 4);
        ensure(out.answer.is_none(), || format!("{seq:?} resolved to {:?}", out.answer))?;
        splits += 1;
    }
    // the harness keeps an unresolved task as an unparseable human answer
    let task = TaskInstance {
        task_id: "t".into(),
        task_type: TaskType::T1_1,
        answer_type: AnswerType::Binary,
        image_id: "1".into(),
        dataset: "d".into(),
        image_refs: vec!["a".into()],
        prompt_text: "q".into(),
        options: vec![],
        answer_key: Answer::Yes,
        subject_object_ids: vec![],
        markings: vec![],
        params: BTreeMap::new(),
        generation_seed: 0,
        provenance: vec![],
    };
    let ratings: Vec<HumanRating> = ["yes", "no", "no", "yes", "yes", "no"]
        .iter()
        .enumerate()
        .map(|(i, a)| HumanRating { item: RatingItem::Task { task_id: "t".into() }, rater_id: format!("r{i}"), answer: a.to_string(), rank_in_sequence: i as u32 + 1 })
        .collect();
    let ingest = ingest_human_answers(&[task], &ratings, 4, 6);
    let rec = &ingest.records[0];
    ensure(rec.status == EvalStatus::Unparseable && rec.parsed_answer.is_none(), || format!("3-3 human split recorded as {rec:?}"))?;
    Ok(format!("5000 random sequences ({stops} threshold stops) exact; post-stop appends inert; {splits}/20 3-3 splits unresolved"))
}

// ---------------------------------------------------------------- criterion 6

fn random_fixture(rng: &mut ChaCha8Rng) -> RgbImage {
    let (w, h) = (rng.random_range(24..=96), rng.random_range(24..=96));
    let style = rng.random_range(0..3);
    RgbImage::from_fn(w, h, |x, y| {
        let base = match style {
            0 => [rng.random(), rng.random(), rng.random()],
            1 => [((x * 255) / w) as u8, ((y * 255) / h) as u8, if (x / 4 + y / 4) % 2 == 0 { 200 } else { 40 }],
            _ => [((x * 37 + y * 11) % 256) as u8, rng.random_range(60..200), ((x ^ y) * 9 % 256) as u8],
        };
        image::Rgb(base)
    })
}

fn apply(img: &RgbImage, t: Transform) -> RgbImage {
    RenderedAsset::render("fx", img, vec![t]).unwrap().pixels
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut blur_ok, mut noise_ok, mut rot_ok) = (0, 0, 0);
    for k in 0..50 {
        let img = random_fixture(&mut rng);
        let sigma = [2.0, 4.0, 8.0][k % 3];
        let blurred = apply(&img, corruption_transform(CorruptionKind::Blur, sigma, 0, None).unwrap());
        let (before, after) = (laplacian_variance(&img), laplacian_variance(&blurred));
        ensure(after < before, || format!("fixture {k}: blur sigma {sigma} gave Laplacian variance {after} >= {before}"))?;
        blur_ok += 1;

        let seed: u64 = rng.random();
        let deltas: Vec<f64> = [15.0, 30.0, 60.0]
            .iter()
            .map(|s| mean_abs_delta(&apply(&img, corruption_transform(CorruptionKind::Noise, *s, seed, None).unwrap()), &img))
            .collect();
        ensure(deltas[0] > 0.0 && deltas[0] < deltas[1] && deltas[1] < deltas[2], || format!("fixture {k}: noise deltas {deltas:?}"))?;
        noise_ok += 1;

        let once = apply(&img, corruption_transform(CorruptionKind::Rotation, 180.0, 0, None).unwrap());
        let twice = apply(&once, corruption_transform(CorruptionKind::Rotation, 180.0, 0, None).unwrap());
        ensure(twice == img, || format!("fixture {k}: 180 rotation is not an involution"))?;
        ensure(once == own_rotate_cw(&own_rotate_cw(&img)), || format!("fixture {k}: 180 rotation is not a point reflection"))?;
        rot_ok += 1;
    }
    Ok(format!("50 fixtures: blur lowers Laplacian variance {blur_ok}/50, noise delta strictly grows with std {noise_ok}/50, 180-rotation involution {rot_ok}/50"))
}

// ---------------------------------------------------------------- criterion 7

fn subset(bundle: &LoadedBundle, n: usize) -> LoadedBundle {
    let mut b = bundle.clone();
    b.tasks.truncate(n);
    b
}

fn endpoint(model: &str, url: &str) -> EndpointConfig {
    EndpointConfig { backoff_base_ms: 5, backoff_max_ms: 20, timeout_ms: 5_000, ..EndpointConfig::new(model, url) }
}

fn outcome_set(records: &[EvalRecord]) -> BTreeSet<(String, String, EvalStatus, Option<String>)> {
    records.iter().map(|r| (r.task_id.clone(), r.model_id.clone(), r.status, r.parsed_answer.as_ref().map(Answer::token))).collect()
}

fn criterion_7(bundle: &LoadedBundle, scratch: &Path) -> Outcome {
    let templates = TemplateSet::builtin();
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async {
        let small = subset(bundle, 60);
        let mut profiles = BTreeMap::new();
        profiles.insert("slow".to_string(), MockProfile { latency_ms: 40, accuracy: 0.7, ..Default::default() });
        profiles.insert("paced".to_string(), MockProfile::default());
        profiles.insert("steady".to_string(), MockProfile { accuracy: 0.6, transient_failure_rate: 0.2, ..Default::default() });
        profiles.insert("other".to_string(), MockProfile { accuracy: 0.5, unparseable_rate: 0.1, ..Default::default() });
        profiles.insert("guarded".to_string(), MockProfile { accuracy: 0.9, safety_rate: 0.3, ..Default::default() });
        let config = MockConfig { seed: 11, default_profile: MockProfile::default(), profiles };
        let index = MockIndex::from_bundle(&small, &templates).map_err(|e| e.to_string())?;
        let mock = spawn_mock("127.0.0.1:0".parse().unwrap(), config, index).await.map_err(|e| e.to_string())?;
        let url = mock.base_url();
        let mut lines = Vec::new();

        // concurrency cap
        let ep = EndpointConfig { max_concurrency: 3, ..endpoint("slow", &url) };
        let journal = scratch.join("concurrency.jsonl");
        run_benchmark(&small, &[ep], &templates, &journal, &RunOptions::default()).await.map_err(|e| e.to_string())?;
        let peak = mock.stats.max_in_flight.load(std::sync::atomic::Ordering::SeqCst);
        ensure(peak <= 3 && peak >= 1, || format!("peak in-flight {peak} with cap 3"))?;
        lines.push(format!("peak in-flight {peak} <= cap 3"));

        // rate limit: 20 req/s
        let rpm = 1200.0;
        let ep = EndpointConfig { rate_limit_rpm: Some(rpm), max_concurrency: 8, ..endpoint("paced", &url) };
        let paced = subset(&small, 30);
        run_benchmark(&paced, &[ep], &templates, &scratch.join("rate.jsonl"), &RunOptions::default()).await.map_err(|e| e.to_string())?;
        let arrivals = mock.stats.arrivals("paced");
        let span = arrivals.last().unwrap().duration_since(arrivals[0]).as_secs_f64();
        let rate = (arrivals.len() - 1) as f64 / span;
        let limit = rpm / 60.0;
        ensure(arrivals.len() == 30, || format!("{} requests for 30 tasks", arrivals.len()))?;
        ensure(rate <= limit * 1.10, || format!("observed {rate:.2} req/s over limit {limit} (+10%)"))?;
        lines.push(format!("observed {rate:.2} req/s vs limit {limit:.0} (tol +10%)"));

        // crash and resume
        let eps = [endpoint("steady", &url), endpoint("other", &url)];
        let full = scratch.join("full.jsonl");
        run_benchmark(&small, &eps, &templates, &full, &RunOptions::default()).await.map_err(|e| e.to_string())?;
        let crashed = scratch.join("crashed.jsonl");
        run_benchmark(&small, &eps, &templates, &crashed, &RunOptions { max_new_records: Some(37) }).await.map_err(|e| e.to_string())?;
        {
            use std::io::Write;
            let mut f = fs::OpenOptions::new().append(true).open(&crashed).unwrap();
            f.write_all(br#"{"task_id":"half-writ"#).unwrap();
        }
        let resumed = run_benchmark(&small, &eps, &templates, &crashed, &RunOptions::default()).await.map_err(|e| e.to_string())?;
        let (a, b) = (read_journal(&full).map_err(|e| e.to_string())?, read_journal(&crashed).map_err(|e| e.to_string())?);
        ensure(resumed.previously_done == 37, || format!("resume saw {} earlier records", resumed.previously_done))?;
        ensure(b.len() == small.tasks.len() * 2 && outcome_set(&a) == outcome_set(&b), || {
            format!("resumed journal has {} records; sets equal: {}", b.len(), outcome_set(&a) == outcome_set(&b))
        })?;
        lines.push(format!("crash after 37 + torn line, resume -> {} records identical to uninterrupted run", b.len()));

        // safety blocks
        let journal = scratch.join("safety.jsonl");
        let summary = run_benchmark(&small, &[endpoint("guarded", &url)], &templates, &journal, &RunOptions::default())
            .await
            .map_err(|e| e.to_string())?;
        let records = read_journal(&journal).map_err(|e| e.to_string())?;
        let blocked = records.iter().filter(|r| r.status == EvalStatus::UnansweredSafety).count();
        ensure(blocked > 0, || "no safety blocks observed".into())?;
        ensure(summary.status_counts["guarded"].get(&EvalStatus::UnansweredSafety) == Some(&blocked), || "summary miscounts blocks".into())?;
        let m = ScoreMatrix::from_records(&small.tasks, &records);
        let counts = m.status_counts(0, &Group::All);
        ensure(counts.get(&CellStatus::UnansweredSafety) == Some(&blocked), || format!("matrix counts {counts:?}"))?;
        let q_blocked: Vec<usize> = (0..m.tasks.len()).filter(|q| m.cells[0][*q].status == CellStatus::UnansweredSafety).collect();
        let single = |q: usize| {
            let mut one = m.clone();
            one.tasks = vec![m.tasks[q].clone()];
            one.cells = vec![vec![m.cells[0][q]]];
            one
        };
        for q in &q_blocked {
            let one = single(*q);
            ensure(one.accuracy(0, &Group::All, ScoringMode::Default) == Some(0.0), || "blocked cell not scored incorrect".into())?;
            ensure(one.accuracy(0, &Group::All, ScoringMode::Exclude).is_none(), || "blocked cell not excluded in exclusion mode".into())?;
        }
        let grid = ThresholdGrid::default();
        let report = build_report(&ReportInputs { matrix: &m, ratings: &[], open_models: &BTreeSet::new(), grid: &grid, mode: ScoringMode::Default });
        let row = report.accuracy_by_dataset.iter().find(|r| r.group == "all").unwrap();
        ensure(row.status_counts.get(&CellStatus::UnansweredSafety) == Some(&blocked), || "report lacks separate safety count".into())?;
        ensure(row.accuracy < row.accuracy_excluding_unanswered, || "default accuracy not below exclusion accuracy".into())?;
        lines.push(format!("{blocked} safety blocks -> unanswered_safety, scored incorrect by default, counted separately"));
        Ok(lines.join("; "))
    })
}

// ---------------------------------------------------------------- criterion 8

const PARSER_FIXTURES: &[(&str, AnswerType, Option<&str>)] = &[
    ("Yes", AnswerType::Binary, Some("yes")),
    ("no", AnswerType::Binary, Some("no")),
    ("YES.", AnswerType::Binary, Some("yes")),
    ("Answer: No", AnswerType::Binary, Some("no")),
    ("**Yes**, there is one.", AnswerType::Binary, Some("yes")),
    ("No, the objects do not touch.", AnswerType::Binary, Some("no")),
    ("yes, although it is small", AnswerType::Binary, Some("yes")),
    ("I think the answer is no", AnswerType::Binary, Some("no")),
    ("\"yes\"", AnswerType::Binary, Some("yes")),
    ("(no)", AnswerType::Binary, Some("no")),
    ("Nope", AnswerType::Binary, None),
    ("Yesterday it rained", AnswerType::Binary, None),
    ("I cannot determine that.", AnswerType::Binary, None),
    ("", AnswerType::Binary, None),
    ("Not sure, maybe.", AnswerType::Binary, None),
    ("noon", AnswerType::Binary, None),
    ("3", AnswerType::Count, Some("3")),
    ("There are 4 dogs.", AnswerType::Count, Some("4")),
    ("Answer: 12", AnswerType::Count, Some("12")),
    ("I count 0 cats", AnswerType::Count, Some("0")),
    ("**7**", AnswerType::Count, Some("7")),
    ("-2 or 3", AnswerType::Count, Some("3")),
    ("about 2.5, say 3", AnswerType::Count, Some("3")),
    ("There are two.", AnswerType::Count, None),
    ("none", AnswerType::Count, None),
    ("5 apples and 6 pears", AnswerType::Count, Some("5")),
    ("(9)", AnswerType::Count, Some("9")),
    ("count=10", AnswerType::Count, Some("10")),
    ("1.5", AnswerType::Count, None),
    ("", AnswerType::Count, None),
    ("The number is 42.", AnswerType::Count, Some("42")),
    ("99999999999999999999999", AnswerType::Count, None),
    ("red", AnswerType::Color, Some("red")),
    ("Green", AnswerType::Color, Some("green")),
    ("The red one.", AnswerType::Color, Some("red")),
    ("GREEN box", AnswerType::Color, Some("green")),
    ("Answer: red", AnswerType::Color, Some("red")),
    ("**green**", AnswerType::Color, Some("green")),
    ("The object in the green box is closer than the red one", AnswerType::Color, Some("green")),
    ("reddish", AnswerType::Color, None),
    ("blue", AnswerType::Color, None),
    ("", AnswerType::Color, None),
    ("Neither", AnswerType::Color, None),
    ("(red)", AnswerType::Color, Some("red")),
    ("greenery", AnswerType::Color, None),
    ("It's red.", AnswerType::Color, Some("red")),
    ("red-boxed object", AnswerType::Color, Some("red")),
    ("A", AnswerType::Quiz4, Some("A")),
    ("b", AnswerType::Quiz4, Some("B")),
    ("(C)", AnswerType::Quiz4, Some("C")),
    ("D.", AnswerType::Quiz4, Some("D")),
    ("The answer is (c).", AnswerType::Quiz4, Some("C")),
    ("Answer: B", AnswerType::Quiz4, Some("B")),
    ("This is a hard one, but B.", AnswerType::Quiz4, Some("B")),
    ("a)", AnswerType::Quiz4, Some("A")),
    ("a", AnswerType::Quiz4, Some("A")),
    ("**D**", AnswerType::Quiz4, Some("D")),
    ("Option A is correct", AnswerType::Quiz4, Some("A")),
    ("E", AnswerType::Quiz4, None),
    ("It is a tie.", AnswerType::Quiz4, None),
    ("", AnswerType::Quiz4, None),
    ("I would choose [b]", AnswerType::Quiz4, Some("B")),
    ("answer a", AnswerType::Quiz4, Some("A")),
    ("Image C looks least blurred.", AnswerType::Quiz4, Some("C")),
    ("ABCD", AnswerType::Quiz4, None),
];

fn criterion_8() -> Outcome {
    let mut per_type: BTreeMap<&str, usize> = BTreeMap::new();
    for (raw, t, want) in PARSER_FIXTURES {
        let want = want.map(|w| match t {
            AnswerType::Quiz4 => Answer::Choice(w.as_bytes()[0] - b'A'),
            _ => Answer::from_token(w).unwrap(),
        });
        let got = parse_answer(raw, *t);
        ensure(got == want, || format!("{raw:?} as {t:?}: got {got:?}, want {want:?}"))?;
        *per_type.entry(match t {
            AnswerType::Binary => "binary",
            AnswerType::Count => "count",
            AnswerType::Color => "color",
            AnswerType::Quiz4 => "quiz4",
        })
        .or_default() += 1;
    }
    ensure(PARSER_FIXTURES.len() >= 60 && per_type.len() == 4, || "too few fixtures".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tokens: [&[u8]; 8] = [b"yes", b"no", b"red", b"green", b"(b)", b"a", b"-3", b"4.5"];
    let mut some = 0;
    for _ in 0..10_000 {
        let mut bytes: Vec<u8> = (0..rng.random_range(0..64)).map(|_| rng.random()).collect();
        if rng.random_bool(0.3) {
            let tok = tokens.choose(&mut rng).unwrap();
            let at = rng.random_range(0..=bytes.len());
            bytes.splice(at..at, tok.iter().copied());
        }
        let raw = String::from_utf8_lossy(&bytes);
        for t in [AnswerType::Binary, AnswerType::Count, AnswerType::Color, AnswerType::Quiz4] {
            if let Some(a) = parse_answer(&raw, t) {
                some += 1;
                ensure(a.answer_type() == t, || format!("{raw:?}: {a:?} is not {t:?}"))?;
                if let Answer::Choice(c) = a {
                    ensure(c < 4, || format!("choice {c}"))?;
                }
            }
        }
    }
    Ok(format!(
        "{} labelled fixtures ({per_type:?}) exact; 10000 random byte strings x 4 types: no panic, {some} typed answers, rest none",
        PARSER_FIXTURES.len()
    ))
}

// ---------------------------------------------------------------- criterion 9

fn pairwise_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            sxy += (x[i] - x[j]) * (y[i] - y[j]);
            sxx += (x[i] - x[j]) * (x[i] - x[j]);
            syy += (y[i] - y[j]) * (y[i] - y[j]);
        }
    }
    if x.len() < 2 || sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Lance-Williams average linkage; merges as (left, right, distance, size).
fn lance_williams(dist: &[Vec<f64>]) -> Vec<(usize, usize, f64, usize)> {
    let n = dist.len();
    let mut d: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for i in 0..n {
        for j in i + 1..n {
            d.insert((i, j), dist[i][j]);
        }
    }
    let mut size: BTreeMap<usize, usize> = (0..n).map(|i| (i, 1)).collect();
    let mut out = Vec::new();
    while size.len() > 1 {
        let best = d.values().cloned().fold(f64::INFINITY, f64::min);
        let (&(a, b), _) = d.iter().find(|(_, v)| (**v - best).abs() <= 1e-12).unwrap();
        let id = n + out.len();
        let (sa, sb) = (size.remove(&a).unwrap(), size.remove(&b).unwrap());
        let key = |x: usize, y: usize| (x.min(y), x.max(y));
        let actual = d[&(a, b)];
        for &k in size.keys() {
            let nd = (sa as f64 * d[&key(k, a)] + sb as f64 * d[&key(k, b)]) / (sa + sb) as f64;
            d.insert(key(k, id), nd);
        }
        d.retain(|(x, y), _| ![a, b].contains(x) && ![a, b].contains(y));
        size.insert(id, sa + sb);
        out.push((a, b, actual, sa + sb));
    }
    out
}

fn hand_examples() -> Result<(), String> {
    // three models on two domains, accuracies by construction:
    // d1: m1 100, m2 50, m3 50; d2: m1 0, m2 100, m3 50
    let mut tasks = Vec::new();
    for (d, t) in [("d1", TaskType::T1_1), ("d1", TaskType::T1_2), ("d2", TaskType::T1_1), ("d2", TaskType::T1_2)] {
        tasks.push(TaskInfo { task_id: format!("{d}{}", t.id()), image_id: d.into(), dataset: d.into(), task_type: t });
    }
    let correct = vec![
        vec![true, true, false, false],
        vec![true, false, true, true],
        vec![false, true, true, false],
    ];
    let m = ScoreMatrix::from_correctness(tasks, vec!["m1".into(), "m2".into(), "m3".into()], correct);
    let grid = ThresholdGrid::default();
    let r = build_report(&ReportInputs { matrix: &m, ratings: &[], open_models: &BTreeSet::new(), grid: &grid, mode: ScoringMode::Default });
    let ranks = &r.ranks_by_dataset.ranks;
    let want_d1: BTreeMap<String, usize> = [("m1".into(), 1), ("m2".into(), 2), ("m3".into(), 2)].into();
    let want_d2: BTreeMap<String, usize> = [("m1".into(), 3), ("m2".into(), 1), ("m3".into(), 2)].into();
    ensure(ranks["d1"] == want_d1 && ranks["d2"] == want_d2, || format!("hand ranks {ranks:?}"))?;
    let dist = &r.ranks_by_dataset.distribution;
    ensure(dist["m1"] == [(1, 0.5), (3, 0.5)].into() && dist["m3"] == [(2, 1.0)].into(), || format!("hand distribution {dist:?}"))?;
    // difficulty in d1: T1.1 mean (100+100+0)/3, T1.2 mean (100+0+100)/3 -> tie at rank 1
    // d2: T1.1 (0+100+100)/3 = 66.7 rank 2, T1.2 (0+100+0)/3 = 33.3 rank 1 (hardest)
    let diff = &r.difficulty["all"].ranks;
    ensure(diff["d1"][&TaskType::T1_1] == 1 && diff["d1"][&TaskType::T1_2] == 1, || format!("hand difficulty {diff:?}"))?;
    ensure(diff["d2"][&TaskType::T1_1] == 2 && diff["d2"][&TaskType::T1_2] == 1, || format!("hand difficulty {diff:?}"))?;
    // r([1,2,3],[1,2,4]) = 3 / sqrt(2 * 14/3)
    let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
    ensure((r - 0.9819805060619656).abs() <= 1e-12, || format!("hand pearson {r}"))?;
    ensure(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_none(), || "zero variance pearson defined".into())?;
    let merges = average_linkage(&[vec![0.0, 0.2, 0.6], vec![0.2, 0.0, 1.0], vec![0.6, 1.0, 0.0]]);
    let got: Vec<(usize, usize, f64, usize)> = merges.iter().map(|m| (m.left, m.right, m.distance, m.size)).collect();
    ensure(got.len() == 2 && got[0] == (0, 1, 0.2, 2) && (got[1].0, got[1].1, got[1].3) == (2, 3, 3) && (got[1].2 - 0.8).abs() < 1e-12, || format!("hand linkage {got:?}"))?;
    Ok(())
}

fn criterion_9(e2e: &Path, bundle: &LoadedBundle) -> Outcome {
    hand_examples()?;
    let report: MetricReport = serde_json::from_str(&fs::read_to_string(e2e.join("report").join("report.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let mut records = read_journal(&e2e.join("eval").join("records.jsonl")).map_err(|e| e.to_string())?;
    for line in fs::read_to_string(e2e.join("eval").join("humans.jsonl")).map_err(|e| e.to_string())?.lines() {
        records.push(serde_json::from_str(line).map_err(|e| e.to_string())?);
    }
    let ratings = import_human_annotations(fs::File::open(e2e.join("eval").join("human_ratings.csv")).unwrap()).unwrap().ratings;

    // brute-force correctness, first record per (task, model)
    let mut correct: BTreeMap<(String, String), bool> = BTreeMap::new();
    let keys: HashMap<&str, &TaskInstance> = bundle.tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
    for r in &records {
        let ok = r.status == EvalStatus::Answered && r.parsed_answer.as_ref() == Some(&keys[r.task_id.as_str()].answer_key);
        correct.entry((r.model_id.clone(), r.task_id.clone())).or_insert(ok);
    }
    let models: BTreeSet<String> = records.iter().map(|r| r.model_id.clone()).collect();
    let machines: Vec<&String> = models.iter().filter(|m| *m != HUMANS_MODEL_ID).collect();
    ensure(machines.len() >= 3 && models.contains(HUMANS_MODEL_ID), || format!("models {models:?}"))?;
    let acc = |model: &str, pred: &dyn Fn(&TaskInstance) -> bool| -> Option<f64> {
        let (mut hit, mut n) = (0usize, 0usize);
        for t in bundle.tasks.iter().filter(|t| pred(t)) {
            n += 1;
            hit += *correct.get(&(model.to_string(), t.task_id.clone())).unwrap_or(&false) as usize;
        }
        (n > 0).then(|| 100.0 * hit as f64 / n as f64)
    };
    let ranks_of = |vals: &BTreeMap<String, f64>, higher: bool| -> BTreeMap<String, usize> {
        vals.iter()
            .map(|(k, v)| (k.clone(), 1 + vals.values().filter(|o| if higher { *o > v } else { *o < v }).count()))
            .collect()
    };
    let datasets: BTreeSet<String> = bundle.tasks.iter().map(|t| t.dataset.clone()).collect();
    let types: BTreeSet<TaskType> = bundle.tasks.iter().map(|t| t.task_type).collect();

    // model ranks per task type, and their distribution
    let mut rank_checks = 0;
    for t in &types {
        let vals: BTreeMap<String, f64> = machines.iter().map(|m| ((*m).clone(), acc(m, &|x| x.task_type == *t).unwrap())).collect();
        let want = ranks_of(&vals, true);
        ensure(report.ranks_by_task.ranks[t.id()] == want, || format!("{}: ranks {:?} vs {want:?}", t.id(), report.ranks_by_task.ranks[t.id()]))?;
        rank_checks += want.len();
    }
    for m in &machines {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for t in &types {
            *counts.entry(report.ranks_by_task.ranks[t.id()][*m]).or_default() += 1;
        }
        for (r, c) in counts {
            let share = report.ranks_by_task.distribution[*m][&r];
            ensure((share - c as f64 / types.len() as f64).abs() <= 1e-12, || format!("{m}: rank {r} share {share}"))?;
        }
    }
    for d in &datasets {
        let vals: BTreeMap<String, f64> = machines.iter().map(|m| ((*m).clone(), acc(m, &|x| &x.dataset == d).unwrap())).collect();
        ensure(report.ranks_by_dataset.ranks[d] == ranks_of(&vals, true), || format!("{d}: dataset ranks"))?;
    }

    // task difficulty, 1 = hardest, for machines and for humans
    let mut difficulty_checks = 0;
    for (population, members) in [("all", machines.clone()), ("humans", vec![&HUMANS_MODEL_ID.to_string()].into_iter().map(|s| models.get(s).unwrap()).collect())] {
        let rep = &report.difficulty[population];
        for d in &datasets {
            let mut means: BTreeMap<String, f64> = BTreeMap::new();
            for t in &types {
                let mut s = 0.0;
                for m in &members {
                    s += acc(m, &|x| &x.dataset == d && x.task_type == *t).unwrap();
                }
                means.insert(t.id().to_string(), s / members.len() as f64);
            }
            let want = ranks_of(&means, false);
            for t in &types {
                let got = rep.ranks[d][t];
                ensure(got == want[t.id()], || format!("{population}/{d}/{}: difficulty rank {got} vs {}", t.id(), want[t.id()]))?;
                ensure((rep.aggregate[d][t] - means[t.id()]).abs() <= 1e-9, || "aggregate accuracy".into())?;
                difficulty_checks += 1;
            }
            let hardest = means.values().cloned().fold(f64::INFINITY, f64::min);
            ensure(types.iter().all(|t| (rep.ranks[d][t] == 1) == (means[t.id()] == hardest)), || "rank 1 is not the hardest".into())?;
        }
    }

    // ambiguity
    let mut per_task: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in &ratings {
        if let RatingItem::Task { task_id } = &r.item {
            per_task.entry(task_id).or_default().push(&r.answer);
        }
    }
    for (task, answers) in &per_task {
        let modal = answers.iter().map(|a| answers.iter().filter(|b| *b == a).count()).max().unwrap();
        let want = 1.0 - modal as f64 / answers.len() as f64;
        ensure((report.ambiguity[*task] - want).abs() <= 1e-12, || format!("{task}: ambiguity {} vs {want}", report.ambiguity[*task]))?;
    }

    // correlation and linkage
    let corr = report.correlation.as_ref().ok_or("no correlation emitted")?;
    let mut worst = 0.0f64;
    let mut defined = 0;
    let k = corr.tasks.len();
    let mut dist = vec![vec![0.0; k]; k];
    for i in 0..k {
        let vi: Vec<Option<f64>> = machines.iter().flat_map(|m| datasets.iter().map(move |d| (m, d))).map(|(m, d)| acc(m, &|x| &x.dataset == d && x.task_type == corr.tasks[i])).collect();
        for j in 0..k {
            let vj: Vec<Option<f64>> = machines.iter().flat_map(|m| datasets.iter().map(move |d| (m, d))).map(|(m, d)| acc(m, &|x| &x.dataset == d && x.task_type == corr.tasks[j])).collect();
            let (x, y): (Vec<f64>, Vec<f64>) = vi.iter().zip(&vj).filter_map(|(a, b)| Some(((*a)?, (*b)?))).unzip();
            let want = pairwise_pearson(&x, &y);
            match (corr.matrix[i][j], want) {
                (Some(a), Some(b)) => {
                    worst = worst.max((a - b).abs());
                    defined += 1;
                }
                (None, None) => {}
                (a, b) => return Err(format!("r[{i}][{j}] defined mismatch: {a:?} vs {b:?}")),
            }
            if i != j {
                dist[i][j] = 1.0 - want.unwrap_or(0.0);
            }
        }
    }
    ensure(worst <= 1e-12, || format!("Pearson deviation {worst:e} > 1e-12"))?;
    let want_tree = lance_williams(&dist);
    ensure(want_tree.len() == corr.linkage.len(), || "linkage length".into())?;
    for (m, w) in corr.linkage.iter().zip(&want_tree) {
        ensure((m.left, m.right, m.size) == (w.0, w.1, w.3) && (m.distance - w.2).abs() <= 1e-12, || format!("linkage step {m:?} vs {w:?}"))?;
    }
    ensure(e2e.join("report").join("plots").is_dir(), || "no plot data".into())?;
    Ok(format!(
        "hand oracles ok; {rank_checks} model ranks exact, {difficulty_checks} difficulty ranks exact, {} ambiguity scores, {defined} Pearson r max |d|={worst:e} (tol 1e-12), {}-step linkage tree matches",
        per_task.len(),
        want_tree.len()
    ))
}

// ---------------------------------------------------------------- main

fn main() {
    let scratch = tempfile::tempdir().expect("tempdir");
    let e2e = scratch.path().join("e2e");
    let mut tally = Tally { failed: 0 };

    tally.run(1, "metric oracle", criterion_1);
    tally.run(2, "endpoints and monotonicity", criterion_2);

    let pipeline = run_pipeline(&e2e);
    match &pipeline {
        Ok(d) if *d < Duration::from_secs(60) => println!("pipeline [synth..report with mock endpoints]: PASS ({:.2}s, limit 60s)", d.as_secs_f64()),
        Ok(d) => {
            tally.failed += 1;
            println!("pipeline [synth..report with mock endpoints]: FAIL ({:.2}s, limit 60s)", d.as_secs_f64());
        }
        Err(e) => {
            tally.failed += 1;
            println!("pipeline [synth..report with mock endpoints]: FAIL {e}");
        }
    }
    let bundle = read_bundle(&e2e.join("bundle"));
    let ds = synth_dataset(&SynthConfig { images: FIXTURE_IMAGES, ..Default::default() });
    match &bundle {
        Ok(bundle) => {
            tally.run(3, "key soundness", || criterion_3(&ds, bundle));
            tally.run(4, "determinism", || criterion_4(&e2e, scratch.path()));
        }
        Err(e) => {
            tally.run(3, "key soundness", || Err(format!("no bundle: {e}")));
            tally.run(4, "determinism", || Err(format!("no bundle: {e}")));
        }
    }
    tally.run(5, "consensus properties", criterion_5);
    tally.run(6, "corruption detectability", criterion_6);
    match &bundle {
        Ok(bundle) => {
            tally.run(7, "harness robustness", || criterion_7(bundle, scratch.path()));
            tally.run(8, "answer parser", criterion_8);
            tally.run(9, "analytics", || criterion_9(&e2e, bundle));
        }
        Err(_) => {
            tally.run(7, "harness robustness", || Err("no bundle".into()));
            tally.run(8, "answer parser", criterion_8);
            tally.run(9, "analytics", || Err("no bundle".into()));
        }
    }
    if tally.failed > 0 {
        println!("acceptance: {} failing", tally.failed);
        std::process::exit(1);
    }
    println!("acceptance: all criteria pass");
}
