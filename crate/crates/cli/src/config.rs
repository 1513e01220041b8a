use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use segbench_core::metrics::{ScoringMode, ThresholdGrid};
use segbench_core::synth::SynthConfig;
use segbench_core::taskgen::GenerationConfig;
use segbench_core::templates::TemplateSet;
use segbench_harness::mock::MockConfig;
use segbench_harness::EndpointConfig;

/// Endpoints with this base URL are served by an in-process mock.
pub const MOCK_URL: &str = "mock";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    /// Prompt templates; the built-in set when absent.
    pub templates: Option<PathBuf>,
    pub datasets: Vec<DatasetConfig>,
    pub enrich: EnrichConfig,
    pub generation: GenerationConfig,
    pub evaluation: EvaluationConfig,
    pub scoring: ScoringConfig,
    pub synth: SynthConfig,
    pub mock: MockConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Domain tag carried into every task.
    pub name: String,
    pub annotations: PathBuf,
    pub image_root: PathBuf,
    #[serde(default)]
    pub depth_dir: Option<PathBuf>,
    #[serde(default)]
    pub depth_manifest: Option<PathBuf>,
    /// Object-level human ratings (occlusion, truncation, direction).
    #[serde(default)]
    pub ratings: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnrichConfig {
    pub consensus_threshold: usize,
    pub max_raters: usize,
}

impl Default for EnrichConfig {
    fn default() -> Self {
        Self { consensus_threshold: 4, max_raters: 6 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub endpoints: Vec<EndpointConfig>,
    /// Task-level human ratings, scored as the "humans" model.
    pub human_ratings: Option<PathBuf>,
    /// Seeded stand-in for a human panel, used when no ratings file is given.
    pub simulated_humans: Option<SimulatedHumans>,
    /// Stop after this many new records (the rest are picked up on rerun).
    pub max_new_records: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatedHumans {
    pub raters: usize,
    pub accuracy: f64,
    pub spread: f64,
}

impl Default for SimulatedHumans {
    fn default() -> Self {
        Self { raters: 6, accuracy: 0.9, spread: 0.3 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub thresholds: ThresholdGrid,
    pub mode: ScoringMode,
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Config = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// Makes relative paths relative to `base` (the config file's directory).
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(t) = &mut self.templates {
            fix(t);
        }
        for d in &mut self.datasets {
            fix(&mut d.annotations);
            fix(&mut d.image_root);
            for p in [&mut d.depth_dir, &mut d.depth_manifest, &mut d.ratings].into_iter().flatten() {
                fix(p);
            }
        }
        if let Some(p) = &mut self.evaluation.human_ratings {
            fix(p);
        }
    }

    /// Applies the seed override and pushes the run seed into module configs.
    pub fn apply_seed(&mut self, seed: Option<u64>) {
        let seed = seed.or(self.seed).unwrap_or(self.generation.seed);
        self.seed = Some(seed);
        self.generation.seed = seed;
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.generation.seed)
    }

    /// Hash of the effective configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn templates(&self) -> anyhow::Result<TemplateSet> {
        match &self.templates {
            None => Ok(TemplateSet::builtin()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(TemplateSet::from_toml(&text)?)
            }
        }
    }
}
