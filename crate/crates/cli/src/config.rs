//! Run configuration file (TOML). Every section is optional except `data`;
//! unknown keys are rejected and everything is validated before work starts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use trajectron::config::ModelConfig;
use trajectron::data::raster::load_map_raster;
use trajectron::data::text::{load_trajectory_text, TextFormat};
use trajectron::evaluate::EvalConfig;
use trajectron::scene::{AgentId, ClassTable, Scene, SliceOptions};
use trajectron::training::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides `train.seed` and `eval.seed` when set.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Per-class perception range, history and horizon.
    #[serde(default)]
    pub classes: ClassTable,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub train: Vec<SceneSource>,
    #[serde(default)]
    pub eval: Vec<SceneSource>,
}

/// One trajectory file with its optional map and ego agent.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSource {
    pub path: PathBuf,
    pub dt: f64,
    #[serde(default = "auto_format")]
    pub format: TextFormat,
    #[serde(default)]
    pub map: Option<PathBuf>,
    #[serde(default)]
    pub ego: Option<String>,
}

fn auto_format() -> TextFormat {
    TextFormat::Auto
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub checkpoint: PathBuf,
    /// Line-delimited JSON training log.
    pub log: PathBuf,
    pub metrics: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            checkpoint: "model.ckpt".into(),
            log: "train.jsonl".into(),
            metrics: "metrics.json".into(),
        }
    }
}

impl RunConfig {
    /// Parses, resolves relative paths against the file's directory, applies
    /// the top-level overrides and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        cfg.apply_overrides();
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for s in self.data.train.iter_mut().chain(self.data.eval.iter_mut()) {
            fix(&mut s.path);
            if let Some(m) = s.map.as_mut() {
                fix(m);
            }
        }
        fix(&mut self.output.checkpoint);
        fix(&mut self.output.log);
        fix(&mut self.output.metrics);
    }

    fn apply_overrides(&mut self) {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
            self.eval.seed = seed;
        }
        self.model.classes = self.classes.clone();
    }

    pub fn validate(&self) -> Result<()> {
        self.classes.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        for s in self.data.train.iter().chain(&self.data.eval) {
            ensure!(
                s.dt > 0.0 && s.dt.is_finite(),
                "data source {}: dt must be positive",
                s.path.display()
            );
            ensure!(s.path.is_file(), "data source {} does not exist", s.path.display());
            if let Some(m) = &s.map {
                ensure!(m.is_file(), "map {} does not exist", m.display());
            }
        }
        Ok(())
    }

    pub fn slice_options(&self, model: &ModelConfig, require_gt: bool) -> SliceOptions {
        let mut opts = SliceOptions::new(model.classes.clone());
        opts.min_history = model.min_history;
        opts.require_gt = require_gt;
        if model.use_map {
            opts.map = Some(model.map.crop);
        }
        opts
    }
}

pub fn load_scene(src: &SceneSource) -> Result<Scene> {
    let mut scene = load_trajectory_text(&src.path, src.format, src.dt)?;
    if let Some(m) = &src.map {
        scene = scene.with_map(load_map_raster(m)?);
    }
    if let Some(ego) = &src.ego {
        scene = scene.with_ego(AgentId::new(ego.as_str()))?;
    }
    Ok(scene)
}

pub fn load_scenes(sources: &[SceneSource], what: &str) -> Result<Vec<Scene>> {
    if sources.is_empty() {
        bail!("no {what} data sources configured");
    }
    sources
        .iter()
        .map(|s| load_scene(s).with_context(|| format!("loading {}", s.path.display())))
        .collect()
}
