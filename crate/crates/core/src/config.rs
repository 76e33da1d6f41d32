//! Run configuration: TOML or JSON files, dotted-path overrides and a stable hash.
//!
//! Overrides are applied to the parsed document before it is typed, so a
//! `--set drf.N=4` behaves exactly like editing the file. The hash is a SHA-256
//! digest of the resolved configuration serialised as JSON.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::bench::{build_toy_world, BenchConfig, TaskConfig, TaskSpec, ToyWorld, WorldParams};
use crate::control::ControlSettings;
use crate::drf::DrfConfig;
use crate::error::{DrfError, Result};
use crate::metrics::MetricConfig;
use crate::sampler::{Sampler, SamplerKind};
use crate::schedule::{
    make_schedule, make_step_grid, NoiseSchedule, ScheduleKind, Spacing, StepGrid,
    DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_TRAIN_STEPS,
};
use crate::score::{GaussianMixtureScore, ScoreModel, ToyDenoiser, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub train_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            train_steps: DEFAULT_TRAIN_STEPS,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// The analytic mixture of the toy benchmark world.
    #[default]
    ToyWorld,
    /// A Gaussian mixture loaded from JSON at `model.path`.
    Mixture,
    /// A trained toy denoiser loaded from `model.path`.
    Mlp,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub path: Option<PathBuf>,
    pub world: WorldParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub eta: f64,
    pub spacing: Spacing,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            steps: 50,
            eta: 0.0,
            spacing: Spacing::Uniform,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Test fixture: perturb every model Jacobian so the check must fail.
    pub corrupt_vjp: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            seed: 0,
            tolerance: 1e-4,
            corrupt_vjp: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Ppm,
    Jsonl,
    Csv,
    Svg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub out_dir: PathBuf,
    pub formats: Vec<OutputFormat>,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            formats: vec![
                OutputFormat::Ppm,
                OutputFormat::Jsonl,
                OutputFormat::Csv,
                OutputFormat::Svg,
            ],
        }
    }
}

impl IoConfig {
    pub fn wants(&self, f: OutputFormat) -> bool {
        self.formats.contains(&f)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for benchmarks; 0 uses one per core.
    pub workers: usize,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub control: ControlSettings,
    pub task: TaskConfig,
    pub drf: DrfConfig,
    pub metrics: MetricConfig,
    pub bench: BenchConfig,
    pub gradcheck: GradCheckConfig,
    pub io: IoConfig,
    /// Settings of the `train` command for the toy denoiser.
    pub train: TrainConfig,
}

/// Parses a file into an untyped document; `.json` files are JSON, others TOML.
pub fn read_document(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| DrfError::io(path, e))?;
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text)
            .map_err(|e| DrfError::config(path.display().to_string(), e.to_string()))
    } else {
        toml::from_str(&text)
            .map_err(|e| DrfError::config(path.display().to_string(), e.to_string()))
    }
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back to a
/// bare string.
fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` override, creating intermediate tables.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| DrfError::config(assignment, "override must look like key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(DrfError::config(key, "empty path segment"));
    }
    let mut node = doc;
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            return Err(DrfError::config(parts[..i].join("."), "is not a table"));
        }
        let map = node.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            map.insert((*part).to_string(), parse_value(raw));
            return Ok(());
        }
        node = map
            .entry((*part).to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

impl RunConfig {
    /// Types a document, naming the offending field path on failure.
    pub fn from_document(doc: Value) -> Result<Self> {
        serde_path_to_error::deserialize::<_, RunConfig>(doc).map_err(|e| {
            let path = e.path().to_string();
            DrfError::config(
                if path == "." { "config".into() } else { path },
                e.into_inner().to_string(),
            )
        })
    }

    /// Loads `path` (or defaults), applies overrides in order, then validates.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => read_document(p)?,
            None => Value::Object(Map::new()),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg = Self::from_document(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let sched = self.build_schedule()?;
        let grid = self.build_grid(&sched)?;
        self.sampler().validate()?;
        self.drf.validate()?;
        if self.drf.enabled {
            self.drf.validate_for_grid(grid.len())?;
        }
        self.metrics.validate()?;
        for (field, v) in [
            ("control.struct_strength", self.control.struct_strength),
            ("control.app_strength", self.control.app_strength),
            ("control.struct_cutoff", self.control.struct_cutoff),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DrfError::config(
                    field,
                    format!("must lie in [0, 1], got {v}"),
                ));
            }
        }
        if self.model.kind != ModelKind::ToyWorld && self.model.path.is_none() {
            return Err(DrfError::config(
                "model.path",
                "required for mixture and mlp models",
            ));
        }
        if self.gradcheck.instances == 0 || !(self.gradcheck.tolerance > 0.0) {
            return Err(DrfError::config(
                "gradcheck",
                "needs instances >= 1 and a positive tolerance",
            ));
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration as canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| DrfError::Format(e.to_string()))
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        make_schedule(s.kind, s.train_steps, s.beta_min, s.beta_max).map_err(|e| match e {
            DrfError::Config { .. } => e,
            other => DrfError::config("schedule", other.to_string()),
        })
    }

    pub fn build_grid(&self, sched: &NoiseSchedule) -> Result<StepGrid> {
        make_step_grid(sched, self.sampler.steps, self.sampler.spacing)
    }

    pub fn sampler(&self) -> Sampler {
        Sampler {
            kind: self.sampler.kind,
            eta: self.sampler.eta,
        }
    }

    /// The toy world, always built: tasks are rendered from its palettes even when
    /// a different score model is configured.
    pub fn build_world(&self, sched: Arc<NoiseSchedule>) -> Result<ToyWorld> {
        build_toy_world(&self.model.world, sched)
    }

    /// The configured score model; `None` means the world's own mixture.
    pub fn load_model(&self, sched: Arc<NoiseSchedule>) -> Result<Option<Box<dyn ScoreModel>>> {
        let path = || self.model.path.clone().expect("validated");
        Ok(match self.model.kind {
            ModelKind::ToyWorld => None,
            ModelKind::Mixture => Some(Box::new(GaussianMixtureScore::load(path(), sched)?)),
            ModelKind::Mlp => Some(Box::new(ToyDenoiser::load(path(), sched)?)),
        })
    }

    pub fn task_spec(&self, world: &ToyWorld, task_seed: u64) -> TaskSpec {
        TaskSpec::procedural(
            world,
            &TaskConfig {
                seed: task_seed,
                ..self.task
            },
        )
    }
}
