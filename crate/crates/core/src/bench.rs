//! Procedural structure/appearance fusion benchmark.
//!
//! The toy world is a Gaussian mixture over 3x16x16 latents. The generation label
//! owns zero-mean two-level luminance shapes; the appearance label owns chroma-offset
//! noise textures. All components share the covariance `s2 I + U U^T`, where `U`
//! spans two constant chroma directions. A task pairs a structure shape with an
//! appearance palette; the controllable step anchors the shape early and nudges the
//! channel statistics toward the palette, and DRF refinement pulls harder on them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{
    run_controlled, write_ppm, ControlContext, ControlSettings, ToyControlledStep,
};
use crate::drf::{iter_weight, DrfConfig, DrfHook, GradientMode, WeightKind};
use crate::error::{DrfError, Result};
use crate::latent::{Latent, Shape};
use crate::metrics::{evaluate, MetricConfig, MetricReport};
use crate::plot::{bar_chart, line_chart};
use crate::sampler::{RunTrace, Sampler, SamplerKind, TraceRecord};
use crate::schedule::{NoiseSchedule, StepGrid};
use crate::score::{Condition, GaussianMixtureScore, ScoreModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Bar,
    LShape,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Disk,
        ShapeKind::Bar,
        ShapeKind::LShape,
        ShapeKind::Ring,
    ];
}

/// Pixel-centre rasterisation of a shape on an `h x w` canvas, row-major.
pub fn shape_mask(
    kind: ShapeKind,
    center: [f64; 2],
    radius: f64,
    rotation: f64,
    h: usize,
    w: usize,
) -> Vec<bool> {
    let (c, s) = (rotation.cos(), rotation.sin());
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 + 0.5 - center[0];
            let dy = y as f64 + 0.5 - center[1];
            let u = c * dx + s * dy;
            let v = -s * dx + c * dy;
            let r = radius;
            out.push(match kind {
                ShapeKind::Disk => u * u + v * v <= r * r,
                ShapeKind::Ring => {
                    let d = (u * u + v * v).sqrt();
                    d <= r && d >= 0.55 * r
                }
                ShapeKind::Bar => u.abs() <= r && v.abs() <= 0.4 * r,
                ShapeKind::LShape => {
                    (u.abs() <= r && v >= 0.3 * r && v <= r)
                        || (u >= -r && u <= -0.3 * r && v.abs() <= r)
                }
            });
        }
    }
    out
}

/// Zero-mean two-level luminance image of a mask with standard deviation `level`,
/// identical in all channels. Empty masks give zeros; full masks give `level`.
pub fn two_level(mask: &[bool], level: f64, shape: Shape) -> Result<Latent> {
    if mask.len() != shape.plane() {
        return Err(DrfError::Precondition(format!(
            "mask of {} pixels for a {shape} latent",
            mask.len()
        )));
    }
    let f = mask.iter().filter(|&&m| m).count() as f64 / mask.len().max(1) as f64;
    let (inside, outside) = if f <= 0.0 {
        (0.0, 0.0)
    } else if f >= 1.0 {
        (level, level)
    } else {
        (
            level * ((1.0 - f) / f).sqrt(),
            -level * (f / (1.0 - f)).sqrt(),
        )
    };
    let mut out = Latent::zeros(shape);
    for c in 0..shape.channels {
        for (v, &m) in out.channel_mut(c).iter_mut().zip(mask) {
            *v = if m { inside } else { outside };
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Amplitude of an added sinusoidal pattern before normalisation; 0 gives white noise.
    pub texture_amp: f64,
}

/// Seeded noise texture whose channels have the palette's mean and standard
/// deviation (before clipping to `[-1, 1]`).
pub fn render_texture(palette: &Palette, shape: Shape, seed: u64) -> Result<Latent> {
    if palette.mean.len() != shape.channels || palette.std.len() != shape.channels {
        return Err(DrfError::config(
            "task.palette",
            "one mean and one std per channel",
        ));
    }
    if palette.std.iter().any(|&s| !(s >= 0.0)) {
        return Err(DrfError::config("task.palette.std", "must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Latent::zeros(shape);
    for c in 0..shape.channels {
        let phase: [f64; 2] = [
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
        ];
        let mut n: Vec<f64> = (0..shape.plane())
            .map(|p| {
                let (y, x) = ((p / shape.width) as f64, (p % shape.width) as f64);
                let pattern = (std::f64::consts::TAU * x / 8.0 + phase[0]).sin()
                    + (std::f64::consts::TAU * y / 8.0 + phase[1]).sin();
                rng.sample::<f64, _>(StandardNormal) + palette.texture_amp * pattern
            })
            .collect();
        let (m, s) = crate::latent::mean_std(&n);
        for v in n.iter_mut() {
            *v = if s > 0.0 { (*v - m) / s } else { 0.0 };
        }
        for (o, v) in out.channel_mut(c).iter_mut().zip(&n) {
            *o = (palette.mean[c] + palette.std[c] * v).clamp(-1.0, 1.0);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldParams {
    pub height: usize,
    pub width: usize,
    /// Standard deviation of every component mean image.
    pub level: f64,
    pub shared_variance: f64,
    pub chroma_scale: f64,
    /// Half-width of the uniform draw of palette channel offsets.
    pub palette_chroma: f64,
    pub palettes: usize,
    pub radii: Vec<f64>,
    pub texture_amp: f64,
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            level: 0.5,
            shared_variance: 0.02,
            chroma_scale: 0.08,
            palette_chroma: 0.5,
            palettes: 6,
            radii: vec![3.5, 5.0],
            texture_amp: 0.0,
            seed: 7,
        }
    }
}

pub const GEN_LABEL: u32 = 0;
pub const APP_LABEL: u32 = 1;

pub struct ToyWorld {
    pub params: WorldParams,
    pub palettes: Vec<Palette>,
    /// Texture seed of each palette's mixture component.
    pub palette_seeds: Vec<u64>,
    pub model: GaussianMixtureScore,
}

impl ToyWorld {
    pub fn shape(&self) -> Shape {
        Shape::new(3, self.params.height, self.params.width)
    }
}

pub fn build_toy_world(params: &WorldParams, sched: Arc<NoiseSchedule>) -> Result<ToyWorld> {
    if params.palettes == 0 || params.radii.is_empty() {
        return Err(DrfError::config(
            "model.world",
            "needs at least one palette and one radius",
        ));
    }
    let shape = Shape::new(3, params.height, params.width);
    let center = [params.width as f64 / 2.0, params.height as f64 / 2.0];
    let mut means = Vec::new();
    for kind in ShapeKind::ALL {
        for &r in &params.radii {
            means.push(two_level(
                &shape_mask(kind, center, r, 0.0, params.height, params.width),
                params.level,
                shape,
            )?);
        }
    }
    let n_gen = means.len();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut palettes = Vec::new();
    let mut palette_seeds = Vec::new();
    for j in 0..params.palettes {
        let mut mean: Vec<f64> = (0..3)
            .map(|_| rng.random_range(-params.palette_chroma..=params.palette_chroma))
            .collect();
        let avg = mean.iter().sum::<f64>() / 3.0;
        mean.iter_mut().for_each(|m| *m -= avg);
        let palette = Palette {
            mean,
            std: vec![params.level; 3],
            texture_amp: params.texture_amp,
        };
        let seed = params.seed.wrapping_mul(1000).wrapping_add(100 + j as u64);
        means.push(render_texture(&palette, shape, seed)?);
        palettes.push(palette);
        palette_seeds.push(seed);
    }
    let mut labels = BTreeMap::new();
    labels.insert(GEN_LABEL, (0..n_gen).collect());
    labels.insert(APP_LABEL, (n_gen..means.len()).collect());
    let plane = shape.plane();
    let directions = [
        [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), 0.0],
        [1.0 / 6f64.sqrt(), 1.0 / 6f64.sqrt(), -2.0 / 6f64.sqrt()],
    ];
    let factors = directions
        .iter()
        .map(|d| {
            let data = (0..3)
                .flat_map(|c| std::iter::repeat_n(d[c] * params.chroma_scale, plane))
                .collect();
            Latent::from_vec(shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let model = GaussianMixtureScore::with_covariance(
        means,
        labels,
        params.shared_variance,
        factors,
        sched,
    )?;
    Ok(ToyWorld {
        params: params.clone(),
        palettes,
        palette_seeds,
        model,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub shape: ShapeKind,
    pub center: [f64; 2],
    pub radius: f64,
    pub rotation: f64,
    pub palette: Palette,
    pub gen_label: Condition,
    pub app_label: Condition,
    /// Seed of the appearance texture.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub seed: u64,
    /// Draw a new texture for the appearance reference instead of reusing the
    /// palette's mixture component.
    pub fresh_reference: bool,
    /// Largest centre offset from the canvas middle, in pixels of a 16-pixel canvas.
    pub jitter: f64,
    pub gen_label: u32,
    pub app_label: u32,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            fresh_reference: false,
            jitter: 1.0,
            gen_label: GEN_LABEL,
            app_label: APP_LABEL,
        }
    }
}

impl TaskSpec {
    /// Procedural task `task_seed`: shape kind and palette cycle with the seed; pose
    /// is drawn near the canvas centre.
    pub fn procedural(world: &ToyWorld, cfg: &TaskConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + cfg.seed);
        let (h, w) = (world.params.height as f64, world.params.width as f64);
        let center = [
            w / 2.0 + rng.random_range(-1.0..1.0) * cfg.jitter * w / 16.0,
            h / 2.0 + rng.random_range(-1.0..1.0) * cfg.jitter * h / 16.0,
        ];
        let radius = rng.random_range(4.0..5.5) * h.min(w) / 16.0;
        let rotation = rng.random_range(0.0..0.3);
        let j = (cfg.seed % world.palettes.len() as u64) as usize;
        let seed = if cfg.fresh_reference {
            rng.next_u64()
        } else {
            world.palette_seeds[j]
        };
        Self {
            shape: ShapeKind::ALL[(cfg.seed % 4) as usize],
            center,
            radius,
            rotation,
            palette: world.palettes[j].clone(),
            gen_label: Condition::label(cfg.gen_label),
            app_label: Condition::label(cfg.app_label),
            seed,
        }
    }
}

/// Renders the structure and appearance references of a task and packages them.
pub fn generate_task(
    spec: &TaskSpec,
    shape: Shape,
    level: f64,
    settings: ControlSettings,
) -> Result<(Latent, Latent, ControlContext)> {
    if !(spec.radius > 0.0) {
        return Err(DrfError::config("task.radius", "must be positive"));
    }
    let mask = shape_mask(
        spec.shape,
        spec.center,
        spec.radius,
        spec.rotation,
        shape.height,
        shape.width,
    );
    let z0_s = two_level(&mask, level, shape)?;
    let z0_a = render_texture(&spec.palette, shape, spec.seed)?;
    let ctx = ControlContext::new(
        z0_s.clone(),
        z0_a.clone(),
        spec.gen_label,
        spec.app_label,
        settings,
    )?;
    Ok((z0_s, z0_a, ctx))
}

/// One controlled sampling run, refined by DRF when enabled.
#[allow(clippy::too_many_arguments)]
pub fn run_pipeline(
    model: &dyn ScoreModel,
    sched: &NoiseSchedule,
    grid: &StepGrid,
    sampler: Sampler,
    drf: &DrfConfig,
    ctx: &ControlContext,
    seed: u64,
) -> Result<(Latent, RunTrace)> {
    sampler.validate()?;
    ctx.validate()?;
    if drf.enabled {
        drf.validate_for_grid(grid.len())?;
    } else {
        drf.validate()?;
    }
    let inner = ToyControlledStep {
        ctx,
        model,
        sched,
        sampler,
        omega: drf.omega,
        grid_len: grid.len(),
    };
    if !drf.enabled {
        return run_controlled(&inner, grid, ctx.shape(), seed);
    }
    let hook = DrfHook {
        inner: &inner,
        model,
        sched,
        ctx,
        cfg: drf.clone(),
        run_seed: seed,
    };
    run_controlled(&hook, grid, ctx.shape(), seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub sampler: Sampler,
    pub drf: DrfConfig,
}

/// Ablation axes; each present axis multiplies the variant list.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Axes {
    pub drf: Option<Vec<bool>>,
    pub af_only: Option<Vec<bool>>,
    #[serde(rename = "N", alias = "n")]
    pub n: Option<Vec<usize>>,
    pub window: Option<Vec<usize>>,
    pub weight_kind: Option<Vec<WeightKind>>,
    pub sampler: Option<Vec<SamplerKind>>,
    pub gradient_mode: Option<Vec<GradientMode>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub seeds: usize,
    pub seed_offset: u64,
    pub tasks: Vec<u64>,
    /// Prepend a DRF-off reference variant.
    pub baseline: bool,
    pub axes: Axes,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seeds: 50,
            seed_offset: 0,
            tasks: vec![0],
            baseline: true,
            axes: Axes::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub tasks: Vec<TaskSpec>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum AxisValue {
    Drf(bool),
    AfOnly(bool),
    N(usize),
    Window(usize),
    Weight(WeightKind),
    Sampler(SamplerKind),
    Gradient(GradientMode),
}

impl AxisValue {
    fn label(&self) -> String {
        match self {
            AxisValue::Drf(b) => format!("drf={}", if *b { "on" } else { "off" }),
            AxisValue::AfOnly(b) => format!("af_only={b}"),
            AxisValue::N(n) => format!("N={n}"),
            AxisValue::Window(w) => format!("window={w}"),
            AxisValue::Weight(k) => format!("weight={}", k.name()),
            AxisValue::Sampler(k) => format!("sampler={}", k.name()),
            AxisValue::Gradient(g) => format!("grad={}", g.name()),
        }
    }

    fn apply(&self, v: &mut Variant, grid_len: usize) {
        match *self {
            AxisValue::Drf(b) => v.drf.enabled = b,
            AxisValue::AfOnly(b) => {
                if b {
                    v.drf.rho = 0.0;
                }
            }
            AxisValue::N(n) => v.drf.n = n,
            AxisValue::Window(w) => {
                v.drf.window_len = w;
                if v.drf.window_skip + w > grid_len {
                    v.drf.window_skip = grid_len.saturating_sub(w);
                }
            }
            AxisValue::Weight(k) => v.drf.weight_kind = k,
            AxisValue::Sampler(k) => v.sampler.kind = k,
            AxisValue::Gradient(g) => v.drf.gradient_mode = g,
        }
    }
}

impl Axes {
    fn expanded(&self) -> Vec<Vec<AxisValue>> {
        fn axis<T: Copy>(vals: &Option<Vec<T>>, f: fn(T) -> AxisValue) -> Option<Vec<AxisValue>> {
            vals.as_ref().map(|v| v.iter().map(|&x| f(x)).collect())
        }
        let axes: Vec<Vec<AxisValue>> = [
            axis(&self.drf, AxisValue::Drf),
            axis(&self.af_only, AxisValue::AfOnly),
            axis(&self.n, AxisValue::N),
            axis(&self.window, AxisValue::Window),
            axis(&self.weight_kind, AxisValue::Weight),
            axis(&self.sampler, AxisValue::Sampler),
            axis(&self.gradient_mode, AxisValue::Gradient),
        ]
        .into_iter()
        .flatten()
        .collect();
        let mut cells: Vec<Vec<AxisValue>> = vec![Vec::new()];
        for options in axes {
            cells = cells
                .into_iter()
                .flat_map(|cell| {
                    options.iter().map(move |o| {
                        let mut c = cell.clone();
                        c.push(*o);
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

impl ExperimentPlan {
    /// Expands the ablation axes around a base configuration. A window longer than
    /// the room left after `window_skip` starts earlier so that it fits the grid.
    pub fn from_axes(
        base_sampler: Sampler,
        base_drf: &DrfConfig,
        grid_len: usize,
        bench: &BenchConfig,
        tasks: Vec<TaskSpec>,
    ) -> Self {
        let mut variants = Vec::new();
        if bench.baseline {
            variants.push(Variant {
                name: "baseline".into(),
                sampler: base_sampler,
                drf: DrfConfig {
                    enabled: false,
                    ..base_drf.clone()
                },
            });
        }
        for cell in bench.axes.expanded() {
            let mut v = Variant {
                name: String::new(),
                sampler: base_sampler,
                drf: base_drf.clone(),
            };
            for a in &cell {
                a.apply(&mut v, grid_len);
            }
            v.name = if cell.is_empty() {
                "drf".into()
            } else {
                cell.iter()
                    .map(AxisValue::label)
                    .collect::<Vec<_>>()
                    .join(",")
            };
            variants.push(v);
        }
        let seeds = (0..bench.seeds as u64)
            .map(|i| bench.seed_offset + i)
            .collect();
        Self {
            tasks,
            variants,
            seeds,
        }
    }

    pub fn cells(&self) -> usize {
        self.tasks.len() * self.variants.len() * self.seeds.len()
    }

    pub fn validate(&self, grid_len: usize) -> Result<()> {
        for v in &self.variants {
            v.sampler.validate()?;
            if v.drf.enabled {
                v.drf
                    .validate_for_grid(grid_len)
                    .map_err(|e| e.at(format!("variant {}", v.name)))?;
            } else {
                v.drf.validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub variant: String,
    pub task: usize,
    pub seed: u64,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
    pub runtime_ms: f64,
    pub refine_calls: usize,
    #[serde(skip)]
    pub output: Option<Latent>,
    #[serde(skip)]
    pub trace: Option<RunTrace>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Quartiles {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Linear-interpolation quantile of unsorted data; NaN when empty.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Self {
        Self {
            median: quantile(values, 0.5),
            q1: quantile(values, 0.25),
            q3: quantile(values, 0.75),
        }
    }
}

/// Per-seed comparison of appearance distance against the reference variant.
#[derive(Clone, Debug, Serialize)]
pub struct PairedDelta {
    pub reference: String,
    pub pairs: usize,
    /// Quartiles of `d(variant) - d(reference)`.
    pub delta: Quartiles,
    /// Fraction of pairs with `d(variant) <= d(reference)`.
    pub not_worse_fraction: f64,
    pub median_relative_reduction: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantSummary {
    pub name: String,
    pub sampler: SamplerKind,
    pub drf_enabled: bool,
    pub runs: usize,
    pub failures: usize,
    pub struct_iou: Quartiles,
    pub app_stat_dist: Quartiles,
    pub self_sim_dist: Quartiles,
    pub success_rate: f64,
    pub runtime_ms: Quartiles,
    pub total_runtime_ms: f64,
    pub paired: Option<PairedDelta>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentSummary {
    pub seeds: Vec<u64>,
    pub tasks: usize,
    pub variants: Vec<VariantSummary>,
    /// Variant names ordered by median appearance distance, best first.
    pub rankings: Vec<String>,
    pub failures: Vec<String>,
    #[serde(skip)]
    pub runs: Vec<RunRecord>,
}

impl ExperimentSummary {
    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.name == name)
    }

    /// Successful runs of one variant, in plan order.
    pub fn runs_of<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a RunRecord> + 'a {
        self.runs
            .iter()
            .filter(move |r| r.variant == name && r.report.is_some())
    }
}

/// Artifact switches of [`run_experiment`].
#[derive(Clone, Debug, Default)]
pub struct OutputOptions {
    pub dir: Option<PathBuf>,
    pub ppm: bool,
    pub jsonl: bool,
    pub svg: bool,
}

pub struct ExperimentEnv<'a> {
    pub model: &'a dyn ScoreModel,
    pub sched: &'a NoiseSchedule,
    pub grid: &'a StepGrid,
    pub shape: Shape,
    pub level: f64,
    pub control: ControlSettings,
    pub metrics: MetricConfig,
    pub workers: usize,
}

fn run_id(vi: usize, name: &str, task: usize, seed: u64) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("v{vi:02}_{clean}_t{task}_s{seed}")
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| DrfError::io(path, e))
}

pub const RESULTS_HEADER: &str =
    "seed,config_id,task,struct_iou,app_stat_dist,self_sim_dist,success";

/// Runs every (variant, task, seed) cell of the plan on a worker pool, then
/// aggregates serially. Failed runs are recorded and skipped; more than 10% failures
/// abort the plan.
pub fn run_experiment(
    plan: &ExperimentPlan,
    env: &ExperimentEnv<'_>,
    out: &OutputOptions,
) -> Result<ExperimentSummary> {
    plan.validate(env.grid.len())?;
    env.metrics.validate()?;
    let contexts = plan
        .tasks
        .iter()
        .map(|t| generate_task(t, env.shape, env.level, env.control).map(|r| r.2))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = &out.dir {
        fs::create_dir_all(dir).map_err(|e| DrfError::io(dir, e))?;
    }
    let cells: Vec<(usize, usize, u64)> = (0..plan.variants.len())
        .flat_map(|v| {
            (0..plan.tasks.len()).flat_map(move |t| plan.seeds.iter().map(move |&s| (v, t, s)))
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(env.workers)
        .build()
        .map_err(|e| DrfError::config("bench.workers", e.to_string()))?;
    let run_cell = |&(vi, ti, seed): &(usize, usize, u64)| -> RunRecord {
        let variant = &plan.variants[vi];
        let ctx = &contexts[ti];
        let start = Instant::now();
        let result = run_pipeline(
            env.model,
            env.sched,
            env.grid,
            variant.sampler,
            &variant.drf,
            ctx,
            seed,
        )
        .and_then(|(z, trace)| {
            let report = evaluate(&z, &ctx.z0_structure, &ctx.z0_appearance, &env.metrics)?;
            Ok((z, trace, report))
        });
        let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
        let mut record = RunRecord {
            variant: variant.name.clone(),
            task: ti,
            seed,
            report: None,
            error: None,
            runtime_ms,
            refine_calls: 0,
            output: None,
            trace: None,
        };
        match result {
            Ok((z, trace, report)) => {
                if let Some(dir) = &out.dir {
                    let run_dir = dir.join("runs").join(run_id(vi, &variant.name, ti, seed));
                    let written = fs::create_dir_all(&run_dir)
                        .map_err(|e| DrfError::io(&run_dir, e))
                        .and_then(|_| {
                            if out.jsonl {
                                write_file(&run_dir.join("trace.jsonl"), trace.to_jsonl()?)?;
                            }
                            if out.ppm {
                                write_ppm(&run_dir.join("out.ppm"), &z)?;
                            }
                            Ok(())
                        });
                    if let Err(e) = written {
                        record.error = Some(e.to_string());
                        return record;
                    }
                }
                record.refine_calls = trace.refine_count();
                record.report = Some(report);
                record.output = Some(z);
                record.trace = Some(trace);
            }
            Err(e) => {
                log::warn!("run {} failed: {e}", run_id(vi, &variant.name, ti, seed));
                record.error = Some(e.to_string());
            }
        }
        record
    };
    let runs: Vec<RunRecord> = pool.install(|| cells.par_iter().map(run_cell).collect());

    let failures: Vec<String> = runs
        .iter()
        .filter_map(|r| {
            r.error
                .as_ref()
                .map(|e| format!("{} task {} seed {}: {e}", r.variant, r.task, r.seed))
        })
        .collect();
    if !runs.is_empty() && failures.len() * 10 > runs.len() {
        return Err(DrfError::numeric(format!(
            "{} of {} runs failed; first: {}",
            failures.len(),
            runs.len(),
            failures[0]
        )));
    }

    let reference = plan.variants.first().map(|v| v.name.clone());
    let dist_of = |name: &str| -> BTreeMap<(usize, u64), f64> {
        runs.iter()
            .filter(|r| r.variant == name)
            .filter_map(|r| r.report.map(|m| ((r.task, r.seed), m.app_stat_dist)))
            .collect()
    };
    let ref_dists = reference.as_deref().map(dist_of).unwrap_or_default();
    let mut variants = Vec::new();
    for v in &plan.variants {
        let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.variant == v.name).collect();
        let ok: Vec<MetricReport> = mine.iter().filter_map(|r| r.report).collect();
        let col = |f: fn(&MetricReport) -> f64| ok.iter().map(f).collect::<Vec<_>>();
        let times: Vec<f64> = mine.iter().map(|r| r.runtime_ms).collect();
        let paired = match &reference {
            Some(rname) if *rname != v.name => {
                let d = dist_of(&v.name);
                let pairs: Vec<(f64, f64)> = d
                    .iter()
                    .filter_map(|(k, &x)| ref_dists.get(k).map(|&b| (x, b)))
                    .collect();
                let deltas: Vec<f64> = pairs.iter().map(|(x, b)| x - b).collect();
                let rel: Vec<f64> = pairs
                    .iter()
                    .map(|(x, b)| if *b > 0.0 { (b - x) / b } else { 0.0 })
                    .collect();
                Some(PairedDelta {
                    reference: rname.clone(),
                    pairs: pairs.len(),
                    delta: Quartiles::of(&deltas),
                    not_worse_fraction: if pairs.is_empty() {
                        f64::NAN
                    } else {
                        pairs.iter().filter(|(x, b)| x <= b).count() as f64 / pairs.len() as f64
                    },
                    median_relative_reduction: median(&rel),
                })
            }
            _ => None,
        };
        variants.push(VariantSummary {
            name: v.name.clone(),
            sampler: v.sampler.kind,
            drf_enabled: v.drf.enabled,
            runs: mine.len(),
            failures: mine.len() - ok.len(),
            struct_iou: Quartiles::of(&col(|m| m.struct_iou)),
            app_stat_dist: Quartiles::of(&col(|m| m.app_stat_dist)),
            self_sim_dist: Quartiles::of(&col(|m| m.self_sim_dist)),
            success_rate: if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().filter(|m| m.success).count() as f64 / ok.len() as f64
            },
            runtime_ms: Quartiles::of(&times),
            total_runtime_ms: times.iter().sum(),
            paired,
        });
    }
    let mut rankings: Vec<(String, f64)> = variants
        .iter()
        .map(|v| (v.name.clone(), v.app_stat_dist.median))
        .collect();
    rankings.sort_by(|a, b| a.1.total_cmp(&b.1));
    let summary = ExperimentSummary {
        seeds: plan.seeds.clone(),
        tasks: plan.tasks.len(),
        variants,
        rankings: rankings.into_iter().map(|r| r.0).collect(),
        failures,
        runs,
    };
    if let Some(dir) = &out.dir {
        write_outputs(dir, &summary, plan, out)?;
    }
    Ok(summary)
}

/// The per-run CSV; contains no timing so that reruns are byte-identical.
pub fn results_csv(summary: &ExperimentSummary) -> String {
    let mut s = String::from(RESULTS_HEADER);
    s.push('\n');
    for r in &summary.runs {
        if let Some(m) = &r.report {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.seed,
                r.variant.replace(',', ";"),
                r.task,
                m.struct_iou,
                m.app_stat_dist,
                m.self_sim_dist,
                m.success
            ));
        }
    }
    s
}

pub const SUMMARY_HEADER: &str = "config_id,sampler,drf,runs,failures,median_struct_iou,median_app_stat_dist,\
q1_app_stat_dist,q3_app_stat_dist,median_self_sim_dist,success_rate,not_worse_fraction,median_relative_reduction,\
median_runtime_ms,total_runtime_ms";

/// One aggregate row per variant, including wall-clock columns.
pub fn summary_csv(summary: &ExperimentSummary) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for v in &summary.variants {
        let (nw, rr) = v.paired.as_ref().map_or((f64::NAN, f64::NAN), |p| {
            (p.not_worse_fraction, p.median_relative_reduction)
        });
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3},{:.3}\n",
            v.name.replace(',', ";"),
            v.sampler.name(),
            v.drf_enabled,
            v.runs,
            v.failures,
            v.struct_iou.median,
            v.app_stat_dist.median,
            v.app_stat_dist.q1,
            v.app_stat_dist.q3,
            v.self_sim_dist.median,
            v.success_rate,
            nw,
            rr,
            v.runtime_ms.median,
            v.total_runtime_ms
        ));
    }
    s
}

fn write_outputs(
    dir: &Path,
    summary: &ExperimentSummary,
    plan: &ExperimentPlan,
    out: &OutputOptions,
) -> Result<()> {
    write_file(&dir.join("results.csv"), results_csv(summary))?;
    write_file(&dir.join("summary.csv"), summary_csv(summary))?;
    let mut timing = String::from("seed,config_id,task,runtime_ms,refine_calls\n");
    for r in &summary.runs {
        timing.push_str(&format!(
            "{},{},{},{:.3},{}\n",
            r.seed,
            r.variant.replace(',', ";"),
            r.task,
            r.runtime_ms,
            r.refine_calls
        ));
    }
    write_file(&dir.join("timing.csv"), timing)?;
    write_file(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(summary)?,
    )?;
    if out.svg {
        let plots = dir.join("plots");
        fs::create_dir_all(&plots).map_err(|e| DrfError::io(&plots, e))?;
        let n = 10;
        let weights: Vec<(String, Vec<(f64, f64)>)> = WeightKind::ALL
            .iter()
            .map(|&k| {
                let k_exp = plan.variants.first().map_or(5.0, |v| v.drf.k);
                (
                    k.name().to_string(),
                    (0..n)
                        .map(|i| (i as f64, iter_weight(i, n, k_exp, k)))
                        .collect(),
                )
            })
            .collect();
        write_file(
            &plots.join("weights.svg"),
            line_chart("Iteration weight schedules", "iteration", "w", &weights),
        )?;
        let bars: Vec<(String, f64)> = summary
            .variants
            .iter()
            .map(|v| (v.name.clone(), v.app_stat_dist.median))
            .collect();
        write_file(
            &plots.join("ablation.svg"),
            bar_chart("Median appearance distance", "distance", &bars),
        )?;
        let mut curves = Vec::new();
        for v in &plan.variants {
            let mut per_index: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
            for r in summary.runs_of(&v.name) {
                let Some(trace) = &r.trace else { continue };
                let mut last: BTreeMap<usize, f64> = BTreeMap::new();
                for rec in trace.iterations() {
                    if let TraceRecord::Iteration { index, l_app, .. } = rec {
                        last.insert(*index, *l_app);
                    }
                }
                for (i, l) in last {
                    let e = per_index.entry(i).or_insert((0.0, 0));
                    e.0 += l;
                    e.1 += 1;
                }
            }
            if !per_index.is_empty() {
                curves.push((
                    v.name.clone(),
                    per_index
                        .into_iter()
                        .map(|(i, (s, c))| (i as f64, s / c as f64))
                        .collect(),
                ));
            }
        }
        write_file(
            &plots.join("loss.svg"),
            line_chart(
                "Final appearance loss per refined step",
                "grid step",
                "L_app",
                &curves,
            ),
        )?;
    }
    Ok(())
}
