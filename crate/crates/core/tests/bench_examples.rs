//! Worked examples for the toy world, the task generator and the experiment runner.

use std::sync::Arc;

use drf_core::bench::{
    generate_task, render_texture, results_csv, run_experiment, run_pipeline, shape_mask, Axes,
    BenchConfig, ExperimentEnv, ExperimentPlan, OutputOptions, Palette, ShapeKind, ToyWorld,
    RESULTS_HEADER,
};
use drf_core::config::RunConfig;
use drf_core::control::{run_controlled, ToyControlledStep};
use drf_core::drf::DrfConfig;
use drf_core::schedule::{make_step_grid, Spacing, StepGrid};
use drf_core::{Latent, NoiseSchedule, Shape};

struct Fixture {
    cfg: RunConfig,
    sched: Arc<NoiseSchedule>,
    world: ToyWorld,
}

impl Fixture {
    fn new() -> Self {
        let cfg = RunConfig::default();
        let sched = Arc::new(cfg.build_schedule().unwrap());
        let world = cfg.build_world(sched.clone()).unwrap();
        Self { cfg, sched, world }
    }

    fn env<'a>(&'a self, grid: &'a StepGrid, workers: usize) -> ExperimentEnv<'a> {
        ExperimentEnv {
            model: &self.world.model,
            sched: &self.sched,
            grid,
            shape: self.world.shape(),
            level: self.world.params.level,
            control: self.cfg.control,
            metrics: self.cfg.metrics,
            workers,
        }
    }

    fn plan(&self, grid: &StepGrid, drf: &DrfConfig, bench: &BenchConfig) -> ExperimentPlan {
        let tasks = bench
            .tasks
            .iter()
            .map(|&t| self.cfg.task_spec(&self.world, t))
            .collect();
        ExperimentPlan::from_axes(self.cfg.sampler(), drf, grid.len(), bench, tasks)
    }
}

#[test]
fn disk_area_matches_the_continuous_area() {
    for (center, r) in [([8.3, 7.6], 4.0), ([8.3, 7.6], 5.5), ([7.5, 8.5], 6.0)] {
        let area = shape_mask(ShapeKind::Disk, center, r, 0.3, 16, 16)
            .iter()
            .filter(|&&m| m)
            .count() as f64;
        let expect = (std::f64::consts::PI * r * r).round();
        assert!((area - expect).abs() <= 1.0, "r = {r}: {area} vs {expect}");
    }
}

#[test]
fn zero_palette_renders_a_zero_latent() {
    let palette = Palette {
        mean: vec![0.0; 3],
        std: vec![0.0; 3],
        texture_amp: 0.7,
    };
    let z = render_texture(&palette, Shape::new(3, 16, 16), 12).unwrap();
    assert_eq!(z, Latent::zeros(Shape::new(3, 16, 16)));
}

#[test]
fn task_generation_and_runs_are_deterministic() {
    let f = Fixture::new();
    let grid = make_step_grid(&f.sched, 20, Spacing::Uniform).unwrap();
    let spec = f.cfg.task_spec(&f.world, 3);
    let a = generate_task(&spec, f.world.shape(), f.world.params.level, f.cfg.control).unwrap();
    let b = generate_task(&spec, f.world.shape(), f.world.params.level, f.cfg.control).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    let drf = DrfConfig {
        window_skip: 2,
        window_len: 6,
        ..f.cfg.drf.clone()
    };
    let run = || {
        run_pipeline(
            &f.world.model,
            &f.sched,
            &grid,
            f.cfg.sampler(),
            &drf,
            &a.2,
            8,
        )
        .unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn drf_off_plan_is_plain_controlled_sampling() {
    let f = Fixture::new();
    let grid = make_step_grid(&f.sched, 12, Spacing::Uniform).unwrap();
    let bench = BenchConfig {
        seeds: 3,
        baseline: false,
        axes: Axes {
            drf: Some(vec![false]),
            ..Axes::default()
        },
        ..BenchConfig::default()
    };
    let plan = f.plan(&grid, &f.cfg.drf, &bench);
    let summary = run_experiment(&plan, &f.env(&grid, 2), &OutputOptions::default()).unwrap();
    let (_, _, ctx) = generate_task(
        &plan.tasks[0],
        f.world.shape(),
        f.world.params.level,
        f.cfg.control,
    )
    .unwrap();
    let step = ToyControlledStep {
        ctx: &ctx,
        model: &f.world.model,
        sched: &f.sched,
        sampler: f.cfg.sampler(),
        omega: f.cfg.drf.omega,
        grid_len: grid.len(),
    };
    let runs: Vec<_> = summary.runs_of("drf=off").collect();
    assert_eq!(runs.len(), 3);
    for r in runs {
        let (z, trace) = run_controlled(&step, &grid, f.world.shape(), r.seed).unwrap();
        assert_eq!(r.output.as_ref(), Some(&z));
        assert_eq!(r.trace.as_ref(), Some(&trace));
        assert_eq!(r.refine_calls, 0);
    }
}

#[test]
fn empty_plan_writes_only_the_header() {
    let f = Fixture::new();
    let grid = make_step_grid(&f.sched, 10, Spacing::Uniform).unwrap();
    let bench = BenchConfig {
        seeds: 0,
        ..BenchConfig::default()
    };
    let drf = DrfConfig {
        window_skip: 0,
        window_len: 5,
        ..f.cfg.drf.clone()
    };
    let plan = f.plan(&grid, &drf, &bench);
    let dir = tempfile::tempdir().unwrap();
    let out = OutputOptions {
        dir: Some(dir.path().to_path_buf()),
        ..OutputOptions::default()
    };
    let summary = run_experiment(&plan, &f.env(&grid, 1), &out).unwrap();
    assert!(summary.runs.is_empty() && summary.failures.is_empty());
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(csv.trim_end(), RESULTS_HEADER);
}

#[test]
fn variants_are_paired_on_seeds_and_results_reproduce() {
    let f = Fixture::new();
    let grid = make_step_grid(&f.sched, 10, Spacing::Uniform).unwrap();
    let drf = DrfConfig {
        window_skip: 1,
        window_len: 4,
        n: 2,
        ..f.cfg.drf.clone()
    };
    let bench = BenchConfig {
        seeds: 4,
        seed_offset: 10,
        tasks: vec![0, 1],
        ..BenchConfig::default()
    };
    let plan = f.plan(&grid, &drf, &bench);
    let first = run_experiment(&plan, &f.env(&grid, 1), &OutputOptions::default()).unwrap();
    let keys = |name: &str| {
        first
            .runs_of(name)
            .map(|r| (r.task, r.seed))
            .collect::<Vec<_>>()
    };
    assert_eq!(keys("baseline"), keys("drf"));
    assert_eq!(keys("drf").len(), 8);
    assert_eq!(
        first.variant("drf").unwrap().paired.as_ref().unwrap().pairs,
        8
    );

    let second = run_experiment(&plan, &f.env(&grid, 3), &OutputOptions::default()).unwrap();
    assert_eq!(results_csv(&first), results_csv(&second));
}

#[test]
fn a_window_over_the_whole_grid_refines_every_step() {
    let f = Fixture::new();
    let grid = f.cfg.build_grid(&f.sched).unwrap();
    assert_eq!(grid.len(), 50);
    let drf = DrfConfig {
        window_skip: 0,
        window_len: 50,
        n: 1,
        ..f.cfg.drf.clone()
    };
    let spec = f.cfg.task_spec(&f.world, 0);
    let (_, _, ctx) =
        generate_task(&spec, f.world.shape(), f.world.params.level, f.cfg.control).unwrap();
    let (z, trace) = run_pipeline(
        &f.world.model,
        &f.sched,
        &grid,
        f.cfg.sampler(),
        &drf,
        &ctx,
        0,
    )
    .unwrap();
    assert!(z.is_finite());
    assert_eq!(trace.refine_count(), 50);
}
