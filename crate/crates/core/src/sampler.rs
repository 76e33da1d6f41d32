//! Reverse-process solvers behind one per-step interface.
//!
//! All kinds work in the data-prediction form: a step receives the noise estimate
//! `eps_hat`, turns it into `x0_hat = (z - sqrt(1 - a) eps_hat) / sqrt(a)` and moves
//! to `t_prev`. The DPM-Solver kinds use log-SNR coordinates
//! `lambda = log(alpha / sigma)` with `alpha = sqrt(a)`, `sigma = sqrt(1 - a)`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DrfError, Result};
use crate::latent::{Latent, Shape};
use crate::schedule::{GridStep, NoiseSchedule, StepGrid};
use crate::score::{cfg_predict, Condition, ScoreModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Ddim,
    /// DPM-Solver++(2S): single-step second order with one intermediate evaluation.
    #[serde(rename = "dpm_solver_2s")]
    DpmSolver2s,
    /// DPM-Solver++(2M): multistep second order reusing the previous data prediction.
    #[serde(rename = "dpm_solver_pp_2m")]
    DpmSolverPp2m,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 3] = [
        SamplerKind::Ddim,
        SamplerKind::DpmSolver2s,
        SamplerKind::DpmSolverPp2m,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SamplerKind::Ddim => "ddim",
            SamplerKind::DpmSolver2s => "dpm_solver_2s",
            SamplerKind::DpmSolverPp2m => "dpm_solver_pp_2m",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sampler {
    pub kind: SamplerKind,
    /// DDIM stochasticity in `[0, 1]`; ignored by the other kinds.
    pub eta: f64,
}

impl Default for Sampler {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            eta: 0.0,
        }
    }
}

impl Sampler {
    pub fn new(kind: SamplerKind) -> Self {
        Self { kind, eta: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(DrfError::config(
                "sampler.eta",
                format!("must lie in [0, 1], got {}", self.eta),
            ));
        }
        Ok(())
    }
}

/// Multistep history. Holds at most one previous data prediction (order 2).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SamplerState {
    prev: Option<(usize, Latent)>,
    /// Number of completed steps.
    pub position: usize,
}

impl SamplerState {
    pub fn history_len(&self) -> usize {
        usize::from(self.prev.is_some())
    }

    pub fn clear_history(&mut self) {
        self.prev = None;
    }
}

/// Noise prediction at an arbitrary `(z, t)`, used by single-step solvers for their
/// intermediate evaluation.
pub type EpsEval<'a> = dyn FnMut(&Latent, usize) -> Result<Latent> + 'a;

fn data_prediction(z: &Latent, eps: &Latent, a: f64) -> Result<Latent> {
    if a <= 0.0 {
        return Err(DrfError::Singularity {
            context: "alpha_bar = 0 in data prediction".into(),
        });
    }
    z.lin_comb(1.0 / a.sqrt(), eps, -(1.0 - a).sqrt() / a.sqrt())
}

/// First-order data-prediction update between two noise levels; equal to DDIM with eta = 0.
fn first_order(z: &Latent, x0: &Latent, a_t: f64, a_s: f64) -> Result<Latent> {
    if a_s >= 1.0 {
        return Ok(x0.clone());
    }
    let sigma_ratio = ((1.0 - a_s) / (1.0 - a_t)).sqrt();
    // alpha_s (1 - e^{-h}) = alpha_s - alpha_t sigma_s / sigma_t
    z.lin_comb(sigma_ratio, x0, a_s.sqrt() - a_t.sqrt() * sigma_ratio)
}

/// Second-order update from a combined data estimate `d`.
fn exp_update(z: &Latent, d: &Latent, sched: &NoiseSchedule, t: usize, s: usize) -> Result<Latent> {
    let (a_t, a_s) = (sched.alpha_bar(t), sched.alpha_bar(s));
    let h = sched.lambda(s) - sched.lambda(t);
    let sigma_ratio = ((1.0 - a_s) / (1.0 - a_t)).sqrt();
    z.lin_comb(sigma_ratio, d, -a_s.sqrt() * (-h).exp_m1())
}

/// Integer timestep strictly between `t_prev` and `t` whose log-SNR is closest to
/// the midpoint, or `None` when the gap has no interior point.
fn midpoint_timestep(sched: &NoiseSchedule, t: usize, t_prev: usize) -> Option<usize> {
    if t_prev == 0 || t - t_prev < 2 {
        return None;
    }
    let target = 0.5 * (sched.lambda(t) + sched.lambda(t_prev));
    (t_prev + 1..t).min_by(|&a, &b| {
        (sched.lambda(a) - target)
            .abs()
            .total_cmp(&(sched.lambda(b) - target).abs())
    })
}

/// Advances `z_t` to `t_prev` given the noise estimate `eps_hat`.
///
/// `midpoint` is required by [`SamplerKind::DpmSolver2s`] and ignored otherwise.
/// The last step of any grid (`t_prev = 0`) returns the data prediction.
#[allow(clippy::too_many_arguments)]
pub fn sampler_step<R: Rng + ?Sized>(
    sampler: &Sampler,
    state: &mut SamplerState,
    z_t: &Latent,
    t: usize,
    t_prev: usize,
    eps_hat: &Latent,
    sched: &NoiseSchedule,
    rng: &mut R,
    midpoint: Option<&mut EpsEval<'_>>,
) -> Result<Latent> {
    sched.check_t(t)?;
    sched.check_t(t_prev)?;
    if t <= t_prev {
        return Err(DrfError::Precondition(format!(
            "step must descend, got {t} -> {t_prev}"
        )));
    }
    z_t.ensure_same_shape(eps_hat)?;
    eps_hat.ensure_finite(|| format!("non-finite noise estimate at t = {t}"))?;
    let a_t = sched.alpha_bar(t);
    let a_s = sched.alpha_bar(t_prev);
    let x0 = data_prediction(z_t, eps_hat, a_t)?;
    let out = match sampler.kind {
        SamplerKind::Ddim => {
            let sigma = sampler.eta * ((1.0 - a_s) / (1.0 - a_t) * (1.0 - a_t / a_s)).sqrt();
            let dir = (1.0 - a_s - sigma * sigma).max(0.0).sqrt();
            let mut z = x0.lin_comb(a_s.sqrt(), eps_hat, dir)?;
            if sigma > 0.0 {
                for v in z.as_mut_slice() {
                    *v += sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            z
        }
        SamplerKind::DpmSolverPp2m => {
            let z = match (&state.prev, t_prev) {
                (Some((t_last, d_last)), s) if s > 0 => {
                    let h = sched.lambda(s) - sched.lambda(t);
                    let r = (sched.lambda(t) - sched.lambda(*t_last)) / h;
                    let d = x0.lin_comb(1.0 + 0.5 / r, d_last, -0.5 / r)?;
                    exp_update(z_t, &d, sched, t, s)?
                }
                _ => first_order(z_t, &x0, a_t, a_s)?,
            };
            state.prev = Some((t, x0));
            z
        }
        SamplerKind::DpmSolver2s => match midpoint_timestep(sched, t, t_prev) {
            None => first_order(z_t, &x0, a_t, a_s)?,
            Some(s) => {
                let eval = midpoint.ok_or_else(|| {
                    DrfError::Precondition(
                        "dpm_solver_2s needs an intermediate model evaluation".into(),
                    )
                })?;
                let h = sched.lambda(t_prev) - sched.lambda(t);
                let r1 = (sched.lambda(s) - sched.lambda(t)) / h;
                let z_mid = first_order(z_t, &x0, a_t, sched.alpha_bar(s))?;
                let eps_mid = eval(&z_mid, s)?;
                z_mid.ensure_same_shape(&eps_mid)?;
                eps_mid.ensure_finite(|| format!("non-finite intermediate estimate at t = {s}"))?;
                let x0_mid = data_prediction(&z_mid, &eps_mid, sched.alpha_bar(s))?;
                let d = x0.lin_comb(1.0 - 0.5 / r1, &x0_mid, 0.5 / r1)?;
                exp_update(z_t, &d, sched, t, t_prev)?
            }
        },
    };
    state.position += 1;
    out.ensure_finite(|| format!("non-finite latent after step {t} -> {t_prev}"))?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceRecord {
    Start {
        seed: u64,
        steps: usize,
    },
    /// State after completing grid step `index`.
    Step {
        index: usize,
        t: usize,
        t_prev: usize,
        z_norm: f64,
        z_mean: f64,
        z_std: f64,
    },
    /// One refinement invocation at grid step `index`; `noise_norm` is the norm of the
    /// initial injection noise draw.
    Refine {
        index: usize,
        t: usize,
        t_prev: usize,
        iterations: usize,
        noise_norm: f64,
    },
    Iteration {
        index: usize,
        t: usize,
        iteration: usize,
        l_app: f64,
        l_gen: Option<f64>,
        weight: f64,
        l_drf: f64,
        eps_norm: f64,
        grad_norm: f64,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
}

impl RunTrace {
    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    pub fn seed(&self) -> Option<u64> {
        self.records.iter().find_map(|r| match r {
            TraceRecord::Start { seed, .. } => Some(*seed),
            _ => None,
        })
    }

    pub fn refine_count(&self) -> usize {
        self.records
            .iter()
            .filter(|r| matches!(r, TraceRecord::Refine { .. }))
            .count()
    }

    pub fn iterations(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records
            .iter()
            .filter(|r| matches!(r, TraceRecord::Iteration { .. }))
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }

    /// One row per grid step with the refinement losses of that step, if any.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "index,t,t_prev,z_norm,z_mean,z_std,drf_iterations,l_app_first,l_app_last\n",
        );
        for r in &self.records {
            if let TraceRecord::Step {
                index,
                t,
                t_prev,
                z_norm,
                z_mean,
                z_std,
            } = r
            {
                let losses: Vec<f64> = self
                    .iterations()
                    .filter_map(|it| match it {
                        TraceRecord::Iteration {
                            index: i, l_app, ..
                        } if i == index => Some(*l_app),
                        _ => None,
                    })
                    .collect();
                let fmt = |v: Option<&f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{index},{t},{t_prev},{z_norm:e},{z_mean:e},{z_std:e},{},{},{}",
                    losses.len(),
                    fmt(losses.first()),
                    fmt(losses.last())
                );
            }
        }
        out
    }
}

/// Per-step callback of [`sample`], run between the noise estimate and the advance.
/// It may rewrite `eps_hat`.
pub trait StepHook {
    fn on_step(
        &mut self,
        step: GridStep,
        z_t: &Latent,
        eps_hat: &mut Latent,
        trace: &mut RunTrace,
    ) -> Result<()>;
}

/// Shared outer loop: seeds the run, draws `z_T`, applies `step` over the grid and
/// records per-step statistics. Errors are wrapped with the failing step.
pub fn drive<F>(grid: &StepGrid, shape: Shape, seed: u64, mut step: F) -> Result<(Latent, RunTrace)>
where
    F: FnMut(
        &Latent,
        GridStep,
        &mut SamplerState,
        &mut ChaCha8Rng,
        &mut RunTrace,
    ) -> Result<Latent>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = RunTrace::default();
    trace.push(TraceRecord::Start {
        seed,
        steps: grid.len(),
    });
    let mut state = SamplerState::default();
    let mut z = Latent::randn(shape, &mut rng);
    for at in grid.steps() {
        let context = || format!("step {} (t = {} -> {})", at.index, at.t, at.t_prev);
        z = step(&z, at, &mut state, &mut rng, &mut trace).map_err(|e| e.at(context()))?;
        z.ensure_finite(|| "non-finite latent".into())
            .map_err(|e| e.at(context()))?;
        trace.push(TraceRecord::Step {
            index: at.index,
            t: at.t,
            t_prev: at.t_prev,
            z_norm: z.norm(),
            z_mean: z.mean(),
            z_std: z.std(),
        });
    }
    Ok((z, trace))
}

/// Plain guided sampling from `z_T ~ N(0, I)` (seeded).
#[allow(clippy::too_many_arguments)]
pub fn sample<M: ScoreModel + ?Sized>(
    sampler: &Sampler,
    model: &M,
    y: Condition,
    omega: f64,
    grid: &StepGrid,
    sched: &NoiseSchedule,
    shape: Shape,
    seed: u64,
    mut hook: Option<&mut dyn StepHook>,
) -> Result<(Latent, RunTrace)> {
    sampler.validate()?;
    drive(grid, shape, seed, |z, at, state, rng, trace| {
        let mut eps = cfg_predict(model, z, y, at.t, omega)?;
        if let Some(h) = hook.as_deref_mut() {
            h.on_step(at, z, &mut eps, trace)?;
        }
        let mut mid = |zm: &Latent, s: usize| cfg_predict(model, zm, y, s, omega);
        sampler_step(
            sampler,
            state,
            z,
            at.t,
            at.t_prev,
            &eps,
            sched,
            rng,
            Some(&mut mid),
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_schedule, make_step_grid, ScheduleKind, Spacing};
    use std::collections::BTreeMap;
    use std::sync::Arc;

    use crate::score::GaussianMixtureScore;

    fn scalar_sched(ab_t: f64, ab_prev: f64) -> (NoiseSchedule, usize, usize) {
        // A 2-step linear schedule cannot hit arbitrary values, so search a long one
        // for the exact pair via betas chosen by hand.
        let b1 = 1.0 - ab_prev;
        let b2 = 1.0 - ab_t / ab_prev;
        let s = make_schedule(ScheduleKind::Linear, 2, b1, b2).unwrap();
        (s, 2, 1)
    }

    #[test]
    fn ddim_scalar_example() {
        let (s, t, tp) = scalar_sched(0.25, 0.64);
        assert!((s.alpha_bar(t) - 0.25).abs() < 1e-12 && (s.alpha_bar(tp) - 0.64).abs() < 1e-12);
        let mut state = SamplerState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = Latent::scalar(2.0);
        let out = sampler_step(
            &Sampler::default(),
            &mut state,
            &z,
            t,
            tp,
            &Latent::scalar(0.0),
            &s,
            &mut rng,
            None,
        )
        .unwrap();
        assert!((out.as_slice()[0] - 3.2).abs() < 1e-12);
    }

    #[test]
    fn first_dpm_pp_step_equals_ddim() {
        let s = NoiseSchedule::default();
        let z = Latent::flat(vec![0.3, -1.2, 2.0]);
        let eps = Latent::flat(vec![0.1, 0.5, -0.7]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ddim = sampler_step(
            &Sampler::default(),
            &mut SamplerState::default(),
            &z,
            700,
            680,
            &eps,
            &s,
            &mut rng,
            None,
        )
        .unwrap();
        let pp = sampler_step(
            &Sampler::new(SamplerKind::DpmSolverPp2m),
            &mut SamplerState::default(),
            &z,
            700,
            680,
            &eps,
            &s,
            &mut rng,
            None,
        )
        .unwrap();
        for (a, b) in ddim.as_slice().iter().zip(pp.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_step_lands_on_the_exact_denoiser_line() {
        let s = NoiseSchedule::default();
        let z0 = Latent::flat(vec![1.0, -0.5]);
        let eps = Latent::flat(vec![0.3, 0.8]);
        let z = crate::schedule::forward_diffuse(&z0, 500, &eps, &s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = sampler_step(
            &Sampler::default(),
            &mut SamplerState::default(),
            &z,
            500,
            480,
            &eps,
            &s,
            &mut rng,
            None,
        )
        .unwrap();
        let want = crate::schedule::forward_diffuse(&z0, 480, &eps, &s).unwrap();
        for (a, b) in out.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_s_requires_midpoint_and_falls_back_on_tight_gaps() {
        let s = NoiseSchedule::default();
        let z = Latent::flat(vec![0.3]);
        let eps = Latent::flat(vec![0.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let two_s = Sampler::new(SamplerKind::DpmSolver2s);
        assert!(sampler_step(
            &two_s,
            &mut SamplerState::default(),
            &z,
            700,
            680,
            &eps,
            &s,
            &mut rng,
            None
        )
        .is_err());
        let a = sampler_step(
            &two_s,
            &mut SamplerState::default(),
            &z,
            700,
            699,
            &eps,
            &s,
            &mut rng,
            None,
        )
        .unwrap();
        let b = sampler_step(
            &Sampler::default(),
            &mut SamplerState::default(),
            &z,
            700,
            699,
            &eps,
            &s,
            &mut rng,
            None,
        )
        .unwrap();
        assert!((a.as_slice()[0] - b.as_slice()[0]).abs() < 1e-12);
    }

    #[test]
    fn non_finite_estimate_is_rejected() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sampler_step(
            &Sampler::default(),
            &mut SamplerState::default(),
            &Latent::scalar(0.0),
            10,
            0,
            &Latent::scalar(f64::NAN),
            &s,
            &mut rng,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, DrfError::Numeric { .. }));
    }

    fn unit_gaussian(mu: Vec<f64>) -> (GaussianMixtureScore, Arc<NoiseSchedule>) {
        let sched = Arc::new(NoiseSchedule::default());
        let mut labels = BTreeMap::new();
        labels.insert(0, vec![0]);
        (
            GaussianMixtureScore::new(vec![Latent::flat(mu)], labels, sched.clone()).unwrap(),
            sched,
        )
    }

    #[test]
    fn sample_is_deterministic_and_single_step_grid_is_one_update() {
        let (m, sched) = unit_gaussian(vec![1.0, -1.0]);
        let grid = make_step_grid(&sched, 50, Spacing::Uniform).unwrap();
        let shape = Shape::flat(2);
        let a = sample(
            &Sampler::default(),
            &m,
            Condition::label(0),
            2.0,
            &grid,
            &sched,
            shape,
            7,
            None,
        )
        .unwrap();
        let b = sample(
            &Sampler::default(),
            &m,
            Condition::label(0),
            2.0,
            &grid,
            &sched,
            shape,
            7,
            None,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.seed(), Some(7));

        let one = make_step_grid(&sched, 1, Spacing::Uniform).unwrap();
        let (out, _) = sample(
            &Sampler::default(),
            &m,
            Condition::label(0),
            0.0,
            &one,
            &sched,
            shape,
            3,
            None,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z_t = Latent::randn(shape, &mut rng);
        let eps = m.predict(&z_t, Condition::label(0), 1000).unwrap();
        let want = sampler_step(
            &Sampler::default(),
            &mut SamplerState::default(),
            &z_t,
            1000,
            0,
            &eps,
            &sched,
            &mut rng,
            None,
        )
        .unwrap();
        assert_eq!(out, want);
    }

    #[test]
    fn trace_round_trips_through_jsonl() {
        let (m, sched) = unit_gaussian(vec![0.5]);
        let grid = make_step_grid(&sched, 10, Spacing::Uniform).unwrap();
        let (_, trace) = sample(
            &Sampler::default(),
            &m,
            Condition::label(0),
            1.0,
            &grid,
            &sched,
            Shape::flat(1),
            1,
            None,
        )
        .unwrap();
        let back = RunTrace::from_jsonl(&trace.to_jsonl().unwrap()).unwrap();
        assert_eq!(back, trace);
        assert_eq!(trace.to_csv().lines().count(), 11);
    }
}
