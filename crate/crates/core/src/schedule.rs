//! Discrete noise schedules and inference step grids.
//!
//! Training timesteps are indexed `0..=T`. Index `0` is the clean-data boundary
//! with `alpha_bar[0] = 1`; index `t >= 1` carries
//! `alpha_bar[t] = prod_{s=1..t} (1 - beta_s)`.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{DrfError, Result};
use crate::latent::Latent;

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 2e-2;

/// Offset of the squared-cosine profile.
const COSINE_OFFSET: f64 = 0.008;
/// Upper clip on cosine betas so the terminal `alpha_bar` stays positive.
const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    /// `betas[t - 1]` is the variance added at training step `t`.
    betas: Vec<f64>,
    /// Length `T + 1`; `alpha_bars[0] == 1`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(
        kind: ScheduleKind,
        train_steps: usize,
        beta_min: f64,
        beta_max: f64,
    ) -> Result<Self> {
        make_schedule(kind, train_steps, beta_min, beta_max)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of training timesteps `T`.
    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t >= 1`; zero at the clean boundary.
    pub fn beta(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.betas[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Panics if `t > T`; use [`NoiseSchedule::check_t`] for validated access.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.train_steps() {
            return Err(DrfError::Schedule(format!(
                "timestep {t} outside 0..={}",
                self.train_steps()
            )));
        }
        Ok(())
    }

    /// `alpha_bar[t] / alpha_bar[t_prev]`, the one-step signal retention between two grid points.
    pub fn ratio(&self, t: usize, t_prev: usize) -> Result<f64> {
        self.check_t(t)?;
        self.check_t(t_prev)?;
        let r = self.alpha_bars[t] / self.alpha_bars[t_prev];
        if !(r > 0.0 && r <= 1.0) {
            return Err(DrfError::Schedule(format!(
                "alpha_bar ratio {r} for ({t}, {t_prev}) outside (0, 1]"
            )));
        }
        Ok(r)
    }

    /// Log signal-to-noise half-ratio `log(sqrt(ab) / sqrt(1 - ab))`; `+inf` at `t = 0`.
    pub fn lambda(&self, t: usize) -> f64 {
        let ab = self.alpha_bars[t];
        0.5 * (ab.ln() - (1.0 - ab).ln())
    }

    /// Dumps `t,beta,alpha_bar` rows, including the `t = 0` boundary.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha_bar\n");
        for (t, ab) in self.alpha_bars.iter().enumerate() {
            let _ = writeln!(out, "{t},{:e},{:e}", self.beta(t), ab);
        }
        out
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(
            ScheduleKind::Linear,
            DEFAULT_TRAIN_STEPS,
            DEFAULT_BETA_MIN,
            DEFAULT_BETA_MAX,
        )
        .expect("default schedule is valid")
    }
}

/// Builds a schedule. The cosine kind ignores `beta_min`/`beta_max`.
pub fn make_schedule(
    kind: ScheduleKind,
    train_steps: usize,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule> {
    if train_steps < 2 {
        return Err(DrfError::config(
            "schedule.train_steps",
            format!("need at least 2 training steps, got {train_steps}"),
        ));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            if !(beta_min > 0.0 && beta_min.is_finite()) {
                return Err(DrfError::config(
                    "schedule.beta_min",
                    format!("must be in (0, 1), got {beta_min}"),
                ));
            }
            if !(beta_max >= beta_min && beta_max < 1.0) {
                return Err(DrfError::config(
                    "schedule.beta_max",
                    format!("must be in [beta_min, 1), got {beta_max}"),
                ));
            }
            let span = (train_steps - 1) as f64;
            (0..train_steps)
                .map(|i| beta_min + (beta_max - beta_min) * i as f64 / span)
                .collect()
        }
        ScheduleKind::Cosine => {
            let f = |t: usize| {
                let x = (t as f64 / train_steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                (x * FRAC_PI_2).cos().powi(2)
            };
            (1..=train_steps)
                .map(|t| (1.0 - f(t) / f(t - 1)).min(COSINE_MAX_BETA))
                .collect()
        }
    };

    let mut alpha_bars = Vec::with_capacity(train_steps + 1);
    alpha_bars.push(1.0);
    let mut prod = 1.0;
    for &beta in &betas {
        prod *= 1.0 - beta;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        kind,
        betas,
        alpha_bars,
    })
}

/// `sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps`.
pub fn forward_diffuse(
    z0: &Latent,
    t: usize,
    eps: &Latent,
    sched: &NoiseSchedule,
) -> Result<Latent> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    z0.lin_comb(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    /// Integer stride `T / S` counted down from `T`.
    #[default]
    Uniform,
    /// Fractional stride `T / S` counted down from `T` and rounded, so the
    /// last step lands near `T / S` even when `S` does not divide `T`.
    Trailing,
}

/// One reverse step `t -> t_prev` at position `index` of its grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridStep {
    pub index: usize,
    pub t: usize,
    pub t_prev: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepGrid {
    timesteps: Vec<usize>,
}

impl StepGrid {
    /// Validates an explicit grid: nonempty, strictly descending, every entry in `1..=T`.
    pub fn new(timesteps: Vec<usize>, sched: &NoiseSchedule) -> Result<Self> {
        if timesteps.is_empty() {
            return Err(DrfError::config("sampler.steps", "grid must not be empty"));
        }
        for pair in timesteps.windows(2) {
            if pair[0] <= pair[1] {
                return Err(DrfError::Schedule(format!(
                    "grid not strictly descending at {} -> {}",
                    pair[0], pair[1]
                )));
            }
        }
        if let Some(&t) = timesteps
            .iter()
            .find(|&&t| t == 0 || t > sched.train_steps())
        {
            return Err(DrfError::Schedule(format!(
                "grid timestep {t} outside 1..={}",
                sched.train_steps()
            )));
        }
        Ok(Self { timesteps })
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// The reverse steps; the last one targets the clean boundary `t_prev = 0`.
    pub fn steps(&self) -> impl Iterator<Item = GridStep> + '_ {
        self.timesteps
            .iter()
            .enumerate()
            .map(move |(index, &t)| GridStep {
                index,
                t,
                t_prev: self.timesteps.get(index + 1).copied().unwrap_or(0),
            })
    }
}

pub fn make_step_grid(sched: &NoiseSchedule, steps: usize, spacing: Spacing) -> Result<StepGrid> {
    let train = sched.train_steps();
    if steps == 0 || steps > train {
        return Err(DrfError::config(
            "sampler.steps",
            format!("must be in 1..={train}, got {steps}"),
        ));
    }
    let timesteps = match spacing {
        Spacing::Uniform => {
            let stride = train / steps;
            (0..steps).map(|j| train - j * stride).collect()
        }
        Spacing::Trailing => {
            let stride = train as f64 / steps as f64;
            (0..steps)
                .map(|j| (train as f64 - j as f64 * stride).round() as usize)
                .collect()
        }
    };
    StepGrid::new(timesteps, sched)
}
