//! Dual recursive feedback: refinement of the injection noise that re-noises a
//! freshly denoised latent, driven by an appearance loss and a generation loss.
//!
//! One refinement at grid step `t -> t_prev` works on `r = alpha_bar[t] / alpha_bar[t_prev]`:
//!
//! ```text
//! z_g(eps) = sqrt(r) z_{t-1}^g + sqrt(1 - r) eps        (generation branch)
//! z_a(eps) = sqrt(r) z0_a      + sqrt(1 - r) eps        (appearance branch)
//! x0(z)    = (z - c_e eps_theta(z)) / c_a
//! L(eps)   = d(x0(z_a), z0_a) + rho w(i) d(x0(z_g), x0_prev)
//! eps     <- eps - lambda dL/deps
//! ```
//!
//! `(c_a, c_e)` is `(sqrt(r), sqrt(1 - r))` in ratio-matched inversion and
//! `(sqrt(alpha_bar[t]), sqrt(1 - alpha_bar[t]))` in marginal inversion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::control::{ControlContext, ControlledStep};
use crate::error::{DrfError, Result};
use crate::latent::{Latent, Shape};
use crate::sampler::{RunTrace, SamplerState, TraceRecord};
use crate::schedule::{GridStep, NoiseSchedule};
use crate::score::{cfg_predict, cfg_vjp, Condition, GaussianMixtureScore, ScoreModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    #[default]
    Exponential,
    Linear,
    Cosine,
}

impl WeightKind {
    pub const ALL: [WeightKind; 3] = [
        WeightKind::Exponential,
        WeightKind::Linear,
        WeightKind::Cosine,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            WeightKind::Exponential => "exponential",
            WeightKind::Linear => "linear",
            WeightKind::Cosine => "cosine",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    SquaredL2Mean,
    L1Mean,
    /// Sum of squared differences; keeps the update scale independent of the latent size.
    #[default]
    SquaredL2Sum,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    FullVjp,
    /// Treats `d eps_theta / d z` as the identity, as in score distillation.
    IdentityJacobian,
}

impl GradientMode {
    pub fn name(&self) -> &'static str {
        match self {
            GradientMode::FullVjp => "full_vjp",
            GradientMode::IdentityJacobian => "identity_jacobian",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InversionMode {
    #[default]
    RatioMatched,
    Marginal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrfConfig {
    pub enabled: bool,
    pub omega: f64,
    pub lambda: f64,
    pub rho: f64,
    pub k: f64,
    #[serde(rename = "N", alias = "n")]
    pub n: usize,
    pub window_skip: usize,
    pub window_len: usize,
    pub weight_kind: WeightKind,
    pub distance_kind: DistanceKind,
    pub gradient_mode: GradientMode,
    pub inversion_mode: InversionMode,
}

impl Default for DrfConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            omega: 5.0,
            lambda: 1.0,
            rho: 0.001,
            k: 5.0,
            n: 3,
            window_skip: 5,
            window_len: 20,
            weight_kind: WeightKind::Exponential,
            distance_kind: DistanceKind::SquaredL2Sum,
            gradient_mode: GradientMode::FullVjp,
            inversion_mode: InversionMode::RatioMatched,
        }
    }
}

impl DrfConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |field: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(DrfError::config(
                    field,
                    format!("must be finite and >= 0, got {v}"),
                ))
            }
        };
        finite_nonneg("drf.omega", self.omega)?;
        finite_nonneg("drf.lambda", self.lambda)?;
        finite_nonneg("drf.rho", self.rho)?;
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(DrfError::config(
                "drf.k",
                format!("must be finite and > 0, got {}", self.k),
            ));
        }
        if self.n == 0 {
            return Err(DrfError::config(
                "drf.N",
                "at least one iteration is required",
            ));
        }
        Ok(())
    }

    /// Checks that the active window fits inside a grid of `steps` steps.
    pub fn validate_for_grid(&self, steps: usize) -> Result<()> {
        self.validate()?;
        if self.window_skip + self.window_len > steps {
            return Err(DrfError::config(
                "drf.window_len",
                format!(
                    "window {}+{} does not fit a {steps}-step grid",
                    self.window_skip, self.window_len
                ),
            ));
        }
        Ok(())
    }

    pub fn is_active(&self, index: usize) -> bool {
        self.enabled && index >= self.window_skip && index < self.window_skip + self.window_len
    }
}

/// `(c_a, c_e)` used to invert a noisy latent into a posterior mean.
pub fn inversion_coeffs(
    sched: &NoiseSchedule,
    t: usize,
    t_prev: Option<usize>,
    mode: InversionMode,
) -> Result<(f64, f64)> {
    sched.check_t(t)?;
    let a = match mode {
        InversionMode::Marginal => sched.alpha_bar(t),
        InversionMode::RatioMatched => {
            let tp = t_prev.ok_or_else(|| {
                DrfError::Precondition("ratio-matched inversion needs t_prev".into())
            })?;
            sched.ratio(t, tp)?
        }
    };
    if a <= 0.0 {
        return Err(DrfError::Singularity {
            context: format!("signal coefficient 0 at t = {t}"),
        });
    }
    Ok((a.sqrt(), (1.0 - a).max(0.0).sqrt()))
}

/// `(z_t - c_e eps_hat) / c_a`.
pub fn posterior_mean(
    z_t: &Latent,
    eps_hat: &Latent,
    t: usize,
    t_prev: Option<usize>,
    sched: &NoiseSchedule,
    mode: InversionMode,
) -> Result<Latent> {
    let (ca, ce) = inversion_coeffs(sched, t, t_prev, mode)?;
    z_t.lin_comb(1.0 / ca, eps_hat, -ce / ca)
}

/// `sqrt(r) z0_like + sqrt(1 - r) eps` with `r = alpha_bar[t] / alpha_bar[t_prev]`.
pub fn one_step_renoise(
    z0_like: &Latent,
    t: usize,
    t_prev: usize,
    eps: &Latent,
    sched: &NoiseSchedule,
) -> Result<Latent> {
    let r = sched.ratio(t, t_prev)?;
    z0_like.lin_comb(r.sqrt(), eps, (1.0 - r).sqrt())
}

pub fn distance(a: &Latent, b: &Latent, kind: DistanceKind) -> Result<f64> {
    Ok(distance_with_grad(a, b, kind)?.0)
}

/// Distance and its gradient with respect to `a`. The L1 subgradient at 0 is 0.
pub fn distance_with_grad(a: &Latent, b: &Latent, kind: DistanceKind) -> Result<(f64, Latent)> {
    a.ensure_same_shape(b)?;
    let n = a.len().max(1) as f64;
    let diff = a.sub(b)?;
    let d = diff.as_slice();
    Ok(match kind {
        DistanceKind::SquaredL2Sum => (d.iter().map(|v| v * v).sum(), diff.scale(2.0)),
        DistanceKind::SquaredL2Mean => (
            d.iter().map(|v| v * v).sum::<f64>() / n,
            diff.scale(2.0 / n),
        ),
        DistanceKind::L1Mean => (
            d.iter().map(|v| v.abs()).sum::<f64>() / n,
            diff.map(|v| if v == 0.0 { 0.0 } else { v.signum() / n }),
        ),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// Gradient with respect to the injection noise.
    pub grad: Latent,
}

/// Shared per-branch evaluation: returns the loss against `target`, its gradient in
/// `eps` and the branch posterior mean.
#[allow(clippy::too_many_arguments)]
fn feedback_loss<M: ScoreModel + ?Sized>(
    z_tilde: &Latent,
    target: &Latent,
    model: &M,
    y: Condition,
    t: usize,
    t_prev: usize,
    cfg: &DrfConfig,
    sched: &NoiseSchedule,
) -> Result<(LossGrad, Latent)> {
    let (ca, ce) = inversion_coeffs(sched, t, Some(t_prev), cfg.inversion_mode)?;
    let dz = (1.0 - sched.ratio(t, t_prev)?).sqrt();
    let eps_hat = cfg_predict(model, z_tilde, y, t, cfg.omega)?;
    let x0 = z_tilde.lin_comb(1.0 / ca, &eps_hat, -ce / ca)?;
    let (loss, g) = distance_with_grad(&x0, target, cfg.distance_kind)?;
    let jt_g = match cfg.gradient_mode {
        GradientMode::FullVjp => cfg_vjp(model, z_tilde, y, t, cfg.omega, &g)?,
        GradientMode::IdentityJacobian => g.clone(),
    };
    let grad = g.lin_comb(dz / ca, &jt_g, -dz * ce / ca)?;
    grad.ensure_finite(|| format!("non-finite feedback gradient at t = {t}"))?;
    Ok((LossGrad { loss, grad }, x0))
}

/// Appearance feedback `d(x0(z_tilde_a), z0_a)` and its gradient in `eps`.
#[allow(clippy::too_many_arguments)]
pub fn appearance_loss<M: ScoreModel + ?Sized>(
    z0_a: &Latent,
    z_tilde_a: &Latent,
    model: &M,
    y_a: Condition,
    t: usize,
    t_prev: usize,
    cfg: &DrfConfig,
    sched: &NoiseSchedule,
) -> Result<LossGrad> {
    Ok(feedback_loss(z_tilde_a, z0_a, model, y_a, t, t_prev, cfg, sched)?.0)
}

/// Generation feedback `d(x0(z_t_g), z_prev_g)`; `z_prev_g` is held constant.
#[allow(clippy::too_many_arguments)]
pub fn generation_loss<M: ScoreModel + ?Sized>(
    z_prev_g: Option<&Latent>,
    z_t_g: &Latent,
    model: &M,
    y_g: Condition,
    t: usize,
    t_prev: usize,
    cfg: &DrfConfig,
    sched: &NoiseSchedule,
) -> Result<LossGrad> {
    let prev = z_prev_g.ok_or_else(|| {
        DrfError::State("generation feedback needs the previous posterior mean".into())
    })?;
    Ok(feedback_loss(z_t_g, prev, model, y_g, t, t_prev, cfg, sched)?.0)
}

/// Iteration weight on `i = 0..n-1`, rising from 0 to 1. A single iteration gets 0.
pub fn iter_weight(i: usize, n: usize, k: f64, kind: WeightKind) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let x = (i.min(n - 1)) as f64 / (n - 1) as f64;
    match kind {
        WeightKind::Exponential => ((k * x).exp_m1() / k.exp_m1()).sqrt(),
        WeightKind::Linear => x,
        WeightKind::Cosine => 0.5 * (1.0 - (std::f64::consts::PI * x).cos()),
    }
}

/// `L_app + rho w L_gen` with the matching gradient.
pub fn drf_loss(app: &LossGrad, gen: Option<&LossGrad>, w: f64, rho: f64) -> Result<LossGrad> {
    let coeff = rho * w;
    match gen {
        None if w > 0.0 => Err(DrfError::State(
            "positive generation weight without a generation loss".into(),
        )),
        Some(g) if coeff != 0.0 => Ok(LossGrad {
            loss: app.loss + coeff * g.loss,
            grad: app.grad.lin_comb(1.0, &g.grad, coeff)?,
        }),
        _ => Ok(app.clone()),
    }
}

/// `eps - lambda grad`.
pub fn noise_update(eps: &Latent, grad: &Latent, lambda: f64) -> Result<Latent> {
    grad.ensure_finite(|| "non-finite gradient in noise update".into())?;
    if !(lambda >= 0.0) {
        return Err(DrfError::config(
            "drf.lambda",
            format!("must be >= 0, got {lambda}"),
        ));
    }
    eps.lin_comb(1.0, grad, -lambda)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    pub l_app: f64,
    pub l_gen: Option<f64>,
    pub weight: f64,
    pub l_drf: f64,
    pub eps_norm: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineTrace {
    pub t: usize,
    pub t_prev: usize,
    /// Norm of the seeded initial injection noise.
    pub noise_norm: f64,
    pub final_eps: Latent,
    pub iterations: Vec<IterationStats>,
}

impl RefineTrace {
    pub fn records(&self, index: usize) -> Vec<TraceRecord> {
        let mut out = vec![TraceRecord::Refine {
            index,
            t: self.t,
            t_prev: self.t_prev,
            iterations: self.iterations.len(),
            noise_norm: self.noise_norm,
        }];
        out.extend(self.iterations.iter().map(|s| TraceRecord::Iteration {
            index,
            t: self.t,
            iteration: s.iteration,
            l_app: s.l_app,
            l_gen: s.l_gen,
            weight: s.weight,
            l_drf: s.l_drf,
            eps_norm: s.eps_norm,
            grad_norm: s.grad_norm,
        }));
        out
    }
}

/// The two re-noised branches sharing one noise instance.
pub fn renoise_pair(
    z_tm1_g: &Latent,
    z0_a: &Latent,
    t: usize,
    t_prev: usize,
    eps: &Latent,
    sched: &NoiseSchedule,
) -> Result<(Latent, Latent)> {
    Ok((
        one_step_renoise(z_tm1_g, t, t_prev, eps, sched)?,
        one_step_renoise(z0_a, t, t_prev, eps, sched)?,
    ))
}

/// Recursive refinement of the injection noise; returns the refined noisy latent
/// `sqrt(r) z_{t-1}^g + sqrt(1 - r) eps_final`.
#[allow(clippy::too_many_arguments)]
pub fn drf_refine<M: ScoreModel + ?Sized>(
    z_tm1_g: &Latent,
    z0_a: &Latent,
    t: usize,
    t_prev: usize,
    model: &M,
    y_a: Condition,
    y_g: Condition,
    cfg: &DrfConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<(Latent, RefineTrace)> {
    cfg.validate()?;
    z_tm1_g.ensure_same_shape(z0_a)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eps = Latent::randn(z_tm1_g.shape(), &mut rng);
    let noise_norm = eps.norm();
    let mut z_prev: Option<Latent> = None;
    let mut iterations = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let wrap = |e: DrfError| e.at(format!("refinement iteration {i} at t = {t}"));
        let (z_g, z_a) = renoise_pair(z_tm1_g, z0_a, t, t_prev, &eps, sched).map_err(wrap)?;
        let app = appearance_loss(z0_a, &z_a, model, y_a, t, t_prev, cfg, sched).map_err(wrap)?;
        let w = iter_weight(i, cfg.n, cfg.k, cfg.weight_kind);
        let (gen, x0_g) = match &z_prev {
            Some(prev) if w * cfg.rho > 0.0 => {
                let (lg, x0) =
                    feedback_loss(&z_g, prev, model, y_g, t, t_prev, cfg, sched).map_err(wrap)?;
                (Some(lg), x0)
            }
            _ => {
                let (ca, ce) =
                    inversion_coeffs(sched, t, Some(t_prev), cfg.inversion_mode).map_err(wrap)?;
                let eps_g = cfg_predict(model, &z_g, y_g, t, cfg.omega).map_err(wrap)?;
                let x0 = z_g.lin_comb(1.0 / ca, &eps_g, -ce / ca)?;
                let lg = z_prev
                    .as_ref()
                    .map(|p| distance(&x0, p, cfg.distance_kind))
                    .transpose()?;
                (
                    lg.map(|loss| LossGrad {
                        loss,
                        grad: Latent::zeros(x0.shape()),
                    }),
                    x0,
                )
            }
        };
        let total = drf_loss(
            &app,
            gen.as_ref(),
            if gen.is_some() { w } else { 0.0 },
            cfg.rho,
        )
        .map_err(wrap)?;
        iterations.push(IterationStats {
            iteration: i,
            l_app: app.loss,
            l_gen: gen.as_ref().map(|g| g.loss),
            weight: w,
            l_drf: total.loss,
            eps_norm: eps.norm(),
            grad_norm: total.grad.norm(),
        });
        eps = noise_update(&eps, &total.grad, cfg.lambda).map_err(wrap)?;
        eps.ensure_finite(|| "non-finite injection noise".into())
            .map_err(wrap)?;
        z_prev = Some(x0_g);
    }
    let z_star = one_step_renoise(z_tm1_g, t, t_prev, &eps, sched)?;
    Ok((
        z_star,
        RefineTrace {
            t,
            t_prev,
            noise_norm,
            final_eps: eps,
            iterations,
        },
    ))
}

/// Fixed-point regularisation loss `d(x0(z_t), z0_org)` with marginal inversion, and
/// its gradient in `z_t`.
#[allow(clippy::too_many_arguments)]
pub fn fpr_loss<M: ScoreModel + ?Sized>(
    z_t: &Latent,
    z0_org: &Latent,
    model: &M,
    y: Condition,
    t: usize,
    cfg: &DrfConfig,
    sched: &NoiseSchedule,
) -> Result<LossGrad> {
    let (ca, ce) = inversion_coeffs(sched, t, None, InversionMode::Marginal)?;
    let eps_hat = cfg_predict(model, z_t, y, t, cfg.omega)?;
    let x0 = z_t.lin_comb(1.0 / ca, &eps_hat, -ce / ca)?;
    let (loss, g) = distance_with_grad(&x0, z0_org, cfg.distance_kind)?;
    let jt_g = match cfg.gradient_mode {
        GradientMode::FullVjp => cfg_vjp(model, z_t, y, t, cfg.omega, &g)?,
        GradientMode::IdentityJacobian => g.clone(),
    };
    Ok(LossGrad {
        loss,
        grad: g.lin_comb(1.0 / ca, &jt_g, -ce / ca)?,
    })
}

/// One gradient step of the fixed-point regularisation baseline, applied to `z_t`.
#[allow(clippy::too_many_arguments)]
pub fn fpr_update<M: ScoreModel + ?Sized>(
    z_t: &Latent,
    z0_org: &Latent,
    model: &M,
    y: Condition,
    t: usize,
    lambda: f64,
    cfg: &DrfConfig,
    sched: &NoiseSchedule,
) -> Result<Latent> {
    let lg = fpr_loss(z_t, z0_org, model, y, t, cfg, sched)?;
    noise_update(z_t, &lg.grad, lambda)
}

/// Per-step refinement seed, decorrelated from the run seed stream.
pub fn step_seed(run_seed: u64, index: usize) -> u64 {
    let mut x = run_seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Wraps a controlled step: inside the window, the step output is refined and the
/// step is re-run from the refined noisy latent with the pre-step solver state.
pub struct DrfHook<'a> {
    pub inner: &'a dyn ControlledStep,
    pub model: &'a dyn ScoreModel,
    pub sched: &'a NoiseSchedule,
    pub ctx: &'a ControlContext,
    pub cfg: DrfConfig,
    pub run_seed: u64,
}

impl ControlledStep for DrfHook<'_> {
    fn step(
        &self,
        z_t: &Latent,
        at: GridStep,
        state: &mut SamplerState,
        rng: &mut ChaCha8Rng,
        trace: &mut RunTrace,
    ) -> Result<Latent> {
        if !self.cfg.is_active(at.index) {
            return self.inner.step(z_t, at, state, rng, trace);
        }
        let snapshot = state.clone();
        let z_tm1 = self.inner.step(z_t, at, state, rng, trace)?;
        let (z_star, refine) = drf_refine(
            &z_tm1,
            &self.ctx.z0_appearance,
            at.t,
            at.t_prev,
            self.model,
            self.ctx.y_app,
            self.ctx.y_gen,
            &self.cfg,
            self.sched,
            step_seed(self.run_seed, at.index),
        )?;
        log::trace!(
            "refined step {} (t = {}): L_app {:.4} -> {:.4}",
            at.index,
            at.t,
            refine.iterations.first().map_or(f64::NAN, |s| s.l_app),
            refine.iterations.last().map_or(f64::NAN, |s| s.l_app)
        );
        for r in refine.records(at.index) {
            trace.push(r);
        }
        *state = snapshot;
        self.inner.step(&z_star, at, state, rng, trace)
    }
}

/// Score model whose vector-Jacobian product is deliberately wrong; used to check
/// that the gradient suite detects broken Jacobians.
pub struct CorruptVjp<M>(pub M);

impl<M: ScoreModel> ScoreModel for CorruptVjp<M> {
    fn predict(&self, z: &Latent, y: Condition, t: usize) -> Result<Latent> {
        self.0.predict(z, y, t)
    }

    fn vjp(&self, z: &Latent, y: Condition, t: usize, cotangent: &Latent) -> Result<Latent> {
        Ok(self.0.vjp(z, y, t, cotangent)?.scale(1.05))
    }

    fn supports_exact_vjp(&self) -> bool {
        true
    }
}

/// Worst instance of a gradient check, kept for diagnostics.
#[derive(Clone, Debug, Serialize)]
pub struct GradInstance {
    pub dim: usize,
    pub t: usize,
    pub t_prev: usize,
    pub iteration: usize,
    pub rel_err: f64,
    pub analytic: Vec<f64>,
    pub finite_difference: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub instances: usize,
    pub gradient_mode: GradientMode,
    pub max_rel_err: f64,
    pub worst: Option<GradInstance>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient<F>(f: F, x: &Latent, h: f64) -> Result<Latent>
where
    F: Fn(&Latent) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Latent::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let plus = f(&probe)?;
        probe.as_mut_slice()[i] = orig - h;
        let minus = f(&probe)?;
        probe.as_mut_slice()[i] = orig;
        out.as_mut_slice()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: &Latent, b: &Latent) -> f64 {
    let diff = a.sub(b).map(|d| d.norm()).unwrap_or(f64::INFINITY);
    diff / a.norm().max(b.norm()).max(1e-8)
}

/// Random analytic instance for the gradient suite: a 2-4 component mixture split
/// over two labels, with random variance and an optional rank-one factor.
pub fn random_mixture<R: Rng + ?Sized>(
    rng: &mut R,
    dim: usize,
    sched: Arc<NoiseSchedule>,
) -> Result<GaussianMixtureScore> {
    let k = rng.random_range(2..=4usize);
    let means: Vec<Latent> = (0..k)
        .map(|_| Latent::randn(Shape::flat(dim), rng).scale(1.5))
        .collect();
    let split = k / 2;
    let mut labels = BTreeMap::new();
    labels.insert(0, (0..split).collect());
    labels.insert(1, (split..k).collect());
    let var = rng.random_range(0.3..1.5);
    let factors = if rng.random_bool(0.5) {
        vec![Latent::randn(Shape::flat(dim), rng).scale(0.5)]
    } else {
        Vec::new()
    };
    GaussianMixtureScore::with_covariance(means, labels, var, factors, sched)
}

/// Loss of one refinement iteration as a function of `eps`, with the score either
/// exact or replaced by its frozen linearisation `eps_theta(anchor) + (z - anchor)`.
struct IterationObjective<'a> {
    model: &'a dyn ScoreModel,
    sched: &'a NoiseSchedule,
    cfg: &'a DrfConfig,
    z_tm1: &'a Latent,
    z0_a: &'a Latent,
    z_prev: &'a Latent,
    t: usize,
    t_prev: usize,
    w: f64,
    anchors: Option<[(Latent, Latent); 2]>,
}

impl IterationObjective<'_> {
    fn branch_x0(&self, z: &Latent, y: Condition, branch: usize) -> Result<Latent> {
        let eps_hat = match &self.anchors {
            None => cfg_predict(self.model, z, y, self.t, self.cfg.omega)?,
            Some(a) => {
                let (anchor, at_anchor) = &a[branch];
                at_anchor.add(&z.sub(anchor)?)?
            }
        };
        posterior_mean(
            z,
            &eps_hat,
            self.t,
            Some(self.t_prev),
            self.sched,
            self.cfg.inversion_mode,
        )
    }

    fn value(&self, eps: &Latent) -> Result<f64> {
        let (z_g, z_a) = renoise_pair(self.z_tm1, self.z0_a, self.t, self.t_prev, eps, self.sched)?;
        let l_app = distance(
            &self.branch_x0(&z_a, Condition::label(1), 0)?,
            self.z0_a,
            self.cfg.distance_kind,
        )?;
        let l_gen = distance(
            &self.branch_x0(&z_g, Condition::label(0), 1)?,
            self.z_prev,
            self.cfg.distance_kind,
        )?;
        Ok(l_app + self.cfg.rho * self.w * l_gen)
    }
}

/// Compares the analytic refinement gradient with finite differences of the loss on
/// random analytic instances (latent sizes 1-8). In identity-Jacobian mode the
/// reference is the frozen-linearisation loss, the function that mode differentiates.
pub fn gradient_check(
    cfg: &DrfConfig,
    instances: usize,
    seed: u64,
    corrupt_vjp: bool,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    let sched = Arc::new(NoiseSchedule::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        instances,
        gradient_mode: cfg.gradient_mode,
        max_rel_err: 0.0,
        worst: None,
    };
    // The smooth distances only; L1 has kinks where finite differences are meaningless.
    let mut cfg = cfg.clone();
    if cfg.distance_kind == DistanceKind::L1Mean {
        cfg.distance_kind = DistanceKind::SquaredL2Mean;
    }
    // A visible generation term, so its gradient path is exercised.
    cfg.rho = cfg.rho.max(0.5);
    for _ in 0..instances {
        let dim = rng.random_range(1..=8usize);
        let mixture = random_mixture(&mut rng, dim, sched.clone())?;
        let model: Box<dyn ScoreModel> = if corrupt_vjp {
            Box::new(CorruptVjp(mixture))
        } else {
            Box::new(mixture)
        };
        let t = rng.random_range(2..=sched.train_steps());
        let t_prev = t - rng.random_range(1..=40usize.min(t - 1));
        let shape = Shape::flat(dim);
        let z_tm1 = Latent::randn(shape, &mut rng);
        let z0_a = Latent::randn(shape, &mut rng);
        let z_prev = Latent::randn(shape, &mut rng);
        let eps = Latent::randn(shape, &mut rng);
        let n = cfg.n.max(2);
        let iteration = rng.random_range(1..n);
        let w = iter_weight(iteration, n, cfg.k, cfg.weight_kind);

        let (z_g, z_a) = renoise_pair(&z_tm1, &z0_a, t, t_prev, &eps, &sched)?;
        let y_a = Condition::label(1);
        let y_g = Condition::label(0);
        let app = appearance_loss(&z0_a, &z_a, &model, y_a, t, t_prev, &cfg, &sched)?;
        let gen = generation_loss(Some(&z_prev), &z_g, &model, y_g, t, t_prev, &cfg, &sched)?;
        let analytic = drf_loss(&app, Some(&gen), w, cfg.rho)?.grad;

        let anchors = match cfg.gradient_mode {
            GradientMode::FullVjp => None,
            GradientMode::IdentityJacobian => Some([
                (z_a.clone(), cfg_predict(&model, &z_a, y_a, t, cfg.omega)?),
                (z_g.clone(), cfg_predict(&model, &z_g, y_g, t, cfg.omega)?),
            ]),
        };
        let objective = IterationObjective {
            model: &model,
            sched: &sched,
            cfg: &cfg,
            z_tm1: &z_tm1,
            z0_a: &z0_a,
            z_prev: &z_prev,
            t,
            t_prev,
            w,
            anchors,
        };
        let fd = fd_gradient(|e| objective.value(e), &eps, 1e-5)?;
        let err = relative_error(&analytic, &fd);
        if !(err <= report.max_rel_err) {
            report.max_rel_err = err;
            report.worst = Some(GradInstance {
                dim,
                t,
                t_prev,
                iteration,
                rel_err: err,
                analytic: analytic.into_vec(),
                finite_difference: fd.into_vec(),
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::forward_diffuse;

    fn unit_model(mu: Vec<f64>) -> GaussianMixtureScore {
        let mut labels = BTreeMap::new();
        labels.insert(0, vec![0]);
        labels.insert(1, vec![0]);
        GaussianMixtureScore::new(
            vec![Latent::flat(mu)],
            labels,
            Arc::new(NoiseSchedule::default()),
        )
        .unwrap()
    }

    #[test]
    fn scalar_examples() {
        let s = NoiseSchedule::default();
        assert!(
            (distance(
                &Latent::scalar(1.0),
                &Latent::scalar(3.0),
                DistanceKind::SquaredL2Mean
            )
            .unwrap()
                - 4.0)
                .abs()
                < 1e-15
        );
        let app = LossGrad {
            loss: 2.0,
            grad: Latent::scalar(0.0),
        };
        let gen = LossGrad {
            loss: 4.0,
            grad: Latent::scalar(0.0),
        };
        assert!((drf_loss(&app, Some(&gen), 1.0, 0.001).unwrap().loss - 2.004).abs() < 1e-12);
        assert_eq!(drf_loss(&app, Some(&gen), 0.0, 0.001).unwrap(), app);
        assert!(drf_loss(&app, None, 0.5, 0.001).is_err());
        let e = noise_update(&Latent::scalar(1.0), &Latent::scalar(0.25), 1.0).unwrap();
        assert_eq!(e.as_slice(), &[0.75]);
        assert!(noise_update(&Latent::scalar(1.0), &Latent::scalar(f64::NAN), 1.0).is_err());
        // One-step re-noising with ratio 0.81 computed by hand.
        let (t, tp) = (1..=1000)
            .flat_map(|t| (0..t).map(move |tp| (t, tp)))
            .find(|&(t, tp)| (s.ratio(t, tp).unwrap() - 0.81).abs() < 2e-3)
            .unwrap();
        let r = s.ratio(t, tp).unwrap();
        let out = one_step_renoise(&Latent::scalar(1.0), t, tp, &Latent::scalar(1.0), &s).unwrap();
        assert!((out.as_slice()[0] - (r.sqrt() + (1.0 - r).sqrt())).abs() < 1e-15);
    }

    #[test]
    fn weights() {
        assert!((iter_weight(1, 3, 5.0, WeightKind::Exponential) - 0.275418).abs() < 1e-5);
        for kind in WeightKind::ALL {
            assert_eq!(iter_weight(0, 4, 5.0, kind), 0.0);
            assert!((iter_weight(3, 4, 5.0, kind) - 1.0).abs() < 1e-12);
            assert_eq!(iter_weight(0, 1, 5.0, kind), 0.0);
        }
    }

    #[test]
    fn posterior_mean_inverts_forward_diffusion() {
        let s = NoiseSchedule::default();
        let z0 = Latent::flat(vec![0.4, -1.0, 2.0]);
        let eps = Latent::flat(vec![1.0, 0.3, -0.2]);
        let zt = forward_diffuse(&z0, 600, &eps, &s).unwrap();
        let back = posterior_mean(&zt, &eps, 600, None, &s, InversionMode::Marginal).unwrap();
        for (a, b) in back.as_slice().iter().zip(z0.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let z = one_step_renoise(&z0, 600, 580, &eps, &s).unwrap();
        let back =
            posterior_mean(&z, &eps, 600, Some(580), &s, InversionMode::RatioMatched).unwrap();
        for (a, b) in back.as_slice().iter().zip(z0.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(posterior_mean(&z, &eps, 600, None, &s, InversionMode::RatioMatched).is_err());
        let at_zero = posterior_mean(&z, &eps, 0, None, &s, InversionMode::Marginal).unwrap();
        assert_eq!(at_zero, z);
    }

    #[test]
    fn perfect_denoiser_fixed_point() {
        // A model that always returns the injected noise makes the appearance loss vanish.
        struct Echo(Latent);
        impl ScoreModel for Echo {
            fn predict(&self, _z: &Latent, _y: Condition, _t: usize) -> Result<Latent> {
                Ok(self.0.clone())
            }
            fn vjp(&self, z: &Latent, _y: Condition, _t: usize, _u: &Latent) -> Result<Latent> {
                Ok(Latent::zeros(z.shape()))
            }
        }
        let s = NoiseSchedule::default();
        let eps = Latent::flat(vec![0.3, -0.7]);
        let z0 = Latent::flat(vec![1.0, 2.0]);
        let model = Echo(eps.clone());
        let cfg = DrfConfig {
            gradient_mode: GradientMode::IdentityJacobian,
            ..DrfConfig::default()
        };
        let za = one_step_renoise(&z0, 500, 480, &eps, &s).unwrap();
        let lg =
            appearance_loss(&z0, &za, &model, Condition::label(0), 500, 480, &cfg, &s).unwrap();
        assert!(lg.loss < 1e-24);
        assert!(lg.grad.max_abs() < 1e-12);
    }

    #[test]
    fn refine_edge_cases() {
        let s = NoiseSchedule::default();
        let m = unit_model(vec![0.5, -0.5]);
        let z = Latent::flat(vec![0.1, 0.2]);
        let za = Latent::flat(vec![0.5, -0.5]);
        let cfg = DrfConfig {
            lambda: 0.0,
            ..DrfConfig::default()
        };
        let (z_star, tr) = drf_refine(
            &z,
            &za,
            500,
            480,
            &m,
            Condition::label(1),
            Condition::label(0),
            &cfg,
            &s,
            9,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eps0 = Latent::randn(z.shape(), &mut rng);
        assert_eq!(z_star, one_step_renoise(&z, 500, 480, &eps0, &s).unwrap());
        assert!(tr
            .iterations
            .windows(2)
            .all(|w| w[0].eps_norm == w[1].eps_norm));

        let cfg = DrfConfig {
            n: 1,
            ..DrfConfig::default()
        };
        let (_, tr) = drf_refine(
            &z,
            &za,
            500,
            480,
            &m,
            Condition::label(1),
            Condition::label(0),
            &cfg,
            &s,
            9,
        )
        .unwrap();
        assert_eq!(tr.iterations.len(), 1);
        assert_eq!(tr.iterations[0].weight, 0.0);
        assert_eq!(tr.iterations[0].l_drf, tr.iterations[0].l_app);

        let a = drf_refine(
            &z,
            &za,
            500,
            480,
            &m,
            Condition::label(1),
            Condition::label(0),
            &DrfConfig::default(),
            &s,
            4,
        )
        .unwrap();
        let b = drf_refine(
            &z,
            &za,
            500,
            480,
            &m,
            Condition::label(1),
            Condition::label(0),
            &DrfConfig::default(),
            &s,
            4,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_suite_passes_and_catches_corruption() {
        for mode in [GradientMode::FullVjp, GradientMode::IdentityJacobian] {
            let cfg = DrfConfig {
                gradient_mode: mode,
                ..DrfConfig::default()
            };
            let r = gradient_check(&cfg, 30, 1, false).unwrap();
            assert!(r.passed(1e-4), "{mode:?}: {}", r.max_rel_err);
        }
        let r = gradient_check(&DrfConfig::default(), 10, 1, true).unwrap();
        assert!(!r.passed(1e-4));
    }

    #[test]
    fn config_validation() {
        assert!(DrfConfig::default().validate_for_grid(50).is_ok());
        assert!(DrfConfig::default()
            .validate_for_grid(20)
            .unwrap_err()
            .is_config());
        for bad in [
            DrfConfig {
                lambda: -1.0,
                ..DrfConfig::default()
            },
            DrfConfig {
                k: 0.0,
                ..DrfConfig::default()
            },
            DrfConfig {
                n: 0,
                ..DrfConfig::default()
            },
            DrfConfig {
                rho: f64::NAN,
                ..DrfConfig::default()
            },
        ] {
            assert!(bad.validate().unwrap_err().is_config());
        }
        let parsed: DrfConfig =
            serde_json::from_str(r#"{"N": 4, "weight_kind": "cosine"}"#).unwrap();
        assert_eq!(parsed.n, 4);
        assert_eq!(parsed.weight_kind, WeightKind::Cosine);
    }
}
