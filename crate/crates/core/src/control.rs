//! Controllable denoise step with a closed-form structure/appearance injection.
//!
//! The toy step anchors the masked region of the data prediction to a structure
//! reference during the early part of the grid, and pulls per-channel mean and
//! standard deviation toward an appearance reference on every step.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DrfError, Result};
use crate::latent::{mean_std, Latent, Shape};
use crate::sampler::{drive, sampler_step, RunTrace, Sampler, SamplerState};
use crate::schedule::{GridStep, NoiseSchedule, StepGrid};
use crate::score::{cfg_predict, Condition, ScoreModel};

pub const DEFAULT_STRUCT_CUTOFF: f64 = 0.6;

/// Injection strengths of the toy controllable step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSettings {
    pub struct_strength: f64,
    pub app_strength: f64,
    pub struct_cutoff: f64,
}

impl Default for ControlSettings {
    fn default() -> Self {
        Self {
            struct_strength: 1.0,
            app_strength: 0.05,
            struct_cutoff: DEFAULT_STRUCT_CUTOFF,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlContext {
    pub z0_structure: Latent,
    /// 0/1 entries, broadcast over channels.
    pub structure_mask: Latent,
    pub z0_appearance: Latent,
    pub y_gen: Condition,
    pub y_app: Condition,
    pub struct_strength: f64,
    pub app_strength: f64,
    pub struct_cutoff: f64,
}

/// Pixels whose channel mean is strictly positive, broadcast over channels.
pub fn threshold_mask(z: &Latent) -> Latent {
    let shape = z.shape();
    let plane = shape.plane();
    let mut out = Latent::zeros(shape);
    for p in 0..plane {
        let m: f64 =
            (0..shape.channels).map(|c| z.channel(c)[p]).sum::<f64>() / shape.channels as f64;
        if m > 0.0 {
            for c in 0..shape.channels {
                out.channel_mut(c)[p] = 1.0;
            }
        }
    }
    out
}

/// Spatial boolean mask (length `H * W`) of [`threshold_mask`].
pub fn spatial_mask(z: &Latent) -> Vec<bool> {
    threshold_mask(z)
        .channel(0)
        .iter()
        .map(|&v| v > 0.0)
        .collect()
}

impl ControlContext {
    pub fn new(
        z0_structure: Latent,
        z0_appearance: Latent,
        y_gen: Condition,
        y_app: Condition,
        settings: ControlSettings,
    ) -> Result<Self> {
        let ctx = Self {
            structure_mask: threshold_mask(&z0_structure),
            z0_structure,
            z0_appearance,
            y_gen,
            y_app,
            struct_strength: settings.struct_strength,
            app_strength: settings.app_strength,
            struct_cutoff: settings.struct_cutoff,
        };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn validate(&self) -> Result<()> {
        self.z0_structure.ensure_same_shape(&self.z0_appearance)?;
        self.z0_structure.ensure_same_shape(&self.structure_mask)?;
        if self
            .structure_mask
            .as_slice()
            .iter()
            .any(|&v| v != 0.0 && v != 1.0)
        {
            return Err(DrfError::config(
                "control.structure_mask",
                "entries must be 0 or 1",
            ));
        }
        for (field, v) in [
            ("control.struct_strength", self.struct_strength),
            ("control.app_strength", self.app_strength),
            ("control.struct_cutoff", self.struct_cutoff),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DrfError::config(
                    field,
                    format!("must lie in [0, 1], got {v}"),
                ));
            }
        }
        if self.y_gen.is_null() || self.y_app.is_null() {
            return Err(DrfError::config(
                "task",
                "generation and appearance conditions must be non-null",
            ));
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape {
        self.z0_structure.shape()
    }

    pub fn structure_active(&self, index: usize, grid_len: usize) -> bool {
        self.struct_strength > 0.0 && (index as f64) < self.struct_cutoff * grid_len as f64
    }

    /// True when [`Self::transform`] would change anything at this step.
    pub fn modifies(&self, index: usize, grid_len: usize) -> bool {
        self.structure_active(index, grid_len) || self.app_strength > 0.0
    }

    /// `x0 <- (1 - tau_s m) x0 + tau_s m z0_structure`.
    pub fn anchor(&self, x0: &mut Latent) {
        let tau = self.struct_strength;
        for ((x, &m), &s) in x0
            .as_mut_slice()
            .iter_mut()
            .zip(self.structure_mask.as_slice())
            .zip(self.z0_structure.as_slice())
        {
            let w = tau * m;
            *x = (1.0 - w) * *x + w * s;
        }
    }

    /// Moves every channel's mean and standard deviation the fraction `tau_a` toward
    /// the appearance reference. Flat channels are shifted only.
    pub fn match_statistics(&self, x0: &mut Latent) {
        let tau = self.app_strength;
        for c in 0..x0.shape().channels {
            let (ma, sa) = mean_std(self.z0_appearance.channel(c));
            let ch = x0.channel_mut(c);
            let (m, s) = mean_std(ch);
            let new_m = m + tau * (ma - m);
            let new_s = s + tau * (sa - s);
            let gain = if s > 0.0 { new_s / s } else { 1.0 };
            for v in ch.iter_mut() {
                *v = (*v - m) * gain + new_m;
            }
        }
    }

    pub fn transform(&self, x0: &mut Latent, index: usize, grid_len: usize) {
        if self.structure_active(index, grid_len) {
            self.anchor(x0);
        }
        if self.app_strength > 0.0 {
            self.match_statistics(x0);
        }
    }
}

/// A denoise step that may consume structure and appearance context.
pub trait ControlledStep {
    fn step(
        &self,
        z_t: &Latent,
        at: GridStep,
        state: &mut SamplerState,
        rng: &mut ChaCha8Rng,
        trace: &mut RunTrace,
    ) -> Result<Latent>;
}

/// The closed-form controllable step over any score model and sampler kind.
pub struct ToyControlledStep<'a> {
    pub ctx: &'a ControlContext,
    pub model: &'a dyn ScoreModel,
    pub sched: &'a NoiseSchedule,
    pub sampler: Sampler,
    pub omega: f64,
    pub grid_len: usize,
}

impl ToyControlledStep<'_> {
    /// Guided noise estimate with the context transform applied through the data
    /// prediction. Returned unchanged when the transform is inactive.
    pub fn controlled_eps(&self, z: &Latent, t: usize, index: usize) -> Result<Latent> {
        let eps = cfg_predict(self.model, z, self.ctx.y_gen, t, self.omega)?;
        if !self.ctx.modifies(index, self.grid_len) {
            return Ok(eps);
        }
        let a = self.sched.alpha_bar(t);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        let mut x0 = z.lin_comb(1.0 / sa, &eps, -sn / sa)?;
        self.ctx.transform(&mut x0, index, self.grid_len);
        z.lin_comb(1.0 / sn, &x0, -sa / sn)
    }
}

impl ControlledStep for ToyControlledStep<'_> {
    fn step(
        &self,
        z_t: &Latent,
        at: GridStep,
        state: &mut SamplerState,
        rng: &mut ChaCha8Rng,
        _trace: &mut RunTrace,
    ) -> Result<Latent> {
        z_t.ensure_same_shape(&self.ctx.z0_structure)?;
        let eps = self.controlled_eps(z_t, at.t, at.index)?;
        let mut mid = |zm: &Latent, s: usize| self.controlled_eps(zm, s, at.index);
        sampler_step(
            &self.sampler,
            state,
            z_t,
            at.t,
            at.t_prev,
            &eps,
            self.sched,
            rng,
            Some(&mut mid),
        )
    }
}

/// Runs `step` over the grid from seeded Gaussian noise.
pub fn run_controlled(
    step: &dyn ControlledStep,
    grid: &StepGrid,
    shape: Shape,
    seed: u64,
) -> Result<(Latent, RunTrace)> {
    drive(grid, shape, seed, |z, at, state, rng, trace| {
        step.step(z, at, state, rng, trace)
    })
}

/// Toy images are their own latents.
pub fn encode_toy_image(image: &Latent) -> Latent {
    image.clone()
}

fn to_byte(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round()) as u8
}

/// Writes a 3-channel latent with values in `[-1, 1]` as binary PPM.
pub fn write_ppm(path: &Path, image: &Latent) -> Result<()> {
    let bytes = encode_ppm(image)?;
    std::fs::write(path, bytes).map_err(|e| DrfError::io(path, e))
}

pub fn encode_ppm(image: &Latent) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.channels != 3 {
        return Err(DrfError::Format(format!("PPM needs 3 channels, got {s}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.width, s.height).into_bytes();
    for p in 0..s.plane() {
        for c in 0..3 {
            out.push(to_byte(image.channel(c)[p]));
        }
    }
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Latent> {
    let file = std::fs::File::open(path).map_err(|e| DrfError::io(path, e))?;
    decode_ppm(BufReader::new(file))
}

pub fn decode_ppm<R: BufRead>(mut reader: R) -> Result<Latent> {
    let mut header = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    while tokens.len() < 4 {
        header.clear();
        let n = reader
            .read_until(b'\n', &mut header)
            .map_err(|e| DrfError::Format(format!("PPM header: {e}")))?;
        if n == 0 {
            return Err(DrfError::Format("truncated PPM header".into()));
        }
        let line = String::from_utf8_lossy(&header);
        let line = line.split('#').next().unwrap_or("");
        tokens.extend(line.split_whitespace().map(str::to_owned));
    }
    if tokens[0] != "P6" || tokens[3] != "255" {
        return Err(DrfError::Format("expected a P6 PPM with maxval 255".into()));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| DrfError::Format(format!("bad PPM dimension {s:?}")))
    };
    let (w, h) = (parse(&tokens[1])?, parse(&tokens[2])?);
    let mut bytes = vec![0u8; 3 * w * h];
    reader
        .read_exact(&mut bytes)
        .map_err(|_| DrfError::Format("truncated PPM pixel data".into()))?;
    let shape = Shape::new(3, h, w);
    let mut out = Latent::zeros(shape);
    for p in 0..w * h {
        for c in 0..3 {
            out.channel_mut(c)[p] = bytes[3 * p + c] as f64 / 255.0 * 2.0 - 1.0;
        }
    }
    Ok(out)
}

/// Writes bytes to any sink; used by the CLI for stdout previews.
pub fn write_ppm_to<W: Write>(mut sink: W, image: &Latent) -> Result<()> {
    sink.write_all(&encode_ppm(image)?)
        .map_err(|e| DrfError::Format(format!("PPM write: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{sample, SamplerKind};
    use crate::schedule::{make_step_grid, Spacing};
    use crate::score::GaussianMixtureScore;
    use rand::SeedableRng;
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn refs() -> (Latent, Latent) {
        let shape = Shape::new(3, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (
            Latent::randn(shape, &mut rng),
            Latent::randn(shape, &mut rng).scale(0.5),
        )
    }

    fn ctx(ts: f64, ta: f64) -> ControlContext {
        let (s, a) = refs();
        let settings = ControlSettings {
            struct_strength: ts,
            app_strength: ta,
            struct_cutoff: DEFAULT_STRUCT_CUTOFF,
        };
        ControlContext::new(s, a, Condition::label(0), Condition::label(1), settings).unwrap()
    }

    #[test]
    fn full_statistic_replacement() {
        let c = ctx(0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = Latent::randn(c.shape(), &mut rng);
        c.match_statistics(&mut x);
        for ch in 0..3 {
            let (m, s) = mean_std(x.channel(ch));
            let (ma, sa) = mean_std(c.z0_appearance.channel(ch));
            assert!((m - ma).abs() < 1e-10 && (s - sa).abs() < 1e-10);
        }
    }

    #[test]
    fn partial_matching_moves_means_by_the_fraction() {
        let c = ctx(0.0, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Latent::randn(c.shape(), &mut rng).map(|v| v + 2.0);
        let mut y = x.clone();
        c.match_statistics(&mut y);
        for ch in 0..3 {
            let before = mean_std(x.channel(ch)).0;
            let after = mean_std(y.channel(ch)).0;
            let target = mean_std(c.z0_appearance.channel(ch)).0;
            assert!(((after - before) - 0.3 * (target - before)).abs() < 1e-10);
        }
    }

    #[test]
    fn flat_channel_is_shifted_only() {
        let c = ctx(0.0, 0.5);
        let mut x = Latent::full(c.shape(), 1.0);
        c.match_statistics(&mut x);
        assert!(x.is_finite());
        let (_, s) = mean_std(x.channel(0));
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn full_anchoring_replaces_masked_region_and_is_idempotent() {
        let mut c = ctx(1.0, 0.0);
        c.structure_mask = Latent::full(c.shape(), 1.0);
        let mut x = Latent::zeros(c.shape());
        c.anchor(&mut x);
        assert_eq!(x, c.z0_structure);

        let c = ctx(1.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut once = Latent::randn(c.shape(), &mut rng);
        c.anchor(&mut once);
        let mut twice = once.clone();
        c.anchor(&mut twice);
        assert_eq!(once, twice);
    }

    #[test]
    fn invalid_context_is_a_config_error() {
        let mut c = ctx(0.5, 0.5);
        c.app_strength = 1.5;
        assert!(c.validate().unwrap_err().is_config());
    }

    #[test]
    fn control_off_matches_plain_sampling_bit_for_bit() {
        let sched = Arc::new(NoiseSchedule::default());
        let c = ctx(0.0, 0.0);
        let shape = c.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let means = vec![
            Latent::randn(shape, &mut rng),
            Latent::randn(shape, &mut rng),
        ];
        let mut labels = BTreeMap::new();
        labels.insert(0, vec![0]);
        labels.insert(1, vec![1]);
        let model = GaussianMixtureScore::new(means, labels, sched.clone()).unwrap();
        let grid = make_step_grid(&sched, 20, Spacing::Uniform).unwrap();
        for kind in SamplerKind::ALL {
            let sampler = Sampler::new(kind);
            let step = ToyControlledStep {
                ctx: &c,
                model: &model,
                sched: &sched,
                sampler,
                omega: 3.0,
                grid_len: grid.len(),
            };
            let a = run_controlled(&step, &grid, shape, 42).unwrap();
            let b = sample(
                &sampler,
                &model,
                Condition::label(0),
                3.0,
                &grid,
                &sched,
                shape,
                42,
                None,
            )
            .unwrap();
            assert_eq!(a, b, "{kind:?}");
        }
    }

    #[test]
    fn ppm_round_trip_is_quantised_identity() {
        let (s, _) = refs();
        let img = s.map(|v| v.clamp(-1.0, 1.0));
        let bytes = encode_ppm(&img).unwrap();
        let back = decode_ppm(&bytes[..]).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in back.as_slice().iter().zip(img.as_slice()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
        assert!(decode_ppm(&b"P3\n1 1\n255\n"[..]).is_err());
        assert!(encode_ppm(&Latent::zeros(Shape::new(1, 2, 2))).is_err());
    }

    #[test]
    fn encoding_is_identity() {
        let z = Latent::zeros(Shape::new(3, 16, 16));
        assert_eq!(encode_toy_image(&z), z);
    }
}
