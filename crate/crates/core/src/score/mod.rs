//! Conditional noise predictors `eps(z, y, t)` and classifier-free guidance.
//!
//! Every model exposes a vector-Jacobian product with respect to `z`. Models
//! without an analytic Jacobian inherit a central-difference fallback.

mod gmm;
mod mlp;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use gmm::{GaussianMixtureScore, MixtureFile};
pub use mlp::{train_denoiser, ToyDenoiser, TrainConfig, TrainReport};

use crate::error::{DrfError, Result};
use crate::latent::Latent;

/// Relative step of the finite-difference Jacobian fallback.
pub const FD_REL_STEP: f64 = 1e-4;

/// A discrete condition id standing in for a text prompt. `Condition::NULL` is the
/// unconditional branch.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct Condition(pub Option<u32>);

impl Condition {
    pub const NULL: Condition = Condition(None);

    pub const fn label(id: u32) -> Self {
        Condition(Some(id))
    }

    pub fn is_null(&self) -> bool {
        self.0.is_none()
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(id) => write!(f, "y{id}"),
            None => f.write_str("null"),
        }
    }
}

pub trait ScoreModel: Send + Sync {
    /// Noise prediction; output shape equals `z.shape()`.
    fn predict(&self, z: &Latent, y: Condition, t: usize) -> Result<Latent>;

    /// `J^T cotangent` where `J = d predict / d z`.
    fn vjp(&self, z: &Latent, y: Condition, t: usize, cotangent: &Latent) -> Result<Latent> {
        fd_vjp(|x| self.predict(x, y, t), z, cotangent)
    }

    fn supports_exact_vjp(&self) -> bool {
        false
    }
}

impl<M: ScoreModel + ?Sized> ScoreModel for &M {
    fn predict(&self, z: &Latent, y: Condition, t: usize) -> Result<Latent> {
        (**self).predict(z, y, t)
    }
    fn vjp(&self, z: &Latent, y: Condition, t: usize, cotangent: &Latent) -> Result<Latent> {
        (**self).vjp(z, y, t, cotangent)
    }
    fn supports_exact_vjp(&self) -> bool {
        (**self).supports_exact_vjp()
    }
}

impl<M: ScoreModel + ?Sized> ScoreModel for Box<M> {
    fn predict(&self, z: &Latent, y: Condition, t: usize) -> Result<Latent> {
        (**self).predict(z, y, t)
    }
    fn vjp(&self, z: &Latent, y: Condition, t: usize, cotangent: &Latent) -> Result<Latent> {
        (**self).vjp(z, y, t, cotangent)
    }
    fn supports_exact_vjp(&self) -> bool {
        (**self).supports_exact_vjp()
    }
}

/// Central-difference vector-Jacobian product.
///
/// The step is `FD_REL_STEP * max(1, rms(z))`; truncation error is `O(step^2)`
/// times the third derivative of `f`. Costs `2 * D` evaluations of `f`.
pub fn fd_vjp<F>(f: F, z: &Latent, cotangent: &Latent) -> Result<Latent>
where
    F: Fn(&Latent) -> Result<Latent>,
{
    z.ensure_same_shape(cotangent)?;
    let rms = (z.as_slice().iter().map(|v| v * v).sum::<f64>() / z.len().max(1) as f64).sqrt();
    let h = FD_REL_STEP * rms.max(1.0);
    let mut probe = z.clone();
    let mut out = Latent::zeros(z.shape());
    for i in 0..z.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let plus = f(&probe)?;
        probe.as_mut_slice()[i] = orig - h;
        let minus = f(&probe)?;
        probe.as_mut_slice()[i] = orig;
        let column_dot: f64 = plus
            .as_slice()
            .iter()
            .zip(minus.as_slice())
            .zip(cotangent.as_slice())
            .map(|((p, m), u)| (p - m) * u)
            .sum();
        out.as_mut_slice()[i] = column_dot / (2.0 * h);
    }
    Ok(out)
}

fn check_guidance(y: Condition, omega: f64) -> Result<()> {
    if y.is_null() {
        return Err(DrfError::Precondition(
            "guided prediction needs a non-null condition".into(),
        ));
    }
    if !(omega >= 0.0 && omega.is_finite()) {
        return Err(DrfError::config(
            "drf.omega",
            format!("guidance scale must be finite and >= 0, got {omega}"),
        ));
    }
    Ok(())
}

/// Classifier-free guidance: `(1 + omega) * eps(z, y, t) - omega * eps(z, null, t)`.
pub fn cfg_predict<M: ScoreModel + ?Sized>(
    model: &M,
    z: &Latent,
    y: Condition,
    t: usize,
    omega: f64,
) -> Result<Latent> {
    check_guidance(y, omega)?;
    let cond = model.predict(z, y, t)?;
    if omega == 0.0 {
        return Ok(cond);
    }
    let uncond = model.predict(z, Condition::NULL, t)?;
    cond.lin_comb(1.0 + omega, &uncond, -omega)
}

/// Vector-Jacobian product of [`cfg_predict`] with respect to `z`.
pub fn cfg_vjp<M: ScoreModel + ?Sized>(
    model: &M,
    z: &Latent,
    y: Condition,
    t: usize,
    omega: f64,
    cotangent: &Latent,
) -> Result<Latent> {
    check_guidance(y, omega)?;
    let cond = model.vjp(z, y, t, cotangent)?;
    if omega == 0.0 {
        return Ok(cond);
    }
    let uncond = model.vjp(z, Condition::NULL, t, cotangent)?;
    cond.lin_comb(1.0 + omega, &uncond, -omega)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::Shape;

    /// eps = A z with a fixed non-symmetric A, plus an unconditional branch eps = 0.5 z.
    struct Linear {
        a: Vec<Vec<f64>>,
    }

    impl ScoreModel for Linear {
        fn predict(&self, z: &Latent, y: Condition, _t: usize) -> Result<Latent> {
            if y.is_null() {
                return Ok(z.scale(0.5));
            }
            let out = self
                .a
                .iter()
                .map(|row| row.iter().zip(z.as_slice()).map(|(a, x)| a * x).sum())
                .collect();
            Latent::from_vec(z.shape(), out)
        }
    }

    fn model() -> Linear {
        Linear {
            a: vec![
                vec![1.0, 2.0, 0.0],
                vec![-1.0, 0.5, 3.0],
                vec![0.0, 0.0, 4.0],
            ],
        }
    }

    #[test]
    fn fd_vjp_recovers_transpose_product() {
        let m = model();
        let z = Latent::flat(vec![0.3, -1.2, 2.0]);
        let u = Latent::flat(vec![1.0, 2.0, -1.0]);
        let got = m.vjp(&z, Condition::label(0), 0, &u).unwrap();
        // A^T u
        let want = [1.0 - 2.0, 2.0 + 0.5 * 2.0, 3.0 * 2.0 - 4.0];
        for (g, w) in got.as_slice().iter().zip(want) {
            assert!((g - w).abs() < 1e-8, "{g} vs {w}");
        }
        assert!(!m.supports_exact_vjp());
    }

    #[test]
    fn cfg_scalar_example() {
        struct Fixed;
        impl ScoreModel for Fixed {
            fn predict(&self, z: &Latent, y: Condition, _t: usize) -> Result<Latent> {
                Ok(Latent::full(z.shape(), if y.is_null() { 0.5 } else { 1.0 }))
            }
        }
        let z = Latent::scalar(0.0);
        let out = cfg_predict(&Fixed, &z, Condition::label(1), 10, 1.0).unwrap();
        assert_eq!(out.as_slice(), &[1.5]);
        let off = cfg_predict(&Fixed, &z, Condition::label(1), 10, 0.0).unwrap();
        assert_eq!(off.as_slice(), &[1.0]);
    }

    #[test]
    fn cfg_rejects_null_condition_and_negative_scale() {
        let m = model();
        let z = Latent::zeros(Shape::flat(3));
        assert!(matches!(
            cfg_predict(&m, &z, Condition::NULL, 1, 1.0),
            Err(DrfError::Precondition(_))
        ));
        assert!(matches!(
            cfg_predict(&m, &z, Condition::label(0), 1, -0.5),
            Err(DrfError::Config { .. })
        ));
        assert!(cfg_vjp(&m, &z, Condition::NULL, 1, 1.0, &z).is_err());
    }

    #[test]
    fn cfg_is_affine_in_omega() {
        let m = model();
        let z = Latent::flat(vec![0.7, -0.1, 0.4]);
        let y = Condition::label(2);
        let p0 = cfg_predict(&m, &z, y, 0, 1.0).unwrap();
        let p1 = cfg_predict(&m, &z, y, 0, 2.0).unwrap();
        let p2 = cfg_predict(&m, &z, y, 0, 3.0).unwrap();
        for i in 0..3 {
            let (a, b, c) = (p0.as_slice()[i], p1.as_slice()[i], p2.as_slice()[i]);
            assert!(((b - a) - (c - b)).abs() < 1e-12);
        }
    }

    #[test]
    fn cfg_vjp_identity_when_branches_agree() {
        struct Same;
        impl ScoreModel for Same {
            fn predict(&self, z: &Latent, _y: Condition, _t: usize) -> Result<Latent> {
                Ok(z.map(|v| v.sin()))
            }
        }
        let z = Latent::flat(vec![0.2, 0.9]);
        let u = Latent::flat(vec![1.0, -1.0]);
        let a = cfg_vjp(&Same, &z, Condition::label(0), 0, 0.0, &u).unwrap();
        let b = cfg_vjp(&Same, &z, Condition::label(0), 0, 7.0, &u).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-9);
        }
        let p = cfg_predict(&Same, &z, Condition::label(0), 0, 4.0).unwrap();
        let q = Same.predict(&z, Condition::NULL, 0).unwrap();
        for (x, y) in p.as_slice().iter().zip(q.as_slice()) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}
