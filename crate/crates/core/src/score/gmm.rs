//! Gaussian mixture data with an exact optimal denoiser.
//!
//! Data are drawn from `sum_k w_k N(mu_k, S)` with a shared covariance
//! `S = s2 * I + U U^T` (`s2 = 1` and no factors by default). Under the forward
//! process the marginal at `t` is a mixture with covariance `V_t = a S + (1 - a) I`,
//! `a = alpha_bar[t]`, so the optimal noise prediction is
//!
//! `eps*(z) = sqrt(1 - a) * V_t^{-1} (z - sqrt(a) * m(z))`
//!
//! where `m(z)` is the responsibility-weighted mean. `V_t^{-1}` is applied through
//! the Woodbury identity, so the cost per call is `O(K D + R^2 D)`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Condition, ScoreModel};
use crate::error::{DrfError, Result};
use crate::latent::{Latent, Shape};
use crate::schedule::NoiseSchedule;

/// JSON form of a [`GaussianMixtureScore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureFile {
    pub shape: Shape,
    pub means: Vec<Vec<f64>>,
    /// Condition id to component indices.
    pub labels: BTreeMap<u32, Vec<usize>>,
    #[serde(default = "unit")]
    pub data_variance: f64,
    /// Columns of the low-rank covariance factor `U`.
    #[serde(default)]
    pub factors: Vec<Vec<f64>>,
}

fn unit() -> f64 {
    1.0
}

#[derive(Clone, Debug)]
pub struct GaussianMixtureScore {
    shape: Shape,
    dim: usize,
    /// `K x D`, row-major.
    means: Vec<f64>,
    count: usize,
    data_variance: f64,
    /// `R x D`, row-major.
    factors: Vec<f64>,
    rank: usize,
    labels: BTreeMap<u32, Vec<usize>>,
    all: Vec<usize>,
    sched: Arc<NoiseSchedule>,
    mean_sq: Vec<f64>,
    /// `U^T mu_k`, `K x R`.
    mean_proj: Vec<f64>,
    /// `U^T U`, `R x R`.
    gram: Vec<f64>,
}

/// Per-call quantities for one `(condition, t)` pair.
struct Posterior<'a> {
    a: f64,
    v: f64,
    /// Cholesky factor of `(v / a) I + U^T U`, lower triangle, `R x R`.
    chol: Vec<f64>,
    idx: &'a [usize],
    resp: Vec<f64>,
    mean: Vec<f64>,
}

impl GaussianMixtureScore {
    /// Unit-variance isotropic components. `labels` maps each condition id to the
    /// components it selects; the null condition always uses every component.
    pub fn new(
        means: Vec<Latent>,
        labels: BTreeMap<u32, Vec<usize>>,
        sched: Arc<NoiseSchedule>,
    ) -> Result<Self> {
        Self::with_covariance(means, labels, 1.0, Vec::new(), sched)
    }

    /// Components sharing the covariance `data_variance * I + sum_r f_r f_r^T`.
    pub fn with_covariance(
        means: Vec<Latent>,
        labels: BTreeMap<u32, Vec<usize>>,
        data_variance: f64,
        factors: Vec<Latent>,
        sched: Arc<NoiseSchedule>,
    ) -> Result<Self> {
        let first = means.first().ok_or_else(|| {
            DrfError::config("model.means", "mixture needs at least one component")
        })?;
        let shape = first.shape();
        for m in means.iter().chain(&factors) {
            first.ensure_same_shape(m)?;
            m.ensure_finite(|| "mixture parameters must be finite".into())?;
        }
        if !(data_variance > 0.0 && data_variance.is_finite()) {
            return Err(DrfError::config(
                "model.data_variance",
                format!("must be finite and > 0, got {data_variance}"),
            ));
        }
        let count = means.len();
        for (label, idx) in &labels {
            if idx.is_empty() {
                return Err(DrfError::config(
                    "model.labels",
                    format!("label {label} selects no components"),
                ));
            }
            if let Some(bad) = idx.iter().find(|&&i| i >= count) {
                return Err(DrfError::config(
                    "model.labels",
                    format!("label {label} references component {bad}, only {count} exist"),
                ));
            }
        }
        let dim = shape.len();
        let rank = factors.len();
        let means: Vec<f64> = means.into_iter().flat_map(Latent::into_vec).collect();
        let factors: Vec<f64> = factors.into_iter().flat_map(Latent::into_vec).collect();
        let row = |buf: &[f64], i: usize| -> Vec<f64> { buf[i * dim..(i + 1) * dim].to_vec() };
        let mean_sq = (0..count)
            .map(|k| {
                dot(
                    &means[k * dim..(k + 1) * dim],
                    &means[k * dim..(k + 1) * dim],
                )
            })
            .collect();
        let mut mean_proj = vec![0.0; count * rank];
        for k in 0..count {
            let mk = row(&means, k);
            for r in 0..rank {
                mean_proj[k * rank + r] = dot(&factors[r * dim..(r + 1) * dim], &mk);
            }
        }
        let mut gram = vec![0.0; rank * rank];
        for i in 0..rank {
            for j in 0..rank {
                gram[i * rank + j] = dot(
                    &factors[i * dim..(i + 1) * dim],
                    &factors[j * dim..(j + 1) * dim],
                );
            }
        }
        Ok(Self {
            shape,
            dim,
            means,
            count,
            data_variance,
            factors,
            rank,
            labels,
            all: (0..count).collect(),
            sched,
            mean_sq,
            mean_proj,
            gram,
        })
    }

    pub fn from_file(file: MixtureFile, sched: Arc<NoiseSchedule>) -> Result<Self> {
        let to_latent = |v: Vec<f64>| Latent::from_vec(file.shape, v);
        let means = file
            .means
            .into_iter()
            .map(to_latent)
            .collect::<Result<Vec<_>>>()?;
        let factors = file
            .factors
            .into_iter()
            .map(to_latent)
            .collect::<Result<Vec<_>>>()?;
        Self::with_covariance(means, file.labels, file.data_variance, factors, sched)
    }

    pub fn to_file(&self) -> MixtureFile {
        MixtureFile {
            shape: self.shape,
            means: self.means.chunks(self.dim).map(<[f64]>::to_vec).collect(),
            labels: self.labels.clone(),
            data_variance: self.data_variance,
            factors: self
                .factors
                .chunks(self.dim.max(1))
                .map(<[f64]>::to_vec)
                .collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>, sched: Arc<NoiseSchedule>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DrfError::io(path, e))?;
        Self::from_file(serde_json::from_str(&text)?, sched)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_file())?;
        std::fs::write(path, text).map_err(|e| DrfError::io(path, e))
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn component_count(&self) -> usize {
        self.count
    }

    pub fn mean(&self, k: usize) -> Latent {
        Latent::from_vec(
            self.shape,
            self.means[k * self.dim..(k + 1) * self.dim].to_vec(),
        )
        .expect("stored means match the model shape")
    }

    pub fn data_variance(&self) -> f64 {
        self.data_variance
    }

    pub fn labels(&self) -> &BTreeMap<u32, Vec<usize>> {
        &self.labels
    }

    fn components(&self, y: Condition) -> Result<&[usize]> {
        match y.0 {
            None => Ok(&self.all),
            Some(id) => self.labels.get(&id).map(Vec::as_slice).ok_or_else(|| {
                DrfError::Precondition(format!("condition {y} is not defined by the mixture"))
            }),
        }
    }

    fn mean_row(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    fn factor_row(&self, r: usize) -> &[f64] {
        &self.factors[r * self.dim..(r + 1) * self.dim]
    }

    /// Applies `V_t^{-1}` to `w`.
    fn precision(&self, post: &Posterior<'_>, w: &[f64]) -> Vec<f64> {
        if self.rank == 0 {
            return w.iter().map(|x| x / post.v).collect();
        }
        let proj: Vec<f64> = (0..self.rank).map(|r| dot(self.factor_row(r), w)).collect();
        let coef = chol_solve(&post.chol, self.rank, &proj);
        let mut out = w.to_vec();
        for (r, c) in coef.iter().enumerate() {
            for (o, u) in out.iter_mut().zip(self.factor_row(r)) {
                *o -= c * u;
            }
        }
        out.iter_mut().for_each(|o| *o /= post.v);
        out
    }

    fn posterior(&self, z: &Latent, y: Condition, t: usize) -> Result<Posterior<'_>> {
        if z.shape() != self.shape {
            return Err(DrfError::Shape {
                expected: self.shape,
                got: z.shape(),
            });
        }
        self.sched.check_t(t)?;
        if t == 0 {
            return Err(DrfError::Precondition(
                "score is undefined at the clean boundary t = 0".into(),
            ));
        }
        let idx = self.components(y)?;
        let a = self.sched.alpha_bar(t);
        let v = a * self.data_variance + 1.0 - a;
        let mut chol = Vec::new();
        if self.rank > 0 {
            chol = self.gram.clone();
            for i in 0..self.rank {
                chol[i * self.rank + i] += v / a;
            }
            cholesky(&mut chol, self.rank)?;
        }
        let mut post = Posterior {
            a,
            v,
            chol,
            idx,
            resp: Vec::new(),
            mean: Vec::new(),
        };
        let pz = self.precision(&post, z.as_slice());
        let sa = a.sqrt();
        let logits: Vec<f64> = idx
            .iter()
            .map(|&k| {
                let mut quad = self.mean_sq[k];
                if self.rank > 0 {
                    let p = &self.mean_proj[k * self.rank..(k + 1) * self.rank];
                    quad -= dot(p, &chol_solve(&post.chol, self.rank, p));
                }
                sa * dot(self.mean_row(k), &pz) - 0.5 * a * quad / v
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut resp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = resp.iter().sum();
        resp.iter_mut().for_each(|r| *r /= total);
        let mut mean = vec![0.0; self.dim];
        for (&k, &r) in idx.iter().zip(&resp) {
            for (m, mu) in mean.iter_mut().zip(self.mean_row(k)) {
                *m += r * mu;
            }
        }
        post.resp = resp;
        post.mean = mean;
        Ok(post)
    }

    /// Posterior mean `E[x0 | z_t]` under the conditional mixture.
    pub fn denoise(&self, z: &Latent, y: Condition, t: usize) -> Result<Latent> {
        let eps = self.predict(z, y, t)?;
        let a = self.sched.alpha_bar(t);
        z.lin_comb(1.0 / a.sqrt(), &eps, -(1.0 - a).sqrt() / a.sqrt())
    }
}

impl ScoreModel for GaussianMixtureScore {
    fn predict(&self, z: &Latent, y: Condition, t: usize) -> Result<Latent> {
        let post = self.posterior(z, y, t)?;
        let sa = post.a.sqrt();
        let resid: Vec<f64> = z
            .as_slice()
            .iter()
            .zip(&post.mean)
            .map(|(z, m)| z - sa * m)
            .collect();
        let scale = (1.0 - post.a).sqrt();
        let out = self
            .precision(&post, &resid)
            .into_iter()
            .map(|x| scale * x)
            .collect();
        Latent::from_vec(self.shape, out)
    }

    /// `J = sqrt(1 - a) (P - a P C P)` with `P = V_t^{-1}` and `C` the responsibility
    /// covariance of the selected means. `J` is symmetric, so `J^T u = J u`.
    fn vjp(&self, z: &Latent, y: Condition, t: usize, cotangent: &Latent) -> Result<Latent> {
        z.ensure_same_shape(cotangent)?;
        let post = self.posterior(z, y, t)?;
        let pu = self.precision(&post, cotangent.as_slice());
        let m_dot = dot(&post.mean, &pu);
        let mut cpu = vec![0.0; self.dim];
        for (&k, &r) in post.idx.iter().zip(&post.resp) {
            let s = r * (dot(self.mean_row(k), &pu) - m_dot);
            if s != 0.0 {
                for (c, mu) in cpu.iter_mut().zip(self.mean_row(k)) {
                    *c += s * mu;
                }
            }
        }
        let pcpu = self.precision(&post, &cpu);
        let scale = (1.0 - post.a).sqrt();
        let out = pu
            .iter()
            .zip(&pcpu)
            .map(|(p, q)| scale * (p - post.a * q))
            .collect();
        Latent::from_vec(self.shape, out)
    }

    fn supports_exact_vjp(&self) -> bool {
        true
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place Cholesky of a symmetric positive definite `n x n` matrix (lower triangle).
fn cholesky(m: &mut [f64], n: usize) -> Result<()> {
    for j in 0..n {
        let mut d = m[j * n + j];
        for k in 0..j {
            d -= m[j * n + k] * m[j * n + k];
        }
        if !(d > 0.0) {
            return Err(DrfError::Singularity {
                context: "mixture covariance is not positive definite".into(),
            });
        }
        let d = d.sqrt();
        m[j * n + j] = d;
        for i in j + 1..n {
            let mut s = m[i * n + j];
            for k in 0..j {
                s -= m[i * n + k] * m[j * n + k];
            }
            m[i * n + j] = s / d;
        }
    }
    Ok(())
}

fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::fd_vjp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sched() -> Arc<NoiseSchedule> {
        Arc::new(NoiseSchedule::default())
    }

    fn random_model(
        rng: &mut ChaCha8Rng,
        dim: usize,
        count: usize,
        rank: usize,
        s2: f64,
    ) -> GaussianMixtureScore {
        let shape = Shape::flat(dim);
        let means = (0..count)
            .map(|_| Latent::randn(shape, rng).scale(1.5))
            .collect();
        let factors = (0..rank)
            .map(|_| Latent::randn(shape, rng).scale(0.6))
            .collect();
        let mut labels = BTreeMap::new();
        labels.insert(0, (0..count.div_ceil(2)).collect());
        labels.insert(1, (count.div_ceil(2)..count).collect::<Vec<_>>());
        labels.retain(|_, v: &mut Vec<usize>| !v.is_empty());
        GaussianMixtureScore::with_covariance(means, labels, s2, factors, sched()).unwrap()
    }

    /// Dense `n x n` inverse and log-determinant by Gauss-Jordan elimination.
    fn inverse_logdet(mut a: Vec<f64>, n: usize) -> (Vec<f64>, f64) {
        let mut inv = vec![0.0; n * n];
        for i in 0..n {
            inv[i * n + i] = 1.0;
        }
        let mut logdet = 0.0;
        for c in 0..n {
            let p = (c..n)
                .max_by(|&i, &j| a[i * n + c].abs().total_cmp(&a[j * n + c].abs()))
                .unwrap();
            for k in 0..n {
                a.swap(c * n + k, p * n + k);
                inv.swap(c * n + k, p * n + k);
            }
            let d = a[c * n + c];
            logdet += d.abs().ln();
            for k in 0..n {
                a[c * n + k] /= d;
                inv[c * n + k] /= d;
            }
            for r in 0..n {
                if r != c {
                    let f = a[r * n + c];
                    for k in 0..n {
                        a[r * n + k] -= f * a[c * n + k];
                        inv[r * n + k] -= f * inv[c * n + k];
                    }
                }
            }
        }
        (inv, logdet)
    }

    /// Log marginal density at `t`, built from the dense covariance.
    fn log_marginal(m: &GaussianMixtureScore, z: &[f64], y: Condition, t: usize) -> f64 {
        let n = m.dim;
        let a = m.sched.alpha_bar(t);
        let mut cov = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let low_rank: f64 = (0..m.rank)
                    .map(|r| m.factor_row(r)[i] * m.factor_row(r)[j])
                    .sum();
                cov[i * n + j] = a * low_rank
                    + if i == j {
                        a * m.data_variance + 1.0 - a
                    } else {
                        0.0
                    };
            }
        }
        let (inv, logdet) = inverse_logdet(cov, n);
        let idx = m.components(y).unwrap();
        let terms: Vec<f64> = idx
            .iter()
            .map(|&k| {
                let d: Vec<f64> = z
                    .iter()
                    .zip(m.mean_row(k))
                    .map(|(z, mu)| z - a.sqrt() * mu)
                    .collect();
                let mut q = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        q += d[i] * inv[i * n + j] * d[j];
                    }
                }
                -0.5 * q - 0.5 * logdet
            })
            .collect();
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln() - (idx.len() as f64).ln()
    }

    #[test]
    fn predict_matches_numerical_score_of_marginal_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for trial in 0..60 {
            let dim = 1 + trial % 3;
            let rank = trial % 2;
            let var = rng.random_range(0.2..1.5);
            let m = random_model(&mut rng, dim, 1 + trial % 4, rank, var);
            let t = rng.random_range(1..=1000);
            let z = Latent::randn(Shape::flat(dim), &mut rng).scale(1.3);
            let y = if trial % 3 == 0 {
                Condition::NULL
            } else {
                Condition::label(0)
            };
            let eps = m.predict(&z, y, t).unwrap();
            let a = m.sched.alpha_bar(t);
            let h = 1e-5;
            for i in 0..dim {
                let mut zp = z.as_slice().to_vec();
                let mut zm = zp.clone();
                zp[i] += h;
                zm[i] -= h;
                let score = (log_marginal(&m, &zp, y, t) - log_marginal(&m, &zm, y, t)) / (2.0 * h);
                let want = -(1.0 - a).sqrt() * score;
                let got = eps.as_slice()[i];
                let rel = (got - want).abs() / want.abs().max(1e-3);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn single_unit_component_is_affine() {
        let mu = Latent::flat(vec![0.5, -2.0]);
        let mut labels = BTreeMap::new();
        labels.insert(0, vec![0]);
        let m = GaussianMixtureScore::new(vec![mu.clone()], labels, sched()).unwrap();
        let z = Latent::flat(vec![0.3, 0.1]);
        let t = 400;
        let a = m.sched.alpha_bar(t);
        let eps = m.predict(&z, Condition::label(0), t).unwrap();
        for i in 0..2 {
            let want = (1.0 - a).sqrt() * (z.as_slice()[i] - a.sqrt() * mu.as_slice()[i]);
            assert!((eps.as_slice()[i] - want).abs() < 1e-14);
        }
        let u = Latent::flat(vec![1.0, -3.0]);
        let g = m.vjp(&z, Condition::label(0), t, &u).unwrap();
        for i in 0..2 {
            assert!((g.as_slice()[i] - (1.0 - a).sqrt() * u.as_slice()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn exact_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let dim = 1 + trial % 8;
            let m = random_model(&mut rng, dim, 3, trial % 3, 0.3);
            let t = rng.random_range(1..=1000);
            let z = Latent::randn(Shape::flat(dim), &mut rng);
            let u = Latent::randn(Shape::flat(dim), &mut rng);
            let y = Condition::label(0);
            let exact = m.vjp(&z, y, t, &u).unwrap();
            let fd = fd_vjp(|x| m.predict(x, y, t), &z, &u).unwrap();
            let err = exact.sub(&fd).unwrap().norm() / exact.norm().max(1e-8);
            assert!(err < 1e-4, "trial {trial}: {err}");
        }
    }

    #[test]
    fn file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_model(&mut rng, 4, 3, 2, 0.5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mix.json");
        m.save(&path).unwrap();
        let back = GaussianMixtureScore::load(&path, sched()).unwrap();
        assert_eq!(back.to_file(), m.to_file());
        let z = Latent::randn(Shape::flat(4), &mut rng);
        assert_eq!(
            back.predict(&z, Condition::label(1), 300).unwrap(),
            m.predict(&z, Condition::label(1), 300).unwrap()
        );
    }

    #[test]
    fn rejects_bad_labels_and_unknown_conditions() {
        let mut labels = BTreeMap::new();
        labels.insert(0, vec![3]);
        let err = GaussianMixtureScore::new(vec![Latent::zeros(Shape::flat(2))], labels, sched())
            .unwrap_err();
        assert!(err.is_config());
        let mut labels = BTreeMap::new();
        labels.insert(0, vec![0]);
        let m = GaussianMixtureScore::new(vec![Latent::zeros(Shape::flat(2))], labels, sched())
            .unwrap();
        assert!(m
            .predict(&Latent::zeros(Shape::flat(2)), Condition::label(7), 10)
            .is_err());
        assert!(m
            .predict(&Latent::zeros(Shape::flat(3)), Condition::label(0), 10)
            .is_err());
    }
}
