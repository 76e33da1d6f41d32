//! A small fully connected denoiser trained with the standard noise-prediction objective.
//!
//! The network sees `z ++ time embedding ++ one-hot condition` and outputs a clean
//! estimate `x0_hat`; the noise prediction is recovered as
//! `eps_hat = (z - sqrt(a) x0_hat) / sqrt(1 - a)`. The training loss is still the
//! mean squared error in `eps`.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Condition, ScoreModel};
use crate::error::{DrfError, Result};
use crate::latent::{Latent, Shape};
use crate::schedule::NoiseSchedule;

const MAGIC: &[u8; 8] = b"DRFMLP01";
const TIME_DIM: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub hidden: usize,
    pub batch_size: usize,
    /// Minibatches per epoch; `0` means `ceil(len / batch_size)`.
    pub batches_per_epoch: usize,
    /// Probability of replacing a sample's condition with the null condition.
    pub cond_dropout: f64,
    /// Global gradient-norm clip applied to every minibatch step.
    pub grad_clip: f64,
    /// The learning rate decays linearly from `lr` to `lr * lr_final_frac`.
    pub lr_final_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-2,
            seed: 0,
            hidden: 128,
            batch_size: 32,
            batches_per_epoch: 0,
            cond_dropout: 0.1,
            grad_clip: 1.0,
            lr_final_frac: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss over the last epoch.
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    shape: Shape,
    labels: usize,
    hidden: usize,
    time_dim: usize,
    params: usize,
    train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct ToyDenoiser {
    shape: Shape,
    /// Number of non-null condition ids; the one-hot has `labels + 1` slots.
    labels: usize,
    hidden: usize,
    params: Vec<f64>,
    train: TrainConfig,
    sched: Arc<NoiseSchedule>,
}

/// Offsets of the weight blocks inside the flat parameter vector.
#[derive(Clone, Copy)]
struct Layout {
    input: usize,
    hidden: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    total: usize,
}

impl Layout {
    fn new(dim: usize, labels: usize, hidden: usize) -> Self {
        let input = dim + TIME_DIM + labels + 1;
        let w1 = 0;
        let b1 = w1 + hidden * input;
        let w2 = b1 + hidden;
        let b2 = w2 + hidden * hidden;
        let w3 = b2 + hidden;
        let b3 = w3 + dim * hidden;
        Self {
            input,
            hidden,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            total: b3 + dim,
        }
    }
}

/// Activations kept for the backward pass.
struct Tape {
    x: Vec<f64>,
    pre1: Vec<f64>,
    h1: Vec<f64>,
    pre2: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `out[i] = b[i] + sum_j w[i * cols + j] * x[j]`.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(i, bi)| {
            bi + w[i * cols..(i + 1) * cols]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .collect()
}

/// `W^T g` for a `rows x cols` matrix.
fn affine_t(w: &[f64], g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, gi) in g.iter().enumerate() {
        if *gi != 0.0 {
            for (o, wij) in out.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
                *o += gi * wij;
            }
        }
    }
    out
}

fn time_embedding(t: usize) -> [f64; TIME_DIM] {
    let mut out = [0.0; TIME_DIM];
    let half = TIME_DIM / 2;
    for j in 0..half {
        let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
        out[j] = (t as f64 * freq).sin();
        out[half + j] = (t as f64 * freq).cos();
    }
    out
}

impl ToyDenoiser {
    fn init(shape: Shape, labels: usize, train: TrainConfig, sched: Arc<NoiseSchedule>) -> Self {
        let layout = Layout::new(shape.len(), labels, train.hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let mut params = vec![0.0; layout.total];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, gain: f64| {
            let scale = gain / (fan_in as f64).sqrt();
            for p in &mut params[range] {
                *p = scale * rng.sample::<f64, _>(StandardNormal);
            }
        };
        fill(layout.w1..layout.b1, layout.input, 1.0);
        fill(layout.w2..layout.b2, layout.hidden, 1.0);
        fill(layout.w3..layout.b3, layout.hidden, 0.1);
        Self {
            shape,
            labels,
            hidden: train.hidden,
            params,
            train,
            sched,
        }
    }

    fn layout(&self) -> Layout {
        Layout::new(self.shape.len(), self.labels, self.hidden)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train
    }

    fn encode_input(&self, z: &[f64], y: Condition, t: usize) -> Result<Vec<f64>> {
        let slot = match y.0 {
            None => self.labels,
            Some(id) if (id as usize) < self.labels => id as usize,
            Some(_) => {
                return Err(DrfError::Precondition(format!(
                    "condition {y} is outside the {} labels seen in training",
                    self.labels
                )))
            }
        };
        let mut x = Vec::with_capacity(self.layout().input);
        x.extend_from_slice(z);
        x.extend_from_slice(&time_embedding(t));
        x.extend((0..=self.labels).map(|i| if i == slot { 1.0 } else { 0.0 }));
        Ok(x)
    }

    fn forward(&self, x: Vec<f64>) -> Tape {
        let l = self.layout();
        let p = &self.params;
        let pre1 = affine(&p[l.w1..l.b1], &p[l.b1..l.w2], &x);
        let h1: Vec<f64> = pre1.iter().map(|&v| silu(v)).collect();
        let pre2 = affine(&p[l.w2..l.b2], &p[l.b2..l.w3], &h1);
        let h2: Vec<f64> = pre2.iter().map(|&v| silu(v)).collect();
        let out = affine(&p[l.w3..l.b3], &p[l.b3..l.total], &h2);
        Tape {
            x,
            pre1,
            h1,
            pre2,
            h2,
            out,
        }
    }

    /// Backpropagates `d_out`; accumulates parameter gradients into `grad` when given,
    /// and returns the gradient with respect to the network input.
    fn backward(&self, tape: &Tape, d_out: &[f64], mut grad: Option<&mut [f64]>) -> Vec<f64> {
        let l = self.layout();
        let p = &self.params;
        if let Some(g) = grad.as_deref_mut() {
            for (i, d) in d_out.iter().enumerate() {
                g[l.b3 + i] += d;
                for (gw, h) in g[l.w3 + i * l.hidden..l.w3 + (i + 1) * l.hidden]
                    .iter_mut()
                    .zip(&tape.h2)
                {
                    *gw += d * h;
                }
            }
        }
        let dh2 = affine_t(&p[l.w3..l.b3], d_out, l.hidden);
        let dpre2: Vec<f64> = dh2
            .iter()
            .zip(&tape.pre2)
            .map(|(d, x)| d * silu_grad(*x))
            .collect();
        if let Some(g) = grad.as_deref_mut() {
            for (i, d) in dpre2.iter().enumerate() {
                g[l.b2 + i] += d;
                for (gw, h) in g[l.w2 + i * l.hidden..l.w2 + (i + 1) * l.hidden]
                    .iter_mut()
                    .zip(&tape.h1)
                {
                    *gw += d * h;
                }
            }
        }
        let dh1 = affine_t(&p[l.w2..l.b2], &dpre2, l.hidden);
        let dpre1: Vec<f64> = dh1
            .iter()
            .zip(&tape.pre1)
            .map(|(d, x)| d * silu_grad(*x))
            .collect();
        if let Some(g) = grad {
            for (i, d) in dpre1.iter().enumerate() {
                g[l.b1 + i] += d;
                for (gw, x) in g[l.w1 + i * l.input..l.w1 + (i + 1) * l.input]
                    .iter_mut()
                    .zip(&tape.x)
                {
                    *gw += d * x;
                }
            }
        }
        affine_t(&p[l.w1..l.b1], &dpre1, l.input)
    }

    fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.sched.check_t(t)?;
        if t == 0 {
            return Err(DrfError::Precondition(
                "noise prediction is undefined at t = 0".into(),
            ));
        }
        let a = self.sched.alpha_bar(t);
        Ok((a.sqrt(), (1.0 - a).sqrt()))
    }

    fn check_shape(&self, z: &Latent) -> Result<()> {
        if z.shape() != self.shape {
            return Err(DrfError::Shape {
                expected: self.shape,
                got: z.shape(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = serde_json::to_vec(&Header {
            shape: self.shape,
            labels: self.labels,
            hidden: self.hidden,
            time_dim: TIME_DIM,
            params: self.params.len(),
            train: self.train.clone(),
        })?;
        let mut buf = Vec::with_capacity(16 + header.len() + 8 * self.params.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        let mut file = std::fs::File::create(path).map_err(|e| DrfError::io(path, e))?;
        file.write_all(&buf).map_err(|e| DrfError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, sched: Arc<NoiseSchedule>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| DrfError::io(path, e))?;
        let bad = |why: &str| DrfError::Format(format!("{}: {why}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a denoiser weight file"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body])?;
        if header.time_dim != TIME_DIM {
            return Err(bad("unsupported time embedding size"));
        }
        let layout = Layout::new(header.shape.len(), header.labels, header.hidden);
        if header.params != layout.total || bytes.len() - body != 8 * layout.total {
            return Err(bad("parameter count does not match the header"));
        }
        let params = bytes[body..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            shape: header.shape,
            labels: header.labels,
            hidden: header.hidden,
            params,
            train: header.train,
            sched,
        })
    }
}

impl ScoreModel for ToyDenoiser {
    fn predict(&self, z: &Latent, y: Condition, t: usize) -> Result<Latent> {
        self.check_shape(z)?;
        let (sa, sn) = self.coefficients(t)?;
        let tape = self.forward(self.encode_input(z.as_slice(), y, t)?);
        let out = z
            .as_slice()
            .iter()
            .zip(&tape.out)
            .map(|(z, x0)| (z - sa * x0) / sn)
            .collect();
        Latent::from_vec(self.shape, out)
    }

    fn vjp(&self, z: &Latent, y: Condition, t: usize, cotangent: &Latent) -> Result<Latent> {
        self.check_shape(z)?;
        z.ensure_same_shape(cotangent)?;
        let (sa, sn) = self.coefficients(t)?;
        let tape = self.forward(self.encode_input(z.as_slice(), y, t)?);
        let through = self.backward(&tape, cotangent.as_slice(), None);
        let out = cotangent
            .as_slice()
            .iter()
            .zip(&through)
            .map(|(u, g)| (u - sa * g) / sn)
            .collect();
        Latent::from_vec(self.shape, out)
    }

    fn supports_exact_vjp(&self) -> bool {
        true
    }
}

/// Trains a [`ToyDenoiser`] by minibatch SGD on random `(t, eps)` draws.
pub fn train_denoiser(
    dataset: &[(Latent, Condition)],
    sched: Arc<NoiseSchedule>,
    config: &TrainConfig,
) -> Result<(ToyDenoiser, TrainReport)> {
    let first = dataset
        .first()
        .ok_or_else(|| DrfError::config("train.dataset", "dataset must not be empty"))?;
    if config.epochs == 0 {
        return Err(DrfError::config("train.epochs", "must be >= 1"));
    }
    if !(config.lr > 0.0 && config.lr.is_finite()) {
        return Err(DrfError::config(
            "train.lr",
            format!("must be finite and > 0, got {}", config.lr),
        ));
    }
    if config.hidden == 0 || config.batch_size == 0 {
        return Err(DrfError::config(
            "train.hidden",
            "hidden width and batch size must be >= 1",
        ));
    }
    if !(0.0..=1.0).contains(&config.cond_dropout) {
        return Err(DrfError::config("train.cond_dropout", "must lie in [0, 1]"));
    }
    for (x, _) in dataset {
        first.0.ensure_same_shape(x)?;
    }
    let labels = dataset
        .iter()
        .filter_map(|(_, y)| y.0)
        .max()
        .map_or(0, |m| m as usize + 1);
    let mut model = ToyDenoiser::init(first.0.shape(), labels, config.clone(), sched);
    let dim = model.shape.len();
    let total_t = model.sched.train_steps();
    let batches = if config.batches_per_epoch == 0 {
        dataset.len().div_ceil(config.batch_size)
    } else {
        config.batches_per_epoch
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0fda7a);
    let mut grad = vec![0.0; model.params.len()];
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let progress = if config.epochs > 1 {
            epoch as f64 / (config.epochs - 1) as f64
        } else {
            0.0
        };
        let lr = config.lr * (1.0 - (1.0 - config.lr_final_frac) * progress);
        let mut epoch_loss = 0.0;
        for _ in 0..batches {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            for _ in 0..config.batch_size {
                let (x0, y) = &dataset[rng.random_range(0..dataset.len())];
                let t = rng.random_range(1..=total_t);
                let y = if rng.random::<f64>() < config.cond_dropout {
                    Condition::NULL
                } else {
                    *y
                };
                let eps: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let a = model.sched.alpha_bar(t);
                let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
                let z: Vec<f64> = x0
                    .as_slice()
                    .iter()
                    .zip(&eps)
                    .map(|(x, e)| sa * x + sn * e)
                    .collect();
                let tape = model.forward(model.encode_input(&z, y, t)?);
                let mut d_out = vec![0.0; dim];
                for i in 0..dim {
                    let pred = (z[i] - sa * tape.out[i]) / sn;
                    let r = pred - eps[i];
                    batch_loss += r * r / dim as f64;
                    d_out[i] = 2.0 * r / dim as f64 * (-sa / sn);
                }
                model.backward(&tape, &d_out, Some(&mut grad));
            }
            let n = config.batch_size as f64;
            batch_loss /= n;
            if !batch_loss.is_finite() {
                return Err(DrfError::Divergence {
                    epoch,
                    loss: batch_loss,
                });
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt() / n;
            let step = if config.grad_clip > 0.0 && norm > config.grad_clip {
                lr * config.grad_clip / norm / n
            } else {
                lr / n
            };
            for (p, g) in model.params.iter_mut().zip(&grad) {
                *p -= step * g;
            }
            epoch_loss += batch_loss;
        }
        epoch_losses.push(epoch_loss / batches as f64);
        if !model.params.iter().all(|p| p.is_finite()) {
            return Err(DrfError::Divergence {
                epoch,
                loss: f64::NAN,
            });
        }
    }
    let final_loss = *epoch_losses.last().expect("at least one epoch");
    Ok((
        model,
        TrainReport {
            final_loss,
            epoch_losses,
        },
    ))
}
