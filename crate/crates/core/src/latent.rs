//! Dense real-valued latent arrays (`C x H x W`, or flat `D` stored as `1 x 1 x D`).

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DrfError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    /// A flat `D`-dimensional latent: one channel, one row.
    pub const fn flat(dim: usize) -> Self {
        Self::new(1, 1, dim)
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    shape: Shape,
    data: Vec<f64>,
}

impl Latent {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(DrfError::Format(format!(
                "latent of shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn flat(data: Vec<f64>) -> Self {
        Self {
            shape: Shape::flat(data.len()),
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::flat(vec![value])
    }

    /// Standard normal draws, consuming `shape.len()` samples from `rng` in storage order.
    pub fn randn<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Self {
        let data = (0..shape.len())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.shape.plane();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.shape.plane();
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn ensure_same_shape(&self, other: &Latent) -> Result<()> {
        if self.shape != other.shape {
            return Err(DrfError::Shape {
                expected: self.shape,
                got: other.shape,
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Latent {
        Latent {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, a: f64) -> Latent {
        self.map(|v| a * v)
    }

    /// `a * self + b * other`.
    pub fn lin_comb(&self, a: f64, other: &Latent, b: f64) -> Result<Latent> {
        self.ensure_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| a * x + b * y)
            .collect();
        Ok(Latent {
            shape: self.shape,
            data,
        })
    }

    pub fn add(&self, other: &Latent) -> Result<Latent> {
        self.lin_comb(1.0, other, 1.0)
    }

    pub fn sub(&self, other: &Latent) -> Result<Latent> {
        self.lin_comb(1.0, other, -1.0)
    }

    /// In-place `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &Latent) -> Result<()> {
        self.ensure_same_shape(other)?;
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Latent) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(x, y)| x * y).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population (uncorrected) standard deviation over all elements.
    pub fn std(&self) -> f64 {
        let (_, std) = mean_std(&self.data);
        std
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: impl FnOnce() -> String) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(DrfError::numeric(context()))
        }
    }

    /// Per-channel mean and uncorrected standard deviation.
    pub fn channel_stats(&self) -> Vec<(f64, f64)> {
        (0..self.shape.channels)
            .map(|c| mean_std(self.channel(c)))
            .collect()
    }
}

/// Mean and population standard deviation of a slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
