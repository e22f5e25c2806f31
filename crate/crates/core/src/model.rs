//! Parameter vectors and the arithmetic every other module builds on.
//!
//! A [`ModelVector`] carries global models, local models and model
//! differentials alike. Normalization maps raw weights to the unit-variance
//! domain in which transmit power is accounted.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelVector<S> {
    values: Vec<S>,
}

impl<S: Scalar> ModelVector<S> {
    pub fn new(values: Vec<S>) -> Self {
        Self { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![S::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn into_inner(self) -> Vec<S> {
        self.values
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn scale(&self, factor: &S) -> Self {
        Self::new(self.values.iter().map(|v| v.clone() * factor.clone()).collect())
    }

    /// `self += factor * other`
    pub fn axpy(&mut self, factor: &S, other: &Self) -> Result<()> {
        check_dim(self.dim(), other.dim())?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a = a.clone() + factor.clone() * b.clone();
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<S> {
        check_dim(self.dim(), other.dim())?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(S::zero(), |acc, (a, b)| acc + a.clone() * b.clone()))
    }

    pub fn norm_sq(&self) -> S {
        self.values.iter().fold(S::zero(), |acc, v| acc + v.clone() * v.clone())
    }

    fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        Self::new(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| f(a.clone(), b.clone()))
                .collect(),
        )
    }
}

impl ModelVector<f64> {
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Per-coordinate affine map into the unit-variance transmission domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats<S> {
    mean: Vec<S>,
    scale: Vec<S>,
}

impl<S: Scalar> NormStats<S> {
    pub fn new(mean: Vec<S>, scale: Vec<S>) -> Result<Self> {
        check_dim(mean.len(), scale.len())?;
        if scale.iter().any(|s| *s <= S::zero()) {
            return Err(Error::Config("normalization scale must be positive".into()));
        }
        Ok(Self { mean, scale })
    }

    /// Zero mean, unit scale: normalization is the identity.
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![S::zero(); dim],
            scale: vec![S::one(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[S] {
        &self.mean
    }

    pub fn scale(&self) -> &[S] {
        &self.scale
    }
}

impl NormStats<f64> {
    /// Coordinatewise empirical mean and standard deviation of `samples`.
    /// Coordinates whose spread is below `1e-12` keep unit scale.
    pub fn fit(samples: &[ModelVector<f64>]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Config("cannot fit normalization on an empty set".into()))?;
        let dim = first.dim();
        let n = samples.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in samples {
            check_dim(dim, s.dim())?;
            for (m, v) in mean.iter_mut().zip(s.as_slice()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for s in samples {
            for ((acc, v), m) in var.iter_mut().zip(s.as_slice()).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self::new(mean, scale)
    }
}

pub fn normalize<S: Scalar>(v: &ModelVector<S>, stats: &NormStats<S>) -> Result<ModelVector<S>> {
    check_dim(stats.dim(), v.dim())?;
    Ok(ModelVector::new(
        v.as_slice()
            .iter()
            .zip(stats.mean.iter().zip(&stats.scale))
            .map(|(x, (m, s))| (x.clone() - m.clone()) / s.clone())
            .collect(),
    ))
}

pub fn denormalize<S: Scalar>(v: &ModelVector<S>, stats: &NormStats<S>) -> Result<ModelVector<S>> {
    check_dim(stats.dim(), v.dim())?;
    Ok(ModelVector::new(
        v.as_slice()
            .iter()
            .zip(stats.mean.iter().zip(&stats.scale))
            .map(|(x, (m, s))| x.clone() * s.clone() + m.clone())
            .collect(),
    ))
}

/// Coordinatewise arithmetic mean.
pub fn mean_of<S: Scalar>(vectors: &[ModelVector<S>]) -> Result<ModelVector<S>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Aggregation("cannot average an empty set of models".into()))?;
    let mut acc = first.clone();
    for v in &vectors[1..] {
        check_dim(acc.dim(), v.dim())?;
        for (a, b) in acc.values.iter_mut().zip(&v.values) {
            *a = a.clone() + b.clone();
        }
    }
    let n = S::from_usize_exact(vectors.len());
    acc.values.iter_mut().for_each(|a| *a = a.clone() / n.clone());
    Ok(acc)
}

pub fn squared_distance<S: Scalar>(a: &ModelVector<S>, b: &ModelVector<S>) -> Result<S> {
    Ok(a.sub(b)?.norm_sq())
}
