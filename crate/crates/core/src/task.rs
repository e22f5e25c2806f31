//! Synthetic ridge-regression tasks with analytically known optimum.
//!
//! Client `k` holds `D` samples `(a_i, y_i)` and the local loss
//! `F_k(w) = 1/(2D) Σ (a_iᵀw − y_i)² + (λ/2)‖w‖²`. The global objective is
//! the plain client average (all clients hold the same number of samples),
//! so every constant the convergence bounds need has a closed form.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::ModelVector;

/// Smallest Hessian eigenvalue accepted as strictly positive definite.
const PD_FLOOR: f64 = 1e-10;

/// Generator parameters for [`make_task`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub clients: usize,
    pub dimension: usize,
    pub samples_per_client: usize,
    /// Spread of the per-client target-generating optima around a shared one.
    pub heterogeneity: f64,
    pub ridge: f64,
    #[serde(default = "default_label_noise")]
    pub label_noise: f64,
    pub seed: u64,
}

fn default_label_noise() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientData {
    /// One row per sample.
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl ClientData {
    pub fn size(&self) -> usize {
        self.targets.len()
    }
}

/// Per-client quadratic pieces: `F_k(w) = ½wᵀHw − bᵀw + c`.
#[derive(Debug, Clone)]
struct ClientQuadratic {
    features: DMatrix<f64>,
    targets: DVector<f64>,
    hessian: DMatrix<f64>,
    linear: DVector<f64>,
    optimum: DVector<f64>,
    data_eigs: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct QuadraticTask {
    ridge: f64,
    dimension: usize,
    raw: Vec<ClientData>,
    clients: Vec<ClientQuadratic>,
    hessian: DMatrix<f64>,
    optimum: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConstants {
    pub mu: f64,
    pub lipschitz: f64,
    pub kappa: f64,
    pub gamma_noniid: f64,
    /// Exact mini-batch gradient variance at the optimum, per client.
    pub sgd_var: Vec<f64>,
    /// Upper bound on `E‖∇F_k(w, ξ)‖²` over the trajectory ball.
    pub grad_bound: f64,
    pub opt: ModelVector<f64>,
    pub opt_value: f64,
    pub batch: usize,
    pub trajectory_radius: f64,
}

/// Serialized form of a task; round-trips bit-exactly through JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFile {
    pub ridge: f64,
    pub dimension: usize,
    pub clients: Vec<ClientData>,
}

pub fn make_task(spec: &TaskSpec) -> Result<QuadraticTask> {
    if spec.clients == 0 || spec.dimension == 0 || spec.samples_per_client == 0 {
        return Err(Error::Config(
            "clients, dimension and samples_per_client must be at least 1".into(),
        ));
    }
    if !(spec.ridge >= 0.0) || !(spec.heterogeneity >= 0.0) || !(spec.label_noise >= 0.0) {
        return Err(Error::Config(
            "ridge, heterogeneity and label_noise must be nonnegative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dimension;
    let base: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut clients = Vec::with_capacity(spec.clients);
    for _ in 0..spec.clients {
        let local_opt: Vec<f64> = base
            .iter()
            .map(|b| b + spec.heterogeneity * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut features = Vec::with_capacity(spec.samples_per_client);
        let mut targets = Vec::with_capacity(spec.samples_per_client);
        for _ in 0..spec.samples_per_client {
            let row: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let clean: f64 = row.iter().zip(&local_opt).map(|(a, w)| a * w).sum();
            targets.push(clean + spec.label_noise * rng.sample::<f64, _>(StandardNormal));
            features.push(row);
        }
        clients.push(ClientData { features, targets });
    }
    QuadraticTask::from_parts(clients, spec.ridge, d)
}

impl QuadraticTask {
    pub fn from_parts(raw: Vec<ClientData>, ridge: f64, dimension: usize) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::TaskConstruction("task has no clients".into()));
        }
        if !(ridge >= 0.0) {
            return Err(Error::TaskConstruction("ridge must be nonnegative".into()));
        }
        let size = raw[0].size();
        let mut clients = Vec::with_capacity(raw.len());
        for (k, c) in raw.iter().enumerate() {
            if c.size() == 0 || c.features.len() != c.size() {
                return Err(Error::TaskConstruction(format!(
                    "client {k}: feature rows and targets disagree or are empty"
                )));
            }
            if c.size() != size {
                return Err(Error::TaskConstruction(format!(
                    "client {k}: {} samples, expected equal dataset sizes of {size}",
                    c.size()
                )));
            }
            for row in &c.features {
                check_dim(dimension, row.len())?;
            }
            clients.push(ClientQuadratic::build(c, ridge, dimension, k)?);
        }
        let n = clients.len() as f64;
        let mut hessian = DMatrix::zeros(dimension, dimension);
        let mut linear = DVector::zeros(dimension);
        for c in &clients {
            hessian += &c.hessian;
            linear += &c.linear;
        }
        hessian /= n;
        linear /= n;
        let optimum = hessian
            .clone()
            .cholesky()
            .ok_or_else(|| Error::TaskConstruction("global Hessian not positive definite".into()))?
            .solve(&linear);
        Ok(Self {
            ridge,
            dimension,
            raw,
            clients,
            hessian,
            optimum,
        })
    }

    pub fn to_file(&self) -> TaskFile {
        TaskFile {
            ridge: self.ridge,
            dimension: self.dimension,
            clients: self.raw.clone(),
        }
    }

    pub fn from_file(file: TaskFile) -> Result<Self> {
        Self::from_parts(file.clients, file.ridge, file.dimension)
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn samples_per_client(&self) -> usize {
        self.raw[0].size()
    }

    pub fn client(&self, k: usize) -> &ClientData {
        &self.raw[k]
    }

    pub fn optimum(&self) -> ModelVector<f64> {
        to_model(&self.optimum)
    }

    pub fn client_optimum(&self, k: usize) -> ModelVector<f64> {
        to_model(&self.clients[k].optimum)
    }

    /// Hessian of client `k`'s loss (data term plus ridge).
    pub fn client_hessian(&self, k: usize) -> &DMatrix<f64> {
        &self.clients[k].hessian
    }

    pub fn global_hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn client_loss(&self, k: usize, w: &ModelVector<f64>) -> Result<f64> {
        check_dim(self.dimension, w.dim())?;
        let c = &self.clients[k];
        let residual = &c.features * to_dvec(w) - &c.targets;
        Ok(residual.norm_squared() / (2.0 * c.targets.len() as f64) + 0.5 * self.ridge * w.norm_sq())
    }

    pub fn loss(&self, w: &ModelVector<f64>) -> Result<f64> {
        let mut total = 0.0;
        for k in 0..self.clients.len() {
            total += self.client_loss(k, w)?;
        }
        Ok(total / self.clients.len() as f64)
    }

    pub fn client_gradient(&self, k: usize, w: &ModelVector<f64>) -> Result<ModelVector<f64>> {
        check_dim(self.dimension, w.dim())?;
        let c = &self.clients[k];
        Ok(to_model(&(&c.hessian * to_dvec(w) - &c.linear)))
    }

    pub fn gradient(&self, w: &ModelVector<f64>) -> Result<ModelVector<f64>> {
        check_dim(self.dimension, w.dim())?;
        let x = to_dvec(w);
        let n = self.clients.len() as f64;
        let mut g = DVector::zeros(self.dimension);
        for c in &self.clients {
            g += &c.hessian * &x - &c.linear;
        }
        Ok(to_model(&(g / n)))
    }

    /// Per-sample gradients of client `k` at `w` (rows of the returned matrix).
    fn sample_gradients(&self, k: usize, w: &DVector<f64>) -> DMatrix<f64> {
        let c = &self.clients[k];
        let residual = &c.features * w - &c.targets;
        let mut g = DMatrix::zeros(c.targets.len(), self.dimension);
        for i in 0..c.targets.len() {
            let row = c.features.row(i) * residual[i] + (w.transpose() * self.ridge);
            g.set_row(i, &row);
        }
        g
    }

    /// Exact variance `E‖∇F_k(w, ξ) − ∇F_k(w)‖²` of the mean gradient over a
    /// uniformly drawn batch of `batch` distinct samples.
    pub fn sampling_variance(&self, k: usize, w: &ModelVector<f64>, batch: usize) -> Result<f64> {
        let size = self.samples_per_client();
        if batch == 0 || batch > size {
            return Err(Error::Config(format!("batch {batch} outside 1..={size}")));
        }
        check_dim(self.dimension, w.dim())?;
        let g = self.sample_gradients(k, &to_dvec(w));
        let mean = g.row_mean();
        let spread: f64 = (0..size).map(|i| (g.row(i) - &mean).norm_squared()).sum::<f64>() / size as f64;
        Ok(finite_population_factor(size, batch) * spread)
    }

    pub fn in_ball(&self, w: &ModelVector<f64>, radius: f64) -> bool {
        (to_dvec(w) - &self.optimum).norm() <= radius
    }
}

/// `(D − b) / (b (D − 1))`, the variance factor for the mean of a batch of
/// `b` draws without replacement from `D` items (zero at `b = D`).
pub fn finite_population_factor(size: usize, batch: usize) -> f64 {
    if size <= 1 || batch >= size {
        0.0
    } else {
        (size - batch) as f64 / (batch as f64 * (size - 1) as f64)
    }
}

impl ClientQuadratic {
    fn build(c: &ClientData, ridge: f64, dimension: usize, k: usize) -> Result<Self> {
        let size = c.size();
        let features = DMatrix::from_fn(size, dimension, |i, j| c.features[i][j]);
        let targets = DVector::from_column_slice(&c.targets);
        let data_hessian = features.transpose() * &features / size as f64;
        let eig = SymmetricEigen::new(data_hessian.clone());
        let lo = eig.eigenvalues.min();
        let hi = eig.eigenvalues.max();
        if lo + ridge <= PD_FLOOR {
            return Err(Error::TaskConstruction(format!(
                "client {k}: Hessian not positive definite (smallest eigenvalue {:.3e}); \
                 rank-deficient features need ridge > 0",
                lo + ridge
            )));
        }
        let hessian = data_hessian + DMatrix::identity(dimension, dimension) * ridge;
        let linear = features.transpose() * &targets / size as f64;
        let optimum = hessian
            .clone()
            .cholesky()
            .ok_or_else(|| Error::TaskConstruction(format!("client {k}: Cholesky factorization failed")))?
            .solve(&linear);
        Ok(Self {
            features,
            targets,
            hessian,
            linear,
            optimum,
            data_eigs: (lo, hi),
        })
    }
}

/// Derive μ, L, Γ, δ_k², H² and the optimum for `task`.
///
/// `H²` is an upper bound of the second moment of the stochastic gradient over
/// the ball of radius `trajectory_radius` around `w*`: the mean-gradient part
/// uses the Hessian's top eigenvalue and the variance part bounds each
/// per-sample deviation by `max(‖a_i‖², λ_max)·R` plus its value at `w*`.
pub fn derive_constants(task: &QuadraticTask, batch: usize, trajectory_radius: f64) -> Result<TaskConstants> {
    let size = task.samples_per_client();
    if batch == 0 || batch > size {
        return Err(Error::Config(format!("batch {batch} outside 1..={size}")));
    }
    if !(trajectory_radius > 0.0) {
        return Err(Error::Config("trajectory radius must be positive".into()));
    }
    let ridge = task.ridge;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in &task.clients {
        lo = lo.min(c.data_eigs.0);
        hi = hi.max(c.data_eigs.1);
    }
    let mu = ridge + lo;
    let lipschitz = ridge + hi;
    if mu <= PD_FLOOR {
        return Err(Error::TaskConstruction("strong convexity modulus not positive".into()));
    }

    let opt = task.optimum();
    let opt_value = task.loss(&opt)?;
    // Γ = F* − mean F_k* = mean over k of F_k(w*) − F_k(w_k*), each a PSD quadratic form.
    let mut gamma_noniid = 0.0;
    for c in &task.clients {
        let diff = &task.optimum - &c.optimum;
        gamma_noniid += 0.5 * diff.dot(&(&c.hessian * &diff));
    }
    gamma_noniid /= task.clients.len() as f64;

    let fpc = finite_population_factor(size, batch);
    let mut sgd_var = Vec::with_capacity(task.clients.len());
    let mut grad_bound: f64 = 0.0;
    for (k, c) in task.clients.iter().enumerate() {
        let g = task.sample_gradients(k, &task.optimum);
        let mean = g.row_mean();
        let mut spread = 0.0;
        let mut spread_ball = 0.0;
        for i in 0..size {
            let dev = (g.row(i) - &mean).norm();
            spread += dev * dev;
            let a_sq = c.features.row(i).norm_squared();
            let op = a_sq.max(c.data_eigs.1);
            spread_ball += (op * trajectory_radius + dev).powi(2);
        }
        sgd_var.push(fpc * spread / size as f64);
        let mean_grad = (&c.hessian * &task.optimum - &c.linear).norm();
        let top = c.data_eigs.1 + ridge;
        let h_sq = (top * trajectory_radius + mean_grad).powi(2) + fpc * spread_ball / size as f64;
        grad_bound = grad_bound.max(h_sq);
    }

    Ok(TaskConstants {
        mu,
        lipschitz,
        kappa: lipschitz / mu,
        gamma_noniid,
        sgd_var,
        grad_bound,
        opt,
        opt_value,
        batch,
        trajectory_radius,
    })
}

/// Gradient of client `k`'s loss over a uniformly drawn batch of distinct samples.
pub fn stochastic_gradient<R: Rng + ?Sized>(
    task: &QuadraticTask,
    k: usize,
    w: &ModelVector<f64>,
    batch: usize,
    rng: &mut R,
) -> Result<ModelVector<f64>> {
    let size = task.samples_per_client();
    if batch == 0 || batch > size {
        return Err(Error::Config(format!("batch {batch} outside 1..={size}")));
    }
    if batch == size {
        return task.client_gradient(k, w);
    }
    let picks = index::sample(rng, size, batch);
    Ok(batch_gradient(task, k, w, picks.iter()))
}

/// Gradient of client `k`'s loss restricted to the samples in `picks`.
pub fn batch_gradient(
    task: &QuadraticTask,
    k: usize,
    w: &ModelVector<f64>,
    picks: impl Iterator<Item = usize>,
) -> ModelVector<f64> {
    let c = &task.raw[k];
    let x = w.as_slice();
    let mut g = vec![0.0; task.dimension];
    let mut count = 0usize;
    for i in picks {
        let row = &c.features[i];
        let residual: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - c.targets[i];
        for (gj, aj) in g.iter_mut().zip(row) {
            *gj += aj * residual;
        }
        count += 1;
    }
    let inv = 1.0 / count as f64;
    ModelVector::new(
        g.into_iter()
            .zip(x)
            .map(|(gj, wj)| gj * inv + task.ridge * wj)
            .collect(),
    )
}

fn to_dvec(w: &ModelVector<f64>) -> DVector<f64> {
    DVector::from_column_slice(w.as_slice())
}

fn to_model(v: &DVector<f64>) -> ModelVector<f64> {
    ModelVector::new(v.iter().copied().collect())
}
