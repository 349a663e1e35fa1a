//! Tasks, task distributions and synthetic data for meta linear regression.
//!
//! A task γ is a linear model `y = θ_γᵀx + ε` with `x ~ N(0, Q_γ)` and
//! `ε ~ N(0, σ_γ²)`.

use nalgebra::{DMatrix, DVector, QR};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, PSD_TOLERANCE, SYMMETRY_TOLERANCE};
use crate::rng::{stream, SimRng};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskParams {
    pub theta: DVector<f64>,
    pub noise_var: f64,
    pub q: DMatrix<f64>,
}

impl TaskParams {
    pub fn new(theta: DVector<f64>, noise_var: f64, q: DMatrix<f64>) -> Result<Self> {
        let task = TaskParams { theta, noise_var, q };
        task.validate()?;
        Ok(task)
    }

    /// Scalar task with `Q = q`.
    pub fn scalar(theta: f64, noise_var: f64, q: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(1, theta),
            noise_var,
            DMatrix::from_element(1, 1, q),
        )
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.theta.len();
        if p == 0 {
            return Err(Error::InvalidTask("dimension must be at least 1".into()));
        }
        if self.q.nrows() != p || self.q.ncols() != p {
            return Err(Error::InvalidTask(format!(
                "q is {}x{}, expected {p}x{p}",
                self.q.nrows(),
                self.q.ncols()
            )));
        }
        if self.noise_var < 0.0 || !self.noise_var.is_finite() {
            return Err(Error::InvalidTask(format!(
                "noise_var must be a finite nonnegative number, got {}",
                self.noise_var
            )));
        }
        if self.theta.iter().chain(self.q.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidTask("non-finite entry".into()));
        }
        let asym = linalg::max_asymmetry(&self.q);
        if asym > SYMMETRY_TOLERANCE {
            return Err(Error::InvalidTask(format!("q is not symmetric (max |q_ij - q_ji| = {asym:e})")));
        }
        let min = linalg::min_eigenvalue(&self.q);
        if min < -PSD_TOLERANCE {
            return Err(Error::NotPositiveSemidefinite { min_eigenvalue: min });
        }
        Ok(())
    }

    /// `S(α) = (I − αQ) Q (I − αQ)`.
    pub fn s_matrix(&self, alpha: f64) -> DMatrix<f64> {
        let p = self.dim();
        let m = DMatrix::identity(p, p) - &self.q * alpha;
        &m * &self.q * &m
    }

    pub fn q_norm(&self) -> f64 {
        linalg::symmetric_norm(&self.q)
    }
}

/// Weighted list of tasks. Expectations over it are exact weighted sums.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDistribution {
    tasks: Vec<TaskParams>,
    weights: Vec<f64>,
}

impl FiniteDistribution {
    pub fn new(tasks: Vec<TaskParams>, weights: Vec<f64>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidDistribution("no tasks".into()));
        }
        if tasks.len() != weights.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} tasks but {} weights",
                tasks.len(),
                weights.len()
            )));
        }
        let p = tasks[0].dim();
        for t in &tasks {
            t.validate()?;
            check_dim(p, t.dim())?;
        }
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidDistribution("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidDistribution(format!("weights sum to {total}, not 1")));
        }
        Ok(FiniteDistribution { tasks, weights })
    }

    pub fn uniform(tasks: Vec<TaskParams>) -> Result<Self> {
        let k = tasks.len();
        Self::new(tasks, vec![1.0 / k.max(1) as f64; k])
    }

    pub fn single(task: TaskParams) -> Result<Self> {
        Self::new(vec![task], vec![1.0])
    }

    pub fn tasks(&self) -> &[TaskParams] {
        &self.tasks
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.tasks[0].dim()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TaskParams, f64)> {
        self.tasks.iter().zip(self.weights.iter().copied())
    }

    /// Weighted mean of a matrix-valued function of the task.
    pub fn expect_matrix(&self, f: impl Fn(&TaskParams) -> DMatrix<f64>) -> DMatrix<f64> {
        let p = self.dim();
        self.iter()
            .fold(DMatrix::zeros(p, p), |acc, (t, w)| acc + f(t) * w)
    }

    pub fn expect_vector(&self, f: impl Fn(&TaskParams) -> DVector<f64>) -> DVector<f64> {
        let p = self.dim();
        self.iter().fold(DVector::zeros(p), |acc, (t, w)| acc + f(t) * w)
    }

    pub fn expect_scalar(&self, f: impl Fn(&TaskParams) -> f64) -> f64 {
        self.iter().map(|(t, w)| w * f(t)).sum()
    }

    pub fn expect_q(&self) -> DMatrix<f64> {
        self.expect_matrix(|t| t.q.clone())
    }

    pub fn expect_s(&self, alpha: f64) -> DMatrix<f64> {
        self.expect_matrix(|t| t.s_matrix(alpha))
    }

    pub fn expect_noise(&self) -> f64 {
        self.expect_scalar(|t| t.noise_var)
    }

    /// `max_γ ‖Q_γ‖`, the β of the boundedness assumption.
    pub fn max_q_norm(&self) -> f64 {
        self.tasks.iter().map(TaskParams::q_norm).fold(0.0, f64::max)
    }

    pub fn max_theta_norm(&self) -> f64 {
        self.tasks.iter().map(|t| t.theta.norm()).fold(0.0, f64::max)
    }

    /// Draws a task index with probability proportional to its weight.
    pub(crate) fn sample_index(&self, rng: &mut SimRng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        // Rounding can leave `acc` a hair below 1.
        self.weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }
}

/// The generative distribution of the simulation study: `θ_γ ~ U(θ-range)^p`,
/// `σ_γ² ~ U(noise-range)` and `Q_γ = V diag(θ_γ) Vᵀ` with `V` Haar on SO(p).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub p: usize,
    #[serde(default = "default_range")]
    pub theta_range: (f64, f64),
    #[serde(default = "default_range")]
    pub noise_range: (f64, f64),
}

fn default_range() -> (f64, f64) {
    (0.0, 2.0)
}

impl SimulationSpec {
    pub fn new(p: usize) -> Self {
        SimulationSpec {
            p,
            theta_range: default_range(),
            noise_range: default_range(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::InvalidDistribution("p must be at least 1".into()));
        }
        let (tl, th) = self.theta_range;
        let (nl, nh) = self.noise_range;
        // Eigenvalues of Q are the θ components, so they must be nonnegative.
        if !(0.0 <= tl && tl <= th && th.is_finite()) {
            return Err(Error::InvalidDistribution(format!("bad theta range [{tl}, {th}]")));
        }
        if !(0.0 <= nl && nl <= nh && nh.is_finite()) {
            return Err(Error::InvalidDistribution(format!("bad noise range [{nl}, {nh}]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskDistribution {
    Finite(FiniteDistribution),
    PaperSimulation(SimulationSpec),
}

impl TaskDistribution {
    pub fn paper_simulation(p: usize) -> Self {
        TaskDistribution::PaperSimulation(SimulationSpec::new(p))
    }

    pub fn dim(&self) -> usize {
        match self {
            TaskDistribution::Finite(d) => d.dim(),
            TaskDistribution::PaperSimulation(s) => s.p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TaskDistribution::Finite(_) => Ok(()),
            TaskDistribution::PaperSimulation(s) => s.validate(),
        }
    }

    pub fn as_finite(&self) -> Result<&FiniteDistribution> {
        match self {
            TaskDistribution::Finite(d) => Ok(d),
            TaskDistribution::PaperSimulation(_) => Err(Error::Unsupported("exact expectation")),
        }
    }

    /// Equal-weight empirical distribution of `count` draws. Finite
    /// distributions are returned unchanged since their expectations are exact.
    pub fn monte_carlo(&self, count: usize, seed: u64) -> Result<FiniteDistribution> {
        match self {
            TaskDistribution::Finite(d) => Ok(d.clone()),
            TaskDistribution::PaperSimulation(_) => {
                if count == 0 {
                    return Err(Error::InvalidArgument("Monte Carlo sample needs at least one task".into()));
                }
                let tasks = (0..count as u64)
                    .map(|i| sample_task(self, derive_task_seed(seed, i)))
                    .collect();
                FiniteDistribution::uniform(tasks)
            }
        }
    }

    pub(crate) fn sample_with(&self, rng: &mut SimRng) -> TaskParams {
        match self {
            TaskDistribution::Finite(d) => d.tasks[d.sample_index(rng)].clone(),
            TaskDistribution::PaperSimulation(s) => {
                let p = s.p;
                let (tl, th) = s.theta_range;
                let (nl, nh) = s.noise_range;
                let theta = DVector::from_fn(p, |_, _| tl + (th - tl) * rng.random::<f64>());
                let noise_var = nl + (nh - nl) * rng.random::<f64>();
                let v = rotation_with(p, rng);
                let q = linalg::symmetrize(&(&v * DMatrix::from_diagonal(&theta) * v.transpose()));
                TaskParams { theta, noise_var, q }
            }
        }
    }
}

fn derive_task_seed(seed: u64, index: u64) -> u64 {
    crate::rng::derive_seed(seed, &[index])
}

impl From<FiniteDistribution> for TaskDistribution {
    fn from(d: FiniteDistribution) -> Self {
        TaskDistribution::Finite(d)
    }
}

pub fn sample_task(dist: &TaskDistribution, seed: u64) -> TaskParams {
    dist.sample_with(&mut stream(seed, &[]))
}

/// Haar-distributed rotation in SO(p).
pub fn sample_rotation(p: usize, seed: u64) -> DMatrix<f64> {
    rotation_with(p, &mut stream(seed, &[]))
}

pub(crate) fn rotation_with(p: usize, rng: &mut SimRng) -> DMatrix<f64> {
    if p == 0 {
        return DMatrix::zeros(0, 0);
    }
    let g = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = QR::new(g);
    let r = qr.r();
    let mut v = qr.q();
    for j in 0..p {
        if r[(j, j)] < 0.0 {
            v.column_mut(j).neg_mut();
        }
    }
    if v.determinant() < 0.0 {
        v.column_mut(0).neg_mut();
    }
    v
}

/// Observations for one task; columns of the `x` blocks are data points.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub x_support: DMatrix<f64>,
    pub x_query: DMatrix<f64>,
    pub y_support: DVector<f64>,
    pub y_query: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaDataset {
    pub p: usize,
    pub n: usize,
    pub tasks: Vec<TaskData>,
    pub task_params: Option<Vec<TaskParams>>,
}

impl MetaDataset {
    pub fn new(p: usize, n: usize, tasks: Vec<TaskData>, task_params: Option<Vec<TaskParams>>) -> Result<Self> {
        let ds = MetaDataset { p, n, tasks, task_params };
        ds.validate()?;
        Ok(ds)
    }

    pub fn m(&self) -> usize {
        self.tasks.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.n == 0 || self.tasks.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "dataset needs p, n, m >= 1 (got p={}, n={}, m={})",
                self.p,
                self.n,
                self.tasks.len()
            )));
        }
        for t in &self.tasks {
            for x in [&t.x_support, &t.x_query] {
                check_dim(self.p, x.nrows())?;
                check_dim(self.n, x.ncols())?;
            }
            check_dim(self.n, t.y_support.len())?;
            check_dim(self.n, t.y_query.len())?;
        }
        if let Some(params) = &self.task_params {
            check_dim(self.tasks.len(), params.len())?;
            for tp in params {
                tp.validate()?;
                check_dim(self.p, tp.dim())?;
            }
        }
        Ok(())
    }

    /// Query halves of all tasks as a `p × NM` design and response vector.
    pub fn stacked_query(&self) -> (DMatrix<f64>, DVector<f64>) {
        let blocks: Vec<_> = self.tasks.iter().map(|t| (&t.x_query, &t.y_query)).collect();
        stack(self.p, &blocks)
    }

    /// All `2NM` observations as a `p × 2NM` design and response vector.
    pub fn stacked_all(&self) -> (DMatrix<f64>, DVector<f64>) {
        let blocks: Vec<_> = self
            .tasks
            .iter()
            .flat_map(|t| [(&t.x_support, &t.y_support), (&t.x_query, &t.y_query)])
            .collect();
        stack(self.p, &blocks)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let tasks = self
            .tasks
            .iter()
            .enumerate()
            .map(|(j, t)| {
                let params = self.task_params.as_ref().map(|ps| &ps[j]);
                TaskJson {
                    theta: params.map(|p| p.theta.iter().copied().collect()),
                    noise_var: params.map(|p| p.noise_var),
                    q: params.map(|p| rows(&p.q)),
                    x_support: rows(&t.x_support),
                    x_query: rows(&t.x_query),
                    y_support: t.y_support.iter().copied().collect(),
                    y_query: t.y_query.iter().copied().collect(),
                }
            })
            .collect();
        serde_json::to_value(DatasetJson {
            p: self.p,
            m: self.m(),
            n: self.n,
            tasks,
        })
        .expect("dataset serializes")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let raw: DatasetJson = serde_json::from_value(value.clone())
            .map_err(|e| Error::InvalidArgument(format!("malformed dataset: {e}")))?;
        check_dim(raw.m, raw.tasks.len())?;
        let mut tasks = Vec::with_capacity(raw.m);
        let mut params = Vec::new();
        let mut have_params = true;
        for t in raw.tasks {
            tasks.push(TaskData {
                x_support: from_rows(&t.x_support, raw.p, raw.n)?,
                x_query: from_rows(&t.x_query, raw.p, raw.n)?,
                y_support: DVector::from_vec(t.y_support),
                y_query: DVector::from_vec(t.y_query),
            });
            match (t.theta, t.noise_var, t.q) {
                (Some(theta), Some(noise_var), Some(q)) => params.push(TaskParams::new(
                    DVector::from_vec(theta),
                    noise_var,
                    from_rows(&q, raw.p, raw.p)?,
                )?),
                _ => have_params = false,
            }
        }
        MetaDataset::new(raw.p, raw.n, tasks, have_params.then_some(params))
    }
}

fn stack(p: usize, blocks: &[(&DMatrix<f64>, &DVector<f64>)]) -> (DMatrix<f64>, DVector<f64>) {
    let total: usize = blocks.iter().map(|(x, _)| x.ncols()).sum();
    let mut x = DMatrix::zeros(p, total);
    let mut y = DVector::zeros(total);
    let mut at = 0;
    for (xb, yb) in blocks {
        let k = xb.ncols();
        x.columns_mut(at, k).copy_from(*xb);
        y.rows_mut(at, k).copy_from(*yb);
        at += k;
    }
    (x, y)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetJson {
    p: usize,
    m: usize,
    n: usize,
    tasks: Vec<TaskJson>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    theta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise_var: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q: Option<Vec<Vec<f64>>>,
    x_support: Vec<Vec<f64>>,
    x_query: Vec<Vec<f64>>,
    y_support: Vec<f64>,
    y_query: Vec<f64>,
}

pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    check_dim(nrows, rows.len())?;
    for r in rows {
        check_dim(ncols, r.len())?;
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Draws `n` observations `(x, y)` from `task` with the given feature square root.
fn draw_block(task: &TaskParams, root: &DMatrix<f64>, n: usize, rng: &mut SimRng) -> (DMatrix<f64>, DVector<f64>) {
    let p = task.dim();
    let z = DMatrix::from_fn(p, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let x = root * z;
    let sigma = task.noise_var.sqrt();
    let mut y = x.tr_mul(&task.theta);
    for v in y.iter_mut() {
        *v += sigma * rng.sample::<f64, _>(StandardNormal);
    }
    (x, y)
}

/// Draws the support and query halves of one task.
pub fn generate_task_data(task: &TaskParams, n: usize, rng: &mut SimRng) -> Result<TaskData> {
    let root = linalg::psd_sqrt(&task.q)?;
    let (x, y) = draw_block(task, &root, 2 * n, rng);
    Ok(TaskData {
        x_support: x.columns(0, n).into_owned(),
        x_query: x.columns(n, n).into_owned(),
        y_support: y.rows(0, n).into_owned(),
        y_query: y.rows(n, n).into_owned(),
    })
}

/// `m` tasks with `2n` observations each. Task `j` draws its parameters and
/// data from its own stream, so datasets for different `m` share prefixes.
pub fn generate_dataset(dist: &TaskDistribution, m: usize, n: usize, seed: u64) -> Result<MetaDataset> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!("need m >= 1 and n >= 1 (got m={m}, n={n})")));
    }
    dist.validate()?;
    let mut tasks = Vec::with_capacity(m);
    let mut params = Vec::with_capacity(m);
    for j in 0..m as u64 {
        let mut rng = stream(seed, &[j]);
        let task = dist.sample_with(&mut rng);
        tasks.push(generate_task_data(&task, n, &mut rng)?);
        params.push(task);
    }
    Ok(MetaDataset {
        p: dist.dim(),
        n,
        tasks,
        task_params: Some(params),
    })
}
