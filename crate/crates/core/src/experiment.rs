//! Monte Carlo comparison of the DRS and MAML estimators over a grid of
//! task counts, per-task sample sizes and adaptation step sizes.
//!
//! For each repetition one dataset is drawn and both estimators are fitted.
//! Their expected losses before adaptation (the DRS risk) and after one
//! adaptation step on `n` fresh points are then compared. Paper-style
//! simulated distributions have no closed-form expectations, so all cells
//! share one seeded Monte Carlo task sample.

use std::io;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{solve_drs, solve_maml};
use crate::risk::{LossMoments, QuadraticLoss};
use crate::rng::derive_seed;
use crate::task_model::{generate_dataset, FiniteDistribution, SimulationSpec, TaskDistribution, TaskParams};

pub use crate::stats::{compile_seed_stats, welch_test, WelchResult};

pub const DEFAULT_MC_TASKS: usize = 10_000;
const MC_KEY: u64 = u64::MAX;

/// Serializable description of a task distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionSpec {
    PaperSimulation(SimulationSpec),
    Finite {
        tasks: Vec<TaskSpec>,
        /// Uniform when omitted.
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub theta: Vec<f64>,
    pub noise_var: f64,
    /// Row-major.
    pub q: Vec<Vec<f64>>,
}

impl TaskSpec {
    pub fn to_params(&self) -> Result<TaskParams> {
        let p = self.theta.len();
        let q = crate::task_model::from_rows(&self.q, p, p)?;
        TaskParams::new(DVector::from_vec(self.theta.clone()), self.noise_var, q)
    }

    pub fn from_params(t: &TaskParams) -> Self {
        TaskSpec {
            theta: t.theta.iter().copied().collect(),
            noise_var: t.noise_var,
            q: crate::task_model::rows(&t.q),
        }
    }
}

impl DistributionSpec {
    pub fn build(&self) -> Result<TaskDistribution> {
        match self {
            DistributionSpec::PaperSimulation(s) => {
                s.validate()?;
                Ok(TaskDistribution::PaperSimulation(*s))
            }
            DistributionSpec::Finite { tasks, weights } => {
                let tasks = tasks.iter().map(TaskSpec::to_params).collect::<Result<Vec<_>>>()?;
                let d = match weights {
                    Some(w) => FiniteDistribution::new(tasks, w.clone())?,
                    None => FiniteDistribution::uniform(tasks)?,
                };
                Ok(TaskDistribution::Finite(d))
            }
        }
    }

    pub fn from_finite(d: &FiniteDistribution) -> Self {
        DistributionSpec::Finite {
            tasks: d.tasks().iter().map(TaskSpec::from_params).collect(),
            weights: Some(d.weights().to_vec()),
        }
    }
}

/// A distribution together with the loss functionals used to score
/// estimates. Finite distributions are scored exactly.
#[derive(Debug, Clone)]
pub struct ExperimentContext {
    pub dist: TaskDistribution,
    /// Number of tasks in the scoring sample; `None` when exact.
    pub mc_tasks: Option<usize>,
    pub mc_seed: Option<u64>,
    moments: LossMoments,
}

impl ExperimentContext {
    pub fn new(dist: TaskDistribution, mc_tasks: usize, mc_seed: u64) -> Result<Self> {
        dist.validate()?;
        let (sample, mc) = match &dist {
            TaskDistribution::Finite(d) => (d.clone(), None),
            TaskDistribution::PaperSimulation(_) => (dist.monte_carlo(mc_tasks, mc_seed)?, Some((mc_tasks, mc_seed))),
        };
        Ok(ExperimentContext {
            moments: LossMoments::new(&sample)?,
            mc_tasks: mc.map(|m| m.0),
            mc_seed: mc.map(|m| m.1),
            dist,
        })
    }

    pub fn pre_loss(&self) -> QuadraticLoss {
        self.moments.drs()
    }

    pub fn post_loss(&self, alpha: f64, n: usize) -> QuadraticLoss {
        self.moments.post(alpha, Some(n))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub m: usize,
    pub n: usize,
    pub alpha: f64,
    pub reps: usize,
    /// Fraction of valid reps where MAML has strictly lower loss before
    /// adaptation.
    pub p_pre: f64,
    pub p_post: f64,
    pub stderr_pre: f64,
    pub stderr_post: f64,
    /// Reps excluded because either solve was rank deficient.
    pub degenerate: usize,
    pub maml_better_pre: usize,
    pub drs_better_pre: usize,
    pub ties_pre: usize,
    pub maml_better_post: usize,
    pub drs_better_post: usize,
    pub ties_post: usize,
}

#[derive(Default, Clone, Copy)]
struct Tally {
    maml: usize,
    drs: usize,
    ties: usize,
}

impl Tally {
    fn add(&mut self, maml_loss: f64, drs_loss: f64) {
        if maml_loss < drs_loss {
            self.maml += 1;
        } else if drs_loss < maml_loss {
            self.drs += 1;
        } else {
            self.ties += 1;
        }
    }
}

fn fraction(count: usize, valid: usize) -> (f64, f64) {
    if valid == 0 {
        return (f64::NAN, f64::NAN);
    }
    let p = count as f64 / valid as f64;
    (p, (p * (1.0 - p) / valid as f64).sqrt())
}

/// Runs one `(m, n)` cell for several step sizes. Every rep draws a single
/// dataset that is shared by all step sizes, so comparisons across α are
/// paired.
pub fn run_cell_alphas(
    ctx: &ExperimentContext,
    m: usize,
    n: usize,
    alphas: &[f64],
    reps: usize,
    seed: u64,
) -> Result<Vec<CellResult>> {
    if reps == 0 {
        return Err(Error::InvalidArgument("reps must be at least 1".into()));
    }
    for &a in alphas {
        if !(a >= 0.0 && a.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be finite and nonnegative (got {a})")));
        }
    }
    let pre = ctx.pre_loss();
    let posts: Vec<QuadraticLoss> = alphas.iter().map(|&a| ctx.post_loss(a, n)).collect();
    let mut pre_t = vec![Tally::default(); alphas.len()];
    let mut post_t = vec![Tally::default(); alphas.len()];
    let mut degenerate = vec![0usize; alphas.len()];
    for rep in 0..reps as u64 {
        let data = generate_dataset(&ctx.dist, m, n, derive_seed(seed, &[rep]))?;
        let drs = solve_drs(&data)?;
        let drs_pre = pre.value(&drs.theta_hat);
        for (k, &alpha) in alphas.iter().enumerate() {
            let maml = solve_maml(&data, alpha)?;
            if drs.rank_deficient || maml.rank_deficient {
                degenerate[k] += 1;
                continue;
            }
            pre_t[k].add(pre.value(&maml.theta_hat), drs_pre);
            post_t[k].add(posts[k].value(&maml.theta_hat), posts[k].value(&drs.theta_hat));
        }
    }
    Ok(alphas
        .iter()
        .enumerate()
        .map(|(k, &alpha)| {
            let valid = reps - degenerate[k];
            let (p_pre, stderr_pre) = fraction(pre_t[k].maml, valid);
            let (p_post, stderr_post) = fraction(post_t[k].maml, valid);
            CellResult {
                m,
                n,
                alpha,
                reps,
                p_pre,
                p_post,
                stderr_pre,
                stderr_post,
                degenerate: degenerate[k],
                maml_better_pre: pre_t[k].maml,
                drs_better_pre: pre_t[k].drs,
                ties_pre: pre_t[k].ties,
                maml_better_post: post_t[k].maml,
                drs_better_post: post_t[k].drs,
                ties_post: post_t[k].ties,
            }
        })
        .collect())
}

pub fn run_cell(ctx: &ExperimentContext, m: usize, n: usize, alpha: f64, reps: usize, seed: u64) -> Result<CellResult> {
    Ok(run_cell_alphas(ctx, m, n, &[alpha], reps, seed)?.remove(0))
}

/// Seed of the `(m, n)` cell under a master seed.
pub fn cell_seed(master: u64, m: usize, n: usize) -> u64 {
    derive_seed(master, &[m as u64, n as u64])
}

/// Rounded log-spaced integers over `[lo, hi]`, deduplicated.
pub fn log_spaced(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    if count <= 1 || lo >= hi {
        return vec![lo];
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    let mut out: Vec<usize> = (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp().round() as usize)
        .collect();
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_distribution")]
    pub distribution: DistributionSpec,
    #[serde(default = "default_counts")]
    pub m_values: Vec<usize>,
    #[serde(default = "default_counts")]
    pub n_values: Vec<usize>,
    #[serde(default = "default_alphas")]
    pub alpha_values: Vec<f64>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mc_tasks")]
    pub mc_tasks: usize,
}

fn default_distribution() -> DistributionSpec {
    DistributionSpec::PaperSimulation(SimulationSpec::new(1))
}

fn default_counts() -> Vec<usize> {
    log_spaced(2, 1000, 7)
}

fn default_alphas() -> Vec<f64> {
    vec![0.25, 0.5, 0.75]
}

fn default_reps() -> usize {
    200
}

fn default_mc_tasks() -> usize {
    DEFAULT_MC_TASKS
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            distribution: default_distribution(),
            m_values: default_counts(),
            n_values: default_counts(),
            alpha_values: default_alphas(),
            reps: default_reps(),
            seed: 0,
            mc_tasks: default_mc_tasks(),
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::InvalidArgument("reps must be at least 1".into()));
        }
        if self.m_values.is_empty() || self.n_values.is_empty() || self.alpha_values.is_empty() {
            return Err(Error::InvalidArgument("grid axes must be nonempty".into()));
        }
        if self.m_values.contains(&0) || self.n_values.contains(&0) {
            return Err(Error::InvalidArgument("m and n values must be at least 1".into()));
        }
        if !self.alpha_values.iter().all(|a| (0.0..=1.0).contains(a)) {
            return Err(Error::InvalidArgument("alpha values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Seed of the shared Monte Carlo scoring sample.
    pub fn mc_seed(&self) -> u64 {
        derive_seed(self.seed, &[MC_KEY])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentGrid {
    pub config: GridConfig,
    /// Seed of the Monte Carlo scoring sample, absent for finite
    /// distributions.
    pub mc_seed: Option<u64>,
    /// Ordered by `m`, then `n`, then α as listed in the config.
    pub cells: Vec<CellResult>,
}

pub fn run_grid(config: &GridConfig) -> Result<ExperimentGrid> {
    config.validate()?;
    let mut m_values = config.m_values.clone();
    let mut n_values = config.n_values.clone();
    m_values.sort_unstable();
    m_values.dedup();
    n_values.sort_unstable();
    n_values.dedup();
    let ctx = ExperimentContext::new(config.distribution.build()?, config.mc_tasks, config.mc_seed())?;
    let pairs: Vec<(usize, usize)> = m_values
        .iter()
        .flat_map(|&m| n_values.iter().map(move |&n| (m, n)))
        .collect();
    let results: Vec<Result<Vec<CellResult>>> = pairs
        .par_iter()
        .map(|&(m, n)| run_cell_alphas(&ctx, m, n, &config.alpha_values, config.reps, cell_seed(config.seed, m, n)))
        .collect();
    let mut cells = Vec::with_capacity(pairs.len() * config.alpha_values.len());
    for r in results {
        cells.extend(r?);
    }
    Ok(ExperimentGrid {
        config: config.clone(),
        mc_seed: ctx.mc_seed,
        cells,
    })
}

pub const CSV_HEADER: [&str; 9] = ["m", "n", "alpha", "reps", "p_pre", "p_post", "stderr_pre", "stderr_post", "degenerate"];

/// One row per cell under [`CSV_HEADER`].
pub fn write_csv<W: io::Write>(grid: &ExperimentGrid, out: W) -> Result<()> {
    let io_err = |e: csv::Error| Error::InvalidArgument(format!("csv output: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(io_err)?;
    for c in &grid.cells {
        w.write_record([
            c.m.to_string(),
            c.n.to_string(),
            c.alpha.to_string(),
            c.reps.to_string(),
            c.p_pre.to_string(),
            c.p_post.to_string(),
            c.stderr_pre.to_string(),
            c.stderr_post.to_string(),
            c.degenerate.to_string(),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::InvalidArgument(format!("csv output: {e}")))?;
    Ok(())
}

/// Per-cell grid of one α as a matrix indexed by (m, n), for contouring.
pub fn p_post_matrix(grid: &ExperimentGrid, alpha: f64) -> (Vec<usize>, Vec<usize>, DMatrix<f64>) {
    let mut ms: Vec<usize> = grid.cells.iter().map(|c| c.m).collect();
    let mut ns: Vec<usize> = grid.cells.iter().map(|c| c.n).collect();
    ms.sort_unstable();
    ms.dedup();
    ns.sort_unstable();
    ns.dedup();
    let mut out = DMatrix::from_element(ms.len(), ns.len(), f64::NAN);
    for c in grid.cells.iter().filter(|c| c.alpha == alpha) {
        let i = ms.binary_search(&c.m).expect("m listed");
        let j = ns.binary_search(&c.n).expect("n listed");
        out[(i, j)] = c.p_post;
    }
    (ms, ns, out)
}
