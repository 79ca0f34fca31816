//! Generalized EM over the hierarchy: exact E-step, per-pixel least-squares
//! model update, discrete alignment search, and a geometric annealing schedule
//! on the two noise levels.

mod align;
mod estep;
mod mstep;

pub use align::{mstep_alignment, model_canvas, AlignmentTable, PoseGrid};
pub use estep::{
    alpha_posteriors, estep_alpha, estep_alpha_with, estep_beta, injective_count, AssignmentPosterior,
    EpochPosterior, ExactEnumeration,
};
pub use mstep::{mstep_model, solve_pixel, PixelSystem};

pub(crate) use estep::beta_from_sse;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, OccupancyGrid};
use crate::model::{objective_from_tables, penalty, sse_tables, Expectations, HierModel};
use crate::segmentation::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EMConfig {
    pub sigma: f64,
    pub rho: f64,
    pub sigma0: f64,
    pub rho0: f64,
    pub gamma: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub pose_grid: PoseGrid,
    /// Cap on injective assignments enumerated per epoch.
    pub max_assignments: u64,
    /// Per-object and per-template penalties used by the trace's penalized objective.
    pub penalty_n: f64,
    pub penalty_m: f64,
}

impl Default for EMConfig {
    fn default() -> Self {
        EMConfig {
            sigma: 0.15,
            rho: 0.15,
            sigma0: 1.5,
            rho0: 1.5,
            gamma: 0.7,
            max_iters: 30,
            tol: 1e-6,
            seed: 0,
            pose_grid: PoseGrid::default(),
            max_assignments: 10_000_000,
            penalty_n: 35.0,
            penalty_m: 15.0,
        }
    }
}

impl EMConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.sigma > 0.0 && self.rho > 0.0) {
            return bad("target noise levels must be positive");
        }
        if !(self.sigma0 >= 0.0 && self.rho0 >= 0.0) {
            return bad("annealing offsets must be non-negative");
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return bad("tolerance must be non-negative");
        }
        if !(self.penalty_n >= 0.0 && self.penalty_m >= 0.0) {
            return bad("penalties must be non-negative");
        }
        self.pose_grid.validate()
    }

    /// Same settings with `σ_0 = ρ_0 = 0`.
    pub fn without_annealing(&self) -> Self {
        EMConfig {
            sigma0: 0.0,
            rho0: 0.0,
            ..self.clone()
        }
    }
}

/// `(σ + γ^i σ_0, ρ + γ^i ρ_0)`.
pub fn anneal(iter: usize, config: &EMConfig) -> (f64, f64) {
    let g = config.gamma.powi(iter as i32);
    (config.sigma + g * config.sigma0, config.rho + g * config.rho0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub sigma: f64,
    pub rho: f64,
    /// Expected complete log-likelihood at this iteration's parameters and expectations.
    pub objective: f64,
    /// `2 log p(data | Ψ)` up to constants, at this iteration's noise levels.
    pub log_posterior: f64,
    /// `log_posterior` minus the model-size penalty; non-decreasing without annealing.
    pub penalized_objective: f64,
    /// Largest change in any expectation since the previous iteration.
    pub max_change: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EMTrace {
    pub records: Vec<IterationRecord>,
}

impl EMTrace {
    /// Number of M-step rounds performed.
    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,sigma_i,rho_i,objective,penalized_objective\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.iteration, r.sigma, r.rho, r.objective, r.penalized_objective
            ));
        }
        out
    }
}

/// A finished EM run.
#[derive(Clone, Debug)]
pub struct EmRun {
    pub model: HierModel,
    /// Expectations at the final parameters.
    pub expectations: Expectations,
    pub trace: EMTrace,
}

/// Random starting point: uniform cells and uniform candidate poses.
pub fn init_random(data: &Dataset, n: usize, m: usize, canvas: Dims, config: &EMConfig) -> Result<HierModel> {
    if data.total_snapshots() == 0 {
        return Err(Error::EmptyDataset);
    }
    let kmax = data.max_count();
    if n < kmax {
        return Err(Error::InvalidParameter(format!(
            "N = {n} is below the largest snapshot count per epoch ({kmax})"
        )));
    }
    if m == 0 || m > n {
        return Err(Error::InvalidParameter(format!("need 1 <= M <= N, got M = {m}, N = {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let grid = |rng: &mut ChaCha8Rng| OccupancyGrid::from_fn(canvas, |_, _| rng.random::<f64>());
    let objects: Vec<OccupancyGrid> = (0..n).map(|_| grid(&mut rng)).collect();
    let templates: Vec<OccupancyGrid> = (0..m).map(|_| grid(&mut rng)).collect();
    let candidates = config.pose_grid.candidates();
    let alignments = data
        .counts()
        .iter()
        .map(|&k| (0..k).map(|_| candidates[rng.random_range(0..candidates.len())]).collect())
        .collect();
    let (sigma, rho) = anneal(0, config);
    Ok(HierModel {
        templates,
        objects,
        alignments,
        sigma,
        rho,
        flat: false,
    })
}

pub fn run_em(data: &Dataset, n: usize, m: usize, config: &EMConfig) -> Result<EmRun> {
    config.validate()?;
    let canvas = model_canvas(data, &config.pose_grid);
    let init = init_random(data, n, m, canvas, config)?;
    run_em_from(data, init, config)
}

/// Flat baseline: one level of objects, no templates.
pub fn run_em_flat(data: &Dataset, n: usize, config: &EMConfig) -> Result<EmRun> {
    config.validate()?;
    let canvas = model_canvas(data, &config.pose_grid);
    let mut init = init_random(data, n, n, canvas, config)?;
    init.templates = init.objects.clone();
    init.flat = true;
    run_em_from(data, init, config)
}

pub fn run_em_from(data: &Dataset, init: HierModel, config: &EMConfig) -> Result<EmRun> {
    run_em_observed(data, init, config, &mut |_, _| {})
}

fn identity_beta(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// [`run_em_from`] with a callback receiving the model after each E-step.
pub fn run_em_observed(
    data: &Dataset,
    init: HierModel,
    config: &EMConfig,
    observer: &mut dyn FnMut(usize, &HierModel),
) -> Result<EmRun> {
    config.validate()?;
    init.validate()?;
    init.check_data(data)?;
    if data.total_snapshots() == 0 {
        return Err(Error::EmptyDataset);
    }
    let strategy = ExactEnumeration {
        max_terms: config.max_assignments,
    };
    let table = AlignmentTable::new(data, init.canvas(), &config.pose_grid)?;
    let mut model = init;
    let mut trace = EMTrace::default();
    let mut prev_exp: Option<Expectations> = None;
    let size_penalty = if model.flat {
        penalty(model.n(), 0, config.penalty_n, 0.0)
    } else {
        penalty(model.n(), model.m(), config.penalty_n, config.penalty_m)
    };
    let offset = config.sigma0.max(config.rho0);
    let mut i = 0;
    loop {
        let (sigma, rho) = anneal(i, config);
        model.sigma = sigma;
        model.rho = rho;
        let aligned = model.aligned_snapshots(data);
        let tables = sse_tables(&model, &aligned);
        let (beta, beta_log) = if model.flat {
            (identity_beta(model.n()), 0.0)
        } else {
            beta_from_sse(&tables.coupling, sigma)
        };
        let posts = alpha_posteriors(&tables.data, rho, &strategy).map_err(|e| e.in_step("E-step", i))?;
        let alpha_log: f64 = posts.iter().map(|p| p.log_normalizer).sum();
        let exp = Expectations {
            beta,
            alpha: posts.into_iter().map(|p| p.marginals).collect(),
        };
        let objective = if model.flat {
            let mut t = tables;
            t.coupling = vec![vec![0.0; model.n()]; model.n()];
            objective_from_tables(&t, &exp, sigma, rho)
        } else {
            objective_from_tables(&tables, &exp, sigma, rho)
        };
        let log_posterior = 2.0 * (beta_log + alpha_log);
        let record = IterationRecord {
            iteration: i,
            sigma,
            rho,
            objective,
            log_posterior,
            penalized_objective: log_posterior - size_penalty,
            max_change: prev_exp.as_ref().map(|p| p.max_abs_diff(&exp)),
        };
        observer(i, &model);
        let converged = match trace.records.last() {
            Some(last) => {
                config.gamma.powi(i as i32) * offset < config.tol
                    && record.penalized_objective - last.penalized_objective < config.tol
            }
            None => false,
        };
        trace.records.push(record);
        if converged || i >= config.max_iters {
            return Ok(EmRun {
                model,
                expectations: exp,
                trace,
            });
        }
        let (templates, objects) = mstep_model(&model, &aligned, &exp, sigma, rho);
        model.templates = templates;
        model.objects = objects;
        model.alignments = table.best_poses(&model.objects, &exp.alpha);
        prev_exp = Some(exp);
        i += 1;
    }
}
