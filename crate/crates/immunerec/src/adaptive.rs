//! The adaptive outer loop: run the conjugate-gradient iteration on the
//! current mesh, refine the mesh where the weighted stationarity residual
//! concentrates, transfer the iterate and data to the refined mesh, and stop
//! on cross-level gradient stagnation or a small error estimator. Also the
//! three a posteriori error estimators.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{
    ctl_profiles, interpolate_to_mesh, ClinicalSeries, InterpolatedData, DEFAULT_LOG_FLOOR,
};
use crate::error::{Error, Result};
use crate::forward::{NewtonConfig, StateTrajectory};
use crate::mesh::{flagged_intervals, jumps, refine_where, transfer, PiecewiseFn, TimeMesh};
use crate::model::{CtlParams, ModelParams, State};
use crate::objective::{build_smoothing, data_residuals, DataResiduals};
use crate::optimizer::{cga_run, CgaConfig, CgaTrace, Problem};

/// Where the next level's starting iterate comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RestartFrom {
    /// Restart from the level's own initial guess (the CTL prior).
    InitialGuess,
    /// Warm-start from the previous level's result, transferred to the new
    /// mesh.
    PreviousResult,
}

/// Outer-loop configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcgaConfig {
    /// Mesh refinement fraction: intervals within this fraction of the
    /// maximal weighted residual are bisected.
    pub beta_refine: f64,
    /// Number of refinement rounds after level 0.
    pub max_refinements: usize,
    pub restart_from: RestartFrom,
    /// Stop once the constant-free estimator falls below this tolerance;
    /// zero disables the check.
    pub theta_est: f64,
    /// Step of the uniform level-0 mesh (clinical sources only).
    pub level0_step: f64,
    /// Stop when a level's final gradient norm fails to drop below this
    /// fraction of the previous level's. Zero disables the rule; the
    /// gradient-norm plateau across levels sets in immediately on the
    /// clinical records, so the default runs all requested refinements.
    pub cross_level_stall_factor: f64,
    /// Continue the decayed regularization schedule across levels instead of
    /// resetting it to gamma0 at each level.
    pub continue_schedule: bool,
    pub inner: CgaConfig,
}

impl Default for AcgaConfig {
    fn default() -> Self {
        AcgaConfig {
            beta_refine: 0.875,
            max_refinements: 4,
            restart_from: RestartFrom::PreviousResult,
            theta_est: 0.0,
            level0_step: 1.0,
            cross_level_stall_factor: 0.0,
            continue_schedule: false,
            inner: CgaConfig::default(),
        }
    }
}

impl AcgaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_refine > 0.0 && self.beta_refine < 1.0) {
            return Err(Error::invalid("beta_refine must lie in (0,1)"));
        }
        if !(self.level0_step > 0.0) {
            return Err(Error::invalid("level0_step must be positive"));
        }
        self.inner.validate()
    }
}

/// Data feeding the inversion: a clinical record re-interpolated per level,
/// or synthetic observations fixed on a base mesh.
#[derive(Debug, Clone)]
pub enum DataSource {
    Clinical(ClinicalSeries),
    Synthetic(InterpolatedData),
}

impl DataSource {
    fn level0_mesh(&self, step: f64) -> Result<Arc<TimeMesh>> {
        match self {
            DataSource::Clinical(series) => TimeMesh::uniform(series.t_end(), step),
            DataSource::Synthetic(data) => Ok(data.mesh().clone()),
        }
    }

    /// Data on a level mesh. Clinical sources re-interpolate from the
    /// original 8-point record; synthetic sources re-sample the fixed base
    /// data (exact on nested refinements).
    fn on_mesh(&self, mesh: &Arc<TimeMesh>) -> Result<InterpolatedData> {
        match self {
            DataSource::Clinical(series) => interpolate_to_mesh(series, mesh),
            DataSource::Synthetic(data) => data.transfer(mesh),
        }
    }
}

/// Where the death-rate profile and the prior come from.
#[derive(Debug, Clone)]
pub enum ProfileSource {
    /// CTL formulas applied to a clinical record's interpolated viral load.
    Ctl {
        series: ClinicalSeries,
        ctl: CtlParams,
    },
    /// Fixed profiles on a base mesh, re-sampled per level.
    Fixed { d: PiecewiseFn, e0: PiecewiseFn },
}

impl ProfileSource {
    fn on_mesh(&self, mesh: &Arc<TimeMesh>) -> Result<(PiecewiseFn, PiecewiseFn)> {
        match self {
            ProfileSource::Ctl { series, ctl } => ctl_profiles(series, ctl, mesh),
            ProfileSource::Fixed { d, e0 } => Ok((transfer(d, mesh)?, transfer(e0, mesh)?)),
        }
    }
}

/// A full inversion problem, independent of any particular mesh level.
#[derive(Debug, Clone)]
pub struct AcgaProblem {
    pub params: ModelParams,
    pub x0: State,
    pub data: DataSource,
    pub profiles: ProfileSource,
    /// Taper width of the data smoothing weights, days. Zero keeps unit
    /// weights over the full span.
    pub taper_days: f64,
    pub floor: f64,
    pub newton: NewtonConfig,
}

impl AcgaProblem {
    /// Problem for one of the embedded patient records.
    pub fn patient(n: u8, params: ModelParams, newton: NewtonConfig) -> Result<Self> {
        let series = crate::data::builtin_patient(n)?;
        let ctl = CtlParams::patient(n)?;
        Ok(AcgaProblem {
            params,
            x0: State::default_initial(),
            data: DataSource::Clinical(series.clone()),
            profiles: ProfileSource::Ctl { series, ctl },
            taper_days: 0.0,
            floor: DEFAULT_LOG_FLOOR,
            newton,
        })
    }
}

/// Everything recorded at one refinement level.
#[derive(Debug, Clone)]
pub struct RefinementRecord {
    pub level: usize,
    pub mesh: Arc<TimeMesh>,
    pub node_count: usize,
    /// Reconstructed immune response on this level.
    pub e: PiecewiseFn,
    /// The level's prior/initial guess.
    pub e_prior: PiecewiseFn,
    pub d_fn: PiecewiseFn,
    pub data: InterpolatedData,
    pub trajectory: StateTrajectory,
    pub residuals: DataResiduals,
    /// Stationarity residual at the final iterate.
    pub stationarity: PiecewiseFn,
    /// Regularization weight in effect at the final iterate.
    pub gamma_final: f64,
    pub est_objective: f64,
    pub est_reconstruction: f64,
    pub est_residual_bound: f64,
    pub trace: CgaTrace,
    /// Intervals flagged for bisection by the refinement criterion
    /// (what produced the next level's mesh).
    pub flagged: Vec<usize>,
}

/// Why the outer loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AcgaStop {
    MaxRefinements,
    /// Final gradient norms increased or stabilized across levels.
    GradientStalled,
    EstimatorBelowTolerance,
    /// The weighted residual vanished; no interval qualified for refinement.
    IndicatorVanished,
}

pub struct AcgaOutcome {
    pub records: Vec<RefinementRecord>,
    pub stop: AcgaStop,
}

/// Constant-free reconstruction-error bound `||R(E)|| / gamma`.
pub fn residual_error_bound(residual: &PiecewiseFn, gamma: f64) -> f64 {
    residual.l2_norm() / gamma
}

/// Jump contribution `sum_k |[E]_k| sqrt(mean of adjoining steps)`.
fn jump_sum(e: &PiecewiseFn) -> f64 {
    let mesh = e.mesh();
    jumps(e)
        .iter()
        .enumerate()
        .map(|(k, j)| j.abs() * (0.5 * (mesh.tau(k) + mesh.tau(k + 1))).sqrt())
        .sum()
}

/// Objective-error indicator `||G|| (||tau E|| + sum |[E]| sqrt(tau))`,
/// with the interpolation constant taken as 1.
pub fn objective_error_indicator(gradient: &PiecewiseFn, e: &PiecewiseFn) -> f64 {
    let mesh = e.mesh();
    let tau_e = PiecewiseFn::new(
        mesh.clone(),
        e.values()
            .iter()
            .enumerate()
            .map(|(k, v)| mesh.tau(k) * v)
            .collect(),
    )
    .expect("tau*E lives on e's mesh");
    gradient.l2_norm() * (tau_e.l2_norm() + jump_sum(e))
}

/// Reconstruction-error indicator `(D / gamma)(||tau E|| + sum |[E]| sqrt(tau))`
/// with the Lipschitz constant `D` supplied by the caller (default 1) and the
/// interpolation constant taken as 1.
pub fn reconstruction_error_indicator(e: &PiecewiseFn, gamma: f64, lipschitz_d: f64) -> f64 {
    let mesh = e.mesh();
    let tau_e = PiecewiseFn::new(
        mesh.clone(),
        e.values()
            .iter()
            .enumerate()
            .map(|(k, v)| mesh.tau(k) * v)
            .collect(),
    )
    .expect("tau*E lives on e's mesh");
    (lipschitz_d / gamma) * (tau_e.l2_norm() + jump_sum(e))
}

/// Run the adaptive loop for one of the embedded patients.
pub fn acga_run_patient(
    n: u8,
    cfg: &AcgaConfig,
    params: ModelParams,
    newton: NewtonConfig,
) -> Result<AcgaOutcome> {
    acga_run(&AcgaProblem::patient(n, params, newton)?, cfg)
}

/// Run the adaptive conjugate-gradient loop.
pub fn acga_run(problem: &AcgaProblem, cfg: &AcgaConfig) -> Result<AcgaOutcome> {
    cfg.validate()?;
    problem.params.validate()?;
    let mut mesh = problem.data.level0_mesh(cfg.level0_step)?;
    let mut carried_e: Option<PiecewiseFn> = None;
    let mut schedule_offset = 0usize;
    let mut records: Vec<RefinementRecord> = Vec::new();

    for level in 0..=cfg.max_refinements {
        let wrap = |e: Error| Error::LevelFailure {
            level,
            source: Box::new(e),
        };

        let data = problem.data.on_mesh(&mesh).map_err(wrap)?;
        let (d_fn, e_prior) = problem.profiles.on_mesh(&mesh).map_err(wrap)?;
        let weights = build_smoothing(&mesh, problem.taper_days).map_err(wrap)?;
        let e_init = match (&carried_e, cfg.restart_from) {
            (Some(prev), RestartFrom::PreviousResult) => transfer(prev, &mesh).map_err(wrap)?,
            _ => e_prior.clone(),
        };
        let inner = CgaConfig {
            schedule_offset,
            ..cfg.inner
        };
        let level_problem = Problem {
            params: problem.params,
            x0: problem.x0,
            data,
            d_fn,
            e_prior,
            weights,
            floor: problem.floor,
            newton: problem.newton,
        };
        let out = cga_run(&e_init, &level_problem, &inner).map_err(wrap)?;

        // The stationarity residual at the final iterate is the final
        // gradient; |R|/gamma is the refinement indicator.
        let stationarity = out.final_gradient.clone();
        let gamma_final = out.final_gamma;
        let indicator = stationarity.map(|v| v.abs() / gamma_final);
        let flagged = flagged_intervals(&indicator, cfg.beta_refine).map_err(wrap)?;
        let residuals = data_residuals(&out.final_traj, &level_problem.data).map_err(wrap)?;
        let est_objective = objective_error_indicator(&stationarity, &out.e_final);
        let est_reconstruction = reconstruction_error_indicator(&out.e_final, gamma_final, 1.0);
        let est_residual_bound = residual_error_bound(&stationarity, gamma_final);

        if cfg.continue_schedule {
            schedule_offset += out.trace.iterations.len();
        }

        records.push(RefinementRecord {
            level,
            mesh: mesh.clone(),
            node_count: mesh.node_count(),
            e: out.e_final.clone(),
            e_prior: level_problem.e_prior.clone(),
            d_fn: level_problem.d_fn.clone(),
            data: level_problem.data.clone(),
            trajectory: out.final_traj,
            residuals,
            stationarity,
            gamma_final,
            est_objective,
            est_reconstruction,
            est_residual_bound,
            trace: out.trace,
            flagged: flagged.clone(),
        });

        // Cross-level stopping: gradient norms increased or stabilized.
        if level > 0 && cfg.cross_level_stall_factor > 0.0 {
            let prev = records[level - 1].trace.final_grad_norm();
            let this = records[level].trace.final_grad_norm();
            if this >= cfg.cross_level_stall_factor * prev {
                return Ok(AcgaOutcome {
                    records,
                    stop: AcgaStop::GradientStalled,
                });
            }
        }
        if cfg.theta_est > 0.0 && est_residual_bound <= cfg.theta_est {
            return Ok(AcgaOutcome {
                records,
                stop: AcgaStop::EstimatorBelowTolerance,
            });
        }
        if level == cfg.max_refinements {
            break;
        }
        if flagged.is_empty() {
            return Ok(AcgaOutcome {
                records,
                stop: AcgaStop::IndicatorVanished,
            });
        }

        let indicator = records[level].stationarity.map(|v| v.abs() / gamma_final);
        let refined = refine_where(&mesh, &indicator, cfg.beta_refine).map_err(wrap)?;
        carried_e = Some(match cfg.restart_from {
            RestartFrom::PreviousResult => records[level].e.clone(),
            RestartFrom::InitialGuess => records[level].e_prior.clone(),
        });
        mesh = refined;
    }

    Ok(AcgaOutcome {
        records,
        stop: AcgaStop::MaxRefinements,
    })
}
