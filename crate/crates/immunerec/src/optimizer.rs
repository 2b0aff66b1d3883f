//! Conjugate-gradient minimization of the objective on a fixed mesh:
//! Fletcher-Reeves directions, the closed-form step length, a decaying
//! regularization schedule, and a three-part stopping rule.

use serde::{Deserialize, Serialize};

use crate::adjoint::solve_adjoint;
use crate::data::InterpolatedData;
use crate::error::{Error, Result};
use crate::forward::{solve_forward, NewtonConfig, StateTrajectory};
use crate::mesh::PiecewiseFn;
use crate::model::{ModelParams, State};
use crate::objective::{assemble_gradient, evaluate_j, SmoothingWeights, TikhonovConfig};

/// Everything a CGA run needs on one mesh: model parameters, initial state,
/// interpolated data, the death-rate profile, the prior, data weights and
/// solver settings.
#[derive(Debug, Clone)]
pub struct Problem {
    pub params: ModelParams,
    pub x0: State,
    pub data: InterpolatedData,
    pub d_fn: PiecewiseFn,
    pub e_prior: PiecewiseFn,
    pub weights: SmoothingWeights,
    pub floor: f64,
    pub newton: NewtonConfig,
}

/// Configuration of the conjugate-gradient iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgaConfig {
    /// Initial regularization weight gamma_0.
    pub gamma0: f64,
    /// Decay exponent of the schedule `gamma_m = gamma_0 / (m+1)^p`.
    pub p: f64,
    /// Gradient-norm stopping tolerance theta.
    pub theta: f64,
    pub max_iters: usize,
    /// Consecutive iterations of small relative change that count as a stall.
    pub stall_window: usize,
    /// Relative-change threshold for the stall rule.
    pub stall_tol: f64,
    /// Gradient-norm growth factor over the running minimum that stops the
    /// iteration.
    pub growth_factor: f64,
    /// Admissible interval for E.
    pub box_lo: f64,
    pub box_hi: f64,
    /// Clamp iterates into the admissible interval. Off by default: the
    /// update formulas carry no projection step; the box is part of the
    /// problem statement and available on request.
    pub project: bool,
    /// Cap on the max-norm of one iterate update. The closed-form step is
    /// exact for the regularization quadratic but ignores misfit curvature;
    /// on strongly data-driven problems it can overshoot by orders of
    /// magnitude, pushing the state solver out of its domain.
    pub step_max: f64,
    /// Accepted for interface fidelity; the update is fully determined by
    /// the step length and direction formulas, so this value is unused.
    pub beta0: f64,
    /// Offset added to the iteration index in the regularization schedule,
    /// letting an outer loop continue a decayed schedule across meshes.
    pub schedule_offset: usize,
}

impl Default for CgaConfig {
    fn default() -> Self {
        CgaConfig {
            gamma0: 0.1,
            p: 0.5,
            theta: 1e-3,
            max_iters: 200,
            stall_window: 5,
            stall_tol: 1e-4,
            growth_factor: 5.0,
            box_lo: 1.0,
            box_hi: 10.0,
            project: false,
            step_max: 2.0,
            beta0: 0.0,
            schedule_offset: 0,
        }
    }
}

impl CgaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma0 > 0.0) {
            return Err(Error::invalid("gamma0 must be positive"));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::invalid("decay exponent p must lie in (0,1)"));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::invalid("theta must lie in (0,1)"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.growth_factor > 1.0) {
            return Err(Error::invalid("growth factor must exceed 1"));
        }
        if !(self.step_max > 0.0) {
            return Err(Error::invalid("step cap must be positive"));
        }
        if self.box_lo >= self.box_hi {
            return Err(Error::invalid("admissible box must be non-empty"));
        }
        Ok(())
    }
}

/// Regularization schedule `gamma_m = gamma_0 / (m+1)^p`.
pub fn reg_schedule(m: usize, gamma0: f64, p: f64) -> f64 {
    gamma0 / ((m + 1) as f64).powf(p)
}

/// Why the iteration stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    /// `||G|| <= theta`.
    GradientBelowTheta,
    /// `||G||` grew past `growth_factor` times its running minimum.
    GradientGrowth,
    /// Relative iterate change stayed below `stall_tol` for a full window.
    Stalled,
    MaxIterations,
    /// The state solver failed at an iterate after the first; the run keeps
    /// the best earlier iterate.
    IterateDiverged,
}

/// One iteration record.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CgaIteration {
    pub m: usize,
    pub j: f64,
    pub grad_norm: f64,
    /// `||E_m - E_{m-1}|| / ||E_m||`; zero at m = 0.
    pub rel_change: f64,
    pub gamma: f64,
    /// Step length r_m (zero on the final, non-updating record).
    pub step: f64,
    /// Fletcher-Reeves beta_m (zero at m = 0).
    pub beta: f64,
    /// Whether the iterate was kept. A rejected iterate raised the objective;
    /// the iteration reverts to the previous point with a smaller step cap
    /// and a fresh descent direction.
    pub accepted: bool,
}

/// Full iteration history plus the termination reason.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CgaTrace {
    pub iterations: Vec<CgaIteration>,
    pub termination: Termination,
    /// Index of the iterate the run returned (smallest gradient norm seen).
    pub returned_m: usize,
}

impl CgaTrace {
    /// Gradient norm of the returned iterate.
    pub fn final_grad_norm(&self) -> f64 {
        self.iterations
            .iter()
            .find(|r| r.m == self.returned_m)
            .map(|r| r.grad_norm)
            .unwrap_or(0.0)
    }
}

/// Result of a CGA run: the final iterate, its trace, and the last forward
/// and adjoint solves (reused by callers for residuals and estimators).
pub struct CgaOutcome {
    pub e_final: PiecewiseFn,
    pub trace: CgaTrace,
    pub final_traj: StateTrajectory,
    pub final_gradient: PiecewiseFn,
    /// Regularization weight in effect for the returned iterate.
    pub final_gamma: f64,
}

fn solve_both(
    e: &PiecewiseFn,
    problem: &Problem,
    gamma: f64,
) -> Result<(StateTrajectory, PiecewiseFn, f64)> {
    let mesh = problem.data.mesh();
    let traj = solve_forward(
        e,
        &problem.d_fn,
        &problem.x0,
        mesh,
        &problem.params,
        &problem.newton,
    )?;
    let adj = solve_adjoint(
        &traj,
        e,
        &problem.d_fn,
        &problem.data,
        &problem.weights,
        problem.floor,
        &problem.params,
        &problem.newton,
    )?;
    let cfg = TikhonovConfig {
        gamma,
        e_prior: problem.e_prior.clone(),
        floor: problem.floor,
        use_lambda3: false,
    };
    let g = assemble_gradient(&traj, &adj, e, &problem.d_fn, &cfg)?;
    let j = evaluate_j(&traj, e, &problem.data, &cfg, &problem.weights)?;
    Ok((traj, g, j))
}

/// Run the conjugate-gradient iteration from `e0`.
///
/// Returns the iterate with the smallest recorded gradient norm. The
/// iteration recovers from a state-solver failure at any iterate after the
/// first by terminating with the best earlier iterate; a failure at the
/// starting point is an error.
pub fn cga_run(e0: &PiecewiseFn, problem: &Problem, cfg: &CgaConfig) -> Result<CgaOutcome> {
    cfg.validate()?;
    let mesh = problem.data.mesh();
    if !e0.on_mesh(mesh) || !problem.e_prior.on_mesh(mesh) || !problem.d_fn.on_mesh(mesh) {
        return Err(Error::MeshMismatch(
            "optimizer inputs must live on the data mesh".into(),
        ));
    }
    if cfg.project {
        if let Some(v) = e0
            .values()
            .iter()
            .find(|v| **v < cfg.box_lo || **v > cfg.box_hi)
        {
            return Err(Error::invalid(format!(
                "initial guess value {v} outside the admissible box [{}, {}]",
                cfg.box_lo, cfg.box_hi
            )));
        }
    }

    let mut e = e0.clone();
    let mut e_prev: Option<PiecewiseFn> = None;
    let mut direction: Option<PiecewiseFn> = None;
    let mut prev_grad_norm_sq = 0.0;
    let mut min_grad_norm = f64::INFINITY;
    let mut stall_run = 0usize;
    let mut iterations = Vec::new();
    // Best iterate seen: (grad_norm, E, m, gamma).
    let mut best: Option<(f64, PiecewiseFn, usize, f64)> = None;
    // Objective value at the last accepted iterate, and the running step cap.
    let mut accepted_j: Option<f64> = None;
    let mut cap = cfg.step_max;

    let mut termination = Termination::MaxIterations;
    for m in 0..=cfg.max_iters {
        let gamma = reg_schedule(m + cfg.schedule_offset, cfg.gamma0, cfg.p);
        let solved = solve_both(&e, problem, gamma);
        let (_traj, grad, j) = match solved {
            Ok(t) => t,
            Err(err) => {
                if m == 0 {
                    return Err(Error::OptimizerFailure {
                        iteration: 0,
                        e_values: e.values().to_vec(),
                        source: Box::new(err),
                    });
                }
                // The update left the solver's domain; keep the best iterate.
                termination = Termination::IterateDiverged;
                break;
            }
        };
        let grad_norm = grad.l2_norm();

        // Descent check: an update that raised the objective is rejected,
        // the step cap halves, and the direction restarts from the gradient.
        // The comparison reuses objective values the iteration computes
        // anyway; no additional solves are involved.
        if let (Some(prev_j), Some(prev_e)) = (accepted_j, &e_prev) {
            if j > prev_j && m > 0 {
                iterations.push(CgaIteration {
                    m,
                    j,
                    grad_norm,
                    rel_change: 0.0,
                    gamma,
                    step: 0.0,
                    beta: 0.0,
                    accepted: false,
                });
                e = prev_e.clone();
                direction = None;
                prev_grad_norm_sq = 0.0;
                cap = (cap * 0.5).max(1e-9);
                if m == cfg.max_iters {
                    break;
                }
                continue;
            }
        }
        accepted_j = Some(j);

        let rel_change = match &e_prev {
            Some(prev) => {
                let diff = e.zip_with(prev, |a, b| a - b).unwrap();
                let denom = e.l2_norm();
                if denom > 0.0 {
                    diff.l2_norm() / denom
                } else {
                    0.0
                }
            }
            None => 0.0,
        };
        let beta = if prev_grad_norm_sq == 0.0 {
            0.0
        } else {
            grad_norm * grad_norm / prev_grad_norm_sq
        };
        let mut record = CgaIteration {
            m,
            j,
            grad_norm,
            rel_change,
            gamma,
            step: 0.0,
            beta,
            accepted: true,
        };

        if best.as_ref().map_or(true, |(g, ..)| grad_norm < *g) {
            best = Some((grad_norm, e.clone(), m, gamma));
        }

        // Stopping rules on the fresh gradient, before updating.
        if grad_norm <= cfg.theta {
            iterations.push(record);
            termination = Termination::GradientBelowTheta;
            break;
        }
        if grad_norm > cfg.growth_factor * min_grad_norm {
            iterations.push(record);
            termination = Termination::GradientGrowth;
            break;
        }
        if m > 0 && rel_change < cfg.stall_tol {
            stall_run += 1;
            if stall_run >= cfg.stall_window {
                iterations.push(record);
                termination = Termination::Stalled;
                break;
            }
        } else {
            stall_run = 0;
        }
        if m == cfg.max_iters {
            iterations.push(record);
            termination = Termination::MaxIterations;
            break;
        }
        min_grad_norm = min_grad_norm.min(grad_norm);

        // Direction update: d_m = -G_m + beta_m d_{m-1}.
        let d = match &direction {
            None => grad.map(|v| -v),
            Some(d_prev) => grad.zip_with(d_prev, |g, d| -g + beta * d).unwrap(),
        };
        let d_norm_sq = d.l2_inner(&d);
        if d_norm_sq == 0.0 {
            return Err(Error::DegenerateDirection {
                iteration: m,
                grad_norm,
            });
        }
        // r_m = -(G_m, d_m) / (gamma_m ||d_m||^2), capped so one update moves
        // no component further than the current step cap.
        let mut step = -grad.l2_inner(&d) / (gamma * d_norm_sq);
        let move_inf = step.abs() * d.max_abs();
        if move_inf > cap {
            step *= cap / move_inf;
        }
        record.step = step;
        iterations.push(record);

        let mut e_next = e.zip_with(&d, |ev, dv| ev + step * dv).unwrap();
        if cfg.project {
            for v in e_next.values_mut() {
                *v = v.clamp(cfg.box_lo, cfg.box_hi);
            }
        }
        e_prev = Some(std::mem::replace(&mut e, e_next));
        direction = Some(d);
        prev_grad_norm_sq = grad_norm * grad_norm;
    }

    let (_, e_best, m_best, gamma_best) =
        best.expect("at least the starting iterate was evaluated");
    // Re-solve at the returned iterate so callers get its trajectory,
    // gradient and residual quantities.
    let (traj, grad, _) =
        solve_both(&e_best, problem, gamma_best).map_err(|err| Error::OptimizerFailure {
            iteration: m_best,
            e_values: e_best.values().to_vec(),
            source: Box::new(err),
        })?;
    Ok(CgaOutcome {
        e_final: e_best,
        trace: CgaTrace {
            iterations,
            termination,
            returned_m: m_best,
        },
        final_traj: traj,
        final_gradient: grad,
        final_gamma: gamma_best,
    })
}
