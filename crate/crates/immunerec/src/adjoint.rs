//! Backward-in-time solve of the adjoint system from `lambda(T) = 0`,
//! consuming the stored forward trajectory and the data-misfit forcings.
//!
//! Each mesh interval is swept with the same sub-step ratio as the forward
//! solver: the homogeneous part propagates through per-sub-step linear solves
//! whose matrices are the exact transposed derivatives of the forward
//! sub-steps (the system is affine in lambda), while the interval's misfit
//! forcing enters once, at the left node, mirroring the left-rectangle
//! quadrature of the objective. The sweep also accumulates the interval mean
//! of `lambda2 * u2`, the pairing the gradient assembly consumes; the product
//! is smooth in time even where both factors vary by orders of magnitude
//! within an interval.

use std::sync::Arc;

use crate::data::InterpolatedData;
use crate::error::{Error, Result};
use crate::forward::{interval_substates, solve3, NewtonConfig, StateTrajectory};
use crate::mesh::{PiecewiseFn, TimeMesh};
use crate::model::{adjoint_jacobian, adjoint_rhs, Adjoint, ModelParams, State, LN_10};
use crate::objective::SmoothingWeights;

/// Adjoint solution at mesh nodes plus the per-interval dual pairing.
#[derive(Debug, Clone)]
pub struct AdjointTrajectory {
    mesh: Arc<TimeMesh>,
    adjoints: Vec<Adjoint>,
    /// Interval mean of `lambda2 * u2`, accumulated at sub-step resolution
    /// during the backward sweep.
    pairing: Vec<f64>,
}

impl AdjointTrajectory {
    pub fn mesh(&self) -> &Arc<TimeMesh> {
        &self.mesh
    }

    pub fn adjoints(&self) -> &[Adjoint] {
        &self.adjoints
    }

    pub fn adjoint(&self, node: usize) -> &Adjoint {
        &self.adjoints[node]
    }

    pub fn terminal(&self) -> &Adjoint {
        self.adjoints.last().unwrap()
    }

    /// Interval mean of `lambda2 * u2` over interval `k`.
    pub fn lambda2_u2_mean(&self, k: usize) -> f64 {
        self.pairing[k]
    }

    pub fn lambda2_u2_means(&self) -> &[f64] {
        &self.pairing
    }

    pub fn max_abs(&self) -> f64 {
        self.adjoints.iter().fold(0.0, |m, l| {
            m.max(l.l1.abs()).max(l.l2.abs()).max(l.l3.abs())
        })
    }
}

fn scaled_norm(r: &Adjoint, reference: &Adjoint) -> f64 {
    let s1 = r.l1.abs() / (1.0 + reference.l1.abs());
    let s2 = r.l2.abs() / (1.0 + reference.l2.abs());
    let s3 = r.l3.abs() / (1.0 + reference.l3.abs());
    s1.max(s2).max(s3)
}

/// One backward implicit step: find `l` with
/// `l + tau * f~(l) = l_next` by Newton's method. The system is affine in
/// `l`, so the iteration converges in a single update; the loop exists to
/// verify the residual against the configured tolerance.
pub fn step_backward(
    l_next: &Adjoint,
    tau: f64,
    x: &State,
    e: f64,
    d: f64,
    forcing: (f64, f64),
    p: &ModelParams,
    cfg: &NewtonConfig,
) -> Result<Adjoint> {
    step_backward_counted(l_next, tau, x, e, d, forcing, p, cfg).map(|(l, _)| l)
}

pub(crate) fn step_backward_counted(
    l_next: &Adjoint,
    tau: f64,
    x: &State,
    e: f64,
    d: f64,
    forcing: (f64, f64),
    p: &ModelParams,
    cfg: &NewtonConfig,
) -> Result<(Adjoint, usize)> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!(
            "backward step needs tau > 0, got {tau}"
        )));
    }
    let (m1, m2) = forcing;
    let residual = |l: &Adjoint| -> Adjoint {
        let f = adjoint_rhs(l, x, e, d, m1, m2, p);
        Adjoint::new(
            l.l1 + tau * f.l1 - l_next.l1,
            l.l2 + tau * f.l2 - l_next.l2,
            l.l3 + tau * f.l3 - l_next.l3,
        )
    };
    let jac = adjoint_jacobian(x, e, d, p);
    let newton = [
        [1.0 + tau * jac[0][0], tau * jac[0][1], tau * jac[0][2]],
        [tau * jac[1][0], 1.0 + tau * jac[1][1], tau * jac[1][2]],
        [tau * jac[2][0], tau * jac[2][1], 1.0 + tau * jac[2][2]],
    ];
    let mut l = *l_next;
    let mut iterations = 0;
    for _ in 0..cfg.max_iter {
        let r = residual(&l);
        if scaled_norm(&r, l_next) <= cfg.tol_rel {
            return Ok((l, iterations));
        }
        let delta = solve3(&newton, &[-r.l1, -r.l2, -r.l3])?;
        l = Adjoint::new(l.l1 + delta[0], l.l2 + delta[1], l.l3 + delta[2]);
        iterations += 1;
    }
    let r = residual(&l);
    let norm = scaled_norm(&r, l_next);
    if norm <= cfg.tol_rel {
        return Ok((l, iterations));
    }
    Err(Error::NewtonDivergence {
        max_iter: cfg.max_iter,
        last_residual: norm,
        trace: vec![norm],
    })
}

/// Misfit forcing pair for interval `k`, the derivative of that interval's
/// objective contribution with respect to the state sample.
///
/// Returns `(misfit1, misfit2)` where `misfit1` carries the total-cell log
/// misfit and `misfit2` the virus log misfit. A sample at or below `floor`
/// sits on the clamped branch of the objective and contributes zero.
pub fn misfit_forcing(
    x: &State,
    log10_g1: f64,
    log10_g2: f64,
    z1: f64,
    z2: f64,
    floor: f64,
) -> Result<(f64, f64)> {
    let total = x.u1 + x.u2;
    if !total.is_finite() || !x.u3.is_finite() {
        return Err(Error::invalid("misfit forcing from non-finite state"));
    }
    let m1 = if total > floor {
        z1 * (total.log10() - log10_g1) / (total * LN_10)
    } else {
        0.0
    };
    let m2 = if x.u3 > floor {
        z2 * (x.u3.log10() - log10_g2) / (x.u3 * LN_10)
    } else {
        0.0
    };
    Ok((m1, m2))
}

/// Solve the adjoint system backward from `lambda(T) = 0`.
///
/// `traj`, `e_fn`, `d_fn`, `data` and `weights` must live on the same mesh.
/// The forward sub-step states of each interval are recomputed from the
/// stored node value (the forward solve is deterministic), so the trajectory
/// itself stays node-resolution.
pub fn solve_adjoint(
    traj: &StateTrajectory,
    e_fn: &PiecewiseFn,
    d_fn: &PiecewiseFn,
    data: &InterpolatedData,
    weights: &SmoothingWeights,
    floor: f64,
    p: &ModelParams,
    cfg: &NewtonConfig,
) -> Result<AdjointTrajectory> {
    let mesh = traj.mesh();
    if !e_fn.on_mesh(mesh) || !d_fn.on_mesh(mesh) || !data.mesh().same_span(mesh) {
        return Err(Error::MeshMismatch(
            "adjoint inputs must live on the trajectory mesh".into(),
        ));
    }
    if !(floor > 0.0) {
        return Err(Error::invalid("log floor must be positive"));
    }
    cfg.validate()?;
    let n = mesh.interval_count();
    let mut adjoints = vec![Adjoint::zero(); n + 1];
    let mut pairing = vec![0.0; n];

    for k in (0..n).rev() {
        let tau = mesh.tau(k);
        let e = e_fn.values()[k];
        let d = d_fn.values()[k];
        let subs = interval_substates(traj.interval_state(k), tau, e, d, p, cfg).map_err(|e| {
            Error::SolverAtInterval {
                interval: k,
                t_left: mesh.t_left(k),
                t_right: mesh.t_right(k),
                source: Box::new(e),
            }
        })?;
        let h = tau / cfg.substeps as f64;
        let mut l = adjoints[k + 1];
        let mut pair_acc = 0.0;
        for s in (1..=cfg.substeps).rev() {
            let a = adjoint_jacobian(&subs[s], e, d, p);
            let m = [
                [1.0 + h * a[0][0], h * a[0][1], h * a[0][2]],
                [h * a[1][0], 1.0 + h * a[1][1], h * a[1][2]],
                [h * a[2][0], h * a[2][1], 1.0 + h * a[2][2]],
            ];
            let sol = solve3(&m, &[l.l1, l.l2, l.l3]).map_err(|e| Error::SolverAtInterval {
                interval: k,
                t_left: mesh.t_left(k),
                t_right: mesh.t_right(k),
                source: Box::new(e),
            })?;
            l = Adjoint::new(sol[0], sol[1], sol[2]);
            // Pair the propagated multiplier with u2 at the sub-step it just
            // crossed: how the sub-stepped flow responds to a change of E.
            pair_acc += h * l.l2 * subs[s].u2;
        }
        let (m1, m2) = misfit_forcing(
            traj.interval_state(k),
            data.log10_g1().values()[k],
            data.log10_g2().values()[k],
            weights.z1().values()[k],
            weights.z2().values()[k],
            floor,
        )
        .map_err(|_| Error::MisfitDomain {
            node: k,
            t: mesh.t_left(k),
            reason: "non-finite state in misfit forcing".into(),
        })?;
        adjoints[k] = Adjoint::new(l.l1 - tau * m1, l.l2 - tau * m1, l.l3 - tau * m2);
        pairing[k] = pair_acc / tau;
    }

    Ok(AdjointTrajectory {
        mesh: mesh.clone(),
        adjoints,
        pairing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> ModelParams {
        ModelParams::default()
    }

    #[test]
    fn zero_terminal_zero_forcing_stays_zero() {
        let cfg = NewtonConfig::default();
        let x = State::new(8e5, 2e4, 3e6);
        let l = step_backward(&Adjoint::zero(), 1.0, &x, 1.3, 0.3, (0.0, 0.0), &p(), &cfg).unwrap();
        assert_eq!(l.as_array(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_step_matches_hand_inverted_system() {
        // With u1 = u3 = 0 the system decouples: hand-solve (I + tau A) l = -tau F.
        let cfg = NewtonConfig::default();
        let pm = p();
        let x = State::new(0.0, 5e3, 0.0);
        let (tau, e, d, a, b) = (0.7, 1.4, 0.3, 0.25, -0.6);
        let l = step_backward(&Adjoint::zero(), tau, &x, e, d, (a, b), &pm, &cfg).unwrap();
        let l1 = -tau * a / (1.0 + tau * pm.mu);
        let l3 = -tau * b / (1.0 + tau * pm.c);
        let l2 = (-tau * a + tau * pm.rho * l3) / (1.0 + tau * d * e);
        assert!((l.l1 - l1).abs() <= 1e-12 * l1.abs().max(1.0));
        assert!((l.l2 - l2).abs() <= 1e-12 * l2.abs().max(1.0));
        assert!((l.l3 - l3).abs() <= 1e-12 * l3.abs().max(1.0));
    }

    #[test]
    fn backward_step_satisfies_contract() {
        let cfg = NewtonConfig::default();
        let x = State::new(9e5, 1e3, 5e4);
        let l_next = Adjoint::new(0.2, -0.4, 1.1);
        let tau = 0.05;
        let l = step_backward(&l_next, tau, &x, 1.1, 0.28, (0.3, -0.2), &p(), &cfg).unwrap();
        let f = adjoint_rhs(&l, &x, 1.1, 0.28, 0.3, -0.2, &p());
        let r = Adjoint::new(
            l.l1 + tau * f.l1 - l_next.l1,
            l.l2 + tau * f.l2 - l_next.l2,
            l.l3 + tau * f.l3 - l_next.l3,
        );
        assert!(scaled_norm(&r, &l_next) <= cfg.tol_rel);
    }

    #[test]
    fn backward_step_is_affine_superposition() {
        let cfg = NewtonConfig::default();
        let pm = p();
        let x = State::new(8e5, 2e4, 3e6);
        let (tau, e, d) = (0.4, 1.2, 0.33);
        let forcing = (0.15, -0.07);
        let pq = Adjoint::new(0.5, -0.1, 0.9);
        let q = Adjoint::new(-0.2, 0.6, 0.3);
        let sum = Adjoint::new(pq.l1 + q.l1, pq.l2 + q.l2, pq.l3 + q.l3);
        let sp = step_backward(&pq, tau, &x, e, d, forcing, &pm, &cfg).unwrap();
        let sq = step_backward(&q, tau, &x, e, d, forcing, &pm, &cfg).unwrap();
        let s0 = step_backward(&Adjoint::zero(), tau, &x, e, d, forcing, &pm, &cfg).unwrap();
        let ss = step_backward(&sum, tau, &x, e, d, forcing, &pm, &cfg).unwrap();
        for i in 0..3 {
            let expect = sp.as_array()[i] + sq.as_array()[i] - s0.as_array()[i];
            assert!((ss.as_array()[i] - expect).abs() <= 1e-10 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn perfect_fit_twin_has_zero_adjoint() {
        // Data manufactured to match the trajectory exactly: every misfit
        // forcing vanishes and lambda stays identically zero.
        use crate::data::{make_twin, TwinSpec};
        use crate::mesh::TimeMesh;
        use crate::objective::SmoothingWeights;

        let mesh = TimeMesh::uniform(40.0, 1.0).unwrap();
        let e_true = PiecewiseFn::from_midpoints(mesh.clone(), |t| 1.0 + 0.02 * t.sin());
        let d_fn = PiecewiseFn::constant(mesh.clone(), 0.26);
        let cfg = NewtonConfig {
            substeps: 50,
            ..NewtonConfig::default()
        };
        let (data, traj) = make_twin(
            &p(),
            &d_fn,
            &TwinSpec::noiseless(e_true.clone()),
            &mesh,
            &State::default_initial(),
            &cfg,
        )
        .unwrap();
        let w = SmoothingWeights::ones(mesh.clone());
        let adj = solve_adjoint(&traj, &e_true, &d_fn, &data, &w, 1e-2, &p(), &cfg).unwrap();
        assert_eq!(adj.max_abs(), 0.0);
        assert!(adj.lambda2_u2_means().iter().all(|&v| v == 0.0));
        assert_eq!(adj.terminal().as_array(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn adjoint_is_linear_in_forcing() {
        // Scaling the data weights scales the forcing, hence lambda, exactly.
        use crate::data::InterpolatedData;
        use crate::mesh::TimeMesh;
        use crate::objective::SmoothingWeights;

        let mesh = TimeMesh::uniform(30.0, 1.0).unwrap();
        let e_fn = PiecewiseFn::constant(mesh.clone(), 1.2);
        let d_fn = PiecewiseFn::constant(mesh.clone(), 0.26);
        let cfg = NewtonConfig {
            substeps: 50,
            ..NewtonConfig::default()
        };
        let traj = crate::forward::solve_forward(
            &e_fn,
            &d_fn,
            &State::default_initial(),
            &mesh,
            &p(),
            &cfg,
        )
        .unwrap();
        let n = mesh.interval_count();
        let data = InterpolatedData::from_values(mesh.clone(), vec![9e5; n], vec![1e4; n]).unwrap();
        let alpha = 0.35;
        let w1 = SmoothingWeights::ones(mesh.clone());
        let wa = SmoothingWeights::new(
            PiecewiseFn::constant(mesh.clone(), alpha),
            PiecewiseFn::constant(mesh.clone(), alpha),
        )
        .unwrap();
        let full = solve_adjoint(&traj, &e_fn, &d_fn, &data, &w1, 1e-2, &p(), &cfg).unwrap();
        let scaled = solve_adjoint(&traj, &e_fn, &d_fn, &data, &wa, 1e-2, &p(), &cfg).unwrap();
        for (f, s) in full.adjoints().iter().zip(scaled.adjoints()) {
            for i in 0..3 {
                let expect = alpha * f.as_array()[i];
                let got = s.as_array()[i];
                assert!(
                    (got - expect).abs() <= 1e-10 * expect.abs().max(1e-12),
                    "lambda component {i}: {got} vs {expect}"
                );
            }
        }
        assert!(full.max_abs() > 0.0);
    }

    #[test]
    fn affine_system_converges_in_at_most_two_updates() {
        let cfg = NewtonConfig::default();
        let x = State::new(7e5, 4e4, 8e6);
        for (l_next, forcing) in [
            (Adjoint::zero(), (0.0, 0.0)),
            (Adjoint::new(1.0, -2.0, 0.5), (0.2, 0.4)),
            (Adjoint::new(-3.0, 0.1, 2.2), (-0.9, 0.0)),
        ] {
            let (_, count) =
                step_backward_counted(&l_next, 0.8, &x, 1.5, 0.3, forcing, &p(), &cfg).unwrap();
            assert!(count <= 2, "affine Newton took {count} updates");
        }
    }
}
