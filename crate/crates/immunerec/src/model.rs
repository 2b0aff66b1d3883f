//! The three-component acute HIV dynamics: right-hand side, analytic
//! Jacobians, the adjoint system, and the CTL response profiles used to build
//! the time-dependent death rate `d(t)` and the initial guess `E0(t)`.
//!
//! States are `u1` (uninfected target cells), `u2` (infected cells) and `u3`
//! (free virions), all per ml. The immune response `E(t)` scales the death
//! rate of infected cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LN_10: f64 = std::f64::consts::LN_10;

/// Fixed kinetic parameters of the three-equation model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Inflow rate of target cells, cells/(ml·day).
    pub s: f64,
    /// Natural death rate of target cells, 1/day.
    pub mu: f64,
    /// Virus infectivity rate, ml/(virion·day).
    pub beta1: f64,
    /// Rate of viral loss on infection of target cells, ml/(cell·day).
    pub beta2: f64,
    /// Baseline death rate of infected cells, 1/day.
    pub d0: f64,
    /// Virus clearance rate, 1/day.
    pub c: f64,
    /// Virion production rate per infected cell, virion/(cell·day).
    pub rho: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            s: 1e4,
            mu: 0.01,
            beta1: 2.4e-8,
            beta2: 2.4e-8,
            d0: 0.26,
            c: 2.4,
            rho: 1e3,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("s", self.s),
            ("mu", self.mu),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("d0", self.d0),
            ("c", self.c),
            ("rho", self.rho),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!(
                    "model parameter {name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// State vector (u1, u2, u3): target cells, infected cells, virions per ml.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub u1: f64,
    pub u2: f64,
    pub u3: f64,
}

impl State {
    pub const fn new(u1: f64, u2: f64, u3: f64) -> Self {
        State { u1, u2, u3 }
    }

    /// Initial data used throughout: 1.125e6 target cells, no infected cells,
    /// one virion per ml.
    pub const fn default_initial() -> Self {
        State::new(1.125e6, 0.0, 1.0)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.u1, self.u2, self.u3]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        State::new(a[0], a[1], a[2])
    }

    pub fn is_finite(&self) -> bool {
        self.u1.is_finite() && self.u2.is_finite() && self.u3.is_finite()
    }
}

/// Adjoint variables (lambda1, lambda2, lambda3).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adjoint {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl Adjoint {
    pub const fn new(l1: f64, l2: f64, l3: f64) -> Self {
        Adjoint { l1, l2, l3 }
    }

    pub const fn zero() -> Self {
        Adjoint::new(0.0, 0.0, 0.0)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.l1, self.l2, self.l3]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Adjoint::new(a[0], a[1], a[2])
    }
}

/// Model right-hand side f(u, E, d).
///
/// `e` is the immune response value and `d` the infected-cell death rate in
/// effect at this time.
pub fn rhs(x: &State, e: f64, d: f64, p: &ModelParams) -> State {
    let infection = p.beta1 * x.u1 * x.u3;
    State {
        u1: p.s - infection - p.mu * x.u1,
        u2: infection - d * e * x.u2,
        u3: p.rho * x.u2 - p.beta2 * x.u1 * x.u3 - p.c * x.u3,
    }
}

/// Analytic Jacobian of [`rhs`] with respect to the state, row-major.
pub fn rhs_jacobian(x: &State, e: f64, d: f64, p: &ModelParams) -> [[f64; 3]; 3] {
    [
        [-p.beta1 * x.u3 - p.mu, 0.0, -p.beta1 * x.u1],
        [p.beta1 * x.u3, -d * e, p.beta1 * x.u1],
        [-p.beta2 * x.u3, p.rho, -p.beta2 * x.u1 - p.c],
    ]
}

/// Adjoint right-hand side f~(lambda; u, E, d) with misfit forcing.
///
/// `misfit1` forces the lambda1 and lambda2 equations (total T-cell misfit),
/// `misfit2` the lambda3 equation (virus misfit); both are supplied by the
/// caller.
pub fn adjoint_rhs(
    l: &Adjoint,
    x: &State,
    e: f64,
    d: f64,
    misfit1: f64,
    misfit2: f64,
    p: &ModelParams,
) -> Adjoint {
    Adjoint {
        l1: l.l1 * p.beta1 * x.u3 + l.l1 * p.mu - l.l2 * p.beta1 * x.u3
            + p.beta2 * l.l3 * x.u3
            + misfit1,
        l2: -l.l3 * p.rho + d * l.l2 * e + misfit1,
        l3: l.l1 * p.beta1 * x.u1 - l.l2 * p.beta1 * x.u1
            + p.c * l.l3
            + l.l3 * p.beta2 * x.u1
            + misfit2,
    }
}

/// Jacobian of [`adjoint_rhs`] in lambda (the map is affine in lambda, so
/// this matrix is independent of lambda). Equals minus the transpose of the
/// forward Jacobian.
pub fn adjoint_jacobian(x: &State, e: f64, d: f64, p: &ModelParams) -> [[f64; 3]; 3] {
    [
        [p.beta1 * x.u3 + p.mu, -p.beta1 * x.u3, p.beta2 * x.u3],
        [0.0, d * e, -p.rho],
        [p.beta1 * x.u1, -p.beta1 * x.u1, p.c + p.beta2 * x.u1],
    ]
}

/// Parameters of the CTL response profiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtlParams {
    /// Amplitude of the logistic bump, 1/day.
    pub beta_ctl: f64,
    /// Rise time of the onset logistic, days.
    pub delta_t1: f64,
    /// Rise time of the offset logistic, days.
    pub delta_t2: f64,
    /// Onset time, days.
    pub t1: f64,
    /// Offset time, days.
    pub t2: f64,
    /// Baseline of the initial guess E0(t).
    pub e0_base: f64,
    /// Baseline death rate of infected cells, 1/day.
    pub d0: f64,
}

impl CtlParams {
    /// kappa = 1 + 1e5 * beta_ctl, recomputed rather than stored.
    pub fn kappa(&self) -> f64 {
        1.0 + 1e5 * self.beta_ctl
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_t1 > 0.0) || !(self.delta_t2 > 0.0) {
            return Err(Error::invalid(
                "CTL rise times delta_t1, delta_t2 must be positive",
            ));
        }
        Ok(())
    }

    /// Per-patient CTL parameter sets used for the four clinical records.
    pub fn patient(n: u8) -> Result<Self> {
        match n {
            1 => Ok(CtlParams {
                beta_ctl: 0.015,
                delta_t1: 2.5,
                delta_t2: 5.0,
                t1: 1.0,
                t2: 1.0,
                e0_base: 1.0,
                d0: 0.26,
            }),
            // Patients 2 and 3 share one parameter set.
            2 | 3 => Ok(CtlParams {
                beta_ctl: 0.1,
                delta_t1: 2.5,
                delta_t2: 5.0,
                t1: 1.0,
                t2: 50.0,
                e0_base: 1.0,
                d0: 0.26,
            }),
            4 => Ok(CtlParams {
                beta_ctl: 0.1,
                delta_t1: 2.5,
                delta_t2: 5.0,
                t1: 1.0,
                t2: 1.0,
                e0_base: 1.4,
                d0: 0.26,
            }),
            _ => Err(Error::invalid(format!("no CTL parameters for patient {n}"))),
        }
    }
}

/// Difference of two logistic terms describing the CTL response window.
pub fn ctl_f(t: f64, cp: &CtlParams) -> f64 {
    let kappa = cp.kappa();
    let rise = cp.beta_ctl / (1.0 + kappa * (-(t - cp.t1) / cp.delta_t1).exp());
    let fall = cp.beta_ctl / (1.0 + kappa * (-(t - cp.t2) / cp.delta_t2).exp());
    rise - fall
}

/// CTL bump `d1(t, V) = f(t) * log10(V)` for `t >= t1`, zero before onset.
fn ctl_bump(t: f64, log10_v: f64, cp: &CtlParams) -> f64 {
    if t >= cp.t1 {
        ctl_f(t, cp) * log10_v
    } else {
        0.0
    }
}

/// Time-dependent death rate of infected cells, d(t) = d0 + d1(t, V).
///
/// `log10_v` is the measured log10 viral load at `t` (from interpolated
/// clinical data, not the simulated state).
pub fn ctl_d(t: f64, log10_v: f64, cp: &CtlParams) -> f64 {
    cp.d0 + ctl_bump(t, log10_v, cp)
}

/// Initial-guess immune response, E0(t) = E0_base + d1(t, V).
pub fn ctl_e0(t: f64, log10_v: f64, cp: &CtlParams) -> f64 {
    cp.e0_base + ctl_bump(t, log10_v, cp)
}
