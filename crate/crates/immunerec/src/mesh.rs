//! Non-uniform time partitions of the observation window and piecewise-constant
//! functions defined on them.
//!
//! A [`TimeMesh`] partitions `[0, t_end]` into half-open intervals
//! `J_k = (t_{k-1}, t_k]`. A [`PiecewiseFn`] carries one value per interval.
//! Refinement bisects intervals in place, so refined meshes are nested and
//! transfers between them are exact.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Relative tolerance used for span/divisibility comparisons on node positions.
const SPAN_REL_TOL: f64 = 1e-9;

/// Ordered partition of `[0, t_end]` into time intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeMesh {
    nodes: Vec<f64>,
}

impl TimeMesh {
    /// Build a mesh from explicit node positions.
    ///
    /// Nodes must be strictly increasing, start at exactly 0 and contain at
    /// least one interval.
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Arc<Self>> {
        if nodes.len() < 2 {
            return Err(Error::invalid("mesh needs at least two nodes"));
        }
        if nodes[0] != 0.0 {
            return Err(Error::invalid(format!(
                "first node must be exactly 0, got {}",
                nodes[0]
            )));
        }
        if !nodes.windows(2).all(|w| w[1] > w[0]) {
            return Err(Error::invalid("mesh nodes must be strictly increasing"));
        }
        if nodes.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("mesh nodes must be finite"));
        }
        Ok(Arc::new(TimeMesh { nodes }))
    }

    /// Uniform mesh over `[0, t_end]` with the given step.
    ///
    /// `t_end` must be an integer multiple of `step` to within 1e-9 relative.
    pub fn uniform(t_end: f64, step: f64) -> Result<Arc<Self>> {
        if !(t_end > 0.0) || !(step > 0.0) {
            return Err(Error::invalid(format!(
                "uniform mesh needs positive span and step, got t_end={t_end}, step={step}"
            )));
        }
        let ratio = t_end / step;
        let n = ratio.round();
        if (ratio - n).abs() > SPAN_REL_TOL * ratio.max(1.0) {
            return Err(Error::invalid(format!(
                "span {t_end} is not an integer multiple of step {step}"
            )));
        }
        let n = n as usize;
        let mut nodes: Vec<f64> = (0..=n).map(|k| k as f64 * step).collect();
        // Pin the endpoint so the span is exact regardless of rounding.
        nodes[n] = t_end;
        TimeMesh::from_nodes(nodes)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn interval_count(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn t_end(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    /// Step `tau_k` of interval `k` (0-indexed).
    pub fn tau(&self, k: usize) -> f64 {
        self.nodes[k + 1] - self.nodes[k]
    }

    /// Left node of interval `k`.
    pub fn t_left(&self, k: usize) -> f64 {
        self.nodes[k]
    }

    /// Right node of interval `k`.
    pub fn t_right(&self, k: usize) -> f64 {
        self.nodes[k + 1]
    }

    /// Midpoint of interval `k`.
    pub fn midpoint(&self, k: usize) -> f64 {
        0.5 * (self.nodes[k] + self.nodes[k + 1])
    }

    /// Index of the interval `J_k = (t_{k-1}, t_k]` containing `t`;
    /// `t = 0` maps to the first interval. `t` outside the span clamps to the
    /// nearest interval.
    pub fn interval_of(&self, t: f64) -> usize {
        if t <= self.nodes[0] {
            return 0;
        }
        if t >= self.t_end() {
            return self.interval_count() - 1;
        }
        // partition_point returns the first node >= t; interval k has right node k+1.
        let idx = self.nodes.partition_point(|&x| x < t);
        idx - 1
    }

    /// Whether two meshes cover the same span to within tolerance.
    pub fn same_span(&self, other: &TimeMesh) -> bool {
        let a = self.t_end();
        let b = other.t_end();
        (a - b).abs() <= SPAN_REL_TOL * a.abs().max(b.abs()).max(1.0)
    }

    /// Whether every node of `self` appears in `other` (nestedness).
    pub fn is_nested_in(&self, other: &TimeMesh) -> bool {
        let mut j = 0;
        'outer: for &t in &self.nodes {
            while j < other.nodes.len() {
                if other.nodes[j] == t {
                    continue 'outer;
                }
                if other.nodes[j] > t {
                    return false;
                }
                j += 1;
            }
            return false;
        }
        true
    }
}

/// A scalar function represented by one value per mesh interval.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseFn {
    mesh: Arc<TimeMesh>,
    values: Vec<f64>,
}

impl PiecewiseFn {
    pub fn new(mesh: Arc<TimeMesh>, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.interval_count() {
            return Err(Error::invalid(format!(
                "piecewise function needs {} values, got {}",
                mesh.interval_count(),
                values.len()
            )));
        }
        Ok(PiecewiseFn { mesh, values })
    }

    pub fn constant(mesh: Arc<TimeMesh>, value: f64) -> Self {
        let n = mesh.interval_count();
        PiecewiseFn {
            mesh,
            values: vec![value; n],
        }
    }

    /// Build from a function of time sampled at interval midpoints.
    pub fn from_midpoints(mesh: Arc<TimeMesh>, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..mesh.interval_count())
            .map(|k| f(mesh.midpoint(k)))
            .collect();
        PiecewiseFn { mesh, values }
    }

    pub fn mesh(&self) -> &Arc<TimeMesh> {
        &self.mesh
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value on the interval containing `t` (`t = 0` reads the first interval).
    pub fn eval(&self, t: f64) -> f64 {
        self.values[self.mesh.interval_of(t)]
    }

    /// True if both functions live on the same mesh (pointer or structural).
    pub fn same_mesh(&self, other: &PiecewiseFn) -> bool {
        Arc::ptr_eq(&self.mesh, &other.mesh) || self.mesh == other.mesh
    }

    pub fn on_mesh(&self, mesh: &Arc<TimeMesh>) -> bool {
        Arc::ptr_eq(&self.mesh, mesh) || *self.mesh == **mesh
    }

    /// Pointwise combination with another function on the same mesh.
    pub fn zip_with(
        &self,
        other: &PiecewiseFn,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<PiecewiseFn> {
        if !self.same_mesh(other) {
            return Err(Error::MeshMismatch(
                "zip_with requires both functions on the same mesh".into(),
            ));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(PiecewiseFn {
            mesh: self.mesh.clone(),
            values,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> PiecewiseFn {
        PiecewiseFn {
            mesh: self.mesh.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Mesh-weighted L2 norm `sqrt(sum_k tau_k f_k^2)`.
    pub fn l2_norm(&self) -> f64 {
        self.l2_inner(self).sqrt()
    }

    /// Mesh-weighted inner product `sum_k tau_k f_k g_k`.
    ///
    /// Callers are expected to pass functions on the same mesh.
    pub fn l2_inner(&self, other: &PiecewiseFn) -> f64 {
        debug_assert!(self.same_mesh(other));
        self.values
            .iter()
            .zip(&other.values)
            .enumerate()
            .map(|(k, (&a, &b))| self.mesh.tau(k) * a * b)
            .sum()
    }

    /// Plain Euclidean norm of the value vector (no mesh weights).
    pub fn euclidean_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Jumps of `f` across interior nodes: `jumps[k] = f_{k+1} - f_k`
/// (successor minus predecessor). Empty for a single-interval function.
pub fn jumps(f: &PiecewiseFn) -> Vec<f64> {
    f.values().windows(2).map(|w| w[1] - w[0]).collect()
}

/// Indices of intervals where `|indicator_k| >= beta * max_j |indicator_j|`.
///
/// Empty when the indicator vanishes identically.
pub fn flagged_intervals(indicator: &PiecewiseFn, beta: f64) -> Result<Vec<usize>> {
    if !(0.0 < beta && beta < 1.0) {
        return Err(Error::invalid(format!(
            "refinement fraction must lie in (0,1), got {beta}"
        )));
    }
    let max = indicator.max_abs();
    if max == 0.0 {
        return Ok(Vec::new());
    }
    let threshold = beta * max;
    Ok(indicator
        .values()
        .iter()
        .enumerate()
        .filter(|(_, v)| v.abs() >= threshold)
        .map(|(k, _)| k)
        .collect())
}

/// Bisect every interval where the indicator is within `beta` of its maximum.
///
/// The result contains every node of the input mesh (nested refinement). A
/// vanishing indicator returns the mesh unchanged.
pub fn refine_where(
    mesh: &Arc<TimeMesh>,
    indicator: &PiecewiseFn,
    beta: f64,
) -> Result<Arc<TimeMesh>> {
    if !indicator.on_mesh(mesh) {
        return Err(Error::MeshMismatch(
            "refinement indicator must live on the mesh being refined".into(),
        ));
    }
    let flagged = flagged_intervals(indicator, beta)?;
    if flagged.is_empty() {
        return Ok(mesh.clone());
    }
    let mut flag = vec![false; mesh.interval_count()];
    for k in flagged {
        flag[k] = true;
    }
    let mut nodes = Vec::with_capacity(mesh.node_count() + flag.len());
    nodes.push(mesh.t_left(0));
    for k in 0..mesh.interval_count() {
        if flag[k] {
            nodes.push(mesh.midpoint(k));
        }
        nodes.push(mesh.t_right(k));
    }
    TimeMesh::from_nodes(nodes)
}

/// Re-sample `f` onto `target` by evaluating at target interval midpoints.
///
/// Exact (value-preserving) whenever `target` is a nested refinement of the
/// source mesh. Spans must agree.
pub fn transfer(f: &PiecewiseFn, target: &Arc<TimeMesh>) -> Result<PiecewiseFn> {
    if !f.mesh().same_span(target) {
        return Err(Error::invalid(format!(
            "transfer between meshes of different spans: {} vs {}",
            f.mesh().t_end(),
            target.t_end()
        )));
    }
    Ok(PiecewiseFn::from_midpoints(target.clone(), |t| f.eval(t)))
}
