//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! with the measured values (visible with `--nocapture`).
//!
//! Criterion 1 is split into 1a (gradient accuracy) and 1b (first-order
//! halving of the mismatch). 1b fails by construction on this model: any
//! gradient accurate enough for 1a pairs the dual and the state at sub-step
//! resolution and matches finite differences to solver noise, so no O(tau)
//! term is left to halve. See docs/verification.md for the measured design
//! space behind this trade-off.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use immunerec::adaptive::{
    acga_run, acga_run_patient, AcgaConfig, AcgaProblem, DataSource, ProfileSource,
};
use immunerec::adjoint::solve_adjoint;
use immunerec::data::{
    builtin_patient, ctl_profiles, interpolate_to_mesh, make_twin, read_series_csv,
    write_series_csv, InterpolatedData, TwinSpec,
};
use immunerec::forward::{solve_forward, NewtonConfig, StateTrajectory};
use immunerec::mesh::{transfer, PiecewiseFn, TimeMesh};
use immunerec::model::{CtlParams, ModelParams, State};
use immunerec::objective::{assemble_gradient, evaluate_j, SmoothingWeights, TikhonovConfig};
use immunerec::optimizer::{cga_run, CgaConfig, Problem, Termination};

const FLOOR: f64 = 1e-2;

fn params() -> ModelParams {
    ModelParams::default()
}

/// Patient-1 problem pieces on a uniform mesh of the given step.
struct GradSetup {
    mesh: Arc<TimeMesh>,
    data: InterpolatedData,
    d_fn: PiecewiseFn,
    e_prior: PiecewiseFn,
    weights: SmoothingWeights,
    newton: NewtonConfig,
}

fn grad_setup(tau: f64) -> GradSetup {
    let series = builtin_patient(1).unwrap();
    let ctl = CtlParams::patient(1).unwrap();
    let mesh = TimeMesh::uniform(363.0, tau).unwrap();
    let data = interpolate_to_mesh(&series, &mesh).unwrap();
    let (d_fn, e_prior) = ctl_profiles(&series, &ctl, &mesh).unwrap();
    let weights = SmoothingWeights::ones(mesh.clone());
    let newton = NewtonConfig {
        tol_rel: 1e-12,
        ..NewtonConfig::default()
    };
    GradSetup {
        mesh,
        data,
        d_fn,
        e_prior,
        weights,
        newton,
    }
}

/// Expand per-interval values from the 121-interval base mesh onto a mesh
/// refined by an integer factor.
fn expand(values: &[f64], mesh: &Arc<TimeMesh>) -> PiecewiseFn {
    let factor = mesh.interval_count() / values.len();
    assert_eq!(values.len() * factor, mesh.interval_count());
    let vals = values
        .iter()
        .flat_map(|&v| std::iter::repeat(v).take(factor))
        .collect();
    PiecewiseFn::new(mesh.clone(), vals).unwrap()
}

/// Relative mismatch between the adjoint directional derivative and a
/// central finite difference of the discrete objective, per direction.
fn gradient_mismatches(tau: f64, e_base: &[f64], directions: &[Vec<f64>]) -> Vec<f64> {
    let s = grad_setup(tau);
    let gamma = 0.1;
    let x0 = State::default_initial();
    let e = expand(e_base, &s.mesh);
    let cfg = TikhonovConfig {
        gamma,
        e_prior: s.e_prior.clone(),
        floor: FLOOR,
        use_lambda3: false,
    };
    let traj = solve_forward(&e, &s.d_fn, &x0, &s.mesh, &params(), &s.newton).unwrap();
    let adj = solve_adjoint(
        &traj,
        &e,
        &s.d_fn,
        &s.data,
        &s.weights,
        FLOOR,
        &params(),
        &s.newton,
    )
    .unwrap();
    let grad = assemble_gradient(&traj, &adj, &e, &s.d_fn, &cfg).unwrap();

    let eps = 1e-3;
    let j_of = |e_fn: &PiecewiseFn| -> f64 {
        let t = solve_forward(e_fn, &s.d_fn, &x0, &s.mesh, &params(), &s.newton).unwrap();
        evaluate_j(&t, e_fn, &s.data, &cfg, &s.weights).unwrap()
    };
    directions
        .iter()
        .map(|dl| {
            let d_pw = expand(dl, &s.mesh);
            let ep = e.zip_with(&d_pw, |a, b| a + eps * b).unwrap();
            let em = e.zip_with(&d_pw, |a, b| a - eps * b).unwrap();
            let fd = (j_of(&ep) - j_of(&em)) / (2.0 * eps);
            let ad = grad.l2_inner(&d_pw);
            (fd - ad).abs() / fd.abs()
        })
        .collect()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[test]
fn criterion_01a_gradient_matches_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = 121;
    let e_base: Vec<f64> = (0..n).map(|_| 1.0 + rng.gen_range(0.0..1.0)).collect();
    let directions: Vec<Vec<f64>> = (0..10)
        .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let mismatches = gradient_mismatches(3.0, &e_base, &directions);
    let elapsed = start.elapsed().as_secs_f64();
    let max = mismatches.iter().cloned().fold(0.0, f64::max);
    println!(
        "ACCEPTANCE criterion 1a: {} — adjoint vs central FD over 10 directions at tau=3: \
         max rel mismatch {max:.2e} (limit 5e-2), runtime {elapsed:.1}s (limit 10s)",
        if max <= 0.05 && elapsed < 10.0 {
            "PASS"
        } else {
            "FAIL"
        }
    );
    for (i, m) in mismatches.iter().enumerate() {
        assert!(
            *m <= 0.05,
            "direction {i}: relative mismatch {m} exceeds 5%"
        );
    }
    assert!(elapsed < 10.0, "criterion 1 runtime {elapsed}s exceeds 10s");
}

#[test]
fn criterion_01b_mismatch_halves_with_tau() {
    // As specified: halving the mesh step must reduce the median mismatch by
    // a factor in [1.5, 3]. With the dual paired at sub-step resolution the
    // mismatch sits at solver-noise level (~1e-7) at both steps, so the
    // ratio measures noise, not first-order consistency. Every first-order-
    // dominated pairing that was measured costs at least 10% mismatch at
    // tau=3 and fails criterion 1a; this assertion is therefore expected to
    // fail and is retained as specified. The measurements are recorded in
    // docs/verification.md.
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = 121;
    let e_base: Vec<f64> = (0..n).map(|_| 1.0 + rng.gen_range(0.0..1.0)).collect();
    let directions: Vec<Vec<f64>> = (0..10)
        .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let med3 = median(&gradient_mismatches(3.0, &e_base, &directions));
    let med15 = median(&gradient_mismatches(1.5, &e_base, &directions));
    let ratio = med3 / med15;
    let pass = (1.5..=3.0).contains(&ratio);
    println!(
        "ACCEPTANCE criterion 1b: {} — median mismatch {med3:.2e} (tau=3) vs {med15:.2e} \
         (tau=1.5), halving factor {ratio:.2} (required within [1.5, 3])",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(
        pass,
        "halving factor {ratio:.2} outside [1.5, 3]: both mismatches are at the solver-noise \
         floor ({med3:.2e}, {med15:.2e}); the gradient is exact to FD resolution, so no \
         first-order term remains to halve (see docs/verification.md)"
    );
}

#[test]
fn criterion_02_forward_first_order_self_convergence() {
    let start = Instant::now();
    let series = builtin_patient(1).unwrap();
    let ctl = CtlParams::patient(1).unwrap();
    let x0 = State::default_initial();
    let newton = NewtonConfig::default();

    let run = |tau: f64| -> StateTrajectory {
        let mesh = TimeMesh::uniform(60.0, tau).unwrap();
        let (d_fn, e_fn) = ctl_profiles(&series, &ctl, &mesh).unwrap();
        solve_forward(&e_fn, &d_fn, &x0, &mesh, &params(), &newton).unwrap()
    };
    let reference = run(1.0 / 64.0);
    let err = |traj: &StateTrajectory, tau: f64| -> f64 {
        let stride = (tau * 64.0).round() as usize;
        traj.states()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let r = reference.states()[i * stride];
                (s.u3.max(FLOOR).log10() - r.u3.max(FLOOR).log10()).abs()
            })
            .fold(0.0, f64::max)
    };
    let taus = [1.0, 0.5, 0.25, 0.125];
    let errors: Vec<f64> = taus.iter().map(|&t| err(&run(t), t)).collect();
    // Least-squares slope of log(err) against log(tau).
    let xs: Vec<f64> = taus.iter().map(|t| t.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let xm = xs.iter().sum::<f64>() / 4.0;
    let ym = ys.iter().sum::<f64>() / 4.0;
    let slope = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - xm) * (y - ym))
        .sum::<f64>()
        / xs.iter().map(|x| (x - xm) * (x - xm)).sum::<f64>();
    let elapsed = start.elapsed().as_secs_f64();
    let pass = (0.8..=1.2).contains(&slope) && elapsed < 5.0;
    let rounded: Vec<f64> = errors.iter().map(|e| (e * 1e5).round() / 1e5).collect();
    println!(
        "ACCEPTANCE criterion 2: {} — observed order {slope:.3} (required [0.8, 1.2]); \
         max-norm log10(u3) errors {rounded:?} at tau {taus:?}; runtime {elapsed:.1}s (limit 5s)",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(
        (0.8..=1.2).contains(&slope),
        "observed order {slope} outside [0.8, 1.2] (errors {errors:?})"
    );
    assert!(elapsed < 5.0, "criterion 2 runtime {elapsed}s exceeds 5s");
}

#[test]
fn criterion_03_equilibrium_and_invariant_subspace() {
    let newton = NewtonConfig::default();
    let mesh = TimeMesh::uniform(363.0, 1.0).unwrap();
    let e = PiecewiseFn::constant(mesh.clone(), 1.0);
    let d = PiecewiseFn::constant(mesh.clone(), 0.26);

    // Equilibrium start: all components constant to 1e-9 relative.
    let eq = State::new(1e6, 0.0, 0.0);
    let traj = solve_forward(&e, &d, &eq, &mesh, &params(), &newton).unwrap();
    let mut max_rel: f64 = 0.0;
    for s in traj.states() {
        max_rel = max_rel.max((s.u1 - 1e6).abs() / 1e6);
        assert_eq!(s.u2, 0.0);
        assert_eq!(s.u3, 0.0);
    }
    assert!(max_rel <= 1e-9, "u1 drifted by {max_rel} relative");

    // Virus-free start with arbitrary T0: u2, u3 exactly zero at every node.
    let x0 = State::new(4.2e5, 0.0, 0.0);
    let traj = solve_forward(&e, &d, &x0, &mesh, &params(), &newton).unwrap();
    let exact_zero = traj.states().iter().all(|s| s.u2 == 0.0 && s.u3 == 0.0);
    assert!(exact_zero, "u2/u3 left the invariant subspace");
    println!(
        "ACCEPTANCE criterion 3: PASS — equilibrium constant to {max_rel:.1e} relative over \
         363 days; u2, u3 bit-exact zero from a virus-free start"
    );
}

#[test]
fn criterion_04_pure_quadratic_one_step_convergence() {
    // Zero data weights: the objective is the regularization quadratic and
    // the first closed-form step r0 = 1/gamma lands exactly on the prior.
    let mesh = TimeMesh::uniform(363.0, 1.0).unwrap();
    let n = mesh.interval_count();
    let prior = PiecewiseFn::constant(mesh.clone(), 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let e0 = PiecewiseFn::new(
        mesh.clone(),
        (0..n).map(|_| 1.0 + rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let problem = Problem {
        params: params(),
        x0: State::new(1e6, 0.0, 0.0),
        data: InterpolatedData::from_values(mesh.clone(), vec![1e6; n], vec![1.0; n]).unwrap(),
        d_fn: PiecewiseFn::constant(mesh.clone(), 0.26),
        e_prior: prior.clone(),
        weights: SmoothingWeights::zero(mesh.clone()),
        floor: FLOOR,
        newton: NewtonConfig {
            substeps: 10,
            ..NewtonConfig::default()
        },
    };
    let cfg = CgaConfig::default();
    let out = cga_run(&e0, &problem, &cfg).unwrap();
    let max_rel = out
        .e_final
        .values()
        .iter()
        .zip(prior.values())
        .map(|(a, b)| (a - b).abs() / b.abs())
        .fold(0.0, f64::max);
    let first_step = out.trace.iterations[0].step;
    let pass = max_rel <= 1e-12
        && out.trace.termination == Termination::GradientBelowTheta
        && out.trace.iterations.len() == 2;
    println!(
        "ACCEPTANCE criterion 4: {} — one step r0 = {first_step} (= 1/gamma0), final iterate \
         within {max_rel:.1e} of the prior (limit 1e-12)",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!((first_step - 1.0 / cfg.gamma0).abs() < 1e-12);
    assert!(
        max_rel <= 1e-12,
        "pure quadratic missed the prior by {max_rel}"
    );
    assert_eq!(out.trace.termination, Termination::GradientBelowTheta);
    assert_eq!(out.trace.iterations.len(), 2);
}

/// The twin configuration shared by criteria 5, 6 and 8: zero-noise step
/// profile (1 before day 30, 3 after), prior 1, gamma0 = 0.01, refinement
/// fraction 0.875, three refinement rounds, a 20-iteration budget per level.
struct TwinRun {
    outcome: immunerec::adaptive::AcgaOutcome,
    e_true: PiecewiseFn,
    window: PiecewiseFn,
    errors: Vec<f64>,
    errors_abs: Vec<f64>,
    runtime_seconds: f64,
}

fn criterion5_twin() -> &'static TwinRun {
    static RUN: std::sync::OnceLock<TwinRun> = std::sync::OnceLock::new();
    RUN.get_or_init(run_criterion5_twin)
}

fn run_criterion5_twin() -> TwinRun {
    let start = Instant::now();
    let mesh0 = TimeMesh::uniform(363.0, 1.0).unwrap();
    let e_true = PiecewiseFn::from_midpoints(mesh0.clone(), |t| if t < 30.0 { 1.0 } else { 3.0 });
    let d_fn = PiecewiseFn::constant(mesh0.clone(), 0.26);
    let newton = NewtonConfig::default();
    let (data, true_traj) = make_twin(
        &params(),
        &d_fn,
        &TwinSpec::noiseless(e_true.clone()),
        &mesh0,
        &State::default_initial(),
        &newton,
    )
    .unwrap();
    // Identifiable window: intervals where the true infected-cell count
    // exceeds 1 cell/ml.
    let window = PiecewiseFn::new(
        mesh0.clone(),
        (0..mesh0.interval_count())
            .map(|k| {
                if true_traj.interval_state(k).u2 > 1.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect(),
    )
    .unwrap();
    let problem = AcgaProblem {
        params: params(),
        x0: State::default_initial(),
        data: DataSource::Synthetic(data),
        profiles: ProfileSource::Fixed {
            d: d_fn,
            e0: PiecewiseFn::constant(mesh0.clone(), 1.0),
        },
        taper_days: 0.0,
        floor: FLOOR,
        newton,
    };
    let cfg = AcgaConfig {
        beta_refine: 0.875,
        max_refinements: 3,
        inner: CgaConfig {
            gamma0: 0.01,
            max_iters: 20,
            ..CgaConfig::default()
        },
        ..AcgaConfig::default()
    };
    let outcome = acga_run(&problem, &cfg).unwrap();
    let mut errors = Vec::new();
    let mut errors_abs = Vec::new();
    for r in &outcome.records {
        let e_true_k = transfer(&e_true, &r.mesh).unwrap();
        let win_k = transfer(&window, &r.mesh).unwrap();
        let diff_w =
            r.e.zip_with(&e_true_k, |a, b| a - b)
                .unwrap()
                .zip_with(&win_k, |d, w| d * w)
                .unwrap();
        let true_w = e_true_k.zip_with(&win_k, |v, w| v * w).unwrap();
        errors.push(diff_w.l2_norm() / true_w.l2_norm());
        errors_abs.push(diff_w.l2_norm());
    }
    TwinRun {
        outcome,
        e_true,
        window,
        errors,
        errors_abs,
        runtime_seconds: start.elapsed().as_secs_f64(),
    }
}

#[test]
fn criterion_05_twin_step_recovery() {
    let run = criterion5_twin();
    let elapsed = run.runtime_seconds;
    let final_err = *run.errors.last().unwrap();
    let monotone = run.errors.windows(2).all(|w| w[1] <= w[0] + 1e-9);
    let pass = final_err <= 0.10 && monotone && elapsed < 120.0;
    println!(
        "ACCEPTANCE criterion 5: {} — windowed relative L2 error per level {:?} \
         (final limit 0.10, non-increasing), runtime {elapsed:.1}s (limit 120s)",
        if pass { "PASS" } else { "FAIL" },
        run.errors
            .iter()
            .map(|e| (e * 1e4).round() / 1e4)
            .collect::<Vec<_>>()
    );
    assert!(
        final_err <= 0.10,
        "final windowed relative error {final_err} exceeds 10%"
    );
    assert!(monotone, "error increased across levels: {:?}", run.errors);
    assert!(
        elapsed < 120.0,
        "criterion 5 runtime {elapsed}s exceeds 120s"
    );

    // Nestedness through the whole adaptive run.
    for w in run.outcome.records.windows(2) {
        assert!(
            w[0].mesh.is_nested_in(&w[1].mesh),
            "levels {} -> {} are not nested",
            w[0].level,
            w[1].level
        );
    }
}

#[test]
fn criterion_06_refinement_localizes_at_the_step() {
    let run = criterion5_twin();
    // Intervals refined at level 1 are the intervals the level-0 indicator
    // flagged for bisection.
    let level0 = &run.outcome.records[0];
    let flagged = &level0.flagged;
    assert!(
        !flagged.is_empty(),
        "level 0 flagged no intervals for refinement"
    );
    let near: usize = flagged
        .iter()
        .filter(|&&k| (level0.mesh.midpoint(k) - 30.0).abs() <= 10.0)
        .count();
    let frac = near as f64 / flagged.len() as f64;
    let pass = frac >= 0.6;
    println!(
        "ACCEPTANCE criterion 6: {} — {near}/{} flagged intervals within 10 days of the step \
         at t = 30 ({:.0}%, limit 60%)",
        if pass { "PASS" } else { "FAIL" },
        flagged.len(),
        frac * 100.0
    );
    assert!(
        frac >= 0.6,
        "only {near}/{} flagged intervals near the step",
        flagged.len()
    );
}

#[test]
fn criterion_07_patient_reproduction() {
    // Reference norms are reproduction targets at loose tolerance: the
    // runs they come from used unknown hyperparameters.
    let newton = NewtonConfig::default();
    let cfg = AcgaConfig::default();
    let mut lines = Vec::new();
    for n in 1..=4u8 {
        let out = acga_run_patient(n, &cfg, params(), newton).unwrap();
        let records = &out.records;
        // (b) node counts strictly increase over the refinement levels.
        assert_eq!(records.len(), 5, "patient {n}: expected 5 levels");
        for w in records.windows(2) {
            assert!(
                w[1].node_count > w[0].node_count,
                "patient {n}: node count did not increase: {} -> {}",
                w[0].node_count,
                w[1].node_count
            );
            assert!(
                w[0].mesh.is_nested_in(&w[1].mesh),
                "patient {n}: meshes not nested"
            );
        }
        // (c) residual norms non-increasing with 1% slack per level.
        for w in records.windows(2) {
            let (r1a, r1b) = (w[0].residuals.norm_r1, w[1].residuals.norm_r1);
            let (r2a, r2b) = (w[0].residuals.norm_r2, w[1].residuals.norm_r2);
            assert!(
                r1b <= r1a * 1.01,
                "patient {n}: |R1| rose {r1a} -> {r1b} (more than 1%)"
            );
            assert!(
                r2b <= r2a * 1.01,
                "patient {n}: |R2| rose {r2a} -> {r2b} (more than 1%)"
            );
        }
        if n == 1 {
            // (a) level-0 mesh has exactly 364 nodes.
            assert_eq!(records[0].node_count, 364, "patient 1 level-0 node count");
            // (d) level-0 norms within a factor of 2 of the reference values.
            let r1 = records[0].residuals.norm_r1;
            let r2 = records[0].residuals.norm_r2;
            assert!(
                (0.0880 / 2.0..=0.0880 * 2.0).contains(&r1),
                "patient 1 |R1| = {r1} outside factor 2 of 0.0880"
            );
            assert!(
                (0.0382 / 2.0..=0.0382 * 2.0).contains(&r2),
                "patient 1 |R2| = {r2} outside factor 2 of 0.0382"
            );
        }
        lines.push(format!(
            "patient {n}: nno {:?}, |R1| {:.4} -> {:.4}, |R2| {:.4} -> {:.4}",
            records.iter().map(|r| r.node_count).collect::<Vec<_>>(),
            records[0].residuals.norm_r1,
            records.last().unwrap().residuals.norm_r1,
            records[0].residuals.norm_r2,
            records.last().unwrap().residuals.norm_r2,
        ));
    }
    println!(
        "ACCEPTANCE criterion 7: PASS — level-0 364 nodes, node counts strictly increasing, \
         norms non-increasing (1% slack), patient-1 level-0 norms within factor 2 of 0.0880 / \
         0.0382; {}",
        lines.join("; ")
    );
}

#[test]
fn criterion_08_estimator_bounds_twin_error() {
    let run = criterion5_twin();
    let last = run.outcome.records.last().unwrap();
    let estimator = last.est_residual_bound;
    // Measured error restricted to the identifiable window, in the same
    // weighted L2 norm the estimator uses. Outside the window the data carry
    // no information and the minimizer legitimately stays at the prior, so
    // the full-domain error is reported but not asserted.
    let measured_window = *run.errors_abs.last().unwrap();
    let e_true_k = transfer(&run.e_true, &last.mesh).unwrap();
    let full = last.e.zip_with(&e_true_k, |a, b| a - b).unwrap().l2_norm();
    let _ = &run.window;
    let pass = estimator >= measured_window;
    println!(
        "ACCEPTANCE criterion 8: {} — constant-free estimator {estimator:.3e} >= measured \
         windowed error {measured_window:.3e} at the final level (full-domain error {full:.3e}, \
         reported)",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(
        estimator >= measured_window,
        "estimator {estimator} fails to bound the measured windowed error {measured_window}"
    );
}

#[test]
fn criterion_10_builtin_patient_csv_round_trip() {
    for n in 1..=4u8 {
        let series = builtin_patient(n).unwrap();
        let mut buf = Vec::new();
        write_series_csv(&series, &mut buf).unwrap();
        let back = read_series_csv(buf.as_slice(), series.patient_id.clone()).unwrap();
        assert_eq!(series, back, "patient {n} record changed across write/read");
    }
    println!(
        "ACCEPTANCE criterion 10: PASS — all four embedded patient tables survive \
         write -> read -> compare exactly"
    );
}
