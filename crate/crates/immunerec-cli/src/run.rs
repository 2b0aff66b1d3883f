//! Run execution: build the problem from a manifest, run it, and write the
//! artifact files. All computation happens before anything is written, so an
//! overwrite refusal leaves the output directory untouched.

use std::path::Path;

use immunerec::adaptive::{
    acga_run, AcgaOutcome, AcgaProblem, DataSource, ProfileSource, RefinementRecord,
};
use immunerec::data::{ctl_profiles, interpolate_to_mesh, make_twin, TwinSpec};
use immunerec::forward::solve_forward;
use immunerec::mesh::{transfer, PiecewiseFn, TimeMesh};
use immunerec::objective::data_residuals;

use crate::manifest::{EtrueSpec, Manifest, PriorSpec, RunKind};
use crate::output::{self, TwinLevelStats};
use crate::{check_overwrite, CliError};

pub fn execute(manifest: &Manifest, out_dir: &Path, force: bool) -> Result<(), CliError> {
    match manifest.kind {
        RunKind::Reconstruct => run_reconstruct(manifest, out_dir, force),
        RunKind::Twin => run_twin(manifest, out_dir, force),
        RunKind::Forward => run_forward(manifest, out_dir, force),
    }
}

fn level_files(records: &[RefinementRecord]) -> Vec<(String, String)> {
    let mut files = Vec::new();
    for r in records {
        let k = r.level;
        files.push((format!("level{k}_mesh.csv"), output::mesh_csv(r)));
        files.push((format!("level{k}_e.csv"), output::e_csv(r)));
        files.push((format!("level{k}_solution.csv"), output::solution_csv(r)));
        files.push((format!("level{k}_data.csv"), output::data_csv(r)));
        files.push((format!("level{k}_residuals.csv"), output::residuals_csv(r)));
        files.push((format!("level{k}_trace.csv"), output::trace_csv(r)));
    }
    files.push(("summary.csv".into(), output::summary_csv(records)));
    files
}

fn write_all(
    out_dir: &Path,
    manifest: &Manifest,
    mut files: Vec<(String, String)>,
    force: bool,
) -> Result<(), CliError> {
    let mut names: Vec<String> = files.iter().map(|(n, _)| n.clone()).collect();
    names.push("manifest.json".into());

    let mut stamped = manifest.clone();
    stamped.outputs = names.clone();
    let manifest_json = serde_json::to_string_pretty(&stamped)
        .map_err(|e| CliError::run(format!("cannot serialize manifest: {e}")))?;
    files.push(("manifest.json".into(), manifest_json));

    check_overwrite(out_dir, &names, force)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::run(format!("cannot create {}: {e}", out_dir.display())))?;
    for (name, content) in files {
        let path = out_dir.join(&name);
        std::fs::write(&path, content)
            .map_err(|e| CliError::run(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn run_reconstruct(manifest: &Manifest, out_dir: &Path, force: bool) -> Result<(), CliError> {
    let problem = AcgaProblem {
        params: manifest.params,
        x0: manifest.x0,
        data: DataSource::Clinical(manifest.series.clone()),
        profiles: ProfileSource::Ctl {
            series: manifest.series.clone(),
            ctl: manifest.ctl,
        },
        taper_days: 0.0,
        floor: immunerec::data::DEFAULT_LOG_FLOOR,
        newton: manifest.newton,
    };
    let outcome =
        acga_run(&problem, &manifest.acga.to_config()).map_err(|e| CliError::run(e.to_string()))?;
    write_all(out_dir, manifest, level_files(&outcome.records), force)
}

fn build_profile(
    spec: EtrueSpec,
    ctl_e0: &PiecewiseFn,
    mesh: &std::sync::Arc<TimeMesh>,
) -> PiecewiseFn {
    match spec {
        EtrueSpec::Profile => ctl_e0.clone(),
        EtrueSpec::Constant { value } => PiecewiseFn::constant(mesh.clone(), value),
        EtrueSpec::Step { t, a, b } => {
            PiecewiseFn::from_midpoints(mesh.clone(), |x| if x < t { a } else { b })
        }
    }
}

fn run_twin(manifest: &Manifest, out_dir: &Path, force: bool) -> Result<(), CliError> {
    let twin = manifest
        .twin
        .ok_or_else(|| CliError::usage("twin manifest is missing its twin section"))?;
    let mesh0 = TimeMesh::uniform(manifest.series.t_end(), manifest.acga.level0_step)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let (d_fn, ctl_e0) = ctl_profiles(&manifest.series, &manifest.ctl, &mesh0)
        .map_err(|e| CliError::run(e.to_string()))?;
    let e_true = build_profile(twin.etrue, &ctl_e0, &mesh0);
    let prior = match twin.prior {
        PriorSpec::Profile => ctl_e0.clone(),
        PriorSpec::Constant { value } => PiecewiseFn::constant(mesh0.clone(), value),
    };
    let spec = TwinSpec {
        e_true: e_true.clone(),
        noise_sigma1: twin.noise,
        noise_sigma2: twin.noise,
        rng_seed: twin.seed,
    };
    let (data, true_traj) = make_twin(
        &manifest.params,
        &d_fn,
        &spec,
        &mesh0,
        &manifest.x0,
        &manifest.newton,
    )
    .map_err(|e| CliError::run(e.to_string()))?;

    // Identifiable window: intervals where the true infected-cell count
    // exceeds one cell per ml.
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
    .map_err(|e| CliError::run(e.to_string()))?;

    let problem = AcgaProblem {
        params: manifest.params,
        x0: manifest.x0,
        data: DataSource::Synthetic(data),
        profiles: ProfileSource::Fixed { d: d_fn, e0: prior },
        taper_days: 0.0,
        floor: immunerec::data::DEFAULT_LOG_FLOOR,
        newton: manifest.newton,
    };
    let outcome =
        acga_run(&problem, &manifest.acga.to_config()).map_err(|e| CliError::run(e.to_string()))?;

    let mut files = level_files(&outcome.records);
    let stats = twin_stats(&outcome, &e_true, &window).map_err(|e| CliError::run(e.to_string()))?;
    for r in &outcome.records {
        let e_true_k = transfer(&e_true, &r.mesh).map_err(|e| CliError::run(e.to_string()))?;
        files.push((
            format!("level{}_e_true.csv", r.level),
            output::e_true_csv(r, &e_true_k),
        ));
    }
    files.push(("twin_summary.csv".into(), output::twin_summary_csv(&stats)));
    write_all(out_dir, manifest, files, force)
}

fn twin_stats(
    outcome: &AcgaOutcome,
    e_true: &PiecewiseFn,
    window: &PiecewiseFn,
) -> immunerec::Result<Vec<TwinLevelStats>> {
    let mut stats = Vec::new();
    for r in &outcome.records {
        let e_true_k = transfer(e_true, &r.mesh)?;
        let win_k = transfer(window, &r.mesh)?;
        let diff = r.e.zip_with(&e_true_k, |a, b| a - b)?;
        let err_abs = diff.l2_norm();
        let err_rel = err_abs / e_true_k.l2_norm();
        let diff_w = diff.zip_with(&win_k, |d, w| d * w)?;
        let true_w = e_true_k.zip_with(&win_k, |v, w| v * w)?;
        let err_rel_window = if true_w.l2_norm() > 0.0 {
            diff_w.l2_norm() / true_w.l2_norm()
        } else {
            0.0
        };
        stats.push(TwinLevelStats {
            level: r.level,
            node_count: r.node_count,
            err_abs,
            err_rel,
            err_rel_window,
            est_residual_bound: r.est_residual_bound,
        });
    }
    Ok(stats)
}

fn run_forward(manifest: &Manifest, out_dir: &Path, force: bool) -> Result<(), CliError> {
    let fwd = manifest
        .forward
        .ok_or_else(|| CliError::usage("forward manifest is missing its forward section"))?;
    let mesh = TimeMesh::uniform(fwd.t_end, fwd.tau).map_err(|e| CliError::usage(e.to_string()))?;
    let (d_fn, ctl_e0) = ctl_profiles(&manifest.series, &manifest.ctl, &mesh)
        .map_err(|e| CliError::run(e.to_string()))?;
    let e_fn = build_profile(fwd.e, &ctl_e0, &mesh);
    let traj = solve_forward(
        &e_fn,
        &d_fn,
        &manifest.x0,
        &mesh,
        &manifest.params,
        &manifest.newton,
    )
    .map_err(|e| CliError::run(e.to_string()))?;

    let mut s = String::from("t_days,u1_cells_per_ml,u2_cells_per_ml,u3_virions_per_ml,log10_u3\n");
    use std::fmt::Write as _;
    for (i, st) in traj.states().iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            mesh.nodes()[i],
            st.u1,
            st.u2,
            st.u3,
            st.u3.max(1e-2).log10(),
        );
    }
    let mut files = vec![("trajectory.csv".to_string(), s)];

    // Data misfit diagnostics when the window covers the full series span.
    if (fwd.t_end - manifest.series.t_end()).abs() < 1e-9 {
        let data = interpolate_to_mesh(&manifest.series, &mesh)
            .map_err(|e| CliError::run(e.to_string()))?;
        let res = data_residuals(&traj, &data).map_err(|e| CliError::run(e.to_string()))?;
        let mut s = String::from("t_left_days,t_right_days,r1,r2\n");
        for k in 0..mesh.interval_count() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                mesh.t_left(k),
                mesh.t_right(k),
                res.r1.values()[k],
                res.r2.values()[k],
            );
        }
        files.push(("residuals.csv".to_string(), s));
    }
    write_all(out_dir, manifest, files, force)
}
