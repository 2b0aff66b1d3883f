//! CSV emission for run artifacts. Floats print in Rust's shortest
//! round-trip form, so identical runs produce identical bytes.

use std::fmt::Write as _;

use immunerec::adaptive::RefinementRecord;
use immunerec::mesh::PiecewiseFn;

pub fn mesh_csv(record: &RefinementRecord) -> String {
    let mut s = String::from("t_days\n");
    for t in record.mesh.nodes() {
        let _ = writeln!(s, "{t}");
    }
    s
}

pub fn e_csv(record: &RefinementRecord) -> String {
    let mut s = String::from("t_left_days,t_right_days,e,e_prior\n");
    for k in 0..record.mesh.interval_count() {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            record.mesh.t_left(k),
            record.mesh.t_right(k),
            record.e.values()[k],
            record.e_prior.values()[k],
        );
    }
    s
}

pub fn solution_csv(record: &RefinementRecord) -> String {
    let mut s = String::from("t_days,u1_cells_per_ml,u2_cells_per_ml,u3_virions_per_ml,log10_u3\n");
    for (i, st) in record.trajectory.states().iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            record.mesh.nodes()[i],
            st.u1,
            st.u2,
            st.u3,
            st.u3.max(1e-2).log10(),
        );
    }
    s
}

pub fn data_csv(record: &RefinementRecord) -> String {
    let mut s = String::from(
        "t_mid_days,g1_cells_per_ml,g2_virions_per_ml,log10_g1,log10_g2,d,z_weight_span\n",
    );
    for k in 0..record.mesh.interval_count() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},",
            record.mesh.midpoint(k),
            record.data.g1().values()[k],
            record.data.g2().values()[k],
            record.data.log10_g1().values()[k],
            record.data.log10_g2().values()[k],
            record.d_fn.values()[k],
        );
    }
    s
}

pub fn residuals_csv(record: &RefinementRecord) -> String {
    let mut s = String::from("t_left_days,t_right_days,r1,r2,stationarity_residual\n");
    for k in 0..record.mesh.interval_count() {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            record.mesh.t_left(k),
            record.mesh.t_right(k),
            record.residuals.r1.values()[k],
            record.residuals.r2.values()[k],
            record.stationarity.values()[k],
        );
    }
    s
}

pub fn trace_csv(record: &RefinementRecord) -> String {
    let mut s = String::from("m,j,grad_norm,rel_change,gamma,step,beta,accepted\n");
    for it in &record.trace.iterations {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            it.m, it.j, it.grad_norm, it.rel_change, it.gamma, it.step, it.beta, it.accepted,
        );
    }
    s
}

pub fn summary_csv(records: &[RefinementRecord]) -> String {
    let mut s = String::from(
        "k,nno,norm_r1,norm_r2,est_objective,est_reconstruction,est_residual_bound,gamma_final,final_grad_norm,cga_iterations,termination\n",
    );
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{:?}",
            r.level,
            r.node_count,
            r.residuals.norm_r1,
            r.residuals.norm_r2,
            r.est_objective,
            r.est_reconstruction,
            r.est_residual_bound,
            r.gamma_final,
            r.trace.final_grad_norm(),
            r.trace.iterations.len(),
            r.trace.termination,
        );
    }
    s
}

pub fn e_true_csv(record: &RefinementRecord, e_true: &PiecewiseFn) -> String {
    let mut s = String::from("t_left_days,t_right_days,e_true,e_recon,abs_err\n");
    for k in 0..record.mesh.interval_count() {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            record.mesh.t_left(k),
            record.mesh.t_right(k),
            e_true.values()[k],
            record.e.values()[k],
            (record.e.values()[k] - e_true.values()[k]).abs(),
        );
    }
    s
}

pub struct TwinLevelStats {
    pub level: usize,
    pub node_count: usize,
    pub err_abs: f64,
    pub err_rel: f64,
    pub err_rel_window: f64,
    pub est_residual_bound: f64,
}

pub fn twin_summary_csv(stats: &[TwinLevelStats]) -> String {
    let mut s = String::from("k,nno,err_abs_l2,err_rel_l2,err_rel_l2_window,est_residual_bound\n");
    for st in stats {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            st.level,
            st.node_count,
            st.err_abs,
            st.err_rel,
            st.err_rel_window,
            st.est_residual_bound,
        );
    }
    s
}
