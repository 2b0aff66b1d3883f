//! Clinical data model: the four embedded patient records, CSV ingestion,
//! linear-spline interpolation onto meshes, CTL profile construction, and the
//! synthetic twin-experiment generator.
//!
//! Each record holds 8 samples of log10 viral load and total CD4+ T cells
//! (stored in cells/ml; clinical tables list Sigma in units of 10^3
//! cells/ml). Viral load interpolates linearly in log scale, Sigma in linear
//! scale. The default mapping of the 8 sampling labels to days is
//! `{0, 7, 14, 21, 28, 35, 182, 363}`; CSV input may carry any strictly
//! increasing times starting at 0.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{solve_forward, NewtonConfig, StateTrajectory};
use crate::mesh::{PiecewiseFn, TimeMesh};
use crate::model::{ctl_d, ctl_e0, CtlParams, ModelParams, State};

/// Default floor applied before logarithms so that a zero measurement
/// (log10 V = 0 means V = 1) stays well inside the domain.
pub const DEFAULT_LOG_FLOOR: f64 = 1e-2;

/// Default day values for the 8 sampling labels
/// (pre-infection, 0..4 weeks, 6 months, 1 year).
pub const DEFAULT_SAMPLE_DAYS: [f64; 8] = [0.0, 7.0, 14.0, 21.0, 28.0, 35.0, 182.0, 363.0];

/// One clinical sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClinicalPoint {
    /// Sample time in days.
    pub time_days: f64,
    /// log10 viral load, copies/ml.
    pub log10_v: f64,
    /// Total CD4+ T cells, cells/ml.
    pub sigma: f64,
}

/// The 8-point measured record for one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalSeries {
    pub patient_id: String,
    pub points: Vec<ClinicalPoint>,
}

impl ClinicalSeries {
    pub fn new(patient_id: impl Into<String>, points: Vec<ClinicalPoint>) -> Result<Self> {
        let series = ClinicalSeries {
            patient_id: patient_id.into(),
            points,
        };
        series.validate()?;
        Ok(series)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != 8 {
            return Err(Error::Schema(format!(
                "a clinical series has exactly 8 points, got {}",
                self.points.len()
            )));
        }
        if self.points[0].time_days != 0.0 {
            return Err(Error::Schema("first sample must be at day 0".into()));
        }
        if !self
            .points
            .windows(2)
            .all(|w| w[1].time_days > w[0].time_days)
        {
            return Err(Error::Schema(
                "sample times must be strictly increasing".into(),
            ));
        }
        for (i, pt) in self.points.iter().enumerate() {
            if !(pt.sigma > 0.0) {
                return Err(Error::Schema(format!(
                    "sigma must be positive at point {} (got {})",
                    i + 1,
                    pt.sigma
                )));
            }
            if pt.log10_v < 0.0 {
                return Err(Error::Schema(format!(
                    "log10 viral load must be non-negative at point {} (got {})",
                    i + 1,
                    pt.log10_v
                )));
            }
        }
        Ok(())
    }

    pub fn t_end(&self) -> f64 {
        self.points.last().unwrap().time_days
    }

    /// Piecewise-linear interpolant of log10 V at time `t` (clamped to the
    /// sampled range).
    pub fn log10_v_at(&self, t: f64) -> f64 {
        interp_linear(&self.points, t, |p| p.log10_v)
    }

    /// Piecewise-linear interpolant of Sigma (cells/ml) at time `t`.
    pub fn sigma_at(&self, t: f64) -> f64 {
        interp_linear(&self.points, t, |p| p.sigma)
    }
}

fn interp_linear(points: &[ClinicalPoint], t: f64, value: impl Fn(&ClinicalPoint) -> f64) -> f64 {
    let first = &points[0];
    let last = points.last().unwrap();
    if t <= first.time_days {
        return value(first);
    }
    if t >= last.time_days {
        return value(last);
    }
    let idx = points.partition_point(|p| p.time_days < t);
    let (a, b) = (&points[idx - 1], &points[idx]);
    let w = (t - a.time_days) / (b.time_days - a.time_days);
    value(a) + w * (value(b) - value(a))
}

/// Embedded clinical record for patient `n` in `{1, 2, 3, 4}` with the
/// default time mapping. Sigma table values are in 10^3 cells/ml and stored
/// here in cells/ml.
pub fn builtin_patient(n: u8) -> Result<ClinicalSeries> {
    let (log10_v, sigma_k): ([f64; 8], [f64; 8]) = match n {
        1 => (
            [0.0, 5.5, 7.75, 6.5, 5.5, 5.3, 4.5, 5.1],
            [1125., 825., 675., 525., 540., 525., 550., 600.],
        ),
        2 => (
            [0.0, 5.5, 7.0, 5.75, 4.8, 3.8, 4.3, 4.0],
            [750., 630., 450., 280., 750., 570., 450., 530.],
        ),
        3 => (
            [0.0, 5.7, 7.4, 6.8, 4.2, 3.8, 3.2, 3.7],
            [700., 430., 300., 480., 570., 450., 630., 510.],
        ),
        4 => (
            [0.0, 3.7, 5.7, 6.0, 3.9, 3.5, 3.0, 3.0],
            [615., 700., 450., 615., 575., 520., 450., 615.],
        ),
        _ => {
            return Err(Error::invalid(format!(
                "patient number must be 1..4, got {n}"
            )))
        }
    };
    let points = (0..8)
        .map(|i| ClinicalPoint {
            time_days: DEFAULT_SAMPLE_DAYS[i],
            log10_v: log10_v[i],
            sigma: sigma_k[i] * 1e3,
        })
        .collect();
    ClinicalSeries::new(format!("patient{n}"), points)
}

/// Clinical data interpolated to a mesh, one value per interval sampled at
/// interval midpoints. Viral load is interpolated in log scale, Sigma in
/// linear scale; both carry cached log10 versions with the floor applied.
#[derive(Debug, Clone)]
pub struct InterpolatedData {
    mesh: Arc<TimeMesh>,
    g1: PiecewiseFn,
    g2: PiecewiseFn,
    log10_g1: PiecewiseFn,
    log10_g2: PiecewiseFn,
}

impl InterpolatedData {
    /// Assemble from per-interval linear-scale values, flooring before logs.
    pub fn from_values(mesh: Arc<TimeMesh>, g1: Vec<f64>, g2: Vec<f64>) -> Result<Self> {
        let g1 = PiecewiseFn::new(mesh.clone(), g1)?;
        let g2 = PiecewiseFn::new(mesh.clone(), g2)?;
        let log10_g1 = g1.map(|v| v.max(DEFAULT_LOG_FLOOR).log10());
        let log10_g2 = g2.map(|v| v.max(DEFAULT_LOG_FLOOR).log10());
        Ok(InterpolatedData {
            mesh,
            g1,
            g2,
            log10_g1,
            log10_g2,
        })
    }

    pub fn mesh(&self) -> &Arc<TimeMesh> {
        &self.mesh
    }

    /// Total T cells, cells/ml, linear scale.
    pub fn g1(&self) -> &PiecewiseFn {
        &self.g1
    }

    /// Virions/ml, linear scale.
    pub fn g2(&self) -> &PiecewiseFn {
        &self.g2
    }

    pub fn log10_g1(&self) -> &PiecewiseFn {
        &self.log10_g1
    }

    pub fn log10_g2(&self) -> &PiecewiseFn {
        &self.log10_g2
    }

    /// Exact re-sampling onto a nested refinement of this data's mesh.
    pub fn transfer(&self, target: &Arc<TimeMesh>) -> Result<Self> {
        let g1 = crate::mesh::transfer(&self.g1, target)?;
        let g2 = crate::mesh::transfer(&self.g2, target)?;
        InterpolatedData::from_values(target.clone(), g1.values().to_vec(), g2.values().to_vec())
    }
}

/// Interpolate a clinical series onto a mesh spanning the same window.
///
/// log10 V is interpolated in log scale and exponentiated; Sigma is
/// interpolated linearly. Interval values are taken at interval midpoints.
pub fn interpolate_to_mesh(
    series: &ClinicalSeries,
    mesh: &Arc<TimeMesh>,
) -> Result<InterpolatedData> {
    let span = series.t_end();
    if (mesh.t_end() - span).abs() > 1e-9 * span.max(1.0) {
        return Err(Error::invalid(format!(
            "mesh spans [0, {}] but the series spans [0, {}]",
            mesh.t_end(),
            span
        )));
    }
    let n = mesh.interval_count();
    let mut g1 = Vec::with_capacity(n);
    let mut g2 = Vec::with_capacity(n);
    for k in 0..n {
        let t = mesh.midpoint(k);
        g1.push(series.sigma_at(t));
        g2.push(10f64.powf(series.log10_v_at(t)));
    }
    InterpolatedData::from_values(mesh.clone(), g1, g2)
}

/// CTL profiles `d(t)` and `E0(t)` on a mesh, built from the measured log10
/// viral load interpolated at interval midpoints. The mesh may cover any
/// sub-window of the series span.
pub fn ctl_profiles(
    series: &ClinicalSeries,
    ctl: &CtlParams,
    mesh: &Arc<TimeMesh>,
) -> Result<(PiecewiseFn, PiecewiseFn)> {
    ctl.validate()?;
    if mesh.t_end() > series.t_end() * (1.0 + 1e-9) {
        return Err(Error::invalid(format!(
            "mesh extends to {} beyond the series span {}",
            mesh.t_end(),
            series.t_end()
        )));
    }
    let d_fn = PiecewiseFn::from_midpoints(mesh.clone(), |t| ctl_d(t, series.log10_v_at(t), ctl));
    let e0_fn = PiecewiseFn::from_midpoints(mesh.clone(), |t| ctl_e0(t, series.log10_v_at(t), ctl));
    Ok((d_fn, e0_fn))
}

/// Ground truth and noise description for a synthetic twin experiment.
#[derive(Debug, Clone)]
pub struct TwinSpec {
    /// Ground-truth immune response on the twin mesh.
    pub e_true: PiecewiseFn,
    /// Relative half-width of the multiplicative noise on g1.
    pub noise_sigma1: f64,
    /// Relative half-width of the multiplicative noise on g2.
    pub noise_sigma2: f64,
    pub rng_seed: u64,
}

impl TwinSpec {
    pub fn noiseless(e_true: PiecewiseFn) -> Self {
        TwinSpec {
            e_true,
            noise_sigma1: 0.0,
            noise_sigma2: 0.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_sigma1 < 0.0 || self.noise_sigma2 < 0.0 {
            return Err(Error::invalid("noise levels must be non-negative"));
        }
        Ok(())
    }
}

/// Generate synthetic data from a known immune response.
///
/// The forward problem is solved with `E = e_true` and the supplied death
/// rate, and the observables are read at interval left nodes (the objective's
/// sampling points) with zero-mean uniform multiplicative noise of half-width
/// `sigma`, floored to stay positive. Returns the data together with the true
/// trajectory.
pub fn make_twin(
    params: &ModelParams,
    d_fn: &PiecewiseFn,
    spec: &TwinSpec,
    mesh: &Arc<TimeMesh>,
    x0: &State,
    cfg: &NewtonConfig,
) -> Result<(InterpolatedData, StateTrajectory)> {
    spec.validate()?;
    if !spec.e_true.on_mesh(mesh) {
        return Err(Error::MeshMismatch(
            "e_true must live on the twin mesh".into(),
        ));
    }
    let traj = solve_forward(&spec.e_true, d_fn, x0, mesh, params, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let n = mesh.interval_count();
    let mut g1 = Vec::with_capacity(n);
    let mut g2 = Vec::with_capacity(n);
    for k in 0..n {
        let s = traj.interval_state(k);
        let eta1 = if spec.noise_sigma1 > 0.0 {
            rng.gen_range(-spec.noise_sigma1..=spec.noise_sigma1)
        } else {
            0.0
        };
        let eta2 = if spec.noise_sigma2 > 0.0 {
            rng.gen_range(-spec.noise_sigma2..=spec.noise_sigma2)
        } else {
            0.0
        };
        g1.push(((s.u1 + s.u2) * (1.0 + eta1)).max(DEFAULT_LOG_FLOOR));
        g2.push((s.u3 * (1.0 + eta2)).max(DEFAULT_LOG_FLOOR));
    }
    let data = InterpolatedData::from_values(mesh.clone(), g1, g2)?;
    Ok((data, traj))
}

const CSV_HEADER: &str = "time_days,log10_viral_load,total_t_cells_per_ml";

/// Write a clinical series in the canonical CSV schema.
pub fn write_series_csv<W: Write>(series: &ClinicalSeries, mut w: W) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for p in &series.points {
        writeln!(w, "{},{},{}", p.time_days, p.log10_v, p.sigma)?;
    }
    Ok(())
}

pub fn save_csv(series: &ClinicalSeries, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_series_csv(series, std::io::BufWriter::new(file))
}

/// Parse a clinical series from the canonical CSV schema:
/// a header row plus exactly 8 data rows.
pub fn read_series_csv<R: Read>(
    reader: R,
    patient_id: impl Into<String>,
) -> Result<ClinicalSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    {
        let headers = rdr.headers()?;
        let expect: Vec<&str> = CSV_HEADER.split(',').collect();
        let got: Vec<&str> = headers.iter().collect();
        if got != expect {
            return Err(Error::Schema(format!(
                "expected header {expect:?}, got {got:?}"
            )));
        }
    }
    let mut points = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 2; // header is line 1
        let record = record?;
        if record.len() != 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 3 fields, got {}", record.len()),
            });
        }
        let parse = |field: usize, name: &str| -> Result<f64> {
            record[field].parse::<f64>().map_err(|e| Error::Parse {
                line,
                msg: format!("bad {name} value {:?}: {e}", &record[field]),
            })
        };
        points.push(ClinicalPoint {
            time_days: parse(0, "time_days")?,
            log10_v: parse(1, "log10_viral_load")?,
            sigma: parse(2, "total_t_cells_per_ml")?,
        });
    }
    ClinicalSeries::new(patient_id, points)
}

pub fn load_csv(path: &Path) -> Result<ClinicalSeries> {
    let file = std::fs::File::open(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    read_series_csv(std::io::BufReader::new(file), id)
}
