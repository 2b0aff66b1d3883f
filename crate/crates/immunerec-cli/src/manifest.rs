//! The run manifest: a complete, self-contained description of a run. A
//! manifest embeds the clinical series itself, so re-executing from the
//! manifest needs no other inputs and reproduces the outputs byte for byte.

use serde::{Deserialize, Serialize};

use immunerec::adaptive::{AcgaConfig, RestartFrom};
use immunerec::data::{builtin_patient, load_csv, ClinicalSeries};
use immunerec::forward::NewtonConfig;
use immunerec::model::{CtlParams, ModelParams, State};
use immunerec::optimizer::CgaConfig;

use crate::{CliError, CommonArgs, ForwardArgs};

pub fn parse_x0(spec: &str) -> Result<State, CliError> {
    let parts: Vec<&str> = spec.split(',').collect();
    if parts.len() != 3 {
        return Err(CliError::usage(format!(
            "--x0 needs three comma-separated values, got {spec:?}"
        )));
    }
    let nums: Result<Vec<f64>, _> = parts.iter().map(|p| p.trim().parse::<f64>()).collect();
    let nums = nums.map_err(|e| CliError::usage(format!("bad --x0 value in {spec:?}: {e}")))?;
    let x0 = State::new(nums[0], nums[1], nums[2]);
    if !x0.is_finite() {
        return Err(CliError::usage("--x0 components must be finite"));
    }
    Ok(x0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Reconstruct,
    Twin,
    Forward,
}

/// Time profile specification for ground truths and forward drives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum EtrueSpec {
    /// The CTL-derived initial-guess profile of the selected patient.
    Profile,
    Constant {
        value: f64,
    },
    /// `a` before the step time, `b` from it on.
    Step {
        t: f64,
        a: f64,
        b: f64,
    },
}

impl EtrueSpec {
    pub fn parse(s: &str) -> Result<Self, String> {
        if s == "profile" || s == "patient1-profile" {
            return Ok(EtrueSpec::Profile);
        }
        if let Some(rest) = s.strip_prefix("constant:") {
            let value: f64 = rest
                .parse()
                .map_err(|e| format!("bad constant value {rest:?}: {e}"))?;
            return Ok(EtrueSpec::Constant { value });
        }
        if let Some(rest) = s.strip_prefix("step:") {
            let parts: Vec<&str> = rest.split(':').collect();
            if parts.len() != 3 {
                return Err(format!("step profile needs step:<t>:<a>:<b>, got {s:?}"));
            }
            let nums: Result<Vec<f64>, _> = parts.iter().map(|p| p.parse::<f64>()).collect();
            let nums = nums.map_err(|e| format!("bad step profile {s:?}: {e}"))?;
            return Ok(EtrueSpec::Step {
                t: nums[0],
                a: nums[1],
                b: nums[2],
            });
        }
        Err(format!(
            "profile must be \"profile\", \"patient1-profile\", \"constant:<v>\" or \"step:<t>:<a>:<b>\", got {s:?}"
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum PriorSpec {
    Profile,
    Constant { value: f64 },
}

impl PriorSpec {
    pub fn parse(s: &str) -> Result<Self, String> {
        if s == "profile" {
            return Ok(PriorSpec::Profile);
        }
        if let Some(rest) = s.strip_prefix("constant:") {
            let value: f64 = rest
                .parse()
                .map_err(|e| format!("bad constant value {rest:?}: {e}"))?;
            return Ok(PriorSpec::Constant { value });
        }
        Err(format!(
            "prior must be \"profile\" or \"constant:<v>\", got {s:?}"
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwinSection {
    pub noise: f64,
    pub seed: u64,
    pub etrue: EtrueSpec,
    pub prior: PriorSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardSection {
    pub e: EtrueSpec,
    pub tau: f64,
    pub t_end: f64,
}

/// Full configuration snapshot of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub kind: RunKind,
    pub params: ModelParams,
    pub ctl: CtlParams,
    /// The clinical record itself; runs never re-read external data files.
    pub series: ClinicalSeries,
    pub x0: State,
    pub newton: NewtonConfig,
    pub acga: AcgaConfigSnapshot,
    pub twin: Option<TwinSection>,
    pub forward: Option<ForwardSection>,
    /// Files the run writes, relative to its output directory.
    pub outputs: Vec<String>,
}

/// Serializable mirror of the adaptive-loop configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcgaConfigSnapshot {
    pub beta_refine: f64,
    pub max_refinements: usize,
    pub restart_from: RestartFrom,
    pub theta_est: f64,
    pub level0_step: f64,
    pub cross_level_stall_factor: f64,
    pub continue_schedule: bool,
    pub inner: CgaConfig,
}

impl AcgaConfigSnapshot {
    pub fn to_config(&self) -> AcgaConfig {
        AcgaConfig {
            beta_refine: self.beta_refine,
            max_refinements: self.max_refinements,
            restart_from: self.restart_from,
            theta_est: self.theta_est,
            level0_step: self.level0_step,
            cross_level_stall_factor: self.cross_level_stall_factor,
            continue_schedule: self.continue_schedule,
            inner: self.inner,
        }
    }
}

fn load_series(
    common_data: &Option<std::path::PathBuf>,
    patient: u8,
) -> Result<ClinicalSeries, CliError> {
    match common_data {
        Some(path) => load_csv(path)
            .map_err(|e| CliError::usage(format!("cannot load {}: {e}", path.display()))),
        None => builtin_patient(patient).map_err(|e| CliError::usage(e.to_string())),
    }
}

pub fn from_common(
    kind: RunKind,
    common: &CommonArgs,
    patient: u8,
    twin: Option<TwinSection>,
) -> Result<Manifest, CliError> {
    let series = load_series(&common.data, patient)?;
    let ctl = CtlParams::patient(patient).map_err(|e| CliError::usage(e.to_string()))?;
    let inner = CgaConfig {
        gamma0: common.gamma0,
        p: common.p,
        theta: common.theta,
        max_iters: common.max_iters,
        project: common.project_box,
        step_max: common.step_max,
        ..CgaConfig::default()
    };
    let acga = AcgaConfigSnapshot {
        beta_refine: common.beta,
        max_refinements: common.refinements,
        restart_from: match common.restart.as_str() {
            "initial" => RestartFrom::InitialGuess,
            _ => RestartFrom::PreviousResult,
        },
        theta_est: common.theta_est,
        level0_step: 1.0,
        cross_level_stall_factor: common.cross_level_stop.unwrap_or(0.0),
        continue_schedule: false,
        inner,
    };
    let newton = NewtonConfig {
        substeps: common.substeps,
        ..NewtonConfig::default()
    };
    acga.to_config()
        .validate()
        .map_err(|e| CliError::usage(e.to_string()))?;
    newton
        .validate()
        .map_err(|e| CliError::usage(e.to_string()))?;
    Ok(Manifest {
        tool: "immunerec".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        kind,
        params: ModelParams::default(),
        ctl,
        series,
        x0: parse_x0(&common.x0)?,
        newton,
        acga,
        twin,
        forward: None,
        outputs: Vec::new(),
    })
}

pub fn forward_manifest(
    args: &ForwardArgs,
    patient: u8,
    e: EtrueSpec,
) -> Result<Manifest, CliError> {
    let series = load_series(&args.data, patient)?;
    if args.t_end > series.t_end() {
        return Err(CliError::usage(format!(
            "--t-end {} exceeds the series span {}",
            args.t_end,
            series.t_end()
        )));
    }
    let ctl = CtlParams::patient(patient).map_err(|e| CliError::usage(e.to_string()))?;
    let newton = NewtonConfig {
        substeps: args.substeps,
        ..NewtonConfig::default()
    };
    newton
        .validate()
        .map_err(|e| CliError::usage(e.to_string()))?;
    Ok(Manifest {
        tool: "immunerec".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        kind: RunKind::Forward,
        params: ModelParams::default(),
        ctl,
        series,
        x0: parse_x0(&args.x0)?,
        newton,
        acga: AcgaConfigSnapshot {
            beta_refine: 0.875,
            max_refinements: 0,
            restart_from: RestartFrom::PreviousResult,
            theta_est: 0.0,
            level0_step: 1.0,
            cross_level_stall_factor: 0.0,
            continue_schedule: false,
            inner: CgaConfig::default(),
        },
        twin: None,
        forward: Some(ForwardSection {
            e,
            tau: args.tau,
            t_end: args.t_end,
        }),
        outputs: Vec::new(),
    })
}
