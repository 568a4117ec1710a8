//! Scenario files: a TOML document naming the feeder, fleet and baseline
//! files plus run settings. Relative paths resolve against the scenario's
//! directory.
//!
//! ```toml
//! name = "evening"
//! nu_lower = 0.954
//! sigma_p_w = 400.0
//! window_start = "19:00"
//! window_end = "08:00"
//! dt_minutes = 15.0
//! mc_samples = 1000
//! seed = 1
//!
//! [files]
//! feeder = "ieee13.feeder"
//! fleet = "fleet.toml"
//! baseline = "baseline.csv"
//!
//! [solver]
//! max_iters = 50
//! ```

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fleet::Fleet;
use crate::io::{read_baseline, read_feeder, read_fleet, toml_error};
use crate::network::{BaselineLoadModel, FeederModel};
use crate::solver::{Problem, SolverConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub name: String,
    pub nu_lower: f64,
    pub sigma_p_w: f64,
    pub window_start: String,
    pub window_end: String,
    pub dt_minutes: f64,
    pub mc_samples: usize,
    /// Master seed; the solver and the Monte Carlo evaluation derive theirs
    /// from it.
    pub seed: u64,
    pub files: Files,
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Files {
    pub feeder: Option<PathBuf>,
    pub fleet: Option<PathBuf>,
    pub baseline: Option<PathBuf>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            name: String::new(),
            nu_lower: 0.954,
            sigma_p_w: 400.0,
            window_start: "19:00".into(),
            window_end: "08:00".into(),
            dt_minutes: 15.0,
            mc_samples: 1000,
            seed: 1,
            files: Files::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl Settings {
    pub fn dt_h(&self) -> f64 {
        self.dt_minutes / 60.0
    }

    /// Number of slots in the service window; the window may wrap midnight.
    pub fn horizon(&self) -> Result<usize> {
        let start = parse_clock(&self.window_start)?;
        let end = parse_clock(&self.window_end)?;
        let mut span = end - start;
        if span <= 0.0 {
            span += 24.0 * 60.0;
        }
        if !(self.dt_minutes > 0.0) {
            return Err(Error::Config(format!("dt_minutes must be positive, got {}", self.dt_minutes)));
        }
        let k = span / self.dt_minutes;
        if (k - k.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "window of {span} minutes is not a whole number of {}-minute slots",
                self.dt_minutes
            )));
        }
        Ok(k.round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu_lower > 0.0 && self.nu_lower < 1.0) {
            return Err(Error::Config(format!("nu_lower must lie in (0, 1), got {}", self.nu_lower)));
        }
        if !(self.sigma_p_w >= 0.0) || !self.sigma_p_w.is_finite() {
            return Err(Error::Config(format!("sigma_p_w must be nonnegative, got {}", self.sigma_p_w)));
        }
        self.horizon()?;
        self.solver.validate()
    }
}

fn parse_clock(s: &str) -> Result<f64> {
    let bad = || Error::Config(format!("expected HH:MM, found `{s}`"));
    let (h, m) = s.split_once(':').ok_or_else(bad)?;
    let h: u32 = h.trim().parse().map_err(|_| bad())?;
    let m: u32 = m.trim().parse().map_err(|_| bad())?;
    if h > 23 || m > 59 {
        return Err(bad());
    }
    Ok((h * 60 + m) as f64)
}

/// Command-line style overrides applied on top of the scenario file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub sigma_p_w: Option<f64>,
    pub nu_lower: Option<f64>,
    pub iters: Option<usize>,
    pub seed: Option<u64>,
    pub mc_samples: Option<usize>,
    pub delta: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub tau: Option<f64>,
    pub d_lambda: Option<f64>,
    pub rho: Option<f64>,
    pub chance_scale: Option<f64>,
    pub mvn_tol: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, s: &mut Settings) {
        macro_rules! set {
            ($src:ident => $($dst:tt)+) => {
                if let Some(v) = self.$src {
                    s.$($dst)+ = v;
                }
            };
        }
        set!(sigma_p_w => sigma_p_w);
        set!(nu_lower => nu_lower);
        set!(iters => solver.max_iters);
        set!(seed => seed);
        set!(mc_samples => mc_samples);
        set!(delta => solver.delta);
        set!(alpha => solver.alpha);
        set!(beta => solver.beta);
        set!(d_lambda => solver.d_lambda);
        set!(chance_scale => solver.chance_scale);
        set!(mvn_tol => solver.mvn_tol);
        if let Some(t) = self.tau {
            s.solver.tau_u = t;
            s.solver.tau_lambda = t;
        }
        if self.rho.is_some() {
            s.solver.rho = self.rho;
        }
    }
}

/// Files a scenario was loaded from, kept for the run manifest.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Sources {
    pub scenario: Option<PathBuf>,
    pub feeder: Option<PathBuf>,
    pub fleet: Option<PathBuf>,
    pub baseline: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub settings: Settings,
    pub problem: Problem,
    /// Per-house baseline means (W), K x n.
    pub baseline_w: DMatrix<f64>,
    pub sources: Sources,
}

impl Scenario {
    /// Assembles a scenario from in-memory parts. The solver seed is taken
    /// from the master seed.
    pub fn from_parts(mut settings: Settings, feeder: FeederModel, fleet: Fleet, baseline_w: DMatrix<f64>) -> Result<Self> {
        settings.solver.seed = settings.seed;
        settings.validate()?;
        let k = settings.horizon()?;
        if baseline_w.nrows() != k {
            return Err(Error::dim("baseline slots", k, baseline_w.nrows()));
        }
        let s_base = feeder.bases().s_base_va;
        let loads = BaselineLoadModel::new(&baseline_w / s_base, settings.sigma_p_w / s_base)?;
        let problem = Problem::new(feeder, fleet, loads, settings.nu_lower)?;
        Ok(Self {
            settings,
            problem,
            baseline_w,
            sources: Sources::default(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.problem.horizon()
    }

    pub fn solver_config(&self) -> &SolverConfig {
        &self.settings.solver
    }
}

pub fn load_scenario(path: &Path, overrides: &Overrides) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut settings: Settings = toml::from_str(&text).map_err(|e| toml_error(path, &text, &e))?;
    overrides.apply(&mut settings);
    settings.validate()?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &Option<PathBuf>, what: &str| {
        p.as_ref()
            .map(|p| dir.join(p))
            .ok_or_else(|| Error::Config(format!("scenario names no {what} file")))
    };
    let feeder_path = resolve(&settings.files.feeder, "feeder")?;
    let fleet_path = resolve(&settings.files.fleet, "fleet")?;
    let baseline_path = resolve(&settings.files.baseline, "baseline")?;
    let feeder = read_feeder(&feeder_path)?;
    let k = settings.horizon()?;
    let fleet = read_fleet(&fleet_path, &feeder, settings.dt_h(), k)?;
    let baseline = read_baseline(&baseline_path, &feeder)?;
    let mut sc = Scenario::from_parts(settings, feeder, fleet, baseline)?;
    sc.sources = Sources {
        scenario: Some(path.to_path_buf()),
        feeder: Some(feeder_path),
        fleet: Some(fleet_path),
        baseline: Some(baseline_path),
    };
    Ok(sc)
}
