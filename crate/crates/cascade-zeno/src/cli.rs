//! Command-line front end: scenario configs, simulation and sweep commands
//! with worker parallelism, and the built-in verification battery.
//!
//! Configs are line-oriented `key = value` text with `#` comments and no
//! sections. Unknown keys are rejected, missing keys fall back to the
//! defaults of [`ScenarioConfig::default`], which describe a golden-rule
//! reference scenario (flat bands, stable intermediate level).
//!
//! All emitted numbers follow the crate conventions: amplitude rates, ħ = 1.
//! CSV floats carry 17 significant digits so outputs are bit-reproducible;
//! identical binary + config + arguments give byte-identical files
//! regardless of worker count.

use crate::analysis::{compare_windowed, run_and_compare, AnalysisError, RateReport};
use crate::discretize::build_discrete;
use crate::dynamics::{
    default_dt, integrate, integrate_with, DynamicsError, IntegrateOptions, Trajectory,
};
use crate::model::{predict_rates, CascadeSpec, CouplingProfile, EnergyGrid, RatePrediction, SpecError};
use crate::scenarios;
use crate::series::{neumann_term_ratio, resummed_rate, SeriesError};
use clap::{Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use thiserror::Error;

/// Name of the environment variable that forces a fixed integrator step and
/// bypasses the phase-resolution gate. Testing hook only, documented
/// unstable: its purpose is demonstrating how over-coarse stepping trips the
/// norm-drift guard.
pub const DT_OVERRIDE_ENV: &str = "CASCADE_ZENO_DT_OVERRIDE";

#[derive(Debug, Error, PartialEq)]
#[error("line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Config { path: String, source: ConfigError },
    #[error("override {spec}: {message}")]
    Override { spec: String, message: String },
    #[error("cannot read {path}: {source}")]
    ReadFile { path: String, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    WriteFile { path: String, source: std::io::Error },
    #[error("no time scale: set dt explicitly, the model has no detuning and no predicted rate")]
    NoTimeScale,
    #[error("{DT_OVERRIDE_ENV} must be a positive finite number, got {value}")]
    BadDtOverride { value: String },
    #[error("sweep needs at least 2 values, got {got}")]
    TooFewSweepValues { got: usize },
    #[error("sweep over {key} needs a flat base profile, got a {found} one")]
    SweepNeedsFlat { key: &'static str, found: &'static str },
    #[error("peaks needs a lorentzian rho0 profile, got a {found} one")]
    PeaksNeedsLorentzian { found: &'static str },
    #[error("peaks needs a non-empty peak_widths list")]
    PeaksNeedsWidths,
    #[error("peak_weight must be finite and non-negative, got {value}")]
    BadPeakWeight { value: f64 },
    #[error("peak widths must be positive and finite, got {value}")]
    BadPeakWidth { value: f64 },
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Series(#[from] SeriesError),
}

/// A value that may be left for the tool to choose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AutoOr<T> {
    Auto,
    Given(T),
}

impl<T: Copy> AutoOr<T> {
    pub fn given(self) -> Option<T> {
        match self {
            Self::Auto => None,
            Self::Given(v) => Some(v),
        }
    }
}

impl<T: fmt::Display> fmt::Display for AutoOr<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Auto => write!(f, "auto"),
            Self::Given(v) => write!(f, "{v}"),
        }
    }
}

/// Complete textual description of one run: the physical scenario plus run
/// controls. Every field has a config key of the same name.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub e2: f64,
    pub grid1_center: f64,
    pub grid1_halfwidth: f64,
    pub grid1_count: usize,
    pub grid0_center: f64,
    pub grid0_halfwidth: f64,
    pub grid0_count: usize,
    pub rho1: CouplingProfile,
    pub rho0: CouplingProfile,
    pub v12: CouplingProfile,
    pub v10: CouplingProfile,
    pub t_max: AutoOr<f64>,
    pub dt: AutoOr<f64>,
    pub sample_every: AutoOr<usize>,
    pub fit_lo: AutoOr<f64>,
    pub fit_hi: AutoOr<f64>,
    pub workers: AutoOr<usize>,
    pub output: String,
    pub peak_widths: Vec<f64>,
    pub peak_weight: f64,
}

impl Default for ScenarioConfig {
    /// The golden-rule reference scenario: flat bands of halfwidth 1 around
    /// the level, densities 1/π, V₁₂ = √0.05 so γ₂ = 0.05, stable
    /// intermediate level (V₁₀ = 0), everything else automatic.
    fn default() -> Self {
        Self {
            e2: 0.0,
            grid1_center: 0.0,
            grid1_halfwidth: 1.0,
            grid1_count: 1000,
            grid0_center: 0.0,
            grid0_halfwidth: 1.0,
            grid0_count: 1000,
            rho1: CouplingProfile::Flat(std::f64::consts::FRAC_1_PI),
            rho0: CouplingProfile::Flat(std::f64::consts::FRAC_1_PI),
            v12: CouplingProfile::Flat(0.05_f64.sqrt()),
            v10: CouplingProfile::Flat(0.0),
            t_max: AutoOr::Auto,
            dt: AutoOr::Auto,
            sample_every: AutoOr::Auto,
            fit_lo: AutoOr::Auto,
            fit_hi: AutoOr::Auto,
            workers: AutoOr::Auto,
            output: "run".to_string(),
            peak_widths: Vec::new(),
            peak_weight: 0.0,
        }
    }
}

impl ScenarioConfig {
    /// Parses config text: one `key = value` per line, `#` starts a comment,
    /// blank lines ignored. Unknown and duplicate keys are errors carrying
    /// the offending line number.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let one = |message: String| ConfigError { line, message };
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| one(format!("expected key = value, got {body}")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|s| s == key) {
                return Err(one(format!("duplicate key {key}")));
            }
            seen.push(key.to_string());
            cfg.set(key, value).map_err(one)?;
        }
        Ok(cfg)
    }

    /// Applies one `key=value` override on top of the current config, with
    /// the same key vocabulary and validation as [`ScenarioConfig::parse`].
    pub fn apply_override(&mut self, spec: &str) -> Result<(), String> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got {spec}"))?;
        self.set(key.trim(), value.trim())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "e2" => self.e2 = parse_f64(key, value)?,
            "grid1_center" => self.grid1_center = parse_f64(key, value)?,
            "grid1_halfwidth" => self.grid1_halfwidth = parse_f64(key, value)?,
            "grid1_count" => self.grid1_count = parse_usize(key, value)?,
            "grid0_center" => self.grid0_center = parse_f64(key, value)?,
            "grid0_halfwidth" => self.grid0_halfwidth = parse_f64(key, value)?,
            "grid0_count" => self.grid0_count = parse_usize(key, value)?,
            "rho1" => self.rho1 = parse_profile(key, value)?,
            "rho0" => self.rho0 = parse_profile(key, value)?,
            "v12" => self.v12 = parse_profile(key, value)?,
            "v10" => self.v10 = parse_profile(key, value)?,
            "t_max" => self.t_max = parse_auto_f64(key, value)?,
            "dt" => self.dt = parse_auto_f64(key, value)?,
            "sample_every" => self.sample_every = parse_auto_usize(key, value)?,
            "fit_lo" => self.fit_lo = parse_auto_f64(key, value)?,
            "fit_hi" => self.fit_hi = parse_auto_f64(key, value)?,
            "workers" => self.workers = parse_auto_usize(key, value)?,
            "output" => self.output = value.to_string(),
            "peak_widths" => self.peak_widths = parse_f64_list(key, value)?,
            "peak_weight" => self.peak_weight = parse_f64(key, value)?,
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }

    /// Builds the validated physical scenario this config describes.
    pub fn build_spec(&self) -> Result<CascadeSpec, SpecError> {
        CascadeSpec::new(
            self.e2,
            EnergyGrid::new(self.grid1_center, self.grid1_halfwidth, self.grid1_count)?,
            EnergyGrid::new(self.grid0_center, self.grid0_halfwidth, self.grid0_count)?,
            self.rho1.clone(),
            self.rho0.clone(),
            self.v12.clone(),
            self.v10.clone(),
        )
    }
}

impl fmt::Display for ScenarioConfig {
    /// Canonical echo: every key on its own line, in fixed order, such that
    /// the output re-parses to an identical config.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "e2 = {}", self.e2)?;
        writeln!(f, "grid1_center = {}", self.grid1_center)?;
        writeln!(f, "grid1_halfwidth = {}", self.grid1_halfwidth)?;
        writeln!(f, "grid1_count = {}", self.grid1_count)?;
        writeln!(f, "grid0_center = {}", self.grid0_center)?;
        writeln!(f, "grid0_halfwidth = {}", self.grid0_halfwidth)?;
        writeln!(f, "grid0_count = {}", self.grid0_count)?;
        writeln!(f, "rho1 = {}", show_profile(&self.rho1))?;
        writeln!(f, "rho0 = {}", show_profile(&self.rho0))?;
        writeln!(f, "v12 = {}", show_profile(&self.v12))?;
        writeln!(f, "v10 = {}", show_profile(&self.v10))?;
        writeln!(f, "t_max = {}", self.t_max)?;
        writeln!(f, "dt = {}", self.dt)?;
        writeln!(f, "sample_every = {}", self.sample_every)?;
        writeln!(f, "fit_lo = {}", self.fit_lo)?;
        writeln!(f, "fit_hi = {}", self.fit_hi)?;
        writeln!(f, "workers = {}", self.workers)?;
        writeln!(f, "output = {}", self.output)?;
        let widths = show_f64_list(&self.peak_widths);
        if widths.is_empty() {
            writeln!(f, "peak_widths =")?;
        } else {
            writeln!(f, "peak_widths = {widths}")?;
        }
        writeln!(f, "peak_weight = {}", self.peak_weight)
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64, String> {
    value
        .parse()
        .map_err(|_| format!("invalid number for {key}: {value}"))
}

fn parse_usize(key: &str, value: &str) -> Result<usize, String> {
    value
        .parse()
        .map_err(|_| format!("invalid count for {key}: {value}"))
}

fn parse_auto_f64(key: &str, value: &str) -> Result<AutoOr<f64>, String> {
    if value == "auto" {
        Ok(AutoOr::Auto)
    } else {
        parse_f64(key, value).map(AutoOr::Given)
    }
}

fn parse_auto_usize(key: &str, value: &str) -> Result<AutoOr<usize>, String> {
    if value == "auto" {
        Ok(AutoOr::Auto)
    } else {
        parse_usize(key, value).map(AutoOr::Given)
    }
}

fn parse_f64_list(key: &str, value: &str) -> Result<Vec<f64>, String> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_f64(key, v.trim())).collect()
}

fn show_f64_list(values: &[f64]) -> String {
    values
        .iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_profile(key: &str, value: &str) -> Result<CouplingProfile, String> {
    let (kind, rest) = value.split_once(':').ok_or_else(|| {
        format!("invalid profile for {key}: {value} (expected flat:V, lorentzian:C,W,P, or tabulated:E:V,...)")
    })?;
    match kind.trim() {
        "flat" => Ok(CouplingProfile::Flat(parse_f64(key, rest.trim())?)),
        "lorentzian" => {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() != 3 {
                return Err(format!(
                    "lorentzian profile for {key} needs center,width,peak, got {rest}"
                ));
            }
            Ok(CouplingProfile::Lorentzian {
                center: parse_f64(key, parts[0].trim())?,
                width: parse_f64(key, parts[1].trim())?,
                peak: parse_f64(key, parts[2].trim())?,
            })
        }
        "tabulated" => {
            let mut pairs = Vec::new();
            for item in rest.split(',') {
                let (e, v) = item.split_once(':').ok_or_else(|| {
                    format!("tabulated profile for {key} needs E:V pairs, got {item}")
                })?;
                pairs.push((parse_f64(key, e.trim())?, parse_f64(key, v.trim())?));
            }
            Ok(CouplingProfile::Tabulated(pairs))
        }
        other => Err(format!("unknown profile kind {other} for {key}")),
    }
}

fn show_profile(profile: &CouplingProfile) -> String {
    match profile {
        CouplingProfile::Flat(v) => format!("flat:{v}"),
        CouplingProfile::Lorentzian {
            center,
            width,
            peak,
        } => format!("lorentzian:{center},{width},{peak}"),
        CouplingProfile::Tabulated(pairs) => {
            let body = pairs
                .iter()
                .map(|(e, v)| format!("{e}:{v}"))
                .collect::<Vec<_>>()
                .join(",");
            format!("tabulated:{body}")
        }
    }
}

fn profile_kind(profile: &CouplingProfile) -> &'static str {
    match profile {
        CouplingProfile::Flat(_) => "flat",
        CouplingProfile::Lorentzian { .. } => "lorentzian",
        CouplingProfile::Tabulated(_) => "tabulated",
    }
}

#[derive(Parser)]
#[command(
    name = "cascade-zeno",
    version,
    about = "Decay of a three-level cascade into discretized photon continua: \
             simulation, rate fitting, and the 1/(1+N) suppression law"
)]
pub struct Cli {
    /// Worker threads for sweeps (default: config `workers`, else available cores capped at 8)
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Override one config key, repeatable (e.g. --override v10=flat:0.5)
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Run one scenario; writes <output>.traj.csv and <output>.report.txt
    Simulate { config: PathBuf },
    /// Rerun the scenario for each value of one coupling; writes <output>.sweep.csv
    Sweep {
        config: PathBuf,
        /// Coupling key to sweep
        #[arg(long, value_enum)]
        key: SweepKey,
        /// Comma-separated flat profile values
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        values: Vec<f64>,
    },
    /// Run the built-in verification battery
    Validate,
    /// Exploratory sweep over the rho0 peak width at fixed integrated weight;
    /// writes <output>.peaks.csv
    Peaks { config: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKey {
    V10,
    Rho0,
    Rho1,
    V12,
}

impl SweepKey {
    fn name(self) -> &'static str {
        match self {
            Self::V10 => "v10",
            Self::Rho0 => "rho0",
            Self::Rho1 => "rho1",
            Self::V12 => "v12",
        }
    }

    fn profile(self, cfg: &ScenarioConfig) -> &CouplingProfile {
        match self {
            Self::V10 => &cfg.v10,
            Self::Rho0 => &cfg.rho0,
            Self::Rho1 => &cfg.rho1,
            Self::V12 => &cfg.v12,
        }
    }

    fn set(self, cfg: &mut ScenarioConfig, value: f64) {
        let profile = CouplingProfile::Flat(value);
        match self {
            Self::V10 => cfg.v10 = profile,
            Self::Rho0 => cfg.rho0 = profile,
            Self::Rho1 => cfg.rho1 = profile,
            Self::V12 => cfg.v12 = profile,
        }
    }
}

/// Entry point behind `main`: parses arguments, dispatches, maps errors to
/// stderr plus exit code 1. Exit codes: 0 success, 1 failure, 2 partial
/// sweep failure (some points succeeded, some did not).
pub fn run() -> i32 {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Simulate { config } => {
            let cfg = load_config(&config, &cli.overrides)?;
            cmd_simulate(&cfg)?;
            Ok(0)
        }
        Command::Sweep {
            config,
            key,
            values,
        } => {
            let cfg = load_config(&config, &cli.overrides)?;
            let workers = effective_workers(cli.workers, &cfg);
            cmd_sweep(&cfg, key, &values, workers)
        }
        Command::Validate => Ok(cmd_validate()),
        Command::Peaks { config } => {
            let cfg = load_config(&config, &cli.overrides)?;
            let workers = effective_workers(cli.workers, &cfg);
            cmd_peaks(&cfg, workers)
        }
    }
}

fn load_config(path: &Path, overrides: &[String]) -> Result<ScenarioConfig, CliError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| CliError::ReadFile {
        path: shown.clone(),
        source,
    })?;
    let mut cfg = ScenarioConfig::parse(&text).map_err(|source| CliError::Config {
        path: shown,
        source,
    })?;
    for spec in overrides {
        cfg.apply_override(spec).map_err(|message| CliError::Override {
            spec: spec.clone(),
            message,
        })?;
    }
    Ok(cfg)
}

fn effective_workers(flag: Option<usize>, cfg: &ScenarioConfig) -> usize {
    flag.or(cfg.workers.given())
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
                .min(8)
        })
        .max(1)
}

fn parse_dt_override(value: &str) -> Result<f64, CliError> {
    let dt: f64 = value.trim().parse().map_err(|_| CliError::BadDtOverride {
        value: value.to_string(),
    })?;
    if dt > 0.0 && dt.is_finite() {
        Ok(dt)
    } else {
        Err(CliError::BadDtOverride {
            value: value.to_string(),
        })
    }
}

fn dt_override() -> Result<Option<f64>, CliError> {
    match std::env::var(DT_OVERRIDE_ENV) {
        Err(_) => Ok(None),
        Ok(value) => parse_dt_override(&value).map(Some),
    }
}

/// One fully resolved scenario run.
pub struct PointRun {
    pub report: RateReport,
    pub trajectory: Trajectory,
    pub t_max: f64,
    pub dt: f64,
    pub sample_every: usize,
}

/// Runs the scenario a config describes: resolves every `auto` control,
/// integrates, fits, and compares against the predictions.
pub fn run_point(cfg: &ScenarioConfig) -> Result<PointRun, CliError> {
    let spec = cfg.build_spec()?;
    let prediction = predict_rates(&spec);
    let rate = prediction.gamma2_modified;
    let model = build_discrete(&spec);
    let t_max = match cfg.t_max.given() {
        Some(t) => t,
        None => {
            if rate <= 0.0 {
                return Err(AnalysisError::ConstantTrajectory.into());
            }
            2.5 / rate
        }
    };
    let mut options = IntegrateOptions::default();
    let dt = match dt_override()? {
        Some(dt) => {
            options.bypass_step_limit = true;
            dt
        }
        None => match cfg.dt.given() {
            Some(dt) => dt,
            None => default_dt(&model, rate).ok_or(CliError::NoTimeScale)?,
        },
    };
    let steps = (t_max / dt).ceil().max(1.0) as usize;
    let sample_every = cfg.sample_every.given().unwrap_or((steps / 512).max(1));
    let trajectory = integrate_with(&model, t_max, dt, sample_every, &options)?;
    let window = resolve_window(cfg, rate, &trajectory)?;
    let report = compare_windowed(&spec, &trajectory, window)?;
    Ok(PointRun {
        report,
        trajectory,
        t_max,
        dt,
        sample_every,
    })
}

fn resolve_window(
    cfg: &ScenarioConfig,
    rate: f64,
    trajectory: &Trajectory,
) -> Result<Option<(f64, f64)>, CliError> {
    match (cfg.fit_lo.given(), cfg.fit_hi.given()) {
        (None, None) => Ok(None),
        (lo, hi) => {
            if rate <= 0.0 {
                return Err(AnalysisError::ConstantTrajectory.into());
            }
            let lo = lo.unwrap_or(0.5 / rate);
            let hi = hi.unwrap_or_else(|| (2.5 / rate).min(trajectory.final_time()));
            Ok(Some((lo, hi)))
        }
    }
}

fn format_field(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_file(path: &str, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content).map_err(|source| CliError::WriteFile {
        path: path.to_string(),
        source,
    })
}

fn summary_line(report: &RateReport) -> String {
    format!(
        "gamma2={:.6e} N={:.6e} predicted={:.6e} fitted={:.6e} rel_err={:.6e}",
        report.prediction.gamma2,
        report.prediction.n_factor,
        report.prediction.gamma2_modified,
        report.fit.rate,
        report.relative_error
    )
}

fn trajectory_csv(trajectory: &Trajectory) -> String {
    let mut csv = String::from("t,p2,p1,p0,norm\n");
    for i in 0..trajectory.len() {
        let row = [
            trajectory.times()[i],
            trajectory.p2()[i],
            trajectory.p1()[i],
            trajectory.p0()[i],
            trajectory.norm()[i],
        ];
        let fields: Vec<String> = row.iter().map(|&x| format_field(x)).collect();
        csv.push_str(&fields.join(","));
        csv.push('\n');
    }
    csv
}

fn report_text(cfg: &ScenarioConfig, run: &PointRun) -> String {
    let p = &run.report.prediction;
    let fit = &run.report.fit;
    let mut s = String::new();
    s.push_str("# three-level cascade decay report\n");
    s.push_str("# convention: amplitude rates, hbar=1 (populations decay at twice the rate)\n");
    s.push_str("#\n# scenario as configured (this file re-parses as a config):\n");
    s.push_str(&cfg.to_string());
    s.push_str("#\n# predictions:\n");
    let _ = writeln!(s, "# gamma2 = {}", p.gamma2);
    let _ = writeln!(s, "# n_factor = {}", p.n_factor);
    let _ = writeln!(s, "# gamma2_modified = {}", p.gamma2_modified);
    let _ = writeln!(s, "# gamma1_estimate = {}", p.gamma1_estimate);
    let _ = writeln!(s, "# beyond_proved_regime = {}", run.report.beyond_proved_regime);
    s.push_str("#\n# fit:\n");
    let _ = writeln!(s, "# fitted_rate = {}", fit.rate);
    let _ = writeln!(s, "# rate_std_error = {}", fit.rate_std_error());
    let _ = writeln!(s, "# fit_window_lo = {}", fit.window.0);
    let _ = writeln!(s, "# fit_window_hi = {}", fit.window.1);
    let _ = writeln!(s, "# fit_points = {}", fit.n_points);
    let _ = writeln!(s, "# r_squared = {}", fit.r_squared);
    let _ = writeln!(s, "# residual_rms = {}", fit.residual_rms);
    let _ = writeln!(s, "# relative_error = {}", run.report.relative_error);
    s.push_str("#\n# run diagnostics:\n");
    let _ = writeln!(s, "# recurrence_time = {}", run.report.recurrence_time);
    let _ = writeln!(s, "# grid1_count = {}", run.report.grid1_count);
    let _ = writeln!(s, "# grid0_count = {}", run.report.grid0_count);
    let _ = writeln!(s, "# norm_drift = {}", run.trajectory.max_norm_drift());
    let _ = writeln!(
        s,
        "# resolved controls: t_max = {}, dt = {}, sample_every = {}",
        run.t_max, run.dt, run.sample_every
    );
    let _ = writeln!(s, "# summary: {}", summary_line(&run.report));
    s
}

/// Runs one scenario and writes `<output>.traj.csv` plus
/// `<output>.report.txt`, printing the one-line summary to stdout.
pub fn cmd_simulate(cfg: &ScenarioConfig) -> Result<(), CliError> {
    let run = run_point(cfg)?;
    write_file(&format!("{}.traj.csv", cfg.output), &trajectory_csv(&run.trajectory))?;
    write_file(&format!("{}.report.txt", cfg.output), &report_text(cfg, &run))?;
    println!("{}", summary_line(&run.report));
    Ok(())
}

struct PointRow {
    value: f64,
    width: Option<f64>,
    prediction: Option<RatePrediction>,
    fit: Option<(f64, f64, f64)>,
    error: Option<String>,
}

fn render_row(row: &PointRow) -> String {
    let mut fields = vec![format_field(row.value)];
    match &row.prediction {
        Some(p) => fields.extend([
            format_field(p.n_factor),
            format_field(p.gamma2),
            format_field(p.gamma2_modified),
        ]),
        None => fields.extend([String::new(), String::new(), String::new()]),
    }
    match row.fit {
        Some((rate, rel_err, r_squared)) => fields.extend([
            format_field(rate),
            format_field(rel_err),
            format_field(r_squared),
        ]),
        None => fields.extend([String::new(), String::new(), String::new()]),
    }
    if let Some(w) = row.width {
        fields.push(format_field(w));
    }
    fields.join(",")
}

fn run_parallel<T: Send, F: Fn(usize) -> T + Sync>(jobs: usize, workers: usize, job: F) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, T)>();
    let mut slots: Vec<Option<T>> = Vec::new();
    slots.resize_with(jobs, || None);
    std::thread::scope(|scope| {
        for _ in 0..workers.min(jobs).max(1) {
            let tx = tx.clone();
            let (next, job) = (&next, &job);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs {
                    break;
                }
                if tx.send((i, job(i))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, value) in rx {
            slots[i] = Some(value);
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("each job sends exactly one result"))
        .collect()
}

fn run_point_row(cfg: ScenarioConfig, value: f64, width: Option<f64>) -> PointRow {
    let prediction = match cfg.build_spec() {
        Ok(spec) => predict_rates(&spec),
        Err(e) => {
            return PointRow {
                value,
                width,
                prediction: None,
                fit: None,
                error: Some(e.to_string()),
            }
        }
    };
    match run_point(&cfg) {
        Ok(run) => PointRow {
            value,
            width,
            prediction: Some(prediction),
            fit: Some((
                run.report.fit.rate,
                run.report.relative_error,
                run.report.fit.r_squared,
            )),
            error: None,
        },
        Err(e) => PointRow {
            value,
            width,
            prediction: Some(prediction),
            fit: None,
            error: Some(e.to_string()),
        },
    }
}

fn emit_rows(
    header: &str,
    rows: &[PointRow],
    path: &str,
    label: &str,
) -> Result<i32, CliError> {
    let mut csv = String::from(header);
    for row in rows {
        csv.push_str(&render_row(row));
        csv.push('\n');
    }
    write_file(path, &csv)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    for row in rows.iter().filter(|r| r.error.is_some()) {
        let reason = row.error.as_deref().unwrap_or("unknown");
        eprintln!("{label} point {}: {reason}", row.value);
    }
    println!(
        "{label}: {} of {} points ok, results in {path}",
        rows.len() - failed,
        rows.len()
    );
    Ok(if failed == 0 {
        0
    } else if failed < rows.len() {
        2
    } else {
        1
    })
}

/// Reruns the scenario once per value, replacing the swept coupling with a
/// flat profile of that value, up to `workers` points concurrently. Rows
/// come out ordered by sweep value regardless of completion order; failed
/// points keep their row with the fitted fields left empty. Returns the
/// process exit code (0 all ok, 2 partial, 1 total failure).
pub fn cmd_sweep(
    cfg: &ScenarioConfig,
    key: SweepKey,
    values: &[f64],
    workers: usize,
) -> Result<i32, CliError> {
    if values.len() < 2 {
        return Err(CliError::TooFewSweepValues { got: values.len() });
    }
    if !key.profile(cfg).is_flat() {
        return Err(CliError::SweepNeedsFlat {
            key: key.name(),
            found: profile_kind(key.profile(cfg)),
        });
    }
    let mut values = values.to_vec();
    values.sort_by(f64::total_cmp);
    let rows = run_parallel(values.len(), workers, |i| {
        let mut point = cfg.clone();
        key.set(&mut point, values[i]);
        run_point_row(point, values[i], None)
    });
    emit_rows(
        "sweep_value,n_factor,gamma2,predicted_rate,fitted_rate,rel_err,r_squared\n",
        &rows,
        &format!("{}.sweep.csv", cfg.output),
        "sweep",
    )
}

/// Exploratory narrow-peak study: reruns the scenario once per entry of
/// `peak_widths`, reshaping the Lorentzian rho0 to that width while holding
/// its integrated weight at `peak_weight` (peak height = weight/(π·width)).
/// Same output contract as [`cmd_sweep`] plus a trailing peak_width column;
/// the header marks the whole artifact exploratory because no closed-form
/// prediction covers narrow peaks, so trends are recorded, not asserted.
pub fn cmd_peaks(cfg: &ScenarioConfig, workers: usize) -> Result<i32, CliError> {
    let center = match cfg.rho0 {
        CouplingProfile::Lorentzian { center, .. } => center,
        ref other => {
            return Err(CliError::PeaksNeedsLorentzian {
                found: profile_kind(other),
            })
        }
    };
    if cfg.peak_widths.is_empty() {
        return Err(CliError::PeaksNeedsWidths);
    }
    if let Some(&bad) = cfg
        .peak_widths
        .iter()
        .find(|w| !(**w > 0.0 && w.is_finite()))
    {
        return Err(CliError::BadPeakWidth { value: bad });
    }
    if !(cfg.peak_weight >= 0.0 && cfg.peak_weight.is_finite()) {
        return Err(CliError::BadPeakWeight {
            value: cfg.peak_weight,
        });
    }
    let mut points: Vec<(f64, f64)> = cfg
        .peak_widths
        .iter()
        .map(|&width| (width, cfg.peak_weight / (std::f64::consts::PI * width)))
        .collect();
    points.sort_by(|a, b| a.1.total_cmp(&b.1));
    let rows = run_parallel(points.len(), workers, |i| {
        let (width, peak) = points[i];
        let mut point = cfg.clone();
        point.rho0 = CouplingProfile::Lorentzian {
            center,
            width,
            peak,
        };
        run_point_row(point, peak, Some(width))
    });
    emit_rows(
        "# EXPLORATORY: rho0 peak-width sweep at fixed integrated weight; trends recorded, not asserted\n\
         sweep_value,n_factor,gamma2,predicted_rate,fitted_rate,rel_err,r_squared,peak_width\n",
        &rows,
        &format!("{}.peaks.csv", cfg.output),
        "peaks",
    )
}

struct ValidationItem {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn fail(name: &'static str, detail: String) -> ValidationItem {
    ValidationItem {
        name,
        passed: false,
        detail,
    }
}

fn unitarity_item() -> ValidationItem {
    let name = "unitarity";
    let spec = scenarios::flat(0.05, 1.0, 300, 300, 0.5).expect("reference scenario is valid");
    let model = build_discrete(&spec);
    let mut options = IntegrateOptions::default();
    let mut dt = match default_dt(&model, predict_rates(&spec).gamma2_modified) {
        Some(dt) => dt,
        None => return fail(name, "no automatic step".to_string()),
    };
    match dt_override() {
        Ok(Some(forced)) => {
            dt = forced;
            options.bypass_step_limit = true;
        }
        Ok(None) => {}
        Err(e) => return fail(name, e.to_string()),
    }
    match integrate_with(&model, 20.0, dt, 10, &options) {
        Ok(traj) => {
            let drift = traj.max_norm_drift();
            ValidationItem {
                name,
                passed: drift <= 1e-6,
                detail: format!("max |norm-1| = {drift:.2e} at dt = {dt} (tolerance 1e-6)"),
            }
        }
        Err(e) => fail(name, e.to_string()),
    }
}

fn rabi_item() -> ValidationItem {
    let name = "rabi-pair";
    let omega = 0.1;
    match integrate(&scenarios::rabi_pair(omega), 10.0 / omega, 0.01, 10) {
        Ok(traj) => {
            let dev = traj
                .times()
                .iter()
                .zip(traj.p2())
                .map(|(&t, &p2)| (p2 - (omega * t).cos().powi(2)).abs())
                .fold(0.0, f64::max);
            ValidationItem {
                name,
                passed: dev <= 1e-8,
                detail: format!("max |p2 - cos^2(omega t)| = {dev:.2e} (tolerance 1e-8)"),
            }
        }
        Err(e) => fail(name, e.to_string()),
    }
}

fn golden_rule_item() -> ValidationItem {
    let name = "golden-rule";
    let spec = scenarios::flat(0.05, 1.0, 1000, 2, 0.0).expect("reference scenario is valid");
    match run_and_compare(&spec) {
        Ok(report) => ValidationItem {
            name,
            passed: report.relative_error <= 0.05,
            detail: format!(
                "fitted {:.6e} vs gamma2 = {:.6e}, rel_err = {:.2e} (tolerance 5e-2)",
                report.fit.rate, report.prediction.gamma2, report.relative_error
            ),
        },
        Err(e) => fail(name, e.to_string()),
    }
}

fn term_ratio_item() -> ValidationItem {
    let name = "term-ratio";
    let spec = scenarios::flat(0.05, 1.0, 800, 800, 0.25).expect("reference scenario is valid");
    let ratio = match neumann_term_ratio(&build_discrete(&spec), 0.04, 1, 20.0) {
        Ok(r) => r,
        Err(e) => return fail(name, e.to_string()),
    };
    let target = Complex64::new(-0.25, 0.0);
    let rel = (ratio - target).norm() / target.norm();
    let zero_spec = scenarios::flat(0.05, 1.0, 200, 2, 0.0).expect("reference scenario is valid");
    let zero = match neumann_term_ratio(&build_discrete(&zero_spec), 0.05, 1, 20.0) {
        Ok(r) => r,
        Err(e) => return fail(name, e.to_string()),
    };
    ValidationItem {
        name,
        passed: rel <= 0.05 && zero.norm() == 0.0,
        detail: format!(
            "first-order ratio {:.4}{:+.4}i vs -N = -0.25, rel dev {rel:.2e} (tolerance 5e-2); \
             v10=0 ratio magnitude {:.1e}",
            ratio.re,
            ratio.im,
            zero.norm()
        ),
    }
}

fn triangle_item() -> ValidationItem {
    let name = "triangle";
    let spec = scenarios::flat(0.05, 1.0, 800, 800, 0.5).expect("reference scenario is valid");
    let predicted = predict_rates(&spec).gamma2_modified;
    let resummed = match resummed_rate(&build_discrete(&spec), 3) {
        Ok(r) => r,
        Err(e) => return fail(name, e.to_string()),
    };
    let fitted = match run_and_compare(&spec) {
        Ok(report) => report.fit.rate,
        Err(e) => return fail(name, e.to_string()),
    };
    let rel = |a: f64, b: f64| (a - b).abs() / (0.5 * (a + b));
    let worst = rel(resummed, predicted)
        .max(rel(resummed, fitted))
        .max(rel(predicted, fitted));
    ValidationItem {
        name,
        passed: worst <= 0.10,
        detail: format!(
            "resummed {resummed:.6e}, predicted {predicted:.6e}, fitted {fitted:.6e}, \
             worst pairwise dev {worst:.2e} (tolerance 1e-1)"
        ),
    }
}

/// Runs the built-in verification battery and prints one pass/FAIL line per
/// item. Returns the process exit code: 0 when every item passes, 1
/// otherwise. The step override environment variable applies to the
/// unitarity item only, which is how its failure mode is demonstrated.
pub fn cmd_validate() -> i32 {
    let items = [
        unitarity_item(),
        rabi_item(),
        golden_rule_item(),
        term_ratio_item(),
        triangle_item(),
    ];
    let mut passed = 0;
    for item in &items {
        let tag = if item.passed { "pass" } else { "FAIL" };
        println!("{tag}  {}: {}", item.name, item.detail);
        if item.passed {
            passed += 1;
        }
    }
    println!("validation: {passed}/{} items passed", items.len());
    if passed == items.len() {
        0
    } else {
        1
    }
}
