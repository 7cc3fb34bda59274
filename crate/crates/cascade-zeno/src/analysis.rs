//! Rate extraction from trajectories and assembly of the
//! prediction-versus-simulation comparison.
//!
//! All reported rates are amplitude rates: the population fit measures the
//! slope of ln p₂ and halves it exactly once, here.

use crate::discretize::build_discrete;
use crate::dynamics::{default_dt, integrate, DynamicsError, Trajectory};
use crate::model::{predict_rates, CascadeSpec, RatePrediction};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("fit window ({t_lo}, {t_hi}) is not an increasing finite pair")]
    BadWindow { t_lo: f64, t_hi: f64 },
    #[error("fit window ({t_lo}, {t_hi}) holds {found} samples, at least 3 are needed")]
    EmptyWindow { t_lo: f64, t_hi: f64, found: usize },
    #[error("survival probability is not positive at t = {t}, its logarithm is undefined")]
    NonPositiveSurvival { t: f64 },
    #[error(
        "window is not exponential decay: r² = {r_squared:.6} < 0.99 \
         (fitted rate {rate:.6e}, residual rms {residual_rms:.2e})"
    )]
    NonExponential {
        r_squared: f64,
        rate: f64,
        residual_rms: f64,
    },
    #[error("constant trajectory: the predicted rate is zero, no fit window exists")]
    ConstantTrajectory,
    #[error("a convergence study needs at least 2 refinement steps, got {refinements}")]
    TooFewRefinements { refinements: usize },
    #[error("no time step can be inferred for this scenario, neither detuning nor rate sets a scale")]
    CannotInferStep,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Least-squares decay fit over one time window. `rate` is the amplitude
/// rate: p₂ ≈ e^{−2·rate·t} over the window.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub rate: f64,
    /// Span actually covered by the fitted samples.
    pub window: (f64, f64),
    pub r_squared: f64,
    pub residual_rms: f64,
    pub n_points: usize,
}

impl FitResult {
    /// Standard error of the amplitude rate from the residual spread,
    /// assuming the window was sampled uniformly.
    pub fn rate_std_error(&self) -> f64 {
        let n = self.n_points as f64;
        if self.n_points < 3 || self.window.1 <= self.window.0 {
            return f64::INFINITY;
        }
        let d = (self.window.1 - self.window.0) / (n - 1.0);
        let sxx = d * d * n * (n * n - 1.0) / 12.0;
        let sigma = self.residual_rms * (n / (n - 2.0)).sqrt();
        0.5 * sigma / sxx.sqrt()
    }
}

/// One scenario's predictions, fitted rate, and surrounding diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub prediction: RatePrediction,
    pub fit: FitResult,
    /// |fitted − predicted| / predicted for the modified rate Γ₂.
    pub relative_error: f64,
    /// Set on the last report of a convergence study when the final two
    /// fitted rates agree within 1%.
    pub convergence_flag: bool,
    /// N > 1: outside the regime where the 1/(1+N) law is derived.
    pub beyond_proved_regime: bool,
    pub recurrence_time: f64,
    pub grid1_count: usize,
    pub grid0_count: usize,
}

/// Fits ln p₂ over `window` by unweighted least squares and reports the
/// amplitude rate −slope/2. The window is intersected with the sampled
/// span; a window of constant samples is a zero-rate fit, not an error.
pub fn fit_decay_rate(traj: &Trajectory, window: (f64, f64)) -> Result<FitResult, AnalysisError> {
    let (t_lo, t_hi) = window;
    if !(t_lo.is_finite() && t_hi.is_finite() && t_lo < t_hi) {
        return Err(AnalysisError::BadWindow { t_lo, t_hi });
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&t, &p2) in traj.times().iter().zip(traj.p2()) {
        if t < t_lo || t > t_hi {
            continue;
        }
        if p2 <= 0.0 {
            return Err(AnalysisError::NonPositiveSurvival { t });
        }
        xs.push(t);
        ys.push(p2.ln());
    }
    let n = xs.len();
    if n < 3 {
        return Err(AnalysisError::EmptyWindow {
            t_lo,
            t_hi,
            found: n,
        });
    }
    let span = (xs[0], xs[n - 1]);
    let x_mean = xs.iter().sum::<f64>() / n as f64;
    let y_mean = ys.iter().sum::<f64>() / n as f64;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(&ys) {
        sxx += (x - x_mean) * (x - x_mean);
        sxy += (x - x_mean) * (y - y_mean);
        syy += (y - y_mean) * (y - y_mean);
    }
    if syy <= 1e-20 {
        return Ok(FitResult {
            rate: 0.0,
            window: span,
            r_squared: 1.0,
            residual_rms: 0.0,
            n_points: n,
        });
    }
    let slope = sxy / sxx;
    let rate = -0.5 * slope;
    let mut ssr = 0.0;
    for (&x, &y) in xs.iter().zip(&ys) {
        let r = y - (y_mean + slope * (x - x_mean));
        ssr += r * r;
    }
    let r_squared = 1.0 - ssr / syy;
    let residual_rms = (ssr / n as f64).sqrt();
    if r_squared < 0.99 || rate < 0.0 {
        return Err(AnalysisError::NonExponential {
            r_squared,
            rate,
            residual_rms,
        });
    }
    Ok(FitResult {
        rate,
        window: span,
        r_squared,
        residual_rms,
        n_points: n,
    })
}

/// [`compare_windowed`] with the default window 0.5/Γ₂ ≤ t ≤ 2.5/Γ₂
/// (capped by half the recurrence time and by the trajectory end).
pub fn compare(spec: &CascadeSpec, traj: &Trajectory) -> Result<RateReport, AnalysisError> {
    compare_windowed(spec, traj, None)
}

/// Fits `traj` and assembles the full report against the predictions for
/// `spec`: rates, relative error, recurrence metadata, and the
/// beyond-proved-regime marker for N > 1.
pub fn compare_windowed(
    spec: &CascadeSpec,
    traj: &Trajectory,
    window: Option<(f64, f64)>,
) -> Result<RateReport, AnalysisError> {
    let prediction = predict_rates(spec);
    if prediction.gamma2_modified <= 0.0 {
        return Err(AnalysisError::ConstantTrajectory);
    }
    let recurrence_time =
        2.0 * std::f64::consts::PI / spec.grid1.spacing().min(spec.grid0.spacing());
    let window = match window {
        Some(w) => w,
        None => {
            let rate = prediction.gamma2_modified;
            let t_lo = 0.5 / rate;
            let t_hi = (2.5 / rate)
                .min(0.5 * recurrence_time)
                .min(traj.final_time());
            if t_hi <= t_lo {
                return Err(AnalysisError::BadWindow { t_lo, t_hi });
            }
            (t_lo, t_hi)
        }
    };
    let fit = fit_decay_rate(traj, window)?;
    let relative_error = (fit.rate - prediction.gamma2_modified).abs() / prediction.gamma2_modified;
    Ok(RateReport {
        prediction,
        fit,
        relative_error,
        convergence_flag: false,
        beyond_proved_regime: prediction.n_factor > 1.0,
        recurrence_time,
        grid1_count: spec.grid1.count(),
        grid0_count: spec.grid0.count(),
    })
}

/// The rough intermediate-level rate estimate N·Γ₂ carried by the report's
/// prediction. An estimate, not a fit: the trajectory is not consulted.
pub fn estimate_gamma1(report: &RateReport) -> f64 {
    report.prediction.gamma1_estimate
}

/// Runs the scenario at successive grid doublings (`refinements` runs in
/// total, the first at the counts given in `spec`), comparing each against
/// the predictions. The final report's `convergence_flag` is set when the
/// last two fitted rates agree within 1%.
pub fn convergence_study(
    spec: &CascadeSpec,
    refinements: usize,
) -> Result<Vec<RateReport>, AnalysisError> {
    if refinements < 2 {
        return Err(AnalysisError::TooFewRefinements { refinements });
    }
    let mut current = spec.clone();
    let mut reports = Vec::with_capacity(refinements);
    for step in 0..refinements {
        if step > 0 {
            current = CascadeSpec::new(
                current.e2,
                current.grid1.refined(2).expect("doubling keeps the grid valid"),
                current.grid0.refined(2).expect("doubling keeps the grid valid"),
                current.rho1.clone(),
                current.rho0.clone(),
                current.v12.clone(),
                current.v10.clone(),
            )
            .expect("refining grids preserves spec validity");
        }
        reports.push(run_and_compare(&current)?);
    }
    let last = reports.len() - 1;
    let (prev, fin) = (reports[last - 1].fit.rate, reports[last].fit.rate);
    if (fin - prev).abs() < 0.01 * fin.abs() {
        reports[last].convergence_flag = true;
    }
    Ok(reports)
}

/// Runs `spec` end to end with automatic choices everywhere: step from
/// [`default_dt`], horizon 2.5/Γ₂, roughly 512 samples, default fit window.
pub fn run_and_compare(spec: &CascadeSpec) -> Result<RateReport, AnalysisError> {
    let prediction = predict_rates(spec);
    let rate = prediction.gamma2_modified;
    if rate <= 0.0 {
        return Err(AnalysisError::ConstantTrajectory);
    }
    let model = build_discrete(spec);
    let t_max = 2.5 / rate;
    let dt = default_dt(&model, rate).ok_or(AnalysisError::CannotInferStep)?;
    let steps = (t_max / dt).ceil() as usize;
    let sample_every = (steps / 512).max(1);
    let traj = integrate(&model, t_max, dt, sample_every)?;
    compare(spec, &traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CouplingProfile, EnergyGrid};
    use std::f64::consts::PI;

    fn flat_spec(gamma2: f64, halfwidth: f64, n1: usize, n0: usize, n_factor: f64) -> CascadeSpec {
        CascadeSpec::new(
            0.0,
            EnergyGrid::new(0.0, halfwidth, n1).unwrap(),
            EnergyGrid::new(0.0, halfwidth, n0).unwrap(),
            CouplingProfile::Flat(1.0 / PI),
            CouplingProfile::Flat(1.0 / PI),
            CouplingProfile::Flat(gamma2.sqrt()),
            CouplingProfile::Flat(n_factor.sqrt()),
        )
        .unwrap()
    }

    fn synthetic(times: Vec<f64>, p2: Vec<f64>) -> Trajectory {
        let n = times.len();
        let p1 = p2.iter().map(|p| 1.0 - p).collect();
        let norm = vec![1.0; n];
        Trajectory::from_samples(times, p2, p1, vec![0.0; n], norm).unwrap()
    }

    #[test]
    fn exact_exponential_recovers_rate() {
        let times: Vec<f64> = (0..=200).map(|i| 0.25 * i as f64).collect();
        let p2 = times.iter().map(|t| (-0.2 * t).exp()).collect();
        let fit = fit_decay_rate(&synthetic(times, p2), (2.0, 40.0)).unwrap();
        assert!((fit.rate - 0.1).abs() <= 1e-10);
        assert!(fit.r_squared >= 1.0 - 1e-12);
        assert!(fit.residual_rms <= 1e-12);
        assert_eq!(fit.window, (2.0, 40.0));
        assert_eq!(fit.n_points, 153);
        assert!(fit.rate_std_error() <= 1e-12);
    }

    #[test]
    fn constant_input_is_a_zero_rate_fit() {
        let times: Vec<f64> = (0..=50).map(|i| 0.5 * i as f64).collect();
        let p2 = vec![1.0; times.len()];
        let fit = fit_decay_rate(&synthetic(times, p2), (0.0, 25.0)).unwrap();
        assert_eq!(fit.rate, 0.0);
        assert_eq!(fit.r_squared, 1.0);
        assert_eq!(fit.residual_rms, 0.0);
    }

    #[test]
    fn curved_decay_is_rejected_with_diagnostics() {
        let times: Vec<f64> = (0..=100).map(|i| 0.1 * i as f64).collect();
        let p2 = times.iter().map(|t| (-0.1 * t * t).exp()).collect();
        match fit_decay_rate(&synthetic(times, p2), (0.0, 10.0)).unwrap_err() {
            AnalysisError::NonExponential {
                r_squared,
                rate,
                residual_rms,
            } => {
                // a pure quadratic in ln p2 correlates with t at r² = 15/16
                assert!((r_squared - 0.9375).abs() < 0.01);
                assert!(rate > 0.0);
                assert!(residual_rms > 0.0);
            }
            other => panic!("expected NonExponential, got {other:?}"),
        }
    }

    #[test]
    fn growing_survival_is_rejected() {
        let times: Vec<f64> = (0..=50).map(|i| 0.5 * i as f64).collect();
        let p2 = times.iter().map(|t| 0.01 * (0.1 * t).exp()).collect();
        assert!(matches!(
            fit_decay_rate(&synthetic(times, p2), (0.0, 25.0)).unwrap_err(),
            AnalysisError::NonExponential { .. }
        ));
    }

    #[test]
    fn nonpositive_survival_is_rejected() {
        let traj = synthetic(vec![0.0, 1.0, 2.0, 3.0], vec![1.0, 0.5, 0.0, 0.5]);
        assert_eq!(
            fit_decay_rate(&traj, (0.0, 3.0)).unwrap_err(),
            AnalysisError::NonPositiveSurvival { t: 2.0 }
        );
    }

    #[test]
    fn window_must_be_sane_and_populated() {
        let times: Vec<f64> = (0..=50).map(|i| 0.5 * i as f64).collect();
        let p2: Vec<f64> = times.iter().map(|t| (-0.2 * t).exp()).collect();
        let traj = synthetic(times, p2);
        assert_eq!(
            fit_decay_rate(&traj, (5.0, 5.0)).unwrap_err(),
            AnalysisError::BadWindow {
                t_lo: 5.0,
                t_hi: 5.0
            }
        );
        assert_eq!(
            fit_decay_rate(&traj, (100.0, 200.0)).unwrap_err(),
            AnalysisError::EmptyWindow {
                t_lo: 100.0,
                t_hi: 200.0,
                found: 0
            }
        );
    }

    #[test]
    fn compare_recovers_the_golden_rule() {
        let gamma2 = 0.05;
        let spec = flat_spec(gamma2, 1.0, 1000, 2, 0.0);
        let report = run_and_compare(&spec).unwrap();
        assert!(report.relative_error <= 0.05, "rel {:.4}", report.relative_error);
        assert!(!report.beyond_proved_regime);
        assert!(!report.prediction.n_warning);
        assert!((report.recurrence_time - 2.0 * PI / 0.002).abs() < 1e-9);
        assert_eq!((report.grid1_count, report.grid0_count), (1000, 2));
        assert_eq!(estimate_gamma1(&report), 0.0);
    }

    #[test]
    fn compare_flags_constant_trajectory() {
        let spec = flat_spec(0.0, 1.0, 6, 4, 0.0);
        let model = build_discrete(&spec);
        let traj = integrate(&model, 5.0, 0.05, 10).unwrap();
        let err = compare(&spec, &traj).unwrap_err();
        assert_eq!(err, AnalysisError::ConstantTrajectory);
        assert!(err.to_string().contains("constant trajectory"));
    }

    #[test]
    fn window_shift_stays_within_rate_uncertainty() {
        let gamma2 = 0.05;
        let spec = flat_spec(gamma2, 1.0, 1000, 2, 0.0);
        let model = build_discrete(&spec);
        let traj = integrate(&model, 2.6 / gamma2, 0.05, 10).unwrap();
        let (lo, hi) = (0.5 / gamma2, 2.5 / gamma2);
        let shift = 0.2 * (hi - lo);
        let base = fit_decay_rate(&traj, (lo, hi)).unwrap();
        let up = fit_decay_rate(&traj, (lo + shift, hi + shift)).unwrap();
        let down = fit_decay_rate(&traj, (lo - shift, hi - shift)).unwrap();
        let se = base.rate_std_error();
        assert!((up.rate - base.rate).abs() < se, "up {:e} vs se {se:e}", (up.rate - base.rate).abs());
        assert!((down.rate - base.rate).abs() < se, "down {:e} vs se {se:e}", (down.rate - base.rate).abs());
    }

    #[test]
    fn estimate_gamma1_follows_the_prediction() {
        let report = |spec: &CascadeSpec| run_and_compare(spec).unwrap();
        let r = report(&flat_spec(0.05, 1.0, 100, 2, 0.0));
        assert_eq!(estimate_gamma1(&r), 0.0);
        let p = predict_rates(&flat_spec(1.0, 30.0, 100, 100, 1.0));
        assert!((p.gamma2_modified - 0.5).abs() < 1e-15);
        assert!((p.n_factor * p.gamma2_modified - 0.5).abs() < 1e-15);
        let p = predict_rates(&flat_spec(1.0, 30.0, 100, 100, 0.25));
        assert!((p.gamma1_estimate - 0.2).abs() < 1e-15);
    }

    #[test]
    fn convergence_study_flags_agreement_and_doubles_recurrence() {
        let spec = flat_spec(0.05, 1.0, 50, 2, 0.0);
        let reports = convergence_study(&spec, 2).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!((reports[0].grid1_count, reports[1].grid1_count), (50, 100));
        assert!(!reports[0].convergence_flag);
        assert!(reports[1].convergence_flag);
        assert!(
            (reports[1].recurrence_time - 2.0 * reports[0].recurrence_time).abs()
                < 1e-9 * reports[0].recurrence_time
        );
        for r in &reports {
            assert!(r.relative_error <= 0.05);
        }
    }

    #[test]
    fn convergence_study_propagates_degenerate_scenarios() {
        let spec = flat_spec(0.0, 1.0, 50, 2, 0.0);
        assert_eq!(
            convergence_study(&spec, 2).unwrap_err(),
            AnalysisError::ConstantTrajectory
        );
        assert_eq!(
            convergence_study(&flat_spec(0.05, 1.0, 50, 2, 0.0), 1).unwrap_err(),
            AnalysisError::TooFewRefinements { refinements: 1 }
        );
    }
}
