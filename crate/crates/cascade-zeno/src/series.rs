//! Semi-analytic layer: the stable-level closed form, the nested integral
//! operators of the cascade, and the geometric resummation of the decay
//! rate.
//!
//! Everything here works on a shared uniform time sub-grid fine enough to
//! resolve the fastest coupling phase. Operator chains are evaluated
//! innermost-first with each intermediate band function kept sampled on the
//! whole sub-grid, so a chain of depth n costs n quadrature passes instead
//! of exponentially many.

use crate::discretize::DiscreteModel;
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SeriesError {
    #[error("time sub-grid needs at least 20 points per fastest phase period, got {points_per_period}")]
    SubGridTooCoarse { points_per_period: usize },
    #[error("sub-grid horizon must be positive and finite, got {t_end}")]
    BadHorizon { t_end: f64 },
    #[error("function has {got} components where the {expected} of the channel are required")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sampled function has {got} time samples, sub-grid has {expected}")]
    GridMismatch { expected: usize, got: usize },
    #[error("closed form requires a stable intermediate level (flat v10 = 0)")]
    StableLevelRequired,
    #[error("rate must be positive and finite, got {rate}")]
    BadRate { rate: f64 },
    #[error("term order must be at least 1")]
    BadOrder,
    #[error("series term of order {order} is below the numerical floor, its ratio is noise")]
    TermUnderflow { order: usize },
    #[error("term ratio magnitude {ratio} is not below 1, the series does not resum geometrically")]
    SeriesDiverging { ratio: f64 },
    #[error("rate iteration did not settle after {iterations} rounds")]
    NonConvergence { iterations: usize },
    #[error("band 1 needs at least 2 modes to estimate its level density")]
    ModelTooSmall,
}

/// Phase-dressed integral channels of the cascade. Each is −i∫₀ᵗ V(τ)·f(τ)dτ
/// with V the corresponding coupling block: `I12` feeds the level-2
/// amplitude into band 1, `I01` band 1 into band 0, `I10` band 0 back into
/// band 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    I12,
    I01,
    I10,
}

/// Uniform quadrature sub-grid on [0, t_end] with an even interval count,
/// as composite Simpson requires.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    t_end: f64,
    n_intervals: usize,
    h: f64,
}

impl TimeGrid {
    pub const DEFAULT_POINTS_PER_PERIOD: usize = 24;
    const MIN_POINTS_PER_PERIOD: usize = 20;
    const MIN_INTERVALS: usize = 64;

    /// Grid with an explicit interval count (odd counts round up to even).
    pub fn with_intervals(t_end: f64, n_intervals: usize) -> Result<Self, SeriesError> {
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(SeriesError::BadHorizon { t_end });
        }
        let n = (n_intervals.max(2) + 1) & !1;
        Ok(Self {
            t_end,
            n_intervals: n,
            h: t_end / n as f64,
        })
    }

    /// Grid sized for `model`: at least `points_per_period` samples per
    /// period of the fastest phase appearing in any channel (within-band
    /// detunings from the level and cross-band mode differences).
    pub fn for_model(
        model: &DiscreteModel,
        t_end: f64,
        points_per_period: usize,
    ) -> Result<Self, SeriesError> {
        if points_per_period < Self::MIN_POINTS_PER_PERIOD {
            return Err(SeriesError::SubGridTooCoarse { points_per_period });
        }
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(SeriesError::BadHorizon { t_end });
        }
        let mut omega: f64 = model
            .band1_energies()
            .iter()
            .map(|e| (e - model.e2()).abs())
            .fold(0.0, f64::max);
        if model.n1() > 0 && model.n0() > 0 {
            let (e1_lo, e1_hi) = (model.band1_energies()[0], model.band1_energies()[model.n1() - 1]);
            let (e0_lo, e0_hi) = (model.band0_energies()[0], model.band0_energies()[model.n0() - 1]);
            omega = omega.max((e1_hi - e0_lo).abs()).max((e0_hi - e1_lo).abs());
        }
        let mut n = Self::MIN_INTERVALS;
        if omega > 0.0 {
            let h_target = 2.0 * std::f64::consts::PI / omega / points_per_period as f64;
            n = n.max((t_end / h_target).ceil() as usize);
        }
        Self::with_intervals(t_end, n)
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn n_intervals(&self) -> usize {
        self.n_intervals
    }

    /// Number of samples, n_intervals + 1.
    pub fn len(&self) -> usize {
        self.n_intervals + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, m: usize) -> f64 {
        m as f64 * self.h
    }
}

/// One or more complex components sampled on every instant of a [`TimeGrid`],
/// stored component-major so each component's time series is contiguous.
#[derive(Debug, Clone)]
pub struct SampledFunction {
    components: usize,
    n_times: usize,
    values: Vec<Complex64>,
}

impl SampledFunction {
    /// Samples a scalar (single-component) function on the grid.
    pub fn scalar(grid: &TimeGrid, f: impl Fn(f64) -> Complex64) -> Self {
        Self {
            components: 1,
            n_times: grid.len(),
            values: (0..grid.len()).map(|m| f(grid.time(m))).collect(),
        }
    }

    fn zeros(components: usize, n_times: usize) -> Self {
        Self {
            components,
            n_times,
            values: vec![Complex64::new(0.0, 0.0); components * n_times],
        }
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    /// Time series of component `c`.
    pub fn component(&self, c: usize) -> &[Complex64] {
        &self.values[c * self.n_times..(c + 1) * self.n_times]
    }

    fn component_mut(&mut self, c: usize) -> &mut [Complex64] {
        &mut self.values[c * self.n_times..(c + 1) * self.n_times]
    }

    /// All components frozen at sample index `m`.
    pub fn band_at(&self, grid: &TimeGrid, m: usize) -> BandFunction {
        BandFunction {
            values: (0..self.components).map(|c| self.component(c)[m]).collect(),
            t: grid.time(m),
        }
    }
}

/// Complex value per mode of one band at a single instant.
#[derive(Debug, Clone, PartialEq)]
pub struct BandFunction {
    pub values: Vec<Complex64>,
    pub t: f64,
}

impl BandFunction {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Cumulative composite Simpson of uniformly sampled `f` (even interval
/// count): even-index entries by the classic pair rule, odd-index entries
/// by the asymmetric half-pair correction.
fn cumulative_simpson(f: &[Complex64], h: f64) -> Vec<Complex64> {
    debug_assert!(f.len() >= 3 && f.len() % 2 == 1);
    let mut out = vec![Complex64::new(0.0, 0.0); f.len()];
    let mut m = 2;
    while m < f.len() {
        out[m] = out[m - 2] + h / 3.0 * (f[m - 2] + 4.0 * f[m - 1] + f[m]);
        m += 2;
    }
    let mut m = 1;
    while m < f.len() {
        out[m] = out[m - 1] + h / 12.0 * (5.0 * f[m - 1] + 8.0 * f[m] - f[m + 1]);
        m += 2;
    }
    out
}

/// Per-mode phase tables e^{+i·e·τ} shared by all channel applications on
/// one grid.
struct Workspace<'a> {
    model: &'a DiscreteModel,
    grid: &'a TimeGrid,
    p1: Vec<Complex64>,
    p0: Vec<Complex64>,
    c2: Vec<Complex64>,
}

impl<'a> Workspace<'a> {
    fn new(model: &'a DiscreteModel, grid: &'a TimeGrid) -> Self {
        let nt = grid.len();
        let phase_table = |energies: &[f64]| {
            let mut p = Vec::with_capacity(energies.len() * nt);
            for &e in energies {
                for m in 0..nt {
                    p.push(Complex64::from_polar(1.0, e * grid.time(m)));
                }
            }
            p
        };
        Self {
            model,
            grid,
            p1: phase_table(model.band1_energies()),
            p0: phase_table(model.band0_energies()),
            c2: (0..nt)
                .map(|m| Complex64::from_polar(1.0, -model.e2() * grid.time(m)))
                .collect(),
        }
    }

    fn p1(&self, k: usize) -> &[Complex64] {
        &self.p1[k * self.grid.len()..(k + 1) * self.grid.len()]
    }

    fn p0(&self, j: usize) -> &[Complex64] {
        &self.p0[j * self.grid.len()..(j + 1) * self.grid.len()]
    }

    fn apply(&self, channel: Channel, f: &SampledFunction) -> Result<SampledFunction, SeriesError> {
        let (n1, n0, nt) = (self.model.n1(), self.model.n0(), self.grid.len());
        if f.n_times != nt {
            return Err(SeriesError::GridMismatch {
                expected: nt,
                got: f.n_times,
            });
        }
        let expected = match channel {
            Channel::I12 => 1,
            Channel::I01 => n1,
            Channel::I10 => n0,
        };
        if f.components != expected {
            return Err(SeriesError::DimensionMismatch {
                expected,
                got: f.components,
            });
        }
        let mi = Complex64::new(0.0, -1.0);
        let h = self.grid.spacing();
        let mut integrand = vec![Complex64::new(0.0, 0.0); nt];
        Ok(match channel {
            Channel::I12 => {
                let mut out = SampledFunction::zeros(n1, nt);
                let src = f.component(0);
                for k in 0..n1 {
                    let gk = self.model.band1_couplings()[k];
                    let pk = self.p1(k);
                    for m in 0..nt {
                        integrand[m] = pk[m] * self.c2[m] * src[m];
                    }
                    let integral = cumulative_simpson(&integrand, h);
                    for (o, v) in out.component_mut(k).iter_mut().zip(integral) {
                        *o = mi * gk * v;
                    }
                }
                out
            }
            Channel::I01 => {
                let mut out = SampledFunction::zeros(n0, nt);
                match self.model.v10() {
                    Some(v10) => {
                        let s1 = self.band_sum(f, self.model.band1_weights(), &self.p1);
                        for j in 0..n0 {
                            let pj = self.p0(j);
                            for m in 0..nt {
                                integrand[m] = pj[m] * s1[m];
                            }
                            let integral = cumulative_simpson(&integrand, h);
                            let c = mi * v10 * self.model.band0_weights()[j];
                            for (o, v) in out.component_mut(j).iter_mut().zip(integral) {
                                *o = c * v;
                            }
                        }
                    }
                    None => {
                        let z = self.dressed(f, &self.p1);
                        for j in 0..n0 {
                            let pj = self.p0(j);
                            for m in 0..nt {
                                let mut acc = Complex64::new(0.0, 0.0);
                                for k in 0..n1 {
                                    acc += self.model.kernel_at(k, j) * z[k * nt + m];
                                }
                                integrand[m] = pj[m] * acc;
                            }
                            let integral = cumulative_simpson(&integrand, h);
                            for (o, v) in out.component_mut(j).iter_mut().zip(integral) {
                                *o = mi * v;
                            }
                        }
                    }
                }
                out
            }
            Channel::I10 => {
                let mut out = SampledFunction::zeros(n1, nt);
                match self.model.v10() {
                    Some(v10) => {
                        let s0 = self.band_sum(f, self.model.band0_weights(), &self.p0);
                        for k in 0..n1 {
                            let pk = self.p1(k);
                            for m in 0..nt {
                                integrand[m] = pk[m] * s0[m];
                            }
                            let integral = cumulative_simpson(&integrand, h);
                            let c = mi * v10 * self.model.band1_weights()[k];
                            for (o, v) in out.component_mut(k).iter_mut().zip(integral) {
                                *o = c * v;
                            }
                        }
                    }
                    None => {
                        let z = self.dressed(f, &self.p0);
                        for k in 0..n1 {
                            let pk = self.p1(k);
                            for m in 0..nt {
                                let mut acc = Complex64::new(0.0, 0.0);
                                for j in 0..n0 {
                                    acc += self.model.kernel_at(k, j) * z[j * nt + m];
                                }
                                integrand[m] = pk[m] * acc;
                            }
                            let integral = cumulative_simpson(&integrand, h);
                            for (o, v) in out.component_mut(k).iter_mut().zip(integral) {
                                *o = mi * v;
                            }
                        }
                    }
                }
                out
            }
        })
    }

    /// Σ_c weight_c · f_c(τ) · e^{−i e_c τ} for every τ.
    fn band_sum(&self, f: &SampledFunction, weights: &[f64], phases: &[Complex64]) -> Vec<Complex64> {
        let nt = self.grid.len();
        let mut s = vec![Complex64::new(0.0, 0.0); nt];
        for (c, &wc) in weights.iter().enumerate() {
            let fc = f.component(c);
            let pc = &phases[c * nt..(c + 1) * nt];
            for m in 0..nt {
                s[m] += wc * fc[m] * pc[m].conj();
            }
        }
        s
    }

    /// f_c(τ) · e^{−i e_c τ} tables for the dense-kernel contractions.
    fn dressed(&self, f: &SampledFunction, phases: &[Complex64]) -> Vec<Complex64> {
        let nt = self.grid.len();
        let mut z = vec![Complex64::new(0.0, 0.0); f.components * nt];
        for c in 0..f.components {
            let fc = f.component(c);
            for m in 0..nt {
                z[c * nt + m] = fc[m] * phases[c * nt + m].conj();
            }
        }
        z
    }

    /// Σₖ gₖ fₖ(τ) e^{−i(eₖ−E₂)τ}, the level-2 feedback of a band-1 function.
    fn contract_v21(&self, f: &SampledFunction) -> Vec<Complex64> {
        let nt = self.grid.len();
        let mut t = vec![Complex64::new(0.0, 0.0); nt];
        for (k, &gk) in self.model.band1_couplings().iter().enumerate() {
            let fk = f.component(k);
            let pk = self.p1(k);
            for m in 0..nt {
                t[m] += gk * fk[m] * (pk[m] * self.c2[m]).conj();
            }
        }
        t
    }
}

/// Running time integrals U₀..U_max of the chain terms at the grid horizon:
/// Uₙ = ∫₀ᵗ Σₖ gₖ e^{−i(eₖ−E₂)τ} [(I₁₀I₀₁)ⁿ I₁₂ e^{−Γτ}]ₖ dτ, the n-th
/// order contribution to 1 − a₂(t) under the exponential trial.
fn integrated_terms(
    rate_trial: f64,
    max_order: usize,
    grid: &TimeGrid,
    ws: &Workspace,
) -> Result<Vec<Complex64>, SeriesError> {
    let trial = SampledFunction::scalar(grid, |t| Complex64::new((-rate_trial * t).exp(), 0.0));
    let mut current = ws.apply(Channel::I12, &trial)?;
    let mut terms = Vec::with_capacity(max_order + 1);
    let h = grid.spacing();
    for order in 0..=max_order {
        let t_series = ws.contract_v21(&current);
        terms.push(*cumulative_simpson(&t_series, h).last().unwrap());
        if order < max_order {
            let into_band0 = ws.apply(Channel::I01, &current)?;
            current = ws.apply(Channel::I10, &into_band0)?;
        }
    }
    Ok(terms)
}

const TERM_FLOOR: f64 = 1e-16;

/// Stable-level solution of the decay onto band 1:
/// a1ₖ(t) = gₖ/(eₖ−E₂+iγ₂)·[1 − e^{i(eₖ−E₂+iγ₂)t}].
pub fn two_level_closed_form(
    model: &DiscreteModel,
    gamma2: f64,
    t: f64,
) -> Result<BandFunction, SeriesError> {
    if model.v10() != Some(0.0) {
        return Err(SeriesError::StableLevelRequired);
    }
    if !(gamma2 > 0.0 && gamma2.is_finite()) {
        return Err(SeriesError::BadRate { rate: gamma2 });
    }
    let values = model
        .band1_energies()
        .iter()
        .zip(model.band1_couplings())
        .map(|(&e, &g)| {
            let z = Complex64::new(e - model.e2(), gamma2);
            let one = Complex64::new(1.0, 0.0);
            g / z * (one - (Complex64::new(0.0, 1.0) * z * t).exp())
        })
        .collect();
    Ok(BandFunction { values, t })
}

/// Applies one integral channel to `f` sampled on `grid`, returning the
/// running integral −i∫₀^τ V·f at every grid instant (the whole series is
/// needed by the next operator in a chain, so no information is discarded).
pub fn apply_i(
    model: &DiscreteModel,
    channel: Channel,
    f: &SampledFunction,
    grid: &TimeGrid,
) -> Result<SampledFunction, SeriesError> {
    Workspace::new(model, grid).apply(channel, f)
}

/// Ratio of consecutive chain terms, the discrete measure of the geometric
/// structure of the cascade series: for flat profiles it approaches −N.
///
/// The ratio is taken between running time integrals Uₙ(t) of the terms
/// rather than between their instantaneous values. At any finite bandwidth
/// the raw terms carry a non-decaying band-edge ripple whose relative size
/// grows by 1/N per order and swamps the pointwise ratio; integrating over
/// [0, t] suppresses the ripple by roughly rate/bandwidth while leaving the
/// geometric factor intact, since each Uₙ is the n-th order contribution
/// to 1 − a₂(t).
pub fn neumann_term_ratio(
    model: &DiscreteModel,
    gamma2_trial: f64,
    n: usize,
    t: f64,
) -> Result<Complex64, SeriesError> {
    if n == 0 {
        return Err(SeriesError::BadOrder);
    }
    if !(gamma2_trial > 0.0 && gamma2_trial.is_finite()) {
        return Err(SeriesError::BadRate { rate: gamma2_trial });
    }
    let grid = TimeGrid::for_model(model, t, TimeGrid::DEFAULT_POINTS_PER_PERIOD)?;
    let ws = Workspace::new(model, &grid);
    let terms = integrated_terms(gamma2_trial, n, &grid, &ws)?;
    let floor = TERM_FLOOR * terms[0].norm();
    if terms[n - 1].norm() <= floor {
        return Err(SeriesError::TermUnderflow { order: n - 1 });
    }
    Ok(terms[n] / terms[n - 1])
}

const MAX_RATE_ITERATIONS: usize = 80;
const RATE_TOLERANCE: f64 = 1e-9;

/// Self-consistent decay rate from the chain series truncated at
/// `max_order`, with the truncated tail resummed geometrically from the
/// last available term ratio. Starting from the model's own golden-rule
/// estimate, the scalar fixed point Γ = Re[i·S(Γ)·Γ/(1−e^{−Γt})] is solved
/// by damped iteration (damping 0.5); for flat profiles the result
/// approaches γ₂/(1+N).
pub fn resummed_rate(model: &DiscreteModel, max_order: usize) -> Result<f64, SeriesError> {
    let gamma2_hat = discrete_golden_rule(model)?;
    if !(gamma2_hat > 0.0 && gamma2_hat.is_finite()) {
        return Err(SeriesError::BadRate { rate: gamma2_hat });
    }
    let t = 2.0 / gamma2_hat;
    let grid = TimeGrid::for_model(model, t, TimeGrid::DEFAULT_POINTS_PER_PERIOD)?;
    let ws = Workspace::new(model, &grid);
    let mut rate = gamma2_hat;
    for _ in 0..MAX_RATE_ITERATIONS {
        let terms = integrated_terms(rate, max_order, &grid, &ws)?;
        let mut sum: Complex64 = terms.iter().sum();
        if max_order >= 1 {
            let floor = TERM_FLOOR * terms[0].norm();
            let last = terms[max_order];
            let prev = terms[max_order - 1];
            if prev.norm() > floor && last.norm() > floor {
                let r = last / prev;
                if r.norm() >= 1.0 {
                    return Err(SeriesError::SeriesDiverging { ratio: r.norm() });
                }
                sum += last * r / (Complex64::new(1.0, 0.0) - r);
            }
        }
        let depletion = 1.0 - (-rate * t).exp();
        let next = (Complex64::new(0.0, 1.0) * sum * rate / depletion).re;
        if (next - rate).abs() <= RATE_TOLERANCE * rate.abs() {
            return Ok(next);
        }
        rate += 0.5 * (next - rate);
    }
    Err(SeriesError::NonConvergence {
        iterations: MAX_RATE_ITERATIONS,
    })
}

/// Golden-rule rate read off the discrete model itself: π·g²/Δ at the band-1
/// mode nearest the level, with Δ the local mode spacing.
fn discrete_golden_rule(model: &DiscreteModel) -> Result<f64, SeriesError> {
    let e = model.band1_energies();
    if e.len() < 2 {
        return Err(SeriesError::ModelTooSmall);
    }
    let k = (0..e.len())
        .min_by(|&a, &b| {
            let (da, db) = ((e[a] - model.e2()).abs(), (e[b] - model.e2()).abs());
            da.partial_cmp(&db).unwrap()
        })
        .unwrap();
    let spacing = if k == 0 {
        e[1] - e[0]
    } else if k == e.len() - 1 {
        e[k] - e[k - 1]
    } else {
        0.5 * (e[k + 1] - e[k - 1])
    };
    let g = model.band1_couplings()[k];
    Ok(std::f64::consts::PI * g * g / spacing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::build_discrete;
    use crate::dynamics::{integrate_with, IntegrateOptions};
    use crate::model::{CascadeSpec, CouplingProfile, EnergyGrid};
    use std::f64::consts::PI;

    fn flat_model(gamma2: f64, halfwidth: f64, n1: usize, n0: usize, n_factor: f64) -> DiscreteModel {
        let spec = CascadeSpec::new(
            0.0,
            EnergyGrid::new(0.0, halfwidth, n1).unwrap(),
            EnergyGrid::new(0.0, halfwidth, n0).unwrap(),
            CouplingProfile::Flat(1.0 / PI),
            CouplingProfile::Flat(1.0 / PI),
            CouplingProfile::Flat(gamma2.sqrt()),
            CouplingProfile::Flat(n_factor.sqrt()),
        )
        .unwrap();
        build_discrete(&spec)
    }

    #[test]
    fn time_grid_resolves_fastest_phase() {
        let m = flat_model(0.05, 1.0, 100, 100, 0.25);
        let grid = TimeGrid::for_model(&m, 20.0, 24).unwrap();
        assert_eq!(grid.n_intervals() % 2, 0);
        // fastest cross-band phase is just under 2.0
        let period = 2.0 * PI / 1.98;
        assert!(grid.spacing() <= period / 24.0);
        assert!((grid.time(grid.n_intervals()) - 20.0).abs() < 1e-12);
        assert_eq!(
            TimeGrid::for_model(&m, 20.0, 19).unwrap_err(),
            SeriesError::SubGridTooCoarse {
                points_per_period: 19
            }
        );
        assert_eq!(
            TimeGrid::for_model(&m, -1.0, 24).unwrap_err(),
            SeriesError::BadHorizon { t_end: -1.0 }
        );
    }

    #[test]
    fn cumulative_simpson_is_exact_on_quadratics() {
        let h = 0.3;
        let n = 11;
        let f: Vec<Complex64> = (0..n)
            .map(|m| {
                let t = m as f64 * h;
                Complex64::new(2.0 * t * t - t + 0.5, 3.0 * t * t)
            })
            .collect();
        let integral = cumulative_simpson(&f, h);
        for m in 0..n {
            let t = m as f64 * h;
            let exact = Complex64::new(
                2.0 / 3.0 * t * t * t - 0.5 * t * t + 0.5 * t,
                t * t * t,
            );
            assert!((integral[m] - exact).norm() < 1e-13, "sample {m}");
        }
    }

    #[test]
    fn cumulative_simpson_handles_cubics_at_pair_boundaries() {
        let h = 0.25;
        let f: Vec<Complex64> = (0..9)
            .map(|m| {
                let t = m as f64 * h;
                Complex64::new(t * t * t, 0.0)
            })
            .collect();
        let integral = cumulative_simpson(&f, h);
        for m in (0..9).step_by(2) {
            let t = m as f64 * h;
            assert!((integral[m].re - 0.25 * t.powi(4)).abs() < 1e-14);
        }
    }

    #[test]
    fn apply_i12_matches_the_analytic_mode_integral() {
        let gamma2 = 0.05;
        let m = flat_model(gamma2, 1.0, 50, 2, 0.0);
        let t = 1.0 / gamma2;
        let grid = TimeGrid::for_model(&m, t, 1024).unwrap();
        let trial = SampledFunction::scalar(&grid, |tau| {
            Complex64::new((-gamma2 * tau).exp(), 0.0)
        });
        let out = apply_i(&m, Channel::I12, &trial, &grid).unwrap();
        let last = out.band_at(&grid, grid.n_intervals());
        let exact = two_level_closed_form(&m, gamma2, t).unwrap();
        for (a, b) in last.values.iter().zip(&exact.values) {
            assert!((a - b).norm() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn apply_i_annihilates_zero_input_and_zero_coupling() {
        let m = flat_model(0.05, 1.0, 10, 8, 0.0);
        let grid = TimeGrid::for_model(&m, 5.0, 24).unwrap();
        let zero_in = SampledFunction::scalar(&grid, |_| Complex64::new(0.0, 0.0));
        let out = apply_i(&m, Channel::I12, &zero_in, &grid).unwrap();
        assert!(out.component(3).iter().all(|v| v.norm() == 0.0));
        // v10 = 0: the band-1 -> band-0 channel is dead no matter the input
        let ones = SampledFunction {
            components: m.n1(),
            n_times: grid.len(),
            values: vec![Complex64::new(1.0, 0.0); m.n1() * grid.len()],
        };
        let out = apply_i(&m, Channel::I01, &ones, &grid).unwrap();
        assert!(out.component(0).iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn apply_i_checks_arity() {
        let m = flat_model(0.05, 1.0, 10, 8, 0.25);
        let grid = TimeGrid::for_model(&m, 5.0, 24).unwrap();
        let scalar = SampledFunction::scalar(&grid, |_| Complex64::new(1.0, 0.0));
        assert_eq!(
            apply_i(&m, Channel::I01, &scalar, &grid).unwrap_err(),
            SeriesError::DimensionMismatch {
                expected: 10,
                got: 1
            }
        );
        let short = TimeGrid::with_intervals(5.0, grid.n_intervals() - 2).unwrap();
        let stale = SampledFunction::scalar(&short, |_| Complex64::new(1.0, 0.0));
        assert!(matches!(
            apply_i(&m, Channel::I12, &stale, &grid).unwrap_err(),
            SeriesError::GridMismatch { .. }
        ));
    }

    #[test]
    fn separable_and_dense_channels_agree() {
        let m = flat_model(0.05, 1.0, 7, 7, 0.5);
        let dense = m.with_dense_kernel();
        let grid = TimeGrid::for_model(&m, 10.0, 24).unwrap();
        let trial = SampledFunction::scalar(&grid, |tau| {
            Complex64::new((-0.05 * tau).exp(), 0.0)
        });
        let f1 = apply_i(&m, Channel::I12, &trial, &grid).unwrap();
        let f0 = apply_i(&m, Channel::I01, &f1, &grid).unwrap();
        let pairs = [
            (
                f0.clone(),
                apply_i(&dense, Channel::I01, &f1, &grid).unwrap(),
            ),
            (
                apply_i(&m, Channel::I10, &f0, &grid).unwrap(),
                apply_i(&dense, Channel::I10, &f0, &grid).unwrap(),
            ),
        ];
        for (a, b) in &pairs {
            for c in 0..a.components() {
                for (x, y) in a.component(c).iter().zip(b.component(c)) {
                    assert!((x - y).norm() <= 1e-14);
                }
            }
        }
    }

    #[test]
    fn closed_form_trivial_limits() {
        let m = DiscreteModel::from_parts(
            0.0,
            vec![-0.5, 0.0, 0.5],
            vec![0.1, 0.1, 0.1],
            vec![0.1, 0.1, 0.1],
            vec![],
            vec![],
            0.0,
        )
        .unwrap();
        let at_zero = two_level_closed_form(&m, 0.1, 0.0).unwrap();
        assert!(at_zero.values.iter().all(|v| v.norm() < 1e-15));
        // resonant mode saturates at g/gamma2
        let late = two_level_closed_form(&m, 0.1, 200.0).unwrap();
        assert!((late.values[1].norm() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn closed_form_requires_stable_lower_level() {
        let m = flat_model(0.05, 1.0, 10, 8, 0.25);
        assert_eq!(
            two_level_closed_form(&m, 0.05, 1.0).unwrap_err(),
            SeriesError::StableLevelRequired
        );
        let stable = flat_model(0.05, 1.0, 10, 8, 0.0);
        assert_eq!(
            two_level_closed_form(&stable, 0.0, 1.0).unwrap_err(),
            SeriesError::BadRate { rate: 0.0 }
        );
    }

    #[test]
    fn closed_form_matches_integration_within_rms_tolerance() {
        let gamma2 = 0.05;
        let t = 1.0 / gamma2;
        let m = flat_model(gamma2, 40.0 * gamma2, 1000, 2, 0.0);
        let opts = IntegrateOptions {
            snapshot_times: vec![t],
            ..Default::default()
        };
        let traj = integrate_with(&m, t, 0.02, 10, &opts).unwrap();
        let snap = &traj.snapshots()[0];
        let closed = two_level_closed_form(&m, gamma2, snap.t).unwrap();
        let mut err = 0.0;
        let mut norm = 0.0;
        for (a, b) in snap.a1.iter().zip(&closed.values) {
            err += (a - b).norm_sqr();
            norm += a.norm_sqr();
        }
        let rel = (err / norm).sqrt();
        assert!(rel <= 0.02, "componentwise RMS deviation {rel:.4}");
    }

    #[test]
    fn term_ratio_is_minus_n_for_flat_profiles() {
        let gamma2 = 0.05;
        let n_factor = 0.25;
        let m = flat_model(gamma2, 1.0, 800, 800, n_factor);
        let trial = gamma2 / (1.0 + n_factor);
        let r1 = neumann_term_ratio(&m, trial, 1, 1.0 / gamma2).unwrap();
        assert!(
            (r1 - Complex64::new(-n_factor, 0.0)).norm() <= 0.05 * n_factor,
            "first ratio {r1}"
        );
    }

    #[test]
    fn term_ratio_trivial_cases() {
        let m = flat_model(0.05, 1.0, 60, 60, 0.0);
        let r = neumann_term_ratio(&m, 0.05, 1, 10.0).unwrap();
        assert_eq!(r, Complex64::new(0.0, 0.0));
        assert_eq!(
            neumann_term_ratio(&m, 0.05, 2, 10.0).unwrap_err(),
            SeriesError::TermUnderflow { order: 1 }
        );
        assert_eq!(
            neumann_term_ratio(&m, 0.05, 0, 10.0).unwrap_err(),
            SeriesError::BadOrder
        );
    }

    #[test]
    fn term_ratio_ignores_coupling_sign() {
        let gamma2 = 0.05;
        let base = flat_model(gamma2, 1.0, 120, 120, 0.25);
        let flipped = DiscreteModel::from_parts(
            base.e2(),
            base.band1_energies().to_vec(),
            base.band1_couplings().to_vec(),
            base.band1_weights().to_vec(),
            base.band0_energies().to_vec(),
            base.band0_weights().to_vec(),
            -base.v10().unwrap(),
        )
        .unwrap();
        let a = neumann_term_ratio(&base, gamma2, 1, 1.0 / gamma2).unwrap();
        let b = neumann_term_ratio(&flipped, gamma2, 1, 1.0 / gamma2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resummed_rate_reduces_to_golden_rule_when_stable() {
        let gamma2 = 0.05;
        let m = flat_model(gamma2, 1.0, 800, 800, 0.0);
        let rate = resummed_rate(&m, 3).unwrap();
        assert!((rate - gamma2).abs() <= 0.02 * gamma2, "rate {rate}");
    }

    #[test]
    fn resummed_rate_order_zero_ignores_v10() {
        let gamma2 = 0.05;
        let stable = flat_model(gamma2, 1.0, 400, 400, 0.0);
        let unstable = flat_model(gamma2, 1.0, 400, 400, 0.8);
        let a = resummed_rate(&stable, 0).unwrap();
        let b = resummed_rate(&unstable, 0).unwrap();
        assert_eq!(a, b);
        assert!((a - gamma2).abs() <= 0.02 * gamma2);
    }

    #[test]
    fn resummed_rate_follows_suppression_law() {
        let gamma2 = 0.05;
        let n_factor = 0.5;
        let m = flat_model(gamma2, 1.0, 800, 800, n_factor);
        let rate = resummed_rate(&m, 3).unwrap();
        let predicted = gamma2 / (1.0 + n_factor);
        assert!(
            (rate - predicted).abs() <= 0.05 * predicted,
            "rate {rate} vs {predicted}"
        );
    }

    #[test]
    fn resummed_rate_rejects_non_geometric_series() {
        let m = flat_model(0.05, 1.0, 400, 400, 1.5);
        assert!(matches!(
            resummed_rate(&m, 2).unwrap_err(),
            SeriesError::SeriesDiverging { .. }
        ));
    }

    #[test]
    fn resummed_rate_needs_a_band() {
        let m = DiscreteModel::from_parts(0.0, vec![0.0], vec![0.1], vec![1.0], vec![], vec![], 0.0)
            .unwrap();
        assert_eq!(resummed_rate(&m, 1).unwrap_err(), SeriesError::ModelTooSmall);
    }
}
