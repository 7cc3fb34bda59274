//! Time evolution of the finite-mode cascade model.
//!
//! The coupled amplitude equations are integrated in the interaction
//! picture, where the couplings carry explicit oscillatory phases and the
//! amplitudes themselves vary only on the slow decay scale. The stepper is
//! fixed-step classical Runge-Kutta (RK4): the fastest phase in the model
//! sets a known stiffness scale up front, and fixed steps make trajectories
//! bit-for-bit reproducible across runs and worker counts.
//!
//! Phases are evaluated by direct trigonometry from the absolute time of
//! each stage rather than by incremental rotation, so roundoff does not
//! accumulate over long runs.

use crate::discretize::{recurrence_time, DiscreteModel};
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("state has {got_n1}+{got_n0} band amplitudes, model has {n1}+{n0} modes")]
    DimensionMismatch {
        n1: usize,
        n0: usize,
        got_n1: usize,
        got_n0: usize,
    },
    #[error("dt = {dt} exceeds the phase-resolution limit {limit} for this model")]
    StepTooLarge { dt: f64, limit: f64 },
    #[error("dt must be positive and finite, got {dt}")]
    BadStep { dt: f64 },
    #[error("t_max must be positive and finite, got {t_max}")]
    BadDuration { t_max: f64 },
    #[error("sample stride must be at least 1")]
    BadSampleStride,
    #[error(
        "t_max = {t_max} reaches past half the recurrence time {recurrence} of this \
         discretization; refine the grids or opt in explicitly"
    )]
    BeyondRecurrence { t_max: f64, recurrence: f64 },
    #[error(
        "norm drifted to 1{drift:+e} at t = {t} (step {step}), beyond the {tolerance:e} \
         tolerance; reduce dt"
    )]
    NormDrift {
        t: f64,
        step: usize,
        drift: f64,
        tolerance: f64,
    },
    #[error("trajectory samples must be non-empty and of equal length")]
    BadSamples,
    #[error("trajectory sample times must be uniformly spaced and increasing")]
    UnevenSampling,
}

/// Instantaneous amplitudes (a₂, a₁ₖ, a₀ⱼ) at time `t`, in the interaction
/// picture. Total probability |a₂|² + Σ|a₁ₖ|² + Σ|a₀ⱼ|² is conserved by the
/// exact flow.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub a2: Complex64,
    pub a1: Vec<Complex64>,
    pub a0: Vec<Complex64>,
    pub t: f64,
}

impl StateVector {
    /// The canonical initial condition: all population on level 2.
    pub fn initial(model: &DiscreteModel) -> Self {
        let zero = Complex64::new(0.0, 0.0);
        Self {
            a2: Complex64::new(1.0, 0.0),
            a1: vec![zero; model.n1()],
            a0: vec![zero; model.n0()],
            t: 0.0,
        }
    }

    pub fn p2(&self) -> f64 {
        self.a2.norm_sqr()
    }

    pub fn p1(&self) -> f64 {
        self.a1.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn p0(&self) -> f64 {
        self.a0.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Total probability; exactly p2 + p1 + p0.
    pub fn norm(&self) -> f64 {
        self.p2() + self.p1() + self.p0()
    }
}

/// Uniformly sampled populations along one integration run, plus optional
/// full amplitude snapshots at requested instants.
#[derive(Debug, Clone)]
pub struct Trajectory {
    times: Vec<f64>,
    p2: Vec<f64>,
    p1: Vec<f64>,
    p0: Vec<f64>,
    norm: Vec<f64>,
    snapshots: Vec<StateVector>,
}

impl Trajectory {
    /// Rebuilds a trajectory from already-sampled columns, for analysis of
    /// data that did not come from [`integrate`] in this process (round
    /// trips through files, synthetic fixtures). Times must be uniform.
    pub fn from_samples(
        times: Vec<f64>,
        p2: Vec<f64>,
        p1: Vec<f64>,
        p0: Vec<f64>,
        norm: Vec<f64>,
    ) -> Result<Self, DynamicsError> {
        let n = times.len();
        if n == 0 || [&p2, &p1, &p0, &norm].iter().any(|c| c.len() != n) {
            return Err(DynamicsError::BadSamples);
        }
        if n > 1 {
            let d = times[1] - times[0];
            let uniform = d > 0.0
                && times
                    .windows(2)
                    .all(|p| ((p[1] - p[0]) - d).abs() <= 1e-9 * d.max(1.0));
            if !uniform {
                return Err(DynamicsError::UnevenSampling);
            }
        }
        Ok(Self {
            times,
            p2,
            p1,
            p0,
            norm,
            snapshots: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn p2(&self) -> &[f64] {
        &self.p2
    }

    pub fn p1(&self) -> &[f64] {
        &self.p1
    }

    pub fn p0(&self) -> &[f64] {
        &self.p0
    }

    pub fn norm(&self) -> &[f64] {
        &self.norm
    }

    pub fn snapshots(&self) -> &[StateVector] {
        &self.snapshots
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    /// Largest |norm − 1| over the samples.
    pub fn max_norm_drift(&self) -> f64 {
        self.norm.iter().map(|n| (n - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Knobs for [`integrate_with`]. Defaults match [`integrate`].
#[derive(Debug, Clone)]
pub struct IntegrateOptions {
    /// Hard limit on |norm − 1|; exceeding it aborts the run.
    pub norm_tolerance: f64,
    /// Permit t_max beyond half the recurrence time (revival studies).
    pub allow_beyond_recurrence: bool,
    /// Permit dt above the phase-resolution limit. The norm-drift guard
    /// still applies, which is the point: it is how over-coarse stepping is
    /// demonstrated to fail.
    pub bypass_step_limit: bool,
    /// Instants at which to record full amplitude snapshots; each is
    /// rounded to the nearest step.
    pub snapshot_times: Vec<f64>,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self {
            norm_tolerance: 1e-6,
            allow_beyond_recurrence: false,
            bypass_step_limit: false,
            snapshot_times: Vec::new(),
        }
    }
}

/// Suggested step for `model`: min(0.05/max-detuning, 0.01/Γ-predicted),
/// whichever scales are available. `None` when the model has no detuning
/// and no positive predicted rate to set a scale.
pub fn default_dt(model: &DiscreteModel, predicted_rate: f64) -> Option<f64> {
    let mut dt = f64::INFINITY;
    if model.max_detuning() > 0.0 {
        dt = dt.min(0.05 / model.max_detuning());
    }
    if predicted_rate > 0.0 {
        dt = dt.min(0.01 / predicted_rate);
    }
    dt.is_finite().then_some(dt)
}

/// Right-hand side of the interaction-picture amplitude equations:
///
/// ```text
/// da₂/dt  = −i Σₖ gₖ a₁ₖ e^{−i(eₖ−E₂)t}
/// da₁ₖ/dt = −i gₖ a₂ e^{+i(eₖ−E₂)t} − i Σⱼ h(k,j) a₀ⱼ e^{−i(e′ⱼ−eₖ)t}
/// da₀ⱼ/dt = −i Σₖ h(k,j) a₁ₖ e^{+i(e′ⱼ−eₖ)t}
/// ```
///
/// Returns the derivative packaged as a [`StateVector`] with the same time
/// stamp. For separable models the double sums contract in O(n₁+n₀) via the
/// shared band sums; dense kernels pay the full O(n₁·n₀) matrix pass.
pub fn rhs(state: &StateVector, model: &DiscreteModel) -> Result<StateVector, DynamicsError> {
    if state.a1.len() != model.n1() || state.a0.len() != model.n0() {
        return Err(DynamicsError::DimensionMismatch {
            n1: model.n1(),
            n0: model.n0(),
            got_n1: state.a1.len(),
            got_n0: state.a0.len(),
        });
    }
    let y = pack(state);
    let mut dy = vec![Complex64::new(0.0, 0.0); y.len()];
    let mut bufs = RhsBuffers::new(model);
    bufs.eval(model, state.t, &y, &mut dy);
    Ok(unpack(&dy, model, state.t))
}

/// Integrates from the level-2 initial state to `t_max` with fixed step
/// `dt`, recording populations every `sample_every` steps (the step count
/// is rounded up so the final step is sampled). Default guard rails; see
/// [`integrate_with`].
pub fn integrate(
    model: &DiscreteModel,
    t_max: f64,
    dt: f64,
    sample_every: usize,
) -> Result<Trajectory, DynamicsError> {
    integrate_with(model, t_max, dt, sample_every, &IntegrateOptions::default())
}

/// [`integrate`] with explicit [`IntegrateOptions`].
///
/// Guard rails, each an error rather than a silent degradation: `dt` must
/// resolve the fastest interaction-picture phase (dt ≤ 0.1·π/max-detuning),
/// the run must end before half the recurrence time, and |norm − 1| must
/// stay within tolerance at every sample.
pub fn integrate_with(
    model: &DiscreteModel,
    t_max: f64,
    dt: f64,
    sample_every: usize,
    options: &IntegrateOptions,
) -> Result<Trajectory, DynamicsError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::BadStep { dt });
    }
    if !(t_max > 0.0 && t_max.is_finite()) {
        return Err(DynamicsError::BadDuration { t_max });
    }
    if sample_every == 0 {
        return Err(DynamicsError::BadSampleStride);
    }
    let max_det = model.max_detuning();
    if max_det > 0.0 && !options.bypass_step_limit {
        let limit = 0.1 * std::f64::consts::PI / max_det;
        if dt > limit {
            return Err(DynamicsError::StepTooLarge { dt, limit });
        }
    }

    let mut n_steps = (t_max / dt - 1e-9).ceil().max(1.0) as usize;
    let rem = n_steps % sample_every;
    if rem != 0 {
        n_steps += sample_every - rem;
    }
    let t_end = n_steps as f64 * dt;
    let recurrence = recurrence_time(model);
    if t_end > 0.5 * recurrence && !options.allow_beyond_recurrence {
        return Err(DynamicsError::BeyondRecurrence {
            t_max: t_end,
            recurrence,
        });
    }

    let mut snapshot_steps: Vec<usize> = options
        .snapshot_times
        .iter()
        .map(|&t| ((t / dt).round().max(0.0) as usize).min(n_steps))
        .collect();
    snapshot_steps.sort_unstable();
    snapshot_steps.dedup();

    let dim = 1 + model.n1() + model.n0();
    let zero = Complex64::new(0.0, 0.0);
    let mut y = vec![zero; dim];
    y[0] = Complex64::new(1.0, 0.0);
    let mut k1 = vec![zero; dim];
    let mut k2 = vec![zero; dim];
    let mut k3 = vec![zero; dim];
    let mut k4 = vec![zero; dim];
    let mut ytmp = vec![zero; dim];
    let mut bufs = RhsBuffers::new(model);

    let n_samples = n_steps / sample_every + 1;
    let mut traj = Trajectory {
        times: Vec::with_capacity(n_samples),
        p2: Vec::with_capacity(n_samples),
        p1: Vec::with_capacity(n_samples),
        p0: Vec::with_capacity(n_samples),
        norm: Vec::with_capacity(n_samples),
        snapshots: Vec::with_capacity(snapshot_steps.len()),
    };
    record_sample(&mut traj, &y, model, 0.0);
    let mut next_snapshot = 0;
    if snapshot_steps.first() == Some(&0) {
        traj.snapshots.push(unpack(&y, model, 0.0));
        next_snapshot = 1;
    }

    for step in 1..=n_steps {
        let t0 = (step - 1) as f64 * dt;
        rk4_step(
            model, &mut bufs, t0, dt, &mut y, &mut k1, &mut k2, &mut k3, &mut k4, &mut ytmp,
        );
        let t = step as f64 * dt;
        if snapshot_steps.get(next_snapshot) == Some(&step) {
            traj.snapshots.push(unpack(&y, model, t));
            next_snapshot += 1;
        }
        if step % sample_every == 0 {
            let norm: f64 = y.iter().map(|c| c.norm_sqr()).sum();
            let drift = norm - 1.0;
            if drift.abs() > options.norm_tolerance {
                return Err(DynamicsError::NormDrift {
                    t,
                    step,
                    drift,
                    tolerance: options.norm_tolerance,
                });
            }
            record_sample(&mut traj, &y, model, t);
        }
    }
    Ok(traj)
}

fn record_sample(traj: &mut Trajectory, y: &[Complex64], model: &DiscreteModel, t: f64) {
    let n1 = model.n1();
    let p2 = y[0].norm_sqr();
    let p1: f64 = y[1..1 + n1].iter().map(|c| c.norm_sqr()).sum();
    let p0: f64 = y[1 + n1..].iter().map(|c| c.norm_sqr()).sum();
    traj.times.push(t);
    traj.p2.push(p2);
    traj.p1.push(p1);
    traj.p0.push(p0);
    traj.norm.push(p2 + p1 + p0);
}

fn pack(state: &StateVector) -> Vec<Complex64> {
    let mut y = Vec::with_capacity(1 + state.a1.len() + state.a0.len());
    y.push(state.a2);
    y.extend_from_slice(&state.a1);
    y.extend_from_slice(&state.a0);
    y
}

fn unpack(y: &[Complex64], model: &DiscreteModel, t: f64) -> StateVector {
    let n1 = model.n1();
    StateVector {
        a2: y[0],
        a1: y[1..1 + n1].to_vec(),
        a0: y[1 + n1..].to_vec(),
        t,
    }
}

/// Per-mode phase and contraction scratch, allocated once per run.
struct RhsBuffers {
    ph1: Vec<Complex64>,
    ph0: Vec<Complex64>,
    z1: Vec<Complex64>,
    z0: Vec<Complex64>,
    acc0: Vec<Complex64>,
}

impl RhsBuffers {
    fn new(model: &DiscreteModel) -> Self {
        let zero = Complex64::new(0.0, 0.0);
        Self {
            ph1: vec![zero; model.n1()],
            ph0: vec![zero; model.n0()],
            z1: vec![zero; model.n1()],
            z0: vec![zero; model.n0()],
            acc0: vec![zero; model.n0()],
        }
    }

    /// Writes the derivative of `y` at time `t` into `dy`. Phases e^{−ieₖt}
    /// and e^{−ie′ⱼt} are factored out so each appears once per mode.
    fn eval(&mut self, model: &DiscreteModel, t: f64, y: &[Complex64], dy: &mut [Complex64]) {
        let n1 = model.n1();
        let mi = Complex64::new(0.0, -1.0);
        let c2 = Complex64::from_polar(1.0, model.e2() * t);
        let (a1, a0) = y[1..].split_at(n1);
        let a2 = y[0];
        let g = model.band1_couplings();

        for ((ph, z), (&e, &a)) in self
            .ph1
            .iter_mut()
            .zip(self.z1.iter_mut())
            .zip(model.band1_energies().iter().zip(a1))
        {
            *ph = Complex64::from_polar(1.0, -e * t);
            *z = a * *ph;
        }
        for ((ph, z), (&e, &a)) in self
            .ph0
            .iter_mut()
            .zip(self.z0.iter_mut())
            .zip(model.band0_energies().iter().zip(a0))
        {
            *ph = Complex64::from_polar(1.0, -e * t);
            *z = a * *ph;
        }

        let sum_g: Complex64 = g.iter().zip(&self.z1).map(|(&gk, zk)| gk * zk).sum();
        dy[0] = mi * c2 * sum_g;

        let drive = a2 * c2.conj();
        let (d1, d0) = dy[1..].split_at_mut(n1);
        match model.v10() {
            Some(v10) => {
                let w = model.band1_weights();
                let u = model.band0_weights();
                let s0: Complex64 = if v10 != 0.0 {
                    u.iter().zip(&self.z0).map(|(&uj, zj)| uj * zj).sum()
                } else {
                    Complex64::new(0.0, 0.0)
                };
                let s1: Complex64 = w.iter().zip(&self.z1).map(|(&wk, zk)| wk * zk).sum();
                for (k, d) in d1.iter_mut().enumerate() {
                    *d = mi * self.ph1[k].conj() * (g[k] * drive + v10 * w[k] * s0);
                }
                for (j, d) in d0.iter_mut().enumerate() {
                    *d = mi * self.ph0[j].conj() * (v10 * u[j] * s1);
                }
            }
            None => {
                let zero = Complex64::new(0.0, 0.0);
                self.acc0.fill(zero);
                for (k, d) in d1.iter_mut().enumerate() {
                    let row = model.dense_row(k).expect("dense kernel");
                    let mut acc1 = zero;
                    let zk = self.z1[k];
                    for ((&hkj, zj), a) in row.iter().zip(&self.z0).zip(self.acc0.iter_mut()) {
                        acc1 += hkj * zj;
                        *a += hkj * zk;
                    }
                    *d = mi * self.ph1[k].conj() * (g[k] * drive + acc1);
                }
                for (j, d) in d0.iter_mut().enumerate() {
                    *d = mi * self.ph0[j].conj() * self.acc0[j];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn rk4_step(
    model: &DiscreteModel,
    bufs: &mut RhsBuffers,
    t: f64,
    dt: f64,
    y: &mut [Complex64],
    k1: &mut [Complex64],
    k2: &mut [Complex64],
    k3: &mut [Complex64],
    k4: &mut [Complex64],
    ytmp: &mut [Complex64],
) {
    let half = 0.5 * dt;
    bufs.eval(model, t, y, k1);
    for i in 0..y.len() {
        ytmp[i] = y[i] + half * k1[i];
    }
    bufs.eval(model, t + half, ytmp, k2);
    for i in 0..y.len() {
        ytmp[i] = y[i] + half * k2[i];
    }
    bufs.eval(model, t + half, ytmp, k3);
    for i in 0..y.len() {
        ytmp[i] = y[i] + dt * k3[i];
    }
    bufs.eval(model, t + dt, ytmp, k4);
    let sixth = dt / 6.0;
    for i in 0..y.len() {
        y[i] += sixth * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]);
    }
}
