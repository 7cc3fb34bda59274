//! Continuum-level description of the cascade and closed-form rate
//! predictions.
//!
//! A [`CascadeSpec`] fixes the top-level energy E₂, the two photon bands
//! (states |1E⟩ reached by the 2 → 1 transition and |0E⟩ reached by 1 → 0,
//! both labeled by total energy), their spectral densities ρ₁, ρ₀, and the
//! coupling matrix elements V₁₂(E) and V₁₀(E′−E). From it follow the
//! golden-rule amplitude rate γ₂, the dimensionless instability factor N of
//! the intermediate level, and the suppressed rate Γ₂ = γ₂/(1+N).

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("grid count must be at least 2, got {0}")]
    GridCount(usize),
    #[error("grid halfwidth must be positive, got {0}")]
    GridHalfwidth(f64),
    #[error("level energy {e2} lies outside the open band ({lo}, {hi}) of {band}")]
    LevelOutsideBand {
        e2: f64,
        lo: f64,
        hi: f64,
        band: &'static str,
    },
    #[error("{what} must be finite and non-negative, got {value}")]
    BadProfileValue { what: &'static str, value: f64 },
    #[error("lorentzian width must be positive, got {0}")]
    LorentzianWidth(f64),
    #[error("tabulated profile needs at least one point")]
    TabulatedEmpty,
    #[error("tabulated energies must be strictly increasing")]
    TabulatedOrder,
}

/// Uniform energy grid over `[center - halfwidth, center + halfwidth]` with
/// modes at band midpoints, so no mode sits on a band edge and all
/// quadrature weights are equal.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyGrid {
    center: f64,
    halfwidth: f64,
    count: usize,
    spacing: f64,
    points: Vec<f64>,
}

impl EnergyGrid {
    pub fn new(center: f64, halfwidth: f64, count: usize) -> Result<Self, SpecError> {
        if count < 2 {
            return Err(SpecError::GridCount(count));
        }
        if !(halfwidth > 0.0) || !halfwidth.is_finite() {
            return Err(SpecError::GridHalfwidth(halfwidth));
        }
        let spacing = 2.0 * halfwidth / count as f64;
        let points = (0..count)
            .map(|k| center - halfwidth + (k as f64 + 0.5) * spacing)
            .collect();
        Ok(Self {
            center,
            halfwidth,
            count,
            spacing,
            points,
        })
    }

    pub fn center(&self) -> f64 {
        self.center
    }

    pub fn halfwidth(&self) -> f64 {
        self.halfwidth
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Lower and upper band edges.
    pub fn edges(&self) -> (f64, f64) {
        (self.center - self.halfwidth, self.center + self.halfwidth)
    }

    /// Same band, `factor` times as many modes.
    pub fn refined(&self, factor: usize) -> Result<Self, SpecError> {
        Self::new(self.center, self.halfwidth, self.count * factor)
    }
}

/// Energy dependence of a spectral density or coupling matrix element.
///
/// `Flat` is the regime in which the closed-form rate predictions hold
/// ("slow functions of energy"); `Lorentzian` models a narrow-peak density,
/// `Tabulated` interpolates measured or hand-built shapes linearly and
/// clamps outside its range.
#[derive(Debug, Clone, PartialEq)]
pub enum CouplingProfile {
    Flat(f64),
    Lorentzian { center: f64, width: f64, peak: f64 },
    Tabulated(Vec<(f64, f64)>),
}

impl CouplingProfile {
    pub fn validate(&self, what: &'static str) -> Result<(), SpecError> {
        match self {
            Self::Flat(v) => check_value(what, *v),
            Self::Lorentzian { width, peak, .. } => {
                if !(*width > 0.0) || !width.is_finite() {
                    return Err(SpecError::LorentzianWidth(*width));
                }
                check_value(what, *peak)
            }
            Self::Tabulated(pairs) => {
                if pairs.is_empty() {
                    return Err(SpecError::TabulatedEmpty);
                }
                for pair in pairs.windows(2) {
                    if pair[1].0 <= pair[0].0 {
                        return Err(SpecError::TabulatedOrder);
                    }
                }
                for &(_, v) in pairs {
                    check_value(what, v)?;
                }
                Ok(())
            }
        }
    }

    /// Value at energy `e`; finite and non-negative for validated profiles.
    pub fn eval(&self, e: f64) -> f64 {
        match self {
            Self::Flat(v) => *v,
            Self::Lorentzian {
                center,
                width,
                peak,
            } => {
                let d = e - center;
                peak * width * width / (d * d + width * width)
            }
            Self::Tabulated(pairs) => {
                let n = pairs.len();
                if e <= pairs[0].0 {
                    return pairs[0].1;
                }
                if e >= pairs[n - 1].0 {
                    return pairs[n - 1].1;
                }
                let i = pairs.partition_point(|&(x, _)| x <= e);
                let (x0, y0) = pairs[i - 1];
                let (x1, y1) = pairs[i];
                y0 + (y1 - y0) * (e - x0) / (x1 - x0)
            }
        }
    }

    pub fn is_flat(&self) -> bool {
        matches!(self, Self::Flat(_))
    }
}

fn check_value(what: &'static str, v: f64) -> Result<(), SpecError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(SpecError::BadProfileValue { what, value: v })
    }
}

/// Full physical description of the cascade.
///
/// Only the top-level energy `e2` enters the dynamics as a level energy; the
/// two continua are labeled by total energy. `v10` is modeled as a function
/// of the emitted-photon detuning E′ − E, so its `Flat` variant recovers the
/// constant-matrix-element regime of the rate formulas.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeSpec {
    pub e2: f64,
    pub grid1: EnergyGrid,
    pub grid0: EnergyGrid,
    pub rho1: CouplingProfile,
    pub rho0: CouplingProfile,
    pub v12: CouplingProfile,
    pub v10: CouplingProfile,
}

impl CascadeSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        e2: f64,
        grid1: EnergyGrid,
        grid0: EnergyGrid,
        rho1: CouplingProfile,
        rho0: CouplingProfile,
        v12: CouplingProfile,
        v10: CouplingProfile,
    ) -> Result<Self, SpecError> {
        for (grid, band) in [(&grid1, "grid1"), (&grid0, "grid0")] {
            let (lo, hi) = grid.edges();
            if !(e2 > lo && e2 < hi) {
                return Err(SpecError::LevelOutsideBand { e2, lo, hi, band });
            }
        }
        rho1.validate("rho1")?;
        rho0.validate("rho0")?;
        v12.validate("v12")?;
        v10.validate("v10")?;
        Ok(Self {
            e2,
            grid1,
            grid0,
            rho1,
            rho0,
            v12,
            v10,
        })
    }
}

/// Closed-form rate predictions for a cascade. All rates are amplitude
/// rates: populations decay at twice these values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatePrediction {
    /// Golden-rule amplitude rate of the bare 2 → 1 decay.
    pub gamma2: f64,
    /// Instability factor N of the intermediate level.
    pub n_factor: f64,
    /// Suppressed rate γ₂/(1+N).
    pub gamma2_modified: f64,
    /// Rough estimate N·Γ₂ for the intermediate level's own rate.
    pub gamma1_estimate: f64,
    /// Set when N ≥ 1, where the geometric-series derivation of the 1/(1+N)
    /// law is no longer guaranteed to converge.
    pub n_warning: bool,
}

/// Golden-rule amplitude rate γ₂ = π ρ₁(E₂) |V₁₂(E₂)|².
pub fn golden_rule_rate(spec: &CascadeSpec) -> f64 {
    let v = spec.v12.eval(spec.e2);
    std::f64::consts::PI * spec.rho1.eval(spec.e2) * v * v
}

/// Instability factor N = π² ρ₀(E₂) |V₁₀(0)|² ρ₁(E₂), with V₁₀ evaluated at
/// zero detuning (the resonant 1 → 0 transition).
pub fn zeno_factor(spec: &CascadeSpec) -> f64 {
    let pi = std::f64::consts::PI;
    let v = spec.v10.eval(0.0);
    pi * pi * spec.rho0.eval(spec.e2) * v * v * spec.rho1.eval(spec.e2)
}

/// Assembles γ₂, N, the suppressed rate Γ₂ = γ₂/(1+N), and the Γ₁ ≈ N·Γ₂
/// estimate.
pub fn predict_rates(spec: &CascadeSpec) -> RatePrediction {
    let gamma2 = golden_rule_rate(spec);
    let n_factor = zeno_factor(spec);
    let gamma2_modified = gamma2 / (1.0 + n_factor);
    RatePrediction {
        gamma2,
        n_factor,
        gamma2_modified,
        gamma1_estimate: n_factor * gamma2_modified,
        n_warning: n_factor >= 1.0,
    }
}
