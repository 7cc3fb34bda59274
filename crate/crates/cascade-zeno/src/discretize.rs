//! Conversion of the continuum description into a finite, exactly unitary
//! mode model.
//!
//! The sum-over-continuum → ∫ρ(E)dE rule is applied symmetrically: each
//! discrete mode absorbs √(ρΔE) into its coupling, so the discrete modes are
//! orthonormal, the state norm is a plain sum of |amplitude|², and norm
//! conservation becomes a machine-checkable invariant. The finite model is a
//! faithful surrogate only up to its Poincaré revival; see
//! [`recurrence_time`].

use crate::model::CascadeSpec;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BuildError {
    #[error("band arrays must have matching lengths ({what})")]
    MismatchedLengths { what: &'static str },
    #[error("band energies must be strictly increasing")]
    UnsortedBand,
}

/// 1 ↔ 0 coupling kernel h(k,j). For a flat V₁₀ it factorizes exactly as
/// v₁₀·wₖ·uⱼ and only the scalar is stored; otherwise the dense matrix is
/// materialized row-major (k-major).
#[derive(Debug, Clone)]
enum CouplingKernel {
    Separable { v10: f64 },
    Dense { h: Vec<f64> },
}

/// Finite-mode surrogate of a [`CascadeSpec`].
///
/// Band 1 modes carry energies eₖ, decay couplings gₖ = V₁₂(eₖ)·wₖ and
/// weights wₖ = √(ρ₁(eₖ)Δ₁); band 0 modes carry energies e′ⱼ and weights
/// uⱼ = √(ρ₀(e′ⱼ)Δ₀). All couplings are energies.
#[derive(Debug, Clone)]
pub struct DiscreteModel {
    e2: f64,
    band1_energies: Vec<f64>,
    band1_g: Vec<f64>,
    band1_w: Vec<f64>,
    band0_energies: Vec<f64>,
    band0_u: Vec<f64>,
    kernel: CouplingKernel,
}

impl DiscreteModel {
    /// Assembles a model from raw per-mode data, for hand-built surrogates
    /// (single-mode bands, empty bands) that the grid constructors refuse.
    /// The kernel is separable: h(k,j) = v10·w[k]·u[j].
    pub fn from_parts(
        e2: f64,
        band1_energies: Vec<f64>,
        band1_g: Vec<f64>,
        band1_w: Vec<f64>,
        band0_energies: Vec<f64>,
        band0_u: Vec<f64>,
        v10: f64,
    ) -> Result<Self, BuildError> {
        if band1_energies.len() != band1_g.len() || band1_energies.len() != band1_w.len() {
            return Err(BuildError::MismatchedLengths { what: "band 1" });
        }
        if band0_energies.len() != band0_u.len() {
            return Err(BuildError::MismatchedLengths { what: "band 0" });
        }
        for band in [&band1_energies, &band0_energies] {
            if band.windows(2).any(|p| p[1] <= p[0]) {
                return Err(BuildError::UnsortedBand);
            }
        }
        Ok(Self {
            e2,
            band1_energies,
            band1_g,
            band1_w,
            band0_energies,
            band0_u,
            kernel: CouplingKernel::Separable { v10 },
        })
    }

    pub fn e2(&self) -> f64 {
        self.e2
    }

    pub fn n1(&self) -> usize {
        self.band1_energies.len()
    }

    pub fn n0(&self) -> usize {
        self.band0_energies.len()
    }

    pub fn band1_energies(&self) -> &[f64] {
        &self.band1_energies
    }

    /// Decay couplings gₖ of the 2 → 1 transition.
    pub fn band1_couplings(&self) -> &[f64] {
        &self.band1_g
    }

    /// Quadrature weights wₖ = √(ρ₁(eₖ)Δ₁).
    pub fn band1_weights(&self) -> &[f64] {
        &self.band1_w
    }

    pub fn band0_energies(&self) -> &[f64] {
        &self.band0_energies
    }

    /// Quadrature weights uⱼ = √(ρ₀(e′ⱼ)Δ₀).
    pub fn band0_weights(&self) -> &[f64] {
        &self.band0_u
    }

    /// True when the 1 ↔ 0 kernel is stored in factorized rank-1 form.
    pub fn separable(&self) -> bool {
        matches!(self.kernel, CouplingKernel::Separable { .. })
    }

    /// Scalar v₁₀ of a separable kernel.
    pub fn v10(&self) -> Option<f64> {
        match self.kernel {
            CouplingKernel::Separable { v10 } => Some(v10),
            CouplingKernel::Dense { .. } => None,
        }
    }

    /// Kernel element h(k,j) regardless of storage form.
    pub fn kernel_at(&self, k: usize, j: usize) -> f64 {
        match &self.kernel {
            CouplingKernel::Separable { v10 } => v10 * self.band1_w[k] * self.band0_u[j],
            CouplingKernel::Dense { h } => h[k * self.n0() + j],
        }
    }

    /// Row k of a dense kernel, if one is materialized.
    pub(crate) fn dense_row(&self, k: usize) -> Option<&[f64]> {
        match &self.kernel {
            CouplingKernel::Separable { .. } => None,
            CouplingKernel::Dense { h } => {
                let n0 = self.n0();
                Some(&h[k * n0..(k + 1) * n0])
            }
        }
    }

    /// Same physics with the kernel materialized as a dense matrix, so the
    /// generic O(n₁·n₀) contraction path runs instead of the rank-1 one.
    pub fn with_dense_kernel(&self) -> Self {
        let n0 = self.n0();
        let h = match &self.kernel {
            CouplingKernel::Dense { h } => h.clone(),
            CouplingKernel::Separable { v10 } => {
                let mut h = Vec::with_capacity(self.n1() * n0);
                for &wk in &self.band1_w {
                    for &uj in &self.band0_u {
                        h.push(v10 * wk * uj);
                    }
                }
                h
            }
        };
        Self {
            kernel: CouplingKernel::Dense { h },
            ..self.clone()
        }
    }

    /// Σₖ gₖ², the discrete stand-in for ∫|V₁₂|²ρ₁ dE over the band; also
    /// the curvature of the early-time survival probability.
    pub fn sum_g_squared(&self) -> f64 {
        self.band1_g.iter().map(|g| g * g).sum()
    }

    /// Largest |mode energy − E₂| over both bands; sets the fastest
    /// interaction-picture phase and hence the step-size limit.
    pub fn max_detuning(&self) -> f64 {
        self.band1_energies
            .iter()
            .chain(self.band0_energies.iter())
            .map(|e| (e - self.e2).abs())
            .fold(0.0, f64::max)
    }
}

/// Discretizes `spec` into the unitary finite-mode surrogate. The kernel is
/// kept in rank-1 form exactly when `spec.v10` is flat.
pub fn build_discrete(spec: &CascadeSpec) -> DiscreteModel {
    let d1 = spec.grid1.spacing();
    let d0 = spec.grid0.spacing();
    let band1_energies: Vec<f64> = spec.grid1.points().to_vec();
    let band0_energies: Vec<f64> = spec.grid0.points().to_vec();
    let band1_w: Vec<f64> = band1_energies
        .iter()
        .map(|&e| (spec.rho1.eval(e) * d1).sqrt())
        .collect();
    let band1_g: Vec<f64> = band1_energies
        .iter()
        .zip(&band1_w)
        .map(|(&e, &w)| spec.v12.eval(e) * w)
        .collect();
    let band0_u: Vec<f64> = band0_energies
        .iter()
        .map(|&e| (spec.rho0.eval(e) * d0).sqrt())
        .collect();
    let kernel = match spec.v10 {
        crate::model::CouplingProfile::Flat(v10) => CouplingKernel::Separable { v10 },
        ref profile => {
            let mut h = Vec::with_capacity(band1_energies.len() * band0_energies.len());
            for (&ek, &wk) in band1_energies.iter().zip(&band1_w) {
                for (&ej, &uj) in band0_energies.iter().zip(&band0_u) {
                    h.push(profile.eval(ej - ek) * wk * uj);
                }
            }
            CouplingKernel::Dense { h }
        }
    };
    DiscreteModel {
        e2: spec.e2,
        band1_energies,
        band1_g,
        band1_w,
        band0_energies,
        band0_u,
        kernel,
    }
}

/// Poincaré revival time 2π/Δₘᵢₙ of the finite surrogate, where Δₘᵢₙ is the
/// smallest spacing between consecutive mode energies in either band.
/// Physical conclusions hold only for t < 0.5·recurrence_time. Models with
/// no band of two or more modes have no revival and return +∞.
pub fn recurrence_time(model: &DiscreteModel) -> f64 {
    let min_spacing = [model.band1_energies(), model.band0_energies()]
        .iter()
        .flat_map(|band| band.windows(2).map(|p| p[1] - p[0]))
        .fold(f64::INFINITY, f64::min);
    if min_spacing.is_infinite() {
        f64::INFINITY
    } else {
        2.0 * std::f64::consts::PI / min_spacing
    }
}
