//! Reference scenarios shared by the command-line tool and the integration
//! suites.
//!
//! The flat family pins both spectral densities at 1/π so the two headline
//! parameters appear directly: the golden-rule amplitude rate is exactly
//! `gamma2` and the instability factor is exactly `n_factor`.

use crate::discretize::DiscreteModel;
use crate::model::{CascadeSpec, CouplingProfile, EnergyGrid, SpecError};
use std::f64::consts::PI;

/// Flat-band cascade with ρ₁ = ρ₀ = 1/π, V₁₂ = √`gamma2`, V₁₀ = √`n_factor`,
/// both bands centered on the top level with the same halfwidth.
pub fn flat(
    gamma2: f64,
    halfwidth: f64,
    n1: usize,
    n0: usize,
    n_factor: f64,
) -> Result<CascadeSpec, SpecError> {
    for (what, v) in [("gamma2", gamma2), ("n_factor", n_factor)] {
        if !v.is_finite() || v < 0.0 {
            return Err(SpecError::BadProfileValue { what, value: v });
        }
    }
    CascadeSpec::new(
        0.0,
        EnergyGrid::new(0.0, halfwidth, n1)?,
        EnergyGrid::new(0.0, halfwidth, n0)?,
        CouplingProfile::Flat(1.0 / PI),
        CouplingProfile::Flat(1.0 / PI),
        CouplingProfile::Flat(gamma2.sqrt()),
        CouplingProfile::Flat(n_factor.sqrt()),
    )
}

/// Single resonant mode coupled to the top level with strength `omega` and
/// no second band: the survival probability is cos²(omega·t) exactly, which
/// makes this the integrator's closed-form oracle.
pub fn rabi_pair(omega: f64) -> DiscreteModel {
    DiscreteModel::from_parts(0.0, vec![0.0], vec![omega], vec![1.0], vec![], vec![], 0.0)
        .expect("fixed single-mode layout is always valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::predict_rates;

    #[test]
    fn flat_parameters_map_straight_onto_rates() {
        let p = predict_rates(&flat(0.05, 1.0, 100, 2, 0.25).unwrap());
        assert!((p.gamma2 - 0.05).abs() <= 1e-16);
        assert!((p.n_factor - 0.25).abs() <= 1e-15);
        assert!((p.gamma2_modified - 0.04).abs() <= 1e-15);
        assert!(!p.n_warning);
    }

    #[test]
    fn flat_rejects_negative_headline_parameters() {
        assert_eq!(
            flat(-0.05, 1.0, 100, 2, 0.0).unwrap_err(),
            SpecError::BadProfileValue {
                what: "gamma2",
                value: -0.05
            }
        );
        assert_eq!(
            flat(0.05, 1.0, 100, 2, -1.0).unwrap_err(),
            SpecError::BadProfileValue {
                what: "n_factor",
                value: -1.0
            }
        );
    }

    #[test]
    fn rabi_pair_is_one_resonant_mode() {
        let m = rabi_pair(0.1);
        assert_eq!((m.n1(), m.n0()), (1, 0));
        assert_eq!(m.sum_g_squared(), 0.1 * 0.1);
        assert_eq!(m.max_detuning(), 0.0);
        assert_eq!(m.v10(), Some(0.0));
    }
}
