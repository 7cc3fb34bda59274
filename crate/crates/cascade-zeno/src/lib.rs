//! Simulator and analysis toolkit for spontaneous decay in a three-level
//! cascade 2 → 1 → 0, where each transition emits a photon into its own
//! quasi-continuum of modes.
//!
//! The central quantity is the decay rate of the top level. When the
//! intermediate level is itself unstable, the 2 → 1 amplitude rate is not the
//! golden-rule value γ₂ but the suppressed
//!
//! ```text
//! Γ₂ = γ₂ / (1 + N),    N = π² ρ₀(E₂) |V₁₀|² ρ₁(E₂)
//! ```
//!
//! a continuous-measurement (Zeno) slowdown: the faster the 1 → 0 channel
//! drains the intermediate level, the slower the primary decay.
//!
//! Pipeline: [`model`] holds the continuum-level description and the
//! closed-form rate predictions; [`discretize`] turns it into an exactly
//! unitary finite-mode surrogate; [`dynamics`] integrates the coefficient
//! equations; [`series`] verifies the integral-operator (Neumann) series
//! structure behind the 1/(1+N) law; [`analysis`] extracts fitted rates and
//! assembles prediction-vs-simulation reports; [`cli`] exposes all of it as a
//! command-line tool.
//!
//! Conventions: ħ = 1, and every rate is an amplitude rate, a(t) ~ e^{−Γt};
//! populations decay as e^{−2Γt}.

pub mod analysis;
pub mod cli;
pub mod discretize;
pub mod dynamics;
pub mod model;
pub mod scenarios;
pub mod series;
