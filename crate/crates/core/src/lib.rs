//! Numerical laboratory for the functional renormalization group on
//! desk-scale lattice scalar field theories.
//!
//! The pipeline runs bare action → Wetterich flow → layered sampling
//! cascade → n-point correlators → amputated scattering elements, and every
//! stage ships with an independent oracle (closed form, quadrature, or a
//! brute-force sum) so the identities connecting them can be audited.
//!
//! All integrals are Euclidean lattice sums: `∫d^d x ↦ a^d Σ_x` and
//! functional measures become tensor-product quadrature over at most a
//! handful of sites.

pub mod action;
pub mod cascade;
pub mod correlators;
mod error;
pub mod export;
pub mod flow;
pub mod lattice;
pub mod legendre;
pub mod lsz_fock;
pub mod quadrature;
pub mod regulator;

pub use error::{Error, Result};

pub use action::{BareActionParams, SourceField};
pub use cascade::{CascadeSpec, SampleBatch, SamplerSettings};
pub use correlators::{CorrelatorRequest, GammaEstimate};
pub use flow::{
    FlowSettings, FlowState, FlowTrajectory, Functional, GridPotential, QuadraticFunctional,
    Representation,
};
pub use lattice::{FieldConfig, LatticeSpec, MomentumVector};
pub use legendre::ConvexFunctionTable;
pub use lsz_fock::{FockState, GateMatrix, SMatrixElement};
pub use regulator::{RegulatorFamily, RegulatorSpec};

pub use num_complex::Complex64;
