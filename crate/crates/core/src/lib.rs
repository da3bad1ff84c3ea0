//! Adapter recycling through a shared principal subspace.
//!
//! A collection of low-rank adapters is stacked per site, centered, and
//! decomposed into a small orthonormal basis. New adapters are then either
//! projected onto that basis in closed form or learned as a handful of
//! coefficients against it.
//!
//! The numerical core is generic over `f32`/`f64` through [`Scalar`]; the
//! aliases below fix the double-precision variants used by the CLI.

pub mod accounting;
pub mod adapt;
pub mod domain_sim;
pub mod error;
pub mod linalg;
pub mod projection;
pub mod scalar;
pub mod store;
pub mod subspace;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use store::{AdapterBundle, Role, SiteId, SiteMatrix};
pub use subspace::{KPolicy, SvdMode};

pub type Subspace = subspace::SiteSubspace<f64>;
pub type Subspace32 = subspace::SiteSubspace<f32>;
pub type SubspaceSet = subspace::SubspaceSet<f64>;
pub type SubspaceSet32 = subspace::SubspaceSet<f32>;
pub type Coefficients = projection::SiteCoefficients<f64>;
pub type CoefficientSet = projection::CoefficientSet<f64>;
pub type CoefficientSet32 = projection::CoefficientSet<f32>;
pub type Task = adapt::LinearTask<f64>;
pub type Task32 = adapt::LinearTask<f32>;
pub type Domain = domain_sim::SyntheticDomain<f64>;
