//! Exhaustion-averaged traces of finite-propagation operators on discrete
//! models of open manifolds, heat semigroups built from them, and the
//! spectral invariants (densities, Betti numbers, Novikov–Shubin numbers)
//! derived from those traces.

pub mod error;
pub mod fit;
pub mod heat;
pub mod operator;
pub mod quadrature;
pub mod space;
pub mod spectral;
pub mod trace;

pub use error::{Error, Result};
pub use operator::KernelOperator;
pub use space::{Exhaustion, SiteSet, SpaceModel, SpaceSpec};
