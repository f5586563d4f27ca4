//! The environment process seen from a walker conditioned on its velocity.

pub mod empirics;
pub mod exact;
pub mod htransform_mu;
pub mod observable;

pub use empirics::*;
pub use exact::*;
pub use htransform_mu::*;
pub use observable::{probe_measurability, CellView, CylinderFunction, Expr};
